//! Parameter storage and the layers the network is assembled from.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::corpus::Vocabulary;
use crate::error::{arg_err, dim_err, FvnError, Result};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replace every value, keeping names. Shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return dim_err("assign", format!("{} tensors for {} parameters", values.len(), self.values.len()));
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return dim_err(
                    "assign",
                    format!("{}: {:?} vs {:?}", self.names[i], old.shape(), new.shape()),
                );
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Lazily places parameters on a tape, once per tape.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    /// `trainable = false` binds parameters as constants, so nothing is
    /// recorded (inference).
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Binder { tape, store, trainable, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        vars[id.0]
            .get_or_insert_with(|| {
                let value = self.store.get(id).clone();
                if self.trainable {
                    self.tape.param(value)
                } else {
                    self.tape.constant(value)
                }
            })
            .clone()
    }

    /// Gradient per parameter, zero-filled for parameters that were never
    /// bound or received nothing.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| match &vars[id.0] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], (6.0 / (rows + cols) as f64).sqrt())
}

/// Fresh embedding table, rows of unit expected norm.
pub fn init_embedding(rng: &mut impl Rng, vocab: usize, dim: usize) -> Tensor {
    uniform(rng, &[vocab, dim], (3.0 / dim as f64).sqrt())
}

/// Affine map `W·x + b`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl DenseLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, output, input));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        DenseLayer { weight, bias, input, output }
    }

    pub fn apply<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        if x.shape() != [self.input] {
            return dim_err("dense", format!("input {:?}, layer expects [{}]", x.shape(), self.input));
        }
        b.var(self.weight).matmul(x)?.add(&b.var(self.bias))
    }
}

/// Single LSTM cell; gates packed as rows `[input; forget; cell; output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

pub(crate) const FORGET_BIAS: f64 = 1.0;

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, 4 * hidden, input + hidden));
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = FORGET_BIAS);
        let bias = store.add(format!("{name}.bias"), bias);
        LstmCell { weight, bias, input, hidden }
    }

    /// One step; returns `(h', c')`. The cell's output equals `h'`.
    pub fn step<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: &Var<'t>,
        h: &Var<'t>,
        c: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let hd = self.hidden;
        if x.shape() != [self.input] || h.shape() != [hd] || c.shape() != [hd] {
            return dim_err(
                "lstm_step",
                format!(
                    "x {:?}, h {:?}, c {:?} for cell ({}, {hd})",
                    x.shape(),
                    h.shape(),
                    c.shape(),
                    self.input
                ),
            );
        }
        let xh = Var::concat(&[x.clone(), h.clone()], 0)?;
        let gates = b.var(self.weight).matmul(&xh)?.add(&b.var(self.bias))?;
        let i = gates.slice(0, 0, hd)?.sigmoid()?;
        let f = gates.slice(0, hd, hd)?.sigmoid()?;
        let g = gates.slice(0, 2 * hd, hd)?.tanh()?;
        let o = gates.slice(0, 3 * hd, hd)?.sigmoid()?;
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh()?)?;
        Ok((h_next, c_next))
    }
}

/// Output of a recurrent encoder.
pub struct Encoded<'t> {
    /// Per-position outputs, each of width `D`.
    pub rows: Vec<Var<'t>>,
    /// The rows stacked as an `L × D` matrix.
    pub matrix: Var<'t>,
    /// The final row (`rows[L-1]`).
    pub last: Var<'t>,
}

/// Stacked bidirectional LSTM with per-direction width `D/2`, so each layer
/// emits width `D`.
#[derive(Clone, Debug)]
pub struct BiLstmStack {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub width: usize,
}

impl BiLstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        width: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width % 2 != 0 || width == 0 {
            return arg_err(format!("bidirectional width must be even and positive, got {width}"));
        }
        if num_layers == 0 {
            return arg_err("encoder needs at least one layer");
        }
        let half = width / 2;
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input } else { width };
                let fwd = LstmCell::new(store, &format!("{name}.l{l}.fwd"), inp, half, rng);
                let bwd = LstmCell::new(store, &format!("{name}.l{l}.bwd"), inp, half, rng);
                (fwd, bwd)
            })
            .collect();
        Ok(BiLstmStack { layers, width })
    }

    pub fn encode<'t>(&self, b: &Binder<'t, '_>, inputs: &[Var<'t>]) -> Result<Encoded<'t>> {
        if inputs.is_empty() {
            return arg_err("cannot encode an empty sequence");
        }
        let tape = b.tape();
        let half = self.width / 2;
        let zeros = tape.constant(Tensor::zeros(&[half]));
        let mut seq: Vec<Var<'t>> = inputs.to_vec();
        for (fwd, bwd) in &self.layers {
            let n = seq.len();
            let mut fwd_out = Vec::with_capacity(n);
            let (mut h, mut c) = (zeros.clone(), zeros.clone());
            for x in &seq {
                (h, c) = fwd.step(b, x, &h, &c)?;
                fwd_out.push(h.clone());
            }
            let mut bwd_out = vec![zeros.clone(); n];
            let (mut h, mut c) = (zeros.clone(), zeros.clone());
            for t in (0..n).rev() {
                (h, c) = bwd.step(b, &seq[t], &h, &c)?;
                bwd_out[t] = h.clone();
            }
            seq = fwd_out
                .into_iter()
                .zip(bwd_out)
                .map(|(f, r)| Var::concat(&[f, r], 0))
                .collect::<Result<_>>()?;
        }
        let matrix = Var::stack_rows(&seq)?;
        let last = seq.last().expect("nonempty").clone();
        Ok(Encoded { rows: seq, matrix, last })
    }
}

/// Embed a token-id sequence through the table `emb`.
pub fn embed<'t>(b: &Binder<'t, '_>, emb: ParamId, ids: &[u32]) -> Result<Vec<Var<'t>>> {
    let table = b.var(emb);
    ids.iter().map(|&id| table.row(id as usize)).collect()
}

/// Bilinear attention with a learned key projection from `D` to the query
/// width `2D`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub key_proj: ParamId,
    pub bilinear: ParamId,
    pub key_width: usize,
    pub query_width: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, key_width: usize, query_width: usize, rng: &mut impl Rng) -> Self {
        let key_proj = store.add(format!("{name}.key_proj"), xavier(rng, key_width, query_width));
        let bilinear = store.add(format!("{name}.bilinear"), xavier(rng, query_width, query_width));
        Attention { key_proj, bilinear, key_width, query_width }
    }

    /// Keys `L × D` → projected keys `L × 2D`. Reusable across decode steps.
    pub fn project_keys<'t>(&self, b: &Binder<'t, '_>, keys: &Var<'t>) -> Result<Var<'t>> {
        match keys.shape() {
            [l, d] if *l >= 1 && *d == self.key_width => keys.matmul(&b.var(self.key_proj)),
            s => dim_err("attention", format!("keys {s:?}, expected [L, {}]", self.key_width)),
        }
    }

    /// Returns `(context, weights)` against already projected keys.
    pub fn attend_projected<'t>(
        &self,
        b: &Binder<'t, '_>,
        query: &Var<'t>,
        projected: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if query.shape() != [self.query_width] {
            return dim_err("attention", format!("query {:?}, expected [{}]", query.shape(), self.query_width));
        }
        let transformed = b.var(self.bilinear).matmul(query)?;
        let scores = projected.matmul(&transformed)?;
        let weights = scores.softmax(0)?;
        let context = weights.matmul(projected)?;
        Ok((context, weights))
    }

    pub fn attend<'t>(&self, b: &Binder<'t, '_>, query: &Var<'t>, keys: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if keys.shape().first() == Some(&0) {
            return arg_err("attention over empty keys");
        }
        let projected = self.project_keys(b, keys)?;
        self.attend_projected(b, query, &projected)
    }
}

/// Read a whitespace-separated embedding file (`token v1 … vD` per line).
///
/// Rows for vocabulary entries missing from the file are the mean of the
/// loaded vectors plus uniform noise in ±1e-3.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let reader = BufReader::new(File::open(path)?);
    let mut found: HashMap<u32, Vec<f64>> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FvnError::Format { line: lineno + 1, message: format!("bad float: {e}") })?;
        if values.len() != dim {
            return Err(FvnError::Format {
                line: lineno + 1,
                message: format!("expected {dim} values, got {}", values.len()),
            });
        }
        if let Some(id) = vocab.id(token) {
            found.entry(id).or_insert(values);
        }
    }
    if found.is_empty() {
        return Err(FvnError::Init("no vocabulary token found in the embedding file".into()));
    }
    let mut mean = vec![0.0; dim];
    let mut ids: Vec<&u32> = found.keys().collect();
    ids.sort();
    for id in &ids {
        mean.iter_mut().zip(&found[id]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= found.len() as f64);
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    for row in 0..vocab.len() {
        let dst = table.row_mut(row);
        match found.get(&(row as u32)) {
            Some(v) => dst.copy_from_slice(v),
            None => {
                for (d, m) in dst.iter_mut().zip(&mean) {
                    *d = m + rng.gen_range(-1e-3..=1e-3);
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn lstm_zero_fixed_point() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng());
        store.get_mut(cell.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(cell.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let z = |n| tape.constant(Tensor::zeros(&[n]));
        let (h, c) = cell.step(&b, &z(3), &z(2), &z(2)).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_forget_saturation_keeps_cell() {
        // forget bias 20 → f ≈ 1, so c' ≈ c + i·g.
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 2, 2, &mut rng());
        store.get_mut(cell.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias = store.get_mut(cell.bias).data_mut();
        bias.iter_mut().for_each(|v| *v = 0.0);
        bias[2..4].iter_mut().for_each(|v| *v = 20.0);
        bias[4..6].iter_mut().for_each(|v| *v = 0.3);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let c0 = vec![0.7, -0.4];
        let (_, c) = cell
            .step(&b, &tape.constant(vec_t(&[1.0, 2.0])), &tape.constant(vec_t(&[0.0, 0.0])), &tape.constant(vec_t(&c0)))
            .unwrap();
        let input_term = 0.5 * 0.3f64.tanh();
        for (got, start) in c.data().iter().zip(&c0) {
            assert!((got - (start + input_term)).abs() < 1e-8);
        }
    }

    #[test]
    fn lstm_width_mismatch() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng());
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let err = cell.step(&b, &tape.constant(vec_t(&[1.0])), &tape.constant(vec_t(&[0.0, 0.0])), &tape.constant(vec_t(&[0.0, 0.0])));
        assert!(matches!(err, Err(FvnError::Dimension { .. })));
    }

    #[test]
    fn lstm_weight_gradient_check() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng());
        let x = vec_t(&[0.5, -0.3, 0.8]);
        let h0 = vec_t(&[0.1, -0.2]);
        let c0 = vec_t(&[0.3, 0.05]);
        let w_out = vec_t(&[1.3, -0.7]);
        let eval = |w: &Tensor| {
            let mut s = store.clone();
            *s.get_mut(cell.weight) = w.clone();
            let tape = Tape::new();
            let b = Binder::new(&tape, &s, false);
            let (h, _) = cell
                .step(&b, &tape.constant(x.clone()), &tape.constant(h0.clone()), &tape.constant(c0.clone()))
                .unwrap();
            h.data().iter().zip(w_out.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, true);
        let (h, _) = cell
            .step(&b, &tape.constant(x.clone()), &tape.constant(h0.clone()), &tape.constant(c0.clone()))
            .unwrap();
        let loss = h.mul(&tape.constant(w_out.clone())).unwrap().sum().unwrap();
        let grads = b.param_grads(&tape.backward(&loss).unwrap());
        let numeric = finite_difference_gradient(eval, store.get(cell.weight), 1e-5);
        assert!(relative_error(&grads[cell.weight.index()], &numeric) < 1e-5);
    }

    #[test]
    fn dense_cases() {
        let mut store = ParamStore::new();
        let d = DenseLayer::new(&mut store, "d", 3, 3, &mut rng());
        *store.get_mut(d.weight) = Tensor::identity(3);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let x = tape.constant(vec_t(&[1.0, -2.0, 3.0]));
        assert_eq!(d.apply(&b, &x).unwrap().data(), x.data());

        let mut store2 = store.clone();
        *store2.get_mut(d.weight) = Tensor::zeros(&[3, 3]);
        *store2.get_mut(d.bias) = vec_t(&[4.0, 5.0, 6.0]);
        let b2 = Binder::new(&tape, &store2, false);
        assert_eq!(d.apply(&b2, &x).unwrap().data(), &[4.0, 5.0, 6.0]);
        let short = tape.constant(vec_t(&[1.0]));
        assert!(matches!(d.apply(&b, &short), Err(FvnError::Dimension { .. })));
    }

    #[test]
    fn dense_gradient_check() {
        let mut store = ParamStore::new();
        let d = DenseLayer::new(&mut store, "d", 4, 3, &mut rng());
        let x0 = vec_t(&[0.2, -0.1, 0.5, 0.9]);
        let eval = |x: &Tensor| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store, false);
            d.apply(&b, &tape.constant(x.clone())).unwrap().tanh().unwrap().data().iter().sum::<f64>()
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, true);
        let x = tape.param(x0.clone());
        let loss = d.apply(&b, &x).unwrap().tanh().unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        let numeric = finite_difference_gradient(eval, &x0, 1e-5);
        assert!(relative_error(g.get(&x).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn bilstm_shapes_and_last_row() {
        let mut store = ParamStore::new();
        let mut r = rng();
        for layers in 1..=3 {
            let enc = BiLstmStack::new(&mut store, &format!("e{layers}"), 6, 4, layers, &mut r).unwrap();
            let tape = Tape::new();
            let b = Binder::new(&tape, &store, false);
            let xs: Vec<_> = (0..5).map(|i| tape.constant(Tensor::vector(vec![i as f64 * 0.1; 6]))).collect();
            let out = enc.encode(&b, &xs).unwrap();
            assert_eq!(out.matrix.shape(), &[5, 4]);
            assert_eq!(out.last.data(), out.matrix.value().row(4));

            let single = enc.encode(&b, &xs[..1]).unwrap();
            assert_eq!(single.matrix.value().row(0), single.last.data());
            assert!(matches!(enc.encode(&b, &[]), Err(FvnError::Argument(_))));
        }
    }

    #[test]
    fn bilstm_forward_half_is_causal() {
        let mut store = ParamStore::new();
        let enc = BiLstmStack::new(&mut store, "e", 2, 4, 1, &mut rng()).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let v = |x: f64, y: f64| tape.constant(vec_t(&[x, y]));
        let ab = enc.encode(&b, &[v(0.3, 0.4), v(1.0, -1.0)]).unwrap();
        let ac = enc.encode(&b, &[v(0.3, 0.4), v(-0.5, 0.9)]).unwrap();
        assert_eq!(&ab.rows[0].data()[..2], &ac.rows[0].data()[..2]);
        assert_ne!(&ab.rows[0].data()[2..], &ac.rows[0].data()[2..]);
    }

    #[test]
    fn attention_properties() {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 3, 6, &mut rng());
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let q = tape.constant(vec_t(&[0.3, -0.2, 0.9, 0.1, 0.0, -0.5]));

        let one = tape.constant(Tensor::matrix(1, 3, vec![0.5, 0.1, -0.4]).unwrap());
        let (ctx, _) = attn.attend(&b, &q, &one).unwrap();
        let proj = attn.project_keys(&b, &one).unwrap();
        assert_eq!(ctx.data(), proj.data());

        let same = tape.constant(Tensor::matrix(4, 3, [0.5, 0.1, -0.4].repeat(4)).unwrap());
        let (_, w) = attn.attend(&b, &q, &same).unwrap();
        for p in w.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let keys = tape.constant(Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0, 0.7, 0.7, -0.2]).unwrap());
        let (ctx, w) = attn.attend(&b, &q, &keys).unwrap();
        let total: f64 = w.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w.data().iter().all(|p| *p >= 0.0));
        let proj = attn.project_keys(&b, &keys).unwrap();
        for j in 0..6 {
            let manual: f64 = (0..3).map(|i| w.data()[i] * proj.value().row(i)[j]).sum();
            assert!((manual - ctx.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrained_loader_fills_missing_rows() {
        let vocab = Vocabulary::from_tokens(["hello", "world", "unseen"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "hello 1.0 2.0\nworld 3.0 4.0\nother 9.0 9.0\n").unwrap();
        let table = load_pretrained_embeddings(&path, &vocab, 2, &mut rng()).unwrap();
        let hello = vocab.id("hello").unwrap() as usize;
        assert_eq!(table.row(hello), &[1.0, 2.0]);
        let unseen = vocab.id("unseen").unwrap() as usize;
        assert!((table.row(unseen)[0] - 2.0).abs() <= 1e-3);
        assert!((table.row(unseen)[1] - 3.0).abs() <= 1e-3);

        std::fs::write(&path, "hello 1.0\n").unwrap();
        assert!(matches!(
            load_pretrained_embeddings(&path, &vocab, 2, &mut rng()),
            Err(FvnError::Format { line: 1, .. })
        ));
    }
}
