//! Built-in property suite: finite-difference gradient checks for every
//! primitive, layer and loss term, codebook identities, table sampling and
//! metric self-scores.
//!
//! Gradients through `stop_gradient` and `straight_through` are compared
//! against finite differences of the frozen-replay surrogate (see
//! [`Tape::recording`]), which is what those estimators differentiate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_gradient, relative_error, Tape, Tensor, Var};
use crate::codebook::Codebook;
use crate::corpus::{build_dataset, DatasetMode, RawRecord};
use crate::error::Result;
use crate::layers::{embed, Attention, BiLstmStack, Binder, DenseLayer, LstmCell, ParamStore};
use crate::metrics::{bleu, distinct_n, meteor_lite, nist, rouge_l, slot_prf, Tokens};
use crate::network::{label_inventory, Fvn, LossBreakdown};
use crate::sampler::{build_tables, draw_index};
use crate::trainer::TrainConfig;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    /// Observed error or statistic.
    pub value: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(group: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckOutcome { group, name: name.into(), passed: value.is_finite() && value < tolerance, value, tolerance }
    }

    fn failed(group: &'static str, name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        CheckOutcome { group, name: format!("{} ({err})", name.into()), passed: false, value: f64::NAN, tolerance: 0.0 }
    }

    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {}::{} value={:.3e} tol={:.1e}", self.group, self.name, self.value, self.tolerance)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Worst relative error between the tape gradient of `Σ w ⊙ f(params)` and
/// central differences of its frozen replay, over every parameter.
pub fn store_gradient_error<F>(store: &ParamStore, seed: u64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&Binder<'t, '_>) -> Result<Var<'t>>,
{
    let tape = Tape::recording();
    let b = Binder::new(&tape, store, true);
    let out = f(&b)?;
    let weights = random(&mut ChaCha8Rng::seed_from_u64(seed), out.shape(), -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let loss = out.mul(&w)?.sum()?;
    let analytic = b.param_grads(&tape.backward(&loss)?);
    let frozen = tape.frozen_values();

    let eval = |s: &ParamStore| -> f64 {
        let tape = Tape::replaying(frozen.clone());
        let b = Binder::new(&tape, s, false);
        match f(&b) {
            Ok(v) => v.data().iter().zip(weights.data()).map(|(a, c)| a * c).sum(),
            Err(_) => f64::NAN,
        }
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (i, g) in analytic.iter().enumerate() {
        let base = store.values()[i].clone();
        let numeric = finite_difference_gradient(
            |x| {
                probe.values_mut()[i] = x.clone();
                eval(&probe)
            },
            &base,
            FD_STEP,
        );
        probe.values_mut()[i] = base;
        let err = relative_error(g, &numeric);
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(worst)
}

type Prim = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

fn primitive_cases() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Prim)> {
    let m = |r: usize, c: usize| (vec![r, c], -1.0, 1.0);
    let v = |n: usize| (vec![n], -1.0, 1.0);
    vec![
        ("add", vec![m(2, 3), m(2, 3)], |x| x[0].add(&x[1])),
        ("sub", vec![m(2, 3), m(2, 3)], |x| x[0].sub(&x[1])),
        ("mul", vec![m(2, 3), m(2, 3)], |x| x[0].mul(&x[1])),
        ("scale", vec![m(2, 3)], |x| x[0].scale(-1.7)),
        ("matmul", vec![m(2, 3), m(3, 4)], |x| x[0].matmul(&x[1])),
        ("matvec", vec![m(3, 4), v(4)], |x| x[0].matmul(&x[1])),
        ("vecmat", vec![v(3), m(3, 4)], |x| x[0].matmul(&x[1])),
        ("concat0", vec![m(2, 3), m(1, 3)], |x| Var::concat(&[x[0].clone(), x[1].clone()], 0)),
        ("concat1", vec![m(2, 3), m(2, 2)], |x| Var::concat(&[x[0].clone(), x[1].clone()], 1)),
        ("stack_rows", vec![v(3), v(3)], |x| Var::stack_rows(&[x[0].clone(), x[1].clone()])),
        ("slice", vec![m(3, 4)], |x| x[0].slice(1, 1, 2)),
        ("row", vec![m(3, 4)], |x| x[0].row(1)),
        ("sigmoid", vec![m(2, 3)], |x| x[0].sigmoid()),
        ("tanh", vec![m(2, 3)], |x| x[0].tanh()),
        ("log", vec![(vec![5], 0.5, 2.0)], |x| x[0].log()),
        ("softmax_vec", vec![v(5)], |x| x[0].softmax(0)),
        ("softmax_rows", vec![m(2, 4)], |x| x[0].softmax(1)),
        ("sum", vec![m(2, 3)], |x| x[0].sum()),
        ("mean", vec![m(2, 3)], |x| x[0].mean()),
        ("sum_sq", vec![m(2, 3)], |x| x[0].sum_sq()),
        ("cross_entropy", vec![v(5)], |x| x[0].cross_entropy(2)),
        ("bce_with_logits", vec![v(4)], |x| x[0].bce_with_logits(&[1.0, 0.0, 1.0, 0.0])),
        ("stop_gradient", vec![v(3)], |x| x[0].stop_gradient().mul(&x[0])),
        ("straight_through", vec![v(3)], |x| {
            let sign = Tensor::vector(x[0].data().iter().map(|v| v.signum()).collect());
            x[0].straight_through(sign)?.sum_sq()
        }),
    ]
}

pub fn primitive_gradients(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .into_iter()
        .map(|(name, shapes, op)| {
            let mut store = ParamStore::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, (s, lo, hi))| store.add(format!("x{i}"), random(&mut rng, s, *lo, *hi)))
                .collect();
            let r = store_gradient_error(&store, rng.gen(), |b| {
                let xs: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
                op(&xs)
            });
            match r {
                Ok(e) => CheckOutcome::new("primitive", name, e, PRIMITIVE_TOL),
                Err(e) => CheckOutcome::failed("primitive", name, e),
            }
        })
        .collect()
}

pub fn layer_gradients(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f64>| {
        out.push(match r {
            Ok(e) => CheckOutcome::new("layer", name, e, LAYER_TOL),
            Err(e) => CheckOutcome::failed("layer", name, e),
        })
    };

    let mut s = ParamStore::new();
    let dense = DenseLayer::new(&mut s, "dense", 4, 3, &mut rng);
    let x = s.add("x", random(&mut rng, &[4], -1.0, 1.0));
    push("dense", store_gradient_error(&s, 1, |b| dense.apply(b, &b.var(x))));

    let mut s = ParamStore::new();
    let cell = LstmCell::new(&mut s, "lstm", 3, 2, &mut rng);
    let (x, h, c) = (
        s.add("x", random(&mut rng, &[3], -1.0, 1.0)),
        s.add("h", random(&mut rng, &[2], -1.0, 1.0)),
        s.add("c", random(&mut rng, &[2], -1.0, 1.0)),
    );
    push(
        "lstm_step",
        store_gradient_error(&s, 2, |b| {
            let (h2, c2) = cell.step(b, &b.var(x), &b.var(h), &b.var(c))?;
            Var::concat(&[h2, c2], 0)
        }),
    );

    let mut s = ParamStore::new();
    let stack = BiLstmStack::new(&mut s, "bilstm", 3, 4, 2, &mut rng).expect("valid encoder");
    let xs: Vec<_> = (0..3).map(|i| s.add(format!("x{i}"), random(&mut rng, &[3], -1.0, 1.0))).collect();
    push(
        "bilstm_stack",
        store_gradient_error(&s, 3, |b| {
            let inputs: Vec<Var> = xs.iter().map(|&id| b.var(id)).collect();
            stack.encode(b, &inputs).map(|e| e.matrix)
        }),
    );

    let mut s = ParamStore::new();
    let att = Attention::new(&mut s, "att", 4, 3, &mut rng);
    let (q, k) = (s.add("q", random(&mut rng, &[3], -1.0, 1.0)), s.add("keys", random(&mut rng, &[5, 4], -1.0, 1.0)));
    push(
        "attention",
        store_gradient_error(&s, 4, |b| {
            let (ctx, w) = att.attend(b, &b.var(q), &b.var(k))?;
            Var::concat(&[ctx, w], 0)
        }),
    );

    let mut s = ParamStore::new();
    let emb = s.add("embedding", random(&mut rng, &[6, 3], -1.0, 1.0));
    push("embedding", store_gradient_error(&s, 5, |b| Var::stack_rows(&embed(b, emb, &[1, 4, 1])?)));

    let mut s = ParamStore::new();
    let book = Codebook::init_content(&mut s, "book", 4, 3, &mut rng).expect("valid codebook");
    let z = s.add("z", random(&mut rng, &[3], -0.5, 0.5));
    push(
        "vq_loss",
        store_gradient_error(&s, 6, |b| {
            let zv = b.var(z);
            let (k, _) = book.nearest(b.store(), zv.data())?;
            book.vq_loss(b, &zv, k)
        }),
    );
    push(
        "quantize_straight_through",
        store_gradient_error(&s, 7, |b| book.quantize_straight_through(b, &b.var(z)).map(|(_, q)| q)),
    );
    out
}

fn toy_model(mode: DatasetMode, seed: u64) -> Result<(Fvn, Vec<crate::corpus::Example>)> {
    let recs = match mode {
        DatasetMode::Personage => vec![
            RawRecord::new("name[Aromi], eatType[pub], food[Italian]", "Aromi is an Italian pub, you see.", Some("agreeable")),
            RawRecord::new("name[Bibimbap], area[riverside]", "Oh god, Bibimbap is by the riverside!", Some("disagreeable")),
        ],
        DatasetMode::E2e => vec![
            RawRecord::new("name[Aromi], food[Italian], near[Bibimbap]", "Aromi serves Italian food near Bibimbap.", None),
            RawRecord::new("name[Zizzi], priceRange[cheap]", "Zizzi is a cheap place.", None),
        ],
    };
    let ds = build_dataset(&recs, mode, None)?;
    let cfg = TrainConfig { mode, dim: 4, codebook_size: 3, encoder_layers: 1, ..TrainConfig::default() };
    let labels = label_inventory(&ds.examples, mode);
    let model = Fvn::new(cfg.model(), mode, ds.vocab, labels, None, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((model, ds.examples))
}

/// The five training loss terms and their sum, in both corpus modes.
pub fn loss_gradients(seed: u64) -> Vec<CheckOutcome> {
    type Pick = for<'a, 't> fn(&'a LossBreakdown<'t>) -> &'a Var<'t>;
    let terms: [(&str, Pick); 6] = [
        ("dec", |l| &l.dec),
        ("ctrl", |l| &l.ctrl),
        ("vq_content", |l| &l.vq_content),
        ("vq_style", |l| &l.vq_style),
        ("vq_word", |l| &l.vq_word),
        ("total", |l| &l.total),
    ];
    let mut out = Vec::new();
    for mode in [DatasetMode::Personage, DatasetMode::E2e] {
        let (model, examples) = match toy_model(mode, seed) {
            Ok(m) => m,
            Err(e) => {
                out.push(CheckOutcome::failed("loss", format!("{mode}/setup"), e));
                continue;
            }
        };
        for (name, pick) in terms {
            let r = store_gradient_error(&model.params, seed, |b| {
                let mut acc: Option<Var> = None;
                for ex in &examples {
                    let l = model.total_loss(b, ex)?;
                    let v = pick(&l).clone();
                    acc = Some(match acc {
                        Some(a) => a.add(&v)?,
                        None => v,
                    });
                }
                Ok(acc.expect("nonempty toy corpus"))
            });
            out.push(match r {
                Ok(e) => CheckOutcome::new("loss", format!("{mode}/{name}"), e, LAYER_TOL),
                Err(e) => CheckOutcome::failed("loss", format!("{mode}/{name}"), e),
            });
        }
    }
    out
}

/// Forward value, straight-through copy and nearest-vs-scan on `queries`
/// random queries per codebook of a toy model.
pub fn vq_identities(seed: u64, queries: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let (model, _) = match toy_model(DatasetMode::Personage, seed) {
        Ok(m) => m,
        Err(e) => return vec![CheckOutcome::failed("vq", "setup", e)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, book) in [("content", model.content_book()), ("style", model.style_book()), ("word", model.word_book())] {
        let entries = book.entries(&model.params).clone();
        let d = entries.cols();
        let mut mismatches = 0usize;
        let mut worst_fwd = 0.0f64;
        let mut worst_st = 0.0f64;
        for q in 0..queries {
            let z = random(&mut rng, &[d], -1.0, 1.0);
            let scan = (0..entries.rows())
                .map(|i| (i, entries.row(i).iter().zip(z.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
            let (k, e) = match book.nearest(&model.params, z.data()) {
                Ok(r) => r,
                Err(err) => return vec![CheckOutcome::failed("vq", name, err)],
            };
            mismatches += usize::from(k != scan.0 || e.data() != entries.row(scan.0));
            if q < 50 {
                let tape = Tape::new();
                let b = Binder::new(&tape, &model.params, true);
                let zv = tape.param(z.clone());
                let fwd = book.vq_loss(&b, &zv, k).map(|l| l.item()).unwrap_or(f64::NAN);
                worst_fwd = worst_fwd.max((fwd - (1.0 + book.beta) * scan.1).abs());
                let st = book.quantize_straight_through(&b, &zv).and_then(|(_, qv)| {
                    let w = tape.constant(random(&mut rng, &[d], -1.0, 1.0));
                    let loss = qv.mul(&qv)?.mul(&w)?.sum()?;
                    let g = tape.backward(&loss)?;
                    Ok(g.get_or_zeros(&zv).max_abs_diff(&g.get_or_zeros(&qv)))
                });
                worst_st = worst_st.max(st.unwrap_or(f64::NAN));
            }
        }
        out.push(CheckOutcome::new("vq", format!("{name}/nearest_vs_scan"), mismatches as f64, 0.5));
        out.push(CheckOutcome::new("vq", format!("{name}/forward_value"), worst_fwd, 1e-12));
        out.push(CheckOutcome::new("vq", format!("{name}/straight_through_copy"), worst_st, f64::MIN_POSITIVE));
    }
    out
}

/// Every stored table vector sums to one, and `draws` samples from each
/// land within L1 distance 0.03.
pub fn table_sampling(seed: u64, draws: usize) -> Vec<CheckOutcome> {
    let (model, examples) = match toy_model(DatasetMode::Personage, seed) {
        Ok(m) => m,
        Err(e) => return vec![CheckOutcome::failed("tables", "setup", e)],
    };
    let tables = match build_tables(&model, &examples) {
        Ok(t) => t,
        Err(e) => return vec![CheckOutcome::failed("tables", "build", e)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<&Vec<f64>> = tables
        .content
        .values()
        .chain(tables.style.values())
        .chain([&tables.content_marginal, &tables.style_marginal])
        .collect();
    let sum_err = vectors.iter().map(|v| (v.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let mut l1 = 0.0f64;
    for v in &vectors {
        let mut counts = vec![0usize; v.len()];
        for _ in 0..draws {
            match draw_index(v, &mut rng) {
                Ok(i) => counts[i] += 1,
                Err(e) => return vec![CheckOutcome::failed("tables", "draw", e)],
            }
        }
        let d: f64 = counts.iter().zip(v.iter()).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum();
        l1 = l1.max(d);
    }
    vec![
        CheckOutcome::new("tables", "normalized", sum_err, 1e-9),
        CheckOutcome::new("tables", format!("l1_over_{draws}_draws"), l1, 0.03),
    ]
}

/// Identity corpora score maximally; a few crafted values.
pub fn metric_identities() -> Vec<CheckOutcome> {
    let t = |s: &str| -> Tokens { s.split_whitespace().map(str::to_string).collect() };
    let hyps = vec![t("Name_SLOT is an italian pub near the river"), t("you see , Name_SLOT is cheap and good")];
    let refs: Vec<Vec<Tokens>> = hyps.iter().map(|h| vec![h.clone()]).collect();
    let gap = |r: Result<f64>, want: f64| r.map(|v| (v - want).abs()).unwrap_or(f64::NAN);
    let three = vec![t("a b c")];
    let three_refs = vec![vec![t("a b c")]];
    vec![
        CheckOutcome::new("metric", "bleu_identity", gap(bleu(&hyps, &refs, 4), 1.0), 1e-12),
        CheckOutcome::new("metric", "rouge_identity", gap(rouge_l(&hyps, &refs), 1.0), 1e-12),
        CheckOutcome::new("metric", "meteor_identity", gap(meteor_lite(&three, &three_refs), 1.0 - 0.5 / 27.0), 1e-12),
        CheckOutcome::new("metric", "nist_three_tokens", gap(nist(&three, &three_refs, 5), 3f64.log2()), 1e-12),
        CheckOutcome::new(
            "metric",
            "bleu_clipping",
            gap(bleu(&[t("the the the the")], &[vec![t("the cat")]], 1), 0.25),
            1e-12,
        ),
        CheckOutcome::new("metric", "distinct_1", (distinct_n(&[t("a b a")], 1).unwrap_or(0.0) - 2.0 / 3.0).abs(), 1e-12),
        CheckOutcome::new(
            "metric",
            "slot_prf",
            slot_prf(&[t("Name_SLOT EatType_SLOT")], &[vec![crate::corpus::SlotKey::Name, crate::corpus::SlotKey::Food]])
                .map(|s| (s.precision - 0.5).abs() + (s.recall - 0.5).abs())
                .unwrap_or(f64::NAN),
            1e-12,
        ),
    ]
}

/// Run every group, reporting each outcome as it completes.
pub fn run_all(seed: u64, mut on_result: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let mut all = Vec::new();
    let groups: [&dyn Fn() -> Vec<CheckOutcome>; 6] = [
        &|| primitive_gradients(seed),
        &|| layer_gradients(seed),
        &|| loss_gradients(seed),
        &|| vq_identities(seed, 1000),
        &|| table_sampling(seed, 10_000),
        &metric_identities,
    ];
    for g in groups {
        for o in g() {
            on_result(&o);
            all.push(o);
        }
    }
    all
}
