//! The full model: four recurrent encoders, content and style codebooks,
//! the attention decoder and the backward control heads.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::codebook::{vq_loss_terms, Codebook, CodebookKind, DEFAULT_BETA};
use crate::corpus::{control_labels, Cmr, DatasetMode, Example, StyleLabel, Vocabulary, BOS, EOS};
use crate::error::{arg_err, FvnError, Result};
use crate::layers::{embed, init_embedding, Attention, BiLstmStack, Binder, DenseLayer, LstmCell, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub codebook_size: usize,
    pub encoder_layers: usize,
    pub beta_content: f64,
    pub beta_style: f64,
    pub beta_word: f64,
    pub max_decode_len: usize,
    /// Stop control-loss gradients at the decoder outputs.
    pub block_control_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 300,
            codebook_size: 512,
            encoder_layers: 3,
            beta_content: DEFAULT_BETA,
            beta_style: DEFAULT_BETA,
            beta_word: DEFAULT_BETA,
            max_decode_len: 100,
            block_control_grad: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(FvnError::Config(format!("dim must be even and ≥ 2, got {}", self.dim)));
        }
        if self.codebook_size == 0 || self.encoder_layers == 0 || self.max_decode_len == 0 {
            return Err(FvnError::Config("codebook_size, encoder_layers and max_decode_len must be positive".into()));
        }
        for b in [self.beta_content, self.beta_style, self.beta_word] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(FvnError::Config(format!("commitment coefficient must be finite and ≥ 0, got {b}")));
            }
        }
        Ok(())
    }
}

/// Two-layer classification head `Dense(D, D/2) → tanh → Dense(D/2, out)`.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, dim: usize, out: usize, rng: &mut impl Rng) -> Self {
        Head {
            hidden: DenseLayer::new(store, &format!("{name}.hidden"), dim, dim / 2, rng),
            out: DenseLayer::new(store, &format!("{name}.out"), dim / 2, out, rng),
        }
    }

    pub fn logits<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        self.out.apply(b, &self.hidden.apply(b, x)?.tanh()?)
    }
}

#[derive(Clone, Debug)]
struct Modules {
    embedding: ParamId,
    text_content: BiLstmStack,
    text_style: BiLstmStack,
    content_enc: BiLstmStack,
    style_enc: BiLstmStack,
    content_book: Codebook,
    style_book: Codebook,
    word_book: Codebook,
    dec_input: DenseLayer,
    dec_lstm: LstmCell,
    attention: Attention,
    dec_emb: DenseLayer,
    dec_vocab: DenseLayer,
    head_content: Head,
    head_style: Option<Head>,
}

/// Quantized codes of a text.
pub struct TextCodes<'t> {
    pub z_c: Var<'t>,
    pub z_s: Var<'t>,
    pub k: usize,
    pub n: usize,
    pub e_c: Var<'t>,
    pub e_s: Var<'t>,
}

/// Encoded content and style conditions.
pub struct EncodedCondition<'t> {
    pub v_c: Var<'t>,
    pub seq_c: Var<'t>,
    pub v_s: Var<'t>,
    pub seq_s: Var<'t>,
}

impl<'t> EncodedCondition<'t> {
    /// Attention keys: both sequences stacked along time.
    pub fn keys(&self) -> Result<Var<'t>> {
        Var::concat(&[self.seq_c.clone(), self.seq_s.clone()], 0)
    }
}

/// Multi-label content indicator and optional style class.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTargets {
    pub labels: Vec<f64>,
    pub style: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecodeMode {
    TeacherForced,
    Greedy,
    Sample { temperature: f64 },
}

pub struct DecodeOutput<'t> {
    pub tokens: Vec<u32>,
    /// Per-step word-width outputs `o_l`.
    pub outputs: Vec<Var<'t>>,
    pub loss: Option<Var<'t>>,
}

pub struct StepOutput<'t> {
    pub logits: Var<'t>,
    pub o: Var<'t>,
    pub h: Var<'t>,
    pub c: Var<'t>,
}

pub struct ControlLoss<'t> {
    pub total: Var<'t>,
    pub content_generated: Var<'t>,
    pub content_code: Var<'t>,
    pub style_generated: Option<Var<'t>>,
    pub style_code: Option<Var<'t>>,
}

pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub dec: Var<'t>,
    pub ctrl: Var<'t>,
    pub vq_content: Var<'t>,
    pub vq_style: Var<'t>,
    pub vq_word: Var<'t>,
    pub k: usize,
    pub n: usize,
}

/// Scalar loss values for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub dec: f64,
    pub ctrl: f64,
    pub vq_content: f64,
    pub vq_style: f64,
    pub vq_word: f64,
}

impl LossValues {
    pub fn add_scaled(&mut self, other: &LossValues, w: f64) {
        self.total += w * other.total;
        self.dec += w * other.dec;
        self.ctrl += w * other.ctrl;
        self.vq_content += w * other.vq_content;
        self.vq_style += w * other.vq_style;
        self.vq_word += w * other.vq_word;
    }
}

impl LossBreakdown<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.item(),
            dec: self.dec.item(),
            ctrl: self.ctrl.item(),
            vq_content: self.vq_content.item(),
            vq_style: self.vq_style.item(),
            vq_word: self.vq_word.item(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fvn {
    pub config: ModelConfig,
    pub mode: DatasetMode,
    pub vocab: Vocabulary,
    /// Inventory of the multi-label content head.
    pub content_labels: Vec<String>,
    pub params: ParamStore,
    m: Modules,
}

/// Content-head inventory for a training set: slot keys that occur, or
/// slot-value labels for the lexicalized corpus. Sorted.
pub fn label_inventory<'a>(examples: impl IntoIterator<Item = &'a Example>, mode: DatasetMode) -> Vec<String> {
    let mut set = std::collections::BTreeSet::new();
    for ex in examples {
        set.extend(control_labels(&ex.cmr, mode));
    }
    set.into_iter().collect()
}

impl Fvn {
    pub fn new(
        config: ModelConfig,
        mode: DatasetMode,
        vocab: Vocabulary,
        content_labels: Vec<String>,
        pretrained: Option<Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if content_labels.is_empty() {
            return Err(FvnError::Config("content label inventory is empty".into()));
        }
        let d = config.dim;
        let v = vocab.len();
        let mut store = ParamStore::new();
        let table = match pretrained {
            Some(t) if t.shape() == [v, d] => t,
            Some(t) => {
                return Err(FvnError::Init(format!("pretrained table {:?}, expected [{v}, {d}]", t.shape())));
            }
            None => init_embedding(rng, v, d),
        };
        let embedding = store.add("embedding", table.clone());
        let layers = config.encoder_layers;
        let text_content = BiLstmStack::new(&mut store, "enc_text_content", d, d, layers, rng)?;
        let text_style = BiLstmStack::new(&mut store, "enc_text_style", d, d, layers, rng)?;
        let content_enc = BiLstmStack::new(&mut store, "enc_content", d, d, layers, rng)?;
        let style_enc = BiLstmStack::new(&mut store, "enc_style", d, d, layers, rng)?;
        let content_book =
            Codebook::init_content(&mut store, "codebook_content", config.codebook_size, d, rng)?.with_beta(config.beta_content);
        let style_kind = if mode.has_style() { CodebookKind::Style } else { CodebookKind::SlotValue };
        let style_book =
            Codebook::init_from_embedding(&mut store, "codebook_style", style_kind, &table, v)?.with_beta(config.beta_style);
        let word_book = Codebook::wrap(CodebookKind::Word, embedding).with_beta(config.beta_word);
        let dec_input = DenseLayer::new(&mut store, "dec_input", 3 * d, d, rng);
        let dec_lstm = LstmCell::new(&mut store, "dec_lstm", d, 2 * d, rng);
        let attention = Attention::new(&mut store, "dec_attention", d, 2 * d, rng);
        let dec_emb = DenseLayer::new(&mut store, "dec_emb", 2 * d, d, rng);
        let dec_vocab = DenseLayer::new(&mut store, "dec_vocab", d, v, rng);
        let head_content = Head::new(&mut store, "head_content", d, content_labels.len(), rng);
        let head_style = mode.has_style().then(|| Head::new(&mut store, "head_style", d, StyleLabel::ALL.len(), rng));
        let m = Modules {
            embedding,
            text_content,
            text_style,
            content_enc,
            style_enc,
            content_book,
            style_book,
            word_book,
            dec_input,
            dec_lstm,
            attention,
            dec_emb,
            dec_vocab,
            head_content,
            head_style,
        };
        Ok(Fvn { config, mode, vocab, content_labels, params: store, m })
    }

    /// Rebuild the structure and install saved parameter values.
    pub fn from_params(
        config: ModelConfig,
        mode: DatasetMode,
        vocab: Vocabulary,
        content_labels: Vec<String>,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = Fvn::new(config, mode, vocab, content_labels, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        if model.params.len() != params.len()
            || model.params.iter().zip(params.iter()).any(|((a, _), (b, _))| a != b)
        {
            return Err(FvnError::Config("saved parameters do not match the model layout".into()));
        }
        model.params.assign(params.values().to_vec())?;
        Ok(model)
    }

    pub fn embedding(&self) -> ParamId {
        self.m.embedding
    }

    pub fn content_book(&self) -> &Codebook {
        &self.m.content_book
    }

    pub fn style_book(&self) -> &Codebook {
        &self.m.style_book
    }

    pub fn word_book(&self) -> &Codebook {
        &self.m.word_book
    }

    pub fn head_content(&self) -> &Head {
        &self.m.head_content
    }

    pub fn head_style(&self) -> Option<&Head> {
        self.m.head_style.as_ref()
    }

    pub fn binder<'t, 's>(&'s self, tape: &'t Tape, trainable: bool) -> Binder<'t, 's> {
        Binder::new(tape, &self.params, trainable)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab.len()) {
            Some(bad) => arg_err(format!("token id {bad} outside vocabulary of {}", self.vocab.len())),
            None => Ok(()),
        }
    }

    pub fn encode_text<'t>(&self, b: &Binder<'t, '_>, tokens: &[u32]) -> Result<TextCodes<'t>> {
        if tokens.is_empty() {
            return arg_err("cannot encode an empty text");
        }
        self.check_ids(tokens)?;
        let emb = embed(b, self.m.embedding, tokens)?;
        let z_c = self.m.text_content.encode(b, &emb)?.last;
        let z_s = self.m.text_style.encode(b, &emb)?.last;
        let (k, e_c) = self.m.content_book.quantize_straight_through(b, &z_c)?;
        let (n, e_s) = self.m.style_book.quantize_straight_through(b, &z_s)?;
        Ok(TextCodes { z_c, z_s, k, n, e_c, e_s })
    }

    pub fn encode_condition<'t>(&self, b: &Binder<'t, '_>, content: &[u32], style: &[u32]) -> Result<EncodedCondition<'t>> {
        if content.is_empty() || style.is_empty() {
            return arg_err("condition sequences must be nonempty");
        }
        self.check_ids(content)?;
        self.check_ids(style)?;
        let c = self.m.content_enc.encode(b, &embed(b, self.m.embedding, content)?)?;
        let s = self.m.style_enc.encode(b, &embed(b, self.m.embedding, style)?)?;
        Ok(EncodedCondition { v_c: c.last, seq_c: c.matrix, v_s: s.last, seq_s: s.matrix })
    }

    /// `h₀ = e^C_k ∘ e^S_n`, `c₀ = v^C ∘ v^S`.
    pub fn initial_state<'t>(
        &self,
        cond: &EncodedCondition<'t>,
        e_c: &Var<'t>,
        e_s: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let h0 = Var::concat(&[e_c.clone(), e_s.clone()], 0)?;
        let c0 = Var::concat(&[cond.v_c.clone(), cond.v_s.clone()], 0)?;
        Ok((h0, c0))
    }

    /// One decoder step against projected attention keys.
    pub fn decode_step<'t>(
        &self,
        b: &Binder<'t, '_>,
        prev: &Var<'t>,
        h: &Var<'t>,
        c: &Var<'t>,
        projected_keys: &Var<'t>,
    ) -> Result<StepOutput<'t>> {
        let (context, _) = self.m.attention.attend_projected(b, h, projected_keys)?;
        let x = self.m.dec_input.apply(b, &Var::concat(&[prev.clone(), context], 0)?)?;
        let (h, c) = self.m.dec_lstm.step(b, &x, h, c)?;
        let o = self.m.dec_emb.apply(b, &h)?;
        let logits = self.m.dec_vocab.apply(b, &o)?;
        Ok(StepOutput { logits, o, h, c })
    }

    pub fn project_keys<'t>(&self, b: &Binder<'t, '_>, cond: &EncodedCondition<'t>) -> Result<Var<'t>> {
        self.m.attention.project_keys(b, &cond.keys()?)
    }

    /// Run the decoder. Teacher forcing requires `target` (ending in EOS)
    /// and returns the summed cross-entropy; the other modes stop at EOS or
    /// the configured maximum length.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_sequence<'t, R: Rng + ?Sized>(
        &self,
        b: &Binder<'t, '_>,
        cond: &EncodedCondition<'t>,
        e_c: &Var<'t>,
        e_s: &Var<'t>,
        target: Option<&[u32]>,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<DecodeOutput<'t>> {
        let keys = self.project_keys(b, cond)?;
        let (mut h, mut c) = self.initial_state(cond, e_c, e_s)?;
        let table = b.var(self.m.embedding);
        let mut prev = table.row(BOS as usize)?;
        let mut outputs = Vec::new();
        match mode {
            DecodeMode::TeacherForced => {
                let target = match target {
                    Some(t) if !t.is_empty() => t,
                    _ => return arg_err("teacher forcing needs a nonempty target"),
                };
                self.check_ids(target)?;
                let mut losses = Vec::with_capacity(target.len());
                for &t in target {
                    let step = self.decode_step(b, &prev, &h, &c, &keys)?;
                    losses.push(step.logits.cross_entropy(t as usize)?);
                    outputs.push(step.o);
                    (h, c) = (step.h, step.c);
                    prev = table.row(t as usize)?;
                }
                let loss = sum_scalars(&losses)?;
                Ok(DecodeOutput { tokens: target.to_vec(), outputs, loss: Some(loss) })
            }
            DecodeMode::Greedy | DecodeMode::Sample { .. } => {
                if let DecodeMode::Sample { temperature } = mode {
                    if !(temperature.is_finite() && temperature > 0.0) {
                        return arg_err(format!("temperature must be positive, got {temperature}"));
                    }
                }
                let mut tokens = Vec::new();
                for _ in 0..self.config.max_decode_len {
                    let step = self.decode_step(b, &prev, &h, &c, &keys)?;
                    let next = pick_token(step.logits.data(), mode, rng)?;
                    outputs.push(step.o);
                    (h, c) = (step.h, step.c);
                    if next == EOS {
                        break;
                    }
                    tokens.push(next);
                    prev = table.row(next as usize)?;
                }
                Ok(DecodeOutput { tokens, outputs, loss: None })
            }
        }
    }

    pub fn control_targets(&self, cmr: &Cmr, style: Option<StyleLabel>) -> ControlTargets {
        let present = control_labels(cmr, self.mode);
        let labels = self.content_labels.iter().map(|l| if present.contains(l) { 1.0 } else { 0.0 }).collect();
        ControlTargets { labels, style: if self.mode.has_style() { style.map(StyleLabel::index) } else { None } }
    }

    /// Re-encode the decoder outputs and classify them, alongside the
    /// quantized codes, against the ground-truth condition.
    pub fn control_forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        outputs: &[Var<'t>],
        codes: &TextCodes<'t>,
        targets: &ControlTargets,
    ) -> Result<ControlLoss<'t>> {
        if outputs.is_empty() {
            return arg_err("control heads need at least one decoder output");
        }
        if targets.labels.len() != self.content_labels.len() {
            return arg_err(format!(
                "{} content targets for an inventory of {}",
                targets.labels.len(),
                self.content_labels.len()
            ));
        }
        let fed: Vec<Var<'t>> = if self.config.block_control_grad {
            outputs.iter().map(Var::stop_gradient).collect()
        } else {
            outputs.to_vec()
        };
        let zc_gen = self.m.text_content.encode(b, &fed)?.last;
        let head = &self.m.head_content;
        let content_generated = head.logits(b, &zc_gen)?.bce_with_logits(&targets.labels)?;
        let content_code = head.logits(b, &codes.e_c)?.bce_with_logits(&targets.labels)?;
        let mut total = content_generated.add(&content_code)?;
        let (mut style_generated, mut style_code) = (None, None);
        if let (Some(hs), Some(s)) = (&self.m.head_style, targets.style) {
            let zs_gen = self.m.text_style.encode(b, &fed)?.last;
            let g = hs.logits(b, &zs_gen)?.cross_entropy(s)?;
            let q = hs.logits(b, &codes.e_s)?.cross_entropy(s)?;
            total = total.add(&g)?.add(&q)?;
            style_generated = Some(g);
            style_code = Some(q);
        }
        Ok(ControlLoss { total, content_generated, content_code, style_generated, style_code })
    }

    /// Pull each `o_l` toward the embedding row of the reference token at
    /// the same step.
    pub fn word_vq_loss<'t>(&self, b: &Binder<'t, '_>, outputs: &[Var<'t>], target: &[u32]) -> Result<Var<'t>> {
        if outputs.len() != target.len() || outputs.is_empty() {
            return arg_err(format!("{} decoder outputs for {} target tokens", outputs.len(), target.len()));
        }
        let table = b.var(self.m.embedding);
        let terms = outputs
            .iter()
            .zip(target)
            .map(|(o, &t)| vq_loss_terms(o, &table.row(t as usize)?, self.m.word_book.beta))
            .collect::<Result<Vec<_>>>()?;
        sum_scalars(&terms)
    }

    /// Target sequence for teacher forcing: the text followed by EOS.
    pub fn target_tokens(ex: &Example) -> Vec<u32> {
        let mut t = ex.delex_tokens.clone();
        t.push(EOS);
        t
    }

    pub fn total_loss<'t>(&self, b: &Binder<'t, '_>, ex: &Example) -> Result<LossBreakdown<'t>> {
        let codes = self.encode_text(b, &ex.delex_tokens)?;
        let cond = self.encode_condition(b, &ex.content_tokens, &ex.style_tokens)?;
        let target = Self::target_tokens(ex);
        let out = self.decode_sequence(
            b,
            &cond,
            &codes.e_c,
            &codes.e_s,
            Some(&target),
            DecodeMode::TeacherForced,
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        let dec = out.loss.expect("teacher forcing returns a loss");
        let ctrl = self.control_forward(b, &out.outputs, &codes, &self.control_targets(&ex.cmr, ex.style))?.total;
        let vq_content = self.m.content_book.vq_loss(b, &codes.z_c, codes.k)?;
        let vq_style = self.m.style_book.vq_loss(b, &codes.z_s, codes.n)?;
        let vq_word = self.word_vq_loss(b, &out.outputs, &target)?;
        let total = dec.add(&ctrl)?.add(&vq_content)?.add(&vq_style)?.add(&vq_word)?;
        Ok(LossBreakdown { total, dec, ctrl, vq_content, vq_style, vq_word, k: codes.k, n: codes.n })
    }

    /// Nearest content and style indices of a text, without recording.
    pub fn code_indices(&self, tokens: &[u32]) -> Result<(usize, usize)> {
        let tape = Tape::new();
        let codes = self.encode_text(&self.binder(&tape, false), tokens)?;
        Ok((codes.k, codes.n))
    }

    /// Decode from explicit code vectors (inference only).
    pub fn generate_tokens<R: Rng + ?Sized>(
        &self,
        content: &[u32],
        style: &[u32],
        e_c: &Tensor,
        e_s: &Tensor,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        if mode == DecodeMode::TeacherForced {
            return arg_err("generation needs greedy or sampled decoding");
        }
        let tape = Tape::new();
        let b = self.binder(&tape, false);
        let cond = self.encode_condition(&b, content, style)?;
        let e_c = tape.constant(e_c.clone());
        let e_s = tape.constant(e_s.clone());
        Ok(self.decode_sequence(&b, &cond, &e_c, &e_s, None, mode, rng)?.tokens)
    }
}

fn sum_scalars<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = parts.split_first().ok_or_else(|| FvnError::Argument("empty sum".into()))?;
    rest.iter().try_fold(first.clone(), |acc, x| acc.add(x))
}

fn pick_token<R: Rng + ?Sized>(logits: &[f64], mode: DecodeMode, rng: &mut R) -> Result<u32> {
    match mode {
        DecodeMode::Sample { temperature } => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| FvnError::Numeric { op: "sample".into(), detail: e.to_string() })?;
            Ok(dist.sample(rng) as u32)
        }
        _ => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
    }
}
