//! Separately trained style classifier used to score style conveyance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::binio::{need_section, read_container, write_container, ByteReader, ByteWriter};
use crate::corpus::{StyleLabel, Vocabulary, PAD};
use crate::error::{arg_err, FvnError, Result};
use crate::layers::{embed, init_embedding, BiLstmStack, Binder, DenseLayer, ParamId, ParamStore};
use crate::trainer::{adam_step, AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"FVNSTYL\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { dim: 64, layers: 3, epochs: 10, batch_size: 32, learning_rate: 0.001, seed: 0 }
    }
}

const NUM_STYLES: usize = StyleLabel::ALL.len();

/// Embedding, stacked bidirectional encoder, two dense layers, softmax
/// over the five styles.
#[derive(Clone, Debug)]
pub struct StyleClassifier {
    pub config: ClassifierConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    embedding: ParamId,
    encoder: BiLstmStack,
    hidden: DenseLayer,
    out: DenseLayer,
}

/// Per-class and macro-averaged scores; `confusion[gold][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub predicted_counts: Vec<usize>,
}

impl StyleClassifier {
    fn build(config: ClassifierConfig, vocab: Vocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.dim < 2 || config.dim % 2 != 0 || config.layers == 0 || config.batch_size == 0 {
            return Err(FvnError::Config("classifier needs an even dim ≥ 2 and positive layers/batch".into()));
        }
        let d = config.dim;
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", init_embedding(rng, vocab.len(), d));
        let encoder = BiLstmStack::new(&mut params, "encoder", d, d, config.layers, rng)?;
        let hidden = DenseLayer::new(&mut params, "hidden", d, d / 2, rng);
        let out = DenseLayer::new(&mut params, "out", d / 2, NUM_STYLES, rng);
        Ok(StyleClassifier { config, vocab, params, embedding, encoder, hidden, out })
    }

    fn ids(&self, tokens: &[String]) -> Vec<u32> {
        let ids = self.vocab.encode(tokens);
        if ids.is_empty() {
            vec![PAD]
        } else {
            ids
        }
    }

    fn logits<'t>(&self, b: &Binder<'t, '_>, ids: &[u32]) -> Result<Var<'t>> {
        let enc = self.encoder.encode(b, &embed(b, self.embedding, ids)?)?;
        self.out.apply(b, &self.hidden.apply(b, &enc.last)?.tanh()?)
    }

    pub fn train(texts: &[Vec<String>], labels: &[StyleLabel], config: ClassifierConfig) -> Result<Self> {
        if texts.is_empty() || texts.len() != labels.len() {
            return arg_err(format!("{} texts for {} style labels", texts.len(), labels.len()));
        }
        let vocab = Vocabulary::from_tokens(texts.iter().flatten());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Self::build(config, vocab, &mut rng)?;
        let encoded: Vec<Vec<u32>> = texts.iter().map(|t| model.ids(t)).collect();
        let hp = AdamConfig { lr: model.config.learning_rate, ..AdamConfig::default() };
        let mut adam = AdamState::new(&model.params);
        for epoch in 0..model.config.epochs {
            let mut order: Vec<usize> = (0..texts.len()).collect();
            let mut shuffle = ChaCha8Rng::seed_from_u64(model.config.seed);
            shuffle.set_stream(epoch as u64 + 1);
            order.shuffle(&mut shuffle);
            for batch in order.chunks(model.config.batch_size) {
                let mut sum: Vec<Tensor> = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
                for &i in batch {
                    let tape = Tape::new();
                    let b = Binder::new(&tape, &model.params, true);
                    let loss = model.logits(&b, &encoded[i])?.cross_entropy(labels[i].index())?;
                    let g = b.param_grads(&tape.backward(&loss)?);
                    for (acc, gi) in sum.iter_mut().zip(&g) {
                        acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, x)| *a += x / batch.len() as f64);
                    }
                }
                adam_step(&mut model.params, &sum, &mut adam, &hp)?;
            }
        }
        Ok(model)
    }

    pub fn probabilities(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params, false);
        Ok(self.logits(&b, &self.ids(tokens))?.softmax(0)?.data().to_vec())
    }

    pub fn predict(&self, tokens: &[String]) -> Result<StyleLabel> {
        let p = self.probabilities(tokens)?;
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        Ok(StyleLabel::from_index(best).expect("five classes"))
    }

    pub fn evaluate(&self, texts: &[Vec<String>], gold: &[StyleLabel]) -> Result<StyleReport> {
        if texts.len() != gold.len() || texts.is_empty() {
            return arg_err(format!("{} texts for {} gold labels", texts.len(), gold.len()));
        }
        let predicted = texts.iter().map(|t| self.predict(t)).collect::<Result<Vec<_>>>()?;
        Ok(style_report(gold, &predicted))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let conf = toml::to_string(&self.config).expect("config serializes").into_bytes();
        let mut v = ByteWriter::new();
        v.strs(self.vocab.tokens());
        let mut p = ByteWriter::new();
        p.tensors(self.params.values());
        write_container(MAGIC, &[(*b"CONF", conf), (*b"VOCB", v.buf), (*b"PARM", p.buf)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_container(bytes, MAGIC, "style classifier")?;
        let conf = std::str::from_utf8(need_section(&sections, b"CONF")?)
            .map_err(|_| FvnError::Integrity("CONF is not UTF-8".into()))?;
        let config: ClassifierConfig = toml::from_str(conf).map_err(|e| FvnError::Config(e.message().to_string()))?;
        let mut r = ByteReader::new(need_section(&sections, b"VOCB")?, "VOCB");
        let vocab = Vocabulary::from_list(r.strs()?).ok_or_else(|| FvnError::Integrity("bad vocabulary".into()))?;
        r.finish()?;
        let mut r = ByteReader::new(need_section(&sections, b"PARM")?, "PARM");
        let values = r.tensors()?;
        r.finish()?;
        let mut model = Self::build(config, vocab, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params.assign(values)?;
        Ok(model)
    }
}

/// Accuracy plus macro P/R/F1 over the labels that occur in either list.
pub fn style_report(gold: &[StyleLabel], predicted: &[StyleLabel]) -> StyleReport {
    let mut confusion = vec![vec![0usize; NUM_STYLES]; NUM_STYLES];
    for (g, p) in gold.iter().zip(predicted) {
        confusion[g.index()][p.index()] += 1;
    }
    let predicted_counts: Vec<usize> = (0..NUM_STYLES).map(|j| (0..NUM_STYLES).map(|i| confusion[i][j]).sum()).collect();
    let gold_counts: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let active: Vec<usize> = (0..NUM_STYLES).filter(|&i| gold_counts[i] + predicted_counts[i] > 0).collect();
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for &i in &active {
        let tp = confusion[i][i] as f64;
        let p = if predicted_counts[i] > 0 { tp / predicted_counts[i] as f64 } else { 0.0 };
        let r = if gold_counts[i] > 0 { tp / gold_counts[i] as f64 } else { 0.0 };
        mp += p;
        mr += r;
        mf += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let n = active.len().max(1) as f64;
    let correct: usize = (0..NUM_STYLES).map(|i| confusion[i][i]).sum();
    StyleReport {
        accuracy: correct as f64 / gold.len().max(1) as f64,
        macro_precision: mp / n,
        macro_recall: mr / n,
        macro_f1: mf / n,
        labels: StyleLabel::ALL.iter().map(|s| s.as_str().to_string()).collect(),
        confusion,
        predicted_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn separable() -> (Vec<Vec<String>>, Vec<StyleLabel>) {
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        let markers = [("let 's see", StyleLabel::Agreeable), ("oh god", StyleLabel::Disagreeable), ("yeah !", StyleLabel::Extravert)];
        for (i, body) in ["Name_SLOT is nice .", "Name_SLOT serves Food_SLOT .", "Name_SLOT is in Area_SLOT ."].iter().enumerate() {
            for (m, s) in markers {
                texts.push(toks(&format!("{m} {body}")));
                labels.push(s);
                let _ = i;
            }
        }
        (texts, labels)
    }

    #[test]
    fn separable_corpus_is_learned_and_persisted() {
        let (texts, labels) = separable();
        let cfg = ClassifierConfig { dim: 8, layers: 1, epochs: 60, batch_size: 3, learning_rate: 0.02, seed: 1 };
        let c = StyleClassifier::train(&texts, &labels, cfg).unwrap();
        let r = c.evaluate(&texts, &labels).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.predicted_counts.iter().sum::<usize>(), texts.len());
        let back = StyleClassifier::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        for t in &texts {
            assert_eq!(back.predict(t).unwrap(), c.predict(t).unwrap());
        }
    }

    #[test]
    fn report_bookkeeping() {
        use StyleLabel::*;
        let r = style_report(&[Agreeable, Agreeable, Extravert, Extravert], &[Agreeable, Extravert, Extravert, Extravert]);
        assert_eq!(r.accuracy, 0.75);
        // Agreeable: P=1, R=0.5; Extravert: P=2/3, R=1.
        assert!((r.macro_precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r.macro_recall - 0.75).abs() < 1e-12);
        assert_eq!(r.confusion[Agreeable.index()][Extravert.index()], 1);
        assert!(StyleClassifier::train(&[], &[], ClassifierConfig::default()).is_err());
    }
}
