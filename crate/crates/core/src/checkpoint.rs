//! Single-file binary checkpoint.
//!
//! Layout (little-endian): magic `FVNCKPT\0`, `u32` version, `u32` section
//! count, then per section a 4-byte tag, `u64` payload length, the payload
//! and the SHA-256 digest of the payload.

use std::path::Path;

use crate::binio::{find_section, need_section, read_container, write_container, ByteReader, ByteWriter, FORMAT_VERSION};
use crate::corpus::{DatasetMode, Example, Vocabulary};
use crate::error::{FvnError, Result};
use crate::layers::ParamStore;
use crate::network::Fvn;
use crate::sampler::CodeTables;
use crate::trainer::{AdamState, EpochLog, Progress, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FVNCKPT\0";
pub const VERSION: u32 = FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub content_labels: Vec<String>,
    /// Latest parameters (the resume point).
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub progress: Option<Progress>,
    pub tables: Option<CodeTables>,
}

fn integrity(msg: impl Into<String>) -> FvnError {
    FvnError::Integrity(msg.into())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            vocab: t.model.vocab.clone(),
            content_labels: t.model.content_labels.clone(),
            params: t.model.params.clone(),
            optimizer: Some(t.adam.clone()),
            progress: Some(t.progress.clone()),
            tables: None,
        }
    }

    pub fn mode(&self) -> DatasetMode {
        self.config.mode
    }

    pub fn expect_mode(&self, mode: DatasetMode) -> Result<()> {
        if self.mode() != mode {
            return Err(FvnError::Config(format!(
                "checkpoint was trained in {} mode but {} mode was requested",
                self.mode(),
                mode
            )));
        }
        Ok(())
    }

    fn build(&self, params: ParamStore) -> Result<Fvn> {
        Fvn::from_params(self.config.model(), self.mode(), self.vocab.clone(), self.content_labels.clone(), params)
    }

    /// Model with the latest parameters.
    pub fn model(&self) -> Result<Fvn> {
        self.build(self.params.clone())
    }

    /// Model with the best-by-validation parameters, if recorded.
    pub fn best_model(&self) -> Result<Fvn> {
        let mut params = self.params.clone();
        if let Some(best) = self.progress.as_ref().and_then(|p| p.best_params.clone()) {
            params.assign(best)?;
        }
        self.build(params)
    }

    /// Continue training; only the epoch budget may change.
    pub fn into_trainer(self, epochs: usize, train: Vec<Example>, val: Vec<Example>) -> Result<Trainer> {
        let model = self.model()?;
        let adam = self.optimizer.ok_or_else(|| FvnError::State("checkpoint has no optimizer state".into()))?;
        let progress = self.progress.ok_or_else(|| FvnError::State("checkpoint has no training progress".into()))?;
        let config = TrainConfig { epochs, ..self.config };
        Trainer::resume(config, model, adam, progress, train, val)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((*b"CONF", self.config.to_toml().into_bytes()));

        let mut w = ByteWriter::new();
        w.strs(self.vocab.tokens());
        sections.push((*b"VOCB", w.buf));

        let mut w = ByteWriter::new();
        w.strs(&self.content_labels);
        sections.push((*b"LABL", w.buf));

        let mut w = ByteWriter::new();
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.tensor(t);
        }
        sections.push((*b"PARM", w.buf));

        if let Some(o) = &self.optimizer {
            let mut w = ByteWriter::new();
            w.u64(o.step);
            w.tensors(&o.m);
            w.tensors(&o.v);
            sections.push((*b"OPTM", w.buf));
        }
        if let Some(p) = &self.progress {
            let mut w = ByteWriter::new();
            w.u64(p.epochs_done as u64);
            match p.best_val {
                Some(v) => {
                    w.u8(1);
                    w.f64(v);
                }
                None => w.u8(0),
            }
            match &p.best_params {
                Some(ts) => {
                    w.u8(1);
                    w.tensors(ts);
                }
                None => w.u8(0),
            }
            w.u32(p.history.len() as u32);
            p.history.iter().for_each(|h| w.str(&h.to_json_line()));
            sections.push((*b"PROG", w.buf));
        }
        if let Some(t) = &self.tables {
            let mut w = ByteWriter::new();
            t.write(&mut w);
            sections.push((*b"TABL", w.buf));
        }

        write_container(MAGIC, &sections)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_container(bytes, MAGIC, "checkpoint")?;
        let find = |tag: &[u8; 4]| find_section(&sections, tag);
        let need = |tag: &[u8; 4]| need_section(&sections, tag);

        let conf = std::str::from_utf8(need(b"CONF")?).map_err(|_| integrity("CONF is not UTF-8"))?;
        let config = TrainConfig::from_toml(conf)?;

        let mut r = ByteReader::new(need(b"VOCB")?, "VOCB");
        let tokens = r.strs()?;
        r.finish()?;
        let vocab = Vocabulary::from_list(tokens).ok_or_else(|| integrity("vocabulary is malformed"))?;

        let mut r = ByteReader::new(need(b"LABL")?, "LABL");
        let content_labels = r.strs()?;
        r.finish()?;

        let mut r = ByteReader::new(need(b"PARM")?, "PARM");
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let t = r.tensor()?;
            params.add(name, t);
        }
        r.finish()?;

        let optimizer = match find(b"OPTM") {
            Some(p) => {
                let mut r = ByteReader::new(p, "OPTM");
                let step = r.u64()?;
                let m = r.tensors()?;
                let v = r.tensors()?;
                r.finish()?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        let progress = match find(b"PROG") {
            Some(p) => {
                let mut r = ByteReader::new(p, "PROG");
                let epochs_done = r.u64()? as usize;
                let best_val = if r.u8()? == 1 { Some(r.f64()?) } else { None };
                let best_params = if r.u8()? == 1 { Some(r.tensors()?) } else { None };
                let mut history = Vec::new();
                for _ in 0..r.u32()? {
                    let line = r.str()?;
                    let log: EpochLog =
                        serde_json::from_str(&line).map_err(|e| integrity(format!("bad history record: {e}")))?;
                    history.push(log);
                }
                r.finish()?;
                Some(Progress { epochs_done, best_val, best_params, history })
            }
            None => None,
        };
        let tables = match find(b"TABL") {
            Some(p) => {
                let mut r = ByteReader::new(p, "TABL");
                let t = CodeTables::read(&mut r)?;
                r.finish()?;
                Some(t)
            }
            None => None,
        };
        Ok(Checkpoint { config, vocab, content_labels, params, optimizer, progress, tables })
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
