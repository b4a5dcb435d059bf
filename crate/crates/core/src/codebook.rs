//! Vector-quantized codebooks: nearest lookup, VQ loss with stop-gradient,
//! straight-through quantization and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{arg_err, FvnError, Result};
use crate::layers::{uniform, Binder, ParamId, ParamStore};

pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookKind {
    Content,
    Style,
    SlotValue,
    Word,
}

/// A bank of `count × D` latent vectors living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Codebook {
    pub kind: CodebookKind,
    pub beta: f64,
    pub param: ParamId,
}

/// Index of the row closest to `z` in squared Euclidean distance, with the
/// distance. Ties go to the lowest index.
pub fn nearest_row(entries: &Tensor, z: &[f64]) -> (usize, f64) {
    let d = entries.cols();
    debug_assert_eq!(z.len(), d);
    let mut best = (0, f64::INFINITY);
    for (i, row) in entries.data().chunks_exact(d).enumerate() {
        let dist: f64 = row.iter().zip(z).map(|(e, x)| (e - x) * (e - x)).sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

/// `‖sg(z) − e‖² + β‖z − sg(e)‖²`.
pub fn vq_loss_terms<'t>(z: &Var<'t>, e: &Var<'t>, beta: f64) -> Result<Var<'t>> {
    let codebook_term = z.stop_gradient().sub(e)?.sum_sq()?;
    let commitment = z.sub(&e.stop_gradient())?.sum_sq()?.scale(beta)?;
    codebook_term.add(&commitment)
}

impl Codebook {
    /// Content codebook, uniform in `[−1/K, 1/K]`.
    pub fn init_content(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(FvnError::Init(format!("codebook {name} needs positive size, got {count}×{dim}")));
        }
        let param = store.add(name, uniform(rng, &[count, dim], 1.0 / count as f64));
        Ok(Codebook { kind: CodebookKind::Content, beta: DEFAULT_BETA, param })
    }

    /// Codebook initialized as a copy of an embedding table with
    /// `vocab_size` rows.
    pub fn init_from_embedding(
        store: &mut ParamStore,
        name: &str,
        kind: CodebookKind,
        source: &Tensor,
        vocab_size: usize,
    ) -> Result<Self> {
        if source.ndim() != 2 || source.rows() != vocab_size {
            return Err(FvnError::Init(format!(
                "{name}: source table has shape {:?}, expected {vocab_size} rows",
                source.shape()
            )));
        }
        let param = store.add(name, source.clone());
        Ok(Codebook { kind, beta: DEFAULT_BETA, param })
    }

    /// Wrap an existing parameter (the word codebook shares the embedding).
    pub fn wrap(kind: CodebookKind, param: ParamId) -> Self {
        Codebook { kind, beta: DEFAULT_BETA, param }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn entries<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.get(self.param)
    }

    pub fn len(&self, store: &ParamStore) -> usize {
        self.entries(store).rows()
    }

    pub fn nearest(&self, store: &ParamStore, z: &[f64]) -> Result<(usize, Tensor)> {
        let entries = self.entries(store);
        if z.len() != entries.cols() {
            return crate::error::dim_err("nearest", format!("query width {}, codebook width {}", z.len(), entries.cols()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FvnError::Numeric { op: "nearest".into(), detail: "non-finite query".into() });
        }
        let (k, _) = nearest_row(entries, z);
        Ok((k, Tensor::vector(entries.row(k).to_vec())))
    }

    pub fn vq_loss<'t>(&self, b: &Binder<'t, '_>, z: &Var<'t>, index: usize) -> Result<Var<'t>> {
        if index >= self.len(b.store()) {
            return arg_err(format!("codebook index {index} out of range"));
        }
        let e = b.var(self.param).row(index)?;
        vq_loss_terms(z, &e, self.beta)
    }

    /// Forward value is the nearest row; gradients pass straight to `z`.
    pub fn quantize_straight_through<'t>(&self, b: &Binder<'t, '_>, z: &Var<'t>) -> Result<(usize, Var<'t>)> {
        let (k, entry) = self.nearest(b.store(), z.data())?;
        Ok((k, z.straight_through(entry)?))
    }
}
