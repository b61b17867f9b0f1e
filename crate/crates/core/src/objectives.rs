//! Pre-training losses: masked-token cross-entropy and NT-Xent between two
//! corrupted views, combined with fixed weights.

use serde::{Deserialize, Serialize};

use crate::data::MlmPlan;
use crate::error::{Error, Result};
use crate::graph::{corrupt_pair, CorruptionConfig};
use crate::model::{FormNetV2, PreparedDoc};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_mlm: f64,
    pub w_gcl: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mlm: 1.0,
            w_gcl: 0.5,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_mlm >= 0.0 && self.w_gcl >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over the masked positions; zero when nothing is masked.
pub fn mlm_loss(logits: &Tensor, original_ids: &[u32]) -> Result<Tensor> {
    let targets: Vec<usize> = original_ids.iter().map(|&t| t as usize).collect();
    logits.cross_entropy(&targets, None)
}

/// NT-Xent over both views. Each of the `2N` anchors has its counterpart in
/// the other view as positive and every other embedding, same view
/// included, as a negative.
pub fn nt_xent(z1: &Tensor, z2: &Tensor, temperature: f64) -> Result<Tensor> {
    if z1.shape() != z2.shape() || z1.rank() != 2 {
        return Err(Error::shape("nt_xent", z1.shape(), z2.shape()));
    }
    let n = z1.rows();
    if n < 2 {
        return Err(Error::invalid("nt_xent", format!("needs at least 2 nodes for negatives, got {n}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("nt_xent", "temperature must be positive"));
    }
    let z = Tensor::concat_rows(&[z1, z2])?;
    let sims = z.matmul_nt(&z)?.mul_scalar(1.0 / temperature);
    nt_xent_on_similarities(&sims, n)
}

/// The loss on a precomputed `[2N, 2N]` matrix of scaled similarities.
pub(crate) fn nt_xent_on_similarities(sims: &Tensor, n: usize) -> Result<Tensor> {
    let m = 2 * n;
    if sims.shape() != [m, m] {
        return Err(Error::shape("nt_xent", sims.shape(), &[m, m]));
    }
    let allowed: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    let targets: Vec<usize> = (0..m).map(|a| (a + n) % m).collect();
    sims.cross_entropy(&targets, Some(&allowed))
}

/// Per-document pre-training loss with its parts for logging. A part is
/// `None` when its weight is zero and it was not computed.
pub struct PretrainLoss {
    pub total: Tensor,
    pub mlm: Option<f64>,
    pub gcl: Option<f64>,
}

/// MLM on the uncorrupted graph plus weighted NT-Xent over the two views
/// drawn from `corruption`. Image features are computed once and shared.
pub fn pretrain_loss(
    model: &FormNetV2,
    doc: &PreparedDoc,
    plan: &MlmPlan,
    corruption: &CorruptionConfig,
    weights: &LossWeights,
) -> Result<PretrainLoss> {
    weights.validate()?;
    let image = model.edge_image_features(doc)?;
    let mut total = Tensor::scalar(0.0);
    let mut report = (None, None);
    if weights.w_mlm > 0.0 {
        let logits = model.forward_mlm(doc, plan, image.as_ref())?;
        let l = mlm_loss(&logits, &plan.original_ids)?;
        report.0 = Some(l.item()?);
        total = total.add(&l.mul_scalar(weights.w_mlm))?;
    }
    if weights.w_gcl > 0.0 {
        let (v1, v2) = corrupt_pair(&doc.graph, corruption, &doc.id)?;
        let z1 = model.forward_contrastive(doc, &v1, image.as_ref())?;
        let z2 = model.forward_contrastive(doc, &v2, image.as_ref())?;
        let l = nt_xent(&z1, &z2, weights.temperature)?;
        report.1 = Some(l.item()?);
        total = total.add(&l.mul_scalar(weights.w_gcl))?;
    }
    Ok(PretrainLoss {
        total,
        mlm: report.0,
        gcl: report.1,
    })
}
