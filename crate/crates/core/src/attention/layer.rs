//! Post-norm transformer block with multi-head Rich Attention.

use std::rc::Rc;

use super::rich::{rich_scores, RichInputs};
use super::{EtcConfig, EtcMask, TokenGeometry};
use crate::error::Result;
use crate::tensor::{ParamStore, Tensor};

/// `softplus(THETA_INIT) == 1`.
const THETA_INIT: f64 = 0.541_324_854_612_918_1;

pub(crate) struct HeadParams {
    pub order_q: Tensor,
    pub order_k: Tensor,
    pub order_b: Tensor,
    pub dist_q: Tensor,
    pub dist_k: Tensor,
    pub dist_b: Tensor,
    pub theta_raw: Tensor,
}

pub struct RichAttentionLayer {
    cfg: EtcConfig,
    pub(crate) wq: Tensor,
    pub(crate) bq: Tensor,
    pub(crate) wk: Tensor,
    pub(crate) bk: Tensor,
    pub(crate) wv: Tensor,
    pub(crate) bv: Tensor,
    pub(crate) wo: Tensor,
    pub(crate) bo: Tensor,
    pub(crate) heads: Vec<HeadParams>,
    ln1: (Tensor, Tensor),
    pub(crate) ff1: (Tensor, Tensor),
    pub(crate) ff2: (Tensor, Tensor),
    ln2: (Tensor, Tensor),
}

pub struct AttentionOutput {
    pub hidden: Tensor,
    /// Per head, the `[n, n]` attention weights, when requested.
    pub weights: Option<Vec<Vec<f64>>>,
}

impl RichAttentionLayer {
    pub fn new(cfg: &EtcConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let (h, dh) = (cfg.hidden, cfg.head_dim());
        let mut w = |name: &str, shape: &[usize]| store.weight(format!("{prefix}.{name}"), shape);
        let (wq, wk, wv, wo) = (w("query.w", &[h, h])?, w("key.w", &[h, h])?, w("value.w", &[h, h])?, w("output.w", &[h, h])?);
        let ff1_w = w("ffn.in.w", &[h, 2 * h])?;
        let ff2_w = w("ffn.out.w", &[2 * h, h])?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for i in 0..cfg.num_heads {
            let p = format!("{prefix}.head{i}");
            heads.push(HeadParams {
                order_q: store.weight(format!("{p}.order.q"), &[dh, 2])?,
                order_k: store.weight(format!("{p}.order.k"), &[dh, 2])?,
                order_b: store.zeros(format!("{p}.order.b"), &[2])?,
                dist_q: store.weight(format!("{p}.dist.q"), &[dh, 2])?,
                dist_k: store.weight(format!("{p}.dist.k"), &[dh, 2])?,
                dist_b: store.zeros(format!("{p}.dist.b"), &[2])?,
                theta_raw: store.constant(format!("{p}.theta_raw"), &[2], THETA_INIT)?,
            });
        }
        let mut z = |name: &str, n: usize| store.zeros(format!("{prefix}.{name}"), &[n]);
        let (bq, bk, bv, bo) = (z("query.b", h)?, z("key.b", h)?, z("value.b", h)?, z("output.b", h)?);
        let (ff1_b, ff2_b) = (z("ffn.in.b", 2 * h)?, z("ffn.out.b", h)?);
        let ln1 = (store.constant(format!("{prefix}.ln1.gain"), &[h], 1.0)?, store.zeros(format!("{prefix}.ln1.bias"), &[h])?);
        let ln2 = (store.constant(format!("{prefix}.ln2.gain"), &[h], 1.0)?, store.zeros(format!("{prefix}.ln2.bias"), &[h])?);
        Ok(RichAttentionLayer {
            cfg: cfg.clone(),
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
            ln1,
            ff1: (ff1_w, ff1_b),
            ff2: (ff2_w, ff2_b),
            ln2,
        })
    }

    /// One block over `x [n, hidden]`.
    pub fn forward(&self, x: &Tensor, geom: &TokenGeometry, mask: &Rc<EtcMask>, record: bool) -> Result<AttentionOutput> {
        let dh = self.cfg.head_dim();
        let q = x.affine(&self.wq, &self.bq)?;
        let k = x.affine(&self.wk, &self.bk)?;
        let v = x.affine(&self.wv, &self.bv)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = record.then(Vec::new);
        for (i, hp) in self.heads.iter().enumerate() {
            let (qh, kh, vh) = (q.narrow_last(i * dh, dh)?, k.narrow_last(i * dh, dh)?, v.narrow_last(i * dh, dh)?);
            let theta = hp.theta_raw.softplus();
            let scores = rich_scores(RichInputs {
                q: &qh,
                k: &kh,
                order_q: &qh.matmul(&hp.order_q)?.add_bias(&hp.order_b)?,
                order_k: &kh.matmul(&hp.order_k)?,
                dist_q: &qh.matmul(&hp.dist_q)?.add_bias(&hp.dist_b)?,
                dist_k: &kh.matmul(&hp.dist_k)?,
                theta: &theta,
                geom,
                mask,
            })?;
            let attn = scores.masked_softmax(mask.allowed())?;
            if let Some(w) = weights.as_mut() {
                w.push(attn.to_vec());
            }
            outs.push(attn.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let merged = Tensor::concat_last(&refs)?.affine(&self.wo, &self.bo)?;
        let h1 = x.add(&merged)?.layer_norm(&self.ln1.0, &self.ln1.1)?;
        let ff = h1.affine(&self.ff1.0, &self.ff1.1)?.gelu().affine(&self.ff2.0, &self.ff2.1)?;
        let hidden = h1.add(&ff)?.layer_norm(&self.ln2.0, &self.ln2.1)?;
        Ok(AttentionOutput { hidden, weights })
    }
}
