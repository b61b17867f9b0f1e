//! Rich Attention scores: a scalar reference and the fused sparse op.

use std::rc::Rc;

use super::{log_distance, order_indicator, EtcMask, TokenGeometry};
use crate::error::{Error, Result};
use crate::tensor::ops::{sigmoid_value, softplus_value};
use crate::tensor::Tensor;

/// Order probabilities are kept inside `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-6;

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// `o ln p + (1 - o) ln(1 - p)`.
pub fn order_term(o: f64, p: f64) -> f64 {
    let p = clamp_p(p);
    o * p.ln() + (1.0 - o) * (1.0 - p).ln()
}

/// `-theta^2 (d - mu)^2 / 2`.
pub fn distance_term(theta: f64, d: f64, mu: f64) -> f64 {
    -0.5 * theta * theta * (d - mu) * (d - mu)
}

/// One head's spatial parameters in the `[q; k]` weight layout, indexed by
/// axis (0 = x, 1 = y).
#[derive(Clone, Debug)]
pub struct RichHeadScalars {
    pub order_w: [Vec<f64>; 2],
    pub order_b: [f64; 2],
    pub dist_w: [Vec<f64>; 2],
    pub dist_b: [f64; 2],
    pub theta_raw: [f64; 2],
}

fn affine_qk(w: &[f64], b: f64, q: &[f64], k: &[f64]) -> f64 {
    let d = q.len();
    b + w[..d].iter().zip(q).map(|(a, x)| a * x).sum::<f64>() + w[d..].iter().zip(k).map(|(a, x)| a * x).sum::<f64>()
}

/// Direct evaluation of one score. Pairs touching a global token get `q . k` only.
pub fn rich_score(q: &[f64], k: &[f64], gi: (f64, f64), gj: (f64, f64), involves_global: bool, head: &RichHeadScalars) -> f64 {
    let mut s: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    if involves_global {
        return s;
    }
    for (a, (ci, cj)) in [(gi.0, gj.0), (gi.1, gj.1)].into_iter().enumerate() {
        let p = sigmoid_value(affine_qk(&head.order_w[a], head.order_b[a], q, k));
        let mu = affine_qk(&head.dist_w[a], head.dist_b[a], q, k);
        let theta = softplus_value(head.theta_raw[a]);
        s += order_term(order_indicator(ci, cj), p) + distance_term(theta, log_distance(ci, cj), mu);
    }
    s
}

/// Per-position halves of the `[q; k]` affines: `order_q[i] + order_k[j]`
/// is the order logit of pair `(i, j)`, likewise for the distance mean.
pub(crate) struct RichInputs<'a> {
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub order_q: &'a Tensor,
    pub order_k: &'a Tensor,
    pub dist_q: &'a Tensor,
    pub dist_k: &'a Tensor,
    /// Positive scale per axis, shape `[2]`.
    pub theta: &'a Tensor,
    pub geom: &'a TokenGeometry,
    pub mask: &'a Rc<EtcMask>,
}

/// Dense `[n, n]` score matrix; entries outside the mask are zero and must
/// be masked again by the softmax.
pub(crate) fn rich_scores(inp: RichInputs<'_>) -> Result<Tensor> {
    let n = inp.geom.len();
    let &[qn, dh] = inp.q.shape() else {
        return Err(Error::invalid("rich_scores", "q must be 2-D"));
    };
    if qn != n || inp.k.shape() != [n, dh] || inp.mask.n != n {
        return Err(Error::shape("rich_scores", inp.q.shape(), inp.k.shape()));
    }
    for t in [inp.order_q, inp.order_k, inp.dist_q, inp.dist_k] {
        if t.shape() != [n, 2] {
            return Err(Error::shape("rich_scores", &[n, 2], t.shape()));
        }
    }
    if inp.theta.shape() != [2] {
        return Err(Error::shape("rich_scores", &[2], inp.theta.shape()));
    }
    let geom = Rc::new(inp.geom.clone());
    let mask = Rc::clone(inp.mask);
    let parents = vec![
        inp.q.clone(),
        inp.k.clone(),
        inp.order_q.clone(),
        inp.order_k.clone(),
        inp.dist_q.clone(),
        inp.dist_k.clone(),
        inp.theta.clone(),
    ];
    let mut out = vec![0.0; n * n];
    {
        let (q, k) = (inp.q.data(), inp.k.data());
        let (oq, ok, dq, dk, th) = (
            inp.order_q.data(),
            inp.order_k.data(),
            inp.dist_q.data(),
            inp.dist_k.data(),
            inp.theta.data(),
        );
        for i in 0..n {
            for &j in mask.row(i) {
                let mut s = crate::tensor::linear::dot(&q[i * dh..][..dh], &k[j * dh..][..dh]);
                if !geom.is_global(i) && !geom.is_global(j) {
                    for a in 0..2 {
                        let c = geom.axis(a);
                        let p = sigmoid_value(oq[i * 2 + a] + ok[j * 2 + a]);
                        let mu = dq[i * 2 + a] + dk[j * 2 + a];
                        s += order_term(order_indicator(c[i], c[j]), p)
                            + distance_term(th[a], log_distance(c[i], c[j]), mu);
                    }
                }
                out[i * n + j] = s;
            }
        }
    }
    let saved: Vec<Tensor> = parents.clone();
    Ok(Tensor::from_op("rich_scores", out, vec![n, n], parents, move |ctx| {
        let (q, k) = (saved[0].data(), saved[1].data());
        let (oq, ok, dq, dk, th) = (saved[2].data(), saved[3].data(), saved[4].data(), saved[5].data(), saved[6].data());
        let mut gq = vec![0.0; n * dh];
        let mut gk = vec![0.0; n * dh];
        let mut g_oq = vec![0.0; n * 2];
        let mut g_ok = vec![0.0; n * 2];
        let mut g_dq = vec![0.0; n * 2];
        let mut g_dk = vec![0.0; n * 2];
        let mut g_th = vec![0.0; 2];
        for i in 0..n {
            for &j in mask.row(i) {
                let g = ctx.grad[i * n + j];
                if g == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    gq[i * dh + t] += g * k[j * dh + t];
                    gk[j * dh + t] += g * q[i * dh + t];
                }
                if geom.is_global(i) || geom.is_global(j) {
                    continue;
                }
                for a in 0..2 {
                    let c = geom.axis(a);
                    let o = order_indicator(c[i], c[j]);
                    let p = sigmoid_value(oq[i * 2 + a] + ok[j * 2 + a]);
                    // the clamp is flat outside its range
                    let dz = if (P_CLAMP..=1.0 - P_CLAMP).contains(&p) { o - p } else { 0.0 };
                    g_oq[i * 2 + a] += g * dz;
                    g_ok[j * 2 + a] += g * dz;
                    let r = log_distance(c[i], c[j]) - (dq[i * 2 + a] + dk[j * 2 + a]);
                    let dmu = th[a] * th[a] * r;
                    g_dq[i * 2 + a] += g * dmu;
                    g_dk[j * 2 + a] += g * dmu;
                    g_th[a] -= g * th[a] * r * r;
                }
            }
        }
        vec![Some(gq), Some(gk), Some(g_oq), Some(g_ok), Some(g_dq), Some(g_dk), Some(g_th)]
    }))
}
