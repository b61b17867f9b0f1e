//! Normalizations, softmax and losses over the last axis.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

fn softmax_rows(x: &[f64], d: usize, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[r * d + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::invalid("softmax", format!("row {r} has no allowed entries")));
        }
        let mut total = 0.0;
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    Ok(out)
}

fn softmax_backward(y: &[f64], g: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - s);
        }
    }
    dx
}

impl Tensor {
    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = self.last_dim();
        let data = softmax_rows(&self.data(), d, None)?;
        Ok(Tensor::from_op(
            "softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(softmax_backward(ctx.out, ctx.grad, d))],
        ))
    }

    /// Softmax over the allowed entries of each row; masked entries get
    /// exactly zero weight and zero gradient.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::shape("masked_softmax", self.shape(), &[mask.len()]));
        }
        let d = self.last_dim();
        let data = softmax_rows(&self.data(), d, Some(mask))?;
        Ok(Tensor::from_op(
            "masked_softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(softmax_backward(ctx.out, ctx.grad, d))],
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if d < 2 {
            return Err(Error::invalid("layer_norm", "last axis must have size >= 2"));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let x = self.data();
        let (gv, bv) = (gain.data(), bias.data());
        let rows = self.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        drop((x, gv, bv));
        let g_t = gain.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            move |ctx| {
                let gain = g_t.data();
                let gx = ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &ctx.grad[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gain[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gain[j];
                            dx[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    dx
                });
                let ggain = ctx.needs(1).then(|| {
                    let mut acc = vec![0.0; d];
                    for (gr, hr) in ctx.grad.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                    acc
                });
                let gbias = ctx.needs(2).then(|| {
                    let mut acc = vec![0.0; d];
                    for gr in ctx.grad.chunks(d) {
                        for j in 0..d {
                            acc[j] += gr[j];
                        }
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            },
        ))
    }

    /// Mean cross-entropy of 2-D logits against class targets. When `allowed`
    /// is given, the softmax of each row runs over its allowed classes only.
    /// An empty batch yields zero.
    pub fn cross_entropy(&self, targets: &[usize], allowed: Option<&[bool]>) -> Result<Tensor> {
        let [m, c] = *self.shape() else {
            return Err(Error::invalid("cross_entropy", "expects 2-D logits"));
        };
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(mask) = allowed {
            if mask.len() != m * c {
                return Err(Error::shape("cross_entropy", self.shape(), &[mask.len()]));
            }
        }
        if m == 0 {
            return Ok(Tensor::scalar(0.0));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t >= c || allowed.is_some_and(|mask| !mask[r * c + t]) {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} of row {r} is not an allowed class"),
                ));
            }
        }
        let probs = softmax_rows(&self.data(), c, allowed)?;
        let logits = self.data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            let ok = |j: usize| allowed.is_none_or(|mask| mask[r * c + j]);
            let max = (0..c)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).filter(|&j| ok(j)).map(|j| (row[j] - max).exp()).sum();
            total += max + sum.ln() - row[t];
        }
        drop(logits);
        let loss = total / m as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy",
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            move |ctx| {
                let scale = ctx.grad[0] / m as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * c + t] -= scale;
                }
                vec![Some(g)]
            },
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let d = self.last_dim();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut radius = Vec::with_capacity(self.rows());
        for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
            radius.push(r);
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v / r;
            }
        }
        drop(x);
        let input = self.clone();
        Tensor::from_op(
            "l2_normalize",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| {
                let x = input.data();
                let mut g = vec![0.0; x.len()];
                for (r, ((xr, gr), dr)) in x
                    .chunks(d)
                    .zip(ctx.grad.chunks(d))
                    .zip(g.chunks_mut(d))
                    .enumerate()
                {
                    let rad = radius[r];
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = gr[j] / rad - xr[j] * xg / (rad * rad * rad);
                    }
                }
                vec![Some(g)]
            },
        )
    }
}
