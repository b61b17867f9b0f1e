//! Matrix products.

use super::Tensor;
use crate::error::{Error, Result};

/// `a [m,k] · b [k,n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a [m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// `a [m,k]ᵀ · b [m,n]` giving `[k,n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler keep several lanes busy
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(op, format!("expects a 2-D tensor, got {s:?}"))),
    }
}

impl Tensor {
    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let data = mm_nn(&self.data(), &other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |ctx| {
                let ga = ctx.needs(0).then(|| mm_nt(ctx.grad, &b.data(), m, n, k));
                let gb = ctx.needs(1).then(|| mm_tn(&a.data(), ctx.grad, m, k, n));
                vec![ga, gb]
            },
        ))
    }

    /// `self · otherᵀ` for `self [m,k]` and `other [n,k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul_nt", self)?;
        let (n, k2) = dims2("matmul_nt", other)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(), other.shape()));
        }
        let data = mm_nt(&self.data(), &other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul_nt",
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |ctx| {
                let ga = ctx.needs(0).then(|| mm_nn(ctx.grad, &b.data(), m, n, k));
                let gb = ctx.needs(1).then(|| mm_tn(ctx.grad, &a.data(), m, n, k));
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2("transpose", self)?;
        let x = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "transpose",
            data,
            vec![c, r],
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = ctx.grad[j * r + i];
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// `y = x W + b` applied to every row of `x`; `W` is `[in, out]`.
    pub fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let din = self.last_dim();
        let flat = if self.rank() == 2 {
            self.clone()
        } else {
            self.reshape(&[self.rows(), din])?
        };
        let y = flat.matmul(weight)?.add_bias(bias)?;
        if self.rank() == 2 {
            Ok(y)
        } else {
            let mut shape = self.shape().to_vec();
            *shape.last_mut().unwrap() = weight.last_dim();
            y.reshape(&shape)
        }
    }
}
