//! Elementwise maps, reductions and shape manipulation.

use super::Tensor;
use crate::error::{Error, Result};

fn unary<F, G>(x: &Tensor, op: &'static str, f: F, df: G) -> Tensor
where
    F: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64 + 'static,
{
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let input = x.clone();
    Tensor::from_op(op, data, x.shape().to_vec(), vec![x.clone()], move |ctx| {
        let xs = input.data();
        let g = ctx
            .grad
            .iter()
            .zip(xs.iter())
            .zip(ctx.out)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(g)]
    })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_value(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |ctx| {
                let g = ctx.grad.to_vec();
                vec![ctx.needs(0).then(|| g.clone()), ctx.needs(1).then_some(g)]
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |ctx| {
                vec![
                    ctx.needs(0).then(|| ctx.grad.to_vec()),
                    ctx.needs(1).then(|| ctx.grad.iter().map(|g| -g).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |ctx| {
                let ga = ctx.needs(0).then(|| {
                    ctx.grad
                        .iter()
                        .zip(b.data().iter())
                        .map(|(g, y)| g * y)
                        .collect()
                });
                let gb = ctx.needs(1).then(|| {
                    ctx.grad
                        .iter()
                        .zip(a.data().iter())
                        .map(|(g, x)| g * x)
                        .collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(
            "mul_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.iter().map(|g| g * c).collect())],
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Adds `bias` (shape `[last_dim]`) to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if bias.shape() != [d] || self.rank() == 0 {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let mut data = self.to_vec();
        for row in data.chunks_mut(d) {
            for (x, bb) in row.iter_mut().zip(b.iter()) {
                *x += bb;
            }
        }
        drop(b);
        Ok(Tensor::from_op(
            "add_bias",
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            move |ctx| {
                let gb = ctx.needs(1).then(|| {
                    let mut gb = vec![0.0; d];
                    for row in ctx.grad.chunks(d) {
                        for (acc, g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    gb
                });
                vec![ctx.needs(0).then(|| ctx.grad.to_vec()), gb]
            },
        ))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn mul_rows(&self, factors: &[f64]) -> Result<Tensor> {
        let d = self.last_dim();
        if factors.len() != self.rows() {
            return Err(Error::shape("mul_rows", self.shape(), &[factors.len()]));
        }
        let mut data = self.to_vec();
        for (row, f) in data.chunks_mut(d.max(1)).zip(factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let factors = factors.to_vec();
        Ok(Tensor::from_op(
            "mul_rows",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| {
                let mut g = ctx.grad.to_vec();
                for (row, f) in g.chunks_mut(d.max(1)).zip(&factors) {
                    row.iter_mut().for_each(|x| *x *= f);
                }
                vec![Some(g)]
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        unary(self, "gelu", gelu_value, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, "sigmoid", sigmoid_value, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, "softplus", softplus_value, |x, _| sigmoid_value(x))
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&self) -> Tensor {
        unary(self, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], Vec::new(), vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        ))
    }

    /// Concatenates along the last axis; all inputs share the leading dims.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = &first.shape()[..first.rank().saturating_sub(1)];
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let rows = first.rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for r in 0..rows {
                for (d, &w) in datas.iter().zip(&widths) {
                    data.extend_from_slice(&d[r * w..(r + 1) * w]);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            parts.iter().map(|t| (*t).clone()).collect(),
            move |ctx| {
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let g = ctx.needs(i).then(|| {
                            let mut g = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                g.extend_from_slice(
                                    &ctx.grad[r * total + offset..r * total + offset + w],
                                );
                            }
                            g
                        });
                        offset += w;
                        g
                    })
                    .collect()
            },
        ))
    }

    /// Stacks 2-D (or higher) tensors along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        if first.rank() == 0 {
            return Err(Error::invalid("concat_rows", "scalars cannot be stacked"));
        }
        let tail = first.shape()[1..].to_vec();
        for p in parts {
            if p.rank() != first.rank() || p.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![parts.iter().map(|p| p.shape()[0]).sum()];
        shape.extend_from_slice(&tail);
        Ok(Tensor::from_op(
            "concat_rows",
            data,
            shape,
            parts.iter().map(|t| (*t).clone()).collect(),
            move |ctx| {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        let g = ctx.needs(i).then(|| ctx.grad[offset..offset + n].to_vec());
                        offset += n;
                        g
                    })
                    .collect()
            },
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let d = self.last_dim();
        if start + len > d || self.rank() == 0 {
            return Err(Error::invalid(
                "narrow_last",
                format!("range {start}..{} out of bounds for {:?}", start + len, self.shape()),
            ));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * len);
        {
            let x = self.data();
            for r in 0..rows {
                data.extend_from_slice(&x[r * d + start..r * d + start + len]);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor::from_op(
            "narrow_last",
            data,
            shape,
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    g[r * d + start..r * d + start + len]
                        .copy_from_slice(&ctx.grad[r * len..(r + 1) * len]);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Rows `start..start + len` of the first axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() == 0 || start + len > self.shape()[0] {
            return Err(Error::invalid(
                "narrow_rows",
                format!("range {start}..{} out of bounds for {:?}", start + len, self.shape()),
            ));
        }
        let stride = self.numel() / self.shape()[0].max(1);
        let data = self.data()[start * stride..(start + len) * stride].to_vec();
        let total = self.numel();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Ok(Tensor::from_op(
            "narrow_rows",
            data,
            shape,
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; total];
                g[start * stride..(start + len) * stride].copy_from_slice(ctx.grad);
                vec![Some(g)]
            },
        ))
    }

    /// Gathers rows of a 2-D tensor: `out[r] = self[indices[r]]`.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid("select_rows", "expects a 2-D tensor"));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "select_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        {
            let x = self.data();
            for &i in indices {
                data.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "select_rows",
            data,
            vec![indices.len(), d],
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; n * d];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, x) in g[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&ctx.grad[r * d..(r + 1) * d])
                    {
                        *acc += x;
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Scatter-add of rows into `num_out` rows: `out[targets[r]] += self[r]`.
    pub fn index_add_rows(&self, targets: &[usize], num_out: usize) -> Result<Tensor> {
        if self.rank() != 2 || targets.len() != self.shape()[0] {
            return Err(Error::shape("index_add_rows", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= num_out) {
            return Err(Error::invalid(
                "index_add_rows",
                format!("target {bad} out of range for {num_out} rows"),
            ));
        }
        let d = self.shape()[1];
        let mut data = vec![0.0; num_out * d];
        {
            let x = self.data();
            for (r, &t) in targets.iter().enumerate() {
                for (acc, v) in data[t * d..(t + 1) * d].iter_mut().zip(&x[r * d..(r + 1) * d]) {
                    *acc += v;
                }
            }
        }
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "index_add_rows",
            data,
            vec![num_out, d],
            vec![self.clone()],
            move |ctx| {
                let mut g = Vec::with_capacity(targets.len() * d);
                for &t in &targets {
                    g.extend_from_slice(&ctx.grad[t * d..(t + 1) * d]);
                }
                vec![Some(g)]
            },
        ))
    }
}
