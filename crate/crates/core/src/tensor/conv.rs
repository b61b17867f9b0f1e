//! 2-D convolution with "same" padding.

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of one convolution call, resolved from input and kernel shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output size and leading pad of a "same" convolution along one axis.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
    (out, needed / 2)
}

impl Conv2dSpec {
    fn resolve(x: &Tensor, w: &Tensor, stride_h: usize, stride_w: usize) -> Result<Self> {
        if stride_h == 0 || stride_w == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (batch, c, h, wd) = match *x.shape() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::invalid("conv2d", format!("input must be [B,C,H,W] or [C,H,W], got {:?}", x.shape()))),
        };
        let [o, c2, kh, kw] = *w.shape() else {
            return Err(Error::invalid("conv2d", "kernel must be [O,C,KH,KW]"));
        };
        if c != c2 {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let (out_h, pad_top) = same_padding(h, kh, stride_h);
        let (out_w, pad_left) = same_padding(wd, kw, stride_w);
        Ok(Conv2dSpec {
            batch,
            in_channels: c,
            out_channels: o,
            in_h: h,
            in_w: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride_h,
            stride_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Range of output columns whose tap `kx` lands inside the input.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad_left > kx {
            (self.pad_left - kx).div_ceil(self.stride_w)
        } else {
            0
        };
        let hi_num = self.in_w as isize - 1 + self.pad_left as isize - kx as isize;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = ((hi_num as usize) / self.stride_w + 1).min(self.out_w);
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }

    /// Visits every (output index, input index, kernel index) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let s = self;
        let in_plane = s.in_h * s.in_w;
        let out_plane = s.out_h * s.out_w;
        for b in 0..s.batch {
            for o in 0..s.out_channels {
                let out_base = (b * s.out_channels + o) * out_plane;
                for c in 0..s.in_channels {
                    let in_base = (b * s.in_channels + c) * in_plane;
                    for ky in 0..s.kernel_h {
                        for kx in 0..s.kernel_w {
                            let widx = ((o * s.in_channels + c) * s.kernel_h + ky) * s.kernel_w + kx;
                            let (lo, hi) = s.valid_cols(kx);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..s.out_h {
                                let Some(iy) = s.input_row(oy, ky) else { continue };
                                let orow = out_base + oy * s.out_w;
                                let irow = in_base + iy * s.in_w;
                                let ix0 = lo * s.stride_w + kx - s.pad_left;
                                f(widx, orow + lo, irow + ix0, hi - lo, o);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Convolves `[B,C,H,W]` (or `[C,H,W]`) with `[O,C,KH,KW]` kernels and an
    /// `[O]` bias, zero-padding so the output is `ceil(in / stride)` per axis.
    pub fn conv2d(&self, kernels: &Tensor, bias: &Tensor, stride_h: usize, stride_w: usize) -> Result<Tensor> {
        let spec = Conv2dSpec::resolve(self, kernels, stride_h, stride_w)?;
        if bias.shape() != [spec.out_channels] {
            return Err(Error::shape("conv2d", kernels.shape(), bias.shape()));
        }
        let sw = spec.stride_w;
        let out_plane = spec.out_h * spec.out_w;
        let mut out = vec![0.0; spec.batch * spec.out_channels * out_plane];
        {
            let x = self.data();
            let w = kernels.data();
            let bv = bias.data();
            for (p, plane) in out.chunks_mut(out_plane).enumerate() {
                plane.fill(bv[p % spec.out_channels]);
            }
            spec.for_each_tap(|widx, ostart, istart, len, _| {
                let wv = w[widx];
                if wv == 0.0 {
                    return;
                }
                let orow = &mut out[ostart..ostart + len];
                if sw == 1 {
                    for (o, i) in orow.iter_mut().zip(&x[istart..istart + len]) {
                        *o += wv * i;
                    }
                } else {
                    for (k, o) in orow.iter_mut().enumerate() {
                        *o += wv * x[istart + k * sw];
                    }
                }
            });
        }
        let mut shape = vec![spec.out_channels, spec.out_h, spec.out_w];
        if self.rank() == 4 {
            shape.insert(0, spec.batch);
        }
        let (xt, wt) = (self.clone(), kernels.clone());
        Ok(Tensor::from_op(
            "conv2d",
            out,
            shape,
            vec![self.clone(), kernels.clone(), bias.clone()],
            move |ctx| {
                let x = xt.data();
                let w = wt.data();
                let g = ctx.grad;
                let mut gx = ctx.needs(0).then(|| vec![0.0; x.len()]);
                let mut gw = ctx.needs(1).then(|| vec![0.0; w.len()]);
                spec.for_each_tap(|widx, ostart, istart, len, _| {
                    let grow = &g[ostart..ostart + len];
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[widx];
                        if wv != 0.0 {
                            for (k, gv) in grow.iter().enumerate() {
                                gx[istart + k * sw] += wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let mut acc = 0.0;
                        for (k, gv) in grow.iter().enumerate() {
                            acc += gv * x[istart + k * sw];
                        }
                        gw[widx] += acc;
                    }
                });
                let gb = ctx.needs(2).then(|| {
                    let mut gb = vec![0.0; spec.out_channels];
                    for (p, plane) in g.chunks(out_plane).enumerate() {
                        gb[p % spec.out_channels] += plane.iter().sum::<f64>();
                    }
                    gb
                });
                vec![gx, gw, gb]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{scoped_precision, Precision};

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Tensor::from_slice(&(0..12).map(f64::from).collect::<Vec<_>>(), &[1, 3, 4]).unwrap();
        let k = Tensor::from_slice(&[1.0], &[1, 1, 1, 1]).unwrap();
        let y = x.conv2d(&k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn constant_field_with_ones_kernel() {
        let _g = scoped_precision(Precision::F64);
        let c = 0.7;
        let x = Tensor::full(&[1, 5, 5], c);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv2d(&k, &Tensor::zeros(&[1]), 1, 1).unwrap().to_vec();
        assert!((y[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
        // corner sees four taps inside the image
        assert!((y[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn stride_two_halves_the_grid() {
        let x = Tensor::zeros(&[2, 8, 8]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&k, &Tensor::zeros(&[3]), 2, 2).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        let y = x.conv2d(&k, &Tensor::zeros(&[3]), 1, 2).unwrap();
        assert_eq!(y.shape(), &[3, 8, 4]);
    }

    #[test]
    fn non_positive_stride_is_an_error() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(x.conv2d(&k, &Tensor::zeros(&[1]), 0, 1).is_err());
    }

    #[test]
    fn matches_naive_convolution() {
        let _g = scoped_precision(Precision::F64);
        let (c, h, w, o) = (2, 5, 7, 3);
        let xs: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.4).collect();
        let ks: Vec<f64> = (0..o * c * 9).map(|i| ((i * 5 % 13) as f64) * 0.05 - 0.3).collect();
        for (sh, sw) in [(1, 1), (2, 2), (1, 2), (2, 1)] {
            let x = Tensor::from_slice(&xs, &[c, h, w]).unwrap();
            let k = Tensor::from_slice(&ks, &[o, c, 3, 3]).unwrap();
            let y = x.conv2d(&k, &Tensor::full(&[o], 0.25), sh, sw).unwrap();
            let (oh, pt) = same_padding(h, 3, sh);
            let (ow, pl) = same_padding(w, 3, sw);
            assert_eq!(y.shape(), &[o, oh, ow]);
            let yv = y.to_vec();
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.25;
                        for ic in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * sh + ky) as isize - pt as isize;
                                    let ix = (ox * sw + kx) as isize - pl as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += ks[((oc * c + ic) * 3 + ky) * 3 + kx]
                                        * xs[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = yv[(oc * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "stride ({sh},{sw}) at {oc},{oy},{ox}");
                    }
                }
            }
        }
    }
}
