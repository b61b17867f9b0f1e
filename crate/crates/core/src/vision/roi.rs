//! RoIAlign: bilinear sampling on a fixed cell grid, averaged per cell.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Region in feature-map coordinates, where map pixel `(r, c)` covers
/// `[c, c + 1) x [r, r + 1)` and is sampled at its center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Bilinear taps `(flat index, weight)` for a continuous map point.
pub(crate) fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let px = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (xa, ya) = (px.floor() as usize, py.floor() as usize);
    let (xb, yb) = ((xa + 1).min(w - 1), (ya + 1).min(h - 1));
    let (lx, ly) = (px - xa as f64, py - ya as f64);
    [
        (ya * w + xa, (1.0 - lx) * (1.0 - ly)),
        (ya * w + xb, lx * (1.0 - ly)),
        (yb * w + xa, (1.0 - lx) * ly),
        (yb * w + xb, lx * ly),
    ]
}

/// Clamps to the map and rejects regions with no area left.
fn clamp_box(b: &MapBox, h: usize, w: usize, index: usize) -> Result<MapBox> {
    let c = MapBox {
        x0: b.x0.clamp(0.0, w as f64),
        y0: b.y0.clamp(0.0, h as f64),
        x1: b.x1.clamp(0.0, w as f64),
        y1: b.y1.clamp(0.0, h as f64),
    };
    if c.x1 - c.x0 <= 0.0 || c.y1 - c.y0 <= 0.0 {
        return Err(Error::invalid(
            "roi_align",
            format!("edge {index}: region {b:?} has zero area inside the {h}x{w} feature map"),
        ));
    }
    Ok(c)
}

impl Tensor {
    /// Pools a `[C, H, W]` map over each box into `[E, C, out_h, out_w]`.
    /// Every cell averages `sampling x sampling` bilinear samples.
    pub fn roi_align(&self, boxes: &[MapBox], out_h: usize, out_w: usize, sampling: usize) -> Result<Tensor> {
        let [c, h, w] = *self.shape() else {
            return Err(Error::invalid("roi_align", format!("map must be [C,H,W], got {:?}", self.shape())));
        };
        if out_h == 0 || out_w == 0 || sampling == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("roi_align", "empty grid or map"));
        }
        let cells = out_h * out_w;
        let per_cell = sampling * sampling * 4;
        let norm = 1.0 / (sampling * sampling) as f64;
        // taps[(e * cells + cell) * per_cell + k]
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(boxes.len() * cells * per_cell);
        for (e, b) in boxes.iter().enumerate() {
            let b = clamp_box(b, h, w, e)?;
            let (bw, bh) = ((b.x1 - b.x0) / out_w as f64, (b.y1 - b.y0) / out_h as f64);
            for r in 0..out_h {
                for col in 0..out_w {
                    for sy in 0..sampling {
                        let v = b.y0 + (r as f64 + (sy as f64 + 0.5) / sampling as f64) * bh;
                        for sx in 0..sampling {
                            let u = b.x0 + (col as f64 + (sx as f64 + 0.5) / sampling as f64) * bw;
                            taps.extend(bilinear_taps(u, v, h, w).map(|(i, wt)| (i, wt * norm)));
                        }
                    }
                }
            }
        }
        let plane = h * w;
        let mut out = vec![0.0; boxes.len() * c * cells];
        {
            let x = self.data();
            for e in 0..boxes.len() {
                for ch in 0..c {
                    let xp = &x[ch * plane..(ch + 1) * plane];
                    for cell in 0..cells {
                        let t = &taps[(e * cells + cell) * per_cell..][..per_cell];
                        out[(e * c + ch) * cells + cell] = t.iter().map(|&(i, wt)| wt * xp[i]).sum();
                    }
                }
            }
        }
        let n = boxes.len();
        Ok(Tensor::from_op(
            "roi_align",
            out,
            vec![n, c, out_h, out_w],
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; c * plane];
                for e in 0..n {
                    for ch in 0..c {
                        let gp = &mut g[ch * plane..(ch + 1) * plane];
                        for cell in 0..cells {
                            let go = ctx.grad[(e * c + ch) * cells + cell];
                            if go == 0.0 {
                                continue;
                            }
                            for &(i, wt) in &taps[(e * cells + cell) * per_cell..][..per_cell] {
                                gp[i] += wt * go;
                            }
                        }
                    }
                }
                vec![Some(g)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::{scoped_precision, Precision};

    fn mb(x0: f64, y0: f64, x1: f64, y1: f64) -> MapBox {
        MapBox { x0, y0, x1, y1 }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let map = Tensor::full(&[2, 6, 9], 0.75);
        let out = map.roi_align(&[mb(0.3, 1.2, 7.9, 5.5), mb(2.0, 2.0, 2.5, 2.5)], 3, 16, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3, 16]);
        assert!(out.to_vec().iter().all(|v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn one_cell_box_hand_evaluated() {
        let _g = scoped_precision(Precision::F64);
        // 1x3 map, box covering exactly the middle pixel, 1x2 grid, 2x2 samples
        let map = Tensor::from_slice(&[1.0, 5.0, 9.0], &[1, 1, 3]).unwrap();
        let out = map.roi_align(&[mb(1.0, 0.0, 2.0, 1.0)], 1, 2, 2).unwrap().to_vec();
        // left cell samples u = 1.125, 1.375 -> px 0.625, 0.875 -> 1 + 4 * px
        let left = (1.0 + 4.0 * 0.625 + 1.0 + 4.0 * 0.875) / 2.0;
        // right cell samples u = 1.625, 1.875 -> px 1.125, 1.375 -> 5 + 4 * (px - 1)
        let right = (5.0 + 4.0 * 0.125 + 5.0 + 4.0 * 0.375) / 2.0;
        assert!((out[0] - left).abs() < 1e-12, "{out:?}");
        assert!((out[1] - right).abs() < 1e-12, "{out:?}");
        // the two cells together average to the pixel itself on a linear ramp
        assert!(((out[0] + out[1]) / 2.0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn nested_boxes_on_constant_map_agree() {
        let map = Tensor::full(&[3, 10, 10], -0.2);
        let a = map.roi_align(&[mb(1.0, 1.0, 9.0, 9.0)], 3, 16, 2).unwrap().to_vec();
        let b = map.roi_align(&[mb(3.0, 4.0, 5.0, 6.0)], 3, 16, 2).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_area_box_names_the_edge() {
        let map = Tensor::zeros(&[1, 4, 4]);
        let err = map.roi_align(&[mb(0.0, 0.0, 1.0, 1.0), mb(5.0, 1.0, 7.0, 2.0)], 3, 16, 2).unwrap_err();
        assert!(err.to_string().contains("edge 1"), "{err}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let _g = scoped_precision(Precision::F64);
        let vals: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 13 % 17) as f64) * 0.1).collect();
        let map = Tensor::leaf(vals, &[2, 5, 6]).unwrap();
        let boxes = [mb(0.4, 0.7, 4.3, 3.9), mb(2.2, 1.1, 5.6, 4.8)];
        let weights: Vec<f64> = (0..2 * 2 * 3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let err = finite_diff_check(
            |m| {
                let w = Tensor::from_slice(&weights, &[2, 2, 3, 4])?;
                m.roi_align(&boxes, 3, 4, 2)?.mul(&w).map(|t| t.sum())
            },
            &map,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
