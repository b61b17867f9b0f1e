//! Edge-level image features.
//!
//! The page raster is resized into a square canvas, a small ConvNet turns it
//! into a dense feature map, RoIAlign pools the union box of each graph edge
//! into a fixed grid, and a second ConvNet squeezes the grid horizontally
//! before it is flattened into one vector per edge.

mod roi;

pub use roi::MapBox;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, GrayImage, Token};
use crate::error::{Error, Result};
use crate::tensor::{same_padding, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEmbedderConfig {
    pub input_size: usize,
    pub kernel: usize,
    pub backbone_filters: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub roi_h: usize,
    pub roi_w: usize,
    /// Bilinear samples per cell along each axis.
    pub sampling: usize,
    pub refiner_filters: Vec<usize>,
    /// Horizontal strides of the refiner; vertical stride is always 1.
    pub refiner_strides_w: Vec<usize>,
}

impl Default for ImageEmbedderConfig {
    fn default() -> Self {
        ImageEmbedderConfig {
            input_size: 512,
            kernel: 3,
            backbone_filters: vec![32, 64, 128],
            backbone_strides: vec![1, 2, 1],
            roi_h: 3,
            roi_w: 16,
            sampling: 2,
            refiner_filters: vec![64, 32, 16],
            refiner_strides_w: vec![2, 2, 1],
        }
    }
}

impl ImageEmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("image embedder: {m}")));
        if self.backbone_filters.is_empty() || self.backbone_filters.len() != self.backbone_strides.len() {
            return bad("backbone filters and strides must be non-empty and equally long");
        }
        if self.refiner_filters.is_empty() || self.refiner_filters.len() != self.refiner_strides_w.len() {
            return bad("refiner filters and strides must be non-empty and equally long");
        }
        let dims = [self.input_size, self.kernel, self.roi_h, self.roi_w, self.sampling];
        if dims.contains(&0) || self.backbone_strides.contains(&0) || self.refiner_strides_w.contains(&0) {
            return bad("sizes and strides must be positive");
        }
        if self.backbone_filters.contains(&0) || self.refiner_filters.contains(&0) {
            return bad("filter counts must be positive");
        }
        Ok(())
    }

    /// Overall spatial stride of the backbone.
    pub fn map_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    /// Side of the square feature map.
    pub fn map_size(&self) -> usize {
        self.backbone_strides.iter().fold(self.input_size, |s, &st| s.div_ceil(st))
    }

    pub fn map_channels(&self) -> usize {
        *self.backbone_filters.last().unwrap()
    }

    /// Width of the refiner output grid.
    pub fn refined_width(&self) -> usize {
        self.refiner_strides_w
            .iter()
            .fold(self.roi_w, |w, &s| same_padding(w, self.kernel, s).0)
    }

    /// Length of the flattened per-edge vector.
    pub fn output_dim(&self) -> usize {
        self.refiner_filters.last().unwrap() * self.roi_h * self.refined_width()
    }
}

/// Maps page pixels into the resized canvas: `p -> p * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PageTransform {
    pub scale: f64,
    /// Canvas extent actually covered by the page.
    pub content_w: usize,
    pub content_h: usize,
}

/// Scales the longer side to `size` with bilinear resampling (half-pixel
/// centers) and zero-pads the bottom and right.
pub fn resize_pad(image: &GrayImage, size: usize) -> (Vec<f64>, PageTransform) {
    let (w, h) = (image.width, image.height);
    let mut out = vec![0.0; size * size];
    if w == 0 || h == 0 {
        let t = PageTransform {
            scale: 1.0,
            content_w: 0,
            content_h: 0,
        };
        return (out, t);
    }
    let scale = size as f64 / w.max(h) as f64;
    let cw = ((w as f64 * scale).round() as usize).min(size);
    let ch = ((h as f64 * scale).round() as usize).min(size);
    let src = |o: usize, n: usize| ((o as f64 + 0.5) / scale - 0.5).clamp(0.0, (n - 1) as f64);
    for oy in 0..ch {
        let sy = src(oy, h);
        let (y0, ly) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..cw {
            let sx = src(ox, w);
            let (x0, lx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let p = |x: usize, y: usize| image.pixels[y * w + x] as f64;
            out[oy * size + ox] = (1.0 - ly) * ((1.0 - lx) * p(x0, y0) + lx * p(x1, y0))
                + ly * ((1.0 - lx) * p(x0, y1) + lx * p(x1, y1));
        }
    }
    let t = PageTransform {
        scale,
        content_w: cw,
        content_h: ch,
    };
    (out, t)
}

/// Union box of each edge, in feature-map coordinates.
pub fn edge_regions(
    tokens: &[Token],
    edges: &[(usize, usize)],
    transform: &PageTransform,
    cfg: &ImageEmbedderConfig,
) -> Vec<MapBox> {
    let f = transform.scale / cfg.map_stride() as f64;
    edges
        .iter()
        .map(|&(i, j)| {
            let u: BBox = tokens[i].bbox.union(&tokens[j].bbox);
            MapBox {
                x0: u.x0 as f64 * f,
                y0: u.y0 as f64 * f,
                x1: u.x1 as f64 * f,
                y1: u.y1 as f64 * f,
            }
        })
        .collect()
}

struct ConvLayer {
    kernels: Tensor,
    bias: Tensor,
    stride_h: usize,
    stride_w: usize,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, sh: usize, sw: usize) -> Result<Self> {
        // fan-in scaling keeps activations alive through six stacked layers
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Ok(ConvLayer {
            kernels: store.weight_with_std(format!("{name}.kernel"), &[c_out, c_in, k, k], std)?,
            bias: store.zeros(format!("{name}.bias"), &[c_out])?,
            stride_h: sh,
            stride_w: sw,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.kernels, &self.bias, self.stride_h, self.stride_w)
    }
}

fn run_stack(layers: &[ConvLayer], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(&h)?;
        if i + 1 < layers.len() {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Backbone plus refiner; parameters live in the owning model's store.
pub struct ImageEmbedder {
    cfg: ImageEmbedderConfig,
    backbone: Vec<ConvLayer>,
    refiner: Vec<ConvLayer>,
}

impl ImageEmbedder {
    pub fn new(cfg: &ImageEmbedderConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let mut c_in = 1;
        let mut backbone = Vec::new();
        for (i, (&f, &s)) in cfg.backbone_filters.iter().zip(&cfg.backbone_strides).enumerate() {
            backbone.push(ConvLayer::new(store, &format!("{prefix}.backbone.{i}"), c_in, f, k, s, s)?);
            c_in = f;
        }
        let mut refiner = Vec::new();
        for (i, (&f, &s)) in cfg.refiner_filters.iter().zip(&cfg.refiner_strides_w).enumerate() {
            refiner.push(ConvLayer::new(store, &format!("{prefix}.refiner.{i}"), c_in, f, k, 1, s)?);
            c_in = f;
        }
        Ok(ImageEmbedder {
            cfg: cfg.clone(),
            backbone,
            refiner,
        })
    }

    pub fn config(&self) -> &ImageEmbedderConfig {
        &self.cfg
    }

    /// `[input_size, input_size]` canvas to a `[C, H, W]` feature map.
    pub fn embed_page(&self, canvas: &Tensor) -> Result<Tensor> {
        let s = self.cfg.input_size;
        if canvas.numel() != s * s {
            return Err(Error::invalid("embed_page", format!("canvas must hold {s}x{s} samples")));
        }
        run_stack(&self.backbone, &canvas.reshape(&[1, s, s])?)
    }

    pub fn roi_pool(&self, map: &Tensor, regions: &[MapBox]) -> Result<Tensor> {
        map.roi_align(regions, self.cfg.roi_h, self.cfg.roi_w, self.cfg.sampling)
    }

    /// `[E, C, roi_h, roi_w]` pooled grids to `[E, output_dim]`.
    pub fn refine(&self, pooled: &Tensor) -> Result<Tensor> {
        let e = pooled.shape()[0];
        run_stack(&self.refiner, pooled)?.reshape(&[e, self.cfg.output_dim()])
    }

    /// Page to per-edge features in one differentiable pass.
    pub fn edge_features(&self, canvas: &Tensor, regions: &[MapBox]) -> Result<Tensor> {
        if regions.is_empty() {
            return Ok(Tensor::zeros(&[0, self.cfg.output_dim()]));
        }
        let map = self.embed_page(canvas)?;
        self.refine(&self.roi_pool(&map, regions)?)
    }
}
