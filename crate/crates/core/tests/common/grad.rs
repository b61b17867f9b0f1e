//! Randomized finite-difference cases. Each case draws its own shapes and
//! values from a seed and returns the worst relative error it saw; callers
//! must hold 64-bit precision. Parameters are jittered off their
//! initialization so no ReLU input sits exactly at zero. Normalized widths stay at 3 or more: layer
//! norm over two features saturates and leaves only rounding noise.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use formnet::attention::{EtcConfig, EtcMask, RichAttentionLayer, TokenGeometry};
use formnet::data::{build_vocab, generate_synthetic_corpus, sample_mlm, SyntheticFormSpec};
use formnet::gradcheck::{check_parameters_steps, finite_diff_check_steps, ParamCheckReport};
use formnet::graph::CorruptionConfig;
use formnet::model::{prepare, FormNetV2, GcnLayer, MessageGraph};
use formnet::objectives::{nt_xent, pretrain_loss, LossWeights};
use formnet::rng::rng_from;
use formnet::tensor::ParamStore;
use formnet::vision::{ImageEmbedder, ImageEmbedderConfig, MapBox};
use formnet::{Result, Tensor};

/// Each coordinate keeps its best step. Gradients near 1e-7 (attention
/// scalars, rows nearly parallel to the probe) need the larger steps, while
/// hundreds of ReLU inputs make one within 1e-4 of its kink likely, which
/// needs the smaller ones.
pub const STEPS: &[f64] = &[1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
pub const TOLERANCE: f64 = 1e-3;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(values(rng, shape.iter().product(), -1.5, 1.5), shape).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(values(rng, shape.iter().product(), 0.2, 3.0), shape).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 2] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

/// A random linear functional, so every output coordinate matters.
fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from(&[seed, 0x9e0b]);
    let w = tensor(&mut rng, y.shape());
    Ok(y.mul(&w)?.sum())
}

fn fd(x: &Tensor, seed: u64, f: impl Fn(&Tensor) -> Result<Tensor>) -> f64 {
    finite_diff_check_steps(|t| probe(&f(t)?, seed), x, STEPS).unwrap()
}

fn unary(seed: u64, op: fn(&Tensor) -> Tensor, pos: bool) -> f64 {
    let mut rng = rng_from(&[seed]);
    let shape = dims(&mut rng, 1, 5);
    let x = if pos { positive(&mut rng, &shape) } else { tensor(&mut rng, &shape) };
    fd(&x, seed, |t| Ok(op(t)))
}

fn binary(seed: u64, op: fn(&Tensor, &Tensor) -> Result<Tensor>) -> f64 {
    let mut rng = rng_from(&[seed]);
    let shape = dims(&mut rng, 1, 5);
    let (a, b) = (tensor(&mut rng, &shape), tensor(&mut rng, &shape));
    fd(&a, seed, |t| op(t, &b)).max(fd(&b, seed, |t| op(&a, t)))
}

fn matmul(seed: u64, nt: bool) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, k] = dims(&mut rng, 1, 5);
    let n = rng.random_range(1..=5);
    let a = tensor(&mut rng, &[m, k]);
    let b = tensor(&mut rng, &if nt { [n, k] } else { [k, n] });
    let op = |x: &Tensor, y: &Tensor| if nt { x.matmul_nt(y) } else { x.matmul(y) };
    fd(&a, seed, |t| op(t, &b)).max(fd(&b, seed, |t| op(&a, t)))
}

fn affine(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, k] = dims(&mut rng, 1, 5);
    let n = rng.random_range(1..=5);
    let (x, w, b) = (tensor(&mut rng, &[m, k]), tensor(&mut rng, &[k, n]), tensor(&mut rng, &[n]));
    fd(&x, seed, |t| t.affine(&w, &b))
        .max(fd(&w, seed, |t| x.affine(t, &b)))
        .max(fd(&b, seed, |t| x.affine(&w, t)))
}

fn add_bias(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 5);
    let (x, b) = (tensor(&mut rng, &[m, n]), tensor(&mut rng, &[n]));
    fd(&x, seed, |t| t.add_bias(&b)).max(fd(&b, seed, |t| x.add_bias(t)))
}

fn mul_rows(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &[m, n]);
    let f = values(&mut rng, m, -2.0, 2.0);
    fd(&x, seed, |t| t.mul_rows(&f))
}

fn scalar_ops(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let shape = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &shape);
    let c = rng.random_range(-2.0..2.0);
    fd(&x, seed, |t| Ok(t.mul_scalar(c).add_scalar(c).neg()))
}

fn reductions(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let shape = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &shape);
    let c = rng.random_range(0.5..2.0);
    finite_diff_check_steps(|t| Ok(t.sum().mul(&t.mean().mul_scalar(c))?), &x, STEPS).unwrap()
}

fn reshape(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &[m, n]);
    fd(&x, seed, |t| t.reshape(&[n, m])?.transpose())
}

fn concat(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 4);
    let k = rng.random_range(1..=4);
    let (a, b, c) = (tensor(&mut rng, &[m, n]), tensor(&mut rng, &[m, k]), tensor(&mut rng, &[k, n]));
    fd(&a, seed, |t| Tensor::concat_last(&[t, &b])).max(fd(&a, seed, |t| Tensor::concat_rows(&[&c, t])))
}

fn narrow(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &[m, n]);
    let (c0, r0) = (rng.random_range(0..n), rng.random_range(0..m));
    let (cl, rl) = (rng.random_range(1..=n - c0), rng.random_range(1..=m - r0));
    fd(&x, seed, |t| t.narrow_last(c0, cl)?.narrow_rows(r0, rl))
}

fn gather_scatter(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &[m, n]);
    let picks: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..m)).collect();
    let out = rng.random_range(1..5);
    let targets: Vec<usize> = picks.iter().map(|_| rng.random_range(0..out)).collect();
    fd(&x, seed, |t| t.select_rows(&picks)?.index_add_rows(&targets, out))
}

fn softmax(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 6);
    let x = tensor(&mut rng, &[m, n]).mul_scalar(2.0);
    fd(&x, seed, |t| t.softmax())
}

fn random_mask(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.6)).collect();
    for r in 0..m {
        mask[r * n + rng.random_range(0..n)] = true;
    }
    mask
}

fn masked_softmax(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 6);
    let x = tensor(&mut rng, &[m, n]);
    let mask = random_mask(&mut rng, m, n);
    fd(&x, seed, |t| t.masked_softmax(&mask))
}

fn layer_norm(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(3..=6);
    let (x, g, b) = (tensor(&mut rng, &[m, n]), tensor(&mut rng, &[n]), tensor(&mut rng, &[n]));
    fd(&x, seed, |t| t.layer_norm(&g, &b))
        .max(fd(&g, seed, |t| x.layer_norm(t, &b)))
        .max(fd(&b, seed, |t| x.layer_norm(&g, t)))
}

fn cross_entropy(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 6);
    let x = tensor(&mut rng, &[m, n]).mul_scalar(2.0);
    let mask = random_mask(&mut rng, m, n);
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let masked: Vec<usize> = (0..m)
        .map(|r| (0..n).filter(|&j| mask[r * n + j]).nth(0).unwrap())
        .collect();
    let plain = finite_diff_check_steps(|t| t.cross_entropy(&targets, None), &x, STEPS).unwrap();
    plain.max(finite_diff_check_steps(|t| t.cross_entropy(&masked, Some(&mask)), &x, STEPS).unwrap())
}

fn l2_normalize(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let [m, n] = dims(&mut rng, 1, 5);
    let x = tensor(&mut rng, &[m, n]);
    fd(&x, seed, |t| Ok(t.l2_normalize_rows()))
}

fn conv2d(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let (c, o) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let [h, w] = dims(&mut rng, 2, 5);
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (sh, sw) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let x = tensor(&mut rng, &[c, h, w]);
    let k = tensor(&mut rng, &[o, c, kh, kw]);
    let b = tensor(&mut rng, &[o]);
    fd(&x, seed, |t| t.conv2d(&k, &b, sh, sw))
        .max(fd(&k, seed, |t| x.conv2d(t, &b, sh, sw)))
        .max(fd(&b, seed, |t| x.conv2d(&k, t, sh, sw)))
}

fn roi_align(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let c = rng.random_range(1..=2);
    let [h, w] = dims(&mut rng, 2, 6);
    let x = tensor(&mut rng, &[c, h, w]);
    let boxes: Vec<MapBox> = (0..rng.random_range(1..=3))
        .map(|_| {
            let (x0, y0) = (rng.random_range(0.0..w as f64 - 0.5), rng.random_range(0.0..h as f64 - 0.5));
            MapBox {
                x0,
                y0,
                x1: rng.random_range(x0 + 0.3..=w as f64),
                y1: rng.random_range(y0 + 0.3..=h as f64),
            }
        })
        .collect();
    let (oh, ow, s) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
    fd(&x, seed, |t| t.roi_align(&boxes, oh, ow, s))
}

fn nt_xent_case(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let n = rng.random_range(2..=6);
    let d = rng.random_range(2..=5);
    let (a, b) = (tensor(&mut rng, &[n, d]), tensor(&mut rng, &[n, d]));
    let tau = rng.random_range(0.1..1.0);
    let f = |x: &Tensor, y: &Tensor| nt_xent(&x.l2_normalize_rows(), &y.l2_normalize_rows(), tau);
    finite_diff_check_steps(|t| f(t, &b), &a, STEPS)
        .unwrap()
        .max(finite_diff_check_steps(|t| f(&a, t), &b, STEPS).unwrap())
}

fn gcn_layer(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let n = rng.random_range(2..=6);
    let (hidden, edim) = (rng.random_range(3..=5), rng.random_range(1..=3));
    let edges: Vec<(usize, usize)> = (0..rng.random_range(1..=8))
        .map(|_| {
            let i = rng.random_range(0..n - 1);
            (i, rng.random_range(i + 1..n))
        })
        .collect();
    let e = edges.len();
    let mut store = ParamStore::new(seed);
    let layer = GcnLayer::new(&mut store, "gcn", hidden, edim).unwrap();
    store.jitter(0.3, seed);
    let x = tensor(&mut rng, &[n, hidden]);
    let (fwd, bwd) = (tensor(&mut rng, &[e, edim]), tensor(&mut rng, &[e, edim]));
    let run = |x: &Tensor, fwd: &Tensor| {
        let g = MessageGraph::new(n, &edges, fwd, &bwd)?;
        layer.forward(x, &g)
    };
    let on_x = fd(&x, seed, |t| run(t, &fwd));
    let on_edges = fd(&fwd, seed, |t| run(&x, t));
    let on_params = check_parameters_steps(|| probe(&run(&x, &fwd)?, seed), store.params(), 8, STEPS, seed)
        .unwrap()
        .max_relative_error;
    on_x.max(on_edges).max(on_params)
}

fn rich_attention(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let cfg = EtcConfig {
        local_radius: rng.random_range(1..=3),
        num_global: rng.random_range(1..=2),
        num_heads: 2,
        hidden: 2 * rng.random_range(2..=3),
    };
    let tokens = rng.random_range(1..=6);
    let centers: Vec<(f64, f64)> = (0..tokens)
        .map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
        .collect();
    let geom = TokenGeometry::with_globals(&centers, cfg.num_global);
    let mask = Rc::new(EtcMask::new(geom.len(), cfg.num_global, cfg.local_radius).unwrap());
    let mut store = ParamStore::new(seed);
    let layer = RichAttentionLayer::new(&cfg, &mut store, "etc").unwrap();
    store.jitter(0.3, seed);
    let x = tensor(&mut rng, &[geom.len(), cfg.hidden]);
    let run = |x: &Tensor| Ok(layer.forward(x, &geom, &mask, false)?.hidden);
    let on_x = fd(&x, seed, run);
    let on_params = check_parameters_steps(|| probe(&run(&x)?, seed), store.params(), 8, STEPS, seed)
        .unwrap()
        .max_relative_error;
    on_x.max(on_params)
}

fn tiny_image() -> ImageEmbedderConfig {
    ImageEmbedderConfig {
        input_size: 16,
        kernel: 3,
        backbone_filters: vec![2, 2, 2],
        backbone_strides: vec![1, 2, 1],
        roi_h: 2,
        roi_w: 4,
        sampling: 1,
        refiner_filters: vec![2, 2, 2],
        refiner_strides_w: vec![2, 1, 1],
    }
}

fn image_embedder(seed: u64) -> f64 {
    let mut rng = rng_from(&[seed]);
    let cfg = tiny_image();
    let mut store = ParamStore::new(seed);
    let emb = ImageEmbedder::new(&cfg, &mut store, "image").unwrap();
    store.jitter(0.3, seed);
    let canvas = Tensor::new(values(&mut rng, 16 * 16, 0.0, 1.0), &[16, 16]).unwrap();
    let m = cfg.map_size() as f64;
    let regions: Vec<MapBox> = (0..rng.random_range(1..=3))
        .map(|_| {
            let (x0, y0) = (rng.random_range(0.0..m - 1.0), rng.random_range(0.0..m - 1.0));
            MapBox {
                x0,
                y0,
                x1: rng.random_range(x0 + 0.5..=m),
                y1: rng.random_range(y0 + 0.5..=m),
            }
        })
        .collect();
    let on_canvas = fd(&canvas, seed, |t| emb.edge_features(t, &regions));
    let on_params = check_parameters_steps(|| probe(&emb.edge_features(&canvas, &regions)?, seed), store.params(), 6, STEPS, seed)
        .unwrap()
        .max_relative_error;
    on_canvas.max(on_params)
}

/// Full pre-training objective through the image embedder, GCN, Rich
/// Attention, the MLM head and the projection head.
pub fn full_pretrain_report(seed: u64) -> ParamCheckReport {
    let spec = SyntheticFormSpec {
        seed: 31,
        num_documents: 1,
        first_index: seed as usize,
        min_rows: 2,
        max_rows: 3,
        ..SyntheticFormSpec::default()
    };
    let docs = generate_synthetic_corpus(&spec).unwrap();
    let vocab = build_vocab(docs[0].tokens.iter().map(|t| t.text.as_str()), 48, true);
    let cfg = formnet::model::ModelConfig {
        hidden: 4,
        etc_heads: 2,
        projection_dim: 3,
        max_seq_len: 10,
        neighbors: 3,
        local_radius: 2,
        vocab_size: 48,
        image: tiny_image(),
        ..formnet::model::ModelConfig::desk(spec.labels.clone(), 48)
    };
    let model = FormNetV2::new(&cfg, seed).unwrap();
    // zero-initialized biases put dead ReLU channels exactly on the kink
    let mut noise = rng_from(&[seed, 0x717]);
    for p in model.params() {
        let v: Vec<f64> = p.tensor.to_vec().iter().map(|v| v + noise.random_range(-0.1..0.1)).collect();
        p.tensor.set_data(&v).unwrap();
    }
    let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
    let mut plan = sample_mlm(&doc.token_ids, vocab.len(), 0.3, seed).unwrap();
    let mut s = seed;
    while plan.is_empty() {
        s += 1000;
        plan = sample_mlm(&doc.token_ids, vocab.len(), 0.3, s).unwrap();
    }
    let corruption = CorruptionConfig {
        seed,
        ..CorruptionConfig::default()
    };
    let weights = LossWeights::default();
    let loss = || Ok(pretrain_loss(&model, &doc, &plan, &corruption, &weights)?.total);
    let tag_free: Vec<_> = model
        .params()
        .iter()
        .filter(|p| !p.name.starts_with("tags"))
        .cloned()
        .collect();
    check_parameters_steps(loss, &tag_free, 2, STEPS, seed).unwrap()
}

fn full_pretrain_loss(seed: u64) -> f64 {
    full_pretrain_report(seed).max_relative_error
}


pub fn cases() -> Vec<GradCase> {
    macro_rules! case {
        ($name:literal, $f:expr) => {
            GradCase { name: $name, run: $f }
        };
    }
    vec![
        case!("add", |s| binary(s, Tensor::add)),
        case!("sub", |s| binary(s, Tensor::sub)),
        case!("mul", |s| binary(s, Tensor::mul)),
        case!("scalar ops", scalar_ops),
        case!("add_bias", add_bias),
        case!("mul_rows", mul_rows),
        case!("relu", |s| unary(s, Tensor::relu, false)),
        case!("gelu", |s| unary(s, Tensor::gelu, false)),
        case!("sigmoid", |s| unary(s, Tensor::sigmoid, false)),
        case!("softplus", |s| unary(s, Tensor::softplus, false)),
        case!("tanh", |s| unary(s, Tensor::tanh, false)),
        case!("exp", |s| unary(s, Tensor::exp, false)),
        case!("ln", |s| unary(s, Tensor::ln, true)),
        case!("square", |s| unary(s, Tensor::square, false)),
        case!("sum and mean", reductions),
        case!("reshape and transpose", reshape),
        case!("concat", concat),
        case!("narrow", narrow),
        case!("select and index_add rows", gather_scatter),
        case!("matmul", |s| matmul(s, false)),
        case!("matmul_nt", |s| matmul(s, true)),
        case!("affine", affine),
        case!("softmax", softmax),
        case!("masked_softmax", masked_softmax),
        case!("layer_norm", layer_norm),
        case!("cross_entropy", cross_entropy),
        case!("l2_normalize_rows", l2_normalize),
        case!("conv2d", conv2d),
        case!("roi_align", roi_align),
        case!("nt_xent", nt_xent_case),
        case!("gcn layer", gcn_layer),
        case!("rich attention layer", rich_attention),
        case!("image embedder", image_embedder),
        case!("pretrain_loss", full_pretrain_loss),
    ]
}
