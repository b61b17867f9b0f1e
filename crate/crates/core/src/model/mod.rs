//! The full network: token embeddings, a graph convolutional encoder that
//! builds super-tokens, the Rich Attention ETC stack, and three heads
//! (tied MLM logits, contrastive projection, BIOES tags).

mod checkpoint;
mod gcn;

pub use checkpoint::{load_checkpoint, load_manifest, save_checkpoint, Checkpoint, Manifest, ParamEntry, CHECKPOINT_VERSION};
pub use gcn::{GcnLayer, MessageGraph};

use std::rc::Rc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::attention::{EtcConfig, EtcMask, RichAttentionLayer, TokenGeometry};
use crate::data::{Document, Entity, MlmPlan, Vocabulary, GLOBAL_ID};
use crate::error::{Error, Result};
use crate::graph::{build_graph, DocGraph, GraphView, LAYOUT_DIM};
use crate::tensor::{ParamStore, Parameter, Tensor};
use crate::vision::{edge_regions, resize_pad, ImageEmbedder, ImageEmbedderConfig, MapBox};

/// Where node embeddings for the contrastive loss are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveTap {
    Gcn,
    #[default]
    Etc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub gcn_layers: usize,
    pub etc_layers: usize,
    pub etc_heads: usize,
    pub gcn_heads: usize,
    pub max_seq_len: usize,
    /// Embedding rows, reserved ids included.
    pub vocab_size: usize,
    pub labels: Vec<String>,
    /// Neighbors proposed per token when building the graph.
    pub neighbors: usize,
    pub local_radius: usize,
    pub num_global: usize,
    pub projection_dim: usize,
    /// When false, edges carry layout features only.
    pub use_image: bool,
    pub image: ImageEmbedderConfig,
    #[serde(default)]
    pub contrastive_tap: ContrastiveTap,
}

impl ModelConfig {
    pub fn desk(labels: Vec<String>, vocab_size: usize) -> Self {
        ModelConfig {
            hidden: 64,
            gcn_layers: 2,
            etc_layers: 2,
            etc_heads: 4,
            gcn_heads: 1,
            max_seq_len: 128,
            vocab_size,
            labels,
            neighbors: 4,
            local_radius: 4,
            num_global: 1,
            projection_dim: 128,
            use_image: true,
            image: ImageEmbedderConfig {
                input_size: 64,
                kernel: 3,
                backbone_filters: vec![4, 8, 8],
                backbone_strides: vec![1, 2, 1],
                roi_h: 3,
                roi_w: 16,
                sampling: 2,
                refiner_filters: vec![8, 4, 4],
                refiner_strides_w: vec![2, 2, 1],
            },
            contrastive_tap: ContrastiveTap::Etc,
        }
    }

    pub fn full_scale(labels: Vec<String>) -> Self {
        ModelConfig {
            hidden: 768,
            gcn_layers: 6,
            etc_layers: 12,
            etc_heads: 12,
            max_seq_len: 1024,
            vocab_size: 30522,
            neighbors: 8,
            local_radius: 128,
            image: ImageEmbedderConfig::default(),
            ..Self::desk(labels, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("gcn_layers", self.gcn_layers),
            ("etc_layers", self.etc_layers),
            ("max_seq_len", self.max_seq_len),
            ("neighbors", self.neighbors),
            ("projection_dim", self.projection_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.gcn_heads != 1 {
            return Err(Error::Config("model.gcn_heads must be 1".into()));
        }
        if self.vocab_size <= crate::data::NUM_RESERVED {
            return Err(Error::Config(format!(
                "model.vocab_size {} leaves no room beyond the reserved ids",
                self.vocab_size
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Config("model.labels must not be empty".into()));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::Config(format!("model.labels repeats `{l}`")));
            }
        }
        self.etc().validate()?;
        if self.use_image {
            self.image.validate()?;
        }
        Ok(())
    }

    pub fn etc(&self) -> EtcConfig {
        EtcConfig {
            local_radius: self.local_radius,
            num_global: self.num_global,
            num_heads: self.etc_heads,
            hidden: self.hidden,
        }
    }

    pub fn image_dim(&self) -> usize {
        if self.use_image {
            self.image.output_dim()
        } else {
            0
        }
    }

    pub fn edge_dim(&self) -> usize {
        LAYOUT_DIM + self.image_dim()
    }

    /// Outside plus B, I, E, S for every label.
    pub fn num_tags(&self) -> usize {
        1 + 4 * self.labels.len()
    }
}

/// A document turned into everything the network reads, independent of
/// the weights.
#[derive(Clone, Debug)]
pub struct PreparedDoc {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub graph: DocGraph,
    /// Sequence geometry with the global positions first.
    pub geometry: TokenGeometry,
    pub mask: Rc<EtcMask>,
    /// `[S, S]` resized page, when the image modality is on.
    pub canvas: Option<Tensor>,
    /// Union box of every parent edge on the feature map.
    pub regions: Vec<MapBox>,
    pub entities: Vec<Entity>,
}

impl PreparedDoc {
    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }
}

/// Truncates, tokenizes, builds the graph and the image inputs.
pub fn prepare(doc: &Document, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<PreparedDoc> {
    if doc.tokens.is_empty() {
        return Err(Error::Data(format!("document `{}` has no tokens", doc.id)));
    }
    let doc = if doc.tokens.len() > cfg.max_seq_len {
        warn!(
            "document `{}`: truncating {} tokens to {}",
            doc.id,
            doc.tokens.len(),
            cfg.max_seq_len
        );
        doc.truncated(cfg.max_seq_len)
    } else {
        doc.clone()
    };
    let token_ids = vocab.encode(&doc);
    let graph = build_graph(&doc.tokens, cfg.neighbors, doc.page_width, doc.page_height)?;
    let geometry = TokenGeometry::with_globals(&doc.token_centers(), cfg.num_global);
    let mask = Rc::new(EtcMask::new(geometry.len(), cfg.num_global, cfg.local_radius)?);
    let (canvas, regions) = if cfg.use_image {
        let (pixels, transform) = resize_pad(&doc.image, cfg.image.input_size);
        let s = cfg.image.input_size;
        let regions = edge_regions(&doc.tokens, &graph.edges, &transform, &cfg.image);
        (Some(Tensor::new(pixels, &[s, s])?), regions)
    } else {
        (None, Vec::new())
    };
    Ok(PreparedDoc {
        id: doc.id.clone(),
        token_ids,
        graph,
        geometry,
        mask,
        canvas,
        regions,
        entities: doc.entities,
    })
}

/// Per-token outputs of one encoder pass.
pub struct Encoded {
    /// `[n, hidden]` super-tokens after the GCN.
    pub gcn: Tensor,
    /// `[n, hidden]` after the ETC stack with the global positions removed;
    /// `None` when the pass stopped at the GCN.
    pub hidden: Option<Tensor>,
    /// Per-head `[n + g, n + g]` attention weights of the recorded layer.
    pub attention: Option<Vec<Vec<f64>>>,
}

struct Heads {
    mlm_bias: Tensor,
    proj1: (Tensor, Tensor),
    proj2: (Tensor, Tensor),
    tags: (Tensor, Tensor),
}

pub struct FormNetV2 {
    cfg: ModelConfig,
    seed: u64,
    store: ParamStore,
    embedding: Tensor,
    image: Option<ImageEmbedder>,
    gcn: Vec<GcnLayer>,
    etc: Vec<RichAttentionLayer>,
    heads: Heads,
}

impl FormNetV2 {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let h = cfg.hidden;
        let embedding = store.weight("embedding", &[cfg.vocab_size, h])?;
        let image = if cfg.use_image {
            Some(ImageEmbedder::new(&cfg.image, &mut store, "image")?)
        } else {
            None
        };
        let gcn = (0..cfg.gcn_layers)
            .map(|l| GcnLayer::new(&mut store, &format!("gcn.{l}"), h, cfg.edge_dim()))
            .collect::<Result<Vec<_>>>()?;
        let etc_cfg = cfg.etc();
        let etc = (0..cfg.etc_layers)
            .map(|l| RichAttentionLayer::new(&etc_cfg, &mut store, &format!("etc.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let p = cfg.projection_dim;
        let t = cfg.num_tags();
        let heads = Heads {
            mlm_bias: store.zeros("mlm.bias", &[cfg.vocab_size])?,
            proj1: (store.weight("projection.0.w", &[h, h])?, store.zeros("projection.0.b", &[h])?),
            proj2: (store.weight("projection.1.w", &[h, p])?, store.zeros("projection.1.b", &[p])?),
            tags: (store.weight("tags.w", &[h, t])?, store.zeros("tags.b", &[t])?),
        };
        Ok(FormNetV2 {
            cfg: cfg.clone(),
            seed,
            store,
            embedding,
            image,
            gcn,
            etc,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Parameter] {
        self.store.params()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.store.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn zero_grads(&self) {
        self.store.zero_grads();
    }

    /// `[E, image_dim]` features for every parent edge, or `None` without
    /// the image modality.
    pub fn edge_image_features(&self, doc: &PreparedDoc) -> Result<Option<Tensor>> {
        let Some(embedder) = &self.image else {
            return Ok(None);
        };
        let canvas = doc
            .canvas
            .as_ref()
            .ok_or_else(|| Error::Data(format!("document `{}` was prepared without an image canvas", doc.id)))?;
        embedder.edge_features(canvas, &doc.regions).map(Some)
    }

    /// Edge inputs of `view`, both directions, with dropped channels zeroed.
    pub fn message_graph(&self, doc: &PreparedDoc, view: &GraphView, image: Option<&Tensor>) -> Result<MessageGraph> {
        let edges = view.edges(&doc.graph);
        let e = edges.len();
        let n = doc.num_tokens();
        if e == 0 {
            let empty = Tensor::zeros(&[0, self.cfg.edge_dim()]);
            return MessageGraph::new(n, &edges, &empty, &empty);
        }
        let flat = |rows: Vec<[f64; LAYOUT_DIM]>| -> Result<Tensor> {
            Tensor::new(rows.into_iter().flatten().collect(), &[e, LAYOUT_DIM])
        };
        let fwd = flat(view.layout(&doc.graph, false))?;
        let bwd = flat(view.layout(&doc.graph, true))?;
        match (self.cfg.use_image, image) {
            (false, _) => MessageGraph::new(n, &edges, &fwd, &bwd),
            (true, None) => Err(Error::invalid("encode", "image features are required by this model")),
            (true, Some(img)) => {
                if img.rows() != doc.graph.num_edges() || img.last_dim() != self.cfg.image_dim() {
                    return Err(Error::shape("encode", img.shape(), &[doc.graph.num_edges(), self.cfg.image_dim()]));
                }
                let img = img.select_rows(&view.kept_edges)?.mul_rows(&view.image_factors())?;
                let fwd = Tensor::concat_last(&[&fwd, &img])?;
                let bwd = Tensor::concat_last(&[&bwd, &img])?;
                MessageGraph::new(n, &edges, &fwd, &bwd)
            }
        }
    }

    /// Embeds `token_ids`, convolves over `view`, then runs the ETC stack
    /// unless `gcn_only`. `record_layer` captures that layer's attention.
    pub fn encode(
        &self,
        doc: &PreparedDoc,
        view: &GraphView,
        token_ids: &[u32],
        image: Option<&Tensor>,
        gcn_only: bool,
        record_layer: Option<usize>,
    ) -> Result<Encoded> {
        let n = doc.num_tokens();
        if token_ids.len() != n || view.num_nodes() != n {
            return Err(Error::invalid(
                "encode",
                format!("{} ids and a {}-node view for {n} tokens", token_ids.len(), view.num_nodes()),
            ));
        }
        let rows: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let mut x = self.embedding.select_rows(&rows)?;
        if view.text_kept.iter().any(|k| !k) {
            x = x.mul_rows(&view.text_factors())?;
        }
        let graph = self.message_graph(doc, view, image)?;
        for layer in &self.gcn {
            x = layer.forward(&x, &graph)?;
        }
        if gcn_only {
            return Ok(Encoded {
                gcn: x,
                hidden: None,
                attention: None,
            });
        }
        if let Some(l) = record_layer {
            if l >= self.etc.len() {
                return Err(Error::invalid("encode", format!("layer {l} of {}", self.etc.len())));
            }
        }
        let g = self.cfg.num_global;
        let globals = self.embedding.select_rows(&vec![GLOBAL_ID as usize; g])?;
        let mut seq = Tensor::concat_rows(&[&globals, &x])?;
        let mut attention = None;
        for (l, layer) in self.etc.iter().enumerate() {
            let out = layer.forward(&seq, &doc.geometry, &doc.mask, record_layer == Some(l))?;
            seq = out.hidden;
            if out.weights.is_some() {
                attention = out.weights;
            }
        }
        Ok(Encoded {
            gcn: x,
            hidden: Some(seq.narrow_rows(g, n)?),
            attention,
        })
    }

    /// `[|plan|, vocab]` logits. Text at the plan positions is replaced
    /// before the GCN; edges see the intact graph.
    pub fn forward_mlm(&self, doc: &PreparedDoc, plan: &MlmPlan, image: Option<&Tensor>) -> Result<Tensor> {
        if plan.is_empty() {
            return Ok(Tensor::zeros(&[0, self.cfg.vocab_size]));
        }
        let ids = plan.apply(&doc.token_ids);
        let view = GraphView::identity(&doc.graph);
        let enc = self.encode(doc, &view, &ids, image, false, None)?;
        let hidden = enc.hidden.expect("full pass");
        hidden
            .select_rows(&plan.positions)?
            .matmul_nt(&self.embedding)?
            .add_bias(&self.heads.mlm_bias)
    }

    /// Unit-norm `[n, projection_dim]` embeddings of a corrupted view.
    pub fn forward_contrastive(&self, doc: &PreparedDoc, view: &GraphView, image: Option<&Tensor>) -> Result<Tensor> {
        let gcn_only = self.cfg.contrastive_tap == ContrastiveTap::Gcn;
        let enc = self.encode(doc, view, &doc.token_ids, image, gcn_only, None)?;
        let tap = enc.hidden.unwrap_or(enc.gcn);
        let (w1, w2) = (&self.heads.proj1, &self.heads.proj2);
        Ok(tap.affine(&w1.0, &w1.1)?.gelu().affine(&w2.0, &w2.1)?.l2_normalize_rows())
    }

    /// `[n, 1 + 4 |labels|]` tag logits on the uncorrupted graph.
    pub fn forward_tags(&self, doc: &PreparedDoc, image: Option<&Tensor>) -> Result<Tensor> {
        let view = GraphView::identity(&doc.graph);
        let enc = self.encode(doc, &view, &doc.token_ids, image, false, None)?;
        enc.hidden.expect("full pass").affine(&self.heads.tags.0, &self.heads.tags.1)
    }

    /// Parameter names grouped by the component that owns them.
    pub fn parameter_groups(&self) -> Vec<(&'static str, Vec<&Parameter>)> {
        let groups = ["embedding", "image", "gcn", "etc", "mlm", "projection", "tags"];
        groups
            .iter()
            .map(|&g| {
                let members = self
                    .params()
                    .iter()
                    .filter(|p| p.name == g || p.name.starts_with(&format!("{g}.")))
                    .collect();
                (g, members)
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, build_vocab, SyntheticFormSpec};
    use crate::tensor::{scoped_precision, Precision};

    pub(crate) fn tiny_config(labels: Vec<String>, vocab: usize) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            etc_heads: 2,
            projection_dim: 6,
            image: ImageEmbedderConfig {
                input_size: 32,
                kernel: 3,
                backbone_filters: vec![2, 3, 3],
                backbone_strides: vec![1, 2, 1],
                roi_h: 3,
                roi_w: 8,
                sampling: 1,
                refiner_filters: vec![2, 2, 2],
                refiner_strides_w: vec![2, 2, 1],
            },
            ..ModelConfig::desk(labels, vocab)
        }
    }

    pub(crate) fn fixture(num_docs: usize) -> (Vec<Document>, Vocabulary, ModelConfig) {
        let spec = SyntheticFormSpec {
            num_documents: num_docs,
            seed: 11,
            ..SyntheticFormSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec).unwrap();
        let vocab = build_vocab(docs.iter().flat_map(|d| d.tokens.iter().map(|t| t.text.as_str())), 64, true);
        let cfg = tiny_config(spec.labels.clone(), 64);
        (docs, vocab, cfg)
    }

    #[test]
    fn full_scale_config_dimensions() {
        let cfg = ModelConfig::full_scale(vec!["header".into(), "question".into(), "answer".into()]);
        cfg.validate().unwrap();
        assert_eq!(cfg.edge_dim(), 8 + 192);
        assert_eq!(cfg.num_tags(), 13);
        assert_eq!(cfg.etc().head_dim(), 64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::desk(vec!["a".into()], 50);
        let mut c = base.clone();
        c.etc_heads = 3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.labels = vec!["a".into(), "a".into()];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.gcn_heads = 2;
        assert!(c.validate().is_err());
        let mut c = base;
        c.hidden = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let cfg = ModelConfig::desk(vec!["a".into()], 50);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }

    #[test]
    fn output_shapes() {
        let (docs, vocab, cfg) = fixture(1);
        let model = FormNetV2::new(&cfg, 0).unwrap();
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let n = doc.num_tokens();
        let img = model.edge_image_features(&doc).unwrap();
        assert_eq!(img.as_ref().unwrap().shape(), &[doc.graph.num_edges(), cfg.image_dim()]);
        let tags = model.forward_tags(&doc, img.as_ref()).unwrap();
        assert_eq!(tags.shape(), &[n, cfg.num_tags()]);
        let view = GraphView::identity(&doc.graph);
        let z = model.forward_contrastive(&doc, &view, img.as_ref()).unwrap();
        assert_eq!(z.shape(), &[n, cfg.projection_dim]);
        for row in z.to_vec().chunks(cfg.projection_dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let plan = crate::data::sample_mlm(&doc.token_ids, vocab.len(), 0.3, 1).unwrap();
        let logits = model.forward_mlm(&doc, &plan, img.as_ref()).unwrap();
        assert_eq!(logits.shape(), &[plan.len(), cfg.vocab_size]);
        let empty = MlmPlan {
            positions: vec![],
            replacements: vec![],
            original_ids: vec![],
        };
        assert_eq!(model.forward_mlm(&doc, &empty, img.as_ref()).unwrap().shape(), &[0, cfg.vocab_size]);
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let (docs, vocab, cfg) = fixture(1);
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let a = FormNetV2::new(&cfg, 3).unwrap();
        let b = FormNetV2::new(&cfg, 3).unwrap();
        let view = GraphView::identity(&doc.graph);
        let run = |m: &FormNetV2| {
            let img = m.edge_image_features(&doc).unwrap();
            m.encode(&doc, &view, &doc.token_ids, img.as_ref(), false, Some(1)).unwrap()
        };
        let (ea, eb) = (run(&a), run(&b));
        let ha = ea.hidden.unwrap();
        assert_eq!(ha.shape(), &[doc.num_tokens(), cfg.hidden]);
        assert_eq!(ha.to_vec(), eb.hidden.unwrap().to_vec());
        assert_eq!(ea.attention.unwrap().len(), cfg.etc_heads);
    }

    #[test]
    fn empty_document_is_an_error() {
        let (mut docs, vocab, cfg) = fixture(1);
        docs[0].tokens.clear();
        docs[0].entities.clear();
        assert!(prepare(&docs[0], &vocab, &cfg).is_err());
    }

    #[test]
    fn long_documents_are_truncated() {
        let (docs, vocab, mut cfg) = fixture(1);
        cfg.max_seq_len = 5;
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        assert_eq!(doc.num_tokens(), 5);
        assert_eq!(doc.geometry.len(), 6);
        assert!(doc.entities.iter().all(|e| e.end < 5));
    }

    #[test]
    fn views_share_parameters() {
        let (docs, vocab, cfg) = fixture(1);
        let model = FormNetV2::new(&cfg, 0).unwrap();
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let (v1, v2) = crate::graph::corrupt_pair(&doc.graph, &Default::default(), &doc.id).unwrap();
        let img = model.edge_image_features(&doc).unwrap();
        let loss = model
            .forward_contrastive(&doc, &v1, img.as_ref())
            .unwrap()
            .sum()
            .add(&model.forward_contrastive(&doc, &v2, img.as_ref()).unwrap().sum())
            .unwrap();
        loss.backward().unwrap();
        // one store, one tensor per name: both views wrote into the same buffers
        let mut names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.dedup();
        assert_eq!(names.len(), total);
        let emb = model.param("embedding").unwrap();
        assert!(emb.tensor.same_storage(&model.embedding));
    }

    #[test]
    fn mlm_leaves_edge_inputs_untouched() {
        let (docs, vocab, cfg) = fixture(1);
        let model = FormNetV2::new(&cfg, 0).unwrap();
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let img = model.edge_image_features(&doc).unwrap();
        let view = GraphView::identity(&doc.graph);
        let before = model.message_graph(&doc, &view, img.as_ref()).unwrap().edge_features.to_vec();
        let plan = crate::data::sample_mlm(&doc.token_ids, vocab.len(), 1.0, 0).unwrap();
        model.forward_mlm(&doc, &plan, img.as_ref()).unwrap();
        let after = model.message_graph(&doc, &view, img.as_ref()).unwrap().edge_features.to_vec();
        assert_eq!(before, after);
        assert_eq!(doc.token_ids, vocab.encode(&docs[0].truncated(cfg.max_seq_len)));
    }

    #[test]
    fn tag_gradients_reach_every_trained_group() {
        let (docs, vocab, cfg) = fixture(1);
        let model = FormNetV2::new(&cfg, 1).unwrap();
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let img = model.edge_image_features(&doc).unwrap();
        let logits = model.forward_tags(&doc, img.as_ref()).unwrap();
        let targets: Vec<usize> = (0..doc.num_tokens()).map(|i| i % cfg.num_tags()).collect();
        logits.cross_entropy(&targets, None).unwrap().backward().unwrap();
        for (group, params) in model.parameter_groups() {
            let norm: f64 = params
                .iter()
                .map(|p| p.tensor.grad().unwrap().iter().map(|g| g * g).sum::<f64>())
                .sum();
            match group {
                "mlm" | "projection" => assert_eq!(norm, 0.0, "{group}"),
                _ => assert!(norm > 0.0, "{group} has no gradient"),
            }
        }
    }

    #[test]
    fn permuting_tokens_with_geometry_permutes_outputs() {
        let _g = scoped_precision(Precision::F64);
        let (docs, vocab, mut cfg) = fixture(1);
        cfg.use_image = false;
        let model = FormNetV2::new(&cfg, 2).unwrap();
        let mut doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let n = 6;
        doc.token_ids.truncate(n);
        doc.graph = DocGraph {
            num_nodes: n,
            edges: vec![],
            layout: vec![],
            layout_reverse: vec![],
        };
        doc.geometry.xs.truncate(n + 1);
        doc.geometry.ys.truncate(n + 1);
        doc.mask = Rc::new(EtcMask::new(n + 1, 1, 2).unwrap());
        let view = GraphView::identity(&doc.graph);
        let base = model.encode(&doc, &view, &doc.token_ids, None, false, None).unwrap().hidden.unwrap().to_vec();

        // token i moves to position perm[i]; keys follow through the mask
        let perm = [2, 5, 0, 4, 1, 3];
        let mut p = doc.clone();
        for i in 0..n {
            p.token_ids[perm[i]] = doc.token_ids[i];
            p.geometry.xs[perm[i] + 1] = doc.geometry.xs[i + 1];
            p.geometry.ys[perm[i] + 1] = doc.geometry.ys[i + 1];
        }
        let map = |i: usize| if i == 0 { 0 } else { perm[i - 1] + 1 };
        let rows = (0..=n)
            .map(|i| {
                let src = (0..=n).find(|&s| map(s) == i).unwrap();
                doc.mask.row(src).iter().map(|&j| map(j)).collect()
            })
            .collect();
        p.mask = Rc::new(EtcMask::from_rows(n + 1, rows));
        let out = model.encode(&p, &view, &p.token_ids, None, false, None).unwrap().hidden.unwrap().to_vec();
        let h = cfg.hidden;
        for i in 0..n {
            for c in 0..h {
                assert!((out[perm[i] * h + c] - base[i * h + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturbation_response_shrinks_with_epsilon() {
        let (docs, vocab, mut cfg) = fixture(1);
        cfg.use_image = false;
        let _g = scoped_precision(Precision::F64);
        let model = FormNetV2::new(&cfg, 5).unwrap();
        let doc = prepare(&docs[0], &vocab, &cfg).unwrap();
        let view = GraphView::identity(&doc.graph);
        let run = || model.encode(&doc, &view, &doc.token_ids, None, false, None).unwrap().hidden.unwrap().to_vec();
        let base = run();
        let row = doc.token_ids[0] as usize * cfg.hidden;
        let orig = model.embedding.to_vec();
        let mut deltas = Vec::new();
        for eps in [1e-2, 1e-4, 1e-6] {
            let mut moved = orig.clone();
            moved[row] += eps;
            model.embedding.set_data(&moved).unwrap();
            let out = run();
            let d = out.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d.is_finite());
            deltas.push(d);
        }
        model.embedding.set_data(&orig).unwrap();
        assert!(deltas[0] > deltas[1] && deltas[1] > deltas[2], "{deltas:?}");
    }
}
