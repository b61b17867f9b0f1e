//! JSON dumps of intermediate structures for debugging.

use serde_json::{json, Value};

use crate::data::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphView};
use crate::model::{prepare, FormNetV2};

pub fn find_doc<'a>(docs: &'a [Document], id: &str) -> Result<&'a Document> {
    docs.iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::Data(format!("no document with id `{id}`")))
}

/// The token graph with per-edge layout features in both directions.
pub fn inspect_graph(doc: &Document, neighbors: usize, max_tokens: usize) -> Result<Value> {
    let doc = doc.truncated(max_tokens);
    let g = build_graph(&doc.tokens, neighbors, doc.page_width, doc.page_height)?;
    let edges: Vec<Value> = g
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| json!({"i": i, "j": j, "layout": g.layout[e], "layout_reverse": g.layout_reverse[e]}))
        .collect();
    Ok(json!({
        "doc": doc.id,
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges(),
        "degrees": g.degrees(),
        "edges": edges,
    }))
}

/// Per-head attention rows of one ETC layer, global positions first.
pub fn inspect_attention(model: &FormNetV2, vocab: &Vocabulary, doc: &Document, layer: usize) -> Result<Value> {
    let p = prepare(doc, vocab, model.config())?;
    let image = model.edge_image_features(&p)?;
    let view = GraphView::identity(&p.graph);
    let enc = model.encode(&p, &view, &p.token_ids, image.as_ref(), false, Some(layer))?;
    let m = p.geometry.len();
    let heads: Vec<Vec<Vec<f64>>> = enc
        .attention
        .unwrap_or_default()
        .iter()
        .map(|w| w.chunks(m).map(<[f64]>::to_vec).collect())
        .collect();
    Ok(json!({
        "doc": p.id,
        "layer": layer,
        "num_global": p.geometry.num_global,
        "positions": m,
        "heads": heads,
    }))
}

/// Image feature vector and map region of the edge between tokens `i` and `j`.
pub fn inspect_edge_image(model: &FormNetV2, vocab: &Vocabulary, doc: &Document, i: usize, j: usize) -> Result<Value> {
    let p = prepare(doc, vocab, model.config())?;
    let key = (i.min(j), i.max(j));
    let e = p
        .graph
        .edges
        .iter()
        .position(|&x| x == key)
        .ok_or_else(|| Error::Data(format!("document `{}` has no edge between tokens {i} and {j}", p.id)))?;
    let feats = model
        .edge_image_features(&p)?
        .ok_or_else(|| Error::Config("the model has no image modality".into()))?;
    let dim = feats.last_dim();
    let row = feats.data()[e * dim..(e + 1) * dim].to_vec();
    let r = p.regions[e];
    Ok(json!({
        "doc": p.id,
        "edge": [key.0, key.1],
        "edge_index": e,
        "region": {"x0": r.x0, "y0": r.y0, "x1": r.x1, "y1": r.y1},
        "features": row,
    }))
}
