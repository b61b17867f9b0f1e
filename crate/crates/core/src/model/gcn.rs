//! Edge-conditioned graph convolution.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Directed message lists for one (possibly corrupted) graph. Every
/// undirected edge contributes one message in each direction.
#[derive(Clone, Debug)]
pub struct MessageGraph {
    pub num_nodes: usize,
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
    /// `[messages, edge_dim]`, row `m` seen from the receiver of message `m`.
    pub edge_features: Tensor,
    inv_degree: Vec<f64>,
}

impl MessageGraph {
    /// `forward` holds features of `(i, j)` seen from `i`, `backward` the
    /// same edges seen from `j`. Both are `[E, edge_dim]`.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)], forward: &Tensor, backward: &Tensor) -> Result<Self> {
        let e = edges.len();
        if forward.rows() != e || backward.rows() != e || forward.shape() != backward.shape() {
            return Err(Error::shape("message_graph", forward.shape(), backward.shape()));
        }
        let mut receivers = Vec::with_capacity(2 * e);
        let mut senders = Vec::with_capacity(2 * e);
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::invalid("message_graph", format!("edge ({i}, {j}) outside {num_nodes} nodes")));
            }
            receivers.push(i);
            senders.push(j);
        }
        for &(i, j) in edges {
            receivers.push(j);
            senders.push(i);
        }
        let mut degree = vec![0usize; num_nodes];
        receivers.iter().for_each(|&r| degree[r] += 1);
        let inv_degree = degree.iter().map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 }).collect();
        let edge_features = if e == 0 {
            Tensor::zeros(&[0, forward.last_dim()])
        } else {
            Tensor::concat_rows(&[forward, backward])?
        };
        Ok(MessageGraph {
            num_nodes,
            receivers,
            senders,
            edge_features,
            inv_degree,
        })
    }

    pub fn num_messages(&self) -> usize {
        self.receivers.len()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_features.last_dim()
    }
}

/// `h_i <- LN(h_i + mean_j GELU(W [h_i; h_j; e_ij] + b))`.
pub struct GcnLayer {
    hidden: usize,
    edge_dim: usize,
    /// `[2 * hidden + edge_dim, hidden]`, rows ordered receiver, sender, edge.
    pub(crate) message_w: Tensor,
    message_b: Tensor,
    norm: (Tensor, Tensor),
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, hidden: usize, edge_dim: usize) -> Result<Self> {
        Ok(GcnLayer {
            hidden,
            edge_dim,
            message_w: store.weight(format!("{prefix}.message.w"), &[2 * hidden + edge_dim, hidden])?,
            message_b: store.zeros(format!("{prefix}.message.b"), &[hidden])?,
            norm: (
                store.constant(format!("{prefix}.norm.gain"), &[hidden], 1.0)?,
                store.zeros(format!("{prefix}.norm.bias"), &[hidden])?,
            ),
        })
    }

    pub fn input_dim(&self) -> usize {
        2 * self.hidden + self.edge_dim
    }

    pub fn forward(&self, x: &Tensor, graph: &MessageGraph) -> Result<Tensor> {
        if x.rows() != graph.num_nodes || x.last_dim() != self.hidden {
            return Err(Error::shape("gcn", x.shape(), &[graph.num_nodes, self.hidden]));
        }
        if graph.edge_dim() != self.edge_dim {
            return Err(Error::invalid(
                "gcn",
                format!("edge features have {} dims, layer expects {}", graph.edge_dim(), self.edge_dim),
            ));
        }
        if graph.num_messages() == 0 {
            return x.layer_norm(&self.norm.0, &self.norm.1);
        }
        let h = self.hidden;
        // the affine over the concatenation, split by input block
        let w_recv = self.message_w.narrow_rows(0, h)?;
        let w_send = self.message_w.narrow_rows(h, h)?;
        let recv = x.matmul(&w_recv)?.select_rows(&graph.receivers)?;
        let send = x.matmul(&w_send)?.select_rows(&graph.senders)?;
        let mut pre = recv.add(&send)?;
        if self.edge_dim > 0 {
            let w_edge = self.message_w.narrow_rows(2 * h, self.edge_dim)?;
            pre = pre.add(&graph.edge_features.matmul(&w_edge)?)?;
        }
        let messages = pre.add_bias(&self.message_b)?.gelu();
        let mean = messages
            .index_add_rows(&graph.receivers, graph.num_nodes)?
            .mul_rows(&graph.inv_degree)?;
        x.add(&mean)?.layer_norm(&self.norm.0, &self.norm.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::{scoped_precision, Precision};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(&[seed]);
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_slice(&v, &[rows, cols]).unwrap()
    }

    fn layer(store: &mut ParamStore, edge_dim: usize) -> GcnLayer {
        let l = GcnLayer::new(store, "gcn", 4, edge_dim).unwrap();
        // larger weights so messages are far from zero
        store.jitter(0.5, 3);
        l
    }

    #[test]
    fn input_dim_counts_both_endpoints_and_edge() {
        let mut store = ParamStore::new(0);
        let l = GcnLayer::new(&mut store, "g", 64, 56).unwrap();
        assert_eq!(l.input_dim(), 2 * 64 + 56);
        assert_eq!(store.get("g.message.w").unwrap().tensor.shape(), &[184, 64]);
    }

    #[test]
    fn no_edges_is_plain_layer_norm() {
        let _g = scoped_precision(Precision::F64);
        let mut store = ParamStore::new(0);
        let l = layer(&mut store, 3);
        let x = random(5, 4, 1);
        let g = MessageGraph::new(5, &[], &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3])).unwrap();
        let out = l.forward(&x, &g).unwrap().to_vec();
        let expected = x.layer_norm(&l.norm.0, &l.norm.1).unwrap().to_vec();
        assert_eq!(out, expected);
    }

    #[test]
    fn permuting_nodes_permutes_outputs() {
        let _g = scoped_precision(Precision::F64);
        let mut store = ParamStore::new(4);
        let l = layer(&mut store, 2);
        let x = random(5, 4, 2);
        let edges = [(0, 1), (1, 2), (1, 4), (3, 4)];
        let fw = random(4, 2, 5);
        let bw = random(4, 2, 6);
        let base = l.forward(&x, &MessageGraph::new(5, &edges, &fw, &bw).unwrap()).unwrap().to_vec();

        // node i moves to position perm[i]
        let perm = [3, 0, 4, 1, 2];
        let mut inv = [0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let xp = x.select_rows(&inv).unwrap();
        let edges_p: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let out = l.forward(&xp, &MessageGraph::new(5, &edges_p, &fw, &bw).unwrap()).unwrap().to_vec();
        for i in 0..5 {
            for c in 0..4 {
                assert!((out[perm[i] * 4 + c] - base[i * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_edge_features_change_messages_only_when_dropped() {
        let mut store = ParamStore::new(5);
        let l = layer(&mut store, 2);
        let x = random(3, 4, 7);
        let edges = [(0, 1), (1, 2)];
        let fw = random(2, 2, 8);
        let bw = random(2, 2, 9);
        let run = |f: &Tensor, b: &Tensor| l.forward(&x, &MessageGraph::new(3, &edges, f, b).unwrap()).unwrap().to_vec();
        let base = run(&fw, &bw);
        assert_eq!(base, run(&fw, &bw));
        let mut dropped = fw.to_vec();
        dropped[2] = 0.0;
        dropped[3] = 0.0;
        let changed = run(&Tensor::from_slice(&dropped, &[2, 2]).unwrap(), &bw);
        assert_ne!(base, changed);
        // node 0 only hears from node 1 over edge 0, untouched here
        assert_eq!(&base[..4], &changed[..4]);
    }

    #[test]
    fn edge_dim_mismatch_is_an_error() {
        let mut store = ParamStore::new(0);
        let l = GcnLayer::new(&mut store, "g", 4, 3).unwrap();
        let g = MessageGraph::new(2, &[(0, 1)], &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2])).unwrap();
        let err = l.forward(&Tensor::zeros(&[2, 4]), &g).unwrap_err();
        assert!(err.to_string().contains("edge features"), "{err}");
    }
}
