//! Synthetic BA-2Motifs-style dataset: a Barabási–Albert base graph with a
//! five-node motif attached by a single bridging edge. Label 1 marks a
//! "house" motif, label 0 a five-cycle. Also small seeded random graphs for checks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, Task};

pub const MOTIF_SIZE: usize = 5;
pub const FEATURE_DIM: usize = 10;

/// House: a square 0-1-2-3 with a roof node 4 joined to 0 and 1.
pub const HOUSE_EDGES: [(usize, usize); 6] = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)];
pub const CYCLE_EDGES: [(usize, usize); 5] = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)];

/// Preferential-attachment tree (one edge per arriving node).
fn barabasi_albert(n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = vec![(0, 1)];
    // every edge endpoint once per incident edge => degree-proportional sampling
    let mut endpoints = vec![0, 1];
    for new in 2..n {
        let target = *endpoints.choose(rng).expect("non-empty");
        edges.push((target, new));
        endpoints.push(target);
        endpoints.push(new);
    }
    edges
}

pub fn generate_ba2motifs(count: usize, base_size: usize, seed: u64) -> Result<Dataset> {
    if base_size < 5 {
        return Err(Error::InvalidArgument(format!(
            "base_size must be at least 5, got {base_size}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base_size + MOTIF_SIZE;
    let mut graphs = Vec::with_capacity(count);
    for k in 0..count {
        let label = k % 2;
        let mut edges = barabasi_albert(base_size, &mut rng);
        let motif: &[(usize, usize)] = if label == 1 { &HOUSE_EDGES } else { &CYCLE_EDGES };
        edges.extend(motif.iter().map(|&(a, b)| (base_size + a, base_size + b)));
        let from = base_size + rng.gen_range(0..MOTIF_SIZE);
        let to = rng.gen_range(0..base_size);
        edges.push((from, to));
        let x = Array2::ones((n, FEATURE_DIM));
        graphs.push(Graph::from_edges(n, &edges, false, x)?.with_label(Some(label)));
    }
    Dataset::new(graphs, Task::GraphClassification, 2)
}

/// Connected random graph: a random recursive tree plus each remaining pair
/// joined with probability `extra_edge_prob`; features uniform in `[-1, 1)`.
pub fn random_graph(n: usize, feature_dim: usize, extra_edge_prob: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidArgument("random graph needs at least one node".into()));
    }
    if !(0.0..=1.0).contains(&extra_edge_prob) {
        return Err(Error::InvalidArgument(format!("edge probability {extra_edge_prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = Array2::<f64>::zeros((n, n));
    for v in 1..n {
        let u = rng.gen_range(0..v);
        adj[[u, v]] = 1.0;
        adj[[v, u]] = 1.0;
    }
    for u in 0..n {
        for v in u + 1..n {
            if adj[[u, v]] == 0.0 && rng.gen_bool(extra_edge_prob) {
                adj[[u, v]] = 1.0;
                adj[[v, u]] = 1.0;
            }
        }
    }
    let x = Array2::from_shape_fn((n, feature_dim), |_| rng.gen_range(-1.0..1.0));
    Graph::from_adjacency(adj, false, x)
}
