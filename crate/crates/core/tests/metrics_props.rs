use gnn_attrib::attribution::{attribute, AttributionOptions};
use gnn_attrib::forward::run_forward;
use gnn_attrib::generate::{generate_ba2motifs, random_graph};
use gnn_attrib::graph::Graph;
use gnn_attrib::metrics::{
    discriminability, edges_to_keep, embed_subgraph, extract_explanation, fidelity, fidelity_curve,
    random_explanation, stability, wl_hash, EmbeddedSample, EmbeddingPoint, Explanation, ScoredEdge,
};
use gnn_attrib::model::{random_model, Arch, ModelSpec, RandomModelConfig};
use gnn_attrib::par::Executor;
use ndarray::Array2;
use proptest::prelude::*;

fn gcn() -> ModelSpec {
    random_model(&RandomModelConfig::reference(Arch::Gcn, 10, 8, 2), 42).unwrap()
}

fn explanation_with_hash(canonical: u64) -> Explanation {
    Explanation {
        graph_id: 0,
        edges: Vec::new(),
        num_graph_edges: 1,
        sparsity: 0.5,
        predicted_class: 0,
        target_row: None,
        canonical,
    }
}

proptest! {
    #[test]
    fn ranking_ignores_positive_rescaling(seed in 0u64..500, s in 0.01f64..100.0) {
        let m = random_model(&RandomModelConfig::reference(Arch::Gin, 3, 4, 2), seed).unwrap();
        let g = random_graph(7, 3, 0.3, seed).unwrap();
        let attr = attribute(&m, &g, AttributionOptions::default()).unwrap();
        let mut scaled = attr.clone();
        for e in &mut scaled.edges {
            for v in &mut e.score_per_class {
                *v *= s;
            }
        }
        let a = extract_explanation(&attr, &g, 0.6, 1).unwrap();
        let b = extract_explanation(&scaled, &g, 0.6, 1).unwrap();
        prop_assert_eq!(a.edge_set(), b.edge_set());
    }

    #[test]
    fn stability_is_monotone_and_order_free(
        hashes in prop::collection::vec(0u64..6, 1..40),
        rotate in 0usize..40,
    ) {
        let expls: Vec<_> = hashes.iter().map(|&h| explanation_with_hash(h)).collect();
        let groups = hashes.iter().collect::<std::collections::BTreeSet<_>>().len();
        let mut prev = 0.0;
        for k in 1..=groups + 2 {
            let v = stability(&expls, k).unwrap();
            prop_assert!(v >= prev && v <= 1.0);
            prev = v;
        }
        prop_assert_eq!(stability(&expls, groups).unwrap(), 1.0);
        let mut shuffled = expls.clone();
        shuffled.rotate_left(rotate % expls.len());
        shuffled.reverse();
        for k in 1..=groups {
            prop_assert_eq!(stability(&expls, k).unwrap(), stability(&shuffled, k).unwrap());
        }
    }

    #[test]
    fn discriminability_is_symmetric(
        points in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 0usize..2), 2..20),
    ) {
        let mut samples: Vec<_> = points
            .into_iter()
            .map(|(embedding, c)| EmbeddedSample { embedding, true_class: c, predicted_class: c })
            .collect();
        samples[0].true_class = 0;
        samples[0].predicted_class = 0;
        samples[1].true_class = 1;
        samples[1].predicted_class = 1;
        let ab = discriminability(&samples, 0, 1).unwrap();
        prop_assert_eq!(ab, discriminability(&samples, 1, 0).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(discriminability(&samples, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn kept_count_is_the_ceiling(e in 1usize..200, s in 0.0f64..0.999) {
        let k = edges_to_keep(e, s);
        prop_assert!(k <= e);
        prop_assert!(k as f64 + 1e-6 >= (1.0 - s) * e as f64);
        prop_assert!((k as f64) < (1.0 - s) * e as f64 + 1.0);
    }
}

#[test]
fn zero_sparsity_keeps_every_edge() {
    let ds = generate_ba2motifs(2, 20, 3).unwrap();
    let g = &ds.graphs()[0];
    let attr = attribute(&gcn(), g, AttributionOptions::default()).unwrap();
    let expl = extract_explanation(&attr, g, 0.0, 0).unwrap();
    assert_eq!(expl.len(), g.num_edges());
    assert_eq!(random_explanation(g, 0.0, 0, 1).unwrap().len(), g.num_edges());
}

#[test]
fn embedding_of_whole_and_empty_explanations() {
    let m = gcn();
    let ds = generate_ba2motifs(2, 20, 4).unwrap();
    let g = &ds.graphs()[1];
    let all = random_explanation(g, 0.0, 0, 0).unwrap();
    let full = run_forward(&m, g).unwrap();
    assert_eq!(embed_subgraph(&m, g, &all, EmbeddingPoint::Pooled).unwrap(), full.embedding(0));
    assert_eq!(
        embed_subgraph(&m, g, &all, EmbeddingPoint::FirstClassifier).unwrap(),
        full.first_classifier_output(0)
    );
    let none = Explanation::from_edges(g, Vec::new(), 0);
    let edgeless = Graph::from_edges(g.num_nodes(), &[], false, g.features().clone()).unwrap();
    assert_eq!(
        embed_subgraph(&m, g, &none, EmbeddingPoint::Pooled).unwrap(),
        run_forward(&m, &edgeless).unwrap().embedding(0)
    );
}

#[test]
fn isomorphic_explanations_embed_alike() {
    let m = gcn();
    // two triangles placed on different node ids of the same 6-node graph
    let g = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)], false, Array2::ones((6, 10))).unwrap();
    let left = Explanation::from_edges(&g, scored(&[(0, 1), (1, 2), (0, 2)]), 0);
    let right = Explanation::from_edges(&g, scored(&[(3, 4), (4, 5), (3, 5)]), 0);
    assert_eq!(left.canonical, right.canonical);
    let a = embed_subgraph(&m, &g, &left, EmbeddingPoint::Pooled).unwrap();
    let b = embed_subgraph(&m, &g, &right, EmbeddingPoint::Pooled).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-14));
    assert_eq!(wl_hash(&g, &left.edge_set()), wl_hash(&g, &right.edge_set()));
}

fn scored(pairs: &[(usize, usize)]) -> Vec<ScoredEdge> {
    pairs.iter().map(|&(u, v)| ScoredEdge { u, v, score: 0.0 }).collect()
}

#[test]
fn fidelity_of_all_edges_is_a_double_forward() {
    let m = gcn();
    let ds = generate_ba2motifs(4, 20, 9).unwrap();
    for g in ds.graphs() {
        let all = random_explanation(g, 0.0, 0, 0).unwrap();
        let full = run_forward(&m, g).unwrap();
        let y = full.predicted_class(0);
        let edgeless = Graph::from_edges(g.num_nodes(), &[], false, g.features().clone()).unwrap();
        let want = full.probs[[0, y]] - run_forward(&m, &edgeless).unwrap().probs[[0, y]];
        assert_eq!(fidelity(&m, g, &all).unwrap(), want);
    }
}

#[test]
fn curve_averages_per_sample_fidelity() {
    let m = gcn();
    let ds = generate_ba2motifs(6, 20, 12).unwrap();
    let report = fidelity_curve(&m, &ds, &[0.5, 0.8], &Executor::sequential()).unwrap();
    for point in &report.fidelity {
        let mut values = Vec::new();
        for g in ds.graphs() {
            let attr = attribute(&m, g, AttributionOptions::default()).unwrap();
            let y = run_forward(&m, g).unwrap().predicted_class(0);
            let expl = extract_explanation(&attr, g, point.sparsity, y).unwrap();
            values.push(fidelity(&m, g, &expl).unwrap());
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert_eq!(point.count, ds.len());
        assert!((point.mean - mean).abs() < 1e-12, "{} vs {mean}", point.mean);
    }
}
