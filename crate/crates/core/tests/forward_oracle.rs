use gnn_attrib::forward::{normalize_adjacency, run_forward, run_zero_baseline, LayerId};
use gnn_attrib::generate::generate_ba2motifs;
use gnn_attrib::graph::Graph;
use gnn_attrib::model::{parse_model, random_model, Arch, RandomModelConfig};
use ndarray::{array, Array2, Axis};

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn two_layer_gcn_matches_straight_line_arithmetic() {
    let model = parse_model(
        r#"{"arch":"gcn","pooling":"mean","num_classes":2,
        "conv_layers":[{"W":[[1.0,-1.0],[0.5,2.0]],"B":[0.1,-0.3]},{"W":[[0.7,0.0],[-0.4,1.1]],"B":[0.0,0.2]}],
        "classifier":[{"W":[[1.0,-2.0],[0.5,0.5]],"B":[0.25,-0.25]}]}"#,
    )
    .unwrap();
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)];
    let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5], [0.3, -0.2]];
    let g = Graph::from_edges(5, &edges, false, x.clone()).unwrap();

    let mut a = Array2::<f64>::eye(5);
    for &(i, j) in &edges {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    let v = Array2::from_shape_fn((5, 5), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt());
    let h1 = (v.dot(&x).dot(&array![[1.0, -1.0], [0.5, 2.0]]) + &array![0.1, -0.3]).mapv(|t| t.max(0.0));
    let h2 = (v.dot(&h1).dot(&array![[0.7, 0.0], [-0.4, 1.1]]) + &array![0.0, 0.2]).mapv(|t| t.max(0.0));
    let pooled = h2.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    let logits = pooled.dot(&array![[1.0, -2.0], [0.5, 0.5]]) + &array![0.25, -0.25];

    let trace = run_forward(&model, &g).unwrap();
    assert!(close(&trace.propagation, &v, 1e-15));
    assert!(close(&trace.conv[0][0].post, &h1, 1e-14));
    assert!(close(&trace.pooled, &pooled, 1e-14));
    assert!(close(&trace.logits, &logits, 1e-14));
}

#[test]
fn two_node_normalization_is_one_half() {
    let g = Graph::from_edges(2, &[(0, 1)], false, Array2::ones((2, 1))).unwrap();
    assert!(close(&normalize_adjacency(&g), &array![[0.5, 0.5], [0.5, 0.5]], 1e-15));
}

#[test]
fn path_rows_sum_to_degree_weighted_values() {
    // path 0-1-2-3: degrees with self-loops 2,3,3,2
    let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)], false, Array2::ones((4, 1))).unwrap();
    let v = normalize_adjacency(&g);
    let s6 = 6f64.sqrt();
    let want = [0.5 + 1.0 / s6, 1.0 / s6 + 1.0 / 3.0 + 1.0 / 3.0, 1.0 / s6 + 2.0 / 3.0, 0.5 + 1.0 / s6];
    for (row, w) in v.sum_axis(Axis(1)).iter().zip(want) {
        assert!((row - w).abs() < 1e-15);
    }
    assert!(close(&v, &v.t().to_owned(), 0.0));
}

#[test]
fn probabilities_sum_to_one_on_generated_graphs() {
    let ds = generate_ba2motifs(6, 20, 2).unwrap();
    for arch in [Arch::Gcn, Arch::Gin, Arch::Sage] {
        let m = random_model(&RandomModelConfig::reference(arch, 10, 8, 2), 3).unwrap();
        for g in ds.graphs() {
            let t = run_forward(&m, g).unwrap();
            assert_eq!(t.probs.dim(), (1, 2));
            assert!((t.probs.sum() - 1.0).abs() < 1e-12);
            assert!(t.probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn baseline_is_the_bias_only_forward() {
    let m = random_model(&RandomModelConfig::reference(Arch::Gcn, 3, 4, 2), 5).unwrap();
    let t = run_zero_baseline(&m, 4, 3).unwrap();
    // only the last conv bias survives the zero propagation matrix
    let Some(gnn_attrib::model::ConvLayer::Gcn(d)) = m.conv_layers.last() else { unreachable!() };
    let mut h = d.bias.as_ref().unwrap().mapv(|v| v.max(0.0)).insert_axis(Axis(0));
    for (k, d) in m.classifier.iter().enumerate() {
        h = h.dot(&d.weight) + d.bias.as_ref().unwrap();
        if k + 1 < m.classifier.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    assert!(close(&t.logits, &h, 1e-14));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let ds = generate_ba2motifs(2, 20, 8).unwrap();
    let m = random_model(&RandomModelConfig::reference(Arch::Gin, 10, 6, 2), 4).unwrap();
    let g = &ds.graphs()[1];
    assert_eq!(run_forward(&m, g).unwrap(), run_forward(&m, g).unwrap());
}

#[test]
fn pattern_times_pre_reconstructs_post() {
    let ds = generate_ba2motifs(3, 20, 1).unwrap();
    for arch in [Arch::Gcn, Arch::Gin, Arch::Sage] {
        let m = random_model(&RandomModelConfig::reference(arch, 10, 6, 2), 2).unwrap();
        let t = run_forward(&m, &ds.graphs()[0]).unwrap();
        let records = t.conv.iter().flatten().chain(&t.classifier);
        for rec in records {
            assert!(close(&(&rec.pattern * &rec.pre), &rec.post, 0.0), "{}", rec.id);
            assert!(rec.pattern.iter().all(|&p| p == 0.0 || p == 1.0));
        }
        assert!(t.record(LayerId::Classifier { layer: 0 }).is_some());
    }
}
