use std::fs;

use gnn_attrib::generate::generate_ba2motifs;
use gnn_attrib::graph::{load_graphs, save_json, Edge, Graph, GraphFormat, GraphJson, Task};
use ndarray::{array, Array2};
use proptest::prelude::*;

#[test]
fn single_node_graph_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.json");
    fs::write(&path, r#"{"num_nodes":1,"edges":[],"x":[[0.5,-1.0]],"label":0}"#).unwrap();
    let ds = load_graphs(&path, GraphFormat::Json).unwrap();
    let g = &ds.graphs()[0];
    assert_eq!((g.num_nodes(), g.num_edges(), g.feature_dim()), (1, 0, 2));
    assert_eq!(ds.task(), Task::GraphClassification);
    assert_eq!(g.adjacency(), &array![[0.0]]);
}

#[test]
fn two_node_edge_is_symmetric() {
    let g = Graph::from_edges(2, &[(1, 0)], false, Array2::ones((2, 1))).unwrap();
    assert_eq!(g.adjacency(), &array![[0.0, 1.0], [1.0, 0.0]]);
    assert_eq!(g.edges(), vec![Edge::new(0, 1)]);
}

#[test]
fn generated_dataset_round_trips_bit_identically() {
    let ds = generate_ba2motifs(4, 20, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    save_json(&ds, &path).unwrap();
    let back = load_graphs(&path, GraphFormat::Json).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.graphs()[0].num_nodes(), 25);
    let again = dir.path().join("ds2.json");
    save_json(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn csv_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g.csv");
    fs::write(&csv, "src,dst\n0,1\n1,x\n").unwrap();
    fs::write(dir.path().join("g.json"), r#"{"num_nodes":3,"x":[[1],[1],[1]]}"#).unwrap();
    let err = load_graphs(&csv, GraphFormat::EdgeCsv).unwrap_err().to_string();
    assert!(err.contains("g.csv:3"), "{err}");
}

#[test]
fn csv_with_sidecar_matches_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g.csv");
    fs::write(&csv, "src,dst\n0,1\n1,2\n").unwrap();
    fs::write(dir.path().join("g.json"), r#"{"num_nodes":3,"x":[[1],[2],[3]],"label":1}"#).unwrap();
    let ds = load_graphs(&csv, GraphFormat::from_path(&csv)).unwrap();
    let g = &ds.graphs()[0];
    let expected = Graph::from_edges(3, &[(0, 1), (1, 2)], false, array![[1.0], [2.0], [3.0]])
        .unwrap()
        .with_label(Some(1));
    assert_eq!(g, &expected);
}

#[test]
fn out_of_range_edge_is_rejected() {
    let j: GraphJson = serde_json::from_str(r#"{"num_nodes":2,"edges":[[0,2]],"x":[[1],[1]]}"#).unwrap();
    assert!(j.into_graph("g").is_err());
}

fn arb_graph() -> impl Strategy<Value = Graph> {
    (1usize..8, 1usize..4, any::<bool>()).prop_flat_map(|(n, d, directed)| {
        (
            prop::collection::vec((0..n, 0..n), 0..12),
            prop::collection::vec(-1e6f64..1e6, n * d),
        )
            .prop_map(move |(pairs, x)| {
                let edges: Vec<_> = pairs.into_iter().filter(|(a, b)| a != b).collect();
                let x = Array2::from_shape_vec((n, d), x).unwrap();
                Graph::from_edges(n, &edges, directed, x).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn json_round_trip_is_lossless(g in arb_graph()) {
        let text = serde_json::to_string(&GraphJson::from_graph(&g)).unwrap();
        let back = serde_json::from_str::<GraphJson>(&text).unwrap().into_graph("g").unwrap();
        prop_assert_eq!(back, g);
    }
}
