use std::collections::{BTreeSet, VecDeque};

use gnn_attrib::generate::{generate_ba2motifs, random_graph, CYCLE_EDGES, FEATURE_DIM, HOUSE_EDGES, MOTIF_SIZE};
use gnn_attrib::graph::Graph;

fn connected(g: &Graph) -> bool {
    let n = g.num_nodes();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(a) = queue.pop_front() {
        for (b, s) in seen.iter_mut().enumerate() {
            if !*s && (g.adjacency()[[a, b]] != 0.0 || g.adjacency()[[b, a]] != 0.0) {
                *s = true;
                queue.push_back(b);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn motif_at(g: &Graph, nodes: &[usize], motif: &[(usize, usize)]) -> bool {
    motif.iter().all(|&(a, b)| g.adjacency()[[nodes[a], nodes[b]]] == 1.0)
}

// Brute force over all injective maps of the motif into the graph.
fn contains(g: &Graph, motif: &[(usize, usize)]) -> bool {
    fn search(g: &Graph, motif: &[(usize, usize)], chosen: &mut Vec<usize>) -> bool {
        if chosen.len() == MOTIF_SIZE {
            return motif_at(g, chosen, motif);
        }
        for v in 0..g.num_nodes() {
            if chosen.contains(&v) {
                continue;
            }
            chosen.push(v);
            let k = chosen.len();
            let consistent = motif
                .iter()
                .filter(|&&(a, b)| a < k && b < k)
                .all(|&(a, b)| g.adjacency()[[chosen[a], chosen[b]]] == 1.0);
            if consistent && search(g, motif, chosen) {
                return true;
            }
            chosen.pop();
        }
        false
    }
    search(g, motif, &mut Vec::new())
}

#[test]
fn labels_match_planted_motifs() {
    let ds = generate_ba2motifs(10, 20, 11).unwrap();
    for g in ds.graphs() {
        let has_house = contains(g, &HOUSE_EDGES);
        match g.label() {
            // the base is a tree, so any 4-cycle belongs to a house
            Some(1) => assert!(has_house),
            Some(0) => {
                assert!(!has_house);
                assert!(contains(g, &CYCLE_EDGES));
            }
            other => panic!("unexpected label {other:?}"),
        }
    }
}

#[test]
fn graphs_are_connected_with_unit_features() {
    let ds = generate_ba2motifs(20, 20, 5).unwrap();
    let mut total = 0;
    for g in ds.graphs() {
        assert!(connected(g));
        assert!(!g.is_directed());
        assert_eq!(g.feature_dim(), FEATURE_DIM);
        assert!(g.features().iter().all(|&v| v == 1.0));
        total += g.num_nodes();
    }
    assert_eq!(total as f64 / ds.len() as f64, 25.0);
    let labels: BTreeSet<_> = ds.graphs().iter().map(|g| g.label().unwrap()).collect();
    assert_eq!(labels.len(), 2);
}

#[test]
fn random_graphs_are_connected_and_seeded() {
    for seed in 0..20 {
        let g = random_graph(6, 2, 0.3, seed).unwrap();
        assert!(connected(&g));
        assert_eq!(g, random_graph(6, 2, 0.3, seed).unwrap());
        assert!(g.features().iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
