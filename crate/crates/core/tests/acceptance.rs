//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::time::{Duration, Instant};

use gnn_attrib::attribution::{attribute, sweep_term, AttributionOptions, OutputEntry};
use gnn_attrib::expansion::{enumerate_terms, evaluate_term, VariableMode};
use gnn_attrib::forward::run_forward;
use gnn_attrib::generate::generate_ba2motifs;
use gnn_attrib::graph::Graph;
use gnn_attrib::metrics::{
    discriminability, extract_explanation, fidelity, random_explanation, stability, EmbeddedSample, Explanation,
    ScoredEdge,
};
use gnn_attrib::model::{random_model, Arch, ModelSpec, RandomModelConfig};
use gnn_attrib::oracle::{check_equivalence, expand_all, oracle_attribute, OracleMode, ScalarProduct, VarId};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARCHS: [Arch; 3] = [Arch::Gcn, Arch::Gin, Arch::Sage];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Graph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(0.2) && !edges.contains(&(u, v)) {
                edges.push((u, v));
            }
        }
    }
    let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    Graph::from_edges(n, &edges, false, x).unwrap()
}

fn reference_model(arch: Arch, seed: u64) -> ModelSpec {
    random_model(&RandomModelConfig::reference(arch, 3, 4, 3), seed).unwrap()
}

fn toy_examples() -> Outcome {
    let a = |i, j| (VarId::Adjacency { i, j }, 1.0);
    let z = ScalarProduct::new(10.0, vec![a(1, 1), a(1, 2), a(2, 3)]);
    let mut worst: f64 = 0.0;
    for (id, _) in &z.variables {
        let got = oracle_attribute(std::slice::from_ref(&z), OracleMode::UniqueVariables, *id);
        worst = worst.max((got - 10.0 / 3.0).abs());
    }
    let y13 = vec![
        z.clone(),
        ScalarProduct::new(8.0, vec![a(1, 1), a(1, 3), a(3, 3)]),
        ScalarProduct::new(11.0, vec![a(1, 2), a(2, 1), a(1, 3)]),
    ];
    let a11 = oracle_attribute(&y13, OracleMode::UniqueVariables, VarId::Adjacency { i: 1, j: 1 });
    let dev = (a11 - 6.0).abs();
    outcome(
        worst <= 1e-12 && dev <= 1e-12,
        format!("edge share dev {worst:.1e}, A11 = {a11} (dev {dev:.1e}), tol 1e-12"),
    )
}

fn term_counts() -> Outcome {
    let counts: Vec<usize> = ARCHS
        .iter()
        .map(|&arch| enumerate_terms(&reference_model(arch, 0)).unwrap().len())
        .collect();
    outcome(
        counts == [6, 24, 17],
        format!("GCN {} / GIN {} / SAGE {} (want 6 / 24 / 17)", counts[0], counts[1], counts[2]),
    )
}

fn reconstruction_and_conservation() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut recon: f64 = 0.0;
    let mut conserve: f64 = 0.0;
    let mut models = 0;
    for arch in ARCHS {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = 3 + (seed as usize % 6);
            let g = random_graph(&mut rng, n, 3);
            let m = reference_model(arch, seed);
            let trace = run_forward(&m, &g).unwrap();
            let terms = enumerate_terms(&m).unwrap();
            let values: Vec<Array2<f64>> = terms.iter().map(|t| evaluate_term(&m, t, &trace).unwrap()).collect();
            let sum = values.iter().fold(Array2::<f64>::zeros(trace.logits.dim()), |acc, v| acc + v);
            for (s, l) in sum.iter().zip(trace.logits.iter()) {
                recon = recon.max((s - l).abs() / l.abs().max(1.0));
            }
            for (t, v) in terms.iter().zip(&values) {
                for class in 0..m.num_classes {
                    for s in sweep_term(&m, t, &trace, OutputEntry { row: 0, class }).unwrap() {
                        let want = v[[0, class]];
                        conserve = conserve.max((s.entries.sum() - want).abs() / want.abs().max(1.0));
                    }
                }
            }
            models += 1;
        }
    }
    let elapsed = start.elapsed();
    (
        outcome(
            recon <= 1e-8 && elapsed < Duration::from_secs(5),
            format!("{models} models, N in 3..8, max rel dev {recon:.2e} (tol 1e-8), {elapsed:.2?} (limit 5s, includes sweeps)"),
        ),
        outcome(
            conserve <= 1e-8,
            format!("every slot of every term, max rel dev {conserve:.2e} (tol 1e-8)"),
        ),
    )
}

fn completeness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for arch in ARCHS {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let g = random_graph(&mut rng, 4 + seed as usize % 8, 3);
            let m = reference_model(arch, 100 + seed);
            let r = attribute(&m, &g, AttributionOptions::default()).unwrap();
            for c in 0..m.num_classes {
                worst = worst.max(r.relative_residual(c));
            }
            runs += 1;
        }
    }
    outcome(worst <= 1e-6, format!("{runs} models, max rel residual {worst:.2e} (tol 1e-6)"))
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut repeat_free = 0;
    let mut mode_dev: f64 = 0.0;
    for arch in ARCHS {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let n = 3 + seed as usize % 3;
            let g = random_graph(&mut rng, n, 2);
            let cfg = RandomModelConfig {
                conv_widths: vec![3; 1 + seed as usize % 2],
                classifier_widths: vec![3],
                ..RandomModelConfig::reference(arch, 2, 3, 2)
            };
            let m = random_model(&cfg, seed).unwrap();
            let trace = run_forward(&m, &g).unwrap();
            let mode = VariableMode {
                features_as_variables: seed % 2 == 1,
            };
            let report = check_equivalence(&m, &trace, mode).unwrap();
            worst = worst.max(report.max_deviation());
            entries += report.entries_checked;
            for z in expand_all(&m, &g, mode).unwrap() {
                if z.unique_count() == z.degree() {
                    repeat_free += 1;
                    for (id, _) in &z.variables {
                        let a = z.share(OracleMode::UniqueVariables, *id);
                        let b = z.share(OracleMode::Occurrences, *id);
                        mode_dev = mode_dev.max((a - b).abs());
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-8 && mode_dev == 0.0 && repeat_free > 0,
        format!(
            "{entries} entries, max dev {worst:.2e} (tol 1e-8); {repeat_free} repeat-free products, mode dev {mode_dev:e} (exact)"
        ),
    )
}

fn fidelity_dominance() -> Outcome {
    let start = Instant::now();
    let ds = generate_ba2motifs(200, 20, 7).unwrap();
    let model = random_model(&RandomModelConfig::reference(Arch::Gcn, 10, 16, 2), 42).unwrap();
    let sparsity = 0.7;
    let seeds = 20u64;
    let mut ours = Vec::with_capacity(ds.len());
    let mut random_per_graph = Vec::with_capacity(ds.len());
    let mut random_per_seed = vec![0.0; seeds as usize];
    for (i, g) in ds.graphs().iter().enumerate() {
        let attr = attribute(&model, g, AttributionOptions::default()).unwrap();
        let y = run_forward(&model, g).unwrap().predicted_class(0);
        let e = extract_explanation(&attr, g, sparsity, y).unwrap();
        ours.push(fidelity(&model, g, &e).unwrap());
        let mut acc = 0.0;
        for s in 0..seeds {
            let r = random_explanation(g, sparsity, y, s * 1_000_003 + i as u64).unwrap();
            let f = fidelity(&model, g, &r).unwrap();
            acc += f;
            random_per_seed[s as usize] += f / ds.len() as f64;
        }
        random_per_graph.push(acc / seeds as f64);
    }
    let n = ds.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ours_mean = mean(&ours);
    let random_mean = mean(&random_per_graph);
    let diffs: Vec<f64> = ours.iter().zip(&random_per_graph).map(|(a, b)| a - b).collect();
    let d_mean = mean(&diffs);
    let se = (diffs.iter().map(|d| (d - d_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    let best_random_seed = random_per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let elapsed = start.elapsed();
    outcome(
        ours_mean >= random_mean + 3.0 * se && elapsed < Duration::from_secs(60),
        format!(
            "top-30% {ours_mean:.4} vs random-30% {random_mean:.4} (highest single-seed random mean {best_random_seed:.4}), paired SE {se:.4}, margin {:.1} SE, {elapsed:.2?} (limit 60s)",
            d_mean / se
        ),
    )
}

/// Not gating: how the top-30% advantage behaves across model draws and architectures,
/// measured on the logit of the predicted class and on its probability.
fn fidelity_robustness() -> String {
    let ds = generate_ba2motifs(40, 20, 11).unwrap();
    let mut parts = Vec::new();
    for arch in ARCHS {
        let mut logit_wins = 0;
        let mut prob_wins = 0;
        let models = 4u64;
        for mseed in 0..models {
            let model = random_model(&RandomModelConfig::reference(arch, 10, 16, 2), mseed).unwrap();
            let mut dl = Vec::new();
            let mut dp = Vec::new();
            for (i, g) in ds.graphs().iter().enumerate() {
                let full = run_forward(&model, g).unwrap();
                let y = full.predicted_class(0);
                let drop = |e: &Explanation| {
                    let t = run_forward(&model, &g.without_edges(&e.edge_set())).unwrap();
                    (full.logits[[0, y]] - t.logits[[0, y]], full.probs[[0, y]] - t.probs[[0, y]])
                };
                let attr = attribute(&model, g, AttributionOptions::default()).unwrap();
                let (ol, op) = drop(&extract_explanation(&attr, g, 0.7, y).unwrap());
                let (mut rl, mut rp) = (0.0, 0.0);
                for s in 0..5u64 {
                    let (l, p) = drop(&random_explanation(g, 0.7, y, s * 7919 + i as u64).unwrap());
                    rl += l / 5.0;
                    rp += p / 5.0;
                }
                dl.push(ol - rl);
                dp.push(op - rp);
            }
            logit_wins += usize::from(z_score(&dl) >= 3.0);
            prob_wins += usize::from(z_score(&dp) >= 3.0);
        }
        parts.push(format!("{arch} logit {logit_wins}/{models}, prob {prob_wins}/{models}"));
    }
    format!("model draws with a >= 3 SE top-30% advantage: {}", parts.join("; "))
}

fn z_score(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    m / (sd / n.sqrt())
}

fn metric_units() -> Outcome {
    let model = reference_model(Arch::Gcn, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 8, 3);
    let empty = Explanation::from_edges(&g, Vec::new(), 0);
    let f0 = fidelity(&model, &g, &empty).unwrap();

    let s = |e: Vec<f64>, c| EmbeddedSample {
        embedding: e,
        true_class: c,
        predicted_class: c,
    };
    let same = [s(vec![0.3, -1.0], 0), s(vec![0.3, -1.0], 1)];
    let d0 = discriminability(&same, 0, 1).unwrap();
    let orth = [s(vec![1.0, 0.0], 0), s(vec![1.0, 0.0], 0), s(vec![0.0, 1.0], 1)];
    let d1 = discriminability(&orth, 0, 1).unwrap();

    let path = Graph::from_edges(12, &(0..11).map(|i| (i, i + 1)).collect::<Vec<_>>(), false, Array2::ones((12, 2))).unwrap();
    let one = |u: usize| ScoredEdge { u, v: u + 1, score: 1.0 };
    let identical: Vec<_> = (0..6).map(|i| Explanation::from_edges(&path, vec![one(i)], 0)).collect();
    let s_same = stability(&identical, 1).unwrap();
    // paths of different lengths are pairwise non-isomorphic
    let distinct: Vec<_> = (1..=6)
        .map(|len| Explanation::from_edges(&path, (0..len).map(one).collect(), 0))
        .collect();
    let n = distinct.len();
    let s_distinct: Vec<f64> = (1..=n).map(|k| stability(&distinct, k).unwrap()).collect();
    let distinct_ok = s_distinct.iter().enumerate().all(|(k, v)| (v - (k + 1) as f64 / n as f64).abs() < 1e-12);
    let pass = f0 == 0.0 && d0 == 0.0 && (d1 - 2f64.sqrt()).abs() <= 1e-12 && s_same == 1.0 && distinct_ok;
    outcome(
        pass,
        format!(
            "fidelity(empty) = {f0}, disc(same) = {d0}, disc(orth) - sqrt2 = {:.1e}, stab(same, 1) = {s_same}, stab(distinct, k) = k/{n}: {distinct_ok}",
            d1 - 2f64.sqrt()
        ),
    )
}

fn runtime() -> Outcome {
    let ds = generate_ba2motifs(1, 25, 3).unwrap();
    let g = &ds.graphs()[0];
    let model = random_model(&RandomModelConfig::reference(Arch::Gcn, 10, 20, 2), 1).unwrap();
    let start = Instant::now();
    let r = attribute(&model, g, AttributionOptions::default()).unwrap();
    let elapsed = start.elapsed();
    outcome(
        elapsed <= Duration::from_secs(1) && r.relative_residual(0) < 1e-6,
        format!("{} nodes, {} edges, 3 conv layers: {elapsed:.2?} (limit 1s)", g.num_nodes(), g.num_edges()),
    )
}

fn main() {
    let (recon, conserve) = reconstruction_and_conservation();
    let results = [
        ("toy-example exactness", toy_examples()),
        ("expansion counts", term_counts()),
        ("reconstruction identity", recon),
        ("per-slot conservation", conserve),
        ("completeness axiom", completeness()),
        ("oracle equivalence", oracle_equivalence()),
        ("fidelity dominance", fidelity_dominance()),
        ("metric unit checks", metric_units()),
        ("runtime order", runtime()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("INFO fidelity robustness: {}", fidelity_robustness());
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
