//! Explanation extraction and evaluation: fidelity over sparsity levels,
//! discriminability of explanation embeddings and stability of explanation shapes.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionOptions, AttributionResult, Attributor};
use crate::error::{Error, Result};
use crate::forward::run_forward;
use crate::graph::{Dataset, Edge, Graph};
use crate::model::{ModelSpec, Pooling};
use crate::par::Executor;

pub const WL_ROUNDS: usize = 3;
const FEATURE_QUANTUM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub u: usize,
    pub v: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub graph_id: usize,
    /// Selected edges, sorted by score (descending) then lexicographically.
    pub edges: Vec<ScoredEdge>,
    pub num_graph_edges: usize,
    pub sparsity: f64,
    pub predicted_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_row: Option<usize>,
    /// WL hash of the explanation subgraph; equal shapes share a value.
    pub canonical: u64,
}

impl Explanation {
    pub fn edge_set(&self) -> Vec<Edge> {
        self.edges.iter().map(|e| Edge::new(e.u, e.v)).collect()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn with_graph_id(mut self, id: usize) -> Self {
        self.graph_id = id;
        self
    }

    /// Explanation over `edges` as given (no ranking), e.g. a random baseline.
    pub fn from_edges(graph: &Graph, edges: Vec<ScoredEdge>, predicted_class: usize) -> Self {
        let set: Vec<Edge> = edges.iter().map(|e| Edge::new(e.u, e.v)).collect();
        let total = graph.num_edges();
        Explanation {
            graph_id: 0,
            sparsity: if total == 0 { 0.0 } else { 1.0 - set.len() as f64 / total as f64 },
            canonical: wl_hash(graph, &set),
            edges,
            num_graph_edges: total,
            predicted_class,
            target_row: None,
        }
    }
}

/// Number of edges kept at `sparsity`: `⌈(1 − sparsity)·|E|⌉`, robust to float noise.
pub fn edges_to_keep(num_edges: usize, sparsity: f64) -> usize {
    let k = ((1.0 - sparsity) * num_edges as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(num_edges)
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity {sparsity} outside [0, 1)")));
    }
    Ok(())
}

pub fn extract_explanation(
    attr: &AttributionResult,
    graph: &Graph,
    sparsity: f64,
    class: usize,
) -> Result<Explanation> {
    check_sparsity(sparsity)?;
    if graph.num_edges() == 0 {
        return Err(Error::EmptyGraph);
    }
    if class >= attr.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class} >= {} classes",
            attr.num_classes()
        )));
    }
    let mut ranked: Vec<ScoredEdge> = attr
        .edges
        .iter()
        .map(|e| ScoredEdge {
            u: e.u,
            v: e.v,
            score: e.score_per_class[class],
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.u, a.v).cmp(&(b.u, b.v))));
    ranked.truncate(edges_to_keep(graph.num_edges(), sparsity));
    let mut expl = Explanation::from_edges(graph, ranked, class);
    expl.target_row = attr.mode.target_row;
    Ok(expl)
}

/// Uniformly random edge subset of the size `extract_explanation` would keep.
pub fn random_explanation(graph: &Graph, sparsity: f64, predicted_class: usize, seed: u64) -> Result<Explanation> {
    check_sparsity(sparsity)?;
    let all = graph.edges();
    if all.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), edges_to_keep(all.len(), sparsity)).into_vec();
    picked.sort_unstable();
    let edges = picked
        .into_iter()
        .map(|k| ScoredEdge {
            u: all[k].u,
            v: all[k].v,
            score: 0.0,
        })
        .collect();
    Ok(Explanation::from_edges(graph, edges, predicted_class))
}

/// Drop in the predicted class's probability when the explanation's edges are removed.
pub fn fidelity(model: &ModelSpec, graph: &Graph, expl: &Explanation) -> Result<f64> {
    let row = output_row(model, expl.target_row)?;
    let full = run_forward(model, graph)?;
    let y = full.predicted_class(row);
    let reduced = run_forward(model, &graph.without_edges(&expl.edge_set()))?;
    Ok(full.probs[[row, y]] - reduced.probs[[row, y]])
}

fn output_row(model: &ModelSpec, target_row: Option<usize>) -> Result<usize> {
    match (model.pooling, target_row) {
        (Pooling::Mean, _) => Ok(0),
        (Pooling::None, Some(r)) => Ok(r),
        (Pooling::None, None) => Err(Error::InvalidArgument(
            "node-classification models need a target row".into(),
        )),
    }
}

/// Which representation of the explanation subgraph is used as its embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPoint {
    /// Pooled output of the last message-passing layer.
    #[default]
    Pooled,
    /// Output of the first classifier layer.
    FirstClassifier,
}

pub fn embed_subgraph(model: &ModelSpec, graph: &Graph, expl: &Explanation, point: EmbeddingPoint) -> Result<Array1<f64>> {
    let row = output_row(model, expl.target_row)?;
    let trace = run_forward(model, &graph.with_only_edges(&expl.edge_set()))?;
    Ok(match point {
        EmbeddingPoint::Pooled => trace.embedding(row),
        EmbeddingPoint::FirstClassifier => trace.first_classifier_output(row),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSample {
    pub embedding: Vec<f64>,
    pub true_class: usize,
    pub predicted_class: usize,
}

/// L2 distance between the mean embeddings of correctly predicted samples of `c1` and `c2`.
pub fn discriminability(samples: &[EmbeddedSample], c1: usize, c2: usize) -> Result<f64> {
    let mean = |c: usize| -> Result<Vec<f64>> {
        let members: Vec<&EmbeddedSample> = samples
            .iter()
            .filter(|s| s.true_class == c && s.predicted_class == c)
            .collect();
        let first = members.first().ok_or(Error::EmptyClass(c))?;
        let mut acc = vec![0.0; first.embedding.len()];
        for s in &members {
            if s.embedding.len() != acc.len() {
                return Err(Error::DimensionMismatch("embeddings of different lengths".into()));
            }
            for (a, v) in acc.iter_mut().zip(&s.embedding) {
                *a += v;
            }
        }
        Ok(acc.into_iter().map(|a| a / members.len() as f64).collect())
    };
    let (m1, m2) = (mean(c1)?, mean(c2)?);
    if m1.len() != m2.len() {
        return Err(Error::DimensionMismatch("class means of different lengths".into()));
    }
    Ok(m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

fn quantize(x: f64) -> i64 {
    (x / FEATURE_QUANTUM).round() as i64
}

fn hash_of<T: Hash>(value: &T) -> u64 {
    let mut h = DefaultHasher::new();
    value.hash(&mut h);
    h.finish()
}

/// Weisfeiler-Leman hash of the subgraph formed by `edges` and their endpoints,
/// with quantized node features as initial labels.
pub fn wl_hash(graph: &Graph, edges: &[Edge]) -> u64 {
    let nodes: BTreeSet<usize> = edges.iter().flat_map(|e| [e.u, e.v]).collect();
    let index: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
    let mut neighbors = vec![Vec::new(); nodes.len()];
    for e in edges {
        let (a, b) = (index[&e.u], index[&e.v]);
        neighbors[a].push(b);
        if !graph.is_directed() {
            neighbors[b].push(a);
        }
    }
    let x = graph.features();
    let mut labels: Vec<u64> = nodes
        .iter()
        .map(|&n| hash_of(&x.row(n).iter().map(|&v| quantize(v)).collect::<Vec<_>>()))
        .collect();
    for _ in 0..WL_ROUNDS {
        labels = (0..labels.len())
            .map(|k| {
                let mut around: Vec<u64> = neighbors[k].iter().map(|&j| labels[j]).collect();
                around.sort_unstable();
                hash_of(&(labels[k], around))
            })
            .collect();
    }
    labels.sort_unstable();
    hash_of(&(graph.is_directed(), edges.len(), labels))
}

/// Share of all explanations covered by the `k` most common explanation shapes.
pub fn stability(explanations: &[Explanation], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("stability needs k >= 1".into()));
    }
    if explanations.is_empty() {
        return Ok(0.0);
    }
    let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
    for e in explanations {
        *groups.entry(e.canonical).or_insert(0) += 1;
    }
    let mut sizes: Vec<usize> = groups.into_values().collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let covered: usize = sizes.iter().take(k).sum();
    Ok(covered as f64 / explanations.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub sparsities: Vec<f64>,
    pub attribution: AttributionOptions,
    pub fidelity: bool,
    pub discriminability: bool,
    /// Largest `k` reported for stability; 0 skips stability.
    pub stability_max_k: usize,
    pub embedding: EmbeddingPoint,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            sparsities: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            attribution: AttributionOptions::default(),
            fidelity: true,
            discriminability: false,
            stability_max_k: 0,
            embedding: EmbeddingPoint::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub graph: usize,
    pub sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub predicted_class: usize,
    pub num_edges: usize,
    pub selected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub canonical: u64,
    pub max_relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub sparsity: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityPoint {
    pub sparsity: f64,
    pub c1: usize,
    pub c2: usize,
    /// `None` when a class has no correctly predicted sample.
    pub value: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub sparsity: f64,
    pub k: usize,
    pub value: f64,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fidelity: Vec<FidelityPoint>,
    pub discriminability: Vec<DiscriminabilityPoint>,
    pub stability: Vec<StabilityPoint>,
    pub samples: Vec<SampleRecord>,
    /// Graphs without edges, which have nothing to explain.
    pub skipped_graphs: Vec<usize>,
    pub num_graphs: usize,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per sample per sparsity; embedding coordinates as trailing columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.csv_to(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn csv_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        let dim = self
            .samples
            .iter()
            .find_map(|s| s.embedding.as_ref().map(Vec::len))
            .unwrap_or(0);
        write!(out, "graph,sparsity,label,predicted_class,num_edges,selected,fidelity,canonical,max_relative_residual")?;
        for k in 0..dim {
            write!(out, ",emb{k}")?;
        }
        writeln!(out)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for s in &self.samples {
            write!(
                out,
                "{},{},{},{},{},{},{},{:016x},{:e}",
                s.graph,
                s.sparsity,
                opt(s.label.map(|l| l.to_string())),
                s.predicted_class,
                s.num_edges,
                s.selected,
                opt(s.fidelity.map(|f| f.to_string())),
                s.canonical,
                s.max_relative_residual
            )?;
            for k in 0..dim {
                let v = s.embedding.as_ref().and_then(|e| e.get(k)).map(|v| v.to_string());
                write!(out, ",{}", opt(v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

struct GraphOutcome {
    records: Vec<SampleRecord>,
    explanations: Vec<Explanation>,
}

fn evaluate_graph(
    model: &ModelSpec,
    attributor: &Attributor,
    graph: &Graph,
    id: usize,
    cfg: &MetricsConfig,
) -> Result<Option<GraphOutcome>> {
    if graph.num_edges() == 0 {
        return Ok(None);
    }
    let attr = attributor.attribute(graph, cfg.attribution)?;
    let full = run_forward(model, graph)?;
    let row = output_row(model, cfg.attribution.target_row)?;
    let y = full.predicted_class(row);
    let residual = (0..attr.num_classes())
        .map(|c| attr.relative_residual(c))
        .fold(0.0, f64::max);
    let mut records = Vec::with_capacity(cfg.sparsities.len());
    let mut explanations = Vec::with_capacity(cfg.sparsities.len());
    for &s in &cfg.sparsities {
        let expl = extract_explanation(&attr, graph, s, y)?.with_graph_id(id);
        let fid = if cfg.fidelity {
            let reduced = run_forward(model, &graph.without_edges(&expl.edge_set()))?;
            Some(full.probs[[row, y]] - reduced.probs[[row, y]])
        } else {
            None
        };
        let embedding = if cfg.discriminability {
            Some(embed_subgraph(model, graph, &expl, cfg.embedding)?.to_vec())
        } else {
            None
        };
        records.push(SampleRecord {
            graph: id,
            sparsity: s,
            label: graph.label(),
            predicted_class: y,
            num_edges: expl.num_graph_edges,
            selected: expl.len(),
            fidelity: fid,
            embedding,
            canonical: expl.canonical,
            max_relative_residual: residual,
        });
        explanations.push(expl);
    }
    Ok(Some(GraphOutcome { records, explanations }))
}

/// Attributes every graph, extracts explanations at each sparsity and computes
/// the requested metrics. Per-graph work runs on `exec`; aggregation order is fixed.
pub fn evaluate(model: &ModelSpec, dataset: &Dataset, cfg: &MetricsConfig, exec: &Executor) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    if model.pooling != Pooling::Mean {
        return Err(Error::InvalidArgument(
            "dataset metrics need a graph-level (pooled) model".into(),
        ));
    }
    for &s in &cfg.sparsities {
        check_sparsity(s)?;
    }
    let attributor = Attributor::new(model)?;
    let outcomes = exec.map_range(dataset.len(), |i| {
        evaluate_graph(model, &attributor, &dataset.graphs()[i], i, cfg)
    });
    let mut report = MetricsReport {
        fidelity: Vec::new(),
        discriminability: Vec::new(),
        stability: Vec::new(),
        samples: Vec::new(),
        skipped_graphs: Vec::new(),
        num_graphs: dataset.len(),
    };
    let mut per_sparsity: Vec<Vec<Explanation>> = vec![Vec::new(); cfg.sparsities.len()];
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            None => report.skipped_graphs.push(i),
            Some(o) => {
                report.samples.extend(o.records);
                for (k, e) in o.explanations.into_iter().enumerate() {
                    per_sparsity[k].push(e);
                }
            }
        }
    }
    for (k, &s) in cfg.sparsities.iter().enumerate() {
        let at_s: Vec<&SampleRecord> = report.samples.iter().filter(|r| r.sparsity == s).collect();
        if cfg.fidelity {
            let values: Vec<f64> = at_s.iter().filter_map(|r| r.fidelity).collect();
            let (mean, std) = mean_std(&values);
            report.fidelity.push(FidelityPoint {
                sparsity: s,
                mean,
                std,
                count: values.len(),
            });
        }
        if cfg.discriminability {
            let samples: Vec<EmbeddedSample> = at_s
                .iter()
                .filter_map(|r| {
                    Some(EmbeddedSample {
                        embedding: r.embedding.clone()?,
                        true_class: r.label?,
                        predicted_class: r.predicted_class,
                    })
                })
                .collect();
            for c1 in 0..dataset.num_classes() {
                for c2 in c1 + 1..dataset.num_classes() {
                    let value = match discriminability(&samples, c1, c2) {
                        Ok(v) => Some(v),
                        Err(Error::EmptyClass(_)) => None,
                        Err(e) => return Err(e),
                    };
                    report.discriminability.push(DiscriminabilityPoint {
                        sparsity: s,
                        c1,
                        c2,
                        value,
                        samples: samples.len(),
                    });
                }
            }
        }
        if cfg.stability_max_k > 0 {
            let expl = &per_sparsity[k];
            let groups: BTreeSet<u64> = expl.iter().map(|e| e.canonical).collect();
            for kk in 1..=cfg.stability_max_k {
                report.stability.push(StabilityPoint {
                    sparsity: s,
                    k: kk,
                    value: stability(expl, kk)?,
                    groups: groups.len(),
                });
            }
        }
    }
    Ok(report)
}

/// Fidelity at each sparsity, mean ± std over the dataset.
pub fn fidelity_curve(model: &ModelSpec, dataset: &Dataset, sparsities: &[f64], exec: &Executor) -> Result<MetricsReport> {
    let cfg = MetricsConfig {
        sparsities: sparsities.to_vec(),
        ..MetricsConfig::default()
    };
    evaluate(model, dataset, &cfg, exec)
}
