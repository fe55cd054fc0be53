//! Edge attribution over the exact expansion.
//!
//! For every term class the contribution of each variable entry is obtained
//! with one forward pass over the chain and one reverse (adjoint) pass: the
//! term is linear in any single slot's factor, so `entry · adjoint` at that
//! slot gives the sum of all scalar products holding the entry there. Shares
//! are occurrence-weighted (`1 / #variables` per occurrence), pattern shares
//! are spread equally over the inputs that can reach the pattern, and the
//! zero-input baseline's pattern shares are subtracted so the scores add up
//! to `f(G) - f(0, 0)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{
    apply_op, enumerate_terms, origin_matrix, pattern, weight_matrix, Op, Origin, SlotId, TermClass,
    VariableMode,
};
use crate::forward::{run_forward, run_zero_baseline, ForwardTrace, LayerId};
use crate::graph::{Edge, Graph};
use crate::model::{ModelSpec, Pooling};
use crate::par::Executor;

/// Per-entry contributions of one slot of one term at one output entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotContribution {
    pub term: String,
    pub slot: SlotId,
    /// `N×N` for adjacency slots, the layer's shape for patterns, `N×d` for features.
    pub entries: Array2<f64>,
}

/// Output entry being explained: `row` is ignored for pooled models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputEntry {
    pub row: usize,
    pub class: usize,
}

fn seed(shape: (usize, usize), at: OutputEntry) -> Array2<f64> {
    let mut g = Array2::zeros(shape);
    let r = if shape.0 == 1 { 0 } else { at.row };
    g[[r, at.class]] = 1.0;
    g
}

/// Forward partials and adjoint sweep over a term chain, returning every
/// slot's per-entry contributions (feature slot included for feature-origin terms).
pub fn sweep_term(
    model: &ModelSpec,
    term: &TermClass,
    trace: &ForwardTrace,
    at: OutputEntry,
) -> Result<Vec<SlotContribution>> {
    trace.check_model(model)?;
    let mut states = Vec::with_capacity(term.ops.len() + 1);
    states.push(origin_matrix(model, term, trace));
    for op in &term.ops {
        let next = apply_op(model, trace, op, states.last().expect("non-empty"));
        states.push(next);
    }
    let out_shape = states.last().expect("non-empty").dim();
    if at.class >= out_shape.1 || (out_shape.0 > 1 && at.row >= out_shape.0) {
        return Err(Error::InvalidArgument(format!(
            "output entry ({}, {}) outside output shape {out_shape:?}",
            at.row, at.class
        )));
    }
    let mut g = seed(out_shape, at);
    let mut out = Vec::new();
    for (k, op) in term.ops.iter().enumerate().rev() {
        let input = &states[k];
        match op {
            Op::Propagate { layer } => {
                let m = &trace.propagation;
                let entries = m * &g.dot(&input.t());
                out.push(SlotContribution {
                    term: term.signature().to_string(),
                    slot: SlotId::Adjacency { layer: *layer },
                    entries,
                });
                g = m.t().dot(&g);
            }
            Op::Scale(c) => g *= *c,
            Op::Weight(w) => g = g.dot(&weight_matrix(model, *w).t()),
            Op::Pattern(id) => {
                let p = pattern(trace, *id);
                out.push(SlotContribution {
                    term: term.signature().to_string(),
                    slot: SlotId::Pattern(*id),
                    entries: p * input * &g,
                });
                g = p * &g;
            }
            Op::Pool => {
                let n = input.nrows() as f64;
                g = g.broadcast(input.dim()).expect("pool broadcast").mapv(|v| v / n);
            }
        }
    }
    if term.origin == Origin::Features {
        out.push(SlotContribution {
            term: term.signature().to_string(),
            slot: SlotId::Feature,
            entries: &trace.features * &g,
        });
    }
    out.reverse();
    Ok(out)
}

/// Per-entry contributions of a single slot. Entries sum to the term's value at `at`.
pub fn slot_sweep(
    model: &ModelSpec,
    term: &TermClass,
    trace: &ForwardTrace,
    slot: SlotId,
    at: OutputEntry,
) -> Result<SlotContribution> {
    sweep_term(model, term, trace, at)?
        .into_iter()
        .find(|s| s.slot == slot)
        .ok_or_else(|| Error::SlotNotInTerm {
            term: term.signature().to_string(),
            slot: slot.to_string(),
        })
}

/// `I_ν` for every adjacency, pattern and (optionally) feature entry, before
/// pattern shares are passed on to inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableContributions {
    pub adjacency: Array2<f64>,
    pub patterns: BTreeMap<LayerId, Array2<f64>>,
    pub features: Option<Array2<f64>>,
    /// Value of each term at the explained entry, enumeration order.
    pub term_values: Vec<f64>,
}

impl VariableContributions {
    pub fn total(&self) -> f64 {
        self.adjacency.sum()
            + self.patterns.values().map(|p| p.sum()).sum::<f64>()
            + self.features.as_ref().map_or(0.0, |f| f.sum())
    }
}

pub fn variable_contributions(
    model: &ModelSpec,
    terms: &[TermClass],
    trace: &ForwardTrace,
    at: OutputEntry,
    mode: VariableMode,
) -> Result<VariableContributions> {
    let n = trace.num_nodes();
    let mut adjacency = Array2::zeros((n, n));
    let mut patterns: BTreeMap<LayerId, Array2<f64>> = BTreeMap::new();
    let mut features = mode
        .features_as_variables
        .then(|| Array2::zeros(trace.features.dim()));
    let mut term_values = Vec::with_capacity(terms.len());
    for term in terms {
        let sweeps = sweep_term(model, term, trace, at)?;
        let value = sweeps.first().map(|s| s.entries.sum());
        let count = term.num_variables(mode);
        term_values.push(match value {
            Some(v) => v,
            None => {
                let s = crate::expansion::evaluate_term(model, term, trace)?;
                let r = if s.nrows() == 1 { 0 } else { at.row };
                s[[r, at.class]]
            }
        });
        if count == 0 {
            continue;
        }
        let share = 1.0 / count as f64;
        for s in sweeps {
            match s.slot {
                SlotId::Adjacency { .. } => adjacency.scaled_add(share, &s.entries),
                SlotId::Pattern(id) => patterns
                    .entry(id)
                    .or_insert_with(|| Array2::zeros(s.entries.dim()))
                    .scaled_add(share, &s.entries),
                SlotId::Feature => {
                    if let Some(f) = features.as_mut() {
                        f.scaled_add(share, &s.entries);
                    }
                }
            }
        }
    }
    Ok(VariableContributions {
        adjacency,
        patterns,
        features,
        term_values,
    })
}

/// Directed adjacency entries lying on some path of length `<= r` that starts
/// at `node`. Distances are taken on the undirected skeleton; self-loops are excluded.
pub fn hop_neighborhood(graph: &Graph, node: usize, r: usize) -> Vec<(usize, usize)> {
    let dist = bfs_distances(graph, node);
    entries_within(graph, &dist, r)
}

fn bfs_distances(graph: &Graph, source: usize) -> Vec<usize> {
    let n = graph.num_nodes();
    let a = graph.adjacency();
    let mut dist = vec![usize::MAX; n];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if (a[[u, v]] != 0.0 || a[[v, u]] != 0.0) && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn entries_within(graph: &Graph, dist: &[usize], r: usize) -> Vec<(usize, usize)> {
    if r == 0 {
        return Vec::new();
    }
    let a = graph.adjacency();
    let mut out = Vec::new();
    for ((i, j), &v) in a.indexed_iter() {
        if v != 0.0 && i != j && dist[i].min(dist[j]) < r {
            out.push((i, j));
        }
    }
    out
}

/// Inputs that can influence each pattern entry.
struct InfluenceSets {
    /// `by_radius[r - 1][a]`: adjacency entries within `r` hops of node `a`.
    by_radius: Vec<Vec<Vec<(usize, usize)>>>,
    all_entries: Vec<(usize, usize)>,
    nonzero_features: Vec<Vec<usize>>,
}

impl InfluenceSets {
    fn new(graph: &Graph, max_radius: usize) -> Self {
        let n = graph.num_nodes();
        let dists: Vec<Vec<usize>> = (0..n).map(|a| bfs_distances(graph, a)).collect();
        let by_radius = (1..=max_radius)
            .map(|r| dists.iter().map(|d| entries_within(graph, d, r)).collect())
            .collect();
        let all_entries = graph
            .adjacency()
            .indexed_iter()
            .filter(|((i, j), &v)| v != 0.0 && i != j)
            .map(|(ij, _)| ij)
            .collect();
        let nonzero_features = graph
            .features()
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(k, _)| k).collect())
            .collect();
        InfluenceSets {
            by_radius,
            all_entries,
            nonzero_features,
        }
    }
}

/// Input-level scores for one output entry, before folding.
struct InputScores {
    adjacency: Array2<f64>,
    features: Option<Array2<f64>>,
    unassigned: f64,
}

/// Passes each pattern entry's share on, equally, to the adjacency entries within
/// its hop radius and (in feature mode) the node's non-zero features.
fn redistribute(
    patterns: &BTreeMap<LayerId, Array2<f64>>,
    sets: &InfluenceSets,
    num_conv: usize,
    pooled: bool,
    mode: VariableMode,
    out: &mut InputScores,
    sign: f64,
) {
    for (id, shares) in patterns {
        let radius = match id {
            LayerId::Conv { layer, .. } => layer + 1,
            LayerId::Classifier { .. } => num_conv,
        };
        let global = pooled && matches!(id, LayerId::Classifier { .. });
        for (a, row) in shares.axis_iter(Axis(0)).enumerate() {
            let total = row.sum();
            if total == 0.0 {
                continue;
            }
            let entries: &[(usize, usize)] = if global {
                &sets.all_entries
            } else {
                &sets.by_radius[radius - 1][a]
            };
            let feature_count = match (mode.features_as_variables, global) {
                (false, _) => 0,
                (true, false) => sets.nonzero_features[a].len(),
                (true, true) => sets.nonzero_features.iter().map(Vec::len).sum(),
            };
            let count = entries.len() + feature_count;
            if count == 0 {
                out.unassigned += sign * total;
                continue;
            }
            let share = sign * total / count as f64;
            for &(i, j) in entries {
                out.adjacency[[i, j]] += share;
            }
            if let Some(f) = out.features.as_mut() {
                if global {
                    for (node, ks) in sets.nonzero_features.iter().enumerate() {
                        for &k in ks {
                            f[[node, k]] += share;
                        }
                    }
                } else {
                    for &k in &sets.nonzero_features[a] {
                        f[[a, k]] += share;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionOptions {
    pub features_as_variables: bool,
    pub calibrate: bool,
    /// Output row for node-classification models; must be `None` for pooled models.
    pub target_row: Option<usize>,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        AttributionOptions {
            features_as_variables: false,
            calibrate: true,
            target_row: None,
        }
    }
}

impl AttributionOptions {
    pub fn variable_mode(&self) -> VariableMode {
        VariableMode {
            features_as_variables: self.features_as_variables,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub u: usize,
    pub v: usize,
    pub score_per_class: Vec<f64>,
}

impl EdgeScore {
    pub fn edge(&self) -> Edge {
        Edge::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMode {
    pub features_as_variables: bool,
    pub calibrated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub edges: Vec<EdgeScore>,
    /// Per node, per class: shares of the propagation matrix's diagonal (self-loops).
    pub diagonal: Vec<Vec<f64>>,
    /// Per node, per feature, per class; present only when features are variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
    /// Per class: pattern shares with no input in reach (isolated, featureless nodes).
    pub unassigned: Vec<f64>,
    /// Per class: `|Σ scores - (f(G) - f(0,0))|`.
    pub residual: Vec<f64>,
    pub mode: AttributionMode,
    /// `f(G)` at the explained row.
    pub output: Vec<f64>,
    /// `f(0, 0)` at the explained row.
    pub baseline: Vec<f64>,
}

impl AttributionResult {
    pub fn num_classes(&self) -> usize {
        self.output.len()
    }

    pub fn edge_score(&self, edge: Edge, class: usize) -> Option<f64> {
        self.edges
            .iter()
            .find(|e| e.u == edge.u && e.v == edge.v)
            .map(|e| e.score_per_class[class])
    }

    /// Sum of every reported score for `class`.
    pub fn total(&self, class: usize) -> f64 {
        let edges: f64 = self.edges.iter().map(|e| e.score_per_class[class]).sum();
        let diag: f64 = self.diagonal.iter().map(|d| d[class]).sum();
        let feats: f64 = self
            .features
            .iter()
            .flatten()
            .flatten()
            .map(|per_class| per_class[class])
            .sum();
        edges + diag + feats + self.unassigned[class]
    }

    /// Residual relative to the magnitude of the outputs involved.
    pub fn relative_residual(&self, class: usize) -> f64 {
        let scale = self.output[class]
            .abs()
            .max(self.baseline[class].abs())
            .max((self.output[class] - self.baseline[class]).abs())
            .max(f64::MIN_POSITIVE);
        self.residual[class] / scale
    }
}

/// Everything `attribute` computes for one graph, reusable across calls.
pub struct Attributor<'m> {
    model: &'m ModelSpec,
    terms: Vec<TermClass>,
}

impl<'m> Attributor<'m> {
    pub fn new(model: &'m ModelSpec) -> Result<Self> {
        Ok(Attributor {
            model,
            terms: enumerate_terms(model)?,
        })
    }

    pub fn terms(&self) -> &[TermClass] {
        &self.terms
    }

    pub fn attribute(&self, graph: &Graph, options: AttributionOptions) -> Result<AttributionResult> {
        let model = self.model;
        let n = graph.num_nodes();
        let pooled = model.pooling == Pooling::Mean;
        let row = match (pooled, options.target_row) {
            (true, None) => 0,
            (true, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "target_row applies to node-classification models only".into(),
                ))
            }
            (false, None) => {
                return Err(Error::InvalidArgument(
                    "node-classification models need a target_row".into(),
                ))
            }
            (false, Some(m)) if m >= n => {
                return Err(Error::InvalidArgument(format!("target_row {m} >= {n} nodes")))
            }
            (false, Some(m)) => m,
        };
        let mode = options.variable_mode();
        let trace = run_forward(model, graph)?;
        let baseline = run_zero_baseline(model, n, graph.feature_dim())?;
        let sets = InfluenceSets::new(graph, model.num_conv());
        let out_row = if pooled { 0 } else { row };
        let num_classes = model.num_classes;

        let mut diagonal = vec![vec![0.0; num_classes]; n];
        let mut edge_map: BTreeMap<Edge, Vec<f64>> =
            graph.edges().into_iter().map(|e| (e, vec![0.0; num_classes])).collect();
        let mut features = mode
            .features_as_variables
            .then(|| vec![vec![vec![0.0; num_classes]; graph.feature_dim()]; n]);
        let mut unassigned = vec![0.0; num_classes];
        let mut residual = vec![0.0; num_classes];

        for class in 0..num_classes {
            let at = OutputEntry { row, class };
            let vc = variable_contributions(model, &self.terms, &trace, at, mode)?;
            let mut scores = InputScores {
                adjacency: vc.adjacency.clone(),
                features: vc.features.clone(),
                unassigned: 0.0,
            };
            redistribute(&vc.patterns, &sets, model.num_conv(), pooled, mode, &mut scores, 1.0);
            if options.calibrate {
                let base = variable_contributions(model, &self.terms, &baseline, at, mode)?;
                // zero inputs: only pattern shares survive
                scores.adjacency -= &base.adjacency;
                if let (Some(f), Some(b)) = (scores.features.as_mut(), base.features.as_ref()) {
                    *f -= b;
                }
                redistribute(&base.patterns, &sets, model.num_conv(), pooled, mode, &mut scores, -1.0);
            }

            for (i, d) in diagonal.iter_mut().enumerate() {
                d[class] = scores.adjacency[[i, i]];
            }
            for (e, s) in edge_map.iter_mut() {
                s[class] = if graph.is_directed() {
                    scores.adjacency[[e.u, e.v]]
                } else {
                    scores.adjacency[[e.u, e.v]] + scores.adjacency[[e.v, e.u]]
                };
            }
            if let (Some(out), Some(f)) = (features.as_mut(), scores.features.as_ref()) {
                for ((i, k), &v) in f.indexed_iter() {
                    out[i][k][class] = v;
                }
            }
            unassigned[class] = scores.unassigned;
            let total = scores.adjacency.sum() + scores.features.as_ref().map_or(0.0, |f| f.sum()) + scores.unassigned;
            let target = trace.logits[[out_row, class]] - baseline.logits[[out_row, class]];
            residual[class] = (total - target).abs();
        }

        Ok(AttributionResult {
            edges: edge_map
                .into_iter()
                .map(|(e, s)| EdgeScore {
                    u: e.u,
                    v: e.v,
                    score_per_class: s,
                })
                .collect(),
            diagonal,
            features,
            unassigned,
            residual,
            mode: AttributionMode {
                features_as_variables: options.features_as_variables,
                calibrated: options.calibrate,
                target_row: options.target_row,
            },
            output: trace.logits.row(out_row).to_vec(),
            baseline: baseline.logits.row(out_row).to_vec(),
        })
    }
}

pub fn attribute(model: &ModelSpec, graph: &Graph, options: AttributionOptions) -> Result<AttributionResult> {
    Attributor::new(model)?.attribute(graph, options)
}

/// Attributes every graph independently; results keep input order.
pub fn attribute_all(
    model: &ModelSpec,
    graphs: &[Graph],
    options: AttributionOptions,
    exec: &Executor,
) -> Result<Vec<Result<AttributionResult>>> {
    let attributor = Attributor::new(model)?;
    Ok(exec.map(graphs, |g| attributor.attribute(g, options)))
}

/// Undirected edges touching `node`, used by the isolated-node checks.
pub fn incident_edges(graph: &Graph, node: usize) -> BTreeSet<Edge> {
    graph.edges().into_iter().filter(|e| e.u == node || e.v == node).collect()
}
