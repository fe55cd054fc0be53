//! Exact expansion of a model's output into term classes.
//!
//! A term class is one matrix-valued summand of the activation-free expansion
//! (for a 3-layer GCN with a 2-layer classifier these are the six summands
//! `VVVXW..`, `VVB1W..`, `VB2W..`, `B3W..`, `Bc1Wc2`, `Bc2`). With the recorded
//! activation patterns multiplied in at every activated layer the classes sum
//! to the logits exactly.
//!
//! Every class is stored as a linear chain of [`Op`]s applied to an origin
//! matrix, which is what the slot sweeps in `attribution` walk forward and
//! backward.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::forward::{ForwardTrace, LayerId};
use crate::model::{Arch, ConvLayer, ModelSpec, Pooling};

/// Where a term's chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Features,
    ConvBias { layer: usize, sub: usize },
    ClassifierBias { layer: usize },
}

/// Choice made at a conv layer the chain passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Neighbourhood aggregation: `V` (GCN), `Â` (GIN) or `A · W_phi` (SAGE).
    Propagate,
    /// Self path: `eps` (GIN) or `W_psi` (SAGE).
    SelfLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightRef {
    /// Dense weight of conv layer `layer`, MLP sublayer `sub`.
    Conv { layer: usize, sub: usize },
    SageNeighbor { layer: usize },
    SageSelf { layer: usize },
    Classifier { layer: usize },
}

/// One step of a term chain, acting on the running matrix `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Op {
    /// `s <- M · s` with `M` the propagation matrix; an adjacency slot.
    Propagate { layer: usize },
    /// `s <- c · s`.
    Scale(f64),
    /// `s <- s · W`.
    Weight(WeightRef),
    /// `s <- P ⊙ s`; a pattern slot.
    Pattern(LayerId),
    /// Mean over nodes.
    Pool,
}

/// A variable position inside a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotId {
    /// Propagation factor of conv layer `layer`.
    Adjacency { layer: usize },
    Pattern(LayerId),
    Feature,
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotId::Adjacency { layer } => write!(f, "A{}", layer + 1),
            SlotId::Pattern(id) => write!(f, "P{id}"),
            SlotId::Feature => f.write_str("X"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotKind {
    Adjacency,
    Pattern,
    Feature,
}

impl SlotId {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotId::Adjacency { .. } => SlotKind::Adjacency,
            SlotId::Pattern(_) => SlotKind::Pattern,
            SlotId::Feature => SlotKind::Feature,
        }
    }
}

/// Whether node features count as variables of the scalar products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VariableMode {
    pub features_as_variables: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermClass {
    pub origin: Origin,
    /// One entry per conv layer the chain passes through after its origin.
    pub branches: Vec<(usize, Branch)>,
    pub pattern_slots: Vec<LayerId>,
    pub weight_chain: Vec<WeightRef>,
    /// Product of the GIN `eps` constants on the chain.
    pub constant_factor: f64,
    pub ops: Vec<Op>,
    signature: String,
}

impl TermClass {
    pub fn signature(&self) -> &str {
        &self.signature
    }

    pub fn adjacency_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.ops.iter().filter_map(|op| match op {
            Op::Propagate { layer } => Some(*layer),
            _ => None,
        })
    }

    /// All variable slots in chain order, the feature slot first when present.
    pub fn slots(&self, mode: VariableMode) -> Vec<SlotId> {
        let mut out = Vec::new();
        if self.origin == Origin::Features && mode.features_as_variables {
            out.push(SlotId::Feature);
        }
        for op in &self.ops {
            match op {
                Op::Propagate { layer } => out.push(SlotId::Adjacency { layer: *layer }),
                Op::Pattern(id) => out.push(SlotId::Pattern(*id)),
                _ => {}
            }
        }
        out
    }

    /// `Σ_ρ O(ρ, z)`, shared by every scalar product of the class.
    pub fn num_variables(&self, mode: VariableMode) -> usize {
        self.slots(mode).len()
    }

    pub fn has_slot(&self, slot: SlotId, mode: VariableMode) -> bool {
        self.slots(mode).contains(&slot)
    }
}

impl fmt::Display for TermClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.signature)
    }
}

/// Occurrence bookkeeping for one slot kind of a term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccurrenceCounts {
    /// Slots of the requested kind; each holds exactly one variable occurrence per product.
    pub slots: Vec<SlotId>,
    /// Total occurrences of all variables in any product of the class.
    pub denominator: usize,
}

pub fn count_occurrences(term: &TermClass, kind: SlotKind, mode: VariableMode) -> OccurrenceCounts {
    let all = term.slots(mode);
    OccurrenceCounts {
        denominator: all.len(),
        slots: all.into_iter().filter(|s| s.kind() == kind).collect(),
    }
}

fn branch_options(arch: Arch) -> &'static [Branch] {
    match arch {
        Arch::Gcn => &[Branch::Propagate],
        Arch::Gin | Arch::Sage => &[Branch::Propagate, Branch::SelfLoop],
    }
}

/// Builds the chain of ops and symbol tokens for one term.
struct ChainBuilder<'a> {
    model: &'a ModelSpec,
    ops: Vec<Op>,
    weights: Vec<WeightRef>,
    patterns: Vec<LayerId>,
    constant: f64,
    left: Vec<String>,
    right: Vec<String>,
}

impl<'a> ChainBuilder<'a> {
    fn new(model: &'a ModelSpec) -> Self {
        ChainBuilder {
            model,
            ops: Vec::new(),
            weights: Vec::new(),
            patterns: Vec::new(),
            constant: 1.0,
            left: Vec::new(),
            right: Vec::new(),
        }
    }

    fn conv_label(&self, layer: usize, sub: usize) -> String {
        if self.model.arch() == Arch::Gin {
            format!("{}.{}", layer + 1, sub + 1)
        } else {
            format!("{}", layer + 1)
        }
    }

    fn weight(&mut self, w: WeightRef) {
        let label = match w {
            WeightRef::Conv { layer, sub } => format!("W{}", self.conv_label(layer, sub)),
            WeightRef::SageNeighbor { layer } => format!("W{}phi", layer + 1),
            WeightRef::SageSelf { layer } => format!("W{}psi", layer + 1),
            WeightRef::Classifier { layer } => format!("Wc{}", layer + 1),
        };
        self.right.push(label);
        self.ops.push(Op::Weight(w));
        self.weights.push(w);
    }

    fn pattern_if_active(&mut self, id: LayerId) {
        let active = match id {
            LayerId::Conv { layer, sub } => match &self.model.conv_layers[layer] {
                ConvLayer::Gcn(d) => d.activation.is_gating(),
                ConvLayer::Sage { activation, .. } => activation.is_gating(),
                ConvLayer::Gin { mlp, .. } => mlp[sub].activation.is_gating(),
            },
            LayerId::Classifier { layer } => self.model.classifier[layer].activation.is_gating(),
        };
        if active {
            self.ops.push(Op::Pattern(id));
            self.patterns.push(id);
        }
    }

    /// Rest of conv layer `layer` from MLP sublayer `from_sub` on (weights then patterns).
    fn conv_tail(&mut self, layer: usize, from_sub: usize, branch: Branch) {
        match &self.model.conv_layers[layer] {
            ConvLayer::Gcn(_) => {
                if from_sub == 0 {
                    self.weight(WeightRef::Conv { layer, sub: 0 });
                }
                self.pattern_if_active(LayerId::Conv { layer, sub: 0 });
            }
            ConvLayer::Sage { .. } => {
                if from_sub == 0 {
                    match branch {
                        Branch::Propagate => self.weight(WeightRef::SageNeighbor { layer }),
                        Branch::SelfLoop => self.weight(WeightRef::SageSelf { layer }),
                    }
                }
                self.pattern_if_active(LayerId::Conv { layer, sub: 0 });
            }
            ConvLayer::Gin { mlp, .. } => {
                for sub in from_sub..mlp.len() {
                    self.weight(WeightRef::Conv { layer, sub });
                    self.pattern_if_active(LayerId::Conv { layer, sub });
                }
            }
        }
    }

    /// Enters conv layer `layer` with the given branch, then runs the whole layer.
    fn conv_layer(&mut self, layer: usize, branch: Branch) {
        match (branch, &self.model.conv_layers[layer]) {
            (Branch::Propagate, c) => {
                let sym = match c {
                    ConvLayer::Gcn(_) => "V",
                    ConvLayer::Gin { .. } => "Â",
                    ConvLayer::Sage { .. } => "A",
                };
                self.left.push(format!("{sym}{}", layer + 1));
                self.ops.push(Op::Propagate { layer });
            }
            (Branch::SelfLoop, ConvLayer::Gin { eps, .. }) => {
                self.left.push(format!("ε{}", layer + 1));
                self.constant *= eps;
                self.ops.push(Op::Scale(*eps));
            }
            (Branch::SelfLoop, _) => {}
        }
        // this layer's biases start their own terms
        self.conv_tail(layer, 0, branch);
    }

    fn pool_and_classifier(&mut self, from_layer: usize, include_pool: bool) {
        if include_pool && self.model.pooling == Pooling::Mean {
            self.ops.push(Op::Pool);
        }
        for k in from_layer..self.model.classifier.len() {
            self.weight(WeightRef::Classifier { layer: k });
            self.pattern_if_active(LayerId::Classifier { layer: k });
        }
    }

    fn finish(self, origin: Origin, branches: Vec<(usize, Branch)>, origin_sym: String) -> TermClass {
        let mut tokens: Vec<String> = self.left.iter().rev().cloned().collect();
        tokens.push(origin_sym);
        tokens.extend(self.right.iter().cloned());
        let pats: Vec<String> = self
            .patterns
            .iter()
            .map(|id| match *id {
                LayerId::Conv { layer, sub } => {
                    if self.model.arch() == Arch::Gin {
                        format!("{}.{}", layer + 1, sub + 1)
                    } else {
                        format!("{}", layer + 1)
                    }
                }
                LayerId::Classifier { layer } => format!("c{}", layer + 1),
            })
            .collect();
        let signature = if pats.is_empty() {
            tokens.join("·")
        } else {
            format!("{} | patterns @ {}", tokens.join("·"), pats.join(","))
        };
        TermClass {
            origin,
            branches,
            pattern_slots: self.patterns,
            weight_chain: self.weights,
            constant_factor: self.constant,
            ops: self.ops,
            signature,
        }
    }
}

/// All branch assignments for conv layers `from..L`.
fn branch_paths(arch: Arch, from: usize, num_layers: usize) -> Vec<Vec<(usize, Branch)>> {
    let mut paths = vec![Vec::new()];
    for layer in from..num_layers {
        let mut next = Vec::with_capacity(paths.len() * 2);
        for p in &paths {
            for &b in branch_options(arch) {
                let mut q = p.clone();
                q.push((layer, b));
                next.push(q);
            }
        }
        paths = next;
    }
    paths
}

/// Enumerates every term class of the model's expansion, in a fixed order:
/// feature-origin terms, then conv biases layer by layer, then classifier biases.
pub fn enumerate_terms(model: &ModelSpec) -> Result<Vec<TermClass>> {
    model.validate()?;
    let arch = model.arch();
    let num_layers = model.num_conv();
    let mut terms = Vec::new();

    for path in branch_paths(arch, 0, num_layers) {
        let mut b = ChainBuilder::new(model);
        for &(layer, branch) in &path {
            b.conv_layer(layer, branch);
        }
        b.pool_and_classifier(0, true);
        terms.push(b.finish(Origin::Features, path, "X".into()));
    }

    for (layer, conv) in model.conv_layers.iter().enumerate() {
        let subs: Vec<(usize, bool)> = match conv {
            ConvLayer::Gcn(d) => vec![(0, d.bias.is_some())],
            ConvLayer::Sage { bias, .. } => vec![(0, bias.is_some())],
            ConvLayer::Gin { mlp, .. } => mlp.iter().enumerate().map(|(k, d)| (k, d.bias.is_some())).collect(),
        };
        for (sub, has_bias) in subs {
            if !has_bias {
                continue;
            }
            for path in branch_paths(arch, layer + 1, num_layers) {
                let mut b = ChainBuilder::new(model);
                let sym = format!("B{}", b.conv_label(layer, sub));
                b.pattern_if_active(LayerId::Conv { layer, sub });
                if let ConvLayer::Gin { mlp, .. } = conv {
                    for k in sub + 1..mlp.len() {
                        b.weight(WeightRef::Conv { layer, sub: k });
                        b.pattern_if_active(LayerId::Conv { layer, sub: k });
                    }
                }
                for &(l, branch) in &path {
                    b.conv_layer(l, branch);
                }
                b.pool_and_classifier(0, true);
                terms.push(b.finish(Origin::ConvBias { layer, sub }, path, sym));
            }
        }
    }

    for (k, d) in model.classifier.iter().enumerate() {
        if d.bias.is_none() {
            continue;
        }
        let mut b = ChainBuilder::new(model);
        b.pattern_if_active(LayerId::Classifier { layer: k });
        b.pool_and_classifier(k + 1, false);
        terms.push(b.finish(Origin::ClassifierBias { layer: k }, Vec::new(), format!("Bc{}", k + 1)));
    }
    Ok(terms)
}

pub(crate) fn weight_matrix(model: &ModelSpec, w: WeightRef) -> &Array2<f64> {
    match w {
        WeightRef::Conv { layer, sub } => match &model.conv_layers[layer] {
            ConvLayer::Gcn(d) => &d.weight,
            ConvLayer::Gin { mlp, .. } => &mlp[sub].weight,
            ConvLayer::Sage { w_neigh, .. } => w_neigh,
        },
        WeightRef::SageNeighbor { layer } => match &model.conv_layers[layer] {
            ConvLayer::Sage { w_neigh, .. } => w_neigh,
            _ => unreachable!("SAGE weight on non-SAGE layer"),
        },
        WeightRef::SageSelf { layer } => match &model.conv_layers[layer] {
            ConvLayer::Sage { w_self, .. } => w_self,
            _ => unreachable!("SAGE weight on non-SAGE layer"),
        },
        WeightRef::Classifier { layer } => &model.classifier[layer].weight,
    }
}

fn bias_vector(model: &ModelSpec, origin: Origin) -> Option<&Array1<f64>> {
    match origin {
        Origin::Features => None,
        Origin::ConvBias { layer, sub } => match &model.conv_layers[layer] {
            ConvLayer::Gcn(d) => d.bias.as_ref(),
            ConvLayer::Sage { bias, .. } => bias.as_ref(),
            ConvLayer::Gin { mlp, .. } => mlp[sub].bias.as_ref(),
        },
        Origin::ClassifierBias { layer } => model.classifier[layer].bias.as_ref(),
    }
}

/// The matrix a term's chain starts from.
pub(crate) fn origin_matrix(model: &ModelSpec, term: &TermClass, trace: &ForwardTrace) -> Array2<f64> {
    let n = trace.num_nodes();
    match term.origin {
        Origin::Features => trace.features.clone(),
        origin => {
            let b = bias_vector(model, origin).expect("bias terms are only enumerated for present biases");
            let rows = match origin {
                Origin::ClassifierBias { .. } if model.pooling == Pooling::Mean => 1,
                _ => n,
            };
            b.view().insert_axis(Axis(0)).broadcast((rows, b.len())).expect("row broadcast").to_owned()
        }
    }
}

pub(crate) fn pattern(trace: &ForwardTrace, id: LayerId) -> &Array2<f64> {
    &trace.record(id).expect("pattern slot exists in trace").pattern
}

/// Applies one op in the forward direction.
pub(crate) fn apply_op(model: &ModelSpec, trace: &ForwardTrace, op: &Op, s: &Array2<f64>) -> Array2<f64> {
    match op {
        Op::Propagate { .. } => trace.propagation.dot(s),
        Op::Scale(c) => s * *c,
        Op::Weight(w) => s.dot(weight_matrix(model, *w)),
        Op::Pattern(id) => pattern(trace, *id) * s,
        Op::Pool => s.mean_axis(Axis(0)).expect("n > 0").insert_axis(Axis(0)),
    }
}

/// Evaluates one term class with patterns applied; output has the logits' shape.
pub fn evaluate_term(model: &ModelSpec, term: &TermClass, trace: &ForwardTrace) -> Result<Array2<f64>> {
    trace.check_model(model)?;
    let mut s = origin_matrix(model, term, trace);
    for op in &term.ops {
        s = apply_op(model, trace, op, &s);
    }
    Ok(s)
}

/// `Σ_terms evaluate_term`, in enumeration order.
pub fn reconstruct_logits(model: &ModelSpec, terms: &[TermClass], trace: &ForwardTrace) -> Result<Array2<f64>> {
    let mut total = Array2::zeros(trace.logits.dim());
    for t in terms {
        total += &evaluate_term(model, t, trace)?;
    }
    Ok(total)
}
