//! Brute-force expansion of tiny models into individual scalar products.
//!
//! Every logit is rewritten as a sum of `constant × Π variables`, where the
//! variables are propagation-matrix entries, activation-pattern entries and
//! (optionally) feature entries. Weights, biases, the GIN `eps` term, the SAGE
//! self branch and the pooling factor are constants. The cost is exponential in
//! depth, so inputs are bounded by a size guard.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use serde::Serialize;

use crate::attribution::{variable_contributions, OutputEntry};
use crate::error::{Error, Result};
use crate::expansion::{enumerate_terms, VariableMode};
use crate::forward::{run_forward, ForwardTrace, LayerId};
use crate::graph::Graph;
use crate::model::{ConvLayer, DenseLayer, ModelSpec, Pooling};

pub const MAX_NODES: usize = 6;
pub const MAX_FEATURES: usize = 3;
pub const MAX_CONV_LAYERS: usize = 2;
pub const MAX_WIDTH: usize = 4;
pub const MAX_PRODUCTS: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum VarId {
    Adjacency { i: usize, j: usize },
    Pattern { layer: LayerId, row: usize, col: usize },
    Feature { node: usize, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarProduct {
    /// Output row (0 for pooled models) and class this product belongs to.
    pub row: usize,
    pub class: usize,
    pub value: f64,
    /// Multiset of variables with the value each was recorded at, sorted by id.
    pub variables: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl ScalarProduct {
    /// Sorts `variables`; the counting methods rely on that order.
    pub fn new(constant: f64, mut variables: Vec<(VarId, f64)>) -> Self {
        variables.sort_by_key(|a| a.0);
        let value = variables.iter().fold(constant, |acc, (_, v)| acc * v);
        ScalarProduct {
            row: 0,
            class: 0,
            value,
            variables,
            constant,
        }
    }

    /// `|V(z)|`.
    pub fn unique_count(&self) -> usize {
        let mut n = 0;
        for (k, (id, _)) in self.variables.iter().enumerate() {
            if k == 0 || self.variables[k - 1].0 != *id {
                n += 1;
            }
        }
        n
    }

    /// `O(ν, z)`.
    pub fn occurrences(&self, var: VarId) -> usize {
        self.variables.iter().filter(|(id, _)| *id == var).count()
    }

    pub fn degree(&self) -> usize {
        self.variables.len()
    }

    /// Share of `var` in this product under `mode`; 0 if absent.
    pub fn share(&self, mode: OracleMode, var: VarId) -> f64 {
        let o = self.occurrences(var);
        if o == 0 {
            return 0.0;
        }
        match mode {
            OracleMode::UniqueVariables => self.value / self.unique_count() as f64,
            OracleMode::Occurrences => self.value * o as f64 / self.degree() as f64,
        }
    }
}

impl ScalarProduct {
    /// Share of every unique variable under `mode`, in id order.
    pub fn shares(&self, mode: OracleMode) -> Vec<(VarId, f64)> {
        let degree = self.degree() as f64;
        let unique = self.unique_count() as f64;
        let mut out = Vec::with_capacity(self.variables.len());
        let mut k = 0;
        while k < self.variables.len() {
            let id = self.variables[k].0;
            let mut o = 0;
            while k < self.variables.len() && self.variables[k].0 == id {
                o += 1;
                k += 1;
            }
            out.push((
                id,
                match mode {
                    OracleMode::UniqueVariables => self.value / unique,
                    OracleMode::Occurrences => self.value * o as f64 / degree,
                },
            ));
        }
        out
    }
}

/// Unique variables share a product's value equally (`UniqueVariables`), or in
/// proportion to how often they occur in it (`Occurrences`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OracleMode {
    UniqueVariables,
    Occurrences,
}

pub fn oracle_attribute(products: &[ScalarProduct], mode: OracleMode, variable: VarId) -> f64 {
    products.iter().map(|z| z.share(mode, variable)).sum()
}

/// Attribution of every variable that appears in `products`.
pub fn oracle_attribute_all(products: &[ScalarProduct], mode: OracleMode) -> BTreeMap<VarId, f64> {
    let mut out = BTreeMap::new();
    for z in products {
        for (id, share) in z.shares(mode) {
            *out.entry(id).or_insert(0.0) += share;
        }
    }
    out
}

/// Variables of a product under construction, shared between the many
/// products that extend the same prefix.
struct VarNode {
    id: VarId,
    value: f64,
    next: Option<Rc<VarNode>>,
}

#[derive(Clone)]
struct Partial {
    constant: f64,
    value: f64,
    vars: Option<Rc<VarNode>>,
}

impl Partial {
    fn constant(c: f64) -> Self {
        Partial {
            constant: c,
            value: c,
            vars: None,
        }
    }

    fn times(&self, c: f64) -> Self {
        Partial {
            constant: self.constant * c,
            value: self.value * c,
            vars: self.vars.clone(),
        }
    }

    fn with_var(&self, id: VarId, v: f64) -> Self {
        Partial {
            constant: self.constant,
            value: self.value * v,
            vars: Some(Rc::new(VarNode {
                id,
                value: v,
                next: self.vars.clone(),
            })),
        }
    }

    fn finish(&self, row: usize, class: usize) -> ScalarProduct {
        let mut variables = Vec::new();
        let mut node = self.vars.as_deref();
        while let Some(n) = node {
            variables.push((n.id, n.value));
            node = n.next.as_deref();
        }
        variables.sort_by_key(|a| a.0);
        ScalarProduct {
            row,
            class,
            value: self.value,
            variables,
            constant: self.constant,
        }
    }
}

type Poly = Vec<Partial>;

struct SymMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Poly>,
}

impl SymMatrix {
    fn cell(&self, r: usize, c: usize) -> &Poly {
        &self.cells[r * self.cols + c]
    }

    fn build(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Poly) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        SymMatrix { rows, cols, cells }
    }

    fn size(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    fn dense(&self, w: &Array2<f64>) -> Self {
        SymMatrix::build(self.rows, w.ncols(), |r, h| {
            (0..self.cols)
                .flat_map(|k| self.cell(r, k).iter().map(move |p| p.times(w[[k, h]])))
                .collect()
        })
    }

    fn propagate(&self, m: &Array2<f64>) -> Self {
        SymMatrix::build(self.rows, self.cols, |a, h| {
            (0..self.rows)
                .flat_map(|b| {
                    self.cell(b, h)
                        .iter()
                        .map(move |p| p.with_var(VarId::Adjacency { i: a, j: b }, m[[a, b]]))
                })
                .collect()
        })
    }

    fn scaled(&self, c: f64) -> Self {
        SymMatrix::build(self.rows, self.cols, |r, h| self.cell(r, h).iter().map(|p| p.times(c)).collect())
    }

    fn plus(mut self, other: SymMatrix) -> Self {
        for (a, b) in self.cells.iter_mut().zip(other.cells) {
            a.extend(b);
        }
        self
    }

    fn add_bias(mut self, bias: Option<&ndarray::Array1<f64>>) -> Self {
        if let Some(b) = bias {
            for r in 0..self.rows {
                for h in 0..self.cols {
                    self.cells[r * self.cols + h].push(Partial::constant(b[h]));
                }
            }
        }
        self
    }

    fn gate(mut self, id: LayerId, gating: bool, trace: &ForwardTrace) -> Self {
        if !gating {
            return self;
        }
        let p = &trace.record(id).expect("trace matches model").pattern;
        for r in 0..self.rows {
            for h in 0..self.cols {
                let var = VarId::Pattern { layer: id, row: r, col: h };
                let cell = &mut self.cells[r * self.cols + h];
                *cell = cell.iter().map(|z| z.with_var(var, p[[r, h]])).collect();
            }
        }
        self
    }

    fn pool_mean(&self) -> Self {
        let inv = 1.0 / self.rows as f64;
        SymMatrix::build(1, self.cols, |_, h| {
            (0..self.rows)
                .flat_map(|r| self.cell(r, h).iter().map(|p| p.times(inv)))
                .collect()
        })
    }
}

fn check_guard(model: &ModelSpec, trace: &ForwardTrace) -> Result<()> {
    let n = trace.num_nodes();
    let d = trace.features.ncols();
    let mut widths = Vec::new();
    for layer in &model.conv_layers {
        match layer {
            ConvLayer::Gin { mlp, .. } => widths.extend(mlp.iter().map(DenseLayer::out_dim)),
            other => widths.push(other.out_dim()),
        }
    }
    let hidden = model.classifier.iter().rev().skip(1).map(DenseLayer::out_dim);
    widths.extend(hidden);
    let max_width = widths.iter().copied().max().unwrap_or(0);
    let mut problems = Vec::new();
    if n > MAX_NODES {
        problems.push(format!("{n} nodes > {MAX_NODES}"));
    }
    if d > MAX_FEATURES {
        problems.push(format!("feature dim {d} > {MAX_FEATURES}"));
    }
    if model.num_conv() > MAX_CONV_LAYERS {
        problems.push(format!("{} conv layers > {MAX_CONV_LAYERS}", model.num_conv()));
    }
    if max_width > MAX_WIDTH {
        problems.push(format!("hidden width {max_width} > {MAX_WIDTH}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::SizeGuard(problems.join(", ")))
    }
}

fn check_size(m: &SymMatrix, stage: &str) -> Result<()> {
    let size = m.size();
    if size > MAX_PRODUCTS {
        return Err(Error::SizeGuard(format!(
            "{size} products after {stage} exceeds {MAX_PRODUCTS}"
        )));
    }
    Ok(())
}

/// Expands every logit of `model` on `graph` into scalar products.
pub fn expand_all(model: &ModelSpec, graph: &Graph, mode: VariableMode) -> Result<Vec<ScalarProduct>> {
    let trace = run_forward(model, graph)?;
    expand_trace(model, &trace, mode)
}

/// As [`expand_all`], with propagation, features and patterns taken from `trace`.
pub fn expand_trace(model: &ModelSpec, trace: &ForwardTrace, mode: VariableMode) -> Result<Vec<ScalarProduct>> {
    trace.check_model(model)?;
    check_guard(model, trace)?;
    let x = &trace.features;
    let m = &trace.propagation;
    let mut h = SymMatrix::build(x.nrows(), x.ncols(), |i, k| {
        if mode.features_as_variables {
            vec![Partial::constant(1.0).with_var(VarId::Feature { node: i, dim: k }, x[[i, k]])]
        } else {
            vec![Partial::constant(x[[i, k]])]
        }
    });
    for (l, layer) in model.conv_layers.iter().enumerate() {
        let id = |sub| LayerId::Conv { layer: l, sub };
        h = match layer {
            ConvLayer::Gcn(d) => h
                .propagate(m)
                .dense(&d.weight)
                .add_bias(d.bias.as_ref())
                .gate(id(0), d.activation.is_gating(), trace),
            ConvLayer::Sage {
                w_neigh,
                w_self,
                bias,
                activation,
            } => h
                .propagate(m)
                .dense(w_neigh)
                .plus(h.dense(w_self))
                .add_bias(bias.as_ref())
                .gate(id(0), activation.is_gating(), trace),
            ConvLayer::Gin { eps, mlp } => {
                let mut z = h.propagate(m).plus(h.scaled(*eps));
                for (k, d) in mlp.iter().enumerate() {
                    z = z
                        .dense(&d.weight)
                        .add_bias(d.bias.as_ref())
                        .gate(id(k), d.activation.is_gating(), trace);
                    check_size(&z, &format!("conv layer {}", l + 1))?;
                }
                z
            }
        };
        check_size(&h, &format!("conv layer {}", l + 1))?;
    }
    if model.pooling == Pooling::Mean {
        h = h.pool_mean();
    }
    for (k, d) in model.classifier.iter().enumerate() {
        h = h
            .dense(&d.weight)
            .add_bias(d.bias.as_ref())
            .gate(LayerId::Classifier { layer: k }, d.activation.is_gating(), trace);
        check_size(&h, &format!("classifier layer {}", k + 1))?;
    }
    let cols = h.cols;
    let mut out = Vec::with_capacity(h.size());
    for (idx, cell) in h.cells.into_iter().enumerate() {
        out.extend(cell.iter().map(|z| z.finish(idx / cols, idx % cols)));
    }
    Ok(out)
}

/// Per-output sums of the products, shaped like the logits.
pub fn sum_products(products: &[ScalarProduct], rows: usize, classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, classes));
    for z in products {
        out[[z.row, z.class]] += z.value;
    }
    out
}

/// Largest deviations found when checking the efficient path against the expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub products: usize,
    pub reconstruction: f64,
    pub adjacency: f64,
    pub pattern: f64,
    pub feature: f64,
    pub entries_checked: usize,
}

impl EquivalenceReport {
    pub fn max_deviation(&self) -> f64 {
        self.reconstruction.max(self.adjacency).max(self.pattern).max(self.feature)
    }
}

/// Compares the sweep-based per-variable contributions against occurrence-mode
/// oracle attribution for every output entry, every adjacency entry, every
/// pattern entry and (in feature mode) every feature entry.
///
/// `trace` may come from a different model of the same shape; that is how
/// fault injection is exercised.
pub fn check_equivalence(model: &ModelSpec, trace: &ForwardTrace, mode: VariableMode) -> Result<EquivalenceReport> {
    let products = expand_trace(model, trace, mode)?;
    check_products(model, trace, mode, products)
}

/// As [`check_equivalence`], reusing products already expanded from `trace`.
pub fn check_products(
    model: &ModelSpec,
    trace: &ForwardTrace,
    mode: VariableMode,
    products: Vec<ScalarProduct>,
) -> Result<EquivalenceReport> {
    let terms = enumerate_terms(model)?;
    let (rows, classes) = trace.logits.dim();
    let mut report = EquivalenceReport {
        products: products.len(),
        reconstruction: 0.0,
        adjacency: 0.0,
        pattern: 0.0,
        feature: 0.0,
        entries_checked: 0,
    };
    let sums = sum_products(&products, rows, classes);
    report.reconstruction = (&sums - &trace.logits).iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    let mut by_output: Vec<Vec<ScalarProduct>> = vec![Vec::new(); rows * classes];
    for z in products {
        if z.row < rows && z.class < classes {
            by_output[z.row * classes + z.class].push(z);
        }
    }
    for row in 0..rows {
        for class in 0..classes {
            let vc = variable_contributions(model, &terms, trace, OutputEntry { row, class }, mode)?;
            let mut adjacency = Array2::<f64>::zeros(vc.adjacency.dim());
            let mut patterns: BTreeMap<LayerId, Array2<f64>> =
                vc.patterns.iter().map(|(id, p)| (*id, Array2::zeros(p.dim()))).collect();
            let mut features = vc.features.as_ref().map(|f| Array2::<f64>::zeros(f.dim()));
            // shares the efficient path has no slot for
            let mut uncovered: f64 = 0.0;
            for z in &by_output[row * classes + class] {
                for (id, share) in z.shares(OracleMode::Occurrences) {
                    let cell = match id {
                        VarId::Adjacency { i, j } => adjacency.get_mut([i, j]),
                        VarId::Pattern { layer, row, col } => {
                            patterns.get_mut(&layer).and_then(|p| p.get_mut([row, col]))
                        }
                        VarId::Feature { node, dim } => features.as_mut().and_then(|f| f.get_mut([node, dim])),
                    };
                    match cell {
                        Some(c) => *c += share,
                        None => uncovered = uncovered.max(share.abs()),
                    }
                }
            }
            let dev = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
            report.adjacency = report.adjacency.max(dev(&vc.adjacency, &adjacency));
            report.entries_checked += adjacency.len();
            for (layer, p) in &vc.patterns {
                report.pattern = report.pattern.max(dev(p, &patterns[layer]));
                report.entries_checked += p.len();
            }
            if let (Some(a), Some(b)) = (&vc.features, &features) {
                report.feature = report.feature.max(dev(a, b));
                report.entries_checked += a.len();
            }
            report.pattern = report.pattern.max(uncovered);
        }
    }
    Ok(report)
}
