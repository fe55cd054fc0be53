//! Evaluation-mode inference that keeps every intermediate the attribution
//! needs: the propagation matrix, pre/post activations and activation patterns.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Activation, Arch, ConvLayer, DenseLayer, ModelSpec, Pooling};

/// Identifies one activation site of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerId {
    /// Conv layer `layer`, MLP sublayer `sub` (always 0 for GCN and SAGE).
    Conv { layer: usize, sub: usize },
    Classifier { layer: usize },
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerId::Conv { layer, sub } => write!(f, "{}.{}", layer + 1, sub + 1),
            LayerId::Classifier { layer } => write!(f, "c{}", layer + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub id: LayerId,
    pub activation: Activation,
    pub pre: Array2<f64>,
    pub post: Array2<f64>,
    pub pattern: Array2<f64>,
}

impl ActivationRecord {
    fn new(id: LayerId, activation: Activation, pre: Array2<f64>) -> Self {
        let post = pre.mapv(|v| activation.apply(v));
        let pattern = activation_pattern(&pre, &post);
        ActivationRecord {
            id,
            activation,
            pre,
            post,
            pattern,
        }
    }
}

/// Elementwise `post / pre`, zero where `pre == 0`.
pub fn activation_pattern(pre: &Array2<f64>, post: &Array2<f64>) -> Array2<f64> {
    let mut p = post.clone();
    p.zip_mut_with(pre, |o, &i| *o = if i != 0.0 { *o / i } else { 0.0 });
    p
}

/// Layer shapes a trace was produced with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSignature {
    arch: Arch,
    conv: Vec<(usize, usize, usize)>,
    classifier: Vec<(usize, usize)>,
    pooling: Pooling,
}

impl ModelSignature {
    pub fn of(model: &ModelSpec) -> Self {
        ModelSignature {
            arch: model.arch(),
            conv: model
                .conv_layers
                .iter()
                .map(|c| (c.in_dim(), c.out_dim(), c.num_sublayers()))
                .collect(),
            classifier: model.classifier.iter().map(|d| (d.in_dim(), d.out_dim())).collect(),
            pooling: model.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `V` for GCN, `Â = A + I` for GIN, `A` for SAGE. All zeros for the baseline.
    pub propagation: Array2<f64>,
    pub features: Array2<f64>,
    /// Per conv layer, per MLP sublayer.
    pub conv: Vec<Vec<ActivationRecord>>,
    /// Every classifier layer; the last one carries the logits as `pre`.
    pub classifier: Vec<ActivationRecord>,
    /// `H^(L)` after pooling: one row for mean pooling, one row per node otherwise.
    pub pooled: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    signature: ModelSignature,
}

impl ForwardTrace {
    pub fn num_nodes(&self) -> usize {
        self.propagation.nrows()
    }

    pub fn record(&self, id: LayerId) -> Option<&ActivationRecord> {
        match id {
            LayerId::Conv { layer, sub } => self.conv.get(layer)?.get(sub),
            LayerId::Classifier { layer } => self.classifier.get(layer),
        }
    }

    pub fn check_model(&self, model: &ModelSpec) -> Result<()> {
        if self.signature != ModelSignature::of(model) {
            return Err(Error::TraceMismatch(format!(
                "trace signature {:?} vs model signature {:?}",
                self.signature,
                ModelSignature::of(model)
            )));
        }
        Ok(())
    }

    /// Embedding row used for explanation embeddings: the pooled vector, or node `row`.
    pub fn embedding(&self, row: usize) -> Array1<f64> {
        let r = if self.pooled.nrows() == 1 { 0 } else { row };
        self.pooled.row(r).to_owned()
    }

    /// Output of the first classifier layer (post-activation).
    pub fn first_classifier_output(&self, row: usize) -> Array1<f64> {
        let rec = &self.classifier[0];
        let r = if rec.post.nrows() == 1 { 0 } else { row };
        rec.post.row(r).to_owned()
    }

    pub fn predicted_class(&self, row: usize) -> usize {
        let r = if self.logits.nrows() == 1 { 0 } else { row };
        argmax(self.logits.row(r).iter().copied())
    }

    /// JSON dump for inspection.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let m = |a: &Array2<f64>| -> Vec<Vec<f64>> { a.rows().into_iter().map(|r| r.to_vec()).collect() };
        let rec = |r: &ActivationRecord| {
            serde_json::json!({"layer": r.id.to_string(), "pre": m(&r.pre), "post": m(&r.post), "pattern": m(&r.pattern)})
        };
        serde_json::json!({
            "propagation": m(&self.propagation),
            "conv": self.conv.iter().flatten().map(rec).collect::<Vec<_>>(),
            "classifier": self.classifier.iter().map(rec).collect::<Vec<_>>(),
            "pooled": m(&self.pooled),
            "logits": m(&self.logits),
            "probs": m(&self.probs),
        })
    }
}

/// First index of the maximum; NaN never wins.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row-degree matrix of `A + I`.
pub fn normalize_adjacency(graph: &Graph) -> Array2<f64> {
    let n = graph.num_nodes();
    let a_hat = graph.adjacency() + &Array2::<f64>::eye(n);
    let inv_sqrt: Array1<f64> = a_hat.sum_axis(Axis(1)).mapv(|d| 1.0 / d.sqrt());
    let mut v = a_hat;
    for ((i, j), x) in v.indexed_iter_mut() {
        *x *= inv_sqrt[i] * inv_sqrt[j];
    }
    v
}

/// The matrix that left-multiplies node states in the aggregation branch.
pub fn propagation_matrix(arch: Arch, graph: &Graph) -> Array2<f64> {
    match arch {
        Arch::Gcn => normalize_adjacency(graph),
        Arch::Gin => graph.adjacency() + &Array2::<f64>::eye(graph.num_nodes()),
        Arch::Sage => graph.adjacency().clone(),
    }
}

pub(crate) fn add_bias(mut x: Array2<f64>, bias: Option<&Array1<f64>>) -> Array2<f64> {
    if let Some(b) = bias {
        x += &b.view().insert_axis(Axis(0));
    }
    x
}

fn dense_forward(layer: &DenseLayer, input: &Array2<f64>, id: LayerId) -> ActivationRecord {
    let pre = add_bias(input.dot(&layer.weight), layer.bias.as_ref());
    ActivationRecord::new(id, layer.activation, pre)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Runs the model with an explicit propagation matrix and feature matrix.
pub fn run_with(model: &ModelSpec, propagation: Array2<f64>, features: Array2<f64>) -> Result<ForwardTrace> {
    let n = propagation.nrows();
    if features.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {n} nodes",
            features.nrows()
        )));
    }
    if features.ncols() != model.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "graph has feature dim {} but the model expects {}",
            features.ncols(),
            model.feature_dim()
        )));
    }
    let mut h = features.clone();
    let mut conv = Vec::with_capacity(model.num_conv());
    for (l, layer) in model.conv_layers.iter().enumerate() {
        let id0 = LayerId::Conv { layer: l, sub: 0 };
        let records = match layer {
            ConvLayer::Gcn(d) => {
                let pre = add_bias(propagation.dot(&h).dot(&d.weight), d.bias.as_ref());
                vec![ActivationRecord::new(id0, d.activation, pre)]
            }
            ConvLayer::Sage {
                w_neigh,
                w_self,
                bias,
                activation,
            } => {
                let pre = add_bias(propagation.dot(&h).dot(w_neigh) + h.dot(w_self), bias.as_ref());
                vec![ActivationRecord::new(id0, *activation, pre)]
            }
            ConvLayer::Gin { eps, mlp } => {
                let mut z = propagation.dot(&h) + &(&h * *eps);
                let mut recs = Vec::with_capacity(mlp.len());
                for (k, d) in mlp.iter().enumerate() {
                    let rec = dense_forward(d, &z, LayerId::Conv { layer: l, sub: k });
                    z = rec.post.clone();
                    recs.push(rec);
                }
                recs
            }
        };
        h = records.last().expect("non-empty").post.clone();
        conv.push(records);
    }
    let pooled = match model.pooling {
        Pooling::Mean => h.mean_axis(Axis(0)).expect("n > 0").insert_axis(Axis(0)),
        Pooling::None => h,
    };
    let mut classifier = Vec::with_capacity(model.classifier.len());
    let mut z = pooled.clone();
    for (k, d) in model.classifier.iter().enumerate() {
        let rec = dense_forward(d, &z, LayerId::Classifier { layer: k });
        z = rec.post.clone();
        classifier.push(rec);
    }
    let probs = softmax_rows(&z);
    Ok(ForwardTrace {
        propagation,
        features,
        conv,
        classifier,
        pooled,
        logits: z,
        probs,
        signature: ModelSignature::of(model),
    })
}

pub fn run_forward(model: &ModelSpec, graph: &Graph) -> Result<ForwardTrace> {
    run_with(
        model,
        propagation_matrix(model.arch(), graph),
        graph.features().clone(),
    )
}

/// Trace of `f(0, 0)`: all adjacency (propagation) and feature inputs zero.
pub fn run_zero_baseline(model: &ModelSpec, n: usize, d: usize) -> Result<ForwardTrace> {
    run_with(model, Array2::zeros((n, n)), Array2::zeros((n, d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, RandomModelConfig};
    use ndarray::array;

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)], false, Array2::ones((3, 2))).unwrap()
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let g = Graph::from_edges(1, &[], false, array![[1.0]]).unwrap();
        assert_eq!(normalize_adjacency(&g), array![[1.0]]);
    }

    #[test]
    fn single_edge_normalizes_to_halves() {
        let g = Graph::from_edges(2, &[(0, 1)], false, array![[1.0], [1.0]]).unwrap();
        let v = normalize_adjacency(&g);
        for x in v.iter() {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn path_row_sums_match_scripted_arithmetic() {
        // degrees with self-loops: 2, 3, 2
        let v = normalize_adjacency(&path3());
        let s2 = 2f64.sqrt();
        let s3 = 3f64.sqrt();
        let expect = [
            1.0 / 2.0 + 1.0 / (s2 * s3),
            1.0 / (s3 * s2) + 1.0 / 3.0 + 1.0 / (s3 * s2),
            1.0 / (s2 * s3) + 1.0 / 2.0,
        ];
        for (i, r) in v.sum_axis(Axis(1)).iter().enumerate() {
            assert!((r - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_leave_only_the_bias_chain() {
        let mut m = random_model(&RandomModelConfig::reference(Arch::Gcn, 2, 3, 2), 1).unwrap();
        for c in &mut m.conv_layers {
            if let ConvLayer::Gcn(d) = c {
                d.weight.fill(0.0);
            }
        }
        for d in &mut m.classifier {
            d.weight.fill(0.0);
        }
        let t = run_forward(&m, &path3()).unwrap();
        let last = m.classifier.last().unwrap().bias.clone().unwrap();
        assert_eq!(t.logits.row(0), last.view());
    }

    #[test]
    fn patterns_are_binary_and_reconstruct_post() {
        for arch in [Arch::Gcn, Arch::Sage, Arch::Gin] {
            let m = random_model(&RandomModelConfig::reference(arch, 2, 4, 3), 3).unwrap();
            let t = run_forward(&m, &path3()).unwrap();
            for rec in t.conv.iter().flatten().chain(&t.classifier) {
                assert_eq!(&rec.pattern * &rec.pre, rec.post);
                if rec.activation == Activation::Relu {
                    assert!(rec.pattern.iter().all(|&p| p == 0.0 || p == 1.0));
                }
            }
            for row in t.probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_dim_mismatch_is_an_error() {
        let m = random_model(&RandomModelConfig::reference(Arch::Gcn, 3, 4, 2), 0).unwrap();
        assert!(matches!(run_forward(&m, &path3()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn bias_free_model_has_zero_baseline() {
        let mut cfg = RandomModelConfig::reference(Arch::Gin, 2, 3, 2);
        cfg.with_bias = false;
        let m = random_model(&cfg, 5).unwrap();
        let t = run_zero_baseline(&m, 4, 2).unwrap();
        assert!(t.logits.iter().all(|&v| v == 0.0));
        assert!(t.conv.iter().flatten().chain(&t.classifier).all(|r| r.pattern.iter().all(|&p| p == 0.0)));
    }

    #[test]
    fn baseline_depends_only_on_node_count() {
        let m = random_model(&RandomModelConfig::reference(Arch::Sage, 2, 3, 2), 2).unwrap();
        let a = run_zero_baseline(&m, 4, 2).unwrap();
        let b = run_zero_baseline(&m, 4, 2).unwrap();
        assert_eq!(a, b);
    }
}
