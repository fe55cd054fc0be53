//! Pretrained GNN description: GCN, GraphSAGE or GIN convolutions followed by
//! pooling and a dense classifier. BatchNorm blocks are folded on load.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::None => x,
        }
    }

    pub fn is_gating(self) -> bool {
        self == Activation::Relu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Sage,
    Gin,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Gcn => "gcn",
            Arch::Sage => "sage",
            Arch::Gin => "gin",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Arch::Gcn),
            "sage" => Ok(Arch::Sage),
            "gin" => Ok(Arch::Gin),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    None,
}

/// `x · weight + bias`, followed by `activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, what: &str) -> Result<()> {
        if let Some(b) = &self.bias {
            if b.len() != self.out_dim() {
                return Err(Error::InvalidModel(format!(
                    "{what}: bias has length {} but weight has {} columns",
                    b.len(),
                    self.out_dim()
                )));
            }
        }
        let finite = self.weight.iter().chain(self.bias.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidModel(format!("{what}: non-finite parameter")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    /// `act(V · H · W + B)` with `V` the symmetric-normalized adjacency with self-loops.
    Gcn(DenseLayer),
    /// `act(A · H · W_neigh + H · W_self + B)`.
    Sage {
        w_neigh: Array2<f64>,
        w_self: Array2<f64>,
        bias: Option<Array1<f64>>,
        activation: Activation,
    },
    /// `MLP((Â + eps·I) · H)` with `Â = A + I`; every MLP sublayer carries its own activation.
    Gin { eps: f64, mlp: Vec<DenseLayer> },
}

impl ConvLayer {
    pub fn arch(&self) -> Arch {
        match self {
            ConvLayer::Gcn(_) => Arch::Gcn,
            ConvLayer::Sage { .. } => Arch::Sage,
            ConvLayer::Gin { .. } => Arch::Gin,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            ConvLayer::Gcn(d) => d.in_dim(),
            ConvLayer::Sage { w_neigh, .. } => w_neigh.nrows(),
            ConvLayer::Gin { mlp, .. } => mlp[0].in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ConvLayer::Gcn(d) => d.out_dim(),
            ConvLayer::Sage { w_neigh, .. } => w_neigh.ncols(),
            ConvLayer::Gin { mlp, .. } => mlp[mlp.len() - 1].out_dim(),
        }
    }

    /// Number of activation sites inside the layer (GIN MLP depth, else 1).
    pub fn num_sublayers(&self) -> usize {
        match self {
            ConvLayer::Gin { mlp, .. } => mlp.len(),
            _ => 1,
        }
    }

    fn check(&self, l: usize) -> Result<()> {
        let what = format!("conv layer {l}");
        match self {
            ConvLayer::Gcn(d) => d.check(&what),
            ConvLayer::Sage {
                w_neigh,
                w_self,
                bias,
                ..
            } => {
                if w_neigh.dim() != w_self.dim() {
                    return Err(Error::InvalidModel(format!(
                        "{what}: W_phi {:?} and W_psi {:?} differ in shape",
                        w_neigh.dim(),
                        w_self.dim()
                    )));
                }
                DenseLayer {
                    weight: w_neigh.clone(),
                    bias: bias.clone(),
                    activation: Activation::None,
                }
                .check(&what)?;
                if !w_self.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidModel(format!("{what}: non-finite parameter")));
                }
                Ok(())
            }
            ConvLayer::Gin { eps, mlp } => {
                if mlp.is_empty() {
                    return Err(Error::InvalidModel(format!("{what}: GIN MLP is empty")));
                }
                if !eps.is_finite() {
                    return Err(Error::InvalidModel(format!("{what}: eps is not finite")));
                }
                for (k, w) in mlp.windows(2).enumerate() {
                    if w[0].out_dim() != w[1].in_dim() {
                        return Err(Error::InvalidModel(format!(
                            "{what}: MLP sublayer {k} outputs {} but sublayer {} expects {}",
                            w[0].out_dim(),
                            k + 1,
                            w[1].in_dim()
                        )));
                    }
                }
                mlp.iter()
                    .enumerate()
                    .try_for_each(|(k, d)| d.check(&format!("{what} sublayer {k}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub conv_layers: Vec<ConvLayer>,
    pub pooling: Pooling,
    pub classifier: Vec<DenseLayer>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(
        conv_layers: Vec<ConvLayer>,
        pooling: Pooling,
        classifier: Vec<DenseLayer>,
        num_classes: usize,
    ) -> Result<Self> {
        let m = ModelSpec {
            conv_layers,
            pooling,
            classifier,
            num_classes,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn arch(&self) -> Arch {
        self.conv_layers[0].arch()
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.conv_layers[self.conv_layers.len() - 1].out_dim()
    }

    pub fn num_conv(&self) -> usize {
        self.conv_layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::InvalidModel("at least one conv layer is required".into()));
        }
        if self.classifier.is_empty() {
            return Err(Error::InvalidModel("at least one classifier layer is required".into()));
        }
        let arch = self.arch();
        for (l, c) in self.conv_layers.iter().enumerate() {
            if c.arch() != arch {
                return Err(Error::InvalidModel(format!(
                    "conv layer {l} is {} but layer 0 is {arch}",
                    c.arch()
                )));
            }
            c.check(l)?;
        }
        for (l, w) in self.conv_layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "conv layer {l} outputs {} but conv layer {} expects {}",
                    w[0].out_dim(),
                    l + 1,
                    w[1].in_dim()
                )));
            }
        }
        if self.classifier[0].in_dim() != self.embedding_dim() {
            return Err(Error::DimensionMismatch(format!(
                "conv layer {} outputs {} but classifier layer 0 expects {}",
                self.num_conv() - 1,
                self.embedding_dim(),
                self.classifier[0].in_dim()
            )));
        }
        for (k, w) in self.classifier.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "classifier layer {k} outputs {} but classifier layer {} expects {}",
                    w[0].out_dim(),
                    k + 1,
                    w[1].in_dim()
                )));
            }
        }
        for (k, c) in self.classifier.iter().enumerate() {
            c.check(&format!("classifier layer {k}"))?;
        }
        let last = &self.classifier[self.classifier.len() - 1];
        if last.activation != Activation::None {
            return Err(Error::InvalidModel(
                "the final classifier layer must not have an activation".into(),
            ));
        }
        if last.out_dim() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "final classifier layer outputs {} but num_classes is {}",
                last.out_dim(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Folds an evaluation-mode BatchNorm into an affine map `x · w_bn + b_bn`.
pub fn fold_batchnorm(
    mu: &Array1<f64>,
    delta: &Array1<f64>,
    epsvar: f64,
    weight: &Array1<f64>,
    bias: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let n = mu.len();
    if delta.len() != n || weight.len() != n || bias.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "batchnorm vectors have lengths mu={n}, var={}, W={}, B={}",
            delta.len(),
            weight.len(),
            bias.len()
        )));
    }
    if let Some(k) = delta.iter().position(|&d| (d + epsvar).is_nan() || d + epsvar <= 0.0) {
        return Err(Error::Domain(format!(
            "batchnorm variance + eps must be positive, got {} at channel {k}",
            delta[k] + epsvar
        )));
    }
    let scale: Array1<f64> = delta.mapv(|d| (d + epsvar).sqrt());
    let w_bn = weight / &scale;
    let b_bn = -(mu * weight) / &scale + bias;
    Ok((w_bn, b_bn))
}

/// Composes a folded BN `(w_bn, b_bn)` after an affine map with weight
/// columns `weights` and optional bias.
fn compose_bn(
    weights: &mut [&mut Array2<f64>],
    bias: &mut Option<Array1<f64>>,
    w_bn: &Array1<f64>,
    b_bn: &Array1<f64>,
) {
    for w in weights.iter_mut() {
        **w *= &w_bn.view().insert_axis(Axis(0));
    }
    let b = bias.take().unwrap_or_else(|| Array1::zeros(w_bn.len()));
    *bias = Some(&b * w_bn + b_bn);
}

// ---- JSON ----

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DenseJson {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvJson {
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Vec<f64>>>,
    #[serde(rename = "W_phi", default, skip_serializing_if = "Option::is_none")]
    pub w_phi: Option<Vec<Vec<f64>>>,
    #[serde(rename = "W_psi", default, skip_serializing_if = "Option::is_none")]
    pub w_psi: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<Vec<DenseJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormJson {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelJson {
    pub arch: String,
    pub conv_layers: Vec<ConvJson>,
    pub pooling: Pooling,
    pub classifier: Vec<DenseJson>,
    pub num_classes: usize,
    /// One optional entry per conv layer, acting on that layer's pre-activation output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<Vec<Option<BatchNormJson>>>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::InvalidModel(format!("{what}: empty weight matrix")));
    }
    if let Some(k) = rows.iter().position(|row| row.len() != c) {
        return Err(Error::InvalidModel(format!("{what}: row {k} has {} entries, expected {c}", rows[k].len())));
    }
    Ok(Array2::from_shape_vec((r, c), rows.concat()).expect("shape checked"))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dense_from_json(j: &DenseJson, default_act: Activation, what: &str) -> Result<DenseLayer> {
    Ok(DenseLayer {
        weight: matrix(&j.w, what)?,
        bias: j.b.clone().map(Array1::from_vec),
        activation: j.activation.unwrap_or(default_act),
    })
}

fn dense_to_json(d: &DenseLayer) -> DenseJson {
    DenseJson {
        w: rows(&d.weight),
        b: d.bias.as_ref().map(|b| b.to_vec()),
        activation: Some(d.activation),
    }
}

impl ModelJson {
    pub fn into_model(self) -> Result<ModelSpec> {
        let arch: Arch = self
            .arch
            .parse()
            .map_err(|_| Error::InvalidModel(format!("unknown architecture kind `{}`", self.arch)))?;
        let mut conv = Vec::with_capacity(self.conv_layers.len());
        for (l, c) in self.conv_layers.iter().enumerate() {
            let what = format!("conv layer {l}");
            let act = c.activation.unwrap_or(Activation::Relu);
            let unexpected = |field: &str| {
                Error::InvalidModel(format!("{what}: field `{field}` is not valid for {arch}"))
            };
            let missing = |field: &str| Error::InvalidModel(format!("{what}: missing `{field}`"));
            let layer = match arch {
                Arch::Gcn => {
                    if c.w_phi.is_some() || c.w_psi.is_some() {
                        return Err(unexpected("W_phi/W_psi"));
                    }
                    if c.eps.is_some() || c.mlp.is_some() {
                        return Err(unexpected("eps/mlp"));
                    }
                    ConvLayer::Gcn(DenseLayer {
                        weight: matrix(c.w.as_ref().ok_or_else(|| missing("W"))?, &what)?,
                        bias: c.b.clone().map(Array1::from_vec),
                        activation: act,
                    })
                }
                Arch::Sage => {
                    if c.w.is_some() || c.eps.is_some() || c.mlp.is_some() {
                        return Err(unexpected("W/eps/mlp"));
                    }
                    ConvLayer::Sage {
                        w_neigh: matrix(c.w_phi.as_ref().ok_or_else(|| missing("W_phi"))?, &what)?,
                        w_self: matrix(c.w_psi.as_ref().ok_or_else(|| missing("W_psi"))?, &what)?,
                        bias: c.b.clone().map(Array1::from_vec),
                        activation: act,
                    }
                }
                Arch::Gin => {
                    if c.w.is_some() || c.w_phi.is_some() || c.w_psi.is_some() || c.b.is_some() {
                        return Err(unexpected("W/W_phi/W_psi/B"));
                    }
                    let mlp = c
                        .mlp
                        .as_ref()
                        .ok_or_else(|| missing("mlp"))?
                        .iter()
                        .enumerate()
                        .map(|(k, d)| dense_from_json(d, Activation::Relu, &format!("{what} sublayer {k}")))
                        .collect::<Result<Vec<_>>>()?;
                    ConvLayer::Gin {
                        eps: c.eps.unwrap_or(0.0),
                        mlp,
                    }
                }
            };
            conv.push(layer);
        }
        let m = self.classifier.len();
        let classifier = self
            .classifier
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let default = if k + 1 == m { Activation::None } else { Activation::Relu };
                dense_from_json(d, default, &format!("classifier layer {k}"))
            })
            .collect::<Result<Vec<_>>>()?;

        if let Some(bns) = &self.bn {
            if bns.len() != conv.len() {
                return Err(Error::InvalidModel(format!(
                    "bn has {} entries for {} conv layers",
                    bns.len(),
                    conv.len()
                )));
            }
            for (l, bn) in bns.iter().enumerate() {
                let Some(bn) = bn else { continue };
                let (w_bn, b_bn) = fold_batchnorm(
                    &Array1::from_vec(bn.mu.clone()),
                    &Array1::from_vec(bn.var.clone()),
                    bn.eps,
                    &Array1::from_vec(bn.w.clone()),
                    &Array1::from_vec(bn.b.clone()),
                )?;
                if w_bn.len() != conv[l].out_dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "bn {l} has {} channels but conv layer {l} outputs {}",
                        w_bn.len(),
                        conv[l].out_dim()
                    )));
                }
                match &mut conv[l] {
                    ConvLayer::Gcn(d) => compose_bn(&mut [&mut d.weight], &mut d.bias, &w_bn, &b_bn),
                    ConvLayer::Sage {
                        w_neigh,
                        w_self,
                        bias,
                        ..
                    } => compose_bn(&mut [w_neigh, w_self], bias, &w_bn, &b_bn),
                    ConvLayer::Gin { mlp, .. } => {
                        let last = mlp.last_mut().expect("validated non-empty");
                        compose_bn(&mut [&mut last.weight], &mut last.bias, &w_bn, &b_bn)
                    }
                }
            }
        }
        ModelSpec::new(conv, self.pooling, classifier, self.num_classes)
    }

    pub fn from_model(model: &ModelSpec) -> Self {
        let conv_layers = model
            .conv_layers
            .iter()
            .map(|c| match c {
                ConvLayer::Gcn(d) => ConvJson {
                    w: Some(rows(&d.weight)),
                    b: d.bias.as_ref().map(|b| b.to_vec()),
                    activation: Some(d.activation),
                    ..Default::default()
                },
                ConvLayer::Sage {
                    w_neigh,
                    w_self,
                    bias,
                    activation,
                } => ConvJson {
                    w_phi: Some(rows(w_neigh)),
                    w_psi: Some(rows(w_self)),
                    b: bias.as_ref().map(|b| b.to_vec()),
                    activation: Some(*activation),
                    ..Default::default()
                },
                ConvLayer::Gin { eps, mlp } => ConvJson {
                    eps: Some(*eps),
                    mlp: Some(mlp.iter().map(dense_to_json).collect()),
                    ..Default::default()
                },
            })
            .collect();
        ModelJson {
            arch: model.arch().to_string(),
            conv_layers,
            pooling: model.pooling,
            classifier: model.classifier.iter().map(dense_to_json).collect(),
            num_classes: model.num_classes,
            bn: None,
        }
    }
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}:{location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let j: ModelJson = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("{}:{}", e.line(), e.column()), e))?;
    j.into_model()
}

pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&ModelJson::from_model(model))
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Shape of a randomly initialised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomModelConfig {
    pub arch: Arch,
    pub feature_dim: usize,
    pub conv_widths: Vec<usize>,
    /// Widths of the hidden classifier layers (the last layer maps to `num_classes`).
    pub classifier_widths: Vec<usize>,
    pub num_classes: usize,
    pub pooling: Pooling,
    /// GIN MLP depth.
    pub gin_mlp_depth: usize,
    pub with_bias: bool,
    pub bias_scale: f64,
}

impl RandomModelConfig {
    /// Three conv layers of width `hidden`, a two-layer classifier.
    pub fn reference(arch: Arch, feature_dim: usize, hidden: usize, num_classes: usize) -> Self {
        RandomModelConfig {
            arch,
            feature_dim,
            conv_widths: vec![hidden; 3],
            classifier_widths: vec![hidden],
            num_classes,
            pooling: Pooling::Mean,
            gin_mlp_depth: 2,
            with_bias: true,
            bias_scale: 0.1,
        }
    }
}

/// Glorot-uniform weights, uniform biases in `±bias_scale`, GIN eps in `[0, 0.5)`.
pub fn random_model(cfg: &RandomModelConfig, seed: u64) -> Result<ModelSpec> {
    if cfg.conv_widths.is_empty() || cfg.feature_dim == 0 || cfg.num_classes == 0 {
        return Err(Error::InvalidArgument(
            "random model needs at least one conv layer, a feature dim and a class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = |rng: &mut ChaCha8Rng, i: usize, o: usize, act: Activation| {
        let limit = (6.0 / (i + o) as f64).sqrt();
        let weight = Array2::from_shape_fn((i, o), |_| rng.gen_range(-limit..limit));
        let bias = cfg.with_bias.then(|| {
            Array1::from_shape_fn(o, |_| rng.gen_range(-cfg.bias_scale..=cfg.bias_scale))
        });
        DenseLayer {
            weight,
            bias,
            activation: act,
        }
    };
    let mut conv = Vec::new();
    let mut d_in = cfg.feature_dim;
    for &w in &cfg.conv_widths {
        let layer = match cfg.arch {
            Arch::Gcn => ConvLayer::Gcn(dense(&mut rng, d_in, w, Activation::Relu)),
            Arch::Sage => {
                let a = dense(&mut rng, d_in, w, Activation::Relu);
                let b = dense(&mut rng, d_in, w, Activation::Relu);
                ConvLayer::Sage {
                    w_neigh: a.weight,
                    w_self: b.weight,
                    bias: a.bias,
                    activation: Activation::Relu,
                }
            }
            Arch::Gin => {
                let depth = cfg.gin_mlp_depth.max(1);
                let mut mlp = Vec::with_capacity(depth);
                let mut i = d_in;
                for _ in 0..depth {
                    mlp.push(dense(&mut rng, i, w, Activation::Relu));
                    i = w;
                }
                ConvLayer::Gin {
                    eps: rng.gen_range(0.0..0.5),
                    mlp,
                }
            }
        };
        conv.push(layer);
        d_in = w;
    }
    let mut classifier = Vec::new();
    for &w in &cfg.classifier_widths {
        classifier.push(dense(&mut rng, d_in, w, Activation::Relu));
        d_in = w;
    }
    classifier.push(dense(&mut rng, d_in, cfg.num_classes, Activation::None));
    ModelSpec::new(conv, cfg.pooling, classifier, cfg.num_classes)
}
