use anyhow::{Context, Result};
use gnn_attrib::attribution::{AttributionOptions, AttributionResult, Attributor};
use gnn_attrib::expansion::{enumerate_terms, VariableMode};
use gnn_attrib::forward::run_forward;
use gnn_attrib::generate::random_graph;
use gnn_attrib::graph::{save_json, Graph};
use gnn_attrib::metrics::{evaluate, extract_explanation, EmbeddingPoint, Explanation, MetricsConfig, MetricsReport};
use gnn_attrib::model::{load_model, random_model, save_model, Arch, ConvLayer, ModelSpec, Pooling, RandomModelConfig};
use gnn_attrib::oracle::{check_products, expand_trace, sum_products, OracleMode};
use gnn_attrib::par::Executor;
use serde::Serialize;

use crate::config::{absolute, create_dir, generate, write_json, Failure, RunConfig};
use crate::{EmbeddingArg, EvalArgs, ExplainArgs, GenArgs, InitModelArgs, Metric, OracleArgs, TermsArgs};

/// Largest relative completeness residual accepted before a run is flagged.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;
pub const ORACLE_TOLERANCE: f64 = 1e-8;

#[derive(Serialize)]
struct GraphOutput {
    graph: usize,
    predicted_class: usize,
    explained_class: usize,
    attribution: AttributionResult,
    explanations: Vec<Explanation>,
}

#[derive(Serialize)]
struct ManifestEntry {
    graph: usize,
    file: String,
    predicted_class: usize,
    max_relative_residual: f64,
    residual: Vec<f64>,
}

#[derive(Serialize)]
struct ExplainManifest<'a> {
    config: &'a RunConfig,
    tolerance: f64,
    max_relative_residual: f64,
    graphs: Vec<ManifestEntry>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn explain_one(
    attributor: &Attributor,
    graph: &Graph,
    id: usize,
    cfg: &RunConfig,
    opts: AttributionOptions,
) -> gnn_attrib::Result<GraphOutput> {
    let attribution = attributor.attribute(graph, opts)?;
    let predicted_class = argmax(&attribution.output);
    let class = cfg.class.unwrap_or(predicted_class);
    let mut explanations = Vec::new();
    if graph.num_edges() > 0 {
        for &s in &cfg.sparsities {
            explanations.push(extract_explanation(&attribution, graph, s, class)?.with_graph_id(id));
        }
    }
    Ok(GraphOutput {
        graph: id,
        predicted_class,
        explained_class: class,
        attribution,
        explanations,
    })
}

fn check_class(model: &ModelSpec, class: Option<usize>) -> Result<()> {
    match class {
        Some(c) if c >= model.num_classes => {
            Err(Failure::Usage(format!("--class {c} but the model has {} classes", model.num_classes)).into())
        }
        _ => Ok(()),
    }
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve("explain", &a.common, a.sparsity.clone())?;
    cfg.class = a.class;
    cfg.node = a.node;
    let model = cfg.load_model()?;
    let data = cfg.load_data()?;
    check_class(&model, cfg.class)?;
    create_dir(&cfg.out)?;
    let opts = AttributionOptions {
        features_as_variables: cfg.features_as_variables,
        calibrate: cfg.calibrate,
        target_row: cfg.node,
    };
    let attributor = Attributor::new(&model)?;
    let exec = Executor::new(cfg.jobs);
    let outputs = exec.map_range(data.len(), |i| explain_one(&attributor, &data.graphs()[i], i, &cfg, opts));

    let mut entries = Vec::with_capacity(outputs.len());
    let mut worst: f64 = 0.0;
    for (i, out) in outputs.into_iter().enumerate() {
        let out = out.with_context(|| format!("graph {i}"))?;
        let file = format!("graph_{i:04}.json");
        write_json(&cfg.out.join(&file), &out)?;
        let rel = (0..out.attribution.num_classes())
            .map(|c| out.attribution.relative_residual(c))
            .fold(0.0, f64::max);
        worst = worst.max(rel);
        entries.push(ManifestEntry {
            graph: i,
            file,
            predicted_class: out.predicted_class,
            max_relative_residual: rel,
            residual: out.attribution.residual.clone(),
        });
    }
    let manifest = ExplainManifest {
        config: &cfg,
        tolerance: RESIDUAL_TOLERANCE,
        max_relative_residual: worst,
        graphs: entries,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    println!(
        "explained {} graph(s) into {}; max relative residual {worst:.2e}",
        data.len(),
        cfg.out.display()
    );
    if worst > RESIDUAL_TOLERANCE {
        return Err(Failure::Numerical(format!(
            "completeness residual {worst:.2e} exceeds {RESIDUAL_TOLERANCE:e}"
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct SuiteReport {
    name: &'static str,
    max_abs_deviation: f64,
    tolerance: f64,
    passed: bool,
    cases: usize,
}

#[derive(Serialize)]
struct OracleConfig {
    nodes: usize,
    layers: usize,
    models: usize,
    width: usize,
    features: usize,
    seed: u64,
    inject_fault: bool,
}

#[derive(Serialize)]
struct OracleReport {
    config: OracleConfig,
    suites: Vec<SuiteReport>,
    passed: bool,
}

fn perturb_first_weight(model: &mut ModelSpec) {
    let w = match &mut model.conv_layers[0] {
        ConvLayer::Gcn(d) => &mut d.weight,
        ConvLayer::Sage { w_neigh, .. } => w_neigh,
        ConvLayer::Gin { mlp, .. } => &mut mlp[0].weight,
    };
    w[[0, 0]] += 0.5;
}

pub fn check_oracle(a: OracleArgs) -> Result<()> {
    let mut suites = [
        ("reconstruction", 0.0_f64, ORACLE_TOLERANCE),
        ("mode_agreement", 0.0, 0.0),
        ("equal_contribution", 0.0, 0.0),
        ("equivalence", 0.0, ORACLE_TOLERANCE),
    ];
    let mut cases = 0;
    for (k, arch) in [Arch::Gcn, Arch::Sage, Arch::Gin].into_iter().enumerate() {
        for m in 0..a.models {
            let case_seed = a.seed.wrapping_mul(1000).wrapping_add((k * 100 + m) as u64);
            let graph = random_graph(a.nodes, a.features, 0.3, case_seed)?;
            let cfg = RandomModelConfig {
                conv_widths: vec![a.width; a.layers],
                classifier_widths: vec![a.width],
                ..RandomModelConfig::reference(arch, a.features, a.width, 2)
            };
            let mut model = random_model(&cfg, case_seed)?;
            let trace = run_forward(&model, &graph)?;
            if a.inject_fault {
                perturb_first_weight(&mut model);
            }
            let mode = VariableMode {
                features_as_variables: m % 2 == 1,
            };
            let products = expand_trace(&model, &trace, mode)?;
            let (rows, classes) = trace.logits.dim();
            let sums = sum_products(&products, rows, classes);
            let recon = (&sums - &trace.logits).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
            let mut modes: f64 = 0.0;
            let mut spread: f64 = 0.0;
            for z in &products {
                let unique = z.shares(OracleMode::UniqueVariables);
                let (lo, hi) = unique
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, v)| (lo.min(*v), hi.max(*v)));
                if !unique.is_empty() {
                    spread = spread.max(hi - lo);
                }
                if z.unique_count() == z.degree() {
                    for ((_, a), (_, b)) in unique.iter().zip(z.shares(OracleMode::Occurrences)) {
                        modes = modes.max((a - b).abs());
                    }
                }
            }
            let eq = check_products(&model, &trace, mode, products)?;
            let equivalence = eq.adjacency.max(eq.pattern).max(eq.feature);
            for (slot, v) in suites.iter_mut().zip([recon, modes, spread, equivalence]) {
                slot.1 = slot.1.max(v);
            }
            cases += 1;
        }
    }
    let suites: Vec<SuiteReport> = suites
        .into_iter()
        .map(|(name, dev, tol)| SuiteReport {
            name,
            max_abs_deviation: dev,
            tolerance: tol,
            passed: dev <= tol,
            cases,
        })
        .collect();
    let passed = suites.iter().all(|s| s.passed);
    for s in &suites {
        println!(
            "{:<20} max abs deviation {:.3e}  tolerance {:.0e}  {}",
            s.name,
            s.max_abs_deviation,
            s.tolerance,
            if s.passed { "PASS" } else { "FAIL" }
        );
    }
    let report = OracleReport {
        config: OracleConfig {
            nodes: a.nodes,
            layers: a.layers,
            models: a.models,
            width: a.width,
            features: a.features,
            seed: a.seed,
            inject_fault: a.inject_fault,
        },
        suites,
        passed,
    };
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    if !passed {
        return Err(Failure::Numerical("oracle check failed".into()).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config: &'a RunConfig,
    metric: Metric,
    k_max: usize,
    embedding: EmbeddingArg,
    report: &'a MetricsReport,
}

fn summary_csv(metric: Metric, report: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::new();
    match metric {
        Metric::Fidelity => {
            out.push_str("sparsity,mean,std,count\n");
            for p in &report.fidelity {
                out.push_str(&format!("{},{},{},{}\n", p.sparsity, p.mean, p.std, p.count));
            }
        }
        Metric::Discriminability => {
            out.push_str("sparsity,c1,c2,value,samples\n");
            for p in &report.discriminability {
                out.push_str(&format!("{},{},{},{},{}\n", p.sparsity, p.c1, p.c2, opt(p.value), p.samples));
            }
        }
        Metric::Stability => {
            out.push_str("sparsity,k,value,groups\n");
            for p in &report.stability {
                out.push_str(&format!("{},{},{},{}\n", p.sparsity, p.k, p.value, p.groups));
            }
        }
    }
    out
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let sparsities = a.sparsity.clone().unwrap_or_else(|| match a.metric {
        Metric::Fidelity => vec![0.5, 0.6, 0.7, 0.8, 0.9],
        _ => vec![0.7],
    });
    if matches!(a.metric, Metric::Stability) && a.k_max == 0 {
        return Err(Failure::Usage("--k-max must be at least 1".into()).into());
    }
    let cfg = RunConfig::resolve("eval", &a.common, sparsities)?;
    let model = cfg.load_model()?;
    let data = cfg.load_data()?;
    create_dir(&cfg.out)?;
    let metrics_cfg = MetricsConfig {
        sparsities: cfg.sparsities.clone(),
        attribution: AttributionOptions {
            features_as_variables: cfg.features_as_variables,
            calibrate: cfg.calibrate,
            target_row: None,
        },
        fidelity: matches!(a.metric, Metric::Fidelity),
        discriminability: matches!(a.metric, Metric::Discriminability),
        stability_max_k: if matches!(a.metric, Metric::Stability) { a.k_max } else { 0 },
        embedding: match a.embedding {
            EmbeddingArg::Pooled => EmbeddingPoint::Pooled,
            EmbeddingArg::FirstClassifier => EmbeddingPoint::FirstClassifier,
        },
    };
    let report = evaluate(&model, &data, &metrics_cfg, &Executor::new(cfg.jobs))?;
    let output = EvalOutput {
        config: &cfg,
        metric: a.metric,
        k_max: a.k_max,
        embedding: a.embedding,
        report: &report,
    };
    write_json(&cfg.out.join("metrics.json"), &output)?;
    report.write_csv(&cfg.out.join("samples.csv"))?;
    let summary = summary_csv(a.metric, &report);
    let path = cfg.out.join("summary.csv");
    std::fs::write(&path, &summary).with_context(|| format!("writing {}", path.display()))?;
    print!("{summary}");
    let worst = report.samples.iter().map(|s| s.max_relative_residual).fold(0.0, f64::max);
    if worst > RESIDUAL_TOLERANCE {
        return Err(Failure::Numerical(format!(
            "completeness residual {worst:.2e} exceeds {RESIDUAL_TOLERANCE:e}"
        ))
        .into());
    }
    Ok(())
}

pub fn terms(a: TermsArgs) -> Result<()> {
    let path = absolute(&a.model)?;
    let model = load_model(&path).with_context(|| format!("loading model {}", path.display()))?;
    let mode = VariableMode {
        features_as_variables: a.x_as_vars,
    };
    let terms = enumerate_terms(&model)?;
    for (i, t) in terms.iter().enumerate() {
        println!("{i:>3}  vars={:<2}  {}", t.num_variables(mode), t.signature());
    }
    println!("{} term classes", terms.len());
    Ok(())
}

pub fn init_model(a: InitModelArgs) -> Result<()> {
    let arch: Arch = a.arch.parse()?;
    let cfg = RandomModelConfig {
        conv_widths: vec![a.hidden; a.layers],
        pooling: if a.node_level { Pooling::None } else { Pooling::Mean },
        ..RandomModelConfig::reference(arch, a.features, a.hidden, a.classes)
    };
    let model = random_model(&cfg, a.seed)?;
    save_model(&model, &a.out)?;
    println!("wrote {} model to {}", arch, a.out.display());
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<()> {
    let data = generate(&a.generator)?;
    save_json(&data, &a.out)?;
    println!("wrote {} graphs to {}", data.len(), a.out.display());
    Ok(())
}
