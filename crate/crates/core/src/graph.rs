//! Graphs, datasets and their on-disk formats.
//!
//! Adjacency is stored dense. Undirected graphs keep both directed entries of
//! every edge; self-loops are never stored (architectures add them).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An edge of the explained graph. For undirected graphs `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
}

impl Edge {
    pub fn new(u: usize, v: usize) -> Self {
        Edge { u, v }
    }

    /// Canonical form for an undirected graph.
    pub fn undirected(a: usize, b: usize) -> Self {
        Edge {
            u: a.min(b),
            v: a.max(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Array2<f64>,
    directed: bool,
    features: Array2<f64>,
    label: Option<usize>,
    node_labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Undirected edge lists are symmetrized.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        directed: bool,
        features: Array2<f64>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidGraph("num_nodes must be positive".into()));
        }
        let mut adjacency = Array2::zeros((num_nodes, num_nodes));
        for (k, &(i, j)) in edges.iter().enumerate() {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge {k} = [{i},{j}] references a node outside 0..{num_nodes}"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!(
                    "edge {k} = [{i},{j}] is a self-loop; self-loops are not stored"
                )));
            }
            adjacency[[i, j]] = 1.0;
            if !directed {
                adjacency[[j, i]] = 1.0;
            }
        }
        Self::from_adjacency(adjacency, directed, features)
    }

    /// Builds a graph from a dense 0/1 adjacency matrix, validating every invariant.
    pub fn from_adjacency(
        adjacency: Array2<f64>,
        directed: bool,
        features: Array2<f64>,
    ) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 || adjacency.ncols() != n {
            return Err(Error::InvalidGraph(format!(
                "adjacency must be a non-empty square matrix, got {:?}",
                adjacency.dim()
            )));
        }
        if features.nrows() != n {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows but the graph has {n} nodes",
                features.nrows()
            )));
        }
        for ((i, j), &a) in adjacency.indexed_iter() {
            if a != 0.0 && a != 1.0 {
                return Err(Error::InvalidGraph(format!(
                    "adjacency entry ({i},{j}) = {a} is not 0 or 1"
                )));
            }
            if i == j && a != 0.0 {
                return Err(Error::InvalidGraph(format!("diagonal entry ({i},{i}) is non-zero")));
            }
            if !directed && a != adjacency[[j, i]] {
                return Err(Error::InvalidGraph(format!(
                    "undirected graph has asymmetric adjacency at ({i},{j})"
                )));
            }
        }
        if let Some(((i, j), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidGraph(format!("feature ({i},{j}) = {v} is not finite")));
        }
        Ok(Graph {
            adjacency,
            directed,
            features,
            label: None,
            node_labels: None,
        })
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_node_labels(mut self, node_labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(labels) = &node_labels {
            if labels.len() != self.num_nodes() {
                return Err(Error::InvalidGraph(format!(
                    "{} node labels for {} nodes",
                    labels.len(),
                    self.num_nodes()
                )));
            }
        }
        self.node_labels = node_labels;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    /// Edges in lexicographic order. Undirected edges appear once with `u < v`.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[[i, j]] != 0.0 && (self.directed || i < j) {
                    out.push(Edge::new(i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn has_edge(&self, edge: Edge) -> bool {
        edge.u < self.num_nodes()
            && edge.v < self.num_nodes()
            && self.adjacency[[edge.u, edge.v]] != 0.0
    }

    /// Copy of the graph with the given edges removed. Node features are untouched.
    pub fn without_edges(&self, removed: &[Edge]) -> Graph {
        let mut g = self.clone();
        for e in removed {
            g.adjacency[[e.u, e.v]] = 0.0;
            if !self.directed {
                g.adjacency[[e.v, e.u]] = 0.0;
            }
        }
        g
    }

    /// Copy of the graph keeping only the given edges; the node set is unchanged.
    pub fn with_only_edges(&self, kept: &[Edge]) -> Graph {
        let keep: BTreeSet<Edge> = kept.iter().copied().collect();
        let removed: Vec<Edge> = self.edges().into_iter().filter(|e| !keep.contains(e)).collect();
        self.without_edges(&removed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(rename = "graph")]
    GraphClassification,
    #[serde(rename = "node")]
    NodeClassification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    graphs: Vec<Graph>,
    task: Task,
    num_classes: usize,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, task: Task, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidDataset("num_classes must be positive".into()));
        }
        if let Some(first) = graphs.first() {
            let d = first.feature_dim();
            for (k, g) in graphs.iter().enumerate() {
                if g.feature_dim() != d {
                    return Err(Error::InvalidDataset(format!(
                        "graph {k} has feature dim {} but graph 0 has {d}",
                        g.feature_dim()
                    )));
                }
                if let Some(l) = g.label() {
                    if l >= num_classes {
                        return Err(Error::InvalidDataset(format!(
                            "graph {k} label {l} >= num_classes {num_classes}"
                        )));
                    }
                }
                if let Some(ls) = g.node_labels() {
                    if let Some(&l) = ls.iter().find(|&&l| l >= num_classes) {
                        return Err(Error::InvalidDataset(format!(
                            "graph {k} has node label {l} >= num_classes {num_classes}"
                        )));
                    }
                }
            }
        }
        Ok(Dataset {
            graphs,
            task,
            num_classes,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.graphs.first().map(Graph::feature_dim)
    }
}

// ---- serialized forms ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphJson {
    pub num_nodes: usize,
    #[serde(default)]
    pub directed: bool,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetJson {
    pub task: Task,
    pub num_classes: usize,
    pub graphs: Vec<GraphJson>,
}

/// Sibling metadata for an edge CSV: everything but the edge list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSidecar {
    pub num_nodes: usize,
    #[serde(default)]
    pub directed: bool,
    pub x: Vec<Vec<f64>>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub node_labels: Option<Vec<usize>>,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

pub(crate) fn features_from_rows(rows: &[Vec<f64>], num_nodes: usize, ctx: &str) -> Result<Array2<f64>> {
    if rows.len() != num_nodes {
        return Err(Error::parse(
            format!("{ctx}.x"),
            format!("{} feature rows for {num_nodes} nodes", rows.len()),
        ));
    }
    let d = rows.first().map_or(0, Vec::len);
    if let Some(k) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::parse(
            format!("{ctx}.x[{k}]"),
            format!("row has {} features, expected {d}", rows[k].len()),
        ));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((num_nodes, d), flat).map_err(|e| Error::parse(format!("{ctx}.x"), e))
}

impl GraphJson {
    pub fn into_graph(self, ctx: &str) -> Result<Graph> {
        let x = features_from_rows(&self.x, self.num_nodes, ctx)?;
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::from_edges(self.num_nodes, &edges, self.directed, x)
            .map_err(|e| Error::InvalidGraph(format!("{ctx}: {e}")))?
            .with_label(self.label)
            .with_node_labels(self.node_labels)
    }

    pub fn from_graph(g: &Graph) -> Self {
        GraphJson {
            num_nodes: g.num_nodes(),
            directed: g.is_directed(),
            edges: g.edges().iter().map(|e| [e.u, e.v]).collect(),
            x: g.features().rows().into_iter().map(|r| r.to_vec()).collect(),
            label: g.label(),
            node_labels: g.node_labels().map(<[usize]>::to_vec),
        }
    }
}

impl DatasetJson {
    pub fn from_dataset(ds: &Dataset) -> Self {
        DatasetJson {
            task: ds.task(),
            num_classes: ds.num_classes(),
            graphs: ds.graphs().iter().map(GraphJson::from_graph).collect(),
        }
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        let graphs = self
            .graphs
            .into_iter()
            .enumerate()
            .map(|(k, g)| g.into_graph(&format!("graphs[{k}]")))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(graphs, self.task, self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Json,
    EdgeCsv,
}

impl GraphFormat {
    /// Infers the format from the file extension.
    pub fn from_path(path: &Path) -> GraphFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => GraphFormat::EdgeCsv,
            _ => GraphFormat::Json,
        }
    }
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::parse(
        format!("{}:{}:{}", path.display(), e.line(), e.column()),
        e,
    )
}

fn infer_num_classes(graphs: &[Graph]) -> usize {
    graphs
        .iter()
        .flat_map(|g| {
            g.label()
                .into_iter()
                .chain(g.node_labels().unwrap_or(&[]).iter().copied())
        })
        .max()
        .map_or(1, |m| m + 1)
}

/// Loads a dataset. JSON files may hold a dataset or a single graph.
pub fn load_graphs(path: &Path, format: GraphFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        GraphFormat::Json => {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
            if value.get("graphs").is_some() {
                let ds: DatasetJson = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
                ds.into_dataset()
            } else {
                let g: GraphJson = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
                let graph = g.into_graph(&path.display().to_string())?;
                let task = if graph.node_labels().is_some() && graph.label().is_none() {
                    Task::NodeClassification
                } else {
                    Task::GraphClassification
                };
                let k = infer_num_classes(std::slice::from_ref(&graph));
                Dataset::new(vec![graph], task, k)
            }
        }
        GraphFormat::EdgeCsv => load_edge_csv(path, &text),
    }
}

fn load_edge_csv(path: &Path, text: &str) -> Result<Dataset> {
    let sidecar_path = path.with_extension("json");
    let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let meta: CsvSidecar =
        serde_json::from_str(&sidecar_text).map_err(|e| json_error(&sidecar_path, e))?;

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "src,dst" => {}
        _ => {
            return Err(Error::parse(
                format!("{}:1", path.display()),
                "expected header `src,dst`",
            ))
        }
    }
    let mut edges = Vec::new();
    for (k, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = || format!("{}:{}", path.display(), k + 1);
        let mut parts = line.split(',');
        let mut field = |name: &str| -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| Error::parse(loc(), format!("missing field `{name}`")))?
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(loc(), format!("field `{name}`: {e}")))
        };
        let src = field("src")?;
        let dst = field("dst")?;
        if parts.next().is_some() {
            return Err(Error::parse(loc(), "expected exactly two fields"));
        }
        edges.push((src, dst));
    }

    let x = features_from_rows(&meta.x, meta.num_nodes, &sidecar_path.display().to_string())?;
    let graph = Graph::from_edges(meta.num_nodes, &edges, meta.directed, x)?
        .with_label(meta.label)
        .with_node_labels(meta.node_labels)?;
    let task = meta.task.unwrap_or(if graph.label().is_none() && graph.node_labels().is_some() {
        Task::NodeClassification
    } else {
        Task::GraphClassification
    });
    let k = meta
        .num_classes
        .unwrap_or_else(|| infer_num_classes(std::slice::from_ref(&graph)));
    Dataset::new(vec![graph], task, k)
}

pub fn save_json(dataset: &Dataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&DatasetJson::from_dataset(dataset))
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
