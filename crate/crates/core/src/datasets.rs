//! Benchmark graph files and synthetic graphs with a chosen homophily.
//!
//! Node files hold one node per line, `node_id<TAB>f_1,...,f_d<TAB>label`;
//! edge files hold `src<TAB>dst`. Node ids are 0-based, files are UTF-8
//! with LF line endings. Edges are symmetrised on load.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub node_file: PathBuf,
    pub edge_file: PathBuf,
    pub expected_nodes: Option<usize>,
    pub expected_edges: Option<usize>,
    pub expected_features: Option<usize>,
    pub expected_classes: Option<usize>,
}

/// Published sizes of the benchmark graphs: (name, nodes, features, classes).
///
/// Edge counts are left unchecked: the published tallies mix directed and
/// duplicated edges and do not match the symmetrised, de-duplicated graph.
pub const BENCHMARKS: &[(&str, usize, usize, usize)] = &[
    ("cora", 2708, 1433, 7),
    ("citeseer", 3327, 3703, 6),
    ("pubmed", 19717, 500, 3),
    ("squirrel", 5201, 2089, 5),
    ("chameleon", 2277, 2325, 5),
    ("cornell", 183, 1703, 5),
    ("texas", 183, 1703, 5),
    ("wisconsin", 251, 1703, 5),
];

impl DatasetDescriptor {
    /// Descriptor without size expectations.
    pub fn new(name: impl Into<String>, node_file: impl Into<PathBuf>, edge_file: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            node_file: node_file.into(),
            edge_file: edge_file.into(),
            expected_nodes: None,
            expected_edges: None,
            expected_features: None,
            expected_classes: None,
        }
    }

    /// A known benchmark stored as `<data_dir>/<name>/nodes.tsv` and
    /// `<data_dir>/<name>/edges.tsv`.
    pub fn benchmark(name: &str, data_dir: &Path) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let &(name, nodes, features, classes) = BENCHMARKS
            .iter()
            .find(|b| b.0 == key)
            .ok_or_else(|| Error::Param(format!("unknown benchmark dataset '{name}'")))?;
        let dir = data_dir.join(name);
        Ok(Self {
            expected_nodes: Some(nodes),
            expected_features: Some(features),
            expected_classes: Some(classes),
            ..Self::new(name, dir.join("nodes.tsv"), dir.join("edges.tsv"))
        })
    }

    pub fn files_exist(&self) -> bool {
        self.node_file.is_file() && self.edge_file.is_file()
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format_err(path, 0, e.to_string()))
}

struct NodeRecord {
    id: usize,
    features: Vec<f64>,
    label: usize,
}

fn parse_node_line(path: &Path, lineno: usize, line: &str) -> Result<NodeRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format_err(path, lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
    }
    let id = fields[0]
        .parse()
        .map_err(|_| format_err(path, lineno, format!("bad node id '{}'", fields[0])))?;
    let features = if fields[1].is_empty() {
        Vec::new()
    } else {
        fields[1]
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err(path, lineno, format!("bad feature value '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let label = fields[2]
        .parse()
        .map_err(|_| format_err(path, lineno, format!("bad label '{}'", fields[2])))?;
    Ok(NodeRecord { id, features, label })
}

/// Loads a graph and checks it against the descriptor's expectations.
pub fn load_graph(desc: &DatasetDescriptor) -> Result<Graph> {
    let node_path = desc.node_file.as_path();
    let text = read_text(node_path)?;
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_node_line(node_path, k + 1, line)?);
    }
    let n = records.len();
    let d = records.first().map_or(0, |r| r.features.len());
    let mut features = Array2::zeros((n, d));
    let mut labels = vec![0usize; n];
    let mut seen = vec![false; n];
    for r in &records {
        if r.id >= n || seen[r.id] {
            return Err(Error::Validation(format!(
                "node ids must be exactly 0..{n}; got duplicate or out-of-range id {}",
                r.id
            )));
        }
        if r.features.len() != d {
            return Err(Error::Validation(format!(
                "node {} has {} features, expected {d}",
                r.id,
                r.features.len()
            )));
        }
        seen[r.id] = true;
        features.row_mut(r.id).assign(&ndarray::ArrayView1::from(&r.features));
        labels[r.id] = r.label;
    }
    let class_count = desc
        .expected_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));

    let edge_path = desc.edge_file.as_path();
    let text = read_text(edge_path)?;
    let mut edges = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(edge_path, k + 1, "expected 2 tab-separated fields"));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| format_err(edge_path, k + 1, format!("bad node id '{s}'")))
        };
        edges.push((parse(a)?, parse(b)?));
    }

    let graph = Graph::from_edges(features, labels, class_count, &edges)?;
    let checks = [
        ("nodes", desc.expected_nodes, graph.n_nodes()),
        ("edges", desc.expected_edges, graph.n_edges()),
        ("features", desc.expected_features, graph.n_features()),
        ("classes", desc.expected_classes, graph.class_count()),
    ];
    for (what, expected, actual) in checks {
        if let Some(expected) = expected {
            if expected != actual {
                return Err(Error::Validation(format!(
                    "{}: expected {expected} {what}, found {actual}",
                    desc.name
                )));
            }
        }
    }
    Ok(graph)
}

/// Writes a graph in the node/edge text format read by [`load_graph`].
pub fn write_graph(graph: &Graph, node_file: &Path, edge_file: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(node_file)?);
    for (i, row) in graph.features().outer_iter().enumerate() {
        let feats: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{i}\t{}\t{}", feats.join(","), graph.labels()[i])?;
    }
    out.flush()?;
    let mut out = BufWriter::new(fs::File::create(edge_file)?);
    for (u, v) in graph.edges() {
        writeln!(out, "{u}\t{v}")?;
    }
    out.flush()?;
    Ok(())
}

/// Feature noise used by [`synth_graph`].
pub const SYNTH_NOISE_STD: f64 = 0.1;
const SYNTH_H_TOLERANCE: f64 = 0.05;

/// Random graph with round-robin labels, features `centroid + noise` around
/// orthonormal class centroids, and `2n` edges of which a `target_h`
/// fraction join nodes of the same class.
pub fn synth_graph(n: usize, classes: usize, d: usize, target_h: f64, seed: u64) -> Result<Graph> {
    synth_graph_with_noise(n, classes, d, target_h, SYNTH_NOISE_STD, seed)
}

/// [`synth_graph`] with a chosen per-entry feature noise deviation.
pub fn synth_graph_with_noise(
    n: usize,
    classes: usize,
    d: usize,
    target_h: f64,
    noise: f64,
    seed: u64,
) -> Result<Graph> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Param(format!("noise deviation {noise} must be finite and non-negative")));
    }
    if classes == 0 || n < classes {
        return Err(Error::Param(format!("need 1 <= classes <= n, got classes={classes}, n={n}")));
    }
    if d < classes {
        return Err(Error::Param(format!(
            "orthogonal class centroids need d >= classes, got d={d}, classes={classes}"
        )));
    }
    if !(0.0..=1.0).contains(&target_h) {
        return Err(Error::Param(format!("target homophily {target_h} outside [0, 1]")));
    }
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut centroids: Array2<f64> = Array2::from_shape_fn((classes, d), |_| normal.sample(&mut rng));
    for k in 0..classes {
        for j in 0..k {
            let proj = centroids.row(j).dot(&centroids.row(k));
            let prev = centroids.row(j).to_owned();
            centroids.row_mut(k).scaled_add(-proj, &prev);
        }
        let norm = centroids.row(k).dot(&centroids.row(k)).sqrt();
        centroids.row_mut(k).mapv_inplace(|x| x / norm);
    }

    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Array2::zeros((n, d));
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        row.assign(&centroids.row(labels[i]));
        row.mapv_inplace(|c| c + noise * normal.sample(&mut rng));
    }

    let members: Vec<Vec<usize>> = (0..classes)
        .map(|k| (k..n).step_by(classes).collect())
        .collect();
    let total_pairs = n * (n - 1) / 2;
    let intra_avail: usize = members.iter().map(|m| m.len() * m.len().saturating_sub(1) / 2).sum();
    let inter_avail = total_pairs - intra_avail;

    let target_edges = (2 * n).min(total_pairs);
    let want_intra = ((target_h * target_edges as f64).round() as usize).min(intra_avail);
    let want_inter = (target_edges - want_intra.min(target_edges)).min(inter_avail);

    let mut taken = HashSet::new();
    let mut edges = Vec::with_capacity(want_intra + want_inter);
    for intra in [true, false] {
        let (want, avail) = if intra { (want_intra, intra_avail) } else { (want_inter, inter_avail) };
        let accept = |u: usize, v: usize| (labels[u] == labels[v]) == intra;
        if want * 2 > avail {
            let mut candidates: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                .filter(|&(u, v)| accept(u, v))
                .collect();
            for k in 0..want {
                let pick = rng.random_range(k..candidates.len());
                candidates.swap(k, pick);
                edges.push(candidates[k]);
            }
            continue;
        }
        let mut added = 0;
        while added < want {
            let u = rng.random_range(0..n);
            let v = if intra {
                let m = &members[labels[u]];
                m[rng.random_range(0..m.len())]
            } else {
                rng.random_range(0..n)
            };
            if u == v || !accept(u, v) {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if taken.insert(key) {
                edges.push(key);
                added += 1;
            }
        }
    }

    let total = edges.len();
    let realized = if total == 0 { f64::NAN } else { want_intra as f64 / total as f64 };
    if !((realized - target_h).abs() <= SYNTH_H_TOLERANCE) {
        return Err(Error::Param(format!(
            "cannot realise homophily {target_h} with n={n}, classes={classes} (best {realized:.3})"
        )));
    }
    Graph::from_edges(features, labels, classes, &edges)
}
