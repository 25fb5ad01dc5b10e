//! On-disk dataset bundles.
//!
//! A bundle is a directory with a `bundle.toml` manifest:
//!
//! ```toml
//! name = "cora"
//! num_classes = 7
//! edges = "edges.tsv"        # src<TAB>dst per line, '#' comments
//! features = "features.csv"  # one comma-separated row per node, no header
//! labels = "labels.txt"      # one integer per line
//! provenance = "converted from the public Planetoid release"
//! ```
//!
//! Paths are relative to the manifest. The node count is the number of
//! feature rows.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{graph_homophily, Graph};
use crate::matrix::Matrix;

pub const MANIFEST: &str = "bundle.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub name: String,
    pub num_classes: usize,
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// `None` when every node is isolated.
    pub homophily: Option<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graph: Graph, features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n {
            return Err(Error::DimensionMismatch {
                context: "feature rows vs graph nodes",
                expected: n,
                actual: features.rows(),
            });
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                context: "labels vs graph nodes",
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange { row, label, num_classes });
        }
        Ok(Self {
            name: name.into(),
            graph,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            name: self.name.clone(),
            num_nodes: self.num_nodes(),
            num_edges: self.graph.num_edges(),
            feature_dim: self.features.cols(),
            num_classes: self.num_classes,
            homophily: graph_homophily(&self.graph, &self.labels).ok(),
        }
    }

    /// Loads and validates a bundle from its directory or manifest path.
    pub fn load_bundle(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: BundleManifest = toml::from_str(&fs::read_to_string(&manifest_path)?)?;
        let features = read_features(&dir.join(&manifest.features))?;
        let labels = read_labels(&dir.join(&manifest.labels))?;
        if labels.len() != features.rows() {
            return Err(Error::Parse {
                path: dir.join(&manifest.labels),
                line: labels.len().min(features.rows()) + 1,
                message: format!("{} labels for {} feature rows", labels.len(), features.rows()),
            });
        }
        let graph = Graph::read_edge_list(&dir.join(&manifest.edges), features.rows())?;
        let ds = Self::new(manifest.name, graph, features, labels, manifest.num_classes)?;
        let s = ds.summary();
        log::info!(
            "loaded {}: n={} |E|={} d={} C={} homophily={}",
            s.name,
            s.num_nodes,
            s.num_edges,
            s.feature_dim,
            s.num_classes,
            s.homophily.map_or("undefined".into(), |h| format!("{h:.4}"))
        );
        Ok(ds)
    }

    /// Writes the dataset as a bundle into `dir`.
    pub fn write_bundle(&self, dir: &Path, provenance: &str) -> Result<BundleManifest> {
        fs::create_dir_all(dir)?;
        let manifest = BundleManifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            edges: "edges.tsv".into(),
            features: "features.csv".into(),
            labels: "labels.txt".into(),
            provenance: provenance.into(),
        };
        self.graph.write_edge_list(&dir.join(&manifest.edges))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(&manifest.features))?;
        for r in 0..self.features.rows() {
            w.write_record(self.features.row(r).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(dir.join(&manifest.labels), labels)?;
        fs::write(dir.join(MANIFEST), toml::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn read_features(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("feature row {i}: {message}"),
        };
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => return Err(err(format!("{} columns, expected {c}", record.len()))),
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|e| err(format!("column {j}: {field:?}: {e}")))?;
            if !v.is_finite() {
                return Err(err(format!("column {j} is not finite")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad label {:?}: {e}", l.trim()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, features: &str) {
        fs::write(
            dir.join(MANIFEST),
            "name = \"tiny\"\nnum_classes = 2\nedges = \"e.tsv\"\nfeatures = \"x.csv\"\nlabels = \"y.txt\"\n",
        )
        .unwrap();
        fs::write(dir.join("e.tsv"), "# five nodes\n0\t1\n1\t2\n2\t3\n3\t4\n4\t0\n1\t0\n").unwrap();
        fs::write(dir.join("x.csv"), features).unwrap();
        fs::write(dir.join("y.txt"), "0\n0\n1\n1\n0\n").unwrap();
    }

    #[test]
    fn five_node_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1,0\n0,1\n1,1\n0.5,-2\n0,0\n");
        let ds = Dataset::load_bundle(dir.path()).unwrap();
        assert_eq!(ds.num_nodes(), 5);
        assert_eq!(ds.graph.num_edges(), 5);
        assert_eq!(ds.graph.degrees(), vec![2; 5]);
        assert_eq!(ds.labels, vec![0, 0, 1, 1, 0]);
        assert_eq!(ds.features.row(3), &[0.5, -2.0]);
        // 5-cycle: node 0 agrees with both neighbours, every other node with one.
        assert!((ds.summary().homophily.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn corrupted_feature_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1,0\n0,1\n1,oops\n0.5,-2\n0,0\n");
        let err = Dataset::load_bundle(dir.path()).unwrap_err().to_string();
        assert!(err.contains("feature row 2"), "{err}");
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn ragged_and_mismatched_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "1,0\n0,1,2\n1,1\n0.5,-2\n0,0\n");
        assert!(Dataset::load_bundle(dir.path()).is_err());
        write_fixture(dir.path(), "1,0\n0,1\n1,1\n0.5,-2\n");
        let err = Dataset::load_bundle(dir.path()).unwrap_err().to_string();
        assert!(err.contains("5 labels for 4 feature rows"), "{err}");
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let graph = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let x = Matrix::from_fn(4, 3, |r, c| (r as f64) * 0.1 - c as f64 / 3.0);
        let ds = Dataset::new("rt", graph, x, vec![0, 2, 1, 1], 3).unwrap();
        ds.write_bundle(dir.path(), "test").unwrap();
        let back = Dataset::load_bundle(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.graph, ds.graph);
    }

    #[test]
    fn label_out_of_range() {
        let g = Graph::empty(2);
        assert!(Dataset::new("x", g, Matrix::zeros(2, 1), vec![0, 3], 2).is_err());
    }
}
