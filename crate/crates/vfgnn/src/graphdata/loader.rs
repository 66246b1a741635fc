use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Graph};
use crate::diffcore::Tensor;

/// Dataset manifest: where to find the content/cites files and, optionally,
/// a file listing training node ids (one per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub content: PathBuf,
    pub cites: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mask: Option<PathBuf>,
    /// Scale each feature row to sum 1 — the usual preprocessing for
    /// bag-of-words citation datasets.
    #[serde(default)]
    pub row_normalize_features: bool,
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::read::GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

/// Loads a citation graph from the two-file text format.
///
/// Edges whose endpoints do not both appear in the content file are dropped;
/// the count of dropped lines is reported through the returned graph's
/// companion value. Label strings are mapped to integers by first appearance.
pub fn load_planetoid(
    content_path: &Path,
    cites_path: &Path,
) -> Result<(Graph, usize), DataError> {
    let content = BufReader::new(open_maybe_gz(content_path)?);
    let content_name = content_path.display().to_string();

    let mut node_names = Vec::new();
    let mut node_index: HashMap<String, usize> = HashMap::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;

    for (lineno, line) in content.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: content_name.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(DataError::Parse {
                path: content_name.clone(),
                line: lineno + 1,
                message: format!("expected id, features, label; got {} fields", fields.len()),
            });
        }
        let id = fields[0].to_string();
        let label = fields[fields.len() - 1].trim().to_string();
        let feats: Vec<f64> = fields[1..fields.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.trim().parse::<f64>().map_err(|_| DataError::Parse {
                    path: content_name.clone(),
                    line: lineno + 1,
                    message: format!("feature {} is not a number: {:?}", i + 1, f),
                })
            })
            .collect::<Result<_, _>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(DataError::Parse {
                    path: content_name.clone(),
                    line: lineno + 1,
                    message: format!("feature width {} differs from {}", feats.len(), d),
                });
            }
            _ => {}
        }
        if node_index.contains_key(&id) {
            return Err(DataError::Parse {
                path: content_name.clone(),
                line: lineno + 1,
                message: format!("duplicate node id {id:?}"),
            });
        }
        let label_id = *label_index.entry(label.clone()).or_insert_with(|| {
            label_names.push(label.clone());
            label_names.len() - 1
        });
        node_index.insert(id.clone(), node_names.len());
        node_names.push(id);
        labels.push(label_id);
        rows.push(feats);
    }

    if rows.is_empty() {
        return Err(DataError::Invalid(format!("empty content file {content_name}")));
    }
    let n_nodes = rows.len();
    let features =
        Tensor::from_rows(&rows).map_err(|e| DataError::Invalid(format!("features: {e}")))?;

    let cites = BufReader::new(open_maybe_gz(cites_path)?);
    let cites_name = cites_path.display().to_string();
    let mut edge_set = std::collections::HashSet::new();
    let mut dropped = 0usize;
    for (lineno, line) in cites.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: cites_name.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            return Err(DataError::Parse {
                path: cites_name.clone(),
                line: lineno + 1,
                message: "expected two node ids".into(),
            });
        };
        match (node_index.get(a), node_index.get(b)) {
            (Some(&u), Some(&v)) => {
                if u != v {
                    edge_set.insert((u.min(v), u.max(v)));
                }
            }
            _ => dropped += 1,
        }
    }
    let mut edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
    edges.sort_unstable();

    let n_classes = label_names.len();
    let graph = Graph {
        n_nodes,
        edges,
        features,
        labels,
        n_classes,
        train_mask: vec![false; n_nodes],
        test_mask: vec![false; n_nodes],
        node_names,
        label_names,
    };
    graph.validate()?;
    Ok((graph, dropped))
}

/// Resolves a manifest's paths against a root directory and loads the graph.
/// When the manifest has no train-mask file, a seeded 70/30 split is applied.
pub fn load_manifest(
    manifest_path: &Path,
    data_root: &Path,
    split_seed: u64,
) -> Result<Graph, DataError> {
    let file = File::open(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_reader(file)
        .map_err(|e| DataError::Config(format!("manifest {}: {e}", manifest_path.display())))?;
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            data_root.join(p)
        }
    };
    let (mut graph, _dropped) =
        load_planetoid(&resolve(&manifest.content), &resolve(&manifest.cites))?;
    if manifest.row_normalize_features {
        let cols = graph.features.cols();
        for r in 0..graph.n_nodes {
            let sum: f64 = graph.features.row(r).iter().sum();
            if sum != 0.0 {
                for v in &mut graph.features.data_mut()[r * cols..(r + 1) * cols] {
                    *v /= sum;
                }
            }
        }
    }
    match &manifest.train_mask {
        Some(mask_path) => {
            let path = resolve(mask_path);
            let reader = BufReader::new(open_maybe_gz(&path)?);
            let index: HashMap<&str, usize> = graph
                .node_names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect();
            let mut train = vec![false; graph.n_nodes];
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|source| DataError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let id = line.trim();
                if id.is_empty() {
                    continue;
                }
                let &v = index.get(id).ok_or_else(|| DataError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("unknown node id {id:?}"),
                })?;
                train[v] = true;
            }
            graph.test_mask = train.iter().map(|&t| !t).collect();
            graph.train_mask = train;
        }
        None => graph.split_seeded(0.7, split_seed),
    }
    Ok(graph)
}

/// Writes a graph back to the content/cites text format.
pub fn write_graph(graph: &Graph, content_path: &Path, cites_path: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut content = File::create(content_path).map_err(|e| io_err(content_path, e))?;
    for v in 0..graph.n_nodes {
        let feats: Vec<String> = graph
            .features
            .row(v)
            .iter()
            .map(|x| format_feature(*x))
            .collect();
        writeln!(
            content,
            "{}\t{}\t{}",
            graph.node_names[v],
            feats.join("\t"),
            graph.label_names[graph.labels[v]]
        )
        .map_err(|e| io_err(content_path, e))?;
    }
    let mut cites = File::create(cites_path).map_err(|e| io_err(cites_path, e))?;
    for &(u, v) in &graph.edges {
        writeln!(cites, "{}\t{}", graph.node_names[u], graph.node_names[v])
            .map_err(|e| io_err(cites_path, e))?;
    }
    Ok(())
}

fn format_feature(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn two_node_toy_files() {
        let dir = tempfile::tempdir().unwrap();
        let content = write_tmp(dir.path(), "t.content", "a\t1\t0\tml\nb\t0\t1\tdb\n");
        let cites = write_tmp(dir.path(), "t.cites", "a\tb\n");
        let (g, dropped) = load_planetoid(&content, &cites).unwrap();
        assert_eq!(g.n_nodes, 2);
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(g.n_classes, 2);
        assert_eq!(g.labels, vec![0, 1]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn unknown_endpoints_dropped_with_count() {
        let dir = tempfile::tempdir().unwrap();
        let content = write_tmp(dir.path(), "t.content", "a\t1\tml\nb\t0\tdb\n");
        let cites = write_tmp(dir.path(), "t.cites", "a\tb\na\tmissing\nghost\tb\n");
        let (g, dropped) = load_planetoid(&content, &cites).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let content = write_tmp(dir.path(), "t.content", "a\t1\tml\nb\tnot_a_number\tdb\n");
        let cites = write_tmp(dir.path(), "t.cites", "");
        let err = load_planetoid(&content, &cites).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_content_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let content = write_tmp(dir.path(), "t.content", "");
        let cites = write_tmp(dir.path(), "t.cites", "");
        assert!(matches!(
            load_planetoid(&content, &cites),
            Err(DataError::Invalid(_))
        ));
    }

    #[test]
    fn duplicate_and_self_cites_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let content = write_tmp(dir.path(), "t.content", "a\t1\tml\nb\t0\tdb\nc\t1\tml\n");
        let cites = write_tmp(dir.path(), "t.cites", "a\tb\nb\ta\na\ta\nb\tc\n");
        let (g, _) = load_planetoid(&content, &cites).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn roundtrip_is_isomorphic() {
        let dir = tempfile::tempdir().unwrap();
        let content = write_tmp(
            dir.path(),
            "t.content",
            "n1\t1\t0\t0.5\tml\nn2\t0\t1\t0\tdb\nn3\t1\t1\t0\tml\n",
        );
        let cites = write_tmp(dir.path(), "t.cites", "n1\tn2\nn2\tn3\n");
        let (g, _) = load_planetoid(&content, &cites).unwrap();

        let c2 = dir.path().join("rt.content");
        let e2 = dir.path().join("rt.cites");
        write_graph(&g, &c2, &e2).unwrap();
        let (g2, _) = load_planetoid(&c2, &e2).unwrap();

        assert_eq!(g.n_nodes, g2.n_nodes);
        assert_eq!(g.edges, g2.edges);
        assert_eq!(g.labels, g2.labels);
        assert_eq!(g.label_names, g2.label_names);
        assert!(g.features.max_abs_diff(&g2.features) == 0.0);
    }

    #[test]
    fn manifest_with_mask_file() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(dir.path(), "t.content", "a\t1\tml\nb\t0\tdb\nc\t1\tml\n");
        write_tmp(dir.path(), "t.cites", "a\tb\n");
        write_tmp(dir.path(), "t.train", "a\nc\n");
        let manifest = write_tmp(
            dir.path(),
            "t.json",
            r#"{"name":"toy","content":"t.content","cites":"t.cites","train_mask":"t.train"}"#,
        );
        let g = load_manifest(&manifest, dir.path(), 0).unwrap();
        assert_eq!(g.train_mask, vec![true, false, true]);
        assert_eq!(g.test_mask, vec![false, true, false]);
    }
}
