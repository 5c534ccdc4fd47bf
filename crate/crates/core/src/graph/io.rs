//! JSON-lines graph files, one graph per line:
//!
//! ```text
//! {"n":3,"x":[[1,0],[0,1],[1,0]],"a_type":[[0,1,0],[1,0,1],[0,1,0]],"g":[],"node_vocab":["C","*"],"edge_vocab":["none","single","mask"]}
//! ```
//!
//! `a_feat` (`[n][n][d_f]`) is optional and omitted when absent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{LgdError, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    x: Vec<Vec<f64>>,
    a_type: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_feat: Option<Vec<Vec<Vec<f64>>>>,
    g: Vec<f64>,
    node_vocab: Vec<String>,
    edge_vocab: Vec<String>,
}

impl GraphRecord {
    fn from_graph(g: &Graph) -> Self {
        let n = g.n;
        Self {
            n,
            x: (0..n).map(|i| g.x.row(i).to_vec()).collect(),
            a_type: (0..n)
                .map(|i| g.a_type[i * n..(i + 1) * n].to_vec())
                .collect(),
            a_feat: g.a_feat.as_ref().map(|f| {
                (0..n)
                    .map(|i| (0..n).map(|j| f.row(i * n + j).to_vec()).collect())
                    .collect()
            }),
            g: g.g.clone(),
            node_vocab: g.node_vocab.clone(),
            edge_vocab: g.edge_vocab.clone(),
        }
    }

    fn into_graph(self) -> std::result::Result<Graph, String> {
        let n = self.n;
        if self.x.len() != n {
            return Err(format!("x has {} rows, expected n = {n}", self.x.len()));
        }
        let d_v = self.x.first().map_or(0, Vec::len);
        let x = Tensor::from_rows(&self.x).map_err(|e| format!("x: {e}"))?;
        debug_assert_eq!(x.cols, d_v);
        if self.a_type.len() != n || self.a_type.iter().any(|r| r.len() != n) {
            return Err(format!("a_type must be {n}x{n}"));
        }
        let a_type: Vec<usize> = self.a_type.into_iter().flatten().collect();
        let a_feat = match self.a_feat {
            None => None,
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(format!("a_feat must be {n}x{n}xd"));
                }
                let flat: Vec<Vec<f64>> = rows.into_iter().flatten().collect();
                Some(Tensor::from_rows(&flat).map_err(|e| format!("a_feat: {e}"))?)
            }
        };
        Graph::new(x, a_type, a_feat, self.g, self.node_vocab, self.edge_vocab)
            .map_err(|e| e.to_string())
    }
}

/// Parses JSON-lines text. Blank lines are skipped; errors name the 1-based
/// line number.
pub fn parse_graphs(text: &str) -> Result<Vec<Graph>> {
    let mut out = Vec::new();
    for (k, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, k + 1)?);
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<Graph> {
    let record: GraphRecord = serde_json::from_str(line).map_err(|e| LgdError::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    record.into_graph().map_err(|message| LgdError::Parse {
        line: lineno,
        message,
    })
}

pub fn read_graphs(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, k + 1)?);
    }
    Ok(out)
}

pub fn write_graphs_to(graphs: &[Graph], mut w: impl Write) -> Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut w, &GraphRecord::from_graph(g))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_graphs(graphs: &[Graph], path: impl AsRef<Path>) -> Result<()> {
    write_graphs_to(graphs, BufWriter::new(File::create(path)?))
}
