//! JSON-lines dataset files.
//!
//! Line 1 is a header `{"R":int,"S":int,"directed":bool}`; every following line
//! is one graph `{"n":int,"nodes":[int,...],"edges":[[i,j,cat],...]}`. Undirected
//! edges are written once with `i < j`; absent edges are never written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(rename = "R")]
    pub node_cats: usize,
    #[serde(rename = "S")]
    pub edge_cats: usize,
    pub directed: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n: usize,
    nodes: Vec<usize>,
    edges: Vec<[usize; 3]>,
}

pub fn write_dataset<W: Write>(graphs: &[Graph], mut w: W) -> Result<()> {
    let header = match graphs.first() {
        Some(g) => DatasetHeader { node_cats: g.node_cats(), edge_cats: g.edge_cats(), directed: g.is_directed() },
        None => DatasetHeader { node_cats: 1, edge_cats: 2, directed: false },
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for g in graphs {
        if g.node_cats() != header.node_cats || g.edge_cats() != header.edge_cats || g.is_directed() != header.directed {
            return Err(Error::InvalidGraph("dataset mixes attribute vocabularies".into()));
        }
        let rec = Record {
            n: g.n(),
            nodes: (0..g.n()).map(|i| g.node_cat(i)).collect(),
            edges: g.edge_list().into_iter().map(|(i, j, c)| [i, j, c]).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a dataset. An empty input is an empty dataset.
pub fn read_dataset<R: Read>(r: R) -> Result<Vec<Graph>> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let header: DatasetHeader = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            }
        }
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if rec.nodes.len() != rec.n {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{} node categories for n={}", rec.nodes.len(), rec.n),
            });
        }
        let edges: Vec<_> = rec.edges.iter().map(|e| (e[0], e[1], e[2])).collect();
        if let Some(e) = edges.iter().find(|e| e.2 == 0) {
            return Err(Error::Parse { line: i + 1, msg: format!("edge ({},{}) has the no-edge category", e.0, e.1) });
        }
        let g = Graph::new(rec.n, header.node_cats, header.edge_cats, header.directed, &edges, &rec.nodes)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(g);
    }
    Ok(out)
}

pub fn save_dataset(graphs: &[Graph], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(graphs, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    read_dataset(File::open(path)?)
}
