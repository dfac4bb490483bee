//! JSON and CSV report files.

use std::path::{Path, PathBuf};

use cjt_core::error::Error;
use cjt_core::jointree::{GraphDoc, JoinGraph, Layout, RelationDoc, SchemaRef, VersionDoc};
use cjt_core::Result;
use serde::Serialize;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::InvalidParameter(format!("writing {}: {e}", path.display()))
}

#[derive(Serialize)]
struct Envelope<'a, P: Serialize, R: Serialize> {
    suite: &'a str,
    params: &'a P,
    records: &'a [R],
}

/// Writes `<dir>/<suite>.json` (params plus records) and `<dir>/<suite>.csv`
/// (records only). Returns both paths.
pub fn write_report<P: Serialize, R: Serialize>(dir: &Path, suite: &str, params: &P, records: &[R]) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join(format!("{suite}.json"));
    let body = serde_json::to_string_pretty(&Envelope { suite, params, records })?;
    std::fs::write(&json_path, body + "\n").map_err(io_err(&json_path))?;
    let csv_path = dir.join(format!("{suite}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err(&csv_path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(&csv_path))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok((json_path, csv_path))
}

/// Writes one CSV per relation version and a `graph.json` that loads them.
pub fn write_graph(g: &JoinGraph, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut relations = Vec::new();
    for rel in g.relations() {
        let mut versions = Vec::new();
        let mut default_csv = String::new();
        for (version, table) in &rel.versions {
            let file = if *version == rel.default_version { format!("{}.csv", rel.name) } else { format!("{}__{version}.csv", rel.name) };
            let path = dir.join(&file);
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record(rel.schema.names()).map_err(csv_err(&path))?;
            for row in &table.rows {
                w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err(&path))?;
            }
            w.flush().map_err(io_err(&path))?;
            if *version == rel.default_version {
                default_csv = file;
            } else {
                versions.push(VersionDoc { version: version.clone(), csv: file, rows: None });
            }
        }
        relations.push(RelationDoc {
            name: rel.name.clone(),
            csv: default_csv,
            rows: None,
            schema: SchemaRef::Inline(rel.schema.clone()),
            version: Some(rel.default_version.clone()),
            delimiter: None,
            versions,
        });
    }
    let doc = GraphDoc { relations, layout: Layout { edges: g.layout.edges.clone(), empty_bags: g.layout.empty_bags.clone() } };
    let path = dir.join("graph.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").map_err(io_err(&path))?;
    Ok(path)
}
