//! CSV ingestion and output for `clusters.csv` and `units.csv`, plus JSON
//! helpers for manifests, configs and reports.
//!
//! `clusters.csv`: `cluster_id, n_g, h, s_g, c_1..c_p`.
//! `units.csv`: `cluster_id, unit_id, outcome, z, sampled, b_g, x_1..x_q`.
//! Only the id columns (and `n_g`) are required.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::panel::{ClusterRecord, UnitRecord};
use crate::{Error, Result};

fn csv_err(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_string(),
        message: e.to_string(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

struct Columns {
    names: BTreeMap<String, usize>,
    numbered: Vec<usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, prefix: &str) -> Self {
        let names: BTreeMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        let mut numbered: Vec<(usize, usize)> = names
            .iter()
            .filter_map(|(h, &i)| h.strip_prefix(prefix).and_then(|n| n.parse::<usize>().ok()).map(|n| (n, i)))
            .collect();
        numbered.sort();
        Columns {
            names,
            numbered: numbered.into_iter().map(|(_, i)| i).collect(),
        }
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.names.get(name).and_then(|&i| rec.get(i)).map(str::trim)
    }

    fn require<'r>(&self, rec: &'r csv::StringRecord, name: &str, src: &str, line: u64) -> Result<&'r str> {
        self.get(rec, name)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| csv_err(src, format!("line {line}: missing value for `{name}`")))
    }
}

fn parse_f64(s: &str, src: &str, line: u64, col: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| csv_err(src, format!("line {line}: `{col}` value {s:?} is not a number")))
}

fn parse_bool(s: &str, src: &str, line: u64, col: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "1.0" => Ok(true),
        "0" | "false" | "0.0" => Ok(false),
        _ => Err(csv_err(src, format!("line {line}: `{col}` value {s:?} is not 0/1"))),
    }
}

/// Parsed `clusters.csv`: the records and, when an `h` column is present, the
/// treated fraction carried by treated clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTable {
    pub clusters: Vec<ClusterRecord>,
    pub pi2: Option<f64>,
    pub has_assignment: bool,
}

pub fn parse_clusters<R: Read>(reader: R, src: &str) -> Result<ClusterTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(src, e))?.clone();
    let cols = Columns::new(&headers, "c_");
    for req in ["cluster_id", "n_g"] {
        if !cols.names.contains_key(req) {
            return Err(csv_err(src, format!("missing required column `{req}`")));
        }
    }
    let has_h = cols.names.contains_key("h");
    let mut table = ClusterTable {
        clusters: Vec::new(),
        pi2: None,
        has_assignment: has_h,
    };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(src, e))?;
        let line = row as u64 + 2;
        let id = cols.require(&rec, "cluster_id", src, line)?;
        let n_g = cols
            .require(&rec, "n_g", src, line)?
            .parse::<usize>()
            .map_err(|_| csv_err(src, format!("line {line}: `n_g` must be a positive integer")))?;
        let mut c = ClusterRecord::new(id, n_g, false);
        if let Some(h) = cols.get(&rec, "h").filter(|s| !s.is_empty()) {
            let h = parse_f64(h, src, line, "h")?;
            if h > 0.0 {
                c.treated = true;
                match table.pi2 {
                    None => table.pi2 = Some(h),
                    Some(p) if (p - h).abs() > 1e-12 => {
                        return Err(csv_err(src, format!("line {line}: treated fraction {h} differs from {p}")));
                    }
                    _ => {}
                }
            }
        }
        c.stratum = cols.get(&rec, "s_g").filter(|s| !s.is_empty()).map(str::to_string);
        for &i in &cols.numbered {
            let v = rec.get(i).unwrap_or("").trim();
            c.covariates.push(if v.is_empty() { f64::NAN } else { parse_f64(v, src, line, &headers[i])? });
        }
        table.clusters.push(c);
    }
    Ok(table)
}

pub fn read_clusters(path: &Path) -> Result<ClusterTable> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_clusters(f, &path.display().to_string())
}

/// Attaches the units in `reader` to `clusters` (matched by `cluster_id`).
pub fn parse_units<R: Read>(reader: R, src: &str, clusters: &mut [ClusterRecord]) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(src, e))?.clone();
    let cols = Columns::new(&headers, "x_");
    for req in ["cluster_id", "unit_id"] {
        if !cols.names.contains_key(req) {
            return Err(csv_err(src, format!("missing required column `{req}`")));
        }
    }
    let index: BTreeMap<String, usize> = clusters
        .iter()
        .enumerate()
        .map(|(i, c)| (c.cluster_id.clone(), i))
        .collect();
    for c in clusters.iter_mut() {
        c.units.clear();
    }
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(src, e))?;
        let line = row as u64 + 2;
        let cid = cols.require(&rec, "cluster_id", src, line)?;
        let &ci = index
            .get(cid)
            .ok_or_else(|| Error::validation(format!("{src} line {line}: unknown cluster {cid:?}")))?;
        let uid = cols.require(&rec, "unit_id", src, line)?;
        let outcome = match cols.get(&rec, "outcome").filter(|s| !s.is_empty()) {
            Some(v) => parse_f64(v, src, line, "outcome")?,
            None => f64::NAN,
        };
        let z = match cols.get(&rec, "z").filter(|s| !s.is_empty()) {
            Some(v) => parse_bool(v, src, line, "z")?,
            None => false,
        };
        let mut u = UnitRecord::new(uid, outcome, z);
        if let Some(v) = cols.get(&rec, "sampled").filter(|s| !s.is_empty()) {
            u.sampled = parse_bool(v, src, line, "sampled")?;
        }
        u.second_stage_stratum = cols.get(&rec, "b_g").filter(|s| !s.is_empty()).map(str::to_string);
        for &i in &cols.numbered {
            let v = rec.get(i).unwrap_or("").trim();
            u.covariates.push(if v.is_empty() { f64::NAN } else { parse_f64(v, src, line, &headers[i])? });
        }
        clusters[ci].units.push(u);
    }
    Ok(())
}

pub fn read_units(path: &Path, clusters: &mut [ClusterRecord]) -> Result<()> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_units(f, &path.display().to_string(), clusters)
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn write_clusters_to<W: Write>(writer: W, clusters: &[ClusterRecord], pi2: f64) -> Result<()> {
    let p = clusters.iter().map(|c| c.covariates.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster_id".to_string(), "n_g".into(), "h".into(), "s_g".into()];
    header.extend((1..=p).map(|i| format!("c_{i}")));
    w.write_record(&header).map_err(|e| csv_err("<clusters>", e))?;
    for c in clusters {
        let mut row = vec![
            c.cluster_id.clone(),
            c.n_g.to_string(),
            fmt_f64(c.h(pi2)),
            c.stratum.clone().unwrap_or_default(),
        ];
        row.extend((0..p).map(|i| c.covariates.get(i).map_or(String::new(), |v| fmt_f64(*v))));
        w.write_record(&row).map_err(|e| csv_err("<clusters>", e))?;
    }
    w.flush().map_err(|e| csv_err("<clusters>", e))
}

pub fn write_units_to<W: Write>(writer: W, clusters: &[ClusterRecord]) -> Result<()> {
    let q = clusters
        .iter()
        .flat_map(|c| c.units.iter().map(|u| u.covariates.len()))
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["cluster_id", "unit_id", "outcome", "z", "sampled", "b_g"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=q).map(|i| format!("x_{i}")));
    w.write_record(&header).map_err(|e| csv_err("<units>", e))?;
    for c in clusters {
        for u in &c.units {
            let mut row = vec![
                c.cluster_id.clone(),
                u.unit_id.clone(),
                fmt_f64(u.outcome),
                (u.z as u8).to_string(),
                (u.sampled as u8).to_string(),
                u.second_stage_stratum.clone().unwrap_or_default(),
            ];
            row.extend((0..q).map(|i| u.covariates.get(i).map_or(String::new(), |v| fmt_f64(*v))));
            w.write_record(&row).map_err(|e| csv_err("<units>", e))?;
        }
    }
    w.flush().map_err(|e| csv_err("<units>", e))
}

pub fn write_clusters(path: &Path, clusters: &[ClusterRecord], pi2: f64) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_clusters_to(f, clusters, pi2)
}

pub fn write_units(path: &Path, clusters: &[ClusterRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_units_to(f, clusters)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::numeric(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::fixtures::worked_panel;

    #[test]
    fn worked_panel_round_trips() {
        let panel = worked_panel();
        let mut cbuf = Vec::new();
        write_clusters_to(&mut cbuf, &panel.clusters, 0.5).unwrap();
        let mut ubuf = Vec::new();
        write_units_to(&mut ubuf, &panel.clusters).unwrap();
        let mut table = parse_clusters(cbuf.as_slice(), "c").unwrap();
        parse_units(ubuf.as_slice(), "u", &mut table.clusters).unwrap();
        assert_eq!(table.pi2, Some(0.5));
        assert_eq!(table.clusters, panel.clusters);
    }

    #[test]
    fn optional_columns_may_be_missing() {
        let text = "cluster_id,n_g\na,3\nb,4\n";
        let mut t = parse_clusters(text.as_bytes(), "c").unwrap();
        assert!(!t.has_assignment);
        assert_eq!(t.clusters.len(), 2);
        parse_units("cluster_id,unit_id\na,1\na,2\n".as_bytes(), "u", &mut t.clusters).unwrap();
        assert_eq!(t.clusters[0].units.len(), 2);
        assert!(t.clusters[0].units[0].outcome.is_nan());
        assert!(t.clusters[0].units[0].sampled);
    }

    #[test]
    fn bad_values_are_reported_with_line() {
        let err = parse_clusters("cluster_id,n_g\na,x\n".as_bytes(), "c.csv").unwrap_err();
        assert_eq!(err.category(), "io");
        assert!(err.to_string().contains("line 2"));
        let err = parse_clusters("cluster_id\na\n".as_bytes(), "c.csv").unwrap_err();
        assert!(err.to_string().contains("n_g"));
    }

    #[test]
    fn unknown_cluster_in_units_is_rejected() {
        let mut t = parse_clusters("cluster_id,n_g\na,3\n".as_bytes(), "c").unwrap();
        assert!(parse_units("cluster_id,unit_id\nzz,1\n".as_bytes(), "u", &mut t.clusters).is_err());
    }
}
