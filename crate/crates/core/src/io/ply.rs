//! ASCII PLY clouds with an integer label per vertex.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn ply_string(points: &[[f32; 3]], labels: &[u16]) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} points",
            labels.len(),
            points.len()
        )));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n");
    for (p, l) in points.iter().zip(labels) {
        let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], l);
    }
    Ok(s)
}

pub fn export_ply(points: &[[f32; 3]], labels: &[u16], path: &Path) -> Result<()> {
    fs::write(path, ply_string(points, labels)?).map_err(|e| Error::io(path, e))
}

/// Reads back files written by [`export_ply`].
pub fn parse_ply(text: &str) -> Result<(Vec<[f32; 3]>, Vec<u16>)> {
    let bad = |msg: &str| Error::Format {
        path: "<ply>".into(),
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for line in lines.take(count) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("vertex line needs 4 fields"));
        }
        let c = |i: usize| f[i].parse::<f32>().map_err(|_| bad("bad coordinate"));
        points.push([c(0)?, c(1)?, c(2)?]);
        labels.push(f[3].parse().map_err(|_| bad("bad label"))?);
    }
    if points.len() != count {
        return Err(bad("fewer vertices than declared"));
    }
    Ok((points, labels))
}
