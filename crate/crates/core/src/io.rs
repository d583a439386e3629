//! Text file formats: environments, estimate sets, traces, run summaries and
//! 1DSfM edge-list import.
//!
//! Environment file (`rotavg-env 1`), UTF-8, LF line endings, `#` comments:
//!
//! ```text
//! rotavg-env 1
//! nodes <N>
//! ground_truth <yes|no>
//! source <free text>            (optional)
//! edges <M>
//! gt <id> <w> <x> <y> <z>       (N rows when ground_truth is yes)
//! edge <i> <j> <w> <x> <y> <z>  (M rows, q_ij with R_i = R(q_ij) R_j)
//! sha256 <hex>                  (optional; digest of every byte above it)
//! ```
//!
//! Floats are written with 17 significant digits so a load/save cycle is
//! byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::averaging::{Algorithm, OptimizerConfig};
use crate::envgraph::{component_labels, Edge, RotationEnvironment};
use crate::error::IoError;
use crate::metrics::{self, TraceRecord};
use crate::rotmath::{matrix_to_quat, project_to_so3, Mat3, UnitQuaternion, Vec3};

pub const ENV_MAGIC: &str = "rotavg-env";
pub const ENV_VERSION: u32 = 1;
pub const ESTIMATES_MAGIC: &str = "rotavg-estimates";

/// Quaternions further than this from unit norm are rejected on load.
pub const UNIT_TOL: f64 = 1e-6;

/// Imported relative rotations further than this (Frobenius) from SO(3)
/// are dropped.
pub const IMPORT_ROTATION_TOL: f64 = 1e-2;

pub const TRACE_HEADER: [&str; 7] = [
    "step",
    "ape_mean_deg",
    "ape_median_deg",
    "rel_mean_deg",
    "rel_median_deg",
    "abs_mean_deg",
    "abs_median_deg",
];

pub const SUMMARY_HEADER: [&str; 12] = [
    "env",
    "algorithm",
    "seed",
    "max_iters",
    "steps_to_5deg",
    "nauc",
    "final_ape_mean_deg",
    "final_ape_median_deg",
    "final_rel_mean_deg",
    "final_rel_median_deg",
    "final_abs_mean_deg",
    "final_abs_median_deg",
];

/// Literal written in place of a step count for runs that never converged.
pub const NOT_CONVERGED: &str = "NotConverged";

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_quat(q: &UnitQuaternion) -> String {
    q.wxyz()
        .iter()
        .map(|c| fmt_f64(*c))
        .collect::<Vec<_>>()
        .join(" ")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|e| IoError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

/// Serializes an environment, with a trailing digest.
pub fn env_to_string(env: &RotationEnvironment) -> String {
    let mut out = String::new();
    let gt = env.ground_truth();
    let _ = writeln!(out, "{ENV_MAGIC} {ENV_VERSION}");
    let _ = writeln!(out, "nodes {}", env.n_nodes());
    let _ = writeln!(
        out,
        "ground_truth {}",
        if gt.is_some() { "yes" } else { "no" }
    );
    if let Some(source) = env.source() {
        let _ = writeln!(out, "source {}", source.replace('\n', " "));
    }
    let _ = writeln!(out, "edges {}", env.edges().len());
    if let Some(gt) = gt {
        for (i, q) in gt.iter().enumerate() {
            let _ = writeln!(out, "gt {i} {}", fmt_quat(q));
        }
    }
    for e in env.edges() {
        let _ = writeln!(out, "edge {} {} {}", e.i, e.j, fmt_quat(&e.rel));
    }
    let digest = sha256_hex(out.as_bytes());
    let _ = writeln!(out, "sha256 {digest}");
    out
}

pub fn save_env(env: &RotationEnvironment, path: &Path) -> Result<(), IoError> {
    write_file(path, &env_to_string(env))
}

pub fn load_env(path: &Path) -> Result<RotationEnvironment, IoError> {
    env_from_str(&read_file(path)?, path)
}

/// Non-comment, non-blank lines with their 1-based line numbers and the byte
/// offset at which each starts.
fn content_lines(text: &str) -> Vec<(usize, usize, &str)> {
    let mut offset = 0;
    let mut lines = Vec::new();
    for (idx, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            lines.push((idx + 1, offset, trimmed));
        }
        offset += raw.len();
    }
    lines
}

struct LineReader<'a> {
    path: &'a Path,
    lines: Vec<(usize, usize, &'a str)>,
    pos: usize,
    last_line: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        let last_line = text.lines().count();
        Self {
            path,
            lines: content_lines(text),
            pos: 0,
            last_line,
        }
    }

    fn err(&self, line: usize, reason: impl Into<String>) -> IoError {
        IoError::parse(self.path, line, reason)
    }

    fn peek(&self) -> Option<(usize, usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self, expected: &str) -> Result<(usize, Vec<&'a str>), IoError> {
        match self.lines.get(self.pos) {
            Some(&(line, _, text)) => {
                self.pos += 1;
                Ok((line, text.split_whitespace().collect()))
            }
            None => Err(self.err(
                self.last_line + 1,
                format!("unexpected end of file, expected {expected}"),
            )),
        }
    }

    /// Reads `<key> <value>`.
    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str), IoError> {
        let (line, tokens) = self.next(&format!("'{key}' line"))?;
        if tokens.len() != 2 || tokens[0] != key {
            return Err(self.err(line, format!("expected '{key} <value>'")));
        }
        Ok((line, tokens[1]))
    }
}

fn parse_num<T: std::str::FromStr>(
    reader: &LineReader<'_>,
    line: usize,
    token: &str,
    what: &str,
) -> Result<T, IoError> {
    token
        .parse()
        .map_err(|_| reader.err(line, format!("invalid {what} '{token}'")))
}

fn parse_unit_quat(
    reader: &LineReader<'_>,
    line: usize,
    tokens: &[&str],
) -> Result<UnitQuaternion, IoError> {
    let mut c = [0.0; 4];
    for (slot, tok) in c.iter_mut().zip(tokens) {
        *slot = parse_num(reader, line, tok, "quaternion component")?;
    }
    let q = UnitQuaternion::new_unchecked(c[0], Vec3::new(c[1], c[2], c[3]));
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(reader.err(line, format!("non-unit quaternion (norm {norm})")));
    }
    Ok(q)
}

pub fn env_from_str(text: &str, path: &Path) -> Result<RotationEnvironment, IoError> {
    let mut r = LineReader::new(text, path);
    let (line, tokens) = r.next("header")?;
    if tokens.len() != 2 || tokens[0] != ENV_MAGIC {
        return Err(r.err(line, format!("expected '{ENV_MAGIC} <version>' header")));
    }
    if tokens[1] != ENV_VERSION.to_string() {
        return Err(r.err(line, format!("unsupported version '{}'", tokens[1])));
    }
    let (line, tok) = r.keyed("nodes")?;
    let n: usize = parse_num(&r, line, tok, "node count")?;
    let (line, tok) = r.keyed("ground_truth")?;
    let has_gt = match tok {
        "yes" => true,
        "no" => false,
        other => {
            return Err(r.err(
                line,
                format!("ground_truth must be yes or no, got '{other}'"),
            ))
        }
    };
    let mut source = None;
    if let Some((_, _, text)) = r.peek() {
        if let Some(rest) = text.strip_prefix("source ") {
            source = Some(rest.trim().to_string());
            r.pos += 1;
        }
    }
    let (line, tok) = r.keyed("edges")?;
    let m: usize = parse_num(&r, line, tok, "edge count")?;

    let ground_truth = if has_gt {
        let mut gt: Vec<Option<UnitQuaternion>> = vec![None; n];
        for k in 0..n {
            let (line, tokens) = r.next(&format!("ground-truth row {} of {n}", k + 1))?;
            if tokens.len() != 6 || tokens[0] != "gt" {
                return Err(r.err(line, "expected 'gt <id> <w> <x> <y> <z>'"));
            }
            let id: usize = parse_num(&r, line, tokens[1], "node id")?;
            if id >= n {
                return Err(r.err(line, format!("node id {id} out of range for {n} nodes")));
            }
            if gt[id].is_some() {
                return Err(r.err(line, format!("duplicate ground truth for node {id}")));
            }
            gt[id] = Some(parse_unit_quat(&r, line, &tokens[2..])?);
        }
        Some(gt.into_iter().map(|q| q.expect("all ids filled")).collect())
    } else {
        None
    };

    let mut edges = Vec::with_capacity(m);
    for k in 0..m {
        let (line, tokens) = r.next(&format!("edge row {} of {m}", k + 1))?;
        if tokens.len() != 7 || tokens[0] != "edge" {
            return Err(r.err(line, "expected 'edge <i> <j> <w> <x> <y> <z>'"));
        }
        let i: usize = parse_num(&r, line, tokens[1], "node id")?;
        let j: usize = parse_num(&r, line, tokens[2], "node id")?;
        if i >= n || j >= n || i == j {
            return Err(r.err(line, format!("invalid edge {i} -> {j} for {n} nodes")));
        }
        edges.push(Edge {
            i,
            j,
            rel: parse_unit_quat(&r, line, &tokens[3..])?,
        });
    }

    if let Some((line, offset, _)) = r.peek() {
        let (_, tokens) = r.next("digest")?;
        if tokens.len() != 2 || tokens[0] != "sha256" {
            return Err(r.err(line, "unexpected content after the last edge"));
        }
        let computed = sha256_hex(&text.as_bytes()[..offset]);
        if !tokens[1].eq_ignore_ascii_case(&computed) {
            return Err(IoError::ChecksumMismatch {
                path: path.to_path_buf(),
                stored: tokens[1].to_string(),
                computed,
            });
        }
        if let Some((line, _, _)) = r.peek() {
            return Err(r.err(line, "unexpected content after the digest"));
        }
    }

    let env = RotationEnvironment::new(n, ground_truth, edges).map_err(|source| IoError::Env {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match source {
        Some(s) => env.with_source(s),
        None => env,
    })
}

/// Writes per-node estimates as quaternions.
pub fn save_estimates(quats: &[UnitQuaternion], path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    let _ = writeln!(out, "{ESTIMATES_MAGIC} {ENV_VERSION}");
    let _ = writeln!(out, "nodes {}", quats.len());
    for (i, q) in quats.iter().enumerate() {
        let _ = writeln!(out, "est {i} {}", fmt_quat(q));
    }
    write_file(path, &out)
}

pub fn load_estimates(path: &Path) -> Result<Vec<UnitQuaternion>, IoError> {
    let text = read_file(path)?;
    let mut r = LineReader::new(&text, path);
    let (line, tokens) = r.next("header")?;
    if tokens.len() != 2 || tokens[0] != ESTIMATES_MAGIC || tokens[1] != ENV_VERSION.to_string() {
        return Err(r.err(
            line,
            format!("expected '{ESTIMATES_MAGIC} {ENV_VERSION}' header"),
        ));
    }
    let (line, tok) = r.keyed("nodes")?;
    let n: usize = parse_num(&r, line, tok, "node count")?;
    let mut quats: Vec<Option<UnitQuaternion>> = vec![None; n];
    for k in 0..n {
        let (line, tokens) = r.next(&format!("estimate row {} of {n}", k + 1))?;
        if tokens.len() != 6 || tokens[0] != "est" {
            return Err(r.err(line, "expected 'est <id> <w> <x> <y> <z>'"));
        }
        let id: usize = parse_num(&r, line, tokens[1], "node id")?;
        if id >= n || quats[id].is_some() {
            return Err(r.err(line, format!("invalid or duplicate node id {id}")));
        }
        quats[id] = Some(parse_unit_quat(&r, line, &tokens[2..])?);
    }
    if let Some((line, _, _)) = r.peek() {
        return Err(r.err(line, "unexpected content after the last estimate"));
    }
    Ok(quats
        .into_iter()
        .map(|q| q.expect("all ids filled"))
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImportOptions {
    /// Reject rows with anything but 11 or 14 columns.
    pub strict: bool,
    /// The file stores `R_ji` rather than `R_ij`; transpose each matrix.
    pub transpose: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub rows_read: usize,
    pub dropped_non_rotation: usize,
    pub dropped_self_loops: usize,
    /// Nodes discarded because the ground-truth file had no rotation for them.
    pub dropped_without_gt: usize,
    /// Nodes discarded for lying outside the largest connected component.
    pub dropped_outside_component: usize,
    /// Original id of every node in the imported environment, by new id.
    pub original_ids: Vec<usize>,
}

fn parse_ground_truth(path: &Path) -> Result<BTreeMap<usize, UnitQuaternion>, IoError> {
    let text = read_file(path)?;
    let r = LineReader::new(&text, path);
    let mut gt = BTreeMap::new();
    for &(line, _, row) in &r.lines {
        let tokens: Vec<&str> = row.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(r.err(line, "expected 'i q_w q_x q_y q_z'"));
        }
        let id: usize = parse_num(&r, line, tokens[0], "node id")?;
        let q = parse_unit_quat(&r, line, &tokens[1..])?;
        if gt.insert(id, UnitQuaternion::new(q.rho, q.nu)).is_some() {
            return Err(r.err(line, format!("duplicate ground truth for node {id}")));
        }
    }
    Ok(gt)
}

/// Imports a whitespace-delimited relative-rotation edge list
/// `i j m11 m12 m13 m21 m22 m23 m31 m32 m33 [t1 t2 t3]`, keeping the largest
/// connected component. Optionally pairs nodes with ground truth rows
/// `i w x y z`; nodes without one are then discarded.
pub fn import_1dsfm(
    path: &Path,
    gt_path: Option<&Path>,
    opts: ImportOptions,
) -> Result<(RotationEnvironment, ImportReport), IoError> {
    let text = read_file(path)?;
    let reader = LineReader::new(&text, path);
    let mut report = ImportReport::default();
    let mut raw_edges: Vec<(usize, usize, UnitQuaternion)> = Vec::new();

    for &(line, _, row) in &reader.lines {
        let tokens: Vec<&str> = row.split_whitespace().collect();
        let ok_len = if opts.strict {
            tokens.len() == 11 || tokens.len() == 14
        } else {
            tokens.len() >= 11
        };
        if !ok_len {
            return Err(reader.err(
                line,
                format!("expected 11 or 14 columns, found {}", tokens.len()),
            ));
        }
        report.rows_read += 1;
        let i: usize = parse_num(&reader, line, tokens[0], "node id")?;
        let j: usize = parse_num(&reader, line, tokens[1], "node id")?;
        let mut m = [0.0; 9];
        for (slot, tok) in m.iter_mut().zip(&tokens[2..11]) {
            *slot = parse_num(&reader, line, tok, "matrix entry")?;
        }
        for tok in tokens.iter().skip(11) {
            parse_num::<f64>(&reader, line, tok, "trailing value")?;
        }
        if i == j {
            report.dropped_self_loops += 1;
            continue;
        }
        let mut mat = Mat3::from_row_slice(&m);
        if opts.transpose {
            mat = mat.transpose();
        }
        match project_to_so3(&mat, 1e-9) {
            Some(p) if (mat - p.0).norm() <= IMPORT_ROTATION_TOL => {
                raw_edges.push((i, j, matrix_to_quat(&p)));
            }
            _ => report.dropped_non_rotation += 1,
        }
    }

    let gt_map = gt_path.map(parse_ground_truth).transpose()?;
    if let Some(gt) = &gt_map {
        let before: BTreeSet<usize> = raw_edges.iter().flat_map(|&(i, j, _)| [i, j]).collect();
        raw_edges.retain(|(i, j, _)| gt.contains_key(i) && gt.contains_key(j));
        let after: BTreeSet<usize> = raw_edges.iter().flat_map(|&(i, j, _)| [i, j]).collect();
        report.dropped_without_gt = before.len() - after.len();
    }
    if raw_edges.is_empty() {
        return Err(IoError::EmptyGraph {
            path: path.to_path_buf(),
        });
    }

    // Dense ids over every node touched by an edge, in original id order.
    let nodes: Vec<usize> = raw_edges
        .iter()
        .flat_map(|&(i, j, _)| [i, j])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dense: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let labels = component_labels(
        nodes.len(),
        raw_edges.iter().map(|(i, j, _)| (dense[i], dense[j])),
    );
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        *sizes.entry(l).or_default() += 1;
    }
    // Largest component; ties go to the one holding the smallest id.
    let (&keep, _) = sizes
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .expect("at least one component");
    let kept: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|&(k, _)| labels[k] == keep)
        .map(|(_, &id)| id)
        .collect();
    report.dropped_outside_component = nodes.len() - kept.len();
    let new_id: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let edges: Vec<Edge> = raw_edges
        .iter()
        .filter_map(|(i, j, q)| {
            Some(Edge {
                i: *new_id.get(i)?,
                j: *new_id.get(j)?,
                rel: *q,
            })
        })
        .collect();
    let ground_truth = gt_map.map(|gt| kept.iter().map(|id| gt[id]).collect());

    let mut source = format!("1dsfm:{}", file_name(path));
    if let Some(g) = gt_path {
        let _ = write!(source, " gt:{}", file_name(g));
    }
    let env = RotationEnvironment::new(kept.len(), ground_truth, edges)
        .map_err(|source| IoError::Env {
            path: path.to_path_buf(),
            source,
        })?
        .with_source(source);
    report.original_ids = kept;
    Ok((env, report))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn export_trace(trace: &[TraceRecord], path: &Path) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(TRACE_HEADER).map_err(csv_err(path))?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            opt_cell(r.ape_mean_deg),
            opt_cell(r.ape_median_deg),
            r.rel_mean_deg.to_string(),
            r.rel_median_deg.to_string(),
            opt_cell(r.abs_mean_deg),
            opt_cell(r.abs_median_deg),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

struct CsvRow<'a> {
    path: &'a Path,
    line: usize,
    record: &'a csv::StringRecord,
}

impl CsvRow<'_> {
    fn err(&self, reason: impl Into<String>) -> IoError {
        IoError::parse(self.path, self.line, reason)
    }

    fn cell(&self, idx: usize) -> &str {
        self.record.get(idx).unwrap_or("")
    }

    fn num<T: std::str::FromStr>(&self, idx: usize, name: &str) -> Result<T, IoError> {
        let cell = self.cell(idx);
        cell.parse()
            .map_err(|_| self.err(format!("invalid {name} '{cell}'")))
    }

    fn opt(&self, idx: usize, name: &str) -> Result<Option<f64>, IoError> {
        if self.cell(idx).is_empty() {
            Ok(None)
        } else {
            self.num(idx, name).map(Some)
        }
    }
}

fn read_csv<T>(
    path: &Path,
    header: &[&str],
    mut parse: impl FnMut(&CsvRow<'_>) -> Result<T, IoError>,
) -> Result<Vec<T>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    let found = rdr.headers().map_err(csv_err(path))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(IoError::parse(
            path,
            1,
            format!("expected header '{}'", header.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let record = rec.map_err(csv_err(path))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(IoError::parse(
                path,
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        out.push(parse(&CsvRow {
            path,
            line,
            record: &record,
        })?);
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, IoError> {
    let records = read_csv(path, &TRACE_HEADER, |row| {
        Ok(TraceRecord {
            step: row.num(0, "step")?,
            ape_mean_deg: row.opt(1, "ape_mean_deg")?,
            ape_median_deg: row.opt(2, "ape_median_deg")?,
            rel_mean_deg: row.num(3, "rel_mean_deg")?,
            rel_median_deg: row.num(4, "rel_median_deg")?,
            abs_mean_deg: row.opt(5, "abs_mean_deg")?,
            abs_median_deg: row.opt(6, "abs_median_deg")?,
        })
    })?;
    if records.windows(2).any(|w| w[1].step < w[0].step) {
        return Err(IoError::parse(
            path,
            0,
            "trace rows are not ordered by step",
        ));
    }
    Ok(records)
}

/// One row of a run summary file.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub env: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub max_iters: u64,
    pub steps_to_5deg: Option<u64>,
    pub nauc: f64,
    pub final_ape_mean_deg: Option<f64>,
    pub final_ape_median_deg: Option<f64>,
    pub final_rel_mean_deg: f64,
    pub final_rel_median_deg: f64,
    pub final_abs_mean_deg: Option<f64>,
    pub final_abs_median_deg: Option<f64>,
}

impl SummaryRow {
    pub fn from_run(env: impl Into<String>, cfg: &OptimizerConfig, trace: &[TraceRecord]) -> Self {
        let summary = metrics::summarize(trace);
        let last = trace.last().copied().unwrap_or(TraceRecord {
            step: 0,
            ape_mean_deg: None,
            ape_median_deg: None,
            rel_mean_deg: f64::NAN,
            rel_median_deg: f64::NAN,
            abs_mean_deg: None,
            abs_median_deg: None,
        });
        Self {
            env: env.into(),
            algorithm: cfg.algorithm,
            seed: cfg.seed,
            max_iters: cfg.max_iters,
            steps_to_5deg: summary.steps_to_5deg,
            nauc: summary.nauc,
            final_ape_mean_deg: last.ape_mean_deg,
            final_ape_median_deg: last.ape_median_deg,
            final_rel_mean_deg: last.rel_mean_deg,
            final_rel_median_deg: last.rel_median_deg,
            final_abs_mean_deg: last.abs_mean_deg,
            final_abs_median_deg: last.abs_median_deg,
        }
    }
}

pub fn export_summary(rows: &[SummaryRow], path: &Path) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.env.clone(),
            r.algorithm.to_string(),
            r.seed.to_string(),
            r.max_iters.to_string(),
            r.steps_to_5deg
                .map_or_else(|| NOT_CONVERGED.to_string(), |s| s.to_string()),
            r.nauc.to_string(),
            opt_cell(r.final_ape_mean_deg),
            opt_cell(r.final_ape_median_deg),
            r.final_rel_mean_deg.to_string(),
            r.final_rel_median_deg.to_string(),
            opt_cell(r.final_abs_mean_deg),
            opt_cell(r.final_abs_median_deg),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, IoError> {
    read_csv(path, &SUMMARY_HEADER, |row| {
        let steps = match row.cell(4) {
            NOT_CONVERGED => None,
            _ => Some(row.num(4, "steps_to_5deg")?),
        };
        Ok(SummaryRow {
            env: row.cell(0).to_string(),
            algorithm: row.cell(1).parse().map_err(|e: String| row.err(e))?,
            seed: row.num(2, "seed")?,
            max_iters: row.num(3, "max_iters")?,
            steps_to_5deg: steps,
            nauc: row.num(5, "nauc")?,
            final_ape_mean_deg: row.opt(6, "final_ape_mean_deg")?,
            final_ape_median_deg: row.opt(7, "final_ape_median_deg")?,
            final_rel_mean_deg: row.num(8, "final_rel_mean_deg")?,
            final_rel_median_deg: row.num(9, "final_rel_median_deg")?,
            final_abs_mean_deg: row.opt(10, "final_abs_mean_deg")?,
            final_abs_median_deg: row.opt(11, "final_abs_median_deg")?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgraph::{generate_uniform_env, GeneratorConfig};
    use crate::rotmath::{exp_so3, RotationMatrix, TangentVector};
    use tempfile::tempdir;

    fn small_env(seed: u64) -> RotationEnvironment {
        generate_uniform_env(&GeneratorConfig {
            n_nodes: 12,
            k_neighbors: 3,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn parse_err(err: IoError) -> (usize, String) {
        match err {
            IoError::Parse { line, reason, .. } => (line, reason),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn env_save_load_resave_is_byte_identical() {
        let dir = tempdir().unwrap();
        let env = small_env(3).with_source("generated");
        let a = dir.path().join("a.txt");
        save_env(&env, &a).unwrap();
        let loaded = load_env(&a).unwrap();
        assert_eq!(loaded, env);
        let b = dir.path().join("b.txt");
        save_env(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_file_names_the_missing_line() {
        let text = env_to_string(&small_env(1));
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines[..8].join("\n") + "\n";
        let (line, reason) = parse_err(env_from_str(&cut, Path::new("cut.txt")).unwrap_err());
        assert_eq!(line, 9);
        assert!(reason.contains("unexpected end of file"), "{reason}");
    }

    #[test]
    fn non_unit_quaternion_is_rejected_with_its_line() {
        let text = "rotavg-env 1\nnodes 2\nground_truth no\nedges 1\nedge 0 1 0.9 0 0 0\n";
        let (line, reason) = parse_err(env_from_str(text, Path::new("x.txt")).unwrap_err());
        assert_eq!(line, 5);
        assert!(reason.contains("non-unit quaternion"), "{reason}");
    }

    #[test]
    fn comments_blank_lines_and_missing_digest_are_accepted() {
        let text =
            "# hand written\nrotavg-env 1\n\nnodes 2\nground_truth no\nedges 1\nedge 0 1 1 0 0 0\n";
        let env = env_from_str(text, Path::new("x.txt")).unwrap();
        assert_eq!(env.n_nodes(), 2);
        assert_eq!(env.edges().len(), 1);
    }

    #[test]
    fn tampered_payload_fails_the_checksum() {
        let text = env_to_string(&small_env(2));
        let tampered = text.replacen("edge 0", "edge  0", 1);
        assert!(matches!(
            env_from_str(&tampered, Path::new("t.txt")),
            Err(IoError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn bad_header_and_out_of_range_edge() {
        let (line, _) = parse_err(env_from_str("rotavg-env 2\n", Path::new("v")).unwrap_err());
        assert_eq!(line, 1);
        let text = "rotavg-env 1\nnodes 2\nground_truth no\nedges 1\nedge 0 2 1 0 0 0\n";
        let (line, reason) = parse_err(env_from_str(text, Path::new("e")).unwrap_err());
        assert_eq!(line, 5);
        assert!(reason.contains("invalid edge"), "{reason}");
    }

    #[test]
    fn estimates_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("est.txt");
        let quats: Vec<UnitQuaternion> = small_env(4).ground_truth().unwrap().to_vec();
        save_estimates(&quats, &path).unwrap();
        assert_eq!(load_estimates(&path).unwrap(), quats);
    }

    fn matrix_row(i: usize, j: usize, m: &Mat3) -> String {
        let cells: Vec<String> = m.transpose().iter().map(|v| format!("{v:.17e}")).collect();
        format!("{i} {j} {}", cells.join(" "))
    }

    fn axis_rotation(axis: [f64; 3], angle: f64) -> RotationMatrix {
        exp_so3(&TangentVector(
            Vec3::new(axis[0], axis[1], axis[2]).normalize() * angle,
        ))
    }

    #[test]
    fn import_hand_built_triangle() {
        let dir = tempdir().unwrap();
        let gt = [
            axis_rotation([1.0, 0.0, 0.0], 0.3),
            axis_rotation([0.0, 1.0, 1.0], 1.1),
            axis_rotation([1.0, -2.0, 0.5], 2.4),
        ];
        let rel = |i: usize, j: usize| gt[i].matrix() * gt[j].matrix().transpose();
        let mut text = String::from("# i j R_ij tx ty tz\n");
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            text += &format!("{} 0.1 0.2 0.3\n", matrix_row(i + 10, j + 10, &rel(i, j)));
        }
        text += "10 10 1 0 0 0 1 0 0 0 1\n";
        text += "11 12 1 0 0 0 1 0 0 0 2\n";
        let path = dir.path().join("EGs.txt");
        fs::write(&path, text).unwrap();

        let (env, report) = import_1dsfm(&path, None, ImportOptions::default()).unwrap();
        assert_eq!(env.n_nodes(), 3);
        assert_eq!(env.edges().len(), 3);
        assert_eq!(report.rows_read, 5);
        assert_eq!(report.dropped_self_loops, 1);
        assert_eq!(report.dropped_non_rotation, 1);
        assert_eq!(report.original_ids, vec![10, 11, 12]);
        for e in env.edges() {
            let expected = rel(e.i, e.j);
            assert!((e.rel.to_matrix().matrix() - expected).norm() < 1e-12);
        }

        let strict = ImportOptions {
            strict: true,
            ..Default::default()
        };
        assert!(import_1dsfm(&path, None, strict).is_ok());
        fs::write(&path, "0 1 1 0 0 0 1 0 0 0 1 9\n").unwrap();
        assert!(import_1dsfm(&path, None, strict).is_err());
        assert!(import_1dsfm(&path, None, ImportOptions::default()).is_ok());
    }

    #[test]
    fn import_keeps_largest_component_and_pairs_ground_truth() {
        let dir = tempdir().unwrap();
        let id = "1 0 0 0 1 0 0 0 1";
        let text = format!("0 1 {id}\n1 2 {id}\n5 6 {id}\n2 3 {id}\n");
        let path = dir.path().join("EGs.txt");
        fs::write(&path, text).unwrap();
        let gt_path = dir.path().join("gt.txt");
        fs::write(
            &gt_path,
            "0 1 0 0 0\n1 1 0 0 0\n2 1 0 0 0\n5 1 0 0 0\n6 1 0 0 0\n",
        )
        .unwrap();

        let (env, report) = import_1dsfm(&path, Some(&gt_path), ImportOptions::default()).unwrap();
        assert_eq!(report.dropped_without_gt, 1);
        assert_eq!(report.dropped_outside_component, 2);
        assert_eq!(report.original_ids, vec![0, 1, 2]);
        assert_eq!(env.n_nodes(), 3);
        assert!(env.ground_truth().is_some());
        assert_eq!(env.source(), Some("1dsfm:EGs.txt gt:gt.txt"));
    }

    #[test]
    fn import_with_no_surviving_edges_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("EGs.txt");
        fs::write(&path, "0 0 1 0 0 0 1 0 0 0 1\n").unwrap();
        assert!(matches!(
            import_1dsfm(&path, None, ImportOptions::default()),
            Err(IoError::EmptyGraph { .. })
        ));
    }

    #[test]
    fn import_save_import_is_idempotent() {
        let dir = tempdir().unwrap();
        let env = small_env(9);
        let gt = env.ground_truth_matrices().unwrap();
        let mut text = String::new();
        for e in env.edges() {
            text += &matrix_row(e.i, e.j, &(gt[e.i].matrix() * gt[e.j].matrix().transpose()));
            text.push('\n');
        }
        let path = dir.path().join("EGs.txt");
        fs::write(&path, text).unwrap();
        let (first, _) = import_1dsfm(&path, None, ImportOptions::default()).unwrap();
        let saved = dir.path().join("env.txt");
        save_env(&first, &saved).unwrap();
        assert_eq!(load_env(&saved).unwrap(), first);
        let (second, _) = import_1dsfm(&path, None, ImportOptions::default()).unwrap();
        assert_eq!(env_to_string(&first), env_to_string(&second));
    }

    fn record(step: u64, ape: Option<f64>) -> TraceRecord {
        TraceRecord {
            step,
            ape_mean_deg: ape,
            ape_median_deg: ape.map(|a| a / 2.0),
            rel_mean_deg: 1.0 / (step as f64 + 3.0),
            rel_median_deg: 0.1,
            abs_mean_deg: ape.map(|a| a * 0.7),
            abs_median_deg: None,
        }
    }

    #[test]
    fn empty_trace_writes_only_the_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        export_trace(&[], &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            format!("{}\n", TRACE_HEADER.join(","))
        );
        assert!(read_trace(&path).unwrap().is_empty());
    }

    #[test]
    fn trace_round_trip_keeps_empty_cells() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![
            record(0, Some(120.123456789)),
            record(1000, Some(4.2e-7)),
            record(2000, None),
        ];
        export_trace(&trace, &path).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn unordered_trace_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        export_trace(&[record(10, None), record(5, None)], &path).unwrap();
        assert!(read_trace(&path).is_err());
    }

    #[test]
    fn non_converged_summary_uses_the_token() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let cfg = OptimizerConfig::default();
        let stuck = SummaryRow::from_run(
            "env_0",
            &cfg,
            &[record(0, Some(90.0)), record(10, Some(80.0))],
        );
        let done = SummaryRow::from_run(
            "env_0",
            &cfg,
            &[record(0, Some(90.0)), record(10, Some(1.0))],
        );
        assert_eq!(stuck.steps_to_5deg, None);
        assert_eq!(done.steps_to_5deg, Some(10));
        export_summary(&[stuck.clone(), done.clone()], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap().split(',').nth(4),
            Some(NOT_CONVERGED)
        );
        assert_eq!(read_summary(&path).unwrap(), vec![stuck, done]);
    }
}
