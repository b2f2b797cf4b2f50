//! On-disk formats. Every file starts with a version tag and carries a
//! reproducibility block.
//!
//! * point file: `# rotreg points v1`, then `D N`, then N lines of D decimals
//! * object file: one `x y z` triple per line; blank and `#` lines ignored
//! * manifest: `#` header lines (version tag, reproducibility), then CSV rows
//! * checkpoint, evaluation report: JSON with `format` and `reproducibility` fields
//! * training log, accuracy curve: CSV with a `#` header like the manifest

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rotreg_core::data::{ObjectModel, Split};
use rotreg_core::eval::{CurvePoint, EvalReport, OcclusionBin};
use rotreg_core::geometry::{ChannelMode, PointCloudSegment};
use rotreg_core::so3::AxisAngle;
use rotreg_core::train::Trainer;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const POINTS_TAG: &str = "# rotreg points v1";
pub const MANIFEST_TAG: &str = "# rotreg manifest v1";
pub const LOG_TAG: &str = "# rotreg training-log v1";
pub const CHECKS_TAG: &str = "# rotreg training-checks v1";
pub const CURVE_TAG: &str = "# rotreg curve v1";
pub const CHECKPOINT_FORMAT: &str = "rotreg checkpoint v1";
pub const REPORT_FORMAT: &str = "rotreg report v1";
pub const TABLE_FORMAT: &str = "rotreg table v1";

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const OBJECT_FILE: &str = "object.txt";
pub const POINTS_DIR: &str = "points";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.json";
pub const BEST_CHECKPOINT: &str = "checkpoint-best.json";
pub const LOG_FILE: &str = "train-log.csv";
pub const CHECKS_FILE: &str = "train-checks.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const TABLE_FILE: &str = "table.md";

/// Provenance written into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub tool: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub formats: BTreeMap<String, String>,
}

impl Reproducibility {
    pub fn new(command: &str, config_sha256: String, seeds: &[(&str, u64)]) -> Self {
        let formats = [
            ("points", POINTS_TAG),
            ("manifest", MANIFEST_TAG),
            ("training-log", LOG_TAG),
            ("curve", CURVE_TAG),
            ("checkpoint", CHECKPOINT_FORMAT),
            ("report", REPORT_FORMAT),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.trim_start_matches("# ").to_string()))
        .collect();
        Reproducibility {
            tool: format!("rotreg {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            config_sha256,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            formats,
        }
    }

    /// `# key: value` lines for CSV-like files.
    pub fn comment_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# tool: {}", self.tool);
        let _ = writeln!(s, "# command: {}", self.command);
        let _ = writeln!(s, "# config_sha256: {}", self.config_sha256);
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "# seed.{k}: {v}");
        }
        for (k, v) in &self.formats {
            let _ = writeln!(s, "# format.{k}: {v}");
        }
        s
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_f64(path: &Path, line_no: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| CliError::format(path, format!("line {line_no}: bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(CliError::format(path, format!("line {line_no}: non-finite value")));
    }
    Ok(v)
}

pub fn write_points(path: &Path, seg: &PointCloudSegment) -> Result<()> {
    let mut s = String::with_capacity(seg.len() * 40);
    let _ = writeln!(s, "{POINTS_TAG}");
    let _ = writeln!(s, "{} {}", seg.dim(), seg.len());
    for p in seg.points() {
        let line: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    write_file(path, s.as_bytes())
}

pub fn read_points(path: &Path) -> Result<PointCloudSegment> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, POINTS_TAG)) => {}
        _ => return Err(CliError::format(path, format!("missing version tag {POINTS_TAG:?}"))),
    }
    let (dim, count) = match lines.next() {
        Some((i, header)) => {
            let parts: Vec<&str> = header.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [d, n] => d.parse::<usize>().ok().zip(n.parse::<usize>().ok()),
                _ => None,
            };
            parsed.ok_or_else(|| CliError::format(path, format!("line {}: expected \"D N\" header", i + 1)))?
        }
        None => return Err(CliError::format(path, "missing \"D N\" header")),
    };
    let mode = ChannelMode::from_dim(dim).map_err(|e| CliError::format(path, e.to_string()))?;
    let mut values = Vec::with_capacity(dim * count);
    let mut rows = 0;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != dim {
            return Err(CliError::format(path, format!("line {}: expected {dim} values, got {}", i + 1, toks.len())));
        }
        for t in toks {
            values.push(parse_f64(path, i + 1, t)?);
        }
        rows += 1;
    }
    if rows != count {
        return Err(CliError::format(path, format!("header declares {count} points, found {rows}")));
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PointCloudSegment::new(values, mode, id).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_object(path: &Path, model: &ObjectModel) -> Result<()> {
    let mut s = format!("# object {}\n", model.name);
    for p in &model.points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    write_file(path, s.as_bytes())
}

/// Reads an ASCII `x y z` point list (meters). The model is named after the file stem.
pub fn read_object(path: &Path) -> Result<ObjectModel> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(CliError::format(path, format!("line {}: expected \"x y z\"", i + 1)));
        }
        points.push([parse_f64(path, i + 1, toks[0])?, parse_f64(path, i + 1, toks[1])?, parse_f64(path, i + 1, toks[2])?]);
    }
    let name = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# object "))
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    ObjectModel::new(name, points).map_err(|e| CliError::format(path, e.to_string()))
}

/// One manifest row: a sample's ground truth and generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub bin: OcclusionBin,
    pub seed: u64,
    pub object: String,
    /// Point file, relative to the manifest.
    pub file: String,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub requested_occlusion: f64,
    pub visible: usize,
    pub total: usize,
    pub occlusion_factor: f64,
    pub noise_sigma: f64,
}

impl ManifestRow {
    pub fn rotation(&self) -> AxisAngle {
        AxisAngle([self.rx, self.ry, self.rz])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// `# key: value` header entries, version tag excluded.
    pub header: BTreeMap<String, String>,
    pub rows: Vec<ManifestRow>,
}

pub fn write_manifest(path: &Path, repro: &Reproducibility, extra: &[(&str, String)], rows: &[ManifestRow]) -> Result<()> {
    let mut s = format!("{MANIFEST_TAG}\n{}", repro.comment_lines());
    for (k, v) in extra {
        let _ = writeln!(s, "# {k}: {v}");
    }
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(MANIFEST_COLUMNS).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
    let mut out = s.into_bytes();
    out.extend(body);
    write_file(path, &out)
}

const MANIFEST_COLUMNS: [&str; 17] = [
    "id", "split", "bin", "seed", "object", "file", "rx", "ry", "rz", "tx", "ty", "tz",
    "requested_occlusion", "visible", "total", "occlusion_factor", "noise_sigma",
];

fn read_header(path: &Path, tag: &str) -> Result<BTreeMap<String, String>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(first)) if first == tag => {}
        _ => return Err(CliError::format(path, format!("missing version tag {tag:?}"))),
    }
    let mut header = BTreeMap::new();
    for line in lines {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let Some(rest) = line.strip_prefix("# ") else { break };
        if let Some((k, v)) = rest.split_once(": ") {
            header.insert(k.to_string(), v.to_string());
        }
    }
    Ok(header)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let header = read_header(path, MANIFEST_TAG)?;
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f);
    let columns = r.headers().map_err(|e| CliError::format(path, e.to_string()))?.clone();
    if columns.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        return Err(CliError::format(path, format!("unexpected columns {:?}", columns.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let row: ManifestRow = rec.map_err(|e| CliError::format(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(Manifest { header, rows })
}

/// Everything needed to resume training or to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub reproducibility: Reproducibility,
    pub trainer: Trainer,
    /// Mean training error (radians) of the last check, if one ran.
    pub train_error: Option<f64>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(ckpt).map_err(|e| CliError::format(path, e.to_string()))?;
    write_file(path, &json)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(CliError::format(path, format!("unsupported format {:?}", ckpt.format)));
    }
    let m = &ckpt.trainer.model;
    rotreg_core::model::Model::from_parts(m.spec.clone(), m.point_layers.clone(), m.global_layer.clone(), m.head.clone())
        .map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(ckpt)
}

/// Degree summary of one bin, as in an error table with 95% intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: OcclusionBin,
    pub count: usize,
    pub mean_degrees: Option<f64>,
    pub ci95_degrees: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_degrees: Option<f64>,
    pub ci95_degrees: Option<f64>,
    pub median_degrees: Option<f64>,
    pub fraction_above_90_degrees: f64,
    pub bins: Vec<BinRow>,
    pub add_threshold_meters: Option<f64>,
    pub add_accuracy: Option<f64>,
    pub ci_method: String,
}

impl Summary {
    pub fn of(report: &EvalReport) -> Self {
        let (mean, ci) = rotreg_core::eval::mean_ci95(&report.errors());
        Summary {
            count: report.records.len(),
            mean_degrees: mean.map(f64::to_degrees),
            ci95_degrees: ci.map(f64::to_degrees),
            median_degrees: report.median_error().map(f64::to_degrees),
            fraction_above_90_degrees: report.fraction_above(std::f64::consts::FRAC_PI_2),
            bins: report
                .bins
                .iter()
                .map(|b| BinRow {
                    bin: b.bin,
                    count: b.count,
                    mean_degrees: b.mean_error.map(f64::to_degrees),
                    ci95_degrees: b.ci95.map(f64::to_degrees),
                })
                .collect(),
            add_threshold_meters: report.add_threshold,
            add_accuracy: report.add_accuracy,
            ci_method: rotreg_core::eval::CI_METHOD.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub reproducibility: Reproducibility,
    pub label: String,
    pub summary: Summary,
    pub report: EvalReport,
}

pub fn write_report(path: &Path, file: &ReportFile) -> Result<()> {
    let json = serde_json::to_vec_pretty(file).map_err(|e| CliError::format(path, e.to_string()))?;
    write_file(path, &json)
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let file: ReportFile = serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    if file.format != REPORT_FORMAT {
        return Err(CliError::format(path, format!("unsupported format {:?}", file.format)));
    }
    Ok(file)
}

pub fn write_curve(path: &Path, repro: &Reproducibility, curve: &[CurvePoint]) -> Result<()> {
    let mut s = format!("{CURVE_TAG}\n{}threshold_degrees,fraction\n", repro.comment_lines());
    for p in curve {
        let _ = writeln!(s, "{},{}", p.threshold.to_degrees(), p.fraction);
    }
    write_file(path, s.as_bytes())
}

pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    read_header(path, CURVE_TAG)?;
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let row: (f64, f64) = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        out.push(row);
    }
    Ok(out)
}

/// Appending CSV writer with a tagged header, used for training logs.
pub struct CsvLog {
    path: PathBuf,
    file: fs::File,
}

impl CsvLog {
    /// Creates the file, or appends when `append` is set and the file exists.
    pub fn open(path: &Path, tag: &str, repro: &Reproducibility, columns: &str, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        if append && path.exists() {
            read_header(path, tag)?;
            let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
            return Ok(CsvLog { path: path.to_path_buf(), file });
        }
        let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        let head = format!("{tag}\n{}{columns}\n", repro.comment_lines());
        file.write_all(head.as_bytes()).map_err(|e| CliError::io(path, e))?;
        Ok(CsvLog { path: path.to_path_buf(), file })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| CliError::io(&self.path, e))
    }
}

/// Data rows of a tagged CSV file, as strings.
pub fn read_csv_rows(path: &Path, tag: &str) -> Result<Vec<Vec<String>>> {
    read_header(path, tag)?;
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        out.push(rec.iter().map(str::to_string).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repro() -> Reproducibility {
        Reproducibility::new("test", "ab".repeat(32), &[("data", 3)])
    }

    #[test]
    fn points_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let seg = PointCloudSegment::new(vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0, 5.0, -0.0], ChannelMode::Xyz, "p").unwrap();
        write_points(&path, &seg).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# rotreg points v1\n3 2\n"));
        assert_eq!(read_points(&path).unwrap().values(), seg.values());
    }

    #[test]
    fn point_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        for body in ["3 2\n1 2 3\n", "# rotreg points v1\n3 2\n1 2 3\n", "# rotreg points v1\n4 1\n1 2 3 4\n", "# rotreg points v1\n3 1\n1 x 3\n"] {
            fs::write(&path, body).unwrap();
            assert!(matches!(read_points(&path), Err(CliError::Format { .. })), "{body:?}");
        }
    }

    #[test]
    fn object_file_reading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mug.txt");
        fs::write(&path, "# comment\n0 0 0\n\n1 2 3\n 0.5 0.25 -1 \n").unwrap();
        let m = read_object(&path).unwrap();
        assert_eq!(m.points, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.5, 0.25, -1.0]]);
        assert_eq!(m.name, "mug");
        let out = dir.path().join("copy.txt");
        write_object(&out, &ObjectModel::l_shape()).unwrap();
        assert_eq!(read_object(&out).unwrap(), ObjectModel::l_shape());
        fs::write(&path, "1 2\n").unwrap();
        assert!(read_object(&path).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = ManifestRow {
            id: "train-00000".into(),
            split: Split::Train,
            bin: OcclusionBin::Moderate,
            seed: u64::MAX,
            object: "l-shape".into(),
            file: "points/train-00000.txt".into(),
            rx: 0.1,
            ry: -1.0 / 3.0,
            rz: 2.0,
            tx: 0.0,
            ty: 0.01,
            tz: 0.9,
            requested_occlusion: 0.25,
            visible: 768,
            total: 1024,
            occlusion_factor: 0.25,
            noise_sigma: 0.003,
        };
        write_manifest(&path, &repro(), &[("object", "l-shape".into())], &[row.clone()]).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.rows, vec![row]);
        assert_eq!(m.header["object"], "l-shape");
        assert_eq!(m.header["seed.data"], "3");
        write_manifest(&path, &repro(), &[], &[]).unwrap();
        assert!(read_manifest(&path).unwrap().rows.is_empty());
    }

    #[test]
    fn curve_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curve = [CurvePoint { threshold: 0.5f64.to_radians(), fraction: 0.25 }, CurvePoint { threshold: 1.0, fraction: 1.0 }];
        write_curve(&path, &repro(), &curve).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(CURVE_TAG));
        assert!(text.contains("\nthreshold_degrees,fraction\n"));
        let rows = read_curve(&path).unwrap();
        assert!((rows[0].0 - 0.5).abs() < 1e-12);
        assert_eq!(rows[1].1, 1.0);
    }
}
