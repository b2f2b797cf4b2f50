//! The subcommands. Each takes the effective configuration (flags applied) and
//! writes its outputs plus a copy of that configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rotreg_core::data::{make_dataset, DatasetSpec, ObjectModel, Split};
use rotreg_core::eval::{self, angle_error, EvalRecord, EvalReport, OcclusionBin};
use rotreg_core::geometry::{backproject, remove_translation, downsample};
use rotreg_core::model::{Model, Variant};
use rotreg_core::so3::AxisAngle;
use rotreg_core::train::{eval_input_seed, perturbed_translation, predict_from, LabeledSegment, TrainSettings, Trainer};

use crate::config::{Predictor, RunConfig, SplitChoice};
use crate::error::{CliError, Result};
use crate::formats::*;
use crate::images;

/// Evaluation batch size; predictions do not depend on it.
const EVAL_CHUNK: usize = 64;

fn write_config_copy(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.canonical().as_bytes())
}

/// The configured object: a built-in name or an ASCII point-list path.
pub fn load_object(cfg: &RunConfig) -> Result<ObjectModel> {
    match ObjectModel::builtin(&cfg.data.object) {
        Ok(m) => Ok(m),
        Err(_) => {
            let path = cfg.resolve(Path::new(&cfg.data.object));
            if path.exists() {
                read_object(&path)
            } else {
                Err(CliError::Config(format!(
                    "[data] object {:?} is neither a built-in shape (l-shape, bar) nor an existing file",
                    cfg.data.object
                )))
            }
        }
    }
}

/// Writes the dataset and returns the number of samples.
pub fn generate(cfg: &RunConfig) -> Result<usize> {
    let object = load_object(cfg)?;
    let spec = DatasetSpec { train: cfg.data.train, test: cfg.data.test, noise_sigma: cfg.data.noise_sigma, seed: cfg.data.seed };
    let entries = make_dataset(&spec, &object)?;
    let dir = cfg.resolve(&cfg.data.dir);
    let repro = Reproducibility::new("generate", cfg.hash(), &[("data", cfg.data.seed)]);
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        let file = format!("{POINTS_DIR}/{}.txt", e.id);
        write_points(&dir.join(&file), &e.sample.segment)?;
        let r = e.sample.rotation.0;
        let t = e.sample.translation;
        rows.push(ManifestRow {
            id: e.id.clone(),
            split: e.split,
            bin: e.bin,
            seed: e.seed,
            object: object.name.clone(),
            file,
            rx: r[0],
            ry: r[1],
            rz: r[2],
            tx: t[0],
            ty: t[1],
            tz: t[2],
            requested_occlusion: e.requested_occlusion,
            visible: e.sample.visible,
            total: e.sample.total,
            occlusion_factor: e.sample.occlusion_factor,
            noise_sigma: e.noise_sigma,
        });
    }
    write_object(&dir.join(OBJECT_FILE), &object)?;
    let extra = [
        ("object", object.name.clone()),
        ("object_points", object.len().to_string()),
        ("train", format!("low={} moderate={}", cfg.data.train.low, cfg.data.train.moderate)),
        ("test", format!("low={} moderate={}", cfg.data.test.low, cfg.data.test.moderate)),
    ];
    write_manifest(&dir.join(MANIFEST_FILE), &repro, &extra, &rows)?;
    write_config_copy(&dir, cfg)?;
    Ok(rows.len())
}

/// Samples of one split of a dataset directory, in manifest order.
pub struct LoadedSplit {
    pub rows: Vec<ManifestRow>,
    pub items: Vec<LabeledSegment>,
}

pub fn load_split(dir: &Path, split: Split) -> Result<LoadedSplit> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(&manifest_path)?;
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for row in manifest.rows.into_iter().filter(|r| r.split == split) {
        let path = dir.join(&row.file);
        let segment = read_points(&path)?;
        if segment.len() != row.visible {
            return Err(CliError::format(
                &manifest_path,
                format!("{}: manifest lists {} visible points, file has {}", row.id, row.visible, segment.len()),
            ));
        }
        items.push(LabeledSegment { segment, rotation: row.rotation().canonicalize(), translation: row.translation() });
        rows.push(row);
    }
    Ok(LoadedSplit { rows, items })
}

fn check_channels(items: &[LabeledSegment], model: &Model) -> Result<()> {
    let want = model.spec.input_dim;
    match items.iter().find(|s| s.segment.dim() < want) {
        Some(s) => Err(CliError::Mismatch(format!(
            "sample {} has {} channels per point, the model needs {want}",
            s.segment.frame_id,
            s.segment.dim()
        ))),
        None => Ok(()),
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub iterations: u64,
    pub last_loss: Option<f64>,
    /// Mean training error in radians at the last check.
    pub last_check: Option<f64>,
    pub best_check: Option<f64>,
    pub stopped_early: bool,
}

/// Keeps the log rows of iterations before `upto`, so a resumed run appends
/// exactly one row per iteration.
fn truncate_log(path: &Path, upto: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = read_text(path)?;
    let mut kept = String::with_capacity(text.len());
    let mut in_body = false;
    for line in text.lines() {
        let keep = if line.starts_with('#') || !in_body {
            if !line.starts_with('#') {
                in_body = true;
            }
            true
        } else {
            line.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|it| it < upto)
        };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_file(path, kept.as_bytes())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let spec = cfg.model.spec()?;
    let data = load_split(&cfg.train_dataset(), Split::Train)?.items;
    if data.len() < 2 {
        return Err(CliError::Mismatch(format!("training needs at least 2 samples, dataset has {}", data.len())));
    }
    let init_seed = t.init_seed.unwrap_or(t.seed);
    let out = cfg.resolve(&t.out);
    let resume = t.resume.as_ref().map(|p| cfg.resolve(p));
    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            let tr = ckpt.trainer;
            if tr.model.spec != spec {
                return Err(CliError::Mismatch(format!("{}: checkpoint architecture differs from [model]", path.display())));
            }
            if tr.settings != (TrainSettings { batch_size: t.batch_size, seed: t.seed }) || tr.adam.lr != t.lr {
                return Err(CliError::Mismatch(format!(
                    "{}: checkpoint was trained with batch_size {}, seed {}, lr {}",
                    path.display(),
                    tr.settings.batch_size,
                    tr.settings.seed,
                    tr.adam.lr
                )));
            }
            tr
        }
        None => Trainer::new(Model::new(spec, init_seed)?, t.lr, TrainSettings { batch_size: t.batch_size, seed: t.seed })?,
    };
    check_channels(&data, &trainer.model)?;

    let repro = Reproducibility::new("train", cfg.hash(), &[("train", t.seed), ("init", init_seed)]);
    let log_path = out.join(LOG_FILE);
    let checks_path = out.join(CHECKS_FILE);
    if resume.is_some() {
        truncate_log(&log_path, trainer.iteration)?;
        truncate_log(&checks_path, trainer.iteration + 1)?;
    }
    let mut log = CsvLog::open(&log_path, LOG_TAG, &repro, "iteration,loss_radians", resume.is_some())?;
    let mut checks = CsvLog::open(
        &checks_path,
        CHECKS_TAG,
        &repro,
        "iteration,mean_error_degrees,median_error_degrees",
        resume.is_some(),
    )?;
    write_config_copy(&out, cfg)?;

    let best_path = out.join(BEST_CHECKPOINT);
    let mut best = match &resume {
        Some(_) if best_path.exists() => read_checkpoint(&best_path)?.train_error,
        _ => None,
    };
    let checkpoint = |trainer: &Trainer, err: Option<f64>| Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        reproducibility: repro.clone(),
        trainer: trainer.clone(),
        train_error: err,
    };
    let check_items = &data[..t.check_samples.clamp(1, data.len())];
    let run_check = |trainer: &Trainer| -> Result<(f64, f64)> {
        let preds = predict_from(&trainer.model, check_items, 0, t.seed, 0.0, EVAL_CHUNK)?;
        let errs: Vec<f64> = preds.iter().zip(check_items).map(|(p, s)| angle_error(*p, s.rotation)).collect();
        Ok((mean(&errs), eval::median(&errs).unwrap_or(0.0)))
    };

    let mut outcome = TrainOutcome { iterations: trainer.iteration, last_loss: None, last_check: None, best_check: best, stopped_early: false };
    while trainer.iteration < t.iterations {
        let it = trainer.iteration;
        let loss = trainer.step(&data)?;
        log.row(&[it.to_string(), loss.to_string()])?;
        outcome.last_loss = Some(loss);
        let done = trainer.iteration == t.iterations;
        if t.check_every > 0 && (trainer.iteration % t.check_every == 0 || done) {
            let (m, med) = run_check(&trainer)?;
            checks.row(&[trainer.iteration.to_string(), m.to_degrees().to_string(), med.to_degrees().to_string()])?;
            eprintln!(
                "iteration {:>6}  loss {:.4} rad  train error mean {:.2} deg, median {:.2} deg",
                trainer.iteration,
                loss,
                m.to_degrees(),
                med.to_degrees()
            );
            outcome.last_check = Some(m);
            if best.is_none_or(|b| m < b) {
                best = Some(m);
                write_checkpoint(&best_path, &checkpoint(&trainer, Some(m)))?;
            }
            if t.stop_below_degrees.is_some_and(|s| m.to_degrees() < s) {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    outcome.iterations = trainer.iteration;
    outcome.best_check = best;
    write_checkpoint(&out.join(FINAL_CHECKPOINT), &checkpoint(&trainer, outcome.last_check))?;
    if best.is_none() {
        write_checkpoint(&best_path, &checkpoint(&trainer, None))?;
    }
    Ok(outcome)
}

/// Predictions for `items`, split across `workers` threads. Each worker handles
/// a contiguous slice with the global item offsets, so the result does not
/// depend on the worker count.
pub fn predict_parallel(
    model: &Model,
    items: &[LabeledSegment],
    seed: u64,
    translation_sigma: f64,
    workers: usize,
) -> Result<Vec<AxisAngle>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return Ok(predict_from(model, items, 0, seed, translation_sigma, EVAL_CHUNK)?);
    }
    let per = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<AxisAngle>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .enumerate()
            .map(|(w, slice)| {
                s.spawn(move || Ok(predict_from(model, slice, w * per, seed, translation_sigma, EVAL_CHUNK)?))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::PointNet => "pn",
        Variant::DynamicGraph => "dg",
    }
}

pub fn evaluate(cfg: &RunConfig) -> Result<ReportFile> {
    let e = &cfg.eval;
    let dir = cfg.eval_dataset();
    let split = match e.split {
        SplitChoice::Train => Split::Train,
        SplitChoice::Test => Split::Test,
    };
    let loaded = load_split(&dir, split)?;
    if loaded.items.is_empty() {
        return Err(CliError::Mismatch(format!("{}: no {} samples to evaluate", dir.display(), split.label())));
    }
    let object = read_object(&dir.join(OBJECT_FILE))?;
    let (predictions, default_label) = match e.predictor {
        Predictor::GroundTruth => (loaded.items.iter().map(|s| s.rotation).collect(), "ground-truth".to_string()),
        Predictor::Model => {
            let ckpt = read_checkpoint(&cfg.eval_checkpoint())?;
            let model = ckpt.trainer.model;
            check_channels(&loaded.items, &model)?;
            let preds = predict_parallel(&model, &loaded.items, e.seed, e.translation_sigma, e.workers)?;
            (preds, variant_label(model.spec.variant).to_string())
        }
    };
    let mut records = Vec::with_capacity(predictions.len());
    for (i, ((pred, item), row)) in predictions.iter().zip(&loaded.items).zip(&loaded.rows).enumerate() {
        // the translation estimate the network saw
        let t_hat = perturbed_translation(item.translation, eval_input_seed(e.seed, i), e.translation_sigma)?;
        let add = eval::add_metric(&object, &item.rotation.to_rotation(), item.translation, &pred.to_rotation(), t_hat)?;
        let occ = eval::occlusion_factor(row.visible, row.total)?;
        records.push(EvalRecord {
            frame_id: row.id.clone(),
            angle_error: angle_error(*pred, item.rotation),
            add: Some(add),
            occlusion_factor: occ.value,
            occlusion_clamped: occ.clamped,
        });
    }
    let thresholds = match &e.thresholds_degrees {
        Some(d) => d.iter().map(|v| v.to_radians()).collect(),
        None => eval::default_thresholds(),
    };
    let report = EvalReport::build(records, &thresholds, e.add_threshold)?;
    let file = ReportFile {
        format: REPORT_FORMAT.into(),
        reproducibility: Reproducibility::new("eval", cfg.hash(), &[("eval", e.seed)]),
        label: e.label.clone().unwrap_or(default_label),
        summary: Summary::of(&report),
        report,
    };
    let out = cfg.resolve(&e.out);
    write_report(&out.join(REPORT_FILE), &file)?;
    write_curve(&out.join(CURVE_FILE), &file.reproducibility, &file.report.accuracy_curve)?;
    write_config_copy(&out, cfg)?;
    Ok(file)
}

fn cell(mean: Option<f64>, ci: Option<f64>, n: usize) -> String {
    match (mean, ci) {
        (Some(m), Some(c)) => format!("{m:.2} ± {c:.2} (n={n})"),
        (Some(m), None) => format!("{m:.2} (n={n})"),
        _ => format!("n/a (n={n})"),
    }
}

/// Error table: one row per report, mean geodesic error in degrees with the
/// 95% interval per occlusion bin.
pub fn render_table(reports: &[(String, ReportFile)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| method | low (O < 0.2) | moderate (0.2 ≤ O ≤ 0.4) | all | median | > 90° |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for (label, r) in reports {
        let sm = &r.summary;
        let bin = |b: OcclusionBin| {
            sm.bins
                .iter()
                .find(|x| x.bin == b)
                .map(|x| cell(x.mean_degrees, x.ci95_degrees, x.count))
                .unwrap_or_else(|| cell(None, None, 0))
        };
        let median = sm.median_degrees.map(|m| format!("{m:.2}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "| {label} | {} | {} | {} | {median} | {:.1}% |",
            bin(OcclusionBin::Low),
            bin(OcclusionBin::Moderate),
            cell(sm.mean_degrees, sm.ci95_degrees, sm.count),
            100.0 * sm.fraction_above_90_degrees
        );
    }
    let _ = writeln!(s, "\nMean geodesic rotation error in degrees ± half-width of the 95% interval ({}).", eval::CI_METHOD);
    s
}

pub fn report(cfg: &RunConfig) -> Result<String> {
    let r = &cfg.report;
    if r.inputs.is_empty() {
        return Err(CliError::Config("[report] inputs is empty; list evaluation reports to tabulate".into()));
    }
    if let Some(l) = &r.labels {
        if l.len() != r.inputs.len() {
            return Err(CliError::Config(format!("[report] {} labels for {} inputs", l.len(), r.inputs.len())));
        }
    }
    let mut rows = Vec::new();
    for (i, p) in r.inputs.iter().enumerate() {
        let path = cfg.resolve(p);
        let path = if path.is_dir() { path.join(REPORT_FILE) } else { path };
        let file = read_report(&path)?;
        let label = r.labels.as_ref().map(|l| l[i].clone()).unwrap_or_else(|| file.label.clone());
        rows.push((label, file));
    }
    let table = render_table(&rows);
    let repro = Reproducibility::new("report", cfg.hash(), &[]);
    let out = cfg.resolve(&r.out);
    let mut md = format!("<!-- {TABLE_FORMAT} -->\n<!--\n{}-->\n\n", repro.comment_lines());
    md.push_str(&table);
    write_file(&out.join(TABLE_FILE), md.as_bytes())?;
    let mut csv = format!("# {TABLE_FORMAT}\n{}", repro.comment_lines());
    csv.push_str("label,bin,count,mean_degrees,ci95_degrees\n");
    for (label, f) in &rows {
        for b in &f.summary.bins {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{label},{},{},{},{}", b.bin.label(), b.count, opt(b.mean_degrees), opt(b.ci95_degrees));
        }
    }
    write_file(&out.join("table.csv"), csv.as_bytes())?;
    write_config_copy(&out, cfg)?;
    Ok(table)
}

/// Inputs of a single-frame prediction.
#[derive(Debug, Clone)]
pub struct PredictInputs {
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub color: Option<PathBuf>,
    /// Object translation in the camera frame; the segment centroid when absent.
    pub translation: Option<[f64; 3]>,
    pub checkpoint: Option<PathBuf>,
}

pub fn predict(cfg: &RunConfig, inputs: &PredictInputs) -> Result<BTreeMap<String, serde_json::Value>> {
    let camera = cfg.camera.ok_or_else(|| CliError::Config("predict needs a [camera] section".into()))?;
    let intr = camera.intrinsics()?;
    let depth = images::read_depth(&inputs.depth)?;
    let mask = images::read_mask(&inputs.mask)?;
    let color = inputs.color.as_deref().map(images::read_color).transpose()?;
    let ckpt_path = inputs.checkpoint.clone().unwrap_or_else(|| cfg.eval_checkpoint());
    let model = read_checkpoint(&ckpt_path)?.trainer.model;
    if model.spec.input_dim == 6 && color.is_none() {
        return Err(CliError::Mismatch("the model uses color; pass --color".into()));
    }
    let seg = backproject(&depth, color.as_ref(), &mask, &intr)?;
    let t = inputs.translation.unwrap_or_else(|| seg.centroid());
    let input = remove_translation(&downsample(&seg, model.spec.num_points, cfg.eval.seed)?, t);
    let r = model.predict_rotation(&input)?.canonicalize();
    let mut out = BTreeMap::new();
    out.insert("format".into(), "rotreg prediction v1".into());
    out.insert("axis_angle".into(), serde_json::json!(r.0));
    out.insert("angle_degrees".into(), serde_json::json!(r.angle().to_degrees()));
    out.insert("translation".into(), serde_json::json!(t));
    out.insert("segment_points".into(), serde_json::json!(seg.len()));
    out.insert("checkpoint".into(), serde_json::json!(ckpt_path.display().to_string()));
    Ok(out)
}
