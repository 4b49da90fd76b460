use super::config::{ExperimentConfig, SweepSpec};
use super::{prepare_out_dir, write_file, GlobalOptions, HarnessError};
use crate::backbone::DualHeadModel;
use crate::data::{
    generate_synthetic, load_manifest, save_sample, DatasetManifest, ManifestFile, SampleFormat, SyntheticSpec,
};
use crate::metrics::{MetricOptions, SegMetrics};
use crate::trainer::{
    aggregate, evaluate_model, load_samples, run_seed, seed_dir, EvalConfig, Evaluation, RunResult, SeedFailure,
    SeedResult, TrainConfig, TrainData, TrainError,
};
use crate::volume::Shape3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RESULT_FILE: &str = "result.json";
pub const SEED_RESULT_FILE: &str = "seed_result.json";
pub const EVAL_CSV: &str = "eval.csv";

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("result types serialize")
}

fn to_toml<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    toml::to_string(value).map_err(|e| HarnessError::Invalid(format!("config cannot be written as TOML: {e}")))
}

/// Manifest with the experiment's labeled/unlabeled budget applied.
fn budgeted_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest, HarnessError> {
    let mut manifest = load_manifest(&cfg.manifest)?;
    if let Some(n) = cfg.labeled {
        manifest = manifest.with_labeled_count(n, cfg.split_seed)?;
    }
    if let Some(n) = cfg.unlabeled {
        manifest = manifest.with_unlabeled_limit(n, cfg.split_seed);
    }
    Ok(manifest)
}

fn read_seed_result(path: &Path, seed: u64) -> Option<SeedResult> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str::<SeedResult>(&text) {
        Ok(r) if r.seed == seed => Some(r),
        _ => {
            log::warn!("{}: unreadable, seed {seed} will be retrained", path.display());
            None
        }
    }
}

/// Run every seed of a validated experiment into `cfg.out_dir`.
///
/// With `resume`, seeds whose result file already exists are not retrained,
/// and the stored config snapshot must match. Returns the aggregate even
/// when some seeds failed; the caller decides the exit status.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let manifest = budgeted_manifest(cfg)?;
    let data = TrainData::from_manifest(&manifest, &cfg.train)?;
    data.check(&cfg.train)?;
    if manifest.test_ids.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "{} has no test volumes",
            cfg.manifest.display()
        )));
    }
    let test = load_samples(&manifest, &manifest.test_ids, &cfg.train)?;
    run_experiment(cfg, &data, &test, resume)
}

fn run_experiment(
    cfg: &ExperimentConfig,
    data: &TrainData,
    test: &[crate::data::Sample],
    resume: bool,
) -> Result<RunResult, HarnessError> {
    let out = &cfg.out_dir;
    let snapshot_path = out.join(CONFIG_SNAPSHOT);
    let snapshot = to_toml(cfg)?;
    if resume && snapshot_path.exists() {
        let previous = std::fs::read_to_string(&snapshot_path).map_err(HarnessError::io(&snapshot_path))?;
        if previous != snapshot {
            return Err(HarnessError::Invalid(format!(
                "{} was produced by a different config; refusing to resume",
                out.display()
            )));
        }
    }
    prepare_out_dir(out, resume)?;
    write_file(&snapshot_path, &snapshot)?;

    let labeled = data.labeled.len() + data.validation.len();
    let run_id = cfg.run_id.clone().unwrap_or_else(|| cfg.default_run_id(labeled));
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(seed_dir(seed));
        let result_path = dir.join(SEED_RESULT_FILE);
        if resume {
            if let Some(r) = read_seed_result(&result_path, seed) {
                log::info!("{run_id}: seed {seed} already finished, reusing it");
                per_seed.push(r);
                continue;
            }
        }
        std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
        let seed_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        log::info!("{run_id}: training seed {seed}");
        match run_seed(&seed_cfg, data, test, cfg.metrics, Some(&dir)) {
            Ok(r) => {
                log::info!("{run_id}: seed {seed} test dice {:.4}", r.test.mean.dice);
                write_file(&result_path, to_json(&r))?;
                per_seed.push(r);
            }
            Err(e) => {
                log::error!("{run_id}: seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let result = aggregate(&run_id, &cfg.train, data, &cfg.seeds, per_seed, failures)?;
    write_file(&out.join(RESULT_FILE), to_json(&result))?;
    Ok(result)
}

/// One CSV row of a sweep; `error` is set instead of the metrics when the
/// value failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd: Option<f64>,
    pub asd: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn ok(value: f64, m: &SegMetrics) -> Self {
        Self {
            value,
            dice: Some(m.dice),
            jaccard: Some(m.jaccard),
            hd: Some(m.hausdorff_mm),
            asd: Some(m.asd_mm),
            error: None,
        }
    }

    fn failed(value: f64, error: String) -> Self {
        Self {
            value,
            dice: None,
            jaccard: None,
            hd: None,
            asd: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub csv: PathBuf,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

fn value_dir(axis: &str, value: f64) -> String {
    if value.fract() == 0.0 && value.abs() < 1e15 {
        format!("{axis}_{}", value as i64)
    } else {
        format!("{axis}_{value:?}")
    }
}

/// One experiment per sweep value under `spec.base.out_dir`, then
/// `sweep_<axis>.csv`. Failed values get an error row; the sweep goes on.
pub fn cmd_sweep(spec: &SweepSpec, globals: &GlobalOptions, parallel: bool) -> Result<SweepSummary, HarnessError> {
    if parallel && globals.deterministic {
        return Err(HarnessError::Invalid(
            "--parallel cannot be combined with --deterministic".into(),
        ));
    }
    spec.validate()?;
    let base = &spec.base;
    let axis = spec.axis.name();
    prepare_out_dir(&base.out_dir, false)?;
    let manifest = budgeted_manifest(base)?;
    // r only changes the cached boundary band, which the trainer recomputes
    let data = TrainData::from_manifest(&manifest, &base.train)?;
    let test = load_samples(&manifest, &manifest.test_ids, &base.train)?;
    let labeled = data.labeled.len() + data.validation.len();
    let base_id = base.run_id.clone().unwrap_or_else(|| base.default_run_id(labeled));

    let run_value = |value: f64| -> SweepRow {
        let mut cfg = spec.axis.apply(base, value);
        cfg.out_dir = base.out_dir.join(value_dir(axis, value));
        cfg.run_id = Some(format!("{base_id}_{}", value_dir(axis, value)));
        let outcome = data
            .check(&cfg.train)
            .map_err(HarnessError::from)
            .and_then(|_| run_experiment(&cfg, &data, &test, false));
        match outcome {
            Ok(r) if r.failures.is_empty() => SweepRow::ok(value, &r.mean),
            Ok(r) => SweepRow::failed(value, format!("{} of {} seeds failed", r.failures.len(), r.seeds.len())),
            Err(e) => {
                log::error!("{axis} = {value}: {e}");
                SweepRow::failed(value, e.to_string())
            }
        }
    };
    let values = spec.values();
    let rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = values.iter().map(|&v| s.spawn(move || run_value(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    } else {
        values.iter().map(|&v| run_value(v)).collect()
    };

    let csv_path = base.out_dir.join(format!("sweep_{axis}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(HarnessError::io(&csv_path))?;
    Ok(SweepSummary { csv: csv_path, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSummary {
    pub train: usize,
    pub test: usize,
    pub manifests: Vec<PathBuf>,
}

pub const HDF5_DIR: &str = "hdf5";
pub const RAWJSON_DIR: &str = "rawjson";
pub const MANIFEST_HDF5: &str = "manifest.json";
pub const MANIFEST_RAWJSON: &str = "manifest_rawjson.json";

/// Generate a synthetic corpus into an empty directory: every sample in
/// both formats, the first 80% (rounded) as training volumes.
pub fn cmd_gen_data(spec: &SyntheticSpec, out: &Path) -> Result<GenDataSummary, HarnessError> {
    spec.validate()?;
    prepare_out_dir(out, false)?;
    let samples = generate_synthetic(spec)?;
    let n_train = (samples.len() as f64 * 0.8).round() as usize;
    let mut manifests = Vec::new();
    for (dir, ext, format, manifest_name) in [
        (HDF5_DIR, ".h5", SampleFormat::Hdf5, MANIFEST_HDF5),
        (RAWJSON_DIR, "", SampleFormat::RawJson, MANIFEST_RAWJSON),
    ] {
        std::fs::create_dir_all(out.join(dir)).map_err(HarnessError::io(&out.join(dir)))?;
        let mut ids = Vec::with_capacity(samples.len());
        for s in &samples {
            let rel = format!("{dir}/{}{ext}", s.id);
            save_sample(s, &out.join(&rel), format)?;
            ids.push(rel);
        }
        let test = ids.split_off(n_train);
        let file = ManifestFile {
            train: ids,
            test,
            labeled: Vec::new(),
        };
        let path = out.join(manifest_name);
        write_file(&path, to_json(&file))?;
        manifests.push(path);
    }
    Ok(GenDataSummary {
        train: n_train,
        test: samples.len() - n_train,
        manifests,
    })
}

/// Which manifest volumes to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSplit {
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: EvalSplit,
    pub patch: Shape3,
    /// `None` uses half the patch.
    pub stride: Option<Shape3>,
    /// Z-score images as during training.
    pub normalize: bool,
    pub metrics: MetricOptions,
    pub threshold: f32,
    /// Directory for `eval.csv`; nothing is written when `None`.
    pub out: Option<PathBuf>,
}

impl EvalRequest {
    /// Patch, stride, normalization and metric options of an experiment.
    pub fn from_experiment(cfg: &ExperimentConfig, checkpoint: PathBuf) -> Self {
        Self {
            checkpoint,
            manifest: cfg.manifest.clone(),
            split: EvalSplit::Test,
            patch: cfg.train.patch(),
            stride: Some(cfg.train.stride()),
            normalize: cfg.train.normalize,
            metrics: cfg.metrics,
            threshold: 0.5,
            out: None,
        }
    }
}

/// Score a saved checkpoint on manifest volumes with the training
/// evaluation path; writes per-volume rows plus a mean row to `eval.csv`.
pub fn cmd_eval(req: &EvalRequest) -> Result<Evaluation, HarnessError> {
    if !(req.threshold > 0.0 && req.threshold < 1.0) {
        return Err(HarnessError::Invalid(format!(
            "threshold {} must lie in (0, 1)",
            req.threshold
        )));
    }
    let mut model = DualHeadModel::load(&req.checkpoint)?;
    if model.class_count() != 1 {
        return Err(TrainError::ClassCount {
            expected: 1,
            found: model.class_count(),
        }
        .into());
    }
    model.trunk().config().check_input(req.patch)?;
    let manifest = load_manifest(&req.manifest)?;
    let ids = match req.split {
        EvalSplit::Test => &manifest.test_ids,
        EvalSplit::Train => &manifest.train_ids,
    };
    let load_cfg = TrainConfig {
        normalize: req.normalize,
        ..TrainConfig::default()
    };
    let samples = load_samples(&manifest, ids, &load_cfg)?;
    let in_channels = model.trunk().config().in_channels;
    if in_channels != 1 {
        return Err(crate::backbone::ModelError::ChannelMismatch {
            expected: in_channels,
            found: 1,
        }
        .into());
    }
    let stride = req
        .stride
        .unwrap_or_else(|| Shape3::from_dims(req.patch.dims().map(|p| (p / 2).max(1))));
    let eval = evaluate_model(
        &mut model,
        &samples,
        &EvalConfig {
            patch: req.patch,
            stride,
            metrics: req.metrics,
            threshold: req.threshold,
        },
    )?;
    if let Some(dir) = &req.out {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        write_eval_csv(&eval, &dir.join(EVAL_CSV))?;
    }
    Ok(eval)
}

#[derive(Serialize)]
struct EvalRow<'a> {
    id: &'a str,
    dice: f64,
    jaccard: f64,
    hd: f64,
    asd: f64,
}

impl<'a> EvalRow<'a> {
    fn new(id: &'a str, m: &SegMetrics) -> Self {
        Self {
            id,
            dice: m.dice,
            jaccard: m.jaccard,
            hd: m.hausdorff_mm,
            asd: m.asd_mm,
        }
    }
}

fn write_eval_csv(eval: &Evaluation, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for v in &eval.per_volume {
        w.serialize(EvalRow::new(&v.id, &v.metrics))
            .map_err(|e| csv_error(path, e))?;
    }
    w.serialize(EvalRow::new("mean", &eval.mean))
        .map_err(|e| csv_error(path, e))?;
    w.flush().map_err(HarnessError::io(path))
}

/// Plain-text table for the terminal.
pub fn format_evaluation(eval: &Evaluation) -> String {
    let width = eval.per_volume.iter().map(|v| v.id.len()).max().unwrap_or(0).max(4);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "id", "dice", "jaccard", "hd", "asd"
    );
    let mut line = |id: &str, m: &SegMetrics| {
        out += &format!(
            "{id:<width$}  {:>8.4}  {:>8.4}  {:>8.3}  {:>8.3}\n",
            m.dice, m.jaccard, m.hausdorff_mm, m.asd_mm
        );
    };
    for v in &eval.per_volume {
        line(&v.id, &v.metrics);
    }
    line("mean", &eval.mean);
    out
}
