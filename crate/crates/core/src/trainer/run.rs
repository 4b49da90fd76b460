use super::{train_step_fp, train_step_supervised, TrainConfig, TrainError, TrainMode};
use crate::backbone::{build_model_with_heads, DualHeadModel};
use crate::data::{augment, random_patch, sliding_window_infer, DatasetManifest, Predictor, Sample};
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate_pair, mean_metrics, MetricOptions, SegMetrics};
use crate::volume::{mask_from_probability, Shape3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_bnd: f64,
    pub loss_cons: f64,
    pub lr: f64,
}

/// Normalise the image (when configured) and cache the boundary band.
pub fn prepare_sample(sample: Sample, cfg: &TrainConfig) -> Result<Sample, TrainError> {
    let mut sample = if cfg.normalize { sample.normalized() } else { sample };
    sample.ensure_boundary(cfg.r)?;
    Ok(sample)
}

pub fn load_samples(manifest: &DatasetManifest, ids: &[String], cfg: &TrainConfig) -> Result<Vec<Sample>, TrainError> {
    ids.iter().map(|id| prepare_sample(manifest.load(id)?, cfg)).collect()
}

/// Prepared training pools.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    /// Used only in `fp_semisup` mode; labels are dropped on load.
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl TrainData {
    /// Load the manifest's labeled pool (minus the trailing validation
    /// fraction) and, in FP mode, its unlabeled pool.
    pub fn from_manifest(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let mut labeled = load_samples(manifest, &manifest.labeled_ids, cfg)?;
        let held_out = (cfg.validation_fraction * labeled.len() as f64).round() as usize;
        if held_out > 0 && held_out >= labeled.len() {
            return Err(TrainError::Config(format!(
                "validation_fraction {} leaves no labeled volume for training",
                cfg.validation_fraction
            )));
        }
        let validation = labeled.split_off(labeled.len() - held_out);
        let unlabeled = match cfg.mode {
            TrainMode::Supervised => Vec::new(),
            TrainMode::FpSemisup => manifest
                .unlabeled_ids
                .iter()
                .map(|id| {
                    let mut s = manifest.load(id)?;
                    s.label = None;
                    Ok(if cfg.normalize { s.normalized() } else { s })
                })
                .collect::<Result<_, TrainError>>()?,
        };
        Ok(Self {
            labeled,
            unlabeled,
            validation,
        })
    }

    pub fn check(&self, cfg: &TrainConfig) -> Result<(), TrainError> {
        if self.labeled.is_empty() {
            return Err(TrainError::Config("no labeled training volumes".into()));
        }
        if let Some(s) = self.labeled.iter().chain(&self.validation).find(|s| s.label.is_none()) {
            return Err(TrainError::MissingLabel(s.id.clone()));
        }
        if cfg.mode == TrainMode::FpSemisup && self.unlabeled.is_empty() {
            return Err(TrainError::Config(
                "fp_semisup needs at least one unlabeled volume".into(),
            ));
        }
        Ok(())
    }
}

/// Epoch-style sampler: every index once per shuffled pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub iteration: usize,
    pub dice: f64,
    pub model: DualHeadModel,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualHeadModel,
    /// Highest validation Dice, when a validation split exists.
    pub best: Option<BestCheckpoint>,
    pub log: Vec<LogRecord>,
    pub final_loss: LossBreakdown,
}

impl TrainOutcome {
    /// The best checkpoint when one was selected, else the final model.
    pub fn selected(&self) -> &DualHeadModel {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const LOG_FILE: &str = "log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

/// Run `cfg.iterations` updates. With `out_dir`, the log and the final
/// (and best) checkpoints are written there.
pub fn train(cfg: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    data.check(cfg)?;
    let mut model = build_model_with_heads(&cfg.backbone, 1, cfg.seed, cfg.method.uses_boundary_head())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut labeled_order = Cycler::new(data.labeled.len());
    let mut unlabeled_order = Cycler::new(data.unlabeled.len());
    let patch = cfg.patch();
    let eval = EvalConfig::from_train(cfg, MetricOptions::default());
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut best: Option<BestCheckpoint> = None;
    let mut final_loss = LossBreakdown::default();
    for iter in 1..=cfg.iterations {
        let mut draw = |pool: &[Sample], order: &mut Cycler, count: usize| -> Vec<Sample> {
            (0..count)
                .map(|_| {
                    let s = &pool[order.next(&mut rng)];
                    augment(
                        &random_patch(s, patch, cfg.foreground_prob, &mut rng),
                        &cfg.augment,
                        &mut rng,
                    )
                })
                .collect()
        };
        let labeled = draw(&data.labeled, &mut labeled_order, cfg.labeled_per_batch());
        let loss = match cfg.mode {
            TrainMode::Supervised => train_step_supervised(&mut model, &labeled, cfg)?,
            TrainMode::FpSemisup => {
                let unlabeled = draw(
                    &data.unlabeled,
                    &mut unlabeled_order,
                    cfg.batch_size - cfg.labeled_batch_size,
                );
                train_step_fp(&mut model, &labeled, &unlabeled, cfg)?
            }
        };
        if !loss.total.is_finite() {
            return Err(TrainError::Diverged(iter));
        }
        final_loss = loss;
        if iter == 1 || iter % cfg.log_every == 0 || iter == cfg.iterations {
            let record = LogRecord {
                iter,
                loss_total: loss.total,
                loss_seg: loss.seg,
                loss_bnd: loss.boundary,
                loss_cons: loss.consistency,
                lr: cfg.optimizer.lr,
            };
            log::debug!("iter {iter}: loss {:.5}", loss.total);
            if let Some((w, path)) = writer.as_mut() {
                let line = serde_json::to_string(&record).expect("log record serialises");
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
            log.push(record);
        }
        if !data.validation.is_empty() && (iter % cfg.eval_every == 0 || iter == cfg.iterations) {
            let dice = evaluate_model(&mut model, &data.validation, &eval)?.mean.dice;
            log::info!("iter {iter}: validation dice {dice:.4}");
            if best.as_ref().map_or(true, |b| dice > b.dice) {
                best = Some(BestCheckpoint {
                    iteration: iter,
                    dice,
                    model: model.clone(),
                });
            }
        }
    }
    if let Some(dir) = out_dir {
        if let Some((mut w, path)) = writer {
            w.flush().map_err(io_err(&path))?;
        }
        model.save(&dir.join(FINAL_CHECKPOINT))?;
        if let Some(b) = &best {
            b.model.save(&dir.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        log,
        final_loss,
    })
}

/// Sliding-window evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub patch: Shape3,
    pub stride: Shape3,
    pub metrics: MetricOptions,
    /// Foreground iff probability >= threshold.
    pub threshold: f32,
}

impl EvalConfig {
    pub fn from_train(cfg: &TrainConfig, metrics: MetricOptions) -> Self {
        Self {
            patch: cfg.patch(),
            stride: cfg.stride(),
            metrics,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_volume: Vec<VolumeMetrics>,
    pub mean: SegMetrics,
}

pub fn evaluate_model<P: Predictor>(
    model: &mut P,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("no volumes to evaluate".into()));
    }
    let mut per_volume = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s.label.as_ref().ok_or_else(|| TrainError::MissingLabel(s.id.clone()))?;
        let out = sliding_window_infer(model, &s.image, cfg.patch, cfg.stride)?;
        if out.seg.len() != 1 {
            return Err(TrainError::ClassCount {
                expected: 1,
                found: out.seg.len(),
            });
        }
        let pred = mask_from_probability(&out.seg[0], cfg.threshold);
        let metrics = evaluate_pair(&pred, label, s.image.spacing(), &cfg.metrics)?;
        log::debug!("{}: dice {:.4}", s.id, metrics.dice);
        per_volume.push(VolumeMetrics {
            id: s.id.clone(),
            metrics,
        });
    }
    let all: Vec<SegMetrics> = per_volume.iter().map(|v| v.metrics).collect();
    Ok(Evaluation {
        mean: mean_metrics(&all).expect("at least one volume"),
        per_volume,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Iteration of the evaluated checkpoint.
    pub checkpoint_iteration: usize,
    pub final_loss: LossBreakdown,
    pub test: Evaluation,
    pub loss_curve: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// Multi-seed result: per-seed test metrics and their mean and
/// (population) standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub method: String,
    pub mode: TrainMode,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    pub per_seed: Vec<SeedResult>,
    pub mean: SegMetrics,
    pub std: SegMetrics,
    #[serde(default)]
    pub failures: Vec<SeedFailure>,
}

fn std_metrics(items: &[SegMetrics], mean: &SegMetrics) -> SegMetrics {
    let n = items.len() as f64;
    let sd = |f: fn(&SegMetrics) -> f64| (items.iter().map(|m| (f(m) - f(mean)).powi(2)).sum::<f64>() / n).sqrt();
    SegMetrics {
        dice: sd(|m| m.dice),
        jaccard: sd(|m| m.jaccard),
        hausdorff_mm: sd(|m| m.hausdorff_mm),
        asd_mm: sd(|m| m.asd_mm),
        hausdorff_percentile: mean.hausdorff_percentile,
    }
}

/// Train with `cfg.seed` and evaluate the selected checkpoint on `test`.
pub fn run_seed(
    cfg: &TrainConfig,
    data: &TrainData,
    test: &[Sample],
    metrics: MetricOptions,
    out_dir: Option<&Path>,
) -> Result<SeedResult, TrainError> {
    let outcome = train(cfg, data, out_dir)?;
    let mut model = outcome.selected().clone();
    let evaluation = evaluate_model(&mut model, test, &EvalConfig::from_train(cfg, metrics))?;
    Ok(SeedResult {
        seed: cfg.seed,
        checkpoint_iteration: outcome.best.as_ref().map_or(cfg.iterations, |b| b.iteration),
        final_loss: outcome.final_loss,
        test: evaluation,
        loss_curve: outcome.log,
    })
}

/// Combine finished seeds into a run result; fails when none finished.
pub fn aggregate(
    run_id: &str,
    cfg: &TrainConfig,
    data: &TrainData,
    seeds: &[u64],
    per_seed: Vec<SeedResult>,
    failures: Vec<SeedFailure>,
) -> Result<RunResult, TrainError> {
    if per_seed.is_empty() {
        return Err(TrainError::AllSeedsFailed(failures));
    }
    let means: Vec<SegMetrics> = per_seed.iter().map(|r| r.test.mean).collect();
    let mean = mean_metrics(&means).expect("at least one seed");
    Ok(RunResult {
        run_id: run_id.to_string(),
        method: cfg.method.name().to_string(),
        mode: cfg.mode,
        labeled_count: data.labeled.len() + data.validation.len(),
        unlabeled_count: data.unlabeled.len(),
        seeds: seeds.to_vec(),
        config: cfg.clone(),
        std: std_metrics(&means, &mean),
        mean,
        per_seed,
        failures,
    })
}

/// Train and test once per seed. Seeds that fail are reported in
/// `failures`; the aggregate covers the rest. Per-seed artifacts go to
/// `out_dir/seed_<seed>`.
pub fn run_seeds(
    run_id: &str,
    cfg: &TrainConfig,
    data: &TrainData,
    test: &[Sample],
    seeds: &[u64],
    metrics: MetricOptions,
    out_dir: Option<&Path>,
) -> Result<RunResult, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    cfg.validate()?;
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let seed_cfg = TrainConfig { seed, ..cfg.clone() };
        let dir = out_dir.map(|d| d.join(seed_dir(seed)));
        log::info!("{run_id}: training seed {seed}");
        match run_seed(&seed_cfg, data, test, metrics, dir.as_deref()) {
            Ok(r) => {
                log::info!("{run_id}: seed {seed} test dice {:.4}", r.test.mean.dice);
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
    aggregate(run_id, cfg, data, seeds, per_seed, failures)
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

#[cfg(test)]
mod tests {
    use super::super::tests::{ball_sample, tiny_config};
    use super::super::Method;
    use super::*;
    use crate::backbone::ModelError;
    use crate::metrics::dice_coefficient;
    use crate::nn::Tensor;
    use crate::volume::BinaryMask;

    fn data(n_labeled: usize, n_unlabeled: usize) -> TrainData {
        let cfg = tiny_config(Method::Boundaryseg);
        let labeled = (0..n_labeled)
            .map(|i| prepare_sample(ball_sample(&format!("l{i}"), 12, i as u64), &cfg).unwrap())
            .collect();
        let unlabeled = (0..n_unlabeled)
            .map(|i| {
                let mut s = ball_sample(&format!("u{i}"), 12, 50 + i as u64).normalized();
                s.label = None;
                s
            })
            .collect();
        TrainData {
            labeled,
            unlabeled,
            validation: Vec::new(),
        }
    }

    /// Predicts a fixed mask (or a constant) regardless of the input.
    struct MaskStub {
        mask: Option<BinaryMask>,
        constant: f32,
        origin: [usize; 3],
    }

    impl Predictor for MaskStub {
        fn predict_patch(&mut self, patch: &Tensor) -> Result<(Tensor, Option<Tensor>), ModelError> {
            let s = patch.spatial;
            let mut t = Tensor::zeros(1, 1, s);
            for idx in 0..s.len() {
                let (i, j, k) = s.coords(idx);
                t.data[idx] = match &self.mask {
                    Some(m) => m.get(self.origin[0] + i, self.origin[1] + j, self.origin[2] + k) as u8 as f32,
                    None => self.constant,
                };
            }
            Ok((t, None))
        }
    }

    fn cube(side: usize, lo: [usize; 3], len: usize) -> BinaryMask {
        BinaryMask::from_fn(Shape3::cube(side), |i, j, k| {
            [i, j, k].iter().zip(lo).all(|(&v, l)| (l..l + len).contains(&v))
        })
    }

    fn whole_volume(side: usize) -> EvalConfig {
        EvalConfig {
            patch: Shape3::cube(side),
            stride: Shape3::cube(side),
            metrics: MetricOptions::default(),
            threshold: 0.5,
        }
    }

    fn labeled_sample(label: BinaryMask) -> Sample {
        let s = label.shape();
        let image = crate::volume::ImageVolume::new(s, vec![0.0; s.len()], [1.0; 3]).unwrap();
        Sample::new("v", image, Some(label)).unwrap()
    }

    #[test]
    fn ground_truth_stub_scores_perfectly() {
        let gt = cube(12, [3, 4, 2], 5);
        let mut stub = MaskStub {
            mask: Some(gt.clone()),
            constant: 0.0,
            origin: [0; 3],
        };
        let e = evaluate_model(&mut stub, &[labeled_sample(gt)], &whole_volume(12)).unwrap();
        assert_eq!(e.mean.dice, 1.0);
        assert_eq!(e.mean.hausdorff_mm, 0.0);
    }

    #[test]
    fn constant_half_is_all_foreground() {
        let gt = cube(12, [3, 4, 2], 5);
        let mut stub = MaskStub {
            mask: None,
            constant: 0.5,
            origin: [0; 3],
        };
        let e = evaluate_model(&mut stub, &[labeled_sample(gt.clone())], &whole_volume(12)).unwrap();
        let all = BinaryMask::from_fn(gt.shape(), |_, _, _| true);
        assert_eq!(e.mean.dice, dice_coefficient(&all, &gt).unwrap());
        assert_eq!(e.mean.dice, 2.0 * 125.0 / (1728.0 + 125.0));
    }

    #[test]
    fn shifted_cube_matches_hand_evaluation() {
        // 4^3 cubes offset by one voxel along H: 48 shared voxels; of the
        // 56 surface voxels on each side, 20 lie one voxel from the other
        // surface and 36 on it
        let gt = cube(12, [3, 2, 2], 4);
        let pred = cube(12, [2, 2, 2], 4);
        let mut stub = MaskStub {
            mask: Some(pred),
            constant: 0.0,
            origin: [0; 3],
        };
        let e = evaluate_model(&mut stub, &[labeled_sample(gt)], &whole_volume(12)).unwrap();
        let m = e.per_volume[0].metrics;
        assert!((m.dice - 0.75).abs() < 1e-12);
        assert!((m.jaccard - 0.6).abs() < 1e-12);
        assert!((m.hausdorff_mm - 1.0).abs() < 1e-12);
        assert!((m.asd_mm - 40.0 / 112.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_requires_labels_and_a_single_class() {
        let mut s = labeled_sample(cube(8, [1; 3], 3));
        let mut stub = MaskStub {
            mask: None,
            constant: 0.2,
            origin: [0; 3],
        };
        assert!(evaluate_model(&mut stub, &[], &whole_volume(8)).is_err());
        let cfg = tiny_config(Method::LowerBound);
        let mut three = crate::backbone::build_model_with_heads(&cfg.backbone, 3, 0, false).unwrap();
        let err = evaluate_model(&mut three, std::slice::from_ref(&s), &whole_volume(8)).unwrap_err();
        assert!(matches!(err, TrainError::ClassCount { expected: 1, found: 3 }));
        s.label = None;
        assert!(matches!(
            evaluate_model(&mut stub, &[s], &whole_volume(8)),
            Err(TrainError::MissingLabel(_))
        ));
    }

    #[test]
    fn smoke_run_writes_loadable_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 2,
            ..tiny_config(Method::Boundaryseg)
        };
        let d = data(3, 0);
        let outcome = train(&cfg, &d, Some(dir.path())).unwrap();
        let lines: Vec<LogRecord> = fs::read_to_string(dir.path().join(LOG_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, outcome.log);
        assert_eq!(lines.last().unwrap().iter, 2);
        assert_eq!(lines.last().unwrap().loss_total, outcome.final_loss.total);
        let mut loaded = DualHeadModel::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        let eval = EvalConfig::from_train(&cfg, MetricOptions::default());
        let mut in_memory = outcome.model.clone();
        assert_eq!(
            evaluate_model(&mut loaded, &d.labeled, &eval).unwrap(),
            evaluate_model(&mut in_memory, &d.labeled, &eval).unwrap()
        );
        assert!(!dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn training_is_deterministic() {
        for mode in [TrainMode::Supervised, TrainMode::FpSemisup] {
            let cfg = TrainConfig {
                mode,
                ..tiny_config(Method::Boundaryseg)
            };
            let d = data(3, 2);
            let a = train(&cfg, &d, None).unwrap();
            let b = train(&cfg, &d, None).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.final_loss, b.final_loss);
            let c = train(&TrainConfig { seed: 1, ..cfg }, &d, None).unwrap();
            assert_ne!(a.final_loss, c.final_loss);
        }
    }

    #[test]
    fn validation_split_selects_a_best_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            eval_every: 2,
            ..tiny_config(Method::LowerBound)
        };
        let mut d = data(4, 0);
        d.validation = d.labeled.split_off(3);
        let outcome = train(&cfg, &d, Some(dir.path())).unwrap();
        let best = outcome.best.as_ref().unwrap();
        assert!(best.iteration == 2 || best.iteration == 4);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
    }

    #[test]
    fn fp_training_needs_unlabeled_volumes() {
        let cfg = TrainConfig {
            mode: TrainMode::FpSemisup,
            ..tiny_config(Method::Boundaryseg)
        };
        let err = train(&cfg, &data(2, 0), None).unwrap_err();
        assert!(err.to_string().contains("unlabeled"));
    }

    #[test]
    fn run_seeds_aggregates_per_seed_metrics() {
        let cfg = TrainConfig {
            iterations: 2,
            ..tiny_config(Method::LowerBound)
        };
        let d = data(2, 0);
        let test = d.labeled.clone();
        let one = run_seeds("one", &cfg, &d, &test, &[5], MetricOptions::default(), None).unwrap();
        assert_eq!(one.per_seed.len(), 1);
        assert_eq!(one.mean, one.per_seed[0].test.mean);
        assert_eq!(one.std.dice, 0.0);

        let three = run_seeds("three", &cfg, &d, &test, &[0, 1, 2], MetricOptions::default(), None).unwrap();
        assert_eq!(three.per_seed.len(), 3);
        let dice: Vec<f64> = three.per_seed.iter().map(|r| r.test.mean.dice).collect();
        let mean = dice.iter().sum::<f64>() / 3.0;
        assert!((three.mean.dice - mean).abs() < 1e-12);
        let sd = (dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((three.std.dice - sd).abs() < 1e-12);
        let json = serde_json::to_string(&three).unwrap();
        let back: RunResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, three);
        back.config.validate().unwrap();
    }

    #[test]
    fn run_seeds_reports_failed_seeds() {
        let cfg = tiny_config(Method::LowerBound);
        let d = data(1, 0);
        let err = run_seeds("x", &cfg, &d, &[], &[3, 4], MetricOptions::default(), None).unwrap_err();
        match err {
            TrainError::AllSeedsFailed(f) => assert_eq!(f.iter().map(|f| f.seed).collect::<Vec<_>>(), vec![3, 4]),
            other => panic!("{other}"),
        }
    }
}
