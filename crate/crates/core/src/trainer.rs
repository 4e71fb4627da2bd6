//! End-to-end orchestration: config to dataset to epochs to evaluation
//! artifacts, with the ablation switches wired through.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{crop_image, DatasetManifest, Image};
use crate::error::{Error, Result};
use crate::losses::UNIT_NORM_TOL;
use crate::metrics::{self, intra_image_spread, EvalOptions, EvalResult};
use crate::model::{ForwardOptions, ModelConfig, ModelState};
use crate::mutual::{
    run_epoch_protocol, EmaConfig, EpochReport, EpochSchedule, LossConfig, PositiveSource,
    ProtocolConfig,
};
use crate::optim::{AdamParams, Optimizer, OptimizerKind};
use crate::rng::{labels, stream};
use crate::saliency::PixelRect;
use crate::sampling::{random_crops, saliency_rect};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub h_crops: usize,
    pub crop_size: usize,
    /// Window side on the teacher's patch grid; None uses the grid default.
    pub window_side: Option<usize>,
    /// Attention layers aggregated for saliency; None clamps the default.
    pub aggregate_layers: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            h_crops: 4,
            crop_size: 32,
            window_side: None,
            aggregate_layers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(default)]
    pub positive_source: PositiveSource,
    #[serde(default = "default_true")]
    pub intra_negatives: bool,
    /// False freezes the teacher after initialization (beta forced to 1).
    #[serde(default = "default_true")]
    pub mutual_learning: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            positive_source: PositiveSource::Saliency,
            intra_negatives: true,
            mutual_learning: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Directory holding manifest.csv and the image files it references.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: EpochSchedule,
    pub ema: EmaConfig,
    pub loss: LossConfig,
    pub sampling: SamplingConfig,
    /// The single switchboard for ablation rows; overrides overlapping loss
    /// flags.
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adam: AdamParams,
    pub batch_images: usize,
    pub split_ratio: f64,
    /// Train the regression head against standardized scores.
    #[serde(default = "default_true")]
    pub standardize_targets: bool,
    #[serde(default)]
    pub logistic_fit: bool,
    /// Images sampled from the test split for the spread trajectory.
    #[serde(default = "default_spread_images")]
    pub spread_images: usize,
    pub seeds: Vec<u64>,
    pub paths: PathsConfig,
}

fn default_spread_images() -> usize {
    16
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            schedule: EpochSchedule::default(),
            ema: EmaConfig::default(),
            loss: LossConfig::default(),
            sampling: SamplingConfig::default(),
            ablation: AblationConfig::default(),
            optimizer: OptimizerKind::Sgd,
            adam: AdamParams::default(),
            batch_images: 8,
            split_ratio: 0.8,
            standardize_targets: true,
            logistic_fit: false,
            spread_images: default_spread_images(),
            seeds: vec![1, 2, 3],
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: tiny model, synthetic data, adaptive optimizer.
    pub fn toy() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            schedule: EpochSchedule {
                lr_initial: 1e-4,
                lr_decay_every: 4,
                ..Default::default()
            },
            batch_images: 2,
            ..Default::default()
        }
    }

    /// Mirrors the published setup (ViT-S scale); far beyond desk budgets
    /// and provided for shape compatibility only.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig {
                image_size: 224,
                patch_size: 16,
                channels: 3,
                embed_dim: 384,
                num_layers: 12,
                num_heads: 6,
                decoder_layers: 1,
                mlp_ratio: 4,
                mlp_head_dims: vec![128, 64, 1],
                seed: 0,
            },
            sampling: SamplingConfig {
                h_crops: 10,
                crop_size: 224,
                window_side: Some(8),
                aggregate_layers: Some(3),
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.ema.validate()?;
        if self.sampling.crop_size != self.model.image_size {
            return Err(Error::InvalidConfig(format!(
                "crop size {} must match the model input size {}",
                self.sampling.crop_size, self.model.image_size
            )));
        }
        if self.sampling.h_crops == 0 {
            return Err(Error::InvalidConfig("need at least one random crop".into()));
        }
        if self.batch_images == 0 {
            return Err(Error::InvalidConfig(
                "batch must hold at least one image".into(),
            ));
        }
        if !(0.0 < self.split_ratio && self.split_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratio {} must lie strictly between 0 and 1",
                self.split_ratio
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed".into()));
        }
        if !(0.0..=1.0).contains(&self.loss.alpha) || !(self.loss.tau > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} / tau {} out of range",
                self.loss.alpha, self.loss.tau
            )));
        }
        Ok(())
    }

    /// Loss options with the ablation switchboard applied.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            intra_negatives: self.ablation.intra_negatives,
            ..self.loss
        }
    }

    /// EMA with the frozen-teacher ablation applied.
    pub fn effective_ema(&self) -> EmaConfig {
        if self.ablation.mutual_learning {
            self.ema
        } else {
            EmaConfig {
                beta: 1.0,
                ..self.ema
            }
        }
    }

    fn protocol(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            h_crops: self.sampling.h_crops,
            crop_size: self.sampling.crop_size,
            batch_images: self.batch_images,
            aggregate_layers: self.sampling.aggregate_layers,
            window_side: self.sampling.window_side,
            loss: self.effective_loss(),
            ema: self.effective_ema(),
            positive_source: self.ablation.positive_source,
            seed,
        }
    }

    fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            h_crops: self.sampling.h_crops,
            crop_size: self.sampling.crop_size,
            aggregate_layers: self.sampling.aggregate_layers,
            window_side: self.sampling.window_side,
            logistic_fit: self.logistic_fit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub h_crops: usize,
    pub crop_size: usize,
    pub aggregate_layers: Option<usize>,
    pub window_side: Option<usize>,
    pub logistic_fit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitEval {
    pub split: &'static str,
    pub result: EvalResult,
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_l1: f64,
    pub mean_info_nce: f64,
    pub mean_total: f64,
    pub saliency_drift: Option<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub baseline_test: EvalResult,
    pub epochs: Vec<EpochSummary>,
    pub final_evals: Vec<SplitEval>,
    pub wall_clock_seconds: f64,
}

impl SeedReport {
    pub fn final_test(&self) -> Option<&SplitEval> {
        self.final_evals.iter().find(|e| e.split == "test")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seeds: Vec<SeedReport>,
    pub mean_test_srcc: f64,
    pub wall_clock_seconds: f64,
}

/// Crops an image the way evaluation sees it: H random crops from a seeded
/// stream plus the model's own saliency crop.
fn eval_crops<T: Scalar>(
    state: &ModelState<T>,
    image: &Image<T>,
    cfg: &EvalProtocol,
    seed: u64,
    image_label: u64,
) -> Result<Vec<Image<T>>> {
    let mut rng = stream(seed, &[labels::EVAL, image_label]);
    let records = random_crops(image, cfg.h_crops, cfg.crop_size, &mut rng)?;
    let mut crops = Vec::with_capacity(cfg.h_crops + 1);
    for record in &records {
        crops.push(crop_image(image, &record.rect)?);
    }
    let rect = saliency_rect(
        image,
        state,
        cfg.aggregate_layers,
        cfg.window_side,
        cfg.crop_size,
    )?;
    crops.push(crop_image(image, &rect)?);
    Ok(crops)
}

/// Mean score over the crops plus the unit embeddings, one forward per crop.
fn score_and_embed<T: Scalar>(
    state: &ModelState<T>,
    crops: &[Image<T>],
) -> Result<(f64, Vec<Array1<T>>)> {
    let opts = ForwardOptions {
        decoder: true,
        attention: false,
    };
    let mut scores = Vec::with_capacity(crops.len());
    let mut units = Vec::with_capacity(crops.len());
    for crop in crops {
        let fwd = state.forward(crop, &opts)?;
        scores.push(fwd.score.expect("decoder on"));
        units.push(fwd.unit_feature);
    }
    let mean = metrics::aggregate_crop_scores(&scores)?.to_f64_lossy();
    Ok((mean, units))
}

/// Correlations from already-computed per-image scores.
pub fn eval_scores(pred: &[f64], gt: &[f64], logistic_fit: bool) -> Result<EvalResult> {
    metrics::evaluate(pred, gt, &EvalOptions { logistic_fit })
}

/// Scores every image of a loaded split and returns correlations plus the
/// intra-image embedding spread.
pub fn evaluate_loaded<T: Scalar>(
    state: &ModelState<T>,
    images: &[Image<T>],
    mos: &[f64],
    cfg: &EvalProtocol,
    seed: u64,
) -> Result<(EvalResult, f64)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    if images.len() != mos.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} scores",
            images.len(),
            mos.len()
        )));
    }
    let mut predictions = Vec::with_capacity(images.len());
    let mut per_image_units = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let crops = eval_crops(state, image, cfg, seed, i as u64)?;
        let (score, units) = score_and_embed(state, &crops)?;
        predictions.push(score);
        per_image_units.push(units);
    }
    let result = eval_scores(&predictions, mos, cfg.logistic_fit)?;
    let spread = intra_image_spread(&per_image_units)?;
    Ok((result, spread))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Evaluates a model over one split of a manifest that has splits assigned.
pub fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    manifest: &DatasetManifest,
    split: Split,
    cfg: &EvalProtocol,
    seed: u64,
) -> Result<EvalResult> {
    let splits = manifest.splits.as_ref().ok_or_else(|| {
        Error::InvalidArgument("manifest has no train/test split assigned".into())
    })?;
    let indices = match split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let mut images = Vec::with_capacity(indices.len());
    let mut mos = Vec::with_capacity(indices.len());
    for &i in indices {
        images.push(manifest.load_image::<T>(i)?);
        mos.push(manifest.entries[i].mos);
    }
    Ok(evaluate_loaded(state, &images, &mos, cfg, seed)?.0)
}

/// Writes one CSV row per crop embedding: image_id, crop_index, mos, then
/// the unit feature components.
pub fn export_embeddings<T: Scalar>(
    state: &ModelState<T>,
    manifest: &DatasetManifest,
    indices: &[usize],
    cfg: &EvalProtocol,
    seed: u64,
    out_path: &Path,
) -> Result<()> {
    let dim = state.config.embed_dim;
    let mut out = String::from("image_id,crop_index,mos");
    for d in 0..dim {
        out.push_str(&format!(",f{d}"));
    }
    out.push('\n');
    for (pos, &i) in indices.iter().enumerate() {
        let image = manifest.load_image::<T>(i)?;
        let crops = eval_crops(state, &image, cfg, seed, pos as u64)?;
        let (_, units) = score_and_embed(state, &crops)?;
        for (c, unit) in units.iter().enumerate() {
            let label = if c < cfg.h_crops {
                format!("h{}", c + 1)
            } else {
                "s".to_string()
            };
            out.push_str(&format!("{},{},{}", i, label, manifest.entries[i].mos));
            for v in unit.iter() {
                out.push_str(&format!(",{}", v.to_f64_lossy()));
            }
            out.push('\n');
        }
    }
    fs::write(out_path, out).map_err(|e| Error::io(format!("write {}", out_path.display()), e))
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One seed's full training run; artifacts land in out_dir/seed_<seed>/.
pub fn run_seed<T: Scalar>(
    config: &RunConfig,
    manifest: &DatasetManifest,
    images: &[Image<T>],
    seed: u64,
) -> Result<SeedReport> {
    let started = Instant::now();
    let split_manifest = manifest.split(config.split_ratio, seed)?;
    let splits = split_manifest.splits.as_ref().expect("split assigned");

    let train_images: Vec<Image<T>> = splits.train.iter().map(|&i| images[i].clone()).collect();
    let train_mos: Vec<f64> = splits
        .train
        .iter()
        .map(|&i| manifest.entries[i].mos)
        .collect();
    let test_images: Vec<Image<T>> = splits.test.iter().map(|&i| images[i].clone()).collect();
    let test_mos: Vec<f64> = splits
        .test
        .iter()
        .map(|&i| manifest.entries[i].mos)
        .collect();

    let train_targets: Vec<f64> = if config.standardize_targets {
        let (mean, std) = mean_and_std(&train_mos);
        if std <= 0.0 {
            return Err(Error::DegenerateVariance(
                "training scores are constant, cannot standardize".into(),
            ));
        }
        train_mos.iter().map(|m| (m - mean) / std).collect()
    } else {
        train_mos.clone()
    };

    let mut model_cfg = config.model.clone();
    model_cfg.seed = seed;
    let mut student = ModelState::<T>::init(model_cfg)?;
    let mut teacher = student.clone();
    let mut optimizer = match config.optimizer {
        OptimizerKind::Sgd => Optimizer::new(OptimizerKind::Sgd),
        OptimizerKind::Adam => Optimizer::with_adam(config.adam),
    };
    let protocol = config.protocol(seed);
    let eval_cfg = config.eval_protocol();

    let seed_dir = config.paths.out_dir.join(format!("seed_{seed}"));
    fs::create_dir_all(&seed_dir)
        .map_err(|e| Error::io(format!("create {}", seed_dir.display()), e))?;

    let (baseline_test, _) = evaluate_loaded(&student, &test_images, &test_mos, &eval_cfg, seed)?;

    let spread_count = config.spread_images.min(test_images.len()).max(1);
    let spread_slice = &test_images[..spread_count];

    let mut losses_csv = String::from("epoch,step,images,l1,info_nce,total\n");
    let mut epochs_csv = String::from("epoch,lr,mean_l1,mean_info_nce,mean_total,saliency_drift\n");
    let mut spread_csv = String::from("epoch,spread\n");
    let mut epoch_summaries = Vec::new();
    let mut prev_rects: Option<Vec<PixelRect>> = None;

    for epoch in 0..config.schedule.epochs {
        let (next_teacher, report): (ModelState<T>, EpochReport) = run_epoch_protocol(
            teacher,
            &mut student,
            &train_images,
            &train_targets,
            epoch,
            &config.schedule,
            &protocol,
            &mut optimizer,
            prev_rects.as_deref(),
        )?;
        teacher = next_teacher;
        for s in &report.steps {
            losses_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                epoch, s.step, s.images, s.l1, s.info_nce, s.total
            ));
        }
        epochs_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            epoch,
            report.lr,
            report.mean_l1,
            report.mean_info_nce,
            report.mean_total,
            fmt_opt(report.saliency_drift)
        ));

        let mut per_image_units = Vec::with_capacity(spread_count);
        for (i, image) in spread_slice.iter().enumerate() {
            let crops = eval_crops(
                &student,
                image,
                &eval_cfg,
                seed,
                (epoch * 10_000 + i) as u64,
            )?;
            let (_, units) = score_and_embed(&student, &crops)?;
            per_image_units.push(units);
        }
        let spread = intra_image_spread(&per_image_units)?;
        spread_csv.push_str(&format!("{epoch},{spread}\n"));

        crate::checkpoint::save_checkpoint(
            &student,
            &seed_dir.join(format!("epoch_{epoch}.ckpt")),
        )?;
        epoch_summaries.push(EpochSummary {
            epoch,
            lr: report.lr,
            mean_l1: report.mean_l1,
            mean_info_nce: report.mean_info_nce,
            mean_total: report.mean_total,
            saliency_drift: report.saliency_drift,
            spread,
        });
        prev_rects = Some(report.rects);
    }

    crate::checkpoint::save_checkpoint(&student, &seed_dir.join("final.ckpt"))?;

    let (train_eval, train_spread) =
        evaluate_loaded(&student, &train_images, &train_mos, &eval_cfg, seed)?;
    let (test_eval, test_spread) =
        evaluate_loaded(&student, &test_images, &test_mos, &eval_cfg, seed)?;
    let final_evals = vec![
        SplitEval {
            split: "train",
            result: train_eval,
            spread: train_spread,
        },
        SplitEval {
            split: "test",
            result: test_eval,
            spread: test_spread,
        },
    ];
    let mut eval_csv = String::from("split,n,srcc,plcc,spread\n");
    for e in &final_evals {
        eval_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.split, e.result.n, e.result.srcc, e.result.plcc, e.spread
        ));
    }

    write_file(&seed_dir.join("losses.csv"), &losses_csv)?;
    write_file(&seed_dir.join("epochs.csv"), &epochs_csv)?;
    write_file(&seed_dir.join("spread.csv"), &spread_csv)?;
    write_file(&seed_dir.join("eval.csv"), &eval_csv)?;

    Ok(SeedReport {
        seed,
        baseline_test,
        epochs: epoch_summaries,
        final_evals,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains every configured seed and writes report.json under out_dir.
pub fn train<T: Scalar>(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let manifest_path = config.paths.data_dir.join("manifest.csv");
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mut images = Vec::with_capacity(manifest.entries.len());
    for i in 0..manifest.entries.len() {
        images.push(manifest.load_image::<T>(i)?);
    }
    fs::create_dir_all(&config.paths.out_dir)
        .map_err(|e| Error::io(format!("create {}", config.paths.out_dir.display()), e))?;

    let mut seed_reports = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        seed_reports.push(run_seed(config, &manifest, &images, seed)?);
    }
    let mean_test_srcc = seed_reports
        .iter()
        .filter_map(|r| r.final_test().map(|e| e.result.srcc))
        .sum::<f64>()
        / seed_reports.len() as f64;
    let report = RunReport {
        seeds: seed_reports,
        mean_test_srcc,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    write_file(&config.paths.out_dir.join("report.json"), &json)?;
    Ok(report)
}

// Unit embeddings leave normalize_feature with norm 1 by construction; the
// tolerance documents the contract evaluate relies on downstream.
const _: () = assert!(UNIT_NORM_TOL > 0.0);
