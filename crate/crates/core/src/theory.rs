//! Monte-Carlo checks of the expectation-level noise claims behind the
//! contrastive design: for quality scores corrupted by i.i.d. noise, the
//! expected cross-image gap E|eps_g - eps_d| stays within twice the
//! within-image deviation E|eps|. The pointwise form of that inequality is
//! false; its violation rate is reported, never asserted.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{labels, stream};
use crate::scalar::Scalar;

pub const TRIALS_PER_SHARD: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    Gaussian,
    Uniform,
    Laplace,
}

impl NoiseDistribution {
    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            "laplace" => Ok(Self::Laplace),
            other => Err(Error::InvalidArgument(format!(
                "unknown distribution {other:?}, expected gaussian, uniform, or laplace"
            ))),
        }
    }
}

impl std::fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Gaussian => "gaussian",
            Self::Uniform => "uniform",
            Self::Laplace => "laplace",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub distribution: NoiseDistribution,
    /// Sigma for gaussian, half-width for uniform, scale b for laplace.
    pub scale: f64,
    /// Draws per trial; 3 suffice, more sharpens the per-trial estimators.
    pub t: usize,
    pub trials: usize,
}

impl NoiseModel {
    pub fn new(distribution: NoiseDistribution, scale: f64, t: usize, trials: usize) -> Self {
        Self {
            distribution,
            scale,
            t,
            trials,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise scale {} must be positive",
                self.scale
            )));
        }
        if self.t < 3 {
            return Err(Error::InvalidConfig(format!(
                "need at least 3 draws per trial, got {}",
                self.t
            )));
        }
        if self.trials < 10_000 {
            return Err(Error::InvalidConfig(format!(
                "reported estimates need at least 10^4 trials, got {}",
                self.trials
            )));
        }
        Ok(())
    }

    /// Closed-form E|eps|.
    pub fn analytic_abs_eps(&self) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => self.scale * (2.0 / std::f64::consts::PI).sqrt(),
            NoiseDistribution::Uniform => self.scale / 2.0,
            NoiseDistribution::Laplace => self.scale,
        }
    }

    /// Closed-form E|eps_g - eps_d| for two independent draws.
    pub fn analytic_abs_diff(&self) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => 2.0 * self.scale / std::f64::consts::PI.sqrt(),
            NoiseDistribution::Uniform => 2.0 * self.scale / 3.0,
            NoiseDistribution::Laplace => 1.5 * self.scale,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => Normal::new(0.0, self.scale)
                .expect("validated scale")
                .sample(rng),
            NoiseDistribution::Uniform => Uniform::new_inclusive(-self.scale, self.scale)
                .expect("validated scale")
                .sample(rng),
            NoiseDistribution::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                let inner = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                -self.scale * u.signum() * inner.ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryReport {
    pub model: NoiseModel,
    /// Estimate of E|eps| with its standard error.
    pub e_abs_eps: f64,
    pub stderr_abs_eps: f64,
    /// Estimate of E|eps_g - eps_d| with its standard error.
    pub e_abs_diff: f64,
    pub stderr_abs_diff: f64,
    /// E(|eps| - |eps_g - eps_d|), the signed gap.
    pub e_gap: f64,
    pub stderr_gap: f64,
    /// Standard error of the per-trial bound margin 2A_i - G_i.
    pub stderr_bound: f64,
    /// Fraction of trials where ||eps_1| - |eps_2 - eps_3|| <= |eps_1|
    /// fails; diagnostic only.
    pub pointwise_violation_rate: f64,
}

/// Per-trial estimators from t draws: A_i is the mean absolute draw, G_i the
/// mean absolute pairwise difference (Gini mean difference), computed from
/// order statistics as 2/(t(t-1)) * sum_w (2w - t - 1) eps_(w).
pub fn estimate_expectations(model: &NoiseModel, seed: u64) -> Result<TheoryReport> {
    model.validate()?;
    let mut abs_mean = RunningMoments::default();
    let mut diff_mean = RunningMoments::default();
    let mut gap = RunningMoments::default();
    let mut bound_margin = RunningMoments::default();
    let mut violations = 0usize;

    let mut draws = vec![0.0f64; model.t];
    let shards = model.trials.div_ceil(TRIALS_PER_SHARD);
    let mut remaining = model.trials;
    for shard in 0..shards {
        let mut rng = stream(seed, &[labels::THEORY, shard as u64]);
        let in_shard = remaining.min(TRIALS_PER_SHARD);
        remaining -= in_shard;
        for _ in 0..in_shard {
            for slot in draws.iter_mut() {
                *slot = model.sample(&mut rng);
            }
            if (draws[1] - draws[2]).abs() > 2.0 * draws[0].abs() {
                violations += 1;
            }
            let a_i = draws.iter().map(|v| v.abs()).sum::<f64>() / model.t as f64;
            let mut sorted = draws.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let t = model.t as f64;
            let mut g_i = 0.0;
            for (w, &v) in sorted.iter().enumerate() {
                g_i += (2.0 * (w + 1) as f64 - t - 1.0) * v;
            }
            g_i *= 2.0 / (t * (t - 1.0));
            abs_mean.push(a_i);
            diff_mean.push(g_i);
            gap.push(a_i - g_i);
            bound_margin.push(2.0 * a_i - g_i);
        }
    }

    Ok(TheoryReport {
        model: *model,
        e_abs_eps: abs_mean.mean(),
        stderr_abs_eps: abs_mean.stderr(),
        e_abs_diff: diff_mean.mean(),
        stderr_abs_diff: diff_mean.stderr(),
        e_gap: gap.mean(),
        stderr_gap: gap.stderr(),
        stderr_bound: bound_margin.stderr(),
        pointwise_violation_rate: violations as f64 / model.trials as f64,
    })
}

#[derive(Debug, Default, Clone, Copy)]
struct RunningMoments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    fn push(&mut self, value: f64) {
        self.n += 1;
        let delta = value - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (value - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        (self.m2 / (self.n as f64 - 1.0)).sqrt() / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundVerdict {
    pub pass: bool,
    /// E|eps_g - eps_d| estimate.
    pub lhs: f64,
    /// 2 E|eps| + 3 stderr.
    pub rhs: f64,
    pub margin: f64,
}

/// E|eps_g - eps_d| <= 2 E|eps| + 3 stderr: the expectation-level triangle
/// inequality that the pointwise derivation overstates.
pub fn check_expectation_bound(report: &TheoryReport) -> BoundVerdict {
    let lhs = report.e_abs_diff;
    let rhs = 2.0 * report.e_abs_eps + 3.0 * report.stderr_bound;
    BoundVerdict {
        pass: lhs <= rhs,
        lhs,
        rhs,
        margin: rhs - lhs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingSample {
    pub epsilon: f64,
    pub score_delta: f64,
    pub feature_delta: f64,
    /// |score delta| / ||feature delta||; roughly constant when the head is
    /// locally linear in the features.
    pub ratio: f64,
}

/// Probes whether small parameter perturbations move the score in
/// proportion to the class feature, as a first-order linearization would
/// predict. Reported, not asserted.
pub fn score_feature_coupling<T: Scalar>(
    state: &ModelState<T>,
    image: &ndarray::Array3<T>,
    epsilons: &[f64],
    seed: u64,
) -> Result<Vec<CouplingSample>> {
    use crate::model::ForwardOptions;
    use crate::scalar::c;

    let opts = ForwardOptions {
        decoder: true,
        attention: false,
    };
    let base = state.forward(image, &opts)?;
    let base_score = base.score.expect("decoder on").to_f64_lossy();
    let mut rng = stream(seed, &[labels::THEORY, u64::MAX]);
    let direction: Vec<f64> = (0..state.param_count())
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let mut samples = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation size {eps} must be positive"
            )));
        }
        let mut probe = state.clone();
        let mut cursor = 0;
        for (_, array) in probe.params.named_arrays_mut() {
            for v in array.iter_mut() {
                *v = *v + c::<T>(eps * direction[cursor]);
                cursor += 1;
            }
        }
        let moved = probe.forward(image, &opts)?;
        let score_delta = moved.score.expect("decoder on").to_f64_lossy() - base_score;
        let feature_delta = (&moved.class_feature - &base.class_feature)
            .iter()
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let ratio = if feature_delta > 0.0 {
            score_delta.abs() / feature_delta
        } else {
            f64::NAN
        };
        samples.push(CouplingSample {
            epsilon: eps,
            score_delta,
            feature_delta,
            ratio,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(d: NoiseDistribution, scale: f64, trials: usize) -> NoiseModel {
        NoiseModel::new(d, scale, 5, trials)
    }

    #[test]
    fn validation_rejects_bad_models() {
        assert!(model(NoiseDistribution::Gaussian, 0.0, 10_000)
            .validate()
            .is_err());
        assert!(model(NoiseDistribution::Gaussian, -1.0, 10_000)
            .validate()
            .is_err());
        assert!(model(NoiseDistribution::Gaussian, 1.0, 100)
            .validate()
            .is_err());
        assert!(NoiseModel::new(NoiseDistribution::Uniform, 1.0, 2, 10_000)
            .validate()
            .is_err());
        assert!(model(NoiseDistribution::Laplace, 1.0, 10_000)
            .validate()
            .is_ok());
    }

    #[test]
    fn distribution_names_round_trip() {
        for d in [
            NoiseDistribution::Gaussian,
            NoiseDistribution::Uniform,
            NoiseDistribution::Laplace,
        ] {
            assert_eq!(NoiseDistribution::parse(&d.to_string()).unwrap(), d);
        }
        assert!(NoiseDistribution::parse("cauchy").is_err());
    }

    #[test]
    fn degenerate_scale_gives_zero_estimates() {
        let report =
            estimate_expectations(&model(NoiseDistribution::Gaussian, 1e-12, 10_000), 1).unwrap();
        assert!(report.e_abs_eps.abs() < 1e-9);
        assert!(report.e_abs_diff.abs() < 1e-9);
        assert!(report.e_gap.abs() < 1e-9);
        assert!(check_expectation_bound(&report).pass);
    }

    #[test]
    fn gaussian_matches_folded_normal_oracle() {
        let m = model(NoiseDistribution::Gaussian, 1.0, 100_000);
        let report = estimate_expectations(&m, 2).unwrap();
        assert!((report.e_abs_eps - m.analytic_abs_eps()).abs() < 3.0 * report.stderr_abs_eps);
        assert!((report.e_abs_diff - m.analytic_abs_diff()).abs() < 3.0 * report.stderr_abs_diff);
        assert!((m.analytic_abs_eps() - 0.797_884_560_8).abs() < 1e-9);
        assert!((m.analytic_abs_diff() - 1.128_379_167_1).abs() < 1e-9);
    }

    #[test]
    fn uniform_and_laplace_match_textbook_oracles() {
        let u = model(NoiseDistribution::Uniform, 1.0, 100_000);
        let report = estimate_expectations(&u, 3).unwrap();
        assert!((report.e_abs_eps - 0.5).abs() < 3.0 * report.stderr_abs_eps);
        assert!((report.e_abs_diff - 2.0 / 3.0).abs() < 3.0 * report.stderr_abs_diff);

        let l = model(NoiseDistribution::Laplace, 1.0, 100_000);
        let report = estimate_expectations(&l, 4).unwrap();
        assert!((report.e_abs_eps - 1.0).abs() < 3.0 * report.stderr_abs_eps);
        assert!((report.e_abs_diff - 1.5).abs() < 3.0 * report.stderr_abs_diff);
    }

    #[test]
    fn bound_holds_for_every_distribution() {
        for d in [
            NoiseDistribution::Gaussian,
            NoiseDistribution::Uniform,
            NoiseDistribution::Laplace,
        ] {
            let report = estimate_expectations(&model(d, 1.0, 50_000), 5).unwrap();
            let verdict = check_expectation_bound(&report);
            assert!(verdict.pass, "{d}: {} > {}", verdict.lhs, verdict.rhs);
            assert!(verdict.margin > 0.0);
            // The pointwise inequality genuinely fails on a chunk of trials.
            assert!(report.pointwise_violation_rate > 0.05);
            assert!(report.pointwise_violation_rate < 0.9);
        }
    }

    #[test]
    fn gini_order_statistic_matches_double_loop() {
        let mut rng = stream(11, &[labels::THEORY, 999]);
        let draws: Vec<f64> = (0..7).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let t = draws.len() as f64;
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut order_stat = 0.0;
        for (w, &v) in sorted.iter().enumerate() {
            order_stat += (2.0 * (w + 1) as f64 - t - 1.0) * v;
        }
        order_stat *= 2.0 / (t * (t - 1.0));
        let mut double_loop = 0.0;
        for a in 0..draws.len() {
            for b in 0..draws.len() {
                double_loop += (draws[a] - draws[b]).abs();
            }
        }
        double_loop /= t * (t - 1.0);
        assert!((order_stat - double_loop).abs() < 1e-12);
    }

    #[test]
    fn stderr_shrinks_like_inverse_sqrt() {
        let counts = [10_000usize, 20_000, 40_000];
        let mut errs = Vec::new();
        for &n in &counts {
            let report =
                estimate_expectations(&model(NoiseDistribution::Gaussian, 1.0, n), 6).unwrap();
            errs.push(report.stderr_abs_diff);
        }
        for pair in errs.windows(2) {
            let ratio = pair[1] / pair[0];
            assert!(
                (0.62..=0.80).contains(&ratio),
                "stderr ratio {ratio} should be near 1/sqrt(2)"
            );
        }
    }

    #[test]
    fn estimates_are_seed_deterministic() {
        let m = model(NoiseDistribution::Uniform, 2.0, 10_000);
        let a = estimate_expectations(&m, 7).unwrap();
        let b = estimate_expectations(&m, 7).unwrap();
        assert_eq!(a.e_abs_eps, b.e_abs_eps);
        assert_eq!(a.e_abs_diff, b.e_abs_diff);
        let c = estimate_expectations(&m, 8).unwrap();
        assert_ne!(a.e_abs_eps, c.e_abs_eps);
    }

    #[test]
    fn coupling_probe_reports_finite_ratios() {
        let mut cfg = crate::model::ModelConfig::tiny();
        cfg.embed_dim = 8;
        cfg.num_layers = 1;
        cfg.num_heads = 2;
        cfg.mlp_head_dims = vec![4, 1];
        let state = ModelState::<f64>::init(cfg).unwrap();
        let image = ndarray::Array3::from_shape_fn((32, 32, 1), |(y, x, _)| {
            ((x + 2 * y) % 11) as f64 / 11.0
        });
        let samples = score_feature_coupling(&state, &image, &[1e-4, 1e-3, 1e-2], 13).unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert!(s.feature_delta > 0.0);
            assert!(s.ratio.is_finite());
        }
        assert!(score_feature_coupling(&state, &image, &[0.0], 13).is_err());
    }
}
