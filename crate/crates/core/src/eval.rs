//! Metrics, variant comparison and the additive-noise robustness sweep.
//!
//! All metrics are computed in physical units: predictions and observations
//! are inverse-scaled with the target scaler before comparison.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{format_timestamp, MinMaxScaler, SupervisedSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Mlp;
use crate::par;
use crate::physics::{physics_residuals, CompositeLossConfig, TargetLayout, N_TARGETS};

/// Root-mean-square error divided by the observed range.
pub fn nrmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(Error::shape("nrmse", obs.len(), pred.len()));
    }
    if obs.len() < 2 {
        return Err(Error::Numeric(format!("nrmse needs at least 2 values, got {}", obs.len())));
    }
    let (lo, hi) = obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Numeric("nrmse of a constant observation series".into()));
    }
    Ok(rmse(pred, obs) / range)
}

fn rmse(pred: &[f64], obs: &[f64]) -> f64 {
    let ss: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum();
    (ss / obs.len() as f64).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape("spearman", x.len(), y.len()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// The eight model variants compared by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "std-offline")]
    StdOffline,
    #[serde(rename = "pgnn-offline")]
    PgnnOffline,
    #[serde(rename = "std+std-neuron")]
    StdStdNeuron,
    #[serde(rename = "std+std-weight")]
    StdStdWeight,
    #[serde(rename = "pgnn+std-neuron")]
    PgnnStdNeuron,
    #[serde(rename = "pgnn+std-weight")]
    PgnnStdWeight,
    #[serde(rename = "pgnn+pg-neuron")]
    PgnnPgNeuron,
    #[serde(rename = "pgnn+pg-weight")]
    PgnnPgWeight,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::StdOffline,
        Variant::PgnnOffline,
        Variant::StdStdNeuron,
        Variant::StdStdWeight,
        Variant::PgnnStdNeuron,
        Variant::PgnnStdWeight,
        Variant::PgnnPgNeuron,
        Variant::PgnnPgWeight,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::StdOffline => "std-offline",
            Variant::PgnnOffline => "pgnn-offline",
            Variant::StdStdNeuron => "std+std-neuron",
            Variant::StdStdWeight => "std+std-weight",
            Variant::PgnnStdNeuron => "pgnn+std-neuron",
            Variant::PgnnStdWeight => "pgnn+std-weight",
            Variant::PgnnPgNeuron => "pgnn+pg-neuron",
            Variant::PgnnPgWeight => "pgnn+pg-weight",
        }
    }

    pub fn from_label(s: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: Variant,
    /// Per target, in layout order.
    pub rmse: Vec<f64>,
    /// Per target; NaN where the observed column is constant.
    pub nrmse: Vec<f64>,
    /// Residuals of the predictions in physical units.
    pub r1: f64,
    pub r2: f64,
    /// The same residuals with the loss normalization applied, so they are
    /// comparable with the training-time physics terms.
    pub r1_scaled: f64,
    pub r2_scaled: f64,
}

impl MetricsReport {
    pub fn dbh_nrmse(&self, layout: &TargetLayout) -> f64 {
        self.nrmse[layout.dbh_dt]
    }

    /// Scaled `R1 + R2`.
    pub fn physics_residual(&self) -> f64 {
        self.r1_scaled + self.r2_scaled
    }
}

/// Model predictions for `set` in physical units.
pub fn predict_physical(model: &Mlp, set: &SupervisedSet, target_scaler: &MinMaxScaler) -> Result<Matrix> {
    check_model(model, set)?;
    target_scaler.inverse_transform(&model.predict(&set.x)?)
}

fn check_model(model: &Mlp, set: &SupervisedSet) -> Result<()> {
    if model.input_dim() != set.x.cols() || model.output_dim() != set.y.cols() {
        return Err(Error::shape(
            "model vs data",
            format!("{}->{}", set.x.cols(), set.y.cols()),
            format!("{}->{}", model.input_dim(), model.output_dim()),
        ));
    }
    Ok(())
}

/// NRMSE of the `dB_H/dt` channel in physical units.
pub fn dbh_nrmse(model: &Mlp, set: &SupervisedSet, target_scaler: &MinMaxScaler) -> Result<f64> {
    let pred = predict_physical(model, set, target_scaler)?;
    let obs = target_scaler.inverse_transform(&set.y)?;
    let c = set.layout.dbh_dt;
    nrmse(&pred.column(c), &obs.column(c))
}

/// Full metrics for one model on a normalized test set.
pub fn evaluate_variant(
    model: &Mlp,
    test: &SupervisedSet,
    target_scaler: &MinMaxScaler,
    loss: &CompositeLossConfig,
    label: Variant,
) -> Result<MetricsReport> {
    check_model(model, test)?;
    let pred_n = model.predict(&test.x)?;
    let pred = target_scaler.inverse_transform(&pred_n)?;
    let obs = target_scaler.inverse_transform(&test.y)?;
    let mut rmse_v = Vec::with_capacity(N_TARGETS);
    let mut nrmse_v = Vec::with_capacity(N_TARGETS);
    for c in 0..N_TARGETS {
        let (p, o) = (pred.column(c), obs.column(c));
        rmse_v.push(rmse(&p, &o));
        nrmse_v.push(nrmse(&p, &o).unwrap_or(f64::NAN));
    }
    let windows = test.segments();
    let (r1_scaled, r2_scaled) = physics_residuals(&pred_n, &windows, loss)?;
    let raw = CompositeLossConfig {
        r1_scale: 1.0,
        r2_scale: 1.0,
        ..loss.clone()
    };
    let (r1, r2) = physics_residuals(&pred_n, &windows, &raw)?;
    Ok(MetricsReport {
        label,
        rmse: rmse_v,
        nrmse: nrmse_v,
        r1,
        r2,
        r1_scaled,
        r2_scaled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSweepConfig {
    /// Noise levels in `[0, 1]`, ascending.
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            levels: (0..=10).map(|i| i as f64 / 10.0).collect(),
            seed: 0,
        }
    }
}

impl NoiseSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("noise sweep needs at least one level".into()));
        }
        if self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("noise levels must lie in [0, 1]".into()));
        }
        if self.levels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("noise levels must be sorted".into()));
        }
        Ok(())
    }

    /// Seed for the draw at level index `i`.
    pub fn level_seed(&self, i: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(i as u64 + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: f64,
    /// `dB_H/dt` NRMSE in physical units.
    pub nrmse: f64,
}

/// Adds Gaussian noise with per-feature `σ = level · std(feature)` to the
/// normalized test features and records `dB_H/dt` NRMSE at every level.
/// Levels are evaluated in parallel, each with its own seeded generator.
pub fn noise_sweep(
    model: &Mlp,
    test: &SupervisedSet,
    target_scaler: &MinMaxScaler,
    cfg: &NoiseSweepConfig,
) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    check_model(model, test)?;
    let stds: Vec<f64> = (0..test.x.cols()).map(|c| std_dev(&test.x.column(c))).collect();
    let levels: Vec<(usize, f64)> = cfg.levels.iter().copied().enumerate().collect();
    par::map_slice(&levels, |&(i, level)| {
        let x = if level == 0.0 {
            test.x.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.level_seed(i));
            let mut x = test.x.clone();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for r in 0..x.rows() {
                for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                    *v += level * stds[c] * normal.sample(&mut rng);
                }
            }
            x
        };
        let noisy = SupervisedSet { x, ..test.clone() };
        Ok(SweepPoint {
            level,
            nrmse: dbh_nrmse(model, &noisy, target_scaler)?,
        })
    })
    .into_iter()
    .collect()
}

fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Everything recorded for one variant on the shared test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub report: MetricsReport,
    pub sweep: Vec<SweepPoint>,
    /// Predicted `dB_H/dt` per test row, physical units.
    pub trace: Vec<f64>,
}

/// Evaluates a model and records its sweep and prediction trace.
pub fn run_variant(
    model: &Mlp,
    test: &SupervisedSet,
    target_scaler: &MinMaxScaler,
    loss: &CompositeLossConfig,
    sweep: &NoiseSweepConfig,
    label: Variant,
) -> Result<VariantResult> {
    let report = evaluate_variant(model, test, target_scaler, loss, label)?;
    let points = noise_sweep(model, test, target_scaler, sweep)?;
    let trace = predict_physical(model, test, target_scaler)?.column(test.layout.dbh_dt);
    Ok(VariantResult {
        report,
        sweep: points,
        trace,
    })
}

/// Plot-ready CSV tables for a set of variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metrics_csv: String,
    pub sweep_csv: String,
    pub trace_csv: String,
}

impl Comparison {
    /// Writes `metrics.csv`, `sweep.csv` and `trace.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (name, body) in [
            ("metrics.csv", &self.metrics_csv),
            ("sweep.csv", &self.sweep_csv),
            ("trace.csv", &self.trace_csv),
        ] {
            let p = dir.join(name);
            fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Merges variant results evaluated on the same test rows.
///
/// `metrics.csv` has one row per variant with RMSE and NRMSE per target plus
/// the residuals; `sweep.csv` has one row per (variant, level); `trace.csv`
/// has `timestamp, observed` and one column per variant.
pub fn compare_variants(
    results: &[VariantResult],
    timestamps: &[i64],
    observed: &[f64],
    layout: &TargetLayout,
) -> Result<Comparison> {
    if results.len() < 2 {
        return Err(Error::Config(format!(
            "comparison needs at least 2 variants, got {}",
            results.len()
        )));
    }
    variant_tables(results, timestamps, observed, layout)
}

/// The tables of [`compare_variants`] for any nonempty set of variants,
/// including a single evaluated model.
pub fn variant_tables(
    results: &[VariantResult],
    timestamps: &[i64],
    observed: &[f64],
    layout: &TargetLayout,
) -> Result<Comparison> {
    if results.is_empty() {
        return Err(Error::Config("no variants to tabulate".into()));
    }
    if timestamps.len() != observed.len() {
        return Err(Error::shape("compare_variants observed", timestamps.len(), observed.len()));
    }
    for r in results {
        if r.trace.len() != observed.len() {
            return Err(Error::Dataset(format!(
                "variant {} was evaluated on {} rows, expected {}",
                r.report.label,
                r.trace.len(),
                observed.len()
            )));
        }
    }
    let names = layout.column_names();
    let mut metrics = String::from("variant");
    for n in names {
        metrics.push_str(&format!(",rmse_{n}"));
    }
    for n in names {
        metrics.push_str(&format!(",nrmse_{n}"));
    }
    metrics.push_str(",r1,r2,r1_scaled,r2_scaled\n");
    for r in results {
        let m = &r.report;
        metrics.push_str(m.label.label());
        for v in m.rmse.iter().chain(&m.nrmse) {
            metrics.push_str(&format!(",{v}"));
        }
        metrics.push_str(&format!(",{},{},{},{}\n", m.r1, m.r2, m.r1_scaled, m.r2_scaled));
    }

    let mut sweep = String::from("variant,level,nrmse\n");
    for r in results {
        for p in &r.sweep {
            sweep.push_str(&format!("{},{},{}\n", r.report.label, p.level, p.nrmse));
        }
    }

    let mut trace = String::from("timestamp,observed");
    for r in results {
        trace.push_str(&format!(",{}", r.report.label));
    }
    trace.push('\n');
    for (i, (&t, &o)) in timestamps.iter().zip(observed).enumerate() {
        trace.push_str(&format!("{},{o}", format_timestamp(t)));
        for r in results {
            trace.push_str(&format!(",{}", r.trace[i]));
        }
        trace.push('\n');
    }
    Ok(Comparison {
        metrics_csv: metrics,
        sweep_csv: sweep,
        trace_csv: trace,
    })
}
