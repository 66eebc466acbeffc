//! Solar wind coupling physics and the physics-regularized composite loss.
//!
//! The composite objective is `L = L_data + λ (R1 + R2)` where
//!
//! - `L_data` is the mean squared error averaged over all targets,
//! - `R1` is the mean absolute violation of `(dB_H/dt)² = (dB_N/dt)² + (dB_E/dt)²`
//!   over consecutive prediction pairs, with the horizontal derivatives taken as
//!   forward differences of the predicted `B_N`, `B_E` levels,
//! - `R2` is the mean absolute deviation of the predicted reconnection rate from
//!   the Newell coupling evaluated on the predicted `V`, `B_Z` and clock angle.
//!
//! Models are trained on min-max normalized targets; [`OutputUnits`] maps the
//! network outputs back to physical units before the residuals are evaluated.
//! [`CompositeLossConfig::r1_scale`] and [`CompositeLossConfig::r2_scale`]
//! turn the physical residuals into dimensionless penalties comparable to the
//! normalized data term.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Number of model outputs.
pub const N_TARGETS: usize = 7;

/// Index bindings from model outputs to physical roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLayout {
    pub dbh_dt: usize,
    pub b_n: usize,
    pub b_e: usize,
    pub dphi_dt: usize,
    pub v: usize,
    pub bz_imf: usize,
    pub theta: usize,
}

impl Default for TargetLayout {
    fn default() -> Self {
        Self {
            dbh_dt: 0,
            b_n: 1,
            b_e: 2,
            dphi_dt: 3,
            v: 4,
            bz_imf: 5,
            theta: 6,
        }
    }
}

impl TargetLayout {
    pub const NAMES: [&'static str; N_TARGETS] =
        ["dBH_dt", "B_N", "B_E", "dPhi_dt", "V", "Bz_imf", "theta"];

    pub fn indices(&self) -> [usize; N_TARGETS] {
        [
            self.dbh_dt,
            self.b_n,
            self.b_e,
            self.dphi_dt,
            self.v,
            self.bz_imf,
            self.theta,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; N_TARGETS];
        for i in self.indices() {
            if i >= N_TARGETS || seen[i] {
                return Err(Error::Config(format!(
                    "target layout indices must be a permutation of 0..{N_TARGETS}: {:?}",
                    self.indices()
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Output column names ordered by column index.
    pub fn column_names(&self) -> [&'static str; N_TARGETS] {
        let mut names = [""; N_TARGETS];
        for (name, idx) in Self::NAMES.iter().zip(self.indices()) {
            names[idx] = name;
        }
        names
    }
}

/// Per-output affine map `physical = offset + scale * output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputUnits {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl OutputUnits {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    #[inline]
    fn to_physical(&self, col: usize, v: f64) -> f64 {
        self.offset[col] + self.scale[col] * v
    }
}

impl Default for OutputUnits {
    fn default() -> Self {
        Self::identity(N_TARGETS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeLossConfig {
    /// Physics weight, in `[0, 1]`. Zero reduces the objective to plain MSE.
    pub lambda: f64,
    pub layout: TargetLayout,
    /// Sample cadence used by the forward differences in `R1`.
    pub dt_minutes: f64,
    pub units: OutputUnits,
    pub r1_scale: f64,
    pub r2_scale: f64,
}

impl Default for CompositeLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            layout: TargetLayout::default(),
            dt_minutes: 1.0,
            units: OutputUnits::default(),
            r1_scale: 1.0,
            r2_scale: 1.0,
        }
    }
}

impl CompositeLossConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.dt_minutes > 0.0 && self.dt_minutes.is_finite()) {
            return Err(Error::Config("dt_minutes must be positive".into()));
        }
        if self.units.offset.len() != N_TARGETS || self.units.scale.len() != N_TARGETS {
            return Err(Error::Config("output units must cover 7 targets".into()));
        }
        if !(self.r1_scale >= 0.0 && self.r2_scale >= 0.0) {
            return Err(Error::Config("residual scales must be nonnegative".into()));
        }
        self.layout.validate()
    }

    pub fn physics_active(&self) -> bool {
        self.lambda != 0.0
    }
}

/// Components of the composite loss. `r1` and `r2` carry the residual scales.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_data.is_finite() && self.r1.is_finite() && self.r2.is_finite() && self.total.is_finite()
    }
}

/// IMF clock angle in `(-π, π]`, measured from +Z toward +Y.
///
/// `clock_angle(0, 0)` is defined as 0.
pub fn clock_angle(by: f64, bz: f64) -> f64 {
    if by == 0.0 && bz == 0.0 {
        return 0.0;
    }
    let a = by.atan2(bz);
    // atan2(-0.0, negative) yields -π; fold onto the closed end.
    if a == -PI {
        PI
    } else {
        a
    }
}

/// Newell coupling `V^(4/3) |B_Z|^(2/3) |sin(θ/2)|^(8/3)`.
pub fn newell_coupling(v: f64, bz: f64, theta: f64) -> Result<f64> {
    if v < 0.0 || v.is_nan() {
        return Err(Error::Numeric(format!("negative solar wind speed {v}")));
    }
    Ok(newell_term(v, bz, theta))
}

#[inline]
fn newell_term(v: f64, bz: f64, theta: f64) -> f64 {
    let v = v.max(0.0);
    v.powf(4.0 / 3.0) * bz.abs().powf(2.0 / 3.0) * (theta / 2.0).sin().abs().powf(8.0 / 3.0)
}

/// Newell term and its partial derivatives with respect to `(V, B_Z, θ)`.
/// Non-differentiable points (`V <= 0`, `B_Z = 0`) take a zero subgradient.
fn newell_with_grad(v: f64, bz: f64, theta: f64) -> (f64, [f64; 3]) {
    if v <= 0.0 {
        return (0.0, [0.0; 3]);
    }
    let vp = v.powf(4.0 / 3.0);
    let dvp = (4.0 / 3.0) * v.powf(1.0 / 3.0);
    let ab = bz.abs();
    let bp = ab.powf(2.0 / 3.0);
    let dbp = if ab == 0.0 {
        0.0
    } else {
        (2.0 / 3.0) * ab.powf(-1.0 / 3.0) * bz.signum()
    };
    let s = (theta / 2.0).sin();
    let sa = s.abs();
    let sp = sa.powf(8.0 / 3.0);
    let dsp = (8.0 / 3.0) * sa.powf(5.0 / 3.0) * sign0(s) * 0.5 * (theta / 2.0).cos();
    (vp * bp * sp, [dvp * bp * sp, vp * dbp * sp, vp * bp * dsp])
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_window_cols(m: &Matrix, context: &'static str) -> Result<()> {
    if m.cols() != N_TARGETS {
        return Err(Error::shape(context, N_TARGETS, m.cols()));
    }
    Ok(())
}

/// Mean over consecutive pairs of `|ĥ² - n̂² - ê²|` where `ĥ` is the
/// predicted `dB_H/dt` of the later row and `n̂`, `ê` are forward differences
/// of the predicted horizontal components. Values are in physical units.
pub fn residual_r1(window: &Matrix, layout: &TargetLayout, dt: f64) -> Result<f64> {
    check_window_cols(window, "residual_r1")?;
    if window.rows() < 2 {
        return Err(Error::Numeric(format!(
            "R1 window needs at least 2 rows, got {}",
            window.rows()
        )));
    }
    let mut acc = 0.0;
    for k in 0..window.rows() - 1 {
        acc += r1_pair(window.row(k), window.row(k + 1), layout, dt).abs();
    }
    Ok(acc / (window.rows() - 1) as f64)
}

#[inline]
fn r1_pair(prev: &[f64], next: &[f64], layout: &TargetLayout, dt: f64) -> f64 {
    let h = next[layout.dbh_dt];
    let n = (next[layout.b_n] - prev[layout.b_n]) / dt;
    let e = (next[layout.b_e] - prev[layout.b_e]) / dt;
    h * h - n * n - e * e
}

/// Mean over rows of `|dΦ/dt̂ - newell(V̂, B̂_Z, θ̂)|` in physical units.
/// Negative predicted speeds are clamped to zero inside the coupling term.
pub fn residual_r2(batch: &Matrix, layout: &TargetLayout) -> Result<f64> {
    check_window_cols(batch, "residual_r2")?;
    if batch.rows() == 0 {
        return Err(Error::Numeric("R2 batch is empty".into()));
    }
    let mut acc = 0.0;
    for r in 0..batch.rows() {
        let row = batch.row(r);
        acc += (row[layout.dphi_dt] - newell_term(row[layout.v], row[layout.bz_imf], row[layout.theta])).abs();
    }
    Ok(acc / batch.rows() as f64)
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Matrix, obs: &Matrix) -> Result<f64> {
    obs.check_shape("mse_loss", pred.rows(), pred.cols())?;
    let n = pred.as_slice().len();
    if n == 0 {
        return Err(Error::Numeric("mse of empty matrices".into()));
    }
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(obs.as_slice())
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok(sum / n as f64)
}

/// Gradient of [`mse_loss`] with respect to `pred`: `2 (Ŷ - Y) / (N K)`.
pub fn mse_loss_grad(pred: &Matrix, obs: &Matrix) -> Result<Matrix> {
    obs.check_shape("mse_loss_grad", pred.rows(), pred.cols())?;
    let n = pred.as_slice().len() as f64;
    let data = pred
        .as_slice()
        .iter()
        .zip(obs.as_slice())
        .map(|(p, o)| 2.0 * (p - o) / n)
        .collect();
    Matrix::from_vec(pred.rows(), pred.cols(), data)
}

/// Data term: per-target MSE averaged over the targets. With equal row counts
/// per target this equals [`mse_loss`].
pub fn l_data(pred: &Matrix, obs: &Matrix) -> Result<f64> {
    if pred.cols() != N_TARGETS {
        return Err(Error::shape("l_data", N_TARGETS, pred.cols()));
    }
    mse_loss(pred, obs)
}

/// Converts the physics-relevant columns of `pred` to physical units.
fn to_physical(pred: &Matrix, cfg: &CompositeLossConfig) -> Matrix {
    let mut out = pred.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = cfg.units.to_physical(c, *v);
        }
    }
    out
}

fn check_windows(windows: &[Range<usize>], rows: usize) -> Result<()> {
    for w in windows {
        if w.end > rows || w.start > w.end {
            return Err(Error::Numeric(format!(
                "window {w:?} out of bounds for {rows} rows"
            )));
        }
    }
    Ok(())
}

fn pair_count(windows: &[Range<usize>]) -> usize {
    windows.iter().map(|w| w.len().saturating_sub(1)).sum()
}

/// Scaled physics residuals `(r1_scale R1, r2_scale R2)` of normalized-scale
/// predictions. `R1` averages over every consecutive pair inside the windows
/// (0 when there is none); `R2` averages over all rows.
pub fn physics_residuals(
    pred: &Matrix,
    windows: &[Range<usize>],
    cfg: &CompositeLossConfig,
) -> Result<(f64, f64)> {
    check_window_cols(pred, "physics_residuals")?;
    check_windows(windows, pred.rows())?;
    if pred.rows() == 0 {
        return Err(Error::Numeric("physics residuals of an empty batch".into()));
    }
    let pairs = pair_count(windows);
    let phys = to_physical(pred, cfg);
    let layout = &cfg.layout;
    let mut r1 = 0.0;
    for w in windows {
        for k in w.start..w.end.saturating_sub(1) {
            r1 += r1_pair(phys.row(k), phys.row(k + 1), layout, cfg.dt_minutes).abs();
        }
    }
    // Batches without a consecutive pair carry no R1 information.
    let r1 = if pairs == 0 { 0.0 } else { r1 / pairs as f64 };
    let r2 = residual_r2(&phys, layout)?;
    Ok((cfg.r1_scale * r1, cfg.r2_scale * r2))
}

/// Evaluates `L_data + λ (R1 + R2)` on predictions split into contiguous
/// time windows.
pub fn composite_loss(
    pred: &Matrix,
    obs: &Matrix,
    windows: &[Range<usize>],
    cfg: &CompositeLossConfig,
) -> Result<LossBreakdown> {
    let l_data = l_data(pred, obs)?;
    let (r1, r2) = physics_residuals(pred, windows, cfg)?;
    let total = if cfg.physics_active() {
        l_data + cfg.lambda * (r1 + r2)
    } else {
        l_data
    };
    Ok(LossBreakdown {
        l_data,
        r1,
        r2,
        total,
    })
}

/// Gradient of `r1_scale R1 + r2_scale R2` with respect to the
/// normalized-scale predictions. The absolute-value kink takes subgradient 0.
pub fn physics_loss_grad(
    pred: &Matrix,
    windows: &[Range<usize>],
    cfg: &CompositeLossConfig,
) -> Result<Matrix> {
    check_window_cols(pred, "physics_loss_grad")?;
    check_windows(windows, pred.rows())?;
    if pred.rows() == 0 {
        return Err(Error::Numeric("physics gradient of an empty batch".into()));
    }
    let pairs = pair_count(windows).max(1);
    let phys = to_physical(pred, cfg);
    let l = &cfg.layout;
    let dt = cfg.dt_minutes;
    // Gradient with respect to physical values first.
    let mut g = Matrix::zeros(pred.rows(), N_TARGETS);

    let c1 = cfg.r1_scale / pairs as f64;
    if c1 != 0.0 {
        for w in windows {
            for k in w.start..w.end.saturating_sub(1) {
                let prev = phys.row(k);
                let next = phys.row(k + 1);
                let resid = r1_pair(prev, next, l, dt);
                let s = sign0(resid) * c1;
                if s == 0.0 {
                    continue;
                }
                let h = next[l.dbh_dt];
                let n = (next[l.b_n] - prev[l.b_n]) / dt;
                let e = (next[l.b_e] - prev[l.b_e]) / dt;
                g[(k + 1, l.dbh_dt)] += s * 2.0 * h;
                g[(k + 1, l.b_n)] -= s * 2.0 * n / dt;
                g[(k, l.b_n)] += s * 2.0 * n / dt;
                g[(k + 1, l.b_e)] -= s * 2.0 * e / dt;
                g[(k, l.b_e)] += s * 2.0 * e / dt;
            }
        }
    }

    let c2 = cfg.r2_scale / pred.rows() as f64;
    if c2 != 0.0 {
        for r in 0..phys.rows() {
            let row = phys.row(r);
            let (nt, d) = newell_with_grad(row[l.v], row[l.bz_imf], row[l.theta]);
            let s = sign0(row[l.dphi_dt] - nt) * c2;
            if s == 0.0 {
                continue;
            }
            g[(r, l.dphi_dt)] += s;
            g[(r, l.v)] -= s * d[0];
            g[(r, l.bz_imf)] -= s * d[1];
            g[(r, l.theta)] -= s * d[2];
        }
    }

    // Chain through the affine map to normalized units.
    for r in 0..g.rows() {
        for (c, v) in g.row_mut(r).iter_mut().enumerate() {
            *v *= cfg.units.scale[c];
        }
    }
    Ok(g)
}

/// Exact gradient of [`composite_loss`] with respect to `pred`.
///
/// With `λ = 0` this is exactly [`mse_loss_grad`].
pub fn composite_loss_grad(
    pred: &Matrix,
    obs: &Matrix,
    windows: &[Range<usize>],
    cfg: &CompositeLossConfig,
) -> Result<Matrix> {
    if pred.cols() != N_TARGETS {
        return Err(Error::shape("composite_loss_grad", N_TARGETS, pred.cols()));
    }
    let mut g = mse_loss_grad(pred, obs)?;
    if cfg.physics_active() {
        let p = physics_loss_grad(pred, windows, cfg)?;
        for (a, b) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *a += cfg.lambda * b;
        }
    }
    Ok(g)
}
