//! Synthetic minute-cadence data with known physics.
//!
//! Solar wind channels are Ornstein-Uhlenbeck processes (log-space for
//! density and temperature). The Newell coupling of the wind drives an
//! exponentially smoothed forcing `D`, and the ground field relaxes toward a
//! disturbance level proportional to `D`.
//!
//! Every one-minute ground step is quantized to `k·q·(±a, ±b)` where
//! `(a, b, c)` is a Pythagorean triple and `q = 2⁻⁶` nT. All ground values
//! stay on a dyadic grid, so with zero observation noise the derived rate
//! `sqrt(ΔB_N² + ΔB_E²) = k·q·c` is exact and `ΔB_H² = ΔB_N² + ΔB_E²` holds
//! bit-for-bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Channel, RawSeries, N_CHANNELS};
use crate::error::{Error, Result};
use crate::physics::{clock_angle, newell_coupling};

/// Ground-field quantum in nT.
pub const GROUND_QUANTUM: f64 = 1.0 / 64.0;

/// 2015-01-01T00:00Z in minutes since the epoch.
const DEFAULT_START: i64 = 23_667_840;

const TRIPLES: [(f64, f64, f64); 12] = [
    (1.0, 0.0, 1.0),
    (3.0, 4.0, 5.0),
    (5.0, 12.0, 13.0),
    (8.0, 15.0, 17.0),
    (7.0, 24.0, 25.0),
    (20.0, 21.0, 29.0),
    (12.0, 35.0, 37.0),
    (9.0, 40.0, 41.0),
    (28.0, 45.0, 53.0),
    (11.0, 60.0, 61.0),
    (33.0, 56.0, 65.0),
    (16.0, 63.0, 65.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_minutes: usize,
    pub seed: u64,
    pub start_minute: i64,
    /// Solar wind speed mean and standard deviation (km/s).
    pub v_mean: f64,
    pub v_sigma: f64,
    /// IMF component standard deviation (nT).
    pub imf_sigma: f64,
    /// Autocorrelation length of the IMF (minutes).
    pub imf_tau: f64,
    /// Autocorrelation length of speed, density and temperature (minutes).
    pub plasma_tau: f64,
    pub density_mean: f64,
    pub temperature_mean: f64,
    /// Smoothing length of the coupling forcing (minutes).
    pub forcing_tau: f64,
    /// Ground disturbance per unit of smoothed coupling (nT).
    pub coupling_gain: f64,
    /// Fraction of the remaining disturbance the ground field closes each minute.
    pub ground_relaxation: f64,
    /// Additive Gaussian observation noise per channel, in [`Channel::ALL`] order.
    pub noise_sigma: [f64; N_CHANNELS],
    /// Fraction of interior cells per channel turned into isolated gaps.
    pub gap_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_minutes: 50_000,
            seed: 0,
            start_minute: DEFAULT_START,
            v_mean: 450.0,
            v_sigma: 80.0,
            imf_sigma: 4.0,
            imf_tau: 45.0,
            plasma_tau: 120.0,
            density_mean: 5.0,
            temperature_mean: 1.0e5,
            forcing_tau: 10.0,
            coupling_gain: 0.03,
            ground_relaxation: 0.25,
            noise_sigma: [0.0; N_CHANNELS],
            gap_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_minutes < 100 {
            return Err(Error::Config(format!("n_minutes must be >= 100, got {}", self.n_minutes)));
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise sigma must be nonnegative".into()));
        }
        if !(0.0..0.3).contains(&self.gap_fraction) {
            return Err(Error::Config("gap_fraction must lie in [0, 0.3)".into()));
        }
        for (name, v) in [
            ("imf_tau", self.imf_tau),
            ("plasma_tau", self.plasma_tau),
            ("forcing_tau", self.forcing_tau),
            ("density_mean", self.density_mean),
            ("temperature_mean", self.temperature_mean),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.ground_relaxation > 0.0 && self.ground_relaxation <= 1.0) {
            return Err(Error::Config("ground_relaxation must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

struct Ou {
    mean: f64,
    phi: f64,
    kick: f64,
    x: f64,
}

impl Ou {
    fn new(mean: f64, sigma: f64, tau: f64, rng: &mut ChaCha8Rng) -> Self {
        let phi = (-1.0 / tau).exp();
        let z: f64 = StandardNormal.sample(rng);
        Self {
            mean,
            phi,
            kick: sigma * (1.0 - phi * phi).sqrt(),
            x: mean + sigma * z,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.x = self.mean + self.phi * (self.x - self.mean) + self.kick * z;
        self.x
    }
}

/// Closest quantized step `(ΔN, ΔE)` to `(un, ue)` along a Pythagorean
/// direction. Returns exact dyadic multiples of [`GROUND_QUANTUM`].
fn quantize_step(un: f64, ue: f64) -> (f64, f64) {
    let mut best = (0.0, 0.0);
    let mut best_err = un * un + ue * ue;
    for &(a, b, c) in &TRIPLES {
        for (p, r) in [(a, b), (b, a)] {
            for sn in [1.0, -1.0] {
                for se in [1.0, -1.0] {
                    let (dn, de) = (sn * p, se * r);
                    let proj = (un * dn + ue * de) / c;
                    if proj <= 0.0 {
                        continue;
                    }
                    let k = (proj / (c * GROUND_QUANTUM)).round();
                    let step = k * GROUND_QUANTUM;
                    let (qn, qe) = (step * dn, step * de);
                    let err = (un - qn).powi(2) + (ue - qe).powi(2);
                    if err < best_err {
                        best_err = err;
                        best = (qn, qe);
                    }
                }
            }
        }
    }
    best
}

/// Generates a [`RawSeries`] of `n_minutes` consecutive minutes.
pub fn generate(cfg: &SynthConfig) -> Result<RawSeries> {
    cfg.validate()?;
    let n = cfg.n_minutes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bx = Ou::new(0.0, cfg.imf_sigma, cfg.imf_tau, &mut rng);
    let mut by = Ou::new(0.0, cfg.imf_sigma, cfg.imf_tau, &mut rng);
    let mut bz = Ou::new(0.0, cfg.imf_sigma, cfg.imf_tau, &mut rng);
    let mut v = Ou::new(cfg.v_mean, cfg.v_sigma, cfg.plasma_tau, &mut rng);
    let mut ln_rho = Ou::new(cfg.density_mean.ln(), 0.4, cfg.plasma_tau, &mut rng);
    let mut ln_t = Ou::new(cfg.temperature_mean.ln(), 0.4, cfg.plasma_tau, &mut rng);

    let mut cols = vec![Vec::with_capacity(n); N_CHANNELS];
    let (mut b_n, mut b_e) = (0.0f64, 0.0f64);
    let mut forcing = 0.0;
    let alpha = 1.0 / cfg.forcing_tau;
    for t in 0..n {
        let (x_imf, y_imf, z_imf) = if t == 0 {
            (bx.x, by.x, bz.x)
        } else {
            (bx.step(&mut rng), by.step(&mut rng), bz.step(&mut rng))
        };
        let speed = if t == 0 { v.x } else { v.step(&mut rng) }.max(200.0);
        let rho = if t == 0 { ln_rho.x } else { ln_rho.step(&mut rng) }.exp();
        let temp = if t == 0 { ln_t.x } else { ln_t.step(&mut rng) }.exp();
        let pressure = 1.6726e-6 * rho * speed * speed;

        let coupling = newell_coupling(speed, z_imf, clock_angle(y_imf, z_imf))?;
        forcing += alpha * (coupling - forcing);
        let disturbance = cfg.coupling_gain * forcing;
        let goal_n = -disturbance;
        let goal_e = 0.5 * disturbance * (y_imf / 2.0).tanh();
        let bz_geo = 0.3 * disturbance;

        let row = [b_n, b_e, bz_geo, x_imf, y_imf, z_imf, temp, rho, speed, pressure];
        for (col, val) in cols.iter_mut().zip(row) {
            col.push(val);
        }

        let (dn, de) = quantize_step(
            cfg.ground_relaxation * (goal_n - b_n),
            cfg.ground_relaxation * (goal_e - b_e),
        );
        b_n += dn;
        b_e += de;
    }

    for (k, col) in cols.iter_mut().enumerate() {
        let sigma = cfg.noise_sigma[k];
        if sigma > 0.0 {
            for v in col.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
    }
    // Speed must stay physical after noise.
    for v in cols[Channel::V.index()].iter_mut() {
        *v = v.max(0.0);
    }

    let timestamps = (0..n as i64).map(|i| cfg.start_minute + i).collect();
    let mut series = RawSeries::new(timestamps, cols)?;
    if cfg.gap_fraction > 0.0 {
        inject_gaps(&mut series, cfg.gap_fraction, &mut rng);
    }
    Ok(series)
}

/// Marks `floor(fraction · n)` interior cells per channel as missing, never
/// two adjacent cells of the same channel.
fn inject_gaps(series: &mut RawSeries, fraction: f64, rng: &mut ChaCha8Rng) {
    let n = series.len();
    let want = (fraction * n as f64).floor() as usize;
    for c in Channel::ALL {
        let mut candidates: Vec<usize> = (1..n - 1).collect();
        candidates.shuffle(rng);
        let mut placed = 0;
        for i in candidates {
            if placed == want {
                break;
            }
            let g = &series.gaps[c.index()];
            if g[i - 1] || g[i + 1] || g[i] {
                continue;
            }
            series.set_gap(c, i);
            placed += 1;
        }
    }
}
