//! Grid search over the physics weight `λ` and the pruning balance `α`,
//! scored by validation NRMSE of `dB_H/dt`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedData;
use crate::error::{Error, Result};
use crate::eval::dbh_nrmse;
use crate::nn::{train, Mlp, TrainConfig};
use crate::par;
use crate::physics::CompositeLossConfig;
use crate::pruning::{prune_pipeline, PruneConfig, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridParameter {
    Lambda,
    Alpha,
}

impl fmt::Display for GridParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridParameter::Lambda => "lambda",
            GridParameter::Alpha => "alpha",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub parameter: GridParameter,
    /// Ascending candidates in `[0, 1]`.
    pub values: Vec<f64>,
    /// Only 1 (a single chronological validation split) is supported.
    #[serde(default = "one")]
    pub folds: usize,
}

fn one() -> usize {
    1
}

impl GridSpec {
    /// 26 evenly spaced points on `[0, 1]`.
    pub fn default_for(parameter: GridParameter) -> Self {
        Self {
            parameter,
            values: (0..=25).map(|i| i as f64 * 0.04).collect(),
            folds: 1,
        }
    }

    pub fn single(parameter: GridParameter, value: f64) -> Self {
        Self {
            parameter,
            values: vec![value],
            folds: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config(format!("{} grid is empty", self.parameter)));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("{} grid values must lie in [0, 1]", self.parameter)));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("{} grid must be strictly ascending", self.parameter)));
        }
        if self.folds != 1 {
            return Err(Error::Config(
                "only folds = 1 is supported; shuffled folds would break time order".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub value: f64,
    /// Validation `dB_H/dt` NRMSE; `None` if training diverged.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub parameter: GridParameter,
    pub table: Vec<CandidateScore>,
    pub best: f64,
    pub best_score: f64,
}

impl SearchResult {
    fn from_table(parameter: GridParameter, table: Vec<CandidateScore>) -> Result<Self> {
        let mut best: Option<(f64, f64)> = None;
        for c in &table {
            if let Some(s) = c.score {
                // Strict comparison keeps the smaller value on ties.
                if best.is_none_or(|(_, b)| s < b) {
                    best = Some((c.value, s));
                }
            }
        }
        let (best, best_score) = best.ok_or_else(|| {
            Error::Numeric(format!("every {parameter} candidate diverged"))
        })?;
        Ok(Self {
            parameter,
            table,
            best,
            best_score,
        })
    }

    /// `candidate,score` rows; diverged candidates have an empty score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate,score\n");
        for c in &self.table {
            let s = c.score.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{}\n", c.value, s));
        }
        out
    }
}

fn score_or_divergence(parameter: GridParameter, value: f64, r: Result<f64>) -> Result<CandidateScore> {
    match r {
        Ok(s) if s.is_finite() => Ok(CandidateScore { value, score: Some(s) }),
        Ok(_) | Err(Error::Divergence { .. }) => {
            log::warn!("{parameter} = {value}: training diverged; candidate excluded");
            Ok(CandidateScore { value, score: None })
        }
        Err(e) => Err(e),
    }
}

/// Trains one model per `λ` from the same seeded initialization and keeps
/// the one with the lowest validation `dB_H/dt` NRMSE. Candidates run in
/// parallel; each run is deterministic.
pub fn grid_search_lambda(
    data: &PreparedData,
    arch: &[usize],
    grid: &GridSpec,
    train_cfg: &TrainConfig,
) -> Result<SearchResult> {
    grid.validate()?;
    if grid.parameter != GridParameter::Lambda {
        return Err(Error::Config("grid_search_lambda needs a lambda grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let init = Mlp::new(arch, &mut rng)?;
    let table = par::map_slice(&grid.values, |&lambda| {
        let loss = data.loss_config(lambda);
        let r = train(&init, &data.train, None, &loss, train_cfg)
            .and_then(|(m, _)| dbh_nrmse(&m, &data.val, &data.target_scaler));
        score_or_divergence(GridParameter::Lambda, lambda, r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    SearchResult::from_table(GridParameter::Lambda, table)
}

/// Runs physics-guided pruning once per `α` on the same trained model and
/// keeps the one with the lowest post-fine-tune validation NRMSE.
pub fn grid_search_alpha(
    model: &Mlp,
    data: &PreparedData,
    loss: &CompositeLossConfig,
    train_cfg: &TrainConfig,
    grid: &GridSpec,
    prune_cfg: &PruneConfig,
) -> Result<SearchResult> {
    grid.validate()?;
    if grid.parameter != GridParameter::Alpha {
        return Err(Error::Config("grid_search_alpha needs an alpha grid".into()));
    }
    if !loss.physics_active() {
        return Err(Error::Config("alpha search needs a physics-guided model (lambda > 0)".into()));
    }
    let table = par::map_slice(&grid.values, |&alpha| {
        let cfg = PruneConfig {
            alpha,
            ..prune_cfg.clone()
        };
        let r = prune_pipeline(model, data, loss, train_cfg, &cfg, Scheme::PhysicsGuided)
            .map(|(_, report)| report.val_nrmse_after);
        score_or_divergence(GridParameter::Alpha, alpha, r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    SearchResult::from_table(GridParameter::Alpha, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{derive_targets, SplitSpec};
    use crate::pruning::ElementKind;
    use crate::synth::{generate, SynthConfig};

    fn data() -> PreparedData {
        let raw = generate(&SynthConfig {
            n_minutes: 1500,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        PreparedData::new(&derive_targets(&raw).unwrap(), &SplitSpec::default()).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = GridSpec::default_for(GridParameter::Lambda);
        assert_eq!(g.values.len(), 26);
        assert_eq!(g.values[0], 0.0);
        assert!((g.values[9] - 0.36).abs() < 1e-12);
        assert!((g.values[25] - 1.0).abs() < 1e-12);
        g.validate().unwrap();
    }

    #[test]
    fn grid_validation() {
        let bad = |values: Vec<f64>, folds| GridSpec {
            parameter: GridParameter::Alpha,
            values,
            folds,
        };
        assert!(bad(vec![], 1).validate().is_err());
        assert!(bad(vec![0.5, 0.2], 1).validate().is_err());
        assert!(bad(vec![1.2], 1).validate().is_err());
        assert!(bad(vec![0.2], 3).validate().is_err());
    }

    #[test]
    fn ties_prefer_smaller_value_and_divergence_is_excluded() {
        let table = vec![
            CandidateScore { value: 0.1, score: None },
            CandidateScore { value: 0.2, score: Some(0.5) },
            CandidateScore { value: 0.3, score: Some(0.5) },
            CandidateScore { value: 0.4, score: Some(0.7) },
        ];
        let r = SearchResult::from_table(GridParameter::Lambda, table).unwrap();
        assert_eq!(r.best, 0.2);
        assert_eq!(r.best_score, 0.5);
        assert_eq!(r.to_csv().lines().nth(1), Some("0.1,"));
        let all_bad = vec![CandidateScore { value: 0.1, score: None }];
        assert!(SearchResult::from_table(GridParameter::Lambda, all_bad).is_err());
    }

    #[test]
    fn lambda_search_contracts() {
        let d = data();
        let arch = [10, 8, 7];
        let single = grid_search_lambda(&d, &arch, &GridSpec::single(GridParameter::Lambda, 0.36), &quick()).unwrap();
        assert_eq!(single.best, 0.36);

        let grid = GridSpec {
            parameter: GridParameter::Lambda,
            values: vec![0.0, 0.36],
            folds: 1,
        };
        let a = grid_search_lambda(&d, &arch, &grid, &quick()).unwrap();
        let b = grid_search_lambda(&d, &arch, &grid, &quick()).unwrap();
        assert_eq!(a, b);
        let min = a.table.iter().filter_map(|c| c.score).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_score, min);

        // The λ = 0 candidate is exactly a plain MSE model.
        let mut rng = ChaCha8Rng::seed_from_u64(quick().seed);
        let init = Mlp::new(&arch, &mut rng).unwrap();
        let (m, _) = train(&init, &d.train, None, &d.loss_config(0.0), &quick()).unwrap();
        let plain = dbh_nrmse(&m, &d.val, &d.target_scaler).unwrap();
        assert_eq!(a.table[0].score, Some(plain));

        // Dropping a candidate leaves the others untouched.
        let only_second = grid_search_lambda(&d, &arch, &GridSpec::single(GridParameter::Lambda, 0.36), &quick()).unwrap();
        assert_eq!(only_second.table[0], a.table[1]);
    }

    #[test]
    fn alpha_search_contracts() {
        let d = data();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Mlp::new(&[10, 8, 8, 7], &mut rng).unwrap();
        let loss = d.loss_config(0.36);
        let (m, _) = train(&init, &d.train, None, &loss, &quick()).unwrap();
        let prune = PruneConfig {
            kind: ElementKind::Neuron,
            fine_tune_epochs: Some(1),
            ..Default::default()
        };
        let single = grid_search_alpha(&m, &d, &loss, &quick(), &GridSpec::single(GridParameter::Alpha, 0.52), &prune).unwrap();
        assert_eq!(single.best, 0.52);

        let grid = GridSpec {
            parameter: GridParameter::Alpha,
            values: vec![0.0, 0.5],
            folds: 1,
        };
        let r = grid_search_alpha(&m, &d, &loss, &quick(), &grid, &prune).unwrap();
        assert!(grid.values.contains(&r.best));
        let (_, std_report) = prune_pipeline(&m, &d, &loss, &quick(), &prune, Scheme::Standard).unwrap();
        assert_eq!(r.table[0].score, Some(std_report.val_nrmse_after));

        let plain = d.loss_config(0.0);
        assert!(grid_search_alpha(&m, &d, &plain, &quick(), &grid, &prune).is_err());
    }
}
