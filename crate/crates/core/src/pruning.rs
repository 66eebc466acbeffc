//! Sensitivity pruning and its physics-guided variant.
//!
//! Elements are scored on a fixed slice from the end of the training split,
//! the lowest-scoring `floor(r · total)` are removed, and the network is
//! fine-tuned with the loss it was trained on. Neurons are removed
//! structurally; weights are masked.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::PreparedData;
use crate::error::{Error, Result};
use crate::eval::dbh_nrmse;
use crate::matrix::Matrix;
use crate::nn::{fine_tune, Gradients, Mlp, TrainConfig};
use crate::par;
use crate::physics::{composite_loss_grad, physics_loss_grad, CompositeLossConfig};

/// Rows per chunk when back-propagating the scoring batch.
pub const SCORE_CHUNK: usize = 256;
/// Default number of trailing training rows used for scoring.
pub const SCORING_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Neuron,
    Weight,
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementKind::Neuron => "neuron",
            ElementKind::Weight => "weight",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Standard,
    PhysicsGuided,
}

/// A prunable element. Ordering is the deterministic tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementId {
    /// Hidden neuron `index` of hidden layer `layer` (0 = first hidden layer).
    Neuron { layer: usize, index: usize },
    /// Weight `(row, col)` of the weight matrix of layer `layer`.
    Weight { layer: usize, row: usize, col: usize },
}

impl ElementId {
    pub fn kind(&self) -> ElementKind {
        match self {
            ElementId::Neuron { .. } => ElementKind::Neuron,
            ElementId::Weight { .. } => ElementKind::Weight,
        }
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementId::Neuron { layer, index } => write!(f, "n{layer}:{index}"),
            ElementId::Weight { layer, row, col } => write!(f, "w{layer}:{row}:{col}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub ids: Vec<ElementId>,
    pub s: Vec<f64>,
    pub c: Option<Vec<f64>>,
    pub t: Vec<f64>,
}

impl ScoreTable {
    fn from_scores(ids: Vec<ElementId>, s: Vec<f64>) -> Self {
        Self {
            t: s.clone(),
            ids,
            s,
            c: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// One row per element: `element,s,c,t` (`c` empty when absent).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("element,s,c,t\n");
        for i in 0..self.len() {
            let c = self.c.as_ref().map(|c| c[i].to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", self.ids[i], self.s[i], c, self.t[i]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub kind: ElementKind,
    /// Fraction of prunable elements removed, in `[0, 1)`.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Weight of the constraint score, in `[0, 1]`. Ignored by the standard scheme.
    #[serde(default)]
    pub alpha: f64,
    /// Defaults to 20% of the training epochs.
    #[serde(default)]
    pub fine_tune_epochs: Option<usize>,
    /// Trailing training rows used for scoring.
    #[serde(default = "default_scoring_rows")]
    pub scoring_rows: usize,
}

fn default_ratio() -> f64 {
    0.3
}

fn default_scoring_rows() -> usize {
    SCORING_ROWS
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            kind: ElementKind::Neuron,
            ratio: default_ratio(),
            alpha: 0.0,
            fine_tune_epochs: None,
            scoring_rows: SCORING_ROWS,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("pruning ratio must lie in [0, 1), got {}", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.scoring_rows < 2 {
            return Err(Error::Config("scoring_rows must be at least 2".into()));
        }
        Ok(())
    }

    pub fn fine_tune_epochs_for(&self, train: &TrainConfig) -> usize {
        self.fine_tune_epochs
            .unwrap_or_else(|| (train.epochs as f64 * 0.2).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub scheme: Scheme,
    pub kind: ElementKind,
    pub ratio: f64,
    pub alpha: f64,
    /// Prunable elements before pruning.
    pub total_elements: usize,
    /// Elements removed, `floor(ratio · total_elements)`.
    pub pruned: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub active_weights_before: usize,
    pub active_weights_after: usize,
    pub architecture_before: Vec<usize>,
    pub architecture_after: Vec<usize>,
    pub val_nrmse_before: f64,
    /// After pruning, before fine-tuning.
    pub val_nrmse_pruned: f64,
    /// After fine-tuning.
    pub val_nrmse_after: f64,
    pub fine_tune_epochs: usize,
    pub selected: Vec<ElementId>,
    pub scores: ScoreTable,
}

impl PruneReport {
    /// Two-column `key,value` summary.
    pub fn summary_csv(&self) -> String {
        let arch = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        let scheme = match self.scheme {
            Scheme::Standard => "standard",
            Scheme::PhysicsGuided => "physics-guided",
        };
        let rows = [
            ("scheme", scheme.to_string()),
            ("kind", self.kind.to_string()),
            ("ratio", self.ratio.to_string()),
            ("alpha", self.alpha.to_string()),
            ("total_elements", self.total_elements.to_string()),
            ("pruned", self.pruned.to_string()),
            ("params_before", self.params_before.to_string()),
            ("params_after", self.params_after.to_string()),
            ("active_weights_before", self.active_weights_before.to_string()),
            ("active_weights_after", self.active_weights_after.to_string()),
            ("architecture_before", arch(&self.architecture_before)),
            ("architecture_after", arch(&self.architecture_after)),
            ("val_nrmse_before", self.val_nrmse_before.to_string()),
            ("val_nrmse_pruned", self.val_nrmse_pruned.to_string()),
            ("val_nrmse_after", self.val_nrmse_after.to_string()),
            ("fine_tune_epochs", self.fine_tune_epochs.to_string()),
        ];
        let mut out = String::from("key,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// Rows and contiguous windows the scores are computed on.
#[derive(Debug, Clone)]
pub struct ScoringBatch<'a> {
    pub x: &'a Matrix,
    pub y: &'a Matrix,
    pub windows: Vec<Range<usize>>,
}

/// Per-sample neuron sensitivities `∂L/∂h · f'(z)` and batch `∂L/∂W` for a
/// given output gradient.
///
/// The output gradient is computed once for the whole batch; the backward
/// pass runs over fixed row chunks in parallel. Since back-propagation is
/// linear in the output gradient, per-sample hidden gradients are exact, and
/// weight gradients are summed over chunks in chunk order.
fn chunked_backward(model: &Mlp, x: &Matrix, dy: &Matrix) -> Result<Gradients> {
    let n = x.rows();
    let chunks = n.div_ceil(SCORE_CHUNK);
    let parts = par::map_range(chunks, |c| -> Result<Gradients> {
        let r = c * SCORE_CHUNK..((c + 1) * SCORE_CHUNK).min(n);
        let trace = model.forward(&x.slice_rows(r.clone()))?;
        let mut g = model.backward(&trace, &dy.slice_rows(r))?;
        // Gate through the activation so a neuron that never fires scores 0.
        for (l, h) in g.hidden_outputs.iter_mut().enumerate() {
            let act = model.layers()[l].activation;
            for (d, &z) in h.as_mut_slice().iter_mut().zip(trace.pre[l].as_slice()) {
                *d *= act.derivative(z);
            }
        }
        Ok(g)
    });
    let mut iter = parts.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::Pruning("scoring batch is empty".into()))??;
    for g in iter {
        let g = g?;
        for (a, b) in acc.weights.iter_mut().zip(&g.weights) {
            for (u, v) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *u += v;
            }
        }
        for (a, b) in acc.biases.iter_mut().zip(&g.biases) {
            for (u, v) in a.iter_mut().zip(b) {
                *u += v;
            }
        }
        for (a, b) in acc.hidden_outputs.iter_mut().zip(&g.hidden_outputs) {
            *a = Matrix::vstack(&[a, b])?;
        }
    }
    Ok(acc)
}

fn scores_from_gradients(model: &Mlp, g: &Gradients, kind: ElementKind) -> ScoreTable {
    let mut ids = Vec::new();
    let mut s = Vec::new();
    match kind {
        ElementKind::Neuron => {
            for (layer, h) in g.hidden_outputs.iter().enumerate() {
                let rows = h.rows().max(1) as f64;
                for index in 0..h.cols() {
                    let mut acc = 0.0;
                    for r in 0..h.rows() {
                        acc += h[(r, index)].abs();
                    }
                    ids.push(ElementId::Neuron { layer, index });
                    s.push(acc / rows);
                }
            }
        }
        ElementKind::Weight => {
            let masks = model.masks();
            for (layer, w) in g.weights.iter().enumerate() {
                for row in 0..w.rows() {
                    for col in 0..w.cols() {
                        if masks.is_some_and(|m| m[layer][(row, col)] == 0.0) {
                            continue;
                        }
                        ids.push(ElementId::Weight { layer, row, col });
                        s.push(w[(row, col)].abs());
                    }
                }
            }
        }
    }
    ScoreTable::from_scores(ids, s)
}

fn check_batch(model: &Mlp, batch: &ScoringBatch<'_>) -> Result<()> {
    if batch.x.rows() == 0 {
        return Err(Error::Pruning("scoring batch is empty".into()));
    }
    batch
        .y
        .check_shape("scoring batch targets", batch.x.rows(), model.output_dim())?;
    if batch.x.cols() != model.input_dim() {
        return Err(Error::shape("scoring batch features", model.input_dim(), batch.x.cols()));
    }
    Ok(())
}

/// Importance scores `S`: mean `|∂L/∂h|` per hidden neuron over the batch,
/// or `|∂L/∂w|` per unmasked weight, where `L` is the composite loss.
///
/// The neuron gradient is taken through the activation, so samples on
/// which a ReLU is inactive contribute nothing.
pub fn importance_scores(
    model: &Mlp,
    batch: &ScoringBatch<'_>,
    loss: &CompositeLossConfig,
    kind: ElementKind,
) -> Result<ScoreTable> {
    check_batch(model, batch)?;
    let pred = model.predict(batch.x)?;
    let dy = composite_loss_grad(&pred, batch.y, &batch.windows, loss)?;
    let g = chunked_backward(model, batch.x, &dy)?;
    Ok(scores_from_gradients(model, &g, kind))
}

/// Constraint-violation scores `C`: as [`importance_scores`] but
/// differentiating only the physics term `R1 + R2` (independent of `λ`).
pub fn constraint_scores(
    model: &Mlp,
    batch: &ScoringBatch<'_>,
    loss: &CompositeLossConfig,
    kind: ElementKind,
) -> Result<ScoreTable> {
    check_batch(model, batch)?;
    let pred = model.predict(batch.x)?;
    let dy = physics_loss_grad(&pred, &batch.windows, loss)?;
    let g = chunked_backward(model, batch.x, &dy)?;
    Ok(scores_from_gradients(model, &g, kind))
}

/// `T = S + α·C` over identical element sets.
pub fn combined_scores(s: &ScoreTable, c: &ScoreTable, alpha: f64) -> Result<ScoreTable> {
    if s.ids != c.ids {
        return Err(Error::Pruning("importance and constraint scores cover different elements".into()));
    }
    let t = s.s.iter().zip(&c.s).map(|(a, b)| a + alpha * b).collect();
    Ok(ScoreTable {
        ids: s.ids.clone(),
        s: s.s.clone(),
        c: Some(c.s.clone()),
        t,
    })
}

/// The `floor(r · n)` lowest-`T` elements, ties broken by element order.
pub fn select_prunable(table: &ScoreTable, ratio: f64) -> Vec<ElementId> {
    let k = prune_count(table.len(), ratio);
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        table.t[a]
            .total_cmp(&table.t[b])
            .then_with(|| table.ids[a].cmp(&table.ids[b]))
    });
    let mut out: Vec<ElementId> = order[..k].iter().map(|&i| table.ids[i]).collect();
    out.sort();
    out
}

/// `floor(ratio · total)`, computed without rounding surprises for ratios
/// such as 0.3 whose binary value sits just below the decimal.
pub fn prune_count(total: usize, ratio: f64) -> usize {
    let exact = ratio * total as f64;
    let k = (exact + 1e-9).floor() as usize;
    k.min(total)
}

/// Removes neurons structurally or masks weights.
pub fn apply_prune(model: &Mlp, ids: &[ElementId], kind: ElementKind) -> Result<Mlp> {
    if ids.iter().any(|id| id.kind() != kind) {
        return Err(Error::Pruning(format!("element list contains ids that are not {kind}s")));
    }
    let mut out = model.clone();
    match kind {
        ElementKind::Weight => {
            let n_layers = model.layers().len();
            for id in ids {
                if let ElementId::Weight { layer, row, col } = *id {
                    let ok = layer < n_layers
                        && row < model.layers()[layer].output_dim
                        && col < model.layers()[layer].input_dim;
                    if !ok {
                        return Err(Error::Pruning(format!("weight {id} is out of range")));
                    }
                }
            }
            let masks = out.ensure_masks();
            for id in ids {
                if let ElementId::Weight { layer, row, col } = *id {
                    masks[layer][(row, col)] = 0.0;
                }
            }
            out.apply_masks();
        }
        ElementKind::Neuron => {
            let hidden = model.layers().len() - 1;
            let mut remove: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); hidden];
            for id in ids {
                if let ElementId::Neuron { layer, index } = *id {
                    if layer >= hidden {
                        return Err(Error::Pruning(format!("{id} is not a hidden neuron")));
                    }
                    if index >= model.layers()[layer].output_dim {
                        return Err(Error::Pruning(format!("neuron {id} is out of range")));
                    }
                    remove[layer].insert(index);
                }
            }
            for (l, r) in remove.iter().enumerate() {
                if r.len() == model.layers()[l].output_dim {
                    return Err(Error::Pruning(format!("pruning would empty hidden layer {l}")));
                }
            }
            let (layers, weights, biases, masks) = out.parts_mut();
            for (l, r) in remove.iter().enumerate().rev() {
                if r.is_empty() {
                    continue;
                }
                let keep: Vec<usize> = (0..layers[l].output_dim).filter(|i| !r.contains(i)).collect();
                weights[l] = weights[l].select_rows(&keep);
                biases[l] = keep.iter().map(|&i| biases[l][i]).collect();
                weights[l + 1] = select_cols(&weights[l + 1], &keep);
                if let Some(ms) = masks.as_mut() {
                    ms[l] = ms[l].select_rows(&keep);
                    ms[l + 1] = select_cols(&ms[l + 1], &keep);
                }
                layers[l].output_dim = keep.len();
                layers[l + 1].input_dim = keep.len();
            }
        }
    }
    Ok(out)
}

fn select_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * cols.len());
    for r in 0..m.rows() {
        let row = m.row(r);
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Matrix::from_vec(m.rows(), cols.len(), data).expect("column selection shape")
}

/// Score, select, prune and fine-tune in one round.
///
/// `loss` must be the objective the model was trained with; it is used for
/// the importance scores and for fine-tuning. The physics-guided scheme
/// requires a physics-active loss.
pub fn prune_pipeline(
    model: &Mlp,
    data: &PreparedData,
    loss: &CompositeLossConfig,
    train_cfg: &TrainConfig,
    cfg: &PruneConfig,
    scheme: Scheme,
) -> Result<(Mlp, PruneReport)> {
    cfg.validate()?;
    if scheme == Scheme::PhysicsGuided && !loss.physics_active() {
        return Err(Error::Pruning(
            "physics-guided pruning needs a model trained with a physics term (lambda > 0)".into(),
        ));
    }
    let scoring = data.train.tail(cfg.scoring_rows);
    let batch = ScoringBatch {
        x: &scoring.x,
        y: &scoring.y,
        windows: scoring.segments(),
    };
    let s = importance_scores(model, &batch, loss, cfg.kind)?;
    let (table, alpha) = match scheme {
        Scheme::Standard => (s, 0.0),
        Scheme::PhysicsGuided => {
            let c = constraint_scores(model, &batch, loss, cfg.kind)?;
            (combined_scores(&s, &c, cfg.alpha)?, cfg.alpha)
        }
    };
    let selected = select_prunable(&table, cfg.ratio);
    let pruned = apply_prune(model, &selected, cfg.kind)?;
    let epochs = cfg.fine_tune_epochs_for(train_cfg);
    let ft_cfg = TrainConfig {
        epochs,
        ..train_cfg.clone()
    };
    let (tuned, _) = fine_tune(&pruned, &data.train, None, loss, &ft_cfg)?;
    let scaler = &data.target_scaler;
    let report = PruneReport {
        scheme,
        kind: cfg.kind,
        ratio: cfg.ratio,
        alpha,
        total_elements: table.len(),
        pruned: selected.len(),
        params_before: model.parameter_count(),
        params_after: tuned.parameter_count(),
        active_weights_before: model.active_weight_count(),
        active_weights_after: tuned.active_weight_count(),
        architecture_before: model.dims(),
        architecture_after: tuned.dims(),
        val_nrmse_before: dbh_nrmse(model, &data.val, scaler)?,
        val_nrmse_pruned: dbh_nrmse(&pruned, &data.val, scaler)?,
        val_nrmse_after: dbh_nrmse(&tuned, &data.val, scaler)?,
        fine_tune_epochs: epochs,
        selected,
        scores: table,
    };
    log::info!(
        "pruned {} of {} {}s; val dB_H/dt NRMSE {:.4} -> {:.4} (fine-tuned)",
        report.pruned,
        report.total_elements,
        cfg.kind,
        report.val_nrmse_before,
        report.val_nrmse_after
    );
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(scores: &[f64]) -> ScoreTable {
        let ids = (0..scores.len())
            .map(|i| ElementId::Neuron { layer: 0, index: i })
            .collect();
        ScoreTable::from_scores(ids, scores.to_vec())
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn combined_score_arithmetic() {
        let s = table(&[0.10, 0.2]);
        let c = table(&[0.30, 0.0]);
        let t = combined_scores(&s, &c, 0.52).unwrap();
        assert!((t.t[0] - 0.256).abs() < 1e-15);
        assert_eq!(t.t[1], 0.2);
        assert_eq!(combined_scores(&s, &c, 0.0).unwrap().t, s.s);
        assert!(combined_scores(&s, &table(&[0.1]), 0.5).is_err());
    }

    #[test]
    fn selection_examples() {
        let t = table(&[0.9, 0.1, 0.5, 0.3]);
        let sel = select_prunable(&t, 0.5);
        assert_eq!(
            sel,
            vec![ElementId::Neuron { layer: 0, index: 1 }, ElementId::Neuron { layer: 0, index: 3 }]
        );
        assert!(select_prunable(&t, 0.0).is_empty());
        let eq = table(&[1.0; 6]);
        let sel = select_prunable(&eq, 0.5);
        let idx: Vec<usize> = sel
            .iter()
            .map(|id| match id {
                ElementId::Neuron { index, .. } => *index,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn prune_counts_are_floors() {
        assert_eq!(prune_count(90, 0.3), 27);
        assert_eq!(prune_count(10, 0.3), 3);
        assert_eq!(prune_count(7, 0.5), 3);
        assert_eq!(prune_count(100, 0.1), 10);
        assert_eq!(prune_count(0, 0.5), 0);
    }

    #[test]
    fn structural_neuron_removal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[10, 30, 30, 30, 7], &mut rng).unwrap();
        let ids: Vec<ElementId> = (0..15).map(|i| ElementId::Neuron { layer: 0, index: 2 * i }).collect();
        let p = apply_prune(&m, &ids, ElementKind::Neuron).unwrap();
        assert_eq!(p.dims(), vec![10, 15, 30, 30, 7]);
        assert_eq!(p.parameter_count(), m.parameter_count() - 15 * (10 + 1 + 30));
        // Removing a neuron equals silencing it in the original network.
        let mut silenced = m.clone();
        for id in &ids {
            if let ElementId::Neuron { layer, index } = *id {
                for r in 0..silenced.weights()[layer + 1].rows() {
                    silenced.weight_mut(layer + 1)[(r, index)] = 0.0;
                }
            }
        }
        let x = rand_matrix(&mut rng, 20, 10, -1.0, 1.0);
        let a = p.predict(&x).unwrap();
        let b = silenced.predict(&x).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn neuron_prune_errors() {
        let m = Mlp::zeros(&[3, 2, 4]).unwrap();
        let all = [ElementId::Neuron { layer: 0, index: 0 }, ElementId::Neuron { layer: 0, index: 1 }];
        assert!(apply_prune(&m, &all, ElementKind::Neuron).is_err());
        let out = [ElementId::Neuron { layer: 1, index: 0 }];
        assert!(apply_prune(&m, &out, ElementKind::Neuron).is_err());
        let w = [ElementId::Weight { layer: 0, row: 0, col: 0 }];
        assert!(apply_prune(&m, &w, ElementKind::Neuron).is_err());
    }

    #[test]
    fn weight_mask_equals_zeroing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(&[4, 6, 7], &mut rng).unwrap();
        let ids = vec![
            ElementId::Weight { layer: 0, row: 1, col: 2 },
            ElementId::Weight { layer: 1, row: 6, col: 5 },
        ];
        let p = apply_prune(&m, &ids, ElementKind::Weight).unwrap();
        let mut z = m.clone();
        z.weight_mut(0)[(1, 2)] = 0.0;
        z.weight_mut(1)[(6, 5)] = 0.0;
        let x = rand_matrix(&mut rng, 9, 4, -1.0, 1.0);
        assert_eq!(p.predict(&x).unwrap(), z.predict(&x).unwrap());
        assert_eq!(p.parameter_count(), m.parameter_count());
        assert_eq!(p.active_weight_count(), m.weight_count() - 2);
    }

    /// `2 -> 2 -> 1`-style toy embedded in the 7-output layout: only output
    /// 0 is non-zero, so the chain rule can be written out by hand.
    #[test]
    fn neuron_scores_match_hand_chain_rule() {
        let layers = vec![
            LayerSpec { input_dim: 1, output_dim: 2, activation: Activation::Relu },
            LayerSpec { input_dim: 2, output_dim: 7, activation: Activation::Identity },
        ];
        let w1 = Matrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let mut w2 = Matrix::zeros(7, 2);
        w2[(0, 0)] = 2.0;
        w2[(0, 1)] = 3.0;
        let m = Mlp::from_parts(layers, vec![w1, w2], vec![vec![0.0; 2], vec![0.0; 7]], None).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap();
        let y = Matrix::zeros(2, 7);
        let batch = ScoringBatch { x: &x, y: &y, windows: vec![0..2] };
        let s = importance_scores(&m, &batch, &CompositeLossConfig::default(), ElementKind::Neuron).unwrap();
        // Sample 1: z = (1, -1), h = (1, 0), out0 = 2.
        // Sample 2: z = (-2, 2), h = (0, 2), out0 = 6.
        // dL/dout0 = 2 out0 / (N K) with N = 2, K = 7; the neuron gradient is
        // dL/dout0 * w2[0][j], counted only where the ReLU is active.
        let g1 = 2.0 * 2.0 / 14.0;
        let g2 = 2.0 * 6.0 / 14.0;
        let want = [g1 * 2.0 / 2.0, g2 * 3.0 / 2.0];
        assert!((s.s[0] - want[0]).abs() < 1e-15, "{:?}", s.s);
        assert!((s.s[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn dead_and_disconnected_neurons_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mlp::new(&[3, 4, 7], &mut rng).unwrap();
        // Neuron 0 never activates, neuron 1 has no outgoing weights.
        for c in 0..3 {
            m.weight_mut(0)[(0, c)] = 0.0;
        }
        m.bias_mut(0)[0] = -1.0;
        for r in 0..7 {
            m.weight_mut(1)[(r, 1)] = 0.0;
        }
        let x = rand_matrix(&mut rng, 16, 3, -1.0, 1.0);
        let y = rand_matrix(&mut rng, 16, 7, 0.0, 1.0);
        let batch = ScoringBatch { x: &x, y: &y, windows: vec![0..16] };
        let cfg = CompositeLossConfig::default().with_lambda(0.5);
        let s = importance_scores(&m, &batch, &cfg, ElementKind::Neuron).unwrap();
        assert_eq!(s.s[0], 0.0);
        assert_eq!(s.s[1], 0.0);
        assert!(s.s[2] > 0.0 || s.s[3] > 0.0);
        // Weight scores for the incoming weights of the dead neuron are 0 too.
        let w = importance_scores(&m, &batch, &cfg, ElementKind::Weight).unwrap();
        assert_eq!(w.len(), m.weight_count());
        assert!(w.s[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constraint_scores_ignore_lambda_and_vanish_when_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mlp::new(&[3, 5, 7], &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 12, 3, -1.0, 1.0);
        let y = rand_matrix(&mut rng, 12, 7, 0.0, 1.0);
        let batch = ScoringBatch { x: &x, y: &y, windows: vec![0..12] };
        let a = constraint_scores(&m, &batch, &CompositeLossConfig::default().with_lambda(0.1), ElementKind::Neuron).unwrap();
        let b = constraint_scores(&m, &batch, &CompositeLossConfig::default().with_lambda(0.9), ElementKind::Neuron).unwrap();
        assert_eq!(a, b);

        // A network whose outputs are all zero satisfies both identities
        // exactly (zero rates, zero coupling), so C vanishes.
        let z = Mlp::zeros(&[3, 5, 7]).unwrap();
        let c = constraint_scores(&z, &batch, &CompositeLossConfig::default(), ElementKind::Weight).unwrap();
        assert!(c.s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constraint_scores_match_finite_differences() {
        // Perturb each hidden neuron's pre-activation and difference the
        // physics loss.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mlp::new(&[3, 4, 7], &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 1, 3, -1.0, 1.0);
        let y = rand_matrix(&mut rng, 1, 7, 0.0, 1.0);
        let units = crate::physics::OutputUnits {
            offset: vec![0.0, -5.0, -5.0, 0.0, 300.0, -5.0, -3.0],
            scale: vec![5.0, 10.0, 10.0, 5000.0, 400.0, 10.0, 6.0],
        };
        let cfg = CompositeLossConfig { units, r2_scale: 1e-3, ..Default::default() };
        let batch = ScoringBatch { x: &x, y: &y, windows: vec![0..1] };
        let c = constraint_scores(&m, &batch, &cfg, ElementKind::Neuron).unwrap();
        let trace = m.forward(&x).unwrap();
        let z = trace.pre[0].clone();
        let out_layer = Mlp::from_parts(
            vec![m.layers()[1]],
            vec![m.weights()[1].clone()],
            vec![m.biases()[1].clone()],
            None,
        )
        .unwrap();
        let phys = |z: &Matrix| {
            let p = out_layer.predict(&z.map(|v| v.max(0.0))).unwrap();
            let (r1, r2) = crate::physics::physics_residuals(&p, &[0..1], &cfg).unwrap();
            r1 + r2
        };
        let eps = 1e-6;
        for j in 0..4 {
            if z[(0, j)].abs() < 1e-3 {
                continue;
            }
            let mut hp = z.clone();
            hp[(0, j)] += eps;
            let mut hm = z.clone();
            hm[(0, j)] -= eps;
            let fd = ((phys(&hp) - phys(&hm)) / (2.0 * eps)).abs();
            assert!((fd - c.s[j]).abs() <= 1e-5 * fd.max(1e-3), "{j}: fd {fd} vs {}", c.s[j]);
        }
    }

    #[test]
    fn chunked_backward_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Mlp::new(&[3, 5, 7], &mut rng).unwrap();
        let n = SCORE_CHUNK * 2 + 17;
        let x = rand_matrix(&mut rng, n, 3, -1.0, 1.0);
        let dy = rand_matrix(&mut rng, n, 7, -1.0, 1.0);
        let trace = m.forward(&x).unwrap();
        let mut whole = m.backward(&trace, &dy).unwrap();
        for (d, &z) in whole.hidden_outputs[0].as_mut_slice().iter_mut().zip(trace.pre[0].as_slice()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let chunked = chunked_backward(&m, &x, &dy).unwrap();
        assert_eq!(whole.hidden_outputs, chunked.hidden_outputs);
        for (a, b) in whole.weights.iter().zip(&chunked.weights) {
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn masks_only_grow_and_counts_are_exact(seed in 0u64..1000, r1 in 0.0f64..0.6, r2 in 0.0f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mlp::new(&[3, 6, 5, 7], &mut rng).unwrap();
            let x = rand_matrix(&mut rng, 20, 3, -1.0, 1.0);
            let y = rand_matrix(&mut rng, 20, 7, 0.0, 1.0);
            let batch = ScoringBatch { x: &x, y: &y, windows: vec![0..20] };
            let cfg = CompositeLossConfig::default();
            let s = importance_scores(&m, &batch, &cfg, ElementKind::Weight).unwrap();
            let sel = select_prunable(&s, r1);
            prop_assert_eq!(sel.len(), prune_count(m.weight_count(), r1));
            let p1 = apply_prune(&m, &sel, ElementKind::Weight).unwrap();
            let s2 = importance_scores(&p1, &batch, &cfg, ElementKind::Weight).unwrap();
            prop_assert_eq!(s2.len(), p1.active_weight_count());
            let sel2 = select_prunable(&s2, r2);
            let p2 = apply_prune(&p1, &sel2, ElementKind::Weight).unwrap();
            let m1 = p1.masks().unwrap();
            let m2 = p2.masks().unwrap();
            for (a, b) in m1.iter().zip(m2) {
                for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert!(!(*u == 0.0 && *v != 0.0));
                }
            }
            prop_assert_eq!(p2.active_weight_count(), p1.active_weight_count() - sel2.len());
        }

        #[test]
        fn neuron_pruning_keeps_network_sound(seed in 0u64..1000, ratio in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mlp::new(&[3, 6, 5, 7], &mut rng).unwrap();
            let x = rand_matrix(&mut rng, 20, 3, -1.0, 1.0);
            let y = rand_matrix(&mut rng, 20, 7, 0.0, 1.0);
            let batch = ScoringBatch { x: &x, y: &y, windows: vec![0..20] };
            let s = importance_scores(&m, &batch, &CompositeLossConfig::default(), ElementKind::Neuron).unwrap();
            prop_assert_eq!(s.len(), 11);
            prop_assert!(s.s.iter().all(|v| v.is_finite() && *v >= 0.0));
            let sel = select_prunable(&s, ratio);
            match apply_prune(&m, &sel, ElementKind::Neuron) {
                Ok(p) => {
                    prop_assert_eq!(p.hidden_neuron_count(), 11 - sel.len());
                    let out = p.predict(&x).unwrap();
                    prop_assert_eq!(out.shape(), (20, 7));
                    prop_assert!(out.is_finite());
                }
                Err(e) => prop_assert!(matches!(e, Error::Pruning(_))),
            }
        }
    }
}
