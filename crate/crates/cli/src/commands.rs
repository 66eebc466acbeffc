//! One function per subcommand. Each returns the paths it wrote.
//!
//! Every stage draws its randomness from the run seed: synthetic data uses
//! it directly, training seeds both the initial weights and the batch order
//! with it, fine-tuning after pruning reuses it for batch order, and the
//! noise sweep derives one stream per level from it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pgnn::dataset::{derive_targets, ingest_csv, interpolate_gaps, loss_config_for, write_csv, PreparedData, SupervisedSet};
use pgnn::eval::{compare_variants, run_variant, variant_tables, Variant, VariantResult};
use pgnn::model_io::{self, ModelBundle, ModelMeta};
use pgnn::nn::{train, Mlp};
use pgnn::pruning::{prune_pipeline, ElementKind, Scheme};
use pgnn::search::{grid_search_alpha, grid_search_lambda, GridParameter, GridSpec};
use pgnn::synth::generate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ConfigError, InputError, RunConfig};

pub const MODEL_FILE: &str = "model.pgnn";

fn write_text(path: PathBuf, body: &str) -> Result<PathBuf> {
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json<T: serde::Serialize>(path: PathBuf, value: &T) -> Result<PathBuf> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_text(path, &body)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(InputError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

fn load_prepared(cfg: &RunConfig) -> Result<PreparedData> {
    let dir = cfg.supervised_dir()?;
    require_file(dir, "supervised data directory")?;
    let set = SupervisedSet::load(dir)?;
    Ok(PreparedData::new(&set, &cfg.data.split)?)
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    require_file(path, "model file")?;
    Ok(model_io::load(path)?)
}

/// The model must have been fitted on the same training rows.
fn check_same_data(bundle: &ModelBundle, data: &PreparedData, path: &Path) -> Result<()> {
    if bundle.feature_scaler != data.feature_scaler || bundle.target_scaler != data.target_scaler {
        return Err(InputError(format!(
            "{} was fitted on different training data than data.supervised with this split",
            path.display()
        ))
        .into());
    }
    Ok(())
}

/// Label from the run file, or the one implied by the model's provenance.
pub fn variant_for(label: Option<Variant>, meta: &ModelMeta) -> Variant {
    if let Some(v) = label {
        return v;
    }
    let pg_model = meta.lambda != 0.0;
    let kind = meta.prune_kind.as_deref();
    match (meta.prune_scheme.as_deref(), pg_model) {
        (None, false) => Variant::StdOffline,
        (None, true) => Variant::PgnnOffline,
        (Some(_), false) if kind == Some("weight") => Variant::StdStdWeight,
        (Some(_), false) => Variant::StdStdNeuron,
        (Some("physics-guided"), true) if kind == Some("weight") => Variant::PgnnPgWeight,
        (Some("physics-guided"), true) => Variant::PgnnPgNeuron,
        (Some(_), true) if kind == Some("weight") => Variant::PgnnStdWeight,
        (Some(_), true) => Variant::PgnnStdNeuron,
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let sc = cfg.synth_config();
    log::info!("generating {} minutes with seed {}", sc.n_minutes, sc.seed);
    let series = generate(&sc)?;
    let schema = cfg.schema()?;
    let raw = out.join("raw.csv");
    write_csv(&series, &raw, &schema)?;
    let schema_path = write_text(out.join("schema.toml"), &schema.to_toml())?;
    Ok(vec![raw, schema_path])
}

pub fn ingest(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let raw = cfg.raw_path()?;
    require_file(raw, "raw data file")?;
    let series = ingest_csv(raw, &cfg.schema()?)?;
    let (clean, report) = interpolate_gaps(&series)?;
    log::info!(
        "{} rows, {} gap cells ({:.3}%), {} rows trimmed",
        report.rows,
        report.gap_cells,
        100.0 * report.fraction,
        report.trimmed_rows
    );
    let set = derive_targets(&clean)?;
    let mut paths = set.save(&out.join("supervised"))?;
    paths.push(write_json(out.join("gap_report.json"), &report)?);
    Ok(paths)
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = load_prepared(cfg)?;
    let tc = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Mlp::new(&cfg.model.architecture, &mut rng)?;
    let loss = data.loss_config(cfg.train.lambda);
    log::info!(
        "training {:?} for {} epochs with lambda {}",
        cfg.model.architecture,
        tc.epochs,
        cfg.train.lambda
    );
    let (model, log) = train(&init, &data.train, Some(&data.val), &loss, &tc)?;
    let bundle = ModelBundle {
        model,
        feature_scaler: data.feature_scaler.clone(),
        target_scaler: data.target_scaler.clone(),
        layout: data.layout(),
        meta: ModelMeta {
            seed: cfg.seed,
            lambda: cfg.train.lambda,
            ..Default::default()
        },
    };
    let model_path = out.join(MODEL_FILE);
    model_io::save(&bundle, &model_path)?;
    let log_path = write_text(out.join("training_log.csv"), &log.to_csv())?;
    Ok(vec![model_path, log_path])
}

pub fn search(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = load_prepared(cfg)?;
    let tc = cfg.train_config();
    let grid = cfg
        .search
        .clone()
        .unwrap_or_else(|| GridSpec::default_for(GridParameter::Lambda));
    log::info!("searching {} over {} candidates", grid.parameter, grid.values.len());
    let result = match grid.parameter {
        GridParameter::Lambda => grid_search_lambda(&data, &cfg.model.architecture, &grid, &tc)?,
        GridParameter::Alpha => {
            let p = cfg.prune_section()?;
            if p.scheme != Scheme::PhysicsGuided {
                return Err(ConfigError("alpha search needs prune.scheme = \"physics-guided\"".into()).into());
            }
            let base = load_model(&p.base_model)?;
            check_same_data(&base, &data, &p.base_model)?;
            let loss = data.loss_config(base.meta.lambda);
            grid_search_alpha(&base.model, &data, &loss, &tc, &grid, &p.prune_config())?
        }
    };
    log::info!("best {} = {} (validation NRMSE {})", grid.parameter, result.best, result.best_score);
    let name = grid.parameter.to_string();
    Ok(vec![
        write_text(out.join(format!("search_{name}.csv")), &result.to_csv())?,
        write_json(
            out.join(format!("search_{name}.json")),
            &json!({ "parameter": name, "best": result.best, "best_score": result.best_score }),
        )?,
    ])
}

pub fn prune(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let p = cfg.prune_section()?;
    let data = load_prepared(cfg)?;
    let base = load_model(&p.base_model)?;
    check_same_data(&base, &data, &p.base_model)?;
    let loss = data.loss_config(base.meta.lambda);
    let pc = p.prune_config();
    log::info!(
        "{} {} pruning at ratio {} (alpha {})",
        match p.scheme {
            Scheme::Standard => "standard",
            Scheme::PhysicsGuided => "physics-guided",
        },
        p.kind,
        pc.ratio,
        pc.alpha
    );
    let (model, report) = prune_pipeline(&base.model, &data, &loss, &cfg.train_config(), &pc, p.scheme)?;
    let meta = ModelMeta {
        seed: cfg.seed,
        lambda: base.meta.lambda,
        prune_scheme: Some(
            match p.scheme {
                Scheme::Standard => "standard",
                Scheme::PhysicsGuided => "physics-guided",
            }
            .to_string(),
        ),
        prune_kind: Some(
            match p.kind {
                ElementKind::Neuron => "neuron",
                ElementKind::Weight => "weight",
            }
            .to_string(),
        ),
        ratio: Some(pc.ratio),
        alpha: Some(if p.scheme == Scheme::PhysicsGuided { pc.alpha } else { 0.0 }),
        extra: Default::default(),
    };
    let bundle = ModelBundle {
        model,
        meta,
        ..base
    };
    let model_path = out.join(MODEL_FILE);
    model_io::save(&bundle, &model_path)?;
    Ok(vec![
        model_path,
        write_text(out.join("prune_report.csv"), &report.summary_csv())?,
        write_text(out.join("prune_scores.csv"), &report.scores.to_csv())?,
    ])
}

fn evaluate_run(cfg: &RunConfig, model_path: &Path, data: &PreparedData) -> Result<VariantResult> {
    let bundle = load_model(model_path)?;
    check_same_data(&bundle, data, model_path)?;
    let label = variant_for(cfg.label, &bundle.meta);
    let loss = loss_config_for(&bundle.target_scaler, bundle.layout, bundle.meta.lambda);
    let r = run_variant(&bundle.model, &data.test, &bundle.target_scaler, &loss, &cfg.noise_sweep(), label)?;
    log::info!(
        "{label}: test dB_H/dt NRMSE {:.4}, scaled R1+R2 {:.4}",
        r.report.dbh_nrmse(&bundle.layout),
        r.report.physics_residual()
    );
    Ok(r)
}

fn observed(data: &PreparedData) -> Result<Vec<f64>> {
    let phys = data.target_scaler.inverse_transform(&data.test.y)?;
    Ok(phys.column(data.layout().dbh_dt))
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = load_prepared(cfg)?;
    let r = evaluate_run(cfg, &out.join(MODEL_FILE), &data)?;
    let tables = variant_tables(&[r], &data.test.timestamps, &observed(&data)?, &data.layout())?;
    Ok(tables.write(out)?)
}

/// Evaluates the model of every run on the test rows of the first run.
pub fn compare(cfgs: &[(PathBuf, RunConfig)], out: &Path) -> Result<Vec<PathBuf>> {
    let (_, first) = &cfgs[0];
    let data = load_prepared(first)?;
    let mut results = Vec::with_capacity(cfgs.len());
    for (path, cfg) in cfgs {
        let dir = cfg.out_dir.as_deref().ok_or_else(|| {
            ConfigError(format!("{} needs out_dir so compare can find its model", path.display()))
        })?;
        results.push(evaluate_run(cfg, &dir.join(MODEL_FILE), &data)?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &results {
        if !seen.insert(r.report.label) {
            return Err(ConfigError(format!("variant {} appears more than once", r.report.label)).into());
        }
    }
    let tables = compare_variants(&results, &data.test.timestamps, &observed(&data)?, &data.layout())?;
    Ok(tables.write(out)?)
}

/// Plain JSON rendering of a model file for downstream inference code.
pub fn export(out: &Path) -> Result<Vec<PathBuf>> {
    let bundle = load_model(&out.join(MODEL_FILE))?;
    let m = &bundle.model;
    let layers: Vec<_> = m
        .layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let w = &m.weights()[l];
            let rows: Vec<Vec<f64>> = (0..w.rows()).map(|r| w.row(r).to_vec()).collect();
            let mask = m.masks().map(|ms| {
                let mk = &ms[l];
                (0..mk.rows())
                    .map(|r| mk.row(r).iter().map(|&v| v != 0.0).collect::<Vec<bool>>())
                    .collect::<Vec<_>>()
            });
            json!({
                "input_dim": spec.input_dim,
                "output_dim": spec.output_dim,
                "activation": spec.activation,
                "weights": rows,
                "biases": m.biases()[l],
                "mask": mask,
            })
        })
        .collect();
    let doc = json!({
        "format": "pgnn-model-json",
        "version": 1,
        "layers": layers,
        "feature_scaler": { "min": bundle.feature_scaler.min, "max": bundle.feature_scaler.max },
        "target_scaler": { "min": bundle.target_scaler.min, "max": bundle.target_scaler.max },
        "layout": bundle.layout,
        "meta": bundle.meta,
    });
    Ok(vec![write_json(out.join("model.json"), &doc)?])
}
