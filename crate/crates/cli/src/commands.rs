use std::path::{Path, PathBuf};

use microcast_core::checkpoint::{self, CheckpointMeta};
use microcast_core::data::{
    find_station, write_observations_csv, write_stations_csv, write_world_json, Scenario, StationSeries,
};
use microcast_core::eval::{
    self, fit_ar_baseline, learning_curve, run_comparison, summarize, ComparisonSpec, CurveSpec, EvalInputs,
    ModelKind, Provenance, ReportDocument, ScenarioData, TOOL_VERSION,
};
use microcast_core::synth::{build_world, WorldSpec};
use microcast_core::time::{format_hour, parse_hour};
use microcast_core::train::{train_backbone, train_transform, Phase, TrainConfig};
use microcast_core::transform::ZeroShotModel;

use crate::config::ExperimentConfig;
use crate::{CliError, Common, EvalArgs, ForecastArgs, GenArgs, TrainArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Contract(format!("{}: {e}", path.display()))
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    if a.stations < 2 {
        return Err(CliError::Usage(format!("--stations must be at least 2, got {}", a.stations)));
    }
    if !(a.years > 0.0) {
        return Err(CliError::Usage(format!("--years must be positive, got {}", a.years)));
    }
    let spec = WorldSpec {
        kappa: a.kappa,
        sigma: a.sigma,
        sigma_f: a.sigma_f,
        ..WorldSpec::years(a.stations, a.years, a.seed)
    };
    let (world, series) = build_world(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_observations_csv(&a.out.join("observations.csv"), &series)?;
    write_stations_csv(&a.out.join("stations.csv"), &world.metas())?;
    write_world_json(&a.out.join("world.json"), &world)?;
    println!("wrote {} stations × {} hours to {}", spec.n_stations, spec.n_hours, a.out.display());
    Ok(())
}

fn parse_synthetic(text: &str) -> Result<WorldSpec, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("--synthetic expects `stations,years,seed`, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n = parts[0].parse().map_err(|_| bad())?;
    let years: f64 = parts[1].parse().map_err(|_| bad())?;
    let seed = parts[2].parse().map_err(|_| bad())?;
    Ok(WorldSpec::years(n, years, seed))
}

/// Config file, then flags, then the data-dependent fill-ins.
fn load(common: &Common) -> Result<(ExperimentConfig, Vec<StationSeries>), CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data.dir = Some(d.clone());
        cfg.data.synthetic = None;
    }
    if let Some(s) = &common.synthetic {
        cfg.data.synthetic = Some(parse_synthetic(s)?);
        cfg.data.dir = None;
    }
    if let Some(t) = &common.target {
        cfg.target = Some(t.clone());
    }
    let stations = cfg.load_stations()?;
    cfg.resolve(&stations)?;
    Ok((cfg, stations))
}

fn scenario_data(cfg: &ExperimentConfig, stations: &[StationSeries], scenario: Scenario) -> Result<ScenarioData, CliError> {
    Ok(ScenarioData::new(stations, cfg.target(), &cfg.train_stations, scenario, &cfg.split)?)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let (cfg, stations) = load(&a.common)?;
    let scenario: Scenario = a.scenario.parse()?;
    let phase: Phase = a.phase.parse()?;
    let seed = a.seed.or(cfg.seeds.first().copied()).unwrap_or(1);
    let digest = cfg.training_digest()?;
    let data = scenario_data(&cfg, &stations, scenario)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));

    let (model, log, meta) = match phase {
        Phase::Backbone => {
            let normalizer = microcast_core::data::fit_normalizer(&stations, &data.split, cfg.model().lx, cfg.model().ly)?;
            let ids = data.split.train_stations.iter().map(|&i| stations[i].id().to_string()).collect();
            let mut model = ZeroShotModel::init(cfg.model().clone(), normalizer, ids, seed)?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let log = train_backbone(&mut model, &stations, &data.split, &tc)?;
            let meta = CheckpointMeta {
                config_digest: digest.clone(),
                tool_version: TOOL_VERSION.into(),
                scenario,
                target_id: cfg.target().into(),
                seed,
                phase,
                backbone_digest: String::new(),
                transform_digest: String::new(),
            };
            (model, log, meta)
        }
        Phase::Transform => {
            let path = a.backbone.as_ref().ok_or_else(|| {
                CliError::Usage("phase transform needs --backbone <checkpoint> from a backbone run".into())
            })?;
            if !path.exists() {
                return Err(CliError::Contract(format!("backbone checkpoint {} not found", path.display())));
            }
            let (mut model, meta) = checkpoint::load(path)?;
            if meta.config_digest != digest {
                return Err(CliError::Contract(format!(
                    "backbone checkpoint was trained under config {} but this run is {digest}; \
                     rerun phase backbone with the same config",
                    meta.config_digest
                )));
            }
            if meta.scenario != scenario || meta.target_id != cfg.target() {
                return Err(CliError::Contract(format!(
                    "backbone checkpoint is for {} / {}, not {} / {}",
                    meta.scenario.as_str(),
                    meta.target_id,
                    scenario.as_str(),
                    cfg.target()
                )));
            }
            let before = model.backbone_digest();
            let tc = TrainConfig { seed: meta.seed, ..cfg.phase2() };
            let log = train_transform(&mut model, &stations, &data.split, &tc)?;
            if model.backbone_digest() != before {
                return Err(CliError::Contract("backbone parameters changed during phase 2".into()));
            }
            (model, log, CheckpointMeta { phase, ..meta })
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let meta = checkpoint::save(&a.out, &model, &meta)?;
    log.write_jsonl(&log_path, &digest)?;
    println!(
        "{} phase: best epoch {} (val {:.6}), stop {:?}; backbone {} → {}",
        phase.as_str(),
        log.best_epoch,
        log.best_val_loss,
        log.stop_reason,
        meta.backbone_digest,
        a.out.display()
    );
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("--seeds expects a count or a list, got `{text}`"));
    if text.contains(',') {
        return text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = text.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    Ok((1..=n).collect())
}

fn parse_counts(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--curve expects counts like 2,4,6,8, got `{text}`")))
        })
        .collect()
}

fn parse_scenarios(text: &str) -> Result<Vec<Scenario>, CliError> {
    if text == "both" {
        return Ok(vec![Scenario::FullData, Scenario::ZeroShot]);
    }
    Ok(vec![text.parse()?])
}

fn notes(cfg: &ExperimentConfig) -> Vec<String> {
    let mut n = vec![
        "zero_shot backbone merges source embeddings with equal weights; the target enters only as decoder warm start".to_string(),
        "zero_shot ar is fitted on the training station nearest the target".to_string(),
    ];
    if cfg.seeds.len() < 10 {
        n.push(format!("{} seeds per learned model (reduced for desk scale)", cfg.seeds.len()));
    }
    n
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let (mut cfg, stations) = load(&a.common)?;
    if let Some(m) = &a.models {
        cfg.models = ModelKind::parse_list(m)?;
    }
    if let Some(s) = &a.scenario {
        cfg.scenarios = parse_scenarios(s)?;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(c) = &a.curve {
        cfg.curve = parse_counts(c)?;
    }
    if let Some(o) = &a.out {
        cfg.output = o.clone();
    }
    if cfg.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let digest = cfg.digest()?;
    let prov = Provenance::new(&digest);
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let config_json = serde_json::to_value(&cfg).map_err(microcast_core::error::Error::from)?;

    if !cfg.curve.is_empty() {
        let spec = CurveSpec {
            target: cfg.target().into(),
            pool: cfg.train_stations.clone(),
            counts: cfg.curve.clone(),
            seeds: cfg.seeds.clone(),
            split: cfg.split.clone(),
            model: cfg.model().clone(),
            train: cfg.train.clone(),
            transform_train: cfg.phase2(),
        };
        let points = learning_curve(&stations, &spec, cfg.jobs, &digest)?;
        eval::write_curve_csv(&out.join("curve.csv"), &points, &prov)?;
        for p in &points {
            println!(
                "k={:<2} mse {:.4} ± {:.4} over {} seeds",
                p.n_train_stations, p.mean_mse, p.std_mse, p.n_seeds
            );
        }
        let doc = ReportDocument {
            provenance: prov.clone(),
            config: config_json,
            notes: notes(&cfg),
            reports: Vec::new(),
            summary: Vec::new(),
            curve: points,
        };
        eval::write_report_json(&out.join("report.json"), &doc)?;
        return Ok(());
    }

    let (reports, traces) = match &a.checkpoint {
        None => {
            let spec = ComparisonSpec {
                target: cfg.target().into(),
                train_ids: cfg.train_stations.clone(),
                scenarios: cfg.scenarios.clone(),
                models: cfg.models.clone(),
                seeds: cfg.seeds.clone(),
                split: cfg.split.clone(),
                model: cfg.model().clone(),
                train: cfg.train.clone(),
                transform_train: cfg.phase2(),
                baselines: cfg.baselines.clone(),
            };
            let cmp = run_comparison(&stations, &spec, cfg.jobs, &digest)?;
            let logs = out.join("logs");
            std::fs::create_dir_all(&logs).map_err(|e| io_err(&logs, e))?;
            for c in &cmp.cells {
                let stem = format!("{}-seed{}", c.scenario.as_str(), c.seed);
                c.backbone_log.write_jsonl(&logs.join(format!("{stem}-backbone.jsonl")), &digest)?;
                if let Some(t) = &c.transform_log {
                    t.write_jsonl(&logs.join(format!("{stem}-transform.jsonl")), &digest)?;
                }
            }
            (cmp.reports, cmp.traces)
        }
        Some(path) => eval_checkpoint(&cfg, &stations, path, &digest)?,
    };
    let summary = summarize(&reports);
    eval::write_report_csv(&out.join("report.csv"), &reports, &summary, &prov)?;
    eval::write_trace_csv(&out.join("trace.csv"), &traces, &prov)?;
    let doc = ReportDocument {
        provenance: prov,
        config: config_json,
        notes: notes(&cfg),
        reports,
        summary: summary.clone(),
        curve: Vec::new(),
    };
    eval::write_report_json(&out.join("report.json"), &doc)?;
    println!("{:<10} {:<20} {:>6} {:>12} {:>10}", "scenario", "model", "seeds", "mse", "std");
    for s in &summary {
        let std = s.mse_std.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<10} {:<20} {:>6} {:>12.4} {:>10}",
            s.scenario.as_str(),
            s.model,
            s.n_seeds,
            s.mse_mean,
            std
        );
    }
    println!("reports in {}", out.display());
    Ok(())
}

/// Baselines on the checkpoint's scenario plus the checkpoint's learned rows.
fn eval_checkpoint(
    cfg: &ExperimentConfig,
    stations: &[StationSeries],
    path: &PathBuf,
    digest: &str,
) -> Result<(Vec<eval::EvalReport>, Vec<eval::TraceRow>), CliError> {
    let (model, meta) = checkpoint::load(path)?;
    if meta.config_digest != cfg.training_digest()? {
        return Err(CliError::Contract(format!(
            "checkpoint {} was trained under a different config ({})",
            path.display(),
            meta.config_digest
        )));
    }
    let data = ScenarioData::new(stations, &meta.target_id, &model_train_ids(&model, &meta), meta.scenario, &cfg.split)?;
    let learned: Vec<ModelKind> = cfg
        .models
        .iter()
        .copied()
        .filter(|m| m.is_learned())
        .filter(|m| *m != ModelKind::Transform || meta.phase == Phase::Transform)
        .collect();
    let fixed: Vec<ModelKind> = cfg.models.iter().copied().filter(|m| !m.is_learned()).collect();
    let ar = if fixed.contains(&ModelKind::Ar) {
        Some(fit_ar_baseline(stations, &data, &cfg.baselines)?)
    } else {
        None
    };
    let inputs = EvalInputs {
        stations,
        data: &data,
        baselines: &cfg.baselines,
        lx: cfg.split.lx,
        ly: cfg.split.ly,
        ar: ar.as_ref(),
        learned: Some(&model),
    };
    let (mut reports, mut traces) = inputs.evaluate(&fixed, None, digest, true)?;
    let (r, t) = inputs.evaluate(&learned, Some(meta.seed), digest, true)?;
    reports.extend(r);
    traces.extend(t);
    Ok((reports, traces))
}

fn model_train_ids(model: &ZeroShotModel, meta: &CheckpointMeta) -> Vec<String> {
    model
        .source_ids
        .iter()
        .filter(|id| meta.scenario == Scenario::FullData || **id != meta.target_id)
        .cloned()
        .collect()
}

pub fn forecast(a: ForecastArgs) -> Result<(), CliError> {
    let (cfg, stations) = load(&a.common)?;
    let (model, meta) = checkpoint::load(&a.checkpoint)?;
    let kind: ModelKind = a.model.parse()?;
    if kind == ModelKind::Transform && meta.phase != Phase::Transform {
        return Err(CliError::Contract(format!(
            "{} holds only a backbone; train phase transform first",
            a.checkpoint.display()
        )));
    }
    let station = a.station.clone().unwrap_or_else(|| meta.target_id.clone());
    let (_, series) = find_station(&stations, &station)?;
    let ly = cfg.split.ly as i64;
    let end = series.end_hour();
    let from = match &a.from {
        Some(t) => parse_hour(t).map_err(CliError::Usage)?,
        None => end - 14 * 24,
    };
    let to = match &a.to {
        Some(t) => parse_hour(t).map_err(CliError::Usage)?,
        None => from + 14 * 24,
    };
    if to <= from {
        return Err(CliError::Usage("--to must come after --from".into()));
    }
    let train_ids: Vec<String> = model
        .source_ids
        .iter()
        .filter(|id| **id != station)
        .cloned()
        .collect();
    let data = ScenarioData::new(&stations, &station, &train_ids, Scenario::ZeroShot, &cfg.split)?;
    let mut anchors = Vec::new();
    let mut t = from - 1;
    while t + 1 < to {
        anchors.push(t);
        t += ly;
    }
    if anchors.iter().any(|&t| !data.covers(&stations, t, cfg.split.lx, cfg.split.ly)) {
        return Err(CliError::Usage(format!(
            "span {} .. {} is outside the data available for {station} and its sources",
            format_hour(from),
            format_hour(to)
        )));
    }
    let inputs = EvalInputs {
        stations: &stations,
        data: &data,
        baselines: &cfg.baselines,
        lx: cfg.split.lx,
        ly: cfg.split.ly,
        ar: None,
        learned: Some(&model),
    };
    let rows: Vec<_> = inputs
        .trace(kind, &anchors)?
        .into_iter()
        .filter(|r| parse_hour(&r.timestamp).is_ok_and(|h| h < to))
        .collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    eval::write_trace_csv(&a.out, &rows, &Provenance::new(&meta.config_digest))?;
    println!("{} hourly rows for {station} → {}", rows.len(), a.out.display());
    Ok(())
}
