use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;

use shapectl::config::AppConfig;
use shapectl::controller::{ControllerKind, DisplacementModel};
use shapectl::harness::{
    export_gate_heatmap, gating_trajectory, report_text, run_benchmark, write_plots, write_report_csv, write_run_csv,
    Difficulty,
};
use shapectl::nn::SpatioCoupledNet;
use shapectl::planner::{avoidance_session, summarize, write_session_csv, ObstacleTrace};
use shapectl::{pipeline, validate, Error, Result};
use shapectl_live::{replay, serve, Recording, ServeOptions, SessionSpec};

use crate::{AvoidArgs, Cli, Command, ServeArgs, TrackArgs};

/// Cycles per gating-trajectory phase.
const GATE_PHASE_STEPS: usize = 100;

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train => train(&cfg),
        Command::Track(a) => track(&cfg, a),
        Command::Bench => bench(&cfg),
        Command::Avoid(a) => avoid(&cfg, a),
        Command::Gates => gates(&cfg),
        Command::Serve(a) => serve_cmd(&cfg, a),
        Command::Validate => validate_cmd(&cfg),
    }
}

fn load(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = AppConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seeds.master = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.root = out.clone();
    }
    Ok(cfg)
}

fn controller(name: &str) -> Result<ControllerKind> {
    ControllerKind::from_str(name).map_err(|e| Error::Usage(e.to_string()))
}

fn model_for(cfg: &AppConfig, kind: ControllerKind) -> Result<Option<SpatioCoupledNet>> {
    if kind.needs_model() {
        pipeline::load_model(cfg).map(Some)
    } else {
        Ok(None)
    }
}

fn as_model(m: &Option<SpatioCoupledNet>) -> Option<&dyn DisplacementModel> {
    m.as_ref().map(|m| m as &dyn DisplacementModel)
}

/// `<reports>/<stem>-<model hash>-s<seed>`, with the report directory created.
fn report_stem(cfg: &AppConfig, stem: &str) -> Result<PathBuf> {
    let dir = cfg.paths.report_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir.join(format!("{stem}-{}-s{}", cfg.model_key(), cfg.seeds.master)))
}

fn report_path(cfg: &AppConfig, stem: &str, ext: &str) -> Result<PathBuf> {
    Ok(report_stem(cfg, stem)?.with_extension(ext))
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn gen_data(cfg: &AppConfig) -> Result<()> {
    let (path, data) = pipeline::generate(cfg)?;
    emit(json!({ "dataset": path, "samples": data.len() }));
    Ok(())
}

fn train(cfg: &AppConfig) -> Result<()> {
    let data = pipeline::dataset(cfg)?;
    let (path, out) = pipeline::train_model(cfg, &data)?;
    let best = &out.log[out.best_epoch];
    emit(json!({
        "checkpoint": path,
        "log": cfg.training_log_path(),
        "best_epoch": out.best_epoch,
        "val_loss": best.val_loss,
        "mean_beta": [best.mean_beta_x, best.mean_beta_y, best.mean_beta_theta],
    }));
    Ok(())
}

fn track(cfg: &AppConfig, args: &TrackArgs) -> Result<()> {
    let kind = controller(&args.controller)?;
    let difficulty = Difficulty::parse(&args.difficulty).map_err(|e| Error::Usage(e.to_string()))?;
    let model = model_for(cfg, kind)?;
    let result = run_benchmark(
        &[kind],
        &[difficulty],
        &[cfg.seeds.master],
        as_model(&model),
        &cfg.controller,
        &cfg.geometry,
        &cfg.disturbance,
        &cfg.tracking,
    )?;
    let row = &result.rows[0];
    let path = report_path(cfg, &format!("track-{}-{}", kind.name().to_lowercase(), difficulty.name().to_lowercase()), "csv")?;
    write_run_csv(&result.logs[0].3, &path)?;
    emit(json!({
        "controller": kind.name(),
        "difficulty": difficulty.name(),
        "e_mean_mm": row.e_mean,
        "t95_steps": row.t95,
        "chatter_mm": row.chatter,
        "cost_mm": row.cost,
        "faults": row.faults,
        "run": path,
    }));
    Ok(())
}

fn bench(cfg: &AppConfig) -> Result<()> {
    let model = pipeline::load_model(cfg)?;
    let result = run_benchmark(
        &ControllerKind::ALL,
        &Difficulty::ALL,
        &cfg.seeds.eval,
        Some(&model),
        &cfg.controller,
        &cfg.geometry,
        &cfg.disturbance,
        &cfg.tracking,
    )?;
    let csv = report_path(cfg, "bench", "csv")?;
    write_report_csv(&result.rows, &csv)?;
    let plot_dir = csv.with_extension("plots");
    let plots = write_plots(&result, &plot_dir)?;
    print!("{}", report_text(&result.rows));
    emit(json!({ "report": csv, "plots": plots }));
    Ok(())
}

fn default_duration(trace: &ObstacleTrace) -> f64 {
    trace.rows.last().map_or(0.0, |r| r.t).max(1.0)
}

fn load_trace(path: Option<&Path>) -> Result<ObstacleTrace> {
    match path {
        Some(p) => ObstacleTrace::read_csv(p),
        None => Ok(ObstacleTrace::scripted_sweep()),
    }
}

fn avoid(cfg: &AppConfig, args: &AvoidArgs) -> Result<()> {
    let kind = controller(&args.controller)?;
    let trace = load_trace(args.trace.as_deref())?;
    let duration = args.duration.unwrap_or_else(|| default_duration(&trace));
    if !(duration > 0.0) {
        return Err(Error::Usage("--duration must be positive".into()));
    }
    let model = model_for(cfg, kind)?;
    let log = avoidance_session(
        kind,
        as_model(&model),
        &cfg.controller,
        &cfg.planner,
        &cfg.geometry,
        &cfg.disturbance,
        &trace,
        duration,
    )?;
    let summary = summarize(&log)?;
    let path = report_path(cfg, &format!("avoid-{}", kind.name().to_lowercase()), "csv")?;
    write_session_csv(&log, &path)?;
    emit(json!({
        "controller": kind.name(),
        "steps": log.len(),
        "mean_tip_error_mm": summary.mean_tip_error,
        "final_tip_error_mm": summary.final_tip_error,
        "min_clearance_mm": summary.min_clearance,
        "infeasible_plans": summary.infeasible_plans,
        "faults": log.iter().filter(|s| s.fault.is_some()).count(),
        "session": path,
    }));
    Ok(())
}

fn gates(cfg: &AppConfig) -> Result<()> {
    let model = pipeline::load_model(cfg)?;
    let (log, split) = gating_trajectory(
        &model,
        &cfg.controller,
        &cfg.geometry,
        &cfg.disturbance,
        cfg.seeds.master,
        GATE_PHASE_STEPS,
    )?;
    let dir = report_stem(cfg, "gates")?;
    let files = export_gate_heatmap(&log, &dir)?;
    let split_path = dir.join("split.json");
    std::fs::write(&split_path, serde_json::to_string_pretty(&split)?)?;
    emit(json!({
        "near_neutral_beta": split.near_neutral,
        "smooth_beta": split.smooth,
        "near_neutral_samples": split.n_near_neutral,
        "smooth_samples": split.n_smooth,
        "files": [files[0], files[1], files[2], split_path],
    }));
    Ok(())
}

fn serve_cmd(cfg: &AppConfig, args: &ServeArgs) -> Result<()> {
    let kind = controller(&args.controller)?;
    let script = match &args.trace {
        Some(p) => Some(ObstacleTrace::read_csv(p)?),
        None => None,
    };
    let spec = SessionSpec {
        kind,
        model: model_for(cfg, kind)?,
        controller: cfg.controller.clone(),
        planner: cfg.planner.clone(),
        geometry: cfg.geometry.clone(),
        disturbance: cfg.disturbance.clone(),
        script,
        tick_hz: cfg.serve.tick_hz,
        broadcast_hz: cfg.serve.broadcast_hz,
        autostart: !args.paused,
    };
    if let Some(path) = &args.replay {
        let recorded = Recording::read(path)?;
        let mut host = spec.build_host()?;
        let again = replay(&mut host, &recorded)?;
        let identical = again.entries == recorded.entries;
        emit(json!({ "replayed": recorded.entries.len(), "ticks": host.tick_index(), "identical": identical }));
        return if identical {
            Ok(())
        } else {
            Err(Error::Internal(format!("replay of {} diverged from the recording", path.display())))
        };
    }
    let port = args.port.unwrap_or(cfg.serve.port);
    let addr = format!("{}:{port}", args.host)
        .parse()
        .map_err(|e| Error::Usage(format!("bad address {}:{port}: {e}", args.host)))?;
    let handle = serve(
        spec,
        ServeOptions { addr, max_ticks: args.max_ticks, realtime: true, record: args.record.clone() },
    )?;
    emit(json!({ "event": "listening", "addr": handle.addr.to_string() }));
    let stats = handle.join()?;
    emit(json!({ "event": "stopped", "ticks": stats.ticks, "overruns": stats.overruns, "clients": stats.clients }));
    Ok(())
}

fn validate_cmd(cfg: &AppConfig) -> Result<()> {
    let reports = validate::run_all(cfg.seeds.master)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Internal(format!("invariant suites failed: {}", failed.join(", "))))
    }
}
