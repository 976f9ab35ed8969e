use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use shapectl::config::AppConfig;
use shapectl::controller::ControllerKind;
use shapectl::harness::{gating_trajectory, run_benchmark, BenchRow, Difficulty};
use shapectl::kinematics::RobotGeometry;
use shapectl::nn::SpatioCoupledNet;
use shapectl::planner::{avoidance_session, summarize, ObstacleTrace};
use shapectl::validate::{exactness_suite, gradient_suite, jacobian_suite, metrics_suite, reduction_suite, SuiteReport};
use shapectl::{pipeline, Result};

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn suite(name: &'static str, limit: Duration, f: impl FnOnce() -> Result<SuiteReport>) -> Line {
    let (r, took) = timed(f);
    match r {
        Ok(rep) => Line {
            name,
            passed: rep.passed && took < limit,
            detail: format!("{} worst={:.3e} in {:.1}s (limit {}s)", rep.detail, rep.worst, took.as_secs_f64(), limit.as_secs()),
        },
        Err(e) => Line { name, passed: false, detail: format!("error: {e}") },
    }
}

fn failed(name: &'static str, e: impl std::fmt::Display) -> Line {
    Line { name, passed: false, detail: format!("error: {e}") }
}

/// The default configuration with artifacts cached under the target directory.
fn config() -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.paths.root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    cfg
}

/// The trained default checkpoint and the wall time it took to produce
/// (data generation plus training), remembered next to the checkpoint.
fn model(cfg: &AppConfig) -> Result<(SpatioCoupledNet, Duration)> {
    let timing = cfg.checkpoint_path().with_extension("seconds");
    if let (Ok(net), Ok(text)) = (pipeline::load_model(cfg), std::fs::read_to_string(&timing)) {
        if let Ok(secs) = text.trim().parse::<f64>() {
            return Ok((net, Duration::from_secs_f64(secs)));
        }
    }
    let _ = std::fs::remove_file(cfg.dataset_path());
    let _ = std::fs::remove_file(cfg.checkpoint_path());
    let t = Instant::now();
    let net = pipeline::ensure_model(cfg)?;
    let took = t.elapsed();
    std::fs::write(&timing, format!("{}\n", took.as_secs_f64()))?;
    Ok((net, took))
}

fn row(rows: &[BenchRow], kind: ControllerKind) -> &BenchRow {
    rows.iter().find(|r| r.controller == kind).expect("row present")
}

fn table_one(cfg: &AppConfig, net: &SpatioCoupledNet, train_time: Duration) -> Line {
    let name = "table-1 extreme";
    let (r, eval_time) = timed(|| {
        run_benchmark(
            &ControllerKind::ALL,
            &[Difficulty::Extreme],
            &cfg.seeds.eval,
            Some(net),
            &cfg.controller,
            &cfg.geometry,
            &cfg.disturbance,
            &cfg.tracking,
        )
    });
    let rows = match r {
        Ok(b) => b.rows,
        Err(e) => return failed(name, e),
    };
    let (phy, nn, hy) = (row(&rows, ControllerKind::Phy), row(&rows, ControllerKind::PureNn), row(&rows, ControllerKind::Hybrid));
    let total = train_time + eval_time;
    let accuracy = hy.e_mean <= 0.7 * phy.e_mean;
    let speed = hy.t95 <= nn.t95;
    let budget = total < Duration::from_secs(30 * 60);
    Line {
        name,
        passed: accuracy && speed && budget,
        detail: format!(
            "e_mean HYBRID {:.3} vs 0.7*PHY {:.3} [{}]; T95 HYBRID {:.1} vs PURE_NN {:.1} [{}]; train+eval {:.0}s [{}]",
            hy.e_mean,
            0.7 * phy.e_mean,
            ok(accuracy),
            hy.t95,
            nn.t95,
            ok(speed),
            total.as_secs_f64(),
            ok(budget)
        ),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn gating(cfg: &AppConfig, net: &SpatioCoupledNet) -> Line {
    let name = "gating state-dependence";
    let mut parts = Vec::new();
    let mut wins = 0;
    for seed in 1..=3u64 {
        match gating_trajectory(net, &cfg.controller, &cfg.geometry, &cfg.disturbance, seed, 100) {
            Ok((_, s)) => {
                if s.near_neutral < s.smooth {
                    wins += 1;
                }
                parts.push(format!("seed {seed}: near {:.3} < smooth {:.3}", s.near_neutral, s.smooth));
            }
            Err(e) => return failed(name, e),
        }
    }
    Line { name, passed: wins == 3, detail: format!("{wins}/3 ({})", parts.join("; ")) }
}

fn avoidance(cfg: &AppConfig, net: &SpatioCoupledNet) -> Line {
    let name = "avoidance session";
    let trace = ObstacleTrace::scripted_sweep();
    let duration = trace.rows.last().map_or(0.0, |r| r.t);
    let (r, took) = timed(|| {
        let log = avoidance_session(
            ControllerKind::Hybrid,
            Some(net),
            &cfg.controller,
            &cfg.planner,
            &cfg.geometry,
            &cfg.disturbance,
            &trace,
            duration,
        )?;
        summarize(&log)
    });
    match r {
        Ok(s) => Line {
            name,
            passed: s.min_clearance > 0.0 && s.mean_tip_error < 15.0 && s.final_tip_error < 3.0 && took < Duration::from_secs(120),
            detail: format!(
                "min clearance {:.2} mm, mean tip error {:.2} mm (< 15), final {:.3} mm (< 3), {:.1}s (limit 120s)",
                s.min_clearance,
                s.mean_tip_error,
                s.final_tip_error,
                took.as_secs_f64()
            ),
        },
        Err(e) => failed(name, e),
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let geo = RobotGeometry::default();
    let mut lines = vec![
        suite("kinematics exactness", Duration::from_secs(5), || exactness_suite(0.5)),
        suite("jacobian suite", Duration::from_secs(10), || jacobian_suite(&geo, 200, 1, 1e-5)),
        suite("gradient suite", Duration::from_secs(60), || gradient_suite(20, 1, 1e-4)),
        suite("reduction identities", Duration::from_secs(10), || reduction_suite(1)),
    ];
    let cfg = config();
    match model(&cfg) {
        Ok((net, train_time)) => {
            lines.push(table_one(&cfg, &net, train_time));
            lines.push(gating(&cfg, &net));
            lines.push(avoidance(&cfg, &net));
        }
        Err(e) => {
            for name in ["table-1 extreme", "gating state-dependence", "avoidance session"] {
                lines.push(failed(name, &e));
            }
        }
    }
    lines.push(suite("metrics oracles", Duration::from_secs(5), metrics_suite));

    for l in &lines {
        println!("{} {:<26} {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failures = lines.iter().filter(|l| !l.passed).count();
    println!("acceptance: {} passed, {failures} failed", lines.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
