//! Closed-loop evaluation: difficulty-matched targets, the tracking runner,
//! the four tracking metrics, the controller x difficulty report and the
//! gate heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, ControllerKind, DisplacementModel};
use crate::error::{invalid, Error, Result};
use crate::kinematics::{JointVector, RobotGeometry, ShapeState};
use crate::plant::{observe, plant_step, DisturbanceProfile, PlantState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Extreme,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Extreme];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Extreme => "extreme",
        }
    }

    /// Peak bend as a fraction of the bend limit.
    pub fn curvature_fraction(self) -> f64 {
        match self {
            Difficulty::Easy => 0.3,
            Difficulty::Medium => 0.6,
            Difficulty::Extreme => 0.95,
        }
    }

    /// Multiplier on the disturbance profile.
    pub fn disturbance_scale(self) -> f64 {
        match self {
            Difficulty::Easy => 0.3,
            Difficulty::Medium => 0.7,
            Difficulty::Extreme => 1.0,
        }
    }

    /// Commanded rack positions of the target posture.
    ///
    /// Easy bends every segment mildly the same way; Medium alternates the
    /// bend direction; Extreme counter-bends the base and drives the four
    /// distal segments to the limit, the posture where the coupling bends the
    /// chain furthest from the analytic prediction.
    pub fn target_configuration(self, geo: &RobotGeometry) -> JointVector {
        let n = geo.n_segments;
        let f = self.curvature_fraction();
        let (fractions, extension): (Vec<f64>, f64) = match self {
            Difficulty::Easy => (vec![f; n], 75.0),
            Difficulty::Medium => ((0..n).map(|i| if i % 2 == 0 { f } else { -f }).collect(), 85.0),
            Difficulty::Extreme => ((0..n).map(|i| if i == 0 { -0.5 } else { f }).collect(), 100.0),
        };
        let bends: Vec<f64> = fractions.iter().enumerate().map(|(i, s)| s * geo.bend_limit(i)).collect();
        JointVector::from_bends(geo, &bends, extension)
    }

    /// The shape the scaled plant settles into at the target configuration,
    /// so every target is reachable by construction.
    pub fn target_shape(self, geo: &RobotGeometry, profile: &DisturbanceProfile) -> ShapeState {
        PlantState::at_rest(&self.target_configuration(geo), &profile.scaled(self.disturbance_scale()), geo).shape
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "extreme" => Ok(Difficulty::Extreme),
            other => Err(invalid(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Rack positions at the start of the cycle.
    pub q: Vec<f64>,
    /// True (noise-free) error of each node, mm.
    pub node_errors: Vec<f64>,
    pub mean_error: f64,
    pub beta: Vec<[f64; 3]>,
    pub dq_norm: f64,
    pub k_star: usize,
    pub fault: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub controller: ControllerKind,
    pub steps: Vec<StepRecord>,
    /// Rack positions after the last cycle.
    pub final_q: Vec<f64>,
}

impl RunLog {
    pub fn errors(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mean_error).collect()
    }

    /// Rack positions at every cycle boundary (`steps + 1` entries).
    pub fn q_series(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.steps.iter().map(|s| s.q.clone()).collect();
        out.push(self.final_q.clone());
        out
    }

    pub fn faults(&self) -> usize {
        self.steps.iter().filter(|s| s.fault.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingSetup {
    pub steps: usize,
    /// Initial value of every rack.
    pub start_q: f64,
}

impl Default for TrackingSetup {
    fn default() -> Self {
        TrackingSetup {
            steps: 400,
            start_q: 70.0,
        }
    }
}

/// Drives the plant toward `target` for `setup.steps` cycles. The controller
/// sees the measurement taken one cycle earlier, as a camera pipeline would
/// deliver it.
#[allow(clippy::too_many_arguments)]
pub fn run_tracking(
    kind: ControllerKind,
    model: Option<&dyn DisplacementModel>,
    force_gate: Option<f64>,
    cfg: &ControllerConfig,
    geo: &RobotGeometry,
    profile: &DisturbanceProfile,
    target: &ShapeState,
    setup: &TrackingSetup,
) -> Result<RunLog> {
    let start = JointVector::uniform(geo.n_segments, setup.start_q);
    let plant = PlantState::at_rest(&start, profile, geo);
    let targets = vec![target.positions(); setup.steps];
    run_waypoints(kind, model, force_gate, cfg, geo, profile, plant, &targets)
}

/// Like [`run_tracking`] with a per-cycle target (multi-waypoint runs).
#[allow(clippy::too_many_arguments)]
pub fn run_waypoints(
    kind: ControllerKind,
    model: Option<&dyn DisplacementModel>,
    force_gate: Option<f64>,
    cfg: &ControllerConfig,
    geo: &RobotGeometry,
    profile: &DisturbanceProfile,
    mut plant: PlantState,
    targets: &[Vec<f64>],
) -> Result<RunLog> {
    let mut ctrl = Controller::new(kind, model, cfg.clone(), geo.clone())?;
    if let Some(b) = force_gate {
        ctrl = ctrl.force_gate(b);
    }
    let mut delayed = observe(&plant, profile);
    let mut steps = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        let now = observe(&plant, profile);
        let out = ctrl.cycle(&plant.q, &delayed, target);
        let node_errors = crate::controller::node_errors(&plant.shape.positions(), target);
        steps.push(StepRecord {
            step: t,
            q: plant.q.0.clone(),
            mean_error: node_errors.iter().sum::<f64>() / node_errors.len() as f64,
            node_errors,
            beta: out.telemetry.beta,
            dq_norm: out.telemetry.dq_norm,
            k_star: out.telemetry.k_star,
            fault: out.telemetry.fault,
        });
        plant = plant_step(&plant, &out.dq, profile, geo);
        delayed = now;
    }
    Ok(RunLog {
        controller: kind,
        steps,
        final_q: plant.q.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Mean node error over the final 20% of steps (mm).
    pub e_mean: f64,
    /// Steps until the error stays within 5% of the initial-to-steady gap.
    pub t95: usize,
    /// Mean norm of the third backward difference of q (mm).
    pub chatter: f64,
    /// Cumulative L1 rack travel (mm).
    pub cost: f64,
}

/// Steady-state window: the final 20% of the run, at least one step.
pub fn steady_state(errors: &[f64]) -> f64 {
    let k = ((errors.len() as f64) * 0.2).ceil().max(1.0) as usize;
    let tail = &errors[errors.len() - k..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

pub fn t95(errors: &[f64], e_ss: f64) -> usize {
    let e0 = errors[0];
    let band = e_ss + 0.05 * (e0 - e_ss).max(0.0);
    // last index above the band, plus one
    errors.iter().rposition(|e| *e > band).map_or(0, |k| k + 1)
}

/// `||q_t - 3 q_{t-1} + 3 q_{t-2} - q_{t-3}||` for every `t >= 3`.
pub fn third_differences(q: &[Vec<f64>]) -> Vec<f64> {
    (3..q.len())
        .map(|t| {
            (0..q[t].len())
                .map(|j| (q[t][j] - 3.0 * q[t - 1][j] + 3.0 * q[t - 2][j] - q[t - 3][j]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Metrics from an error series and the matching rack-position series.
pub fn metrics_from_series(errors: &[f64], q: &[Vec<f64>]) -> Result<RunMetrics> {
    if errors.is_empty() || q.len() < 4 {
        return Err(invalid("metrics need at least four rack samples and one error"));
    }
    let e_mean = steady_state(errors);
    let d3 = third_differences(q);
    let cost = q
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    Ok(RunMetrics {
        e_mean,
        t95: t95(errors, e_mean),
        chatter: d3.iter().sum::<f64>() / d3.len() as f64,
        cost,
    })
}

pub fn compute_metrics(log: &RunLog) -> Result<RunMetrics> {
    metrics_from_series(&log.errors(), &log.q_series())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub controller: ControllerKind,
    pub difficulty: Difficulty,
    pub seeds: usize,
    pub e_mean: f64,
    pub t95: f64,
    pub chatter: f64,
    pub cost: f64,
    pub faults: usize,
}

pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// One log per (controller, difficulty, seed), in row order.
    pub logs: Vec<(ControllerKind, Difficulty, u64, RunLog)>,
}

/// The controller x difficulty grid, averaged over `seeds` (each seed
/// changes the measurement noise stream).
pub fn run_benchmark(
    controllers: &[ControllerKind],
    difficulties: &[Difficulty],
    seeds: &[u64],
    model: Option<&dyn DisplacementModel>,
    cfg: &ControllerConfig,
    geo: &RobotGeometry,
    profile: &DisturbanceProfile,
    setup: &TrackingSetup,
) -> Result<BenchResult> {
    if controllers.iter().any(|c| c.needs_model()) && model.is_none() {
        return Err(Error::Config("learned controllers need a trained checkpoint".into()));
    }
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &d in difficulties {
        let scaled = profile.scaled(d.disturbance_scale());
        let target = d.target_shape(geo, profile);
        for &c in controllers {
            let mut acc = [0.0; 4];
            let mut faults = 0;
            for &seed in seeds {
                let log = run_tracking(c, model, None, cfg, geo, &scaled.with_seed(seed), &target, setup)?;
                let m = compute_metrics(&log)?;
                acc[0] += m.e_mean;
                acc[1] += m.t95 as f64;
                acc[2] += m.chatter;
                acc[3] += m.cost;
                faults += log.faults();
                logs.push((c, d, seed, log));
            }
            let k = seeds.len().max(1) as f64;
            rows.push(BenchRow {
                controller: c,
                difficulty: d,
                seeds: seeds.len(),
                e_mean: acc[0] / k,
                t95: acc[1] / k,
                chatter: acc[2] / k,
                cost: acc[3] / k,
                faults,
            });
        }
    }
    Ok(BenchResult { rows, logs })
}

pub fn write_report_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["controller", "difficulty", "seeds", "e_mean_mm", "t95_steps", "chatter_mm", "cost_mm", "faults"])?;
    for r in rows {
        w.write_record([
            r.controller.name().to_string(),
            r.difficulty.name().to_string(),
            r.seeds.to_string(),
            format!("{:.4}", r.e_mean),
            format!("{:.1}", r.t95),
            format!("{:.5}", r.chatter),
            format!("{:.2}", r.cost),
            r.faults.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_text(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:<8} {:>11} {:>9} {:>12} {:>11}",
        "ctrl", "level", "e_mean(mm)", "T95", "chatter(mm)", "cost(mm)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:<8} {:>11.3} {:>9.1} {:>12.4} {:>11.1}",
            r.controller.name(),
            r.difficulty.name(),
            r.e_mean,
            r.t95,
            r.chatter,
            r.cost
        );
    }
    s
}

/// Error-vs-step and chatter-vs-step plots, one pair per difficulty. Returns
/// the written paths.
pub fn write_plots(result: &BenchResult, dir: &Path) -> Result<Vec<PathBuf>> {
    use plotters::prelude::*;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let colors = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44)];
    let mut difficulties: Vec<Difficulty> = result.logs.iter().map(|l| l.1).collect();
    difficulties.dedup();
    for d in difficulties {
        // first seed of each controller
        let mut series: Vec<(ControllerKind, &RunLog)> = Vec::new();
        for (c, dd, _, log) in &result.logs {
            if *dd == d && !series.iter().any(|(k, _)| k == c) {
                series.push((*c, log));
            }
        }
        for (what, fname) in [("error", "error"), ("chatter", "chatter")] {
            let path = dir.join(format!("{}_{}.svg", d.name(), fname));
            let curves: Vec<(ControllerKind, Vec<f64>)> = series
                .iter()
                .map(|(c, log)| {
                    let v = if what == "error" {
                        log.errors()
                    } else {
                        third_differences(&log.q_series())
                    };
                    (*c, v)
                })
                .collect();
            let len = curves.iter().map(|c| c.1.len()).max().unwrap_or(1).max(1);
            let top = curves
                .iter()
                .flat_map(|c| c.1.iter().copied())
                .filter(|v| v.is_finite())
                .fold(1e-9, f64::max);
            let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
                let root = SVGBackend::new(&path, (720, 420)).into_drawing_area();
                root.fill(&WHITE)?;
                let mut chart = ChartBuilder::on(&root)
                    .caption(format!("{} — {}", d.name(), what), ("sans-serif", 18))
                    .margin(12)
                    .x_label_area_size(32)
                    .y_label_area_size(56)
                    .build_cartesian_2d(0..len, 0.0..top * 1.05)?;
                chart
                    .configure_mesh()
                    .x_desc("step")
                    .y_desc(if what == "error" { "mean node error (mm)" } else { "|Δ³q| (mm)" })
                    .draw()?;
                for (k, (c, v)) in curves.iter().enumerate() {
                    let color = colors[k % colors.len()];
                    chart
                        .draw_series(LineSeries::new(v.iter().enumerate().map(|(i, e)| (i, *e)), color))?
                        .label(c.name())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
                }
                chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
                root.present()?;
                Ok(())
            };
            draw().map_err(|e| Error::Internal(format!("plot {}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Writes `beta_x.csv` and `beta_y.csv` (rows = segments, columns = steps)
/// and a two-panel `beta.png` (blue = analytic, red = learned).
pub fn export_gate_heatmap(log: &RunLog, dir: &Path) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir)?;
    let n = log.steps.first().map_or(0, |s| s.beta.len());
    if n == 0 {
        return Err(invalid("log holds no gate telemetry"));
    }
    let mut paths = Vec::new();
    for (channel, name) in [(0usize, "beta_x.csv"), (1, "beta_y.csv")] {
        let path = dir.join(name);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
        for seg in 0..n {
            w.write_record(log.steps.iter().map(|s| format!("{}", s.beta[seg][channel])))?;
        }
        w.flush()?;
        paths.push(path);
    }
    let png_path = dir.join("beta.png");
    write_heatmap_png(log, n, &png_path)?;
    paths.push(png_path);
    Ok([paths[0].clone(), paths[1].clone(), paths[2].clone()])
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(
            rec.iter()
                .map(|v| v.parse::<f64>().map_err(|e| invalid(format!("bad gate value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(out)
}

/// Linear blend from red (0, learned) through white to blue (1, analytic).
pub fn gate_color(beta: f64) -> [u8; 3] {
    let b = if beta.is_finite() { beta.clamp(0.0, 1.0) } else { 0.5 };
    let lerp = |a: f64, c: f64, t: f64| (a + (c - a) * t).round() as u8;
    if b < 0.5 {
        let t = b / 0.5;
        [lerp(200.0, 245.0, t), lerp(30.0, 245.0, t), lerp(30.0, 245.0, t)]
    } else {
        let t = (b - 0.5) / 0.5;
        [lerp(245.0, 30.0, t), lerp(245.0, 80.0, t), lerp(245.0, 200.0, t)]
    }
}

fn write_heatmap_png(log: &RunLog, n: usize, path: &Path) -> Result<()> {
    const CELL_H: usize = 16;
    const GAP: usize = 8;
    let steps = log.steps.len().max(1);
    let cell_w = (800 / steps).clamp(1, 8);
    let width = steps * cell_w;
    let height = 2 * n * CELL_H + GAP;
    let mut pixels = vec![255u8; width * height * 3];
    for (panel, channel) in [0usize, 1].iter().enumerate() {
        let y0 = panel * (n * CELL_H + GAP);
        for seg in 0..n {
            // segment 1 at the top, as in the usual layout
            for (t, s) in log.steps.iter().enumerate() {
                let color = gate_color(s.beta[seg][*channel]);
                for dy in 0..CELL_H {
                    for dx in 0..cell_w {
                        let (x, y) = (t * cell_w + dx, y0 + seg * CELL_H + dy);
                        let k = (y * width + x) * 3;
                        pixels[k..k + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Internal(format!("png: {e}")))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Internal(format!("png: {e}")))?;
    Ok(())
}

/// Per-step telemetry as CSV: step, mean error, per-node errors, gates,
/// command norm, weighting peak and fault note.
pub fn write_run_csv(log: &RunLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = log.steps.first().map_or(0, |s| s.node_errors.len());
    let mut header = vec!["step".to_string(), "mean_error".to_string()];
    header.extend((0..n).map(|i| format!("e{i}")));
    for i in 0..n {
        for c in ["x", "y", "theta"] {
            header.push(format!("beta{i}_{c}"));
        }
    }
    header.extend(["dq_norm", "k_star", "fault"].map(String::from));
    w.write_record(&header)?;
    for s in &log.steps {
        let mut row = vec![s.step.to_string(), s.mean_error.to_string()];
        row.extend(s.node_errors.iter().map(|v| v.to_string()));
        row.extend(s.beta.iter().flatten().map(|v| v.to_string()));
        row.push(s.dq_norm.to_string());
        row.push(s.k_star.to_string());
        row.push(s.fault.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean gate in near-neutral versus smoothly bent segment-steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSplit {
    pub near_neutral: f64,
    pub smooth: f64,
    pub n_near_neutral: usize,
    pub n_smooth: usize,
}

/// Alternating phases of near-straight and moderately bent postures, each
/// held for `phase_steps` cycles: straight, bent one way, near-straight
/// counter-bent, bent the other way.
pub fn gating_waypoints(geo: &RobotGeometry, profile: &DisturbanceProfile, phase_steps: usize) -> Vec<Vec<f64>> {
    let n = geo.n_segments;
    let phases: [(f64, bool); 4] = [(0.0, false), (0.5, false), (0.08, true), (-0.5, false)];
    let mut out = Vec::with_capacity(4 * phase_steps);
    for (fraction, alternate) in phases {
        let bends: Vec<f64> = (0..n)
            .map(|i| {
                let sign = if alternate && i % 2 == 1 { -1.0 } else { 1.0 };
                sign * fraction * geo.bend_limit(i)
            })
            .collect();
        let q = JointVector::from_bends(geo, &bends, 85.0);
        let target = PlantState::at_rest(&q, profile, geo).shape.positions();
        out.extend(std::iter::repeat(target).take(phase_steps));
    }
    out
}

/// Classifies every (segment, step) of a gated run by the segment's bend:
/// below the profile's low-tension half-width is near-neutral, between twice
/// that and 80% of the bend limit is smooth; the band in between is left out.
pub fn gate_split(log: &RunLog, geo: &RobotGeometry, profile: &DisturbanceProfile) -> Result<GateSplit> {
    let (mut near, mut smooth) = ((0.0, 0usize), (0.0, 0usize));
    for s in &log.steps {
        if s.fault.is_some() {
            continue;
        }
        for (i, b) in s.beta.iter().enumerate() {
            let bend = ((s.q[2 * i] - s.q[2 * i + 1]) / geo.widths[i]).abs();
            let mean = (b[0] + b[1] + b[2]) / 3.0;
            if bend < profile.neutral_width {
                near.0 += mean;
                near.1 += 1;
            } else if bend >= 2.0 * profile.neutral_width && bend <= 0.8 * geo.bend_limit(i) {
                smooth.0 += mean;
                smooth.1 += 1;
            }
        }
    }
    if near.1 == 0 || smooth.1 == 0 {
        return Err(invalid("gate split needs both near-neutral and smooth segment-steps"));
    }
    Ok(GateSplit {
        near_neutral: near.0 / near.1 as f64,
        smooth: smooth.0 / smooth.1 as f64,
        n_near_neutral: near.1,
        n_smooth: smooth.1,
    })
}

/// Runs the HYBRID controller through [`gating_waypoints`] under the given
/// noise seed and splits its gate by posture. Returns the run as well.
pub fn gating_trajectory(
    model: &dyn DisplacementModel,
    cfg: &ControllerConfig,
    geo: &RobotGeometry,
    profile: &DisturbanceProfile,
    seed: u64,
    phase_steps: usize,
) -> Result<(RunLog, GateSplit)> {
    let profile = profile.with_seed(seed);
    let start = PlantState::at_rest(&JointVector::uniform(geo.n_segments, 85.0), &profile, geo);
    let targets = gating_waypoints(geo, &profile, phase_steps);
    let log = run_waypoints(ControllerKind::Hybrid, Some(model), None, cfg, geo, &profile, start, &targets)?;
    let split = gate_split(&log, geo, &profile)?;
    Ok((log, split))
}
