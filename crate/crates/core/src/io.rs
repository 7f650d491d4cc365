//! Scenario files, run records and plot-ready exports.
//!
//! Scenarios are TOML or JSON, chosen by file extension. Every number is
//! written with the shortest decimal form that parses back to the same `f64`,
//! so a load/save/load cycle is a fixed point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{integrate, AttentionMode, FlowOptions, ParamSchedule, StepRule, Trajectory, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{wasserstein2, EmpiricalMeasure};
use crate::pipeline::{run_pipeline, MatchMode, MatchReport, ScenarioSpec};
use crate::sphere::UnitVector;
use crate::synthesis::SynthesisReport;
use crate::tolerances;

/// On-disk file syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Toml,
    Json,
}

impl FileFormat {
    /// JSON for `.json`, TOML otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => FileFormat::Json,
            _ => FileFormat::Toml,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    points: Vec<Vec<f64>>,
    /// Uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    dimension: usize,
    eps: f64,
    horizon: f64,
    mode: MatchMode,
    #[serde(default)]
    seed: u64,
    inputs: Vec<RawMeasure>,
    targets: Vec<RawMeasure>,
}

fn measure_from_raw(raw: RawMeasure, d: usize, kind: &str, i: usize) -> Result<EmpiricalMeasure> {
    let at = |msg: String| Error::Invalid(format!("{kind} measure {i}: {msg}"));
    if raw.points.is_empty() {
        return Err(at("no atoms".into()));
    }
    let mut points = Vec::with_capacity(raw.points.len());
    for (j, p) in raw.points.into_iter().enumerate() {
        if p.len() != d {
            return Err(at(format!("atom {j} has {} coordinates, expected {d}", p.len())));
        }
        let v = DVector::from_vec(p);
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > tolerances::RENORMALIZE {
            return Err(at(format!(
                "atom {j} has norm {n}, beyond the renormalization tolerance {}",
                tolerances::RENORMALIZE
            )));
        }
        let u = if (n - 1.0).abs() <= tolerances::UNIT_NORM {
            UnitVector::new(v)
        } else {
            UnitVector::normalize(v)
        };
        points.push(u.map_err(|e| at(format!("atom {j}: {e}")))?);
    }
    let n = points.len();
    let weights = raw.weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    if weights.len() != n {
        return Err(at(format!("{n} atoms but {} weights", weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > tolerances::WEIGHT_SUM {
        return Err(at(format!("weights sum to {sum}, not 1")));
    }
    EmpiricalMeasure::new(points, weights).map_err(|e| at(e.to_string()))
}

fn measure_to_raw(m: &EmpiricalMeasure) -> RawMeasure {
    RawMeasure {
        points: m.points().iter().map(|p| p.as_slice().to_vec()).collect(),
        weights: Some(m.weights().to_vec()),
    }
}

/// Parse and validate scenario text.
pub fn parse_scenario(text: &str, format: FileFormat) -> Result<ScenarioSpec> {
    let raw: RawScenario = match format {
        FileFormat::Toml => toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?,
        FileFormat::Json => serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?,
    };
    let d = raw.dimension;
    let convert = |list: Vec<RawMeasure>, kind: &str| -> Result<Vec<EmpiricalMeasure>> {
        list.into_iter()
            .enumerate()
            .map(|(i, m)| measure_from_raw(m, d, kind, i))
            .collect()
    };
    let spec = ScenarioSpec {
        dimension: d,
        inputs: convert(raw.inputs, "input")?,
        targets: convert(raw.targets, "target")?,
        eps: raw.eps,
        horizon: raw.horizon,
        mode: raw.mode,
        seed: raw.seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Read and validate a scenario file. Atoms within 1e-6 of unit norm are
/// renormalized, others rejected.
pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = fs::read_to_string(path)?;
    parse_scenario(&text, FileFormat::from_path(path)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Canonical text of a scenario.
pub fn render_scenario(spec: &ScenarioSpec, format: FileFormat) -> Result<String> {
    let raw = RawScenario {
        dimension: spec.dimension,
        eps: spec.eps,
        horizon: spec.horizon,
        mode: spec.mode,
        seed: spec.seed,
        inputs: spec.inputs.iter().map(measure_to_raw).collect(),
        targets: spec.targets.iter().map(measure_to_raw).collect(),
    };
    match format {
        FileFormat::Toml => toml::to_string(&raw).map_err(|e| Error::Format(e.to_string())),
        FileFormat::Json => serde_json::to_string_pretty(&raw).map_err(|e| Error::Format(e.to_string())),
    }
}

pub fn save_scenario(spec: &ScenarioSpec, path: &Path) -> Result<()> {
    fs::write(path, render_scenario(spec, FileFormat::from_path(path))?)?;
    Ok(())
}

/// SHA-256 of the canonical JSON text of a scenario, in hex.
pub fn scenario_digest(spec: &ScenarioSpec) -> Result<String> {
    let text = render_scenario(spec, FileFormat::Json)?;
    Ok(format!("{:x}", Sha256::digest(text.as_bytes())))
}

pub fn save_schedule(schedule: &ParamSchedule, path: &Path) -> Result<()> {
    let text = serde_json::to_string(schedule).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_schedule(path: &Path) -> Result<ParamSchedule> {
    let text = fs::read_to_string(path)?;
    let s: ParamSchedule = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    s.check()?;
    Ok(s)
}

/// Everything needed to audit and reproduce a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub scenario_digest: String,
    pub seed: u64,
    /// Unix time in seconds.
    pub started_at: f64,
    pub finished_at: f64,
    pub scenario: ScenarioSpec,
    /// One report per pipeline stage, each schedule starting at 0.
    pub synthesis: Vec<SynthesisReport>,
    pub report: MatchReport,
    /// Sampled particle positions under the composed schedule, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Numerics of the integrations a run performs after synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Keep every `stride`-th integrator state in the record.
    pub stride: Option<usize>,
    pub step: StepRule,
}

/// Synthesize and verify a scenario.
pub fn execute(spec: &ScenarioSpec, opts: &RunOptions) -> Result<RunRecord> {
    spec.validate()?;
    let started_at = now();
    let report = run_pipeline(spec)?;
    let trajectory = match opts.stride {
        Some(stride) => {
            let flow_opts = FlowOptions {
                step: opts.step,
                stride: Some(stride),
                ..FlowOptions::default()
            };
            integrate(&spec.inputs, &report.schedule, &AttentionMode::Full, &flow_opts)?.trajectory
        }
        None => None,
    };
    let synthesis = (0..report.stages.len())
        .map(|k| {
            let mut r = SynthesisReport::new(report.stage_schedule(k)?, report.stages[k].notes.clone());
            r.notes.insert(0, report.stages[k].name.clone());
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario_digest: scenario_digest(spec)?,
        seed: spec.seed,
        started_at,
        finished_at: now(),
        scenario: spec.clone(),
        synthesis,
        report,
        trajectory,
    })
}

/// Load a scenario, optionally switch its mode, run it and write
/// `record.json` into `out_dir`.
pub fn run(spec_path: &Path, mode: Option<MatchMode>, out_dir: &Path, opts: &RunOptions) -> Result<RunRecord> {
    let mut spec = load_scenario(spec_path)?;
    if let Some(m) = mode {
        spec.mode = m;
    }
    let record = execute(&spec, opts)?;
    fs::create_dir_all(out_dir)?;
    save_record(&record, &out_dir.join("record.json"))?;
    Ok(record)
}

pub fn save_record(record: &RunRecord, path: &Path) -> Result<()> {
    let text = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn save_report(report: &MatchReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Recomputed final errors of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub errors: Vec<f64>,
    pub eps: f64,
    pub passed: bool,
    /// Largest difference to the errors stored in the record.
    pub drift: f64,
}

/// Integrate the recorded schedule from the recorded inputs and recompute
/// every `W₂` error.
pub fn verify(record: &RunRecord, step: StepRule) -> Result<Verification> {
    let spec = &record.scenario;
    if scenario_digest(spec)? != record.scenario_digest {
        return Err(Error::Verification("scenario digest does not match the record".into()));
    }
    let out = integrate(&spec.inputs, &record.report.schedule, &AttentionMode::Full, &FlowOptions::with_step(step))?;
    let errors: Vec<f64> = out
        .measures
        .iter()
        .zip(&spec.targets)
        .map(|(m, t)| wasserstein2(m, t))
        .collect();
    let drift = errors
        .iter()
        .zip(&record.report.errors)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Verification {
        passed: errors.iter().all(|e| *e <= spec.eps),
        eps: spec.eps,
        errors,
        drift,
    })
}

/// Line-delimited export syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    /// One JSON object per line, after a header object.
    Jsonl,
    /// Comma-separated values with a header row.
    Csv,
}

impl ExportFormat {
    fn extension(self) -> &'static str {
        match self {
            ExportFormat::Jsonl => "jsonl",
            ExportFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(ExportFormat::Jsonl),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::Invalid(format!("unknown export format {other:?} (expected jsonl or csv)"))),
        }
    }
}

fn json_line(out: &mut impl Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn csv_row(out: &mut impl Write, cells: impl IntoIterator<Item = String>) -> Result<()> {
    writeln!(out, "{}", cells.into_iter().collect::<Vec<_>>().join(","))?;
    Ok(())
}

/// Write the trajectory of `record` as one line per (time, measure, particle)
/// and its schedule as one line per segment. Returns the two file paths.
pub fn export_trajectories(record: &RunRecord, dir: &Path, format: ExportFormat) -> Result<(PathBuf, PathBuf)> {
    let traj = record
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::Invalid("the record holds no trajectory; rerun with a stride".into()))?;
    fs::create_dir_all(dir)?;
    let ext = format.extension();
    let traj_path = dir.join(format!("trajectory.{ext}"));
    let seg_path = dir.join(format!("segments.{ext}"));
    write_trajectory(traj, &traj_path, format)?;
    write_segments(&record.report.schedule, &seg_path, format)?;
    Ok((traj_path, seg_path))
}

pub fn write_trajectory(traj: &Trajectory, path: &Path, format: ExportFormat) -> Result<()> {
    let d = traj.dim;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let coords: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    match format {
        ExportFormat::Jsonl => json_line(
            &mut out,
            &serde_json::json!({"columns": ["t", "measure_index", "particle_index", "x"], "dim": d}),
        )?,
        ExportFormat::Csv => csv_row(
            &mut out,
            ["t", "measure_index", "particle_index"]
                .iter()
                .map(|s| s.to_string())
                .chain(coords.iter().cloned()),
        )?,
    }
    for sample in &traj.samples {
        for (i, state) in sample.states.iter().enumerate() {
            for (j, x) in state.chunks(d).enumerate() {
                match format {
                    ExportFormat::Jsonl => json_line(
                        &mut out,
                        &serde_json::json!({"t": sample.t, "measure_index": i, "particle_index": j, "x": x}),
                    )?,
                    ExportFormat::Csv => csv_row(
                        &mut out,
                        [sample.t.to_string(), i.to_string(), j.to_string()]
                            .into_iter()
                            .chain(x.iter().map(|v| v.to_string())),
                    )?,
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// One line per segment: `t_start, t_end` and the flattened `V, B, W, U, b`.
pub fn write_segments(schedule: &ParamSchedule, path: &Path, format: ExportFormat) -> Result<()> {
    let d = schedule.dim();
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    match format {
        ExportFormat::Jsonl => json_line(
            &mut out,
            &serde_json::json!({"columns": ["t_start", "t_end", "params"], "dim": d, "layout": "V,B,W,U row-major then b"}),
        )?,
        ExportFormat::Csv => {
            let names = ["V", "B", "W", "U"]
                .iter()
                .flat_map(|m| (0..d * d).map(move |k| format!("{m}{}_{}", k / d, k % d)))
                .chain((0..d).map(|k| format!("b{k}")));
            csv_row(&mut out, ["t_start".to_string(), "t_end".to_string()].into_iter().chain(names))?
        }
    }
    for s in &schedule.segments {
        let flat = s.params.flatten();
        match format {
            ExportFormat::Jsonl => json_line(
                &mut out,
                &serde_json::json!({"t_start": s.t_start, "t_end": s.t_end, "params": flat}),
            )?,
            ExportFormat::Csv => csv_row(
                &mut out,
                [s.t_start.to_string(), s.t_end.to_string()]
                    .into_iter()
                    .chain(flat.iter().map(|v| v.to_string())),
            )?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a segment file written by [`write_segments`] back into a schedule.
pub fn read_segments(path: &Path) -> Result<ParamSchedule> {
    let text = fs::read_to_string(path)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => ExportFormat::Csv,
        _ => ExportFormat::Jsonl,
    };
    let bad = |line: usize, msg: String| Error::Format(format!("{}:{}: {msg}", path.display(), line + 1));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty segment file".into()))?;
    let mut rows: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    let d = match format {
        ExportFormat::Jsonl => {
            let h: serde_json::Value = serde_json::from_str(header).map_err(|e| bad(0, e.to_string()))?;
            let d = h["dim"].as_u64().ok_or_else(|| bad(0, "missing dim".into()))? as usize;
            #[derive(Deserialize)]
            struct Row {
                t_start: f64,
                t_end: f64,
                params: Vec<f64>,
            }
            for (k, line) in lines {
                let r: Row = serde_json::from_str(line).map_err(|e| bad(k, e.to_string()))?;
                rows.push((r.t_start, r.t_end, r.params));
            }
            d
        }
        ExportFormat::Csv => {
            let cols = header.split(',').count();
            // 2 time columns plus 4d² + d parameters.
            let d = (1..=64)
                .find(|d| 2 + 4 * d * d + d == cols)
                .ok_or_else(|| bad(0, format!("{cols} columns match no dimension")))?;
            for (k, line) in lines {
                let vals = line
                    .split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|e| bad(k, e.to_string())))
                    .collect::<Result<Vec<f64>>>()?;
                if vals.len() != cols {
                    return Err(bad(k, format!("{} columns, expected {cols}", vals.len())));
                }
                rows.push((vals[0], vals[1], vals[2..].to_vec()));
            }
            d
        }
    };
    let horizon = rows.last().map(|r| r.1).ok_or_else(|| Error::Format("no segments".into()))?;
    let segments = rows
        .into_iter()
        .map(|(a, b, p)| {
            Ok(crate::dynamics::Segment {
                t_start: a,
                t_end: b,
                params: TransformerParams::unflatten(d, &p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s = ParamSchedule { segments, horizon };
    s.check()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
dimension = 3
eps = 0.01
horizon = 1.0
mode = "points"

[[inputs]]
points = [[1.0, 0.0, 0.0]]

[[targets]]
points = [[0.0, 1.0, 0.0]]
"#;

    #[test]
    fn minimal_file_loads() {
        let s = parse_scenario(MINIMAL, FileFormat::Toml).unwrap();
        assert_eq!(s.inputs.len(), 1);
        assert_eq!(s.seed, 0);
        assert_eq!(s.inputs[0].weights(), &[1.0]);
    }

    #[test]
    fn weights_off_by_a_tenth_name_the_measure() {
        let text = MINIMAL.replace("points = [[0.0, 1.0, 0.0]]", "points = [[0.0, 1.0, 0.0]]\nweights = [0.9]");
        let e = parse_scenario(&text, FileFormat::Toml).unwrap_err().to_string();
        assert!(e.contains("target measure 0") && e.contains("0.9"), "{e}");
    }

    #[test]
    fn long_atoms_are_rejected() {
        let text = MINIMAL.replace("[[1.0, 0.0, 0.0]]", "[[1.1, 0.0, 0.0]]");
        let e = parse_scenario(&text, FileFormat::Toml).unwrap_err().to_string();
        assert!(e.contains("input measure 0") && e.contains("atom 0"), "{e}");
    }

    #[test]
    fn nearly_unit_atoms_are_renormalized() {
        let text = MINIMAL.replace("[[1.0, 0.0, 0.0]]", "[[1.0000005, 0.0, 0.0]]");
        let s = parse_scenario(&text, FileFormat::Toml).unwrap();
        assert_eq!(s.inputs[0].points()[0].as_slice()[0], 1.0);
    }

    #[test]
    fn parse_errors_carry_a_location() {
        let e = parse_scenario("dimension = [", FileFormat::Toml).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = parse_scenario("{\"dimension\": 3,\n \"eps\": }", FileFormat::Json).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(parse_scenario(&text, FileFormat::Toml).is_err());
    }
}
