//! Command-line front end: `cones`, `design`, `simulate` and `verify`.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{search, AnalysisError, AnalysisOptions, Builder, ConeSearchResult, Mode};
use crate::model::{
    conic_to_qsr, freq_gain, min_real_part, ConicSector, DelayDistribution, ModelError, PlantModel, SupplyRate, Upper,
};
use crate::network::{check_gain, sof_max_gain, NetworkError, SofOptions, Verdict};
use crate::sim::{
    closed_loop_simulate, default_input_bank, mc_check_dissipativity, scalar_signal, simulate, square_pulse,
    DelaySource, McOptions, SimError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

const BUNDLED: &[(&str, &str)] = &[
    ("benchmark_cones", include_str!("../configs/benchmark_cones.json")),
    ("benchmark_p4_design", include_str!("../configs/benchmark_p4_design.json")),
    ("benchmark_pulse", include_str!("../configs/benchmark_pulse.json")),
    ("benchmark_mc_soundness", include_str!("../configs/benchmark_mc_soundness.json")),
    ("benchmark_p3_false_gain", include_str!("../configs/benchmark_p3_false_gain.json")),
    ("benchmark_point_mass", include_str!("../configs/benchmark_point_mass.json")),
    ("counterexample", include_str!("../configs/counterexample.json")),
];

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(..) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Numerical(..) => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stochdiss", version, about = "Dissipativity analysis of systems with random input delays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Conic-sector table for every distribution, mode and builder.
    Cones(CommonArgs),
    /// Static output feedback gains from the stochastic, deterministic and undelayed sectors.
    Design(CommonArgs),
    /// Closed-loop or explicit-delay trajectories.
    Simulate(CommonArgs),
    /// Monte-Carlo check of supply rates; exits 3 on failure.
    Verify(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file, or the name of a bundled config.
    #[arg(long)]
    pub config: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
    pub d: Option<Vec<Vec<f64>>>,
    pub static_gain: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSpec {
    pub name: String,
    /// Probabilities keyed by integer delay.
    pub pmf: BTreeMap<String, f64>,
}

/// `{a, b}` with `b` absent or null for an open sector, or `{c, r}`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorSpec {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QsrSpec {
    pub q: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSector {
    pub label: String,
    #[serde(flatten)]
    pub sector: SectorSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub distribution: Option<String>,
    pub plant_sector: Option<SectorSpec>,
    pub pipelines: Option<Vec<String>>,
    #[serde(default)]
    pub reference_sectors: Vec<NamedSector>,
    #[serde(default)]
    pub reference_gains: BTreeMap<String, f64>,
    #[serde(default)]
    pub check_gains: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GainValue {
    Fixed(f64),
    Pipeline(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub label: String,
    pub k: GainValue,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitRun {
    pub delays: Vec<usize>,
    pub input: Vec<f64>,
    pub supply: Option<QsrSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub distribution: Option<String>,
    #[serde(default)]
    pub gains: Vec<GainSpec>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_settle_from")]
    pub settle_from: usize,
    #[serde(default = "default_settle_level")]
    pub settle_level: f64,
    pub explicit: Option<ExplicitRun>,
}

fn default_amplitude() -> f64 {
    10.0
}
fn default_steps() -> usize {
    3
}
fn default_seeds() -> usize {
    1
}
fn default_settle_from() -> usize {
    40
}
fn default_settle_level() -> f64 {
    0.01
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTarget {
    pub label: Option<String>,
    pub distribution: String,
    pub supply: Option<QsrSpec>,
    pub sector: Option<SectorSpec>,
    pub search: Option<String>,
    pub builder: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub targets: Vec<VerifyTarget>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSpec,
    #[serde(default)]
    pub distributions: Vec<DistSpec>,
    pub modes: Option<Vec<String>>,
    pub builders: Option<Vec<String>>,
    pub tol: Option<f64>,
    pub b_cap: Option<f64>,
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub runs: Option<usize>,
    pub design: Option<DesignSpec>,
    pub simulate: Option<SimulateSpec>,
    pub verify: Option<VerifySpec>,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub raw: RunConfig,
    pub plant: PlantModel,
    pub distributions: Vec<(String, DelayDistribution)>,
    pub modes: Vec<Mode>,
    pub stochastic: bool,
    pub deterministic: bool,
    pub tol: f64,
    pub b_cap: f64,
    pub seed: u64,
    pub horizon: Option<usize>,
    pub runs: usize,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load_config_text(spec: &str) -> Result<String, CliError> {
    let path = Path::new(spec);
    if path.exists() {
        return fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e));
    }
    let name = spec.strip_suffix(".json").unwrap_or(spec);
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.to_string())
        .ok_or_else(|| cfg_err(format!("no config file or bundled config named '{spec}'")))
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "gain" => Ok(Mode::Gain),
        "min_radius" => Ok(Mode::MinRadius),
        "max_a" => Ok(Mode::MaxAMinB),
        other => Err(cfg_err(format!("unknown mode '{other}' (gain, min_radius, max_a)"))),
    }
}

fn plant_from_spec(spec: &PlantSpec) -> Result<PlantModel, CliError> {
    match (&spec.static_gain, &spec.a, &spec.b, &spec.c, &spec.d) {
        (Some(k), None, None, None, None) => {
            let cols = k.first().map_or(0, |r| r.len());
            if k.is_empty() || cols == 0 || k.iter().any(|r| r.len() != cols) {
                return Err(cfg_err("static_gain must be a nonempty rectangular matrix"));
            }
            if k.iter().flatten().any(|v| !v.is_finite()) {
                return Err(cfg_err("static_gain has a non-finite entry"));
            }
            Ok(PlantModel::static_gain(DMatrix::from_fn(k.len(), cols, |i, j| k[i][j])))
        }
        (None, Some(a), Some(b), Some(c), Some(d)) => {
            if d.is_empty() || d[0].is_empty() {
                return Err(cfg_err("D must be nonempty"));
            }
            Ok(PlantModel::from_rows(a, b, c, d)?)
        }
        _ => Err(cfg_err("plant needs either all of a, b, c, d or only static_gain")),
    }
}

fn dist_from_spec(spec: &DistSpec) -> Result<DelayDistribution, CliError> {
    let mut pmf = BTreeMap::new();
    for (k, p) in &spec.pmf {
        let w: usize = k
            .trim()
            .parse()
            .map_err(|_| cfg_err(format!("distribution {}: delay key '{k}' is not an integer", spec.name)))?;
        if pmf.insert(w, *p).is_some() {
            return Err(cfg_err(format!("distribution {}: duplicate delay {w}", spec.name)));
        }
    }
    let (&lo, &hi) = match (pmf.keys().next(), pmf.keys().next_back()) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return Err(cfg_err(format!("distribution {}: empty pmf", spec.name))),
    };
    let probs = (lo..=hi).map(|w| pmf.get(&w).copied().unwrap_or(0.0)).collect();
    DelayDistribution::new(lo, hi, probs).map_err(|e| cfg_err(format!("distribution {}: {e}", spec.name)))
}

fn sector_from_spec(spec: &SectorSpec) -> Result<ConicSector, CliError> {
    let sector = match (spec.a, spec.b, spec.c, spec.r) {
        (Some(a), Some(b), None, None) => ConicSector::interval(a, b),
        (Some(a), None, None, None) => ConicSector::half_plane(a),
        (None, None, Some(c), Some(r)) => ConicSector::disk(c, r),
        _ => return Err(cfg_err("sector needs {a} or {a, b} or {c, r}")),
    };
    sector.validate()?;
    Ok(sector)
}

fn qsr_from_spec(spec: &QsrSpec) -> Result<SupplyRate, CliError> {
    let mat = |rows: &Vec<Vec<f64>>, name: &str| -> Result<DMatrix<f64>, CliError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(cfg_err(format!("{name} must be a nonempty rectangular matrix")));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    };
    Ok(SupplyRate::new(mat(&spec.q, "Q")?, mat(&spec.s, "S")?, mat(&spec.r, "R")?)?)
}

pub fn resolve(text: &str, args: &CommonArgs) -> Result<Resolved, CliError> {
    let raw: RunConfig = serde_json::from_str(text).map_err(|e| cfg_err(format!("invalid config: {e}")))?;
    let plant = plant_from_spec(&raw.plant)?;
    let mut names = BTreeSet::new();
    let mut distributions = Vec::new();
    for d in &raw.distributions {
        if !names.insert(d.name.clone()) {
            return Err(cfg_err(format!("duplicate distribution name '{}'", d.name)));
        }
        distributions.push((d.name.clone(), dist_from_spec(d)?));
    }
    let modes = match &raw.modes {
        Some(list) => list.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>, _>>()?,
        None => vec![Mode::Gain, Mode::MaxAMinB, Mode::MinRadius],
    };
    let builders = raw.builders.clone().unwrap_or_else(|| vec!["stochastic".into(), "deterministic".into()]);
    for b in &builders {
        if b != "stochastic" && b != "deterministic" {
            return Err(cfg_err(format!("unknown builder '{b}'")));
        }
    }
    let tol = args.tol.or(raw.tol).unwrap_or(1e-8);
    if !(1e-10..=1e-4).contains(&tol) {
        return Err(cfg_err(format!("tol {tol} outside [1e-10, 1e-4]")));
    }
    let b_cap = raw.b_cap.unwrap_or(1e5);
    if !(b_cap.is_finite() && b_cap > 0.0) {
        return Err(cfg_err("b_cap must be positive and finite"));
    }
    if raw.horizon == Some(0) {
        return Err(cfg_err("horizon must be at least 1"));
    }
    let runs = args.runs.or(raw.runs).unwrap_or(1000);
    Ok(Resolved {
        plant,
        distributions,
        modes,
        stochastic: builders.iter().any(|b| b == "stochastic"),
        deterministic: builders.iter().any(|b| b == "deterministic"),
        tol,
        b_cap,
        seed: args.seed.or(raw.seed).unwrap_or(0),
        horizon: raw.horizon,
        runs,
        raw,
    })
}

impl Resolved {
    fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions { tol: self.tol, b_cap: self.b_cap, ..AnalysisOptions::default() }
    }

    fn sof_options(&self) -> SofOptions {
        SofOptions { b_cap: self.b_cap, ..SofOptions::default() }
    }

    fn distribution(&self, name: &str) -> Result<&DelayDistribution, CliError> {
        self.distributions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| cfg_err(format!("unknown distribution '{name}'")))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>, CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r).map_err(|e| cfg_err(e.to_string()))?;
    }
    wtr.into_inner().map_err(|e| cfg_err(e.to_string()))
}

fn upper_value(b: Upper) -> Option<f64> {
    match b {
        Upper::Finite(b) => Some(b),
        Upper::Infinite => None,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConeRow {
    pub row: String,
    pub builder: String,
    pub mode: String,
    pub status: String,
    pub gain: Option<f64>,
    pub c: Option<f64>,
    pub r: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub b_capped: bool,
    pub margin: Option<f64>,
    pub scaled_margin: Option<f64>,
}

fn cone_row(row: &str, builder: &Builder, mode: Mode, res: &Result<ConeSearchResult, AnalysisError>) -> ConeRow {
    let mut out = ConeRow {
        row: row.to_string(),
        builder: builder.kind().to_string(),
        mode: mode.name().to_string(),
        status: String::new(),
        gain: None,
        c: None,
        r: None,
        a: None,
        b: None,
        b_capped: false,
        margin: None,
        scaled_margin: None,
    };
    match res {
        Ok(r) => {
            out.status = "feasible".into();
            out.gain = r.gain();
            if let Some((c, rad)) = r.disk() {
                out.c = Some(c);
                out.r = Some(rad);
            }
            out.a = r.a();
            out.b = r.b().and_then(upper_value);
            out.b_capped = r.b_capped;
            out.margin = Some(r.margin());
            out.scaled_margin = Some(r.reports.iter().map(|x| x.scaled_margin).fold(f64::INFINITY, f64::min));
        }
        Err(AnalysisError::Numerical(..)) => out.status = "numerical_failure".into(),
        Err(AnalysisError::Infeasible(_)) | Err(AnalysisError::NoFiniteGain) => out.status = "infeasible".into(),
        Err(e) => out.status = format!("error: {e}"),
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct NyquistRow {
    delay: usize,
    omega: f64,
    re: f64,
    im: f64,
}

fn cone_rows(cfg: &Resolved) -> Result<Vec<(String, Builder)>, CliError> {
    if cfg.distributions.is_empty() {
        return Err(cfg_err("cones needs at least one distribution"));
    }
    let mut rows = Vec::new();
    let mut ranges = BTreeSet::new();
    for (name, d) in &cfg.distributions {
        if cfg.stochastic {
            rows.push((name.clone(), Builder::Stochastic(d.clone())));
        }
    }
    if cfg.deterministic {
        for (_, d) in &cfg.distributions {
            if ranges.insert((d.w_min(), d.w_max())) {
                rows.push((format!("det[{},{}]", d.w_min(), d.w_max()), Builder::deterministic_for(d)));
            }
        }
    }
    Ok(rows)
}

pub fn cmd_cones(cfg: &Resolved, out: &Path) -> Result<i32, CliError> {
    let opts = cfg.analysis_options();
    let mut table = Vec::new();
    let mut numerical = false;
    for (label, builder) in cone_rows(cfg)? {
        for &mode in &cfg.modes {
            let res = search(&cfg.plant, &builder, mode, &opts);
            let row = cone_row(&label, &builder, mode, &res);
            numerical |= row.status == "numerical_failure";
            table.push(row);
        }
    }
    write_file(&out.join("cones.csv"), &csv_bytes(&table)?)?;

    let delay_free_gain = freq_gain(&cfg.plant, 1024).ok();
    let summary = json!({
        "delay_free_gain": delay_free_gain,
        "tol": cfg.tol,
        "b_cap": cfg.b_cap,
        "rows": table,
    });
    write_json(&out.join("cones.json"), &summary)?;

    let mut text = String::new();
    text.push_str(&format!("delay-free gain (1024 points): {}\n", fmt_opt(delay_free_gain)));
    text.push_str(&format!(
        "{:<10} {:<14} {:<11} {:<18} {:>9} {:>9} {:>9} {:>9} {:>11}\n",
        "row", "builder", "mode", "status", "gain", "c", "r", "a", "b"
    ));
    for r in &table {
        let b = match (r.b, r.b_capped) {
            (Some(b), true) => format!("{b:.4e}*"),
            (Some(b), false) => format!("{b:.4}"),
            (None, _) => "-".into(),
        };
        text.push_str(&format!(
            "{:<10} {:<14} {:<11} {:<18} {:>9} {:>9} {:>9} {:>9} {:>11}\n",
            r.row,
            r.builder,
            r.mode,
            r.status,
            fmt_opt(r.gain),
            fmt_opt(r.c),
            fmt_opt(r.r),
            fmt_opt(r.a),
            b
        ));
    }
    if table.iter().any(|r| r.b_capped) {
        text.push_str(&format!("* b reached b_cap = {}\n", cfg.b_cap));
    }
    write_file(&out.join("cones.txt"), text.as_bytes())?;
    print!("{text}");

    if cfg.plant.m() == 1 && cfg.plant.p() == 1 {
        let delays: BTreeSet<usize> =
            std::iter::once(0).chain(cfg.distributions.iter().flat_map(|(_, d)| d.w_min()..=d.w_max())).collect();
        let mut rows = Vec::new();
        for w in delays {
            for i in 0..256 {
                let omega = std::f64::consts::PI * i as f64 / 255.0;
                let g = cfg.plant.frequency_response(omega)[(0, 0)];
                let shift = nalgebra::Complex::new(0.0, -omega * w as f64).exp();
                let z = g * shift;
                rows.push(NyquistRow { delay: w, omega, re: z.re, im: z.im });
            }
        }
        write_file(&out.join("nyquist.csv"), &csv_bytes(&rows)?)?;
    }
    Ok(if numerical { EXIT_NUMERICAL } else { EXIT_OK })
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignRow {
    pub pipeline: String,
    pub a: f64,
    pub b: Option<f64>,
    pub k: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub margin: Option<f64>,
    pub reference: Option<f64>,
    pub difference: Option<f64>,
}

/// Sector fed to the SOF search for one pipeline.
pub fn pipeline_sector(
    cfg: &Resolved,
    pipeline: &str,
    dist: Option<&DelayDistribution>,
) -> Result<ConicSector, CliError> {
    let opts = cfg.analysis_options();
    match pipeline {
        "stochastic" | "deterministic" => {
            let d = dist.ok_or_else(|| cfg_err(format!("the {pipeline} pipeline needs a distribution")))?;
            let builder =
                if pipeline == "stochastic" { Builder::Stochastic(d.clone()) } else { Builder::deterministic_for(d) };
            let res = search(&cfg.plant, &builder, Mode::MaxAMinB, &opts)?;
            Ok(res.sector)
        }
        "undelayed" => {
            let (a, _) = min_real_part(&cfg.plant, 4096)?;
            if a >= 0.0 {
                return Err(cfg_err("undelayed plant is passive; no negative intercept"));
            }
            Ok(ConicSector::half_plane(a))
        }
        other => Err(cfg_err(format!("unknown pipeline '{other}' (stochastic, deterministic, undelayed)"))),
    }
}

fn sector_bounds(s: &ConicSector) -> (f64, Option<f64>) {
    match crate::model::to_interval(s) {
        ConicSector::Interval { a, b } => (a, upper_value(b)),
        ConicSector::Disk { .. } => unreachable!("to_interval returns intervals"),
    }
}

fn design_row(cfg: &Resolved, name: &str, sector: &ConicSector, reference: Option<f64>) -> Result<DesignRow, CliError> {
    let sof = sof_max_gain(sector, &cfg.sof_options())?;
    let (a, b) = sector_bounds(sector);
    Ok(DesignRow {
        pipeline: name.to_string(),
        a,
        b,
        k: sof.k,
        lambda_1: sof.lambdas[0],
        lambda_2: sof.lambdas[1],
        margin: sof.margin.is_finite().then_some(sof.margin),
        reference,
        difference: reference.map(|r| sof.k - r),
    })
}

pub fn cmd_design(cfg: &Resolved, out: &Path) -> Result<i32, CliError> {
    let spec = cfg.raw.design.as_ref().ok_or_else(|| cfg_err("config has no design section"))?;
    let dist = spec.distribution.as_deref().map(|n| cfg.distribution(n)).transpose()?;
    let mut rows = Vec::new();
    let mut sectors = Vec::new();
    if let Some(ps) = &spec.plant_sector {
        let s = sector_from_spec(ps)?;
        rows.push(design_row(cfg, "given", &s, spec.reference_gains.get("given").copied())?);
        sectors.push(("given".to_string(), s));
    }
    let pipelines = match &spec.pipelines {
        Some(p) => p.clone(),
        None if spec.plant_sector.is_some() => Vec::new(),
        None => vec!["stochastic".into(), "deterministic".into(), "undelayed".into()],
    };
    for p in &pipelines {
        let s = pipeline_sector(cfg, p, dist)?;
        rows.push(design_row(cfg, p, &s, spec.reference_gains.get(p).copied())?);
        sectors.push((p.clone(), s));
    }
    for r in &spec.reference_sectors {
        let s = sector_from_spec(&r.sector)?;
        rows.push(design_row(cfg, &r.label, &s, spec.reference_gains.get(&r.label).copied())?);
        sectors.push((r.label.clone(), s));
    }
    if rows.is_empty() {
        return Err(cfg_err("design has nothing to compute"));
    }

    let mut verdicts = Vec::new();
    for (name, s) in &sectors {
        for &k in &spec.check_gains {
            let chk = check_gain(s, k, &cfg.sof_options())?;
            verdicts.push(json!({
                "sector": name,
                "k": k,
                "verdict": if chk.verdict == Verdict::Stable { "stable" } else { "not_concluded" },
                "lambda": chk.lambdas,
                "margin": chk.margin,
            }));
        }
    }
    let notes: Vec<String> = rows
        .iter()
        .filter_map(|r| {
            r.difference.filter(|d| d.abs() > 0.03).map(|d| {
                format!(
                    "{}: K = {:.4} differs from the reference {:.4} by {:+.4}",
                    r.pipeline,
                    r.k,
                    r.reference.unwrap(),
                    d
                )
            })
        })
        .collect();
    write_file(&out.join("design.csv"), &csv_bytes(&rows)?)?;
    write_json(&out.join("design.json"), &json!({ "gains": rows, "verdicts": verdicts, "notes": notes }))?;
    for r in &rows {
        println!(
            "{:<14} a={:<10.4} b={:<10} K={:.4}{}",
            r.pipeline,
            r.a,
            r.b.map_or("inf".to_string(), |b| format!("{b:.4e}")),
            r.k,
            r.reference.map_or(String::new(), |x| format!(" (reference {x})"))
        );
    }
    for n in &notes {
        println!("note: {n}");
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
struct OutputRow {
    label: String,
    seed: u64,
    k: usize,
    w: usize,
    y: f64,
    controller: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn cmd_simulate(cfg: &Resolved, out: &Path) -> Result<i32, CliError> {
    let spec = cfg.raw.simulate.as_ref().ok_or_else(|| cfg_err("config has no simulate section"))?;
    let horizon = cfg.horizon.unwrap_or(50);
    let mut summary = serde_json::Map::new();

    if let Some(ex) = &spec.explicit {
        if cfg.plant.m() != 1 {
            return Err(cfg_err("explicit runs take a scalar input"));
        }
        let h = ex.input.len().saturating_sub(1);
        let traj = simulate(
            &cfg.plant,
            DelaySource::Explicit { delays: &ex.delays, bounds: None },
            &scalar_signal(&ex.input),
            &DVector::zeros(cfg.plant.n()),
            h,
        )?;
        let qsr = ex.supply.as_ref().map(qsr_from_spec).transpose()?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, qsr.as_ref())?;
        write_file(&out.join("explicit.csv"), &buf)?;
        let (eu, ey) = (traj.input_energy(), traj.output_energy());
        println!("explicit run: |u|^2 = {eu}, |y|^2 = {ey}");
        summary.insert("explicit".into(), json!({ "input_energy": eu, "output_energy": ey }));
    }

    if !spec.gains.is_empty() {
        let dname = spec.distribution.as_deref().ok_or_else(|| cfg_err("closed-loop runs need a distribution"))?;
        let dist = cfg.distribution(dname)?;
        if spec.seeds == 0 {
            return Err(cfg_err("seeds must be at least 1"));
        }
        if !spec.amplitude.is_finite() {
            return Err(cfg_err("amplitude must be finite"));
        }
        let d = square_pulse(horizon, spec.amplitude, spec.steps);
        let mut all_rows = Vec::new();
        let mut runs = Vec::new();
        for g in &spec.gains {
            let k = match &g.k {
                GainValue::Fixed(k) if k.is_finite() => *k,
                GainValue::Fixed(_) => return Err(cfg_err(format!("gain {} is not finite", g.label))),
                GainValue::Pipeline(p) => {
                    let s = pipeline_sector(cfg, p, Some(dist))?;
                    sof_max_gain(&s, &cfg.sof_options())?.k
                }
            };
            let mut diverged = 0;
            let mut worst_late: f64 = 0.0;
            let mut peak: f64 = 0.0;
            for i in 0..spec.seeds {
                let seed = cfg.seed + i as u64;
                let cl = closed_loop_simulate(&cfg.plant, k, dist, &d, horizon, seed)?;
                let y = cl.plant.output_scalar();
                if i == 0 {
                    let mut buf = Vec::new();
                    cl.plant.write_csv(&mut buf, None)?;
                    write_file(&out.join(format!("closed_loop_{}.csv", g.label)), &buf)?;
                }
                let half = max_abs(&y[..=horizon / 2]);
                let full = max_abs(&y);
                if full >= 10.0 * half && full > 0.0 {
                    diverged += 1;
                }
                if spec.settle_from <= horizon {
                    worst_late = worst_late.max(max_abs(&y[spec.settle_from..]));
                }
                peak = peak.max(full);
                for (step, yk) in y.iter().enumerate() {
                    all_rows.push(OutputRow {
                        label: g.label.clone(),
                        seed,
                        k: step,
                        w: cl.plant.w[step],
                        y: *yk,
                        controller: cl.controller_output[step],
                    });
                }
            }
            let settled = spec.settle_from <= horizon && worst_late < spec.settle_level;
            println!(
                "{:<14} K={:<9.4} peak |y|={:<12.4e} settled={} diverged {}/{}",
                g.label, k, peak, settled, diverged, spec.seeds
            );
            runs.push(json!({
                "label": g.label,
                "k": k,
                "seeds": spec.seeds,
                "peak_abs_y": peak,
                "max_abs_y_after_settle": worst_late,
                "settled": settled,
                "diverged_runs": diverged,
                "divergence_detected": diverged > 0,
            }));
        }
        write_file(&out.join("closed_loop_outputs.csv"), &csv_bytes(&all_rows)?)?;
        summary.insert("closed_loop".into(), Value::Array(runs));
    }
    if summary.is_empty() {
        return Err(cfg_err("simulate section has neither gains nor an explicit run"));
    }
    write_json(&out.join("simulate.json"), &Value::Object(summary))?;
    Ok(EXIT_OK)
}

fn target_supply(cfg: &Resolved, t: &VerifyTarget, dist: &DelayDistribution) -> Result<SupplyRate, CliError> {
    match (&t.supply, &t.sector, &t.search) {
        (Some(q), None, None) => qsr_from_spec(q),
        (None, Some(s), None) => Ok(conic_to_qsr(&sector_from_spec(s)?)?),
        (None, None, Some(mode)) => {
            let builder = match t.builder.as_deref().unwrap_or("stochastic") {
                "stochastic" => Builder::Stochastic(dist.clone()),
                "deterministic" => Builder::deterministic_for(dist),
                other => return Err(cfg_err(format!("unknown builder '{other}'"))),
            };
            Ok(search(&cfg.plant, &builder, parse_mode(mode)?, &cfg.analysis_options())?.qsr)
        }
        _ => Err(cfg_err("verify target needs exactly one of supply, sector, search")),
    }
}

pub fn cmd_verify(cfg: &Resolved, out: &Path) -> Result<i32, CliError> {
    let spec = cfg.raw.verify.as_ref().ok_or_else(|| cfg_err("config has no verify section"))?;
    if spec.targets.is_empty() {
        return Err(cfg_err("verify has no targets"));
    }
    let horizon = cfg.horizon.unwrap_or(200);
    let mc = McOptions { horizon, runs: cfg.runs, seed: cfg.seed, ..McOptions::default() };
    let bank = default_input_bank(&cfg.plant, horizon, cfg.seed);
    let mut results = Vec::new();
    let mut failed = false;
    for (i, t) in spec.targets.iter().enumerate() {
        let label = t.label.clone().unwrap_or_else(|| format!("target{i}"));
        let dist = cfg.distribution(&t.distribution)?;
        let qsr = target_supply(cfg, t, dist)?;
        if qsr.p() != cfg.plant.p() || qsr.m() != cfg.plant.m() {
            return Err(cfg_err(format!("{label}: supply dimensions do not match the plant")));
        }
        let rep = mc_check_dissipativity(&cfg.plant, dist, &qsr, &bank, &mc)?;
        let mut witness = Value::Null;
        if !rep.pass {
            failed = true;
            let input = bank.iter().find(|b| b.name == rep.worst_input).expect("worst input is in the bank");
            let rows: Vec<(usize, f64)> = input.signal.iter().enumerate().map(|(k, v)| (k, v[0])).collect();
            let path = out.join(format!("witness_{label}.csv"));
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(["k", "u"]).map_err(|e| cfg_err(e.to_string()))?;
            for r in rows {
                wtr.serialize(r).map_err(|e| cfg_err(e.to_string()))?;
            }
            write_file(&path, &wtr.into_inner().map_err(|e| cfg_err(e.to_string()))?)?;
            println!("{label}: FAIL, witness {} written to {}", rep.worst_input, path.display());
            witness = json!({ "input": rep.worst_input, "path": path.file_name().map(|p| p.to_string_lossy()) });
        } else {
            println!("{label}: pass (worst band {:.4e} at {})", rep.worst_upper_band, rep.worst_input);
        }
        results.push(json!({
            "label": label,
            "distribution": t.distribution,
            "q": qsr.q.as_slice(),
            "s": qsr.s.as_slice(),
            "r": qsr.r.as_slice(),
            "pass": rep.pass,
            "beta_hat": rep.beta_hat,
            "worst_input": rep.worst_input,
            "worst_upper_band": rep.worst_upper_band,
            "witness": witness,
            "inputs": rep.inputs.iter().map(|s| json!({
                "name": s.name,
                "min_mean": s.min_mean,
                "at_step": s.at_step,
                "upper_band": s.upper_band,
            })).collect::<Vec<_>>(),
        }));
    }
    write_json(
        &out.join("verify.json"),
        &json!({ "horizon": horizon, "runs": cfg.runs, "seed": cfg.seed, "targets": results }),
    )?;
    Ok(if failed { EXIT_VERIFY } else { EXIT_OK })
}

type CommandFn = fn(&Resolved, &Path) -> Result<i32, CliError>;

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let (args, cmd): (&CommonArgs, CommandFn) = match &cli.command {
        Command::Cones(a) => (a, cmd_cones),
        Command::Design(a) => (a, cmd_design),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Verify(a) => (a, cmd_verify),
    };
    let text = load_config_text(&args.config)?;
    let cfg = resolve(&text, args)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::Io(args.out.clone(), e))?;
    cmd(&cfg, &args.out)
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
