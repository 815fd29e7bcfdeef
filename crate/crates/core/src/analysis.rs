//! Conic-sector searches over the delay LMIs.

use thiserror::Error;

use crate::lmi::{build_deterministic_lmi, build_stochastic_lmi, LMIProblem, LmiError, SupplyTemplate};
use crate::model::{conic_to_qsr, ConicSector, DelayDistribution, ModelError, PlantModel, SupplyRate, Upper};
use crate::solver::{minimize_quadratic_radius, solve, SolveReport, SolverError, Status};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no finite gain certificate")]
    NoFiniteGain,
    #[error("{0} is infeasible")]
    Infeasible(&'static str),
    #[error("numerical failure in {0}: {1}")]
    Numerical(&'static str, String),
    #[error("sector search needs a SISO plant")]
    NotSiso,
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which LMI family certifies the sector.
#[derive(Debug, Clone, PartialEq)]
pub enum Builder {
    Stochastic(DelayDistribution),
    Deterministic { w_min: usize, w_max: usize },
}

impl Builder {
    pub fn deterministic_for(dist: &DelayDistribution) -> Self {
        Builder::Deterministic { w_min: dist.w_min(), w_max: dist.w_max() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Builder::Stochastic(_) => "stochastic",
            Builder::Deterministic { .. } => "deterministic",
        }
    }

    pub fn build(&self, plant: &PlantModel, supply: &SupplyTemplate) -> Result<LMIProblem, LmiError> {
        match self {
            Builder::Stochastic(d) => build_stochastic_lmi(plant, d, supply),
            Builder::Deterministic { w_min, w_max } => build_deterministic_lmi(plant, *w_min, *w_max, supply),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Gain,
    MinRadius,
    MaxAMinB,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Gain => "gain",
            Mode::MinRadius => "min_radius",
            Mode::MaxAMinB => "max_a",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub tol: f64,
    pub b_cap: f64,
    /// Largest `R` searched before giving up on a finite gain.
    pub r_cap: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self { tol: 1e-8, b_cap: 1e5, r_cap: 1e8 }
    }
}

#[derive(Debug, Clone)]
pub struct ConeSearchResult {
    pub mode: Mode,
    pub builder: &'static str,
    pub sector: ConicSector,
    pub qsr: SupplyRate,
    pub reports: Vec<SolveReport>,
    /// Phase 2 hit `b_cap`; `b` was pinned to the cap and `a` re-maximized.
    pub b_capped: bool,
    /// Half-plane intercept from phase 1 of the max-a search.
    pub a_open: Option<f64>,
}

impl ConeSearchResult {
    pub fn gain(&self) -> Option<f64> {
        match (self.mode, self.sector) {
            (Mode::Gain, ConicSector::Disk { r, .. }) => Some(r),
            _ => None,
        }
    }

    pub fn a(&self) -> Option<f64> {
        match self.sector {
            ConicSector::Interval { a, .. } => Some(a),
            _ => None,
        }
    }

    pub fn b(&self) -> Option<Upper> {
        match self.sector {
            ConicSector::Interval { b, .. } => Some(b),
            _ => None,
        }
    }

    pub fn disk(&self) -> Option<(f64, f64)> {
        match self.sector {
            ConicSector::Disk { c, r } => Some((c, r)),
            _ => None,
        }
    }

    /// Worst raw margin over the recorded solves.
    pub fn margin(&self) -> f64 {
        self.reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }
}

fn check_siso(plant: &PlantModel) -> Result<(), AnalysisError> {
    if plant.m() == 1 && plant.p() == 1 {
        Ok(())
    } else {
        Err(AnalysisError::NotSiso)
    }
}

fn accept(report: &SolveReport, stage: &'static str) -> Result<(), AnalysisError> {
    match report.status {
        Status::Feasible => Ok(()),
        Status::Infeasible => Err(AnalysisError::Infeasible(stage)),
        Status::NumericalFailure => Err(AnalysisError::Numerical(stage, report.diagnostics.clone())),
    }
}

/// Smallest `γ` with `(Q, S, R) = (-1, 0, γ²)` certified.
pub fn min_gain(
    plant: &PlantModel,
    builder: &Builder,
    opts: &AnalysisOptions,
) -> Result<ConeSearchResult, AnalysisError> {
    check_siso(plant)?;
    let template = SupplyTemplate::siso(-1.0, 0.0, 0.0, &[("R", 0.0, 1.0)]);
    let mut problem = builder.build(plant, &template)?;
    let r = problem.slot(0);
    problem.minimize(r);
    problem.upper_bound(r, opts.r_cap);
    let report = solve(&problem, opts.tol)?;
    match report.status {
        Status::Infeasible => return Err(AnalysisError::NoFiniteGain),
        _ => accept(&report, "gain search")?,
    }
    let gain = report.x[r].max(0.0).sqrt();
    let sector = ConicSector::disk(0.0, gain);
    Ok(ConeSearchResult {
        mode: Mode::Gain,
        builder: builder.kind(),
        sector,
        qsr: conic_to_qsr(&sector)?,
        reports: vec![report],
        b_capped: false,
        a_open: None,
    })
}

/// Largest `a` for the half plane `(a, ∞)`, then the smallest `b` with `a` fixed.
pub fn max_a_then_min_b(
    plant: &PlantModel,
    builder: &Builder,
    opts: &AnalysisOptions,
) -> Result<ConeSearchResult, AnalysisError> {
    check_siso(plant)?;
    let open = SupplyTemplate::siso(0.0, 0.5, 0.0, &[("a", 0.0, -1.0)]);
    let mut p1 = builder.build(plant, &open)?;
    let a_id = p1.slot(0);
    p1.maximize(a_id);
    let rep1 = solve(&p1, opts.tol)?;
    accept(&rep1, "max-a phase 1")?;
    let a = rep1.x[a_id];

    let closed = SupplyTemplate::siso(-1.0, a / 2.0, 0.0, &[("b", 0.5, -a)]);
    let mut p2 = builder.build(plant, &closed)?;
    let b_id = p2.slot(0);
    p2.minimize(b_id);
    p2.upper_bound(b_id, opts.b_cap);
    p2.lower_bound(b_id, a + 1e-6 * (1.0 + a.abs()));
    let rep2 = solve(&p2, opts.tol)?;

    let (sector, reports, capped) = match rep2.status {
        Status::Feasible => {
            let b = rep2.x[b_id];
            let capped = b >= opts.b_cap * (1.0 - 1e-6);
            (ConicSector::interval(a, b), vec![rep1, rep2], capped)
        }
        _ => {
            let pinned = SupplyTemplate::siso(-1.0, opts.b_cap / 2.0, 0.0, &[("a", 0.5, -opts.b_cap)]);
            let mut p3 = builder.build(plant, &pinned)?;
            let id = p3.slot(0);
            p3.maximize(id);
            let rep3 = solve(&p3, opts.tol)?;
            accept(&rep3, "max-a with b at cap")?;
            let a_cap = rep3.x[id];
            (ConicSector::interval(a_cap, opts.b_cap), vec![rep1, rep2, rep3], true)
        }
    };
    Ok(ConeSearchResult {
        mode: Mode::MaxAMinB,
        builder: builder.kind(),
        sector,
        qsr: conic_to_qsr(&sector)?,
        reports,
        b_capped: capped,
        a_open: Some(a),
    })
}

/// Smallest disk `(c, r)` containing the plant.
pub fn min_radius(
    plant: &PlantModel,
    builder: &Builder,
    opts: &AnalysisOptions,
) -> Result<ConeSearchResult, AnalysisError> {
    check_siso(plant)?;
    let template = SupplyTemplate::siso(-1.0, 0.0, 0.0, &[("S", 1.0, 0.0), ("R", 0.0, 1.0)]);
    let mut problem = builder.build(plant, &template)?;
    let (s, r) = (problem.slot(0), problem.slot(1));
    problem.upper_bound(r, opts.r_cap);
    let sol = minimize_quadratic_radius(&problem, r, &[s], opts.tol)?;
    accept(&sol.report, "radius search")?;
    let sector = ConicSector::disk(sol.c, sol.r);
    Ok(ConeSearchResult {
        mode: Mode::MinRadius,
        builder: builder.kind(),
        sector,
        qsr: conic_to_qsr(&sector)?,
        reports: vec![sol.report],
        b_capped: false,
        a_open: None,
    })
}

pub fn search(
    plant: &PlantModel,
    builder: &Builder,
    mode: Mode,
    opts: &AnalysisOptions,
) -> Result<ConeSearchResult, AnalysisError> {
    match mode {
        Mode::Gain => min_gain(plant, builder, opts),
        Mode::MinRadius => min_radius(plant, builder, opts),
        Mode::MaxAMinB => max_a_then_min_b(plant, builder, opts),
    }
}

/// Fresh feasibility solve at a fixed supply rate.
pub fn recheck(
    plant: &PlantModel,
    builder: &Builder,
    qsr: &SupplyRate,
    tol: f64,
) -> Result<SolveReport, AnalysisError> {
    let problem = builder.build(plant, &SupplyTemplate::fixed(qsr))?;
    Ok(solve(&problem, tol)?)
}

#[derive(Debug, Clone)]
pub struct BuilderComparison {
    pub stochastic: Vec<ConeSearchResult>,
    pub deterministic: Vec<ConeSearchResult>,
    pub gain_ok: bool,
    pub a_ok: bool,
}

/// All three searches under both builders for one distribution.
pub fn compare_builders(
    plant: &PlantModel,
    dist: &DelayDistribution,
    opts: &AnalysisOptions,
) -> Result<BuilderComparison, AnalysisError> {
    let modes = [Mode::Gain, Mode::MinRadius, Mode::MaxAMinB];
    let sto = Builder::Stochastic(dist.clone());
    let det = Builder::deterministic_for(dist);
    let stochastic = modes.iter().map(|m| search(plant, &sto, *m, opts)).collect::<Result<Vec<_>, _>>()?;
    let deterministic = modes.iter().map(|m| search(plant, &det, *m, opts)).collect::<Result<Vec<_>, _>>()?;
    let gain_ok = stochastic[0].gain().unwrap() <= deterministic[0].gain().unwrap() + 0.05;
    let a_ok = stochastic[2].a().unwrap() >= deterministic[2].a().unwrap() - 0.05;
    Ok(BuilderComparison { stochastic, deterministic, gain_ok, a_ok })
}
