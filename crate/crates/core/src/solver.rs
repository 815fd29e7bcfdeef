//! Dense log-det barrier solver for small LMI problems.
//!
//! Phase I maximizes a common margin `s` with every scaled constraint
//! `G_j(x) ⪰ s·I`; the problem is declared infeasible once the optimum is
//! provably below `-tol`. Phase II then follows the central path of the linear
//! objective from the phase I point.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::lmi::{AffineMatrixExpr, LMIProblem, LmiError, VarId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("tolerance {0} outside [1e-10, 1e-4]")]
    Tolerance(f64),
    #[error(transparent)]
    Problem(#[from] LmiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: Status,
    pub objective: Option<f64>,
    pub x: Vec<f64>,
    /// Smallest eigenvalue over the raw constraints `expr - lower·I`.
    pub margin: f64,
    /// Same on the Frobenius-normalized constraints.
    pub scaled_margin: f64,
    /// Best phase I margin (upper bound when infeasible).
    pub phase1_margin: f64,
    /// Duality-gap bound of the last centering.
    pub gap: f64,
    pub relaxed: bool,
    pub iterations: usize,
    pub wall_time: Duration,
    pub diagnostics: String,
}

impl SolveReport {
    pub fn is_feasible(&self) -> bool {
        self.status == Status::Feasible
    }

    /// Everything except the wall time.
    pub fn same_result(&self, other: &SolveReport) -> bool {
        self.status == other.status
            && self.objective.map(f64::to_bits) == other.objective.map(f64::to_bits)
            && self.x.iter().map(|v| v.to_bits()).eq(other.x.iter().map(|v| v.to_bits()))
            && self.margin.to_bits() == other.margin.to_bits()
            && self.iterations == other.iterations
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    /// Box `|x_i| ≤ bound` keeping the central path bounded.
    pub box_bound: f64,
    pub mu: f64,
    pub max_newton: usize,
    pub max_outer: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, box_bound: 1e7, mu: 10.0, max_newton: 200, max_outer: 40 }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
struct Block {
    c0: DMatrix<f64>,
    terms: Vec<(usize, DMatrix<f64>)>,
}

impl Block {
    fn dim(&self) -> usize {
        self.c0.nrows()
    }

    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut g = self.c0.clone();
        for (i, f) in &self.terms {
            if x[*i] != 0.0 {
                g += f * x[*i];
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
struct Barrier {
    blocks: Vec<Block>,
    c: Vec<f64>,
}

enum CenterOutcome {
    Centered(usize),
    Stalled(usize, String),
}

impl Barrier {
    fn nu(&self) -> f64 {
        self.blocks.iter().map(|b| b.dim() as f64).sum()
    }

    fn factor(&self, x: &[f64]) -> Option<Vec<Cholesky<f64, Dyn>>> {
        self.blocks.iter().map(|b| Cholesky::new(b.eval(x))).collect()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    fn newton_system(&self, x: &[f64], t: f64, chols: &[Cholesky<f64, Dyn>]) -> (DVector<f64>, DMatrix<f64>) {
        let nv = x.len();
        let mut g = DVector::from_iterator(nv, self.c.iter().map(|c| t * c));
        let mut h = DMatrix::zeros(nv, nv);
        for (b, ch) in self.blocks.iter().zip(chols) {
            let l = ch.l();
            let scaled: Vec<(usize, DMatrix<f64>)> = b
                .terms
                .iter()
                .map(|(i, f)| {
                    let y = l.solve_lower_triangular(f).expect("nonsingular factor");
                    let z = l.solve_lower_triangular(&y.transpose()).expect("nonsingular factor");
                    (*i, z)
                })
                .collect();
            for (a, (i, fi)) in scaled.iter().enumerate() {
                g[*i] -= fi.trace();
                for (k, fk) in scaled.iter().skip(a) {
                    let v = fi.dot(fk);
                    h[(*i, *k)] += v;
                    if *i != *k {
                        h[(*k, *i)] += v;
                    }
                }
            }
        }
        (g, h)
    }

    fn center(&self, x: &mut [f64], t: f64, max_newton: usize) -> CenterOutcome {
        let mut it = 0;
        while it < max_newton {
            it += 1;
            let chols = match self.factor(x) {
                Some(c) => c,
                None => return CenterOutcome::Stalled(it, "iterate left the cone".into()),
            };
            let (g, h) = self.newton_system(x, t, &chols);
            let d = match solve_spd(&h, &(-&g)) {
                Some(d) => d,
                None => return CenterOutcome::Stalled(it, "singular Newton system".into()),
            };
            let dec = -g.dot(&d);
            if !dec.is_finite() {
                return CenterOutcome::Stalled(it, "non-finite Newton decrement".into());
            }
            if dec <= 1e-12 {
                return CenterOutcome::Centered(it);
            }
            let lam = dec.sqrt();
            let mut step = if lam > 0.25 { 1.0 / (1.0 + lam) } else { 1.0 };
            let mut moved = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(xi, di)| xi + step * di).collect();
                if self.factor(&trial).is_some() {
                    x.copy_from_slice(&trial);
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                return CenterOutcome::Stalled(it, "no feasible step".into());
            }
            // Near the end of the path rounding keeps λ from shrinking further.
            if lam <= 1e-6 || (lam < 1e-2 && it >= 40) {
                return CenterOutcome::Centered(it);
            }
        }
        CenterOutcome::Stalled(it, "Newton iteration limit".into())
    }
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = Cholesky::new(h.clone()) {
        let d = ch.solve(rhs);
        if d.iter().all(|v| v.is_finite()) {
            return Some(d);
        }
    }
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = 1e-14 * scale;
    for _ in 0..8 {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(hr) {
            let d = ch.solve(rhs);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        reg *= 100.0;
    }
    None
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigenvalues().min()
}

/// Normalized constraint data `(expr - lower·I) / ν`.
fn scaled_blocks(problem: &LMIProblem) -> (Vec<Block>, Vec<f64>) {
    let mut blocks = Vec::new();
    let mut scales = Vec::new();
    for c in &problem.constraints {
        let d = c.expr.rows();
        if d == 0 {
            continue;
        }
        let c0 = c.expr.constant_part() - DMatrix::identity(d, d) * c.lower;
        let mut nu2 = c0.norm_squared();
        for (_, f) in c.expr.terms() {
            nu2 += f.norm_squared();
        }
        let nu = if nu2 > 0.0 { nu2.sqrt() } else { 1.0 };
        scales.push(nu);
        blocks.push(Block { c0: c0 / nu, terms: c.expr.terms().map(|(i, f)| (i, f / nu)).collect() });
    }
    (blocks, scales)
}

fn box_blocks(nvar: usize, bound: f64) -> Vec<Block> {
    let mut out = Vec::with_capacity(2 * nvar);
    for i in 0..nvar {
        for sign in [1.0, -1.0] {
            out.push(Block {
                c0: DMatrix::from_element(1, 1, 1.0),
                terms: vec![(i, DMatrix::from_element(1, 1, sign / bound))],
            });
        }
    }
    out
}

struct PhaseOne {
    x: Vec<f64>,
    s: f64,
    upper: f64,
    iterations: usize,
    note: String,
}

fn phase_one(blocks: &[Block], nvar: usize, x0: &[f64], opts: &SolverOptions) -> PhaseOne {
    let s_id = nvar;
    let mut bar_blocks: Vec<Block> = blocks
        .iter()
        .map(|b| {
            let mut b = b.clone();
            b.terms.push((s_id, -DMatrix::identity(b.dim(), b.dim())));
            b
        })
        .collect();
    bar_blocks.extend(box_blocks(nvar, opts.box_bound));
    bar_blocks
        .push(Block { c0: DMatrix::from_element(1, 1, 1.0), terms: vec![(s_id, DMatrix::from_element(1, 1, -1.0))] });
    let mut c = vec![0.0; nvar + 1];
    c[s_id] = -1.0;
    let bar = Barrier { blocks: bar_blocks, c };

    let start_margin = blocks.iter().map(|b| min_eig(&b.eval(x0))).fold(f64::INFINITY, f64::min).min(0.0);
    let mut x: Vec<f64> = x0.to_vec();
    x.push(start_margin - 1.0);

    let nu = bar.nu();
    let mut t = 1.0;
    let mut iterations = 0;
    let mut note = String::new();
    for _ in 0..opts.max_outer {
        match bar.center(&mut x, t, opts.max_newton) {
            CenterOutcome::Centered(k) => iterations += k,
            CenterOutcome::Stalled(k, why) => {
                iterations += k;
                note = format!("phase I stalled at t={t:.1e}: {why}");
                break;
            }
        }
        let s = x[s_id];
        let gap = nu / t;
        if s > 0.0 || s + gap < -opts.tol || gap <= opts.tol {
            break;
        }
        t *= opts.mu;
    }
    let s = x[s_id];
    let upper = s + nu / t;
    x.truncate(nvar);
    PhaseOne { x, s, upper, iterations, note }
}

/// Feasibility with margin, then minimization of the optional objective.
pub fn solve(problem: &LMIProblem, tol: f64) -> Result<SolveReport, SolverError> {
    solve_with(problem, &SolverOptions::with_tol(tol))
}

pub fn solve_with(problem: &LMIProblem, opts: &SolverOptions) -> Result<SolveReport, SolverError> {
    if !(1e-10..=1e-4).contains(&opts.tol) {
        return Err(SolverError::Tolerance(opts.tol));
    }
    problem.validate()?;
    let started = Instant::now();
    let nvar = problem.vars.len();
    let (blocks, _) = scaled_blocks(problem);
    let scaled_margin =
        |x: &[f64], blocks: &[Block]| blocks.iter().map(|b| min_eig(&b.eval(x))).fold(f64::INFINITY, f64::min);

    let p1 = phase_one(&blocks, nvar, &vec![0.0; nvar], opts);
    let mut report = SolveReport {
        status: Status::Feasible,
        objective: None,
        x: p1.x.clone(),
        margin: problem.raw_margin(&p1.x),
        scaled_margin: scaled_margin(&p1.x, &blocks),
        phase1_margin: p1.s,
        gap: p1.upper - p1.s,
        relaxed: false,
        iterations: p1.iterations,
        wall_time: Duration::ZERO,
        diagnostics: p1.note.clone(),
    };

    if p1.upper < -opts.tol {
        report.status = Status::Infeasible;
        report.wall_time = started.elapsed();
        return Ok(report);
    }
    if p1.s < -opts.tol {
        report.status = Status::NumericalFailure;
        report.diagnostics = format!("margin undecided: best {:.3e}, bound {:.3e}; {}", p1.s, p1.upper, p1.note);
        report.wall_time = started.elapsed();
        return Ok(report);
    }

    let objective = match &problem.objective {
        None => {
            report.wall_time = started.elapsed();
            return Ok(report);
        }
        Some(obj) => obj,
    };

    let mut work = blocks.clone();
    if p1.s <= 0.0 {
        let shift = 0.5 * (opts.tol - p1.s);
        for b in &mut work {
            let d = b.dim();
            b.c0 += DMatrix::identity(d, d) * shift;
        }
        report.relaxed = true;
    }
    let mut c = vec![0.0; nvar];
    for (v, coef) in objective {
        c[*v] += coef;
    }
    work.extend(box_blocks(nvar, opts.box_bound));
    let bar = Barrier { blocks: work, c };
    let nu = bar.nu();
    let mut x = p1.x.clone();
    let mut t = 1.0 / (1.0 + bar.objective(&x).abs());
    let mut note = String::new();
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_outer {
        match bar.center(&mut x, t, opts.max_newton) {
            CenterOutcome::Centered(k) => report.iterations += k,
            CenterOutcome::Stalled(k, why) => {
                report.iterations += k;
                note = format!("phase II stalled at t={t:.1e}: {why}");
                break;
            }
        }
        gap = nu / t;
        if gap <= opts.tol * (1.0 + bar.objective(&x).abs()) {
            break;
        }
        t *= opts.mu;
    }
    let value = bar.objective(&x);
    report.objective = Some(value);
    report.margin = problem.raw_margin(&x);
    report.scaled_margin = scaled_margin(&x, &blocks);
    report.gap = gap;
    if !note.is_empty() {
        report.diagnostics = note;
        if !(gap <= 1e-4 * (1.0 + value.abs())) {
            report.status = Status::NumericalFailure;
        }
    }
    if report.scaled_margin < -opts.tol {
        report.status = Status::NumericalFailure;
        report.diagnostics = format!("final margin {:.3e} below tolerance", report.scaled_margin);
    }
    report.x = x;
    report.wall_time = started.elapsed();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RadiusSolution {
    pub report: SolveReport,
    pub c: f64,
    pub r: f64,
}

/// Minimizes `R + SᵀS` through the epigraph `[[t - R, Sᵀ], [S, I]] ⪰ 0`.
pub fn minimize_quadratic_radius(
    problem: &LMIProblem,
    r_slot: VarId,
    s_slots: &[VarId],
    tol: f64,
) -> Result<RadiusSolution, SolverError> {
    let mut p = problem.clone();
    let t = p.vars.add_scalar("t");
    let k = s_slots.len();
    let one = |v: VarId| AffineMatrixExpr::scalar(v);
    let mut s_col = AffineMatrixExpr::zeros(k, 1);
    for (i, &v) in s_slots.iter().enumerate() {
        s_col = s_col + one(v).embed(k, 1, i, 0);
    }
    let head = one(t) - one(r_slot);
    let epi = AffineMatrixExpr::blocks(&[
        vec![head, s_col.transpose()],
        vec![s_col, AffineMatrixExpr::constant(DMatrix::identity(k, k))],
    ]);
    p.add("radius epigraph", epi, 0.0);
    p.minimize(t);
    let report = solve(&p, tol)?;
    let c = s_slots.first().map_or(0.0, |v| report.x[*v]);
    let r = report.x[t].max(0.0).sqrt();
    Ok(RadiusSolution { report, c, r })
}
