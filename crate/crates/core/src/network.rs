//! Interconnections of dissipative subsystems and static output feedback.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{conic_to_qsr, ConicSector, ModelError, SupplyRate, Upper};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("multipliers must be positive")]
    Multiplier,
    #[error("empty multiplier grid")]
    EmptyGrid,
    #[error("plant sector must satisfy a < 0 < b: {0}")]
    Sector(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Subsystems coupled through `u = H y + η`.
#[derive(Debug, Clone)]
pub struct Interconnection {
    pub systems: Vec<SupplyRate>,
    pub h: DMatrix<f64>,
    pub lambdas: Vec<f64>,
}

fn block_diag(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.iter().map(|m| m.nrows()).sum();
    let cols = parts.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for m in parts {
        out.view_mut((r, c), m.shape()).copy_from(m);
        r += m.nrows();
        c += m.ncols();
    }
    out
}

/// `λ`-weighted block-diagonal supply rates `(Q_Λ, S_Λ, R_Λ)`.
pub fn stacked(systems: &[SupplyRate], lambdas: &[f64]) -> SupplyRate {
    let scale = |f: fn(&SupplyRate) -> &DMatrix<f64>| -> Vec<DMatrix<f64>> {
        systems.iter().zip(lambdas).map(|(s, l)| f(s) * *l).collect()
    };
    SupplyRate { q: block_diag(&scale(|s| &s.q)), s: block_diag(&scale(|s| &s.s)), r: block_diag(&scale(|s| &s.r)) }
}

pub fn compose(ic: &Interconnection) -> Result<SupplyRate, NetworkError> {
    if ic.systems.len() != ic.lambdas.len() {
        return Err(NetworkError::Dimension("one multiplier per subsystem".into()));
    }
    if ic.lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(NetworkError::Multiplier);
    }
    let lam = stacked(&ic.systems, &ic.lambdas);
    let (p, m) = (lam.q.nrows(), lam.r.nrows());
    if ic.h.shape() != (m, p) {
        return Err(NetworkError::Dimension(format!("H is {:?}, expected ({m}, {p})", ic.h.shape())));
    }
    let h = &ic.h;
    let sh = &lam.s * h;
    let q = &lam.q + &sh + sh.transpose() + h.transpose() * &lam.r * h;
    let s = &lam.s + h.transpose() * &lam.r;
    Ok(SupplyRate { q: (&q + q.transpose()) * 0.5, s, r: lam.r })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    NotConcluded,
}

/// `-λ_max(Q) / ‖Q‖_F`; positive means strictly negative definite.
pub fn normalized_margin(q: &DMatrix<f64>) -> f64 {
    let norm = q.norm();
    if norm == 0.0 {
        return 0.0;
    }
    -q.clone().symmetric_eigenvalues().max() / norm
}

pub fn stable_in_expectation(qsr: &SupplyRate) -> Verdict {
    if normalized_margin(&qsr.q) > 1e-9 {
        Verdict::Stable
    } else {
        Verdict::NotConcluded
    }
}

/// Logarithmic multiplier grid.
#[derive(Debug, Clone)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self { lo: 1e-3, hi: 1e3, points: 50 }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        (0..self.points).map(|i| (a + (b - a) * i as f64 / (self.points - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SofOptions {
    pub grid: LambdaGrid,
    /// Finite stand-in for an open upper intercept.
    pub b_cap: f64,
    pub resolution: f64,
}

impl Default for SofOptions {
    fn default() -> Self {
        Self { grid: LambdaGrid::default(), b_cap: 1e5, resolution: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct SofResult {
    pub k: f64,
    pub lambdas: [f64; 2],
    pub margin: f64,
    /// The plant supply rate actually composed.
    pub plant_qsr: SupplyRate,
}

pub fn negative_feedback() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
}

/// Closed-loop supply of the plant with the static gain cone `(0, k)`.
pub fn feedback_supply(plant: &SupplyRate, k: f64, lambdas: [f64; 2]) -> Result<SupplyRate, NetworkError> {
    let controller = SupplyRate::siso(-1.0, k / 2.0, 0.0);
    compose(&Interconnection {
        systems: vec![plant.clone(), controller],
        h: negative_feedback(),
        lambdas: lambdas.to_vec(),
    })
}

fn best_multipliers(plant: &SupplyRate, k: f64, grid: &[f64]) -> Result<([f64; 2], f64), NetworkError> {
    let mut best = ([1.0, 1.0], f64::NEG_INFINITY);
    for &l1 in grid {
        for &l2 in grid {
            let m = normalized_margin(&feedback_supply(plant, k, [l1, l2])?.q);
            if m > best.1 {
                best = ([l1, l2], m);
            }
        }
    }
    if best.1 > 1e-9 {
        return Ok(best);
    }
    // -λ_max(Q) is concave on the simplex λ1 + λ2 = 1, so a golden-section
    // search over θ = λ2 finds the best multiplier ratio.
    let f = |theta: f64| -> Result<f64, NetworkError> {
        let q = feedback_supply(plant, k, [1.0 - theta, theta])?.q;
        Ok(-q.symmetric_eigenvalues().max())
    };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    for _ in 0..200 {
        if hi - lo < 1e-16 {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2)?;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1)?;
        }
    }
    let theta = if f1 > f2 { x1 } else { x2 };
    if theta > 0.0 && theta < 1.0 {
        let lam = [1.0 - theta, theta];
        let m = normalized_margin(&feedback_supply(plant, k, lam)?.q);
        if m > best.1 {
            best = (lam, m);
        }
    }
    Ok(best)
}

fn plant_supply(plant_sector: &ConicSector, opts: &SofOptions) -> Result<SupplyRate, NetworkError> {
    if opts.grid.points == 0 {
        return Err(NetworkError::EmptyGrid);
    }
    let sector = match *plant_sector {
        ConicSector::Interval { a, b: Upper::Infinite } => ConicSector::interval(a, opts.b_cap.max(a.abs() + 1.0)),
        s @ ConicSector::Interval { .. } => s,
        d @ ConicSector::Disk { .. } => crate::model::to_interval(&d),
    };
    if let ConicSector::Interval { a, b: Upper::Finite(b) } = sector {
        if !(a < 0.0 && b > 0.0) {
            return Err(NetworkError::Sector(format!("a={a}, b={b}")));
        }
    }
    Ok(conic_to_qsr(&sector)?)
}

#[derive(Debug, Clone)]
pub struct LoopCheck {
    pub verdict: Verdict,
    pub lambdas: [f64; 2],
    pub margin: f64,
}

/// Best multiplier pair for the loop with a fixed gain `k`.
pub fn check_gain(plant_sector: &ConicSector, k: f64, opts: &SofOptions) -> Result<LoopCheck, NetworkError> {
    if !(k >= 0.0) {
        return Err(NetworkError::Sector(format!("controller gain {k} must be nonnegative")));
    }
    let plant = plant_supply(plant_sector, opts)?;
    let (lambdas, margin) = best_multipliers(&plant, k, &opts.grid.values())?;
    let verdict = if margin > 1e-9 { Verdict::Stable } else { Verdict::NotConcluded };
    Ok(LoopCheck { verdict, lambdas, margin })
}

/// Largest static gain `K` whose cone `(0, K)` closes a certified loop with
/// the plant sector.
pub fn sof_max_gain(plant_sector: &ConicSector, opts: &SofOptions) -> Result<SofResult, NetworkError> {
    let plant = plant_supply(plant_sector, opts)?;
    let grid = opts.grid.values();
    let ok = |k: f64| -> Result<Option<([f64; 2], f64)>, NetworkError> {
        let (lam, m) = best_multipliers(&plant, k, &grid)?;
        Ok((m > 1e-9).then_some((lam, m)))
    };

    // K = 0 leaves the loop open and is accepted without a certificate.
    let mut lo = 0.0;
    let mut lo_cert = ([1.0, 1.0], f64::NAN);
    let mut hi = 1.0;
    while let Some(c) = ok(hi)? {
        lo = hi;
        lo_cert = c;
        hi *= 2.0;
        if hi > 1e9 {
            break;
        }
    }
    while hi - lo > opts.resolution {
        let mid = 0.5 * (lo + hi);
        match ok(mid)? {
            Some(c) => {
                lo = mid;
                lo_cert = c;
            }
            None => hi = mid,
        }
    }
    Ok(SofResult { k: lo, lambdas: lo_cert.0, margin: lo_cert.1, plant_qsr: plant })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_system_passthrough() {
        let s = SupplyRate::siso(-1.0, 0.3, 2.0);
        let out = compose(&Interconnection { systems: vec![s.clone()], h: DMatrix::zeros(1, 1), lambdas: vec![1.0] })
            .unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn passive_feedback_is_lossless() {
        let p = SupplyRate::siso(0.0, 0.5, 0.0);
        let out =
            compose(&Interconnection { systems: vec![p.clone(), p], h: negative_feedback(), lambdas: vec![1.0, 1.0] })
                .unwrap();
        assert!(out.q.amax() < 1e-15);
        assert_eq!(stable_in_expectation(&out), Verdict::NotConcluded);
    }

    #[test]
    fn verdicts() {
        assert_eq!(stable_in_expectation(&SupplyRate::siso(-1.0, 0.0, 0.0)), Verdict::Stable);
        assert_eq!(stable_in_expectation(&SupplyRate::siso(0.0, 0.0, 0.0)), Verdict::NotConcluded);
    }

    #[test]
    fn rejects_bad_multipliers() {
        let s = SupplyRate::siso(-1.0, 0.0, 1.0);
        let ic = Interconnection { systems: vec![s], h: DMatrix::zeros(1, 1), lambdas: vec![0.0] };
        assert_eq!(compose(&ic), Err(NetworkError::Multiplier));
        let opts = SofOptions { grid: LambdaGrid { points: 0, ..LambdaGrid::default() }, ..SofOptions::default() };
        assert_eq!(sof_max_gain(&ConicSector::half_plane(-1.0), &opts).unwrap_err(), NetworkError::EmptyGrid);
    }

    #[test]
    fn grid_endpoints() {
        let v = LambdaGrid::default().values();
        assert_eq!(v.len(), 50);
        assert!((v[0] - 1e-3).abs() < 1e-15 && (v[49] - 1e3).abs() < 1e-9);
    }
}
