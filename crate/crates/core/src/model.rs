//! Plants, delay distributions, supply rates and conic sectors.

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("invalid delay distribution: {0}")]
    Distribution(String),
    #[error("invalid sector: {0}")]
    Sector(String),
    #[error("supply rate cannot be written as a conic sector: {0}")]
    NotConic(String),
    #[error("unstable plant: spectral radius {0:.6}")]
    Unstable(f64),
    #[error("{0}")]
    Other(String),
}

/// Discrete LTI realization `x+ = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(ModelError::Dimension(format!("A is {}x{}", n, a.ncols())));
        }
        let m = d.ncols();
        let p = d.nrows();
        if b.nrows() != n || b.ncols() != m {
            return Err(ModelError::Dimension(format!("B is {}x{}, expected {}x{}", b.nrows(), b.ncols(), n, m)));
        }
        if c.nrows() != p || c.ncols() != n {
            return Err(ModelError::Dimension(format!("C is {}x{}, expected {}x{}", c.nrows(), c.ncols(), p, n)));
        }
        for (name, mat) in [("A", &a), ("B", &b), ("C", &c), ("D", &d)] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        Ok(Self { a, b, c, d })
    }

    /// Memoryless plant `y = D u`.
    pub fn static_gain(d: DMatrix<f64>) -> Self {
        let (p, m) = d.shape();
        Self::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, m), DMatrix::zeros(p, 0), d)
            .expect("static gain is always consistent")
    }

    /// Builds a plant from row-major literals.
    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>], d: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = a.len();
        let m = d.first().map_or(0, |r| r.len());
        let p = d.len();
        Self::new(
            matrix_from_rows(a, n, n, "A")?,
            matrix_from_rows(b, n, m, "B")?,
            matrix_from_rows(c, p, n, "C")?,
            matrix_from_rows(d, p, m, "D")?,
        )
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.d.ncols()
    }
    pub fn p(&self) -> usize {
        self.d.nrows()
    }

    /// Frobenius norm of `[A B; C D]`.
    pub fn frobenius(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared() + self.c.norm_squared() + self.d.norm_squared()).sqrt()
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Transfer matrix `C (zI - A)^{-1} B + D` at `z = e^{iω}`.
    pub fn frequency_response(&self, omega: f64) -> DMatrix<Complex<f64>> {
        let z = Complex::new(omega.cos(), omega.sin());
        let d = self.d.map(|v| Complex::new(v, 0.0));
        let n = self.n();
        if n == 0 {
            return d;
        }
        let a = self.a.map(|v| Complex::new(v, 0.0));
        let zi_a = DMatrix::<Complex<f64>>::identity(n, n) * z - a;
        let b = self.b.map(|v| Complex::new(v, 0.0));
        let c = self.c.map(|v| Complex::new(v, 0.0));
        let x = zi_a.lu().solve(&b).unwrap_or_else(|| DMatrix::from_element(n, self.m(), Complex::new(f64::NAN, 0.0)));
        c * x + d
    }
}

pub(crate) fn matrix_from_rows(
    rows: &[Vec<f64>],
    nr: usize,
    nc: usize,
    name: &str,
) -> Result<DMatrix<f64>, ModelError> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(ModelError::Dimension(format!("{name} must be {nr}x{nc}")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// The two-state, single-input benchmark plant, with `A[1][0] = 0.0381`.
pub fn benchmark_plant() -> PlantModel {
    benchmark_with_a21(0.0381)
}

/// Same plant with `A[1][0] = 0.00381`.
pub fn benchmark_plant_small_coupling() -> PlantModel {
    benchmark_with_a21(0.00381)
}

fn benchmark_with_a21(a21: f64) -> PlantModel {
    PlantModel::new(
        DMatrix::from_row_slice(2, 2, &[0.6024, -0.0038, a21, 0.9451]),
        DMatrix::from_row_slice(2, 1, &[0.1647, 0.0960]),
        DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        DMatrix::zeros(1, 1),
    )
    .unwrap()
}

/// i.i.d. delay law on `{w_min, ..., w_max}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDistribution {
    w_min: usize,
    w_max: usize,
    pmf: Vec<f64>,
}

impl DelayDistribution {
    pub fn new(w_min: usize, w_max: usize, pmf: Vec<f64>) -> Result<Self, ModelError> {
        if w_min < 1 {
            return Err(ModelError::Distribution("w_min must be at least 1".into()));
        }
        if w_max < w_min {
            return Err(ModelError::Distribution(format!("w_max {w_max} < w_min {w_min}")));
        }
        if pmf.len() != w_max - w_min + 1 {
            return Err(ModelError::Distribution(format!(
                "pmf has {} entries for support of size {}",
                pmf.len(),
                w_max - w_min + 1
            )));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ModelError::Distribution("negative or non-finite probability".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ModelError::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { w_min, w_max, pmf })
    }

    pub fn point_mass(w: usize) -> Result<Self, ModelError> {
        Self::new(w, w, vec![1.0])
    }

    pub fn uniform(w_min: usize, w_max: usize) -> Result<Self, ModelError> {
        if w_max < w_min {
            return Err(ModelError::Distribution(format!("w_max {w_max} < w_min {w_min}")));
        }
        let k = w_max - w_min + 1;
        Self::new(w_min, w_max, vec![1.0 / k as f64; k])
    }

    pub fn w_min(&self) -> usize {
        self.w_min
    }
    pub fn w_max(&self) -> usize {
        self.w_max
    }
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn prob(&self, w: usize) -> f64 {
        if w < self.w_min || w > self.w_max {
            0.0
        } else {
            self.pmf[w - self.w_min]
        }
    }

    /// `(w, p)` pairs in increasing delay order.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pmf.iter().enumerate().map(move |(i, &p)| (self.w_min + i, p))
    }

    pub fn mean(&self) -> f64 {
        self.support().map(|(w, p)| w as f64 * p).sum()
    }

    pub fn mode(&self) -> usize {
        let mut best = (self.w_min, -1.0);
        for (w, p) in self.support() {
            if p > best.1 {
                best = (w, p);
            }
        }
        best.0
    }
}

/// The five delay laws `P1..P5` on `{1..5}`.
pub fn benchmark_distributions() -> Vec<(&'static str, DelayDistribution)> {
    let rows: [(&str, [f64; 5]); 5] = [
        ("P1", [0.01, 0.01, 0.01, 0.01, 0.96]),
        ("P2", [0.05, 0.05, 0.05, 0.1, 0.75]),
        ("P3", [0.2, 0.2, 0.2, 0.2, 0.2]),
        ("P4", [0.75, 0.1, 0.05, 0.05, 0.05]),
        ("P5", [0.96, 0.01, 0.01, 0.01, 0.01]),
    ];
    rows.iter().map(|(name, p)| (*name, DelayDistribution::new(1, 5, p.to_vec()).unwrap())).collect()
}

/// Quadratic supply `yᵀQy + 2yᵀSu + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyRate {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl SupplyRate {
    pub fn new(q: DMatrix<f64>, s: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, ModelError> {
        let p = q.nrows();
        let m = r.nrows();
        if q.ncols() != p || r.ncols() != m || s.shape() != (p, m) {
            return Err(ModelError::Dimension(format!("Q {:?}, S {:?}, R {:?}", q.shape(), s.shape(), r.shape())));
        }
        for (name, mat) in [("Q", &q), ("S", &s), ("R", &r)] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name));
            }
        }
        if !is_symmetric(&q, 1e-12) || !is_symmetric(&r, 1e-12) {
            return Err(ModelError::Other("Q and R must be symmetric".into()));
        }
        Ok(Self { q, s, r })
    }

    pub fn siso(q: f64, s: f64, r: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, s), DMatrix::from_element(1, 1, r))
            .expect("finite scalars")
    }

    pub fn p(&self) -> usize {
        self.q.nrows()
    }
    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn eval(&self, y: &[f64], u: &[f64]) -> f64 {
        let y = nalgebra::DVector::from_column_slice(y);
        let u = nalgebra::DVector::from_column_slice(u);
        (y.transpose() * &self.q * &y)[(0, 0)]
            + 2.0 * (y.transpose() * &self.s * &u)[(0, 0)]
            + (u.transpose() * &self.r * &u)[(0, 0)]
    }
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Upper intercept of a sector; `Infinite` is kept distinct from any float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Upper {
    Finite(f64),
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConicSector {
    /// Real-axis intercepts `a < b`.
    Interval { a: f64, b: Upper },
    /// Disk with center `c` and radius `r > 0`.
    Disk { c: f64, r: f64 },
}

impl ConicSector {
    pub fn interval(a: f64, b: f64) -> Self {
        ConicSector::Interval { a, b: Upper::Finite(b) }
    }
    pub fn half_plane(a: f64) -> Self {
        ConicSector::Interval { a, b: Upper::Infinite }
    }
    pub fn disk(c: f64, r: f64) -> Self {
        ConicSector::Disk { c, r }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            ConicSector::Interval { a, b } => {
                if !a.is_finite() {
                    return Err(ModelError::Sector("a must be finite".into()));
                }
                if let Upper::Finite(b) = b {
                    if !b.is_finite() || a >= b {
                        return Err(ModelError::Sector(format!("need a < b, got a={a}, b={b}")));
                    }
                }
                Ok(())
            }
            ConicSector::Disk { c, r } => {
                if !c.is_finite() || !r.is_finite() || r <= 0.0 {
                    return Err(ModelError::Sector(format!("need r > 0, got r={r}")));
                }
                Ok(())
            }
        }
    }

    /// Sign-correct membership test `(bu - y)(y - au) >= 0`, or `y (y - a u)`
    /// form for an open upper end.
    pub fn contains(&self, u: f64, y: f64) -> bool {
        match *self {
            ConicSector::Interval { a, b: Upper::Finite(b) } => (b * u - y) * (y - a * u) >= 0.0,
            ConicSector::Interval { a, b: Upper::Infinite } => u * (y - a * u) >= 0.0,
            ConicSector::Disk { c, r } => (y - c * u).powi(2) <= r * r * u * u,
        }
    }
}

pub fn conic_to_qsr(sector: &ConicSector) -> Result<SupplyRate, ModelError> {
    sector.validate()?;
    Ok(match *sector {
        ConicSector::Interval { a, b: Upper::Finite(b) } => SupplyRate::siso(-1.0, (a + b) / 2.0, -a * b),
        ConicSector::Interval { a, b: Upper::Infinite } => SupplyRate::siso(0.0, 0.5, -a),
        ConicSector::Disk { c, r } => SupplyRate::siso(-1.0, c, r * r - c * c),
    })
}

/// Inverse of [`conic_to_qsr`], returned in disk form when `Q = -1` and in
/// half-plane form when `Q = 0, S = 1/2`.
pub fn qsr_to_conic(qsr: &SupplyRate) -> Result<ConicSector, ModelError> {
    if qsr.p() != 1 || qsr.m() != 1 {
        return Err(ModelError::NotConic("not SISO".into()));
    }
    let (q, s, r) = (qsr.q[(0, 0)], qsr.s[(0, 0)], qsr.r[(0, 0)]);
    if (q + 1.0).abs() <= 1e-9 {
        let rad2 = r + s * s;
        if rad2 <= 0.0 {
            return Err(ModelError::NotConic(format!("R + S² = {rad2} is not positive")));
        }
        Ok(ConicSector::Disk { c: s, r: rad2.sqrt() })
    } else if q.abs() <= 1e-9 && (s - 0.5).abs() <= 1e-9 {
        Ok(ConicSector::Interval { a: -r, b: Upper::Infinite })
    } else {
        Err(ModelError::NotConic(format!("Q={q}, S={s}")))
    }
}

/// Disk form to interval form and back; identity on half planes.
pub fn to_interval(sector: &ConicSector) -> ConicSector {
    match *sector {
        ConicSector::Disk { c, r } => ConicSector::interval(c - r, c + r),
        other => other,
    }
}

pub fn to_disk(sector: &ConicSector) -> Option<ConicSector> {
    match *sector {
        ConicSector::Interval { a, b: Upper::Finite(b) } => Some(ConicSector::disk((a + b) / 2.0, (b - a) / 2.0)),
        ConicSector::Interval { b: Upper::Infinite, .. } => None,
        d @ ConicSector::Disk { .. } => Some(d),
    }
}

/// Peak largest singular value of the delay-free transfer matrix on a uniform
/// grid of `grid_points` frequencies in `[0, π]`.
pub fn freq_gain(plant: &PlantModel, grid_points: usize) -> Result<f64, ModelError> {
    if grid_points < 64 {
        return Err(ModelError::Other(format!("grid_points {grid_points} < 64")));
    }
    let rho = plant.spectral_radius();
    if rho >= 1.0 {
        return Err(ModelError::Unstable(rho));
    }
    let mut best: f64 = 0.0;
    for k in 0..grid_points {
        let omega = std::f64::consts::PI * k as f64 / (grid_points - 1) as f64;
        let g = plant.frequency_response(omega);
        let s = if g.nrows() == 1 && g.ncols() == 1 {
            g[(0, 0)].norm()
        } else {
            g.singular_values().iter().cloned().fold(0.0, f64::max)
        };
        best = best.max(s);
    }
    Ok(best)
}

/// Smallest real part of a SISO frequency response over a uniform grid.
pub fn min_real_part(plant: &PlantModel, grid_points: usize) -> Result<(f64, f64), ModelError> {
    if plant.m() != 1 || plant.p() != 1 {
        return Err(ModelError::Dimension("min_real_part needs a SISO plant".into()));
    }
    let rho = plant.spectral_radius();
    if rho >= 1.0 {
        return Err(ModelError::Unstable(rho));
    }
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..grid_points.max(2) {
        let omega = std::f64::consts::PI * k as f64 / (grid_points.max(2) - 1) as f64;
        let re = plant.frequency_response(omega)[(0, 0)].re;
        if re < best.0 {
            best = (re, omega);
        }
    }
    Ok(best)
}

/// Solved certificate for a fixed supply rate.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub qsr: SupplyRate,
    pub feasible: bool,
    pub margin: f64,
    pub variables: Vec<f64>,
    pub beta_hint: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn half_plane_at_zero_is_passivity() {
        let q = conic_to_qsr(&ConicSector::half_plane(0.0)).unwrap();
        assert_eq!((q.q[(0, 0)], q.s[(0, 0)], q.r[(0, 0)]), (0.0, 0.5, 0.0));
    }

    #[test]
    fn symmetric_unit_cone() {
        let q = conic_to_qsr(&ConicSector::interval(-1.0, 1.0)).unwrap();
        assert_eq!((q.q[(0, 0)], q.s[(0, 0)], q.r[(0, 0)]), (-1.0, 0.0, 1.0));
    }

    #[test]
    fn disk_radius_squared() {
        let q = conic_to_qsr(&ConicSector::disk(0.0, 4.5)).unwrap();
        assert_abs_diff_eq!(q.r[(0, 0)], 20.25);
        assert_eq!(q.q[(0, 0)], -1.0);
    }

    #[test]
    fn inverse_maps() {
        assert_eq!(qsr_to_conic(&SupplyRate::siso(-1.0, 0.0, 4.0)).unwrap(), ConicSector::disk(0.0, 2.0));
        assert_eq!(qsr_to_conic(&SupplyRate::siso(0.0, 0.5, 0.9)).unwrap(), ConicSector::half_plane(-0.9));
        let s = ConicSector::interval(-2.8, 1e5);
        let back = to_interval(&qsr_to_conic(&conic_to_qsr(&s).unwrap()).unwrap());
        match back {
            ConicSector::Interval { a, b: Upper::Finite(b) } => {
                assert!((a + 2.8).abs() < 1e-9);
                assert!((b - 1e5).abs() < 1e-9);
            }
            _ => panic!("expected interval"),
        }
    }

    #[test]
    fn rejects_bad_sectors() {
        assert!(conic_to_qsr(&ConicSector::interval(1.0, 1.0)).is_err());
        assert!(conic_to_qsr(&ConicSector::disk(0.0, 0.0)).is_err());
        assert!(qsr_to_conic(&SupplyRate::siso(-2.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(DelayDistribution::new(0, 2, vec![0.5, 0.25, 0.25]).is_err());
        assert!(DelayDistribution::new(1, 2, vec![0.5, 0.5 + 1e-6]).is_err());
        assert!(DelayDistribution::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(DelayDistribution::new(1, 3, vec![0.5, 0.5]).is_err());
        let d = DelayDistribution::new(1, 5, vec![0.75, 0.1, 0.05, 0.05, 0.05]).unwrap();
        assert_eq!(d.mode(), 1);
        assert_abs_diff_eq!(d.prob(2), 0.1);
        assert_eq!(d.prob(7), 0.0);
    }

    #[test]
    fn pure_gain_frequency_gain() {
        let p = PlantModel::static_gain(DMatrix::from_element(1, 1, -3.0));
        assert_abs_diff_eq!(freq_gain(&p, 64).unwrap(), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn unstable_rejected() {
        let p = PlantModel::new(
            DMatrix::from_element(1, 1, 1.2),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(matches!(freq_gain(&p, 128), Err(ModelError::Unstable(_))));
    }

    #[test]
    fn dimension_checks() {
        let r = PlantModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1));
        assert!(r.is_err());
        let mut bad = DMatrix::zeros(1, 1);
        bad[(0, 0)] = f64::NAN;
        assert!(PlantModel::static_gain(DMatrix::zeros(1, 1)).n() == 0);
        assert!(PlantModel::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, 1), DMatrix::zeros(1, 0), bad).is_err());
    }
}
