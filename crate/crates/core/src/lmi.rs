//! Affine matrix expressions and the delay-dependent dissipativity LMIs.
//!
//! The stacked signal vector is laid out as `(x, u(k), u(k-1), u(k-w_k), u(k-w_M))`
//! and addressed through [`Theta`].

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{DelayDistribution, ModelError, PlantModel, SupplyRate};

pub type VarId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid delay bounds: {0}")]
    Delay(String),
    #[error("unknown variable block {0}")]
    UnknownBlock(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `constant + Σ x_i · terms[i]`, with a sparse map of basis matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrixExpr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<VarId, DMatrix<f64>>,
}

impl AffineMatrixExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, constant: DMatrix::zeros(rows, cols), terms: BTreeMap::new() }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), constant: m, terms: BTreeMap::new() }
    }

    /// `coef · x_var`.
    pub fn var(var: VarId, coef: DMatrix<f64>) -> Self {
        let mut e = Self::zeros(coef.nrows(), coef.ncols());
        e.terms.insert(var, coef);
        e
    }

    /// 1×1 expression `x_var`.
    pub fn scalar(var: VarId) -> Self {
        Self::var(var, DMatrix::from_element(1, 1, 1.0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }
    pub fn terms(&self) -> impl Iterator<Item = (VarId, &DMatrix<f64>)> {
        self.terms.iter().map(|(k, v)| (*k, v))
    }
    pub fn term(&self, var: VarId) -> Option<&DMatrix<f64>> {
        self.terms.get(&var)
    }
    pub fn max_var(&self) -> Option<VarId> {
        self.terms.keys().next_back().copied()
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (&i, m) in &self.terms {
            let xi = x.get(i).copied().unwrap_or(0.0);
            if xi != 0.0 {
                out += m * xi;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|m| m * s)
    }

    fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        let constant = f(&self.constant);
        let (rows, cols) = constant.shape();
        let terms = self.terms.iter().map(|(k, v)| (*k, f(v))).collect();
        Self { rows, cols, constant, terms }
    }

    /// `L · self`.
    pub fn lmul(&self, l: &DMatrix<f64>) -> Self {
        assert_eq!(l.ncols(), self.rows, "lmul dimension");
        self.map(|m| l * m)
    }

    /// `self · R`.
    pub fn rmul(&self, r: &DMatrix<f64>) -> Self {
        assert_eq!(r.nrows(), self.cols, "rmul dimension");
        self.map(|m| m * r)
    }

    /// `L · self · Lᵀ`.
    pub fn congruence(&self, l: &DMatrix<f64>) -> Self {
        self.lmul(l).rmul(&l.transpose())
    }

    pub fn transpose(&self) -> Self {
        self.map(|m| m.transpose())
    }

    /// `self + selfᵀ`.
    pub fn he(&self) -> Self {
        self.clone() + self.transpose()
    }

    pub fn sub_block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Self {
        self.map(|m| m.view((r0, c0), (nr, nc)).into_owned())
    }

    /// Assemble a block matrix; every row of `grid` must share heights and
    /// every column widths.
    pub fn blocks(grid: &[Vec<AffineMatrixExpr>]) -> Self {
        let heights: Vec<usize> = grid.iter().map(|row| row[0].rows).collect();
        let widths: Vec<usize> = grid[0].iter().map(|e| e.cols).collect();
        let (rows, cols) = (heights.iter().sum(), widths.iter().sum());
        let mut out = Self::zeros(rows, cols);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            assert_eq!(row.len(), widths.len(), "ragged block grid");
            let mut c0 = 0;
            for (bj, e) in row.iter().enumerate() {
                assert_eq!((e.rows, e.cols), (heights[bi], widths[bj]), "block ({bi},{bj}) size");
                out.add_at(r0, c0, e);
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        out
    }

    /// Embed into a larger zero matrix at `(r0, c0)`.
    pub fn embed(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> Self {
        let mut out = Self::zeros(rows, cols);
        out.add_at(r0, c0, self);
        out
    }

    fn add_at(&mut self, r0: usize, c0: usize, e: &AffineMatrixExpr) {
        if e.rows == 0 || e.cols == 0 {
            return;
        }
        add_into(&mut self.constant, r0, c0, &e.constant);
        for (&k, m) in &e.terms {
            let (rows, cols) = (self.rows, self.cols);
            let t = self.terms.entry(k).or_insert_with(|| DMatrix::zeros(rows, cols));
            add_into(t, r0, c0, m);
        }
    }

    pub fn vstack(parts: &[AffineMatrixExpr]) -> Self {
        let grid: Vec<Vec<AffineMatrixExpr>> = parts.iter().map(|p| vec![p.clone()]).collect();
        Self::blocks(&grid)
    }

    pub fn hstack(parts: &[AffineMatrixExpr]) -> Self {
        Self::blocks(&[parts.to_vec()])
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= tol;
        self.rows == self.cols && sym(&self.constant) && self.terms.values().all(sym)
    }

    /// Exact symmetrization `(E + Eᵀ)/2`, dropping all-zero basis blocks.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.map(|m| (m + m.transpose()) * 0.5);
        out.terms.retain(|_, m| m.iter().any(|v| *v != 0.0));
        out
    }

    pub fn pruned(mut self) -> Self {
        self.terms.retain(|_, m| m.iter().any(|v| *v != 0.0));
        self
    }
}

fn add_into(dst: &mut DMatrix<f64>, r0: usize, c0: usize, src: &DMatrix<f64>) {
    for j in 0..src.ncols() {
        for i in 0..src.nrows() {
            dst[(r0 + i, c0 + j)] += src[(i, j)];
        }
    }
}

impl Add for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn add(mut self, rhs: AffineMatrixExpr) -> AffineMatrixExpr {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add dimension");
        self.constant += &rhs.constant;
        for (k, m) in rhs.terms {
            match self.terms.get_mut(&k) {
                Some(t) => *t += m,
                None => {
                    self.terms.insert(k, m);
                }
            }
        }
        self
    }
}

impl Neg for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn neg(self) -> AffineMatrixExpr {
        self.scale(-1.0)
    }
}

impl Sub for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn sub(self, rhs: AffineMatrixExpr) -> AffineMatrixExpr {
        self + (-rhs)
    }
}

impl Mul<f64> for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn mul(self, s: f64) -> AffineMatrixExpr {
        self.scale(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Scalar,
    Symmetric,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarBlock {
    pub name: String,
    pub kind: BlockKind,
    pub size: usize,
    pub offset: usize,
}

impl VarBlock {
    pub fn len(&self) -> usize {
        match self.kind {
            BlockKind::Scalar => 1,
            BlockKind::Symmetric => self.size * (self.size + 1) / 2,
            BlockKind::Full => self.size * self.size,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matrix coordinates owned by each scalar, in storage order.
    fn coords(&self) -> Vec<(usize, usize)> {
        match self.kind {
            BlockKind::Scalar => vec![(0, 0)],
            BlockKind::Symmetric => {
                let mut v = Vec::new();
                for i in 0..self.size {
                    for j in i..self.size {
                        v.push((i, j));
                    }
                }
                v
            }
            BlockKind::Full => {
                let mut v = Vec::new();
                for i in 0..self.size {
                    for j in 0..self.size {
                        v.push((i, j));
                    }
                }
                v
            }
        }
    }
}

pub const LK_BLOCKS: [&str; 14] = ["P", "X", "Y", "Z1", "Z2", "M1", "M2", "M3", "N1", "N2", "N3", "W1", "W2", "W3"];

/// Decision scalars: supply-rate slots first, then the functional's blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVarTable {
    n: usize,
    m: usize,
    blocks: Vec<VarBlock>,
    count: usize,
    slots: Vec<VarId>,
}

impl DecisionVarTable {
    pub fn new(n: usize, m: usize, slot_names: &[String]) -> Self {
        let mut t = Self { n, m, blocks: Vec::new(), count: 0, slots: Vec::new() };
        for name in slot_names {
            let id = t.add_scalar(name);
            t.slots.push(id);
        }
        for name in LK_BLOCKS {
            let (kind, size) = match name {
                "P" => (BlockKind::Symmetric, n + m),
                "X" | "Y" | "Z1" | "Z2" => (BlockKind::Symmetric, m),
                _ => (BlockKind::Full, m),
            };
            t.push(name, kind, size);
        }
        t
    }

    fn push(&mut self, name: &str, kind: BlockKind, size: usize) -> usize {
        let b = VarBlock { name: name.to_string(), kind, size, offset: self.count };
        self.count += b.len();
        self.blocks.push(b);
        self.blocks.len() - 1
    }

    /// Appends a free scalar (e.g. an epigraph variable) and returns its id.
    pub fn add_scalar(&mut self, name: &str) -> VarId {
        let idx = self.push(name, BlockKind::Scalar, 1);
        self.blocks[idx].offset
    }

    pub fn len(&self) -> usize {
        self.count
    }
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn slots(&self) -> &[VarId] {
        &self.slots
    }
    pub fn blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Result<&VarBlock, LmiError> {
        self.blocks.iter().find(|b| b.name == name).ok_or_else(|| LmiError::UnknownBlock(name.to_string()))
    }

    /// Owner block and matrix coordinate of a scalar.
    pub fn owner(&self, var: VarId) -> Option<(&VarBlock, (usize, usize))> {
        let b = self.blocks.iter().find(|b| var >= b.offset && var < b.offset + b.len())?;
        Some((b, b.coords()[var - b.offset]))
    }

    /// The block as a symbolic matrix.
    pub fn expr(&self, name: &str) -> Result<AffineMatrixExpr, LmiError> {
        let b = self.block(name)?;
        let s = b.size;
        let mut e = AffineMatrixExpr::zeros(s, s);
        for (k, (i, j)) in b.coords().into_iter().enumerate() {
            let mut basis = DMatrix::zeros(s, s);
            basis[(i, j)] = 1.0;
            if b.kind == BlockKind::Symmetric {
                basis[(j, i)] = 1.0;
            }
            e.terms.insert(b.offset + k, basis);
        }
        Ok(e)
    }

    pub fn gather(&self, name: &str, x: &[f64]) -> Result<DMatrix<f64>, LmiError> {
        Ok(self.expr(name)?.eval(x))
    }

    /// Writes a matrix into the block's coordinates (upper triangle for
    /// symmetric blocks).
    pub fn scatter(&self, name: &str, value: &DMatrix<f64>, x: &mut [f64]) -> Result<(), LmiError> {
        let b = self.block(name)?;
        if value.shape() != (b.size, b.size) {
            return Err(LmiError::Dimension(format!("{name} expects {0}x{0}", b.size)));
        }
        for (k, (i, j)) in b.coords().into_iter().enumerate() {
            x[b.offset + k] = value[(i, j)];
        }
        Ok(())
    }
}

/// Supply rate with `Q` fixed and `S`, `R` affine in named free scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyTemplate {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub free: Vec<FreeSlot>,
}

/// Free scalar θ contributing `θ·ds` to S and `θ·dr` to R.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeSlot {
    pub name: String,
    pub ds: DMatrix<f64>,
    pub dr: DMatrix<f64>,
}

impl SupplyTemplate {
    pub fn fixed(qsr: &SupplyRate) -> Self {
        Self { q: qsr.q.clone(), s: qsr.s.clone(), r: qsr.r.clone(), free: Vec::new() }
    }

    /// SISO template `Q = q`, `S = s0 + Σ θ ds`, `R = r0 + Σ θ dr`.
    pub fn siso(q: f64, s0: f64, r0: f64, free: &[(&str, f64, f64)]) -> Self {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        Self {
            q: one(q),
            s: one(s0),
            r: one(r0),
            free: free
                .iter()
                .map(|(name, ds, dr)| FreeSlot { name: name.to_string(), ds: one(*ds), dr: one(*dr) })
                .collect(),
        }
    }

    pub fn slot_names(&self) -> Vec<String> {
        self.free.iter().map(|f| f.name.clone()).collect()
    }

    pub fn instantiate(&self, values: &[f64]) -> SupplyRate {
        let mut s = self.s.clone();
        let mut r = self.r.clone();
        for (slot, v) in self.free.iter().zip(values) {
            s += &slot.ds * *v;
            r += &slot.dr * *v;
        }
        SupplyRate { q: self.q.clone(), s, r }
    }

    fn s_expr(&self, slots: &[VarId]) -> AffineMatrixExpr {
        let mut e = AffineMatrixExpr::constant(self.s.clone());
        for (slot, &id) in self.free.iter().zip(slots) {
            e = e + AffineMatrixExpr::var(id, slot.ds.clone());
        }
        e
    }

    fn r_expr(&self, slots: &[VarId]) -> AffineMatrixExpr {
        let mut e = AffineMatrixExpr::constant(self.r.clone());
        for (slot, &id) in self.free.iter().zip(slots) {
            e = e + AffineMatrixExpr::var(id, slot.dr.clone());
        }
        e
    }

    fn check(&self, plant: &PlantModel) -> Result<(), LmiError> {
        let (p, m) = (plant.p(), plant.m());
        let ok = self.q.shape() == (p, p)
            && self.s.shape() == (p, m)
            && self.r.shape() == (m, m)
            && self.free.iter().all(|f| f.ds.shape() == (p, m) && f.dr.shape() == (m, m));
        if ok {
            Ok(())
        } else {
            Err(LmiError::Dimension(format!("supply rate does not match plant with p={p}, m={m}")))
        }
    }
}

/// `expr ⪰ lower·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub expr: AffineMatrixExpr,
    pub lower: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LMIProblem {
    pub vars: DecisionVarTable,
    pub constraints: Vec<Constraint>,
    /// Minimized linear objective as sparse `(var, coefficient)` pairs.
    pub objective: Option<Vec<(VarId, f64)>>,
}

impl LMIProblem {
    pub fn new(vars: DecisionVarTable) -> Self {
        Self { vars, constraints: Vec::new(), objective: None }
    }

    pub fn add(&mut self, name: &str, expr: AffineMatrixExpr, lower: f64) {
        self.constraints.push(Constraint { name: name.to_string(), expr, lower });
    }

    pub fn minimize(&mut self, var: VarId) {
        self.objective = Some(vec![(var, 1.0)]);
    }

    pub fn maximize(&mut self, var: VarId) {
        self.objective = Some(vec![(var, -1.0)]);
    }

    /// `x_var ≤ hi`.
    pub fn upper_bound(&mut self, var: VarId, hi: f64) {
        let e = AffineMatrixExpr::constant(DMatrix::from_element(1, 1, hi)) - AffineMatrixExpr::scalar(var);
        self.add(&format!("x{var} <= {hi}"), e, 0.0);
    }

    /// `x_var ≥ lo`.
    pub fn lower_bound(&mut self, var: VarId, lo: f64) {
        let e = AffineMatrixExpr::scalar(var) - AffineMatrixExpr::constant(DMatrix::from_element(1, 1, lo));
        self.add(&format!("x{var} >= {lo}"), e, 0.0);
    }

    pub fn slot(&self, k: usize) -> VarId {
        self.vars.slots()[k]
    }

    pub fn validate(&self) -> Result<(), LmiError> {
        for c in &self.constraints {
            if c.expr.max_var().is_some_and(|v| v >= self.vars.len()) {
                return Err(LmiError::Dimension(format!("{} references unknown scalar", c.name)));
            }
            if !c.expr.is_symmetric(1e-12) {
                return Err(LmiError::Dimension(format!("{} is not symmetric", c.name)));
            }
        }
        if let Some(obj) = &self.objective {
            if obj.iter().any(|(v, _)| *v >= self.vars.len()) {
                return Err(LmiError::Dimension("objective references unknown scalar".into()));
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of `expr - lower·I` over all constraints.
    pub fn raw_margin(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let m = c.expr.eval(x);
                if m.nrows() == 0 {
                    return f64::INFINITY;
                }
                m.symmetric_eigenvalues().min() - c.lower
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Named blocks of the stacked vector `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Theta {
    X,
    U,
    U1,
    Uw,
    UM,
}

impl Theta {
    pub fn offset(self, n: usize, m: usize) -> usize {
        match self {
            Theta::X => 0,
            Theta::U => n,
            Theta::U1 => n + m,
            Theta::Uw => n + 2 * m,
            Theta::UM => n + 3 * m,
        }
    }

    pub fn size(self, n: usize, m: usize) -> usize {
        if self == Theta::X {
            n
        } else {
            m
        }
    }
}

/// Strictness margin for `Z1`, `Z2`.
pub fn epsilon_for(plant: &PlantModel) -> f64 {
    1e-7 * (1.0 + plant.frobenius())
}

fn check_bounds(w_min: usize, w_max: usize) -> Result<(), LmiError> {
    if w_min < 1 {
        return Err(LmiError::Delay("w_min must be at least 1".into()));
    }
    if w_max < w_min {
        return Err(LmiError::Delay(format!("w_max {w_max} < w_min {w_min}")));
    }
    Ok(())
}

fn c(m: DMatrix<f64>) -> AffineMatrixExpr {
    AffineMatrixExpr::constant(m)
}

/// Π over θ for the given functional blocks.
pub fn build_pi(
    plant: &PlantModel,
    supply: &SupplyTemplate,
    vars: &DecisionVarTable,
    w_min: usize,
    w_max: usize,
) -> Result<AffineMatrixExpr, LmiError> {
    check_bounds(w_min, w_max)?;
    supply.check(plant)?;
    let (n, m) = (plant.n(), plant.m());
    if vars.n() != n || vars.m() != m {
        return Err(LmiError::Dimension("variable table built for another plant".into()));
    }
    let dim = n + 4 * m;
    let place = |row: Theta, col: Theta, e: AffineMatrixExpr| e.embed(dim, dim, row.offset(n, m), col.offset(n, m));
    let ct = plant.c.transpose();
    let s = supply.s_expr(vars.slots());
    let r = supply.r_expr(vars.slots());

    let pi0 = place(Theta::X, Theta::X, c(&ct * &supply.q * &plant.c))
        + place(Theta::X, Theta::U, s.lmul(&ct)).he()
        + place(Theta::X, Theta::Uw, c(&ct * &supply.q * &plant.d)).he()
        + place(Theta::U, Theta::U, r)
        + place(Theta::U, Theta::Uw, s.transpose().rmul(&plant.d)).he()
        + place(Theta::Uw, Theta::Uw, c(plant.d.transpose() * &supply.q * &plant.d));

    let nm = n + m;
    let mut s1 = DMatrix::zeros(dim, nm);
    let mut s2 = DMatrix::zeros(dim, nm);
    s1.view_mut((0, 0), (n, n)).copy_from(&plant.a.transpose());
    s1.view_mut((Theta::U.offset(n, m), n), (m, m)).fill_with_identity();
    s1.view_mut((Theta::Uw.offset(n, m), 0), (m, n)).copy_from(&plant.b.transpose());
    s2.view_mut((0, 0), (n, n)).fill_with_identity();
    s2.view_mut((Theta::U1.offset(n, m), n), (m, m)).fill_with_identity();
    let p = vars.expr("P")?;
    let pi1 = p.congruence(&s1) - p.congruence(&s2);

    let x = vars.expr("X")?;
    let y = vars.expr("Y")?;
    let spread = (w_max - w_min + 1) as f64;
    let pi2 = place(Theta::U1, Theta::U1, x.scale(spread) + y.clone())
        + place(Theta::Uw, Theta::Uw, -x)
        + place(Theta::UM, Theta::UM, -y);

    let mut sel = DMatrix::zeros(dim, m);
    sel.view_mut((Theta::U.offset(n, m), 0), (m, m)).fill_with_identity();
    sel.view_mut((Theta::U1.offset(n, m), 0), (m, m)).fill_diagonal(-1.0);
    let z = vars.expr("Z1")? + vars.expr("Z2")?;
    let pi3 = z.congruence(&sel).scale((w_max - 1) as f64);

    let mm = AffineMatrixExpr::vstack(&[vars.expr("M1")?, vars.expr("M2")?, vars.expr("M3")?]);
    let nn = AffineMatrixExpr::vstack(&[vars.expr("N1")?, vars.expr("N2")?, vars.expr("N3")?]);
    let ww = AffineMatrixExpr::vstack(&[vars.expr("W1")?, vars.expr("W2")?, vars.expr("W3")?]);
    let phi = AffineMatrixExpr::hstack(&[mm.clone() + nn.clone(), ww.clone() - mm, -(ww + nn)]);
    let pi4 = phi.he().embed(dim, dim, nm, nm);

    Ok((pi0 - pi1 - pi2 - pi3 - pi4).pruned())
}

fn side_constraints(problem: &mut LMIProblem, eps: f64) -> Result<(), LmiError> {
    for (name, lower) in [("P", 0.0), ("X", 0.0), ("Y", 0.0), ("Z1", eps), ("Z2", eps)] {
        let e = problem.vars.expr(name)?;
        problem.add(&format!("{name} psd"), e, lower);
    }
    Ok(())
}

/// Per-support-point block of the expected LMI for delay `w`.
pub fn big_block(
    plant: &PlantModel,
    pi: &AffineMatrixExpr,
    vars: &DecisionVarTable,
    w: usize,
    w_min: usize,
    w_max: usize,
) -> Result<AffineMatrixExpr, LmiError> {
    if w < w_min || w > w_max {
        return Err(LmiError::Delay(format!("w={w} outside [{w_min}, {w_max}]")));
    }
    check_bounds(w_min, w_max)?;
    let (n, m) = (plant.n(), plant.m());
    let n2 = n + 2 * m;
    let uw = Theta::Uw.offset(n, m);
    let um = Theta::UM.offset(n, m);
    let p11 = pi.sub_block(0, 0, n2, n2);
    let p12 = pi.sub_block(0, uw, n2, m);
    let p13 = pi.sub_block(0, um, n2, m);
    let p22 = pi.sub_block(uw, uw, m, m);
    let p23 = pi.sub_block(uw, um, m, m);
    let p33 = pi.sub_block(um, um, m, m);
    let d = (w_max - w) as f64;

    let pt = AffineMatrixExpr::blocks(&[
        vec![p11, p12.clone() + p13.clone(), p12.scale(d)],
        vec![(p12.clone() + p13).transpose(), p22.clone() + p33 + p23.he(), (p22.clone() + p23.clone()).scale(d)],
        vec![p12.transpose().scale(d), (p22.clone() + p23).transpose().scale(d), p22.scale(d * d)],
    ]);

    let zero = AffineMatrixExpr::zeros(n + m, m);
    let stack = |b1: &str, b2: &str, b3: &str, third_sign: f64, weight: f64| -> Result<_, LmiError> {
        let (e1, e2, e3) = (vars.expr(b1)?, vars.expr(b2)?, vars.expr(b3)?);
        Ok(AffineMatrixExpr::vstack(&[zero.clone(), e1, e2.clone() + e3.scale(third_sign), e2.scale(d)]).scale(weight))
    };
    let nt = stack("N1", "N2", "N3", 1.0, ((w_max - 1) as f64).sqrt())?;
    let mt = stack("M1", "M2", "M3", 1.0, ((w - 1) as f64).sqrt())?;
    let wt = stack("W1", "W2", "W3", 1.0, ((w_max - w) as f64).sqrt())?;

    let z1 = vars.expr("Z1")?;
    let z2 = vars.expr("Z2")?;
    let o = AffineMatrixExpr::zeros(m, m);
    Ok(AffineMatrixExpr::blocks(&[
        vec![pt, nt.clone(), mt.clone(), wt.clone()],
        vec![nt.transpose(), z2, o.clone(), o.clone()],
        vec![mt.transpose(), o.clone(), z1.clone(), o.clone()],
        vec![wt.transpose(), o.clone(), o, z1],
    ]))
}

/// Expected-value LMI for an i.i.d. delay law.
pub fn build_stochastic_lmi(
    plant: &PlantModel,
    dist: &DelayDistribution,
    supply: &SupplyTemplate,
) -> Result<LMIProblem, LmiError> {
    let (w_min, w_max) = (dist.w_min(), dist.w_max());
    check_bounds(w_min, w_max)?;
    let vars = DecisionVarTable::new(plant.n(), plant.m(), &supply.slot_names());
    let pi = build_pi(plant, supply, &vars, w_min, w_max)?;
    let dim = plant.n() + 7 * plant.m();
    let mut expected = AffineMatrixExpr::zeros(dim, dim);
    for (w, prob) in dist.support() {
        if prob == 0.0 {
            continue;
        }
        expected = expected + big_block(plant, &pi, &vars, w, w_min, w_max)?.scale(prob);
    }
    let mut problem = LMIProblem::new(vars);
    problem.add("expected dissipation", expected.symmetrized(), 0.0);
    side_constraints(&mut problem, epsilon_for(plant))?;
    Ok(problem)
}

/// Distribution-free LMI valid for any delay sequence in `[w_min, w_max]`.
pub fn build_deterministic_lmi(
    plant: &PlantModel,
    w_min: usize,
    w_max: usize,
    supply: &SupplyTemplate,
) -> Result<LMIProblem, LmiError> {
    check_bounds(w_min, w_max)?;
    let vars = DecisionVarTable::new(plant.n(), plant.m(), &supply.slot_names());
    let pi = build_pi(plant, supply, &vars, w_min, w_max)?;
    let (n, m) = (plant.n(), plant.m());
    let lead = AffineMatrixExpr::zeros(m, n + m);
    let row = |names: [&str; 3], weight: f64| -> Result<AffineMatrixExpr, LmiError> {
        let stacked = AffineMatrixExpr::vstack(&[vars.expr(names[0])?, vars.expr(names[1])?, vars.expr(names[2])?]);
        Ok(AffineMatrixExpr::hstack(&[lead.clone(), stacked.transpose().scale(weight)]))
    };
    let r1 = row(["N1", "N2", "N3"], ((w_max - 1) as f64).sqrt())?;
    let r2 = row(["M1", "M2", "M3"], ((w_max - 1) as f64).sqrt())?;
    let r3 = row(["W1", "W2", "W3"], ((w_max - w_min) as f64).sqrt())?;
    let z1 = vars.expr("Z1")?;
    let z2 = vars.expr("Z2")?;
    let o = AffineMatrixExpr::zeros(m, m);
    let big = AffineMatrixExpr::blocks(&[
        vec![pi, r1.transpose(), r2.transpose(), r3.transpose()],
        vec![r1, z2, o.clone(), o.clone()],
        vec![r2, o.clone(), z1.clone(), o.clone()],
        vec![r3, o.clone(), o, z1],
    ]);
    let mut problem = LMIProblem::new(vars);
    problem.add("worst-case dissipation", big.symmetrized(), 0.0);
    side_constraints(&mut problem, epsilon_for(plant))?;
    Ok(problem)
}

/// `[[A, B, nB], [Bᵀ, C, nC], [nBᵀ, nC, n²C]]`.
pub fn expand_three_block(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    n: f64,
) -> Result<DMatrix<f64>, LmiError> {
    let (p, q) = b.shape();
    if a.shape() != (p, p) || c.shape() != (q, q) {
        return Err(LmiError::Dimension(format!("A {:?}, B {:?}, C {:?}", a.shape(), b.shape(), c.shape())));
    }
    let dim = p + 2 * q;
    let mut out = DMatrix::zeros(dim, dim);
    out.view_mut((0, 0), (p, p)).copy_from(a);
    out.view_mut((0, p), (p, q)).copy_from(b);
    out.view_mut((0, p + q), (p, q)).copy_from(&(b * n));
    out.view_mut((p, 0), (q, p)).copy_from(&b.transpose());
    out.view_mut((p + q, 0), (q, p)).copy_from(&(b.transpose() * n));
    out.view_mut((p, p), (q, q)).copy_from(c);
    out.view_mut((p, p + q), (q, q)).copy_from(&(c * n));
    out.view_mut((p + q, p), (q, q)).copy_from(&(c * n));
    out.view_mut((p + q, p + q), (q, q)).copy_from(&(c * (n * n)));
    Ok(out)
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// `i`-th forward difference of `u` at index `k`.
pub fn forward_difference(u: &[DVector<f64>], k: usize, i: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(u[k].len());
    for l in 0..=i {
        let coef = binomial(i, l) as f64;
        if (i - l).is_multiple_of(2) {
            acc += &u[k + l] * coef;
        } else {
            acc -= &u[k + l] * coef;
        }
    }
    acc
}

/// Reconstructs `u(k - w)` from `u(k - w_max)` and its forward differences.
pub fn newton_delay_value(
    u: &[DVector<f64>],
    k: usize,
    w: usize,
    w_min: usize,
    w_max: usize,
) -> Result<DVector<f64>, LmiError> {
    if w < w_min || w > w_max {
        return Err(LmiError::Delay(format!("w={w} outside [{w_min}, {w_max}]")));
    }
    if k < w_max || k >= u.len() {
        return Err(LmiError::Delay(format!("u must be defined on [k - {w_max}, k] for k={k}")));
    }
    let base = k - w_max;
    let mut acc = u[base].clone();
    for i in 1..=(w_max - w_min) {
        let coef = binomial(w_max - w, i);
        if coef == 0 {
            continue;
        }
        acc += forward_difference(u, base, i) * coef as f64;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmark_plant;

    #[test]
    fn pi_dimension_and_constant_part() {
        let plant = benchmark_plant();
        let supply = SupplyTemplate::fixed(&SupplyRate::siso(-1.0, 0.5, 1.0));
        let vars = DecisionVarTable::new(2, 1, &[]);
        let pi = build_pi(&plant, &supply, &vars, 1, 5).unwrap();
        assert_eq!((pi.rows(), pi.cols()), (6, 6));
        let at_zero = pi.eval(&vec![0.0; vars.len()]);
        let mut expected = DMatrix::zeros(6, 6);
        expected[(0, 0)] = 0.0;
        expected[(1, 1)] = -1.0;
        expected[(1, 2)] = 0.5;
        expected[(2, 1)] = 0.5;
        expected[(2, 2)] = 1.0;
        assert_eq!(at_zero, expected);
    }

    #[test]
    fn zero_feedthrough_leaves_delayed_input_blocks_empty() {
        let plant = benchmark_plant();
        let supply = SupplyTemplate::fixed(&SupplyRate::siso(-1.0, 0.3, 2.0));
        let vars = DecisionVarTable::new(2, 1, &[]);
        let pi0 = build_pi(&plant, &supply, &vars, 1, 5).unwrap();
        let c = pi0.constant_part();
        let uw = Theta::Uw.offset(2, 1);
        for i in 0..=uw {
            assert_eq!(c[(i, uw)], 0.0);
        }
    }

    #[test]
    fn table_scatter_gather_round_trip() {
        let t = DecisionVarTable::new(2, 1, &["R".to_string()]);
        assert_eq!(t.len(), 1 + 6 + 4 + 9);
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let mut x = vec![0.0; t.len()];
        t.scatter("P", &p, &mut x).unwrap();
        assert_eq!(t.gather("P", &x).unwrap(), p);
        for v in 0..t.len() {
            assert!(t.owner(v).is_some());
        }
        assert_eq!(t.owner(0).unwrap().0.name, "R");
    }

    #[test]
    fn three_block_zero_scale() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let e = expand_three_block(&a, &b, &c, 0.0).unwrap();
        assert_eq!(e.row(2).iter().filter(|v| **v != 0.0).count(), 0);
        assert!(expand_three_block(&a, &DMatrix::zeros(2, 1), &c, 1.0).is_err());
    }

    #[test]
    fn newton_endpoints() {
        let u: Vec<DVector<f64>> = (0..10).map(|i| DVector::from_element(1, (i * i) as f64)).collect();
        assert_eq!(newton_delay_value(&u, 8, 5, 1, 5).unwrap(), u[3]);
        assert_eq!(newton_delay_value(&u, 8, 4, 1, 5).unwrap(), u[4]);
        assert!(newton_delay_value(&u, 8, 6, 1, 5).is_err());
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(2, 5), 0);
        assert_eq!(binomial(30, 15), 155117520);
    }
}
