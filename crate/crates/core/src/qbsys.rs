//! Quadratic-bilinear controlled dynamics and their time integration.
//!
//! Systems have the form `E y' = A y + F(y ⊗ y) + B u` with a sparse
//! quadratic operator F. Time stepping is implicit Euler with a damped
//! Newton iteration; when the operators are banded (FEM stencils) the
//! Newton systems are factored in band form.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::{dense_bandwidth, BandMatrix};
use crate::{Error, Result};

/// One term of the sparse quadratic operator: `f[row] += value * y[left] * y[right]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadTerm {
    pub row: usize,
    pub left: usize,
    pub right: usize,
    pub value: f64,
}

/// Sparse quadratic operator F acting on y ⊗ y, stored in coordinate form.
#[derive(Debug, Clone, Default)]
pub struct QuadraticOperator {
    terms: Vec<QuadTerm>,
}

impl QuadraticOperator {
    pub fn new(terms: Vec<QuadTerm>) -> Self {
        QuadraticOperator { terms }
    }

    pub fn zero() -> Self {
        QuadraticOperator { terms: Vec::new() }
    }

    pub fn terms(&self) -> &[QuadTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// F(y ⊗ y).
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(y.len());
        self.apply_into(y, 1.0, &mut out);
        out
    }

    /// out += scale * F(y ⊗ y).
    pub fn apply_into(&self, y: &DVector<f64>, scale: f64, out: &mut DVector<f64>) {
        for t in &self.terms {
            out[t.row] += scale * t.value * y[t.left] * y[t.right];
        }
    }

    /// Jacobian of F(y ⊗ y) at y, accumulated densely: J += scale * dF.
    pub fn add_jacobian(&self, y: &DVector<f64>, scale: f64, jac: &mut DMatrix<f64>) {
        for t in &self.terms {
            jac[(t.row, t.left)] += scale * t.value * y[t.right];
            jac[(t.row, t.right)] += scale * t.value * y[t.left];
        }
    }

    /// Band-stored Jacobian accumulation; `transpose` swaps row/column roles
    /// (used for the adjoint solves).
    pub fn add_jacobian_band(
        &self,
        y: &DVector<f64>,
        scale: f64,
        transpose: bool,
        jac: &mut BandMatrix,
    ) {
        if transpose {
            for t in &self.terms {
                jac.add(t.left, t.row, scale * t.value * y[t.right]);
                jac.add(t.right, t.row, scale * t.value * y[t.left]);
            }
        } else {
            for t in &self.terms {
                jac.add(t.row, t.left, scale * t.value * y[t.right]);
                jac.add(t.row, t.right, scale * t.value * y[t.left]);
            }
        }
    }

    /// x^T dF(y), i.e. the action of the transposed Jacobian on x.
    pub fn apply_jacobian_transpose(
        &self,
        y: &DVector<f64>,
        x: &DVector<f64>,
        scale: f64,
        out: &mut DVector<f64>,
    ) {
        for t in &self.terms {
            out[t.left] += scale * t.value * y[t.right] * x[t.row];
            out[t.right] += scale * t.value * y[t.left] * x[t.row];
        }
    }

    /// Largest index offset touched by any term.
    pub fn bandwidth(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.row.abs_diff(t.left).max(t.row.abs_diff(t.right)))
            .max()
            .unwrap_or(0)
    }

    /// Galerkin projection U^T F (U ⊗ U) as a dense coordinate list over the
    /// reduced indices.
    pub fn project(&self, u: &DMatrix<f64>) -> QuadraticOperator {
        let l = u.ncols();
        // group by full row: G_i(b,c) = sum_{terms with row i} v * U(left,b) * U(right,c),
        // then F_red(a,b,c) = sum_i U(i,a) G_i(b,c)
        let mut red = vec![0.0f64; l * l * l];
        let mut gi = DMatrix::<f64>::zeros(l, l);
        let mut idx = 0;
        while idx < self.terms.len() {
            let row = self.terms[idx].row;
            gi.fill(0.0);
            while idx < self.terms.len() && self.terms[idx].row == row {
                let t = self.terms[idx];
                for b in 0..l {
                    let ub = u[(t.left, b)] * t.value;
                    if ub != 0.0 {
                        for c in 0..l {
                            gi[(b, c)] += ub * u[(t.right, c)];
                        }
                    }
                }
                idx += 1;
            }
            for a in 0..l {
                let ua = u[(row, a)];
                if ua != 0.0 {
                    for b in 0..l {
                        for c in 0..l {
                            red[(a * l + b) * l + c] += ua * gi[(b, c)];
                        }
                    }
                }
            }
        }
        let mut terms = Vec::with_capacity(l * l * l);
        for a in 0..l {
            for b in 0..l {
                for c in 0..l {
                    let v = red[(a * l + b) * l + c];
                    if v != 0.0 {
                        terms.push(QuadTerm {
                            row: a,
                            left: b,
                            right: c,
                            value: v,
                        });
                    }
                }
            }
        }
        QuadraticOperator { terms }
    }
}

/// Full- or reduced-order dynamics `E y' = A y + F(y ⊗ y) + B u`.
///
/// For the Burgers benchmark, `linear` is C + alpha E where C is the (signed)
/// stiffness matrix and `shift` records alpha.
#[derive(Clone)]
pub struct QuadraticBilinearSystem {
    pub mass: DMatrix<f64>,
    pub linear: DMatrix<f64>,
    pub quad: QuadraticOperator,
    pub input: DMatrix<f64>,
    pub shift: f64,
}

impl QuadraticBilinearSystem {
    pub fn new(
        mass: DMatrix<f64>,
        linear: DMatrix<f64>,
        quad: QuadraticOperator,
        input: DMatrix<f64>,
        shift: f64,
    ) -> Result<Self> {
        let d = mass.nrows();
        if mass.ncols() != d || linear.nrows() != d || linear.ncols() != d {
            return Err(Error::DimensionMismatch(
                "mass and linear operators must be square of equal size".into(),
            ));
        }
        if input.nrows() != d {
            return Err(Error::DimensionMismatch(format!(
                "input operator has {} rows, state dimension is {d}",
                input.nrows()
            )));
        }
        for t in quad.terms() {
            if t.row >= d || t.left >= d || t.right >= d {
                return Err(Error::DimensionMismatch(format!(
                    "quadratic term ({}, {}, {}) exceeds dimension {d}",
                    t.row, t.left, t.right
                )));
            }
        }
        if shift < 0.0 {
            return Err(Error::InvalidParameter(
                "instability shift must be nonnegative".into(),
            ));
        }
        Ok(QuadraticBilinearSystem {
            mass,
            linear,
            quad,
            input,
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.input.ncols()
    }

    /// Right-hand side f(y, u) = A y + F(y ⊗ y) + B u (not mass-inverted).
    pub fn rhs(&self, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut r = &self.linear * y;
        self.quad.apply_into(y, 1.0, &mut r);
        r += &self.input * u;
        r
    }
}

/// Mean of the random initial-condition field.
#[derive(Debug, Clone)]
pub enum MeanField {
    Constant(f64),
    Nodal(DVector<f64>),
}

/// Random cosine field for initial conditions:
/// `y0(xi) + sum_{i,j} (i+j)^(-gamma) mu_{i+(j-1)M1} cos(i pi xi_1) cos(j pi xi_2)`
/// with mu ~ N(0, sigma^2) drawn from the seed.
#[derive(Debug, Clone)]
pub struct RandomFieldIc {
    pub mean: MeanField,
    pub max_freq_1: usize,
    pub max_freq_2: usize,
    pub decay: f64,
    pub stddev: f64,
    pub seed: u64,
}

impl RandomFieldIc {
    pub fn constant_mean(
        y0: f64,
        max_freq_1: usize,
        max_freq_2: usize,
        decay: f64,
        stddev: f64,
        seed: u64,
    ) -> Self {
        RandomFieldIc {
            mean: MeanField::Constant(y0),
            max_freq_1,
            max_freq_2,
            decay,
            stddev,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut rf = self.clone();
        rf.seed = seed;
        rf
    }

    /// The coefficient vector mu (length M1*M2, index k = i + (j-1) M1).
    pub fn draw_coefficients(&self) -> Result<DVector<f64>> {
        if self.decay <= 0.0 {
            return Err(Error::InvalidParameter(
                "random field decay must be positive".into(),
            ));
        }
        if self.stddev < 0.0 {
            return Err(Error::InvalidParameter(
                "random field standard deviation must be nonnegative".into(),
            ));
        }
        let n = self.max_freq_1 * self.max_freq_2;
        if self.stddev == 0.0 {
            return Ok(DVector::zeros(n));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.stddev)
            .map_err(|e| Error::InvalidParameter(format!("normal distribution: {e}")))?;
        Ok(DVector::from_fn(n, |_, _| normal.sample(&mut rng)))
    }
}

/// Sample the random field at the given planar nodes.
pub fn sample_initial_condition(rf: &RandomFieldIc, grid: &[(f64, f64)]) -> Result<DVector<f64>> {
    let mu = rf.draw_coefficients()?;
    let mut y = match &rf.mean {
        MeanField::Constant(c) => DVector::from_element(grid.len(), *c),
        MeanField::Nodal(v) => {
            if v.len() != grid.len() {
                return Err(Error::DimensionMismatch(format!(
                    "mean field has {} nodes, grid has {}",
                    v.len(),
                    grid.len()
                )));
            }
            v.clone()
        }
    };
    if rf.stddev == 0.0 {
        return Ok(y);
    }
    for (node, yv) in grid.iter().zip(y.iter_mut()) {
        let (x1, x2) = *node;
        let mut s = 0.0;
        for j in 1..=rf.max_freq_2 {
            let c2 = (j as f64 * std::f64::consts::PI * x2).cos();
            for i in 1..=rf.max_freq_1 {
                let k = i + (j - 1) * rf.max_freq_1;
                let amp = ((i + j) as f64).powf(-rf.decay) * mu[k - 1];
                s += amp * (i as f64 * std::f64::consts::PI * x1).cos() * c2;
            }
        }
        *yv += s;
    }
    Ok(y)
}

/// Controlled trajectory on a uniform time grid. Controls are
/// piecewise-constant on [t_i, t_{i+1}), so there is one control column less
/// than state columns.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn step_size(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has states")
    }
}

/// State-feedback policy used by [`integrate`]; evaluated at the left
/// endpoint of every step and held constant over it.
pub trait Controller {
    fn control(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Control source for [`integrate`].
pub enum ControlInput<'a> {
    Zero,
    /// One column per step (m x n_t).
    Signal(&'a DMatrix<f64>),
    Law(&'a dyn Controller),
}

enum Factorization {
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    Band(crate::linalg::BandLu),
}

/// Implicit-Euler stepper for a fixed system and step size. Precomputes the
/// linear part of the Newton matrix and chooses band or dense factorizations
/// from the operator sparsity.
pub struct Stepper<'a> {
    sys: &'a QuadraticBilinearSystem,
    h: f64,
    /// E/h - A
    base: DMatrix<f64>,
    /// mass scaled by 1/h
    mass_h: DMatrix<f64>,
    band: Option<BandSetup>,
}

struct BandSetup {
    bw: usize,
    /// band copy of E/h - A
    base: BandMatrix,
    /// band copy of (E/h - A)^T
    base_t: BandMatrix,
}

pub const NEWTON_MAX_ITERATIONS: usize = 50;

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a QuadraticBilinearSystem, h: f64) -> Result<Self> {
        if h <= 0.0 {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        let d = sys.dim();
        let mass_h = &sys.mass / h;
        let base = &mass_h - &sys.linear;
        let bw_ops = dense_bandwidth(&sys.mass, 0.0)
            .max(dense_bandwidth(&sys.linear, 0.0))
            .max(sys.quad.bandwidth());
        let band = if d > 8 && (2 * bw_ops + 1) * 3 < d {
            let mut b = BandMatrix::zeros(d, bw_ops);
            let mut bt = BandMatrix::zeros(d, bw_ops);
            for j in 0..d {
                for i in j.saturating_sub(bw_ops)..=(j + bw_ops).min(d - 1) {
                    b.add(i, j, base[(i, j)]);
                    bt.add(i, j, base[(j, i)]);
                }
            }
            Some(BandSetup {
                bw: bw_ops,
                base: b,
                base_t: bt,
            })
        } else {
            None
        };
        Ok(Stepper {
            sys,
            h,
            base,
            mass_h,
            band,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    fn factor_jacobian(&self, y: &DVector<f64>, transpose: bool) -> Result<Factorization> {
        if let Some(setup) = &self.band {
            let mut jac = BandMatrix::zeros(self.sys.dim(), setup.bw);
            jac.fill_from(if transpose { &setup.base_t } else { &setup.base });
            self.sys.quad.add_jacobian_band(y, -1.0, transpose, &mut jac);
            if let Ok(lu) = jac.factor() {
                return Ok(Factorization::Band(lu));
            }
            // fall through to dense on band breakdown
        }
        let mut jac = self.base.clone();
        self.sys.quad.add_jacobian(y, -1.0, &mut jac);
        if transpose {
            jac = jac.transpose();
        }
        let lu = jac.lu();
        // nalgebra's LU does not expose singularity until solve; probe here
        if lu.determinant() == 0.0 {
            return Err(Error::SingularSystem("implicit Euler Jacobian".into()));
        }
        Ok(Factorization::Dense(lu))
    }

    fn solve(fac: &Factorization, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match fac {
            Factorization::Dense(lu) => lu
                .solve(rhs)
                .ok_or_else(|| Error::SingularSystem("dense Newton solve".into())),
            Factorization::Band(lu) => {
                let mut x = rhs.clone();
                lu.solve_in_place(&mut x);
                Ok(x)
            }
        }
    }

    /// residual(z) = (E/h - A) z - rhs0 - F(z ⊗ z), with rhs0 = (E/h) y + B u.
    fn residual(&self, z: &DVector<f64>, rhs0: &DVector<f64>) -> DVector<f64> {
        let mut r = -rhs0.clone();
        if let Some(setup) = &self.band {
            setup.base.gemv_add(z, 1.0, &mut r);
        } else {
            r += &self.base * z;
        }
        self.sys.quad.apply_into(z, -1.0, &mut r);
        r
    }

    /// One implicit-Euler step: solves E (y+ - y)/h = A y+ + F(y+ ⊗ y+) + B u
    /// by damped Newton, to residual norm <= 1e-10 (1 + |y|).
    pub fn step(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        let tol = 1e-10 * (1.0 + y.norm());
        let mut rhs0 = &self.mass_h * y;
        rhs0 += &self.sys.input * u;

        let mut z = y.clone();
        let mut r = self.residual(&z, &rhs0);
        let mut rnorm = r.norm();
        for it in 0..NEWTON_MAX_ITERATIONS {
            if rnorm <= tol {
                return Ok((z, it));
            }
            let fac = self.factor_jacobian(&z, false)?;
            let dz = Self::solve(&fac, &r)?;
            // Residual-monotone damping; full steps are accepted near the root.
            let mut t = 1.0;
            loop {
                let cand = &z - &dz * t;
                let rc = self.residual(&cand, &rhs0);
                let rcn = rc.norm();
                if rcn <= (1.0 - 1e-4 * t) * rnorm || t < 1.0 / 1024.0 {
                    z = cand;
                    r = rc;
                    rnorm = rcn;
                    break;
                }
                t *= 0.5;
            }
        }
        if rnorm <= tol {
            return Ok((z, NEWTON_MAX_ITERATIONS));
        }
        Err(Error::NewtonNonconvergence {
            iterations: NEWTON_MAX_ITERATIONS,
            residual: rnorm,
        })
    }

    /// Solve M(y_lin)^T x = rhs where M(y_lin) = E/h - A - F'(y_lin) is the
    /// step Jacobian frozen at `y_lin` (adjoint back-substitution).
    pub fn solve_transposed(&self, y_lin: &DVector<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let fac = self.factor_jacobian(y_lin, true)?;
        Self::solve(&fac, rhs)
    }

    /// (E/h)^T x.
    pub fn mass_h_transpose_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        self.mass_h.transpose() * x
    }
}

/// Convenience wrapper for a single implicit-Euler step.
pub fn step_implicit_euler(
    sys: &QuadraticBilinearSystem,
    y: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    Stepper::new(sys, h)?.step(y, u).map(|(z, _)| z)
}

/// Integrate over [0, T] with n_t uniform implicit-Euler steps. Feedback
/// laws are evaluated at the left endpoint of every step.
pub fn integrate(
    sys: &QuadraticBilinearSystem,
    ic: &DVector<f64>,
    input: ControlInput,
    horizon: f64,
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 || horizon <= 0.0 {
        return Err(Error::InvalidParameter(
            "horizon and step count must be positive".into(),
        ));
    }
    if ic.len() != sys.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial condition has length {}, system dimension is {}",
            ic.len(),
            sys.dim()
        )));
    }
    if let ControlInput::Signal(s) = &input {
        if s.ncols() != steps || s.nrows() != sys.control_dim() {
            return Err(Error::DimensionMismatch(format!(
                "control signal is {}x{}, expected {}x{steps}",
                s.nrows(),
                s.ncols(),
                sys.control_dim()
            )));
        }
    }
    let h = horizon / steps as f64;
    let stepper = Stepper::new(sys, h)?;
    let m = sys.control_dim();

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    times.push(0.0);
    states.push(ic.clone());

    for i in 0..steps {
        let t = i as f64 * h;
        let y = &states[i];
        let u = match &input {
            ControlInput::Zero => DVector::zeros(m),
            ControlInput::Signal(s) => s.column(i).into_owned(),
            ControlInput::Law(law) => law.control(t, y).map_err(|e| Error::StepFailure {
                step: i,
                source: Box::new(e),
            })?,
        };
        let (next, _) = stepper.step(y, &u).map_err(|e| Error::StepFailure {
            step: i,
            source: Box::new(e),
        })?;
        times.push((i + 1) as f64 * h);
        states.push(next);
        controls.push(u);
    }
    Ok(Trajectory {
        times,
        states,
        controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_system(a: f64, quad_coeff: f64, b: f64) -> QuadraticBilinearSystem {
        let quad = if quad_coeff == 0.0 {
            QuadraticOperator::zero()
        } else {
            QuadraticOperator::new(vec![QuadTerm {
                row: 0,
                left: 0,
                right: 0,
                value: quad_coeff,
            }])
        };
        QuadraticBilinearSystem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, a),
            quad,
            DMatrix::from_element(1, 1, b),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_variance_field_is_the_mean() {
        let rf = RandomFieldIc::constant_mean(0.05, 8, 8, 4.0, 0.0, 42);
        let grid = vec![(0.0, 0.0), (0.5, 0.25), (1.0, 1.0)];
        let y = sample_initial_condition(&rf, &grid).unwrap();
        for v in y.iter() {
            assert_eq!(*v, 0.05);
        }
    }

    #[test]
    fn field_at_origin_matches_coefficient_sum() {
        let rf = RandomFieldIc::constant_mean(0.05, 8, 8, 4.0, 0.05, 1234);
        let mu = rf.draw_coefficients().unwrap();
        let mut expected = 0.05;
        for j in 1..=8usize {
            for i in 1..=8usize {
                expected += ((i + j) as f64).powf(-4.0) * mu[i + (j - 1) * 8 - 1];
            }
        }
        let y = sample_initial_condition(&rf, &[(0.0, 0.0)]).unwrap();
        assert_relative_eq!(y[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn slower_decay_gives_rougher_field() {
        // Parseval: the L2 deviation from the mean is determined by the
        // scaled coefficients; gamma = 3 dominates gamma = 4 termwise.
        let grid: Vec<(f64, f64)> = (0..33)
            .flat_map(|i| (0..33).map(move |j| (i as f64 / 32.0, j as f64 / 32.0)))
            .collect();
        let dev = |gamma: f64| {
            let rf = RandomFieldIc::constant_mean(0.05, 8, 8, gamma, 0.05, 77);
            let y = sample_initial_condition(&rf, &grid).unwrap();
            y.iter().map(|v| (v - 0.05).powi(2)).sum::<f64>()
        };
        assert!(dev(3.0) > dev(4.0));
    }

    #[test]
    fn equal_seeds_give_identical_fields() {
        let grid = vec![(0.1, 0.9), (0.3, 0.3)];
        let rf = RandomFieldIc::constant_mean(0.0, 4, 4, 2.0, 1.0, 9);
        let a = sample_initial_condition(&rf, &grid).unwrap();
        let b = sample_initial_condition(&rf.with_seed(9), &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_field_parameters_error() {
        let rf = RandomFieldIc::constant_mean(0.0, 2, 2, -1.0, 0.1, 0);
        assert!(matches!(
            sample_initial_condition(&rf, &[(0.0, 0.0)]),
            Err(Error::InvalidParameter(_))
        ));
        let rf = RandomFieldIc::constant_mean(0.0, 2, 2, 2.0, -0.1, 0);
        assert!(matches!(
            sample_initial_condition(&rf, &[(0.0, 0.0)]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn linear_step_matches_resolvent() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        use rand::Rng;
        let d = 6;
        let e = DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.0 });
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let sys = QuadraticBilinearSystem::new(
            e.clone(),
            a.clone(),
            QuadraticOperator::zero(),
            DMatrix::zeros(d, 1),
            0.0,
        )
        .unwrap();
        let y = DVector::from_fn(d, |i, _| (i as f64 + 1.0) / d as f64);
        let h = 0.1;
        let stepper = Stepper::new(&sys, h).unwrap();
        let (ynext, iters) = stepper.step(&y, &DVector::zeros(1)).unwrap();
        assert!(iters <= 1, "linear Newton should finish in one iteration");
        let closed = (&e / h - &a).lu().solve(&(&e / h * &y)).unwrap();
        assert_relative_eq!(ynext, closed, max_relative = 1e-12);
    }

    #[test]
    fn equilibrium_is_preserved() {
        let sys = scalar_system(-1.0, -0.5, 1.0);
        let y = DVector::zeros(1);
        let next = step_implicit_euler(&sys, &y, &DVector::zeros(1), 0.25).unwrap();
        assert_eq!(next[0], 0.0);
    }

    #[test]
    fn scalar_quadratic_step_matches_bisection() {
        // (z - 1)/0.1 = -z^2, root found by bisection on g(z) = (z-1)/0.1 + z^2
        let sys = scalar_system(0.0, -1.0, 0.0);
        let y = DVector::from_element(1, 1.0);
        let next = step_implicit_euler(&sys, &y, &DVector::zeros(1), 0.1).unwrap();

        let g = |z: f64| (z - 1.0) / 0.1 + z * z;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert_relative_eq!(next[0], 0.5 * (lo + hi), epsilon = 1e-12);
    }

    #[test]
    fn newton_nonconvergence_is_reported() {
        // (z - 1)/h = z^2 has no real root for h = 10 (blowup past the step)
        let sys = scalar_system(0.0, 1.0, 0.0);
        let y = DVector::from_element(1, 1.0);
        let err = step_implicit_euler(&sys, &y, &DVector::zeros(1), 10.0).unwrap_err();
        match err {
            Error::NewtonNonconvergence { residual, .. } => assert!(residual > 0.0),
            other => panic!("expected nonconvergence, got {other}"),
        }
    }

    #[test]
    fn integrate_zero_ic_zero_control_stays_zero() {
        let sys = scalar_system(-1.0, -0.3, 1.0);
        let traj = integrate(&sys, &DVector::zeros(1), ControlInput::Zero, 1.0, 10).unwrap();
        for s in &traj.states {
            assert_eq!(s[0], 0.0);
        }
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.controls.len(), 10);
    }

    #[test]
    fn linear_scalar_integration_closed_form() {
        // y' = -y, implicit Euler: y_k = (1/1.5)^k for h = 0.5
        let sys = scalar_system(-1.0, 0.0, 0.0);
        let traj = integrate(
            &sys,
            &DVector::from_element(1, 1.0),
            ControlInput::Zero,
            1.0,
            2,
        )
        .unwrap();
        assert_relative_eq!(traj.states[1][0], 1.0 / 1.5, epsilon = 1e-14);
        assert_relative_eq!(traj.states[2][0], (1.0f64 / 1.5).powi(2), epsilon = 1e-14);
    }

    #[test]
    fn integration_failure_carries_step_index() {
        let sys = scalar_system(0.0, 1.0, 0.0);
        let err = integrate(
            &sys,
            &DVector::from_element(1, 1.0),
            ControlInput::Zero,
            30.0,
            3,
        )
        .unwrap_err();
        match err {
            Error::StepFailure { step, .. } => assert_eq!(step, 0),
            other => panic!("expected step failure, got {other}"),
        }
    }

    #[test]
    fn integration_is_deterministic() {
        let sys = scalar_system(-0.5, -0.2, 1.0);
        let u = DMatrix::from_fn(1, 8, |_, j| 0.1 * (j as f64).sin());
        let ic = DVector::from_element(1, 0.7);
        let a = integrate(&sys, &ic, ControlInput::Signal(&u), 2.0, 8).unwrap();
        let b = integrate(&sys, &ic, ControlInput::Signal(&u), 2.0, 8).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn projected_quadratic_operator_matches_lift() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let (d, l) = (8, 3);
        let mut terms = Vec::new();
        for _ in 0..30 {
            terms.push(QuadTerm {
                row: rng.gen_range(0..d),
                left: rng.gen_range(0..d),
                right: rng.gen_range(0..d),
                value: rng.gen_range(-1.0..1.0),
            });
        }
        let f = QuadraticOperator::new(terms);
        // random orthonormal basis via QR
        let m = DMatrix::from_fn(d, l, |_, _| rng.gen_range(-1.0..1.0));
        let u = m.qr().q();
        let fred = f.project(&u);
        let yr = DVector::from_fn(l, |i, _| 0.3 * (i as f64 + 1.0));
        let lifted = &u * &yr;
        let expected = u.transpose() * f.apply(&lifted);
        assert_relative_eq!(fred.apply(&yr), expected, max_relative = 1e-12);
    }
}
