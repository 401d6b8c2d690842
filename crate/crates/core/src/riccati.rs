//! Algebraic Riccati equations and LQR / SDRE feedback synthesis.
//!
//! `solve_are` computes the stabilizing solution from the stable invariant
//! subspace of the 2n x 2n Hamiltonian matrix (matrix-sign iteration with
//! determinant scaling), followed by Newton-Kleinman refinement when the
//! residual asks for it. The refinement's Lyapunov equations are solved with
//! the same sign iteration on a block-triangular embedding.

use nalgebra::{DMatrix, DVector};

use crate::linalg::symmetrize;
use crate::qbsys::{Controller, QuadraticBilinearSystem};
use crate::{Error, Result};

/// Matrix sign function by scaled Newton iteration. Fails if the argument
/// has eigenvalues on (or numerically touching) the imaginary axis.
fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut z = m.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let mut logdet = 0.0;
        for i in 0..n {
            let d = lu.u()[(i, i)].abs();
            if d == 0.0 || !d.is_finite() {
                return Err(Error::SingularSystem(
                    "sign iteration hit a singular iterate".into(),
                ));
            }
            logdet += d.ln();
        }
        let zinv = lu.try_inverse().ok_or_else(|| {
            Error::SingularSystem("sign iteration hit a singular iterate".into())
        })?;
        let c = (-logdet / n as f64).exp();
        let znew = (&z * c + &zinv / c) * 0.5;
        let delta = (&znew - &z).norm();
        z = znew;
        if delta <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    Err(Error::SingularSystem(
        "sign iteration did not converge (eigenvalues near the imaginary axis)".into(),
    ))
}

/// Solve A^T X + X A + W = 0 for stable A via the sign function of
/// [[A^T, W], [0, -A]].
pub fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&a.transpose());
    m.view_mut((0, n), (n, n)).copy_from(w);
    m.view_mut((n, n), (n, n)).copy_from(&(-a));
    let z = matrix_sign(&m)?;
    Ok(z.view((0, n), (n, n)) * 0.5)
}

fn are_residual(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * s * p + q
}

/// Stabilizing solution of A^T P + P A - P B R^{-1} B^T P + Q = 0.
///
/// The returned P is symmetric positive semidefinite with residual
/// Frobenius norm below 1e-9 (1 + |Q|_F), and A - B R^{-1} B^T P is Hurwitz.
pub fn solve_are(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch("ARE operand sizes".into()));
    }
    let m = b.ncols();
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::DimensionMismatch("R must be m x m".into()));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("R must be positive definite".into()))?;
    let s = b * r_chol.inverse() * b.transpose();

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let z = matrix_sign(&h)?;
    // projector onto the stable invariant subspace
    let proj = (DMatrix::identity(2 * n, 2 * n) - z) * 0.5;
    let svd = proj.svd(true, false);
    let rank = svd.singular_values.iter().filter(|s| **s > 0.5).count();
    if rank != n {
        return Err(Error::Unstabilizable);
    }
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let u1 = u.view((0, 0), (n, n)).into_owned();
    let u2 = u.view((n, 0), (n, n)).into_owned();
    // P = U2 U1^{-1}, via U1^T Y = U2^T
    let y = u1
        .transpose()
        .lu()
        .solve(&u2.transpose())
        .ok_or(Error::Unstabilizable)?;
    let mut p = symmetrize(&y.transpose());

    let tol = 1e-9 * (1.0 + q.norm());
    let mut resid_mat = are_residual(a, &s, q, &p);
    let mut resid = resid_mat.norm();
    // Newton-Kleinman refinement in defect-correction form: solve the
    // closed-loop Lyapunov equation for the residual and add the correction.
    let mut passes = 0;
    while resid > 1e-3 * tol && passes < 15 {
        let a_closed = a - &s * &p;
        let Ok(delta) = solve_lyapunov(&a_closed, &resid_mat) else {
            break;
        };
        let p_new = symmetrize(&(&p + &delta));
        let new_mat = are_residual(a, &s, q, &p_new);
        let new_resid = new_mat.norm();
        if !new_resid.is_finite() || new_resid >= resid {
            break;
        }
        p = p_new;
        resid_mat = new_mat;
        resid = new_resid;
        passes += 1;
    }
    if resid > tol {
        return Err(Error::SingularSystem(format!(
            "ARE residual {resid:.3e} above tolerance {tol:.3e}"
        )));
    }
    // PSD check (detectability): smallest eigenvalue may be a rounding hair
    // below zero for singular Q.
    let eig = p.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-8 * (1.0 + p.norm()) {
        return Err(Error::Indefinite);
    }
    Ok(p)
}

/// Semilinear view `x' = A(x) x + B u` of a quadratic-bilinear system with the
/// mass matrix absorbed, plus the quadratic weights of the infinite-horizon
/// cost. `A(x) = A0 + sum_k x_k G_k` where G_k collects the quadratic terms
/// contracted against their trailing factor.
#[derive(Clone)]
pub struct SemilinearForm {
    a0: DMatrix<f64>,
    coupling: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    pub state_weight: DMatrix<f64>,
    pub control_weight: DMatrix<f64>,
}

impl SemilinearForm {
    /// Build from a (reduced) system, inverting the mass matrix so that the
    /// form describes the actual vector field.
    pub fn from_system(
        sys: &QuadraticBilinearSystem,
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
    ) -> Result<Self> {
        let d = sys.dim();
        let mass_lu = sys.mass.clone().lu();
        let a0 = mass_lu
            .solve(&sys.linear)
            .ok_or_else(|| Error::SingularSystem("mass matrix".into()))?;
        let b = mass_lu
            .solve(&sys.input)
            .ok_or_else(|| Error::SingularSystem("mass matrix".into()))?;
        let mut coupling = Vec::new();
        if !sys.quad.is_zero() {
            let mut raw = vec![DMatrix::<f64>::zeros(d, d); d];
            for t in sys.quad.terms() {
                raw[t.right][(t.row, t.left)] += t.value;
            }
            coupling = raw
                .into_iter()
                .map(|g| mass_lu.solve(&g).expect("mass LU solve"))
                .collect();
        }
        Ok(SemilinearForm {
            a0,
            coupling,
            b,
            state_weight,
            control_weight,
        })
    }

    /// Linearization-only form (quadratic coupling dropped); exact for
    /// feedback laws evaluated at the origin.
    pub fn linearization_at_zero(
        sys: &QuadraticBilinearSystem,
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
    ) -> Result<Self> {
        let mut form = Self::from_system(
            &QuadraticBilinearSystem::new(
                sys.mass.clone(),
                sys.linear.clone(),
                crate::qbsys::QuadraticOperator::zero(),
                sys.input.clone(),
                sys.shift,
            )?,
            state_weight,
            control_weight,
        )?;
        form.coupling.clear();
        Ok(form)
    }

    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    /// A(x) with the quadratic terms frozen at x.
    pub fn state_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.a0.clone();
        for (k, g) in self.coupling.iter().enumerate() {
            if x[k] != 0.0 {
                a += g * x[k];
            }
        }
        a
    }

    pub fn input_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }
}

/// Kind tag of a synthesized feedback law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawKind {
    Lqr,
    Sdre,
    TensorTrain,
    PmpReceding,
}

type LawEval = Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;

/// State-feedback map, optionally composed with a basis projection so that
/// full-order states are reduced before evaluation.
pub struct FeedbackLaw {
    kind: LawKind,
    basis: Option<DMatrix<f64>>,
    eval: LawEval,
}

impl FeedbackLaw {
    pub fn new(kind: LawKind, eval: LawEval) -> Self {
        FeedbackLaw {
            kind,
            basis: None,
            eval,
        }
    }

    /// Project incoming states onto `basis` before evaluating (feedback of a
    /// reduced law applied to the full-order system).
    pub fn with_basis(mut self, basis: DMatrix<f64>) -> Self {
        self.basis = Some(basis);
        self
    }

    pub fn kind(&self) -> LawKind {
        self.kind
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    /// Evaluate in the law's native coordinates (no projection).
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.eval)(x)
    }
}

impl Controller for FeedbackLaw {
    fn control(&self, _t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.basis {
            Some(u) => (self.eval)(&(u.transpose() * y)),
            None => (self.eval)(y),
        }
    }
}

/// LQR: one Riccati solve at the origin, constant gain.
pub fn lqr_law(form: &SemilinearForm) -> Result<FeedbackLaw> {
    let zero = DVector::zeros(form.dim());
    let a0 = form.state_matrix(&zero);
    let p = solve_are(&a0, &form.b, &form.state_weight, &form.control_weight)?;
    let r_inv = form
        .control_weight
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("control weight must be SPD".into()))?
        .inverse();
    let gain = r_inv * form.b.transpose() * p;
    Ok(FeedbackLaw::new(
        LawKind::Lqr,
        Box::new(move |x| Ok(-(&gain * x))),
    ))
}

/// SDRE: re-solves the Riccati equation with A(x) frozen at every queried
/// state; u(x) = -R^{-1} B^T P(x) x.
pub fn sdre_law(form: &SemilinearForm) -> Result<FeedbackLaw> {
    let r_inv = form
        .control_weight
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("control weight must be SPD".into()))?
        .inverse();
    let form = form.clone();
    Ok(FeedbackLaw::new(
        LawKind::Sdre,
        Box::new(move |x| {
            let a = form.state_matrix(x);
            let p = solve_are(&a, &form.b, &form.state_weight, &form.control_weight).map_err(
                |e| Error::SdreAtState {
                    state: x.clone(),
                    state_norm: x.norm(),
                    source: Box::new(e),
                },
            )?;
            Ok(-(&r_inv * form.b.transpose() * (p * x)))
        }),
    ))
}
