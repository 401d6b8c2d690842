//! Open-loop optimal control by a discrete-adjoint reduced-gradient method.
//!
//! The cost is discretized with left-endpoint rectangle quadrature on the
//! implicit-Euler trajectory, and the gradient is the exact gradient of that
//! discrete cost (discretize-then-optimize). The continuous adjoint system
//! is recovered in the limit h -> 0.

use nalgebra::{DMatrix, DVector};

use crate::qbsys::{integrate, ControlInput, QuadraticBilinearSystem, Stepper, Trajectory};
use crate::{Error, Result};

/// Finite-horizon quadratic optimal control problem for a (full or reduced)
/// quadratic-bilinear system.
#[derive(Clone)]
pub struct OcpDefinition {
    pub system: QuadraticBilinearSystem,
    pub state_weight: DMatrix<f64>,
    pub control_weight: DMatrix<f64>,
    pub horizon: f64,
    pub steps: usize,
}

impl OcpDefinition {
    pub fn new(
        system: QuadraticBilinearSystem,
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let d = system.dim();
        let m = system.control_dim();
        if state_weight.nrows() != d || state_weight.ncols() != d {
            return Err(Error::DimensionMismatch("state weight must be d x d".into()));
        }
        if control_weight.nrows() != m || control_weight.ncols() != m {
            return Err(Error::DimensionMismatch(
                "control weight must be m x m".into(),
            ));
        }
        if control_weight.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter(
                "control weight must be positive definite".into(),
            ));
        }
        // PSD check with a tiny shift so that singular but valid weights pass
        let shift = 1e-12 * (1.0 + state_weight.norm());
        if (state_weight.clone() + DMatrix::identity(d, d) * shift)
            .cholesky()
            .is_none()
        {
            return Err(Error::InvalidParameter(
                "state weight must be positive semidefinite".into(),
            ));
        }
        if horizon <= 0.0 || steps == 0 {
            return Err(Error::InvalidParameter(
                "horizon and step count must be positive".into(),
            ));
        }
        Ok(OcpDefinition {
            system,
            state_weight,
            control_weight,
            horizon,
            steps,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn zero_signal(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.system.control_dim(), self.steps)
    }

    /// Left-endpoint rectangle quadrature of the running cost on a trajectory.
    pub fn quadrature_cost(&self, traj: &Trajectory) -> f64 {
        let h = self.step_size();
        let mut cost = 0.0;
        for i in 0..traj.steps() {
            let y = &traj.states[i];
            let u = &traj.controls[i];
            cost += h * ((&self.state_weight * y).dot(y) + (&self.control_weight * u).dot(u));
        }
        cost
    }
}

/// Converged (or best-effort) solution of the open-loop problem.
#[derive(Debug, Clone)]
pub struct PmpSolution {
    pub trajectory: Trajectory,
    /// Adjoint columns p(t_0) .. p(t_{n_t}); the terminal column is exactly zero.
    pub adjoints: Vec<DVector<f64>>,
    pub control: DMatrix<f64>,
    pub total_cost: f64,
    /// Infinity norm of the discrete gradient at the returned control.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cost_history: Vec<f64>,
}

/// Gradient-descent options. Defaults: Armijo c = 1e-4, shrink 0.5,
/// initial step 1, gradient infinity-norm tolerance 1e-6, 500 iterations.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-6,
            max_iterations: 500,
            armijo_c: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            min_step: 1e-14,
        }
    }
}

/// Integrate the system under the given control signal and return the
/// trajectory together with the discrete cost.
pub fn forward_cost(
    def: &OcpDefinition,
    ic: &DVector<f64>,
    u_signal: &DMatrix<f64>,
) -> Result<(Trajectory, f64)> {
    let traj = integrate(
        &def.system,
        ic,
        ControlInput::Signal(u_signal),
        def.horizon,
        def.steps,
    )?;
    let cost = def.quadrature_cost(&traj);
    Ok((traj, cost))
}

/// Backward adjoint recursion on an existing trajectory. Returns the exact
/// gradient of the discrete cost with respect to the control columns and the
/// adjoint columns p(t_0) .. p(t_{n_t}).
pub fn backward_gradient(
    def: &OcpDefinition,
    traj: &Trajectory,
) -> Result<(DMatrix<f64>, Vec<DVector<f64>>)> {
    let n = traj.steps();
    let d = def.system.dim();
    let h = def.step_size();
    let stepper = Stepper::new(&def.system, h)?;

    let mut adjoints = vec![DVector::zeros(d); n + 1];
    // p(t_n) = 0 exactly; recursion: M_j^T p_j = (E/h)^T p_{j+1} - 2 h Q y_j
    for j in (1..n).rev() {
        let mut rhs = stepper.mass_h_transpose_mul(&adjoints[j + 1]);
        rhs -= (&def.state_weight * &traj.states[j]) * (2.0 * h);
        adjoints[j] = stepper.solve_transposed(&traj.states[j], &rhs)?;
    }
    if n >= 1 {
        let mut rhs = stepper.mass_h_transpose_mul(&adjoints[1]);
        rhs -= (&def.state_weight * &traj.states[0]) * (2.0 * h);
        adjoints[0] = stepper.solve_transposed(&traj.states[0], &rhs)?;
    }

    let m = def.system.control_dim();
    let mut grad = DMatrix::zeros(m, n);
    for i in 0..n {
        let g = (&def.control_weight * &traj.controls[i]) * (2.0 * h)
            - def.system.input.transpose() * &adjoints[i + 1];
        grad.set_column(i, &g);
    }
    Ok((grad, adjoints))
}

/// Forward pass plus adjoint gradient in one call.
pub fn adjoint_gradient(
    def: &OcpDefinition,
    ic: &DVector<f64>,
    u_signal: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let (traj, cost) = forward_cost(def, ic, u_signal)?;
    let (grad, _) = backward_gradient(def, &traj)?;
    Ok((grad, cost))
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Gradient descent with Armijo backtracking on the discrete cost.
///
/// Terminates when the gradient infinity norm drops below the tolerance;
/// hitting the iteration cap or a failed line search returns the best
/// iterate flagged as not converged.
pub fn pmp_solve(
    def: &OcpDefinition,
    ic: &DVector<f64>,
    u_init: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<PmpSolution> {
    let mut u = u_init.clone();
    let (mut traj, mut cost) = forward_cost(def, ic, &u)?;
    let (mut grad, mut adjoints) = backward_gradient(def, &traj)?;
    let mut history = vec![cost];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let gnorm = inf_norm(&grad);
        if gnorm <= opts.tolerance {
            converged = true;
            break;
        }
        let g2 = grad.iter().map(|v| v * v).sum::<f64>();
        let mut t = opts.initial_step;
        let mut accepted = None;
        while t >= opts.min_step {
            let u_trial = &u - &grad * t;
            match forward_cost(def, ic, &u_trial) {
                Ok((traj_t, cost_t)) if cost_t <= cost - opts.armijo_c * t * g2 => {
                    accepted = Some((u_trial, traj_t, cost_t));
                    break;
                }
                _ => t *= opts.shrink,
            }
        }
        let Some((u_new, traj_new, cost_new)) = accepted else {
            break; // line search stalled: return best iterate, not converged
        };
        u = u_new;
        traj = traj_new;
        cost = cost_new;
        let (g, a) = backward_gradient(def, &traj)?;
        grad = g;
        adjoints = a;
        history.push(cost);
        iterations += 1;
    }
    if !converged && inf_norm(&grad) <= opts.tolerance {
        converged = true;
    }

    Ok(PmpSolution {
        trajectory: traj,
        adjoints,
        control: u,
        total_cost: cost,
        gradient_norm: inf_norm(&grad),
        iterations,
        converged,
        cost_history: history,
    })
}

/// Outcome of the initial-guess selection of the optimized offline stage.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub signal: DMatrix<f64>,
    pub cost: f64,
    pub picked_reduced: bool,
}

/// Choose between the prefixed guess and a lifted reduced-optimal control by
/// comparing their full-model costs; the cheaper signal wins (ties keep the
/// default). A candidate whose rollout diverges is skipped.
pub fn warm_start_choice(
    def: &OcpDefinition,
    ic: &DVector<f64>,
    u_default: &DMatrix<f64>,
    u_reduced_lift: &DMatrix<f64>,
) -> Result<WarmStart> {
    let default_cost = forward_cost(def, ic, u_default).map(|(_, c)| c);
    let reduced_cost = forward_cost(def, ic, u_reduced_lift).map(|(_, c)| c);
    match (default_cost, reduced_cost) {
        (Ok(cd), Ok(cr)) => {
            if cr < cd {
                Ok(WarmStart {
                    signal: u_reduced_lift.clone(),
                    cost: cr,
                    picked_reduced: true,
                })
            } else {
                Ok(WarmStart {
                    signal: u_default.clone(),
                    cost: cd,
                    picked_reduced: false,
                })
            }
        }
        (Ok(cd), Err(_)) => Ok(WarmStart {
            signal: u_default.clone(),
            cost: cd,
            picked_reduced: false,
        }),
        (Err(_), Ok(cr)) => Ok(WarmStart {
            signal: u_reduced_lift.clone(),
            cost: cr,
            picked_reduced: true,
        }),
        (Err(e), Err(_)) => Err(e),
    }
}
