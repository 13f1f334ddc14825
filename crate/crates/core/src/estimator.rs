//! Moving-horizon estimation of the state window, traction coefficients
//! (mu, nu), and compass offset from noisy pose measurements.
//!
//! The window states are eliminated by single shooting from the first state,
//! so the decision vector is just `(x_k, mu, nu, dtheta)` — six numbers. The
//! solver is projected Gauss-Newton with Levenberg damping as fallback; mu
//! and nu are clamped into `[0, 1]` and dtheta wrapped after every step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinodynamics::{Control, State2D};
use crate::util::{angle_diff, wrap_angle};
use crate::world::Measurement;

/// Estimated traction coefficients and compass offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub mu: f64,
    pub nu: f64,
    pub dtheta: f64,
}

impl ParamVector {
    pub fn new(mu: f64, nu: f64, dtheta: f64) -> Self {
        Self { mu: mu.clamp(0.0, 1.0), nu: nu.clamp(0.0, 1.0), dtheta: wrap_angle(dtheta) }
    }

    pub fn feasible(&self) -> bool {
        (0.0..=1.0).contains(&self.mu)
            && (0.0..=1.0).contains(&self.nu)
            && (-std::f64::consts::PI..std::f64::consts::PI).contains(&self.dtheta)
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self { mu: 1.0, nu: 1.0, dtheta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    GaussNewtonProjected,
    LmBox,
}

/// Estimator configuration. Weight matrices are diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Window length in steps (the window holds N+1 measurements).
    pub horizon: usize,
    pub dt: f64,
    /// Arrival cost on the first state (px, py, theta).
    pub px_weight: [f64; 3],
    /// Arrival cost on the parameters (mu, nu, dtheta).
    pub pm_weight: [f64; 3],
    /// Measurement residual weight (px, py, theta).
    pub pw_weight: [f64; 3],
    pub solver: SolverKind,
    pub max_iters: usize,
    pub tol: f64,
    /// Below these per-window excitation sums the matching coefficient is
    /// frozen at its prior (it does not appear in the residuals).
    pub min_v_excitation: f64,
    pub min_omega_excitation: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            px_weight: [0.1; 3],
            pm_weight: [0.1; 3],
            pw_weight: [1.0; 3],
            solver: SolverKind::GaussNewtonProjected,
            max_iters: 50,
            tol: 1e-12,
            min_v_excitation: 1e-3,
            min_omega_excitation: 1e-3,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidConfig("estimator horizon must be >= 2".into()));
        }
        if self.dt <= 0.0 || self.tol <= 0.0 {
            return Err(Error::InvalidConfig("dt and tol must be positive".into()));
        }
        for w in self.px_weight.iter().chain(&self.pm_weight).chain(&self.pw_weight) {
            if *w < 0.0 {
                return Err(Error::InvalidConfig("weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// One estimation window: N+1 measurements, N controls, and the priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementWindow {
    pub measurements: Vec<Measurement>,
    pub controls: Vec<Control>,
    pub prior_state: State2D,
    pub prior_params: ParamVector,
}

impl MeasurementWindow {
    pub fn validate(&self) -> Result<()> {
        if self.measurements.len() != self.controls.len() + 1 {
            return Err(Error::InvalidInput("window needs |z| = |u| + 1".into()));
        }
        Ok(())
    }
}

/// Solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MheDiagnostics {
    pub iterations: usize,
    pub cost: f64,
    pub converged: bool,
    /// Set when the window lacked the control excitation to identify one or
    /// more parameters, which were then frozen at their prior.
    pub excitation_flag: bool,
}

/// Measurement equation: GNSS gives position directly; the compass heading is
/// corrected by subtracting the estimated North offset.
pub fn measurement_model(z: &Measurement, dtheta: f64) -> State2D {
    State2D::new(z.px, z.py, wrap_angle(z.theta_compass - dtheta))
}

/// Decision vector layout: [px, py, theta, mu, nu, dtheta].
const NP: usize = 6;

struct ResidualProblem<'a> {
    window: &'a MeasurementWindow,
    cfg: &'a EstimatorConfig,
    free: [bool; NP],
}

impl ResidualProblem<'_> {
    fn residual_count(&self) -> usize {
        3 + 3 + 3 * self.window.measurements.len()
    }

    /// Propagate the window states and their sensitivities from the decision
    /// vector, filling the stacked residual and (optionally) its Jacobian.
    fn evaluate(&self, p: &[f64; NP], jac: Option<&mut DMatrix<f64>>) -> (DVector<f64>, Vec<State2D>) {
        let w = self.window;
        let cfg = self.cfg;
        let n_meas = w.measurements.len();
        let mut r = DVector::zeros(self.residual_count());
        let mut jac = jac;

        let sq = |v: f64| v.max(0.0).sqrt();
        let wx: Vec<f64> = cfg.px_weight.iter().map(|&v| sq(v)).collect();
        let wm: Vec<f64> = cfg.pm_weight.iter().map(|&v| sq(v)).collect();
        let ww: Vec<f64> = cfg.pw_weight.iter().map(|&v| sq(v)).collect();

        // arrival cost on the first state
        r[0] = wx[0] * (p[0] - w.prior_state.px);
        r[1] = wx[1] * (p[1] - w.prior_state.py);
        r[2] = wx[2] * angle_diff(p[2], w.prior_state.theta);
        // arrival cost on the parameters
        r[3] = wm[0] * (p[3] - w.prior_params.mu);
        r[4] = wm[1] * (p[4] - w.prior_params.nu);
        r[5] = wm[2] * angle_diff(p[5], w.prior_params.dtheta);
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
            for i in 0..3 {
                j[(i, i)] = wx[i];
                j[(3 + i, 3 + i)] = wm[i];
            }
        }

        // single shooting through the dynamics with sensitivity propagation;
        // sens rows: d(px,py,theta)/d[px0, py0, theta0, mu, nu]
        let mut x = State2D::new(p[0], p[1], p[2]);
        let mut states = Vec::with_capacity(n_meas);
        let mut sens = [[0.0f64; 5]; 3];
        sens[0][0] = 1.0;
        sens[1][1] = 1.0;
        sens[2][2] = 1.0;
        let (mu, nu, dtheta) = (p[3], p[4], p[5]);

        for i in 0..n_meas {
            states.push(x);
            let z = &w.measurements[i];
            let h = measurement_model(z, dtheta);
            let row = 6 + 3 * i;
            r[row] = ww[0] * (x.px - h.px);
            r[row + 1] = ww[1] * (x.py - h.py);
            r[row + 2] = ww[2] * angle_diff(x.theta, h.theta);
            if let Some(j) = jac.as_deref_mut() {
                for c in 0..5 {
                    j[(row, c)] = ww[0] * sens[0][c];
                    j[(row + 1, c)] = ww[1] * sens[1][c];
                    j[(row + 2, c)] = ww[2] * sens[2][c];
                }
                // h's heading is z_theta - dtheta, so d(residual_theta)/d(dtheta) = +1
                j[(row + 2, 5)] = ww[2];
            }

            if i < w.controls.len() {
                let u = w.controls[i];
                let (s, c) = x.theta.sin_cos();
                let dt = cfg.dt;
                // x' = x + [mu v c, mu v s, nu w] dt
                let next = State2D::new(
                    x.px + mu * u.v * c * dt,
                    x.py + mu * u.v * s * dt,
                    x.theta + nu * u.omega * dt,
                );
                // sens' = A sens + B
                let a02 = -mu * u.v * s * dt;
                let a12 = mu * u.v * c * dt;
                let mut next_sens = [[0.0f64; 5]; 3];
                for col in 0..5 {
                    next_sens[0][col] = sens[0][col] + a02 * sens[2][col];
                    next_sens[1][col] = sens[1][col] + a12 * sens[2][col];
                    next_sens[2][col] = sens[2][col];
                }
                next_sens[0][3] += u.v * c * dt;
                next_sens[1][3] += u.v * s * dt;
                next_sens[2][4] += u.omega * dt;
                sens = next_sens;
                x = next;
            }
        }
        (r, states)
    }
}

fn project(p: &mut [f64; NP]) {
    p[2] = wrap_angle(p[2]);
    p[3] = p[3].clamp(0.0, 1.0);
    p[4] = p[4].clamp(0.0, 1.0);
    p[5] = wrap_angle(p[5]);
}

/// Solve the window for `(states, params)` by damped projected Gauss-Newton.
pub fn solve_mhe(
    window: &MeasurementWindow,
    cfg: &EstimatorConfig,
) -> Result<(Vec<State2D>, ParamVector, MheDiagnostics)> {
    window.validate()?;
    cfg.validate()?;

    let v_exc: f64 = window.controls.iter().map(|u| u.v.abs()).sum();
    let w_exc: f64 = window.controls.iter().map(|u| u.omega.abs()).sum();
    let mu_free = v_exc > cfg.min_v_excitation;
    let nu_free = w_exc > cfg.min_omega_excitation;
    // with no motion at all, theta and dtheta are confounded: freeze dtheta
    let dtheta_free = mu_free || nu_free;
    let excitation_flag = !(mu_free && nu_free);

    let free = [true, true, true, mu_free, nu_free, dtheta_free];
    let problem = ResidualProblem { window, cfg, free };

    let z0 = &window.measurements[0];
    let mut p = [
        z0.px,
        z0.py,
        wrap_angle(z0.theta_compass - window.prior_params.dtheta),
        window.prior_params.mu,
        window.prior_params.nu,
        window.prior_params.dtheta,
    ];
    project(&mut p);

    let m = problem.residual_count();
    let mut jac = DMatrix::zeros(m, NP);
    let (mut r, mut states) = problem.evaluate(&p, Some(&mut jac));
    let mut cost = 0.5 * r.norm_squared();

    let mut lambda = match cfg.solver {
        SolverKind::GaussNewtonProjected => 0.0,
        SolverKind::LmBox => 1e-4,
    };
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        // normal equations restricted to the free coordinates
        let free_idx: Vec<usize> = (0..NP).filter(|&i| problem.free[i]).collect();
        let nf = free_idx.len();
        let mut jtj = DMatrix::zeros(nf, nf);
        let mut jtr = DVector::zeros(nf);
        for (a, &ia) in free_idx.iter().enumerate() {
            for (b, &ib) in free_idx.iter().enumerate() {
                let mut s = 0.0;
                for k in 0..m {
                    s += jac[(k, ia)] * jac[(k, ib)];
                }
                jtj[(a, b)] = s;
            }
            let mut s = 0.0;
            for k in 0..m {
                s += jac[(k, ia)] * r[k];
            }
            jtr[a] = s;
        }

        let mut step_accepted = false;
        for _ in 0..20 {
            let mut lhs = jtj.clone();
            for d in 0..nf {
                lhs[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let delta = match lhs.cholesky() {
                Some(ch) => ch.solve(&(-&jtr)),
                None => {
                    lambda = (lambda * 10.0).max(1e-6);
                    continue;
                }
            };
            let mut p_new = p;
            for (a, &ia) in free_idx.iter().enumerate() {
                p_new[ia] += delta[a];
            }
            project(&mut p_new);
            let (r_new, states_new) = problem.evaluate(&p_new, None);
            let cost_new = 0.5 * r_new.norm_squared();
            if cost_new <= cost {
                let drop = cost - cost_new;
                p = p_new;
                r = r_new;
                states = states_new;
                cost = cost_new;
                lambda = (lambda * 0.25).max(0.0);
                step_accepted = true;
                if drop < cfg.tol {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 10.0).max(1e-8);
        }
        if converged || !step_accepted {
            converged = converged || !step_accepted;
            break;
        }
        problem.evaluate(&p, Some(&mut jac));
    }

    let params = ParamVector::new(p[3], p[4], p[5]);
    let diag = MheDiagnostics { iterations, cost, converged, excitation_flag };
    Ok((states, params, diag))
}

/// A labeled sample emitted by [`run_labeling`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub pose: State2D,
    pub mu: f64,
    pub nu: f64,
    pub excitation_flag: bool,
}

/// Slide the window over a (measurement, control) log one step at a time,
/// emitting the smoothed pose and the window's (mu, nu) for each anchor.
///
/// The log holds `L` measurements and `L - 1` controls (the control applied
/// between consecutive measurements). Anchors run from 0 to `L - 1 - N`.
pub fn run_labeling(
    measurements: &[Measurement],
    controls: &[Control],
    cfg: &EstimatorConfig,
) -> Result<Vec<LabeledStep>> {
    cfg.validate()?;
    if controls.len() + 1 != measurements.len() {
        return Err(Error::InvalidInput("log needs |z| = |u| + 1".into()));
    }
    let n = cfg.horizon;
    if measurements.len() < n + 1 {
        return Err(Error::InvalidInput(format!(
            "log of {} measurements shorter than window of {}",
            measurements.len(),
            n + 1
        )));
    }
    let mut out = Vec::new();
    let mut prior_params = ParamVector::default();
    let mut prior_state = measurement_model(&measurements[0], 0.0);
    // Bootstrap the parameter prior: there is no "previous iteration" for the
    // first window, and the arrival cost would bias the estimate toward an
    // arbitrary default. Solving the first window once without the parameter
    // arrival term gives an unbiased starting prior.
    {
        let boot_cfg = EstimatorConfig { pm_weight: [0.0; 3], ..cfg.clone() };
        let window = MeasurementWindow {
            measurements: measurements[0..=n].to_vec(),
            controls: controls[0..n].to_vec(),
            prior_state,
            prior_params,
        };
        let (_, params, _) = solve_mhe(&window, &boot_cfg)?;
        prior_params = params;
    }
    for k in 0..=(measurements.len() - 1 - n) {
        let window = MeasurementWindow {
            measurements: measurements[k..=k + n].to_vec(),
            controls: controls[k..k + n].to_vec(),
            prior_state,
            prior_params,
        };
        let (states, params, diag) = solve_mhe(&window, cfg)?;
        out.push(LabeledStep {
            pose: states[0],
            mu: params.mu,
            nu: params.nu,
            excitation_flag: diag.excitation_flag,
        });
        prior_params = params;
        // next window's prior state: the smoothed second state of this one
        prior_state = states[1];
    }
    Ok(out)
}
