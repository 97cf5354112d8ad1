use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Derivatives, Dims, Jet, NlpEvaluator, ParametricNlp, PrimalDualPoint, Scalar, Values};
use crate::sqp::{solve, SolveTrace, SolverOptions};

use super::jacobian_for_rho;

pub const NOMINAL_MPC_THETA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction horizon `N`.
    pub horizon: usize,
    /// Diagonal state weight.
    pub state_weight: [f64; 2],
    pub input_bound: f64,
    /// Bound on `|x²|` at every predicted step.
    pub state_bound: f64,
    pub initial_state: [f64; 2],
    /// Closed-loop steps `T`.
    pub rollout_length: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 20,
            state_weight: [1e-2, 1.0],
            input_bound: 2.0,
            state_bound: 2.0,
            initial_state: [3.0, 0.0],
            rollout_length: 200,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be positive".into()));
        }
        if self.rollout_length == 0 {
            return Err(Error::Config("MPC rollout length must be positive".into()));
        }
        if !(self.input_bound > 0.0 && self.state_bound > 0.0) {
            return Err(Error::Config("MPC bounds must be positive".into()));
        }
        if self.state_weight.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("MPC state weights must be positive".into()));
        }
        Ok(())
    }
}

/// One step of the plant `x⁺ = f(x, u; θ)`.
pub fn plant<S: Scalar>(x: [S; 2], u: S, theta: S) -> [S; 2] {
    [
        x[0] + x[1] * 0.4,
        x[1] * 0.56 + x[0] * x[1] * 0.1 + u * 0.4 + theta * x[0] * (-x[0]).exp(),
    ]
}

/// Index map of the MPC decision vector `(x_0 … x_N, u_0 … u_{N−1})` and
/// of its constraint blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MpcLayout {
    pub horizon: usize,
}

impl MpcLayout {
    pub fn state(&self, k: usize) -> usize {
        2 * k
    }
    pub fn input(&self, k: usize) -> usize {
        2 * (self.horizon + 1) + k
    }
    pub fn n_x(&self) -> usize {
        3 * self.horizon + 2
    }
    /// Upper and lower input bounds of step `k` are rows `2k` and `2k + 1`.
    pub fn input_bound_row(&self, k: usize) -> usize {
        2 * k
    }
    /// Upper and lower `x²` bounds of step `k`.
    pub fn state_bound_row(&self, k: usize) -> usize {
        2 * self.horizon + 2 * k
    }
    pub fn n_in(&self) -> usize {
        4 * self.horizon + 2
    }
    pub fn n_eq(&self) -> usize {
        2 * (self.horizon + 1)
    }
}

/// Parameter vector `(x_current, θ)` of one MPC instance.
pub fn mpc_parameter(state: [f64; 2], theta: f64) -> DVector<f64> {
    DVector::from_vec(vec![state[0], state[1], theta])
}

struct MpcEvaluator {
    cfg: MpcConfig,
    layout: MpcLayout,
}

impl MpcEvaluator {
    fn step_vars(&self, x: &[f64], k: usize) -> ([f64; 2], f64) {
        let s = self.layout.state(k);
        ([x[s], x[s + 1]], x[self.layout.input(k)])
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let q = self.cfg.state_weight;
        (0..=self.layout.horizon)
            .map(|k| {
                let s = self.layout.state(k);
                q[0] * x[s] * x[s] + q[1] * x[s + 1] * x[s + 1]
            })
            .sum()
    }

    fn inequalities(&self, x: &[f64]) -> DVector<f64> {
        let lay = self.layout;
        let mut g = DVector::zeros(lay.n_in());
        for k in 0..lay.horizon {
            let u = x[lay.input(k)];
            g[lay.input_bound_row(k)] = u - self.cfg.input_bound;
            g[lay.input_bound_row(k) + 1] = -u - self.cfg.input_bound;
        }
        for k in 0..=lay.horizon {
            let v = x[lay.state(k) + 1];
            g[lay.state_bound_row(k)] = v - self.cfg.state_bound;
            g[lay.state_bound_row(k) + 1] = -v - self.cfg.state_bound;
        }
        g
    }
}

impl NlpEvaluator for MpcEvaluator {
    fn dims(&self) -> Dims {
        Dims {
            n_x: self.layout.n_x(),
            n_in: self.layout.n_in(),
            n_eq: self.layout.n_eq(),
            n_theta: 3,
        }
    }

    fn values(&self, x: &[f64], p: &[f64]) -> Values {
        let lay = self.layout;
        let mut h = DVector::zeros(lay.n_eq());
        h[0] = x[0] - p[0];
        h[1] = x[1] - p[1];
        for k in 0..lay.horizon {
            let (xs, u) = self.step_vars(x, k);
            let next = plant(xs, u, p[2]);
            let s = lay.state(k + 1);
            h[2 + 2 * k] = x[s] - next[0];
            h[3 + 2 * k] = x[s + 1] - next[1];
        }
        Values {
            objective: self.objective(x),
            inequalities: self.inequalities(x),
            equalities: h,
        }
    }

    fn derivatives(&self, x: &[f64], p: &[f64], _lambda: &[f64], nu: &[f64]) -> Derivatives {
        let lay = self.layout;
        let d = self.dims();
        let q = self.cfg.state_weight;

        let mut grad = DVector::zeros(d.n_x);
        let mut hess = DMatrix::zeros(d.n_x, d.n_x);
        for k in 0..=lay.horizon {
            let s = lay.state(k);
            grad[s] = 2.0 * q[0] * x[s];
            grad[s + 1] = 2.0 * q[1] * x[s + 1];
            hess[(s, s)] = 2.0 * q[0];
            hess[(s + 1, s + 1)] = 2.0 * q[1];
        }

        let mut h = DVector::zeros(d.n_eq);
        let mut jh = DMatrix::zeros(d.n_eq, d.n_x);
        let mut h_theta = DMatrix::zeros(d.n_eq, 3);
        let mut cross = DMatrix::zeros(d.n_x, 3);
        h[0] = x[0] - p[0];
        h[1] = x[1] - p[1];
        jh[(0, 0)] = 1.0;
        jh[(1, 1)] = 1.0;
        h_theta[(0, 0)] = -1.0;
        h_theta[(1, 1)] = -1.0;

        for k in 0..lay.horizon {
            let (xs, u) = self.step_vars(x, k);
            let j = Jet::<4>::seed(&[xs[0], xs[1], u, p[2]]);
            let next = plant([j[0], j[1]], j[2], j[3]);
            let cols = [lay.state(k), lay.state(k) + 1, lay.input(k)];
            let s = lay.state(k + 1);
            for (c, fc) in next.iter().enumerate() {
                let row = 2 + 2 * k + c;
                h[row] = x[s + c] - fc.value;
                jh[(row, s + c)] = 1.0;
                for (a, &col) in cols.iter().enumerate() {
                    jh[(row, col)] -= fc.grad[a];
                }
                h_theta[(row, 2)] = -fc.grad[3];
                let w = nu[row];
                for (a, &ca) in cols.iter().enumerate() {
                    for (b, &cb) in cols.iter().enumerate() {
                        hess[(ca, cb)] -= w * fc.hess[a][b];
                    }
                    cross[(ca, 2)] -= w * fc.hess[a][3];
                }
            }
        }

        let mut jg = DMatrix::zeros(d.n_in, d.n_x);
        for k in 0..lay.horizon {
            jg[(lay.input_bound_row(k), lay.input(k))] = 1.0;
            jg[(lay.input_bound_row(k) + 1, lay.input(k))] = -1.0;
        }
        for k in 0..=lay.horizon {
            jg[(lay.state_bound_row(k), lay.state(k) + 1)] = 1.0;
            jg[(lay.state_bound_row(k) + 1, lay.state(k) + 1)] = -1.0;
        }

        Derivatives {
            values: Values {
                objective: self.objective(x),
                inequalities: self.inequalities(x),
                equalities: h,
            },
            objective_gradient: grad,
            inequality_jacobian: jg,
            equality_jacobian: jh,
            lagrangian_hessian: hess,
            lagrangian_theta_cross: cross,
            inequality_theta_jacobian: DMatrix::zeros(d.n_in, 3),
            equality_theta_jacobian: h_theta,
        }
    }

    /// Open-loop simulation with zero input, `x²` clipped to its bounds.
    fn initial_primal(&self, p: &[f64]) -> Option<DVector<f64>> {
        let lay = self.layout;
        let b = self.cfg.state_bound;
        let mut x = DVector::zeros(lay.n_x());
        let mut s = [p[0], p[1].clamp(-b, b)];
        for k in 0..=lay.horizon {
            x[lay.state(k)] = s[0];
            x[lay.state(k) + 1] = s[1];
            let n = plant(s, 0.0, p[2]);
            s = [n[0], n[1].clamp(-b, b)];
        }
        Some(x)
    }
}

/// One MPC instance family; the current state and `θ` enter as the
/// parameter vector `(x_current, θ)`, see [`mpc_parameter`].
pub fn build_mpc_problem(current_state: [f64; 2], theta: f64, config: &MpcConfig) -> Result<ParametricNlp> {
    config.validate()?;
    let eval = MpcEvaluator {
        cfg: config.clone(),
        layout: MpcLayout {
            horizon: config.horizon,
        },
    };
    ParametricNlp::new("mpc", eval, mpc_parameter(current_state, theta).as_slice())
}

/// Nominal closed loop: states `x_0 … x_T`, applied inputs and the MPC
/// solution at every step.
#[derive(Clone, Debug)]
pub struct ClosedLoopSimulation {
    pub theta: f64,
    pub states: Vec<[f64; 2]>,
    pub inputs: Vec<f64>,
    pub solutions: Vec<PrimalDualPoint>,
    pub traces: Vec<SolveTrace>,
}

/// Closed-loop trajectory with its sensitivities to `θ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopTrajectory {
    pub states: Vec<[f64; 2]>,
    pub inputs: Vec<f64>,
    /// `dx_t/dθ` for `t = 0 … T`.
    pub state_sensitivities: Vec<[f64; 2]>,
    /// `du_t/dθ` for `t = 0 … T−1`.
    pub input_sensitivities: Vec<f64>,
}

impl ClosedLoopTrajectory {
    /// Column `(dx_1, …, dx_T, du_0, …, du_{T−1})` used for comparisons.
    pub fn flattened_sensitivities(&self) -> DMatrix<f64> {
        let mut v: Vec<f64> = self.state_sensitivities[1..].iter().flatten().copied().collect();
        v.extend_from_slice(&self.input_sensitivities);
        DMatrix::from_vec(v.len(), 1, v)
    }
}

/// Shifts a solution one step forward in time, repeating the last block.
fn shift_blocks(v: &DVector<f64>, ranges: &[(usize, usize, usize)]) -> DVector<f64> {
    let mut out = v.clone();
    for &(start, blocks, width) in ranges {
        for b in 0..blocks {
            let src = start + width * (b + 1).min(blocks - 1);
            for i in 0..width {
                out[start + width * b + i] = v[src + i];
            }
        }
    }
    out
}

fn shifted_guess(nlp: &ParametricNlp, prev: &PrimalDualPoint, p: DVector<f64>, lay: MpcLayout) -> Result<PrimalDualPoint> {
    let n = lay.horizon;
    let x = shift_blocks(prev.x(), &[(0, n + 1, 2), (lay.input(0), n, 1)]);
    let lambda = shift_blocks(
        prev.lambda(),
        &[(lay.input_bound_row(0), n, 2), (lay.state_bound_row(0), n + 1, 2)],
    );
    let nu = shift_blocks(prev.nu(), &[(0, n + 1, 2)]);
    PrimalDualPoint::new(nlp, p, x, lambda, nu)
}

/// Runs the closed loop for `config.rollout_length` steps. With `warm`,
/// step `t` starts from `warm[t]`; otherwise from the shifted previous
/// solution (cold start at `t = 0`).
pub fn simulate_closed_loop(
    theta: f64,
    config: &MpcConfig,
    solver_options: &SolverOptions,
    warm: Option<&[PrimalDualPoint]>,
) -> Result<ClosedLoopSimulation> {
    let nlp = build_mpc_problem(config.initial_state, theta, config)?;
    let lay = MpcLayout {
        horizon: config.horizon,
    };
    if let Some(w) = warm {
        if w.len() < config.rollout_length {
            return Err(Error::DimensionMismatch {
                context: "closed-loop warm starts",
                expected: config.rollout_length,
                actual: w.len(),
            });
        }
    }
    let mut sim = ClosedLoopSimulation {
        theta,
        states: vec![config.initial_state],
        inputs: Vec::new(),
        solutions: Vec::new(),
        traces: Vec::new(),
    };
    let mut state = config.initial_state;
    for t in 0..config.rollout_length {
        let p = mpc_parameter(state, theta);
        let guess = match (warm, sim.solutions.last()) {
            (Some(w), _) => Some(w[t].clone()),
            (None, Some(prev)) => Some(shifted_guess(&nlp, prev, p.clone(), lay)?),
            (None, None) => None,
        };
        let (sol, trace) = solve(&nlp, &p, guess.as_ref(), solver_options)?;
        trace.require_converged(Some(t))?;
        let u = sol.x()[lay.input(0)];
        state = plant(state, u, theta);
        sim.inputs.push(u);
        sim.states.push(state);
        sim.solutions.push(sol);
        sim.traces.push(trace);
    }
    Ok(sim)
}

/// Chains per-step MPC sensitivities through the plant:
/// `S_{t+1} = f_x S_t + f_θ + f_u (M_x S_t + M_θ)` with `S_0 = 0`.
/// `ρ = 0` uses least squares, `ρ > 0` the surrogate.
pub fn propagate_sensitivities(
    sim: &ClosedLoopSimulation,
    config: &MpcConfig,
    rho: f64,
    tolerance: f64,
) -> Result<ClosedLoopTrajectory> {
    let nlp = build_mpc_problem(config.initial_state, sim.theta, config)?;
    let iu = MpcLayout {
        horizon: config.horizon,
    }
    .input(0);
    let mut s = [0.0, 0.0];
    let mut traj = ClosedLoopTrajectory {
        states: sim.states.clone(),
        inputs: sim.inputs.clone(),
        state_sensitivities: vec![s],
        input_sensitivities: Vec::new(),
    };
    for (t, sol) in sim.solutions.iter().enumerate() {
        let m = jacobian_for_rho(&nlp, sol, rho, tolerance)?.dx_dtheta;
        let du = m[(iu, 0)] * s[0] + m[(iu, 1)] * s[1] + m[(iu, 2)];
        let x = sim.states[t];
        let j = Jet::<4>::seed(&[x[0], x[1], sim.inputs[t], sim.theta]);
        let f = plant([j[0], j[1]], j[2], j[3]);
        s = std::array::from_fn(|c| f[c].grad[0] * s[0] + f[c].grad[1] * s[1] + f[c].grad[2] * du + f[c].grad[3]);
        traj.input_sensitivities.push(du);
        traj.state_sensitivities.push(s);
    }
    Ok(traj)
}

/// Simulates the nominal loop and propagates its sensitivities.
pub fn closed_loop_rollout(
    theta: f64,
    config: &MpcConfig,
    rho: f64,
    solver_options: &SolverOptions,
    tolerance: f64,
) -> Result<(ClosedLoopSimulation, ClosedLoopTrajectory)> {
    let sim = simulate_closed_loop(theta, config, solver_options, None)?;
    let traj = propagate_sensitivities(&sim, config, rho, tolerance)?;
    Ok((sim, traj))
}

/// Central differences of whole closed-loop rollouts at `θ ± step`, each
/// perturbed step warm-started from the nominal solution of that step.
pub fn closed_loop_finite_difference(
    sim: &ClosedLoopSimulation,
    config: &MpcConfig,
    step: f64,
    solver_options: &SolverOptions,
) -> Result<ClosedLoopTrajectory> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let plus = simulate_closed_loop(sim.theta + step, config, solver_options, Some(&sim.solutions))?;
    let minus = simulate_closed_loop(sim.theta - step, config, solver_options, Some(&sim.solutions))?;
    let diff = |a: f64, b: f64| (a - b) / (2.0 * step);
    Ok(ClosedLoopTrajectory {
        states: sim.states.clone(),
        inputs: sim.inputs.clone(),
        state_sensitivities: plus
            .states
            .iter()
            .zip(&minus.states)
            .map(|(a, b)| [diff(a[0], b[0]), diff(a[1], b[1])])
            .collect(),
        input_sensitivities: plus.inputs.iter().zip(&minus.inputs).map(|(a, b)| diff(*a, *b)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::check_derivatives;

    #[test]
    fn dimensions_and_layout() {
        let cfg = MpcConfig::default();
        let nlp = build_mpc_problem([3.0, 0.0], NOMINAL_MPC_THETA, &cfg).unwrap();
        let d = nlp.dims();
        assert_eq!((d.n_x, d.n_in, d.n_eq, d.n_theta), (62, 82, 42, 3));
        let lay = MpcLayout { horizon: 20 };
        assert_eq!(lay.input(0), 42);
        assert_eq!(lay.state_bound_row(0), 40);
    }

    #[test]
    fn plant_values() {
        let n = plant([1.0, 2.0], 0.5, 0.5);
        assert!((n[0] - 1.8).abs() < 1e-15);
        let expect = 0.56 * 2.0 + 0.1 * 2.0 + 0.2 + 0.5 * (-1.0f64).exp();
        assert!((n[1] - expect).abs() < 1e-15);
        assert_eq!(plant([0.0, 0.0], 0.0, 0.7), [0.0, 0.0]);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cfg = MpcConfig {
            horizon: 4,
            ..Default::default()
        };
        let nlp = build_mpc_problem([1.0, 0.3], 0.5, &cfg).unwrap();
        let x = DVector::from_fn(14, |i, _| 0.8 * ((i as f64) * 1.3).cos());
        check_derivatives(&nlp, &x, &[1.0, 0.3, 0.5]);
    }

    #[test]
    fn shift_repeats_last_block() {
        let v = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 11.0]);
        let s = shift_blocks(&v, &[(0, 3, 2), (6, 2, 1)]);
        assert_eq!(s.as_slice(), &[2.0, 3.0, 4.0, 5.0, 4.0, 5.0, 11.0, 11.0]);
    }

    #[test]
    fn short_closed_loop_regulates_and_matches_fd() {
        let cfg = MpcConfig {
            rollout_length: 8,
            ..Default::default()
        };
        let opts = SolverOptions {
            kkt_tolerance: 1e-12,
            ..Default::default()
        };
        let sim = simulate_closed_loop(NOMINAL_MPC_THETA, &cfg, &opts, None).unwrap();
        assert_eq!(sim.states.len(), 9);
        for s in &sim.states {
            assert!(s[1].abs() <= 2.0 + 1e-8);
        }
        for u in &sim.inputs {
            assert!(u.abs() <= 2.0 + 1e-8);
        }
        let again = simulate_closed_loop(NOMINAL_MPC_THETA, &cfg, &opts, None).unwrap();
        assert_eq!(sim.states, again.states);

        let fd = closed_loop_finite_difference(&sim, &cfg, 1e-6, &opts).unwrap();
        let sur = propagate_sensitivities(&sim, &cfg, 1e-7, 1e-6).unwrap();
        let m = crate::oracle::compare_matrices(&sur.flattened_sensitivities(), &fd.flattened_sensitivities())
            .unwrap();
        assert!(m.relative_error_inf < 0.1, "{m:?}");
        assert_eq!(sur.state_sensitivities[0], [0.0, 0.0]);
    }
}
