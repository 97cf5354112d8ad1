use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sqp::SolverOptions;
use crate::model::{Derivatives, Dims, Jet, NlpEvaluator, ParametricNlp, Scalar, Values};

/// Minimum-time steering of a kinematic car with free final time.
///
/// Time is normalized to `[0, 1]` and the horizon length becomes the
/// dilation `σ`, so the objective is just `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarProblemConfig {
    pub n_nodes: usize,
    /// Throttle-bound scale; also the probe parameter.
    pub theta: f64,
    pub initial_state: [f64; 5],
    pub terminal_position: [f64; 2],
    pub terminal_velocity: [f64; 2],
    /// Throttle bound is `throttle_scale · θ`.
    pub throttle_scale: f64,
    pub steering_bound: f64,
    pub sigma_min: f64,
    /// Also pin the initial heading to `initial_state[4]`.
    pub fix_initial_heading: bool,
    /// Dilation used by the cold-start initializer.
    pub initial_sigma: f64,
}

impl Default for CarProblemConfig {
    fn default() -> Self {
        CarProblemConfig {
            n_nodes: 150,
            theta: 1.0,
            initial_state: [0.0; 5],
            terminal_position: [0.5, 0.25],
            terminal_velocity: [0.0, 0.0],
            throttle_scale: 0.75,
            steering_bound: 0.25,
            sigma_min: 1e-2,
            fix_initial_heading: false,
            initial_sigma: 5.0,
        }
    }
}

impl CarProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config(format!("car n_nodes must be >= 2, got {}", self.n_nodes)));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config(format!("car sigma_min must be positive, got {}", self.sigma_min)));
        }
        if !(self.theta > 0.0 && self.throttle_scale > 0.0 && self.steering_bound > 0.0) {
            return Err(Error::Config("car input bounds must be positive".into()));
        }
        if !(self.initial_sigma > self.sigma_min) {
            return Err(Error::Config("car initial_sigma must exceed sigma_min".into()));
        }
        Ok(())
    }

    fn boundary_count(&self) -> usize {
        if self.fix_initial_heading {
            9
        } else {
            8
        }
    }
}

/// `ẋ = (ṗx, ṗy, a cos ϑ, a sin ϑ, s (ṗx cos ϑ + ṗy sin ϑ))`.
fn car_ode<S: Scalar>(x: &[S; 5], u: &[S; 2]) -> [S; 5] {
    let (c, s) = (x[4].cos(), x[4].sin());
    [x[2], x[3], u[0] * c, u[0] * s, u[1] * (x[2] * c + x[3] * s)]
}

pub(crate) fn rk4_generic<S: Scalar>(x: &[S; 5], u: &[S; 2], sigma: S, dt: f64) -> [S; 5] {
    let shifted = |k: &[S; 5], h: f64| -> [S; 5] { std::array::from_fn(|i| x[i] + k[i] * h) };
    let scaled = |k: [S; 5]| -> [S; 5] { k.map(|v| v * sigma) };
    let k1 = scaled(car_ode(x, u));
    let k2 = scaled(car_ode(&shifted(&k1, 0.5 * dt), u));
    let k3 = scaled(car_ode(&shifted(&k2, 0.5 * dt), u));
    let k4 = scaled(car_ode(&shifted(&k3, dt), u));
    std::array::from_fn(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
}

/// One classical RK4 step of `ẋ = σ f(x, u)` with the input held constant.
pub fn rk4_dilated_step(state: &[f64; 5], input: &[f64; 2], sigma: f64, dt: f64) -> [f64; 5] {
    rk4_generic(state, input, sigma, dt)
}

/// Decision vector `(x₀ … x_{N+1}, u₀ … u_N, σ)`.
#[derive(Clone, Copy, Debug)]
struct Layout {
    n: usize,
}

impl Layout {
    fn state(&self, t: usize) -> usize {
        5 * t
    }
    fn input(&self, t: usize) -> usize {
        5 * (self.n + 2) + 2 * t
    }
    fn sigma(&self) -> usize {
        5 * (self.n + 2) + 2 * (self.n + 1)
    }
    fn n_x(&self) -> usize {
        self.sigma() + 1
    }
    fn dt(&self) -> f64 {
        1.0 / (self.n + 1) as f64
    }
    /// Variables `(x_t, u_t, σ)` entering dynamics block `t`.
    fn block(&self, t: usize) -> [usize; 8] {
        let (s, i) = (self.state(t), self.input(t));
        [s, s + 1, s + 2, s + 3, s + 4, i, i + 1, self.sigma()]
    }
}

struct CarEvaluator {
    cfg: CarProblemConfig,
    layout: Layout,
}

impl CarEvaluator {
    fn n_dyn(&self) -> usize {
        5 * (self.cfg.n_nodes + 1)
    }

    fn boundary_values(&self, x: &[f64]) -> Vec<f64> {
        let c = &self.cfg;
        let first = self.layout.state(0);
        let last = self.layout.state(c.n_nodes + 1);
        let pinned = if c.fix_initial_heading { 5 } else { 4 };
        let mut out: Vec<f64> = (0..pinned).map(|i| x[first + i] - c.initial_state[i]).collect();
        out.push(x[last] - c.terminal_position[0]);
        out.push(x[last + 1] - c.terminal_position[1]);
        out.push(x[last + 2] - c.terminal_velocity[0]);
        out.push(x[last + 3] - c.terminal_velocity[1]);
        out
    }

    fn boundary_columns(&self) -> Vec<usize> {
        let c = &self.cfg;
        let first = self.layout.state(0);
        let last = self.layout.state(c.n_nodes + 1);
        let pinned = if c.fix_initial_heading { 5 } else { 4 };
        let mut cols: Vec<usize> = (0..pinned).map(|i| first + i).collect();
        cols.extend([last, last + 1, last + 2, last + 3]);
        cols
    }

    fn inequality_values(&self, x: &[f64], theta: f64) -> DVector<f64> {
        let c = &self.cfg;
        let mut g = DVector::zeros(4 * (c.n_nodes + 1) + 1);
        let throttle = c.throttle_scale * theta;
        for t in 0..=c.n_nodes {
            let i = self.layout.input(t);
            g[4 * t] = x[i] - throttle;
            g[4 * t + 1] = -x[i] - throttle;
            g[4 * t + 2] = x[i + 1] - c.steering_bound;
            g[4 * t + 3] = -x[i + 1] - c.steering_bound;
        }
        g[4 * (c.n_nodes + 1)] = c.sigma_min - x[self.layout.sigma()];
        g
    }

    fn block_values(&self, x: &[f64], t: usize) -> [f64; 5] {
        let b = self.layout.block(t);
        let xs = std::array::from_fn(|i| x[b[i]]);
        rk4_generic(&xs, &[x[b[5]], x[b[6]]], x[b[7]], self.layout.dt())
    }
}

impl NlpEvaluator for CarEvaluator {
    fn dims(&self) -> Dims {
        Dims {
            n_x: self.layout.n_x(),
            n_in: 4 * (self.cfg.n_nodes + 1) + 1,
            n_eq: self.n_dyn() + self.cfg.boundary_count(),
            n_theta: 1,
        }
    }

    fn values(&self, x: &[f64], theta: &[f64]) -> Values {
        let d = self.dims();
        let mut h = DVector::zeros(d.n_eq);
        for t in 0..=self.cfg.n_nodes {
            let next = self.block_values(x, t);
            let s = self.layout.state(t + 1);
            for c in 0..5 {
                h[5 * t + c] = x[s + c] - next[c];
            }
        }
        for (k, v) in self.boundary_values(x).into_iter().enumerate() {
            h[self.n_dyn() + k] = v;
        }
        Values {
            objective: x[self.layout.sigma()],
            inequalities: self.inequality_values(x, theta[0]),
            equalities: h,
        }
    }

    fn derivatives(&self, x: &[f64], theta: &[f64], _lambda: &[f64], nu: &[f64]) -> Derivatives {
        let d = self.dims();
        let lay = self.layout;
        let mut h = DVector::zeros(d.n_eq);
        let mut jh = DMatrix::zeros(d.n_eq, d.n_x);
        let mut hess = DMatrix::zeros(d.n_x, d.n_x);

        for t in 0..=self.cfg.n_nodes {
            let b = lay.block(t);
            let z: [f64; 8] = std::array::from_fn(|i| x[b[i]]);
            let j = Jet::<8>::seed(&z);
            let xs = [j[0], j[1], j[2], j[3], j[4]];
            let next = rk4_generic(&xs, &[j[5], j[6]], j[7], lay.dt());
            let s = lay.state(t + 1);
            for (c, fc) in next.iter().enumerate() {
                let row = 5 * t + c;
                h[row] = x[s + c] - fc.value;
                jh[(row, s + c)] += 1.0;
                for (k, &col) in b.iter().enumerate() {
                    jh[(row, col)] -= fc.grad[k];
                }
                let w = nu[row];
                if w != 0.0 {
                    for (p, &cp) in b.iter().enumerate() {
                        for (q, &cq) in b.iter().enumerate() {
                            hess[(cp, cq)] -= w * fc.hess[p][q];
                        }
                    }
                }
            }
        }
        let bv = self.boundary_values(x);
        for (k, (v, col)) in bv.into_iter().zip(self.boundary_columns()).enumerate() {
            h[self.n_dyn() + k] = v;
            jh[(self.n_dyn() + k, col)] = 1.0;
        }

        let mut jg = DMatrix::zeros(d.n_in, d.n_x);
        let mut g_theta = DMatrix::zeros(d.n_in, 1);
        for t in 0..=self.cfg.n_nodes {
            let i = lay.input(t);
            jg[(4 * t, i)] = 1.0;
            jg[(4 * t + 1, i)] = -1.0;
            jg[(4 * t + 2, i + 1)] = 1.0;
            jg[(4 * t + 3, i + 1)] = -1.0;
            g_theta[(4 * t, 0)] = -self.cfg.throttle_scale;
            g_theta[(4 * t + 1, 0)] = -self.cfg.throttle_scale;
        }
        jg[(4 * (self.cfg.n_nodes + 1), lay.sigma())] = -1.0;

        let mut grad_f = DVector::zeros(d.n_x);
        grad_f[lay.sigma()] = 1.0;

        Derivatives {
            values: Values {
                objective: x[lay.sigma()],
                inequalities: self.inequality_values(x, theta[0]),
                equalities: h,
            },
            objective_gradient: grad_f,
            inequality_jacobian: jg,
            equality_jacobian: jh,
            lagrangian_hessian: hess,
            lagrangian_theta_cross: DMatrix::zeros(d.n_x, 1),
            inequality_theta_jacobian: g_theta,
            equality_theta_jacobian: DMatrix::zeros(d.n_eq, 1),
        }
    }

    /// Smoothstep run toward the target at the initializer dilation, along
    /// the initial heading when that is pinned. It is dynamically consistent
    /// up to the RK4 error, so the first linearization is controllable.
    fn initial_primal(&self, _theta: &[f64]) -> Option<DVector<f64>> {
        let c = &self.cfg;
        let lay = self.layout;
        let sigma = c.initial_sigma;
        let offset = [
            c.terminal_position[0] - c.initial_state[0],
            c.terminal_position[1] - c.initial_state[1],
        ];
        let heading = if c.fix_initial_heading {
            c.initial_state[4]
        } else {
            offset[1].atan2(offset[0])
        };
        let dir = [heading.cos(), heading.sin()];
        let dist = offset[0].hypot(offset[1]);
        let mut x = DVector::zeros(lay.n_x());
        for t in 0..=c.n_nodes + 1 {
            let s = t as f64 * lay.dt();
            let o = lay.state(t);
            let pos = dist * s * s * (3.0 - 2.0 * s);
            let vel = dist * 6.0 * s * (1.0 - s) / sigma;
            for i in 0..2 {
                x[o + i] = c.initial_state[i] + pos * dir[i];
                x[o + 2 + i] = c.initial_state[2 + i] + vel * dir[i];
            }
            x[o + 4] = heading;
        }
        let bound = c.throttle_scale * c.theta;
        for t in 0..=c.n_nodes {
            let s = (t as f64 + 0.5) * lay.dt();
            x[lay.input(t)] = (dist * (6.0 - 12.0 * s) / (sigma * sigma)).clamp(-bound, bound);
        }
        x[lay.sigma()] = sigma;
        Some(x)
    }
}

/// Solver settings for the car. The minimizer is not unique, so warm-started
/// re-solves need proximal damping to stay next to the nominal point.
pub fn car_solver_options() -> SolverOptions {
    SolverOptions {
        proximal_damping: 1.0,
        ..SolverOptions::default()
    }
}

pub fn build_car_problem(config: &CarProblemConfig) -> Result<ParametricNlp> {
    config.validate()?;
    let eval = CarEvaluator {
        cfg: config.clone(),
        layout: Layout { n: config.n_nodes },
    };
    ParametricNlp::new("car", eval, &[config.theta])
}

/// States `x₀ … x_{N+1}`, inputs `u₀ … u_N` and `σ` unpacked from a decision vector.
pub fn car_state_trajectory(
    config: &CarProblemConfig,
    x: &DVector<f64>,
) -> (Vec<[f64; 5]>, Vec<[f64; 2]>, f64) {
    let lay = Layout { n: config.n_nodes };
    let states = (0..=config.n_nodes + 1)
        .map(|t| std::array::from_fn(|i| x[lay.state(t) + i]))
        .collect();
    let inputs = (0..=config.n_nodes)
        .map(|t| [x[lay.input(t)], x[lay.input(t) + 1]])
        .collect();
    (states, inputs, x[lay.sigma()])
}
