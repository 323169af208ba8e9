//! First-order optimization of split positions.
//!
//! ADAM with bias correction drives the flattened split vector downhill
//! on the program's optimal value; every iterate is projected back to a
//! feasible configuration (sorted blocks with a minimal separation). The
//! warm-start pipeline evaluates a recorded low-degree parameter path at
//! a higher relaxation degree, and a capped grid search supplies the
//! coarse global-optimum reference line.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SplitConfig, SystemSpec};
use crate::paramdiff::{
    gradient_analytic, gradient_fd, value_at, DzSolver, FdConfig, GradientDiagnostics,
};

/// Gradient backend for the descent loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMethod {
    Qr,
    Lsqr,
    Fd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// ADAM step size.
    pub step_size: f64,
    /// First-moment decay rate.
    pub beta1: f64,
    /// Second-moment decay rate.
    pub beta2: f64,
    pub eps_adam: f64,
    pub max_iters: usize,
    /// Minimal separation between adjacent splits and to the domain
    /// boundary, as a fraction of the axis length. Zero readmits
    /// coincident splits.
    pub min_gap_frac: f64,
    pub grad_method: GradMethod,
    pub solver_tol: f64,
    pub fd: FdConfig,
    /// Maximum LSQR iterations when `grad_method` is `Lsqr`.
    pub lsqr_maxiter: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 0.05,
            beta1: 0.8,
            beta2: 0.9,
            eps_adam: 1e-8,
            max_iters: 100,
            min_gap_frac: 1e-3,
            grad_method: GradMethod::Qr,
            solver_tol: 1e-9,
            fd: FdConfig::default(),
            lsqr_maxiter: 1000,
        }
    }
}

/// ADAM moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u32,
}

impl AdamState {
    pub fn new(dim: usize) -> AdamState {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update followed by the feasibility
/// projection.
pub fn adam_step(
    sys: &SystemSpec,
    template: &SplitConfig,
    theta: &[f64],
    state: &mut AdamState,
    gradient: &[f64],
    config: &OptimizerConfig,
) -> Vec<f64> {
    assert_eq!(theta.len(), gradient.len());
    assert!(gradient.iter().all(|g| g.is_finite()));
    state.step += 1;
    let t = state.step as i32;
    let mut out = theta.to_vec();
    for k in 0..theta.len() {
        state.m[k] = config.beta1 * state.m[k] + (1.0 - config.beta1) * gradient[k];
        state.v[k] = config.beta2 * state.v[k] + (1.0 - config.beta2) * gradient[k] * gradient[k];
        let m_hat = state.m[k] / (1.0 - config.beta1.powi(t));
        let v_hat = state.v[k] / (1.0 - config.beta2.powi(t));
        out[k] -= config.step_size * m_hat / (v_hat.sqrt() + config.eps_adam);
    }
    project_feasible(sys, template, &mut out, config.min_gap_frac);
    out
}

/// Clamps each block back to sorted order with the configured minimal
/// separation, strictly inside its interval.
pub fn project_feasible(
    sys: &SystemSpec,
    template: &SplitConfig,
    theta: &mut [f64],
    min_gap_frac: f64,
) {
    let mut pos = 0;
    let clamp_block = |theta: &mut [f64], pos: usize, len: usize, lo: f64, hi: f64| {
        let gap = min_gap_frac * (hi - lo);
        let mut prev = lo;
        for i in 0..len {
            let remaining = (len - 1 - i) as f64;
            let upper = hi - gap * (remaining + 1.0);
            let v = theta[pos + i].clamp(prev + gap, upper.max(prev + gap));
            theta[pos + i] = v;
            prev = v;
        }
    };
    clamp_block(
        theta,
        pos,
        template.time_splits.len(),
        0.0,
        sys.t_final,
    );
    pos += template.time_splits.len();
    for (axis, splits) in template.axis_splits.iter().enumerate() {
        let (lo, hi) = sys.x_box[axis];
        clamp_block(theta, pos, splits.len(), lo, hi);
        pos += splits.len();
    }
}

/// Record of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Flattened split vector at every accepted iterate, starting with
    /// the initial guess.
    pub theta_path: Vec<Vec<f64>>,
    /// Optimal value at each iterate.
    pub values: Vec<f64>,
    /// Gradient at each iterate (absent on the final entry and wherever
    /// the step was skipped).
    pub gradients: Vec<Option<Vec<f64>>>,
    /// Wall time per iteration in seconds.
    pub iter_seconds: Vec<f64>,
    pub diagnostics: Vec<Option<GradientDiagnostics>>,
    /// Index of the best value along the path.
    pub best_index: usize,
    pub best_theta: Vec<f64>,
    pub best_value: f64,
}

impl OptimizationTrace {
    /// CSV rows `iteration,value,theta_0..theta_{n-1}` with full float
    /// precision.
    pub fn to_csv(&self) -> String {
        let dim = self.theta_path.first().map(Vec::len).unwrap_or(0);
        let mut out = String::from("iteration,value");
        for k in 0..dim {
            out.push_str(&format!(",theta_{k}"));
        }
        out.push('\n');
        for (i, (theta, value)) in self.theta_path.iter().zip(&self.values).enumerate() {
            out.push_str(&format!("{i},{}", fmt_float(*value)));
            for v in theta {
                out.push(',');
                out.push_str(&fmt_float(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// 17 significant digits: enough to reproduce the exact double.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn evaluate_gradient(
    sys: &SystemSpec,
    template: &SplitConfig,
    theta: &[f64],
    degree: u32,
    config: &OptimizerConfig,
) -> Result<(f64, Vec<f64>, Option<GradientDiagnostics>)> {
    match config.grad_method {
        GradMethod::Qr => {
            let (grad, diag) = gradient_analytic(
                sys,
                template,
                theta,
                degree,
                &config.fd,
                DzSolver::Qr,
                config.solver_tol,
            )?;
            Ok((diag.objective, grad, Some(diag)))
        }
        GradMethod::Lsqr => {
            let (grad, diag) = gradient_analytic(
                sys,
                template,
                theta,
                degree,
                &config.fd,
                DzSolver::Lsqr {
                    maxiter: config.lsqr_maxiter,
                    atol: 1e-12,
                },
                config.solver_tol,
            )?;
            Ok((diag.objective, grad, Some(diag)))
        }
        GradMethod::Fd => {
            let (value, _, _) = value_at(sys, template, theta, degree, config.solver_tol)?;
            let grad = gradient_fd(
                sys,
                template,
                theta,
                degree,
                config.fd.eps_f,
                config.solver_tol,
            )?;
            Ok((value, grad, None))
        }
    }
}

/// Runs the descent from `theta0`, recording every iterate and the
/// best value seen. A failed solve skips the step and retries from the
/// last good iterate with a halved trust factor; three consecutive
/// failures abort.
pub fn optimize(
    sys: &SystemSpec,
    template: &SplitConfig,
    theta0: &[f64],
    degree: u32,
    config: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    let mut trace = OptimizationTrace {
        theta_path: Vec::with_capacity(config.max_iters + 1),
        values: Vec::with_capacity(config.max_iters + 1),
        gradients: Vec::with_capacity(config.max_iters + 1),
        iter_seconds: Vec::with_capacity(config.max_iters + 1),
        diagnostics: Vec::with_capacity(config.max_iters + 1),
        best_index: 0,
        best_theta: theta0.to_vec(),
        best_value: f64::INFINITY,
    };
    let mut state = AdamState::new(theta0.len());
    let mut theta = theta0.to_vec();
    let mut trust = 1.0f64;
    let mut consecutive_failures = 0u32;

    let mut iter = 0;
    while iter <= config.max_iters {
        let t0 = std::time::Instant::now();
        match evaluate_gradient(sys, template, &theta, degree, config) {
            Ok((value, grad, diag)) => {
                consecutive_failures = 0;
                trace.theta_path.push(theta.clone());
                trace.values.push(value);
                trace.iter_seconds.push(t0.elapsed().as_secs_f64());
                if value < trace.best_value {
                    trace.best_value = value;
                    trace.best_index = trace.values.len() - 1;
                    trace.best_theta = theta.clone();
                }
                if iter == config.max_iters {
                    trace.gradients.push(None);
                    trace.diagnostics.push(diag);
                    break;
                }
                let mut scaled = grad.clone();
                for g in &mut scaled {
                    *g *= trust;
                }
                let next = adam_step(sys, template, &theta, &mut state, &scaled, config);
                trace.gradients.push(Some(grad));
                trace.diagnostics.push(diag);
                theta = next;
                trust = (trust * 2.0).min(1.0);
            }
            Err(e) => {
                consecutive_failures += 1;
                if consecutive_failures >= 3 || trace.theta_path.is_empty() {
                    return Err(Error::OptimizationAborted(format!(
                        "{consecutive_failures} consecutive solve failures; last: {e}"
                    )));
                }
                // retry from the last good iterate with a smaller step
                trust *= 0.5;
                let last_good = trace.theta_path.last().unwrap().clone();
                let last_grad = trace
                    .gradients
                    .iter()
                    .rev()
                    .flatten()
                    .next()
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; theta.len()]);
                let mut scaled = last_grad;
                for g in &mut scaled {
                    *g *= trust;
                }
                let mut retry_state = state.clone();
                theta = adam_step(sys, template, &last_good, &mut retry_state, &scaled, config);
                continue;
            }
        }
        iter += 1;
    }
    Ok(trace)
}

/// Solves the program at `degree` along a recorded parameter path; no
/// gradients. Failed entries are reported as missing.
pub fn evaluate_along_path(
    sys: &SystemSpec,
    template: &SplitConfig,
    path: &[Vec<f64>],
    degree: u32,
    tol: f64,
) -> Vec<Option<f64>> {
    path.par_iter()
        .map(|theta| value_at(sys, template, theta, degree, tol).ok().map(|(v, _, _)| v))
        .collect()
}

/// Per-block candidate positions for [`grid_search`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    /// Candidate positions for interior time splits.
    pub time_candidates: Vec<f64>,
    /// Candidate positions per state axis.
    pub axis_candidates: Vec<Vec<f64>>,
    /// Hard cap on the number of evaluated configurations.
    pub cap: usize,
}

impl GridSpec {
    pub fn default_cap() -> usize {
        2000
    }
}

fn sorted_combinations(candidates: &[f64], take: usize) -> Vec<Vec<f64>> {
    if take == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..take).collect();
    if take > candidates.len() {
        return out;
    }
    loop {
        out.push(idx.iter().map(|&i| candidates[i]).collect());
        // next combination
        let mut i = take;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + candidates.len() - take {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..take {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exhaustive evaluation over a grid of split configurations. Returns
/// the best parameter vector and the full table of `(theta, value)`
/// results (failed solves as missing).
pub fn grid_search(
    sys: &SystemSpec,
    template: &SplitConfig,
    degree: u32,
    spec: &GridSpec,
    tol: f64,
) -> Result<(Vec<f64>, Vec<(Vec<f64>, Option<f64>)>)> {
    let mut block_choices: Vec<Vec<Vec<f64>>> = Vec::new();
    block_choices.push(sorted_combinations(
        &spec.time_candidates,
        template.time_splits.len(),
    ));
    for (axis, splits) in template.axis_splits.iter().enumerate() {
        let cands = spec
            .axis_candidates
            .get(axis)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        block_choices.push(sorted_combinations(cands, splits.len()));
    }
    let total: usize = block_choices.iter().map(Vec::len).product();
    if total == 0 {
        return Err(Error::InvalidConfig(
            "grid has no admissible configuration for some block".into(),
        ));
    }
    if total > spec.cap {
        return Err(Error::GridTooLarge(total, spec.cap));
    }

    let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut indices = vec![0usize; block_choices.len()];
    'outer: loop {
        let mut theta = Vec::new();
        for (b, choice) in block_choices.iter().enumerate() {
            theta.extend_from_slice(&choice[indices[b]]);
        }
        thetas.push(theta);
        for b in (0..block_choices.len()).rev() {
            indices[b] += 1;
            if indices[b] < block_choices[b].len() {
                continue 'outer;
            }
            indices[b] = 0;
            if b == 0 {
                break 'outer;
            }
        }
    }

    let table: Vec<(Vec<f64>, Option<f64>)> = thetas
        .into_par_iter()
        .map(|theta| {
            let value = value_at(sys, template, &theta, degree, tol)
                .ok()
                .map(|(v, _, _)| v);
            (theta, value)
        })
        .collect();

    let best = table
        .iter()
        .filter_map(|(t, v)| v.map(|v| (t, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::OptimizationAborted("every grid point failed to solve".into()))?;
    Ok((best.0.clone(), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SystemSpec;

    fn config_with(iters: usize) -> OptimizerConfig {
        OptimizerConfig {
            max_iters: iters,
            solver_tol: 1e-8,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let sys = SystemSpec::double_integrator();
        let template = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.1], vec![-0.3]],
        };
        let theta = template.flatten();
        let mut state = AdamState::new(2);
        let config = OptimizerConfig::default();
        let grad = vec![0.2, -0.05];
        let next = adam_step(&sys, &template, &theta, &mut state, &grad, &config);
        // bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
        for k in 0..2 {
            let expect = theta[k]
                - config.step_size * grad[k] / (grad[k].abs() + config.eps_adam * 1e-0);
            assert!(
                (next[k] - expect).abs() < 1e-6,
                "step {k}: {} vs {}",
                next[k],
                expect
            );
        }
    }

    #[test]
    fn zero_gradient_keeps_theta() {
        let sys = SystemSpec::double_integrator();
        let template = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.1], vec![]],
        };
        let theta = template.flatten();
        let mut state = AdamState::new(1);
        let next = adam_step(
            &sys,
            &template,
            &theta,
            &mut state,
            &[0.0],
            &OptimizerConfig::default(),
        );
        assert_eq!(next, theta);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn projection_enforces_order_and_gap() {
        let sys = SystemSpec::double_integrator();
        let template = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.0, 0.1], vec![]],
        };
        // an update pushing the second split past the first
        let mut theta = vec![0.3, 0.1];
        project_feasible(&sys, &template, &mut theta, 1e-3);
        let gap = 1e-3 * 1.4;
        assert!(theta[1] >= theta[0] + gap * 0.999);
        assert!(theta[0] > -0.7 && theta[1] < 0.7);

        // min_gap 0 readmits coincident splits
        let mut theta = vec![0.3, 0.1];
        project_feasible(&sys, &template, &mut theta, 0.0);
        assert!(theta[1] >= theta[0]);
    }

    #[test]
    fn zero_iter_trace_contains_initial_point_only() {
        let sys = SystemSpec::double_integrator();
        let template = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.1], vec![]],
        };
        let theta = template.flatten();
        let trace = optimize(&sys, &template, &theta, 4, &config_with(0)).unwrap();
        assert_eq!(trace.theta_path.len(), 1);
        assert_eq!(trace.values.len(), 1);
        assert_eq!(trace.best_index, 0);
        assert_eq!(trace.theta_path[0], theta);
    }

    #[test]
    fn grid_search_scalar_argmin() {
        let sys = SystemSpec::double_integrator();
        let template = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.0], vec![]],
        };
        let spec = GridSpec {
            time_candidates: vec![],
            axis_candidates: vec![vec![-0.4, 0.0, 0.4], vec![]],
            cap: 10,
        };
        let (best, table) = grid_search(&sys, &template, 4, &spec, 1e-8).unwrap();
        assert_eq!(table.len(), 3);
        let best_val = table
            .iter()
            .find(|(t, _)| t == &best)
            .and_then(|(_, v)| *v)
            .unwrap();
        for (_, v) in &table {
            assert!(best_val <= v.unwrap() + 1e-12);
        }
    }

    #[test]
    fn grid_cap_enforced() {
        let sys = SystemSpec::double_integrator();
        let template = SplitConfig {
            time_splits: vec![],
            axis_splits: vec![vec![0.0, 0.1], vec![0.0]],
        };
        let spec = GridSpec {
            time_candidates: vec![],
            axis_candidates: vec![vec![-0.4, -0.2, 0.0, 0.2, 0.4], vec![-0.4, 0.0, 0.4]],
            cap: 5,
        };
        assert!(matches!(
            grid_search(&sys, &template, 4, &spec, 1e-8),
            Err(Error::GridTooLarge(30, 5))
        ));
    }

    #[test]
    fn csv_round_trips_floats_exactly() {
        let trace = OptimizationTrace {
            theta_path: vec![vec![0.1234567890123456, -0.9]],
            values: vec![2.718281828459045],
            gradients: vec![None],
            iter_seconds: vec![0.0],
            diagnostics: vec![None],
            best_index: 0,
            best_theta: vec![0.1234567890123456, -0.9],
            best_value: 2.718281828459045,
        };
        let csv = trace.to_csv();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "0");
        assert_eq!(fields[1].parse::<f64>().unwrap(), 2.718281828459045);
        assert_eq!(fields[2].parse::<f64>().unwrap(), 0.1234567890123456);
    }
}
