//! The policy-gradient family. Every variant reduces to one rule: a scalar
//! coefficient κ_t per visited state multiplying ∇log π(a_t|s_t), averaged
//! over the batch,
//!
//! `g = (1/N) Σ_traces Σ_t κ_t ∇log π(a_t|s_t)`.
//!
//! The variants differ only in κ_t:
//! - vanilla: `G_t`
//! - penalty (penl): `G_t − α·G^C_t`
//! - probabilistic-logic (plpg): `clamp(exp(δ^safe_t))·G_t − α·G^C_t`
//! - counter-example (copt): `(1 − W_t)·G_t − α·G^C_t`
//! - safe policy: `G^C_t` (ascent on expected cost; apply negated to minimize)
//!
//! Coefficients are treated as constants ("stop gradient"): the exact
//! gradient of `(1/N) Σ Σ κ_t log π_θ` with κ frozen, which is what the
//! finite-difference oracle checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Policy, TabularSoftmaxPolicy, TabularValueFn, ValueFn};
use crate::error::{Error, Result};
use crate::trace::Trace;

/// Ratio coefficients `exp(δ^safe)` are clamped to `[0, PLPG_CLAMP_MAX]`.
pub const PLPG_CLAMP_MAX: f64 = 10.0;

/// Max tolerated `‖g − ĝ‖_∞/‖ĝ‖_∞` against central differences.
pub const FD_TOLERANCE: f64 = 1e-4;

/// A computed policy gradient plus the per-timestep coefficients that made
/// it, for diagnostics and the finite-difference oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientReport {
    pub grad: Vec<f64>,
    /// κ_t per trace, aligned with `trace.actions`.
    pub coefficients: Vec<Vec<f64>>,
    pub mean_coefficient: f64,
    /// How many coefficients hit a clamp (only plpg clamps).
    pub clamp_hits: usize,
}

fn check_alignment<S, A>(traces: &[Trace<S, A>], returns: &[Vec<f64>], what: &str) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::precondition("gradient needs at least one trace"));
    }
    if returns.len() != traces.len() {
        return Err(Error::Precondition(format!(
            "{what}: {} return sequences for {} traces",
            returns.len(),
            traces.len()
        )));
    }
    for (i, (tr, g)) in traces.iter().zip(returns).enumerate() {
        if tr.len() == 0 {
            return Err(Error::Precondition(format!("trace {i} has no steps")));
        }
        if g.len() != tr.len() + 1 {
            return Err(Error::Precondition(format!(
                "{what}: trace {i} has {} states but {} return entries",
                tr.len() + 1,
                g.len()
            )));
        }
    }
    Ok(())
}

/// Shared accumulator: fixed-order sum over traces, then timesteps.
fn accumulate<P: Policy>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    coefficients: Vec<Vec<f64>>,
    clamp_hits: usize,
) -> Result<GradientReport> {
    let mut grad = vec![0.0; policy.n_params()];
    let inv_n = 1.0 / traces.len() as f64;
    let mut coeff_sum = 0.0;
    let mut coeff_count = 0usize;
    for (trace, kappa) in traces.iter().zip(&coefficients) {
        for (t, k) in kappa.iter().enumerate() {
            if !k.is_finite() {
                return Err(Error::Precondition(format!("non-finite coefficient {k} at step {t}")));
            }
            policy.add_grad_log_prob(&trace.states[t], &trace.actions[t], k * inv_n, &mut grad);
            coeff_sum += k;
            coeff_count += 1;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::precondition("gradient has non-finite entries"));
    }
    Ok(GradientReport {
        grad,
        coefficients,
        mean_coefficient: coeff_sum / coeff_count as f64,
        clamp_hits,
    })
}

/// κ_t = G_t.
pub fn grad_vanilla<P: Policy>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    returns: &[Vec<f64>],
) -> Result<GradientReport> {
    check_alignment(traces, returns, "returns")?;
    let coefficients = traces
        .iter()
        .zip(returns)
        .map(|(tr, g)| g[..tr.len()].to_vec())
        .collect();
    accumulate(policy, traces, coefficients, 0)
}

/// κ_t = G_t − α·G^C_t.
pub fn grad_penl<P: Policy>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    returns: &[Vec<f64>],
    cost_returns: &[Vec<f64>],
    alpha: f64,
) -> Result<GradientReport> {
    check_alignment(traces, returns, "returns")?;
    check_alignment(traces, cost_returns, "cost returns")?;
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("penalty coefficient must be >= 0, got {alpha}")));
    }
    let coefficients = traces
        .iter()
        .zip(returns.iter().zip(cost_returns))
        .map(|(tr, (g, gc))| (0..tr.len()).map(|t| g[t] - alpha * gc[t]).collect())
        .collect();
    accumulate(policy, traces, coefficients, 0)
}

/// κ_t = clamp(exp(δ^safe_t), 0, clamp_max)·G_t − α·G^C_t, with the
/// undiscounted temporal difference of the backup-policy cost critic
///
/// `δ^safe_t = −c_{t+1} + V̂_C(s_t) − V̂_C(s_{t+1})`.
///
/// Costs are stored nonnegative; the sign flip embeds the negative-cost
/// convention the ratio was derived in. A violating step with agreeing critic
/// values therefore multiplies the reward term by exp(−C), which vanishes for
/// large C.
pub fn grad_plpg<P, V>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    returns: &[Vec<f64>],
    cost_returns: &[Vec<f64>],
    alpha: f64,
    safe_critic: &V,
    clamp_max: f64,
) -> Result<GradientReport>
where
    P: Policy,
    V: ValueFn<Obs = P::Obs>,
{
    check_alignment(traces, returns, "returns")?;
    check_alignment(traces, cost_returns, "cost returns")?;
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("penalty coefficient must be >= 0, got {alpha}")));
    }
    if !(clamp_max > 0.0) {
        return Err(Error::Config(format!("clamp bound must be positive, got {clamp_max}")));
    }
    let mut clamp_hits = 0usize;
    let mut coefficients = Vec::with_capacity(traces.len());
    for (tr, (g, gc)) in traces.iter().zip(returns.iter().zip(cost_returns)) {
        let mut kappa = Vec::with_capacity(tr.len());
        for t in 0..tr.len() {
            let delta = -tr.costs[t + 1] + safe_critic.value(&tr.states[t])
                - safe_critic.value(&tr.states[t + 1]);
            let mut ratio = delta.exp();
            if ratio > clamp_max {
                ratio = clamp_max;
                clamp_hits += 1;
            }
            kappa.push(ratio * g[t] - alpha * gc[t]);
        }
        coefficients.push(kappa);
    }
    accumulate(policy, traces, coefficients, clamp_hits)
}

/// The sigmoid trace-cost weight and its threshold geometry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoptParams {
    /// Sigmoid steepness κ.
    pub kappa: f64,
    /// Look-ahead discount γ.
    pub gamma: f64,
    /// Bounded-safety horizon T.
    pub horizon: usize,
    /// Cost magnitude C.
    pub cost_value: f64,
}

impl CoptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("sigmoid scale must be positive, got {}", self.kappa)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || self.horizon == 0 || !(self.cost_value > 0.0) {
            return Err(Error::config("need γ in (0,1], horizon ≥ 1 and positive cost value"));
        }
        Ok(())
    }

    /// The counter-example threshold γ^{T−1}·C, the sigmoid's midpoint.
    pub fn center(&self) -> f64 {
        self.gamma.powi(self.horizon as i32 - 1) * self.cost_value
    }

    /// w(x) = 1 / (1 + exp(−(x − center)/κ)), strictly increasing, w(center) = 1/2.
    pub fn weight(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-(x - self.center()) / self.kappa).exp())
    }
}

/// Discounted suffix costs `x_t = Σ_{i=t}^{H} γ^{i−t−1}·c_i` (the i = t term
/// carries γ^{−1}), aligned with states.
pub fn suffix_costs(costs: &[f64], gamma: f64) -> Vec<f64> {
    let mut x = vec![0.0; costs.len()];
    let mut acc = 0.0;
    for t in (0..costs.len()).rev() {
        acc = costs[t] / gamma + gamma * acc;
        x[t] = acc;
    }
    x
}

/// κ_t = (1 − W_t)·G_t − α·G^C_t with W_t the sigmoid weight of the
/// discounted cost of the trace suffix from s_t. Suffixes that cross the
/// counter-example threshold have W_t ≥ 1/2, scaling their reward term
/// toward zero; W_t is a constant with respect to the parameters.
pub fn grad_copt<P: Policy>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    returns: &[Vec<f64>],
    cost_returns: &[Vec<f64>],
    alpha: f64,
    params: &CoptParams,
) -> Result<GradientReport> {
    check_alignment(traces, returns, "returns")?;
    check_alignment(traces, cost_returns, "cost returns")?;
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("penalty coefficient must be >= 0, got {alpha}")));
    }
    params.validate()?;
    let coefficients = traces
        .iter()
        .zip(returns.iter().zip(cost_returns))
        .map(|(tr, (g, gc))| {
            let x = suffix_costs(&tr.costs, params.gamma);
            (0..tr.len()).map(|t| (1.0 - params.weight(x[t])) * g[t] - alpha * gc[t]).collect()
        })
        .collect();
    accumulate(policy, traces, coefficients, 0)
}

/// κ_t = G^C_t: the ascent direction of expected cost under the backup
/// policy. Callers minimizing cost must negate (apply with a negative step).
pub fn grad_safe<P: Policy>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    cost_returns: &[Vec<f64>],
) -> Result<GradientReport> {
    check_alignment(traces, cost_returns, "cost returns")?;
    let coefficients = traces
        .iter()
        .zip(cost_returns)
        .map(|(tr, gc)| gc[..tr.len()].to_vec())
        .collect();
    accumulate(policy, traces, coefficients, 0)
}

/// Central finite differences of the frozen-coefficient objective
/// `f(θ) = (1/N) Σ Σ κ_t log π_θ(a_t|s_t)` against the report's gradient.
/// Returns `‖g − ĝ‖_∞ / max(‖ĝ‖_∞, 1e-8)`.
pub fn finite_difference_max_rel_err<P>(
    policy: &P,
    traces: &[Trace<P::Obs, P::Action>],
    report: &GradientReport,
    h: f64,
) -> f64
where
    P: Policy + Clone,
{
    let objective = |p: &P| -> f64 {
        let mut f = 0.0;
        for (trace, kappa) in traces.iter().zip(&report.coefficients) {
            for (t, k) in kappa.iter().enumerate() {
                f += k * p.log_prob(&trace.states[t], &trace.actions[t]);
            }
        }
        f / traces.len() as f64
    };
    let mut probe = policy.clone();
    let base = policy.params();
    let mut fd = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        probe.set_params(&p);
        let up = objective(&probe);
        p[i] -= 2.0 * h;
        probe.set_params(&p);
        let down = objective(&probe);
        fd[i] = (up - down) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    report
        .grad
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (g, f)| m.max((g - f).abs()))
        / scale
}

/// One finite-difference comparison at a random (policy, batch) point.
#[derive(Debug, Clone, Serialize)]
pub struct FdCheck {
    pub op: &'static str,
    pub point: usize,
    pub rel_err: f64,
}

/// Evaluate every update rule against central differences at `n_points`
/// freshly randomized tabular points (policy, traces, returns, critic) and
/// report the relative error of each. Each point exercises all five rules;
/// callers compare against [`FD_TOLERANCE`].
pub fn finite_difference_sweep<R: Rng + ?Sized>(
    n_points: usize,
    rng: &mut R,
) -> Result<Vec<FdCheck>> {
    const FD_STEP: f64 = 1e-5;
    let cost_value = 10.0;
    let mut checks = Vec::with_capacity(5 * n_points);
    for point in 0..n_points {
        let n_obs = rng.gen_range(4..=20);
        let n_actions = rng.gen_range(2..=5);
        let horizon = rng.gen_range(4..=12);
        let n_traces = rng.gen_range(3..=6);
        let policy = TabularSoftmaxPolicy::with_random_init(n_obs, n_actions, 1.0, rng)?;
        let critic = TabularValueFn::with_random_init(n_obs, 1.0, rng);

        let mut traces = Vec::with_capacity(n_traces);
        let mut returns = Vec::with_capacity(n_traces);
        let mut cost_returns = Vec::with_capacity(n_traces);
        for _ in 0..n_traces {
            let states: Vec<usize> = (0..=horizon).map(|_| rng.gen_range(0..n_obs)).collect();
            let actions: Vec<usize> = (0..horizon).map(|_| rng.gen_range(0..n_actions)).collect();
            let rewards: Vec<f64> = std::iter::once(0.0)
                .chain((0..horizon).map(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            let costs: Vec<f64> = (0..=horizon)
                .map(|_| if rng.gen::<f64>() < 0.25 { cost_value } else { 0.0 })
                .collect();
            traces.push(Trace {
                states,
                actions,
                labels: None,
                rewards,
                costs,
                continues: vec![1.0; horizon + 1],
            });
            returns.push((0..=horizon).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>());
            cost_returns.push((0..=horizon).map(|_| rng.gen_range(0.0..2.0)).collect::<Vec<f64>>());
        }

        let copt = CoptParams { kappa: 10.0, gamma: 0.997, horizon: 15, cost_value };
        let reports: [(&'static str, GradientReport); 5] = [
            ("vanilla", grad_vanilla(&policy, &traces, &returns)?),
            ("penl", grad_penl(&policy, &traces, &returns, &cost_returns, 1.0)?),
            (
                "plpg",
                grad_plpg(&policy, &traces, &returns, &cost_returns, 1.0, &critic, PLPG_CLAMP_MAX)?,
            ),
            ("copt", grad_copt(&policy, &traces, &returns, &cost_returns, 1.0, &copt)?),
            ("safe", grad_safe(&policy, &traces, &cost_returns)?),
        ];
        for (op, report) in reports {
            let rel_err = finite_difference_max_rel_err(&policy, &traces, &report, FD_STEP);
            checks.push(FdCheck { op, point, rel_err });
        }
    }
    Ok(checks)
}
