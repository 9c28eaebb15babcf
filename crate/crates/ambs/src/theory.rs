//! Randomized validation suites for the framework's quantitative claims:
//! Monte Carlo coverage of the exact measure, the per-row-KL → measure-gap
//! bound, divergence amplification over time, Pinsker's inequality, and the
//! state-vs-history divergence ordering on tiny POMDPs. The CLI `theory`
//! command and the acceptance tests both run exactly these.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formula::SafetyFormula;
use crate::measure::validate::{
    max_row_kl, mix_pomdp_transition, mix_with_uniform, pinsker_check, random_system,
    random_tiny_pomdp, validate_amplification, validate_belief_marginalisation,
    validate_measure_gap, BeliefPolicy,
};
use crate::measure::{exact_measure, kl_alpha_budget, mc_estimate, MeasureQuery};

/// Coverage suite constants: m certifies (ε = 0.1, δ = 0.05), so the miss
/// probability per estimate is at most δ; the pass line adds three binomial
/// standard errors of a δ-rate over [`COVERAGE_REPS`] repetitions.
pub const COVERAGE_EPS: f64 = 0.1;
pub const COVERAGE_DELTA: f64 = 0.05;
pub const COVERAGE_REPS: usize = 1000;
pub const COVERAGE_PASS_RATE: f64 = 0.07;

/// One checked inequality: `value` must stay within `bound` (direction
/// documented per suite; `pass` records the verdict with its tolerance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryRow {
    pub suite: String,
    pub instance: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl TheoryRow {
    fn leq(suite: &str, instance: String, value: f64, bound: f64) -> Self {
        Self { suite: suite.into(), instance, value, bound, pass: value <= bound + 1e-12 }
    }
}

/// Estimator coverage: on random fully-supported chains, the certified
/// sample count must keep `|μ̃ − μ| > ε` misses near or below δ.
pub fn coverage_suite<R: Rng + ?Sized>(
    n_chains: usize,
    reps: usize,
    rng: &mut R,
) -> Result<Vec<TheoryRow>> {
    let m = crate::measure::sample_size_exact(COVERAGE_EPS, COVERAGE_DELTA)?;
    let mut rows = Vec::with_capacity(n_chains);
    for i in 0..n_chains {
        let n_states = rng.gen_range(4..=10);
        let horizon = rng.gen_range(2..=6);
        let sys = random_system(n_states, rng.gen_range(0.1..0.4), rng);
        let formula = SafetyFormula::parse("!unsafe", sys.atoms())?;
        let q = MeasureQuery { system: &sys, formula: &formula, anchor: 0, horizon };
        let mu = exact_measure(q)?;
        let mut misses = 0usize;
        for _ in 0..reps {
            let q = MeasureQuery { system: &sys, formula: &formula, anchor: 0, horizon };
            if (mc_estimate(q, m, rng)? - mu).abs() > COVERAGE_EPS {
                misses += 1;
            }
        }
        rows.push(TheoryRow::leq(
            "thm1",
            format!("chain{i}/S{n_states}/n{horizon}"),
            misses as f64 / reps as f64,
            COVERAGE_PASS_RATE,
        ));
    }
    Ok(rows)
}

/// Largest uniform-mixing weight whose per-row KL stays within the budget.
fn mixing_weight_for_budget(
    sys: &crate::mdp::FiniteTransitionSystem,
    budget: f64,
) -> Result<f64> {
    let mut beta = 0.25;
    loop {
        let mixed = mix_with_uniform(sys, beta)?;
        if max_row_kl(sys, &mixed)? <= budget {
            return Ok(beta);
        }
        beta /= 2.0;
        if beta < 1e-12 {
            return Ok(0.0);
        }
    }
}

/// Measure gap: perturb a chain within the per-row KL budget for (ε, n) and
/// check `|μ − μ̂| ≤ ε/2` via the exact measures of both chains.
pub fn measure_gap_suite<R: Rng + ?Sized>(
    n_pairs: usize,
    eps: f64,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<TheoryRow>> {
    let budget = kl_alpha_budget(eps, horizon)?;
    let mut rows = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let n_states = rng.gen_range(3..=6);
        let sys = random_system(n_states, rng.gen_range(0.1..0.4), rng);
        let formula = SafetyFormula::parse("!unsafe", sys.atoms())?;
        let beta = mixing_weight_for_budget(&sys, budget)?;
        let sys_hat = mix_with_uniform(&sys, beta)?;
        let check = validate_measure_gap(&sys, &sys_hat, &formula, 0, horizon, eps)?;
        rows.push(TheoryRow::leq(
            "thm2",
            format!("pair{i}/S{n_states}/beta{beta:.4}"),
            check.gap,
            check.bound,
        ));
    }
    Ok(rows)
}

/// Divergence amplification: TV between t-step state distributions grows at
/// most like t·sqrt(α/2) when every row's KL is at most α.
pub fn amplification_suite<R: Rng + ?Sized>(
    n_systems: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::with_capacity(n_systems * t_max);
    for i in 0..n_systems {
        let n_states = rng.gen_range(3..=8);
        let sys = random_system(n_states, rng.gen_range(0.1..0.4), rng);
        let sys_hat = mix_with_uniform(&sys, rng.gen_range(0.01..0.15))?;
        for check in validate_amplification(&sys, &sys_hat, 0, t_max)? {
            rows.push(TheoryRow::leq(
                "lemma",
                format!("sys{i}/t{}", check.t),
                check.tv,
                check.bound,
            ));
        }
    }
    Ok(rows)
}

/// Pinsker: TV(p, q) ≤ sqrt(KL(p‖q)/2) on random full-support pairs.
pub fn pinsker_suite<R: Rng + ?Sized>(n_pairs: usize, rng: &mut R) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let k = rng.gen_range(2..=8);
        let draw = |rng: &mut R| -> Vec<f64> {
            let mut v: Vec<f64> = (0..k).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
            let sum: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= sum);
            v
        };
        let p = draw(rng);
        let q = draw(rng);
        let (tv, bound) = pinsker_check(&p, &q)?;
        rows.push(TheoryRow::leq("pinsker", format!("pair{i}/k{k}"), tv, bound));
    }
    Ok(rows)
}

/// History-vs-state ordering: decoding the model's history distribution into
/// a state marginal through the true filter can only shrink KL and TV
/// against the true system. Two rows per POMDP, one per divergence.
pub fn marginalisation_suite<R: Rng + ?Sized>(
    n_pomdps: usize,
    rng: &mut R,
) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::with_capacity(2 * n_pomdps);
    for i in 0..n_pomdps {
        let n_states = rng.gen_range(2..=4);
        let n_actions = rng.gen_range(1..=3);
        let n_obs = rng.gen_range(2..=3);
        let pomdp = random_tiny_pomdp(n_states, n_actions, n_obs, rng);
        let transition_hat = mix_pomdp_transition(&pomdp, rng.gen_range(0.05..0.3));
        let policy = BeliefPolicy {
            weights: (0..n_actions * n_states).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            n_actions,
        };
        let horizon = rng.gen_range(2..=4);
        let check = validate_belief_marginalisation(&pomdp, &transition_hat, &policy, horizon)?;
        let tag = format!("pomdp{i}/S{n_states}A{n_actions}Z{n_obs}h{horizon}");
        rows.push(TheoryRow::leq("thm3", format!("{tag}/kl"), check.state_kl, check.belief_kl));
        rows.push(TheoryRow::leq("thm3", format!("{tag}/tv"), check.state_tv, check.belief_tv));
    }
    Ok(rows)
}

/// Every suite at its acceptance-gate size. Under ten minutes on one core.
pub fn run_all<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<TheoryRow>> {
    let mut rows = coverage_suite(5, COVERAGE_REPS, rng)?;
    rows.extend(measure_gap_suite(100, 0.2, 4, rng)?);
    rows.extend(amplification_suite(100, 8, rng)?);
    rows.extend(pinsker_suite(100, rng)?);
    rows.extend(marginalisation_suite(100, rng)?);
    Ok(rows)
}
