//! Statistical validators: each checks one inequality from the error
//! analysis on concrete finite instances, returning both sides so callers
//! (tests, the `theory` CLI) can assert and report.

use rand::Rng;

use crate::error::{Error, Result};
use crate::formula::{Atoms, LabelSet, SafetyFormula};
use crate::mdp::{validate_distribution, FiniteTransitionSystem};
use crate::measure::{exact_measure, kl_alpha_budget, kl_divergence, tv_distance, MeasureQuery};

/// Random full-support labelled chain over the atom `unsafe`. State 0 is
/// always safe so it can serve as a non-degenerate anchor; every other state
/// is unsafe independently with probability `unsafe_prob`.
pub fn random_system<R: Rng + ?Sized>(
    n_states: usize,
    unsafe_prob: f64,
    rng: &mut R,
) -> FiniteTransitionSystem {
    assert!(n_states >= 2, "need at least two states");
    let atoms = Atoms::new(&["unsafe"]).unwrap();
    let mut kernel = vec![0.0; n_states * n_states];
    for s in 0..n_states {
        let row = &mut kernel[s * n_states..(s + 1) * n_states];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // Exponential weights give a dispersed but strictly positive row.
            *v = -(rng.gen::<f64>().max(1e-12)).ln();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let labels: Vec<LabelSet> = (0..n_states)
        .map(|s| {
            if s > 0 && rng.gen::<f64>() < unsafe_prob {
                LabelSet::from_ids(&[0])
            } else {
                LabelSet::EMPTY
            }
        })
        .collect();
    FiniteTransitionSystem::new(n_states, kernel, atoms, labels).unwrap()
}

/// The perturbation family used throughout: mix every row with the uniform
/// distribution, `T̂(·|s) = (1-β) T(·|s) + β u`. Keeps rows strictly positive,
/// so `KL(T ‖ T̂)` stays finite.
pub fn mix_with_uniform(sys: &FiniteTransitionSystem, beta: f64) -> Result<FiniteTransitionSystem> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("mixing weight must be in [0, 1], got {beta}")));
    }
    let ns = sys.n_states();
    let u = 1.0 / ns as f64;
    let mut kernel = Vec::with_capacity(ns * ns);
    for s in 0..ns {
        for &p in sys.row(s) {
            kernel.push((1.0 - beta) * p + beta * u);
        }
    }
    sys.with_kernel(kernel)
}

/// Closed-form row KL against the uniform mixture of the same row:
/// `Σ_j p_j ln(p_j / ((1-β) p_j + β/n))`. Independent of the generic KL
/// routine except for sharing the definition of `ln`.
pub fn mixture_row_kl(row: &[f64], beta: f64) -> f64 {
    let u = 1.0 / row.len() as f64;
    row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p / ((1.0 - beta) * p + beta * u)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Largest per-row `KL(T(·|s) ‖ T̂(·|s))` over all states.
pub fn max_row_kl(sys: &FiniteTransitionSystem, sys_hat: &FiniteTransitionSystem) -> Result<f64> {
    if sys.n_states() != sys_hat.n_states() {
        return Err(Error::precondition("systems have different state counts"));
    }
    let mut worst = 0.0f64;
    for s in 0..sys.n_states() {
        worst = worst.max(kl_divergence(sys.row(s), sys_hat.row(s))?);
    }
    Ok(worst)
}

/// One row of an error-amplification check: after `t` steps from the shared
/// anchor, the total variation between the exact marginals of the two
/// systems, against the bound `t · sqrt(α / 2)`.
#[derive(Debug, Clone, Copy)]
pub struct AmplificationCheck {
    pub t: usize,
    pub tv: f64,
    pub bound: f64,
    pub alpha: f64,
}

impl AmplificationCheck {
    pub fn holds(&self) -> bool {
        self.tv <= self.bound + 1e-12
    }
}

fn step_marginal(sys: &FiniteTransitionSystem, dist: &[f64]) -> Vec<f64> {
    let ns = sys.n_states();
    let mut out = vec![0.0; ns];
    for (s, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = sys.row(s);
        for s2 in 0..ns {
            out[s2] += p * row[s2];
        }
    }
    out
}

/// Exact marginals by matrix powering from a δ-anchor, compared step by step:
/// `TV(T^t, T̂^t) ≤ t sqrt(α/2)` where `α` bounds every per-state KL.
pub fn validate_amplification(
    sys: &FiniteTransitionSystem,
    sys_hat: &FiniteTransitionSystem,
    anchor: usize,
    t_max: usize,
) -> Result<Vec<AmplificationCheck>> {
    if anchor >= sys.n_states() {
        return Err(Error::precondition("anchor out of range"));
    }
    let alpha = max_row_kl(sys, sys_hat)?;
    if !alpha.is_finite() {
        return Err(Error::precondition(
            "per-row KL is infinite; the amplification bound needs absolute continuity",
        ));
    }
    let mut p = vec![0.0; sys.n_states()];
    let mut q = vec![0.0; sys.n_states()];
    p[anchor] = 1.0;
    q[anchor] = 1.0;
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        p = step_marginal(sys, &p);
        q = step_marginal(sys_hat, &q);
        out.push(AmplificationCheck {
            t,
            tv: tv_distance(&p, &q)?,
            bound: t as f64 * (alpha / 2.0).sqrt(),
            alpha,
        });
    }
    Ok(out)
}

/// Pinsker: `TV(p, q) ≤ sqrt(KL(p ‖ q) / 2)`. Returns `(tv, bound)`.
pub fn pinsker_check(p: &[f64], q: &[f64]) -> Result<(f64, f64)> {
    let tv = tv_distance(p, q)?;
    let kl = kl_divergence(p, q)?;
    Ok((tv, (kl / 2.0).sqrt()))
}

/// Both sides of a measure-gap check between a system and its approximation.
#[derive(Debug, Clone, Copy)]
pub struct MeasureGapCheck {
    pub mu: f64,
    pub mu_hat: f64,
    pub gap: f64,
    /// `ε / 2`.
    pub bound: f64,
    pub alpha: f64,
    pub alpha_budget: f64,
}

impl MeasureGapCheck {
    pub fn holds(&self) -> bool {
        self.gap <= self.bound + 1e-12
    }
}

/// If every row of `sys_hat` is within KL `α = ε²/(2n²)` of `sys`, the exact
/// bounded-safety measures over horizon `n` differ by at most `ε/2`. The α
/// precondition is verified first and is an error when violated.
pub fn validate_measure_gap(
    sys: &FiniteTransitionSystem,
    sys_hat: &FiniteTransitionSystem,
    formula: &SafetyFormula,
    anchor: usize,
    horizon: usize,
    eps: f64,
) -> Result<MeasureGapCheck> {
    let alpha_budget = kl_alpha_budget(eps, horizon)?;
    let alpha = max_row_kl(sys, sys_hat)?;
    if !(alpha <= alpha_budget) {
        return Err(Error::Precondition(format!(
            "per-row KL {alpha} exceeds the budget {alpha_budget} for eps={eps}, horizon={horizon}"
        )));
    }
    let mu = exact_measure(MeasureQuery { system: sys, formula, anchor, horizon })?;
    let mu_hat = exact_measure(MeasureQuery { system: sys_hat, formula, anchor, horizon })?;
    Ok(MeasureGapCheck {
        mu,
        mu_hat,
        gap: (mu - mu_hat).abs(),
        bound: eps / 2.0,
        alpha,
        alpha_budget,
    })
}

/// A fully enumerable partially-observed chain, small enough to filter
/// exactly: at most 4 states, 3 observations, and belief-tree horizon 4.
#[derive(Debug, Clone)]
pub struct TinyPomdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_obs: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`.
    pub transition: Vec<f64>,
    /// `observation[s' * n_obs + z]`: emission from the arrived state.
    pub observation: Vec<f64>,
    pub initial: Vec<f64>,
}

pub const POMDP_MAX_STATES: usize = 4;
pub const POMDP_MAX_OBS: usize = 3;
pub const POMDP_MAX_HORIZON: usize = 4;

impl TinyPomdp {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_states > POMDP_MAX_STATES {
            return Err(Error::SizeGuard(format!(
                "belief filtering is enumerable up to {POMDP_MAX_STATES} states, got {}",
                self.n_states
            )));
        }
        if self.n_obs == 0 || self.n_obs > POMDP_MAX_OBS {
            return Err(Error::SizeGuard(format!(
                "belief filtering is enumerable up to {POMDP_MAX_OBS} observations, got {}",
                self.n_obs
            )));
        }
        if self.transition.len() != self.n_states * self.n_actions * self.n_states {
            return Err(Error::precondition("transition table size mismatch"));
        }
        if self.observation.len() != self.n_states * self.n_obs {
            return Err(Error::precondition("observation table size mismatch"));
        }
        if self.initial.len() != self.n_states {
            return Err(Error::precondition("initial distribution size mismatch"));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let base = (s * self.n_actions + a) * self.n_states;
                let row = &self.transition[base..base + self.n_states];
                validate_distribution(&format!("transition row ({s},{a})"), row)?;
                if row.iter().any(|&p| p <= 0.0) {
                    return Err(Error::precondition(
                        "belief filtering needs strictly positive transition rows",
                    ));
                }
            }
            let row = &self.observation[s * self.n_obs..(s + 1) * self.n_obs];
            validate_distribution(&format!("observation row {s}"), row)?;
            if row.iter().any(|&p| p <= 0.0) {
                return Err(Error::precondition(
                    "belief filtering needs strictly positive observation rows",
                ));
            }
        }
        validate_distribution("initial distribution", &self.initial)?;
        Ok(())
    }

    fn row(&self, table: &[f64], s: usize, a: usize) -> Vec<f64> {
        let base = (s * self.n_actions + a) * self.n_states;
        table[base..base + self.n_states].to_vec()
    }
}

/// Stationary belief-conditioned policy `π(a | b) = softmax(W b)`.
#[derive(Debug, Clone)]
pub struct BeliefPolicy {
    /// `weights[a * n_states + s]`.
    pub weights: Vec<f64>,
    pub n_actions: usize,
}

impl BeliefPolicy {
    pub fn probs(&self, belief: &[f64]) -> Vec<f64> {
        let ns = belief.len();
        let mut logits = Vec::with_capacity(self.n_actions);
        for a in 0..self.n_actions {
            let mut l = 0.0;
            for s in 0..ns {
                l += self.weights[a * ns + s] * belief[s];
            }
            logits.push(l);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        probs
    }
}

/// State-level and belief-level divergences between the true filtered system
/// and one whose dynamics are replaced by `transition_hat`.
///
/// Beliefs are exact filtering distributions over histories `(a_1 z_1 ... )`,
/// computed with the true dynamics and shared by both systems; the two
/// systems differ only in the probability they assign to each history. The
/// state marginal at the horizon decodes every history through its shared
/// belief, so marginalisation can only lose divergence.
#[derive(Debug, Clone, Copy)]
pub struct MarginalisationCheck {
    pub state_kl: f64,
    pub belief_kl: f64,
    pub state_tv: f64,
    pub belief_tv: f64,
}

impl MarginalisationCheck {
    pub fn holds(&self) -> bool {
        self.state_kl <= self.belief_kl + 1e-12 && self.state_tv <= self.belief_tv + 1e-12
    }
}

pub fn validate_belief_marginalisation(
    pomdp: &TinyPomdp,
    transition_hat: &[f64],
    policy: &BeliefPolicy,
    horizon: usize,
) -> Result<MarginalisationCheck> {
    pomdp.validate()?;
    if policy.n_actions != pomdp.n_actions {
        return Err(Error::precondition("policy/POMDP action count mismatch"));
    }
    if horizon == 0 || horizon > POMDP_MAX_HORIZON {
        return Err(Error::SizeGuard(format!(
            "belief-tree horizon must be in 1..={POMDP_MAX_HORIZON}, got {horizon}"
        )));
    }
    if transition_hat.len() != pomdp.transition.len() {
        return Err(Error::precondition("perturbed transition table size mismatch"));
    }
    let hat = TinyPomdp { transition: transition_hat.to_vec(), ..pomdp.clone() };
    hat.validate()?;

    struct NodeSet {
        beliefs: Vec<Vec<f64>>,
        p_true: Vec<f64>,
        p_model: Vec<f64>,
    }
    let mut nodes = NodeSet {
        beliefs: vec![pomdp.initial.clone()],
        p_true: vec![1.0],
        p_model: vec![1.0],
    };

    let ns = pomdp.n_states;
    for _ in 0..horizon {
        let mut next = NodeSet { beliefs: Vec::new(), p_true: Vec::new(), p_model: Vec::new() };
        for (i, belief) in nodes.beliefs.iter().enumerate() {
            let pi = policy.probs(belief);
            for a in 0..pomdp.n_actions {
                // Predicted next-state distributions under each dynamics.
                let mut q_true = vec![0.0; ns];
                let mut q_model = vec![0.0; ns];
                for (s, &b) in belief.iter().enumerate() {
                    if b == 0.0 {
                        continue;
                    }
                    let rt = pomdp.row(&pomdp.transition, s, a);
                    let rm = pomdp.row(transition_hat, s, a);
                    for s2 in 0..ns {
                        q_true[s2] += b * rt[s2];
                        q_model[s2] += b * rm[s2];
                    }
                }
                for z in 0..pomdp.n_obs {
                    let mut w_true = 0.0;
                    let mut w_model = 0.0;
                    for s2 in 0..ns {
                        let o = pomdp.observation[s2 * pomdp.n_obs + z];
                        w_true += o * q_true[s2];
                        w_model += o * q_model[s2];
                    }
                    // Shared decoder: the Bayes filter under the true dynamics.
                    let b_next: Vec<f64> = (0..ns)
                        .map(|s2| pomdp.observation[s2 * pomdp.n_obs + z] * q_true[s2] / w_true)
                        .collect();
                    next.beliefs.push(b_next);
                    next.p_true.push(nodes.p_true[i] * pi[a] * w_true);
                    next.p_model.push(nodes.p_model[i] * pi[a] * w_model);
                }
            }
        }
        nodes = next;
    }

    let belief_kl = kl_divergence(&nodes.p_true, &nodes.p_model)?;
    let belief_tv = tv_distance(&nodes.p_true, &nodes.p_model)?;
    let mut m_true = vec![0.0; ns];
    let mut m_model = vec![0.0; ns];
    for (i, b) in nodes.beliefs.iter().enumerate() {
        for s in 0..ns {
            m_true[s] += nodes.p_true[i] * b[s];
            m_model[s] += nodes.p_model[i] * b[s];
        }
    }
    let state_kl = kl_divergence(&m_true, &m_model)?;
    let state_tv = tv_distance(&m_true, &m_model)?;
    Ok(MarginalisationCheck { state_kl, belief_kl, state_tv, belief_tv })
}

/// Random tiny POMDP with strictly positive rows, for the validation suites.
pub fn random_tiny_pomdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    n_obs: usize,
    rng: &mut R,
) -> TinyPomdp {
    fn positive_row<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
        // Floor at 0.05/len keeps every entry bounded away from zero.
        let mut row: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        row
    }
    let mut transition = Vec::new();
    for _ in 0..n_states * n_actions {
        transition.extend(positive_row(n_states, rng));
    }
    let mut observation = Vec::new();
    for _ in 0..n_states {
        observation.extend(positive_row(n_obs, rng));
    }
    let initial = positive_row(n_states, rng);
    TinyPomdp { n_states, n_actions, n_obs, transition, observation, initial }
}

/// Mix every transition row of a tiny POMDP with the uniform distribution.
pub fn mix_pomdp_transition(pomdp: &TinyPomdp, beta: f64) -> Vec<f64> {
    let u = 1.0 / pomdp.n_states as f64;
    pomdp.transition.iter().map(|&p| (1.0 - beta) * p + beta * u).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixture_kl_matches_generic_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = random_system(6, 0.3, &mut rng);
        let beta = 0.05;
        let mixed = mix_with_uniform(&sys, beta).unwrap();
        for s in 0..sys.n_states() {
            let direct = mixture_row_kl(sys.row(s), beta);
            let generic = kl_divergence(sys.row(s), mixed.row(s)).unwrap();
            assert!((direct - generic).abs() < 1e-13, "row {s}: {direct} vs {generic}");
        }
    }

    #[test]
    fn amplification_bound_holds_on_perturbed_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..20 {
            let sys = random_system(2 + case % 6, 0.2, &mut rng);
            let hat = mix_with_uniform(&sys, 0.02 + 0.01 * (case % 4) as f64).unwrap();
            for check in validate_amplification(&sys, &hat, 0, 8).unwrap() {
                assert!(check.holds(), "case {case}: {check:?}");
            }
        }
    }

    #[test]
    fn amplification_requires_absolute_continuity() {
        let atoms = Atoms::new(&["unsafe"]).unwrap();
        let labels = vec![LabelSet::EMPTY, LabelSet::EMPTY];
        let sys = FiniteTransitionSystem::new(
            2,
            vec![0.5, 0.5, 0.5, 0.5],
            atoms.clone(),
            labels.clone(),
        )
        .unwrap();
        let hat =
            FiniteTransitionSystem::new(2, vec![1.0, 0.0, 0.0, 1.0], atoms, labels).unwrap();
        assert!(validate_amplification(&sys, &hat, 0, 3).is_err());
    }

    #[test]
    fn measure_gap_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 0.2;
        let horizon = 4;
        let alpha = kl_alpha_budget(eps, horizon).unwrap();
        // beta = 1 - exp(-alpha) guarantees every row KL is within alpha.
        let beta = 1.0 - (-alpha).exp();
        for case in 0..20 {
            let sys = random_system(3 + case % 6, 0.3, &mut rng);
            let hat = mix_with_uniform(&sys, beta).unwrap();
            let f = SafetyFormula::parse("!unsafe", sys.atoms()).unwrap();
            let check = validate_measure_gap(&sys, &hat, &f, 0, horizon, eps).unwrap();
            assert!(check.holds(), "case {case}: {check:?}");
            assert!(check.bound == eps / 2.0);
        }
    }

    #[test]
    fn measure_gap_rejects_budget_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_system(4, 0.3, &mut rng);
        let hat = mix_with_uniform(&sys, 0.5).unwrap();
        let f = SafetyFormula::parse("!unsafe", sys.atoms()).unwrap();
        assert!(validate_measure_gap(&sys, &hat, &f, 0, 4, 0.2).is_err());
    }

    #[test]
    fn pinsker_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let n = 2 + rng.gen_range(0..6);
            let p = random_distribution(n, &mut rng);
            let q = random_distribution(n, &mut rng);
            let (tv, bound) = pinsker_check(&p, &q).unwrap();
            assert!(tv <= bound + 1e-12, "{tv} vs {bound}");
        }

        fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        }
    }

    #[test]
    fn belief_marginalisation_example() {
        // 2 states, 2 observations, mildly informative sensor, perturbed
        // dynamics: the decoded state divergence must not exceed the history
        // divergence.
        let pomdp = TinyPomdp {
            n_states: 2,
            n_actions: 2,
            n_obs: 2,
            transition: vec![
                0.9, 0.1, // s0 a0
                0.3, 0.7, // s0 a1
                0.2, 0.8, // s1 a0
                0.6, 0.4, // s1 a1
            ],
            observation: vec![0.8, 0.2, 0.25, 0.75],
            initial: vec![0.6, 0.4],
        };
        let hat = mix_pomdp_transition(&pomdp, 0.15);
        let policy = BeliefPolicy { weights: vec![0.5, -0.3, -0.2, 0.8], n_actions: 2 };
        for horizon in 1..=4 {
            let check = validate_belief_marginalisation(&pomdp, &hat, &policy, horizon).unwrap();
            assert!(check.holds(), "horizon {horizon}: {check:?}");
            assert!(check.belief_kl > 0.0);
        }
    }

    #[test]
    fn belief_marginalisation_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pomdp = random_tiny_pomdp(3, 2, 2, &mut rng);
        let hat = mix_pomdp_transition(&pomdp, 0.1);
        let policy = BeliefPolicy { weights: vec![0.0; 6], n_actions: 2 };
        assert!(validate_belief_marginalisation(&pomdp, &hat, &policy, 5).is_err());
        assert!(validate_belief_marginalisation(&pomdp, &hat, &policy, 0).is_err());
        let big = random_tiny_pomdp(5, 2, 2, &mut rng);
        let big_hat = mix_pomdp_transition(&big, 0.1);
        assert!(validate_belief_marginalisation(&big, &big_hat, &policy, 2).is_err());
    }
}
