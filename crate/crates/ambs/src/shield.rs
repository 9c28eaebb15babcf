//! Per-step verdicts: before an action reaches the environment, roll m
//! imagined traces with that action pinned first, estimate the probability
//! that the look-ahead stays within the bounded-safety budget, and fall back
//! to the backup policy when the estimate leaves [1−Δ+ε, 1].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::SafetyFormula;
use crate::mdp::{induce_transition_system, sample_categorical, LabelledMdp};
use crate::measure::{exact_measure_all, sample_size_approx, sample_size_exact};
use crate::trace::Trace;
use crate::worldmodel::{imagine, PolicyKind, WorldModel};

/// Slack so that an exactly-boundary satisfying count still accepts: the
/// acceptance interval is closed and (1−Δ+ε)·m is not always representable.
const ACCEPT_TOL: f64 = 1e-9;

/// How the configured sample count relates to the Hoeffding requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleCertificate {
    /// m ≥ 2·ln(2/δ)/ε², the published (loose) bound.
    MeetsApprox,
    /// m ≥ ln(2/δ)/(2ε²), the tight two-sided bound — still certified.
    MeetsExact,
    /// Below both bounds: verdicts carry no confidence guarantee. Callers
    /// that run undersampled (e.g. to keep training cheap) must log it.
    Undersampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShieldConfig {
    /// Tolerated unsafety mass Δ.
    pub delta: f64,
    /// Estimation slack ε.
    pub epsilon: f64,
    /// Verdict failure probability δ.
    pub failure_prob: f64,
    /// Traces sampled per verdict.
    pub n_samples: usize,
    /// Imagination depth H.
    pub horizon: usize,
    /// Bounded-safety horizon T behind the cost threshold.
    pub lookahead_horizon: usize,
    /// Cost magnitude C.
    pub cost_value: f64,
    /// Look-ahead discount.
    pub gamma: f64,
    /// Bootstrap the tail of each trace with the safety critics.
    pub use_critics: bool,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        let (epsilon, failure_prob) = (0.05, 0.05);
        Self {
            delta: 0.1,
            epsilon,
            failure_prob,
            n_samples: sample_size_exact(epsilon, failure_prob).unwrap() as usize,
            horizon: 15,
            lookahead_horizon: 30,
            cost_value: 10.0,
            gamma: 0.997,
            use_critics: false,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("epsilon", self.epsilon), ("failure_prob", self.failure_prob)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if self.epsilon >= self.delta {
            return Err(Error::Config(format!(
                "need epsilon < delta or the accept interval is empty (epsilon {}, delta {})",
                self.epsilon, self.delta
            )));
        }
        if self.n_samples == 0 || self.horizon == 0 || self.lookahead_horizon == 0 {
            return Err(Error::config("sample count and horizons must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.cost_value > 0.0) {
            return Err(Error::config("need gamma in (0,1] and a positive cost value"));
        }
        Ok(())
    }

    /// Classify `n_samples` against the Hoeffding requirements for (ε, δ).
    pub fn sample_certificate(&self) -> SampleCertificate {
        let m = self.n_samples as u64;
        if m >= sample_size_approx(self.epsilon, self.failure_prob).unwrap_or(u64::MAX) {
            SampleCertificate::MeetsApprox
        } else if m >= sample_size_exact(self.epsilon, self.failure_prob).unwrap_or(u64::MAX) {
            SampleCertificate::MeetsExact
        } else {
            SampleCertificate::Undersampled
        }
    }

    /// The counter-example threshold γ^{T−1}·C; a trace is satisfying iff
    /// its discounted cost stays strictly below it.
    pub fn satisfaction_threshold(&self) -> f64 {
        self.gamma.powi(self.lookahead_horizon as i32 - 1) * self.cost_value
    }

    /// Closed acceptance test: satisfying/m ∈ [1−Δ+ε, 1].
    pub fn accepts(&self, satisfying: usize) -> bool {
        satisfying as f64 >= (1.0 - self.delta + self.epsilon) * self.n_samples as f64 - ACCEPT_TOL
    }
}

/// Discounted trace cost `Σ_{t=1}^{H} γ^{t−1}·(Π_{i=1}^{t} cont_i)·ĉ_t`.
/// With `bootstrap = v(s_H)` the t = H cost is replaced by the critic value,
/// extending the effective look-ahead past the imagination depth. The
/// continuation product masks branches the model predicts as terminated.
pub fn trace_cost<S, A>(trace: &Trace<S, A>, gamma: f64, bootstrap: Option<f64>) -> f64 {
    let h = trace.len();
    let mut alive = 1.0;
    let mut disc = 1.0;
    let mut cost = 0.0;
    for t in 1..=h {
        alive *= trace.continues[t];
        let stage = match bootstrap {
            Some(v) if t == h => v,
            _ => trace.costs[t],
        };
        cost += disc * alive * stage;
        disc *= gamma;
    }
    cost
}

pub fn is_satisfying(cost: f64, cfg: &ShieldConfig) -> bool {
    cost < cfg.satisfaction_threshold()
}

/// The m-sample verdict core: imagine from `start` with the first action
/// pinned, count satisfying traces. Returns (satisfying, mean cost, max cost).
pub fn count_satisfying<M, R, P>(
    model: &M,
    mut task_policy: P,
    cfg: &ShieldConfig,
    start: &M::Obs,
    proposal: &M::Action,
    bootstrap: Option<&dyn Fn(&M::Obs) -> f64>,
    rng: &mut R,
) -> Result<(usize, f64, f64)>
where
    M: WorldModel,
    M::Obs: Clone,
    M::Action: Clone,
    P: FnMut(&M::Obs, &mut R) -> M::Action,
    R: Rng + ?Sized,
{
    let mut satisfying = 0usize;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for _ in 0..cfg.n_samples {
        let imagined = imagine(
            model,
            &mut task_policy,
            PolicyKind::Task,
            start.clone(),
            cfg.horizon,
            Some(proposal.clone()),
            rng,
        )?;
        let tail = bootstrap.map(|v| v(&imagined.trace.states[cfg.horizon]));
        let cost = trace_cost(&imagined.trace, cfg.gamma, tail);
        if is_satisfying(cost, cfg) {
            satisfying += 1;
        }
        sum += cost;
        max = max.max(cost);
    }
    Ok((satisfying, sum / cfg.n_samples as f64, max))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShieldDecision<A> {
    pub action: A,
    /// The proposal was replaced by a backup sample.
    pub overridden: bool,
    /// Satisfying fraction μ̃.
    pub mu_tilde: f64,
    pub satisfying: usize,
    pub n_samples: usize,
    pub mean_trace_cost: f64,
    pub max_trace_cost: f64,
}

/// Verify one proposed action. The proposal is accepted iff the satisfying
/// fraction lands in the closed interval [1−Δ+ε, 1] and the current labels
/// do not already violate the formula (imagined traces start at the
/// successor, so the caller reports the current state through
/// `current_violation`; overriding on it is the conservative default).
/// On rejection the backup action is sampled once — no re-verification.
#[allow(clippy::too_many_arguments)]
pub fn shield_action<M, R, PT, PS>(
    model: &M,
    proposal: M::Action,
    task_policy: PT,
    mut safe_policy: PS,
    bootstrap: Option<&dyn Fn(&M::Obs) -> f64>,
    cfg: &ShieldConfig,
    start: &M::Obs,
    current_violation: bool,
    rng: &mut R,
) -> Result<ShieldDecision<M::Action>>
where
    M: WorldModel,
    M::Obs: Clone,
    M::Action: Clone,
    PT: FnMut(&M::Obs, &mut R) -> M::Action,
    PS: FnMut(&M::Obs, &mut R) -> M::Action,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if cfg.use_critics && bootstrap.is_none() {
        return Err(Error::config("critic bootstrap requested but no critics supplied"));
    }
    let tail = if cfg.use_critics { bootstrap } else { None };
    let (satisfying, mean_cost, max_cost) =
        count_satisfying(model, task_policy, cfg, start, &proposal, tail, rng)?;
    let accepted = cfg.accepts(satisfying) && !current_violation;
    let action = if accepted { proposal } else { safe_policy(start, rng) };
    Ok(ShieldDecision {
        action,
        overridden: !accepted,
        mu_tilde: satisfying as f64 / cfg.n_samples as f64,
        satisfying,
        n_samples: cfg.n_samples,
        mean_trace_cost: mean_cost,
        max_trace_cost: max_cost,
    })
}

/// Empirical soundness sweep on a finite MDP: at sampled (state, action)
/// pairs, compare the verdict against the exact probability of the event the
/// shield estimates — first action pinned, policy thereafter, every visited
/// successor satisfying the formula for H steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub trials: usize,
    /// Trials whose exact measure was at least 1−Δ+2ε, and how many the
    /// shield accepted. Hoeffding promises an accept rate of at least 1−δ.
    pub clearly_safe: usize,
    pub clearly_safe_accepted: usize,
    /// Trials whose exact measure was at most 1−Δ, and how many the shield
    /// (wrongly) accepted. Hoeffding caps the rate at δ.
    pub clearly_unsafe: usize,
    pub clearly_unsafe_accepted: usize,
    /// Trials in the indifference band between the two, where any verdict
    /// is consistent with the guarantee.
    pub marginal: usize,
}

impl CalibrationReport {
    pub fn accept_rate_when_safe(&self) -> f64 {
        self.clearly_safe_accepted as f64 / self.clearly_safe.max(1) as f64
    }

    pub fn false_accept_rate(&self) -> f64 {
        self.clearly_unsafe_accepted as f64 / self.clearly_unsafe.max(1) as f64
    }
}

pub fn shield_calibration_report<M, F, R>(
    mdp: &LabelledMdp,
    formula: &SafetyFormula,
    mut policy: F,
    model: &M,
    cfg: &ShieldConfig,
    trials: usize,
    rng: &mut R,
) -> Result<CalibrationReport>
where
    M: WorldModel<Obs = usize, Action = usize>,
    F: FnMut(usize, &mut [f64]),
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if cfg.use_critics {
        return Err(Error::config("calibration runs without critic bootstrapping"));
    }
    if cfg.gamma >= 1.0 || cfg.lookahead_horizon <= cfg.horizon {
        // With γ < 1 and T > H, any single violation inside the window
        // already exceeds γ^{T−1}·C, so the satisfying event is exactly
        // "H successors all satisfy" and has a closed-form measure.
        return Err(Error::config("calibration needs gamma < 1 and lookahead beyond the horizon"));
    }
    let induced = induce_transition_system(mdp, &mut policy)?;
    let safe_from = exact_measure_all(&induced, formula, cfg.horizon - 1)?;
    let mut report = CalibrationReport {
        trials,
        clearly_safe: 0,
        clearly_safe_accepted: 0,
        clearly_unsafe: 0,
        clearly_unsafe_accepted: 0,
        marginal: 0,
    };
    let mut weights = vec![0.0; mdp.n_actions()];
    for _ in 0..trials {
        let state = rng.gen_range(0..mdp.n_states());
        policy(state, &mut weights);
        let action = sample_categorical(&weights, rng);
        let mu: f64 = mdp
            .row(state, action)
            .iter()
            .zip(&safe_from)
            .map(|(p, nu)| p * nu)
            .sum();
        let sampler = |s: &usize, r: &mut R| {
            let mut w = vec![0.0; mdp.n_actions()];
            policy(*s, &mut w);
            sample_categorical(&w, r)
        };
        let (satisfying, _, _) = count_satisfying(model, sampler, cfg, &state, &action, None, rng)?;
        let accepted = cfg.accepts(satisfying);
        if mu >= 1.0 - cfg.delta + 2.0 * cfg.epsilon {
            report.clearly_safe += 1;
            report.clearly_safe_accepted += accepted as usize;
        } else if mu <= 1.0 - cfg.delta {
            report.clearly_unsafe += 1;
            report.clearly_unsafe_accepted += accepted as usize;
        } else {
            report.marginal += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ChainWorld;
    use crate::formula::{Atoms, LabelSet};
    use crate::trace::trace_satisfies;
    use crate::worldmodel::ExactModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(n_samples: usize, horizon: usize) -> ShieldConfig {
        ShieldConfig {
            n_samples,
            horizon,
            lookahead_horizon: horizon + 4,
            ..ShieldConfig::default()
        }
    }

    #[test]
    fn config_validation_and_certificates() {
        let good = ShieldConfig::default();
        good.validate().unwrap();
        assert_eq!(good.n_samples, 738);
        assert_eq!(good.sample_certificate(), SampleCertificate::MeetsExact);
        assert_eq!(
            ShieldConfig { n_samples: 2952, ..good }.sample_certificate(),
            SampleCertificate::MeetsApprox
        );
        assert_eq!(
            ShieldConfig { n_samples: 32, ..good }.sample_certificate(),
            SampleCertificate::Undersampled
        );
        assert!(ShieldConfig { epsilon: 0.1, ..good }.validate().is_err()); // ε = Δ
        assert!(ShieldConfig { delta: 1.0, ..good }.validate().is_err());
        assert!(ShieldConfig { failure_prob: 0.0, ..good }.validate().is_err());
        assert!(ShieldConfig { n_samples: 0, ..good }.validate().is_err());
        assert!(ShieldConfig { gamma: 0.0, ..good }.validate().is_err());
    }

    #[test]
    fn satisfaction_threshold_value() {
        let cfg = ShieldConfig::default(); // γ = 0.997, T = 30, C = 10
        assert!((cfg.satisfaction_threshold() - 9.166).abs() < 5e-4);
        assert!(is_satisfying(0.0, &cfg));
        assert!(!is_satisfying(cfg.satisfaction_threshold(), &cfg)); // strict
    }

    fn flat_trace(costs: Vec<f64>) -> Trace<usize, usize> {
        let n = costs.len() - 1;
        Trace {
            states: vec![0; n + 1],
            actions: vec![0; n],
            labels: None,
            rewards: vec![0.0; n + 1],
            costs,
            continues: vec![1.0; n + 1],
        }
    }

    #[test]
    fn trace_cost_cases() {
        assert_eq!(trace_cost(&flat_trace(vec![0.0; 5]), 0.9, None), 0.0);
        // Violation at imagined step 1, γ = 1 → C.
        assert_eq!(trace_cost(&flat_trace(vec![0.0, 10.0, 0.0]), 1.0, None), 10.0);
        // Violation at step k → C·γ^{k−1}.
        let k = 3;
        let tr = flat_trace(vec![0.0, 0.0, 0.0, 10.0]);
        assert!((trace_cost(&tr, 0.9, None) - 10.0 * 0.9f64.powi(k - 1)).abs() < 1e-12);
        // The anchor's own cost is not charged.
        assert_eq!(trace_cost(&flat_trace(vec![10.0, 0.0]), 0.9, None), 0.0);
        // A terminated branch stops accruing.
        let mut tr = flat_trace(vec![0.0, 0.0, 10.0]);
        tr.continues[2] = 0.0;
        assert_eq!(trace_cost(&tr, 0.9, None), 0.0);
        // Bootstrap replaces the final stage cost.
        let tr = flat_trace(vec![0.0, 10.0, 10.0]);
        let expect = 10.0 + 0.9 * 3.0;
        assert!((trace_cost(&tr, 0.9, Some(3.0)) - expect).abs() < 1e-12);
    }

    #[test]
    fn acceptance_interval_is_closed() {
        let cfg = ShieldConfig { n_samples: 100, ..ShieldConfig::default() };
        // 1−Δ+ε = 0.95.
        assert!(cfg.accepts(96));
        assert!(cfg.accepts(95));
        assert!(!cfg.accepts(94));
    }

    #[test]
    fn acceptance_is_monotone_in_delta() {
        let base = ShieldConfig::default();
        for m in [10usize, 33, 100] {
            for count in 0..=m {
                let mut last = false;
                for delta in [0.06, 0.1, 0.2, 0.5, 0.9] {
                    let cfg = ShieldConfig { delta, n_samples: m, ..base };
                    let now = cfg.accepts(count);
                    assert!(!last || now, "acceptance lost when relaxing delta");
                    last = now;
                }
            }
        }
    }

    /// Three states, two actions: action 0 stays put, action 1 jumps to the
    /// absorbing violation at state 2. Fully deterministic.
    fn two_door_mdp() -> LabelledMdp {
        let atoms = Atoms::new(&["unsafe"]).unwrap();
        let (n, na) = (3usize, 2usize);
        let mut t = vec![0.0; n * na * n];
        for s in 0..n {
            for a in 0..na {
                let target = if s == 2 || a == 1 { 2 } else { s };
                t[(s * na + a) * n + target] = 1.0;
            }
        }
        let labels = vec![
            LabelSet::EMPTY,
            LabelSet::EMPTY,
            LabelSet::from_names(&["unsafe"], &atoms).unwrap(),
        ];
        LabelledMdp::new(n, na, t, vec![0.0; n * na], vec![1.0, 0.0, 0.0], 0.99, atoms, labels)
            .unwrap()
    }

    fn two_door_exact() -> ExactModel {
        ExactModel::new(two_door_mdp(), "!unsafe", 10.0).unwrap()
    }

    #[test]
    fn clean_model_accepts_and_doomed_model_overrides() {
        let model = two_door_exact();
        let cfg = small_cfg(40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Staying can never violate.
        let stay = |_: &usize, _: &mut ChaCha8Rng| 0usize;
        let d = shield_action(&model, 0, stay, |_: &usize, _: &mut ChaCha8Rng| 0, None, &cfg, &0, false, &mut rng)
            .unwrap();
        assert!(!d.overridden);
        assert_eq!(d.mu_tilde, 1.0);
        assert_eq!(d.action, 0);
        assert_eq!(d.max_trace_cost, 0.0);

        // Jumping violates at the first imagined step, in every trace.
        let advance = |_: &usize, _: &mut ChaCha8Rng| 1usize;
        let d = shield_action(&model, 1, advance, |_: &usize, _: &mut ChaCha8Rng| 0, None, &cfg, &0, false, &mut rng)
            .unwrap();
        assert!(d.overridden);
        assert_eq!(d.mu_tilde, 0.0);
        assert_eq!(d.action, 0, "backup action expected");
        assert!(d.mean_trace_cost > 0.0);
    }

    #[test]
    fn current_violation_forces_override() {
        let model = two_door_exact();
        let cfg = small_cfg(20, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stay = |_: &usize, _: &mut ChaCha8Rng| 0usize;
        let d = shield_action(&model, 0, stay, |_: &usize, _: &mut ChaCha8Rng| 1, None, &cfg, &0, true, &mut rng)
            .unwrap();
        assert!(d.overridden);
        assert_eq!(d.mu_tilde, 1.0, "estimate still reported");
        assert_eq!(d.action, 1);
    }

    #[test]
    fn critics_flag_requires_bootstrap() {
        let model = two_door_exact();
        let cfg = ShieldConfig { use_critics: true, ..small_cfg(10, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stay = |_: &usize, _: &mut ChaCha8Rng| 0usize;
        let err = shield_action(&model, 0, stay, |_: &usize, _: &mut ChaCha8Rng| 0, None, &cfg, &0, false, &mut rng);
        assert!(err.is_err());

        // A pessimistic critic pushes every trace over the threshold.
        let doom = |_: &usize| 1e6;
        let d = shield_action(
            &model,
            0,
            stay,
            |_: &usize, _: &mut ChaCha8Rng| 1,
            Some(&doom),
            &cfg,
            &0,
            false,
            &mut rng,
        )
        .unwrap();
        assert!(d.overridden);
        assert_eq!(d.mu_tilde, 0.0);
    }

    #[test]
    fn undiscounted_satisfaction_matches_label_semantics() {
        // With γ = 1 and T ≥ H the satisfying test coincides with the
        // formula over imagined labels, provided the anchor itself is safe
        // (the trace cost never charges the anchor).
        let world = ChainWorld::leaky(6, 0.4).unwrap();
        let model = ExactModel::new(world.mdp().clone(), "!unsafe", 10.0).unwrap();
        let cfg = ShieldConfig {
            gamma: 1.0,
            n_samples: 1,
            horizon: 5,
            lookahead_horizon: 5,
            ..ShieldConfig::default()
        };
        let formula = SafetyFormula::parse("!unsafe", world.mdp().atoms()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut policy = |_: &usize, r: &mut ChaCha8Rng| r.gen_range(0..2usize);
        for _ in 0..200 {
            let imagined = imagine(&model, &mut policy, PolicyKind::Task, 0usize, 5, None, &mut rng).unwrap();
            let by_cost = is_satisfying(trace_cost(&imagined.trace, cfg.gamma, None), &cfg);
            let by_labels = trace_satisfies(&imagined.trace, &formula, 5).unwrap();
            assert_eq!(by_cost, by_labels);
        }
    }

    #[test]
    fn verdicts_are_seed_deterministic() {
        let world = ChainWorld::leaky(6, 0.4).unwrap();
        let model = ExactModel::new(world.mdp().clone(), "!unsafe", 10.0).unwrap();
        let cfg = small_cfg(30, 5);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = |_: &usize, r: &mut ChaCha8Rng| r.gen_range(0..2usize);
            shield_action(&model, 1, policy, |_: &usize, _: &mut ChaCha8Rng| 0, None, &cfg, &0, false, &mut rng)
                .unwrap()
        };
        let (a, b) = (run(42), run(42));
        assert_eq!(a.action, b.action);
        assert_eq!(a.satisfying, b.satisfying);
        assert_eq!(a.mu_tilde.to_bits(), b.mu_tilde.to_bits());
        assert_eq!(a.mean_trace_cost.to_bits(), b.mean_trace_cost.to_bits());
    }

    #[test]
    fn calibration_on_a_polarized_chain() {
        // Staying at state 0 is absorbing-safe (μ = 1); everywhere else the
        // policy jumps straight to the violation (μ = 0), so every trial
        // lands in one of the two decisive buckets.
        let mdp = two_door_mdp();
        let model = ExactModel::new(mdp.clone(), "!unsafe", 10.0).unwrap();
        let formula = SafetyFormula::parse("!unsafe", mdp.atoms()).unwrap();
        let cfg = small_cfg(80, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let policy = |s: usize, w: &mut [f64]| {
            w.fill(0.0);
            w[usize::from(s != 0)] = 1.0; // stay at 0, jump elsewhere
        };
        let report =
            shield_calibration_report(&mdp, &formula, policy, &model, &cfg, 400, &mut rng).unwrap();
        assert_eq!(report.trials, 400);
        assert!(report.clearly_safe > 0 && report.clearly_unsafe > 0);
        assert_eq!(report.marginal, 0);
        assert_eq!(report.accept_rate_when_safe(), 1.0);
        assert_eq!(report.false_accept_rate(), 0.0);
    }
}
