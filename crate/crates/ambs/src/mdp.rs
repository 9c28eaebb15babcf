//! Finite labelled MDPs and the policy-induced Markov chains the exact
//! verification oracles operate on.
//!
//! Continuous-state systems never appear here: they expose sampling through
//! the environment and world-model traits instead, and exact measures are
//! defined for finite systems only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{Atoms, LabelSet, SafetyFormula};

/// Row-stochasticity tolerance for transition matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Sample an index from non-negative weights summing to ~1.
///
/// The final index absorbs any residual mass so rounding can never make the
/// draw fall off the end.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    debug_assert!(!weights.is_empty());
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Validate that `row` is a finite, non-negative vector summing to 1
/// within [`ROW_SUM_TOL`].
pub fn validate_distribution(name: &str, row: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::Precondition(format!("{name} has entry {p}, need finite >= 0")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::Precondition(format!("{name} sums to {sum}, need 1 within {ROW_SUM_TOL}")));
    }
    Ok(())
}

/// A finite MDP whose states carry label sets over a shared atom universe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelledMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`, row-stochastic per `(s, a)`.
    transition: Vec<f64>,
    /// Expected immediate reward for `(s, a)`, indexed `s * n_actions + a`.
    reward: Vec<f64>,
    /// Initial state distribution.
    initial: Vec<f64>,
    discount: f64,
    atoms: Atoms,
    labels: Vec<LabelSet>,
}

impl LabelledMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        discount: f64,
        atoms: Atoms,
        labels: Vec<LabelSet>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::config("MDP needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Precondition(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::Precondition(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if initial.len() != n_states {
            return Err(Error::precondition("initial distribution length mismatch"));
        }
        if labels.len() != n_states {
            return Err(Error::precondition("labels length mismatch"));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::Config(format!("discount must be in (0, 1], got {discount}")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let base = (s * n_actions + a) * n_states;
                validate_distribution(&format!("transition row ({s},{a})"), &transition[base..base + n_states])?;
            }
        }
        validate_distribution("initial distribution", &initial)?;
        for l in &labels {
            if l.bits() >> atoms.len() != 0 {
                return Err(Error::precondition("label set uses atoms outside the universe"));
            }
        }
        Ok(LabelledMdp { n_states, n_actions, transition, reward, initial, discount, atoms, labels })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn atoms(&self) -> &Atoms {
        &self.atoms
    }

    pub fn labels(&self, s: usize) -> LabelSet {
        self.labels[s]
    }

    pub fn all_labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s, a), rng)
    }
}

/// A finite labelled Markov chain: an MDP with the action marginalised out
/// by a policy, or any directly-constructed kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteTransitionSystem {
    n_states: usize,
    /// `kernel[s * n_states + s']`, row-stochastic.
    kernel: Vec<f64>,
    atoms: Atoms,
    labels: Vec<LabelSet>,
}

impl FiniteTransitionSystem {
    pub fn new(n_states: usize, kernel: Vec<f64>, atoms: Atoms, labels: Vec<LabelSet>) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::config("transition system needs at least one state"));
        }
        if kernel.len() != n_states * n_states {
            return Err(Error::Precondition(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                n_states * n_states
            )));
        }
        if labels.len() != n_states {
            return Err(Error::precondition("labels length mismatch"));
        }
        for s in 0..n_states {
            validate_distribution(&format!("kernel row {s}"), &kernel[s * n_states..(s + 1) * n_states])?;
        }
        for l in &labels {
            if l.bits() >> atoms.len() != 0 {
                return Err(Error::precondition("label set uses atoms outside the universe"));
            }
        }
        Ok(FiniteTransitionSystem { n_states, kernel, atoms, labels })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn atoms(&self) -> &Atoms {
        &self.atoms
    }

    pub fn labels(&self, s: usize) -> LabelSet {
        self.labels[s]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.kernel[s * self.n_states..(s + 1) * self.n_states]
    }

    pub fn satisfies(&self, s: usize, formula: &SafetyFormula) -> bool {
        formula.eval(self.labels[s])
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s), rng)
    }

    /// Replace the kernel, keeping states and labels. Used by perturbation
    /// families in the validators.
    pub fn with_kernel(&self, kernel: Vec<f64>) -> Result<Self> {
        FiniteTransitionSystem::new(self.n_states, kernel, self.atoms.clone(), self.labels.clone())
    }
}

/// Marginalise the action out of `mdp` under a stationary stochastic policy:
/// `kernel(s' | s) = Σ_a π(a | s) · T(s' | s, a)`.
///
/// `policy(s, out)` must write π(· | s) into `out` (length `n_actions`).
pub fn induce_transition_system(
    mdp: &LabelledMdp,
    mut policy: impl FnMut(usize, &mut [f64]),
) -> Result<FiniteTransitionSystem> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut kernel = vec![0.0; ns * ns];
    let mut probs = vec![0.0; na];
    for s in 0..ns {
        policy(s, &mut probs);
        validate_distribution(&format!("policy row {s}"), &probs)?;
        for a in 0..na {
            let p = probs[a];
            if p == 0.0 {
                continue;
            }
            let row = mdp.row(s, a);
            for s2 in 0..ns {
                kernel[s * ns + s2] += p * row[s2];
            }
        }
    }
    FiniteTransitionSystem::new(ns, kernel, mdp.atoms.clone(), mdp.labels.clone())
}

/// Uniform policy helper for verification substrates.
pub fn uniform_policy(n_actions: usize) -> impl FnMut(usize, &mut [f64]) {
    move |_s, out| {
        let p = 1.0 / n_actions as f64;
        out.fill(p);
    }
}
