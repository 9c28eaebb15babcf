//! Learned dynamics with reward, cost and continuation heads, plus the
//! imagination rollout both the policy optimizer and the shield consume.
//!
//! The cost head always predicts a violation *probability*; the imagined cost
//! is `C·1[prob > 0.5]`. Keeping imagined costs {0, C}-valued is load-bearing:
//! the shield compares discounted trace cost against a threshold that assumes
//! exactly that alphabet, and a soft cost would quietly change which traces
//! count as counter-examples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{LabelSet, SafetyFormula};
use crate::mdp::LabelledMdp;
use crate::measure::kl_divergence;
use crate::trace::Trace;

/// Decision threshold for the binary cost and continuation heads.
pub const HEAD_THRESHOLD: f64 = 0.5;

/// One environment transition as stored in the replay buffer. `cont` is the
/// continuation flag of `next_obs` (0 only when the episode ended there).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition<O, A> {
    pub obs: O,
    pub action: A,
    pub reward: f64,
    pub cost: f64,
    pub cont: f64,
    pub next_obs: O,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer<O, A> {
    data: Vec<Transition<O, A>>,
    capacity: usize,
    next: usize,
}

impl<O: Clone, A: Clone> ReplayBuffer<O, A> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer { data: Vec::new(), capacity, next: 0 })
    }

    pub fn push(&mut self, t: Transition<O, A>) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            // `next` always points at the oldest record once full.
            self.data[self.next] = t;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<O, A>> {
        self.data.iter()
    }

    /// `k` records drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<&Transition<O, A>> {
        assert!(!self.data.is_empty(), "cannot sample from an empty buffer");
        (0..k).map(|_| &self.data[rng.gen_range(0..self.data.len())]).collect()
    }
}

/// What every dynamics model exposes: next-state sampling plus the predictor
/// heads. Models that know the true labelling (the exact wrapper) expose it
/// through `true_labels`, which lets imagined traces carry labels.
pub trait WorldModel {
    type Obs: Clone;
    type Action: Clone;

    fn sample_next<R: Rng + ?Sized>(
        &self,
        obs: &Self::Obs,
        action: &Self::Action,
        rng: &mut R,
    ) -> Self::Obs;
    fn expected_reward(&self, obs: &Self::Obs, action: &Self::Action) -> f64;
    /// Predicted probability that `obs` violates the safety formula.
    fn cost_probability(&self, obs: &Self::Obs) -> f64;
    fn continue_probability(&self, obs: &Self::Obs) -> f64;
    /// The cost magnitude C this model was configured with.
    fn cost_value(&self) -> f64;

    fn predicted_cost(&self, obs: &Self::Obs) -> f64 {
        if self.cost_probability(obs) > HEAD_THRESHOLD {
            self.cost_value()
        } else {
            0.0
        }
    }

    fn true_labels(&self, _obs: &Self::Obs) -> Option<LabelSet> {
        None
    }
}

/// A model the training loop keeps fitting as experience arrives. Models
/// with sufficient statistics absorb transitions one at a time and make
/// `refit` a no-op; batch-fit models do the reverse.
pub trait TrainableModel: WorldModel {
    fn observe(&mut self, t: &Transition<Self::Obs, Self::Action>);
    fn refit(&mut self, buffer: &ReplayBuffer<Self::Obs, Self::Action>) -> Result<()>;
}

impl TrainableModel for TabularModel {
    fn observe(&mut self, t: &Transition<usize, usize>) {
        TabularModel::observe(self, t);
    }

    // The counts already hold everything `fit` would recompute, and unlike
    // a buffer pass they survive FIFO eviction.
    fn refit(&mut self, _buffer: &ReplayBuffer<usize, usize>) -> Result<()> {
        Ok(())
    }
}

impl TrainableModel for LinearGaussianModel {
    fn observe(&mut self, _t: &Transition<[f64; LG_OBS], [f64; LG_ACT]>) {}

    fn refit(&mut self, buffer: &ReplayBuffer<[f64; LG_OBS], [f64; LG_ACT]>) -> Result<()> {
        self.fit(buffer)
    }
}

impl TrainableModel for ExactModel {
    fn observe(&mut self, _t: &Transition<usize, usize>) {}

    fn refit(&mut self, _buffer: &ReplayBuffer<usize, usize>) -> Result<()> {
        Ok(())
    }
}

/// Which policy produced an imagined trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Task,
    Safe,
}

/// An imagination rollout: a trace whose rewards, costs and continuation
/// flags come from the model heads. `trace.states[0]` is the start state.
#[derive(Debug, Clone)]
pub struct ImaginedTrace<S, A> {
    pub trace: Trace<S, A>,
    pub policy: PolicyKind,
}

impl<S, A> ImaginedTrace<S, A> {
    pub fn start(&self) -> &S {
        &self.trace.states[0]
    }
}

/// Roll the policy forward `horizon` steps inside the model. The caller can
/// pin the first action (the shield verifies a specific proposal that way).
/// The start state is assumed live; later flags come from the continuation
/// head. Labels are recorded only when the model knows the true labelling.
pub fn imagine<M, R, F>(
    model: &M,
    mut policy: F,
    kind: PolicyKind,
    start: M::Obs,
    horizon: usize,
    pin_first: Option<M::Action>,
    rng: &mut R,
) -> Result<ImaginedTrace<M::Obs, M::Action>>
where
    M: WorldModel,
    R: Rng + ?Sized,
    F: FnMut(&M::Obs, &mut R) -> M::Action,
{
    if horizon == 0 {
        return Err(Error::precondition("imagination horizon must be at least 1"));
    }
    let mut labels = model.true_labels(&start).map(|l| vec![l]);
    let mut states = vec![start];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = vec![0.0];
    let mut costs = vec![model.predicted_cost(&states[0])];
    let mut continues = vec![1.0];
    for t in 0..horizon {
        let s = states.last().unwrap();
        let a = match (&pin_first, t) {
            (Some(pin), 0) => pin.clone(),
            _ => policy(s, rng),
        };
        let next = model.sample_next(s, &a, rng);
        rewards.push(model.expected_reward(s, &a));
        costs.push(model.predicted_cost(&next));
        continues.push(if model.continue_probability(&next) > HEAD_THRESHOLD { 1.0 } else { 0.0 });
        if let Some(ls) = labels.as_mut() {
            ls.push(model.true_labels(&next).expect("labelled model stays labelled"));
        }
        actions.push(a);
        states.push(next);
    }
    let trace = Trace { states, actions, labels, rewards, costs, continues };
    Ok(ImaginedTrace { trace, policy: kind })
}

// ---------------------------------------------------------------------------
// Tabular model

/// Count-based model over discrete observations. The predictive row is the
/// smoothed empirical distribution `(count + λ_s) / (total + λ_s·|S|)`; the
/// reward, cost and continuation heads are running means (cost keyed by the
/// arrived state, since that is what carries the violation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularModel {
    n_obs: usize,
    n_actions: usize,
    smoothing: f64,
    cost_value: f64,
    /// `counts[(s*n_actions + a)*n_obs + s']`; f64 only to feed arithmetic,
    /// entries are whole numbers.
    counts: Vec<f64>,
    totals: Vec<f64>,
    reward_sum: Vec<f64>,
    /// Per arrived state: how often it was seen, and how often in violation.
    visits: Vec<f64>,
    violations: Vec<f64>,
    continues: Vec<f64>,
}

impl TabularModel {
    pub fn new(n_obs: usize, n_actions: usize, smoothing: f64, cost_value: f64) -> Result<Self> {
        if n_obs == 0 || n_actions == 0 {
            return Err(Error::config("tabular model needs at least one state and one action"));
        }
        if !(smoothing > 0.0) {
            return Err(Error::Config(format!("smoothing pseudo-count must be positive, got {smoothing}")));
        }
        if !(cost_value > 0.0) {
            return Err(Error::Config(format!("cost value must be positive, got {cost_value}")));
        }
        Ok(TabularModel {
            n_obs,
            n_actions,
            smoothing,
            cost_value,
            counts: vec![0.0; n_obs * n_actions * n_obs],
            totals: vec![0.0; n_obs * n_actions],
            reward_sum: vec![0.0; n_obs * n_actions],
            visits: vec![0.0; n_obs],
            violations: vec![0.0; n_obs],
            continues: vec![0.0; n_obs],
        })
    }

    pub fn n_observations(&self) -> usize {
        self.n_obs
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Accumulate one transition. All heads store sums, so accumulation
    /// order never changes a prediction for the {0,1}/{0,C}-valued signals.
    pub fn observe(&mut self, t: &Transition<usize, usize>) {
        let sa = t.obs * self.n_actions + t.action;
        self.counts[sa * self.n_obs + t.next_obs] += 1.0;
        self.totals[sa] += 1.0;
        self.reward_sum[sa] += t.reward;
        self.visits[t.next_obs] += 1.0;
        if t.cost > 0.0 {
            self.violations[t.next_obs] += 1.0;
        }
        self.continues[t.next_obs] += t.cont;
    }

    /// Full refit: drop all counts, then accumulate the whole buffer.
    pub fn fit(&mut self, buffer: &ReplayBuffer<usize, usize>) -> Result<()> {
        if buffer.is_empty() {
            return Err(Error::precondition("cannot fit a model to an empty buffer"));
        }
        for v in self
            .counts
            .iter_mut()
            .chain(&mut self.totals)
            .chain(&mut self.reward_sum)
            .chain(&mut self.visits)
            .chain(&mut self.violations)
            .chain(&mut self.continues)
        {
            *v = 0.0;
        }
        for t in buffer.iter() {
            self.observe(t);
        }
        Ok(())
    }

    /// Smoothed predictive distribution over next observations.
    pub fn predicted_row(&self, obs: usize, action: usize) -> Vec<f64> {
        let sa = obs * self.n_actions + action;
        let denom = self.totals[sa] + self.smoothing * self.n_obs as f64;
        self.counts[sa * self.n_obs..(sa + 1) * self.n_obs]
            .iter()
            .map(|c| (c + self.smoothing) / denom)
            .collect()
    }

    #[cfg(test)]
    fn with_counts(mut self, counts: Vec<f64>) -> Self {
        assert_eq!(counts.len(), self.counts.len());
        for sa in 0..self.n_obs * self.n_actions {
            self.totals[sa] = counts[sa * self.n_obs..(sa + 1) * self.n_obs].iter().sum();
        }
        self.counts = counts;
        self
    }
}

impl WorldModel for TabularModel {
    type Obs = usize;
    type Action = usize;

    fn sample_next<R: Rng + ?Sized>(&self, obs: &usize, action: &usize, rng: &mut R) -> usize {
        let sa = obs * self.n_actions + action;
        let total = self.totals[sa] + self.smoothing * self.n_obs as f64;
        // Walk the unnormalized weights; the final index absorbs rounding.
        let mut u = rng.gen::<f64>() * total;
        for (i, c) in self.counts[sa * self.n_obs..(sa + 1) * self.n_obs].iter().enumerate() {
            u -= c + self.smoothing;
            if u < 0.0 {
                return i;
            }
        }
        self.n_obs - 1
    }

    fn expected_reward(&self, obs: &usize, action: &usize) -> f64 {
        let sa = obs * self.n_actions + action;
        if self.totals[sa] == 0.0 {
            0.0
        } else {
            self.reward_sum[sa] / self.totals[sa]
        }
    }

    fn cost_probability(&self, obs: &usize) -> f64 {
        if self.visits[*obs] == 0.0 {
            0.0
        } else {
            self.violations[*obs] / self.visits[*obs]
        }
    }

    fn continue_probability(&self, obs: &usize) -> f64 {
        if self.visits[*obs] == 0.0 {
            1.0
        } else {
            self.continues[*obs] / self.visits[*obs]
        }
    }

    fn cost_value(&self) -> f64 {
        self.cost_value
    }
}

/// Exact KL between the policy-induced kernels of the learned model and the
/// true MDP, per state: returns `(max, mean)`. `policy` fills π(·|s) like the
/// induced-system helper. Infinities propagate per the KL definition.
pub fn model_kl_diagnostic(
    model: &TabularModel,
    mdp: &LabelledMdp,
    mut policy: impl FnMut(usize, &mut [f64]),
) -> Result<(f64, f64)> {
    if model.n_obs != mdp.n_states() || model.n_actions != mdp.n_actions() {
        return Err(Error::precondition("model and MDP shapes differ"));
    }
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let mut pi = vec![0.0; na];
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for s in 0..ns {
        pi.iter_mut().for_each(|p| *p = 0.0);
        policy(s, &mut pi);
        let mut truth = vec![0.0; ns];
        let mut approx = vec![0.0; ns];
        for a in 0..na {
            if pi[a] == 0.0 {
                continue;
            }
            for (s2, &p) in mdp.row(s, a).iter().enumerate() {
                truth[s2] += pi[a] * p;
            }
            for (s2, p) in model.predicted_row(s, a).into_iter().enumerate() {
                approx[s2] += pi[a] * p;
            }
        }
        let kl = kl_divergence(&truth, &approx)?;
        max = max.max(kl);
        sum += kl;
    }
    Ok((max, sum / ns as f64))
}

// ---------------------------------------------------------------------------
// Exact wrapper

/// The true dynamics presented through the model interface: heads read the
/// MDP directly and labels are available, so imagined traces from this
/// wrapper are statistically indistinguishable from real rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactModel {
    mdp: LabelledMdp,
    formula: SafetyFormula,
    cost_value: f64,
}

impl ExactModel {
    pub fn new(mdp: LabelledMdp, formula_text: &str, cost_value: f64) -> Result<Self> {
        if !(cost_value > 0.0) {
            return Err(Error::Config(format!("cost value must be positive, got {cost_value}")));
        }
        let formula = SafetyFormula::parse(formula_text, mdp.atoms())?;
        Ok(ExactModel { mdp, formula, cost_value })
    }

    pub fn mdp(&self) -> &LabelledMdp {
        &self.mdp
    }
}

impl WorldModel for ExactModel {
    type Obs = usize;
    type Action = usize;

    fn sample_next<R: Rng + ?Sized>(&self, obs: &usize, action: &usize, rng: &mut R) -> usize {
        self.mdp.sample_next(*obs, *action, rng)
    }

    fn expected_reward(&self, obs: &usize, action: &usize) -> f64 {
        self.mdp.reward(*obs, *action)
    }

    fn cost_probability(&self, obs: &usize) -> f64 {
        if self.formula.eval(self.mdp.labels(*obs)) {
            0.0
        } else {
            1.0
        }
    }

    fn continue_probability(&self, _obs: &usize) -> f64 {
        1.0
    }

    fn cost_value(&self) -> f64 {
        self.cost_value
    }

    fn true_labels(&self, obs: &usize) -> Option<LabelSet> {
        Some(self.mdp.labels(*obs))
    }
}

// ---------------------------------------------------------------------------
// Linear-Gaussian model

const LG_OBS: usize = 4;
const LG_ACT: usize = 2;
const LG_IN: usize = LG_OBS + LG_ACT + 1; // inputs plus bias
/// Variances never collapse below this, so sampling stays well-defined.
const LG_NOISE_FLOOR: f64 = 1e-3;

/// Ridge-regressed linear dynamics `s' = W·[s, a, 1] + w` with diagonal
/// Gaussian noise, for the point-mass observation layout `[x, y, gx, gy]`.
/// The cost head is a logistic violation classifier on the observation; the
/// reward head is a linear regression on `[s, a, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    ridge: f64,
    cost_value: f64,
    /// Row-major `LG_OBS x LG_IN`; before the first fit this is the identity
    /// on the state block (the "stay where you are" prior).
    w_dyn: Vec<f64>,
    noise_std: [f64; LG_OBS],
    w_reward: [f64; LG_IN],
    w_cost: [f64; LG_OBS + 1],
    cont_mean: f64,
}

impl LinearGaussianModel {
    pub fn new(ridge: f64, cost_value: f64) -> Result<Self> {
        if !(ridge > 0.0) {
            return Err(Error::Config(format!("ridge regularizer must be positive, got {ridge}")));
        }
        if !(cost_value > 0.0) {
            return Err(Error::Config(format!("cost value must be positive, got {cost_value}")));
        }
        let mut w_dyn = vec![0.0; LG_OBS * LG_IN];
        for d in 0..LG_OBS {
            w_dyn[d * LG_IN + d] = 1.0;
        }
        Ok(LinearGaussianModel {
            ridge,
            cost_value,
            w_dyn,
            noise_std: [LG_NOISE_FLOOR; LG_OBS],
            w_reward: [0.0; LG_IN],
            w_cost: [0.0; LG_OBS + 1],
            cont_mean: 1.0,
        })
    }

    fn features(obs: &[f64; LG_OBS], action: &[f64; LG_ACT]) -> [f64; LG_IN] {
        let mut x = [1.0; LG_IN];
        x[..LG_OBS].copy_from_slice(obs);
        x[LG_OBS..LG_OBS + LG_ACT].copy_from_slice(action);
        x
    }

    pub fn fit(&mut self, buffer: &ReplayBuffer<[f64; LG_OBS], [f64; LG_ACT]>) -> Result<()> {
        use nalgebra::{DMatrix, DVector};
        if buffer.is_empty() {
            return Err(Error::precondition("cannot fit a model to an empty buffer"));
        }
        let n = buffer.len();
        let mut xtx = DMatrix::<f64>::zeros(LG_IN, LG_IN);
        let mut xty = DMatrix::<f64>::zeros(LG_IN, LG_OBS);
        let mut xtr = DVector::<f64>::zeros(LG_IN);
        for t in buffer.iter() {
            let x = Self::features(&t.obs, &t.action);
            for i in 0..LG_IN {
                for j in 0..LG_IN {
                    xtx[(i, j)] += x[i] * x[j];
                }
                for d in 0..LG_OBS {
                    xty[(i, d)] += x[i] * t.next_obs[d];
                }
                xtr[i] += x[i] * t.reward;
            }
        }
        for i in 0..LG_IN {
            xtx[(i, i)] += self.ridge;
        }
        let chol = xtx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::precondition("normal equations are not positive definite"))?;
        let w = chol.solve(&xty); // LG_IN x LG_OBS
        for d in 0..LG_OBS {
            for i in 0..LG_IN {
                self.w_dyn[d * LG_IN + i] = w[(i, d)];
            }
        }
        let wr = chol.solve(&xtr);
        for i in 0..LG_IN {
            self.w_reward[i] = wr[i];
        }

        // Residual variance per dimension, floored.
        let mut sq = [0.0; LG_OBS];
        for t in buffer.iter() {
            let mean = self.mean_next(&t.obs, &t.action);
            for d in 0..LG_OBS {
                let r = t.next_obs[d] - mean[d];
                sq[d] += r * r;
            }
        }
        for d in 0..LG_OBS {
            self.noise_std[d] = (sq[d] / n as f64).sqrt().max(LG_NOISE_FLOOR);
        }

        // Logistic violation head by full-batch gradient descent; the pass
        // count is fixed, so refits are deterministic.
        let mut w = [0.0f64; LG_OBS + 1];
        for _ in 0..200 {
            let mut grad = [0.0f64; LG_OBS + 1];
            for t in buffer.iter() {
                let y = if t.cost > 0.0 { 1.0 } else { 0.0 };
                let mut z = w[LG_OBS];
                for d in 0..LG_OBS {
                    z += w[d] * t.next_obs[d];
                }
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - y;
                for d in 0..LG_OBS {
                    grad[d] += e * t.next_obs[d];
                }
                grad[LG_OBS] += e;
            }
            for d in 0..=LG_OBS {
                w[d] -= 2.0 * grad[d] / n as f64;
            }
        }
        self.w_cost = w;

        self.cont_mean = buffer.iter().map(|t| t.cont).sum::<f64>() / n as f64;
        Ok(())
    }

    pub fn mean_next(&self, obs: &[f64; LG_OBS], action: &[f64; LG_ACT]) -> [f64; LG_OBS] {
        let x = Self::features(obs, action);
        let mut out = [0.0; LG_OBS];
        for d in 0..LG_OBS {
            out[d] = self.w_dyn[d * LG_IN..(d + 1) * LG_IN].iter().zip(&x).map(|(w, x)| w * x).sum();
        }
        out
    }

    pub fn noise_std(&self) -> &[f64; LG_OBS] {
        &self.noise_std
    }

    /// State-block and action-block weights, for inspecting the recovered
    /// dynamics.
    pub fn dynamics_blocks(&self) -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::with_capacity(LG_OBS * LG_OBS);
        let mut b = Vec::with_capacity(LG_OBS * LG_ACT);
        for d in 0..LG_OBS {
            a.extend_from_slice(&self.w_dyn[d * LG_IN..d * LG_IN + LG_OBS]);
            b.extend_from_slice(&self.w_dyn[d * LG_IN + LG_OBS..d * LG_IN + LG_OBS + LG_ACT]);
        }
        (a, b)
    }
}

impl WorldModel for LinearGaussianModel {
    type Obs = [f64; LG_OBS];
    type Action = [f64; LG_ACT];

    fn sample_next<R: Rng + ?Sized>(
        &self,
        obs: &[f64; LG_OBS],
        action: &[f64; LG_ACT],
        rng: &mut R,
    ) -> [f64; LG_OBS] {
        let mut next = self.mean_next(obs, action);
        for d in 0..LG_OBS {
            let noise = rand_distr::Normal::new(0.0, self.noise_std[d]).unwrap();
            next[d] += rng.sample(noise);
        }
        next
    }

    fn expected_reward(&self, obs: &[f64; LG_OBS], action: &[f64; LG_ACT]) -> f64 {
        let x = Self::features(obs, action);
        self.w_reward.iter().zip(&x).map(|(w, x)| w * x).sum()
    }

    fn cost_probability(&self, obs: &[f64; LG_OBS]) -> f64 {
        let mut z = self.w_cost[LG_OBS];
        for d in 0..LG_OBS {
            z += self.w_cost[d] * obs[d];
        }
        1.0 / (1.0 + (-z).exp())
    }

    fn continue_probability(&self, _obs: &[f64; LG_OBS]) -> f64 {
        self.cont_mean
    }

    fn cost_value(&self) -> f64 {
        self.cost_value
    }
}
