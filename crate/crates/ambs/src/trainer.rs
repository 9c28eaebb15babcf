//! The full training loop: fit the world model from replay, update the task
//! policy with the configured gradient, fit the critics toward λ-returns,
//! train the backup policy to minimize cost, then interact with the
//! environment — shielding every action for the AMBS-family methods — and
//! log metrics at a fixed frame cadence.

use std::fmt;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agent::gradients::{
    grad_copt, grad_penl, grad_plpg, grad_safe, grad_vanilla, CoptParams, GradientReport,
};
use crate::agent::lagrangian::{lagrangian_step, LagrangianState, MuRule};
use crate::agent::{
    return_scale, td_lambda, LinearValueFn, Policy, SquashedGaussianPolicy, TabularSoftmaxPolicy,
    TabularValueFn, TwinSafetyCritic, ValueFn,
};
use crate::env::{EnvConfig, Environment, GridHazardEnv, MdpEnv, PointNavEnv, StepResult};
use crate::error::{Error, Result};
use crate::formula::{Atoms, SafetyFormula};
use crate::mdp::LabelledMdp;
use crate::shield::{shield_action, ShieldConfig};
use crate::trace::Trace;
use crate::worldmodel::{
    imagine, model_kl_diagnostic, LinearGaussianModel, PolicyKind, ReplayBuffer, TabularModel,
    TrainableModel, Transition,
};

pub const EXPERIMENT_SCHEMA: &str = "exp-v1";
pub const CHECKPOINT_SCHEMA: &str = "ckpt-v1";
pub const METRICS_SCHEMA: &str = "metrics-v1";
pub const METRICS_HEADER: &str =
    "frames,episode_return,cum_violations,interventions,mu_mean,mu_min,model_kl_max,lambda,mu_k";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "VANILLA")]
    Vanilla,
    /// Shield on, penalty off — the pure shielding ablation.
    #[serde(rename = "AMBS")]
    Ambs,
    #[serde(rename = "AMBS+PENL")]
    AmbsPenl,
    #[serde(rename = "AMBS+PLPG")]
    AmbsPlpg,
    #[serde(rename = "AMBS+COPT")]
    AmbsCopt,
    #[serde(rename = "LAG")]
    Lag,
}

impl Method {
    pub fn shielded(&self) -> bool {
        matches!(self, Method::Ambs | Method::AmbsPenl | Method::AmbsPlpg | Method::AmbsCopt)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "VANILLA",
            Method::Ambs => "AMBS",
            Method::AmbsPenl => "AMBS+PENL",
            Method::AmbsPlpg => "AMBS+PLPG",
            Method::AmbsCopt => "AMBS+COPT",
            Method::Lag => "LAG",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Return discount γ.
    pub gamma: f64,
    /// TD-λ mixing weight.
    pub lambda: f64,
    /// Imagined traces per update.
    pub batch_size: usize,
    /// Imagination depth for policy updates.
    pub horizon: usize,
    pub policy_lr: f64,
    pub safe_policy_lr: f64,
    pub critic_lr: f64,
    /// Penalty weight α for the penalized gradients.
    pub alpha: f64,
    /// Ratio-coefficient clamp for the probabilistic-logic update.
    pub plpg_clamp: f64,
    /// Sigmoid steepness κ for the counter-example update.
    pub copt_kappa: f64,
    pub entropy_bonus: f64,
    pub safe_entropy_bonus: f64,
    /// ρ for the slow critic copies, applied once per update.
    pub slow_critic_fraction: f64,
    pub replay_capacity: usize,
    /// Tabular model pseudo-count.
    pub model_smoothing: f64,
    /// Env steps between update cycles.
    pub interaction_block: usize,
    /// Frames collected (untrained, unshielded) before updates begin.
    pub warmup_frames: usize,
    /// Blocks between batch refits; 0 for incremental-only models.
    pub model_refit_every: usize,
    /// Divide both return streams by a per-batch percentile scale.
    pub normalize_returns: bool,
    /// Spread of the initial policy logits.
    pub policy_init_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.997,
            lambda: 0.95,
            batch_size: 16,
            horizon: 15,
            policy_lr: 0.03,
            safe_policy_lr: 0.03,
            critic_lr: 0.1,
            alpha: 1.0,
            plpg_clamp: 10.0,
            copt_kappa: 10.0,
            entropy_bonus: 3e-3,
            safe_entropy_bonus: 1e-3,
            slow_critic_fraction: 0.02,
            replay_capacity: 100_000,
            model_smoothing: 0.02,
            interaction_block: 16,
            warmup_frames: 512,
            model_refit_every: 0,
            normalize_returns: true,
            policy_init_scale: 0.01,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("need gamma in (0,1] and lambda in [0,1]"));
        }
        if self.batch_size == 0 || self.horizon == 0 || self.interaction_block == 0 {
            return Err(Error::config("batch size, horizon and interaction block must be >= 1"));
        }
        if self.warmup_frames == 0 || self.replay_capacity == 0 {
            return Err(Error::config("warmup and replay capacity must be >= 1"));
        }
        for (name, v) in [
            ("policy_lr", self.policy_lr),
            ("safe_policy_lr", self.safe_policy_lr),
            ("critic_lr", self.critic_lr),
            ("plpg_clamp", self.plpg_clamp),
            ("copt_kappa", self.copt_kappa),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0) || !(self.entropy_bonus >= 0.0) || !(self.safe_entropy_bonus >= 0.0)
        {
            return Err(Error::config("alpha and entropy bonuses must be nonnegative"));
        }
        if !(self.slow_critic_fraction > 0.0 && self.slow_critic_fraction <= 1.0) {
            return Err(Error::config("slow critic fraction must lie in (0,1]"));
        }
        if !(self.model_smoothing > 0.0) || !(self.policy_init_scale >= 0.0) {
            return Err(Error::config("model smoothing must be positive and init scale nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LagrangianSettings {
    pub lambda: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Constraint threshold d on the discounted cost return.
    pub threshold: f64,
    pub mu_cap: f64,
    /// Grow μ with the published max(μ^{1+σ}, 1) rule instead of the capped
    /// one; it jumps a tiny μ straight to 1.
    pub paper_literal_mu: bool,
}

impl Default for LagrangianSettings {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            mu: 5e-9,
            sigma: 1e-6,
            threshold: 1.0,
            mu_cap: 1.0,
            paper_literal_mu: false,
        }
    }
}

impl LagrangianSettings {
    pub fn state(&self) -> Result<LagrangianState> {
        let rule = if self.paper_literal_mu {
            MuRule::PaperLiteral
        } else {
            MuRule::Capped { cap: self.mu_cap }
        };
        LagrangianState::new(self.lambda, self.mu, self.sigma, self.threshold, rule)
    }
}

/// How the master seed splits into per-consumer streams (ChaCha stream
/// numbers). The split is part of the reproducibility contract: it appears
/// in every resolved config, and validation rejects any attempt to change
/// it — a silently different split would break replay without a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedStreams {
    pub env: u64,
    pub policy_init: u64,
    pub batch: u64,
    pub task_imagination: u64,
    pub safe_imagination: u64,
    pub shield: u64,
    pub eval: u64,
}

impl Default for SeedStreams {
    fn default() -> Self {
        Self {
            env: 0,
            policy_init: 1,
            batch: 2,
            task_imagination: 3,
            safe_imagination: 4,
            shield: 5,
            eval: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must be `exp-v1`.
    pub schema: String,
    pub method: Method,
    pub env: EnvConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub shield: ShieldConfig,
    #[serde(default)]
    pub seed_streams: SeedStreams,
    /// Lets a resumed run verify against a snapshot taken mid-stream without
    /// changing method semantics: a shielded method with the shield switched
    /// off must behave exactly like VANILLA from that point on.
    #[serde(default = "default_true")]
    pub shield_active: bool,
    pub total_frames: u64,
    pub seed: u64,
    #[serde(default = "default_metrics_every")]
    pub metrics_every: u64,
    #[serde(default)]
    pub lagrangian: Option<LagrangianSettings>,
}

fn default_true() -> bool {
    true
}

fn default_metrics_every() -> u64 {
    1000
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported experiment schema {:?}, expected {EXPERIMENT_SCHEMA:?}",
                self.schema
            )));
        }
        self.agent.validate()?;
        if self.seed_streams != SeedStreams::default() {
            return Err(Error::config(
                "the seed-stream split is fixed; remove the seed_streams overrides",
            ));
        }
        if self.total_frames == 0 || self.metrics_every == 0 {
            return Err(Error::config("total frames and metrics cadence must be >= 1"));
        }
        match (self.method, &self.lagrangian) {
            (Method::Lag, None) => {
                return Err(Error::config("method LAG needs the lagrangian settings block"))
            }
            (Method::Lag, Some(l)) => drop(l.state()?),
            (_, Some(_)) => {
                return Err(Error::config("lagrangian settings only apply to method LAG"))
            }
            _ => {}
        }
        if self.method.shielded() {
            self.shield.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The canonical on-disk form, every default filled in. Feeding the
    /// result back through `from_json` reproduces the run byte for byte.
    pub fn to_resolved_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub frames: u64,
    /// Mean return of episodes completed this interval; NaN if none ended.
    pub episode_return: f64,
    pub cum_violations: u64,
    pub interventions: u64,
    /// Statistics of the shield estimates this interval; 1.0 when the
    /// shield made no calls.
    pub mu_mean: f64,
    pub mu_min: f64,
    /// Max per-(state, action) KL between the true kernel and the model;
    /// NaN when the environment has no enumerable substrate.
    pub model_kl_max: f64,
    pub lambda: f64,
    pub mu_k: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv<W: IoWrite>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.frames,
                r.episode_return,
                r.cum_violations,
                r.interventions,
                r.mu_mean,
                r.mu_min,
                r.model_kl_max,
                r.lambda,
                r.mu_k
            )?;
        }
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::precondition("empty metrics file"))?;
        if header.trim() != METRICS_HEADER {
            return Err(Error::Precondition(format!(
                "metrics header mismatch: expected {METRICS_SCHEMA} columns, got {header:?}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Precondition(format!("metrics row {i} has {} fields", f.len())));
            }
            let num =
                |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Precondition(format!("row {i}: {e}")));
            let int =
                |s: &str| s.trim().parse::<u64>().map_err(|e| Error::Precondition(format!("row {i}: {e}")));
            rows.push(MetricsRow {
                frames: int(f[0])?,
                episode_return: num(f[1])?,
                cum_violations: int(f[2])?,
                interventions: int(f[3])?,
                mu_mean: num(f[4])?,
                mu_min: num(f[5])?,
                model_kl_max: num(f[6])?,
                lambda: num(f[7])?,
                mu_k: num(f[8])?,
            });
        }
        Ok(MetricsLog { rows })
    }
}

// ---------------------------------------------------------------------------
// RNG streams

/// One ChaCha stream per consumer, split off a single master seed. Keeping
/// the streams separate means toggling one consumer (say, the shield) cannot
/// shift the random numbers any other consumer sees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngSet {
    pub env: ChaCha8Rng,
    pub policy_init: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub task_imagination: ChaCha8Rng,
    pub safe_imagination: ChaCha8Rng,
    pub shield: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl RngSet {
    pub fn from_master(seed: u64) -> Self {
        let split = SeedStreams::default();
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        RngSet {
            env: stream(split.env),
            policy_init: stream(split.policy_init),
            batch: stream(split.batch),
            task_imagination: stream(split.task_imagination),
            safe_imagination: stream(split.safe_imagination),
            shield: stream(split.shield),
            eval: stream(split.eval),
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer

/// Everything the loop trains or consults. The twin cost critic follows the
/// task policy's discounted cost (and feeds the shield bootstrap); the safe
/// cost critic follows the backup policy's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Components<E: Environment, M, P, V> {
    pub env: E,
    pub model: M,
    pub task_policy: P,
    pub safe_policy: P,
    pub task_critic: V,
    pub cost_critic: TwinSafetyCritic<V>,
    pub safe_cost_critic: V,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: u64,
    pub mean_return: f64,
    pub violations_per_episode: f64,
    pub interventions_per_episode: f64,
}

type KlProbe<M, P> = fn(&M, &P, &LabelledMdp) -> Result<(f64, f64)>;

#[derive(Serialize, Deserialize)]
#[serde(bound = "E: Environment + Serialize + DeserializeOwned, \
                 E::Obs: Serialize + DeserializeOwned, \
                 E::Action: Serialize + DeserializeOwned, \
                 M: Serialize + DeserializeOwned, \
                 P: Serialize + DeserializeOwned, \
                 V: Serialize + DeserializeOwned")]
pub struct Trainer<E: Environment, M, P, V> {
    pub cfg: ExperimentConfig,
    pub comps: Components<E, M, P, V>,
    pub replay: ReplayBuffer<E::Obs, E::Action>,
    pub rngs: RngSet,
    pub lagrangian: Option<LagrangianState>,
    pub metrics: MetricsLog,
    pub frames: u64,
    blocks: u64,
    cum_violations: u64,
    interventions: u64,
    cur_obs: E::Obs,
    cur_violation: bool,
    episode_return: f64,
    // Interval accumulators, reset at each metrics row.
    window_returns: Vec<f64>,
    window_mu: Vec<f64>,
    /// Recomputes the model-vs-truth KL for the diagnostic column; not
    /// serialized (function pointers aren't data) — the dispatcher restores
    /// it when loading a checkpoint.
    #[serde(skip)]
    kl_probe: Option<KlProbe<M, P>>,
    diagnostic_mdp: Option<LabelledMdp>,
}

impl<E, M, P, V> Trainer<E, M, P, V>
where
    E: Environment,
    E::Obs: PartialEq,
    M: TrainableModel<Obs = E::Obs, Action = E::Action>,
    P: Policy<Obs = E::Obs, Action = E::Action>,
    V: ValueFn<Obs = E::Obs>,
{
    pub fn new(
        cfg: ExperimentConfig,
        mut comps: Components<E, M, P, V>,
        mut rngs: RngSet,
        diagnostic_mdp: Option<LabelledMdp>,
        kl_probe: Option<KlProbe<M, P>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.method.shielded() && (comps.model.cost_value() - cfg.shield.cost_value).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "shield cost value {} disagrees with the model's {}",
                cfg.shield.cost_value,
                comps.model.cost_value()
            )));
        }
        let lagrangian = match (cfg.method, &cfg.lagrangian) {
            (Method::Lag, Some(settings)) => Some(settings.state()?),
            _ => None,
        };
        let replay = ReplayBuffer::new(cfg.agent.replay_capacity)?;
        let first = comps.env.reset(&mut rngs.env);
        let cum_violations = (first.cost > 0.0) as u64;
        Ok(Trainer {
            cfg,
            replay,
            rngs,
            lagrangian,
            metrics: MetricsLog::default(),
            frames: 0,
            blocks: 0,
            cum_violations,
            interventions: 0,
            cur_violation: first.cost > 0.0,
            cur_obs: first.obs,
            episode_return: 0.0,
            window_returns: Vec::new(),
            window_mu: Vec::new(),
            kl_probe,
            diagnostic_mdp,
            comps,
        })
    }

    /// Run until the frame budget, interleaving update cycles with
    /// interaction blocks. Warmup frames are collected by the untrained,
    /// unshielded policy so the model has data before the first update.
    ///
    /// Updates fire exactly at frame counts that are multiples of the block
    /// size (past warmup), never at "loop iterations": a run resumed from a
    /// mid-block checkpoint then replays the identical schedule.
    pub fn run(&mut self) -> Result<()> {
        let block = self.cfg.agent.interaction_block as u64;
        while self.frames < self.cfg.total_frames {
            if self.frames % block == 0 && self.frames >= self.cfg.agent.warmup_frames as u64 {
                self.update_cycle()?;
            }
            let to_boundary = block - self.frames % block;
            let steps = to_boundary.min(self.cfg.total_frames - self.frames);
            self.interact_steps(steps)?;
        }
        Ok(())
    }

    fn shield_on(&self) -> bool {
        self.cfg.method.shielded()
            && self.cfg.shield_active
            && self.frames >= self.cfg.agent.warmup_frames as u64
    }

    // One model refit + task update + critic fits + backup-policy update.
    fn update_cycle(&mut self) -> Result<()> {
        let a = self.cfg.agent;
        if a.model_refit_every > 0 && self.blocks % a.model_refit_every as u64 == 0 {
            self.comps
                .model
                .refit(&self.replay)
                .map_err(|e| Error::Precondition(format!("model refit: {e}")))?;
        }
        self.blocks += 1;

        let starts: Vec<E::Obs> = self
            .replay
            .sample(a.batch_size, &mut self.rngs.batch)
            .into_iter()
            .map(|t| t.obs.clone())
            .collect();

        self.update_task(&starts).map_err(|e| Error::Precondition(format!("task update: {e}")))?;
        self.update_safe(&starts)
            .map_err(|e| Error::Precondition(format!("backup update: {e}")))?;
        Ok(())
    }

    fn imagine_batch(
        &mut self,
        starts: &[E::Obs],
        kind: PolicyKind,
    ) -> Result<Vec<Trace<E::Obs, E::Action>>> {
        let horizon = self.cfg.agent.horizon;
        let mut traces = Vec::with_capacity(starts.len());
        for start in starts {
            let (policy, rng) = match kind {
                PolicyKind::Task => (&self.comps.task_policy, &mut self.rngs.task_imagination),
                PolicyKind::Safe => (&self.comps.safe_policy, &mut self.rngs.safe_imagination),
            };
            let imagined = imagine(
                &self.comps.model,
                |o: &E::Obs, r: &mut ChaCha8Rng| policy.sample(o, r),
                kind,
                start.clone(),
                horizon,
                None,
                rng,
            )?;
            traces.push(imagined.trace);
        }
        Ok(traces)
    }

    /// λ-returns for every trace: rewards bootstrapped by the slow reward
    /// critic, costs by the min of the twin slow cost critics.
    fn lambda_targets(
        &self,
        traces: &[Trace<E::Obs, E::Action>],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let a = self.cfg.agent;
        let mut reward_targets = Vec::with_capacity(traces.len());
        let mut cost_targets = Vec::with_capacity(traces.len());
        for tr in traces {
            let values: Vec<f64> =
                tr.states.iter().map(|s| self.comps.task_critic.slow_value(s)).collect();
            let cost_values: Vec<f64> =
                tr.states.iter().map(|s| self.comps.cost_critic.bootstrap(s)).collect();
            reward_targets.push(td_lambda(&tr.rewards[1..], &values, a.gamma, a.lambda)?);
            cost_targets.push(td_lambda(&tr.costs[1..], &cost_values, a.gamma, a.lambda)?);
        }
        Ok((reward_targets, cost_targets))
    }

    fn scaled(&self, targets: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
        targets.iter().map(|g| g.iter().map(|v| v / scale).collect()).collect()
    }

    fn update_task(&mut self, starts: &[E::Obs]) -> Result<()> {
        let a = self.cfg.agent;
        let traces = self.imagine_batch(starts, PolicyKind::Task)?;
        let (reward_targets, cost_targets) = self.lambda_targets(&traces)?;

        let scale = if a.normalize_returns {
            let flat: Vec<f64> = reward_targets.iter().flatten().copied().collect();
            return_scale(&flat)
        } else {
            1.0
        };
        let returns = self.scaled(&reward_targets, scale);
        let cost_returns = self.scaled(&cost_targets, scale);

        let report: GradientReport = match self.cfg.method {
            Method::Vanilla | Method::Ambs => {
                grad_vanilla(&self.comps.task_policy, &traces, &returns)?
            }
            Method::AmbsPenl => {
                grad_penl(&self.comps.task_policy, &traces, &returns, &cost_returns, a.alpha)?
            }
            Method::AmbsPlpg => grad_plpg(
                &self.comps.task_policy,
                &traces,
                &returns,
                &cost_returns,
                a.alpha,
                &self.comps.safe_cost_critic,
                a.plpg_clamp,
            )?,
            Method::AmbsCopt => {
                let params = CoptParams {
                    kappa: a.copt_kappa,
                    gamma: a.gamma,
                    horizon: self.cfg.shield.lookahead_horizon,
                    cost_value: self.comps.model.cost_value(),
                };
                grad_copt(&self.comps.task_policy, &traces, &returns, &cost_returns, a.alpha, &params)?
            }
            Method::Lag => {
                // J_C estimated by the batch-mean discounted cost return at
                // the trace starts, in raw cost units.
                let j_cost = cost_targets.iter().map(|g| g[0]).sum::<f64>()
                    / cost_targets.len() as f64;
                let state = self.lagrangian.as_mut().expect("validated at construction");
                let step = lagrangian_step(state, j_cost)?;
                grad_penl(
                    &self.comps.task_policy,
                    &traces,
                    &returns,
                    &cost_returns,
                    step.coefficient,
                )?
            }
        };

        let mut grad = report.grad;
        let inv_n = 1.0 / traces.len() as f64;
        for tr in &traces {
            for s in &tr.states[..tr.len()] {
                self.comps.task_policy.add_grad_entropy(s, a.entropy_bonus * inv_n, &mut grad);
            }
        }
        self.comps.task_policy.apply_ascent(&grad, a.policy_lr);

        for (tr, (rt, ct)) in traces.iter().zip(reward_targets.iter().zip(&cost_targets)) {
            for (t, s) in tr.states.iter().enumerate() {
                self.comps.task_critic.fit_toward(s, rt[t], a.critic_lr);
                self.comps.cost_critic.fit_toward(s, ct[t], a.critic_lr);
            }
        }
        self.comps.task_critic.sync_slow(a.slow_critic_fraction);
        self.comps.cost_critic.sync_slow(a.slow_critic_fraction);
        Ok(())
    }

    fn update_safe(&mut self, starts: &[E::Obs]) -> Result<()> {
        let a = self.cfg.agent;
        let traces = self.imagine_batch(starts, PolicyKind::Safe)?;
        let mut cost_targets = Vec::with_capacity(traces.len());
        for tr in &traces {
            let values: Vec<f64> =
                tr.states.iter().map(|s| self.comps.safe_cost_critic.slow_value(s)).collect();
            cost_targets.push(td_lambda(&tr.costs[1..], &values, a.gamma, a.lambda)?);
        }
        let scale = if a.normalize_returns {
            let flat: Vec<f64> = cost_targets.iter().flatten().copied().collect();
            return_scale(&flat)
        } else {
            1.0
        };
        let cost_returns = self.scaled(&cost_targets, scale);
        let report = grad_safe(&self.comps.safe_policy, &traces, &cost_returns)?;

        // Descend on expected cost, still pushing entropy up.
        let mut grad: Vec<f64> = report.grad.iter().map(|g| -g).collect();
        let inv_n = 1.0 / traces.len() as f64;
        for tr in &traces {
            for s in &tr.states[..tr.len()] {
                self.comps.safe_policy.add_grad_entropy(s, a.safe_entropy_bonus * inv_n, &mut grad);
            }
        }
        self.comps.safe_policy.apply_ascent(&grad, a.safe_policy_lr);

        for (tr, ct) in traces.iter().zip(&cost_targets) {
            for (t, s) in tr.states.iter().enumerate() {
                self.comps.safe_cost_critic.fit_toward(s, ct[t], a.critic_lr);
            }
        }
        self.comps.safe_cost_critic.sync_slow(a.slow_critic_fraction);
        Ok(())
    }

    fn interact_steps(&mut self, n: u64) -> Result<()> {
        let mut steps = 0;
        while steps < n && self.frames < self.cfg.total_frames {
            // Per step, not per block: the gate must depend only on the
            // frame counter for checkpoint resumes to replay exactly.
            let proposal = self.comps.task_policy.sample(&self.cur_obs, &mut self.rngs.env);
            let action = if self.shield_on() {
                let task = &self.comps.task_policy;
                let safe = &self.comps.safe_policy;
                let critic = &self.comps.cost_critic;
                let bootstrap = |o: &E::Obs| critic.bootstrap(o);
                let tail: Option<&dyn Fn(&E::Obs) -> f64> =
                    self.cfg.shield.use_critics.then_some(&bootstrap);
                let decision = shield_action(
                    &self.comps.model,
                    proposal,
                    |o: &E::Obs, r: &mut ChaCha8Rng| task.sample(o, r),
                    |o: &E::Obs, r: &mut ChaCha8Rng| safe.sample(o, r),
                    tail,
                    &self.cfg.shield,
                    &self.cur_obs,
                    self.cur_violation,
                    &mut self.rngs.shield,
                )
                .map_err(|e| Error::Precondition(format!("shield: {e}")))?;
                self.interventions += decision.overridden as u64;
                self.window_mu.push(decision.mu_tilde);
                decision.action
            } else {
                proposal
            };
            let sr: StepResult<E::Obs> = self
                .comps
                .env
                .step(&action, &mut self.rngs.env)
                .map_err(|e| Error::Precondition(format!("environment step: {e}")))?;
            self.frames += 1;
            steps += 1;
            self.episode_return += sr.reward;
            self.cum_violations += (sr.cost > 0.0) as u64;
            let transition = Transition {
                obs: self.cur_obs.clone(),
                action,
                reward: sr.reward,
                cost: sr.cost,
                cont: if sr.terminated { 0.0 } else { 1.0 },
                next_obs: sr.obs.clone(),
            };
            self.comps.model.observe(&transition);
            self.replay.push(transition);
            self.cur_obs = sr.obs;
            self.cur_violation = sr.cost > 0.0;
            if sr.terminated {
                self.window_returns.push(self.episode_return);
                self.episode_return = 0.0;
                let first = self.comps.env.reset(&mut self.rngs.env);
                self.cum_violations += (first.cost > 0.0) as u64;
                self.cur_violation = first.cost > 0.0;
                self.cur_obs = first.obs;
            }
            if self.frames % self.cfg.metrics_every == 0 || self.frames == self.cfg.total_frames {
                self.emit_metrics_row()?;
            }
        }
        Ok(())
    }

    fn emit_metrics_row(&mut self) -> Result<()> {
        let episode_return = if self.window_returns.is_empty() {
            f64::NAN
        } else {
            self.window_returns.iter().sum::<f64>() / self.window_returns.len() as f64
        };
        let (mu_mean, mu_min) = if self.window_mu.is_empty() {
            (1.0, 1.0)
        } else {
            (
                self.window_mu.iter().sum::<f64>() / self.window_mu.len() as f64,
                self.window_mu.iter().copied().fold(f64::INFINITY, f64::min),
            )
        };
        let model_kl_max = match (&self.kl_probe, &self.diagnostic_mdp) {
            (Some(probe), Some(mdp)) => {
                probe(&self.comps.model, &self.comps.task_policy, mdp)
                    .map_err(|e| Error::Precondition(format!("model diagnostic: {e}")))?
                    .0
            }
            _ => f64::NAN,
        };
        let (lambda, mu_k) = self.lagrangian.map_or((0.0, 0.0), |l| (l.lambda, l.mu));
        self.metrics.rows.push(MetricsRow {
            frames: self.frames,
            episode_return,
            cum_violations: self.cum_violations,
            interventions: self.interventions,
            mu_mean,
            mu_min,
            model_kl_max,
            lambda,
            mu_k,
        });
        self.window_returns.clear();
        self.window_mu.clear();
        Ok(())
    }

    /// Frozen-policy rollouts on the real environment; the shield stays in
    /// the loop for shielded methods (it is part of the deployed agent, not
    /// a training aid). Draws only from the evaluation stream.
    pub fn evaluate(&mut self, episodes: u64) -> Result<EvalSummary> {
        let shield_on = self.cfg.method.shielded() && self.cfg.shield_active;
        let mut total_return = 0.0;
        let mut violations = 0u64;
        let mut overrides = 0u64;
        for _ in 0..episodes {
            let mut sr = self.comps.env.reset(&mut self.rngs.eval);
            violations += (sr.cost > 0.0) as u64;
            let mut cur_violation = sr.cost > 0.0;
            while !sr.terminated {
                let proposal = self.comps.task_policy.sample(&sr.obs, &mut self.rngs.eval);
                let action = if shield_on {
                    let task = &self.comps.task_policy;
                    let safe = &self.comps.safe_policy;
                    let critic = &self.comps.cost_critic;
                    let bootstrap = |o: &E::Obs| critic.bootstrap(o);
                    let tail: Option<&dyn Fn(&E::Obs) -> f64> =
                        self.cfg.shield.use_critics.then_some(&bootstrap);
                    let decision = shield_action(
                        &self.comps.model,
                        proposal,
                        |o: &E::Obs, r: &mut ChaCha8Rng| task.sample(o, r),
                        |o: &E::Obs, r: &mut ChaCha8Rng| safe.sample(o, r),
                        tail,
                        &self.cfg.shield,
                        &sr.obs,
                        cur_violation,
                        &mut self.rngs.eval,
                    )?;
                    overrides += decision.overridden as u64;
                    decision.action
                } else {
                    proposal
                };
                sr = self.comps.env.step(&action, &mut self.rngs.eval)?;
                total_return += sr.reward;
                violations += (sr.cost > 0.0) as u64;
                cur_violation = sr.cost > 0.0;
            }
        }
        Ok(EvalSummary {
            episodes,
            mean_return: total_return / episodes as f64,
            violations_per_episode: violations as f64 / episodes as f64,
            interventions_per_episode: overrides as f64 / episodes as f64,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub fn save_checkpoint<E, M, P, V>(trainer: &Trainer<E, M, P, V>, path: &Path) -> Result<()>
where
    E: Environment + Serialize + DeserializeOwned,
    E::Obs: Serialize + DeserializeOwned,
    E::Action: Serialize + DeserializeOwned,
    M: Serialize + DeserializeOwned,
    P: Serialize + DeserializeOwned,
    V: Serialize + DeserializeOwned,
{
    let doc = serde_json::json!({
        "schema": CHECKPOINT_SCHEMA,
        "state": serde_json::to_value(trainer)?,
    });
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_checkpoint<E, M, P, V>(
    path: &Path,
    kl_probe: Option<KlProbe<M, P>>,
) -> Result<Trainer<E, M, P, V>>
where
    E: Environment + Serialize + DeserializeOwned,
    E::Obs: Serialize + DeserializeOwned,
    E::Action: Serialize + DeserializeOwned,
    M: Serialize + DeserializeOwned,
    P: Serialize + DeserializeOwned,
    V: Serialize + DeserializeOwned,
{
    let text = std::fs::read_to_string(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    if doc.get("schema").and_then(|v| v.as_str()) != Some(CHECKPOINT_SCHEMA) {
        return Err(Error::Config(format!(
            "checkpoint schema mismatch in {}, expected {CHECKPOINT_SCHEMA:?}",
            path.display()
        )));
    }
    let state = doc
        .get("state")
        .cloned()
        .ok_or_else(|| Error::config("checkpoint file has no state object"))?;
    let mut trainer: Trainer<E, M, P, V> = serde_json::from_value(state)?;
    trainer.kl_probe = kl_probe;
    Ok(trainer)
}

// ---------------------------------------------------------------------------
// Concrete assemblies

/// The enumerable environments, behind one type so checkpoints and the CLI
/// can treat them uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DiscreteEnv {
    Grid(GridHazardEnv),
    Mdp(MdpEnv),
}

impl Environment for DiscreteEnv {
    type Obs = usize;
    type Action = usize;

    fn reset<R: rand::Rng + ?Sized>(&mut self, rng: &mut R) -> StepResult<usize> {
        match self {
            DiscreteEnv::Grid(e) => e.reset(rng),
            DiscreteEnv::Mdp(e) => e.reset(rng),
        }
    }

    fn step<R: rand::Rng + ?Sized>(&mut self, action: &usize, rng: &mut R) -> Result<StepResult<usize>> {
        match self {
            DiscreteEnv::Grid(e) => e.step(action, rng),
            DiscreteEnv::Mdp(e) => e.step(action, rng),
        }
    }

    fn atoms(&self) -> &Atoms {
        match self {
            DiscreteEnv::Grid(e) => e.atoms(),
            DiscreteEnv::Mdp(e) => e.atoms(),
        }
    }

    fn formula(&self) -> &SafetyFormula {
        match self {
            DiscreteEnv::Grid(e) => e.formula(),
            DiscreteEnv::Mdp(e) => e.formula(),
        }
    }

    fn cost_value(&self) -> f64 {
        match self {
            DiscreteEnv::Grid(e) => e.cost_value(),
            DiscreteEnv::Mdp(e) => e.cost_value(),
        }
    }
}

impl DiscreteEnv {
    pub fn n_observations(&self) -> usize {
        match self {
            DiscreteEnv::Grid(e) => e.n_observations(),
            DiscreteEnv::Mdp(e) => e.n_observations(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            DiscreteEnv::Grid(e) => e.n_actions(),
            DiscreteEnv::Mdp(e) => e.n_actions(),
        }
    }

    pub fn diagnostic_mdp(&self, discount: f64) -> Result<LabelledMdp> {
        match self {
            DiscreteEnv::Grid(e) => e.to_labelled_mdp(discount),
            DiscreteEnv::Mdp(e) => Ok(e.mdp().clone()),
        }
    }
}

pub type DiscreteTrainer = Trainer<DiscreteEnv, TabularModel, TabularSoftmaxPolicy, TabularValueFn>;
pub type ContinuousTrainer =
    Trainer<PointNavEnv, LinearGaussianModel, SquashedGaussianPolicy, LinearValueFn>;

fn tabular_kl_probe(
    model: &TabularModel,
    policy: &TabularSoftmaxPolicy,
    mdp: &LabelledMdp,
) -> Result<(f64, f64)> {
    model_kl_diagnostic(model, mdp, |s, w| w.copy_from_slice(&policy.probs(s)))
}

/// Spread of initial continuous-policy weights and its exploration noise.
const GAUSSIAN_INIT_LOG_STD: f64 = -0.5;
const LINEAR_MODEL_RIDGE: f64 = 1e-3;

/// A training run over either backend, dispatched from the env config.
pub enum AnyTrainer {
    Discrete(Box<DiscreteTrainer>),
    Continuous(Box<ContinuousTrainer>),
}

impl AnyTrainer {
    pub fn build(mut cfg: ExperimentConfig) -> Result<AnyTrainer> {
        cfg.validate()?;
        let mut rngs = RngSet::from_master(cfg.seed);
        match cfg.env.clone() {
            EnvConfig::PointNav { .. } => {
                let env = cfg.env.build_point()?;
                let model = LinearGaussianModel::new(LINEAR_MODEL_RIDGE, env.cost_value())?;
                let task_policy = SquashedGaussianPolicy::new(GAUSSIAN_INIT_LOG_STD);
                let safe_policy = SquashedGaussianPolicy::new(GAUSSIAN_INIT_LOG_STD);
                let comps = Components {
                    env,
                    model,
                    task_policy,
                    safe_policy,
                    task_critic: LinearValueFn::new(),
                    cost_critic: TwinSafetyCritic::new(
                        LinearValueFn::with_random_init(0.01, &mut rngs.policy_init),
                        LinearValueFn::with_random_init(0.01, &mut rngs.policy_init),
                    ),
                    safe_cost_critic: LinearValueFn::new(),
                };
                if cfg.agent.model_refit_every == 0 {
                    // The linear-Gaussian fit is batch-only; refitting every
                    // 64 blocks keeps the cost near-linear in frames.
                    cfg.agent.model_refit_every = 64;
                }
                Ok(AnyTrainer::Continuous(Box::new(Trainer::new(cfg, comps, rngs, None, None)?)))
            }
            env_cfg => {
                let env = match env_cfg {
                    EnvConfig::GridHazard { .. } => DiscreteEnv::Grid(cfg.env.build_grid()?),
                    EnvConfig::LeakyChain { .. } => DiscreteEnv::Mdp(cfg.env.build_chain()?),
                    EnvConfig::PointNav { .. } => unreachable!(),
                };
                let (n_obs, n_actions) = (env.n_observations(), env.n_actions());
                let diagnostic = env.diagnostic_mdp(cfg.agent.gamma)?;
                let model =
                    TabularModel::new(n_obs, n_actions, cfg.agent.model_smoothing, env.cost_value())?;
                let task_policy = TabularSoftmaxPolicy::with_random_init(
                    n_obs,
                    n_actions,
                    cfg.agent.policy_init_scale,
                    &mut rngs.policy_init,
                )?;
                let safe_policy = TabularSoftmaxPolicy::with_random_init(
                    n_obs,
                    n_actions,
                    cfg.agent.policy_init_scale,
                    &mut rngs.policy_init,
                )?;
                let comps = Components {
                    env,
                    model,
                    task_policy,
                    safe_policy,
                    task_critic: TabularValueFn::new(n_obs),
                    cost_critic: TwinSafetyCritic::new(
                        TabularValueFn::with_random_init(n_obs, 0.01, &mut rngs.policy_init),
                        TabularValueFn::with_random_init(n_obs, 0.01, &mut rngs.policy_init),
                    ),
                    safe_cost_critic: TabularValueFn::new(n_obs),
                };
                Ok(AnyTrainer::Discrete(Box::new(Trainer::new(
                    cfg,
                    comps,
                    rngs,
                    Some(diagnostic),
                    Some(tabular_kl_probe),
                )?)))
            }
        }
    }

    pub fn run(&mut self) -> Result<()> {
        match self {
            AnyTrainer::Discrete(t) => t.run(),
            AnyTrainer::Continuous(t) => t.run(),
        }
    }

    pub fn evaluate(&mut self, episodes: u64) -> Result<EvalSummary> {
        match self {
            AnyTrainer::Discrete(t) => t.evaluate(episodes),
            AnyTrainer::Continuous(t) => t.evaluate(episodes),
        }
    }

    pub fn metrics(&self) -> &MetricsLog {
        match self {
            AnyTrainer::Discrete(t) => &t.metrics,
            AnyTrainer::Continuous(t) => &t.metrics,
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        match self {
            AnyTrainer::Discrete(t) => &t.cfg,
            AnyTrainer::Continuous(t) => &t.cfg,
        }
    }

    pub fn frames(&self) -> u64 {
        match self {
            AnyTrainer::Discrete(t) => t.frames,
            AnyTrainer::Continuous(t) => t.frames,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyTrainer::Discrete(t) => save_checkpoint(t, path),
            AnyTrainer::Continuous(t) => save_checkpoint(t, path),
        }
    }

    /// Restore from a checkpoint. `cfg_override` swaps the configuration
    /// (e.g. a longer frame budget, or the shield toggled off) — the
    /// environment family must stay the same.
    pub fn load(path: &Path, cfg_override: Option<ExperimentConfig>) -> Result<AnyTrainer> {
        let text = std::fs::read_to_string(path)?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        let env_kind = doc
            .pointer("/state/cfg/env/type")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::config("checkpoint does not record its environment type"))?
            .to_string();
        let mut loaded = if env_kind == "point_nav" {
            AnyTrainer::Continuous(Box::new(load_checkpoint(path, None)?))
        } else {
            AnyTrainer::Discrete(Box::new(load_checkpoint(path, Some(tabular_kl_probe))?))
        };
        if let Some(cfg) = cfg_override {
            cfg.validate()?;
            match &mut loaded {
                AnyTrainer::Discrete(t) => {
                    if !matches!(cfg.env, EnvConfig::GridHazard { .. } | EnvConfig::LeakyChain { .. })
                    {
                        return Err(Error::config("checkpoint env family does not match the config"));
                    }
                    t.lagrangian = match (cfg.method, &cfg.lagrangian) {
                        (Method::Lag, Some(s)) => t.lagrangian.or(Some(s.state()?)),
                        _ => None,
                    };
                    t.cfg = cfg;
                }
                AnyTrainer::Continuous(t) => {
                    if !matches!(cfg.env, EnvConfig::PointNav { .. }) {
                        return Err(Error::config("checkpoint env family does not match the config"));
                    }
                    t.lagrangian = match (cfg.method, &cfg.lagrangian) {
                        (Method::Lag, Some(s)) => t.lagrangian.or(Some(s.state()?)),
                        _ => None,
                    };
                    t.cfg = cfg;
                }
            }
        }
        Ok(loaded)
    }
}

/// One complete run as the CLI performs it: the output directory receives
/// the exact resolved config (feeding it back reproduces every byte), the
/// metrics CSV, and a final checkpoint.
pub fn run_experiment(cfg: ExperimentConfig, out_dir: &Path) -> Result<AnyTrainer> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("resolved.json"), cfg.to_resolved_json()?)?;
    let mut trainer = AnyTrainer::build(cfg)?;
    trainer.run()?;
    let mut csv = Vec::new();
    trainer.metrics().write_csv(&mut csv)?;
    std::fs::write(out_dir.join("metrics.csv"), csv)?;
    trainer.save(&out_dir.join("checkpoint.json"))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_config(method: Method, total: u64) -> ExperimentConfig {
        ExperimentConfig {
            schema: EXPERIMENT_SCHEMA.into(),
            method,
            env: EnvConfig::LeakyChain {
                states: 6,
                leak: 0.05,
                episode_limit: 50,
                cost_value: 10.0,
            },
            agent: AgentConfig {
                warmup_frames: 64,
                batch_size: 4,
                horizon: 5,
                ..AgentConfig::default()
            },
            shield: ShieldConfig {
                n_samples: 8,
                horizon: 5,
                lookahead_horizon: 9,
                ..ShieldConfig::default()
            },
            seed_streams: SeedStreams::default(),
            shield_active: true,
            total_frames: total,
            seed: 11,
            metrics_every: 100,
            lagrangian: if method == Method::Lag { Some(LagrangianSettings::default()) } else { None },
        }
    }

    #[test]
    fn method_names_round_trip() {
        for (m, s) in [
            (Method::Vanilla, "\"VANILLA\""),
            (Method::Ambs, "\"AMBS\""),
            (Method::AmbsPenl, "\"AMBS+PENL\""),
            (Method::AmbsPlpg, "\"AMBS+PLPG\""),
            (Method::AmbsCopt, "\"AMBS+COPT\""),
            (Method::Lag, "\"LAG\""),
        ] {
            assert_eq!(serde_json::to_string(&m).unwrap(), s);
            assert_eq!(serde_json::from_str::<Method>(s).unwrap(), m);
            assert_eq!(format!("\"{m}\""), s);
        }
    }

    #[test]
    fn config_schema_is_strict() {
        let cfg = chain_config(Method::Vanilla, 100);
        let json = serde_json::to_string(&cfg).unwrap();
        ExperimentConfig::from_json(&json).unwrap();

        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["schema"] = "exp-v0".into();
        assert!(ExperimentConfig::from_json(&doc.to_string()).is_err());

        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["agent"]["unknown_knob"] = 3.0.into();
        assert!(serde_json::from_str::<ExperimentConfig>(&doc.to_string()).is_err());

        // LAG needs its settings block; other methods refuse one.
        let mut lag = chain_config(Method::Lag, 100);
        lag.lagrangian = None;
        assert!(lag.validate().is_err());
        let mut vanilla = chain_config(Method::Vanilla, 100);
        vanilla.lagrangian = Some(LagrangianSettings::default());
        assert!(vanilla.validate().is_err());
    }

    #[test]
    fn metrics_csv_round_trips() {
        let log = MetricsLog {
            rows: vec![
                MetricsRow {
                    frames: 100,
                    episode_return: 1.5,
                    cum_violations: 3,
                    interventions: 0,
                    mu_mean: 1.0,
                    mu_min: 1.0,
                    model_kl_max: f64::NAN,
                    lambda: 0.0,
                    mu_k: 0.0,
                },
                MetricsRow {
                    frames: 200,
                    episode_return: f64::NAN,
                    cum_violations: 5,
                    interventions: 2,
                    mu_mean: 0.97,
                    mu_min: 0.5,
                    model_kl_max: 0.031,
                    lambda: 0.01,
                    mu_k: 5e-9,
                },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        let back = MetricsLog::parse_csv(&text).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].cum_violations, 5);
        assert!(back.rows[0].model_kl_max.is_nan());
        assert!(back.rows[1].episode_return.is_nan());
        assert_eq!(back.rows[1].mu_k, 5e-9);
        assert!(MetricsLog::parse_csv("frames,other\n").is_err());
    }

    #[test]
    fn rng_streams_are_distinct_and_stable() {
        use rand::RngCore;
        let mut a = RngSet::from_master(7);
        let mut b = RngSet::from_master(7);
        assert_eq!(a.env.next_u64(), b.env.next_u64());
        assert_eq!(a.shield.next_u64(), b.shield.next_u64());
        let mut c = RngSet::from_master(7);
        let vals = [
            c.env.next_u64(),
            c.policy_init.next_u64(),
            c.batch.next_u64(),
            c.task_imagination.next_u64(),
            c.safe_imagination.next_u64(),
            c.shield.next_u64(),
            c.eval.next_u64(),
        ];
        let mut sorted = vals.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), vals.len(), "streams must not collide");
    }

    #[test]
    fn vanilla_chain_run_produces_metrics() {
        let mut t = AnyTrainer::build(chain_config(Method::Vanilla, 600)).unwrap();
        t.run().unwrap();
        assert_eq!(t.frames(), 600);
        let rows = &t.metrics().rows;
        assert_eq!(rows.len(), 6);
        assert!(rows.windows(2).all(|w| w[0].cum_violations <= w[1].cum_violations));
        assert!(rows.iter().all(|r| r.interventions == 0 && r.mu_mean == 1.0));
        assert!(rows.iter().all(|r| r.model_kl_max.is_finite()), "diagnostic wired");
        assert!(rows.last().unwrap().model_kl_max < rows[0].model_kl_max);
    }

    #[test]
    fn shielded_chain_run_intervenes_less_than_random() {
        let mut t = AnyTrainer::build(chain_config(Method::Ambs, 600)).unwrap();
        t.run().unwrap();
        let rows = &t.metrics().rows;
        assert!(rows.last().unwrap().interventions > 0 || rows.last().unwrap().cum_violations > 0);
        assert!(rows.iter().any(|r| r.mu_mean < 1.0), "shield estimates recorded");
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let render = |cfg: ExperimentConfig| {
            let mut t = AnyTrainer::build(cfg).unwrap();
            t.run().unwrap();
            let mut buf = Vec::new();
            t.metrics().write_csv(&mut buf).unwrap();
            buf
        };
        let a = render(chain_config(Method::AmbsPenl, 400));
        let b = render(chain_config(Method::AmbsPenl, 400));
        assert_eq!(a, b);
        let c = render(chain_config(Method::AmbsPlpg, 400));
        assert_ne!(a, c);
    }

    #[test]
    fn lag_run_updates_multipliers() {
        let mut cfg = chain_config(Method::Lag, 600);
        cfg.lagrangian = Some(LagrangianSettings { paper_literal_mu: true, ..Default::default() });
        let mut t = AnyTrainer::build(cfg).unwrap();
        t.run().unwrap();
        let last = t.metrics().rows.last().unwrap();
        assert_eq!(last.mu_k, 1.0, "paper-literal growth jumps mu to 1");
    }

    #[test]
    fn shield_cost_mismatch_is_rejected() {
        let mut cfg = chain_config(Method::Ambs, 100);
        cfg.shield.cost_value = 3.0; // env emits 10
        assert!(AnyTrainer::build(cfg).is_err());
    }

    #[test]
    fn every_method_smokes_on_the_chain() {
        for method in [
            Method::Vanilla,
            Method::Ambs,
            Method::AmbsPenl,
            Method::AmbsPlpg,
            Method::AmbsCopt,
            Method::Lag,
        ] {
            let mut t = AnyTrainer::build(chain_config(method, 200)).unwrap();
            t.run().unwrap();
            assert_eq!(t.frames(), 200, "{method}");
            let eval = t.evaluate(3).unwrap();
            assert!(eval.mean_return.is_finite(), "{method}");
        }
    }

    #[test]
    fn point_nav_smoke_run() {
        let cfg = ExperimentConfig {
            schema: EXPERIMENT_SCHEMA.into(),
            method: Method::Vanilla,
            env: EnvConfig::PointNav {
                half_width: 2.0,
                hazards: vec![],
                vases: vec![],
                goal_radius: 0.3,
                max_speed: 0.25,
                episode_limit: 40,
                obs_noise: 0.0,
                cost_value: 10.0,
            },
            agent: AgentConfig {
                warmup_frames: 128,
                batch_size: 4,
                horizon: 5,
                ..AgentConfig::default()
            },
            shield: ShieldConfig::default(),
            seed_streams: SeedStreams::default(),
            shield_active: true,
            total_frames: 400,
            seed: 3,
            metrics_every: 100,
            lagrangian: None,
        };
        let mut t = AnyTrainer::build(cfg).unwrap();
        t.run().unwrap();
        let rows = &t.metrics().rows;
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.model_kl_max.is_nan()), "no enumerable substrate");
        assert_eq!(rows.last().unwrap().cum_violations, 0, "hazard-free arena");
    }

    #[test]
    fn checkpoint_resume_continues_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");

        let mut full = AnyTrainer::build(chain_config(Method::AmbsPenl, 600)).unwrap();
        full.run().unwrap();
        let mut want = Vec::new();
        full.metrics().write_csv(&mut want).unwrap();

        let mut half = AnyTrainer::build(chain_config(Method::AmbsPenl, 300)).unwrap();
        half.run().unwrap();
        half.save(&path).unwrap();
        let mut resumed = AnyTrainer::load(&path, Some(chain_config(Method::AmbsPenl, 600))).unwrap();
        resumed.run().unwrap();
        let mut got = Vec::new();
        resumed.metrics().write_csv(&mut got).unwrap();
        assert_eq!(want, got, "resume must be invisible in the metrics");
    }
}
