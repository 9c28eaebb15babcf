//! Desk-scale labelled environments: a slip grid with hazard cells, a
//! continuous point-mass arena with hazard circles, and a thin wrapper that
//! runs any [`LabelledMdp`] as an environment.
//!
//! Conventions shared by every environment:
//! - labels are a pure function of the (full) environment state, so replaying
//!   a recorded state sequence reproduces them exactly;
//! - a state that violates the safety formula emits one cost of `cost_value`
//!   per step spent there;
//! - capturing a goal yields +1 reward and respawns the goal elsewhere;
//!   episodes end only at the step limit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{Atoms, LabelSet, SafetyFormula};
use crate::mdp::LabelledMdp;
use crate::trace::step_cost;

/// What an environment hands back on every reset and step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResult<O> {
    pub obs: O,
    pub reward: f64,
    pub labels: LabelSet,
    /// `step_cost(labels, Ψ, C)` — zero exactly when the labels satisfy Ψ.
    pub cost: f64,
    pub terminated: bool,
}

pub trait Environment {
    type Obs: Clone;
    type Action: Clone;

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepResult<Self::Obs>;
    fn step<R: Rng + ?Sized>(&mut self, action: &Self::Action, rng: &mut R)
        -> Result<StepResult<Self::Obs>>;
    fn atoms(&self) -> &Atoms;
    fn formula(&self) -> &SafetyFormula;
    /// Cost emitted per violating step; the shield must be configured with
    /// the same value.
    fn cost_value(&self) -> f64;
}

// ---------------------------------------------------------------------------
// Grid

/// What the grid exposes as its observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridObs {
    /// Cell index only. The exact enumeration substrate: labels, transitions
    /// and the induced MDP are all functions of the cell.
    Position,
    /// `cell * n_goals + active_goal`, so the agent can tell goals apart.
    PositionGoal,
}

/// Moves are 0=east, 1=west, 2=north, 3=south. A slipping move goes to one of
/// the two perpendicular directions with probability `slip/2` each. Moves off
/// the edge stay in place.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridHazardEnv {
    width: usize,
    height: usize,
    hazards: Vec<usize>,
    /// Candidate goal cells; exactly one is active at a time.
    goals: Vec<usize>,
    vases: Vec<usize>,
    starts: Vec<usize>,
    slip: f64,
    episode_limit: usize,
    obs_mode: GridObs,
    cost_value: f64,
    atoms: Atoms,
    formula: SafetyFormula,
    pos: usize,
    active_goal: usize,
    steps: usize,
}

const GRID_MOVES: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

impl GridHazardEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        hazards: Vec<usize>,
        goals: Vec<usize>,
        vases: Vec<usize>,
        starts: Vec<usize>,
        slip: f64,
        episode_limit: usize,
        obs_mode: GridObs,
        cost_value: f64,
    ) -> Result<Self> {
        let n_cells = width * height;
        if n_cells == 0 {
            return Err(Error::config("grid must have at least one cell"));
        }
        if !(0.0..1.0).contains(&slip) {
            return Err(Error::Config(format!("slip must be in [0, 1), got {slip}")));
        }
        if episode_limit == 0 {
            return Err(Error::config("episode limit must be positive"));
        }
        if !(cost_value > 0.0) {
            return Err(Error::Config(format!("cost value must be positive, got {cost_value}")));
        }
        if goals.is_empty() || starts.is_empty() {
            return Err(Error::config("need at least one goal cell and one start cell"));
        }
        for (name, cells) in
            [("hazard", &hazards), ("goal", &goals), ("vase", &vases), ("start", &starts)]
        {
            if let Some(c) = cells.iter().find(|&&c| c >= n_cells) {
                return Err(Error::Config(format!("{name} cell {c} outside {width}x{height} grid")));
            }
        }
        for &g in &goals {
            if hazards.contains(&g) || vases.contains(&g) {
                return Err(Error::Config(format!("goal cell {g} overlaps an obstacle")));
            }
        }
        for &s in &starts {
            if hazards.contains(&s) || vases.contains(&s) {
                return Err(Error::Config(format!("start cell {s} overlaps an obstacle")));
            }
        }
        let (atoms, formula) = if vases.is_empty() {
            let atoms = Atoms::new(&["hazard", "goal"])?;
            let formula = SafetyFormula::parse("!hazard", &atoms)?;
            (atoms, formula)
        } else {
            let atoms = Atoms::new(&["hazard", "goal", "collision"])?;
            let formula = SafetyFormula::parse("!hazard & !collision", &atoms)?;
            (atoms, formula)
        };
        let pos = starts[0];
        Ok(GridHazardEnv {
            width,
            height,
            hazards,
            goals,
            vases,
            starts,
            slip,
            episode_limit,
            obs_mode,
            cost_value,
            atoms,
            formula,
            pos,
            active_goal: 0,
            steps: 0,
        })
    }

    /// The default geometry: an 8x8 grid with a six-cell hazard belt across
    /// row 4 (x = 2..8), goals on both sides of the belt, and a two-cell-wide
    /// safe corridor along the left edge. Crossing the belt is the short way
    /// between the goals; the corridor is the safe detour.
    pub fn default_layout(slip: f64, episode_limit: usize, cost_value: f64) -> Result<Self> {
        let w = 8;
        let cell = |x: usize, y: usize| y * w + x;
        GridHazardEnv::new(
            w,
            8,
            (2..8).map(|x| cell(x, 4)).collect(),
            vec![cell(6, 1), cell(6, 7)],
            vec![],
            vec![cell(0, 0)],
            slip,
            episode_limit,
            GridObs::PositionGoal,
            cost_value,
        )
    }

    /// Same grid with vase cells added: contact emits `collision`, and the
    /// safety formula becomes `!hazard & !collision`.
    pub fn two_atom_variant(&self, vases: Vec<usize>) -> Result<Self> {
        GridHazardEnv::new(
            self.width,
            self.height,
            self.hazards.clone(),
            self.goals.clone(),
            vases,
            self.starts.clone(),
            self.slip,
            self.episode_limit,
            self.obs_mode,
            self.cost_value,
        )
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn n_goals(&self) -> usize {
        self.goals.len()
    }

    pub fn n_observations(&self) -> usize {
        match self.obs_mode {
            GridObs::Position => self.n_cells(),
            GridObs::PositionGoal => self.n_cells() * self.goals.len(),
        }
    }

    pub fn n_actions(&self) -> usize {
        4
    }

    /// Labels depend on the cell alone — never on the active goal — so that
    /// `Position` observations keep them a pure function of the observation.
    /// The `goal` atom marks every candidate cell; safety formulas only ever
    /// mention obstacle atoms.
    pub fn label_cell(&self, cell: usize) -> LabelSet {
        let mut l = LabelSet::EMPTY;
        if self.hazards.contains(&cell) {
            l.insert(0);
        }
        if self.goals.contains(&cell) {
            l.insert(1);
        }
        if !self.vases.is_empty() && self.vases.contains(&cell) {
            l.insert(2);
        }
        l
    }

    fn observe(&self) -> usize {
        match self.obs_mode {
            GridObs::Position => self.pos,
            GridObs::PositionGoal => self.pos * self.goals.len() + self.active_goal,
        }
    }

    fn apply_move(&self, from: usize, dir: usize) -> usize {
        let (dx, dy) = GRID_MOVES[dir];
        let x = (from % self.width) as isize + dx;
        let y = (from / self.width) as isize + dy;
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            from
        } else {
            y as usize * self.width + x as usize
        }
    }

    /// Destination distribution of one move, before any goal bookkeeping.
    fn move_distribution(&self, from: usize, action: usize) -> Vec<(usize, f64)> {
        // Perpendicular pairs: east/west slip north/south and vice versa.
        let (p1, p2) = if action < 2 { (2, 3) } else { (0, 1) };
        let mut out = vec![(self.apply_move(from, action), 1.0 - self.slip)];
        for p in [p1, p2] {
            out.push((self.apply_move(from, p), self.slip / 2.0));
        }
        out
    }

    fn result(&self, reward: f64) -> StepResult<usize> {
        let labels = self.label_cell(self.pos);
        StepResult {
            obs: self.observe(),
            reward,
            labels,
            cost: step_cost(labels, &self.formula, self.cost_value).unwrap(),
            terminated: self.steps >= self.episode_limit,
        }
    }

    /// Exact finite MDP of this grid. `Position` mode yields one state per
    /// cell; transitions and labels are exact, while the reward for entering
    /// a candidate cell is the marginal `1/n_goals` (the active goal is
    /// hidden). `PositionGoal` mode takes the product with the active-goal
    /// index and is exact in every head, including the respawn dynamics.
    pub fn to_labelled_mdp(&self, discount: f64) -> Result<LabelledMdp> {
        match self.obs_mode {
            GridObs::Position => self.position_mdp(discount),
            GridObs::PositionGoal => self.product_mdp(discount),
        }
    }

    fn position_mdp(&self, discount: f64) -> Result<LabelledMdp> {
        let n = self.n_cells();
        let na = 4;
        let mut transition = vec![0.0; n * na * n];
        let mut reward = vec![0.0; n * na];
        for s in 0..n {
            for a in 0..na {
                let base = (s * na + a) * n;
                for (dest, p) in self.move_distribution(s, a) {
                    transition[base + dest] += p;
                    if self.goals.contains(&dest) {
                        reward[s * na + a] += p / self.goals.len() as f64;
                    }
                }
            }
        }
        let mut initial = vec![0.0; n];
        for &s in &self.starts {
            initial[s] += 1.0 / self.starts.len() as f64;
        }
        let labels = (0..n).map(|c| self.label_cell(c)).collect();
        LabelledMdp::new(n, na, transition, reward, initial, discount, self.atoms.clone(), labels)
    }

    fn product_mdp(&self, discount: f64) -> Result<LabelledMdp> {
        let nc = self.n_cells();
        let ng = self.goals.len();
        let n = nc * ng;
        let na = 4;
        let mut transition = vec![0.0; n * na * n];
        let mut reward = vec![0.0; n * na];
        for c in 0..nc {
            for g in 0..ng {
                let s = c * ng + g;
                for a in 0..na {
                    let base = (s * na + a) * n;
                    for (dest, p) in self.move_distribution(c, a) {
                        if dest == self.goals[g] {
                            reward[s * na + a] += p;
                            if ng == 1 {
                                transition[base + dest * ng + g] += p;
                            } else {
                                let others = (ng - 1) as f64;
                                for g2 in 0..ng {
                                    if g2 != g {
                                        transition[base + dest * ng + g2] += p / others;
                                    }
                                }
                            }
                        } else {
                            transition[base + dest * ng + g] += p;
                        }
                    }
                }
            }
        }
        let mut initial = vec![0.0; n];
        for &c in &self.starts {
            for g in 0..ng {
                initial[c * ng + g] += 1.0 / (self.starts.len() * ng) as f64;
            }
        }
        let labels = (0..n).map(|s| self.label_cell(s / ng)).collect();
        LabelledMdp::new(n, na, transition, reward, initial, discount, self.atoms.clone(), labels)
    }

    #[cfg(test)]
    fn place(&mut self, pos: usize, active_goal: usize) {
        self.pos = pos;
        self.active_goal = active_goal;
    }
}

impl Environment for GridHazardEnv {
    type Obs = usize;
    type Action = usize;

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepResult<usize> {
        self.pos = self.starts[rng.gen_range(0..self.starts.len())];
        self.active_goal = rng.gen_range(0..self.goals.len());
        self.steps = 0;
        self.result(0.0)
    }

    fn step<R: Rng + ?Sized>(&mut self, action: &usize, rng: &mut R) -> Result<StepResult<usize>> {
        if *action >= 4 {
            return Err(Error::Precondition(format!("grid action must be in 0..4, got {action}")));
        }
        let dir = if self.slip > 0.0 && rng.gen::<f64>() < self.slip {
            // Slipped: one of the two perpendicular directions, evenly.
            let (p1, p2) = if *action < 2 { (2, 3) } else { (0, 1) };
            if rng.gen::<bool>() {
                p1
            } else {
                p2
            }
        } else {
            *action
        };
        self.pos = self.apply_move(self.pos, dir);
        self.steps += 1;
        let mut reward = 0.0;
        if self.pos == self.goals[self.active_goal] {
            reward = 1.0;
            if self.goals.len() > 1 {
                // Respawn uniformly among the other candidates.
                let mut g = rng.gen_range(0..self.goals.len() - 1);
                if g >= self.active_goal {
                    g += 1;
                }
                self.active_goal = g;
            }
        }
        Ok(self.result(reward))
    }

    fn atoms(&self) -> &Atoms {
        &self.atoms
    }

    fn formula(&self) -> &SafetyFormula {
        &self.formula
    }

    fn cost_value(&self) -> f64 {
        self.cost_value
    }
}

// ---------------------------------------------------------------------------
// Point mass

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Circle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// A point mass in a square arena `[-half_width, half_width]^2`. Actions are
/// velocities in `[-1, 1]^2` (clipped), scaled by `max_speed`. The
/// observation is `[x, y, goal_x, goal_y]`; `obs_noise > 0` adds zero-mean
/// Gaussian noise to the agent's own coordinates, the stand-in for an
/// imperfect position sensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointNavEnv {
    half_width: f64,
    hazards: Vec<Circle>,
    vases: Vec<Circle>,
    goal_radius: f64,
    max_speed: f64,
    episode_limit: usize,
    obs_noise: f64,
    cost_value: f64,
    atoms: Atoms,
    formula: SafetyFormula,
    pos: [f64; 2],
    goal: [f64; 2],
    steps: usize,
}

impl PointNavEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        half_width: f64,
        hazards: Vec<Circle>,
        vases: Vec<Circle>,
        goal_radius: f64,
        max_speed: f64,
        episode_limit: usize,
        obs_noise: f64,
        cost_value: f64,
    ) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(Error::config("arena half-width must be positive"));
        }
        for c in hazards.iter().chain(&vases) {
            if !(c.r > 0.0) {
                return Err(Error::Config(format!("circle radius must be positive, got {}", c.r)));
            }
        }
        if !(goal_radius > 0.0 && max_speed > 0.0 && cost_value > 0.0) {
            return Err(Error::config("goal radius, max speed and cost value must be positive"));
        }
        if !(obs_noise >= 0.0) {
            return Err(Error::config("observation noise must be non-negative"));
        }
        if episode_limit == 0 {
            return Err(Error::config("episode limit must be positive"));
        }
        // The free area must dominate, or rejection-sampled spawns stall.
        let area = 4.0 * half_width * half_width;
        let blocked: f64 =
            hazards.iter().chain(&vases).map(|c| std::f64::consts::PI * c.r * c.r).sum();
        if blocked > 0.5 * area {
            return Err(Error::config("obstacle circles cover more than half the arena"));
        }
        let (atoms, formula) = if vases.is_empty() {
            let atoms = Atoms::new(&["hazard", "goal"])?;
            let formula = SafetyFormula::parse("!hazard", &atoms)?;
            (atoms, formula)
        } else {
            let atoms = Atoms::new(&["hazard", "goal", "collision"])?;
            let formula = SafetyFormula::parse("!hazard & !collision", &atoms)?;
            (atoms, formula)
        };
        Ok(PointNavEnv {
            half_width,
            hazards,
            vases,
            goal_radius,
            max_speed,
            episode_limit,
            obs_noise,
            cost_value,
            atoms,
            formula,
            pos: [0.0, 0.0],
            goal: [0.0, 0.0],
            steps: 0,
        })
    }

    /// Default arena: half-width 2, four hazard circles of radius 0.3 placed
    /// symmetrically between the centre and the corners.
    pub fn default_layout(episode_limit: usize, obs_noise: f64, cost_value: f64) -> Result<Self> {
        let circles = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)]
            .iter()
            .map(|&(x, y)| Circle { x, y, r: 0.3 })
            .collect();
        PointNavEnv::new(2.0, circles, vec![], 0.3, 0.25, episode_limit, obs_noise, cost_value)
    }

    pub fn two_atom_variant(&self, vases: Vec<Circle>) -> Result<Self> {
        PointNavEnv::new(
            self.half_width,
            self.hazards.clone(),
            vases,
            self.goal_radius,
            self.max_speed,
            self.episode_limit,
            self.obs_noise,
            self.cost_value,
        )
    }

    pub fn labels_at(&self, pos: [f64; 2]) -> LabelSet {
        let mut l = LabelSet::EMPTY;
        if self.hazards.iter().any(|c| c.contains(pos)) {
            l.insert(0);
        }
        let dx = pos[0] - self.goal[0];
        let dy = pos[1] - self.goal[1];
        if dx * dx + dy * dy <= self.goal_radius * self.goal_radius {
            l.insert(1);
        }
        if !self.vases.is_empty() && self.vases.iter().any(|c| c.contains(pos)) {
            l.insert(2);
        }
        l
    }

    fn sample_free_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 2]> {
        for _ in 0..10_000 {
            let p = [
                rng.gen_range(-self.half_width..=self.half_width),
                rng.gen_range(-self.half_width..=self.half_width),
            ];
            let blocked = self.hazards.iter().chain(&self.vases).any(|c| c.contains(p));
            if !blocked {
                return Ok(p);
            }
        }
        Err(Error::precondition("could not sample a free point in the arena"))
    }

    fn observe<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let mut o = [self.pos[0], self.pos[1], self.goal[0], self.goal[1]];
        if self.obs_noise > 0.0 {
            let noise = rand_distr::Normal::new(0.0, self.obs_noise).unwrap();
            o[0] += rng.sample(noise);
            o[1] += rng.sample(noise);
        }
        o
    }

    fn result<R: Rng + ?Sized>(&self, reward: f64, labels: LabelSet, rng: &mut R) -> StepResult<[f64; 4]> {
        StepResult {
            obs: self.observe(rng),
            reward,
            labels,
            cost: step_cost(labels, &self.formula, self.cost_value).unwrap(),
            terminated: self.steps >= self.episode_limit,
        }
    }
}

impl Environment for PointNavEnv {
    type Obs = [f64; 4];
    type Action = [f64; 2];

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepResult<[f64; 4]> {
        self.pos = self.sample_free_point(rng).expect("arena spawn space validated at construction");
        self.goal = self.sample_free_point(rng).expect("arena spawn space validated at construction");
        self.steps = 0;
        let labels = self.labels_at(self.pos);
        self.result(0.0, labels, rng)
    }

    fn step<R: Rng + ?Sized>(&mut self, action: &[f64; 2], rng: &mut R) -> Result<StepResult<[f64; 4]>> {
        for (i, a) in action.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Precondition(format!("action component {i} is not finite")));
            }
        }
        for i in 0..2 {
            self.pos[i] += action[i].clamp(-1.0, 1.0) * self.max_speed;
            self.pos[i] = self.pos[i].clamp(-self.half_width, self.half_width);
        }
        self.steps += 1;
        // Labels are read before the goal respawns: the capturing state is
        // the one that carries the goal atom.
        let labels = self.labels_at(self.pos);
        let mut reward = 0.0;
        let dx = self.pos[0] - self.goal[0];
        let dy = self.pos[1] - self.goal[1];
        if dx * dx + dy * dy <= self.goal_radius * self.goal_radius {
            reward = 1.0;
            self.goal = self.sample_free_point(rng)?;
        }
        Ok(self.result(reward, labels, rng))
    }

    fn atoms(&self) -> &Atoms {
        &self.atoms
    }

    fn formula(&self) -> &SafetyFormula {
        &self.formula
    }

    fn cost_value(&self) -> f64 {
        self.cost_value
    }
}

// ---------------------------------------------------------------------------
// Tabular MDPs as environments

/// Runs a [`LabelledMdp`] as an environment. Observations are state indices
/// and the reward is the MDP's expected immediate reward, which keeps the
/// wrapper exactly consistent with the matrix the oracles enumerate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpEnv {
    mdp: LabelledMdp,
    formula: SafetyFormula,
    cost_value: f64,
    episode_limit: usize,
    state: usize,
    steps: usize,
}

impl MdpEnv {
    pub fn new(
        mdp: LabelledMdp,
        formula_text: &str,
        cost_value: f64,
        episode_limit: usize,
    ) -> Result<Self> {
        if !(cost_value > 0.0) {
            return Err(Error::Config(format!("cost value must be positive, got {cost_value}")));
        }
        if episode_limit == 0 {
            return Err(Error::config("episode limit must be positive"));
        }
        let formula = SafetyFormula::parse(formula_text, mdp.atoms())?;
        Ok(MdpEnv { mdp, formula, cost_value, episode_limit, state: 0, steps: 0 })
    }

    pub fn mdp(&self) -> &LabelledMdp {
        &self.mdp
    }

    pub fn n_observations(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Jump to a specific state, e.g. to anchor rollouts for calibration.
    pub fn set_state(&mut self, state: usize) -> Result<()> {
        if state >= self.mdp.n_states() {
            return Err(Error::precondition("state out of range"));
        }
        self.state = state;
        Ok(())
    }

    fn result(&self, reward: f64) -> StepResult<usize> {
        let labels = self.mdp.labels(self.state);
        StepResult {
            obs: self.state,
            reward,
            labels,
            cost: step_cost(labels, &self.formula, self.cost_value).unwrap(),
            terminated: self.steps >= self.episode_limit,
        }
    }
}

impl Environment for MdpEnv {
    type Obs = usize;
    type Action = usize;

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepResult<usize> {
        self.state = self.mdp.sample_initial(rng);
        self.steps = 0;
        self.result(0.0)
    }

    fn step<R: Rng + ?Sized>(&mut self, action: &usize, rng: &mut R) -> Result<StepResult<usize>> {
        if *action >= self.mdp.n_actions() {
            return Err(Error::Precondition(format!(
                "action must be in 0..{}, got {action}",
                self.mdp.n_actions()
            )));
        }
        let reward = self.mdp.reward(self.state, *action);
        self.state = self.mdp.sample_next(self.state, *action, rng);
        self.steps += 1;
        Ok(self.result(reward))
    }

    fn atoms(&self) -> &Atoms {
        self.mdp.atoms()
    }

    fn formula(&self) -> &SafetyFormula {
        &self.formula
    }

    fn cost_value(&self) -> f64 {
        self.cost_value
    }
}

/// A small explicit chain, the oracle substrate: every measure on it can be
/// enumerated exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainWorld {
    mdp: LabelledMdp,
}

impl ChainWorld {
    pub const MAX_STATES: usize = 16;

    pub fn new(mdp: LabelledMdp) -> Result<Self> {
        if mdp.n_states() > Self::MAX_STATES {
            return Err(Error::SizeGuard(format!(
                "chain worlds stay enumerable up to {} states, got {}",
                Self::MAX_STATES,
                mdp.n_states()
            )));
        }
        Ok(ChainWorld { mdp })
    }

    /// Two actions: `stay` leaks to the absorbing unsafe terminal state with
    /// probability `leak`, `advance` moves right with the same leak. The last
    /// non-terminal state pays +1 for advancing.
    pub fn leaky(n_states: usize, leak: f64) -> Result<Self> {
        if n_states < 3 {
            return Err(Error::config("leaky chain needs at least 3 states"));
        }
        if !(0.0..1.0).contains(&leak) {
            return Err(Error::Config(format!("leak must be in [0, 1), got {leak}")));
        }
        let atoms = Atoms::new(&["unsafe"])?;
        let n = n_states;
        let bad = n - 1; // absorbing unsafe state
        let na = 2;
        let mut transition = vec![0.0; n * na * n];
        let mut reward = vec![0.0; n * na];
        for s in 0..n {
            for a in 0..na {
                let base = (s * na + a) * n;
                if s == bad {
                    transition[base + bad] = 1.0;
                    continue;
                }
                let target = if a == 0 { s } else { (s + 1).min(bad - 1) };
                transition[base + target] += 1.0 - leak;
                transition[base + bad] += leak;
                if a == 1 && s == bad - 1 {
                    reward[s * na + a] = 1.0 - leak;
                }
            }
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        let labels =
            (0..n).map(|s| if s == bad { LabelSet::from_ids(&[0]) } else { LabelSet::EMPTY }).collect();
        let mdp = LabelledMdp::new(n, na, transition, reward, initial, 0.99, atoms, labels)?;
        ChainWorld::new(mdp)
    }

    /// Random full-support chain with `unsafe`-labelled states, state 0 kept
    /// safe and initial.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        unsafe_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_states < 2 || n_states > Self::MAX_STATES {
            return Err(Error::Config(format!(
                "random chain needs 2..={} states, got {n_states}",
                Self::MAX_STATES
            )));
        }
        let atoms = Atoms::new(&["unsafe"])?;
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        for row in transition.chunks_mut(n_states) {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = -(rng.gen::<f64>().max(1e-12)).ln();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let reward = (0..n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
        let mut initial = vec![0.0; n_states];
        initial[0] = 1.0;
        let labels = (0..n_states)
            .map(|s| {
                if s > 0 && rng.gen::<f64>() < unsafe_prob {
                    LabelSet::from_ids(&[0])
                } else {
                    LabelSet::EMPTY
                }
            })
            .collect();
        let mdp =
            LabelledMdp::new(n_states, n_actions, transition, reward, initial, 0.99, atoms, labels)?;
        ChainWorld::new(mdp)
    }

    pub fn mdp(&self) -> &LabelledMdp {
        &self.mdp
    }

    pub fn into_env(self, cost_value: f64, episode_limit: usize) -> Result<MdpEnv> {
        MdpEnv::new(self.mdp, "!unsafe", cost_value, episode_limit)
    }
}

// ---------------------------------------------------------------------------
// Layout files

pub const ENV_SCHEMA: &str = "env-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvDocument {
    pub schema: String,
    pub env: EnvConfig,
}

/// Everything needed to rebuild an environment, as stored in layout files and
/// embedded in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    GridHazard {
        width: usize,
        height: usize,
        hazards: Vec<usize>,
        goals: Vec<usize>,
        #[serde(default)]
        vases: Vec<usize>,
        starts: Vec<usize>,
        slip: f64,
        episode_limit: usize,
        observe_goal: bool,
        cost_value: f64,
    },
    PointNav {
        half_width: f64,
        hazards: Vec<Circle>,
        #[serde(default)]
        vases: Vec<Circle>,
        goal_radius: f64,
        max_speed: f64,
        episode_limit: usize,
        #[serde(default)]
        obs_noise: f64,
        cost_value: f64,
    },
    LeakyChain {
        states: usize,
        leak: f64,
        episode_limit: usize,
        cost_value: f64,
    },
}

impl EnvConfig {
    pub fn build_grid(&self) -> Result<GridHazardEnv> {
        match self {
            EnvConfig::GridHazard {
                width,
                height,
                hazards,
                goals,
                vases,
                starts,
                slip,
                episode_limit,
                observe_goal,
                cost_value,
            } => GridHazardEnv::new(
                *width,
                *height,
                hazards.clone(),
                goals.clone(),
                vases.clone(),
                starts.clone(),
                *slip,
                *episode_limit,
                if *observe_goal { GridObs::PositionGoal } else { GridObs::Position },
                *cost_value,
            ),
            other => Err(Error::Config(format!("expected a grid_hazard layout, got {other:?}"))),
        }
    }

    pub fn build_point(&self) -> Result<PointNavEnv> {
        match self {
            EnvConfig::PointNav {
                half_width,
                hazards,
                vases,
                goal_radius,
                max_speed,
                episode_limit,
                obs_noise,
                cost_value,
            } => PointNavEnv::new(
                *half_width,
                hazards.clone(),
                vases.clone(),
                *goal_radius,
                *max_speed,
                *episode_limit,
                *obs_noise,
                *cost_value,
            ),
            other => Err(Error::Config(format!("expected a point_nav layout, got {other:?}"))),
        }
    }

    pub fn build_chain(&self) -> Result<MdpEnv> {
        match self {
            EnvConfig::LeakyChain { states, leak, episode_limit, cost_value } => {
                ChainWorld::leaky(*states, *leak)?.into_env(*cost_value, *episode_limit)
            }
            other => Err(Error::Config(format!("expected a leaky_chain layout, got {other:?}"))),
        }
    }
}

pub fn load_env_document(path: &std::path::Path) -> Result<EnvConfig> {
    let text = std::fs::read_to_string(path)?;
    let doc: EnvDocument = serde_json::from_str(&text)?;
    if doc.schema != ENV_SCHEMA {
        return Err(Error::Config(format!(
            "unsupported layout schema {:?}, this build reads {ENV_SCHEMA:?}",
            doc.schema
        )));
    }
    Ok(doc.env)
}
