//! Episodic environments: Linear Grid-World, grid-world maze and CartPole.

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One transition, the unit of replay.
///
/// `terminal` marks an absorbing next state: bootstrapped targets drop the
/// discounted next-state value when it is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience<S, T = f64> {
    pub state: S,
    pub action: usize,
    pub reward: T,
    pub next_state: S,
    pub terminal: bool,
}

/// Outcome of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub next_state: S,
    pub reward: f64,
    /// Absorbing termination (goal reached, pole fell).
    pub terminal: bool,
    /// Episode cut by a step limit; the next state is not absorbing.
    pub truncated: bool,
}

/// Uniform episodic interface shared by all environments.
pub trait Environment {
    type State: Clone;

    fn action_count(&self) -> usize;

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Self::State;

    /// Advances from the current state. Stepping a finished episode is a usage error.
    fn step(&mut self, action: usize) -> Result<Transition<Self::State>>;
}

/// Compass moves shared by both grid worlds, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum GridAction {
    North = 0,
    South = 1,
    East = 2,
    West = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::North, GridAction::South, GridAction::East, GridAction::West];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// (row delta, column delta); north is row - 1.
    fn delta(self) -> (isize, isize) {
        match self {
            GridAction::North => (-1, 0),
            GridAction::South => (1, 0),
            GridAction::East => (0, 1),
            GridAction::West => (0, -1),
        }
    }
}

fn grid_action(action: usize) -> Result<GridAction> {
    GridAction::from_index(action).ok_or_else(|| Error::usage(format!("invalid grid action {action}")))
}

// ---------------------------------------------------------------------------
// Linear Grid-World

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGridConfig {
    pub n: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.99
}

impl LinearGridConfig {
    pub fn new(n: usize) -> Result<Self> {
        let cfg = Self { n, gamma: default_gamma() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!("linear grid needs n >= 2, got {}", self.n)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("linear grid gamma must be in [0,1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `n` grids in a row, start at grid 0; stepping east off grid `n - 1` enters the
/// absorbing goal (state id `n`) with reward 1. North/south are no-ops, as is west at grid 0.
#[derive(Debug, Clone)]
pub struct LinearGrid {
    cfg: LinearGridConfig,
    state: usize,
}

impl LinearGrid {
    pub fn new(cfg: LinearGridConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: 0 })
    }

    pub fn config(&self) -> &LinearGridConfig {
        &self.cfg
    }

    pub fn goal(&self) -> usize {
        self.cfg.n
    }

    /// Number of state ids including the goal.
    pub fn state_count(&self) -> usize {
        self.cfg.n + 1
    }

    /// Deterministic dynamics from an arbitrary state.
    pub fn transition(&self, state: usize, action: usize) -> Result<Transition<usize>> {
        let n = self.cfg.n;
        if state == n {
            return Err(Error::usage("step from the terminal goal state"));
        }
        if state > n {
            return Err(Error::usage(format!("invalid linear grid state {state}")));
        }
        let next = match grid_action(action)? {
            GridAction::North | GridAction::South => state,
            GridAction::East => state + 1,
            GridAction::West => state.saturating_sub(1),
        };
        let terminal = next == n;
        Ok(Transition { next_state: next, reward: if terminal { 1.0 } else { 0.0 }, terminal, truncated: false })
    }
}

impl Environment for LinearGrid {
    type State = usize;

    fn action_count(&self) -> usize {
        4
    }

    fn reset<R: Rng + ?Sized>(&mut self, _rng: &mut R) -> usize {
        self.state = 0;
        0
    }

    fn step(&mut self, action: usize) -> Result<Transition<usize>> {
        let t = self.transition(self.state, action)?;
        self.state = t.next_state;
        Ok(t)
    }
}

/// Every (grid, action) pair once, grid-major then action order: exactly `4n` experiences.
pub fn enumerate_linear_buffer(cfg: &LinearGridConfig) -> Result<Vec<Experience<usize>>> {
    let env = LinearGrid::new(*cfg)?;
    let mut out = Vec::with_capacity(4 * cfg.n);
    for state in 0..cfg.n {
        for action in 0..4 {
            let t = env.transition(state, action)?;
            out.push(Experience { state, action, reward: t.reward, next_state: t.next_state, terminal: t.terminal });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid-world maze

/// A cell as `[row, column]`, 0-indexed from the top-left.
pub type Cell = [usize; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeConfig {
    #[serde(default = "five")]
    pub width: usize,
    #[serde(default = "five")]
    pub height: usize,
    /// Blocked edges between orthogonally adjacent cells.
    pub walls: Vec<[Cell; 2]>,
    #[serde(default)]
    pub start: Cell,
    #[serde(default = "default_goal")]
    pub goal: Vec<Cell>,
    #[serde(default = "default_step_reward")]
    pub step_reward: f64,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn five() -> usize {
    5
}
fn default_goal() -> Vec<Cell> {
    vec![[4, 4]]
}
fn default_step_reward() -> f64 {
    -0.004
}
fn default_goal_reward() -> f64 {
    1.0
}

impl Default for MazeConfig {
    /// Two interior barriers; the shortest path from (0,0) to (4,4) takes 12 moves.
    ///
    /// ```text
    ///   . . . . .
    ///   . . . . .
    ///   -----
    ///   . . . . .
    ///   . . . . .
    ///       -----
    ///   . . . . G
    /// ```
    fn default() -> Self {
        let mut walls = Vec::new();
        for c in 0..3 {
            walls.push([[1, c], [2, c]]);
        }
        for c in 2..5 {
            walls.push([[3, c], [4, c]]);
        }
        Self {
            width: 5,
            height: 5,
            walls,
            start: [0, 0],
            goal: default_goal(),
            step_reward: default_step_reward(),
            goal_reward: default_goal_reward(),
            gamma: default_gamma(),
        }
    }
}

/// Grid-world maze. State id is `row * width + column`.
#[derive(Debug, Clone)]
pub struct Maze {
    cfg: MazeConfig,
    walls: HashSet<(usize, usize)>,
    goal: Vec<bool>,
    state: usize,
}

impl Maze {
    pub fn new(cfg: MazeConfig) -> Result<Self> {
        let (w, h) = (cfg.width, cfg.height);
        if w == 0 || h == 0 {
            return Err(Error::config("maze dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return Err(Error::config(format!("maze gamma must be in [0,1], got {}", cfg.gamma)));
        }
        let in_bounds = |c: &Cell| c[0] < h && c[1] < w;
        let id = |c: &Cell| c[0] * w + c[1];
        let mut walls = HashSet::new();
        for [a, b] in &cfg.walls {
            if !in_bounds(a) || !in_bounds(b) {
                return Err(Error::config(format!("wall {a:?}-{b:?} outside the maze")));
            }
            if a[0].abs_diff(b[0]) + a[1].abs_diff(b[1]) != 1 {
                return Err(Error::config(format!("wall {a:?}-{b:?} joins non-adjacent cells")));
            }
            let (x, y) = (id(a), id(b));
            walls.insert((x.min(y), x.max(y)));
        }
        if cfg.goal.is_empty() {
            return Err(Error::config("maze goal zone is empty"));
        }
        let mut goal = vec![false; w * h];
        for g in &cfg.goal {
            if !in_bounds(g) {
                return Err(Error::config(format!("goal cell {g:?} outside the maze")));
            }
            goal[id(g)] = true;
        }
        if !in_bounds(&cfg.start) {
            return Err(Error::config(format!("start cell {:?} outside the maze", cfg.start)));
        }
        if goal[id(&cfg.start)] {
            return Err(Error::config("start cell lies in the goal zone"));
        }
        let start = id(&cfg.start);
        let maze = Self { cfg, walls, goal, state: start };
        if maze.shortest_path_len().is_none() {
            return Err(Error::config("goal unreachable from start"));
        }
        Ok(maze)
    }

    pub fn config(&self) -> &MazeConfig {
        &self.cfg
    }

    pub fn state_count(&self) -> usize {
        self.cfg.width * self.cfg.height
    }

    pub fn start_state(&self) -> usize {
        self.cfg.start[0] * self.cfg.width + self.cfg.start[1]
    }

    pub fn is_goal(&self, state: usize) -> bool {
        self.goal.get(state).copied().unwrap_or(false)
    }

    pub fn cell(&self, state: usize) -> Cell {
        [state / self.cfg.width, state % self.cfg.width]
    }

    /// Position reached by `action` from `state`; blocked moves stay in place.
    pub fn move_from(&self, state: usize, action: GridAction) -> usize {
        let [r, c] = self.cell(state);
        let (dr, dc) = action.delta();
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.cfg.height as isize || nc >= self.cfg.width as isize {
            return state;
        }
        let next = nr as usize * self.cfg.width + nc as usize;
        if self.walls.contains(&(state.min(next), state.max(next))) {
            state
        } else {
            next
        }
    }

    pub fn transition(&self, state: usize, action: usize) -> Result<Transition<usize>> {
        if state >= self.state_count() {
            return Err(Error::usage(format!("invalid maze state {state}")));
        }
        if self.is_goal(state) {
            return Err(Error::usage("step from a terminal goal cell"));
        }
        let next = self.move_from(state, grid_action(action)?);
        let terminal = self.is_goal(next);
        let reward = if terminal { self.cfg.goal_reward } else { self.cfg.step_reward };
        Ok(Transition { next_state: next, reward, terminal, truncated: false })
    }

    /// Breadth-first distance from start to the nearest goal cell.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.state_count()];
        let start = self.start_state();
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            if self.is_goal(s) {
                return Some(dist[s]);
            }
            for a in GridAction::ALL {
                let n = self.move_from(s, a);
                if dist[n] == usize::MAX {
                    dist[n] = dist[s] + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }
}

impl Environment for Maze {
    type State = usize;

    fn action_count(&self) -> usize {
        4
    }

    fn reset<R: Rng + ?Sized>(&mut self, _rng: &mut R) -> usize {
        self.state = self.start_state();
        self.state
    }

    fn step(&mut self, action: usize) -> Result<Transition<usize>> {
        let t = self.transition(self.state, action)?;
        self.state = t.next_state;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// CartPole

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleConfig {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_pole_length: f64,
    pub force_magnitude: f64,
    pub timestep: f64,
    pub angle_limit_degrees: f64,
    pub position_limit: f64,
    pub max_steps: usize,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_pole_length: 0.5,
            force_magnitude: 10.0,
            timestep: 0.02,
            angle_limit_degrees: 12.0,
            position_limit: 2.4,
            max_steps: 200,
        }
    }
}

impl CartPoleConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gravity,
            self.cart_mass,
            self.pole_mass,
            self.half_pole_length,
            self.force_magnitude,
            self.timestep,
            self.angle_limit_degrees,
            self.position_limit,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.max_steps == 0 {
            return Err(Error::config("cartpole constants must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn features(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }
}

/// Classic cart-pole: action 0 pushes left, action 1 pushes right.
///
/// Reward is 1 for every step that does not end in failure. An episode also
/// ends, as truncation, after `max_steps` steps.
#[derive(Debug, Clone)]
pub struct CartPole {
    cfg: CartPoleConfig,
    state: CartPoleState,
    steps: usize,
    done: bool,
}

impl CartPole {
    pub fn new(cfg: CartPoleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: CartPoleState::default(), steps: 0, done: true })
    }

    pub fn config(&self) -> &CartPoleConfig {
        &self.cfg
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    /// Places the system in an explicit state and starts a fresh episode from it.
    pub fn set_state(&mut self, state: CartPoleState) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    /// One explicit Euler step of the equations of motion under `force`.
    pub fn integrate(cfg: &CartPoleConfig, s: CartPoleState, force: f64) -> CartPoleState {
        let total_mass = cfg.cart_mass + cfg.pole_mass;
        let polemass_length = cfg.pole_mass * cfg.half_pole_length;
        let (sin, cos) = s.theta.sin_cos();
        let temp = (force + polemass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
        let theta_acc = (cfg.gravity * sin - cos * temp)
            / (cfg.half_pole_length * (4.0 / 3.0 - cfg.pole_mass * cos * cos / total_mass));
        let x_acc = temp - polemass_length * theta_acc * cos / total_mass;
        let tau = cfg.timestep;
        CartPoleState {
            x: s.x + tau * s.x_dot,
            x_dot: s.x_dot + tau * x_acc,
            theta: s.theta + tau * s.theta_dot,
            theta_dot: s.theta_dot + tau * theta_acc,
        }
    }

    fn failed(&self, s: &CartPoleState) -> bool {
        s.x.abs() > self.cfg.position_limit || s.theta.abs() > self.cfg.angle_limit_degrees.to_radians()
    }
}

impl Environment for CartPole {
    type State = CartPoleState;

    fn action_count(&self) -> usize {
        2
    }

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> CartPoleState {
        let mut draw = || rng.random_range(-0.05..=0.05);
        self.state = CartPoleState { x: draw(), x_dot: draw(), theta: draw(), theta_dot: draw() };
        self.steps = 0;
        self.done = false;
        self.state
    }

    fn step(&mut self, action: usize) -> Result<Transition<CartPoleState>> {
        if self.done {
            return Err(Error::usage("step on a finished cartpole episode"));
        }
        let force = match action {
            0 => -self.cfg.force_magnitude,
            1 => self.cfg.force_magnitude,
            _ => return Err(Error::usage(format!("invalid cartpole action {action}"))),
        };
        self.state = Self::integrate(&self.cfg, self.state, force);
        self.steps += 1;
        let terminal = self.failed(&self.state);
        let truncated = !terminal && self.steps >= self.cfg.max_steps;
        self.done = terminal || truncated;
        Ok(Transition { next_state: self.state, reward: if terminal { 0.0 } else { 1.0 }, terminal, truncated })
    }
}
