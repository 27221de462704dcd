//! Continuous-space system models: dynamics, reward, domains and Lipschitz data.
//!
//! A [`SystemModel`] bundles a deterministic one-step map `ξ' = f(ξ, v)`, a reward
//! `g(ξ, v)`, compact state and action boxes, and the Lipschitz constants the
//! abstraction layer relies on. All norms are infinity norms.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result, SymqError};
use crate::rng::SeededRng;

/// A compact axis-aligned box `[lower, upper]` with `lower[i] < upper[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(invalid("box must have dimension >= 1"));
        }
        if lower.len() != upper.len() {
            return Err(invalid(format!(
                "box bounds have mismatched dimensions ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(invalid(format!("box axis {i}: need finite lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Infinity-norm diameter (largest side length).
    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).fold(0.0, f64::max)
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn clip(&self, point: &mut [f64]) {
        for (x, (lo, hi)) in point.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| rng.gen_range(*lo..=*hi))
            .collect()
    }

    pub fn as_cell(&self) -> CellBox {
        CellBox {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        }
    }
}

/// A closed box that may be degenerate (`lower[i] <= upper[i]`); used for grid
/// cells, including the point cells of a finite action set.
#[derive(Clone, Debug, PartialEq)]
pub struct CellBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CellBox {
    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    /// All `2^n` corners (fewer when some axes are degenerate).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.lower.len())];
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            let choices: &[f64] = if lo == hi { &[*lo][..] } else { &[*lo, *hi][..] };
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    choices.iter().map(move |c| {
                        let mut p = prefix.clone();
                        p.push(*c);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// Lipschitz data of a model (infinity norm throughout).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzBounds {
    /// Modulus of `f` in the state argument.
    pub l_f_state: f64,
    /// Modulus of `f` in the action argument.
    pub l_f_action: f64,
    /// Modulus of `g` in the state argument.
    pub l_g_state: f64,
    /// Modulus of `g` in the action argument.
    pub l_g_action: f64,
    /// Admissible-action modulus `‖v - v̄‖ <= L_A ‖ξ - ξ̄‖`. `None` selects the
    /// grid-scale default `diameter(action box) / η`.
    pub l_admissible: Option<f64>,
}

impl LipschitzBounds {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("l_f_state", self.l_f_state),
            ("l_f_action", self.l_f_action),
            ("l_g_state", self.l_g_state),
            ("l_g_action", self.l_g_action),
            ("l_admissible", self.l_admissible.unwrap_or(0.0)),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// `L_A`, falling back to `diameter / eta` when unset.
    pub fn admissible_or(&self, action_diameter: f64, eta: f64) -> f64 {
        self.l_admissible.unwrap_or(if eta > 0.0 { action_diameter / eta } else { 0.0 })
    }
}

pub type StepFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type RewardFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Exact `(min, max)` of the reward over a (state cell, action cell) pair.
pub type RewardExtremaFn = Arc<dyn Fn(&CellBox, &CellBox) -> (f64, f64) + Send + Sync>;

/// A discrete-time control system `ξ_{k+1} = f(ξ_k, v_k)` with reward `g`.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    state_space: BoxDomain,
    action_space: BoxDomain,
    lipschitz: LipschitzBounds,
    clip_states: bool,
    action_levels: Option<usize>,
    reward_jump: Option<f64>,
    step_fn: StepFn,
    reward_fn: RewardFn,
    reward_extrema: Option<RewardExtremaFn>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_space", &self.state_space)
            .field("action_space", &self.action_space)
            .field("lipschitz", &self.lipschitz)
            .field("clip_states", &self.clip_states)
            .field("action_levels", &self.action_levels)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        state_space: BoxDomain,
        action_space: BoxDomain,
        lipschitz: LipschitzBounds,
        step_fn: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        reward_fn: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        lipschitz.validate()?;
        Ok(SystemModel {
            name: name.into(),
            state_space,
            action_space,
            lipschitz,
            clip_states: true,
            action_levels: None,
            reward_jump: None,
            step_fn: Arc::new(step_fn),
            reward_fn: Arc::new(reward_fn),
            reward_extrema: None,
        })
    }

    /// Enable or disable per-axis clipping of successor states into the state box.
    pub fn with_clipping(mut self, clip: bool) -> Self {
        self.clip_states = clip;
        self
    }

    /// Declare the action set finite: `levels` equally spaced values spanning the
    /// action box, endpoints included.
    pub fn with_action_levels(mut self, levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(invalid("a finite action set needs at least 2 levels"));
        }
        self.action_levels = Some(levels);
        Ok(self)
    }

    /// Supply exact per-cell reward extrema.
    pub fn with_reward_extrema(
        mut self,
        f: impl Fn(&CellBox, &CellBox) -> (f64, f64) + Send + Sync + 'static,
    ) -> Self {
        self.reward_extrema = Some(Arc::new(f));
        self
    }

    /// Mark the reward as piecewise constant with the given largest jump. Such
    /// rewards have no finite Lipschitz modulus; the analysis uses the grid-scale
    /// modulus `jump / η` instead.
    pub fn with_reward_jump(mut self, jump: f64) -> Self {
        self.reward_jump = Some(jump);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_space(&self) -> &BoxDomain {
        &self.state_space
    }

    pub fn action_space(&self) -> &BoxDomain {
        &self.action_space
    }

    pub fn lipschitz(&self) -> &LipschitzBounds {
        &self.lipschitz
    }

    pub fn set_lipschitz(&mut self, lipschitz: LipschitzBounds) -> Result<()> {
        lipschitz.validate()?;
        self.lipschitz = lipschitz;
        Ok(())
    }

    pub fn clips_states(&self) -> bool {
        self.clip_states
    }

    pub fn action_levels(&self) -> Option<usize> {
        self.action_levels
    }

    pub fn reward_jump(&self) -> Option<f64> {
        self.reward_jump
    }

    pub fn reward_extrema_fn(&self) -> Option<&RewardExtremaFn> {
        self.reward_extrema.as_ref()
    }

    fn check_args(&self, state: &[f64], action: &[f64]) -> Result<()> {
        if state.len() != self.state_space.dim() {
            return Err(invalid(format!(
                "state has dimension {}, model expects {}",
                state.len(),
                self.state_space.dim()
            )));
        }
        if action.len() != self.action_space.dim() {
            return Err(invalid(format!(
                "action has dimension {}, model expects {}",
                action.len(),
                self.action_space.dim()
            )));
        }
        if !self.state_space.contains(state) {
            return Err(SymqError::Domain(format!("state {state:?} outside the state space")));
        }
        if !self.action_space.contains(action) {
            return Err(SymqError::Domain(format!("action {action:?} outside the action space")));
        }
        Ok(())
    }

    /// One step of the dynamics, clipped into the state box when clipping is on.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        self.check_args(state, action)?;
        Ok(self.step_unchecked(state, action))
    }

    pub(crate) fn step_unchecked(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut next = (self.step_fn)(state, action);
        if self.clip_states {
            self.state_space.clip(&mut next);
        }
        next
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.check_args(state, action)?;
        Ok((self.reward_fn)(state, action))
    }

    pub(crate) fn reward_unchecked(&self, state: &[f64], action: &[f64]) -> f64 {
        (self.reward_fn)(state, action)
    }
}

/// Parameters of the mountain-car benchmark, in the matrix form
/// `ξ' = Aξ + Φ(ξ) + Bv` with `A = [[1,1],[0,1]]`, `B = (0, force)`,
/// `Φ = (0, -gravity·cos(3ξ₁))`. Position is advanced with the old velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MountainCar {
    pub force: f64,
    pub gravity: f64,
    pub goal_position: f64,
}

impl Default for MountainCar {
    fn default() -> Self {
        MountainCar {
            force: 0.001,
            gravity: 0.0025,
            goal_position: 0.6,
        }
    }
}

impl MountainCar {
    pub fn model(&self) -> SystemModel {
        let MountainCar {
            force,
            gravity,
            goal_position,
        } = *self;
        let state = BoxDomain::new(vec![-1.2, -0.07], vec![0.6, 0.07]).expect("static box");
        let action = BoxDomain::new(vec![-1.0], vec![1.0]).expect("static box");
        // Nominal constant ‖A‖ + 0.0025; the true ∞-norm of A is 2, see `lipschitz_self_check`.
        let lipschitz = LipschitzBounds {
            l_f_state: 1.0025,
            l_f_action: 0.001,
            l_g_state: 0.0,
            l_g_action: 0.0,
            l_admissible: None,
        };
        SystemModel::new(
            "mountain_car",
            state,
            action,
            lipschitz,
            move |x, u| {
                let (pos, vel) = (x[0], x[1]);
                vec![pos + vel, vel + force * u[0] - gravity * (3.0 * pos).cos()]
            },
            move |x, _u| if x[0] >= goal_position { 0.0 } else { -1.0 },
        )
        .expect("static model")
        .with_reward_jump(1.0)
        .with_reward_extrema(move |cell, _| {
            // Any cell touching the goal position is the goal cell s*: ḡ = g̲ = 0.
            if cell.upper[0] >= goal_position {
                (0.0, 0.0)
            } else {
                (-1.0, -1.0)
            }
        })
    }

    /// Goal predicate over continuous states.
    pub fn reached(&self, state: &[f64]) -> bool {
        state[0] >= self.goal_position
    }
}

/// The mountain car with default parameters.
pub fn mountain_car() -> SystemModel {
    MountainCar::default().model()
}

/// Forced Van der Pol oscillator
/// `x' = x + τv`, `v' = v + τ(ζ(1 - x²)v - x + u)` on `[-2,2]×[-3,3]`, `u ∈ {-1,0,1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VanDerPol {
    pub tau: f64,
    pub zeta: f64,
}

impl Default for VanDerPol {
    fn default() -> Self {
        VanDerPol { tau: 0.01, zeta: 2.0 }
    }
}

impl VanDerPol {
    pub const X_MAX: f64 = 2.0;
    pub const V_MAX: f64 = 3.0;

    pub fn model(&self) -> SystemModel {
        let VanDerPol { tau, zeta } = *self;
        let (xm, vm) = (Self::X_MAX, Self::V_MAX);
        let state = BoxDomain::new(vec![-xm, -vm], vec![xm, vm]).expect("static box");
        let action = BoxDomain::new(vec![-1.0], vec![1.0]).expect("static box");
        // Row sums of the Jacobian bound over the box.
        let row_x = 1.0 + tau;
        let dv_dx = tau * (2.0 * zeta * xm * vm + 1.0);
        let dv_dv = (1.0 + tau * zeta).abs().max((1.0 + tau * zeta * (1.0 - xm * xm)).abs());
        let lipschitz = LipschitzBounds {
            l_f_state: row_x.max(dv_dx + dv_dv),
            l_f_action: tau,
            l_g_state: 2.0 * xm + 2.0 * vm,
            l_g_action: 0.0,
            l_admissible: None,
        };
        SystemModel::new(
            "van_der_pol",
            state,
            action,
            lipschitz,
            move |s, u| {
                let (x, v) = (s[0], s[1]);
                vec![x + tau * v, v + tau * (zeta * (1.0 - x * x) * v - x + u[0])]
            },
            |s, _u| -(s[0] * s[0] + s[1] * s[1]),
        )
        .expect("static model")
        .with_action_levels(3)
        .expect("static levels")
        .with_reward_extrema(|cell, _| {
            let mut near = 0.0;
            let mut far = 0.0;
            for (lo, hi) in cell.lower.iter().zip(&cell.upper) {
                let closest = 0.0_f64.clamp(*lo, *hi);
                let farthest = lo.abs().max(hi.abs());
                near += closest * closest;
                far += farthest * farthest;
            }
            (-far, -near)
        })
    }
}

/// The Van der Pol oscillator with default parameters.
pub fn van_der_pol() -> SystemModel {
    VanDerPol::default().model()
}

/// Resolve a built-in model by name.
pub fn builtin(name: &str) -> Result<SystemModel> {
    match name {
        "mountain_car" => Ok(mountain_car()),
        "van_der_pol" => Ok(van_der_pol()),
        other => Err(invalid(format!(
            "unknown system {other:?} (expected \"mountain_car\" or \"van_der_pol\")"
        ))),
    }
}

/// Time-indexed record of a closed-loop run. `states` has one more entry than
/// `actions`/`rewards`: `states[k + 1] = step(states[k], actions[k])`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn starting_at(x0: Vec<f64>) -> Self {
        Trajectory {
            states: vec![x0],
            actions: Vec::new(),
            rewards: Vec::new(),
        }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }

    pub(crate) fn push(&mut self, action: Vec<f64>, reward: f64, next: Vec<f64>) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.states.push(next);
    }

    /// Re-step the model along the recorded actions and compare bit-for-bit.
    pub fn is_consistent_with(&self, model: &SystemModel) -> bool {
        self.states.len() == self.actions.len() + 1
            && self.actions.iter().enumerate().all(|(k, u)| {
                model
                    .step(&self.states[k], u)
                    .map(|next| next == self.states[k + 1])
                    .unwrap_or(false)
            })
    }
}

/// Outcome of the empirical Lipschitz self-check.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest observed `‖Δf‖ / (L_fξ‖Δξ‖ + L_fv‖Δv‖)`.
    pub worst_ratio: f64,
}

/// Sample random pairs `(ξ, v), (ξ̄, v̄)` and count violations of
/// `‖f(ξ,v) - f(ξ̄,v̄)‖ <= L_fξ‖ξ-ξ̄‖ + L_fv‖v-v̄‖ + 1e-12`.
pub fn lipschitz_self_check(model: &SystemModel, samples: usize, seed: u64) -> LipschitzCheck {
    let mut rng = crate::rng::seeded(seed);
    let l = model.lipschitz();
    let mut violations = 0;
    let mut worst_ratio = 0.0_f64;
    for _ in 0..samples {
        let (x1, u1) = (model.state_space.sample(&mut rng), model.action_space.sample(&mut rng));
        let (x2, u2) = (model.state_space.sample(&mut rng), model.action_space.sample(&mut rng));
        let f1 = (model.step_fn)(&x1, &u1);
        let f2 = (model.step_fn)(&x2, &u2);
        let lhs = inf_dist(&f1, &f2);
        let rhs = l.l_f_state * inf_dist(&x1, &x2) + l.l_f_action * inf_dist(&u1, &u2);
        if lhs > rhs + 1e-12 {
            violations += 1;
        }
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
    }
    LipschitzCheck {
        samples,
        violations,
        worst_ratio,
    }
}

pub(crate) fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
