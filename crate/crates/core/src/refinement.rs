//! Executable controllers from policy tables and closed-loop simulation on
//! the continuous model.

use thiserror::Error;

use crate::abstraction::{CellId, GridPartition};
use crate::dynamics::{SystemModel, Trajectory};
use crate::error::{invalid, Result, SymqError};
use crate::learner::PolicyTable;

/// A policy table lifted to the continuous state space: quantize the state,
/// look up the action cell and apply its center.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedController {
    policy: PolicyTable,
    state_grid: GridPartition,
    action_grid: GridPartition,
    actions: Vec<Vec<f64>>,
}

impl RefinedController {
    pub fn new(policy: PolicyTable, state_grid: GridPartition, action_grid: GridPartition) -> Result<Self> {
        if policy.n_states() != state_grid.total_cells() {
            return Err(invalid(format!(
                "policy covers {} states, grid has {}",
                policy.n_states(),
                state_grid.total_cells()
            )));
        }
        if let Some(bad) = policy.action_of.iter().flatten().find(|a| a.0 >= action_grid.total_cells()) {
            return Err(invalid(format!("policy refers to action cell {bad} outside the action grid")));
        }
        let actions = (0..action_grid.total_cells())
            .map(|a| action_grid.center_unchecked(CellId(a)))
            .collect();
        Ok(RefinedController {
            policy,
            state_grid,
            action_grid,
            actions,
        })
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn state_grid(&self) -> &GridPartition {
        &self.state_grid
    }

    pub fn action_grid(&self) -> &GridPartition {
        &self.action_grid
    }

    /// Action applied at `state`.
    pub fn control(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = self.state_grid.quantize(state)?;
        let a = self.policy.action(s)?;
        Ok(self.actions[a.0].clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Verdict {
    pub reached: bool,
    pub steps_to_goal: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoop {
    pub trajectory: Trajectory,
    pub verdict: Verdict,
}

/// A simulation that stopped on an error, with the steps taken so far.
#[derive(Debug, Error)]
#[error("closed-loop simulation stopped after {} steps: {source}", partial.len())]
pub struct SimulationError {
    #[source]
    pub source: SymqError,
    pub partial: Trajectory,
}

/// Run `ξ ← f(ξ, control(ξ))` for up to `horizon` steps, stopping at the
/// first state satisfying `goal` (checked at `x0` too).
pub fn simulate_closed_loop(
    model: &SystemModel,
    ctrl: &RefinedController,
    x0: &[f64],
    horizon: usize,
    goal: impl Fn(&[f64]) -> bool,
) -> std::result::Result<ClosedLoop, SimulationError> {
    let mut traj = Trajectory::starting_at(x0.to_vec());
    if !model.state_space().contains(x0) || x0.len() != model.state_space().dim() {
        return Err(SimulationError {
            source: SymqError::Domain(format!("initial state {x0:?} outside the state box")),
            partial: traj,
        });
    }
    if goal(x0) {
        return Ok(ClosedLoop {
            trajectory: traj,
            verdict: Verdict {
                reached: true,
                steps_to_goal: Some(0),
            },
        });
    }
    for k in 0..horizon {
        let x = traj.last_state().to_vec();
        let step = ctrl.control(&x).and_then(|u| {
            let r = model.reward(&x, &u)?;
            let next = model.step(&x, &u)?;
            Ok((u, r, next))
        });
        let (u, r, next) = match step {
            Ok(v) => v,
            Err(source) => return Err(SimulationError { source, partial: traj }),
        };
        let done = goal(&next);
        traj.push(u, r, next);
        if done {
            return Ok(ClosedLoop {
                trajectory: traj,
                verdict: Verdict {
                    reached: true,
                    steps_to_goal: Some(k + 1),
                },
            });
        }
    }
    Ok(ClosedLoop {
        trajectory: traj,
        verdict: Verdict {
            reached: false,
            steps_to_goal: None,
        },
    })
}

/// Closed infinity-norm ball goal.
pub fn ball_goal(center: Vec<f64>, radius: f64) -> impl Fn(&[f64]) -> bool + Clone {
    move |x| x.iter().zip(&center).all(|(a, b)| (a - b).abs() <= radius)
}

/// Cells lying entirely inside the infinity-norm ball, as a training mask.
pub fn ball_mask(grid: &GridPartition, center: &[f64], radius: f64) -> Vec<bool> {
    let r = radius * (1.0 + 1e-12);
    goal_mask(grid, |cell| {
        cell.lower.iter().zip(&cell.upper).zip(center).all(|((lo, hi), c)| c - lo <= r && hi - c <= r)
    })
}

/// Goal on a single axis: `x[axis] >= threshold`.
pub fn axis_goal(axis: usize, threshold: f64) -> impl Fn(&[f64]) -> bool + Clone {
    move |x| x[axis] >= threshold
}

/// Cells whose closure meets the goal region, as a mask for training.
pub fn goal_mask(grid: &GridPartition, in_goal: impl Fn(&crate::dynamics::CellBox) -> bool) -> Vec<bool> {
    (0..grid.total_cells())
        .map(|s| in_goal(&grid.cell_bounds_unchecked(CellId(s))))
        .collect()
}
