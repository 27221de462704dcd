//! Fixtures shared by the pipeline benchmarks.

use symq_core::abstraction::action_grid_for;
use symq_core::dynamics::mountain_car;
use symq_core::{build_symbolic_model, AbstractionOptions, GridPartition, LearnConfig, Result, SymbolicModel, SystemModel};

/// Mountain car with `n` state cells per axis and three action cells.
pub fn mountain_car_grids(n: usize) -> Result<(SystemModel, GridPartition, GridPartition)> {
    let model = mountain_car();
    let sg = GridPartition::with_cells(model.state_space().clone(), &[n, n])?;
    let ag = action_grid_for(&model, 3)?;
    Ok((model, sg, ag))
}

pub fn mountain_car_abstraction(n: usize) -> Result<SymbolicModel> {
    let (model, sg, ag) = mountain_car_grids(n)?;
    let options = AbstractionOptions::for_model(&model);
    build_symbolic_model(&model, sg, ag, options)
}

/// Short training budget, enough to exercise the update loop.
pub fn short_training(seed: u64) -> LearnConfig {
    LearnConfig {
        gamma: 0.9,
        episodes: 50,
        max_steps_per_episode: 200,
        seed,
        ..LearnConfig::default()
    }
}
