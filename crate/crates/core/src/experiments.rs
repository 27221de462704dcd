//! Scripted pipelines for the mountain-car experiments and the Van der Pol
//! comparison.
//!
//! Every run returns its files in memory (name to bytes) so callers decide
//! where they go. Outputs contain no timestamps or host data: the same spec
//! and seed give byte-identical files for any rayon pool size.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::abstraction::{action_grid_for, build_symbolic_model, AbstractionOptions, GridPartition, SymbolicModel};
use crate::analysis::{
    effective_bounds, lipschitz_recursion, nonsimilarity_ratio, precision_bound_max, q_distance,
};
use crate::dynamics::{builtin, BoxDomain, LipschitzBounds, SystemModel, Trajectory};
use crate::error::{invalid, Result, SymqError};
use crate::learner::{
    extract_policy, symbolic_double_q_learning, uniform_q_learning, AlphaSchedule, GreedyTable, LearnConfig,
    PolicyTable, StartDistribution, SymbolicLearning, TrainingReport, Which,
};
use crate::persist::{
    export_policy, export_qtable_pair, export_symbolic_model, export_trajectory, put_lipschitz, table_csv,
    ArtifactSet, Metadata, FORMAT_VERSION,
};
use crate::refinement::{ball_goal, ball_mask, goal_mask, simulate_closed_loop, RefinedController, Verdict};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    Exp1,
    Exp2,
    Exp3,
    Vdp,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [Self::Exp1, Self::Exp2, Self::Exp3, Self::Vdp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Exp1 => "exp1",
            Self::Exp2 => "exp2",
            Self::Exp3 => "exp3",
            Self::Vdp => "vdp",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = SymqError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown experiment {s:?} (expected exp1, exp2, exp3 or vdp)")))
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Goal region used for training masks and closed-loop verdicts.
#[derive(Clone, Debug, PartialEq)]
pub enum GoalSpec {
    /// `x[axis] >= value`.
    Threshold { axis: usize, value: f64 },
    /// Closed infinity-norm ball.
    Ball { center: Vec<f64>, radius: f64 },
}

impl GoalSpec {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            GoalSpec::Threshold { axis, value } => x[*axis] >= *value,
            GoalSpec::Ball { center, radius } => ball_goal(center.clone(), *radius)(x),
        }
    }

    /// Threshold goals mark every cell reaching the threshold; ball goals
    /// mark the cells lying inside the ball.
    pub fn mask(&self, grid: &GridPartition) -> Vec<bool> {
        match self {
            GoalSpec::Threshold { axis, value } => goal_mask(grid, |c| c.upper[*axis] >= *value),
            GoalSpec::Ball { center, radius } => ball_mask(grid, center, *radius),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            GoalSpec::Threshold { axis, value } if *axis >= dim || !value.is_finite() => {
                Err(invalid(format!("goal threshold on axis {axis} is not usable in dimension {dim}")))
            }
            GoalSpec::Ball { center, radius } if center.len() != dim || !(*radius > 0.0) => {
                Err(invalid("goal ball needs a center of the state dimension and a positive radius"))
            }
            _ => Ok(()),
        }
    }

    fn describe(&self) -> String {
        match self {
            GoalSpec::Threshold { axis, value } => format!("x{} >= {value}", axis + 1),
            GoalSpec::Ball { center, radius } => format!("|x - {center:?}|_inf <= {radius}"),
        }
    }
}

/// Everything an experiment needs. `state_cells` and `action_cells` are swept
/// by the grid experiments; the single-run experiments use their first entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub system: String,
    /// Cells per state axis (`n_ξ`).
    pub state_cells: Vec<usize>,
    /// Action cells or levels (`n_v`).
    pub action_cells: Vec<usize>,
    /// Per-axis state spacing `η`; overrides `state_cells` when set.
    pub state_spacing: Option<f64>,
    pub learn: LearnConfig,
    /// `None` picks [`AbstractionOptions::for_model`].
    pub abstraction: Option<AbstractionOptions>,
    pub initial_state: Vec<f64>,
    pub horizon: usize,
    pub goal: GoalSpec,
    /// Sweeps over which the precision bound is maximized.
    pub bound_horizon: usize,
}

fn mountain_car_goal() -> GoalSpec {
    GoalSpec::Threshold { axis: 0, value: 0.6 }
}

impl ExperimentSpec {
    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::Exp1 => ExperimentSpec {
                system: "mountain_car".into(),
                state_cells: vec![160],
                action_cells: vec![3],
                state_spacing: None,
                learn: LearnConfig {
                    gamma: 0.99,
                    alpha: AlphaSchedule::Constant(0.4),
                    epsilon_explore: 0.4,
                    episodes: 5000,
                    max_steps_per_episode: 1000,
                    start: StartDistribution::Region(
                        BoxDomain::new(vec![-0.6, -1e-4], vec![-0.4, 1e-4]).expect("valid box"),
                    ),
                    ..LearnConfig::default()
                },
                abstraction: None,
                initial_state: vec![-0.5, 0.0],
                horizon: 1000,
                goal: mountain_car_goal(),
                bound_horizon: 200,
            },
            ExperimentKind::Exp2 | ExperimentKind::Exp3 => ExperimentSpec {
                system: "mountain_car".into(),
                state_cells: if kind == ExperimentKind::Exp2 {
                    vec![40, 80, 160]
                } else {
                    vec![40, 60, 80, 100, 120, 140, 160]
                },
                action_cells: if kind == ExperimentKind::Exp2 { vec![3, 6, 12] } else { vec![3] },
                state_spacing: None,
                learn: LearnConfig {
                    gamma: 0.5,
                    alpha: AlphaSchedule::Constant(0.4),
                    epsilon_explore: 0.4,
                    episodes: 500,
                    max_steps_per_episode: 500,
                    start: StartDistribution::UniformCells,
                    ..LearnConfig::default()
                },
                abstraction: None,
                initial_state: vec![-0.5, 0.0],
                horizon: 1000,
                goal: mountain_car_goal(),
                bound_horizon: 200,
            },
            ExperimentKind::Vdp => ExperimentSpec {
                system: "van_der_pol".into(),
                state_cells: vec![80],
                action_cells: vec![3],
                state_spacing: Some(0.05),
                learn: LearnConfig {
                    gamma: 0.9,
                    alpha: AlphaSchedule::Constant(0.5),
                    epsilon_explore: 0.1,
                    episodes: 2000,
                    max_steps_per_episode: 1000,
                    start: StartDistribution::UniformCells,
                    ..LearnConfig::default()
                },
                abstraction: None,
                initial_state: vec![1.5, 0.0],
                horizon: 5000,
                goal: GoalSpec::Ball { center: vec![0.0, 0.0], radius: 0.2 },
                bound_horizon: 200,
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.learn.seed = seed;
        self
    }

    pub fn model(&self) -> Result<SystemModel> {
        builtin(&self.system)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        self.learn.validate()?;
        if self.state_cells.is_empty() || self.state_cells.contains(&0) {
            return Err(invalid("state_cells must be a non-empty list of positive counts"));
        }
        if self.action_cells.is_empty() || self.action_cells.contains(&0) {
            return Err(invalid("action_cells must be a non-empty list of positive counts"));
        }
        if let Some(eta) = self.state_spacing {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(invalid(format!("eta must be positive, got {eta}")));
            }
        }
        if self.initial_state.len() != model.state_space().dim() || !model.state_space().contains(&self.initial_state) {
            return Err(invalid(format!("initial_state {:?} is outside the state box", self.initial_state)));
        }
        if self.bound_horizon == 0 {
            return Err(invalid("bound_horizon must be >= 1"));
        }
        self.goal.validate(model.state_space().dim())
    }

    fn require_system(&self, name: &str, kind: ExperimentKind) -> Result<()> {
        if self.system != name {
            return Err(invalid(format!("{kind} runs on {name}, not {:?}", self.system)));
        }
        Ok(())
    }

    fn options(&self, model: &SystemModel) -> AbstractionOptions {
        self.abstraction.unwrap_or_else(|| AbstractionOptions::for_model(model))
    }

    fn state_grid(&self, model: &SystemModel, n: usize) -> Result<GridPartition> {
        match self.state_spacing {
            Some(eta) => GridPartition::new(model.state_space().clone(), vec![eta; model.state_space().dim()]),
            None => GridPartition::with_cells(model.state_space().clone(), &vec![n; model.state_space().dim()]),
        }
    }

    /// Spec entries as metadata, every default spelled out.
    pub fn metadata(&self) -> Metadata {
        let mut md = Metadata::new();
        let list = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(";");
        md.set("system", &self.system);
        md.set("state_cells", list(&self.state_cells));
        md.set("action_cells", list(&self.action_cells));
        md.set("eta", self.state_spacing.map_or_else(|| "from_cells".to_string(), |e| e.to_string()));
        md.set("gamma", self.learn.gamma);
        md.set("alpha", self.learn.alpha);
        md.set("epsilon_explore", self.learn.epsilon_explore);
        md.set("episodes", self.learn.episodes);
        md.set("max_steps", self.learn.max_steps_per_episode);
        md.set("seed", self.learn.seed);
        md.set("prng", rng::ALGORITHM);
        md.set("successor_selection", self.learn.successor_selection);
        md.set("greedy_table", self.learn.greedy_table);
        md.set("q_init", self.learn.q_init);
        md.set("start_distribution", &self.learn.start);
        md.set("initial_state", crate::persist::join_floats(&self.initial_state));
        md.set("horizon", self.horizon);
        md.set("goal", self.goal.describe());
        md.set("bound_horizon", self.bound_horizon);
        md
    }
}

/// One trained abstraction with the quantities every experiment reports.
struct TrainedCell {
    sym: SymbolicModel,
    learned: SymbolicLearning,
    bounds: LipschitzBounds,
    epsilon: f64,
    hash: String,
}

fn train_cell(spec: &ExperimentSpec, model: &SystemModel, n_state: usize, n_action: usize) -> Result<TrainedCell> {
    let sg = spec.state_grid(model, n_state)?;
    let ag = action_grid_for(model, n_action)?;
    let sym = build_symbolic_model(model, sg, ag, spec.options(model))?;
    let mask = spec.goal.mask(sym.state_grid());
    let learned = symbolic_double_q_learning(&sym, Some(&mask), &spec.learn)?;
    let bounds = effective_bounds(model, sym.state_grid(), sym.action_grid());
    let seq = lipschitz_recursion(&bounds, spec.learn.gamma, spec.bound_horizon)?;
    let epsilon = precision_bound_max(&seq, sym.state_grid().spacing_max(), sym.action_grid().spread());
    let hash = export_symbolic_model(&sym, model.name(), &bounds)?.hash();
    Ok(TrainedCell {
        sym,
        learned,
        bounds,
        epsilon,
        hash,
    })
}

fn put_training(md: &mut Metadata, prefix: &str, r: &TrainingReport) {
    md.set(format!("{prefix}episodes_run"), r.episodes);
    md.set(format!("{prefix}training_steps"), r.steps);
    md.set(format!("{prefix}goal_episodes"), r.goal_episodes);
    md.set(format!("{prefix}sink_events"), r.sink_events);
    md.set(format!("{prefix}ordering_violations"), r.ordering_violations);
}

fn header(md: &mut Metadata, kind: ExperimentKind) {
    md.set("format_version", FORMAT_VERSION);
    md.set("experiment", kind);
    md.set("crate_version", env!("CARGO_PKG_VERSION"));
}

/// Closed-loop outcome. A controller that stops on an error (for instance a
/// sink cell) counts as not reaching the goal; the message is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopOutcome {
    pub verdict: Verdict,
    pub trajectory: Trajectory,
    pub error: Option<String>,
}

fn run_closed_loop(model: &SystemModel, ctrl: &RefinedController, spec: &ExperimentSpec) -> ClosedLoopOutcome {
    let goal = |x: &[f64]| spec.goal.contains(x);
    match simulate_closed_loop(model, ctrl, &spec.initial_state, spec.horizon, goal) {
        Ok(cl) => ClosedLoopOutcome {
            verdict: cl.verdict,
            trajectory: cl.trajectory,
            error: None,
        },
        Err(e) => ClosedLoopOutcome {
            verdict: Verdict {
                reached: false,
                steps_to_goal: None,
            },
            error: Some(e.source.to_string()),
            trajectory: e.partial,
        },
    }
}

fn put_outcome(md: &mut Metadata, prefix: &str, o: &ClosedLoopOutcome) {
    md.set(format!("{prefix}_reached"), o.verdict.reached);
    md.set(
        format!("{prefix}_steps_to_goal"),
        o.verdict.steps_to_goal.map_or_else(|| "none".to_string(), |k| k.to_string()),
    );
    if let Some(e) = &o.error {
        md.set(format!("{prefix}_error"), e);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment1 {
    pub q_min: ClosedLoopOutcome,
    pub q_max: ClosedLoopOutcome,
    pub policy_min: PolicyTable,
    pub policy_max: PolicyTable,
    pub report: TrainingReport,
    pub files: ArtifactSet,
}

const EXP1_PLOT: &str = "\
set datafile separator ','
set key autotitle columnhead
set terminal pngcairo size 900,600
set output 'trajectories.png'
set xlabel 'step'
set ylabel 'position'
plot 'trajectory_qmin.csv' using 1:2 with lines title 'policy from q_min', \\
     'trajectory_qmax.csv' using 1:2 with lines title 'policy from q_max', \\
     0.6 with lines dashtype 2 title 'goal'
set xlabel 'position'
set ylabel 'velocity'
set palette defined (0 'blue', 1 'skyblue', 2 'yellow')
set output 'policy_qmin.png'
plot 'policy_qmin.csv' using 2:3:4 with points pointtype 5 pointsize 0.4 palette notitle
set output 'policy_qmax.png'
plot 'policy_qmax.csv' using 2:3:4 with points pointtype 5 pointsize 0.4 palette notitle
";

/// Train on the mountain car, extract both policies and drive the car from
/// the initial state with each.
pub fn run_experiment_1(spec: &ExperimentSpec) -> Result<Experiment1> {
    spec.validate()?;
    spec.require_system("mountain_car", ExperimentKind::Exp1)?;
    let model = spec.model()?;
    let cell = train_cell(spec, &model, spec.state_cells[0], spec.action_cells[0])?;
    let (sg, ag) = (cell.sym.state_grid(), cell.sym.action_grid());
    let policy_min = extract_policy(&cell.learned.pair, Which::Min);
    let policy_max = extract_policy(&cell.learned.pair, Which::Max);
    let ctrl_min = RefinedController::new(policy_min.clone(), sg.clone(), ag.clone())?;
    let ctrl_max = RefinedController::new(policy_max.clone(), sg.clone(), ag.clone())?;
    let (q_min, q_max) = rayon::join(
        || run_closed_loop(&model, &ctrl_min, spec),
        || run_closed_loop(&model, &ctrl_max, spec),
    );

    let mut files = ArtifactSet::new();
    files.insert("policy_qmin.csv".into(), export_policy(&policy_min, sg, ag)?);
    files.insert("policy_qmax.csv".into(), export_policy(&policy_max, sg, ag)?);
    files.insert("trajectory_qmin.csv".into(), export_trajectory(&q_min.trajectory)?);
    files.insert("trajectory_qmax.csv".into(), export_trajectory(&q_max.trajectory)?);
    files.insert("qtables.csv".into(), export_qtable_pair(&cell.learned.pair)?);
    files.insert("plot.gp".into(), EXP1_PLOT.as_bytes().to_vec());

    let mut md = Metadata::new();
    header(&mut md, ExperimentKind::Exp1);
    md.extend(&spec.metadata());
    put_lipschitz(&mut md, &cell.bounds);
    md.set("abstraction_hash", &cell.hash);
    md.set("epsilon_implied", cell.epsilon);
    md.set("q_distance", q_distance(&cell.learned.pair));
    md.set("rho", nonsimilarity_ratio(&policy_min, &policy_max)?);
    put_training(&mut md, "", &cell.learned.report);
    put_outcome(&mut md, "qmin", &q_min);
    put_outcome(&mut md, "qmax", &q_max);
    files.insert("run.meta".into(), md.render().into_bytes());

    Ok(Experiment1 {
        q_min,
        q_max,
        policy_min,
        policy_max,
        report: cell.learned.report,
        files,
    })
}

/// Reference precision values `(n_v, n_ξ, value)`.
pub const REFERENCE_TABLE: [(usize, usize, f64); 9] = [
    (3, 40, 2.0),
    (3, 80, 1.11),
    (3, 160, 1.27),
    (6, 40, 1.99),
    (6, 80, 1.8295),
    (6, 160, 1.1424),
    (12, 40, 1.98),
    (12, 80, 1.18),
    (12, 160, 0.8558),
];

pub fn reference_value(n_action: usize, n_state: usize) -> Option<f64> {
    REFERENCE_TABLE
        .iter()
        .find(|(v, x, _)| *v == n_action && *x == n_state)
        .map(|e| e.2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exp2Row {
    pub n_state: usize,
    pub n_action: usize,
    pub q_distance: f64,
    pub bound: f64,
    pub reference: Option<f64>,
    pub abstraction_hash: String,
    pub l_g_state: f64,
    pub l_admissible: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment2 {
    /// Rows ordered by `n_v`, then `n_ξ`.
    pub rows: Vec<Exp2Row>,
    pub files: ArtifactSet,
}

impl Experiment2 {
    pub fn get(&self, n_action: usize, n_state: usize) -> Option<&Exp2Row> {
        self.rows.iter().find(|r| r.n_action == n_action && r.n_state == n_state)
    }
}

fn grid_pairs(spec: &ExperimentSpec) -> Vec<(usize, usize)> {
    spec.action_cells
        .iter()
        .flat_map(|&nv| spec.state_cells.iter().map(move |&nx| (nv, nx)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Learned `max |q̄ − q̲|` over the `(n_v, n_ξ)` grid beside its bound.
pub fn run_experiment_2(spec: &ExperimentSpec) -> Result<Experiment2> {
    spec.validate()?;
    spec.require_system("mountain_car", ExperimentKind::Exp2)?;
    let model = spec.model()?;
    let rows = grid_pairs(spec)
        .into_par_iter()
        .map(|(nv, nx)| {
            let cell = train_cell(spec, &model, nx, nv)?;
            Ok(Exp2Row {
                n_state: nx,
                n_action: nv,
                q_distance: q_distance(&cell.learned.pair),
                bound: cell.epsilon,
                reference: reference_value(nv, nx),
                abstraction_hash: cell.hash,
                l_g_state: cell.bounds.l_g_state,
                l_admissible: cell.bounds.l_admissible.unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files = ArtifactSet::new();
    let long: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_action.to_string(),
                r.n_state.to_string(),
                r.q_distance.to_string(),
                r.bound.to_string(),
                (r.q_distance <= r.bound).to_string(),
                opt(r.reference),
                r.l_g_state.to_string(),
                r.l_admissible.to_string(),
                r.abstraction_hash.clone(),
            ]
        })
        .collect();
    files.insert(
        "cells.csv".into(),
        table_csv(
            &["n_v", "n_xi", "q_distance", "bound", "within_bound", "reference", "l_g_state", "l_admissible", "abstraction_hash"],
            &long,
        )?,
    );

    let mut head = vec!["n_v".to_string()];
    for nx in &spec.state_cells {
        head.push(format!("measured_{nx}"));
        head.push(format!("bound_{nx}"));
        head.push(format!("reference_{nx}"));
    }
    let wide: Vec<Vec<String>> = spec
        .action_cells
        .iter()
        .map(|&nv| {
            let mut row = vec![nv.to_string()];
            for &nx in &spec.state_cells {
                let r = rows.iter().find(|r| r.n_action == nv && r.n_state == nx).expect("row for every pair");
                row.extend([r.q_distance.to_string(), r.bound.to_string(), opt(r.reference)]);
            }
            row
        })
        .collect();
    let head_refs: Vec<&str> = head.iter().map(String::as_str).collect();
    files.insert("table.csv".into(), table_csv(&head_refs, &wide)?);
    files.insert(
        "plot.gp".into(),
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n\
         set output 'q_distance.png'\nset xlabel 'n_xi'\nset ylabel 'max |q_max - q_min|'\nset logscale x 2\n\
         plot for [v in '3 6 12'] 'cells.csv' using 2:($1 == v ? $3 : 1/0) with linespoints title 'n_v = '.v\n"
            .as_bytes()
            .to_vec(),
    );

    let mut md = Metadata::new();
    header(&mut md, ExperimentKind::Exp2);
    md.extend(&spec.metadata());
    put_lipschitz(&mut md, model.lipschitz());
    md.set("all_within_bound", rows.iter().all(|r| r.q_distance <= r.bound));
    for r in &rows {
        md.set(format!("abstraction_hash_{}_{}", r.n_action, r.n_state), &r.abstraction_hash);
        md.set(format!("epsilon_implied_{}_{}", r.n_action, r.n_state), r.bound);
    }
    files.insert("run.meta".into(), md.render().into_bytes());
    Ok(Experiment2 { rows, files })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exp3Point {
    pub n_state: usize,
    pub rho: f64,
    pub differing: usize,
    pub abstraction_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment3 {
    pub points: Vec<Exp3Point>,
    pub files: ArtifactSet,
}

/// Non-similarity ratio of the two extracted policies against `n_ξ`.
pub fn run_experiment_3(spec: &ExperimentSpec) -> Result<Experiment3> {
    spec.validate()?;
    spec.require_system("mountain_car", ExperimentKind::Exp3)?;
    let model = spec.model()?;
    let nv = spec.action_cells[0];
    let points = spec
        .state_cells
        .par_iter()
        .map(|&nx| {
            let cell = train_cell(spec, &model, nx, nv)?;
            let p_min = extract_policy(&cell.learned.pair, Which::Min);
            let p_max = extract_policy(&cell.learned.pair, Which::Max);
            let rho = nonsimilarity_ratio(&p_min, &p_max)?;
            let differing = p_min.action_of.iter().zip(&p_max.action_of).filter(|(a, b)| a != b).count();
            Ok(Exp3Point {
                n_state: nx,
                rho,
                differing,
                abstraction_hash: cell.hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![p.n_state.to_string(), p.rho.to_string(), p.differing.to_string()])
        .collect();
    let mut files = ArtifactSet::new();
    files.insert("rho.csv".into(), table_csv(&["n_xi", "rho", "differing_cells"], &rows)?);
    files.insert(
        "plot.gp".into(),
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n\
         set output 'rho.png'\nset xlabel 'n_xi'\nset ylabel 'rho'\nset yrange [0:1]\n\
         plot 'rho.csv' using 1:2 with linespoints notitle\n"
            .as_bytes()
            .to_vec(),
    );
    let mut md = Metadata::new();
    header(&mut md, ExperimentKind::Exp3);
    md.extend(&spec.metadata());
    put_lipschitz(&mut md, model.lipschitz());
    for p in &points {
        md.set(format!("abstraction_hash_{}", p.n_state), &p.abstraction_hash);
    }
    files.insert("run.meta".into(), md.render().into_bytes());
    Ok(Experiment3 { points, files })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VdpComparison {
    pub symbolic: ClosedLoopOutcome,
    pub uniform: ClosedLoopOutcome,
    pub report: TrainingReport,
    pub files: ArtifactSet,
}

const VDP_PLOT: &str = "\
set datafile separator ','
set key autotitle columnhead
set terminal pngcairo size 1200,600
set output 'vdp.png'
set multiplot layout 1,2
set xlabel 'x'
set ylabel 'v'
set parametric
set trange [0:2*pi]
set title 'uniform discretization'
plot 'trajectory_uniform.csv' using 2:3 with lines notitle, 0.2*cos(t), 0.2*sin(t) lc 'red' notitle
set title 'symbolic model'
plot 'trajectory_symbolic.csv' using 2:3 with lines notitle, 0.2*cos(t), 0.2*sin(t) lc 'red' notitle
unset multiplot
";

/// Symbolic double Q-learning against plain uniform-discretization
/// Q-learning on the Van der Pol oscillator, same grid and learning rates.
pub fn run_vdp_comparison(spec: &ExperimentSpec) -> Result<VdpComparison> {
    spec.validate()?;
    spec.require_system("van_der_pol", ExperimentKind::Vdp)?;
    let model = spec.model()?;
    let cell = train_cell(spec, &model, spec.state_cells[0], spec.action_cells[0])?;
    let (sg, ag) = (cell.sym.state_grid(), cell.sym.action_grid());
    let which = match spec.learn.greedy_table {
        GreedyTable::QMax => Which::Max,
        GreedyTable::QMin => Which::Min,
    };
    let symbolic_ctrl = RefinedController::new(extract_policy(&cell.learned.pair, which), sg.clone(), ag.clone())?;
    let uniform = uniform_q_learning(
        &model,
        sg.cells_per_axis(),
        spec.action_cells[0],
        Some(&spec.goal.mask(sg)),
        &spec.learn,
    )?;
    let uniform_ctrl = RefinedController::new(uniform.table.greedy_policy(), uniform.state_grid, uniform.action_grid)?;
    let (symbolic, uniform) = rayon::join(
        || run_closed_loop(&model, &symbolic_ctrl, spec),
        || run_closed_loop(&model, &uniform_ctrl, spec),
    );

    let mut files = ArtifactSet::new();
    files.insert("trajectory_symbolic.csv".into(), export_trajectory(&symbolic.trajectory)?);
    files.insert("trajectory_uniform.csv".into(), export_trajectory(&uniform.trajectory)?);
    files.insert("plot.gp".into(), VDP_PLOT.as_bytes().to_vec());
    let mut md = Metadata::new();
    header(&mut md, ExperimentKind::Vdp);
    md.extend(&spec.metadata());
    put_lipschitz(&mut md, &cell.bounds);
    md.set("abstraction_hash", &cell.hash);
    md.set("epsilon_implied", cell.epsilon);
    md.set("state_cells_per_axis", {
        let mut s = String::new();
        for (i, n) in sg.cells_per_axis().iter().enumerate() {
            let _ = write!(s, "{}{n}", if i > 0 { ";" } else { "" });
        }
        s
    });
    put_training(&mut md, "", &cell.learned.report);
    put_outcome(&mut md, "symbolic", &symbolic);
    put_outcome(&mut md, "uniform", &uniform);
    files.insert("run.meta".into(), md.render().into_bytes());
    Ok(VdpComparison {
        symbolic,
        uniform,
        report: cell.learned.report,
        files,
    })
}

/// Run any experiment and return its files.
pub fn run_experiment(kind: ExperimentKind, spec: &ExperimentSpec) -> Result<ArtifactSet> {
    Ok(match kind {
        ExperimentKind::Exp1 => run_experiment_1(spec)?.files,
        ExperimentKind::Exp2 => run_experiment_2(spec)?.files,
        ExperimentKind::Exp3 => run_experiment_3(spec)?.files,
        ExperimentKind::Vdp => run_vdp_comparison(spec)?.files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentSpec {
        let mut s = ExperimentSpec::default_for(kind);
        s.learn.episodes = 20;
        s.learn.max_steps_per_episode = 50;
        s.horizon = 50;
        match kind {
            ExperimentKind::Vdp => s.state_spacing = Some(0.5),
            ExperimentKind::Exp1 => s.state_cells = vec![12],
            _ => {
                s.state_cells = vec![8, 12];
                s.action_cells = vec![3, 4];
            }
        }
        s
    }

    #[test]
    fn kinds_parse() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("exp4".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn exp1_rejects_bad_gamma_and_wrong_system() {
        let mut s = small(ExperimentKind::Exp1);
        s.learn.gamma = 1.0;
        assert!(matches!(run_experiment_1(&s), Err(SymqError::InvalidArgument(_))));
        let mut s = small(ExperimentKind::Exp1);
        s.system = "van_der_pol".into();
        s.initial_state = vec![1.5, 0.0];
        assert!(run_experiment_1(&s).is_err());
    }

    #[test]
    fn exp1_files() {
        let out = run_experiment_1(&small(ExperimentKind::Exp1)).unwrap();
        let names: Vec<&str> = out.files.keys().map(String::as_str).collect();
        assert_eq!(
            names,
            vec!["plot.gp", "policy_qmax.csv", "policy_qmin.csv", "qtables.csv", "run.meta", "trajectory_qmax.csv", "trajectory_qmin.csv"]
        );
        let md = Metadata::parse(std::str::from_utf8(&out.files["run.meta"]).unwrap()).unwrap();
        for key in ["abstraction_hash", "l_f_state", "l_f_action", "l_g_state", "l_g_action", "epsilon_implied", "seed", "prng"] {
            assert!(md.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn exp2_rows_in_order_with_references() {
        let out = run_experiment_2(&small(ExperimentKind::Exp2)).unwrap();
        let order: Vec<(usize, usize)> = out.rows.iter().map(|r| (r.n_action, r.n_state)).collect();
        assert_eq!(order, vec![(3, 8), (3, 12), (4, 8), (4, 12)]);
        assert!(out.rows.iter().all(|r| r.reference.is_none()));
        assert_eq!(reference_value(3, 40), Some(2.0));
        assert_eq!(reference_value(12, 160), Some(0.8558));
        let table = String::from_utf8(out.files["table.csv"].clone()).unwrap();
        assert!(table.starts_with("n_v,measured_8,bound_8,reference_8,measured_12,"));
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn exp3_ratios_in_unit_interval() {
        let out = run_experiment_3(&small(ExperimentKind::Exp3)).unwrap();
        assert_eq!(out.points.len(), 2);
        assert!(out.points.iter().all(|p| (0.0..=1.0).contains(&p.rho)));
    }

    #[test]
    fn vdp_from_origin_reaches_immediately() {
        let mut s = small(ExperimentKind::Vdp);
        s.initial_state = vec![0.0, 0.0];
        let out = run_vdp_comparison(&s).unwrap();
        assert_eq!(out.symbolic.verdict.steps_to_goal, Some(0));
        assert_eq!(out.uniform.verdict.steps_to_goal, Some(0));
    }

    #[test]
    fn reruns_are_byte_identical() {
        for kind in ExperimentKind::ALL {
            let s = small(kind);
            assert_eq!(run_experiment(kind, &s).unwrap(), run_experiment(kind, &s).unwrap(), "{kind}");
        }
    }

    #[test]
    fn goal_specs() {
        let g = GoalSpec::Ball { center: vec![0.0, 0.0], radius: 0.2 };
        assert!(g.contains(&[0.1, 0.1]));
        assert!(g.contains(&[0.2, -0.2]));
        assert!(!g.contains(&[0.21, 0.0]));
        let t = mountain_car_goal();
        assert!(t.contains(&[0.6, 0.0]));
        assert!(!t.contains(&[0.59, 0.07]));
    }
}
