//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected. Unset values fall back to per-system defaults, and the
//! resolved values are written to each run's metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use symq_core::abstraction::action_grid_for;
use symq_core::dynamics::builtin;
use symq_core::experiments::{ExperimentKind, ExperimentSpec, GoalSpec};
use symq_core::persist::Metadata;
use symq_core::{
    AbstractionOptions, AlphaSchedule, BoxDomain, GridPartition, LearnConfig, LipschitzBounds, Result,
    StartDistribution, SymqError, SystemModel,
};

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default)]
    pub abstraction: AbstractionSection,
    #[serde(default)]
    pub lipschitz: LipschitzSection,
    #[serde(default)]
    pub learning: LearningSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub inputs: InputsSection,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AbstractionSection {
    pub n_state_cells: Option<usize>,
    pub eta: Option<f64>,
    pub n_action_cells: Option<usize>,
    pub mu: Option<f64>,
    pub inflation: Option<String>,
    pub enabling: Option<String>,
    pub reward_bounds: Option<String>,
    pub clipping: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSection {
    pub l_f_state: Option<f64>,
    pub l_f_action: Option<f64>,
    pub l_g_state: Option<f64>,
    pub l_g_action: Option<f64>,
    pub l_admissible: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum AlphaValue {
    Constant(f64),
    Named(String),
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartConfig {
    UniformCells,
    Point { state: Vec<f64> },
    Region { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    /// `q_learning` (default) or `value_iteration`.
    pub method: Option<String>,
    pub gamma: Option<f64>,
    pub alpha: Option<AlphaValue>,
    pub epsilon_explore: Option<f64>,
    pub episodes: Option<usize>,
    pub max_steps: Option<usize>,
    pub seed: Option<u64>,
    pub successor_selection: Option<String>,
    pub greedy_table: Option<String>,
    pub q_init: Option<f64>,
    pub start: Option<StartConfig>,
    pub tolerance: Option<f64>,
    pub max_sweeps: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GoalConfig {
    Threshold { axis: usize, value: f64 },
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub initial_state: Option<Vec<f64>>,
    pub horizon: Option<usize>,
    pub goal: Option<GoalConfig>,
    /// `q_max` or `q_min`: which policy file of a `policy` run to use when
    /// no policy input is given.
    pub policy: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub state_cells: Option<Vec<usize>>,
    pub action_cells: Option<Vec<usize>>,
    pub bound_horizon: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub abstraction: Option<PathBuf>,
    pub qtables: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> SymqError {
    SymqError::InvalidArgument(msg.into())
}

fn positive(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(bad(format!("{name} must be positive, got {x}"))),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| bad(format!("config: {}", e.message())))
    }

    /// Read a config and resolve its input paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.inputs.abstraction, &mut cfg.inputs.qtables, &mut cfg.inputs.policy]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.abstraction;
        positive("eta", a.eta)?;
        positive("mu", a.mu)?;
        if a.n_state_cells == Some(0) {
            return Err(bad("n_state_cells must be >= 1"));
        }
        if a.n_action_cells == Some(0) {
            return Err(bad("n_action_cells must be >= 1"));
        }
        if a.eta.is_some() && a.n_state_cells.is_some() {
            return Err(bad("set either eta or n_state_cells, not both"));
        }
        if a.mu.is_some() && a.n_action_cells.is_some() {
            return Err(bad("set either mu or n_action_cells, not both"));
        }
        self.options(&self.model()?)?;
        self.learn_config(&LearnConfig::default())?.validate()?;
        if let Some(m) = &self.learning.method {
            if m != "q_learning" && m != "value_iteration" {
                return Err(bad(format!("method must be q_learning or value_iteration, got {m:?}")));
            }
        }
        positive("tolerance", self.learning.tolerance)?;
        if let Some(g) = self.analysis.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(bad(format!("analysis gamma must lie in (0, 1), got {g}")));
            }
        }
        if let Some(p) = &self.simulation.policy {
            if p != "q_max" && p != "q_min" {
                return Err(bad(format!("simulation policy must be q_max or q_min, got {p:?}")));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> &str {
        self.system.as_deref().unwrap_or("mountain_car")
    }

    /// Built-in model with clipping and Lipschitz overrides applied.
    pub fn model(&self) -> Result<SystemModel> {
        let mut m = builtin(self.system())?;
        if let Some(c) = self.abstraction.clipping {
            m = m.with_clipping(c);
        }
        let l = &self.lipschitz;
        let base = m.lipschitz().clone();
        m.set_lipschitz(LipschitzBounds {
            l_f_state: l.l_f_state.unwrap_or(base.l_f_state),
            l_f_action: l.l_f_action.unwrap_or(base.l_f_action),
            l_g_state: l.l_g_state.unwrap_or(base.l_g_state),
            l_g_action: l.l_g_action.unwrap_or(base.l_g_action),
            l_admissible: l.l_admissible.or(base.l_admissible),
        })?;
        Ok(m)
    }

    pub fn options(&self, model: &SystemModel) -> Result<AbstractionOptions> {
        let mut o = AbstractionOptions::for_model(model);
        if let Some(s) = &self.abstraction.inflation {
            o.inflation = s.parse()?;
        }
        if let Some(s) = &self.abstraction.enabling {
            o.enabling = s.parse()?;
        }
        if let Some(s) = &self.abstraction.reward_bounds {
            o.reward = s.parse()?;
        }
        Ok(o)
    }

    pub fn state_grid(&self, model: &SystemModel) -> Result<GridPartition> {
        let dom = model.state_space().clone();
        match (self.abstraction.eta, self.abstraction.n_state_cells) {
            (Some(eta), _) => GridPartition::new(dom, vec![eta; model.state_space().dim()]),
            (None, n) => GridPartition::with_cells(dom, &vec![n.unwrap_or(40); model.state_space().dim()]),
        }
    }

    pub fn action_grid(&self, model: &SystemModel) -> Result<GridPartition> {
        match self.abstraction.mu {
            Some(_) if model.action_levels().is_some() => Err(bad(format!(
                "mu does not apply to {}, whose actions are discrete levels; set n_action_cells",
                model.name()
            ))),
            Some(mu) => GridPartition::new(model.action_space().clone(), vec![mu; model.action_space().dim()]),
            None => action_grid_for(model, self.abstraction.n_action_cells.unwrap_or(3)),
        }
    }

    /// Learning settings over `base`, with explicit config values winning.
    pub fn learn_config(&self, base: &LearnConfig) -> Result<LearnConfig> {
        let l = &self.learning;
        let mut c = base.clone();
        if let Some(g) = l.gamma {
            c.gamma = g;
        }
        if let Some(a) = &l.alpha {
            c.alpha = match a {
                AlphaValue::Constant(x) => AlphaSchedule::Constant(*x),
                AlphaValue::Named(s) if s == "harmonic" => AlphaSchedule::VisitHarmonic,
                AlphaValue::Named(s) => return Err(bad(format!("alpha must be a number or \"harmonic\", got {s:?}"))),
            };
        }
        if let Some(e) = l.epsilon_explore {
            c.epsilon_explore = e;
        }
        if let Some(e) = l.episodes {
            c.episodes = e;
        }
        if let Some(m) = l.max_steps {
            c.max_steps_per_episode = m;
        }
        if let Some(s) = l.seed {
            c.seed = s;
        }
        if let Some(s) = &l.successor_selection {
            c.successor_selection = s.parse()?;
        }
        if let Some(s) = &l.greedy_table {
            c.greedy_table = s.parse()?;
        }
        if let Some(q) = l.q_init {
            c.q_init = q;
        }
        if let Some(s) = &l.start {
            c.start = match s {
                StartConfig::UniformCells => StartDistribution::UniformCells,
                StartConfig::Point { state } => StartDistribution::Point(state.clone()),
                StartConfig::Region { lower, upper } => {
                    StartDistribution::Region(BoxDomain::new(lower.clone(), upper.clone())?)
                }
            };
        }
        Ok(c)
    }

    fn base_kind(&self) -> ExperimentKind {
        if self.system() == "van_der_pol" {
            ExperimentKind::Vdp
        } else {
            ExperimentKind::Exp1
        }
    }

    /// Learning settings for the single-run commands.
    pub fn training(&self, seed: Option<u64>) -> Result<LearnConfig> {
        let mut c = self.learn_config(&ExperimentSpec::default_for(self.base_kind()).learn)?;
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.simulation
            .initial_state
            .clone()
            .unwrap_or_else(|| ExperimentSpec::default_for(self.base_kind()).initial_state)
    }

    pub fn horizon(&self) -> usize {
        self.simulation
            .horizon
            .unwrap_or_else(|| ExperimentSpec::default_for(self.base_kind()).horizon)
    }

    pub fn goal(&self) -> GoalSpec {
        match &self.simulation.goal {
            Some(GoalConfig::Threshold { axis, value }) => GoalSpec::Threshold { axis: *axis, value: *value },
            Some(GoalConfig::Ball { center, radius }) => GoalSpec::Ball { center: center.clone(), radius: *radius },
            None => ExperimentSpec::default_for(self.base_kind()).goal,
        }
    }

    /// Experiment spec: built-in defaults for `kind`, overridden by the
    /// config and then by `seed`.
    pub fn experiment_spec(&self, kind: ExperimentKind, seed: Option<u64>) -> Result<ExperimentSpec> {
        let mut s = ExperimentSpec::default_for(kind);
        if let Some(sys) = &self.system {
            s.system = sys.clone();
        }
        s.learn = self.learn_config(&s.learn)?;
        if let Some(seed) = seed {
            s.learn.seed = seed;
        }
        let a = &self.abstraction;
        if let Some(n) = a.n_state_cells {
            s.state_cells = vec![n];
            s.state_spacing = None;
        }
        if a.eta.is_some() {
            s.state_spacing = a.eta;
        }
        if let Some(n) = a.n_action_cells {
            s.action_cells = vec![n];
        }
        let e = &self.experiment;
        if let Some(v) = &e.state_cells {
            s.state_cells = v.clone();
            s.state_spacing = None;
        }
        if let Some(v) = &e.action_cells {
            s.action_cells = v.clone();
        }
        if let Some(h) = e.bound_horizon {
            s.bound_horizon = h;
        }
        if let Some(x) = &self.simulation.initial_state {
            s.initial_state = x.clone();
        }
        if let Some(h) = self.simulation.horizon {
            s.horizon = h;
        }
        if self.simulation.goal.is_some() {
            s.goal = self.goal();
        }
        let model = self.model()?;
        if self.abstraction.inflation.is_some() || self.abstraction.enabling.is_some() || self.abstraction.reward_bounds.is_some() {
            s.abstraction = Some(self.options(&model)?);
        }
        s.validate()?;
        Ok(s)
    }

    /// Resolved learning values as metadata.
    pub fn learn_metadata(c: &LearnConfig) -> Metadata {
        let mut md = Metadata::new();
        md.set("gamma", c.gamma);
        md.set("alpha", c.alpha);
        md.set("epsilon_explore", c.epsilon_explore);
        md.set("episodes", c.episodes);
        md.set("max_steps", c.max_steps_per_episode);
        md.set("seed", c.seed);
        md.set("prng", symq_core::rng::ALGORITHM);
        md.set("successor_selection", c.successor_selection);
        md.set("greedy_table", c.greedy_table);
        md.set("q_init", c.q_init);
        md.set("start_distribution", &c.start);
        md
    }
}
