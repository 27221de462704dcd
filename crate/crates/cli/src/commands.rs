use std::path::{Path, PathBuf};

use symq_core::abstraction::build_symbolic_model;
use symq_core::analysis::{
    analysis_report, effective_bounds, lipschitz_recursion, nonsimilarity_ratio, precision_bound_max, q_distance,
};
use symq_core::experiments::{run_experiment, ExperimentKind};
use symq_core::learner::{extract_policy, symbolic_double_q_learning, ValueIteration};
use symq_core::persist::{
    content_hash, export_policy, export_qtable_pair, export_symbolic_model, export_trajectory, import_policy,
    import_qtable_pair, import_symbolic_model, read_verified, write_artifacts, ArtifactSet, Metadata,
};
use symq_core::refinement::{simulate_closed_loop, RefinedController};
use symq_core::{PolicySource, Result, SymbolicModel, SymqError, SystemModel, Which};

use crate::config::RunConfig;

/// Where a command writes, plus the pieces every run records.
pub struct RunContext {
    pub config: RunConfig,
    pub seed_override: Option<u64>,
    pub out_root: PathBuf,
    pub timestamp: String,
}

fn mismatch(msg: impl Into<String>) -> SymqError {
    SymqError::ArtifactMismatch(msg.into())
}

fn missing(what: &str) -> SymqError {
    SymqError::InvalidArgument(format!("inputs.{what} is required for this command"))
}

impl RunContext {
    fn seed(&self) -> Result<u64> {
        Ok(self.config.training(self.seed_override)?.seed)
    }

    fn run_dir(&self, name: &str, seed: u64) -> Result<PathBuf> {
        let base = format!("{name}_{}_seed{seed}", self.timestamp);
        let mut dir = self.out_root.join(&base);
        let mut n = 2;
        while dir.exists() {
            dir = self.out_root.join(format!("{base}_{n}"));
            n += 1;
        }
        Ok(dir)
    }

    fn common_metadata(&self, command: &str, seed: u64) -> Metadata {
        let mut md = Metadata::new();
        md.set("command", command);
        md.set("crate_version", env!("CARGO_PKG_VERSION"));
        md.set("system", self.config.system());
        md.set("seed", seed);
        md
    }

    fn finish(&self, name: &str, seed: u64, mut files: ArtifactSet, meta: Option<Metadata>) -> Result<PathBuf> {
        let dir = self.run_dir(name, seed)?;
        let rendered = toml::to_string(&self.config)
            .map_err(|e| SymqError::Format(format!("cannot render config: {e}")))?;
        files.insert("config.toml".into(), rendered.into_bytes());
        if let Some(md) = meta {
            files.insert("run.meta".into(), md.render().into_bytes());
        }
        write_artifacts(&dir, &files)?;
        Ok(dir)
    }
}

struct LoadedAbstraction {
    sym: SymbolicModel,
    hash: String,
}

fn build_abstraction(cfg: &RunConfig, model: &SystemModel) -> Result<SymbolicModel> {
    build_symbolic_model(model, cfg.state_grid(model)?, cfg.action_grid(model)?, cfg.options(model)?)
}

/// The abstraction named by `inputs.abstraction`, checked against the
/// config, or a fresh one built from the config.
fn load_abstraction(cfg: &RunConfig, model: &SystemModel) -> Result<LoadedAbstraction> {
    let Some(path) = &cfg.inputs.abstraction else {
        let sym = build_abstraction(cfg, model)?;
        let hash = export_symbolic_model(&sym, model.name(), model.lipschitz())?.hash();
        return Ok(LoadedAbstraction { sym, hash });
    };
    let (csv, md) = read_verified(path)?;
    let sym = import_symbolic_model(&csv, &md)?;
    let recorded = md.require("system")?;
    if recorded != model.name() {
        return Err(mismatch(format!("abstraction was built for {recorded}, config names {}", model.name())));
    }
    if sym.state_grid() != &cfg.state_grid(model)? || sym.action_grid() != &cfg.action_grid(model)? {
        return Err(mismatch("abstraction grids differ from the configured discretization"));
    }
    if sym.options() != cfg.options(model)? {
        return Err(mismatch("abstraction modes differ from the configured ones"));
    }
    Ok(LoadedAbstraction {
        sym,
        hash: md.require("content_hash")?.to_string(),
    })
}

fn check_link(md: &Metadata, key: &str, expected: &str, what: &str) -> Result<()> {
    let got = md.require(key)?;
    if got != expected {
        return Err(mismatch(format!("{what} was produced from {key} {got}, expected {expected}")));
    }
    Ok(())
}

fn implied_epsilon(cfg: &RunConfig, model: &SystemModel, sym: &SymbolicModel, gamma: f64) -> Result<f64> {
    let bounds = effective_bounds(model, sym.state_grid(), sym.action_grid());
    let seq = lipschitz_recursion(&bounds, gamma, cfg.analysis.horizon.unwrap_or(200))?;
    Ok(precision_bound_max(&seq, sym.state_grid().spacing_max(), sym.action_grid().spread()))
}

pub fn cmd_abstract(ctx: &RunContext) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let model = cfg.model()?;
    let seed = ctx.seed()?;
    let sym = build_abstraction(cfg, &model)?;
    let art = export_symbolic_model(&sym, model.name(), model.lipschitz())?;
    let stats = sym.stats();
    let gamma = cfg.training(ctx.seed_override)?.gamma;
    let eps = implied_epsilon(cfg, &model, &sym, gamma)?;

    let mut md = ctx.common_metadata("abstract", seed);
    md.set("abstraction_hash", art.hash());
    md.set("epsilon_implied", eps);
    md.set("gamma", gamma);
    let mut files = ArtifactSet::new();
    files.insert("abstraction.csv".into(), art.csv.clone());
    files.insert("abstraction.csv.meta".into(), art.metadata.render().into_bytes());
    let dir = ctx.finish("abstract", seed, files, Some(md))?;

    println!("state cells: {}", stats.state_cells);
    println!("action cells: {}", stats.action_cells);
    println!("enabled pairs: {}", stats.enabled_pairs);
    println!("sinks: {}", stats.sinks);
    println!("mean successors: {:.3}", stats.mean_successors);
    println!("max successors: {}", stats.max_successors);
    println!("implied epsilon: {eps}");
    println!("content hash: {}", art.hash());
    println!("output: {}", dir.display());
    Ok(dir)
}

pub fn cmd_train(ctx: &RunContext) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let model = cfg.model()?;
    let learn = cfg.training(ctx.seed_override)?;
    let abs = load_abstraction(cfg, &model)?;
    let mask = cfg.goal().mask(abs.sym.state_grid());
    let method = cfg.learning.method.as_deref().unwrap_or("q_learning");

    let mut md = ctx.common_metadata("train", learn.seed);
    md.extend(&RunConfig::learn_metadata(&learn));
    md.set("method", method);
    let pair = if method == "value_iteration" {
        let mut vi = ValueIteration::new(&abs.sym, learn.gamma).terminal(&mask).q_init(learn.q_init);
        if let Some(t) = cfg.learning.tolerance {
            vi = vi.tolerance(t);
        }
        if let Some(m) = cfg.learning.max_sweeps {
            vi = vi.max_sweeps(m);
        }
        let out = vi.run()?;
        md.set("sweeps", out.residuals.len());
        md.set("final_residual", out.residuals.last().copied().unwrap_or(0.0));
        out.pair
    } else {
        let out = symbolic_double_q_learning(&abs.sym, Some(&mask), &learn)?;
        md.set("goal_episodes", out.report.goal_episodes);
        md.set("sink_events", out.report.sink_events);
        md.set("training_steps", out.report.steps);
        md.set("ordering_violations", out.report.ordering_violations);
        out.pair
    };
    let csv = export_qtable_pair(&pair)?;
    md.set("abstraction_hash", &abs.hash);
    md.set("n_states", pair.n_states);
    md.set("n_actions", pair.n_actions);
    md.set("updates_applied", pair.updates_applied);
    md.set("q_distance", q_distance(&pair));
    md.set("content_hash", content_hash(&csv));
    let mut files = ArtifactSet::new();
    files.insert("qtables.csv".into(), csv);
    files.insert("qtables.csv.meta".into(), md.render().into_bytes());
    let dir = ctx.finish("train", learn.seed, files, None)?;

    println!("method: {method}");
    println!("updates applied: {}", pair.updates_applied);
    println!("q distance: {}", q_distance(&pair));
    println!("output: {}", dir.display());
    Ok(dir)
}

pub fn cmd_policy(ctx: &RunContext) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let model = cfg.model()?;
    let seed = ctx.seed()?;
    let path = cfg.inputs.qtables.as_ref().ok_or_else(|| missing("qtables"))?;
    let abs = load_abstraction(cfg, &model)?;
    let (csv, qmd) = read_verified(path)?;
    check_link(&qmd, "abstraction_hash", &abs.hash, "Q-table file")?;
    let pair = import_qtable_pair(
        &csv,
        abs.sym.n_states(),
        abs.sym.n_actions(),
        qmd.parse_value("gamma")?,
        qmd.parse_value("updates_applied")?,
    )?;
    let qhash = content_hash(&csv);

    let mut files = ArtifactSet::new();
    let mut policies = Vec::new();
    for (which, name, source) in [
        (Which::Min, "policy_qmin.csv", PolicySource::FromQMin),
        (Which::Max, "policy_qmax.csv", PolicySource::FromQMax),
    ] {
        let p = extract_policy(&pair, which);
        let bytes = export_policy(&p, abs.sym.state_grid(), abs.sym.action_grid())?;
        let mut md = ctx.common_metadata("policy", seed);
        md.set("policy_source", source);
        md.set("abstraction_hash", &abs.hash);
        md.set("qtables_hash", &qhash);
        md.set("sinks", p.sinks().len());
        md.set("content_hash", content_hash(&bytes));
        files.insert(format!("{name}.meta"), md.render().into_bytes());
        files.insert(name.into(), bytes);
        policies.push(p);
    }
    let rho = nonsimilarity_ratio(&policies[0], &policies[1])?;
    let dir = ctx.finish("policy", seed, files, None)?;
    println!("non-similarity ratio: {rho}");
    println!("output: {}", dir.display());
    Ok(dir)
}

pub fn cmd_simulate(ctx: &RunContext) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let model = cfg.model()?;
    let seed = ctx.seed()?;
    let path = cfg.inputs.policy.as_ref().ok_or_else(|| missing("policy"))?;
    if !path.exists() {
        return Err(SymqError::InvalidArgument(format!("policy file {} does not exist", path.display())));
    }
    let abs = load_abstraction(cfg, &model)?;
    let (csv, pmd) = read_verified(path)?;
    check_link(&pmd, "abstraction_hash", &abs.hash, "policy file")?;
    let source = match pmd.require("policy_source")? {
        "q_min" => PolicySource::FromQMin,
        "q_max" => PolicySource::FromQMax,
        _ => PolicySource::Single,
    };
    let policy = import_policy(&csv, source)?;
    let ctrl = RefinedController::new(policy, abs.sym.state_grid().clone(), abs.sym.action_grid().clone())?;
    let goal = cfg.goal();
    let x0 = cfg.initial_state();
    let (traj, verdict, error) = match simulate_closed_loop(&model, &ctrl, &x0, cfg.horizon(), |x| goal.contains(x)) {
        Ok(cl) => (cl.trajectory, cl.verdict, None),
        Err(e) => (e.partial, Default::default(), Some(e.source.to_string())),
    };

    let mut md = ctx.common_metadata("simulate", seed);
    md.set("policy_hash", content_hash(&csv));
    md.set("abstraction_hash", &abs.hash);
    md.set("initial_state", symq_core::persist::join_floats(&x0));
    md.set("horizon", cfg.horizon());
    md.set("reached", verdict.reached);
    md.set("steps_to_goal", verdict.steps_to_goal.map_or("none".to_string(), |k| k.to_string()));
    if let Some(e) = &error {
        md.set("error", e);
    }
    let mut files = ArtifactSet::new();
    files.insert("trajectory.csv".into(), export_trajectory(&traj)?);
    let dir = ctx.finish("simulate", seed, files, Some(md))?;
    match verdict.steps_to_goal {
        Some(k) => println!("goal reached after {k} steps"),
        None => println!("goal not reached within {} steps", cfg.horizon()),
    }
    if let Some(e) = error {
        println!("stopped early: {e}");
    }
    println!("output: {}", dir.display());
    Ok(dir)
}

pub fn cmd_analyze(ctx: &RunContext) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let model = cfg.model()?;
    let seed = ctx.seed()?;
    let sg = cfg.state_grid(&model)?;
    let ag = cfg.action_grid(&model)?;
    let bounds = effective_bounds(&model, &sg, &ag);
    let gamma = match cfg.analysis.gamma {
        Some(g) => g,
        None => cfg.training(ctx.seed_override)?.gamma,
    };
    let report = analysis_report(&bounds, gamma, cfg.analysis.horizon.unwrap_or(200), sg.spacing_max(), ag.spread())?;
    let mut files = ArtifactSet::new();
    files.insert("analysis.txt".into(), report.clone().into_bytes());
    let dir = ctx.finish("analyze", seed, files, Some(ctx.common_metadata("analyze", seed)))?;
    print!("{report}");
    println!("output: {}", dir.display());
    Ok(dir)
}

pub fn cmd_experiment(ctx: &RunContext, kind: ExperimentKind) -> Result<PathBuf> {
    let spec = ctx.config.experiment_spec(kind, ctx.seed_override)?;
    let files = run_experiment(kind, &spec)?;
    let summary = files.get("run.meta").map(|b| String::from_utf8_lossy(b).into_owned());
    let dir = ctx.finish(kind.as_str(), spec.learn.seed, files, None)?;
    if let Some(s) = summary {
        for line in s.lines().filter(|l| is_result_key(l)) {
            println!("{line}");
        }
    }
    println!("output: {}", dir.display());
    Ok(dir)
}

fn is_result_key(line: &str) -> bool {
    ["_reached", "_steps_to_goal", "q_distance", "rho", "all_within_bound", "epsilon_implied", "_error"]
        .iter()
        .any(|k| line.split(" = ").next().is_some_and(|key| key.contains(k)))
}

pub fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| Path::new("runs").to_path_buf())
}
