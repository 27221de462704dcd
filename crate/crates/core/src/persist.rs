//! Text formats for models, tables, policies and trajectories.
//!
//! Tables are CSV with a header row. Floats are written with Rust's shortest
//! round-trip formatting (`-inf` for disabled entries), so reading a file back
//! gives bit-identical values. Each artifact may carry a sidecar of
//! `key = value` lines including a SHA-256 hash of the CSV bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::abstraction::{
    AbstractionOptions, CellId, GridPartition, PairData, SymbolicModel,
};
use crate::dynamics::{BoxDomain, LipschitzBounds, Trajectory};
use crate::error::{Result, SymqError};
use crate::learner::{PolicySource, PolicyTable, QTablePair};

pub const FORMAT_VERSION: &str = "1";

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn format_err(msg: impl Into<String>) -> SymqError {
    SymqError::Format(msg.into())
}

/// Ordered `key = value` record.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set `key`, replacing an earlier value.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| format_err(format!("metadata lacks key {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| format_err(format!("metadata key {key:?}: cannot parse {raw:?}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn extend(&mut self, other: &Metadata) {
        for (k, v) in &other.entries {
            self.set(k.clone(), v);
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut md = Metadata::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .or_else(|| line.split_once('='))
                .ok_or_else(|| format_err(format!("metadata line {}: expected key = value", n + 1)))?;
            md.set(k.trim(), v.trim());
        }
        Ok(md)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

pub fn split_floats(text: &str) -> Result<Vec<f64>> {
    text.split(';')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format_err(format!("bad number {t:?}"))))
        .collect()
}

fn split_usizes(text: &str) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format_err(format!("bad index {t:?}"))))
        .collect()
}

fn put_grid(md: &mut Metadata, prefix: &str, g: &GridPartition) {
    md.set(format!("{prefix}_lower"), join_floats(g.domain().lower()));
    md.set(format!("{prefix}_upper"), join_floats(g.domain().upper()));
    md.set(format!("{prefix}_spacing"), join_floats(g.spacing()));
    md.set(
        format!("{prefix}_cells"),
        g.cells_per_axis().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
    );
    md.set(format!("{prefix}_discrete"), g.is_discrete());
}

fn get_grid(md: &Metadata, prefix: &str) -> Result<GridPartition> {
    let domain = BoxDomain::new(
        split_floats(md.require(&format!("{prefix}_lower"))?)?,
        split_floats(md.require(&format!("{prefix}_upper"))?)?,
    )?;
    let spacing = split_floats(md.require(&format!("{prefix}_spacing"))?)?;
    let cells = split_usizes(md.require(&format!("{prefix}_cells"))?)?;
    let discrete = md.parse_value::<bool>(&format!("{prefix}_discrete"))?;
    GridPartition::from_raw(domain, spacing, cells, discrete)
}

/// Metadata keys describing Lipschitz constants.
pub fn put_lipschitz(md: &mut Metadata, l: &LipschitzBounds) {
    md.set("l_f_state", l.l_f_state);
    md.set("l_f_action", l.l_f_action);
    md.set("l_g_state", l.l_g_state);
    md.set("l_g_action", l.l_g_action);
    md.set(
        "l_admissible",
        l.l_admissible.map_or_else(|| "default".to_string(), |v| v.to_string()),
    );
}

/// An artifact ready to be written: CSV body plus sidecar metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub csv: Vec<u8>,
    pub metadata: Metadata,
}

impl Artifact {
    pub fn hash(&self) -> String {
        content_hash(&self.csv)
    }

    /// Write `<path>` and `<path>.meta`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.csv)?;
        write_atomic(&meta_path(path), self.metadata.render().as_bytes())
    }
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    os.into()
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read `<path>` and its sidecar, checking the recorded hash.
pub fn read_verified(path: &Path) -> Result<(Vec<u8>, Metadata)> {
    let csv = fs::read(path)?;
    let md = Metadata::parse(&fs::read_to_string(meta_path(path))?)?;
    let expected = md.require("content_hash")?;
    let actual = content_hash(&csv);
    if expected != actual {
        return Err(SymqError::ArtifactMismatch(format!(
            "{}: recorded hash {expected} but content hashes to {actual}",
            path.display()
        )));
    }
    Ok((csv, md))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| SymqError::Io(e.into_error()))
}

/// Symbolic model as CSV rows `(s_index, a_index, g_min, g_max,
/// successor_count, successors)` plus metadata. Disabled pairs have an empty
/// successor list.
pub fn export_symbolic_model(sym: &SymbolicModel, system: &str, lipschitz: &LipschitzBounds) -> Result<Artifact> {
    let mut w = csv_writer();
    w.write_record(["s_index", "a_index", "g_min", "g_max", "successor_count", "successors"])?;
    for s in 0..sym.n_states() {
        for a in 0..sym.n_actions() {
            let succ = sym.successor_indices(s, a);
            let joined = succ.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                s.to_string(),
                a.to_string(),
                sym.reward_min(s, a).to_string(),
                sym.reward_max(s, a).to_string(),
                if sym.is_enabled(s, a) { succ.len().to_string() } else { String::new() },
                joined,
            ])?;
        }
    }
    let csv = finish(w)?;
    let mut md = Metadata::new();
    md.set("format_version", FORMAT_VERSION);
    md.set("artifact", "symbolic_model");
    md.set("system", system);
    put_grid(&mut md, "state", sym.state_grid());
    put_grid(&mut md, "action", sym.action_grid());
    put_lipschitz(&mut md, lipschitz);
    let opts = sym.options();
    md.set("inflation_mode", opts.inflation);
    md.set("enabling_mode", opts.enabling);
    md.set("reward_mode", opts.reward);
    md.set("inflation_radius", join_floats(sym.inflation()));
    md.set("sinks", sym.sinks().len());
    md.set("content_hash", content_hash(&csv));
    Ok(Artifact { csv, metadata: md })
}

/// Inverse of [`export_symbolic_model`]. The hash in `metadata` must match.
pub fn import_symbolic_model(csv_bytes: &[u8], metadata: &Metadata) -> Result<SymbolicModel> {
    let expected = metadata.require("content_hash")?;
    if expected != content_hash(csv_bytes) {
        return Err(SymqError::ArtifactMismatch("symbolic model CSV does not match its hash".into()));
    }
    let state_grid = get_grid(metadata, "state")?;
    let action_grid = get_grid(metadata, "action")?;
    let options = AbstractionOptions {
        inflation: metadata.require("inflation_mode")?.parse()?,
        enabling: metadata.require("enabling_mode")?.parse()?,
        reward: metadata.require("reward_mode")?.parse()?,
    };
    let inflation = split_floats(metadata.require("inflation_radius")?)?;
    let (ns, na) = (state_grid.total_cells(), action_grid.total_cells());
    let mut rdr = csv::Reader::from_reader(csv_bytes);
    let mut pairs = Vec::with_capacity(ns * na);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(format_err(format!("row {}: expected 6 fields", i + 1)));
        }
        let (s, a): (usize, usize) = (parse_field(&rec, 0)?, parse_field(&rec, 1)?);
        if (s, a) != (i / na.max(1), i % na.max(1)) {
            return Err(format_err(format!("row {}: pair ({s}, {a}) out of order", i + 1)));
        }
        let enabled = !rec[4].is_empty();
        let successors: Vec<CellId> = split_usizes(&rec[5])?.into_iter().map(CellId).collect();
        if enabled && parse_field::<usize>(&rec, 4)? != successors.len() {
            return Err(format_err(format!("row {}: successor count mismatch", i + 1)));
        }
        pairs.push(PairData {
            enabled,
            successors,
            reward_min: parse_field(&rec, 2)?,
            reward_max: parse_field(&rec, 3)?,
        });
    }
    SymbolicModel::from_parts(state_grid, action_grid, inflation, options, pairs)
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec[i]
        .trim()
        .parse()
        .map_err(|_| format_err(format!("cannot parse field {i} ({:?})", &rec[i])))
}

/// Q-table pair as CSV rows `(s_index, a_index, q_min, q_max, visits)`.
pub fn export_qtable_pair(pair: &QTablePair) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["s_index", "a_index", "q_min", "q_max", "visits"])?;
    for s in 0..pair.n_states {
        for a in 0..pair.n_actions {
            let p = s * pair.n_actions + a;
            w.write_record([
                s.to_string(),
                a.to_string(),
                pair.q_min[p].to_string(),
                pair.q_max[p].to_string(),
                pair.visit_counts[p].to_string(),
            ])?;
        }
    }
    finish(w)
}

pub fn import_qtable_pair(csv_bytes: &[u8], n_states: usize, n_actions: usize, gamma: f64, updates: u64) -> Result<QTablePair> {
    let n = n_states * n_actions;
    let mut pair = QTablePair {
        n_states,
        n_actions,
        q_min: Vec::with_capacity(n),
        q_max: Vec::with_capacity(n),
        gamma,
        updates_applied: updates,
        visit_counts: Vec::with_capacity(n),
    };
    let mut rdr = csv::Reader::from_reader(csv_bytes);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (s, a): (usize, usize) = (parse_field(&rec, 0)?, parse_field(&rec, 1)?);
        if i >= n || (s, a) != (i / n_actions, i % n_actions) {
            return Err(format_err(format!("Q-table row {} out of order", i + 1)));
        }
        pair.q_min.push(parse_field(&rec, 2)?);
        pair.q_max.push(parse_field(&rec, 3)?);
        pair.visit_counts.push(parse_field(&rec, 4)?);
    }
    if pair.q_min.len() != n {
        return Err(format_err(format!("Q-table has {} rows, expected {n}", pair.q_min.len())));
    }
    Ok(pair)
}

/// Policy as CSV rows `(s_index, x1.., action_index, u1..)`. Sinks leave the
/// action columns empty.
pub fn export_policy(policy: &PolicyTable, state_grid: &GridPartition, action_grid: &GridPartition) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    let mut header = vec!["s_index".to_string()];
    header.extend((1..=state_grid.dim()).map(|i| format!("x{i}")));
    header.push("action_index".into());
    header.extend((1..=action_grid.dim()).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for (s, a) in policy.action_of.iter().enumerate() {
        let mut row = vec![s.to_string()];
        row.extend(state_grid.cell_center(CellId(s))?.iter().map(|v| v.to_string()));
        match a {
            Some(a) => {
                row.push(a.0.to_string());
                row.extend(action_grid.cell_center(*a)?.iter().map(|v| v.to_string()));
            }
            None => row.extend(std::iter::repeat(String::new()).take(1 + action_grid.dim())),
        }
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn import_policy(csv_bytes: &[u8], source: PolicySource) -> Result<PolicyTable> {
    let mut rdr = csv::Reader::from_reader(csv_bytes);
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == "action_index")
        .ok_or_else(|| format_err("policy CSV lacks action_index"))?;
    let mut action_of = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if parse_field::<usize>(&rec, 0)? != i {
            return Err(format_err(format!("policy row {} out of order", i + 1)));
        }
        action_of.push(if rec[col].is_empty() { None } else { Some(CellId(parse_field(&rec, col)?)) });
    }
    Ok(PolicyTable { action_of, source })
}

/// Trajectory as CSV rows `(k, x1.., u1.., reward)`. The final state has
/// empty action and reward columns.
pub fn export_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.actions.first().map_or(0, |u| u.len());
    let mut w = csv_writer();
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("reward".into());
    w.write_record(&header)?;
    for (k, x) in traj.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        match traj.actions.get(k) {
            Some(u) => {
                row.extend(u.iter().map(|v| v.to_string()));
                row.push(traj.rewards[k].to_string());
            }
            None => row.extend(std::iter::repeat(String::new()).take(m + 1)),
        }
        w.write_record(&row)?;
    }
    finish(w)
}

/// Small CSV helper for experiment tables.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    finish(w)
}

/// Flat map of file name to bytes, written in name order.
pub type ArtifactSet = BTreeMap<String, Vec<u8>>;

pub fn write_artifacts(dir: &Path, files: &ArtifactSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{build_from_counts, AbstractionOptions};
    use crate::dynamics::{mountain_car, van_der_pol};
    use crate::learner::{extract_policy, Which};
    use crate::learner::ValueIteration;

    #[test]
    fn metadata_round_trip() {
        let mut md = Metadata::new();
        md.set("a", 1).set("b", "x = y").set("a", 2);
        let back = Metadata::parse(&md.render()).unwrap();
        assert_eq!(back, md);
        assert_eq!(back.get("a"), Some("2"));
        assert_eq!(back.get("b"), Some("x = y"));
        assert!(Metadata::parse("nonsense").is_err());
    }

    #[test]
    fn symbolic_model_round_trip_is_exact() {
        for m in [mountain_car(), van_der_pol()] {
            let sym = build_from_counts(&m, &[12, 9], 4, AbstractionOptions::for_model(&m)).unwrap();
            let art = export_symbolic_model(&sym, m.name(), m.lipschitz()).unwrap();
            let back = import_symbolic_model(&art.csv, &art.metadata).unwrap();
            assert_eq!(back, sym);
            let again = export_symbolic_model(&back, m.name(), m.lipschitz()).unwrap();
            assert_eq!(again, art);
        }
    }

    #[test]
    fn tampered_model_is_rejected() {
        let m = mountain_car();
        let sym = build_from_counts(&m, &[5, 5], 3, AbstractionOptions::for_model(&m)).unwrap();
        let mut art = export_symbolic_model(&sym, m.name(), m.lipschitz()).unwrap();
        let last = art.csv.len() - 2;
        art.csv[last] ^= 1;
        assert!(matches!(
            import_symbolic_model(&art.csv, &art.metadata),
            Err(SymqError::ArtifactMismatch(_))
        ));
    }

    #[test]
    fn qtable_and_policy_round_trip() {
        let m = mountain_car();
        let sym = build_from_counts(&m, &[6, 6], 3, AbstractionOptions::for_model(&m)).unwrap();
        let pair = ValueIteration::new(&sym, 0.5).run().unwrap().pair;
        let bytes = export_qtable_pair(&pair).unwrap();
        let back = import_qtable_pair(&bytes, 36, 3, 0.5, pair.updates_applied).unwrap();
        assert_eq!(back, pair);

        let policy = extract_policy(&pair, Which::Max);
        let bytes = export_policy(&policy, sym.state_grid(), sym.action_grid()).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("s_index,x1,x2,action_index,u1\n"));
        assert_eq!(import_policy(&bytes, PolicySource::FromQMax).unwrap(), policy);
    }

    #[test]
    fn disabled_entries_round_trip() {
        let pair = QTablePair {
            n_states: 1,
            n_actions: 2,
            q_min: vec![f64::NEG_INFINITY, -0.1],
            q_max: vec![f64::NEG_INFINITY, 0.1 + 0.2],
            gamma: 0.9,
            updates_applied: 3,
            visit_counts: vec![0, 3],
        };
        let bytes = export_qtable_pair(&pair).unwrap();
        assert_eq!(import_qtable_pair(&bytes, 1, 2, 0.9, 3).unwrap(), pair);
    }

    #[test]
    fn trajectory_layout() {
        let mut t = Trajectory::starting_at(vec![0.0, 1.0]);
        t.push(vec![0.5], -1.0, vec![0.25, 1.5]);
        let text = String::from_utf8(export_trajectory(&t).unwrap()).unwrap();
        assert_eq!(text, "k,x1,x2,u1,reward\n0,0,1,0.5,-1\n1,0.25,1.5,,\n");
    }

    #[test]
    fn verified_read_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut md = Metadata::new();
        md.set("content_hash", content_hash(b"a,b\n"));
        Artifact { csv: b"a,b\n".to_vec(), metadata: md }.write(&path).unwrap();
        assert!(read_verified(&path).is_ok());
        fs::write(&path, b"a,c\n").unwrap();
        assert!(matches!(read_verified(&path), Err(SymqError::ArtifactMismatch(_))));
    }
}
