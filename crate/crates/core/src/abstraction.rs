//! Finite symbolic abstractions of a [`SystemModel`].
//!
//! State and action boxes are split into uniform grids. For each pair of
//! (state cell, action cell) the center is stepped through the dynamics, the
//! image is inflated by `L_fξ·η + L_fv·μ` and every state cell meeting the
//! inflated box becomes a successor. The resulting relation over-approximates
//! every one-step transition starting inside the pair of cells.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{BoxDomain, CellBox, SystemModel};
use crate::error::{invalid, Result, SymqError};

/// Index of a grid cell, row-major over the per-axis indices (last axis fastest).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(pub usize);

impl CellId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Axis-aligned uniform partition of a box.
///
/// Interval grids cover the box with cells of side `spacing[i]`, the last cell
/// on each axis truncated at the box edge. Discrete grids model a finite set of
/// equally spaced levels (endpoints included); their cells are points.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPartition {
    domain: BoxDomain,
    spacing: Vec<f64>,
    cells_per_axis: Vec<usize>,
    strides: Vec<usize>,
    total_cells: usize,
    discrete: bool,
}

/// Number of cells needed to cover `width` with steps of `spacing`.
fn cells_for(width: f64, spacing: f64) -> usize {
    let ratio = width / spacing;
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest.max(1.0) as usize
    } else {
        ratio.ceil() as usize
    }
}

impl GridPartition {
    /// Cover `domain` with cells of side `spacing` (the classic `build_grid`).
    pub fn new(domain: BoxDomain, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != domain.dim() {
            return Err(invalid(format!(
                "spacing has {} entries for a {}-dimensional box",
                spacing.len(),
                domain.dim()
            )));
        }
        let mut cells = Vec::with_capacity(spacing.len());
        for (i, &sp) in spacing.iter().enumerate() {
            let width = domain.width(i);
            if !(sp > 0.0) || !sp.is_finite() {
                return Err(invalid(format!("spacing on axis {i} must be positive, got {sp}")));
            }
            if sp > width * (1.0 + 1e-12) {
                return Err(invalid(format!(
                    "spacing on axis {i} ({sp}) exceeds the box width ({width})"
                )));
            }
            cells.push(cells_for(width, sp));
        }
        Ok(Self::assemble(domain, spacing, cells, false))
    }

    /// Split each axis into exactly `counts[i]` equal cells.
    pub fn with_cells(domain: BoxDomain, counts: &[usize]) -> Result<Self> {
        if counts.len() != domain.dim() {
            return Err(invalid(format!(
                "cell counts have {} entries for a {}-dimensional box",
                counts.len(),
                domain.dim()
            )));
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(invalid(format!("cell count on axis {i} must be >= 1")));
        }
        let spacing = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| domain.width(i) / n as f64)
            .collect();
        Ok(Self::assemble(domain, spacing, counts.to_vec(), false))
    }

    /// A finite set of `levels` equally spaced points per axis spanning `domain`.
    pub fn levels(domain: BoxDomain, levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(invalid("a discrete grid needs at least 2 levels"));
        }
        let spacing = (0..domain.dim())
            .map(|i| domain.width(i) / (levels - 1) as f64)
            .collect();
        let cells = vec![levels; domain.dim()];
        Ok(Self::assemble(domain, spacing, cells, true))
    }

    /// Rebuild a grid from stored fields, checking that they fit together.
    pub(crate) fn from_raw(domain: BoxDomain, spacing: Vec<f64>, cells_per_axis: Vec<usize>, discrete: bool) -> Result<Self> {
        let dim = domain.dim();
        if spacing.len() != dim || cells_per_axis.len() != dim {
            return Err(invalid("grid fields disagree on the dimension"));
        }
        for i in 0..dim {
            let (sp, n) = (spacing[i], cells_per_axis[i]);
            let span = if discrete { (n.max(1) - 1) as f64 * sp } else { n as f64 * sp };
            let width = domain.width(i);
            let fits = if discrete {
                n >= 2 && (span - width).abs() <= 1e-9 * width
            } else {
                n >= 1 && span >= width * (1.0 - 1e-9) && (n as f64 - 1.0) * sp < width
            };
            if !(sp > 0.0) || !fits {
                return Err(invalid(format!("axis {i}: {n} cells of spacing {sp} do not cover width {width}")));
            }
        }
        Ok(Self::assemble(domain, spacing, cells_per_axis, discrete))
    }

    fn assemble(domain: BoxDomain, spacing: Vec<f64>, cells_per_axis: Vec<usize>, discrete: bool) -> Self {
        let mut strides = vec![1; cells_per_axis.len()];
        for i in (0..cells_per_axis.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * cells_per_axis[i + 1];
        }
        let total_cells = cells_per_axis.iter().product();
        GridPartition {
            domain,
            spacing,
            cells_per_axis,
            strides,
            total_cells,
            discrete,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells_per_axis
    }

    pub fn total_cells(&self) -> usize {
        self.total_cells
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete
    }

    /// Largest nominal spacing.
    pub fn spacing_max(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    /// Largest distance between two members of one cell: the nominal spacing
    /// for interval grids and zero for discrete grids.
    pub fn spread(&self) -> f64 {
        if self.discrete {
            0.0
        } else {
            self.spacing_max()
        }
    }

    pub fn multi_index(&self, id: CellId) -> Vec<usize> {
        let mut rest = id.0;
        self.strides
            .iter()
            .map(|s| {
                let j = rest / s;
                rest %= s;
                j
            })
            .collect()
    }

    pub fn id_of(&self, multi: &[usize]) -> Result<CellId> {
        if multi.len() != self.dim() || multi.iter().zip(&self.cells_per_axis).any(|(j, n)| j >= n) {
            return Err(invalid(format!("multi-index {multi:?} outside grid {:?}", self.cells_per_axis)));
        }
        Ok(CellId(multi.iter().zip(&self.strides).map(|(j, s)| j * s).sum()))
    }

    fn axis_lo(&self, axis: usize, j: usize) -> f64 {
        self.domain.lower()[axis] + j as f64 * self.spacing[axis]
    }

    fn axis_hi(&self, axis: usize, j: usize) -> f64 {
        if self.discrete {
            self.axis_lo(axis, j)
        } else if j + 1 == self.cells_per_axis[axis] {
            self.domain.upper()[axis]
        } else {
            self.axis_lo(axis, j + 1)
        }
    }

    fn check_id(&self, id: CellId) -> Result<()> {
        if id.0 >= self.total_cells {
            return Err(invalid(format!("cell id {} out of range (0..{})", id.0, self.total_cells)));
        }
        Ok(())
    }

    pub fn cell_bounds(&self, id: CellId) -> Result<CellBox> {
        self.check_id(id)?;
        Ok(self.cell_bounds_unchecked(id))
    }

    pub(crate) fn cell_bounds_unchecked(&self, id: CellId) -> CellBox {
        let multi = self.multi_index(id);
        CellBox {
            lower: multi.iter().enumerate().map(|(i, &j)| self.axis_lo(i, j)).collect(),
            upper: multi.iter().enumerate().map(|(i, &j)| self.axis_hi(i, j)).collect(),
        }
    }

    /// Midpoint of the cell on every axis (the level itself for discrete grids).
    pub fn cell_center(&self, id: CellId) -> Result<Vec<f64>> {
        self.check_id(id)?;
        Ok(self.center_unchecked(id))
    }

    pub(crate) fn center_unchecked(&self, id: CellId) -> Vec<f64> {
        let mut rest = id.0;
        self.strides
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let j = rest / s;
                rest %= s;
                0.5 * (self.axis_lo(i, j) + self.axis_hi(i, j))
            })
            .collect()
    }

    fn axis_cell_of(&self, axis: usize, x: f64) -> usize {
        let n = self.cells_per_axis[axis];
        let t = (x - self.domain.lower()[axis]) / self.spacing[axis];
        if self.discrete {
            return (t.round().max(0.0) as usize).min(n - 1);
        }
        let mut j = (t.floor().max(0.0) as usize).min(n - 1);
        // Settle rounding at boundaries so that lo_j <= x < hi_j.
        while j > 0 && x < self.axis_lo(axis, j) {
            j -= 1;
        }
        while j + 1 < n && x >= self.axis_hi(axis, j) {
            j += 1;
        }
        j
    }

    /// The unique cell containing `point`. Cells are half-open `[lo, hi)` except
    /// the last one per axis, which also holds the box maximum. Discrete grids
    /// map to the nearest level.
    pub fn quantize(&self, point: &[f64]) -> Result<CellId> {
        if point.len() != self.dim() {
            return Err(invalid(format!(
                "point has dimension {}, grid expects {}",
                point.len(),
                self.dim()
            )));
        }
        if !self.domain.contains(point) {
            return Err(SymqError::Domain(format!("point {point:?} outside the grid box")));
        }
        Ok(self.quantize_unchecked(point))
    }

    pub(crate) fn quantize_unchecked(&self, point: &[f64]) -> CellId {
        CellId(
            point
                .iter()
                .enumerate()
                .map(|(i, &x)| self.axis_cell_of(i, x) * self.strides[i])
                .sum(),
        )
    }

    /// Per-axis index range of closed cells meeting the closed interval `[a, b]`.
    fn axis_range(&self, axis: usize, a: f64, b: f64) -> (usize, usize) {
        let n = self.cells_per_axis[axis];
        let mut lo = self.axis_cell_of(axis, a.max(self.domain.lower()[axis]));
        while lo > 0 && self.axis_hi(axis, lo - 1) >= a {
            lo -= 1;
        }
        let mut hi = self.axis_cell_of(axis, b.min(self.domain.upper()[axis]));
        while hi + 1 < n && self.axis_lo(axis, hi + 1) <= b {
            hi += 1;
        }
        (lo, hi)
    }

    /// All cells whose closure meets the closed box `[lower, upper]`, ascending.
    pub fn cells_intersecting(&self, lower: &[f64], upper: &[f64]) -> Vec<CellId> {
        let mut ids = vec![0usize];
        for axis in 0..self.dim() {
            if upper[axis] < self.domain.lower()[axis] || lower[axis] > self.domain.upper()[axis] {
                return Vec::new();
            }
            let (lo, hi) = self.axis_range(axis, lower[axis], upper[axis]);
            let stride = self.strides[axis];
            ids = ids
                .into_iter()
                .flat_map(|base| (lo..=hi).map(move |j| base + j * stride))
                .collect();
        }
        ids.into_iter().map(CellId).collect()
    }

    /// Draw a point from cell `id` (uniform inside the cell; the level itself
    /// for discrete grids).
    pub fn sample_in_cell(&self, id: CellId, rng: &mut crate::rng::SeededRng) -> Vec<f64> {
        let cell = self.cell_bounds_unchecked(id);
        cell.lower
            .iter()
            .zip(&cell.upper)
            .map(|(lo, hi)| if lo < hi { rng.gen_range(*lo..*hi) } else { *lo })
            .collect()
    }

    /// Draw a point from the grid's domain (a uniform level for discrete grids).
    pub fn sample_point(&self, rng: &mut crate::rng::SeededRng) -> Vec<f64> {
        if self.discrete {
            let id = CellId(rng.gen_range(0..self.total_cells));
            self.center_unchecked(id)
        } else {
            self.domain.sample(rng)
        }
    }
}

/// `build_grid`: cover `domain` with cells of the given spacing.
pub fn build_grid(domain: BoxDomain, spacing: Vec<f64>) -> Result<GridPartition> {
    GridPartition::new(domain, spacing)
}

/// How the center image is grown into a successor region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InflationMode {
    /// Radius `L_fξ·η_i + L_fv·μ` on state axis `i`.
    PerAxis,
    /// Radius `L_fξ·max_i η_i + L_fv·μ` on every axis.
    Uniform,
    /// No inflation: the successor is the cell holding the center image
    /// (plain uniform discretization, unsound).
    CenterOnly,
}

/// Which actions are enabled at a state cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnablingMode {
    /// Every action is enabled; the inflated box is intersected with the state box.
    Saturating,
    /// An action is enabled only if the inflated box lies inside the state box.
    Strict,
}

/// How per-pair reward bounds `g̲(s,a)`, `ḡ(s,a)` are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// `g(s_c, a_c) ± (L_gξ·η + L_gv·μ)`.
    Lipschitz,
    /// Extremes over cell corners and center. Sound only for rewards whose
    /// extrema over a box sit at its corners (componentwise monotone, or
    /// separately concave/convex in the right direction).
    CornerSampling,
    /// The model's exact per-cell extrema callback.
    ExactCallback,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = SymqError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(invalid(format!(concat!("unknown ", stringify!($ty), " {:?}"), other))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(InflationMode { PerAxis => "per_axis", Uniform => "uniform", CenterOnly => "center_only" });
str_enum!(EnablingMode { Saturating => "saturating", Strict => "strict" });
str_enum!(RewardMode { Lipschitz => "lipschitz", CornerSampling => "corner_sampling", ExactCallback => "exact_callback" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbstractionOptions {
    pub inflation: InflationMode,
    pub enabling: EnablingMode,
    pub reward: RewardMode,
}

impl AbstractionOptions {
    /// Per-axis inflation, saturating enabling when the model clips, and exact
    /// reward extrema when the model provides them.
    pub fn for_model(model: &SystemModel) -> Self {
        AbstractionOptions {
            inflation: InflationMode::PerAxis,
            enabling: if model.clips_states() {
                EnablingMode::Saturating
            } else {
                EnablingMode::Strict
            },
            reward: if model.reward_extrema_fn().is_some() {
                RewardMode::ExactCallback
            } else {
                RewardMode::Lipschitz
            },
        }
    }
}

/// The finite symbolic model: grids, successor relation, enabled actions and
/// reward bounds. Pair `(s, a)` is stored at `s * n_actions + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolicModel {
    state_grid: GridPartition,
    action_grid: GridPartition,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    enabled: Vec<bool>,
    reward_min: Vec<f64>,
    reward_max: Vec<f64>,
    inflation: Vec<f64>,
    options: AbstractionOptions,
    sinks: Vec<CellId>,
}

/// Per-pair data produced while building.
#[derive(Clone, Debug, PartialEq)]
pub struct PairData {
    pub enabled: bool,
    pub successors: Vec<CellId>,
    pub reward_min: f64,
    pub reward_max: f64,
}

impl SymbolicModel {
    /// Assemble from per-pair rows in `(s, a)` order.
    pub fn from_parts(
        state_grid: GridPartition,
        action_grid: GridPartition,
        inflation: Vec<f64>,
        options: AbstractionOptions,
        pairs: Vec<PairData>,
    ) -> Result<Self> {
        let (ns, na) = (state_grid.total_cells(), action_grid.total_cells());
        if pairs.len() != ns * na {
            return Err(invalid(format!("expected {} pairs, got {}", ns * na, pairs.len())));
        }
        if ns > u32::MAX as usize {
            return Err(invalid("too many state cells"));
        }
        let mut offsets = Vec::with_capacity(pairs.len() + 1);
        let mut targets = Vec::new();
        let mut enabled = Vec::with_capacity(pairs.len());
        let mut reward_min = Vec::with_capacity(pairs.len());
        let mut reward_max = Vec::with_capacity(pairs.len());
        offsets.push(0);
        for (idx, p) in pairs.into_iter().enumerate() {
            if p.enabled && p.successors.is_empty() {
                return Err(invalid(format!("enabled pair {idx} has no successors")));
            }
            if p.reward_min > p.reward_max {
                return Err(invalid(format!(
                    "pair {idx}: reward_min {} > reward_max {}",
                    p.reward_min, p.reward_max
                )));
            }
            if p.enabled {
                let mut succ: Vec<u32> = Vec::with_capacity(p.successors.len());
                for c in &p.successors {
                    if c.0 >= ns {
                        return Err(invalid(format!("pair {idx}: successor {} out of range", c.0)));
                    }
                    succ.push(c.0 as u32);
                }
                succ.sort_unstable();
                succ.dedup();
                targets.extend(succ);
            }
            offsets.push(targets.len());
            enabled.push(p.enabled);
            reward_min.push(p.reward_min);
            reward_max.push(p.reward_max);
        }
        let sinks = (0..ns)
            .filter(|s| !enabled[s * na..(s + 1) * na].iter().any(|e| *e))
            .map(CellId)
            .collect();
        Ok(SymbolicModel {
            state_grid,
            action_grid,
            offsets,
            targets,
            enabled,
            reward_min,
            reward_max,
            inflation,
            options,
            sinks,
        })
    }

    pub fn state_grid(&self) -> &GridPartition {
        &self.state_grid
    }

    pub fn action_grid(&self) -> &GridPartition {
        &self.action_grid
    }

    pub fn n_states(&self) -> usize {
        self.state_grid.total_cells()
    }

    pub fn n_actions(&self) -> usize {
        self.action_grid.total_cells()
    }

    /// Per-axis inflation radius.
    pub fn inflation(&self) -> &[f64] {
        &self.inflation
    }

    pub fn options(&self) -> AbstractionOptions {
        self.options
    }

    #[inline]
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions() + a
    }

    #[inline]
    pub fn is_enabled(&self, s: usize, a: usize) -> bool {
        self.enabled[self.pair_index(s, a)]
    }

    pub fn enabled_actions(&self, s: CellId) -> Vec<CellId> {
        (0..self.n_actions())
            .filter(|&a| self.is_enabled(s.0, a))
            .map(CellId)
            .collect()
    }

    /// Sorted successor indices of `(s, a)`; empty when `a` is not enabled.
    #[inline]
    pub fn successor_indices(&self, s: usize, a: usize) -> &[u32] {
        let p = self.pair_index(s, a);
        &self.targets[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn successors(&self, s: CellId, a: CellId) -> Vec<CellId> {
        self.successor_indices(s.0, a.0)
            .iter()
            .map(|&t| CellId(t as usize))
            .collect()
    }

    pub fn contains_transition(&self, s: CellId, a: CellId, next: CellId) -> bool {
        self.successor_indices(s.0, a.0)
            .binary_search(&(next.0 as u32))
            .is_ok()
    }

    #[inline]
    pub fn reward_min(&self, s: usize, a: usize) -> f64 {
        self.reward_min[self.pair_index(s, a)]
    }

    #[inline]
    pub fn reward_max(&self, s: usize, a: usize) -> f64 {
        self.reward_max[self.pair_index(s, a)]
    }

    /// States without any enabled action.
    pub fn sinks(&self) -> &[CellId] {
        &self.sinks
    }

    pub fn is_sink(&self, s: usize) -> bool {
        self.sinks.binary_search(&CellId(s)).is_ok()
    }

    /// Rebuild the per-pair rows (inverse of [`SymbolicModel::from_parts`]).
    pub fn pairs(&self) -> Vec<PairData> {
        (0..self.n_states())
            .flat_map(|s| (0..self.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| PairData {
                enabled: self.is_enabled(s, a),
                successors: self.successors(CellId(s), CellId(a)),
                reward_min: self.reward_min(s, a),
                reward_max: self.reward_max(s, a),
            })
            .collect()
    }

    pub fn stats(&self) -> AbstractionStats {
        let enabled_pairs = self.enabled.iter().filter(|e| **e).count();
        let max_successors = (0..self.enabled.len())
            .map(|p| self.offsets[p + 1] - self.offsets[p])
            .max()
            .unwrap_or(0);
        AbstractionStats {
            state_cells: self.n_states(),
            action_cells: self.n_actions(),
            enabled_pairs,
            sinks: self.sinks.len(),
            mean_successors: if enabled_pairs == 0 {
                0.0
            } else {
                self.targets.len() as f64 / enabled_pairs as f64
            },
            max_successors,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbstractionStats {
    pub state_cells: usize,
    pub action_cells: usize,
    pub enabled_pairs: usize,
    pub sinks: usize,
    pub mean_successors: f64,
    pub max_successors: usize,
}

/// The action grid a model asks for: `levels` points for finite action sets,
/// otherwise `n` interval cells per axis.
pub fn action_grid_for(model: &SystemModel, n_action_cells: usize) -> Result<GridPartition> {
    match model.action_levels() {
        Some(levels) => GridPartition::levels(model.action_space().clone(), levels),
        None => GridPartition::with_cells(
            model.action_space().clone(),
            &vec![n_action_cells; model.action_space().dim()],
        ),
    }
}

/// Inflation radius per state axis.
pub fn inflation_radius(
    model: &SystemModel,
    state_grid: &GridPartition,
    action_grid: &GridPartition,
    mode: InflationMode,
) -> Vec<f64> {
    let l = model.lipschitz();
    let action_term = l.l_f_action * action_grid.spread();
    match mode {
        InflationMode::PerAxis => state_grid
            .spacing()
            .iter()
            .map(|eta| l.l_f_state * eta + action_term)
            .collect(),
        InflationMode::Uniform => vec![l.l_f_state * state_grid.spacing_max() + action_term; state_grid.dim()],
        InflationMode::CenterOnly => vec![0.0; state_grid.dim()],
    }
}

/// Interval guaranteed (per `mode`'s caveats) to contain `g(ξ, v)` for all
/// `ξ` in the state cell and `v` in the action cell.
pub fn reward_bounds(
    model: &SystemModel,
    state_grid: &GridPartition,
    action_grid: &GridPartition,
    state_cell: CellId,
    action_cell: CellId,
    mode: RewardMode,
) -> Result<(f64, f64)> {
    let s_box = state_grid.cell_bounds(state_cell)?;
    let a_box = action_grid.cell_bounds(action_cell)?;
    match mode {
        RewardMode::Lipschitz => {
            let l = model.lipschitz();
            let g = model.reward_unchecked(&s_box.center(), &a_box.center());
            let r = l.l_g_state * state_grid.spacing_max() + l.l_g_action * action_grid.spread();
            Ok((g - r, g + r))
        }
        RewardMode::CornerSampling => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut visit = |x: &[f64], u: &[f64]| {
                let g = model.reward_unchecked(x, u);
                lo = lo.min(g);
                hi = hi.max(g);
            };
            let a_corners = a_box.corners();
            for x in s_box.corners() {
                for u in &a_corners {
                    visit(&x, u);
                }
            }
            visit(&s_box.center(), &a_box.center());
            Ok((lo, hi))
        }
        RewardMode::ExactCallback => {
            let f = model
                .reward_extrema_fn()
                .ok_or_else(|| invalid(format!("model {} has no exact reward extrema", model.name())))?;
            Ok(f(&s_box, &a_box))
        }
    }
}

/// Build the symbolic model. Pairs are computed in parallel on the current
/// rayon pool and merged in index order, so the result does not depend on the
/// number of workers.
pub fn build_symbolic_model(
    model: &SystemModel,
    state_grid: GridPartition,
    action_grid: GridPartition,
    options: AbstractionOptions,
) -> Result<SymbolicModel> {
    if state_grid.domain() != model.state_space() {
        return Err(invalid("state grid does not partition the model's state space"));
    }
    if action_grid.domain() != model.action_space() {
        return Err(invalid("action grid does not partition the model's action space"));
    }
    if options.reward == RewardMode::ExactCallback && model.reward_extrema_fn().is_none() {
        return Err(invalid(format!("model {} has no exact reward extrema", model.name())));
    }
    let radius = inflation_radius(model, &state_grid, &action_grid, options.inflation);
    let (ns, na) = (state_grid.total_cells(), action_grid.total_cells());
    let space = model.state_space();

    let rows: Vec<Vec<PairData>> = (0..ns)
        .into_par_iter()
        .map(|s| {
            let s_c = state_grid.center_unchecked(CellId(s));
            (0..na)
                .map(|a| {
                    let a_c = action_grid.center_unchecked(CellId(a));
                    let image = model.step_unchecked(&s_c, &a_c);
                    let (reward_min, reward_max) =
                        reward_bounds(model, &state_grid, &action_grid, CellId(s), CellId(a), options.reward)
                            .expect("cells in range");
                    let mut lo: Vec<f64> = image.iter().zip(&radius).map(|(x, r)| x - r).collect();
                    let mut hi: Vec<f64> = image.iter().zip(&radius).map(|(x, r)| x + r).collect();
                    let inside = lo
                        .iter()
                        .zip(&hi)
                        .zip(space.lower().iter().zip(space.upper()))
                        .all(|((l, h), (bl, bu))| l >= bl && h <= bu);
                    let enabled = match options.enabling {
                        EnablingMode::Strict => inside,
                        EnablingMode::Saturating => true,
                    };
                    let successors = if !enabled {
                        Vec::new()
                    } else if options.inflation == InflationMode::CenterOnly {
                        let mut p = image.clone();
                        space.clip(&mut p);
                        vec![state_grid.quantize_unchecked(&p)]
                    } else {
                        for (i, (l, h)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                            *l = l.max(space.lower()[i]);
                            *h = h.min(space.upper()[i]);
                        }
                        state_grid.cells_intersecting(&lo, &hi)
                    };
                    PairData {
                        enabled: enabled && !successors.is_empty(),
                        successors,
                        reward_min,
                        reward_max,
                    }
                })
                .collect()
        })
        .collect();

    SymbolicModel::from_parts(state_grid, action_grid, radius, options, rows.into_iter().flatten().collect())
}

/// Convenience: build from per-axis cell counts.
pub fn build_from_counts(
    model: &SystemModel,
    n_state_cells: &[usize],
    n_action_cells: usize,
    options: AbstractionOptions,
) -> Result<SymbolicModel> {
    let state_grid = GridPartition::with_cells(model.state_space().clone(), n_state_cells)?;
    let action_grid = action_grid_for(model, n_action_cells)?;
    build_symbolic_model(model, state_grid, action_grid, options)
}

/// Result of sampling the alternating-simulation condition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimulationCheck {
    pub violations: usize,
    pub total: usize,
}

/// Draw `n_samples` uniform `(ξ, v)` pairs and verify that, whenever the action
/// cell of `v` is enabled at the state cell of `ξ`, the cell of `f(ξ, v)` is a
/// listed successor.
pub fn check_alternating_simulation(
    model: &SystemModel,
    sym: &SymbolicModel,
    n_samples: usize,
    seed: u64,
) -> SimulationCheck {
    let mut rng = crate::rng::seeded(seed);
    let mut report = SimulationCheck::default();
    for _ in 0..n_samples {
        let xi = model.state_space().sample(&mut rng);
        let v = sym.action_grid().sample_point(&mut rng);
        let s = sym.state_grid().quantize_unchecked(&xi);
        let a = sym.action_grid().quantize_unchecked(&v);
        if !sym.is_enabled(s.0, a.0) {
            continue;
        }
        report.total += 1;
        let next = model.step_unchecked(&xi, &v);
        let ok = sym
            .state_grid()
            .quantize(&next)
            .map(|s2| sym.contains_transition(s, a, s2))
            .unwrap_or(false);
        if !ok {
            report.violations += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{mountain_car, van_der_pol, LipschitzBounds};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_box(lo: f64, hi: f64) -> BoxDomain {
        BoxDomain::new(vec![lo], vec![hi]).unwrap()
    }

    fn half_model() -> SystemModel {
        SystemModel::new(
            "half",
            unit_box(-1.0, 1.0),
            unit_box(-1.0, 1.0),
            LipschitzBounds {
                l_f_state: 0.5,
                l_f_action: 0.0,
                l_g_state: 0.0,
                l_g_action: 0.0,
                l_admissible: None,
            },
            |x, _| vec![0.5 * x[0]],
            |_, _| 0.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_counts() {
        let g = build_grid(unit_box(-1.2, 0.6), vec![0.45]).unwrap();
        assert_eq!(g.total_cells(), 4);
        let g = build_grid(unit_box(0.0, 1.0), vec![0.3]).unwrap();
        assert_eq!(g.total_cells(), 4);
        let last = g.cell_bounds(CellId(3)).unwrap();
        assert_abs_diff_eq!(last.lower[0], 0.9, epsilon = 1e-12);
        assert_eq!(last.upper[0], 1.0);
        let sq = BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(build_grid(sq, vec![0.5, 0.5]).unwrap().total_cells(), 16);
    }

    #[test]
    fn grid_rejects_bad_spacing() {
        assert!(build_grid(unit_box(0.0, 1.0), vec![0.0]).is_err());
        assert!(build_grid(unit_box(0.0, 1.0), vec![-0.1]).is_err());
        assert!(build_grid(unit_box(0.0, 1.0), vec![1.5]).is_err());
        assert!(build_grid(unit_box(0.0, 1.0), vec![f64::NAN]).is_err());
    }

    #[test]
    fn quantize_conventions() {
        let g = build_grid(unit_box(-1.2, 0.6), vec![0.45]).unwrap();
        assert_eq!(g.quantize(&[-1.2]).unwrap(), CellId(0));
        assert_eq!(g.quantize(&[0.6]).unwrap(), CellId(3));
        assert_eq!(g.quantize(&[-0.5]).unwrap(), CellId(1));
        assert!(matches!(g.quantize(&[0.7]), Err(SymqError::Domain(_))));
        assert!(matches!(g.quantize(&[0.0, 0.0]), Err(SymqError::InvalidArgument(_))));
    }

    #[test]
    fn centers() {
        let g = build_grid(unit_box(0.0, 1.0), vec![0.5]).unwrap();
        assert_eq!(g.cell_center(CellId(0)).unwrap(), vec![0.25]);
        let g = build_grid(unit_box(-1.2, 0.6), vec![0.45]).unwrap();
        assert_abs_diff_eq!(g.cell_center(CellId(1)).unwrap()[0], -0.525, epsilon = 1e-12);
        let sq = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let g = build_grid(sq, vec![0.5, 0.5]).unwrap();
        let id = g.id_of(&[1, 1]).unwrap();
        assert_eq!(g.cell_center(id).unwrap(), vec![0.75, 0.75]);
        assert!(g.cell_center(CellId(4)).is_err());
    }

    #[test]
    fn discrete_levels() {
        let g = GridPartition::levels(unit_box(-1.0, 1.0), 3).unwrap();
        let centers: Vec<f64> = (0..3).map(|i| g.cell_center(CellId(i)).unwrap()[0]).collect();
        assert_eq!(centers, vec![-1.0, 0.0, 1.0]);
        assert_eq!(g.quantize(&[0.4]).unwrap(), CellId(1));
        assert_eq!(g.quantize(&[1.0]).unwrap(), CellId(2));
        assert_eq!(g.spread(), 0.0);
    }

    #[test]
    fn single_cell_self_loop() {
        let m = half_model();
        let sg = build_grid(unit_box(-1.0, 1.0), vec![2.0]).unwrap();
        let ag = build_grid(unit_box(-1.0, 1.0), vec![1.0]).unwrap();
        let sym = build_symbolic_model(&m, sg, ag, AbstractionOptions::for_model(&m)).unwrap();
        for a in 0..2 {
            assert_eq!(sym.successors(CellId(0), CellId(a)), vec![CellId(0)]);
        }
    }

    #[test]
    fn linear_toy_successors() {
        // s = [0.5, 1]: center 0.75 -> image 0.375, radius 0.25 -> [0.125, 0.625].
        let m = half_model();
        let sg = build_grid(unit_box(-1.0, 1.0), vec![0.5]).unwrap();
        let ag = GridPartition::with_cells(unit_box(-1.0, 1.0), &[1]).unwrap();
        let sym = build_symbolic_model(&m, sg, ag, AbstractionOptions::for_model(&m)).unwrap();
        assert_eq!(sym.inflation(), &[0.25]);
        assert_eq!(sym.successors(CellId(3), CellId(0)), vec![CellId(2), CellId(3)]);
    }

    #[test]
    fn mountain_car_counts() {
        let m = mountain_car();
        let sym = build_from_counts(&m, &[160, 160], 3, AbstractionOptions::for_model(&m)).unwrap();
        assert_eq!(sym.n_states(), 160 * 160);
        assert_eq!(sym.n_actions(), 3);
        assert!(sym.sinks().is_empty());
    }

    #[test]
    fn mountain_car_reward_bounds() {
        let m = mountain_car();
        let sg = GridPartition::with_cells(m.state_space().clone(), &[40, 40]).unwrap();
        let ag = action_grid_for(&m, 3).unwrap();
        let goal = sg.id_of(&[39, 20]).unwrap();
        let other = sg.id_of(&[10, 20]).unwrap();
        let b = reward_bounds(&m, &sg, &ag, goal, CellId(1), RewardMode::ExactCallback).unwrap();
        assert_eq!(b, (0.0, 0.0));
        let b = reward_bounds(&m, &sg, &ag, other, CellId(1), RewardMode::ExactCallback).unwrap();
        assert_eq!(b, (-1.0, -1.0));
    }

    #[test]
    fn van_der_pol_corner_sampling() {
        let m = van_der_pol();
        let sg = GridPartition::new(m.state_space().clone(), vec![0.1, 0.1]).unwrap();
        let ag = action_grid_for(&m, 3).unwrap();
        let cell = sg.quantize(&[0.05, 0.05]).unwrap();
        let (lo, hi) = reward_bounds(&m, &sg, &ag, cell, CellId(1), RewardMode::CornerSampling).unwrap();
        assert_abs_diff_eq!(lo, -0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_reward_in_every_mode() {
        let m = SystemModel::new(
            "const",
            unit_box(0.0, 1.0),
            unit_box(0.0, 1.0),
            LipschitzBounds {
                l_f_state: 1.0,
                l_f_action: 0.0,
                l_g_state: 0.0,
                l_g_action: 0.0,
                l_admissible: None,
            },
            |x, _| x.to_vec(),
            |_, _| 2.5,
        )
        .unwrap()
        .with_reward_extrema(|_, _| (2.5, 2.5));
        let sg = build_grid(unit_box(0.0, 1.0), vec![0.25]).unwrap();
        let ag = build_grid(unit_box(0.0, 1.0), vec![0.5]).unwrap();
        for mode in [RewardMode::Lipschitz, RewardMode::CornerSampling, RewardMode::ExactCallback] {
            assert_eq!(reward_bounds(&m, &sg, &ag, CellId(2), CellId(1), mode).unwrap(), (2.5, 2.5));
        }
    }

    #[test]
    fn exact_callback_required() {
        let m = half_model();
        let opts = AbstractionOptions {
            reward: RewardMode::ExactCallback,
            ..AbstractionOptions::for_model(&m)
        };
        assert!(build_from_counts(&m, &[4], 2, opts).is_err());
    }

    #[test]
    fn strict_enabling_creates_sinks() {
        // x' = 2x pushes edge cells out of [-1, 1].
        let m = SystemModel::new(
            "double",
            unit_box(-1.0, 1.0),
            unit_box(-1.0, 1.0),
            LipschitzBounds {
                l_f_state: 2.0,
                l_f_action: 0.0,
                l_g_state: 0.0,
                l_g_action: 0.0,
                l_admissible: None,
            },
            |x, _| vec![2.0 * x[0]],
            |_, _| 0.0,
        )
        .unwrap()
        .with_clipping(false);
        let opts = AbstractionOptions::for_model(&m);
        assert_eq!(opts.enabling, EnablingMode::Strict);
        let sym = build_from_counts(&m, &[8], 1, opts).unwrap();
        assert_eq!(sym.sinks(), &[CellId(0), CellId(1), CellId(2), CellId(5), CellId(6), CellId(7)]);
        let check = check_alternating_simulation(&m, &sym, 2_000, 1);
        assert_eq!(check.violations, 0);
    }

    #[test]
    fn empty_sample_check_is_vacuous() {
        let m = mountain_car();
        let sym = build_from_counts(&m, &[10, 10], 3, AbstractionOptions::for_model(&m)).unwrap();
        assert_eq!(check_alternating_simulation(&m, &sym, 0, 7), SimulationCheck::default());
    }

    #[test]
    fn successors_match_brute_force_intersection() {
        let m = mountain_car();
        let sym = build_from_counts(&m, &[12, 12], 3, AbstractionOptions::for_model(&m)).unwrap();
        let sg = sym.state_grid();
        for s in 0..sym.n_states() {
            for a in 0..sym.n_actions() {
                let image = m
                    .step(&sg.cell_center(CellId(s)).unwrap(), &sym.action_grid().cell_center(CellId(a)).unwrap())
                    .unwrap();
                let expected: Vec<CellId> = (0..sym.n_states())
                    .map(CellId)
                    .filter(|c| {
                        let b = sg.cell_bounds(*c).unwrap();
                        (0..2).all(|i| {
                            b.lower[i] <= image[i] + sym.inflation()[i] && b.upper[i] >= image[i] - sym.inflation()[i]
                        })
                    })
                    .collect();
                assert_eq!(sym.successors(CellId(s), CellId(a)), expected, "pair ({s}, {a})");
            }
        }
    }

    #[test]
    fn halving_spacing_shrinks_covered_width() {
        let m = half_model();
        let covered = |n: usize| {
            let sym = build_from_counts(&m, &[n], 1, AbstractionOptions::for_model(&m)).unwrap();
            let eta = sym.state_grid().spacing()[0];
            (0..n)
                .map(|s| sym.successor_indices(s, 0).len() as f64 * eta)
                .fold(0.0, f64::max)
        };
        let mut prev = covered(4);
        for n in [8, 16, 32, 64] {
            let cur = covered(n);
            assert!(cur <= prev + 1e-12, "n={n}: {cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn center_only_map_is_deterministic_and_unsound() {
        let m = mountain_car();
        let opts = AbstractionOptions {
            inflation: InflationMode::CenterOnly,
            ..AbstractionOptions::for_model(&m)
        };
        let sym = build_from_counts(&m, &[40, 40], 3, opts).unwrap();
        assert_eq!(sym.stats().max_successors, 1);
        assert!(check_alternating_simulation(&m, &sym, 20_000, 7).violations > 0);
    }

    #[test]
    fn build_is_independent_of_worker_count() {
        let m = mountain_car();
        let opts = AbstractionOptions::for_model(&m);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| build_from_counts(&m, &[30, 30], 3, opts).unwrap());
        let b = four.install(|| build_from_counts(&m, &[30, 30], 3, opts).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn lipschitz_and_exact_bounds_contain_samples() {
        let mut rng = crate::rng::seeded(11);
        // Van der Pol in both sound modes.
        let m = van_der_pol();
        let sg = GridPartition::new(m.state_space().clone(), vec![0.25, 0.25]).unwrap();
        let ag = action_grid_for(&m, 3).unwrap();
        for mode in [RewardMode::Lipschitz, RewardMode::ExactCallback] {
            for _ in 0..100 {
                let s = CellId(rng.gen_range(0..sg.total_cells()));
                let a = CellId(rng.gen_range(0..ag.total_cells()));
                let (lo, hi) = reward_bounds(&m, &sg, &ag, s, a, mode).unwrap();
                for _ in 0..1_000 {
                    let x = sg.sample_in_cell(s, &mut rng);
                    let u = ag.sample_in_cell(a, &mut rng);
                    let g = m.reward(&x, &u).unwrap();
                    assert!(lo - 1e-12 <= g && g <= hi + 1e-12, "{mode}: {g} not in [{lo}, {hi}]");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn quantize_returns_containing_cell(x in -1.2f64..=0.6, v in -0.07f64..=0.07, n in 1usize..50) {
            let m = mountain_car();
            let g = GridPartition::with_cells(m.state_space().clone(), &[n, n + 3]).unwrap();
            let id = g.quantize(&[x, v]).unwrap();
            let cell = g.cell_bounds(id).unwrap();
            prop_assert!(cell.contains(&[x, v]));
            prop_assert_eq!(g.id_of(&g.multi_index(id)).unwrap(), id);
        }

        #[test]
        fn cells_cover_box(lo in -5.0f64..5.0, w in 0.1f64..10.0, frac in 0.01f64..1.0) {
            let g = build_grid(unit_box(lo, lo + w), vec![w * frac]).unwrap();
            let first = g.cell_bounds(CellId(0)).unwrap();
            let last = g.cell_bounds(CellId(g.total_cells() - 1)).unwrap();
            prop_assert_eq!(first.lower[0], lo);
            prop_assert_eq!(last.upper[0], lo + w);
            for j in 1..g.total_cells() {
                let prev = g.cell_bounds(CellId(j - 1)).unwrap();
                let cur = g.cell_bounds(CellId(j)).unwrap();
                prop_assert_eq!(prev.upper[0], cur.lower[0]);
                prop_assert!(cur.lower[0] < cur.upper[0]);
            }
        }
    }
}
