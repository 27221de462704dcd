//! Quantitative guarantees: the Lipschitz recursion for Q-value moduli, the
//! per-sweep precision bound, discretization choice for a target precision,
//! the stability test of the recursion and the experiment metrics.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use crate::abstraction::GridPartition;
use crate::dynamics::{LipschitzBounds, SystemModel};
use crate::error::{invalid, Result};
use crate::learner::{PolicyTable, QTablePair};

/// `L_ξ^(k)` and `L_v^(k)` for `k = 1..=n` (stored at index `k - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzSequence {
    pub l_state: Vec<f64>,
    pub l_action: Vec<f64>,
    pub gamma: f64,
    pub inputs: LipschitzBounds,
}

impl LipschitzSequence {
    pub fn len(&self) -> usize {
        self.l_state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l_state.is_empty()
    }

    pub fn l_state_max(&self) -> f64 {
        self.l_state.iter().copied().fold(0.0, f64::max)
    }

    pub fn l_action_max(&self) -> f64 {
        self.l_action.iter().copied().fold(0.0, f64::max)
    }

    /// `(L_ξ^(k), L_v^(k))`, `k` counted from 1.
    pub fn at(&self, k: usize) -> Result<(f64, f64)> {
        if k == 0 || k > self.len() {
            return Err(invalid(format!("k = {k} outside 1..={}", self.len())));
        }
        Ok((self.l_state[k - 1], self.l_action[k - 1]))
    }
}

fn admissible(bounds: &LipschitzBounds) -> Result<f64> {
    bounds
        .l_admissible
        .ok_or_else(|| invalid("l_admissible must be set (see effective_bounds)"))
}

/// Constants as used by the recursion for a concrete pair of grids.
///
/// A piecewise-constant reward with jump `J` counts as `L_gξ = J / η_max`, the
/// smallest slope that bounds a jump across one cell. A missing `L_𝒜` becomes
/// `diam(𝒜) / η_min`.
pub fn effective_bounds(model: &SystemModel, state_grid: &GridPartition, _action_grid: &GridPartition) -> LipschitzBounds {
    let mut b = model.lipschitz().clone();
    if let Some(jump) = model.reward_jump() {
        b.l_g_state = b.l_g_state.max(jump / state_grid.spacing_max());
    }
    let eta_min = state_grid.spacing().iter().copied().fold(f64::INFINITY, f64::min);
    b.l_admissible = Some(b.admissible_or(model.action_space().diameter(), eta_min));
    b
}

fn recursion_matrix(b: &LipschitzBounds, l_adm: f64) -> Matrix2<f64> {
    Matrix2::new(
        b.l_f_state,
        l_adm * b.l_f_state,
        b.l_f_action,
        l_adm * b.l_f_action,
    )
}

/// Iterate `[L_ξ; L_v]_k = γ·M·[L_ξ; L_v]_{k-1} + [L_gξ; L_gv]` from the base
/// case `(L_gξ, L_gv)` at `k = 1`, with `M = [[L_fξ, L_𝒜L_fξ], [L_fv, L_𝒜L_fv]]`.
pub fn lipschitz_recursion(bounds: &LipschitzBounds, gamma: f64, n: usize) -> Result<LipschitzSequence> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    bounds.validate()?;
    let l_adm = admissible(bounds)?;
    let m = recursion_matrix(bounds, l_adm) * gamma;
    let base = Vector2::new(bounds.l_g_state, bounds.l_g_action);
    let mut cur = base;
    let mut l_state = Vec::with_capacity(n);
    let mut l_action = Vec::with_capacity(n);
    for _ in 0..n {
        l_state.push(cur[0]);
        l_action.push(cur[1]);
        cur = m * cur + base;
    }
    Ok(LipschitzSequence {
        l_state,
        l_action,
        gamma,
        inputs: bounds.clone(),
    })
}

/// `L_ξ^(k)·η + L_v^(k)·μ`.
pub fn precision_bound(seq: &LipschitzSequence, k: usize, eta: f64, mu: f64) -> Result<f64> {
    let (ls, la) = seq.at(k)?;
    Ok(ls * eta + la * mu)
}

/// `max_k L_ξ^(k)·η + max_k L_v^(k)·μ`.
pub fn precision_bound_max(seq: &LipschitzSequence, eta: f64, mu: f64) -> f64 {
    seq.l_state_max() * eta + seq.l_action_max() * mu
}

/// Spacings meeting a target precision `ε`.
///
/// The budget is split evenly between the two terms. With a finite action set
/// (`μ` effectively 0) it all goes to `η`. A term whose constant is zero is
/// unconstrained and gets the full box width; `η` is capped at the width.
pub fn choose_discretization(
    seq: &LipschitzSequence,
    epsilon: f64,
    action_finite: bool,
    state_width: f64,
    action_width: f64,
) -> Result<(f64, f64)> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (ls, la) = (seq.l_state_max(), seq.l_action_max());
    let per_term = |l: f64, budget: f64, width: f64| if l > 0.0 { (budget / l).min(width) } else { width };
    if action_finite {
        return Ok((per_term(ls, epsilon, state_width), 0.0));
    }
    match (ls > 0.0, la > 0.0) {
        (true, true) => Ok((per_term(ls, epsilon / 2.0, state_width), per_term(la, epsilon / 2.0, action_width))),
        (true, false) => Ok((per_term(ls, epsilon, state_width), action_width)),
        (false, true) => Ok((state_width, per_term(la, epsilon, action_width))),
        (false, false) => Ok((state_width, action_width)),
    }
}

/// Spectral radius of a real 2x2 matrix.
pub fn spectral_radius_2x2(m: &Matrix2<f64>) -> f64 {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        ((tr + r) / 2.0).abs().max(((tr - r) / 2.0).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Solve `AᵀPA − P = −I` for symmetric `P` through the Kronecker form.
pub fn solve_stein(a: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let at = a.transpose();
    // vec(AᵀPA) = (Aᵀ ⊗ Aᵀ) vec(P) with column-major vec.
    let mut k = Matrix4::<f64>::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    k[(2 * j + r, 2 * i + c)] = at[(j, i)] * at[(r, c)];
                }
            }
        }
    }
    let lhs = k - Matrix4::identity();
    let rhs = -Vector4::new(1.0, 0.0, 0.0, 1.0);
    let sol = lhs.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let p = Matrix2::new(sol[0], sol[2], sol[1], sol[3]);
    Some((p + p.transpose()) * 0.5)
}

fn symmetric_eigen_2x2(m: &Matrix2<f64>) -> (f64, f64) {
    let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mean - r, mean + r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    /// A positive definite `P` solving the Lyapunov equation exists.
    pub feasible: bool,
    /// Spectral radius of `γ·M` for `M = [[L_fξ, L_𝒜], [L_fξ, L_𝒜]]`.
    pub spectral_radius: f64,
    pub p_matrix: Option<Matrix2<f64>>,
    /// Largest eigenvalue of `γ²MᵀPM − P` for the returned `P`.
    pub residual_max_eigenvalue: Option<f64>,
    /// Spectral radius of `γ` times the recursion matrix.
    pub recursion_spectral_radius: f64,
    /// Limit of the recursion, when it contracts.
    pub fixed_point: Option<(f64, f64)>,
    /// The limit `(L_gξ, L_gv)` claimed for the stable case.
    pub claimed_limit: (f64, f64),
    /// The two spectral-radius tests disagree.
    pub verdicts_disagree: bool,
}

/// Stability of the Lipschitz recursion in its LMI form, plus the spectral
/// radius and fixed point of the recursion itself for comparison.
pub fn lmi_stability_check(gamma: f64, bounds: &LipschitzBounds) -> Result<StabilityReport> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let l_adm = admissible(bounds)?;
    let m = Matrix2::new(bounds.l_f_state, l_adm, bounds.l_f_state, l_adm);
    let a = m * gamma;
    let spectral_radius = spectral_radius_2x2(&a);

    let mut p_matrix = None;
    let mut residual_max_eigenvalue = None;
    if let Some(p) = solve_stein(&a) {
        let (lo, _) = symmetric_eigen_2x2(&p);
        let residual = a.transpose() * p * a - p;
        residual_max_eigenvalue = Some(symmetric_eigen_2x2(&residual).1);
        if lo > 0.0 {
            p_matrix = Some(p);
        }
    }

    let r = recursion_matrix(bounds, l_adm) * gamma;
    let recursion_spectral_radius = spectral_radius_2x2(&r);
    let base = Vector2::new(bounds.l_g_state, bounds.l_g_action);
    let fixed_point = if recursion_spectral_radius < 1.0 {
        (Matrix2::identity() - r).lu().solve(&base).map(|v| (v[0], v[1]))
    } else {
        None
    };
    Ok(StabilityReport {
        feasible: p_matrix.is_some(),
        spectral_radius,
        p_matrix,
        residual_max_eigenvalue,
        recursion_spectral_radius,
        fixed_point,
        claimed_limit: (bounds.l_g_state, bounds.l_g_action),
        verdicts_disagree: (spectral_radius < 1.0) != (recursion_spectral_radius < 1.0),
    })
}

/// `max |q̄ − q̲|` over entries finite in both tables.
pub fn q_distance(pair: &QTablePair) -> f64 {
    pair.q_min
        .iter()
        .zip(&pair.q_max)
        .filter(|(lo, hi)| lo.is_finite() && hi.is_finite())
        .map(|(lo, hi)| (hi - lo).abs())
        .fold(0.0, f64::max)
}

/// Fraction of state cells where the two policies choose different actions.
pub fn nonsimilarity_ratio(p_min: &PolicyTable, p_max: &PolicyTable) -> Result<f64> {
    if p_min.n_states() != p_max.n_states() {
        return Err(invalid(format!(
            "policies cover {} and {} states",
            p_min.n_states(),
            p_max.n_states()
        )));
    }
    if p_min.n_states() == 0 {
        return Err(invalid("empty policy tables"));
    }
    let differ = p_min
        .action_of
        .iter()
        .zip(&p_max.action_of)
        .filter(|(a, b)| a != b)
        .count();
    Ok(differ as f64 / p_min.n_states() as f64)
}

/// One row per `k`: `(k, L_ξ^(k), L_v^(k), bound(k))`.
pub fn bound_curve(seq: &LipschitzSequence, eta: f64, mu: f64) -> Vec<(usize, f64, f64, f64)> {
    (1..=seq.len())
        .map(|k| {
            let (ls, la) = (seq.l_state[k - 1], seq.l_action[k - 1]);
            (k, ls, la, ls * eta + la * mu)
        })
        .collect()
}

/// Key-value text summary of the analysis for a model and grid.
pub fn analysis_report(bounds: &LipschitzBounds, gamma: f64, n: usize, eta: f64, mu: f64) -> Result<String> {
    let seq = lipschitz_recursion(bounds, gamma, n)?;
    let st = lmi_stability_check(gamma, bounds)?;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("gamma", gamma.to_string());
    kv("l_f_state", bounds.l_f_state.to_string());
    kv("l_f_action", bounds.l_f_action.to_string());
    kv("l_g_state", bounds.l_g_state.to_string());
    kv("l_g_action", bounds.l_g_action.to_string());
    kv("l_admissible", admissible(bounds)?.to_string());
    kv("eta", eta.to_string());
    kv("mu", mu.to_string());
    kv("horizon", n.to_string());
    kv("l_state_max", seq.l_state_max().to_string());
    kv("l_action_max", seq.l_action_max().to_string());
    kv("precision_bound_final", precision_bound(&seq, n, eta, mu)?.to_string());
    kv("precision_bound_max", precision_bound_max(&seq, eta, mu).to_string());
    kv("lmi_spectral_radius", st.spectral_radius.to_string());
    kv("lmi_feasible", st.feasible.to_string());
    if let Some(p) = st.p_matrix {
        kv("lmi_p", format!("[[{}, {}], [{}, {}]]", p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)]));
    }
    kv("recursion_spectral_radius", st.recursion_spectral_radius.to_string());
    match st.fixed_point {
        Some((a, b)) => kv("recursion_fixed_point", format!("({a}, {b})")),
        None => kv("recursion_fixed_point", "none".into()),
    }
    kv("claimed_limit", format!("({}, {})", st.claimed_limit.0, st.claimed_limit.1));
    kv("verdicts_disagree", st.verdicts_disagree.to_string());
    Ok(out)
}
