//! Desk-scale min-entropy laboratory for classical-classical states.
//!
//! The composable key-length argument rests on a handful of min-entropy
//! inequalities: projecting onto a high-probability subset costs at most
//! `log2 p` bits (with a smoothed variant carrying a `(2/3) p eps`
//! rescaling), and trace distance controls both projection probabilities
//! and the smoothing neighborhood. This module makes those inequalities
//! executable on small joint distributions `P(x, b)` with commuting
//! (classical) side information, where every quantity is exactly
//! computable:
//!
//! * `H_min(X|B) = -log2 sum_b max_x P(x, b)`;
//! * projections and trace distances are finite sums;
//! * the smooth min-entropy maximum over the trace-distance ball is a
//!   small convex program solved exactly by waterfilling (see
//!   [`smooth_hmin`]).
//!
//! Quantum side information would require semidefinite programming and
//! is deliberately out of scope; the inequalities are already nontrivial
//! in the classical restriction.

use crate::error::{CoreError, Result};

/// Largest alphabet size accepted on either register.
pub const MAX_ALPHABET: usize = 64;

/// Normalization tolerance for joint probability tables.
pub const TRACE_TOL: f64 = 1e-12;

/// A classical-classical state: a joint probability table `P(x, b)` over
/// a key register `X` and a side-information register `B`.
///
/// Tables are stored row-major (`x` major). States are normalized by
/// default; explicitly subnormalized tables (trace at most 1) are
/// supported through [`CCState::new_subnormalized`] because projected,
/// unrenormalized states appear as intermediate objects in the
/// projection inequalities.
#[derive(Debug, Clone, PartialEq)]
pub struct CCState {
    nx: usize,
    nb: usize,
    table: Vec<f64>,
    trace: f64,
}

impl CCState {
    /// Validates and wraps a normalized joint table (`sum = 1` within
    /// [`TRACE_TOL`]).
    pub fn new(nx: usize, nb: usize, table: Vec<f64>) -> Result<CCState> {
        let state = Self::new_subnormalized(nx, nb, table)?;
        if (state.trace - 1.0).abs() > TRACE_TOL {
            return Err(CoreError::Domain(format!(
                "joint table must be normalized: sum = {}",
                state.trace
            )));
        }
        Ok(state)
    }

    /// Wraps a subnormalized table (`0 < sum <= 1` within tolerance),
    /// e.g. a projected state before renormalization.
    pub fn new_subnormalized(nx: usize, nb: usize, table: Vec<f64>) -> Result<CCState> {
        if nx == 0 || nb == 0 || nx > MAX_ALPHABET || nb > MAX_ALPHABET {
            return Err(CoreError::Domain(format!(
                "alphabet sizes must lie in 1..={MAX_ALPHABET}, got |X| = {nx}, |B| = {nb}"
            )));
        }
        if table.len() != nx * nb {
            return Err(CoreError::Domain(format!(
                "table length {} does not match |X| x |B| = {}",
                table.len(),
                nx * nb
            )));
        }
        let mut trace = 0.0;
        for &v in &table {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Domain(format!(
                    "table entries must be finite and nonnegative, got {v}"
                )));
            }
            trace += v;
        }
        if trace <= 0.0 || trace > 1.0 + TRACE_TOL {
            return Err(CoreError::Domain(format!(
                "table trace must lie in (0, 1], got {trace}"
            )));
        }
        Ok(CCState {
            nx,
            nb,
            table,
            trace,
        })
    }

    /// The uniform joint distribution.
    pub fn uniform(nx: usize, nb: usize) -> Result<CCState> {
        CCState::new(nx, nb, vec![1.0 / (nx * nb) as f64; nx * nb])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nb(&self) -> usize {
        self.nb
    }

    pub fn prob(&self, x: usize, b: usize) -> f64 {
        self.table[x * self.nb + b]
    }

    /// Total table mass (1 for normalized states).
    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn is_normalized(&self) -> bool {
        (self.trace - 1.0).abs() <= TRACE_TOL
    }

    fn column_max(&self, b: usize) -> f64 {
        (0..self.nx)
            .map(|x| self.prob(x, b))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Optimal guessing probability of `X` given `B`:
    /// `p_guess = sum_b max_x P(x, b)`.
    pub fn guessing_probability(&self) -> f64 {
        (0..self.nb).map(|b| self.column_max(b)).sum()
    }
}

/// Conditional min-entropy `H_min(X|B) = -log2 p_guess` in bits.
///
/// For commuting side information the optimal guessing strategy is to
/// answer the column-wise argmax, so the value is exact.
pub fn hmin(state: &CCState) -> f64 {
    -state.guessing_probability().log2()
}

/// Projects onto a subset `S` of the key alphabet: zeroes every row
/// outside `S`, renormalizes, and returns the retained probability
/// `p = Pr{ X in S }`.
pub fn project(state: &CCState, s: &[usize]) -> Result<(CCState, f64)> {
    let mut mask = vec![false; state.nx];
    for &x in s {
        if x >= state.nx {
            return Err(CoreError::Domain(format!(
                "subset element {x} outside alphabet 0..{}",
                state.nx
            )));
        }
        mask[x] = true;
    }
    let mut table = vec![0.0; state.nx * state.nb];
    let mut p = 0.0;
    for x in 0..state.nx {
        if mask[x] {
            for b in 0..state.nb {
                let v = state.prob(x, b);
                table[x * state.nb + b] = v;
                p += v;
            }
        }
    }
    if p <= 0.0 {
        return Err(CoreError::EmptySupport(
            "projection subset carries zero probability".into(),
        ));
    }
    for v in &mut table {
        *v /= p;
    }
    Ok((CCState::new(state.nx, state.nb, table)?, p))
}

/// Trace distance `D(P, Q) = (1/2) sum |P - Q|` between two states on the
/// same alphabets.
pub fn trace_distance(a: &CCState, b: &CCState) -> Result<f64> {
    if a.nx != b.nx || a.nb != b.nb {
        return Err(CoreError::Usage(format!(
            "alphabet mismatch: {}x{} vs {}x{}",
            a.nx, a.nb, b.nx, b.nb
        )));
    }
    let d: f64 = a
        .table
        .iter()
        .zip(&b.table)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(0.5 * d)
}

/// Checks the projected-states stability inequality: if
/// `D(rho, rho_star) <= eps` then
/// `D(p^{-1} P rho P, p_star^{-1} P rho_star P) <= (3/2) eps / p`,
/// where `p` is the projection probability of `rho`.
pub fn verify_lemma3(rho: &CCState, rho_star: &CCState, s: &[usize], eps: f64) -> Result<bool> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(CoreError::Domain(format!(
            "eps must be finite and nonnegative, got {eps}"
        )));
    }
    let d = trace_distance(rho, rho_star)?;
    if d > eps + 1e-12 {
        return Err(CoreError::Domain(format!(
            "hypothesis violated: D(rho, rho_star) = {d} > eps = {eps}"
        )));
    }
    let (proj, p) = project(rho, s)?;
    let (proj_star, _p_star) = project(rho_star, s)?;
    let lhs = trace_distance(&proj, &proj_star)?;
    Ok(lhs <= 1.5 * eps / p + 1e-12)
}

/// Smooth min-entropy `H_min^eps(X|B)`: the maximum of [`hmin`] over
/// normalized classical states within trace distance `eps`.
///
/// Maximizing the entropy means minimizing the guessing probability
/// `G(Q) = sum_b max_x Q(x, b)`, a convex piecewise-linear objective over
/// the intersection of the simplex with the trace-distance ball. The
/// exact optimum has a waterfilling structure: mass is shaved off the
/// top of each column down to a level `m_b` (cost: one budget unit per
/// active entry per unit of level) and parked in entries strictly below
/// their column level (free). Greedily lowering whichever column
/// currently has the fewest active entries is exactly optimal because
/// each column's marginal cost is a nondecreasing step function of the
/// amount removed. Two hard stops apply: the movement budget `eps`, and
/// the global floor `sum_b m_b >= 1/|X|` (below it the removed mass
/// could not be re-parked), at which point `G` has reached its global
/// minimum `1/|X|`.
///
/// `eps >= 1` makes the ball cover the whole simplex, so the value
/// degenerates to `log2 |X|`.
pub fn smooth_hmin(state: &CCState, eps: f64) -> Result<f64> {
    Ok(smooth_hmin_witness(state, eps)?.0)
}

/// [`smooth_hmin`] together with an explicit maximizer: a state within
/// trace distance `eps` achieving the returned entropy.
pub fn smooth_hmin_witness(state: &CCState, eps: f64) -> Result<(f64, CCState)> {
    if !state.is_normalized() {
        return Err(CoreError::Usage(
            "smoothing is defined over normalized states".into(),
        ));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(CoreError::Domain(format!(
            "eps must be finite and nonnegative, got {eps}"
        )));
    }
    let (nx, nb) = (state.nx, state.nb);
    if eps >= 1.0 {
        // The ball covers the simplex; the conditionally uniform table
        // attains log2 |X| outright.
        let uniform_cond: Vec<f64> = (0..nx * nb)
            .map(|i| {
                let b = i % nb;
                (0..nx).map(|x| state.prob(x, b)).sum::<f64>() / nx as f64
            })
            .collect();
        let witness = CCState::new(nx, nb, uniform_cond)?;
        return Ok(((nx as f64).log2(), witness));
    }

    // Sorted column values (descending) drive the level breakpoints.
    let sorted: Vec<Vec<f64>> = (0..nb)
        .map(|b| {
            let mut col: Vec<f64> = (0..nx).map(|x| state.prob(x, b)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            col
        })
        .collect();
    let mut level: Vec<f64> = sorted.iter().map(|c| c[0]).collect();
    let mut active: Vec<usize> = vec![1; nb];
    let mut g: f64 = level.iter().sum();
    let floor = 1.0 / nx as f64;
    let mut budget = eps;

    loop {
        if budget <= 1e-18 || g - floor <= 1e-18 {
            break;
        }
        // Cheapest marginal reduction: smallest active count among the
        // columns that can still be lowered.
        let mut best: Option<usize> = None;
        for b in 0..nb {
            if level[b] <= 0.0 {
                continue;
            }
            if best.is_none_or(|c| active[b] < active[c]) {
                best = Some(b);
            }
        }
        let Some(b) = best else { break };
        let next = if active[b] < nx { sorted[b][active[b]] } else { 0.0 };
        let step_room = level[b] - next;
        let dm = step_room
            .min(budget / active[b] as f64)
            .min(g - floor);
        level[b] -= dm;
        budget -= dm * active[b] as f64;
        g -= dm;
        if level[b] <= next {
            // Reached the breakpoint: absorb every entry tied at it.
            while active[b] < nx && sorted[b][active[b]] >= level[b] {
                active[b] += 1;
            }
        }
    }

    let witness = build_witness(state, &level)?;
    Ok((-g.log2(), witness))
}

/// Materializes the waterfilling solution: clip each column at its final
/// level, then park the removed mass in entries that still have slack
/// below their column level.
fn build_witness(state: &CCState, level: &[f64]) -> Result<CCState> {
    let (nx, nb) = (state.nx, state.nb);
    let mut table: Vec<f64> = (0..nx * nb)
        .map(|i| state.table[i].min(level[i % nb]))
        .collect();
    let mut removed: f64 = state.trace - table.iter().sum::<f64>();
    for b in 0..nb {
        for x in 0..nx {
            if removed <= 1e-15 {
                break;
            }
            let i = x * nb + b;
            let slack = level[b] - table[i];
            if slack > 0.0 {
                let add = slack.min(removed);
                table[i] += add;
                removed -= add;
            }
        }
    }
    if removed > 1e-9 {
        return Err(CoreError::Numerical(format!(
            "witness construction left {removed} mass unparked"
        )));
    }
    // Exact renormalization absorbs the rounding dust.
    let sum: f64 = table.iter().sum();
    for v in &mut table {
        *v /= sum;
    }
    CCState::new(nx, nb, table)
}

/// Checks the smoothed projection inequality
///
/// ```text
/// H_min^eps(X|B)_{p^{-1} P rho P}
///     >= H_min^{(2/3) p eps}(X|B)_rho + log2(p - (2/3) p eps)
/// ```
///
/// for the projection onto `S` with retained probability `p`.
pub fn verify_theorem1(rho: &CCState, s: &[usize], eps: f64) -> Result<bool> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(CoreError::Domain(format!(
            "eps must be finite and nonnegative, got {eps}"
        )));
    }
    let (proj, p) = project(rho, s)?;
    let rescaled = (2.0 / 3.0) * p * eps;
    if p - rescaled <= 0.0 {
        return Err(CoreError::Domain(format!(
            "need p > (2/3) p eps, got p = {p}, eps = {eps}"
        )));
    }
    let lhs = smooth_hmin(&proj, eps)?;
    let rhs = smooth_hmin(rho, rescaled)? + (p - rescaled).log2();
    Ok(lhs >= rhs - 1e-9)
}
