//! Small dense LP solver and pruning of approximately redundant affine
//! constraints a_m·x ≤ 1.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Result};

/// Rows a_m with implicit right-hand side 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraintSet {
    pub d: usize,
    pub rows: Vec<Vec<f64>>,
    /// Index of each row in the set it was derived from.
    pub labels: Vec<usize>,
}

impl AffineConstraintSet {
    pub fn empty(d: usize) -> Self {
        Self { d, rows: Vec::new(), labels: Vec::new() }
    }

    /// Rows already in a·x ≤ 1 form.
    pub fn from_rows(d: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return param(format!("row {i} has {} entries, expected {d}", r.len()));
            }
            if r.iter().all(|&x| x == 0.0) {
                return param(format!("row {i} is identically zero"));
            }
        }
        let labels = (0..rows.len()).collect();
        Ok(Self { d, rows, labels })
    }

    /// Normalize a·x ≤ b to (a/b)·x ≤ 1. Rows need b > 0.
    pub fn from_general(d: usize, a: Vec<Vec<f64>>, b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return param("row and right-hand-side counts differ");
        }
        let mut rows = Vec::with_capacity(a.len());
        for (i, (r, &bi)) in a.into_iter().zip(b).enumerate() {
            if !(bi > 0.0) {
                return param(format!("row {i} has nonpositive constant term {bi}"));
            }
            rows.push(r.into_iter().map(|x| x / bi).collect());
        }
        Self::from_rows(d, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<f64>, label: usize) {
        self.rows.push(row);
        self.labels.push(label);
    }

    /// max_m a_m·x − 1 (negative inside, −∞ for an empty set).
    pub fn max_excess(&self, x: &[f64]) -> f64 {
        self.rows.iter().map(|r| dot(r, x) - 1.0).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.max_excess(x) <= tol
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let head: Vec<String> = (0..self.d).map(|i| format!("a_{i}")).collect();
        writeln!(out, "label,{}", head.join(","))?;
        for (l, r) in self.labels.iter().zip(&self.rows) {
            let vals: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{l},{}", vals.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, argmax: Vec<f64> },
    Unbounded,
    Infeasible,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximize c·x subject to a_m·x ≤ 1.
///
/// Solved through its dual, min Σy s.t. Σ y_m a_m = c, y ≥ 0, with a
/// two-phase tableau simplex and Bland's rule. The dual has only d equality
/// rows, so each pivot costs O(d·m). The primal argmax is recovered from the
/// dual simplex multipliers.
pub fn lp_max(objective: &[f64], constraints: &AffineConstraintSet) -> LpOutcome {
    let d = constraints.d;
    assert_eq!(objective.len(), d, "objective dimension must match the constraint set");
    let m = constraints.len();
    let cscale = objective.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if cscale == 0.0 {
        return LpOutcome::Optimal { value: 0.0, argmax: vec![0.0; d] };
    }
    if m == 0 {
        return LpOutcome::Unbounded;
    }
    let ascale = constraints.rows.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-11;
    let cols = m + d;
    let mut tab = vec![vec![0.0; cols]; d];
    let mut rhs = vec![0.0; d];
    let mut sign = vec![1.0; d];
    for k in 0..d {
        let c = objective[k] / cscale;
        sign[k] = if c < 0.0 { -1.0 } else { 1.0 };
        rhs[k] = sign[k] * c;
        for (j, row) in constraints.rows.iter().enumerate() {
            tab[k][j] = sign[k] * row[k] / ascale;
        }
        tab[k][m + k] = 1.0;
    }
    let mut basis: Vec<usize> = (m..cols).collect();

    // Phase 1: drive the artificials out.
    let cost1: Vec<f64> = (0..cols).map(|j| if j >= m { 1.0 } else { 0.0 }).collect();
    run_simplex(&mut tab, &mut rhs, &mut basis, &cost1, cols, tol);
    let infeas: f64 = basis.iter().zip(&rhs).filter(|(b, _)| **b >= m).map(|(_, r)| r).sum();
    if infeas > 1e-9 {
        return LpOutcome::Unbounded;
    }
    for i in 0..d {
        if basis[i] >= m {
            if let Some(j) = (0..m).find(|&j| tab[i][j].abs() > tol && !basis.contains(&j)) {
                pivot(&mut tab, &mut rhs, &mut basis, i, j);
            }
        }
    }

    // Phase 2 over real columns only.
    let cost2: Vec<f64> = (0..cols).map(|j| if j < m { 1.0 } else { 0.0 }).collect();
    if !run_simplex(&mut tab, &mut rhs, &mut basis, &cost2, m, tol) {
        // Σy is bounded below by zero, so this cannot happen for a feasible dual.
        return LpOutcome::Infeasible;
    }
    // Multipliers of the sign-adjusted rows live in the artificial columns.
    let mut x = vec![0.0; d];
    for k in 0..d {
        let pi: f64 = (0..d).map(|i| cost2[basis[i]] * tab[i][m + k]).sum();
        x[k] = sign[k] * pi / ascale;
    }
    let value = dot(objective, &x);
    LpOutcome::Optimal { value, argmax: x }
}

/// Returns false if the problem is unbounded in the entering direction.
fn run_simplex(tab: &mut [Vec<f64>], rhs: &mut [f64], basis: &mut [usize], cost: &[f64], allowed: usize, tol: f64) -> bool {
    let d = tab.len();
    for _ in 0..100_000 {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let rc = cost[j] - (0..d).map(|i| cost[basis[i]] * tab[i][j]).sum::<f64>();
            rc < -tol
        });
        let Some(j) = entering else { return true };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..d {
            if tab[i][j] > tol {
                let ratio = rhs[i] / tab[i][j];
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - 1e-14 || (ratio <= lr + 1e-14 && basis[i] < basis[li]) {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
        }
        let Some((i, _)) = leave else { return false };
        pivot(tab, rhs, basis, i, j);
    }
    true
}

fn pivot(tab: &mut [Vec<f64>], rhs: &mut [f64], basis: &mut [usize], r: usize, c: usize) {
    let p = tab[r][c];
    tab[r].iter_mut().for_each(|x| *x /= p);
    rhs[r] /= p;
    let prow = tab[r].clone();
    let prhs = rhs[r];
    for i in 0..tab.len() {
        if i != r {
            let f = tab[i][c];
            if f != 0.0 {
                for (x, y) in tab[i].iter_mut().zip(&prow) {
                    *x -= f * y;
                }
                rhs[i] -= f * prhs;
            }
        }
    }
    basis[r] = c;
}

/// v = max (a·x − 1) over the region cut out by `active`; +∞ when unbounded.
pub fn max_violation(row: &[f64], active: &AffineConstraintSet) -> f64 {
    match lp_max(row, active) {
        LpOutcome::Optimal { value, .. } => value - 1.0,
        _ => f64::INFINITY,
    }
}

/// v for row `index` of `set` against all other rows of the set.
pub fn max_violation_at(set: &AffineConstraintSet, index: usize) -> f64 {
    let mut rest = set.clone();
    rest.rows.remove(index);
    rest.labels.remove(index);
    max_violation(&set.rows[index], &rest)
}

/// Prune approximately redundant rows.
///
/// 1. Visit rows in a seeded random order and keep a row only if it can be
///    violated by more than `eps` within the region of the rows kept so far
///    (unbounded counts as violated).
/// 2. Tighten every kept row to a·x ≤ 1/(1+eps).
/// 3. Visit the kept rows in a new random order and drop those that are
///    exactly redundant (v ≤ 0) against the others.
///
/// The result lies inside the original region and contains the original
/// region shrunk by 1/(1+eps).
pub fn prune_constraints(full: &AffineConstraintSet, eps: f64, seed: u64) -> Result<AffineConstraintSet> {
    if !(eps > 0.0) {
        return param(format!("eps must be positive, got {eps}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut rng);
    let mut active = AffineConstraintSet::empty(full.d);
    for &i in &order {
        let v = max_violation(&full.rows[i], &active);
        if v > eps {
            active.push(full.rows[i].clone(), full.labels[i]);
        }
    }
    for r in active.rows.iter_mut() {
        r.iter_mut().for_each(|x| *x *= 1.0 + eps);
    }
    let mut order: Vec<usize> = (0..active.len()).collect();
    order.shuffle(&mut rng);
    let mut keep = vec![true; active.len()];
    for &i in &order {
        let others = AffineConstraintSet {
            d: active.d,
            rows: (0..active.len()).filter(|&j| j != i && keep[j]).map(|j| active.rows[j].clone()).collect(),
            labels: Vec::new(),
        };
        if max_violation(&active.rows[i], &others) <= 0.0 {
            keep[i] = false;
        }
    }
    let mut out = AffineConstraintSet::empty(full.d);
    for i in 0..active.len() {
        if keep[i] {
            out.push(active.rows[i].clone(), active.labels[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_box() -> AffineConstraintSet {
        AffineConstraintSet::from_rows(2, vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap()
    }

    #[test]
    fn box_optimum() {
        match lp_max(&[1.0, 1.0], &unit_box()) {
            LpOutcome::Optimal { value, argmax } => {
                assert!((value - 2.0).abs() < 1e-12);
                assert!((argmax[0] - 1.0).abs() < 1e-12 && (argmax[1] - 1.0).abs() < 1e-12);
            }
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn empty_set_is_unbounded() {
        assert_eq!(lp_max(&[1.0, 0.0], &AffineConstraintSet::empty(2)), LpOutcome::Unbounded);
        let half = AffineConstraintSet::from_rows(2, vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(lp_max(&[0.0, 1.0], &half), LpOutcome::Unbounded);
    }

    #[test]
    fn violation_special_cases() {
        let b = unit_box();
        assert!(max_violation(&[1.0, 0.0], &b).abs() < 1e-12);
        assert!((max_violation(&[0.5, 0.0], &b) + 0.5).abs() < 1e-12);
        let line = AffineConstraintSet::from_rows(2, vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(max_violation(&[0.0, 1.0], &line), f64::INFINITY);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(AffineConstraintSet::from_rows(2, vec![vec![0.0, 0.0]]).is_err());
        assert!(AffineConstraintSet::from_general(1, vec![vec![1.0]], &[0.0]).is_err());
        let s = AffineConstraintSet::from_general(1, vec![vec![2.0]], &[4.0]).unwrap();
        assert_eq!(s.rows[0], vec![0.5]);
    }

    /// Vertex enumeration in 2-D: every pairwise intersection that is feasible.
    fn vertex_oracle(c: &[f64], set: &AffineConstraintSet) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let (a, b) = (&set.rows[i], &set.rows[j]);
                let det = a[0] * b[1] - a[1] * b[0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = [(b[1] - a[1]) / det, (a[0] - b[0]) / det];
                if set.contains(&x, 1e-9) {
                    best = best.max(dot(c, &x));
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn matches_vertex_enumeration(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Rows around the circle keep the region bounded.
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|i| {
                    let t = std::f64::consts::TAU * (i as f64 + rng.random::<f64>()) / 20.0;
                    let r = 0.5 + rng.random::<f64>();
                    vec![r * t.cos(), r * t.sin()]
                })
                .collect();
            let set = AffineConstraintSet::from_rows(2, rows).unwrap();
            let c = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            match lp_max(&c, &set) {
                LpOutcome::Optimal { value, argmax } => {
                    prop_assert!((value - vertex_oracle(&c, &set)).abs() < 1e-8);
                    prop_assert!(set.contains(&argmax, 1e-9));
                }
                o => prop_assert!(false, "{:?}", o),
            }
        }

        #[test]
        fn random_lps_in_six_dims_are_feasible(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let set = AffineConstraintSet::from_rows(6, rows).unwrap();
            let c: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            if let LpOutcome::Optimal { value, argmax } = lp_max(&c, &set) {
                prop_assert!(set.contains(&argmax, 1e-9));
                prop_assert!((dot(&c, &argmax) - value).abs() < 1e-9 * value.abs().max(1.0));
                // No feasible random point does better.
                for _ in 0..200 {
                    let x: Vec<f64> = (0..6).map(|_| (rng.random::<f64>() - 0.5) * 4.0).collect();
                    if set.contains(&x, 0.0) {
                        prop_assert!(dot(&c, &x) <= value + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn nothing_to_prune() {
        // Triangle: every row is essential.
        let tri = AffineConstraintSet::from_rows(
            2,
            vec![vec![1.0, 0.0], vec![-1.0, 1.0], vec![-1.0, -1.0]],
        )
        .unwrap();
        let out = prune_constraints(&tri, 1e-6, 3).unwrap();
        assert_eq!(out.len(), 3);
        for r in &out.rows {
            let orig = tri.rows.iter().find(|o| (o[0] * (1.0 + 1e-6) - r[0]).abs() < 1e-15 && (o[1] * (1.0 + 1e-6) - r[1]).abs() < 1e-15);
            assert!(orig.is_some());
        }
    }

    #[test]
    fn pruning_is_sound_for_polygon_family() {
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / 2000.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let full = AffineConstraintSet::from_rows(2, rows).unwrap();
        let eps = 0.05;
        let red = prune_constraints(&full, eps, 11).unwrap();
        assert!(red.len() < 40, "{}", red.len());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x = [rng.random::<f64>() * 2.2 - 1.1, rng.random::<f64>() * 2.2 - 1.1];
            if red.contains(&x, 0.0) {
                assert!(full.contains(&x, 1e-12));
            }
            if full.contains(&x, 0.0) {
                let y = [x[0] / (1.0 + eps), x[1] / (1.0 + eps)];
                assert!(red.contains(&y, 1e-12));
            }
        }
    }
}
