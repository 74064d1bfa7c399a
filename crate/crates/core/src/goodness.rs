//! m-good boxes, the recursion `θ_m = φ(θ_{m−1})`, its threshold, and the
//! (m,n)-good site classifier.

use std::io::Write;

use fixedbitset::FixedBitSet;
use rayon::prelude::*;
use serde::Serialize;

use crate::boxlattice::BoxAddress;
use crate::error::{Error, Result};
use crate::percolation::{RetentionConfig, RetentionTree};
use crate::rng::derive_seed;
use crate::unionfind::UnionFind;

pub const THETA_CAP: usize = 200;
pub const FIXED_POINT_EPS: f64 = 1e-15;
pub const TWO_THIRDS: f64 = 2.0 / 3.0;

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{name} = {v} not in [0, 1]")))
    }
}

/// `φ(x) = (px)^{N²} + N²(px)^{N²−1}(1−px)`.
///
/// The expanded form `N²p^{N²−1}x^{N²−1} − (N²−1)p^{N²}x^{N²}` is evaluated
/// too and must agree to 1e−12 relative.
pub fn phi(base: u32, p: f64, x: f64) -> Result<f64> {
    if base < 2 {
        return Err(Error::OutOfRange(format!("N = {base} must be at least 2")));
    }
    check_unit("p", p)?;
    check_unit("x", x)?;
    let k = (base * base) as i32;
    let kf = k as f64;
    let y = p * x;
    let factored = y.powi(k - 1) * (y + kf * (1.0 - y));
    let expanded = kf * p.powi(k - 1) * x.powi(k - 1) - (kf - 1.0) * p.powi(k) * x.powi(k);
    let scale = factored.abs().max(expanded.abs());
    if (factored - expanded).abs() > 1e-12 * scale + 1e-300 {
        return Err(Error::OutOfRange(format!(
            "phi forms disagree at N={base}, p={p}, x={x}: {factored} vs {expanded}"
        )));
    }
    Ok(factored)
}

#[derive(Clone, Debug, Serialize)]
pub struct ThetaSequence {
    pub base: u32,
    pub p: f64,
    /// `θ_0..θ_M`.
    pub values: Vec<f64>,
    /// First `m` with `|θ_m − θ_{m−1}| < 1e−15`; later terms repeat `θ_m`.
    pub converged_at: Option<usize>,
    pub min: f64,
    pub inf_at_least_two_thirds: bool,
}

/// Iterates `θ_0 = 1`, `θ_m = φ(θ_{m−1})` up to `m = max_m`.
pub fn theta_sequence(base: u32, p: f64, max_m: usize) -> Result<ThetaSequence> {
    let mut values = Vec::with_capacity(max_m + 1);
    values.push(1.0);
    let mut converged_at = None;
    for m in 1..=max_m {
        let prev = values[m - 1];
        let next = if converged_at.is_some() {
            prev
        } else {
            phi(base, p, prev)?
        };
        if converged_at.is_none() && (next - prev).abs() < FIXED_POINT_EPS {
            converged_at = Some(m);
        }
        values.push(next);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ThetaSequence {
        base,
        p,
        values,
        converged_at,
        min,
        inf_at_least_two_thirds: min >= TWO_THIRDS,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Threshold {
    pub base: u32,
    /// Smallest `p` (within `tol`) with `min_{m ≤ 200} θ_m ≥ 2/3`.
    pub p: f64,
    pub tol: f64,
    /// Largest `ν` for which the inequality chain `p^{N²} − ½N²(N²−1)²ν² > 1−ν`
    /// holds at `p = (1−ν/2)^{1/N²}` and `1−ν > 2/3`.
    pub nu: f64,
    /// `(1−ν/2)^{1/N²}` for that `ν`.
    pub paper_bound: f64,
    /// `φ(1−ν) > 1−ν` at the paper bound.
    pub nu_fixed_point_check: bool,
    /// Every `θ_m` at the paper bound exceeds `1−ν`.
    pub nu_sequence_check: bool,
}

fn theta_min_ok(base: u32, p: f64) -> Result<bool> {
    Ok(theta_sequence(base, p, THETA_CAP)?.min >= TWO_THIRDS)
}

fn paper_bound(base: u32, nu: f64) -> f64 {
    (1.0 - nu / 2.0).powf(1.0 / (base * base) as f64)
}

fn chain_holds(base: u32, nu: f64) -> bool {
    let k = (base * base) as f64;
    let p = paper_bound(base, nu);
    1.0 - nu > TWO_THIRDS && p.powf(k) - 0.5 * k * (k - 1.0).powi(2) * nu * nu > 1.0 - nu
}

/// Bisection for the threshold of `inf_m θ_m ≥ 2/3`. `θ_m` is nondecreasing
/// in `p`, so the predicate is monotone.
pub fn p0_threshold(base: u32, tol: f64) -> Result<Threshold> {
    if !(tol > 0.0 && tol < 0.5) {
        return Err(Error::OutOfRange(format!(
            "tol = {tol} must lie in (0, 1/2)"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if !theta_min_ok(base, 1.0 - tol)? {
        return Err(Error::NoThresholdFound(1.0 - tol));
    }
    hi = hi.min(1.0 - tol);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if theta_min_ok(base, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // admissible ν form an interval starting at 0
    let (mut a, mut b) = (0.0f64, 1.0 / 3.0);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if chain_holds(base, mid) {
            a = mid;
        } else {
            b = mid;
        }
    }
    let nu = a;
    let bound = paper_bound(base, nu);
    let fixed = phi(base, bound, 1.0 - nu)? > 1.0 - nu;
    let seq = theta_sequence(base, bound, THETA_CAP)?;
    let sequence_ok = seq.values[1..].iter().all(|&t| t > 1.0 - nu);
    Ok(Threshold {
        base,
        p: hi,
        tol,
        nu,
        paper_bound: bound,
        nu_fixed_point_check: fixed,
        nu_sequence_check: sequence_ok,
    })
}

/// m-good labels of every retained box of a tree.
///
/// A box at level `ℓ` is labelled for `m ≤ min(M, depth − ℓ)`; `m = 0`
/// means retained. Boxes that are not retained have no labels.
#[derive(Clone, Debug)]
pub struct GoodnessTable {
    pub base: u32,
    pub max_m: u32,
    pub depth: u32,
    /// `good[ℓ][m−1]`: bit `r` set iff the rank-`r` box of level `ℓ` is m-good.
    good: Vec<Vec<FixedBitSet>>,
}

impl GoodnessTable {
    pub fn max_m_at(&self, level: u32) -> u32 {
        self.max_m.min(self.depth.saturating_sub(level))
    }

    /// Label of the rank-`rank` retained box of `level`.
    pub fn is_good_rank(&self, level: u32, rank: usize, m: u32) -> Option<bool> {
        if m == 0 {
            return Some(true);
        }
        if m > self.max_m_at(level) {
            return None;
        }
        Some(self.good[level as usize][m as usize - 1].contains(rank))
    }

    pub fn is_good(&self, tree: &RetentionTree, addr: &BoxAddress, m: u32) -> Option<bool> {
        let rank = tree.rank_of(addr)?;
        self.is_good_rank(addr.level, rank, m)
    }

    /// Bitset over ranks of level `level` for budget `m ≥ 1`.
    pub fn good_ranks(&self, level: u32, m: u32) -> Option<&FixedBitSet> {
        if m == 0 || m > self.max_m_at(level) {
            None
        } else {
            Some(&self.good[level as usize][m as usize - 1])
        }
    }

    /// `[0,1]²` m-good for `m = 0..=M`.
    pub fn root_sequence(&self) -> Vec<bool> {
        (0..=self.max_m)
            .map(|m| self.is_good_rank(0, 0, m).unwrap())
            .collect()
    }
}

/// Bottom-up evaluation of m-goodness for every retained box.
pub fn classify_m_good(tree: &RetentionTree, max_m: u32) -> Result<GoodnessTable> {
    let depth = tree.depth();
    if max_m > depth {
        return Err(Error::DepthExceeded {
            requested: max_m,
            limit: depth,
        });
    }
    let base = tree.base();
    let n2 = (base * base) as usize;
    let need = n2 - 1;
    let mut good: Vec<Vec<FixedBitSet>> = vec![Vec::new(); depth as usize + 1];
    for level in (0..depth).rev() {
        let lm = tree.level(level + 1);
        let parents = lm.parent_count();
        let top = max_m.min(depth - level);
        let mut per_m = Vec::with_capacity(top as usize);
        for m in 1..=top {
            let mut bits = FixedBitSet::with_capacity(parents);
            for k in 0..parents {
                let (s, e) = (lm.child_start[k] as usize, lm.child_start[k + 1] as usize);
                let hits = if m == 1 {
                    e - s
                } else {
                    let child = &good[level as usize + 1][m as usize - 2];
                    child.count_ones(s..e)
                };
                if hits >= need {
                    bits.insert(k);
                }
            }
            per_m.push(bits);
        }
        good[level as usize] = per_m;
    }
    Ok(GoodnessTable {
        base,
        max_m,
        depth,
        good,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodnessEstimate {
    pub base: u32,
    pub p: f64,
    pub m: u32,
    pub theta_m: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub trials: u64,
    pub seed: u64,
}

impl GoodnessEstimate {
    /// |estimate − θ_m| in units of the binomial standard error under `θ_m`.
    /// The empirical error vanishes when θ_m is tiny and no tree is good.
    pub fn z_score(&self) -> f64 {
        let d = (self.mc_estimate - self.theta_m).abs();
        let sd = (self.theta_m * (1.0 - self.theta_m) / self.trials as f64).sqrt();
        if d == 0.0 {
            0.0
        } else if sd == 0.0 {
            f64::INFINITY
        } else {
            d / sd
        }
    }
}

/// Monte Carlo frequency of `[0,1]²` being m-good for `m = 0..=max_m`,
/// against `θ_m`. Trial `t` uses seed `derive_seed(seed, "goodness", t)`.
pub fn estimate_root_goodness(
    base: u32,
    p: f64,
    max_m: u32,
    trials: u64,
    seed: u64,
) -> Result<Vec<GoodnessEstimate>> {
    let depth = max_m.max(1);
    let counts = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<u64>> {
            let cfg = RetentionConfig::new(base, p, depth, derive_seed(seed, "goodness", t));
            let tree = RetentionTree::sample(&cfg)?;
            let table = classify_m_good(&tree, max_m)?;
            Ok(table.root_sequence().iter().map(|&g| g as u64).collect())
        })
        .try_reduce(
            || vec![0u64; max_m as usize + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let theta = theta_sequence(base, p, max_m as usize)?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            let f = c as f64 / trials as f64;
            GoodnessEstimate {
                base,
                p,
                m: m as u32,
                theta_m: theta.values[m],
                mc_estimate: f,
                mc_stderr: (f * (1.0 - f) / trials as f64).sqrt(),
                trials,
                seed,
            }
        })
        .collect())
}

pub fn write_goodness_csv<W: Write>(mut w: W, rows: &[GoodnessEstimate]) -> Result<()> {
    writeln!(w, "N,p,m,theta_m,mc_estimate,mc_stderr,trials,seed")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.15},{:.6},{:.6},{},{}",
            r.base, r.p, r.m, r.theta_m, r.mc_estimate, r.mc_stderr, r.trials, r.seed
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// (m,n)-good sites

/// Bad labels on a rectangle of the lattice `ε^{level} ℤ²`, `ε = 1/eps_inv`.
///
/// Site `(a, b)` is the point `ε^{level}·(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteField {
    pub eps_inv: u64,
    pub level: u32,
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
    bad: FixedBitSet,
}

impl SiteField {
    /// All-good field. `ε` must be dyadic and, unless `allow_coarse`, below 1/100.
    pub fn new(
        eps_inv: u64,
        level: u32,
        x0: i64,
        y0: i64,
        width: usize,
        height: usize,
        allow_coarse: bool,
    ) -> Result<Self> {
        let mut bad = Vec::new();
        if eps_inv < 2 || !eps_inv.is_power_of_two() {
            bad.push(format!("1/ε = {eps_inv} must be a power of two"));
        }
        if !allow_coarse && eps_inv <= 100 {
            bad.push(format!("ε = 1/{eps_inv} must be below 1/100"));
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        Ok(SiteField {
            eps_inv,
            level,
            x0,
            y0,
            width,
            height,
            bad: FixedBitSet::with_capacity(width * height),
        })
    }

    fn index(&self, a: i64, b: i64) -> Option<usize> {
        let (u, v) = (a - self.x0, b - self.y0);
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            None
        } else {
            Some(v as usize * self.width + u as usize)
        }
    }

    pub fn covers(&self, a: i64, b: i64) -> bool {
        self.index(a, b).is_some()
    }

    pub fn set_bad(&mut self, a: i64, b: i64, bad: bool) -> Result<()> {
        let k = self
            .index(a, b)
            .ok_or_else(|| Error::FieldWindowTooSmall(format!("site ({a}, {b}) outside field")))?;
        self.bad.set(k, bad);
        Ok(())
    }

    pub fn is_bad(&self, a: i64, b: i64) -> Option<bool> {
        self.index(a, b).map(|k| self.bad.contains(k))
    }

    /// Sitewise union of bad labels (the set `J_x` draws from).
    pub fn union(&self, other: &SiteField) -> Result<SiteField> {
        if (
            self.eps_inv,
            self.level,
            self.x0,
            self.y0,
            self.width,
            self.height,
        ) != (
            other.eps_inv,
            other.level,
            other.x0,
            other.y0,
            other.width,
            other.height,
        ) {
            return Err(Error::Validation(vec![
                "site fields have different windows".into(),
            ]));
        }
        let mut out = self.clone();
        out.bad.union_with(&other.bad);
        Ok(out)
    }

    pub fn bad_count(&self) -> usize {
        self.bad.count_ones(..)
    }
}

/// Components of `J_x` and the verdict for one site.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MnVerdict {
    pub good: bool,
    /// `|·|∞` diameters of the components, in units of `ε^{n+1}`.
    pub component_diameters: Vec<u64>,
    /// `¼εⁿ` in units of `ε^{n+1}`, as the exact fraction `eps_inv / 4`.
    pub limit_quarters: u64,
}

/// Decides whether the level-`n` site `x` is (m,n)-good given the level-`n+1`
/// field whose bad sites are those that are `(m−1,n+1)`-bad or `(0,n+1)`-bad.
///
/// Sites of `J_x` are `εⁿ⁺¹(R·x + (a,b))` with `|a|,|b| < R = 1/ε` (the open
/// box `B(x, εⁿ)`). Closed boxes of half-side `εⁿ⁺¹` around two sites meet
/// iff the sites are within 2 lattice steps in both coordinates.
pub fn classify_mn_good(sub: &SiteField, x: (i64, i64)) -> Result<MnVerdict> {
    let r = sub.eps_inv as i64;
    let (cx, cy) = (x.0 * r, x.1 * r);
    if !sub.covers(cx - r + 1, cy - r + 1) || !sub.covers(cx + r - 1, cy + r - 1) {
        return Err(Error::FieldWindowTooSmall(format!(
            "field does not cover B(x, ε^n) around site ({}, {})",
            x.0, x.1
        )));
    }
    let side = (2 * r - 1) as usize;
    let mut slot = vec![usize::MAX; side * side];
    let mut sites = Vec::new();
    for b in 0..side {
        for a in 0..side {
            let (sa, sb) = (cx - r + 1 + a as i64, cy - r + 1 + b as i64);
            if sub.is_bad(sa, sb) == Some(true) {
                slot[b * side + a] = sites.len();
                sites.push((a as i64, b as i64));
            }
        }
    }
    let mut uf = UnionFind::new(sites.len());
    for (k, &(a, b)) in sites.iter().enumerate() {
        for db in 0..=2i64 {
            for da in -2..=2i64 {
                if db == 0 && da <= 0 {
                    continue;
                }
                let (na, nb) = (a + da, b + db);
                if na < 0 || nb < 0 || na as usize >= side || nb as usize >= side {
                    continue;
                }
                let o = slot[nb as usize * side + na as usize];
                if o != usize::MAX {
                    uf.union(k, o);
                }
            }
        }
    }
    let groups = uf.groups();
    let diameters: Vec<u64> = groups
        .iter()
        .map(|g| {
            let (mut ax, mut bx, mut ay, mut by) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
            for &k in g {
                let (a, b) = sites[k];
                ax = ax.min(a);
                bx = bx.max(a);
                ay = ay.min(b);
                by = by.max(b);
            }
            ((bx - ax).max(by - ay) + 2) as u64
        })
        .collect();
    // diameter ≤ R/4  ⇔  4·diameter ≤ R
    let good = diameters.iter().all(|&d| 4 * d <= sub.eps_inv);
    Ok(MnVerdict {
        good,
        component_diameters: diameters,
        limit_quarters: sub.eps_inv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::MarkSource;
    use rand::{Rng, SeedableRng};

    #[test]
    fn phi_examples() {
        for n in 2..7 {
            for p in [0.0, 0.3, 1.0] {
                assert_eq!(phi(n, p, 0.0).unwrap(), 0.0);
            }
        }
        assert_eq!(phi(2, 1.0, 1.0).unwrap(), 1.0);
        // px = 0.81: 0.81⁴ + 4·0.81³·0.19
        let y: f64 = 0.81;
        let direct = y.powi(4) + 4.0 * y.powi(3) * (1.0 - y);
        assert!((phi(2, 0.9, 0.9).unwrap() - direct).abs() < 1e-15);
        assert!((phi(2, 0.9, 0.9).unwrap() - 0.83436237).abs() < 5e-9);
        assert!(matches!(phi(2, 1.2, 0.5), Err(Error::OutOfRange(_))));
        assert!(matches!(phi(2, 0.5, -0.1), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn phi_is_nondecreasing() {
        for n in [2, 3, 6] {
            for p in [0.5, 0.9, 0.99, 1.0] {
                let mut prev = 0.0;
                for k in 0..=1000 {
                    let v = phi(n, p, k as f64 / 1000.0).unwrap();
                    assert!(v >= prev - 1e-15);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn theta_examples() {
        let s = theta_sequence(2, 0.99, 1).unwrap();
        let expected = 4.0 * 0.99f64.powi(3) - 3.0 * 0.99f64.powi(4);
        assert!((s.values[1] - expected).abs() < 1e-15);
        assert!((s.values[1] - 0.99940797).abs() < 5e-9);
        let one = theta_sequence(5, 1.0, 50).unwrap();
        assert!(one.values.iter().all(|&t| t == 1.0));
        assert_eq!(one.converged_at, Some(1));
    }

    #[test]
    fn theta_is_nonincreasing() {
        for n in [2, 3, 6] {
            for k in 0..50 {
                let p = 0.5 + k as f64 / 100.0;
                let s = theta_sequence(n, p, 200).unwrap();
                for w in s.values.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn threshold_contract() {
        for n in [2, 3, 6] {
            let tol = 1e-7;
            let t = p0_threshold(n, tol).unwrap();
            assert!(theta_sequence(n, t.p, 200).unwrap().min >= TWO_THIRDS);
            assert!(theta_sequence(n, t.p - 10.0 * tol, 200).unwrap().min < TWO_THIRDS);
            assert!(t.p <= t.paper_bound, "{t:?}");
            assert!(
                t.nu > 0.0 && t.nu_fixed_point_check && t.nu_sequence_check,
                "{t:?}"
            );
            // any p above the paper bound keeps every θ_m above 1−ν
            let above = theta_sequence(n, 0.5 * (t.paper_bound + 1.0), 200).unwrap();
            assert!(above.values[1..].iter().all(|&v| v > 1.0 - t.nu));
        }
    }

    fn brute_good(src: &MarkSource, b: &BoxAddress, m: u32) -> bool {
        if m == 0 {
            return true;
        }
        let n2 = (b.base * b.base) as usize;
        let hits = b
            .subdivide()
            .iter()
            .filter(|c| src.mark(c) && brute_good(src, c, m - 1))
            .count();
        hits >= n2 - 1
    }

    #[test]
    fn table_matches_brute_force() {
        for base in [2, 3] {
            for seed in 0..40 {
                let p = [0.6, 0.85, 0.95][seed as usize % 3];
                let cfg = RetentionConfig::new(base, p, 4, seed);
                let tree = RetentionTree::sample(&cfg).unwrap();
                let table = classify_m_good(&tree, 4).unwrap();
                let src = MarkSource::new(seed, p);
                for level in 0..=4 {
                    for b in tree.retained_set(level).unwrap() {
                        for m in 0..=4 - level {
                            assert_eq!(
                                table.is_good(&tree, &b, m),
                                Some(brute_good(&src, &b, m)),
                                "{b} m={m}"
                            );
                        }
                        assert_eq!(table.is_good(&tree, &b, 5 - level), None);
                    }
                }
            }
        }
    }

    #[test]
    fn small_cases_and_depth_guard() {
        let full = RetentionTree::sample(&RetentionConfig::new(2, 1.0, 2, 0)).unwrap();
        assert_eq!(
            classify_m_good(&full, 2).unwrap().root_sequence(),
            vec![true; 3]
        );
        let two = RetentionTree::from_removed(
            &RetentionConfig::new(2, 0.5, 1, 0),
            &[
                BoxAddress::new(2, 1, 0, 0).unwrap(),
                BoxAddress::new(2, 1, 1, 1).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(
            classify_m_good(&two, 1).unwrap().root_sequence(),
            vec![true, false]
        );
        assert!(matches!(
            classify_m_good(&two, 2),
            Err(Error::DepthExceeded { .. })
        ));
    }

    #[test]
    fn labels_are_monotone_in_m() {
        for seed in 0..30 {
            let tree = RetentionTree::sample(&RetentionConfig::new(3, 0.9, 5, seed)).unwrap();
            let t = classify_m_good(&tree, 5).unwrap();
            for level in 0..5 {
                for r in 0..tree.count(level) {
                    for m in 2..=t.max_m_at(level) {
                        if t.is_good_rank(level, r, m) == Some(true) {
                            assert_eq!(t.is_good_rank(level, r, m - 1), Some(true));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn monte_carlo_tracks_theta() {
        let rows = estimate_root_goodness(3, 0.95, 4, 4000, 1).unwrap();
        for r in &rows {
            assert!(r.z_score() < 4.0, "{r:?}");
        }
        let mut buf = Vec::new();
        write_goodness_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }

    fn field(r: u64) -> SiteField {
        let rr = r as i64;
        SiteField::new(r, 1, -rr, -rr, 2 * r as usize + 1, 2 * r as usize + 1, true).unwrap()
    }

    #[test]
    fn mn_examples() {
        let f = field(128);
        assert!(classify_mn_good(&f, (0, 0)).unwrap().good);
        let mut single = f.clone();
        single.set_bad(5, -7, true).unwrap();
        let v = classify_mn_good(&single, (0, 0)).unwrap();
        assert!(v.good);
        assert_eq!(v.component_diameters, vec![2]);
        let mut coarse = field(4);
        coarse.set_bad(0, 0, true).unwrap();
        assert!(!classify_mn_good(&coarse, (0, 0)).unwrap().good);
        assert!(
            classify_mn_good(&field(8).union(&field(8)).unwrap(), (0, 0))
                .unwrap()
                .good
        );
        // chain of R/4 + 1 consecutive sites
        for r in [8u64, 64, 128] {
            let len = (r / 4) as i64 + 1;
            let mut chain = field(r);
            for a in 0..len {
                chain.set_bad(a - 1, 0, true).unwrap();
            }
            assert!(!classify_mn_good(&chain, (0, 0)).unwrap().good);
            let mut short = field(r);
            for a in 0..len - 2 {
                short.set_bad(a, 3, true).unwrap();
            }
            assert!(classify_mn_good(&short, (0, 0)).unwrap().good);
        }
    }

    #[test]
    fn mn_field_validation() {
        assert!(matches!(
            SiteField::new(96, 1, 0, 0, 4, 4, true),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            SiteField::new(64, 1, 0, 0, 4, 4, false),
            Err(Error::Validation(_))
        ));
        assert!(SiteField::new(128, 1, 0, 0, 4, 4, false).is_ok());
        let f = field(8);
        assert!(matches!(
            classify_mn_good(&f, (1, 0)),
            Err(Error::FieldWindowTooSmall(_))
        ));
    }

    #[test]
    fn corner_touching_boxes_connect_and_gaps_separate() {
        // sites two steps apart diagonally: closed boxes share one corner
        let mut f = field(16);
        for k in 0..3 {
            f.set_bad(2 * k, 2 * k, true).unwrap();
        }
        assert_eq!(
            classify_mn_good(&f, (0, 0)).unwrap().component_diameters,
            vec![6]
        );
        let mut g = field(16);
        for k in 0..3 {
            g.set_bad(3 * k, 0, true).unwrap();
        }
        assert_eq!(
            classify_mn_good(&g, (0, 0)).unwrap().component_diameters,
            vec![2, 2, 2]
        );
    }

    #[test]
    fn sharper_labels_give_sharper_verdicts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let r = 16u64;
            let mut small = field(r);
            let mut big = field(r);
            let q = rng.gen_range(0.0..0.15);
            for b in -15..=15 {
                for a in -15..=15 {
                    let in_small = rng.gen_bool(q);
                    let in_big = in_small || rng.gen_bool(0.03);
                    small.set_bad(a, b, in_small).unwrap();
                    big.set_bad(a, b, in_big).unwrap();
                }
            }
            let vs = classify_mn_good(&small, (0, 0)).unwrap();
            let vb = classify_mn_good(&big, (0, 0)).unwrap();
            if vb.good {
                assert!(vs.good);
            }
        }
    }
}
