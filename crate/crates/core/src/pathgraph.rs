//! Multiscale box families, self-avoiding connected paths, their weights,
//! loop erasure, and exhaustive enumeration on small instances.
//!
//! Boxes are open squares `B(x, r)`; the distance between two boxes is the
//! L∞ distance between their closures, `max(0, |x − y|∞ − r − s)`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive boxes of a connected path are within `REACH · ϱ`.
pub const REACH: i64 = 40;
pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathBox {
    pub scale: u32,
    pub center: [i64; 2],
    pub radius: i64,
}

impl PathBox {
    pub fn unit(x: i64, y: i64) -> PathBox {
        PathBox {
            scale: 0,
            center: [x, y],
            radius: 1,
        }
    }

    pub fn center_distance(&self, other: &PathBox) -> i64 {
        linf(self.center, other.center)
    }

    pub fn distance(&self, other: &PathBox) -> i64 {
        (self.center_distance(other) - self.radius - other.radius).max(0)
    }

    /// Open-box containment of a lattice point.
    pub fn contains(&self, p: [i64; 2]) -> bool {
        linf(self.center, p) < self.radius
    }
}

impl fmt::Display for PathBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}({},{})", self.scale, self.center[0], self.center[1])
    }
}

fn linf(a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

/// Site sets `A_0, A_1, …`; `sites[m]` is `A_m` and generates the boxes of
/// `S_{m+1}` with radius `10ϱN^m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleFamily {
    pub rho: u32,
    pub base: u32,
    #[serde(default)]
    pub sites: Vec<Vec<[i64; 2]>>,
}

impl ScaleFamily {
    /// Only `S_0`.
    pub fn empty(rho: u32, base: u32) -> ScaleFamily {
        ScaleFamily {
            rho,
            base,
            sites: Vec::new(),
        }
    }

    /// Builds and checks both conditions.
    pub fn new(rho: u32, base: u32, sites: Vec<Vec<[i64; 2]>>) -> Result<ScaleFamily> {
        let fam = ScaleFamily { rho, base, sites };
        let problems = fam.validate();
        if problems.is_empty() {
            Ok(fam)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn load(path: &Path) -> Result<ScaleFamily> {
        let text = std::fs::read_to_string(path)?;
        let fam: ScaleFamily = serde_json::from_str(&text)?;
        let problems = fam.validate();
        if problems.is_empty() {
            Ok(fam)
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Highest scale with boxes.
    pub fn top_scale(&self) -> u32 {
        self.sites.len() as u32
    }

    /// `ϱN^m`, the lattice spacing of `A_m`.
    pub fn spacing(&self, m: u32) -> Option<i64> {
        (self.base as i64)
            .checked_pow(m)
            .and_then(|p| p.checked_mul(self.rho as i64))
    }

    /// Radius of the boxes in `S_scale`.
    pub fn radius(&self, scale: u32) -> i64 {
        if scale == 0 {
            1
        } else {
            self.spacing(scale - 1)
                .and_then(|s| s.checked_mul(10))
                .unwrap_or(i64::MAX / 4)
        }
    }

    pub fn reach(&self) -> i64 {
        REACH * self.rho as i64
    }

    pub fn box_at(&self, scale: u32, center: [i64; 2]) -> PathBox {
        PathBox {
            scale,
            center,
            radius: self.radius(scale),
        }
    }

    /// Boxes of `S_scale` for `scale ≥ 1`.
    pub fn planted(&self, scale: u32) -> impl Iterator<Item = PathBox> + '_ {
        let sites: &[[i64; 2]] = if scale == 0 {
            &[]
        } else {
            self.sites
                .get(scale as usize - 1)
                .map(|v| v.as_slice())
                .unwrap_or(&[])
        };
        sites.iter().map(move |&c| self.box_at(scale, c))
    }

    /// Conditions 1 and 2, plus parameter sanity; returns every violation.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rho == 0 {
            out.push("rho must be a positive integer".into());
        }
        if self.base < 2 {
            out.push(format!("N = {} must be at least 2", self.base));
        }
        if !out.is_empty() {
            return out;
        }
        for (m, sites) in self.sites.iter().enumerate() {
            let m = m as u32;
            let (Some(step), Some(next)) = (self.spacing(m), self.spacing(m + 1)) else {
                out.push(format!("A_{m}: spacing overflows"));
                continue;
            };
            for s in sites {
                if s[0].rem_euclid(step) != 0 || s[1].rem_euclid(step) != 0 {
                    out.push(format!("A_{m}: site {s:?} not on {step}Z^2"));
                }
            }
            for (i, a) in sites.iter().enumerate() {
                for b in &sites[i + 1..] {
                    if 10 * linf(*a, *b) < next {
                        out.push(format!(
                            "A_{m}: sites {a:?} and {b:?} closer than {next}/10"
                        ));
                    }
                }
            }
        }
        out
    }

    /// Calls `f` on every box of `S_0 ∪ … ∪ S_level` other than `b` within
    /// distance `40ϱ` of `b`, unit boxes first in row order, then planted
    /// boxes by scale. Stops early when `f` returns false.
    pub fn for_each_neighbour(
        &self,
        b: &PathBox,
        level: u32,
        mut f: impl FnMut(PathBox) -> bool,
    ) -> bool {
        let reach = self.reach();
        let r = b.radius + 1 + reach;
        for dy in -r..=r {
            for dx in -r..=r {
                let c = [b.center[0] + dx, b.center[1] + dy];
                if b.scale == 0 && dx == 0 && dy == 0 {
                    continue;
                }
                if !f(PathBox::unit(c[0], c[1])) {
                    return false;
                }
            }
        }
        for s in 1..=level.min(self.top_scale()) {
            for q in self.planted(s) {
                if q != *b && q.distance(b) <= reach && !f(q) {
                    return false;
                }
            }
        }
        true
    }

    /// Number of boxes of `S_scale`, other than `b`, within `40ϱ` of `b`.
    pub fn neighbour_count(&self, b: &PathBox, scale: u32) -> u64 {
        let reach = self.reach();
        if scale == 0 {
            let side = (2 * (b.radius + 1 + reach) + 1) as u64;
            side * side - u64::from(b.scale == 0)
        } else {
            self.planted(scale)
                .filter(|q| q != b && q.distance(b) <= reach)
                .count() as u64
        }
    }
}

/// Replaces each site by the lowest-scale planted box containing it (ties
/// broken by lexicographic center), or by its unit box.
pub fn box_lift(sites: &[[i64; 2]], family: &ScaleFamily) -> Vec<PathBox> {
    sites
        .iter()
        .map(|&w| {
            for s in 1..=family.top_scale() {
                let best = family
                    .planted(s)
                    .filter(|q| q.contains(w))
                    .min_by_key(|q| q.center);
                if let Some(q) = best {
                    return q;
                }
            }
            PathBox::unit(w[0], w[1])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LoopErased {
    pub path: Vec<PathBox>,
    /// The step dropped at the end; re-appending it reproduces `path`.
    pub removed_tail: Option<PathBox>,
    pub degenerate: bool,
}

/// Starting from the first box, repeatedly jump to the last later element
/// that differs from the current box and lies within `40ϱ` of it; then drop
/// the final step.
pub fn loop_erase(boxes: &[PathBox], rho: u32) -> LoopErased {
    if boxes.len() <= 1 {
        return LoopErased {
            path: Vec::new(),
            removed_tail: None,
            degenerate: true,
        };
    }
    let reach = REACH * rho as i64;
    let mut out = vec![boxes[0]];
    let mut pos = 0;
    loop {
        let cur = out[out.len() - 1];
        let next = (pos + 1..boxes.len())
            .rev()
            .find(|&t| boxes[t] != cur && boxes[t].distance(&cur) <= reach);
        match next {
            Some(t) => {
                out.push(boxes[t]);
                pos = t;
            }
            None => break,
        }
    }
    let tail = out.pop();
    LoopErased {
        path: out,
        removed_tail: tail,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FractalPath {
    pub boxes: Vec<PathBox>,
}

impl FractalPath {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level(&self) -> u32 {
        self.boxes.iter().map(|b| b.scale).max().unwrap_or(0)
    }

    pub fn diameter(&self) -> i64 {
        path_diameter(&self.boxes)
    }

    pub fn is_self_avoiding(&self) -> bool {
        let mut v = self.boxes.clone();
        v.sort();
        v.windows(2).all(|w| w[0] != w[1])
    }

    pub fn is_connected(&self, rho: u32) -> bool {
        let reach = REACH * rho as i64;
        self.boxes.windows(2).all(|w| w[0].distance(&w[1]) <= reach)
    }

    pub fn s0_fraction(&self) -> f64 {
        if self.boxes.is_empty() {
            return 0.0;
        }
        self.boxes.iter().filter(|b| b.scale == 0).count() as f64 / self.boxes.len() as f64
    }
}

/// L∞ diameter of the union of the closed boxes.
pub fn path_diameter(boxes: &[PathBox]) -> i64 {
    if boxes.is_empty() {
        return 0;
    }
    let mut lo = [i64::MAX; 2];
    let mut hi = [i64::MIN; 2];
    for b in boxes {
        for a in 0..2 {
            lo[a] = lo[a].min(b.center[a] - b.radius);
            hi[a] = hi[a].max(b.center[a] + b.radius);
        }
    }
    (hi[0] - lo[0]).max(hi[1] - lo[1])
}

/// `w(P) = Π β N^{−8m}` over the boxes of the path.
pub fn path_weight(boxes: &[PathBox], beta: f64, base: u32) -> f64 {
    boxes
        .iter()
        .map(|b| box_weight(b.scale, beta, base))
        .product()
}

fn box_weight(scale: u32, beta: f64, base: u32) -> f64 {
    beta * (base as f64).powi(-8 * scale as i32)
}

// ---------------------------------------------------------------------------
// Bounds

/// `len ≥ (1/C)(1 − C/N)^k D`, i.e. `len · C · N^k ≥ (N − C)^k · D`.
pub fn length_bound_holds(len: usize, diameter: i64, k: u32, base: u32, c: i64) -> bool {
    let n = base as i128;
    let lhs = (len as i128)
        .checked_mul(c as i128)
        .and_then(|v| n.checked_pow(k).and_then(|p| v.checked_mul(p)));
    let rhs = (n - c as i128)
        .checked_pow(k)
        .and_then(|p| p.checked_mul(diameter as i128));
    match (lhs, rhs) {
        (Some(l), Some(r)) => l >= r,
        _ => {
            let f = (1.0 - c as f64 / base as f64).powi(k as i32) * diameter as f64 / c as f64;
            len as f64 >= f
        }
    }
}

/// `len ≥ N^{k/2}`.
pub fn is_long(len: usize, k: u32, base: u32) -> bool {
    match (base as u128).checked_pow(k) {
        Some(p) => (len as u128) * (len as u128) >= p,
        None => false,
    }
}

/// `a_m ≤ 2^{k−m} + C L / (N − C)^m` for `1 ≤ m ≤ k`; `None` when `N ≤ C`
/// leaves the formula undefined.
pub fn box_fraction_holds(counts: &[u64], len: usize, k: u32, base: u32, c: i64) -> Option<bool> {
    let d = base as i128 - c as i128;
    if d <= 0 {
        return None;
    }
    for m in 1..=k {
        let a = counts.get(m as usize).copied().unwrap_or(0) as i128;
        let ok = match d.checked_pow(m) {
            Some(dm) => {
                let lhs = a.checked_mul(dm);
                let rhs = 1i128
                    .checked_shl(k - m)
                    .and_then(|t| t.checked_mul(dm))
                    .and_then(|t| t.checked_add(c as i128 * len as i128));
                match (lhs, rhs) {
                    (Some(l), Some(r)) => l <= r,
                    _ => {
                        (a as f64)
                            <= 2f64.powi((k - m) as i32)
                                + c as f64 * len as f64 / (d as f64).powi(m as i32)
                    }
                }
            }
            None => (a as f64) <= 2f64.powi((k - m) as i32),
        };
        if !ok {
            return Some(false);
        }
    }
    Some(true)
}

/// The proof's constant `C = 10000ϱ`.
pub fn proof_constant(rho: u32) -> i64 {
    10_000 * rho as i64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LengthBoundReport {
    pub level: u32,
    pub base: u32,
    pub c: i64,
    /// `N ≥ 100C`, the regime the bound is proved in.
    pub hypothesis_holds: bool,
    /// Paths with `D ≥ N^k`.
    pub checked: u64,
    pub violations: u64,
    /// Paths with `D ≥ N^k` and `len < N^{k/2}`.
    pub corollary_violations: u64,
    pub first_violation: Option<String>,
    pub first_corollary_violation: Option<String>,
}

impl LengthBoundReport {
    fn new(level: u32, base: u32, c: i64) -> Self {
        LengthBoundReport {
            level,
            base,
            c,
            hypothesis_holds: (base as i64) >= 100 * c,
            ..Default::default()
        }
    }

    fn observe(&mut self, boxes: &[PathBox]) {
        let d = path_diameter(boxes);
        let big = match (self.base as i64).checked_pow(self.level) {
            Some(p) => d >= p,
            None => false,
        };
        if !big {
            return;
        }
        self.checked += 1;
        if !length_bound_holds(boxes.len(), d, self.level, self.base, self.c) {
            self.violations += 1;
            if self.first_violation.is_none() {
                self.first_violation = Some(describe(boxes));
            }
        }
        if !is_long(boxes.len(), self.level, self.base) {
            self.corollary_violations += 1;
            if self.first_corollary_violation.is_none() {
                self.first_corollary_violation = Some(describe(boxes));
            }
        }
    }

    fn merge(&mut self, o: LengthBoundReport) {
        self.checked += o.checked;
        self.violations += o.violations;
        self.corollary_violations += o.corollary_violations;
        if self.first_violation.is_none() {
            self.first_violation = o.first_violation;
        }
        if self.first_corollary_violation.is_none() {
            self.first_corollary_violation = o.first_corollary_violation;
        }
    }

    /// Violations that contradict the lemma: only meaningful under its
    /// hypothesis.
    pub fn pass(&self) -> bool {
        self.violations == 0 && (!self.hypothesis_holds || self.corollary_violations == 0)
    }
}

fn describe(boxes: &[PathBox]) -> String {
    let parts: Vec<String> = boxes.iter().map(|b| b.to_string()).collect();
    parts.join(" ")
}

/// Checks the length lower bound on a set of paths at level `k`.
pub fn check_length_bound(paths: &[FractalPath], k: u32, base: u32, c: i64) -> LengthBoundReport {
    let mut rep = LengthBoundReport::new(k, base, c);
    for p in paths {
        rep.observe(&p.boxes);
    }
    rep
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BoxFractionReport {
    pub hypothesis_holds: bool,
    pub evaluated: u64,
    pub not_applicable: u64,
    pub violations: u64,
}

impl BoxFractionReport {
    fn observe(&mut self, counts: &[u64], len: usize, k: u32, base: u32, c: i64, mult: u64) {
        match box_fraction_holds(counts, len, k, base, c) {
            None => self.not_applicable += mult,
            Some(ok) => {
                self.evaluated += mult;
                if !ok {
                    self.violations += mult;
                }
            }
        }
    }

    fn merge(&mut self, o: BoxFractionReport) {
        self.evaluated += o.evaluated;
        self.not_applicable += o.not_applicable;
        self.violations += o.violations;
    }
}

// ---------------------------------------------------------------------------
// Enumeration

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationConfig {
    pub level: u32,
    pub max_len: usize,
    pub budget: u64,
}

impl EnumerationConfig {
    pub fn new(level: u32, max_len: usize) -> Self {
        EnumerationConfig {
            level,
            max_len,
            budget: DEFAULT_NODE_BUDGET,
        }
    }
}

struct Budget {
    used: AtomicU64,
    limit: u64,
}

impl Budget {
    fn tick(&self) -> Result<()> {
        if self.used.fetch_add(1, Ordering::Relaxed) >= self.limit {
            Err(Error::EnumerationBudgetExceeded(self.limit))
        } else {
            Ok(())
        }
    }
}

fn dfs<A>(
    family: &ScaleFamily,
    level: u32,
    limit: usize,
    path: &mut Vec<PathBox>,
    budget: &Budget,
    acc: &mut A,
    visit: &(impl Fn(&mut A, &[PathBox]) + Sync),
) -> Result<()> {
    budget.tick()?;
    visit(acc, path);
    if path.len() >= limit {
        return Ok(());
    }
    let last = path[path.len() - 1];
    let mut err = None;
    family.for_each_neighbour(&last, level, |b| {
        if path.contains(&b) {
            return true;
        }
        path.push(b);
        let r = dfs(family, level, limit, path, budget, acc, visit);
        path.pop();
        match r {
            Ok(()) => true,
            Err(e) => {
                err = Some(e);
                false
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Visits every self-avoiding connected path of length `≤ limit` from
/// `start` using boxes of scale at most `level`. The first step fans out
/// over rayon; each branch gets its own accumulator.
fn walk<A: Send>(
    family: &ScaleFamily,
    start: PathBox,
    level: u32,
    limit: usize,
    budget: u64,
    init: impl Fn() -> A + Sync,
    visit: impl Fn(&mut A, &[PathBox]) + Sync,
) -> Result<(Vec<A>, u64)> {
    let budget = Budget {
        used: AtomicU64::new(0),
        limit: budget,
    };
    let mut root = init();
    budget.tick()?;
    visit(&mut root, &[start]);
    let mut accs = vec![root];
    if limit >= 2 {
        let mut first = Vec::new();
        family.for_each_neighbour(&start, level, |b| {
            first.push(b);
            true
        });
        let branches: Vec<Result<A>> = first
            .par_iter()
            .map(|&b| {
                let mut acc = init();
                let mut path = vec![start, b];
                dfs(family, level, limit, &mut path, &budget, &mut acc, &visit).map(|_| acc)
            })
            .collect();
        for b in branches {
            accs.push(b?);
        }
    }
    Ok((accs, budget.used.load(Ordering::Relaxed)))
}

#[derive(Clone, Debug, Serialize)]
pub struct PathEnumeration {
    pub start: PathBox,
    pub level: u32,
    pub max_len: usize,
    pub rho: u32,
    pub base: u32,
    /// `counts[L]` paths of length `L`.
    pub counts: Vec<u64>,
    pub max_diameter: Vec<i64>,
    /// Paths with `len ≥ N^{k/2}` and fewer than half their boxes in `S_0`.
    pub s0_violations: u64,
    pub min_long_s0_fraction: Option<f64>,
    pub length_bound: LengthBoundReport,
    pub box_fraction: BoxFractionReport,
    pub nodes: u64,
    #[serde(skip)]
    pub paths: Vec<FractalPath>,
}

#[derive(Default)]
struct EnumAcc {
    counts: Vec<u64>,
    max_diameter: Vec<i64>,
    s0_violations: u64,
    min_long: Option<f64>,
    length: LengthBoundReport,
    frac: BoxFractionReport,
    paths: Vec<FractalPath>,
}

fn scale_counts(boxes: &[PathBox], level: u32) -> Vec<u64> {
    let mut c = vec![0u64; level as usize + 1];
    for b in boxes {
        if let Some(x) = c.get_mut(b.scale as usize) {
            *x += 1;
        }
    }
    c
}

/// Exhaustively lists the self-avoiding connected paths at level `k` from
/// `start` up to `max_len`, checking every path against the length and
/// box-fraction bounds with constant `c`. With `collect`, the paths are kept.
pub fn enumerate_paths(
    start: PathBox,
    cfg: EnumerationConfig,
    family: &ScaleFamily,
    c: i64,
    collect: bool,
) -> Result<PathEnumeration> {
    let k = cfg.level;
    let base = family.base;
    let len_cap = cfg.max_len;
    if len_cap == 0 {
        return Err(Error::OutOfRange("max_len must be at least 1".into()));
    }
    let init = || EnumAcc {
        counts: vec![0; len_cap + 1],
        max_diameter: vec![0; len_cap + 1],
        length: LengthBoundReport::new(k, base, c),
        frac: BoxFractionReport {
            hypothesis_holds: (base as i64) >= 100 * c,
            ..Default::default()
        },
        ..Default::default()
    };
    let visit = |a: &mut EnumAcc, p: &[PathBox]| {
        let l = p.len();
        a.counts[l] += 1;
        a.max_diameter[l] = a.max_diameter[l].max(path_diameter(p));
        let sc = scale_counts(p, k);
        if is_long(l, k, base) {
            let f = sc[0] as f64 / l as f64;
            a.min_long = Some(a.min_long.map_or(f, |m: f64| m.min(f)));
            if 2 * sc[0] < l as u64 {
                a.s0_violations += 1;
            }
        }
        a.length.observe(p);
        a.frac.observe(&sc, l, k, base, c, 1);
        if collect {
            a.paths.push(FractalPath { boxes: p.to_vec() });
        }
    };
    let (accs, nodes) = walk(family, start, k, len_cap, cfg.budget, init, visit)?;
    let mut total = init();
    for a in accs {
        for l in 0..=len_cap {
            total.counts[l] += a.counts[l];
            total.max_diameter[l] = total.max_diameter[l].max(a.max_diameter[l]);
        }
        total.s0_violations += a.s0_violations;
        total.min_long = match (total.min_long, a.min_long) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        };
        total.length.merge(a.length);
        total.frac.merge(a.frac);
        total.paths.extend(a.paths);
    }
    Ok(PathEnumeration {
        start,
        level: k,
        max_len: len_cap,
        rho: family.rho,
        base,
        counts: total.counts,
        max_diameter: total.max_diameter,
        s0_violations: total.s0_violations,
        min_long_s0_fraction: total.min_long,
        length_bound: total.length,
        box_fraction: total.frac,
        nodes,
        paths: total.paths,
    })
}

/// Counts and weights by length. Paths of the final length are never
/// materialised: each prefix of length `max_len − 1` adds, per scale, the
/// number of admissible last steps, which only depends on the prefix and
/// on how many neighbours of its last box it already uses.
#[derive(Clone, Debug, Serialize)]
pub struct PathCensus {
    pub start: PathBox,
    pub level: u32,
    pub max_len: usize,
    pub rho: u32,
    pub base: u32,
    pub beta: f64,
    pub counts: Vec<u128>,
    /// `Σ w(P)` over paths of each length.
    pub weight_sums: Vec<f64>,
    /// Running sums of `weight_sums`.
    pub cumulative: Vec<f64>,
    pub s0_violations: Vec<u128>,
    pub box_fraction: BoxFractionReport,
    pub nodes: u64,
}

impl PathCensus {
    /// `count(L)^{1/L}`.
    pub fn growth_rates(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                if l == 0 || c == 0 {
                    0.0
                } else {
                    (c as f64).powf(1.0 / l as f64)
                }
            })
            .collect()
    }
}

#[derive(Default)]
struct CensusAcc {
    counts: Vec<u128>,
    weights: Vec<f64>,
    s0_violations: Vec<u128>,
    frac: BoxFractionReport,
}

pub fn path_census(
    start: PathBox,
    cfg: EnumerationConfig,
    family: &ScaleFamily,
    beta: f64,
    c: i64,
) -> Result<PathCensus> {
    let k = cfg.level;
    let base = family.base;
    let len_cap = cfg.max_len;
    if len_cap == 0 {
        return Err(Error::OutOfRange("max_len must be at least 1".into()));
    }
    let reach = family.reach();
    let scales = k.min(family.top_scale());
    let init = || CensusAcc {
        counts: vec![0; len_cap + 1],
        weights: vec![0.0; len_cap + 1],
        s0_violations: vec![0; len_cap + 1],
        frac: BoxFractionReport {
            hypothesis_holds: (base as i64) >= 100 * c,
            ..Default::default()
        },
    };
    let visit = |a: &mut CensusAcc, p: &[PathBox]| {
        let l = p.len();
        let w = path_weight(p, beta, base);
        let mut sc = scale_counts(p, k);
        a.counts[l] += 1;
        a.weights[l] += w;
        if is_long(l, k, base) && 2 * sc[0] < l as u64 {
            a.s0_violations[l] += 1;
        }
        a.frac.observe(&sc, l, k, base, c, 1);
        if l + 1 != len_cap {
            return;
        }
        let last = p[l - 1];
        let lf = l + 1;
        for s in 0..=scales {
            let used = p[..l - 1]
                .iter()
                .filter(|b| b.scale == s && b.distance(&last) <= reach)
                .count() as u64;
            let ext = family.neighbour_count(&last, s) - used;
            if ext == 0 {
                continue;
            }
            a.counts[lf] += ext as u128;
            a.weights[lf] += w * ext as f64 * box_weight(s, beta, base);
            sc[s as usize] += 1;
            if is_long(lf, k, base) && 2 * sc[0] < lf as u64 {
                a.s0_violations[lf] += ext as u128;
            }
            a.frac.observe(&sc, lf, k, base, c, ext);
            sc[s as usize] -= 1;
        }
    };
    let limit = if len_cap >= 2 { len_cap - 1 } else { 1 };
    let (accs, nodes) = walk(family, start, k, limit, cfg.budget, init, visit)?;
    let mut total = init();
    for a in accs {
        for l in 0..=len_cap {
            total.counts[l] += a.counts[l];
            total.weights[l] += a.weights[l];
            total.s0_violations[l] += a.s0_violations[l];
        }
        total.frac.merge(a.frac);
    }
    let mut cumulative = Vec::with_capacity(len_cap + 1);
    let mut run = 0.0;
    for w in &total.weights {
        run += w;
        cumulative.push(run);
    }
    Ok(PathCensus {
        start,
        level: k,
        max_len: len_cap,
        rho: family.rho,
        base,
        beta,
        counts: total.counts,
        weight_sums: total.weights,
        cumulative,
        s0_violations: total.s0_violations,
        box_fraction: total.frac,
        nodes,
    })
}

// ---------------------------------------------------------------------------
// Weights

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Admissibility {
    pub beta: f64,
    /// Largest `Σ_b √(w(a)w(b))` over boxes `a`, with `b` ranging over all
    /// boxes within `40ϱ` of `a`, `b = a` included.
    pub worst_sum: f64,
    pub worst_box: String,
    /// False when the unit-box maximum fell back to a coarse upper bound.
    pub exact: bool,
}

impl Admissibility {
    pub fn ok(&self) -> bool {
        self.worst_sum <= 0.5
    }
}

const ADMISSIBILITY_AREA_CAP: i64 = 1 << 26;

/// The neighbour-sum test that makes the total path weight from any box at
/// most one.
pub fn admissibility(family: &ScaleFamily, beta: f64) -> Admissibility {
    let base = family.base;
    let reach = family.reach();
    let half = |s: u32| beta.sqrt() * (base as f64).powi(-4 * s as i32);
    let top = family.top_scale();
    let mut worst = (f64::NEG_INFINITY, String::new());
    let mut consider = |sum: f64, at: String| {
        if sum > worst.0 {
            worst = (sum, at);
        }
    };
    // Planted boxes as `a`.
    for s in 1..=top {
        for a in family.planted(s) {
            let mut sum = family.neighbour_count(&a, 0) as f64 * half(0);
            for t in 1..=top {
                let near = family
                    .planted(t)
                    .filter(|b| b.distance(&a) <= reach)
                    .count();
                sum += near as f64 * half(t);
            }
            consider(sum * half(s), a.to_string());
        }
    }
    // Unit boxes as `a`: the S_0 part is constant, the planted part is a
    // sum of indicator squares maximised over a difference array.
    let unit_part = (family.neighbour_count(&PathBox::unit(0, 0), 0) + 1) as f64 * half(0);
    let planted: Vec<PathBox> = (1..=top).flat_map(|s| family.planted(s)).collect();
    let mut exact = true;
    let (extra, at) = if planted.is_empty() {
        (0.0, PathBox::unit(0, 0).to_string())
    } else {
        let span = |b: &PathBox| b.radius + 1 + reach;
        let x0 = planted.iter().map(|b| b.center[0] - span(b)).min().unwrap();
        let x1 = planted.iter().map(|b| b.center[0] + span(b)).max().unwrap();
        let y0 = planted.iter().map(|b| b.center[1] - span(b)).min().unwrap();
        let y1 = planted.iter().map(|b| b.center[1] + span(b)).max().unwrap();
        let (w, h) = (x1 - x0 + 2, y1 - y0 + 2);
        if w.saturating_mul(h) > ADMISSIBILITY_AREA_CAP {
            exact = false;
            (
                planted.iter().map(|b| half(b.scale)).sum::<f64>(),
                "bound".to_string(),
            )
        } else {
            let mut diff = vec![0.0f64; (w * h) as usize];
            let idx = |x: i64, y: i64| ((y - y0) * w + (x - x0)) as usize;
            for b in &planted {
                let v = half(b.scale);
                let (ax, bx) = (b.center[0] - span(b), b.center[0] + span(b) + 1);
                let (ay, by) = (b.center[1] - span(b), b.center[1] + span(b) + 1);
                diff[idx(ax, ay)] += v;
                diff[idx(bx, ay)] -= v;
                diff[idx(ax, by)] -= v;
                diff[idx(bx, by)] += v;
            }
            for y in 0..h {
                for x in 1..w {
                    let i = (y * w + x) as usize;
                    diff[i] += diff[i - 1];
                }
            }
            for y in 1..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    diff[i] += diff[i - w as usize];
                }
            }
            let (i, v) = diff
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |m, (i, &v)| if v > m.1 { (i, v) } else { m },
                );
            let (x, y) = (x0 + i as i64 % w, y0 + i as i64 / w);
            (v.max(0.0), PathBox::unit(x, y).to_string())
        }
    };
    consider((unit_part + extra) * half(0), at);
    Admissibility {
        beta,
        worst_sum: worst.0,
        worst_box: worst.1,
        exact,
    }
}

/// Checks admissibility, then returns the census with running weight sums
/// up to `len_cap`.
pub fn cumulative_weight(
    start: PathBox,
    family: &ScaleFamily,
    level: u32,
    beta: f64,
    len_cap: usize,
    budget: u64,
) -> Result<PathCensus> {
    let adm = admissibility(family, beta);
    if !adm.ok() {
        return Err(Error::BetaTooLarge {
            sum: adm.worst_sum,
            at: adm.worst_box,
        });
    }
    let cfg = EnumerationConfig {
        level,
        max_len: len_cap,
        budget,
    };
    path_census(start, cfg, family, beta, proof_constant(family.rho))
}

pub fn write_census_csv<W: Write>(censuses: &[PathCensus], mut w: W) -> Result<()> {
    writeln!(
        w,
        "k,L,count,s0_fraction_violations,weight_sum,cumulative_weight,growth_rate"
    )?;
    for c in censuses {
        let g = c.growth_rates();
        for l in 1..=c.max_len {
            writeln!(
                w,
                "{},{},{},{},{:e},{:e},{}",
                c.level,
                l,
                c.counts[l],
                c.s0_violations[l],
                c.weight_sums[l],
                c.cumulative[l],
                g[l]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spaced_family() -> ScaleFamily {
        // S_1 boxes of radius 10 more than 102 apart: no unit box touches two.
        ScaleFamily::new(1, 8, vec![vec![[0, 0], [110, 0], [0, 115]]]).unwrap()
    }

    #[test]
    fn conditions_are_checked() {
        assert!(spaced_family().validate().is_empty());
        let bad = ScaleFamily {
            rho: 1,
            base: 8,
            sites: vec![vec![], vec![[8, 0], [64, 0], [64, 3]]],
        };
        let v = bad.validate();
        assert!(v.iter().any(|s| s.contains("not on 8Z^2")));
        assert!(v.iter().any(|s| s.contains("closer than 64/10")), "{v:?}");
        assert!(ScaleFamily::new(0, 8, vec![]).is_err());
    }

    #[test]
    fn radii_and_distance() {
        let f = ScaleFamily::empty(2, 5);
        assert_eq!(f.radius(0), 1);
        assert_eq!(f.radius(1), 20);
        assert_eq!(f.radius(3), 500);
        let a = PathBox::unit(0, 0);
        assert_eq!(a.distance(&PathBox::unit(1, 0)), 0);
        assert_eq!(a.distance(&PathBox::unit(42, -7)), 40);
        assert_eq!(a.distance(&PathBox::unit(43, 0)), 41);
        assert!(a.contains([0, 0]) && !a.contains([1, 0]));
    }

    #[test]
    fn lift_without_planted_boxes_is_identity() {
        let f = ScaleFamily::empty(1, 8);
        let sites = [[0, 0], [3, -2], [7, 7]];
        let lifted = box_lift(&sites, &f);
        for (s, b) in sites.iter().zip(&lifted) {
            assert_eq!(*b, PathBox::unit(s[0], s[1]));
        }
    }

    #[test]
    fn lift_prefers_planted_box() {
        let f = ScaleFamily::new(1, 4, vec![vec![], vec![[16, 16]]]).unwrap();
        let lifted = box_lift(&[[20, 5]], &f);
        assert_eq!(lifted[0], f.box_at(2, [16, 16]));
    }

    fn brute_lift(w: [i64; 2], family: &ScaleFamily) -> PathBox {
        let mut all: Vec<PathBox> = (1..=family.top_scale())
            .flat_map(|s| family.planted(s))
            .collect();
        all.reverse();
        let mut best: Option<PathBox> = None;
        for b in all {
            if linf(b.center, w) < b.radius {
                best = match best {
                    Some(c) if (c.scale, c.center) <= (b.scale, b.center) => Some(c),
                    _ => Some(b),
                };
            }
        }
        best.unwrap_or(PathBox::unit(w[0], w[1]))
    }

    #[test]
    fn lift_matches_containment_scan_on_walk() {
        // Overlapping S_1 (radius 10) and S_2 (radius 40) boxes.
        let f = ScaleFamily::new(
            1,
            4,
            vec![vec![[0, 0], [2, 0], [20, 8]], vec![[16, 0], [-32, 0]]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = [-40i64, 0];
        let mut sites = vec![w];
        for _ in 1..100 {
            w[0] += rng.gen_range(-1..=2);
            w[1] += rng.gen_range(-2..=2);
            sites.push(w);
        }
        let lifted = box_lift(&sites, &f);
        let mut planted_hits = 0;
        for (i, (s, b)) in sites.iter().zip(&lifted).enumerate() {
            assert_eq!(*b, brute_lift(*s, &f));
            assert!(b.contains(*s) || (b.scale == 0 && b.center == *s));
            if b.scale > 0 {
                planted_hits += 1;
            }
            if i > 0 {
                assert!(lifted[i - 1].distance(b) <= linf(sites[i - 1], *s));
            }
        }
        assert!(planted_hits > 10);
    }

    #[test]
    fn loop_erase_edges() {
        let one = loop_erase(&[PathBox::unit(0, 0)], 1);
        assert!(one.degenerate && one.path.is_empty());
        assert!(loop_erase(&[], 1).degenerate);
        let sep: Vec<PathBox> = (0..6).map(|i| PathBox::unit(40 * i, 0)).collect();
        let out = loop_erase(&sep, 1);
        assert_eq!(out.path, sep[..5].to_vec());
        assert_eq!(out.removed_tail, Some(sep[5]));
    }

    fn random_walk(rng: &mut ChaCha8Rng, len: usize) -> Vec<PathBox> {
        let mut p = [0i64, 0];
        let mut out = vec![PathBox::unit(0, 0)];
        for _ in 1..len {
            p[0] += rng.gen_range(-2..=2);
            p[1] += rng.gen_range(-2..=2);
            out.push(PathBox::unit(p[0], p[1]));
        }
        out
    }

    fn erased_invariants(out: &LoopErased, rho: u32) {
        let p = FractalPath {
            boxes: out.path.clone(),
        };
        assert!(p.is_self_avoiding());
        assert!(p.is_connected(rho));
        let reach = REACH * rho as i64;
        for i in 0..p.len() {
            for j in i + 2..p.len() {
                assert!(p.boxes[i].distance(&p.boxes[j]) > reach, "{i} {j}");
            }
        }
    }

    #[test]
    fn loop_erase_random_walks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..1000 {
            let len = 2 + t % 400;
            let walk = random_walk(&mut rng, len);
            let out = loop_erase(&walk, 1);
            erased_invariants(&out, 1);
            assert_eq!(out.path[0], walk[0]);
        }
    }

    proptest! {
        #[test]
        fn loop_erase_idempotent(seed in 0u64..10_000, len in 2usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let walk = random_walk(&mut rng, len);
            let out = loop_erase(&walk, 1);
            let mut again = out.path.clone();
            again.extend(out.removed_tail);
            let twice = loop_erase(&again, 1);
            prop_assert_eq!(twice.path, out.path);
        }
    }

    fn lattice_count(rho: i64) -> u64 {
        let mut n = 0;
        let r = 2 + REACH * rho + 5;
        for y in -r..=r {
            for x in -r..=r {
                let d = (x.abs().max(y.abs()) - 2).max(0);
                if (x, y) != (0, 0) && d <= REACH * rho {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn length_two_count() {
        let f = ScaleFamily::empty(1, 8);
        let e = enumerate_paths(
            PathBox::unit(3, -9),
            EnumerationConfig::new(0, 2),
            &f,
            proof_constant(1),
            false,
        )
        .unwrap();
        assert_eq!(e.counts[1], 1);
        assert_eq!(e.counts[2], lattice_count(1));
        assert_eq!(e.counts[2], 85 * 85 - 1);
        let c = path_census(
            PathBox::unit(0, 0),
            EnumerationConfig::new(0, 2),
            &f,
            1e-5,
            10_000,
        )
        .unwrap();
        assert_eq!(c.counts[2], 7224);
        assert_eq!(c.counts[1], 1);
        let f2 = ScaleFamily::empty(2, 8);
        let c2 = path_census(
            PathBox::unit(0, 0),
            EnumerationConfig::new(0, 2),
            &f2,
            1e-5,
            10_000,
        )
        .unwrap();
        assert_eq!(c2.counts[2] as u64, lattice_count(2));
    }

    /// Length-4 count from the closed form: for every `x2 ~ x1` and
    /// `x3 ~ x2`, `x3 ≠ x1`, the last step has `7224 − 1 − [x3 ~ x1]`
    /// choices.
    fn level0_count4() -> u128 {
        let r = 42i64;
        let mut total = 0u128;
        for y2 in -r..=r {
            for x2 in -r..=r {
                if (x2, y2) == (0, 0) {
                    continue;
                }
                // neighbours of x2 (excluding x2) that are also within 42 of x1.
                let ox = (x2 + r).min(r) - (x2 - r).max(-r) + 1;
                let oy = (y2 + r).min(r) - (y2 - r).max(-r) + 1;
                let both = (ox * oy) as u128 - 2; // minus x1 and x2
                let near2 = 7224u128 - 1; // x3 ≠ x1
                total += near2 * 7223 - both;
            }
        }
        total
    }

    #[test]
    fn census_matches_closed_forms() {
        let f = ScaleFamily::empty(1, 8);
        let c = path_census(
            PathBox::unit(0, 0),
            EnumerationConfig {
                level: 0,
                max_len: 4,
                budget: 100_000_000,
            },
            &f,
            1.0 / 20000.0,
            10_000,
        )
        .unwrap();
        assert_eq!(c.counts[3], 7224 * 7223);
        assert_eq!(c.counts[4], level0_count4());
        let beta: f64 = 1.0 / 20000.0;
        for l in 1..=4 {
            let expect = c.counts[l] as f64 * beta.powi(l as i32);
            assert!((c.weight_sums[l] - expect).abs() <= 1e-12 * expect);
        }
        assert!(c.cumulative.windows(2).all(|w| w[1] >= w[0]));
        assert!(c.cumulative[4] <= 1.0);
    }

    #[test]
    fn census_agrees_with_enumeration_with_planted_boxes() {
        let f = spaced_family();
        let start = f.box_at(1, [110, 0]);
        let cfg = EnumerationConfig::new(1, 2);
        let e = enumerate_paths(start, cfg, &f, proof_constant(1), true).unwrap();
        let c = path_census(start, cfg, &f, 1e-6, proof_constant(1)).unwrap();
        assert_eq!(e.counts[2] as u128, c.counts[2]);
        assert_eq!(e.s0_violations as u128, c.s0_violations[2]);
        let w: f64 = e.paths.iter().map(|p| path_weight(&p.boxes, 1e-6, 8)).sum();
        assert!((w - c.cumulative[2]).abs() <= 1e-12 * w);
        for p in &e.paths {
            assert!(p.is_self_avoiding() && p.is_connected(1));
        }
    }

    #[test]
    fn budget_is_enforced() {
        let f = ScaleFamily::empty(1, 8);
        let cfg = EnumerationConfig {
            level: 0,
            max_len: 3,
            budget: 1000,
        };
        let err = enumerate_paths(PathBox::unit(0, 0), cfg, &f, 10_000, false).unwrap_err();
        assert_eq!(err.code(), "enumeration-budget-exceeded");
    }

    #[test]
    fn weights() {
        let f = ScaleFamily::new(1, 4, vec![vec![], vec![[0, 0]]]).unwrap();
        let beta = 0.01;
        assert_eq!(path_weight(&[PathBox::unit(0, 0)], beta, 4), beta);
        let p = [
            PathBox::unit(0, 0),
            f.box_at(2, [0, 0]),
            PathBox::unit(100, 0),
        ];
        let expect = beta.powi(3) * 4f64.powi(-16);
        assert!((path_weight(&p, beta, 4) - expect).abs() < 1e-30);
    }

    #[test]
    fn admissibility_threshold() {
        let f = ScaleFamily::empty(1, 8);
        let a = admissibility(&f, 1.0 / 20000.0);
        assert!(a.ok());
        assert!((a.worst_sum - 7225.0 / 20000.0).abs() < 1e-12);
        let err =
            cumulative_weight(PathBox::unit(0, 0), &f, 0, 1.0 / 14000.0, 2, 1000).unwrap_err();
        assert_eq!(err.code(), "beta-too-large");
        let planted = admissibility(&spaced_family(), 1.0 / 20000.0);
        assert!(planted.exact && planted.worst_sum > a.worst_sum);
    }

    #[test]
    fn admissibility_difference_array_matches_scan() {
        let f = spaced_family();
        let beta: f64 = 1e-5;
        let a = admissibility(&f, beta);
        let half0 = beta.sqrt();
        let half1 = half0 * 8f64.powi(-4);
        let mut best = f64::MIN;
        for y in -80..200 {
            for x in -80..200 {
                let u = PathBox::unit(x, y);
                let near = f.planted(1).filter(|b| b.distance(&u) <= 40).count() as f64;
                best = best.max((7225.0 * half0 + near * half1) * half0);
            }
        }
        for b in f.planted(1) {
            let n0 = f.neighbour_count(&b, 0) as f64;
            let n1 = f.planted(1).filter(|q| q.distance(&b) <= 40).count() as f64;
            best = best.max((n0 * half0 + n1 * half1) * half1);
        }
        assert!((a.worst_sum - best).abs() <= 1e-15);
    }

    #[test]
    fn translation_invariance() {
        let f = ScaleFamily::empty(1, 8);
        let cfg = EnumerationConfig::new(0, 3);
        let a = path_census(PathBox::unit(0, 0), cfg, &f, 1e-5, 10_000).unwrap();
        let b = path_census(PathBox::unit(-1234, 77), cfg, &f, 1e-5, 10_000).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn length_bound_level_zero_and_vacuous() {
        let f = ScaleFamily::empty(1, 8);
        let e = enumerate_paths(
            PathBox::unit(0, 0),
            EnumerationConfig::new(0, 2),
            &f,
            proof_constant(1),
            true,
        )
        .unwrap();
        let rep = check_length_bound(&e.paths, 0, 8, proof_constant(1));
        assert_eq!(rep.checked, e.paths.len() as u64);
        assert_eq!(rep.violations, 0);
        assert!(rep.pass());
        // D < N^k: nothing checked.
        let short = check_length_bound(
            &[FractalPath {
                boxes: vec![PathBox::unit(0, 0)],
            }],
            2,
            8,
            10_000,
        );
        assert_eq!(short.checked, 0);
        assert!(length_bound_holds(1, 44, 0, 8, 44) && !length_bound_holds(1, 44, 0, 8, 43));
    }

    #[test]
    fn planted_level_one_paths() {
        let f = spaced_family();
        let start = f.box_at(1, [0, 0]);
        let c = path_census(
            start,
            EnumerationConfig::new(1, 3),
            &f,
            1e-6,
            proof_constant(1),
        )
        .unwrap();
        assert!(c.counts[3] > 0);
        assert_eq!(c.s0_violations[3], 0);
        let e = enumerate_paths(
            start,
            EnumerationConfig::new(1, 2),
            &f,
            proof_constant(1),
            true,
        )
        .unwrap();
        let rep = check_length_bound(&e.paths, 1, 8, proof_constant(1));
        assert_eq!(rep.violations, 0);
        assert!(!rep.hypothesis_holds);
        assert_eq!(e.box_fraction.evaluated, 0);
    }

    #[test]
    fn dense_family_breaks_fraction_at_small_n() {
        // Condition 2 only asks for separation N/10 < 1 here.
        let f = ScaleFamily::new(1, 8, vec![vec![[0, 0], [1, 0], [2, 0]]]).unwrap();
        let c = path_census(
            f.box_at(1, [0, 0]),
            EnumerationConfig::new(1, 3),
            &f,
            1e-6,
            10_000,
        )
        .unwrap();
        assert!(c.s0_violations[3] > 0);
    }

    #[test]
    fn box_fraction_formula() {
        assert_eq!(box_fraction_holds(&[3, 1], 4, 1, 8, 10), None);
        assert_eq!(box_fraction_holds(&[3, 1], 4, 1, 1000, 2), Some(true));
        assert_eq!(box_fraction_holds(&[0, 3, 0], 3, 2, 1000, 2), Some(false));
    }

    #[test]
    fn csv_has_rows_per_length() {
        let f = ScaleFamily::empty(1, 8);
        let c = path_census(
            PathBox::unit(0, 0),
            EnumerationConfig::new(0, 3),
            &f,
            1e-5,
            10_000,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_census_csv(&[c], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 4);
        assert!(s.lines().nth(2).unwrap().starts_with("0,2,7224,"));
    }

    #[test]
    fn family_json_round_trip() {
        let f = spaced_family();
        let dir = std::env::temp_dir().join(format!("pg-{}.json", std::process::id()));
        std::fs::write(&dir, serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(ScaleFamily::load(&dir).unwrap(), f);
        std::fs::remove_file(&dir).ok();
    }
}
