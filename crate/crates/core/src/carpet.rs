//! Carpet extraction from a retention tree.
//!
//! `A_n†` keeps the good boxes of `A_n ∩ A_{n−1}†`; `A_n*` further removes,
//! at every point where two complementary components of `A_{n−1}* ∩ A_n†`
//! touch, the other diagonal pair of level-`(n+1)` boxes at that point.
//!
//! The complement of `A_n*` is kept as a list of holes (closed boxes) with a
//! union-find over them; node 0 is the unbounded component. Components keep
//! their identity across levels and are checked against the gap bounds of
//! the distance induction.
//!
//! Goodness is truncated: a box of level `n` must be `m_n`-good with
//! `m_n = min(budget + depth − n, tree_depth − n)`, which drops by exactly one
//! per level, so every box of `A_n†` keeps at least `N² − 1` children in
//! `A_{n+1}†`.

use std::collections::{HashMap, HashSet, VecDeque};

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::boxlattice::{
    checked_pow, rational_opt_str, rational_str, rational_vec_str, BoxAddress, Rational,
};
use crate::error::{Error, Result};
use crate::goodness::classify_m_good;
use crate::percolation::{filling_and_outer_boundary, ClusterSet, RetentionTree};
use crate::unionfind::UnionFind;

/// Smallest base accepted by [`star_trim`]; the distance induction needs
/// `N ≥ 6`. Smaller bases can be handled by grouping levels (`N′ = N²`).
pub const MIN_TRIM_BASE: u32 = 6;

#[derive(Clone, Debug)]
pub struct DaggerSequence {
    pub base: u32,
    pub depth: u32,
    pub budget: u32,
    pub tree_depth: u32,
    /// `m_n` for `n = 0..=depth`.
    pub level_budgets: Vec<u32>,
    /// `[0,1]²` is `m_0`-good. When false the sequence is empty.
    pub root_good: bool,
    /// `members[n]`: tree ranks of level `n` that belong to `A_n†`.
    pub members: Vec<FixedBitSet>,
}

impl DaggerSequence {
    pub fn count(&self, n: u32) -> usize {
        self.members.get(n as usize).map_or(0, |b| b.count_ones(..))
    }
}

/// `A_0† ⊇ A_1† ⊇ … ⊇ A_depth†`, with ∞-good replaced by `m_n`-good.
pub fn dagger_sequence(tree: &RetentionTree, depth: u32, budget: u32) -> Result<DaggerSequence> {
    let tree_depth = tree.depth();
    if depth == 0 || depth > tree_depth {
        return Err(Error::DepthExceeded {
            requested: depth,
            limit: tree_depth,
        });
    }
    let level_budgets: Vec<u32> = (0..=depth)
        .map(|n| (budget + depth - n).min(tree_depth - n))
        .collect();
    let table = classify_m_good(tree, level_budgets[0])?;
    let root_good = table.is_good_rank(0, 0, level_budgets[0]) == Some(true);
    let mut seq = DaggerSequence {
        base: tree.base(),
        depth,
        budget,
        tree_depth,
        level_budgets: level_budgets.clone(),
        root_good,
        members: Vec::new(),
    };
    if !root_good {
        return Ok(seq);
    }
    let mut root = FixedBitSet::with_capacity(1);
    root.insert(0);
    seq.members.push(root);
    for n in 1..=depth {
        let lm = tree.level(n);
        let m = level_budgets[n as usize];
        let mut bits = FixedBitSet::with_capacity(lm.count());
        for k in seq.members[n as usize - 1].ones() {
            for r in lm.child_start[k] as usize..lm.child_start[k + 1] as usize {
                if m == 0 || table.is_good_rank(n, r, m) == Some(true) {
                    bits.insert(r);
                }
            }
        }
        seq.members.push(bits);
    }
    Ok(seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoleKind {
    /// `σ_B = 0`.
    Removed,
    /// Retained but not good enough for `A_n†`.
    NotGood,
    /// Removed at a corner contact.
    Trim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hole {
    pub addr: BoxAddress,
    /// Construction step `n` at which the box left `A_n*`.
    pub stage: u32,
    pub kind: HoleKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimEvent {
    pub stage: u32,
    /// Contact point in units of `N^{−stage}`.
    pub point: (u64, u64),
    pub boxes: [BoxAddress; 2],
    /// Component ids (at the previous level) of the two touching sides; new
    /// components have no id yet.
    pub sides: [Option<u32>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarpetApprox {
    pub base: u32,
    pub depth: u32,
    pub budget: u32,
    pub level_budgets: Vec<u32>,
    pub root_good: bool,
    /// Holes in insertion order; stages are nondecreasing.
    pub holes: Vec<Hole>,
    pub trims: Vec<TrimEvent>,
    /// `|A_n†|` in boxes, `n = 0..=depth`.
    pub dagger_counts: Vec<usize>,
    /// Exact `area(A_n*)`, `n = 0..=depth`.
    #[serde(with = "rational_vec_str")]
    pub star_areas: Vec<Rational>,
    /// `snapshots[n−1][h]`: component id of hole `h` after step `n`.
    pub snapshots: Vec<Vec<u32>>,
    /// Birth level of each component id; id 0 is the unbounded component.
    pub births: Vec<u32>,
    /// Boxes of `A_{n−1}†` with fewer than `N² − 1` children in `A_n†`.
    pub child_property_violations: usize,
    /// Unions of two components that already existed at the previous level.
    pub merge_violations: usize,
}

impl CarpetApprox {
    /// Level of the finest boxes (trims of the last step).
    pub fn fine_level(&self) -> u32 {
        self.depth + 1
    }

    pub fn holes_at(&self, n: u32) -> &[Hole] {
        let len = if n == 0 {
            0
        } else {
            self.snapshots[n as usize - 1].len()
        };
        &self.holes[..len]
    }

    pub fn trims_at(&self, n: u32) -> impl Iterator<Item = &TrimEvent> {
        self.trims.iter().filter(move |t| t.stage == n)
    }
}

enum Owner {
    Outside,
    Hole(usize),
    Retained,
}

struct HoleIndex {
    map: HashMap<BoxAddress, usize>,
    levels: Vec<u32>,
}

impl HoleIndex {
    fn insert(&mut self, addr: BoxAddress, idx: usize) {
        self.map.insert(addr, idx);
        if let Err(pos) = self.levels.binary_search(&addr.level) {
            self.levels.insert(pos, addr.level);
        }
    }

    fn owner(&self, base: u32, level: u32, x: i64, y: i64, side: i64) -> Owner {
        if x < 0 || y < 0 || x >= side || y >= side {
            return Owner::Outside;
        }
        let cell = BoxAddress {
            base,
            level,
            i: x as u64,
            j: y as u64,
        };
        for &l in &self.levels {
            if l > level {
                break;
            }
            if let Some(&h) = self.map.get(&cell.ancestor(l).unwrap()) {
                return Owner::Hole(h);
            }
        }
        Owner::Retained
    }
}

struct Tracker {
    uf: UnionFind,
    /// Component id held by each union-find root, if assigned.
    info: Vec<Option<u32>>,
    births: Vec<u32>,
    merge_violations: usize,
}

impl Tracker {
    fn node(hole: usize) -> usize {
        hole + 1
    }

    fn join(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.uf.find(a), self.uf.find(b));
        if ra == rb {
            return;
        }
        let keep = match (self.info[ra], self.info[rb]) {
            (Some(x), Some(y)) => {
                self.merge_violations += 1;
                let older = |id: u32| (self.births[id as usize], id);
                Some(if older(x) <= older(y) { x } else { y })
            }
            (x, y) => x.or(y),
        };
        self.uf.union(ra, rb);
        let r = self.uf.find(ra);
        self.info[r] = keep;
    }

    fn id_of(&mut self, node: usize) -> Option<u32> {
        let r = self.uf.find(node);
        self.info[r]
    }
}

/// Builds `A_1*, …, A_depth*` and the component history from `A_n†`.
pub fn star_trim(tree: &RetentionTree, dagger: &DaggerSequence) -> Result<CarpetApprox> {
    let base = dagger.base;
    if base < MIN_TRIM_BASE {
        return Err(Error::UnsupportedBase {
            base,
            hint: "the corner-trimming induction needs N >= 6; run with N' = N^2 instead",
        });
    }
    let depth = dagger.depth;
    let fine = depth + 1;
    let side_fine = i128::from(base)
        .checked_pow(fine)
        .ok_or(Error::DepthExceeded {
            requested: depth,
            limit: depth - 1,
        })?;
    let total_area = side_fine
        .checked_mul(side_fine)
        .ok_or(Error::DepthExceeded {
            requested: depth,
            limit: depth - 1,
        })?;
    let mut carpet = CarpetApprox {
        base,
        depth,
        budget: dagger.budget,
        level_budgets: dagger.level_budgets.clone(),
        root_good: dagger.root_good,
        holes: Vec::new(),
        trims: Vec::new(),
        dagger_counts: (0..=depth).map(|n| dagger.count(n)).collect(),
        star_areas: Vec::new(),
        snapshots: Vec::new(),
        births: vec![0],
        child_property_violations: 0,
        merge_violations: 0,
    };
    if !dagger.root_good {
        return Ok(carpet);
    }
    carpet.star_areas.push(Rational::from_integer(1));
    let n2 = (base * base) as usize;
    let mut index = HoleIndex {
        map: HashMap::new(),
        levels: Vec::new(),
    };
    let mut tr = Tracker {
        uf: UnionFind::new(1),
        info: vec![Some(0)],
        births: vec![0],
        merge_violations: 0,
    };
    let mut removed_area: i128 = 0;
    let hole_area = |level: u32| -> i128 { i128::from(base).pow(2 * (fine - level)) };
    let mut coords_prev: Vec<(u64, u64)> = vec![(0, 0)];

    for n in 1..=depth {
        let lm = tree.level(n);
        let side_n = checked_pow(base, n).unwrap() as i64;
        let first_new = carpet.holes.len();
        // holes of A_{n−1}* ∩ A_n† that are new at this level
        for k in dagger.members[n as usize - 1].ones() {
            let (pi, pj) = coords_prev[k];
            let parent = BoxAddress {
                base,
                level: n - 1,
                i: pi,
                j: pj,
            };
            let is_hole = index.map.contains_key(&parent);
            let mut r = lm.child_start[k] as usize;
            let mut kept = 0;
            for c in 0..n2 {
                let marked = lm.marks.contains(k * n2 + c);
                let in_next = marked && dagger.members[n as usize].contains(r);
                if marked {
                    r += 1;
                }
                if in_next {
                    kept += 1;
                    continue;
                }
                if is_hole {
                    continue;
                }
                let addr = BoxAddress {
                    base,
                    level: n,
                    i: pi * base as u64 + (c as u64 % base as u64),
                    j: pj * base as u64 + (c as u64 / base as u64),
                };
                if index.map.contains_key(&addr) {
                    continue; // trimmed at the previous step
                }
                carpet.holes.push(Hole {
                    addr,
                    stage: n,
                    kind: if marked {
                        HoleKind::NotGood
                    } else {
                        HoleKind::Removed
                    },
                });
            }
            if kept + 1 < n2 {
                carpet.child_property_violations += 1;
            }
        }
        for h in first_new..carpet.holes.len() {
            index.insert(carpet.holes[h].addr, h);
            tr.uf.push();
            tr.info.push(None);
        }
        for h in first_new..carpet.holes.len() {
            connect(&carpet.holes, &index, &mut tr, h);
            removed_area += hole_area(n);
        }

        // corner contacts between distinct components
        let mut seen = HashSet::new();
        let mut new_trims = Vec::new();
        for h in 0..carpet.holes.len() {
            let (x0, y0, x1, y1) = carpet.holes[h].addr.cells_at(n);
            for (px, py) in [(x1, y1), (x0, y1), (x0, y0), (x1, y0)] {
                let (px, py) = (px as i64, py as i64);
                if px <= 0 || py <= 0 || px >= side_n || py >= side_n || !seen.insert((px, py)) {
                    continue;
                }
                let q = |dx: i64, dy: i64| index.owner(base, n, px + dx, py + dy, side_n);
                let (ne, nw, sw, se) = (q(0, 0), q(-1, 0), q(-1, -1), q(0, -1));
                let pair = match (ne, nw, sw, se) {
                    (Owner::Hole(a), Owner::Retained, Owner::Hole(b), Owner::Retained) => {
                        Some((a, b, [(0, 0), (-1, -1)]))
                    }
                    (Owner::Retained, Owner::Hole(a), Owner::Retained, Owner::Hole(b)) => {
                        Some((a, b, [(-1, 0), (0, -1)]))
                    }
                    _ => None,
                };
                let Some((a, b, _)) = pair else { continue };
                let (na, nb) = (Tracker::node(a), Tracker::node(b));
                if tr.uf.find(na) == tr.uf.find(nb) {
                    continue;
                }
                // the retained diagonal pair, one level finer
                let retained = match pair.unwrap().2 {
                    [(0, 0), _] => [(-1i64, 0i64), (0, -1)],
                    _ => [(0, 0), (-1, -1)],
                };
                let nb_ = base as i64;
                let boxes = retained.map(|(dx, dy)| BoxAddress {
                    base,
                    level: n + 1,
                    i: (px * nb_ + dx) as u64,
                    j: (py * nb_ + dy) as u64,
                });
                new_trims.push(TrimEvent {
                    stage: n,
                    point: (px as u64, py as u64),
                    boxes,
                    sides: [tr.id_of(na), tr.id_of(nb)],
                });
            }
        }
        let first_trim = carpet.holes.len();
        for t in &new_trims {
            for b in t.boxes {
                carpet.holes.push(Hole {
                    addr: b,
                    stage: n,
                    kind: HoleKind::Trim,
                });
            }
        }
        for h in first_trim..carpet.holes.len() {
            index.insert(carpet.holes[h].addr, h);
            tr.uf.push();
            tr.info.push(None);
        }
        for h in first_trim..carpet.holes.len() {
            connect(&carpet.holes, &index, &mut tr, h);
            removed_area += hole_area(n + 1);
        }
        carpet.trims.extend(new_trims);

        // components born at this level
        for h in first_new..carpet.holes.len() {
            let r = tr.uf.find(Tracker::node(h));
            if tr.info[r].is_none() {
                tr.info[r] = Some(tr.births.len() as u32);
                tr.births.push(n);
            }
        }
        let snapshot: Vec<u32> = (0..carpet.holes.len())
            .map(|h| {
                tr.id_of(Tracker::node(h))
                    .expect("every component has an id")
            })
            .collect();
        carpet.snapshots.push(snapshot);
        carpet
            .star_areas
            .push(Rational::new(total_area - removed_area, total_area));
        if n < depth {
            coords_prev = tree.children_coords(n, &coords_prev);
        }
    }
    carpet.births = tr.births;
    carpet.merge_violations = tr.merge_violations;
    Ok(carpet)
}

/// Unions hole `h` with the unbounded component if it touches `∂[0,1]²`
/// and with every earlier-or-equal-level hole sharing an edge with it.
fn connect(holes: &[Hole], index: &HoleIndex, tr: &mut Tracker, h: usize) {
    let a = holes[h].addr;
    let side = a.grid_side() as i64;
    let (i, j) = (a.i as i64, a.j as i64);
    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
        match index.owner(a.base, a.level, i + dx, j + dy, side) {
            Owner::Outside => tr.join(Tracker::node(h), 0),
            Owner::Hole(o) => tr.join(Tracker::node(h), Tracker::node(o)),
            Owner::Retained => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Gap history

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub level: u32,
    pub a: u32,
    pub b: u32,
    /// The later of the two birth levels.
    pub birth: u32,
    #[serde(with = "rational_str")]
    pub gap: Rational,
    /// `gap ≥ N^{−k}/5`.
    pub fifth_ok: bool,
    /// `gap ≥ N^{−k}(1 − 4Σ_{i≤m}N^{−i} − 2N^{−m−1})`, `m = level − k`.
    pub induction_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub id: u32,
    pub birth: u32,
    pub holes: usize,
    /// `|·|∞` diameter of the closure at the last level.
    #[serde(with = "rational_str")]
    pub diameter: Rational,
}

/// Components of the complement of `A_n*` over all levels.
///
/// Pairs are recorded when their gap is below `N^{−k}` (`k` the later
/// birth level); farther pairs satisfy every bound trivially.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentSet {
    pub base: u32,
    pub depth: u32,
    pub births: Vec<u32>,
    pub components: Vec<ComponentRecord>,
    pub pairs: Vec<PairGap>,
    pub fifth_violations: usize,
    pub induction_violations: usize,
    pub merge_violations: usize,
}

fn rect_gap(a: (u64, u64, u64, u64), b: (u64, u64, u64, u64)) -> u64 {
    let gx = a.0.saturating_sub(b.2).max(b.0.saturating_sub(a.2));
    let gy = a.1.saturating_sub(b.3).max(b.1.saturating_sub(a.3));
    gx.max(gy)
}

/// Exact gap checks for every pair of components at every level.
pub fn track_components(carpet: &CarpetApprox) -> ComponentSet {
    let base = carpet.base;
    let fine = carpet.fine_level();
    let pw = |e: u32| -> u64 { (base as u64).pow(e) };
    let side = if carpet.root_good { pw(fine) } else { 0 };
    let births = &carpet.births;
    let mut pairs = Vec::new();
    for n in 1..=carpet.snapshots.len() as u32 {
        let ids = &carpet.snapshots[n as usize - 1];
        let rects: Vec<_> = carpet.holes[..ids.len()]
            .iter()
            .map(|h| h.addr.cells_at(fine))
            .collect();
        let g = n.min(3);
        let cell = pw(fine - g);
        let mut grid: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
        for (h, r) in rects.iter().enumerate() {
            for cy in r.1 / cell..=(r.3 - 1) / cell {
                for cx in r.0 / cell..=(r.2 - 1) / cell {
                    grid.entry((cx, cy)).or_default().push(h);
                }
            }
        }
        let mut best: HashMap<(u32, u32), u64> = HashMap::new();
        let mut record = |a: u32, b: u32, gap: u64| {
            let key = (a.min(b), a.max(b));
            let e = best.entry(key).or_insert(u64::MAX);
            *e = (*e).min(gap);
        };
        let all: Vec<usize> = (0..rects.len()).collect();
        for (h, r) in rects.iter().enumerate() {
            let id = ids[h];
            if id == 0 {
                continue;
            }
            let k = births[id as usize];
            let radius = pw(fine - k);
            let to_edge = r.0.min(r.1).min(side - r.2).min(side - r.3);
            if to_edge < radius {
                record(0, id, to_edge);
            }
            let mut check = |o: usize| {
                let other = ids[o];
                if other != id && births[other as usize] <= k {
                    let gap = rect_gap(*r, rects[o]);
                    if gap < radius {
                        record(id, other, gap);
                    }
                }
            };
            if k >= g {
                let (cx0, cy0) = (
                    (r.0 / cell).saturating_sub(1),
                    (r.1 / cell).saturating_sub(1),
                );
                let (cx1, cy1) = ((r.2 - 1) / cell + 1, (r.3 - 1) / cell + 1);
                for cy in cy0..=cy1 {
                    for cx in cx0..=cx1 {
                        if let Some(list) = grid.get(&(cx, cy)) {
                            list.iter().for_each(|&o| check(o));
                        }
                    }
                }
            } else {
                all.iter().for_each(|&o| check(o));
            }
        }
        let denom = i128::from(side);
        let mut level_pairs: Vec<PairGap> = best
            .into_iter()
            .map(|((a, b), gap)| {
                let k = births[a as usize].max(births[b as usize]);
                let m = n - k;
                let unit = pw(fine - k) as i128;
                let mut bound = unit - 2 * pw(fine - k - m - 1) as i128;
                for i in 1..=m {
                    bound -= 4 * pw(fine - k - i) as i128;
                }
                PairGap {
                    level: n,
                    a,
                    b,
                    birth: k,
                    gap: Rational::new(gap as i128, denom),
                    fifth_ok: 5 * gap as i128 >= unit,
                    induction_ok: gap as i128 >= bound,
                }
            })
            .collect();
        level_pairs.sort_by_key(|p| (p.a, p.b));
        pairs.extend(level_pairs);
    }

    let mut components = Vec::new();
    if let Some(ids) = carpet.snapshots.last() {
        let mut ext: HashMap<u32, (u64, u64, u64, u64, usize)> = HashMap::new();
        for (h, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let r = carpet.holes[h].addr.cells_at(fine);
            let e = ext.entry(id).or_insert((u64::MAX, u64::MAX, 0, 0, 0));
            *e = (
                e.0.min(r.0),
                e.1.min(r.1),
                e.2.max(r.2),
                e.3.max(r.3),
                e.4 + 1,
            );
        }
        let mut list: Vec<_> = ext.into_iter().collect();
        list.sort_by_key(|(id, _)| *id);
        components = list
            .into_iter()
            .map(|(id, (x0, y0, x1, y1, count))| ComponentRecord {
                id,
                birth: births[id as usize],
                holes: count,
                diameter: Rational::new((x1 - x0).max(y1 - y0) as i128, side as i128),
            })
            .collect();
    }
    ComponentSet {
        base,
        depth: carpet.depth,
        births: births.clone(),
        fifth_violations: pairs.iter().filter(|p| !p.fifth_ok).count(),
        induction_violations: pairs.iter().filter(|p| !p.induction_ok).count(),
        pairs,
        components,
        merge_violations: carpet.merge_violations,
    }
}

/// Finite-depth stand-in for Whyburn's criterion. Empty interior of the
/// limit is not decidable at finite depth; the area of `A_n*` serves as a
/// proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhyburnReport {
    pub depth: u32,
    pub budget: u32,
    pub level_budgets: Vec<u32>,
    pub root_good: bool,
    /// Smallest gap between two components at the last level, if any pair
    /// is closer than its birth scale.
    #[serde(with = "rational_opt_str")]
    pub min_gap: Option<Rational>,
    pub min_gap_positive: bool,
    /// Largest diameter among components born at level `k`, `k = 1..=depth`.
    pub max_diameter_by_birth: Vec<Option<String>>,
    pub diameters_nonincreasing: bool,
    #[serde(with = "rational_vec_str")]
    pub star_areas: Vec<Rational>,
    pub area_ratios: Vec<f64>,
    pub area_nonincreasing: bool,
    pub fifth_violations: usize,
    pub induction_violations: usize,
    pub merge_violations: usize,
    pub child_property_violations: usize,
    pub trims: usize,
    pub pass: bool,
}

pub fn whyburn_report(carpet: &CarpetApprox, components: &ComponentSet) -> WhyburnReport {
    let last = carpet.snapshots.len() as u32;
    let min_gap = components
        .pairs
        .iter()
        .filter(|p| p.level == last)
        .map(|p| p.gap)
        .min();
    let min_gap_positive = min_gap.map_or(true, |g| g > Rational::from_integer(0));
    let mut by_birth: Vec<Option<Rational>> = vec![None; carpet.depth as usize];
    for c in &components.components {
        let slot = &mut by_birth[c.birth as usize - 1];
        *slot = Some(slot.map_or(c.diameter, |d: Rational| d.max(c.diameter)));
    }
    let present: Vec<Rational> = by_birth.iter().flatten().copied().collect();
    let diameters_nonincreasing = present.windows(2).all(|w| w[1] <= w[0]);
    let area_nonincreasing = carpet.star_areas.windows(2).all(|w| w[1] <= w[0]);
    let area_ratios = carpet
        .star_areas
        .windows(2)
        .map(|w| {
            let r = w[1] / w[0];
            *r.numer() as f64 / *r.denom() as f64
        })
        .collect();
    let pass = carpet.root_good && min_gap_positive && diameters_nonincreasing;
    WhyburnReport {
        depth: carpet.depth,
        budget: carpet.budget,
        level_budgets: carpet.level_budgets.clone(),
        root_good: carpet.root_good,
        min_gap,
        min_gap_positive,
        max_diameter_by_birth: by_birth
            .iter()
            .map(|d| d.map(|d| crate::boxlattice::rational_to_string(&d)))
            .collect(),
        diameters_nonincreasing,
        star_areas: carpet.star_areas.clone(),
        area_ratios,
        area_nonincreasing,
        fifth_violations: components.fifth_violations,
        induction_violations: components.induction_violations,
        merge_violations: components.merge_violations,
        child_property_violations: carpet.child_property_violations,
        trims: carpet.trims.len() * 2,
        pass,
    }
}

// ---------------------------------------------------------------------------
// Carpet from removed-box clusters

/// Cells above which [`cluster_carpet`] refuses to rasterize.
pub const CLUSTER_GRID_CAP: usize = 1 << 26;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterCarpet {
    pub level: u32,
    /// Complement of the boundary-touching clusters has interior points.
    pub event_e: bool,
    /// Cells of `U`, the largest component of that interior.
    pub u_cells: u64,
    /// Clusters (indices into the cluster set) whose boxes lie in `U`.
    pub inside_u: Vec<usize>,
    pub outermost: Vec<usize>,
    /// Carpet `Ū \ ∪ F(O_i)°` as row runs `[x0, x1) × [y, y+1)`.
    pub runs: Vec<(u64, u64, u64)>,
    #[serde(with = "rational_str")]
    pub area: Rational,
    /// Corner contacts between different clusters, split by whether a
    /// third removed box covers the point.
    pub resolved_contacts: usize,
    pub unresolved_contacts: usize,
    /// Pairs of outermost fillings whose closures meet.
    pub touching_fillings: usize,
    /// Outermost fillings whose closure meets `∂U`.
    pub fillings_touching_u_boundary: usize,
}

/// Carpet `Ū \ ∪ F(O_i)°` over the outermost clusters inside `U`.
pub fn cluster_carpet(clusters: &ClusterSet, depth: u32) -> Result<ClusterCarpet> {
    let base = clusters.base;
    let level = depth.max(clusters.fine_level);
    let side = checked_pow(base, level).ok_or(Error::GridTooLarge {
        requested: usize::MAX,
        cap: CLUSTER_GRID_CAP,
    })? as usize;
    let cells = side.checked_mul(side).unwrap_or(usize::MAX);
    if cells > CLUSTER_GRID_CAP {
        return Err(Error::GridTooLarge {
            requested: cells,
            cap: CLUSTER_GRID_CAP,
        });
    }
    const FREE: u32 = u32::MAX;
    let mut owner = vec![FREE; cells];
    let mut touches = vec![false; clusters.clusters.len()];
    for (k, b) in clusters.boxes.iter().enumerate() {
        let c = clusters.cluster_of[k];
        let (x0, y0, x1, y1) = b.cells_at(level);
        if x0 == 0 || y0 == 0 || x1 as usize == side || y1 as usize == side {
            touches[c] = true;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                owner[y as usize * side + x as usize] = c as u32;
            }
        }
    }
    let outside = |o: u32| o != FREE && touches[o as usize];
    // 4-connected components of the cells not in boundary clusters
    let mut comp = vec![u32::MAX; cells];
    let mut sizes: Vec<u64> = Vec::new();
    for s in 0..cells {
        if outside(owner[s]) || comp[s] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0u64;
        let mut queue = VecDeque::from([s]);
        comp[s] = id;
        while let Some(c) = queue.pop_front() {
            size += 1;
            let (x, y) = (c % side, c / side);
            let mut push = |n: usize| {
                if comp[n] == u32::MAX && !outside(owner[n]) {
                    comp[n] = id;
                    queue.push_back(n);
                }
            };
            if x > 0 {
                push(c - 1);
            }
            if x + 1 < side {
                push(c + 1);
            }
            if y > 0 {
                push(c - side);
            }
            if y + 1 < side {
                push(c + side);
            }
        }
        sizes.push(size);
    }
    let resolved_contacts = clusters.boundary_contacts().filter(|c| c.resolved).count();
    let unresolved_contacts = clusters.boundary_contacts().filter(|c| !c.resolved).count();
    let Some((u, &u_cells)) = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(i, s)| (*s, std::cmp::Reverse(i)))
    else {
        return Ok(ClusterCarpet {
            level,
            event_e: false,
            u_cells: 0,
            inside_u: Vec::new(),
            outermost: Vec::new(),
            runs: Vec::new(),
            area: Rational::from_integer(0),
            resolved_contacts,
            unresolved_contacts,
            touching_fillings: 0,
            fillings_touching_u_boundary: 0,
        });
    };
    let u = u as u32;
    let inside_u: Vec<usize> = (0..clusters.clusters.len())
        .filter(|&c| !touches[c])
        .filter(|&c| {
            let b = clusters.boxes[clusters.clusters[c][0]];
            let (x0, y0, _, _) = b.cells_at(level);
            comp[y0 as usize * side + x0 as usize] == u
        })
        .collect();
    // filling cells of each cluster in U
    let mut filled_by: Vec<Vec<u32>> = Vec::new();
    let mut fill_mask: HashMap<usize, Vec<usize>> = HashMap::new();
    for &c in &inside_u {
        let f = filling_and_outer_boundary(&clusters.members(c))?;
        let scale = checked_pow(base, level - f.level).unwrap();
        let mut list = Vec::new();
        for &(x0, x1, y) in &f.runs {
            for yy in y * scale..(y + 1) * scale {
                for xx in x0 * scale..x1 * scale {
                    list.push(yy as usize * side + xx as usize);
                }
            }
        }
        fill_mask.insert(c, list);
    }
    let mut cover = vec![0u32; cells];
    for list in fill_mask.values() {
        for &i in list {
            cover[i] += 1;
        }
    }
    // a cluster is enclosed if its cells lie in another cluster's filling,
    // i.e. are covered by more than its own filling
    let outermost: Vec<usize> = inside_u
        .iter()
        .copied()
        .filter(|&c| {
            let b = clusters.boxes[clusters.clusters[c][0]];
            let (x0, y0, _, _) = b.cells_at(level);
            cover[y0 as usize * side + x0 as usize] == 1
        })
        .collect();
    let mut carved = vec![u32::MAX; cells];
    for (slot, &c) in outermost.iter().enumerate() {
        for &i in &fill_mask[&c] {
            carved[i] = slot as u32;
        }
        filled_by.push(vec![]);
    }
    let mut runs = Vec::new();
    let mut kept = 0u64;
    let mut touching = HashSet::new();
    let mut at_boundary = HashSet::new();
    for y in 0..side {
        let mut x = 0;
        while x < side {
            let i = y * side + x;
            if comp[i] == u && carved[i] == u32::MAX {
                let start = x;
                while x < side && comp[y * side + x] == u && carved[y * side + x] == u32::MAX {
                    x += 1;
                }
                kept += (x - start) as u64;
                runs.push((start as u64, x as u64, y as u64));
            } else {
                x += 1;
            }
        }
        for x in 0..side {
            let i = y * side + x;
            let s = carved[i];
            if s == u32::MAX {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx as usize >= side || ny as usize >= side {
                        at_boundary.insert(s);
                        continue;
                    }
                    let j = ny as usize * side + nx as usize;
                    if comp[j] != u {
                        at_boundary.insert(s);
                    } else if carved[j] != u32::MAX && carved[j] != s {
                        touching.insert((s.min(carved[j]), s.max(carved[j])));
                    }
                }
            }
        }
    }
    Ok(ClusterCarpet {
        level,
        event_e: true,
        u_cells,
        inside_u,
        outermost,
        runs,
        area: Rational::new(kept as i128, (side * side) as i128),
        resolved_contacts,
        unresolved_contacts,
        touching_fillings: touching.len(),
        fillings_touching_u_boundary: at_boundary.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percolation::{clusters, AdjacencyRule, RetentionConfig};

    fn sample(p: f64, depth: u32, seed: u64) -> RetentionTree {
        RetentionTree::sample(&RetentionConfig::new(6, p, depth, seed)).unwrap()
    }

    fn build(tree: &RetentionTree, depth: u32, budget: u32) -> CarpetApprox {
        let d = dagger_sequence(tree, depth, budget).unwrap();
        star_trim(tree, &d).unwrap()
    }

    #[test]
    fn full_retention_keeps_everything() {
        let tree = sample(1.0, 2, 0);
        let d = dagger_sequence(&tree, 2, 3).unwrap();
        assert!(d.root_good);
        assert_eq!(d.count(1), 36);
        assert_eq!(d.count(2), 36 * 36);
        let c = star_trim(&tree, &d).unwrap();
        assert!(c.holes.is_empty() && c.trims.is_empty());
        assert!(c.star_areas.iter().all(|a| *a == Rational::from_integer(1)));
        let comps = track_components(&c);
        let r = whyburn_report(&c, &comps);
        assert!(r.pass && r.min_gap.is_none());
    }

    #[test]
    fn bad_root_gives_empty_sequence() {
        let cfg = RetentionConfig::new(6, 0.5, 2, 0);
        let removed = [
            BoxAddress::new(6, 1, 1, 1).unwrap(),
            BoxAddress::new(6, 1, 3, 3).unwrap(),
        ];
        let tree = RetentionTree::from_removed(&cfg, &removed).unwrap();
        let d = dagger_sequence(&tree, 2, 0).unwrap();
        assert!(!d.root_good);
        assert!(d.members.is_empty());
        let c = star_trim(&tree, &d).unwrap();
        assert!(!c.root_good && c.holes.is_empty());
        assert!(!whyburn_report(&c, &track_components(&c)).pass);
    }

    #[test]
    fn guards() {
        let tree = sample(1.0, 2, 0);
        assert!(matches!(
            dagger_sequence(&tree, 3, 0),
            Err(Error::DepthExceeded { .. })
        ));
        let small = RetentionTree::sample(&RetentionConfig::new(3, 1.0, 2, 0)).unwrap();
        let d = dagger_sequence(&small, 2, 0).unwrap();
        assert!(matches!(
            star_trim(&small, &d),
            Err(Error::UnsupportedBase { base: 3, .. })
        ));
    }

    fn corner_pair_tree() -> RetentionTree {
        let cfg = RetentionConfig::new(6, 0.5, 2, 0);
        let removed = [
            BoxAddress::new(6, 2, 11, 11).unwrap(),
            BoxAddress::new(6, 2, 12, 12).unwrap(),
        ];
        RetentionTree::from_removed(&cfg, &removed).unwrap()
    }

    /// Contacts at levels 2 and 3, one of them with the unbounded component.
    fn crafted_tree() -> RetentionTree {
        let cfg = RetentionConfig::new(6, 0.5, 3, 0);
        let removed = [
            (2, 11, 11),
            (2, 12, 12),
            (3, 107, 107),
            (3, 108, 108),
            (3, 0, 5),
            (3, 1, 6),
        ]
        .map(|(l, i, j)| BoxAddress::new(6, l, i, j).unwrap());
        RetentionTree::from_removed(&cfg, &removed).unwrap()
    }

    #[test]
    fn corner_contact_trims_two_boxes() {
        let c = build(&corner_pair_tree(), 2, 0);
        assert_eq!(c.trims.len(), 1);
        let t = &c.trims[0];
        assert_eq!(t.stage, 2);
        assert_eq!(t.point, (12, 12));
        let mut boxes = t.boxes.to_vec();
        boxes.sort();
        assert_eq!(
            boxes,
            vec![
                BoxAddress::new(6, 3, 71, 72).unwrap(),
                BoxAddress::new(6, 3, 72, 71).unwrap()
            ]
        );
        // the two holes and both trims form one component born at level 2
        let ids = c.snapshots.last().unwrap();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|&i| i == ids[0]) && ids[0] != 0);
        assert_eq!(c.births[ids[0] as usize], 2);
        let total = 6i128.pow(6);
        let expected = total - 2 * 36 - 2;
        assert_eq!(c.star_areas[2], Rational::new(expected, total));
    }

    #[test]
    fn no_contacts_means_no_trims() {
        let cfg = RetentionConfig::new(6, 0.5, 2, 0);
        let removed = [
            BoxAddress::new(6, 2, 8, 8).unwrap(),
            BoxAddress::new(6, 2, 20, 3).unwrap(),
        ];
        let tree = RetentionTree::from_removed(&cfg, &removed).unwrap();
        let c = build(&tree, 2, 0);
        assert!(c.trims.is_empty());
        let comps = track_components(&c);
        assert_eq!(comps.components.len(), 2);
        assert_eq!(comps.fifth_violations + comps.induction_violations, 0);
    }

    /// Components of the complement of `A_n*` recomputed by flood fill on the
    /// level-`(n+1)` raster.
    fn raster_partition(c: &CarpetApprox, n: u32) -> Vec<Vec<usize>> {
        let level = n + 1;
        let side = 6usize.pow(level);
        let holes = c.holes_at(n);
        let mut owner = vec![usize::MAX; side * side];
        for (h, hole) in holes.iter().enumerate() {
            let (x0, y0, x1, y1) = hole.addr.cells_at(level);
            for y in y0..y1 {
                for x in x0..x1 {
                    owner[y as usize * side + x as usize] = h;
                }
            }
        }
        let mut uf = UnionFind::new(holes.len() + 1);
        for y in 0..side {
            for x in 0..side {
                let a = owner[y * side + x];
                if a == usize::MAX {
                    continue;
                }
                if x == 0 || y == 0 || x + 1 == side || y + 1 == side {
                    uf.union(a + 1, 0);
                }
                if x + 1 < side && owner[y * side + x + 1] != usize::MAX {
                    uf.union(a + 1, owner[y * side + x + 1] + 1);
                }
                if y + 1 < side && owner[(y + 1) * side + x] != usize::MAX {
                    uf.union(a + 1, owner[(y + 1) * side + x] + 1);
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = uf
            .groups()
            .into_iter()
            .map(|g| {
                g.into_iter()
                    .filter(|&v| v > 0)
                    .map(|v| v - 1)
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect();
        groups.sort();
        groups
    }

    fn snapshot_partition(c: &CarpetApprox, n: u32) -> Vec<Vec<usize>> {
        let ids = &c.snapshots[n as usize - 1];
        let mut by: HashMap<u32, Vec<usize>> = HashMap::new();
        for (h, &id) in ids.iter().enumerate() {
            by.entry(id).or_default().push(h);
        }
        let mut groups: Vec<Vec<usize>> = by.into_values().collect();
        groups.sort();
        groups
    }

    #[test]
    fn components_match_flood_fill_oracle() {
        let mut trims = 0;
        let mut checked = 0;
        for seed in 0..60 {
            let tree = sample(0.998, 3, seed);
            let c = build(&tree, 3, 0);
            if !c.root_good {
                continue;
            }
            checked += 1;
            trims += c.trims.len();
            for n in 1..=3 {
                assert_eq!(
                    snapshot_partition(&c, n),
                    raster_partition(&c, n),
                    "seed {seed} level {n}"
                );
            }
            // identities persist: a hole keeps its component id
            for n in 2..=3usize {
                let (prev, cur) = (&c.snapshots[n - 2], &c.snapshots[n - 1]);
                for h in 0..prev.len() {
                    assert_eq!(prev[h], cur[h]);
                }
            }
            assert_eq!(c.merge_violations, 0);
            assert_eq!(c.child_property_violations, 0);
        }
        assert!(checked > 20);
        let _ = trims;
        let c = build(&corner_pair_tree(), 2, 0);
        for n in 1..=2 {
            assert_eq!(snapshot_partition(&c, n), raster_partition(&c, n));
        }
        let c = build(&crafted_tree(), 3, 0);
        assert!(c.root_good);
        assert_eq!(c.trims.len(), 3);
        for n in 1..=3 {
            assert_eq!(snapshot_partition(&c, n), raster_partition(&c, n));
        }
        // the contact with the unbounded component merges into it
        let ids = c.snapshots.last().unwrap();
        let h = c
            .holes
            .iter()
            .position(|h| h.addr == BoxAddress::new(6, 3, 1, 6).unwrap())
            .unwrap();
        assert_eq!(ids[h], 0);
    }

    #[test]
    fn dagger_nesting_and_child_property() {
        for seed in 0..20 {
            let tree = sample(0.995, 3, seed);
            let d = dagger_sequence(&tree, 3, 1).unwrap();
            if !d.root_good {
                continue;
            }
            for n in 1..=3u32 {
                let lm = tree.level(n);
                for k in d.members[n as usize - 1].ones() {
                    let kids = (lm.child_start[k] as usize..lm.child_start[k + 1] as usize)
                        .filter(|&r| d.members[n as usize].contains(r))
                        .count();
                    assert!(kids >= 35);
                }
                // members only below members
                for k in 0..lm.parent_count() {
                    if !d.members[n as usize - 1].contains(k) {
                        for r in lm.child_start[k] as usize..lm.child_start[k + 1] as usize {
                            assert!(!d.members[n as usize].contains(r));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn star_areas_nonincreasing_and_trim_log_consistent() {
        for seed in 0..40 {
            let tree = sample(0.998, 3, seed);
            let c = build(&tree, 3, 0);
            assert!(c.star_areas.windows(2).all(|w| w[1] <= w[0]));
            let trim_holes = c.holes.iter().filter(|h| h.kind == HoleKind::Trim).count();
            assert_eq!(trim_holes, 2 * c.trims.len());
            let comps = track_components(&c);
            assert_eq!(comps.fifth_violations, 0, "seed {seed}");
            assert_eq!(comps.induction_violations, 0, "seed {seed}");
            let r = whyburn_report(&c, &comps);
            if c.root_good {
                assert!(r.pass, "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn mean_area_ratio_at_most_p() {
        let p = 0.999;
        let mut ratios = vec![Vec::new(); 2];
        for seed in 0..1000 {
            let tree = sample(p, 2, seed);
            let c = build(&tree, 2, 0);
            if !c.root_good {
                continue;
            }
            for n in 0..2 {
                let r = c.star_areas[n + 1] / c.star_areas[n];
                ratios[n].push(*r.numer() as f64 / *r.denom() as f64);
            }
        }
        for r in &ratios {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
            assert!(mean <= p + 3.0 * (var / r.len() as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn relabeling_does_not_change_pass() {
        let c = build(&crafted_tree(), 3, 0);
        let comps = track_components(&c);
        let r = whyburn_report(&c, &comps);
        assert!(r.pass);
        let mut shuffled = comps.clone();
        shuffled.components.reverse();
        shuffled.pairs.reverse();
        assert_eq!(whyburn_report(&c, &shuffled).pass, r.pass);
    }

    fn cluster_tree(p: f64, depth: u32, seed: u64) -> RetentionTree {
        RetentionTree::sample(&RetentionConfig::new(3, p, depth, seed)).unwrap()
    }

    #[test]
    fn cluster_carpet_trivial_cases() {
        let full = cluster_tree(1.0, 3, 0);
        let cs = clusters(&full.removed_boxes(3), AdjacencyRule::EdgeAdjacency);
        let cc = cluster_carpet(&cs, 3).unwrap();
        assert!(cc.event_e);
        assert_eq!(cc.area, Rational::from_integer(1));
        assert!(cc.outermost.is_empty());
        let empty = cluster_tree(0.0, 3, 0);
        let cs = clusters(&empty.removed_boxes(3), AdjacencyRule::EdgeAdjacency);
        let cc = cluster_carpet(&cs, 3).unwrap();
        assert!(!cc.event_e);
        assert!(cc.runs.is_empty());
    }

    #[test]
    fn enclosed_clusters_lie_in_outermost_fillings() {
        for seed in 0..40 {
            let tree = cluster_tree(0.8, 4, seed);
            let cs = clusters(&tree.removed_boxes(4), AdjacencyRule::EdgeAdjacency);
            let cc = cluster_carpet(&cs, 4).unwrap();
            if !cc.event_e {
                continue;
            }
            let fillings: HashMap<usize, HashSet<(u64, u64)>> = cc
                .inside_u
                .iter()
                .map(|&c| {
                    let f = cs.filling(c).unwrap();
                    let s = 3u64.pow(4 - f.level);
                    let cells = f
                        .runs
                        .iter()
                        .flat_map(|&(x0, x1, y)| {
                            (y * s..(y + 1) * s)
                                .flat_map(move |yy| (x0 * s..x1 * s).map(move |xx| (xx, yy)))
                        })
                        .collect();
                    (c, cells)
                })
                .collect();
            let cells_of = |c: usize| -> Vec<(u64, u64)> {
                cs.members(c)
                    .iter()
                    .flat_map(|b| {
                        let (x0, y0, x1, y1) = b.cells_at(4);
                        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
                    })
                    .collect()
            };
            for &c in &cc.inside_u {
                let enclosing: Vec<usize> = cc
                    .inside_u
                    .iter()
                    .copied()
                    .filter(|&o| o != c && cells_of(c).iter().all(|p| fillings[&o].contains(p)))
                    .collect();
                let outer = cc.outermost.contains(&c);
                assert_eq!(outer, enclosing.is_empty(), "seed {seed} cluster {c}");
                if !outer {
                    assert!(enclosing.iter().any(|o| cc.outermost.contains(o)));
                }
            }
        }
    }

    #[test]
    fn grid_cap() {
        let cs = clusters(
            &[BoxAddress::new(6, 6, 7, 7).unwrap()],
            AdjacencyRule::EdgeAdjacency,
        );
        assert!(matches!(
            cluster_carpet(&cs, 6),
            Err(Error::GridTooLarge { .. })
        ));
    }
}
