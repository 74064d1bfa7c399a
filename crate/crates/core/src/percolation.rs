//! Mandelbrot fractal percolation on the N-adic hierarchy.
//!
//! A [`RetentionTree`] records the marks `σ_B` of every child of every
//! retained box down to a fixed depth. Level `n` is stored as one bit per
//! child of each retained level-`(n−1)` box, in parent-rank order, so the
//! retained boxes of a level are addressed by their rank. Marks below a
//! removed box are never drawn.
//!
//! Removed boxes (maximal boxes with `σ_B = 0`) are grouped into clusters by
//! [`clusters`]; each cluster has a filling and an outer boundary computed on
//! the finest grid spanned by the cluster.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::boxlattice::{checked_pow, rational_str, BoxAddress, Rational, Rect};
use crate::error::{Error, Result};
use crate::rng::MarkSource;
use crate::unionfind::UnionFind;

pub const DEFAULT_MAX_DEPTH: u32 = 12;
/// Upper bound on the number of marks drawn for one tree.
pub const DEFAULT_BOX_BUDGET: u64 = 1 << 31;

fn default_max_depth() -> u32 {
    DEFAULT_MAX_DEPTH
}

fn default_box_budget() -> u64 {
    DEFAULT_BOX_BUDGET
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    pub base: u32,
    pub p: f64,
    pub depth: u32,
    pub seed: u64,
    #[serde(default = "default_max_depth")]
    pub max_depth: u32,
    #[serde(default = "default_box_budget")]
    pub box_budget: u64,
}

impl RetentionConfig {
    pub fn new(base: u32, p: f64, depth: u32, seed: u64) -> Self {
        RetentionConfig {
            base,
            p,
            depth,
            seed,
            max_depth: DEFAULT_MAX_DEPTH,
            box_budget: DEFAULT_BOX_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.base < 2 {
            bad.push(format!("base = {} must be at least 2", self.base));
        }
        if !(0.0..=1.0).contains(&self.p) {
            bad.push(format!("p = {} must lie in [0, 1]", self.p));
        }
        if self.depth < 1 {
            bad.push("depth must be at least 1".to_string());
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        if self.depth > self.max_depth {
            return Err(Error::DepthExceeded {
                requested: self.depth,
                limit: self.max_depth,
            });
        }
        // parents up to level depth−1 need 64-bit stream identifiers
        let deepest_parent = BoxAddress {
            base: self.base,
            level: self.depth - 1,
            i: 0,
            j: 0,
        };
        if deepest_parent.canonical_code().is_none() || checked_pow(self.base, self.depth).is_none()
        {
            return Err(Error::DepthExceeded {
                requested: self.depth,
                limit: self.depth - 1,
            });
        }
        Ok(())
    }
}

/// Marks of one level: bit `k·N² + c` is `σ` of child `c` of the `k`-th
/// retained box of the previous level.
#[derive(Clone, Debug)]
pub struct LevelMarks {
    pub marks: FixedBitSet,
    /// `child_start[k]..child_start[k+1]` are the ranks (at this level) of the
    /// retained children of parent `k`.
    pub child_start: Vec<u32>,
}

impl LevelMarks {
    pub fn count(&self) -> usize {
        *self.child_start.last().unwrap_or(&0) as usize
    }

    pub fn parent_count(&self) -> usize {
        self.child_start.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct RetentionTree {
    pub config: RetentionConfig,
    levels: Vec<LevelMarks>,
}

fn child_coords(base: u32, i: u64, j: u64, c: usize) -> (u64, u64) {
    let n = base as u64;
    (i * n + (c as u64 % n), j * n + (c as u64 / n))
}

impl RetentionTree {
    fn build<F>(config: RetentionConfig, mut marks_of: F) -> Result<Self>
    where
        F: FnMut(&BoxAddress, &mut Vec<bool>),
    {
        config.validate()?;
        let base = config.base;
        let n2 = (base * base) as usize;
        let mut parents: Vec<(u64, u64)> = vec![(0, 0)];
        let mut levels = Vec::with_capacity(config.depth as usize);
        let mut drawn: u64 = 0;
        let mut buf = Vec::with_capacity(n2);
        for n in 1..=config.depth {
            drawn += (parents.len() * n2) as u64;
            if drawn > config.box_budget || drawn > u32::MAX as u64 {
                return Err(Error::BoxBudgetExceeded {
                    boxes: drawn,
                    budget: config.box_budget.min(u32::MAX as u64),
                });
            }
            let mut marks = FixedBitSet::with_capacity(parents.len() * n2);
            let mut child_start = Vec::with_capacity(parents.len() + 1);
            let keep_next = n < config.depth;
            let mut next = Vec::new();
            let mut count: u32 = 0;
            for (k, &(i, j)) in parents.iter().enumerate() {
                child_start.push(count);
                let parent = BoxAddress {
                    base,
                    level: n - 1,
                    i,
                    j,
                };
                marks_of(&parent, &mut buf);
                for (c, &s) in buf.iter().enumerate() {
                    if s {
                        marks.insert(k * n2 + c);
                        count += 1;
                        if keep_next {
                            next.push(child_coords(base, i, j, c));
                        }
                    }
                }
            }
            child_start.push(count);
            levels.push(LevelMarks { marks, child_start });
            parents = next;
        }
        Ok(RetentionTree { config, levels })
    }

    /// Draws the marks of `config` from the counter-based generator.
    pub fn sample(config: &RetentionConfig) -> Result<Self> {
        let src = MarkSource::new(config.seed, config.p);
        Self::build(config.clone(), |parent, out| src.child_marks(parent, out))
    }

    /// Rebuilds a tree from its maximal removed boxes (the inverse of
    /// [`RetentionTree::removed_boxes`]).
    pub fn from_removed(config: &RetentionConfig, removed: &[BoxAddress]) -> Result<Self> {
        let set: HashSet<BoxAddress> = removed.iter().copied().collect();
        Self::build(config.clone(), |parent, out| {
            out.clear();
            out.extend(parent.subdivide().iter().map(|c| !set.contains(c)));
        })
    }

    pub fn depth(&self) -> u32 {
        self.config.depth
    }

    pub fn base(&self) -> u32 {
        self.config.base
    }

    /// Marks of level `n` (1 ≤ n ≤ depth).
    pub fn level(&self, n: u32) -> &LevelMarks {
        &self.levels[n as usize - 1]
    }

    /// Number of boxes in `A_n`.
    pub fn count(&self, n: u32) -> usize {
        if n == 0 {
            1
        } else {
            self.level(n).count()
        }
    }

    /// Exact area of `A_n`.
    pub fn area(&self, n: u32) -> Rational {
        let side = i128::from(self.base()).pow(n);
        Rational::new(self.count(n) as i128, side * side)
    }

    /// Coordinates of the retained boxes of level `n`, in rank order.
    pub fn level_coords(&self, n: u32) -> Result<Vec<(u64, u64)>> {
        self.check_level(n)?;
        let mut coords = vec![(0u64, 0u64)];
        for l in 1..=n {
            coords = self.children_coords(l, &coords);
        }
        Ok(coords)
    }

    /// Given the rank-ordered coordinates of level `l−1`, the coordinates of
    /// level `l`.
    pub fn children_coords(&self, l: u32, parents: &[(u64, u64)]) -> Vec<(u64, u64)> {
        let lm = self.level(l);
        let n2 = (self.base() * self.base()) as usize;
        let mut out = Vec::with_capacity(lm.count());
        for (k, &(i, j)) in parents.iter().enumerate() {
            for c in 0..n2 {
                if lm.marks.contains(k * n2 + c) {
                    out.push(child_coords(self.base(), i, j, c));
                }
            }
        }
        out
    }

    fn check_level(&self, n: u32) -> Result<()> {
        if n > self.depth() {
            return Err(Error::DepthExceeded {
                requested: n,
                limit: self.depth(),
            });
        }
        Ok(())
    }

    /// `A_n` as a list of level-`n` boxes.
    pub fn retained_set(&self, n: u32) -> Result<Vec<BoxAddress>> {
        let base = self.base();
        Ok(self
            .level_coords(n)?
            .into_iter()
            .map(|(i, j)| BoxAddress {
                base,
                level: n,
                i,
                j,
            })
            .collect())
    }

    /// Rank of `addr` among the retained boxes of its level, if retained.
    pub fn rank_of(&self, addr: &BoxAddress) -> Option<usize> {
        if addr.base != self.base() || addr.level > self.depth() {
            return None;
        }
        let n2 = (self.base() * self.base()) as usize;
        let mut rank = 0usize;
        for l in 1..=addr.level {
            let c = addr.ancestor(l)?.child_index() as usize;
            let lm = self.level(l);
            let bit = rank * n2 + c;
            if !lm.marks.contains(bit) {
                return None;
            }
            rank = lm.child_start[rank] as usize + lm.marks.count_ones(rank * n2..bit);
        }
        Some(rank)
    }

    /// Maximal boxes with `σ = 0`, at levels ≤ `up_to`.
    pub fn removed_boxes(&self, up_to: u32) -> Vec<BoxAddress> {
        let base = self.base();
        let n2 = (base * base) as usize;
        let mut out = Vec::new();
        let mut parents = vec![(0u64, 0u64)];
        for l in 1..=up_to.min(self.depth()) {
            let lm = self.level(l);
            for (k, &(i, j)) in parents.iter().enumerate() {
                for c in 0..n2 {
                    if !lm.marks.contains(k * n2 + c) {
                        let (ci, cj) = child_coords(base, i, j, c);
                        out.push(BoxAddress {
                            base,
                            level: l,
                            i: ci,
                            j: cj,
                        });
                    }
                }
            }
            if l < up_to.min(self.depth()) {
                parents = self.children_coords(l, &parents);
            }
        }
        out
    }

    /// Per-level statistics of this sample.
    pub fn stats(&self) -> Vec<LevelStats> {
        let removed = self.removed_boxes(self.depth());
        (0..=self.depth())
            .map(|n| LevelStats {
                seed: self.config.seed,
                base: self.base(),
                p: self.config.p,
                depth: self.depth(),
                level: n,
                retained_boxes: self.count(n),
                removed_boxes: removed.iter().filter(|b| b.level == n).count(),
                area: self.area(n),
            })
            .collect()
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            version: DOCUMENT_VERSION,
            kind: "retention-tree".to_string(),
            config: self.config.clone(),
            removed: self
                .removed_boxes(self.depth())
                .iter()
                .map(|b| [b.level as u64, b.i, b.j])
                .collect(),
        }
    }

    pub fn from_document(doc: &TreeDocument) -> Result<Self> {
        let base = doc.config.base;
        let removed: Vec<BoxAddress> = doc
            .removed
            .iter()
            .map(|&[l, i, j]| BoxAddress::new(base, l as u32, i, j))
            .collect::<Result<_>>()?;
        Self::from_removed(&doc.config, &removed)
    }
}

pub const DOCUMENT_VERSION: u32 = 1;

/// Versioned JSON form of a tree: its configuration and maximal removed boxes
/// as `[level, i, j]` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub version: u32,
    pub kind: String,
    pub config: RetentionConfig,
    pub removed: Vec<[u64; 3]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelStats {
    pub seed: u64,
    pub base: u32,
    pub p: f64,
    pub depth: u32,
    pub level: u32,
    pub retained_boxes: usize,
    pub removed_boxes: usize,
    #[serde(with = "rational_str")]
    pub area: Rational,
}

/// Writes per-seed level statistics as CSV.
pub fn write_stats_csv<W: Write>(mut w: W, rows: &[LevelStats]) -> Result<()> {
    writeln!(
        w,
        "seed,N,p,depth,level,retained_boxes,removed_boxes,area,area_f64"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}/{},{:.12}",
            r.seed,
            r.base,
            r.p,
            r.depth,
            r.level,
            r.retained_boxes,
            r.removed_boxes,
            r.area.numer(),
            r.area.denom(),
            *r.area.numer() as f64 / *r.area.denom() as f64
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Removed-box clusters

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyRule {
    /// Connected iff the boxes share a boundary segment of positive length.
    EdgeAdjacency,
    /// Edge adjacency, plus corner-touching pairs whose corner lies in a
    /// third removed box.
    CornerClosure,
}

/// Two removed boxes whose closures meet at exactly one corner point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerContact {
    /// Indices into [`ClusterSet::boxes`].
    pub boxes: (usize, usize),
    /// The contact point in cells of the finest level present.
    pub point: (u64, u64),
    /// Whether another removed box contains the point.
    pub resolved: bool,
}

#[derive(Clone, Debug)]
pub struct ClusterSet {
    pub base: u32,
    pub rule: AdjacencyRule,
    /// Finest level among the boxes; contact points are in its cells.
    pub fine_level: u32,
    /// Input boxes, sorted and deduplicated.
    pub boxes: Vec<BoxAddress>,
    /// Cluster index of every box.
    pub cluster_of: Vec<usize>,
    /// Member indices per cluster, ordered by smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub corner_contacts: Vec<CornerContact>,
}

/// Lookup from fine cells to the box covering them.
pub(crate) struct CellOwner {
    base: u32,
    fine: u32,
    side: u64,
    index: HashMap<BoxAddress, usize>,
    levels: Vec<u32>,
}

impl CellOwner {
    pub(crate) fn new(base: u32, fine: u32, boxes: &[BoxAddress]) -> Self {
        let mut levels: Vec<u32> = boxes.iter().map(|b| b.level).collect();
        levels.sort_unstable();
        levels.dedup();
        CellOwner {
            base,
            fine,
            side: checked_pow(base, fine).expect("fine level fits"),
            index: boxes.iter().enumerate().map(|(k, b)| (*b, k)).collect(),
            levels,
        }
    }

    pub(crate) fn side(&self) -> u64 {
        self.side
    }

    /// Box covering fine cell `(x, y)`; coordinates outside the unit square
    /// have no owner.
    pub(crate) fn owner(&self, x: i64, y: i64) -> Option<usize> {
        if x < 0 || y < 0 || x as u64 >= self.side || y as u64 >= self.side {
            return None;
        }
        let cell = BoxAddress {
            base: self.base,
            level: self.fine,
            i: x as u64,
            j: y as u64,
        };
        self.levels
            .iter()
            .find_map(|&l| self.index.get(&cell.ancestor(l)?).copied())
    }
}

fn fine_rect(b: &BoxAddress, fine: u32) -> (i64, i64, i64, i64) {
    let (x0, y0, x1, y1) = b.cells_at(fine);
    (x0 as i64, y0 as i64, x1 as i64, y1 as i64)
}

/// Visits every box edge-adjacent to box `k`.
pub(crate) fn for_each_edge_neighbour<F: FnMut(usize)>(
    owner: &CellOwner,
    boxes: &[BoxAddress],
    k: usize,
    mut f: F,
) {
    let (x0, y0, x1, y1) = fine_rect(&boxes[k], owner.fine);
    // cells just outside each edge; skip ahead past each neighbour found
    let scan = |fixed: i64, lo: i64, hi: i64, vertical: bool, f: &mut F| {
        let mut t = lo;
        while t < hi {
            let (x, y) = if vertical { (fixed, t) } else { (t, fixed) };
            match owner.owner(x, y) {
                Some(o) => {
                    f(o);
                    let (ox0, oy0, ox1, oy1) = fine_rect(&boxes[o], owner.fine);
                    let _ = (ox0, oy0);
                    t = if vertical { oy1 } else { ox1 };
                }
                None => t += 1,
            }
        }
    };
    scan(x1, y0, y1, true, &mut f);
    scan(x0 - 1, y0, y1, true, &mut f);
    scan(y1, x0, x1, false, &mut f);
    scan(y0 - 1, x0, x1, false, &mut f);
}

/// Corner-only contacts of box `k`: `(other box, point, third box present)`.
pub(crate) fn corner_contacts_of(
    owner: &CellOwner,
    boxes: &[BoxAddress],
    k: usize,
) -> Vec<(usize, (i64, i64), bool)> {
    let (x0, y0, x1, y1) = fine_rect(&boxes[k], owner.fine);
    let side = owner.side() as i64;
    let mut out = Vec::new();
    // (corner, diagonal cell, two off-diagonal cells)
    let corners = [
        ((x1, y1), (x1, y1), (x1, y1 - 1), (x1 - 1, y1)),
        ((x0, y1), (x0 - 1, y1), (x0 - 1, y1 - 1), (x0, y1)),
        ((x0, y0), (x0 - 1, y0 - 1), (x0 - 1, y0), (x0, y0 - 1)),
        ((x1, y0), (x1, y0 - 1), (x1, y0), (x1 - 1, y0 - 1)),
    ];
    for (p, diag, a, b) in corners {
        if p.0 <= 0 || p.1 <= 0 || p.0 >= side || p.1 >= side {
            continue;
        }
        let Some(other) = owner.owner(diag.0, diag.1) else {
            continue;
        };
        let oa = owner.owner(a.0, a.1);
        let ob = owner.owner(b.0, b.1);
        if oa == Some(other) || ob == Some(other) {
            continue; // shares an edge with `other`
        }
        let third = oa.is_some() || ob.is_some();
        out.push((other, p, third));
    }
    out
}

/// Partitions removed boxes (pairwise disjoint interiors) into clusters.
pub fn clusters(removed: &[BoxAddress], rule: AdjacencyRule) -> ClusterSet {
    let mut boxes: Vec<BoxAddress> = removed.to_vec();
    boxes.sort_by_key(|b| (b.level, b.j, b.i));
    boxes.dedup();
    let base = boxes.first().map(|b| b.base).unwrap_or(2);
    let fine = boxes.iter().map(|b| b.level).max().unwrap_or(0);
    let owner = CellOwner::new(base, fine, &boxes);
    let mut uf = UnionFind::new(boxes.len());
    for k in 0..boxes.len() {
        for_each_edge_neighbour(&owner, &boxes, k, |o| {
            uf.union(k, o);
        });
    }
    let mut contacts = Vec::new();
    let mut seen = HashSet::new();
    for k in 0..boxes.len() {
        for (other, p, third) in corner_contacts_of(&owner, &boxes, k) {
            let key = (k.min(other), k.max(other), p);
            if !seen.insert(key) {
                continue;
            }
            if rule == AdjacencyRule::CornerClosure && third {
                uf.union(k, other);
            }
            contacts.push(CornerContact {
                boxes: (key.0, key.1),
                point: (p.0 as u64, p.1 as u64),
                resolved: third,
            });
        }
    }
    contacts.sort_by_key(|c| (c.point, c.boxes));
    let groups = uf.groups();
    let mut cluster_of = vec![0; boxes.len()];
    for (c, g) in groups.iter().enumerate() {
        for &m in g {
            cluster_of[m] = c;
        }
    }
    ClusterSet {
        base,
        rule,
        fine_level: fine,
        boxes,
        cluster_of,
        clusters: groups,
        corner_contacts: contacts,
    }
}

/// Filling of a cluster and its outer boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Filling {
    pub level: u32,
    /// Filling as row runs `[x0, x1) × [y, y+1)` in cells of `level`.
    pub runs: Vec<(u64, u64, u64)>,
    pub cells: u64,
    #[serde(with = "rational_str")]
    pub area: Rational,
    #[serde(with = "rational_str")]
    pub cluster_area: Rational,
    /// Closed loop of lattice points (first point repeated at the end), in
    /// cells of `level`, with collinear points removed.
    pub boundary: Vec<(u64, u64)>,
}

impl Filling {
    pub fn has_holes(&self) -> bool {
        self.area > self.cluster_area
    }

    pub fn rects(&self, base: u32) -> Vec<Rect> {
        let d = i128::from(base).pow(self.level);
        self.runs
            .iter()
            .map(|&(x0, x1, y)| Rect {
                x0: Rational::new(x0 as i128, d),
                y0: Rational::new(y as i128, d),
                x1: Rational::new(x1 as i128, d),
                y1: Rational::new(y as i128 + 1, d),
            })
            .collect()
    }
}

/// Flood-fills the complement of the cluster from outside its bounding box;
/// the filling is everything not reached.
pub fn filling_and_outer_boundary(members: &[BoxAddress]) -> Result<Filling> {
    let first = members.first().ok_or(Error::EmptyRegion("empty cluster"))?;
    let base = first.base;
    let level = members.iter().map(|b| b.level).max().unwrap();
    let rects: Vec<_> = members.iter().map(|b| b.cells_at(level)).collect();
    let bx0 = rects.iter().map(|r| r.0).min().unwrap();
    let by0 = rects.iter().map(|r| r.1).min().unwrap();
    let bx1 = rects.iter().map(|r| r.2).max().unwrap();
    let by1 = rects.iter().map(|r| r.3).max().unwrap();
    // raster with a one-cell margin; raster (u, v) is cell (bx0+u−1, by0+v−1)
    let w = (bx1 - bx0 + 2) as usize;
    let h = (by1 - by0 + 2) as usize;
    let mut cluster = vec![false; w * h];
    let mut cluster_cells: u64 = 0;
    for &(x0, y0, x1, y1) in &rects {
        for y in y0..y1 {
            for x in x0..x1 {
                let idx = (y - by0 + 1) as usize * w + (x - bx0 + 1) as usize;
                if !cluster[idx] {
                    cluster[idx] = true;
                    cluster_cells += 1;
                }
            }
        }
    }
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::from([0usize]);
    outside[0] = true;
    while let Some(idx) = queue.pop_front() {
        let (u, v) = (idx % w, idx / w);
        let mut visit = |nu: usize, nv: usize| {
            let n = nv * w + nu;
            if !outside[n] && !cluster[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        };
        if u > 0 {
            visit(u - 1, v);
        }
        if u + 1 < w {
            visit(u + 1, v);
        }
        if v > 0 {
            visit(u, v - 1);
        }
        if v + 1 < h {
            visit(u, v + 1);
        }
    }
    let mut runs = Vec::new();
    let mut cells = 0u64;
    for v in 0..h {
        let mut u = 0;
        while u < w {
            if !outside[v * w + u] {
                let start = u;
                while u < w && !outside[v * w + u] {
                    u += 1;
                }
                cells += (u - start) as u64;
                runs.push((
                    bx0 + start as u64 - 1,
                    bx0 + u as u64 - 1,
                    by0 + v as u64 - 1,
                ));
            } else {
                u += 1;
            }
        }
    }
    let inside = |u: i64, v: i64| -> bool {
        u >= 0
            && v >= 0
            && (u as usize) < w
            && (v as usize) < h
            && !outside[v as usize * w + u as usize]
    };
    // directed boundary edges with the filling on the left (counter-clockwise)
    let mut out_edges: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    let mut n_edges = 0usize;
    for v in 0..h as i64 {
        for u in 0..w as i64 {
            if !inside(u, v) {
                continue;
            }
            // vertices are raster corners; cell (u,v) spans (u,v)-(u+1,v+1)
            if !inside(u, v - 1) {
                out_edges.entry((u, v)).or_default().push((u + 1, v));
                n_edges += 1;
            }
            if !inside(u + 1, v) {
                out_edges
                    .entry((u + 1, v))
                    .or_default()
                    .push((u + 1, v + 1));
                n_edges += 1;
            }
            if !inside(u, v + 1) {
                out_edges
                    .entry((u + 1, v + 1))
                    .or_default()
                    .push((u, v + 1));
                n_edges += 1;
            }
            if !inside(u - 1, v) {
                out_edges.entry((u, v + 1)).or_default().push((u, v));
                n_edges += 1;
            }
        }
    }
    for list in out_edges.values_mut() {
        list.sort_unstable();
    }
    let start = *out_edges
        .keys()
        .min()
        .expect("nonempty filling has a boundary");
    // Hierholzer: a single closed walk through every boundary edge
    let mut stack = vec![start];
    let mut circuit = Vec::with_capacity(n_edges + 1);
    while let Some(&top) = stack.last() {
        match out_edges.get_mut(&top).and_then(|l| l.pop()) {
            Some(next) => stack.push(next),
            None => circuit.push(stack.pop().unwrap()),
        }
    }
    circuit.reverse();
    debug_assert_eq!(circuit.len(), n_edges + 1);
    let mut boundary: Vec<(i64, i64)> = Vec::with_capacity(circuit.len());
    for &p in &circuit {
        if boundary.len() >= 2 {
            let a = boundary[boundary.len() - 2];
            let b = boundary[boundary.len() - 1];
            if (b.0 - a.0) * (p.1 - b.1) == (b.1 - a.1) * (p.0 - b.0)
                && (b.0 - a.0) * (p.0 - b.0) + (b.1 - a.1) * (p.1 - b.1) > 0
            {
                boundary.pop();
            }
        }
        boundary.push(p);
    }
    let to_cells = |(u, v): (i64, i64)| ((bx0 as i64 + u - 1) as u64, (by0 as i64 + v - 1) as u64);
    let d = i128::from(base).pow(level);
    Ok(Filling {
        level,
        runs,
        cells,
        area: Rational::new(cells as i128, d * d),
        cluster_area: Rational::new(cluster_cells as i128, d * d),
        boundary: boundary.into_iter().map(to_cells).collect(),
    })
}

impl ClusterSet {
    pub fn members(&self, c: usize) -> Vec<BoxAddress> {
        self.clusters[c].iter().map(|&k| self.boxes[k]).collect()
    }

    pub fn filling(&self, c: usize) -> Result<Filling> {
        filling_and_outer_boundary(&self.members(c))
    }

    /// Corner contacts joining two different clusters.
    pub fn boundary_contacts(&self) -> impl Iterator<Item = &CornerContact> {
        self.corner_contacts
            .iter()
            .filter(|c| self.cluster_of[c.boxes.0] != self.cluster_of[c.boxes.1])
    }

    /// Partition as sorted sets of addresses, independent of input order.
    pub fn canonical_partition(&self) -> Vec<Vec<BoxAddress>> {
        let mut parts: Vec<Vec<BoxAddress>> =
            (0..self.clusters.len()).map(|c| self.members(c)).collect();
        for p in &mut parts {
            p.sort();
        }
        parts.sort();
        parts
    }

    pub fn to_document(&self) -> Result<ClusterDocument> {
        let clusters = (0..self.clusters.len())
            .map(|c| {
                let f = self.filling(c)?;
                Ok(ClusterEntry {
                    boxes: self
                        .members(c)
                        .iter()
                        .map(|b| [b.level as u64, b.i, b.j])
                        .collect(),
                    filling_level: f.level,
                    filling_area: f.area,
                    filling_runs: f.runs,
                    outer_boundary: f.boundary,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterDocument {
            version: DOCUMENT_VERSION,
            kind: "cluster-set".to_string(),
            base: self.base,
            rule: self.rule,
            fine_level: self.fine_level,
            clusters,
            corner_contacts: self.corner_contacts.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub boxes: Vec<[u64; 3]>,
    pub filling_level: u32,
    #[serde(with = "rational_str")]
    pub filling_area: Rational,
    pub filling_runs: Vec<(u64, u64, u64)>,
    pub outer_boundary: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDocument {
    pub version: u32,
    pub kind: String,
    pub base: u32,
    pub rule: AdjacencyRule,
    pub fine_level: u32,
    pub clusters: Vec<ClusterEntry>,
    pub corner_contacts: Vec<CornerContact>,
}
