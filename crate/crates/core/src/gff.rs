//! Discrete zero-boundary Gaussian free fields, harmonic extensions, the
//! multiscale decomposition, nice/bad vertices and the component harness.
//!
//! A field on an `n × n` grid lives on the interior sites `0..n`; every site
//! outside is a zero boundary value. The covariance is the inverse of the
//! Dirichlet Laplacian `Δ = 4 − adjacency`, with no extra constant.
//!
//! Sampling and Dirichlet solves are exact and use the sine eigenbasis of the
//! Laplacian: with `S` the orthonormal sine matrix and `λ_kl` the
//! eigenvalues, a field is `S_w (Z / √λ) S_h` and `Δ⁻¹B = S_w ((S_w B S_h) / λ) S_h`.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::unionfind::UnionFind;

pub const DEFAULT_GRID_CAP: usize = 128;
/// Largest system the dense Green-function oracle will invert.
pub const GREEN_ORACLE_CAP: usize = 4096;

struct SineBasis {
    s: DMatrix<f64>,
    /// `2cos(πk/(n+1))`, `k = 1..n`.
    twocos: Vec<f64>,
}

fn sine_basis(n: usize) -> Arc<SineBasis> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<SineBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(b) = cache.read().unwrap().get(&n) {
        return b.clone();
    }
    let h = (n + 1) as f64;
    let norm = (2.0 / h).sqrt();
    let s = DMatrix::from_fn(n, n, |i, k| {
        norm * (std::f64::consts::PI * ((i + 1) * (k + 1)) as f64 / h).sin()
    });
    let twocos = (1..=n)
        .map(|k| 2.0 * (std::f64::consts::PI * k as f64 / h).cos())
        .collect();
    let b = Arc::new(SineBasis { s, twocos });
    cache.write().unwrap().entry(n).or_insert(b).clone()
}

/// `Δ⁻¹ rhs` on a `w × h` rectangle with zero boundary.
fn solve_dirichlet(rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let (w, h) = rhs.shape();
    let bw = sine_basis(w);
    let bh = sine_basis(h);
    let mut t = &bw.s * rhs * &bh.s;
    for l in 0..h {
        for k in 0..w {
            t[(k, l)] /= 4.0 - bw.twocos[k] - bh.twocos[l];
        }
    }
    &bw.s * t * &bh.s
}

fn sample_rect(w: usize, h: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let bw = sine_basis(w);
    let bh = sine_basis(h);
    let mut z = DMatrix::<f64>::zeros(w, h);
    for l in 0..h {
        for k in 0..w {
            let g: f64 = rng.sample(StandardNormal);
            z[(k, l)] = g / (4.0 - bw.twocos[k] - bh.twocos[l]).sqrt();
        }
    }
    &bw.s * z * &bh.s
}

/// Values on the interior sites of an `n × n` grid, indexed `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    pub n: usize,
    pub values: DMatrix<f64>,
}

impl LatticeField {
    pub fn from_values(values: DMatrix<f64>) -> Result<LatticeField> {
        let (w, h) = values.shape();
        if w != h || w == 0 {
            return Err(Error::OutOfRange(format!(
                "field must be square, got {w}x{h}"
            )));
        }
        Ok(LatticeField { n: w, values })
    }

    /// Zero outside the grid.
    pub fn get(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.n as i64 || y >= self.n as i64 {
            0.0
        } else {
            self.values[(x as usize, y as usize)]
        }
    }

    /// Grid index of the lattice origin; relative coordinates run over
    /// `[−R, R]²` with `R = origin`.
    pub fn origin(&self) -> i64 {
        (self.n / 2) as i64
    }
}

pub fn sample_field(n: usize, seed: u64) -> Result<LatticeField> {
    sample_field_capped(n, seed, DEFAULT_GRID_CAP)
}

pub fn sample_field_capped(n: usize, seed: u64, cap: usize) -> Result<LatticeField> {
    if n > cap {
        return Err(Error::GridTooLarge { requested: n, cap });
    }
    if n == 0 {
        return Err(Error::OutOfRange("grid size must be positive".into()));
    }
    let mut rng = stream(seed);
    Ok(LatticeField {
        n,
        values: sample_rect(n, n, &mut rng),
    })
}

/// Dense `Δ⁻¹` on a `w × h` rectangle, site `(x, y)` at index `y·w + x`.
/// Computed by LU on the Laplacian, independently of the sine basis.
pub fn green_matrix(w: usize, h: usize) -> Result<DMatrix<f64>> {
    let m = w * h;
    if m > GREEN_ORACLE_CAP {
        return Err(Error::GridTooLarge {
            requested: m,
            cap: GREEN_ORACLE_CAP,
        });
    }
    let mut lap = DMatrix::<f64>::zeros(m, m);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            lap[(i, i)] = 4.0;
            if x + 1 < w {
                lap[(i, i + 1)] = -1.0;
                lap[(i + 1, i)] = -1.0;
            }
            if y + 1 < h {
                lap[(i, i + w)] = -1.0;
                lap[(i + w, i)] = -1.0;
            }
        }
    }
    lap.lu()
        .try_inverse()
        .ok_or_else(|| Error::OutOfRange("singular Laplacian".into()))
}

/// Rectangle of interior sites `[x0, x0+w) × [y0, y0+h)` in grid indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: i64,
    pub y0: i64,
    pub w: usize,
    pub h: usize,
}

impl Window {
    /// Lattice sites of the open box `B(c, r)`: `|x − c|∞ ≤ r − 1`.
    pub fn open_box(c: [i64; 2], r: i64) -> Window {
        Window {
            x0: c[0] - r + 1,
            y0: c[1] - r + 1,
            w: (2 * r - 1) as usize,
            h: (2 * r - 1) as usize,
        }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.w as i64 && y < self.y0 + self.h as i64
    }

    /// Window plus its boundary ring lies within the grid.
    fn check_inside(&self, n: usize) -> Result<()> {
        let n = n as i64;
        if self.w == 0 || self.h == 0 {
            return Err(Error::EmptyRegion("window has no sites"));
        }
        if self.x0 < 1
            || self.y0 < 1
            || self.x0 + self.w as i64 > n - 1
            || self.y0 + self.h as i64 > n - 1
        {
            return Err(Error::WindowAtBoundary(format!(
                "{self:?} in grid of side {n}"
            )));
        }
        Ok(())
    }

    fn contains_window(&self, o: &Window) -> bool {
        o.x0 >= self.x0
            && o.y0 >= self.y0
            && o.x0 + o.w as i64 <= self.x0 + self.w as i64
            && o.y0 + o.h as i64 <= self.y0 + self.h as i64
    }
}

/// Discrete harmonic function on `window` whose values on the outer ring
/// are `ring(x, y)` (grid coordinates).
pub fn harmonic_extension(window: &Window, ring: impl Fn(i64, i64) -> f64) -> DMatrix<f64> {
    let (w, h) = (window.w, window.h);
    let mut rhs = DMatrix::<f64>::zeros(w, h);
    for i in 0..w {
        let x = window.x0 + i as i64;
        rhs[(i, 0)] += ring(x, window.y0 - 1);
        rhs[(i, h - 1)] += ring(x, window.y0 + h as i64);
    }
    for j in 0..h {
        let y = window.y0 + j as i64;
        rhs[(0, j)] += ring(window.x0 - 1, y);
        rhs[(w - 1, j)] += ring(window.x0 + w as i64, y);
    }
    solve_dirichlet(&rhs)
}

/// Largest `|4u(x) − Σ_{y∼x} u(y)|` over the window, ring values from `ring`.
pub fn mean_value_residual(
    window: &Window,
    u: &DMatrix<f64>,
    ring: impl Fn(i64, i64) -> f64,
) -> f64 {
    let (w, h) = (window.w as i64, window.h as i64);
    let at = |i: i64, j: i64| {
        if i < 0 || j < 0 || i >= w || j >= h {
            ring(window.x0 + i, window.y0 + j)
        } else {
            u[(i as usize, j as usize)]
        }
    };
    let mut worst = 0.0f64;
    for j in 0..h {
        for i in 0..w {
            let r = 4.0 * at(i, j) - at(i - 1, j) - at(i + 1, j) - at(i, j - 1) - at(i, j + 1);
            worst = worst.max(r.abs());
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct HarmonicSplit {
    pub window: Window,
    pub harmonic: DMatrix<f64>,
    /// `field − harmonic` on the window; zero on its ring.
    pub remainder: DMatrix<f64>,
}

impl HarmonicSplit {
    /// Remainder as a function on the whole grid.
    pub fn remainder_at(&self, x: i64, y: i64) -> f64 {
        if self.window.contains(x, y) {
            self.remainder[((x - self.window.x0) as usize, (y - self.window.y0) as usize)]
        } else {
            0.0
        }
    }

    pub fn harmonic_at(&self, x: i64, y: i64) -> f64 {
        self.harmonic[((x - self.window.x0) as usize, (y - self.window.y0) as usize)]
    }
}

pub fn harmonic_split(field: &LatticeField, window: Window) -> Result<HarmonicSplit> {
    window.check_inside(field.n)?;
    let harmonic = harmonic_extension(&window, |x, y| field.get(x, y));
    let remainder = DMatrix::from_fn(window.w, window.h, |i, j| {
        field.get(window.x0 + i as i64, window.y0 + j as i64) - harmonic[(i, j)]
    });
    Ok(HarmonicSplit {
        window,
        harmonic,
        remainder,
    })
}

/// Ring-to-interior map of the harmonic extension on `B(0, r)`, restricted
/// to the sites with `|d|∞ ≤ q`. Ring sites are the non-corner sites at
/// `|d|∞ = r`; corners never enter a 4-neighbour Laplacian.
struct PoissonOperator {
    q: i64,
    ring: Vec<[i64; 2]>,
    mat: DMatrix<f64>,
}

fn ring_offsets(r: i64) -> Vec<[i64; 2]> {
    let mut v = Vec::new();
    for t in -(r - 1)..=(r - 1) {
        v.push([t, -r]);
        v.push([t, r]);
        v.push([-r, t]);
        v.push([r, t]);
    }
    v
}

fn poisson_operator(r: i64, q: i64) -> Arc<PoissonOperator> {
    static CACHE: OnceLock<RwLock<HashMap<(i64, i64), Arc<PoissonOperator>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(p) = cache.read().unwrap().get(&(r, q)) {
        return p.clone();
    }
    let ring = ring_offsets(r);
    let side = (2 * q + 1) as usize;
    let win = Window::open_box([0, 0], r);
    let mut mat = DMatrix::<f64>::zeros(side * side, ring.len());
    for (c, &o) in ring.iter().enumerate() {
        let u = harmonic_extension(&win, |x, y| if [x, y] == o { 1.0 } else { 0.0 });
        for b in 0..side {
            for a in 0..side {
                let (x, y) = (a as i64 - q + r - 1, b as i64 - q + r - 1);
                mat[(b * side + a, c)] = u[(x as usize, y as usize)];
            }
        }
    }
    let p = Arc::new(PoissonOperator { q, ring, mat });
    cache.write().unwrap().entry((r, q)).or_insert(p).clone()
}

/// For each center `y`, the oscillation over `|d|∞ ≤ q` of the harmonic
/// extension of `values` on `B(y, r)`.
fn batched_oscillation(
    centers: &[[i64; 2]],
    r: i64,
    q: i64,
    values: impl Fn(i64, i64) -> f64,
) -> Vec<f64> {
    if centers.is_empty() {
        return Vec::new();
    }
    let op = poisson_operator(r, q);
    let mut ringv = DMatrix::<f64>::zeros(op.ring.len(), centers.len());
    for (c, y) in centers.iter().enumerate() {
        for (k, o) in op.ring.iter().enumerate() {
            ringv[(k, c)] = values(y[0] + o[0], y[1] + o[1]);
        }
    }
    let inner = &op.mat * ringv;
    debug_assert_eq!(op.q, q);
    (0..centers.len())
        .map(|c| {
            let col = inner.column(c);
            col.max() - col.min()
        })
        .collect()
}

/// `sup_{u,v ∈ B(c, s)} |f(u) − f(v)|` over lattice sites, `s` given in
/// halves (`s2 = 2s`).
fn open_half_radius(s2: i64) -> i64 {
    // |d| < s2/2  ⇔  2|d| < s2  ⇔  |d| ≤ (s2 − 1)/2
    (s2 - 1).div_euclid(2)
}

// ---------------------------------------------------------------------------
// Multiscale decomposition

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub z: [i64; 2],
    /// `B(z, 2ϱ)` then `B(z_m, 4a_m)` for `m = 1..m̄`, grid coordinates.
    pub windows: Vec<Window>,
    pub centers: Vec<[i64; 2]>,
    /// Pieces evaluated on `B(z, 2ϱ)`: `m̄ − 1` differences then the top
    /// harmonic extension, preceded by the innermost difference.
    pub pieces: Vec<DMatrix<f64>>,
    pub direct: DMatrix<f64>,
    pub max_error: f64,
    /// Mean-value residual of each piece on its own window.
    pub piece_residuals: Vec<f64>,
}

/// Nearest point of `aℤ²` to `z`, kept inside `[−R, R]²`.
fn nearest_on(z: i64, a: i64, r: i64) -> i64 {
    let mut v = (z + a / 2).div_euclid(a) * a;
    while v > r {
        v -= a;
    }
    while v < -r {
        v += a;
    }
    v
}

/// Splits `h^{z,2ϱ}` on `B(z, 2ϱ)` into the harmonic extensions of
/// successive remainders across the scales `a_m = ϱN^m`.
pub fn multiscale_decompose(
    field: &LatticeField,
    z: [i64; 2],
    rho: u32,
    base: u32,
    m_bar: u32,
) -> Result<Decomposition> {
    if m_bar == 0 || base < 2 || rho == 0 {
        return Err(Error::OutOfRange(format!(
            "need m_bar >= 1, N >= 2, rho >= 1; got {m_bar}, {base}, {rho}"
        )));
    }
    let o = field.origin();
    let rho = rho as i64;
    let a = |m: u32| rho * (base as i64).pow(m);
    let mut centers = vec![z];
    let mut windows = vec![Window::open_box([z[0] + o, z[1] + o], 2 * rho)];
    for m in 1..=m_bar {
        let zm = [nearest_on(z[0], a(m), o), nearest_on(z[1], a(m), o)];
        if (zm[0] - z[0]).abs().max((zm[1] - z[1]).abs()) >= a(m) {
            return Err(Error::ScaleNestingViolated(format!(
                "no point of a_{m}Z^2 within a_{m} of {z:?}"
            )));
        }
        centers.push(zm);
        windows.push(Window::open_box([zm[0] + o, zm[1] + o], 4 * a(m)));
    }
    for m in 1..windows.len() {
        if !windows[m].contains_window(&windows[m - 1]) {
            return Err(Error::ScaleNestingViolated(format!(
                "window {} ({:?}) not inside window {} ({:?})",
                m - 1,
                windows[m - 1],
                m,
                windows[m]
            )));
        }
    }
    windows[m_bar as usize].check_inside(field.n)?;
    let splits: Vec<HarmonicSplit> = windows
        .iter()
        .map(|w| harmonic_split(field, *w))
        .collect::<Result<_>>()?;
    let w0 = windows[0];
    let restrict = |u: &DMatrix<f64>, w: &Window| {
        DMatrix::from_fn(w0.w, w0.h, |i, j| {
            u[(
                (w0.x0 + i as i64 - w.x0) as usize,
                (w0.y0 + j as i64 - w.y0) as usize,
            )]
        })
    };
    let mut pieces = Vec::new();
    let mut piece_residuals = Vec::new();
    for m in 0..m_bar as usize {
        let outer = &splits[m + 1];
        let w = windows[m];
        let u = harmonic_extension(&w, |x, y| outer.remainder_at(x, y));
        piece_residuals.push(mean_value_residual(&w, &u, |x, y| outer.remainder_at(x, y)));
        pieces.push(restrict(&u, &w));
    }
    let top = &splits[m_bar as usize];
    piece_residuals.push(mean_value_residual(&top.window, &top.harmonic, |x, y| {
        field.get(x, y)
    }));
    pieces.push(restrict(&top.harmonic, &top.window));
    let direct = splits[0].harmonic.clone();
    let mut max_error = 0.0f64;
    for j in 0..w0.h {
        for i in 0..w0.w {
            let s: f64 = pieces.iter().map(|p| p[(i, j)]).sum();
            max_error = max_error.max((s - direct[(i, j)]).abs());
        }
    }
    Ok(Decomposition {
        z,
        windows,
        centers,
        pieces,
        direct,
        max_error,
        piece_residuals,
    })
}

// ---------------------------------------------------------------------------
// Nice and bad vertices

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiceParams {
    pub base: u32,
    pub rho: u32,
    pub levels: u32,
}

impl NiceParams {
    pub fn scale(&self, j: u32) -> i64 {
        self.rho as i64 * (self.base as i64).pow(j)
    }
}

/// Threshold-free data for one level: each vertex's largest normalised
/// oscillation, and its children one level down.
#[derive(Clone, Debug, Serialize)]
pub struct NiceLevel {
    pub j: u32,
    pub a: i64,
    /// Relative coordinates.
    pub vertices: Vec<[i64; 2]>,
    /// Clause (1) or (i) holds iff `fluct ≤ M`.
    pub fluct: Vec<f64>,
    /// Indices into the level below of the vertices in `B(x, a_j)`.
    pub children: Vec<Vec<usize>>,
    /// Largest `|·|∞` offset from the vertex of any site whose field value
    /// fed its label (ring included).
    pub read_radius: Vec<i64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NiceProfile {
    pub params: NiceParams,
    pub n: usize,
    pub r: i64,
    /// `levels[j − 1]`.
    pub levels: Vec<NiceLevel>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelLabels {
    pub j: u32,
    pub a: i64,
    pub vertices: Vec<[i64; 2]>,
    pub nice: Vec<bool>,
    pub clause_i_failures: usize,
    /// Vertices saved by the covering clause.
    pub covered_by_iii: usize,
    /// Times the bounded search for the covering center disagreed with the
    /// unbounded closed form.
    pub restriction_binds: usize,
}

impl LevelLabels {
    pub fn bad_count(&self) -> usize {
        self.nice.iter().filter(|&&b| !b).count()
    }

    pub fn bad_fraction(&self) -> f64 {
        if self.nice.is_empty() {
            0.0
        } else {
            self.bad_count() as f64 / self.nice.len() as f64
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NiceTable {
    pub params: NiceParams,
    pub m: f64,
    pub levels: Vec<LevelLabels>,
}

/// Lattice points of `aℤ²` in the open box `B(c, s)`.
fn lattice_in_open_box(c: [i64; 2], s: i64, a: i64) -> Vec<[i64; 2]> {
    let lo = |v: i64| (v - s + 1).div_euclid(a) * a;
    let mut out = Vec::new();
    let mut y = lo(c[1]);
    while y < c[1] + s {
        if (y - c[1]).abs() < s {
            let mut x = lo(c[0]);
            while x < c[0] + s {
                if (x - c[0]).abs() < s {
                    out.push([x, y]);
                }
                x += a;
            }
        }
        y += a;
    }
    out
}

/// Lattice points `y` of `aℤ²` with `|y − c|∞ ≤ s`.
fn lattice_in_closed_box(c: [i64; 2], s: i64, a: i64) -> Vec<[i64; 2]> {
    lattice_in_open_box(c, s + 1, a)
}

pub fn nice_profile(field: &LatticeField, params: NiceParams) -> Result<NiceProfile> {
    if params.levels == 0 || params.base < 2 || params.rho == 0 {
        return Err(Error::OutOfRange(format!("bad nice parameters {params:?}")));
    }
    let o = field.origin();
    let n = field.n as i64;
    let top = params.levels;
    let at = params.scale(top);
    let fits = |x: [i64; 2], r: i64| {
        let g = [x[0] + o, x[1] + o];
        g[0] - r >= 0 && g[1] - r >= 0 && g[0] + r <= n - 1 && g[1] + r <= n - 1
    };
    let top_vertices: Vec<[i64; 2]> = lattice_in_closed_box([0, 0], o, at)
        .into_iter()
        .filter(|&x| fits(x, 4 * at))
        .collect();
    if top_vertices.is_empty() {
        return Err(Error::FieldWindowTooSmall(format!(
            "grid of side {} cannot hold B(x, {}) for {} levels at N={}, rho={}",
            field.n,
            4 * at,
            top,
            params.base,
            params.rho
        )));
    }
    // Vertex sets top-down.
    let mut sets: Vec<Vec<[i64; 2]>> = vec![Vec::new(); top as usize];
    let mut children: Vec<Vec<Vec<usize>>> = vec![Vec::new(); top as usize];
    sets[top as usize - 1] = top_vertices;
    for j in (2..=top).rev() {
        let (aj, ajm) = (params.scale(j), params.scale(j - 1));
        let mut all = BTreeSet::new();
        let kids: Vec<Vec<[i64; 2]>> = sets[j as usize - 1]
            .iter()
            .map(|&x| lattice_in_open_box(x, aj, ajm))
            .collect();
        for k in &kids {
            all.extend(k.iter().map(|p| (p[1], p[0])));
        }
        let below: Vec<[i64; 2]> = all.into_iter().map(|(y, x)| [x, y]).collect();
        let index: HashMap<[i64; 2], usize> =
            below.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        children[j as usize - 1] = kids
            .iter()
            .map(|k| k.iter().map(|p| index[p]).collect())
            .collect();
        sets[j as usize - 2] = below;
    }
    let mut levels = Vec::new();
    for j in 1..=top {
        let a = params.scale(j);
        let verts = std::mem::take(&mut sets[j as usize - 1]);
        let norm = (params.base as f64).powf((j as f64 - 1.0) / 2.0);
        let rho = params.rho as i64;
        let (r, q, step, reach) = if j == 1 {
            (2 * rho, open_half_radius(3 * rho), 1, 4 * a - 2 * rho)
        } else {
            let am = params.scale(j - 1);
            (4 * am, 3 * am - 1, am, 4 * a - 4 * am)
        };
        let per: Vec<f64> = verts
            .par_iter()
            .map(|&x| {
                let g = [x[0] + o, x[1] + o];
                let split = harmonic_split(field, Window::open_box(g, 4 * a))?;
                let ys = lattice_in_closed_box(g, reach, step);
                let ys: Vec<[i64; 2]> = if step == 1 {
                    ys
                } else {
                    // a_{j−1}ℤ² in relative coordinates
                    lattice_in_closed_box(x, reach, step)
                        .into_iter()
                        .map(|y| [y[0] + o, y[1] + o])
                        .collect()
                };
                let osc = batched_oscillation(&ys, r, q, |u, v| split.remainder_at(u, v));
                Ok(osc.into_iter().fold(0.0f64, f64::max) / norm)
            })
            .collect::<Result<_>>()?;
        levels.push(NiceLevel {
            j,
            a,
            read_radius: vec![4 * a; verts.len()],
            vertices: verts,
            fluct: per,
            children: std::mem::take(&mut children[j as usize - 1]),
        });
    }
    Ok(NiceProfile {
        params,
        n: field.n,
        r: o,
        levels,
    })
}

impl NiceProfile {
    pub fn classify(&self, m: f64) -> NiceTable {
        let mut out: Vec<LevelLabels> = Vec::new();
        for lvl in &self.levels {
            let mut nice = Vec::with_capacity(lvl.vertices.len());
            let (mut fi, mut iii, mut binds) = (0, 0, 0);
            for (v, &x) in lvl.vertices.iter().enumerate() {
                let clause_i = lvl.fluct[v] <= m;
                if !clause_i {
                    fi += 1;
                }
                if lvl.j == 1 {
                    nice.push(clause_i);
                    continue;
                }
                let below = &out[lvl.j as usize - 2];
                let bad: Vec<[i64; 2]> = lvl.children[v]
                    .iter()
                    .filter(|&&c| !below.nice[c])
                    .map(|&c| below.vertices[c])
                    .collect();
                let ok = if bad.is_empty() {
                    true
                } else {
                    let am = self.params.scale(lvl.j - 1);
                    let bounded = covering_center(&bad, am, self.r, Some(20 * am)).is_some();
                    let unbounded = covering_center(&bad, am, self.r, None).is_some();
                    if bounded != unbounded {
                        binds += 1;
                    }
                    if bounded && clause_i {
                        iii += 1;
                    }
                    bounded
                };
                let _ = x;
                nice.push(clause_i && ok);
            }
            out.push(LevelLabels {
                j: lvl.j,
                a: lvl.a,
                vertices: lvl.vertices.clone(),
                nice,
                clause_i_failures: fi,
                covered_by_iii: iii,
                restriction_binds: binds,
            });
        }
        NiceTable {
            params: self.params,
            m,
            levels: out,
        }
    }
}

/// A point `z ∈ aℤ² ∩ [−R, R]²` with `B(y, 4a) ⊂ B(z, 10a)` for every `y`
/// in `bad`, i.e. `|y − z|∞ ≤ 6a`. With `search = Some(d)` only centers
/// within `d` of some box `B(y, 4a)` are tried, exhaustively; otherwise the
/// per-axis interval is solved in closed form.
fn covering_center(bad: &[[i64; 2]], a: i64, r: i64, search: Option<i64>) -> Option<[i64; 2]> {
    let lo = [0, 1].map(|k| bad.iter().map(|p| p[k]).min().unwrap());
    let hi = [0, 1].map(|k| bad.iter().map(|p| p[k]).max().unwrap());
    match search {
        None => {
            let mut z = [0i64; 2];
            for k in 0..2 {
                let from = (hi[k] - 6 * a).max(-r);
                let to = (lo[k] + 6 * a).min(r);
                let first = from.div_euclid(a) * a + if from.rem_euclid(a) == 0 { 0 } else { a };
                if first > to {
                    return None;
                }
                z[k] = first;
            }
            Some(z)
        }
        Some(d) => {
            let reach = d + 4 * a;
            let mut best = None;
            let mut y = (lo[1] - reach).div_euclid(a) * a;
            while y <= hi[1] + reach && best.is_none() {
                let mut x = (lo[0] - reach).div_euclid(a) * a;
                while x <= hi[0] + reach {
                    let z = [x, y];
                    let inside = x.abs() <= r && y.abs() <= r;
                    let near = bad
                        .iter()
                        .any(|p| (p[0] - x).abs().max((p[1] - y).abs()) <= reach);
                    if inside
                        && near
                        && bad
                            .iter()
                            .all(|p| (p[0] - x).abs().max((p[1] - y).abs()) <= 6 * a)
                    {
                        best = Some(z);
                        break;
                    }
                    x += a;
                }
                y += a;
            }
            best
        }
    }
}

pub fn classify_nice(field: &LatticeField, params: NiceParams, m: f64) -> Result<NiceTable> {
    Ok(nice_profile(field, params)?.classify(m))
}

/// Bad counts per sample, threshold and level.
#[derive(Clone, Debug, Serialize)]
pub struct NiceTrend {
    pub params: NiceParams,
    pub n: usize,
    pub thresholds: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// `bad[s][t][j−1]`.
    pub bad: Vec<Vec<Vec<u32>>>,
    /// Vertices per level.
    pub totals: Vec<u32>,
    pub restriction_binds: usize,
}

impl NiceTrend {
    pub fn bad_fraction(&self, t: usize, j: u32) -> f64 {
        self.fraction_of(&(0..self.trials).collect::<Vec<_>>(), t, j)
    }

    fn fraction_of(&self, samples: &[usize], t: usize, j: u32) -> f64 {
        let k = j as usize - 1;
        let bad: u64 = samples.iter().map(|&s| self.bad[s][t][k] as u64).sum();
        bad as f64 / (samples.len() as f64 * self.totals[k] as f64)
    }

    /// Fraction of bootstrap resamples (over samples) in which `pred` holds
    /// for the resampled fractions `f(t, j)`.
    pub fn bootstrap(
        &self,
        reps: usize,
        seed: u64,
        pred: impl Fn(&dyn Fn(usize, u32) -> f64) -> bool,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0;
        for _ in 0..reps {
            let idx: Vec<usize> = (0..self.trials)
                .map(|_| rng.gen_range(0..self.trials))
                .collect();
            let f = |t: usize, j: u32| self.fraction_of(&idx, t, j);
            if pred(&f) {
                hits += 1;
            }
        }
        hits as f64 / reps as f64
    }
}

pub fn nice_trend(
    n: usize,
    params: NiceParams,
    thresholds: &[f64],
    trials: usize,
    seed: u64,
    grid_cap: usize,
) -> Result<NiceTrend> {
    let per: Vec<(Vec<Vec<u32>>, Vec<u32>, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let f = sample_field_capped(n, derive_seed(seed, "gff-nice", t as u64), grid_cap)?;
            let prof = nice_profile(&f, params)?;
            let mut binds = 0;
            let rows = thresholds
                .iter()
                .map(|&m| {
                    let tab = prof.classify(m);
                    binds += tab
                        .levels
                        .iter()
                        .map(|l| l.restriction_binds)
                        .sum::<usize>();
                    tab.levels.iter().map(|l| l.bad_count() as u32).collect()
                })
                .collect();
            let totals = prof
                .levels
                .iter()
                .map(|l| l.vertices.len() as u32)
                .collect();
            Ok((rows, totals, binds))
        })
        .collect::<Result<_>>()?;
    let totals = per.first().map(|p| p.1.clone()).unwrap_or_default();
    let restriction_binds = per.iter().map(|p| p.2).sum();
    Ok(NiceTrend {
        params,
        n,
        thresholds: thresholds.to_vec(),
        trials,
        seed,
        bad: per.into_iter().map(|p| p.0).collect(),
        totals,
        restriction_binds,
    })
}

// ---------------------------------------------------------------------------
// Statistical checks

const SUM_CHUNK: usize = 32;

/// Parallel sum over trials whose floating-point result does not depend on
/// the thread count: trials are folded in fixed chunks and the chunks are
/// combined in order.
fn ordered_sum<A: Send>(
    trials: usize,
    zero: impl Fn() -> A + Sync,
    fold: impl Fn(A, usize) -> A + Sync,
    combine: impl Fn(A, A) -> A,
) -> A {
    let chunks: Vec<A> = (0..trials.div_ceil(SUM_CHUNK))
        .into_par_iter()
        .map(|c| (c * SUM_CHUNK..((c + 1) * SUM_CHUNK).min(trials)).fold(zero(), &fold))
        .collect();
    chunks.into_iter().fold(zero(), combine)
}

#[derive(Clone, Debug, Serialize)]
pub struct CovarianceCheck {
    pub n: usize,
    pub trials: usize,
    pub entries: usize,
    pub max_z: f64,
    pub max_abs_error: f64,
}

/// Empirical `E[X_i X_j]` against the LU Green function for the given rows
/// (all sites when `rows` is `None`), z-scored with the Gaussian
/// `Var(X_i X_j) = G_ii G_jj + G_ij²`.
pub fn covariance_check(
    n: usize,
    trials: usize,
    seed: u64,
    rows: Option<Vec<usize>>,
) -> Result<CovarianceCheck> {
    let g = green_matrix(n, n)?;
    let m = n * n;
    let rows: Vec<usize> = rows.unwrap_or_else(|| (0..m).collect());
    let sums = ordered_sum(
        trials,
        || vec![0.0f64; rows.len() * m],
        |mut acc, t| {
            let f = sample_rect(n, n, &mut stream(derive_seed(seed, "gff-cov", t as u64)));
            let v: Vec<f64> = (0..m).map(|i| f[(i % n, i / n)]).collect();
            for (r, &i) in rows.iter().enumerate() {
                let xi = v[i];
                let row = &mut acc[r * m..(r + 1) * m];
                for (a, &xj) in row.iter_mut().zip(&v) {
                    *a += xi * xj;
                }
            }
            acc
        },
        |mut a, b| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        },
    );
    let tf = trials as f64;
    let (mut max_z, mut max_err) = (0.0f64, 0.0f64);
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..m {
            let est = sums[r * m + j] / tf;
            let err = (est - g[(i, j)]).abs();
            let se = ((g[(i, i)] * g[(j, j)] + g[(i, j)].powi(2)) / tf).sqrt();
            max_z = max_z.max(err / se);
            max_err = max_err.max(err);
        }
    }
    Ok(CovarianceCheck {
        n,
        trials,
        entries: rows.len() * m,
        max_z,
        max_abs_error: max_err,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MarkovCheck {
    pub n: usize,
    pub window: Window,
    pub trials: usize,
    /// Remainder inside against field outside.
    pub cross_entries: usize,
    pub cross_max_z: f64,
    /// Remainder covariance against the window's own Green function.
    pub remainder_max_z: f64,
    pub max_residual: f64,
}

pub fn markov_check(n: usize, window: Window, trials: usize, seed: u64) -> Result<MarkovCheck> {
    window.check_inside(n)?;
    let inside: Vec<(i64, i64)> = (0..window.h as i64)
        .flat_map(|j| (0..window.w as i64).map(move |i| (window.x0 + i, window.y0 + j)))
        .collect();
    let outside: Vec<(i64, i64)> = (0..n as i64)
        .flat_map(|y| (0..n as i64).map(move |x| (x, y)))
        .filter(|&(x, y)| !window.contains(x, y))
        .collect();
    let gw = green_matrix(window.w, window.h)?;
    let (ni, no) = (inside.len(), outside.len());
    struct Acc {
        cross: Vec<f64>,
        rr: Vec<f64>,
        r2: Vec<f64>,
        f2: Vec<f64>,
        resid: f64,
    }
    let zero = || Acc {
        cross: vec![0.0; ni * no],
        rr: vec![0.0; ni * ni],
        r2: vec![0.0; ni],
        f2: vec![0.0; no],
        resid: 0.0,
    };
    let acc = ordered_sum(
        trials,
        zero,
        |mut acc, t| {
            let vals = sample_rect(n, n, &mut stream(derive_seed(seed, "gff-markov", t as u64)));
            let field = LatticeField { n, values: vals };
            let split = harmonic_split(&field, window).expect("checked window");
            acc.resid = acc
                .resid
                .max(mean_value_residual(&window, &split.harmonic, |x, y| {
                    field.get(x, y)
                }));
            let r: Vec<f64> = inside
                .iter()
                .map(|&(x, y)| split.remainder_at(x, y))
                .collect();
            let f: Vec<f64> = outside.iter().map(|&(x, y)| field.get(x, y)).collect();
            for a in 0..ni {
                acc.r2[a] += r[a] * r[a];
                let row = &mut acc.cross[a * no..(a + 1) * no];
                for (c, &fv) in row.iter_mut().zip(&f) {
                    *c += r[a] * fv;
                }
                for b in 0..ni {
                    acc.rr[a * ni + b] += r[a] * r[b];
                }
            }
            for (s, &fv) in acc.f2.iter_mut().zip(&f) {
                *s += fv * fv;
            }
            acc
        },
        |mut a, b| {
            let add =
                |x: &mut Vec<f64>, y: &Vec<f64>| x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            add(&mut a.cross, &b.cross);
            add(&mut a.rr, &b.rr);
            add(&mut a.r2, &b.r2);
            add(&mut a.f2, &b.f2);
            a.resid = a.resid.max(b.resid);
            a
        },
    );
    let tf = trials as f64;
    let mut cross_max_z = 0.0f64;
    for a in 0..ni {
        for c in 0..no {
            let se = (acc.r2[a] / tf * acc.f2[c] / tf / tf).sqrt();
            cross_max_z = cross_max_z.max((acc.cross[a * no + c] / tf).abs() / se);
        }
    }
    let mut remainder_max_z = 0.0f64;
    for a in 0..ni {
        for b in 0..ni {
            let (ia, ib) = (
                ((inside[a].1 - window.y0) as usize) * window.w
                    + (inside[a].0 - window.x0) as usize,
                ((inside[b].1 - window.y0) as usize) * window.w
                    + (inside[b].0 - window.x0) as usize,
            );
            let g = gw[(ia, ib)];
            let se = ((gw[(ia, ia)] * gw[(ib, ib)] + g * g) / tf).sqrt();
            remainder_max_z = remainder_max_z.max((acc.rr[a * ni + b] / tf - g).abs() / se);
        }
    }
    Ok(MarkovCheck {
        n,
        window,
        trials,
        cross_entries: ni * no,
        cross_max_z,
        remainder_max_z,
        max_residual: acc.resid,
    })
}

/// How the tail thresholds are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailScale {
    /// Standard deviation of the oscillation itself.
    OscillationSd,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailExperiment {
    pub n: usize,
    pub r: i64,
    pub trials: usize,
    pub seed: u64,
    pub scale: TailScale,
    pub mean: f64,
    pub sigma: f64,
    pub multiples: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub exceedances: Vec<u64>,
    pub log_frequency: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Smallest `Ĉ` with `freq(t) ≤ exp(−t²/Ĉ)` at every threshold.
    pub c_hat: f64,
}

/// Samples of `sup_{u,v ∈ B(z, r/2)} |h^{z,r}(u) − h^{z,r}(v)|` for `z` the
/// grid center, one independent field per trial.
pub fn oscillation_samples(n: usize, r: i64, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let o = (n / 2) as i64;
    Window::open_box([o, o], r).check_inside(n)?;
    let q = open_half_radius(r);
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let vals = sample_rect(n, n, &mut stream(derive_seed(seed, "gff-tail", t as u64)));
            let field = LatticeField { n, values: vals };
            batched_oscillation(&[[o, o]], r, q, |x, y| field.get(x, y))[0]
        })
        .collect())
}

/// Exceedance frequencies of the oscillation at multiples of `σ`, and the
/// least-squares line of log-frequency against `t²`.
pub fn fluctuation_tail(
    n: usize,
    r: i64,
    trials: usize,
    seed: u64,
    multiples: &[f64],
) -> Result<TailExperiment> {
    let osc = oscillation_samples(n, r, trials, seed)?;
    let tf = trials as f64;
    let mean = osc.iter().sum::<f64>() / tf;
    let sigma = (osc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (tf - 1.0)).sqrt();
    let thresholds: Vec<f64> = multiples.iter().map(|k| k * sigma).collect();
    let exceedances: Vec<u64> = thresholds
        .iter()
        .map(|&t| osc.iter().filter(|&&x| x >= t).count() as u64)
        .collect();
    let log_frequency: Vec<f64> = exceedances.iter().map(|&e| (e as f64 / tf).ln()).collect();
    let pts: Vec<(f64, f64)> = thresholds
        .iter()
        .zip(&log_frequency)
        .filter(|(_, l)| l.is_finite())
        .map(|(t, l)| (t * t, *l))
        .collect();
    let (slope, intercept, r_squared) = linear_fit(&pts);
    let c_hat = thresholds
        .iter()
        .zip(&log_frequency)
        .filter(|(_, l)| **l < 0.0)
        .map(|(t, l)| if l.is_finite() { t * t / -l } else { 0.0 })
        .fold(0.0f64, f64::max);
    Ok(TailExperiment {
        n,
        r,
        trials,
        seed,
        scale: TailScale::OscillationSd,
        mean,
        sigma,
        multiples: multiples.to_vec(),
        thresholds,
        exceedances,
        log_frequency,
        slope,
        intercept,
        r_squared,
        c_hat,
    })
}

/// Ordinary least squares; returns `(slope, intercept, R²)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let k = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (slope, my - slope * mx, r2)
}

// ---------------------------------------------------------------------------
// Component harness

/// Bad sites on `[−R, R]²`. Serialised as run-length rows `[y, x_start, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    pub r: i64,
    pub bad: BTreeSet<[i64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct LabelDocument {
    r: i64,
    rows: Vec<[i64; 3]>,
}

impl Serialize for LabelField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut rows: Vec<[i64; 3]> = Vec::new();
        let mut sorted: Vec<[i64; 2]> = self.bad.iter().copied().collect();
        sorted.sort_by_key(|p| (p[1], p[0]));
        for p in sorted {
            match rows.last_mut() {
                Some(run) if run[0] == p[1] && run[1] + run[2] == p[0] => run[2] += 1,
                _ => rows.push([p[1], p[0], 1]),
            }
        }
        LabelDocument { r: self.r, rows }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = LabelDocument::deserialize(d)?;
        let mut bad = BTreeSet::new();
        for [y, x0, len] in doc.rows {
            if len < 0 || y.abs() > doc.r || x0.abs() > doc.r || (x0 + len - 1).abs() > doc.r {
                return Err(serde::de::Error::custom(format!(
                    "run [{y}, {x0}, {len}] leaves [-R, R]^2"
                )));
            }
            for x in x0..x0 + len {
                bad.insert([x, y]);
            }
        }
        Ok(LabelField { r: doc.r, bad })
    }
}

impl LabelField {
    pub fn iid(r: i64, density: f64, seed: u64) -> LabelField {
        let mut rng = stream(seed);
        let mut bad = BTreeSet::new();
        for y in -r..=r {
            for x in -r..=r {
                if rng.gen::<f64>() < density {
                    bad.insert([x, y]);
                }
            }
        }
        LabelField { r, bad }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HarnessReport {
    pub r: i64,
    pub iota: f64,
    pub limit: f64,
    pub components: usize,
    pub max_diameter: i64,
    pub pass: bool,
    /// Sites of the widest component when it exceeds `ιR`.
    pub offending: Option<Vec<[i64; 2]>>,
}

/// Components of `∪ B̄(w, 1)` over bad `w`; closed unit boxes meet iff the
/// centers are within L∞ distance 2, and a component spanning `s` has
/// diameter `s + 2`.
pub fn component_harness(labels: &LabelField, iota: f64) -> HarnessReport {
    let sites: Vec<[i64; 2]> = labels.bad.iter().copied().collect();
    let index: HashMap<[i64; 2], usize> = sites.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut uf = UnionFind::new(sites.len());
    for (i, p) in sites.iter().enumerate() {
        for dy in -2..=2 {
            for dx in -2..=2 {
                if let Some(&j) = index.get(&[p[0] + dx, p[1] + dy]) {
                    uf.union(i, j);
                }
            }
        }
    }
    let groups = uf.groups();
    let mut widest: Option<(i64, usize)> = None;
    for (g, members) in groups.iter().enumerate() {
        let span = |k: usize| {
            let lo = members.iter().map(|&i| sites[i][k]).min().unwrap();
            let hi = members.iter().map(|&i| sites[i][k]).max().unwrap();
            hi - lo
        };
        let d = span(0).max(span(1)) + 2;
        if widest.is_none_or(|(w, _)| d > w) {
            widest = Some((d, g));
        }
    }
    let limit = iota * labels.r as f64;
    let max_diameter = widest.map_or(0, |w| w.0);
    let pass = (max_diameter as f64) <= limit;
    let offending = if pass {
        None
    } else {
        widest.map(|(_, g)| groups[g].iter().map(|&i| sites[i]).collect())
    };
    HarnessReport {
        r: labels.r,
        iota,
        limit,
        components: groups.len(),
        max_diameter,
        pass,
        offending,
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GffSummary {
    pub grid: usize,
    pub window: String,
    pub trials: usize,
    pub max_cov_error: Option<f64>,
    pub tail_fit_c: Option<f64>,
    pub bad_fraction_by_level: Vec<f64>,
}

pub fn write_gff_csv<W: Write>(rows: &[GffSummary], mut w: W) -> Result<()> {
    writeln!(
        w,
        "grid,window,trial_count,max_cov_error,tail_fit_C,bad_fraction_by_level"
    )?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        let bf: Vec<String> = r
            .bad_fraction_by_level
            .iter()
            .map(|f| format!("{f}"))
            .collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.grid,
            r.window,
            r.trials,
            opt(r.max_cov_error),
            opt(r.tail_fit_c),
            bf.join(";")
        )?;
    }
    Ok(())
}
