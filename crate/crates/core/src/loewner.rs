//! Chordal Loewner traces from Brownian driving functions, their rasters and
//! the complement components ("bubbles") of the rasterised trace.
//!
//! The driving function is held constant on each step `[t_{k−1}, t_k]` at
//! `U_k = W_{t_k}`, so the step map `h_k(w) = U_k + √((w − U_k)² + 4dt)` solves
//! the Loewner equation exactly and adds `2dt` of half-plane capacity. The tip
//! at time `t_n` is `f_1 ∘ ⋯ ∘ f_n(U_n)` with `f_k = h_k⁻¹`.

use std::collections::BTreeSet;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::unionfind::UnionFind;

/// Samples `W_{k·dt}`, `k = 0..=n`, of `W = √κ·B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingPath {
    pub kappa: f64,
    pub t_max: f64,
    pub dt: f64,
    pub seed: u64,
    pub w: Vec<f64>,
}

fn steps(t_max: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_max >= dt) || !dt.is_finite() || !t_max.is_finite() {
        return Err(Error::OutOfRange(format!(
            "need dt > 0 and T >= dt, got T={t_max}, dt={dt}"
        )));
    }
    let n = (t_max / dt).round();
    if ((n * dt - t_max) / t_max).abs() > 1e-9 {
        return Err(Error::OutOfRange(format!(
            "T={t_max} is not a multiple of dt={dt}"
        )));
    }
    Ok(n as usize)
}

/// Standard Brownian motion at spacing `dt`; the same seed gives the same
/// path for every κ.
fn brownian(n: usize, dt: f64, seed: u64) -> Vec<f64> {
    let mut rng: ChaCha8Rng = stream(seed);
    let sd = dt.sqrt();
    let mut b = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    b.push(0.0);
    for _ in 0..n {
        let g: f64 = rng.sample(StandardNormal);
        acc += sd * g;
        b.push(acc);
    }
    b
}

pub fn sample_driving(kappa: f64, t_max: f64, dt: f64, seed: u64) -> Result<DrivingPath> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::OutOfRange(format!(
            "kappa must be finite and >= 0, got {kappa}"
        )));
    }
    let n = steps(t_max, dt)?;
    let s = kappa.sqrt();
    let w = brownian(n, dt, seed).into_iter().map(|b| s * b).collect();
    Ok(DrivingPath {
        kappa,
        t_max,
        dt,
        seed,
        w,
    })
}

impl DrivingPath {
    pub fn steps(&self) -> usize {
        self.w.len() - 1
    }

    /// Every `factor`-th sample: the same path seen at spacing `factor·dt`.
    pub fn coarsen(&self, factor: usize) -> Result<DrivingPath> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(Error::OutOfRange(format!(
                "{} steps not divisible by {factor}",
                self.steps()
            )));
        }
        Ok(DrivingPath {
            dt: self.dt * factor as f64,
            w: self.w.iter().step_by(factor).copied().collect(),
            ..self.clone()
        })
    }

    /// Samples of `λ·W_{t/λ²}` at spacing `λ²·dt`.
    pub fn rescaled(&self, lambda: f64) -> DrivingPath {
        DrivingPath {
            t_max: self.t_max * lambda * lambda,
            dt: self.dt * lambda * lambda,
            w: self.w.iter().map(|w| lambda * w).collect(),
            ..self.clone()
        }
    }

    /// First `k` steps.
    pub fn truncated(&self, k: usize) -> DrivingPath {
        DrivingPath {
            t_max: self.dt * k as f64,
            w: self.w[..=k].to_vec(),
            ..self.clone()
        }
    }
}

/// `√z` on the branch with non-negative imaginary part; on the real axis the
/// sign follows `hint`. Algebraic rather than polar, and free of cancellation.
fn sqrt_upper(z: Complex64, hint: f64) -> Complex64 {
    let (x, y) = (z.re, z.im);
    if y == 0.0 {
        return if x >= 0.0 {
            Complex64::new(x.sqrt().copysign(hint), 0.0)
        } else {
            Complex64::new(0.0, (-x).sqrt())
        };
    }
    let r = x.hypot(y);
    let (a, b) = if x >= 0.0 {
        let a = ((r + x) / 2.0).sqrt();
        (a, y.abs() / (2.0 * a))
    } else {
        let b = ((r - x) / 2.0).sqrt();
        (y.abs() / (2.0 * b), b)
    };
    Complex64::new(a.copysign(y), b)
}

fn inverse_step(w: Complex64, u: f64, dt: f64) -> Complex64 {
    let a = w - u;
    Complex64::new(u, 0.0) + sqrt_upper(a * a - 4.0 * dt, a.re)
}

fn tip_after(w: &[f64], dt: f64, k: usize) -> Result<Complex64> {
    if k == 0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let mut z = Complex64::new(w[k], 2.0 * dt.sqrt());
    for j in (1..k).rev() {
        z = inverse_step(z, w[j], dt);
        if !z.re.is_finite() || !z.im.is_finite() {
            return Err(Error::MapCompositionOverflow(j));
        }
    }
    Ok(z)
}

/// Tip `γ(T)` only, in `O(n)`.
pub fn tip(driving: &DrivingPath) -> Result<Complex64> {
    tip_after(&driving.w, driving.dt, driving.steps())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePolyline {
    pub kappa: f64,
    pub t_max: f64,
    pub dt: f64,
    pub seed: u64,
    /// `γ(k·dt)`, `k = 0..=n`.
    pub points: Vec<[f64; 2]>,
}

/// All tips, each by its own backward composition (`O(n²)`).
pub fn trace(driving: &DrivingPath) -> Result<TracePolyline> {
    let n = driving.steps();
    let points = (0..=n)
        .into_par_iter()
        .map(|k| tip_after(&driving.w, driving.dt, k).map(|z| [z.re, z.im]))
        .collect::<Result<Vec<_>>>()?;
    Ok(TracePolyline {
        kappa: driving.kappa,
        t_max: driving.t_max,
        dt: driving.dt,
        seed: driving.seed,
        points,
    })
}

/// `lim z·(g_T(z) − z)` estimated at `z = i·height`. Increments are summed
/// separately from `z` so the `2T/z` signal is not lost against `|z|`.
pub fn capacity_coefficient(driving: &DrivingPath, height: f64) -> Result<f64> {
    let z0 = Complex64::new(0.0, height);
    let mut z = z0;
    let mut acc = Complex64::new(0.0, 0.0);
    let four_dt = 4.0 * driving.dt;
    for k in 1..=driving.steps() {
        let a = z - driving.w[k];
        let d = four_dt / (a + sqrt_upper(a * a + four_dt, a.re));
        if !d.re.is_finite() || !d.im.is_finite() {
            return Err(Error::MapCompositionOverflow(k));
        }
        z += d;
        acc += d;
    }
    Ok((acc * z0).re)
}

impl TracePolyline {
    pub fn tip(&self) -> [f64; 2] {
        *self.points.last().unwrap()
    }

    pub fn min_imaginary(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p[1])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,t,x,y")?;
        for (k, p) in self.points.iter().enumerate() {
            writeln!(w, "{k},{},{:e},{:e}", k as f64 * self.dt, p[0], p[1])?;
        }
        Ok(())
    }

    /// Little-endian `f64` pairs, no header.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.points {
            w.write_all(&p[0].to_le_bytes())?;
            w.write_all(&p[1].to_le_bytes())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rasters and bubbles

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn bulk() -> Rect {
        Rect {
            x0: -0.75,
            x1: 0.75,
            y0: 0.25,
            y1: 1.75,
        }
    }
}

/// Pixel mask of a polyline, one pixel thick: every pixel a segment passes
/// through is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub trace: Vec<bool>,
}

impl Raster {
    pub fn is_trace(&self, i: usize, j: usize) -> bool {
        self.trace[j * self.width + i]
    }

    pub fn trace_pixels(&self) -> usize {
        self.trace.iter().filter(|&&b| b).count()
    }
}

/// Cells of the unit grid crossed by the segment `a → b`; at an exact corner
/// crossing both side cells are emitted.
pub fn for_each_cell(a: [f64; 2], b: [f64; 2], mut mark: impl FnMut(i64, i64)) {
    let (mut i, mut j) = (a[0].floor() as i64, a[1].floor() as i64);
    let (ie, je) = (b[0].floor() as i64, b[1].floor() as i64);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let sx = if dx > 0.0 { 1 } else { -1 };
    let sy = if dy > 0.0 { 1 } else { -1 };
    let first = |p: f64, c: i64, d: f64| {
        if d > 0.0 {
            ((c + 1) as f64 - p) / d
        } else if d < 0.0 {
            (p - c as f64) / -d
        } else {
            f64::INFINITY
        }
    };
    let mut tx = first(a[0], i, dx);
    let mut ty = first(a[1], j, dy);
    let ddx = if dx != 0.0 {
        1.0 / dx.abs()
    } else {
        f64::INFINITY
    };
    let ddy = if dy != 0.0 {
        1.0 / dy.abs()
    } else {
        f64::INFINITY
    };
    mark(i, j);
    let mut left = (ie - i).abs() + (je - j).abs();
    while left > 0 {
        if tx < ty {
            i += sx;
            tx += ddx;
            left -= 1;
        } else if ty < tx {
            j += sy;
            ty += ddy;
            left -= 1;
        } else {
            mark(i + sx, j);
            mark(i, j + sy);
            i += sx;
            j += sy;
            tx += ddx;
            ty += ddy;
            left -= 2;
        }
        mark(i, j);
    }
}

pub fn rasterize(points: &[[f64; 2]], window: &Rect, px: f64) -> Result<Raster> {
    if !(px > 0.0) || !(window.x1 > window.x0) || !(window.y1 > window.y0) {
        return Err(Error::OutOfRange(format!(
            "bad window {window:?} or pixel size {px}"
        )));
    }
    let width = ((window.x1 - window.x0) / px).round() as usize;
    let height = ((window.y1 - window.y0) / px).round() as usize;
    if width == 0 || height == 0 {
        return Err(Error::EmptyRegion("window smaller than a pixel"));
    }
    let mut trace = vec![false; width * height];
    let to_px = |p: &[f64; 2]| [(p[0] - window.x0) / px, (p[1] - window.y0) / px];
    let mut set = |i: i64, j: i64| {
        if i >= 0 && j >= 0 && (i as usize) < width && (j as usize) < height {
            trace[j as usize * width + i as usize] = true;
        }
    };
    if points.len() == 1 {
        let p = to_px(&points[0]);
        set(p[0].floor() as i64, p[1].floor() as i64);
    }
    for s in points.windows(2) {
        let (a, b) = (to_px(&s[0]), to_px(&s[1]));
        // skip segments far outside the window
        let lo = [a[0].min(b[0]), a[1].min(b[1])];
        let hi = [a[0].max(b[0]), a[1].max(b[1])];
        if hi[0] < -1.0 || hi[1] < -1.0 || lo[0] > width as f64 + 1.0 || lo[1] > height as f64 + 1.0
        {
            continue;
        }
        for_each_cell(a, b, &mut set);
    }
    Ok(Raster {
        width,
        height,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    pub pixels: usize,
    /// `max(x-span, y-span) + 1` in pixels.
    pub diameter: u32,
    pub touches_frame: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleGraph {
    pub window: Rect,
    pub px: f64,
    pub width: usize,
    pub height: usize,
    pub trace_pixels: usize,
    pub bubbles: Vec<Bubble>,
    pub edges: Vec<(u32, u32)>,
    pub connected: bool,
    /// Component label per pixel, `u32::MAX` on trace pixels.
    #[serde(skip)]
    pub labels: Vec<u32>,
}

/// Bubbles at least this many pixels across count as resolved.
pub const NOISE_FLOOR_PX: u32 = 3;

impl BubbleGraph {
    /// Bounded (frame-free) bubbles at or above the noise floor.
    pub fn bulk(&self) -> impl Iterator<Item = &Bubble> {
        self.bubbles
            .iter()
            .filter(|b| !b.touches_frame && b.diameter >= NOISE_FLOOR_PX)
    }
}

pub fn bubble_graph(points: &[[f64; 2]], window: Rect, px: f64) -> Result<BubbleGraph> {
    let raster = rasterize(points, &window, px)?;
    let tp = raster.trace_pixels();
    if tp == 0 {
        return Err(Error::TraceMissesWindow);
    }
    let (w, h) = (raster.width, raster.height);
    let mut labels = vec![u32::MAX; w * h];
    let mut bubbles = Vec::new();
    let mut queue = Vec::new();
    for start in 0..w * h {
        if raster.trace[start] || labels[start] != u32::MAX {
            continue;
        }
        let id = bubbles.len() as u32;
        labels[start] = id;
        queue.push(start);
        let (mut n, mut lo, mut hi, mut frame) = (0usize, [usize::MAX; 2], [0usize; 2], false);
        while let Some(p) = queue.pop() {
            let (i, j) = (p % w, p / w);
            n += 1;
            lo = [lo[0].min(i), lo[1].min(j)];
            hi = [hi[0].max(i), hi[1].max(j)];
            frame |= i == 0 || j == 0 || i == w - 1 || j == h - 1;
            let mut visit = |q: usize| {
                if !raster.trace[q] && labels[q] == u32::MAX {
                    labels[q] = id;
                    queue.push(q);
                }
            };
            if i > 0 {
                visit(p - 1);
            }
            if i + 1 < w {
                visit(p + 1);
            }
            if j > 0 {
                visit(p - w);
            }
            if j + 1 < h {
                visit(p + w);
            }
        }
        let diameter = ((hi[0] - lo[0]).max(hi[1] - lo[1]) + 1) as u32;
        bubbles.push(Bubble {
            pixels: n,
            diameter,
            touches_frame: frame,
        });
    }
    let mut edges = BTreeSet::new();
    for j in 0..h {
        for i in 0..w {
            let a = labels[j * w + i];
            if a == u32::MAX {
                continue;
            }
            for dj in 0..=2i64 {
                for di in -2..=2i64 {
                    if dj == 0 && di <= 0 {
                        continue;
                    }
                    let (x, y) = (i as i64 + di, j as i64 + dj);
                    if x < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let b = labels[y as usize * w + x as usize];
                    if b != u32::MAX && b != a {
                        edges.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    let mut uf = UnionFind::new(bubbles.len());
    for &(a, b) in &edges {
        uf.union(a as usize, b as usize);
    }
    let connected = uf.groups().len() <= 1;
    Ok(BubbleGraph {
        window,
        px,
        width: w,
        height: h,
        trace_pixels: tp,
        bubbles,
        edges: edges.into_iter().collect(),
        connected,
        labels,
    })
}

// ---------------------------------------------------------------------------
// κ sweep

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kappas: Vec<f64>,
    pub trials: usize,
    pub t_max: f64,
    pub dt: f64,
    pub window: Rect,
    pub px: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct KappaRow {
    pub kappa: f64,
    /// Trials whose trace never entered the window.
    pub missed: usize,
    /// Bulk bubble diameters per trial (empty for missed trials).
    pub diameters: Vec<Vec<u32>>,
    pub q50: Option<f64>,
    pub q90: Option<f64>,
    pub q99: Option<f64>,
    pub connected_frequency: f64,
    /// Fraction of trials with no bulk bubble.
    pub no_bulk_frequency: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct KappaSweep {
    pub config: SweepConfig,
    pub rows: Vec<KappaRow>,
}

fn quantile(sorted: &[u32], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let f = pos - lo as f64;
    Some(sorted[lo] as f64 * (1.0 - f) + sorted[hi] as f64 * f)
}

fn pooled_median(per_trial: &[Vec<u32>], pick: &[usize]) -> Option<f64> {
    let mut all: Vec<u32> = pick
        .iter()
        .flat_map(|&t| per_trial[t].iter().copied())
        .collect();
    all.sort_unstable();
    quantile(&all, 0.5)
}

/// Trial `t` uses the Brownian path of `derive_seed(seed, "sle", t)` for
/// every κ, so rows are coupled.
pub fn kappa_sweep(cfg: &SweepConfig) -> Result<KappaSweep> {
    steps(cfg.t_max, cfg.dt)?;
    let per_trial: Vec<Vec<Option<(Vec<u32>, bool)>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(cfg.seed, "sle", t as u64);
            cfg.kappas
                .iter()
                .map(|&k| {
                    let tr = trace(&sample_driving(k, cfg.t_max, cfg.dt, seed)?)?;
                    match bubble_graph(&tr.points, cfg.window, cfg.px) {
                        Ok(g) => Ok(Some((g.bulk().map(|b| b.diameter).collect(), g.connected))),
                        Err(Error::TraceMissesWindow) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows = cfg
        .kappas
        .iter()
        .enumerate()
        .map(|(ki, &kappa)| {
            let cells: Vec<&Option<(Vec<u32>, bool)>> = per_trial.iter().map(|r| &r[ki]).collect();
            let hit: Vec<&(Vec<u32>, bool)> = cells.iter().filter_map(|c| c.as_ref()).collect();
            let diameters: Vec<Vec<u32>> = cells
                .iter()
                .map(|c| c.as_ref().map_or(Vec::new(), |c| c.0.clone()))
                .collect();
            let mut all: Vec<u32> = diameters.iter().flatten().copied().collect();
            all.sort_unstable();
            let denom = hit.len().max(1) as f64;
            KappaRow {
                kappa,
                missed: cells.len() - hit.len(),
                q50: quantile(&all, 0.5),
                q90: quantile(&all, 0.9),
                q99: quantile(&all, 0.99),
                connected_frequency: hit.iter().filter(|c| c.1).count() as f64 / denom,
                no_bulk_frequency: hit.iter().filter(|c| c.0.is_empty()).count() as f64 / denom,
                diameters,
            }
        })
        .collect();
    Ok(KappaSweep {
        config: cfg.clone(),
        rows,
    })
}

impl KappaSweep {
    /// Fraction of bootstrap resamples of the trials in which the pooled
    /// median bulk diameter is nonincreasing along the κ list. The same trial
    /// indices are drawn for every κ, preserving the coupling.
    pub fn median_nonincreasing_confidence(&self, reps: usize, seed: u64) -> f64 {
        let trials = self.config.trials;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0;
        for _ in 0..reps {
            let pick: Vec<usize> = (0..trials).map(|_| rng.gen_range(0..trials)).collect();
            let meds: Vec<Option<f64>> = self
                .rows
                .iter()
                .map(|r| pooled_median(&r.diameters, &pick))
                .collect();
            let ok = meds.windows(2).all(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => b <= a,
                (_, None) => true,
                (None, Some(_)) => false,
            });
            if ok {
                hits += 1;
            }
        }
        hits as f64 / reps as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "kappa,trials,missed,bulk_bubbles,q50,q90,q99,connected_frequency,no_bulk_frequency"
        )?;
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.kappa,
                r.diameters.len(),
                r.missed,
                r.diameters.iter().map(|d| d.len()).sum::<usize>(),
                o(r.q50),
                o(r.q90),
                o(r.q99),
                r.connected_frequency,
                r.no_bulk_frequency
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_square_root() {
        for (x, y) in [
            (3.0, 4.0),
            (-3.0, 4.0),
            (-3.0, -4.0),
            (3.0, -4.0),
            (1e-300, 1e-300),
            (-1e12, 4e-3),
            (0.0, 2.0),
        ] {
            let z = Complex64::new(x, y);
            let s = sqrt_upper(z, 1.0);
            assert!(s.im >= 0.0);
            assert!((s * s - z).norm() <= 1e-14 * z.norm(), "{z} {s}");
        }
        assert_eq!(
            sqrt_upper(Complex64::new(4.0, 0.0), -1.0),
            Complex64::new(-2.0, 0.0)
        );
        assert_eq!(
            sqrt_upper(Complex64::new(-4.0, 0.0), 1.0),
            Complex64::new(0.0, 2.0)
        );
    }

    #[test]
    fn zero_kappa_is_a_vertical_slit() {
        for dt in [1e-2, 1e-3, 2.5e-4] {
            let d = sample_driving(0.0, 1.0, dt, 5).unwrap();
            assert!(d.w.iter().all(|&w| w == 0.0));
            let t = trace(&d).unwrap();
            let z = t.tip();
            assert!(z[0].abs() < 1e-15 && (z[1] - 2.0).abs() < 1e-12, "{z:?}");
            let k = t.points.len() / 3;
            assert!((t.points[k][1] - 2.0 * (k as f64 * dt).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn driving_statistics() {
        let trials = 10_000;
        let (kappa, t) = (3.0, 0.5);
        let ends: Vec<f64> = (0..trials)
            .map(|s| {
                *sample_driving(kappa, t, 0.05, derive_seed(1, "drv", s))
                    .unwrap()
                    .w
                    .last()
                    .unwrap()
            })
            .collect();
        let mean = ends.iter().sum::<f64>() / trials as f64;
        let var = ends.iter().map(|x| x * x).sum::<f64>() / trials as f64;
        // Var(W_T²) = 2(κT)² for a centred Gaussian
        let se_var = (2.0f64).sqrt() * kappa * t / (trials as f64).sqrt();
        assert!((var - kappa * t).abs() < 5.0 * se_var, "{var}");
        assert!(mean.abs() < 5.0 * (kappa * t / trials as f64).sqrt());
    }

    #[test]
    fn capacity_is_two_t() {
        for (kappa, seed) in [(0.0, 1), (2.0, 2), (6.0, 3), (7.5, 4)] {
            let d = sample_driving(kappa, 1.0, 1e-3, seed).unwrap();
            let c = capacity_coefficient(&d, 1e6).unwrap();
            assert!((c - 2.0).abs() / 2.0 < 1e-4, "{kappa}: {c}");
        }
    }

    #[test]
    fn tips_stay_in_upper_half_plane() {
        for kappa in [1.0, 4.0, 7.0] {
            let t = trace(&sample_driving(kappa, 1.0, 1e-3, 9).unwrap()).unwrap();
            assert!(t.min_imaginary() >= -1e-12);
            assert_eq!(t.points[0], [0.0, 0.0]);
        }
    }

    #[test]
    fn brownian_scaling_is_exact_for_matched_steps() {
        let d = sample_driving(3.0, 1.0, 1e-3, 4).unwrap();
        let a = trace(&d).unwrap();
        let b = trace(&d.rescaled(2.0)).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((2.0 * p[0] - q[0]).abs() < 1e-9 && (2.0 * p[1] - q[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn brownian_scaling_with_same_step() {
        // Original at dt = 1e-3; W'_t = 2 W_{t/4} sampled at the same dt reads
        // W at spacing dt/4.
        let fine = sample_driving(2.0, 1.0, 2.5e-4, 6).unwrap();
        let quarter = fine.coarsen(4).unwrap().truncated(250);
        let scaled = DrivingPath {
            w: fine.w.iter().map(|w| 2.0 * w).collect(),
            t_max: 4.0,
            dt: 1e-3,
            ..fine.clone()
        };
        let rescaled_tip = tip(&scaled.truncated(1000)).unwrap();
        let original = tip(&quarter).unwrap();
        let gap = (original - tip(&fine.truncated(1000)).unwrap()).norm();
        assert!(gap > 0.0);
        assert!(
            (rescaled_tip - 2.0 * original).norm() <= 10.0 * gap,
            "{rescaled_tip} {original} {gap}"
        );
    }

    #[test]
    fn refinement_gaps_shrink() {
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for s in 0..5 {
            let d = sample_driving(2.0, 1.0, 6.25e-5, derive_seed(2, "conv", s)).unwrap();
            let t: Vec<Complex64> = [16, 4, 1]
                .iter()
                .map(|&f| tip(&d.coarsen(f).unwrap()).unwrap())
                .collect();
            g1 += (t[0] - t[1]).norm();
            g2 += (t[1] - t[2]).norm();
        }
        assert!(g2 < g1, "{g1} {g2}");
    }

    #[test]
    fn traversal_covers_segments() {
        let mut cells = Vec::new();
        for_each_cell([0.5, 0.5], [3.5, 0.5], |i, j| cells.push((i, j)));
        assert_eq!(cells, vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
        cells.clear();
        for_each_cell([0.5, 0.5], [2.5, 2.5], |i, j| cells.push((i, j)));
        let set: BTreeSet<_> = cells.into_iter().collect();
        assert!(set.contains(&(0, 0)) && set.contains(&(1, 1)) && set.contains(&(2, 2)));
        assert!(set.contains(&(1, 0)) && set.contains(&(0, 1)));
        // every consecutive pair of emitted cells is 4-adjacent
        let mut last: Option<(i64, i64)> = None;
        for_each_cell([0.2, 0.7], [5.9, 3.1], |i, j| {
            if let Some(l) = last {
                assert!((l.0 - i).abs() + (l.1 - j).abs() <= 1);
            }
            last = Some((i, j));
        });
    }

    #[test]
    fn right_of_slit_is_one_component() {
        let t = trace(&sample_driving(0.0, 1.0, 1e-2, 1).unwrap()).unwrap();
        let g = bubble_graph(
            &t.points,
            Rect {
                x0: -0.5,
                x1: 0.5,
                y0: 0.2,
                y1: 1.5,
            },
            0.02,
        )
        .unwrap();
        assert_eq!(g.bubbles.len(), 2);
        assert!(g.connected);
        let e = bubble_graph(
            &t.points,
            Rect {
                x0: 0.5,
                x1: 1.0,
                y0: 0.2,
                y1: 1.0,
            },
            0.02,
        )
        .unwrap_err();
        assert_eq!(e.code(), "trace-misses-window");
        // window straddling only the right side sees the slit on its frame
        let g = bubble_graph(
            &t.points,
            Rect {
                x0: -0.01,
                x1: 0.5,
                y0: 0.2,
                y1: 1.5,
            },
            0.02,
        )
        .unwrap();
        let big: Vec<_> = g.bubbles.iter().filter(|b| b.pixels > 10).collect();
        assert_eq!(big.len(), 1);
    }

    #[test]
    fn planted_loop() {
        let pts = vec![[0.1, 0.1], [0.8, 0.1], [0.8, 0.8], [0.1, 0.8], [0.1, 0.1]];
        let g = bubble_graph(
            &pts,
            Rect {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            },
            0.05,
        )
        .unwrap();
        assert_eq!(g.bubbles.len(), 2);
        assert_eq!(g.bubbles.iter().filter(|b| !b.touches_frame).count(), 1);
        assert_eq!(g.bulk().count(), 1);
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn partition_matches_naive_flood_fill() {
        let t = trace(&sample_driving(6.0, 1.0, 2e-3, 3).unwrap()).unwrap();
        let g = bubble_graph(&t.points, Rect::bulk(), 1.5 / 48.0).unwrap();
        let r = rasterize(&t.points, &Rect::bulk(), 1.5 / 48.0).unwrap();
        let (w, h) = (r.width, r.height);
        // label propagation to a fixed point
        let mut lab: Vec<usize> = (0..w * h).collect();
        loop {
            let mut changed = false;
            for p in 0..w * h {
                if r.trace[p] {
                    continue;
                }
                let (i, j) = (p % w, p / w);
                let mut nb = vec![];
                if i > 0 {
                    nb.push(p - 1)
                }
                if i + 1 < w {
                    nb.push(p + 1)
                }
                if j > 0 {
                    nb.push(p - w)
                }
                if j + 1 < h {
                    nb.push(p + w)
                }
                for q in nb {
                    if !r.trace[q] && lab[q] < lab[p] {
                        lab[p] = lab[q];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let classes: BTreeSet<usize> = (0..w * h)
            .filter(|&p| !r.trace[p])
            .map(|p| lab[p])
            .collect();
        assert_eq!(classes.len(), g.bubbles.len());
        for p in 0..w * h {
            for q in 0..w * h {
                if !r.trace[p] && !r.trace[q] && (p * 31 + q) % 97 == 0 {
                    assert_eq!(lab[p] == lab[q], g.labels[p] == g.labels[q]);
                }
            }
        }
        assert_eq!(
            g.bubbles.iter().map(|b| b.pixels).sum::<usize>() + g.trace_pixels,
            w * h
        );
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = SweepConfig {
            kappas: vec![2.0, 6.0],
            trials: 4,
            t_max: 1.0,
            dt: 2e-3,
            window: Rect::bulk(),
            px: 1.5 / 64.0,
            seed: 11,
        };
        let a = kappa_sweep(&cfg).unwrap();
        let b = kappa_sweep(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(a.rows.len(), 2);
    }
}
