//! Resolved experiment configuration. Every subcommand's flags double as its
//! JSON config, so a manifest can replay a run without the original command
//! line.

use std::path::PathBuf;

use carpetlab::gff::LabelField;
use carpetlab::loewner::Rect;
use carpetlab::pathgraph::ScaleFamily;
use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub checked: bool,
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Sample retention trees and report per-level statistics.
    Percolate(PercolateArgs),
    /// Extract carpet approximations and run the finite-depth Whyburn checks.
    Carpet(CarpetArgs),
    /// Iterate the goodness recursion, optionally against Monte Carlo.
    Theta(ThetaArgs),
    /// Count fractal paths on a planted scale family.
    Paths(PathsArgs),
    /// Gaussian free field experiments.
    Gff(GffArgs),
    /// Loewner traces and bubble statistics.
    Sle(SleArgs),
    /// Render a carpet, cluster set or trace artifact.
    Render(RenderArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Percolate(_) => "percolate",
            Command::Carpet(_) => "carpet",
            Command::Theta(_) => "theta",
            Command::Paths(_) => "paths",
            Command::Gff(_) => "gff",
            Command::Sle(_) => "sle",
            Command::Render(_) => "render",
        }
    }
}

/// Serde defaults, kept equal to the flag defaults so a config file may omit
/// anything the command line may omit.
mod d {
    use super::{Style, TraceFormat};

    pub fn zero() -> u32 {
        0
    }
    pub fn one() -> u32 {
        1
    }
    pub fn two() -> u32 {
        2
    }
    pub fn three() -> u32 {
        3
    }
    pub fn four() -> u32 {
        4
    }
    pub fn six() -> u32 {
        6
    }
    pub fn eight() -> u32 {
        8
    }
    pub fn one_u64() -> u64 {
        1
    }
    pub fn one_usize() -> usize {
        1
    }
    pub fn three_usize() -> usize {
        3
    }
    pub fn fifty() -> usize {
        50
    }
    pub fn thousand() -> usize {
        1000
    }
    pub fn size() -> u32 {
        512
    }
    pub fn beta() -> f64 {
        1.0 / 20000.0
    }
    pub fn node_budget() -> u64 {
        carpetlab::pathgraph::DEFAULT_NODE_BUDGET
    }
    pub fn origin() -> Vec<i64> {
        vec![0, 0]
    }
    pub fn grid() -> usize {
        32
    }
    pub fn radius() -> i64 {
        4
    }
    pub fn thresholds() -> Vec<f64> {
        vec![1.2, 1.6, 2.0]
    }
    pub fn multiples() -> Vec<f64> {
        vec![1.0, 2.0, 3.0, 4.0, 5.0]
    }
    pub fn grid_cap() -> usize {
        carpetlab::gff::DEFAULT_GRID_CAP
    }
    pub fn iota() -> f64 {
        0.5
    }
    pub fn kappas() -> Vec<f64> {
        vec![2.0]
    }
    pub fn unit() -> f64 {
        1.0
    }
    pub fn dt() -> f64 {
        1e-3
    }
    pub fn window() -> Vec<f64> {
        vec![-0.75, 0.75, 0.25, 1.75]
    }
    pub fn px() -> f64 {
        1.5 / 128.0
    }
    pub fn format() -> TraceFormat {
        TraceFormat::Csv
    }
    pub fn style() -> Style {
        Style::Png
    }
}

fn check(errors: &mut Vec<String>, ok: bool, msg: impl Into<String>) {
    if !ok {
        errors.push(msg.into());
    }
}

fn check_p(errors: &mut Vec<String>, p: f64) {
    check(errors, (0.0..=1.0).contains(&p), format!("p: must lie in [0, 1], got {p}"));
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct PercolateArgs {
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub base: u32,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub depth: u32,
    #[arg(long, default_value_t = d::one_u64())]
    #[serde(default = "d::one_u64")]
    pub trials: u64,
    /// Also write the removed-box clusters of the first trial.
    #[arg(long)]
    #[serde(default)]
    pub clusters: bool,
    #[arg(long, value_enum, default_value_t = Rule::CornerClosure)]
    #[serde(default)]
    pub rule: Rule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Edge,
    #[default]
    CornerClosure,
}

impl Rule {
    pub fn adjacency(self) -> carpetlab::percolation::AdjacencyRule {
        match self {
            Rule::Edge => carpetlab::percolation::AdjacencyRule::EdgeAdjacency,
            Rule::CornerClosure => carpetlab::percolation::AdjacencyRule::CornerClosure,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct CarpetArgs {
    #[arg(long = "N", default_value_t = d::six())]
    #[serde(rename = "N", default = "d::six")]
    pub base: u32,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub depth: u32,
    /// Extra goodness levels beyond `depth` used in place of ∞-good.
    #[arg(long, default_value_t = d::three())]
    #[serde(default = "d::three")]
    pub budget: u32,
    /// Depth of the sampled tree; budgets are capped by what it resolves.
    /// Defaults to `depth`.
    #[arg(long)]
    #[serde(default)]
    pub tree_depth: Option<u32>,
    #[arg(long, default_value_t = d::one_u64())]
    #[serde(default = "d::one_u64")]
    pub samples: u64,
    /// Render the first sample (PNG and SVG).
    #[arg(long)]
    #[serde(default)]
    pub render: bool,
    /// Finest box level drawn in renders.
    #[arg(long)]
    #[serde(default)]
    pub render_depth: Option<u32>,
    #[arg(long, default_value_t = d::size())]
    #[serde(default = "d::size")]
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ThetaArgs {
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub base: u32,
    #[arg(long)]
    pub p: f64,
    #[arg(long = "M", default_value_t = d::fifty())]
    #[serde(rename = "M", default = "d::fifty")]
    pub max_m: usize,
    /// Monte Carlo trees per m (0 skips the comparison).
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub mc_trials: u64,
    /// Largest m for the Monte Carlo comparison.
    #[arg(long, default_value_t = d::four())]
    #[serde(default = "d::four")]
    pub mc_max_m: u32,
    /// Also locate the threshold p0(N).
    #[arg(long)]
    #[serde(default)]
    pub threshold: bool,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct PathsArgs {
    #[arg(long, default_value_t = d::one())]
    #[serde(default = "d::one")]
    pub rho: u32,
    #[arg(long = "N", default_value_t = d::eight())]
    #[serde(rename = "N", default = "d::eight")]
    pub base: u32,
    /// Path level k.
    #[arg(long, default_value_t = d::zero())]
    #[serde(default = "d::zero")]
    pub level: u32,
    #[arg(long, default_value_t = d::three_usize())]
    #[serde(default = "d::three_usize")]
    pub max_len: usize,
    /// JSON scale family; its contents are copied into the manifest.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<PathBuf>,
    #[arg(skip)]
    #[serde(default)]
    pub family_data: Option<ScaleFamily>,
    #[arg(long, default_value_t = d::beta())]
    #[serde(default = "d::beta")]
    pub beta: f64,
    #[arg(long, default_value_t = d::node_budget())]
    #[serde(default = "d::node_budget")]
    pub budget: u64,
    /// Start box center `x,y` (a unit box).
    #[arg(long, value_delimiter = ',', default_values_t = d::origin())]
    #[serde(default = "d::origin")]
    pub start: Vec<i64>,
    /// Constant of the length bound; defaults to 10000·rho.
    #[arg(long)]
    #[serde(default)]
    pub c: Option<i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GffMode {
    Covariance,
    Markov,
    Telescope,
    Tail,
    Nice,
    Harness,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct GffArgs {
    #[arg(long, value_enum)]
    pub mode: GffMode,
    #[arg(long, default_value_t = d::grid())]
    #[serde(default = "d::grid")]
    pub grid: usize,
    /// Window half-width r (Markov window, tail window, telescoping scales ignore it).
    #[arg(long, default_value_t = d::radius())]
    #[serde(default = "d::radius")]
    pub radius: i64,
    #[arg(long, default_value_t = d::thousand())]
    #[serde(default = "d::thousand")]
    pub trials: usize,
    #[arg(long = "N", default_value_t = d::four())]
    #[serde(rename = "N", default = "d::four")]
    pub base: u32,
    #[arg(long, default_value_t = d::one())]
    #[serde(default = "d::one")]
    pub rho: u32,
    /// Number of scales m̄.
    #[arg(long, default_value_t = d::two())]
    #[serde(default = "d::two")]
    pub levels: u32,
    /// Thresholds M for the nice-vertex classification.
    #[arg(long, value_delimiter = ',', default_values_t = d::thresholds())]
    #[serde(default = "d::thresholds")]
    pub thresholds: Vec<f64>,
    /// Tail thresholds as multiples of σ.
    #[arg(long, value_delimiter = ',', default_values_t = d::multiples())]
    #[serde(default = "d::multiples")]
    pub multiples: Vec<f64>,
    /// Largest grid side accepted.
    #[arg(long, default_value_t = d::grid_cap())]
    #[serde(default = "d::grid_cap")]
    pub grid_cap: usize,
    /// Run-length JSON label field for the component harness.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[arg(skip)]
    #[serde(default)]
    pub labels_data: Option<LabelField>,
    #[arg(long, default_value_t = d::iota())]
    #[serde(default = "d::iota")]
    pub iota: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    Csv,
    Bin,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct SleArgs {
    #[arg(long, value_delimiter = ',', default_values_t = d::kappas())]
    #[serde(default = "d::kappas")]
    pub kappa: Vec<f64>,
    #[arg(long = "T", default_value_t = d::unit())]
    #[serde(rename = "T", default = "d::unit")]
    pub t_max: f64,
    #[arg(long, default_value_t = d::dt())]
    #[serde(default = "d::dt")]
    pub dt: f64,
    /// Bubble window `x0,x1,y0,y1`.
    #[arg(long, value_delimiter = ',', default_values_t = d::window())]
    #[serde(default = "d::window")]
    pub window: Vec<f64>,
    #[arg(long, default_value_t = d::px())]
    #[serde(default = "d::px")]
    pub px: f64,
    #[arg(long, default_value_t = d::one_usize())]
    #[serde(default = "d::one_usize")]
    pub trials: usize,
    #[arg(long, value_enum, default_value_t = d::format())]
    #[serde(default = "d::format")]
    pub format: TraceFormat,
    #[arg(long)]
    #[serde(default)]
    pub render: bool,
}

impl SleArgs {
    pub fn rect(&self) -> Rect {
        Rect { x0: self.window[0], x1: self.window[1], y0: self.window[2], y1: self.window[3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Png,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = d::style())]
    #[serde(default = "d::style")]
    pub style: Style,
    #[arg(long, default_value_t = d::size())]
    #[serde(default = "d::size")]
    pub size: u32,
    /// SHA-256 of the input, filled in when the run is resolved.
    #[arg(skip)]
    #[serde(default)]
    pub input_sha256: Option<String>,
}

impl ExperimentConfig {
    /// Every offending field, empty when the config is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        check(&mut e, self.version == CONFIG_VERSION, format!("version: expected {CONFIG_VERSION}, got {}", self.version));
        match &self.command {
            Command::Percolate(a) => {
                check(&mut e, a.base >= 2, format!("N: must be at least 2, got {}", a.base));
                check_p(&mut e, a.p);
                check(&mut e, a.depth <= carpetlab::percolation::DEFAULT_MAX_DEPTH, format!("depth: at most {}", carpetlab::percolation::DEFAULT_MAX_DEPTH));
                check(&mut e, a.trials >= 1, "trials: must be positive");
            }
            Command::Carpet(a) => {
                check(&mut e, a.base >= carpetlab::carpet::MIN_TRIM_BASE, format!("N: corner trimming needs N >= 6, got {}", a.base));
                check_p(&mut e, a.p);
                check(&mut e, a.depth >= 1, "depth: must be positive");
                let td = a.tree_depth.unwrap_or(a.depth);
                check(&mut e, td >= a.depth, format!("tree-depth: must be at least depth {}, got {td}", a.depth));
                check(&mut e, td <= carpetlab::percolation::DEFAULT_MAX_DEPTH, format!("tree-depth: at most {}", carpetlab::percolation::DEFAULT_MAX_DEPTH));
                check(&mut e, a.samples >= 1, "samples: must be positive");
                check(&mut e, (16..=8192).contains(&a.size), "size: must lie in 16..=8192");
            }
            Command::Theta(a) => {
                check(&mut e, a.base >= 2, format!("N: must be at least 2, got {}", a.base));
                check_p(&mut e, a.p);
                check(&mut e, a.max_m <= carpetlab::goodness::THETA_CAP, format!("M: at most {}", carpetlab::goodness::THETA_CAP));
                check(&mut e, a.mc_max_m <= 6, "mc-max-m: at most 6");
            }
            Command::Paths(a) => {
                check(&mut e, a.rho >= 1, "rho: must be positive");
                check(&mut e, a.base >= 2, "N: must be at least 2");
                check(&mut e, a.max_len >= 1, "max-len: must be positive");
                check(&mut e, a.start.len() == 2, "start: expected x,y");
                check(&mut e, a.beta > 0.0 && a.beta.is_finite(), "beta: must be positive");
                if let Some(f) = &a.family_data {
                    check(&mut e, f.rho == a.rho && f.base == a.base, "family: rho and N must match the flags");
                    e.extend(f.validate().into_iter().map(|m| format!("family: {m}")));
                }
            }
            Command::Gff(a) => {
                check(&mut e, a.grid >= 3, "grid: must be at least 3");
                check(&mut e, a.grid <= a.grid_cap, format!("grid: {} exceeds grid-cap {}", a.grid, a.grid_cap));
                check(&mut e, a.trials >= 2 || matches!(a.mode, GffMode::Telescope | GffMode::Harness | GffMode::Nice), "trials: need at least 2");
                check(&mut e, a.radius >= 2, "radius: must be at least 2");
                check(&mut e, a.base >= 2 && a.rho >= 1 && a.levels >= 1, "N, rho, levels: need N >= 2, rho >= 1, levels >= 1");
                check(&mut e, !a.thresholds.is_empty(), "thresholds: need at least one");
                check(&mut e, !a.multiples.is_empty() && a.multiples.iter().all(|m| *m > 0.0), "multiples: must be positive");
                check(&mut e, a.iota > 0.0, "iota: must be positive");
                if a.mode == GffMode::Harness {
                    check(&mut e, a.labels_data.is_some(), "labels: required in harness mode");
                }
            }
            Command::Sle(a) => {
                check(&mut e, !a.kappa.is_empty() && a.kappa.iter().all(|k| *k >= 0.0 && k.is_finite()), "kappa: values must be finite and >= 0");
                check(&mut e, a.dt > 0.0 && a.t_max >= a.dt, "dt, T: need dt > 0 and T >= dt");
                check(&mut e, a.t_max / a.dt <= 2e5, "T/dt: at most 200000 steps");
                check(&mut e, a.window.len() == 4, "window: expected x0,x1,y0,y1");
                if a.window.len() == 4 {
                    let r = a.rect();
                    check(&mut e, r.x1 > r.x0 && r.y1 > r.y0 && r.y0 >= 0.0, "window: need x1 > x0, y1 > y0 >= 0");
                    check(&mut e, a.px > 0.0 && (r.x1 - r.x0) / a.px <= 4096.0 && (r.y1 - r.y0) / a.px <= 4096.0, "px: at most 4096 pixels per side");
                }
                check(&mut e, a.trials >= 1, "trials: must be positive");
            }
            Command::Render(a) => {
                check(&mut e, (16..=8192).contains(&a.size), "size: must lie in 16..=8192");
            }
        }
        e
    }
}
