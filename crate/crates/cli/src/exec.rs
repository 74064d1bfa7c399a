use std::fs;

use carpetlab::boxlattice::Rational;
use carpetlab::carpet::{dagger_sequence, star_trim, track_components, whyburn_report, WhyburnReport};
use carpetlab::gff::{
    component_harness, covariance_check, fluctuation_tail, markov_check, multiscale_decompose, nice_trend,
    sample_field_capped, write_gff_csv, GffSummary, NiceParams, Window,
};
use carpetlab::goodness::{estimate_root_goodness, p0_threshold, theta_sequence, write_goodness_csv};
use carpetlab::loewner::{kappa_sweep, sample_driving, trace, SweepConfig};
use carpetlab::pathgraph::{admissibility, path_census, proof_constant, write_census_csv, EnumerationConfig, PathBox, ScaleFamily};
use carpetlab::percolation::{clusters, write_stats_csv, RetentionConfig, RetentionTree};
use carpetlab::render::{carpet_scene, Artifact, Scene};
use carpetlab::rng::derive_seed;
use carpetlab::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Command, ExperimentConfig, GffMode, Style, TraceFormat};
use crate::output::{sha256_hex, Manifest, Writer};

/// Why a run stopped; each variant has its own exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(Vec<String>),
    Invariant(ViolationReport),
    Budget(Error),
    Other(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Invariant(_) => 3,
            Failure::Budget(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::Validation(v) => Failure::Validation(v),
            Error::BoxBudgetExceeded { .. } | Error::EnumerationBudgetExceeded(_) | Error::GridTooLarge { .. } => {
                Failure::Budget(e)
            }
            Error::OutOfRange(m) => Failure::Validation(vec![m]),
            Error::UnsupportedBase { .. }
            | Error::DepthExceeded { .. }
            | Error::FieldWindowTooSmall(_)
            | Error::WindowAtBoundary(_)
            | Error::ScaleNestingViolated(_) => Failure::Validation(vec![e.to_string()]),
            e => Failure::Other(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Other(e.into())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub invariant: String,
    pub trial: Option<u64>,
    /// Seed that reproduces the failing trial on its own.
    pub seed: Option<u64>,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ViolationReport {
    pub subcommand: String,
    pub root_seed: u64,
    pub invariants: Vec<String>,
    /// The failing trial with the smallest index.
    pub minimal: Violation,
    pub violations: Vec<Violation>,
}

struct Checks {
    on: bool,
    found: Vec<Violation>,
}

impl Checks {
    fn check(&mut self, ok: bool, invariant: &str, trial: Option<u64>, seed: Option<u64>, detail: impl FnOnce() -> String) {
        if self.on && !ok {
            self.found.push(Violation { invariant: invariant.into(), trial, seed, detail: detail() });
        }
    }
}

/// Loads referenced input files into the config so the manifest alone can
/// replay the run.
pub fn resolve(mut cfg: ExperimentConfig) -> Result<ExperimentConfig, Failure> {
    let mut errors = Vec::new();
    match &mut cfg.command {
        Command::Paths(a) => {
            if let Some(path) = a.family.take() {
                match ScaleFamily::load(&path) {
                    Ok(f) => a.family_data = Some(f),
                    Err(e) => errors.push(format!("family: {}: {e}", path.display())),
                }
            }
        }
        Command::Gff(a) => {
            if let Some(path) = a.labels.take() {
                match fs::read(&path).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice(&b)?)) {
                    Ok(l) => a.labels_data = Some(l),
                    Err(e) => errors.push(format!("labels: {}: {e}", path.display())),
                }
            }
        }
        Command::Render(a) => match fs::read(&a.input) {
            Ok(bytes) => {
                let digest = sha256_hex(&bytes);
                if let Some(expected) = &a.input_sha256 {
                    if *expected != digest {
                        errors.push(format!("input: {} no longer matches its recorded sha256", a.input.display()));
                    }
                }
                a.input_sha256 = Some(digest);
            }
            Err(e) => errors.push(format!("input: {}: {e}", a.input.display())),
        },
        _ => {}
    }
    errors.extend(cfg.validate());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Validation(errors))
    }
}

/// Runs a resolved config, writes its outputs and manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<Manifest, Failure> {
    let mut w = Writer::new(&cfg.out)?;
    let mut checks = Checks { on: cfg.checked, found: Vec::new() };
    let seed = cfg.seed;
    match &cfg.command {
        Command::Percolate(a) => {
            let per = (0..a.trials)
                .into_par_iter()
                .map(|t| {
                    let rc = RetentionConfig::new(a.base, a.p, a.depth, derive_seed(seed, "percolation", t));
                    let tree = RetentionTree::sample(&rc)?;
                    Ok((tree.stats(), (t == 0).then_some(tree)))
                })
                .collect::<carpetlab::Result<Vec<_>>>()?;
            let n2 = (a.base as i128).pow(2);
            for (t, (stats, _)) in per.iter().enumerate() {
                let s = derive_seed(seed, "percolation", t as u64);
                for (n, row) in stats.iter().enumerate() {
                    let scale = Rational::new(1, n2.pow(n as u32));
                    checks.check(
                        row.area == Rational::from(row.retained_boxes as i128) * scale,
                        "area-equals-box-count",
                        Some(t as u64),
                        Some(s),
                        || format!("level {n}: area {} with {} boxes", row.area, row.retained_boxes),
                    );
                    if n > 0 {
                        let prev = &stats[n - 1];
                        checks.check(
                            row.retained_boxes + row.removed_boxes == prev.retained_boxes * n2 as usize,
                            "children-partition",
                            Some(t as u64),
                            Some(s),
                            || format!("level {n}: {} + {} children of {} boxes", row.retained_boxes, row.removed_boxes, prev.retained_boxes),
                        );
                        checks.check(row.area <= prev.area, "area-nonincreasing", Some(t as u64), Some(s), || {
                            format!("level {n}: {} > {}", row.area, prev.area)
                        });
                    }
                }
            }
            let rows: Vec<_> = per.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
            w.put_with("stats.csv", |b| write_stats_csv(b, &rows))?;
            let first = per[0].1.as_ref().expect("trial 0 keeps its tree");
            w.put_json("tree.json", &first.to_document())?;
            if a.clusters {
                let set = clusters(&first.removed_boxes(first.depth()), a.rule.adjacency());
                w.put_json("clusters.json", &set.to_document()?)?;
            }
        }
        Command::Carpet(a) => {
            let td = a.tree_depth.unwrap_or(a.depth);
            #[derive(Serialize)]
            struct SampleReport {
                sample: u64,
                seed: u64,
                report: WhyburnReport,
            }
            let per = (0..a.samples)
                .into_par_iter()
                .map(|s| {
                    let sd = derive_seed(seed, "carpet", s);
                    let tree = RetentionTree::sample(&RetentionConfig::new(a.base, a.p, td, sd))?;
                    let carpet = star_trim(&tree, &dagger_sequence(&tree, a.depth, a.budget)?)?;
                    let report = whyburn_report(&carpet, &track_components(&carpet));
                    Ok((SampleReport { sample: s, seed: sd, report }, (s == 0).then_some(carpet)))
                })
                .collect::<carpetlab::Result<Vec<_>>>()?;
            let mut reports = Vec::new();
            let mut first = None;
            for (r, c) in per {
                checks.check(r.report.pass, "whyburn-finite-depth", Some(r.sample), Some(r.seed), || {
                    let x = &r.report;
                    format!(
                        "gap>0 {}, diameters nonincreasing {}, area nonincreasing {}, fifth violations {}, merges {}, child property {}",
                        x.min_gap_positive,
                        x.diameters_nonincreasing,
                        x.area_nonincreasing,
                        x.fifth_violations,
                        x.merge_violations,
                        x.child_property_violations
                    )
                });
                first = first.or(c);
                reports.push(r);
            }
            w.put_json("whyburn.json", &reports)?;
            let mut carpet = first.expect("at least one sample");
            let artifact = Artifact::Carpet(Box::new(carpet.clone()));
            w.put("carpet.json", artifact.to_json()?.as_bytes())?;
            if a.render {
                if let Some(rd) = a.render_depth {
                    carpet.holes.retain(|h| h.addr.level <= rd);
                }
                put_scene(&mut w, "carpet", &carpet_scene(&carpet, a.size), None)?;
            }
        }
        Command::Theta(a) => {
            let seq = theta_sequence(a.base, a.p, a.max_m)?;
            let mut csv = String::from("m,theta_m\n");
            for (m, v) in seq.values.iter().enumerate() {
                csv.push_str(&format!("{m},{v}\n"));
            }
            w.put("theta.csv", csv.as_bytes())?;
            for m in 1..seq.values.len() {
                checks.check(seq.values[m] <= seq.values[m - 1], "theta-nonincreasing", None, None, || {
                    format!("theta_{m} = {} > theta_{} = {}", seq.values[m], m - 1, seq.values[m - 1])
                });
            }
            if a.mc_trials > 0 {
                let rows = estimate_root_goodness(a.base, a.p, a.mc_max_m, a.mc_trials, seed)?;
                for r in &rows {
                    checks.check(r.z_score() <= 5.0, "mc-agrees-with-recursion", None, Some(seed), || {
                        format!("m {}: estimate {} vs theta {} (z {:.2})", r.m, r.mc_estimate, r.theta_m, r.z_score())
                    });
                }
                w.put_with("goodness.csv", |b| write_goodness_csv(b, &rows))?;
            }
            if a.threshold {
                w.put_json("threshold.json", &p0_threshold(a.base, 1e-10)?)?;
            }
        }
        Command::Paths(a) => {
            let family = a.family_data.clone().unwrap_or_else(|| ScaleFamily::empty(a.rho, a.base));
            let adm = admissibility(&family, a.beta);
            checks.check(adm.ok(), "beta-admissible", None, None, || {
                format!("neighbour sum {} > 1/2 at {}", adm.worst_sum, adm.worst_box)
            });
            let cfg = EnumerationConfig { level: a.level, max_len: a.max_len, budget: a.budget };
            let c = a.c.unwrap_or_else(|| proof_constant(a.rho));
            let census = path_census(PathBox::unit(a.start[0], a.start[1]), cfg, &family, a.beta, c)?;
            for (l, &v) in census.s0_violations.iter().enumerate() {
                checks.check(v == 0, "long-paths-mostly-unit-boxes", None, None, || format!("{v} paths of length {l}"));
            }
            checks.check(census.box_fraction.violations == 0, "box-fraction-bound", None, None, || {
                format!("{} of {} evaluated paths", census.box_fraction.violations, census.box_fraction.evaluated)
            });
            w.put_with("census.csv", |b| write_census_csv(std::slice::from_ref(&census), b))?;
            #[derive(Serialize)]
            struct PathsReport<'a> {
                admissibility: &'a carpetlab::pathgraph::Admissibility,
                census: &'a carpetlab::pathgraph::PathCensus,
                growth_rates: Vec<f64>,
            }
            w.put_json("paths.json", &PathsReport { admissibility: &adm, census: &census, growth_rates: census.growth_rates() })?;
        }
        Command::Gff(a) => {
            let o = (a.grid / 2) as i64;
            let params = NiceParams { base: a.base, rho: a.rho, levels: a.levels };
            let mut summary =
                GffSummary { grid: a.grid, window: format!("r={}", a.radius), trials: a.trials, ..Default::default() };
            let mut rows = Vec::new();
            match a.mode {
                GffMode::Covariance => {
                    let sel = (a.grid > 32).then(|| vec![(o * a.grid as i64 + o) as usize]);
                    let rep = covariance_check(a.grid, a.trials, seed, sel)?;
                    checks.check(rep.max_z <= 6.0, "covariance-matches-green", None, Some(seed), || {
                        format!("max z {:.2}", rep.max_z)
                    });
                    summary.window = "full".into();
                    summary.max_cov_error = Some(rep.max_abs_error);
                    w.put_json("covariance.json", &rep)?;
                }
                GffMode::Markov => {
                    let win = Window::open_box([o, o], a.radius);
                    let rep = markov_check(a.grid, win, a.trials, seed)?;
                    checks.check(rep.max_residual <= 1e-8, "harmonic-mean-value", None, Some(seed), || {
                        format!("residual {:e}", rep.max_residual)
                    });
                    checks.check(
                        rep.cross_max_z <= 6.0 && rep.remainder_max_z <= 6.0,
                        "markov-independence",
                        None,
                        Some(seed),
                        || format!("cross z {:.2}, remainder z {:.2}", rep.cross_max_z, rep.remainder_max_z),
                    );
                    w.put_json("markov.json", &rep)?;
                }
                GffMode::Telescope => {
                    let errors: Vec<f64> = (0..a.trials as u64)
                        .into_par_iter()
                        .map(|t| {
                            let f = sample_field_capped(a.grid, derive_seed(seed, "gff-telescope", t), a.grid_cap)?;
                            Ok(multiscale_decompose(&f, [0, 0], a.rho, a.base, a.levels)?.max_error)
                        })
                        .collect::<carpetlab::Result<_>>()?;
                    for (t, e) in errors.iter().enumerate() {
                        checks.check(
                            *e <= 1e-9,
                            "telescoping-identity",
                            Some(t as u64),
                            Some(derive_seed(seed, "gff-telescope", t as u64)),
                            || format!("max error {e:e}"),
                        );
                    }
                    summary.window = format!("levels={}", a.levels);
                    w.put_json("telescope.json", &serde_json::json!({ "params": params, "max_error": errors }))?;
                }
                GffMode::Tail => {
                    let rep = fluctuation_tail(a.grid, a.radius, a.trials, seed, &a.multiples)?;
                    summary.tail_fit_c = Some(rep.c_hat);
                    w.put_json("tail.json", &rep)?;
                }
                GffMode::Nice => {
                    let trend = nice_trend(a.grid, params, &a.thresholds, a.trials, seed, a.grid_cap)?;
                    for (t, m) in a.thresholds.iter().enumerate() {
                        rows.push(GffSummary {
                            grid: a.grid,
                            window: format!("M={m}"),
                            trials: a.trials,
                            bad_fraction_by_level: (1..=a.levels).map(|j| trend.bad_fraction(t, j)).collect(),
                            ..Default::default()
                        });
                    }
                    w.put_json("nice.json", &trend)?;
                }
                GffMode::Harness => {
                    let labels = a.labels_data.as_ref().expect("validated");
                    let rep = component_harness(labels, a.iota);
                    checks.check(rep.pass, "bad-component-diameter", None, None, || {
                        format!("diameter {} > {}", rep.max_diameter, rep.limit)
                    });
                    summary.window = format!("R={}", labels.r);
                    summary.grid = (2 * labels.r + 1) as usize;
                    summary.trials = 1;
                    w.put_json("harness.json", &rep)?;
                }
            }
            if rows.is_empty() {
                rows.push(summary);
            }
            w.put_with("gff.csv", |b| write_gff_csv(&rows, b))?;
        }
        Command::Sle(a) => {
            let sweep = kappa_sweep(&SweepConfig {
                kappas: a.kappa.clone(),
                trials: a.trials,
                t_max: a.t_max,
                dt: a.dt,
                window: a.rect(),
                px: a.px,
                seed,
            })?;
            w.put_with("bubbles.csv", |b| sweep.write_csv(b))?;
            w.put_json("sweep.json", &sweep)?;
            let s0 = derive_seed(seed, "sle", 0);
            for &k in &a.kappa {
                let tr = trace(&sample_driving(k, a.t_max, a.dt, s0)?)?;
                checks.check(tr.min_imaginary() >= -1e-9, "trace-in-upper-half-plane", Some(0), Some(s0), || {
                    format!("kappa {k}: min Im {}", tr.min_imaginary())
                });
                let stem = format!("trace-k{k}");
                match a.format {
                    TraceFormat::Csv => w.put_with(&format!("{stem}.csv"), |b| tr.write_csv(b))?,
                    TraceFormat::Bin => w.put_with(&format!("{stem}.bin"), |b| tr.write_binary(b))?,
                }
                if a.render {
                    let scene = Artifact::Trace(tr).scene(512);
                    put_scene(&mut w, &stem, &scene, Some(Style::Png))?;
                }
            }
        }
        Command::Render(a) => {
            let artifact = Artifact::from_json(&fs::read_to_string(&a.input)?)?;
            put_scene(&mut w, "render", &artifact.scene(a.size), Some(a.style))?;
        }
    }
    let report = if checks.found.is_empty() {
        None
    } else {
        let mut found = checks.found;
        found.sort_by_key(|v| v.trial.unwrap_or(0));
        let mut names: Vec<String> = found.iter().map(|v| v.invariant.clone()).collect();
        names.sort();
        names.dedup();
        let rep = ViolationReport {
            subcommand: cfg.command.name().into(),
            root_seed: seed,
            invariants: names,
            minimal: found[0].clone(),
            violations: found,
        };
        w.put_json("violations.json", &rep)?;
        Some(rep)
    };
    let manifest = w.finish(cfg)?;
    match report {
        Some(rep) => Err(Failure::Invariant(rep)),
        None => Ok(manifest),
    }
}

fn put_scene(w: &mut Writer, stem: &str, scene: &Scene, style: Option<Style>) -> carpetlab::Result<()> {
    if style != Some(Style::Svg) {
        w.put(&format!("{stem}.png"), &scene.png_bytes()?)?;
    }
    if style != Some(Style::Png) {
        w.put(&format!("{stem}.svg"), scene.to_svg().as_bytes())?;
    }
    Ok(())
}

/// Replays a manifest into `out` and compares every output digest.
pub fn rerun(manifest: &Manifest, out: &std::path::Path) -> Result<Manifest, Failure> {
    let mut cfg = manifest.config.clone();
    cfg.out = out.to_path_buf();
    let cfg = resolve(cfg)?;
    let fresh = match run(&cfg) {
        Ok(m) => m,
        Err(Failure::Invariant(_)) => Manifest::load(&out.join(crate::output::MANIFEST))?,
        Err(e) => return Err(e),
    };
    let mut mismatches = Vec::new();
    for old in &manifest.outputs {
        match fresh.outputs.iter().find(|o| o.file == old.file) {
            Some(new) if new.sha256 == old.sha256 => {}
            Some(new) => mismatches.push(Violation {
                invariant: "rerun-byte-identical".into(),
                trial: None,
                seed: Some(cfg.seed),
                detail: format!("{}: {} != {}", old.file, new.sha256, old.sha256),
            }),
            None => mismatches.push(Violation {
                invariant: "rerun-byte-identical".into(),
                trial: None,
                seed: Some(cfg.seed),
                detail: format!("{} was not produced", old.file),
            }),
        }
    }
    if mismatches.is_empty() {
        Ok(fresh)
    } else {
        Err(Failure::Invariant(ViolationReport {
            subcommand: "rerun".into(),
            root_seed: cfg.seed,
            invariants: vec!["rerun-byte-identical".into()],
            minimal: mismatches[0].clone(),
            violations: mismatches,
        }))
    }
}
