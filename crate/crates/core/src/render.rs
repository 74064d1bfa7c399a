//! Deterministic SVG and PNG renders of carpets, cluster sets and traces.
//!
//! Everything is first laid out as a [`Scene`] in pixel coordinates; both
//! back ends draw the same scene. A pixel is covered by a rectangle iff its
//! center lies inside, and polylines use the grid traversal of the raster
//! code, so the PNG is the SVG rasterised without anti-aliasing.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::carpet::{CarpetApprox, HoleKind};
use crate::error::{Error, Result};
use crate::loewner::TracePolyline;
use crate::percolation::ClusterDocument;

pub type Color = [u8; 3];

pub const WHITE: Color = [255, 255, 255];
pub const FRAME: Color = [40, 40, 40];
pub const LIGHT_BLUE: Color = [173, 216, 230];
pub const ORANGE: Color = [255, 179, 102];
pub const GREEN: Color = [60, 170, 80];
pub const CLUSTER: Color = [70, 110, 200];
pub const TRACE: Color = [200, 40, 40];

/// Fill for holes created at `stage`: light-blue, orange, then darkening
/// blues.
pub fn stage_color(stage: u32) -> Color {
    match stage {
        0 | 1 => LIGHT_BLUE,
        2 => ORANGE,
        s => {
            let k = (s - 2).min(6) as u8;
            [120 - 12 * k, 150 - 14 * k, 210 - 15 * k]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Item {
    Rect {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        fill: Color,
    },
    Outline {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        stroke: Color,
    },
    Polyline {
        points: Vec<[f64; 2]>,
        stroke: Color,
    },
    Text {
        x: f64,
        y: f64,
        text: String,
        color: Color,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub items: Vec<Item>,
}

const MARGIN: f64 = 8.0;
const LEGEND_ROW: f64 = 16.0;

/// Maps `[0,1]²` (y up) into a `size`-pixel square with a margin, leaving
/// room below for `legend` rows.
struct Frame {
    size: f64,
}

impl Frame {
    fn x(&self, u: f64) -> f64 {
        MARGIN + u * self.size
    }
    fn y(&self, v: f64) -> f64 {
        MARGIN + (1.0 - v) * self.size
    }
    fn rect(&self, x0: f64, y0: f64, x1: f64, y1: f64, fill: Color) -> Item {
        Item::Rect {
            x: self.x(x0),
            y: self.y(y1),
            w: (x1 - x0) * self.size,
            h: (y1 - y0) * self.size,
            fill,
        }
    }
}

fn scene_with_legend(size: u32, mut items: Vec<Item>, legend: &[(Color, String)]) -> Scene {
    let s = size as f64;
    let top = MARGIN * 2.0 + s;
    for (k, (c, label)) in legend.iter().enumerate() {
        let y = top + k as f64 * LEGEND_ROW;
        items.push(Item::Rect {
            x: MARGIN,
            y,
            w: 10.0,
            h: 10.0,
            fill: *c,
        });
        items.push(Item::Outline {
            x: MARGIN,
            y,
            w: 10.0,
            h: 10.0,
            stroke: FRAME,
        });
        items.push(Item::Text {
            x: MARGIN + 16.0,
            y: y + 1.0,
            text: label.clone(),
            color: FRAME,
        });
    }
    let height = (top + legend.len() as f64 * LEGEND_ROW + MARGIN).ceil() as u32;
    Scene {
        width: size + 2 * MARGIN as u32,
        height,
        items,
    }
}

pub fn carpet_scene(carpet: &CarpetApprox, size: u32) -> Scene {
    let f = Frame { size: size as f64 };
    let mut items = vec![f.rect(0.0, 0.0, 1.0, 1.0, WHITE)];
    let mut stages: Vec<u32> = Vec::new();
    let mut any_trim = false;
    let mut holes: Vec<_> = carpet.holes.iter().collect();
    // coarse first so finer boxes stay visible
    holes.sort_by_key(|h| (h.addr.level, h.stage, h.addr.j, h.addr.i));
    for h in holes {
        let r = h.addr.rect();
        let to = |q: &crate::boxlattice::Rational| *q.numer() as f64 / *q.denom() as f64;
        let color = if h.kind == HoleKind::Trim {
            any_trim = true;
            GREEN
        } else {
            if !stages.contains(&h.stage) {
                stages.push(h.stage);
            }
            stage_color(h.stage)
        };
        items.push(f.rect(to(&r.x0), to(&r.y0), to(&r.x1), to(&r.y1), color));
    }
    items.push(Item::Outline {
        x: MARGIN,
        y: MARGIN,
        w: f.size,
        h: f.size,
        stroke: FRAME,
    });
    stages.sort_unstable();
    let mut legend: Vec<(Color, String)> = stages
        .iter()
        .map(|&s| (stage_color(s), format!("REMOVED AT LEVEL {s}")))
        .collect();
    if any_trim {
        legend.push((GREEN, "CORNER TRIM".into()));
    }
    scene_with_legend(size, items, &legend)
}

pub fn cluster_scene(doc: &ClusterDocument, size: u32) -> Scene {
    let f = Frame { size: size as f64 };
    let mut items = vec![f.rect(0.0, 0.0, 1.0, 1.0, WHITE)];
    for c in &doc.clusters {
        let side = (doc.base as f64).powi(c.filling_level as i32);
        for &(x0, x1, y) in &c.filling_runs {
            items.push(f.rect(
                x0 as f64 / side,
                y as f64 / side,
                x1 as f64 / side,
                (y + 1) as f64 / side,
                ORANGE,
            ));
        }
    }
    for c in &doc.clusters {
        for b in &c.boxes {
            let side = (doc.base as f64).powi(b[0] as i32);
            let (x, y) = (b[1] as f64 / side, b[2] as f64 / side);
            items.push(f.rect(x, y, x + 1.0 / side, y + 1.0 / side, CLUSTER));
        }
    }
    for c in &doc.clusters {
        let side = (doc.base as f64).powi(c.filling_level as i32);
        let points = c
            .outer_boundary
            .iter()
            .map(|&(x, y)| [f.x(x as f64 / side), f.y(y as f64 / side)])
            .collect();
        items.push(Item::Polyline {
            points,
            stroke: FRAME,
        });
    }
    items.push(Item::Outline {
        x: MARGIN,
        y: MARGIN,
        w: f.size,
        h: f.size,
        stroke: FRAME,
    });
    let legend = vec![
        (CLUSTER, "REMOVED BOXES".to_string()),
        (ORANGE, "FILLING".to_string()),
    ];
    scene_with_legend(size, items, &legend)
}

pub fn trace_scene(trace: &TracePolyline, size: u32) -> Scene {
    let f = Frame { size: size as f64 };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &trace.points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    lo[1] = 0.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9) * 1.1;
    let cx = (lo[0] + hi[0]) / 2.0;
    let map = |p: &[f64; 2]| [f.x((p[0] - cx) / span + 0.5), f.y(p[1] / span + 0.02)];
    let mut items = vec![f.rect(0.0, 0.0, 1.0, 1.0, WHITE)];
    items.push(Item::Polyline {
        points: vec![[f.x(0.0), f.y(0.02)], [f.x(1.0), f.y(0.02)]],
        stroke: FRAME,
    });
    items.push(Item::Polyline {
        points: trace.points.iter().map(map).collect(),
        stroke: TRACE,
    });
    items.push(Item::Outline {
        x: MARGIN,
        y: MARGIN,
        w: f.size,
        h: f.size,
        stroke: FRAME,
    });
    let legend = vec![(TRACE, format!("KAPPA={} T={}", trace.kappa, trace.t_max))];
    scene_with_legend(size, items, &legend)
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    kind: String,
    #[serde(flatten)]
    body: T,
}

/// A renderable input file.
#[derive(Clone, Debug)]
pub enum Artifact {
    Carpet(Box<CarpetApprox>),
    Clusters(ClusterDocument),
    Trace(TracePolyline),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Carpet(_) => "carpet",
            Artifact::Clusters(_) => "cluster-set",
            Artifact::Trace(_) => "trace",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(match self {
            Artifact::Carpet(c) => serde_json::to_string(&Tagged {
                kind: self.kind().into(),
                body: c,
            })?,
            Artifact::Clusters(d) => serde_json::to_string(d)?,
            Artifact::Trace(t) => serde_json::to_string(&Tagged {
                kind: self.kind().into(),
                body: t,
            })?,
        })
    }

    pub fn from_json(s: &str) -> Result<Artifact> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let kind = v
            .get("kind")
            .and_then(|k| k.as_str())
            .unwrap_or("")
            .to_string();
        match kind.as_str() {
            "carpet" => Ok(Artifact::Carpet(Box::new(
                serde_json::from_value::<Tagged<CarpetApprox>>(v)?.body,
            ))),
            "cluster-set" => Ok(Artifact::Clusters(serde_json::from_value(v)?)),
            "trace" => Ok(Artifact::Trace(
                serde_json::from_value::<Tagged<TracePolyline>>(v)?.body,
            )),
            other => Err(Error::Unrenderable(format!(
                "unknown artifact kind {other:?}"
            ))),
        }
    }

    pub fn scene(&self, size: u32) -> Scene {
        match self {
            Artifact::Carpet(c) => carpet_scene(c, size),
            Artifact::Clusters(d) => cluster_scene(d, size),
            Artifact::Trace(t) => trace_scene(t, size),
        }
    }
}

// ---------------------------------------------------------------------------
// Back ends

fn hex(c: Color) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

impl Scene {
    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(
            s,
            r#"<rect x="0" y="0" width="{}" height="{}" fill="{}"/>"#,
            self.width,
            self.height,
            hex(WHITE)
        );
        for it in &self.items {
            match it {
                Item::Rect { x, y, w, h, fill } => {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x}" y="{y}" width="{w}" height="{h}" fill="{}"/>"#,
                        hex(*fill)
                    );
                }
                Item::Outline { x, y, w, h, stroke } => {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="1"/>"#,
                        x - 0.5,
                        y - 0.5,
                        w,
                        h,
                        hex(*stroke)
                    );
                }
                Item::Polyline { points, stroke } => {
                    let pts: Vec<String> = points
                        .iter()
                        .map(|p| format!("{},{}", p[0], p[1]))
                        .collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1"/>"#,
                        pts.join(" "),
                        hex(*stroke)
                    );
                }
                Item::Text { x, y, text, color } => {
                    let _ = writeln!(
                        s,
                        r#"<text x="{x}" y="{}" font-family="monospace" font-size="10" fill="{}">{}</text>"#,
                        y + 9.0,
                        hex(*color),
                        text
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.width, self.height, Rgb(WHITE));
        let (w, h) = (self.width as i64, self.height as i64);
        let put = |img: &mut RgbImage, i: i64, j: i64, c: Color| {
            if i >= 0 && j >= 0 && i < w && j < h {
                img.put_pixel(i as u32, j as u32, Rgb(c));
            }
        };
        for it in &self.items {
            match it {
                Item::Rect {
                    x,
                    y,
                    w: rw,
                    h: rh,
                    fill,
                } => {
                    let (i0, i1) = (pixel_start(*x), pixel_start(x + rw));
                    let (j0, j1) = (pixel_start(*y), pixel_start(y + rh));
                    for j in j0..j1 {
                        for i in i0..i1 {
                            put(&mut img, i, j, *fill);
                        }
                    }
                }
                Item::Outline {
                    x,
                    y,
                    w: rw,
                    h: rh,
                    stroke,
                } => {
                    let (i0, i1) = (pixel_start(*x), pixel_start(x + rw));
                    let (j0, j1) = (pixel_start(*y), pixel_start(y + rh));
                    for i in i0 - 1..=i1 {
                        put(&mut img, i, j0 - 1, *stroke);
                        put(&mut img, i, j1 - 1, *stroke);
                    }
                    for j in j0 - 1..=j1 - 1 {
                        put(&mut img, i0 - 1, j, *stroke);
                        put(&mut img, i1 - 1, j, *stroke);
                    }
                }
                Item::Polyline { points, stroke } => {
                    for s in points.windows(2) {
                        crate::loewner::for_each_cell(s[0], s[1], |i, j| {
                            put(&mut img, i, j, *stroke)
                        });
                    }
                }
                Item::Text { x, y, text, color } => {
                    draw_text(&mut img, x.round() as i64, y.round() as i64, text, *color);
                }
            }
        }
        img
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_image()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_image()
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// First pixel whose center is at or right of `x`.
fn pixel_start(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// 3×5 glyphs, rows top to bottom.
fn glyph(c: char) -> Option<&'static str> {
    Some(match c {
        'A' => "010101111101101",
        'B' => "110101110101110",
        'C' => "011100100100011",
        'D' => "110101101101110",
        'E' => "111100110100111",
        'F' => "111100110100100",
        'G' => "011100101101011",
        'H' => "101101111101101",
        'I' => "111010010010111",
        'J' => "001001001101010",
        'K' => "101101110101101",
        'L' => "100100100100111",
        'M' => "101111111101101",
        'N' => "110101101101101",
        'O' => "010101101101010",
        'P' => "110101110100100",
        'Q' => "010101101110011",
        'R' => "110101110101101",
        'S' => "011100010001110",
        'T' => "111010010010010",
        'U' => "101101101101111",
        'V' => "101101101101010",
        'W' => "101101111111101",
        'X' => "101101010101101",
        'Y' => "101101010010010",
        'Z' => "111001010100111",
        '0' => "111101101101111",
        '1' => "010110010010111",
        '2' => "110001010100111",
        '3' => "110001010001110",
        '4' => "101101111001001",
        '5' => "111100110001110",
        '6' => "011100111101111",
        '7' => "111001010010010",
        '8' => "111101111101111",
        '9' => "111101111001110",
        '-' => "000000111000000",
        '=' => "000111000111000",
        '.' => "000000000000010",
        ' ' => "000000000000000",
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, c: Color) {
    const SCALE: i64 = 2;
    for (k, ch) in text.chars().enumerate() {
        let g = glyph(ch.to_ascii_uppercase()).unwrap_or("111101101101111");
        for (b, bit) in g.bytes().enumerate() {
            if bit != b'1' {
                continue;
            }
            let (gx, gy) = ((b % 3) as i64, (b / 3) as i64);
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    let (i, j) = (
                        x + k as i64 * 4 * SCALE + gx * SCALE + dx,
                        y + gy * SCALE + dy,
                    );
                    if i >= 0 && j >= 0 && (i as u32) < img.width() && (j as u32) < img.height() {
                        img.put_pixel(i as u32, j as u32, Rgb(c));
                    }
                }
            }
        }
    }
}
