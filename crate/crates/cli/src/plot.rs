//! Figures as SVG (with text) and PNG (marks only), plus their source data.
//! Everything here is rebuilt from files in the run directory.

use std::fmt::Write as _;
use std::path::Path;

use distl_core::eval::MetricsReport;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::evaluate::AttentionPanel;
use crate::paths::{read_json, write_atomic, write_json, RunPaths};

const PALETTE: [(u8, u8, u8); 5] = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14)];

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Every `metrics/gen_<T>_<split>.json` of a run, ordered by split then T.
pub fn read_reports(paths: &RunPaths) -> CliResult<Vec<MetricsReport>> {
    let dir = paths.metrics_dir();
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("gen_") && name.ends_with(".json") {
            out.push(read_json::<MetricsReport>(&path)?);
        }
    }
    out.sort_by(|a, b| (&a.split, a.generation).cmp(&(&b.split, b.generation)));
    Ok(out)
}

/// One point of the AUC-versus-generation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucPoint {
    pub split: String,
    pub generation: usize,
    pub auc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// One bar: a site's AUC at one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucBar {
    pub split: String,
    pub site: String,
    pub generation: usize,
    pub auc: Option<f64>,
}

pub fn auc_points(reports: &[MetricsReport]) -> Vec<AucPoint> {
    reports
        .iter()
        .map(|r| AucPoint {
            split: r.split.clone(),
            generation: r.generation,
            auc: r.pooled.auc,
            ci_low: r.pooled.ci95.map(|c| c.0),
            ci_high: r.pooled.ci95.map(|c| c.1),
        })
        .collect()
}

/// Pooled and per-site AUC at the first and last generation of each split.
pub fn auc_bars(reports: &[MetricsReport]) -> Vec<AucBar> {
    let mut bars = Vec::new();
    let mut splits: Vec<&str> = reports.iter().map(|r| r.split.as_str()).collect();
    splits.dedup();
    for split in splits {
        let of_split: Vec<&MetricsReport> = reports.iter().filter(|r| r.split == split).collect();
        let (Some(first), Some(last)) = (of_split.first(), of_split.last()) else {
            continue;
        };
        let ends = if first.generation == last.generation {
            vec![*first]
        } else {
            vec![*first, *last]
        };
        for r in ends {
            bars.push(AucBar {
                split: split.to_string(),
                site: "pooled".into(),
                generation: r.generation,
                auc: r.pooled.auc,
            });
            for (site, m) in &r.per_site {
                bars.push(AucBar {
                    split: split.to_string(),
                    site: site.clone(),
                    generation: r.generation,
                    auc: m.auc,
                });
            }
        }
    }
    bars
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> CliResult<()> {
    let mut text = format!("{header}\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn save_png(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Plot frame mapping data coordinates into a pixel box.
#[derive(Debug, Clone, Copy)]
struct Frame {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn new(width: f64, height: f64, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        Frame {
            width,
            height,
            left: 70.0,
            right: 150.0,
            top: 40.0,
            bottom: 50.0,
            x_range,
            y_range,
        }
    }

    fn x(&self, v: f64) -> f64 {
        let (a, b) = self.x_range;
        let t = if b > a { (v - a) / (b - a) } else { 0.5 };
        self.left + t * (self.width - self.left - self.right)
    }

    fn y(&self, v: f64) -> f64 {
        let (a, b) = self.y_range;
        let t = if b > a { (v - a) / (b - a) } else { 0.5 };
        self.height - self.bottom - t * (self.height - self.top - self.bottom)
    }
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.02);
    ((lo - pad).max(0.0), (hi + pad).min(1.0))
}

fn svg_axes(svg: &mut String, f: &Frame, title: &str, x_label: &str, y_label: &str, y_ticks: usize) {
    let (x0, x1) = (f.left, f.width - f.right);
    let (y0, y1) = (f.height - f.bottom, f.top);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" font-size="15" text-anchor="middle">{title}</text>"#,
        (x0 + x1) / 2.0
    );
    let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}" stroke="black"/>"#);
    for i in 0..=y_ticks {
        let v = f.y_range.0 + (f.y_range.1 - f.y_range.0) * i as f64 / y_ticks as f64;
        let y = f.y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"##,
            x0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{x_label}</text>"#,
        (x0 + x1) / 2.0,
        f.height - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Series name and its `(x, y, ci)` points.
type Series = (String, Vec<(f64, f64, Option<(f64, f64)>)>);

fn line_series(points: &[AucPoint]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for p in points {
        let Some(auc) = p.auc else { continue };
        let ci = p.ci_low.zip(p.ci_high);
        match out.iter_mut().find(|s| s.0 == p.split) {
            Some(s) => s.1.push((p.generation as f64, auc, ci)),
            None => out.push((p.split.clone(), vec![(p.generation as f64, auc, ci)])),
        }
    }
    out
}

fn line_frame(series: &[Series]) -> Frame {
    let xmax = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let ys = series
        .iter()
        .flat_map(|s| s.1.iter().flat_map(|p| [p.1, p.2.map_or(p.1, |c| c.0), p.2.map_or(p.1, |c| c.1)]));
    Frame::new(640.0, 400.0, (-0.25, xmax + 0.25), y_range(ys))
}

pub fn line_chart_svg(points: &[AucPoint]) -> String {
    let series = line_series(points);
    let f = line_frame(&series);
    let mut svg = svg_open(f.width, f.height);
    svg_axes(&mut svg, &f, "AUC by generation", "generation T", "AUC", 5);
    let xmax = f.x_range.1 - 0.25;
    for t in 0..=(xmax.round() as usize) {
        let x = f.x(t as f64);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="middle">{t}</text>"#,
            f.height - f.bottom + 16.0
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = hex(PALETTE[i % PALETTE.len()]);
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", f.x(p.0), f.y(p.1))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y, ci) in pts {
            if let Some((lo, hi)) = ci {
                let _ = writeln!(
                    svg,
                    r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}" stroke-opacity="0.5"/>"#,
                    f.x(x),
                    f.y(lo),
                    f.y(hi)
                );
            }
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"><title>{name} T={x} AUC={y:.4}</title></circle>"#,
                f.x(x),
                f.y(y)
            );
        }
        let ly = f.top + 20.0 * i as f64;
        let lx = f.width - f.right + 15.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="12">{name}</text>"#,
            ly - 10.0,
            lx + 18.0,
            ly
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Minimal raster canvas.
struct Canvas(RgbImage);

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas(RgbImage::from_pixel(w, h, Rgb([255, 255, 255])))
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.0.width() && (y as u32) < self.0.height() {
            self.0.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let (xa, xb) = (x0.min(x1).round() as i64, x0.max(x1).round() as i64);
        let (ya, yb) = (y0.min(y1).round() as i64, y0.max(y1).round() as i64);
        for y in ya..=yb {
            for x in xa..=xb {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, width: i64, c: Rgb<u8>) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as i64).max(1);
        let r = width / 2;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    self.put(x + dx, y + dy, c);
                }
            }
        }
    }

    fn axes(&mut self, f: &Frame) {
        let black = Rgb([0, 0, 0]);
        let (x0, x1, y0, y1) = (f.left, f.width - f.right, f.height - f.bottom, f.top);
        for i in 0..=5 {
            let y = f.y(f.y_range.0 + (f.y_range.1 - f.y_range.0) * i as f64 / 5.0);
            self.line(x0, y, x1, y, 1, Rgb([221, 221, 221]));
        }
        self.line(x0, y0, x1, y0, 1, black);
        self.line(x0, y0, x0, y1, 1, black);
    }
}

fn rgb((r, g, b): (u8, u8, u8)) -> Rgb<u8> {
    Rgb([r, g, b])
}

pub fn line_chart_png(points: &[AucPoint]) -> RgbImage {
    let series = line_series(points);
    let f = line_frame(&series);
    let mut c = Canvas::new(f.width as u32, f.height as u32);
    c.axes(&f);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = rgb(PALETTE[i % PALETTE.len()]);
        for w in pts.windows(2) {
            c.line(f.x(w[0].0), f.y(w[0].1), f.x(w[1].0), f.y(w[1].1), 2, color);
        }
        for &(x, y, ci) in pts {
            if let Some((lo, hi)) = ci {
                c.line(f.x(x), f.y(lo), f.x(x), f.y(hi), 1, color);
            }
            c.rect(f.x(x) - 3.0, f.y(y) - 3.0, f.x(x) + 3.0, f.y(y) + 3.0, color);
        }
        let ly = f.top + 20.0 * i as f64;
        let lx = f.width - f.right + 15.0;
        c.rect(lx, ly - 10.0, lx + 12.0, ly + 2.0, color);
    }
    c.0
}

fn bar_frame(bars: &[AucBar]) -> Frame {
    let ys = bars.iter().filter_map(|b| b.auc).chain(std::iter::once(0.5));
    let (_, hi) = y_range(ys.clone());
    let lo = ys.fold(f64::INFINITY, f64::min);
    let lo = (lo - 0.05).max(0.0);
    Frame::new(
        (220.0 + 26.0 * bars.len() as f64).max(480.0),
        400.0,
        (0.0, bars.len().max(1) as f64),
        (lo, hi),
    )
}

fn bar_generations(bars: &[AucBar]) -> Vec<usize> {
    let mut g: Vec<usize> = bars.iter().map(|b| b.generation).collect();
    g.sort_unstable();
    g.dedup();
    g
}

pub fn bar_chart_svg(bars: &[AucBar]) -> String {
    let f = bar_frame(bars);
    let gens = bar_generations(bars);
    let mut svg = svg_open(f.width, f.height);
    svg_axes(&mut svg, &f, "AUC by site, first vs last generation", "split / site", "AUC", 5);
    for (i, b) in bars.iter().enumerate() {
        let Some(auc) = b.auc else { continue };
        let gi = gens.iter().position(|&g| g == b.generation).unwrap_or(0);
        let color = hex(PALETTE[gi % PALETTE.len()]);
        let (x0, x1) = (f.x(i as f64 + 0.1), f.x(i as f64 + 0.9));
        let (y0, y1) = (f.y(auc), f.y(f.y_range.0));
        let _ = writeln!(
            svg,
            r#"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="{color}"><title>{} {} T={} AUC={auc:.4}</title></rect>"#,
            x1 - x0,
            (y1 - y0).max(0.0),
            b.split,
            b.site,
            b.generation
        );
        let cx = (x0 + x1) / 2.0;
        let ty = f.height - f.bottom + 8.0;
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{ty:.1}" font-size="9" text-anchor="end" transform="rotate(-60 {cx:.1} {ty:.1})">{}:{}</text>"#,
            &b.split[..b.split.len().min(8)],
            b.site
        );
    }
    for (gi, g) in gens.iter().enumerate() {
        let color = hex(PALETTE[gi % PALETTE.len()]);
        let ly = f.top + 20.0 * gi as f64;
        let lx = f.width - f.right + 15.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="12">T = {g}</text>"#,
            ly - 10.0,
            lx + 18.0,
            ly
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn bar_chart_png(bars: &[AucBar]) -> RgbImage {
    let f = bar_frame(bars);
    let gens = bar_generations(bars);
    let mut c = Canvas::new(f.width as u32, f.height as u32);
    c.axes(&f);
    for (i, b) in bars.iter().enumerate() {
        let Some(auc) = b.auc else { continue };
        let gi = gens.iter().position(|&g| g == b.generation).unwrap_or(0);
        c.rect(
            f.x(i as f64 + 0.1),
            f.y(auc),
            f.x(i as f64 + 0.9),
            f.y(f.y_range.0),
            rgb(PALETTE[gi % PALETTE.len()]),
        );
    }
    for gi in 0..gens.len() {
        let ly = f.top + 20.0 * gi as f64;
        let lx = f.width - f.right + 15.0;
        c.rect(lx, ly - 10.0, lx + 12.0, ly + 2.0, rgb(PALETTE[gi % PALETTE.len()]));
    }
    c.0
}

/// Blue-to-yellow ramp for `v ∈ [0, 1]`.
fn heat(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = v * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let t = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |p: f64, q: f64| (p + t * (q - p)).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn gray(v: f64) -> (u8, u8, u8) {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (g, g, g)
}

/// Thresholded-mask boundary: inside pixels with an outside 4-neighbour.
fn boundary(map: &[Vec<f64>], threshold: f64, r: usize, c: usize) -> bool {
    let inside = |r: usize, c: usize| map[r][c] >= threshold;
    if !inside(r, c) {
        return false;
    }
    let (h, w) = (map.len(), map[0].len());
    r == 0 || c == 0 || r + 1 == h || c + 1 == w || !inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1)
}

const CELL: usize = 4;
const GAP: usize = 8;

fn panel_geometry(panel: &AttentionPanel) -> (usize, usize, usize) {
    let side = panel.images.first().map_or(1, |i| i.pixels.len().max(1));
    let heads = panel.images.first().map_or(0, |i| i.heads.len());
    let tile = side * CELL;
    (side, heads, tile)
}

/// Tiles of the panel: the image, then each head's heat map with the
/// threshold boundary outlined in red.
fn panel_tiles(panel: &AttentionPanel) -> Vec<(usize, usize, Vec<Vec<(u8, u8, u8)>>)> {
    let mut tiles = Vec::new();
    for (row, img) in panel.images.iter().enumerate() {
        let px: Vec<Vec<_>> = img.pixels.iter().map(|r| r.iter().map(|&v| gray(v)).collect()).collect();
        tiles.push((row, 0, px));
        for (h, map) in img.heads.iter().enumerate() {
            let colored = (0..map.len())
                .map(|r| {
                    (0..map[r].len())
                        .map(|c| {
                            if boundary(map, panel.threshold, r, c) {
                                (230, 20, 20)
                            } else {
                                heat(map[r][c])
                            }
                        })
                        .collect()
                })
                .collect();
            tiles.push((row, h + 1, colored));
        }
    }
    tiles
}

pub fn panel_svg(panel: &AttentionPanel) -> String {
    let (_, heads, tile) = panel_geometry(panel);
    let left = 150;
    let top = 50;
    let w = left + (heads + 1) * (tile + GAP) + GAP;
    let h = top + panel.images.len() * (tile + GAP) + GAP;
    let mut svg = svg_open(w as f64, h as f64);
    let _ = writeln!(
        svg,
        r#"<text x="10" y="22" font-size="15">Attention per head, generation {}, threshold {}</text>"#,
        panel.generation, panel.threshold
    );
    for c in 0..=heads {
        let label = if c == 0 { "image".to_string() } else { format!("head {}", c - 1) };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11">{label}</text>"#,
            left + c * (tile + GAP),
            top - 6
        );
    }
    for (row, col, px) in panel_tiles(panel) {
        let (ox, oy) = (left + col * (tile + GAP), top + row * (tile + GAP));
        if col == 0 {
            let _ = writeln!(
                svg,
                r#"<text x="10" y="{}" font-size="11">{}</text>"#,
                oy + tile / 2,
                panel.images[row].id
            );
        }
        for (r, line) in px.iter().enumerate() {
            for (c, &color) in line.iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                    ox + c * CELL,
                    oy + r * CELL,
                    hex(color)
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn panel_png(panel: &AttentionPanel) -> RgbImage {
    let (_, heads, tile) = panel_geometry(panel);
    let w = (heads + 1) * (tile + GAP) + GAP;
    let h = panel.images.len().max(1) * (tile + GAP) + GAP;
    let mut canvas = Canvas::new(w as u32, h as u32);
    for (row, col, px) in panel_tiles(panel) {
        let (ox, oy) = (GAP + col * (tile + GAP), GAP + row * (tile + GAP));
        for (r, line) in px.iter().enumerate() {
            for (c, &color) in line.iter().enumerate() {
                let (x, y) = ((ox + c * CELL) as f64, (oy + r * CELL) as f64);
                canvas.rect(x, y, x + (CELL - 1) as f64, y + (CELL - 1) as f64, rgb(color));
            }
        }
    }
    canvas.0
}

/// Regenerates every figure of a run from its metrics and panel files.
pub fn render_run(paths: &RunPaths) -> CliResult<()> {
    let reports = read_reports(paths)?;
    if reports.is_empty() {
        return Err(CliError::usage(format!(
            "no metrics files under {}",
            paths.metrics_dir().display()
        )));
    }
    let dir = paths.plots_dir();
    std::fs::create_dir_all(&dir)?;

    let points = auc_points(&reports);
    write_csv(
        &dir.join("auc_vs_T.csv"),
        "split,generation,auc,ci_low,ci_high",
        points.iter().map(|p| {
            format!("{},{},{},{},{}", p.split, p.generation, opt(p.auc), opt(p.ci_low), opt(p.ci_high))
        }),
    )?;
    write_json(&dir.join("auc_vs_T.json"), &points)?;
    write_atomic(&dir.join("auc_vs_T.svg"), line_chart_svg(&points).as_bytes())?;
    save_png(&line_chart_png(&points), &dir.join("auc_vs_T.png"))?;

    let bars = auc_bars(&reports);
    write_csv(
        &dir.join("auc_bars.csv"),
        "split,site,generation,auc",
        bars.iter()
            .map(|b| format!("{},{},{},{}", b.split, b.site, b.generation, opt(b.auc))),
    )?;
    write_atomic(&dir.join("auc_bars.svg"), bar_chart_svg(&bars).as_bytes())?;
    save_png(&bar_chart_png(&bars), &dir.join("auc_bars.png"))?;

    let panel_path = dir.join("attention_panel.json");
    if panel_path.exists() {
        let panel: AttentionPanel = read_json(&panel_path)?;
        if !panel.images.is_empty() {
            write_atomic(&dir.join("attention_panel.svg"), panel_svg(&panel).as_bytes())?;
            save_png(&panel_png(&panel), &dir.join("attention_panel.png"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::PanelImage;
    use distl_core::eval::SiteMetrics;
    use std::collections::BTreeMap;

    fn report(split: &str, generation: usize, auc: f64) -> MetricsReport {
        let m = SiteMetrics {
            n: 10,
            n_pos: 5,
            auc: Some(auc),
            ci95: Some((auc - 0.05, (auc + 0.05).min(1.0))),
            operating: None,
            undefined: false,
        };
        let mut per_site = BTreeMap::new();
        per_site.insert("site_a".to_string(), m.clone());
        MetricsReport {
            task: "toy".into(),
            generation,
            split: split.into(),
            pooled: m,
            per_site,
            flags: vec![],
        }
    }

    #[test]
    fn points_follow_reports() {
        let reports: Vec<_> = (0..4).map(|t| report("external_test", t, 0.7 + 0.05 * t as f64)).collect();
        let pts = auc_points(&reports);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3].auc, Some(0.85));
        let bars = auc_bars(&reports);
        assert_eq!(bars.len(), 4);
        assert_eq!((bars[0].generation, bars[2].generation), (0, 3));
        let svg = line_chart_svg(&pts);
        assert_eq!(svg.matches("<circle").count(), 4);
        let png = line_chart_png(&pts);
        assert_eq!(png.dimensions(), (640, 400));
    }

    #[test]
    fn render_writes_all_files_from_metrics_alone() {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path(), 1);
        for t in 0..3 {
            for split in ["internal_val", "external_test"] {
                write_json(
                    &paths.root.join(RunPaths::metrics_rel(t, split)),
                    &report(split, t, 0.8 + 0.01 * t as f64),
                )
                .unwrap();
            }
        }
        let panel = AttentionPanel {
            generation: 2,
            threshold: 0.1,
            images: vec![PanelImage {
                id: "x".into(),
                label: Some(1),
                pixels: vec![vec![0.5; 4]; 4],
                heads: vec![vec![vec![0.0, 0.05, 0.2, 1.0]; 4]; 2],
            }],
        };
        write_json(&paths.plots_dir().join("attention_panel.json"), &panel).unwrap();
        render_run(&paths).unwrap();
        for f in [
            "auc_vs_T.csv",
            "auc_vs_T.json",
            "auc_vs_T.svg",
            "auc_vs_T.png",
            "auc_bars.csv",
            "auc_bars.svg",
            "auc_bars.png",
            "attention_panel.svg",
            "attention_panel.png",
        ] {
            assert!(paths.plots_dir().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(paths.plots_dir().join("auc_vs_T.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn overlay_marks_threshold_boundary() {
        let map = vec![vec![0.0, 0.05, 0.2, 1.0]; 4];
        assert!(!boundary(&map, 0.1, 1, 1));
        assert!(boundary(&map, 0.1, 1, 2));
        assert!(boundary(&map, 0.1, 0, 3));
        let inner = vec![vec![1.0; 5]; 5];
        assert!(!boundary(&inner, 0.1, 2, 2));
        assert!(boundary(&inner, 0.1, 0, 2));
    }

    #[test]
    fn no_metrics_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path(), 1);
        assert!(matches!(render_run(&paths), Err(CliError::Usage(_))));
    }
}
