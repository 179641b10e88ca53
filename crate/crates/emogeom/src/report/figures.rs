//! Heatmaps, box plots, scatter panels and bar charts. Every figure is
//! written as SVG and PNG next to a JSON twin holding the plotted numbers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emogeom_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use super::svg::{contrast_text, ramp, write_png, Anchor, Svg, DIVERGING, PALETTE, SEQUENTIAL};
use crate::error::{Error, Result};
use crate::registry::write_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureFiles {
    pub svg: PathBuf,
    pub png: PathBuf,
    pub json: PathBuf,
}

/// Writes `<stem>.svg`, `<stem>.png` and `<stem>.json`.
pub fn write_figure<T: Serialize>(stem: &Path, svg: String, twin: &T) -> Result<FigureFiles> {
    let files = FigureFiles {
        svg: stem.with_extension("svg"),
        png: stem.with_extension("png"),
        json: stem.with_extension("json"),
    };
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&files.svg, &svg).map_err(|e| Error::io(&files.svg, e))?;
    write_png(&svg, &files.png)?;
    write_json(&files.json, twin)?;
    Ok(files)
}

fn argument(msg: impl Into<String>) -> Error {
    CoreError::Argument(msg.into()).into()
}

fn fmt2(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.2}")
    } else {
        "nan".into()
    }
}

/// Which convention the cell values follow; labelled on the color bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Similarity,
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub title: String,
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub kind: ValueKind,
    pub color_label: String,
    pub annotate: bool,
}

impl Heatmap {
    pub fn similarity(title: &str, labels: Vec<String>, matrix: Vec<Vec<f64>>, color_label: &str) -> Self {
        Self {
            title: title.into(),
            labels,
            matrix,
            kind: ValueKind::Similarity,
            color_label: color_label.into(),
            annotate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(argument("heatmap has no labels"));
        }
        if self.matrix.len() != n || self.matrix.iter().any(|r| r.len() != n) {
            return Err(argument(format!(
                "heatmap has {n} labels but a {}x{} matrix",
                self.matrix.len(),
                self.matrix.first().map_or(0, Vec::len)
            )));
        }
        Ok(())
    }

    fn range(&self) -> (f64, f64) {
        match self.kind {
            ValueKind::Similarity => (-1.0, 1.0),
            ValueKind::Distance => (0.0, 2.0),
        }
    }

    fn color(&self, v: f64) -> String {
        let (lo, hi) = self.range();
        let stops: &[(u8, u8, u8)] = match self.kind {
            ValueKind::Similarity => &DIVERGING,
            ValueKind::Distance => &SEQUENTIAL,
        };
        ramp(stops, (v - lo) / (hi - lo))
    }

    fn label_margin(&self, size: f64) -> f64 {
        self.labels.iter().map(|l| l.chars().count()).max().unwrap_or(1) as f64 * size * 0.62 + 8.0
    }

    /// Panel extent for a given cell size (without color bar).
    fn extent(&self, cell: f64) -> (f64, f64) {
        let size = label_size(cell);
        let m = self.label_margin(size);
        let grid = cell * self.labels.len() as f64;
        (m + grid, 30.0 + m * 0.9 + grid)
    }

    /// Draws the panel with its top-left corner at (x0, y0).
    fn draw(&self, svg: &mut Svg, x0: f64, y0: f64, cell: f64) {
        let size = label_size(cell);
        let m = self.label_margin(size);
        let gx = x0 + m;
        let gy = y0 + 30.0 + m * 0.9;
        svg.text(gx + cell * self.labels.len() as f64 / 2.0, y0 + 16.0, 13.0, Anchor::Middle, &self.title);
        for (i, l) in self.labels.iter().enumerate() {
            let c = gy + (i as f64 + 0.5) * cell + size * 0.35;
            svg.text(gx - 4.0, c, size, Anchor::End, l);
            let x = gx + (i as f64 + 0.5) * cell;
            svg.text_styled(x, gy - 4.0, size, Anchor::Start, l, "#000000", -60.0);
        }
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let fill = self.color(v);
                let (x, y) = (gx + j as f64 * cell, gy + i as f64 * cell);
                svg.rect(x, y, cell, cell, &fill, Some("#ffffff"));
                if self.annotate && cell >= 22.0 {
                    svg.text_styled(
                        x + cell / 2.0,
                        y + cell / 2.0 + 3.5,
                        (cell * 0.3).min(11.0),
                        Anchor::Middle,
                        &fmt2(v),
                        contrast_text(&fill),
                        0.0,
                    );
                }
            }
        }
    }

    fn draw_colorbar(&self, svg: &mut Svg, x: f64, y: f64, h: f64) {
        let (lo, hi) = self.range();
        let steps = 40;
        for k in 0..steps {
            let t = 1.0 - (k as f64 + 0.5) / steps as f64;
            svg.rect(x, y + k as f64 * h / steps as f64, 14.0, h / steps as f64 + 0.5, &self.color(lo + t * (hi - lo)), None);
        }
        svg.rect(x, y, 14.0, h, "none", Some("#000000"));
        svg.text(x + 18.0, y + 8.0, 10.0, Anchor::Start, &fmt2(hi));
        svg.text(x + 18.0, y + h, 10.0, Anchor::Start, &fmt2(lo));
        svg.text_styled(x + 44.0, y + h / 2.0, 10.0, Anchor::Middle, &self.color_label, "#000000", 90.0);
    }
}

fn label_size(cell: f64) -> f64 {
    (cell * 0.55).clamp(7.0, 11.0)
}

fn cell_for(n: usize) -> f64 {
    (480.0 / n as f64).clamp(14.0, 60.0)
}

#[derive(Serialize)]
struct HeatmapTwin<'a> {
    figure: &'a str,
    panels: Vec<&'a Heatmap>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    notes: BTreeMap<String, serde_json::Value>,
}

/// Heatmap panels side by side with one shared color bar.
pub fn render_heatmaps(
    figure: &str,
    panels: &[Heatmap],
    footer: &[String],
    notes: BTreeMap<String, serde_json::Value>,
    stem: &Path,
) -> Result<FigureFiles> {
    if panels.is_empty() {
        return Err(argument("no heatmap panels"));
    }
    for p in panels {
        p.validate()?;
    }
    let cell = panels.iter().map(|p| cell_for(p.labels.len())).fold(f64::INFINITY, f64::min);
    let extents: Vec<(f64, f64)> = panels.iter().map(|p| p.extent(cell)).collect();
    let footer_w = footer.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64 * 6.4 + 20.0;
    let width = (extents.iter().map(|e| e.0 + 20.0).sum::<f64>() + 110.0).max(footer_w);
    let panel_h = extents.iter().map(|e| e.1).fold(0.0, f64::max);
    let height = panel_h + 20.0 + 16.0 * footer.len() as f64;
    let mut svg = Svg::new(width, height);
    let mut x = 10.0;
    for (p, e) in panels.iter().zip(&extents) {
        p.draw(&mut svg, x, 10.0 + panel_h - e.1, cell);
        x += e.0 + 20.0;
    }
    let grid = cell * panels[0].labels.len() as f64;
    panels[0].draw_colorbar(&mut svg, x, 10.0 + panel_h - grid, grid);
    for (i, line) in footer.iter().enumerate() {
        svg.text(10.0, panel_h + 26.0 + 16.0 * i as f64, 11.0, Anchor::Start, line);
    }
    let twin = HeatmapTwin {
        figure,
        panels: panels.iter().collect(),
        notes,
    };
    write_figure(stem, svg.finish(), &twin)
}

/// A single annotated similarity heatmap.
pub fn render_heatmap(matrix: &[Vec<f64>], labels: &[String], stem: &Path) -> Result<FigureFiles> {
    let h = Heatmap::similarity("", labels.to_vec(), matrix.to_vec(), "similarity");
    render_heatmaps("heatmap", &[h], &[], BTreeMap::new(), stem)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub name: String,
    pub values: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn new(name: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(argument(format!("group '{name}' is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(argument(format!("group '{name}' contains a non-finite value")));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            name: name.into(),
            values: values.to_vec(),
            n: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            median: quantile(&s, 0.5),
            q1: quantile(&s, 0.25),
            q3: quantile(&s, 0.75),
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}

#[derive(Serialize)]
struct BoxTwin<'a> {
    figure: &'a str,
    title: &'a str,
    y_label: &'a str,
    reference_line: Option<f64>,
    groups: &'a [BoxStats],
}

/// Box (IQR with median), whiskers to the extremes, a mean diamond and the
/// individual points for each group, plus an optional horizontal reference.
pub fn render_group_boxplot(
    groups: &[(String, Vec<f64>)],
    reference: Option<f64>,
    title: &str,
    stem: &Path,
) -> Result<FigureFiles> {
    if groups.is_empty() {
        return Err(argument("box plot needs at least one group"));
    }
    let stats: Vec<BoxStats> = groups.iter().map(|(n, v)| BoxStats::new(n, v)).collect::<Result<_>>()?;
    let mut lo = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let mut hi = stats.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    if let Some(r) = reference {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    let pad = ((hi - lo) * 0.1).max(0.05);
    let (lo, hi) = (lo - pad, hi + pad);

    let (left, top, plot_h, slot) = (70.0, 40.0, 320.0, 150.0);
    let width = (left + slot * stats.len() as f64 + 30.0).max(title.chars().count() as f64 * 7.5 + 40.0);
    let mut svg = Svg::new(width, top + plot_h + 60.0);
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));
    svg.text(width / 2.0, 22.0, 13.0, Anchor::Middle, title);
    svg.line(left, top, left, top + plot_h, "#000000", 1.0, false);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        svg.line(left - 4.0, y(v), left, y(v), "#000000", 1.0, false);
        svg.text(left - 6.0, y(v) + 3.5, 10.0, Anchor::End, &fmt2(v));
    }
    svg.text_styled(18.0, top + plot_h / 2.0, 11.0, Anchor::Middle, "Spearman rho", "#000000", -90.0);
    if let Some(r) = reference {
        svg.line(left, y(r), width - 20.0, y(r), "#d62728", 1.2, true);
        svg.text(width - 22.0, y(r) - 4.0, 10.0, Anchor::End, &format!("rho = {}", fmt2(r)));
    }
    for (i, s) in stats.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = left + slot * (i as f64 + 0.5);
        let half = 30.0;
        svg.line(cx, y(s.min), cx, y(s.max), "#000000", 1.0, false);
        svg.line(cx - 10.0, y(s.min), cx + 10.0, y(s.min), "#000000", 1.0, false);
        svg.line(cx - 10.0, y(s.max), cx + 10.0, y(s.max), "#000000", 1.0, false);
        let (top_q, bottom_q) = (y(s.q3), y(s.q1));
        svg.rect(cx - half, top_q, 2.0 * half, (bottom_q - top_q).max(1.0), "#f0f0f0", Some("#000000"));
        svg.line(cx - half, y(s.median), cx + half, y(s.median), "#000000", 2.0, false);
        for (k, &v) in s.values.iter().enumerate() {
            let jitter = if s.n > 1 { (k as f64 / (s.n - 1) as f64 - 0.5) * 40.0 } else { 0.0 };
            svg.circle(cx + jitter, y(v), 3.5, color);
        }
        svg.diamond(cx, y(s.mean), 6.0, "#ffffff");
        svg.text(cx, top + plot_h + 20.0, 11.0, Anchor::Middle, &format!("{} (n = {})", s.name, s.n));
        svg.text(cx, top + plot_h + 36.0, 10.0, Anchor::Middle, &format!("mean {}", fmt2(s.mean)));
    }
    let twin = BoxTwin {
        figure: "group_boxplot",
        title,
        y_label: "Spearman rho",
        reference_line: reference,
        groups: &stats,
    };
    write_figure(stem, svg.finish(), &twin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPanel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(String, f64, f64)>,
    pub rho: f64,
    pub p_uncorrected: f64,
}

fn nice_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let pad = ((hi - lo) * 0.08).max(1e-9);
    (lo - pad, hi + pad)
}

pub fn render_scatter_panels(figure: &str, panels: &[ScatterPanel], stem: &Path) -> Result<FigureFiles> {
    if panels.is_empty() || panels.iter().any(|p| p.points.is_empty()) {
        return Err(argument("scatter panels need points"));
    }
    let (pw, ph, left, top) = (300.0, 240.0, 60.0, 50.0);
    let width = panels.len() as f64 * (pw + left + 20.0) + 10.0;
    let mut svg = Svg::new(width, top + ph + 60.0);
    for (k, p) in panels.iter().enumerate() {
        let x0 = 10.0 + k as f64 * (pw + left + 20.0) + left;
        let (xl, xh) = nice_range(p.points.iter().map(|q| q.1));
        let (yl, yh) = nice_range(p.points.iter().map(|q| q.2));
        let sx = |v: f64| x0 + pw * (v - xl) / (xh - xl);
        let sy = |v: f64| top + ph * (1.0 - (v - yl) / (yh - yl));
        svg.text(x0 + pw / 2.0, 18.0, 12.0, Anchor::Middle, &p.title);
        svg.text(
            x0 + pw / 2.0,
            34.0,
            11.0,
            Anchor::Middle,
            &format!("rho = {:.3}, p = {:.4}", p.rho, p.p_uncorrected),
        );
        svg.rect(x0, top, pw, ph, "none", Some("#000000"));
        for t in 0..=4 {
            let xv = xl + (xh - xl) * t as f64 / 4.0;
            let yv = yl + (yh - yl) * t as f64 / 4.0;
            svg.text(sx(xv), top + ph + 14.0, 9.0, Anchor::Middle, &format_tick(xv));
            svg.text(x0 - 4.0, sy(yv) + 3.0, 9.0, Anchor::End, &format_tick(yv));
        }
        svg.text(x0 + pw / 2.0, top + ph + 32.0, 11.0, Anchor::Middle, &p.x_label);
        svg.text_styled(x0 - 44.0, top + ph / 2.0, 11.0, Anchor::Middle, &p.y_label, "#000000", -90.0);
        for (i, (_, x, y)) in p.points.iter().enumerate() {
            svg.circle(sx(*x), sy(*y), 4.0, PALETTE[i % PALETTE.len()]);
        }
    }
    #[derive(Serialize)]
    struct Twin<'a> {
        figure: &'a str,
        panels: &'a [ScatterPanel],
    }
    write_figure(stem, svg.finish(), &Twin { figure, panels })
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarGroup {
    pub name: String,
    pub values: Vec<f64>,
}

/// Grouped bars: one cluster per group, one bar per series. Series listed
/// in `highlight` use a distinct hatched-grey fill.
pub fn render_grouped_bars(
    figure: &str,
    title: &str,
    series: &[String],
    groups: &[BarGroup],
    highlight: &[usize],
    stem: &Path,
) -> Result<FigureFiles> {
    if groups.is_empty() || groups.iter().any(|g| g.values.len() != series.len()) {
        return Err(argument("each bar group needs one value per series"));
    }
    if groups.iter().flat_map(|g| &g.values).any(|v| !v.is_finite()) {
        return Err(argument("bar values must be finite"));
    }
    let lo = groups.iter().flat_map(|g| &g.values).fold(0.0f64, |a, &b| a.min(b));
    let hi = 1.0f64.max(groups.iter().flat_map(|g| &g.values).fold(0.0f64, |a, &b| a.max(b)));
    let (left, top, ph, bar) = (60.0, 40.0, 280.0, 26.0);
    let cluster = bar * series.len() as f64 + 30.0;
    let width = left + cluster * groups.len() as f64 + 170.0;
    let mut svg = Svg::new(width, top + ph + 50.0);
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));
    svg.text(width / 2.0, 22.0, 13.0, Anchor::Middle, title);
    svg.line(left, top, left, top + ph, "#000000", 1.0, false);
    svg.line(left, y(0.0), left + cluster * groups.len() as f64, y(0.0), "#000000", 1.0, false);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        svg.text(left - 6.0, y(v) + 3.5, 10.0, Anchor::End, &fmt2(v));
    }
    svg.text_styled(18.0, top + ph / 2.0, 11.0, Anchor::Middle, "Spearman rho", "#000000", -90.0);
    let color = |s: usize| if highlight.contains(&s) { "#9e9e9e" } else { PALETTE[s % PALETTE.len()] };
    for (g, group) in groups.iter().enumerate() {
        let x0 = left + 15.0 + g as f64 * cluster;
        for (s, &v) in group.values.iter().enumerate() {
            let (a, b) = (y(v.max(0.0)), y(v.min(0.0)));
            let x = x0 + s as f64 * bar;
            svg.rect(x, a, bar - 4.0, (b - a).max(0.5), color(s), Some("#000000"));
            svg.text(x + (bar - 4.0) / 2.0, a - 3.0, 8.0, Anchor::Middle, &fmt2(v));
        }
        svg.text(x0 + bar * series.len() as f64 / 2.0, top + ph + 20.0, 11.0, Anchor::Middle, &group.name);
    }
    let lx = left + cluster * groups.len() as f64 + 20.0;
    for (s, name) in series.iter().enumerate() {
        svg.rect(lx, top + 10.0 + s as f64 * 18.0, 12.0, 12.0, color(s), Some("#000000"));
        svg.text(lx + 18.0, top + 20.0 + s as f64 * 18.0, 10.0, Anchor::Start, name);
    }
    #[derive(Serialize)]
    struct Twin<'a> {
        figure: &'a str,
        title: &'a str,
        series: &'a [String],
        highlighted_series: Vec<&'a String>,
        groups: &'a [BarGroup],
    }
    let twin = Twin {
        figure,
        title,
        series,
        highlighted_series: highlight.iter().filter_map(|&i| series.get(i)).collect(),
        groups,
    };
    write_figure(stem, svg.finish(), &twin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_linear_interpolation() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn heatmap_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let err = render_heatmap(&[vec![1.0, 0.0], vec![0.0, 1.0]], &labels, &dir.path().join("h"));
        assert!(matches!(err, Err(Error::Core(CoreError::Argument(_)))));
    }

    #[test]
    fn boxplot_rejects_empty_and_nan_groups() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("b");
        assert!(render_group_boxplot(&[("x".into(), vec![])], None, "", &stem).is_err());
        assert!(render_group_boxplot(&[("x".into(), vec![0.1, f64::NAN])], None, "", &stem).is_err());
        let ok = render_group_boxplot(&[("x".into(), vec![0.4])], Some(0.7), "", &stem).unwrap();
        assert!(ok.png.is_file());
    }
}
