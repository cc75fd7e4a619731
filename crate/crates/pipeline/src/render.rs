//! Heatmaps of velocity × position maps as SVG (labelled) and binary PPM
//! (raster only). Velocity runs left to right, step position bottom to top.

use std::fmt::Write as _;

use stepmap_core::maps::{
    column_argmin, near_optimal_regions, CellGrid, ReachMap, SafeRegionModel, SwingTimeReport, TorqueMap,
};
use stepmap_core::paramopt::ParamGrid;

use crate::error::Result;

pub type Rgb = [u8; 3];

const MISSING: Rgb = [205, 205, 205];
const REACHABLE: Rgb = [33, 145, 140];
const SAFE: Rgb = [94, 201, 98];
const VIRIDIS: [Rgb; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];

/// Viridis approximated by linear interpolation between five stops.
pub fn viridis(t: f64) -> Rgb {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| {
        let (a, b) = (VIRIDIS[i][c] as f64, VIRIDIS[i + 1][c] as f64);
        (a + f * (b - a)).round() as u8
    })
}

fn fade(c: Rgb, amount: f64) -> Rgb {
    std::array::from_fn(|k| (c[k] as f64 + amount * (255.0 - c[k] as f64)).round() as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_axis: Vec<f64>,
    pub y_axis: Vec<f64>,
    /// Cell colours, x-major like the maps.
    pub colors: Vec<Rgb>,
    /// Starred cells `(ix, iy)`.
    pub stars: Vec<(usize, usize)>,
    pub legend: Vec<(String, Rgb)>,
    /// Value range of a continuous colour scale, with its unit.
    pub colorbar: Option<(f64, f64, String)>,
}

impl Heatmap {
    fn blank<T>(title: &str, grid: &CellGrid<T>) -> Self {
        Self {
            title: title.to_string(),
            x_label: "initial CoM velocity (m/s)".into(),
            y_label: "desired step position (m)".into(),
            x_axis: grid.velocities.clone(),
            y_axis: grid.positions.clone(),
            colors: Vec::with_capacity(grid.cells.len()),
            stars: Vec::new(),
            legend: Vec::new(),
            colorbar: None,
        }
    }

    fn color(&self, ix: usize, iy: usize) -> Rgb {
        self.colors[ix * self.y_axis.len() + iy]
    }

    pub fn to_ppm(&self, cell: usize) -> Vec<u8> {
        let (nx, ny) = (self.x_axis.len(), self.y_axis.len());
        let (w, h) = (nx * cell, ny * cell);
        let mut px = vec![[0u8; 3]; w * h];
        for ix in 0..nx {
            for iy in 0..ny {
                let c = self.color(ix, iy);
                let top = (ny - 1 - iy) * cell;
                for y in top..top + cell {
                    px[y * w + ix * cell..y * w + (ix + 1) * cell].fill(c);
                }
            }
        }
        let r = (cell as i64 * 2 / 5).max(1);
        for &(ix, iy) in &self.stars {
            let cx = (ix * cell + cell / 2) as i64;
            let cy = ((ny - 1 - iy) * cell + cell / 2) as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = dx.abs() + dy.abs();
                    let (x, y) = (cx + dx, cy + dy);
                    if d <= r && x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        px[y as usize * w + x as usize] = if d < r { [255, 255, 255] } else { [0, 0, 0] };
                    }
                }
            }
        }
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend(px.iter().flatten());
        out
    }

    pub fn to_svg(&self, cell: usize) -> String {
        let (nx, ny) = (self.x_axis.len(), self.y_axis.len());
        let (left, top, right, bottom) = (80, 40, 170, 60);
        let (pw, ph) = (nx * cell, ny * cell);
        let (w, h) = (left + pw + right, top + ph + bottom);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            left + pw / 2,
            escape(&self.title)
        );
        for ix in 0..nx {
            for iy in 0..ny {
                let [r, g, b] = self.color(ix, iy);
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>"#,
                    left + ix * cell,
                    top + (ny - 1 - iy) * cell
                );
            }
        }
        for &(ix, iy) in &self.stars {
            let cx = (left + ix * cell) as f64 + cell as f64 / 2.0;
            let cy = (top + (ny - 1 - iy) * cell) as f64 + cell as f64 / 2.0;
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="white" stroke="black" stroke-width="0.8"/>"#,
                star_points(cx, cy, cell as f64 * 0.45)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for ix in ticks(nx) {
            let x = left + ix * cell + cell / 2;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" text-anchor="middle">{:.2}</text>"#,
                top + ph + 16,
                self.x_axis[ix]
            );
        }
        for iy in ticks(ny) {
            let y = top + (ny - 1 - iy) * cell + cell / 2 + 4;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{y}" text-anchor="end">{:.2}</text>"#,
                left - 6,
                self.y_axis[iy]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + pw / 2,
            top + ph + 40,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
            top + ph / 2,
            top + ph / 2,
            escape(&self.y_label)
        );
        let lx = left + pw + 20;
        let mut ly = top;
        if let Some((lo, hi, unit)) = &self.colorbar {
            let steps = 40;
            for k in 0..steps {
                let [r, g, b] = viridis(1.0 - k as f64 / (steps - 1) as f64);
                let _ = writeln!(
                    s,
                    r#"<rect x="{lx}" y="{}" width="16" height="4" fill="rgb({r},{g},{b})"/>"#,
                    ly + k * 4
                );
            }
            let _ = writeln!(s, r#"<text x="{}" y="{}">{hi:.4e}</text>"#, lx + 22, ly + 8);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{lo:.4e}</text>"#, lx + 22, ly + steps * 4);
            let _ = writeln!(
                s,
                r#"<text x="{lx}" y="{}">{}</text>"#,
                ly + steps * 4 + 18,
                escape(unit)
            );
            ly += steps * 4 + 34;
        }
        for (label, [r, g, b]) in &self.legend {
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="rgb({r},{g},{b})" stroke="black" stroke-width="0.5"/>"#
            );
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 18, ly + 10, escape(label));
            ly += 18;
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(n: usize) -> Vec<usize> {
    let step = n.div_ceil(6).max(1);
    let mut t: Vec<usize> = (0..n).step_by(step).collect();
    if t.last() != Some(&(n - 1)) {
        t.push(n - 1);
    }
    t
}

fn star_points(cx: f64, cy: f64, r: f64) -> String {
    (0..10)
        .map(|k| {
            let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
            let rr = if k % 2 == 0 { r } else { r * 0.45 };
            format!("{:.2},{:.2}", cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn reach_heatmap(reach: &ReachMap) -> Heatmap {
    let mut h = Heatmap::blank("Reachability", reach);
    h.colors = reach
        .cells
        .iter()
        .map(|&r| if r { REACHABLE } else { MISSING })
        .collect();
    h.legend = vec![("reachable".into(), REACHABLE), ("unreachable".into(), MISSING)];
    h
}

fn value_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

/// Per-column argmin cells of a torque map.
pub fn optimal_cells(tmap: &TorqueMap) -> Vec<(usize, usize)> {
    (0..tmap.velocities.len())
        .filter_map(|iv| column_argmin(tmap.column(iv)).map(|ip| (iv, ip)))
        .collect()
}

/// Swing-phase torque integral with the per-velocity optimum starred.
pub fn torque_heatmap(tmap: &TorqueMap) -> Heatmap {
    let mut h = Heatmap::blank("Swing-phase joint torque", tmap);
    let (lo, hi) = value_range(tmap.cells.iter().flatten().copied());
    h.colors = tmap
        .cells
        .iter()
        .map(|j| j.map_or(MISSING, |j| viridis(scale(j, lo, hi))))
        .collect();
    h.stars = optimal_cells(tmap);
    h.colorbar = lo.is_finite().then(|| (lo, hi, "J_tau (N^2 m^2 s)".to_string()));
    h.legend = vec![("unreachable".into(), MISSING)];
    h
}

/// Torque map with cells more than `delta` above their column optimum faded.
pub fn near_optimal_heatmap(tmap: &TorqueMap, delta: f64) -> Result<Heatmap> {
    let mask = near_optimal_regions(tmap, delta)?;
    let mut h = torque_heatmap(tmap);
    h.title = format!("Steps within {:.0}% of the optimal torque", delta * 100.0);
    for (c, inside) in h.colors.iter_mut().zip(&mask.cells) {
        if !inside && *c != MISSING {
            *c = fade(*c, 0.7);
        }
    }
    h.legend.push((
        format!("> {:.0}% above optimum", delta * 100.0),
        fade(viridis(0.5), 0.7),
    ));
    Ok(h)
}

/// SVM classification on a grid `factor` times finer than the dense axes.
pub fn safe_region_heatmap(model: &SafeRegionModel, velocities: &[f64], positions: &[f64], factor: usize) -> Heatmap {
    let fine = model.classify_fine(velocities, positions, factor);
    let mut h = Heatmap::blank("Safe stepping region", &fine);
    h.colors = fine.cells.iter().map(|&s| if s { SAFE } else { MISSING }).collect();
    h.legend = vec![("safe".into(), SAFE), ("unsafe".into(), MISSING)];
    h
}

/// Swing duration at the phase-one nodes.
pub fn swing_time_heatmap(report: &SwingTimeReport, grid: &ParamGrid) -> Result<Heatmap> {
    let times: Vec<f64> = report.nodes.iter().map(|n| n[2]).collect();
    let cells = CellGrid::new(grid.velocities().to_vec(), grid.positions().to_vec(), times.clone())?;
    let mut h = Heatmap::blank("Swing time of the optimized parameters", &cells);
    let (lo, hi) = value_range(times.iter().copied());
    h.colors = times.iter().map(|&t| viridis(scale(t, lo, hi))).collect();
    h.colorbar = Some((lo, hi, "swing time (s)".to_string()));
    Ok(h)
}
