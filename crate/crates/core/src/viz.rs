//! Track overlays and minimal plot rendering (PPM / SVG, no image deps).

use ndarray::Array3;

use crate::error::Result;
use crate::grid::{ImageRaster, TrajectoryGrid};

/// Distinguishable sample colors for overlays.
const PALETTE: [[u8; 3]; 8] = [
    [255, 80, 80],
    [80, 200, 255],
    [120, 255, 120],
    [255, 210, 80],
    [220, 120, 255],
    [255, 150, 60],
    [90, 255, 220],
    [255, 120, 180],
];

/// Draws trajectory polylines over the conditioning image, upscaled by
/// `scale` with nearest-neighbor so the lines have room.
pub fn render_overlay(
    image: &ImageRaster,
    grids: &[&TrajectoryGrid],
    scale: usize,
) -> Result<ImageRaster> {
    let scale = scale.max(1);
    let (h, w) = (image.height() * scale, image.width() * scale);
    let mut pixels = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels[[y, x, c]] = image.pixels()[[y / scale, x / scale, c]];
            }
        }
    }
    for (gi, grid) in grids.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let rgb = [
            color[0] as f64 / 255.0,
            color[1] as f64 / 255.0,
            color[2] as f64 / 255.0,
        ];
        for i in 0..grid.grid_h() {
            for j in 0..grid.grid_w() {
                for t in 0..grid.t_len() - 1 {
                    let a = (
                        grid.data()[[t, i, j, 0]] * scale as f64,
                        grid.data()[[t, i, j, 1]] * scale as f64,
                    );
                    let b = (
                        grid.data()[[t + 1, i, j, 0]] * scale as f64,
                        grid.data()[[t + 1, i, j, 1]] * scale as f64,
                    );
                    draw_line(&mut pixels, a, b, &rgb);
                }
            }
        }
    }
    ImageRaster::new(pixels)
}

fn draw_line(pixels: &mut Array3<f64>, a: (f64, f64), b: (f64, f64), rgb: &[f64; 3]) {
    let (h, w) = (pixels.dim().0 as isize, pixels.dim().1 as isize);
    let (mut x0, mut y0) = (a.0.round() as isize, a.1.round() as isize);
    let (x1, y1) = (b.0.round() as isize, b.1.round() as isize);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && x0 < w && y0 >= 0 && y0 < h {
            for c in 0..3 {
                pixels[[y0 as usize, x0 as usize, c]] = rgb[c];
            }
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Minimal multi-series line plot as an SVG document.
pub fn line_plot_svg(title: &str, series: &[(&str, &[f64])]) -> String {
    const COLORS: [&str; 6] = ["#d6453c", "#3c78d6", "#3cb44b", "#e6a23c", "#9a4fd6", "#46c2c2"];
    let (width, height, pad) = (640.0, 360.0, 48.0);
    let n_max = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, values) in series {
        for v in values.iter().filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n"
    );
    for (si, (name, values)) in series.iter().enumerate() {
        if values.len() < 2 {
            continue;
        }
        let color = COLORS[si % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (width - 2.0 * pad) * i as f64 / (n_max.max(2) - 1) as f64;
                let y = height - pad - (height - 2.0 * pad) * (v - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            points.join(" "),
            pad + 4.0,
            40.0 + 14.0 * si as f64,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{pad}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">min {lo:.4}  max {hi:.4}</text>\n</svg>\n",
        height - 12.0
    ));
    svg
}
