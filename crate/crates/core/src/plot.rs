//! Static plot output: binary PPM images for qualitative mask panels and
//! minimal SVG charts for analysis results. Both formats are written
//! byte-deterministically.

use std::fs;
use std::io;
use std::path::Path;

use crate::tensor::{IntGrid, Tensor};

/// Distinct colors for mask ids; id 0 (background) is dark gray, others
/// cycle through a bright palette.
pub fn label_color(label: i32) -> [f64; 3] {
    const COLORS: [[f64; 3]; 8] = [
        [0.91, 0.31, 0.21],
        [0.23, 0.49, 0.93],
        [0.20, 0.78, 0.35],
        [0.95, 0.77, 0.06],
        [0.69, 0.32, 0.87],
        [0.10, 0.74, 0.81],
        [0.91, 0.46, 0.70],
        [0.56, 0.79, 0.24],
    ];
    if label <= 0 {
        return [0.25, 0.25, 0.28];
    }
    COLORS[(label as usize - 1) % COLORS.len()]
}

pub fn labels_to_rgb(grid: &IntGrid) -> Tensor {
    let mut img = Tensor::zeros(vec![grid.h, grid.w, 3]);
    for y in 0..grid.h {
        for x in 0..grid.w {
            let c = label_color(grid.at(y, x));
            for (ch, &v) in c.iter().enumerate() {
                img.set3(y, x, ch, v);
            }
        }
    }
    img
}

/// Horizontal concatenation with a white gap between panels. All images must
/// share a height.
pub fn hstack_images(images: &[&Tensor], gap: usize) -> Tensor {
    assert!(!images.is_empty());
    let h = images[0].shape[0];
    let total_w: usize =
        images.iter().map(|i| i.shape[1]).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Tensor::full(vec![h, total_w, 3], 1.0);
    let mut x0 = 0usize;
    for img in images {
        assert_eq!(img.shape[0], h, "panel heights differ");
        assert_eq!(img.shape[2], 3);
        for y in 0..h {
            for x in 0..img.shape[1] {
                for ch in 0..3 {
                    out.set3(y, x0 + x, ch, img.at3(y, x, ch));
                }
            }
        }
        x0 += img.shape[1] + gap;
    }
    out
}

/// Binary PPM (P6), 8 bits per channel, values clamped to [0, 1].
pub fn write_ppm(path: &Path, image: &Tensor) -> io::Result<()> {
    assert_eq!(image.shape.len(), 3, "expected [h, w, 3]");
    assert_eq!(image.shape[2], 3);
    let (h, w) = (image.shape[0], image.shape[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in &image.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes)
}

fn svg_header(width: usize, height: usize, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        width / 2
    )
}

const SERIES_COLORS: [&str; 4] = ["#d43d2a", "#2a6fd4", "#2ab04f", "#b08a0a"];

/// Data range, padded when all values coincide so scale divisors stay
/// nonzero.
fn bounds(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Line chart with one polyline per series. Axis ranges are inferred from
/// the data; four tick labels per axis.
pub fn svg_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> io::Result<()> {
    assert!(!series.is_empty() && series.iter().all(|s| !s.1.is_empty()));
    let (width, height) = (480usize, 320usize);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (width as f64 - ml - mr, height as f64 - mt - mb);

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (_, pts) in series {
        for &(x, y) in pts {
            xs.push(x);
            ys.push(y);
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let sx = move |x: f64| ml + (x - x_min) / (x_max - x_min) * pw;
    let sy = move |y: f64| mt + ph - (y - y_min) / (y_max - y_min) * ph;

    let mut svg = svg_header(width, height, title);
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph,
        mt + ph
    ));
    for i in 0..4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 3.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 3.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"10\">{:.3}</text>\n",
            sx(fx),
            mt + ph + 16.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"10\">{:.3}</text>\n",
            ml - 6.0,
            sy(fy) + 3.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{x_label}</text>\n",
        ml + pw / 2.0,
        height as f64 - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\" transform=\"rotate(-90 14 {:.1})\">{y_label}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let coords: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{color}\">{name}</text>\n",
            ml + pw - 120.0,
            mt + 14.0 * (i as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)
}

/// Paired bars (two series side by side per category).
pub fn svg_bar_pairs(
    path: &Path,
    title: &str,
    categories: &[&str],
    series_a: (&str, &[f64]),
    series_b: (&str, &[f64]),
) -> io::Result<()> {
    assert_eq!(categories.len(), series_a.1.len());
    assert_eq!(categories.len(), series_b.1.len());
    let (width, height) = (480usize, 320usize);
    let (ml, mt, mb) = (60.0, 40.0, 50.0);
    let ph = height as f64 - mt - mb;
    let max = series_a
        .1
        .iter()
        .chain(series_b.1)
        .fold(0.0f64, |m, &v| m.max(v))
        .max(1e-12);
    let group_w = (width as f64 - ml - 20.0) / categories.len() as f64;
    let bar_w = group_w * 0.35;

    let mut svg = svg_header(width, height, title);
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        width as f64 - 20.0,
        mt + ph
    ));
    for (i, cat) in categories.iter().enumerate() {
        let x0 = ml + group_w * i as f64 + group_w * 0.15;
        for (k, (val, color)) in [
            (series_a.1[i], SERIES_COLORS[0]),
            (series_b.1[i], SERIES_COLORS[1]),
        ]
        .iter()
        .enumerate()
        {
            let bh = val / max * ph;
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\"/>\n",
                x0 + bar_w * k as f64,
                mt + ph - bh,
                bar_w,
                bh
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
                 font-size=\"9\">{:.4}</text>\n",
                x0 + bar_w * (k as f64 + 0.5),
                mt + ph - bh - 4.0,
                val
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{cat}</text>\n",
            x0 + bar_w,
            mt + ph + 16.0
        ));
    }
    for (k, name) in [series_a.0, series_b.0].iter().enumerate() {
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            width - 150,
            30 + 16 * k,
            SERIES_COLORS[k],
            width - 135,
            39 + 16 * k
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)
}
