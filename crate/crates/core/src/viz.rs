//! Raster outputs: heat-map overlays, gradient saliency, embedding scatter
//! plots and line charts, written as PNG files.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::instrumentation::{PathwayMask, TargetModel};
use crate::tensor::Tensor;

/// Jet colormap on `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Alpha-blends a colormapped heat map over an RGB image:
/// `out = 0.5 * img + 0.5 * jet(heat)`. `img` is `[3, h, w]` in `[0, 1]`,
/// `heat` is `[h, w]`.
pub fn overlay(img: &Tensor, heat: &Tensor) -> Result<Tensor> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("overlay needs a [3, h, w] image, got {s:?}"))),
    };
    if heat.shape() != [h, w] {
        return Err(Error::Shape(format!("heat map {:?} does not match image {h}x{w}", heat.shape())));
    }
    let mut out = img.clone();
    let plane = h * w;
    for (i, &v) in heat.data().iter().enumerate() {
        let rgb = jet(v);
        for (c, col) in rgb.iter().enumerate() {
            let px = &mut out.data_mut()[c * plane + i];
            *px = 0.5 * *px + 0.5 * col;
        }
    }
    Ok(out)
}

/// Input-gradient saliency of the masked model: per pixel, the largest
/// absolute gradient over channels, divided by the image maximum.
pub fn saliency(model: &TargetModel, image: &Tensor, mask: &PathwayMask, class: usize) -> Result<Tensor> {
    let (c, h, w) = model.input_shape();
    let batch = image.clone().reshape(&[1, c, h, w])?;
    let g = model.masked_gradients(&batch, std::slice::from_ref(mask), &[class])?;
    let plane = h * w;
    let grads = g.input_grad.data();
    let mut out: Vec<f64> =
        (0..plane).map(|i| (0..c).map(|ch| grads[ch * plane + i].abs()).fold(0.0, f64::max)).collect();
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::from_vec(&[h, w], out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB `[3, h, w]` or grayscale `[h, w]` tensor in `[0, 1]` to an image.
pub fn to_image(t: &Tensor) -> Result<RgbImage> {
    match *t.shape() {
        [3, h, w] => {
            let d = t.data();
            let plane = h * w;
            Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
            }))
        }
        [h, w] => {
            let d = t.data();
            Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let v = to_u8(d[y as usize * w + x as usize]);
                Rgb([v, v, v])
            }))
        }
        ref s => Err(Error::Shape(format!("cannot render tensor of shape {s:?}"))),
    }
}

/// Nearest-neighbour upscale so tiny inputs stay visible.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    let factor = factor.max(1);
    RgbImage::from_fn(img.width() * factor, img.height() * factor, |x, y| *img.get_pixel(x / factor, y / factor))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Projection of row vectors onto their two leading principal components.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data("no embeddings to project".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    // eigenvectors of the n x n Gram matrix give the projected coordinates directly
    let eig = SymmetricEigen::new(&x * x.transpose());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let coord = |k: usize, i: usize| -> f64 {
        match order.get(k) {
            Some(&c) => eig.eigenvectors[(i, c)] * eig.eigenvalues[c].max(0.0).sqrt(),
            None => 0.0,
        }
    };
    Ok((0..n).map(|i| [coord(0, i), coord(1, i)]).collect())
}

pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

struct Canvas {
    img: RgbImage,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(size: u32, xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
        let margin = (size as f64 * 0.08).round();
        let (lo, hi) = (margin as u32, size - margin as u32);
        for t in lo..=hi {
            for (x, y) in [(t, hi), (lo, t)] {
                img.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
        Self { img, margin, x_range: range(&mut xs.clone()), y_range: range(&mut ys.clone()) }
    }

    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let span = self.img.width() as f64 - 2.0 * self.margin;
        let px = self.margin + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0) * span;
        let py = self.img.height() as f64 - self.margin - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0) * span;
        (px, py)
    }

    fn dot(&mut self, px: f64, py: f64, r: i64, color: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px.round() as i64 + dx, py.round() as i64 + dy);
                if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
                    self.img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            self.dot(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), 0, color);
        }
    }
}

/// Scatter plot of 2-D points coloured by class.
pub fn scatter(points: &[[f64; 2]], classes: &[usize], size: u32) -> RgbImage {
    let mut canvas = Canvas::new(size, points.iter().map(|p| p[0]), points.iter().map(|p| p[1]));
    for (p, &c) in points.iter().zip(classes) {
        let (x, y) = canvas.project(p[0], p[1]);
        canvas.dot(x, y, 2, PALETTE[c % PALETTE.len()]);
    }
    canvas.img
}

/// Line chart, one polyline with markers per series.
pub fn line_chart(series: &[Vec<(f64, f64)>], size: u32) -> RgbImage {
    let all = series.iter().flatten();
    let mut canvas = Canvas::new(size, all.clone().map(|p| p.0), all.map(|p| p.1));
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.iter().map(|&(x, y)| canvas.project(x, y)).collect();
        for w in pts.windows(2) {
            canvas.line(w[0], w[1], color);
        }
        for &(x, y) in &pts {
            canvas.dot(x, y, 2, color);
        }
    }
    canvas.img
}

/// Numeric columns of a headed comma-separated table.
pub fn read_csv_columns(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Data("empty table".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Data(format!("row {} has {} cells, expected {}", n + 1, cells.len(), header.len())));
        }
        for (col, cell) in cols.iter_mut().zip(cells) {
            col.push(cell.trim().parse().map_err(|_| Error::Data(format!("row {}: {cell:?} is not a number", n + 1)))?);
        }
    }
    Ok((header, cols))
}
