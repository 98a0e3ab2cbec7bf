//! Figure emission behind a small interface. The CSV-only writer keeps
//! headless runs free of image encoding while still exporting the matrices.

use std::path::{Path, PathBuf};

use cwlab_core::error::{Error, Result};
use cwlab_core::trainer::matrix_csv;
use image::{Rgb, RgbImage};
use ndarray::Array2;

pub trait FigureWriter {
    /// Writes one heatmap; returns the files produced.
    fn heatmap(&self, dir: &Path, name: &str, m: &Array2<f64>) -> Result<Vec<PathBuf>>;
    /// Side-by-side heatmaps sharing one colour scale per panel.
    fn heatmap_pair(&self, dir: &Path, name: &str, left: &Array2<f64>, right: &Array2<f64>) -> Result<Vec<PathBuf>>;
    fn curve(&self, dir: &Path, name: &str, values: &[f64]) -> Result<Vec<PathBuf>>;
}

fn write_csv(dir: &Path, name: &str, m: &Array2<f64>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(format!("{name}.csv"));
    std::fs::write(&p, matrix_csv(m))?;
    Ok(p)
}

fn write_series(dir: &Path, name: &str, values: &[f64]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(format!("{name}.csv"));
    let body: String = values.iter().enumerate().map(|(i, v)| format!("{i},{v:.10e}\n")).collect();
    std::fs::write(&p, format!("step,value\n{body}"))?;
    Ok(p)
}

pub struct CsvFigures;

impl FigureWriter for CsvFigures {
    fn heatmap(&self, dir: &Path, name: &str, m: &Array2<f64>) -> Result<Vec<PathBuf>> {
        Ok(vec![write_csv(dir, name, m)?])
    }

    fn heatmap_pair(&self, dir: &Path, name: &str, left: &Array2<f64>, right: &Array2<f64>) -> Result<Vec<PathBuf>> {
        Ok(vec![
            write_csv(dir, &format!("{name}_left"), left)?,
            write_csv(dir, &format!("{name}_right"), right)?,
        ])
    }

    fn curve(&self, dir: &Path, name: &str, values: &[f64]) -> Result<Vec<PathBuf>> {
        Ok(vec![write_series(dir, name, values)?])
    }
}

/// PNG figures plus the CSV matrices.
pub struct PngFigures {
    pub cell: u32,
}

impl Default for PngFigures {
    fn default() -> Self {
        Self { cell: 24 }
    }
}

fn shade(x: f64) -> Rgb<u8> {
    // White at 0, dark blue at 1.
    let t = x.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
}

impl PngFigures {
    fn paint(&self, img: &mut RgbImage, x0: u32, m: &Array2<f64>) {
        let max = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for ((i, j), v) in m.indexed_iter() {
            let c = shade(if max > 0.0 { v.abs() / max } else { 0.0 });
            for dy in 0..self.cell {
                for dx in 0..self.cell {
                    img.put_pixel(x0 + j as u32 * self.cell + dx, i as u32 * self.cell + dy, c);
                }
            }
        }
    }

    fn save(img: &RgbImage, path: &Path) -> Result<()> {
        img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

impl FigureWriter for PngFigures {
    fn heatmap(&self, dir: &Path, name: &str, m: &Array2<f64>) -> Result<Vec<PathBuf>> {
        let csv = write_csv(dir, name, m)?;
        let (r, c) = m.dim();
        let mut img = RgbImage::from_pixel(c as u32 * self.cell, r as u32 * self.cell, Rgb([255, 255, 255]));
        self.paint(&mut img, 0, m);
        let png = dir.join(format!("{name}.png"));
        Self::save(&img, &png)?;
        Ok(vec![csv, png])
    }

    fn heatmap_pair(&self, dir: &Path, name: &str, left: &Array2<f64>, right: &Array2<f64>) -> Result<Vec<PathBuf>> {
        let a = write_csv(dir, &format!("{name}_left"), left)?;
        let b = write_csv(dir, &format!("{name}_right"), right)?;
        let gap = self.cell;
        let w = (left.ncols() + right.ncols()) as u32 * self.cell + gap;
        let h = left.nrows().max(right.nrows()) as u32 * self.cell;
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        self.paint(&mut img, 0, left);
        self.paint(&mut img, left.ncols() as u32 * self.cell + gap, right);
        let png = dir.join(format!("{name}.png"));
        Self::save(&img, &png)?;
        Ok(vec![a, b, png])
    }

    fn curve(&self, dir: &Path, name: &str, values: &[f64]) -> Result<Vec<PathBuf>> {
        let csv = write_series(dir, name, values)?;
        let (w, h) = (400u32, 200u32);
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if values.len() > 1 && !finite.is_empty() {
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let n = values.len() - 1;
            for x in 0..w {
                let pos = x as f64 / (w - 1) as f64 * n as f64;
                let (i, f) = (pos.floor() as usize, pos.fract());
                let v = if i >= n { values[n] } else { values[i] * (1.0 - f) + values[i + 1] * f };
                if v.is_finite() {
                    let y = ((hi - v) / span * (h - 1) as f64).round() as u32;
                    img.put_pixel(x, y.min(h - 1), Rgb([8, 48, 107]));
                }
            }
        }
        let png = dir.join(format!("{name}.png"));
        Self::save(&img, &png)?;
        Ok(vec![csv, png])
    }
}

pub fn writer(csv_only: bool) -> Box<dyn FigureWriter> {
    if csv_only {
        Box::new(CsvFigures)
    } else {
        Box::new(PngFigures::default())
    }
}
