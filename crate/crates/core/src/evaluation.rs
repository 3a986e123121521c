//! Test-set MAE statistics and triptych figures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_pairs, read_meta, to_training_scale};
use crate::error::{Error, Result};
use crate::grid_field::Field;
use crate::physics_losses::pixel_mae;
use crate::training::{load_generator, Predictor};

/// Full-scale reference (128×128 grid, 10,000 test pairs) for comparison
/// with desk-scale runs; not reproducible at desk scale.
pub const REFERENCE_MAE_MEAN: f64 = 0.23988159;
pub const REFERENCE_MAE_STD: f64 = 0.00266345;
pub const REFERENCE_N: usize = 10_000;

const CHUNK: u64 = 256;

/// Sample-wise MAE statistics. `mae_std` is the population standard
/// deviation and `sem = mae_std / √n_samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub sem: f64,
    pub per_sample: Vec<(u64, f64)>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Sum with a fixed pairwise split, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

impl EvalReport {
    pub fn from_per_sample(per_sample: Vec<(u64, f64)>, checkpoint_id: &str, config_hash: &str) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InvalidParam("no samples to aggregate".into()));
        }
        let n = per_sample.len();
        let maes: Vec<f64> = per_sample.iter().map(|&(_, m)| m).collect();
        let mean = pairwise_sum(&maes) / n as f64;
        let sq: Vec<f64> = maes.iter().map(|m| (m - mean).powi(2)).collect();
        let std = (pairwise_sum(&sq) / n as f64).sqrt();
        Ok(Self {
            n_samples: n,
            mae_mean: mean,
            mae_std: std,
            sem: sem(std, n),
            per_sample,
            config_hash: config_hash.into(),
            checkpoint_id: checkpoint_id.into(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// `index,mae` rows under a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "index,mae")?;
        for (i, m) in &self.per_sample {
            writeln!(w, "{i},{m:.17e}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn sem(std: f64, n: usize) -> f64 {
    std / (n as f64).sqrt()
}

/// Evaluates `predictor` on every pair of a dataset, in chunks.
pub fn evaluate<P: Predictor + Sync + ?Sized>(
    predictor: &P,
    data: &Path,
    checkpoint_id: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let meta = read_meta(data)?;
    let mut per_sample = Vec::with_capacity(meta.n_samples as usize);
    let mut start = 0;
    while start < meta.n_samples {
        let end = (start + CHUNK).min(meta.n_samples);
        let (_, pairs) = load_pairs(data, Some(start..end))?;
        let chunk: Vec<(u64, f64)> = pairs
            .par_iter()
            .map(|p| {
                let s = to_training_scale(p, meta.scale)?;
                Ok((p.index, pixel_mae(&predictor.predict(&s.src)?, &s.tar)?))
            })
            .collect::<Result<_>>()?;
        per_sample.extend(chunk);
        start = end;
    }
    EvalReport::from_per_sample(per_sample, checkpoint_id, config_hash)
}

/// Loads a checkpoint's generator and evaluates it on `data`.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let (manifest, gen) = load_generator(checkpoint)?;
    let meta = read_meta(data)?;
    if meta.grid_n != manifest.grid_n {
        return Err(Error::Shape {
            expected: format!("{0}x{0} dataset for this checkpoint", manifest.grid_n),
            actual: format!("{0}x{0}", meta.grid_n),
        });
    }
    if meta.scale != manifest.scale {
        return Err(Error::Config(format!(
            "dataset scale {} differs from training scale {}",
            meta.scale, manifest.scale
        )));
    }
    let config_hash = crate::dataset::hex(&Sha256::digest(serde_json::to_vec(&manifest.config)?));
    evaluate(&gen, data, &manifest.checkpoint_id, &config_hash)
}

/// Diverging blue–white–red map pinned to [−1, 1].
pub fn colormap(v: f64) -> [u8; 3] {
    const LOW: [f64; 3] = [59.0, 76.0, 192.0];
    const MID: [f64; 3] = [242.0, 242.0, 242.0];
    const HIGH: [f64; 3] = [180.0, 4.0, 38.0];
    let t = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let (from, to, w) = if t < 0.0 { (MID, LOW, -t) } else { (MID, HIGH, t) };
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = (from[c] + (to[c] - from[c]) * w).round() as u8;
    }
    px
}

/// 5×7 glyphs, one row per byte, bit 4 = leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        _ => [0; 7],
    }
}

const MARGIN: usize = 8;
const CAPTION: usize = 7 * 2 + 8;

/// Writes `source | generated | target` side by side on a shared [−1, 1]
/// colour scale, each panel captioned. Output bytes depend only on inputs.
pub fn render_triptych(src: &Field, generated: &Field, tar: &Field, out_path: &Path) -> Result<()> {
    let n = src.n();
    if generated.n() != n || tar.n() != n {
        return Err(Error::Shape { expected: format!("three {n}x{n} fields"), actual: "mixed sizes".into() });
    }
    let cell = (256 / n).max(1);
    let side = n * cell;
    let width = MARGIN + 3 * (side + MARGIN);
    let height = CAPTION + side + MARGIN;
    let mut img = vec![255u8; width * height * 3];
    let mut put = |x: usize, y: usize, px: [u8; 3]| {
        let o = (y * width + x) * 3;
        img[o..o + 3].copy_from_slice(&px);
    };
    for (k, (field, label)) in [(src, "SOURCE"), (generated, "GENERATED"), (tar, "TARGET")].into_iter().enumerate() {
        let x0 = MARGIN + k * (side + MARGIN);
        for i in 0..n {
            for j in 0..n {
                let px = colormap(field.get(i, j));
                for dy in 0..cell {
                    for dx in 0..cell {
                        put(x0 + j * cell + dx, CAPTION + i * cell + dy, px);
                    }
                }
            }
        }
        // caption at 2× scale, centred over the panel when it fits
        let text_w = label.len() * 12;
        let tx = x0 + side.saturating_sub(text_w) / 2;
        for (ci, ch) in label.chars().enumerate() {
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        for s in 0..4 {
                            let x = tx + ci * 12 + col * 2 + s % 2;
                            let y = 4 + row * 2 + s / 2;
                            if x < width {
                                put(x, y, [0, 0, 0]);
                            }
                        }
                    }
                }
            }
        }
    }
    let file = BufWriter::new(File::create(out_path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    w.write_image_data(&img).map_err(|e| Error::Image(e.to_string()))?;
    w.finish().map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}
