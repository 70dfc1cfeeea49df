//! Desk-scale data: a procedural clean-image generator (piecewise-smooth
//! gradients with geometric structure), patch pools for training, and the
//! paired-directory listing used by evaluation.

use crate::error::{Error, Result};
use crate::metrics::read_png;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{synth_degrade, TrainConfig};
use std::path::{Path, PathBuf};

/// Deterministic synthetic clean image: low-frequency cosine shading with
/// random rectangles, disks and stripes on top, clamped to [0, 1].
pub fn gen_clean(rng: &mut Rng, channels: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut data = vec![0.0f64; channels * h * w];

    // smooth base per channel
    for ch in 0..channels {
        let amp: Vec<f64> = (0..3).map(|_| 0.08 + 0.12 * rng.next_f64()).collect();
        let fy: Vec<f64> = (0..3).map(|_| 0.5 + 2.5 * rng.next_f64()).collect();
        let fx: Vec<f64> = (0..3).map(|_| 0.5 + 2.5 * rng.next_f64()).collect();
        let phase: Vec<f64> = (0..3)
            .map(|_| rng.next_f64() * std::f64::consts::TAU)
            .collect();
        let offset = 0.35 + 0.3 * rng.next_f64();
        for y in 0..h {
            for x in 0..w {
                let mut v = offset;
                for i in 0..3 {
                    v += amp[i]
                        * (std::f64::consts::TAU
                            * (fy[i] * y as f64 / h as f64 + fx[i] * x as f64 / w as f64)
                            + phase[i])
                            .cos();
                }
                data[(ch * h + y) * w + x] = v;
            }
        }
    }

    // overlay a few flat shapes shared across channels, with per-channel color
    let shapes = 2 + rng.below(3);
    for _ in 0..shapes {
        let colors: Vec<f64> = (0..channels).map(|_| rng.next_f64()).collect();
        match rng.below(3) {
            0 => {
                // rectangle
                let y0 = rng.below(h);
                let x0 = rng.below(w);
                let rh = 1 + rng.below(h / 2 + 1);
                let rw = 1 + rng.below(w / 2 + 1);
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        for ch in 0..channels {
                            data[(ch * h + y) * w + x] = colors[ch];
                        }
                    }
                }
            }
            1 => {
                // disk
                let cy = rng.below(h) as f64;
                let cx = rng.below(w) as f64;
                let r = 2.0 + rng.next_f64() * (h.min(w) as f64 / 3.0);
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        if dy * dy + dx * dx <= r * r {
                            for ch in 0..channels {
                                data[(ch * h + y) * w + x] = colors[ch];
                            }
                        }
                    }
                }
            }
            _ => {
                // diagonal stripes
                let period = 3 + rng.below(6);
                let width = 1 + rng.below(period / 2 + 1);
                for y in 0..h {
                    for x in 0..w {
                        if (y + x) % period < width {
                            for ch in 0..channels {
                                data[(ch * h + y) * w + x] = colors[ch];
                            }
                        }
                    }
                }
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![channels, h, w], data).expect("consistent extents")
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    files.sort();
    Ok(files)
}

/// A clean patch: either a random crop from a PNG in `data_dir`, or a
/// procedural image when no directory is given.
fn clean_patch(
    channels: usize,
    patch: usize,
    data_dir: Option<&Path>,
    sources: &mut Option<Vec<Tensor<f64>>>,
    rng: &mut Rng,
) -> Result<Tensor<f64>> {
    let Some(dir) = data_dir else {
        return Ok(gen_clean(rng, channels, patch, patch));
    };
    if sources.is_none() {
        let files = list_pngs(dir)?;
        if files.is_empty() {
            return Err(Error::Usage(format!(
                "no .png files under {}",
                dir.display()
            )));
        }
        let mut loaded = Vec::with_capacity(files.len());
        for f in &files {
            let img = read_png(f)?;
            if img.channels() != channels {
                return Err(Error::Usage(format!(
                    "{}: {} channels, expected {channels}",
                    f.display(),
                    img.channels()
                )));
            }
            if img.height() < patch || img.width() < patch {
                return Err(Error::Usage(format!(
                    "{}: {}x{} is smaller than the {patch}-pixel patch",
                    f.display(),
                    img.height(),
                    img.width()
                )));
            }
            loaded.push(img.to_tensor::<f64>());
        }
        *sources = Some(loaded);
    }
    let pool = sources.as_ref().unwrap();
    let src = &pool[rng.below(pool.len())];
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let y0 = rng.below(h - patch + 1);
    let x0 = rng.below(w - patch + 1);
    let data = Tensor::from_fn(&[channels, patch, patch], |o| {
        let ci = o / (patch * patch);
        let rest = o % (patch * patch);
        src.data()[(ci * h + y0 + rest / patch) * w + (x0 + rest % patch)]
    });
    Ok(data)
}

/// Build a fixed pool of (clean, degraded) patch pairs. Degradations are
/// sampled once, so the pool is frozen for the whole run.
pub fn build_pool<S: Scalar>(
    cfg: &TrainConfig,
    in_channels: usize,
    data_dir: Option<&Path>,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<(Tensor<S>, Tensor<S>)>> {
    let mut sources = None;
    let mut pool = Vec::with_capacity(count);
    for _ in 0..count {
        let clean = clean_patch(in_channels, cfg.patch_size, data_dir, &mut sources, rng)?;
        let degraded = synth_degrade(&clean, &cfg.degradation, rng)?;
        pool.push((clean.cast::<S>(), degraded.cast::<S>()));
    }
    Ok(pool)
}

/// Matched (clean, degraded) PNG paths under `dir/clean` and `dir/degraded`.
/// Every file must have a partner of the same name.
pub fn paired_pngs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let clean_dir = dir.join("clean");
    let degraded_dir = dir.join("degraded");
    let clean = list_pngs(&clean_dir)?;
    let degraded = list_pngs(&degraded_dir)?;
    let degraded_names: std::collections::BTreeSet<_> =
        degraded.iter().filter_map(|p| p.file_name()).collect();
    let clean_names: std::collections::BTreeSet<_> =
        clean.iter().filter_map(|p| p.file_name()).collect();
    for p in &clean {
        let name = p.file_name().unwrap();
        if !degraded_names.contains(name) {
            return Err(Error::Usage(format!(
                "unpaired file: {} has no counterpart under {}",
                p.display(),
                degraded_dir.display()
            )));
        }
    }
    for p in &degraded {
        let name = p.file_name().unwrap();
        if !clean_names.contains(name) {
            return Err(Error::Usage(format!(
                "unpaired file: {} has no counterpart under {}",
                p.display(),
                clean_dir.display()
            )));
        }
    }
    Ok(clean
        .into_iter()
        .map(|c| {
            let d = degraded_dir.join(c.file_name().unwrap());
            (c, d)
        })
        .collect())
}
