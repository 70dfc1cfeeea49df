//! PSNR, SSIM, YCbCr luma conversion, overlap-tiled full-image inference,
//! and 8-bit PNG I/O. All metric arithmetic runs at f64 regardless of the
//! model precision.

use crate::error::{Error, Result};
use crate::model::{restore, UformerParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::path::Path;

/// An image: 1 or 3 channels of `[0, 1]` scalars, clamped on construction.
#[derive(Clone, Debug)]
pub struct Image {
    tensor: Tensor<f64>,
}

impl Image {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!(
                "images carry 1 or 3 channels, got {channels}"
            )));
        }
        let clamped: Vec<f64> = data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Image {
            tensor: Tensor::new(vec![channels, h, w], clamped)?,
        })
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Image> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(Error::shape("image tensor", shape, &[0, 0, 0]));
        }
        Image::new(
            shape[0],
            shape[1],
            shape[2],
            t.data().iter().map(|v| v.to_f64()).collect(),
        )
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.tensor.cast::<S>()
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }
}

fn check_same_shape(a: &Image, b: &Image, context: &str) -> Result<()> {
    if a.tensor.shape() != b.tensor.shape() {
        return Err(Error::shape(context, a.tensor.shape(), b.tensor.shape()));
    }
    Ok(())
}

/// 10 log10(peak^2 / MSE); +infinity when the images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for y in -r..=r {
        for x in -r..=r {
            let v = (-((y * y + x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k.push(v);
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// window placements, averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let peak = 1.0;
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let kernel = gaussian_window();

    let mut channel_scores = Vec::with_capacity(a.channels());
    for ch in 0..a.channels() {
        let mut total = 0.0;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                let mut ki = 0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let kv = kernel[ki];
                        ki += 1;
                        let xv = a.get(ch, oy + dy, ox + dx);
                        let yv = b.get(ch, oy + dy, ox + dx);
                        mu_x += kv * xv;
                        mu_y += kv * yv;
                        xx += kv * xv * xv;
                        yy += kv * yv * yv;
                        xy += kv * xv * yv;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let score = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                    / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
                total += score;
                count += 1;
            }
        }
        channel_scores.push(total / count as f64);
    }
    Ok(channel_scores.iter().sum::<f64>() / channel_scores.len() as f64)
}

/// Full-range BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B.
pub fn rgb_to_y(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::shape(
            "rgb_to_y",
            img.tensor.shape(),
            &[3, img.height(), img.width()],
        ));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(
                0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x),
            );
        }
    }
    Image::new(1, h, w, data)
}

/// Tile origins along one axis for `extent` pixels, `tile`-sized tiles and
/// the given overlap. The last tile is clamped to the edge.
pub fn tile_positions(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + tile >= extent {
            out.push(extent - tile);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out.dedup();
    out
}

/// Restore a full image by overlapping tiles blended with linear ramps
/// (overlap 0 stitches tiles verbatim; an image no larger than the tile is
/// a single whole-image forward).
pub fn tiled_inference<S: Scalar>(
    params: &UformerParams<Tensor<S>>,
    img: &Image,
    tile: usize,
    overlap: usize,
) -> Result<Image> {
    if overlap >= tile {
        return Err(Error::Config(format!(
            "overlap {overlap} must be smaller than the tile size {tile}"
        )));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if h <= tile && w <= tile {
        let restored = restore(params, &img.to_tensor::<S>())?;
        return Image::from_tensor(&restored);
    }
    let min = params.config.min_extent();
    if tile < min {
        return Err(Error::Config(format!(
            "tile {tile} is below the model minimum extent {min}"
        )));
    }

    let tile_h = tile.min(h);
    let tile_w = tile.min(w);
    let ys = tile_positions(h, tile_h, overlap);
    let xs = tile_positions(w, tile_w, overlap);

    let ramp = |j: usize, len: usize| -> f64 {
        if overlap == 0 {
            1.0
        } else {
            let up = (j + 1) as f64;
            let down = (len - j) as f64;
            (up.min(down) / (overlap + 1) as f64).min(1.0)
        }
    };

    let mut acc = vec![0.0f64; c * h * w];
    let mut wsum = vec![0.0f64; h * w];
    for &y0 in &ys {
        for &x0 in &xs {
            let patch = Tensor::<S>::from_fn(&[c, tile_h, tile_w], |o| {
                let ci = o / (tile_h * tile_w);
                let rest = o % (tile_h * tile_w);
                S::from_f64(img.get(ci, y0 + rest / tile_w, x0 + rest % tile_w))
            });
            let restored = restore(params, &patch)?;
            let rd = restored.data();
            for dy in 0..tile_h {
                for dx in 0..tile_w {
                    let weight = ramp(dy, tile_h) * ramp(dx, tile_w);
                    let out_pos = (y0 + dy) * w + (x0 + dx);
                    if overlap == 0 {
                        // verbatim stitch; later tiles overwrite clamped seams
                        for ci in 0..c {
                            acc[ci * h * w + out_pos] =
                                rd[(ci * tile_h + dy) * tile_w + dx].to_f64();
                        }
                        wsum[out_pos] = 1.0;
                    } else {
                        for ci in 0..c {
                            acc[ci * h * w + out_pos] +=
                                weight * rd[(ci * tile_h + dy) * tile_w + dx].to_f64();
                        }
                        wsum[out_pos] += weight;
                    }
                }
            }
        }
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for p in 0..h * w {
            data.push(acc[ci * h * w + p] / wsum[p]);
        }
    }
    Image::new(c, h, w, data)
}

/// Quantize to the 8-bit grid PNG output uses (round(v * 255) / 255), so
/// metrics describe the image a consumer actually receives.
pub fn quantize_8bit(img: &Image) -> Image {
    Image {
        tensor: Tensor::new(
            img.tensor.shape().to_vec(),
            img.data()
                .iter()
                .map(|&v| (v * 255.0).round() / 255.0)
                .collect(),
        )
        .expect("same extents"),
    }
}

// ---- PNG I/O --------------------------------------------------------------

/// Read an 8-bit PNG as an [`Image`] (RGB(A) to 3 channels, grayscale to 1;
/// alpha is dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Usage(format!("cannot open {}: {e}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let (samples, channels) = match info.color_type {
        png::ColorType::Grayscale => (1usize, 1usize),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    let raw = &buf[..h * w * samples];
    let mut data = vec![0.0f64; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                data[(ch * h + y) * w + x] = raw[(y * w + x) * samples + ch] as f64 / 255.0;
            }
        }
    }
    Image::new(channels, h, w, data)
}

/// Write an [`Image`] as an 8-bit PNG (values scaled by 255 and rounded).
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(if c == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(e.to_string()))?;
    let mut raw = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw[(y * w + x) * c + ch] = (img.get(ch, y, x) * 255.0).round() as u8;
            }
        }
    }
    writer
        .write_image_data(&raw)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests;
