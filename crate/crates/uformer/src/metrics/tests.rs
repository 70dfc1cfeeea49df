use super::*;
use crate::model::{build, UformerConfig};
use crate::rng::Rng;

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.next_f64()).collect()).unwrap()
}

#[test]
fn psnr_of_identical_images_is_infinite() {
    let img = random_image(1, 3, 16, 16);
    assert_eq!(psnr(&img, &img, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_of_known_mse_is_exact() {
    // constant difference 0.1 -> MSE 0.01 -> exactly 20 dB at peak 1
    let a = Image::new(1, 8, 8, vec![0.0; 64]).unwrap();
    let b = Image::new(1, 8, 8, vec![0.1; 64]).unwrap();
    let p = psnr(&a, &b, 1.0).unwrap();
    assert!((p - 20.0).abs() < 1e-12, "{p}");
}

#[test]
fn psnr_matches_a_direct_two_loop_reference() {
    let a = random_image(2, 3, 12, 10);
    let b = random_image(3, 3, 12, 10);
    // independent reference
    let mut se = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        for y in 0..12 {
            for x in 0..10 {
                let d = a.get(c, y, x) - b.get(c, y, x);
                se += d * d;
                n += 1;
            }
        }
    }
    let expect = 10.0 * (1.0 / (se / n as f64)).log10();
    let got = psnr(&a, &b, 1.0).unwrap();
    assert!((got - expect).abs() < 1e-9);
    // symmetry
    assert_eq!(got, psnr(&b, &a, 1.0).unwrap());
}

#[test]
fn psnr_shape_mismatch_is_an_error() {
    let a = random_image(1, 3, 8, 8);
    let b = random_image(1, 3, 8, 9);
    assert!(psnr(&a, &b, 1.0).is_err());
}

#[test]
fn ssim_of_identical_images_is_exactly_one() {
    let img = random_image(4, 3, 16, 16);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
}

/// Independent sliding-window reference with separate accumulation passes.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let r = (win / 2) as isize;
    let mut kernel = Vec::new();
    let mut ksum = 0.0;
    for y in -r..=r {
        for x in -r..=r {
            let v = (-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            ksum += v;
        }
    }
    for v in &mut kernel {
        *v /= ksum;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let (h, w) = (a.height(), a.width());
    let mut per_channel = Vec::new();
    for ch in 0..a.channels() {
        let mut scores = Vec::new();
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let weighted = |img: &Image, f: &dyn Fn(f64, f64) -> f64| -> f64 {
                    let mut acc = 0.0;
                    let mut ki = 0;
                    for dy in 0..win {
                        for dx in 0..win {
                            let xv = img.get(ch, oy + dy, ox + dx);
                            let yv = b.get(ch, oy + dy, ox + dx);
                            acc += kernel[ki] * f(xv, yv);
                            ki += 1;
                        }
                    }
                    acc
                };
                let mu_x = weighted(a, &|x, _| x);
                let mu_y = weighted(a, &|_, y| y);
                let e_xx = weighted(a, &|x, _| x * x);
                let e_yy = weighted(a, &|_, y| y * y);
                let e_xy = weighted(a, &|x, y| x * y);
                let num = (2.0 * mu_x * mu_y + c1) * (2.0 * (e_xy - mu_x * mu_y) + c2);
                let den = (mu_x * mu_x + mu_y * mu_y + c1)
                    * ((e_xx - mu_x * mu_x) + (e_yy - mu_y * mu_y) + c2);
                scores.push(num / den);
            }
        }
        per_channel.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    per_channel.iter().sum::<f64>() / per_channel.len() as f64
}

#[test]
fn ssim_matches_the_sliding_window_reference() {
    let a = random_image(5, 1, 14, 15);
    let b = random_image(6, 1, 14, 15);
    let got = ssim(&a, &b).unwrap();
    let expect = ssim_reference(&a, &b);
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    // symmetry
    let rev = ssim(&b, &a).unwrap();
    assert!((got - rev).abs() < 1e-12);
}

#[test]
fn ssim_of_inverted_binary_image_is_strongly_negative() {
    // checkerboard against its inverse
    let (h, w) = (16usize, 16usize);
    let a = Image::new(
        1,
        h,
        w,
        (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect(),
    )
    .unwrap();
    let b = Image::new(1, h, w, a.data().iter().map(|&v| 1.0 - v).collect()).unwrap();
    let got = ssim(&a, &b).unwrap();
    let expect = ssim_reference(&a, &b);
    assert!((got - expect).abs() < 1e-9);
    assert!(got < -0.5, "strongly negative, got {got}");
}

#[test]
fn ssim_rejects_images_smaller_than_the_window() {
    let a = random_image(7, 1, 10, 10);
    assert!(matches!(ssim(&a, &a), Err(Error::Config(_))));
}

#[test]
#[allow(clippy::needless_range_loop)]
fn luma_conversion_anchors() {
    let white = Image::new(3, 2, 2, vec![1.0; 12]).unwrap();
    let y = rgb_to_y(&white).unwrap();
    assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

    let mut raw = vec![0.0; 12];
    for p in 4..8 {
        raw[p] = 1.0; // pure green
    }
    let green = Image::new(3, 2, 2, raw).unwrap();
    let y = rgb_to_y(&green).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.587));

    let gray = Image::new(3, 2, 2, vec![0.42; 12]).unwrap();
    let y = rgb_to_y(&gray).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));

    let single = Image::new(1, 2, 2, vec![0.5; 4]).unwrap();
    assert!(rgb_to_y(&single).is_err());
}

#[test]
fn luma_is_linear_before_clamping() {
    let a = random_image(8, 3, 6, 6);
    let b = random_image(9, 3, 6, 6);
    let (alpha, beta) = (0.3, 0.45); // keeps the mix inside [0,1]
    let mixed = Image::new(
        3,
        6,
        6,
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect(),
    )
    .unwrap();
    let ya = rgb_to_y(&a).unwrap();
    let yb = rgb_to_y(&b).unwrap();
    let ym = rgb_to_y(&mixed).unwrap();
    for i in 0..36 {
        let expect = alpha * ya.data()[i] + beta * yb.data()[i];
        assert!((ym.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn tiled_inference_with_identity_model_is_exact() {
    let cfg = UformerConfig {
        zero_output_proj: true,
        ..UformerConfig::smoke()
    };
    let params = build::<f32>(&cfg, 1).unwrap();
    let img = random_image(10, 3, 24, 20);

    // image smaller than the tile: single whole-image forward
    let out = tiled_inference(&params, &img, 64, 8).unwrap();
    let whole = restore(&params, &img.to_tensor::<f32>()).unwrap();
    assert_eq!(out.to_tensor::<f32>().data(), whole.data());

    // overlap 0 stitches tiles verbatim
    let out = tiled_inference(&params, &img, 16, 0).unwrap();
    assert_eq!(out.to_tensor::<f32>().data(), img.to_tensor::<f32>().data());

    // ramp blending of identical tile outputs reproduces the input closely
    let out = tiled_inference(&params, &img, 16, 4).unwrap();
    for (o, i) in out.data().iter().zip(img.data()) {
        assert!((o - i).abs() < 1e-7);
    }
}

#[test]
fn tiled_inference_with_zero_overlap_equals_independent_tile_forwards() {
    let cfg = UformerConfig::smoke();
    let params = build::<f32>(&cfg, 3).unwrap();
    let img = random_image(11, 3, 32, 16);
    let out = tiled_inference(&params, &img, 16, 0).unwrap();

    for ty in 0..2 {
        let patch = Tensor::<f32>::from_fn(&[3, 16, 16], |o| {
            let c = o / 256;
            let rest = o % 256;
            img.get(c, ty * 16 + rest / 16, rest % 16) as f32
        });
        let restored = restore(&params, &patch).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let got = out.get(c, ty * 16 + y, x);
                    let expect = restored.data()[(c * 16 + y) * 16 + x].clamp(0.0, 1.0) as f64;
                    assert!((got - expect).abs() < 1e-7);
                }
            }
        }
    }
}

#[test]
fn tiled_inference_rejects_bad_geometry() {
    let cfg = UformerConfig::smoke();
    let params = build::<f32>(&cfg, 3).unwrap();
    let img = random_image(12, 3, 32, 32);
    assert!(
        tiled_inference(&params, &img, 8, 8).is_err(),
        "overlap == tile"
    );
    assert!(
        tiled_inference(&params, &img, 2, 0).is_err(),
        "tile below the model minimum"
    );
}

#[test]
fn png_round_trip_quantizes_to_8_bits() {
    let dir = std::env::temp_dir().join("uformer-metrics-png");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("roundtrip.png");
    let img = random_image(13, 3, 9, 7);
    write_png(&path, &img).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!(back.channels(), 3);
    assert_eq!(back.height(), 9);
    assert_eq!(back.width(), 7);
    for (a, b) in img.data().iter().zip(back.data()) {
        let quantized = (a * 255.0).round() / 255.0;
        assert!((quantized - b).abs() < 1e-12);
    }

    // grayscale round trip
    let path = dir.join("gray.png");
    let img = random_image(14, 1, 5, 5);
    write_png(&path, &img).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!(back.channels(), 1);
}

#[test]
fn images_clamp_on_construction() {
    let img = Image::new(1, 1, 3, vec![-0.5, 0.5, 1.5]).unwrap();
    assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    assert!(Image::new(2, 1, 1, vec![0.0; 2]).is_err(), "2 channels");
}
