//! Deterministic synthetic reference images.
//!
//! Real photographs are not bundled with the repository, so tests, the
//! acceptance suite, and the CLI's synthetic mode generate structured
//! grayscale scenes instead: smooth shading, a few hard-edged shapes, and
//! fine texture. That mix keeps full-reference PSNR meaningfully sensitive to
//! blur, noise, and block quantization alike.

use crate::pgm::quantize_to_8bit;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generates one reference image. The texture *pattern* is randomized per
/// seed but the texture *energy budget* is fixed across the whole family:
/// every reference carries the same amplitudes of shading, shape contrast,
/// oriented detail, and fine grain. Distortion severity is then comparable
/// across references, which is what lets a no-reference score generalize to
/// held-out images at this scale.
pub fn synthetic_reference(width: usize, height: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f32; width * height];
    let tau = std::f32::consts::TAU;

    // low-frequency shading: a fixed frequency/amplitude bank rotated by a
    // random base angle, phases random per image
    let shading_bank = [(0.9f32, 0.30f32), (1.6, 0.22), (2.4, 0.16)];
    let shade_angle = rng.gen_range(0.0..tau);
    let waves: Vec<(f32, f32, f32, f32)> = shading_bank
        .iter()
        .enumerate()
        .map(|(i, (freq, amp))| {
            let angle = shade_angle + i as f32 * tau / 6.0;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..tau),
                *amp,
            )
        })
        .collect();
    // mid-frequency detail bank: strongly blur-sensitive, and isotropic so
    // no orientation- or frequency-selective feature can tell references
    // apart; only the phases vary per image
    let base_angle = rng.gen_range(0.0..tau);
    let stripes: Vec<(f32, f32, f32, f32)> = (0..6)
        .map(|i| {
            let angle = base_angle + i as f32 * tau / 12.0;
            let freq = 6.0 + i as f32 * 1.2;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..tau),
                0.09f32,
            )
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let u = x as f32 / width as f32;
            let v = y as f32 / height as f32;
            let mut acc = 0.0;
            for &(fx, fy, phase, amp) in waves.iter().chain(&stripes) {
                acc += amp * (tau * (fx * u + fy * v) + phase).sin();
            }
            img[y * width + x] = acc;
        }
    }

    // rectangles and soft disks: fixed sizes, contrasts and hard/soft mix,
    // so every reference carries the same edge-length budget; only the
    // placements differ
    let shapes: [(usize, usize, f32, bool); 6] = [
        (width / 4, height / 6, 0.22, false),
        (width / 6, height / 4, -0.22, false),
        (width / 5, height / 5, 0.22, true),
        (width / 5, height / 5, -0.22, true),
        (width / 8, height / 3, 0.18, false),
        (width / 3, height / 8, -0.18, false),
    ];
    for &(rw, rh, delta, soft) in &shapes {
        let cx = rng.gen_range(0..width) as isize;
        let cy = rng.gen_range(0..height) as isize;
        let (rw, rh) = (rw as isize, rh as isize);
        for y in (cy - rh).max(0)..(cy + rh).min(height as isize) {
            for x in (cx - rw).max(0)..(cx + rw).min(width as isize) {
                let idx = y as usize * width + x as usize;
                if soft {
                    let du = (x - cx) as f32 / rw as f32;
                    let dv = (y - cy) as f32 / rh as f32;
                    let d2 = du * du + dv * dv;
                    if d2 < 1.0 {
                        img[idx] += delta * (1.0 - d2);
                    }
                } else {
                    img[idx] += delta;
                }
            }
        }
    }

    // fine grain of fixed amplitude so the first blur level is visible
    for v in &mut img {
        *v += rng.gen_range(-0.10..0.10f32);
    }

    // fixed affine map into pixel range; never per-image rescaling, which
    // would reintroduce per-reference texture gain
    for v in &mut img {
        *v = (0.5 + 0.27 * *v).clamp(0.03, 0.97);
    }

    let mut t = Tensor::from_vec(&[height, width], img).expect("fixture size");
    quantize_to_8bit(&mut t);
    t
}

/// A small set of distinct references, ids `ref_000`, `ref_001`, ...
pub fn reference_set(count: usize, width: usize, height: usize, base_seed: u64) -> Vec<(String, Tensor)> {
    (0..count)
        .map(|i| {
            (
                format!("ref_{i:03}"),
                synthetic_reference(width, height, base_seed.wrapping_add(i as u64)),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_reference(48, 32, 7);
        let b = synthetic_reference(48, 32, 7);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[32, 48]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = synthetic_reference(48, 32, 8);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn has_texture_to_lose() {
        let img = synthetic_reference(64, 64, 3);
        // neighboring-pixel variation must be present, otherwise PSNR
        // monotonicity tests would be vacuous
        let mut diff = 0.0f32;
        for y in 0..64 {
            for x in 1..64 {
                diff += (img.at2(y, x) - img.at2(y, x - 1)).abs();
            }
        }
        assert!(diff / (64.0 * 63.0) > 0.01, "fixture too smooth: {diff}");
    }
}
