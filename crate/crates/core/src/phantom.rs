//! Synthetic abdominal phantoms.
//!
//! Each scan is a body ellipse holding four deformed-ellipse organs at
//! roughly fixed anatomical positions (image left is the patient's right).
//! Label values: 0 background/body, 1 left kidney, 2 right kidney, 3 spleen,
//! 4 liver.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_CLASSES: u8 = 4;
pub const CLASS_NAMES: [&str; 4] = ["lk", "rk", "spleen", "liver"];
pub const BODY_INTENSITY: f64 = 0.3;
/// Mean intensity per organ label 1..=4.
pub const ORGAN_INTENSITY: [f64; 4] = [0.95, 0.8, 0.65, 0.5];
const MAX_ATTEMPTS: usize = 100;

pub fn class_name(label: u8) -> &'static str {
    CLASS_NAMES[usize::from(label) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_scans: usize,
    pub texture_noise: f64,
    pub min_area: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 64,
            n_scans: 20,
            texture_noise: 0.03,
            min_area: 16,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    /// `H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H×W` organ labels.
    pub labels: Tensor<u8>,
}

impl Scan {
    pub fn class_mask(&self, label: u8) -> Tensor<u8> {
        self.labels.map(|l| u8::from(l == label))
    }

    /// The image with the pixels of `classes` repainted as body tissue.
    pub fn without_classes(&self, classes: &[u8], texture_noise: f64, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, texture_noise.max(0.0)).expect("finite std");
        let mut out = self.image.clone();
        for (v, &l) in out.data_mut().iter_mut().zip(self.labels.data()) {
            if classes.contains(&l) {
                *v = (BODY_INTENSITY + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        out
    }
}

/// Nominal organ placement, as fractions of the image size:
/// `(centre y, centre x, radius y, radius x)`.
const LAYOUT: [(f64, f64, f64, f64); 4] = [
    (0.64, 0.68, 0.085, 0.065),
    (0.64, 0.32, 0.085, 0.065),
    (0.36, 0.71, 0.10, 0.075),
    (0.40, 0.30, 0.16, 0.13),
];

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64, nominal: (f64, f64, f64, f64)) -> Self {
        let (cy, cx, ry, rx) = nominal;
        let jitter = 0.04 * size;
        Blob {
            cy: cy * size + rng.random_range(-jitter..=jitter),
            cx: cx * size + rng.random_range(-jitter..=jitter),
            ry: ry * size * rng.random_range(0.85..=1.15),
            rx: rx * size * rng.random_range(0.85..=1.15),
            angle: rng.random_range(-0.3..=0.3),
            harmonics: [
                (rng.random_range(0.0..=0.08), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.0..=0.06), rng.random_range(0.0..2.0 * PI)),
            ],
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dy + s * dx, -s * dy + c * dx);
        let r = ((u / self.ry).powi(2) + (v / self.rx).powi(2)).sqrt();
        let theta = v.atan2(u);
        let [(a2, p2), (a3, p3)] = self.harmonics;
        let boundary = 1.0 + a2 * (2.0 * theta + p2).cos() + a3 * (3.0 * theta + p3).cos();
        r <= boundary
    }
}

fn generate_scan(spec: &PhantomSpec, index: usize) -> Result<Scan> {
    let n = spec.image_size;
    let size = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut labels = vec![0u8; n * n];
    let mut body = vec![false; n * n];
    let (bry, brx) = (0.44 * size, 0.46 * size);
    let centre = (size - 1.0) / 2.0;
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = ((y as f64 - centre) / bry, (x as f64 - centre) / brx);
            body[y * n + x] = dy * dy + dx * dx <= 1.0;
        }
    }

    for (k, &nominal) in LAYOUT.iter().enumerate() {
        let label = k as u8 + 1;
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let blob = Blob::random(&mut rng, size, nominal);
            let pixels: Vec<usize> = (0..n * n)
                .filter(|&i| blob.contains((i / n) as f64, (i % n) as f64))
                .collect();
            // one pixel of clearance from other organs and the body wall
            let clear = pixels.iter().all(|&i| {
                let (y, x) = (i / n, i % n);
                y > 0
                    && x > 0
                    && y + 1 < n
                    && x + 1 < n
                    && [i, i - 1, i + 1, i - n, i + n]
                        .iter()
                        .all(|&j| body[j] && (labels[j] == 0 || labels[j] == label))
            });
            if clear && pixels.len() >= spec.min_area {
                for i in pixels {
                    labels[i] = label;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "scan {index}: could not place {} after {MAX_ATTEMPTS} attempts",
                class_name(label)
            )));
        }
    }

    let noise = Normal::new(0.0, spec.texture_noise.max(0.0)).expect("finite std");
    // organ-specific stripe texture on top of white noise
    let stripe_freq = [0.9, 0.6, 0.35, 0.2];
    let mut image = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let base = match labels[i] {
            0 if body[i] => BODY_INTENSITY,
            0 => 0.0,
            l => {
                let k = usize::from(l) - 1;
                ORGAN_INTENSITY[k] + 0.5 * spec.texture_noise * (stripe_freq[k] * (x + 0.5 * y)).sin()
            }
        };
        let v = if base > 0.0 { base + noise.sample(&mut rng) } else { 0.0 };
        image.push(v.clamp(0.0, 1.0) as f32);
    }
    Ok(Scan {
        image: Tensor::new(vec![n, n], image)?,
        labels: Tensor::new(vec![n, n], labels)?,
    })
}

pub fn gen_phantoms(spec: &PhantomSpec) -> Result<Vec<Scan>> {
    if spec.n_scans < 5 {
        return Err(Error::Config(format!("n_scans must be at least 5, got {}", spec.n_scans)));
    }
    if spec.image_size < 16 || !spec.image_size.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "image_size must be a multiple of 4 and at least 16, got {}",
            spec.image_size
        )));
    }
    (0..spec.n_scans).map(|i| generate_scan(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec {
            n_scans: 5,
            ..Default::default()
        };
        assert_eq!(gen_phantoms(&spec).unwrap(), gen_phantoms(&spec).unwrap());
        let other = PhantomSpec { seed: 8, ..spec };
        assert_ne!(gen_phantoms(&spec).unwrap(), gen_phantoms(&other).unwrap());
    }

    #[test]
    fn every_scan_has_all_organs() {
        let spec = PhantomSpec::default();
        for scan in gen_phantoms(&spec).unwrap() {
            for l in 1..=N_CLASSES {
                let area = scan.labels.data().iter().filter(|&&v| v == l).count();
                assert!(area >= spec.min_area, "class {l} area {area}");
            }
            // body does not touch the frame
            let n = spec.image_size;
            for i in 0..n {
                for &(y, x) in &[(0, i), (n - 1, i), (i, 0), (i, n - 1)] {
                    assert_eq!(scan.image.at(&[y, x]), 0.0);
                }
            }
        }
    }

    #[test]
    fn repainting_removes_organ_contrast() {
        let spec = PhantomSpec {
            n_scans: 5,
            ..Default::default()
        };
        let scan = &gen_phantoms(&spec).unwrap()[0];
        let painted = scan.without_classes(&[1, 2], spec.texture_noise, 3);
        let mean = |img: &Tensor<f32>, l: u8| {
            let v: Vec<f64> = img
                .data()
                .iter()
                .zip(scan.labels.data())
                .filter(|(_, &m)| m == l)
                .map(|(&p, _)| f64::from(p))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean(&painted, 1) - BODY_INTENSITY).abs() < 0.02);
        assert!((mean(&painted, 2) - BODY_INTENSITY).abs() < 0.02);
        assert_eq!(mean(&painted, 4), mean(&scan.image, 4));
    }

    #[test]
    fn too_few_scans_is_a_config_error() {
        let spec = PhantomSpec {
            n_scans: 4,
            ..Default::default()
        };
        assert!(matches!(gen_phantoms(&spec), Err(Error::Config(_))));
    }
}
