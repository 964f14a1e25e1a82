//! Geometric (affine + elastic) and intensity transforms.
//!
//! The warp is defined by its inverse map: output pixel `o` samples the
//! input at `A⁻¹(o + d(o) − c − t) + c`, where `A = s·R(θ)`, `c` is the image
//! centre, `t` the translation in pixels and `d` the elastic displacement.
//! Samples outside the input read as zero.

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::selfsup::superpixel::gaussian_blur;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Smooth displacement field, `(dy, dx)` per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    pub height: usize,
    pub width: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl ElasticField {
    pub fn zero(height: usize, width: usize) -> Self {
        ElasticField {
            height,
            width,
            dy: vec![0.0; height * width],
            dx: vec![0.0; height * width],
        }
    }

    /// Largest displacement length.
    pub fn max_magnitude(&self) -> f64 {
        self.dy
            .iter()
            .zip(&self.dx)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// White noise smoothed by a Gaussian of width `smoothing`, rescaled so
    /// the largest displacement has length `amplitude`.
    pub fn random(rng: &mut impl Rng, height: usize, width: usize, amplitude: f64, smoothing: f64) -> Self {
        if amplitude <= 0.0 {
            return Self::zero(height, width);
        }
        let noise = Uniform::new_inclusive(-1.0, 1.0).expect("finite range");
        let mut draw = || -> Vec<f64> { (0..height * width).map(|_| rng.sample(noise)).collect() };
        let (ny, nx) = (draw(), draw());
        let mut f = ElasticField {
            height,
            width,
            dy: gaussian_blur(&ny, height, width, smoothing),
            dx: gaussian_blur(&nx, height, width, smoothing),
        };
        let m = f.max_magnitude();
        if m > 0.0 {
            let k = amplitude / m;
            f.dy.iter_mut().chain(f.dx.iter_mut()).for_each(|v| *v *= k);
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeomParams {
    pub rotation_deg: f64,
    /// `(ty, tx)` as fractions of the image height and width.
    pub translation: (f64, f64),
    pub scale: f64,
    pub elastic: ElasticField,
}

impl GeomParams {
    pub fn identity(height: usize, width: usize) -> Self {
        GeomParams {
            rotation_deg: 0.0,
            translation: (0.0, 0.0),
            scale: 1.0,
            elastic: ElasticField::zero(height, width),
        }
    }
}

/// Sampling ranges for [`GeomParams`] and the gamma exponent. Every range is
/// symmetric about the identity; zero widths give the identity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub max_scale_delta: f64,
    pub elastic_amplitude: f64,
    pub elastic_smoothing: f64,
    pub max_gamma_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            max_translation: 0.05,
            max_scale_delta: 0.1,
            elastic_amplitude: 2.0,
            elastic_smoothing: 8.0,
            max_gamma_delta: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            max_scale_delta: 0.0,
            elastic_amplitude: 0.0,
            elastic_smoothing: 0.0,
            max_gamma_delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=15.0).contains(&self.max_rotation_deg)
            && (0.0..=0.05).contains(&self.max_translation)
            && (0.0..=0.1).contains(&self.max_scale_delta)
            && (0.0..=0.5).contains(&self.max_gamma_delta)
            && self.elastic_amplitude >= 0.0
            && self.elastic_smoothing >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation ranges out of bounds: {self:?}")))
        }
    }
}

fn symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

pub fn sample_geom(rng: &mut impl Rng, cfg: &AugmentConfig, height: usize, width: usize) -> GeomParams {
    let rotation_deg = symmetric(rng, cfg.max_rotation_deg);
    let ty = symmetric(rng, cfg.max_translation);
    let tx = symmetric(rng, cfg.max_translation);
    let scale = 1.0 + symmetric(rng, cfg.max_scale_delta);
    let elastic = ElasticField::random(rng, height, width, cfg.elastic_amplitude, cfg.elastic_smoothing);
    GeomParams {
        rotation_deg,
        translation: (ty, tx),
        scale,
        elastic,
    }
}

pub fn sample_gamma(rng: &mut impl Rng, cfg: &AugmentConfig) -> f64 {
    1.0 + symmetric(rng, cfg.max_gamma_delta)
}

/// Warps a `H×W` map. Masks must use [`Interp::Nearest`] so that their value
/// set is preserved.
pub fn geom_transform<T>(x: &Tensor<T>, p: &GeomParams, interp: Interp) -> Result<Tensor<T>>
where
    T: Copy + Default + Into<f64> + FromF64,
{
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::dim("geom_transform", format!("expected H×W, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if p.elastic.height != h || p.elastic.width != w {
        return Err(Error::shape("geom_transform", s, &[p.elastic.height, p.elastic.width]));
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ty, tx) = (p.translation.0 * h as f64, p.translation.1 * w as f64);
    let theta = p.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv = 1.0 / p.scale;
    let src = x.data();
    let read = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            src[yy as usize * w + xx as usize].into()
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let i = oy * w + ox;
            let vy = oy as f64 + p.elastic.dy[i] - cy - ty;
            let vx = ox as f64 + p.elastic.dx[i] - cx - tx;
            // R(θ)⁻¹ = R(−θ)
            let sy = inv * (cos * vy - sin * vx) + cy;
            let sx = inv * (sin * vy + cos * vx) + cx;
            let v = match interp {
                Interp::Nearest => read(sy.round() as isize, sx.round() as isize),
                Interp::Bilinear => {
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let (y0, x0) = (y0 as isize, x0 as isize);
                    let top = read(y0, x0) * (1.0 - fx) + read(y0, x0 + 1) * fx;
                    let bot = read(y0 + 1, x0) * (1.0 - fx) + read(y0 + 1, x0 + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
            };
            out.push(T::from_f64(v));
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Conversion back from the warp's working precision.
pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for u8 {
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// `x^γ` for `x ∈ [0, 1]`, `γ ∈ [0.5, 1.5]`.
pub fn gamma_transform(x: &Tensor<f32>, gamma: f64) -> Result<Tensor<f32>> {
    if !(0.5..=1.5).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0.5, 1.5], got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(x.clone());
    }
    let g = gamma as f32;
    Ok(x.map(|v| v.clamp(0.0, 1.0).powf(g)))
}
