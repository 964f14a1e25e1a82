//! Episodes manufactured from unlabeled images.
//!
//! A superpixel of the image becomes the support pseudo-label; the query is
//! the same image under a random gamma and geometric transform, and its mask
//! is the support mask under the same geometric transform only.

pub mod superpixel;
pub mod transform;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use superpixel::{superpixels, SuperpixelMap};
pub use transform::{
    gamma_transform, geom_transform, sample_gamma, sample_geom, AugmentConfig, ElasticField, GeomParams, Interp,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub k_scale: f64,
    pub min_size: usize,
    pub min_area: usize,
    pub augment: AugmentConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            k_scale: 0.5,
            min_size: 16,
            min_area: 16,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_image: Tensor<f32>,
    pub support_mask: Tensor<u8>,
    pub query_image: Tensor<f32>,
    pub query_mask: Tensor<u8>,
    pub geom: GeomParams,
    pub gamma: f64,
    pub source_id: usize,
    pub seed: u64,
}

pub fn foreground_area(mask: &Tensor<u8>) -> usize {
    mask.data().iter().filter(|&&v| v != 0).count()
}

/// Picks one segment uniformly among those with area `>= min_area` that do
/// not touch the image border. When every large segment touches the border,
/// all large segments qualify.
pub fn sample_pseudo_label(sp: &SuperpixelMap, min_area: usize, rng: &mut impl Rng) -> Result<Tensor<u8>> {
    let label = choose_segment(sp, min_area, rng)?;
    Ok(sp.labels.map(|l| u8::from(l == label)))
}

/// Segment ids eligible for [`sample_pseudo_label`].
pub fn qualifying_segments(sp: &SuperpixelMap, min_area: usize) -> Vec<usize> {
    let areas = sp.areas();
    let border = sp.touches_border();
    let large: Vec<usize> = (0..sp.n_segments).filter(|&i| areas[i] >= min_area).collect();
    let interior: Vec<usize> = large.iter().copied().filter(|&i| !border[i]).collect();
    if interior.is_empty() {
        large
    } else {
        interior
    }
}

fn choose_segment(sp: &SuperpixelMap, min_area: usize, rng: &mut impl Rng) -> Result<usize> {
    qualifying_segments(sp, min_area)
        .choose(rng)
        .copied()
        .ok_or(Error::NoQualifyingSegment { min_area })
}

/// Builds one episode from `image`; a pure function of `(image, seed)`.
///
/// Fails with [`Error::NoQualifyingSegment`] when no segment qualifies or the
/// transformed mask falls below `min_area`; callers draw another source.
pub fn build_episode(image: &Tensor<f32>, source_id: usize, seed: u64, cfg: &EpisodeConfig) -> Result<Episode> {
    cfg.augment.validate()?;
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::dim("build_episode", format!("expected H×W, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = superpixels(image, cfg.k_scale, cfg.min_size, rng.random())?;
    let support_mask = sample_pseudo_label(&sp, cfg.min_area, &mut rng)?;
    let geom = sample_geom(&mut rng, &cfg.augment, h, w);
    let gamma = sample_gamma(&mut rng, &cfg.augment);
    let query_image = geom_transform(&gamma_transform(image, gamma)?, &geom, Interp::Bilinear)?;
    let query_mask = geom_transform(&support_mask, &geom, Interp::Nearest)?;
    if foreground_area(&query_mask) < cfg.min_area {
        return Err(Error::NoQualifyingSegment { min_area: cfg.min_area });
    }
    Ok(Episode {
        support_image: image.clone(),
        support_mask,
        query_image,
        query_mask,
        geom,
        gamma,
        source_id,
        seed,
    })
}
