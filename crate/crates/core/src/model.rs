//! The full segmentation network: encoder, attention stack, prototype
//! classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{cra_forward, AffinityInput, BranchMode, CraStack, DEFAULT_BLOCKS};
use crate::encoder::{encode, init_encoder_with, EncoderParams, DEFAULT_DEPTH, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::params::Conv;
use crate::prototype::{
    assemble_prototypes, init_kernel_predictor, predict, similarity_map, PoolConfig, DEFAULT_ALPHA,
};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    /// Zero bypasses the attention stack.
    pub n_blocks: usize,
    pub branch_mode: BranchMode,
    pub affinity: AffinityInput,
    pub pool: PoolConfig,
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: DEFAULT_DEPTH,
            n_blocks: DEFAULT_BLOCKS,
            branch_mode: BranchMode::TwoBranch,
            affinity: AffinityInput::Embedded,
            pool: PoolConfig::default(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.pool.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub encoder: EncoderParams<P>,
    pub cra: CraStack<P>,
    pub predictor: Conv<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            encoder: self.encoder.map(f),
            cra: self.cra.map(f),
            predictor: self.predictor.map(f),
        }
    }

    /// Encoder, then attention blocks, then kernel predictor.
    pub fn views(&self) -> Vec<&P> {
        let mut v = self.encoder.views();
        v.extend(self.cra.views());
        v.extend(self.predictor.views());
        v
    }

    pub fn views_mut(&mut self) -> Vec<&mut P> {
        let mut v = self.encoder.views_mut();
        v.extend(self.cra.views_mut());
        v.extend(self.predictor.views_mut());
        v
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = init_encoder_with(&mut rng, cfg.depth);
        let mut cra = CraStack::init(&mut rng, cfg.n_blocks, cfg.depth, cfg.branch_mode);
        cra.affinity = cfg.affinity;
        ModelParams {
            encoder,
            cra,
            predictor: init_kernel_predictor(cfg.depth, &cfg.pool),
        }
    }

    /// Rebuilds a parameter set from a flat list in [`ModelParams::views`]
    /// order, checking every shape against a fresh initialization.
    pub fn from_flat(cfg: &ModelConfig, flat: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = Self::init(cfg, 0);
        let n = out.views().len();
        if flat.len() != n {
            return Err(Error::Contract(format!("expected {n} parameter tensors, found {}", flat.len())));
        }
        for (slot, t) in out.views_mut().into_iter().zip(flat) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("from_flat", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }

    pub fn n_scalars(&self) -> usize {
        self.views().iter().map(|t| t.len()).sum()
    }
}

/// Block-average downsampling of a binary `H×W` mask by `factor`, kept where
/// at least half of the block is foreground.
pub fn downsample_mask<T: Real>(mask: &Tensor<u8>, factor: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() != 2 || !s[0].is_multiple_of(factor) || !s[1].is_multiple_of(factor) {
        return Err(Error::dim("downsample_mask", format!("shape {s:?} not divisible by {factor}")));
    }
    let (h, w) = (s[0] / factor, s[1] / factor);
    let mut counts = vec![0usize; h * w];
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0 {
            counts[(i / s[1] / factor) * w + (i % s[1]) / factor] += 1;
        }
    }
    let need = factor * factor;
    Tensor::new(vec![h, w], counts.into_iter().map(|c| if 2 * c >= need { T::one() } else { T::zero() }).collect())
}

pub fn one_hot<T: Real>(mask: &Tensor<u8>) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::dim("one_hot", format!("expected H×W, got {s:?}")));
    }
    let n = mask.len();
    Tensor::from_fn(vec![2, s[0], s[1]], |i| {
        let fg = mask.data()[i % n] != 0;
        if (i >= n) == fg {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Smallest standard deviation [`image_var`] divides by.
pub const STD_FLOOR: f64 = 1e-6;

/// `1×H×W` constant holding `image` standardized to zero mean and unit
/// variance. The encoder starts with zero biases and so is positively
/// homogeneous: on raw non-negative intensities, flat regions of different
/// brightness would be collinear in feature space and indistinguishable to
/// cosine matching.
pub fn image_var<T: Real>(tape: &mut Tape<T>, image: &Tensor<f32>) -> Result<Var> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::dim("image", format!("expected H×W, got {s:?}")));
    }
    let n = image.len() as f64;
    let mean = image.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(STD_FLOOR);
    let t = Tensor::new(vec![1, s[0], s[1]], image.data().iter().map(|&v| T::lit((f64::from(v) - mean) * inv)).collect())?;
    Ok(tape.constant(t))
}

/// Features of one support/query pair after the attention stack.
#[derive(Debug, Clone, Copy)]
pub struct PairFeatures {
    pub z_s: Var,
    pub z_q: Var,
}

pub fn pair_features<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    support: Var,
    query: Var,
) -> Result<PairFeatures> {
    let e_s = encode(tape, support, &params.encoder)?;
    let e_q = encode(tape, query, &params.encoder)?;
    if params.cra.n_blocks() == 0 {
        return Ok(PairFeatures { z_s: e_s, z_q: e_q });
    }
    let (z_s, z_q) = cra_forward(tape, e_s, e_q, &params.cra)?;
    Ok(PairFeatures { z_s, z_q })
}

/// Class probabilities `2×H×W` at image resolution for `query_feat`, with
/// prototypes from `support_feat` under the image-resolution `mask`.
pub fn classify<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    support_feat: Var,
    mask: &Tensor<u8>,
    query_feat: Var,
) -> Result<Var> {
    let feat_mask = downsample_mask::<T>(mask, DOWNSAMPLE)?;
    let protos = assemble_prototypes(tape, support_feat, &feat_mask, &cfg.pool, &params.predictor)?;
    let s = similarity_map(tape, &protos, query_feat, cfg.alpha)?;
    let up = tape.upsample_bilinear(s, mask.shape()[0], mask.shape()[1])?;
    predict(tape, up)
}

/// Per-pixel argmax of `2×H×W` probabilities; ties go to background.
pub fn harden<T: Real>(prob: &Tensor<T>) -> Result<Tensor<u8>> {
    let idx = prob.argmax(0)?;
    Ok(idx.map(|c| u8::from(c == 1)))
}

/// Binary foreground prediction for `query` given one annotated support.
pub fn segment<T: Real>(
    params: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    support: &Tensor<f32>,
    support_mask: &Tensor<u8>,
    query: &Tensor<f32>,
) -> Result<Tensor<u8>> {
    if support.shape() != query.shape() || support.shape() != support_mask.shape() {
        return Err(Error::shape("segment", support.shape(), query.shape()));
    }
    let mut tape = Tape::new();
    let p = params.map(&mut crate::params::bind_frozen(&mut tape));
    let s = image_var(&mut tape, support)?;
    let q = image_var(&mut tape, query)?;
    let f = pair_features(&mut tape, &p, s, q)?;
    let prob = classify(&mut tape, &p, cfg, f.z_s, support_mask, f.z_q)?;
    harden(tape.value(prob))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_downsampling_uses_half_coverage() {
        let mut m = Tensor::full(vec![8, 8], 0u8).unwrap();
        // block (0,0): 8 of 16 pixels; block (0,1): 7 of 16
        for i in 0..8 {
            m.set(&[i / 4, i % 4], 1);
        }
        for i in 0..7 {
            m.set(&[i / 4, 4 + i % 4], 1);
        }
        let d = downsample_mask::<f64>(&m, 4).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_layout() {
        let m = Tensor::<u8>::new(vec![1, 3], vec![0, 1, 1]).unwrap();
        let o = one_hot::<f64>(&m).unwrap();
        assert_eq!(o.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn flat_round_trip_and_shape_checks() {
        let cfg = ModelConfig {
            depth: 8,
            n_blocks: 2,
            ..Default::default()
        };
        let p = ModelParams::<Tensor<f32>>::init(&cfg, 1);
        let flat: Vec<Tensor<f32>> = p.views().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_flat(&cfg, flat.clone()).unwrap(), p);
        assert!(ModelParams::<Tensor<f32>>::from_flat(&cfg, flat[1..].to_vec()).is_err());
        let other = ModelConfig { depth: 4, ..cfg };
        assert!(ModelParams::<Tensor<f32>>::from_flat(&other, flat).is_err());
    }

    #[test]
    fn segment_produces_binary_mask() {
        let cfg = ModelConfig {
            depth: 8,
            n_blocks: 1,
            ..Default::default()
        };
        let p = ModelParams::<Tensor<f32>>::init(&cfg, 3);
        let img = Tensor::from_fn(vec![32, 32], |i| ((i % 32) as f32 / 31.0).powi(2)).unwrap();
        let mask = Tensor::from_fn(vec![32, 32], |i| u8::from(i % 32 >= 16)).unwrap();
        let out = segment(&p, &cfg, &img, &mask, &img).unwrap();
        assert_eq!(out.shape(), &[32, 32]);
        assert!(out.data().iter().all(|&v| v <= 1));
    }
}
