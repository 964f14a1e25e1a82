//! Small convolutional feature encoder.
//!
//! Four 3×3 layers, `1 → 16 → 32 → 32 → D` channels. The first two layers
//! use stride 2, so a `1×H×W` image becomes a `D×(H/4)×(W/4)` feature map.
//! Every layer except the last is followed by a rectifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::Conv;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_DEPTH: usize = 32;

/// Total spatial downsampling of [`encode`].
pub const DOWNSAMPLE: usize = 4;

const KSIZE: usize = 3;
const PADDING: usize = 1;
const HIDDEN: [usize; 3] = [16, 32, 32];
const STRIDES: [usize; 4] = [2, 2, 1, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    pub layers: Vec<Conv<P>>,
}

impl<P> EncoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn views(&self) -> Vec<&P> {
        self.layers.iter().flat_map(Conv::views).collect()
    }

    pub fn views_mut(&mut self) -> Vec<&mut P> {
        self.layers.iter_mut().flat_map(Conv::views_mut).collect()
    }
}

impl<T: Real> EncoderParams<Tensor<T>> {
    pub fn depth(&self) -> usize {
        self.layers.last().map_or(0, Conv::out_channels)
    }
}

/// Fan-in scaled uniform initialization, reproducible from `seed`.
pub fn init_encoder<T: Real>(seed: u64, depth: usize) -> EncoderParams<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_encoder_with(&mut rng, depth)
}

pub(crate) fn init_encoder_with<T: Real>(rng: &mut ChaCha8Rng, depth: usize) -> EncoderParams<Tensor<T>> {
    let widths = [1, HIDDEN[0], HIDDEN[1], HIDDEN[2], depth];
    let layers = widths
        .windows(2)
        .map(|w| Conv::fan_in_uniform(rng, w[1], w[0], KSIZE))
        .collect();
    EncoderParams { layers }
}

/// Encodes a `1×H×W` image into a `D×(H/4)×(W/4)` feature map.
pub fn encode<T: Real>(tape: &mut Tape<T>, image: Var, params: &EncoderParams<Var>) -> Result<Var> {
    let s = tape.shape(image);
    if s.len() != 3 || s[0] != 1 || !s[1].is_multiple_of(DOWNSAMPLE) || !s[2].is_multiple_of(DOWNSAMPLE) {
        return Err(Error::dim(
            "encode",
            format!("expected 1×H×W with H, W divisible by {DOWNSAMPLE}, got {s:?}"),
        ));
    }
    if params.layers.len() != STRIDES.len() {
        return Err(Error::Config(format!(
            "encoder has {} layers, expected {}",
            params.layers.len(),
            STRIDES.len()
        )));
    }
    let last = params.layers.len() - 1;
    let mut x = image;
    for (i, (layer, &stride)) in params.layers.iter().zip(&STRIDES).enumerate() {
        x = tape.conv2d(x, layer.kernel, Some(layer.bias), stride, PADDING)?;
        if i != last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, Coords};
    use crate::params::{bind, bind_frozen};
    use rand::Rng;

    fn run(image: &Tensor<f64>, params: &EncoderParams<Tensor<f64>>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = params.map(&mut bind_frozen(&mut tape));
        let x = tape.constant(image.clone());
        let y = encode(&mut tape, x, &p).unwrap();
        tape.value(y).clone()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![1, h, w], |_| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn shape_contract() {
        let params = init_encoder::<f64>(1, DEFAULT_DEPTH);
        for (h, w) in [(64, 64), (32, 96), (96, 32)] {
            let y = run(&random_image(2, h, w), &params);
            assert_eq!(y.shape(), &[DEFAULT_DEPTH, h / 4, w / 4]);
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let params = init_encoder::<f64>(1, 8);
        let mut tape = Tape::new();
        let p = params.map(&mut bind_frozen(&mut tape));
        let x = tape.constant(Tensor::zeros(vec![1, 30, 32]).unwrap());
        assert!(matches!(encode(&mut tape, x, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_image_with_zero_bias_encodes_to_zero() {
        let params = init_encoder::<f64>(3, DEFAULT_DEPTH);
        let y = run(&Tensor::zeros(vec![1, 64, 64]).unwrap(), &params);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_reproducible_and_seed_dependent() {
        let a = init_encoder::<f32>(11, DEFAULT_DEPTH);
        let b = init_encoder::<f32>(11, DEFAULT_DEPTH);
        let c = init_encoder::<f32>(12, DEFAULT_DEPTH);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.depth(), DEFAULT_DEPTH);
    }

    #[test]
    fn kernel_std_matches_fan_in_theory() {
        // U(-b, b) with b = sqrt(6 / fan_in) has std sqrt(2 / fan_in)
        let params = init_encoder::<f64>(5, DEFAULT_DEPTH);
        for layer in &params.layers[2..] {
            let k = &layer.kernel;
            assert!(k.len() >= 9_000);
            let fan_in = (k.shape()[1] * 9) as f64;
            let mean = k.sum() / k.len() as f64;
            let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k.len() as f64;
            let want = (2.0 / fan_in).sqrt();
            let ratio = var.sqrt() / want;
            assert!((ratio - 1.0).abs() < 0.1, "std ratio {ratio}");
        }
    }

    #[test]
    fn identical_images_encode_identically() {
        let params = init_encoder::<f64>(4, 8);
        let img = random_image(9, 32, 32);
        assert_eq!(run(&img, &params), run(&img.clone(), &params));
    }

    #[test]
    fn translation_covariance_in_interior() {
        let params = init_encoder::<f64>(6, 8);
        let img = random_image(10, 64, 64);
        // shift content down/right by 4 pixels
        let shifted = Tensor::from_fn(vec![1, 64, 64], |i| {
            let (y, x) = (i / 64, i % 64);
            if y >= 4 && x >= 4 {
                img.data()[(y - 4) * 64 + (x - 4)]
            } else {
                0.0
            }
        })
        .unwrap();
        let a = run(&img, &params);
        let b = run(&shifted, &params);
        // receptive field border: keep away from the padded edges
        for c in 0..8 {
            for y in 3..13 {
                for x in 3..13 {
                    let va = a.at(&[c, y, x]);
                    let vb = b.at(&[c, y + 1, x + 1]);
                    assert!((va - vb).abs() < 1e-12, "c{c} y{y} x{x}: {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn gradient_wrt_params_matches_finite_differences() {
        let params = init_encoder::<f64>(8, 4);
        let img = random_image(12, 8, 8);
        let flat: Vec<Tensor<f64>> = params.views().into_iter().cloned().collect();
        let weights = random_image(13, 4, 4).reshape(vec![4, 2, 2]).unwrap();
        let n_layers = params.layers.len();
        let f = move |tape: &mut Tape<f64>, v: &[Var]| {
            let p = EncoderParams {
                layers: (0..n_layers)
                    .map(|i| Conv {
                        kernel: v[2 * i],
                        bias: v[2 * i + 1],
                    })
                    .collect(),
            };
            let x = tape.constant(img.clone());
            let y = encode(tape, x, &p)?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(y, w)?;
            Ok(tape.sum(prod))
        };
        let r = gradcheck::check(f, &flat, Coords::Sample { count: 60, seed: 3 }, gradcheck::STEP).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        // bind() path produces gradients for every layer
        let mut tape = Tape::new();
        let p = params.map(&mut bind(&mut tape));
        let x = tape.constant(random_image(12, 8, 8));
        let y = encode(&mut tape, x, &p).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(p.views().iter().all(|v| tape.grad(**v).is_some()));
    }
}
