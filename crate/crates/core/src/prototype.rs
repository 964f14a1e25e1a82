//! Prototype extraction and the cosine-similarity classifier.
//!
//! Index 0 is background, index 1 the foreground class of the episode.
//! Local prototypes come from content-aware reassembly over a `σ×σ` grid;
//! each class also gets one masked-average prototype.

use crate::attention::{pixel_rows, COSINE_EPS};
use crate::error::{Error, Result};
use crate::params::Conv;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolConfig {
    pub sigma: usize,
    pub k_re: usize,
    pub tau: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            sigma: 4,
            k_re: 5,
            tau: 0.95,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma == 0 {
            return Err(Error::Config("sigma must be at least 1".into()));
        }
        if self.k_re.is_multiple_of(2) {
            return Err(Error::Config(format!("k_re must be odd, got {}", self.k_re)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    LocalPooled,
    ClassMasked,
}

#[derive(Debug, Clone)]
pub struct ClassPrototypes {
    /// `n×D`
    pub vectors: Var,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// Indexed by class label.
    pub classes: Vec<ClassPrototypes>,
}

impl PrototypeSet {
    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.provenance.len()).collect()
    }
}

/// Kernel-predictor conv `D → k_re²`, zero-initialized so that fresh kernels
/// are uniform.
pub fn init_kernel_predictor<T: Real>(depth: usize, cfg: &PoolConfig) -> Conv<Tensor<T>> {
    Conv::zeros(cfg.k_re * cfg.k_re, depth, 1)
}

fn check_divisible(op: &'static str, shape: &[usize], sigma: usize) -> Result<()> {
    if shape.len() != 3 || sigma == 0 || !shape[1].is_multiple_of(sigma) || !shape[2].is_multiple_of(sigma) {
        return Err(Error::dim(op, format!("shape {shape:?} is not divisible by sigma {sigma}")));
    }
    Ok(())
}

/// One normalized `k_re×k_re` kernel per grid cell, `(H/σ)×(W/σ)×k×k`.
pub fn predict_kernels<T: Real>(tape: &mut Tape<T>, z: Var, predictor: &Conv<Var>, cfg: &PoolConfig) -> Result<Var> {
    check_divisible("predict_kernels", tape.shape(z), cfg.sigma)?;
    let logits = tape.conv2d(z, predictor.kernel, Some(predictor.bias), 1, 0)?;
    let pooled = tape.avg_pool(logits, cfg.sigma)?;
    let s = tape.shape(pooled).to_vec();
    if s[0] != cfg.k_re * cfg.k_re {
        return Err(Error::shape("predict_kernels", &s, &[cfg.k_re * cfg.k_re]));
    }
    let flat = tape.reshape(pooled, &[s[0], s[1] * s[2]])?;
    let per_cell = tape.transpose(flat)?;
    let norm = tape.softmax(per_cell, 1)?;
    tape.reshape(norm, &[s[1], s[2], cfg.k_re, cfg.k_re])
}

/// Reassembled local prototypes, `[(H/σ)·(W/σ)] × D` in row-major cell order.
pub fn carafe_pool<T: Real>(tape: &mut Tape<T>, z: Var, kernels: Var, cfg: &PoolConfig) -> Result<Var> {
    let sk = tape.shape(kernels);
    if sk.len() != 4 || sk[2] != cfg.k_re || sk[3] != cfg.k_re {
        return Err(Error::shape("carafe_pool", sk, &[cfg.k_re, cfg.k_re]));
    }
    tape.reassemble(z, kernels, cfg.sigma)
}

/// Masked spatial average of `x[D×H×W]`, a `D`-vector.
pub fn class_prototype<T: Real>(tape: &mut Tape<T>, x: Var, mask: &Tensor<T>, class: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || mask.shape() != &s[1..] {
        return Err(Error::shape("class_prototype", &s, mask.shape()));
    }
    let total = mask.sum();
    if total <= T::zero() {
        return Err(Error::EmptyClass { class });
    }
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    let m = tape.constant(mask.clone().reshape(vec![s[1] * s[2]])?);
    let weighted = tape.mul_trailing(flat, m)?;
    let summed = tape.sum_axis(weighted, 1)?;
    Ok(tape.scale(summed, T::one() / total))
}

/// `σ×σ` block averages of a `H×W` mask.
pub fn pool_mask<T: Real>(mask: &Tensor<T>, sigma: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() != 2 || sigma == 0 || !s[0].is_multiple_of(sigma) || !s[1].is_multiple_of(sigma) {
        return Err(Error::dim("pool_mask", format!("shape {s:?} is not divisible by sigma {sigma}")));
    }
    let (gh, gw) = (s[0] / sigma, s[1] / sigma);
    let norm = T::lit(1.0 / (sigma * sigma) as f64);
    let mut out = Tensor::zeros(vec![gh, gw])?;
    for y in 0..s[0] {
        for x in 0..s[1] {
            let cur = out.at(&[y / sigma, x / sigma]);
            out.set(&[y / sigma, x / sigma], cur + mask.at(&[y, x]) * norm);
        }
    }
    Ok(out)
}

/// Builds the background / foreground prototype sets from support features
/// and a binary mask at feature resolution.
pub fn assemble_prototypes<T: Real>(
    tape: &mut Tape<T>,
    z_sup: Var,
    mask: &Tensor<T>,
    cfg: &PoolConfig,
    predictor: &Conv<Var>,
) -> Result<PrototypeSet> {
    cfg.validate()?;
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Contract("prototype mask must be binary".into()));
    }
    let inverse = mask.map(|v| T::one() - v);
    let fg_class = class_prototype(tape, z_sup, mask, 1)?;
    let bg_class = class_prototype(tape, z_sup, &inverse, 0)?;
    let kernels = predict_kernels(tape, z_sup, predictor, cfg)?;
    let locals = carafe_pool(tape, z_sup, kernels, cfg)?;
    let pooled = pool_mask(mask, cfg.sigma)?;
    let tau = T::lit(cfg.tau);
    let low = T::one() - tau;
    let mut fg_cells = Vec::new();
    let mut bg_cells = Vec::new();
    for (cell, &v) in pooled.data().iter().enumerate() {
        if v >= tau {
            fg_cells.push(cell);
        } else if v <= low {
            bg_cells.push(cell);
        }
    }
    let d = tape.shape(z_sup)[0];
    let build = |tape: &mut Tape<T>, class_vec: Var, cells: &[usize]| -> Result<ClassPrototypes> {
        let head = tape.reshape(class_vec, &[1, d])?;
        let mut provenance = vec![Provenance::ClassMasked];
        let vectors = if cells.is_empty() {
            head
        } else {
            let picked = tape.gather_rows(locals, cells)?;
            provenance.extend(std::iter::repeat_n(Provenance::LocalPooled, cells.len()));
            tape.concat(&[head, picked])?
        };
        Ok(ClassPrototypes { vectors, provenance })
    };
    let bg = build(tape, bg_class, &bg_cells)?;
    let fg = build(tape, fg_class, &fg_cells)?;
    Ok(PrototypeSet { classes: vec![bg, fg] })
}

/// `α · max_p cos(p, x_q(h, w))` per class, `C×H×W`.
pub fn similarity_map<T: Real>(tape: &mut Tape<T>, protos: &PrototypeSet, xq: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if protos.classes.is_empty() {
        return Err(Error::Contract("prototype set has no classes".into()));
    }
    let s = tape.shape(xq).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("similarity_map", format!("expected D×H×W, got {s:?}")));
    }
    let eps = T::lit(COSINE_EPS);
    let q = pixel_rows(tape, xq)?;
    let q = tape.normalize_rows(q, eps)?;
    let hw = s[1] * s[2];
    let mut rows = Vec::with_capacity(protos.classes.len());
    for class in &protos.classes {
        let ps = tape.shape(class.vectors);
        if ps.len() != 2 || ps[1] != s[0] {
            return Err(Error::shape("similarity_map", ps, &s));
        }
        let p = tape.normalize_rows(class.vectors, eps)?;
        let pt = tape.transpose(p)?;
        let cos = tape.matmul(q, pt)?;
        let best = tape.max_axis(cos, 1)?;
        rows.push(tape.reshape(best, &[1, hw])?);
    }
    let stacked = tape.concat(&rows)?;
    let scaled = tape.scale(stacked, T::lit(alpha));
    tape.reshape(scaled, &[protos.classes.len(), s[1], s[2]])
}

/// `softmax_c(S ⊙ softmax_c(S))`.
pub fn predict<T: Real>(tape: &mut Tape<T>, s: Var) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::dim("predict", format!("need at least two classes, got {shape:?}")));
    }
    let inner = tape.softmax(s, 0)?;
    let prod = tape.mul(s, inner)?;
    tape.softmax(prod, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, Coords};
    use crate::params::bind_frozen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PoolConfig::default().validate().is_ok());
        for bad in [
            PoolConfig { sigma: 0, ..Default::default() },
            PoolConfig { k_re: 4, ..Default::default() },
            PoolConfig { tau: 0.0, ..Default::default() },
            PoolConfig { tau: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_predictor_gives_uniform_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PoolConfig::default();
        let mut tape = Tape::<f64>::new();
        let pred = init_kernel_predictor::<f64>(3, &cfg).map(&mut bind_frozen(&mut tape));
        let z = tape.constant(random(&mut rng, vec![3, 8, 8]));
        let k = predict_kernels(&mut tape, z, &pred, &cfg).unwrap();
        assert_eq!(tape.shape(k), &[2, 2, 5, 5]);
        assert!(tape.value(k).data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn random_kernels_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PoolConfig::default();
        let mut tape = Tape::<f64>::new();
        let pred = Conv::<Tensor<f64>>::fan_in_uniform(&mut rng, 25, 3, 1).map(&mut bind_frozen(&mut tape));
        let z = tape.constant(random(&mut rng, vec![3, 8, 12]));
        let k = predict_kernels(&mut tape, z, &pred, &cfg).unwrap();
        for kernel in tape.value(k).data().chunks(25) {
            assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let bad = tape.constant(Tensor::zeros(vec![3, 6, 8]).unwrap());
        assert!(matches!(
            predict_kernels(&mut tape, bad, &pred, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn kernel_gradient_into_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PoolConfig::default();
        let kp = Conv::<Tensor<f64>>::fan_in_uniform(&mut rng, 25, 2, 1);
        let z = random(&mut rng, vec![2, 8, 8]);
        let proj = random(&mut rng, vec![2, 2, 5, 5]);
        let f = move |tape: &mut Tape<f64>, v: &[Var]| {
            let pred = kp.map(&mut bind_frozen(tape));
            let k = predict_kernels(tape, v[0], &pred, &cfg)?;
            let r = tape.constant(proj.clone());
            let p = tape.mul(k, r)?;
            Ok(tape.sum(p))
        };
        let r = gradcheck::check(f, &[z], Coords::All, gradcheck::STEP).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn constant_map_is_preserved_where_neighbourhood_is_inside() {
        let cfg = PoolConfig::default();
        let mut tape = Tape::<f64>::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(4);
        let z = tape.constant(Tensor::from_fn(vec![3, 16, 16], |i| [0.5, -2.0, 3.0][i / 256]).unwrap());
        let pred = Conv::<Tensor<f64>>::fan_in_uniform(rng, 25, 3, 1).map(&mut bind_frozen(&mut tape));
        let k = predict_kernels(&mut tape, z, &pred, &cfg).unwrap();
        let p = carafe_pool(&mut tape, z, k, &cfg).unwrap();
        let pv = tape.value(p);
        // centres sit at 4m + 2, so the last grid row and column reach past the map
        for m in 0..3 {
            for n in 0..3 {
                for (c, want) in [0.5, -2.0, 3.0].into_iter().enumerate() {
                    assert!((pv.at(&[m * 4 + n, c]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_pooling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PoolConfig { sigma: 1, k_re: 1, tau: 0.95 };
        let mut tape = Tape::<f64>::new();
        let x = random(&mut rng, vec![3, 4, 5]);
        let z = tape.constant(x.clone());
        let pred = init_kernel_predictor::<f64>(3, &cfg).map(&mut bind_frozen(&mut tape));
        let k = predict_kernels(&mut tape, z, &pred, &cfg).unwrap();
        let p = carafe_pool(&mut tape, z, k, &cfg).unwrap();
        let pv = tape.value(p);
        for c in 0..3 {
            for i in 0..20 {
                assert_eq!(pv.at(&[i, c]), x.data()[c * 20 + i]);
            }
        }
    }

    #[test]
    fn class_prototype_special_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, vec![4, 3, 5]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let all = Tensor::full(vec![3, 5], 1.0).unwrap();
        let p = class_prototype(&mut tape, xv, &all, 1).unwrap();
        for c in 0..4 {
            let mean = x.data()[c * 15..(c + 1) * 15].iter().sum::<f64>() / 15.0;
            assert!((tape.value(p).data()[c] - mean).abs() < 1e-14);
        }
        let mut one = Tensor::zeros(vec![3, 5]).unwrap();
        one.set(&[2, 1], 1.0);
        let p = class_prototype(&mut tape, xv, &one, 1).unwrap();
        for c in 0..4 {
            assert_eq!(tape.value(p).data()[c], x.at(&[c, 2, 1]));
        }
        let none = Tensor::zeros(vec![3, 5]).unwrap();
        assert!(matches!(
            class_prototype(&mut tape, xv, &none, 1),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    fn half_mask(split: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![16, 16], |i| if i % 16 < split { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn all_foreground_mask_leaves_background_empty() {
        let cfg = PoolConfig::default();
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::full(vec![2, 16, 16], 1.0).unwrap());
        let pred = init_kernel_predictor::<f64>(2, &cfg).map(&mut bind_frozen(&mut tape));
        let r = assemble_prototypes(&mut tape, z, &half_mask(16), &cfg, &pred);
        assert!(matches!(r, Err(Error::EmptyClass { class: 0 })));
    }

    #[test]
    fn split_mask_discards_the_boundary_column() {
        // columns 0..6 foreground: grid column 0 is full, column 1 is half, 2 and 3 empty
        let cfg = PoolConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(random(&mut rng, vec![2, 16, 16]));
        let pred = init_kernel_predictor::<f64>(2, &cfg).map(&mut bind_frozen(&mut tape));
        let set = assemble_prototypes(&mut tape, z, &half_mask(6), &cfg, &pred).unwrap();
        assert_eq!(set.counts(), vec![1 + 8, 1 + 4]);
        assert_eq!(set.classes[1].provenance[0], Provenance::ClassMasked);
        assert!(set.classes[1].provenance[1..].iter().all(|&p| p == Provenance::LocalPooled));
        let total: usize = set.counts().iter().sum();
        assert!(total <= 16 + 2);
        for class in &set.classes {
            assert!(tape.value(class.vectors).all_finite());
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let cfg = PoolConfig::default();
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::full(vec![2, 16, 16], 1.0).unwrap());
        let pred = init_kernel_predictor::<f64>(2, &cfg).map(&mut bind_frozen(&mut tape));
        let mut m = half_mask(6);
        m.set(&[0, 0], 0.5);
        assert!(matches!(
            assemble_prototypes(&mut tape, z, &m, &cfg, &pred),
            Err(Error::Contract(_))
        ));
    }

    fn single_class_set(tape: &mut Tape<f64>, vectors: Vec<Tensor<f64>>) -> PrototypeSet {
        PrototypeSet {
            classes: vectors
                .into_iter()
                .map(|v| {
                    let n = v.shape()[0];
                    ClassPrototypes {
                        vectors: tape.constant(v),
                        provenance: vec![Provenance::LocalPooled; n],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn self_similarity_reaches_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, vec![3, 2, 2]);
        let mut tape = Tape::<f64>::new();
        let pix = Tensor::new(vec![1, 3], (0..3).map(|c| x.at(&[c, 1, 0])).collect()).unwrap();
        let set = single_class_set(&mut tape, vec![random(&mut rng, vec![2, 3]), pix]);
        let xq = tape.constant(x);
        let s = similarity_map(&mut tape, &set, xq, DEFAULT_ALPHA).unwrap();
        let sv = tape.value(s);
        assert!((sv.at(&[1, 1, 0]) - DEFAULT_ALPHA).abs() < 1e-12);
        assert!(sv.data().iter().all(|v| v.abs() <= DEFAULT_ALPHA + 1e-12));
        assert!(similarity_map(&mut tape, &set, xq, 0.0).is_err());
    }

    #[test]
    fn equal_scores_split_evenly() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::full(vec![2, 3, 3], 1.7).unwrap());
        let y = predict(&mut tape, s).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let one = tape.constant(Tensor::zeros(vec![1, 2, 2]).unwrap());
        assert!(predict(&mut tape, one).is_err());
    }

    #[test]
    fn hand_case_double_softmax() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(vec![2, 1, 1], vec![2.0, 0.0]).unwrap());
        let y = predict(&mut tape, s).unwrap();
        let inner0 = 2f64.exp() / (2f64.exp() + 1.0);
        let prod0 = 2.0 * inner0;
        let want0 = prod0.exp() / (prod0.exp() + 1.0);
        let yv = tape.value(y).data();
        assert!((inner0 - 0.8808).abs() < 1e-4);
        assert!((yv[0] - want0).abs() < 1e-12);
        assert!((yv[0] - 0.8534).abs() < 1e-4 && (yv[1] - 0.1466).abs() < 1e-4);
    }

    #[test]
    fn classifier_path_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PoolConfig::default();
        let kp = Conv::<Tensor<f64>>::fan_in_uniform(&mut rng, 25, 3, 1);
        let zs = random(&mut rng, vec![3, 8, 8]);
        let zq = random(&mut rng, vec![3, 8, 8]);
        let mask = Tensor::from_fn(vec![8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 }).unwrap();
        let proj = random(&mut rng, vec![2, 8, 8]);
        let kp_flat: Vec<Tensor<f64>> = kp.views().into_iter().cloned().collect();
        let inputs = [vec![zs, zq], kp_flat].concat();
        let f = move |tape: &mut Tape<f64>, v: &[Var]| {
            let pred = Conv { kernel: v[2], bias: v[3] };
            let set = assemble_prototypes(tape, v[0], &mask, &cfg, &pred)?;
            let s = similarity_map(tape, &set, v[1], DEFAULT_ALPHA)?;
            let y = predict(tape, s)?;
            let r = tape.constant(proj.clone());
            let p = tape.mul(y, r)?;
            Ok(tape.sum(p))
        };
        let r = gradcheck::check(f, &inputs, Coords::Sample { count: 120, seed: 1 }, gradcheck::STEP).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
