//! Episodic training and evaluation.

pub mod eval;
pub mod loss;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{classify, image_var, one_hot, pair_features, ModelConfig, ModelParams};
use crate::params::bind;
use crate::selfsup::{build_episode, Episode, EpisodeConfig};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use eval::{dice, evaluate, fold_ranges, EvalReport, FoldResult, Setting};
pub use loss::{reg_loss, seg_loss, total_loss, ClassWeights};
pub use optim::{lr_at, sgd_step, Schedule};

/// Episodes that fail to build (no qualifying superpixel, empty class at
/// feature resolution) are redrawn up to this many times per iteration.
pub const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub momentum: f64,
    pub iterations: usize,
    pub lambda_reg: f64,
    pub weights: ClassWeights,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::default(),
            momentum: 0.9,
            iterations: 2000,
            lambda_reg: 1.0,
            weights: ClassWeights::default(),
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let positive = s.lr > 0.0 && s.decay_every > 0 && s.decay_factor > 0.0 && self.iterations > 0;
        if !positive {
            return Err(Error::Config(format!("learning-rate schedule must be positive: {s:?}")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config(format!("lambda_reg must be non-negative, got {}", self.lambda_reg)));
        }
        let w = &self.weights;
        if !(w.background > 0.0 && w.background < w.foreground) {
            return Err(Error::Config(format!("class weights need 0 < background < foreground: {w:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub seg: Var,
    pub reg: Option<Var>,
}

/// Builds the training objective for one episode on `tape`.
pub fn episode_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    model: &ModelConfig,
    train: &TrainConfig,
    episode: &Episode,
) -> Result<LossParts> {
    let s = image_var(tape, &episode.support_image)?;
    let q = image_var(tape, &episode.query_image)?;
    let feats = pair_features(tape, params, s, q)?;
    let prob = classify(tape, params, model, feats.z_s, &episode.support_mask, feats.z_q)?;
    let gt = one_hot::<T>(&episode.query_mask)?;
    let seg = seg_loss(tape, prob, &gt, train.weights)?;
    let reg = if train.lambda_reg > 0.0 {
        let hard = loss::hardened_prediction(tape, prob)?;
        reg_loss(tape, params, model, feats, &hard, &episode.support_mask, train.weights)?
    } else {
        None
    };
    let total = total_loss(tape, seg, reg, train.lambda_reg)?;
    Ok(LossParts { total, seg, reg })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
    pub seg: f64,
    /// Zero when the regularization term was skipped.
    pub reg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<Tensor<f32>>,
    pub curve: Vec<LossPoint>,
    /// Episodes discarded and redrawn.
    pub redraws: usize,
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64()
}

/// Self-supervised episodic training on unlabeled `images`.
pub fn run_training(
    images: &[Tensor<f32>],
    model: &ModelConfig,
    train: &TrainConfig,
    episodes: &EpisodeConfig,
) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    model.validate()?;
    train.validate()?;
    let mut params = ModelParams::<Tensor<f32>>::init(model, train.seed);
    let mut velocity: Vec<Tensor<f32>> = params
        .views()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let mut curve = Vec::with_capacity(train.iterations);
    let mut redraws = 0;

    for iteration in 0..train.iterations {
        let lr = lr_at(iteration, &train.schedule);
        let mut done = false;
        for _ in 0..MAX_REDRAWS {
            let source = rng.random_range(0..images.len());
            let seed: u64 = rng.random();
            let episode = match build_episode(&images[source], source, seed, episodes) {
                Ok(e) => e,
                Err(Error::NoQualifyingSegment { .. }) => {
                    redraws += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut tape = Tape::<f32>::new();
            let bound = params.map(&mut bind(&mut tape));
            let parts = match episode_loss(&mut tape, &bound, model, train, &episode) {
                Ok(p) => p,
                Err(Error::EmptyClass { .. }) => {
                    redraws += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let point = LossPoint {
                iteration,
                loss: scalar(&tape, parts.total),
                seg: scalar(&tape, parts.seg),
                reg: parts.reg.map_or(0.0, |r| scalar(&tape, r)),
                lr,
            };
            if !point.loss.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    loss: point.loss,
                    seg: point.seg,
                    reg: point.reg,
                    lr,
                });
            }
            tape.backward(parts.total)?;
            let vars: Vec<Var> = bound.views().into_iter().copied().collect();
            let grads: Vec<Option<&Tensor<f32>>> = vars.iter().map(|&v| tape.grad(v)).collect();
            sgd_step(&mut params.views_mut(), &grads, &mut velocity, lr, train.momentum)?;
            if train.log_every > 0 && iteration % train.log_every == 0 {
                log::info!(
                    "iter {iteration:>5}  loss {:.5}  seg {:.5}  reg {:.5}  lr {lr:.6}",
                    point.loss,
                    point.seg,
                    point.reg
                );
            }
            curve.push(point);
            done = true;
            break;
        }
        if !done {
            return Err(Error::Config(format!(
                "no usable episode after {MAX_REDRAWS} draws at iteration {iteration}"
            )));
        }
    }
    Ok(TrainOutcome { params, curve, redraws })
}
