//! Dice scoring and cross-validated evaluation.
//!
//! Scans are split into contiguous folds. For each fold the first test scan
//! is the support and every other test scan is a query. In setting 1 one
//! model per fold sees every training image as is. In setting 2 each class
//! group gets its own model per fold, trained on images where that group's
//! organs are repainted as body tissue.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::attention::BranchMode;
use crate::error::{Error, Result};
use crate::model::{segment, ModelConfig, ModelParams};
use crate::phantom::{Scan, N_CLASSES};
use crate::selfsup::EpisodeConfig;
use crate::tensor::Tensor;
use crate::training::{run_training, TrainConfig, TrainOutcome};

/// Held-out class groups for [`Setting::Two`]: kidneys, then spleen + liver.
pub const GROUPS: [[u8; 2]; 2] = [[1, 2], [3, 4]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    One,
    Two,
}

impl Setting {
    pub fn tag(self) -> &'static str {
        match self {
            Setting::One => "setting-1",
            Setting::Two => "setting-2",
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Setting::One),
            2 => Some(Setting::Two),
            _ => None,
        }
    }

    /// Model slots per fold: one in setting 1, one per group in setting 2.
    pub fn groups(self) -> Vec<Option<usize>> {
        match self {
            Setting::One => vec![None],
            Setting::Two => (0..GROUPS.len()).map(Some).collect(),
        }
    }

    pub fn classes(group: Option<usize>) -> Vec<u8> {
        match group {
            None => (1..=N_CLASSES).collect(),
            Some(g) => GROUPS[g].to_vec(),
        }
    }
}

/// `100 · 2|P∩G| / (|P| + |G|)`, with two empty masks scoring 100.
pub fn dice(pred: &Tensor<u8>, gt: &Tensor<u8>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("dice", pred.shape(), gt.shape()));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Contiguous, near-equal partition of `0..n` into `folds` ranges.
pub fn fold_ranges(n: usize, folds: usize) -> Result<Vec<Range<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} scans into {folds} folds")));
    }
    Ok((0..folds).map(|f| f * n / folds..(f + 1) * n / folds).collect())
}

/// Anything that turns a support annotation into a query mask.
pub trait Segmenter {
    fn segment(
        &self,
        fold: usize,
        class: u8,
        support: &Scan,
        support_mask: &Tensor<u8>,
        query: &Scan,
    ) -> Result<Tensor<u8>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Mean Dice over the fold's queries, per class label.
    pub class_dice: Vec<(u8, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub setting: Setting,
    pub folds: Vec<FoldResult>,
    /// Per-class Dice averaged over folds.
    pub per_class: Vec<(u8, f64)>,
    pub mean: f64,
    pub fingerprint: String,
}

pub fn evaluate(
    scans: &[Scan],
    setting: Setting,
    folds: usize,
    segmenter: &impl Segmenter,
    fingerprint: &str,
) -> Result<EvalReport> {
    let ranges = fold_ranges(scans.len(), folds)?;
    let classes: Vec<u8> = setting.groups().into_iter().flat_map(Setting::classes).collect();
    let mut results = Vec::with_capacity(folds);
    for (fold, range) in ranges.into_iter().enumerate() {
        let test = &scans[range];
        let (support, queries) = test
            .split_first()
            .filter(|(_, q)| !q.is_empty())
            .ok_or_else(|| Error::Report(format!("fold {fold} has no query scans")))?;
        let mut class_dice = Vec::with_capacity(classes.len());
        for &class in &classes {
            let mask = support.class_mask(class);
            let mut total = 0.0;
            for q in queries {
                let pred = segmenter.segment(fold, class, support, &mask, q)?;
                total += dice(&pred, &q.class_mask(class))?;
            }
            class_dice.push((class, total / queries.len() as f64));
        }
        results.push(FoldResult { fold, class_dice });
    }
    let per_class: Vec<(u8, f64)> = classes
        .iter()
        .map(|&c| {
            let vals: Vec<f64> = results
                .iter()
                .flat_map(|r| r.class_dice.iter().filter(|(k, _)| *k == c).map(|(_, d)| *d))
                .collect();
            (c, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let mean = per_class.iter().map(|(_, d)| d).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        setting,
        folds: results,
        per_class,
        mean,
        fingerprint: fingerprint.to_string(),
    })
}

/// One trained model of a cross-validation run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub fold: usize,
    pub group: Option<usize>,
    pub outcome: TrainOutcome,
}

impl TrainedModel {
    pub fn name(&self) -> String {
        match self.group {
            None => format!("fold{}", self.fold),
            Some(g) => format!("fold{}_group{g}", self.fold),
        }
    }
}

/// Training images for `fold`/`group`: all scans outside the fold, with the
/// group's organs repainted in setting 2.
pub fn training_images(
    scans: &[Scan],
    test: &Range<usize>,
    group: Option<usize>,
    texture_noise: f64,
    seed: u64,
) -> Vec<Tensor<f32>> {
    (0..scans.len())
        .filter(|i| !test.contains(i))
        .map(|i| match group {
            None => scans[i].image.clone(),
            Some(g) => scans[i].without_classes(&GROUPS[g], texture_noise, seed ^ (i as u64) << 8),
        })
        .collect()
}

/// Trains every model a cross-validated evaluation needs.
///
/// Jobs run on up to `available_parallelism` threads. Each job is seeded
/// independently, so the result does not depend on the thread count.
/// `on_done` sees the models in `(fold, group)` order once all are trained.
#[allow(clippy::too_many_arguments)]
pub fn train_folds(
    scans: &[Scan],
    setting: Setting,
    folds: usize,
    texture_noise: f64,
    model: &ModelConfig,
    train: &TrainConfig,
    episodes: &EpisodeConfig,
    mut on_done: impl FnMut(&TrainedModel),
) -> Result<Vec<TrainedModel>> {
    let ranges = fold_ranges(scans.len(), folds)?;
    let jobs: Vec<(usize, Option<usize>)> = (0..folds)
        .flat_map(|f| setting.groups().into_iter().map(move |g| (f, g)))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainOutcome>>>> = Mutex::new(jobs.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(fold, group)) = jobs.get(i) else {
                    break;
                };
                let images = training_images(scans, &ranges[fold], group, texture_noise, train.seed);
                log::info!(
                    "training fold {fold}{} on {} images",
                    group.map_or(String::new(), |g| format!(" group {g}")),
                    images.len()
                );
                let outcome = run_training(&images, model, train, episodes);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let mut out = Vec::with_capacity(jobs.len());
    for (&(fold, group), r) in jobs.iter().zip(results) {
        let outcome = r.expect("every job ran")?;
        let m = TrainedModel { fold, group, outcome };
        on_done(&m);
        out.push(m);
    }
    Ok(out)
}

/// `(fold, group, params)`.
pub type ModelRef<'a> = (usize, Option<usize>, &'a ModelParams<Tensor<f32>>);

/// Segments with the trained model responsible for `(fold, class)`.
pub struct ModelSegmenter<'a> {
    pub cfg: ModelConfig,
    pub models: Vec<ModelRef<'a>>,
}

impl<'a> ModelSegmenter<'a> {
    pub fn new(cfg: ModelConfig, models: &'a [TrainedModel]) -> Self {
        ModelSegmenter {
            cfg,
            models: models.iter().map(|m| (m.fold, m.group, &m.outcome.params)).collect(),
        }
    }
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(
        &self,
        fold: usize,
        class: u8,
        support: &Scan,
        support_mask: &Tensor<u8>,
        query: &Scan,
    ) -> Result<Tensor<u8>> {
        let params = self
            .models
            .iter()
            .find(|(f, g, _)| *f == fold && g.is_none_or(|g| GROUPS[g].contains(&class)))
            .map(|(_, _, p)| *p)
            .ok_or_else(|| Error::Report(format!("no model for fold {fold}, class {class}")))?;
        segment(params, &self.cfg, &support.image, support_mask, &query.image)
    }
}

/// Block counts swept by [`run_ablation`] by default.
pub const ABLATION_BLOCKS: [usize; 5] = [1, 3, 5, 7, 9];

/// Setting-1 scores of one `(n_blocks, mode)` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub n_blocks: usize,
    pub mode: String,
    pub per_class: Vec<(u8, f64)>,
    pub mean: f64,
}

/// Cross-validated setting-1 evaluation of every `blocks × modes`
/// configuration of `base`, in that nesting order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    scans: &[Scan],
    folds: usize,
    texture_noise: f64,
    base: &ModelConfig,
    train: &TrainConfig,
    episodes: &EpisodeConfig,
    blocks: &[usize],
    modes: &[BranchMode],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(blocks.len() * modes.len());
    for &n_blocks in blocks {
        for &mode in modes {
            let cfg = ModelConfig {
                n_blocks,
                branch_mode: mode,
                ..*base
            };
            log::info!("ablation: n_blocks {n_blocks}, {}", mode.name());
            let models = train_folds(scans, Setting::One, folds, texture_noise, &cfg, train, episodes, |_| {})?;
            let report = evaluate(scans, Setting::One, folds, &ModelSegmenter::new(cfg, &models), "")?;
            let row = AblationRow {
                n_blocks,
                mode: mode.name().to_string(),
                per_class: report.per_class,
                mean: report.mean,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{gen_phantoms, PhantomSpec};

    struct Oracle;
    impl Segmenter for Oracle {
        fn segment(&self, _: usize, class: u8, _: &Scan, _: &Tensor<u8>, q: &Scan) -> Result<Tensor<u8>> {
            Ok(q.class_mask(class))
        }
    }

    struct Empty;
    impl Segmenter for Empty {
        fn segment(&self, _: usize, _: u8, _: &Scan, m: &Tensor<u8>, _: &Scan) -> Result<Tensor<u8>> {
            Ok(m.map(|_| 0))
        }
    }

    fn mask(bits: &[u8]) -> Tensor<u8> {
        Tensor::new(vec![1, bits.len()], bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap(), 100.0);
        assert_eq!(dice(&mask(&[1, 0, 0]), &mask(&[0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 100.0);
        let half = dice(&mask(&[1, 1, 0, 0]), &mask(&[1, 1, 1, 1])).unwrap();
        assert!((half - 200.0 / 3.0).abs() < 1e-12);
        assert!(dice(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn folds_partition_the_scans() {
        for (n, k) in [(20, 5), (23, 5), (5, 5), (7, 2)] {
            let r = fold_ranges(n, k).unwrap();
            let mut seen = vec![0; n];
            for range in &r {
                for i in range.clone() {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
            assert!(r.windows(2).all(|w| w[0].end == w[1].start));
        }
        assert!(fold_ranges(4, 5).is_err());
    }

    #[test]
    fn oracle_and_empty_bounds() {
        let scans = gen_phantoms(&PhantomSpec {
            n_scans: 10,
            ..Default::default()
        })
        .unwrap();
        for setting in [Setting::One, Setting::Two] {
            let r = evaluate(&scans, setting, 5, &Oracle, "x").unwrap();
            assert!(r.per_class.iter().all(|(_, d)| *d == 100.0));
            assert_eq!(r.mean, 100.0);
            let r = evaluate(&scans, setting, 5, &Empty, "x").unwrap();
            assert!(r.folds.iter().all(|f| f.class_dice.iter().all(|(_, d)| *d == 0.0)));
        }
    }

    #[test]
    fn single_scan_folds_are_a_report_error() {
        let scans = gen_phantoms(&PhantomSpec::default()).unwrap();
        assert!(matches!(evaluate(&scans[..5], Setting::One, 5, &Oracle, ""), Err(Error::Report(_))));
    }
}
