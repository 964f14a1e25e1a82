//! Self-check suites behind the `gradcheck` and `oracle-check` commands.
//!
//! Every row reports the worst error over its coordinates or instances and
//! whether it stayed under the row's tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    self, AffinityInput, BlockPair, BranchMode, CraBlockParams, CraStack,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, Coords};
use crate::model::{ModelConfig, ModelParams};
use crate::params::{bind_frozen, Conv};
use crate::phantom::{gen_phantoms, PhantomSpec};
use crate::prototype::{self, PoolConfig};
use crate::reference;
use crate::selfsup::{build_episode, AugmentConfig, EpisodeConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{episode_loss, TrainConfig};

/// Coordinates sampled per gradient check.
pub const GRAD_POINTS: usize = 20;
pub const OP_TOL: f64 = 1e-4;
pub const PIPELINE_TOL: f64 = 1e-3;
pub const ORACLE_INSTANCES: usize = 100;
pub const ORACLE_TOL: f64 = 1e-10;
/// Largest feature grid drawn by the oracle suite, `D×H×W`.
pub const ORACLE_MAX: [usize; 3] = [4, 5, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    pub tol: f64,
    /// Index mismatches; any nonzero count fails the row.
    pub mismatches: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches == 0 && self.max_err < self.tol
    }
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<28} {:>7} {:>12} {:>9}  result\n", "check", "points", "max_err", "tol");
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>7} {:>12.3e} {:>9.0e}  {}\n",
            r.name,
            r.checked,
            r.max_err,
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("shape")
}

/// Values in `±[0.1, 1]`, away from rectifier kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
    .expect("shape")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element contributes.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn grad_row<F>(name: &str, f: F, inputs: &[Tensor<f64>], seed: u64, tol: f64) -> Result<CheckRow>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let coords = Coords::Sample {
        count: GRAD_POINTS.min(total),
        seed,
    };
    let r = gradcheck::check(f, inputs, coords, gradcheck::STEP)?;
    Ok(CheckRow {
        name: name.to_string(),
        checked: r.checked,
        max_err: r.max_rel_err,
        tol,
        mismatches: 0,
    })
}

fn random_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, ksize: usize) -> Conv<Tensor<f64>> {
    Conv {
        kernel: uniform(rng, &[out_c, in_c, ksize, ksize], -0.5, 0.5),
        bias: uniform(rng, &[out_c], -0.2, 0.2),
    }
}

/// A block with every weight random, including the output projection.
fn random_block(rng: &mut ChaCha8Rng, d: usize) -> CraBlockParams<Tensor<f64>> {
    CraBlockParams {
        g: random_conv(rng, d, d, 1),
        phi: random_conv(rng, d, d, 1),
        theta: random_conv(rng, d, d, 1),
        w_out: random_conv(rng, d, d, 1),
    }
}

fn random_stack(rng: &mut ChaCha8Rng, n: usize, d: usize, mode: BranchMode, affinity: AffinityInput) -> CraStack<Tensor<f64>> {
    CraStack {
        blocks: (0..n)
            .map(|_| BlockPair {
                support: random_block(rng, d),
                query: random_block(rng, d),
            })
            .collect(),
        mode,
        affinity,
    }
}

/// Rebuilds a block from four flat `(kernel, bias)` pairs.
fn block_from(v: &[Var]) -> CraBlockParams<Var> {
    let c = |i: usize| Conv {
        kernel: v[2 * i],
        bias: v[2 * i + 1],
    };
    CraBlockParams {
        g: c(0),
        phi: c(1),
        theta: c(2),
        w_out: c(3),
    }
}

fn block_tensors(b: &CraBlockParams<Tensor<f64>>) -> Vec<Tensor<f64>> {
    b.views().into_iter().cloned().collect()
}

/// Per-op checks, the composed attention block and the iteration-0 training
/// objective.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut s = seed.wrapping_mul(1000);
    let mut next = || {
        s += 1;
        s
    };
    let t = OP_TOL;

    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let p = next();
    rows.push(grad_row("matmul", |tp, v| { let o = tp.matmul(v[0], v[1])?; project(tp, o, p) }, &[a.clone(), b], next(), t)?);
    let p = next();
    rows.push(grad_row("transpose", |tp, v| { let o = tp.transpose(v[0])?; project(tp, o, p) }, std::slice::from_ref(&a), next(), t)?);
    let p = next();
    rows.push(grad_row("reshape", |tp, v| { let o = tp.reshape(v[0], &[2, 6])?; project(tp, o, p) }, std::slice::from_ref(&a), next(), t)?);

    let x = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let k = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut rng, &[3], -0.5, 0.5);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let p = next();
        rows.push(grad_row(
            &format!("conv2d s{stride} p{pad}"),
            |tp, v| {
                let o = tp.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(tp, o, p)
            },
            &[x.clone(), k.clone(), bias.clone()],
            next(),
            t,
        )?);
    }

    let z = off_zero(&mut rng, &[3, 4]);
    let p = next();
    rows.push(grad_row("relu", |tp, v| { let o = tp.relu(v[0]); project(tp, o, p) }, &[z], next(), t)?);
    let b2 = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    for name in ["add", "sub", "mul"] {
        let p = next();
        rows.push(grad_row(
            name,
            |tp, v| {
                let o = match name {
                    "add" => tp.add(v[0], v[1])?,
                    "sub" => tp.sub(v[0], v[1])?,
                    _ => tp.mul(v[0], v[1])?,
                };
                project(tp, o, p)
            },
            &[a.clone(), b2.clone()],
            next(),
            t,
        )?);
    }
    let wv = uniform(&mut rng, &[4], -1.0, 1.0);
    let p = next();
    rows.push(grad_row("mul_trailing", |tp, v| { let o = tp.mul_trailing(v[0], v[1])?; project(tp, o, p) }, &[a.clone(), wv], next(), t)?);
    let p = next();
    rows.push(grad_row("scale", |tp, v| { let o = tp.scale(v[0], -1.7); project(tp, o, p) }, std::slice::from_ref(&a), next(), t)?);
    let p = next();
    rows.push(grad_row("add_scalar", |tp, v| { let o = tp.add_scalar(v[0], 0.3); project(tp, o, p) }, std::slice::from_ref(&a), next(), t)?);
    let pos = uniform(&mut rng, &[3, 4], 0.2, 2.0);
    let p = next();
    rows.push(grad_row("log", |tp, v| { let o = tp.log(v[0]); project(tp, o, p) }, &[pos], next(), t)?);
    rows.push(grad_row("sum", |tp, v| { let o = tp.sum(v[0]); tp.mul(o, o) }, std::slice::from_ref(&a), next(), t)?);

    let c3 = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        let p = next();
        rows.push(grad_row(&format!("sum_axis {axis}"), |tp, v| { let o = tp.sum_axis(v[0], axis)?; project(tp, o, p) }, std::slice::from_ref(&c3), next(), t)?);
        let p = next();
        rows.push(grad_row(&format!("max_axis {axis}"), |tp, v| { let o = tp.max_axis(v[0], axis)?; project(tp, o, p) }, std::slice::from_ref(&c3), next(), t)?);
        let p = next();
        rows.push(grad_row(&format!("softmax {axis}"), |tp, v| { let o = tp.softmax(v[0], axis)?; project(tp, o, p) }, std::slice::from_ref(&c3), next(), t)?);
    }
    let p = next();
    rows.push(grad_row("normalize_rows", |tp, v| { let o = tp.normalize_rows(v[0], 1e-8)?; project(tp, o, p) }, std::slice::from_ref(&a), next(), t)?);
    let p = next();
    rows.push(grad_row("gather_rows", |tp, v| { let o = tp.gather_rows(v[0], &[2, 0, 2, 1])?; project(tp, o, p) }, std::slice::from_ref(&a), next(), t)?);
    let a2 = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let p = next();
    rows.push(grad_row("concat", |tp, v| { let o = tp.concat(&[v[0], v[1]])?; project(tp, o, p) }, &[a.clone(), a2], next(), t)?);
    let img = uniform(&mut rng, &[2, 4, 6], -1.0, 1.0);
    let p = next();
    rows.push(grad_row("avg_pool", |tp, v| { let o = tp.avg_pool(v[0], 2)?; project(tp, o, p) }, std::slice::from_ref(&img), next(), t)?);
    let p = next();
    rows.push(grad_row("upsample_bilinear", |tp, v| { let o = tp.upsample_bilinear(v[0], 9, 11)?; project(tp, o, p) }, std::slice::from_ref(&img), next(), t)?);
    let zmap = uniform(&mut rng, &[2, 8, 8], -1.0, 1.0);
    let kern = uniform(&mut rng, &[2, 2, 5, 5], 0.0, 1.0);
    let p = next();
    rows.push(grad_row("reassemble", |tp, v| { let o = tp.reassemble(v[0], v[1], 4)?; project(tp, o, p) }, &[zmap.clone(), kern], next(), t)?);

    // Attention pieces. Cycle indices are piecewise constant, so the checks
    // differentiate through the weights and the residual path.
    let d = 3;
    let xa = uniform(&mut rng, &[d, 3, 4], -1.0, 1.0);
    let xb = uniform(&mut rng, &[d, 3, 4], -1.0, 1.0);
    let p = next();
    rows.push(grad_row(
        "resemblance_weights",
        |tp, v| {
            let m = attention::raw_affinity(tp, v[0], v[1])?;
            let cycle = attention::cycle_map(tp.value(m))?;
            let w = attention::resemblance_weights(tp, v[0], &cycle)?;
            project(tp, w.w, p)
        },
        &[xa.clone(), xb.clone()],
        next(),
        t,
    )?);
    for input in [AffinityInput::Embedded, AffinityInput::Raw] {
        let block = random_block(&mut rng, d);
        let mut inputs = vec![xa.clone(), xb.clone()];
        inputs.extend(block_tensors(&block));
        let p = next();
        rows.push(grad_row(
            &format!("cra block {}", input.name()),
            |tp, v| {
                let params = block_from(&v[2..]);
                let o = attention::update_feature(tp, v[0], v[1], &params, input)?;
                project(tp, o, p)
            },
            &inputs,
            next(),
            t,
        )?);
    }
    for mode in [BranchMode::TwoBranch, BranchMode::SingleBranch] {
        let stack = random_stack(&mut rng, 2, d, mode, AffinityInput::Embedded);
        let p = next();
        rows.push(grad_row(
            &format!("cra stack {}", mode.name()),
            |tp, v| {
                let sv = stack.map(&mut bind_frozen(tp));
                let (s, q) = attention::cra_forward(tp, v[0], v[1], &sv)?;
                let both = tp.concat(&[s, q])?;
                project(tp, both, p)
            },
            &[xa.clone(), xb.clone()],
            next(),
            t,
        )?);
    }

    // Prototype classifier on a 2×8×8 map with 2×2 pooling.
    let cfg = PoolConfig {
        sigma: 4,
        k_re: 3,
        tau: 0.95,
    };
    let pred = random_conv(&mut rng, cfg.k_re * cfg.k_re, 2, 1);
    let mut inputs = vec![zmap.clone()];
    inputs.extend(pred.views().into_iter().cloned());
    let p = next();
    rows.push(grad_row(
        "predict_kernels+carafe",
        |tp, v| {
            let conv = Conv { kernel: v[1], bias: v[2] };
            let kern = prototype::predict_kernels(tp, v[0], &conv, &cfg)?;
            let o = prototype::carafe_pool(tp, v[0], kern, &cfg)?;
            project(tp, o, p)
        },
        &inputs,
        next(),
        t,
    )?);
    let mask = Tensor::from_fn(vec![8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 })?;
    let xq = uniform(&mut rng, &[2, 8, 8], -1.0, 1.0);
    inputs.push(xq);
    let p = next();
    rows.push(grad_row(
        "prototypes+similarity+predict",
        |tp, v| {
            let conv = Conv { kernel: v[1], bias: v[2] };
            let set = prototype::assemble_prototypes(tp, v[0], &mask, &cfg, &conv)?;
            let sim = prototype::similarity_map(tp, &set, v[3], prototype::DEFAULT_ALPHA)?;
            let o = prototype::predict(tp, sim)?;
            project(tp, o, p)
        },
        &inputs,
        next(),
        t,
    )?);

    rows.push(pipeline_row(seed)?);
    Ok(rows)
}

/// Model and 16×16 episode used by the iteration-0 pipeline check.
pub fn pipeline_fixture(seed: u64) -> Result<(ModelConfig, TrainConfig, ModelParams<Tensor<f64>>, crate::selfsup::Episode)> {
    let model = ModelConfig {
        depth: 8,
        n_blocks: 2,
        pool: PoolConfig {
            sigma: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let train = TrainConfig::default();
    let scan = gen_phantoms(&PhantomSpec::default())?.remove(0);
    let small = Tensor::from_fn(vec![16, 16], |i| scan.image.at(&[(i / 16) * 4, (i % 16) * 4]))?;
    let ep_cfg = EpisodeConfig {
        min_size: 4,
        min_area: 8,
        augment: AugmentConfig::default(),
        ..Default::default()
    };
    let params = ModelParams::<Tensor<f64>>::init(&model, seed);
    for attempt in 0..64 {
        let Ok(ep) = build_episode(&small, 0, seed.wrapping_add(attempt), &ep_cfg) else {
            continue;
        };
        let mut tape = Tape::<f64>::new();
        let bound = params.map(&mut bind_frozen(&mut tape));
        if episode_loss(&mut tape, &bound, &model, &train, &ep).is_ok() {
            return Ok((model, train, params, ep));
        }
    }
    Err(Error::Contract("no usable 16×16 episode for the pipeline check".into()))
}

fn pipeline_row(seed: u64) -> Result<CheckRow> {
    let (model, train, params, ep) = pipeline_fixture(seed)?;
    let flat: Vec<Tensor<f64>> = params.views().into_iter().cloned().collect();
    let f = |tp: &mut Tape<f64>, v: &[Var]| {
        let mut it = v.iter();
        let bound = params.map(&mut |_| *it.next().expect("one var per tensor"));
        Ok(episode_loss(tp, &bound, &model, &train, &ep)?.total)
    };
    let r = gradcheck::check(f, &flat, Coords::Sample { count: GRAD_POINTS, seed }, gradcheck::STEP)?;
    Ok(CheckRow {
        name: "pipeline iteration 0".into(),
        checked: r.checked,
        max_err: r.max_rel_err,
        tol: PIPELINE_TOL,
        mismatches: 0,
    })
}

#[derive(Default)]
struct Acc {
    checked: usize,
    max_err: f64,
    mismatches: usize,
}

impl Acc {
    fn values(&mut self, got: &[f64], want: &[f64]) {
        self.checked += 1;
        if got.len() != want.len() {
            self.mismatches += 1;
            return;
        }
        for (a, b) in got.iter().zip(want) {
            let e = (a - b).abs();
            self.max_err = if e.is_nan() { f64::INFINITY } else { self.max_err.max(e) };
        }
    }

    fn indices(&mut self, got: &[usize], want: &[usize]) {
        self.checked += 1;
        self.mismatches += usize::from(got != want);
    }

    fn row(&self, name: &str) -> CheckRow {
        CheckRow {
            name: name.to_string(),
            checked: self.checked,
            max_err: self.max_err,
            tol: ORACLE_TOL,
            mismatches: self.mismatches,
        }
    }
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Tape implementations against [`crate::reference`] on random instances.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "affinity",
        "cycle_map",
        "resemblance_weights",
        "update_feature",
        "cra_forward 5 blocks",
        "carafe",
        "class_prototype",
        "similarity+predict",
    ];
    let mut acc: Vec<Acc> = names.iter().map(|_| Acc::default()).collect();
    for n in 0..instances {
        let d = rng.random_range(1..=ORACLE_MAX[0]);
        let h = rng.random_range(1..=ORACLE_MAX[1]);
        let w = rng.random_range(1..=ORACLE_MAX[2]);
        let xa = uniform(&mut rng, &[d, h, w], -1.0, 1.0);
        let xb = uniform(&mut rng, &[d, h, w], -1.0, 1.0);
        let input = if n % 2 == 0 { AffinityInput::Embedded } else { AffinityInput::Raw };
        let mode = if n % 4 < 2 { BranchMode::TwoBranch } else { BranchMode::SingleBranch };
        let block = random_block(&mut rng, d);
        let stack = random_stack(&mut rng, 5, d, mode, input);

        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.constant(xa.clone()), tape.constant(xb.clone()));
        let bv = block.map(&mut bind_frozen(&mut tape));
        let m = attention::affinity(&mut tape, va, vb, &bv.phi, &bv.theta)?;
        let m_ref = reference::affinity(&xa, &xb, &block.phi, &block.theta);
        acc[0].values(tape.value(m).data(), &flatten(&m_ref));

        let cycle = attention::cycle_map(tape.value(m))?;
        let (via, istar) = reference::cycle_map(&m_ref);
        acc[1].indices(&cycle.via, &via);
        acc[1].indices(&cycle.istar, &istar);

        let wts = attention::resemblance_weights(&mut tape, va, &cycle)?;
        acc[2].values(tape.value(wts.w).data(), &reference::resemblance_weights(&xa, &istar));

        let z = attention::update_feature(&mut tape, va, vb, &bv, input)?;
        acc[3].values(tape.value(z).data(), reference::update_feature(&xa, &xb, &block, input).data());

        let sv = stack.map(&mut bind_frozen(&mut tape));
        let (s, q) = attention::cra_forward(&mut tape, va, vb, &sv)?;
        let (s_ref, q_ref) = reference::cra_forward(&xa, &xb, &stack);
        acc[4].values(tape.value(s).data(), s_ref.data());
        acc[4].values(tape.value(q).data(), q_ref.data());

        // Prototype pieces on a grid divisible by the pooling factor.
        let sigma = rng.random_range(1..=2);
        let k = [1, 3, 5][n % 3];
        let (gh, gw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let zmap = uniform(&mut rng, &[d, gh * sigma, gw * sigma], -1.0, 1.0);
        let kern = uniform(&mut rng, &[gh, gw, k, k], 0.0, 1.0);
        let (vz, vk) = (tape.constant(zmap.clone()), tape.constant(kern.clone()));
        let cfg = PoolConfig { sigma, k_re: k, tau: 0.95 };
        let got = prototype::carafe_pool(&mut tape, vz, vk, &cfg)?;
        let locals = reference::carafe(&zmap, &kern, sigma);
        acc[5].values(tape.value(got).data(), &flatten(&locals));

        let mut mask = Tensor::from_fn(vec![gh * sigma, gw * sigma], |_| f64::from(u8::from(rng.random_bool(0.5))))?;
        mask.data_mut()[0] = 1.0;
        let proto = prototype::class_prototype(&mut tape, vz, &mask, 1)?;
        let proto_ref = reference::class_prototype(&zmap, &mask);
        acc[6].values(tape.value(proto).data(), &proto_ref);

        // Two classes: the masked mean alone, and the masked mean plus locals.
        let fg_rows = tape.reshape(proto, &[1, d])?;
        let fg = tape.concat(&[fg_rows, got])?;
        let set = prototype::PrototypeSet {
            classes: vec![
                prototype::ClassPrototypes {
                    vectors: fg_rows,
                    provenance: vec![prototype::Provenance::ClassMasked],
                },
                prototype::ClassPrototypes {
                    vectors: fg,
                    provenance: vec![prototype::Provenance::ClassMasked; 1 + locals.len()],
                },
            ],
        };
        let xq = uniform(&mut rng, &[d, h, w], -1.0, 1.0);
        let vq = tape.constant(xq.clone());
        let sim = prototype::similarity_map(&mut tape, &set, vq, prototype::DEFAULT_ALPHA)?;
        let prob = prototype::predict(&mut tape, sim)?;
        let mut lists = vec![vec![proto_ref.clone()], vec![proto_ref]];
        lists[1].extend(locals);
        let sim_ref = reference::similarity(&lists, &xq, prototype::DEFAULT_ALPHA);
        acc[7].values(tape.value(sim).data(), sim_ref.data());
        acc[7].values(tape.value(prob).data(), reference::predict(&sim_ref).data());
    }
    Ok(names.iter().zip(&acc).map(|(n, a)| a.row(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failing_rows_render_as_fail() {
        let rows = vec![
            CheckRow { name: "a".into(), checked: 3, max_err: 1e-12, tol: 1e-10, mismatches: 0 },
            CheckRow { name: "b".into(), checked: 3, max_err: 0.0, tol: 1e-10, mismatches: 1 },
            CheckRow { name: "c".into(), checked: 0, max_err: 0.0, tol: 1e-10, mismatches: 0 },
        ];
        let t = render_table(&rows);
        let results: Vec<bool> = t.lines().skip(1).map(|l| l.ends_with("PASS")).collect();
        assert_eq!(results, vec![true, false, false]);
    }

    #[test]
    fn small_oracle_run_passes() {
        let rows = oracle_suite(8, 11).unwrap();
        assert!(rows.iter().all(CheckRow::passed), "{}", render_table(&rows));
    }
}
