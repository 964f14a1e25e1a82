//! Loop-level `f64` re-implementations used as oracles.
//!
//! Nothing here touches the tape. Feature maps are read through
//! `Tensor::at` with explicit index loops so that the code mirrors the
//! definitions term by term.

use crate::attention::{AffinityInput, BranchMode, CraBlockParams, CraStack, COSINE_EPS};
use crate::params::Conv;
use crate::tensor::Tensor;

fn dims(x: &Tensor<f64>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}

/// Pointwise conv with a `[out, in, 1, 1]` kernel.
pub fn conv1x1(x: &Tensor<f64>, p: &Conv<Tensor<f64>>) -> Tensor<f64> {
    let (d, h, w) = dims(x);
    let out_c = p.kernel.shape()[0];
    let mut out = Tensor::zeros(vec![out_c, h, w]).expect("shape");
    for o in 0..out_c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = p.bias.at(&[o]);
                for c in 0..d {
                    acc += p.kernel.at(&[o, c, 0, 0]) * x.at(&[c, y, xx]);
                }
                out.set(&[o, y, xx], acc);
            }
        }
    }
    out
}

/// `M[i][j] = Σ_c a[c, i] b[c, j]` over flattened pixels.
pub fn raw_affinity(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (d, h, w) = dims(a);
    let n = h * w;
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            for c in 0..d {
                *v += a.at(&[c, i / w, i % w]) * b.at(&[c, j / w, j % w]);
            }
        }
    }
    m
}

pub fn affinity(
    xa: &Tensor<f64>,
    xb: &Tensor<f64>,
    phi: &Conv<Tensor<f64>>,
    theta: &Conv<Tensor<f64>>,
) -> Vec<Vec<f64>> {
    raw_affinity(&conv1x1(xa, phi), &conv1x1(xb, theta))
}

/// `(via, istar)`: for each row its best column, then that column's best row.
/// The first maximum wins.
pub fn cycle_map(m: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>) {
    let n = m.len();
    let mut via = Vec::with_capacity(n);
    let mut istar = Vec::with_capacity(n);
    for row in m {
        let mut best = 0;
        for j in 1..n {
            if row[j] > row[best] {
                best = j;
            }
        }
        via.push(best);
        let mut back = 0;
        for (r, other) in m.iter().enumerate().skip(1) {
            if other[best] > m[back][best] {
                back = r;
            }
        }
        istar.push(back);
    }
    (via, istar)
}

fn pixel(x: &Tensor<f64>, i: usize) -> Vec<f64> {
    let (d, _, w) = dims(x);
    (0..d).map(|c| x.at(&[c, i / w, i % w])).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt().max(COSINE_EPS);
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    dot / (norm(a) * norm(b))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|t| (t - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|t| t / s).collect()
}

pub fn resemblance_weights(xa: &Tensor<f64>, istar: &[usize]) -> Vec<f64> {
    let cos: Vec<f64> = istar
        .iter()
        .enumerate()
        .map(|(i, &j)| cosine(&pixel(xa, i), &pixel(xa, j)))
        .collect();
    softmax(&cos)
}

pub fn update_feature(
    xa: &Tensor<f64>,
    xb: &Tensor<f64>,
    p: &CraBlockParams<Tensor<f64>>,
    input: AffinityInput,
) -> Tensor<f64> {
    let m = match input {
        AffinityInput::Embedded => affinity(xa, xb, &p.phi, &p.theta),
        AffinityInput::Raw => raw_affinity(xa, xb),
    };
    let (_, istar) = cycle_map(&m);
    let wts = resemblance_weights(xa, &istar);
    let mut y = conv1x1(xa, &p.g);
    let (d, _, w) = dims(&y);
    for c in 0..d {
        for (i, &wt) in wts.iter().enumerate() {
            let v = y.at(&[c, i / w, i % w]) * wt;
            y.set(&[c, i / w, i % w], v);
        }
    }
    let wy = conv1x1(&y, &p.w_out);
    let mut z = xa.clone();
    for (o, a) in z.data_mut().iter_mut().zip(wy.data()) {
        *o += a;
    }
    z
}

pub fn cra_forward(
    sup: &Tensor<f64>,
    qry: &Tensor<f64>,
    stack: &CraStack<Tensor<f64>>,
) -> (Tensor<f64>, Tensor<f64>) {
    let (mut s, mut q) = (sup.clone(), qry.clone());
    for b in &stack.blocks {
        match stack.mode {
            BranchMode::TwoBranch => {
                s = update_feature(&s, qry, &b.support, stack.affinity);
                q = update_feature(&q, sup, &b.query, stack.affinity);
            }
            BranchMode::SingleBranch => {
                s = update_feature(&s, &q, &b.support, stack.affinity);
                q = update_feature(&q, &s, &b.query, stack.affinity);
            }
        }
    }
    (s, q)
}

/// Per-cell reassembly of a `k×k` neighbourhood centred at
/// `(mσ + ⌊σ/2⌋, nσ + ⌊σ/2⌋)`, zeros outside the map. One row per cell.
pub fn carafe(z: &Tensor<f64>, kernels: &Tensor<f64>, sigma: usize) -> Vec<Vec<f64>> {
    let (d, h, w) = dims(z);
    let ks = kernels.shape();
    let (gh, gw, k) = (ks[0], ks[1], ks[2]);
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(gh * gw);
    for m in 0..gh {
        for n in 0..gw {
            let mut v = vec![0.0; d];
            for i in 0..k {
                for j in 0..k {
                    let y = (m * sigma + sigma / 2) as isize + i as isize - r;
                    let x = (n * sigma + sigma / 2) as isize + j as isize - r;
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    for (c, o) in v.iter_mut().enumerate() {
                        *o += kernels.at(&[m, n, i, j]) * z.at(&[c, y as usize, x as usize]);
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

/// `Σ_{h,w} x(h,w) m(h,w) / Σ m`.
pub fn class_prototype(x: &Tensor<f64>, mask: &Tensor<f64>) -> Vec<f64> {
    let (d, h, w) = dims(x);
    let total: f64 = mask.data().iter().sum();
    (0..d)
        .map(|c| {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(&[c, y, xx]) * mask.at(&[y, xx]);
                }
            }
            acc / total
        })
        .collect()
}

/// `α · max_p cos(p, x(h,w))` for each class's prototype list, `C×H×W`.
pub fn similarity(protos: &[Vec<Vec<f64>>], xq: &Tensor<f64>, alpha: f64) -> Tensor<f64> {
    let (_, h, w) = dims(xq);
    let mut out = Tensor::zeros(vec![protos.len(), h, w]).expect("shape");
    for (c, list) in protos.iter().enumerate() {
        for i in 0..h * w {
            let q = pixel(xq, i);
            let best = list.iter().map(|p| cosine(p, &q)).fold(f64::NEG_INFINITY, f64::max);
            out.set(&[c, i / w, i % w], alpha * best);
        }
    }
    out
}

/// `softmax_c(S ⊙ softmax_c(S))` per pixel.
pub fn predict(s: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = dims(s);
    let mut out = s.clone();
    for y in 0..h {
        for x in 0..w {
            let v: Vec<f64> = (0..c).map(|k| s.at(&[k, y, x])).collect();
            let inner = softmax(&v);
            let prod: Vec<f64> = v.iter().zip(&inner).map(|(a, b)| a * b).collect();
            for (k, p) in softmax(&prod).into_iter().enumerate() {
                out.set(&[k, y, x], p);
            }
        }
    }
    out
}
