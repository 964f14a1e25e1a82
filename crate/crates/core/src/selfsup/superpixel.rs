//! Graph-based superpixels.
//!
//! Pixels are nodes, 4-neighbour pairs are edges weighted by the absolute
//! intensity difference. Edges are visited in
//! ascending weight; two components merge when the edge weight does not
//! exceed either component's internal difference plus `k / |C|`. A second
//! pass merges components smaller than `min_size` into a neighbour.
//!
//! Segments are produced by unions along grid edges, so each is 4-connected.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    /// `H×W`, values in `0..n_segments`, numbered in raster order of first
    /// appearance.
    pub labels: Tensor<usize>,
    pub n_segments: usize,
}

impl SuperpixelMap {
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.n_segments];
        for &l in self.labels.data() {
            a[l] += 1;
        }
        a
    }

    /// Segments with at least one pixel on the image border.
    pub fn touches_border(&self) -> Vec<bool> {
        let s = self.labels.shape();
        let (h, w) = (s[0], s[1]);
        let mut t = vec![false; self.n_segments];
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    t[self.labels.data()[y * w + x]] = true;
                }
            }
        }
        t
    }
}

pub(crate) struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(weight);
    }
}

/// Separable Gaussian blur with edge replication; `sigma <= 0` copies.
pub(crate) fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, i) in taps.iter().zip(-radius..=radius) {
                acc += t * src[y * w + clamp(x as isize + i, w)];
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, i) in taps.iter().zip(-radius..=radius) {
                acc += t * tmp[clamp(y as isize + i, h) * w + x];
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Segments a `H×W` image with values in `[0, 1]`.
///
/// `seed` orders edges of equal weight, so results are reproducible.
pub fn superpixels(image: &Tensor<f32>, k_scale: f64, min_size: usize, seed: u64) -> Result<SuperpixelMap> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::dim("superpixels", format!("expected H×W, got {s:?}")));
    }
    if !(k_scale >= 0.0) {
        return Err(Error::Config(format!("superpixel scale must be non-negative, got {k_scale}")));
    }
    let (h, w) = (s[0], s[1]);
    let px: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();

    let mut edges = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push(((px[p] - px[p + 1]).abs(), p, p + 1));
            }
            if y + 1 < h {
                edges.push(((px[p] - px[p + w]).abs(), p, p + w));
            }
        }
    }
    edges.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut ds = DisjointSet::new(h * w);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra] + k_scale / ds.size[ra] as f64;
        let tb = ds.internal[rb] + k_scale / ds.size[rb] as f64;
        if wt <= ta.min(tb) {
            ds.union(ra, rb, wt);
        }
    }
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            ds.union(ra, rb, wt);
        }
    }

    let mut ids = vec![usize::MAX; h * w];
    let mut next = 0;
    let mut labels = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let r = ds.find(p);
        if ids[r] == usize::MAX {
            ids[r] = next;
            next += 1;
        }
        labels.push(ids[r]);
    }
    Ok(SuperpixelMap {
        labels: Tensor::new(vec![h, w], labels)?,
        n_segments: next,
    })
}
