//! Cycle-resemblance attention.
//!
//! One block updates a feature map `A` against a reference map `B`:
//!
//! 1. affinity `M = φ(A)ᵀ θ(B)`, an `(HW)×(HW)` matrix (rows: pixels of `A`);
//! 2. cycle map: for each pixel `i` of `A`, its best match `j = via[i]` in
//!    `B` (row argmax), then `j`'s best match `i* = istar[i]` back in `A`
//!    (column argmax);
//! 3. resemblance weights `w = softmax_i cos(A(i), A(i*))` over all pixels;
//! 4. residual update `z = A + W_out(g(A) ⊙ w)`, `w` broadcast over channels.
//!
//! The argmax steps carry no gradient, so `φ` and `θ` only influence the
//! output through the indices they select.
//!
//! A stack applies blocks alternately to the support and query branches. In
//! two-branch mode each branch is matched against a detached copy of the
//! other branch's *initial* features; in single-branch mode it is matched
//! against the other branch's live features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::Conv;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Clamp on feature norms inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

pub const DEFAULT_BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Support,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    TwoBranch,
    SingleBranch,
}

impl BranchMode {
    pub fn name(self) -> &'static str {
        match self {
            BranchMode::TwoBranch => "two-branch",
            BranchMode::SingleBranch => "single-branch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two-branch" => Some(BranchMode::TwoBranch),
            "single-branch" => Some(BranchMode::SingleBranch),
            _ => None,
        }
    }
}

/// What the affinity matrix is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AffinityInput {
    /// `φ(A)ᵀ θ(B)`
    #[default]
    Embedded,
    /// `Aᵀ B`, ignoring `φ` and `θ`.
    Raw,
}

impl AffinityInput {
    pub fn name(self) -> &'static str {
        match self {
            AffinityInput::Embedded => "embedded",
            AffinityInput::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embedded" => Some(AffinityInput::Embedded),
            "raw" => Some(AffinityInput::Raw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffinityMatrix {
    /// `(HW)×(HW)`; entry `(i, j)` pairs row-source pixel `i` with
    /// column-source pixel `j`.
    pub values: Var,
    pub rows: Branch,
    pub cols: Branch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleMap {
    /// Best column for each row.
    pub via: Vec<usize>,
    /// Best row for column `via[i]`.
    pub istar: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ResemblanceWeights {
    /// Length `HW`, sums to one.
    pub w: Var,
}

/// The four 1×1 convolutions of one block. `w_out` starts at zero, so a fresh
/// block is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct CraBlockParams<P> {
    pub g: Conv<P>,
    pub phi: Conv<P>,
    pub theta: Conv<P>,
    pub w_out: Conv<P>,
}

impl<P> CraBlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> CraBlockParams<Q> {
        CraBlockParams {
            g: self.g.map(f),
            phi: self.phi.map(f),
            theta: self.theta.map(f),
            w_out: self.w_out.map(f),
        }
    }

    pub fn views(&self) -> Vec<&P> {
        [&self.g, &self.phi, &self.theta, &self.w_out]
            .into_iter()
            .flat_map(Conv::views)
            .collect()
    }

    pub fn views_mut(&mut self) -> Vec<&mut P> {
        [&mut self.g, &mut self.phi, &mut self.theta, &mut self.w_out]
            .into_iter()
            .flat_map(Conv::views_mut)
            .collect()
    }
}

impl<T: Real> CraBlockParams<Tensor<T>> {
    pub fn init(rng: &mut impl Rng, depth: usize) -> Self {
        CraBlockParams {
            g: Conv::fan_in_uniform(rng, depth, depth, 1),
            phi: Conv::fan_in_uniform(rng, depth, depth, 1),
            theta: Conv::fan_in_uniform(rng, depth, depth, 1),
            w_out: Conv::zeros(depth, depth, 1),
        }
    }
}

/// Per-block parameters for the support and query branches.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPair<P> {
    pub support: CraBlockParams<P>,
    pub query: CraBlockParams<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraStack<P> {
    pub blocks: Vec<BlockPair<P>>,
    pub mode: BranchMode,
    pub affinity: AffinityInput,
}

impl<P> CraStack<P> {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> CraStack<Q> {
        CraStack {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockPair {
                    support: b.support.map(f),
                    query: b.query.map(f),
                })
                .collect(),
            mode: self.mode,
            affinity: self.affinity,
        }
    }

    pub fn views(&self) -> Vec<&P> {
        self.blocks
            .iter()
            .flat_map(|b| b.support.views().into_iter().chain(b.query.views()))
            .collect()
    }

    pub fn views_mut(&mut self) -> Vec<&mut P> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let BlockPair { support, query } = b;
                support.views_mut().into_iter().chain(query.views_mut())
            })
            .collect()
    }
}

impl<T: Real> CraStack<Tensor<T>> {
    pub fn init(rng: &mut impl Rng, n_blocks: usize, depth: usize, mode: BranchMode) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| BlockPair {
                support: CraBlockParams::init(rng, depth),
                query: CraBlockParams::init(rng, depth),
            })
            .collect();
        CraStack {
            blocks,
            mode,
            affinity: AffinityInput::default(),
        }
    }
}

fn check_same_shape<T: Real>(op: &'static str, tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 3 || sa != sb {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(())
}

fn conv1x1<T: Real>(tape: &mut Tape<T>, x: Var, p: &Conv<Var>) -> Result<Var> {
    tape.conv2d(x, p.kernel, Some(p.bias), 1, 0)
}

/// `D×H×W` feature map as `D×(HW)`.
fn channel_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    tape.reshape(x, &[s[0], s[1] * s[2]])
}

/// `D×H×W` feature map as `(HW)×D`, one row per pixel.
pub fn pixel_rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let rows = channel_rows(tape, x)?;
    tape.transpose(rows)
}

/// Pixel-to-pixel affinity between `xa` (rows) and `xb` (columns) after the
/// `φ` / `θ` embeddings.
pub fn affinity<T: Real>(
    tape: &mut Tape<T>,
    xa: Var,
    xb: Var,
    phi: &Conv<Var>,
    theta: &Conv<Var>,
) -> Result<Var> {
    check_same_shape("affinity", tape, xa, xb)?;
    let ea = conv1x1(tape, xa, phi)?;
    let eb = conv1x1(tape, xb, theta)?;
    raw_affinity(tape, ea, eb)
}

/// Affinity of the features themselves, `Aᵀ B`.
pub fn raw_affinity<T: Real>(tape: &mut Tape<T>, xa: Var, xb: Var) -> Result<Var> {
    check_same_shape("affinity", tape, xa, xb)?;
    let ra = pixel_rows(tape, xa)?;
    let cb = channel_rows(tape, xb)?;
    tape.matmul(ra, cb)
}

/// Row argmax, then column argmax at the selected column. Ties resolve to
/// the lowest index.
pub fn cycle_map<T: Real>(affinity: &Tensor<T>) -> Result<CycleMap> {
    let s = affinity.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("cycle_map", format!("expected a square matrix, got {s:?}")));
    }
    let via = affinity.argmax(1)?.into_data();
    let col_best = affinity.argmax(0)?.into_data();
    let istar = via.iter().map(|&j| col_best[j]).collect();
    Ok(CycleMap { via, istar })
}

/// Softmax over pixels of `cos(xa(i), xa(istar[i]))`. Gradient flows into
/// both members of each pair; the indices are constants.
pub fn resemblance_weights<T: Real>(tape: &mut Tape<T>, xa: Var, cycle: &CycleMap) -> Result<ResemblanceWeights> {
    let rows = pixel_rows(tape, xa)?;
    let unit = tape.normalize_rows(rows, T::lit(COSINE_EPS))?;
    let partners = tape.gather_rows(unit, &cycle.istar)?;
    let prod = tape.mul(unit, partners)?;
    let cos = tape.sum_axis(prod, 1)?;
    let w = tape.softmax(cos, 0)?;
    Ok(ResemblanceWeights { w })
}

/// One cycle-resemblance block applied to `xa` with reference `xb_ref`.
pub fn update_feature<T: Real>(
    tape: &mut Tape<T>,
    xa: Var,
    xb_ref: Var,
    params: &CraBlockParams<Var>,
    input: AffinityInput,
) -> Result<Var> {
    check_same_shape("update_feature", tape, xa, xb_ref)?;
    let m = match input {
        AffinityInput::Embedded => affinity(tape, xa, xb_ref, &params.phi, &params.theta)?,
        AffinityInput::Raw => raw_affinity(tape, xa, xb_ref)?,
    };
    let cycle = cycle_map(tape.value(m))?;
    let weights = resemblance_weights(tape, xa, &cycle)?;
    let shape = tape.shape(xa).to_vec();
    let g = conv1x1(tape, xa, &params.g)?;
    let g = channel_rows(tape, g)?;
    let y = tape.mul_trailing(g, weights.w)?;
    let y = tape.reshape(y, &shape)?;
    let wy = conv1x1(tape, y, &params.w_out)?;
    tape.add(xa, wy)
}

/// Runs the stacked blocks over both branches.
pub fn cra_forward<T: Real>(tape: &mut Tape<T>, sup: Var, qry: Var, stack: &CraStack<Var>) -> Result<(Var, Var)> {
    if stack.blocks.is_empty() {
        return Err(Error::Config("attention stack needs at least one block".into()));
    }
    check_same_shape("cra_forward", tape, sup, qry)?;
    let (mut s, mut q) = (sup, qry);
    match stack.mode {
        BranchMode::TwoBranch => {
            let init_s = tape.detach(sup);
            let init_q = tape.detach(qry);
            for b in &stack.blocks {
                s = update_feature(tape, s, init_q, &b.support, stack.affinity)?;
                q = update_feature(tape, q, init_s, &b.query, stack.affinity)?;
            }
        }
        BranchMode::SingleBranch => {
            for b in &stack.blocks {
                s = update_feature(tape, s, q, &b.support, stack.affinity)?;
                q = update_feature(tape, q, s, &b.query, stack.affinity)?;
            }
        }
    }
    Ok((s, q))
}
