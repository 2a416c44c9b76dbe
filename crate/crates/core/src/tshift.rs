//! Temporal shift: partition channels into segments, displace segments by
//! one timestep with zero padding and truncation, and recombine with the
//! original features through a learnable penalty factor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Mode;
use crate::tape::{GradTape, Var};
use crate::tensor::{Dims, SpikeTensor};

/// Shift direction assigned to one channel segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Data moves toward earlier timesteps: `Z[t] = X[t+1]` for `t < T-1`.
    Left,
    /// Data moves toward later timesteps: `Z[t] = X[t-1]` for `t > 0`.
    Right,
    /// Segment copied unshifted.
    None,
}

impl Direction {
    fn inverted(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::None => Direction::None,
        }
    }
}

/// How the two interior split points are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    Random,
    Fixed,
}

/// Configuration of one temporal shift module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    /// Channel folding factor: number of channel groups.
    pub c_k: usize,
    pub split_strategy: SplitStrategy,
    /// Directions of the three segments `[0,g1)`, `[g1,g2)`, `[g2,c_k)`.
    pub directions: [Direction; 3],
    pub alpha_init: f32,
    /// Apply the shift at inference as well as in training.
    pub apply_at_inference: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            c_k: 32,
            split_strategy: SplitStrategy::Random,
            directions: [Direction::Left, Direction::Right, Direction::None],
            alpha_init: 0.5,
            apply_at_inference: true,
        }
    }
}

/// Group indices bounding the three segments: `0 < g1 < g2 < c_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitPoints {
    pub g1: usize,
    pub g2: usize,
}

/// One contiguous channel range and its shift direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSegment {
    pub c_lo: usize,
    pub c_hi: usize,
    pub dir: Direction,
}

/// Channel group size. The folding factor clamps to `C` when `C < c_k`;
/// non-divisible channel counts are a configuration error.
pub fn fold_size(channels: usize, c_k: usize) -> Result<Fold> {
    if channels == 0 || c_k == 0 {
        return Err(Error::Config(format!(
            "fold_size requires C >= 1 and c_k >= 1, got C={} c_k={}",
            channels, c_k
        )));
    }
    let effective_c_k = c_k.min(channels);
    if channels % effective_c_k != 0 {
        return Err(Error::Config(format!(
            "channel count {} is not divisible by folding factor {}",
            channels, effective_c_k
        )));
    }
    Ok(Fold { effective_c_k, c_fold: channels / effective_c_k })
}

/// Result of [`fold_size`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fold {
    pub effective_c_k: usize,
    pub c_fold: usize,
}

/// Draw the two interior split points. The random strategy samples two
/// distinct integers uniformly from `{1, .., c_k-1}`; the fixed strategy uses
/// thirds.
pub fn draw_split<R: Rng>(c_k: usize, strategy: SplitStrategy, rng: &mut R) -> Result<SplitPoints> {
    if c_k < 3 {
        return Err(Error::Config(format!(
            "split points need c_k >= 3 (two distinct interior indices with 0 < g1 < g2 < c_k), got {}",
            c_k
        )));
    }
    match strategy {
        SplitStrategy::Fixed => Ok(SplitPoints { g1: c_k / 3, g2: 2 * c_k / 3 }),
        SplitStrategy::Random => {
            let a = rng.gen_range(1..c_k);
            let mut b = rng.gen_range(1..c_k);
            while b == a {
                b = rng.gen_range(1..c_k);
            }
            Ok(SplitPoints { g1: a.min(b), g2: a.max(b) })
        }
    }
}

/// Resolve a split into absolute channel segments with directions assigned
/// per the configured ordering.
pub fn segments(channels: usize, cfg: &ShiftConfig, split: SplitPoints) -> Result<Vec<ShiftSegment>> {
    let fold = fold_size(channels, cfg.c_k)?;
    if !(0 < split.g1 && split.g1 < split.g2 && split.g2 < fold.effective_c_k) {
        return Err(Error::Config(format!(
            "split points must satisfy 0 < g1 < g2 < C_k and g1 != g2, got g1={} g2={} c_k={}",
            split.g1, split.g2, fold.effective_c_k
        )));
    }
    let b1 = split.g1 * fold.c_fold;
    let b2 = split.g2 * fold.c_fold;
    Ok(vec![
        ShiftSegment { c_lo: 0, c_hi: b1, dir: cfg.directions[0] },
        ShiftSegment { c_lo: b1, c_hi: b2, dir: cfg.directions[1] },
        ShiftSegment { c_lo: b2, c_hi: channels, dir: cfg.directions[2] },
    ])
}

/// Invert a segment table: the adjoint of a shift is the opposite shift on
/// the same channel ranges.
pub fn invert_segments(segs: &[ShiftSegment]) -> Vec<ShiftSegment> {
    segs.iter()
        .map(|s| ShiftSegment { c_lo: s.c_lo, c_hi: s.c_hi, dir: s.dir.inverted() })
        .collect()
}

/// Move data per segment table: a zero-initialized output receives each
/// segment advanced, delayed, or copied; vacated edge timesteps stay zero and
/// overflowing values are dropped. Pure permutation with zero fill.
pub fn shift_data(x: &[f32], dims: Dims, segs: &[ShiftSegment]) -> Vec<f32> {
    let mut z = vec![0.0f32; x.len()];
    let plane = dims.h * dims.w;
    for seg in segs {
        for c in seg.c_lo..seg.c_hi {
            for t in 0..dims.t {
                let src_t = match seg.dir {
                    Direction::Left => {
                        if t + 1 >= dims.t {
                            continue;
                        }
                        t + 1
                    }
                    Direction::Right => {
                        if t == 0 {
                            continue;
                        }
                        t - 1
                    }
                    Direction::None => t,
                };
                let d0 = (t * dims.c + c) * plane;
                let s0 = (src_t * dims.c + c) * plane;
                z[d0..d0 + plane].copy_from_slice(&x[s0..s0 + plane]);
            }
        }
    }
    z
}

/// Apply the temporal shift with explicit split points.
pub fn temporal_shift(x: &SpikeTensor, split: SplitPoints, cfg: &ShiftConfig) -> Result<SpikeTensor> {
    let segs = segments(x.dims().c, cfg, split)?;
    SpikeTensor::from_vec(x.dims(), shift_data(x.data(), x.dims(), &segs))
}

/// Residual recombination `Z' = alpha * Z + X` elementwise.
pub fn residual_shift(x: &SpikeTensor, z: &SpikeTensor, alpha: f32) -> Result<SpikeTensor> {
    if x.dims() != z.dims() {
        return Err(Error::Dimension(format!(
            "residual_shift operands differ: {} vs {}",
            x.dims(),
            z.dims()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(z.data())
        .map(|(xv, zv)| alpha * zv + xv)
        .collect();
    SpikeTensor::from_vec(x.dims(), data)
}

/// Full module forward on plain tensors: draw a split, shift, recombine.
/// Identity when inference application is disabled.
pub fn ts_module_forward<R: Rng>(
    x: &SpikeTensor,
    cfg: &ShiftConfig,
    alpha: f32,
    mode: Mode,
    rng: &mut R,
) -> Result<SpikeTensor> {
    if mode == Mode::Infer && !cfg.apply_at_inference {
        return Ok(x.clone());
    }
    let fold = fold_size(x.dims().c, cfg.c_k)?;
    let split = draw_split(fold.effective_c_k, cfg.split_strategy, rng)?;
    let z = temporal_shift(x, split, cfg)?;
    residual_shift(x, &z, alpha)
}

/// Tape-recorded residual recombination with a learnable `alpha`
/// (a `[1,1,1,1]` parameter).
pub fn residual_shift_on_tape(tape: &mut GradTape, x: Var, z: Var, alpha: Var) -> Result<Var> {
    if tape.dims(x) != tape.dims(z) {
        return Err(Error::Dimension(format!(
            "residual_shift operands differ: {} vs {}",
            tape.dims(x),
            tape.dims(z)
        )));
    }
    let scaled = tape.mul_scalar_var(z, alpha)?;
    tape.add(scaled, x)
}

/// Tape-recorded module forward; the split is drawn per call from the
/// provided generator.
pub fn ts_forward_on_tape<R: Rng>(
    tape: &mut GradTape,
    x: Var,
    cfg: &ShiftConfig,
    alpha: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if mode == Mode::Infer && !cfg.apply_at_inference {
        return Ok(x);
    }
    let channels = tape.dims(x).c;
    let fold = fold_size(channels, cfg.c_k)?;
    let split = draw_split(fold.effective_c_k, cfg.split_strategy, rng)?;
    let segs = segments(channels, cfg, split)?;
    let z = tape.temporal_shift(x, segs)?;
    residual_shift_on_tape(tape, x, z, alpha)
}
