//! Recorded-operation reverse-mode differentiation.
//!
//! Operations are recorded onto a [`GradTape`] during the forward pass and
//! replayed in exact reverse order by [`GradTape::backward`]. Gradients flow
//! through both the layer-to-layer path and the timestep-to-timestep path of
//! an unrolled spiking network, because both paths are ordinary edges of the
//! recorded graph.

use crate::error::{Error, Result};
use crate::tensor::{Dims, SpikeTensor};
use crate::tshift::{invert_segments, shift_data, ShiftSegment};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Slot {
    dims: Dims,
    data: Vec<f32>,
    requires_grad: bool,
}

/// Region copy descriptor for [`GradTape::slice_assign`]. Spatial dims are
/// always copied whole; only the time and channel axes are windowed.
#[derive(Clone, Copy, Debug)]
pub struct SliceSpan {
    pub dst_t: usize,
    pub src_t: usize,
    pub len_t: usize,
    pub dst_c: usize,
    pub src_c: usize,
    pub len_c: usize,
}

enum Op {
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { a: Var, k: f32, out: Var },
    AddScalar { a: Var, out: Var },
    MulScalarVar { a: Var, s: Var, out: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, out: Var },
    Linear { x: Var, w: Var, bias: Option<Var>, out: Var },
    SliceAssign { dst: Var, src: Var, span: SliceSpan, out: Var },
    StackT { parts: Vec<Var>, out: Var },
    TemporalShift { x: Var, segments: Vec<ShiftSegment>, out: Var },
    Fire { v: Var, v_th: f32, width: f32, out: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32>, out: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var, out: Var },
    AvgPool { x: Var, kernel: usize, stride: usize, out: Var },
    Flatten { x: Var, out: Var },
    MeanT { x: Var, out: Var },
    SumAll { x: Var, out: Var },
    CrossEntropy { scores: Var, label: usize, out: Var },
}

/// Per-channel statistics captured by a training-mode batch norm record.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Ordered record of primitive operations with input/output handles.
///
/// A tape is confined to one forward/backward pass; concurrent forwards each
/// take their own tape.
pub struct GradTape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    grad_enabled: bool,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { slots: Vec::new(), ops: Vec::new(), grad_enabled: true }
    }

    /// Tape that records values but no operations; `backward` on it yields
    /// nothing. Used for inference-only forwards.
    pub fn no_grad() -> Self {
        GradTape { slots: Vec::new(), ops: Vec::new(), grad_enabled: false }
    }

    fn push(&mut self, dims: Dims, data: Vec<f32>, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), dims.numel());
        let id = self.slots.len();
        self.slots.push(Slot { dims, data, requires_grad: requires_grad && self.grad_enabled });
        Var(id)
    }

    /// Insert a tensor as a leaf; gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, t: &SpikeTensor) -> Var {
        self.push(t.dims(), t.data().to_vec(), t.requires_grad())
    }

    /// Insert a tensor as a trainable parameter (always gradient-tracked).
    pub fn param(&mut self, t: &SpikeTensor) -> Var {
        self.push(t.dims(), t.data().to_vec(), true)
    }

    /// Insert a tensor as a non-differentiable constant.
    pub fn constant(&mut self, t: &SpikeTensor) -> Var {
        self.push(t.dims(), t.data().to_vec(), false)
    }

    pub fn zeros(&mut self, dims: Dims) -> Var {
        self.push(dims, vec![0.0; dims.numel()], false)
    }

    pub fn constant_filled(&mut self, dims: Dims, value: f32) -> Var {
        self.push(dims, vec![value; dims.numel()], false)
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.slots[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.slots[v.0].data
    }

    pub fn value_tensor(&self, v: Var) -> SpikeTensor {
        SpikeTensor::from_vec(self.slots[v.0].dims, self.slots[v.0].data.clone())
            .expect("slot data length always matches dims")
    }

    fn requires(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.slots[v.0].requires_grad)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "{}: {} vs {}",
                what,
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add operands")?;
        let data = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(&[a, b]);
        let out = self.push(self.dims(a), data, req);
        if req {
            self.ops.push(Op::Add { a, b, out });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul operands")?;
        let data = self.slots[a.0]
            .data
            .iter()
            .zip(&self.slots[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(&[a, b]);
        let out = self.push(self.dims(a), data, req);
        if req {
            self.ops.push(Op::Mul { a, b, out });
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let data = self.slots[a.0].data.iter().map(|x| x * k).collect();
        let req = self.requires(&[a]);
        let out = self.push(self.dims(a), data, req);
        if req {
            self.ops.push(Op::Scale { a, k, out });
        }
        out
    }

    pub fn add_scalar(&mut self, a: Var, k: f32) -> Var {
        let data = self.slots[a.0].data.iter().map(|x| x + k).collect();
        let req = self.requires(&[a]);
        let out = self.push(self.dims(a), data, req);
        if req {
            self.ops.push(Op::AddScalar { a, out });
        }
        out
    }

    /// Multiply tensor `a` by the single-element tensor `s`. The one
    /// permitted scalar-tensor broadcast.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s).numel() != 1 {
            return Err(Error::Dimension(format!(
                "scalar operand must have one element, got {}",
                self.dims(s)
            )));
        }
        let sv = self.slots[s.0].data[0];
        let data = self.slots[a.0].data.iter().map(|x| x * sv).collect();
        let req = self.requires(&[a, s]);
        let out = self.push(self.dims(a), data, req);
        if req {
            self.ops.push(Op::MulScalarVar { a, s, out });
        }
        Ok(out)
    }

    // ── Convolution / linear ────────────────────────────────────────

    /// Cross-correlation applied independently per timestep. Weight layout is
    /// `[out_channels, in_channels, kh, kw]`, bias `[1, out_channels, 1, 1]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        if wd.c != xd.c {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {} input channels, tensor has {}",
                wd.c, xd.c
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if xd.h + 2 * padding < wd.h || xd.w + 2 * padding < wd.w {
            return Err(Error::Dimension(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                wd.h,
                wd.w,
                xd.h + 2 * padding,
                xd.w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            let bd = self.dims(b);
            if bd != Dims::new(1, wd.t, 1, 1) {
                return Err(Error::Dimension(format!(
                    "conv2d bias must be [1,{},1,1], got {}",
                    wd.t, bd
                )));
            }
        }
        let od = Dims::new(
            xd.t,
            wd.t,
            (xd.h + 2 * padding - wd.h) / stride + 1,
            (xd.w + 2 * padding - wd.w) / stride + 1,
        );
        let data = conv2d_forward(
            &self.slots[x.0].data,
            xd,
            &self.slots[w.0].data,
            wd,
            bias.map(|b| self.slots[b.0].data.as_slice()),
            stride,
            padding,
            od,
        );
        let req = match bias {
            Some(b) => self.requires(&[x, w, b]),
            None => self.requires(&[x, w]),
        };
        let out = self.push(od, data, req);
        if req {
            self.ops.push(Op::Conv2d { x, w, bias, stride, padding, out });
        }
        Ok(out)
    }

    /// Per-timestep fully connected layer: `x` is `[T, in, 1, 1]`, weight
    /// `[out, in, 1, 1]`, bias `[1, out, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        if xd.h != 1 || xd.w != 1 {
            return Err(Error::Dimension(format!(
                "linear input must be [T,C,1,1], got {}",
                xd
            )));
        }
        if wd.c != xd.c || wd.h != 1 || wd.w != 1 {
            return Err(Error::Dimension(format!(
                "linear weight must be [out,{},1,1], got {}",
                xd.c, wd
            )));
        }
        if let Some(b) = bias {
            if self.dims(b) != Dims::new(1, wd.t, 1, 1) {
                return Err(Error::Dimension(format!(
                    "linear bias must be [1,{},1,1], got {}",
                    wd.t,
                    self.dims(b)
                )));
            }
        }
        let od = Dims::new(xd.t, wd.t, 1, 1);
        let (t_len, c_in, c_out) = (xd.t, xd.c, wd.t);
        let mut data = vec![0.0f32; od.numel()];
        {
            let xv = &self.slots[x.0].data;
            let wv = &self.slots[w.0].data;
            for t in 0..t_len {
                let xrow = &xv[t * c_in..(t + 1) * c_in];
                let orow = &mut data[t * c_out..(t + 1) * c_out];
                for (o, or) in orow.iter_mut().enumerate() {
                    let wrow = &wv[o * c_in..(o + 1) * c_in];
                    let mut acc = 0.0f32;
                    for (&xv, &wv) in xrow.iter().zip(wrow) {
                        acc += xv * wv;
                    }
                    *or = acc;
                }
            }
            if let Some(b) = bias {
                let bv = &self.slots[b.0].data;
                for t in 0..t_len {
                    for o in 0..c_out {
                        data[t * c_out + o] += bv[o];
                    }
                }
            }
        }
        let req = match bias {
            Some(b) => self.requires(&[x, w, b]),
            None => self.requires(&[x, w]),
        };
        let out = self.push(od, data, req);
        if req {
            self.ops.push(Op::Linear { x, w, bias, out });
        }
        Ok(out)
    }

    // ── Structural ──────────────────────────────────────────────────

    /// Functional region copy: returns `dst` with the `span` region replaced
    /// by the corresponding region of `src`. Spatial dims must match.
    pub fn slice_assign(&mut self, dst: Var, src: Var, span: SliceSpan) -> Result<Var> {
        let dd = self.dims(dst);
        let sd = self.dims(src);
        if dd.h != sd.h || dd.w != sd.w {
            return Err(Error::Dimension(format!(
                "slice_assign spatial dims differ: {} vs {}",
                dd, sd
            )));
        }
        if span.dst_t + span.len_t > dd.t
            || span.src_t + span.len_t > sd.t
            || span.dst_c + span.len_c > dd.c
            || span.src_c + span.len_c > sd.c
        {
            return Err(Error::Dimension(format!(
                "slice_assign span {:?} out of bounds for dst {} / src {}",
                span, dd, sd
            )));
        }
        let mut data = self.slots[dst.0].data.clone();
        copy_span(&mut data, dd, &self.slots[src.0].data, sd, span);
        let req = self.requires(&[dst, src]);
        let out = self.push(dd, data, req);
        if req {
            self.ops.push(Op::SliceAssign { dst, src, span, out });
        }
        Ok(out)
    }

    /// Concatenate `[1,C,H,W]` frames along the time axis.
    pub fn stack_t(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("stack_t needs at least one frame".into()))?;
        let fd = self.dims(*first);
        if fd.t != 1 {
            return Err(Error::Dimension(format!(
                "stack_t frames must be [1,C,H,W], got {}",
                fd
            )));
        }
        let frame = fd.numel();
        let mut data = Vec::with_capacity(frame * parts.len());
        for p in parts {
            if self.dims(*p) != fd {
                return Err(Error::Dimension(format!(
                    "stack_t frame dims differ: {} vs {}",
                    self.dims(*p),
                    fd
                )));
            }
            data.extend_from_slice(&self.slots[p.0].data);
        }
        let od = Dims::new(parts.len(), fd.c, fd.h, fd.w);
        let req = self.requires(parts);
        let out = self.push(od, data, req);
        if req {
            self.ops.push(Op::StackT { parts: parts.to_vec(), out });
        }
        Ok(out)
    }

    /// Extract timestep `t` of `x` as a `[1,C,H,W]` value.
    pub fn extract_t(&mut self, x: Var, t: usize) -> Result<Var> {
        let xd = self.dims(x);
        let zero = self.zeros(Dims::new(1, xd.c, xd.h, xd.w));
        self.slice_assign(
            zero,
            x,
            SliceSpan { dst_t: 0, src_t: t, len_t: 1, dst_c: 0, src_c: 0, len_c: xd.c },
        )
    }

    /// Apply a channel-segment temporal shift. Fully described by the segment
    /// table; a pure permutation with zero fill, so its adjoint is the
    /// inverted shift.
    pub fn temporal_shift(&mut self, x: Var, segments: Vec<ShiftSegment>) -> Result<Var> {
        let xd = self.dims(x);
        let covered: usize = segments.iter().map(|s| s.c_hi - s.c_lo).sum();
        if covered != xd.c || segments.iter().any(|s| s.c_hi > xd.c || s.c_lo > s.c_hi) {
            return Err(Error::Dimension(format!(
                "shift segments do not partition {} channels",
                xd.c
            )));
        }
        let data = shift_data(&self.slots[x.0].data, xd, &segments);
        let req = self.requires(&[x]);
        let out = self.push(xd, data, req);
        if req {
            self.ops.push(Op::TemporalShift { x, segments, out });
        }
        Ok(out)
    }

    // ── Spiking ─────────────────────────────────────────────────────

    /// Heaviside firing: 1 where `v - v_th >= 0`, else 0. The recorded
    /// backward rule is the rectangular surrogate `(1/width)` inside the
    /// strict window `|v - v_th| < width/2`.
    pub fn fire(&mut self, v: Var, v_th: f32, width: f32) -> Var {
        let data = self.slots[v.0]
            .data
            .iter()
            .map(|&x| if x - v_th >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        let req = self.requires(&[v]);
        let out = self.push(self.dims(v), data, req);
        if req {
            self.ops.push(Op::Fire { v, v_th, width, out });
        }
        out
    }

    // ── Normalization ───────────────────────────────────────────────

    /// Training-mode batch normalization: per-channel statistics over the
    /// time and spatial axes, applied identically at every timestep with
    /// shared `gamma`/`beta` (`[1,C,1,1]` each). Returns the normalized value
    /// and the captured batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BnBatchStats)> {
        let xd = self.dims(x);
        let pd = Dims::new(1, xd.c, 1, 1);
        if self.dims(gamma) != pd || self.dims(beta) != pd {
            return Err(Error::Dimension(format!(
                "batch_norm gamma/beta must be {}, got {} / {}",
                pd,
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        let n = (xd.t * xd.h * xd.w) as f32;
        let plane = xd.h * xd.w;
        let mut mean = vec![0.0f32; xd.c];
        let mut var = vec![0.0f32; xd.c];
        {
            let xv = &self.slots[x.0].data;
            for t in 0..xd.t {
                for c in 0..xd.c {
                    let base = (t * xd.c + c) * plane;
                    let mut s = 0.0f32;
                    for &v in &xv[base..base + plane] {
                        s += v;
                    }
                    mean[c] += s;
                }
            }
            for m in mean.iter_mut() {
                *m /= n;
            }
            for t in 0..xd.t {
                for c in 0..xd.c {
                    let base = (t * xd.c + c) * plane;
                    let mut s = 0.0f32;
                    for &v in &xv[base..base + plane] {
                        let d = v - mean[c];
                        s += d * d;
                    }
                    var[c] += s;
                }
            }
            for v in var.iter_mut() {
                *v /= n;
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0f32; xd.numel()];
        {
            let xv = &self.slots[x.0].data;
            let g = &self.slots[gamma.0].data;
            let b = &self.slots[beta.0].data;
            for t in 0..xd.t {
                for c in 0..xd.c {
                    let base = (t * xd.c + c) * plane;
                    let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                    for i in base..base + plane {
                        data[i] = (xv[i] - m) * is * gc + bc;
                    }
                }
            }
        }
        let req = self.requires(&[x, gamma, beta]);
        let out = self.push(xd, data, req);
        let stats = BnBatchStats { mean: mean.clone(), var: var.clone() };
        if req {
            self.ops.push(Op::BatchNorm { x, gamma, beta, mean, inv_std, out });
        }
        Ok((out, stats))
    }

    /// Per-channel affine map `x * scale[c] + shift[c]`; the folded form of
    /// batch norm at inference. `scale`/`shift` are `[1,C,1,1]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xd = self.dims(x);
        let pd = Dims::new(1, xd.c, 1, 1);
        if self.dims(scale) != pd || self.dims(shift) != pd {
            return Err(Error::Dimension(format!(
                "channel_affine scale/shift must be {}, got {} / {}",
                pd,
                self.dims(scale),
                self.dims(shift)
            )));
        }
        let plane = xd.h * xd.w;
        let mut data = vec![0.0f32; xd.numel()];
        {
            let xv = &self.slots[x.0].data;
            let sc = &self.slots[scale.0].data;
            let sh = &self.slots[shift.0].data;
            for t in 0..xd.t {
                for c in 0..xd.c {
                    let base = (t * xd.c + c) * plane;
                    for i in base..base + plane {
                        data[i] = xv[i] * sc[c] + sh[c];
                    }
                }
            }
        }
        let req = self.requires(&[x, scale, shift]);
        let out = self.push(xd, data, req);
        if req {
            self.ops.push(Op::ChannelAffine { x, scale, shift, out });
        }
        Ok(out)
    }

    // ── Pooling / reshaping / reductions ────────────────────────────

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xd = self.dims(x);
        if kernel == 0 || stride == 0 || kernel > xd.h || kernel > xd.w {
            return Err(Error::Dimension(format!(
                "avg_pool2d kernel {} stride {} invalid for input {}",
                kernel, stride, xd
            )));
        }
        let od = Dims::new(
            xd.t,
            xd.c,
            (xd.h - kernel) / stride + 1,
            (xd.w - kernel) / stride + 1,
        );
        let norm = 1.0 / (kernel * kernel) as f32;
        let mut data = vec![0.0f32; od.numel()];
        {
            let xv = &self.slots[x.0].data;
            for t in 0..od.t {
                for c in 0..od.c {
                    for oh in 0..od.h {
                        for ow in 0..od.w {
                            let mut s = 0.0f32;
                            for kh in 0..kernel {
                                for kw in 0..kernel {
                                    s += xv[xd.index(t, c, oh * stride + kh, ow * stride + kw)];
                                }
                            }
                            data[od.index(t, c, oh, ow)] = s * norm;
                        }
                    }
                }
            }
        }
        let req = self.requires(&[x]);
        let out = self.push(od, data, req);
        if req {
            self.ops.push(Op::AvgPool { x, kernel, stride, out });
        }
        Ok(out)
    }

    /// Reshape `[T,C,H,W]` to `[T, C*H*W, 1, 1]`; identity on the row-major
    /// buffer.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xd = self.dims(x);
        let od = Dims::new(xd.t, xd.c * xd.h * xd.w, 1, 1);
        let data = self.slots[x.0].data.clone();
        let req = self.requires(&[x]);
        let out = self.push(od, data, req);
        if req {
            self.ops.push(Op::Flatten { x, out });
        }
        out
    }

    /// Mean over the time axis: `[T,C,H,W]` to `[1,C,H,W]`.
    pub fn mean_t(&mut self, x: Var) -> Var {
        let xd = self.dims(x);
        let od = Dims::new(1, xd.c, xd.h, xd.w);
        let frame = od.numel();
        let mut data = vec![0.0f32; frame];
        {
            let xv = &self.slots[x.0].data;
            for t in 0..xd.t {
                for i in 0..frame {
                    data[i] += xv[t * frame + i];
                }
            }
            let inv = 1.0 / xd.t as f32;
            for v in data.iter_mut() {
                *v *= inv;
            }
        }
        let req = self.requires(&[x]);
        let out = self.push(od, data, req);
        if req {
            self.ops.push(Op::MeanT { x, out });
        }
        out
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f32 = self.slots[x.0].data.iter().sum();
        let req = self.requires(&[x]);
        let out = self.push(Dims::new(1, 1, 1, 1), vec![s], req);
        if req {
            self.ops.push(Op::SumAll { x, out });
        }
        out
    }

    /// Numerically stabilized `-log softmax(scores)[label]`; `scores` must be
    /// `[1,K,1,1]`.
    pub fn cross_entropy(&mut self, scores: Var, label: usize) -> Result<Var> {
        let sd = self.dims(scores);
        if sd.t != 1 || sd.h != 1 || sd.w != 1 {
            return Err(Error::Dimension(format!(
                "cross_entropy scores must be [1,K,1,1], got {}",
                sd
            )));
        }
        if label >= sd.c {
            return Err(Error::Contract(format!(
                "label {} out of range for {} classes",
                label, sd.c
            )));
        }
        let (loss, _) = cross_entropy_forward(&self.slots[scores.0].data, label);
        let req = self.requires(&[scores]);
        let out = self.push(Dims::new(1, 1, 1, 1), vec![loss], req);
        if req {
            self.ops.push(Op::CrossEntropy { scores, label, out });
        }
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Replay the tape in reverse, accumulating adjoints into every
    /// gradient-tracked leaf. `loss` must be a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.slots.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.apply_adjoint(op, &mut grads);
        }

        let dims = self.slots.iter().map(|s| s.dims).collect();
        Ok(Gradients { grads, dims })
    }

    fn apply_adjoint(&self, op: &Op, grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Add { a, b, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[a.0].requires_grad {
                    axpy(grad_buf(grads, *a, self), 1.0, &go);
                }
                if self.slots[b.0].requires_grad {
                    axpy(grad_buf(grads, *b, self), 1.0, &go);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[a.0].requires_grad {
                    let bv = &self.slots[b.0].data;
                    let ga = grad_buf(grads, *a, self);
                    for ((g, &u), &v) in ga.iter_mut().zip(&go).zip(bv) {
                        *g += u * v;
                    }
                }
                if self.slots[b.0].requires_grad {
                    let av = &self.slots[a.0].data;
                    let gb = grad_buf(grads, *b, self);
                    for ((g, &u), &v) in gb.iter_mut().zip(&go).zip(av) {
                        *g += u * v;
                    }
                }
            }
            Op::Scale { a, k, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[a.0].requires_grad {
                    axpy(grad_buf(grads, *a, self), *k, &go);
                }
            }
            Op::AddScalar { a, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[a.0].requires_grad {
                    axpy(grad_buf(grads, *a, self), 1.0, &go);
                }
            }
            Op::MulScalarVar { a, s, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let sv = self.slots[s.0].data[0];
                if self.slots[a.0].requires_grad {
                    axpy(grad_buf(grads, *a, self), sv, &go);
                }
                if self.slots[s.0].requires_grad {
                    let av = &self.slots[a.0].data;
                    let mut acc = 0.0f32;
                    for i in 0..go.len() {
                        acc += go[i] * av[i];
                    }
                    grad_buf(grads, *s, self)[0] += acc;
                }
            }
            Op::Conv2d { x, w, bias, stride, padding, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let od = self.dims(*out);
                let xd = self.dims(*x);
                let wd = self.dims(*w);
                let need_x = self.slots[x.0].requires_grad;
                let need_w = self.slots[w.0].requires_grad;
                let (gx, gw) = conv2d_backward(
                    &self.slots[x.0].data,
                    xd,
                    &self.slots[w.0].data,
                    wd,
                    &go,
                    od,
                    *stride,
                    *padding,
                    need_x,
                    need_w,
                );
                if let Some(gx) = gx {
                    axpy(grad_buf(grads, *x, self), 1.0, &gx);
                }
                if let Some(gw) = gw {
                    axpy(grad_buf(grads, *w, self), 1.0, &gw);
                }
                if let Some(b) = bias {
                    if self.slots[b.0].requires_grad {
                        let gb = grad_buf(grads, *b, self);
                        let plane = od.h * od.w;
                        for t in 0..od.t {
                            for c in 0..od.c {
                                let base = (t * od.c + c) * plane;
                                let mut s = 0.0f32;
                                for &g in &go[base..base + plane] {
                                    s += g;
                                }
                                gb[c] += s;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, bias, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let xd = self.dims(*x);
                let c_out = self.dims(*w).t;
                let c_in = xd.c;
                if self.slots[x.0].requires_grad {
                    let wv = &self.slots[w.0].data;
                    let gx = grad_buf(grads, *x, self);
                    for t in 0..xd.t {
                        for o in 0..c_out {
                            let g = go[t * c_out + o];
                            let wrow = &wv[o * c_in..(o + 1) * c_in];
                            let gxr = &mut gx[t * c_in..(t + 1) * c_in];
                            for i in 0..c_in {
                                gxr[i] += g * wrow[i];
                            }
                        }
                    }
                }
                if self.slots[w.0].requires_grad {
                    let xv = &self.slots[x.0].data;
                    let gw = grad_buf(grads, *w, self);
                    for t in 0..xd.t {
                        let xrow = &xv[t * c_in..(t + 1) * c_in];
                        for o in 0..c_out {
                            let g = go[t * c_out + o];
                            let gwr = &mut gw[o * c_in..(o + 1) * c_in];
                            for i in 0..c_in {
                                gwr[i] += g * xrow[i];
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.slots[b.0].requires_grad {
                        let gb = grad_buf(grads, *b, self);
                        for t in 0..xd.t {
                            for o in 0..c_out {
                                gb[o] += go[t * c_out + o];
                            }
                        }
                    }
                }
            }
            Op::SliceAssign { dst, src, span, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let dd = self.dims(*dst);
                let sd = self.dims(*src);
                if self.slots[src.0].requires_grad {
                    let gs = grad_buf(grads, *src, self);
                    add_span(gs, sd, &go, dd, *span);
                }
                if self.slots[dst.0].requires_grad {
                    let mut masked = go;
                    zero_span(&mut masked, dd, *span);
                    axpy(grad_buf(grads, *dst, self), 1.0, &masked);
                }
            }
            Op::StackT { parts, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let frame = self.dims(parts[0]).numel();
                for (t, p) in parts.iter().enumerate() {
                    if self.slots[p.0].requires_grad {
                        let gp = grad_buf(grads, *p, self);
                        axpy(gp, 1.0, &go[t * frame..(t + 1) * frame]);
                    }
                }
            }
            Op::TemporalShift { x, segments, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[x.0].requires_grad {
                    let back = shift_data(&go, self.dims(*out), &invert_segments(segments));
                    axpy(grad_buf(grads, *x, self), 1.0, &back);
                }
            }
            Op::Fire { v, v_th, width, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[v.0].requires_grad {
                    let vv = &self.slots[v.0].data;
                    let gv = grad_buf(grads, *v, self);
                    let half = width * 0.5;
                    for i in 0..go.len() {
                        if (vv[i] - v_th).abs() < half {
                            gv[i] += go[i] / width;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let xd = self.dims(*x);
                let plane = xd.h * xd.w;
                let n = (xd.t * plane) as f32;
                let xv = &self.slots[x.0].data;
                let g = &self.slots[gamma.0].data;
                // Per-channel sums of dy and dy*xhat.
                let mut sum_dy = vec![0.0f32; xd.c];
                let mut sum_dy_xhat = vec![0.0f32; xd.c];
                for t in 0..xd.t {
                    for c in 0..xd.c {
                        let base = (t * xd.c + c) * plane;
                        let (m, is) = (mean[c], inv_std[c]);
                        for i in base..base + plane {
                            let xhat = (xv[i] - m) * is;
                            sum_dy[c] += go[i];
                            sum_dy_xhat[c] += go[i] * xhat;
                        }
                    }
                }
                if self.slots[beta.0].requires_grad {
                    let gb = grad_buf(grads, *beta, self);
                    for c in 0..xd.c {
                        gb[c] += sum_dy[c];
                    }
                }
                if self.slots[gamma.0].requires_grad {
                    let gg = grad_buf(grads, *gamma, self);
                    for c in 0..xd.c {
                        gg[c] += sum_dy_xhat[c];
                    }
                }
                if self.slots[x.0].requires_grad {
                    let gx = grad_buf(grads, *x, self);
                    for t in 0..xd.t {
                        for c in 0..xd.c {
                            let base = (t * xd.c + c) * plane;
                            let (m, is, gc) = (mean[c], inv_std[c], g[c]);
                            let (sd, sdx) = (sum_dy[c], sum_dy_xhat[c]);
                            for i in base..base + plane {
                                let xhat = (xv[i] - m) * is;
                                gx[i] += gc * is * (go[i] - sd / n - xhat * sdx / n);
                            }
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift, out } => {
                let Some(go) = grads[out.0].take() else { return };
                let xd = self.dims(*x);
                let plane = xd.h * xd.w;
                if self.slots[x.0].requires_grad {
                    let sc = &self.slots[scale.0].data;
                    let gx = grad_buf(grads, *x, self);
                    for t in 0..xd.t {
                        for c in 0..xd.c {
                            let base = (t * xd.c + c) * plane;
                            for i in base..base + plane {
                                gx[i] += go[i] * sc[c];
                            }
                        }
                    }
                }
                if self.slots[scale.0].requires_grad {
                    let xv = &self.slots[x.0].data;
                    let gs = grad_buf(grads, *scale, self);
                    for t in 0..xd.t {
                        for c in 0..xd.c {
                            let base = (t * xd.c + c) * plane;
                            let mut s = 0.0f32;
                            for i in base..base + plane {
                                s += go[i] * xv[i];
                            }
                            gs[c] += s;
                        }
                    }
                }
                if self.slots[shift.0].requires_grad {
                    let gh = grad_buf(grads, *shift, self);
                    for t in 0..xd.t {
                        for c in 0..xd.c {
                            let base = (t * xd.c + c) * plane;
                            let mut s = 0.0f32;
                            for &g in &go[base..base + plane] {
                                s += g;
                            }
                            gh[c] += s;
                        }
                    }
                }
            }
            Op::AvgPool { x, kernel, stride, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[x.0].requires_grad {
                    let xd = self.dims(*x);
                    let od = self.dims(*out);
                    let norm = 1.0 / (kernel * kernel) as f32;
                    let gx = grad_buf(grads, *x, self);
                    for t in 0..od.t {
                        for c in 0..od.c {
                            for oh in 0..od.h {
                                for ow in 0..od.w {
                                    let g = go[od.index(t, c, oh, ow)] * norm;
                                    for kh in 0..*kernel {
                                        for kw in 0..*kernel {
                                            gx[xd.index(t, c, oh * stride + kh, ow * stride + kw)] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Flatten { x, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[x.0].requires_grad {
                    axpy(grad_buf(grads, *x, self), 1.0, &go);
                }
            }
            Op::MeanT { x, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[x.0].requires_grad {
                    let xd = self.dims(*x);
                    let frame = xd.c * xd.h * xd.w;
                    let inv = 1.0 / xd.t as f32;
                    let gx = grad_buf(grads, *x, self);
                    for t in 0..xd.t {
                        for i in 0..frame {
                            gx[t * frame + i] += go[i] * inv;
                        }
                    }
                }
            }
            Op::SumAll { x, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[x.0].requires_grad {
                    let g = go[0];
                    for v in grad_buf(grads, *x, self).iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::CrossEntropy { scores, label, out } => {
                let Some(go) = grads[out.0].take() else { return };
                if self.slots[scores.0].requires_grad {
                    let (_, softmax) = cross_entropy_forward(&self.slots[scores.0].data, *label);
                    let gs = grad_buf(grads, *scores, self);
                    for (i, p) in softmax.iter().enumerate() {
                        let onehot = if i == *label { 1.0 } else { 0.0 };
                        gs[i] += go[0] * (p - onehot);
                    }
                }
            }
        }
    }
}

/// Gradient map produced by [`GradTape::backward`]; indexed by the [`Var`]
/// handles of the tape that produced it.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    dims: Vec<Dims>,
}

impl Gradients {
    /// Gradient buffer for `v`, if any adjoint reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zero-filled when no adjoint reached `v`.
    pub fn tensor(&self, v: Var) -> SpikeTensor {
        let dims = self.dims[v.0];
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; dims.numel()],
        };
        SpikeTensor::from_vec(dims, data).expect("gradient length matches dims")
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f32>>], v: Var, tape: &GradTape) -> &'g mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; tape.slots[v.0].dims.numel()])
}

fn axpy(dst: &mut [f32], k: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn copy_span(dst: &mut [f32], dd: Dims, src: &[f32], sd: Dims, span: SliceSpan) {
    let plane = dd.h * dd.w;
    for dt in 0..span.len_t {
        for dc in 0..span.len_c {
            let d0 = ((span.dst_t + dt) * dd.c + span.dst_c + dc) * plane;
            let s0 = ((span.src_t + dt) * sd.c + span.src_c + dc) * plane;
            dst[d0..d0 + plane].copy_from_slice(&src[s0..s0 + plane]);
        }
    }
}

fn add_span(dst: &mut [f32], dd: Dims, src: &[f32], sd: Dims, span: SliceSpan) {
    // Accumulates the span region of `src` (a gradient of the slice_assign
    // output) into the source coordinates.
    let plane = dd.h * dd.w;
    for dt in 0..span.len_t {
        for dc in 0..span.len_c {
            let d0 = ((span.src_t + dt) * dd.c + span.src_c + dc) * plane;
            let s0 = ((span.dst_t + dt) * sd.c + span.dst_c + dc) * plane;
            for i in 0..plane {
                dst[d0 + i] += src[s0 + i];
            }
        }
    }
}

fn zero_span(buf: &mut [f32], dims: Dims, span: SliceSpan) {
    let plane = dims.h * dims.w;
    for dt in 0..span.len_t {
        for dc in 0..span.len_c {
            let d0 = ((span.dst_t + dt) * dims.c + span.dst_c + dc) * plane;
            for v in &mut buf[d0..d0 + plane] {
                *v = 0.0;
            }
        }
    }
}

pub(crate) fn cross_entropy_forward(scores: &[f32], label: usize) -> (f32, Vec<f32>) {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = scores.iter().map(|&s| (s - max).exp()).collect();
    let denom: f32 = exps.iter().sum();
    let softmax: Vec<f32> = exps.iter().map(|&e| e / denom).collect();
    let loss = -(scores[label] - max - denom.ln());
    (loss, softmax)
}

/// Weights rearranged as `[kh*kw][ci][co]` so the innermost loops run over
/// the contiguous output-channel axis.
fn transpose_weights(w: &[f32], wd: Dims) -> Vec<f32> {
    let (c_out, c_in, kh_n, kw_n) = (wd.t, wd.c, wd.h, wd.w);
    let taps = kh_n * kw_n;
    let mut wt = vec![0.0f32; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            let base = (co * c_in + ci) * taps;
            for k in 0..taps {
                wt[(k * c_in + ci) * c_out + co] = w[base + k];
            }
        }
    }
    wt
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f32],
    xd: Dims,
    w: &[f32],
    wd: Dims,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    od: Dims,
) -> Vec<f32> {
    let (c_in, c_out) = (xd.c, wd.t);
    let (kh_n, kw_n) = (wd.h, wd.w);
    let wt = transpose_weights(w, wd);
    let mut out = vec![0.0f32; od.numel()];
    let x_plane = xd.h * xd.w;
    let o_plane = od.h * od.w;
    let mut acc = vec![0.0f32; c_out];
    for t in 0..xd.t {
        let x_t = &x[t * c_in * x_plane..(t + 1) * c_in * x_plane];
        let out_t = &mut out[t * c_out * o_plane..(t + 1) * c_out * o_plane];
        for oh in 0..od.h {
            for ow in 0..od.w {
                match bias {
                    Some(b) => acc.copy_from_slice(b),
                    None => acc.fill(0.0),
                }
                for kh in 0..kh_n {
                    let hi = (oh * stride + kh) as isize - padding as isize;
                    if hi < 0 || hi >= xd.h as isize {
                        continue;
                    }
                    let row = hi as usize * xd.w;
                    for kw in 0..kw_n {
                        let wi = (ow * stride + kw) as isize - padding as isize;
                        if wi < 0 || wi >= xd.w as isize {
                            continue;
                        }
                        let pix = row + wi as usize;
                        let wk = &wt[(kh * kw_n + kw) * c_in * c_out..];
                        for ci in 0..c_in {
                            let xv = x_t[ci * x_plane + pix];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wk[ci * c_out..(ci + 1) * c_out];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                let o_pix = oh * od.w + ow;
                for (co, &a) in acc.iter().enumerate() {
                    out_t[co * o_plane + o_pix] = a;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f32],
    xd: Dims,
    w: &[f32],
    wd: Dims,
    go: &[f32],
    od: Dims,
    stride: usize,
    padding: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (c_in, c_out) = (xd.c, wd.t);
    let (kh_n, kw_n) = (wd.h, wd.w);
    let taps = kh_n * kw_n;
    let wt = transpose_weights(w, wd);
    let x_plane = xd.h * xd.w;
    let o_plane = od.h * od.w;
    let mut gx = if need_x { Some(vec![0.0f32; xd.numel()]) } else { None };
    // Accumulate weight gradients in the transposed layout, then swap back.
    let mut gwt = if need_w { Some(vec![0.0f32; wd.numel()]) } else { None };
    let mut go_vec = vec![0.0f32; c_out];
    for t in 0..xd.t {
        let x_t = &x[t * c_in * x_plane..(t + 1) * c_in * x_plane];
        let go_t = &go[t * c_out * o_plane..(t + 1) * c_out * o_plane];
        let gx_t = gx
            .as_mut()
            .map(|g| &mut g[t * c_in * x_plane..(t + 1) * c_in * x_plane]);
        let mut gx_t = gx_t;
        for oh in 0..od.h {
            for ow in 0..od.w {
                let o_pix = oh * od.w + ow;
                for (co, g) in go_vec.iter_mut().enumerate() {
                    *g = go_t[co * o_plane + o_pix];
                }
                for kh in 0..kh_n {
                    let hi = (oh * stride + kh) as isize - padding as isize;
                    if hi < 0 || hi >= xd.h as isize {
                        continue;
                    }
                    let row = hi as usize * xd.w;
                    for kw in 0..kw_n {
                        let wi = (ow * stride + kw) as isize - padding as isize;
                        if wi < 0 || wi >= xd.w as isize {
                            continue;
                        }
                        let pix = row + wi as usize;
                        let k = kh * kw_n + kw;
                        if let Some(gx_t) = gx_t.as_mut() {
                            let wk = &wt[k * c_in * c_out..];
                            for ci in 0..c_in {
                                let wrow = &wk[ci * c_out..(ci + 1) * c_out];
                                let mut dot = 0.0f32;
                                for (&wv, &g) in wrow.iter().zip(&go_vec) {
                                    dot += wv * g;
                                }
                                gx_t[ci * x_plane + pix] += dot;
                            }
                        }
                        if let Some(gwt) = gwt.as_mut() {
                            let gk = &mut gwt[k * c_in * c_out..(k + 1) * c_in * c_out];
                            for ci in 0..c_in {
                                let xv = x_t[ci * x_plane + pix];
                                if xv == 0.0 {
                                    continue;
                                }
                                let grow = &mut gk[ci * c_out..(ci + 1) * c_out];
                                for (gw, &g) in grow.iter_mut().zip(&go_vec) {
                                    *gw += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gw = gwt.map(|gwt| {
        let mut gw = vec![0.0f32; wd.numel()];
        for co in 0..c_out {
            for ci in 0..c_in {
                let base = (co * c_in + ci) * taps;
                for k in 0..taps {
                    gw[base + k] = gwt[(k * c_in + ci) * c_out + co];
                }
            }
        }
        gw
    });
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dims, SpikeTensor};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(dims: Dims, rng: &mut StdRng) -> SpikeTensor {
        let data = (0..dims.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SpikeTensor::from_vec(dims, data).unwrap().with_requires_grad(true)
    }

    /// Central finite differences of a scalar tape program w.r.t. one leaf.
    fn finite_diff<F>(f: F, base: &SpikeTensor, eps: f32) -> Vec<f32>
    where
        F: Fn(&SpikeTensor) -> f32,
    {
        let mut g = vec![0.0f32; base.data().len()];
        for i in 0..base.data().len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(analytic: &[f32], numeric: &[f32], rel: f32) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = n.abs().max(1.0);
            assert!(
                (a - n).abs() / denom <= rel,
                "gradient mismatch at {}: analytic {} vs numeric {}",
                i,
                a,
                n
            );
        }
    }

    #[test]
    fn sum_adjoint_is_ones() {
        let x = SpikeTensor::from_vec(Dims::new(1, 3, 1, 1), vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum_all(xv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(xv).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule_grad_is_other_factor() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = rand_tensor(Dims::new(2, 2, 2, 1), &mut rng);
        let b = rand_tensor(Dims::new(2, 2, 2, 1), &mut rng);
        let mut tape = GradTape::new();
        let av = tape.leaf(&a);
        let bv = tape.constant(&b);
        let prod = tape.mul(av, bv).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(av).unwrap(), b.data());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let x = SpikeTensor::filled(Dims::new(1, 2, 1, 1), 1.0).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(
            tape.backward(xv),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of value 1 is the identity map.
        let mut rng = StdRng::seed_from_u64(2);
        let x = rand_tensor(Dims::new(2, 1, 3, 3), &mut rng);
        let w = SpikeTensor::filled(Dims::new(1, 1, 1, 1), 1.0).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let wv = tape.constant(&w);
        let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn conv_all_ones_sum() {
        // 3x3 all-ones kernel over all-ones 4x4 input, no padding: every
        // output equals 9 (direct summation oracle).
        let x = SpikeTensor::filled(Dims::new(1, 1, 4, 4), 1.0).unwrap();
        let w = SpikeTensor::filled(Dims::new(1, 1, 3, 3), 1.0).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        assert_eq!(tape.dims(y), Dims::new(1, 1, 2, 2));
        assert!(tape.value(y).iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_per_timestep_independence() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut x = rand_tensor(Dims::new(2, 2, 4, 4), &mut rng);
        let w = rand_tensor(Dims::new(3, 2, 3, 3), &mut rng);
        let run = |x: &SpikeTensor, w: &SpikeTensor| {
            let mut tape = GradTape::no_grad();
            let xv = tape.leaf(x);
            let wv = tape.leaf(w);
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            tape.value_tensor(y)
        };
        let y0 = run(&x, &w);
        // Perturb timestep 1 only; timestep 0 of the output must not move.
        let frame = 2 * 4 * 4;
        for v in &mut x.data_mut()[frame..] {
            *v += 0.5;
        }
        let y1 = run(&x, &w);
        let out_frame = 3 * 4 * 4;
        assert_eq!(y0.data()[..out_frame], y1.data()[..out_frame]);
        assert_ne!(y0.data()[out_frame..], y1.data()[out_frame..]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = rand_tensor(Dims::new(2, 2, 5, 5), &mut rng);
            let w = rand_tensor(Dims::new(3, 2, 3, 3), &mut rng);
            let b = rand_tensor(Dims::new(1, 3, 1, 1), &mut rng);

            let mut tape = GradTape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let bv = tape.leaf(&b);
            let y = tape.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss).unwrap();

            let eval_x = |xt: &SpikeTensor| {
                let mut t = GradTape::no_grad();
                let xv = t.leaf(xt);
                let wv = t.leaf(&w);
                let bv = t.leaf(&b);
                let y = t.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
                let l = t.sum_all(y);
                t.value(l)[0]
            };
            let eval_w = |wt: &SpikeTensor| {
                let mut t = GradTape::no_grad();
                let xv = t.leaf(&x);
                let wv = t.leaf(wt);
                let bv = t.leaf(&b);
                let y = t.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
                let l = t.sum_all(y);
                t.value(l)[0]
            };
            assert_close(grads.wrt(xv).unwrap(), &finite_diff(eval_x, &x, 1e-3), 1e-2);
            assert_close(grads.wrt(wv).unwrap(), &finite_diff(eval_w, &w, 1e-3), 1e-2);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = rand_tensor(Dims::new(3, 2, 2, 2), &mut rng);
        let gamma = rand_tensor(Dims::new(1, 2, 1, 1), &mut rng);
        let beta = rand_tensor(Dims::new(1, 2, 1, 1), &mut rng);
        let weight = rand_tensor(Dims::new(3, 2, 2, 2), &mut rng);

        let eval = |x: &SpikeTensor, g: &SpikeTensor, b: &SpikeTensor| {
            let mut t = GradTape::no_grad();
            let xv = t.leaf(x);
            let gv = t.leaf(g);
            let bv = t.leaf(b);
            let wv = t.leaf(&weight);
            let (y, _) = t.batch_norm(xv, gv, bv, 1e-5).unwrap();
            let y = t.mul(y, wv).unwrap();
            let l = t.sum_all(y);
            t.value(l)[0]
        };

        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let gv = tape.leaf(&gamma);
        let bv = tape.leaf(&beta);
        let wv = tape.constant(&weight);
        let (y, _) = tape.batch_norm(xv, gv, bv, 1e-5).unwrap();
        let y = tape.mul(y, wv).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();

        let fd_x = finite_diff(|p| eval(p, &gamma, &beta), &x, 1e-3);
        let fd_g = finite_diff(|p| eval(&x, p, &beta), &gamma, 1e-3);
        let fd_b = finite_diff(|p| eval(&x, &gamma, p), &beta, 1e-3);
        assert_close(grads.wrt(xv).unwrap(), &fd_x, 2e-2);
        assert_close(grads.wrt(gv).unwrap(), &fd_g, 2e-2);
        assert_close(grads.wrt(bv).unwrap(), &fd_b, 2e-2);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = rand_tensor(Dims::new(3, 2, 4, 4), &mut rng);
        let weight = rand_tensor(Dims::new(3, 2, 4, 4), &mut rng);
        let w2 = rand_tensor(Dims::new(1, 2 * 2 * 2, 4, 4), &mut rng);

        // avgpool -> flatten -> weighted sums to exercise several adjoints.
        let eval = |x: &SpikeTensor| {
            let mut t = GradTape::no_grad();
            let xv = t.leaf(x);
            let wv = t.leaf(&weight);
            let xw = t.mul(xv, wv).unwrap();
            let p = t.avg_pool2d(xw, 2, 2).unwrap();
            let f = t.flatten(p);
            let m = t.mean_t(f);
            let l = t.sum_all(m);
            let _ = &w2;
            t.value(l)[0]
        };
        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let wv = tape.constant(&weight);
        let xw = tape.mul(xv, wv).unwrap();
        let p = tape.avg_pool2d(xw, 2, 2).unwrap();
        let f = tape.flatten(p);
        let m = tape.mean_t(f);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.wrt(xv).unwrap(), &finite_diff(eval, &x, 1e-3), 1e-2);
    }

    #[test]
    fn slice_assign_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let dst = rand_tensor(Dims::new(3, 3, 2, 2), &mut rng);
        let src = rand_tensor(Dims::new(3, 3, 2, 2), &mut rng);
        let weight = rand_tensor(Dims::new(3, 3, 2, 2), &mut rng);
        let span = SliceSpan { dst_t: 0, src_t: 1, len_t: 2, dst_c: 1, src_c: 0, len_c: 2 };

        let eval = |d: &SpikeTensor, s: &SpikeTensor| {
            let mut t = GradTape::no_grad();
            let dv = t.leaf(d);
            let sv = t.leaf(s);
            let wv = t.leaf(&weight);
            let o = t.slice_assign(dv, sv, span).unwrap();
            let o = t.mul(o, wv).unwrap();
            let l = t.sum_all(o);
            t.value(l)[0]
        };
        let mut tape = GradTape::new();
        let dv = tape.leaf(&dst);
        let sv = tape.leaf(&src);
        let wv = tape.constant(&weight);
        let o = tape.slice_assign(dv, sv, span).unwrap();
        let o = tape.mul(o, wv).unwrap();
        let loss = tape.sum_all(o);
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.wrt(dv).unwrap(), &finite_diff(|p| eval(p, &src), &dst, 1e-3), 1e-2);
        assert_close(grads.wrt(sv).unwrap(), &finite_diff(|p| eval(&dst, p), &src, 1e-3), 1e-2);
    }

    #[test]
    fn linear_and_cross_entropy_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = rand_tensor(Dims::new(4, 3, 1, 1), &mut rng);
        let w = rand_tensor(Dims::new(5, 3, 1, 1), &mut rng);
        let b = rand_tensor(Dims::new(1, 5, 1, 1), &mut rng);

        let eval = |x: &SpikeTensor, w: &SpikeTensor, b: &SpikeTensor| {
            let mut t = GradTape::no_grad();
            let xv = t.leaf(x);
            let wv = t.leaf(w);
            let bv = t.leaf(b);
            let y = t.linear(xv, wv, Some(bv)).unwrap();
            let m = t.mean_t(y);
            let l = t.cross_entropy(m, 2).unwrap();
            t.value(l)[0]
        };
        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        let m = tape.mean_t(y);
        let loss = tape.cross_entropy(m, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.wrt(xv).unwrap(), &finite_diff(|p| eval(p, &w, &b), &x, 1e-3), 1e-2);
        assert_close(grads.wrt(wv).unwrap(), &finite_diff(|p| eval(&x, p, &b), &w, 1e-3), 1e-2);
        assert_close(grads.wrt(bv).unwrap(), &finite_diff(|p| eval(&x, &w, p), &b, 1e-3), 1e-2);
    }

    #[test]
    fn linearity_of_linear_ops() {
        // conv2d, slice_assign and scalar-scale commute with addition.
        let mut rng = StdRng::seed_from_u64(9);
        let a = rand_tensor(Dims::new(2, 2, 4, 4), &mut rng);
        let b = rand_tensor(Dims::new(2, 2, 4, 4), &mut rng);
        let w = rand_tensor(Dims::new(2, 2, 3, 3), &mut rng);
        let span = SliceSpan { dst_t: 0, src_t: 1, len_t: 1, dst_c: 0, src_c: 1, len_c: 1 };

        let apply = |x: &SpikeTensor, which: u8| {
            let mut t = GradTape::no_grad();
            let xv = t.leaf(x);
            let out = match which {
                0 => {
                    let wv = t.leaf(&w);
                    t.conv2d(xv, wv, None, 1, 1).unwrap()
                }
                1 => {
                    let z = t.zeros(x.dims());
                    t.slice_assign(z, xv, span).unwrap()
                }
                _ => t.scale(xv, 2.5),
            };
            t.value_tensor(out)
        };
        let sum = SpikeTensor::from_vec(
            a.dims(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        for which in 0..=2u8 {
            let lhs = apply(&sum, which);
            let ra = apply(&a, which);
            let rb = apply(&b, which);
            for i in 0..lhs.data().len() {
                let rhs = ra.data()[i] + rb.data()[i];
                assert!(
                    (lhs.data()[i] - rhs).abs() <= 1e-4 * rhs.abs().max(1.0),
                    "op {} not additive at {}",
                    which,
                    i
                );
            }
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_gradients() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(10);
            let x = rand_tensor(Dims::new(2, 2, 3, 3), &mut rng);
            let w = rand_tensor(Dims::new(2, 2, 3, 3), &mut rng);
            let mut tape = GradTape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss)[0], grads.wrt(xv).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn cross_entropy_stability_and_closed_forms() {
        // Uniform scores over k classes -> ln k.
        let (loss, _) = cross_entropy_forward(&[0.0, 0.0, 0.0], 2);
        assert!((loss - 3.0f32.ln()).abs() < 1e-6);
        // Huge margin does not overflow.
        let (loss, _) = cross_entropy_forward(&[1000.0, 0.0], 0);
        assert!(loss.is_finite() && loss.abs() < 1e-6);
    }
}
