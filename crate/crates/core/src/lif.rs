//! Leaky integrate-and-fire neuron layer with hard reset and rectangular
//! surrogate gradient, iterated across timesteps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Dims, SpikeTensor};

/// Neuron constants shared by every unit of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifParams {
    /// Membrane time constant in dimensionless steps.
    pub tau: f32,
    /// Firing threshold; crossing is inclusive (`v >= v_th` fires).
    pub v_th: f32,
    pub v_reset: f32,
    /// Width of the rectangular surrogate window; the window itself is a
    /// strict inequality `|v - v_th| < width/2`.
    pub surrogate_width: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams { tau: 2.0, v_th: 1.0, v_reset: 0.0, surrogate_width: 1.0 }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) {
            return Err(Error::Config(format!("tau must be >= 1, got {}", self.tau)));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::Config(format!(
                "surrogate width must be > 0, got {}",
                self.surrogate_width
            )));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Config(format!(
                "v_th {} must exceed v_reset {}",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Charging step (explicit Euler, unit timestep):
/// `V = h + (1/tau) * (-(h - v_reset) + x)`.
pub fn charge(h_prev: &SpikeTensor, x: &SpikeTensor, p: &LifParams) -> Result<SpikeTensor> {
    if h_prev.dims() != x.dims() {
        return Err(Error::Dimension(format!(
            "charge operands differ: {} vs {}",
            h_prev.dims(),
            x.dims()
        )));
    }
    let inv_tau = 1.0 / p.tau;
    let data = h_prev
        .data()
        .iter()
        .zip(x.data())
        .map(|(&h, &xv)| h + inv_tau * (-(h - p.v_reset) + xv))
        .collect();
    SpikeTensor::from_vec(x.dims(), data)
}

/// Heaviside firing: 1 where `v - v_th >= 0`, else 0.
pub fn fire(v: &SpikeTensor, p: &LifParams) -> SpikeTensor {
    let data = v
        .data()
        .iter()
        .map(|&x| if x - p.v_th >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    SpikeTensor::from_vec(v.dims(), data).expect("same dims")
}

/// Hard reset: `h = v_reset * s + v * (1 - s)`.
pub fn reset(v: &SpikeTensor, s: &SpikeTensor, p: &LifParams) -> Result<SpikeTensor> {
    if v.dims() != s.dims() {
        return Err(Error::Dimension(format!(
            "reset operands differ: {} vs {}",
            v.dims(),
            s.dims()
        )));
    }
    if !s.is_binary() {
        return Err(Error::Contract("reset spikes must be 0/1 valued".into()));
    }
    let data = v
        .data()
        .iter()
        .zip(s.data())
        .map(|(&vv, &sv)| p.v_reset * sv + vv * (1.0 - sv))
        .collect();
    SpikeTensor::from_vec(v.dims(), data)
}

/// Rectangular surrogate factor used in place of the Heaviside derivative:
/// `(1/width) * 1[|v - v_th| < width/2]`, strict at the window edge.
pub fn surrogate_grad(v: &SpikeTensor, p: &LifParams) -> SpikeTensor {
    let half = p.surrogate_width * 0.5;
    let data = v
        .data()
        .iter()
        .map(|&x| {
            if (x - p.v_th).abs() < half {
                1.0 / p.surrogate_width
            } else {
                0.0
            }
        })
        .collect();
    SpikeTensor::from_vec(v.dims(), data).expect("same dims")
}

/// Plain per-timestep loop of charge, fire, reset with state carried across
/// timesteps. Returns the spike train and the final carried membrane.
pub fn layer_forward(x: &SpikeTensor, p: &LifParams) -> Result<(SpikeTensor, SpikeTensor)> {
    let dims = x.dims();
    let frame = Dims::new(1, dims.c, dims.h, dims.w);
    let mut h = SpikeTensor::filled(frame, p.v_reset)?;
    let mut out = SpikeTensor::zeros(dims)?;
    let frame_len = frame.numel();
    for t in 0..dims.t {
        let x_t = SpikeTensor::from_vec(frame, x.data()[t * frame_len..(t + 1) * frame_len].to_vec())?;
        let v = charge(&h, &x_t, p)?;
        let s = fire(&v, p);
        h = reset(&v, &s, p)?;
        out.data_mut()[t * frame_len..(t + 1) * frame_len].copy_from_slice(s.data());
    }
    Ok((out, h))
}

/// Tape-recorded layer forward. The firing op records the surrogate window so
/// backward replays both the layer-to-layer and the carried-state paths.
pub fn layer_forward_on_tape(tape: &mut GradTape, x: Var, p: &LifParams) -> Result<Var> {
    let dims = tape.dims(x);
    let frame = Dims::new(1, dims.c, dims.h, dims.w);
    let decay = 1.0 - 1.0 / p.tau;
    let drive = 1.0 / p.tau;

    let mut h = tape.constant_filled(frame, p.v_reset);
    let mut spike_frames = Vec::with_capacity(dims.t);
    for t in 0..dims.t {
        let x_t = tape.extract_t(x, t)?;
        // V = (1 - 1/tau) h + (1/tau) x + v_reset / tau
        let h_part = tape.scale(h, decay);
        let x_part = tape.scale(x_t, drive);
        let mut v = tape.add(h_part, x_part)?;
        if p.v_reset != 0.0 {
            v = tape.add_scalar(v, p.v_reset / p.tau);
        }
        let s = tape.fire(v, p.v_th, p.surrogate_width);
        // h = v_reset * s + v * (1 - s)
        let neg_s = tape.scale(s, -1.0);
        let one_minus_s = tape.add_scalar(neg_s, 1.0);
        let kept = tape.mul(v, one_minus_s)?;
        h = if p.v_reset != 0.0 {
            let reset_part = tape.scale(s, p.v_reset);
            tape.add(kept, reset_part)?
        } else {
            kept
        };
        spike_frames.push(s);
    }
    tape.stack_t(&spike_frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> SpikeTensor {
        SpikeTensor::filled(Dims::new(1, 1, 1, 1), v).unwrap()
    }

    #[test]
    fn charge_rest_stays_at_rest() {
        let p = LifParams::default();
        let v = charge(&scalar(0.0), &scalar(0.0), &p).unwrap();
        assert_eq!(v.data()[0], 0.0);
    }

    #[test]
    fn charge_euler_step() {
        // tau=2, v_reset=0: V = 0.5*h + 0.5*x = 0.5*0.6 + 0.5*1.8 = 1.2.
        let p = LifParams::default();
        let v = charge(&scalar(0.6), &scalar(1.8), &p).unwrap();
        assert!((v.data()[0] - 1.2).abs() < 1e-7);
    }

    #[test]
    fn charge_memoryless_at_tau_one() {
        let p = LifParams { tau: 1.0, ..LifParams::default() };
        let v = charge(&scalar(0.9), &scalar(0.3), &p).unwrap();
        assert_eq!(v.data()[0], 0.3);
    }

    #[test]
    fn fire_boundary_is_inclusive() {
        let p = LifParams::default();
        assert_eq!(fire(&scalar(1.2), &p).data()[0], 1.0);
        assert_eq!(fire(&scalar(1.0), &p).data()[0], 1.0);
        assert_eq!(fire(&scalar(0.5), &p).data()[0], 0.0);
    }

    #[test]
    fn reset_cases() {
        let p = LifParams::default();
        let v = scalar(1.2);
        assert_eq!(reset(&v, &scalar(1.0), &p).unwrap().data()[0], 0.0);
        assert_eq!(reset(&v, &scalar(0.0), &p).unwrap().data()[0], 1.2);
        assert!(matches!(
            reset(&v, &scalar(0.5), &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn surrogate_window_is_strict() {
        let p = LifParams::default();
        assert_eq!(surrogate_grad(&scalar(1.2), &p).data()[0], 1.0);
        assert_eq!(surrogate_grad(&scalar(2.0), &p).data()[0], 0.0);
        // Exactly at the window edge: |1.5 - 1.0| < 0.5 is false.
        assert_eq!(surrogate_grad(&scalar(1.5), &p).data()[0], 0.0);
    }

    #[test]
    fn layer_forward_zero_input_is_silent() {
        let p = LifParams::default();
        let x = SpikeTensor::zeros(Dims::new(4, 2, 2, 2)).unwrap();
        let (s, h) = layer_forward(&x, &p).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_forward_single_step() {
        // T=1, tau=2, x=2.2: V=1.1 fires, carried h resets to 0.
        let p = LifParams::default();
        let x = scalar(2.2);
        let (s, h) = layer_forward(&x, &p).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(h.data()[0], 0.0);
    }

    #[test]
    fn layer_forward_two_subthreshold_steps() {
        // x = (0.8, 0.8): V1 = 0.4 (no spike), V2 = 0.5*0.4 + 0.4 = 0.6.
        let p = LifParams::default();
        let x = SpikeTensor::from_vec(Dims::new(2, 1, 1, 1), vec![0.8, 0.8]).unwrap();
        let (s, h) = layer_forward(&x, &p).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
        assert!((h.data()[0] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = LifParams::default();
        let dims = Dims::new(5, 3, 2, 2);
        let data: Vec<f32> = (0..dims.numel()).map(|i| ((i * 37 % 17) as f32) / 6.0).collect();
        let x = SpikeTensor::from_vec(dims, data).unwrap();
        let (plain, _) = layer_forward(&x, &p).unwrap();

        let mut tape = GradTape::new();
        let xv = tape.leaf(&x);
        let out = layer_forward_on_tape(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.value(out), plain.data());
        assert!(plain.is_binary());
    }

    #[test]
    fn reset_exactness_on_carried_state() {
        // Wherever a spike occurs at timestep t, the state entering t+1 is
        // v_reset. Checked by reconstructing the per-step membranes.
        let p = LifParams::default();
        let dims = Dims::new(6, 4, 1, 1);
        let data: Vec<f32> = (0..dims.numel()).map(|i| ((i * 29 % 23) as f32) / 7.0).collect();
        let x = SpikeTensor::from_vec(dims, data).unwrap();

        let frame = Dims::new(1, dims.c, dims.h, dims.w);
        let n = frame.numel();
        let mut h = SpikeTensor::filled(frame, p.v_reset).unwrap();
        for t in 0..dims.t {
            let x_t = SpikeTensor::from_vec(frame, x.data()[t * n..(t + 1) * n].to_vec()).unwrap();
            let v = charge(&h, &x_t, &p).unwrap();
            let s = fire(&v, &p);
            h = reset(&v, &s, &p).unwrap();
            for i in 0..n {
                if s.data()[i] == 1.0 {
                    assert_eq!(h.data()[i], p.v_reset);
                }
            }
        }
    }
}
