//! Convolutional downsampling frontend: two kernel-3 / stride-2 conv blocks
//! with ReLU, then a linear projection to model dimension. Overall time
//! reduction factor 4.
//!
//! Convolutions are realized as gather (im2col) + matmul so the tape's
//! existing primitives carry the gradients.

use crate::dataio::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::params::{ParamInit, ParamStore};
use crate::numerics::tape::{NodeId, Tape};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;

/// Output length of one conv stage: `floor((t - 3) / 2) + 1`.
pub fn conv_out_len(t: usize) -> usize {
    debug_assert!(t >= KERNEL);
    (t - KERNEL) / STRIDE + 1
}

/// Smallest input length that survives both stages with output >= 1.
pub const MIN_FRAMES: usize = 7;

/// Frames after both stages, or an error naming the minimum.
pub fn downsampled_len(t: usize) -> Result<usize> {
    if t < MIN_FRAMES {
        return Err(Error::InputTooShort {
            got: t,
            min: MIN_FRAMES,
        });
    }
    Ok(conv_out_len(conv_out_len(t)))
}

#[derive(Debug, Clone)]
pub struct ConvFrontend {
    pub prefix: String,
    pub feature_dim: usize,
    pub channels: usize,
    pub d: usize,
}

impl ConvFrontend {
    pub fn new(prefix: impl Into<String>, feature_dim: usize, d: usize) -> Result<Self> {
        if feature_dim < MIN_FRAMES {
            return Err(Error::Config(format!(
                "feature dim {feature_dim} too small for two kernel-{KERNEL} stride-{STRIDE} convolutions (need >= {MIN_FRAMES})"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            feature_dim,
            channels: d,
            d,
        })
    }

    fn freq_after(&self) -> (usize, usize) {
        let f1 = conv_out_len(self.feature_dim);
        (f1, conv_out_len(f1))
    }

    pub fn init(&self, store: &mut ParamStore, init: &ParamInit) {
        let c = self.channels;
        // Kernels stored flattened for im2col: [ic*3*3 x oc].
        init.matrix_with_fan_in(store, &format!("{}.conv1.w", self.prefix), KERNEL * KERNEL, c, KERNEL * KERNEL);
        init.zeros(store, &format!("{}.conv1.b", self.prefix), vec![c]);
        init.matrix_with_fan_in(
            store,
            &format!("{}.conv2.w", self.prefix),
            c * KERNEL * KERNEL,
            c,
            c * KERNEL * KERNEL,
        );
        init.zeros(store, &format!("{}.conv2.b", self.prefix), vec![c]);
        let (_, f2) = self.freq_after();
        init.matrix(store, &format!("{}.proj.w", self.prefix), f2 * c, self.d);
        init.zeros(store, &format!("{}.proj.b", self.prefix), vec![self.d]);
    }

    /// `[T x F]` frames to `[T' x d]`; errors when `T` is too short.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureSequence,
    ) -> Result<NodeId> {
        let (t, f) = (features.frames(), features.dim());
        if f != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "conv_downsample",
                lhs: vec![t, f],
                rhs: vec![t, self.feature_dim],
            });
        }
        downsampled_len(t)?;
        let c = self.channels;
        let x = tape.input(features.to_tensor());

        // Stage 1: single input channel.
        let t1 = conv_out_len(t);
        let f1 = conv_out_len(f);
        let idx = im2col_indices(1, t, f, t1, f1);
        let cols = tape.gather(x, idx, vec![t1 * f1, KERNEL * KERNEL])?;
        let w1 = tape.param(store, &format!("{}.conv1.w", self.prefix))?;
        let b1 = tape.param(store, &format!("{}.conv1.b", self.prefix))?;
        let y1 = tape.linear(cols, w1, Some(b1))?;
        let y1 = tape.relu(y1); // [t1*f1 x c]

        // Rearrange to channel-major [c x t1*f1] for the second im2col.
        let y1 = tape.transpose(y1)?;

        // Stage 2: c input channels over the [t1 x f1] grid.
        let t2 = conv_out_len(t1);
        let f2 = conv_out_len(f1);
        let idx = im2col_indices(c, t1, f1, t2, f2);
        let cols = tape.gather(y1, idx, vec![t2 * f2, c * KERNEL * KERNEL])?;
        let w2 = tape.param(store, &format!("{}.conv2.w", self.prefix))?;
        let b2 = tape.param(store, &format!("{}.conv2.b", self.prefix))?;
        let y2 = tape.linear(cols, w2, Some(b2))?;
        let y2 = tape.relu(y2); // [t2*f2 x c]

        // Regroup rows: out[t, fc*c + ch] = y2[(t*f2 + fc), ch].
        let mut idx = Vec::with_capacity(t2 * f2 * c);
        for _t in 0..t2 {
            for fc in 0..f2 {
                for ch in 0..c {
                    idx.push((_t * f2 + fc) * c + ch);
                }
            }
        }
        let flat = tape.gather(y2, idx, vec![t2, f2 * c])?;
        let wp = tape.param(store, &format!("{}.proj.w", self.prefix))?;
        let bp = tape.param(store, &format!("{}.proj.b", self.prefix))?;
        tape.linear(flat, wp, Some(bp))
    }
}

/// Gather indices for a kernel-3/stride-2 valid convolution over a
/// channel-major `[ic x h x w]` input; output rows are (oh, ow) positions,
/// columns are (ic, kh, kw) taps.
fn im2col_indices(ic: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(oh * ow * ic * KERNEL * KERNEL);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..ic {
                for a in 0..KERNEL {
                    for b in 0..KERNEL {
                        let r = i * STRIDE + a;
                        let c = j * STRIDE + b;
                        idx.push(ch * h * w + r * w + c);
                    }
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_arithmetic() {
        assert_eq!(downsampled_len(67).unwrap(), 16); // 67 -> 33 -> 16
        assert_eq!(downsampled_len(7).unwrap(), 1); // 7 -> 3 -> 1
    }

    #[test]
    fn too_short_input_names_minimum() {
        match downsampled_len(6) {
            Err(Error::InputTooShort { got, min }) => {
                assert_eq!(got, 6);
                assert_eq!(min, 7);
            }
            other => panic!("expected InputTooShort, got {other:?}"),
        }
    }
}
