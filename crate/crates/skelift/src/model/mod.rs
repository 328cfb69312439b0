//! The class-agnostic lifting network: random Fourier keypoint features,
//! joint and window masks, a windowed-attention motion encoder, a two-stream
//! space encoder, and the canonical-space decoder.

mod forward;
mod params;

pub use forward::{
    decode_canonical, forward_on_tape, lift_batch_element, motion_encoder, space_encoder_layer,
    windowed_mhsa, LiftModel, ModelVars,
};
pub use params::{
    register_parameters, AttentionParams, Checkpoint, CheckpointKind, DecoderParams,
    ModelParameters, MotionLayerParams, OptimizerSnapshot, SpaceLayerParams, TensorRecord,
};

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a joint's position in time is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalEmbedding {
    /// Normalized frame index fed as the third coordinate of the random
    /// Fourier features.
    AnalyticalRff,
    /// A trainable per-frame embedding table added after encoding (x, y, 0).
    Learned,
    /// No temporal information; outputs are invariant to time shifts.
    None,
}

/// Network hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature dimension D; must be even and divisible by `heads`.
    pub feature_dim: usize,
    /// Number of windowed-attention motion layers P.
    pub motion_layers: usize,
    /// Number of two-stream space layers O.
    pub space_layers: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Temporal window radius; `None` means unbounded attention.
    pub window_radius: Option<usize>,
    /// Hard upper bound on the joint count the network accepts.
    pub max_joints: usize,
    /// Size of the learned temporal table (only used by `Learned`).
    pub max_frames: usize,
    pub rff_seed: u64,
    pub temporal_embedding: TemporalEmbedding,
    /// Run the literal multiplicative window mask instead of excluding
    /// out-of-window positions from the softmax.
    pub window_mask_literal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 256,
            motion_layers: 4,
            space_layers: 12,
            heads: 8,
            window_radius: Some(8),
            max_joints: 29,
            max_frames: 512,
            rff_seed: 0,
            temporal_embedding: TemporalEmbedding::AnalyticalRff,
            window_mask_literal: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "feature_dim must be a positive even number, got {}",
                self.feature_dim
            )));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide feature_dim ({})",
                self.heads, self.feature_dim
            )));
        }
        if self.motion_layers == 0 || self.space_layers == 0 {
            return Err(Error::Config("need at least one layer per encoder".into()));
        }
        if let Some(r) = self.window_radius {
            if r == 0 {
                return Err(Error::Config(
                    "window_radius must be >= 1 or null for unbounded".into(),
                ));
            }
        }
        if self.max_joints == 0 {
            return Err(Error::Config("max_joints must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn head_dim(&self) -> usize {
        self.feature_dim / self.heads
    }
}

/// Fixed random Fourier basis; sampled once per seed and never trained.
#[derive(Debug, Clone)]
pub struct RffBasis {
    /// (D/2) x 3 projection, sampled from a standard normal.
    pub w: Array2<f64>,
    /// (D/2) phase offsets, sampled uniformly on [0, 1/(2*pi)].
    pub b: Array1<f64>,
}

impl RffBasis {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let half = feature_dim / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((half, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let b = Array1::from_shape_fn(half, |_| {
            rng.gen_range(0.0..1.0 / (2.0 * std::f64::consts::PI))
        });
        RffBasis { w, b }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.w.nrows()
    }

    /// phi(p) = sqrt(2/D) [sin(W p + b); cos(W p + b)] for p = [x, y, t].
    pub fn encode_point(&self, p: [f64; 3]) -> Vec<f64> {
        let half = self.w.nrows();
        let d = 2 * half;
        let scale = (2.0 / d as f64).sqrt();
        let mut out = vec![0.0; d];
        for i in 0..half {
            let z = self.w[[i, 0]] * p[0] + self.w[[i, 1]] * p[1] + self.w[[i, 2]] * p[2] + self.b[i];
            out[i] = scale * z.sin();
            out[half + i] = scale * z.cos();
        }
        out
    }
}

/// Encodes a 2-D keypoint sequence plus per-frame time values into
/// D-dimensional features.
pub fn rff_encode(points: ArrayView3<f64>, times: &[f64], basis: &RffBasis) -> Result<Array3<f64>> {
    let (t_len, j_len, dim) = points.dim();
    if dim != 2 {
        return Err(Error::ShapeMismatch(format!(
            "rff_encode expects TxJx2 inputs, got last dim {dim}"
        )));
    }
    if times.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "{} time values for {} frames",
            times.len(),
            t_len
        )));
    }
    let d = basis.feature_dim();
    let mut out = Array3::zeros((t_len, j_len, d));
    for t in 0..t_len {
        for j in 0..j_len {
            let enc = basis.encode_point([points[[t, j, 0]], points[[t, j, 1]], times[t]]);
            for (k, &v) in enc.iter().enumerate() {
                out[[t, j, k]] = v;
            }
        }
    }
    Ok(out)
}

/// Normalized per-frame time values for the analytical temporal embedding:
/// the frame index scaled to [0, 1].
pub fn normalized_times(frames: usize) -> Vec<f64> {
    if frames <= 1 {
        vec![0.0; frames]
    } else {
        (0..frames).map(|t| t as f64 / (frames - 1) as f64).collect()
    }
}

/// Binary joint mask over padded slots: 1 where a joint is present, 0 for
/// absent joints and padding.
pub fn build_joint_mask(present: &[bool], padded_len: usize) -> Result<Array1<f64>> {
    if present.len() > padded_len {
        return Err(Error::TooManyJoints {
            joints: present.len(),
            max: padded_len,
        });
    }
    let mut mask = Array1::zeros(padded_len);
    for (i, &p) in present.iter().enumerate() {
        if p {
            mask[i] = 1.0;
        }
    }
    Ok(mask)
}

/// T x T binary window mask: entry (t, i) is 1 iff |t - i| <= radius.
/// `None` gives the all-ones (unbounded) mask.
pub fn build_window_mask(frames: usize, radius: Option<usize>) -> Array2<f64> {
    match radius {
        None => Array2::ones((frames, frames)),
        Some(r) => Array2::from_shape_fn((frames, frames), |(t, i)| {
            if t.abs_diff(i) <= r {
                1.0
            } else {
                0.0
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn joint_mask_marks_present_and_padded_slots() {
        let mask = build_joint_mask(&[true; 5], 8).unwrap();
        assert_eq!(mask.to_vec(), vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let all = build_joint_mask(&[true; 4], 4).unwrap();
        assert_eq!(all.to_vec(), vec![1.0; 4]);
        let none = build_joint_mask(&[false; 3], 3).unwrap();
        assert_eq!(none.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn joint_mask_rejects_overflow() {
        match build_joint_mask(&[true; 30], 29) {
            Err(Error::TooManyJoints { joints: 30, max: 29 }) => {}
            other => panic!("expected TooManyJoints, got {other:?}"),
        }
    }

    #[test]
    fn window_mask_small_cases() {
        let z = build_window_mask(3, Some(1));
        assert_eq!(
            z.into_raw_vec_and_offset().0,
            vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
        let all = build_window_mask(4, Some(3));
        assert!(all.iter().all(|&v| v == 1.0));
        let unbounded = build_window_mask(4, None);
        assert!(unbounded.iter().all(|&v| v == 1.0));
        let eye = build_window_mask(5, Some(0));
        for t in 0..5 {
            for i in 0..5 {
                assert_eq!(eye[[t, i]], if t == i { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rff_entries_respect_amplitude_bound() {
        let basis = RffBasis::new(4, 9);
        let enc = basis.encode_point([0.3, -0.8, 0.5]);
        assert_eq!(enc.len(), 4);
        let bound = (2.0_f64 / 4.0).sqrt();
        for v in enc {
            assert!(v.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn rff_is_deterministic_per_basis() {
        let basis = RffBasis::new(16, 42);
        let a = basis.encode_point([0.1, 0.2, 0.3]);
        let b = basis.encode_point([0.1, 0.2, 0.3]);
        assert_eq!(a, b);
        let basis2 = RffBasis::new(16, 42);
        assert_eq!(basis.w, basis2.w);
        assert_eq!(basis.b, basis2.b);
    }

    #[test]
    fn rff_dot_products_approximate_gaussian_kernel() {
        // phi(p) . phi(q) averaged over basis draws estimates
        // exp(-||p-q||^2 / 2); the paired sin/cos construction makes the
        // estimate independent of the phase distribution.
        let pairs = [
            ([0.0, 0.0, 0.0], [0.5, 0.0, 0.0]),
            ([0.2, -0.3, 0.1], [-0.4, 0.5, 0.3]),
            ([1.0, 0.0, 0.5], [0.0, 1.0, 0.0]),
        ];
        for (pi, (p, q)) in pairs.iter().enumerate() {
            let mut acc = 0.0;
            for draw in 0..200 {
                let basis = RffBasis::new(4096, 1000 + 200 * pi as u64 + draw);
                let ep = basis.encode_point(*p);
                let eq = basis.encode_point(*q);
                acc += ep.iter().zip(eq.iter()).map(|(&a, &b)| a * b).sum::<f64>();
            }
            let estimate = acc / 200.0;
            let dist_sq = p
                .iter()
                .zip(q.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>();
            let expected = (-dist_sq / 2.0).exp();
            assert!(
                (estimate - expected).abs() < 0.02,
                "pair {pi}: estimate {estimate}, kernel {expected}"
            );
        }
    }

    #[test]
    fn rff_encode_shapes_and_masking_inputs() {
        let basis = RffBasis::new(8, 3);
        let pts = Array3::from_shape_fn((4, 3, 2), |(t, j, k)| (t + j + k) as f64 * 0.1);
        let times = normalized_times(4);
        let enc = rff_encode(pts.view(), &times, &basis).unwrap();
        assert_eq!(enc.dim(), (4, 3, 8));
        assert_abs_diff_eq!(times[0], 0.0);
        assert_abs_diff_eq!(times[3], 1.0);
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = ModelConfig::default();
        c.feature_dim = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.window_radius = Some(0);
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
