//! Tape-level forward pass of the lifting network.
//!
//! The motion encoder runs windowed multi-head self-attention over the time
//! axis per joint; the space encoder runs two simultaneous attention streams
//! over the joint axis per frame (adjacency-restricted and global) fused by
//! an MLP; a per-joint MLP decodes canonical 3-D coordinates. Padded joints
//! are excluded from every softmax normalization and are re-zeroed after
//! each layer, so their pad values cannot influence present joints.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};

use super::params::{AttentionVars, ModelVars, MotionLayerVars, SpaceLayerVars};
use super::{
    build_window_mask, normalized_times, register_parameters, rff_encode, ModelConfig,
    ModelParameters, RffBasis, TemporalEmbedding,
};
use crate::autodiff::{MaskMode, Tape, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn mask_mode(config: &ModelConfig) -> MaskMode {
    if config.window_mask_literal {
        MaskMode::MultiplyLogits
    } else {
        MaskMode::Exclude
    }
}

/// Multi-head attention over the middle axis of `x: [B, S, D]` with a
/// constant `[S, S]` mask shared by all batch rows and heads. Returns the
/// projected output and the attention weights `[B * H, S, S]`.
fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    attn: &AttentionVars,
    heads: usize,
    mask: &[f64],
    mode: MaskMode,
) -> (Var, Var) {
    let shape = tape.shape(x).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |tape: &mut Tape, v: Var| {
        let r = tape.reshape(v, &[b, s, heads, dh]);
        let p = tape.permute(r, &[0, 2, 1, 3]);
        tape.reshape(p, &[b * heads, s, dh])
    };
    let q_full = tape.matmul(x, attn.w_q);
    let k_full = tape.matmul(x, attn.w_k);
    let v_full = tape.matmul(x, attn.w_v);
    let q = split(tape, q_full);
    let k = split(tape, k_full);
    let v = split(tape, v_full);

    let k_t = tape.permute(k, &[0, 2, 1]);
    let logits_raw = tape.bmm(q, k_t);
    let sigma = (d as f64 / heads as f64).sqrt();
    let logits = tape.scale(logits_raw, 1.0 / sigma);
    let weights = tape.masked_softmax_last(logits, mask, mode);
    let ctx = tape.bmm(weights, v);

    let merged = tape.reshape(ctx, &[b, heads, s, dh]);
    let swapped = tape.permute(merged, &[0, 2, 1, 3]);
    let joined = tape.reshape(swapped, &[b, s, d]);
    let out = tape.matmul(joined, attn.w_p);
    (out, weights)
}

/// One windowed-attention motion layer over `x: [J, T, D]`: masked MHSA,
/// residual add, layer norm, then padded-joint rows are zeroed.
pub fn windowed_mhsa_on_tape(
    tape: &mut Tape,
    x: Var,
    window_mask: &Array2<f64>,
    joint_mask: &Array1<f64>,
    layer: &MotionLayerVars,
    heads: usize,
    mode: MaskMode,
) -> (Var, Var) {
    let mask_flat: Vec<f64> = window_mask.iter().cloned().collect();
    let (attn_out, weights) = multi_head_attention(tape, x, &layer.attention, heads, &mask_flat, mode);
    let res = tape.add(x, attn_out);
    let normed = tape.layer_norm_last(res, layer.norm_gain, layer.norm_bias, LN_EPS);
    let j = joint_mask.len();
    let m = tape.constant(joint_mask.to_vec(), &[j, 1, 1]);
    let out = tape.mul(normed, m);
    (out, weights)
}

/// Standalone single-layer entry point: applies one windowed MHSA layer to
/// `features: [J, T, D]` and returns the output with the attention weights.
pub fn windowed_mhsa(
    features: ArrayView3<f64>,
    window_mask: &Array2<f64>,
    joint_mask: &Array1<f64>,
    layer: &super::MotionLayerParams,
    heads: usize,
    literal_mask: bool,
) -> Result<(Array3<f64>, Vec<f64>)> {
    let (j, t, d) = features.dim();
    if window_mask.dim() != (t, t) {
        return Err(Error::ShapeMismatch(format!(
            "window mask {:?} for {t} frames",
            window_mask.dim()
        )));
    }
    if joint_mask.len() != j {
        return Err(Error::ShapeMismatch(format!(
            "joint mask of {} for {j} joints",
            joint_mask.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.iter().cloned().collect(), &[j, t, d]);
    let vars = single_motion_vars(&mut tape, layer);
    let mode = if literal_mask {
        MaskMode::MultiplyLogits
    } else {
        MaskMode::Exclude
    };
    let (out, weights) = windowed_mhsa_on_tape(&mut tape, x, window_mask, joint_mask, &vars, heads, mode);
    let out_arr = Array3::from_shape_vec((j, t, d), tape.value(out).to_vec())
        .expect("forward output shape");
    Ok((out_arr, tape.value(weights).to_vec()))
}

fn single_motion_vars(tape: &mut Tape, layer: &super::MotionLayerParams) -> MotionLayerVars {
    let leaf2 = |tape: &mut Tape, a: &Array2<f64>| {
        tape.constant(a.as_slice().unwrap().to_vec(), &[a.nrows(), a.ncols()])
    };
    MotionLayerVars {
        attention: AttentionVars {
            w_q: leaf2(tape, &layer.attention.w_q),
            w_k: leaf2(tape, &layer.attention.w_k),
            w_v: leaf2(tape, &layer.attention.w_v),
            w_p: leaf2(tape, &layer.attention.w_p),
        },
        norm_gain: tape.constant(layer.norm_gain.to_vec(), &[layer.norm_gain.len()]),
        norm_bias: tape.constant(layer.norm_bias.to_vec(), &[layer.norm_bias.len()]),
    }
}

/// The motion encoder: transpose to `[J, T, D]`, apply the stack of
/// windowed layers, transpose back to `[T, J, D]`.
pub fn motion_encoder_on_tape(
    tape: &mut Tape,
    features: Var,
    window_mask: &Array2<f64>,
    joint_mask: &Array1<f64>,
    layers: &[MotionLayerVars],
    heads: usize,
    mode: MaskMode,
) -> Var {
    let mut x = tape.permute(features, &[1, 0, 2]);
    for layer in layers {
        let (out, _) = windowed_mhsa_on_tape(tape, x, window_mask, joint_mask, layer, heads, mode);
        x = out;
    }
    tape.permute(x, &[1, 0, 2])
}

/// Array-level motion encoder for `features: [T, J, D]`.
pub fn motion_encoder(
    features: ArrayView3<f64>,
    window_mask: &Array2<f64>,
    joint_mask: &Array1<f64>,
    layers: &[super::MotionLayerParams],
    heads: usize,
    literal_mask: bool,
) -> Result<Array3<f64>> {
    let (t, j, d) = features.dim();
    let mut tape = Tape::new();
    let x = tape.constant(features.iter().cloned().collect(), &[t, j, d]);
    let vars: Vec<MotionLayerVars> = layers
        .iter()
        .map(|l| single_motion_vars(&mut tape, l))
        .collect();
    let mode = if literal_mask {
        MaskMode::MultiplyLogits
    } else {
        MaskMode::Exclude
    };
    let out = motion_encoder_on_tape(&mut tape, x, window_mask, joint_mask, &vars, heads, mode);
    Ok(Array3::from_shape_vec((t, j, d), tape.value(out).to_vec()).expect("shape"))
}

/// Attention masks over the joint axis: the local stream sees graph
/// neighbours (adjacency plus self-loops) of present joints, the global
/// stream sees all present joints.
fn joint_attention_masks(adjacency: &Array2<f64>, joint_mask: &Array1<f64>) -> (Vec<f64>, Vec<f64>) {
    let j = joint_mask.len();
    let mut local = vec![0.0; j * j];
    let mut global = vec![0.0; j * j];
    for q in 0..j {
        for k in 0..j {
            let present = joint_mask[k];
            global[q * j + k] = present;
            let adjacent = if q == k { 1.0 } else { adjacency[[q, k]] };
            local[q * j + k] = adjacent * present;
        }
    }
    (local, global)
}

/// One space-encoder layer over `x: [T, J, D]`: local (adjacency-masked)
/// and global attention streams concatenated and fused by an MLP, then
/// residual add, layer norm, and padded-joint zeroing.
pub fn space_encoder_layer_on_tape(
    tape: &mut Tape,
    x: Var,
    adjacency: &Array2<f64>,
    joint_mask: &Array1<f64>,
    layer: &SpaceLayerVars,
    heads: usize,
) -> Var {
    let (local_mask, global_mask) = joint_attention_masks(adjacency, joint_mask);
    let (local_out, _) = multi_head_attention(tape, x, &layer.local, heads, &local_mask, MaskMode::Exclude);
    let (global_out, _) =
        multi_head_attention(tape, x, &layer.global, heads, &global_mask, MaskMode::Exclude);
    let cat = tape.concat_last(local_out, global_out);
    let h_lin = tape.matmul(cat, layer.fuse_w1);
    let h_bias = tape.add(h_lin, layer.fuse_b1);
    let h = tape.gelu(h_bias);
    let fused_lin = tape.matmul(h, layer.fuse_w2);
    let fused = tape.add(fused_lin, layer.fuse_b2);
    let res = tape.add(x, fused);
    let normed = tape.layer_norm_last(res, layer.norm_gain, layer.norm_bias, LN_EPS);
    let j = joint_mask.len();
    let m = tape.constant(joint_mask.to_vec(), &[j, 1]);
    tape.mul(normed, m)
}

/// Array-level single space layer for tests and composition.
pub fn space_encoder_layer(
    features: ArrayView3<f64>,
    adjacency: ArrayView2<f64>,
    joint_mask: &Array1<f64>,
    layer: &super::SpaceLayerParams,
    heads: usize,
) -> Result<Array3<f64>> {
    let (t, j, d) = features.dim();
    if adjacency.dim() != (j, j) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {:?} for {j} joints",
            adjacency.dim()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.iter().cloned().collect(), &[t, j, d]);
    let vars = single_space_vars(&mut tape, layer);
    let adj = adjacency.to_owned();
    let out = space_encoder_layer_on_tape(&mut tape, x, &adj, joint_mask, &vars, heads);
    Ok(Array3::from_shape_vec((t, j, d), tape.value(out).to_vec()).expect("shape"))
}

fn single_space_vars(tape: &mut Tape, layer: &super::SpaceLayerParams) -> SpaceLayerVars {
    let leaf2 = |tape: &mut Tape, a: &Array2<f64>| {
        tape.constant(a.as_slice().unwrap().to_vec(), &[a.nrows(), a.ncols()])
    };
    let leaf1 = |tape: &mut Tape, a: &Array1<f64>| tape.constant(a.to_vec(), &[a.len()]);
    SpaceLayerVars {
        local: AttentionVars {
            w_q: leaf2(tape, &layer.local.w_q),
            w_k: leaf2(tape, &layer.local.w_k),
            w_v: leaf2(tape, &layer.local.w_v),
            w_p: leaf2(tape, &layer.local.w_p),
        },
        global: AttentionVars {
            w_q: leaf2(tape, &layer.global.w_q),
            w_k: leaf2(tape, &layer.global.w_k),
            w_v: leaf2(tape, &layer.global.w_v),
            w_p: leaf2(tape, &layer.global.w_p),
        },
        fuse_w1: leaf2(tape, &layer.fuse_w1),
        fuse_b1: leaf1(tape, &layer.fuse_b1),
        fuse_w2: leaf2(tape, &layer.fuse_w2),
        fuse_b2: leaf1(tape, &layer.fuse_b2),
        norm_gain: leaf1(tape, &layer.norm_gain),
        norm_bias: leaf1(tape, &layer.norm_bias),
    }
}

/// Per-joint decoder MLP: D -> D -> 3 with a pointwise nonlinearity, then
/// padded joints are zeroed.
pub fn decode_canonical_on_tape(
    tape: &mut Tape,
    x: Var,
    joint_mask: &Array1<f64>,
    decoder: &super::params::DecoderVars,
) -> Var {
    let h_lin = tape.matmul(x, decoder.w1);
    let h_bias = tape.add(h_lin, decoder.b1);
    let h = tape.gelu(h_bias);
    let y_lin = tape.matmul(h, decoder.w2);
    let y = tape.add(y_lin, decoder.b2);
    let j = joint_mask.len();
    let m = tape.constant(joint_mask.to_vec(), &[j, 1]);
    tape.mul(y, m)
}

/// Array-level decoder for `features: [T, J, D]`.
pub fn decode_canonical(
    features: ArrayView3<f64>,
    joint_mask: &Array1<f64>,
    decoder: &super::DecoderParams,
) -> Result<Array3<f64>> {
    let (t, j, d) = features.dim();
    let mut tape = Tape::new();
    let x = tape.constant(features.iter().cloned().collect(), &[t, j, d]);
    let vars = super::params::DecoderVars {
        w1: tape.constant(decoder.w1.as_slice().unwrap().to_vec(), &[d, decoder.w1.ncols()]),
        b1: tape.constant(decoder.b1.to_vec(), &[decoder.b1.len()]),
        w2: tape.constant(
            decoder.w2.as_slice().unwrap().to_vec(),
            &[decoder.w2.nrows(), decoder.w2.ncols()],
        ),
        b2: tape.constant(decoder.b2.to_vec(), &[decoder.b2.len()]),
    };
    let out = decode_canonical_on_tape(&mut tape, x, joint_mask, &vars);
    Ok(Array3::from_shape_vec((t, j, 3), tape.value(out).to_vec()).expect("shape"))
}

/// Full forward pass on an existing tape: RFF features (computed outside
/// the tape; inputs carry no gradient) through the motion encoder, the
/// space-encoder stack, and the decoder. Returns the `[T, J, 3]` canonical
/// prediction.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    basis: &RffBasis,
    keypoints: ArrayView3<f64>,
    joint_mask: &Array1<f64>,
    adjacency: &Array2<f64>,
) -> Result<Var> {
    let (t_len, j_len, dim) = keypoints.dim();
    if dim != 2 {
        return Err(Error::ShapeMismatch(format!(
            "keypoints must be TxJx2, got last dim {dim}"
        )));
    }
    if j_len > config.max_joints {
        return Err(Error::TooManyJoints {
            joints: j_len,
            max: config.max_joints,
        });
    }
    if joint_mask.len() != j_len {
        return Err(Error::ShapeMismatch(format!(
            "joint mask of {} for {j_len} joints",
            joint_mask.len()
        )));
    }
    if adjacency.dim() != (j_len, j_len) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {:?} for {j_len} joints",
            adjacency.dim()
        )));
    }

    let times = match config.temporal_embedding {
        TemporalEmbedding::AnalyticalRff => normalized_times(t_len),
        TemporalEmbedding::Learned | TemporalEmbedding::None => vec![0.0; t_len],
    };
    let mut encoded = rff_encode(keypoints, &times, basis)?;
    // Padded joints must enter the network as all-zero rows.
    for t in 0..t_len {
        for j in 0..j_len {
            if joint_mask[j] == 0.0 {
                for k in 0..config.feature_dim {
                    encoded[[t, j, k]] = 0.0;
                }
            }
        }
    }

    let mut features = tape.constant(
        encoded.into_raw_vec_and_offset().0,
        &[t_len, j_len, config.feature_dim],
    );
    if config.temporal_embedding == TemporalEmbedding::Learned {
        if t_len > config.max_frames {
            return Err(Error::Config(format!(
                "sequence of {t_len} frames exceeds the learned temporal table ({})",
                config.max_frames
            )));
        }
        let table = vars
            .temporal_table
            .ok_or_else(|| Error::Config("learned temporal embedding without a table".into()))?;
        let rows = tape.narrow(table, 0, 0, t_len);
        let per_frame = tape.reshape(rows, &[t_len, 1, config.feature_dim]);
        let added = tape.add(features, per_frame);
        let j = joint_mask.len();
        let m = tape.constant(joint_mask.to_vec(), &[j, 1]);
        features = tape.mul(added, m);
    }

    let window_mask = build_window_mask(t_len, config.window_radius);
    let mode = mask_mode(config);
    let motion_out = motion_encoder_on_tape(
        tape,
        features,
        &window_mask,
        joint_mask,
        &vars.motion,
        config.heads,
        mode,
    );
    let mut x = motion_out;
    for layer in &vars.space {
        x = space_encoder_layer_on_tape(tape, x, adjacency, joint_mask, layer, config.heads);
    }
    Ok(decode_canonical_on_tape(tape, x, joint_mask, &vars.decoder))
}

/// Runs the forward pass for one (possibly padded) batch element without
/// recording gradients.
pub fn lift_batch_element(
    config: &ModelConfig,
    basis: &RffBasis,
    params: &ModelParameters,
    keypoints: ArrayView3<f64>,
    joint_mask: &Array1<f64>,
    adjacency: &Array2<f64>,
) -> Result<Array3<f64>> {
    let mut tape = Tape::new();
    let vars = register_parameters(&mut tape, params, false);
    let out = forward_on_tape(&mut tape, &vars, config, basis, keypoints, joint_mask, adjacency)?;
    let (t, j, _) = keypoints.dim();
    let values = tape.value(out).to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lift output".into()));
    }
    Ok(Array3::from_shape_vec((t, j, 3), values).expect("shape"))
}

/// A lifting network bundled with its configuration and fixed RFF basis.
#[derive(Debug, Clone)]
pub struct LiftModel {
    pub config: ModelConfig,
    pub basis: RffBasis,
    pub params: ModelParameters,
}

impl LiftModel {
    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig, param_seed: u64) -> Result<Self> {
        config.validate()?;
        let basis = RffBasis::new(config.feature_dim, config.rff_seed);
        let params = ModelParameters::init(&config, param_seed)?;
        Ok(LiftModel {
            config,
            basis,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let basis = RffBasis::new(config.feature_dim, config.rff_seed);
        Ok(LiftModel {
            config,
            basis,
            params,
        })
    }

    /// Lifts a normalized 2-D keypoint sequence (zeros at absent entries)
    /// to canonical 3-D coordinates.
    pub fn lift(
        &self,
        keypoints: ArrayView3<f64>,
        joint_mask: &Array1<f64>,
        adjacency: ArrayView2<f64>,
    ) -> Result<Array3<f64>> {
        let adj = adjacency.to_owned();
        lift_batch_element(
            &self.config,
            &self.basis,
            &self.params,
            keypoints,
            joint_mask,
            &adj,
        )
    }
}
