//! Learned weights of the lifting network, their initialization, and the
//! versioned checkpoint container.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TemporalEmbedding};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::AdamState;

/// Query/key/value/output projections of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_p: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MotionLayerParams {
    pub attention: AttentionParams,
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SpaceLayerParams {
    pub local: AttentionParams,
    pub global: AttentionParams,
    pub fuse_w1: Array2<f64>,
    pub fuse_b1: Array1<f64>,
    pub fuse_w2: Array2<f64>,
    pub fuse_b2: Array1<f64>,
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All learned weights of the lifting network.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub motion: Vec<MotionLayerParams>,
    pub space: Vec<SpaceLayerParams>,
    pub decoder: DecoderParams,
    /// Trainable per-frame embedding, present only for
    /// [`TemporalEmbedding::Learned`].
    pub temporal_table: Option<Array2<f64>>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std)
}

fn attention_init(rng: &mut impl Rng, d: usize) -> AttentionParams {
    AttentionParams {
        w_q: normal_matrix(rng, d, d),
        w_k: normal_matrix(rng, d, d),
        w_v: normal_matrix(rng, d, d),
        w_p: normal_matrix(rng, d, d),
    }
}

impl ModelParameters {
    /// Fan-in scaled normal initialization, deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let motion = (0..config.motion_layers)
            .map(|_| MotionLayerParams {
                attention: attention_init(&mut rng, d),
                norm_gain: Array1::ones(d),
                norm_bias: Array1::zeros(d),
            })
            .collect();
        let space = (0..config.space_layers)
            .map(|_| SpaceLayerParams {
                local: attention_init(&mut rng, d),
                global: attention_init(&mut rng, d),
                fuse_w1: normal_matrix(&mut rng, 2 * d, d),
                fuse_b1: Array1::zeros(d),
                fuse_w2: normal_matrix(&mut rng, d, d),
                fuse_b2: Array1::zeros(d),
                norm_gain: Array1::ones(d),
                norm_bias: Array1::zeros(d),
            })
            .collect();
        let decoder = DecoderParams {
            w1: normal_matrix(&mut rng, d, d),
            b1: Array1::zeros(d),
            w2: normal_matrix(&mut rng, d, 3),
            b2: Array1::zeros(3),
        };
        let temporal_table = match config.temporal_embedding {
            TemporalEmbedding::Learned => Some(normal_matrix(&mut rng, config.max_frames, d)),
            _ => None,
        };
        Ok(ModelParameters {
            motion,
            space,
            decoder,
            temporal_table,
        })
    }

    /// Named views of every tensor, in a stable order shared with
    /// `tensors_mut`, checkpoints, and optimizer state.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn push2<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: String,
            a: &'a Array2<f64>,
        ) {
            out.push((name, vec![a.nrows(), a.ncols()], a.as_slice().unwrap()));
        }
        fn push1<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: String,
            a: &'a Array1<f64>,
        ) {
            out.push((name, vec![a.len()], a.as_slice().unwrap()));
        }
        let mut out = Vec::new();
        for (i, layer) in self.motion.iter().enumerate() {
            push2(&mut out, format!("motion.{i}.w_q"), &layer.attention.w_q);
            push2(&mut out, format!("motion.{i}.w_k"), &layer.attention.w_k);
            push2(&mut out, format!("motion.{i}.w_v"), &layer.attention.w_v);
            push2(&mut out, format!("motion.{i}.w_p"), &layer.attention.w_p);
            push1(&mut out, format!("motion.{i}.norm_gain"), &layer.norm_gain);
            push1(&mut out, format!("motion.{i}.norm_bias"), &layer.norm_bias);
        }
        for (i, layer) in self.space.iter().enumerate() {
            for (stream, attn) in [("local", &layer.local), ("global", &layer.global)] {
                push2(&mut out, format!("space.{i}.{stream}.w_q"), &attn.w_q);
                push2(&mut out, format!("space.{i}.{stream}.w_k"), &attn.w_k);
                push2(&mut out, format!("space.{i}.{stream}.w_v"), &attn.w_v);
                push2(&mut out, format!("space.{i}.{stream}.w_p"), &attn.w_p);
            }
            push2(&mut out, format!("space.{i}.fuse_w1"), &layer.fuse_w1);
            push1(&mut out, format!("space.{i}.fuse_b1"), &layer.fuse_b1);
            push2(&mut out, format!("space.{i}.fuse_w2"), &layer.fuse_w2);
            push1(&mut out, format!("space.{i}.fuse_b2"), &layer.fuse_b2);
            push1(&mut out, format!("space.{i}.norm_gain"), &layer.norm_gain);
            push1(&mut out, format!("space.{i}.norm_bias"), &layer.norm_bias);
        }
        push2(&mut out, "decoder.w1".into(), &self.decoder.w1);
        push1(&mut out, "decoder.b1".into(), &self.decoder.b1);
        push2(&mut out, "decoder.w2".into(), &self.decoder.w2);
        push1(&mut out, "decoder.b2".into(), &self.decoder.b2);
        if let Some(table) = &self.temporal_table {
            out.push((
                "temporal_table".into(),
                vec![table.nrows(), table.ncols()],
                table.as_slice().unwrap(),
            ));
        }
        out
    }

    /// Mutable flat views in the same order as [`ModelParameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, layer) in self.motion.iter_mut().enumerate() {
            out.push((format!("motion.{i}.w_q"), layer.attention.w_q.as_slice_mut().unwrap()));
            out.push((format!("motion.{i}.w_k"), layer.attention.w_k.as_slice_mut().unwrap()));
            out.push((format!("motion.{i}.w_v"), layer.attention.w_v.as_slice_mut().unwrap()));
            out.push((format!("motion.{i}.w_p"), layer.attention.w_p.as_slice_mut().unwrap()));
            out.push((format!("motion.{i}.norm_gain"), layer.norm_gain.as_slice_mut().unwrap()));
            out.push((format!("motion.{i}.norm_bias"), layer.norm_bias.as_slice_mut().unwrap()));
        }
        for (i, layer) in self.space.iter_mut().enumerate() {
            for (stream, attn) in [("local", &mut layer.local), ("global", &mut layer.global)] {
                out.push((format!("space.{i}.{stream}.w_q"), attn.w_q.as_slice_mut().unwrap()));
                out.push((format!("space.{i}.{stream}.w_k"), attn.w_k.as_slice_mut().unwrap()));
                out.push((format!("space.{i}.{stream}.w_v"), attn.w_v.as_slice_mut().unwrap()));
                out.push((format!("space.{i}.{stream}.w_p"), attn.w_p.as_slice_mut().unwrap()));
            }
            out.push((format!("space.{i}.fuse_w1"), layer.fuse_w1.as_slice_mut().unwrap()));
            out.push((format!("space.{i}.fuse_b1"), layer.fuse_b1.as_slice_mut().unwrap()));
            out.push((format!("space.{i}.fuse_w2"), layer.fuse_w2.as_slice_mut().unwrap()));
            out.push((format!("space.{i}.fuse_b2"), layer.fuse_b2.as_slice_mut().unwrap()));
            out.push((format!("space.{i}.norm_gain"), layer.norm_gain.as_slice_mut().unwrap()));
            out.push((format!("space.{i}.norm_bias"), layer.norm_bias.as_slice_mut().unwrap()));
        }
        out.push(("decoder.w1".into(), self.decoder.w1.as_slice_mut().unwrap()));
        out.push(("decoder.b1".into(), self.decoder.b1.as_slice_mut().unwrap()));
        out.push(("decoder.w2".into(), self.decoder.w2.as_slice_mut().unwrap()));
        out.push(("decoder.b2".into(), self.decoder.b2.as_slice_mut().unwrap()));
        if let Some(table) = &mut self.temporal_table {
            out.push(("temporal_table".into(), table.as_slice_mut().unwrap()));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors()
            .into_iter()
            .map(|(name, shape, values)| TensorRecord {
                name,
                shape,
                values: values.to_vec(),
            })
            .collect()
    }

    /// Rebuilds parameters from checkpoint records, validating names and
    /// shapes against a freshly initialized layout.
    pub fn from_records(config: &ModelConfig, records: &[TensorRecord]) -> Result<Self> {
        let mut params = ModelParameters::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if records.len() != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                expected.len()
            )));
        }
        for (record, (name, shape)) in records.iter().zip(expected.iter()) {
            if &record.name != name {
                return Err(Error::Format(format!(
                    "unexpected tensor {} (expected {})",
                    record.name, name
                )));
            }
            if &record.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    record.name, record.shape, shape
                )));
            }
            if record.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Format(format!(
                    "tensor {} has {} values for shape {:?}",
                    record.name,
                    record.values.len(),
                    record.shape
                )));
            }
        }
        for ((_, slot), record) in params.tensors_mut().into_iter().zip(records.iter()) {
            slot.copy_from_slice(&record.values);
        }
        Ok(params)
    }
}

/// Registers every parameter tensor on a tape, in the canonical order.
pub fn register_parameters(
    tape: &mut Tape,
    params: &ModelParameters,
    trainable: bool,
) -> ModelVars {
    let leaf2 = |tape: &mut Tape, a: &Array2<f64>| {
        tape.leaf(
            a.as_slice().unwrap().to_vec(),
            &[a.nrows(), a.ncols()],
            trainable,
        )
    };
    let leaf1 =
        |tape: &mut Tape, a: &Array1<f64>| tape.leaf(a.to_vec(), &[a.len()], trainable);

    let motion = params
        .motion
        .iter()
        .map(|layer| MotionLayerVars {
            attention: AttentionVars {
                w_q: leaf2(tape, &layer.attention.w_q),
                w_k: leaf2(tape, &layer.attention.w_k),
                w_v: leaf2(tape, &layer.attention.w_v),
                w_p: leaf2(tape, &layer.attention.w_p),
            },
            norm_gain: leaf1(tape, &layer.norm_gain),
            norm_bias: leaf1(tape, &layer.norm_bias),
        })
        .collect();
    let space = params
        .space
        .iter()
        .map(|layer| SpaceLayerVars {
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
        })
        .collect();
    let decoder = DecoderVars {
        w1: leaf2(tape, &params.decoder.w1),
        b1: leaf1(tape, &params.decoder.b1),
        w2: leaf2(tape, &params.decoder.w2),
        b2: leaf1(tape, &params.decoder.b2),
    };
    let temporal_table = params.temporal_table.as_ref().map(|t| leaf2(tape, t));
    ModelVars {
        motion,
        space,
        decoder,
        temporal_table,
    }
}

/// Gradients read back in the canonical tensor order; tensors that did not
/// participate get zeros.
pub(super) fn collect_gradients(tape: &Tape, vars: &ModelVars) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    let read = |tape: &Tape, v: Var| -> Vec<f64> {
        tape.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    };
    for (i, layer) in vars.motion.iter().enumerate() {
        out.push((format!("motion.{i}.w_q"), read(tape, layer.attention.w_q)));
        out.push((format!("motion.{i}.w_k"), read(tape, layer.attention.w_k)));
        out.push((format!("motion.{i}.w_v"), read(tape, layer.attention.w_v)));
        out.push((format!("motion.{i}.w_p"), read(tape, layer.attention.w_p)));
        out.push((format!("motion.{i}.norm_gain"), read(tape, layer.norm_gain)));
        out.push((format!("motion.{i}.norm_bias"), read(tape, layer.norm_bias)));
    }
    for (i, layer) in vars.space.iter().enumerate() {
        for (stream, attn) in [("local", &layer.local), ("global", &layer.global)] {
            out.push((format!("space.{i}.{stream}.w_q"), read(tape, attn.w_q)));
            out.push((format!("space.{i}.{stream}.w_k"), read(tape, attn.w_k)));
            out.push((format!("space.{i}.{stream}.w_v"), read(tape, attn.w_v)));
            out.push((format!("space.{i}.{stream}.w_p"), read(tape, attn.w_p)));
        }
        out.push((format!("space.{i}.fuse_w1"), read(tape, layer.fuse_w1)));
        out.push((format!("space.{i}.fuse_b1"), read(tape, layer.fuse_b1)));
        out.push((format!("space.{i}.fuse_w2"), read(tape, layer.fuse_w2)));
        out.push((format!("space.{i}.fuse_b2"), read(tape, layer.fuse_b2)));
        out.push((format!("space.{i}.norm_gain"), read(tape, layer.norm_gain)));
        out.push((format!("space.{i}.norm_bias"), read(tape, layer.norm_bias)));
    }
    out.push(("decoder.w1".into(), read(tape, vars.decoder.w1)));
    out.push(("decoder.b1".into(), read(tape, vars.decoder.b1)));
    out.push(("decoder.w2".into(), read(tape, vars.decoder.w2)));
    out.push(("decoder.b2".into(), read(tape, vars.decoder.b2)));
    if let Some(t) = vars.temporal_table {
        out.push(("temporal_table".into(), read(tape, t)));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_p: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MotionLayerVars {
    pub attention: AttentionVars,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SpaceLayerVars {
    pub local: AttentionVars,
    pub global: AttentionVars,
    pub fuse_w1: Var,
    pub fuse_b1: Var,
    pub fuse_w2: Var,
    pub fuse_b2: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub motion: Vec<MotionLayerVars>,
    pub space: Vec<SpaceLayerVars>,
    pub decoder: DecoderVars,
    pub temporal_table: Option<Var>,
}

/// One named tensor in a checkpoint, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    /// Evaluation stub that echoes the ground truth; used to validate the
    /// metric plumbing end to end.
    Oracle,
}

/// Adam moments per tensor plus the epoch counter, for training resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub epoch: usize,
    pub states: Vec<(String, AdamState)>,
}

/// Versioned parameter checkpoint. JSON round-trips are bit-exact because
/// every value is an f64 serialized with shortest-round-trip formatting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn for_model(config: &ModelConfig, params: &ModelParameters) -> Self {
        Checkpoint {
            format_version: Self::FORMAT_VERSION,
            kind: CheckpointKind::Model,
            config: config.clone(),
            tensors: params.to_records(),
            optimizer: None,
        }
    }

    pub fn oracle() -> Self {
        Checkpoint {
            format_version: Self::FORMAT_VERSION,
            kind: CheckpointKind::Oracle,
            config: ModelConfig::default(),
            tensors: Vec::new(),
            optimizer: None,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != Self::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn parameters(&self) -> Result<ModelParameters> {
        ModelParameters::from_records(&self.config, &self.tensors)
    }
}
