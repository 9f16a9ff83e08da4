//! The classifier: patch embedding, encoder stack, hybrid sequencer, dense
//! head, assembled over one tape per batch.

pub mod blocks;
pub mod config;
pub mod params;
pub mod patches;

use std::collections::BTreeMap;

use thiserror::Error;

pub use blocks::{ForwardCtx, Phase};
pub use config::{ConfigError, EncoderConfig, ModelSpec, PatchConfig, Preset, SequencerConfig, Task};
pub use params::{schema, ParamSchema, Parameters, SchemaError};

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Element, Tensor, TensorError};
use blocks::{
    encoder_block, hybrid_sequencer, prediction_head, AttentionWeights, BatchNormBundle,
    BiLstmWeights, BnWeights, EncoderBlockWeights, LayerNormWeights, LstmDirWeights, MlpWeights,
    SequencerWeights,
};

/// Exponential-average momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch shape {found:?} does not match expected {expected:?}")]
    BatchShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("batch norm stats {0} are unpopulated; inference needs a trained checkpoint")]
    BnStatsUnpopulated(String),
    #[error("{0}")]
    Invalid(String),
}

/// A completed forward pass: the tape, the probability node, the tape ids of
/// every bound parameter, pending running-stat updates (train mode), and any
/// traced attention matrices.
pub struct ForwardPass<E: Element> {
    pub tape: Tape<E>,
    pub probs: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub bn_updates: Vec<(String, Tensor<E>)>,
    pub attention: Vec<Tensor<E>>,
}

impl<E: Element> ForwardPass<E> {
    pub fn probs_tensor(&self) -> &Tensor<E> {
        self.tape.value(self.probs)
    }
}

/// Run the model on a normalized `[B, H, W, C]` batch.
///
/// Train mode records batch-norm updates for the caller to apply; infer mode
/// normalizes with the stored running statistics and requires them to be
/// populated.
pub fn forward<E: Element>(
    spec: &ModelSpec,
    params: &Parameters<E>,
    batch: &Tensor<E>,
    mut ctx: ForwardCtx<E>,
) -> Result<ForwardPass<E>, ModelError> {
    spec.validate()?;
    params.validate_schema(spec)?;
    if batch.rank() != 4 || batch.shape()[1..] != [spec.patch.h, spec.patch.w, spec.patch.c] {
        return Err(ModelError::BatchShape {
            expected: vec![0, spec.patch.h, spec.patch.w, spec.patch.c],
            found: batch.shape().to_vec(),
        });
    }
    let b = batch.shape()[0];
    if b == 0 {
        return Err(ModelError::Invalid("empty batch".into()));
    }

    let mut tape = Tape::new();
    let mut param_nodes = BTreeMap::new();
    for (name, tensor) in params.iter() {
        param_nodes.insert(name.to_string(), tape.leaf(tensor.clone()));
    }
    let pn = |name: &str| -> NodeId { param_nodes[name] };

    // Patch embedding: flatten, project, prepend class token, add positions.
    let n = spec.patch.num_patches();
    let tokens = spec.tokens();
    let patch_rows = tape.leaf(patches::extract_patches_batch(batch, &spec.patch)?);
    let proj = tape.matmul(patch_rows, pn("patch/proj_w"))?;
    let proj = tape.add_row(proj, pn("patch/proj_b"))?;
    let mut per_sample = Vec::with_capacity(b);
    for s in 0..b {
        let tok = tape.slice_rows(proj, s * n, n)?;
        let tok = if spec.encoder.class_token {
            tape.concat_rows(vec![pn("patch/cls"), tok])?
        } else {
            tok
        };
        per_sample.push(tape.add(tok, pn("patch/pos"))?);
    }
    let mut x = tape.concat_rows(per_sample)?;

    for layer in 0..spec.encoder.layers {
        let w = encoder_weights(&pn, layer);
        x = encoder_block(
            &mut tape,
            x,
            &w,
            b,
            tokens,
            spec.encoder.heads,
            spec.encoder.dropout,
            &mut ctx,
        )?;
    }
    x = tape.layer_norm_rows(x, pn("enc/final_ln_g"), pn("enc/final_ln_b"), blocks::LN_EPS)?;

    // The sequencer consumes the patch tokens; the class token is dropped.
    let seq_in = if spec.encoder.class_token {
        let idx: Vec<usize> = (0..b)
            .flat_map(|s| (1..tokens).map(move |t| s * tokens + t))
            .collect();
        tape.gather_rows(x, idx)?
    } else {
        x
    };

    let seq_w = sequencer_weights(&mut tape, &pn, params, spec)?;
    let seq_out = hybrid_sequencer(
        &mut tape,
        seq_in,
        &seq_w,
        b,
        n,
        spec.sequencer.units1,
        spec.sequencer.units2,
        spec.sequencer.bn_eps,
        ctx.phase,
    )?;

    let probs = prediction_head(&mut tape, seq_out.pooled, pn("head/w"), pn("head/b"), spec.task)?;

    let mut bn_updates = Vec::new();
    if ctx.phase == Phase::Train {
        fold_bn_update(params, "seq/bn1", seq_out.bn1_stats, &mut bn_updates);
        fold_bn_update(params, "seq/bn2", seq_out.bn2_stats, &mut bn_updates);
    }

    Ok(ForwardPass {
        tape,
        probs,
        param_nodes,
        bn_updates,
        attention: ctx.attn_trace.take().unwrap_or_default(),
    })
}

/// Apply the running-stat updates returned by a train-mode forward pass.
pub fn apply_bn_updates<E: Element>(params: &mut Parameters<E>, updates: Vec<(String, Tensor<E>)>) {
    for (name, tensor) in updates {
        params.set(&name, tensor);
    }
}

fn fold_bn_update<E: Element>(
    params: &Parameters<E>,
    prefix: &str,
    stats: Option<(Vec<E>, Vec<E>)>,
    out: &mut Vec<(String, Tensor<E>)>,
) {
    let Some((mean, var)) = stats else { return };
    let momentum = E::from_f64(BN_MOMENTUM);
    let one_minus = E::one() - momentum;
    let rm = params.get(&format!("{prefix}_rm"));
    let rv = params.get(&format!("{prefix}_rv"));
    let new_rm: Vec<E> = rm
        .data()
        .iter()
        .zip(&mean)
        .map(|(&r, &m)| r * momentum + m * one_minus)
        .collect();
    let new_rv: Vec<E> = rv
        .data()
        .iter()
        .zip(&var)
        .map(|(&r, &v)| r * momentum + v * one_minus)
        .collect();
    let count = params.get(&format!("{prefix}_n")).data()[0] + E::one();
    out.push((
        format!("{prefix}_rm"),
        Tensor::new(rm.shape().to_vec(), new_rm).expect("bn shape"),
    ));
    out.push((
        format!("{prefix}_rv"),
        Tensor::new(rv.shape().to_vec(), new_rv).expect("bn shape"),
    ));
    out.push((format!("{prefix}_n"), Tensor::scalar(count)));
}

pub(crate) fn encoder_weights(pn: &dyn Fn(&str) -> NodeId, layer: usize) -> EncoderBlockWeights {
    let p = |suffix: &str| pn(&format!("enc/{layer}/{suffix}"));
    EncoderBlockWeights {
        ln1: LayerNormWeights {
            gamma: p("ln1_g"),
            beta: p("ln1_b"),
        },
        attn: AttentionWeights {
            wq: p("attn_wq"),
            bq: p("attn_bq"),
            wk: p("attn_wk"),
            bk: p("attn_bk"),
            wv: p("attn_wv"),
            bv: p("attn_bv"),
            wo: p("attn_wo"),
            bo: p("attn_bo"),
        },
        ln2: LayerNormWeights {
            gamma: p("ln2_g"),
            beta: p("ln2_b"),
        },
        mlp: MlpWeights {
            w1: p("mlp_w1"),
            b1: p("mlp_b1"),
            w2: p("mlp_w2"),
            b2: p("mlp_b2"),
        },
    }
}

pub(crate) fn sequencer_weights<E: Element>(
    _tape: &mut Tape<E>,
    pn: &dyn Fn(&str) -> NodeId,
    params: &Parameters<E>,
    spec: &ModelSpec,
) -> Result<SequencerWeights<E>, ModelError> {
    let bundle = |prefix: &str| -> BatchNormBundle<E> {
        BatchNormBundle {
            name: prefix.to_string(),
            w: BnWeights {
                gamma: pn(&format!("{prefix}_g")),
                beta: pn(&format!("{prefix}_b")),
            },
            running_mean: params.get(&format!("{prefix}_rm")).clone(),
            running_var: params.get(&format!("{prefix}_rv")).clone(),
            populated: params.get(&format!("{prefix}_n")).data()[0] > E::zero(),
        }
    };
    let lstm = |prefix: &str| -> BiLstmWeights {
        let dir = |d: &str| LstmDirWeights {
            wx: pn(&format!("{prefix}/{d}/wx")),
            wh: pn(&format!("{prefix}/{d}/wh")),
            bias: pn(&format!("{prefix}/{d}/bias")),
        };
        BiLstmWeights {
            fwd: dir("fwd"),
            bwd: dir("bwd"),
        }
    };
    let _ = spec;
    Ok(SequencerWeights {
        bn1: bundle("seq/bn1"),
        lstm1: lstm("seq/lstm1"),
        bn2: bundle("seq/bn2"),
        lstm2: lstm("seq/lstm2"),
    })
}

/// Single-image patch embedding, exposed for inspection and tests: returns
/// the `[(N+1), D]` (or `[N, D]` without a class token) embedded sequence.
pub fn embed_patches_single<E: Element>(
    spec: &ModelSpec,
    params: &Parameters<E>,
    img: &Tensor<E>,
) -> Result<Tensor<E>, ModelError> {
    let mut tape = Tape::new();
    let rows = tape.leaf(patches::extract_patches(img, &spec.patch)?);
    let w = tape.leaf(params.get("patch/proj_w").clone());
    let bvec = tape.leaf(params.get("patch/proj_b").clone());
    let proj = tape.matmul(rows, w)?;
    let proj = tape.add_row(proj, bvec)?;
    let tok = if spec.encoder.class_token {
        let cls = tape.leaf(params.get("patch/cls").clone());
        tape.concat_rows(vec![cls, proj])?
    } else {
        proj
    };
    let pos = tape.leaf(params.get("patch/pos").clone());
    let out = tape.add(tok, pos)?;
    Ok(tape.value(out).clone())
}
