//! Tape-level builders for the three architectural blocks: the patch-attention
//! encoder, the hybrid sequencer (batch-normalized BiLSTMs with three skip
//! connections realized as two concatenation levels), and the dense heads.
//!
//! Builders operate on `[B*T, F]` matrices in sample-major row order and take
//! their weights as tape nodes, so the same code path serves training,
//! inference, and the gradient-check harness.

use rand_chacha::ChaCha8Rng;

use crate::model::ModelError;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

/// Layer-norm stabilizer shared by all norm sites in the encoder.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gamma: NodeId,
    pub beta: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlockWeights {
    pub ln1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmDirWeights {
    /// `[F, 4U]` input kernel, gate blocks ordered [input|forget|cell|output].
    pub wx: NodeId,
    /// `[U, 4U]` recurrent kernel.
    pub wh: NodeId,
    /// `[4U]` bias.
    pub bias: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmWeights {
    pub fwd: LstmDirWeights,
    pub bwd: LstmDirWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct BnWeights {
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Batch-norm weights plus the running statistics they normalize with at
/// inference time.
pub struct BatchNormBundle<E: Element> {
    pub name: String,
    pub w: BnWeights,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    /// False until at least one training batch has updated the stats.
    pub populated: bool,
}

pub struct SequencerWeights<E: Element> {
    pub bn1: BatchNormBundle<E>,
    pub lstm1: BiLstmWeights,
    pub bn2: BatchNormBundle<E>,
    pub lstm2: BiLstmWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Side data collected while building a forward pass: traced attention
/// matrices and the dropout RNG.
pub struct ForwardCtx<'a, E: Element> {
    pub phase: Phase,
    pub attn_trace: Option<Vec<Tensor<E>>>,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, E: Element> ForwardCtx<'a, E> {
    pub fn new(phase: Phase) -> Self {
        ForwardCtx {
            phase,
            attn_trace: None,
            dropout_rng: None,
        }
    }

    pub fn traced(mut self) -> Self {
        self.attn_trace = Some(Vec::new());
        self
    }
}

/// Multi-headed self-attention over each sample's token block.
///
/// Per head: `A = softmax(Q K^T / sqrt(D/h))` with row-stochastic `A`; head
/// outputs are concatenated and passed through the output projection.
pub fn self_attention<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    w: &AttentionWeights,
    batch: usize,
    tokens: usize,
    heads: usize,
    ctx: &mut ForwardCtx<E>,
) -> Result<NodeId, ModelError> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(ModelError::Invalid(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x, w.wq)?;
    let q = tape.add_row(q, w.bq)?;
    let k = tape.matmul(x, w.wk)?;
    let k = tape.add_row(k, w.bk)?;
    let v = tape.matmul(x, w.wv)?;
    let v = tape.add_row(v, w.bv)?;

    let mut sample_outs = Vec::with_capacity(batch);
    for s in 0..batch {
        let qs = tape.slice_rows(q, s * tokens, tokens)?;
        let ks = tape.slice_rows(k, s * tokens, tokens)?;
        let vs = tape.slice_rows(v, s * tokens, tokens)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(qs, h * dh, dh)?;
            let kh = tape.slice_cols(ks, h * dh, dh)?;
            let vh = tape.slice_cols(vs, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            if let Some(trace) = ctx.attn_trace.as_mut() {
                trace.push(tape.value(attn).clone());
            }
            head_outs.push(tape.matmul(attn, vh)?);
        }
        sample_outs.push(tape.concat_cols(head_outs)?);
    }
    let merged = tape.concat_rows(sample_outs)?;
    let out = tape.matmul(merged, w.wo)?;
    Ok(tape.add_row(out, w.bo)?)
}

/// Pre-norm encoder block: `x' = x + MSA(LN(x))`, `out = x' + MLP(LN(x'))`.
pub fn encoder_block<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    w: &EncoderBlockWeights,
    batch: usize,
    tokens: usize,
    heads: usize,
    dropout: f64,
    ctx: &mut ForwardCtx<E>,
) -> Result<NodeId, ModelError> {
    let ln1 = tape.layer_norm_rows(x, w.ln1.gamma, w.ln1.beta, LN_EPS)?;
    let msa = self_attention(tape, ln1, &w.attn, batch, tokens, heads, ctx)?;
    let msa = maybe_dropout(tape, msa, dropout, ctx)?;
    let x1 = tape.add(x, msa)?;

    let ln2 = tape.layer_norm_rows(x1, w.ln2.gamma, w.ln2.beta, LN_EPS)?;
    let m = tape.matmul(ln2, w.mlp.w1)?;
    let m = tape.add_row(m, w.mlp.b1)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, w.mlp.w2)?;
    let m = tape.add_row(m, w.mlp.b2)?;
    let m = maybe_dropout(tape, m, dropout, ctx)?;
    Ok(tape.add(x1, m)?)
}

fn maybe_dropout<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    rate: f64,
    ctx: &mut ForwardCtx<E>,
) -> Result<NodeId, ModelError> {
    if rate == 0.0 || ctx.phase == Phase::Infer {
        return Ok(x);
    }
    let rng = ctx
        .dropout_rng
        .as_mut()
        .ok_or_else(|| ModelError::Invalid("dropout requires an RNG in train mode".into()))?;
    Ok(tape.dropout(x, rate, rng)?)
}

/// Bidirectional LSTM over each sample's `steps`-row block of `x`.
///
/// Standard recurrence per direction: gates i, f, o via sigmoid, candidate
/// via tanh, `c_t = f*c_{t-1} + i*g`, `h_t = o*tanh(c_t)`, zero initial
/// state. The output concatenates forward and backward hidden states per
/// position, full sequence returned as `[B*steps, 2U]`.
pub fn bilstm<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    w: &BiLstmWeights,
    batch: usize,
    steps: usize,
    units: usize,
) -> Result<NodeId, ModelError> {
    if steps == 0 || tape.value(x).rows() != batch * steps {
        return Err(ModelError::Invalid(format!(
            "bilstm: {} rows vs batch {batch} x steps {steps}",
            tape.value(x).rows()
        )));
    }
    let fwd = lstm_direction(tape, x, &w.fwd, batch, steps, units, false)?;
    let bwd = lstm_direction(tape, x, &w.bwd, batch, steps, units, true)?;
    Ok(tape.concat_cols(vec![fwd, bwd])?)
}

fn lstm_direction<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    w: &LstmDirWeights,
    batch: usize,
    steps: usize,
    units: usize,
    reversed: bool,
) -> Result<NodeId, ModelError> {
    let mut h = tape.leaf(Tensor::zeros(vec![batch, units]));
    let mut c = tape.leaf(Tensor::zeros(vec![batch, units]));
    let mut by_time: Vec<NodeId> = vec![h; steps];
    for step in 0..steps {
        let time = if reversed { steps - 1 - step } else { step };
        let idx: Vec<usize> = (0..batch).map(|s| s * steps + time).collect();
        let xt = tape.gather_rows(x, idx)?;
        let zx = tape.matmul(xt, w.wx)?;
        let zh = tape.matmul(h, w.wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, w.bias)?;
        let i_gate = tape.slice_cols(z, 0, units)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice_cols(z, units, units)?;
        let f_gate = tape.sigmoid(f_gate);
        let g_cand = tape.slice_cols(z, 2 * units, units)?;
        let g_cand = tape.tanh(g_cand);
        let o_gate = tape.slice_cols(z, 3 * units, units)?;
        let o_gate = tape.sigmoid(o_gate);
        let fc = tape.mul(f_gate, c)?;
        let ig = tape.mul(i_gate, g_cand)?;
        c = tape.add(fc, ig)?;
        let ct = tape.tanh(c);
        h = tape.mul(o_gate, ct)?;
        by_time[time] = h;
    }
    // Stack time-major [steps*B, U] and permute back to sample-major.
    let stacked = tape.concat_rows(by_time)?;
    let perm: Vec<usize> = (0..batch * steps)
        .map(|r| {
            let s = r / steps;
            let time = r % steps;
            time * batch + s
        })
        .collect();
    Ok(tape.gather_rows(stacked, perm)?)
}

/// Train-mode batch norm normalizes per feature over all rows and reports
/// the batch statistics; infer mode applies the running-stat affine map.
pub fn batch_norm<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    bundle: &BatchNormBundle<E>,
    eps: f64,
    phase: Phase,
) -> Result<(NodeId, Option<(Vec<E>, Vec<E>)>), ModelError> {
    match phase {
        Phase::Train => {
            let (id, mean, var) = tape.batch_norm_cols(x, bundle.w.gamma, bundle.w.beta, eps)?;
            Ok((id, Some((mean, var))))
        }
        Phase::Infer => {
            if !bundle.populated {
                return Err(ModelError::BnStatsUnpopulated(bundle.name.clone()));
            }
            let gamma = tape.value(bundle.w.gamma).data().to_vec();
            let beta = tape.value(bundle.w.beta).data().to_vec();
            let epse = E::from_f64(eps);
            let scale: Vec<E> = gamma
                .iter()
                .zip(bundle.running_var.data())
                .map(|(&g, &v)| g / (v + epse).sqrt())
                .collect();
            let shift: Vec<E> = beta
                .iter()
                .zip(bundle.running_mean.data())
                .zip(&scale)
                .map(|((&b, &m), &s)| b - m * s)
                .collect();
            let id = tape.affine_cols(x, scale, shift)?;
            Ok((id, None))
        }
    }
}

pub struct SequencerOut<E: Element> {
    /// `[B, D + 2*units1 + 2*units2]` mean-pooled features.
    pub pooled: NodeId,
    pub bn1_stats: Option<(Vec<E>, Vec<E>)>,
    pub bn2_stats: Option<(Vec<E>, Vec<E>)>,
}

/// The hybrid sequencer: BN1 -> BiLSTM1 -> BN2 -> BiLSTM2 with three skip
/// paths realized by two concatenation levels (input joined after each
/// BiLSTM, first BiLSTM output joined after the second), then a temporal
/// mean-pool to one feature vector per sample.
pub fn hybrid_sequencer<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    w: &SequencerWeights<E>,
    batch: usize,
    steps: usize,
    units1: usize,
    units2: usize,
    eps: f64,
    phase: Phase,
) -> Result<SequencerOut<E>, ModelError> {
    let (bn1, bn1_stats) = batch_norm(tape, x, &w.bn1, eps, phase)?;
    let s1 = bilstm(tape, bn1, &w.lstm1, batch, steps, units1)?;
    let level1 = tape.concat_cols(vec![x, s1])?;
    let (bn2, bn2_stats) = batch_norm(tape, level1, &w.bn2, eps, phase)?;
    let s2 = bilstm(tape, bn2, &w.lstm2, batch, steps, units2)?;
    let level2 = tape.concat_cols(vec![x, s1, s2])?;
    let pooled = tape.mean_pool_rows(level2, steps)?;
    Ok(SequencerOut {
        pooled,
        bn1_stats,
        bn2_stats,
    })
}

/// Dense prediction head: 8 softmax probabilities for the age task, a single
/// sigmoid P(male) for the gender task.
pub fn prediction_head<E: Element>(
    tape: &mut Tape<E>,
    features: NodeId,
    weight: NodeId,
    bias: NodeId,
    task: crate::model::config::Task,
) -> Result<NodeId, ModelError> {
    let logits = tape.matmul(features, weight)?;
    let logits = tape.add_row(logits, bias)?;
    match task {
        crate::model::config::Task::Age8 => Ok(tape.softmax_rows(logits)?),
        crate::model::config::Task::Gender2 => Ok(tape.sigmoid(logits)),
    }
}
