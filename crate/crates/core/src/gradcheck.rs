//! Finite-difference verification of recorded gradients.
//!
//! The generic checker compares an analytic gradient against central
//! differences coordinate by coordinate; the block harness applies it to
//! every architectural block and the end-to-end model at the desk-scale
//! preset in f64, sampling coordinates of large tensors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::model::blocks::{
    self, batch_norm, bilstm, encoder_block, hybrid_sequencer, prediction_head, BatchNormBundle,
    BnWeights, ForwardCtx, Phase,
};
use crate::model::{self, schema, ModelError, ModelSpec, Parameters, Preset, Task};
use crate::rng::RngState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Relative error of a finite-difference estimate against an analytic value:
/// `|fd - g| / (|g| + 1e-8)`.
pub fn relative_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / (analytic.abs() + 1e-8)
}

/// Max relative error over every coordinate of `theta` between central
/// differences of `f` at step `h` and the given analytic gradient.
pub fn finite_difference_check<F>(
    mut f: F,
    theta: &Tensor<f64>,
    h: f64,
    analytic: &Tensor<f64>,
) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(theta.shape(), analytic.shape(), "gradient shape mismatch");
    let mut max_rel: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.numel() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        max_rel = max_rel.max(relative_error(fd, analytic.data()[i]));
    }
    max_rel
}

/// A block graph builder: binds parameters onto a fresh tape and returns the
/// tape, the node of every bound parameter, and a scalar loss node.
pub type BlockBuild<'a> =
    dyn Fn(&Parameters<f64>) -> Result<(Tape<f64>, BTreeMap<String, NodeId>, NodeId), ModelError>
        + 'a;

/// Verdict of one block check.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// One backward pass of the built graph; gradients keyed by parameter name.
pub fn analytic_grads(
    build: &BlockBuild,
    params: &Parameters<f64>,
    names: &[String],
) -> Result<BTreeMap<String, Tensor<f64>>, ModelError> {
    let (tape, nodes, loss) = build(params)?;
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for name in names {
        let id = nodes[name];
        out.insert(
            name.clone(),
            grads.get_or_zeros(id, params.get(name).shape()),
        );
    }
    Ok(out)
}

/// Compare analytic gradients against central differences over sampled
/// coordinates of each named tensor.
pub fn fd_check_params(
    build: &BlockBuild,
    params: &Parameters<f64>,
    names: &[String],
    analytic: &BTreeMap<String, Tensor<f64>>,
    h: f64,
    coords_per_tensor: usize,
    seed: RngState,
) -> Result<BlockReport, ModelError> {
    let mut rng = seed.stream();
    let mut report = BlockReport {
        block: String::new(),
        max_rel_err: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    for name in names {
        let base = params.get(name);
        let grad = &analytic[name];
        let numel = base.numel();
        let coords: Vec<usize> = if numel <= coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(coords_per_tensor);
            all
        };
        for &ci in &coords {
            let orig = base.data()[ci];
            let mut probe = params.clone();
            probe.get_mut(name).data_mut()[ci] = orig + h;
            let (tape, _, loss) = build(&probe)?;
            let plus = tape.value(loss).data()[0];
            probe.get_mut(name).data_mut()[ci] = orig - h;
            let (tape, _, loss) = build(&probe)?;
            let minus = tape.value(loss).data()[0];
            let fd = (plus - minus) / (2.0 * h);
            let rel = relative_error(fd, grad.data()[ci]);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{ci}]");
            }
        }
    }
    Ok(report)
}

pub fn check_block(
    block: &str,
    build: &BlockBuild,
    params: &Parameters<f64>,
    names: &[String],
    h: f64,
    coords_per_tensor: usize,
    seed: RngState,
) -> Result<BlockReport, ModelError> {
    let analytic = analytic_grads(build, params, names)?;
    let mut report = fd_check_params(build, params, names, &analytic, h, coords_per_tensor, seed)?;
    report.block = block.to_string();
    Ok(report)
}

fn bind_all(tape: &mut Tape<f64>, params: &Parameters<f64>) -> BTreeMap<String, NodeId> {
    params
        .iter()
        .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
        .collect()
}

fn trainable_names_with(spec: &ModelSpec, prefix: &str) -> Vec<String> {
    schema(spec)
        .entries
        .iter()
        .filter(|e| e.kind.trainable() && e.name.starts_with(prefix))
        .map(|e| e.name.clone())
        .collect()
}

fn random_tensor(shape: Vec<usize>, seed: RngState) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = seed.stream();
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Run the finite-difference oracle over every block and the full model at
/// the desk-scale preset in f64. `coords_per_tensor` caps the sweep per
/// tensor (small tensors are swept exhaustively).
pub fn check_blocks(
    seed: RngState,
    coords_per_tensor: usize,
    h: f64,
) -> Result<Vec<BlockReport>, ModelError> {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f64> = Parameters::init(&spec, seed.derive(1));
    let b = 2;
    let tokens = spec.tokens();
    let n = spec.patch.num_patches();
    let d = spec.patch.d;
    let mut reports = Vec::new();

    // Attention head alone.
    {
        let x = random_tensor(vec![b * tokens, d], seed.derive(10));
        let wsum = random_tensor(vec![b * tokens, d], seed.derive(11));
        let spec2 = spec.clone();
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let pn = |name: &str| nodes[name];
            let w = model::encoder_weights(&pn, 0);
            let xid = tape.leaf(x.clone());
            let mut ctx = ForwardCtx::new(Phase::Train);
            let out = blocks::self_attention(&mut tape, xid, &w.attn, b, tokens, spec2.encoder.heads, &mut ctx)?;
            let wid = tape.leaf(wsum.clone());
            let prod = tape.mul(out, wid)?;
            let loss = tape.sum_all(prod);
            Ok((tape, nodes, loss))
        };
        let names = trainable_names_with(&spec, "enc/0/attn_");
        reports.push(check_block("attention", &build, &params, &names, h, coords_per_tensor, seed.derive(12))?);
    }

    // Encoder stack: both layers plus the final layer norm.
    {
        let x = random_tensor(vec![b * tokens, d], seed.derive(20));
        let wsum = random_tensor(vec![b * tokens, d], seed.derive(21));
        let spec2 = spec.clone();
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let pn = |name: &str| nodes[name];
            let mut ctx = ForwardCtx::new(Phase::Train);
            let mut cur = tape.leaf(x.clone());
            for layer in 0..spec2.encoder.layers {
                let w = model::encoder_weights(&pn, layer);
                cur = encoder_block(&mut tape, cur, &w, b, tokens, spec2.encoder.heads, 0.0, &mut ctx)?;
            }
            cur = tape.layer_norm_rows(cur, pn("enc/final_ln_g"), pn("enc/final_ln_b"), blocks::LN_EPS)?;
            let wid = tape.leaf(wsum.clone());
            let prod = tape.mul(cur, wid)?;
            let loss = tape.sum_all(prod);
            Ok((tape, nodes, loss))
        };
        let names = trainable_names_with(&spec, "enc/");
        reports.push(check_block("encoder_stack", &build, &params, &names, h, coords_per_tensor, seed.derive(22))?);
    }

    // Batch norm (train mode, batch statistics on the tape).
    {
        let x = random_tensor(vec![b * n, d], seed.derive(30));
        let wsum = random_tensor(vec![b * n, d], seed.derive(31));
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let bundle = BatchNormBundle {
                name: "seq/bn1".into(),
                w: BnWeights {
                    gamma: nodes["seq/bn1_g"],
                    beta: nodes["seq/bn1_b"],
                },
                running_mean: p.get("seq/bn1_rm").clone(),
                running_var: p.get("seq/bn1_rv").clone(),
                populated: false,
            };
            let xid = tape.leaf(x.clone());
            let (out, _) = batch_norm(&mut tape, xid, &bundle, 1e-5, Phase::Train)?;
            let wid = tape.leaf(wsum.clone());
            let prod = tape.mul(out, wid)?;
            let loss = tape.sum_all(prod);
            Ok((tape, nodes, loss))
        };
        let names = vec!["seq/bn1_g".to_string(), "seq/bn1_b".to_string()];
        reports.push(check_block("batch_norm", &build, &params, &names, h, coords_per_tensor, seed.derive(32))?);
    }

    // BiLSTM (first sequencer layer width).
    {
        let u1 = spec.sequencer.units1;
        let x = random_tensor(vec![b * n, d], seed.derive(40));
        let wsum = random_tensor(vec![b * n, 2 * u1], seed.derive(41));
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let pn = |name: &str| nodes[name];
            let spec2 = ModelSpec::preset(Preset::Toy, Task::Age8);
            let w = model::sequencer_weights(&mut tape, &pn, p, &spec2)?;
            let xid = tape.leaf(x.clone());
            let out = bilstm(&mut tape, xid, &w.lstm1, b, n, u1)?;
            let wid = tape.leaf(wsum.clone());
            let prod = tape.mul(out, wid)?;
            let loss = tape.sum_all(prod);
            Ok((tape, nodes, loss))
        };
        let names = trainable_names_with(&spec, "seq/lstm1/");
        reports.push(check_block("bilstm", &build, &params, &names, h, coords_per_tensor, seed.derive(42))?);
    }

    // Full hybrid sequencer.
    {
        let x = random_tensor(vec![b * n, d], seed.derive(50));
        let wsum = random_tensor(vec![b, spec.sequencer_output_width()], seed.derive(51));
        let spec2 = spec.clone();
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let pn = |name: &str| nodes[name];
            let w = model::sequencer_weights(&mut tape, &pn, p, &spec2)?;
            let xid = tape.leaf(x.clone());
            let out = hybrid_sequencer(
                &mut tape,
                xid,
                &w,
                b,
                n,
                spec2.sequencer.units1,
                spec2.sequencer.units2,
                spec2.sequencer.bn_eps,
                Phase::Train,
            )?;
            let wid = tape.leaf(wsum.clone());
            let prod = tape.mul(out.pooled, wid)?;
            let loss = tape.sum_all(prod);
            Ok((tape, nodes, loss))
        };
        let names = trainable_names_with(&spec, "seq/");
        reports.push(check_block("hybrid_sequencer", &build, &params, &names, h, coords_per_tensor, seed.derive(52))?);
    }

    // Dense head through the smoothed cross-entropy.
    {
        let feats = random_tensor(vec![4, spec.sequencer_output_width()], seed.derive(60));
        let labels = vec![0usize, 3, 5, 7];
        let task = spec.task;
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let fid = tape.leaf(feats.clone());
            let probs = prediction_head(&mut tape, fid, nodes["head/w"], nodes["head/b"], task)?;
            let loss = tape.cross_entropy_probs(probs, &labels, 0.2)?;
            Ok((tape, nodes, loss))
        };
        let names = vec!["head/w".to_string(), "head/b".to_string()];
        reports.push(check_block("heads", &build, &params, &names, h, coords_per_tensor, seed.derive(61))?);
    }

    // End-to-end model with the training loss.
    {
        let batch = random_tensor(vec![b, spec.patch.h, spec.patch.w, spec.patch.c], seed.derive(70));
        let labels = vec![2usize, 6];
        let spec2 = spec.clone();
        let build = move |p: &Parameters<f64>| {
            let pass = model::forward(&spec2, p, &batch, ForwardCtx::new(Phase::Train))?;
            let mut tape = pass.tape;
            let loss = tape.cross_entropy_probs(pass.probs, &labels, 0.2)?;
            Ok((tape, pass.param_nodes, loss))
        };
        let names: Vec<String> = schema(&spec)
            .entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.name.clone())
            .collect();
        reports.push(check_block("full_model", &build, &params, &names, h, coords_per_tensor, seed.derive(71))?);
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(theta) = sum(theta^2); analytic gradient 2*theta.
        let theta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        let err = finite_difference_check(
            |t| t.data().iter().map(|v| v * v).sum(),
            &theta,
            1e-5,
            &analytic,
        );
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::new(vec![3], vec![0.5, -0.25, 2.0]).unwrap();
        let analytic = Tensor::zeros(vec![3]);
        let err = finite_difference_check(|_| 7.5, &theta, 1e-5, &analytic);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn composed_tape_graph_matches_finite_differences() {
        // softmax(matmul) -> gelu -> tanh chain, checked at h=1e-5.
        let theta = random_tensor(vec![3, 4], RngState::new(2));
        let x = random_tensor(vec![2, 3], RngState::new(3));
        let eval = |t: &Tensor<f64>| -> (Tape<f64>, NodeId, NodeId) {
            let mut tape = Tape::new();
            let tid = tape.leaf(t.clone());
            let xid = tape.leaf(x.clone());
            let y = tape.matmul(xid, tid).unwrap();
            let y = tape.softmax_rows(y).unwrap();
            let y = tape.gelu(y);
            let y = tape.tanh(y);
            let loss = tape.mean_all(y);
            (tape, tid, loss)
        };
        let (tape, tid, loss) = eval(&theta);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(tid).unwrap().clone();
        let err = finite_difference_check(
            |t| {
                let (tape, _, loss) = eval(t);
                tape.value(loss).data()[0]
            },
            &theta,
            1e-5,
            &analytic,
        );
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_flagged_with_its_name() {
        // Fault injection: a deliberately wrong backward result must fail
        // the check and name the offending tensor.
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let params: Parameters<f64> = Parameters::init(&spec, RngState::new(9));
        let feats = random_tensor(vec![2, spec.sequencer_output_width()], RngState::new(10));
        let labels = vec![1usize, 4];
        let task = spec.task;
        let build = move |p: &Parameters<f64>| {
            let mut tape = Tape::new();
            let nodes = bind_all(&mut tape, p);
            let fid = tape.leaf(feats.clone());
            let probs = prediction_head(&mut tape, fid, nodes["head/w"], nodes["head/b"], task)?;
            let loss = tape.cross_entropy_probs(probs, &labels, 0.0)?;
            Ok((tape, nodes, loss))
        };
        let names = vec!["head/b".to_string()];
        let mut analytic = analytic_grads(&build, &params, &names).unwrap();
        // Honest gradients pass...
        let ok = fd_check_params(&build, &params, &names, &analytic, 1e-5, 16, RngState::new(11)).unwrap();
        assert!(ok.max_rel_err <= 1e-4, "honest check failed: {}", ok.max_rel_err);
        // ...corrupted ones fail and point at the tensor.
        analytic.get_mut("head/b").unwrap().data_mut()[3] += 0.05;
        let bad = fd_check_params(&build, &params, &names, &analytic, 1e-5, 16, RngState::new(11)).unwrap();
        assert!(bad.max_rel_err > 1e-4);
        assert!(bad.worst_param.starts_with("head/b"), "{}", bad.worst_param);
    }
}
