//! The named-parameter store and its schema.
//!
//! Every learnable tensor (and the batch-norm running statistics that ride
//! along in checkpoints) has a fixed path name derived from the model spec.
//! A parameter set is valid iff it holds exactly the schema's names with the
//! schema's shapes — no extras, nothing missing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::config::ModelSpec;
use crate::rng::RngState;
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("unexpected parameter {0}")]
    Unexpected(String),
    #[error("parameter {name} has shape {found:?}, schema wants {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How a schema entry is initialized and whether the optimizer touches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Truncated normal, sigma 0.02 (projections, embeddings, class token).
    Projection,
    /// Zeros.
    Bias,
    /// Ones (norm scales).
    ScaleOne,
    /// Zeros (norm shifts).
    ShiftZero,
    /// Uniform fan-in scaling for LSTM input/recurrent kernels.
    LstmKernel { fan_in: usize },
    /// Zeros with the forget-gate block set to one.
    LstmBias { units: usize },
    /// Non-trainable: running mean (zeros).
    RunningMean,
    /// Non-trainable: running variance (ones).
    RunningVar,
    /// Non-trainable: batch counter for "are the running stats populated".
    Counter,
}

impl ParamKind {
    pub fn trainable(&self) -> bool {
        !matches!(
            self,
            ParamKind::RunningMean | ParamKind::RunningVar | ParamKind::Counter
        )
    }
}

#[derive(Debug, Clone)]
pub struct SchemaEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
pub struct ParamSchema {
    pub entries: Vec<SchemaEntry>,
}

impl ParamSchema {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

/// Derive the full parameter schema for a model spec.
pub fn schema(spec: &ModelSpec) -> ParamSchema {
    let d = spec.patch.d;
    let mut entries = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
        entries.push(SchemaEntry { name, shape, kind });
    };

    push(
        "patch/proj_w".into(),
        vec![spec.patch.patch_len(), d],
        ParamKind::Projection,
    );
    push("patch/proj_b".into(), vec![d], ParamKind::Bias);
    push(
        "patch/pos".into(),
        vec![spec.tokens(), d],
        ParamKind::Projection,
    );
    if spec.encoder.class_token {
        push("patch/cls".into(), vec![1, d], ParamKind::Projection);
    }

    for layer in 0..spec.encoder.layers {
        let p = |suffix: &str| format!("enc/{layer}/{suffix}");
        push(p("ln1_g"), vec![d], ParamKind::ScaleOne);
        push(p("ln1_b"), vec![d], ParamKind::ShiftZero);
        for proj in ["wq", "wk", "wv", "wo"] {
            push(p(&format!("attn_{proj}")), vec![d, d], ParamKind::Projection);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            push(p(&format!("attn_{bias}")), vec![d], ParamKind::Bias);
        }
        push(p("ln2_g"), vec![d], ParamKind::ScaleOne);
        push(p("ln2_b"), vec![d], ParamKind::ShiftZero);
        push(p("mlp_w1"), vec![d, spec.encoder.d_mlp], ParamKind::Projection);
        push(p("mlp_b1"), vec![spec.encoder.d_mlp], ParamKind::Bias);
        push(p("mlp_w2"), vec![spec.encoder.d_mlp, d], ParamKind::Projection);
        push(p("mlp_b2"), vec![d], ParamKind::Bias);
    }
    push("enc/final_ln_g".into(), vec![d], ParamKind::ScaleOne);
    push("enc/final_ln_b".into(), vec![d], ParamKind::ShiftZero);

    let bn = |prefix: &str, width: usize, push: &mut dyn FnMut(String, Vec<usize>, ParamKind)| {
        push(format!("{prefix}_g"), vec![width], ParamKind::ScaleOne);
        push(format!("{prefix}_b"), vec![width], ParamKind::ShiftZero);
        push(format!("{prefix}_rm"), vec![width], ParamKind::RunningMean);
        push(format!("{prefix}_rv"), vec![width], ParamKind::RunningVar);
        push(format!("{prefix}_n"), vec![1], ParamKind::Counter);
    };
    let lstm = |prefix: &str,
                    input: usize,
                    units: usize,
                    push: &mut dyn FnMut(String, Vec<usize>, ParamKind)| {
        for dir in ["fwd", "bwd"] {
            push(
                format!("{prefix}/{dir}/wx"),
                vec![input, 4 * units],
                ParamKind::LstmKernel { fan_in: input },
            );
            push(
                format!("{prefix}/{dir}/wh"),
                vec![units, 4 * units],
                ParamKind::LstmKernel { fan_in: units },
            );
            push(
                format!("{prefix}/{dir}/bias"),
                vec![4 * units],
                ParamKind::LstmBias { units },
            );
        }
    };

    bn("seq/bn1", d, &mut push);
    lstm("seq/lstm1", d, spec.sequencer.units1, &mut push);
    bn("seq/bn2", spec.sequencer_mid_width(), &mut push);
    lstm(
        "seq/lstm2",
        spec.sequencer_mid_width(),
        spec.sequencer.units2,
        &mut push,
    );
    push(
        "head/w".into(),
        vec![spec.sequencer_output_width(), spec.task.head_classes()],
        ParamKind::Projection,
    );
    push("head/b".into(), vec![spec.task.head_classes()], ParamKind::Bias);

    ParamSchema { entries }
}

/// Named map of parameter tensors. Iteration order is lexicographic, which
/// fixes both the optimizer update order and the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<E: Element> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Parameters<E> {
    /// Seeded initialization following each entry's [`ParamKind`]: truncated
    /// normal (sigma 0.02, resampled beyond 2 sigma) for projections, zeros
    /// for biases/shifts, ones for scales, uniform fan-in scaling for LSTM
    /// kernels, and a forget-gate bias of one.
    pub fn init(spec: &ModelSpec, seed: RngState) -> Parameters<E> {
        let mut rng = seed.stream();
        let normal = Normal::new(0.0f64, 0.02).expect("sigma > 0");
        let mut tensors = BTreeMap::new();
        for entry in schema(spec).entries {
            let numel: usize = entry.shape.iter().product();
            let data: Vec<E> = match entry.kind {
                ParamKind::Projection => (0..numel)
                    .map(|_| {
                        // Truncate at two sigma by resampling.
                        loop {
                            let v = normal.sample(&mut rng);
                            if v.abs() <= 0.04 {
                                return E::from_f64(v);
                            }
                        }
                    })
                    .collect(),
                ParamKind::Bias | ParamKind::ShiftZero | ParamKind::RunningMean | ParamKind::Counter => {
                    vec![E::zero(); numel]
                }
                ParamKind::ScaleOne | ParamKind::RunningVar => vec![E::one(); numel],
                ParamKind::LstmKernel { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| E::from_f64(rng.random_range(-bound..bound)))
                        .collect()
                }
                ParamKind::LstmBias { units } => {
                    let mut data = vec![E::zero(); numel];
                    // Gate order is [input | forget | cell | output].
                    for v in &mut data[units..2 * units] {
                        *v = E::one();
                    }
                    data
                }
            };
            tensors.insert(entry.name, Tensor::new(entry.shape, data).expect("schema shape"));
        }
        Parameters { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<E>>) -> Parameters<E> {
        Parameters { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<E>) {
        debug_assert!(self.tensors.contains_key(name), "unknown parameter {name}");
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Exact schema conformance: every name present once with the schema
    /// shape, and nothing else.
    pub fn validate_schema(&self, spec: &ModelSpec) -> Result<(), SchemaError> {
        let schema = schema(spec);
        for entry in &schema.entries {
            match self.tensors.get(&entry.name) {
                None => return Err(SchemaError::Missing(entry.name.clone())),
                Some(t) if t.shape() != entry.shape.as_slice() => {
                    return Err(SchemaError::ShapeMismatch {
                        name: entry.name.clone(),
                        expected: entry.shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != schema.entries.len() {
            let known: std::collections::BTreeSet<&str> =
                schema.entries.iter().map(|e| e.name.as_str()).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(SchemaError::Unexpected(extra));
        }
        Ok(())
    }

    /// Explicit NaN/Inf sweep; names the first offending tensor.
    pub fn validate_finite(&self) -> Result<(), TensorError> {
        for (name, t) in &self.tensors {
            t.validate_finite(name)?;
        }
        Ok(())
    }

    /// Bitwise equality, used by the restore-best-weights contract.
    pub fn bitwise_eq(&self, other: &Parameters<E>) -> bool {
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        self.tensors.iter().zip(&other.tensors).all(|((an, at), (bn, bt))| {
            an == bn
                && at.shape() == bt.shape()
                && at
                    .data()
                    .iter()
                    .zip(bt.data())
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        })
    }

    pub fn cast<T: Element>(&self) -> Parameters<T> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Preset, Task};

    #[test]
    fn toy_schema_count_matches_hand_computation() {
        // Counted once by hand from the schema layout:
        //   patch: 192*16 + 16 + 17*16 + 16                    = 3376
        //   2 encoder layers:
        //     per layer: 2*16 (ln1) + 4*256 + 4*16 (attn)
        //              + 2*16 (ln2) + 512+32+512+16 (mlp)      = 2224
        //   final ln: 32
        //   bn1 scale/shift: 32
        //   lstm1: 2 * (16*512 + 128*512 + 512)                = 148480
        //   bn2 scale/shift: 2*272                             = 544
        //   lstm2: 2 * (272*256 + 64*256 + 256)                = 172544
        //   head: 400*8 + 8                                    = 3208
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let s = schema(&spec);
        assert_eq!(s.trainable_count(), 332_664);
        // Running stats and counters ride along: 2*16+1 and 2*272+1 extra.
        assert_eq!(s.total_count(), 332_664 + 33 + 545);
    }

    #[test]
    fn init_matches_schema_and_is_deterministic() {
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let a: Parameters<f32> = Parameters::init(&spec, RngState::new(3));
        let b: Parameters<f32> = Parameters::init(&spec, RngState::new(3));
        let c: Parameters<f32> = Parameters::init(&spec, RngState::new(4));
        a.validate_schema(&spec).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn projections_respect_truncation() {
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let p: Parameters<f64> = Parameters::init(&spec, RngState::new(5));
        assert!(p.get("patch/proj_w").data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn forget_gate_bias_is_one() {
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let p: Parameters<f64> = Parameters::init(&spec, RngState::new(5));
        let bias = p.get("seq/lstm1/fwd/bias");
        let u = spec.sequencer.units1;
        assert!(bias.data()[..u].iter().all(|&v| v == 0.0));
        assert!(bias.data()[u..2 * u].iter().all(|&v| v == 1.0));
        assert!(bias.data()[2 * u..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schema_mismatch_is_detected() {
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let other = ModelSpec::preset(Preset::VitB32, Task::Age8);
        let p: Parameters<f32> = Parameters::init(&spec, RngState::new(1));
        assert!(matches!(
            p.validate_schema(&other).unwrap_err(),
            SchemaError::ShapeMismatch { .. } | SchemaError::Missing(_)
        ));
    }
}
