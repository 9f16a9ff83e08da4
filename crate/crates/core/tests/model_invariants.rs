//! Model-level invariants: shape contracts, probability normalization,
//! attention row-stochasticity, determinism, dead-subgraph detection.

use hts_core::model::{
    self, embed_patches_single, schema, ForwardCtx, ModelError, ModelSpec, Parameters, Phase,
    Preset, Task,
};
use hts_core::rng::RngState;
use hts_core::tensor::Tensor;

fn random_batch(spec: &ModelSpec, b: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = RngState::new(seed).stream();
    Tensor::from_fn(vec![b, spec.patch.h, spec.patch.w, spec.patch.c], |_| {
        rng.random_range(-1.0..1.0)
    })
}

#[test]
fn toy_forward_has_task_shape() {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f32> = Parameters::init(&spec, RngState::new(1));
    let batch = random_batch(&spec, 2, 2);
    let pass = model::forward(&spec, &params, &batch, ForwardCtx::new(Phase::Train)).unwrap();
    assert_eq!(pass.probs_tensor().shape(), &[2, 8]);

    let gspec = ModelSpec::preset(Preset::Toy, Task::Gender2);
    let gparams: Parameters<f32> = Parameters::init(&gspec, RngState::new(1));
    let gb = random_batch(&gspec, 3, 3);
    let gpass = model::forward(&gspec, &gparams, &gb, ForwardCtx::new(Phase::Train)).unwrap();
    assert_eq!(gpass.probs_tensor().shape(), &[3, 1]);
}

#[test]
fn age_probabilities_and_attention_rows_are_normalized() {
    // 100 random inputs in batches of 4: probability rows sum to one within
    // 1e-6, every traced attention row is stochastic, gender output sits
    // strictly inside (0,1).
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f32> = Parameters::init(&spec, RngState::new(4));
    let gspec = ModelSpec::preset(Preset::Toy, Task::Gender2);
    let gparams: Parameters<f32> = Parameters::init(&gspec, RngState::new(5));
    for round in 0..25 {
        let batch = random_batch(&spec, 4, 100 + round);
        let pass = model::forward(
            &spec,
            &params,
            &batch,
            ForwardCtx::new(Phase::Train).traced(),
        )
        .unwrap();
        let probs = pass.probs_tensor();
        for row in probs.data().chunks_exact(8) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
            assert!(row.iter().all(|&p| p > 0.0));
        }
        // Two layers x two heads x four samples of attention traces.
        assert_eq!(pass.attention.len(), 16);
        for attn in &pass.attention {
            let t = attn.cols();
            for row in attn.data().chunks_exact(t) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "attention row sum {sum}");
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }

        let gpass = model::forward(&gspec, &gparams, &batch, ForwardCtx::new(Phase::Train)).unwrap();
        for &p in gpass.probs_tensor().data() {
            assert!(p > 0.0 && p < 1.0, "gender prob {p}");
        }
    }
}

#[test]
fn identical_samples_in_one_batch_infer_identically() {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let mut params: Parameters<f32> = Parameters::init(&spec, RngState::new(6));
    // Populate running stats with one training pass.
    let warm = random_batch(&spec, 4, 7);
    let pass = model::forward(&spec, &params, &warm, ForwardCtx::new(Phase::Train)).unwrap();
    model::apply_bn_updates(&mut params, pass.bn_updates);

    let one = random_batch(&spec, 1, 8);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let pair = Tensor::new(
        vec![2, spec.patch.h, spec.patch.w, spec.patch.c],
        data,
    )
    .unwrap();
    let pass = model::forward(&spec, &params, &pair, ForwardCtx::new(Phase::Infer)).unwrap();
    let probs = pass.probs_tensor();
    assert_eq!(&probs.data()[..8], &probs.data()[8..]);
}

#[test]
fn infer_without_populated_stats_is_state_error() {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f32> = Parameters::init(&spec, RngState::new(9));
    let batch = random_batch(&spec, 1, 10);
    match model::forward(&spec, &params, &batch, ForwardCtx::new(Phase::Infer)) {
        Err(ModelError::BnStatsUnpopulated(name)) => assert!(name.starts_with("seq/bn")),
        other => panic!("expected state error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn forward_is_bitwise_deterministic_under_fixed_seed() {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let run = || {
        let params: Parameters<f32> = Parameters::init(&spec, RngState::new(11));
        let batch = random_batch(&spec, 2, 12);
        let pass = model::forward(&spec, &params, &batch, ForwardCtx::new(Phase::Train)).unwrap();
        pass.probs_tensor().data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    // No dead subgraph: on a random batch, each named trainable tensor gets
    // at least one nonzero gradient element.
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f64> = Parameters::init(&spec, RngState::new(13));
    let batch = {
        use rand::Rng;
        let mut rng = RngState::new(14).stream();
        Tensor::from_fn(vec![4, 32, 32, 3], |_| rng.random_range(-1.0..1.0))
    };
    let pass = model::forward(&spec, &params, &batch, ForwardCtx::new(Phase::Train)).unwrap();
    let mut tape = pass.tape;
    let loss = tape
        .cross_entropy_probs(pass.probs, &[0, 3, 5, 7], 0.2)
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    for entry in schema(&spec).entries {
        if !entry.kind.trainable() {
            continue;
        }
        let node = pass.param_nodes[&entry.name];
        let g = grads
            .get(node)
            .unwrap_or_else(|| panic!("{} has no gradient", entry.name));
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{} gradient is identically zero",
            entry.name
        );
    }
}

#[test]
fn embedded_sequence_has_class_token_shape() {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f32> = Parameters::init(&spec, RngState::new(15));
    let img = {
        use rand::Rng;
        let mut rng = RngState::new(16).stream();
        Tensor::from_fn(vec![32, 32, 3], |_| rng.random_range(-1.0..1.0))
    };
    let seq = embed_patches_single(&spec, &params, &img).unwrap();
    // 16 patches plus the class token, each at model width.
    assert_eq!(seq.shape(), &[17, 16]);
    // Row 0 is the class token plus its positional embedding.
    let cls = params.get("patch/cls");
    let pos = params.get("patch/pos");
    for j in 0..16 {
        let expect = cls.data()[j] + pos.at2(0, j);
        assert_eq!(seq.at2(0, j), expect);
    }
}

#[test]
fn batch_shape_mismatch_is_rejected() {
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let params: Parameters<f32> = Parameters::init(&spec, RngState::new(17));
    let wrong = Tensor::<f32>::zeros(vec![2, 16, 32, 3]);
    assert!(matches!(
        model::forward(&spec, &params, &wrong, ForwardCtx::new(Phase::Train)),
        Err(ModelError::BatchShape { .. })
    ));
}
