use hts_core::data::{synthesize_dataset, SynthConfig};
use hts_core::model::{ModelSpec, Parameters, Preset, Task};
use hts_core::rng::RngState;
use hts_core::train::{train_epoch, RAdamState, TrainConfig};

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let data = synthesize_dataset(&SynthConfig { n: 64, classes: 8, image_size: 32, seed: 42 })
        .unwrap()
        .to_labeled();
    let mut params: Parameters<f32> = Parameters::init(&spec, RngState::new(42));
    let mut cfg = TrainConfig::defaults_for(Task::Age8, 42);
    cfg.lr = lr;
    let mut opt = RAdamState::<f32>::new(lr, cfg.optimizer);
    let ids: Vec<usize> = (0..64).collect();
    let shuffle = RngState::new(42).derive(1);
    let t0 = std::time::Instant::now();
    for epoch in 1..=300 {
        let (loss, acc) = train_epoch(
            &spec, &mut params, &mut opt, &data, &ids, &cfg, epoch, shuffle,
            RngState::new(42).derive(1000 + epoch as u64),
        )
        .unwrap();
        if epoch % 10 == 0 || acc >= 0.99 {
            println!("epoch {epoch}: loss {loss:.4} acc {acc:.4} ({:.2?} total)", t0.elapsed());
        }
        if acc >= 0.99 {
            println!("reached 0.99 at epoch {epoch}");
            break;
        }
    }
    println!("total {:.2?}", t0.elapsed());
}
