use hts_core::data::{synthesize_dataset, SynthConfig};
use hts_core::eval::crossval_run;
use hts_core::model::{ModelSpec, Preset, Task};
use hts_core::train::TrainConfig;

fn main() {
    let max_epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
    let data = synthesize_dataset(&SynthConfig { n: 400, classes: 8, image_size: 32, seed: 7 })
        .unwrap()
        .to_labeled();
    let mut cfg = TrainConfig::defaults_for(Task::Age8, 7);
    cfg.lr = 1e-3;
    cfg.max_epochs = max_epochs;
    cfg.early_stop = None;
    let t0 = std::time::Instant::now();
    let (agg, folds) = crossval_run(&spec, &data, &cfg, 5, 0.2).unwrap();
    for (i, f) in folds.iter().enumerate() {
        println!(
            "fold {i}: train {:.3} val {:.3} test {:.3} ({} epochs, {:.2}s/epoch)",
            f.train_acc, f.val_acc, f.test_acc, f.epochs_run, f.epoch_seconds_mean
        );
    }
    println!(
        "mean test acc {:.4} (std {:.4}); total {:.2?}",
        agg.test_acc.0, agg.test_acc.1, t0.elapsed()
    );
}
