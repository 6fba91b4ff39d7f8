use adaseq::data::{split_dataset, synth_generate, Standardizer, SynthConfig};
use adaseq::experiment::ExperimentSpec;
use adaseq::training::{train, TrainConfig};
use adaseq::{Arch, ModelConfig};

#[test]
fn da_lstm_learns_synthetic_sequences() {
    let cfg = SynthConfig {
        sequences: 120,
        steps: 60,
        ..SynthConfig::default()
    };
    let mut ds = split_dataset(synth_generate(&cfg).unwrap(), 1).unwrap();
    Standardizer::fit(&ds).unwrap().apply(&mut ds);
    let model = ModelConfig::new(Arch::DaLstm, 16, 3, cfg.input_dim, cfg.num_classes);
    let train_cfg = TrainConfig {
        learning_rate: 5e-3,
        batch_size: 8,
        max_epochs: 10,
        patience: 10,
        ..TrainConfig::default()
    };
    let report = train::<f64>(&model, &train_cfg, &ds).unwrap().report;
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_ce).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses[0] < (cfg.num_classes as f64).ln() + 0.1, "{losses:?}");
    assert!(losses[..5].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[9] < losses[0]);
    assert!(report.best_val_ce < losses[0]);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let spec = ExperimentSpec::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        spec.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
