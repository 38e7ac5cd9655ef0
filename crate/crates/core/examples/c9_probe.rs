use sleepstage_core::ingest::synth_dataset;
use sleepstage_core::model::NetConfig;
use sleepstage_core::train::{train, TrainConfig};

fn smooth3(x: &[f64]) -> Vec<f64> {
    (1..x.len() - 1)
        .map(|i| (x[i - 1] + x[i] + x[i + 1]) / 3.0)
        .collect()
}

fn main() {
    for seed in [1u64, 2, 3] {
        let data = synth_dataset(40 + seed, 5, 200);
        let refs: Vec<_> = data.iter().collect();
        let cfg = TrainConfig {
            max_epochs: 10,
            patience: 9,
            micro_batch: 4,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&refs[..4], &refs[4..], NetConfig::default(), &cfg).unwrap();
        let train_t: Vec<f64> = out.history.passes.iter().map(|s| s.loss_t).collect();
        let val_t: Vec<f64> = out.history.passes.iter().map(|s| s.val_loss_t).collect();
        let st = smooth3(&train_t);
        let sv = smooth3(&val_t);
        let mono = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
        println!("seed {seed}: smoothed-train mono {} | smoothed-val mono {}", mono(&st), mono(&sv));
        println!("  train: {st:.5?}");
        println!("  val:   {sv:.5?}");
    }
}
