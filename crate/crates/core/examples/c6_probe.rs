use sleepstage_core::ingest::synth_dataset;
use sleepstage_core::model::NetConfig;
use sleepstage_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let data = synth_dataset(23, 6, 60);
    let refs: Vec<_> = data.iter().collect();
    for (bs, seed) in [(2usize, 3u64), (2, 4), (4, 3), (4, 4)] {
        let cfg = TrainConfig {
            max_epochs: 15,
            patience: 14,
            batch_size: bs,
            micro_batch: 2,
            seed,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train(&refs[..5], &refs[5..], NetConfig::default(), &cfg).unwrap();
        let accs: Vec<f64> = out.history.passes.iter().map(|s| s.val_acc).collect();
        println!(
            "batch {bs} seed {seed}: best MF1 {:.3} at pass {} [{:.0?}] val_acc: {:?}",
            out.best_val_mf1,
            out.best_pass,
            t0.elapsed(),
            accs.iter().map(|a| (a * 100.0).round() as i64).collect::<Vec<_>>()
        );
    }
}
