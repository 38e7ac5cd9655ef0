use sleepstage_core::ingest::synth_dataset;
use sleepstage_core::model::NetConfig;
use sleepstage_core::train::{train_with_observer, PassDecision, TrainConfig};
use std::time::Instant;

fn main() {
    let data = synth_dataset(7, 4, 200);
    let refs: Vec<_> = data.iter().collect();
    let cfg = TrainConfig {
        max_epochs: 50,
        patience: 49,
        micro_batch: 4,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train_with_observer(
        &refs,
        &refs[3..],
        NetConfig::default(),
        &cfg,
        |pass, net, stats| {
            println!(
                "pass {pass}: loss_c {:.4} loss_s {:.4} loss_t {:.4} train_acc(dropout) {:.4} val_acc {:.4} [{:.0?}]",
                stats.loss_c, stats.loss_s, stats.loss_t, stats.train_acc, stats.val_acc,
                t0.elapsed()
            );
            if stats.train_acc >= 0.99 {
                // verify in eval mode over all training subjects
                let data2 = synth_dataset(7, 4, 200);
                let mut correct = 0usize;
                let mut total = 0usize;
                for ds in &data2 {
                    let (p, l) = sleepstage_core::eval::predict_pairs(net, ds).unwrap();
                    correct += p.iter().zip(&l).filter(|(a, b)| a == b).count();
                    total += p.len();
                }
                let acc = correct as f64 / total as f64;
                println!("  eval-mode training ACC: {acc:.4}");
                if acc >= 0.99 {
                    return PassDecision::Stop;
                }
            }
            PassDecision::Continue
        },
    )
    .unwrap();
    println!("done in {:.0?}, passes {}", t0.elapsed(), out.history.passes.len());
}
