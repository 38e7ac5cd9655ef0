use sleepstage_core::eval::{predict_pairs, transition_analysis};
use sleepstage_core::ingest::{synth_dataset_mixed, SynthMix};
use sleepstage_core::model::NetConfig;
use sleepstage_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mix = SynthMix { lo: 0.35, hi: 0.9 };
    let mut pooled = [([0usize; 2], [0usize; 2]); 2]; // variant -> (errors, counts) per partition
    let mut per_variant_pairs: [Vec<(Vec<_>, Vec<_>)>; 2] = [vec![], vec![]];
    for seed in [1u64, 2, 3] {
        let data = synth_dataset_mixed(30 + seed, 6, 80, mix);
        let refs: Vec<_> = data.iter().collect();
        for (vi, aux) in [(0usize, true), (1usize, false)] {
            let cfg = TrainConfig {
                max_epochs: 14,
                patience: 13,
                batch_size: 2,
                micro_batch: 2,
                seed,
                aux_stage: aux,
                aux_transition: aux,
                ..TrainConfig::default()
            };
            let out = train(&refs[..4], &refs[4..5], NetConfig::default(), &cfg).unwrap();
            let (p, l) = predict_pairs(&out.net, &data[5]).unwrap();
            let (t, nt) = transition_analysis(&[(p.clone(), l.clone())]).unwrap();
            println!(
                "seed {seed} {}: trans_err {:.3} nontrans_err {:.3} [{:.0?}]",
                if vi == 0 { "full " } else { "case2" }, t.rate, nt.rate, t0.elapsed()
            );
            per_variant_pairs[vi].push((p, l));
            let _ = &mut pooled;
        }
    }
    for (vi, name) in [(0, "full"), (1, "case2")] {
        let (t, nt) = transition_analysis(&per_variant_pairs[vi]).unwrap();
        println!("{name}: pooled trans_err {:.4} nontrans_err {:.4} exceeds: {}", t.rate, nt.rate, t.rate > nt.rate);
    }
}
