use sleepstage_core::tensor::ops::*;
use sleepstage_core::tensor::Tensor;
use std::time::Instant;

fn bench<F: FnMut()>(name: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{name}: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

fn main() {
    let b = 50; // epochs per micro-batch
    let x = Tensor::param(vec![b, 1, 3000], vec![0.1; b * 3000]).unwrap();
    let w = Tensor::param(vec![4, 1, 200], vec![0.01; 800]).unwrap();
    let bias = Tensor::param(vec![4], vec![0.0; 4]).unwrap();
    bench("conv1d fwd 50x[1,3000] k200 s2", 5, || {
        let _ = conv1d(&x, &w, Some(&bias), 2, 99).unwrap();
    });
    bench("conv1d fwd+bwd", 5, || {
        let y = conv1d(&x, &w, Some(&bias), 2, 99).unwrap();
        y.sum_all().backward().unwrap();
    });

    let g = Tensor::param(vec![4], vec![1.0; 4]).unwrap();
    let be = Tensor::param(vec![4], vec![0.0; 4]).unwrap();
    let h = Tensor::param(vec![b, 4, 1500], vec![0.1; b * 6000]).unwrap();
    bench("batchnorm fwd+bwd 50x[4,1500]", 5, || {
        let y = batch_norm1d(&h, &g, &be, Mode::Train, None, 1e-5).unwrap();
        y.sum_all().backward().unwrap();
    });
    bench("gelu fwd+bwd 50x[4,1500]", 5, || {
        let y = h.gelu();
        y.sum_all().backward().unwrap();
    });
    let dw = Tensor::param(vec![4, 1, 11], vec![0.1; 44]).unwrap();
    let pw = Tensor::param(vec![16, 4, 1], vec![0.1; 64]).unwrap();
    bench("sep1 fwd+bwd 50x[4,1500]", 5, || {
        let y = separable_conv1d(&h, &dw, &pw, 2, 5).unwrap();
        y.sum_all().backward().unwrap();
    });
    // LSTM-ish linear: [50, 384] @ [512, 384]
    let lx = Tensor::param(vec![2, 384], vec![0.1; 2 * 384]).unwrap();
    let lw = Tensor::param(vec![512, 384], vec![0.01; 512 * 384]).unwrap();
    let lb = Tensor::param(vec![512], vec![0.0; 512]).unwrap();
    bench("lstm-gate linear [2,384]x[512,384] fwd+bwd x25", 5, || {
        for _ in 0..25 {
            let y = linear(&lx, &lw, Some(&lb)).unwrap();
            y.sum_all().backward().unwrap();
        }
    });
    // attention block at F=64: 16 tokens
    let ax = Tensor::param(vec![b, 16, 64], vec![0.1; b * 16 * 64]).unwrap();
    let p = MhsaParams::identity(64);
    bench("mhsa fwd+bwd 50x[16,64] h4", 5, || {
        let y = multi_head_self_attention(&ax, 4, &p).unwrap();
        y.output.sum_all().backward().unwrap();
    });
}
