//! Finite-difference verification of reverse-mode gradients.

use super::{no_grad, Result, Tensor, TensorError};

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences `(f(x+h) - f(x-h)) / 2h`, elementwise, and
/// returns the maximum relative error with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic: it is re-evaluated 2 times per input element.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let original = input.to_vec();
    let probe = Tensor::param(input.shape(), original.clone())?;

    let out = f(&probe)?;
    if out.numel() != 1 {
        return Err(TensorError::Contract {
            op: "grad_check",
            msg: format!("function output must be scalar, got {:?}", out.shape()),
        });
    }
    out.backward()?;
    let analytic = probe.grad().ok_or_else(|| TensorError::Contract {
        op: "grad_check",
        msg: "no gradient reached the input".into(),
    })?;

    let mut max_rel = 0.0f64;
    let mut perturbed = original.clone();
    for i in 0..original.len() {
        perturbed[i] = original[i] + h;
        probe.set_data(&perturbed)?;
        let up = no_grad(|| f(&probe))?.item();
        perturbed[i] = original[i] - h;
        probe.set_data(&perturbed)?;
        let down = no_grad(|| f(&probe))?.item();
        perturbed[i] = original[i];

        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    probe.set_data(&original)?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_function_is_exact() {
        let w = vec![0.3, -1.2, 2.0, 0.7];
        let x = Tensor::new(vec![4], vec![1.0, 2.0, -0.5, 0.1]).unwrap();
        let wc = w.clone();
        let err = grad_check(
            move |t| {
                let wt = Tensor::new(vec![4], wc.clone())?;
                Ok(t.mul(&wt)?.sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_within_tolerance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::new(vec![1, 5], logits).unwrap();
        let err = grad_check(
            |t| {
                let p = crate::tensor::ops::softmax_last(t)?;
                let picked = crate::tensor::ops::pick_class(&p, &[2])?;
                Ok(picked.clamp_min(1e-12).ln().mean_all().scale(-1.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rejects_non_scalar_outputs() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|t| Ok(t.scale(2.0)), &x, 1e-5).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }
}
