//! Butterworth band-pass design, zero-phase filtering, and quantile
//! normalization.
//!
//! The band-pass is designed classically: analog Butterworth low-pass
//! prototype, low-pass -> band-pass transform, bilinear mapping with
//! prewarped edges, cascaded biquads. An order-n prototype therefore yields
//! n second-order sections. Zero-phase response comes from running the
//! cascade forward and backward.

use num_complex::Complex64;

use super::IngestError;

/// One second-order section; `a0` is normalized to 1.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = Complex64::new(self.b0, 0.0) + self.b1 * z_inv + self.b2 * z_inv * z_inv;
        let den = Complex64::new(1.0, 0.0) + self.a1 * z_inv + self.a2 * z_inv * z_inv;
        num / den
    }
}

/// Magnitude response of a cascade at `freq_hz`.
pub fn cascade_gain(sos: &[Biquad], freq_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq_hz / fs;
    let z_inv = Complex64::from_polar(1.0, -w);
    sos.iter()
        .map(|s| s.response(z_inv))
        .product::<Complex64>()
        .norm()
}

/// Designs an order-`order` Butterworth band-pass as `order` biquads.
pub fn butter_bandpass(
    order: usize,
    low_hz: f64,
    high_hz: f64,
    fs: f64,
) -> Result<Vec<Biquad>, IngestError> {
    if order == 0 {
        return Err(IngestError::Config("filter order must be positive".into()));
    }
    if !(low_hz > 0.0 && low_hz < high_hz) {
        return Err(IngestError::Config(format!(
            "invalid band edges {low_hz}..{high_hz} Hz"
        )));
    }
    if fs <= 2.0 * high_hz {
        return Err(IngestError::Config(format!(
            "sampling rate {fs} Hz must exceed twice the upper edge {high_hz} Hz"
        )));
    }

    let pi = std::f64::consts::PI;
    // prewarped analog edges
    let wl = 2.0 * fs * (pi * low_hz / fs).tan();
    let wh = 2.0 * fs * (pi * high_hz / fs).tan();
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;

    // analog band-pass poles from the low-pass prototype
    let mut analog = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = pi * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0 * w0).sqrt();
        analog.push((pb + disc) / 2.0);
        analog.push((pb - disc) / 2.0);
    }

    // bilinear transform
    let two_fs = Complex64::new(2.0 * fs, 0.0);
    let mut zpoles: Vec<Complex64> = analog
        .iter()
        .map(|&s| (two_fs + s) / (two_fs - s))
        .collect();

    // pair each pole with its conjugate into biquad denominators
    let mut sections = Vec::with_capacity(order);
    while let Some(p) = zpoles.pop() {
        let q = if p.im.abs() > 1e-9 {
            let conj = p.conj();
            let (idx, _) = zpoles
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (**a - conj)
                        .norm()
                        .partial_cmp(&(**b - conj).norm())
                        .unwrap()
                })
                .expect("conjugate pole missing");
            zpoles.swap_remove(idx)
        } else {
            let (idx, _) = zpoles
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.im.abs().partial_cmp(&b.im.abs()).unwrap())
                .expect("odd pole count");
            zpoles.swap_remove(idx)
        };
        // band-pass zeros live at z = +1 and z = -1, one of each per section
        sections.push(Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -(p + q).re,
            a2: (p * q).re,
        });
    }

    // unity gain at the (digital) center frequency
    let f_center = fs / pi * (w0 / (2.0 * fs)).atan();
    let g = cascade_gain(&sections, f_center, fs);
    let scale = 1.0 / g;
    sections[0].b0 *= scale;
    sections[0].b1 *= scale;
    sections[0].b2 *= scale;
    Ok(sections)
}

/// Single forward pass through the cascade, zero initial state
/// (direct form II transposed).
pub fn sosfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sos {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b0 * xin + s1;
            s1 = s.b1 * xin - s.a1 * out + s2;
            s2 = s.b2 * xin - s.a2 * out;
            *v = out;
        }
    }
    y
}

/// Forward pass with each section's state initialized to its steady-state
/// response for the first sample, which removes the step transient.
fn sosfilt_steady(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sos {
        let x0 = y.first().copied().unwrap_or(0.0);
        let h1 = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        let y0 = h1 * x0;
        let mut s1 = y0 - s.b0 * x0;
        let mut s2 = s.b2 * x0 - s.a2 * y0;
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b0 * xin + s1;
            s1 = s.b1 * xin - s.a1 * out + s2;
            s2 = s.b2 * xin - s.a2 * out;
            *v = out;
        }
    }
    y
}

/// Reflection length long enough for the slowest pole to decay below 1e-9.
fn settle_len(sos: &[Biquad]) -> usize {
    let mut r_max: f64 = 0.0;
    for s in sos {
        // complex pair: |pole|^2 == a2; real pair: bound by the root formula
        let disc = s.a1 * s.a1 - 4.0 * s.a2;
        let r = if disc < 0.0 {
            s.a2.max(0.0).sqrt()
        } else {
            let d = disc.sqrt();
            ((-s.a1 + d) / 2.0).abs().max(((-s.a1 - d) / 2.0).abs())
        };
        r_max = r_max.max(r);
    }
    if r_max >= 1.0 - 1e-12 {
        return 3 * (2 * sos.len() + 1);
    }
    ((1e-9f64.ln() / r_max.ln()).ceil() as usize).max(3 * (2 * sos.len() + 1))
}

/// Forward-backward application: zero phase, squared magnitude response,
/// output length equals input length. The signal is extended by odd
/// reflection over the filter's settling length and each pass starts from
/// steady-state initial conditions, so constant offsets produce no startup
/// transient and edge effects stay local.
pub fn filtfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let pad = settle_len(sos).min(x.len() - 1);
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = sosfilt_steady(sos, &ext);
    y.reverse();
    let mut z = sosfilt_steady(sos, &y);
    z.reverse();
    z[pad..pad + n].to_vec()
}

/// Zero-phase order-4 Butterworth band-pass.
pub fn bandpass_filter(
    signal: &[f64],
    low_hz: f64,
    high_hz: f64,
    fs: f64,
) -> Result<Vec<f64>, IngestError> {
    let sos = butter_bandpass(4, low_hz, high_hz, fs)?;
    Ok(filtfilt(&sos, signal))
}

/// Type-7 quantile (linear interpolation between order statistics).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Shifts the median to 0 and scales the interquartile range to 1.
pub fn quantile_normalize(signal: &[f64]) -> Result<Vec<f64>, IngestError> {
    if signal.is_empty() {
        return Err(IngestError::Config(
            "quantile_normalize: empty signal".into(),
        ));
    }
    let mut sorted = signal.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile(&sorted, 0.5);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    if iqr == 0.0 {
        return Err(IngestError::ZeroIqr);
    }
    Ok(signal.iter().map(|v| (v - median) / iqr).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_edges_sit_at_minus_3_db() {
        let sos = butter_bandpass(4, 0.5, 49.0, 100.0).unwrap();
        assert_eq!(sos.len(), 4);
        let g_low = cascade_gain(&sos, 0.5, 100.0);
        let g_high = cascade_gain(&sos, 49.0, 100.0);
        let g_mid = cascade_gain(&sos, 10.0, 100.0);
        assert!((g_low - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6, "{g_low}");
        assert!((g_high - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6, "{g_high}");
        assert!((g_mid - 1.0).abs() < 1e-6, "{g_mid}");
    }

    #[test]
    fn zero_signal_stays_zero() {
        let x = vec![0.0; 500];
        let y = bandpass_filter(&x, 0.5, 49.0, 100.0).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn passband_sinusoid_amplitude_within_one_db() {
        let fs = 100.0;
        let n = 1000; // 10 s
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs).sin())
            .collect();
        let y = bandpass_filter(&x, 0.5, 49.0, fs).unwrap();
        let central = &y[100..n - 100];
        let amp = central.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let db = 20.0 * amp.log10();
        assert!(db.abs() <= 1.0, "passband deviation {db} dB");
    }

    #[test]
    fn dc_offset_is_suppressed() {
        let x = vec![1.0; 1000];
        let y = bandpass_filter(&x, 0.5, 49.0, 100.0).unwrap();
        let central = &y[100..900];
        let peak = central.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.05, "DC residual {peak}");
    }

    #[test]
    fn invalid_band_edges_are_config_errors() {
        assert!(butter_bandpass(4, 49.0, 0.5, 100.0).is_err());
        assert!(butter_bandpass(4, 0.0, 49.0, 100.0).is_err());
        assert!(butter_bandpass(4, 0.5, 60.0, 100.0).is_err()); // fs <= 2*high
    }

    #[test]
    fn quantile_normalize_hand_example() {
        let y = quantile_normalize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let expect = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_normalize_is_idempotent() {
        let x: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 * 0.11 - 5.0).collect();
        let y = quantile_normalize(&x).unwrap();
        let z = quantile_normalize(&y).unwrap();
        for (a, b) in y.iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
        // and the moments are pinned
        let mut sorted = y.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(quantile(&sorted, 0.5).abs() < 1e-9);
        assert!((quantile(&sorted, 0.75) - quantile(&sorted, 0.25) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_signal_is_rejected() {
        assert!(matches!(
            quantile_normalize(&[3.0; 10]),
            Err(IngestError::ZeroIqr)
        ));
    }
}
