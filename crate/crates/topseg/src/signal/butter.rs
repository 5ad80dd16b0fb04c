//! Butterworth band-pass design and zero-phase (forward–backward) filtering.
//!
//! The design follows the classic analog-prototype route: Butterworth
//! low-pass poles, low-pass→band-pass transform, bilinear transform with
//! frequency pre-warping, and second-order sections paired from conjugate
//! poles. Gain is normalized to unity at the (warped) band center and spread
//! evenly across sections.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section with normalized denominator (`a0 = 1`).
#[derive(Debug, Clone, Copy)]
pub struct Sos {
    pub b: [f64; 3],
    pub a1: f64,
    pub a2: f64,
}

/// A cascade of second-order sections plus design metadata.
#[derive(Debug, Clone)]
pub struct SosCascade {
    pub sections: Vec<Sos>,
    /// Largest digital pole magnitude; controls filtfilt pad length.
    pub max_pole_radius: f64,
}

/// Design an order-`order` Butterworth band-pass (`low`..`high` Hz) for
/// sampling rate `fs`. The digital filter has `2 * order` poles arranged in
/// `order` biquads.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<SosCascade> {
    if order == 0 {
        return Err(Error::Config("filter order must be at least 1".into()));
    }
    if !(0.0 < low && low < high && high < fs / 2.0) {
        return Err(Error::Config(format!(
            "band edges must satisfy 0 < {low} < {high} < fs/2 = {}",
            fs / 2.0
        )));
    }

    // Pre-warped analog band edges (bilinear transform compensation).
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
    let wl = warp(low);
    let wh = warp(high);
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    // Analog prototype poles on the unit circle, left half-plane.
    let n = order;
    let prototype: Vec<Complex64> = (1..=n)
        .map(|m| {
            let theta = std::f64::consts::PI * (2 * m + n - 1) as f64 / (2 * n) as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();

    // Low-pass → band-pass: every prototype pole p solves
    // s^2 - p*bw*s + w0^2 = 0, giving two analog band-pass poles.
    let bilinear = |s: Complex64| (2.0 * fs + s) / (2.0 * fs - s);
    let mut sections: Vec<Sos> = Vec::with_capacity(n);
    let mut max_radius = 0.0f64;
    let mut handled_real = false;
    for &p in &prototype {
        if p.im < -1e-12 {
            // Conjugate partner of a pole already handled.
            continue;
        }
        let half = p * bw * 0.5;
        let disc = (half * half - Complex64::new(w0 * w0, 0.0)).sqrt();
        let s1 = half + disc;
        let s2 = half - disc;
        let z1 = bilinear(s1);
        let z2 = bilinear(s2);
        if p.im > 1e-12 {
            // Complex prototype pole: z1 and z2 pair with their conjugates
            // (which arise from the conjugate prototype pole).
            for z in [z1, z2] {
                max_radius = max_radius.max(z.norm());
                sections.push(Sos {
                    b: [1.0, 0.0, -1.0],
                    a1: -2.0 * z.re,
                    a2: z.norm_sqr(),
                });
            }
        } else {
            // Real prototype pole (odd order): its two band-pass poles are
            // mutual conjugates or both real; either way one real biquad.
            debug_assert!(!handled_real, "only one real prototype pole can exist");
            handled_real = true;
            max_radius = max_radius.max(z1.norm()).max(z2.norm());
            let sum = z1 + z2;
            let prod = z1 * z2;
            sections.push(Sos {
                b: [1.0, 0.0, -1.0],
                a1: -sum.re,
                a2: prod.re,
            });
        }
    }
    debug_assert_eq!(sections.len(), n);
    if max_radius >= 1.0 - 1e-9 {
        return Err(Error::Config(format!(
            "designed filter is unstable or marginal (pole radius {max_radius})"
        )));
    }

    // Normalize gain to 1 at the warped center frequency, split across
    // sections to keep their individual gains moderate.
    let omega0 = 2.0 * (w0 / (2.0 * fs)).atan();
    let z0 = Complex64::new(omega0.cos(), omega0.sin());
    let zinv = 1.0 / z0;
    let mut total = Complex64::new(1.0, 0.0);
    for s in &sections {
        let num = s.b[0] + s.b[1] * zinv + s.b[2] * zinv * zinv;
        let den = 1.0 + s.a1 * zinv + s.a2 * zinv * zinv;
        total *= num / den;
    }
    let gain = total.norm();
    if gain <= 0.0 || !gain.is_finite() {
        return Err(Error::Config("degenerate band-pass gain".into()));
    }
    let per_section = (1.0 / gain).powf(1.0 / n as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(SosCascade {
        sections,
        max_pole_radius: max_radius,
    })
}

/// Single-pass cascade filtering (direct form II transposed), zero initial
/// conditions.
pub fn sosfilt(cascade: &SosCascade, x: &mut [f64]) {
    for s in &cascade.sections {
        let mut z1 = 0.0f64;
        let mut z2 = 0.0f64;
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a1 * y + z2;
            z2 = s.b[2] * xin - s.a2 * y;
            *v = y;
        }
    }
}

/// Pad length that lets the slowest pole's transient decay to 1e-12.
fn pad_len(cascade: &SosCascade, n: usize) -> usize {
    let r = cascade.max_pole_radius.clamp(1e-6, 1.0 - 1e-12);
    let from_radius = ((1e-12f64).ln() / r.ln()).ceil() as usize;
    let floor = 3 * (2 * cascade.sections.len() + 1);
    from_radius.max(floor).min(n.saturating_sub(1))
}

/// Zero-phase filtering: odd-symmetric edge extension, forward pass,
/// backward pass, crop. Output length equals input length.
pub fn sosfiltfilt(cascade: &SosCascade, x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "zero-phase filtering needs at least 2 samples, got {n}"
        )));
    }
    let pad = pad_len(cascade, n);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        ext.push(2.0 * x[0] - x[pad - i]);
    }
    ext.extend_from_slice(x);
    for i in 0..pad {
        ext.push(2.0 * x[n - 1] - x[n - 2 - i]);
    }
    sosfilt(cascade, &mut ext);
    ext.reverse();
    sosfilt(cascade, &mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Steady-state amplitude of a filtered sine, ignoring `skip` samples of
    /// edge transient on both sides.
    fn filtered_amplitude(freq: f64, fs: f64, seconds: f64, skip: f64) -> f64 {
        let n = (fs * seconds) as usize;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect();
        let cascade = butter_bandpass(4, 20.0, 200.0, fs).unwrap();
        let y = sosfiltfilt(&cascade, &x).unwrap();
        let lo = (fs * skip) as usize;
        let hi = n - lo;
        y[lo..hi].iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    #[test]
    fn inband_amplitude_preserved() {
        let amp = filtered_amplitude(100.0, 2000.0, 3.0, 0.5);
        assert!((amp - 1.0).abs() < 0.01, "in-band amplitude {amp}");
    }

    #[test]
    fn stopband_attenuated_20db() {
        let amp = filtered_amplitude(5.0, 2000.0, 3.0, 0.5);
        assert!(amp < 0.1, "stop-band amplitude {amp} (want ≥ 20 dB down)");
    }

    #[test]
    fn impulse_response_symmetric() {
        let mut x = vec![0.0f64; 2001];
        x[1000] = 1.0;
        let cascade = butter_bandpass(4, 20.0, 200.0, 2000.0).unwrap();
        let y = sosfiltfilt(&cascade, &x).unwrap();
        for k in 1..600 {
            assert!(
                (y[1000 + k] - y[1000 - k]).abs() < 1e-9,
                "asymmetry at offset {k}"
            );
        }
    }

    #[test]
    fn reversal_commutes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cascade = butter_bandpass(4, 20.0, 200.0, 2000.0).unwrap();
        let fwd = sosfiltfilt(&cascade, &x).unwrap();
        let mut xr = x.clone();
        xr.reverse();
        let mut rev = sosfiltfilt(&cascade, &xr).unwrap();
        rev.reverse();
        for (a, b) in fwd.iter().zip(&rev) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn section_count_and_stability() {
        let cascade = butter_bandpass(4, 20.0, 200.0, 2000.0).unwrap();
        assert_eq!(cascade.sections.len(), 4);
        assert!(cascade.max_pole_radius < 1.0);
    }

    #[test]
    fn rejects_bad_band() {
        assert!(butter_bandpass(4, 200.0, 20.0, 2000.0).is_err());
        assert!(butter_bandpass(4, 20.0, 1200.0, 2000.0).is_err());
        assert!(butter_bandpass(0, 20.0, 200.0, 2000.0).is_err());
    }

    #[test]
    fn odd_order_designs_are_stable_and_flat() {
        // Exercises the real-prototype-pole branch.
        for order in [1, 3, 5] {
            let cascade = butter_bandpass(order, 20.0, 200.0, 2000.0).unwrap();
            assert_eq!(cascade.sections.len(), order);
            assert!(cascade.max_pole_radius < 1.0);
        }
        let n = 6000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 100.0 * i as f64 / 2000.0).sin())
            .collect();
        let cascade = butter_bandpass(3, 20.0, 200.0, 2000.0).unwrap();
        let y = sosfiltfilt(&cascade, &x).unwrap();
        let amp = y[1000..5000].iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.02, "odd-order in-band amplitude {amp}");
    }
}
