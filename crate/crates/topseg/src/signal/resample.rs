//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc
//! anti-aliasing filter.
//!
//! Conceptually: upsample by L (zero stuffing), low-pass, downsample by M.
//! The implementation evaluates only the taps that land on real input
//! samples, so the cost is one FIR dot product of length ~N/L per output
//! sample. The filter is centered, so the output has no net delay.

use crate::error::{Error, Result};

/// Stop-band attenuation target for the anti-aliasing filter, in dB.
const STOPBAND_DB: f64 = 70.0;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..60 {
        term *= half / k as f64;
        let sq = term * term;
        sum += sq;
        if sq < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser shape parameter for a given stop-band attenuation (> 50 dB case).
fn kaiser_beta(atten_db: f64) -> f64 {
    0.1102 * (atten_db - 8.7)
}

/// Design the centered Kaiser-windowed sinc low-pass used by
/// [`resample_rational`]: cutoff and transition width in Hz relative to the
/// upsampled rate `fs_up`, unity DC gain before the upsampling gain `l`.
fn design_lowpass(fs_up: f64, cutoff: f64, transition: f64, l: usize) -> Vec<f64> {
    let beta = kaiser_beta(STOPBAND_DB);
    let delta_omega = 2.0 * std::f64::consts::PI * transition / fs_up;
    let mut taps = ((STOPBAND_DB - 7.95) / (2.285 * delta_omega)).ceil() as usize + 1;
    if taps % 2 == 0 {
        taps += 1;
    }
    let center = (taps - 1) as f64 / 2.0;
    let omega_c = 2.0 * std::f64::consts::PI * cutoff / fs_up;
    let i0_beta = bessel_i0(beta);
    (0..taps)
        .map(|m| {
            let t = m as f64 - center;
            let sinc = if t == 0.0 {
                omega_c / std::f64::consts::PI
            } else {
                (omega_c * t).sin() / (std::f64::consts::PI * t)
            };
            let frac = t / center;
            let window = bessel_i0(beta * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
            l as f64 * sinc * window
        })
        .collect()
}

/// Resample `x` from `rate_in` to `rate_out` Hz by the reduced rational
/// ratio L/M. Output length is `ceil(len * L / M)`.
pub fn resample_rational(x: &[f64], rate_in: u64, rate_out: u64) -> Result<Vec<f64>> {
    if rate_in == 0 || rate_out == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let g = gcd(rate_in, rate_out);
    let l = (rate_out / g) as usize;
    let m = (rate_in / g) as usize;
    if l == 1 && m == 1 {
        return Ok(x.to_vec());
    }

    let fs_up = rate_in as f64 * l as f64;
    // Pass 0.45 and stop 0.50 of the *lower* rate: anti-alias for
    // downsampling, anti-image for upsampling.
    let f_ref = rate_in.min(rate_out) as f64;
    let cutoff = 0.475 * f_ref;
    let transition = 0.05 * f_ref;
    let h = design_lowpass(fs_up, cutoff, transition, l);
    let center = (h.len() - 1) / 2;

    let n_in = x.len();
    let n_out = (n_in * l).div_ceil(m);
    let mut y = Vec::with_capacity(n_out);
    for j in 0..n_out {
        // Upsampled center position of output j, shifted by the filter
        // center so the FIR is evaluated symmetrically around it.
        let pos = j * m + center;
        let i_max = (pos / l).min(n_in - 1);
        let i_min = pos.saturating_sub(h.len() - 1).div_ceil(l);
        let mut acc = 0.0f64;
        for i in i_min..=i_max {
            acc += x[i] * h[pos - i * l];
        }
        y.push(acc);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect()
    }

    /// Naive DFT magnitude at one frequency over an interior slice.
    fn dft_mag(x: &[f64], freq: f64, fs: f64) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (i, &v) in x.iter().enumerate() {
            let phi = 2.0 * std::f64::consts::PI * freq * i as f64 / fs;
            re += v * phi.cos();
            im -= v * phi.sin();
        }
        2.0 * (re * re + im * im).sqrt() / n
    }

    #[test]
    fn length_2000_to_600() {
        let y = resample_rational(&sine(50.0, 2000.0, 2000), 2000, 600).unwrap();
        assert_eq!(y.len(), 600);
    }

    #[test]
    fn length_half_rate() {
        let y = resample_rational(&vec![0.25f64; 12000], 1200, 600).unwrap();
        assert_eq!(y.len(), 6000);
    }

    #[test]
    fn identity_when_rates_match() {
        let x = sine(10.0, 600.0, 600);
        let y = resample_rational(&x, 600, 600).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn passband_tone_preserved() {
        // 50 Hz is well inside the 0.45*600 = 270 Hz passband.
        let x = sine(50.0, 2000.0, 8000);
        let y = resample_rational(&x, 2000, 600).unwrap();
        let interior = &y[300..y.len() - 300];
        let amp = dft_mag(interior, 50.0, 600.0);
        assert!((amp - 1.0).abs() < 0.01, "passband amplitude {amp}");
    }

    #[test]
    fn no_alias_above_minus_40db() {
        // A 250 Hz tone stays below the 300 Hz output Nyquist; everything
        // except the tone itself must sit 40 dB under the peak.
        let x = sine(250.0, 2000.0, 8000);
        let y = resample_rational(&x, 2000, 600).unwrap();
        let interior = &y[300..y.len() - 300];
        let peak = dft_mag(interior, 250.0, 600.0);
        assert!(peak > 0.5, "tone lost: {peak}");
        for f in (5..295).step_by(5) {
            let ff = f as f64;
            if (ff - 250.0).abs() < 10.0 {
                continue;
            }
            let mag = dft_mag(interior, ff, 600.0);
            assert!(
                mag < peak * 0.01,
                "component at {ff} Hz is {mag} vs peak {peak}"
            );
        }
    }

    #[test]
    fn dc_gain_unity() {
        let x = vec![1.0f64; 4000];
        let y = resample_rational(&x, 2000, 600).unwrap();
        let mid = &y[300..y.len() - 300];
        for &v in mid {
            assert!((v - 1.0).abs() < 1e-3, "DC level {v}");
        }
    }
}
