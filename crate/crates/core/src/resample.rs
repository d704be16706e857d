//! Windowed-sinc sample-rate conversion.
//!
//! Direct-form polyphase evaluation: each output sample is an inner
//! product of the input with a Hann-windowed sinc kernel centered at the
//! (generally fractional) source position. The kernel cutoff sits at the
//! lower of the two Nyquist rates so downsampling stays alias-free.

use std::f64::consts::PI;

const HALF_WIDTH: usize = 32;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resample `input` from `from_rate` to `to_rate`.
///
/// Returns the input unchanged when the rates already match. Output
/// length is `ceil(n * to_rate / from_rate)`.
pub fn resample(input: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    assert!(from_rate > 0 && to_rate > 0, "rates must be positive");
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }

    let ratio = f64::from(to_rate) / f64::from(from_rate);
    let n_out = (input.len() as f64 * ratio).ceil() as usize;
    // Cutoff relative to the input rate; <1 when downsampling.
    let cutoff = ratio.min(1.0);
    let taps = (HALF_WIDTH as f64 / cutoff).ceil() as isize;

    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let center = i as f64 / ratio;
        let lo = center.floor() as isize - taps + 1;
        let hi = center.floor() as isize + taps;
        let mut acc = 0.0;
        for k in lo..=hi {
            if k < 0 || k as usize >= input.len() {
                continue;
            }
            let d = center - k as f64;
            // Hann window over the kernel support.
            let w = 0.5 * (1.0 + (PI * d / taps as f64).cos());
            acc += input[k as usize] * sinc(d * cutoff) * cutoff * w;
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate).sin())
            .collect()
    }

    #[test]
    fn identity_when_rates_match() {
        let x = sine(440.0, 16000.0, 1000);
        assert_eq!(resample(&x, 16000, 16000), x);
    }

    #[test]
    fn output_length() {
        let x = vec![0.0; 44100];
        assert_eq!(resample(&x, 44100, 16000).len(), 16000);
        let x = vec![0.0; 8000];
        assert_eq!(resample(&x, 8000, 16000).len(), 16000);
    }

    #[test]
    fn preserves_tone_frequency_on_downsample() {
        let rate_in = 44100.0;
        let freq = 440.0;
        let x = sine(freq, rate_in, 44100);
        let y = resample(&x, 44100, 16000);
        let reference = sine(freq, 16000.0, y.len());
        // Compare away from the edges where the kernel is truncated.
        let a = &y[800..y.len() - 800];
        let b = &reference[800..reference.len() - 800];
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let corr = dot / (na * nb);
        assert!(corr > 0.999, "correlation {corr}");
    }

    #[test]
    fn upsample_preserves_tone() {
        let freq = 300.0;
        let x = sine(freq, 8000.0, 8000);
        let y = resample(&x, 8000, 16000);
        let reference = sine(freq, 16000.0, y.len());
        let a = &y[400..y.len() - 400];
        let b = &reference[400..reference.len() - 400];
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn deterministic() {
        let x = sine(997.0, 22050.0, 4000);
        assert_eq!(resample(&x, 22050, 16000), resample(&x, 22050, 16000));
    }
}
