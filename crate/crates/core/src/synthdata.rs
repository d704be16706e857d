//! Synthetic four-class audio dataset generator.
//!
//! Ships in-repo so pretraining, probing and the ablation harness all run
//! without downloading anything. The classes share overlapping spectral
//! ranges but differ in temporal/timbral structure, which keeps a linear
//! probe on raw-ish features from saturating while leaving plenty for a
//! trained encoder to pick up:
//!
//! * `harmonic` - steady partial stacks with vibrato, random f0/decay;
//! * `chirp`    - log-frequency sweeps, random span and direction;
//! * `am_noise` - band-passed noise with slow sinusoidal amplitude
//!   modulation;
//! * `pulses`   - trains of sharply decaying band-passed noise bursts.
//!
//! Every clip gets a random gain and a white noise floor. Output is
//! 16-bit PCM at 16 kHz plus a `manifest.csv` with TVT or fold splits.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::SAMPLE_RATE;
use crate::manifest::{Manifest, ManifestEntry};
use crate::rng;
use crate::wav;

pub const CLASSES: [&str; 4] = ["harmonic", "chirp", "am_noise", "pulses"];

#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Everything labeled `train` (pretraining data).
    AllTrain,
    /// Proportional train/valid/test split per class; `test` is the rest.
    Tvt { train: f64, valid: f64 },
    /// Round-robin fold assignment `0..k`.
    Folds(usize),
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub splits: SplitSpec,
}

/// Simple band-pass biquad (constant peak gain), applied in place.
fn bandpass(x: &mut [f64], center_hz: f64, q: f64) {
    let omega = 2.0 * PI * center_hz / f64::from(SAMPLE_RATE);
    let alpha = omega.sin() / (2.0 * q);
    let b0 = alpha;
    let b2 = -alpha;
    let a0 = 1.0 + alpha;
    let a1 = -2.0 * omega.cos();
    let a2 = 1.0 - alpha;
    let (b0, b2, a1, a2) = (b0 / a0, b2 / a0, a1 / a0, a2 / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let x0 = *v;
        let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0;
    }
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let max = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max > 1e-9 {
        let s = peak / max;
        for v in x.iter_mut() {
            *v *= s;
        }
    }
}

/// Render one clip of the given class index.
pub fn render_clip(class: usize, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let fs = f64::from(SAMPLE_RATE);
    let mut x = vec![0.0f64; n];
    match class {
        // Steady harmonic stack with vibrato.
        0 => {
            let f0: f64 = rng.gen_range(110.0..520.0);
            let decay: f64 = rng.gen_range(0.8..1.6);
            let vib_rate: f64 = rng.gen_range(4.0..7.0);
            let vib_depth: f64 = rng.gen_range(0.003..0.012);
            let n_partials = 5;
            let phases: Vec<f64> = (0..n_partials).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let vib = 1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin();
                let mut s = 0.0;
                for (k, phase) in phases.iter().enumerate() {
                    let h = (k + 1) as f64;
                    let f = f0 * h * vib;
                    if f < fs / 2.0 {
                        s += (2.0 * PI * f * t + phase).sin() / h.powf(decay);
                    }
                }
                *v = s;
            }
        }
        // Log-frequency sweep, random direction.
        1 => {
            let f_lo: f64 = rng.gen_range(150.0..400.0);
            let f_hi: f64 = rng.gen_range(1500.0..4000.0);
            let up: bool = rng.gen_bool(0.5);
            let phase0: f64 = rng.gen_range(0.0..2.0 * PI);
            let (fa, fb) = if up { (f_lo, f_hi) } else { (f_hi, f_lo) };
            let ratio = fb / fa;
            let dur = n as f64 / fs;
            let mut phase = phase0;
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let f = fa * ratio.powf(t / dur);
                phase += 2.0 * PI * f / fs;
                *v = phase.sin();
            }
        }
        // Band-passed noise, slow sinusoidal AM.
        2 => {
            for v in x.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let center: f64 = rng.gen_range(500.0..3000.0);
            let q: f64 = rng.gen_range(1.0..2.5);
            bandpass(&mut x, center, q);
            let am_rate: f64 = rng.gen_range(2.0..8.0);
            let am_phase: f64 = rng.gen_range(0.0..2.0 * PI);
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / fs;
                *v *= 0.2 + 0.8 * (0.5 + 0.5 * (2.0 * PI * am_rate * t + am_phase).sin());
            }
        }
        // Sharp decaying noise bursts.
        3 => {
            let rate: f64 = rng.gen_range(3.0..10.0);
            let decay_s: f64 = rng.gen_range(0.03..0.08);
            let center: f64 = rng.gen_range(800.0..4000.0);
            let offset: f64 = rng.gen_range(0.0..1.0 / rate);
            let mut noise = vec![0.0f64; n];
            for v in noise.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            bandpass(&mut noise, center, 1.5);
            let period = fs / rate;
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 + offset * fs;
                let since_burst = (t % period) / fs;
                *v = noise[i] * (-since_burst / decay_s).exp();
            }
        }
        _ => panic!("unknown class {class}"),
    }

    let gain = rng.gen_range(0.15..0.5);
    normalize_peak(&mut x, gain);
    // White noise floor.
    let floor = gain * 0.05;
    for v in x.iter_mut() {
        *v += rng.gen_range(-floor..floor);
    }
    x
}

fn split_label(spec: &SplitSpec, idx: usize, n: usize) -> String {
    match spec {
        SplitSpec::AllTrain => "train".to_string(),
        SplitSpec::Tvt { train, valid } => {
            let f = idx as f64 / n as f64;
            if f < *train {
                "train".to_string()
            } else if f < train + valid {
                "valid".to_string()
            } else {
                "test".to_string()
            }
        }
        SplitSpec::Folds(k) => (idx % k).to_string(),
    }
}

/// Generate the dataset under `dir` and return the manifest path.
pub fn generate(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.n_per_class == 0 {
        return Err(Error::InvalidArg("n_per_class must be positive".into()));
    }
    if let SplitSpec::Folds(k) = spec.splits {
        if k < 2 {
            return Err(Error::InvalidArg("need at least 2 folds".into()));
        }
    }
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut entries = Vec::new();
    for (class, class_name) in CLASSES.iter().enumerate() {
        for idx in 0..spec.n_per_class {
            let mut clip_rng =
                rng::stream(spec.seed, "synth", &[class as u64, idx as u64]);
            let samples = render_clip(class, spec.duration_s, &mut clip_rng);
            let name = format!("{class_name}_{idx:04}.wav");
            let path = wav_dir.join(&name);
            std::fs::write(&path, wav::encode_pcm16(&samples, SAMPLE_RATE))
                .map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                path: PathBuf::from("wavs").join(&name),
                labels: vec![class_name.to_string()],
                split: split_label(&spec.splits, idx, spec.n_per_class),
            });
        }
    }
    let manifest = Manifest { entries };
    let manifest_path = dir.join("manifest.csv");
    manifest.write(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend;

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_per_class: 2,
            duration_s: 0.5,
            seed: 3,
            splits: SplitSpec::AllTrain,
        };
        generate(a.path(), &spec).unwrap();
        generate(b.path(), &spec).unwrap();
        for class in CLASSES {
            for i in 0..2 {
                let name = format!("wavs/{class}_{i:04}.wav");
                let ba = std::fs::read(a.path().join(&name)).unwrap();
                let bb = std::fs::read(b.path().join(&name)).unwrap();
                assert_eq!(ba, bb, "{name}");
            }
        }
    }

    #[test]
    fn manifest_layout_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_per_class: 10,
            duration_s: 0.3,
            seed: 1,
            splits: SplitSpec::Tvt {
                train: 0.6,
                valid: 0.2,
            },
        };
        let path = generate(dir.path(), &spec).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.len(), 40);
        assert_eq!(m.subset("train").len(), 24);
        assert_eq!(m.subset("valid").len(), 8);
        assert_eq!(m.subset("test").len(), 8);
        for e in &m.entries {
            assert!(e.path.exists(), "{:?}", e.path);
            assert_eq!(e.labels.len(), 1);
        }

        let spec = SynthSpec {
            n_per_class: 6,
            duration_s: 0.3,
            seed: 1,
            splits: SplitSpec::Folds(3),
        };
        let path = generate(dir.path().join("folds").as_path(), &spec).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.folds().unwrap(), vec!["0", "1", "2"]);
        assert_eq!(m.subset("0").len(), 8);
    }

    #[test]
    fn classes_are_audible_and_distinct() {
        let mut r = rng::stream(5, "synth-test", &[]);
        for class in 0..4 {
            let x = render_clip(class, 1.0, &mut r);
            assert_eq!(x.len(), 16_000);
            let peak = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(peak > 0.1 && peak <= 0.6, "class {class} peak {peak}");
            assert!(x.iter().all(|v| v.is_finite()));
        }

        // Harmonic energy is narrowband; am_noise is broadband.
        let mut r1 = rng::stream(6, "synth-test", &[0]);
        let harmonic = render_clip(0, 1.0, &mut r1);
        let mut r2 = rng::stream(6, "synth-test", &[2]);
        let noise = render_clip(2, 1.0, &mut r2);
        let spec_of = |s: Vec<f64>| {
            let clip = frontend::AudioClip::new(s, SAMPLE_RATE).unwrap();
            frontend::log_mel(&clip).unwrap().values
        };
        let count_active = |v: ndarray::Array2<f64>| {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v.outer_iter()
                .filter(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) > max - 4.0)
                .count()
        };
        let h_bands = count_active(spec_of(harmonic));
        let n_bands = count_active(spec_of(noise));
        assert!(
            h_bands < n_bands,
            "harmonic bands {h_bands} vs noise bands {n_bands}"
        );
    }
}
