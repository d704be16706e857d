//! Audio frontend: ingestion, log-mel spectrograms, patch extraction.
//!
//! Fixed analysis parameters: 16 kHz mono input, 25 ms Hann window
//! (400 samples), 10 ms hop (160 samples), 80 mel bins spanning
//! 50-8000 Hz, natural log with a 1e-5 floor. Spectrograms are
//! standardized with dataset-level statistics and cut into
//! non-overlapping 16x16 patches, giving 5 frequency patches per column.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::resample::resample;
use crate::rng;
use crate::wav;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const WIN_LEN: usize = 400;
pub const HOP_LEN: usize = 160;
pub const N_FFT: usize = 512;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-5;
pub const PATCH_SIZE: usize = 16;
pub const N_FREQ_PATCHES: usize = N_MELS / PATCH_SIZE;
/// Flattened patch length (16 x 16).
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE;

/// Mono waveform at the canonical sample rate.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Ingest(format!(
                "expected {SAMPLE_RATE} Hz after ingestion, got {sample_rate}"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ingest("non-finite samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Log-scale mel spectrogram, `[n_mels x n_frames]`.
#[derive(Debug, Clone)]
pub struct LogMelSpec {
    pub values: Array2<f64>,
    pub standardized: bool,
}

/// Flattened 16x16 patches with their grid layout.
///
/// Patch `s` covers frequency patch `s % 5` of time patch `s / 5`
/// (frequency varies fastest), and is flattened row-major as
/// `values[f_local * 16 + t_local]`. The sequence index doubles as the
/// positional-table row for that grid cell.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Array2<f64>,
    /// (n_freq_patches, n_time_patches)
    pub grid_shape: (usize, usize),
    pub source_frames: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.patches.nrows()
    }
}

/// Load a waveform file, downmix, resample to 16 kHz and fit it to
/// `target_duration_s`: longer clips get a random contiguous crop drawn
/// from `crop_rng`, shorter ones are zero-padded at the end.
pub fn load_clip(
    path: &Path,
    target_duration_s: f64,
    crop_rng: &mut ChaCha8Rng,
) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = wav::decode(&bytes)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    if decoded.samples.is_empty() {
        return Err(Error::Ingest(format!("{}: empty clip", path.display())));
    }
    let samples = resample(&decoded.samples, decoded.sample_rate, SAMPLE_RATE);
    let clip = AudioClip::new(samples, SAMPLE_RATE)?;
    Ok(fit_duration(clip, target_duration_s, crop_rng))
}

/// Crop or pad an already-ingested clip to the target duration.
pub fn fit_duration(
    clip: AudioClip,
    target_duration_s: f64,
    crop_rng: &mut ChaCha8Rng,
) -> AudioClip {
    let target = (target_duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let mut samples = clip.samples;
    match samples.len().cmp(&target) {
        std::cmp::Ordering::Greater => {
            let start = crop_rng.gen_range(0..=samples.len() - target);
            samples = samples[start..start + target].to_vec();
        }
        std::cmp::Ordering::Less => samples.resize(target, 0.0),
        std::cmp::Ordering::Equal => {}
    }
    AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

/// Triangular mel filterbank `[n_mels x (n_fft/2 + 1)]`, area-normalized.
pub struct MelFilterbank {
    pub weights: Array2<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new() -> Self {
        let n_bins = N_FFT / 2 + 1;
        let mut weights = Array2::zeros((N_MELS, n_bins));
        let mel_lo = hz_to_mel(F_MIN);
        let mel_hi = hz_to_mel(F_MAX);
        // n_mels + 2 band edges, evenly spaced on the mel scale.
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = f64::from(SAMPLE_RATE) / N_FFT as f64;
        for m in 0..N_MELS {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            // Area normalization: peak 2 / (hi - lo).
            let norm = 2.0 / (hi - lo);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if w > 0.0 {
                    weights[[m, k]] = w * norm;
                }
            }
        }
        MelFilterbank { weights }
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of analysis frames for `n_samples` (no centering, no padding).
pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < WIN_LEN {
        0
    } else {
        1 + (n_samples - WIN_LEN) / HOP_LEN
    }
}

/// Log-mel spectrogram of a 16 kHz clip.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelSpec> {
    let n_frames = frame_count(clip.samples.len());
    if n_frames == 0 {
        return Err(Error::Ingest(format!(
            "clip of {} samples is shorter than one {WIN_LEN}-sample window",
            clip.samples.len()
        )));
    }
    let fb = MelFilterbank::new();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_FFT);
    // Periodic Hann window.
    let window: Vec<f64> = (0..WIN_LEN)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / WIN_LEN as f64).cos()))
        .collect();

    let n_bins = N_FFT / 2 + 1;
    let mut values = Array2::zeros((N_MELS, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; n_bins];
    for t in 0..n_frames {
        let start = t * HOP_LEN;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WIN_LEN {
                Complex::new(clip.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..N_MELS {
            let mut acc = 0.0;
            for k in 0..n_bins {
                acc += fb.weights[[m, k]] * power[k];
            }
            values[[m, t]] = (acc + LOG_FLOOR).ln();
        }
    }
    Ok(LogMelSpec {
        values,
        standardized: false,
    })
}

/// Standardize with dataset-level statistics.
pub fn standardize(spec: &LogMelSpec, stats: (f64, f64)) -> Result<LogMelSpec> {
    let (mean, std) = stats;
    if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Numeric(format!(
            "standardization requires finite mean and std > 0, got ({mean}, {std})"
        )));
    }
    Ok(LogMelSpec {
        values: spec.values.mapv(|v| (v - mean) / std),
        standardized: true,
    })
}

/// Pooled scalar mean/std of log-mel values over a seeded sample of up to
/// `max_clips` manifest entries. Unreadable clips are skipped; it is an
/// error if none can be read. Population std.
pub fn compute_dataset_stats(
    manifest: &Manifest,
    max_clips: usize,
    target_duration_s: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if manifest.is_empty() {
        return Err(Error::Dataset("empty manifest".into()));
    }
    let mut indices: Vec<usize> = (0..manifest.len()).collect();
    if manifest.len() > max_clips {
        let mut rng = rng::stream(seed, "stats-subset", &[]);
        // Partial Fisher-Yates: choose max_clips without replacement.
        for i in 0..max_clips {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(max_clips);
        // Fixed reduction order regardless of draw order.
        indices.sort_unstable();
    }

    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut count = 0usize;
    let mut readable = 0usize;
    for &i in &indices {
        let entry = &manifest.entries[i];
        let mut crop_rng = rng::stream(seed, "stats-crop", &[i as u64]);
        let clip = match load_clip(&entry.path, target_duration_s, &mut crop_rng) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let spec = log_mel(&clip)?;
        for &v in spec.values.iter() {
            sum += v;
            sumsq += v * v;
        }
        count += spec.values.len();
        readable += 1;
    }
    if readable == 0 {
        return Err(Error::Dataset("no readable clips in manifest".into()));
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(0.0);
    Ok((mean, var.sqrt()))
}

/// Cut a standardized spectrogram into flattened 16x16 patches.
///
/// The time axis is truncated to the largest multiple of 16; frequency
/// varies fastest in the output sequence.
pub fn patchify(spec: &LogMelSpec) -> Result<PatchGrid> {
    if !spec.standardized {
        return Err(Error::InvalidArg(
            "patchify expects a standardized spectrogram".into(),
        ));
    }
    let n_frames = spec.values.ncols();
    if n_frames < PATCH_SIZE {
        return Err(Error::Shape(format!(
            "need at least {PATCH_SIZE} frames, got {n_frames}"
        )));
    }
    debug_assert_eq!(spec.values.nrows(), N_MELS);
    let n_time = n_frames / PATCH_SIZE;
    let n_patches = N_FREQ_PATCHES * n_time;
    let mut patches = Array2::zeros((n_patches, PATCH_DIM));
    for pt in 0..n_time {
        for pf in 0..N_FREQ_PATCHES {
            let s = pt * N_FREQ_PATCHES + pf;
            for fl in 0..PATCH_SIZE {
                for tl in 0..PATCH_SIZE {
                    patches[[s, fl * PATCH_SIZE + tl]] =
                        spec.values[[pf * PATCH_SIZE + fl, pt * PATCH_SIZE + tl]];
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_shape: (N_FREQ_PATCHES, n_time),
        source_frames: n_frames,
    })
}

/// Grid dimensions produced by a clip of the given duration.
pub fn grid_for_duration(duration_s: f64) -> (usize, usize) {
    let n_samples = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    (N_FREQ_PATCHES, frame_count(n_samples) / PATCH_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn zero_clip(n: usize) -> AudioClip {
        AudioClip::new(vec![0.0; n], SAMPLE_RATE).unwrap()
    }

    /// Independent frame-count oracle: slide a window explicitly.
    fn brute_force_frames(n: usize) -> usize {
        let mut count = 0;
        let mut start = 0;
        while start + WIN_LEN <= n {
            count += 1;
            start += HOP_LEN;
        }
        count
    }

    #[test]
    fn frame_count_matches_oracle_for_spec_cases() {
        assert_eq!(brute_force_frames(96_000), 598);
        assert_eq!(frame_count(96_000), 598);
        assert_eq!(frame_count(400), 1);
        assert_eq!(frame_count(399), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn frame_count_formula_matches_sliding_window(n in 400usize..160_000) {
            prop_assert_eq!(frame_count(n), brute_force_frames(n));
        }
    }

    #[test]
    fn log_mel_shape_and_zero_input() {
        let spec = log_mel(&zero_clip(96_000)).unwrap();
        assert_eq!(spec.values.shape(), &[80, 598]);
        for &v in spec.values.iter() {
            assert_abs_diff_eq!(v, LOG_FLOOR.ln(), epsilon = 1e-12);
        }
        let one_frame = log_mel(&zero_clip(400)).unwrap();
        assert_eq!(one_frame.values.ncols(), 1);
        assert!(log_mel(&zero_clip(399)).is_err());
    }

    #[test]
    fn tone_lands_in_expected_mel_band() {
        let freq = 1000.0;
        let samples: Vec<f64> = (0..32_000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let spec = log_mel(&AudioClip::new(samples, SAMPLE_RATE).unwrap()).unwrap();
        // Peak mel bin should match where 1 kHz falls in the filterbank.
        let col = spec.values.column(30);
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let mel_frac = (hz_to_mel(freq) - hz_to_mel(F_MIN)) / (hz_to_mel(F_MAX) - hz_to_mel(F_MIN));
        let expected = (mel_frac * 81.0 - 1.0).round() as usize;
        assert!(
            (peak as isize - expected as isize).unsigned_abs() <= 1,
            "peak bin {peak}, expected near {expected}"
        );
    }

    #[test]
    fn standardize_cases() {
        let spec = LogMelSpec {
            values: Array2::from_elem((2, 3), 5.0),
            standardized: false,
        };
        let out = standardize(&spec, (5.0, 2.0)).unwrap();
        assert!(out.standardized);
        assert!(out.values.iter().all(|&v| v == 0.0));

        let ident = standardize(&spec, (0.0, 1.0)).unwrap();
        assert_eq!(ident.values, spec.values);

        assert!(standardize(&spec, (1.0, 0.0)).is_err());
        assert!(standardize(&spec, (f64::NAN, 1.0)).is_err());
    }

    #[test]
    fn standardize_roundtrip() {
        let values = Array2::from_shape_fn((4, 20), |(i, j)| (i as f64 - j as f64) * 0.31);
        let spec = LogMelSpec {
            values: values.clone(),
            standardized: false,
        };
        let out = standardize(&spec, (0.7, 3.1)).unwrap();
        for (orig, std) in values.iter().zip(out.values.iter()) {
            let back = std * 3.1 + 0.7;
            let rel = (back - orig).abs() / orig.abs().max(1e-9);
            assert!(rel < 1e-6, "{back} vs {orig}");
        }
    }

    fn standardized(values: Array2<f64>) -> LogMelSpec {
        LogMelSpec {
            values,
            standardized: true,
        }
    }

    #[test]
    fn patchify_shapes() {
        let g = patchify(&standardized(Array2::zeros((80, 598)))).unwrap();
        assert_eq!(g.grid_shape, (5, 37));
        assert_eq!(g.patches.shape(), &[185, 256]);

        let g = patchify(&standardized(Array2::zeros((80, 16)))).unwrap();
        assert_eq!(g.grid_shape, (5, 1));
        assert_eq!(g.n_patches(), 5);

        let g = patchify(&standardized(Array2::zeros((80, 31)))).unwrap();
        assert_eq!(g.grid_shape, (5, 1));
        assert_eq!(g.n_patches(), 5);

        assert!(patchify(&standardized(Array2::zeros((80, 15)))).is_err());
        assert!(patchify(&LogMelSpec {
            values: Array2::zeros((80, 32)),
            standardized: false
        })
        .is_err());
    }

    #[test]
    fn patchify_roundtrip_reconstructs_spectrogram() {
        let values = Array2::from_shape_fn((80, 45), |(m, t)| (m * 100 + t) as f64);
        let g = patchify(&standardized(values.clone())).unwrap();
        let (nf, nt) = g.grid_shape;
        let mut rebuilt = Array2::zeros((80, nt * PATCH_SIZE));
        for pt in 0..nt {
            for pf in 0..nf {
                let s = pt * nf + pf;
                for fl in 0..PATCH_SIZE {
                    for tl in 0..PATCH_SIZE {
                        rebuilt[[pf * PATCH_SIZE + fl, pt * PATCH_SIZE + tl]] =
                            g.patches[[s, fl * PATCH_SIZE + tl]];
                    }
                }
            }
        }
        // Truncated to 32 frames; must match the source exactly there.
        for m in 0..80 {
            for t in 0..32 {
                assert_eq!(rebuilt[[m, t]], values[[m, t]]);
            }
        }
    }

    #[test]
    fn load_clip_crop_pad_and_determinism() {
        let dir = tempfile::tempdir().unwrap();

        // 10-s stereo at 44.1 kHz -> 6-s mono 16 kHz crop.
        let long: Vec<f64> = (0..441_000)
            .map(|i| (2.0 * std::f64::consts::PI * 330.0 * i as f64 / 44_100.0).sin() * 0.4)
            .collect();
        let mut interleaved = Vec::new();
        for s in &long {
            interleaved.push(*s);
            interleaved.push(*s);
        }
        // Encode stereo by hand through the mono encoder layout.
        let mut bytes = wav::encode_pcm16(&interleaved, 44_100);
        bytes[22] = 2; // channels
        let byte_rate = 44_100u32 * 4;
        bytes[28..32].copy_from_slice(&byte_rate.to_le_bytes());
        bytes[32] = 4; // block align
        let p_long = dir.path().join("long.wav");
        std::fs::write(&p_long, &bytes).unwrap();

        let mut rng_a = crate::rng::stream(9, "crop", &[0]);
        let clip = load_clip(&p_long, 6.0, &mut rng_a).unwrap();
        assert_eq!(clip.samples.len(), 96_000);
        assert_eq!(clip.sample_rate, 16_000);

        let mut rng_b = crate::rng::stream(9, "crop", &[0]);
        let again = load_clip(&p_long, 6.0, &mut rng_b).unwrap();
        assert_eq!(clip.samples, again.samples);

        // Exact-duration mono 16 kHz file passes through unchanged.
        let exact: Vec<f64> = (0..96_000).map(|i| ((i % 100) as f64 / 100.0) - 0.5).collect();
        let p_exact = dir.path().join("exact.wav");
        std::fs::write(&p_exact, wav::encode_f32(&exact, 16_000)).unwrap();
        let mut r = crate::rng::stream(9, "crop", &[1]);
        let clip = load_clip(&p_exact, 6.0, &mut r).unwrap();
        for (a, b) in clip.samples.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-7);
        }

        // 3-s file zero-padded to 6 s.
        let short = vec![0.25; 48_000];
        let p_short = dir.path().join("short.wav");
        std::fs::write(&p_short, wav::encode_f32(&short, 16_000)).unwrap();
        let mut r = crate::rng::stream(9, "crop", &[2]);
        let clip = load_clip(&p_short, 6.0, &mut r).unwrap();
        assert_eq!(clip.samples.len(), 96_000);
        assert!(clip.samples[..48_000].iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(clip.samples[48_000..].iter().all(|&v| v == 0.0));

        // Corrupt and empty files are ingestion errors.
        let p_bad = dir.path().join("bad.wav");
        std::fs::write(&p_bad, b"not a wav").unwrap();
        let mut r = crate::rng::stream(9, "crop", &[3]);
        assert!(load_clip(&p_bad, 6.0, &mut r).is_err());
        assert!(load_clip(&dir.path().join("missing.wav"), 6.0, &mut r).is_err());
    }

    #[test]
    fn dataset_stats_match_pooled_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, freq: f64| {
            let samples: Vec<f64> = (0..16_000)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() * 0.3)
                .collect();
            let p = dir.path().join(name);
            let bytes = wav::encode_f32(&samples, 16_000);
            std::fs::write(&p, &bytes).unwrap();
            // The oracle must see the same f32-quantized samples the
            // pipeline will read back.
            wav::decode(&bytes).unwrap().samples
        };
        let s1 = mk("a.wav", 220.0);
        let s2 = mk("b.wav", 1500.0);

        let manifest = Manifest::parse(
            "path,labels,split\na.wav,,train\nb.wav,,train\n",
            Some(dir.path()),
        )
        .unwrap();
        let (mean, std) = compute_dataset_stats(&manifest, 10, 1.0, 5).unwrap();

        // Brute-force pooled statistics straight from the definitions.
        let mut all = Vec::new();
        for s in [&s1, &s2] {
            let spec = log_mel(&AudioClip::new(s.clone(), 16_000).unwrap()).unwrap();
            all.extend(spec.values.iter().copied());
        }
        let m: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let v: f64 = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert_abs_diff_eq!(mean, m, epsilon = 1e-9);
        assert_abs_diff_eq!(std, v.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn dataset_stats_identical_clips_and_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..16_000).map(|i| ((i as f64) * 0.01).sin() * 0.2).collect();
        for name in ["a.wav", "b.wav", "c.wav"] {
            std::fs::write(dir.path().join(name), wav::encode_f32(&samples, 16_000)).unwrap();
        }
        let manifest = Manifest::parse(
            "path,labels,split\na.wav,,train\nb.wav,,train\nc.wav,,train\n",
            Some(dir.path()),
        )
        .unwrap();
        let (_, std) = compute_dataset_stats(&manifest, 10, 1.0, 5).unwrap();
        let spec = log_mel(&AudioClip::new(samples, 16_000).unwrap()).unwrap();
        let vals: Vec<f64> = spec.values.iter().copied().collect();
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let v: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert_abs_diff_eq!(std, v.sqrt(), epsilon = 1e-9);

        // Single all-zero clip: std 0, downstream standardize rejects.
        std::fs::write(dir.path().join("z.wav"), wav::encode_f32(&vec![0.0; 16_000], 16_000))
            .unwrap();
        let zm = Manifest::parse("path,labels,split\nz.wav,,train\n", Some(dir.path())).unwrap();
        let (mean, std) = compute_dataset_stats(&zm, 10, 1.0, 5).unwrap();
        assert_abs_diff_eq!(mean, LOG_FLOOR.ln(), epsilon = 1e-9);
        assert_eq!(std, 0.0);
        let spec = LogMelSpec {
            values: Array2::zeros((80, 16)),
            standardized: false,
        };
        assert!(standardize(&spec, (mean, std)).is_err());

        // No readable clips is an error.
        let bad = Manifest::parse("path,labels,split\nmissing.wav,,train\n", Some(dir.path()))
            .unwrap();
        assert!(compute_dataset_stats(&bad, 10, 1.0, 5).is_err());
    }

    #[test]
    fn grid_for_duration_matches_patchify() {
        assert_eq!(grid_for_duration(6.0), (5, 37));
        assert_eq!(grid_for_duration(1.0), (5, 6));
    }
}
