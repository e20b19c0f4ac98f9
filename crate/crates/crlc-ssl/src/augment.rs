//! Stochastic signal augmentations used to build contrastive views: an
//! EEG pipeline and an ECG pipeline, each applying a fixed order of
//! transforms with freshly sampled parameters. Parameter structs are
//! public so transforms can be driven with forced values.

use crate::data::Window;
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Eeg,
    Ecg,
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentSpec {
    pub family: Family,
    pub sample_rate: f64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate <= 0.0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        Ok(())
    }
}

/// Applies the pipeline for the spec's family.
pub fn augment(w: &Window, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<Window> {
    spec.validate()?;
    match spec.family {
        Family::Eeg => eeg_augment(w, spec.sample_rate, rng),
        Family::Ecg => ecg_augment(w, spec.sample_rate, rng),
    }
}

/// One draw of every EEG transform parameter. Transform order is fixed:
/// scale, circular shift, DC shift, zero mask, noise, bandstop.
#[derive(Clone, Debug)]
pub struct EegParams {
    pub scale: f32,
    /// Circular shift in samples; positive delays the signal.
    pub shift: i64,
    pub dc: f32,
    pub mask_start: usize,
    pub mask_len: usize,
    pub noise_sigma: f64,
    /// None bypasses the filter stage.
    pub bandstop_center_hz: Option<f64>,
}

pub const EEG_BANDSTOP_WIDTH_HZ: f64 = 5.0;

impl EegParams {
    /// Parameters under which the pipeline is the identity map.
    pub fn neutral() -> Self {
        Self {
            scale: 1.0,
            shift: 0,
            dc: 0.0,
            mask_start: 0,
            mask_len: 0,
            noise_sigma: 0.0,
            bandstop_center_hz: None,
        }
    }

    pub fn sample(t: usize, rng: &mut impl Rng) -> Self {
        Self {
            scale: rng.gen_range(0.5..2.0),
            shift: rng.gen_range(-38..=38),
            dc: rng.gen_range(-10.0..10.0),
            mask_start: rng.gen_range(0..t),
            mask_len: rng.gen_range(0..=112),
            noise_sigma: rng.gen_range(0.01..0.2),
            bandstop_center_hz: Some(rng.gen_range(2.8..41.3)),
        }
    }
}

pub fn eeg_apply(
    w: &Window,
    p: &EegParams,
    sample_rate: f64,
    rng: &mut impl Rng,
) -> Result<Window> {
    let t = w.len();
    let mut x = w.values().to_owned();
    x *= p.scale;
    if p.shift != 0 {
        let shift = p.shift.rem_euclid(t as i64) as usize;
        let src = x.clone();
        for c in 0..x.nrows() {
            for j in 0..t {
                x[[c, j]] = src[[c, (j + t - shift) % t]];
            }
        }
    }
    x += p.dc;
    for j in 0..p.mask_len.min(t) {
        let col = (p.mask_start + j) % t;
        x.column_mut(col).fill(0.0);
    }
    if p.noise_sigma > 0.0 {
        let noise =
            Normal::new(0.0, p.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        x.mapv_inplace(|v| v + noise.sample(rng) as f32);
    }
    if let Some(center) = p.bandstop_center_hz {
        let mut filtered = Array2::zeros(x.raw_dim());
        for (c, row) in x.rows().into_iter().enumerate() {
            let channel: Vec<f32> = row.to_vec();
            let out = bandstop(&channel, center, EEG_BANDSTOP_WIDTH_HZ, sample_rate)?;
            for (j, v) in out.into_iter().enumerate() {
                filtered[[c, j]] = v;
            }
        }
        x = filtered;
    }
    Window::new(x)
}

/// Full EEG pipeline with freshly sampled parameters.
pub fn eeg_augment(w: &Window, sample_rate: f64, rng: &mut impl Rng) -> Result<Window> {
    if w.len() <= 76 {
        return Err(Error::invalid(
            "EEG augmentation needs more than 76 samples for the time shift",
        ));
    }
    let p = EegParams::sample(w.len(), rng);
    eeg_apply(w, &p, sample_rate, rng)
}

/// One draw of every ECG transform parameter. Transform order is fixed:
/// lead mask, powerline, noise, baseline shift, baseline wander.
#[derive(Clone, Debug)]
pub struct EcgParams {
    pub lead_mask: Vec<bool>,
    pub powerline_hz: f64,
    pub powerline_phase: f64,
    pub powerline_amp: f32,
    pub noise_sigma: f64,
    pub shift_start: usize,
    pub shift_mag: f32,
    /// Per-channel sign, +1 or -1.
    pub shift_signs: Vec<f32>,
    pub wander_freqs: [f64; 3],
    pub wander_amps: [f32; 3],
    pub wander_channel_scale: Vec<f32>,
}

impl EcgParams {
    pub fn neutral(c: usize) -> Self {
        Self {
            lead_mask: vec![false; c],
            powerline_hz: 50.0,
            powerline_phase: 0.0,
            powerline_amp: 0.0,
            noise_sigma: 0.0,
            shift_start: 0,
            shift_mag: 0.0,
            shift_signs: vec![1.0; c],
            wander_freqs: [0.1; 3],
            wander_amps: [0.0; 3],
            wander_channel_scale: vec![1.0; c],
        }
    }

    pub fn sample(c: usize, t: usize, rng: &mut impl Rng) -> Result<Self> {
        let seg = ((0.2 * t as f64).round() as usize).min(t);
        let scale_dist = Normal::new(1.0, 0.5).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self {
            lead_mask: (0..c).map(|_| rng.gen_bool(0.5)).collect(),
            powerline_hz: if rng.gen_bool(0.5) { 50.0 } else { 60.0 },
            powerline_phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            powerline_amp: rng.gen_range(0.0..0.5),
            noise_sigma: rng.gen_range(0.01..0.5),
            shift_start: rng.gen_range(0..=t - seg),
            shift_mag: rng.gen_range(0.0..0.25),
            shift_signs: (0..c)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
            wander_freqs: [
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ],
            wander_amps: [
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
            ],
            wander_channel_scale: (0..c).map(|_| scale_dist.sample(rng) as f32).collect(),
        })
    }
}

pub fn ecg_apply(
    w: &Window,
    p: &EcgParams,
    sample_rate: f64,
    rng: &mut impl Rng,
) -> Result<Window> {
    let (c, t) = (w.channels(), w.len());
    if p.lead_mask.len() != c || p.shift_signs.len() != c || p.wander_channel_scale.len() != c {
        return Err(Error::invalid("per-channel parameter length mismatch"));
    }
    let mut x = w.values().to_owned();
    for (ch, &masked) in p.lead_mask.iter().enumerate() {
        if masked {
            x.row_mut(ch).fill(0.0);
        }
    }
    if p.powerline_amp != 0.0 {
        let omega = 2.0 * std::f64::consts::PI * p.powerline_hz / sample_rate;
        for j in 0..t {
            let v = p.powerline_amp * (omega * j as f64 + p.powerline_phase).sin() as f32;
            x.column_mut(j).mapv_inplace(|y| y + v);
        }
    }
    if p.noise_sigma > 0.0 {
        let noise =
            Normal::new(0.0, p.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        x.mapv_inplace(|v| v + noise.sample(rng) as f32);
    }
    let seg = ((0.2 * t as f64).round() as usize).min(t);
    if p.shift_mag != 0.0 && seg > 0 {
        if p.shift_start + seg > t {
            return Err(Error::invalid("baseline shift segment out of range"));
        }
        for ch in 0..c {
            let delta = p.shift_signs[ch] * p.shift_mag;
            for j in p.shift_start..p.shift_start + seg {
                x[[ch, j]] += delta;
            }
        }
    }
    if p.wander_amps.iter().any(|&a| a != 0.0) {
        let mut wander = vec![0.0f32; t];
        for j in 0..t {
            let mut v = 0.0f64;
            for k in 0..3 {
                let omega = 2.0 * std::f64::consts::PI * p.wander_freqs[k] / sample_rate;
                v += p.wander_amps[k] as f64 * (omega * j as f64).cos();
            }
            wander[j] = v as f32;
        }
        for ch in 0..c {
            let s = p.wander_channel_scale[ch];
            for j in 0..t {
                x[[ch, j]] += s * wander[j];
            }
        }
    }
    Window::new(x)
}

/// Full ECG pipeline with freshly sampled parameters.
pub fn ecg_augment(w: &Window, sample_rate: f64, rng: &mut impl Rng) -> Result<Window> {
    let p = EcgParams::sample(w.channels(), w.len(), rng)?;
    ecg_apply(w, &p, sample_rate, rng)
}

/// Band-reject filter realized as a zero-phase frequency-domain mask:
/// unity in the passband, zero across the stop band, raised-cosine
/// transitions one band-width wide on each side.
pub fn bandstop(x: &[f32], center_hz: f64, width_hz: f64, sample_rate: f64) -> Result<Vec<f32>> {
    let lo = center_hz - width_hz / 2.0;
    let hi = center_hz + width_hz / 2.0;
    if !(lo > 0.0 && hi < sample_rate / 2.0) {
        return Err(Error::invalid(format!(
            "bandstop band [{lo:.3}, {hi:.3}] Hz outside (0, {:.3})",
            sample_rate / 2.0
        )));
    }
    let t = x.len();
    if t == 0 {
        return Ok(Vec::new());
    }
    let tw = width_hz;
    let mask = |f: f64| -> f64 {
        if f >= lo && f <= hi {
            0.0
        } else if f > lo - tw && f < lo {
            0.5 * (1.0 + ((f - (lo - tw)) / tw * std::f64::consts::PI).cos())
        } else if f > hi && f < hi + tw {
            0.5 * (1.0 - ((f - hi) / tw * std::f64::consts::PI).cos())
        } else {
            1.0
        }
    };
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let ifft = planner.plan_fft_inverse(t);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft.process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(t - k) as f64;
        *v *= mask(bin * sample_rate / t as f64);
    }
    ifft.process(&mut buf);
    Ok(buf.iter().map(|v| (v.re / t as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine_window(c: usize, t: usize) -> Window {
        Window::new(Array2::from_shape_fn((c, t), |(ch, j)| {
            ((0.07 + 0.01 * ch as f64) * j as f64).sin() as f32
        }))
        .unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rms(x: &[f32]) -> f64 {
        (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn eeg_neutral_is_identity() {
        let w = sine_window(3, 300);
        let out = eeg_apply(&w, &EegParams::neutral(), 100.0, &mut rng(0)).unwrap();
        assert_eq!(out.values(), w.values());
    }

    #[test]
    fn eeg_pure_scale() {
        let w = sine_window(2, 200);
        let p = EegParams {
            scale: 2.0,
            ..EegParams::neutral()
        };
        let out = eeg_apply(&w, &p, 100.0, &mut rng(0)).unwrap();
        for (o, i) in out.values().iter().zip(w.values().iter()) {
            assert_eq!(*o, 2.0 * i);
        }
    }

    #[test]
    fn eeg_shift_rotates() {
        let w = sine_window(2, 100);
        let p = EegParams {
            shift: 7,
            ..EegParams::neutral()
        };
        let out = eeg_apply(&w, &p, 100.0, &mut rng(0)).unwrap();
        for c in 0..2 {
            for j in 0..100 {
                assert_eq!(out.values()[[c, j]], w.values()[[c, (j + 100 - 7) % 100]]);
            }
        }
    }

    #[test]
    fn eeg_mask_zeroes_prefix() {
        let w = sine_window(4, 500);
        let p = EegParams {
            mask_start: 0,
            mask_len: 112,
            ..EegParams::neutral()
        };
        let out = eeg_apply(&w, &p, 100.0, &mut rng(0)).unwrap();
        for c in 0..4 {
            for j in 0..112 {
                assert_eq!(out.values()[[c, j]], 0.0);
            }
            assert_ne!(out.values()[[c, 112]], 0.0);
        }
    }

    #[test]
    fn eeg_mask_wraps() {
        let w = sine_window(1, 100);
        let p = EegParams {
            mask_start: 95,
            mask_len: 10,
            ..EegParams::neutral()
        };
        let out = eeg_apply(&w, &p, 100.0, &mut rng(0)).unwrap();
        for j in (95..100).chain(0..5) {
            assert_eq!(out.values()[[0, j]], 0.0);
        }
        assert_ne!(out.values()[[0, 5]], 0.0);
    }

    #[test]
    fn eeg_too_short_rejected() {
        let w = sine_window(2, 76);
        assert!(eeg_augment(&w, 100.0, &mut rng(0)).is_err());
    }

    #[test]
    fn eeg_full_pipeline_shape_and_difference() {
        let w = sine_window(5, 400);
        let mut r1 = rng(1);
        let mut r2 = rng(2);
        let a = eeg_augment(&w, 100.0, &mut r1).unwrap();
        let b = eeg_augment(&w, 100.0, &mut r2).unwrap();
        assert_eq!(a.channels(), 5);
        assert_eq!(a.len(), 400);
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn ecg_neutral_is_identity() {
        let w = sine_window(3, 250);
        let out = ecg_apply(&w, &EcgParams::neutral(3), 100.0, &mut rng(0)).unwrap();
        assert_eq!(out.values(), w.values());
    }

    #[test]
    fn ecg_forced_mask_zeroes_channel() {
        let w = sine_window(3, 250);
        let mut p = EcgParams::neutral(3);
        p.lead_mask[0] = true;
        let out = ecg_apply(&w, &p, 100.0, &mut rng(0)).unwrap();
        assert!(out.values().row(0).iter().all(|&v| v == 0.0));
        assert!(out.values().row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ecg_zero_amplitude_powerline_is_noop() {
        let w = sine_window(2, 250);
        let mut p = EcgParams::neutral(2);
        p.powerline_amp = 0.0;
        p.powerline_phase = 1.3;
        let out = ecg_apply(&w, &p, 100.0, &mut rng(0)).unwrap();
        assert_eq!(out.values(), w.values());
    }

    #[test]
    fn ecg_mask_fraction_near_half() {
        let mut r = rng(5);
        let mut masked = 0usize;
        let mut total = 0usize;
        for _ in 0..1000 {
            let p = EcgParams::sample(10, 300, &mut r).unwrap();
            masked += p.lead_mask.iter().filter(|&&m| m).count();
            total += 10;
        }
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.015, "masked fraction {frac}");
    }

    #[test]
    fn ecg_full_pipeline_shape_and_difference() {
        let w = sine_window(4, 300);
        let a = ecg_augment(&w, 100.0, &mut rng(3)).unwrap();
        let b = ecg_augment(&w, 100.0, &mut rng(4)).unwrap();
        assert_eq!(a.channels(), 4);
        assert_eq!(a.len(), 300);
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn bandstop_attenuates_center_sine() {
        let sr = 100.0;
        let t = 3000;
        for center in [5.0, 20.0, 41.0] {
            let x: Vec<f32> = (0..t)
                .map(|j| (2.0 * std::f64::consts::PI * center * j as f64 / sr).sin() as f32)
                .collect();
            let y = bandstop(&x, center, 5.0, sr).unwrap();
            assert!(
                rms(&y) <= 0.1 * rms(&x),
                "center {center}: rms {} vs {}",
                rms(&y),
                rms(&x)
            );
        }
    }

    #[test]
    fn bandstop_passes_distant_sine() {
        let sr = 100.0;
        let t = 3000;
        // 20 Hz tone, band centered at 35 Hz: 12.5 Hz past the lower
        // edge, beyond the 2-width passband criterion.
        let x: Vec<f32> = (0..t)
            .map(|j| (2.0 * std::f64::consts::PI * 20.0 * j as f64 / sr).sin() as f32)
            .collect();
        let y = bandstop(&x, 35.0, 5.0, sr).unwrap();
        let ratio = rms(&y) / rms(&x);
        assert!((ratio - 1.0).abs() < 0.12, "passband ratio {ratio}");
    }

    #[test]
    fn bandstop_zero_in_zero_out() {
        let y = bandstop(&vec![0.0; 500], 20.0, 5.0, 100.0).unwrap();
        assert!(y.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn bandstop_rejects_band_outside_nyquist() {
        assert!(bandstop(&[0.0; 64], 49.0, 5.0, 100.0).is_err());
        assert!(bandstop(&[0.0; 64], 2.0, 5.0, 100.0).is_err());
    }

    fn ks_uniform(mut samples: Vec<f64>, lo: f64, hi: f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let f = (x - lo) / (hi - lo);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - f).abs());
        }
        d
    }

    #[test]
    fn eeg_parameter_distributions_pass_ks() {
        let mut r = rng(9);
        let n = 10_000;
        let mut scales = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        for _ in 0..n {
            let p = EegParams::sample(500, &mut r);
            scales.push(p.scale as f64);
            centers.push(p.bandstop_center_hz.unwrap());
            sigmas.push(p.noise_sigma);
        }
        // KS critical value at alpha = 0.01 for n = 10^4.
        let crit = 1.63 / (n as f64).sqrt();
        assert!(ks_uniform(scales, 0.5, 2.0) < crit);
        assert!(ks_uniform(centers, 2.8, 41.3) < crit);
        assert!(ks_uniform(sigmas, 0.01, 0.2) < crit);
    }

    #[test]
    fn ecg_parameter_distributions_pass_ks() {
        let mut r = rng(10);
        let n = 10_000;
        let mut amps = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        for _ in 0..n {
            let p = EcgParams::sample(4, 300, &mut r).unwrap();
            amps.push(p.powerline_amp as f64);
            sigmas.push(p.noise_sigma);
        }
        let crit = 1.63 / (n as f64).sqrt();
        assert!(ks_uniform(amps, 0.0, 0.5) < crit);
        assert!(ks_uniform(sigmas, 0.01, 0.5) < crit);
    }
}
