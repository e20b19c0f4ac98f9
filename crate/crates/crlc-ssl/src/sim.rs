//! Synthetic multivariate time-series generator: sinusoidal sources
//! under linear mixing with additive Gaussian noise, with controllable
//! stationarity across adjacent windows and source-sharing structure.

use crate::data::{Dataset, Window};
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Nuisance source frequencies are drawn from U(F_LO, F_HI) rad/sample:
/// well below Nyquist and mutually distinguishable at T = 3000.
pub const F_LO: f64 = 0.01 * std::f64::consts::PI;
pub const F_HI: f64 = 0.2 * std::f64::consts::PI;

/// Class-dictating source frequencies for the two fine-tuning classes,
/// both inside the nuisance range so the class is non-trivially
/// separable.
pub const CLASS_FREQS: [f64; 2] = [0.05 * std::f64::consts::PI, 0.15 * std::f64::consts::PI];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingStructure {
    Full,
    /// Two groups of C/2 output variables, each mixing only M/2 sources.
    BlockDiagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencyRegime {
    /// Source frequencies are redrawn between adjacent windows.
    Drift,
    /// Adjacent windows share frequencies, with the sine phase
    /// continuing from t = T to 2T - 1.
    Stationary,
}

#[derive(Clone, Debug)]
pub struct SimSpec {
    pub c: usize,
    pub m: usize,
    pub t: usize,
    pub sigma: f64,
    pub mixing: MixingStructure,
    pub regime: FrequencyRegime,
    pub n_windows: usize,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::invalid("sigma must be positive"));
        }
        if self.c < 2 || self.m == 0 || self.t == 0 || self.n_windows == 0 {
            return Err(Error::invalid("degenerate simulation dimensions"));
        }
        if self.mixing == MixingStructure::BlockDiagonal && (self.c % 2 != 0 || self.m % 2 != 0) {
            return Err(Error::invalid(
                "block-diagonal mixing requires even C and M",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneSpec {
    pub base: SimSpec,
    pub class_freqs: [f64; 2],
    pub class_source_index: usize,
    pub class_prior: f64,
}

impl FinetuneSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.class_freqs[0] == self.class_freqs[1] {
            return Err(Error::invalid("class frequencies must be distinct"));
        }
        if self.class_source_index >= self.base.m {
            return Err(Error::invalid("class_source_index out of range"));
        }
        Ok(())
    }
}

/// Row m is sin(f_m * t) for t = t0, ..., t0 + len - 1.
pub fn sample_sources(freqs: &[f64], t0: usize, len: usize) -> Array2<f32> {
    Array2::from_shape_fn((freqs.len(), len), |(m, t)| {
        (freqs[m] * (t0 + t) as f64).sin() as f32
    })
}

/// Mixing matrix with U(0,1) entries and columns normalized to sum to 1.
/// Block-diagonal structure zeroes the off-blocks before normalization;
/// a column summing to nearly zero is resampled rather than divided.
/// Kept in f64 so the column-sum invariant holds to 1e-9; `mix` casts
/// once when producing windows.
pub fn sample_mixing(
    c: usize,
    m: usize,
    structure: MixingStructure,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((c, m));
    for col in 0..m {
        loop {
            let rows: Box<dyn Iterator<Item = usize>> = match structure {
                MixingStructure::Full => Box::new(0..c),
                MixingStructure::BlockDiagonal => {
                    if col < m / 2 {
                        Box::new(0..c / 2)
                    } else {
                        Box::new(c / 2..c)
                    }
                }
            };
            let rows: Vec<usize> = rows.collect();
            let mut sum = 0.0;
            for &r in &rows {
                let v: f64 = rng.gen();
                a[[r, col]] = v;
                sum += v;
            }
            if sum > 1e-12 {
                for &r in &rows {
                    a[[r, col]] /= sum;
                }
                break;
            }
        }
    }
    a
}

/// X = A * S + eps, with eps i.i.d. Normal(0, sigma^2).
pub fn mix(a: &Array2<f64>, s: &Array2<f32>, sigma: f64, rng: &mut impl Rng) -> Result<Window> {
    if a.ncols() != s.nrows() {
        return Err(Error::invalid("mixing shape mismatch"));
    }
    let mut x = a.mapv(|v| v as f32).dot(s);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    x.mapv_inplace(|v| v + noise.sample(rng) as f32);
    Window::new(x)
}

/// Independent per-instance stream; exposed so generated entries can be
/// re-derived from outside the generator.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_freqs(m: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..m).map(|_| rng.gen_range(F_LO..F_HI)).collect()
}

/// Pretraining dataset with paired adjacent windows. Each entry draws a
/// fresh mixing matrix shared by both windows of the pair. Under the
/// stationary regime the pair continues the same sources in phase; under
/// drift the paired window gets freshly drawn frequencies.
pub fn generate_pretrain(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut windows = Vec::with_capacity(spec.n_windows);
    let mut paired = Vec::with_capacity(spec.n_windows);
    for i in 0..spec.n_windows {
        let mut rng = instance_rng(spec.seed, i as u64);
        let a = sample_mixing(spec.c, spec.m, spec.mixing, &mut rng);
        let freqs = draw_freqs(spec.m, &mut rng);
        let s = sample_sources(&freqs, 0, spec.t);
        windows.push(mix(&a, &s, spec.sigma, &mut rng)?);
        let s_next = match spec.regime {
            FrequencyRegime::Stationary => sample_sources(&freqs, spec.t, spec.t),
            FrequencyRegime::Drift => {
                let next = draw_freqs(spec.m, &mut rng);
                sample_sources(&next, 0, spec.t)
            }
        };
        paired.push(mix(&a, &s_next, spec.sigma, &mut rng)?);
    }
    Dataset::with_pairs(windows, paired)
}

/// Labeled fine-tuning dataset: one mixing matrix drawn once and reused
/// for every instance; the class-dictating source's frequency is set by
/// the Bernoulli-drawn label, all other source frequencies are nuisance.
pub fn generate_finetune(spec: &FinetuneSpec) -> Result<Dataset> {
    spec.validate()?;
    let base = &spec.base;
    let mut shared_rng = instance_rng(base.seed, u64::MAX);
    let a = sample_mixing(base.c, base.m, base.mixing, &mut shared_rng);
    let mut windows = Vec::with_capacity(base.n_windows);
    let mut labels = Vec::with_capacity(base.n_windows);
    for i in 0..base.n_windows {
        let mut rng = instance_rng(base.seed, i as u64);
        let label = if rng.gen::<f64>() < spec.class_prior {
            1u32
        } else {
            0u32
        };
        let mut freqs = draw_freqs(base.m, &mut rng);
        freqs[spec.class_source_index] = spec.class_freqs[label as usize];
        let s = sample_sources(&freqs, 0, base.t);
        windows.push(mix(&a, &s, base.sigma, &mut rng)?);
        labels.push(label);
    }
    Dataset::labeled(windows, labels, 2)
}

/// Frequencies used by pretraining entry `i`, re-derived from the seed;
/// exposed so properties of the generator can be checked from outside.
pub fn pretrain_freqs(spec: &SimSpec, i: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = instance_rng(spec.seed, i as u64);
    let _ = sample_mixing(spec.c, spec.m, spec.mixing, &mut rng);
    let first = draw_freqs(spec.m, &mut rng);
    let second = match spec.regime {
        FrequencyRegime::Stationary => first.clone(),
        FrequencyRegime::Drift => {
            // Skip the noise draws of the primary window: the paired
            // frequencies in generate_pretrain are drawn after them.
            let mut clone = rng.clone();
            let noise = Normal::new(0.0, spec.sigma).unwrap();
            for _ in 0..spec.c * spec.t {
                let _: f64 = noise.sample(&mut clone);
            }
            draw_freqs(spec.m, &mut clone)
        }
    };
    (first, second)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SimSpec {
        SimSpec {
            c: 10,
            m: 10,
            t: 200,
            sigma: 0.5,
            mixing: MixingStructure::Full,
            regime: FrequencyRegime::Drift,
            n_windows: 8,
            seed: 7,
        }
    }

    #[test]
    fn sources_quarter_period() {
        let s = sample_sources(&[std::f64::consts::FRAC_PI_2], 0, 4);
        let expect = [0.0, 1.0, 0.0, -1.0];
        for (a, e) in s.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn sources_direct_eval() {
        let s = sample_sources(&[0.1], 0, 3);
        let expect = [0.0, 0.09983342, 0.19866933];
        for (a, e) in s.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn mixing_single_entry_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_mixing(1, 1, MixingStructure::Full, &mut rng);
        assert!((a[[0, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixing_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for structure in [MixingStructure::Full, MixingStructure::BlockDiagonal] {
            let a = sample_mixing(10, 10, structure, &mut rng);
            for col in a.columns() {
                let sum: f64 = col.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "column sum {sum}");
            }
        }
    }

    #[test]
    fn block_diagonal_off_blocks_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = sample_mixing(10, 10, MixingStructure::BlockDiagonal, &mut rng);
        for c in 0..10 {
            for m in 0..10 {
                if (c < 5) != (m < 5) {
                    assert_eq!(a[[c, m]], 0.0);
                }
            }
        }
    }

    #[test]
    fn identity_mixing_recovers_sources_as_sigma_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let s = sample_sources(&[0.1, 0.2, 0.3], 0, 50);
        let x = mix(&a, &s, 1e-12, &mut rng).unwrap();
        for (xa, sa) in x.values().iter().zip(s.iter()) {
            assert!((xa - sa).abs() < 1e-6);
        }
    }

    #[test]
    fn mix_deterministic_given_seed() {
        let a = sample_mixing(4, 4, MixingStructure::Full, &mut ChaCha8Rng::seed_from_u64(4));
        let s = sample_sources(&[0.1, 0.2, 0.3, 0.4], 0, 64);
        let x1 = mix(&a, &s, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x2 = mix(&a, &s, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(x1.values(), x2.values());
    }

    #[test]
    fn stationary_pairs_share_frequencies_and_continue_phase() {
        let mut sp = spec();
        sp.regime = FrequencyRegime::Stationary;
        sp.mixing = MixingStructure::BlockDiagonal;
        for i in 0..sp.n_windows {
            let (f1, f2) = pretrain_freqs(&sp, i);
            assert_eq!(f1, f2);
        }
        // Phase continuity: with sigma ~ 0 the paired window must equal
        // mixing applied to sources evaluated at t = T..2T-1.
        let mut tiny = sp.clone();
        tiny.sigma = 1e-9;
        tiny.n_windows = 2;
        let ds = generate_pretrain(&tiny).unwrap();
        let (f1, _) = pretrain_freqs(&tiny, 0);
        let mut rng = instance_rng(tiny.seed, 0);
        let a = sample_mixing(tiny.c, tiny.m, tiny.mixing, &mut rng);
        let s_next = sample_sources(&f1, tiny.t, tiny.t);
        let expected = a.mapv(|v| v as f32).dot(&s_next);
        let got = ds.paired.as_ref().unwrap()[0].values();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-4);
        }
    }

    #[test]
    fn drift_pairs_redraw_frequencies() {
        let sp = spec();
        for i in 0..sp.n_windows {
            let (f1, f2) = pretrain_freqs(&sp, i);
            assert!(f1.iter().zip(f2.iter()).all(|(a, b)| a != b));
        }
    }

    #[test]
    fn pretrain_dims() {
        let sp = spec();
        let ds = generate_pretrain(&sp).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.channels(), 10);
        assert_eq!(ds.window_len(), 200);
        assert!(ds.paired.is_some());
    }

    #[test]
    fn finetune_shared_mixing_and_labels() {
        let ft = FinetuneSpec {
            base: SimSpec {
                n_windows: 1000,
                ..spec()
            },
            class_freqs: CLASS_FREQS,
            class_source_index: 0,
            class_prior: 0.5,
        };
        let ds = generate_finetune(&ft).unwrap();
        let ones = ds
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .filter(|&&l| l == 1)
            .count();
        // 99.99% binomial interval for n=1000, p=0.5.
        assert!((432..=568).contains(&ones), "class-1 count {ones}");
        // Same seed regenerates the identical dataset (shared A included).
        let ds2 = generate_finetune(&ft).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn noise_std_matches_sigma() {
        // Empirical std of X - A*S over >= 1e6 entries within 5% of sigma.
        let sp = SimSpec {
            c: 10,
            m: 10,
            t: 500,
            sigma: 0.5,
            mixing: MixingStructure::Full,
            regime: FrequencyRegime::Drift,
            n_windows: 250,
            seed: 11,
        };
        let ds = generate_pretrain(&sp).unwrap();
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for (i, w) in ds.windows.iter().enumerate() {
            let mut rng = instance_rng(sp.seed, i as u64);
            let a = sample_mixing(sp.c, sp.m, sp.mixing, &mut rng);
            let (f1, _) = pretrain_freqs(&sp, i);
            let clean = a.mapv(|v| v as f32).dot(&sample_sources(&f1, 0, sp.t));
            for (x, c) in w.values().iter().zip(clean.iter()) {
                let d = (x - c) as f64;
                sum_sq += d * d;
                count += 1;
            }
        }
        // Pairs double the entry count past 1e6.
        for (i, w) in ds.paired.as_ref().unwrap().iter().enumerate() {
            let mut rng = instance_rng(sp.seed, i as u64);
            let a = sample_mixing(sp.c, sp.m, sp.mixing, &mut rng);
            let (_, f2) = pretrain_freqs(&sp, i);
            let clean = a.mapv(|v| v as f32).dot(&sample_sources(&f2, 0, sp.t));
            for (x, c) in w.values().iter().zip(clean.iter()) {
                let d = (x - c) as f64;
                sum_sq += d * d;
                count += 1;
            }
        }
        assert!(count >= 1_000_000);
        let std = (sum_sq / count as f64).sqrt();
        assert!(
            (std - sp.sigma).abs() / sp.sigma < 0.05,
            "noise std {std} vs sigma {}",
            sp.sigma
        );
    }
}
