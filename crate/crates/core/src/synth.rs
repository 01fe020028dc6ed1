//! Synthetic corpus with a planted, query-addressed signal.
//!
//! Each sample draws a code `c`; its query is three fixed embedding rows of
//! that code, and inside the moment the carrier modality shows the code's
//! fixed pattern plus noise. Everything else is noise.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Carrier, Dataset, FeatureBundle, MomentAnnotation, Split};
use crate::error::{ImgError, Result};

pub const QUERY_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Held-out share, taken from the end of the sample sequence.
    pub test_fraction: f64,
    pub frames: usize,
    pub codebook_size: usize,
    /// Proportions of audio, visual, both and neither carriers.
    pub carrier_mix: [f64; 4],
    pub noise_std: f64,
    pub d_v: usize,
    pub d_a: usize,
    pub d_q: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            test_fraction: 0.2,
            frames: 32,
            codebook_size: 16,
            carrier_mix: [0.4, 0.4, 0.1, 0.1],
            noise_std: 0.5,
            d_v: 32,
            d_a: 32,
            d_q: 16,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    /// Shortest and longest allowed moment, `[⌈T/8⌉, ⌊T/2⌋]` with a floor of one frame.
    pub fn length_range(&self) -> (usize, usize) {
        (self.frames.div_ceil(8).max(1), self.frames / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(ImgError::Config("n_samples must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(ImgError::Config(format!("codebook_size must be >= 2, got {}", self.codebook_size)));
        }
        if self.d_v == 0 || self.d_a == 0 || self.d_q == 0 {
            return Err(ImgError::Config("feature widths must be positive".into()));
        }
        if self.carrier_mix.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(ImgError::Config(format!("carrier_mix entries must be >= 0: {:?}", self.carrier_mix)));
        }
        let total: f64 = self.carrier_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ImgError::Config(format!("carrier_mix must sum to 1, sums to {total}")));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(ImgError::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ImgError::Config(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        let (lo, hi) = self.length_range();
        if lo > hi {
            return Err(ImgError::Config(format!(
                "no moment length fits {} frames (needs [{lo}, {hi}])",
                self.frames
            )));
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        (self.n_samples as f64 * self.test_fraction).round() as usize
    }
}

/// The generated samples plus the query embedding table they index into.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub embeddings: Array2<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng) as f32)
}

fn unit_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

fn draw_carrier(rng: &mut ChaCha8Rng, mix: &[f64; 4]) -> Carrier {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in Carrier::ALL.iter().zip(mix) {
        acc += p;
        if u < acc {
            return *c;
        }
    }
    // Rounding left `u` above the cumulative sum: take the last carrier with mass.
    *Carrier::ALL
        .iter()
        .zip(mix)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map(|(c, _)| c)
        .expect("mix sums to 1")
}

fn plant(features: &mut Array2<f32>, pattern: ndarray::ArrayView1<f32>, span: (usize, usize), rng: &mut ChaCha8Rng, std: f64) {
    let noise = gaussian(rng, span.1 - span.0 + 1, pattern.len(), std);
    for (k, t) in (span.0..=span.1).enumerate() {
        let mut row = features.row_mut(t);
        row.assign(&pattern);
        row += &noise.row(k);
    }
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.codebook_size;
    let t = spec.frames;
    let visual_patterns = unit_table(&mut rng, k, spec.d_v);
    let audio_patterns = unit_table(&mut rng, k, spec.d_a);
    let embeddings = unit_table(&mut rng, k * QUERY_TOKENS, spec.d_q);
    let (lo, hi) = spec.length_range();
    let first_test = spec.n_samples - spec.n_test();
    let duration = t as f64;

    let mut samples = Vec::with_capacity(spec.n_samples);
    for n in 0..spec.n_samples {
        let code = rng.random_range(0..k);
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=t - len);
        let span = (start, start + len - 1);
        let carrier = draw_carrier(&mut rng, &spec.carrier_mix);

        let mut visual = gaussian(&mut rng, t, spec.d_v, spec.noise_std);
        let mut audio = gaussian(&mut rng, t, spec.d_a, spec.noise_std);
        match carrier {
            Carrier::Visual => plant(&mut visual, visual_patterns.row(code), span, &mut rng, spec.noise_std),
            Carrier::Audio => plant(&mut audio, audio_patterns.row(code), span, &mut rng, spec.noise_std),
            Carrier::Both => {
                plant(&mut visual, visual_patterns.row(code), span, &mut rng, spec.noise_std);
                plant(&mut audio, audio_patterns.row(code), span, &mut rng, spec.noise_std);
            }
            Carrier::Neither => plant(&mut visual, visual_patterns.row(code), span, &mut rng, 3.0 * spec.noise_std),
        }
        let ids: Vec<usize> = (0..QUERY_TOKENS).map(|j| code * QUERY_TOKENS + j).collect();
        let query = embeddings.select(ndarray::Axis(0), &ids);
        let scale = duration / (t - 1).max(1) as f64;
        let annotation = MomentAnnotation::from_seconds(span.0 as f64 * scale, span.1 as f64 * scale, duration, t)?;
        samples.push(FeatureBundle {
            video_id: format!("syn{n:05}"),
            visual,
            audio: Some(audio),
            query,
            token_ids: ids,
            annotation,
            split: if n >= first_test { Split::Test } else { Split::Train },
            carrier: Some(carrier),
        });
    }
    Ok(SyntheticCorpus {
        dataset: Dataset { samples },
        embeddings,
    })
}

impl SyntheticCorpus {
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        self.dataset.save(dir, &self.embeddings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LoadOptions;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 40,
            frames: 16,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_noise_visual_carrier_is_exact_pattern() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            carrier_mix: [0.0, 1.0, 0.0, 0.0],
            ..small()
        };
        let corpus = generate_synthetic_dataset(&spec).unwrap();
        let mut seen = std::collections::HashMap::new();
        for s in &corpus.dataset.samples {
            let a = s.annotation;
            let code = s.query.row(0).to_owned();
            let inside = s.visual.row(a.start_idx).to_owned();
            for t in a.start_idx..=a.end_idx {
                assert_eq!(s.visual.row(t), inside.view());
            }
            assert!(s.visual.row(a.start_idx).iter().any(|&v| v != 0.0));
            // Same code ⇒ same planted pattern.
            let key: Vec<u32> = code.iter().map(|v| v.to_bits()).collect();
            let prev = seen.entry(key).or_insert_with(|| inside.clone());
            assert_eq!(*prev, inside);
            assert!(s.audio.as_ref().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_and_tagged() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a.dataset.samples, b.dataset.samples);
        let spec = SyntheticSpec {
            carrier_mix: [0.0, 1.0, 0.0, 0.0],
            ..small()
        };
        let c = generate_synthetic_dataset(&spec).unwrap();
        assert!(c.dataset.samples.iter().all(|s| s.carrier == Some(Carrier::Visual)));
    }

    #[test]
    fn spans_within_length_bounds_and_split_sizes() {
        let spec = SyntheticSpec::default();
        let c = generate_synthetic_dataset(&SyntheticSpec { n_samples: 300, ..spec.clone() }).unwrap();
        for s in &c.dataset.samples {
            let len = s.annotation.end_idx - s.annotation.start_idx + 1;
            assert!((4..=16).contains(&len), "{len}");
            assert_eq!(s.frames(), 32);
        }
        assert_eq!(spec.n_test(), 500);
        assert_eq!(c.dataset.split(Split::Test).len(), 60);
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            SyntheticSpec { codebook_size: 1, ..small() },
            SyntheticSpec { carrier_mix: [0.5, 0.5, 0.5, 0.0], ..small() },
            SyntheticSpec { frames: 1, ..small() },
        ] {
            assert!(matches!(generate_synthetic_dataset(&bad), Err(ImgError::Config(_))));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_dataset(&small()).unwrap();
        corpus.save(dir.path()).unwrap();
        let opts = LoadOptions {
            max_frames: 16,
            max_tokens: 8,
            read_audio: true,
        };
        let loaded = Dataset::load(dir.path(), opts).unwrap();
        assert_eq!(loaded.samples, corpus.dataset.samples);
    }
}
