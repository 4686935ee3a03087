//! Synthetic datasets and toy checkpoints for demos and tests.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::ingest::{ChannelStrategy, DatasetManifest, EvalScheme, Preprocess, RecordEntry};
use crate::weight_io::{save_checkpoint, CheckpointError};

/// Windows of noisy sinusoids, one tone frequency per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub n_windows: usize,
    pub sample_rate: f64,
    pub window_samples: usize,
    pub frequencies: Vec<f64>,
    pub noise_std: f64,
    pub n_channels: usize,
    pub n_subjects: usize,
    pub upsample: usize,
    pub eval_scheme: EvalScheme,
    pub seed: u64,
}

impl Default for SinusoidTask {
    /// 200 two-second windows at 100 Hz, 5 Hz vs 20 Hz, noise σ = 0.3.
    fn default() -> Self {
        Self {
            n_windows: 200,
            sample_rate: 100.0,
            window_samples: 200,
            frequencies: vec![5.0, 20.0],
            noise_std: 0.3,
            n_channels: 1,
            n_subjects: 5,
            upsample: 2,
            eval_scheme: EvalScheme::Kfold { k: 5 },
            seed: 0,
        }
    }
}

impl SinusoidTask {
    /// Channel-major samples for window `i`; the label is `i % classes`.
    /// Each window draws a random phase per channel and additive Gaussian noise.
    pub fn window(&self, i: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, usize) {
        let label = i % self.frequencies.len();
        let f = self.frequencies[label];
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");
        let channels = (0..self.n_channels)
            .map(|_| {
                let phase = rng.random_range(0.0..2.0 * PI);
                (0..self.window_samples)
                    .map(|t| (2.0 * PI * f * t as f64 / self.sample_rate + phase).sin() + noise.sample(rng))
                    .collect()
            })
            .collect();
        (channels, label)
    }

    /// Writes `windows.f32` and `manifest.json` into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut blob = Vec::with_capacity(self.n_windows * self.n_channels * self.window_samples * 4);
        let mut records = Vec::with_capacity(self.n_windows);
        for i in 0..self.n_windows {
            let (channels, label) = self.window(i, &mut rng);
            for v in channels.iter().flatten() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            records.push(RecordEntry {
                data: "windows.f32".into(),
                index: Some(i),
                label,
                subject: format!("s{:02}", i % self.n_subjects.max(1)),
                shape: Some([self.n_channels, self.window_samples]),
            });
        }
        std::fs::write(dir.join("windows.f32"), blob)?;
        let manifest = DatasetManifest {
            name: "sinusoids".into(),
            sample_rate: self.sample_rate,
            window_samples: self.window_samples,
            n_channels: self.n_channels,
            labels: self.frequencies.iter().map(|f| format!("{f} Hz")).collect(),
            eval_scheme: self.eval_scheme,
            preprocess: Preprocess {
                upsample: self.upsample,
                standardize: true,
                channel_strategy: ChannelStrategy::PerAxis,
            },
            records,
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, manifest.to_json())?;
        Ok(path)
    }
}

/// Saves a randomly initialized toy encoder and returns it.
pub fn write_toy_checkpoint(
    path: &Path,
    d_model: usize,
    n_layers: usize,
    seed: u64,
) -> Result<(EncoderConfig, EncoderWeights<f32>), CheckpointError> {
    let config = EncoderConfig::toy(d_model, n_layers);
    let weights = EncoderWeights::<f32>::random(&config, seed)?;
    save_checkpoint(
        &config,
        weights.tensors(),
        path,
        &format!("random toy encoder d_model={d_model} n_layers={n_layers} seed={seed}"),
    )?;
    Ok((config, weights))
}
