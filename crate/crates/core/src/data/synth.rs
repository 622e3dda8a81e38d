use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Label, Origin, Segment, Window};

/// Parameters of the synthetic multi-mode generator.
///
/// Normal mode `k` is a sinusoid completing `k + 1` cycles per window on
/// every channel, with a per-channel phase. Anomalies come from a reserved
/// family that never coincides with a normal template: sinusoids completing
/// a half-integer number of cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub modes: usize,
    pub channels: usize,
    pub seg_len: usize,
    pub n_per_mode: usize,
    /// Fraction of the returned segments that are anomalous.
    pub anomaly_fraction: f64,
    pub noise_sigma: f64,
    /// Seeds the mode templates, so train and test draws generated with
    /// different sample seeds share the same modes.
    #[serde(default)]
    pub template_seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.modes == 0 || self.channels == 0 || self.seg_len == 0 {
            return Err(DataError::Synth("modes, channels and seg_len must be ≥ 1".into()));
        }
        if !(0.0..0.5).contains(&self.anomaly_fraction) {
            return Err(DataError::Synth(format!(
                "anomaly_fraction {} outside [0, 0.5)",
                self.anomaly_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Synth(format!("noise_sigma {} must be ≥ 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Noise-free template of normal mode `mode`.
    pub fn template(&self, mode: usize) -> Window {
        let phases = self.phases();
        sinusoid(self.channels, self.seg_len, (mode + 1) as f64, &phases[mode])
    }

    fn phases(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        (0..self.modes)
            .map(|_| (0..self.channels).map(|_| rng.random_range(0.0..TAU)).collect())
            .collect()
    }
}

fn sinusoid(channels: usize, len: usize, cycles: f64, phases: &[f64]) -> Window {
    let mut values = Vec::with_capacity(channels * len);
    for phase in phases.iter().take(channels) {
        values.extend((0..len).map(|t| (TAU * cycles * t as f64 / len as f64 + phase).sin()));
    }
    Window::new(channels, len, values).expect("template shape is valid")
}

/// Output of [`synth_multimode`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub segments: Vec<Segment>,
    /// Normal mode of each segment; `None` for anomalies.
    pub modes: Vec<Option<usize>>,
}

/// Generates labelled segments from `spec.modes` normal templates plus
/// reserved-family anomalies. Deterministic in `(spec, seed)`.
pub fn synth_multimode(spec: &SynthSpec, seed: u64) -> Result<SynthData, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma is finite");
    let phases = spec.phases();

    let normals = spec.modes * spec.n_per_mode;
    let anomalies = (spec.anomaly_fraction * normals as f64 / (1.0 - spec.anomaly_fraction)).round() as usize;

    let mut items: Vec<(Window, Option<usize>)> = Vec::with_capacity(normals + anomalies);
    for (mode, mode_phases) in phases.iter().enumerate() {
        for _ in 0..spec.n_per_mode {
            let w = sinusoid(spec.channels, spec.seg_len, (mode + 1) as f64, mode_phases);
            items.push((w, Some(mode)));
        }
    }
    for _ in 0..anomalies {
        let cycles = rng.random_range(0..spec.modes) as f64 + 1.5;
        let ph: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.0..TAU)).collect();
        items.push((sinusoid(spec.channels, spec.seg_len, cycles, &ph), None));
    }
    items.shuffle(&mut rng);

    let mut segments = Vec::with_capacity(items.len());
    let mut modes = Vec::with_capacity(items.len());
    for (i, (window, mode)) in items.into_iter().enumerate() {
        let values = if spec.noise_sigma > 0.0 {
            window.values().iter().map(|v| v + noise.sample(&mut rng)).collect()
        } else {
            window.values().to_vec()
        };
        segments.push(Segment {
            window: Window::new(spec.channels, spec.seg_len, values)?,
            label: Some(if mode.is_some() { Label::Normal } else { Label::Anomaly }),
            origin: Origin {
                source: format!("synthetic:{seed}"),
                start: i,
            },
        });
        modes.push(mode);
    }
    Ok(SynthData { segments, modes })
}
