//! Local ExDNN training on one simulated edge device.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AsWindow, ClientShard, Window};
use crate::encoder::EncoderError;
use crate::exdnn::{build_objective, score_embedding, ExdnnError, ExemplarSet, LossConfig, Scales};
use crate::model::{GlobalModel, LocalModel, TrainDiagnostics};
use crate::encoder::EncoderParams;
use crate::numkernel::{Tape, Tensor};

pub use crate::model::ServerInput;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Exdnn(#[from] ExdnnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("client {client} has no training windows")]
    EmptyTrain { client: usize },
    #[error("client {client}: loss term '{term}' became {value} at epoch {epoch}, step {step}")]
    NonFinite {
        client: usize,
        term: &'static str,
        value: f64,
        epoch: usize,
        step: usize,
    },
    #[error("client {client}: parameters diverged after training")]
    Diverged { client: usize },
}

/// Optimiser and schedule settings for local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate for the exemplars; `learning_rate` when absent.
    pub exemplar_learning_rate: Option<f64>,
    /// Epochs per communication round.
    pub local_epochs: usize,
    /// Epochs for a single-device run.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.005,
            exemplar_learning_rate: None,
            local_epochs: 5,
            epochs: 25,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: &str| Err(ClientError::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be ≥ 2");
        }
        if self.local_epochs == 0 || self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.exemplar_learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("exemplar_learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }
}

/// Adam over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn with_defaults(len: usize, lr: f64) -> Self {
        Self::new(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Trains encoder and exemplars jointly from `init` for `epochs` passes over
/// the shard's (label-free) training windows.
///
/// Deterministic in `cfg.seed`: the seed only drives minibatch shuffling,
/// since the starting point comes from `init`.
pub fn local_train(
    shard: &ClientShard,
    init: &GlobalModel,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<LocalModel, ClientError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if epochs == 0 {
        return Err(ClientError::InvalidConfig("epochs must be ≥ 1".into()));
    }
    let client = shard.client_id;
    if shard.train.is_empty() {
        return Err(ClientError::EmptyTrain { client });
    }
    let windows: Vec<&Window> = shard.train.iter().map(AsWindow::window).collect();

    let mut encoder = init.encoder.clone();
    let n_theta = encoder.len();
    let (k, d) = (init.exemplars.k(), init.exemplars.dim());
    let mut flat = encoder.values.clone();
    flat.extend_from_slice(init.exemplars.as_tensor().values());
    let mut adam = Adam::new(n_theta, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let ex_lr = cfg.exemplar_learning_rate.unwrap_or(cfg.learning_rate);
    let mut ex_adam = Adam::new(k * d, ex_lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let scales = Scales::fixed(loss_cfg);

    let mut loss_curve = Vec::with_capacity(epochs);
    let mut final_loss = Default::default();
    let mut steps = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (step, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            encoder.values.copy_from_slice(&flat[..n_theta]);
            let batch: Vec<&Window> = batch_idx.iter().map(|&i| windows[i]).collect();
            let mut tape = Tape::new();
            let enc_vars = encoder.register(&mut tape, true);
            let ex = tape.param(Tensor::matrix(k, d, flat[n_theta..].to_vec()).expect("k×d"));
            let obj = build_objective(&mut tape, &enc_vars, ex, &batch, loss_cfg, scales)?;
            if let Err(ExdnnError::NonFinite { term, value }) = obj.breakdown.check_finite() {
                return Err(ClientError::NonFinite {
                    client,
                    term,
                    value,
                    epoch,
                    step,
                });
            }
            let grads = tape.backward(obj.total).map_err(ExdnnError::from)?;
            let (theta, rows) = flat.split_at_mut(n_theta);
            adam.step(theta, &enc_vars.flat_gradient(&grads));
            ex_adam.step(rows, grads.get(ex).values());
            epoch_total += obj.breakdown.total * batch.len() as f64;
            final_loss = obj.breakdown;
            steps += 1;
        }
        loss_curve.push(epoch_total / windows.len() as f64);
    }

    encoder.values.copy_from_slice(&flat[..n_theta]);
    let exemplars = Tensor::matrix(k, d, flat[n_theta..].to_vec()).expect("k×d");
    if !encoder.is_finite() || !exemplars.is_finite() {
        return Err(ClientError::Diverged { client });
    }
    Ok(LocalModel {
        client_id: client,
        encoder,
        exemplars: ExemplarSet::new(exemplars)?,
        sample_count: windows.len(),
        diagnostics: TrainDiagnostics {
            epochs,
            steps,
            loss_curve,
            final_loss,
        },
    })
}

/// Anomaly scores of `items`, in order; higher is more anomalous.
pub fn score_dataset<W: AsWindow>(
    encoder: &EncoderParams,
    exemplars: &ExemplarSet,
    items: &[W],
) -> Result<Vec<f64>, ClientError> {
    let embeddings = encoder.embed_all(items, 256)?;
    embeddings
        .iter()
        .map(|e| score_embedding(e, exemplars).map_err(ClientError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_multimode, SynthSpec};
    use crate::encoder::EncoderConfig;

    fn spec(modes: usize, anomaly_fraction: f64) -> SynthSpec {
        SynthSpec {
            modes,
            channels: 2,
            seg_len: 12,
            n_per_mode: 40,
            anomaly_fraction,
            noise_sigma: 0.05,
            template_seed: 3,
        }
    }

    fn init(k: usize) -> GlobalModel {
        let cfg = EncoderConfig {
            input_dim: 2,
            num_layers: 2,
            hidden_dim: 8,
            embed_dim: 8,
            bidirectional: false,
            embed_bias: false,
        };
        GlobalModel {
            encoder: EncoderParams::init(&cfg, 7).unwrap(),
            exemplars: ExemplarSet::random_unit(k, 8, 7),
            round: 0,
        }
    }

    fn shard(modes: usize, seed: u64) -> ClientShard {
        ClientShard::from_train(0, synth_multimode(&spec(modes, 0.0), seed).unwrap().segments)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::with_defaults(2, 0.1);
        let mut x = vec![1.0, -1.0];
        adam.step(&mut x, &[3.0, -0.5]);
        assert!((x[0] - 0.9).abs() < 1e-7 && (x[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut adam = Adam::with_defaults(1, 0.05);
        let mut x = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0)];
            adam.step(&mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn batching_arithmetic() {
        let mut s = shard(1, 1);
        s.train.truncate(10);
        let m = local_train(&s, &init(2), &LossConfig::default(), &TrainConfig::default(), 1).unwrap();
        assert_eq!(m.diagnostics.steps, 1);
        assert_eq!(m.sample_count, 10);
        assert!(local_train(&s, &init(2), &LossConfig::default(), &TrainConfig::default(), 0).is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(local_train(&s, &init(2), &LossConfig::default(), &bad, 1).is_err());
    }

    #[test]
    fn empty_shard_rejected() {
        let s = ClientShard::from_train(4, Vec::new());
        assert!(matches!(
            local_train(&s, &init(2), &LossConfig::default(), &quick(), 1),
            Err(ClientError::EmptyTrain { client: 4 })
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let s = shard(2, 2);
        let a = local_train(&s, &init(4), &LossConfig::default(), &quick(), 2).unwrap();
        let b = local_train(&s, &init(4), &LossConfig::default(), &quick(), 2).unwrap();
        assert_eq!(a, b);
        let other = TrainConfig { seed: 1, ..quick() };
        let c = local_train(&s, &init(4), &LossConfig::default(), &other, 2).unwrap();
        assert_ne!(a.encoder.values, c.encoder.values);
    }

    #[test]
    fn loss_decreases_on_single_mode() {
        let s = shard(1, 3);
        let m = local_train(&s, &init(4), &LossConfig::default(), &quick(), 10).unwrap();
        let curve = &m.diagnostics.loss_curve;
        assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
        assert_eq!(m.encoder.fingerprint, init(4).encoder.fingerprint);
    }

    #[test]
    fn same_mode_scores_below_anomalies() {
        let s = shard(1, 4);
        let m = local_train(&s, &init(4), &LossConfig::default(), &quick(), 15).unwrap();
        let test = synth_multimode(&spec(1, 0.3), 99).unwrap().segments;
        let scores = score_dataset(&m.encoder, &m.exemplars, &test).unwrap();
        assert!(scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        let mean = |anom: bool| {
            let v: Vec<f64> = scores
                .iter()
                .zip(&test)
                .filter(|(_, t)| t.is_anomaly() == anom)
                .map(|(s, _)| *s)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) - mean(false) >= 0.1, "normal {} anomaly {}", mean(false), mean(true));
    }

    #[test]
    fn score_empty_is_empty() {
        let g = init(2);
        let none: Vec<Window> = Vec::new();
        assert!(score_dataset(&g.encoder, &g.exemplars, &none).unwrap().is_empty());
    }
}
