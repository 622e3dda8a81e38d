//! In-process federation: builds client shards from a dataset spec, runs
//! communication rounds and evaluates the global model after each one.
//!
//! A round has five steps: clients train from the current global model,
//! upload their parameters, the server aggregates exemplars and averages
//! encoders, and the result is redistributed. Client training may run in
//! parallel; results are merged in client-id order, so reports do not depend
//! on the thread count.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{local_train, score_dataset, ClientError, TrainConfig};
use crate::data::{
    load_csv, make_windows, partition_by_mode, partition_sequential, synth_multimode, ClientShard, DataError,
    ModeAssignment, NormStats, Segment, SynthSpec,
};
use crate::encoder::{EncoderConfig, EncoderError, EncoderParams};
use crate::eval::{auc, evaluate, EvalError, EvalMetrics, ScoredSet, ThresholdMode};
use crate::exdnn::{ExemplarSet, LossBreakdown, LossConfig};
use crate::fedserver::{aggregate_exemplars, fedavg_encoders, AggregationDiagnostics, Aggregator, FedccConfig, ProjectionNet, ServerError};
use crate::model::{GlobalModel, LocalModel};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("round {round}: {source}")]
    Client {
        round: usize,
        #[source]
        source: ClientError,
    },
    #[error("round {round}: server: {source}")]
    Server {
        round: usize,
        #[source]
        source: ServerError,
    },
    #[error("round {round}: evaluation: {source}")]
    Eval {
        round: usize,
        #[source]
        source: EvalError,
    },
}

impl RunError {
    /// True for errors caused by the configuration or its inputs rather
    /// than by the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::Data(_))
    }
}

/// Encoder shape; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub bidirectional: bool,
    pub embed_bias: bool,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let c = EncoderConfig::new(1);
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            embed_dim: c.embed_dim,
            bidirectional: c.bidirectional,
            embed_bias: c.embed_bias,
        }
    }
}

impl EncoderSettings {
    pub fn with_input(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            bidirectional: self.bidirectional,
            embed_bias: self.embed_bias,
        }
    }
}

/// Where segments come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Train, validation and test draws from one set of mode templates.
    Synthetic {
        modes: usize,
        channels: usize,
        seg_len: usize,
        /// Training windows per mode.
        n_per_mode: usize,
        /// Validation and test windows per mode.
        n_eval_per_mode: usize,
        noise_sigma: f64,
        /// Anomaly share of the (unlabelled) training windows.
        #[serde(default)]
        train_anomaly_fraction: f64,
        /// Anomaly share of the validation and test sets.
        eval_anomaly_fraction: f64,
    },
    /// Headered CSV series, windowed with `seg_len`/`stride`.
    Csv {
        train: PathBuf,
        test: PathBuf,
        /// Labelled validation series; needed for validation thresholds.
        #[serde(default)]
        val: Option<PathBuf>,
        label_column: String,
        seg_len: usize,
        #[serde(default = "one")]
        stride: usize,
    },
}

fn one() -> usize {
    1
}

/// How training windows are split between clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    /// Contiguous, temporally ordered chunks.
    #[default]
    Sequential,
    /// Each client holds a subset of the normal modes (synthetic data only).
    ByMode { assignment: ModeAssignment },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub partition: Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: ThresholdMode,
}

/// Everything a run depends on. Serialising it with every default filled in
/// gives the canonical form that [`ExperimentConfig::hash`] digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub aggregator: Aggregator,
    /// Exemplars per model (`K`).
    #[serde(default = "defaults::exemplars")]
    pub exemplars: usize,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fedcc: FedccConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

mod defaults {
    pub fn clients() -> usize {
        2
    }
    pub fn rounds() -> usize {
        5
    }
    pub fn exemplars() -> usize {
        8
    }
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the data section.
    pub fn new(data: DataConfig) -> Self {
        Self {
            seed: 0,
            clients: defaults::clients(),
            rounds: defaults::rounds(),
            aggregator: Aggregator::default(),
            exemplars: defaults::exemplars(),
            encoder: EncoderSettings::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            fedcc: FedccConfig::default(),
            data,
            eval: EvalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.clients == 0 {
            return bad("clients must be ≥ 1".into());
        }
        if self.exemplars == 0 {
            return bad("exemplars must be ≥ 1".into());
        }
        self.encoder
            .with_input(1)
            .validate()
            .map_err(|e| RunError::Config(format!("encoder: {e}")))?;
        self.loss.validate().map_err(|e| RunError::Config(format!("loss: {e}")))?;
        self.loss
            .prior(self.exemplars)
            .map_err(|e| RunError::Config(format!("loss: {e}")))?;
        self.train.validate().map_err(|e| RunError::Config(format!("train: {e}")))?;
        self.fedcc.validate().map_err(|e| RunError::Config(format!("fedcc: {e}")))?;
        match &self.data.source {
            DataSource::Synthetic {
                modes,
                n_per_mode,
                n_eval_per_mode,
                ..
            } => {
                if *modes == 0 || *n_per_mode == 0 || *n_eval_per_mode == 0 {
                    return bad("data: modes, n_per_mode and n_eval_per_mode must be ≥ 1".into());
                }
            }
            DataSource::Csv { val, seg_len, stride, .. } => {
                if *seg_len == 0 || *stride == 0 {
                    return bad("data: seg_len and stride must be ≥ 1".into());
                }
                if matches!(self.data.partition, Partition::ByMode { .. }) {
                    return bad("data.partition: by_mode needs mode tags, which only synthetic data has".into());
                }
                if val.is_none() && self.eval.threshold == ThresholdMode::Val {
                    return bad("data.val: required when eval.threshold is \"val\"".into());
                }
            }
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Independent seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Init = 3,
    ClientTrain = 4,
    Server = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed for `(master, stream, client, round)`.
pub fn derive_seed(master: u64, stream: Stream, client: usize, round: usize) -> u64 {
    [stream as u64, client as u64, round as u64]
        .into_iter()
        .fold(splitmix(master), |acc, x| splitmix(acc ^ x))
}

/// Normalised client shards plus the pooled labelled evaluation sets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub shards: Vec<ClientShard>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
    pub channels: usize,
    pub norm: NormStats,
}

/// Loads or generates the data and splits it across `clients`.
///
/// Z-score statistics are fitted on the pooled training windows before the
/// split, so every client sees the same preprocessing.
pub fn prepare_data(cfg: &ExperimentConfig, clients: usize) -> Result<Prepared, RunError> {
    let seed = derive_seed(cfg.seed, Stream::Data, 0, 0);
    let (train, train_modes, mut val, mut test) = match &cfg.data.source {
        DataSource::Synthetic {
            modes,
            channels,
            seg_len,
            n_per_mode,
            n_eval_per_mode,
            noise_sigma,
            train_anomaly_fraction,
            eval_anomaly_fraction,
        } => {
            let spec = |n, fraction| SynthSpec {
                modes: *modes,
                channels: *channels,
                seg_len: *seg_len,
                n_per_mode: n,
                anomaly_fraction: fraction,
                noise_sigma: *noise_sigma,
                template_seed: seed,
            };
            let train = synth_multimode(&spec(*n_per_mode, *train_anomaly_fraction), seed ^ 1)?;
            let val = synth_multimode(&spec(*n_eval_per_mode, *eval_anomaly_fraction), seed ^ 2)?;
            let test = synth_multimode(&spec(*n_eval_per_mode, *eval_anomaly_fraction), seed ^ 3)?;
            (
                train.segments,
                Some(train.modes),
                tagged(val.segments, val.modes),
                tagged(test.segments, test.modes),
            )
        }
        DataSource::Csv {
            train,
            test,
            val,
            label_column,
            seg_len,
            stride,
        } => {
            let windows = |p: &PathBuf| -> Result<Vec<Segment>, RunError> {
                Ok(make_windows(&load_csv(p, Some(label_column))?, *seg_len, *stride)?)
            };
            let val = match val {
                Some(p) => windows(p)?,
                None => Vec::new(),
            };
            (windows(train)?, None, untagged(val), untagged(windows(test)?))
        }
    };
    let norm = NormStats::fit(&train)?;
    let channels = train[0].window.channels();
    let train = norm.apply_all(&train);

    let shards = match (cfg.data.partition, train_modes) {
        (Partition::Sequential, _) => partition_sequential(&train, clients)?,
        (Partition::ByMode { assignment }, Some(modes)) => {
            let split = partition_by_mode(
                &train,
                &modes,
                clients,
                assignment,
                derive_seed(cfg.seed, Stream::Partition, 0, 0),
            )?;
            // The pooled evaluation sets hold only modes some client trained on.
            let covered: Vec<usize> = split.client_modes.iter().flatten().copied().collect();
            let keep = |(_, m): &(Segment, Option<usize>)| m.is_none_or(|m| covered.contains(&m));
            val.retain(keep);
            test.retain(keep);
            split.shards
        }
        (Partition::ByMode { .. }, None) => {
            return Err(RunError::Config("data.partition: by_mode needs synthetic data".into()))
        }
    };
    let strip = |v: Vec<(Segment, Option<usize>)>| norm.apply_all(&v.into_iter().map(|(s, _)| s).collect::<Vec<_>>());
    Ok(Prepared {
        shards,
        val: strip(val),
        test: strip(test),
        channels,
        norm,
    })
}

fn tagged(segments: Vec<Segment>, modes: Vec<Option<usize>>) -> Vec<(Segment, Option<usize>)> {
    segments.into_iter().zip(modes).collect()
}

fn untagged(segments: Vec<Segment>) -> Vec<(Segment, Option<usize>)> {
    segments.into_iter().map(|s| (s, None)).collect()
}

/// Per-client training summary in a [`RoundReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub train_windows: usize,
    /// Mean objective over the last local epoch.
    pub final_loss: f64,
    pub final_terms: LossBreakdown,
    /// Test AUC of the client's own upload, for diagnostics.
    pub local_auc: Option<f64>,
}

/// One round's outcome. Round 0 describes the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Absent for single-device runs.
    pub aggregator: Option<Aggregator>,
    pub seed: u64,
    pub config_hash: String,
    pub clients: Vec<ClientSummary>,
    /// Global model on the pooled test set.
    pub metrics: EvalMetrics,
    pub aggregation: Option<AggregationDiagnostics>,
    /// Wall time; left out of the JSON so reports stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

/// Reports plus the final global model.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub model: GlobalModel,
    pub norm: NormStats,
}

/// Runtime knobs that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Clients trained concurrently; `1` is fully sequential.
    pub parallel_clients: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { parallel_clients: 1 }
    }
}

/// Mutable state carried between rounds.
pub struct Federation<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Prepared,
    pool: rayon::ThreadPool,
    pub global: GlobalModel,
    warm: Option<ProjectionNet>,
    config_hash: String,
}

impl<'a> Federation<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Prepared, opts: RunOptions) -> Result<Self, RunError> {
        cfg.validate()?;
        let enc_cfg = cfg.encoder.with_input(data.channels);
        let init_seed = derive_seed(cfg.seed, Stream::Init, 0, 0);
        let global = GlobalModel {
            encoder: EncoderParams::init(&enc_cfg, init_seed)?,
            exemplars: ExemplarSet::random_unit(cfg.exemplars, enc_cfg.embed_dim, init_seed ^ 1),
            round: 0,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel_clients.max(1))
            .build()
            .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            data,
            pool,
            global,
            warm: None,
            config_hash: cfg.hash(),
        })
    }

    fn score(&self, encoder: &EncoderParams, exemplars: &ExemplarSet, round: usize) -> Result<EvalMetrics, RunError> {
        let eval_err = |source| RunError::Eval { round, source };
        let client_err = |source| RunError::Client { round, source };
        let set = |segs: &[Segment]| -> Result<ScoredSet, RunError> {
            let scores = score_dataset(encoder, exemplars, segs).map_err(client_err)?;
            ScoredSet::new(scores, segs.iter().map(Segment::is_anomaly).collect()).map_err(eval_err)
        };
        let test = set(&self.data.test)?;
        let val = if self.cfg.eval.threshold == ThresholdMode::Val {
            Some(set(&self.data.val)?)
        } else {
            None
        };
        evaluate(self.cfg.eval.threshold, val.as_ref(), &test).map_err(eval_err)
    }

    fn local_auc(&self, upload: &LocalModel, round: usize) -> Option<f64> {
        let scores = score_dataset(&upload.encoder, &upload.exemplars, &self.data.test).ok()?;
        let set = ScoredSet::new(scores, self.data.test.iter().map(Segment::is_anomaly).collect()).ok()?;
        let a = auc(&set).ok();
        if a.is_none() {
            log::warn!("round {round}: client {} local AUC unavailable", upload.client_id);
        }
        a
    }

    /// Evaluates the current global model without training.
    pub fn initial_report(&self) -> Result<RoundReport, RunError> {
        let start = Instant::now();
        let metrics = self.score(&self.global.encoder, &self.global.exemplars, 0)?;
        Ok(RoundReport {
            round: 0,
            aggregator: Some(self.cfg.aggregator),
            seed: self.cfg.seed,
            config_hash: self.config_hash.clone(),
            clients: Vec::new(),
            metrics,
            aggregation: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains every client from the current global model, in parallel when
    /// configured, and returns the uploads in client-id order.
    pub fn train_clients(&self, round: usize) -> Result<Vec<LocalModel>, RunError> {
        let cfg = self.cfg;
        let global = &self.global;
        let results: Vec<Result<LocalModel, ClientError>> = self.pool.install(|| {
            self.data
                .shards
                .par_iter()
                .map(|shard| {
                    let train = TrainConfig {
                        seed: derive_seed(cfg.seed, Stream::ClientTrain, shard.client_id, round),
                        ..cfg.train.clone()
                    };
                    local_train(shard, global, &cfg.loss, &train, cfg.train.local_epochs)
                })
                .collect()
        });
        let mut uploads = results
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| RunError::Client { round, source })?;
        uploads.sort_by_key(|u| u.client_id);
        Ok(uploads)
    }

    /// One communication round; `round` counts from 1.
    pub fn run_round(&mut self, round: usize) -> Result<RoundReport, RunError> {
        let start = Instant::now();
        let uploads = self.train_clients(round)?;
        let server_err = |source| RunError::Server { round, source };
        let warm = if self.cfg.fedcc.warm_start { self.warm.as_ref() } else { None };
        let aggregated = aggregate_exemplars(
            self.cfg.aggregator,
            &uploads,
            &self.cfg.fedcc,
            derive_seed(self.cfg.seed, Stream::Server, 0, round),
            warm,
        )
        .map_err(server_err)?;
        let encoder = fedavg_encoders(&uploads).map_err(server_err)?;
        self.global = GlobalModel {
            encoder,
            exemplars: aggregated.exemplars,
            round,
        };
        self.warm = aggregated.projection;

        let metrics = self.score(&self.global.encoder, &self.global.exemplars, round)?;
        let clients = uploads
            .iter()
            .map(|u| ClientSummary {
                client_id: u.client_id,
                train_windows: u.sample_count,
                final_loss: u.diagnostics.loss_curve.last().copied().unwrap_or(f64::NAN),
                final_terms: u.diagnostics.final_loss,
                local_auc: self.local_auc(u, round),
            })
            .collect();
        let report = RoundReport {
            round,
            aggregator: Some(self.cfg.aggregator),
            seed: self.cfg.seed,
            config_hash: self.config_hash.clone(),
            clients,
            metrics,
            aggregation: Some(aggregated.diagnostics),
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "round {round} ({}): test AUC {:.4} in {:.1}s",
            self.cfg.aggregator, report.metrics.auc, report.seconds
        );
        Ok(report)
    }
}

/// Runs `cfg.rounds` rounds. With zero rounds only the initial model is
/// evaluated; otherwise one report per round is returned.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutcome, RunError> {
    cfg.validate()?;
    let data = prepare_data(cfg, cfg.clients)?;
    let mut fed = Federation::new(cfg, &data, opts)?;
    let reports = if cfg.rounds == 0 {
        vec![fed.initial_report()?]
    } else {
        (1..=cfg.rounds).map(|r| fed.run_round(r)).collect::<Result<_, _>>()?
    };
    Ok(ExperimentOutcome {
        reports,
        model: fed.global,
        norm: data.norm,
    })
}

/// Single-device ExDNN: one client holding all training data, trained for
/// `cfg.train.epochs` epochs, no aggregation.
pub fn run_local(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, RunError> {
    cfg.validate()?;
    let data = prepare_data(cfg, 1)?;
    let fed = Federation::new(cfg, &data, RunOptions::default())?;
    let start = Instant::now();
    let train = TrainConfig {
        seed: derive_seed(cfg.seed, Stream::ClientTrain, 0, 1),
        ..cfg.train.clone()
    };
    let model = local_train(&data.shards[0], &fed.global, &cfg.loss, &train, cfg.train.epochs)
        .map_err(|source| RunError::Client { round: 1, source })?;
    let metrics = fed.score(&model.encoder, &model.exemplars, 1)?;
    let report = RoundReport {
        round: 1,
        aggregator: None,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        clients: vec![ClientSummary {
            client_id: 0,
            train_windows: model.sample_count,
            final_loss: model.diagnostics.loss_curve.last().copied().unwrap_or(f64::NAN),
            final_terms: model.diagnostics.final_loss,
            local_auc: Some(metrics.auc),
        }],
        metrics,
        aggregation: None,
        seconds: start.elapsed().as_secs_f64(),
    };
    info!("local: test AUC {:.4} in {:.1}s", report.metrics.auc, report.seconds);
    Ok(ExperimentOutcome {
        reports: vec![report],
        model: GlobalModel {
            encoder: model.encoder,
            exemplars: model.exemplars,
            round: 1,
        },
        norm: data.norm,
    })
}
