//! Sequence encoder: stacked LSTM layers whose final hidden state feeds a
//! fully connected embedding layer.
//!
//! Parameters live in one flat vector described by an ordered manifest so
//! they can be averaged across clients and written to checkpoints without
//! knowing the network structure.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AsWindow, Window};
use crate::numkernel::{Gradients, KernelError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("input has {found} channels, encoder expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("windows in one batch must share a length ({first} vs {other})")]
    RaggedBatch { first: usize, other: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter fingerprint '{found}' does not match expected '{expected}'")]
    FingerprintMismatch { expected: String, found: String },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Record(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default = "defaults::num_layers")]
    pub num_layers: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub bidirectional: bool,
    /// Adds a bias to the embedding layer. Off by default: a learned offset
    /// lets every embedding drift toward one direction, which flattens the
    /// cosine scores.
    #[serde(default)]
    pub embed_bias: bool,
}

mod defaults {
    pub fn num_layers() -> usize {
        4
    }
    pub fn hidden_dim() -> usize {
        8
    }
    pub fn embed_dim() -> usize {
        8
    }
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            num_layers: defaults::num_layers(),
            hidden_dim: defaults::hidden_dim(),
            embed_dim: defaults::embed_dim(),
            bidirectional: false,
            embed_bias: false,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.input_dim == 0 || self.num_layers == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(EncoderError::InvalidConfig(
                "input_dim, num_layers, hidden_dim and embed_dim must all be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Identifies the parameter layout; equal fingerprints can be averaged.
    pub fn fingerprint(&self) -> String {
        format!(
            "lstm-v1:in={}:layers={}:hidden={}:embed={}:bidir={}:embed_bias={}",
            self.input_dim, self.num_layers, self.hidden_dim, self.embed_dim, self.bidirectional, self.embed_bias
        )
    }

    /// Ordered names and shapes of every parameter tensor.
    pub fn manifest(&self) -> Vec<ParamSpec> {
        let h = self.hidden_dim;
        let dirs = self.directions();
        let mut out = Vec::new();
        for layer in 0..self.num_layers {
            let input = if layer == 0 { self.input_dim } else { h * dirs };
            for dir in ["fw", "bw"].into_iter().take(dirs) {
                let p = format!("lstm.{layer}.{dir}");
                out.push(ParamSpec::new(format!("{p}.w_ih"), input, 4 * h));
                out.push(ParamSpec::new(format!("{p}.w_hh"), h, 4 * h));
                out.push(ParamSpec::new(format!("{p}.bias"), 1, 4 * h));
            }
        }
        out.push(ParamSpec::new("embed.w".into(), h * dirs, self.embed_dim));
        if self.embed_bias {
            out.push(ParamSpec::new("embed.b".into(), 1, self.embed_dim));
        }
        out
    }
}

/// Name and `rows × cols` shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
}

impl ParamSpec {
    fn new(name: String, rows: usize, cols: usize) -> Self {
        Self {
            name,
            shape: [rows, cols],
        }
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_bias(&self) -> bool {
        self.name.ends_with("bias") || self.name.ends_with(".b")
    }
}

/// Flat encoder parameters plus the manifest describing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub fingerprint: String,
    pub manifest: Vec<ParamSpec>,
    pub values: Vec<f64>,
}

impl EncoderParams {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let manifest = config.manifest();
        let mut values = Vec::with_capacity(manifest.iter().map(ParamSpec::len).sum());
        for spec in &manifest {
            if spec.is_bias() {
                values.extend(std::iter::repeat_n(0.0, spec.len()));
            } else {
                let bound = 1.0 / (spec.shape[0] as f64).sqrt();
                values.extend((0..spec.len()).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Ok(Self {
            config: config.clone(),
            fingerprint: config.fingerprint(),
            manifest,
            values,
        })
    }

    /// All-zero parameters with the layout of `config`.
    pub fn zeros(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let manifest = config.manifest();
        let n = manifest.iter().map(ParamSpec::len).sum();
        Ok(Self {
            config: config.clone(),
            fingerprint: config.fingerprint(),
            manifest,
            values: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other_fingerprint: &str) -> Result<(), EncoderError> {
        if self.fingerprint != other_fingerprint {
            return Err(EncoderError::FingerprintMismatch {
                expected: other_fingerprint.to_owned(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Puts every parameter tensor on `tape`, as trainable leaves when
    /// `trainable` is set.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut offset = 0;
        let vars = self
            .manifest
            .iter()
            .map(|spec| {
                let t = Tensor::matrix(spec.shape[0], spec.shape[1], self.values[offset..offset + spec.len()].to_vec())
                    .expect("manifest shapes are positive");
                offset += spec.len();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        EncoderVars {
            config: self.config.clone(),
            vars,
        }
    }

    /// Serialises to the checkpoint record (JSON; floats round-trip exactly).
    pub fn to_record(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialise")
    }

    /// Parses a checkpoint record, rejecting any layout other than
    /// `expected`'s.
    pub fn from_record(record: &str, expected: &EncoderConfig) -> Result<Self, EncoderError> {
        let params: EncoderParams = serde_json::from_str(record).map_err(|e| EncoderError::Record(e.to_string()))?;
        params.check_compatible(&expected.fingerprint())?;
        if params.manifest != expected.manifest() || params.config != *expected {
            return Err(EncoderError::Record("manifest does not match the configuration".into()));
        }
        let n: usize = params.manifest.iter().map(ParamSpec::len).sum();
        if n != params.values.len() {
            return Err(EncoderError::Record(format!(
                "manifest describes {n} values, record holds {}",
                params.values.len()
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        std::fs::write(path, self.to_record())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: &EncoderConfig) -> Result<Self, EncoderError> {
        Self::from_record(&std::fs::read_to_string(path)?, expected)
    }

    /// Embeds a single window.
    pub fn embed(&self, window: &Window) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = vars.forward(&mut tape, &[window])?;
        Ok(tape.value(out).values().to_vec())
    }

    /// Embeds many windows, `chunk` at a time; rows follow input order.
    pub fn embed_all<W: AsWindow>(&self, items: &[W], chunk: usize) -> Result<Vec<Vec<f64>>, EncoderError> {
        let mut out = Vec::with_capacity(items.len());
        for group in items.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape, false);
            let windows: Vec<&Window> = group.iter().map(AsWindow::window).collect();
            let emb = vars.forward(&mut tape, &windows)?;
            out.extend(tape.value(emb).row_iter().map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Encoder parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    config: EncoderConfig,
    vars: Vec<Var>,
}

impl EncoderVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient w.r.t. every parameter, flattened in manifest order.
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.vars.iter().flat_map(|&v| grads.get(v).into_values()).collect()
    }

    /// Embeds a batch of equal-length windows into a `batch × embed_dim`
    /// node.
    pub fn forward(&self, tape: &mut Tape, windows: &[&Window]) -> Result<Var, EncoderError> {
        let first = windows.first().ok_or(EncoderError::EmptyBatch)?;
        let steps = first.len();
        for w in windows {
            if w.channels() != self.config.input_dim {
                return Err(EncoderError::DimensionMismatch {
                    expected: self.config.input_dim,
                    found: w.channels(),
                });
            }
            if w.len() != steps {
                return Err(EncoderError::RaggedBatch {
                    first: steps,
                    other: w.len(),
                });
            }
        }
        let batch = windows.len();
        let channels = self.config.input_dim;
        let mut sequence: Vec<Var> = (0..steps)
            .map(|t| {
                let mut x = Vec::with_capacity(batch * channels);
                for w in windows {
                    x.extend((0..channels).map(|c| w.at(c, t)));
                }
                tape.constant(Tensor::matrix(batch, channels, x).expect("batch > 0"))
            })
            .collect();

        let dirs = self.config.directions();
        let mut idx = 0;
        let mut last_fw = None;
        let mut first_bw = None;
        for _layer in 0..self.config.num_layers {
            let mut per_dir = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let (w_ih, w_hh, bias) = (self.vars[idx], self.vars[idx + 1], self.vars[idx + 2]);
                idx += 3;
                per_dir.push(self.run_direction(tape, &sequence, w_ih, w_hh, bias, d == 1)?);
            }
            last_fw = per_dir[0].last().copied();
            first_bw = per_dir.get(1).map(|bw| bw[0]);
            sequence = if dirs == 1 {
                per_dir.pop().expect("one direction")
            } else {
                (0..steps)
                    .map(|t| tape.concat_cols(&[per_dir[0][t], per_dir[1][t]]))
                    .collect::<Result<_, _>>()?
            };
        }
        let top = match first_bw {
            Some(bw) => tape.concat_cols(&[last_fw.expect("forward direction ran"), bw])?,
            None => last_fw.expect("forward direction ran"),
        };
        let z = tape.matmul(top, self.vars[idx])?;
        if self.config.embed_bias {
            return Ok(tape.add(z, self.vars[idx + 1])?);
        }
        Ok(z)
    }

    /// One LSTM direction over `inputs`; returns hidden states indexed by
    /// time in the original order.
    fn run_direction(
        &self,
        tape: &mut Tape,
        inputs: &[Var],
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        reverse: bool,
    ) -> Result<Vec<Var>, EncoderError> {
        let h = self.config.hidden_dim;
        let batch = tape.value(inputs[0]).rows();
        let mut hidden = tape.constant(Tensor::zeros(batch, h));
        let mut cell = tape.constant(Tensor::zeros(batch, h));
        let mut out = vec![hidden; inputs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..inputs.len()).rev())
        } else {
            Box::new(0..inputs.len())
        };
        for t in order {
            let xw = tape.matmul(inputs[t], w_ih)?;
            let hw = tape.matmul(hidden, w_hh)?;
            let gates = tape.add(xw, hw)?;
            let gates = tape.add(gates, bias)?;
            let i = tape.slice_cols(gates, 0, h)?;
            let f = tape.slice_cols(gates, h, 2 * h)?;
            let g = tape.slice_cols(gates, 2 * h, 3 * h)?;
            let o = tape.slice_cols(gates, 3 * h, 4 * h)?;
            let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
            let g = tape.tanh(g);
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            let squashed = tape.tanh(cell);
            hidden = tape.mul(o, squashed)?;
            out[t] = hidden;
        }
        Ok(out)
    }
}
