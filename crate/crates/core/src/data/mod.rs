//! Time-series ingestion: CSV loading, sliding windows, z-score
//! normalisation, client partitioning and a synthetic multi-mode generator.

mod partition;
mod synth;

pub use partition::{partition_by_mode, partition_sequential, ModeAssignment, ModePartition};
pub use synth::{synth_multimode, SynthData, SynthSpec};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard deviations below this are treated as constant channels.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: row {row} has {found} columns, expected {expected}")]
    ColumnCount {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: label column '{column}' not found in header")]
    MissingLabelColumn { path: String, column: String },
    #[error("{path}: row {row}: label '{value}' is not 0 or 1")]
    BadLabel {
        path: String,
        row: usize,
        value: String,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("segment length {seg_len} exceeds series length {timesteps}")]
    WindowTooLong { seg_len: usize, timesteps: usize },
    #[error("segment length and stride must be at least 1")]
    ZeroWindow,
    #[error("cannot split {segments} segments across {clients} clients")]
    TooManyClients { clients: usize, segments: usize },
    #[error("{requested} modes per client requested but only {available} modes exist")]
    TooManyModes { requested: usize, available: usize },
    #[error("mode tags ({tags}) do not match segments ({segments})")]
    TagMismatch { tags: usize, segments: usize },
    #[error("disjoint assignment needs {needed} modes, only {available} exist")]
    NotEnoughModesForDisjoint { needed: usize, available: usize },
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
    #[error("cannot normalise with an empty training set")]
    EmptyTrain,
    #[error("segments have inconsistent shapes: {0}")]
    Shape(String),
}

/// A multivariate series: `timesteps` rows of `channels` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub source: String,
    pub channels: usize,
    pub timesteps: usize,
    /// Row-major `timesteps × channels`.
    pub values: Vec<f64>,
    pub point_labels: Option<Vec<u8>>,
}

impl SeriesTable {
    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

/// Where a segment came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub source: String,
    pub start: usize,
}

/// Raw values of one window, stored channel-major (`channels × len`).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    channels: usize,
    len: usize,
    values: Vec<f64>,
}

impl Window {
    pub fn new(channels: usize, len: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if channels == 0 || len == 0 || values.len() != channels * len {
            return Err(DataError::Shape(format!(
                "{} values for {channels} channels × {len} steps",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            len,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, channel: usize, t: usize) -> f64 {
        self.values[channel * self.len + t]
    }

    /// Flattened values, channel-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    /// The same window with time reversed.
    pub fn reversed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.channels {
            values.extend(self.channel(c).iter().rev());
        }
        Self {
            channels: self.channels,
            len: self.len,
            values,
        }
    }
}

/// A labelled window, as used for validation and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub window: Window,
    pub label: Option<Label>,
    pub origin: Origin,
}

impl Segment {
    pub fn is_anomaly(&self) -> bool {
        self.label.is_some_and(Label::is_anomaly)
    }

    /// Drops the label; training code only ever sees the result.
    pub fn into_train(self) -> TrainSegment {
        TrainSegment {
            window: self.window,
            origin: self.origin,
        }
    }
}

/// A training window. It has no label field, so training cannot consult
/// anomaly supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSegment {
    pub window: Window,
    pub origin: Origin,
}

/// Read access to the raw window, shared by labelled and unlabelled segments.
pub trait AsWindow {
    fn window(&self) -> &Window;
}

impl AsWindow for Segment {
    fn window(&self) -> &Window {
        &self.window
    }
}

impl AsWindow for TrainSegment {
    fn window(&self) -> &Window {
        &self.window
    }
}

impl AsWindow for Window {
    fn window(&self) -> &Window {
        self
    }
}

/// One simulated edge device's data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<TrainSegment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl ClientShard {
    pub fn from_train(client_id: usize, train: Vec<Segment>) -> Self {
        Self {
            client_id,
            train: train.into_iter().map(Segment::into_train).collect(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// Loads a headered CSV whose rows are timesteps and columns are channels.
///
/// When `label_column` is given, that column must hold `0`/`1` point labels
/// and is removed from the channel set.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<SeriesTable, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |source| DataError::Csv {
        path: path.display().to_string(),
        source,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = match label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            DataError::MissingLabelColumn {
                path: path.display().to_string(),
                column: name.to_owned(),
            }
        })?),
        None => None,
    };
    let channels = header.len() - usize::from(label_idx.is_some());

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut timesteps = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_err)?;
        if record.len() != header.len() {
            return Err(DataError::ColumnCount {
                path: path.display().to_string(),
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if Some(col) == label_idx {
                let label = match cell {
                    "0" | "0.0" => 0,
                    "1" | "1.0" => 1,
                    _ => {
                        return Err(DataError::BadLabel {
                            path: path.display().to_string(),
                            row,
                            value: cell.to_owned(),
                        })
                    }
                };
                labels.as_mut().expect("label column present").push(label);
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    path: path.display().to_string(),
                    row,
                    column: header[col].clone(),
                    value: cell.to_owned(),
                })?;
            values.push(v);
        }
        timesteps += 1;
    }
    if timesteps == 0 || channels == 0 {
        return Err(DataError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok(SeriesTable {
        source: path.display().to_string(),
        channels,
        timesteps,
        values,
        point_labels: labels,
    })
}

/// Cuts `table` into windows of `seg_len` steps starting every `stride`
/// steps. A window is anomalous iff any point it covers is.
pub fn make_windows(table: &SeriesTable, seg_len: usize, stride: usize) -> Result<Vec<Segment>, DataError> {
    if seg_len == 0 || stride == 0 {
        return Err(DataError::ZeroWindow);
    }
    if seg_len > table.timesteps {
        return Err(DataError::WindowTooLong {
            seg_len,
            timesteps: table.timesteps,
        });
    }
    let count = (table.timesteps - seg_len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut values = Vec::with_capacity(table.channels * seg_len);
        for c in 0..table.channels {
            values.extend((start..start + seg_len).map(|t| table.value(t, c)));
        }
        let label = table.point_labels.as_ref().map(|pl| {
            if pl[start..start + seg_len].contains(&1) {
                Label::Anomaly
            } else {
                Label::Normal
            }
        });
        out.push(Segment {
            window: Window::new(table.channels, seg_len, values)?,
            label,
            origin: Origin {
                source: table.source.clone(),
                start,
            },
        });
    }
    Ok(out)
}

/// Per-channel z-score statistics fitted on training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Divisor per channel; 1 for channels that were constant in training.
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &[Segment]) -> Result<Self, DataError> {
        let first = train.first().ok_or(DataError::EmptyTrain)?;
        let channels = first.window.channels();
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for s in train {
            if s.window.channels() != channels {
                return Err(DataError::Shape("channel counts differ".into()));
            }
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += s.window.channel(c).iter().sum::<f64>();
            }
            count += s.window.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for s in train {
            for (c, acc) in sq.iter_mut().enumerate() {
                *acc += s.window.channel(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let scale = sq
            .iter()
            .map(|s| {
                let std = (s / count as f64).sqrt();
                if std < MIN_STD {
                    1.0
                } else {
                    std
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, window: &Window) -> Window {
        let mut values = Vec::with_capacity(window.values.len());
        for c in 0..window.channels {
            let (m, s) = (self.mean[c], self.scale[c]);
            values.extend(window.channel(c).iter().map(|v| (v - m) / s));
        }
        Window {
            channels: window.channels,
            len: window.len,
            values,
        }
    }

    pub fn apply_all(&self, segments: &[Segment]) -> Vec<Segment> {
        segments
            .iter()
            .map(|s| Segment {
                window: self.apply(&s.window),
                label: s.label,
                origin: s.origin.clone(),
            })
            .collect()
    }
}

/// Fits z-score statistics on `train` and applies them to `train` and to
/// each list in `others`.
pub fn normalize_fit_apply(
    train: &[Segment],
    others: &[&[Segment]],
) -> Result<(Vec<Segment>, Vec<Vec<Segment>>, NormStats), DataError> {
    let stats = NormStats::fit(train)?;
    let train = stats.apply_all(train);
    let others = others.iter().map(|o| stats.apply_all(o)).collect();
    Ok((train, others, stats))
}
