//! Model bundles exchanged between clients and the server.
//!
//! The server side of the protocol is written against [`ServerInput`], a
//! sealed trait implemented only by upload types. Raw data types such as
//! [`Segment`](crate::data::Segment) cannot implement it outside this crate,
//! and none do inside it, so no aggregation entry point can be handed
//! training data.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::exdnn::{ExemplarSet, LossBreakdown};

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub client_id: usize,
    pub encoder: EncoderParams,
    pub exemplars: ExemplarSet,
    /// Number of local training windows, used as the FedAvg weight.
    pub sample_count: usize,
    pub diagnostics: TrainDiagnostics,
}

/// Training summary carried with a [`LocalModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub epochs: usize,
    pub steps: usize,
    /// Mean minibatch objective per epoch.
    pub loss_curve: Vec<f64>,
    /// Terms of the last minibatch evaluated.
    pub final_loss: LossBreakdown,
}

/// The model the server redistributes at the end of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub encoder: EncoderParams,
    pub exemplars: ExemplarSet,
    /// Rounds completed; `0` for the initial model.
    pub round: usize,
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for super::LocalModel {}
}

/// Anything the server may read: uploaded parameters, never data.
pub trait ServerInput: sealed::Sealed + Sync {
    fn client_id(&self) -> usize;
    fn encoder(&self) -> &EncoderParams;
    fn exemplars(&self) -> &ExemplarSet;
    fn sample_count(&self) -> usize;
}

impl ServerInput for LocalModel {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    fn exemplars(&self) -> &ExemplarSet {
        &self.exemplars
    }

    fn sample_count(&self) -> usize {
        self.sample_count
    }
}
