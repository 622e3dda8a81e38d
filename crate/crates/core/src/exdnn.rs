//! Exemplar module and the local training objective.
//!
//! A window is embedded by the encoder and softly assigned to `K` learnable
//! exemplars by a scaled softmax over cosine similarities. Training combines
//! four terms:
//!
//! * **cluster**: KL divergence from the sharpened target `P` to the soft
//!   assignment `Q` (`P` is held constant),
//! * **balance**: cross-entropy between the prior `α` and the mean
//!   assignment, which keeps exemplars from collapsing,
//! * **drp**: a pairwise ranking loss asking embedding similarity to respect
//!   nearest neighbours in raw input space within the minibatch,
//! * **absolute**: a softplus margin pushing each embedding's similarity to
//!   its soft nearest exemplar above `margin`.
//!
//! The anomaly score of a window is the negated best cosine similarity to
//! any exemplar: higher is more anomalous.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AsWindow, Window};
use crate::encoder::{EncoderError, EncoderParams, EncoderVars};
use crate::numkernel::{cosine_sim, KernelError, Tape, Tensor, Var, LOG_EPS};

#[derive(Debug, Error)]
pub enum ExdnnError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("loss term '{term}' is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Shape(String),
}

/// `K` exemplars in embedding space, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    rows: Tensor,
}

impl ExemplarSet {
    pub fn new(rows: Tensor) -> Result<Self, ExdnnError> {
        for (j, r) in rows.row_iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= LOG_EPS) {
                return Err(ExdnnError::Kernel(KernelError::Degenerate {
                    op: "exemplar",
                    detail: format!("exemplar {j} has norm {norm:e}"),
                }));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ExdnnError> {
        Self::new(Tensor::from_rows(rows)?)
    }

    /// `k` independent random unit vectors in `dim` dimensions.
    pub fn random_unit(k: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(k * dim);
        for _ in 0..k {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            values.extend(v.iter().map(|x| x / norm));
        }
        Self {
            rows: Tensor::matrix(k, dim, values).expect("k, dim ≥ 1"),
        }
    }

    pub fn k(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn exemplar(&self, j: usize) -> &[f64] {
        self.rows.row(j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_tensor(self) -> Tensor {
        self.rows
    }

    pub fn is_finite(&self) -> bool {
        self.rows.is_finite()
    }
}

/// Hyper-parameters of the local objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub margin: f64,
    pub knn_k: usize,
    pub cluster_weight: f64,
    pub drp_weight: f64,
    pub balance_weight: f64,
    pub absolute_weight: f64,
    /// Prior over exemplars; uniform when absent.
    pub alpha: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma1: 2.0,
            gamma2: 10.0,
            gamma3: 10.0,
            margin: 0.5,
            knn_k: 10,
            cluster_weight: 1.0,
            drp_weight: 1.0,
            balance_weight: 1.0,
            absolute_weight: 1.0,
            alpha: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ExdnnError> {
        let bad = |m: String| Err(ExdnnError::InvalidConfig(m));
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)] {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("{name} must be positive, got {g}"));
            }
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return bad(format!("margin must lie in (0, 1), got {}", self.margin));
        }
        if self.knn_k == 0 {
            return bad("knn_k must be ≥ 1".into());
        }
        for (name, w) in [
            ("cluster_weight", self.cluster_weight),
            ("drp_weight", self.drp_weight),
            ("balance_weight", self.balance_weight),
            ("absolute_weight", self.absolute_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be non-negative, got {w}"));
            }
        }
        if let Some(alpha) = &self.alpha {
            let total: f64 = alpha.iter().sum();
            if alpha.iter().any(|&a| a < 0.0) || (total - 1.0).abs() > 1e-9 {
                return bad("alpha must be a probability vector".into());
            }
        }
        Ok(())
    }

    /// The prior for `k` exemplars.
    pub fn prior(&self, k: usize) -> Result<Vec<f64>, ExdnnError> {
        match &self.alpha {
            Some(a) if a.len() == k => Ok(a.clone()),
            Some(a) => Err(ExdnnError::InvalidConfig(format!(
                "alpha has {} entries for {k} exemplars",
                a.len()
            ))),
            None => Ok(vec![1.0 / k as f64; k]),
        }
    }
}

/// A similarity scale: fixed, or a trainable `1 × 1` node.
#[derive(Debug, Clone, Copy)]
pub enum Scale {
    Fixed(f64),
    Learned(Var),
}

impl Scale {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, KernelError> {
        match self {
            Scale::Fixed(g) => Ok(tape.scale(x, g)),
            Scale::Learned(g) => tape.mul(x, g),
        }
    }
}

/// Cosine-similarity matrix between the rows of `a` and the rows of `b`.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var, KernelError> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

/// `Q[i, j] = softmax_j(γ₁ · cos(fᵢ, cⱼ))` on the tape.
pub fn soft_assign_var(tape: &mut Tape, embeddings: Var, exemplars: Var, gamma1: Scale) -> Result<Var, KernelError> {
    let sim = cosine_matrix(tape, embeddings, exemplars)?;
    let logits = gamma1.apply(tape, sim)?;
    Ok(tape.softmax_rows(logits))
}

/// KL(P‖Q) averaged over rows, with `P` a constant.
pub fn cluster_loss_var(tape: &mut Tape, p: &Tensor, q: Var) -> Result<Var, KernelError> {
    let n = p.rows() as f64;
    let qv = tape.value(q);
    if p.values().iter().zip(qv.values()).any(|(&pi, &qi)| pi > 0.0 && qi < LOG_EPS) {
        warn!("cluster loss: assignment underflow where the target is positive; log floored at {LOG_EPS:e}");
    }
    let entropy_part: f64 = p.values().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let pc = tape.constant(p.clone());
    let log_q = tape.ln(q);
    let cross = tape.mul(pc, log_q)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0 / n);
    Ok(tape.add_scalar(neg, entropy_part / n))
}

/// `−αᵀ log(mean_i qᵢ)`.
pub fn balance_loss_var(tape: &mut Tape, q: Var, alpha: &[f64]) -> Result<Var, KernelError> {
    let n = tape.value(q).rows() as f64;
    let col = tape.sum_rows(q);
    let mean = tape.scale(col, 1.0 / n);
    let log_mean = tape.ln(mean);
    let a = tape.constant(Tensor::row_vector(alpha.to_vec()));
    let weighted = tape.mul(log_mean, a)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0))
}

/// Positive/negative masks of the minibatch neighbour graph: positives of
/// anchor `i` are its `knn_k` most cosine-similar raw windows (self
/// excluded, ties broken by index), negatives are every other window.
pub fn knn_masks(raw: &[&Window], knn_k: usize) -> (Tensor, Tensor) {
    let n = raw.len();
    let mut pos = Tensor::zeros(n, n);
    let mut neg = Tensor::zeros(n, n);
    for i in 0..n {
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine_sim(raw[i].values(), raw[j].values()).unwrap_or(0.0)))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (rank, (j, _)) in others.into_iter().enumerate() {
            let target = if rank < knn_k { &mut pos } else { &mut neg };
            target.values_mut()[i * n + j] = 1.0;
        }
    }
    (pos, neg)
}

/// Mean over anchors of `log(1 + Σ_{p∈Pᵢ, q∉Pᵢ} exp(γ₂(s_iq − s_ip)))`.
///
/// The double sum factorises into `(Σ_q e^{γ s_iq})(Σ_p e^{−γ s_ip})`, so an
/// anchor with no positives or no negatives contributes `log 1 = 0`.
pub fn drp_loss_var(
    tape: &mut Tape,
    embeddings: Var,
    raw: &[&Window],
    gamma2: Scale,
    knn_k: usize,
) -> Result<Var, KernelError> {
    let (pos, neg) = knn_masks(raw, knn_k);
    let sim = cosine_matrix(tape, embeddings, embeddings)?;
    let scaled = gamma2.apply(tape, sim)?;
    let up = tape.exp(scaled);
    let flipped = tape.scale(scaled, -1.0);
    let down = tape.exp(flipped);
    let neg_mask = tape.constant(neg);
    let pos_mask = tape.constant(pos);
    let up = tape.mul(up, neg_mask)?;
    let down = tape.mul(down, pos_mask)?;
    let a = tape.sum_cols(up);
    let b = tape.sum_cols(down);
    let ab = tape.mul(a, b)?;
    let one_plus = tape.add_scalar(ab, 1.0);
    let logs = tape.ln(one_plus);
    Ok(tape.mean(logs))
}

/// Mean of `softplus(−γ₃ (tᵢ − margin))` where `tᵢ = f̂ᵢᵀ Σⱼ q_ij ĉⱼ`.
pub fn absolute_loss_var(
    tape: &mut Tape,
    embeddings: Var,
    exemplars: Var,
    q: Var,
    gamma3: Scale,
    margin: f64,
) -> Result<Var, KernelError> {
    let en = tape.normalize_rows(embeddings)?;
    let cn = tape.normalize_rows(exemplars)?;
    let soft_nearest = tape.matmul(q, cn)?;
    let prod = tape.mul(en, soft_nearest)?;
    let t = tape.sum_cols(prod);
    let shifted = tape.add_scalar(t, -margin);
    let scaled = gamma3.apply(tape, shifted)?;
    let z = tape.scale(scaled, -1.0);
    let sp = tape.softplus(z);
    Ok(tape.mean(sp))
}

/// DEC target: `p_ij ∝ q_ij² / Σ_i q_ij`, rows renormalised.
///
/// A row whose reweighting `q_ij / Σ_i q_ij` is constant across `j` (always
/// the case for a single row) is returned unchanged rather than
/// renormalised, so `P == Q` holds exactly there.
pub fn target_dist(q: &Tensor) -> Tensor {
    let (n, k) = q.dims();
    let mut freq = vec![0.0; k];
    for row in q.row_iter() {
        for (f, v) in freq.iter_mut().zip(row) {
            *f += v;
        }
    }
    let mut out = Vec::with_capacity(n * k);
    for row in q.row_iter() {
        let ratio: Vec<f64> = row
            .iter()
            .zip(&freq)
            .map(|(&v, &f)| if f > 0.0 { v / f } else { 0.0 })
            .collect();
        if ratio.iter().all(|r| r.to_bits() == ratio[0].to_bits()) && ratio[0] > 0.0 {
            out.extend_from_slice(row);
            continue;
        }
        let w: Vec<f64> = row.iter().zip(&ratio).map(|(v, r)| v * r).collect();
        let total: f64 = w.iter().sum();
        out.extend(w.iter().map(|v| v / total));
    }
    Tensor::matrix(n, k, out).expect("same shape as q")
}

fn constants(tape: &mut Tape, embeddings: &Tensor, exemplars: &ExemplarSet) -> Result<(Var, Var), ExdnnError> {
    if embeddings.cols() != exemplars.dim() {
        return Err(ExdnnError::Shape(format!(
            "embeddings have dimension {}, exemplars {}",
            embeddings.cols(),
            exemplars.dim()
        )));
    }
    Ok((tape.constant(embeddings.clone()), tape.constant(exemplars.rows.clone())))
}

/// Soft assignment of each embedding row to the exemplars.
pub fn soft_assign(embeddings: &Tensor, exemplars: &ExemplarSet, gamma1: f64) -> Result<Tensor, ExdnnError> {
    let mut tape = Tape::new();
    let (e, c) = constants(&mut tape, embeddings, exemplars)?;
    let q = soft_assign_var(&mut tape, e, c, Scale::Fixed(gamma1))?;
    Ok(tape.value(q).clone())
}

/// `(1/n) Σᵢ Σⱼ p_ij (log p_ij − log q_ij)` with `0 log 0 = 0`; exactly
/// zero when `P == Q`.
pub fn cluster_loss(p: &Tensor, q: &Tensor) -> Result<f64, ExdnnError> {
    if p.dims() != q.dims() {
        return Err(ExdnnError::Shape(format!("P is {:?}, Q is {:?}", p.shape(), q.shape())));
    }
    let total: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_EPS).ln()))
        .sum();
    Ok(total / p.rows() as f64)
}

pub fn balance_loss(q: &Tensor, alpha: &[f64]) -> Result<f64, ExdnnError> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let l = balance_loss_var(&mut tape, qv, alpha)?;
    Ok(tape.scalar_value(l))
}

pub fn drp_loss(embeddings: &Tensor, raw: &[&Window], gamma2: f64, knn_k: usize) -> Result<f64, ExdnnError> {
    if raw.len() != embeddings.rows() {
        return Err(ExdnnError::Shape(format!(
            "{} embeddings for {} raw windows",
            embeddings.rows(),
            raw.len()
        )));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let l = drp_loss_var(&mut tape, e, raw, Scale::Fixed(gamma2), knn_k)?;
    Ok(tape.scalar_value(l))
}

pub fn absolute_loss(
    embeddings: &Tensor,
    exemplars: &ExemplarSet,
    q: &Tensor,
    gamma3: f64,
    margin: f64,
) -> Result<f64, ExdnnError> {
    let mut tape = Tape::new();
    let (e, c) = constants(&mut tape, embeddings, exemplars)?;
    let qv = tape.constant(q.clone());
    let l = absolute_loss_var(&mut tape, e, c, qv, Scale::Fixed(gamma3), margin)?;
    Ok(tape.scalar_value(l))
}

/// Per-term values of one evaluation of the local objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cluster: f64,
    pub drp: f64,
    pub balance: f64,
    pub absolute: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Names the first non-finite term, if any.
    pub fn check_finite(&self) -> Result<(), ExdnnError> {
        for (term, value) in [
            ("cluster", self.cluster),
            ("drp", self.drp),
            ("balance", self.balance),
            ("absolute", self.absolute),
            ("total", self.total),
        ] {
            if !value.is_finite() {
                return Err(ExdnnError::NonFinite { term, value });
            }
        }
        Ok(())
    }
}

/// Tape handles of the objective built by [`build_objective`].
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Scales as they enter the objective: fixed numbers or tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct Scales {
    pub gamma1: Scale,
    pub gamma2: Scale,
    pub gamma3: Scale,
}

impl Scales {
    pub fn fixed(cfg: &LossConfig) -> Self {
        Self {
            gamma1: Scale::Fixed(cfg.gamma1),
            gamma2: Scale::Fixed(cfg.gamma2),
            gamma3: Scale::Fixed(cfg.gamma3),
        }
    }
}

/// Builds the weighted sum of the four local terms for one minibatch.
///
/// `P` is recomputed from the batch's current `Q` and enters as a constant.
/// Terms with zero weight are still evaluated for the breakdown but do not
/// reach the total, so they contribute no gradient.
pub fn build_objective(
    tape: &mut Tape,
    encoder: &EncoderVars,
    exemplars: Var,
    batch: &[&Window],
    cfg: &LossConfig,
    scales: Scales,
) -> Result<Objective, ExdnnError> {
    let k = tape.value(exemplars).rows();
    let alpha = cfg.prior(k)?;
    let emb = encoder.forward(tape, batch)?;
    let q = soft_assign_var(tape, emb, exemplars, scales.gamma1)?;
    let p = target_dist(tape.value(q));
    let cluster = cluster_loss_var(tape, &p, q)?;
    let balance = balance_loss_var(tape, q, &alpha)?;
    let drp = drp_loss_var(tape, emb, batch, scales.gamma2, cfg.knn_k)?;
    let absolute = absolute_loss_var(tape, emb, exemplars, q, scales.gamma3, cfg.margin)?;

    let mut total: Option<Var> = None;
    for (term, w) in [
        (cluster, cfg.cluster_weight),
        (drp, cfg.drp_weight),
        (balance, cfg.balance_weight),
        (absolute, cfg.absolute_weight),
    ] {
        if w == 0.0 {
            continue;
        }
        let weighted = tape.scale(term, w);
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let breakdown = LossBreakdown {
        cluster: tape.scalar_value(cluster),
        drp: tape.scalar_value(drp),
        balance: tape.scalar_value(balance),
        absolute: tape.scalar_value(absolute),
        total: tape.scalar_value(total),
    };
    Ok(Objective { total, breakdown })
}

/// Objective value and gradients w.r.t. encoder parameters and exemplars.
#[derive(Debug, Clone)]
pub struct LossWithGrad {
    pub breakdown: LossBreakdown,
    pub encoder_grad: Vec<f64>,
    pub exemplar_grad: Tensor,
}

/// Evaluates the full local objective with fixed scales and differentiates
/// it.
pub fn total_loss<W: AsWindow>(
    batch: &[W],
    params: &EncoderParams,
    exemplars: &ExemplarSet,
    cfg: &LossConfig,
) -> Result<LossWithGrad, ExdnnError> {
    cfg.validate()?;
    let windows: Vec<&Window> = batch.iter().map(AsWindow::window).collect();
    let mut tape = Tape::new();
    let enc = params.register(&mut tape, true);
    let ex = tape.param(exemplars.rows.clone());
    let obj = build_objective(&mut tape, &enc, ex, &windows, cfg, Scales::fixed(cfg))?;
    obj.breakdown.check_finite()?;
    let grads = tape.backward(obj.total)?;
    Ok(LossWithGrad {
        breakdown: obj.breakdown,
        encoder_grad: enc.flat_gradient(&grads),
        exemplar_grad: grads.get(ex),
    })
}

/// `−maxⱼ cos(embedding, cⱼ)` for an already-embedded window.
pub fn score_embedding(embedding: &[f64], exemplars: &ExemplarSet) -> Result<f64, ExdnnError> {
    let mut best = f64::NEG_INFINITY;
    for j in 0..exemplars.k() {
        best = best.max(cosine_sim(embedding, exemplars.exemplar(j))?);
    }
    Ok(-best)
}

/// Anomaly score of one window: higher means more anomalous, range `[−1, 1]`.
pub fn anomaly_score(params: &EncoderParams, exemplars: &ExemplarSet, window: &Window) -> Result<f64, ExdnnError> {
    score_embedding(&params.embed(window)?, exemplars)
}
