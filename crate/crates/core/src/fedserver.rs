//! Server-side aggregation.
//!
//! Encoders are always combined by sample-weighted federated averaging.
//! Exemplars go through one of three aggregators:
//!
//! * [`Aggregator::Fedcc`]: constrained clustering of the pooled local
//!   exemplars in a learned projection space, then a soft merge back in the
//!   original space,
//! * [`Aggregator::FedavgEx`]: slot-wise averaging,
//! * [`Aggregator::KmeansEx`]: k-means over the pooled exemplars.
//!
//! Every entry point takes uploads through [`ServerInput`], so nothing here
//! can see client data.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::Adam;
use crate::encoder::{EncoderError, EncoderParams};
use crate::exdnn::{cosine_matrix, soft_assign_var, target_dist, ExdnnError, ExemplarSet, Scale};
use crate::model::ServerInput;
use crate::numkernel::{cosine_sim, KernelError, Tape, Tensor, Var, LOG_EPS};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no local models to aggregate")]
    NoModels,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Exdnn(#[from] ExdnnError),
    #[error("client {client} uploaded {found:?} exemplars, expected {expected:?} (K × d)")]
    ExemplarShape {
        client: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("FedCC loss term '{term}' became {value} at step {step}")]
    NonFinite { term: &'static str, value: f64, step: usize },
    #[error("invalid FedCC config: {0}")]
    InvalidConfig(String),
}

/// Uploads ordered by client id, so every reduction runs in a fixed order.
fn by_client<U: ServerInput>(uploads: &[U]) -> Result<Vec<&U>, ServerError> {
    if uploads.is_empty() {
        return Err(ServerError::NoModels);
    }
    let mut sorted: Vec<&U> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id());
    Ok(sorted)
}

/// Sample-weighted mean of the uploaded encoder parameters.
///
/// The sum runs in client-id order whatever the input order; identical
/// inputs are returned unchanged.
pub fn fedavg_encoders<U: ServerInput>(uploads: &[U]) -> Result<EncoderParams, ServerError> {
    let sorted = by_client(uploads)?;
    let first = sorted[0].encoder();
    for u in &sorted[1..] {
        u.encoder().check_compatible(&first.fingerprint)?;
    }
    if sorted.iter().all(|u| u.encoder().values == first.values) {
        return Ok(first.clone());
    }
    let total: usize = sorted.iter().map(|u| u.sample_count()).sum();
    if total == 0 {
        return Err(ServerError::ZeroSamples);
    }
    let mut out = first.clone();
    out.values.iter_mut().for_each(|v| *v = 0.0);
    for u in &sorted {
        let w = u.sample_count() as f64 / total as f64;
        for (acc, v) in out.values.iter_mut().zip(&u.encoder().values) {
            *acc += w * v;
        }
    }
    Ok(out)
}

fn check_exemplar_shapes<U: ServerInput>(sorted: &[&U]) -> Result<(usize, usize), ServerError> {
    let expected = (sorted[0].exemplars().k(), sorted[0].exemplars().dim());
    for u in sorted {
        let found = (u.exemplars().k(), u.exemplars().dim());
        if found != expected {
            return Err(ServerError::ExemplarShape {
                client: u.client_id(),
                expected,
                found,
            });
        }
    }
    Ok(expected)
}

/// All uploaded exemplars stacked client by client (`L·K × d`), with the
/// slot index of each row.
pub fn pool_exemplars<U: ServerInput>(uploads: &[U]) -> Result<(Tensor, Vec<usize>), ServerError> {
    let sorted = by_client(uploads)?;
    let (k, d) = check_exemplar_shapes(&sorted)?;
    let mut values = Vec::with_capacity(sorted.len() * k * d);
    let mut slots = Vec::with_capacity(sorted.len() * k);
    for u in &sorted {
        values.extend_from_slice(u.exemplars().as_tensor().values());
        slots.extend(0..k);
    }
    Ok((Tensor::matrix(sorted.len() * k, d, values)?, slots))
}

/// Replaces rows whose norm fell below [`LOG_EPS`] with seeded `N(0, 1e-6)`
/// noise; returns the rows touched.
fn jitter_degenerate_rows(rows: &mut Tensor, seed: u64) -> Vec<usize> {
    let (n, d) = rows.dims();
    let noise = Normal::new(0.0, 1e-6).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut touched = Vec::new();
    for i in 0..n {
        let row = &mut rows.values_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= LOG_EPS) {
            warn!("exemplar slot {i} collapsed (norm {norm:e}); re-jittering");
            row.iter_mut().for_each(|v| *v = noise.sample(&mut rng));
            touched.push(i);
        }
    }
    touched
}

/// Exemplars produced by an aggregator plus what had to be repaired.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarAggregate {
    pub exemplars: ExemplarSet,
    /// Slots whose result had (near-)zero norm and were re-jittered.
    pub jittered: Vec<usize>,
}

/// Slot-wise mean of the local exemplars (the FedAvgEx baseline).
pub fn avg_exemplars<U: ServerInput>(uploads: &[U], seed: u64) -> Result<ExemplarAggregate, ServerError> {
    let sorted = by_client(uploads)?;
    let (k, d) = check_exemplar_shapes(&sorted)?;
    let mut sum = Tensor::zeros(k, d);
    for u in &sorted {
        sum.add_assign(u.exemplars().as_tensor());
    }
    let mut mean = sum.map(|v| v / sorted.len() as f64);
    let jittered = jitter_degenerate_rows(&mut mean, seed);
    Ok(ExemplarAggregate {
        exemplars: ExemplarSet::new(mean)?,
        jittered,
    })
}

/// Output of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Tensor,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &Tensor) -> (usize, f64) {
    centers
        .row_iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding followed by Lloyd iterations until no center moves by
/// more than `tol` or `max_iter` is reached. An emptied cluster is re-seeded
/// at the point farthest from its current center.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans, ServerError> {
    let (n, d) = points.dims();
    if k == 0 || k > n {
        return Err(ServerError::InvalidConfig(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // rounding can land on an already chosen point (weight 0)
            if dist[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| dist[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centers = Tensor::from_rows(&chosen.iter().map(|&i| points.row(i)).collect::<Vec<_>>())?;

    let mut assignment = vec![0; n];
    let mut sse_history = Vec::new();
    for _ in 0..max_iter {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = nearest(points.row(i), &centers).0;
        }
        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.values_mut()[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centers.row(assignment[a]));
                        let db = sq_dist(points.row(b), centers.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n ≥ 1");
                debug!("k-means: cluster {j} emptied; re-seeding from point {far}");
                let (src, old) = (assignment[far], far);
                counts[src] -= 1;
                for (s, v) in sums.values_mut()[src * d..(src + 1) * d].iter_mut().zip(points.row(old)) {
                    *s -= v;
                }
                sums.values_mut()[j * d..(j + 1) * d].copy_from_slice(points.row(far));
                counts[j] = 1;
                assignment[far] = j;
            }
        }
        let mut shift: f64 = 0.0;
        let mut next = centers.clone();
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let row = &mut next.values_mut()[j * d..(j + 1) * d];
            for (c, s) in row.iter_mut().zip(&sums.values()[j * d..(j + 1) * d]) {
                *c = s / counts[j] as f64;
            }
            shift = shift.max(sq_dist(next.row(j), centers.row(j)).sqrt());
        }
        centers = next;
        let sse = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| sq_dist(points.row(i), centers.row(a)))
            .sum();
        sse_history.push(sse);
        if shift <= tol {
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignment,
        sse_history,
    })
}

fn normalized_rows(t: &Tensor) -> Result<Tensor, ServerError> {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone());
    let n = tape.normalize_rows(v)?;
    Ok(tape.value(n).clone())
}

/// Exemplars as k-means centers of the pooled, cosine-normalised local
/// exemplars (the FedKmsEx baseline).
pub fn kmeans_exemplars<U: ServerInput>(uploads: &[U], k: usize, seed: u64) -> Result<ExemplarAggregate, ServerError> {
    let (pooled, _) = pool_exemplars(uploads)?;
    let km = kmeans(&normalized_rows(&pooled)?, k, seed, 100, 1e-8)?;
    let mut centers = km.centers;
    let jittered = jitter_degenerate_rows(&mut centers, seed ^ 0x9e37_79b9);
    Ok(ExemplarAggregate {
        exemplars: ExemplarSet::new(centers)?,
        jittered,
    })
}

/// Positive/negative pair labels over the pooled local exemplars.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    n: usize,
    positive: Vec<bool>,
    slots: Vec<usize>,
}

impl AlignmentMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn slot(&self, i: usize) -> usize {
        self.slots[i]
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.n + j]
    }

    /// `+1` for positive pairs, `−1` otherwise, `0` on the diagonal.
    pub fn entry(&self, i: usize, j: usize) -> i8 {
        match (i == j, self.is_positive(i, j)) {
            (true, _) => 0,
            (false, true) => 1,
            (false, false) => -1,
        }
    }

    /// Exponent signs of the relation term restricted to `rows`: positives
    /// get `attract`, negatives `−attract`, diagonal zero.
    pub fn signs(&self, rows: &[usize], attract: f64) -> Tensor {
        let m = rows.len();
        let mut out = Tensor::zeros(m, m);
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in rows.iter().enumerate() {
                out.values_mut()[a * m + b] = attract * f64::from(self.entry(i, j));
            }
        }
        out
    }
}

/// Pair `(a, b)` is positive when both exemplars come from the same slot
/// (hence the same initialisation) and one is among the `align_k` cosine
/// nearest neighbours of the other.
///
/// `pooled` rows are grouped client by client with `slots[i]` the slot of
/// row `i` (see [`pool_exemplars`]).
pub fn build_alignment(pooled: &Tensor, slots: &[usize], align_k: usize) -> Result<AlignmentMatrix, ServerError> {
    let n = pooled.rows();
    if slots.len() != n {
        return Err(ServerError::InvalidConfig(format!("{} slot labels for {n} exemplars", slots.len())));
    }
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = cosine_sim(pooled.row(i), pooled.row(j))?;
        }
    }
    let mut directed = vec![false; n * n];
    for b in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&a| a != b).collect();
        others.sort_by(|&x, &y| sim[b * n + y].total_cmp(&sim[b * n + x]).then(x.cmp(&y)));
        for &a in others.iter().take(align_k) {
            if slots[a] == slots[b] {
                directed[a * n + b] = true;
            }
        }
    }
    let positive = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            i != j && (directed[i * n + j] || directed[j * n + i])
        })
        .collect();
    Ok(AlignmentMatrix {
        n,
        positive,
        slots: slots.to_vec(),
    })
}

/// The projection network `h`: `d → 4d → 4d → d`, ReLU between layers and
/// a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNet {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ProjectionNet {
    fn shapes(dim: usize) -> [[usize; 2]; 6] {
        let w = 4 * dim;
        [[dim, w], [1, w], [w, w], [1, w], [w, dim], [1, dim]]
    }

    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        for (idx, [r, c]) in Self::shapes(dim).into_iter().enumerate() {
            if idx % 2 == 1 {
                values.extend(std::iter::repeat_n(0.0, r * c));
            } else {
                let bound = 1.0 / (r as f64).sqrt();
                values.extend((0..r * c).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Self { dim, values }
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        let mut offset = 0;
        Self::shapes(self.dim)
            .into_iter()
            .map(|[r, c]| {
                let t = Tensor::matrix(r, c, self.values[offset..offset + r * c].to_vec()).expect("positive shape");
                offset += r * c;
                tape.param(t)
            })
            .collect()
    }

    pub fn forward_var(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, KernelError> {
        let mut h = x;
        for layer in 0..3 {
            let z = tape.matmul(h, vars[2 * layer])?;
            let z = tape.add(z, vars[2 * layer + 1])?;
            h = if layer < 2 { tape.relu(z) } else { z };
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, KernelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = Self::forward_var(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Settings of the FedCC server optimisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedccConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Assignment sharpness in the projection space.
    pub gamma4: f64,
    /// Scale of the pairwise relation term. Kept low by default: the term
    /// treats same-mode exemplars sitting in different slots as negatives,
    /// and at 5 or above it can split a mode across clusters.
    pub gamma5: f64,
    /// Neighbour count for positive pairs; defaults to the number of
    /// clients.
    pub align_k: Option<usize>,
    /// Flip the relation term's signs, so aligned pairs are pushed apart and
    /// every other pair pulled together.
    pub literal_signs: bool,
    /// Compute the balance term on the target `P` instead of `Q`. `P` is
    /// held constant, so this form contributes no gradient.
    pub balance_on_p: bool,
    /// Train `gamma4` and `gamma5` (in log space) with the network.
    pub learn_scales: bool,
    /// Keep the projection network across rounds instead of re-seeding it.
    pub warm_start: bool,
}

impl Default for FedccConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 256,
            learning_rate: 0.005,
            gamma4: 5.0,
            gamma5: 1.0,
            align_k: None,
            literal_signs: false,
            balance_on_p: false,
            learn_scales: false,
            warm_start: false,
        }
    }
}

impl FedccConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: &str| Err(ServerError::InvalidConfig(m.into()));
        if self.steps == 0 || self.batch_size < 2 {
            return bad("steps must be ≥ 1 and batch_size ≥ 2");
        }
        if !(self.learning_rate > 0.0 && self.gamma4 > 0.0 && self.gamma5 > 0.0) {
            return bad("learning_rate, gamma4 and gamma5 must be positive");
        }
        if self.align_k == Some(0) {
            return bad("align_k must be ≥ 1");
        }
        Ok(())
    }
}

/// Values of the three FedCC terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FedccTerms {
    pub cluster: f64,
    pub balance: f64,
    pub relation: f64,
    pub total: f64,
}

/// Tape nodes of the FedCC objective.
#[derive(Debug, Clone, Copy)]
pub struct FedccNodes {
    pub total: Var,
    pub cluster: Var,
    pub balance: Var,
    pub relation: Var,
    pub terms: FedccTerms,
}

/// Builds the FedCC objective on `exemplars` (a batch of pooled rows) with
/// `signs` from [`AlignmentMatrix`].
///
/// The target `P` is derived from the current assignment unless `p_fixed`
/// supplies one; either way it enters as a constant.
#[allow(clippy::too_many_arguments)]
pub fn fedcc_objective(
    tape: &mut Tape,
    proj: &[Var],
    centers: Var,
    exemplars: &Tensor,
    signs: &Tensor,
    gamma4: Scale,
    gamma5: Scale,
    balance_on_p: bool,
    p_fixed: Option<&Tensor>,
) -> Result<FedccNodes, ServerError> {
    let n = exemplars.rows() as f64;
    let x = tape.constant(exemplars.clone());
    let h = ProjectionNet::forward_var(tape, proj, x)?;
    let q = soft_assign_var(tape, h, centers, gamma4)?;
    let p = match p_fixed {
        Some(p) => p.clone(),
        None => target_dist(tape.value(q)),
    };

    let pc = tape.constant(p.clone());
    let log_q = tape.ln(q);
    let cross = tape.mul(pc, log_q)?;
    let cross = tape.sum(cross);
    let cluster = tape.scale(cross, -1.0 / n);

    let balance = if balance_on_p {
        let k = p.cols();
        let value: f64 = (0..k)
            .map(|j| -((0..p.rows()).map(|i| p.at(i, j)).sum::<f64>() / n).max(LOG_EPS).ln())
            .sum();
        tape.constant(Tensor::scalar(value))
    } else {
        let col = tape.sum_rows(q);
        let mean = tape.scale(col, 1.0 / n);
        let log_mean = tape.ln(mean);
        let s = tape.sum(log_mean);
        tape.scale(s, -1.0)
    };

    let sim = cosine_matrix(tape, h, h)?;
    let scaled = gamma5.apply(tape, sim)?;
    let sign = tape.constant(signs.clone());
    let exponent = tape.mul(scaled, sign)?;
    let e = tape.exp(exponent);
    let off_diag = tape.constant(signs.map(|v| if v == 0.0 { 0.0 } else { 1.0 }));
    let e = tape.mul(e, off_diag)?;
    let row = tape.sum_cols(e);
    let row = tape.add_scalar(row, 1.0);
    let r = tape.ln(row);
    let relation = tape.mean(r);

    let total = tape.add(cluster, balance)?;
    let total = tape.add(total, relation)?;
    let terms = FedccTerms {
        cluster: tape.scalar_value(cluster),
        balance: tape.scalar_value(balance),
        relation: tape.scalar_value(relation),
        total: tape.scalar_value(total),
    };
    Ok(FedccNodes {
        total,
        cluster,
        balance,
        relation,
        terms,
    })
}

/// Multiplier turning alignment entries into exponent signs.
pub fn relation_sign(cfg: &FedccConfig) -> f64 {
    // exponent is `sign · γ5 · s` with sign = attract·e; the default pulls
    // positives together (−γ5 s) and pushes negatives apart (+γ5 s)
    if cfg.literal_signs {
        1.0
    } else {
        -1.0
    }
}

/// FedCC loss over all pooled exemplars with fixed scales.
pub fn fedcc_loss(
    proj: &ProjectionNet,
    centers: &Tensor,
    pooled: &Tensor,
    alignment: &AlignmentMatrix,
    cfg: &FedccConfig,
) -> Result<FedccTerms, ServerError> {
    Ok(fedcc_loss_grad(proj, centers, pooled, alignment, cfg)?.0)
}

/// [`fedcc_loss`] together with its gradients w.r.t. the projection
/// parameters and the latent centers.
pub fn fedcc_loss_grad(
    proj: &ProjectionNet,
    centers: &Tensor,
    pooled: &Tensor,
    alignment: &AlignmentMatrix,
    cfg: &FedccConfig,
) -> Result<(FedccTerms, Vec<f64>, Tensor), ServerError> {
    let mut tape = Tape::new();
    let pv = proj.register(&mut tape);
    let v = tape.param(centers.clone());
    let rows: Vec<usize> = (0..pooled.rows()).collect();
    let signs = alignment.signs(&rows, relation_sign(cfg));
    let nodes = fedcc_objective(
        &mut tape,
        &pv,
        v,
        pooled,
        &signs,
        Scale::Fixed(cfg.gamma4),
        Scale::Fixed(cfg.gamma5),
        cfg.balance_on_p,
        None,
    )?;
    let g = tape.backward(nodes.total)?;
    let proj_grad = pv.iter().flat_map(|&p| g.get(p).into_values()).collect();
    Ok((nodes.terms, proj_grad, g.get(v)))
}

/// Result of [`fedcc_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct FedccOutcome {
    /// Soft assignment of every pooled exemplar to the `K` latent centers.
    pub q_global: Tensor,
    pub projection: ProjectionNet,
    pub centers: Tensor,
    pub final_terms: FedccTerms,
    /// Objective every 50 steps and at the last step.
    pub loss_trace: Vec<f64>,
    pub gamma4: f64,
    pub gamma5: f64,
}

/// Trains the projection net and latent centers on the pooled exemplars.
///
/// The centers start from k-means++/Lloyd on the normalised projections of
/// a freshly seeded net (or of `warm`, when given).
pub fn fedcc_train<U: ServerInput>(
    uploads: &[U],
    cfg: &FedccConfig,
    seed: u64,
    warm: Option<&ProjectionNet>,
) -> Result<FedccOutcome, ServerError> {
    cfg.validate()?;
    let (pooled, slots) = pool_exemplars(uploads)?;
    let clients = uploads.len();
    let k = pooled.rows() / clients;
    let d = pooled.cols();
    let n = pooled.rows();
    let alignment = build_alignment(&pooled, &slots, cfg.align_k.unwrap_or(clients))?;
    let attract = relation_sign(cfg);

    let mut proj = match warm {
        Some(p) if p.dim == d => p.clone(),
        _ => ProjectionNet::init(d, seed),
    };
    let projected = proj.forward(&pooled)?;
    let mut centers = kmeans(&normalized_rows(&projected)?, k, seed ^ 0x5bd1_e995, 100, 1e-8)?.centers;
    jitter_degenerate_rows(&mut centers, seed ^ 0x27d4_eb2f);

    let n_proj = proj.values.len();
    let mut flat = proj.values.clone();
    flat.extend_from_slice(centers.values());
    if cfg.learn_scales {
        flat.push(cfg.gamma4.ln());
        flat.push(cfg.gamma5.ln());
    }
    let mut adam = Adam::with_defaults(flat.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_trace = Vec::new();
    let mut final_terms = FedccTerms::default();

    let build = |tape: &mut Tape, flat: &[f64], rows: &[usize]| -> Result<(Var, FedccTerms, Vec<Var>, Var, Option<(Var, Var)>), ServerError> {
        let net = ProjectionNet {
            dim: d,
            values: flat[..n_proj].to_vec(),
        };
        let pv = net.register(tape);
        let v = tape.param(Tensor::matrix(k, d, flat[n_proj..n_proj + k * d].to_vec())?);
        let (g4, g5, logs) = if cfg.learn_scales {
            let l4 = tape.param(Tensor::scalar(flat[n_proj + k * d]));
            let l5 = tape.param(Tensor::scalar(flat[n_proj + k * d + 1]));
            (Scale::Learned(tape.exp(l4)), Scale::Learned(tape.exp(l5)), Some((l4, l5)))
        } else {
            (Scale::Fixed(cfg.gamma4), Scale::Fixed(cfg.gamma5), None)
        };
        let batch = Tensor::from_rows(&rows.iter().map(|&i| pooled.row(i)).collect::<Vec<_>>())?;
        let signs = alignment.signs(rows, attract);
        let nodes = fedcc_objective(tape, &pv, v, &batch, &signs, g4, g5, cfg.balance_on_p, None)?;
        Ok((nodes.total, nodes.terms, pv, v, logs))
    };

    for step in 0..cfg.steps {
        let rows: Vec<usize> = if n <= cfg.batch_size {
            (0..n).collect()
        } else {
            let mut r = index::sample(&mut rng, n, cfg.batch_size).into_vec();
            r.sort_unstable();
            r
        };
        let mut tape = Tape::new();
        let (total, terms, pv, v, logs) = build(&mut tape, &flat, &rows)?;
        for (term, value) in [
            ("cluster", terms.cluster),
            ("balance", terms.balance),
            ("relation", terms.relation),
        ] {
            if !value.is_finite() {
                return Err(ServerError::NonFinite { term, value, step });
            }
        }
        let g = tape.backward(total)?;
        let mut grad: Vec<f64> = pv.iter().flat_map(|&p| g.get(p).into_values()).collect();
        grad.extend(g.get(v).into_values());
        if let Some((l4, l5)) = logs {
            grad.push(g.get(l4).values()[0]);
            grad.push(g.get(l5).values()[0]);
        }
        adam.step(&mut flat, &grad);
        if step % 50 == 0 || step + 1 == cfg.steps {
            loss_trace.push(terms.total);
        }
        final_terms = terms;
    }

    proj.values = flat[..n_proj].to_vec();
    centers = Tensor::matrix(k, d, flat[n_proj..n_proj + k * d].to_vec())?;
    let (gamma4, gamma5) = if cfg.learn_scales {
        (flat[n_proj + k * d].exp(), flat[n_proj + k * d + 1].exp())
    } else {
        (cfg.gamma4, cfg.gamma5)
    };
    let mut tape = Tape::new();
    let x = tape.constant(pooled.clone());
    let pv: Vec<Var> = proj.register(&mut tape);
    let h = ProjectionNet::forward_var(&mut tape, &pv, x)?;
    let v = tape.constant(centers.clone());
    let q = soft_assign_var(&mut tape, h, v, Scale::Fixed(gamma4))?;
    Ok(FedccOutcome {
        q_global: tape.value(q).clone(),
        projection: proj,
        centers,
        final_terms,
        loss_trace,
        gamma4,
        gamma5,
    })
}

/// Result of [`merge_exemplars`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub exemplars: ExemplarSet,
    /// Centers with (near-)zero assignment mass, re-seeded from the least
    /// covered exemplar.
    pub reseeded: Vec<usize>,
    pub jittered: Vec<usize>,
}

/// `u_z = Σᵢ q_iz cᵢ / Σᵢ q_iz`: assignment-weighted means of the pooled
/// exemplars, in the original exemplar space.
pub fn merge_exemplars(q: &Tensor, pooled: &Tensor, seed: u64) -> Result<MergeOutcome, ServerError> {
    let (n, k) = q.dims();
    let d = pooled.cols();
    if pooled.rows() != n {
        return Err(ServerError::InvalidConfig(format!(
            "assignment has {n} rows for {} exemplars",
            pooled.rows()
        )));
    }
    let mass: Vec<f64> = (0..k).map(|z| (0..n).map(|i| q.at(i, z)).sum()).collect();
    let mut out = Tensor::zeros(k, d);
    let mut reseeded = Vec::new();
    let healthy: Vec<usize> = (0..k).filter(|&z| mass[z] >= LOG_EPS).collect();
    let mut used = Vec::new();
    for z in 0..k {
        let row = &mut out.values_mut()[z * d..(z + 1) * d];
        if mass[z] >= LOG_EPS {
            for i in 0..n {
                let w = q.at(i, z);
                for (u, c) in row.iter_mut().zip(pooled.row(i)) {
                    *u += w * c;
                }
            }
            row.iter_mut().for_each(|u| *u /= mass[z]);
        } else {
            let coverage = |i: usize| healthy.iter().map(|&h| q.at(i, h)).fold(0.0, f64::max);
            let pick = (0..n)
                .filter(|i| !used.contains(i))
                .min_by(|&a, &b| coverage(a).total_cmp(&coverage(b)).then(a.cmp(&b)))
                .unwrap_or(0);
            warn!("merge: center {z} received no assignment mass; re-seeding from exemplar {pick}");
            used.push(pick);
            row.copy_from_slice(pooled.row(pick));
            reseeded.push(z);
        }
    }
    let jittered = jitter_degenerate_rows(&mut out, seed);
    Ok(MergeOutcome {
        exemplars: ExemplarSet::new(out)?,
        reseeded,
        jittered,
    })
}

/// Exemplar aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Fedcc,
    FedavgEx,
    KmeansEx,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Fedcc, Aggregator::FedavgEx, Aggregator::KmeansEx];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Fedcc => "fedcc",
            Aggregator::FedavgEx => "fedavg_ex",
            Aggregator::KmeansEx => "kmeans_ex",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unknown aggregator name; the message lists the valid ones.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown aggregator '{0}' (expected one of: fedcc, fedavg_ex, kmeans_ex)")]
pub struct UnknownAggregator(pub String);

impl FromStr for Aggregator {
    type Err = UnknownAggregator;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| UnknownAggregator(s.to_owned()))
    }
}

/// Server-side diagnostics of one aggregation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationDiagnostics {
    pub jittered_slots: Vec<usize>,
    pub reseeded_centers: Vec<usize>,
    pub fedcc_terms: Option<FedccTerms>,
    pub fedcc_loss_trace: Vec<f64>,
}

/// Global exemplars from the uploads under `aggregator`.
pub struct Aggregated {
    pub exemplars: ExemplarSet,
    pub diagnostics: AggregationDiagnostics,
    pub projection: Option<ProjectionNet>,
}

pub fn aggregate_exemplars<U: ServerInput>(
    aggregator: Aggregator,
    uploads: &[U],
    cfg: &FedccConfig,
    seed: u64,
    warm: Option<&ProjectionNet>,
) -> Result<Aggregated, ServerError> {
    match aggregator {
        Aggregator::FedavgEx => {
            let a = avg_exemplars(uploads, seed)?;
            Ok(Aggregated {
                exemplars: a.exemplars,
                diagnostics: AggregationDiagnostics {
                    jittered_slots: a.jittered,
                    ..Default::default()
                },
                projection: None,
            })
        }
        Aggregator::KmeansEx => {
            let k = by_client(uploads)?[0].exemplars().k();
            let a = kmeans_exemplars(uploads, k, seed)?;
            Ok(Aggregated {
                exemplars: a.exemplars,
                diagnostics: AggregationDiagnostics {
                    jittered_slots: a.jittered,
                    ..Default::default()
                },
                projection: None,
            })
        }
        Aggregator::Fedcc => {
            let outcome = fedcc_train(uploads, cfg, seed, warm)?;
            let (pooled, _) = pool_exemplars(uploads)?;
            let merged = merge_exemplars(&outcome.q_global, &pooled, seed)?;
            Ok(Aggregated {
                exemplars: merged.exemplars,
                diagnostics: AggregationDiagnostics {
                    jittered_slots: merged.jittered,
                    reseeded_centers: merged.reseeded,
                    fedcc_terms: Some(outcome.final_terms),
                    fedcc_loss_trace: outcome.loss_trace,
                },
                projection: Some(outcome.projection),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::{LocalModel, TrainDiagnostics};
    use crate::numkernel::grad_check;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 1,
            num_layers: 1,
            hidden_dim: 1,
            embed_dim: 2,
            bidirectional: false,
            embed_bias: false,
        }
    }

    fn upload(client_id: usize, theta: Vec<f64>, exemplars: ExemplarSet, sample_count: usize) -> LocalModel {
        let mut encoder = EncoderParams::zeros(&enc_cfg()).unwrap();
        if !theta.is_empty() {
            encoder.values = theta;
        }
        LocalModel {
            client_id,
            encoder,
            exemplars,
            sample_count,
            diagnostics: TrainDiagnostics {
                epochs: 0,
                steps: 0,
                loss_curve: Vec::new(),
                final_loss: Default::default(),
            },
        }
    }

    fn n_theta() -> usize {
        EncoderParams::zeros(&enc_cfg()).unwrap().len()
    }

    fn rand_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_upload(rng: &mut ChaCha8Rng, id: usize, k: usize, d: usize) -> LocalModel {
        let theta = (0..n_theta()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rng.random_range(1..50);
        upload(id, theta, ExemplarSet::new(rand_rows(rng, k, d)).unwrap(), n)
    }

    fn any_ex() -> ExemplarSet {
        ExemplarSet::from_rows(&[[1.0, 0.0]]).unwrap()
    }

    #[test]
    fn fedavg_cases() {
        let n = n_theta();
        let a = upload(0, vec![0.25; n], any_ex(), 3);
        assert_eq!(fedavg_encoders(&[a.clone(), a.clone()]).unwrap(), a.encoder);
        let b = upload(1, vec![0.75; n], any_ex(), 3);
        let avg = fedavg_encoders(&[a, b]).unwrap();
        assert!(avg.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let zero = upload(0, vec![0.0; n], any_ex(), 1);
        let four = upload(1, vec![4.0; n], any_ex(), 3);
        assert!(fedavg_encoders(&[zero, four]).unwrap().values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn fedavg_matches_loop_and_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ups: Vec<LocalModel> = (0..3).map(|i| rand_upload(&mut rng, i, 2, 2)).collect();
        let got = fedavg_encoders(&ups).unwrap();
        let total: usize = ups.iter().map(|u| u.sample_count).sum();
        for p in 0..n_theta() {
            let mut want = 0.0;
            for u in &ups {
                want += u.encoder.values[p] * u.sample_count as f64 / total as f64;
            }
            assert!((got.values[p] - want).abs() < 1e-12);
        }
        let reversed: Vec<LocalModel> = ups.iter().rev().cloned().collect();
        assert_eq!(fedavg_encoders(&reversed).unwrap(), got);
    }

    #[test]
    fn fedavg_rejects_mismatch() {
        let a = upload(0, Vec::new(), any_ex(), 1);
        let mut b = upload(1, Vec::new(), any_ex(), 1);
        b.encoder = EncoderParams::zeros(&EncoderConfig {
            hidden_dim: 2,
            ..enc_cfg()
        })
        .unwrap();
        assert!(matches!(fedavg_encoders(&[a, b]), Err(ServerError::Encoder(_))));
        assert!(matches!(fedavg_encoders::<LocalModel>(&[]), Err(ServerError::NoModels)));
    }

    #[test]
    fn avg_exemplars_cases() {
        let ex = ExemplarSet::from_rows(&[[0.3, -0.2], [1.0, 2.0]]).unwrap();
        let one = avg_exemplars(&[upload(0, Vec::new(), ex.clone(), 1)], 0).unwrap();
        assert_eq!(one.exemplars, ex);
        assert!(one.jittered.is_empty());

        let v = ExemplarSet::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let minus_v = ExemplarSet::from_rows(&[[-0.6, -0.8], [1.0, 0.0]]).unwrap();
        let out = avg_exemplars(&[upload(0, Vec::new(), v, 1), upload(1, Vec::new(), minus_v, 1)], 5).unwrap();
        assert_eq!(out.jittered, vec![0]);
        let norm: f64 = out.exemplars.exemplar(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0 && norm < 1e-4);
        assert_eq!(out.exemplars.exemplar(1), &[1.0, 0.0]);
    }

    #[test]
    fn avg_exemplars_matches_slot_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ups: Vec<LocalModel> = (0..3).map(|i| rand_upload(&mut rng, i, 2, 3)).collect();
        let got = avg_exemplars(&ups, 0).unwrap().exemplars;
        for slot in 0..2 {
            for c in 0..3 {
                let want = ups.iter().map(|u| u.exemplars.exemplar(slot)[c]).sum::<f64>() / 3.0;
                assert!((got.exemplar(slot)[c] - want).abs() < 1e-12);
            }
        }
    }

    fn planted(seed: u64, k: usize, per: usize, d: usize, spread: f64) -> (Tensor, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut means = Vec::new();
        for j in 0..k {
            let mut center = vec![0.0; d];
            center[j % d] = if j < d { 1.0 } else { -1.0 };
            let members: Vec<Vec<f64>> = (0..per)
                .map(|_| center.iter().map(|c| c + rng.random_range(-spread..spread)).collect())
                .collect();
            means.push((0..d).map(|c| members.iter().map(|m| m[c]).sum::<f64>() / per as f64).collect());
            rows.extend(members);
        }
        (Tensor::from_rows(&rows).unwrap(), means)
    }

    fn match_error(centers: &Tensor, means: &[Vec<f64>]) -> f64 {
        means
            .iter()
            .map(|m| {
                centers
                    .row_iter()
                    .map(|c| sq_dist(c, m).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn kmeans_recovers_planted_clusters() {
        for seed in 0..5 {
            let (pts, means) = planted(seed, 4, 6, 4, 1e-3);
            let km = kmeans(&pts, 4, seed, 100, 1e-8).unwrap();
            assert!(match_error(&km.centers, &means) < 1e-6);
        }
    }

    #[test]
    fn kmeans_each_point_own_center_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = rand_rows(&mut rng, 6, 3);
        let km = kmeans(&pts, 6, 1, 100, 1e-8).unwrap();
        let mut a = km.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, (0..6).collect::<Vec<_>>());
        assert_eq!(*km.sse_history.last().unwrap(), 0.0);
        assert_eq!(kmeans(&pts, 3, 9, 100, 1e-8).unwrap(), kmeans(&pts, 3, 9, 100, 1e-8).unwrap());
        assert!(kmeans(&pts, 7, 0, 100, 1e-8).is_err());
    }

    #[test]
    fn kmeans_survives_duplicate_points() {
        let pts = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let km = kmeans(&pts, 3, 4, 100, 1e-8).unwrap();
        assert!(km.centers.is_finite());
        assert!(km.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn kmeans_exemplars_uses_cosine_geometry() {
        // same directions at different scales collapse into one cluster
        let a = ExemplarSet::from_rows(&[[1.0, 0.0], [0.0, 5.0]]).unwrap();
        let b = ExemplarSet::from_rows(&[[3.0, 0.0], [0.0, 0.1]]).unwrap();
        let out = kmeans_exemplars(&[upload(0, Vec::new(), a, 1), upload(1, Vec::new(), b, 1)], 2, 0).unwrap();
        let mut rows: Vec<Vec<f64>> = out.exemplars.as_tensor().row_iter().map(<[f64]>::to_vec).collect();
        rows.sort_by(|x, y| y[0].total_cmp(&x[0]));
        assert_eq!(rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    fn pooled_sets(sets: &[ExemplarSet]) -> (Tensor, Vec<usize>) {
        let ups: Vec<LocalModel> = sets
            .iter()
            .enumerate()
            .map(|(i, s)| upload(i, Vec::new(), s.clone(), 1))
            .collect();
        pool_exemplars(&ups).unwrap()
    }

    #[test]
    fn alignment_duplicated_clients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = ExemplarSet::new(rand_rows(&mut rng, 3, 4)).unwrap();
        let (pooled, slots) = pooled_sets(&[ex.clone(), ex]);
        let e = build_alignment(&pooled, &slots, 2).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j && slots[i] == slots[j] {
                    assert!(e.is_positive(i, j), "{i} {j}");
                }
                if slots[i] != slots[j] {
                    assert_eq!(e.entry(i, j), -1);
                }
            }
            assert_eq!(e.entry(i, i), 0);
        }
    }

    #[test]
    fn alignment_requires_neighbourhood() {
        // slot-0 exemplars are orthogonal; client 1's slot-1 vector is the
        // nearest neighbour of client 0's slot 0
        let a = ExemplarSet::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let b = ExemplarSet::from_rows(&[[0.0, 1.0, 0.0], [0.9, 0.1, 0.0]]).unwrap();
        let (pooled, slots) = pooled_sets(&[a, b]);
        let e = build_alignment(&pooled, &slots, 1).unwrap();
        assert_eq!(e.entry(0, 2), -1);
        // brute force: directed rule then symmetrise
        let n = pooled.rows();
        for i in 0..n {
            for j in 0..n {
                let nn = |b: usize| {
                    (0..n)
                        .filter(|&x| x != b)
                        .max_by(|&x, &y| {
                            cosine_sim(pooled.row(b), pooled.row(x))
                                .unwrap()
                                .total_cmp(&cosine_sim(pooled.row(b), pooled.row(y)).unwrap())
                                .then(y.cmp(&x))
                        })
                        .unwrap()
                };
                let dir = |a: usize, b: usize| slots[a] == slots[b] && nn(b) == a;
                assert_eq!(e.is_positive(i, j), i != j && (dir(i, j) || dir(j, i)));
            }
        }
    }

    proptest! {
        #[test]
        fn alignment_is_symmetric(seed in 0u64..100, clients in 1usize..4, k in 1usize..4, align_k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets: Vec<ExemplarSet> = (0..clients).map(|_| ExemplarSet::new(rand_rows(&mut rng, k, 3)).unwrap()).collect();
            let (pooled, slots) = pooled_sets(&sets);
            let e = build_alignment(&pooled, &slots, align_k).unwrap();
            for i in 0..e.len() {
                for j in 0..e.len() {
                    prop_assert_eq!(e.entry(i, j), e.entry(j, i));
                    if e.is_positive(i, j) {
                        prop_assert_eq!(slots[i], slots[j]);
                    }
                }
            }
        }

        #[test]
        fn kmeans_sse_never_increases(seed in 0u64..100, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = normalized_rows(&rand_rows(&mut rng, 12, 3)).unwrap();
            let km = kmeans(&pts, k, seed, 100, 1e-8).unwrap();
            prop_assert!(km.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", km.sse_history);
        }

        #[test]
        fn merge_stays_in_the_convex_hull(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pooled = rand_rows(&mut rng, 6, 3);
            let q = rand_assignment(&mut rng, 6, 2);
            let u = merge_exemplars(&q, &pooled, 0).unwrap().exemplars;
            for z in 0..2 {
                for c in 0..3 {
                    let col: Vec<f64> = (0..6).map(|i| pooled.at(i, c)).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(u.exemplar(z)[c] >= lo - 1e-12 && u.exemplar(z)[c] <= hi + 1e-12);
                }
            }
        }
    }

    fn rand_assignment(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn merge_cases() {
        let pooled = Tensor::from_rows(&[[1.0, 0.0], [3.0, 2.0], [0.0, 4.0], [2.0, 2.0]]).unwrap();
        let one_hot = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let u = merge_exemplars(&one_hot, &pooled, 0).unwrap().exemplars;
        assert!((u.exemplar(0)[0] - 2.0).abs() < 1e-12 && (u.exemplar(0)[1] - 1.0).abs() < 1e-12);
        assert!((u.exemplar(1)[0] - 1.0).abs() < 1e-12 && (u.exemplar(1)[1] - 3.0).abs() < 1e-12);
        let uniform = Tensor::filled(4, 2, 0.5);
        let u = merge_exemplars(&uniform, &pooled, 0).unwrap().exemplars;
        for z in 0..2 {
            assert!((u.exemplar(z)[0] - 1.5).abs() < 1e-12 && (u.exemplar(z)[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pooled = rand_rows(&mut rng, 9, 4);
        let q = rand_assignment(&mut rng, 9, 3);
        let u = merge_exemplars(&q, &pooled, 0).unwrap().exemplars;
        for z in 0..3 {
            let mass: f64 = (0..9).map(|i| q.at(i, z)).sum();
            for c in 0..4 {
                let mut num = 0.0;
                for i in 0..9 {
                    num += q.at(i, z) * pooled.at(i, c);
                }
                assert!((u.exemplar(z)[c] - num / mass).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_reseeds_empty_center() {
        let pooled = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let q = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.6, 0.0]]).unwrap();
        let out = merge_exemplars(&q, &pooled, 0).unwrap();
        assert_eq!(out.reseeded, vec![1]);
        assert_eq!(out.exemplars.exemplar(1), &[1.0, 1.0]);
    }

    fn fedcc_fixture(seed: u64) -> (ProjectionNet, Tensor, Tensor, AlignmentMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<ExemplarSet> = (0..2).map(|_| ExemplarSet::new(rand_rows(&mut rng, 3, 4)).unwrap()).collect();
        let (pooled, slots) = pooled_sets(&sets);
        let e = build_alignment(&pooled, &slots, 2).unwrap();
        let mut proj = ProjectionNet::init(4, seed);
        // non-zero biases so their gradients are exercised away from zero
        for v in proj.values.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        (proj, rand_rows(&mut rng, 3, 4), pooled, e)
    }

    #[test]
    fn fedcc_balance_and_cluster_on_uniform_assignment() {
        let (proj, _, pooled, e) = fedcc_fixture(1);
        let same = Tensor::from_rows(&[[0.5, -0.5, 0.5, 0.5]; 3]).unwrap();
        let terms = fedcc_loss(&proj, &same, &pooled, &e, &FedccConfig::default()).unwrap();
        let k = 3.0f64;
        assert!((terms.balance - k * k.ln()).abs() < 1e-12);
        assert!((terms.cluster - k.ln()).abs() < 1e-12);
    }

    /// Each FedCC term, differentiated independently with `P` frozen at the
    /// base point.
    #[test]
    fn fedcc_terms_pass_finite_differences() {
        for seed in 0..3 {
            let (proj, centers, pooled, e) = fedcc_fixture(seed);
            let cfg = FedccConfig::default();
            let n_proj = proj.values.len();
            let p0 = {
                let h = proj.forward(&pooled).unwrap();
                let mut tape = Tape::new();
                let hv = tape.constant(h);
                let v = tape.constant(centers.clone());
                let q = soft_assign_var(&mut tape, hv, v, Scale::Fixed(cfg.gamma4)).unwrap();
                target_dist(tape.value(q))
            };
            let signs = e.signs(&(0..pooled.rows()).collect::<Vec<_>>(), relation_sign(&cfg));
            for term in 0..3 {
                let f = |x: &[f64]| {
                    let net = ProjectionNet {
                        dim: 4,
                        values: x[..n_proj].to_vec(),
                    };
                    let mut tape = Tape::new();
                    let pv = net.register(&mut tape);
                    let v = tape.param(Tensor::matrix(3, 4, x[n_proj..].to_vec()).unwrap());
                    let nodes = fedcc_objective(
                        &mut tape,
                        &pv,
                        v,
                        &pooled,
                        &signs,
                        Scale::Fixed(cfg.gamma4),
                        Scale::Fixed(cfg.gamma5),
                        false,
                        Some(&p0),
                    )
                    .unwrap();
                    let out = [nodes.cluster, nodes.balance, nodes.relation][term];
                    let g = tape.backward(out).unwrap();
                    let mut grad: Vec<f64> = pv.iter().flat_map(|&p| g.get(p).into_values()).collect();
                    grad.extend(g.get(v).into_values());
                    (tape.scalar_value(out), grad)
                };
                let mut x = proj.values.clone();
                x.extend_from_slice(centers.values());
                let err = grad_check(f, &x, 1e-5);
                assert!(err < 1e-4, "seed {seed} term {term}: {err}");
            }
        }
    }

    #[test]
    fn literal_signs_flip_the_relation_term() {
        let (proj, centers, pooled, e) = fedcc_fixture(2);
        let default = fedcc_loss(&proj, &centers, &pooled, &e, &FedccConfig::default()).unwrap();
        let literal = fedcc_loss(
            &proj,
            &centers,
            &pooled,
            &e,
            &FedccConfig {
                literal_signs: true,
                ..FedccConfig::default()
            },
        )
        .unwrap();
        assert_eq!(default.cluster, literal.cluster);
        assert_ne!(default.relation, literal.relation);
    }

    /// Best one-to-one matching (brute force over permutations) of `u` to
    /// `truth`; returns the smallest matched cosine.
    fn matched_min_cos(u: &ExemplarSet, truth: &[Vec<f64>]) -> f64 {
        fn permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
            if k == items.len() {
                out.push(items.clone());
                return;
            }
            for i in k..items.len() {
                items.swap(k, i);
                permute(items, k + 1, out);
                items.swap(k, i);
            }
        }
        let mut perms = Vec::new();
        permute(&mut (0..truth.len()).collect(), 0, &mut perms);
        perms
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(z, &t)| cosine_sim(u.exemplar(z), &truth[t]).unwrap())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn fedcc_merge(ups: &[LocalModel], seed: u64) -> ExemplarSet {
        aggregate_exemplars(Aggregator::Fedcc, ups, &FedccConfig::default(), seed, None)
            .unwrap()
            .exemplars
    }

    #[test]
    fn fedcc_single_client_reproduces_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 8)).collect();
        let ex = ExemplarSet::from_rows(&truth).unwrap();
        let single = fedcc_merge(&[upload(0, Vec::new(), ex.clone(), 1)], 3);
        assert!(matched_min_cos(&single, &truth) >= 0.99);
        let dup: Vec<LocalModel> = (0..3).map(|i| upload(i, Vec::new(), ex.clone(), 1)).collect();
        assert!(matched_min_cos(&fedcc_merge(&dup, 3), &truth) >= 0.99);
    }

    #[test]
    fn fedcc_groups_permuted_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 6)).collect();
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut ups = Vec::new();
        let mut modes = Vec::new();
        for (client, order) in [[0usize, 1, 2], [2, 0, 1]].into_iter().enumerate() {
            let rows: Vec<Vec<f64>> = order
                .iter()
                .map(|&m| truth[m].iter().map(|v| v + noise.sample(&mut rng)).collect())
                .collect();
            modes.extend(order);
            ups.push(upload(client, Vec::new(), ExemplarSet::from_rows(&rows).unwrap(), 1));
        }
        let out = fedcc_train(&ups, &FedccConfig::default(), 0, None).unwrap();
        let labels: Vec<usize> = out
            .q_global
            .row_iter()
            .map(|r| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
            .collect();
        // purity: majority true mode per predicted cluster
        let mut pure = 0;
        for z in 0..3 {
            let members: Vec<usize> = (0..6).filter(|&i| labels[i] == z).map(|i| modes[i]).collect();
            pure += (0..3).map(|m| members.iter().filter(|&&x| x == m).count()).max().unwrap_or(0);
        }
        assert!(pure as f64 / 6.0 >= 0.9, "labels {labels:?} modes {modes:?}");
    }

    #[test]
    fn fedcc_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ups: Vec<LocalModel> = (0..2).map(|i| rand_upload(&mut rng, i, 3, 4)).collect();
        let a = fedcc_train(&ups, &FedccConfig::default(), 4, None).unwrap();
        let b = fedcc_train(&ups, &FedccConfig::default(), 4, None).unwrap();
        assert_eq!(a, b);
        assert!(a.q_global.row_iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn aggregator_names_round_trip() {
        for a in Aggregator::ALL {
            assert_eq!(a.name().parse::<Aggregator>().unwrap(), a);
        }
        let err = "fedprox".parse::<Aggregator>().unwrap_err().to_string();
        assert!(err.contains("fedcc") && err.contains("fedavg_ex") && err.contains("kmeans_ex"));
    }
}
