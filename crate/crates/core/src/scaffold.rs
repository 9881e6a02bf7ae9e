//! The task scaffold: a learned state encoder plus a Gaussian mixture in
//! embedding space, fitted by trajectory-consensus EM with alternating
//! pseudo-label encoder training.
//!
//! Responsibilities are computed per trajectory (the factorized product of
//! per-state likelihoods), so every state in a trajectory shares one
//! responsibility vector. All densities are evaluated in log space.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Adam, Tape, Tensor};
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("scaffold: {0}")]
    Invalid(String),
    #[error("observation dimension {got} does not match encoder input {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("non-finite embedding rejected")]
    NonFinite,
    #[error("empty reservoir: cannot fit a scaffold")]
    EmptyReservoir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponsibilityMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaffoldConfig {
    /// Number of mixture components K.
    pub k: usize,
    /// Embedding dimension.
    pub embed_dim: usize,
    /// Width of the two encoder hidden layers.
    pub hidden: usize,
    /// Alternation rounds: EM step + pseudo-label encoder training.
    pub rounds: usize,
    /// Supervised epochs per encoder-training round.
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub batch_size: usize,
    /// EM iterations of the final mixture refit under the trained encoder.
    pub final_em_iters: usize,
    pub variance_floor: f64,
    /// Soft responsibilities during intermediate rounds, or hard argmax.
    pub responsibilities: ResponsibilityMode,
}

impl Default for ScaffoldConfig {
    fn default() -> Self {
        ScaffoldConfig {
            k: 8,
            embed_dim: 16,
            hidden: 64,
            rounds: 3,
            encoder_epochs: 5,
            encoder_lr: 1e-3,
            batch_size: 256,
            final_em_iters: 30,
            variance_floor: 1e-4,
            responsibilities: ResponsibilityMode::Soft,
        }
    }
}

impl ScaffoldConfig {
    pub fn validate(&self) -> Result<(), ScaffoldError> {
        for (name, v) in [
            ("scaffold.k", self.k),
            ("scaffold.embed_dim", self.embed_dim),
            ("scaffold.hidden", self.hidden),
            ("scaffold.encoder_epochs", self.encoder_epochs),
            ("scaffold.batch_size", self.batch_size),
            ("scaffold.final_em_iters", self.final_em_iters),
        ] {
            if v == 0 {
                return Err(ScaffoldError::Invalid(format!("{name}: must be >= 1")));
            }
        }
        if !(self.variance_floor > 0.0) {
            return Err(ScaffoldError::Invalid(
                "scaffold.variance_floor: must be positive".into(),
            ));
        }
        if !(self.encoder_lr > 0.0) {
            return Err(ScaffoldError::Invalid(
                "scaffold.encoder_lr: must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Feed-forward state encoder with a K-way linear classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub in_dim: usize,
    pub embed_dim: usize,
    pub k: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

impl Encoder {
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, embed_dim: usize, k: usize, rng: &mut R) -> Self {
        Encoder {
            in_dim,
            embed_dim,
            k,
            w1: nn::glorot(in_dim, hidden, rng),
            b1: Tensor::zeros(1, hidden),
            w2: nn::glorot(hidden, hidden, rng),
            b2: Tensor::zeros(1, hidden),
            w3: nn::glorot(hidden, embed_dim, rng),
            b3: Tensor::zeros(1, embed_dim),
            head_w: nn::glorot(embed_dim, k, rng),
            head_b: Tensor::zeros(1, k),
        }
    }

    /// All-zero weights; embeds everything to the origin.
    pub fn zeroed(in_dim: usize, hidden: usize, embed_dim: usize, k: usize) -> Self {
        Encoder {
            in_dim,
            embed_dim,
            k,
            w1: Tensor::zeros(in_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, hidden),
            b2: Tensor::zeros(1, hidden),
            w3: Tensor::zeros(hidden, embed_dim),
            b3: Tensor::zeros(1, embed_dim),
            head_w: Tensor::zeros(embed_dim, k),
            head_b: Tensor::zeros(1, k),
        }
    }


    fn param_refs(&self) -> Vec<&Tensor> {
        vec![
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.head_w, &self.head_b,
        ]
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.param_refs().iter().map(|t| t.len()).sum()
    }

    /// Embeds a batch of observations, one per row.
    pub fn encode_batch(&self, obs: &Tensor) -> Result<Tensor, ScaffoldError> {
        if obs.cols != self.in_dim {
            return Err(ScaffoldError::DimMismatch {
                got: obs.cols,
                want: self.in_dim,
            });
        }
        let h1 = nn::tensor::tanh(&nn::tensor::add_row(&nn::tensor::matmul(obs, &self.w1), &self.b1));
        let h2 = nn::tensor::tanh(&nn::tensor::add_row(&nn::tensor::matmul(&h1, &self.w2), &self.b2));
        let emb = nn::tensor::add_row(&nn::tensor::matmul(&h2, &self.w3), &self.b3);
        if !emb.is_finite() {
            return Err(ScaffoldError::NonFinite);
        }
        Ok(emb)
    }

    pub fn encode(&self, obs: &[f64]) -> Result<Vec<f64>, ScaffoldError> {
        let t = Tensor::from_vec(1, obs.len(), obs.to_vec());
        Ok(self.encode_batch(&t)?.data)
    }

    /// Classifier logits for a batch of observations.
    pub fn logits_batch(&self, obs: &Tensor) -> Result<Tensor, ScaffoldError> {
        let emb = self.encode_batch(obs)?;
        Ok(nn::tensor::add_row(
            &nn::tensor::matmul(&emb, &self.head_w),
            &self.head_b,
        ))
    }

    /// Classifier accuracy against labels.
    pub fn pseudo_label_accuracy(&self, obs: &Tensor, labels: &[usize]) -> f64 {
        let logits = self.logits_batch(obs).expect("dims already checked");
        let mut hits = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        hits as f64 / labels.len().max(1) as f64
    }

    /// One supervised cross-entropy epoch over (obs, pseudo-label) pairs.
    /// Returns the mean loss over minibatches.
    fn train_epoch<R: Rng>(
        &mut self,
        obs: &Tensor,
        labels: &[usize],
        batch_size: usize,
        opt: &mut Adam,
        rng: &mut R,
    ) -> f64 {
        let n = obs.rows;
        let mut index: Vec<usize> = (0..n).collect();
        index.shuffle(rng);
        let mut total_loss = 0.0;
        let mut batches = 0usize;
        for chunk in index.chunks(batch_size) {
            let mut xb = Tensor::zeros(chunk.len(), obs.cols);
            let mut yb = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                xb.data[r * obs.cols..(r + 1) * obs.cols].copy_from_slice(obs.row(i));
                yb.push(labels[i]);
            }
            total_loss += self.train_batch(&xb, &yb, opt);
            batches += 1;
        }
        total_loss / batches.max(1) as f64
    }

    fn train_batch(&mut self, xb: &Tensor, yb: &[usize], opt: &mut Adam) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(xb.clone());
        let w1 = tape.param(self.w1.clone());
        let b1 = tape.param(self.b1.clone());
        let w2 = tape.param(self.w2.clone());
        let b2 = tape.param(self.b2.clone());
        let w3 = tape.param(self.w3.clone());
        let b3 = tape.param(self.b3.clone());
        let hw = tape.param(self.head_w.clone());
        let hb = tape.param(self.head_b.clone());

        let z1 = tape.matmul(x, w1);
        let z1b = tape.add_row(z1, b1);
        let h1 = tape.tanh(z1b);
        let z2 = tape.matmul(h1, w2);
        let z2b = tape.add_row(z2, b2);
        let h2 = tape.tanh(z2b);
        let z3 = tape.matmul(h2, w3);
        let emb = tape.add_row(z3, b3);
        let zl = tape.matmul(emb, hw);
        let logits = tape.add_row(zl, hb);
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_rows(logp, yb.to_vec());
        let mean_logp = tape.mean_all(picked);
        let loss = tape.affine(mean_logp, -1.0, 0.0);
        let loss_val = tape.value(loss).data[0];

        let grads = tape.backward(loss);
        let nodes = [w1, b1, w2, b2, w3, b3, hw, hb];
        let shapes = self.param_refs().into_iter().cloned().collect::<Vec<_>>();
        let grad_tensors: Vec<Tensor> = nodes
            .iter()
            .zip(&shapes)
            .map(|(id, like)| grads.of(*id, like))
            .collect();
        let flat_grads = nn::flatten(&grad_tensors.iter().collect::<Vec<_>>());
        let mut flat = nn::flatten(&self.param_refs());
        opt.step(&mut flat, &flat_grads);
        let mut refs = self.param_refs_mut();
        nn::unflatten(&flat, &mut refs);
        loss_val
    }
}

// ---------------------------------------------------------------------------
// Mixture model
// ---------------------------------------------------------------------------

/// Diagonal-covariance Gaussian mixture over the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub k: usize,
    pub dim: usize,
    /// Component means, one row per component.
    pub means: Tensor,
    /// Per-dimension variances (floored), one row per component.
    pub vars: Tensor,
    pub weights: Vec<f64>,
    /// Cached log normalization constant per component:
    /// -0.5 * sum_d log(2 pi var_kd).
    log_norm: Vec<f64>,
    log_weights: Vec<f64>,
}

impl MixtureModel {
    pub fn new(means: Tensor, vars: Tensor, weights: Vec<f64>) -> Self {
        let k = means.rows;
        let dim = means.cols;
        assert_eq!(vars.rows, k);
        assert_eq!(vars.cols, dim);
        assert_eq!(weights.len(), k);
        let mut m = MixtureModel {
            k,
            dim,
            means,
            vars,
            weights,
            log_norm: vec![0.0; k],
            log_weights: vec![0.0; k],
        };
        m.refresh_cache();
        m
    }

    pub fn refresh_cache(&mut self) {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for k in 0..self.k {
            let mut s = 0.0;
            for d in 0..self.dim {
                s += ln2pi + self.vars.get(k, d).ln();
            }
            self.log_norm[k] = -0.5 * s;
            self.log_weights[k] = self.weights[k].ln();
        }
    }

    /// log N(emb; mu_z, Sigma_z).
    pub fn log_component_density(&self, emb: &[f64], z: usize) -> f64 {
        assert!(z < self.k, "component index out of range");
        assert_eq!(emb.len(), self.dim, "embedding dimension mismatch");
        let mut quad = 0.0;
        for d in 0..self.dim {
            let diff = emb[d] - self.means.get(z, d);
            quad += diff * diff / self.vars.get(z, d);
        }
        self.log_norm[z] - 0.5 * quad
    }

    /// log sum_k pi_k N(emb; mu_k, Sigma_k), via log-sum-exp.
    pub fn log_marginal_density(&self, emb: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.k)
            .map(|k| self.log_weights[k] + self.log_component_density(emb, k))
            .collect();
        logsumexp(&terms)
    }

    /// log q(z | emb) = log pi_z + log q(emb|z) - log q(emb).
    pub fn log_posterior(&self, emb: &[f64], z: usize) -> f64 {
        self.log_weights[z] + self.log_component_density(emb, z) - self.log_marginal_density(emb)
    }

    pub fn log_weight(&self, z: usize) -> f64 {
        self.log_weights[z]
    }

    /// Categorical sample from the component prior.
    pub fn sample_latent<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.k - 1
    }
}

/// Per-trajectory responsibility vectors; each sums to 1 and is shared by
/// every state of its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub per_trajectory: Vec<Vec<f64>>,
    /// Trajectory-level marginal log-likelihood log q(tau_i), the
    /// normalization constant of each responsibility vector.
    pub marginals: Vec<f64>,
}

impl Responsibilities {
    pub fn total_log_likelihood(&self) -> f64 {
        self.marginals.iter().sum()
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax_lowest_tie(&self.per_trajectory[i])
    }
}

/// Lowest index wins ties, which keeps pseudo-labels deterministic.
fn argmax_lowest_tie(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// E-step: q_ik proportional to pi_k * prod_t q(s_t | z=k), computed in log
/// space and normalized per trajectory.
pub fn trajectory_responsibilities(
    mixture: &MixtureModel,
    embedded: &[Tensor],
) -> Result<Responsibilities, ScaffoldError> {
    let mut per_trajectory = Vec::with_capacity(embedded.len());
    let mut marginals = Vec::with_capacity(embedded.len());
    for traj in embedded {
        if traj.rows == 0 {
            return Err(ScaffoldError::Invalid("empty trajectory".into()));
        }
        if !traj.is_finite() {
            return Err(ScaffoldError::NonFinite);
        }
        let mut scores = vec![0.0; mixture.k];
        for (k, score) in scores.iter_mut().enumerate() {
            let mut s = mixture.log_weight(k);
            for t in 0..traj.rows {
                s += mixture.log_component_density(traj.row(t), k);
            }
            *score = s;
        }
        let lse = logsumexp(&scores);
        per_trajectory.push(scores.iter().map(|s| (s - lse).exp()).collect());
        marginals.push(lse);
    }
    Ok(Responsibilities {
        per_trajectory,
        marginals,
    })
}

/// Per-trajectory mean embedding.
fn trajectory_mean(traj: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; traj.cols];
    for t in 0..traj.rows {
        for (d, v) in traj.row(t).iter().enumerate() {
            m[d] += v;
        }
    }
    for v in m.iter_mut() {
        *v /= traj.rows as f64;
    }
    m
}

/// Threshold below which a component counts as empty.
const EMPTY_COMPONENT_RESP: f64 = 1e-8;

/// M-step: the closed-form weighted MLE of means, diagonal covariances and
/// weights, with the variance floor applied afterward. A component whose
/// total responsibility falls below 1e-8 is re-seeded at the mean embedding
/// of a lowest-marginal-likelihood trajectory with grand per-dimension
/// variances.
pub fn mixture_mle(
    embedded: &[Tensor],
    resp: &Responsibilities,
    variance_floor: f64,
) -> Result<MixtureModel, ScaffoldError> {
    let n = embedded.len();
    if n == 0 {
        return Err(ScaffoldError::EmptyReservoir);
    }
    let k = resp.per_trajectory[0].len();
    let dim = embedded[0].cols;

    let mut totals = vec![0.0; k];
    for q in &resp.per_trajectory {
        for c in 0..k {
            totals[c] += q[c];
        }
    }

    let mut means = Tensor::zeros(k, dim);
    let mut vars = Tensor::zeros(k, dim);

    // mu_k = sum_i (q_ik / T_i) sum_t s_t / sum_i q_ik
    for (i, traj) in embedded.iter().enumerate() {
        let q = &resp.per_trajectory[i];
        let inv_t = 1.0 / traj.rows as f64;
        for t in 0..traj.rows {
            let row = traj.row(t);
            for c in 0..k {
                let w = q[c] * inv_t;
                if w == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    means.data[c * dim + d] += w * row[d];
                }
            }
        }
    }
    for c in 0..k {
        if totals[c] >= EMPTY_COMPONENT_RESP {
            for d in 0..dim {
                means.data[c * dim + d] /= totals[c];
            }
        }
    }

    // Sigma_k = sum_i (q_ik / T_i) sum_t (s_t - mu_k)^2 / sum_i q_ik, diagonal.
    for (i, traj) in embedded.iter().enumerate() {
        let q = &resp.per_trajectory[i];
        let inv_t = 1.0 / traj.rows as f64;
        for t in 0..traj.rows {
            let row = traj.row(t);
            for c in 0..k {
                let w = q[c] * inv_t;
                if w == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    let diff = row[d] - means.get(c, d);
                    vars.data[c * dim + d] += w * diff * diff;
                }
            }
        }
    }
    for c in 0..k {
        if totals[c] >= EMPTY_COMPONENT_RESP {
            for d in 0..dim {
                vars.data[c * dim + d] /= totals[c];
            }
        }
    }

    // Re-seed empty components at poorly-explained trajectories.
    let empty: Vec<usize> = (0..k).filter(|&c| totals[c] < EMPTY_COMPONENT_RESP).collect();
    if !empty.is_empty() {
        let (_, grand_var) = grand_moments(embedded, dim);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            resp.marginals[a]
                .partial_cmp(&resp.marginals[b])
                .expect("finite marginals")
        });
        for (j, &c) in empty.iter().enumerate() {
            let src = trajectory_mean(&embedded[order[j % n]]);
            for d in 0..dim {
                means.set(c, d, src[d]);
                vars.set(c, d, grand_var[d].max(variance_floor));
            }
            totals[c] = 1.0;
        }
    }

    for v in vars.data.iter_mut() {
        if *v < variance_floor {
            *v = variance_floor;
        }
    }

    let total_sum: f64 = totals.iter().sum();
    let weights: Vec<f64> = totals.iter().map(|t| t / total_sum).collect();
    Ok(MixtureModel::new(means, vars, weights))
}

fn grand_moments(embedded: &[Tensor], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0.0;
    for traj in embedded {
        for t in 0..traj.rows {
            for (d, v) in traj.row(t).iter().enumerate() {
                mean[d] += v;
            }
            count += 1.0;
        }
    }
    for v in mean.iter_mut() {
        *v /= count;
    }
    let mut var = vec![0.0; dim];
    for traj in embedded {
        for t in 0..traj.rows {
            for (d, v) in traj.row(t).iter().enumerate() {
                let diff = v - mean[d];
                var[d] += diff * diff;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    (mean, var)
}

/// Hardens responsibilities to one-hot argmax vectors.
pub fn harden(resp: &Responsibilities) -> Responsibilities {
    let per_trajectory = resp
        .per_trajectory
        .iter()
        .map(|q| {
            let mut one_hot = vec![0.0; q.len()];
            one_hot[argmax_lowest_tie(q)] = 1.0;
            one_hot
        })
        .collect();
    Responsibilities {
        per_trajectory,
        marginals: resp.marginals.clone(),
    }
}

/// k-means++ seeding over individual state embeddings, followed by one
/// hard-assignment MLE pass. Falls back to perturbed copies when there are
/// fewer distinct states than components.
pub fn init_mixture<R: Rng>(
    embedded: &[Tensor],
    k: usize,
    variance_floor: f64,
    rng: &mut R,
) -> Result<MixtureModel, ScaffoldError> {
    if embedded.is_empty() {
        return Err(ScaffoldError::EmptyReservoir);
    }
    let dim = embedded[0].cols;
    let states: Vec<&[f64]> = embedded
        .iter()
        .flat_map(|t| (0..t.rows).map(move |r| t.row(r)))
        .collect();
    let n = states.len();

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(states[rng.gen_range(0..n)].to_vec());
    let mut d2 = vec![0.0; n];
    while centers.len() < k {
        let mut sum = 0.0;
        for (i, s) in states.iter().enumerate() {
            let mut best = f64::INFINITY;
            for c in &centers {
                let mut dist = 0.0;
                for d in 0..dim {
                    let diff = s[d] - c[d];
                    dist += diff * diff;
                }
                best = best.min(dist);
            }
            d2[i] = best;
            sum += best;
        }
        if sum <= 0.0 {
            // All states coincide with existing centers; perturb a copy.
            let jitter: Vec<f64> = centers[0]
                .iter()
                .map(|v| v + rng.gen_range(-1e-3..1e-3))
                .collect();
            centers.push(jitter);
            continue;
        }
        let mut u = rng.gen_range(0.0..sum);
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        centers.push(states[chosen].to_vec());
    }

    // One hard-assignment pass for initial moments.
    let mut counts = vec![0.0; k];
    let mut means = Tensor::zeros(k, dim);
    for s in &states {
        let c = nearest_center(s, &centers);
        counts[c] += 1.0;
        for d in 0..dim {
            means.data[c * dim + d] += s[d];
        }
    }
    let (grand_mean, grand_var) = grand_moments(embedded, dim);
    for c in 0..k {
        if counts[c] > 0.0 {
            for d in 0..dim {
                means.data[c * dim + d] /= counts[c];
            }
        } else {
            for d in 0..dim {
                means.set(c, d, grand_mean[d]);
            }
        }
    }
    let mut vars = Tensor::zeros(k, dim);
    for s in &states {
        let c = nearest_center(s, &centers);
        for d in 0..dim {
            let diff = s[d] - means.get(c, d);
            vars.data[c * dim + d] += diff * diff;
        }
    }
    for c in 0..k {
        for d in 0..dim {
            let v = if counts[c] > 0.0 {
                vars.get(c, d) / counts[c]
            } else {
                grand_var[d]
            };
            vars.set(c, d, v.max(variance_floor));
        }
    }
    let total: f64 = counts.iter().sum();
    let weights: Vec<f64> = counts
        .iter()
        .map(|c| (c.max(1.0)) / total.max(1.0))
        .collect();
    let sum_w: f64 = weights.iter().sum();
    let weights = weights.into_iter().map(|w| w / sum_w).collect();
    Ok(MixtureModel::new(means, vars, weights))
}

fn nearest_center(s: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let mut dist = 0.0;
        for d in 0..s.len() {
            let diff = s[d] - c[d];
            dist += diff * diff;
        }
        if dist < best_d {
            best_d = dist;
            best = i;
        }
    }
    best
}

/// Runs EM with the encoder frozen. Returns the fitted mixture, the final
/// responsibilities, and the trajectory log-likelihood after each iteration.
pub fn em_iterations(
    mut mixture: MixtureModel,
    embedded: &[Tensor],
    iters: usize,
    variance_floor: f64,
    mode: ResponsibilityMode,
) -> Result<(MixtureModel, Responsibilities, Vec<f64>), ScaffoldError> {
    let mut ll_trace = Vec::with_capacity(iters);
    let mut resp = trajectory_responsibilities(&mixture, embedded)?;
    for _ in 0..iters {
        let update_from = match mode {
            ResponsibilityMode::Soft => resp.clone(),
            ResponsibilityMode::Hard => harden(&resp),
        };
        mixture = mixture_mle(embedded, &update_from, variance_floor)?;
        resp = trajectory_responsibilities(&mixture, embedded)?;
        ll_trace.push(resp.total_log_likelihood());
    }
    Ok((mixture, resp, ll_trace))
}

// ---------------------------------------------------------------------------
// TaskScaffold
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub rounds: usize,
    pub em_iterations: usize,
    pub final_log_likelihood: f64,
    pub pseudo_label_accuracy: f64,
}

/// Encoder + mixture, the fitted q_phi. Immutable once fitted; rollout
/// workers share it read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScaffold {
    pub encoder: Encoder,
    pub mixture: MixtureModel,
    pub meta: FitMeta,
}

impl TaskScaffold {
    pub fn k(&self) -> usize {
        self.mixture.k
    }

    /// log q(s | z) of a raw observation.
    pub fn log_component_density(&self, obs: &[f64], z: usize) -> Result<f64, ScaffoldError> {
        if z >= self.mixture.k {
            return Err(ScaffoldError::Invalid(format!(
                "component {z} out of range (K={})",
                self.mixture.k
            )));
        }
        let emb = self.encoder.encode(obs)?;
        Ok(self.mixture.log_component_density(&emb, z))
    }

    /// log q(s) of a raw observation.
    pub fn log_marginal_density(&self, obs: &[f64]) -> Result<f64, ScaffoldError> {
        let emb = self.encoder.encode(obs)?;
        Ok(self.mixture.log_marginal_density(&emb))
    }

    /// log q(z | s) of a raw observation.
    pub fn log_posterior(&self, obs: &[f64], z: usize) -> Result<f64, ScaffoldError> {
        if z >= self.mixture.k {
            return Err(ScaffoldError::Invalid(format!(
                "component {z} out of range (K={})",
                self.mixture.k
            )));
        }
        let emb = self.encoder.encode(obs)?;
        Ok(self.mixture.log_posterior(&emb, z))
    }

    pub fn sample_task_latent<R: Rng>(&self, rng: &mut R) -> usize {
        self.mixture.sample_latent(rng)
    }

    /// Embeds each trajectory's observations into one [T, embed_dim] block.
    pub fn embed_trajectories(&self, trajs: &[Trajectory]) -> Result<Vec<Tensor>, ScaffoldError> {
        embed_trajectories(&self.encoder, trajs)
    }

    /// Hard component assignment per trajectory.
    pub fn assign(&self, trajs: &[Trajectory]) -> Result<Vec<usize>, ScaffoldError> {
        let embedded = self.embed_trajectories(trajs)?;
        let resp = trajectory_responsibilities(&self.mixture, &embedded)?;
        Ok((0..trajs.len()).map(|i| resp.argmax(i)).collect())
    }
}

pub fn embed_trajectories(
    encoder: &Encoder,
    trajs: &[Trajectory],
) -> Result<Vec<Tensor>, ScaffoldError> {
    trajs
        .iter()
        .map(|traj| {
            let rows = traj.observations.len();
            let mut block = Tensor::zeros(rows, encoder.in_dim);
            for (r, obs) in traj.observations.iter().enumerate() {
                if obs.len() != encoder.in_dim {
                    return Err(ScaffoldError::DimMismatch {
                        got: obs.len(),
                        want: encoder.in_dim,
                    });
                }
                block.data[r * encoder.in_dim..(r + 1) * encoder.in_dim].copy_from_slice(obs);
            }
            encoder.encode_batch(&block)
        })
        .collect()
}

/// Fits the full scaffold: alternating rounds of trajectory-level EM and
/// pseudo-label encoder training, then a final mixture refit under the
/// trained encoder.
pub fn fit_scaffold<R: Rng>(
    trajs: &[Trajectory],
    config: &ScaffoldConfig,
    warm_start: Option<Encoder>,
    rng: &mut R,
) -> Result<TaskScaffold, ScaffoldError> {
    config.validate()?;
    if trajs.is_empty() {
        return Err(ScaffoldError::EmptyReservoir);
    }
    let in_dim = trajs[0].observations[0].len();
    let mut encoder = match warm_start {
        Some(e) => {
            if e.in_dim != in_dim || e.embed_dim != config.embed_dim || e.k != config.k {
                return Err(ScaffoldError::Invalid(
                    "warm-start encoder shape does not match config".into(),
                ));
            }
            e
        }
        None => Encoder::init(in_dim, config.hidden, config.embed_dim, config.k, rng),
    };

    // Flat observation matrix for encoder training.
    let n_states: usize = trajs.iter().map(|t| t.observations.len()).sum();
    let mut all_obs = Tensor::zeros(n_states, in_dim);
    let mut row = 0;
    for traj in trajs {
        for obs in &traj.observations {
            all_obs.data[row * in_dim..(row + 1) * in_dim].copy_from_slice(obs);
            row += 1;
        }
    }

    let mut opt = Adam::new(config.encoder_lr, encoder.n_params());
    let mut em_count = 0usize;
    let mut accuracy = 0.0;

    let embedded = embed_trajectories(&encoder, trajs)?;
    let mut mixture = init_mixture(&embedded, config.k, config.variance_floor, rng)?;

    for _round in 0..config.rounds {
        let embedded = embed_trajectories(&encoder, trajs)?;
        let resp = trajectory_responsibilities(&mixture, &embedded)?;
        let update_from = match config.responsibilities {
            ResponsibilityMode::Soft => resp,
            ResponsibilityMode::Hard => harden(&resp),
        };
        mixture = mixture_mle(&embedded, &update_from, config.variance_floor)?;
        em_count += 1;

        // Pseudo-label every state with its trajectory's argmax component
        // under the updated mixture.
        let resp = trajectory_responsibilities(&mixture, &embedded)?;
        let mut labels = Vec::with_capacity(n_states);
        for (i, traj) in trajs.iter().enumerate() {
            let label = resp.argmax(i);
            labels.extend(std::iter::repeat(label).take(traj.observations.len()));
        }
        for _epoch in 0..config.encoder_epochs {
            encoder.train_epoch(&all_obs, &labels, config.batch_size, &mut opt, rng);
        }
        accuracy = encoder.pseudo_label_accuracy(&all_obs, &labels);
    }

    // Final mixture refit under the trained encoder.
    let embedded = embed_trajectories(&encoder, trajs)?;
    let init = init_mixture(&embedded, config.k, config.variance_floor, rng)?;
    let (mixture, resp, ll_trace) = em_iterations(
        init,
        &embedded,
        config.final_em_iters,
        config.variance_floor,
        config.responsibilities,
    )?;
    em_count += config.final_em_iters;

    Ok(TaskScaffold {
        encoder,
        mixture,
        meta: FitMeta {
            rounds: config.rounds,
            em_iterations: em_count,
            final_log_likelihood: ll_trace.last().copied().unwrap_or_else(|| {
                resp.total_log_likelihood()
            }),
            pseudo_label_accuracy: accuracy,
        },
    })
}
