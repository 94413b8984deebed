//! Re-ID head: BNNeck, identity classifier, losses and the ship-size token.

use rand::Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::init::normal;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vit::{Linear, LinearInit};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_ids: usize,
    pub margin: f64,
    pub sst: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_ids: 32,
            margin: 0.3,
            sst: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl HeadConfig {
    /// Trainable counts: classifier, BN scale, SST linear.
    pub fn param_counts(&self, dim: usize) -> (usize, usize, usize) {
        (self.num_ids * dim, dim, if self.sst { 2 * dim + dim } else { 0 })
    }
}

/// Batch norm with the shift fixed at zero, followed by a bias-free classifier.
#[derive(Clone, Debug)]
pub struct BnneckHead {
    pub cfg: HeadConfig,
    pub gamma: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Scalar count of batches folded into the running statistics.
    pub tracked: ParamId,
    pub classifier: Linear,
}

pub struct HeadOutput {
    /// Pre-BN feature for the triplet loss.
    pub f_t: Var,
    /// Post-BN feature for the classifier.
    pub f_i: Var,
    pub logits: Var,
    /// Batch statistics when run in training mode.
    pub stats: Option<BatchStats<f64>>,
}

impl BnneckHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, cfg: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.num_ids == 0 {
            return Err(Error::Config("head needs at least one identity".into()));
        }
        let gamma = store.add(format!("{prefix}.bnneck.weight"), Tensor::ones(&[dim]))?;
        let running_mean = store.add_buffer(format!("{prefix}.bnneck.running_mean"), Tensor::zeros(&[dim]))?;
        let running_var = store.add_buffer(format!("{prefix}.bnneck.running_var"), Tensor::ones(&[dim]))?;
        let tracked = store.add_buffer(format!("{prefix}.bnneck.tracked"), Tensor::zeros(&[1]))?;
        let w = store.add(format!("{prefix}.classifier.weight"), normal(&[cfg.num_ids, dim], 0.001, rng))?;
        let classifier = Linear {
            weight: w,
            bias: None,
            in_dim: dim,
            out_dim: cfg.num_ids,
        };
        Ok(Self {
            cfg,
            gamma,
            running_mean,
            running_var,
            tracked,
            classifier,
        })
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.classifier.weight]
    }

    pub fn is_fitted<T: Real>(&self, store: &ParamStore<T>) -> bool {
        store.tensor(self.tracked).item() > T::zero()
    }

    /// `f_t = f_g`, `f_i = BN(f_g)`, `logits = f_i·Wᵀ`. Training mode uses
    /// batch statistics; evaluation needs fitted running statistics.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f_g: Var, train: bool) -> Result<HeadOutput> {
        let g = tape.param(store, self.gamma);
        let eps = T::lit(self.cfg.bn_eps);
        let (f_i, stats) = if train {
            let (y, s) = tape.batch_norm(f_g, g, None, eps)?;
            let cast = |v: Vec<T>| v.into_iter().map(Real::as_f64).collect();
            (
                y,
                Some(BatchStats {
                    mean: cast(s.mean),
                    var_unbiased: cast(s.var_unbiased),
                }),
            )
        } else {
            if !self.is_fitted(store) {
                return Err(Error::State("bnneck has no fitted running statistics".into()));
            }
            let mean = store.tensor(self.running_mean).clone();
            let var = store.tensor(self.running_var).clone();
            (tape.normalize_fixed(f_g, mean.data(), var.data(), g, None, eps)?, None)
        };
        let logits = self.classifier.forward(tape, store, f_i)?;
        Ok(HeadOutput {
            f_t: f_g,
            f_i,
            logits,
            stats,
        })
    }

    /// Folds batch statistics into the running estimates with the configured
    /// momentum.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<f64>) {
        let m = self.cfg.bn_momentum;
        for (dst, src) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var_unbiased)] {
            for (r, &s) in store.tensor_mut(dst).data_mut().iter_mut().zip(src) {
                *r = T::lit((1.0 - m) * r.as_f64() + m * s);
            }
        }
        let t = store.tensor_mut(self.tracked);
        t.data_mut()[0] += T::one();
    }

    /// Sets the running statistics to the exact moments of `features`.
    pub fn fit_running<T: Real>(&self, store: &mut ParamStore<T>, features: &Tensor<T>) -> Result<()> {
        let (n, d) = (features.rows(), features.last_dim());
        if n < 2 {
            return Err(Error::Contract("fitting bnneck statistics needs at least 2 samples".into()));
        }
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
        for (dst, src) in [(self.running_mean, &mean), (self.running_var, &var)] {
            for (r, &s) in store.tensor_mut(dst).data_mut().iter_mut().zip(src) {
                *r = T::lit(s);
            }
        }
        store.tensor_mut(self.tracked).data_mut()[0] = T::one();
        Ok(())
    }
}

/// Linear encoding of `(size, aspect)` into one token.
#[derive(Clone, Debug)]
pub struct SstEncoder {
    pub linear: Linear,
}

impl SstEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{prefix}.sst"), 2, dim, true, LinearInit::FanInUniform, rng)?,
        })
    }

    /// One `[B, D]` token per `(size, aspect)` pair.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, meta: &[(f64, f64)]) -> Result<Var> {
        let data = meta.iter().flat_map(|&(s, a)| [T::lit(s), T::lit(a)]).collect();
        let x = tape.constant(Tensor::new(vec![meta.len(), 2], data)?);
        self.linear.forward(tape, store, x)
    }
}

/// Batch-hard triplet loss: the mean over anchors of
/// `max(0, margin + max_pos d − min_neg d)`. Anchors whose identity has no
/// second sample in the batch are skipped.
pub fn triplet_batch_hard<T: Real>(tape: &mut Tape<T>, f_t: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let b = labels.len();
    if tape.value(f_t).rows() != b {
        return Err(Error::Dimension(format!(
            "{} labels for features {:?}",
            b,
            tape.shape(f_t)
        )));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Contract("triplet loss needs at least two identities in the batch".into()));
    }
    let dist = tape.pairwise_distance(f_t)?;
    let d = tape.value(dist).data().to_vec();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..b {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            let dij = d[i * b + j];
            if j != i && labels[j] == labels[i] {
                if hp.is_none_or(|p| dij > d[i * b + p]) {
                    hp = Some(j);
                }
            } else if labels[j] != labels[i] && hn.is_none_or(|n| dij < d[i * b + n]) {
                hn = Some(j);
            }
        }
        if let (Some(p), Some(n)) = (hp, hn) {
            pos.push(i * b + p);
            neg.push(i * b + n);
        }
    }
    if pos.is_empty() {
        return Err(Error::Contract("triplet loss needs an identity with at least two samples".into()));
    }
    let dp = tape.gather_elems(dist, &pos)?;
    let dn = tape.gather_elems(dist, &neg)?;
    let gap = tape.sub(dp, dn)?;
    let hinge = tape.add_scalar(gap, T::lit(margin));
    let hinge = tape.relu(hinge);
    Ok(tape.mean(hinge))
}

/// Mean cross-entropy over the batch.
pub fn id_loss<T: Real>(tape: &mut Tape<T>, logits: &Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(*logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub triplet: f64,
    pub id: f64,
    pub total: f64,
}

/// `L_total = L_triplet + L_id`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &HeadOutput,
    labels: &[usize],
    margin: f64,
) -> Result<(Var, LossReport)> {
    let tri = triplet_batch_hard(tape, out.f_t, labels, margin)?;
    let id = id_loss(tape, &out.logits, labels)?;
    let total = tape.add(tri, id)?;
    let report = LossReport {
        triplet: tape.value(tri).item().as_f64(),
        id: tape.value(id).item().as_f64(),
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests;
