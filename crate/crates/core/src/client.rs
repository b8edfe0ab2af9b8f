//! One client's local round: download, plan update, local epochs with the
//! combined loss, per-epoch EMA smoothing of private weights, upload.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decouple::{merge_from_download, promote, split_for_upload, PartitionPlan, SharedPayload, SubnetMasks};
use crate::distill::{total_loss, TotalLoss};
use crate::error::{Error, Result};
use crate::nn::{backward, forward, Architecture, ModelParams, OptimizerState, ParamGrads};

/// Ramp-up of the EMA coefficient: `beta_max * exp(-5 (1 - t/t0)^2)` up to
/// round `t0`, then `beta_max`.
pub fn ramp_beta(t: usize, t0: usize, beta_max: f64) -> f64 {
    if t >= t0 {
        return beta_max;
    }
    let x = 1.0 - t as f64 / t0.max(1) as f64;
    beta_max * (-5.0 * x * x).exp()
}

/// `t0 = ceil(fraction * T)`, at least 1.
pub fn ramp_length(total_rounds: usize, fraction: f64) -> usize {
    ((fraction * total_rounds as f64).ceil() as usize).max(1)
}

/// `beta * new + (1 - beta) * old`, entrywise.
pub fn ema_update(new: &[f64], old: &[f64], beta: f64) -> Vec<f64> {
    new.iter().zip(old).map(|(&n, &o)| beta * n + (1.0 - beta) * o).collect()
}

/// Loss and parameter gradient of one mini-batch: cross-entropy of the full
/// network plus, when `distill` is set, `lambda` times the cyclic
/// distillation loss between the private and shared subnets.
pub fn batch_gradient(
    arch: &Architecture,
    params: &ModelParams,
    masks: &SubnetMasks,
    x: &[f64],
    y: &[usize],
    lambda: f64,
    distill: bool,
) -> Result<(TotalLoss, ParamGrads)> {
    let b = y.len();
    let full = forward(arch, params, x, b, &masks.full)?;
    let subnets = if distill {
        Some((
            forward(arch, params, x, b, &masks.private)?,
            forward(arch, params, x, b, &masks.shared)?,
        ))
    } else {
        None
    };
    let loss = total_loss(
        &full.logits,
        y,
        subnets.as_ref().map(|(p, s)| (&p.logits[..], &s.logits[..])),
        lambda,
        arch.num_classes(),
    );
    let mut grads = backward(arch, params, &full.cache, &loss.d_full)?;
    if let (Some((private, shared)), Some(dp), Some(ds)) = (&subnets, &loss.d_private, &loss.d_shared) {
        grads.add_assign(&backward(arch, params, &private.cache, dp)?);
        grads.add_assign(&backward(arch, params, &shared.cache, ds)?);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub beta_max: f64,
    pub t0: usize,
}

/// Per-round local training settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    /// Distillation weight; `0` disables the subnet passes entirely.
    pub lambda: f64,
    /// EMA smoothing of private weights, when enabled.
    pub ema: Option<EmaSchedule>,
}

/// Observable steps of a local round, in execution order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RoundEvent {
    Download { values: usize },
    PlanUpdate { private: Vec<usize>, head_private: bool, promoted_entries: usize },
    Epoch { epoch: usize, batches: usize, distilled: bool },
    Ema { epoch: usize, beta: f64 },
    Upload { values: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub client_id: usize,
    pub round: usize,
    /// Sample-weighted mean cross-entropy over all local batches.
    pub mean_ce: f64,
    /// Sample-weighted mean distillation loss; zero when inactive.
    pub mean_cd: f64,
    pub samples: usize,
    pub wall_time_ms: f64,
    pub events: Vec<RoundEvent>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Last smoothed value of every private entry. Entries outside the
    /// current plan's private set are unused.
    pub ema_shadow: ModelParams,
    pub plan: PartitionPlan,
    pub train: Dataset,
    pub alpha: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Default, Clone, Copy)]
struct EpochStats {
    ce: f64,
    cd: f64,
    samples: usize,
    batches: usize,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        params: ModelParams,
        plan: PartitionPlan,
        train: Dataset,
        alpha: f64,
        optimizer: OptimizerState,
        rng: ChaCha8Rng,
    ) -> Self {
        ClientState {
            client_id,
            ema_shadow: params.clone(),
            params,
            optimizer,
            plan,
            train,
            alpha,
            rng,
        }
    }

    /// Overwrites the shared entries with the server's copy.
    pub fn download(&mut self, arch: &Architecture, payload: &SharedPayload) -> Result<()> {
        merge_from_download(arch, &mut self.params, &self.plan, payload)
    }

    /// Switches to `plan`. Entries that become private keep their current
    /// values and seed their EMA shadow from them. Returns the number of
    /// newly private entries.
    pub fn advance_plan(&mut self, arch: &Architecture, plan: &PartitionPlan) -> Result<usize> {
        let before = self.plan.ownership(arch);
        let params = std::mem::replace(&mut self.params, ModelParams { layers: Vec::new() });
        self.params = promote(arch, params, &self.plan, plan)?;
        let fresh = plan.ownership(arch).newly_private(&before);
        for ((shadow, value), mask) in self.ema_shadow.tensors_mut().zip(self.params.tensors()).zip(&fresh.private) {
            for ((s, &v), &m) in shadow.iter_mut().zip(value).zip(mask) {
                if m {
                    *s = v;
                }
            }
        }
        self.plan = plan.clone();
        Ok(fresh.private_count())
    }

    pub fn upload(&self, arch: &Architecture) -> Result<SharedPayload> {
        split_for_upload(arch, &self.params, &self.plan)
    }

    fn training_error(&self, round: usize, message: impl Into<String>) -> Error {
        Error::Training {
            round,
            client: self.client_id,
            message: message.into(),
        }
    }

    fn train_epoch(&mut self, arch: &Architecture, round: usize, cfg: &LocalTraining) -> Result<(EpochStats, bool)> {
        let masks = self.plan.masks(arch);
        let distill = cfg.lambda > 0.0 && self.plan.both_subnets_connected();
        let mut stats = EpochStats::default();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = self.train.batch(chunk);
            let b = chunk.len();
            let (loss, grads) = batch_gradient(arch, &self.params, &masks, &x, &y, cfg.lambda, distill)?;
            if !loss.loss.is_finite() {
                return Err(self.training_error(round, format!("non-finite loss {} at batch {}", loss.loss, stats.batches)));
            }
            let client = self.client_id;
            self.optimizer
                .step(&mut self.params, &grads)
                .map_err(|e| Error::Training {
                    round,
                    client,
                    message: e.to_string(),
                })?;
            stats.ce += loss.ce * b as f64;
            stats.cd += loss.cd * b as f64;
            stats.samples += b;
            stats.batches += 1;
        }
        Ok((stats, distill))
    }

    /// Replaces every private entry with `beta * current + (1 - beta) * shadow`
    /// and stores the result as the new shadow.
    fn apply_ema(&mut self, arch: &Architecture, beta: f64) {
        let owner = self.plan.ownership(arch);
        for ((value, shadow), mask) in self.params.tensors_mut().zip(self.ema_shadow.tensors_mut()).zip(&owner.private) {
            for ((v, s), &m) in value.iter_mut().zip(shadow.iter_mut()).zip(mask) {
                if m {
                    let smoothed = beta * *v + (1.0 - beta) * *s;
                    *v = smoothed;
                    *s = smoothed;
                }
            }
        }
    }

    /// Runs the full local procedure for round `round` and returns the
    /// shared upload.
    pub fn local_round(
        &mut self,
        arch: &Architecture,
        download: &SharedPayload,
        round: usize,
        plan: &PartitionPlan,
        cfg: &LocalTraining,
    ) -> Result<(SharedPayload, RoundReport)> {
        let start = Instant::now();
        let mut events = Vec::new();

        self.download(arch, download)?;
        events.push(RoundEvent::Download {
            values: download.values.len(),
        });

        let promoted_entries = self.advance_plan(arch, plan)?;
        events.push(RoundEvent::PlanUpdate {
            private: plan.private.clone(),
            head_private: plan.head_private,
            promoted_entries,
        });

        let mut total = EpochStats::default();
        for epoch in 0..cfg.epochs {
            let (stats, distilled) = self.train_epoch(arch, round, cfg)?;
            events.push(RoundEvent::Epoch {
                epoch,
                batches: stats.batches,
                distilled,
            });
            total.ce += stats.ce;
            total.cd += stats.cd;
            total.samples += stats.samples;
            if let Some(ema) = cfg.ema {
                let beta = ramp_beta(round, ema.t0, ema.beta_max);
                self.apply_ema(arch, beta);
                events.push(RoundEvent::Ema { epoch, beta });
            }
        }
        if !self.params.is_finite() {
            return Err(self.training_error(round, "parameters became non-finite"));
        }

        let upload = self.upload(arch)?;
        events.push(RoundEvent::Upload {
            values: upload.values.len(),
        });
        let n = total.samples.max(1) as f64;
        Ok((
            upload,
            RoundReport {
                client_id: self.client_id,
                round,
                mean_ce: total.ce / n,
                mean_cd: total.cd / n,
                samples: total.samples,
                wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
                events,
            },
        ))
    }
}
