//! Minibatch training.
//!
//! The loss of a batch of `P` events is
//!
//! ```text
//! L = -sum_events log lambda + sum_nonevents lambda + KL
//! ```
//!
//! where `5 P` nonevents are sampled per batch, each anchored to one of the
//! batch's events and scored against the state just before it. Gradients
//! flow through the whole batch; the state is detached between batches.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::config::{AttentionMode, ModelConfig};
use crate::dyrep::time_scale;
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::events::{create_csv, csv_err, AssociationState, Event, EventKind, EventStream};
use crate::model::{advance, rng_for, ModelState, NonEvent, Sweep};
use crate::params::ParamStore;

/// Decay rates and stabilizer of the Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Events per minibatch.
    pub batch: usize,
    /// Nonevents sampled per event.
    pub nonevent_multiplier: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Tail of the training stream held out for early stopping.
    pub validation_fraction: f64,
    /// Epochs of worsening validation MAR tolerated before stopping.
    pub patience: usize,
    /// When false, `wall_seconds` is reported as zero so that metrics are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(n_nodes: usize) -> Self {
        TrainConfig {
            model: ModelConfig::new(n_nodes),
            batch: 200,
            nonevent_multiplier: 5,
            lr: 2e-4,
            epochs: 5,
            seed: 0,
            adam: AdamConfig::default(),
            validation_fraction: 0.1,
            patience: 1,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure!(self.batch >= 1, Config, "batch must be at least 1");
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.validation_fraction),
            Config,
            "validation_fraction must be in [0, 1)"
        );
        let a = &self.adam;
        ensure!(
            (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0,
            Config,
            "invalid Adam settings {a:?}"
        );
        Ok(())
    }
}

/// The three loss terms of a batch or epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_events: f64,
    pub l_nonevents: f64,
    pub l_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.l_events += other.l_events;
        self.l_nonevents += other.l_nonevents;
        self.l_kl += other.l_kl;
        self.total += other.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.l_events, self.l_nonevents, self.l_kl, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Draws `m` nonevents for `batch`. Nonevent `i` is anchored to event
/// `i * len / m`; its pair is uniform over ordered pairs other than the
/// anchor's (either orientation) and, when there are enough pairs, distinct
/// from the other nonevents of the same anchor. Kinds follow the batch's
/// kind frequencies.
pub fn sample_nonevents(batch: &[Event], n_nodes: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<NonEvent> {
    if batch.is_empty() || m == 0 {
        return Vec::new();
    }
    let valid_pairs = (n_nodes * n_nodes.saturating_sub(1)).saturating_sub(2);
    if valid_pairs == 0 {
        log::warn!("{n_nodes} nodes leave no pair to sample nonevents from");
        return Vec::new();
    }
    let per_anchor = m.div_ceil(batch.len());
    let distinct = per_anchor <= valid_pairs;
    if !distinct {
        log::warn!("only {valid_pairs} candidate pairs for {per_anchor} nonevents per event; sampling with replacement");
    }
    let p_assoc = batch.iter().filter(|e| e.kind == EventKind::Association).count() as f64 / batch.len() as f64;
    let mut out: Vec<NonEvent> = Vec::with_capacity(m);
    let mut group_start = 0;
    for i in 0..m {
        let anchor = i * batch.len() / m;
        if out.last().is_some_and(|n| n.anchor != anchor) {
            group_start = out.len();
        }
        let e = &batch[anchor];
        let (u, v) = loop {
            let u = rng.random_range(0..n_nodes);
            let mut v = rng.random_range(0..n_nodes - 1);
            if v >= u {
                v += 1;
            }
            let fired = (u == e.u && v == e.v) || (u == e.v && v == e.u);
            let repeat = distinct && out[group_start..].iter().any(|n| n.u == u && n.v == v);
            if !fired && !repeat {
                break (u, v);
            }
        };
        let kind = if rng.random_bool(p_assoc) {
            EventKind::Association
        } else {
            EventKind::Communication
        };
        out.push(NonEvent { u, v, anchor, kind });
    }
    out
}

/// Loss of one batch and, optionally, its gradient.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: LossBreakdown,
    pub grads: Option<Vec<Tensor>>,
}

fn sum_or_zero(sweep: &mut Sweep<'_>, terms: &[Var]) -> Var {
    if terms.is_empty() {
        sweep.tape.constant_scalar(0.0)
    } else {
        sweep.tape.add_n(terms)
    }
}

/// Sweeps `batch` (whose first event sits at stream position `first_index`)
/// from `state`, advancing it, and returns the loss terms. Nonevents are
/// drawn first, then attention samples, all from `rng`.
pub fn batch_loss(
    batch: &[Event],
    first_index: usize,
    state: &mut ModelState,
    params: &ParamStore,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<BatchOutput> {
    let m = cfg.nonevent_multiplier * batch.len();
    let nonevents = sample_nonevents(batch, cfg.model.n_nodes, m, rng);
    let mut sweep = Sweep::new(&cfg.model, params, true);
    let learned = cfg.model.attention == AttentionMode::LdgLearned;
    let (mut logs, mut survivals, mut kls) = (Vec::new(), Vec::new(), Vec::new());
    let mut next = 0;
    for (j, e) in batch.iter().enumerate() {
        let start = next;
        while next < nonevents.len() && nonevents[next].anchor == j {
            next += 1;
        }
        let index = first_index + j;
        let terms = sweep.step(state, e, index, &nonevents[start..next], learned, rng)?;
        for &ne in &terms.nonevents {
            let x = sweep.tape.scalar(ne);
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("nonevent intensity {x} at event {index}")));
            }
        }
        if let Some(kl) = terms.kl {
            let x = sweep.tape.scalar(kl);
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("KL term {x} at event {index}")));
            }
            kls.push(kl);
        }
        logs.push(sweep.tape.log(terms.lambda));
        survivals.extend(terms.nonevents);
    }
    let log_sum = sum_or_zero(&mut sweep, &logs);
    let l_events = sweep.tape.neg(log_sum);
    let l_nonevents = sum_or_zero(&mut sweep, &survivals);
    let l_kl = sum_or_zero(&mut sweep, &kls);
    let total = sweep.tape.add_n(&[l_events, l_nonevents, l_kl]);
    let loss = LossBreakdown {
        l_events: sweep.tape.scalar(l_events),
        l_nonevents: sweep.tape.scalar(l_nonevents),
        l_kl: sweep.tape.scalar(l_kl),
        total: sweep.tape.scalar(total),
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss:?} in batch starting at event {first_index}"
        )));
    }
    let grads = if with_grads { Some(sweep.gradients(total)?) } else { None };
    Ok(BatchOutput { loss, grads })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                *x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    /// `NaN` when the split has no communication events.
    pub mar: f64,
    pub hits10: f64,
    pub loss: LossBreakdown,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "split",
    "mar",
    "hits10",
    "l_events",
    "l_nonevents",
    "l_kl",
    "wall_seconds",
];

pub fn save_metrics(rows: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            format!("{:?}", r.mar),
            format!("{:?}", r.hits10),
            format!("{:?}", r.loss.l_events),
            format!("{:?}", r.loss.l_nonevents),
            format!("{:?}", r.loss.l_kl),
            format!("{:?}", r.wall_seconds),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch by validation MAR.
    pub params: ParamStore,
    /// State after the whole training stream under `params`.
    pub state: ModelState,
    /// State before the first event (shared by every epoch).
    pub initial_state: ModelState,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Splits off the validation tail: at least one event when the fraction is
/// positive and the stream has two or more events.
pub fn validation_split(stream: &EventStream, fraction: f64) -> (EventStream, EventStream) {
    let n = stream.len();
    let mut n_val = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    stream.split_at(n - n_val)
}

/// Trains on `stream`. DyRep attention needs `assoc`; latent attention
/// starts from an empty graph when it is absent. `on_epoch` runs after
/// every epoch with that epoch's metrics and parameters.
pub fn train(
    stream: &EventStream,
    assoc: Option<&AssociationState>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!stream.is_empty(), Validation, "training stream is empty");
    ensure!(
        stream.n_nodes() == cfg.model.n_nodes,
        Config,
        "stream has {} nodes, model has {}",
        stream.n_nodes(),
        cfg.model.n_nodes
    );
    let assoc = match (assoc, cfg.model.attention) {
        (Some(a), _) => a.clone(),
        (None, AttentionMode::DyRep) => {
            return Err(Error::Config("DyRep attention needs an association file".into()))
        }
        (None, _) => AssociationState::empty(cfg.model.n_nodes),
    };
    let (fit, valid) = validation_split(stream, cfg.validation_fraction);
    ensure!(!fit.is_empty(), Validation, "no training events left after the validation split");

    let mut params = ParamStore::init(&cfg.model, &mut rng_for(cfg.seed, 1));
    params.time_scale = time_scale(&fit);
    let initial_state = ModelState::initial(&cfg.model, &assoc, 0.0, &mut rng_for(cfg.seed, 2))?;
    let mut adam = Adam::new(&params, cfg.adam);

    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, ModelState)> = None;
    let mut worse = 0;
    let mut stopped_early = false;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(cfg.seed, 100 + epoch as u64);
        let mut state = initial_state.clone();
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in fit.events().chunks(cfg.batch).enumerate() {
            let out = batch_loss(batch, b * cfg.batch, &mut state, &params, cfg, &mut rng, true)?;
            adam.step(&mut params, out.grads.as_deref().expect("requested"), cfg.lr);
            if !params.is_usable() {
                return Err(Error::NonFinite(format!(
                    "parameters after batch starting at event {} of epoch {epoch}",
                    b * cfg.batch
                )));
            }
            epoch_loss.add(&out.loss);
        }

        // validation continues the recursion from the end of the fit part
        let (mar, hits10) = if valid.count_kind(EventKind::Communication) > 0 {
            let opts = EvalOptions {
                first_index: fit.len(),
                ..EvalOptions::default()
            };
            let r = evaluate(&valid, &mut state, &params, &cfg.model, &opts, &mut rng_for(cfg.seed, 200 + epoch as u64))?;
            (r.mar, r.hits10)
        } else {
            let rng = &mut rng_for(cfg.seed, 200 + epoch as u64);
            advance(&mut state, &params, &cfg.model, valid.events(), fit.len(), cfg.batch, rng, |_, _, _| Ok(()))?;
            (f64::NAN, f64::NAN)
        };
        let row = EpochMetrics {
            epoch,
            split: "valid".into(),
            mar,
            hits10,
            loss: epoch_loss,
            wall_seconds: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!(
            "epoch {epoch}: l_events {:.3} l_nonevents {:.3} l_kl {:.3} valid MAR {:.3}",
            epoch_loss.l_events,
            epoch_loss.l_nonevents,
            epoch_loss.l_kl,
            mar
        );
        on_epoch(&row, &params)?;
        metrics.push(row);

        let improved = match &best {
            None => true,
            Some((b, ..)) => mar.is_nan() || b.is_nan() || mar <= *b,
        };
        if improved {
            best = Some((mar, epoch, params.clone(), state));
            worse = 0;
        } else {
            worse += 1;
            if worse >= cfg.patience.max(1) {
                stopped_early = epoch < cfg.epochs;
                log::info!("validation MAR worsened at epoch {epoch}; stopping");
                break;
            }
        }
    }
    let (_, best_epoch, params, state) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        state,
        initial_state,
        metrics,
        best_epoch,
        stopped_early,
    })
}
