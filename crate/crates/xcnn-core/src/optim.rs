//! Weight initialisation, the Adam optimiser and the training loop.
//!
//! Training is deterministic end to end: shuffling, dropout and augmentation
//! each consume their own derived stream (see [`crate::rng`]), so a run is
//! fully described by `(architecture, dataset, TrainConfig)` and replays
//! bit-identically.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{NetworkGraph, Param, ParamKind};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Glorot/Xavier uniform half-width for a `fan_in -> fan_out` map.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Fill a weight buffer uniformly from the Xavier interval.
pub fn xavier_fill<F: Scalar, R: Rng + ?Sized>(
    data: &mut [F],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let b = xavier_bound(fan_in, fan_out);
    let (lo, hi) = (F::from_f64(-b), F::from_f64(b));
    for v in data {
        *v = F::sample_uniform(rng, lo, hi);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; one first/second moment slot per parameter
/// tensor, aligned with `NetworkGraph::params`.
pub struct Adam<F> {
    cfg: AdamConfig,
    t: u32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: sizes.iter().map(|&s| alloc::vec![F::zero(); s]).collect(),
            v: sizes.iter().map(|&s| alloc::vec![F::zero(); s]).collect(),
        }
    }

    pub fn for_graph(cfg: AdamConfig, graph: &NetworkGraph<F>) -> Self {
        let sizes: Vec<usize> = graph.params().iter().map(|p| p.tensor.numel()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update from the gradients stored on the parameter tensors.
    pub fn step(&mut self, params: &mut [Param<F>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(
                "adam",
                format!("{} parameters, optimiser sized for {}", params.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - num_traits::Float::powi(self.cfg.beta1, self.t as i32));
        let bc2 = F::from_f64(1.0 - num_traits::Float::powi(self.cfg.beta2, self.t as i32));
        let lr = F::from_f64(self.cfg.lr);
        let eps = F::from_f64(self.cfg.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let n = p.tensor.numel();
            let grad =
                p.tensor.grad().ok_or(Error::GradMissing(i))?.to_vec();
            if grad.len() != n {
                return Err(Error::shapes("adam", &[n], &[grad.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in
                p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub max_shift: usize,
    pub hflip: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Coefficient of an L2 penalty on conv kernels and dense weights
    /// (biases and batch-norm parameters are exempt); 0 disables it.
    pub l2: f64,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Batch size for the per-epoch test pass.
    pub eval_batch: usize,
    /// Cap on test images per epoch evaluation (full set when `None`).
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            l2: 0.0,
            augment: None,
            seed: 0,
            adam: AdamConfig::default(),
            eval_batch: 100,
            eval_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Train `graph` in place.  When `test_set` is given, accuracy is measured
/// after every epoch.  Aborts with [`Error::NonFinite`] if the loss leaves
/// the reals, naming the epoch and batch.
pub fn train<F: Scalar>(
    graph: &mut NetworkGraph<F>,
    train_set: &Dataset<F>,
    test_set: Option<&Dataset<F>>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train", "batch size 0"));
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset { context: "train".into() });
    }
    let l2: Option<F> = (cfg.l2 > 0.0).then(|| F::from_f64(cfg.l2));
    let penalised: Vec<usize> = graph
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p.kind, ParamKind::ConvKernel | ParamKind::DenseWeight))
        .map(|(i, _)| i)
        .collect();
    let mut adam = Adam::for_graph(cfg.adam, graph);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout, epoch as u64, 0);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 && cfg.batch_size > 1 {
                // A singleton remainder has no batch statistics; skip it.
                continue;
            }
            let (mut batch, labels) = train_set.batch(chunk)?;
            if let Some(aug) = &cfg.augment {
                let mut rng = stream_rng(cfg.seed, Stream::Augment, epoch as u64, bi as u64);
                augment_batch(&mut batch, aug.max_shift, aug.hflip, &mut rng)?;
            }
            let mut tape = Tape::new();
            let fwd = graph.forward_train(&mut tape, &batch, &mut dropout_rng)?;
            let data_loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let loss = match l2 {
                Some(lambda) => {
                    let ids: Vec<_> = penalised.iter().map(|&i| fwd.param_ids[i]).collect();
                    let pen = tape.l2_penalty(&ids, lambda)?;
                    tape.add(data_loss, pen)?
                }
                None => data_loss,
            };
            let loss_val = tape.value(loss)?[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {bi}"),
                });
            }
            tape.backward(loss)?;
            for (param, &id) in graph.params_mut().iter_mut().zip(&fwd.param_ids) {
                let g = tape.grad(id)?.to_vec();
                param.tensor.set_grad(g)?;
            }
            adam.step(graph.params_mut())?;
            loss_sum += loss_val;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::invalid(
                "train",
                format!("no usable batches: {} images at batch size {}", train_set.len(), cfg.batch_size),
            ));
        }

        let train_loss = loss_sum / batches as f64;
        let test_accuracy = match test_set {
            Some(ts) => Some(eval::accuracy(graph, ts, cfg.eval_batch, cfg.eval_limit)?),
            None => None,
        };
        log::debug!(
            "epoch {epoch}: loss {train_loss:.4}{}",
            match test_accuracy {
                Some(a) => format!(", test accuracy {a:.4}"),
                None => alloc::string::String::new(),
            }
        );
        history.epochs.push(EpochStats { epoch, train_loss, test_accuracy });
    }
    Ok(history)
}
