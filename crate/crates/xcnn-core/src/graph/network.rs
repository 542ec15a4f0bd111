//! Materialised networks: an [`ArchitectureSpec`] turned into parameter
//! tensors plus a flat, topologically ordered execution plan.
//!
//! Each plan step has a stable dotted name (`Y.s0.l0.conv`,
//! `cross0.Y-U.conv`, `tail.l1.dense`, ...) used for parameter records in
//! checkpoints, for introspection targets and in error messages.  Parameters
//! are initialised in plan order from a seeded stream, so a build is a pure
//! function of (spec, seed).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::layers::{EdgeSpec, LayerSpec};
use crate::optim;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    ConvBias,
    DenseWeight,
    DenseBias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<F>,
}

/// Running statistics for one batch-norm site, updated during training and
/// used verbatim at inference.
#[derive(Debug, Clone)]
pub struct BnSite<F> {
    pub name: String,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Debug, Clone)]
enum StepOp {
    /// Channels `[start, start+len)` of the network input.
    SliceInput { start: usize, len: usize },
    Conv { kernel: usize, bias: usize, padding: usize },
    Relu,
    Maxout { pieces: usize },
    MaxPool { window: usize },
    GlobalMaxPool,
    BatchNorm { gamma: usize, beta: usize, site: usize },
    Dropout { rate: f64 },
    Dense { weight: usize, bias: usize },
    Flatten,
    Identity,
    Softmax,
    Concat { parts: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Step {
    name: String,
    op: StepOp,
    /// Predecessor step; `None` for input slices and concats.
    input: Option<usize>,
}

/// Where a tower (or the tail) currently stands during materialisation.
#[derive(Debug, Clone, Copy)]
struct Cursor {
    step: usize,
    ch: usize,
    h: usize,
    w: usize,
    /// Set once a Flatten collapses the spatial axes; `ch` then counts
    /// features.
    flat: bool,
}

pub struct NetworkGraph<F> {
    spec: ArchitectureSpec,
    params: Vec<Param<F>>,
    bn: Vec<BnSite<F>>,
    steps: Vec<Step>,
    logits_step: usize,
    softmax_step: Option<usize>,
    bn_eps: f64,
    bn_momentum: f64,
}

pub struct TrainForward {
    pub logits: TensorId,
    /// Tape leaves of every parameter, aligned with `NetworkGraph::params`.
    pub param_ids: Vec<TensorId>,
    /// Tape leaf of the input batch.
    pub batch: TensorId,
}

pub struct InferForward {
    pub logits: TensorId,
    /// Set when the architecture closes with a softmax layer.
    pub probs: Option<TensorId>,
}

// ---- materialisation -----------------------------------------------------

struct Builder<F> {
    params: Vec<Param<F>>,
    bn: Vec<BnSite<F>>,
    steps: Vec<Step>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Builder<F> {
    fn push_step(&mut self, name: String, op: StepOp, input: Option<usize>) -> usize {
        self.steps.push(Step { name, op, input });
        self.steps.len() - 1
    }

    fn conv_params(&mut self, name: &str, f: usize, c: usize, k: usize) -> (usize, usize) {
        let mut kernel = Tensor::zeros(&[f, c, k, k]);
        optim::xavier_fill(kernel.data_mut(), c * k * k, f * k * k, &mut self.rng);
        self.params.push(Param {
            name: format!("{name}.weight"),
            kind: ParamKind::ConvKernel,
            tensor: kernel.requires_grad(true),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            kind: ParamKind::ConvBias,
            tensor: Tensor::zeros(&[f]).requires_grad(true),
        });
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn dense_params(&mut self, name: &str, d: usize, units: usize) -> (usize, usize) {
        let mut weight = Tensor::zeros(&[d, units]);
        optim::xavier_fill(weight.data_mut(), d, units, &mut self.rng);
        self.params.push(Param {
            name: format!("{name}.weight"),
            kind: ParamKind::DenseWeight,
            tensor: weight.requires_grad(true),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            kind: ParamKind::DenseBias,
            tensor: Tensor::zeros(&[units]).requires_grad(true),
        });
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn bn_params(&mut self, name: &str, c: usize) -> (usize, usize, usize) {
        self.params.push(Param {
            name: format!("{name}.gamma"),
            kind: ParamKind::Gamma,
            tensor: Tensor::filled(&[c], F::one()).requires_grad(true),
        });
        self.params.push(Param {
            name: format!("{name}.beta"),
            kind: ParamKind::Beta,
            tensor: Tensor::zeros(&[c]).requires_grad(true),
        });
        self.bn.push(BnSite {
            name: name.to_string(),
            running_mean: vec![F::zero(); c],
            running_var: vec![F::one(); c],
        });
        (self.params.len() - 2, self.params.len() - 1, self.bn.len() - 1)
    }

    /// Append one layer, advancing the cursor.  `name` is the full step name.
    fn apply_layer(&mut self, cur: &mut Cursor, layer: &LayerSpec, name: String) -> Result<()> {
        match *layer {
            LayerSpec::Conv { out_channels, kernel } => {
                if cur.flat {
                    return Err(Error::invalid("build", format!("{name}: conv after flatten")));
                }
                layer.out_channels(cur.ch)?;
                let (kid, bid) = self.conv_params(&name, out_channels, cur.ch, kernel);
                cur.step = self.push_step(
                    name,
                    StepOp::Conv { kernel: kid, bias: bid, padding: (kernel - 1) / 2 },
                    Some(cur.step),
                );
                cur.ch = out_channels;
            }
            LayerSpec::Relu => {
                cur.step = self.push_step(name, StepOp::Relu, Some(cur.step));
            }
            LayerSpec::Maxout { pieces } => {
                cur.ch = layer.out_channels(cur.ch).map_err(|_| {
                    Error::invalid(
                        "build",
                        format!("{name}: maxout of {pieces} pieces does not divide {} channels", cur.ch),
                    )
                })?;
                cur.step = self.push_step(name, StepOp::Maxout { pieces }, Some(cur.step));
            }
            LayerSpec::MaxPool { window } => {
                if cur.flat {
                    return Err(Error::invalid("build", format!("{name}: pool after flatten")));
                }
                if window == 0 || cur.h % window != 0 || cur.w % window != 0 {
                    return Err(Error::invalid(
                        "build",
                        format!("{name}: {}x{} not divisible by window {window}", cur.h, cur.w),
                    ));
                }
                cur.step = self.push_step(name, StepOp::MaxPool { window }, Some(cur.step));
                cur.h /= window;
                cur.w /= window;
            }
            LayerSpec::GlobalMaxPool => {
                if cur.flat {
                    return Err(Error::invalid("build", format!("{name}: pool after flatten")));
                }
                if cur.h != cur.w {
                    return Err(Error::invalid(
                        "build",
                        format!("{name}: global pool needs square maps, got {}x{}", cur.h, cur.w),
                    ));
                }
                cur.step = self.push_step(name, StepOp::GlobalMaxPool, Some(cur.step));
                cur.h = 1;
                cur.w = 1;
            }
            LayerSpec::BatchNorm => {
                let (g, b, site) = self.bn_params(&name, cur.ch);
                cur.step =
                    self.push_step(name, StepOp::BatchNorm { gamma: g, beta: b, site }, Some(cur.step));
            }
            LayerSpec::Dropout { rate } => {
                layer.out_channels(cur.ch)?;
                cur.step = self.push_step(name, StepOp::Dropout { rate }, Some(cur.step));
            }
            LayerSpec::Dense { units } => {
                if !cur.flat {
                    return Err(Error::invalid(
                        "build",
                        format!("{name}: dense requires flattened input"),
                    ));
                }
                let (wid, bid) = self.dense_params(&name, cur.ch, units);
                cur.step = self.push_step(name, StepOp::Dense { weight: wid, bias: bid }, Some(cur.step));
                cur.ch = units;
            }
            LayerSpec::Flatten => {
                if cur.flat {
                    return Err(Error::invalid("build", format!("{name}: input already flat")));
                }
                cur.step = self.push_step(name, StepOp::Flatten, Some(cur.step));
                cur.ch *= cur.h * cur.w;
                cur.flat = true;
            }
            LayerSpec::Identity => {
                cur.step = self.push_step(name, StepOp::Identity, Some(cur.step));
            }
            LayerSpec::Softmax => {
                if !cur.flat {
                    return Err(Error::invalid("build", format!("{name}: softmax requires features")));
                }
                cur.step = self.push_step(name, StepOp::Softmax, Some(cur.step));
            }
        }
        Ok(())
    }
}

impl<F: Scalar> NetworkGraph<F> {
    /// Materialise and initialise a network.  Identical (spec, seed) pairs
    /// produce bit-identical parameters.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder::<F> {
            params: Vec::new(),
            bn: Vec::new(),
            steps: Vec::new(),
            rng: stream_rng(seed, Stream::Init, 0, 0),
        };

        let n_stages = spec.superlayers[0].stages.len();
        let mut cursors: Vec<Cursor> = Vec::new();
        let mut ch_offset = 0;
        for sl in &spec.superlayers {
            let step = b.push_step(
                format!("{}.input", sl.name),
                StepOp::SliceInput { start: ch_offset, len: sl.in_channels },
                None,
            );
            ch_offset += sl.in_channels;
            cursors.push(Cursor {
                step,
                ch: sl.in_channels,
                h: spec.input_height,
                w: spec.input_width,
                flat: false,
            });
        }

        for stage in 0..n_stages {
            for (si, sl) in spec.superlayers.iter().enumerate() {
                for (li, layer) in sl.stages[stage].iter().enumerate() {
                    let name = format!("{}.s{}.l{}.{}", sl.name, stage, li, layer.kind_name());
                    b.apply_layer(&mut cursors[si], layer, name)?;
                }
            }
            for (ci, cross) in spec.cross.iter().enumerate() {
                if cross.after_stage != stage {
                    continue;
                }
                // All edges read the pre-segment cursors; destinations are
                // rebuilt from scratch and swapped in afterwards.
                let snapshot = cursors.clone();
                let mut merged: Vec<Option<Cursor>> = vec![None; cursors.len()];
                for (di, dsl) in spec.superlayers.iter().enumerate() {
                    let mut parts: Vec<usize> = Vec::new();
                    let mut ch_total = 0;
                    let mut geom = None;
                    for e in cross.edges.iter().filter(|e| e.to == dsl.name) {
                        let src_idx = spec
                            .superlayers
                            .iter()
                            .position(|s| s.name == e.from)
                            .expect("validated");
                        let src = snapshot[src_idx];
                        let mut cur = src;
                        match e.edge {
                            EdgeSpec::Identity => {
                                let name = format!("cross{}.{}-{}.id", ci, e.from, e.to);
                                cur.step = b.push_step(name, StepOp::Identity, Some(src.step));
                            }
                            EdgeSpec::Conv1x1 { out_channels } => {
                                let name = format!("cross{}.{}-{}.conv", ci, e.from, e.to);
                                b.apply_layer(
                                    &mut cur,
                                    &LayerSpec::Conv { out_channels, kernel: 1 },
                                    name,
                                )?;
                                for (pi, post) in cross.conv_post.iter().enumerate() {
                                    let name = format!(
                                        "cross{}.{}-{}.p{}.{}",
                                        ci,
                                        e.from,
                                        e.to,
                                        pi,
                                        post.kind_name()
                                    );
                                    b.apply_layer(&mut cur, post, name)?;
                                }
                            }
                        }
                        match geom {
                            None => geom = Some((cur.h, cur.w)),
                            Some(g) if g == (cur.h, cur.w) => {}
                            Some((gh, gw)) => {
                                return Err(Error::invalid(
                                    "build",
                                    format!(
                                        "cross{}: edge {}->{} arrives at {}x{}, others at {gh}x{gw}",
                                        ci, e.from, e.to, cur.h, cur.w
                                    ),
                                ));
                            }
                        }
                        ch_total += cur.ch;
                        parts.push(cur.step);
                    }
                    let (h, w) = geom.expect("validated: every tower has an edge");
                    let step =
                        b.push_step(format!("cross{}.{}.concat", ci, dsl.name), StepOp::Concat { parts }, None);
                    merged[di] = Some(Cursor { step, ch: ch_total, h, w, flat: false });
                }
                for (c, m) in cursors.iter_mut().zip(merged) {
                    *c = m.expect("all destinations built");
                }
            }
        }

        let mut tail_cur = if cursors.len() == 1 {
            cursors[0]
        } else {
            let geom = (cursors[0].h, cursors[0].w);
            for (c, sl) in cursors.iter().zip(&spec.superlayers) {
                if (c.h, c.w) != geom {
                    return Err(Error::invalid(
                        "build",
                        format!("tower `{}` ends at {}x{}, expected {}x{}", sl.name, c.h, c.w, geom.0, geom.1),
                    ));
                }
            }
            let parts: Vec<usize> = cursors.iter().map(|c| c.step).collect();
            let ch = cursors.iter().map(|c| c.ch).sum();
            let step = b.push_step("tail.concat".to_string(), StepOp::Concat { parts }, None);
            Cursor { step, ch, h: geom.0, w: geom.1, flat: false }
        };
        for (li, layer) in spec.tail.iter().enumerate() {
            let name = format!("tail.l{}.{}", li, layer.kind_name());
            b.apply_layer(&mut tail_cur, layer, name)?;
        }
        if tail_cur.ch != spec.num_classes {
            return Err(Error::invalid(
                "build",
                format!("tail produces {} features for {} classes", tail_cur.ch, spec.num_classes),
            ));
        }

        let last = b.steps.len() - 1;
        let (logits_step, softmax_step) = match b.steps[last].op {
            StepOp::Softmax => (b.steps[last].input.expect("softmax has an input"), Some(last)),
            _ => (last, None),
        };

        Ok(NetworkGraph {
            spec,
            params: b.params,
            bn: b.bn,
            steps: b.steps,
            logits_step,
            softmax_step,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
        })
    }

    // ---- accessors -------------------------------------------------------

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn bn_sites(&self) -> &[BnSite<F>] {
        &self.bn
    }

    /// Total trainable parameter count (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_named(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn param_named_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Zero every parameter whose name starts with `prefix`; returns how many
    /// tensors changed.  Exists for ablations ("what if the cross-connections
    /// contributed nothing?") and tests.
    pub fn zero_params_matching(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.tensor.data_mut().fill(F::zero());
                n += 1;
            }
        }
        n
    }

    /// Names of every plan step, in execution order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.name.as_str()).collect()
    }

    fn step_named(&self, name: &str) -> Result<usize> {
        self.steps
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// The kernel tensor of a named conv step.
    pub fn conv_kernel(&self, layer: &str) -> Result<&Tensor<F>> {
        let idx = self.step_named(layer)?;
        match self.steps[idx].op {
            StepOp::Conv { kernel, .. } => Ok(&self.params[kernel].tensor),
            _ => Err(Error::invalid(
                "conv_kernel",
                format!("`{layer}` is a {} step, not a conv", op_kind(&self.steps[idx].op)),
            )),
        }
    }

    /// Everything a checkpoint needs: parameters first, then running
    /// statistics, in deterministic order.
    pub fn state_records(&self) -> Vec<(String, Vec<usize>, Vec<F>)> {
        let mut out = Vec::with_capacity(self.params.len() + 2 * self.bn.len());
        for p in &self.params {
            out.push((p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
        }
        for site in &self.bn {
            out.push((
                format!("{}.running_mean", site.name),
                vec![site.running_mean.len()],
                site.running_mean.clone(),
            ));
            out.push((
                format!("{}.running_var", site.name),
                vec![site.running_var.len()],
                site.running_var.clone(),
            ));
        }
        out
    }

    /// Restore one record produced by [`NetworkGraph::state_records`].
    pub fn load_record(&mut self, name: &str, shape: &[usize], data: Vec<F>) -> Result<()> {
        if let Some(site) = self.bn.iter_mut().find(|s| name == format!("{}.running_mean", s.name)) {
            if shape != [site.running_mean.len()] || data.len() != site.running_mean.len() {
                return Err(Error::shapes("load_record", &[site.running_mean.len()], shape));
            }
            site.running_mean = data;
            return Ok(());
        }
        if let Some(site) = self.bn.iter_mut().find(|s| name == format!("{}.running_var", s.name)) {
            if shape != [site.running_var.len()] || data.len() != site.running_var.len() {
                return Err(Error::shapes("load_record", &[site.running_var.len()], shape));
            }
            site.running_var = data;
            return Ok(());
        }
        let p = self.param_named_mut(name)?;
        if p.tensor.shape() != shape || p.tensor.numel() != data.len() {
            return Err(Error::shapes("load_record", p.tensor.shape(), shape));
        }
        p.tensor.data_mut().copy_from_slice(&data);
        Ok(())
    }

    // ---- execution -------------------------------------------------------

    fn check_batch(&self, batch: &Tensor<F>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        let want = [self.spec.input_channels(), self.spec.input_height, self.spec.input_width];
        if [c, h, w] != want {
            return Err(Error::shapes("forward", &want, &[c, h, w]));
        }
        Ok(())
    }

    /// Training-mode forward: dropout active, batch statistics for batch
    /// norm (running statistics are updated in place).
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<F>,
        batch: &Tensor<F>,
        rng: &mut R,
    ) -> Result<TrainForward> {
        self.check_batch(batch)?;
        let momentum = F::from_f64(self.bn_momentum);
        let one_minus = F::from_f64(1.0 - self.bn_momentum);
        let mut values: Vec<Option<TensorId>> = vec![None; self.steps.len()];
        let mut param_ids: Vec<Option<TensorId>> = vec![None; self.params.len()];
        let batch_id = tape.leaf(batch);
        for i in 0..self.steps.len() {
            let id = {
                let step = &self.steps[i];
                match &step.op {
                    StepOp::BatchNorm { gamma, beta, site } => {
                        let input = values[step.input.unwrap()].unwrap();
                        let g = Self::param_id(tape, &self.params, &mut param_ids, *gamma);
                        let bta = Self::param_id(tape, &self.params, &mut param_ids, *beta);
                        let (id, mean, var) = tape.batchnorm_train(input, g, bta, self.bn_eps)?;
                        let s = &mut self.bn[*site];
                        for (r, m) in s.running_mean.iter_mut().zip(&mean) {
                            *r = *r * momentum + *m * one_minus;
                        }
                        for (r, v) in s.running_var.iter_mut().zip(&var) {
                            *r = *r * momentum + *v * one_minus;
                        }
                        id
                    }
                    StepOp::Dropout { rate } => {
                        let input = values[step.input.unwrap()].unwrap();
                        tape.dropout(input, *rate, rng)?
                    }
                    _ => Self::run_plain_step(
                        tape,
                        &self.steps,
                        &self.params,
                        &mut param_ids,
                        &values,
                        i,
                        batch_id,
                        &self.bn,
                        self.bn_eps,
                        false,
                    )?,
                }
            };
            values[i] = Some(id);
        }
        let logits = values[self.logits_step].unwrap();
        let param_ids = param_ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| id.unwrap_or_else(|| panic!("parameter {} unused in forward", self.params[i].name)))
            .collect();
        Ok(TrainForward { logits, param_ids, batch: batch_id })
    }

    /// Inference-mode forward: dropout off, running statistics for batch
    /// norm.
    pub fn forward_infer(&self, tape: &mut Tape<F>, batch: &Tensor<F>) -> Result<InferForward> {
        self.check_batch(batch)?;
        let (values, _) = self.run_infer(tape, batch, self.steps.len() - 1)?;
        Ok(InferForward {
            logits: values[self.logits_step].unwrap(),
            probs: self.softmax_step.map(|s| values[s].unwrap()),
        })
    }

    /// Inference-mode forward that stops at (and returns) a named step.
    pub fn forward_to(&self, tape: &mut Tape<F>, batch: &Tensor<F>, layer: &str) -> Result<TensorId> {
        self.forward_to_traced(tape, batch, layer).map(|(id, _)| id)
    }

    /// Like [`NetworkGraph::forward_to`] but also returns the tape id of the
    /// batch leaf, so callers can differentiate with respect to the input
    /// (the batch tensor must have `requires_grad` set for that).
    pub fn forward_to_traced(
        &self,
        tape: &mut Tape<F>,
        batch: &Tensor<F>,
        layer: &str,
    ) -> Result<(TensorId, TensorId)> {
        self.check_batch(batch)?;
        let stop = self.step_named(layer)?;
        let (values, batch_id) = self.run_infer(tape, batch, stop)?;
        Ok((values[stop].unwrap(), batch_id))
    }

    fn run_infer(
        &self,
        tape: &mut Tape<F>,
        batch: &Tensor<F>,
        stop: usize,
    ) -> Result<(Vec<Option<TensorId>>, TensorId)> {
        let mut values: Vec<Option<TensorId>> = vec![None; self.steps.len()];
        let mut param_ids: Vec<Option<TensorId>> = vec![None; self.params.len()];
        let batch_id = tape.leaf(batch);
        for i in 0..=stop {
            values[i] = Some(Self::run_plain_step(
                tape,
                &self.steps,
                &self.params,
                &mut param_ids,
                &values,
                i,
                batch_id,
                &self.bn,
                self.bn_eps,
                true,
            )?);
        }
        Ok((values, batch_id))
    }

    fn param_id(
        tape: &mut Tape<F>,
        params: &[Param<F>],
        cache: &mut [Option<TensorId>],
        idx: usize,
    ) -> TensorId {
        if let Some(id) = cache[idx] {
            return id;
        }
        let id = tape.leaf(&params[idx].tensor);
        cache[idx] = Some(id);
        id
    }

    /// Steps whose behaviour is mode-independent, plus the inference variants
    /// of batch norm / dropout when `infer` is set.
    #[allow(clippy::too_many_arguments)]
    fn run_plain_step(
        tape: &mut Tape<F>,
        steps: &[Step],
        params: &[Param<F>],
        param_ids: &mut [Option<TensorId>],
        values: &[Option<TensorId>],
        i: usize,
        batch_id: TensorId,
        bn: &[BnSite<F>],
        bn_eps: f64,
        infer: bool,
    ) -> Result<TensorId> {
        let step = &steps[i];
        let input = step.input.map(|idx| values[idx].expect("plan is topologically ordered"));
        match &step.op {
            StepOp::SliceInput { start, len } => {
                let c_total = tape.shape(batch_id)?[1];
                if *start == 0 && *len == c_total {
                    Ok(batch_id)
                } else {
                    tape.slice_channels(batch_id, *start, *len)
                }
            }
            StepOp::Conv { kernel, bias, padding } => {
                let k = Self::param_id(tape, params, param_ids, *kernel);
                let b = Self::param_id(tape, params, param_ids, *bias);
                tape.conv2d(input.unwrap(), k, b, 1, *padding)
            }
            StepOp::Relu => tape.relu(input.unwrap()),
            StepOp::Maxout { pieces } => tape.maxout(input.unwrap(), *pieces),
            StepOp::MaxPool { window } => tape.maxpool2d(input.unwrap(), *window),
            StepOp::GlobalMaxPool => {
                let shape = tape.shape(input.unwrap())?;
                let (h, w) = (shape[2], shape[3]);
                if h != w {
                    return Err(Error::invalid(
                        "global_maxpool",
                        format!("needs square maps, got {h}x{w}"),
                    ));
                }
                tape.maxpool2d(input.unwrap(), h)
            }
            StepOp::BatchNorm { gamma, beta, site } => {
                debug_assert!(infer, "training batch norm is handled by forward_train");
                let g = Self::param_id(tape, params, param_ids, *gamma);
                let b = Self::param_id(tape, params, param_ids, *beta);
                let s = &bn[*site];
                tape.batchnorm_infer(input.unwrap(), g, b, &s.running_mean, &s.running_var, bn_eps)
            }
            StepOp::Dropout { .. } => {
                debug_assert!(infer, "training dropout is handled by forward_train");
                Ok(input.unwrap())
            }
            StepOp::Dense { weight, bias } => {
                let w = Self::param_id(tape, params, param_ids, *weight);
                let b = Self::param_id(tape, params, param_ids, *bias);
                tape.dense(input.unwrap(), w, b)
            }
            StepOp::Flatten => tape.flatten(input.unwrap()),
            StepOp::Identity => Ok(input.unwrap()),
            StepOp::Softmax => tape.softmax(input.unwrap()),
            StepOp::Concat { parts } => {
                let ids: Vec<TensorId> =
                    parts.iter().map(|&p| values[p].expect("plan is topologically ordered")).collect();
                tape.concat_channels(&ids)
            }
        }
    }
}

impl<F: Scalar> NetworkGraph<F> {
    /// Training-mode cross-entropy loss for one batch; used by the gradient
    /// checker, which needs many cheap re-evaluations.
    fn train_loss(&mut self, batch: &Tensor<F>, labels: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_train(&mut tape, batch, &mut rng)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        Ok(tape.value(loss)?[0].to_f64())
    }

    /// Central-difference check of the training loss against the tape
    /// gradients, sampling up to `per_tensor` coordinates of every parameter
    /// (and of the batch itself when it tracks gradients; it reports as
    /// input index `params().len()`).
    ///
    /// The graph must not contain active dropout — a stochastic loss cannot
    /// be differenced.  Batch-norm runs in training mode, so its batch
    /// statistics are part of the differentiated function.
    ///
    /// Check at a generic point: a freshly built graph has all-zero conv
    /// biases, which leaves relu pre-activations whose inputs are all
    /// inactive sitting exactly on the kink, and the central difference for
    /// a bias then straddles it at many positions at once.  Jitter the
    /// parameters (or train briefly) before calling.
    pub fn grad_check_train(
        &mut self,
        batch: &Tensor<F>,
        labels: &[u32],
        per_tensor: usize,
        eps: f64,
        seed: u64,
    ) -> Result<crate::tensor::GradCheckReport> {
        if self.steps.iter().any(|s| matches!(s.op, StepOp::Dropout { rate } if rate > 0.0)) {
            return Err(Error::invalid(
                "grad_check",
                "active dropout makes the loss stochastic; rebuild with zero rates",
            ));
        }
        let mut tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_train(&mut tape, batch, &mut rng)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        tape.backward(loss)?;
        let param_grads: Vec<Vec<F>> = fwd
            .param_ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect::<Result<_>>()?;
        let input_grad =
            if batch.tracks_grad() { Some(tape.grad(fwd.batch)?.to_vec()) } else { None };
        drop(tape);

        let sample = |tensor_index: usize, numel: usize| -> Vec<usize> {
            let take = per_tensor.min(numel);
            if take == numel {
                return (0..numel).collect();
            }
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(tensor_index as u64));
            rand::seq::index::sample(&mut rng, numel, take).into_vec()
        };
        let e = F::from_f64(eps);
        let mut report =
            crate::tensor::GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
        let record = |report: &mut crate::tensor::GradCheckReport,
                      analytic: f64,
                      numeric: f64,
                      at: (usize, usize)| {
            let err = crate::tensor::grad_check::rel_err(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(at);
            }
        };

        for ti in 0..self.params.len() {
            for c in sample(ti, self.params[ti].tensor.numel()) {
                let orig = self.params[ti].tensor.data()[c];
                self.params[ti].tensor.data_mut()[c] = orig + e;
                let plus = self.train_loss(batch, labels)?;
                self.params[ti].tensor.data_mut()[c] = orig - e;
                let minus = self.train_loss(batch, labels)?;
                self.params[ti].tensor.data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                record(&mut report, param_grads[ti][c].to_f64(), numeric, (ti, c));
            }
        }
        if let Some(grads) = input_grad {
            let mut work = batch.clone();
            let ti = self.params.len();
            for c in sample(ti, work.numel()) {
                let orig = work.data()[c];
                work.data_mut()[c] = orig + e;
                let plus = self.train_loss(&work, labels)?;
                work.data_mut()[c] = orig - e;
                let minus = self.train_loss(&work, labels)?;
                work.data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                record(&mut report, grads[c].to_f64(), numeric, (ti, c));
            }
        }
        Ok(report)
    }
}

fn op_kind(op: &StepOp) -> &'static str {
    match op {
        StepOp::SliceInput { .. } => "input",
        StepOp::Conv { .. } => "conv",
        StepOp::Relu => "relu",
        StepOp::Maxout { .. } => "maxout",
        StepOp::MaxPool { .. } => "pool",
        StepOp::GlobalMaxPool => "gpool",
        StepOp::BatchNorm { .. } => "bn",
        StepOp::Dropout { .. } => "drop",
        StepOp::Dense { .. } => "dense",
        StepOp::Flatten => "flatten",
        StepOp::Identity => "id",
        StepOp::Softmax => "softmax",
        StepOp::Concat { .. } => "concat",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::presets::{architecture, Preset, PresetOptions};
    use crate::graph::spec::{CrossConnectionSpec, CrossEdgeSpec, SuperlayerSpec};
    use rand::SeedableRng;

    fn preset(p: Preset) -> NetworkGraph<f32> {
        NetworkGraph::build(architecture(p, 10, PresetOptions::default()), 7).unwrap()
    }

    /// Two towers, one cross segment, batch norm in stage 1 — small enough
    /// for fast forward passes on 8x8 inputs.
    fn tiny_spec() -> ArchitectureSpec {
        let tower = |name: &str, in_channels: usize| SuperlayerSpec {
            name: name.to_string(),
            in_channels,
            stages: vec![
                vec![LayerSpec::Conv { out_channels: 4, kernel: 3 }, LayerSpec::Relu],
                vec![
                    LayerSpec::Conv { out_channels: 4, kernel: 3 },
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { window: 2 },
                ],
            ],
        };
        ArchitectureSpec {
            name: "tiny".to_string(),
            input_height: 8,
            input_width: 8,
            superlayers: vec![tower("a", 2), tower("b", 1)],
            cross: vec![CrossConnectionSpec {
                after_stage: 0,
                edges: vec![
                    CrossEdgeSpec { from: "a".into(), to: "a".into(), edge: EdgeSpec::Identity },
                    CrossEdgeSpec {
                        from: "b".into(),
                        to: "a".into(),
                        edge: EdgeSpec::Conv1x1 { out_channels: 2 },
                    },
                    CrossEdgeSpec { from: "b".into(), to: "b".into(), edge: EdgeSpec::Identity },
                    CrossEdgeSpec {
                        from: "a".into(),
                        to: "b".into(),
                        edge: EdgeSpec::Conv1x1 { out_channels: 2 },
                    },
                ],
                conv_post: vec![LayerSpec::Relu],
            }],
            tail: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Softmax,
            ],
            num_classes: 3,
        }
    }

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..crate::tensor::numel(shape))
            .map(|_| f32::sample_uniform(&mut rng, -1.0, 1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        assert_eq!(preset(Preset::KerasNet).count_params(), 4_460_106);
        assert_eq!(preset(Preset::XKerasNet).count_params(), 4_337_194);
        assert_eq!(preset(Preset::FitNet4).count_params(), 2_745_982);
        assert_eq!(preset(Preset::XFitNet4).count_params(), 2_676_446);
        let maxout_cross = NetworkGraph::<f32>::build(
            architecture(Preset::XFitNet4, 10, PresetOptions { cross_maxout: true }),
            7,
        )
        .unwrap();
        assert_eq!(maxout_cross.count_params(), 2_688_638);
    }

    #[test]
    fn build_is_a_pure_function_of_spec_and_seed() {
        let a = preset(Preset::XKerasNet);
        let b = preset(Preset::XKerasNet);
        let c = NetworkGraph::<f32>::build(architecture(Preset::XKerasNet, 10, PresetOptions::default()), 8)
            .unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.tensor.data() != pc.tensor.data());
        assert!(differs, "a different seed must give different weights");
    }

    #[test]
    fn infer_logits_and_probs_have_expected_shape() {
        let g = NetworkGraph::<f32>::build(tiny_spec(), 3).unwrap();
        let mut tape = Tape::new();
        let out = g.forward_infer(&mut tape, &random_batch(&[2, 3, 8, 8], 0)).unwrap();
        assert_eq!(tape.shape(out.logits).unwrap(), &[2, 3]);
        let probs = tape.value(out.probs.unwrap()).unwrap();
        for row in probs.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sums to {s}");
        }
    }

    #[test]
    fn duplicate_rows_give_duplicate_logits() {
        let g = NetworkGraph::<f32>::build(tiny_spec(), 3).unwrap();
        let one = random_batch(&[1, 3, 8, 8], 5);
        let other = random_batch(&[1, 3, 8, 8], 6);
        let mut data = one.data().to_vec();
        data.extend_from_slice(other.data());
        data.extend_from_slice(one.data());
        let batch = Tensor::from_vec(&[3, 3, 8, 8], data).unwrap();
        let mut tape = Tape::new();
        let out = g.forward_infer(&mut tape, &batch).unwrap();
        let logits = tape.value(out.logits).unwrap();
        assert_eq!(logits[0..3], logits[6..9]);
        assert_ne!(logits[0..3], logits[3..6]);
    }

    #[test]
    fn towers_ignore_foreign_channels() {
        let g = preset(Preset::XKerasNet);
        let base = random_batch(&[1, 3, 32, 32], 1);
        let mut scrambled = base.data().to_vec();
        for v in &mut scrambled[1024..] {
            *v += 10.0; // U and V planes
        }
        let scrambled = Tensor::from_vec(&[1, 3, 32, 32], scrambled).unwrap();
        let mut t1 = Tape::new();
        let a = g.forward_to(&mut t1, &base, "Y.s0.l0.conv").unwrap();
        let mut t2 = Tape::new();
        let b = g.forward_to(&mut t2, &scrambled, "Y.s0.l0.conv").unwrap();
        assert_eq!(t1.value(a).unwrap(), t2.value(b).unwrap());
    }

    #[test]
    fn train_forward_updates_running_stats_and_state_roundtrips() {
        let mut g = NetworkGraph::<f32>::build(tiny_spec(), 1).unwrap();
        let batch = random_batch(&[4, 3, 8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let fwd = g.forward_train(&mut tape, &batch, &mut rng).unwrap();
        assert_eq!(fwd.param_ids.len(), g.params().len());
        assert!(g.bn_sites().iter().any(|s| s.running_mean.iter().any(|&m| m != 0.0)));

        let mut fresh = NetworkGraph::<f32>::build(tiny_spec(), 99).unwrap();
        for (name, shape, data) in g.state_records() {
            fresh.load_record(&name, &shape, data).unwrap();
        }
        let probe = random_batch(&[2, 3, 8, 8], 3);
        let mut ta = Tape::new();
        let la = g.forward_infer(&mut ta, &probe).unwrap().logits;
        let mut tb = Tape::new();
        let lb = fresh.forward_infer(&mut tb, &probe).unwrap().logits;
        assert_eq!(ta.value(la).unwrap(), tb.value(lb).unwrap());
    }

    #[test]
    fn state_records_cover_running_stats() {
        let g = NetworkGraph::<f32>::build(tiny_spec(), 1).unwrap();
        let names: Vec<String> = g.state_records().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.iter().any(|n| n == "a.s1.l1.bn.running_mean"));
        assert!(names.iter().any(|n| n == "b.s1.l1.bn.running_var"));
        assert!(names.iter().any(|n| n == "a.s1.l1.bn.gamma"));
    }

    #[test]
    fn load_record_rejects_bad_shapes_and_names() {
        let mut g = NetworkGraph::<f32>::build(tiny_spec(), 1).unwrap();
        assert!(matches!(
            g.load_record("nope.weight", &[1], vec![0.0]),
            Err(Error::UnknownName(_))
        ));
        let err = g.load_record("a.s0.l0.conv.bias", &[5], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn introspection_accessors_resolve_steps() {
        let g = preset(Preset::XKerasNet);
        let names = g.layer_names();
        assert!(names.contains(&"cross0.U-Y.conv"));
        assert!(names.contains(&"cross0.Y.concat"));
        assert!(names.contains(&"tail.l1.dense"));
        assert_eq!(g.conv_kernel("cross0.U-Y.conv").unwrap().shape(), &[16, 16, 1, 1]);
        assert!(g.conv_kernel("Y.s0.l1.relu").is_err());
        assert!(g.forward_to(&mut Tape::new(), &random_batch(&[1, 3, 32, 32], 0), "nope").is_err());
    }

    #[test]
    fn cross_channel_bookkeeping_matches_design() {
        let g = preset(Preset::XKerasNet);
        let batch = random_batch(&[1, 3, 32, 32], 4);
        let mut tape = Tape::new();
        let id = g.forward_to(&mut tape, &batch, "cross0.Y.concat").unwrap();
        assert_eq!(tape.shape(id).unwrap(), &[1, 64, 16, 16]);
        let mut tape = Tape::new();
        let id = g.forward_to(&mut tape, &batch, "cross0.U.concat").unwrap();
        assert_eq!(tape.shape(id).unwrap(), &[1, 48, 16, 16]);
    }

    #[test]
    fn zeroing_cross_parameters_touches_only_edges() {
        let mut g = preset(Preset::XKerasNet);
        // Four 1x1 conv edges, each with a kernel and a bias.
        assert_eq!(g.zero_params_matching("cross0."), 8);
    }

    #[test]
    fn builds_reject_inconsistent_tails() {
        let mut s = tiny_spec();
        s.tail = vec![LayerSpec::Dense { units: 3 }, LayerSpec::Softmax];
        assert!(NetworkGraph::<f32>::build(s, 1).is_err(), "dense before flatten");

        let mut s = tiny_spec();
        s.tail = vec![LayerSpec::Flatten, LayerSpec::Dense { units: 5 }, LayerSpec::Softmax];
        assert!(NetworkGraph::<f32>::build(s, 1).is_err(), "class count mismatch");
    }

    #[test]
    fn rejects_batches_with_wrong_geometry() {
        let g = NetworkGraph::<f32>::build(tiny_spec(), 1).unwrap();
        let bad = random_batch(&[1, 3, 16, 16], 0);
        assert!(matches!(
            g.forward_infer(&mut Tape::new(), &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn network_gradients_match_central_differences() {
        let mut g = NetworkGraph::<f64>::build(tiny_spec(), 4).unwrap();
        // Check at a generic point: freshly built graphs have all-zero biases,
        // which parks every "all inputs inactive" relu pre-activation exactly
        // on the kink and makes central differences one-sided there.
        let mut jitter = ChaCha8Rng::seed_from_u64(99);
        for p in g.params_mut() {
            for x in p.tensor.data_mut().iter_mut() {
                *x += f64::sample_uniform(&mut jitter, -0.05, 0.05);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = (0..3 * 3 * 8 * 8).map(|_| f64::sample_uniform(&mut rng, -1.0, 1.0)).collect();
        let batch = Tensor::from_vec(&[3, 3, 8, 8], data).unwrap().requires_grad(true);
        let report = g.grad_check_train(&batch, &[0, 2, 1], 6, 1e-5, 9).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_err < 1e-4,
            "worst {:?} err {}",
            report.worst,
            report.max_rel_err
        );
    }

    #[test]
    fn grad_check_refuses_stochastic_graphs() {
        let mut s = tiny_spec();
        s.superlayers[0].stages[0].push(LayerSpec::Dropout { rate: 0.5 });
        s.superlayers[1].stages[0].push(LayerSpec::Dropout { rate: 0.5 });
        let mut g = NetworkGraph::<f64>::build(s, 4).unwrap();
        let batch = Tensor::zeros(&[2, 3, 8, 8]);
        assert!(g.grad_check_train(&batch, &[0, 1], 2, 1e-5, 0).is_err());
    }

    #[test]
    fn global_pool_collapses_to_feature_vector() {
        let spec = ArchitectureSpec {
            name: "gp".to_string(),
            input_height: 8,
            input_width: 8,
            superlayers: vec![SuperlayerSpec {
                name: "rgb".to_string(),
                in_channels: 3,
                stages: vec![vec![
                    LayerSpec::Conv { out_channels: 6, kernel: 3 },
                    LayerSpec::Relu,
                    LayerSpec::GlobalMaxPool,
                ]],
            }],
            cross: vec![],
            tail: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 4 }, LayerSpec::Softmax],
            num_classes: 4,
        };
        let g = NetworkGraph::<f32>::build(spec, 1).unwrap();
        let mut tape = Tape::new();
        let id = g.forward_to(&mut tape, &random_batch(&[2, 3, 8, 8], 1), "rgb.s0.l2.gpool").unwrap();
        assert_eq!(tape.shape(id).unwrap(), &[2, 6, 1, 1]);
    }
}
