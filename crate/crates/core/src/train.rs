//! Training loop: truncated backpropagation over fixed windows with a
//! persistent cross-window state store.
//!
//! Sequences are cut into non-overlapping windows of `window_len` frames.
//! Each optimizer step runs a batch of windows forward and backward on
//! private tapes (in parallel), averages the gradients in slot order so the
//! result is independent of thread scheduling, and applies two disjoint Adam
//! updates: the task loss trains everything except the confidence net, the
//! confidence loss trains only the confidence net. With `long_horizon` on,
//! the state a window ends with is written to a store keyed by (sequence,
//! frame) and the window starting at that frame consumes it next epoch —
//! gradients never cross the boundary, values do. With it off every window
//! starts from zero state and the store stays empty.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::confidence::{label_sequence, ConfidenceParams};
use crate::config::{ConfigError, KvConfig};
use crate::event::{Dataset, FramedSequence};
use crate::metrics::{evaluate, EvalSummary};
use crate::model::{Carried, Model, ModelError, ModelKind};
use crate::optim::{accumulate_grads, scale_grads, AdamConfig, AdamState, OptimError};
use crate::seed::{rng_for, tag};
use crate::tape::{SampleMode, Tape, TapeError};
use crate::GradientMap;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("no trainable windows: every training sequence is shorter than one window")]
    NoItems,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub window_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Carry state across window boundaries through the store.
    pub long_horizon: bool,
    /// Evaluate the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Confidence-label parameters at the 160x120 reference scale.
    pub beta: f64,
    pub tau: f64,
    pub roi_h: usize,
    pub roi_w: usize,
    /// Huber transition point for the coordinate loss.
    pub delta: f64,
    /// Sampling mode used during training.
    pub sampling: SampleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let c = ConfidenceParams::default();
        TrainConfig {
            window_len: 8,
            batch_size: 8,
            lr: 1e-3,
            epochs: 3,
            seed: 0,
            long_horizon: true,
            eval_every: 1,
            beta: c.beta,
            tau: c.tau,
            roi_h: c.roi_h,
            roi_w: c.roi_w,
            delta: 1.0,
            sampling: SampleMode::Stochastic,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = TrainConfig::default();
        let mode_str = kv.get_str("sampling", d.sampling.as_str());
        let sampling = mode_str.parse().map_err(|_| ConfigError::BadValue {
            key: "sampling".into(),
            value: mode_str.clone(),
            expected: "stochastic|argmax|soft",
        })?;
        Ok(TrainConfig {
            window_len: kv.get_usize("window_len", d.window_len)?,
            batch_size: kv.get_usize("batch_size", d.batch_size)?,
            lr: kv.get_f64("lr", d.lr)?,
            epochs: kv.get_usize("epochs", d.epochs)?,
            seed: kv.get_u64("seed", d.seed)?,
            long_horizon: kv.get_bool("long_horizon", d.long_horizon)?,
            eval_every: kv.get_usize("eval_every", d.eval_every)?,
            beta: kv.get_f64("beta", d.beta)?,
            tau: kv.get_f64("tau", d.tau)?,
            roi_h: kv.get_usize("roi_h", d.roi_h)?,
            roi_w: kv.get_usize("roi_w", d.roi_w)?,
            delta: kv.get_f64("delta", d.delta)?,
            sampling,
        })
    }

    pub fn to_pairs(&self, out: &mut BTreeMap<String, String>) {
        out.insert("window_len".into(), self.window_len.to_string());
        out.insert("batch_size".into(), self.batch_size.to_string());
        out.insert("lr".into(), self.lr.to_string());
        out.insert("epochs".into(), self.epochs.to_string());
        out.insert("seed".into(), self.seed.to_string());
        out.insert("long_horizon".into(), self.long_horizon.to_string());
        out.insert("eval_every".into(), self.eval_every.to_string());
        out.insert("beta".into(), self.beta.to_string());
        out.insert("tau".into(), self.tau.to_string());
        out.insert("roi_h".into(), self.roi_h.to_string());
        out.insert("roi_w".into(), self.roi_w.to_string());
        out.insert("delta".into(), self.delta.to_string());
        out.insert("sampling".into(), self.sampling.as_str().into());
    }

    pub fn confidence_params(&self) -> ConfidenceParams {
        ConfidenceParams { beta: self.beta, tau: self.tau, roi_h: self.roi_h, roi_w: self.roi_w }
    }
}

/// Framed sequences plus everything derived from them that training needs.
pub struct TrainData {
    pub framed: Vec<FramedSequence>,
    /// Per-sequence, per-frame confidence labels (None where unlabeled).
    pub alphas: Vec<Vec<Option<f64>>>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

pub fn prepare(ds: &Dataset, tcfg: &TrainConfig) -> Result<TrainData, TrainError> {
    let conf = tcfg.confidence_params().scaled_for_sensor(ds.width, ds.height);
    let mut framed = Vec::with_capacity(ds.sequences.len());
    let mut alphas = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let fs = crate::event::frame_sequence(seq, ds.window_us)
            .map_err(|e| ModelError::BadConfig(format!("framing failed: {e}")))?;
        alphas.push(label_sequence(&fs, &conf));
        framed.push(fs);
    }
    let (train_idx, val_idx) = ds.train_val_split();
    Ok(TrainData { framed, alphas, train_idx, val_idx, width: ds.width, height: ds.height })
}

/// Carried state between window boundaries, keyed by (sequence, frame).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateStore {
    map: BTreeMap<(usize, usize), Carried>,
}

impl StateStore {
    pub fn new() -> Self {
        StateStore::default()
    }

    pub fn get_or(&self, key: (usize, usize), zero: &Carried) -> Carried {
        self.map.get(&key).cloned().unwrap_or_else(|| zero.clone())
    }

    pub fn put(&mut self, key: (usize, usize), state: Carried) {
        self.map.insert(key, state);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &Carried)> {
        self.map.iter()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ((usize, usize), Carried)>) -> Self {
        StateStore { map: entries.into_iter().collect() }
    }
}

/// Everything that evolves during training. Checkpoints capture exactly this
/// (the model's parameters live inside `model`).
pub struct TrainRun {
    pub model: Model,
    pub opt_task: AdamState,
    pub opt_conf: Option<AdamState>,
    pub store: StateStore,
    pub epochs_done: usize,
    pub steps_done: u64,
}

fn quantize_slice(xs: &mut [f64]) {
    for v in xs.iter_mut() {
        *v = *v as f32 as f64;
    }
}

impl TrainRun {
    pub fn new(model: Model, tcfg: &TrainConfig) -> Result<Self, TrainError> {
        let adam = AdamConfig { lr: tcfg.lr, ..AdamConfig::default() };
        let task_names = model.task_param_names();
        let opt_task = AdamState::new(adam, &model.params, task_names.iter())?;
        let opt_conf = match model.kind {
            ModelKind::Aissm => {
                let conf_names = model.conf_param_names();
                Some(AdamState::new(adam, &model.params, conf_names.iter())?)
            }
            _ => None,
        };
        Ok(TrainRun {
            model,
            opt_task,
            opt_conf,
            store: StateStore::new(),
            epochs_done: 0,
            steps_done: 0,
        })
    }

    /// Round all live f64 state down to f32 precision. The loop applies this
    /// at every epoch boundary, which is also exactly what checkpoints store
    /// — so "keep training" and "reload a checkpoint and train" see identical
    /// bits from any shared boundary onward.
    pub fn quantize(&mut self) {
        for (_, t) in self.model.params.iter_mut() {
            quantize_slice(t.data_mut());
        }
        let quant_opt = |opt: &mut AdamState| {
            let names: Vec<String> = opt.owned_names().cloned().collect();
            for n in names {
                let m = opt.moments_mut(&n).expect("owned name");
                quantize_slice(&mut m.m);
                quantize_slice(&mut m.v);
            }
        };
        quant_opt(&mut self.opt_task);
        if let Some(opt) = self.opt_conf.as_mut() {
            quant_opt(opt);
        }
        let entries: Vec<((usize, usize), Carried)> = self
            .store
            .entries()
            .map(|(&k, c)| {
                let mut c = c.clone();
                quantize_slice(&mut c.s);
                quantize_slice(&mut c.h);
                (k, c)
            })
            .collect();
        self.store = StateStore::from_entries(entries);
    }
}

/// One progress record from the training loop.
#[derive(Debug, Clone)]
pub enum LogEvent {
    Step { epoch: usize, step: u64, task_loss: f64, conf_loss: f64 },
    Eval { epoch: usize, split: String, summary: EvalSummary },
}

/// Full windows over one sequence's frames; tails shorter than the window
/// are dropped so every item has the same shape.
fn window_starts(fs: &FramedSequence, window_len: usize) -> Vec<usize> {
    let n = fs.frames.len();
    (0..n.saturating_sub(window_len - 1))
        .step_by(window_len)
        .filter(|&s| fs.labels[s..s + window_len].iter().any(|l| l.is_some()))
        .collect()
}

struct ItemOut {
    grads: GradientMap,
    out_key: (usize, usize),
    carried: Carried,
    task_loss: f64,
    conf_loss: f64,
    n_task: usize,
    n_conf: usize,
}

fn run_item(
    model: &Model,
    data: &TrainData,
    seq_idx: usize,
    start: usize,
    carried_in: &Carried,
    tcfg: &TrainConfig,
    rng_seed: (u64, u64),
) -> Result<ItemOut, TrainError> {
    let fs = &data.framed[seq_idx];
    let alphas = &data.alphas[seq_idx];
    let mut rng = rng_for(tcfg.seed, &[tag::ITEM, rng_seed.0, rng_seed.1]);

    let mut t = Tape::new();
    let b = model.bind(&mut t)?;
    let mut s = (!carried_in.s.is_empty())
        .then(|| t.constant(vec![carried_in.s.len()], carried_in.s.clone()));
    let mut h = (!carried_in.h.is_empty())
        .then(|| t.constant(vec![carried_in.h.len()], carried_in.h.clone()));

    let mut task_terms = Vec::new();
    let mut conf_terms = Vec::new();
    for i in start..start + tcfg.window_len {
        let frame = &fs.frames[i];
        let x = t.constant(vec![1, model.height, model.width], frame.binary_plane());
        let out = model.step(&mut t, &b, x, s, h, tcfg.sampling, &mut rng)?;
        if let Some(lbl) = &fs.labels[i] {
            task_terms.push(t.huber_sum(out.pred, &[lbl.cx, lbl.cy], tcfg.delta)?);
            if let (Some(a), Some(a_lbl)) = (out.alpha, alphas[i]) {
                let target = t.constant(vec![1], vec![a_lbl]);
                let d = t.sub(a, target)?;
                conf_terms.push(t.mul(d, d)?);
            }
        }
        s = out.s.or(s);
        h = out.h.or(h);
    }

    // Every parameter starts at zero so partially-labeled windows still feed
    // the optimizers a complete gradient map.
    let mut grads: GradientMap =
        model.params.iter().map(|(n, p)| (n.clone(), vec![0.0; p.len()])).collect();

    let mut mean_loss = |t: &mut Tape, terms: &[crate::Val]| -> Result<f64, TrainError> {
        let cat = t.concat(terms);
        let total = t.sum(cat);
        let mean = t.scale_shift(total, 1.0 / terms.len() as f64, 0.0);
        let gs = t.backward(mean)?;
        accumulate_grads(&mut grads, &t.param_grads(&gs));
        Ok(t.value(mean)[0])
    };
    let task_loss =
        if task_terms.is_empty() { 0.0 } else { mean_loss(&mut t, &task_terms)? };
    let conf_loss =
        if conf_terms.is_empty() { 0.0 } else { mean_loss(&mut t, &conf_terms)? };

    let carried = Carried {
        s: s.map(|v| t.value(v).to_vec()).unwrap_or_default(),
        h: h.map(|v| t.value(v).to_vec()).unwrap_or_default(),
    };
    Ok(ItemOut {
        grads,
        out_key: (seq_idx, start + tcfg.window_len),
        carried,
        task_loss,
        conf_loss,
        n_task: task_terms.len(),
        n_conf: conf_terms.len(),
    })
}

/// Run `run` forward to `target_epochs` completed epochs, reporting progress
/// through `sink`. Calling this twice (e.g. to 2, then to 4) produces exactly
/// the same state as one call to 4: every random stream is keyed by epoch or
/// step, never drawn from a long-lived generator.
pub fn train_epochs(
    run: &mut TrainRun,
    data: &TrainData,
    tcfg: &TrainConfig,
    target_epochs: usize,
    sink: &mut dyn FnMut(&LogEvent),
) -> Result<(), TrainError> {
    let mut items: Vec<(usize, usize)> = Vec::new();
    for &si in &data.train_idx {
        for start in window_starts(&data.framed[si], tcfg.window_len) {
            items.push((si, start));
        }
    }
    if items.is_empty() {
        return Err(TrainError::NoItems);
    }
    let zero = run.model.zero_carried();

    while run.epochs_done < target_epochs {
        let epoch = run.epochs_done;
        let mut order = items.clone();
        order.shuffle(&mut rng_for(tcfg.seed, &[tag::SHUFFLE, epoch as u64]));

        for batch in order.chunks(tcfg.batch_size) {
            let step = run.steps_done;
            let model = &run.model;
            let store = &run.store;
            let outs: Vec<Result<ItemOut, TrainError>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &(si, start))| {
                    let carried_in = if tcfg.long_horizon {
                        store.get_or((si, start), &zero)
                    } else {
                        zero.clone()
                    };
                    run_item(model, data, si, start, &carried_in, tcfg, (step, slot as u64))
                })
                .collect();

            let mut batch_grads = GradientMap::new();
            let mut task_sum = 0.0;
            let mut task_n = 0usize;
            let mut conf_sum = 0.0;
            let mut conf_n = 0usize;
            let n_items = batch.len();
            for out in outs {
                let out = out?;
                accumulate_grads(&mut batch_grads, &out.grads);
                if out.n_task > 0 {
                    task_sum += out.task_loss;
                    task_n += 1;
                }
                if out.n_conf > 0 {
                    conf_sum += out.conf_loss;
                    conf_n += 1;
                }
                if tcfg.long_horizon {
                    run.store.put(out.out_key, out.carried);
                }
            }
            scale_grads(&mut batch_grads, 1.0 / n_items as f64);
            run.opt_task.step(&mut run.model.params, &batch_grads)?;
            if let Some(opt) = run.opt_conf.as_mut() {
                opt.step(&mut run.model.params, &batch_grads)?;
            }
            run.steps_done += 1;
            sink(&LogEvent::Step {
                epoch,
                step,
                task_loss: if task_n > 0 { task_sum / task_n as f64 } else { 0.0 },
                conf_loss: if conf_n > 0 { conf_sum / conf_n as f64 } else { 0.0 },
            });
        }

        run.epochs_done += 1;
        run.quantize();
        let due = tcfg.eval_every > 0
            && (run.epochs_done % tcfg.eval_every == 0 || run.epochs_done == target_epochs);
        if due && !data.val_idx.is_empty() {
            let pairs: Vec<(usize, &FramedSequence)> =
                data.val_idx.iter().map(|&i| (i, &data.framed[i])).collect();
            let evals = evaluate(&run.model, &pairs, tcfg.seed)?;
            sink(&LogEvent::Eval {
                epoch: run.epochs_done,
                split: "val".into(),
                summary: crate::metrics::summarize(&evals),
            });
        }
    }
    Ok(())
}
