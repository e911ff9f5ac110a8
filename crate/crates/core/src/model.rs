//! The tracking models: an adaptive state space model and two baselines.
//!
//! All three share a convolutional trunk over the binary event plane. The
//! full model (`Aissm`) keeps a categorical latent state: an encoder proposes
//! a sample from the current frame, a GRU rolls the previous state forward
//! and a prior head proposes a second sample from that recurrent summary, and
//! the two proposals are blended with a per-frame confidence weight predicted
//! by a small separate network. High confidence leans on the frame, low
//! confidence leans on the dynamics. The baselines are a plain feedforward
//! tracker (`Cnn`) and a recurrent tracker without the latent blend
//! (`CnnGru`); all variants are sized to roughly half a million parameters so
//! comparisons are at matched capacity.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::config::{usize_list_to_string, ConfigError, KvConfig};
use crate::event::EventFrame;
use crate::nn::{
    bind_dense, bind_gru, dense_fwd, gru_step, init_conv, init_dense, init_gru, DenseVals,
    GruVals, NnError,
};
use crate::seed::{rng_for, tag};
use crate::tape::{SampleMode, Tape, TapeError, Val};
use crate::tensor::{ParameterSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    BadConfig(String),
    #[error("{kind} step needs {what}")]
    MissingState { kind: &'static str, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Aissm,
    Cnn,
    CnnGru,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Aissm => "aissm",
            ModelKind::Cnn => "cnn",
            ModelKind::CnnGru => "cnn_gru",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aissm" => Ok(ModelKind::Aissm),
            "cnn" => Ok(ModelKind::Cnn),
            "cnn_gru" => Ok(ModelKind::CnnGru),
            other => Err(format!("unknown model `{other}` (expected aissm|cnn|cnn_gru)")),
        }
    }
}

/// Hidden width of the coordinate head shared by every variant.
const HEAD_HIDDEN: usize = 64;

/// Initial logit advantage of class 0 in the transition prior. A fresh
/// prior is near-uniform, so its samples would feed the recurrence a new
/// random code every frame; starting committed to an arbitrary class keeps
/// the loop quiet until training reshapes it.
const PRIOR_QUIET_START: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Number of categorical latent variables.
    pub n_vars: usize,
    /// Classes per latent variable.
    pub n_classes: usize,
    /// Recurrent state width.
    pub d_r: usize,
    /// Output channels of each 3x3 stride-2 trunk convolution.
    pub conv_channels: Vec<usize>,
    /// Dense widths between the flattened trunk and the latent logits.
    pub mlp_widths: Vec<usize>,
    /// Train the confidence net only through its own loss (blend weight is
    /// detached in the task graph).
    pub alpha_stopgrad: bool,
    /// Sampling mode used at evaluation time.
    pub eval_sampling: SampleMode,
    /// Target parameter count; `Model::budget_ok` checks the realized count
    /// against +/-10% of this.
    pub param_budget: usize,
}

impl ModelConfig {
    /// Defaults tuned so every variant lands near 500k parameters on a
    /// 160x120 sensor; the baselines spend the latent/confidence budget on a
    /// wider trunk instead.
    pub fn default_for(kind: ModelKind) -> Self {
        let base = ModelConfig {
            n_vars: 16,
            n_classes: 16,
            d_r: 64,
            conv_channels: vec![8, 16, 32, 32],
            mlp_widths: vec![128],
            alpha_stopgrad: true,
            eval_sampling: SampleMode::Argmax,
            param_budget: 500_000,
        };
        match kind {
            ModelKind::Aissm => base,
            ModelKind::Cnn => ModelConfig { mlp_widths: vec![160], ..base },
            ModelKind::CnnGru => {
                ModelConfig { mlp_widths: vec![144], d_r: 128, ..base }
            }
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.n_vars * self.n_classes
    }

    /// Confidence trunk mirrors the main trunk at a quarter of the channels.
    pub fn conf_channels(&self) -> Vec<usize> {
        self.conv_channels.iter().map(|&c| (c / 4).max(1)).collect()
    }

    pub fn conf_hidden(&self) -> usize {
        (self.d_r / 2).max(8)
    }

    /// Read overrides for `kind`'s defaults from a key=value config.
    pub fn from_kv(kind: ModelKind, kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = ModelConfig::default_for(kind);
        let mode_str = kv.get_str("eval_sampling", d.eval_sampling.as_str());
        let eval_sampling = SampleMode::from_str(&mode_str).map_err(|_| ConfigError::BadValue {
            key: "eval_sampling".into(),
            value: mode_str.clone(),
            expected: "stochastic|argmax|soft",
        })?;
        Ok(ModelConfig {
            n_vars: kv.get_usize("n_vars", d.n_vars)?,
            n_classes: kv.get_usize("n_classes", d.n_classes)?,
            d_r: kv.get_usize("d_r", d.d_r)?,
            conv_channels: kv.get_usize_list("conv_channels", &d.conv_channels)?,
            mlp_widths: kv.get_usize_list("mlp_widths", &d.mlp_widths)?,
            alpha_stopgrad: kv.get_bool("alpha_stopgrad", d.alpha_stopgrad)?,
            eval_sampling,
            param_budget: kv.get_usize("param_budget", d.param_budget)?,
        })
    }

    pub fn to_pairs(&self, out: &mut BTreeMap<String, String>) {
        out.insert("n_vars".into(), self.n_vars.to_string());
        out.insert("n_classes".into(), self.n_classes.to_string());
        out.insert("d_r".into(), self.d_r.to_string());
        out.insert("conv_channels".into(), usize_list_to_string(&self.conv_channels));
        out.insert("mlp_widths".into(), usize_list_to_string(&self.mlp_widths));
        out.insert("alpha_stopgrad".into(), self.alpha_stopgrad.to_string());
        out.insert("eval_sampling".into(), self.eval_sampling.as_str().into());
        out.insert("param_budget".into(), self.param_budget.to_string());
    }
}

/// Spatial size after one 3x3 stride-2 pad-1 convolution.
fn conv_out(d: usize) -> usize {
    (d - 1) / 2 + 1
}

/// Flattened size after running `channels` stride-2 convs over `w` x `h`.
pub fn trunk_flat_dim(width: usize, height: usize, channels: &[usize]) -> usize {
    let (mut w, mut h) = (width, height);
    for _ in channels {
        w = conv_out(w);
        h = conv_out(h);
    }
    channels.last().copied().unwrap_or(1) * h * w
}

pub struct Model {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub width: usize,
    pub height: usize,
    pub params: ParameterSet,
}

/// Tape handles for every layer of one model, bound once per tape.
pub struct Binding {
    enc_convs: Vec<DenseVals>,
    enc_mlps: Vec<DenseVals>,
    enc_logits: Option<DenseVals>,
    gru: Option<GruVals>,
    prior_fc1: Option<DenseVals>,
    prior_out: Option<DenseVals>,
    head_fc1: DenseVals,
    head_out: DenseVals,
    conf_convs: Vec<DenseVals>,
    conf_fc1: Option<DenseVals>,
    conf_out: Option<DenseVals>,
}

/// Tape handles produced by one frame step.
pub struct StepOut {
    /// Predicted centroid in normalized coordinates, shape `[2]`.
    pub pred: Val,
    /// Predicted observation confidence, shape `[1]` (adaptive model only).
    pub alpha: Option<Val>,
    /// Fused latent sample carried to the next frame, shape `[n_vars*n_classes]`.
    pub s: Option<Val>,
    /// Recurrent state carried to the next frame, shape `[d_r]`.
    pub h: Option<Val>,
}

/// Numeric (off-tape) state carried across window boundaries and into eval.
#[derive(Debug, Clone, PartialEq)]
pub struct Carried {
    pub s: Vec<f64>,
    pub h: Vec<f64>,
}

impl Model {
    pub fn new(
        kind: ModelKind,
        cfg: ModelConfig,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Result<Model, ModelError> {
        if cfg.conv_channels.is_empty() || cfg.mlp_widths.is_empty() {
            return Err(ModelError::BadConfig(
                "conv_channels and mlp_widths must be non-empty".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(ModelError::BadConfig("sensor dimensions must be positive".into()));
        }
        if matches!(kind, ModelKind::Aissm | ModelKind::Cnn)
            && (cfg.n_vars < 2 || cfg.n_classes < 2)
        {
            return Err(ModelError::BadConfig(
                "latent layout needs at least 2 variables and 2 classes".into(),
            ));
        }

        let mut ps = ParameterSet::new();
        // One private stream per layer: insertion order never shifts bits.
        let mut layer = 0u64;
        let mut next_rng = || {
            let r = rng_for(seed, &[tag::INIT, layer]);
            layer += 1;
            r
        };

        let mut c_in = 1;
        for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
            init_conv(&mut ps, &format!("enc.conv{i}"), c_in, c_out, 3, &mut next_rng())?;
            c_in = c_out;
        }
        let mut feat = trunk_flat_dim(width, height, &cfg.conv_channels);
        for (i, &wd) in cfg.mlp_widths.iter().enumerate() {
            init_dense(&mut ps, &format!("enc.mlp{i}"), feat, wd, &mut next_rng())?;
            feat = wd;
        }

        let latent = cfg.latent_dim();
        match kind {
            ModelKind::Aissm => {
                init_dense(&mut ps, "enc.logits", feat, latent, &mut next_rng())?;
                init_gru(&mut ps, "dyn.gru", latent, cfg.d_r, &mut next_rng())?;
                init_dense(&mut ps, "prior.fc1", cfg.d_r, cfg.d_r, &mut next_rng())?;
                init_dense(&mut ps, "prior.out", cfg.d_r, latent, &mut next_rng())?;
                {
                    let b = ps.get_mut("prior.out.b")?.data_mut();
                    for v in 0..cfg.n_vars {
                        b[v * cfg.n_classes] = PRIOR_QUIET_START;
                    }
                }
                init_dense(&mut ps, "head.fc1", latent, HEAD_HIDDEN, &mut next_rng())?;
                init_dense(&mut ps, "head.out", HEAD_HIDDEN, 2, &mut next_rng())?;
                let mut cc_in = 1;
                for (i, &c_out) in cfg.conf_channels().iter().enumerate() {
                    init_conv(&mut ps, &format!("conf.conv{i}"), cc_in, c_out, 3, &mut next_rng())?;
                    cc_in = c_out;
                }
                let conf_flat = trunk_flat_dim(width, height, &cfg.conf_channels());
                init_dense(&mut ps, "conf.fc1", conf_flat, cfg.conf_hidden(), &mut next_rng())?;
                init_dense(&mut ps, "conf.out", cfg.conf_hidden(), 1, &mut next_rng())?;
            }
            ModelKind::Cnn => {
                init_dense(&mut ps, "enc.logits", feat, latent, &mut next_rng())?;
                init_dense(&mut ps, "head.fc1", latent, HEAD_HIDDEN, &mut next_rng())?;
                init_dense(&mut ps, "head.out", HEAD_HIDDEN, 2, &mut next_rng())?;
            }
            ModelKind::CnnGru => {
                init_gru(&mut ps, "dyn.gru", feat, cfg.d_r, &mut next_rng())?;
                init_dense(&mut ps, "head.fc1", cfg.d_r, HEAD_HIDDEN, &mut next_rng())?;
                init_dense(&mut ps, "head.out", HEAD_HIDDEN, 2, &mut next_rng())?;
            }
        }

        Ok(Model { kind, cfg, width, height, params: ps })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Realized parameter count sits within +/-10% of the configured target.
    pub fn budget_ok(&self) -> bool {
        let target = self.cfg.param_budget as f64;
        (self.param_count() as f64 - target).abs() <= 0.10 * target
    }

    /// Parameters trained by the task loss (everything but the confidence net).
    pub fn task_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !is_conf_param(n))
            .collect()
    }

    /// Parameters trained by the confidence loss.
    pub fn conf_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| is_conf_param(n))
            .collect()
    }

    /// Binary event plane as a `[1, H, W]` tensor.
    pub fn frame_tensor(&self, frame: &EventFrame) -> Tensor {
        Tensor::from_vec(vec![1, self.height, self.width], frame.binary_plane())
            .expect("frame plane matches sensor size")
    }

    pub fn zero_carried(&self) -> Carried {
        match self.kind {
            ModelKind::Aissm => Carried {
                s: vec![0.0; self.cfg.latent_dim()],
                h: vec![0.0; self.cfg.d_r],
            },
            ModelKind::Cnn => Carried { s: Vec::new(), h: Vec::new() },
            ModelKind::CnnGru => Carried { s: Vec::new(), h: vec![0.0; self.cfg.d_r] },
        }
    }

    pub fn bind(&self, t: &mut Tape) -> Result<Binding, ModelError> {
        let ps = &self.params;
        let enc_convs = (0..self.cfg.conv_channels.len())
            .map(|i| bind_dense(t, ps, &format!("enc.conv{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let enc_mlps = (0..self.cfg.mlp_widths.len())
            .map(|i| bind_dense(t, ps, &format!("enc.mlp{i}")))
            .collect::<Result<Vec<_>, _>>()?;

        let mut b = Binding {
            enc_convs,
            enc_mlps,
            enc_logits: None,
            gru: None,
            prior_fc1: None,
            prior_out: None,
            head_fc1: bind_dense(t, ps, "head.fc1")?,
            head_out: bind_dense(t, ps, "head.out")?,
            conf_convs: Vec::new(),
            conf_fc1: None,
            conf_out: None,
        };
        match self.kind {
            ModelKind::Aissm => {
                b.enc_logits = Some(bind_dense(t, ps, "enc.logits")?);
                b.gru = Some(bind_gru(t, ps, "dyn.gru")?);
                b.prior_fc1 = Some(bind_dense(t, ps, "prior.fc1")?);
                b.prior_out = Some(bind_dense(t, ps, "prior.out")?);
                b.conf_convs = (0..self.cfg.conf_channels().len())
                    .map(|i| bind_dense(t, ps, &format!("conf.conv{i}")))
                    .collect::<Result<Vec<_>, _>>()?;
                b.conf_fc1 = Some(bind_dense(t, ps, "conf.fc1")?);
                b.conf_out = Some(bind_dense(t, ps, "conf.out")?);
            }
            ModelKind::Cnn => {
                b.enc_logits = Some(bind_dense(t, ps, "enc.logits")?);
            }
            ModelKind::CnnGru => {
                b.gru = Some(bind_gru(t, ps, "dyn.gru")?);
            }
        }
        Ok(b)
    }

    /// Conv trunk + dense stack; GELU after every layer.
    fn trunk(&self, t: &mut Tape, b: &Binding, x: Val) -> Result<Val, ModelError> {
        let mut cur = x;
        for layer in &b.enc_convs {
            cur = t.conv2d(cur, layer.w, layer.b, 2, 1)?;
            cur = t.gelu(cur);
        }
        cur = t.flatten(cur);
        for layer in &b.enc_mlps {
            cur = dense_fwd(t, layer, cur)?;
            cur = t.gelu(cur);
        }
        Ok(cur)
    }

    fn head(&self, t: &mut Tape, b: &Binding, z: Val) -> Result<Val, ModelError> {
        let hid = dense_fwd(t, &b.head_fc1, z)?;
        let hid = t.gelu(hid);
        let out = dense_fwd(t, &b.head_out, hid)?;
        Ok(t.sigmoid(out))
    }

    /// Confidence estimate from the frame alone, shape `[1]` in (0,1).
    pub fn conf_alpha(&self, t: &mut Tape, b: &Binding, x: Val) -> Result<Val, ModelError> {
        let (fc1, out) = match (&b.conf_fc1, &b.conf_out) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ModelError::MissingState { kind: "aissm", what: "confidence net" }),
        };
        let mut cur = x;
        for layer in &b.conf_convs {
            cur = t.conv2d(cur, layer.w, layer.b, 2, 1)?;
            cur = t.gelu(cur);
        }
        cur = t.flatten(cur);
        cur = dense_fwd(t, fc1, cur)?;
        cur = t.gelu(cur);
        cur = dense_fwd(t, out, cur)?;
        Ok(t.sigmoid(cur))
    }

    /// Adaptive step with the blend weight supplied by the caller. The
    /// encoder draws its sample before the prior, so the random stream is
    /// identical whichever branch ends up dominating the blend.
    #[allow(clippy::too_many_arguments)]
    pub fn step_with_alpha<R: Rng>(
        &self,
        t: &mut Tape,
        b: &Binding,
        x: Val,
        s_prev: Val,
        h_prev: Val,
        alpha: Val,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<StepOut, ModelError> {
        let (logits_l, gru, prior_fc1, prior_out) =
            match (&b.enc_logits, &b.gru, &b.prior_fc1, &b.prior_out) {
                (Some(l), Some(g), Some(p1), Some(p2)) => (l, g, p1, p2),
                _ => {
                    return Err(ModelError::MissingState { kind: "aissm", what: "latent layers" })
                }
            };
        let vars = self.cfg.n_vars;
        let classes = self.cfg.n_classes;

        let feat = self.trunk(t, b, x)?;
        let enc_logits = dense_fwd(t, logits_l, feat)?;
        let enc_logits = t.reshape(enc_logits, vec![vars, classes])?;
        let s_q = t.st_sample(enc_logits, mode, rng)?;
        let s_q = t.flatten(s_q);

        let h_new = gru_step(t, gru, s_prev, h_prev)?;
        let prior_hid = dense_fwd(t, prior_fc1, h_new)?;
        let prior_hid = t.gelu(prior_hid);
        let prior_logits = dense_fwd(t, prior_out, prior_hid)?;
        let prior_logits = t.reshape(prior_logits, vec![vars, classes])?;
        let s_p = t.st_sample(prior_logits, mode, rng)?;
        let s_p = t.flatten(s_p);

        let fused = t.convex_blend(alpha, s_q, s_p, self.cfg.alpha_stopgrad)?;
        let pred = self.head(t, b, fused)?;
        Ok(StepOut { pred, alpha: Some(alpha), s: Some(fused), h: Some(h_new) })
    }

    /// One frame of the model on an existing tape. `s_prev`/`h_prev` carry
    /// the state for the recurrent variants and are ignored by `Cnn`.
    pub fn step<R: Rng>(
        &self,
        t: &mut Tape,
        b: &Binding,
        x: Val,
        s_prev: Option<Val>,
        h_prev: Option<Val>,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<StepOut, ModelError> {
        match self.kind {
            ModelKind::Aissm => {
                let s_prev = s_prev
                    .ok_or(ModelError::MissingState { kind: "aissm", what: "latent state" })?;
                let h_prev = h_prev
                    .ok_or(ModelError::MissingState { kind: "aissm", what: "recurrent state" })?;
                let alpha = self.conf_alpha(t, b, x)?;
                self.step_with_alpha(t, b, x, s_prev, h_prev, alpha, mode, rng)
            }
            ModelKind::Cnn => {
                let logits_l = b.enc_logits.as_ref().ok_or(ModelError::MissingState {
                    kind: "cnn",
                    what: "latent layers",
                })?;
                let feat = self.trunk(t, b, x)?;
                let logits = dense_fwd(t, logits_l, feat)?;
                let logits = t.reshape(logits, vec![self.cfg.n_vars, self.cfg.n_classes])?;
                let s = t.st_sample(logits, mode, rng)?;
                let s = t.flatten(s);
                let pred = self.head(t, b, s)?;
                Ok(StepOut { pred, alpha: None, s: None, h: None })
            }
            ModelKind::CnnGru => {
                let gru = b.gru.as_ref().ok_or(ModelError::MissingState {
                    kind: "cnn_gru",
                    what: "recurrent layers",
                })?;
                let h_prev = h_prev.ok_or(ModelError::MissingState {
                    kind: "cnn_gru",
                    what: "recurrent state",
                })?;
                let feat = self.trunk(t, b, x)?;
                let h_new = gru_step(t, gru, feat, h_prev)?;
                let pred = self.head(t, b, h_new)?;
                Ok(StepOut { pred, alpha: None, s: None, h: Some(h_new) })
            }
        }
    }

    /// Run one frame on a private tape, carrying numeric state. Returns the
    /// predicted centroid, the confidence (when the model has one), and the
    /// state to feed the next frame.
    pub fn infer_frame<R: Rng>(
        &self,
        frame: &EventFrame,
        carried: &Carried,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<((f64, f64), Option<f64>, Carried), ModelError> {
        let mut t = Tape::new();
        let b = self.bind(&mut t)?;
        let x = t.constant(vec![1, self.height, self.width], frame.binary_plane());
        let s_prev = (!carried.s.is_empty())
            .then(|| t.constant(vec![carried.s.len()], carried.s.clone()));
        let h_prev = (!carried.h.is_empty())
            .then(|| t.constant(vec![carried.h.len()], carried.h.clone()));
        let out = self.step(&mut t, &b, x, s_prev, h_prev, mode, rng)?;
        let pred = t.value(out.pred);
        let alpha = out.alpha.map(|a| t.value(a)[0]);
        let next = Carried {
            s: out.s.map(|v| t.value(v).to_vec()).unwrap_or_default(),
            h: out.h.map(|v| t.value(v).to_vec()).unwrap_or_default(),
        };
        Ok(((pred[0], pred[1]), alpha, next))
    }
}

pub fn is_conf_param(name: &str) -> bool {
    name.starts_with("conf.")
}

/// Finite-difference check of the fully assembled model: two chained frames
/// of a tiny `Aissm` in `Soft` mode with the blend weight trainable, task and
/// confidence losses summed into one scalar, so every sub-network (trunk,
/// encoder, GRU, prior, head, confidence) is exercised in one graph.
pub fn assembled_gradcheck(
    seed: u64,
    gcfg: &crate::gradcheck::GradCheckConfig,
) -> Result<crate::gradcheck::GradCheckReport, ModelError> {
    use crate::gradcheck::{grad_check, GradCheckError};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let cfg = ModelConfig {
        n_vars: 2,
        n_classes: 3,
        d_r: 4,
        conv_channels: vec![2, 3],
        mlp_widths: vec![5],
        alpha_stopgrad: false,
        ..ModelConfig::default_for(ModelKind::Aissm)
    };
    let (width, height) = (8usize, 6usize);
    let model = Model::new(ModelKind::Aissm, cfg, width, height, seed)?;

    let mut frame_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut frames = Vec::new();
    for _ in 0..2 {
        let mut f = EventFrame::empty(width, height, 0, 1000);
        for _ in 0..(width * height / 3) {
            let x = frame_rng.random_range(0..width) as u16;
            let y = frame_rng.random_range(0..height) as u16;
            f.bump(x, y);
        }
        frames.push(f);
    }

    let latent = model.cfg.latent_dim();
    let d_r = model.cfg.d_r;
    let kind = model.kind;
    let cfg = model.cfg.clone();
    let two_frame_loss = |ps: &ParameterSet| -> Result<(f64, crate::tape::GradientMap), ModelError> {
        let m = Model { kind, cfg: cfg.clone(), width, height, params: ps.clone() };
        let mut t = Tape::new();
        let b = m.bind(&mut t)?;
        let mut s = t.constant(vec![latent], vec![0.0; latent]);
        let mut h = t.constant(vec![d_r], vec![0.0; d_r]);
        let mut losses = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for frame in &frames {
            let x = t.constant(vec![1, height, width], frame.binary_plane());
            let out = m.step(&mut t, &b, x, Some(s), Some(h), SampleMode::Soft, &mut r)?;
            losses.push(t.huber_sum(out.pred, &[0.31, 0.62], 1.0)?);
            let a_lbl = t.constant(vec![1], vec![0.4]);
            let d = t.sub(out.alpha.unwrap(), a_lbl)?;
            losses.push(t.mul(d, d)?);
            s = out.s.unwrap();
            h = out.h.unwrap();
        }
        let total = t.concat(&losses);
        let root = t.sum(total);
        let loss = t.value(root)[0];
        let grads = t.backward(root)?;
        Ok((loss, t.param_grads(&grads)))
    };

    let (_, analytic) = two_frame_loss(&model.params)?;
    let report = grad_check(
        |ps| two_frame_loss(ps).map(|(l, _)| l),
        &model.params,
        &analytic,
        gcfg,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    )
    .map_err(|e| match e {
        GradCheckError::Param(t) => ModelError::Tensor(t),
        GradCheckError::Eval(m) => ModelError::BadConfig(m),
    })?;
    Ok(report)
}
