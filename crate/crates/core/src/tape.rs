//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward op appends one node holding its output buffer and a backward
//! closure. `backward` walks the tape once in reverse, accumulating vector-
//! Jacobian products into a separate gradient store, so several backward
//! passes (e.g. task loss and confidence loss) can run over one tape without
//! contaminating each other. All reductions run in a fixed sequential order:
//! identical inputs produce bit-identical outputs and gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` bound to this tape twice")]
    DuplicateBind(String),
}

fn shape_err(op: &'static str, msg: String) -> TapeError {
    TapeError::Shape { op, msg }
}

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// How a categorical straight-through sample is drawn in the forward pass.
///
/// `Soft` skips sampling and passes the softmax probabilities through; the
/// backward map is identical in all three modes, so `Soft` is the mode whose
/// forward function finite differences can probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Argmax,
    Soft,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Stochastic => "stochastic",
            SampleMode::Argmax => "argmax",
            SampleMode::Soft => "soft",
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stochastic" => Ok(SampleMode::Stochastic),
            "argmax" => Ok(SampleMode::Argmax),
            "soft" => Ok(SampleMode::Soft),
            other => Err(format!(
                "unknown sampling mode `{other}` (expected stochastic|argmax|soft)"
            )),
        }
    }
}

struct BackIn<'a> {
    nodes: &'a [Node],
    gout: &'a [f64],
}

impl<'a> BackIn<'a> {
    fn val(&self, v: Val) -> &'a [f64] {
        &self.nodes[v.0].data
    }
    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs
    }
}

type BackFn = Box<dyn Fn(&BackIn, &mut GradStore)>;

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    back: Option<BackFn>,
    /// True when this node is a parameter or transitively depends on one.
    needs: bool,
}

/// Per-node gradient buffers for one backward pass.
pub struct GradStore {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn buf(&mut self, v: Val, len: usize) -> &mut [f64] {
        self.slots[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }
}

/// Gradients keyed by parameter name, in name order.
pub type GradientMap = BTreeMap<String, Vec<f64>>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, Val)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs: bool,
        back: Option<BackFn>,
    ) -> Val {
        let back = if needs { back } else { None };
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            back,
            needs,
        });
        Val(self.nodes.len() - 1)
    }

    /// Non-trainable input; aliases the tensor's storage.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.storage(),
            back: None,
            needs: false,
        });
        Val(self.nodes.len() - 1)
    }

    /// Trainable input; gradients land under `name` in `param_grads`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Val, TapeError> {
        if self.bound.iter().any(|(n, _)| n == name) {
            return Err(TapeError::DuplicateBind(name.to_string()));
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.storage(),
            back: None,
            needs: true,
        });
        let v = Val(self.nodes.len() - 1);
        self.bound.push((name.to_string(), v));
        Ok(v)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Val {
        self.push(shape, data, false, None)
    }

    fn binary_shape_check(
        &self,
        op: &'static str,
        a: Val,
        b: Val,
    ) -> Result<(), TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val, TapeError> {
        self.binary_shape_check("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.nodes[a.0].needs || self.nodes[b.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        Ok(self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                for v in [a, b] {
                    if bi.needs(v) {
                        let g = gs.buf(v, n);
                        for (gi, go) in g.iter_mut().zip(bi.gout) {
                            *gi += go;
                        }
                    }
                }
            })),
        ))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val, TapeError> {
        self.binary_shape_check("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.nodes[a.0].needs || self.nodes[b.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        Ok(self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += go;
                    }
                }
                if bi.needs(b) {
                    let g = gs.buf(b, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi -= go;
                    }
                }
            })),
        ))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val, TapeError> {
        self.binary_shape_check("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.nodes[a.0].needs || self.nodes[b.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        Ok(self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let bv = bi.val(b);
                    let g = gs.buf(a, n);
                    for i in 0..n {
                        g[i] += bv[i] * bi.gout[i];
                    }
                }
                if bi.needs(b) {
                    let av = bi.val(a);
                    let g = gs.buf(b, n);
                    for i in 0..n {
                        g[i] += av[i] * bi.gout[i];
                    }
                }
            })),
        ))
    }

    /// Elementwise `k * a + c` with constant coefficients.
    pub fn scale_shift(&mut self, a: Val, k: f64, c: f64) -> Val {
        let out: Vec<f64> = self.value(a).iter().map(|x| k * x + c).collect();
        let needs = self.nodes[a.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += k * go;
                    }
                }
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let out: Vec<f64> = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let needs = self.nodes[a.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        let y = out.clone();
        self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for i in 0..n {
                        g[i] += y[i] * (1.0 - y[i]) * bi.gout[i];
                    }
                }
            })),
        )
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let needs = self.nodes[a.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        let y = out.clone();
        self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for i in 0..n {
                        g[i] += (1.0 - y[i] * y[i]) * bi.gout[i];
                    }
                }
            })),
        )
    }

    /// Smooth GELU (tanh form); kink-free, so finite differences stay clean.
    pub fn gelu(&mut self, a: Val) -> Val {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let needs = self.nodes[a.0].needs;
        let shape = self.shape(a).to_vec();
        let n = out.len();
        let x0: Vec<f64> = self.value(a).to_vec();
        self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for i in 0..n {
                        g[i] += dgelu(x0[i]) * bi.gout[i];
                    }
                }
            })),
        )
    }

    /// `w[m,n] · x[n] -> [m]` without bias.
    pub fn matvec(&mut self, w: Val, x: Val) -> Result<Val, TapeError> {
        let (m, n) = match *self.shape(w) {
            [m, n] => (m, n),
            ref s => {
                return Err(shape_err("matvec", format!("weight must be 2-D, got {s:?}")))
            }
        };
        if self.value(x).len() != n {
            return Err(shape_err(
                "matvec",
                format!("weight is [{m},{n}] but input has {} elements", self.value(x).len()),
            ));
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out = vec![0.0; m];
        for (o, row) in out.iter_mut().zip(wv.chunks_exact(n)) {
            *o = dot(row, xv);
        }
        let needs = self.nodes[w.0].needs || self.nodes[x.0].needs;
        Ok(self.push(
            vec![m],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                matvec_backward(bi, gs, w, x, m, n);
            })),
        ))
    }

    /// `w[m,n] · x[n] + b[m]`.
    pub fn affine(&mut self, x: Val, w: Val, b: Val) -> Result<Val, TapeError> {
        let (m, n) = match *self.shape(w) {
            [m, n] => (m, n),
            ref s => {
                return Err(shape_err("affine", format!("weight must be 2-D, got {s:?}")))
            }
        };
        if self.value(x).len() != n {
            return Err(shape_err(
                "affine",
                format!("weight is [{m},{n}] but input has {} elements", self.value(x).len()),
            ));
        }
        if self.value(b).len() != m {
            return Err(shape_err(
                "affine",
                format!("weight is [{m},{n}] but bias has {} elements", self.value(b).len()),
            ));
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let bv = self.value(b);
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = dot(&wv[i * n..(i + 1) * n], xv) + bv[i];
        }
        let needs =
            self.nodes[w.0].needs || self.nodes[x.0].needs || self.nodes[b.0].needs;
        Ok(self.push(
            vec![m],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(b) {
                    let g = gs.buf(b, m);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += go;
                    }
                }
                matvec_backward(bi, gs, w, x, m, n);
            })),
        ))
    }

    /// 2-D convolution over `x[c_in,h,w]` with kernel `w[c_out,c_in,k,k]`,
    /// zero padding `pad` on all sides and stride `stride`.
    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
        pad: usize,
    ) -> Result<Val, TapeError> {
        let (ci, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => {
                return Err(shape_err("conv2d", format!("input must be 3-D, got {s:?}")))
            }
        };
        let (co, wci, kh, kw) = match *self.shape(w) {
            [co, wci, kh, kw] => (co, wci, kh, kw),
            ref s => {
                return Err(shape_err("conv2d", format!("kernel must be 4-D, got {s:?}")))
            }
        };
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        if wci != ci {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {wci} input channels, input has {ci}"),
            ));
        }
        if self.value(b).len() != co {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} elements, kernel has {co} output channels", self.value(b).len()),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let geom = ConvGeom { ci, h, wd, co, k, stride, pad, ho, wo };
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let needs =
            self.nodes[x.0].needs || self.nodes[w.0].needs || self.nodes[b.0].needs;
        Ok(self.push(
            vec![co, ho, wo],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                conv2d_backward(bi, gs, x, w, b, &geom);
            })),
        ))
    }

    /// Reinterpret under a new shape with the same element count; values and
    /// gradients pass through untouched.
    pub fn reshape(&mut self, a: Val, shape: Vec<usize>) -> Result<Val, TapeError> {
        let n = self.value(a).len();
        let expected: usize = shape.iter().product();
        if expected != n {
            return Err(shape_err(
                "reshape",
                format!("cannot view {n} elements as {shape:?}"),
            ));
        }
        let out = self.value(a).to_vec();
        let needs = self.nodes[a.0].needs;
        Ok(self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += go;
                    }
                }
            })),
        ))
    }

    /// Reshape to 1-D; values pass through untouched.
    pub fn flatten(&mut self, a: Val) -> Val {
        let out = self.value(a).to_vec();
        let needs = self.nodes[a.0].needs;
        let n = out.len();
        self.push(
            vec![n],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let g = gs.buf(a, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += go;
                    }
                }
            })),
        )
    }

    /// Concatenate 1-D values in argument order.
    pub fn concat(&mut self, parts: &[Val]) -> Val {
        let mut out = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &p in parts {
            let v = self.value(p);
            spans.push((p, out.len(), v.len()));
            out.extend_from_slice(v);
            needs |= self.nodes[p.0].needs;
        }
        let n = out.len();
        self.push(
            vec![n],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                for &(p, start, len) in &spans {
                    if bi.needs(p) {
                        let g = gs.buf(p, len);
                        for (gi, go) in g.iter_mut().zip(&bi.gout[start..start + len]) {
                            *gi += go;
                        }
                    }
                }
            })),
        )
    }

    /// Row-wise softmax over `a[rows, cols]`.
    pub fn softmax_rows(&mut self, a: Val) -> Result<Val, TapeError> {
        let (rows, cols) = match *self.shape(a) {
            [r, c] => (r, c),
            ref s => {
                return Err(shape_err("softmax_rows", format!("input must be 2-D, got {s:?}")))
            }
        };
        let out = softmax_rows_forward(self.value(a), rows, cols);
        let needs = self.nodes[a.0].needs;
        let probs = out.clone();
        Ok(self.push(
            vec![rows, cols],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    softmax_rows_backward(&probs, bi.gout, gs.buf(a, rows * cols), rows, cols);
                }
            })),
        ))
    }

    /// Straight-through categorical sample from row-wise logits.
    ///
    /// Forward emits a one-hot row per variable (`Stochastic` draws from the
    /// softmax, `Argmax` takes its mode, `Soft` passes the probabilities
    /// through). Backward is exactly the softmax vector-Jacobian product in
    /// every mode, so the hard sample trains as if it were the softmax.
    pub fn st_sample<R: Rng>(
        &mut self,
        logits: Val,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<Val, TapeError> {
        let (rows, cols) = match *self.shape(logits) {
            [r, c] => (r, c),
            ref s => {
                return Err(shape_err("st_sample", format!("logits must be 2-D, got {s:?}")))
            }
        };
        if cols == 0 {
            return Err(shape_err("st_sample", "zero classes".into()));
        }
        let probs = softmax_rows_forward(self.value(logits), rows, cols);
        let mut out = vec![0.0; rows * cols];
        match mode {
            SampleMode::Soft => out.copy_from_slice(&probs),
            SampleMode::Argmax => {
                for r in 0..rows {
                    let row = &probs[r * cols..(r + 1) * cols];
                    let mut best = 0;
                    for (j, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = j;
                        }
                    }
                    out[r * cols + best] = 1.0;
                }
            }
            SampleMode::Stochastic => {
                // One uniform draw per row keeps the RNG stream length
                // independent of the probabilities.
                for r in 0..rows {
                    let u: f64 = rng.random();
                    let row = &probs[r * cols..(r + 1) * cols];
                    let mut cum = 0.0;
                    let mut chosen = cols - 1;
                    for (j, &p) in row.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            chosen = j;
                            break;
                        }
                    }
                    out[r * cols + chosen] = 1.0;
                }
            }
        }
        let needs = self.nodes[logits.0].needs;
        Ok(self.push(
            vec![rows, cols],
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(logits) {
                    softmax_rows_backward(&probs, bi.gout, gs.buf(logits, rows * cols), rows, cols);
                }
            })),
        ))
    }

    /// `alpha * q + (1 - alpha) * p` with scalar `alpha` broadcast over `q`/`p`.
    ///
    /// With `detach_alpha` the blend weight is treated as a constant: no
    /// gradient flows from this node into `alpha`'s producers.
    pub fn convex_blend(
        &mut self,
        alpha: Val,
        q: Val,
        p: Val,
        detach_alpha: bool,
    ) -> Result<Val, TapeError> {
        self.binary_shape_check("convex_blend", q, p)?;
        if self.value(alpha).len() != 1 {
            return Err(shape_err(
                "convex_blend",
                format!("alpha must be a scalar, got {:?}", self.shape(alpha)),
            ));
        }
        let a = self.value(alpha)[0];
        let out: Vec<f64> = self
            .value(q)
            .iter()
            .zip(self.value(p))
            .map(|(qq, pp)| a * qq + (1.0 - a) * pp)
            .collect();
        let n = out.len();
        let needs = self.nodes[q.0].needs
            || self.nodes[p.0].needs
            || (!detach_alpha && self.nodes[alpha.0].needs);
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            shape,
            out,
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(q) {
                    let g = gs.buf(q, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += a * go;
                    }
                }
                if bi.needs(p) {
                    let g = gs.buf(p, n);
                    for (gi, go) in g.iter_mut().zip(bi.gout) {
                        *gi += (1.0 - a) * go;
                    }
                }
                if !detach_alpha && bi.needs(alpha) {
                    let qv = bi.val(q);
                    let pv = bi.val(p);
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += (qv[i] - pv[i]) * bi.gout[i];
                    }
                    gs.buf(alpha, 1)[0] += acc;
                }
            })),
        ))
    }

    /// Huber penalty `sum_i 0.5*min(|r|,d)^2 + d*(|r| - min(|r|,d))` with
    /// `r = pred - target`, reduced by summation to a scalar.
    pub fn huber_sum(
        &mut self,
        pred: Val,
        target: &[f64],
        delta: f64,
    ) -> Result<Val, TapeError> {
        if self.value(pred).len() != target.len() {
            return Err(shape_err(
                "huber_sum",
                format!("prediction has {} elements, target has {}", self.value(pred).len(), target.len()),
            ));
        }
        if !(delta > 0.0) {
            return Err(shape_err("huber_sum", format!("delta must be positive, got {delta}")));
        }
        let mut total = 0.0;
        for (p, y) in self.value(pred).iter().zip(target) {
            let r = (p - y).abs();
            let m = r.min(delta);
            total += 0.5 * m * m + delta * (r - m);
        }
        let needs = self.nodes[pred.0].needs;
        let y0 = target.to_vec();
        let n = y0.len();
        Ok(self.push(
            vec![1],
            vec![total],
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(pred) {
                    let pv = bi.val(pred);
                    let go = bi.gout[0];
                    let g = gs.buf(pred, n);
                    for i in 0..n {
                        g[i] += (pv[i] - y0[i]).clamp(-delta, delta) * go;
                    }
                }
            })),
        ))
    }

    /// Sum all elements to a scalar.
    pub fn sum(&mut self, a: Val) -> Val {
        let total: f64 = self.value(a).iter().sum();
        let needs = self.nodes[a.0].needs;
        let n = self.value(a).len();
        self.push(
            vec![1],
            vec![total],
            needs,
            Some(Box::new(move |bi, gs| {
                if bi.needs(a) {
                    let go = bi.gout[0];
                    let g = gs.buf(a, n);
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            })),
        )
    }

    /// Reverse sweep from a scalar root. Returns the gradient store for this
    /// pass; the tape itself is untouched, so further passes from other roots
    /// start from a clean slate.
    pub fn backward(&self, root: Val) -> Result<GradStore, TapeError> {
        if self.value(root).len() != 1 {
            return Err(TapeError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut gs = GradStore {
            slots: vec![None; self.nodes.len()],
        };
        gs.slots[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = gs.slots[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                let bi = BackIn {
                    nodes: &self.nodes,
                    gout: &g,
                };
                back(&bi, &mut gs);
            }
            gs.slots[i] = Some(g);
        }
        Ok(gs)
    }

    /// Gradients of bound parameters from one backward pass, by name.
    /// Parameters the root does not reach are absent.
    pub fn param_grads(&self, gs: &GradStore) -> GradientMap {
        let mut out = GradientMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = gs.grad(*v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Numerically stable logistic function, shared with confidence labeling.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn dgelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec_backward(bi: &BackIn, gs: &mut GradStore, w: Val, x: Val, m: usize, n: usize) {
    if bi.needs(w) {
        let xv = bi.val(x);
        let gw = gs.buf(w, m * n);
        for i in 0..m {
            let go = bi.gout[i];
            if go != 0.0 {
                let row = &mut gw[i * n..(i + 1) * n];
                for (gj, xj) in row.iter_mut().zip(xv) {
                    *gj += go * xj;
                }
            }
        }
    }
    if bi.needs(x) {
        let wv = bi.val(w);
        let gx = gs.buf(x, n);
        for i in 0..m {
            let go = bi.gout[i];
            if go != 0.0 {
                let row = &wv[i * n..(i + 1) * n];
                for (gj, wj) in gx.iter_mut().zip(row) {
                    *gj += go * wj;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.co * g.ho * g.wo];
    for oc in 0..g.co {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = b[oc];
                for ic in 0..g.ci {
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = (ic * g.h + iy as usize) * g.wd;
                        let wrow = ((oc * g.ci + ic) * g.k + ky) * g.k;
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.wd as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * w[wrow + kx];
                        }
                    }
                }
                out[(oc * g.ho + oy) * g.wo + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(bi: &BackIn, gs: &mut GradStore, x: Val, w: Val, b: Val, g: &ConvGeom) {
    let gout = bi.gout;
    if bi.needs(b) {
        let gb = gs.buf(b, g.co);
        for oc in 0..g.co {
            let plane = &gout[oc * g.ho * g.wo..(oc + 1) * g.ho * g.wo];
            gb[oc] += plane.iter().sum::<f64>();
        }
    }
    if bi.needs(w) {
        let xv = bi.val(x);
        let gw = gs.buf(w, g.co * g.ci * g.k * g.k);
        for oc in 0..g.co {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = gout[(oc * g.ho + oy) * g.wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ic in 0..g.ci {
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = (ic * g.h + iy as usize) * g.wd;
                            let wrow = ((oc * g.ci + ic) * g.k + ky) * g.k;
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.wd as isize {
                                    continue;
                                }
                                gw[wrow + kx] += go * xv[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    if bi.needs(x) {
        let wv = bi.val(w);
        let gx = gs.buf(x, g.ci * g.h * g.wd);
        for oc in 0..g.co {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = gout[(oc * g.ho + oy) * g.wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ic in 0..g.ci {
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = (ic * g.h + iy as usize) * g.wd;
                            let wrow = ((oc * g.ci + ic) * g.k + ky) * g.k;
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.wd as isize {
                                    continue;
                                }
                                gx[xrow + ix as usize] += go * wv[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_rows_forward(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    out
}

fn softmax_rows_backward(probs: &[f64], gout: &[f64], gx: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let p = &probs[r * cols..(r + 1) * cols];
        let g = &gout[r * cols..(r + 1) * cols];
        let inner = dot(g, p);
        let gr = &mut gx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            gr[j] += p[j] * (g[j] - inner);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn p(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn scale_shift_matches_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.scale_shift(x, 0.5, 1.0);
        assert_eq!(tape.value(y), &[1.5, 2.0, 2.5]);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![0.0, 40.0, -40.0]));
        let y = tape.sigmoid(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 1.0 - 1e-12 && v[1] <= 1.0);
        assert!(v[2] < 1e-12 && v[2] >= 0.0);
    }

    #[test]
    fn softmax_handles_log_odds_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2], vec![0.0, (2.0f64).ln()]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huber_value_and_gradient_match_closed_form() {
        let mut tape = Tape::new();
        let pred = tape.param("pred", &p(vec![2], vec![0.0, 3.0])).unwrap();
        let loss = tape.huber_sum(pred, &[0.5, 1.0], 1.0).unwrap();
        assert_eq!(tape.value(loss), &[1.625]);
        let gs = tape.backward(loss).unwrap();
        assert_eq!(gs.grad(pred).unwrap(), &[-0.5, 1.0]);
    }

    #[test]
    fn matvec_and_affine_agree_with_hand_computation() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]));
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 4.0]));
        let b = tape.leaf(&t(vec![2], vec![10.0, -10.0]));
        let mv = tape.matvec(w, x).unwrap();
        assert_eq!(tape.value(mv), &[-3.0, 6.0]);
        let af = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(af), &[7.0, -4.0]);
    }

    #[test]
    fn linear_maps_scale_exactly_with_power_of_two_inputs() {
        // With zero bias, conv2d and affine are linear in the input; scaling
        // the input by 2 scales every output bit-exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv: Vec<f64> = (0..2 * 6 * 5).map(|_| rng.random::<f64>() - 0.5).collect();
        let wv: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.random::<f64>() - 0.5).collect();

        let mut tape = Tape::new();
        let x1 = tape.leaf(&t(vec![2, 6, 5], xv.clone()));
        let x2v: Vec<f64> = xv.iter().map(|v| 2.0 * v).collect();
        let x2 = tape.leaf(&t(vec![2, 6, 5], x2v));
        let w = tape.leaf(&t(vec![3, 2, 3, 3], wv));
        let zb = tape.leaf(&t(vec![3], vec![0.0; 3]));
        let y1 = tape.conv2d(x1, w, zb, 2, 1).unwrap();
        let y2 = tape.conv2d(x2, w, zb, 2, 1).unwrap();
        let doubled: Vec<f64> = tape.value(y1).iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(y2), doubled.as_slice());
    }

    #[test]
    fn conv2d_output_shape_follows_stride_and_padding() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 60, 80], vec![0.0; 60 * 80]));
        let w = tape.leaf(&t(vec![4, 1, 3, 3], vec![0.0; 4 * 9]));
        let b = tape.leaf(&t(vec![4], vec![0.0; 4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 30, 40]);
    }

    #[test]
    fn conv2d_rejects_mismatched_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 4, 4], vec![0.0; 32]));
        let w = tape.leaf(&t(vec![1, 3, 3, 3], vec![0.0; 27]));
        let b = tape.leaf(&t(vec![1], vec![0.0]));
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn straight_through_argmax_emits_one_hot_with_softmax_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let logits = tape
            .param("z", &p(vec![2, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 3.0]))
            .unwrap();
        let s = tape.st_sample(logits, SampleMode::Argmax, &mut rng).unwrap();
        assert_eq!(tape.value(s), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

        // Backward must equal the softmax VJP for the same upstream gradient.
        let probe = tape.leaf(&t(vec![2, 3], vec![0.3, -1.2, 0.7, 0.05, 2.0, -0.4]));
        let weighted = tape.mul(s, probe).unwrap();
        let loss = tape.sum(weighted);
        let gs = tape.backward(loss).unwrap();
        let got = gs.grad(logits).unwrap().to_vec();

        let mut tape2 = Tape::new();
        let logits2 = tape2
            .param("z", &p(vec![2, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 3.0]))
            .unwrap();
        let sm = tape2.softmax_rows(logits2).unwrap();
        let probe2 = tape2.leaf(&t(vec![2, 3], vec![0.3, -1.2, 0.7, 0.05, 2.0, -0.4]));
        let weighted2 = tape2.mul(sm, probe2).unwrap();
        let loss2 = tape2.sum(weighted2);
        let gs2 = tape2.backward(loss2).unwrap();
        let want = gs2.grad(logits2).unwrap();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12, "ST backward deviates: {a} vs {b}");
        }
    }

    #[test]
    fn stochastic_sampling_is_reproducible_and_consumes_fixed_draws() {
        let logits = p(vec![4, 5], (0..20).map(|i| (i as f64) * 0.3 - 2.0).collect());
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let z = tape.param("z", &logits).unwrap();
            let s = tape.st_sample(z, SampleMode::Stochastic, &mut rng).unwrap();
            (tape.value(s).to_vec(), rng.random::<u64>())
        };
        let (a1, r1) = run(42);
        let (a2, r2) = run(42);
        assert_eq!(a1, a2);
        assert_eq!(r1, r2); // same number of draws consumed
        for row in a1.chunks(5) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
        }
    }

    #[test]
    fn convex_blend_extremes_return_the_other_branch_bitwise() {
        let qv = vec![0.25, -3.5, 1.0, 0.0];
        let pv = vec![7.0, 2.0, -1.5, 9.25];
        let mut tape = Tape::new();
        let q = tape.leaf(&t(vec![4], qv.clone()));
        let p_ = tape.leaf(&t(vec![4], pv.clone()));
        let a0 = tape.leaf(&Tensor::scalar(0.0));
        let a1 = tape.leaf(&Tensor::scalar(1.0));
        let b0 = tape.convex_blend(a0, q, p_, false).unwrap();
        let b1 = tape.convex_blend(a1, q, p_, false).unwrap();
        assert_eq!(tape.value(b0), pv.as_slice());
        assert_eq!(tape.value(b1), qv.as_slice());
    }

    #[test]
    fn detached_alpha_gets_no_gradient_through_blend() {
        let mut tape = Tape::new();
        let alpha = tape.param("alpha", &p(vec![1], vec![0.3])).unwrap();
        let q = tape.param("q", &p(vec![2], vec![1.0, 2.0])).unwrap();
        let pp = tape.leaf(&t(vec![2], vec![5.0, -1.0]));
        let blend = tape.convex_blend(alpha, q, pp, true).unwrap();
        let loss = tape.sum(blend);
        let gs = tape.backward(loss).unwrap();
        assert!(gs.grad(alpha).is_none());
        assert_eq!(gs.grad(q).unwrap(), &[0.3, 0.3]);
    }

    #[test]
    fn two_backward_passes_are_isolated() {
        let mut tape = Tape::new();
        let a = tape.param("a", &p(vec![1], vec![2.0])).unwrap();
        let b = tape.param("b", &p(vec![1], vec![3.0])).unwrap();
        let la = tape.mul(a, a).unwrap(); // a^2
        let loss_a = tape.sum(la);
        let lb = tape.mul(b, b).unwrap(); // b^2
        let loss_b = tape.sum(lb);

        let gs_a = tape.backward(loss_a).unwrap();
        assert_eq!(gs_a.grad(a).unwrap(), &[4.0]);
        assert!(gs_a.grad(b).is_none());

        let gs_b = tape.backward(loss_b).unwrap();
        assert_eq!(gs_b.grad(b).unwrap(), &[6.0]);
        assert!(gs_b.grad(a).is_none());
    }

    #[test]
    fn fanout_accumulates_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param("x", &p(vec![1], vec![3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum(y);
        let gs = tape.backward(loss).unwrap();
        assert_eq!(gs.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TapeError::NonScalarRoot(_))));
    }

    #[test]
    fn binding_same_parameter_twice_fails() {
        let mut tape = Tape::new();
        let w = p(vec![1], vec![0.0]);
        tape.param("w", &w).unwrap();
        assert!(matches!(tape.param("w", &w), Err(TapeError::DuplicateBind(_))));
    }
}
