//! Central-difference verification of tape gradients.
//!
//! The checker never looks at how a gradient was produced: it re-evaluates
//! the scalar loss at `x ± eps` per probed element and compares the slope
//! against the analytic value with error `|ad - fd| / max(1, |ad|, |fd|)`.
//! Loss closures must be self-contained — any randomness inside must be
//! seeded per call, otherwise the determinism probe flags them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{GradientMap, SampleMode, Tape};
use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed relative error per probed element.
    pub tolerance: f64,
    /// Elements probed per tensor; tensors at or under this size are probed
    /// exhaustively, larger ones get a random subset.
    pub max_probes_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_probes_per_param: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    /// Flat element index where the worst error occurred.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    /// Two evaluations at the base point produced bit-identical losses.
    pub deterministic: bool,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("loss evaluation failed: {0}")]
    Eval(String),
    #[error("parameter error: {0}")]
    Param(#[from] crate::tensor::TensorError),
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Check analytic gradients of `f` over every parameter in `params`.
///
/// Parameters missing from `analytic` are treated as all-zero gradients, so
/// an op that silently drops a dependency still fails the check.
pub fn grad_check<F, E>(
    f: F,
    params: &ParameterSet,
    analytic: &GradientMap,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&ParameterSet) -> Result<f64, E>,
    E: std::fmt::Display,
{
    let eval = |ps: &ParameterSet| f(ps).map_err(|e| GradCheckError::Eval(e.to_string()));

    let base_a = eval(params)?;
    let base_b = eval(params)?;
    let deterministic = base_a.to_bits() == base_b.to_bits();

    let mut work = params.clone();
    let mut reports = Vec::new();
    let mut max_rel: f64 = 0.0;

    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let len = params.get(name)?.len();
        let probes: Vec<usize> = if len <= cfg.max_probes_per_param {
            (0..len).collect()
        } else {
            let mut idx: Vec<usize> = rand::seq::index::sample(rng, len, cfg.max_probes_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let zero;
        let ad: &[f64] = match analytic.get(name) {
            Some(g) => g,
            None => {
                zero = vec![0.0; len];
                &zero
            }
        };

        let mut worst = (0.0f64, 0usize);
        for &i in &probes {
            let x0 = params.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = x0 + cfg.epsilon;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = x0 - cfg.epsilon;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * cfg.epsilon);
            let e = rel_err(ad[i], fd);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        max_rel = max_rel.max(worst.0);
        reports.push(ParamCheck {
            name: name.clone(),
            probes: probes.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }

    let pass = deterministic && max_rel <= cfg.tolerance;
    Ok(GradCheckReport {
        params: reports,
        max_rel_err: max_rel,
        deterministic,
        tolerance: cfg.tolerance,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Per-op gradient suite
// ---------------------------------------------------------------------------

/// One differentiable op instantiated with random inputs: a parameter set,
/// a scalar loss closure over it, and the tape's analytic gradients at the
/// base point.
pub struct OpInstance {
    pub params: ParameterSet,
    pub loss: Box<dyn Fn(&ParameterSet) -> Result<f64, String>>,
    pub analytic: GradientMap,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn param(ps: &mut ParameterSet, name: &str, shape: Vec<usize>, data: Vec<f64>) {
    ps.insert(name, Tensor::param(shape, data).unwrap()).unwrap();
}

/// Loss = sum(op_output ⊙ probe) with a fixed random probe, so every output
/// element contributes a distinct weight and per-element errors can't cancel.
fn probed_loss(
    build: impl Fn(&mut Tape, &ParameterSet) -> Result<crate::tape::Val, String> + 'static,
    probe: Vec<f64>,
) -> Box<dyn Fn(&ParameterSet) -> Result<f64, String>> {
    Box::new(move |ps: &ParameterSet| {
        let mut tape = Tape::new();
        let out = build(&mut tape, ps)?;
        if tape.value(out).len() != probe.len() {
            return Err(format!(
                "probe length {} != output length {}",
                probe.len(),
                tape.value(out).len()
            ));
        }
        let shape = tape.shape(out).to_vec();
        let pr = tape.constant(shape, probe.clone());
        let weighted = tape.mul(out, pr).map_err(|e| e.to_string())?;
        let loss = tape.sum(weighted);
        Ok(tape.value(loss)[0])
    })
}

fn instance(
    rng: &mut ChaCha8Rng,
    params: ParameterSet,
    build: impl Fn(&mut Tape, &ParameterSet) -> Result<crate::tape::Val, String> + Clone + 'static,
) -> OpInstance {
    // Probe needs the output length; run the graph once to measure it.
    let mut tape = Tape::new();
    let out = build(&mut tape, &params).expect("op suite graph must build");
    let out_len = tape.value(out).len();
    let probe = rand_vec(rng, out_len, -1.0, 1.0);

    let loss = probed_loss(build.clone(), probe.clone());

    // Analytic gradients at the base point, from the same graph + probe.
    let mut tape = Tape::new();
    let out = build(&mut tape, &params).unwrap();
    let shape = tape.shape(out).to_vec();
    let pr = tape.constant(shape, probe);
    let weighted = tape.mul(out, pr).unwrap();
    let root = tape.sum(weighted);
    let gs = tape.backward(root).unwrap();
    let analytic = tape.param_grads(&gs);

    OpInstance { params, loss, analytic }
}

/// Every differentiable op with freshly drawn inputs for one seed.
/// Ops with piecewise-constant forward paths (hard sampling) are exercised
/// through their differentiable surrogate (`SampleMode::Soft`); the
/// equivalence of the hard modes' backward map is covered by exact tests.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, OpInstance)> {
    let mut out: Vec<(&'static str, OpInstance)> = Vec::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);

    // add / sub / mul -------------------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "a", vec![6], rand_vec(rng, 6, -2.0, 2.0));
        param(&mut ps, "b", vec![6], rand_vec(rng, 6, -2.0, 2.0));
        out.push((
            "add",
            instance(rng, ps.clone(), |t, ps| {
                let a = t.param("a", ps.get("a").unwrap()).unwrap();
                let b = t.param("b", ps.get("b").unwrap()).unwrap();
                t.add(a, b).map_err(|e| e.to_string())
            }),
        ));
        out.push((
            "sub",
            instance(rng, ps.clone(), |t, ps| {
                let a = t.param("a", ps.get("a").unwrap()).unwrap();
                let b = t.param("b", ps.get("b").unwrap()).unwrap();
                t.sub(a, b).map_err(|e| e.to_string())
            }),
        ));
        out.push((
            "mul",
            instance(rng, ps, |t, ps| {
                let a = t.param("a", ps.get("a").unwrap()).unwrap();
                let b = t.param("b", ps.get("b").unwrap()).unwrap();
                t.mul(a, b).map_err(|e| e.to_string())
            }),
        ));
    }

    // scale_shift -----------------------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "x", vec![5], rand_vec(rng, 5, -2.0, 2.0));
        out.push((
            "scale_shift",
            instance(rng, ps, |t, ps| {
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                Ok(t.scale_shift(x, -1.75, 0.4))
            }),
        ));
    }

    // activations -----------------------------------------------------------
    for (name, op) in [
        ("sigmoid", 0usize),
        ("tanh", 1),
        ("gelu", 2),
    ] {
        let mut ps = ParameterSet::new();
        param(&mut ps, "x", vec![7], rand_vec(rng, 7, -3.0, 3.0));
        out.push((
            name,
            instance(rng, ps, move |t, ps| {
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                Ok(match op {
                    0 => t.sigmoid(x),
                    1 => t.tanh(x),
                    _ => t.gelu(x),
                })
            }),
        ));
    }

    // matvec / affine -------------------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "w", vec![4, 6], rand_vec(rng, 24, -1.0, 1.0));
        param(&mut ps, "x", vec![6], rand_vec(rng, 6, -1.5, 1.5));
        out.push((
            "matvec",
            instance(rng, ps, |t, ps| {
                let w = t.param("w", ps.get("w").unwrap()).unwrap();
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                t.matvec(w, x).map_err(|e| e.to_string())
            }),
        ));
    }
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "w", vec![3, 5], rand_vec(rng, 15, -1.0, 1.0));
        param(&mut ps, "x", vec![5], rand_vec(rng, 5, -1.5, 1.5));
        param(&mut ps, "b", vec![3], rand_vec(rng, 3, -0.5, 0.5));
        out.push((
            "affine",
            instance(rng, ps, |t, ps| {
                let w = t.param("w", ps.get("w").unwrap()).unwrap();
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                let b = t.param("b", ps.get("b").unwrap()).unwrap();
                t.affine(x, w, b).map_err(|e| e.to_string())
            }),
        ));
    }

    // conv2d: strided+padded and dense+unpadded -----------------------------
    for (name, ci, h, w, co, k, s, p) in [
        ("conv2d_s2p1", 2usize, 6usize, 5usize, 3usize, 3usize, 2usize, 1usize),
        ("conv2d_s1p0", 1, 5, 7, 2, 3, 1, 0),
    ] {
        let mut ps = ParameterSet::new();
        param(&mut ps, "x", vec![ci, h, w], rand_vec(rng, ci * h * w, -1.0, 1.0));
        param(&mut ps, "w", vec![co, ci, k, k], rand_vec(rng, co * ci * k * k, -1.0, 1.0));
        param(&mut ps, "b", vec![co], rand_vec(rng, co, -0.5, 0.5));
        out.push((
            name,
            instance(rng, ps, move |t, ps| {
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                let wv = t.param("w", ps.get("w").unwrap()).unwrap();
                let b = t.param("b", ps.get("b").unwrap()).unwrap();
                t.conv2d(x, wv, b, s, p).map_err(|e| e.to_string())
            }),
        ));
    }

    // flatten / concat ------------------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "x", vec![2, 3, 2], rand_vec(rng, 12, -2.0, 2.0));
        out.push((
            "flatten",
            instance(rng, ps, |t, ps| {
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                Ok(t.flatten(x))
            }),
        ));
    }
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "a", vec![4], rand_vec(rng, 4, -2.0, 2.0));
        param(&mut ps, "b", vec![3], rand_vec(rng, 3, -2.0, 2.0));
        out.push((
            "concat",
            instance(rng, ps, |t, ps| {
                let a = t.param("a", ps.get("a").unwrap()).unwrap();
                let b = t.param("b", ps.get("b").unwrap()).unwrap();
                Ok(t.concat(&[a, b]))
            }),
        ));
    }

    // softmax_rows ----------------------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "z", vec![3, 4], rand_vec(rng, 12, -2.0, 2.0));
        out.push((
            "softmax_rows",
            instance(rng, ps, |t, ps| {
                let z = t.param("z", ps.get("z").unwrap()).unwrap();
                t.softmax_rows(z).map_err(|e| e.to_string())
            }),
        ));
    }

    // st_sample (soft surrogate; hard modes share this backward exactly) ----
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "z", vec![3, 4], rand_vec(rng, 12, -2.0, 2.0));
        out.push((
            "st_sample_soft",
            instance(rng, ps, |t, ps| {
                let z = t.param("z", ps.get("z").unwrap()).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(0);
                t.st_sample(z, SampleMode::Soft, &mut r).map_err(|e| e.to_string())
            }),
        ));
    }

    // convex_blend with live alpha -------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "alpha_raw", vec![1], rand_vec(rng, 1, -1.0, 1.0));
        param(&mut ps, "q", vec![6], rand_vec(rng, 6, -2.0, 2.0));
        param(&mut ps, "p", vec![6], rand_vec(rng, 6, -2.0, 2.0));
        out.push((
            "convex_blend",
            instance(rng, ps, |t, ps| {
                let ar = t.param("alpha_raw", ps.get("alpha_raw").unwrap()).unwrap();
                let alpha = t.sigmoid(ar);
                let q = t.param("q", ps.get("q").unwrap()).unwrap();
                let p = t.param("p", ps.get("p").unwrap()).unwrap();
                t.convex_blend(alpha, q, p, false).map_err(|e| e.to_string())
            }),
        ));
    }

    // huber_sum: residuals kept away from the |r| = delta joints ------------
    {
        let mut ps = ParameterSet::new();
        let pred = rand_vec(rng, 5, -2.0, 2.0);
        let offsets = [-0.6, 0.3, 1.7, -1.4, 0.05];
        let target: Vec<f64> = pred.iter().zip(offsets).map(|(p, o)| p - o).collect();
        param(&mut ps, "pred", vec![5], pred);
        out.push((
            "huber_sum",
            instance(rng, ps, move |t, ps| {
                let p = t.param("pred", ps.get("pred").unwrap()).unwrap();
                t.huber_sum(p, &target, 1.0).map_err(|e| e.to_string())
            }),
        ));
    }

    // sum --------------------------------------------------------------------
    {
        let mut ps = ParameterSet::new();
        param(&mut ps, "x", vec![6], rand_vec(rng, 6, -2.0, 2.0));
        out.push((
            "sum",
            instance(rng, ps, |t, ps| {
                let x = t.param("x", ps.get("x").unwrap()).unwrap();
                Ok(t.sum(x))
            }),
        ));
    }

    out
}

/// Run the op suite for one seed and return `(op_name, report)` pairs.
pub fn run_op_suite(seed: u64, cfg: &GradCheckConfig) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    op_gradient_suite(seed)
        .into_iter()
        .map(|(name, inst)| {
            let report = grad_check(
                |ps| (inst.loss)(ps),
                &inst.params,
                &inst.analytic,
                cfg,
                &mut rng,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, report)
        })
        .collect()
}
