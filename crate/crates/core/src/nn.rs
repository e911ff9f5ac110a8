//! Layer parameter initialization and the recurrent cell.
//!
//! Naming convention: a dense layer `foo` owns `foo.w`/`foo.b`, a conv layer
//! owns the same pair with a 4-D kernel, and a GRU `foo` owns nine tensors
//! `foo.{wz,uz,bz,wr,ur,br,wn,un,bn}`. Input-to-hidden weights draw from a
//! Kaiming-uniform fan-in distribution, hidden-to-hidden weights start
//! orthogonal, and all biases start at zero.

use rand::Rng;

use crate::tape::{Tape, TapeError, Val};
use crate::tensor::{ParameterSet, Tensor, TensorError};

/// Kaiming-uniform sample bound for a layer with the given fan-in.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn kaiming_vec<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let b = kaiming_bound(fan_in);
    (0..n).map(|_| rng.random_range(-b..b)).collect()
}

/// Standard normal via Box-Muller; two uniforms per sample keeps the
/// consumed stream length fixed.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random orthogonal `d x d` matrix: Gaussian draw, then Gram-Schmidt with
/// one re-orthogonalization pass.
pub fn orthogonal<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..d * d).map(|_| normal(rng)).collect();
    for i in 0..d {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
                for k in 0..d {
                    m[i * d + k] -= dot * m[j * d + k];
                }
            }
        }
        let norm: f64 = (0..d).map(|k| m[i * d + k] * m[i * d + k]).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "degenerate Gram-Schmidt row");
        for k in 0..d {
            m[i * d + k] /= norm;
        }
    }
    m
}

pub fn init_dense<R: Rng>(
    ps: &mut ParameterSet,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    ps.insert(
        &format!("{prefix}.w"),
        Tensor::param(vec![out_dim, in_dim], kaiming_vec(rng, out_dim * in_dim, in_dim))?,
    )?;
    ps.insert(&format!("{prefix}.b"), {
        let mut t = Tensor::zeros(vec![out_dim]);
        t.requires_grad = true;
        t
    })?;
    Ok(())
}

pub fn init_conv<R: Rng>(
    ps: &mut ParameterSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    let fan_in = c_in * k * k;
    ps.insert(
        &format!("{prefix}.w"),
        Tensor::param(
            vec![c_out, c_in, k, k],
            kaiming_vec(rng, c_out * fan_in, fan_in),
        )?,
    )?;
    ps.insert(&format!("{prefix}.b"), {
        let mut t = Tensor::zeros(vec![c_out]);
        t.requires_grad = true;
        t
    })?;
    Ok(())
}

pub fn init_gru<R: Rng>(
    ps: &mut ParameterSet,
    prefix: &str,
    in_dim: usize,
    d: usize,
    rng: &mut R,
) -> Result<(), TensorError> {
    for gate in ["z", "r", "n"] {
        ps.insert(
            &format!("{prefix}.w{gate}"),
            Tensor::param(vec![d, in_dim], kaiming_vec(rng, d * in_dim, in_dim))?,
        )?;
        ps.insert(
            &format!("{prefix}.u{gate}"),
            Tensor::param(vec![d, d], orthogonal(rng, d))?,
        )?;
        ps.insert(&format!("{prefix}.b{gate}"), {
            let mut t = Tensor::zeros(vec![d]);
            t.requires_grad = true;
            t
        })?;
    }
    Ok(())
}

/// Tape handles for one dense layer.
#[derive(Clone, Copy)]
pub struct DenseVals {
    pub w: Val,
    pub b: Val,
}

pub fn bind_dense(t: &mut Tape, ps: &ParameterSet, prefix: &str) -> Result<DenseVals, NnError> {
    Ok(DenseVals {
        w: t.param(&format!("{prefix}.w"), ps.get(&format!("{prefix}.w"))?)?,
        b: t.param(&format!("{prefix}.b"), ps.get(&format!("{prefix}.b"))?)?,
    })
}

pub fn dense_fwd(t: &mut Tape, l: &DenseVals, x: Val) -> Result<Val, TapeError> {
    t.affine(x, l.w, l.b)
}

/// Tape handles for one GRU cell.
#[derive(Clone, Copy)]
pub struct GruVals {
    pub wz: Val,
    pub uz: Val,
    pub bz: Val,
    pub wr: Val,
    pub ur: Val,
    pub br: Val,
    pub wn: Val,
    pub un: Val,
    pub bn: Val,
}

pub fn bind_gru(t: &mut Tape, ps: &ParameterSet, prefix: &str) -> Result<GruVals, NnError> {
    let mut get = |suffix: &str| -> Result<Val, NnError> {
        let name = format!("{prefix}.{suffix}");
        Ok(t.param(&name, ps.get(&name)?)?)
    };
    Ok(GruVals {
        wz: get("wz")?,
        uz: get("uz")?,
        bz: get("bz")?,
        wr: get("wr")?,
        ur: get("ur")?,
        br: get("br")?,
        wn: get("wn")?,
        un: get("un")?,
        bn: get("bn")?,
    })
}

/// One GRU step:
///   z  = sigmoid(Wz x + Uz h + bz)
///   r  = sigmoid(Wr x + Ur h + br)
///   n  = tanh(Wn x + Un (r ⊙ h) + bn)
///   h' = z ⊙ h + (1 - z) ⊙ n
///
/// A saturated update gate (z -> 1) therefore holds the previous state.
pub fn gru_step(t: &mut Tape, g: &GruVals, x: Val, h: Val) -> Result<Val, TapeError> {
    let wzx = t.affine(x, g.wz, g.bz)?;
    let uzh = t.matvec(g.uz, h)?;
    let z_pre = t.add(wzx, uzh)?;
    let z = t.sigmoid(z_pre);

    let wrx = t.affine(x, g.wr, g.br)?;
    let urh = t.matvec(g.ur, h)?;
    let r_pre = t.add(wrx, urh)?;
    let r = t.sigmoid(r_pre);

    let rh = t.mul(r, h)?;
    let wnx = t.affine(x, g.wn, g.bn)?;
    let unrh = t.matvec(g.un, rh)?;
    let n_pre = t.add(wnx, unrh)?;
    let n = t.tanh(n_pre);

    let zh = t.mul(z, h)?;
    let keep = t.scale_shift(z, -1.0, 1.0);
    let zn = t.mul(keep, n)?;
    t.add(zh, zn)
}

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}
