//! Finite-difference verification of reverse-mode gradients.
//!
//! The numeric side is always a central difference evaluated in f64. The
//! analytic side is computed at both precisions, so one report carries the
//! worst relative error of each.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{Forward, ModelError, Result, SarcNetConfig, SarcNetParams};
use crate::tensor::{Graph, NormMode, PoolKind, Real, Tensor, TensorError, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;

/// One differentiable op in a small fixed configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCase {
    Conv { stride: usize, padding: usize, bias: bool },
    BnTrain,
    BnEval,
    Relu,
    Add,
    MaxPool,
    GlobalAvg,
    Flatten,
    Linear,
    Concat,
    Mse,
    Sum,
    WeightedSum,
    Mean,
}

pub const OP_CASES: [OpCase; 16] = [
    OpCase::Conv {
        stride: 1,
        padding: 1,
        bias: true,
    },
    OpCase::Conv {
        stride: 2,
        padding: 3,
        bias: false,
    },
    OpCase::Conv {
        stride: 2,
        padding: 0,
        bias: true,
    },
    OpCase::BnTrain,
    OpCase::BnEval,
    OpCase::Relu,
    OpCase::Add,
    OpCase::MaxPool,
    OpCase::GlobalAvg,
    OpCase::Flatten,
    OpCase::Linear,
    OpCase::Concat,
    OpCase::Mse,
    OpCase::Sum,
    OpCase::WeightedSum,
    OpCase::Mean,
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub coords: usize,
    pub worst_f64: f64,
    pub worst_f32: f64,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.worst_f64 <= TOL_F64 && self.worst_f32 <= TOL_F32
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Ok(Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )?)
}

fn inputs(case: OpCase, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let shapes: Vec<Vec<usize>> = match case {
        OpCase::Conv { bias, stride, .. } => {
            let k = if stride == 2 && !bias { 7 } else { 3 };
            let mut v = vec![vec![2, 3, 9, 9], vec![4, 3, k, k]];
            if bias {
                v.push(vec![4]);
            }
            v
        }
        OpCase::BnTrain | OpCase::BnEval => vec![vec![3, 2, 3, 3], vec![2], vec![2]],
        OpCase::Relu | OpCase::MaxPool | OpCase::GlobalAvg | OpCase::Flatten => vec![vec![2, 3, 5, 5]],
        OpCase::Add => vec![vec![2, 3, 4], vec![2, 3, 4]],
        OpCase::Linear => vec![vec![3, 5], vec![4, 5], vec![4]],
        OpCase::Concat => vec![vec![3, 4], vec![3, 2]],
        OpCase::Mse => vec![vec![5, 1], vec![5, 1]],
        OpCase::Sum | OpCase::WeightedSum | OpCase::Mean => vec![vec![4, 6]],
    };
    shapes.iter().map(|s| randn(rng, s)).collect()
}

/// Fixed readout so every output element contributes with a distinct weight.
fn readout<T: Real>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::lit((1.3 * i as f64 + 0.7).sin())).collect()
}

fn build<T: Real>(case: OpCase, g: &mut Graph<T>, v: &[Var]) -> Result<Var, TensorError> {
    let out = match case {
        OpCase::Conv { stride, padding, bias } => g.conv2d(v[0], v[1], bias.then(|| v[2]), stride, padding)?,
        OpCase::BnTrain => g.batchnorm2d(v[0], v[1], v[2], None, NormMode::Train)?.0,
        OpCase::BnEval => {
            let (m, s) = ([T::lit(0.3), T::lit(-0.2)], [T::lit(1.7), T::lit(0.6)]);
            g.batchnorm2d(v[0], v[1], v[2], Some((&m, &s)), NormMode::Eval)?.0
        }
        OpCase::Relu => g.relu(v[0]),
        OpCase::Add => g.add(v[0], v[1])?,
        OpCase::MaxPool => g.pool2d(
            v[0],
            PoolKind::Max {
                window: 3,
                stride: 2,
                padding: 1,
            },
        )?,
        OpCase::GlobalAvg => g.pool2d(v[0], PoolKind::GlobalAvg)?,
        OpCase::Flatten => g.flatten(v[0])?,
        OpCase::Linear => g.linear(v[0], v[1], v[2])?,
        OpCase::Concat => g.concat(v[0], v[1])?,
        OpCase::Mse => return g.mse_loss(v[0], v[1]),
        OpCase::Sum => return Ok(g.sum(v[0])),
        OpCase::WeightedSum => {
            let w = readout::<T>(g.value(v[0]).len());
            return g.weighted_sum(v[0], &w);
        }
        OpCase::Mean => return g.mean(v[0]),
    };
    let w = readout::<T>(g.value(out).len());
    g.weighted_sum(out, &w)
}

fn op_loss(case: OpCase, xs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
    let l = build(case, &mut g, &v)?;
    Ok(g.value(l).data()[0])
}

fn op_grads<T: Real>(case: OpCase, xs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let v: Vec<Var> = xs.iter().map(|t| g.param(t.cast())).collect();
    let l = build(case, &mut g, &v)?;
    g.backward(l)?;
    Ok(v.iter().map(|&x| grad_f64(&g, x)).collect())
}

fn grad_f64<T: Real>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.grad(v)
        .map(|t| t.data().iter().map(|a| a.to_f64().unwrap_or(f64::NAN)).collect())
        .unwrap_or_default()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Draws `count` coordinates whose gradient is at least 1e-3 of the largest.
fn sample_coords(grads: &[Vec<f64>], rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<(usize, usize)>> {
    let max = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let pool: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| {
            g.iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 1e-3 * max)
                .map(move |(i, _)| (t, i))
        })
        .collect();
    if pool.is_empty() {
        return Err(ModelError::Config("every gradient is zero; nothing to check".into()));
    }
    Ok((0..count).filter_map(|_| pool.choose(rng).copied()).collect())
}

/// Checks one op on random inputs.
pub fn check_op(case: OpCase, coords: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = inputs(case, &mut rng)?;
    let g64 = op_grads::<f64>(case, &xs)?;
    let g32 = op_grads::<f32>(case, &xs)?;
    let picked = sample_coords(&g64, &mut rng, coords)?;
    let (mut worst_f64, mut worst_f32) = (0.0f64, 0.0f64);
    for &(t, i) in &picked {
        let mut plus = xs.to_vec();
        plus[t].data_mut()[i] += STEP;
        let mut minus = xs.to_vec();
        minus[t].data_mut()[i] -= STEP;
        let numeric = (op_loss(case, &plus)? - op_loss(case, &minus)?) / (2.0 * STEP);
        worst_f64 = worst_f64.max(rel_err(g64[t][i], numeric));
        worst_f32 = worst_f32.max(rel_err(g32[t][i], numeric));
    }
    Ok(GradReport {
        name: format!("{case:?}"),
        coords: picked.len(),
        worst_f64,
        worst_f32,
    })
}

/// [`check_op`] for every entry of [`OP_CASES`].
pub fn check_ops(coords: usize, seed: u64) -> Result<Vec<GradReport>> {
    OP_CASES
        .iter()
        .enumerate()
        .map(|(k, &case)| check_op(case, coords, seed.wrapping_add(k as u64)))
        .collect()
}

struct NetBatch {
    images: Tensor<f64>,
    features: Tensor<f64>,
    targets: Tensor<f64>,
}

/// Tape, loss node and the bound weights sorted by name.
type NetTape<T> = (Graph<T>, Var, Vec<(String, Var)>);

fn net_loss<T: Real>(params: &SarcNetParams<T>, b: &NetBatch) -> Result<NetTape<T>> {
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(b.images.cast());
    let f = g.constant(b.features.cast());
    let y = g.constant(b.targets.cast());
    let mut fwd = Forward::new(params, &bound, NormMode::Train);
    let out = fwd.sarcnet(&mut g, x, f)?;
    let loss = g.mse_loss(out.score, y)?;
    let mut vars: Vec<(String, Var)> = bound.iter().map(|(k, v)| (k.clone(), *v)).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((g, loss, vars))
}

fn net_grads<T: Real>(params: &SarcNetParams<T>, b: &NetBatch) -> Result<Vec<Vec<f64>>> {
    let (mut g, loss, vars) = net_loss(params, b)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|(_, v)| grad_f64(&g, *v)).collect())
}

/// Checks the full network (train-mode batch norm, MSE loss) with respect to
/// its weights on a random batch.
pub fn check_network(cfg: &SarcNetConfig, batch: usize, coords: usize, seed: u64) -> Result<GradReport> {
    let params = SarcNetParams::<f64>::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.input_size;
    let b = NetBatch {
        images: randn(&mut rng, &[batch, 3, s, s])?,
        features: randn(&mut rng, &[batch, cfg.feature_dim()])?,
        targets: Tensor::new(vec![batch, 1], (0..batch).map(|i| 1.0 + (i % 5) as f64).collect())?,
    };
    let (_, _, vars) = net_loss(&params, &b)?;
    let names: Vec<String> = vars.into_iter().map(|(k, _)| k).collect();
    let g64 = net_grads(&params, &b)?;
    let g32 = net_grads(&params.cast::<f32>(), &b)?;
    let picked = sample_coords(&g64, &mut rng, coords)?;
    let loss_at = |name: &str, i: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        let w = p
            .weights
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        w.data_mut()[i] += delta;
        let (g, loss, _) = net_loss(&p, &b)?;
        Ok(g.value(loss).data()[0])
    };
    let (mut worst_f64, mut worst_f32) = (0.0f64, 0.0f64);
    for &(t, i) in &picked {
        let numeric = (loss_at(&names[t], i, STEP)? - loss_at(&names[t], i, -STEP)?) / (2.0 * STEP);
        worst_f64 = worst_f64.max(rel_err(g64[t][i], numeric));
        worst_f32 = worst_f32.max(rel_err(g32[t][i], numeric));
    }
    Ok(GradReport {
        name: "network".into(),
        coords: picked.len(),
        worst_f64,
        worst_f32,
    })
}
