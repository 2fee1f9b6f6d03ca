//! The per-client learnable projection network: one fully connected layer,
//! ReLU, then a normalization stage (batch norm by default), with an exact
//! analytic backward pass and Adam updates.
//!
//! Batch-norm conventions, frozen for reproducibility: epsilon 1e-5,
//! running-stat momentum 0.1, the biased (1/n) variance inside the
//! normalization and the unbiased (1/(n-1)) estimator for the running
//! variance. Weight decay is L2-coupled: the decay term is added to the raw
//! gradient before the moment updates.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, Rng};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Output-stage variant. Batch norm matches the reference architecture;
/// the alternatives exist for ablations on contrastive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Batchnorm,
    L2,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub normalization: Normalization,
}

impl ProjectorParams {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Number of learnable scalars (weight, bias, gamma, beta).
    pub fn learnable_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + 3 * self.out_dim()
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero bias, identity
/// batch-norm affine, running stats (0, 1).
pub fn init_params(rng: &mut Rng, k: usize, d_e: usize, d_h: usize) -> Result<ProjectorParams> {
    if k == 0 || d_e == 0 || d_h == 0 {
        return Err(Error::Param(format!(
            "projector dims must be >= 1, got K={k} d_e={d_e} d_h={d_h}"
        )));
    }
    let in_dim = k * d_e;
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weight = Matrix::from_vec(
        in_dim,
        d_h,
        (0..in_dim * d_h).map(|_| rng.uniform(-bound, bound)).collect(),
    )?;
    Ok(ProjectorParams {
        weight,
        bias: vec![0.0; d_h],
        bn_gamma: vec![1.0; d_h],
        bn_beta: vec![0.0; d_h],
        bn_running_mean: vec![0.0; d_h],
        bn_running_var: vec![1.0; d_h],
        normalization: Normalization::Batchnorm,
    })
}

#[derive(Debug, Clone)]
enum NormCache {
    Batchnorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        xhat: Matrix,
    },
    L2 {
        norms: Vec<f64>,
    },
    None,
}

/// Intermediates of one forward call, sufficient to reproduce the exact
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre_activation: Matrix,
    post_relu: Matrix,
    norm: NormCache,
    mode: Mode,
}

fn affine_relu(params: &ProjectorParams, batch: &Matrix) -> Result<(Matrix, Matrix)> {
    if batch.cols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "batch cols {} != projector input dim {}",
            batch.cols(),
            params.in_dim()
        )));
    }
    let mut pre = matmul(batch, &params.weight)?;
    for r in 0..pre.rows() {
        for (v, b) in pre.row_mut(r).iter_mut().zip(&params.bias) {
            *v += b;
        }
    }
    let mut relu = pre.clone();
    for v in relu.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((pre, relu))
}

/// Forward pass. Train mode uses batch statistics and updates the running
/// stats; eval mode reads the running stats and never mutates the params.
pub fn forward(params: &mut ProjectorParams, batch: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
    if mode == Mode::Eval {
        return forward_eval_cached(params, batch);
    }
    let n = batch.rows();
    let (pre, relu) = affine_relu(params, batch)?;
    let d = params.out_dim();
    let (z, norm) = match params.normalization {
        Normalization::Batchnorm => {
            if n < 2 {
                return Err(Error::BatchSize(n));
            }
            let nf = n as f64;
            let mut mean = vec![0.0; d];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(relu.row(r)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= nf;
            }
            let mut var = vec![0.0; d];
            for r in 0..n {
                for (j, v) in relu.row(r).iter().enumerate() {
                    let c = v - mean[j];
                    var[j] += c * c;
                }
            }
            for v in &mut var {
                *v /= nf;
            }
            let mut xhat = Matrix::zeros(n, d);
            let mut z = Matrix::zeros(n, d);
            for r in 0..n {
                for j in 0..d {
                    let xh = (relu.get(r, j) - mean[j]) / (var[j] + BN_EPSILON).sqrt();
                    xhat.set(r, j, xh);
                    z.set(r, j, params.bn_gamma[j] * xh + params.bn_beta[j]);
                }
            }
            // running <- (1 - mu) * running + mu * batch_stat, with the
            // unbiased variance going into the running estimate.
            let unbias = nf / (nf - 1.0);
            for j in 0..d {
                params.bn_running_mean[j] =
                    (1.0 - BN_MOMENTUM) * params.bn_running_mean[j] + BN_MOMENTUM * mean[j];
                params.bn_running_var[j] =
                    (1.0 - BN_MOMENTUM) * params.bn_running_var[j] + BN_MOMENTUM * var[j] * unbias;
            }
            (z, NormCache::Batchnorm { mean, var, xhat })
        }
        Normalization::L2 => l2_stage(&relu)?,
        Normalization::None => (relu.clone(), NormCache::None),
    };
    if !z.is_finite() {
        return Err(Error::Numerical("forward produced non-finite output".into()));
    }
    Ok((
        z,
        ForwardCache {
            input: batch.clone(),
            pre_activation: pre,
            post_relu: relu,
            norm,
            mode: Mode::Train,
        },
    ))
}

fn l2_stage(relu: &Matrix) -> Result<(Matrix, NormCache)> {
    let mut z = relu.clone();
    let mut norms = Vec::with_capacity(relu.rows());
    for r in 0..relu.rows() {
        let norm = crate::linalg::l2_norm(relu.row(r));
        if norm == 0.0 {
            return Err(Error::Numerical(format!(
                "row {r} has zero norm; cannot L2-normalize"
            )));
        }
        for v in z.row_mut(r) {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((z, NormCache::L2 { norms }))
}

/// Eval-mode forward as a pure function of the parameters.
pub fn forward_eval(params: &ProjectorParams, batch: &Matrix) -> Result<Matrix> {
    Ok(forward_eval_inner(params, batch)?.0)
}

fn forward_eval_inner(params: &ProjectorParams, batch: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let (pre, relu) = affine_relu(params, batch)?;
    let z = match params.normalization {
        Normalization::Batchnorm => {
            let d = params.out_dim();
            let mut z = Matrix::zeros(batch.rows(), d);
            for r in 0..batch.rows() {
                for j in 0..d {
                    let xh = (relu.get(r, j) - params.bn_running_mean[j])
                        / (params.bn_running_var[j] + BN_EPSILON).sqrt();
                    z.set(r, j, params.bn_gamma[j] * xh + params.bn_beta[j]);
                }
            }
            z
        }
        Normalization::L2 => l2_stage(&relu)?.0,
        Normalization::None => relu.clone(),
    };
    if !z.is_finite() {
        return Err(Error::Numerical("forward produced non-finite output".into()));
    }
    Ok((z, pre, relu))
}

fn forward_eval_cached(params: &ProjectorParams, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    let (z, pre, relu) = forward_eval_inner(params, batch)?;
    Ok((
        z,
        ForwardCache {
            input: batch.clone(),
            pre_activation: pre,
            post_relu: relu,
            norm: NormCache::None,
            mode: Mode::Eval,
        },
    ))
}

/// Gradients of the learnable tensors, same shapes as in
/// [`ProjectorParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

/// Exact backward pass through normalization (including the batch-statistic
/// terms), ReLU, and the affine layer. Requires a train-mode cache.
pub fn backward(params: &ProjectorParams, cache: &ForwardCache, dz: &Matrix) -> Result<Gradients> {
    if cache.mode != Mode::Train {
        return Err(Error::Mode("backward needs a train-mode cache".into()));
    }
    let n = cache.post_relu.rows();
    let d = cache.post_relu.cols();
    if dz.rows() != n || dz.cols() != d {
        return Err(Error::Shape(format!(
            "dz is {}x{}, expected {}x{}",
            dz.rows(),
            dz.cols(),
            n,
            d
        )));
    }

    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    // Gradient w.r.t. the post-ReLU activations.
    let mut dx = Matrix::zeros(n, d);

    match &cache.norm {
        NormCache::Batchnorm { mean, var, xhat } => {
            let nf = n as f64;
            for r in 0..n {
                for j in 0..d {
                    let g = dz.get(r, j);
                    d_beta[j] += g;
                    d_gamma[j] += g * xhat.get(r, j);
                }
            }
            for j in 0..d {
                let inv_std = 1.0 / (var[j] + BN_EPSILON).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_c = 0.0; // sum of dxhat * (x - mean)
                let mut sum_c = 0.0;
                for r in 0..n {
                    let dxhat = dz.get(r, j) * params.bn_gamma[j];
                    let c = cache.post_relu.get(r, j) - mean[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_c += dxhat * c;
                    sum_c += c;
                }
                let d_var = sum_dxhat_c * (-0.5) * inv_std * inv_std * inv_std;
                let d_mean = -inv_std * sum_dxhat + d_var * (-2.0 / nf) * sum_c;
                for r in 0..n {
                    let dxhat = dz.get(r, j) * params.bn_gamma[j];
                    let c = cache.post_relu.get(r, j) - mean[j];
                    dx.set(r, j, dxhat * inv_std + d_var * 2.0 * c / nf + d_mean / nf);
                }
            }
        }
        NormCache::L2 { norms } => {
            for r in 0..n {
                let norm = norms[r];
                let u: Vec<f64> = cache.post_relu.row(r).iter().map(|v| v / norm).collect();
                let proj: f64 = dz.row(r).iter().zip(&u).map(|(g, ui)| g * ui).sum();
                for j in 0..d {
                    dx.set(r, j, (dz.get(r, j) - proj * u[j]) / norm);
                }
            }
        }
        NormCache::None => {
            dx = dz.clone();
        }
    }

    // ReLU mask, then the affine layer.
    let mut d_pre = dx;
    for r in 0..n {
        for j in 0..d {
            if cache.pre_activation.get(r, j) <= 0.0 {
                d_pre.set(r, j, 0.0);
            }
        }
    }
    let d_weight = matmul(&cache.input.transpose(), &d_pre)?;
    let mut d_bias = vec![0.0; d];
    for r in 0..n {
        for (b, v) in d_bias.iter_mut().zip(d_pre.row(r)) {
            *b += v;
        }
    }
    Ok(Gradients {
        weight: d_weight,
        bias: d_bias,
        bn_gamma: d_gamma,
        bn_beta: d_beta,
    })
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn for_projector(params: &ProjectorParams) -> Self {
        let d = params.out_dim();
        AdamState::new(&[params.in_dim() * d, d, d, d])
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments_nonnegative(&self) -> bool {
        self.v.iter().flatten().all(|&x| x >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
            || self.weight_decay < 0.0
        {
            return Err(Error::Param(format!("invalid Adam hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

/// One Adam step over a set of tensors, L2-coupled weight decay, bias-
/// corrected moments.
pub fn adam_step(
    tensors: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} tensors vs {} grads vs {} moment pairs",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((tensor, grad), (m, v)) in tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if tensor.len() != grad.len() || tensor.len() != m.len() {
            return Err(Error::Shape("tensor/gradient/moment length mismatch".into()));
        }
        for i in 0..tensor.len() {
            let g = grad[i] + hyper.weight_decay * tensor[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            tensor[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Adam step specialized to the projector's four learnable tensors.
pub fn adam_step_projector(
    params: &mut ProjectorParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    adam_step(
        &mut [
            params.weight.data_mut(),
            &mut params.bias,
            &mut params.bn_gamma,
            &mut params.bn_beta,
        ],
        &[
            grads.weight.data(),
            &grads.bias,
            &grads.bn_gamma,
            &grads.bn_beta,
        ],
        state,
        hyper,
    )
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    in_dim: usize,
    out_dim: usize,
    normalization: Normalization,
    config_hash: String,
}

/// Writes the parameter tensors in declaration order (weight, bias, gamma,
/// beta, running mean, running var) as little-endian `f32`, preceded by a
/// JSON header line with the dims and the experiment's config hash.
pub fn save_params(params: &ProjectorParams, path: &Path, config_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        in_dim: params.in_dim(),
        out_dim: params.out_dim(),
        normalization: params.normalization,
        config_hash: config_hash.to_string(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    let tensors: [&[f64]; 6] = [
        params.weight.data(),
        &params.bias,
        &params.bn_gamma,
        &params.bn_beta,
        &params.bn_running_mean,
        &params.bn_running_var,
    ];
    for t in tensors {
        for &v in t {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ProjectorParams, String)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader = serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format {
        offset: 0,
        message: format!("bad checkpoint header: {e}"),
    })?;
    let mut offset = header_line.len() as u64;
    let mut read_tensor = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 4];
        reader.read_exact(&mut buf).map_err(|_| Error::Format {
            offset,
            message: "truncated checkpoint tensor".into(),
        })?;
        offset += (len * 4) as u64;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    };
    let weight = Matrix::from_vec(header.in_dim, header.out_dim, read_tensor(header.in_dim * header.out_dim)?)?;
    let params = ProjectorParams {
        weight,
        bias: read_tensor(header.out_dim)?,
        bn_gamma: read_tensor(header.out_dim)?,
        bn_beta: read_tensor(header.out_dim)?,
        bn_running_mean: read_tensor(header.out_dim)?,
        bn_running_var: read_tensor(header.out_dim)?,
        normalization: header.normalization,
    };
    Ok((params, header.config_hash))
}
