//! Dense row-major tensors and the hand-written layers of the proxy model,
//! with MX/bf16 quantization injected on matmul operands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mx_block::{fake_quantize, MxSpec, QuantStats};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }
}

/// Which operand a quantization setting applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantRole {
    FwdWeight,
    FwdActivation,
    BwdWeight,
    GradInput,
    GradOutput,
    LnAffine,
}

impl QuantRole {
    pub fn name(self) -> &'static str {
        match self {
            QuantRole::FwdWeight => "fwd_weight",
            QuantRole::FwdActivation => "fwd_activation",
            QuantRole::BwdWeight => "bwd_weight",
            QuantRole::GradInput => "grad_input",
            QuantRole::GradOutput => "grad_output",
            QuantRole::LnAffine => "ln_affine",
        }
    }
}

/// Number format an operand is cast to before use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantFormat {
    /// Keep working precision.
    #[default]
    None,
    Bf16,
    Mx(MxSpec),
}

impl QuantFormat {
    pub fn is_mx(&self) -> bool {
        matches!(self, QuantFormat::Mx(_))
    }

    pub fn map_mx(self, f: impl FnOnce(MxSpec) -> MxSpec) -> Self {
        match self {
            QuantFormat::Mx(s) => QuantFormat::Mx(f(s)),
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantPoint {
    pub role: QuantRole,
    pub format: QuantFormat,
}

impl QuantPoint {
    pub fn new(role: QuantRole, format: QuantFormat) -> Self {
        QuantPoint { role, format }
    }
}

/// Cast `data` (shaped `shape`) through `format`, blocking MX along `axis`.
pub fn apply_quant<T: Real>(
    data: &mut [T],
    shape: &[usize],
    axis: usize,
    point: &QuantPoint,
) -> Result<QuantStats> {
    match point.format {
        QuantFormat::None => Ok(QuantStats::default()),
        QuantFormat::Bf16 => {
            data.iter_mut().for_each(|x| *x = x.round_bf16());
            Ok(QuantStats {
                elements: data.len(),
                last_bin: 0,
            })
        }
        QuantFormat::Mx(spec) => fake_quantize(data, shape, axis, &spec).map_err(|e| match e {
            Error::NonFinite { index, value } => Error::NonFiniteOperand {
                role: point.role.name(),
                index,
                value,
            },
            other => other,
        }),
    }
}

/// Elementwise arithmetic policy for layernorm reductions and residual adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VecOps {
    #[default]
    Working,
    /// Operands cast to bfloat16 and every result rounded to bfloat16.
    Bf16,
}

impl VecOps {
    #[inline]
    fn r<T: Real>(self, x: T) -> T {
        match self {
            VecOps::Working => x,
            VecOps::Bf16 => x.round_bf16(),
        }
    }
}

/// Product of two quantized operands plus the statistics of each cast.
#[derive(Clone, Debug)]
pub struct MatmulOutput<T> {
    pub product: Tensor<T>,
    pub stats_a: QuantStats,
    pub stats_b: QuantStats,
}

/// `op(A) · op(B)` where `op` optionally transposes. Each operand is
/// quantized along the contraction dimension (so a transposed operand is
/// blocked along its own last axis); the product stays in working precision.
pub fn matmul_q_t<T: Real>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
    qa: &QuantPoint,
    qb: &QuantPoint,
) -> Result<MatmulOutput<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions differ: {:?}{} x {:?}{}",
            a.shape,
            if trans_a { "^T" } else { "" },
            b.shape,
            if trans_b { "^T" } else { "" }
        )));
    }

    let mut qa_buf;
    let mut stats_a = QuantStats::default();
    let a_data: &[T] = if qa.format == QuantFormat::None {
        &a.data
    } else {
        qa_buf = a.data.clone();
        stats_a = apply_quant(&mut qa_buf, &a.shape, if trans_a { 0 } else { 1 }, qa)?;
        &qa_buf
    };
    let mut qb_buf;
    let mut stats_b = QuantStats::default();
    let b_data: &[T] = if qb.format == QuantFormat::None {
        &b.data
    } else {
        qb_buf = b.data.clone();
        stats_b = apply_quant(&mut qb_buf, &b.shape, if trans_b { 1 } else { 0 }, qb)?;
        &qb_buf
    };

    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, a_data, rsa, csa, b_data, rsb, csb, &mut out.data);
    Ok(MatmulOutput {
        product: out,
        stats_a,
        stats_b,
    })
}

/// `A · B` with A blocked along its columns and B along its rows.
pub fn matmul_q<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    qa: &QuantPoint,
    qb: &QuantPoint,
) -> Result<Tensor<T>> {
    Ok(matmul_q_t(a, false, b, false, qa, qb)?.product)
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Values saved by [`layernorm_fwd`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LnCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
    /// gamma after quantization, as used in the forward pass
    pub gamma_eff: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LnOutput<T> {
    pub y: Tensor<T>,
    pub cache: LnCache<T>,
    pub gamma_stats: QuantStats,
    pub beta_stats: QuantStats,
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis.
pub fn layernorm_fwd<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    q_ln: &QuantPoint,
    vec_ops: VecOps,
) -> Result<LnOutput<T>> {
    let (rows, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "layernorm affine length {}/{} != {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut g = gamma.to_vec();
    let mut b = beta.to_vec();
    let gamma_stats = apply_quant(&mut g, &[d], 0, q_ln)?;
    let beta_stats = apply_quant(&mut b, &[d], 0, q_ln)?;

    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut y = Tensor::zeros(&[rows, d]);
    let mut xhat = Tensor::zeros(&[rows, d]);
    let mut rstd = Vec::with_capacity(rows);
    let mut xc = vec![T::ZERO; d];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mut sum = T::ZERO;
        for &v in row {
            sum += vec_ops.r(v);
        }
        let mean = vec_ops.r(sum * inv_d);
        let mut sq = T::ZERO;
        for (c, &v) in xc.iter_mut().zip(row) {
            *c = vec_ops.r(vec_ops.r(v) - mean);
            sq += *c * *c;
        }
        let var = vec_ops.r(sq * inv_d);
        let rs = vec_ops.r(T::ONE / (var + eps).sqrt());
        rstd.push(rs);
        let xh = &mut xhat.data[r * d..(r + 1) * d];
        let yr = &mut y.data[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = vec_ops.r(xc[j] * rs);
            yr[j] = vec_ops.r(vec_ops.r(xh[j] * g[j]) + b[j]);
        }
    }
    Ok(LnOutput {
        y,
        cache: LnCache {
            xhat,
            rstd,
            gamma_eff: g,
        },
        gamma_stats,
        beta_stats,
    })
}

pub struct LnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Analytic layernorm gradients. `dgamma`/`dbeta` are taken with respect to
/// the effective (quantized) affine parameters and passed straight through.
pub fn layernorm_bwd<T: Real>(cache: &LnCache<T>, dy: &Tensor<T>) -> Result<LnGrads<T>> {
    let (rows, d) = dy.dims2()?;
    if cache.xhat.shape != dy.shape {
        return Err(Error::ShapeMismatch("layernorm cache/gradient shapes differ".into()));
    }
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Tensor::zeros(&[rows, d]);
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    let mut dxhat = vec![T::ZERO; d];
    for r in 0..rows {
        let dyr = &dy.data[r * d..(r + 1) * d];
        let xh = &cache.xhat.data[r * d..(r + 1) * d];
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * cache.gamma_eff[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        let dxr = &mut dx.data[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok(LnGrads { dx, dgamma, dbeta })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    Swiglu,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * gaussian_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    gaussian_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Applies `kind` to `h`. For SwiGLU the last axis holds `[gate | value]`
/// and the output has half as many columns.
pub fn activation_fwd<T: Real>(kind: Activation, h: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = h.dims2()?;
    match kind {
        Activation::Relu => Ok(Tensor {
            shape: h.shape.clone(),
            data: h
                .data
                .iter()
                .map(|&x| if x > T::ZERO { x } else { T::ZERO })
                .collect(),
        }),
        Activation::Gelu => Ok(Tensor {
            shape: h.shape.clone(),
            data: h.data.iter().map(|&x| T::from_f64(gelu(x.to_f64()))).collect(),
        }),
        Activation::Swiglu => {
            if cols % 2 != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "swiglu needs an even last dimension, got {cols}"
                )));
            }
            let half = cols / 2;
            let mut out = Tensor::zeros(&[rows, half]);
            for r in 0..rows {
                let row = &h.data[r * cols..(r + 1) * cols];
                let (gate, value) = row.split_at(half);
                for j in 0..half {
                    out.data[r * half + j] = T::from_f64(silu(gate[j].to_f64())) * value[j];
                }
            }
            Ok(out)
        }
    }
}

/// Gradient with respect to the activation input `h` (the cache).
pub fn activation_bwd<T: Real>(kind: Activation, h: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = h.dims2()?;
    match kind {
        Activation::Relu | Activation::Gelu => {
            if dout.shape != h.shape {
                return Err(Error::ShapeMismatch("activation gradient shape".into()));
            }
            let data = h
                .data
                .iter()
                .zip(&dout.data)
                .map(|(&x, &g)| match kind {
                    Activation::Relu => {
                        if x > T::ZERO {
                            g
                        } else {
                            T::ZERO
                        }
                    }
                    _ => T::from_f64(gelu_grad(x.to_f64())) * g,
                })
                .collect();
            Ok(Tensor {
                shape: h.shape.clone(),
                data,
            })
        }
        Activation::Swiglu => {
            let half = cols / 2;
            if cols % 2 != 0 || dout.shape != [rows, half] {
                return Err(Error::ShapeMismatch("swiglu gradient shape".into()));
            }
            let mut dh = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                let row = &h.data[r * cols..(r + 1) * cols];
                let (gate, value) = row.split_at(half);
                let dr = &dout.data[r * half..(r + 1) * half];
                let (dgate, dvalue) = dh.data[r * cols..(r + 1) * cols].split_at_mut(half);
                for j in 0..half {
                    let g = gate[j].to_f64();
                    dgate[j] = T::from_f64(silu_grad(g)) * value[j] * dr[j];
                    dvalue[j] = T::from_f64(silu(g)) * dr[j];
                }
            }
            Ok(dh)
        }
    }
}

/// Mean squared error and its gradient. The loss is accumulated in f64 with
/// compensated summation regardless of working precision.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!(
            "mse shapes {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::invalid("mse of an empty tensor"));
    }
    let scale = T::from_f64(2.0 / n as f64);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut grad = Vec::with_capacity(n);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let diff = p - t;
        grad.push(diff * scale);
        let d = p.to_f64() - t.to_f64();
        let term = d * d;
        // Neumaier summation
        let s = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - s) + term;
        } else {
            comp += (term - s) + sum;
        }
        sum = s;
    }
    Ok((
        (sum + comp) / n as f64,
        Tensor {
            shape: pred.shape.clone(),
            data: grad,
        },
    ))
}

/// `a + b` under the given vector-op policy.
pub fn vec_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>, vec_ops: VecOps) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch("vector add shapes differ".into()));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| vec_ops.r(vec_ops.r(x) + vec_ops.r(y)))
            .collect(),
    })
}
