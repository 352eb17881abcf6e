//! Fully connected layers and pointwise activations.

use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slope used for leaky-ReLU when none is configured.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Identity => t,
            Activation::Sigmoid => sigmoid(t),
            Activation::Relu => t.max(0.0),
            Activation::LeakyRelu(s) => leaky_relu(t, s),
        }
    }

    /// Derivative expressed through the pre-activation `t` and output `y`.
    #[inline]
    pub fn derivative(self, t: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if t > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large `|t|`.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(t: f64, slope: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        slope * t
    }
}

pub fn relu(t: f64) -> f64 {
    t.max(0.0)
}

fn check_dense(op: &'static str, input_len: usize, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize)> {
    let (out, inp) = w.dims2()?;
    if inp != input_len {
        return Err(Error::shape(
            op,
            format!("input has {input_len} features, weight expects {inp}"),
        ));
    }
    if let Some(b) = b {
        if b.len() != out {
            return Err(Error::shape(
                op,
                format!("bias has {} entries for {out} outputs", b.len()),
            ));
        }
    }
    Ok((out, inp))
}

/// `act(W x + b)` for a single vector.
pub fn dense(input: &[f64], w: &Tensor, b: Option<&Tensor>, act: Activation) -> Result<Vec<f64>> {
    let (out, inp) = check_dense("dense", input.len(), w, b)?;
    Ok((0..out)
        .map(|o| {
            let row = &w.data()[o * inp..(o + 1) * inp];
            let pre: f64 = row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                + b.map_or(0.0, |b| b.data()[o]);
            act.apply(pre)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn dense_backward(
    input: &[f64],
    w: &Tensor,
    b: Option<&Tensor>,
    act: Activation,
    grad_out: &[f64],
) -> Result<DenseGrads> {
    let (out, inp) = check_dense("dense_backward", input.len(), w, b)?;
    if grad_out.len() != out {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream has {} entries for {out} outputs", grad_out.len()),
        ));
    }
    let mut dinput = vec![0.0; inp];
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    for o in 0..out {
        let row = &w.data()[o * inp..(o + 1) * inp];
        let pre: f64 = row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            + b.map_or(0.0, |b| b.data()[o]);
        let g = grad_out[o] * act.derivative(pre, act.apply(pre));
        db[o] = g;
        for i in 0..inp {
            dw[o * inp + i] = g * input[i];
            dinput[i] += g * row[i];
        }
    }
    Ok(DenseGrads {
        input: dinput,
        weight: Tensor::new(w.shape(), dw)?,
        bias: db,
    })
}

/// Batched affine map: `x [N, in]`, `w [out, in]`, `b [out]` -> `[N, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, inp) = x.dims2()?;
    let (out, _) = check_dense("linear", inp, w, b)?;
    let mut y = vec![0.0; n * out];
    if let Some(b) = b {
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, inp, out, x.data(), false, w.data(), true, &mut y, 1.0);
    Tensor::new(&[n, out], y)
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, inp) = x.dims2()?;
    let (out, _) = check_dense("linear_backward", inp, w, None)?;
    if grad_out.shape() != [n, out] {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream {:?} vs [{n}, {out}]", grad_out.shape()),
        ));
    }
    let mut dx = vec![0.0; n * inp];
    gemm(n, out, inp, grad_out.data(), false, w.data(), false, &mut dx, 0.0);
    let mut dw = vec![0.0; out * inp];
    gemm(out, n, inp, grad_out.data(), true, x.data(), false, &mut dw, 0.0);
    let mut db = vec![0.0; out];
    for row in grad_out.data().chunks(out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        Tensor::new(&[n, inp], dx)?,
        Tensor::new(&[out, inp], dw)?,
        Tensor::new(&[out], db)?,
    ))
}
