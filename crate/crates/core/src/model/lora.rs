//! Low-rank adapters on frozen linear projections.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Adapter hyper-parameters and target projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Update scale is `alpha / rank`.
    pub alpha: f64,
    /// Attention projections of each encoder block that receive adapters.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            targets: vec!["q".into(), "v".into()],
        }
    }
}

pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

/// Low-rank update `(alpha / r) · B · A` for a `d_out × d_in` projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `d_out × d_in` update this adapter adds to the base weight.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok((self.b.matmul(&self.a)? * self.scale())?)
    }
}

/// `y = x·Wᵀ + bias` for row-vector inputs `x: n × d_in`, `W: d_out × d_in`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(&w.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Base projection plus the adapter's low-rank path:
/// `y = x·Wᵀ + bias + (alpha/r)·(x·Aᵀ)·Bᵀ`.
pub fn lora_linear_forward(
    adapter: &LoraAdapter,
    w: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
) -> Result<Tensor> {
    let (d_out, d_in) = w.dims2()?;
    let (ar, a_in) = adapter.a.dims2()?;
    let (b_out, br) = adapter.b.dims2()?;
    let x_in = *x.dims().last().unwrap_or(&0);
    if ar != adapter.rank || br != adapter.rank || a_in != d_in || b_out != d_out || x_in != d_in {
        return Err(Error::Model(format!(
            "lora shape mismatch: W {d_out}x{d_in}, A {ar}x{a_in}, B {b_out}x{br}, x last dim {x_in}, rank {}",
            adapter.rank
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [d_out] {
            return Err(Error::Model(format!(
                "bias shape {:?} does not match d_out {d_out}",
                b.dims()
            )));
        }
    }
    let base = linear(x, w, bias)?;
    let low = x.matmul(&adapter.a.t()?)?.matmul(&adapter.b.t()?)?;
    Ok((base + (low * adapter.scale())?)?)
}
