//! Linear and convolution layers resolved from a [`Tape`], with optional
//! low-rank adapters.

use crate::error::Result;
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::params::{ParamStore, Tape};
use crate::scalar::Scalar;

/// Low-rank factors `a [r, in]`, `b [out, r]` and the scale `alpha / r`.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars<T> {
    pub a: Var,
    pub b: Var,
    pub scale: T,
}

/// `y = x·W + b (+ scale · (x·Aᵀ)·Bᵀ)` with `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars<T> {
    pub w: Var,
    pub b: Option<Var>,
    pub lora: Option<LoraVars<T>>,
}

impl<T: Scalar> LinearVars<T> {
    pub fn plain(w: Var, b: Option<Var>) -> Self {
        Self { w, b, lora: None }
    }

    pub fn resolve(tape: &mut Tape<'_, T>, prefix: &str, lora_alpha: Option<f64>) -> Result<Self> {
        let w = tape.param(&format!("{prefix}.weight"))?;
        let b = tape.opt_param(&format!("{prefix}.bias"))?;
        let lora = resolve_lora(tape, prefix, lora_alpha)?;
        Ok(Self { w, b, lora })
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut y = g.matmul(x, self.w)?;
        if let Some(b) = self.b {
            y = g.add_row_bias(y, b)?;
        }
        if let Some(l) = self.lora {
            let down = g.matmul_ex(x, false, l.a, true)?;
            let up = g.matmul_ex(down, false, l.b, true)?;
            let up = g.scale(up, l.scale)?;
            y = g.add(y, up)?;
        }
        Ok(y)
    }
}

/// Convolution with weight `[out, in, k, k]`; LoRA factors act on the
/// flattened kernel matrix `[out, in·k·k]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars<T> {
    pub w: Var,
    pub b: Option<Var>,
    pub lora: Option<LoraVars<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvVars<T> {
    pub fn resolve(
        tape: &mut Tape<'_, T>,
        prefix: &str,
        stride: usize,
        pad: usize,
        lora_alpha: Option<f64>,
    ) -> Result<Self> {
        let w = tape.param(&format!("{prefix}.weight"))?;
        let b = tape.opt_param(&format!("{prefix}.bias"))?;
        let lora = resolve_lora(tape, prefix, lora_alpha)?;
        Ok(Self {
            w,
            b,
            lora,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut y = g.conv2d(x, self.w, self.b, self.stride, self.pad)?;
        if let Some(l) = self.lora {
            let ws = g.shape(self.w).to_vec();
            let rank = g.shape(l.a)[0];
            let a = g.reshape(l.a, &[rank, ws[1], ws[2], ws[3]])?;
            let b = g.reshape(l.b, &[ws[0], rank, 1, 1])?;
            let down = g.conv2d(x, a, None, self.stride, self.pad)?;
            let up = g.conv2d(down, b, None, 1, 0)?;
            let up = g.scale(up, l.scale)?;
            y = g.add(y, up)?;
        }
        Ok(y)
    }
}

fn resolve_lora<T: Scalar>(
    tape: &mut Tape<'_, T>,
    prefix: &str,
    alpha: Option<f64>,
) -> Result<Option<LoraVars<T>>> {
    let (Some(alpha), true) = (alpha, tape.has(&format!("{prefix}.lora_a"))) else {
        return Ok(None);
    };
    let a = tape.param(&format!("{prefix}.lora_a"))?;
    let b = tape.param(&format!("{prefix}.lora_b"))?;
    let rank = tape.value(a).shape()[0];
    Ok(Some(LoraVars {
        a,
        b,
        scale: T::of(alpha / rank as f64),
    }))
}

/// Parameter initialization helpers shared by the model builders.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> Init<'_, T> {
    /// Linear `[fan_in, fan_out]` with LeCun-normal weights, optionally zeroed.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, zero: bool) -> Result<()> {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            self.rng.normal_scaled(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
        };
        self.store.insert(format!("{prefix}.weight"), w)?;
        if bias {
            self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Result<()> {
        let fan_in = cin * k * k;
        let w = if zero {
            Tensor::zeros(&[cout, cin, k, k])
        } else {
            self.rng.normal_scaled(&[cout, cin, k, k], (1.0 / fan_in as f64).sqrt())
        };
        self.store.insert(format!("{prefix}.weight"), w)?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))
    }

    pub fn norm(&mut self, prefix: &str, n: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(&[n]))?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(&[n]))
    }
}
