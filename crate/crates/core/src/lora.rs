//! Low-rank adapters and the extractable plug-in.
//!
//! A layer with weight `W` gains factors `A [r, in]` and `B [out, r]` and
//! computes `W·x + (α/r)·B·(A·x)`. For convolutions `in` is the flattened
//! kernel `cin·k·k`.

use std::path::Path;

use crate::error::{config_err, shape_err, Error, Result};
use crate::io::{write_tensor_table, write_u32, write_u64, Reader};
use crate::numerics::{Rng, Tensor};
use crate::params::ParamRole;
use crate::scalar::Scalar;
use crate::unet::{glob_match, LayerKind, UNet};

const PLUGIN_MAGIC: &[u8; 4] = b"VMIX";
const PLUGIN_VERSION: u32 = 1;
const ALPHA_KEY: &str = "meta.lora_alpha";

/// Attention projections and residual-block convolutions.
pub fn default_selector() -> Vec<String> {
    ["*.self.*", "*.cross.q", "*.cross.kc", "*.cross.vc", "*.cross.o", "*.conv1", "*.conv2"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// `*`-glob patterns over layer prefixes such as `up.1.attn.cross.q`.
    pub selector: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            selector: default_selector(),
        }
    }
}

fn factor_dims(kind: LayerKind) -> (usize, usize) {
    match kind {
        LayerKind::Linear { fan_in, fan_out } => (fan_in, fan_out),
        LayerKind::Conv { cin, cout, k } => (cin * k * k, cout),
    }
}

/// Adds adapters to every layer matched by the selector and returns their
/// prefixes. Each pattern must match at least one layer.
pub fn attach<T: Scalar>(net: &mut UNet<T>, cfg: &LoraConfig, seed: u64) -> Result<Vec<String>> {
    if cfg.rank == 0 {
        return config_err("LoRA rank must be at least 1");
    }
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return config_err(format!("LoRA alpha must be positive, got {}", cfg.alpha));
    }
    if net.has_lora() {
        return config_err("LoRA adapters already attached");
    }
    let layers = net.adaptable_layers();
    for pat in &cfg.selector {
        if !layers.iter().any(|(p, _)| glob_match(pat, p)) {
            return config_err(format!("LoRA selector {pat:?} matches no layer"));
        }
    }
    let mut rng = Rng::derive(seed, 0x10a);
    let mut chosen = Vec::new();
    for (prefix, kind) in layers {
        if !cfg.selector.iter().any(|pat| glob_match(pat, &prefix)) {
            continue;
        }
        let (fan_in, fan_out) = factor_dims(kind);
        let a = rng.normal_scaled(&[cfg.rank, fan_in], (1.0 / fan_in as f64).sqrt());
        net.store_mut().insert(format!("{prefix}.lora_a"), a)?;
        net.store_mut()
            .insert(format!("{prefix}.lora_b"), Tensor::zeros(&[fan_out, cfg.rank]))?;
        chosen.push(prefix);
    }
    net.set_lora_alpha(Some(cfg.alpha));
    Ok(chosen)
}

/// Removes all adapters, leaving the base weights untouched.
pub fn detach<T: Scalar>(net: &mut UNet<T>) {
    net.store_mut().remove_where(|n| ParamRole::of(n) == ParamRole::Lora);
    net.set_lora_alpha(None);
}

/// `W + scale·ΔW` where `ΔW = B·A`, laid out like `W`: transposed for linear
/// weights stored `[in, out]`, reshaped for convolution kernels.
pub fn merge_weight<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (r, fan_in) = a.dims2()?;
    let (fan_out, r2) = b.dims2()?;
    if r != r2 {
        return shape_err(format!("LoRA factors {:?} and {:?} disagree on rank", a.shape(), b.shape()));
    }
    let delta = match w.shape() {
        &[i, o] if i == fan_in && o == fan_out => a.matmul_ex(true, b, true)?,
        &[o, ci, k1, k2] if o == fan_out && ci * k1 * k2 == fan_in => b.matmul(a)?.reshape(w.shape())?,
        s => {
            return shape_err(format!(
                "weight {s:?} incompatible with factors {:?}, {:?}",
                a.shape(),
                b.shape()
            ))
        }
    };
    w.zip_map(&delta, |x, d| x + scale * d)
}

/// A copy of `net` with every adapter folded into its base weight.
pub fn merge<T: Scalar>(net: &UNet<T>) -> Result<UNet<T>> {
    let mut out = net.clone();
    let Some(alpha) = net.lora_alpha() else {
        return Ok(out);
    };
    let prefixes: Vec<String> = net
        .store()
        .names()
        .filter_map(|n| n.strip_suffix(".lora_a").map(str::to_string))
        .collect();
    for p in prefixes {
        let a = net.store().require(&format!("{p}.lora_a"))?;
        let b = net.store().require(&format!("{p}.lora_b"))?;
        let w = net.store().require(&format!("{p}.weight"))?;
        let scale = T::of(alpha / a.shape()[0] as f64);
        out.store_mut().set(&format!("{p}.weight"), merge_weight(w, a, b, scale)?)?;
    }
    detach(&mut out);
    Ok(out)
}

/// Projection weights, aesthetic value projections and LoRA factors,
/// tagged with the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Plugin {
    pub fingerprint: u64,
    pub lora_alpha: Option<f64>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn extract_plugin(net: &UNet<f32>) -> Result<Plugin> {
    if !net.has_vmix() {
        return config_err("model has no VMix weights to extract");
    }
    let tensors = net
        .store()
        .iter()
        .filter(|(n, _)| ParamRole::of(n).is_adapter())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok(Plugin {
        fingerprint: net.fingerprint(),
        lora_alpha: net.lora_alpha().filter(|_| net.has_lora()),
        tensors,
    })
}

/// Installs a plug-in on a base model without adapters. With `with_lora`
/// false the LoRA factors are skipped.
pub fn apply_plugin(base: &UNet<f32>, plugin: &Plugin, with_lora: bool) -> Result<UNet<f32>> {
    let found = base.fingerprint();
    if found != plugin.fingerprint {
        return Err(Error::Architecture {
            expected: plugin.fingerprint,
            found,
        });
    }
    if base.store().names().any(|n| ParamRole::of(n).is_adapter()) {
        return config_err("plug-ins apply to a base model without adapters");
    }
    let mut net = base.clone();
    let mut any_lora = false;
    for (name, t) in &plugin.tensors {
        match ParamRole::of(name) {
            ParamRole::Base => return config_err(format!("plug-in carries base parameter {name}")),
            ParamRole::Lora if !with_lora => continue,
            ParamRole::Lora => {
                let layer = name.rsplit_once('.').map(|(p, _)| p).unwrap_or(name);
                if !net.store().contains(&format!("{layer}.weight")) {
                    return config_err(format!("plug-in adapts unknown layer {layer}"));
                }
                any_lora = true;
            }
            _ => {}
        }
        net.store_mut().insert(name.clone(), t.clone())?;
    }
    if any_lora {
        let alpha = plugin
            .lora_alpha
            .ok_or_else(|| Error::Config("plug-in has LoRA factors but no alpha".into()))?;
        net.set_lora_alpha(Some(alpha));
    }
    if !net.has_vmix() {
        return config_err("plug-in lacks projection weights");
    }
    Ok(net)
}

impl Plugin {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PLUGIN_MAGIC);
        let alpha = self.lora_alpha.map(|a| Tensor::scalar(a as f32));
        let entries: Vec<(&str, &Tensor<f32>)> = alpha
            .iter()
            .map(|a| (ALPHA_KEY, a))
            .chain(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        // writes into a Vec cannot fail
        write_u32(&mut out, PLUGIN_VERSION).unwrap();
        write_u64(&mut out, self.fingerprint).unwrap();
        write_tensor_table(&mut out, entries.into_iter()).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("vmix.plugin", bytes);
        r.header(PLUGIN_MAGIC, PLUGIN_VERSION)?;
        let fingerprint = r.u64()?;
        let mut tensors = r.tensor_table()?;
        r.finish()?;
        let mut lora_alpha = None;
        if let Some(i) = tensors.iter().position(|(n, _)| n == ALPHA_KEY) {
            lora_alpha = Some(tensors.remove(i).1.data()[0] as f64);
        }
        Ok(Self {
            fingerprint,
            lora_alpha,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
