//! Pixel-space denoiser: residual blocks, stride-2 downsampling, nearest
//! upsampling with skip concatenation, and transformer blocks
//! (self-attention, then value-mixed cross-attention, then feed-forward) at
//! the configured resolutions.

use crate::aesemb::Fnv;
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{ConvVars, Init, LinearVars};
use crate::numerics::{Rng, Tensor, Var};
use crate::params::{ParamRole, ParamStore, Tape};
use crate::scalar::Scalar;
use crate::vmixcond::{self, mixed_attention, CrossAttnVars, MixedAttention, ProjectionWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Feature-map sizes that carry a transformer block.
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Content tokens `C` and their width `d`.
    pub context_len: usize,
    pub context_dim: usize,
    /// Aesthetic label pairs `N`.
    pub label_pairs: usize,
    /// Number of diffusion steps `T`; valid timesteps are `0..T`.
    pub timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 64,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![16, 8],
            heads: 4,
            time_embed_dim: 256,
            groups: 8,
            context_len: 16,
            context_dim: 64,
            label_pairs: 4,
            timesteps: 1000,
        }
    }
}

impl UNetConfig {
    /// Resolution of each level, followed by the middle block's.
    pub fn level_sizes(&self) -> Vec<usize> {
        (0..=self.channel_mults.len()).map(|i| self.image_size >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.channel_mults.contains(&0) {
            return config_err("channel_mults must be non-empty and positive");
        }
        if self.image_size == 0 || self.image_size % (1 << levels) != 0 {
            return config_err(format!(
                "image_size {} must be divisible by {}",
                self.image_size,
                1 << levels
            ));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.heads == 0 {
            return config_err("channels and heads must be positive");
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return config_err("time_embed_dim must be even");
        }
        let sizes = self.level_sizes();
        for r in &self.attention_resolutions {
            if !sizes.contains(r) {
                return config_err(format!("attention resolution {r} is not one of {sizes:?}"));
            }
        }
        let mut widths: Vec<usize> = self.channel_mults.iter().map(|m| m * self.base_channels).collect();
        // up-path concatenations
        for i in 0..levels {
            let below = if i + 1 < levels { widths[i + 1] } else { widths[levels - 1] };
            widths.push(widths[i] + below);
        }
        for w in widths {
            if self.groups == 0 || w % self.groups != 0 {
                return config_err(format!("{w} channels are not divisible into {} groups", self.groups));
            }
            if w % self.heads != 0 {
                return config_err(format!("{w} channels are not divisible by {} heads", self.heads));
            }
        }
        if self.context_len == 0 || self.context_dim == 0 || self.label_pairs == 0 || self.timesteps == 0 {
            return config_err("context, label pair and timestep counts must be positive");
        }
        Ok(())
    }
}

/// Shape of an adaptable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear { fan_in: usize, fan_out: usize },
    Conv { cin: usize, cout: usize, k: usize },
}

/// One cross-attention evaluation inside a forward pass.
#[derive(Clone, Debug)]
pub struct BlockRecord {
    pub prefix: String,
    /// Normalized tokens entering cross-attention, `[L, d_model]`.
    pub x_in: Var,
    pub f_c: Var,
    pub f_a: Option<Var>,
    pub mix: MixedAttention,
}

pub struct ForwardOutput {
    pub eps: Var,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Clone, Debug)]
pub struct UNet<T: Scalar> {
    cfg: UNetConfig,
    store: ParamStore<T>,
    lora_alpha: Option<f64>,
}

pub type UNet32 = UNet<f32>;
pub type UNet64 = UNet<f64>;

const GN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
const FF_MULT: usize = 2;

struct Builder<'a, T> {
    init: Init<'a, T>,
    cfg: &'a UNetConfig,
}

impl<T: Scalar> Builder<'_, T> {
    fn resblock(&mut self, p: &str, cin: usize, cout: usize) -> Result<()> {
        self.init.norm(&format!("{p}.norm1"), cin)?;
        self.init.conv(&format!("{p}.conv1"), cin, cout, 3, false)?;
        self.init.linear(&format!("{p}.temb"), self.cfg.time_embed_dim, cout, true, false)?;
        self.init.norm(&format!("{p}.norm2"), cout)?;
        self.init.conv(&format!("{p}.conv2"), cout, cout, 3, true)?;
        if cin != cout {
            self.init.conv(&format!("{p}.skip"), cin, cout, 1, false)?;
        }
        Ok(())
    }

    fn transformer(&mut self, p: &str, dm: usize) -> Result<()> {
        let d = self.cfg.context_dim;
        self.init.norm(&format!("{p}.ln1"), dm)?;
        for proj in ["q", "k", "v"] {
            self.init.linear(&format!("{p}.self.{proj}"), dm, dm, false, false)?;
        }
        self.init.linear(&format!("{p}.self.o"), dm, dm, true, true)?;
        self.init.norm(&format!("{p}.ln2"), dm)?;
        self.init.linear(&format!("{p}.cross.q"), dm, dm, false, false)?;
        self.init.linear(&format!("{p}.cross.kc"), d, dm, false, false)?;
        self.init.linear(&format!("{p}.cross.vc"), d, dm, false, false)?;
        self.init.linear(&format!("{p}.cross.o"), dm, dm, true, true)?;
        self.init.norm(&format!("{p}.ln3"), dm)?;
        self.init.linear(&format!("{p}.ff.w1"), dm, FF_MULT * dm, true, false)?;
        self.init.linear(&format!("{p}.ff.w2"), FF_MULT * dm, dm, true, true)
    }
}

/// `[sin(t·ω_k), cos(t·ω_k)]` with `ω_k = 10000^(-k / (D/2))`, as a `[1, D]` row.
pub fn timestep_sinusoid<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let w = (-(k as f64) / half as f64 * 10000f64.ln()).exp();
        let a = t as f64 * w;
        T::of(if i < half { a.sin() } else { a.cos() })
    })
}

/// Shell-style match supporting `*` wildcards.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let (mut star, mut mark) = (None, 0);
    while ti < t.len() {
        if pi < p.len() && p[pi] != '*' && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

impl<T: Scalar> UNet<T> {
    /// A base model without adapters; weights drawn from `seed`.
    pub fn new_base(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x0b45e);
        let mut b = Builder {
            init: Init {
                store: &mut store,
                rng: &mut rng,
            },
            cfg: &cfg,
        };
        let te = cfg.time_embed_dim;
        b.init.linear("time.lin1", te, te, true, false)?;
        b.init.linear("time.lin2", te, te, true, false)?;
        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let sizes = cfg.level_sizes();
        b.init.conv("in.conv", cfg.in_channels, cfg.base_channels, 3, false)?;
        let mut ch = cfg.base_channels;
        for (i, &w) in widths.iter().enumerate() {
            b.resblock(&format!("down.{i}.res"), ch, w)?;
            if cfg.attention_resolutions.contains(&sizes[i]) {
                b.transformer(&format!("down.{i}.attn"), w)?;
            }
            b.init.conv(&format!("down.{i}.ds"), w, w, 3, false)?;
            ch = w;
        }
        b.resblock("mid.res1", ch, ch)?;
        if cfg.attention_resolutions.contains(&sizes[widths.len()]) {
            b.transformer("mid.attn", ch)?;
        }
        b.resblock("mid.res2", ch, ch)?;
        for (i, &w) in widths.iter().enumerate().rev() {
            b.resblock(&format!("up.{i}.res"), ch + w, w)?;
            if cfg.attention_resolutions.contains(&sizes[i]) {
                b.transformer(&format!("up.{i}.attn"), w)?;
            }
            ch = w;
        }
        b.init.norm("out.norm", ch)?;
        b.init.conv("out.conv", ch, cfg.in_channels, 3, true)?;
        Ok(Self {
            cfg,
            store,
            lora_alpha: None,
        })
    }

    /// Rebuilds a model from stored tensors. The base parameters must match
    /// what `cfg` describes, name for name and shape for shape.
    pub fn from_parts(cfg: UNetConfig, tensors: Vec<(String, Tensor<T>)>, lora_alpha: Option<f64>) -> Result<Self> {
        let expected = Self::new_base(cfg.clone(), 0)?.fingerprint();
        let mut store = ParamStore::new();
        for (name, t) in tensors {
            store.insert(name, t)?;
        }
        let net = Self { cfg, store, lora_alpha };
        let found = net.fingerprint();
        if found != expected {
            return Err(Error::Architecture { expected, found });
        }
        if net.has_lora() && lora_alpha.is_none() {
            return config_err("LoRA factors present without an alpha");
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn lora_alpha(&self) -> Option<f64> {
        self.lora_alpha
    }

    pub(crate) fn set_lora_alpha(&mut self, alpha: Option<f64>) {
        self.lora_alpha = alpha;
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            lora_alpha: self.lora_alpha,
        }
    }

    /// Prefixes of every transformer block, in forward order.
    pub fn attention_blocks(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .store
            .names()
            .filter_map(|n| n.strip_suffix(".cross.kc.weight").map(str::to_string))
            .collect();
        out.dedup();
        out
    }

    pub fn has_vmix(&self) -> bool {
        self.store.contains(vmixcond::PROJ_UP)
    }

    pub fn has_lora(&self) -> bool {
        self.store.names().any(|n| ParamRole::of(n) == ParamRole::Lora)
    }

    /// Adds the projection layer and, in every block, a value projection for
    /// the aesthetic branch initialized as a copy of the content one.
    pub fn attach_vmix(&mut self, seed: u64) -> Result<()> {
        if self.has_vmix() {
            return config_err("VMix branch already attached");
        }
        let mut rng = Rng::derive(seed, 0x7a11);
        ProjectionWeights::init(self.cfg.label_pairs, self.cfg.context_len, self.cfg.context_dim, &mut rng)
            .insert_into(&mut self.store)?;
        for p in self.attention_blocks() {
            let vc = self.store.require(&format!("{p}.cross.vc.weight"))?.clone();
            self.store.insert(format!("{p}.cross.va.weight"), vc)?;
        }
        Ok(())
    }

    pub fn detach_vmix(&mut self) {
        self.store.remove_where(|n| {
            matches!(ParamRole::of(n), ParamRole::Projection | ParamRole::AestheticValue)
        });
    }

    /// Every layer that can carry a low-rank adapter, by prefix.
    pub fn adaptable_layers(&self) -> Vec<(String, LayerKind)> {
        self.store
            .iter()
            .filter(|(n, _)| ParamRole::of(n) == ParamRole::Base)
            .filter_map(|(n, t)| {
                let prefix = n.strip_suffix(".weight")?;
                let kind = match t.shape() {
                    &[fan_in, fan_out] => LayerKind::Linear { fan_in, fan_out },
                    &[cout, cin, k, _] => LayerKind::Conv { cin, cout, k },
                    _ => return None,
                };
                Some((prefix.to_string(), kind))
            })
            .collect()
    }

    /// Frozen and trainable parameter names. Adapter parameters are
    /// trainable, everything else frozen.
    pub fn parameter_partition(&self) -> (Vec<String>, Vec<String>) {
        let (trainable, frozen): (Vec<_>, Vec<_>) = self
            .store
            .names()
            .map(str::to_string)
            .partition(|n| ParamRole::of(n).is_adapter());
        (frozen, trainable)
    }

    pub fn adapter_mask(&self) -> Vec<bool> {
        self.store.names().map(|n| ParamRole::of(n).is_adapter()).collect()
    }

    pub fn base_mask(&self) -> Vec<bool> {
        self.store.names().map(|n| !ParamRole::of(n).is_adapter()).collect()
    }

    /// Hash of the configuration and of every base parameter's name and
    /// shape; adapters do not contribute.
    pub fn fingerprint(&self) -> u64 {
        let c = &self.cfg;
        let mut h = Fnv::new();
        for v in [
            c.image_size,
            c.in_channels,
            c.base_channels,
            c.heads,
            c.time_embed_dim,
            c.groups,
            c.context_len,
            c.context_dim,
            c.label_pairs,
            c.timesteps,
        ] {
            h.u64(v as u64);
        }
        for &m in &c.channel_mults {
            h.u64(m as u64);
        }
        h.u64(u64::MAX);
        for &r in &c.attention_resolutions {
            h.u64(r as u64);
        }
        for (n, t) in self.store.iter() {
            if ParamRole::of(n) == ParamRole::Base {
                h.str(n);
                for &e in t.shape() {
                    h.u64(e as u64);
                }
            }
        }
        h.finish()
    }

    /// `f_a` from `f_t` on a tape bound to this model.
    pub fn project(&self, tape: &mut Tape<'_, T>, f_t: Var) -> Result<Var> {
        vmixcond::project_on_tape(tape, f_t)
    }

    /// `f_a [C, d]` for a fixed `f_t`.
    pub fn project_aesthetic(&self, f_t: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.has_vmix() {
            return config_err("model has no VMix branch");
        }
        vmixcond::project_aesthetic(f_t, &ProjectionWeights::from_store(&self.store)?)
    }

    fn check_inputs(&self, tape: &Tape<'_, T>, z: Var, t: usize, f_c: Var, f_a: Option<Var>) -> Result<()> {
        let c = &self.cfg;
        let s = c.image_size;
        if tape.g.shape(z) != [c.in_channels, s, s] {
            return shape_err(format!(
                "input {:?}, expected [{}, {s}, {s}]",
                tape.g.shape(z),
                c.in_channels
            ));
        }
        if t >= c.timesteps {
            return Err(Error::Range(format!("timestep {t} outside 0..{}", c.timesteps)));
        }
        let ctx = [c.context_len, c.context_dim];
        if tape.g.shape(f_c) != ctx {
            return shape_err(format!("f_c {:?}, expected {ctx:?}", tape.g.shape(f_c)));
        }
        if let Some(a) = f_a {
            if tape.g.shape(a) != ctx {
                return shape_err(format!("f_a {:?}, expected {ctx:?}", tape.g.shape(a)));
            }
        }
        Ok(())
    }

    /// `ε_θ(z_t, t, f_c, f_a)`. `f_a` is ignored when no VMix branch is
    /// attached; every block receives the same `(f_a, λ)`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        t: usize,
        f_c: Var,
        f_a: Option<Var>,
        lambda: T,
    ) -> Result<ForwardOutput> {
        self.check_inputs(tape, z, t, f_c, f_a)?;
        let f_a = if self.has_vmix() { f_a } else { None };
        let mut cx = Ctx {
            net: self,
            tape,
            f_c,
            f_a,
            lambda,
            temb: z,
            blocks: Vec::new(),
        };
        let te = cx.tape.g.constant(timestep_sinusoid(t, self.cfg.time_embed_dim));
        let te = cx.linear("time.lin1", te)?;
        let te = cx.tape.g.silu(te)?;
        let te = cx.linear("time.lin2", te)?;
        cx.temb = cx.tape.g.silu(te)?;

        let sizes = self.cfg.level_sizes();
        let levels = self.cfg.channel_mults.len();
        let mut h = cx.conv("in.conv", z, 1, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for (i, &size) in sizes.iter().enumerate().take(levels) {
            h = cx.resblock(&format!("down.{i}.res"), h)?;
            if self.cfg.attention_resolutions.contains(&size) {
                h = cx.transformer(&format!("down.{i}.attn"), h)?;
            }
            skips.push(h);
            h = cx.conv(&format!("down.{i}.ds"), h, 2, 1)?;
        }
        h = cx.resblock("mid.res1", h)?;
        if self.cfg.attention_resolutions.contains(&sizes[levels]) {
            h = cx.transformer("mid.attn", h)?;
        }
        h = cx.resblock("mid.res2", h)?;
        for i in (0..levels).rev() {
            h = cx.tape.g.upsample2x(h)?;
            h = cx.tape.g.concat_channels(h, skips[i])?;
            h = cx.resblock(&format!("up.{i}.res"), h)?;
            if self.cfg.attention_resolutions.contains(&sizes[i]) {
                h = cx.transformer(&format!("up.{i}.attn"), h)?;
            }
        }
        h = cx.group_norm("out.norm", h)?;
        h = cx.tape.g.silu(h)?;
        let eps = cx.conv("out.conv", h, 1, 1)?;
        Ok(ForwardOutput {
            eps,
            blocks: cx.blocks,
        })
    }

    /// Inference-only prediction.
    pub fn predict(
        &self,
        z: &Tensor<T>,
        t: usize,
        f_c: &Tensor<T>,
        f_a: Option<&Tensor<T>>,
        lambda: T,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.store);
        let zv = tape.g.constant_ref(z);
        let cv = tape.g.constant_ref(f_c);
        let av = f_a.map(|a| tape.g.constant_ref(a));
        let out = self.forward(&mut tape, zv, t, cv, av, lambda)?;
        Ok(tape.g.value(out.eps).clone())
    }

    /// Re-evaluates the cross-attention of one recorded block at another `λ`
    /// on the same inputs.
    pub fn remix(&self, tape: &mut Tape<'_, T>, rec: &BlockRecord, lambda: T) -> Result<MixedAttention> {
        let vars = cross_vars(tape, &rec.prefix, self.lora_alpha, self.cfg.heads)?;
        mixed_attention(&mut tape.g, rec.x_in, rec.f_c, rec.f_a, lambda, &vars)
    }
}

fn cross_vars<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &str,
    alpha: Option<f64>,
    heads: usize,
) -> Result<CrossAttnVars<T>> {
    Ok(CrossAttnVars {
        q: LinearVars::resolve(tape, &format!("{p}.cross.q"), alpha)?,
        kc: LinearVars::resolve(tape, &format!("{p}.cross.kc"), alpha)?,
        vc: LinearVars::resolve(tape, &format!("{p}.cross.vc"), alpha)?,
        va: tape.opt_param(&format!("{p}.cross.va.weight"))?,
        heads,
    })
}

struct Ctx<'n, 't, 's, T: Scalar> {
    net: &'n UNet<T>,
    tape: &'t mut Tape<'s, T>,
    f_c: Var,
    f_a: Option<Var>,
    lambda: T,
    temb: Var,
    blocks: Vec<BlockRecord>,
}

impl<T: Scalar> Ctx<'_, '_, '_, T> {
    fn linear(&mut self, p: &str, x: Var) -> Result<Var> {
        LinearVars::resolve(self.tape, p, self.net.lora_alpha)?.forward(&mut self.tape.g, x)
    }

    fn conv(&mut self, p: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        ConvVars::resolve(self.tape, p, stride, pad, self.net.lora_alpha)?.forward(&mut self.tape.g, x)
    }

    fn group_norm(&mut self, p: &str, x: Var) -> Result<Var> {
        let gamma = self.tape.param(&format!("{p}.gamma"))?;
        let beta = self.tape.param(&format!("{p}.beta"))?;
        self.tape.g.group_norm(x, gamma, beta, self.net.cfg.groups, T::of(GN_EPS))
    }

    fn layer_norm(&mut self, p: &str, x: Var) -> Result<Var> {
        let gamma = self.tape.param(&format!("{p}.gamma"))?;
        let beta = self.tape.param(&format!("{p}.beta"))?;
        self.tape.g.layer_norm(x, gamma, beta, T::of(LN_EPS))
    }

    fn resblock(&mut self, p: &str, x: Var) -> Result<Var> {
        let h = self.group_norm(&format!("{p}.norm1"), x)?;
        let h = self.tape.g.silu(h)?;
        let h = self.conv(&format!("{p}.conv1"), h, 1, 1)?;
        let shift = self.linear(&format!("{p}.temb"), self.temb)?;
        let cout = self.tape.g.shape(shift)[1];
        let shift = self.tape.g.reshape(shift, &[cout])?;
        let h = self.tape.g.add_channel_bias(h, shift)?;
        let h = self.group_norm(&format!("{p}.norm2"), h)?;
        let h = self.tape.g.silu(h)?;
        let h = self.conv(&format!("{p}.conv2"), h, 1, 1)?;
        let skip = if self.tape.has(&format!("{p}.skip.weight")) {
            self.conv(&format!("{p}.skip"), x, 1, 0)?
        } else {
            x
        };
        self.tape.g.add(skip, h)
    }

    fn transformer(&mut self, p: &str, x: Var) -> Result<Var> {
        let shape = self.tape.g.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let heads = self.net.cfg.heads;
        let flat = self.tape.g.reshape(x, &[c, hw])?;
        let mut tok = self.tape.g.transpose(flat)?;

        let h = self.layer_norm(&format!("{p}.ln1"), tok)?;
        let q = self.linear(&format!("{p}.self.q"), h)?;
        let k = self.linear(&format!("{p}.self.k"), h)?;
        let v = self.linear(&format!("{p}.self.v"), h)?;
        let probs = self.tape.g.attn_probs(q, k, heads)?;
        let a = self.tape.g.attn_apply(probs, v)?;
        let a = self.linear(&format!("{p}.self.o"), a)?;
        tok = self.tape.g.add(tok, a)?;

        let h = self.layer_norm(&format!("{p}.ln2"), tok)?;
        let vars = cross_vars(self.tape, p, self.net.lora_alpha, heads)?;
        let mix = mixed_attention(&mut self.tape.g, h, self.f_c, self.f_a, self.lambda, &vars)?;
        let a = self.linear(&format!("{p}.cross.o"), mix.out)?;
        tok = self.tape.g.add(tok, a)?;
        self.blocks.push(BlockRecord {
            prefix: p.to_string(),
            x_in: h,
            f_c: self.f_c,
            f_a: if vars.va.is_some() { self.f_a } else { None },
            mix,
        });

        let h = self.layer_norm(&format!("{p}.ln3"), tok)?;
        let h = self.linear(&format!("{p}.ff.w1"), h)?;
        let h = self.tape.g.silu(h)?;
        let h = self.linear(&format!("{p}.ff.w2"), h)?;
        tok = self.tape.g.add(tok, h)?;

        let back = self.tape.g.transpose(tok)?;
        self.tape.g.reshape(back, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            base_channels: 8,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![4, 2],
            heads: 2,
            time_embed_dim: 8,
            groups: 4,
            context_len: 4,
            context_dim: 6,
            label_pairs: 2,
            timesteps: 50,
            ..Default::default()
        }
    }

    /// Overwrites every parameter with noise so that no gradient path is
    /// trivially zero.
    pub(crate) fn randomize<T: Scalar>(net: &mut UNet<T>, seed: u64) {
        let mut rng = Rng::new(seed);
        for (_, t) in net.store_mut().values_mut() {
            let fan = t.shape().iter().skip(1).product::<usize>().max(1);
            let std = if t.rank() == 1 { 0.3 } else { (1.0 / fan as f64).sqrt() };
            let noise: Tensor<T> = rng.normal_scaled(t.shape(), std);
            *t = t.add(&noise).unwrap();
        }
    }

    fn inputs(cfg: &UNetConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = Rng::new(seed);
        (
            rng.normal_tensor(&[3, cfg.image_size, cfg.image_size]),
            rng.normal_tensor(&[cfg.context_len, cfg.context_dim]),
            rng.normal_tensor(&[cfg.label_pairs, cfg.context_dim]),
        )
    }

    #[test]
    fn default_config_layout() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.level_sizes(), vec![32, 16, 8]);
        let net = UNet32::new_base(cfg, 0).unwrap();
        assert_eq!(net.attention_blocks(), vec!["down.1.attn", "mid.attn", "up.1.attn"]);
    }

    #[test]
    fn output_shape_matches_input() {
        let net = UNet32::new_base(tiny(), 1).unwrap();
        let (z, f_c, _) = inputs(net.config(), 2);
        let eps = net.predict(&z, 3, &f_c, None, 1.0).unwrap();
        assert_eq!(eps.shape(), z.shape());
        assert!(net.predict(&z, 50, &f_c, None, 1.0).is_err());
        assert!(net.predict(&Tensor::zeros(&[3, 4, 4]), 3, &f_c, None, 1.0).is_err());
    }

    #[test]
    fn fresh_vmix_is_transparent() {
        let mut base = UNet32::new_base(tiny(), 3).unwrap();
        randomize(&mut base, 4);
        let mut vm = base.clone();
        vm.attach_vmix(5).unwrap();
        let (z, f_c, f_t) = inputs(base.config(), 6);
        let f_a = vm.project_aesthetic(&f_t).unwrap();
        let a = base.predict(&z, 7, &f_c, None, 1.0).unwrap();
        let b = vm.predict(&z, 7, &f_c, Some(&f_a), 1.0).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn lambda_zero_matches_base_for_any_weights() {
        let mut base = UNet32::new_base(tiny(), 3).unwrap();
        randomize(&mut base, 4);
        let mut vm = base.clone();
        vm.attach_vmix(5).unwrap();
        randomize(&mut vm, 8);
        // restore the base weights that randomize touched
        for (n, t) in base.store().iter() {
            vm.store_mut().set(n, t.clone()).unwrap();
        }
        let (z, f_c, f_t) = inputs(base.config(), 9);
        let f_a = vm.project_aesthetic(&f_t).unwrap();
        assert!(f_a.max_abs() > 0.0);
        let a = base.predict(&z, 7, &f_c, None, 1.0).unwrap();
        let b = vm.predict(&z, 7, &f_c, Some(&f_a), 0.0).unwrap();
        assert!(a.bit_eq(&b));
        let c = vm.predict(&z, 7, &f_c, Some(&f_a), 1.0).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn partition_rules() {
        let mut net = UNet32::new_base(tiny(), 0).unwrap();
        let (frozen, trainable) = net.parameter_partition();
        assert!(trainable.is_empty());
        assert_eq!(frozen.len(), net.store().len());
        net.attach_vmix(0).unwrap();
        let (frozen, trainable) = net.parameter_partition();
        assert_eq!(frozen.len() + trainable.len(), net.store().len());
        assert!(trainable
            .iter()
            .all(|n| n.starts_with("proj.") || n.ends_with(".cross.va.weight")));
        assert_eq!(trainable.len(), 5 + net.attention_blocks().len());
    }

    #[test]
    fn fingerprint_ignores_adapters_but_not_widths() {
        let mut a = UNet32::new_base(tiny(), 0).unwrap();
        let fp = a.fingerprint();
        a.attach_vmix(1).unwrap();
        assert_eq!(a.fingerprint(), fp);
        let wider = UNet32::new_base(UNetConfig { base_channels: 12, ..tiny() }, 0).unwrap();
        assert_ne!(wider.fingerprint(), fp);
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("*.self.*", "down.1.attn.self.q"));
        assert!(glob_match("*.conv1", "mid.res1.conv1"));
        assert!(!glob_match("*.conv1", "mid.res1.conv10"));
        assert!(glob_match("in.conv", "in.conv"));
        assert!(!glob_match("in.conv", "in.conv2"));
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig { image_size: 30, ..tiny() }.validate().is_err());
        assert!(UNetConfig { attention_resolutions: vec![3], ..tiny() }.validate().is_err());
        assert!(UNetConfig { groups: 5, ..tiny() }.validate().is_err());
        assert!(UNetConfig::default().validate().is_ok());
    }
}
