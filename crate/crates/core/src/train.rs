//! AdamW training over a parameter mask, with per-step random streams so a
//! resumed run draws exactly what an unbroken one would.

use std::collections::HashMap;

use crate::aesemb::{AesEmb, AestheticAssignment};
use crate::diffusion::{training_loss, DiffusionSchedule, TrainItem, Unconditional};
use crate::error::{config_err, Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::params::Tape;
use crate::synthdata::Image;
use crate::textenc::TextEncoder;
use crate::unet::UNet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Probability of replacing a sample's conditions by the unconditional pair.
    pub p_drop: f64,
    pub lambda: f64,
    pub log_every: usize,
    /// 0 saves only at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr: 1e-3,
            warmup: 0,
            cosine: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            p_drop: 0.1,
            lambda: 1.0,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0x7a1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("invalid optimizer settings");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return config_err("p_drop must be in [0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return config_err("lambda, grad_clip and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Which parameters a run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Every base parameter; used to pretrain the denoiser.
    Base,
    /// Projection, aesthetic values and LoRA factors; the base is frozen.
    Adapter,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Adapter => "adapter",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "adapter" => Ok(Stage::Adapter),
            _ => config_err(format!("unknown stage {s:?}")),
        }
    }

    pub fn mask<T: crate::Scalar>(self, net: &UNet<T>) -> Vec<bool> {
        match self {
            Stage::Base => net.base_mask(),
            Stage::Adapter => net.adapter_mask(),
        }
    }
}

/// First and second moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: HashMap<String, (Tensor<f32>, Tensor<f32>)>,
}

/// Training examples with their conditions resolved.
pub struct TrainData {
    pub items: Vec<TrainItem<f32>>,
    pub uncond: Unconditional<f32>,
}

impl TrainData {
    /// Encodes every caption once and selects each image's aesthetic rows.
    pub fn build<'a>(
        samples: impl IntoIterator<Item = (&'a Image, &'a str, &'a AestheticAssignment)>,
        enc: &TextEncoder,
        aesemb: &AesEmb,
    ) -> Result<Self> {
        let mut cache: HashMap<String, Tensor<f32>> = HashMap::new();
        let mut items = Vec::new();
        for (image, caption, assignment) in samples {
            let f_c = match cache.get(caption) {
                Some(t) => t.clone(),
                None => {
                    let t = enc.encode_text(caption)?.tokens;
                    cache.insert(caption.to_string(), t.clone());
                    t
                }
            };
            items.push(TrainItem {
                image: image.to_tensor(),
                f_c,
                f_t: Some(aesemb.select(assignment)?),
            });
        }
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            items,
            uncond: unconditional(enc)?,
        })
    }
}

/// Empty-prompt tokens and a zero `f_a`.
pub fn unconditional(enc: &TextEncoder) -> Result<Unconditional<f32>> {
    let f_c = enc.encode_text("")?.tokens;
    let f_a = Tensor::zeros(f_c.shape());
    Ok(Unconditional { f_c, f_a })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub stage: Stage,
    pub step: u64,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            stage,
            step: 0,
            adam: AdamState::default(),
        })
    }

    fn step_rng(&self) -> Rng {
        Rng::derive(self.cfg.seed, self.step)
    }

    fn batch<'d>(&self, rng: &mut Rng, data: &'d TrainData) -> Vec<&'d TrainItem<f32>> {
        (0..self.cfg.batch_size)
            .map(|_| &data.items[rng.below(data.items.len())])
            .collect()
    }

    /// Loss the next step would see, without updating anything.
    pub fn peek_loss(&self, net: &UNet<f32>, data: &TrainData, sched: &DiffusionSchedule) -> Result<f64> {
        let mut rng = self.step_rng();
        let batch = self.batch(&mut rng, data);
        let mut tape = Tape::inference(net.store());
        let loss = training_loss(
            &mut tape,
            net,
            &batch,
            &data.uncond,
            sched,
            self.cfg.p_drop,
            self.cfg.lambda as f32,
            &mut rng,
        )?;
        Ok(tape.value(loss).item() as f64)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(&mut self, net: &mut UNet<f32>, data: &TrainData, sched: &DiffusionSchedule) -> Result<f64> {
        let mask = self.stage.mask(net);
        if !mask.iter().any(|&m| m) {
            return config_err(format!("nothing to train in the {} stage", self.stage.name()));
        }
        let mut rng = self.step_rng();
        let batch = self.batch(&mut rng, data);
        let (loss, mut grads) = {
            let mut tape = Tape::new(net.store(), mask);
            let loss = training_loss(
                &mut tape,
                net,
                &batch,
                &data.uncond,
                sched,
                self.cfg.p_drop,
                self.cfg.lambda as f32,
                &mut rng,
            )?;
            (tape.value(loss).item() as f64, tape.param_grads(loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        if self.cfg.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.grad_clip {
                let k = (self.cfg.grad_clip / norm) as f32;
                for g in grads.iter_mut().flatten() {
                    *g = g.scale(k);
                }
            }
        }
        self.apply(net, grads);
        self.step += 1;
        Ok(loss)
    }

    /// Learning rate for the current step.
    pub fn lr(&self) -> f64 {
        let c = &self.cfg;
        let s = self.step as f64;
        let mut lr = c.lr;
        if c.warmup > 0 && (self.step as usize) < c.warmup {
            lr *= (s + 1.0) / c.warmup as f64;
        }
        if c.cosine && c.steps > 0 {
            let p = (s / c.steps as f64).min(1.0);
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        }
        lr
    }

    fn apply(&mut self, net: &mut UNet<f32>, grads: Vec<Option<Tensor<f32>>>) {
        let lr = self.lr();
        let c = &self.cfg;
        self.adam.t += 1;
        let t = self.adam.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.adam_eps as f32;
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let store = net.store_mut();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let name = store.at(i).0.to_string();
            let (m, v) = self
                .adam
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = store.at_mut(i);
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), w.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (1.0 - b1) * gk;
                vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                if c.weight_decay > 0.0 {
                    wd[k] *= decay;
                }
                wd[k] -= step_size * md[k] / (vd[k].sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Runs `n` steps, calling `log` every `log_every` steps with the mean
    /// loss since the previous call.
    pub fn run(
        &mut self,
        net: &mut UNet<f32>,
        data: &TrainData,
        sched: &DiffusionSchedule,
        n: usize,
        log: &mut dyn FnMut(u64, f64),
    ) -> Result<f64> {
        let every = self.cfg.log_every.max(1);
        let (mut acc, mut count, mut last) = (0.0, 0, f64::NAN);
        for _ in 0..n {
            last = self.step(net, data, sched)?;
            acc += last;
            count += 1;
            if self.step % every as u64 == 0 {
                log(self.step, acc / count as f64);
                acc = 0.0;
                count = 0;
            }
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aesemb::{build_aesemb, default_label_pairs};
    use crate::synthdata::{make_dataset, DatasetConfig};
    use crate::textenc::TextConfig;
    use crate::unet::{UNet32, UNetConfig};

    fn setup() -> (UNet32, TrainData) {
        let tc = TextConfig {
            context_len: 4,
            dim: 8,
            layers: 1,
            heads: 2,
            ..Default::default()
        };
        let enc = TextEncoder::standard(tc).unwrap();
        let pairs = default_label_pairs();
        let emb = build_aesemb(&pairs, &enc).unwrap();
        let cfg = UNetConfig {
            image_size: 8,
            base_channels: 8,
            attention_resolutions: vec![4],
            heads: 2,
            time_embed_dim: 8,
            groups: 4,
            context_len: 4,
            context_dim: 8,
            label_pairs: 4,
            timesteps: 1000,
            ..Default::default()
        };
        let net = UNet32::new_base(cfg, 1).unwrap();
        let ds = make_dataset(
            16,
            2,
            &DatasetConfig {
                size: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let captions: Vec<String> = ds.iter().map(|s| s.content.caption()).collect();
        let data = TrainData::build(
            ds.iter().zip(&captions).map(|(s, c)| (&s.image, c.as_str(), &s.assignment)),
            &enc,
            &emb,
        )
        .unwrap();
        (net, data)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            lr: 3e-3,
            ..Default::default()
        }
    }

    #[test]
    fn adapter_stage_leaves_base_bits_alone() {
        let (mut net, data) = setup();
        let sched = DiffusionSchedule::default();
        // a fresh base has a zero output layer, which blocks all upstream gradient
        let mut pre = Trainer::new(cfg(), Stage::Base).unwrap();
        for _ in 0..5 {
            pre.step(&mut net, &data, &sched).unwrap();
        }
        net.attach_vmix(3).unwrap();
        crate::lora::attach(&mut net, &Default::default(), 4).unwrap();
        let before = net.clone();
        let mut tr = Trainer::new(cfg(), Stage::Adapter).unwrap();
        for _ in 0..3 {
            tr.step(&mut net, &data, &sched).unwrap();
        }
        let mut changed = 0;
        for ((n, a), (_, b)) in before.store().iter().zip(net.store().iter()) {
            if crate::params::ParamRole::of(n).is_adapter() {
                changed += usize::from(!a.bit_eq(b));
            } else {
                assert!(a.bit_eq(b), "{n} moved");
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn base_stage_without_adapters_needs_base_mask() {
        let (mut net, data) = setup();
        let sched = DiffusionSchedule::default();
        let mut tr = Trainer::new(cfg(), Stage::Adapter).unwrap();
        assert!(tr.step(&mut net, &data, &sched).is_err());
        let mut tr = Trainer::new(cfg(), Stage::Base).unwrap();
        let peek = tr.peek_loss(&net, &data, &sched).unwrap();
        let loss = tr.step(&mut net, &data, &sched).unwrap();
        assert_eq!(peek.to_bits(), loss.to_bits());
    }

    #[test]
    fn steps_are_reproducible() {
        let sched = DiffusionSchedule::default();
        let run = || {
            let (mut net, data) = setup();
            let mut tr = Trainer::new(cfg(), Stage::Base).unwrap();
            let losses: Vec<u64> = (0..3).map(|_| tr.step(&mut net, &data, &sched).unwrap().to_bits()).collect();
            (losses, net)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a, b);
        assert_eq!(na.store(), nb.store());
    }

    #[test]
    fn base_training_reduces_loss() {
        let (mut net, data) = setup();
        let sched = DiffusionSchedule::default();
        let mut tr = Trainer::new(
            TrainConfig {
                batch_size: 4,
                lr: 3e-3,
                ..Default::default()
            },
            Stage::Base,
        )
        .unwrap();
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..200 {
            let l = tr.step(&mut net, &data, &sched).unwrap();
            if i < 20 {
                first += l;
            }
            if i >= 180 {
                last += l;
            }
        }
        assert!(last < 0.8 * first, "first {first} last {last}");
    }
}
