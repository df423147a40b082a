//! Noise schedule, the denoising objective, classifier-free guidance and the
//! deterministic DDIM sampler.

use crate::error::{config_err, Error, Result};
use crate::numerics::{Rng, Tensor, Var};
use crate::params::{ParamStore, Tape};
use crate::scalar::Scalar;
use crate::unet::{ForwardOutput, UNet};

/// Linear β schedule with cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return config_err("schedule needs at least 2 steps");
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return config_err(format!("invalid beta range {beta_start}..{beta_end}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Range(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(
    sched: &DiffusionSchedule,
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    z0.zip_map(eps, |x, e| a * x + b * e)
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated as `(1−s)·ε_u + s·ε_c` so that `s = 0`
/// and `s = 1` return one input unchanged.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let one_minus = T::one() - s;
    eps_uncond.zip_map(eps_cond, |u, c| one_minus * u + s * c)
}

/// Aesthetic input to a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Aesthetic<'a, T> {
    /// No aesthetic branch.
    Absent,
    /// Selected table rows `f_t [N, d]`, projected on the tape.
    Tokens(&'a Tensor<T>),
    /// Already projected `f_a [C, d]`.
    Projected(&'a Tensor<T>),
}

/// Anything that predicts noise on a tape.
pub trait Denoiser<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;

    fn denoise(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        t: usize,
        f_c: Var,
        aes: Aesthetic<'_, T>,
        lambda: T,
    ) -> Result<ForwardOutput>;
}

impl<T: Scalar> Denoiser<T> for UNet<T> {
    fn params(&self) -> &ParamStore<T> {
        self.store()
    }

    fn denoise(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        t: usize,
        f_c: Var,
        aes: Aesthetic<'_, T>,
        lambda: T,
    ) -> Result<ForwardOutput> {
        let f_a = match aes {
            _ if !self.has_vmix() => None,
            Aesthetic::Absent => None,
            Aesthetic::Tokens(f_t) => {
                let v = tape.g.input(f_t.clone(), false);
                Some(self.project(tape, v)?)
            }
            Aesthetic::Projected(f_a) => Some(tape.g.input(f_a.clone(), false)),
        };
        self.forward(tape, z, t, f_c, f_a, lambda)
    }
}

/// One training example: image in `[-1, 1]`, its caption's tokens and the
/// selected aesthetic rows.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub image: Tensor<T>,
    pub f_c: Tensor<T>,
    pub f_t: Option<Tensor<T>>,
}

/// The unconditional pair used for dropped conditions: empty-prompt tokens
/// and a zero aesthetic input.
#[derive(Clone, Debug)]
pub struct Unconditional<T> {
    pub f_c: Tensor<T>,
    pub f_a: Tensor<T>,
}

/// Random choices for one batch element, drawn in a fixed order.
#[derive(Clone, Debug)]
pub struct Draw<T> {
    pub t: usize,
    pub dropped: bool,
    pub eps: Tensor<T>,
}

pub fn draw<T: Scalar>(rng: &mut Rng, sched: &DiffusionSchedule, shape: &[usize], p_drop: f64) -> Draw<T> {
    let t = rng.below(sched.len());
    let dropped = rng.bernoulli(p_drop);
    let eps = rng.normal_tensor(shape);
    Draw { t, dropped, eps }
}

/// Mean over the batch of the per-element squared error between the drawn
/// noise and the prediction. Returns the loss node on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Scalar, M: Denoiser<T>>(
    tape: &mut Tape<'_, T>,
    model: &M,
    batch: &[&TrainItem<T>],
    uncond: &Unconditional<T>,
    sched: &DiffusionSchedule,
    p_drop: f64,
    lambda: T,
    rng: &mut Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let draws: Vec<Draw<T>> = batch
        .iter()
        .map(|item| draw(rng, sched, item.image.shape(), p_drop))
        .collect();
    loss_with_draws(tape, model, batch, uncond, sched, &draws, lambda)
}

pub fn loss_with_draws<T: Scalar, M: Denoiser<T>>(
    tape: &mut Tape<'_, T>,
    model: &M,
    batch: &[&TrainItem<T>],
    uncond: &Unconditional<T>,
    sched: &DiffusionSchedule,
    draws: &[Draw<T>],
    lambda: T,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    for (item, d) in batch.iter().zip(draws) {
        let z_t = q_sample(sched, &item.image, d.t, &d.eps)?;
        let z = tape.g.input(z_t, false);
        let (f_c, aes) = if d.dropped {
            (&uncond.f_c, Aesthetic::Projected(&uncond.f_a))
        } else {
            let aes = item.f_t.as_ref().map_or(Aesthetic::Absent, Aesthetic::Tokens);
            (&item.f_c, aes)
        };
        let f_c = tape.g.input(f_c.clone(), false);
        let out = model.denoise(tape, z, d.t, f_c, aes, lambda)?;
        let target = tape.g.input(d.eps.clone(), false);
        let l = tape.g.mse(out.eps, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.g.add(acc, l)?,
        });
    }
    let total = total.expect("non-empty batch");
    tape.g.scale(total, T::of(1.0 / batch.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub lambda: f64,
    /// Only the deterministic sampler is implemented.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            cfg_scale: 7.5,
            lambda: 1.0,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return config_err(format!("sampler steps must be in 1..={}", sched.len()));
        }
        if !(self.cfg_scale >= 0.0) {
            return config_err("cfg_scale must be non-negative");
        }
        if !(self.lambda >= 0.0) {
            return config_err("lambda must be non-negative");
        }
        if self.eta != 0.0 {
            return config_err("only eta = 0 is supported");
        }
        Ok(())
    }
}

/// Evenly spaced sub-schedule, descending.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|s| s * total / steps).rev().collect()
}

/// Conditioning for one sampler branch.
#[derive(Clone, Debug)]
pub struct Condition {
    pub f_c: Tensor<f32>,
    /// Projected aesthetic tokens; ignored by models without VMix.
    pub f_a: Option<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// What an observer sees after each denoiser evaluation.
pub struct StepView<'v, 's> {
    pub step: usize,
    pub t: usize,
    pub branch: Branch,
    pub tape: &'v Tape<'s, f32>,
    pub out: &'v ForwardOutput,
}

pub fn ddim_sample(
    model: &UNet<f32>,
    sched: &DiffusionSchedule,
    cond: &Condition,
    uncond: &Condition,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    ddim_sample_observed(model, sched, cond, uncond, cfg, seed, &mut |_| Ok(()))
}

/// DDIM with `η = 0`; `observer` sees every forward pass. The predicted
/// clean image is clipped to `[-1, 1]`.
pub fn ddim_sample_observed(
    model: &UNet<f32>,
    sched: &DiffusionSchedule,
    cond: &Condition,
    uncond: &Condition,
    cfg: &SamplerConfig,
    seed: u64,
    observer: &mut dyn FnMut(&StepView<'_, '_>) -> Result<()>,
) -> Result<Tensor<f32>> {
    cfg.validate(sched)?;
    let c = model.config();
    let mut rng = Rng::new(seed);
    let mut z: Tensor<f32> = rng.normal_tensor(&[c.in_channels, c.image_size, c.image_size]);
    let ts = ddim_timesteps(sched.len(), cfg.steps);
    let lambda = cfg.lambda as f32;
    for (step, &t) in ts.iter().enumerate() {
        let mut eval = |cond: &Condition, branch: Branch| -> Result<Tensor<f32>> {
            let mut tape = Tape::inference(model.store());
            let zv = tape.g.constant_ref(&z);
            let cv = tape.g.constant_ref(&cond.f_c);
            let aes = cond.f_a.as_ref().map_or(Aesthetic::Absent, Aesthetic::Projected);
            let out = model.denoise(&mut tape, zv, t, cv, aes, lambda)?;
            observer(&StepView {
                step,
                t,
                branch,
                tape: &tape,
                out: &out,
            })?;
            Ok(tape.g.value(out.eps).clone())
        };
        let eps_c = eval(cond, Branch::Conditional)?;
        let eps_u = eval(uncond, Branch::Unconditional)?;
        let eps = cfg_combine(&eps_u, &eps_c, cfg.cfg_scale as f32)?;
        let ab = sched.alpha_bar[t];
        let ab_prev = if step + 1 < ts.len() {
            sched.alpha_bar[ts[step + 1]]
        } else {
            1.0
        };
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let (pa, pb) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        z = z.zip_map(&eps, |zt, e| {
            let x0 = ((zt - sb * e) / sa).clamp(-1.0, 1.0);
            // noise direction consistent with the clipped estimate
            let e = (zt - sa * x0) / sb;
            pa * x0 + pb * e
        })?;
        z.check_finite("DDIM state")?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{UNet32, UNetConfig};

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.alpha_bar[0] < 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(DiffusionSchedule::linear(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = DiffusionSchedule::default();
        let mut rng = Rng::new(0);
        let z0: Tensor<f64> = rng.normal_tensor(&[3, 4, 4]);
        let eps: Tensor<f64> = rng.normal_tensor(&[3, 4, 4]);
        let z = q_sample(&s, &z0, 0, &eps).unwrap();
        let norm = |t: &Tensor<f64>| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        // √ᾱ·z0 shrinks z0 a hair as well, hence the slack
        let bound = (1.0 - s.alpha_bar[0]).sqrt() * norm(&eps) + (1.0 - s.alpha_bar[0].sqrt()) * norm(&z0);
        assert!(norm(&z.sub(&z0).unwrap()) <= bound + 1e-12);
        let zero = q_sample(&s, &z0, 500, &Tensor::zeros(&[3, 4, 4])).unwrap();
        let k = s.alpha_bar[500].sqrt();
        for (a, b) in zero.data().iter().zip(z0.data()) {
            assert_eq!(*a, k * b);
        }
        assert!(q_sample(&s, &z0, 1000, &eps).is_err());
    }

    #[test]
    fn q_sample_variance_law() {
        let s = DiffusionSchedule::default();
        let mut rng = Rng::new(1);
        let t = 300;
        let n = 100_000;
        // z0 with variance 0.25
        let z0: Tensor<f64> = rng.normal_scaled(&[n], 0.5);
        let eps: Tensor<f64> = rng.normal_tensor(&[n]);
        let z = q_sample(&s, &z0, t, &eps).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let ab = s.alpha_bar[t];
        let expect = ab * var(z0.data()) + (1.0 - ab);
        assert!((var(z.data()) / expect - 1.0).abs() < 0.02);
    }

    #[test]
    fn cfg_identities() {
        let mut rng = Rng::new(2);
        let u: Tensor<f32> = rng.normal_tensor(&[10]);
        let c: Tensor<f32> = rng.normal_tensor(&[10]);
        assert!(cfg_combine(&u, &c, 1.0).unwrap().bit_eq(&c));
        assert!(cfg_combine(&u, &c, 0.0).unwrap().bit_eq(&u));
        let z = Tensor::zeros(&[10]);
        assert!(cfg_combine(&z, &c, 7.5).unwrap().bit_eq(&c.scale(7.5)));
        assert!(cfg_combine(&z, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn ddim_grid() {
        let ts = ddim_timesteps(1000, 25);
        assert_eq!(ts.len(), 25);
        assert_eq!(ts[0], 960);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 40));
    }

    struct Oracle<'a> {
        z0: &'a Tensor<f64>,
        sched: &'a DiffusionSchedule,
        store: ParamStore<f64>,
    }

    impl Denoiser<f64> for Oracle<'_> {
        fn params(&self) -> &ParamStore<f64> {
            &self.store
        }

        fn denoise(
            &self,
            tape: &mut Tape<'_, f64>,
            z: Var,
            t: usize,
            _f_c: Var,
            _aes: Aesthetic<'_, f64>,
            _lambda: f64,
        ) -> Result<ForwardOutput> {
            let ab = self.sched.alpha_bar[t];
            let eps = tape
                .g
                .value(z)
                .zip_map(self.z0, |zt, x| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt())?;
            Ok(ForwardOutput {
                eps: tape.g.constant(eps),
                blocks: Vec::new(),
            })
        }
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let sched = DiffusionSchedule::default();
        let mut rng = Rng::new(3);
        let item = TrainItem {
            image: rng.normal_tensor(&[3, 8, 8]),
            f_c: Tensor::zeros(&[4, 6]),
            f_t: None,
        };
        let oracle = Oracle {
            z0: &item.image,
            sched: &sched,
            store: ParamStore::new(),
        };
        let uncond = Unconditional {
            f_c: Tensor::zeros(&[4, 6]),
            f_a: Tensor::zeros(&[4, 6]),
        };
        let mut tape = Tape::inference(&oracle.store);
        let loss = training_loss(&mut tape, &oracle, &[&item], &uncond, &sched, 0.1, 1.0, &mut rng).unwrap();
        assert!(tape.value(loss).item() < 1e-20);
        assert!(matches!(
            training_loss(&mut tape, &oracle, &[], &uncond, &sched, 0.1, 1.0, &mut rng),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn zero_predictor_loss_is_unit_per_element() {
        // a fresh model's output layer is zero, so it predicts 0
        let cfg = UNetConfig {
            image_size: 8,
            base_channels: 8,
            attention_resolutions: vec![4],
            heads: 2,
            time_embed_dim: 8,
            groups: 4,
            context_len: 4,
            context_dim: 6,
            label_pairs: 2,
            timesteps: 1000,
            ..Default::default()
        };
        let net = UNet32::new_base(cfg, 0).unwrap();
        let sched = DiffusionSchedule::default();
        let uncond = Unconditional {
            f_c: Tensor::zeros(&[4, 6]),
            f_a: Tensor::zeros(&[4, 6]),
        };
        let mut rng = Rng::new(4);
        let items: Vec<TrainItem<f32>> = (0..32)
            .map(|_| TrainItem {
                image: rng.normal_scaled(&[3, 8, 8], 0.5),
                f_c: rng.normal_tensor(&[4, 6]),
                f_t: None,
            })
            .collect();
        let refs: Vec<&TrainItem<f32>> = items.iter().collect();
        let mut tape = Tape::inference(net.store());
        let loss = training_loss(&mut tape, &net, &refs, &uncond, &sched, 0.1, 1.0, &mut rng).unwrap();
        let l = tape.value(loss).item() as f64;
        // 32·192 unit normals: standard error of the mean ≈ 0.018
        assert!((l - 1.0).abs() < 0.06, "loss {l}");
    }

    #[test]
    fn sampler_config_checks() {
        let s = DiffusionSchedule::default();
        assert!(SamplerConfig::default().validate(&s).is_ok());
        assert!(SamplerConfig { steps: 1001, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { cfg_scale: -1.0, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { eta: 1.0, ..Default::default() }.validate(&s).is_err());
    }
}
