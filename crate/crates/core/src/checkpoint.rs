//! `VMCK` checkpoints: resolved config text, architecture fingerprint, model
//! tensors, optimizer moments and the step counter.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::io::{format_err, write_str, write_tensor_table, write_u32, write_u64, Reader};
use crate::numerics::Tensor;
use crate::train::{AdamState, Stage, TrainConfig, Trainer};
use crate::unet::UNet;

const MAGIC: &[u8; 4] = b"VMCK";
const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub step: u64,
    pub adam: AdamState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub net: UNet<f32>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig, net: UNet<f32>, trainer: Option<&Trainer>) -> Self {
        Self {
            config_text: cfg.to_text(),
            net,
            state: trainer.map(|t| TrainState {
                stage: t.stage,
                step: t.step,
                adam: t.adam.clone(),
            }),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// A trainer continuing where this checkpoint stopped.
    pub fn resume(&self, cfg: TrainConfig) -> Result<Trainer> {
        let Some(state) = &self.state else {
            return config_err("checkpoint carries no optimizer state");
        };
        let mut tr = Trainer::new(cfg, state.stage)?;
        tr.step = state.step;
        tr.adam = state.adam.clone();
        Ok(tr)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        // writes into a Vec cannot fail
        write_u32(&mut out, VERSION).unwrap();
        write_str(&mut out, &self.config_text).unwrap();
        write_u64(&mut out, self.net.fingerprint()).unwrap();
        match self.net.lora_alpha() {
            Some(a) => {
                write_u32(&mut out, 1).unwrap();
                write_u64(&mut out, a.to_bits()).unwrap();
            }
            None => {
                write_u32(&mut out, 0).unwrap();
                write_u64(&mut out, 0).unwrap();
            }
        }
        write_tensor_table(&mut out, self.net.store().iter()).unwrap();
        match &self.state {
            None => write_str(&mut out, "").unwrap(),
            Some(s) => {
                write_str(&mut out, s.stage.name()).unwrap();
                write_u64(&mut out, s.step).unwrap();
                write_u64(&mut out, s.adam.t).unwrap();
                let names: Vec<(String, &Tensor<f32>)> = self
                    .net
                    .store()
                    .names()
                    .filter_map(|n| s.adam.moments.get(n).map(|mv| (n, mv)))
                    .flat_map(|(n, (m, v))| [(format!("{M_PREFIX}{n}"), m), (format!("{V_PREFIX}{n}"), v)])
                    .collect();
                write_tensor_table(&mut out, names.iter().map(|(n, t)| (n.as_str(), *t))).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.header(MAGIC, VERSION)?;
        let config_text = r.str()?;
        let cfg = RunConfig::parse(&config_text)?;
        let fingerprint = r.u64()?;
        let has_alpha = r.u32()?;
        let alpha_bits = r.u64()?;
        let lora_alpha = match has_alpha {
            0 => None,
            1 => Some(f64::from_bits(alpha_bits)),
            x => return Err(format_err("checkpoint", format!("bad alpha flag {x}"))),
        };
        let tensors = r.tensor_table()?;
        let net = UNet::from_parts(cfg.unet_config(), tensors, lora_alpha)?;
        if net.fingerprint() != fingerprint {
            return Err(Error::Architecture {
                expected: fingerprint,
                found: net.fingerprint(),
            });
        }
        let stage = r.str()?;
        let state = if stage.is_empty() {
            None
        } else {
            let stage = Stage::from_name(&stage)?;
            let step = r.u64()?;
            let t = r.u64()?;
            let mut adam = AdamState {
                t,
                ..Default::default()
            };
            let mut pending: Vec<(String, Tensor<f32>)> = Vec::new();
            for (name, tensor) in r.tensor_table()? {
                if let Some(n) = name.strip_prefix(M_PREFIX) {
                    pending.push((n.to_string(), tensor));
                } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                    let i = pending
                        .iter()
                        .position(|(p, _)| p == n)
                        .ok_or_else(|| format_err("checkpoint", format!("second moment without first for {n}")))?;
                    let (n, m) = pending.swap_remove(i);
                    if !net.store().contains(&n) {
                        return Err(format_err("checkpoint", format!("moments for unknown parameter {n}")));
                    }
                    adam.moments.insert(n, (m, tensor));
                } else {
                    return Err(format_err("checkpoint", format!("unexpected optimizer entry {name}")));
                }
            }
            if let Some((n, _)) = pending.first() {
                return Err(format_err("checkpoint", format!("first moment without second for {n}")));
            }
            Some(TrainState { stage, step, adam })
        };
        r.finish()?;
        Ok(Self {
            config_text,
            net,
            state,
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

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig::parse(
            "[model]\nimage_size = 8\nbase_channels = 8\nattention_resolutions = 4\nheads = 2\ntime_embed_dim = 8\ngroups = 4\n[text]\ncontext_len = 4\ndim = 8\n",
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny_config();
        let mut net = UNet::<f32>::new_base(cfg.unet_config(), 3).unwrap();
        net.attach_vmix(1).unwrap();
        crate::lora::attach(&mut net, &cfg.lora, 2).unwrap();
        let mut tr = Trainer::new(cfg.train.clone(), Stage::Adapter).unwrap();
        tr.step = 17;
        tr.adam.t = 17;
        let (a, b) = (net.store().at(0).0.to_string(), net.store().at(5).0.to_string());
        for n in [&a, &b] {
            let t = net.store().get(n).unwrap();
            tr.adam.moments.insert(n.clone(), (t.scale(0.5), t.map(|x| x * x)));
        }
        let ck = Checkpoint::new(&cfg, net.clone(), Some(&tr));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.net.store(), net.store());
        assert_eq!(back.net.lora_alpha(), net.lora_alpha());
        let st = back.state.as_ref().unwrap();
        assert_eq!(st.step, 17);
        assert_eq!(st.adam, tr.adam);
        assert_eq!(back.config().unwrap(), cfg);

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn config_mismatch_is_refused() {
        let cfg = tiny_config();
        let net = UNet::<f32>::new_base(cfg.unet_config(), 3).unwrap();
        let mut ck = Checkpoint::new(&cfg, net, None);
        let mut other = cfg.clone();
        other.model.base_channels = 16;
        ck.config_text = other.to_text();
        assert!(matches!(
            Checkpoint::from_bytes(&ck.to_bytes()),
            Err(Error::Architecture { .. })
        ));
    }
}
