//! `vmix` command-line driver: aesthetic cache, synthetic data, training,
//! sampling, evaluation and plugin transfer.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vmix::aesemb::{all_positive, build_aesemb, load_aesemb, save_aesemb, AesEmb, AestheticAssignment};
use vmix::checkpoint::Checkpoint;
use vmix::config::RunConfig;
use vmix::eval::{evaluate, EvalSettings, Generator};
use vmix::lora::{apply_plugin, extract_plugin, Plugin};
use vmix::synthdata::{load_dataset, make_dataset, write_dataset};
use vmix::textenc::{TextEncoder, Vocabulary};
use vmix::train::{Stage, TrainData, TrainConfig, Trainer};
use vmix::unet::UNet;

#[derive(Parser)]
#[command(name = "vmix", version, about = "Value-mixed aesthetic adapter for a small pixel diffusion model")]
struct Cli {
    /// Run configuration file; built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed override for the command's random stream
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Directory holding artifacts named in the [paths] section
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Config override, repeatable: `section.key=value`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode the aesthetic label pairs once and write the cache
    InitAesemb,
    /// Render the synthetic training set
    MakeDataset,
    /// Train the base model, the adapter, or both
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Content-only cross-attention arm
        #[arg(long)]
        no_vmix: bool,
        /// Arm without LoRA factors
        #[arg(long)]
        no_lora: bool,
        /// Continue from a checkpoint carrying optimizer state
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Generate images from a prompt
    Sample {
        #[arg(long)]
        prompt: String,
        /// Mixing coefficient; the sampler default when omitted
        #[arg(long)]
        lambda: Option<f64>,
        /// Polarity per label pair, e.g. "+-+-"; all positive by default
        #[arg(long, allow_hyphen_values = true)]
        assignment: Option<String>,
        /// Sample the content path only (λ = 0)
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Finetuned checkpoint; [paths] checkpoint by default
        #[arg(long, value_name = "PATH", conflicts_with = "plugin")]
        checkpoint: Option<PathBuf>,
        /// Plugin applied onto the base checkpoint instead of a finetuned checkpoint
        #[arg(long, value_name = "PATH")]
        plugin: Option<PathBuf>,
        /// Base checkpoint for --plugin; [paths] base_checkpoint by default
        #[arg(long, value_name = "PATH", requires = "plugin")]
        base: Option<PathBuf>,
        /// Leave the plugin's LoRA factors out
        #[arg(long, requires = "plugin")]
        no_lora: bool,
        /// Image file name prefix
        #[arg(long, default_value = "sample")]
        name: String,
    },
    /// Attribute shifts, alignment, Fréchet distance and the λ sweep
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write the adapter tensors of a finetuned checkpoint as a plugin
    ExtractPlugin {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Attach a plugin to a base checkpoint and save the result
    ApplyPlugin {
        #[arg(long, value_name = "PATH")]
        base: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        plugin: Option<PathBuf>,
        #[arg(long)]
        no_lora: bool,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Base,
    Adapter,
    All,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn encoder(&self) -> Result<TextEncoder> {
        let enc = match self.cfg.vocab_path() {
            Some(p) => TextEncoder::new(self.cfg.text.clone(), Vocabulary::load(&p)?)?,
            None => TextEncoder::standard(self.cfg.text.clone())?,
        };
        Ok(enc)
    }

    fn aesemb(&self) -> Result<AesEmb> {
        let path = self.artifact(&self.cfg.paths.aesemb);
        load_aesemb(&path, &self.cfg.labels, self.cfg.text.seed)
            .with_context(|| format!("loading {} (run init-aesemb first)", path.display()))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        seed: cli.seed,
    };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::InitAesemb => init_aesemb(&ctx),
        Command::MakeDataset => dataset(&ctx),
        Command::Train {
            stage,
            no_vmix,
            no_lora,
            resume,
        } => train(ctx, stage, no_vmix, no_lora, resume),
        Command::Sample {
            prompt,
            lambda,
            assignment,
            baseline,
            count,
            checkpoint,
            plugin,
            base,
            no_lora,
            name,
        } => {
            let net = match plugin {
                Some(p) => {
                    let base = base.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.base_checkpoint));
                    let base = Checkpoint::load(&base).with_context(|| format!("loading {}", base.display()))?;
                    let plugin = Plugin::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    apply_plugin(&base.net, &plugin, !no_lora)?
                }
                None => {
                    let path = checkpoint.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.checkpoint));
                    Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?.net
                }
            };
            let lambda = if baseline { 0.0 } else { lambda.unwrap_or(ctx.cfg.sampler.lambda) };
            sample(&ctx, &net, &prompt, lambda, assignment.as_deref(), count, &name)
        }
        Command::Eval { checkpoint } => eval(&ctx, checkpoint),
        Command::ExtractPlugin { checkpoint, output } => {
            let path = checkpoint.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.checkpoint));
            let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let plugin = extract_plugin(&ck.net)?;
            let output = output.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.plugin));
            plugin.save(&output)?;
            println!("wrote {} ({} tensors)", output.display(), plugin.tensors.len());
            Ok(())
        }
        Command::ApplyPlugin {
            base,
            plugin,
            no_lora,
            output,
        } => {
            let base = base.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.base_checkpoint));
            let base = Checkpoint::load(&base).with_context(|| format!("loading {}", base.display()))?;
            let plugin_path = plugin.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.plugin));
            let plugin = Plugin::load(&plugin_path).with_context(|| format!("loading {}", plugin_path.display()))?;
            let net = apply_plugin(&base.net, &plugin, !no_lora)?;
            let mut cfg = base.config()?;
            cfg.vmix_enabled = net.has_vmix();
            cfg.lora_enabled = net.has_lora();
            Checkpoint::new(&cfg, net, None).save(&output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
    }
}

fn init_aesemb(ctx: &Ctx) -> Result<()> {
    let enc = ctx.encoder()?;
    let emb = build_aesemb(&ctx.cfg.labels, &enc)?;
    let path = ctx.artifact(&ctx.cfg.paths.aesemb);
    save_aesemb(&emb, &path)?;
    println!("wrote {} ({} pairs, dim {})", path.display(), emb.pairs(), emb.dim());
    println!("fingerprint {:#018x}", emb.fingerprint);
    Ok(())
}

fn dataset(ctx: &Ctx) -> Result<()> {
    let seed = ctx.seed.unwrap_or(ctx.cfg.data.seed);
    let samples = make_dataset(ctx.cfg.data.samples, seed, &ctx.cfg.dataset_config())?;
    let dir = ctx.artifact(&ctx.cfg.paths.dataset);
    let manifest = write_dataset(&dir, &samples)?;
    println!("wrote {} samples, manifest {}", samples.len(), manifest.display());
    Ok(())
}

fn train(mut ctx: Ctx, stage: StageArg, no_vmix: bool, no_lora: bool, resume: Option<PathBuf>) -> Result<()> {
    if no_vmix {
        ctx.cfg.vmix_enabled = false;
    }
    if no_lora {
        ctx.cfg.lora_enabled = false;
    }
    if let Some(s) = ctx.seed {
        ctx.cfg.base_train.seed = s;
        ctx.cfg.train.seed = s;
    }
    let aesemb = ctx.aesemb().context("refusing to train")?;
    let enc = ctx.encoder()?;
    let dir = ctx.artifact(&ctx.cfg.paths.dataset);
    let samples = load_dataset(&dir).with_context(|| format!("loading dataset {} (run make-dataset first)", dir.display()))?;
    let data = TrainData::build(
        samples.iter().map(|(e, img)| (img, e.caption.as_str(), &e.assignment)),
        &enc,
        &aesemb,
    )?;
    println!("{} training images, {} label pairs", data.items.len(), aesemb.pairs());

    let mut resumed = match resume {
        Some(p) => {
            let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
            if ck.config()?.model != ctx.cfg.model {
                bail!("{} was trained with a different [model] section", p.display());
            }
            Some(ck)
        }
        None => None,
    };
    let stages: &[Stage] = match stage {
        StageArg::Base => &[Stage::Base],
        StageArg::Adapter => &[Stage::Adapter],
        StageArg::All => &[Stage::Base, Stage::Adapter],
    };
    if let Some(ck) = &resumed {
        let st = ck.state.as_ref().map(|s| s.stage);
        if !st.is_some_and(|s| stages.contains(&s)) {
            bail!("resume checkpoint stage {:?} is not among the requested stages", st.map(|s| s.name()));
        }
    }
    for &st in stages {
        let resume_here = match &resumed {
            Some(ck) if ck.state.as_ref().map(|s| s.stage) == Some(st) => resumed.take(),
            Some(_) => continue,
            None => None,
        };
        run_stage(&ctx, st, &data, resume_here)?;
    }
    Ok(())
}

fn run_stage(ctx: &Ctx, stage: Stage, data: &TrainData, resume: Option<Checkpoint>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (tcfg, out): (&TrainConfig, PathBuf) = match stage {
        Stage::Base => (&cfg.base_train, ctx.artifact(&cfg.paths.base_checkpoint)),
        Stage::Adapter => (&cfg.train, ctx.artifact(&cfg.paths.checkpoint)),
    };
    let (mut net, mut trainer) = match resume {
        Some(ck) => {
            let tr = ck.resume(tcfg.clone())?;
            (ck.net, tr)
        }
        None => (fresh_net(ctx, stage)?, Trainer::new(tcfg.clone(), stage)?),
    };
    let sched = cfg.schedule()?;
    let trainable = trainer.stage.mask(&net).iter().filter(|&&m| m).count();
    println!(
        "{} stage: {} trainable tensors, step {} of {}",
        stage.name(),
        trainable,
        trainer.step,
        tcfg.steps
    );
    if trainer.step == 0 {
        println!("step 0 loss {:.6}", trainer.peek_loss(&net, data, &sched)?);
    }
    let start = Instant::now();
    let every = if tcfg.checkpoint_every > 0 { tcfg.checkpoint_every } else { tcfg.steps.max(1) };
    let mut saved = false;
    while (trainer.step as usize) < tcfg.steps {
        let n = (tcfg.steps - trainer.step as usize).min(every);
        trainer.run(&mut net, data, &sched, n, &mut |s, l| {
            println!("step {s} loss {l:.6} ({:.0}s)", start.elapsed().as_secs_f64())
        })?;
        Checkpoint::new(cfg, net.clone(), Some(&trainer)).save(&out)?;
        println!("saved {} at step {}", out.display(), trainer.step);
        saved = true;
    }
    if !saved {
        Checkpoint::new(cfg, net, Some(&trainer)).save(&out)?;
        println!("saved {}", out.display());
    }
    Ok(())
}

fn fresh_net(ctx: &Ctx, stage: Stage) -> Result<UNet<f32>> {
    let cfg = &ctx.cfg;
    match stage {
        Stage::Base => Ok(UNet::new_base(cfg.unet_config(), cfg.model.seed)?),
        Stage::Adapter => {
            let path = ctx.artifact(&cfg.paths.base_checkpoint);
            let mut net = Checkpoint::load(&path)
                .with_context(|| format!("loading base {} (train the base stage first)", path.display()))?
                .net;
            if net.has_vmix() || net.has_lora() {
                bail!("{} already carries adapter tensors", path.display());
            }
            if !cfg.vmix_enabled && !cfg.lora_enabled {
                bail!("both VMix and LoRA are disabled; the adapter stage has nothing to train");
            }
            if cfg.vmix_enabled {
                net.attach_vmix(cfg.vmix_seed)?;
            }
            if cfg.lora_enabled {
                vmix::lora::attach(&mut net, &cfg.lora, cfg.lora_seed)?;
            }
            Ok(net)
        }
    }
}

fn parse_assignment(s: &str, pairs: usize) -> Result<AestheticAssignment> {
    let polarity = s
        .chars()
        .map(|c| match c {
            '+' => Ok(true),
            '-' => Ok(false),
            _ => bail!("assignment may only contain '+' and '-', got {c:?}"),
        })
        .collect::<Result<Vec<bool>>>()?;
    if polarity.len() != pairs {
        bail!("assignment has {} signs but {pairs} label pairs are configured", polarity.len());
    }
    Ok(AestheticAssignment::new(polarity))
}

fn sample(
    ctx: &Ctx,
    net: &UNet<f32>,
    prompt: &str,
    lambda: f64,
    assignment: Option<&str>,
    count: u64,
    name: &str,
) -> Result<()> {
    let enc = ctx.encoder()?;
    let aesemb = ctx.aesemb()?;
    let unknown = enc.unknown_words(prompt);
    if !unknown.is_empty() {
        eprintln!("warning: unknown tokens in prompt: {}", unknown.join(" "));
    }
    let assignment = match assignment {
        Some(s) => parse_assignment(s, aesemb.pairs())?,
        None => all_positive(aesemb.pairs()),
    };
    let sched = ctx.cfg.schedule()?;
    let gen = Generator::new(net, &enc, &aesemb, &sched, ctx.cfg.sampler.clone())?;
    let dir = ctx.out.join("samples");
    std::fs::create_dir_all(&dir)?;
    let seed = ctx.seed.unwrap_or(0);
    for i in 0..count {
        let s = seed.wrapping_add(i);
        let img = gen.sample(prompt, &assignment, lambda, s)?;
        let path = dir.join(format!("{name}_{s}.ppm"));
        img.save_ppm(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| ctx.artifact(&ctx.cfg.paths.checkpoint));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let enc = ctx.encoder()?;
    let aesemb = ctx.aesemb()?;
    let sched = ctx.cfg.schedule()?;
    let e = &ctx.cfg.eval;
    let settings = EvalSettings {
        samples: e.samples,
        fid_samples: e.fid_samples,
        lambdas: e.lambdas.clone(),
        seed: ctx.seed.unwrap_or(e.seed),
        control_seed: ctx.cfg.vmix_seed,
    };
    let report = evaluate(&ck.net, &enc, &aesemb, &sched, &ctx.cfg.sampler, &settings, &ctx.cfg.to_text())?;
    write(&ctx.out.join("eval.tsv"), &report.to_tsv())?;
    let summary = report.summary();
    write(&ctx.out.join("eval_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
