use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vmix::checkpoint::Checkpoint;

const TINY: &str = "\
[model]
image_size = 8
base_channels = 8
attention_resolutions = 4
heads = 2
time_embed_dim = 8
groups = 4
[data]
samples = 48
[base]
steps = 6
log_every = 3
[train]
steps = 4
log_every = 2
[sampler]
steps = 5
[eval]
samples = 4
";

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.cfg"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        let cfg = self.root.join("tiny.cfg");
        let out = self.out();
        Command::new(env!("CARGO_BIN_EXE_vmix"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(
            o.status.success(),
            "vmix {args:?} failed:\n{}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(!o.status.success(), "vmix {args:?} unexpectedly succeeded");
        String::from_utf8(o.stderr).unwrap()
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.out().join(rel)).unwrap()
    }

    fn prepared() -> Self {
        let run = Self::new();
        run.ok(&["init-aesemb"]);
        run.ok(&["make-dataset"]);
        run
    }
}

fn fingerprint_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.starts_with("fingerprint")).unwrap().to_string()
}

fn losses(stdout: &str) -> Vec<(u64, f64)> {
    stdout
        .lines()
        .filter_map(|l| {
            let rest = l.strip_prefix("step ")?;
            let mut it = rest.split_whitespace();
            let step = it.next()?.parse().ok()?;
            (it.next()? == "loss").then_some(())?;
            Some((step, it.next()?.parse().ok()?))
        })
        .collect()
}

fn load(path: &Path) -> Checkpoint {
    Checkpoint::load(path).unwrap()
}

#[test]
fn init_aesemb_is_idempotent_and_tracks_labels() {
    let run = Run::new();
    let a = fingerprint_line(&run.ok(&["init-aesemb"]));
    let first = run.read("aesemb.bin");
    let b = fingerprint_line(&run.ok(&["init-aesemb"]));
    assert_eq!(a, b);
    assert_eq!(run.read("aesemb.bin"), first);

    let relabeled = run.ok(&[
        "--set",
        "aesemb.labels=color:vibrant color:[V1], lighting:natural lighting:[V2], composition:balanced composition:[V3], focus:soft focus:[V4]",
        "init-aesemb",
    ]);
    assert_ne!(fingerprint_line(&relabeled), a);
    assert_ne!(run.read("aesemb.bin"), first);
}

#[test]
fn missing_vocabulary_is_a_configuration_error() {
    let run = Run::new();
    let missing = run.root.join("no-such-vocab.txt");
    let err = run.fails(&["--set", &format!("paths.vocab={}", missing.display()), "init-aesemb"]);
    assert!(err.contains("configuration error"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let run = Run::new();
    let err = run.fails(&["--set", "model.depth=3", "init-aesemb"]);
    assert!(err.contains("depth"), "{err}");
    std::fs::write(run.root.join("tiny.cfg"), format!("{TINY}[sampler]\nguidance = 2\n")).unwrap();
    let err = run.fails(&["init-aesemb"]);
    assert!(err.contains("guidance"), "{err}");
}

#[test]
fn training_refuses_a_stale_cache() {
    let run = Run::prepared();
    let err = run.fails(&[
        "--set",
        "aesemb.labels=color:vibrant color:[V1], lighting:harsh lighting:[V2], composition:balanced composition:[V3], focus:sharp focus:[V4]",
        "train",
    ]);
    assert!(err.contains("stale"), "{err}");
    assert!(!run.out().join("base.vmck").exists());
}

#[test]
fn first_loss_is_unit_noise_variance() {
    // the fresh base predicts zero, so the loss is the mean of eps^2
    let run = Run::prepared();
    let out = run.ok(&["--set", "base.batch_size=64", "--set", "base.steps=0", "train", "--stage", "base"]);
    let (step, loss) = losses(&out)[0];
    assert_eq!(step, 0);
    // 64 * 192 unit normals: standard error 0.0128
    assert!((loss - 1.0).abs() < 0.06, "step 0 loss {loss}");
}

#[test]
fn pipeline_samples_plugins_and_reports() {
    let run = Run::prepared();
    let out = run.ok(&["train"]);
    assert!(out.contains("saved"), "{out}");
    let ls = losses(&out);
    assert!(ls.iter().all(|(_, l)| l.is_finite()));

    // reproducible sampling at equal seed, unknown words only warn
    let o = run.cmd(&["--seed", "5", "sample", "--prompt", "red circle zorp", "--name", "a"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("zorp"));
    run.ok(&["--seed", "5", "sample", "--prompt", "red circle zorp", "--name", "b"]);
    assert_eq!(run.read("samples/a_5.ppm"), run.read("samples/b_5.ppm"));
    assert_eq!(&run.read("samples/a_5.ppm")[..2], b"P6");
    run.ok(&["--seed", "5", "sample", "--prompt", "red circle", "--assignment", "-+-+", "--lambda", "2", "--name", "c"]);
    assert!(run.cmd(&["sample", "--prompt", "red circle", "--assignment", "+-"]).status.code() != Some(0));

    // plugin onto the pristine base reproduces the finetuned sample
    run.ok(&["extract-plugin"]);
    let applied = run.out().join("applied.vmck");
    run.ok(&["apply-plugin", "--output", applied.to_str().unwrap()]);
    run.ok(&["--seed", "9", "sample", "--prompt", "blue square", "--name", "ft"]);
    run.ok(&["--seed", "9", "sample", "--prompt", "blue square", "--checkpoint", applied.to_str().unwrap(), "--name", "ap"]);
    run.ok(&["--seed", "9", "sample", "--prompt", "blue square", "--plugin", run.out().join("vmix.plugin").to_str().unwrap(), "--name", "pl"]);
    assert_eq!(run.read("samples/ft_9.ppm"), run.read("samples/ap_9.ppm"));
    assert_eq!(run.read("samples/ft_9.ppm"), run.read("samples/pl_9.ppm"));
    let plugin = run.out().join("vmix.plugin");
    run.ok(&["--seed", "9", "sample", "--prompt", "blue square", "--plugin", plugin.to_str().unwrap(), "--no-lora", "--name", "nl"]);
    assert_eq!(run.read("samples/nl_9.ppm").len(), run.read("samples/ft_9.ppm").len());

    // evaluation report: deterministic, one row per dimension, a zero-delta control
    let lambdas = 5;
    run.ok(&["eval"]);
    let tsv = String::from_utf8(run.read("eval.tsv")).unwrap();
    run.ok(&["eval"]);
    assert_eq!(String::from_utf8(run.read("eval.tsv")).unwrap(), tsv);
    assert!(tsv.contains("# [model]"));
    let rows: Vec<Vec<&str>> = tsv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split('\t').collect())
        .collect();
    let single = |arm: &str| {
        rows.iter()
            .filter(|r| r[0] == arm && r.len() == 6 && r[1] != "all")
            .collect::<Vec<_>>()
    };
    assert_eq!(single("trained").len(), 4);
    assert_eq!(single("control").len(), 4);
    for r in rows.iter().filter(|r| r[0] == "control" && r.len() == 6) {
        assert_eq!(r[5].parse::<f64>().unwrap(), 0.0, "{r:?}");
    }
    let sweep = rows.iter().filter(|r| r.len() == 7 && (r[0] == "vmix" || r[0] == "baseline")).count();
    assert_eq!(sweep, lambdas + 1);
    assert!(run.out().join("eval_summary.txt").exists());
}

#[test]
fn arms_and_baseline_sampling() {
    let run = Run::prepared();
    run.ok(&["train", "--stage", "base"]);

    // content-only arm carries no aesthetic branch at all
    run.ok(&["--set", "paths.checkpoint=novmix.vmck", "train", "--stage", "adapter", "--no-vmix"]);
    let ck = load(&run.out().join("novmix.vmck"));
    assert!(!ck.net.has_vmix());
    assert!(ck.net.has_lora());
    assert!(ck.config().unwrap().vmix_enabled == false);

    // --baseline on a VMix-only model equals the base model's sample
    run.ok(&["--set", "paths.checkpoint=vmixonly.vmck", "train", "--stage", "adapter", "--no-lora"]);
    let ck = load(&run.out().join("vmixonly.vmck"));
    assert!(ck.net.has_vmix() && !ck.net.has_lora());
    let vmixonly = run.out().join("vmixonly.vmck");
    let base = run.out().join("base.vmck");
    run.ok(&["--seed", "3", "sample", "--prompt", "green triangle", "--baseline", "--checkpoint", vmixonly.to_str().unwrap(), "--name", "bl"]);
    run.ok(&["--seed", "3", "sample", "--prompt", "green triangle", "--checkpoint", base.to_str().unwrap(), "--name", "base"]);
    run.ok(&["--seed", "3", "sample", "--prompt", "green triangle", "--checkpoint", vmixonly.to_str().unwrap(), "--name", "mixed"]);
    assert_eq!(run.read("samples/bl_3.ppm"), run.read("samples/base_3.ppm"));
    assert_ne!(run.read("samples/mixed_3.ppm"), run.read("samples/base_3.ppm"));

    let err = run.fails(&["--set", "paths.checkpoint=none.vmck", "train", "--stage", "adapter", "--no-vmix", "--no-lora"]);
    assert!(err.contains("nothing to train"), "{err}");
}

#[test]
fn resumed_training_matches_unbroken_training() {
    let run = Run::prepared();
    run.ok(&["train", "--stage", "base"]);
    let unbroken = run.ok(&["--set", "paths.checkpoint=full.vmck", "train", "--stage", "adapter"]);

    run.ok(&["--set", "paths.checkpoint=half.vmck", "--set", "train.steps=2", "train", "--stage", "adapter"]);
    let half = run.out().join("half.vmck");
    let resumed = run.ok(&["--set", "paths.checkpoint=half.vmck", "train", "--resume", half.to_str().unwrap()]);

    let full = load(&run.out().join("full.vmck"));
    let cont = load(&half);
    assert_eq!(cont.net.store(), full.net.store());
    assert_eq!(cont.state, full.state);
    let tail = |s: &str| losses(s).into_iter().filter(|(st, _)| *st > 2).collect::<Vec<_>>();
    assert_eq!(tail(&resumed), tail(&unbroken));
    assert!(!tail(&resumed).is_empty());
}
