//! Closed-form evaluation: attribute shift under aesthetic labels, a
//! rule-based caption classifier for content alignment, a Fréchet distance
//! over hand-crafted image features, and λ sweeps.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::aesemb::{all_positive, AesEmb, AestheticAssignment};
use crate::diffusion::{ddim_sample, Condition, DiffusionSchedule, SamplerConfig};
use crate::error::{config_err, Result};
use crate::numerics::{Rng, Tensor};
use crate::synthdata::{
    blur_sigma, coverage, gaussian_blur, luminance, make_dataset, measure, row_background, shape_area, AttributeScores, ColorName, ContentSpec, DatasetConfig,
    Dimension, Image, ShapeKind,
};
use crate::textenc::TextEncoder;
use crate::unet::UNet;

/// Version of the feature vector behind [`toy_fid`].
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 16;
pub const MIN_FID_SET: usize = 64;

/// Subject pixels are those at least this fraction of the peak distance
/// away from their row background.
const MASK_LEVEL: f32 = 0.5;
const MIN_PEAK: f32 = 0.08;
const BRIGHTNESS_FLOOR: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classification {
    pub color: Option<ColorName>,
    pub shape: Option<ShapeKind>,
}

impl Classification {
    pub fn matches(&self, content: &ContentSpec) -> bool {
        self.color == Some(content.color) && self.shape == Some(content.shape)
    }
}

fn hue_deg(c: [f32; 3]) -> Option<f32> {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let chroma = max - min;
    if chroma < 0.02 {
        return None;
    }
    let h = if max == c[0] {
        ((c[1] - c[2]) / chroma).rem_euclid(6.0)
    } else if max == c[1] {
        (c[2] - c[0]) / chroma + 2.0
    } else {
        (c[0] - c[1]) / chroma + 4.0
    };
    Some(h * 60.0)
}

fn nearest_color(hue: f32) -> ColorName {
    let circ = |a: f32, b: f32| {
        let d = (a - b).rem_euclid(360.0);
        d.min(360.0 - d)
    };
    ColorName::ALL
        .into_iter()
        .min_by(|a, b| circ(hue, a.hue()).total_cmp(&circ(hue, b.hue())))
        .expect("non-empty color list")
}

/// Largest 4-connected component of `mask`, as pixel indices.
fn largest_component(mask: &[bool], s: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            k += 1;
            let (x, y) = (i % s, i / s);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < s {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - s);
            }
            if y + 1 < s {
                visit(i + s);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

fn relative_distance_map(img: &Image) -> Vec<f32> {
    let s = img.size();
    let bg = row_background(img);
    // the lighting ramp scales whole rows, so distances are taken relative
    // to the row background's brightness
    (0..s * s)
        .map(|i| {
            let (p, b) = (img.px(i % s, i / s), bg[i / s]);
            let dist = ((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2) + (p[2] - b[2]).powi(2)).sqrt();
            dist / (b[0].max(b[1]).max(b[2]) + BRIGHTNESS_FLOOR)
        })
        .collect()
}

fn dilate(mask: &[bool], s: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    (0..s * s)
        .map(|i| {
            let (x, y) = ((i % s) as isize, (i / s) as isize);
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (u, v) = (x + dx, y + dy);
                    u >= 0 && v >= 0 && u < s as isize && v < s as isize && mask[(v * s as isize + u) as usize]
                })
            })
        })
        .collect()
}

/// Names the dominant subject's color (nearest reference hue of its mean
/// color) and shape (the ideal sharp or blurred shape of equal area and
/// centroid that best matches its coverage map).
pub fn classify(img: &Image) -> Classification {
    let none = Classification {
        color: None,
        shape: None,
    };
    let s = img.size();
    let d = relative_distance_map(img);
    let peak = d.iter().cloned().fold(0.0f32, f32::max);
    if peak < MIN_PEAK {
        return none;
    }
    let mask: Vec<bool> = d.iter().map(|&v| v >= MASK_LEVEL * peak).collect();
    let comp = largest_component(&mask, s);
    if comp.len() < 3 {
        return none;
    }
    let mut mean = [0.0f32; 3];
    for &i in &comp {
        let p = img.px(i % s, i / s);
        for c in 0..3 {
            mean[c] += p[c] / comp.len() as f32;
        }
    }
    let mut inner: Vec<f32> = comp.iter().map(|&i| d[i]).collect();
    inner.sort_by(|a, b| a.total_cmp(b));
    let full = inner[(inner.len() * 9 / 10).min(inner.len() - 1)];
    let mut in_comp = vec![false; s * s];
    comp.iter().for_each(|&i| in_comp[i] = true);
    let sigma = blur_sigma(s);
    let region = dilate(&in_comp, s, sigma.ceil() as usize + 1);
    let cov: Vec<f32> = (0..s * s)
        .map(|i| if region[i] { (d[i] / full).min(1.0) } else { 0.0 })
        .collect();
    let area: f32 = cov.iter().sum();
    let (mut cx, mut cy) = (0.0f32, 0.0f32);
    for (i, &a) in cov.iter().enumerate() {
        cx += a * ((i % s) as f32 + 0.5);
        cy += a * ((i / s) as f32 + 0.5);
    }
    cx /= area;
    cy /= area;
    let mut best = (f32::INFINITY, ShapeKind::Circle);
    for shape in ShapeKind::ALL {
        let r = (area / shape_area(shape, 1.0)).sqrt();
        let sharp = coverage(shape, cx, cy, r, s);
        let blurred: Vec<f32> = gaussian_blur(&Image::from_fn(s, |x, y| [sharp[y * s + x]; 3]), sigma)
            .pixels()
            .map(|p| p[0])
            .collect();
        for t in [&sharp, &blurred] {
            let err: f32 = t.iter().zip(&cov).map(|(a, b)| (a - b).powi(2)).sum();
            if err < best.0 {
                best = (err, shape);
            }
        }
    }
    Classification {
        color: hue_deg(mean).map(nearest_color),
        shape: Some(best.1),
    }
}

/// Fraction of images classified as their content.
pub fn alignment_of(images: &[Image], contents: &[ContentSpec]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let hits = images
        .iter()
        .zip(contents)
        .filter(|(img, c)| classify(img).matches(c))
        .count();
    hits as f64 / images.len() as f64
}

/// Oracle scores, a saturation-weighted six-bin hue histogram and
/// luminance/gradient statistics.
pub fn features(img: &Image) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[..4].copy_from_slice(&measure(img).0);
    let s = img.size();
    let n = (s * s) as f64;
    for p in img.pixels() {
        if let Some(h) = hue_deg(p) {
            let max = p[0].max(p[1]).max(p[2]);
            let sat = if max > 0.0 { (max - p[0].min(p[1]).min(p[2])) / max } else { 0.0 };
            let bin = ((h / 60.0) as usize).min(5);
            f[4 + bin] += sat as f64 / n;
        }
    }
    let luma: Vec<f64> = img.pixels().map(|p| luminance(p) as f64).collect();
    let mean = luma.iter().sum::<f64>() / n;
    f[10] = mean;
    f[11] = (luma.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut grads = Vec::with_capacity((s - 1) * (s - 1));
    for y in 0..s - 1 {
        for x in 0..s - 1 {
            let v = luma[y * s + x];
            grads.push(((luma[y * s + x + 1] - v).powi(2) + (luma[(y + 1) * s + x] - v).powi(2)).sqrt());
        }
    }
    let gn = grads.len() as f64;
    let gm = grads.iter().sum::<f64>() / gn;
    f[12] = gm;
    f[13] = (grads.iter().map(|g| (g - gm).powi(2)).sum::<f64>() / gn).sqrt();
    grads.sort_by(|a, b| a.total_cmp(b));
    f[14] = grads[((gn * 0.9) as usize).min(grads.len() - 1)];
    f[15] = grads.iter().filter(|&&g| g > 0.1).count() as f64 / gn;
    f
}

/// Principal square root of a symmetric positive semi-definite matrix by
/// the Denman–Beavers iteration.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    // scaling keeps the iteration well conditioned
    let scale = a.norm().max(1e-300);
    let mut y = a / scale;
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let (Some(yi), Some(zi)) = (y.clone().try_inverse(), z.clone().try_inverse()) else {
            break;
        };
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-14 * y.norm() {
            break;
        }
    }
    let mut r = y * scale.sqrt();
    // symmetrize away rounding
    r = (&r + r.transpose()) * 0.5;
    r
}

fn gaussian_fit(set: &[[f64; FEATURE_DIM]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(FEATURE_DIM);
    for f in set {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    for f in set {
        let d = DVector::from_column_slice(f) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    cov += DMatrix::identity(FEATURE_DIM, FEATURE_DIM) * 1e-6;
    (mu, cov)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)` between Gaussians fit to
/// feature vectors. The cross term uses `(Σa^½ Σb Σa^½)^½`, which has the
/// same trace.
pub fn frechet_distance(a: &[[f64; FEATURE_DIM]], b: &[[f64; FEATURE_DIM]]) -> f64 {
    let (mu_a, cov_a) = gaussian_fit(a);
    let (mu_b, cov_b) = gaussian_fit(b);
    let sa = sqrtm_psd(&cov_a);
    let m = &sa * &cov_b * &sa;
    let cross = sqrtm_psd(&((&m + m.transpose()) * 0.5)).trace();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    d.max(0.0)
}

pub fn toy_fid(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() < MIN_FID_SET || b.len() < MIN_FID_SET {
        return config_err(format!(
            "Fréchet distance needs at least {MIN_FID_SET} images per set, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    let fa: Vec<_> = a.iter().map(features).collect();
    let fb: Vec<_> = b.iter().map(features).collect();
    Ok(frechet_distance(&fa, &fb))
}

/// Content and sampler seed for the `i`-th image of an evaluation set.
pub fn plan(seed: u64, n: usize) -> Vec<(ContentSpec, u64)> {
    let all = ContentSpec::all();
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, i as u64);
            (all[rng.below(all.len())], rng.next_u64())
        })
        .collect()
}

/// Everything needed to turn captions and assignments into images.
pub struct Generator<'a> {
    pub net: &'a UNet<f32>,
    pub enc: &'a TextEncoder,
    pub aesemb: &'a AesEmb,
    pub sched: &'a DiffusionSchedule,
    pub cfg: SamplerConfig,
    uncond: Condition,
}

impl<'a> Generator<'a> {
    pub fn new(
        net: &'a UNet<f32>,
        enc: &'a TextEncoder,
        aesemb: &'a AesEmb,
        sched: &'a DiffusionSchedule,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate(sched)?;
        let f_c = enc.encode_text("")?.tokens;
        let f_a = net.has_vmix().then(|| Tensor::zeros(f_c.shape()));
        Ok(Self {
            net,
            enc,
            aesemb,
            sched,
            cfg,
            uncond: Condition { f_c, f_a },
        })
    }

    pub fn unconditional(&self) -> &Condition {
        &self.uncond
    }

    pub fn condition(&self, caption: &str, assignment: &AestheticAssignment) -> Result<Condition> {
        let f_c = self.enc.encode_text(caption)?.tokens;
        let f_a = if self.net.has_vmix() {
            Some(self.net.project_aesthetic(&self.aesemb.select(assignment)?)?)
        } else {
            None
        };
        Ok(Condition { f_c, f_a })
    }

    pub fn sample_tensor(&self, cond: &Condition, lambda: f64, seed: u64) -> Result<Tensor<f32>> {
        let cfg = SamplerConfig {
            lambda,
            ..self.cfg.clone()
        };
        ddim_sample(self.net, self.sched, cond, &self.uncond, &cfg, seed)
    }

    pub fn sample(&self, caption: &str, assignment: &AestheticAssignment, lambda: f64, seed: u64) -> Result<Image> {
        let cond = self.condition(caption, assignment)?;
        Image::from_tensor(&self.sample_tensor(&cond, lambda, seed)?)
    }

    /// One image per plan entry.
    pub fn sample_set(
        &self,
        plan: &[(ContentSpec, u64)],
        assignment: &AestheticAssignment,
        lambda: f64,
    ) -> Result<Vec<Image>> {
        plan.iter()
            .map(|(c, s)| self.sample(&c.caption(), assignment, lambda, *s))
            .collect()
    }
}

pub fn mean_scores(images: &[Image]) -> AttributeScores {
    let mut acc = [0.0; 4];
    for img in images {
        let m = measure(img);
        for (a, v) in acc.iter_mut().zip(m.0) {
            *a += v / images.len() as f64;
        }
    }
    AttributeScores(acc)
}

/// Positive side of an attribute-shift comparison; the negative side is
/// always all-negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    /// One dimension positive, the rest negative.
    Single(Dimension),
    /// Every dimension positive.
    All,
}

impl ShiftMode {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftMode::Single(d) => d.name(),
            ShiftMode::All => "all",
        }
    }

    pub fn assignment(&self, pairs: usize) -> AestheticAssignment {
        match self {
            ShiftMode::Single(d) => AestheticAssignment::single(pairs, d.index()),
            ShiftMode::All => all_positive(pairs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftResult {
    pub mode: ShiftMode,
    pub mean_pos: AttributeScores,
    pub mean_neg: AttributeScores,
    pub n: usize,
    pub seed: u64,
}

impl ShiftResult {
    pub fn delta(&self, d: Dimension) -> f64 {
        self.mean_pos.get(d) - self.mean_neg.get(d)
    }

    /// `(mean_pos, mean_neg, Δ)` for `d`.
    pub fn for_dimension(&self, d: Dimension) -> (f64, f64, f64) {
        (self.mean_pos.get(d), self.mean_neg.get(d), self.delta(d))
    }
}

/// Samples `n` images with the positive assignment of `mode` and the same
/// `n` contents and seeds all-negative, and compares oracle means.
pub fn attribute_shift(gen: &Generator<'_>, mode: ShiftMode, n: usize, seed: u64) -> Result<ShiftResult> {
    let negative = AestheticAssignment::all_negative(gen.aesemb.pairs());
    let p = plan(seed, n);
    let neg = gen.sample_set(&p, &negative, gen.cfg.lambda)?;
    attribute_shift_against(gen, mode, &p, &mean_scores(&neg), seed)
}

/// As [`attribute_shift`], reusing precomputed all-negative means over `plan`.
pub fn attribute_shift_against(
    gen: &Generator<'_>,
    mode: ShiftMode,
    plan: &[(ContentSpec, u64)],
    mean_neg: &AttributeScores,
    seed: u64,
) -> Result<ShiftResult> {
    let pos = gen.sample_set(plan, &mode.assignment(gen.aesemb.pairs()), gen.cfg.lambda)?;
    Ok(ShiftResult {
        mode,
        mean_pos: mean_scores(&pos),
        mean_neg: *mean_neg,
        n: plan.len(),
        seed,
    })
}

/// Match rate of the caption classifier over `n` sampled captions.
pub fn alignment_score(
    gen: &Generator<'_>,
    assignment: &AestheticAssignment,
    lambda: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let p = plan(seed, n);
    let images = gen.sample_set(&p, assignment, lambda)?;
    let contents: Vec<ContentSpec> = p.iter().map(|(c, _)| *c).collect();
    Ok(alignment_of(&images, &contents))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub scores: AttributeScores,
    pub alignment: f64,
}

fn sweep_row(images: &[Image], p: &[(ContentSpec, u64)], lambda: f64) -> SweepRow {
    let contents: Vec<ContentSpec> = p.iter().map(|(c, _)| *c).collect();
    SweepRow {
        lambda,
        scores: mean_scores(images),
        alignment: alignment_of(images, &contents),
    }
}

/// All-positive samples at each λ over one fixed plan.
pub fn lambda_sweep(gen: &Generator<'_>, lambdas: &[f64], n: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let p = plan(seed, n);
    let positive = all_positive(gen.aesemb.pairs());
    lambdas
        .iter()
        .map(|&l| Ok(sweep_row(&gen.sample_set(&p, &positive, l)?, &p, l)))
        .collect()
}

/// The model with every adapter parameter removed.
pub fn strip_adapters(net: &UNet<f32>) -> UNet<f32> {
    let mut base = net.clone();
    base.detach_vmix();
    crate::lora::detach(&mut base);
    base
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_text: String,
    pub seed: u64,
    pub samples: usize,
    pub shifts: Vec<ShiftResult>,
    /// Shifts of a freshly attached, untrained adapter on the same base.
    pub control: Vec<ShiftResult>,
    pub baseline: SweepRow,
    pub sweep: Vec<SweepRow>,
    pub fid_samples: usize,
    pub fid_baseline: f64,
    pub fid_vmix: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub samples: usize,
    pub fid_samples: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
    /// Seed of the fresh adapter in the control arm.
    pub control_seed: u64,
}

/// Runs every evaluation on a trained model.
pub fn evaluate(
    net: &UNet<f32>,
    enc: &TextEncoder,
    aesemb: &AesEmb,
    sched: &DiffusionSchedule,
    sampler: &SamplerConfig,
    settings: &EvalSettings,
    config_text: &str,
) -> Result<EvalReport> {
    let pairs = aesemb.pairs();
    let n = settings.samples;
    let seed = settings.seed;
    let base = strip_adapters(net);
    let mut control = base.clone();
    control.attach_vmix(settings.control_seed)?;

    let shift_plan = plan(Rng::derive(seed, 1).next_u64(), n);
    let modes: Vec<ShiftMode> = Dimension::ALL
        .iter()
        .take(pairs)
        .map(|&d| ShiftMode::Single(d))
        .chain([ShiftMode::All])
        .collect();
    let negative = AestheticAssignment::all_negative(pairs);
    let arms = |model: &UNet<f32>| -> Result<Vec<ShiftResult>> {
        let gen = Generator::new(model, enc, aesemb, sched, sampler.clone())?;
        let neg = mean_scores(&gen.sample_set(&shift_plan, &negative, sampler.lambda)?);
        modes
            .iter()
            .map(|&m| attribute_shift_against(&gen, m, &shift_plan, &neg, seed))
            .collect()
    };
    let shifts = arms(net)?;
    let control = arms(&control)?;

    let sweep_plan = plan(Rng::derive(seed, 2).next_u64(), n);
    let positive = all_positive(pairs);
    let gen = Generator::new(net, enc, aesemb, sched, sampler.clone())?;
    let base_gen = Generator::new(&base, enc, aesemb, sched, sampler.clone())?;
    let baseline = sweep_row(&base_gen.sample_set(&sweep_plan, &positive, 0.0)?, &sweep_plan, 0.0);
    let sweep = settings
        .lambdas
        .iter()
        .map(|&l| Ok(sweep_row(&gen.sample_set(&sweep_plan, &positive, l)?, &sweep_plan, l)))
        .collect::<Result<Vec<_>>>()?;

    let m = settings.fid_samples;
    let fid_plan = plan(Rng::derive(seed, 3).next_u64(), m);
    let reference: Vec<Image> = make_dataset(
        m,
        Rng::derive(seed, 4).next_u64(),
        &DatasetConfig {
            size: net.config().image_size,
            positive_rate: 1.0,
            dims: pairs,
        },
    )?
    .into_iter()
    .map(|s| s.image)
    .collect();
    let fid_baseline = toy_fid(&base_gen.sample_set(&fid_plan, &positive, 0.0)?, &reference)?;
    let fid_vmix = toy_fid(&gen.sample_set(&fid_plan, &positive, sampler.lambda)?, &reference)?;

    Ok(EvalReport {
        config_text: config_text.to_string(),
        seed,
        samples: n,
        shifts,
        control,
        baseline,
        sweep,
        fid_samples: m,
        fid_baseline,
        fid_vmix,
    })
}

impl EvalReport {
    /// True when the trained adapter moves no attribute by 0.02 or more.
    pub fn looks_untrained(&self) -> bool {
        self.shifts
            .iter()
            .all(|s| Dimension::ALL.iter().all(|&d| s.delta(d).abs() < 0.02))
    }

    /// Tab-separated tables: attribute shifts (trained and control), the
    /// λ sweep with its baseline row, and the Fréchet distances.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# seed={:#x}\tsamples={}\tfeatures=v{FEATURE_VERSION}", self.seed, self.samples);
        for line in self.config_text.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "arm\tpositive\tdimension\tmean_pos\tmean_neg\tdelta");
        for (arm, rows) in [("trained", &self.shifts), ("control", &self.control)] {
            for r in rows {
                let dims: Vec<Dimension> = match r.mode {
                    ShiftMode::Single(d) => vec![d],
                    ShiftMode::All => Dimension::ALL.to_vec(),
                };
                for d in dims {
                    let (p, n, delta) = r.for_dimension(d);
                    let _ = writeln!(out, "{arm}\t{}\t{}\t{p:.6}\t{n:.6}\t{delta:.6}", r.mode.name(), d.name());
                }
            }
        }
        out.push('\n');
        let _ = writeln!(out, "model\tlambda\tcolor\tlighting\tcomposition\tfocus\talignment");
        for (model, row) in std::iter::once(("baseline", &self.baseline)).chain(self.sweep.iter().map(|r| ("vmix", r))) {
            let s = row.scores.0;
            let _ = writeln!(
                out,
                "{model}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                row.lambda, s[0], s[1], s[2], s[3], row.alignment
            );
        }
        out.push('\n');
        let _ = writeln!(out, "model\tfid_samples\ttoy_fid");
        let _ = writeln!(out, "baseline\t{}\t{:.6}", self.fid_samples, self.fid_baseline);
        let _ = writeln!(out, "vmix\t{}\t{:.6}", self.fid_samples, self.fid_vmix);
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "evaluation seed {:#x}, {} samples per set, feature set v{FEATURE_VERSION}",
            self.seed, self.samples
        );
        if self.looks_untrained() {
            let _ = writeln!(out, "warning: no attribute moved by 0.02 or more; the adapter looks untrained");
        }
        for (arm, rows) in [("trained", &self.shifts), ("control", &self.control)] {
            for r in rows {
                if let ShiftMode::Single(d) = r.mode {
                    let (p, n, delta) = r.for_dimension(d);
                    let _ = writeln!(out, "{arm:8} {:12} pos {p:.4} neg {n:.4} delta {delta:+.4}", d.name());
                }
            }
        }
        if let Some(all) = self.shifts.iter().find(|r| r.mode == ShiftMode::All) {
            let deltas: Vec<String> = Dimension::ALL
                .iter()
                .map(|&d| format!("{} {:+.4}", d.name(), all.delta(d)))
                .collect();
            let _ = writeln!(out, "all-positive vs all-negative: {}", deltas.join(", "));
        }
        let best = self.sweep.iter().find(|r| r.lambda == 1.0).unwrap_or(&self.baseline);
        let _ = writeln!(
            out,
            "alignment baseline {:.4}, vmix {:.4}",
            self.baseline.alignment, best.alignment
        );
        let _ = writeln!(out, "toy FID baseline {:.4}, vmix {:.4}", self.fid_baseline, self.fid_vmix);
        out.push_str("\n[config]\n");
        out.push_str(&self.config_text);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aesemb::AestheticAssignment;
    use crate::synthdata::{make_sample, render, AestheticSpec};
    use nalgebra::SymmetricEigen;

    #[test]
    fn classifier_is_accurate_on_renders() {
        for size in [16usize, 32] {
            let cfg = DatasetConfig {
                size,
                ..Default::default()
            };
            let n = 600;
            let mut hits = 0;
            for i in 0..n {
                let s = make_sample(i, 77, &cfg);
                hits += usize::from(classify(&s.image).matches(&s.content));
            }
            let acc = hits as f64 / n as f64;
            assert!(acc > 0.98, "accuracy {acc} at {size}px");
        }
    }

    #[test]
    fn classifier_is_near_chance_on_noise() {
        let mut rng = Rng::new(5);
        let all = ContentSpec::all();
        let n = 2000;
        let mut hits = 0;
        for _ in 0..n {
            let img = Image::from_fn(16, |_, _| [0, 1, 2].map(|_| rng.uniform() as f32));
            hits += usize::from(classify(&img).matches(&all[rng.below(all.len())]));
        }
        let acc = hits as f64 / n as f64;
        // chance is 1/12; the binomial standard error at n = 2000 is about 0.006
        assert!((acc - 1.0 / 12.0).abs() < 0.04, "accuracy {acc}");
    }

    #[test]
    fn classifier_ignores_aesthetics() {
        let c = ContentSpec::all()[5];
        for bits in 0..16u8 {
            let a = AestheticAssignment::new((0..4).map(|i| bits >> i & 1 == 1).collect());
            let img = render(&c, &AestheticSpec::from_assignment(&a), 9, 32);
            assert!(classify(&img).matches(&c), "{a}");
        }
        let flat = Image::filled(16, [0.3, 0.3, 0.3]);
        assert_eq!(classify(&flat).shape, None);
    }

    fn random_psd(n: usize, rng: &mut Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n + 2, |_, _| rng.normal());
        &b * b.transpose() + DMatrix::identity(n, n) * 1e-3
    }

    #[test]
    fn sqrtm_matches_eigen_oracle() {
        let mut rng = Rng::new(6);
        for n in [1, 3, 16] {
            let a = random_psd(n, &mut rng);
            let eig = SymmetricEigen::new(a.clone());
            let root = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
                * eig.eigenvectors.transpose();
            let ours = sqrtm_psd(&a);
            assert!((&ours - &root).norm() < 1e-9 * root.norm(), "n = {n}");
            assert!((&ours * &ours - &a).norm() < 1e-9 * a.norm());
        }
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let cfg = DatasetConfig {
            size: 16,
            ..Default::default()
        };
        let set: Vec<Image> = make_dataset(64, 3, &cfg).unwrap().into_iter().map(|s| s.image).collect();
        assert!(toy_fid(&set, &set).unwrap().abs() < 1e-6);
        assert!(toy_fid(&set[..10], &set).is_err());
    }

    #[test]
    fn frechet_of_split_halves_shrinks_with_size() {
        let cfg = DatasetConfig {
            size: 16,
            ..Default::default()
        };
        let feats: Vec<[f64; FEATURE_DIM]> = make_dataset(1024, 4, &cfg)
            .unwrap()
            .iter()
            .map(|s| features(&s.image))
            .collect();
        let small = frechet_distance(&feats[..64], &feats[64..128]);
        let large = frechet_distance(&feats[..512], &feats[512..]);
        assert!(large < small, "small {small} large {large}");
        // a clearly different distribution sits far above sampling noise
        let shifted: Vec<[f64; FEATURE_DIM]> = feats[512..]
            .iter()
            .map(|f| {
                let mut g = *f;
                g[0] += 0.2;
                g
            })
            .collect();
        assert!(frechet_distance(&feats[..512], &shifted) > 0.03 + large);
    }

    #[test]
    fn plan_is_deterministic() {
        assert_eq!(plan(3, 10), plan(3, 10));
        assert_ne!(plan(3, 10), plan(4, 10));
    }
}
