//! Procedural scenes with controllable, pixel-measurable aesthetics.
//!
//! A scene is one colored shape on a dark background of the complementary
//! hue. Four attributes can be switched independently: saturation, a vertical
//! lighting ramp, centered placement and edge sharpness. [`measure`] scores
//! each of them from pixels alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aesemb::AestheticAssignment;
use crate::error::{config_err, Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorName {
    pub const ALL: [ColorName; 4] = [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.92, 0.12, 0.10],
            ColorName::Green => [0.12, 0.82, 0.18],
            ColorName::Blue => [0.14, 0.30, 0.96],
            ColorName::Yellow => [0.96, 0.86, 0.08],
        }
    }

    /// Dark shade of the complementary hue.
    pub fn background(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.04, 0.26, 0.30],
            ColorName::Green => [0.30, 0.06, 0.28],
            ColorName::Blue => [0.32, 0.22, 0.03],
            ColorName::Yellow => [0.08, 0.10, 0.36],
        }
    }

    /// Reference hue in degrees.
    pub fn hue(self) -> f32 {
        match self {
            ColorName::Red => 0.0,
            ColorName::Yellow => 55.0,
            ColorName::Green => 125.0,
            ColorName::Blue => 225.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Center,
    Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContentSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    /// Direction of displacement when the composition attribute is off:
    /// `Center` moves along one axis, `Offset` diagonally. A positive
    /// composition always centers the subject.
    pub position: Position,
}

impl ContentSpec {
    /// Every combination, 24 in total.
    pub fn all() -> Vec<ContentSpec> {
        let mut out = Vec::new();
        for shape in ShapeKind::ALL {
            for color in ColorName::ALL {
                for position in [Position::Center, Position::Offset] {
                    out.push(ContentSpec { shape, color, position });
                }
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }

    /// Inverse of [`caption`](Self::caption); position is not recoverable.
    pub fn parse_caption(caption: &str) -> Option<(ColorName, ShapeKind)> {
        let mut words = caption.split_whitespace();
        let c = words.next()?;
        let s = words.next()?;
        if words.next().is_some() {
            return None;
        }
        let color = ColorName::ALL.into_iter().find(|x| x.word() == c)?;
        let shape = ShapeKind::ALL.into_iter().find(|x| x.word() == s)?;
        Some((color, shape))
    }
}

/// The four measurable attributes, in label-pair order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dimension {
    Color,
    Lighting,
    Composition,
    Focus,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Color,
        Dimension::Lighting,
        Dimension::Composition,
        Dimension::Focus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Color => "color",
            Dimension::Lighting => "lighting",
            Dimension::Composition => "composition",
            Dimension::Focus => "focus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which attributes a render shows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AestheticSpec {
    pub saturated: bool,
    pub lit: bool,
    pub centered: bool,
    pub sharp: bool,
}

impl AestheticSpec {
    /// Reads the first four polarities in [`Dimension`] order; missing ones
    /// count as negative.
    pub fn from_assignment(a: &AestheticAssignment) -> Self {
        Self {
            saturated: a.is_positive(0),
            lit: a.is_positive(1),
            centered: a.is_positive(2),
            sharp: a.is_positive(3),
        }
    }

    pub fn get(&self, d: Dimension) -> bool {
        match d {
            Dimension::Color => self.saturated,
            Dimension::Lighting => self.lit,
            Dimension::Composition => self.centered,
            Dimension::Focus => self.sharp,
        }
    }
}

/// Oracle scores in `[0, 1]`, indexed by [`Dimension::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttributeScores(pub [f64; 4]);

impl AttributeScores {
    pub fn get(&self, d: Dimension) -> f64 {
        self.0[d.index()]
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / 4.0
    }
}

/// Square RGB image, row-major, interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn px(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.size + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// `[3, S, S]` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s2 = self.size * self.size;
        Tensor::from_fn(&[3, self.size, self.size], |i| {
            let (c, p) = (i / s2, i % s2);
            self.data[p * 3 + c] * 2.0 - 1.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor), clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let size = match t.shape() {
            [3, h, w] if h == w => *h,
            s => return crate::error::shape_err(format!("image tensor must be [3,S,S], got {s:?}")),
        };
        let s2 = size * size;
        let d = t.data();
        Ok(Self::from_fn(size, |x, y| {
            let p = y * size + x;
            [0, 1, 2].map(|c| ((d[c * s2 + p] + 1.0) * 0.5).clamp(0.0, 1.0))
        }))
    }

    /// 8-bit quantization, as stored in PPM files.
    pub fn quantized(&self) -> Self {
        Self {
            size: self.size,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "PPM image",
            detail: d.into(),
        };
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
                if bytes[i] == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                } else {
                    i += 1;
                }
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("bad header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if w != h || w == 0 || max != 255 {
            return Err(bad("expected a square 8-bit image"));
        }
        let body = bytes.get(i + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if body.len() != w * h * 3 {
            return Err(bad("pixel data length mismatch"));
        }
        Ok(Self {
            size: w,
            data: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Blur width at `size`; 1.5 pixels at 32.
pub fn blur_sigma(size: usize) -> f32 {
    1.5 * size as f32 / 32.0
}

const SUPERSAMPLE: usize = 4;

/// Fraction of desaturated color kept when the color attribute is off.
const DESATURATED_KEEP: f32 = 0.25;
const RAMP_TOP: f32 = 1.35;
const RAMP_BOTTOM: f32 = 0.45;

const SQUARE_HALF: f32 = 0.88;
const TRIANGLE_HEIGHT: f32 = 2.2;
const TRIANGLE_HALF_BASE: f32 = 1.15;

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f32,
    cy: f32,
    r: f32,
}

fn place(content: &ContentSpec, centered: bool, size: usize, rng: &mut Rng) -> Placement {
    let s = size as f32;
    let r = s * rng.uniform_in(0.17, 0.21) as f32;
    let (dx, dy) = if centered {
        let jitter = 0.04 * s;
        (
            rng.uniform_in(-1.0, 1.0) as f32 * jitter / std::f32::consts::SQRT_2,
            rng.uniform_in(-1.0, 1.0) as f32 * jitter / std::f32::consts::SQRT_2,
        )
    } else {
        let off = s * rng.uniform_in(0.27, 0.30) as f32;
        let sx = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let sy = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        match content.position {
            Position::Offset => (sx * off, sy * off),
            Position::Center if rng.bernoulli(0.5) => (sx * off, 0.0),
            Position::Center => (0.0, sy * off),
        }
    };
    Placement {
        cx: s / 2.0 + dx,
        cy: s / 2.0 + dy,
        r,
    }
}

fn inside(shape: ShapeKind, p: Placement, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - p.cx, y - p.cy);
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= p.r * p.r,
        ShapeKind::Square => {
            let h = p.r * SQUARE_HALF;
            dx.abs() <= h && dy.abs() <= h
        }
        ShapeKind::Triangle => {
            // upright isoceles triangle whose vertex mean is the center
            let h = p.r * TRIANGLE_HEIGHT;
            let half_base = p.r * TRIANGLE_HALF_BASE;
            let top = -2.0 * h / 3.0;
            let bottom = h / 3.0;
            if dy < top || dy > bottom {
                return false;
            }
            let t = (dy - top) / h;
            dx.abs() <= half_base * t
        }
    }
}

fn jitter_color(c: [f32; 3], amount: f32, rng: &mut Rng) -> [f32; 3] {
    c.map(|v| (v + rng.uniform_in(-1.0, 1.0) as f32 * amount).clamp(0.0, 1.0))
}

/// Fraction of each pixel, row-major, covered by `shape` of size `r` whose
/// center (vertex mean for the triangle) is `(cx, cy)`.
pub fn coverage(shape: ShapeKind, cx: f32, cy: f32, r: f32, size: usize) -> Vec<f32> {
    let p = Placement { cx, cy, r };
    let n = SUPERSAMPLE;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let fx = x as f32 + (sx as f32 + 0.5) / n as f32;
                    let fy = y as f32 + (sy as f32 + 0.5) / n as f32;
                    hits += usize::from(inside(shape, p, fx, fy));
                }
            }
            out.push(hits as f32 / (n * n) as f32);
        }
    }
    out
}

/// Area of `shape` at size `r`, in square pixels.
pub fn shape_area(shape: ShapeKind, r: f32) -> f32 {
    match shape {
        ShapeKind::Circle => std::f32::consts::PI * r * r,
        ShapeKind::Square => (2.0 * SQUARE_HALF * r).powi(2),
        ShapeKind::Triangle => TRIANGLE_HEIGHT * TRIANGLE_HALF_BASE * r * r,
    }
}

/// Renders a `size`×`size` scene. Deterministic in `(content, aes, seed)`.
pub fn render(content: &ContentSpec, aes: &AestheticSpec, seed: u64, size: usize) -> Image {
    let mut rng = Rng::new(seed);
    let fg = jitter_color(content.color.rgb(), 0.04, &mut rng);
    let bg = jitter_color(content.color.background(), 0.03, &mut rng);
    let p = place(content, aes.centered, size, &mut rng);
    let cov = coverage(content.shape, p.cx, p.cy, p.r, size);
    let mut img = Image::from_fn(size, |x, y| {
        let a = cov[y * size + x];
        [0, 1, 2].map(|c| a * fg[c] + (1.0 - a) * bg[c])
    });
    if !aes.sharp {
        img = gaussian_blur(&img, blur_sigma(size));
    }
    if !aes.saturated {
        for c in img.data.chunks_exact_mut(3) {
            let y = luminance([c[0], c[1], c[2]]);
            for v in c.iter_mut() {
                *v = DESATURATED_KEEP * *v + (1.0 - DESATURATED_KEEP) * y;
            }
        }
    }
    if aes.lit {
        for y in 0..size {
            let t = (y as f32 + 0.5) / size as f32;
            let m = RAMP_TOP + (RAMP_BOTTOM - RAMP_TOP) * t;
            for x in 0..size {
                let c = img.px(x, y).map(|v| (v * m).clamp(0.0, 1.0));
                img.set(x, y, c);
            }
        }
    }
    img
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let s = img.size as isize;
    let clamp = |v: isize| v.clamp(0, s - 1) as usize;
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(img.size, |x, y| {
            let mut acc = [0.0f32; 3];
            for (k, &w) in kernel.iter().enumerate() {
                let o = k as isize - radius;
                let c = if horizontal {
                    src.px(clamp(x as isize + o), y)
                } else {
                    src.px(x, clamp(y as isize + o))
                };
                for i in 0..3 {
                    acc[i] += w * c[i];
                }
            }
            acc
        })
    };
    pass(&pass(img, true), false)
}

fn hsv_saturation(c: [f32; 3]) -> f64 {
    let max = c[0].max(c[1]).max(c[2]) as f64;
    let min = c[0].min(c[1]).min(c[2]) as f64;
    if max <= 1e-6 {
        0.0
    } else {
        (max - min) / max
    }
}

fn median(v: &mut [f32]) -> f32 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-row median color, a background estimate robust to the subject.
pub(crate) fn row_background(img: &Image) -> Vec<[f32; 3]> {
    let s = img.size;
    (0..s)
        .map(|y| {
            [0, 1, 2].map(|c| {
                let mut v: Vec<f32> = (0..s).map(|x| img.px(x, y)[c]).collect();
                median(&mut v)
            })
        })
        .collect()
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Coefficient of determination of a least-squares line through `ys`
/// against their index; 0 when `ys` is constant.
fn r_squared(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
        syy += (y - my) * (y - my);
    }
    if syy <= 1e-12 || sxx == 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
}

pub fn measure_saturation(img: &Image) -> f64 {
    img.pixels().map(hsv_saturation).sum::<f64>() / (img.size * img.size) as f64
}

/// Straightness of the vertical profile of row-median luminance.
pub fn measure_lighting(img: &Image) -> f64 {
    let rows: Vec<f64> = row_background(img).into_iter().map(|c| luminance(c) as f64).collect();
    r_squared(&rows)
}

/// One minus the subject centroid's distance from the frame center, in
/// half-frame units.
pub fn measure_composition(img: &Image) -> f64 {
    let s = img.size;
    let bg = row_background(img);
    let (mut w, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..s {
        for x in 0..s {
            let d = dist(img.px(x, y), bg[y]) as f64;
            w += d;
            mx += d * (x as f64 + 0.5);
            my += d * (y as f64 + 0.5);
        }
    }
    if w <= 1e-9 {
        return 1.0;
    }
    let c = s as f64 / 2.0;
    let off = ((mx / w - c).powi(2) + (my / w - c).powi(2)).sqrt();
    (1.0 - off / c).clamp(0.0, 1.0)
}

/// Mean of the strongest tenth of gradients of the subject map: each
/// pixel's color distance from its row background, scaled so that the most
/// distant pixel is 1. Independent of overall contrast and lighting.
pub fn measure_focus(img: &Image) -> f64 {
    let s = img.size;
    let bg = row_background(img);
    let mut map: Vec<f32> = (0..s * s).map(|i| dist(img.px(i % s, i / s), bg[i / s])).collect();
    let peak = map.iter().cloned().fold(0.0f32, f32::max);
    if peak <= 1e-6 {
        return 0.0;
    }
    map.iter_mut().for_each(|v| *v /= peak);
    let mut grads = Vec::with_capacity((s - 1) * (s - 1));
    for y in 0..s - 1 {
        for x in 0..s - 1 {
            let v = map[y * s + x];
            let gx = map[y * s + x + 1] - v;
            let gy = map[(y + 1) * s + x] - v;
            grads.push((gx * gx + gy * gy).sqrt());
        }
    }
    grads.sort_by(|a, b| b.total_cmp(a));
    let top = (grads.len() / 10).max(1);
    let mean_top = grads[..top].iter().map(|&g| g as f64).sum::<f64>() / top as f64;
    mean_top.clamp(0.0, 1.0)
}

pub fn measure(img: &Image) -> AttributeScores {
    AttributeScores([
        measure_saturation(img),
        measure_lighting(img),
        measure_composition(img),
        measure_focus(img),
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub content: ContentSpec,
    pub assignment: AestheticAssignment,
    pub scores: AttributeScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub size: usize,
    /// Probability that each dimension is positive.
    pub positive_rate: f64,
    /// Length of the polarity strings; dimensions past the fourth do not
    /// affect the render.
    pub dims: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 32,
            positive_rate: 0.5,
            dims: 4,
        }
    }
}

/// Sample `i` uses content spec `i mod 24`, so coverage is uniform.
pub fn make_sample(i: usize, seed: u64, cfg: &DatasetConfig) -> SyntheticSample {
    let specs = ContentSpec::all();
    let content = specs[i % specs.len()];
    let mut rng = Rng::derive(seed, i as u64);
    let assignment = AestheticAssignment::new((0..cfg.dims).map(|_| rng.bernoulli(cfg.positive_rate)).collect());
    let image = render(
        &content,
        &AestheticSpec::from_assignment(&assignment),
        rng.next_u64(),
        cfg.size,
    );
    let scores = measure(&image);
    SyntheticSample {
        image,
        content,
        assignment,
        scores,
    }
}

pub fn make_dataset(n: usize, seed: u64, cfg: &DatasetConfig) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return config_err("dataset size must be at least 1");
    }
    if !(0.0..=1.0).contains(&cfg.positive_rate) || cfg.dims == 0 || cfg.size < 8 {
        return config_err(format!("invalid dataset config {cfg:?}"));
    }
    Ok((0..n).map(|i| make_sample(i, seed, cfg)).collect())
}

/// One manifest line: image path relative to the manifest, caption, polarity.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub caption: String,
    pub assignment: AestheticAssignment,
}

pub fn manifest_text(samples: &[SyntheticSample]) -> String {
    let mut out = String::new();
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{}", image_name(i), s.content.caption(), s.assignment);
    }
    out
}

fn image_name(i: usize) -> String {
    format!("images/{i:06}.ppm")
}

/// Writes `dataset.tsv` and `images/` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (i, s) in samples.iter().enumerate() {
        s.image.save_ppm(&dir.join(image_name(i)))?;
    }
    let manifest = dir.join("dataset.tsv");
    std::fs::write(&manifest, manifest_text(samples))?;
    Ok(manifest)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format {
                what: "dataset.tsv",
                detail: format!("line {} has {} columns, expected 3", lineno + 1, cols.len()),
            });
        }
        out.push(ManifestEntry {
            image: PathBuf::from(cols[0]),
            caption: cols[1].to_string(),
            assignment: cols[2].parse()?,
        });
    }
    Ok(out)
}

/// Loads the manifest and its images; image paths resolve against `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<(ManifestEntry, Image)>> {
    let text = std::fs::read_to_string(dir.join("dataset.tsv"))?;
    parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            let img = Image::load_ppm(&dir.join(&e.image))?;
            Ok((e, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ContentSpec {
        ContentSpec {
            shape: ShapeKind::Circle,
            color: ColorName::Red,
            position: Position::Center,
        }
    }

    fn all_on() -> AestheticSpec {
        AestheticSpec {
            saturated: true,
            lit: true,
            centered: true,
            sharp: true,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let a = render(&spec(), &all_on(), 9, 32);
        let b = render(&spec(), &all_on(), 9, 32);
        assert_eq!(a, b);
        assert_ne!(a, render(&spec(), &all_on(), 10, 32));
    }

    #[test]
    fn saturation_toggle_is_large() {
        let mut worst = f64::INFINITY;
        for (k, content) in ContentSpec::all().into_iter().enumerate() {
            for seed in 0..4 {
                let seed = seed + 10 * k as u64;
                let mut aes = AestheticSpec {
                    saturated: true,
                    ..Default::default()
                };
                let hi = measure_saturation(&render(&content, &aes, seed, 32));
                aes.saturated = false;
                let lo = measure_saturation(&render(&content, &aes, seed, 32));
                worst = worst.min(hi - lo);
            }
        }
        assert!(worst >= 0.3, "smallest saturation gap {worst}");
    }

    #[test]
    fn centered_subject_is_near_center() {
        for (k, content) in ContentSpec::all().into_iter().enumerate() {
            let img = render(&content, &all_on(), k as u64, 32);
            assert!(measure_composition(&img) >= 0.9, "{content:?}");
        }
    }

    #[test]
    fn gray_image_has_no_saturation() {
        assert_eq!(measure_saturation(&Image::filled(32, [0.5; 3])), 0.0);
    }

    #[test]
    fn vertical_gradient_is_perfectly_lit() {
        let img = Image::from_fn(32, |_, y| [y as f32 / 40.0 + 0.1; 3]);
        assert!((measure_lighting(&img) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blur_lowers_focus() {
        for (k, content) in ContentSpec::all().into_iter().enumerate() {
            let img = render(&content, &all_on(), k as u64, 32);
            let blurred = gaussian_blur(&img, 1.5);
            assert!(measure_focus(&blurred) < measure_focus(&img));
        }
    }

    #[test]
    fn ppm_round_trip() {
        let img = render(&spec(), &all_on(), 3, 16).quantized();
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(img, back);
        assert!(Image::from_ppm(b"P6\n16 16\n255\n\x00").is_err());
        assert!(Image::from_ppm(b"P3\n1 1\n255\n000").is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = render(&spec(), &all_on(), 3, 16);
        let back = Image::from_tensor(&img.to_tensor()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn captions_round_trip() {
        for c in ContentSpec::all() {
            assert_eq!(ContentSpec::parse_caption(&c.caption()), Some((c.color, c.shape)));
        }
        assert_eq!(ContentSpec::parse_caption("red"), None);
    }

    #[test]
    fn manifest_is_deterministic() {
        let cfg = DatasetConfig {
            size: 16,
            ..Default::default()
        };
        let a = make_dataset(1000, 0, &cfg).unwrap();
        let b = make_dataset(1000, 0, &cfg).unwrap();
        let text = manifest_text(&a);
        assert_eq!(text.lines().count(), 1000);
        assert_eq!(text, manifest_text(&b));
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed[5].assignment, a[5].assignment);
        assert!(make_dataset(0, 0, &cfg).is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let cfg = DatasetConfig {
            size: 16,
            ..Default::default()
        };
        let samples = make_dataset(5, 1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (s, (e, img)) in samples.iter().zip(&back) {
            assert_eq!(e.caption, s.content.caption());
            assert_eq!(e.assignment, s.assignment);
            assert_eq!(*img, s.image.quantized());
        }
    }
}
