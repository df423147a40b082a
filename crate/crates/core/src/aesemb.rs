//! The aesthetic embedding table: paired `[CLS]` vectors of opposing labels,
//! cached to disk and indexed per image.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};
use crate::io::{read_u32, read_u64, write_u32, write_u64};
use crate::numerics::Tensor;
use crate::textenc::{rare_token, TextEncoder};

const MAGIC: &[u8; 4] = b"AESB";
const VERSION: u32 = 1;
pub const MAX_PAIRS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPair {
    pub positive: String,
    /// Rare token standing in for the absence of the attribute.
    pub negative_identifier: String,
    pub dimension_name: String,
}

impl LabelPair {
    pub fn new(dimension: &str, positive: &str, negative: &str) -> Self {
        Self {
            positive: positive.into(),
            negative_identifier: negative.into(),
            dimension_name: dimension.into(),
        }
    }
}

/// Color, lighting, composition and focus, paired with `[V1]`…`[V4]`.
pub fn default_label_pairs() -> Vec<LabelPair> {
    [
        ("color", "vibrant color"),
        ("lighting", "natural lighting"),
        ("composition", "balanced composition"),
        ("focus", "sharp focus"),
    ]
    .iter()
    .enumerate()
    .map(|(i, (dim, pos))| LabelPair::new(dim, pos, &rare_token(i + 1)))
    .collect()
}

/// Per-image polarity, `true` meaning the positive label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AestheticAssignment {
    polarity: Vec<bool>,
}

impl AestheticAssignment {
    pub fn new(polarity: Vec<bool>) -> Self {
        Self { polarity }
    }

    pub fn all_negative(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    /// Only dimension `dim` positive.
    pub fn single(n: usize, dim: usize) -> Self {
        Self::new((0..n).map(|i| i == dim).collect())
    }

    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.polarity.get(i).copied().unwrap_or(false)
    }

    pub fn polarity(&self) -> &[bool] {
        &self.polarity
    }

    /// `+1` / `-1` values.
    pub fn signs(&self) -> Vec<i8> {
        self.polarity.iter().map(|&p| if p { 1 } else { -1 }).collect()
    }
}

/// All-positive assignment of length `n`.
pub fn all_positive(n: usize) -> AestheticAssignment {
    AestheticAssignment::new(vec![true; n])
}

impl fmt::Display for AestheticAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &p in &self.polarity {
            f.write_str(if p { "+" } else { "-" })?;
        }
        Ok(())
    }
}

impl FromStr for AestheticAssignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let polarity = s
            .trim()
            .chars()
            .map(|c| match c {
                '+' => Ok(true),
                '-' => Ok(false),
                other => config_err(format!("polarity character {other:?} is not + or -")),
            })
            .collect::<Result<Vec<_>>>()?;
        if polarity.is_empty() {
            return config_err("empty polarity string");
        }
        Ok(Self { polarity })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AesEmb {
    /// `[2N, d]`, positive rows at even indices.
    pub matrix: Tensor<f32>,
    pub pair_names: Vec<String>,
    pub fingerprint: u64,
}

/// FNV-1a over the label texts, identifiers and encoder seed.
pub fn fingerprint(pairs: &[LabelPair], encoder_seed: u64) -> u64 {
    let mut h = Fnv::new();
    for p in pairs {
        h.str(&p.dimension_name);
        h.str(&p.positive);
        h.str(&p.negative_identifier);
    }
    h.bytes(&encoder_seed.to_le_bytes());
    h.finish()
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    /// Length-prefixed so that concatenations cannot collide.
    pub fn str(&mut self, s: &str) {
        self.bytes(&(s.len() as u32).to_le_bytes());
        self.bytes(s.as_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn validate_pairs(pairs: &[LabelPair], enc: &TextEncoder) -> Result<()> {
    if pairs.is_empty() || pairs.len() > MAX_PAIRS {
        return config_err(format!("need 1..={MAX_PAIRS} label pairs, got {}", pairs.len()));
    }
    let mut dims = HashSet::new();
    let mut rare = HashSet::new();
    for p in pairs {
        if !dims.insert(p.dimension_name.as_str()) {
            return config_err(format!("duplicate dimension name {}", p.dimension_name));
        }
        if !rare.insert(p.negative_identifier.as_str()) {
            return config_err(format!("duplicate rare token {}", p.negative_identifier));
        }
        if !enc.vocab().is_rare(&p.negative_identifier) {
            return config_err(format!("{} is not a registered rare token", p.negative_identifier));
        }
        if p.positive.trim().is_empty() {
            return config_err(format!("empty positive label for {}", p.dimension_name));
        }
    }
    Ok(())
}

pub fn build_aesemb(pairs: &[LabelPair], enc: &TextEncoder) -> Result<AesEmb> {
    validate_pairs(pairs, enc)?;
    let d = enc.config().dim;
    let mut data = Vec::with_capacity(2 * pairs.len() * d);
    for p in pairs {
        data.extend_from_slice(enc.cls_of(&p.positive)?.data());
        data.extend_from_slice(enc.cls_of(&p.negative_identifier)?.data());
    }
    Ok(AesEmb {
        matrix: Tensor::new(&[2 * pairs.len(), d], data)?,
        pair_names: pairs.iter().map(|p| p.dimension_name.clone()).collect(),
        fingerprint: fingerprint(pairs, enc.config().seed),
    })
}

impl AesEmb {
    pub fn pairs(&self) -> usize {
        self.matrix.shape()[0] / 2
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// `f_t [N, d]`: row `2i` or `2i+1` of the table per polarity.
    pub fn select(&self, a: &AestheticAssignment) -> Result<Tensor<f32>> {
        if a.len() != self.pairs() {
            return shape_err(format!(
                "assignment of length {} for {} label pairs",
                a.len(),
                self.pairs()
            ));
        }
        let mut data = Vec::with_capacity(self.pairs() * self.dim());
        for (i, &p) in a.polarity().iter().enumerate() {
            data.extend_from_slice(self.matrix.row(2 * i + usize::from(!p)));
        }
        Tensor::new(&[self.pairs(), self.dim()], data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.pairs() as u32)?;
        write_u32(w, self.dim() as u32)?;
        write_u64(w, self.fingerprint)?;
        for &x in self.matrix.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Dimension names are not stored; they come back as `dim0`, `dim1`, …
    /// unless supplied by [`load_aesemb`].
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            what: "aesemb.bin",
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(|_| fmt("truncated header".into()))?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let n = read_u32(r).map_err(|_| fmt("truncated header".into()))? as usize;
        let d = read_u32(r).map_err(|_| fmt("truncated header".into()))? as usize;
        let fp = read_u64(r).map_err(|_| fmt("truncated header".into()))?;
        if n == 0 || n > MAX_PAIRS || d == 0 || d > 1 << 16 {
            return Err(fmt(format!("implausible extents N={n}, d={d}")));
        }
        let mut bytes = vec![0u8; 2 * n * d * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| fmt(format!("truncated matrix, expected {} values", 2 * n * d)))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(AesEmb {
            matrix: Tensor::new(&[2 * n, d], data)?,
            pair_names: (0..n).map(|i| format!("dim{i}")).collect(),
            fingerprint: fp,
        })
    }
}

pub fn save_aesemb(aesemb: &AesEmb, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    aesemb.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a cache and checks it against the current label set and encoder.
pub fn load_aesemb(path: &Path, pairs: &[LabelPair], encoder_seed: u64) -> Result<AesEmb> {
    let mut emb = load_aesemb_unchecked(path)?;
    let expected = fingerprint(pairs, encoder_seed);
    if emb.fingerprint != expected || emb.pairs() != pairs.len() {
        return Err(Error::StaleCache {
            path: path.to_path_buf(),
            expected,
            found: emb.fingerprint,
        });
    }
    emb.pair_names = pairs.iter().map(|p| p.dimension_name.clone()).collect();
    Ok(emb)
}

pub fn load_aesemb_unchecked(path: &Path) -> Result<AesEmb> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let emb = AesEmb::read_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format {
            what: "aesemb.bin",
            detail: format!("{} trailing bytes", cursor.len()),
        });
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textenc::TextConfig;

    fn enc() -> TextEncoder {
        TextEncoder::standard(TextConfig::default()).unwrap()
    }

    #[test]
    fn default_table_shape() {
        let e = enc();
        let emb = build_aesemb(&default_label_pairs(), &e).unwrap();
        assert_eq!(emb.matrix.shape(), &[8, 64]);
    }

    #[test]
    fn single_pair_rows_are_cls_vectors() {
        let e = enc();
        let pairs = vec![LabelPair::new("color", "vibrant color", "[V1]")];
        let emb = build_aesemb(&pairs, &e).unwrap();
        assert_eq!(emb.matrix.shape(), &[2, 64]);
        assert_eq!(emb.matrix.row(0), e.cls_of("vibrant color").unwrap().data());
        assert_eq!(emb.matrix.row(1), e.cls_of("[V1]").unwrap().data());
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let e = enc();
        let a = build_aesemb(&default_label_pairs(), &e).unwrap();
        let b = build_aesemb(&default_label_pairs(), &e).unwrap();
        assert!(a.matrix.bit_eq(&b.matrix));
        assert_eq!(a.fingerprint, b.fingerprint);
    }

    #[test]
    fn duplicates_rejected() {
        let e = enc();
        let mut pairs = default_label_pairs();
        pairs[1].dimension_name = "color".into();
        assert!(matches!(build_aesemb(&pairs, &e), Err(Error::Config(_))));
        let mut pairs = default_label_pairs();
        pairs[1].negative_identifier = "[V1]".into();
        assert!(matches!(build_aesemb(&pairs, &e), Err(Error::Config(_))));
        let mut pairs = default_label_pairs();
        pairs[0].negative_identifier = "red".into();
        assert!(build_aesemb(&pairs, &e).is_err());
    }

    #[test]
    fn selection_rules() {
        let e = enc();
        let emb = build_aesemb(&default_label_pairs(), &e).unwrap();
        let pos = emb.select(&all_positive(4)).unwrap();
        let neg = emb.select(&AestheticAssignment::all_negative(4)).unwrap();
        let mixed = emb.select(&"+-+-".parse().unwrap()).unwrap();
        for i in 0..4 {
            assert_eq!(pos.row(i), emb.matrix.row(2 * i));
            assert_eq!(neg.row(i), emb.matrix.row(2 * i + 1));
            let expect = if i % 2 == 0 { 2 * i } else { 2 * i + 1 };
            assert_eq!(mixed.row(i), emb.matrix.row(expect));
        }
        assert!(matches!(emb.select(&all_positive(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn all_positive_values() {
        assert_eq!(all_positive(4).signs(), vec![1, 1, 1, 1]);
        assert_eq!(all_positive(1).signs(), vec![1]);
        assert_eq!(all_positive(4).to_string(), "++++");
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let e = enc();
        let pairs = default_label_pairs();
        let emb = build_aesemb(&pairs, &e).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aesemb.bin");
        save_aesemb(&emb, &path).unwrap();
        let back = load_aesemb(&path, &pairs, e.config().seed).unwrap();
        assert!(back.matrix.bit_eq(&emb.matrix));
        assert_eq!(back.fingerprint, emb.fingerprint);
        assert_eq!(back.pair_names, emb.pair_names);

        let mut changed = pairs.clone();
        changed[0].positive = "vivid color".into();
        assert!(matches!(
            load_aesemb(&path, &changed, e.config().seed),
            Err(Error::StaleCache { .. })
        ));
        assert!(matches!(
            load_aesemb(&path, &pairs, e.config().seed + 1),
            Err(Error::StaleCache { .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        for cut in [0, 3, 10, 24, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_aesemb_unchecked(&path), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn polarity_parse() {
        let a: AestheticAssignment = "+-".parse().unwrap();
        assert_eq!(a.polarity(), &[true, false]);
        assert!("+x".parse::<AestheticAssignment>().is_err());
        assert!("".parse::<AestheticAssignment>().is_err());
    }
}
