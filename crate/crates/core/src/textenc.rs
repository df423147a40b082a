//! Frozen toy text encoder: a closed vocabulary, an embedding table and two
//! bidirectional self-attention layers, all drawn from a fixed seed.
//!
//! The `[CLS]` output is read from the final layer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{Init, LinearVars};
use crate::numerics::{Rng, Tensor, Var};
use crate::params::{ParamStore, Tape};
use crate::synthdata::{ColorName, ShapeKind};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[EOS]", "[UNK]"];

/// Words used by the default aesthetic label texts.
const LABEL_WORDS: [&str; 8] = [
    "vibrant",
    "color",
    "natural",
    "lighting",
    "balanced",
    "composition",
    "sharp",
    "focus",
];

/// Rare-token identifier `[V<i>]`, 1-based.
pub fn rare_token(i: usize) -> String {
    format!("[V{i}]")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    rare_count: usize,
}

impl Vocabulary {
    /// Specials, `rare_count` rare identifiers, the caption grammar and the
    /// label words, in that order.
    pub fn standard(rare_count: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((1..=rare_count).map(rare_token));
        tokens.extend(ColorName::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(ShapeKind::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend(LABEL_WORDS.iter().map(|s| s.to_string()));
        Self::from_tokens(tokens, rare_count).expect("standard vocabulary is well formed")
    }

    fn from_tokens(tokens: Vec<String>, rare_count: usize) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return config_err(format!("duplicate vocabulary token {t}"));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if ids.get(*s) != Some(&(i as u32)) {
                return config_err(format!("special token {s} must have id {i}"));
            }
        }
        Ok(Self {
            tokens,
            ids,
            rare_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn rare_count(&self) -> usize {
        self.rare_count
    }

    pub fn is_rare(&self, token: &str) -> bool {
        (1..=self.rare_count).any(|i| rare_token(i) == token)
    }

    /// `token<TAB>id` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Format {
                what: "vocab.txt",
                detail: format!("line {} lacks a tab", lineno + 1),
            })?;
            let id: usize = id.trim().parse().map_err(|_| Error::Format {
                what: "vocab.txt",
                detail: format!("line {} has a bad id", lineno + 1),
            })?;
            if id != tokens.len() {
                return Err(Error::Format {
                    what: "vocab.txt",
                    detail: format!("ids must be dense and ordered (line {})", lineno + 1),
                });
            }
            tokens.push(tok.to_string());
        }
        let rare_count = (1..).take_while(|&i| tokens.contains(&rare_token(i))).count();
        Self::from_tokens(tokens, rare_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("vocabulary file {} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    /// Token length `C`.
    pub context_len: usize,
    /// Feature width `d`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub rare_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            context_len: 16,
            dim: 64,
            layers: 2,
            heads: 4,
            seed: 0x7e47_e4c0,
            rare_tokens: 16,
        }
    }
}

/// Encoder output: `tokens [C, d]` and the `[CLS]` row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    pub tokens: Tensor<f32>,
    pub cls: Tensor<f32>,
}

pub struct TextEncoder {
    config: TextConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
}

impl TextEncoder {
    pub fn new(config: TextConfig, vocab: Vocabulary) -> Result<Self> {
        if config.context_len < 2 || config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0 {
            return config_err(format!("invalid text encoder shape {config:?}"));
        }
        let mut params = ParamStore::new();
        let mut rng = Rng::new(config.seed);
        let d = config.dim;
        params.insert("embed", rng.normal_tensor(&[vocab.len(), d]))?;
        params.insert("pos", rng.normal_scaled(&[config.context_len, d], 0.5))?;
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        for l in 0..config.layers {
            let p = format!("layer.{l}");
            init.norm(&format!("{p}.ln1"), d)?;
            for proj in ["q", "k", "v", "o"] {
                init.linear(&format!("{p}.{proj}"), d, d, false, false)?;
            }
            init.norm(&format!("{p}.ln2"), d)?;
            init.linear(&format!("{p}.ff1"), d, 2 * d, true, false)?;
            init.linear(&format!("{p}.ff2"), 2 * d, d, true, false)?;
        }
        init.norm("final_ln", d)?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn standard(config: TextConfig) -> Result<Self> {
        let vocab = Vocabulary::standard(config.rare_tokens);
        Self::new(config, vocab)
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Whitespace tokenization framed as `[CLS] … [EOS] [PAD]…`, padded or
    /// truncated to the context length. Unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let c = self.config.context_len;
        let mut ids = vec![CLS];
        ids.extend(
            text.split_whitespace()
                .map(|w| self.vocab.id(w).unwrap_or(UNK))
                .take(c - 2),
        );
        ids.push(EOS);
        ids.resize(c, PAD);
        ids
    }

    /// Words of `text` that are not in the vocabulary.
    pub fn unknown_words<'t>(&self, text: &'t str) -> Vec<&'t str> {
        text.split_whitespace().filter(|w| self.vocab.id(w).is_none()).collect()
    }

    pub fn encode(&self, ids: &[u32]) -> Result<TokenEmbeddings> {
        let (c, d) = (self.config.context_len, self.config.dim);
        if ids.len() != c {
            return shape_err(format!("encode expects {c} ids, got {}", ids.len()));
        }
        let embed = self.params.require("embed")?;
        let pos = self.params.require("pos")?;
        let mut x0 = Vec::with_capacity(c * d);
        for (i, &id) in ids.iter().enumerate() {
            let row = embed.row(id.min(self.vocab.len() as u32 - 1) as usize);
            x0.extend(row.iter().zip(pos.row(i)).map(|(a, b)| a + b));
        }
        let mut tape = Tape::inference(&self.params);
        let mut x = tape.g.constant(Tensor::new(&[c, d], x0)?);
        for l in 0..self.config.layers {
            x = self.layer(&mut tape, x, l)?;
        }
        let gamma = tape.param("final_ln.gamma")?;
        let beta = tape.param("final_ln.beta")?;
        let y = tape.g.layer_norm(x, gamma, beta, 1e-5)?;
        let tokens = tape.value(y).clone();
        let cls = Tensor::new(&[d], tokens.row(0).to_vec())?;
        Ok(TokenEmbeddings { tokens, cls })
    }

    fn layer(&self, tape: &mut Tape<'_, f32>, x: Var, l: usize) -> Result<Var> {
        let p = format!("layer.{l}");
        let (g1, b1) = (tape.param(&format!("{p}.ln1.gamma"))?, tape.param(&format!("{p}.ln1.beta"))?);
        let h = tape.g.layer_norm(x, g1, b1, 1e-5)?;
        let q = LinearVars::resolve(tape, &format!("{p}.q"), None)?.forward(&mut tape.g, h)?;
        let k = LinearVars::resolve(tape, &format!("{p}.k"), None)?.forward(&mut tape.g, h)?;
        let v = LinearVars::resolve(tape, &format!("{p}.v"), None)?.forward(&mut tape.g, h)?;
        let probs = tape.g.attn_probs(q, k, self.config.heads)?;
        let a = tape.g.attn_apply(probs, v)?;
        let o = LinearVars::resolve(tape, &format!("{p}.o"), None)?.forward(&mut tape.g, a)?;
        let x = tape.g.add(x, o)?;
        let (g2, b2) = (tape.param(&format!("{p}.ln2.gamma"))?, tape.param(&format!("{p}.ln2.beta"))?);
        let h = tape.g.layer_norm(x, g2, b2, 1e-5)?;
        let f = LinearVars::resolve(tape, &format!("{p}.ff1"), None)?.forward(&mut tape.g, h)?;
        let f = tape.g.silu(f)?;
        let f = LinearVars::resolve(tape, &format!("{p}.ff2"), None)?.forward(&mut tape.g, f)?;
        tape.g.add(x, f)
    }

    pub fn encode_text(&self, text: &str) -> Result<TokenEmbeddings> {
        self.encode(&self.tokenize(text))
    }

    /// Final-layer `[CLS]` vector of a label text.
    pub fn cls_of(&self, label_text: &str) -> Result<Tensor<f32>> {
        if label_text.trim().is_empty() {
            return config_err("label text must be non-empty");
        }
        Ok(self.encode_text(label_text)?.cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::ContentSpec;

    fn enc() -> TextEncoder {
        TextEncoder::standard(TextConfig::default()).unwrap()
    }

    #[test]
    fn empty_prompt_layout() {
        let e = enc();
        let ids = e.tokenize("");
        assert_eq!(ids[..2], [CLS, EOS]);
        assert!(ids[2..].iter().all(|&i| i == PAD));
        assert_eq!(ids.len(), 16);
    }

    #[test]
    fn caption_layout() {
        let e = enc();
        let ids = e.tokenize("red circle");
        let v = e.vocab();
        assert_eq!(ids[..4], [CLS, v.id("red").unwrap(), v.id("circle").unwrap(), EOS]);
        assert!(ids[4..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn any_text_has_context_length() {
        let e = enc();
        let long = "red ".repeat(40);
        for t in ["", "x", "red circle", long.as_str(), "unknown words here"] {
            assert_eq!(e.tokenize(t).len(), 16);
        }
        assert_eq!(e.tokenize("zebra")[1], UNK);
    }

    #[test]
    fn encode_is_deterministic_and_context_sensitive() {
        let e = enc();
        let a = e.encode_text("red circle").unwrap();
        let b = e.encode_text("red circle").unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
        let c = e.encode_text("red square").unwrap();
        assert!(a.tokens.max_abs_diff(&c.tokens).unwrap() > 1e-3);
        // attention mixes context: the [CLS] row changes too
        assert!(a.cls.max_abs_diff(&c.cls).unwrap() > 1e-3);
        let empty = e.encode_text("").unwrap();
        assert!(empty.cls.max_abs_diff(&a.cls).unwrap() > 1e-3);
    }

    #[test]
    fn encode_rejects_wrong_length() {
        assert!(matches!(enc().encode(&[CLS, EOS]), Err(Error::Shape(_))));
    }

    #[test]
    fn rare_tokens_are_far_from_positive_labels() {
        let e = enc();
        let positives: Vec<_> = crate::aesemb::default_label_pairs()
            .iter()
            .map(|p| e.cls_of(&p.positive).unwrap())
            .collect();
        for i in 1..=16 {
            let r = e.cls_of(&rare_token(i)).unwrap();
            for p in &positives {
                let l2 = r.sub(p).unwrap().data().iter().map(|x| x * x).sum::<f32>().sqrt();
                assert!(l2 >= 1e-3);
            }
        }
    }

    #[test]
    fn cls_of_is_pure() {
        let e = enc();
        assert!(e.cls_of("vibrant color").unwrap().bit_eq(&e.cls_of("vibrant color").unwrap()));
        assert!(e.cls_of("   ").is_err());
    }

    #[test]
    fn captions_never_contain_rare_tokens() {
        let v = Vocabulary::standard(16);
        for spec in ContentSpec::all() {
            for w in spec.caption().split_whitespace() {
                assert!(!v.is_rare(w));
                assert!(v.id(w).is_some(), "{w} missing from vocabulary");
            }
        }
    }

    #[test]
    fn vocab_round_trips_through_text() {
        let v = Vocabulary::standard(16);
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::parse("[PAD]\t0\n[CLS]\t5\n").is_err());
    }
}
