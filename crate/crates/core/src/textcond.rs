//! Synthetic-language tokenizers, frozen text encoders, and the per-token
//! adapter MLPs that lift encoder output to the backbone width.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention, linear, mlp, sinusoid};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::synthdata::{Color, Motif, Position, ShapeKind, Size, FILLERS_A, FILLERS_B, FUNCTION_A, FUNCTION_B};

/// Primary (`A`) and secondary (`B`) synthetic languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Language {
    A,
    B,
}

impl Language {
    pub fn tag(self) -> char {
        match self {
            Language::A => 'A',
            Language::B => 'B',
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Language::A => "a",
            Language::B => "b",
        }
    }
}

pub const MAX_CAPTION_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    terminals: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_terminals(terminals: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in terminals.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("bad terminal {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate terminal {t:?}")));
            }
        }
        Ok(Self { terminals, index })
    }

    /// Built-in vocabulary; index order is the order listed here.
    pub fn builtin(lang: Language) -> &'static Vocabulary {
        static A: OnceLock<Vocabulary> = OnceLock::new();
        static B: OnceLock<Vocabulary> = OnceLock::new();
        let cell = match lang {
            Language::A => &A,
            Language::B => &B,
        };
        cell.get_or_init(|| {
            let mut t: Vec<&str> = Vec::new();
            t.extend(ShapeKind::ALL.iter().map(|v| v.word(lang)));
            t.extend(Color::ALL.iter().map(|v| v.word(lang)));
            t.extend(Position::ALL.iter().map(|v| v.word(lang)));
            t.extend(Size::ALL.iter().map(|v| v.word(lang)));
            match lang {
                Language::A => {
                    t.extend(FUNCTION_A);
                    t.extend(FILLERS_A);
                }
                Language::B => {
                    t.extend(FUNCTION_B);
                    t.extend(FILLERS_B);
                    t.extend(Motif::ALL.iter().map(|m| m.word()));
                }
            }
            Vocabulary::from_terminals(t.into_iter().map(String::from).collect()).expect("builtin vocabulary")
        })
    }

    /// Plain text, one terminal per line.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_terminals(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.terminals.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.terminals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminals.is_empty()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.index.contains_key(w)
    }

    pub fn id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn terminal(&self, id: usize) -> &str {
        &self.terminals[id]
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }
}

/// Tokenized caption.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub language: Language,
    pub tokens: Vec<usize>,
}

impl Caption {
    /// The zero-token caption; valid only in language A.
    pub fn empty() -> Self {
        Caption {
            language: Language::A,
            tokens: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(text: &str, language: Language) -> Result<Caption> {
    let vocab = Vocabulary::builtin(language);
    let tokens = text
        .split_whitespace()
        .map(|w| {
            vocab.id(w).ok_or_else(|| Error::Lexical {
                terminal: w.to_string(),
                language: language.tag(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.is_empty() && language == Language::B {
        return Err(Error::Parse("the empty caption is only valid in language A".into()));
    }
    if tokens.len() > MAX_CAPTION_LEN {
        return Err(Error::Parse(format!("{} tokens exceeds the limit of {MAX_CAPTION_LEN}", tokens.len())));
    }
    Ok(Caption { language, tokens })
}

pub fn detokenize(caption: &Caption) -> String {
    let vocab = Vocabulary::builtin(caption.language);
    caption.tokens.iter().map(|&t| vocab.terminal(t)).collect::<Vec<_>>().join(" ")
}

/// Token sequence at some width, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub language: Language,
    pub tokens: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn new(language: Language, tokens: Tensor<T>) -> Self {
        let n = tokens.shape()[0];
        Self {
            language,
            tokens,
            mask: vec![true; n],
        }
    }

    pub fn empty(language: Language, dim: usize) -> Self {
        Self::new(language, Tensor::zeros(&[0, dim]))
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Text-side widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDims {
    pub d_enc: usize,
    pub d_model: usize,
    pub enc_heads: usize,
}

pub fn encoder_prefix(lang: Language) -> String {
    format!("enc_{}", lang.prefix())
}

pub fn adapter_prefix(lang: Language) -> String {
    format!("adapter_{}", lang.prefix())
}

/// Registers the frozen encoder and the adapter for one language.
pub fn init_text_params<T: Scalar>(store: &mut ParamStore<T>, lang: Language, dims: TextDims, seed: u64) {
    let e = encoder_prefix(lang);
    let v = Vocabulary::builtin(lang).len();
    let d = dims.d_enc;
    let s = 1.0 / (d as f64).sqrt();
    store.init(seed, &format!("{e}.embed"), &[v, d], Init::Normal(1.0));
    for n in ["q", "k", "v", "o"] {
        store.init(seed, &format!("{e}.attn_{n}.w"), &[d, d], Init::Normal(s));
    }
    let a = adapter_prefix(lang);
    store.init(seed, &format!("{a}.fc1.w"), &[d, dims.d_model], Init::Normal(s));
    store.init(seed, &format!("{a}.fc1.b"), &[dims.d_model], Init::Zeros);
    let s2 = 1.0 / (dims.d_model as f64).sqrt();
    store.init(seed, &format!("{a}.fc2.w"), &[dims.d_model, dims.d_model], Init::Normal(s2));
    store.init(seed, &format!("{a}.fc2.b"), &[dims.d_model], Init::Zeros);
}

/// Frozen encoder: embedding lookup, sinusoidal positions, and one
/// pre-norm self-attention layer with a residual connection.
pub fn encode<T: Scalar>(store: &ParamStore<T>, dims: TextDims, caption: &Caption) -> Result<TextEmbedding<T>> {
    let lang = caption.language;
    let d = dims.d_enc;
    let l = caption.tokens.len();
    if l == 0 {
        return Ok(TextEmbedding::empty(lang, d));
    }
    let e = encoder_prefix(lang);
    let table = store.get(&format!("{e}.embed"))?;
    let positions: Vec<f64> = (0..l).map(|p| p as f64).collect();
    let pos = sinusoid::<T>(&positions, d);
    let mut x = vec![T::zero(); l * d];
    for (i, &tok) in caption.tokens.iter().enumerate() {
        for j in 0..d {
            x[i * d + j] = table.row(tok)[j] + pos.data()[i * d + j];
        }
    }
    let mut tape = Tape::new();
    let frozen = store.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::new(&[l, d], x)?);
    let h = tape.layer_norm(x, None, None)?;
    let q = linear(&mut tape, &frozen, h, &format!("{e}.attn_q"))?;
    let k = linear(&mut tape, &frozen, h, &format!("{e}.attn_k"))?;
    let v = linear(&mut tape, &frozen, h, &format!("{e}.attn_v"))?;
    let a = attention(&mut tape, q, k, v, dims.enc_heads)?;
    let a = linear(&mut tape, &frozen, a, &format!("{e}.attn_o"))?;
    let out = tape.add(x, a)?;
    Ok(TextEmbedding::new(lang, tape.value(out).clone()))
}

/// Per-token adapter MLP on the tape. The input is a constant (encoders
/// are frozen); the output carries gradient iff the adapter is trainable.
pub fn adapt_on_tape<T: Scalar>(tape: &mut Tape<T>, p: &Bound, e: &TextEmbedding<T>) -> Result<Var> {
    let x = tape.constant(e.tokens.clone());
    if e.tokens.shape()[0] == 0 {
        let d = tape.shape(p.get(&format!("{}.fc2.w", adapter_prefix(e.language)))?)[1];
        return Ok(tape.constant(Tensor::zeros(&[0, d])));
    }
    mlp(tape, p, x, &adapter_prefix(e.language))
}

/// Eager adapter evaluation (no gradient).
pub fn adapt<T: Scalar>(store: &ParamStore<T>, e: &TextEmbedding<T>) -> Result<TextEmbedding<T>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let v = adapt_on_tape(&mut tape, &p, e)?;
    Ok(TextEmbedding::new(e.language, tape.value(v).clone()))
}
