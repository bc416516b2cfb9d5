use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::numcore::Tensor;

/// Longest question the model sees.
pub const MAX_TOKENS: usize = 14;

/// Lowercases, replaces everything but letters, digits and apostrophes with
/// spaces and splits on whitespace. No trimming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Word vectors keyed by token.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Embeddings {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        }
    }

    pub fn insert(&mut self, token: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            bail!(Data, "embedding for {:?} has width {}, table width {}", token, v.len(), self.dim);
        }
        if self.index.contains_key(token) {
            bail!(Data, "duplicate embedding for {:?}", token);
        }
        self.index.insert(token.to_owned(), self.tokens.len());
        self.tokens.push(token.to_owned());
        self.vectors.push(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// `token<TAB>v1 v2 ...` per line, in insertion order.
    pub fn write_tsv(&self, w: &mut impl Write) -> Result<()> {
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{t}\t{}", vals.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_tsv(&mut w)?;
        Ok(w.flush()?)
    }

    pub fn read_tsv(r: impl BufRead) -> Result<Self> {
        let mut table: Option<Embeddings> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (tok, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("embedding line {}: missing tab", i + 1)))?;
            let v = rest
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("embedding line {}: {e}", i + 1)))?;
            let t = table.get_or_insert_with(|| Embeddings::new(v.len()));
            t.insert(tok, v).map_err(|e| Error::Data(format!("embedding line {}: {e}", i + 1)))?;
        }
        table.ok_or_else(|| Error::Data("embedding table is empty".into()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_tsv(BufReader::new(File::open(path)?))
    }
}

/// Embedded question: `MAX_TOKENS` rows, padding rows zero and masked.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedQuestion {
    pub tokens: Vec<String>,
    pub embeddings: Tensor,
    pub mask: Vec<bool>,
}

impl EmbeddedQuestion {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Tokenises, keeps the first `MAX_TOKENS` tokens and looks each up.
/// Unknown tokens get a zero vector but stay valid.
pub fn tokenize_and_embed(text: &str, table: &Embeddings) -> Result<EmbeddedQuestion> {
    let mut tokens = tokenize(text);
    if tokens.is_empty() {
        bail!(Data, "question {:?} has no tokens", text);
    }
    tokens.truncate(MAX_TOKENS);
    let d = table.dim();
    let mut data = vec![0.0; MAX_TOKENS * d];
    for (i, t) in tokens.iter().enumerate() {
        if let Some(v) = table.get(t) {
            data[i * d..(i + 1) * d].copy_from_slice(v);
        }
    }
    let mask = (0..MAX_TOKENS).map(|i| i < tokens.len()).collect();
    Ok(EmbeddedQuestion {
        tokens,
        embeddings: Tensor::new(vec![MAX_TOKENS, d], data)?,
        mask,
    })
}
