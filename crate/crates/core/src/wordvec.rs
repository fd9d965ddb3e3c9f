//! Word vectors in the word2vec text and binary formats.
//!
//! Text: a header line `vocab_count dimension`, then one line per word,
//! `word v1 ... vd`, space separated.
//!
//! Binary: the same ASCII header terminated by `\n`; each record is the word
//! bytes terminated by a single space, `d` little-endian `f32` values, and an
//! optional `\n`.
//!
//! Values are widened to `f64` on load. Both parsers accept a word filter so
//! that large pretrained files can be reduced to the vocabulary actually
//! needed without holding every vector in memory.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
    lower: HashMap<String, usize>,
}

/// What to do when a name has no known token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OovPolicy {
    #[default]
    Error,
    /// Substitute the zero vector and log the word.
    Zero,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            words: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            lower: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("component {bad} of '{word}'")));
        }
        if self.index.contains_key(word) {
            return Err(Error::invalid(format!("duplicate word '{word}'")));
        }
        let id = self.words.len();
        self.index.insert(word.to_string(), id);
        self.lower.entry(word.to_lowercase()).or_insert(id);
        self.words.push(word.to_string());
        self.vectors.extend(vector);
        Ok(())
    }

    /// Vector of a single token, exact match only.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.row(i))
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn token(&self, token: &str) -> Option<&[f64]> {
        self.get(token)
            .or_else(|| self.lower.get(&token.to_lowercase()).map(|&i| self.row(i)))
    }

    /// Resolves a category or predicate name. Multi-word names ("traffic
    /// light") average the vectors of the tokens that are found. Each token
    /// is tried exactly, then case-insensitively.
    pub fn lookup(&self, name: &str) -> Result<Vec<f64>> {
        let tokens: Vec<&str> = name.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::invalid("empty name"));
        }
        let mut sum = vec![0.0; self.dim];
        let mut found = 0usize;
        for t in tokens {
            if let Some(v) = self.token(t) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                found += 1;
            }
        }
        if found == 0 {
            return Err(Error::OutOfVocabulary(name.trim().to_string()));
        }
        let k = found as f64;
        sum.iter_mut().for_each(|s| *s /= k);
        Ok(sum)
    }

    pub fn lookup_with(&self, name: &str, policy: OovPolicy) -> Result<Vec<f64>> {
        match (self.lookup(name), policy) {
            (Err(Error::OutOfVocabulary(w)), OovPolicy::Zero) => {
                log::warn!("'{w}' not in vocabulary, using the zero vector");
                Ok(vec![0.0; self.dim])
            }
            (r, _) => r,
        }
    }

    /// `name -> vector` map for a set of names, e.g. both dictionaries.
    pub fn cache<'a>(
        &self,
        names: impl IntoIterator<Item = &'a str>,
        policy: OovPolicy,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        names
            .into_iter()
            .map(|n| Ok((n.to_string(), self.lookup_with(n, policy)?)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in self.row(i) {
                // `{:?}` prints the shortest representation that round-trips.
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Binary encoding; values are narrowed to `f32`.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = format!("{} {}\n", self.len(), self.dim).into_bytes();
        for (i, w) in self.words.iter().enumerate() {
            out.extend_from_slice(w.as_bytes());
            out.push(b' ');
            for v in self.row(i) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.push(b'\n');
        }
        out
    }
}

fn parse_header(line: &str, what: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace();
    let parse = |t: Option<&str>| t.and_then(|t| t.parse::<usize>().ok());
    match (parse(it.next()), parse(it.next()), it.next()) {
        (Some(n), Some(d), None) if d > 0 => Ok((n, d)),
        _ => Err(Error::Parse(format!("{what}: bad header '{}'", line.trim_end()))),
    }
}

pub fn parse_text<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    parse_text_filtered(reader, |_| true)
}

pub fn parse_text_filtered<R: BufRead>(reader: R, keep: impl Fn(&str) -> bool) -> Result<EmbeddingTable> {
    let mut lines = reader.lines();
    let io_err = |e: std::io::Error, line: usize| Error::Parse(format!("line {line}: {e}"));
    let header = match lines.next() {
        Some(l) => l.map_err(|e| io_err(e, 1))?,
        None => return Err(Error::Parse("line 1: missing header".into())),
    };
    let (count, dim) = parse_header(&header, "line 1")?;
    let mut table = EmbeddingTable::new(dim);
    let mut seen = std::collections::HashSet::new();
    let mut records = 0usize;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| io_err(e, lineno))?;
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        if records > count {
            return Err(Error::Parse(format!("line {lineno}: more than the {count} declared words")));
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap();
        let fields: Vec<&str> = parts.collect();
        if fields.len() != dim {
            return Err(Error::Parse(format!(
                "line {lineno}: dimension mismatch for '{word}': expected {dim} values, got {}",
                fields.len()
            )));
        }
        if !seen.insert(word.to_string()) {
            return Err(Error::Parse(format!("line {lineno}: duplicate word '{word}'")));
        }
        if !keep(word) {
            continue;
        }
        let values = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: bad component '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        table
            .insert(word, values)
            .map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
    }
    if records != count {
        return Err(Error::Parse(format!("header declares {count} words, found {records}")));
    }
    Ok(table)
}

/// Byte reader that tracks the absolute offset for diagnostics.
struct Counting<R> {
    inner: R,
    offset: usize,
}

impl<R: BufRead> Counting<R> {
    fn byte(&mut self) -> Result<Option<u8>> {
        let buf = self
            .inner
            .fill_buf()
            .map_err(|e| Error::Parse(format!("byte offset {}: {e}", self.offset)))?;
        let b = buf.first().copied();
        if b.is_some() {
            self.inner.consume(1);
            self.offset += 1;
        }
        Ok(b)
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        self.inner.read_exact(buf).map_err(|_| {
            Error::Parse(format!("truncated {what} at byte offset {start}: need {} bytes", buf.len()))
        })?;
        self.offset += buf.len();
        Ok(())
    }
}

pub fn parse_binary<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    parse_binary_filtered(reader, |_| true)
}

pub fn parse_binary_filtered<R: BufRead>(reader: R, keep: impl Fn(&str) -> bool) -> Result<EmbeddingTable> {
    let mut r = Counting { inner: reader, offset: 0 };
    let mut header = Vec::new();
    loop {
        match r.byte()? {
            Some(b'\n') => break,
            Some(b) if header.len() < 64 => header.push(b),
            _ => return Err(Error::Parse("byte offset 0: missing or malformed header".into())),
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::Parse("byte offset 0: header is not ASCII".into()))?;
    let (count, dim) = parse_header(&header, "byte offset 0")?;
    let mut table = EmbeddingTable::new(dim);
    let mut seen = std::collections::HashSet::new();
    let mut raw = vec![0u8; dim * 4];
    for _ in 0..count {
        let start = r.offset;
        let mut word = Vec::new();
        loop {
            match r.byte()? {
                Some(b' ') => break,
                // The newline that may end the previous record.
                Some(b'\n') if word.is_empty() => continue,
                Some(b) => word.push(b),
                None => {
                    return Err(Error::Parse(format!("truncated record at byte offset {start}")))
                }
            }
        }
        let word = String::from_utf8(word)
            .map_err(|_| Error::Parse(format!("byte offset {start}: word is not UTF-8")))?;
        r.exact(&mut raw, &format!("vector of '{word}'"))?;
        if !seen.insert(word.clone()) {
            return Err(Error::Parse(format!("byte offset {start}: duplicate word '{word}'")));
        }
        if !keep(&word) {
            continue;
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        table
            .insert(&word, values)
            .map_err(|e| Error::Parse(format!("byte offset {start}: {e}")))?;
    }
    Ok(table)
}

/// Opens either format: binary for a `.bin` extension, text otherwise.
pub fn load_file(path: &Path, keep: impl Fn(&str) -> bool) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let result = if ext.eq_ignore_ascii_case("bin") {
        parse_binary_filtered(reader, keep)
    } else {
        parse_text_filtered(reader, keep)
    };
    result.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn concat_pair(subject: &[f64], object: &[f64]) -> Result<Vec<f64>> {
    if subject.len() != object.len() {
        return Err(Error::DimensionMismatch {
            expected: subject.len(),
            actual: object.len(),
        });
    }
    Ok(subject.iter().chain(object).copied().collect())
}

pub fn cache_to_json(cache: &BTreeMap<String, Vec<f64>>) -> String {
    serde_json::to_string_pretty(cache).expect("vectors serialize")
}
