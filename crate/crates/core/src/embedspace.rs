//! Shared image/text latent space: encoders, cosine geometry, the affine
//! projector into token-embedding space, and vocabulary lookup.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::{Add, Sub};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, parse_err, Result};
use crate::image::Image;

/// Latent dimension of the toy encoders.
pub const TOY_DIM: usize = 64;

/// Side of the grayscale thumbnail the toy image encoder reads.
pub const THUMB_SIDE: usize = 16;

/// Feature length before projection (thumbnail pixels / hash bins).
pub const FEATURE_LEN: usize = THUMB_SIDE * THUMB_SIDE;

/// Largest embedding dimension accepted from files.
const MAX_FILE_DIM: usize = 1 << 16;

/// Finite vector of dimension ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid("embedding dimension must be at least 2"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    /// Unit-length copy; fails on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(invalid("cannot normalize a zero vector"));
        }
        Ok(self.scaled(1.0 / n))
    }

    fn same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(invalid(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

impl Add for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn add(self, rhs: Self) -> EmbeddingVector {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
        EmbeddingVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn sub(self, rhs: Self) -> EmbeddingVector {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
        EmbeddingVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    a.same_dim(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine of a zero vector"));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Frozen image and text encoders sharing one latent space.
pub trait DualEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_image(&self, image: &Image) -> Result<EmbeddingVector>;
    fn encode_text(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Alignment between an image and a prompt in the encoder's latent space.
pub fn semantic_verification(image: &Image, prompt: &str, enc: &dyn DualEncoder) -> Result<f64> {
    cosine(&enc.encode_image(image)?, &enc.encode_text(prompt)?)
}

/// Deterministic stand-in for a pretrained dual encoder.
///
/// Images become a 16×16 area-averaged grayscale thumbnail; text becomes a
/// hashed bag of words over 256 bins. Both feature vectors go through the same
/// seeded Gaussian projection and are L2-normalized.
#[derive(Debug, Clone)]
pub struct ToyDualEncoder {
    dim: usize,
    /// Row-major `dim × FEATURE_LEN`.
    projection: Vec<f64>,
}

impl ToyDualEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(invalid("encoder dimension must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * FEATURE_LEN)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { dim, projection })
    }

    fn embed_features(&self, features: &[f64]) -> Result<EmbeddingVector> {
        let values = self
            .projection
            .chunks_exact(FEATURE_LEN)
            .map(|row| row.iter().zip(features).map(|(w, f)| w * f).sum())
            .collect();
        EmbeddingVector::new(values)?.normalized()
    }
}

impl Default for ToyDualEncoder {
    fn default() -> Self {
        Self::new(0x5eed, TOY_DIM).expect("valid default dimension")
    }
}

impl DualEncoder for ToyDualEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, image: &Image) -> Result<EmbeddingVector> {
        self.embed_features(&thumbnail(image))
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        let bag = bag_of_words(text);
        if bag.iter().all(|&v| v == 0.0) {
            return Err(invalid("prompt contains no words"));
        }
        self.embed_features(&bag)
    }
}

/// Area-averaged 16×16 grayscale thumbnail, row-major.
pub fn thumbnail(image: &Image) -> Vec<f64> {
    let gray = image.gray_plane();
    let (h, w) = (image.height(), image.width());
    let span = |i: usize, len: usize| {
        let lo = i * len / THUMB_SIDE;
        let hi = ((i + 1) * len / THUMB_SIDE).max(lo + 1).min(len);
        lo..hi
    };
    let mut out = Vec::with_capacity(FEATURE_LEN);
    for ty in 0..THUMB_SIDE {
        let ys = span(ty, h);
        for tx in 0..THUMB_SIDE {
            let xs = span(tx, w);
            let mut s = 0.0;
            for y in ys.clone() {
                s += gray[y * w + xs.start..y * w + xs.end].iter().sum::<f64>();
            }
            out.push(s / (ys.len() * xs.len()) as f64);
        }
    }
    out
}

/// Lower-cased alphanumeric words hashed (FNV-1a, 64-bit) into 256 count bins.
pub fn bag_of_words(text: &str) -> Vec<f64> {
    let mut bins = vec![0.0; FEATURE_LEN];
    for word in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        bins[word_bin(word)] += 1.0;
    }
    bins
}

/// Hash bin of one word (case-insensitive).
pub fn word_bin(word: &str) -> usize {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in word.to_lowercase().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    (h % FEATURE_LEN as u64) as usize
}

/// Affine map `W·e + b` from encoder space into token-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    d_out: usize,
    d_in: usize,
    /// Row-major `d_out × d_in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Projector {
    pub fn new(d_out: usize, d_in: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if d_out < 2 || d_in < 2 {
            return Err(invalid("projector dimensions must be at least 2"));
        }
        if w.len() != d_out * d_in || b.len() != d_out {
            return Err(invalid("projector weights do not match dimensions"));
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(invalid("projector has non-finite entries"));
        }
        Ok(Self { d_out, d_in, w, b })
    }

    pub fn identity(d: usize) -> Result<Self> {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Self::new(d, d, w, vec![0.0; d])
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    /// Text form: `d_out d_in`, then `d_out` rows of W, then one row of b.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.d_out, self.d_in);
        for row in self.w.chunks(self.d_in).chain(std::iter::once(&self.b[..])) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_projector(&std::fs::read_to_string(path)?)
    }
}

/// `W·e + b`.
pub fn project(e: &EmbeddingVector, p: &Projector) -> Result<EmbeddingVector> {
    if e.dim() != p.d_in {
        return Err(invalid(format!(
            "projector expects dimension {}, got {}",
            p.d_in,
            e.dim()
        )));
    }
    let values =
        p.w.chunks_exact(p.d_in)
            .zip(&p.b)
            .map(|(row, bias)| row.iter().zip(e.values()).map(|(w, x)| w * x).sum::<f64>() + bias)
            .collect();
    EmbeddingVector::new(values)
}

fn parse_floats(line: &str, line_no: usize, sep: impl Fn(char) -> bool) -> Result<Vec<f64>> {
    line.split(sep)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad number {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line_no, format!("non-finite value {t:?}")))
            }
        })
        .collect()
}

pub fn parse_projector(text: &str) -> Result<Projector> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty projector file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(hl, format!("bad dimension {t:?}")))
        })
        .collect::<Result<_>>()?;
    let [d_out, d_in] = dims[..] else {
        return Err(parse_err(hl, "header must be `d_out d_in`"));
    };
    if !(2..=MAX_FILE_DIM).contains(&d_out) || !(2..=MAX_FILE_DIM).contains(&d_in) {
        return Err(parse_err(hl, "projector dimensions out of range"));
    }
    let mut w = Vec::new();
    for _ in 0..d_out {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("expected {d_out} weight rows")))?;
        let row = parse_floats(line, ln, char::is_whitespace)?;
        if row.len() != d_in {
            return Err(parse_err(
                ln,
                format!("expected {d_in} weights, found {}", row.len()),
            ));
        }
        w.extend(row);
    }
    let (ln, line) = lines
        .next()
        .ok_or_else(|| parse_err(0, "missing bias row"))?;
    let b = parse_floats(line, ln, char::is_whitespace)?;
    if b.len() != d_out {
        return Err(parse_err(
            ln,
            format!("expected {d_out} biases, found {}", b.len()),
        ));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln, "trailing content after bias row"));
    }
    Projector::new(d_out, d_in, w, b).map_err(|e| parse_err(0, e.to_string()))
}

/// Token strings with their embeddings.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    embeddings: Vec<EmbeddingVector>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub token: String,
    pub similarity: f64,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, embeddings: Vec<EmbeddingVector>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(invalid("vocabulary is empty"));
        }
        if tokens.len() != embeddings.len() {
            return Err(invalid("token and embedding counts differ"));
        }
        let dim = embeddings[0].dim();
        let mut seen = HashSet::new();
        for (t, e) in tokens.iter().zip(&embeddings) {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(invalid(format!(
                    "token {t:?} is empty or contains whitespace"
                )));
            }
            if !seen.insert(t.as_str()) {
                return Err(invalid(format!("duplicate token {t:?}")));
            }
            if e.dim() != dim {
                return Err(invalid(format!(
                    "token {t:?} has dimension {}, expected {dim}",
                    e.dim()
                )));
            }
            if e.norm() == 0.0 {
                return Err(invalid(format!("token {t:?} has a zero embedding")));
            }
        }
        let norms = embeddings.iter().map(EmbeddingVector::norm).collect();
        Ok(Self {
            tokens,
            embeddings,
            norms,
        })
    }

    /// `size` pronounceable tokens with seeded random unit embeddings.
    pub fn synthetic(size: usize, dim: usize, seed: u64) -> Result<Self> {
        const SYLLABLES: [&str; 24] = [
            "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "ze", "po", "da", "fu", "gi", "ho",
            "ja", "ku", "le", "mo", "ni", "pe", "ri", "so", "ta", "wu",
        ];
        if size > SYLLABLES.len().pow(3) {
            return Err(invalid("synthetic vocabulary too large"));
        }
        let n = SYLLABLES.len();
        let tokens = (0..size)
            .map(|i| {
                format!(
                    "{}{}{}",
                    SYLLABLES[i / (n * n)],
                    SYLLABLES[(i / n) % n],
                    SYLLABLES[i % n]
                )
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..size)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                EmbeddingVector::new(v)?.normalized()
            })
            .collect::<Result<_>>()?;
        Self::new(tokens, embeddings)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &[EmbeddingVector] {
        &self.embeddings
    }

    /// One `token<TAB>v1,v2,...` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, e) in self.tokens.iter().zip(&self.embeddings) {
            let vals: Vec<String> = e.values().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{t}\t{}", vals.join(","));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_vocabulary(&std::fs::read_to_string(path)?)
    }
}

pub fn parse_vocabulary(text: &str) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    let mut embeddings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (token, vals) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(ln, "expected `token<TAB>values`"))?;
        let vals = parse_floats(vals, ln, |c| c == ',')?;
        if vals.len() > MAX_FILE_DIM {
            return Err(parse_err(ln, "embedding too long"));
        }
        if let Some(first) = embeddings.first() {
            let first: &EmbeddingVector = first;
            if first.dim() != vals.len() {
                return Err(parse_err(
                    ln,
                    format!("expected {} values, found {}", first.dim(), vals.len()),
                ));
            }
        }
        tokens.push(token.to_string());
        embeddings.push(EmbeddingVector::new(vals).map_err(|e| parse_err(ln, e.to_string()))?);
    }
    Vocabulary::new(tokens, embeddings).map_err(|e| parse_err(0, e.to_string()))
}

/// The `k` tokens most cosine-similar to `e`, best first; ties go to the
/// lower token index.
pub fn nn_search(e: &EmbeddingVector, vocab: &Vocabulary, k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 || k > vocab.len() {
        return Err(invalid(format!("k = {k} must lie in 1..={}", vocab.len())));
    }
    if e.dim() != vocab.dim() {
        return Err(invalid(format!(
            "query dimension {} does not match vocabulary dimension {}",
            e.dim(),
            vocab.dim()
        )));
    }
    let qn = e.norm();
    if qn == 0.0 {
        return Err(invalid("nearest-neighbour query is the zero vector"));
    }
    let mut scored: Vec<(usize, f64)> = vocab
        .embeddings
        .iter()
        .zip(&vocab.norms)
        .enumerate()
        .map(|(i, (v, n))| (i, (e.dot(v) / (qn * n)).clamp(-1.0, 1.0)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(index, similarity)| Neighbor {
            index,
            token: vocab.tokens[index].clone(),
            similarity,
        })
        .collect())
}
