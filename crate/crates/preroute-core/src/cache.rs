//! Pre-dispatch routing cache: run the frozen grouter over a corpus once,
//! persist per-token expert indices and 16-bit scores in a compact
//! little-endian format, and replay them during training with O(1) random
//! access.
//!
//! Stored scores are the raw selected logits (bfloat16, round-to-nearest-
//! even); gating weights are re-derived from them at replay so one cache
//! serves both normalizers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::grouter::FrozenGrouter;
use crate::routing::{normalize_gates, top_k_indices, Normalizer, RoutingDecision};
use crate::train::RouteProvider;

const MAGIC: &[u8] = b"GRTC";
const VERSION: u16 = 1;

/// Upper half of the f32 encoding, round-to-nearest-even.
pub fn f32_to_bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let round = ((bits >> 16) & 1).wrapping_add(0x7FFF);
    (bits.wrapping_add(round) >> 16) as u16
}

pub fn bf16_bits_to_f64(b: u16) -> f64 {
    f32::from_bits((b as u32) << 16) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteCache {
    pub num_experts: u32,
    pub k: u8,
    pub index_width: u8,
    pub sequence_length: u32,
    pub token_count: u64,
    /// Token-major selected expert indices, `k` per token, ascending.
    pub indices: Vec<u16>,
    /// bfloat16 bit patterns of the raw selected logits, aligned with `indices`.
    pub scores: Vec<u16>,
}

impl RouteCache {
    pub fn sequences(&self) -> u64 {
        self.token_count / self.sequence_length as u64
    }

    /// Bytes a file with this header must occupy.
    pub fn file_size(&self) -> u64 {
        header_size() + self.token_count * self.k as u64 * (self.index_width as u64 + 2)
    }

    /// Replays one token's decision by offset arithmetic.
    pub fn decision(&self, token: u64, normalizer: Normalizer) -> Result<RoutingDecision> {
        if token >= self.token_count {
            return Err(Error::IndexOutOfRange {
                what: "cache token offset",
                index: token as usize,
                bound: self.token_count as usize,
            });
        }
        let k = self.k as usize;
        let base = token as usize * k;
        let experts = self.indices[base..base + k].to_vec();
        let logits: Vec<f64> = self.scores[base..base + k]
            .iter()
            .map(|&b| bf16_bits_to_f64(b))
            .collect();
        let weights = normalize_gates(&logits, normalizer);
        Ok(RoutingDecision { experts, weights })
    }

    /// All decisions of one stored sequence.
    pub fn sequence_decisions(
        &self,
        seq: u64,
        normalizer: Normalizer,
    ) -> Result<Vec<RoutingDecision>> {
        let len = self.sequence_length as u64;
        if seq >= self.sequences() {
            return Err(Error::IndexOutOfRange {
                what: "cache sequence",
                index: seq as usize,
                bound: self.sequences() as usize,
            });
        }
        (0..len)
            .map(|t| self.decision(seq * len + t, normalizer))
            .collect()
    }

    /// Raw per-token selected (expert, dequantized logit) pairs.
    pub fn token_entries(&self, token: u64) -> Result<Vec<(u16, f64)>> {
        if token >= self.token_count {
            return Err(Error::IndexOutOfRange {
                what: "cache token offset",
                index: token as usize,
                bound: self.token_count as usize,
            });
        }
        let k = self.k as usize;
        let base = token as usize * k;
        Ok((0..k)
            .map(|i| (self.indices[base + i], bf16_bits_to_f64(self.scores[base + i])))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.num_experts.to_le_bytes())?;
        w.write_all(&[self.k, self.index_width])?;
        w.write_all(&self.token_count.to_le_bytes())?;
        w.write_all(&self.sequence_length.to_le_bytes())?;
        for t in 0..self.token_count as usize {
            let k = self.k as usize;
            for i in 0..k {
                let e = self.indices[t * k + i];
                match self.index_width {
                    1 => w.write_all(&[e as u8])?,
                    _ => w.write_all(&e.to_le_bytes())?,
                }
            }
            for i in 0..k {
                w.write_all(&self.scores[t * k + i].to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Strict loader: any inconsistent header is rejected before the body is
    /// touched, and the file length must match the size formula exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let file_len = std::fs::metadata(path)?.len();
        let mut r = BufReader::new(File::open(path)?);
        let header = read_header(&mut r, file_len)?;
        let mut cache = header;
        let k = cache.k as usize;
        let n = cache.token_count as usize;
        cache.indices = Vec::with_capacity(n * k);
        cache.scores = Vec::with_capacity(n * k);
        let mut b1 = [0u8; 1];
        let mut b2 = [0u8; 2];
        for _ in 0..n {
            for _ in 0..k {
                let e = match cache.index_width {
                    1 => {
                        r.read_exact(&mut b1)?;
                        b1[0] as u16
                    }
                    _ => {
                        r.read_exact(&mut b2)?;
                        u16::from_le_bytes(b2)
                    }
                };
                if e as u32 >= cache.num_experts {
                    return Err(Error::Format {
                        what: "route cache",
                        detail: format!("expert index {e} >= E {}", cache.num_experts),
                    });
                }
                cache.indices.push(e);
            }
            for _ in 0..k {
                r.read_exact(&mut b2)?;
                cache.scores.push(u16::from_le_bytes(b2));
            }
        }
        Ok(cache)
    }
}

fn header_size() -> u64 {
    // magic + version + E + k + index_width + token_count + sequence_length
    4 + 2 + 4 + 1 + 1 + 8 + 4
}

fn read_header(r: &mut impl Read, file_len: u64) -> Result<RouteCache> {
    let bad = |detail: String| Error::Format {
        what: "route cache",
        detail,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:02x?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let num_experts = u32::from_le_bytes(b4);
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let k = b1[0];
    r.read_exact(&mut b1)?;
    let index_width = b1[0];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let token_count = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let sequence_length = u32::from_le_bytes(b4);

    if num_experts == 0 || num_experts > 65536 {
        return Err(bad(format!("bad expert count {num_experts}")));
    }
    if k == 0 || k as u32 > num_experts {
        return Err(bad(format!("bad k {k} for E {num_experts}")));
    }
    if index_width != 1 && index_width != 2 {
        return Err(bad(format!("bad index width {index_width}")));
    }
    if index_width == 1 && num_experts > 256 {
        return Err(bad(format!("index width 1 cannot address {num_experts} experts")));
    }
    if sequence_length == 0 && token_count != 0 {
        return Err(bad("zero sequence length with tokens".into()));
    }
    if sequence_length != 0 && token_count % sequence_length as u64 != 0 {
        return Err(bad(format!(
            "token count {token_count} not a multiple of sequence length {sequence_length}"
        )));
    }
    let expected = token_count
        .checked_mul(k as u64)
        .and_then(|x| x.checked_mul(index_width as u64 + 2))
        .and_then(|x| x.checked_add(header_size()))
        .ok_or_else(|| bad(format!("implausible token count {token_count}")))?;
    if file_len != expected {
        return Err(bad(format!(
            "file size {file_len} != {expected} required by header"
        )));
    }
    Ok(RouteCache {
        num_experts,
        k,
        index_width,
        sequence_length,
        token_count,
        indices: Vec::new(),
        scores: Vec::new(),
    })
}

/// Runs the frozen grouter over every corpus sequence (train split first,
/// then valid) on the model-visible window and records top-k indices plus
/// bfloat16 raw logits.
pub fn build_cache(fz: &FrozenGrouter, corpus: &Corpus) -> Result<RouteCache> {
    let e = fz.num_experts();
    if e > 65536 {
        return Err(Error::InvalidConfig(format!("E {e} exceeds 65536")));
    }
    let k = fz.k();
    let index_width: u8 = if e <= 256 { 1 } else { 2 };
    let len = corpus.seq_len - 1;
    let total_seqs = corpus.train_len() + corpus.valid_len();
    let mut cache = RouteCache {
        num_experts: e as u32,
        k: k as u8,
        index_width,
        sequence_length: len as u32,
        token_count: (total_seqs * len) as u64,
        indices: Vec::with_capacity(total_seqs * len * k),
        scores: Vec::with_capacity(total_seqs * len * k),
    };
    let mut push_seq = |tokens: &[u16]| -> Result<()> {
        let scores = fz.scores(tokens, 1)?;
        for t in 0..tokens.len() {
            let row = &scores[t * e..(t + 1) * e];
            for idx in top_k_indices(row, k) {
                cache.indices.push(idx as u16);
                cache.scores.push(f32_to_bf16_bits(row[idx] as f32));
            }
        }
        Ok(())
    };
    for i in 0..corpus.train_len() {
        push_seq(&corpus.train_seq(i)[..len])?;
    }
    for i in 0..corpus.valid_len() {
        push_seq(&corpus.valid_seq(i)[..len])?;
    }
    Ok(cache)
}

/// Replays cached decisions as a training route provider; sequences are
/// addressed by corpus order (train split, then valid).
pub struct CacheProvider {
    cache: RouteCache,
    normalizer: Normalizer,
}

impl CacheProvider {
    pub fn new(cache: RouteCache, normalizer: Normalizer) -> Self {
        Self { cache, normalizer }
    }

    pub fn cache(&self) -> &RouteCache {
        &self.cache
    }
}

impl RouteProvider for CacheProvider {
    fn decisions(
        &self,
        seq_indices: &[usize],
        _tokens: &[u16],
        len: usize,
    ) -> Result<Vec<RoutingDecision>> {
        if len != self.cache.sequence_length as usize {
            return Err(Error::ConfigMismatch(format!(
                "cache sequence length {} != requested {len}",
                self.cache.sequence_length
            )));
        }
        let mut out = Vec::with_capacity(seq_indices.len() * len);
        for &seq in seq_indices {
            out.extend(self.cache.sequence_decisions(seq as u64, self.normalizer)?);
        }
        Ok(out)
    }
}
