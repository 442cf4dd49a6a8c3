//! Synthetic multi-domain token corpus.
//!
//! Stands in for a web-scale dataset at desk scale: the vocabulary is split
//! into per-domain ranges, each domain emits tokens from its range through a
//! learnable noisy-successor process, and one domain can be skewed to occur
//! more often than the rest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{
    expect_magic, read_u32, read_u64, write_magic, write_u16, write_u32, write_u64,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

const MAGIC: &[u8] = b"CORP";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub domains: usize,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub valid_sequences: usize,
    /// Frequency multiplier of domain 0 relative to every other domain.
    pub skew: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 || self.vocab_size < self.domains {
            return Err(Error::InvalidConfig(format!(
                "need at least one token per domain (vocab {}, domains {})",
                self.vocab_size, self.domains
            )));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} exceeds u16 tokens",
                self.vocab_size
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig("seq_len must be >= 2".into()));
        }
        if self.skew <= 0.0 || !self.skew.is_finite() {
            return Err(Error::InvalidConfig(format!("bad skew {}", self.skew)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub domains: usize,
    /// Flat train tokens, `train_len() * seq_len`.
    pub train: Vec<u16>,
    pub valid: Vec<u16>,
    /// Per-sequence source domain.
    pub train_domain: Vec<u16>,
    pub valid_domain: Vec<u16>,
}

impl Corpus {
    pub fn train_len(&self) -> usize {
        self.train_domain.len()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_domain.len()
    }

    pub fn train_seq(&self, i: usize) -> &[u16] {
        &self.train[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn valid_seq(&self, i: usize) -> &[u16] {
        &self.valid[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Token range owned by a domain.
    pub fn domain_range(vocab: usize, domains: usize, d: usize) -> std::ops::Range<usize> {
        let per = vocab / domains;
        let start = d * per;
        let end = if d + 1 == domains { vocab } else { start + per };
        start..end
    }

    /// Unigram token frequencies over the train split.
    pub fn token_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.vocab_size];
        for &t in &self.train {
            h[t as usize] += 1.0;
        }
        h
    }
}

/// Generates the corpus for a spec. Deterministic given the seed.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, "corpus"));

    // per-domain deterministic successor tables: a random permutation of the
    // domain's range makes the bigram structure learnable
    let successors: Vec<Vec<u16>> = (0..spec.domains)
        .map(|d| {
            let range = Corpus::domain_range(spec.vocab_size, spec.domains, d);
            let mut perm: Vec<u16> = range.clone().map(|t| t as u16).collect();
            for i in (1..perm.len()).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            perm
        })
        .collect();

    // domain weights: domain 0 is `skew` times more frequent
    let weights: Vec<f64> = (0..spec.domains)
        .map(|d| if d == 0 { spec.skew } else { 1.0 })
        .collect();
    let total_w: f64 = weights.iter().sum();

    let emit = |rng: &mut rand_chacha::ChaCha8Rng, n_seqs: usize| -> (Vec<u16>, Vec<u16>) {
        let mut tokens = Vec::with_capacity(n_seqs * spec.seq_len);
        let mut doms = Vec::with_capacity(n_seqs);
        for _ in 0..n_seqs {
            let mut pick = rng.random_range(0.0..total_w);
            let mut dom = spec.domains - 1;
            for (d, &w) in weights.iter().enumerate() {
                if pick < w {
                    dom = d;
                    break;
                }
                pick -= w;
            }
            doms.push(dom as u16);
            let range = Corpus::domain_range(spec.vocab_size, spec.domains, dom);
            let mut cur = rng.random_range(range.clone()) as u16;
            tokens.push(cur);
            for _ in 1..spec.seq_len {
                cur = if rng.random::<f64>() < 0.8 {
                    successors[dom][cur as usize - range.start]
                } else {
                    rng.random_range(range.clone()) as u16
                };
                tokens.push(cur);
            }
        }
        (tokens, doms)
    };

    let (train, train_domain) = emit(&mut rng, spec.train_sequences);
    let (valid, valid_domain) = emit(&mut rng, spec.valid_sequences);

    Ok(Corpus {
        vocab_size: spec.vocab_size,
        seq_len: spec.seq_len,
        domains: spec.domains,
        train,
        valid,
        train_domain,
        valid_domain,
    })
}

pub fn save(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, MAGIC, FORMAT_VERSION)?;
    write_u32(&mut w, corpus.vocab_size as u32)?;
    write_u32(&mut w, corpus.seq_len as u32)?;
    write_u32(&mut w, corpus.domains as u32)?;
    write_u64(&mut w, corpus.train_len() as u64)?;
    write_u64(&mut w, corpus.valid_len() as u64)?;
    for &d in corpus.train_domain.iter().chain(&corpus.valid_domain) {
        write_u16(&mut w, d)?;
    }
    for &t in corpus.train.iter().chain(&corpus.valid) {
        write_u16(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Corpus> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MAGIC, "corpus file")?;
    let vocab_size = read_u32(&mut r)? as usize;
    let seq_len = read_u32(&mut r)? as usize;
    let domains = read_u32(&mut r)? as usize;
    let n_train = read_u64(&mut r)? as usize;
    let n_valid = read_u64(&mut r)? as usize;
    if seq_len == 0 || seq_len > 1 << 20 || n_train > 1 << 28 || n_valid > 1 << 28 {
        return Err(Error::Format {
            what: "corpus file",
            detail: "implausible header".into(),
        });
    }
    let read_u16s = |r: &mut BufReader<File>, n: usize| -> Result<Vec<u16>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 2];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            out.push(u16::from_le_bytes(b));
        }
        Ok(out)
    };
    let train_domain = read_u16s(&mut r, n_train)?;
    let valid_domain = read_u16s(&mut r, n_valid)?;
    let train = read_u16s(&mut r, n_train * seq_len)?;
    let valid = read_u16s(&mut r, n_valid * seq_len)?;
    Ok(Corpus {
        vocab_size,
        seq_len,
        domains,
        train,
        valid,
        train_domain,
        valid_domain,
    })
}
