use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`byte_tokenize`]; ids above 255 and invalid UTF-8 are
/// replaced lossily.
pub fn byte_detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    TextBytes,
    Induction,
    DomainTagged,
}

/// A position whose next-token prediction is checked: the logits at
/// `position` should put `answer` first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub position: usize,
    pub answer: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub label: Option<String>,
    pub tokens: Vec<u32>,
    pub queries: Vec<Query>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Self {
            kind: CorpusKind::TextBytes,
            docs: vec![Document {
                label: None,
                tokens: byte_tokenize(text),
                queries: Vec::new(),
            }],
        }
    }

    pub fn from_text_file(path: &Path) -> Result<Self> {
        Ok(Self::from_text(&fs::read_to_string(path)?))
    }

    /// One document per `(domain, text)` pair. Empty texts are skipped with
    /// a warning.
    pub fn from_domains<S: AsRef<str>>(domains: &[(S, String)]) -> Self {
        let docs = domains
            .iter()
            .filter_map(|(name, text)| {
                if text.is_empty() {
                    warn!("domain `{}` is empty; skipped", name.as_ref());
                    return None;
                }
                Some(Document {
                    label: Some(name.as_ref().to_string()),
                    tokens: byte_tokenize(text),
                    queries: Vec::new(),
                })
            })
            .collect();
        Self {
            kind: CorpusKind::DomainTagged,
            docs,
        }
    }

    /// Reads one file per domain; the domain name is the file stem.
    pub fn from_domain_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut named = Vec::with_capacity(paths.len());
        for p in paths {
            let p = p.as_ref();
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            named.push((name, fs::read_to_string(p)?));
        }
        Ok(Self::from_domains(&named))
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.len()).sum()
    }

    pub fn num_queries(&self) -> usize {
        self.docs.iter().map(|d| d.queries.len()).sum()
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in &self.docs {
            if let Some(l) = &d.label {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for d in &self.docs {
            if let Some(&t) = d.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Input(format!("corpus token {t} outside vocabulary of {vocab}")));
            }
        }
        Ok(())
    }

    /// Splits every document into consecutive chunks of at most `len`
    /// tokens (the last chunk may be shorter). Queries are carried over.
    pub fn chunked(&self, len: usize) -> Vec<Document> {
        let mut out = Vec::new();
        for d in &self.docs {
            for (i, c) in d.tokens.chunks(len.max(1)).enumerate() {
                let start = i * len;
                out.push(Document {
                    label: d.label.clone(),
                    tokens: c.to_vec(),
                    queries: d
                        .queries
                        .iter()
                        .filter(|q| q.position >= start && q.position < start + c.len())
                        .map(|q| Query {
                            position: q.position - start,
                            answer: q.answer,
                        })
                        .collect(),
                });
            }
        }
        out
    }

    /// Samples `batch` windows of exactly `len` tokens uniformly over
    /// documents long enough to hold one.
    pub fn sample_windows(&self, rng: &mut Rng, batch: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        let eligible: Vec<&Document> = self.docs.iter().filter(|d| d.tokens.len() >= len).collect();
        if eligible.is_empty() {
            return Err(Error::Input(format!("no document holds a window of {len} tokens")));
        }
        Ok((0..batch)
            .map(|_| {
                let d = eligible[rng.below(eligible.len())];
                let start = rng.below(d.tokens.len() - len + 1);
                d.tokens[start..start + len].to_vec()
            })
            .collect())
    }
}

/// Synthetic copy task. Each sequence holds a pattern of `pattern_len`
/// distinct tokens at `p1` and again at `p2 ≥ p1 + pattern_len`; filler
/// tokens never collide with the pattern. Every position `p2 + j` for
/// `j < pattern_len` is a query whose answer is the token that followed
/// `seq[p1 + j]`, which makes each query solvable only by copying.
pub fn make_induction_corpus(
    rng: &mut Rng,
    n_seqs: usize,
    seq_len: usize,
    vocab: usize,
    pattern_len: usize,
) -> Result<Corpus> {
    if pattern_len == 0 || seq_len < 2 * pattern_len {
        return Err(Error::Contract(format!(
            "seq_len {seq_len} must be at least twice pattern_len {pattern_len} (> 0)"
        )));
    }
    if vocab <= pattern_len {
        return Err(Error::Contract("vocabulary must exceed the pattern length".into()));
    }
    let mut docs = Vec::with_capacity(n_seqs);
    for _ in 0..n_seqs {
        let mut pool: Vec<u32> = (0..vocab as u32).collect();
        // partial Fisher-Yates: the first pattern_len entries become the pattern
        for i in 0..pattern_len {
            let j = i + rng.below(vocab - i);
            pool.swap(i, j);
        }
        let (pattern, filler) = pool.split_at(pattern_len);
        let mut seq: Vec<u32> = (0..seq_len).map(|_| filler[rng.below(filler.len())]).collect();
        let slack = seq_len - 2 * pattern_len;
        let p1 = rng.below(slack + 1);
        let p2 = p1 + pattern_len + rng.below(slack - p1 + 1);
        seq[p1..p1 + pattern_len].copy_from_slice(pattern);
        seq[p2..p2 + pattern_len].copy_from_slice(pattern);
        let mut queries = Vec::with_capacity(pattern_len);
        for j in 0..pattern_len {
            let answer = seq[p1 + j + 1];
            if p2 + j + 1 < seq_len {
                seq[p2 + j + 1] = answer;
            }
            queries.push(Query {
                position: p2 + j,
                answer,
            });
        }
        docs.push(Document {
            label: None,
            tokens: seq,
            queries,
        });
    }
    Ok(Corpus {
        kind: CorpusKind::Induction,
        docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trips() {
        assert_eq!(byte_tokenize("A"), vec![65]);
        assert_eq!(byte_detokenize(&[65]), "A");
        assert!(byte_tokenize("").is_empty());
        assert_eq!(byte_detokenize(&[]), "");
        let s = "naïve → 東京 🚀";
        assert_eq!(byte_detokenize(&byte_tokenize(s)), s);
        assert_eq!(byte_tokenize(s).len(), s.len());
    }

    #[test]
    fn single_token_pattern() {
        let mut rng = Rng::new(1);
        let c = make_induction_corpus(&mut rng, 50, 10, 20, 1).unwrap();
        for d in &c.docs {
            assert_eq!(d.queries.len(), 1);
            let q = d.queries[0];
            let x = d.tokens[q.position];
            let first = d.tokens.iter().position(|&t| t == x).unwrap();
            assert!(first < q.position);
            assert_eq!(d.tokens[first + 1], q.answer);
        }
    }

    #[test]
    fn answers_are_induction_copies() {
        let mut rng = Rng::new(2);
        let c = make_induction_corpus(&mut rng, 200, 48, 64, 12).unwrap();
        assert_eq!(c.num_queries(), 200 * 12);
        for d in &c.docs {
            assert_eq!(d.tokens.len(), 48);
            for q in &d.queries {
                let x = d.tokens[q.position];
                // the query token appears exactly once earlier, followed by the answer
                let earlier: Vec<usize> = (0..q.position).filter(|&i| d.tokens[i] == x).collect();
                assert_eq!(earlier.len(), 1, "{:?}", d.tokens);
                assert_eq!(d.tokens[earlier[0] + 1], q.answer);
                if q.position + 1 < d.tokens.len() {
                    assert_eq!(d.tokens[q.position + 1], q.answer);
                }
            }
        }
    }

    #[test]
    fn filler_is_roughly_uniform() {
        let mut rng = Rng::new(3);
        let vocab = 32;
        let c = make_induction_corpus(&mut rng, 10_000, 4, vocab, 1).unwrap();
        let mut counts = vec![0f64; vocab];
        let mut total = 0.0;
        for d in &c.docs {
            let pat = d.tokens[d.queries[0].position];
            for &t in &d.tokens {
                if t != pat {
                    counts[t as usize] += 1.0;
                    total += 1.0;
                }
            }
        }
        let expected = total / vocab as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // df = 31; 99.9th percentile is about 61
        assert!(chi2 < 61.1, "chi2 = {chi2}");
    }

    #[test]
    fn too_short_is_rejected() {
        let mut rng = Rng::new(4);
        assert!(matches!(make_induction_corpus(&mut rng, 1, 5, 20, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn windows_and_chunks() {
        let c = Corpus::from_text("abcdefghij");
        let mut rng = Rng::new(5);
        let w = c.sample_windows(&mut rng, 4, 3).unwrap();
        assert!(w.iter().all(|s| s.len() == 3 && s[1] == s[0] + 1));
        assert!(c.sample_windows(&mut rng, 1, 11).is_err());
        let chunks = c.chunked(4);
        assert_eq!(chunks.iter().map(|d| d.tokens.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let d = Corpus::from_domains(&[("code", "x".to_string()), ("math", String::new())]);
        assert_eq!(d.labels(), vec!["code".to_string()]);
    }
}
