use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

use super::vocab::Vocabulary;

/// Reads a UTF-8 text file, or every regular file below a directory (sorted by path,
/// joined with newlines).
pub fn read_corpus_text(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("corpus directory {} is empty", path.display())));
        }
        let parts = files
            .iter()
            .map(std::fs::read_to_string)
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(parts.join("\n"))
    } else {
        Ok(std::fs::read_to_string(path)?)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.is_file() {
            out.push(p);
        }
    }
    Ok(())
}

/// Tokenized corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            tokens: vocab.encode(text)?,
        })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Self::from_text(&read_corpus_text(path)?, vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits off the trailing `fraction` of tokens as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction.clamp(0.0, 1.0)) * self.tokens.len() as f64).round() as usize;
        (
            Corpus {
                tokens: self.tokens[..cut].to_vec(),
            },
            Corpus {
                tokens: self.tokens[cut..].to_vec(),
            },
        )
    }

    /// `batch_size` windows of `window` consecutive tokens at uniformly random offsets.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize, window: usize) -> Result<Vec<Vec<usize>>> {
        if self.tokens.len() < window {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than a training window of {window}",
                self.tokens.len()
            )));
        }
        let max_start = self.tokens.len() - window;
        Ok((0..batch_size)
            .map(|_| {
                let s = rng.random_range(0..=max_start);
                self.tokens[s..s + window].to_vec()
            })
            .collect())
    }
}

/// Entropy (nats) of the empirical unigram distribution of `tokens`.
pub fn unigram_entropy(tokens: &[usize]) -> f64 {
    let mut counts = std::collections::HashMap::<usize, u64>::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Text from a small regular grammar: sentences of the form
/// `NP verb NP [prep NP] end` with number agreement between subject and verb.
pub fn synthetic_grammar_corpus<R: Rng + ?Sized>(rng: &mut R, n_bytes: usize) -> String {
    const DET_SG: &[&str] = &["the", "a", "every", "this", "that"];
    const DET_PL: &[&str] = &["the", "some", "many", "these", "few"];
    const ADJ: &[&str] = &[
        "red", "small", "quiet", "happy", "old", "bright", "green", "tall", "lazy", "brave",
    ];
    const NOUN: &[&str] = &[
        "cat", "dog", "bird", "river", "garden", "robot", "child", "tree", "farmer", "stone", "window", "teacher",
    ];
    const VERB: &[&str] = &[
        "see", "like", "follow", "find", "watch", "help", "carry", "paint", "visit", "remember",
    ];
    const PREP: &[&str] = &["near", "under", "behind", "with", "beside", "over"];
    const END: &[&str] = &[".", ".", "!", "?"];

    fn pick<R: Rng + ?Sized>(rng: &mut R, list: &[&'static str]) -> &'static str {
        list[rng.random_range(0..list.len())]
    }
    fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut String) -> bool {
        let plural = rng.random_bool(0.4);
        out.push_str(pick(rng, if plural { DET_PL } else { DET_SG }));
        out.push(' ');
        if rng.random_bool(0.5) {
            out.push_str(pick(rng, ADJ));
            out.push(' ');
        }
        out.push_str(pick(rng, NOUN));
        if plural {
            out.push('s');
        }
        plural
    }

    let mut out = String::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let plural = noun_phrase(rng, &mut out);
        out.push(' ');
        out.push_str(pick(rng, VERB));
        if !plural {
            out.push('s');
        }
        out.push(' ');
        noun_phrase(rng, &mut out);
        if rng.random_bool(0.3) {
            out.push(' ');
            out.push_str(pick(rng, PREP));
            out.push(' ');
            noun_phrase(rng, &mut out);
        }
        out.push_str(pick(rng, END));
        out.push(if rng.random_bool(0.2) { '\n' } else { ' ' });
    }
    out.truncate(n_bytes);
    out
}
