//! Chunking of token sequences and static whole-cell masking.
//!
//! Every chunk is masked once, at dataset build time. The masking unit is a
//! cell occurrence: when an occurrence is selected all of its sub-hash tokens
//! are replaced by `[MASK]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::subhash::{TokenSequence, MASK_ID, NO_WORD, NUM_SPECIALS, PAD_ID};

/// Label value of positions that carry no prediction target.
pub const IGNORE_LABEL: i32 = -100;
pub const MIN_CHUNK_SIZE: usize = 8;
pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_MASK_RATIO: f64 = 0.2;

/// Fixed-length token window. Word ids are renumbered from 0 per chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub ids: Vec<u32>,
    pub word_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl Chunk {
    pub fn num_words(&self) -> usize {
        self.word_ids
            .iter()
            .filter(|&&w| w != NO_WORD)
            .max()
            .map_or(0, |&w| w as usize + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedChunk {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
    pub attention_mask: Vec<u8>,
    #[serde(skip)]
    pub word_ids: Vec<u32>,
}

impl MaskedChunk {
    pub fn num_labels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

fn finish_chunk(ids: &mut Vec<u32>, word_ids: &mut Vec<u32>, chunk_size: usize) -> Chunk {
    let real = ids.len();
    ids.resize(chunk_size, PAD_ID);
    word_ids.resize(chunk_size, NO_WORD);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(chunk_size, 0);
    Chunk {
        ids: std::mem::take(ids),
        word_ids: std::mem::take(word_ids),
        attention_mask,
    }
}

/// Splits a trajectory into non-overlapping padded windows. A cell
/// occurrence never straddles two chunks; chunks holding fewer than two
/// occurrences are dropped.
pub fn chunk_sequence(seq: &TokenSequence, chunk_size: usize) -> Result<Vec<Chunk>> {
    if chunk_size < MIN_CHUNK_SIZE {
        return Err(Error::input(format!(
            "chunk size {chunk_size} below minimum {MIN_CHUNK_SIZE}"
        )));
    }
    let mut chunks = Vec::new();
    let mut ids = Vec::with_capacity(chunk_size);
    let mut word_ids = Vec::with_capacity(chunk_size);
    let mut words_in_chunk = 0u32;
    for run in seq.word_runs() {
        if run.len() > chunk_size {
            return Err(Error::input(format!(
                "cell occurrence of {} tokens cannot fit a chunk of {chunk_size}",
                run.len()
            )));
        }
        if ids.len() + run.len() > chunk_size {
            chunks.push(finish_chunk(&mut ids, &mut word_ids, chunk_size));
            words_in_chunk = 0;
        }
        ids.extend_from_slice(run);
        word_ids.extend(std::iter::repeat(words_in_chunk).take(run.len()));
        words_in_chunk += 1;
    }
    if !ids.is_empty() {
        chunks.push(finish_chunk(&mut ids, &mut word_ids, chunk_size));
    }
    chunks.retain(|c| c.num_words() >= 2);
    Ok(chunks)
}

/// Replacement policy for the tokens of a selected occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// Every selected token becomes `[MASK]`.
    #[default]
    MaskOnly,
    /// 80% `[MASK]`, 10% random non-special token, 10% unchanged, drawn per
    /// token. Needs the vocabulary size.
    Mixture { vocab_size: u32 },
}

/// Number of occurrences to mask out of `words`: `round(ratio * words)`,
/// kept below `words` for ratios under 1 so some context survives. Small
/// chunks can get 0 (two occurrences at ratio 0.2).
pub fn masked_count(words: usize, ratio: f64) -> usize {
    let m = (ratio * words as f64).round() as usize;
    if ratio < 1.0 {
        m.min(words.saturating_sub(1))
    } else {
        m.min(words)
    }
}

pub fn apply_whole_cell_mask(chunk: &Chunk, ratio: f64, seed: u64) -> Result<MaskedChunk> {
    apply_whole_cell_mask_with(chunk, ratio, seed, MaskStyle::MaskOnly)
}

pub fn apply_whole_cell_mask_with(
    chunk: &Chunk,
    ratio: f64,
    seed: u64,
    style: MaskStyle,
) -> Result<MaskedChunk> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::input(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let words = chunk.num_words();
    if words < 2 {
        return Err(Error::input("chunk holds fewer than two cell occurrences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = masked_count(words, ratio);
    let mut selected = vec![false; words];
    for w in sample(&mut rng, words, m) {
        selected[w] = true;
    }

    let mut input_ids = chunk.ids.clone();
    let mut labels = vec![IGNORE_LABEL; chunk.ids.len()];
    for (pos, &w) in chunk.word_ids.iter().enumerate() {
        if w == NO_WORD || !selected[w as usize] {
            continue;
        }
        labels[pos] = chunk.ids[pos] as i32;
        input_ids[pos] = match style {
            MaskStyle::MaskOnly => MASK_ID,
            MaskStyle::Mixture { vocab_size } => {
                let u: f64 = rng.gen();
                if u < 0.8 {
                    MASK_ID
                } else if u < 0.9 {
                    rng.gen_range(NUM_SPECIALS..vocab_size)
                } else {
                    chunk.ids[pos]
                }
            }
        };
    }
    Ok(MaskedChunk {
        input_ids,
        labels,
        attention_mask: chunk.attention_mask.clone(),
        word_ids: chunk.word_ids.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub chunk_size: usize,
    pub ratio: f64,
    pub style: MaskStyle,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            ratio: DEFAULT_MASK_RATIO,
            style: MaskStyle::MaskOnly,
        }
    }
}

/// Chunks and masks a whole split. With a positive ratio, chunks left
/// without any masked occurrence carry no loss and are skipped.
pub fn build_masked_split(
    seqs: &[TokenSequence],
    config: &MaskingConfig,
    seed: u64,
) -> Result<Vec<MaskedChunk>> {
    if seqs.is_empty() {
        return Err(Error::input("cannot build a masked dataset from an empty split"));
    }
    let mut out = Vec::new();
    let (mut index, mut skipped) = (0u64, 0usize);
    for seq in seqs {
        for chunk in chunk_sequence(seq, config.chunk_size)? {
            let s = derive_seed(seed, index);
            index += 1;
            let masked = apply_whole_cell_mask_with(&chunk, config.ratio, s, config.style)?;
            if config.ratio > 0.0 && masked.num_labels() == 0 {
                skipped += 1;
                continue;
            }
            out.push(masked);
        }
    }
    if skipped > 0 {
        log::debug!("skipped {skipped} chunks too short to mask at ratio {}", config.ratio);
    }
    if out.is_empty() {
        return Err(Error::input("split produced no chunk with two or more cell occurrences"));
    }
    Ok(out)
}

pub fn write_masked(path: &Path, chunks: &[MaskedChunk]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in chunks {
        serde_json::to_writer(&mut w, c).expect("masked chunk serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_masked(path: &Path) -> Result<Vec<MaskedChunk>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: MaskedChunk = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "masked dataset",
            msg: format!("{}:{}: {e}", path.display(), n + 1),
        })?;
        if c.labels.len() != c.input_ids.len() || c.attention_mask.len() != c.input_ids.len() {
            return Err(Error::Format {
                what: "masked dataset",
                msg: format!("{}:{}: field lengths differ", path.display(), n + 1),
            });
        }
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `runs[i]` tokens for occurrence i, ids starting at 10.
    fn seq_with_runs(runs: &[usize]) -> TokenSequence {
        let mut s = TokenSequence::default();
        for (w, &n) in runs.iter().enumerate() {
            for k in 0..n {
                s.ids.push(10 + (w * 7 + k) as u32 % 50);
                s.word_ids.push(w as u32);
            }
        }
        s
    }

    #[test]
    fn aligned_runs_fill_chunks() {
        let chunks = chunk_sequence(&seq_with_runs(&[2; 515]), 512).unwrap();
        let real: Vec<usize> = chunks
            .iter()
            .map(|c| c.attention_mask.iter().filter(|&&a| a == 1).count())
            .collect();
        assert_eq!(real, [512, 512, 6]);
        assert!(chunks.iter().all(|c| c.ids.len() == 512));
        let last = &chunks[2];
        assert!(last.ids[6..].iter().all(|&i| i == PAD_ID));
        assert!(last.word_ids[6..].iter().all(|&w| w == NO_WORD));
    }

    #[test]
    fn short_sequence_single_padded_chunk() {
        let chunks = chunk_sequence(&seq_with_runs(&[2, 3, 1]), 16).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].attention_mask.iter().filter(|&&a| a == 1).count(), 6);
    }

    #[test]
    fn runs_never_straddle() {
        // 255 runs of 2 = 510 tokens, then a 3-token run at position 510
        let mut runs = vec![2; 255];
        runs.push(3);
        runs.push(2);
        let chunks = chunk_sequence(&seq_with_runs(&runs), 512).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].attention_mask.iter().filter(|&&a| a == 1).count(), 510);
        assert_eq!(&chunks[1].word_ids[..5], &[0, 0, 0, 1, 1]);
    }

    #[test]
    fn chunk_errors_and_drops() {
        assert!(chunk_sequence(&seq_with_runs(&[9]), 8).is_err());
        assert!(chunk_sequence(&seq_with_runs(&[1, 1]), 7).is_err());
        // a lone occurrence gives no chunk
        assert!(chunk_sequence(&seq_with_runs(&[3]), 8).unwrap().is_empty());
        // the second chunk would hold a single occurrence
        let c = chunk_sequence(&seq_with_runs(&[4, 4, 4]), 8).unwrap();
        assert_eq!(c.len(), 1);
    }

    fn one_chunk(runs: &[usize], size: usize) -> Chunk {
        chunk_sequence(&seq_with_runs(runs), size).unwrap().remove(0)
    }

    #[test]
    fn twenty_percent_of_ten() {
        let c = one_chunk(&[2; 10], 32);
        let m = apply_whole_cell_mask(&c, 0.2, 1).unwrap();
        let mut words: Vec<u32> = (0..32).filter(|&p| m.labels[p] != IGNORE_LABEL).map(|p| c.word_ids[p]).collect();
        words.dedup();
        assert_eq!(words.len(), 2);
        assert_eq!(m.num_labels(), 4);
    }

    #[test]
    fn ratio_zero_is_identity() {
        let c = one_chunk(&[2; 10], 32);
        let m = apply_whole_cell_mask(&c, 0.0, 1).unwrap();
        assert_eq!(m.input_ids, c.ids);
        assert_eq!(m.num_labels(), 0);
        assert!(apply_whole_cell_mask(&c, 1.5, 1).is_err());
    }

    #[test]
    fn seeds_cover_every_occurrence() {
        let c = one_chunk(&[1; 10], 16);
        let a = apply_whole_cell_mask(&c, 0.2, 42).unwrap();
        assert_eq!(a, apply_whole_cell_mask(&c, 0.2, 42).unwrap());
        let mut hit = [false; 10];
        for seed in 0..1000 {
            let m = apply_whole_cell_mask(&c, 0.2, seed).unwrap();
            for p in 0..10 {
                if m.labels[p] != IGNORE_LABEL {
                    hit[p] = true;
                }
            }
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn clamps() {
        assert_eq!(masked_count(2, 0.2), 0);
        assert_eq!(masked_count(2, 0.9), 1);
        assert_eq!(masked_count(3, 0.2), 1);
        assert_eq!(masked_count(10, 0.2), 2);
        assert_eq!(masked_count(10, 1.0), 10);
        assert_eq!(masked_count(10, 0.0), 0);
        assert_eq!(masked_count(7, 0.2), 1);
        assert_eq!(masked_count(8, 0.2), 2);
    }

    #[test]
    fn mixture_keeps_labels_whole() {
        let c = one_chunk(&[3; 20], 64);
        let m = apply_whole_cell_mask_with(&c, 0.5, 3, MaskStyle::Mixture { vocab_size: 60 }).unwrap();
        assert_eq!(m.num_labels(), 30);
        assert!(m.input_ids.iter().all(|&i| i < 60));
    }

    #[test]
    fn masked_file_roundtrip() {
        let c = one_chunk(&[2; 5], 16);
        let m = apply_whole_cell_mask(&c, 0.2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_masked(&p, &[m.clone()]).unwrap();
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.starts_with(r#"{"input_ids":["#));
        let back = read_masked(&p).unwrap();
        assert_eq!(back[0].input_ids, m.input_ids);
        assert_eq!(back[0].labels, m.labels);
    }

    proptest! {
        #[test]
        fn mask_contract(runs in proptest::collection::vec(1usize..4, 2..80), ratio in 0.0f64..=1.0, seed: u64) {
            let seq = seq_with_runs(&runs);
            for c in chunk_sequence(&seq, 24).unwrap() {
                let m = apply_whole_cell_mask(&c, ratio, seed).unwrap();
                let words = c.num_words();
                let mut masked_words = std::collections::BTreeSet::new();
                for p in 0..c.ids.len() {
                    let labeled = m.labels[p] != IGNORE_LABEL;
                    prop_assert_eq!(labeled, m.input_ids[p] == MASK_ID);
                    if labeled {
                        prop_assert_eq!(m.labels[p], c.ids[p] as i32);
                        prop_assert_eq!(c.attention_mask[p], 1);
                        masked_words.insert(c.word_ids[p]);
                    }
                    if c.attention_mask[p] == 0 {
                        prop_assert!(!labeled);
                    }
                }
                // atomicity
                for p in 0..c.ids.len() {
                    if c.word_ids[p] != NO_WORD {
                        prop_assert_eq!(masked_words.contains(&c.word_ids[p]), m.labels[p] != IGNORE_LABEL);
                    }
                }
                prop_assert_eq!(masked_words.len(), masked_count(words, ratio));
            }
        }
    }
}
