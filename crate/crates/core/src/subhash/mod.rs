//! Sub-hash tokenization of cell codes.
//!
//! Cell codes are split into WordPiece tokens: the first piece of a cell is
//! stored verbatim and every following piece carries the `##` continuation
//! marker. A token never spans two cells.

mod trainer;

use rustc_hash::FxHashMap as HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub use trainer::{train_vocab, MergeStats};

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "##";

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

/// Word id of positions that do not belong to a cell occurrence.
pub const NO_WORD: u32 = u32::MAX;

pub const DEFAULT_VOCAB_SIZE: usize = 2_000;

/// Token inventory. Ids are line numbers of the vocabulary file.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    // keyed by the piece text without its marker
    initial: HashMap<String, u32>,
    continuation: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens; the specials are
    /// prepended at ids 0..5.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format {
                what: "vocabulary",
                msg: format!("first {} tokens must be {:?}", SPECIALS.len(), SPECIALS),
            });
        }
        let mut initial = HashMap::default();
        let mut continuation = HashMap::default();
        let mut max_piece_chars = 0;
        for (id, tok) in tokens.iter().enumerate().skip(SPECIALS.len()) {
            let (map, piece) = match tok.strip_prefix(CONTINUATION) {
                Some(rest) => (&mut continuation, rest),
                None => (&mut initial, tok.as_str()),
            };
            if piece.is_empty() || piece.contains('#') || piece.chars().any(char::is_whitespace) {
                return Err(Error::Format {
                    what: "vocabulary",
                    msg: format!("invalid token {tok:?} at line {}", id + 1),
                });
            }
            if map.insert(piece.to_owned(), id as u32).is_some() {
                return Err(Error::Format {
                    what: "vocabulary",
                    msg: format!("duplicate token {tok:?}"),
                });
            }
            max_piece_chars = max_piece_chars.max(piece.chars().count());
        }
        Ok(Self {
            tokens,
            initial,
            continuation,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(i) = SPECIALS.iter().position(|s| *s == token) {
            return Some(i as u32);
        }
        match token.strip_prefix(CONTINUATION) {
            Some(rest) => self.continuation.get(rest).copied(),
            None => self.initial.get(token).copied(),
        }
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.tokens {
            writeln!(out, "{t}").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_full_list(text.lines().map(str::to_owned).collect())
    }

    /// Greedy longest-match-first segmentation of one cell code. A cell with
    /// any unmatched position becomes a single `[UNK]`.
    pub fn tokenize_cell(&self, cell: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.tokenize_into(cell, &mut out);
        out
    }

    fn tokenize_into(&self, cell: &str, out: &mut Vec<u32>) {
        if cell.is_ascii() {
            self.tokenize_with(cell, cell.len(), |i| i, out);
        } else {
            // byte offsets of char boundaries, plus the end
            let bounds: Vec<usize> = cell
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(cell.len()))
                .collect();
            self.tokenize_with(cell, bounds.len() - 1, |i| bounds[i], out);
        }
    }

    fn tokenize_with(&self, cell: &str, n: usize, bound: impl Fn(usize) -> usize, out: &mut Vec<u32>) {
        let start_len = out.len();
        let mut start = 0;
        while start < n {
            let map = if start == 0 {
                &self.initial
            } else {
                &self.continuation
            };
            let longest = n.min(start + self.max_piece_chars);
            let found = (start + 1..=longest)
                .rev()
                .find_map(|end| map.get(&cell[bound(start)..bound(end)]).map(|&id| (end, id)));
            match found {
                Some((end, id)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(start_len);
                    out.push(UNK_ID);
                    return;
                }
            }
        }
    }

    /// Concatenates pieces with their markers stripped. Trailing `[PAD]`s
    /// are ignored.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let end = ids.iter().rposition(|&id| id != PAD_ID).map_or(0, |p| p + 1);
        let mut s = String::new();
        for &id in &ids[..end] {
            if id == UNK_ID {
                return Err(Error::Lossy("sequence contains [UNK]".into()));
            }
            if Self::is_special(id) {
                return Err(Error::input(format!(
                    "special token {} inside a detokenized sequence",
                    SPECIALS[id as usize]
                )));
            }
            let tok = self
                .token(id)
                .ok_or_else(|| Error::input(format!("token id {id} outside vocabulary")))?;
            s.push_str(tok.strip_prefix(CONTINUATION).unwrap_or(tok));
        }
        Ok(s)
    }

    /// Tokenizes a sequence of cell occurrences, tagging every token with the
    /// index of the occurrence it came from.
    pub fn encode_trajectory<S: AsRef<str>>(&self, cells: &[S]) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for (w, cell) in cells.iter().enumerate() {
            let before = seq.ids.len();
            self.tokenize_into(cell.as_ref(), &mut seq.ids);
            let added = seq.ids.len() - before;
            seq.word_ids.extend(std::iter::repeat(w as u32).take(added));
        }
        seq
    }
}

/// Token ids of a trajectory with the cell occurrence of each position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub word_ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of cell occurrences.
    pub fn num_words(&self) -> usize {
        self.word_ids
            .iter()
            .filter(|&&w| w != NO_WORD)
            .max()
            .map_or(0, |&w| w as usize + 1)
    }

    /// Token runs per cell occurrence, in order.
    pub fn word_runs(&self) -> Vec<&[u32]> {
        let mut runs = Vec::new();
        let mut start = 0;
        while start < self.ids.len() {
            let w = self.word_ids[start];
            let mut end = start + 1;
            while end < self.ids.len() && self.word_ids[end] == w {
                end += 1;
            }
            if w != NO_WORD {
                runs.push(&self.ids[start..end]);
            }
            start = end;
        }
        runs
    }
}
