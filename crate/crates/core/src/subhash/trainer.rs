//! WordPiece vocabulary training.
//!
//! Starts from every corpus character in initial and `##` continuation form
//! and repeatedly merges the adjacent pair with the highest likelihood score
//! `count(ab) / (count(a) * count(b))`. Ties go to the merged token that is
//! smallest in shortlex order (shorter first, then bytewise).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{Vocabulary, CONTINUATION, SPECIALS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetReached,
    /// No adjacent pair occurs at least twice.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MergeStats {
    pub merges: usize,
    pub initial_symbols: usize,
    pub stop: StopReason,
}

struct Candidate {
    pair: (u32, u32),
    count: u64,
    denom: u128,
    merged: String,
}

impl Candidate {
    // true if `self` beats `other`
    fn beats(&self, other: &Candidate) -> bool {
        // count/denom vs other.count/other.denom, exactly
        let lhs = self.count as u128 * other.denom;
        let rhs = other.count as u128 * self.denom;
        match lhs.cmp(&rhs) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => shortlex(&self.merged, &other.merged) == Ordering::Less,
        }
    }
}

fn shortlex(a: &str, b: &str) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

fn merge_text(a: &str, b: &str) -> String {
    let mut s = String::with_capacity(a.len() + b.len());
    s.push_str(a);
    s.push_str(b.strip_prefix(CONTINUATION).unwrap_or(b));
    s
}

/// Trains a vocabulary of at most `vocab_size` tokens (specials included).
pub fn train_vocab<I, S>(corpus: I, vocab_size: usize) -> Result<(Vocabulary, MergeStats)>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for w in corpus {
        let w = w.as_ref();
        if w.is_empty() {
            continue;
        }
        if w.contains('#') || w.chars().any(char::is_whitespace) {
            return Err(Error::input(format!("corpus word {w:?} contains '#' or whitespace")));
        }
        *word_counts.entry(w.to_owned()).or_default() += 1;
    }
    if word_counts.is_empty() {
        return Err(Error::input("empty tokenizer corpus"));
    }

    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let mut tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));
    let minimum = SPECIALS.len() + tokens.len();
    if vocab_size < minimum {
        return Err(Error::input(format!(
            "vocab_size {vocab_size} below minimum {minimum} for this corpus"
        )));
    }
    let mut index: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let t = if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    };
                    index[&t]
                })
                .collect();
            (syms, n)
        })
        .collect();

    let initial_symbols = tokens.len();
    let mut merges = 0;
    let stop = loop {
        if SPECIALS.len() + tokens.len() >= vocab_size {
            break StopReason::BudgetReached;
        }

        let mut sym_counts: HashMap<u32, u64> = HashMap::new();
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for &s in syms {
                *sym_counts.entry(s).or_default() += n;
            }
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += n;
            }
        }

        let mut best: Option<Candidate> = None;
        for (&pair, &count) in &pair_counts {
            if count < 2 {
                continue;
            }
            let denom = sym_counts[&pair.0] as u128 * sym_counts[&pair.1] as u128;
            let cand = Candidate {
                pair,
                count,
                denom,
                merged: merge_text(&tokens[pair.0 as usize], &tokens[pair.1 as usize]),
            };
            if best.as_ref().map_or(true, |b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        let Some(best) = best else {
            break StopReason::Exhausted;
        };

        let new_id = match index.get(&best.merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(best.merged.clone(), id);
                tokens.push(best.merged);
                id
            }
        };
        let (a, b) = best.pair;
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
        merges += 1;
    };

    log::debug!(
        "wordpiece: {} words, {} merges, {} tokens, stop {:?}",
        word_counts.len(),
        merges,
        SPECIALS.len() + tokens.len(),
        stop
    );
    let vocab = Vocabulary::from_tokens(tokens)?;
    Ok((
        vocab,
        MergeStats {
            merges,
            initial_symbols,
            stop,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subhash::UNK_ID;

    #[test]
    fn single_word_merges_to_completion() {
        let corpus = std::iter::repeat("xn76k5").take(100);
        let (v, stats) = train_vocab(corpus, 64).unwrap();
        for t in ["xn7", "##6k5", "xn76k5"] {
            assert!(v.id(t).is_some(), "missing {t}: {:?}", v.tokens());
        }
        assert_eq!(stats.stop, StopReason::Exhausted);
        assert_eq!(v.tokenize_cell("xn76k5").len(), 1);
    }

    #[test]
    fn minimum_budget_gives_characters() {
        let corpus = ["s0b", "s0c", "s0b", "b0s"];
        // 4 chars * 2 forms + 5 specials
        let (v, stats) = train_vocab(corpus, 13).unwrap();
        assert_eq!(stats.merges, 0);
        assert_eq!(v.len(), 13);
        let ids = v.tokenize_cell("s0b");
        assert_eq!(ids.len(), 3);
        assert!(train_vocab(corpus, 12).is_err());
    }

    #[test]
    fn errors() {
        assert!(train_vocab(Vec::<String>::new(), 100).is_err());
        assert!(train_vocab([""], 100).is_err());
        assert!(train_vocab(["a#b"], 100).is_err());
    }

    #[test]
    fn budget_respected() {
        let corpus: Vec<String> = (0..400).map(|i| format!("u{:03}", i % 97)).collect();
        for budget in [30, 40, 60, 200] {
            let (v, _) = train_vocab(&corpus, budget).unwrap();
            assert!(v.len() <= budget);
        }
    }

    #[test]
    fn highest_likelihood_pair_wins() {
        // "q" and "##z" only ever occur together, so their pair has the
        // maximal score even though "ab" is more frequent.
        let mut corpus = vec!["qz"; 2];
        corpus.extend(std::iter::repeat("ab").take(10));
        corpus.extend(std::iter::repeat("ac").take(10));
        corpus.extend(std::iter::repeat("db").take(10));
        let (v, _) = train_vocab(&corpus, 18).unwrap();
        // 5 specials + 12 symbols + exactly one merge
        assert_eq!(v.len(), 18);
        assert_eq!(v.tokens().last().unwrap(), "qz");
    }

    #[test]
    fn roundtrip_on_training_corpus() {
        let corpus: Vec<String> = (0..300).map(|i| format!("xn7{:x}", i * 7919 % 4096)).collect();
        let (v, _) = train_vocab(&corpus, 120).unwrap();
        for w in &corpus {
            let ids = v.tokenize_cell(w);
            assert!(!ids.contains(&UNK_ID));
            assert_eq!(&v.detokenize(&ids).unwrap(), w);
        }
    }

    #[test]
    fn deterministic() {
        let corpus: Vec<String> = (0..200).map(|i| format!("wx4{}", i * 31 % 97)).collect();
        let (a, _) = train_vocab(&corpus, 80).unwrap();
        let (b, _) = train_vocab(corpus.iter().rev(), 80).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }
}
