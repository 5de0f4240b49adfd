use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DestExample, PairExample};
use crate::error::{Error, Result};
use crate::pipeline::{ClusteredTrajectory, UserGroups};
use crate::subhash::Vocabulary;

/// Token runs of a trajectory, one per cell occurrence.
fn cell_tokens(t: &ClusteredTrajectory, vocab: &Vocabulary) -> Vec<Vec<u32>> {
    t.points.iter().map(|p| vocab.tokenize_cell(p.cell.as_str())).collect()
}

fn token_len(runs: &[Vec<u32>]) -> usize {
    runs.iter().map(Vec::len).sum()
}

/// Which end of a side gives up cells when a pair is too long.
#[derive(Clone, Copy)]
enum Keep {
    Head,
    Tail,
}

/// Drops whole cells, always from the currently longer side, until both
/// sides together fit `budget` tokens.
fn fit_pair(mut a: &[Vec<u32>], keep_a: Keep, mut b: &[Vec<u32>], keep_b: Keep, budget: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    let drop = |s: &mut &[Vec<u32>], keep: Keep| {
        *s = match keep {
            Keep::Head => &s[..s.len() - 1],
            Keep::Tail => &s[1..],
        }
    };
    while token_len(a) + token_len(b) > budget {
        let a_longer = token_len(a) >= token_len(b);
        match (a_longer, a.len() > 1, b.len() > 1) {
            (true, true, _) | (false, true, false) => drop(&mut a, keep_a),
            (false, _, true) | (true, false, true) => drop(&mut b, keep_b),
            _ => {
                return Err(Error::input(format!(
                    "a single cell per side does not fit {budget} tokens"
                )))
            }
        }
    }
    Ok((a.concat(), b.concat()))
}

fn pair_budget(max_len: usize) -> Result<usize> {
    max_len
        .checked_sub(3)
        .filter(|&b| b >= 2)
        .ok_or_else(|| Error::input(format!("max_len {max_len} too small for a packed pair")))
}

/// Next sub-trajectory prediction: half the examples pair a prefix with
/// its true continuation, half with the tail of another trajectory cut at
/// the same relative position.
pub fn build_nsp(
    trajs: &[ClusteredTrajectory],
    vocab: &Vocabulary,
    n_examples: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    let budget = pair_budget(max_len)?;
    let eligible: Vec<Vec<Vec<u32>>> = trajs
        .iter()
        .filter(|t| t.points.len() >= 4)
        .map(|t| cell_tokens(t, vocab))
        .collect();
    if eligible.len() < 2 {
        return Err(Error::input(format!(
            "next sub-trajectory prediction needs two trajectories with at least 4 points, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for k in 0..n_examples {
        let positive = k < n_examples / 2;
        let i = rng.gen_range(0..eligible.len());
        let w = eligible[i].len();
        let cut = rng.gen_range((w as f64 * 0.25).ceil() as usize..=(w as f64 * 0.75).floor() as usize);
        let a = &eligible[i][..cut];
        let b = if positive {
            &eligible[i][cut..]
        } else {
            let mut j = rng.gen_range(0..eligible.len() - 1);
            if j >= i {
                j += 1;
            }
            let w2 = eligible[j].len();
            let cut2 = ((cut as f64 / w as f64) * w2 as f64).round() as usize;
            &eligible[j][cut2.clamp(1, w2 - 1)..]
        };
        let (ids_a, ids_b) = fit_pair(a, Keep::Tail, b, Keep::Head, budget)?;
        out.push(PairExample {
            ids_a,
            ids_b,
            label: positive as u8,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Destination cells with enough support to serve as classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestClasses {
    pub cells: Vec<String>,
    pub min_support: usize,
}

pub const DP_MIN_POINTS: usize = 8;
pub const DP_MIN_SUPPORT: usize = 5;

/// Destination prediction: the first quarter of a trajectory's cluster
/// points, labeled with the cell of its final point. Examples whose
/// destination has fewer than five occurrences are rejected; the example
/// count is capped at the number of eligible trajectories.
pub fn build_dp(
    trajs: &[ClusteredTrajectory],
    vocab: &Vocabulary,
    n_examples: usize,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<DestExample>, DestClasses)> {
    let budget = max_len
        .checked_sub(2)
        .filter(|&b| b >= 1)
        .ok_or_else(|| Error::input(format!("max_len {max_len} too small")))?;
    let eligible: Vec<&ClusteredTrajectory> = trajs.iter().filter(|t| t.points.len() >= DP_MIN_POINTS).collect();
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &eligible {
        *support.entry(t.points.last().expect("non-empty").cell.as_str()).or_default() += 1;
    }
    let cells: Vec<String> = support
        .iter()
        .filter(|(_, &c)| c >= DP_MIN_SUPPORT)
        .map(|(&cell, _)| cell.to_owned())
        .collect();
    if cells.len() < 2 {
        return Err(Error::input(format!(
            "destination prediction needs two destination cells with support {DP_MIN_SUPPORT}, found {}",
            cells.len()
        )));
    }
    let class_of: HashMap<&str, usize> = cells.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let pool: Vec<(&ClusteredTrajectory, usize)> = eligible
        .iter()
        .filter_map(|t| class_of.get(t.points.last().expect("non-empty").cell.as_str()).map(|&c| (*t, c)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_examples.min(pool.len());
    let mut out = Vec::with_capacity(n);
    for idx in sample(&mut rng, pool.len(), n) {
        let (t, label) = pool[idx];
        let k = (t.points.len() as f64 * 0.25).ceil() as usize;
        let mut runs: Vec<Vec<u32>> = t.points[..k].iter().map(|p| vocab.tokenize_cell(p.cell.as_str())).collect();
        // keep the most recent cells when the prefix is too long
        while token_len(&runs) > budget && runs.len() > 1 {
            runs.remove(0);
        }
        if token_len(&runs) > budget {
            return Err(Error::input("destination prefix cell does not fit max_len"));
        }
        out.push(DestExample {
            prefix_ids: runs.concat(),
            label,
        });
    }
    Ok((
        out,
        DestClasses {
            cells,
            min_support: DP_MIN_SUPPORT,
        },
    ))
}

/// Trajectory-user association: positives are two monthly trajectories of
/// one user, negatives two trajectories of different users. Both draw from
/// trajectories whose user has at least two months in the split; pairs are
/// sampled with replacement.
pub fn build_tua(
    trajs: &[ClusteredTrajectory],
    groups: &UserGroups,
    vocab: &Vocabulary,
    n_examples: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    let budget = pair_budget(max_len)?;
    if groups.groups.len() != trajs.len() {
        return Err(Error::input(format!(
            "{} user groups for {} trajectories",
            groups.groups.len(),
            trajs.len()
        )));
    }
    let mut by_group: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut positives = Vec::new();
    let mut members = Vec::new();
    for idx in by_group.values() {
        let before = positives.len();
        for (x, &i) in idx.iter().enumerate() {
            for &j in &idx[x + 1..] {
                if trajs[i].month != trajs[j].month {
                    positives.push((i, j));
                }
            }
        }
        if positives.len() > before {
            members.extend(idx.iter().copied());
        }
    }
    if positives.is_empty() {
        return Err(Error::input("no user has trajectories in two different months"));
    }
    let member_groups: Vec<u32> = members.iter().map(|&i| groups.groups[i]).collect();
    if member_groups.iter().all(|&g| g == member_groups[0]) {
        return Err(Error::input("trajectory-user association needs at least two users with repeat months"));
    }

    let tokens: HashMap<usize, Vec<Vec<u32>>> = members.iter().map(|&i| (i, cell_tokens(&trajs[i], vocab))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for k in 0..n_examples {
        let positive = k < n_examples / 2;
        let (mut i, mut j) = if positive {
            positives[rng.gen_range(0..positives.len())]
        } else {
            let a = rng.gen_range(0..members.len());
            let b = loop {
                let b = rng.gen_range(0..members.len());
                if member_groups[b] != member_groups[a] {
                    break b;
                }
            };
            (members[a], members[b])
        };
        if rng.gen::<bool>() {
            std::mem::swap(&mut i, &mut j);
        }
        let (ids_a, ids_b) = fit_pair(&tokens[&i], Keep::Head, &tokens[&j], Keep::Head, budget)?;
        out.push(PairExample {
            ids_a,
            ids_b,
            label: positive as u8,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocell::CellId;
    use crate::pipeline::{ClusterPoint, YearMonth};
    use crate::subhash::train_vocab;

    const CELLS: [&str; 6] = ["xn76k5", "xn76k7", "xn76kh", "xn76m2", "xn76m3", "xn77b0"];

    fn traj(cells: &[&str], month: u32) -> ClusteredTrajectory {
        ClusteredTrajectory {
            user: None,
            month: YearMonth { year: 2023, month },
            points: cells
                .iter()
                .enumerate()
                .map(|(i, c)| ClusterPoint {
                    cell: CellId::parse(c).unwrap(),
                    t_start: i as i64 * 3600,
                    t_end: i as i64 * 3600,
                    count: 1,
                })
                .collect(),
        }
    }

    fn vocab() -> Vocabulary {
        train_vocab(CELLS.iter().copied(), 40).unwrap().0
    }

    fn corpus(n: usize, len: usize) -> Vec<ClusteredTrajectory> {
        (0..n)
            .map(|i| {
                let cells: Vec<&str> = (0..len).map(|k| CELLS[(i + k * (i % 3 + 1)) % CELLS.len()]).collect();
                traj(&cells, (i % 12) as u32 + 1)
            })
            .collect()
    }

    #[test]
    fn nsp_balance_and_determinism() {
        let v = vocab();
        let c = corpus(20, 10);
        let ex = build_nsp(&c, &v, 1000, 64, 3).unwrap();
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 500);
        assert_eq!(ex.len(), 1000);
        assert_eq!(ex, build_nsp(&c, &v, 1000, 64, 3).unwrap());
        assert!(ex.iter().all(|e| e.ids_a.len() + e.ids_b.len() + 3 <= 64));
        assert!(build_nsp(&c[..1], &v, 10, 64, 3).is_err());
    }

    #[test]
    fn nsp_positive_is_true_continuation() {
        let v = vocab();
        let c = corpus(2, 8);
        let full: Vec<u32> = cell_tokens(&c[0], &v).concat();
        let full1: Vec<u32> = cell_tokens(&c[1], &v).concat();
        for e in build_nsp(&c, &v, 50, 128, 1).unwrap().iter().filter(|e| e.label == 1) {
            let joined = [e.ids_a.clone(), e.ids_b.clone()].concat();
            assert!(joined == full || joined == full1);
        }
    }

    #[test]
    fn nsp_truncates_whole_cells_around_the_cut() {
        let v = vocab();
        let c = corpus(4, 40);
        for e in build_nsp(&c, &v, 40, 20, 2).unwrap() {
            assert!(e.ids_a.len() + e.ids_b.len() <= 17);
            assert!(!e.ids_a.is_empty() && !e.ids_b.is_empty());
            // every side decodes to whole cells
            for side in [&e.ids_a, &e.ids_b] {
                assert!(v.detokenize(side).is_ok());
            }
        }
    }

    #[test]
    fn dp_prefix_and_support() {
        let v = vocab();
        let mut c: Vec<ClusteredTrajectory> = (0..5).map(|_| traj(&CELLS[..].repeat(2)[..8], 1)).collect();
        let mut other = CELLS[..].repeat(2)[..8].to_vec();
        other[7] = "xn76k5";
        c.extend((0..5).map(|_| traj(&other, 2)));
        let mut rare = other.clone();
        rare[7] = "xn76m2";
        c.push(traj(&rare, 3));
        let (ex, classes) = build_dp(&c, &v, 100, 64, 1).unwrap();
        assert_eq!(classes.cells.len(), 2);
        assert_eq!(ex.len(), 10);
        let prefix: Vec<u32> = CELLS[..2].iter().flat_map(|c| v.tokenize_cell(c)).collect();
        assert!(ex.iter().all(|e| e.prefix_ids == prefix));
        assert_eq!(build_dp(&c, &v, 100, 64, 1).unwrap(), (ex, classes));
        assert!(build_dp(&c[..6], &v, 100, 64, 1).is_err());
    }

    #[test]
    fn tua_pairs() {
        let v = vocab();
        let c = vec![traj(&CELLS, 1), traj(&CELLS[1..], 2), traj(&CELLS[2..], 1), traj(&CELLS[..4], 2)];
        let g = UserGroups { groups: vec![0, 0, 1, 1] };
        let ex = build_tua(&c, &g, &v, 200, 64, 5).unwrap();
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 100);
        assert!(ex.iter().all(|e| e.ids_a != e.ids_b || e.label == 0));
        let tok = |t: &ClusteredTrajectory| cell_tokens(t, &v).concat();
        let same = |a: &[u32], b: &[u32]| (a == tok(&c[0]) && b == tok(&c[1])) || (a == tok(&c[1]) && b == tok(&c[0]));
        let same2 = |a: &[u32], b: &[u32]| (a == tok(&c[2]) && b == tok(&c[3])) || (a == tok(&c[3]) && b == tok(&c[2]));
        for e in &ex {
            let is_same_user = same(&e.ids_a, &e.ids_b) || same2(&e.ids_a, &e.ids_b);
            assert_eq!(is_same_user, e.label == 1);
        }
        assert_eq!(ex, build_tua(&c, &g, &v, 200, 64, 5).unwrap());

        let single_months = UserGroups { groups: vec![0, 1, 2, 3] };
        assert!(build_tua(&c, &single_months, &v, 10, 64, 5).is_err());
        let same_month = vec![traj(&CELLS, 1), traj(&CELLS[1..], 1)];
        assert!(build_tua(&same_month, &UserGroups { groups: vec![0, 0] }, &v, 10, 64, 5).is_err());
    }

    #[test]
    fn fit_pair_shortens_longer_side() {
        let a = vec![vec![1, 1], vec![2, 2], vec![3, 3]];
        let b = vec![vec![4], vec![5]];
        let (x, y) = fit_pair(&a, Keep::Tail, &b, Keep::Head, 5).unwrap();
        assert_eq!(x, vec![3, 3]);
        assert_eq!(y, vec![4, 5]);
        let (x, y) = fit_pair(&a, Keep::Head, &b, Keep::Head, 3).unwrap();
        assert_eq!((x, y), (vec![1, 1], vec![4]));
        assert!(fit_pair(&a, Keep::Head, &b, Keep::Head, 2).is_err());
    }
}
