use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClusteredTrajectory;
use crate::error::{Error, Result};

pub const MIN_SPLIT_INPUT: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<ClusteredTrajectory>,
    pub validation: Vec<ClusteredTrajectory>,
    pub test: Vec<ClusteredTrajectory>,
}

/// Same-user grouping of the test split. `groups[i]` is an opaque group
/// number for `test[i]`; user keys themselves are not kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroups {
    pub groups: Vec<u32>,
}

impl UserGroups {
    fn from_users(trajs: &[ClusteredTrajectory]) -> Result<Self> {
        let mut ids: HashMap<&str, u32> = HashMap::new();
        let groups = trajs
            .iter()
            .map(|t| {
                let user = t
                    .user
                    .as_deref()
                    .ok_or_else(|| Error::input("trajectory without user key before splitting"))?;
                let next = ids.len() as u32;
                Ok(*ids.entry(user).or_insert(next))
            })
            .collect::<Result<_>>()?;
        Ok(Self { groups })
    }
}

/// Seeded shuffle followed by a contiguous 70/15/15 cut; the remainder of
/// the integer division goes to the test split. User keys are erased from
/// the returned trajectories.
pub fn split_corpus(
    mut trajs: Vec<ClusteredTrajectory>,
    seed: u64,
) -> Result<(CorpusSplit, UserGroups)> {
    let n = trajs.len();
    if n < MIN_SPLIT_INPUT {
        return Err(Error::input(format!(
            "need at least {MIN_SPLIT_INPUT} trajectories to split, got {n}"
        )));
    }
    // canonical order first, so upstream ordering never leaks into the split
    trajs.sort_by(|a, b| {
        a.user
            .cmp(&b.user)
            .then(a.month.cmp(&b.month))
            .then_with(|| a.points.first().map(|p| p.t_start).cmp(&b.points.first().map(|p| p.t_start)))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trajs.shuffle(&mut rng);

    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut test = trajs.split_off(n_train + n_val);
    let mut validation = trajs.split_off(n_train);
    let mut train = trajs;

    let groups = UserGroups::from_users(&test)?;
    for t in train.iter_mut().chain(&mut validation).chain(&mut test) {
        t.user = None;
    }
    Ok((
        CorpusSplit {
            train,
            validation,
            test,
        },
        groups,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocell::CellId;
    use crate::pipeline::{ClusterPoint, YearMonth};

    fn corpus(n: usize) -> Vec<ClusteredTrajectory> {
        (0..n)
            .map(|i| ClusteredTrajectory {
                user: Some(format!("user{}", i / 3)),
                month: YearMonth {
                    year: 2023,
                    month: (i % 3) as u32 + 1,
                },
                points: vec![ClusterPoint {
                    cell: CellId::parse("s00000").unwrap(),
                    t_start: i as i64,
                    t_end: i as i64,
                    count: 1,
                }],
            })
            .collect()
    }

    #[test]
    fn proportions() {
        let (s, g) = split_corpus(corpus(100), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 15));
        assert_eq!(g.groups.len(), 15);
        let (s, _) = split_corpus(corpus(101), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 16));
    }

    #[test]
    fn deterministic_disjoint_and_anonymous() {
        let (a, ga) = split_corpus(corpus(60), 3).unwrap();
        let mut reversed = corpus(60);
        reversed.reverse();
        let (b, gb) = split_corpus(reversed, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);

        let key = |t: &ClusteredTrajectory| t.points[0].t_start;
        let mut all: Vec<i64> = a.train.iter().chain(&a.validation).chain(&a.test).map(key).collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<i64>>());
        assert!(a.train.iter().chain(&a.validation).chain(&a.test).all(|t| t.user.is_none()));

        let (c, _) = split_corpus(corpus(60), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn groups_follow_users() {
        let (s, g) = split_corpus(corpus(90), 11).unwrap();
        // user i/3 owns t_start values 3u..3u+2
        for i in 0..s.test.len() {
            for j in 0..s.test.len() {
                let same_user = s.test[i].points[0].t_start / 3 == s.test[j].points[0].t_start / 3;
                assert_eq!(same_user, g.groups[i] == g.groups[j]);
            }
        }
    }

    #[test]
    fn too_few() {
        assert!(split_corpus(corpus(9), 1).is_err());
    }
}
