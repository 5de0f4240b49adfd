use serde::{Deserialize, Serialize};

use super::{CheckIn, ClusterPoint, ClusteredTrajectory, RawTrajectory, YearMonth};
use crate::error::{Error, Result};
use crate::geocell::encode_cell;

/// Groups `(user, ts)`-sorted check-ins into one trajectory per user and
/// UTC month.
pub fn assemble_monthly(checkins: &[CheckIn]) -> Result<Vec<RawTrajectory>> {
    let mut out: Vec<RawTrajectory> = Vec::new();
    for c in checkins {
        let month = YearMonth::of_timestamp(c.ts)?;
        match out.last_mut() {
            Some(t) if t.user == c.user && t.month == month => {
                if t.points.last().is_some_and(|p| p.ts > c.ts) {
                    return Err(Error::input(format!(
                        "check-ins of user {:?} are not time-sorted",
                        c.user
                    )));
                }
                t.points.push(c.clone());
            }
            _ => out.push(RawTrajectory {
                user: c.user.clone(),
                month,
                points: vec![c.clone()],
            }),
        }
    }
    Ok(out)
}

/// Single left-to-right pass: a check-in joins the open cluster iff it falls
/// in the same cell and at most `window_s` seconds after the previous
/// member.
pub fn cluster_points(
    traj: &RawTrajectory,
    precision: usize,
    window_s: i64,
) -> Result<ClusteredTrajectory> {
    if window_s <= 0 {
        return Err(Error::input(format!("clustering window {window_s}s must be positive")));
    }
    let mut points: Vec<ClusterPoint> = Vec::new();
    for c in &traj.points {
        let cell = encode_cell(&c.point, precision)?;
        match points.last_mut() {
            Some(open) if open.cell == cell && c.ts - open.t_end <= window_s => {
                open.t_end = c.ts;
                open.count += 1;
            }
            _ => points.push(ClusterPoint {
                cell,
                t_start: c.ts,
                t_end: c.ts,
                count: 1,
            }),
        }
    }
    Ok(ClusteredTrajectory {
        user: Some(traj.user.clone()),
        month: traj.month,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterRule {
    pub min_distinct_cells: usize,
    pub min_points: usize,
}

impl Default for FilterRule {
    fn default() -> Self {
        Self {
            min_distinct_cells: 3,
            min_points: 10,
        }
    }
}

impl FilterRule {
    pub fn keeps(&self, t: &ClusteredTrajectory) -> bool {
        t.points.len() >= self.min_points && t.distinct_cells() >= self.min_distinct_cells
    }
}

pub fn filter_trajectories(
    trajs: Vec<ClusteredTrajectory>,
    rule: FilterRule,
) -> Vec<ClusteredTrajectory> {
    trajs.into_iter().filter(|t| rule.keeps(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocell::{decode_cell, CellId, GeoPoint};
    use proptest::prelude::*;

    const JAN31_2359: i64 = 1_675_209_540; // 2023-01-31T23:59:00Z

    fn checkin(user: &str, lat: f64, lon: f64, ts: i64) -> CheckIn {
        CheckIn {
            user: user.into(),
            point: GeoPoint::new(lat, lon).unwrap(),
            ts,
        }
    }

    fn raw(points: Vec<CheckIn>) -> RawTrajectory {
        RawTrajectory {
            user: points[0].user.clone(),
            month: YearMonth::of_timestamp(points[0].ts).unwrap(),
            points,
        }
    }

    #[test]
    fn month_boundary_splits() {
        let cs = [
            checkin("a", 1.0, 1.0, JAN31_2359),
            checkin("a", 1.0, 1.0, JAN31_2359 + 120),
        ];
        let ts = assemble_monthly(&cs).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].month.to_string(), "2023-01");
        assert_eq!(ts[1].month.to_string(), "2023-02");
    }

    #[test]
    fn same_month_and_users() {
        let one: Vec<CheckIn> = (0..5).map(|i| checkin("a", 1.0, 1.0, 1_000 + i)).collect();
        let ts = assemble_monthly(&one).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].points.len(), 5);

        let mut two = vec![
            checkin("a", 1.0, 1.0, 10),
            checkin("b", 1.0, 1.0, 5),
            checkin("a", 1.0, 1.0, 20),
            checkin("b", 1.0, 1.0, 25),
        ];
        two.sort_by(|x, y| x.user.cmp(&y.user).then(x.ts.cmp(&y.ts)));
        assert_eq!(assemble_monthly(&two).unwrap().len(), 2);
    }

    #[test]
    fn ten_minute_chain_rule() {
        let t = raw(vec![
            checkin("a", 35.0, 139.0, 0),
            checkin("a", 35.0, 139.0, 300),
            checkin("a", 35.0, 139.0, 540),
            checkin("a", 35.0, 139.0, 1500),
        ]);
        let c = cluster_points(&t, 6, 600).unwrap();
        let spans: Vec<(i64, i64, u32)> = c.points.iter().map(|p| (p.t_start, p.t_end, p.count)).collect();
        assert_eq!(spans, [(0, 540, 3), (1500, 1500, 1)]);
    }

    #[test]
    fn cell_change_always_splits() {
        let t = raw(vec![
            checkin("a", 35.0, 139.0, 0),
            checkin("a", 36.0, 139.0, 60),
            checkin("a", 35.0, 139.0, 120),
            checkin("a", 36.0, 139.0, 180),
        ]);
        assert_eq!(cluster_points(&t, 6, 600).unwrap().points.len(), 4);
        assert!(cluster_points(&t, 6, 0).is_err());
    }

    fn clustered(n_points: usize, n_cells: usize) -> ClusteredTrajectory {
        let cells = ["s00000", "s00001", "s00002", "s00003", "s00004"];
        ClusteredTrajectory {
            user: None,
            month: YearMonth { year: 2023, month: 1 },
            points: (0..n_points)
                .map(|i| ClusterPoint {
                    cell: CellId::parse(cells[i % n_cells]).unwrap(),
                    t_start: i as i64 * 1000,
                    t_end: i as i64 * 1000,
                    count: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn filter_rule() {
        let rule = FilterRule::default();
        assert!(!rule.keeps(&clustered(12, 2)));
        assert!(!rule.keeps(&clustered(9, 5)));
        assert!(rule.keeps(&clustered(10, 3)));
        let kept = filter_trajectories(vec![clustered(12, 2), clustered(10, 3)], rule);
        assert_eq!(kept.len(), 1);
    }

    fn arb_raw() -> impl Strategy<Value = RawTrajectory> {
        proptest::collection::vec((0usize..4, 1i64..2000), 1..60).prop_map(|steps| {
            let anchors = [(35.01, 139.01), (35.02, 139.05), (35.10, 139.10), (35.011, 139.012)];
            let mut ts = 1_672_531_200; // 2023-01-01
            let points = steps
                .into_iter()
                .map(|(a, dt)| {
                    ts += dt;
                    checkin("u", anchors[a].0, anchors[a].1, ts)
                })
                .collect();
            raw(points)
        })
    }

    proptest! {
        #[test]
        fn clustering_invariants(t in arb_raw(), window in 1i64..1500) {
            let c = cluster_points(&t, 6, window).unwrap();
            prop_assert!(c.points.len() <= t.points.len());
            prop_assert_eq!(c.points.iter().map(|p| p.count as usize).sum::<usize>(), t.points.len());
            prop_assert_eq!(c.points.first().unwrap().t_start, t.points.first().unwrap().ts);
            prop_assert_eq!(c.points.last().unwrap().t_end, t.points.last().unwrap().ts);
            for w in c.points.windows(2) {
                prop_assert!(w[0].t_start <= w[1].t_start);
                prop_assert!(w[0].cell != w[1].cell || w[1].t_start - w[0].t_end > window);
            }
        }

        #[test]
        fn reclustering_representatives_is_identity(t in arb_raw(), window in 1i64..1500) {
            let c = cluster_points(&t, 6, window).unwrap();
            let reps: Vec<CheckIn> = c.points.iter().map(|p| CheckIn {
                user: "u".into(),
                point: decode_cell(&p.cell).center(),
                ts: p.t_start,
            }).collect();
            let again = cluster_points(&raw(reps), 6, window).unwrap();
            prop_assert_eq!(again.cells(), c.cells());
            prop_assert!(again.points.iter().all(|p| p.count == 1));
        }

        #[test]
        fn coarser_precision_never_helps_filter(t in arb_raw()) {
            let fine = cluster_points(&t, 6, 600).unwrap();
            let coarse = cluster_points(&t, 4, 600).unwrap();
            prop_assert!(coarse.distinct_cells() <= fine.distinct_cells());
            prop_assert!(coarse.points.len() <= fine.points.len());
            let rule = FilterRule::default();
            prop_assert!(rule.keeps(&fine) || !rule.keeps(&coarse));
        }
    }
}
