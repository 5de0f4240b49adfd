//! Seeded synthetic check-in generator.
//!
//! Every user owns a handful of anchors: a private home, a workplace drawn
//! from a shared pool and leisure venues drawn from another shared pool.
//! Movement between anchors is a first-order Markov chain whose transition
//! matrix depends on the local time of day (home-heavy at night, work-heavy
//! in the morning). Check-in times follow a Poisson process and positions
//! get isotropic Gaussian jitter around the anchor.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{CheckIn, YearMonth};
use crate::error::{Error, Result};
use crate::geocell::GeoPoint;

const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub months: u32,
    /// First simulated month, `YYYY-MM`.
    pub start_month: String,
    pub bbox: SynthBox,
    pub anchors_per_user: usize,
    pub checkins_per_day: f64,
    pub jitter_m: f64,
    /// Shared workplace pool size; 0 draws workplaces uniformly in the box.
    pub n_workplaces: usize,
    /// Shared leisure venue pool size; 0 draws venues uniformly in the box.
    pub n_venues: usize,
    /// Probability of staying at the current anchor on the next check-in.
    pub stay_prob: f64,
    /// Offset of local time from UTC, used for the time-of-day routine.
    pub utc_offset_hours: i32,
    /// Explicit anchors shared by every user; overrides sampling when set.
    pub anchors: Option<Vec<[f64; 2]>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            months: 12,
            start_month: "2022-07".into(),
            bbox: SynthBox {
                lat_min: 35.60,
                lat_max: 35.80,
                lon_min: 139.60,
                lon_max: 139.85,
            },
            anchors_per_user: 5,
            checkins_per_day: 3.0,
            jitter_m: 100.0,
            n_workplaces: 15,
            n_venues: 25,
            stay_prob: 0.3,
            utc_offset_hours: 9,
            anchors: None,
        }
    }
}

// Destination preference by anchor role: home, work, then leisure venues
// share the remainder evenly.
const MORNING: [f64; 2] = [0.15, 0.60];
const AFTERNOON: [f64; 2] = [0.15, 0.45];
const EVENING: [f64; 2] = [0.65, 0.05];

fn preference(local_hour: u32, k: usize) -> Vec<f64> {
    let base = match local_hour {
        6..=11 => MORNING,
        12..=17 => AFTERNOON,
        _ => EVENING,
    };
    let mut p = vec![0.0; k];
    match k {
        1 => p[0] = 1.0,
        2 => {
            let s = base[0] + base[1];
            p[0] = base[0] / s;
            p[1] = base[1] / s;
        }
        _ => {
            p[0] = base[0];
            p[1] = base[1];
            let rest = (1.0 - base[0] - base[1]) / (k - 2) as f64;
            p[2..].iter_mut().for_each(|x| *x = rest);
        }
    }
    p
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        let finite = [b.lat_min, b.lat_max, b.lon_min, b.lon_max].iter().all(|v| v.is_finite());
        if !finite
            || !(b.lat_min < b.lat_max && b.lon_min < b.lon_max)
            || b.lat_min < -90.0
            || b.lat_max > 90.0
            || b.lon_min < -180.0
            || b.lon_max > 180.0
        {
            return Err(Error::input(format!("degenerate bounding box {b:?}")));
        }
        if self.n_users == 0 || self.months == 0 || self.anchors_per_user == 0 {
            return Err(Error::input("n_users, months and anchors_per_user must be positive"));
        }
        if !(self.checkins_per_day > 0.0) || !(self.jitter_m >= 0.0) {
            return Err(Error::input("checkins_per_day must be positive and jitter_m non-negative"));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return Err(Error::input("stay_prob must lie in [0, 1]"));
        }
        if let Some(a) = &self.anchors {
            if a.is_empty() {
                return Err(Error::input("explicit anchor list is empty"));
            }
            for &[lat, lon] in a {
                GeoPoint::new(lat, lon)?;
            }
        }
        self.start_month.parse::<YearMonth>()?;
        Ok(())
    }

    fn uniform_point(&self, rng: &mut impl Rng) -> [f64; 2] {
        let b = &self.bbox;
        [rng.gen_range(b.lat_min..b.lat_max), rng.gen_range(b.lon_min..b.lon_max)]
    }
}

/// Generates check-ins sorted by `(user, ts)`; identical seeds give identical
/// output.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<CheckIn>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let workplaces: Vec<[f64; 2]> = (0..config.n_workplaces).map(|_| config.uniform_point(&mut rng)).collect();
    let venues: Vec<[f64; 2]> = (0..config.n_venues).map(|_| config.uniform_point(&mut rng)).collect();

    let start: YearMonth = config.start_month.parse()?;
    let mut end = start;
    for _ in 0..config.months {
        end = end.next();
    }
    let (t0, t1) = (start.start_ts(), end.start_ts());
    let gap = Exp::new(config.checkins_per_day / 86_400.0).map_err(|e| Error::input(e.to_string()))?;
    let jitter = Normal::new(0.0, config.jitter_m.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::input(e.to_string()))?;
    let width = (config.n_users.max(1) - 1).to_string().len().max(5);

    let mut out = Vec::new();
    for u in 0..config.n_users {
        let user = format!("u{u:0width$}");
        let anchors: Vec<[f64; 2]> = match &config.anchors {
            Some(a) => a.clone(),
            None => {
                let k = config.anchors_per_user;
                let mut a = Vec::with_capacity(k);
                a.push(config.uniform_point(&mut rng));
                if k > 1 {
                    a.push(if workplaces.is_empty() {
                        config.uniform_point(&mut rng)
                    } else {
                        workplaces[rng.gen_range(0..workplaces.len())]
                    });
                }
                let n_leisure = k.saturating_sub(2);
                if venues.len() >= n_leisure {
                    a.extend(sample(&mut rng, venues.len(), n_leisure).iter().map(|i| venues[i]));
                } else {
                    a.extend((0..n_leisure).map(|_| config.uniform_point(&mut rng)));
                }
                a
            }
        };

        let k = anchors.len();
        let mut current = 0usize;
        let mut t = t0 as f64;
        loop {
            t += gap.sample(&mut rng);
            let ts = t.floor() as i64;
            if ts >= t1 {
                break;
            }
            let local_hour = ((ts + config.utc_offset_hours as i64 * 3600).rem_euclid(86_400) / 3600) as u32;
            let pref = preference(local_hour, k);
            let row: Vec<f64> = (0..k)
                .map(|j| {
                    let stay = if j == current { config.stay_prob } else { 0.0 };
                    stay + (1.0 - config.stay_prob) * pref[j]
                })
                .collect();
            current = sample_categorical(&mut rng, &row);

            let [lat, lon] = anchors[current];
            let (dn, de) = if config.jitter_m > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let lat = (lat + dn / METERS_PER_DEGREE).clamp(-90.0, 90.0);
            let lon_scale = METERS_PER_DEGREE * lat.to_radians().cos().max(1e-6);
            let lon = (lon + de / lon_scale).clamp(-180.0, 180.0);
            out.push(CheckIn {
                user: user.clone(),
                point: GeoPoint::new(lat, lon)?,
                ts,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{assemble_monthly, cluster_points, filter_trajectories, FilterRule};

    fn surviving(cfg: &SynthConfig, seed: u64) -> Vec<(String, usize)> {
        let cs = synth_generate(cfg, seed).unwrap();
        let clustered: Vec<_> = assemble_monthly(&cs)
            .unwrap()
            .iter()
            .map(|t| cluster_points(t, 6, 600).unwrap())
            .collect();
        filter_trajectories(clustered, FilterRule::default())
            .into_iter()
            .map(|t| (t.user.unwrap(), t.points.len()))
            .collect()
    }

    #[test]
    fn dense_users_survive_filter() {
        let cfg = SynthConfig {
            n_users: 2,
            months: 1,
            checkins_per_day: 10.0,
            ..Default::default()
        };
        let cs = synth_generate(&cfg, 1).unwrap();
        for u in ["u00000", "u00001"] {
            let n = cs.iter().filter(|c| c.user == u).count();
            assert!(n >= 250, "{u}: {n} check-ins");
        }
        let kept = surviving(&cfg, 1);
        for u in ["u00000", "u00001"] {
            assert!(kept.iter().any(|(k, _)| k == u), "{u} filtered out");
        }
    }

    #[test]
    fn identical_anchors_are_filtered() {
        let cfg = SynthConfig {
            n_users: 3,
            months: 1,
            checkins_per_day: 10.0,
            jitter_m: 0.0,
            anchors: Some(vec![[35.7, 139.7]; 5]),
            ..Default::default()
        };
        assert!(surviving(&cfg, 5).is_empty());
    }

    #[test]
    fn deterministic_and_sorted() {
        let cfg = SynthConfig {
            n_users: 4,
            months: 2,
            ..Default::default()
        };
        let a = synth_generate(&cfg, 9).unwrap();
        assert_eq!(a, synth_generate(&cfg, 9).unwrap());
        assert_ne!(a, synth_generate(&cfg, 10).unwrap());
        assert!(a.windows(2).all(|w| (&w[0].user, w[0].ts) <= (&w[1].user, w[1].ts)));
        let b = &cfg.bbox;
        // jitter can leave the box by a few hundred meters at most
        assert!(a.iter().all(|c| (b.lat_min - 0.02..=b.lat_max + 0.02).contains(&c.point.lat())));
    }

    #[test]
    fn degenerate_box_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.bbox.lat_max = cfg.bbox.lat_min;
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let cfg: SynthConfig = serde_json::from_str(r#"{"n_users": 7}"#).unwrap();
        assert_eq!(cfg.n_users, 7);
        assert_eq!(cfg.months, SynthConfig::default().months);
        assert!(serde_json::from_str::<SynthConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn preferences_are_distributions() {
        for h in 0..24 {
            for k in 1..8 {
                let p = preference(h, k);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
