//! False-measurement theft scenarios and dataset pollution.
//!
//! Six tampering patterns cover the common ways a compromised meter
//! under-reports: global scaling, per-slot scaling, an outage interval,
//! constant mean reporting, scaled mean reporting, and full-day reversal
//! (shifting load into cheap tariff periods).

use rand::Rng;
use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataio::{DailyLoadVector, DatasetRole, Label, LabeledDataset, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Per-slot scaling bounds shared by H2 and H5.
pub const BETA_LOW: f64 = 0.1;
pub const BETA_HIGH: f64 = 0.8;

/// A concrete theft scenario with its drawn parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TheftScenario {
    /// Every slot scaled by one constant drawn from U(0.1, 0.8).
    H1 { alpha: f64 },
    /// Each slot scaled by an i.i.d. U(beta_low, beta_high) factor.
    H2 { beta_low: f64, beta_high: f64 },
    /// Zero reported consumption on the slot interval [t_start, t_end].
    H3 { t_start: usize, t_end: usize },
    /// Every slot reports the day's mean consumption.
    H4,
    /// Each slot reports an i.i.d. scaled fraction of the day's mean.
    H5 { beta_low: f64, beta_high: f64 },
    /// The day's readings in reverse slot order.
    H6,
}

/// Scenario family, used to draw fresh parameters per polluted record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    H1,
    H2,
    H3,
    H4,
    H5,
    H6,
}

pub const ALL_KINDS: [ScenarioKind; 6] = [
    ScenarioKind::H1,
    ScenarioKind::H2,
    ScenarioKind::H3,
    ScenarioKind::H4,
    ScenarioKind::H5,
    ScenarioKind::H6,
];

impl TheftScenario {
    pub fn h1(alpha: f64) -> Result<Self> {
        if !(0.1..=0.8).contains(&alpha) {
            return Err(Error::Validation(format!(
                "h1 alpha must lie in [0.1, 0.8], got {alpha}"
            )));
        }
        Ok(TheftScenario::H1 { alpha })
    }

    pub fn h3(t_start: usize, t_end: usize) -> Result<Self> {
        if t_start >= t_end || t_end > SLOTS_PER_DAY - 1 {
            return Err(Error::Validation(format!(
                "h3 interval [{t_start}, {t_end}] must satisfy 0 <= t_start < t_end <= 47"
            )));
        }
        Ok(TheftScenario::H3 { t_start, t_end })
    }

    /// Draw a scenario of the given kind with fresh parameters.
    ///
    /// H3's interval is unconstrained beyond non-emptiness, so the start is
    /// uniform over [0, 43] and the duration uniform over [4, 44] slots,
    /// clamped to the end of the day: at least a two-hour outage signature.
    pub fn sample(kind: ScenarioKind, rng: &mut impl Rng) -> Self {
        match kind {
            ScenarioKind::H1 => TheftScenario::H1 {
                alpha: rng.random_range(0.1..0.8),
            },
            ScenarioKind::H2 => TheftScenario::H2 {
                beta_low: BETA_LOW,
                beta_high: BETA_HIGH,
            },
            ScenarioKind::H3 => {
                let t_start = rng.random_range(0..=43usize);
                let duration = rng.random_range(4..=44usize);
                TheftScenario::H3 {
                    t_start,
                    t_end: (t_start + duration).min(SLOTS_PER_DAY - 1),
                }
            }
            ScenarioKind::H4 => TheftScenario::H4,
            ScenarioKind::H5 => TheftScenario::H5 {
                beta_low: BETA_LOW,
                beta_high: BETA_HIGH,
            },
            ScenarioKind::H6 => TheftScenario::H6,
        }
    }
}

/// Apply a theft scenario to one daily load vector. Per-slot draws (H2, H5)
/// come from `rng_seed`, so the result is deterministic.
pub fn apply_scenario(
    scenario: &TheftScenario,
    m: &DailyLoadVector,
    rng_seed: u64,
) -> DailyLoadVector {
    let readings = m.readings();
    let mut rng = stream_rng(rng_seed, 0);
    let out: Vec<f64> = match scenario {
        TheftScenario::H1 { alpha } => readings.iter().map(|r| alpha * r).collect(),
        TheftScenario::H2 { beta_low, beta_high } => readings
            .iter()
            .map(|r| rng.random_range(*beta_low..*beta_high) * r)
            .collect(),
        TheftScenario::H3 { t_start, t_end } => readings
            .iter()
            .enumerate()
            .map(|(t, r)| if (*t_start..=*t_end).contains(&t) { 0.0 } else { *r })
            .collect(),
        TheftScenario::H4 => {
            let mean = m.l1() / SLOTS_PER_DAY as f64;
            vec![mean; SLOTS_PER_DAY]
        }
        TheftScenario::H5 { beta_low, beta_high } => {
            let mean = m.l1() / SLOTS_PER_DAY as f64;
            (0..SLOTS_PER_DAY)
                .map(|_| rng.random_range(*beta_low..*beta_high) * mean)
                .collect()
        }
        TheftScenario::H6 => readings.iter().rev().copied().collect(),
    };
    DailyLoadVector::new(out, m.origin.clone())
        .expect("scenarios preserve length, finiteness and non-negativity")
}

// Final-shuffle substream, kept apart from the per-record substreams.
const SHUFFLE_STREAM: u64 = u64::MAX;

/// Pollute half of `normals` into theft records.
///
/// Exactly half the records (an odd trailing record is dropped) keep label 0;
/// the other half are each transformed by a scenario drawn uniformly from
/// H1..H6 with fresh per-record parameters and labeled 1. The output order is
/// shuffled by the seed.
pub fn pollute_dataset(
    normals: &[DailyLoadVector],
    seed: u64,
    role: DatasetRole,
) -> Result<LabeledDataset> {
    if normals.is_empty() {
        return Err(Error::Validation("cannot pollute an empty dataset".into()));
    }
    let n = normals.len() & !1; // even
    let half = n / 2;

    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM));
    }

    let mut samples: Vec<(DailyLoadVector, Label)> = Vec::with_capacity(n);
    for (j, &idx) in order.iter().enumerate() {
        if j < half {
            samples.push((normals[idx].clone(), Label::Normal));
        } else {
            let mut rec_rng = stream_rng(seed, (j - half) as u64);
            let kind = ALL_KINDS[rec_rng.random_range(0..ALL_KINDS.len())];
            let scenario = TheftScenario::sample(kind, &mut rec_rng);
            let rec_seed = rec_rng.next_u64();
            samples.push((apply_scenario(&scenario, &normals[idx], rec_seed), Label::Theft));
        }
    }

    {
        use rand::seq::SliceRandom;
        samples.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM - 1));
    }
    Ok(LabeledDataset { samples, role, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Origin;

    fn dlv(readings: Vec<f64>) -> DailyLoadVector {
        DailyLoadVector::new(readings, Origin::Unspecified).unwrap()
    }

    fn ramp() -> DailyLoadVector {
        dlv((0..SLOTS_PER_DAY).map(|i| 0.1 * i as f64).collect())
    }

    #[test]
    fn h1_scales_every_slot() {
        let m = dlv(vec![2.0; SLOTS_PER_DAY]);
        let out = apply_scenario(&TheftScenario::h1(0.5).unwrap(), &m, 0);
        assert_eq!(out.readings(), &[1.0; SLOTS_PER_DAY][..]);
    }

    #[test]
    fn h1_rejects_out_of_range_alpha() {
        assert!(TheftScenario::h1(0.05).is_err());
        assert!(TheftScenario::h1(0.9).is_err());
    }

    #[test]
    fn h3_full_interval_zeroes_the_day() {
        let out = apply_scenario(&TheftScenario::h3(0, 47).unwrap(), &ramp(), 0);
        assert!(out.readings().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn h3_is_identity_outside_the_interval() {
        let m = ramp();
        let out = apply_scenario(&TheftScenario::h3(10, 20).unwrap(), &m, 0);
        for t in 0..SLOTS_PER_DAY {
            if (10..=20).contains(&t) {
                assert_eq!(out.readings()[t], 0.0);
            } else {
                assert_eq!(out.readings()[t], m.readings()[t]);
            }
        }
    }

    #[test]
    fn h4_reports_the_mean_everywhere() {
        let m = dlv(vec![0.6; SLOTS_PER_DAY]);
        let out = apply_scenario(&TheftScenario::H4, &m, 0);
        for r in out.readings() {
            assert!((r - 0.6).abs() < 1e-12, "constant day keeps its mean, got {r}");
        }
        // L1 preserved exactly: mean times 48
        let m = ramp();
        let out = apply_scenario(&TheftScenario::H4, &m, 0);
        assert!((out.l1() - m.l1()).abs() < 1e-9);
    }

    #[test]
    fn h6_is_an_involution() {
        let m = ramp();
        let once = apply_scenario(&TheftScenario::H6, &m, 0);
        assert_eq!(once.readings()[0], m.readings()[47]);
        let twice = apply_scenario(&TheftScenario::H6, &once, 0);
        assert_eq!(twice, m);
        assert_eq!(once.l1(), m.l1());
    }

    #[test]
    fn h2_and_h5_stay_within_beta_bounds() {
        let s2 = TheftScenario::H2 { beta_low: BETA_LOW, beta_high: BETA_HIGH };
        let s5 = TheftScenario::H5 { beta_low: BETA_LOW, beta_high: BETA_HIGH };
        for trial in 0..1000u64 {
            let mut rng = stream_rng(7, trial);
            let m = dlv((0..SLOTS_PER_DAY).map(|_| rng.random_range(0.01..3.0)).collect());
            let out2 = apply_scenario(&s2, &m, trial);
            for (o, r) in out2.readings().iter().zip(m.readings()) {
                assert!(*o >= BETA_LOW * r && *o <= BETA_HIGH * r);
            }
            let mean = m.l1() / SLOTS_PER_DAY as f64;
            let out5 = apply_scenario(&s5, &m, trial);
            for o in out5.readings() {
                assert!(*o >= BETA_LOW * mean && *o <= BETA_HIGH * mean);
            }
        }
    }

    #[test]
    fn scenario_application_is_deterministic() {
        let m = ramp();
        let s = TheftScenario::H2 { beta_low: BETA_LOW, beta_high: BETA_HIGH };
        assert_eq!(apply_scenario(&s, &m, 11), apply_scenario(&s, &m, 11));
        assert_ne!(apply_scenario(&s, &m, 11), apply_scenario(&s, &m, 12));
    }

    #[test]
    fn pollution_halves_labels_exactly() {
        let normals: Vec<DailyLoadVector> = (0..1000)
            .map(|i| dlv(vec![0.2 + 0.001 * i as f64; SLOTS_PER_DAY]))
            .collect();
        let ds = pollute_dataset(&normals, 3, DatasetRole::Defender).unwrap();
        assert_eq!(ds.len(), 1000);
        let thefts = ds.samples.iter().filter(|(_, l)| *l == Label::Theft).count();
        assert_eq!(thefts, 500);
    }

    #[test]
    fn minimal_pollution_case() {
        let normals = vec![dlv(vec![0.5; SLOTS_PER_DAY]); 2];
        let ds = pollute_dataset(&normals, 1, DatasetRole::Defender).unwrap();
        assert_eq!(ds.len(), 2);
        let normal: Vec<_> = ds.samples.iter().filter(|(_, l)| *l == Label::Normal).collect();
        let theft: Vec<_> = ds.samples.iter().filter(|(_, l)| *l == Label::Theft).collect();
        assert_eq!((normal.len(), theft.len()), (1, 1));
        assert_eq!(normal[0].0.readings(), &[0.5; SLOTS_PER_DAY][..]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            pollute_dataset(&[], 0, DatasetRole::Defender),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn pollution_is_deterministic_per_seed() {
        let normals: Vec<DailyLoadVector> = (0..100)
            .map(|i| dlv(vec![0.2 + 0.01 * i as f64; SLOTS_PER_DAY]))
            .collect();
        let a = pollute_dataset(&normals, 42, DatasetRole::Attacker).unwrap();
        let b = pollute_dataset(&normals, 42, DatasetRole::Attacker).unwrap();
        assert_eq!(a, b);
    }

    // Oracle: with k scenarios drawn uniformly for c records, each count is
    // Binomial(c, 1/6) with mean c/6 and sigma = sqrt(c * 1/6 * 5/6).
    #[test]
    fn scenario_mixture_is_uniform_within_3_sigma() {
        let c = 60_000usize;
        let mut counts = [0usize; 6];
        for j in 0..c {
            let mut rng = stream_rng(99, j as u64);
            let kind = ALL_KINDS[rng.random_range(0..ALL_KINDS.len())];
            counts[ALL_KINDS.iter().position(|k| *k == kind).unwrap()] += 1;
        }
        let mean = c as f64 / 6.0;
        let sigma = (c as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for (i, &cnt) in counts.iter().enumerate() {
            assert!(
                (cnt as f64 - mean).abs() <= 3.0 * sigma,
                "scenario h{} count {cnt} outside 3 sigma of {mean}",
                i + 1
            );
        }
    }

    #[test]
    fn l1_shrinks_or_is_preserved_per_scenario_family() {
        for trial in 0..200u64 {
            let mut rng = stream_rng(5, trial);
            let m = dlv((0..SLOTS_PER_DAY).map(|_| rng.random_range(0.0..2.0)).collect());
            for kind in ALL_KINDS {
                let s = TheftScenario::sample(kind, &mut rng);
                let out = apply_scenario(&s, &m, trial);
                assert!(out.readings().iter().all(|&r| r >= 0.0 && r.is_finite()));
                match kind {
                    ScenarioKind::H1 | ScenarioKind::H2 | ScenarioKind::H3 => {
                        assert!(out.l1() <= m.l1() + 1e-12)
                    }
                    ScenarioKind::H4 | ScenarioKind::H6 => {
                        assert!((out.l1() - m.l1()).abs() < 1e-9)
                    }
                    ScenarioKind::H5 => {
                        assert!(out.l1() <= BETA_HIGH * m.l1() + 1e-12)
                    }
                }
            }
        }
    }
}
