//! Smart-meter data ingestion and synthesis.
//!
//! Raw half-hourly readings are parsed from file, regulated into clean
//! 48-slot daily load vectors, sampled into working sets, and persisted as
//! labeled CSV datasets. When real meter data is unavailable a two-peak
//! diurnal generator synthesizes normal consumption profiles calibrated to
//! a configurable mean daily total.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Half-hour slots in a day.
pub const SLOTS_PER_DAY: usize = 48;

/// Where a daily load vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    RealMeter { meter_id: String, day_index: u32 },
    Synthetic { seed: u64 },
    /// Loaded from a dataset file, which does not persist provenance.
    Unspecified,
}

/// 48 non-negative half-hourly kWh readings; the universal sample unit.
///
/// Equality compares readings only; `origin` is provenance metadata and is
/// not persisted by the dataset CSV format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DailyLoadVector {
    readings: Vec<f64>,
    pub origin: Origin,
}

impl PartialEq for DailyLoadVector {
    fn eq(&self, other: &Self) -> bool {
        self.readings == other.readings
    }
}

impl DailyLoadVector {
    pub fn new(readings: Vec<f64>, origin: Origin) -> Result<Self> {
        if readings.len() != SLOTS_PER_DAY {
            return Err(Error::Validation(format!(
                "daily load vector needs {} readings, got {}",
                SLOTS_PER_DAY,
                readings.len()
            )));
        }
        if let Some(bad) = readings.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return Err(Error::Validation(format!(
                "readings must be finite and non-negative, got {bad}"
            )));
        }
        Ok(Self { readings, origin })
    }

    /// Skip the non-negativity check; for numeric oracles that probe the
    /// loss off the feasible set.
    pub(crate) fn new_unchecked(readings: Vec<f64>) -> Self {
        Self {
            readings,
            origin: Origin::Unspecified,
        }
    }

    pub fn readings(&self) -> &[f64] {
        &self.readings
    }

    /// Sum of the 48 readings; proportional to the billed consumption.
    pub fn l1(&self) -> f64 {
        self.readings.iter().sum()
    }
}

/// Sample label: 0 = genuine consumption, 1 = theft (false measurement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Normal = 0,
    Theft = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Defender,
    Attacker,
}

/// Collection of labeled daily load vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<(DailyLoadVector, Label)>,
    pub role: DatasetRole,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean L1-norm of the label-0 samples.
    pub fn normal_avg_l1(&self) -> Option<f64> {
        let normals: Vec<f64> = self
            .samples
            .iter()
            .filter(|(_, l)| *l == Label::Normal)
            .map(|(v, _)| v.l1())
            .collect();
        if normals.is_empty() {
            None
        } else {
            Some(normals.iter().sum::<f64>() / normals.len() as f64)
        }
    }
}

/// One raw half-hourly measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterReadingRecord {
    pub meter_id: String,
    pub day_index: u32,
    /// Half-hour of day, 0..=47.
    pub slot: u8,
    pub kwh: f64,
}

/// Input file layout for [`parse_meter_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadingsFormat {
    /// Whitespace-separated `meter_id code kwh` where the 5-digit code packs
    /// the day number (first 3 digits) and a 1-based half-hour index
    /// (last 2 digits).
    Issda,
    /// CSV with header `meter_id,day_index,slot,kwh`, slot 0-based.
    Canonical,
}

pub const CANONICAL_READINGS_HEADER: &str = "meter_id,day_index,slot,kwh";

/// Result of parsing a readings file. Malformed lines are counted, not fatal.
#[derive(Debug)]
pub struct ParsedReadings {
    pub records: Vec<MeterReadingRecord>,
    pub malformed_lines: usize,
}

/// Parse a raw readings file in the given format.
///
/// Returns a format error when more than half of the non-empty lines are
/// malformed, which almost always means the wrong format flag.
pub fn parse_meter_csv(path: &Path, format: ReadingsFormat) -> Result<ParsedReadings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut malformed = 0usize;
    let mut data_lines = 0usize;

    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && format == ReadingsFormat::Canonical && line == CANONICAL_READINGS_HEADER {
            continue;
        }
        data_lines += 1;
        match parse_line(line, format) {
            Some(rec) => records.push(rec),
            None => malformed += 1,
        }
    }

    if data_lines > 0 && malformed * 2 > data_lines {
        return Err(Error::Format(format!(
            "{malformed} of {data_lines} lines malformed in {}; wrong --format flag?",
            path.display()
        )));
    }
    Ok(ParsedReadings {
        records,
        malformed_lines: malformed,
    })
}

fn parse_line(line: &str, format: ReadingsFormat) -> Option<MeterReadingRecord> {
    match format {
        ReadingsFormat::Issda => {
            let mut it = line.split_whitespace();
            let meter_id = it.next()?.to_string();
            let code: u32 = it.next()?.parse().ok()?;
            let kwh: f64 = it.next()?.parse().ok()?;
            if it.next().is_some() || !(10000..=99999).contains(&code) {
                return None;
            }
            let slot_code = code % 100;
            if !(1..=48).contains(&slot_code) {
                return None;
            }
            if !kwh.is_finite() || kwh < 0.0 {
                return None;
            }
            Some(MeterReadingRecord {
                meter_id,
                day_index: code / 100,
                slot: (slot_code - 1) as u8,
                kwh,
            })
        }
        ReadingsFormat::Canonical => {
            let mut it = line.split(',');
            let meter_id = it.next()?.trim().to_string();
            let day_index: u32 = it.next()?.trim().parse().ok()?;
            let slot: u8 = it.next()?.trim().parse().ok()?;
            let kwh: f64 = it.next()?.trim().parse().ok()?;
            if it.next().is_some() || meter_id.is_empty() || slot >= SLOTS_PER_DAY as u8 {
                return None;
            }
            if !kwh.is_finite() || kwh < 0.0 {
                return None;
            }
            Some(MeterReadingRecord {
                meter_id,
                day_index,
                slot,
                kwh,
            })
        }
    }
}

/// Result of regulating raw records into daily vectors.
#[derive(Debug)]
pub struct RegulatedDays {
    pub vectors: Vec<DailyLoadVector>,
    /// (meter, day) groups dropped for missing or duplicate slots.
    pub dropped_groups: usize,
}

/// Group records by (meter, day) and emit one slot-ordered vector per group
/// that has exactly one reading for each of the 48 slots. Incomplete or
/// duplicated days are dropped and counted.
pub fn regulate_daily(records: &[MeterReadingRecord]) -> RegulatedDays {
    let mut groups: BTreeMap<(&str, u32), Vec<Option<f64>>> = BTreeMap::new();
    let mut spoiled: BTreeMap<(&str, u32), ()> = BTreeMap::new();

    for rec in records {
        let key = (rec.meter_id.as_str(), rec.day_index);
        let slots = groups.entry(key).or_insert_with(|| vec![None; SLOTS_PER_DAY]);
        let cell = &mut slots[rec.slot as usize];
        if cell.is_some() {
            spoiled.insert(key, ()); // duplicate slot
        } else {
            *cell = Some(rec.kwh);
        }
    }

    let mut vectors = Vec::new();
    let mut dropped = 0usize;
    for (key, slots) in &groups {
        if spoiled.contains_key(key) || slots.iter().any(|s| s.is_none()) {
            dropped += 1;
            continue;
        }
        let readings: Vec<f64> = slots.iter().map(|s| s.unwrap()).collect();
        let origin = Origin::RealMeter {
            meter_id: key.0.to_string(),
            day_index: key.1,
        };
        match DailyLoadVector::new(readings, origin) {
            Ok(v) => vectors.push(v),
            Err(_) => dropped += 1,
        }
    }
    RegulatedDays {
        vectors,
        dropped_groups: dropped,
    }
}

/// Uniform sample of `n` vectors without replacement, deterministic per seed.
pub fn sample_records(
    daily: &[DailyLoadVector],
    n: usize,
    seed: u64,
) -> Result<Vec<DailyLoadVector>> {
    if n > daily.len() {
        return Err(Error::Validation(format!(
            "cannot sample {n} records from a pool of {}",
            daily.len()
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let picked = rand::seq::index::sample(&mut rng, daily.len(), n);
    Ok(picked.iter().map(|i| daily[i].clone()).collect())
}

/// Shape of the synthetic normal-consumption generator.
///
/// Each day is `household_scale * template[slot] * noise`, where the template
/// is a base load plus morning and evening Gaussian bumps normalized so its
/// daily total equals `target_daily_kwh`, the household scale is drawn once
/// per simulated household, and the noise is per-slot multiplicative
/// log-normal with mean 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticProfileConfig {
    pub target_daily_kwh: f64,
    pub base_level: f64,
    pub morning_peak_slot: f64,
    pub morning_peak_width: f64,
    pub morning_peak_amp: f64,
    pub evening_peak_slot: f64,
    pub evening_peak_width: f64,
    pub evening_peak_amp: f64,
    /// Log-normal sigma of the per-slot noise; 0 disables noise.
    pub noise_sigma: f64,
    /// Lag-1 autocorrelation of the log-noise on occupied days: consumption
    /// persists across adjacent half-hours (an oven stays on, a shower spans
    /// slots), so the noise is smooth rather than white.
    pub noise_rho: f64,
    /// Log-normal sigma of the per-household scale; 0 disables it.
    pub household_sigma: f64,
    /// How strongly each household's diurnal shape deviates from the base
    /// template (peak positions, widths and amplitudes); 0 disables it.
    /// Real households differ widely in when and how sharply they consume.
    pub household_shape_jitter: f64,
    /// Fraction of households on shifted schedules (night workers): their
    /// whole profile is circularly rotated by a random number of slots, so
    /// high consumption can legitimately fall anywhere in the day.
    pub household_rotate_prob: f64,
    pub days_per_household: usize,
    /// Probability that a day is a low-usage "away" day (appliances on
    /// standby, nobody home): the whole profile collapses to a small
    /// fraction of its usual level. Real consumption data contains such
    /// days, so genuinely normal records exist at low L1 too.
    pub away_day_prob: f64,
    /// Away-day level range as a fraction of the usual profile.
    pub away_scale_low: f64,
    pub away_scale_high: f64,
    /// Thermostat-driven burst on away days: a cyclic appliance (water
    /// heater, heat pump) fires once at a random slot, drawing a roughly
    /// fixed energy regardless of occupancy. Range of the burst in kWh.
    pub away_burst_low_kwh: f64,
    pub away_burst_high_kwh: f64,
    /// Probability that an away day carries bursts at all; the rest are
    /// fully shut down (main breaker off), leaving only standby noise.
    pub away_burst_prob: f64,
    /// Maximum number of burst firings per away day (1..=max, uniform).
    pub away_burst_max_count: usize,
    /// Log-normal sigma of away-day standby noise. Standby draws come from
    /// short uncoordinated duty cycles, so they are spikier than occupied
    /// consumption: a few slots carry most of the energy.
    pub away_noise_sigma: f64,
    /// Meter register resolution: readings are rounded to this step, so
    /// low-usage slots legitimately report exactly 0 kWh. 0 disables
    /// quantization.
    pub meter_resolution_kwh: f64,
}

impl Default for SyntheticProfileConfig {
    fn default() -> Self {
        // Two-peak diurnal shape; totals are normalized to the target, so the
        // bump amplitudes only set relative shape. The evening peak is kept
        // larger than the morning one so a reversed day is distinguishable.
        Self {
            target_daily_kwh: 35.0,
            base_level: 0.25,
            morning_peak_slot: 15.0,
            morning_peak_width: 2.5,
            morning_peak_amp: 0.9,
            evening_peak_slot: 38.0,
            evening_peak_width: 3.5,
            evening_peak_amp: 1.6,
            noise_sigma: 0.35,
            noise_rho: 0.8,
            household_sigma: 0.25,
            household_shape_jitter: 1.0,
            household_rotate_prob: 0.2,
            days_per_household: 30,
            away_day_prob: 0.22,
            away_scale_low: 0.002,
            away_scale_high: 0.15,
            away_burst_low_kwh: 0.17,
            away_burst_high_kwh: 0.21,
            away_burst_prob: 0.9,
            away_burst_max_count: 3,
            away_noise_sigma: 0.4,
            meter_resolution_kwh: 0.0,
        }
    }
}

impl SyntheticProfileConfig {
    /// Deterministic per-slot template, normalized to the daily target.
    pub fn template(&self) -> [f64; SLOTS_PER_DAY] {
        self.shaped_template(
            self.morning_peak_slot,
            self.morning_peak_width,
            self.morning_peak_amp,
            self.evening_peak_slot,
            self.evening_peak_width,
            self.evening_peak_amp,
        )
    }

    fn shaped_template(
        &self,
        morning_slot: f64,
        morning_width: f64,
        morning_amp: f64,
        evening_slot: f64,
        evening_width: f64,
        evening_amp: f64,
    ) -> [f64; SLOTS_PER_DAY] {
        let mut t = [0.0; SLOTS_PER_DAY];
        for (s, v) in t.iter_mut().enumerate() {
            let x = s as f64;
            let morning =
                morning_amp * (-(x - morning_slot).powi(2) / (2.0 * morning_width.powi(2))).exp();
            let evening =
                evening_amp * (-(x - evening_slot).powi(2) / (2.0 * evening_width.powi(2))).exp();
            *v = self.base_level + morning + evening;
        }
        let total: f64 = t.iter().sum();
        for v in t.iter_mut() {
            *v *= self.target_daily_kwh / total;
        }
        t
    }

    /// Per-household template: peak timings, widths and amplitudes are
    /// jittered around the base shape by `household_shape_jitter`.
    fn household_template(&self, rng: &mut impl Rng) -> [f64; SLOTS_PER_DAY] {
        let j = self.household_shape_jitter;
        if j == 0.0 {
            return self.template();
        }
        let morning_slot = self.morning_peak_slot + rng.random_range(-3.0..3.0) * j;
        let morning_width = self.morning_peak_width * (rng.random_range(-0.5..0.5) * j).exp();
        let morning_amp = self.morning_peak_amp * (rng.random_range(-0.7..0.7) * j).exp();
        let evening_slot = self.evening_peak_slot + rng.random_range(-4.0..4.0) * j;
        let evening_width = self.evening_peak_width * (rng.random_range(-0.5..0.5) * j).exp();
        let evening_amp = self.evening_peak_amp * (rng.random_range(-0.7..0.7) * j).exp();
        let mut t = self.shaped_template(
            morning_slot,
            morning_width,
            morning_amp,
            evening_slot,
            evening_width,
            evening_amp,
        );
        if rng.random::<f64>() < self.household_rotate_prob {
            let shift = rng.random_range(1..SLOTS_PER_DAY);
            t.rotate_right(shift);
        }
        t
    }
}

// Substream offset separating per-household draws from per-day draws.
const HOUSEHOLD_STREAM_BASE: u64 = 1 << 62;

/// Mean-1 log-normal factor, or exactly 1 when sigma is 0.
fn lognormal_factor(sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        LogNormal::new(-sigma * sigma / 2.0, sigma)
            .expect("sigma is finite and positive")
            .sample(rng)
    }
}

/// Mean-1 log-normal noise sequence whose log follows an AR(1) process with
/// lag-1 correlation `rho`; `rho = 0` gives independent draws.
fn correlated_lognormal(sigma: f64, rho: f64, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0; len];
    }
    let gauss = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let innovation = (1.0 - rho * rho).max(0.0).sqrt();
    let mut z: f64 = gauss.sample(rng);
    (0..len)
        .map(|i| {
            if i > 0 {
                z = rho * z + innovation * gauss.sample(rng);
            }
            (sigma * z - sigma * sigma / 2.0).exp()
        })
        .collect()
}

/// Synthesize `count` normal daily load vectors, reproducible per seed.
pub fn generate_synthetic_normals(
    count: usize,
    seed: u64,
    profile: &SyntheticProfileConfig,
) -> Result<Vec<DailyLoadVector>> {
    if count == 0 {
        return Err(Error::Validation("count must be at least 1".into()));
    }
    let days_per_household = profile.days_per_household.max(1);
    let mut out = Vec::with_capacity(count);
    let mut household_state: Option<(u64, f64, [f64; SLOTS_PER_DAY])> = None;
    for i in 0..count {
        let household = (i / days_per_household) as u64;
        if household_state.map_or(true, |(h, _, _)| h != household) {
            let mut hh_rng = stream_rng(seed, HOUSEHOLD_STREAM_BASE + household);
            let scale = lognormal_factor(profile.household_sigma, &mut hh_rng);
            household_state = Some((household, scale, profile.household_template(&mut hh_rng)));
        }
        let (_, scale, template) = household_state.as_ref().expect("state set above");
        let (scale, template) = (*scale, *template);
        let mut day_rng = stream_rng(seed, i as u64);
        // Away-day level is log-uniform: the gap between "on vacation with
        // the fridge running" and "a quiet day at home" spans more than an
        // order of magnitude, so low levels are as common as moderate ones.
        let away = if day_rng.random::<f64>() < profile.away_day_prob {
            (day_rng
                .random_range(profile.away_scale_low.ln()..profile.away_scale_high.ln()))
            .exp()
        } else {
            1.0
        };
        // Both occupied and away days carry smooth (AR(1)-correlated)
        // multiplicative noise; away days just allow a wider spread.
        let noise: Vec<f64> = if away < 1.0 {
            correlated_lognormal(
                profile.away_noise_sigma,
                profile.noise_rho,
                SLOTS_PER_DAY,
                &mut day_rng,
            )
        } else {
            correlated_lognormal(
                profile.noise_sigma,
                profile.noise_rho,
                SLOTS_PER_DAY,
                &mut day_rng,
            )
        };
        let mut readings: Vec<f64> = template
            .iter()
            .zip(noise.iter())
            .map(|(&t, &n)| {
                let raw = (t * scale * away * n).max(0.0);
                if profile.meter_resolution_kwh > 0.0 {
                    (raw / profile.meter_resolution_kwh).round() * profile.meter_resolution_kwh
                } else {
                    raw
                }
            })
            .collect();
        if away < 1.0
            && profile.away_burst_high_kwh > 0.0
            && day_rng.random::<f64>() < profile.away_burst_prob
        {
            let count = day_rng.random_range(1..=profile.away_burst_max_count.max(1));
            for _ in 0..count {
                let slot = day_rng.random_range(0..SLOTS_PER_DAY);
                readings[slot] += day_rng
                    .random_range(profile.away_burst_low_kwh..profile.away_burst_high_kwh);
            }
        }
        out.push(DailyLoadVector::new(
            readings,
            Origin::Synthetic { seed: i as u64 },
        )?);
    }
    Ok(out)
}

fn dataset_header() -> String {
    let mut h = String::from("label");
    for i in 0..SLOTS_PER_DAY {
        let _ = write!(h, ",r{i}");
    }
    h
}

/// Write a dataset as CSV with header `label,r0,...,r47`. Readings are
/// written in shortest round-trip decimal form, so save/load is lossless.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = dataset_header();
    out.push('\n');
    for (vector, label) in &ds.samples {
        let _ = write!(out, "{}", label.as_u8());
        for r in vector.readings() {
            let _ = write!(out, ",{r}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load a dataset CSV written by [`save_dataset`]. Any arity, label-domain,
/// or reading-domain violation is a format error.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))?;
    if header != dataset_header() {
        return Err(Error::Format(format!(
            "{}: bad header, expected `label,r0,...,r47`",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != SLOTS_PER_DAY + 1 {
            return Err(Error::Format(format!(
                "{}:{}: expected {} columns, got {}",
                path.display(),
                lineno + 2,
                SLOTS_PER_DAY + 1,
                fields.len()
            )));
        }
        let label = match fields[0] {
            "0" => Label::Normal,
            "1" => Label::Theft,
            other => {
                return Err(Error::Format(format!(
                    "{}:{}: label must be 0 or 1, got {other}",
                    path.display(),
                    lineno + 2
                )))
            }
        };
        let mut readings = Vec::with_capacity(SLOTS_PER_DAY);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Format(format!(
                    "{}:{}: unparseable reading `{f}`",
                    path.display(),
                    lineno + 2
                ))
            })?;
            readings.push(v);
        }
        let vector = DailyLoadVector::new(readings, Origin::Unspecified)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 2)))?;
        samples.push((vector, label));
    }
    Ok(LabeledDataset {
        samples,
        role: DatasetRole::Defender,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vec_of(vals: [f64; 3]) -> DailyLoadVector {
        let mut readings = vec![0.1; SLOTS_PER_DAY];
        readings[..3].copy_from_slice(&vals);
        DailyLoadVector::new(readings, Origin::Unspecified).unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn issda_line_parses_with_zero_based_slot() {
        let f = write_tmp("1392 19503 0.14\n");
        let parsed = parse_meter_csv(f.path(), ReadingsFormat::Issda).unwrap();
        assert_eq!(parsed.malformed_lines, 0);
        assert_eq!(
            parsed.records,
            vec![MeterReadingRecord {
                meter_id: "1392".into(),
                day_index: 195,
                slot: 2,
                kwh: 0.14
            }]
        );
    }

    #[test]
    fn canonical_line_is_identity_parse() {
        let f = write_tmp("meter_id,day_index,slot,kwh\nm1,0,0,0.0\n");
        let parsed = parse_meter_csv(f.path(), ReadingsFormat::Canonical).unwrap();
        assert_eq!(
            parsed.records,
            vec![MeterReadingRecord {
                meter_id: "m1".into(),
                day_index: 0,
                slot: 0,
                kwh: 0.0
            }]
        );
    }

    #[test]
    fn negative_kwh_counts_as_malformed() {
        let f = write_tmp("meter_id,day_index,slot,kwh\nm1,0,0,-0.5\nm1,0,1,0.2\nm1,0,2,0.3\n");
        let parsed = parse_meter_csv(f.path(), ReadingsFormat::Canonical).unwrap();
        assert_eq!(parsed.malformed_lines, 1);
        assert_eq!(parsed.records.len(), 2);
    }

    #[test]
    fn mostly_malformed_file_is_a_format_error() {
        let f = write_tmp("garbage\nmore garbage\n1392 19503 0.14\n");
        assert!(matches!(
            parse_meter_csv(f.path(), ReadingsFormat::Issda),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = parse_meter_csv(Path::new("/nonexistent/x"), ReadingsFormat::Issda).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn day_records(meter: &str, day: u32, slots: impl Iterator<Item = u8>) -> Vec<MeterReadingRecord> {
        slots
            .map(|s| MeterReadingRecord {
                meter_id: meter.into(),
                day_index: day,
                slot: s,
                kwh: 0.01 * s as f64,
            })
            .collect()
    }

    #[test]
    fn complete_day_emits_slot_ordered_vector() {
        let mut recs = day_records("m1", 5, (0..48).rev());
        recs.rotate_left(7);
        let reg = regulate_daily(&recs);
        assert_eq!(reg.dropped_groups, 0);
        assert_eq!(reg.vectors.len(), 1);
        let v = &reg.vectors[0];
        for s in 0..SLOTS_PER_DAY {
            assert_eq!(v.readings()[s], 0.01 * s as f64);
        }
        assert_eq!(
            v.origin,
            Origin::RealMeter {
                meter_id: "m1".into(),
                day_index: 5
            }
        );
    }

    #[test]
    fn incomplete_day_is_dropped_and_counted() {
        let recs = day_records("m2", 5, 0..47);
        let reg = regulate_daily(&recs);
        assert!(reg.vectors.is_empty());
        assert_eq!(reg.dropped_groups, 1);
    }

    #[test]
    fn duplicate_slot_drops_the_day() {
        let mut recs = day_records("m1", 5, 0..48);
        recs.push(recs[3].clone());
        let reg = regulate_daily(&recs);
        assert!(reg.vectors.is_empty());
        assert_eq!(reg.dropped_groups, 1);
    }

    #[test]
    fn emitted_plus_dropped_equals_group_count() {
        let mut recs = day_records("m1", 1, 0..48);
        recs.extend(day_records("m1", 2, 0..40));
        recs.extend(day_records("m2", 1, 0..48));
        let reg = regulate_daily(&recs);
        assert_eq!(reg.vectors.len() + reg.dropped_groups, 3);
    }

    #[test]
    fn exhaustive_sample_is_a_permutation() {
        let pool: Vec<DailyLoadVector> =
            (0..10).map(|i| vec_of([i as f64, 0.0, 0.0])).collect();
        let sampled = sample_records(&pool, 10, 3).unwrap();
        let mut a: Vec<u64> = pool.iter().map(|v| v.readings()[0] as u64).collect();
        let mut b: Vec<u64> = sampled.iter().map(|v| v.readings()[0] as u64).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pool: Vec<DailyLoadVector> =
            (0..100).map(|i| vec_of([i as f64, 0.0, 0.0])).collect();
        assert_eq!(
            sample_records(&pool, 30, 9).unwrap(),
            sample_records(&pool, 30, 9).unwrap()
        );
    }

    #[test]
    fn oversampling_is_an_error() {
        let pool = vec![vec_of([1.0, 2.0, 3.0])];
        assert!(matches!(
            sample_records(&pool, 2, 0),
            Err(Error::Validation(_))
        ));
    }

    // Oracle: overlap of two independent without-replacement samples of size n
    // from a pool of N is hypergeometric with mean n^2/N and
    // var = n * (n/N) * (1 - n/N) * (N - n) / (N - 1).
    #[test]
    fn distinct_seeds_overlap_as_hypergeometric() {
        let pool_n = 100_000usize;
        let n = 10_000usize;
        let pool: Vec<DailyLoadVector> = (0..pool_n)
            .map(|i| vec_of([i as f64, 0.0, 0.0]))
            .collect();
        let s1 = sample_records(&pool, n, 101).unwrap();
        let s2 = sample_records(&pool, n, 202).unwrap();
        let ids = |s: &[DailyLoadVector]| -> std::collections::HashSet<u64> {
            s.iter().map(|v| v.readings()[0] as u64).collect()
        };
        let (a, b) = (ids(&s1), ids(&s2));
        assert_ne!(a, b);
        let overlap = a.intersection(&b).count() as f64;
        let nf = n as f64;
        let nn = pool_n as f64;
        let mean = nf * nf / nn;
        let var = nf * (nf / nn) * (1.0 - nf / nn) * (nn - nf) / (nn - 1.0);
        assert!(
            (overlap - mean).abs() <= 3.0 * var.sqrt(),
            "overlap {overlap} outside 3 sigma of {mean}"
        );
    }

    #[test]
    fn zero_noise_reproduces_household_template() {
        let profile = SyntheticProfileConfig {
            noise_sigma: 0.0,
            household_sigma: 0.0,
            household_shape_jitter: 0.0,
            away_day_prob: 0.0,
            meter_resolution_kwh: 0.0,
            ..Default::default()
        };
        let template = profile.template();
        let out = generate_synthetic_normals(5, 42, &profile).unwrap();
        for v in &out {
            for (r, t) in v.readings().iter().zip(template.iter()) {
                assert_eq!(r, t);
            }
        }
    }

    #[test]
    fn default_profile_mean_l1_near_calibration_target() {
        let profile = SyntheticProfileConfig::default();
        let out = generate_synthetic_normals(10_000, 1, &profile).unwrap();
        let mean = out.iter().map(|v| v.l1()).sum::<f64>() / out.len() as f64;
        assert!(
            (mean - 32.05).abs() <= 0.15 * 32.05,
            "mean daily total {mean} not within 15% of 32.05"
        );
        for v in &out {
            assert!(v.readings().iter().all(|&r| r >= 0.0 && r.is_finite()));
        }
    }

    #[test]
    fn synthesis_is_bit_reproducible() {
        let profile = SyntheticProfileConfig::default();
        let a = generate_synthetic_normals(200, 9, &profile).unwrap();
        let b = generate_synthetic_normals(200, 9, &profile).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let profile = SyntheticProfileConfig::default();
        let normals = generate_synthetic_normals(20, 5, &profile).unwrap();
        let samples: Vec<(DailyLoadVector, Label)> = normals
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, if i % 2 == 0 { Label::Normal } else { Label::Theft }))
            .collect();
        let ds = LabeledDataset {
            samples,
            role: DatasetRole::Defender,
            seed: 5,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        save_dataset(&ds, f.path()).unwrap();
        let loaded = load_dataset(f.path()).unwrap();
        assert_eq!(loaded.samples, ds.samples);
    }

    #[test]
    fn short_row_is_schema_error() {
        let mut row = String::from("0");
        for _ in 0..47 {
            row.push_str(",0.1");
        }
        let f = write_tmp(&format!("{}\n{row}\n", dataset_header()));
        assert!(matches!(load_dataset(f.path()), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_domain_label_is_schema_error() {
        let mut row = String::from("2");
        for _ in 0..48 {
            row.push_str(",0.1");
        }
        let f = write_tmp(&format!("{}\n{row}\n", dataset_header()));
        assert!(matches!(load_dataset(f.path()), Err(Error::Format(_))));
    }
}
