//! Time-series containers, condition encoding, normalization, padding,
//! dataset splits and ingestion.
//!
//! Conventions used throughout the crate:
//! - power values are normalized to `[-1, 1]` by per-customer capacity,
//!   positive = consumption, negative = generation;
//! - a profile is stored padded to `padded_len` with zeros after `valid_len`;
//! - weekdays are indexed 0..=6 with 0 = Monday.

mod calendar;
mod io;
mod synth;

pub use calendar::{first_weekday_of_month, month_length};
pub use io::{load_dataset, read_profiles_csv, write_dataset, write_profiles_csv, DatasetManifest};
pub use synth::{synth_dataset, CategorySpec, SynthSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of days a month is padded to.
pub const PADDED_DAYS: usize = 31;

/// One time-series profile with padding and normalization metadata.
///
/// `values` has length `padded_len`; entries at and after `valid_len` are
/// exactly zero. Values are normalized power (dimensionless).
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub customer_id: String,
    pub category: String,
    pub year: i32,
    pub month: u32,
    /// Weekday of the first step, 0 = Monday.
    pub first_weekday: u32,
    pub steps_per_day: usize,
    pub valid_len: usize,
    values: Vec<f64>,
}

impl Profile {
    /// Build a profile, checking the structural invariants: a non-empty valid
    /// region, a zero tail, finite values.
    ///
    /// The `[-1, 1]` range is an invariant of *normalized data* and is
    /// enforced by [`normalize`] and the synthetic generator, not here:
    /// sampled outputs may legitimately overshoot the range slightly.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        customer_id: String,
        category: String,
        year: i32,
        month: u32,
        first_weekday: u32,
        steps_per_day: usize,
        valid_len: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if steps_per_day == 0 {
            return Err(Error::invalid("steps_per_day must be positive"));
        }
        if valid_len == 0 || valid_len > values.len() {
            return Err(Error::invalid(format!(
                "valid_len {} out of range for {} values",
                valid_len,
                values.len()
            )));
        }
        if first_weekday > 6 {
            return Err(Error::invalid(format!("first_weekday {first_weekday} not in 0..=6")));
        }
        if !(1..=12).contains(&month) {
            return Err(Error::invalid(format!("month {month} not in 1..=12")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("profile contains non-finite values"));
        }
        if values[valid_len..].iter().any(|&v| v != 0.0) {
            return Err(Error::invalid("padded tail must be exactly zero"));
        }
        Ok(Profile {
            customer_id,
            category,
            year,
            month,
            first_weekday,
            steps_per_day,
            valid_len,
            values,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.values.len()
    }

    /// All values including the zero tail.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The real (non-padded) steps.
    pub fn valid(&self) -> &[f64] {
        &self.values[..self.valid_len]
    }

    /// Replace the value buffer, re-checking invariants.
    pub fn with_values(mut self, values: Vec<f64>, valid_len: usize) -> Result<Self> {
        self.values = values;
        self.valid_len = valid_len;
        Profile::new(
            self.customer_id,
            self.category,
            self.year,
            self.month,
            self.first_weekday,
            self.steps_per_day,
            self.valid_len,
            self.values,
        )
    }
}

/// Normalize raw kW readings by a capacity divisor into `[-1, 1]`.
///
/// With `clamp` set, out-of-range readings are clamped to ±1 instead of
/// rejected.
pub fn normalize(raw: &[f64], capacity: f64, clamp: bool) -> Result<Vec<f64>> {
    if !(capacity > 0.0) {
        return Err(Error::invalid(format!("capacity must be > 0, got {capacity}")));
    }
    let mut out = Vec::with_capacity(raw.len());
    for (i, &r) in raw.iter().enumerate() {
        let v = r / capacity;
        if v.abs() > 1.0 {
            if clamp {
                out.push(v.clamp(-1.0, 1.0));
            } else {
                return Err(Error::OutOfRange(format!(
                    "|raw[{i}]| = {} exceeds capacity {capacity}",
                    r.abs()
                )));
            }
        } else {
            out.push(v);
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(values: &[f64], capacity: f64) -> Vec<f64> {
    values.iter().map(|v| v * capacity).collect()
}

/// Pad a whole-month series (28..=31 days) to 31-day length with zeros.
///
/// Returns the padded buffer; the original length becomes `valid_len`.
pub fn pad_to_month(values: &[f64], steps_per_day: usize) -> Result<Vec<f64>> {
    if steps_per_day == 0 {
        return Err(Error::invalid("steps_per_day must be positive"));
    }
    if values.len() % steps_per_day != 0 {
        return Err(Error::invalid(format!(
            "{} values is not a whole number of {steps_per_day}-step days",
            values.len()
        )));
    }
    let days = values.len() / steps_per_day;
    if !(28..=31).contains(&days) {
        return Err(Error::invalid(format!("{days} days is not a month length")));
    }
    let mut out = values.to_vec();
    out.resize(PADDED_DAYS * steps_per_day, 0.0);
    Ok(out)
}

/// Signed peak/min/average summary of the valid steps.
pub fn derive_numeric_conditions(p: &Profile) -> Result<(f64, f64, f64)> {
    if p.valid_len == 0 {
        return Err(Error::invalid("empty profile"));
    }
    let v = p.valid();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let avg = v.iter().sum::<f64>() / v.len() as f64;
    Ok((max, min, avg))
}

/// Categorical conditions fed to the network (y1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub year: i32,
    pub month: u32,
    /// Days in the month, 28..=31.
    pub month_length: u32,
    /// 0 = Monday.
    pub first_weekday: u32,
    pub category: String,
    pub generation_equipment: bool,
}

impl Categorical {
    /// Conditions for a real calendar month; `month_length` and
    /// `first_weekday` are derived, so they are consistent by construction.
    pub fn for_month(year: i32, month: u32, category: &str, generation_equipment: bool) -> Result<Self> {
        Ok(Categorical {
            year,
            month,
            month_length: month_length(year, month)?,
            first_weekday: first_weekday_of_month(year, month)?,
            category: category.to_string(),
            generation_equipment,
        })
    }

    /// True when month_length and first_weekday agree with the real calendar.
    pub fn calendar_consistent(&self) -> bool {
        month_length(self.year, self.month).is_ok_and(|l| l == self.month_length)
            && first_weekday_of_month(self.year, self.month).is_ok_and(|w| w == self.first_weekday)
    }

    /// Conditions of an existing profile (weekday taken from the profile, so
    /// weekly segments keep the weekday they actually start on).
    pub fn of_profile(p: &Profile) -> Result<Self> {
        Ok(Categorical {
            year: p.year,
            month: p.month,
            month_length: month_length(p.year, p.month)?,
            first_weekday: p.first_weekday,
            category: p.category.clone(),
            generation_equipment: category_has_generation(&p.category),
        })
    }

    /// Integer codes in the fixed field order
    /// (year, month, month_length, first_weekday, category, equipment).
    pub fn codes(&self, vocab: &CondVocab) -> Result<Vec<usize>> {
        let year_code = self
            .year
            .checked_sub(vocab.base_year)
            .filter(|&c| c >= 0 && (c as usize) < vocab.n_years)
            .ok_or_else(|| Error::invalid(format!("year {} outside vocab range", self.year)))?
            as usize;
        if !(1..=12).contains(&self.month) {
            return Err(Error::invalid(format!("month {} not in 1..=12", self.month)));
        }
        if !(28..=31).contains(&self.month_length) {
            return Err(Error::invalid(format!("month_length {} not in 28..=31", self.month_length)));
        }
        if self.first_weekday > 6 {
            return Err(Error::invalid(format!("first_weekday {} not in 0..=6", self.first_weekday)));
        }
        let cat_code = vocab
            .categories
            .iter()
            .position(|c| c == &self.category)
            .ok_or_else(|| Error::invalid(format!("unknown category '{}'", self.category)))?;
        Ok(vec![
            year_code,
            (self.month - 1) as usize,
            (self.month_length - 28) as usize,
            self.first_weekday as usize,
            cat_code,
            self.generation_equipment as usize,
        ])
    }
}

/// Categories whose customers own generation equipment. Synthetic stand-in
/// rule: generation categories are named with a leading "PV".
pub fn category_has_generation(category: &str) -> bool {
    category.starts_with("PV")
}

/// Numerical constraints enforced by inference-time guidance (y2).
/// At most one family per sampling request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NumericCondition {
    PeakTotal { max: f64, min: f64, avg: f64 },
    Impute { indices: Vec<usize>, values: Vec<f64> },
    Superres { block_len: usize, values: Vec<f64> },
}

impl NumericCondition {
    pub fn validate(&self) -> Result<()> {
        match self {
            NumericCondition::PeakTotal { max, min, avg } => {
                if !(min <= avg && avg <= max) {
                    return Err(Error::invalid(format!(
                        "peak/total targets must satisfy min <= avg <= max, got {min} / {avg} / {max}"
                    )));
                }
            }
            NumericCondition::Impute { indices, values } => {
                if indices.len() != values.len() {
                    return Err(Error::invalid(format!(
                        "{} indices but {} values",
                        indices.len(),
                        values.len()
                    )));
                }
            }
            NumericCondition::Superres { block_len, .. } => {
                if *block_len == 0 {
                    return Err(Error::invalid("block_len must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Full condition set: categorical y1 plus optional numerical y2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub categorical: Categorical,
    pub numerical: Option<NumericCondition>,
}

impl ConditionSet {
    pub fn new(categorical: Categorical, numerical: Option<NumericCondition>) -> Result<Self> {
        if let Some(n) = &numerical {
            n.validate()?;
        }
        Ok(ConditionSet { categorical, numerical })
    }
}

/// Mapping from categorical condition values to small-integer codes.
///
/// Field order is fixed: year, month, month_length, first_weekday, category,
/// generation_equipment. Stored in the checkpoint so sampling commands can
/// encode user-supplied conditions without the training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondVocab {
    pub base_year: i32,
    pub n_years: usize,
    pub categories: Vec<String>,
}

impl CondVocab {
    pub const N_FIELDS: usize = 6;

    pub fn from_profiles<'a>(profiles: impl IntoIterator<Item = &'a Profile>) -> Result<Self> {
        let mut min_year = i32::MAX;
        let mut max_year = i32::MIN;
        let mut categories: Vec<String> = Vec::new();
        for p in profiles {
            min_year = min_year.min(p.year);
            max_year = max_year.max(p.year);
            if !categories.contains(&p.category) {
                categories.push(p.category.clone());
            }
        }
        if categories.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from zero profiles"));
        }
        categories.sort();
        Ok(CondVocab {
            base_year: min_year,
            n_years: (max_year - min_year + 1) as usize,
            categories,
        })
    }

    /// Vocabulary sizes per field, in the fixed field order.
    pub fn sizes(&self) -> Vec<usize> {
        vec![self.n_years, 12, 4, 7, self.categories.len(), 2]
    }
}

/// Which split a profile belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Customer-id lists per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMap {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitMap {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Split customers 70/15/15, deterministically in `split_seed`.
pub fn split_customers(customer_ids: &[String], split_seed: u64) -> SplitMap {
    let mut ids: Vec<String> = customer_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = rng::substream(split_seed, "split");
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((n as f64) * 0.70).round() as usize;
    let n_val = ((n as f64) * 0.15).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    SplitMap {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    }
}

/// An immutable collection of profiles with capacity metadata and splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub profiles: Vec<Profile>,
    pub capacity_map: BTreeMap<String, f64>,
    pub split_seed: u64,
    pub splits: SplitMap,
}

impl Dataset {
    pub fn new(profiles: Vec<Profile>, capacity_map: BTreeMap<String, f64>, split_seed: u64) -> Self {
        let ids: Vec<String> = profiles.iter().map(|p| p.customer_id.clone()).collect();
        let splits = split_customers(&ids, split_seed);
        Dataset {
            profiles,
            capacity_map,
            split_seed,
            splits,
        }
    }

    pub fn split_profiles(&self, split: Split) -> Vec<&Profile> {
        let ids = self.splits.ids(split);
        self.profiles
            .iter()
            .filter(|p| ids.contains(&p.customer_id))
            .collect()
    }

    pub fn vocab(&self) -> Result<CondVocab> {
        CondVocab::from_profiles(self.profiles.iter())
    }
}
