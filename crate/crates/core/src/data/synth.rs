//! Synthetic load-profile generator.
//!
//! Stands in for metered data: each synthetic customer gets a base daily
//! shape (a few harmonics of the daily period), weekend amplitude
//! modulation, a category-dependent midday generation dip, multiplicative
//! noise and occasional short consumption peaks. Deterministic per seed;
//! every customer draws from its own indexed substream, so generation can
//! shard by customer without changing the output.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{
    first_weekday_of_month, month_length, normalize, pad_to_month, Dataset, Profile,
};
use crate::error::{Error, Result};
use crate::rng;

/// One customer category and whether its customers own generation equipment.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub name: String,
    pub has_generation: bool,
}

impl CategorySpec {
    pub fn new(name: &str, has_generation: bool) -> Self {
        CategorySpec { name: name.to_string(), has_generation }
    }
}

/// Generator parameters. All of them are surfaced in the config file so
/// tests can pin the exact distribution they train against.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_customers: usize,
    pub categories: Vec<CategorySpec>,
    pub years: Vec<i32>,
    pub months: Vec<u32>,
    /// 0 generates whole padded months; 1..=4 generates that many 7-day
    /// segments per month instead.
    pub weeks_per_month: usize,
    pub steps_per_day: usize,
    /// Harmonics of the daily period per customer, 1..=3.
    pub harmonics_max: usize,
    /// Multiplicative noise sigma.
    pub noise_scale: f64,
    /// Probability of one short consumption peak per day.
    pub peak_rate: f64,
    /// Peak amplitude range, as a fraction of capacity.
    pub peak_amp: (f64, f64),
    /// Customer capacity range in kW.
    pub capacity_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_customers: 20,
            categories: vec![CategorySpec::new("E3A", false), CategorySpec::new("PV", true)],
            years: vec![2023],
            months: vec![1, 7],
            weeks_per_month: 0,
            steps_per_day: 96,
            harmonics_max: 3,
            noise_scale: 0.05,
            peak_rate: 0.3,
            peak_amp: (0.15, 0.30),
            capacity_range: (80.0, 160.0),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_customers == 0 {
            return Err(Error::invalid("n_customers must be >= 1"));
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("at least one category required"));
        }
        if self.weeks_per_month > 4 {
            return Err(Error::invalid("weeks_per_month must be <= 4"));
        }
        if !(1..=3).contains(&self.harmonics_max) {
            return Err(Error::invalid("harmonics_max must be in 1..=3"));
        }
        if self.steps_per_day == 0 {
            return Err(Error::invalid("steps_per_day must be positive"));
        }
        if self.months.iter().any(|m| !(1..=12).contains(m)) {
            return Err(Error::invalid("months must be in 1..=12"));
        }
        if !(0.0..=1.0).contains(&self.peak_rate) {
            return Err(Error::invalid("peak_rate must be in [0, 1]"));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::invalid("noise_scale must be >= 0"));
        }
        Ok(())
    }
}

struct CustomerShape {
    base_mean: f64,
    harmonics: Vec<(f64, f64)>, // (amplitude, phase) for h = 1..
    weekend_factor: f64,
    pv_excess: f64,
    dip_width: f64,
    peak_hour: f64,
}

impl CustomerShape {
    /// Clamped base daily shape, in fraction-of-capacity units.
    fn base(&self, tau: f64) -> f64 {
        let mut v = self.base_mean;
        for (h, (amp, phase)) in self.harmonics.iter().enumerate() {
            v += amp * (2.0 * std::f64::consts::PI * (h as f64 + 1.0) * tau + phase).cos();
        }
        v.max(0.05)
    }
}

fn seasonal(month: u32) -> f64 {
    let x = 2.0 * std::f64::consts::PI * (month as f64 - 7.0) / 12.0;
    0.5 + 0.25 * (1.0 + x.cos())
}

/// Generate a synthetic dataset. Bit-identical for identical `(seed, spec)`.
pub fn synth_dataset(seed: u64, spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let spd = spec.steps_per_day;
    let mut profiles = Vec::new();
    let mut capacity_map = BTreeMap::new();

    for c in 0..spec.n_customers {
        let mut rng = rng::substream_indexed(seed, "data", c as u64);
        let cat = &spec.categories[c % spec.categories.len()];
        let customer_id = format!("c{c:04}");

        let capacity = rng.gen_range(spec.capacity_range.0..=spec.capacity_range.1);
        let base_mean = rng.gen_range(0.25..0.40);
        let n_harm = rng.gen_range(1..=spec.harmonics_max);
        let harmonics: Vec<(f64, f64)> = (0..n_harm)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.10),
                    rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                )
            })
            .collect();
        let weekend_factor = rng.gen_range(0.55..0.85);
        let (pv_excess, dip_width) = if cat.has_generation {
            (rng.gen_range(0.15..0.60), rng.gen_range(0.10..0.18f64).max(1.0 / spd as f64))
        } else {
            (0.0, 0.1)
        };
        let peak_hour = if cat.has_generation { 19.5 } else { 18.0 } + rng.gen_range(-1.5..1.5);
        let shape = CustomerShape {
            base_mean,
            harmonics,
            weekend_factor,
            pv_excess,
            dip_width,
            peak_hour,
        };
        capacity_map.insert(customer_id.clone(), capacity);

        for &year in &spec.years {
            for &month in &spec.months {
                let fw = first_weekday_of_month(year, month)?;
                let n_days = month_length(year, month)? as usize;
                if spec.weeks_per_month == 0 {
                    let frac = gen_days(&mut rng, &shape, cat, spec, month, fw, n_days);
                    let raw: Vec<f64> = frac.iter().map(|v| v * capacity).collect();
                    let values = normalize(&raw, capacity, false)?;
                    let valid_len = values.len();
                    let padded = pad_to_month(&values, spd)?;
                    profiles.push(Profile::new(
                        customer_id.clone(),
                        cat.name.clone(),
                        year,
                        month,
                        fw,
                        spd,
                        valid_len,
                        padded,
                    )?);
                } else {
                    for _week in 0..spec.weeks_per_month {
                        // Weeks are aligned to the month start, so each one
                        // begins on the month's first weekday.
                        let frac = gen_days(&mut rng, &shape, cat, spec, month, fw, 7);
                        let raw: Vec<f64> = frac.iter().map(|v| v * capacity).collect();
                        let values = normalize(&raw, capacity, false)?;
                        let valid_len = values.len();
                        profiles.push(Profile::new(
                            customer_id.clone(),
                            cat.name.clone(),
                            year,
                            month,
                            fw,
                            spd,
                            valid_len,
                            values,
                        )?);
                    }
                }
            }
        }
    }

    Ok(Dataset::new(profiles, capacity_map, seed))
}

fn gen_days(
    rng: &mut impl Rng,
    shape: &CustomerShape,
    cat: &CategorySpec,
    spec: &SynthSpec,
    month: u32,
    first_weekday: u32,
    n_days: usize,
) -> Vec<f64> {
    let spd = spec.steps_per_day;
    let mut out = Vec::with_capacity(n_days * spd);
    let seas = seasonal(month);
    let midday_base = shape.base(0.5);
    for day in 0..n_days {
        let dow = (first_weekday as usize + day) % 7;
        let day_factor = if dow >= 5 { shape.weekend_factor } else { 1.0 };
        let day_start = out.len();
        for s in 0..spd {
            let tau = (s as f64 + 0.5) / spd as f64;
            let mut v = shape.base(tau) * day_factor;
            if cat.has_generation {
                let depth = midday_base * day_factor + shape.pv_excess * seas;
                let z = (tau - 0.5) / shape.dip_width;
                v -= depth * (-z * z).exp();
            }
            out.push(v);
        }
        if spec.peak_rate > 0.0 && rng.gen::<f64>() < spec.peak_rate {
            let hour = shape.peak_hour + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * 0.75;
            let center = ((hour / 24.0) * spd as f64).round() as i64;
            let center = center.clamp(0, spd as i64 - 1) as usize;
            let dur = rng.gen_range(1..=3usize);
            let amp = rng.gen_range(spec.peak_amp.0..=spec.peak_amp.1);
            for k in 0..dur {
                let idx = day_start + (center + k).min(spd - 1);
                out[idx] += amp;
            }
        }
    }
    if spec.noise_scale > 0.0 {
        for v in out.iter_mut() {
            let eps: f64 = StandardNormal.sample(rng);
            *v *= 1.0 + spec.noise_scale * eps;
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(-0.98, 0.98);
    }
    out
}
