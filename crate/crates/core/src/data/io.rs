//! Dataset files: one CSV row per profile plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Profile, SplitMap};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Sidecar metadata for a profile CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub capacity_map: BTreeMap<String, f64>,
    pub split_seed: u64,
    pub splits: SplitMap,
}

/// Write profiles as CSV: metadata columns then the padded values with at
/// least nine significant digits. All rows must share one padded length.
pub fn write_profiles_csv(path: &Path, profiles: &[Profile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::invalid("refusing to write an empty profile CSV"));
    }
    let padded_len = profiles[0].padded_len();
    if profiles.iter().any(|p| p.padded_len() != padded_len) {
        return Err(Error::invalid("all profiles in one CSV must share padded_len"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "customer_id,category,year,month,first_weekday,steps_per_day,valid_len")?;
    for i in 0..padded_len {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for p in profiles {
        write!(
            w,
            "{},{},{},{},{},{},{}",
            p.customer_id, p.category, p.year, p.month, p.first_weekday, p.steps_per_day, p.valid_len
        )?;
        for v in p.values() {
            if *v == 0.0 {
                w.write_all(b",0")?;
            } else {
                write!(w, ",{v:.10e}")?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a profile CSV written by [`write_profiles_csv`].
pub fn read_profiles_csv(path: &Path) -> Result<Vec<Profile>> {
    let f = File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty profile CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    const META: [&str; 7] = [
        "customer_id",
        "category",
        "year",
        "month",
        "first_weekday",
        "steps_per_day",
        "valid_len",
    ];
    if cols.len() < META.len() + 1 || cols[..META.len()] != META {
        return Err(Error::Format(format!("unexpected CSV header in {}", path.display())));
    }
    let padded_len = cols.len() - META.len();
    let mut profiles = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut meta = |name: &str| -> Result<String> {
            fields
                .next()
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("row {}: missing {name}", lineno + 2)))
        };
        let customer_id = meta("customer_id")?;
        let category = meta("category")?;
        let year: i32 = parse_field(&meta("year")?, "year", lineno)?;
        let month: u32 = parse_field(&meta("month")?, "month", lineno)?;
        let first_weekday: u32 = parse_field(&meta("first_weekday")?, "first_weekday", lineno)?;
        let steps_per_day: usize = parse_field(&meta("steps_per_day")?, "steps_per_day", lineno)?;
        let valid_len: usize = parse_field(&meta("valid_len")?, "valid_len", lineno)?;
        let values: Vec<f64> = fields
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: bad value '{s}'", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        if values.len() != padded_len {
            return Err(Error::Format(format!(
                "row {}: {} values, header promises {padded_len}",
                lineno + 2,
                values.len()
            )));
        }
        profiles.push(Profile::new(
            customer_id,
            category,
            year,
            month,
            first_weekday,
            steps_per_day,
            valid_len,
            values,
        )?);
    }
    Ok(profiles)
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, lineno: usize) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Parse(format!("row {}: bad {name} '{s}'", lineno + 2)))
}

/// Write `profiles.csv` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_profiles_csv(&dir.join("profiles.csv"), &dataset.profiles)?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        capacity_map: dataset.capacity_map.clone(),
        split_seed: dataset.split_seed,
        splits: dataset.splits.clone(),
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let profiles = read_profiles_csv(&dir.join("profiles.csv"))?;
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest format_version {} unsupported",
            manifest.format_version
        )));
    }
    Ok(Dataset {
        profiles,
        capacity_map: manifest.capacity_map,
        split_seed: manifest.split_seed,
        splits: manifest.splits,
    })
}
