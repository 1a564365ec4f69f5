//! Seeded synthetic datasets: generation, the on-disk layout and splits.
//!
//! A dataset directory holds `records/<id>.ecg` plus `manifest.csv` with one
//! row per record: its path, split and labels.

use std::path::{Path, PathBuf};

use ecgmoe::signal::templates::NUM_CLASSES;
use ecgmoe::signal::{generate_synthetic_ecg, load_record, save_record, EcgRecord, SyntheticConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<EcgRecord>,
    pub splits: Vec<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    record_id: String,
    path: String,
    split: Split,
    rr_interval_ms: Option<f64>,
    age_years: Option<f64>,
    sex: Option<u8>,
    potassium_abnormal: Option<u8>,
    arrhythmia_class: Option<u8>,
}

/// Generator settings for every record of the dataset, in record order.
/// Morphology classes cycle through all templates so each is represented.
pub fn record_configs(data: &DataConfig) -> Vec<SyntheticConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
    let mut draw = |[lo, hi]: [f64; 2]| if lo < hi { rng.random_range(lo..hi) } else { lo };
    (0..data.records)
        .map(|i| {
            let heart_rate_bpm = draw(data.heart_rate_bpm);
            let hr_jitter_pct = draw(data.hr_jitter_pct);
            let noise_std_mv = draw(data.noise_std_mv);
            SyntheticConfig {
                seed: data.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                heart_rate_bpm,
                hr_jitter_pct,
                noise_std_mv,
                leads: data.leads,
                duration_s: data.duration_s,
                sample_rate_hz: data.sample_rate_hz,
                morphology_class: (i % NUM_CLASSES) as u8,
            }
        })
        .collect()
}

/// Split assignment from a seeded permutation of the record indices.
pub fn assign_splits(data: &DataConfig) -> Vec<Split> {
    let n = data.records;
    let n_train = ((data.splits.train * n as f64).round() as usize).clamp(1, n);
    let n_val = ((data.splits.val * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(data.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Generates the whole dataset in memory.
pub fn generate(data: &DataConfig) -> Result<Dataset, CliError> {
    let records = record_configs(data)
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut r = generate_synthetic_ecg(cfg)?;
            r.record_id = format!("rec{i:05}");
            Ok(r)
        })
        .collect::<Result<Vec<_>, ecgmoe::Error>>()?;
    Ok(Dataset {
        records,
        splits: assign_splits(data),
    })
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&EcgRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(r, _)| r)
            .collect()
    }

    /// Writes `records/` and `manifest.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let rec_dir = dir.join("records");
        std::fs::create_dir_all(&rec_dir).map_err(|e| CliError::io(&rec_dir, e))?;
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest).map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
        for (r, &split) in self.records.iter().zip(&self.splits) {
            let rel = PathBuf::from("records").join(format!("{}.ecg", r.record_id));
            save_record(r, &dir.join(&rel))?;
            let l = &r.labels;
            w.serialize(ManifestRow {
                record_id: r.record_id.clone(),
                path: rel.to_string_lossy().into_owned(),
                split,
                rr_interval_ms: l.rr_interval_ms,
                age_years: l.age_years,
                sex: l.sex.map(u8::from),
                potassium_abnormal: l.potassium_abnormal.map(u8::from),
                arrhythmia_class: l.arrhythmia_class,
            })
            .map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
        }
        w.flush().map_err(|e| CliError::io(&manifest, e))?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]. Labels come from the
    /// record files; the manifest supplies paths and splits.
    pub fn load(dir: &Path) -> Result<Dataset, CliError> {
        let manifest = dir.join("manifest.csv");
        if !manifest.exists() {
            return Err(CliError::Runtime(format!(
                "{} not found; run `ecgmoe synth` first",
                manifest.display()
            )));
        }
        let mut rd = csv::Reader::from_path(&manifest).map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
        let mut records = Vec::new();
        let mut splits = Vec::new();
        for row in rd.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| CliError::Runtime(format!("{}: {e}", manifest.display())))?;
            records.push(load_record(&dir.join(&row.path))?);
            splits.push(row.split);
        }
        Ok(Dataset { records, splits })
    }
}
