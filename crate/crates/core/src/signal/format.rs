//! `ECGMOE01` record files.
//!
//! Layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 16    | magic `ECGMOE01` zero-padded to 16 bytes |
//! | 4     | u32 lead count C |
//! | 4     | u32 samples per lead T |
//! | 8     | f64 sample rate (Hz) |
//! | 1     | u8 label-presence bitmask (bit 0 rr, 1 age, 2 sex, 3 ka, 4 ad) |
//! | 8 × k | present labels as f64, in bit order |
//! | 4·C·T | f32 samples, lead-major |
//!
//! The record id is not stored; loading takes it from the file stem.

use std::path::Path;

use super::{EcgRecord, TaskLabels};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: [u8; 16] = *b"ECGMOE01\0\0\0\0\0\0\0\0";

const LABEL_COUNT: usize = 5;

pub fn encode_record(record: &EcgRecord) -> Vec<u8> {
    let l = &record.labels;
    let labels: [Option<f64>; LABEL_COUNT] = [
        l.rr_interval_ms,
        l.age_years,
        l.sex.map(|b| b as u8 as f64),
        l.potassium_abnormal.map(|b| b as u8 as f64),
        l.arrhythmia_class.map(f64::from),
    ];
    let mut out = Vec::with_capacity(41 + 8 * LABEL_COUNT + 4 * record.samples().len());
    out.extend_from_slice(&RECORD_MAGIC);
    out.extend_from_slice(&(record.num_leads() as u32).to_le_bytes());
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    out.extend_from_slice(&record.sample_rate_hz.to_le_bytes());
    let mask = labels
        .iter()
        .enumerate()
        .fold(0u8, |m, (i, v)| if v.is_some() { m | (1 << i) } else { m });
    out.push(mask);
    for v in labels.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &s in record.samples() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: expected {n} bytes, found {remaining}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_record(bytes: &[u8], record_id: &str) -> Result<EcgRecord> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(16, "magic")?;
    if magic != RECORD_MAGIC {
        return Err(format_err(0, "bad magic (expected \"ECGMOE01\")"));
    }
    let c = r.u32("lead count")? as usize;
    let t = r.u32("sample count")? as usize;
    let fs_off = r.pos;
    let fs = r.f64("sample rate")?;
    if c == 0 {
        return Err(format_err(16, "lead count is zero"));
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(format_err(fs_off, format!("invalid sample rate {fs}")));
    }
    let mask_off = r.pos;
    let mask = r.take(1, "label mask")?[0];
    if mask >> LABEL_COUNT != 0 {
        return Err(format_err(mask_off, format!("unknown label bits in mask {mask:#04x}")));
    }
    let mut values = [None; LABEL_COUNT];
    for (i, slot) in values.iter_mut().enumerate() {
        if mask & (1 << i) != 0 {
            *slot = Some(r.f64("label")?);
        }
    }
    let flag = |v: Option<f64>, off: usize| -> Result<Option<bool>> {
        match v {
            None => Ok(None),
            Some(0.0) => Ok(Some(false)),
            Some(1.0) => Ok(Some(true)),
            Some(x) => Err(format_err(off, format!("binary label has value {x}"))),
        }
    };
    let labels_off = mask_off + 1;
    let class = match values[4] {
        None => None,
        Some(x) if x.fract() == 0.0 && (0.0..=255.0).contains(&x) => Some(x as u8),
        Some(x) => return Err(format_err(labels_off, format!("arrhythmia class {x} is not an integer"))),
    };
    let labels = TaskLabels {
        rr_interval_ms: values[0],
        age_years: values[1],
        sex: flag(values[2], labels_off)?,
        potassium_abnormal: flag(values[3], labels_off)?,
        arrhythmia_class: class,
    };

    let sample_off = r.pos;
    let expected = c
        .checked_mul(t)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(16, "sample section size overflows"))?;
    let actual = bytes.len() - sample_off;
    if actual != expected {
        return Err(format_err(
            sample_off,
            format!("sample section: expected {expected} bytes, found {actual}"),
        ));
    }
    let samples: Vec<f64> = r
        .take(expected, "samples")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    EcgRecord::from_flat(record_id, samples, c, fs, labels).map_err(|e| format_err(sample_off, e.to_string()))
}

pub fn save_record(record: &EcgRecord, path: &Path) -> Result<()> {
    std::fs::write(path, encode_record(record)).map_err(|e| Error::io(path, e))
}

pub fn load_record(path: &Path) -> Result<EcgRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
    decode_record(&bytes, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_synthetic_ecg, SyntheticConfig};

    fn sample_record() -> EcgRecord {
        generate_synthetic_ecg(&SyntheticConfig {
            seed: 9,
            leads: 2,
            duration_s: 3.0,
            sample_rate_hz: 250.0,
            noise_std_mv: 0.02,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = sample_record();
        rec.record_id = "r1".into();
        let path = dir.path().join("r1.ecgmoe");
        save_record(&rec, &path).unwrap();
        assert_eq!(load_record(&path).unwrap(), rec);
    }

    #[test]
    fn bad_magic_is_offset_zero() {
        let mut bytes = encode_record(&sample_record());
        bytes[..6].copy_from_slice(b"XXXXXX");
        match decode_record(&bytes, "x") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_samples_report_byte_counts() {
        let bytes = encode_record(&sample_record());
        let cut = &bytes[..bytes.len() - 10];
        let err = decode_record(cut, "x").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        let expected = 2 * 750 * 4;
        assert!(msg.contains(&format!("expected {expected}")), "{msg}");
        assert!(msg.contains(&format!("found {}", expected - 10)), "{msg}");
    }

    #[test]
    fn every_truncation_is_a_structured_error() {
        let bytes = encode_record(&sample_record());
        for n in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            assert!(matches!(decode_record(&bytes[..n], "x"), Err(Error::Format { .. })), "len {n}");
        }
    }
}
