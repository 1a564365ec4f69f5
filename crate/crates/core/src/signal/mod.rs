//! ECG records, labels, preprocessing and the on-disk record format.

mod format;
mod synth;
pub mod templates;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use format::{decode_record, encode_record, load_record, save_record, RECORD_MAGIC};
pub use synth::{generate_synthetic_ecg, generate_with_truth, GroundTruth, SyntheticConfig};

/// Ground-truth targets for the five tasks; any field may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLabels {
    pub rr_interval_ms: Option<f64>,
    pub age_years: Option<f64>,
    pub sex: Option<bool>,
    pub potassium_abnormal: Option<bool>,
    pub arrhythmia_class: Option<u8>,
}

impl TaskLabels {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRecord(m));
        if let Some(rr) = self.rr_interval_ms {
            if !(rr.is_finite() && rr >= 0.0) {
                return bad(format!("rr_interval_ms {rr} must be finite and >= 0"));
            }
        }
        if let Some(age) = self.age_years {
            if !(0.0..=120.0).contains(&age) {
                return bad(format!("age_years {age} outside [0, 120]"));
            }
        }
        if let Some(c) = self.arrhythmia_class {
            if c as usize >= templates::NUM_CLASSES {
                return bad(format!("arrhythmia_class {c} outside [0, 14]"));
            }
        }
        Ok(())
    }
}

/// Multi-lead recording stored lead-major: sample `t` of lead `c` is at
/// `c * len + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    samples: Vec<f64>,
    num_leads: usize,
    len: usize,
    pub sample_rate_hz: f64,
    pub labels: TaskLabels,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        leads: Vec<Vec<f64>>,
        sample_rate_hz: f64,
        labels: TaskLabels,
    ) -> Result<Self> {
        let len = leads.first().map_or(0, Vec::len);
        if leads.iter().any(|l| l.len() != len) {
            return Err(Error::InvalidRecord("leads have different lengths".into()));
        }
        let num_leads = leads.len();
        Self::from_flat(record_id, leads.concat(), num_leads, sample_rate_hz, labels)
    }

    pub fn from_flat(
        record_id: impl Into<String>,
        samples: Vec<f64>,
        num_leads: usize,
        sample_rate_hz: f64,
        labels: TaskLabels,
    ) -> Result<Self> {
        if num_leads == 0 {
            return Err(Error::InvalidRecord("record needs at least one lead".into()));
        }
        if !samples.len().is_multiple_of(num_leads) {
            return Err(Error::InvalidRecord("sample count is not a multiple of the lead count".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidRecord(format!("sample rate {sample_rate_hz} must be > 0")));
        }
        let len = samples.len() / num_leads;
        if (len as f64) < 2.0 * sample_rate_hz {
            return Err(Error::TooShortSignal {
                duration_s: len as f64 / sample_rate_hz,
                min_s: 2.0,
            });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!(
                "non-finite sample at lead {}, index {}",
                i / len,
                i % len
            )));
        }
        labels.validate()?;
        Ok(Self {
            record_id: record_id.into(),
            samples,
            num_leads,
            len,
            sample_rate_hz,
            labels,
        })
    }

    pub fn num_leads(&self) -> usize {
        self.num_leads
    }

    /// Samples per lead.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 / self.sample_rate_hz
    }

    pub fn lead(&self, c: usize) -> &[f64] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Per-lead z-score. Fails on a constant lead.
    pub fn znormalize(&self) -> Result<EcgRecord> {
        let mut out = Vec::with_capacity(self.samples.len());
        for c in 0..self.num_leads {
            let z = znormalize_lead(self.lead(c)).map_err(|_| Error::ZeroVarianceLead { lead: c })?;
            out.extend(z);
        }
        Ok(EcgRecord {
            samples: out,
            ..self.clone()
        })
    }

    /// One row per sample, one column per lead, header `lead_0..lead_{C-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.num_leads).map(|c| format!("lead_{c}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.len {
            let row: Vec<String> = (0..self.num_leads)
                .map(|c| format!("{}", self.samples[c * self.len + t]))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-score of a single lead (population std).
pub fn znormalize_lead(x: &[f64]) -> Result<Vec<f64>> {
    let (mean, std) = mean_std(x);
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::ZeroVarianceLead { lead: 0 });
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_closed_form() {
        let z = znormalize_lead(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in z.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_lead_is_rejected() {
        assert!(matches!(znormalize_lead(&[5.0, 5.0, 5.0]), Err(Error::ZeroVarianceLead { .. })));
        let rec = EcgRecord::new("c", vec![(0..1000).map(|i| (i % 7) as f64).collect(), vec![5.0; 1000]], 250.0, TaskLabels::default()).unwrap();
        assert!(matches!(rec.znormalize(), Err(Error::ZeroVarianceLead { lead: 1 })));
    }

    #[test]
    fn record_invariants() {
        assert!(matches!(
            EcgRecord::new("a", vec![vec![0.0; 100]], 100.0, TaskLabels::default()),
            Err(Error::TooShortSignal { .. })
        ));
        let mut x = vec![0.0; 400];
        x[17] = f64::NAN;
        assert!(EcgRecord::new("a", vec![x], 100.0, TaskLabels::default()).is_err());
        assert!(EcgRecord::new("a", vec![], 100.0, TaskLabels::default()).is_err());
        let labels = TaskLabels {
            age_years: Some(130.0),
            ..Default::default()
        };
        assert!(EcgRecord::new("a", vec![vec![0.0; 400]], 100.0, labels).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let rec = EcgRecord::new(
            "a",
            vec![(0..200).map(f64::from).collect(), vec![0.5; 200]],
            100.0,
            TaskLabels::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("lead_0,lead_1"));
        assert_eq!(lines.next(), Some("0,0.5"));
        assert_eq!(text.lines().count(), 201);
    }
}
