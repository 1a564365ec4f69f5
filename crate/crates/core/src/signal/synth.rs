//! Seeded synthetic ECG: each beat is a sum of five Gaussian bumps (P, Q, R,
//! S, T) placed at fixed fractions of the local RR interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::templates::{BASE_AMP_MV, BASE_PHASE, BASE_SIGMA_S, NUM_CLASSES, TEMPLATES};
use super::{EcgRecord, TaskLabels};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub heart_rate_bpm: f64,
    /// Relative RR jitter; each gap is `RR * (1 + jitter * u)`, `u ~ U(-1, 1)`.
    pub hr_jitter_pct: f64,
    pub noise_std_mv: f64,
    pub leads: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub morphology_class: u8,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            heart_rate_bpm: 72.0,
            hr_jitter_pct: 0.0,
            noise_std_mv: 0.0,
            leads: 1,
            duration_s: 10.0,
            sample_rate_hz: 500.0,
            morphology_class: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("synthetic.{field}"), msg));
        if !(30.0..=220.0).contains(&self.heart_rate_bpm) {
            return fail("heart_rate_bpm", format!("{} outside [30, 220]", self.heart_rate_bpm));
        }
        if !(0.0..=0.3).contains(&self.hr_jitter_pct) {
            return fail("hr_jitter_pct", format!("{} outside [0, 0.3]", self.hr_jitter_pct));
        }
        if !(self.noise_std_mv >= 0.0 && self.noise_std_mv.is_finite()) {
            return fail("noise_std_mv", format!("{} must be >= 0", self.noise_std_mv));
        }
        if self.leads < 1 {
            return fail("leads", "must be >= 1".into());
        }
        if !(self.duration_s >= 2.0 && self.duration_s.is_finite()) {
            return fail("duration_s", format!("{} must be at least 2 s", self.duration_s));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return fail("sample_rate_hz", format!("{} must be > 0", self.sample_rate_hz));
        }
        if self.morphology_class as usize >= NUM_CLASSES {
            return fail("morphology_class", format!("{} outside [0, 14]", self.morphology_class));
        }
        Ok(())
    }

    pub fn rr_nominal_ms(&self) -> f64 {
        60_000.0 / self.heart_rate_bpm
    }
}

/// Generator-side truth, used by detection oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub r_peak_times_s: Vec<f64>,
    /// R-peak times rounded to the nearest sample.
    pub r_peak_samples: Vec<usize>,
    /// Realized inter-peak gaps in ms.
    pub gaps_ms: Vec<f64>,
    /// Per-record T-wave gain (drives the sex label).
    pub t_gain: f64,
}

pub fn generate_synthetic_ecg(cfg: &SyntheticConfig) -> Result<EcgRecord> {
    generate_with_truth(cfg).map(|(r, _)| r)
}

/// Lead-specific amplitude gain.
fn lead_gain(lead: usize) -> f64 {
    1.0 - 0.15 * (lead % 4) as f64
}

pub fn generate_with_truth(cfg: &SyntheticConfig) -> Result<(EcgRecord, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = cfg.sample_rate_hz;
    let n = (cfg.duration_s * fs).round() as usize;
    let rr_ms = cfg.rr_nominal_ms();
    let tpl = &TEMPLATES[cfg.morphology_class as usize];

    // Peak times: first R at half a nominal RR, then jittered gaps; stop far
    // enough from the end that the last QRS is complete.
    let rr_s = rr_ms / 1000.0;
    let end_guard = cfg.duration_s - 0.25 * rr_s.min(1.0);
    let mut times = vec![0.5 * rr_s];
    let mut gaps_ms = Vec::new();
    loop {
        let u: f64 = rng.random_range(-1.0..=1.0);
        let gap_ms = rr_ms * (1.0 + cfg.hr_jitter_pct * u);
        let next = times[times.len() - 1] + gap_ms / 1000.0;
        if next >= end_guard {
            break;
        }
        gaps_ms.push(gap_ms);
        times.push(next);
    }

    let t_gain: f64 = rng.random_range(0.7..1.3);
    let age_noise = Normal::new(0.0, 4.0).expect("valid normal").sample(&mut rng);

    let amp_mult = tpl.amp;
    let width_mult = [tpl.p_width, tpl.qrs_width, tpl.qrs_width, tpl.qrs_width, tpl.t_width];
    let phase_mult = [tpl.pr, 1.0, 1.0, 1.0, tpl.qt];

    let mut clean = vec![0.0; n];
    for (i, &tr) in times.iter().enumerate() {
        let local_rr_s = if i == 0 {
            gaps_ms.first().copied().unwrap_or(rr_ms)
        } else {
            gaps_ms[i - 1]
        } / 1000.0;
        for b in 0..5 {
            let mut amp = BASE_AMP_MV[b] * amp_mult[b];
            if b == 4 {
                amp *= t_gain;
            }
            if amp == 0.0 {
                continue;
            }
            let sigma = BASE_SIGMA_S[b] * width_mult[b];
            let center = tr + BASE_PHASE[b] * phase_mult[b] * local_rr_s;
            let lo = (((center - 5.0 * sigma) * fs).floor().max(0.0)) as usize;
            let hi = ((((center + 5.0 * sigma) * fs).ceil()) as usize + 1).min(n);
            for (k, v) in clean.iter_mut().enumerate().take(hi).skip(lo) {
                let dt = k as f64 / fs - center;
                *v += amp * (-0.5 * dt * dt / (sigma * sigma)).exp();
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std_mv.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut samples = Vec::with_capacity(cfg.leads * n);
    for lead in 0..cfg.leads {
        let g = lead_gain(lead);
        for &v in &clean {
            let e = if cfg.noise_std_mv > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // Quantize to f32 so records survive the on-disk format bit-exactly.
            samples.push((g * v + e) as f32 as f64);
        }
    }

    // Mean gap as nominal + mean deviation: exact when jitter is zero.
    let mean_dev = if gaps_ms.is_empty() {
        0.0
    } else {
        gaps_ms.iter().map(|g| g - rr_ms).sum::<f64>() / gaps_ms.len() as f64
    };
    let labels = TaskLabels {
        rr_interval_ms: Some(rr_ms + mean_dev),
        age_years: Some((25.0 + 0.45 * (cfg.heart_rate_bpm - 40.0) + age_noise).clamp(0.0, 120.0)),
        sex: Some(t_gain > 1.0),
        potassium_abnormal: Some(tpl.peaked_t),
        arrhythmia_class: Some(cfg.morphology_class),
    };
    let record = EcgRecord::from_flat(format!("synth-{}", cfg.seed), samples, cfg.leads, fs, labels)?;
    let truth = GroundTruth {
        r_peak_samples: times.iter().map(|t| (t * fs).round() as usize).collect(),
        r_peak_times_s: times,
        gaps_ms,
        t_gain,
    };
    Ok((record, truth))
}
