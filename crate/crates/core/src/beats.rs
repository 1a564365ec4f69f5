//! R-peak detection, beat segmentation and rhythm statistics.
//!
//! Detection follows Pan-Tompkins: band-pass, derivative, squaring,
//! moving-window integration, then adaptive signal/noise thresholds with
//! searchback and T-wave rejection. All filters are centered (zero phase) so
//! no delay compensation is needed.

use crate::error::{Error, Result};
use crate::signal::{mean_std, EcgRecord};

pub const DEFAULT_BEAT_LEN: usize = 128;
pub const REFRACTORY_S: f64 = 0.200;

#[derive(Clone, Debug, PartialEq)]
pub struct BeatSet {
    pub r_peaks: Vec<usize>,
    /// `[B × L]`, row-major.
    pub beats: Vec<f64>,
    pub beat_len: usize,
    pub rr_ms: Vec<f64>,
    pub source_lead: usize,
}

impl BeatSet {
    pub fn num_beats(&self) -> usize {
        self.r_peaks.len()
    }

    pub fn beat(&self, i: usize) -> &[f64] {
        &self.beats[i * self.beat_len..(i + 1) * self.beat_len]
    }
}

/// Centered moving average; windows are truncated at the edges.
fn centered_ma(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix[prefix.len() - 1] + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn odd(n: f64) -> usize {
    let k = n.round().max(1.0) as usize;
    k | 1
}

/// Intermediate Pan-Tompkins signals, exposed for inspection.
#[derive(Clone, Debug)]
pub struct PanTompkinsStages {
    pub bandpassed: Vec<f64>,
    pub derivative: Vec<f64>,
    pub integrated: Vec<f64>,
    /// Derivative of the high-passed signal after only a ~10 ms mean. Keeps
    /// the QRS much steeper than a T wave, which the band-pass blurs.
    pub steep: Vec<f64>,
}

pub fn pan_tompkins_stages(x: &[f64], fs: f64) -> PanTompkinsStages {
    // High-pass: subtract a 200 ms mean (first null at 5 Hz). Low-pass: two
    // cascaded ~33 ms means (-3 dB near 13 Hz).
    let base = centered_ma(x, odd(fs / 5.0));
    let hp: Vec<f64> = x.iter().zip(&base).map(|(a, b)| a - b).collect();
    let w = odd(fs / 30.0);
    let bandpassed = centered_ma(&centered_ma(&hp, w), w);

    let derivative = five_point_derivative(&bandpassed, fs);
    let squared: Vec<f64> = derivative.iter().map(|d| d * d).collect();
    let integrated = centered_ma(&squared, odd(0.150 * fs));
    let steep = five_point_derivative(&centered_ma(&hp, odd(fs / 100.0)), fs);
    PanTompkinsStages {
        bandpassed,
        derivative,
        integrated,
        steep,
    }
}

fn five_point_derivative(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len();
    let at = |i: isize| -> f64 { x[i.clamp(0, n as isize - 1) as usize] };
    (0..n as isize)
        .map(|i| (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) * fs / 8.0)
        .collect()
}

/// Local maxima of `x`, pruned greedily by height so that kept peaks are at
/// least `min_dist` apart. Returned in time order.
fn distant_local_maxima(x: &[f64], min_dist: usize) -> Vec<usize> {
    let n = x.len();
    let mut cand: Vec<usize> = (0..n)
        .filter(|&i| {
            let l = if i > 0 { x[i - 1] } else { f64::NEG_INFINITY };
            let r = if i + 1 < n { x[i + 1] } else { f64::NEG_INFINITY };
            x[i] > 0.0 && x[i] >= l && x[i] > r
        })
        .collect();
    cand.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut taken = vec![false; n];
    let mut kept = Vec::new();
    for i in cand {
        let lo = i.saturating_sub(min_dist - 1);
        let hi = (i + min_dist).min(n);
        if taken[lo..hi].iter().any(|&t| t) {
            continue;
        }
        taken[i] = true;
        kept.push(i);
    }
    kept.sort_unstable();
    kept
}

/// Cycle length in samples from the autocorrelation of the integrated
/// energy, searched over 0.25-2 s (30-240 bpm). R-R and T-T alignments add up
/// at the true period, so it beats the R-T lag.
fn dominant_period(mwi: &[f64], fs: f64) -> Option<f64> {
    let n = mwi.len().min((20.0 * fs) as usize);
    let x = &mwi[..n];
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let (lo, hi) = ((0.25 * fs) as usize, ((2.0 * fs) as usize).min(n.saturating_sub(1)));
    if lo + 2 > hi {
        return None;
    }
    let ac: Vec<f64> = (lo - 1..=hi).map(|lag| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum()).collect();
    (1..ac.len() - 1)
        .filter(|&i| ac[i] > 0.0 && ac[i] >= ac[i - 1] && ac[i] > ac[i + 1])
        .max_by(|&a, &b| ac[a].total_cmp(&ac[b]))
        .map(|i| (i + lo - 1) as f64)
}

struct ThresholdState {
    spki: f64,
    npki: f64,
}

impl ThresholdState {
    fn thr1(&self) -> f64 {
        self.npki + 0.25 * (self.spki - self.npki)
    }
}

/// Detects R-peaks on one lead. Returned indices are strictly increasing and
/// at least 200 ms apart.
pub fn detect_r_peaks(record: &EcgRecord, lead: usize) -> Result<Vec<usize>> {
    if lead >= record.num_leads() {
        return Err(Error::InvalidHyper(format!(
            "detection lead {lead} out of range for {} leads",
            record.num_leads()
        )));
    }
    let fs = record.sample_rate_hz;
    if record.duration_s() < 2.0 {
        return Err(Error::TooShortSignal {
            duration_s: record.duration_s(),
            min_s: 2.0,
        });
    }
    let x = record.lead(lead);
    let st = pan_tompkins_stages(x, fs);
    let mwi = &st.integrated;
    let refractory = ((REFRACTORY_S * fs).round() as usize).max(1);
    let candidates = distant_local_maxima(mwi, refractory);

    let learn = (2.0 * fs) as usize;
    let head = &mwi[..learn.min(mwi.len())];
    let mut th = ThresholdState {
        spki: 0.25 * head.iter().copied().fold(0.0, f64::max),
        npki: 0.5 * head.iter().sum::<f64>() / head.len() as f64,
    };

    let rr_prior = dominant_period(mwi, fs);
    let slope_half = (0.075 * fs).round() as usize;
    let max_slope = |i: usize| -> f64 {
        let lo = i.saturating_sub(slope_half);
        let hi = (i + slope_half + 1).min(st.steep.len());
        st.steep[lo..hi].iter().fold(0.0, |m, d| m.max(d.abs()))
    };

    // Accepted QRS positions in the integrated signal, with their slopes.
    let mut qrs: Vec<(usize, f64)> = Vec::new();
    let mut accepted = vec![false; candidates.len()];
    let rr_avg = |qrs: &[(usize, f64)]| -> Option<f64> {
        if qrs.len() < 2 {
            return None;
        }
        let k = qrs.len().min(9);
        let tail = &qrs[qrs.len() - k..];
        Some((tail[k - 1].0 - tail[0].0) as f64 / (k - 1) as f64)
    };

    let searchback = |until: usize,
                      qrs: &mut Vec<(usize, f64)>,
                      accepted: &mut Vec<bool>,
                      th: &mut ThresholdState| {
        let Some(&(last, _)) = qrs.last() else { return };
        let Some(avg) = rr_avg(qrs) else { return };
        if (until - last) as f64 <= 1.66 * avg {
            return;
        }
        let thr2 = 0.5 * th.thr1();
        let best = candidates
            .iter()
            .enumerate()
            .filter(|&(k, &c)| !accepted[k] && c > last + refractory && c < until && mwi[c] > thr2)
            .max_by(|a, b| mwi[*a.1].total_cmp(&mwi[*b.1]));
        if let Some((k, &c)) = best {
            accepted[k] = true;
            th.spki = 0.25 * mwi[c] + 0.75 * th.spki;
            qrs.push((c, max_slope(c)));
        }
    };

    for (k, &c) in candidates.iter().enumerate() {
        searchback(c, &mut qrs, &mut accepted, &mut th);
        let pk = mwi[c];
        if pk > th.thr1() {
            let slope = max_slope(c);
            // The T wave trails the QRS by a fraction of the cycle, so the
            // window follows the RR estimate. A peaked T keeps more than half
            // the QRS slope once noise is added, hence 0.75 rather than 0.5.
            let rr_ref = rr_avg(&qrs).or(rr_prior).unwrap_or(0.600 * fs);
            let t_wave_window = (0.6 * rr_ref).max(0.360 * fs);
            let is_t_wave = qrs
                .last()
                .is_some_and(|&(p, s)| ((c - p) as f64) < t_wave_window && slope < 0.75 * s);
            if is_t_wave {
                th.npki = 0.125 * pk + 0.875 * th.npki;
                continue;
            }
            th.spki = 0.125 * pk + 0.875 * th.spki;
            accepted[k] = true;
            qrs.push((c, slope));
        } else {
            th.npki = 0.125 * pk + 0.875 * th.npki;
        }
    }
    searchback(mwi.len(), &mut qrs, &mut accepted, &mut th);
    qrs.sort_unstable_by_key(|q| q.0);

    // Refine each integrated-energy peak: first to the steepest point, then
    // to the signal maximum around it. At high rates the T wave merges into
    // the energy peak and pulls it late, hence the window reaching further
    // back than forward.
    let half = (0.050 * fs).round() as usize;
    let (back, ahead) = ((0.150 * fs).round() as usize, (0.075 * fs).round() as usize);
    let mut peaks: Vec<usize> = Vec::with_capacity(qrs.len());
    for (c, _) in qrs {
        let steepest = (c.saturating_sub(back)..(c + ahead + 1).min(x.len()))
            .max_by(|&a, &b| st.steep[a].abs().total_cmp(&st.steep[b].abs()).then(b.cmp(&a)))
            .unwrap_or(c);
        let lo = steepest.saturating_sub(half);
        let hi = (steepest + half + 1).min(x.len());
        let r = (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a))).unwrap_or(c);
        match peaks.last() {
            Some(&prev) if r <= prev || r - prev < refractory => {
                if x[r] > x[prev] && r > prev {
                    *peaks.last_mut().expect("non-empty") = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    if peaks.is_empty() {
        return Err(Error::NoPeaksFound);
    }
    Ok(peaks)
}

/// Linear interpolation of `w` onto `l` points spanning the same interval.
pub fn resample_linear(w: &[f64], l: usize) -> Vec<f64> {
    let n = w.len();
    if n == 1 || l == 1 {
        return vec![w[0]; l];
    }
    let step = (n - 1) as f64 / (l - 1) as f64;
    (0..l)
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(n - 2);
            let frac = pos - i as f64;
            if frac == 0.0 {
                w[i]
            } else {
                w[i] + (w[i + 1] - w[i]) * frac
            }
        })
        .collect()
}

/// Cuts midpoint-to-midpoint windows around each peak and resamples each to
/// `beat_len` samples. The first and last beats get windows mirrored about
/// their peak.
pub fn segment_beats(record: &EcgRecord, lead: usize, r_peaks: &[usize], beat_len: usize) -> Result<BeatSet> {
    if r_peaks.len() < 2 {
        return Err(Error::InsufficientPeaks { found: r_peaks.len() });
    }
    if beat_len < 2 {
        return Err(Error::InvalidHyper(format!("beat length {beat_len} must be >= 2")));
    }
    if r_peaks.windows(2).any(|w| w[1] <= w[0]) || *r_peaks.last().expect("non-empty") >= record.len() {
        return Err(Error::InvalidHyper("R-peaks must be strictly increasing and in range".into()));
    }
    let x = record.lead(lead);
    let n = r_peaks.len();
    let mids: Vec<usize> = r_peaks.windows(2).map(|w| (w[0] + w[1]) / 2).collect();
    let mut beats = Vec::with_capacity(n * beat_len);
    for i in 0..n {
        let p = r_peaks[i];
        let start = if i == 0 { p.saturating_sub(mids[0] - p) } else { mids[i - 1] };
        let end = if i == n - 1 {
            (p + (p - mids[n - 2])).min(record.len())
        } else {
            mids[i]
        };
        let end = end.max(start + 1);
        beats.extend(resample_linear(&x[start..end], beat_len));
    }
    let to_ms = 1000.0 / record.sample_rate_hz;
    let rr_ms = r_peaks.windows(2).map(|w| (w[1] - w[0]) as f64 * to_ms).collect();
    Ok(BeatSet {
        r_peaks: r_peaks.to_vec(),
        beats,
        beat_len,
        rr_ms,
        source_lead: lead,
    })
}

/// Evenly spaced pseudo-peaks every `period_ms`, starting half a period in.
/// Segmenting on these ignores the cardiac cycle entirely.
pub fn fixed_grid_peaks(len: usize, sample_rate_hz: f64, period_ms: f64) -> Vec<usize> {
    let step = period_ms * sample_rate_hz / 1000.0;
    let mut out = Vec::new();
    let mut t = 0.5 * step;
    while (t.round() as usize) < len {
        out.push(t.round() as usize);
        t += step;
    }
    out.dedup();
    out
}

/// Number of entries of [`global_stats`] for `leads` leads.
pub fn global_stats_dim(leads: usize) -> usize {
    2 * leads + 4
}

/// `[mean_0, std_0, …, mean_{C-1}, std_{C-1}, rr_mean, rr_std, rr_min, rr_max]`
/// with RR statistics in ms.
pub fn global_stats(record: &EcgRecord, beats: &BeatSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(global_stats_dim(record.num_leads()));
    for c in 0..record.num_leads() {
        let (m, s) = mean_std(record.lead(c));
        out.push(m);
        out.push(s);
    }
    let (m, s) = mean_std(&beats.rr_ms);
    out.push(m);
    out.push(s);
    out.push(beats.rr_ms.iter().copied().fold(f64::INFINITY, f64::min));
    out.push(beats.rr_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_with_truth, SyntheticConfig, TaskLabels};

    fn flat(len: usize, fs: f64) -> EcgRecord {
        EcgRecord::new("flat", vec![vec![0.0; len]], fs, TaskLabels::default()).unwrap()
    }

    #[test]
    fn noiseless_hr60_matches_truth() {
        let cfg = SyntheticConfig {
            heart_rate_bpm: 60.0,
            ..Default::default()
        };
        let (rec, truth) = generate_with_truth(&cfg).unwrap();
        let peaks = detect_r_peaks(&rec, 0).unwrap();
        assert!((9..=11).contains(&peaks.len()), "{peaks:?}");
        for t in &truth.r_peak_samples {
            let nearest = peaks.iter().map(|&p| (p as i64 - *t as i64).abs()).min().unwrap();
            assert!(nearest <= 5, "peak {t} off by {nearest} samples");
        }
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(matches!(detect_r_peaks(&flat(2000, 500.0), 0), Err(Error::NoPeaksFound)));
    }

    #[test]
    fn bad_lead_is_rejected() {
        assert!(detect_r_peaks(&flat(2000, 500.0), 1).is_err());
    }

    #[test]
    fn uniform_peaks_give_uniform_beats() {
        let rec = flat(2000, 500.0);
        let peaks = [200, 500, 800, 1100, 1400];
        let bs = segment_beats(&rec, 0, &peaks, 128).unwrap();
        assert_eq!(bs.beats.len(), 5 * 128);
        assert!(bs.rr_ms.iter().all(|&r| r == 600.0));
    }

    #[test]
    fn resample_identity_and_linearity() {
        let w: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = resample_linear(&w, 128);
        assert!(w.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-9));
        let ramp: Vec<f64> = (0..301).map(|i| 2.0 * i as f64 - 7.0).collect();
        let r = resample_linear(&ramp, 128);
        let step = 300.0 / 127.0;
        for (j, v) in r.iter().enumerate() {
            assert!((v - (2.0 * j as f64 * step - 7.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_needs_two_peaks() {
        let rec = flat(2000, 500.0);
        assert!(matches!(
            segment_beats(&rec, 0, &[100], 128),
            Err(Error::InsufficientPeaks { found: 1 })
        ));
    }

    #[test]
    fn stats_layout() {
        let cfg = SyntheticConfig {
            heart_rate_bpm: 60.0,
            leads: 2,
            ..Default::default()
        };
        let (rec, _) = generate_with_truth(&cfg).unwrap();
        let z = rec.znormalize().unwrap();
        let peaks = detect_r_peaks(&z, 0).unwrap();
        let bs = segment_beats(&z, 0, &peaks, 128).unwrap();
        let s = global_stats(&z, &bs);
        assert_eq!(s.len(), global_stats_dim(2));
        assert!(s[0].abs() < 1e-6 && (s[1] - 1.0).abs() < 1e-6);
        let period_ms = 2.0;
        assert!((s[4] - 1000.0).abs() <= period_ms);
        assert!(s[5] <= period_ms);
        assert!((s[6] - 1000.0).abs() <= period_ms && (s[7] - 1000.0).abs() <= period_ms);
    }

    #[test]
    fn fixed_grid_spacing() {
        let g = fixed_grid_peaks(5000, 500.0, 800.0);
        assert_eq!(g[0], 200);
        assert!(g.windows(2).all(|w| w[1] - w[0] == 400));
    }
}
