//! Beat morphology templates, one per arrhythmia class.
//!
//! Template table version 1. These rows are synthetic test scaffolding: they
//! make the 15 classes separable from the waveform, nothing more.

/// Number of morphology classes.
pub const NUM_CLASSES: usize = 15;

pub const TEMPLATE_TABLE_VERSION: u32 = 1;

/// Multipliers applied to the base P/Q/R/S/T bumps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MorphologyTemplate {
    pub name: &'static str,
    /// Amplitude multipliers for P, Q, R, S, T.
    pub amp: [f64; 5],
    /// Width multipliers for the P wave, the QRS bumps and the T wave.
    pub p_width: f64,
    pub qrs_width: f64,
    pub t_width: f64,
    /// Phase multiplier of the P offset (PR interval).
    pub pr: f64,
    /// Phase multiplier of the T offset (QT interval).
    pub qt: f64,
    /// Tall, narrow T wave (drives the potassium label).
    pub peaked_t: bool,
}

const fn row(
    name: &'static str,
    amp: [f64; 5],
    widths: [f64; 3],
    pr: f64,
    qt: f64,
    peaked_t: bool,
) -> MorphologyTemplate {
    MorphologyTemplate {
        name,
        amp,
        p_width: widths[0],
        qrs_width: widths[1],
        t_width: widths[2],
        pr,
        qt,
        peaked_t,
    }
}

pub const TEMPLATES: [MorphologyTemplate; NUM_CLASSES] = [
    row("normal", [1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("absent_p", [0.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("atrial_enlargement", [2.0, 1.0, 1.0, 1.0, 1.0], [1.4, 1.0, 1.0], 1.0, 1.0, false),
    row("wide_qrs", [1.0, 1.0, 0.8, 1.0, 1.0], [1.0, 2.0, 1.0], 1.0, 1.0, false),
    row("deep_s", [1.0, 1.0, 1.0, 2.5, 1.0], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("pathologic_q", [1.0, 3.5, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("inverted_t", [1.0, 1.0, 1.0, 1.0, -1.0], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("flat_t", [1.0, 1.0, 1.0, 1.0, 0.2], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("peaked_t", [1.0, 1.0, 1.0, 1.0, 2.2], [1.0, 1.0, 0.6], 1.0, 1.0, true),
    row("peaked_t_wide_qrs", [0.6, 1.0, 0.9, 1.0, 2.0], [1.0, 1.6, 0.6], 1.0, 1.0, true),
    row("long_qt", [1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.3], 1.0, 1.35, false),
    row("short_pr", [1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 0.6, 1.0, false),
    row("long_pr", [1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 1.6, 1.0, false),
    row("low_voltage", [0.5, 0.5, 0.5, 0.5, 0.5], [1.0, 1.0, 1.0], 1.0, 1.0, false),
    row("tall_r", [1.0, 1.0, 1.8, 1.6, -0.5], [1.0, 1.0, 1.0], 1.0, 1.0, false),
];

/// Base bump parameters (class "normal"): amplitude in mV, width (Gaussian
/// sigma) in seconds and offset relative to the R peak as a fraction of the
/// beat's RR interval.
pub(crate) const BASE_AMP_MV: [f64; 5] = [0.15, -0.15, 1.0, -0.25, 0.3];
pub(crate) const BASE_SIGMA_S: [f64; 5] = [0.025, 0.008, 0.010, 0.010, 0.045];
pub(crate) const BASE_PHASE: [f64; 5] = [-0.2, -0.03, 0.0, 0.035, 0.3];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_are_distinct() {
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                assert_ne!(TEMPLATES[i], TEMPLATES[j], "{} == {}", TEMPLATES[i].name, TEMPLATES[j].name);
            }
        }
        assert!(TEMPLATES.iter().any(|t| t.peaked_t));
    }
}
