mod common;

use common::tiny_config;
use ecgmoe::beats::{detect_r_peaks, segment_beats};
use ecgmoe::model::extractors::Extractor;
use ecgmoe::model::{ExtractorKind, ExtractorSpec, Task};
use ecgmoe::nn::{ops, LoraLayer, Tensor};
use ecgmoe::signal::{decode_record, encode_record, generate_synthetic_ecg, SyntheticConfig};
use ecgmoe::EcgMoe;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth() -> impl Strategy<Value = SyntheticConfig> {
    (
        any::<u64>(),
        40.0..180.0f64,
        0.0..0.1f64,
        0.0..0.05f64,
        1usize..4,
        3.0..8.0f64,
        prop_oneof![Just(250.0), Just(360.0), Just(500.0)],
        0u8..15,
    )
        .prop_map(|(seed, hr, jitter, noise, leads, duration, fs, class)| SyntheticConfig {
            seed,
            heart_rate_bpm: hr,
            hr_jitter_pct: jitter,
            noise_std_mv: noise,
            leads,
            duration_s: duration,
            sample_rate_hz: fs,
            morphology_class: class,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1..50.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[rows, cols], scale, &mut rng);
        let y = ops::softmax(&x);
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Shift invariance.
        let shifted = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v + 7.5).collect()).unwrap();
        for (a, b) in ops::softmax(&shifted).data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_is_a_distribution(stats in prop::collection::vec(-20.0..20.0f64, 6), task in 0usize..5, seed in 0u64..50) {
        let cfg = tiny_config();
        prop_assume!(cfg.stats_dim() == stats.len());
        let model = EcgMoe::<f64>::new(cfg, seed).unwrap();
        let w = model.gate(&Tensor::vector(stats), Task::ALL[task]).unwrap();
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_lora_update_is_the_base_layer(input in 1usize..10, output in 1usize..10, rank in 1usize..4, seed in any::<u64>()) {
        prop_assume!(rank <= input.min(output));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = LoraLayer::<f64>::new("l", input, output, rank, 2.0 * rank as f64, true, &mut rng).unwrap();
        prop_assert!(layer.adapter.b.value.data().iter().all(|&v| v == 0.0));
        let x = Tensor::uniform(&[input], 3.0, &mut rng);
        let (y, _) = layer.forward(&x).unwrap();
        prop_assert_eq!(y, layer.base.forward(&x).unwrap());
    }

    #[test]
    fn extractors_accept_any_length_from_64(t in 64usize..400, leads in 1usize..3, kind in 0usize..5, seed in any::<u64>()) {
        let cfg = ecgmoe::ModelConfig { leads, ..tiny_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ExtractorSpec { kind: ExtractorKind::ALL[kind], downsample_factor: None, output_dim: 8 };
        let ex = Extractor::<f64>::new("x", &spec, &cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[leads, t], 2.0, &mut rng);
        let (y, _) = ex.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), &[8]);
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_is_deterministic(cfg in synth()) {
        let a = generate_synthetic_ecg(&cfg).unwrap();
        let b = generate_synthetic_ecg(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.num_leads(), cfg.leads);
        prop_assert_eq!(a.len(), (cfg.duration_s * cfg.sample_rate_hz).round() as usize);
    }

    #[test]
    fn records_round_trip_through_bytes(cfg in synth()) {
        let r = generate_synthetic_ecg(&cfg).unwrap();
        let back = decode_record(&encode_record(&r), &r.record_id).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn znormalize_is_idempotent(cfg in synth()) {
        let z = generate_synthetic_ecg(&cfg).unwrap().znormalize().unwrap();
        let zz = z.znormalize().unwrap();
        for c in 0..z.num_leads() {
            let (mean, std) = ecgmoe::signal::mean_std(z.lead(c));
            prop_assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
        }
        for (a, b) in z.samples().iter().zip(zz.samples()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn segmentation_is_consistent(cfg in synth(), beat_len in 16usize..200) {
        let r = generate_synthetic_ecg(&cfg).unwrap();
        let peaks = detect_r_peaks(&r, 0).unwrap();
        prop_assert!(peaks.windows(2).all(|w| w[1] > w[0]));
        prop_assume!(peaks.len() >= 2);
        let b = segment_beats(&r, 0, &peaks, beat_len).unwrap();
        prop_assert_eq!(b.num_beats(), peaks.len());
        prop_assert_eq!(b.beats.len(), peaks.len() * beat_len);
        prop_assert_eq!(b.rr_ms.len(), peaks.len() - 1);
        for (rr, w) in b.rr_ms.iter().zip(peaks.windows(2)) {
            prop_assert!((rr - (w[1] - w[0]) as f64 * 1000.0 / cfg.sample_rate_hz).abs() < 1e-9);
            prop_assert!(*rr >= 200.0 - 1e-9);
        }
    }
}
