#![allow(dead_code)]

pub mod opcheck;
pub mod oracles;

use ecgmoe::model::{ExtractorKind, ExtractorSpec, ModelConfig, PreparedRecord, Task};
use ecgmoe::nn::{Module, Tensor};
use ecgmoe::signal::{generate_synthetic_ecg, EcgRecord, SyntheticConfig};
use ecgmoe::{EcgMoe, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every extractor kind, at dimensions small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        extractors: ExtractorKind::ALL
            .into_iter()
            .map(|kind| ExtractorSpec {
                kind,
                downsample_factor: None,
                output_dim: 8,
            })
            .collect(),
        extractor_heads: 2,
        patch_len: 8,
        trend_kernel: 5,
        decomp_bins: 8,
        fold_channels: 3,
        beat_len: 16,
        morph_kernels: vec![3, 5, 7],
        expert_channels: 3,
        d_e: 8,
        d_p: 6,
        d_t: 4,
        attention_heads: 2,
        d_h: 6,
        lora_rank: 2,
        contrastive_dim: 4,
        ..Default::default()
    }
}

pub fn tiny_record(seed: u64) -> EcgRecord {
    generate_synthetic_ecg(&SyntheticConfig {
        seed,
        heart_rate_bpm: 80.0 + (seed % 7) as f64 * 10.0,
        hr_jitter_pct: 0.05,
        noise_std_mv: 0.02,
        duration_s: 3.0,
        sample_rate_hz: 100.0,
        morphology_class: (seed % 15) as u8,
        ..Default::default()
    })
    .unwrap()
}

/// Makes every LoRA `B` nonzero so adapter gradients are exercised, and
/// moves biases off zero so no ReLU input sits exactly on its kink.
pub fn randomize_lora<S: Scalar>(model: &mut EcgMoe<S>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in &mut model.fusion.adapters {
        a.b.value = Tensor::uniform(a.b.shape(), 0.5, &mut rng);
    }
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            p.value = Tensor::uniform(p.value.shape(), 0.1, &mut rng);
        }
    }
}

/// Smooth scalar objective over all five task heads:
/// `sum_t (c_t · out_t + 0.5 |out_t|²)`, with its backward when `grad`.
pub fn full_objective(model: &mut EcgMoe<f64>, x: &PreparedRecord<f64>, grad: bool) -> Result<f64> {
    let shared = model.forward_shared(x)?;
    let mut states = Vec::new();
    let mut loss = 0.0;
    for t in Task::ALL {
        let s = model.forward_task(x, &shared, t)?;
        let d: Vec<f64> = s
            .output
            .data()
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let c = 0.3 * ((i + 3 * t.index()) as f64).sin();
                loss += c * o + 0.5 * o * o;
                c + o
            })
            .collect();
        states.push((s, Tensor::vector(d)));
    }
    if grad {
        let mut g = model.shared_grads(&shared);
        for (s, d) in &states {
            model.backward_task(s, d, None, &mut g);
        }
        model.backward_shared(&shared, &g);
    }
    Ok(loss)
}

pub fn param_count<S: Scalar, M: Module<S>>(m: &M) -> usize {
    m.num_params()
}

/// Prepared tiny records with target statistics fit on them.
pub fn tiny_data(model: &mut EcgMoe<f64>, seeds: std::ops::Range<u64>) -> Vec<PreparedRecord<f64>> {
    let records: Vec<EcgRecord> = seeds.map(tiny_record).collect();
    model.fit_target_norms(records.iter().map(|r| &r.labels));
    records.iter().map(|r| model.prepare(r).unwrap()).collect()
}

/// Corrupts a valid checkpoint in many ways and checks that decoding returns
/// an error instead of panicking. Every truncation within the header and a
/// sample of later ones must fail; random byte flips must not panic. Returns
/// the number of corrupted inputs tried.
pub fn fuzz_checkpoint(bytes: &[u8], cfg: &ModelConfig, seed: u64) -> std::result::Result<usize, String> {
    use ecgmoe::training::decode_checkpoint;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tried = 0;
    let mut cuts: Vec<usize> = (0..bytes.len().min(160)).collect();
    cuts.extend((0..200).map(|_| rng.random_range(0..bytes.len())));
    for cut in cuts {
        match decode_checkpoint::<f64>(&bytes[..cut], cfg) {
            Err(ecgmoe::Error::Format { offset, .. }) if offset as usize <= cut => {}
            Err(e) => return Err(format!("truncation at {cut}: unexpected error {e}")),
            Ok(_) => return Err(format!("truncation at {cut} decoded")),
        }
        tried += 1;
    }
    let mut bad_magic = bytes.to_vec();
    bad_magic[0] ^= 0xff;
    match decode_checkpoint::<f64>(&bad_magic, cfg) {
        Err(ecgmoe::Error::Format { offset: 0, .. }) => {}
        other => return Err(format!("bad magic gave {:?}", other.err())),
    }
    let mut version = bytes.to_vec();
    version[8] = version[8].wrapping_add(1);
    if !matches!(decode_checkpoint::<f64>(&version, cfg), Err(ecgmoe::Error::VersionMismatch { .. })) {
        return Err("version bump not reported".into());
    }
    let mut digest = bytes.to_vec();
    digest[20] ^= 1;
    if !matches!(decode_checkpoint::<f64>(&digest, cfg), Err(ecgmoe::Error::ConfigDigestMismatch)) {
        return Err("digest change not reported".into());
    }
    let mut trailing = bytes.to_vec();
    trailing.push(0);
    if !matches!(decode_checkpoint::<f64>(&trailing, cfg), Err(ecgmoe::Error::Format { .. })) {
        return Err("trailing byte not reported".into());
    }
    tried += 4;
    for _ in 0..300 {
        let mut b = bytes.to_vec();
        // Bias toward the header and the first parameter's framing.
        let pos = if rng.random_bool(0.7) {
            rng.random_range(0..bytes.len().min(256))
        } else {
            rng.random_range(0..bytes.len())
        };
        b[pos] ^= 1 << rng.random_range(0..8);
        let _ = decode_checkpoint::<f64>(&b, cfg);
        tried += 1;
    }
    Ok(tried)
}
