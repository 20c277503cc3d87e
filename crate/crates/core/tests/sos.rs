mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitq_core::calibration::{calibrate_model, layerwise_post_ln, CalibOptions, CalibrationSet, SoftmaxQuantizer};
use vitq_core::model::{HookSite, Model, NoHooks, QuantHooks};
use vitq_core::quant::fake_quant_tensor;
use vitq_core::sos::*;
use vitq_core::teacher::{CacheOptions, TeacherCache};
use vitq_core::Error;

struct Setup {
    model: Model,
    calib: CalibrationSet,
}

fn setup(seed: u64) -> Setup {
    let cfg = config(2, 16, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&cfg, &mut rng);
    let calib = CalibrationSet::from_tokens(&random_tokens(48, 6, 16, &mut rng), None, 16).unwrap();
    Setup { model, calib }
}

fn sos_cfg(bits_w: u32, bits_a: u32, iterations: usize) -> SosConfig {
    SosConfig {
        lr: 1e-3,
        iterations,
        batch_size: 16,
        ..SosConfig::new(bits_w, bits_a, 0)
    }
}

fn cache(s: &Setup) -> TeacherCache {
    TeacherCache::build(&s.model, &s.calib, &CacheOptions::default()).unwrap()
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let s = setup(0);
    let (map, _) = calibrate_model(&s.model, &s.calib, &CalibOptions::sos(4, 4)).unwrap();
    let mut student = s.model.clone();
    let report = run_stage1(&mut student, &cache(&s), &map, &sos_cfg(4, 4, 0)).unwrap();
    for (a, b) in student.blocks.iter().zip(&s.model.blocks) {
        assert!(a.bitwise_eq(b));
    }
    assert!(report.records.is_empty());
    for sm in &report.summaries {
        assert_eq!(sm.before.to_bits(), sm.after.to_bits());
    }
}

#[test]
fn blocks_are_reconstructed_independently() {
    let s = setup(1);
    let (map, _) = calibrate_model(&s.model, &s.calib, &CalibOptions::sos(4, 4)).unwrap();
    let cfg = sos_cfg(4, 4, 10);
    let mut a = s.model.clone();
    run_stage1(&mut a, &cache(&s), &map, &cfg).unwrap();

    // a different block 1 must not change how block 0 is tuned
    let mut other = Setup {
        model: s.model.clone(),
        calib: s.calib.clone(),
    };
    for v in other.model.blocks[1].fc2_w.data_mut() {
        *v *= 1.5;
    }
    let mut b = other.model.clone();
    run_stage1(&mut b, &cache(&other), &map, &cfg).unwrap();
    assert!(a.blocks[0].bitwise_eq(&b.blocks[0]));
    assert!(!a.blocks[1].bitwise_eq(&b.blocks[1]));
    assert!(!a.blocks[0].bitwise_eq(&s.model.blocks[0]));
}

#[test]
fn pipeline_is_deterministic() {
    let s = setup(2);
    let cfg = sos_cfg(4, 4, 5);
    let a = run_pipeline(&s.model, &s.calib, &cfg, SoftmaxQuantizer::Sulq, Variant::Full).unwrap();
    let b = run_pipeline(&s.model, &s.calib, &cfg, SoftmaxQuantizer::Sulq, Variant::Full).unwrap();
    assert_eq!(
        a.model.to_container().to_bytes().unwrap(),
        b.model.to_container().to_bytes().unwrap()
    );
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(serde_json::to_string(&a.map).unwrap(), serde_json::to_string(&b.map).unwrap());
}

#[test]
fn four_bit_reconstruction_never_ends_worse() {
    for seed in 3..6 {
        let s = setup(seed);
        let out = run_pipeline(&s.model, &s.calib, &sos_cfg(4, 4, 40), SoftmaxQuantizer::Sulq, Variant::Full).unwrap();
        assert_eq!(out.report.summaries.len(), 4);
        for sm in &out.report.summaries {
            assert!(sm.after <= sm.before, "seed {seed}: {sm:?}");
        }
    }
}

#[test]
fn reparameterization_preserves_the_full_precision_model() {
    let s = setup(6);
    let (mut map, _) = calibrate_model(&s.model, &s.calib, &CalibOptions::sos(4, 4)).unwrap();
    let mut student = s.model.clone();
    let plans = run_stage2(&mut student, &mut map).unwrap();
    assert_eq!(plans.len(), 4);
    for batch in &s.calib.batches {
        let want = s.model.forward_blocks(batch, 0..2, &mut NoHooks).unwrap();
        let got = student.forward_blocks(batch, 0..2, &mut NoHooks).unwrap();
        assert!(rel_err(&f64s(&got), &f64s(&want)) <= 1e-5);
    }
    for (l, site) in [(0, HookSite::QkvInput), (1, HookSite::Fc1Input)] {
        let p = map[&site.name(l)].as_ref().unwrap();
        assert_eq!(p.channels(), 1);
    }
}

#[test]
fn stage3_requires_layerwise_post_layernorm_quantizers() {
    let s = setup(7);
    let (mut map, stats) = calibrate_model(&s.model, &s.calib, &CalibOptions::sos(4, 4)).unwrap();
    let mut student = s.model.clone();
    let err = run_stage3(&mut student, &cache(&s), &mut map, &sos_cfg(4, 4, 1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(student.blocks[0].bitwise_eq(&s.model.blocks[0]));
    layerwise_post_ln(&mut map, &stats, 4).unwrap();
    run_stage3(&mut student, &cache(&s), &mut map, &sos_cfg(4, 4, 1)).unwrap();
}

#[test]
fn stage3_at_eight_bits_improves_and_lands_on_the_grid() {
    let s = setup(8);
    let (mut map, stats) = calibrate_model(&s.model, &s.calib, &CalibOptions::sos(8, 8)).unwrap();
    layerwise_post_ln(&mut map, &stats, 8).unwrap();
    let mut student = s.model.clone();
    let report = run_stage3(&mut student, &cache(&s), &mut map, &sos_cfg(8, 8, 30)).unwrap();
    for sm in &report.summaries {
        assert!(sm.after <= sm.before, "{sm:?}");
    }
    for (l, blk) in student.blocks.iter().enumerate() {
        for site in HookSite::ALL.into_iter().filter(|s| s.is_weight()) {
            let w = blk.weight(site).unwrap();
            let p = map[&site.name(l)].as_ref().unwrap();
            let again = fake_quant_tensor(w, p).unwrap().dequantized;
            assert!(again.bitwise_eq(w), "{}", site.name(l));
        }
    }
}

#[test]
fn evaluation_matches_the_reported_final_losses() {
    let s = setup(9);
    let cfg = sos_cfg(4, 4, 5);
    let out = run_pipeline(&s.model, &s.calib, &cfg, SoftmaxQuantizer::Log2, Variant::Full).unwrap();
    let m = evaluate(&out.model, &out.map, &s.model, &s.calib, cfg.batch_size).unwrap();
    assert_eq!(m.samples, 48);
    assert!(m.accuracy.is_none());
    let finals: Vec<f64> = out.report.summaries.iter().filter(|s| s.stage == 3).map(|s| s.after).collect();
    for (got, want) in m.block_losses.iter().zip(&finals) {
        assert_eq!(got.to_bits(), want.to_bits(), "{got} vs {want}");
    }
    let nq = run_pipeline(&s.model, &s.calib, &cfg, SoftmaxQuantizer::Log2, Variant::NoOptimization).unwrap();
    assert!(nq.report.summaries.is_empty());
    let q = out.model.forward_blocks(&s.calib.batches[0], 0..2, &mut QuantHooks { map: &out.map }).unwrap();
    assert!(q.all_finite());
}
