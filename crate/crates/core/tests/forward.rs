mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitq_core::autograd::Tape;
use vitq_core::calibration::{calibrate_model, CalibOptions, CalibrationSet};
use vitq_core::checkpoint::MAGIC;
use vitq_core::model::{block_apply, HookSite, Model, NoHooks, QuantHooks, BLOCK_TENSORS};
use vitq_core::quant::Granularity;
use vitq_core::Tensor;

fn close(a: f64, r: f64, rel: f64) -> bool {
    (a - r).abs() <= rel * r.abs() + 1e-6
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        let want = ref_matmul(&f64s(&a), &f64s(&b), 4, 5, 3);
        assert_eq!(tape.value(out).shape(), &[4, 3]);
        for (got, want) in f64s(tape.value(out)).iter().zip(&want) {
            assert!(close(*got, *want, 1e-5), "{got} vs {want}");
        }
    }
}

#[test]
fn softmax_matches_exp_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[6, 17], 3.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v, 1).unwrap();
    let got = f64s(tape.value(out));
    for (r, row) in f64s(&x).chunks(17).enumerate() {
        for (g, w) in got[r * 17..(r + 1) * 17].iter().zip(ref_softmax(row)) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-30) + 1e-9, "{g} vs {w}");
        }
    }
}

#[test]
fn layernorm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[5, 32], 2.0, &mut rng);
    let g = Tensor::uniform(&[32], 0.5, 2.0, &mut rng);
    let b = Tensor::randn(&[32], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()));
    let out = tape.layernorm(vx, vg, vb, 1e-6).unwrap();
    let want = ref_layernorm(&f64s(&x), &f64s(&g), &f64s(&b), 1e-6);
    for (got, want) in f64s(tape.value(out)).iter().zip(&want) {
        assert!(close(*got, *want, 1e-5), "{got} vs {want}");
    }
}

#[test]
fn gelu_matches_erf_reference() {
    let xs = [-4.0f32, -1.3, -0.2, 0.0, 0.7, 1.0, 2.5, 6.0];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(xs.to_vec()));
    let out = tape.gelu(v);
    for (&x, &got) in xs.iter().zip(tape.value(out).data()) {
        let want = ref_gelu(x as f64);
        assert!((got as f64 - want).abs() <= 1e-6 * want.abs().max(1e-3), "gelu({x}) = {got}, want {want}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-60.0f32..60.0, 24)) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![3, 8], data).unwrap());
        let out = tape.softmax(v, 1).unwrap();
        for row in tape.value(out).data().chunks(8) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sums to {}", s);
        }
    }
}

#[test]
fn block_forward_matches_reference_on_100_seeds() {
    let cfg = config(1, 32, 4, 9);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = random_block(&cfg, &mut rng);
        let x = random_tokens(2, cfg.tokens, cfg.dim, &mut rng);
        let out = block_apply(&x, &blk, cfg.heads, 0, &mut NoHooks).unwrap();
        let again = block_apply(&x, &blk, cfg.heads, 0, &mut NoHooks).unwrap();
        assert!(out.bitwise_eq(&again), "seed {seed}: forward is not deterministic");
        let per = cfg.tokens * cfg.dim;
        for s in 0..2 {
            let want = ref_block(&f64s(&x)[s * per..(s + 1) * per], &blk, cfg.heads);
            let got = &f64s(&out)[s * per..(s + 1) * per];
            let e = rel_err(got, &want);
            assert!(e <= 1e-5, "seed {seed}, sample {s}: relative error {e:.3e}");
        }
    }
}

#[test]
fn rank_two_input_is_a_single_sample() {
    let cfg = config(1, 16, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let blk = random_block(&cfg, &mut rng);
    let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
    let out = block_apply(&x, &blk, 2, 0, &mut NoHooks).unwrap();
    assert_eq!(out.shape(), &[5, 16]);
    let e = rel_err(&f64s(&out), &ref_block(&f64s(&x), &blk, 2));
    assert!(e <= 1e-5);
}

#[test]
fn eight_bit_hooks_are_nearly_lossless() {
    for seed in 0..5 {
        let cfg = config(2, 32, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..2).map(|_| vit_init_block(&cfg, &mut rng)).collect();
        let model = Model::new(cfg.clone(), blocks, None);
        let tokens = random_tokens(32, cfg.tokens, cfg.dim, &mut rng);
        let calib = CalibrationSet::from_tokens(&tokens, None, 16).unwrap();
        let (mut map, stats) = calibrate_model(&model, &calib, &CalibOptions::sos(8, 8)).unwrap();
        let fp = model.forward_blocks(&tokens, 0..1, &mut NoHooks).unwrap();
        let sulq = model.forward_blocks(&tokens, 0..1, &mut QuantHooks { map: &map }).unwrap();
        // SULQ dequantizes to powers of two at any bit width, so the softmax
        // site gets a uniform quantizer for the near-lossless check
        for l in 0..2 {
            let name = HookSite::Softmax.name(l);
            map.insert(name.clone(), Some(stats[&name].uniform(8, Granularity::Layer).unwrap()));
        }
        let q = model.forward_blocks(&tokens, 0..1, &mut QuantHooks { map: &map }).unwrap();
        let e = rel_err(&f64s(&q), &f64s(&fp));
        assert!(e <= 1e-2, "seed {seed}: 8-bit relative error {e:.3e}");
        let e = rel_err(&f64s(&sulq), &f64s(&fp));
        assert!(e <= 0.2, "seed {seed}: 8-bit error with SULQ softmax {e:.3e}");
    }
}

/// Writes a container the way an external exporter would: PyTorch
/// `[out, in]` weight layout, no header padding, tensors in reverse name
/// order, each 64-byte aligned.
fn write_foreign_container(tensors: &[(String, Tensor)], metadata: &[(&str, String)]) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut meta = serde_json::Map::new();
    for (k, v) in metadata {
        meta.insert((*k).into(), serde_json::Value::String(v.clone()));
    }
    header.insert("__metadata__".into(), serde_json::Value::Object(meta));
    let mut data = Vec::new();
    for (name, t) in tensors.iter().rev() {
        while data.len() % 64 != 0 {
            data.push(0u8);
        }
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "f32",
                "shape": t.shape(),
                "offset": data.len(),
                "nbytes": t.len() * 4,
            }),
        );
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&serde_json::Value::Object(header)).unwrap();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

#[test]
fn exporter_file_loads_and_matches_recorded_outputs() {
    let cfg = config(2, 32, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let blocks: Vec<_> = (0..2).map(|_| random_block(&cfg, &mut rng)).collect();
    let input = random_tokens(3, cfg.tokens, cfg.dim, &mut rng);

    let mut tensors = Vec::new();
    for (l, blk) in blocks.iter().enumerate() {
        for ((name, transposed), t) in BLOCK_TENSORS.iter().zip(blk.params()) {
            let t = if *transposed { t.transpose_last().unwrap() } else { t.clone() };
            tensors.push((format!("blocks.{l}.{name}"), t));
        }
    }
    tensors.push(("reference.input".into(), input.clone()));
    let per = cfg.tokens * cfg.dim;
    let mut cur: Vec<Vec<f64>> = (0..3).map(|s| f64s(&input)[s * per..(s + 1) * per].to_vec()).collect();
    for (l, blk) in blocks.iter().enumerate() {
        cur = cur.iter().map(|x| ref_block(x, blk, cfg.heads)).collect();
        let flat: Vec<f32> = cur.iter().flatten().map(|&v| v as f32).collect();
        tensors.push((
            format!("reference.blocks.{l}.output"),
            Tensor::new(vec![3, cfg.tokens, cfg.dim], flat).unwrap(),
        ));
    }
    let bytes = write_foreign_container(
        &tensors,
        &[
            ("model.depth", "2".into()),
            ("model.dim", "32".into()),
            ("model.heads", "4".into()),
            ("model.mlp_ratio", "4".into()),
            ("model.tokens", "9".into()),
            ("exporter.source", "synthetic".into()),
        ],
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("export.qfck");
    std::fs::write(&path, bytes).unwrap();

    let model = Model::load(&path).unwrap();
    assert_eq!(model.blocks.len(), 2);
    assert_eq!(model.metadata.get("exporter.source").map(String::as_str), Some("synthetic"));
    let x = model.extras["reference.input"].clone();
    for l in 0..2 {
        let got = model.forward_blocks(&x, 0..l + 1, &mut NoHooks).unwrap();
        let want = &model.extras[&format!("reference.blocks.{l}.output")];
        let e = rel_err(&f64s(&got), &f64s(want));
        assert!(e <= 1e-4, "block {l}: relative error {e:.3e}");
    }
}
