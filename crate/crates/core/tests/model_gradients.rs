//! Finite-difference checks through the whole encoder-decoder and through the
//! zero-shot path with the transform.

use microcast_core::data::{Normalizer, LOC_DIM};
use microcast_core::model::{Forward, ModelConfig, TRANSFORM};
use microcast_core::transform::{Merge, ZeroShotModel};
use microcast_tensor::gradcheck::check;
use microcast_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn micro() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        d_inner: 6,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        label_len: 3,
        lx: 6,
        ly: 3,
        n_features: 2,
    }
}

fn model(n_sources: usize) -> ZeroShotModel {
    let norm = Normalizer {
        channels: vec!["t".into(), "h".into()],
        target_index: 0,
        channel_mean: vec![0.0, 0.0],
        channel_std: vec![1.0, 1.0],
        loc_mean: [0.0; LOC_DIM],
        loc_std: [1.0; LOC_DIM],
    };
    let ids = (0..n_sources).map(|i| format!("S{i}")).collect();
    let mut m = ZeroShotModel::init(micro(), norm, ids, 5).unwrap();
    // move δ and the logits away from their identity start
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let idx: Vec<usize> = m
        .store
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with(TRANSFORM))
        .map(|(i, _)| i)
        .collect();
    for i in idx {
        for v in m.store.tensors_mut()[i].data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn series(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn mse(tape: &mut Tape, pred: Var, y: &[f64]) -> microcast_tensor::Result<Var> {
    let y = tape.constant(Tensor::new(vec![y.len(), 1], y.to_vec())?);
    tape.mse(pred, y)
}

fn to_core(e: microcast_core::error::Error) -> microcast_tensor::TensorError {
    match e {
        microcast_core::error::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn encoder_decoder_matches_finite_differences() {
    let m = model(1);
    let c = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = series(&mut rng, c.lx * c.n_features);
    let ctx = series(&mut rng, c.label_len);
    let y = series(&mut rng, c.ly);
    let anchor = 24 * 400 + 5;
    let inputs: Vec<Tensor> = m.store.tensors().to_vec();
    let r = check(&inputs, H, |tape, vars| {
        let mut fw = Forward::eval(&m.store);
        for (i, v) in vars.iter().enumerate() {
            fw.preset(i, *v);
        }
        let pred = m.backbone.forward(tape, &mut fw, &x, &ctx, anchor).map_err(to_core)?;
        mse(tape, pred, &y)
    })
    .unwrap();
    assert!(r.checked > 1000);
    assert!(
        r.max_rel_err < 1e-3,
        "rel err {:.3e} in {}",
        r.max_rel_err,
        m.store.names()[r.worst_input]
    );
}

#[test]
fn zero_shot_path_matches_finite_differences() {
    let m = model(3);
    let c = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| series(&mut rng, c.lx * c.n_features)).collect();
    let locs: Vec<[f64; LOC_DIM]> = (0..3)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
        .collect();
    let target = [0.2, -0.4, 0.0];
    let ctx = series(&mut rng, c.label_len);
    let y = series(&mut rng, c.ly);
    let anchor = 24 * 100 + 17;
    let inputs: Vec<Tensor> = m.store.tensors().to_vec();
    let r = check(&inputs, H, |tape, vars| {
        let mut fw = Forward::eval(&m.store);
        for (i, v) in vars.iter().enumerate() {
            fw.preset(i, *v);
        }
        let mut enc = Vec::new();
        for (slot, x) in xs.iter().enumerate() {
            let e = m.backbone.encode_window(tape, &mut fw, x, anchor).map_err(to_core)?;
            enc.push((slot, e, locs[slot]));
        }
        let merged = m
            .merged_embedding(tape, &mut fw, &enc, &target, Merge::Transform)
            .map_err(to_core)?;
        let pred = m.backbone.decode_from(tape, &mut fw, merged, &ctx, anchor).map_err(to_core)?;
        mse(tape, pred, &y)
    })
    .unwrap();
    assert!(
        r.max_rel_err < 1e-3,
        "rel err {:.3e} in {}",
        r.max_rel_err,
        m.store.names()[r.worst_input]
    );
}

#[test]
fn transform_layer_matches_finite_differences() {
    let m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e0 = Tensor::new(vec![6, 4], series(&mut rng, 24)).unwrap();
    let e1 = Tensor::new(vec![6, 4], series(&mut rng, 24)).unwrap();
    let names: Vec<usize> = m
        .store
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with(TRANSFORM))
        .map(|(i, _)| i)
        .collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|&i| m.store.tensors()[i].clone()).collect();
    inputs.push(e0);
    inputs.push(e1);
    let k = names.len();
    let r = check(&inputs, H, |tape, vars| {
        let mut fw = Forward::eval(&m.store);
        for (j, &i) in names.iter().enumerate() {
            fw.preset(i, vars[j]);
        }
        let enc = [(0, vars[k], [0.1, 0.5, 0.0]), (1, vars[k + 1], [-0.7, 0.2, 0.0])];
        let merged = m
            .merged_embedding(tape, &mut fw, &enc, &[0.3, 0.3, 0.0], Merge::Transform)
            .map_err(to_core)?;
        let w = tape.constant(Tensor::new(vec![6, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect())?);
        let p = tape.mul(merged, w)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "rel err {:.3e}", r.max_rel_err);
}
