//! Finite-difference checks for every differentiable op.

use microcast_tensor::gradcheck::{check, GradCheck};
use microcast_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random projection,
/// so every output element contributes a distinct weight.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &shape);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn assert_ok(name: &str, r: GradCheck) {
    assert!(
        r.max_rel_err < TOL,
        "{name}: rel err {:.3e} at input {} index {}",
        r.max_rel_err,
        r.worst_input,
        r.worst_index
    );
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let r = check(&inputs, H, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(project(t, c, 9))
    })
    .unwrap();
    assert_ok("matmul", r);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[3, 5])];
    let cases: Vec<(&str, fn(&mut Tape, Var, Var) -> Var)> = vec![
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("scale", |t, a, _| t.scale(a, -2.5)),
        ("gelu", |t, a, _| t.gelu(a)),
        ("softplus", |t, a, _| t.softplus(a)),
        ("transpose", |t, a, _| t.transpose(a).unwrap()),
        ("slice_cols", |t, a, _| t.slice_cols(a, 1, 3).unwrap()),
        ("concat_cols", |t, a, b| t.concat_cols(&[a, b, a]).unwrap()),
        ("mse", |t, a, b| t.mse(a, b).unwrap()),
        ("mean", |t, a, _| t.mean(a)),
    ];
    for (name, f) in cases {
        let r = check(&inputs, H, |t, v| {
            let y = f(t, v[0], v[1]);
            Ok(project(t, y, 5))
        })
        .unwrap();
        assert_ok(name, r);
    }
}

#[test]
fn recip_gradient_away_from_zero() {
    let x = Tensor::vector(vec![0.7, -1.3, 2.0, 0.9]);
    let r = check(&[x], H, |t, v| {
        let y = t.recip(v[0]);
        Ok(project(t, y, 3))
    })
    .unwrap();
    assert_ok("recip", r);
}

#[test]
fn normalised_weights_gradient() {
    let x = Tensor::vector(vec![0.4, -1.1, 0.8]);
    let r = check(&[x], H, |t, v| {
        let sp = t.softplus(v[0]);
        let total = t.sum(sp);
        let w = t.div_by(sp, total)?;
        Ok(project(t, w, 6))
    })
    .unwrap();
    assert_ok("div_by", r);
}

#[test]
fn single_weight_normalises_to_exactly_one() {
    let mut t = Tape::new();
    let x = t.watch(Tensor::vector(vec![-3.7]));
    let sp = t.softplus(x);
    let total = t.sum(sp);
    let w = t.div_by(sp, total).unwrap();
    assert_eq!(t.value(w).data(), &[1.0]);
}

#[test]
fn broadcast_and_scalar_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[2]),
    ];
    let r = check(&inputs, H, |t, v| {
        let a = t.add_row(v[0], v[1])?;
        let s = t.select(v[2], 1)?;
        let b = t.scale_by(a, s)?;
        let rep = t.repeat_rows(v[1], 4);
        let c = t.add(b, rep)?;
        Ok(project(t, c, 4))
    })
    .unwrap();
    assert_ok("add_row/scale_by/select/repeat_rows", r);
}

#[test]
fn softmax_gradients_each_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        let r = check(std::slice::from_ref(&x), H, |t, v| {
            let y = t.softmax(v[0], axis)?;
            Ok(project(t, y, 6))
        })
        .unwrap();
        assert_ok("softmax", r);
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6]),
    ];
    let r = check(&inputs, H, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        Ok(project(t, y, 7))
    })
    .unwrap();
    assert_ok("layer_norm", r);
}

#[test]
fn dropout_and_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [rand_tensor(&mut rng, &[5, 3]), rand_tensor(&mut rng, &[4, 3])];
    let r = check(&inputs, H, |t, v| {
        let d = t.dropout(v[0], 0.3, 42)?;
        let g = t.gather_rows(v[1], &[0, 2, 2, 3, 0])?;
        let s = t.add(d, g)?;
        Ok(project(t, s, 8))
    })
    .unwrap();
    assert_ok("dropout/gather_rows", r);
}

#[test]
fn attention_block_gradients() {
    // q kᵀ / sqrt(d) -> softmax -> · v, the composite the model leans on most.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[6, 4]),
        rand_tensor(&mut rng, &[6, 4]),
    ];
    let r = check(&inputs, H, |t, v| {
        let kt = t.transpose(v[1])?;
        let s = t.matmul(v[0], kt)?;
        let s = t.scale(s, 0.5);
        let a = t.softmax(s, 1)?;
        let o = t.matmul(a, v[2])?;
        Ok(project(t, o, 10))
    })
    .unwrap();
    assert_ok("attention", r);
}

#[test]
fn identity_matmul_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[4, 4]);
    let mut t = Tape::new();
    let i = t.constant(Tensor::eye(4));
    let av = t.constant(a.clone());
    let left = t.matmul(i, av).unwrap();
    let right = t.matmul(av, i).unwrap();
    for ((l, r), x) in t
        .value(left)
        .data()
        .iter()
        .zip(t.value(right).data())
        .zip(a.data())
    {
        assert!((l - x).abs() <= 1e-12 && (r - x).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_simplex(values in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(values));
        let y = t.softmax(x, 0).unwrap();
        let out = t.value(y).data();
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
