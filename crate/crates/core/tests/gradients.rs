//! Analytic gradients against central finite differences.

use cal_core::align::{AlignmentMap, MapSpec};
use cal_core::autodiff::{Tape, Tensor, Var};
use cal_core::mlp::{Mlp, MlpConfig};
use cal_core::rng;
use rand::Rng as _;

const STEP: f64 = 1e-6;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "grad-test");
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Values bounded away from zero so relu kinks are never crossed.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = random(rows, cols, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Reduce a matrix output to a scalar through a fixed random mixing and a
/// cross-entropy, so every output entry influences the loss.
fn reduce(tape: &mut Tape, out: Var) -> Var {
    let (rows, cols) = tape.dims(out);
    let mix = random(cols, 3, 777 + cols as u64);
    let m = tape.leaf(&mix);
    let mixed = tape.matmul(out, m).unwrap();
    let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    tape.softmax_cross_entropy(mixed, &labels).unwrap()
}

/// Largest relative error over all inputs between the tape gradient of
/// `build` and central differences.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_with(inputs, |tape, xs| {
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let root = build(tape, &vars);
        (root, vars)
    })
}

/// Like [`check`], but `build` registers the inputs itself and returns the
/// handles whose gradients correspond to them.
fn check_with<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>),
{
    let scalar = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let (root, _) = build(&mut tape, xs);
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let (root, vars) = build(&mut tape, inputs);
    let grads = tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric[j] = (scalar(&plus) - scalar(&minus)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

#[test]
fn matmul_gradient_example() {
    let mut tape = Tape::new();
    let a = tape.param(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(&Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
}

#[test]
fn relu_gradient_example() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn matmul_matches_finite_differences() {
    let e = check(&[random(3, 4, 1), random(4, 5, 2)], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn add_sub_and_bias_match_finite_differences() {
    let e = check(&[random(3, 4, 3), random(3, 4, 4), random(1, 8, 5)], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(v[0], v[1]).unwrap();
        let both = t.concat_cols(s, d).unwrap();
        let y = t.add_bias(both, v[2]).unwrap();
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn relu_matches_finite_differences() {
    let e = check(&[away_from_zero(4, 5, 6)], |t, v| {
        let y = t.relu(v[0]);
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn transpose_and_skew_match_finite_differences() {
    let e = check(&[random(4, 3, 7)], |t, v| {
        let y = t.transpose(v[0]);
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
    let e = check(&[random(4, 4, 8)], |t, v| {
        let y = t.skew_from_lower(v[0]).unwrap();
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn slice_and_concat_match_finite_differences() {
    let e = check(&[random(3, 6, 9), random(3, 2, 10)], |t, v| {
        let left = t.slice_cols(v[0], 1, 3).unwrap();
        let y = t.concat_cols(left, v[1]).unwrap();
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn overwrite_matches_finite_differences() {
    let e = check(&[random(4, 5, 11), random(2, 5, 12)], |t, v| {
        let y = t.overwrite(v[0], v[1], vec![2, 0], vec![0, 3]).unwrap();
        reduce(t, y)
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn solve_matches_finite_differences() {
    let mut a = random(4, 4, 13);
    for i in 0..4 {
        a.data_mut()[i * 4 + i] += 4.0;
    }
    let e = check(&[a, random(4, 3, 14)], |t, v| {
        let y = t.solve(v[0], v[1]).unwrap();
        reduce(t, y)
    });
    assert!(e < 1e-5, "rel err {e}");
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let labels = [0usize, 2, 1, 2];
    let e = check(&[random(4, 3, 15)], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
    assert!(e < 1e-6, "rel err {e}");
}

#[test]
fn margin_sum_and_scale_match_finite_differences() {
    let targets = [1usize, 0, 2];
    let e = check(&[random(3, 4, 16)], |t, v| {
        let m = t.class_margin(v[0], &targets).unwrap();
        t.scale(m, -0.5)
    });
    assert!(e < 1e-4, "rel err {e}");
    let e = check(&[random(3, 4, 17)], |t, v| {
        let y = t.scale(v[0], 2.5);
        let s = t.sum(y);
        let w = t.scale(s, 0.1);
        let rows = t.constant(1, 1, vec![1.0]).unwrap();
        let w = t.add(w, rows).unwrap();
        let both = t.concat_cols(w, w).unwrap();
        t.softmax_cross_entropy(both, &[0]).unwrap()
    });
    assert!(e < 1e-4, "rel err {e}");
}

#[test]
fn composed_chain_rule_on_two_by_two() {
    // y = relu(A·x); loss = sum(y). dL/dA = 1[A·x > 0] · xᵀ
    let a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let x = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let av = tape.param(&a);
    let xv = tape.leaf(&x);
    let h = tape.matmul(av, xv).unwrap();
    let y = tape.relu(h);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // A·x = [-1, 3.5]: only the second row is active.
    assert_eq!(g.get(av).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn mlp_loss_matches_finite_differences() {
    let cfg = MlpConfig {
        hidden_dims: vec![5, 5, 5],
        ..MlpConfig::new(6, 5, 3)
    };
    let dnn = Mlp::new(&cfg).unwrap();
    let x = away_from_zero(4, 6, 18);
    let labels = [0usize, 1, 1, 0];
    let params: Vec<Tensor> = dnn.params().into_iter().cloned().collect();
    let e = check_with(&params, |t, ps| {
        let mut trial = dnn.clone();
        for (p, q) in trial.params_mut().into_iter().zip(ps) {
            *p = q.clone();
        }
        let vars = trial.tape_vars(t, true);
        let xv = t.leaf(&x);
        let h = trial.tape_to_layer(t, &vars, xv, 2).unwrap();
        let logits = trial.tape_logits_from_layer(t, &vars, h, 2).unwrap();
        (t.softmax_cross_entropy(logits, &labels).unwrap(), vars.all())
    });
    assert!(e < 1e-4, "rel err {e}");
}

fn perturbed_map(spec: &MapSpec, dim: usize, seed: u64) -> AlignmentMap {
    let mut map = AlignmentMap::new(spec, dim, seed).unwrap();
    let mut r = rng::stream(seed, "perturb");
    for p in map.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    map
}

fn map_gradient_error(spec: &MapSpec, inverse: bool) -> f64 {
    let map = perturbed_map(spec, 6, 19);
    let params: Vec<Tensor> = map.params().into_iter().cloned().collect();
    let h = random(3, 6, 20);
    check_with(&params, |t, ps| {
        let mut trial = map.clone();
        for (p, q) in trial.params_mut().into_iter().zip(ps) {
            *p = q.clone();
        }
        let bound = trial.bind(t, true).unwrap();
        let hv = t.leaf(&h);
        let y = if inverse {
            trial.tape_invert(t, &bound, hv).unwrap()
        } else {
            trial.tape_apply(t, &bound, hv).unwrap()
        };
        (reduce(t, y), trial.param_vars(&bound))
    })
}

#[test]
fn revnet_apply_and_invert_match_finite_differences() {
    let spec = MapSpec::Revnet { layers: 2, hidden: 4 };
    let e = map_gradient_error(&spec, false);
    assert!(e < 1e-4, "apply rel err {e}");
    let e = map_gradient_error(&spec, true);
    assert!(e < 1e-4, "invert rel err {e}");
}

#[test]
fn orthogonal_map_matches_finite_differences() {
    let e = map_gradient_error(&MapSpec::Orthogonal, false);
    assert!(e < 1e-4, "apply rel err {e}");
    let e = map_gradient_error(&MapSpec::Orthogonal, true);
    assert!(e < 1e-4, "invert rel err {e}");
}
