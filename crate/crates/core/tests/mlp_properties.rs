use fairconf::matrix::Matrix;
use fairconf::mlp::{self, init_mlp, loss_and_gradients, predict_proba, Activation, MlpArchitecture, MlpParams, Mode};
use fairconf::seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn random_net(activation: Activation, seed_value: u64) -> (MlpParams, Matrix, Vec<usize>) {
    let mut rng = seed::rng(seed_value);
    let arch = MlpArchitecture {
        activation,
        ..MlpArchitecture::new(8, 2, 3)
    };
    let mut params = init_mlp(&arch, seed_value).unwrap();
    for (name, g) in params.trainable_groups_mut() {
        if !name.ends_with("weight") {
            for v in g.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = Matrix::from_vec(12, 8, (0..96).map(|_| normal.sample(&mut rng)).collect());
    let y = (0..12).map(|_| rng.random_range(0..3)).collect();
    (params, x, y)
}

fn nudge(params: &MlpParams, index: usize, delta: f64) -> MlpParams {
    let mut p = params.clone();
    let mut i = index;
    for (_, g) in p.trainable_groups_mut() {
        if i < g.len() {
            g[i] += delta;
            break;
        }
        i -= g.len();
    }
    p
}

fn signs(params: &MlpParams, x: &Matrix, dropout_seed: u64) -> Vec<bool> {
    let (_, cache) = mlp::forward(params, x, Mode::Train, dropout_seed).unwrap();
    cache
        .pre_activations()
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|v| *v > 0.0))
        .collect()
}

/// Worst relative error over every trainable coordinate; ReLU coordinates
/// whose perturbation crosses a kink are left out.
fn max_relative_error(activation: Activation, seed_value: u64, h: f64) -> f64 {
    let (params, x, y) = random_net(activation, seed_value);
    let dropout_seed = seed_value ^ 0xd00d;
    let (_, grads, _) = loss_and_gradients(&params, &x, &y, Mode::Train, dropout_seed).unwrap();
    let analytic: Vec<f64> = grads.groups().into_iter().flat_map(|(_, g)| g.to_vec()).collect();
    let base = signs(&params, &x, dropout_seed);
    let loss = |p: &MlpParams| loss_and_gradients(p, &x, &y, Mode::Train, dropout_seed).unwrap().0;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let (plus, minus) = (nudge(&params, i, h), nudge(&params, i, -h));
        if activation == Activation::Relu && (signs(&plus, &x, dropout_seed) != base || signs(&minus, &x, dropout_seed) != base) {
            continue;
        }
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn gradients_match_finite_differences(s in any::<u64>(), gelu in any::<bool>()) {
        let activation = if gelu { Activation::Gelu } else { Activation::Relu };
        let err = max_relative_error(activation, s, 1e-4);
        prop_assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn dropout_preserves_expectation() {
    let arch = MlpArchitecture {
        dropout_rate: 0.5,
        ..MlpArchitecture::new(16, 1, 3)
    };
    let mut params = init_mlp(&arch, 3).unwrap();
    let mut rng = seed::rng(4);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = Matrix::from_vec(4, 16, (0..64).map(|_| normal.sample(&mut rng)).collect());

    // Running statistics equal to this batch's statistics make eval mode the
    // dropout-free counterpart of train mode.
    let mut z = x.matmul(&params.blocks[0].weight);
    z.add_row_vector(&params.blocks[0].bias);
    let n = z.rows() as f64;
    let mean: Vec<f64> = z.column_sums().iter().map(|s| s / n).collect();
    let var: Vec<f64> = (0..z.cols())
        .map(|j| (0..z.rows()).map(|i| (z.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    params.blocks[0].running_mean = mean;
    params.blocks[0].running_var = var;

    let (eval, _) = mlp::forward(&params, &x, Mode::Eval, 0).unwrap();
    let masks = 400_000;
    let mut acc = vec![0.0; eval.as_slice().len()];
    for m in 0..masks {
        let (logits, _) = mlp::forward(&params, &x, Mode::Train, m).unwrap();
        for (a, v) in acc.iter_mut().zip(logits.as_slice()) {
            *a += v;
        }
    }
    let scale = eval.as_slice().iter().map(|v| v.abs()).sum::<f64>() / acc.len() as f64;
    for (a, e) in acc.iter().zip(eval.as_slice()) {
        let mean = a / masks as f64;
        assert!((mean - e).abs() <= 0.01 * scale.max(e.abs()), "{mean} vs {e}");
    }
}

#[test]
fn eval_is_pure_across_calls_and_threads() {
    let arch = MlpArchitecture::new(32, 3, 4);
    let params = init_mlp(&arch, 9).unwrap();
    let mut rng = seed::rng(10);
    let x = Matrix::from_vec(200, 32, (0..6400).map(|_| rng.random_range(-2.0..2.0)).collect());
    let reference = predict_proba(&params, &x).unwrap();
    assert_eq!(predict_proba(&params, &x).unwrap(), reference);
    let results: Vec<Matrix> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| predict_proba(&params, &x).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        assert_eq!(r, reference);
    }
    for i in 0..reference.rows() {
        assert!((reference.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
