use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pivot_lab::data::Vocab;
use pivot_lab::gradcheck::grad_check;
use pivot_lab::graph::{sigmoid, softplus};
use pivot_lab::image::Image;
use pivot_lab::model::{EncoderConfig, LmConfig, ModelConfig, MultimodalModel};
use pivot_lab::objectives::{check_loss_gradients, DpoConfig, PreferenceSample};
use pivot_lab::optim::{AdamConfig, AdamState};
use pivot_lab::params::{GradMap, ParamStore};
use pivot_lab::{Graph, Tensor};

fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), values).unwrap()
}

fn matrix_values(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(x in matrix_values(3, 4), w in matrix_values(4, 2), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let loss1 = |g: &mut Graph, x, w| -> pivot_lab::Result<_> {
            let y = g.matmul(x, w)?;
            let y = g.gelu(y)?;
            g.sum(y)
        };
        let loss2 = |g: &mut Graph, x, w| -> pivot_lab::Result<_> {
            let y = g.matmul(x, w)?;
            let y = g.softmax(y)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        };
        let grad = |which: u8| {
            let mut g = Graph::new();
            let xv = g.param(tensor(x.clone(), &[3, 4]));
            let wv = g.param(tensor(w.clone(), &[4, 2]));
            let out = match which {
                1 => loss1(&mut g, xv, wv).unwrap(),
                2 => loss2(&mut g, xv, wv).unwrap(),
                _ => {
                    let l1 = loss1(&mut g, xv, wv).unwrap();
                    let l2 = loss2(&mut g, xv, wv).unwrap();
                    let s1 = g.scale(l1, a).unwrap();
                    let s2 = g.scale(l2, b).unwrap();
                    g.add(s1, s2).unwrap()
                }
            };
            let grads = g.backward(out).unwrap();
            (grads.wrt(xv), grads.wrt(wv))
        };
        let (g1, g2, g12) = (grad(1), grad(2), grad(3));
        for (combined, (p1, p2)) in [(&g12.0, (&g1.0, &g2.0)), (&g12.1, (&g1.1, &g2.1))] {
            for ((c, u), v) in combined.data().iter().zip(p1.data()).zip(p2.data()) {
                prop_assert!((c - (a * u + b * v)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn log_sigmoid_odd_part_is_identity(x in -700.0f64..700.0) {
        let mut g = Graph::new();
        let v = g.constant(tensor(vec![x, -x], &[2]));
        let ls = g.log_sigmoid(v).unwrap();
        let out = g.value(ls).data();
        prop_assert!((out[0] - out[1] - x).abs() <= 1e-10);
        prop_assert!((out[0] + softplus(-x)).abs() <= 1e-12);
    }

    #[test]
    fn forward_and_gradients_are_bit_deterministic(x in matrix_values(2, 5)) {
        let run = || {
            let mut g = Graph::new();
            let v = g.param(tensor(x.clone(), &[2, 5]));
            let y = g.softmax(v).unwrap();
            let y = g.gelu(y).unwrap();
            let s = g.sum(y).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item().to_bits(), grads.wrt(v))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn adam_first_step_moves_every_coordinate_by_lr(grad in proptest::collection::vec(-5.0f64..5.0, 6), lr in 1e-4f64..1e-1) {
        prop_assume!(grad.iter().all(|g| g.abs() > 1e-3));
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[6]));
        let mut grads = GradMap::new();
        grads.insert("w".into(), tensor(grad.clone(), &[6]));
        let mut adam = AdamState::new(AdamConfig::with_lr(lr));
        adam.step(&mut store, &grads).unwrap();
        for (w, g) in store.get("w").unwrap().data().iter().zip(&grad) {
            prop_assert!((w.abs() - lr).abs() <= lr * 1e-4);
            prop_assert!(w.signum() == -g.signum());
        }
    }
}

#[test]
fn log_sigmoid_reference_values() {
    let mut g = Graph::new();
    let v = g.constant(tensor(vec![0.0, -1000.0, 1.0], &[3]));
    let ls = g.log_sigmoid(v).unwrap();
    let out = g.value(ls).data().to_vec();
    assert!((out[0] + std::f64::consts::LN_2).abs() < 1e-12);
    assert!((out[1] + 1000.0).abs() < 1e-9);
    // Closed form: −ln(1 + e^{−1}).
    let expected = -(1.0 + (-1.0f64).exp()).ln();
    assert!((out[2] - expected).abs() < 1e-12);
    assert!((out[2] + 0.313262).abs() < 1e-6);
    assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn adam_minimizes_a_parabola() {
    // Scalar simulation oracle for f(x) = x², lr 0.1, from x = 1.
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(1.0));
    let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
    for _ in 0..200 {
        let x = store.get("x").unwrap().item();
        let mut grads = GradMap::new();
        grads.insert("x".into(), Tensor::scalar(2.0 * x));
        adam.step(&mut store, &grads).unwrap();
    }
    assert!(store.get("x").unwrap().item().abs() < 0.01);
}

#[test]
fn grad_check_of_linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let point = vec![Tensor::randn(&[3, 3], 1.0, &mut rng)];
    let r = grad_check(
        |g, v| {
            let s = g.scale(v[0], 3.0)?;
            g.sum(s)
        },
        &point,
        9,
        1e-4,
        0,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

fn tiny_model(seed: u64) -> MultimodalModel {
    let cfg = ModelConfig {
        encoders: vec![EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }],
        projector_dims: Vec::new(),
        lm: LmConfig {
            vocab_size: Vocab::standard().len(),
            embed_dim: 8,
            depth: 1,
            heads: 2,
            max_seq_len: 24,
            mlp_ratio: 2,
        },
    };
    MultimodalModel::new(&cfg, seed).unwrap()
}

fn sample(id: u64, seed: u64) -> PreferenceSample {
    let mut img = Image::filled(16, 16, [0, 0, 0]);
    for y in 0..16 {
        for x in 0..16 {
            let v = ((x * 31 + y * 17 + seed as usize * 7) % 251) as u8;
            img.set(x, y, [v, v / 2, 255 - v]);
        }
    }
    PreferenceSample {
        id,
        image: img,
        query: vec![1, 10 + id as usize, 12],
        chosen: vec![20, 21, 2],
        rejected: vec![22, 2],
        template_id: "t".into(),
        shifted: false,
    }
}

#[test]
fn model_losses_pass_grad_check_over_five_seeds() {
    for seed in 0..5 {
        let policy = tiny_model(seed);
        let reference = tiny_model(seed + 100);
        let batch_owned = [sample(0, seed), sample(1, seed + 1)];
        let batch: Vec<&PreferenceSample> = batch_owned.iter().collect();
        let sft = check_loss_gradients(&policy, &reference, &batch, None, 2, 1e-4, seed).unwrap();
        assert!(sft.passed(), "sft seed {seed}: {sft:?}");
        let dpo = check_loss_gradients(
            &policy,
            &reference,
            &batch,
            Some(&DpoConfig::default()),
            2,
            1e-4,
            seed,
        )
        .unwrap();
        assert!(dpo.passed(), "dpo seed {seed}: {dpo:?}");
    }
}
