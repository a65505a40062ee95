mod common;

use common::gradcheck;
use glosslab::rng::RngStream;
use glosslab::tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_finite_differences() {
    let worst = gradcheck::run_suite(20, 11);
    for (name, err) in &worst {
        assert!(*err < gradcheck::TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn softmax_symmetric() {
    let mut t = Tape::new(false);
    let x = t.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
    let y = t.softmax(x);
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_identity() {
    let mut t = Tape::new(false);
    let i = t.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
    let a_t = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
    let a = t.input(a_t.clone(), false);
    let y = t.matmul(i, a).unwrap();
    assert_eq!(t.value(y).data(), a_t.data());
}

#[test]
fn cross_entropy_large_margin_near_zero() {
    let mut t = Tape::new(false);
    let x = t.input(Tensor::from_rows(&[vec![20.0, 0.0, 0.0], vec![0.0, 0.0, 20.0]]).unwrap(), false);
    let l = t.cross_entropy(x, &[0, 2], None).unwrap();
    assert!(t.value(l).data()[0].abs() < 1e-6);
    assert!(t.value(l).data()[0] >= 0.0);
}

#[test]
fn cross_entropy_masks_pad() {
    let mut t = Tape::new(true);
    let x = t.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, -5.0]]).unwrap(), true);
    let l = t.cross_entropy(x, &[1, 0], Some(0)).unwrap();
    let expected = (1f32.exp() + 2f32.exp()).ln() - 2.0;
    assert!((t.value(l).data()[0] - expected).abs() < 1e-6);
    let g = t.backward(l).unwrap();
    assert_eq!(&g.leaf(x).unwrap()[2..], &[0.0, 0.0]);
}

#[test]
fn square_gradient() {
    let mut t = Tape::new(true);
    let x = t.input(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &[6.0]);
}

#[test]
fn relu_sum_gradient() {
    let mut t = Tape::new(true);
    let x = t.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
    let r = t.relu(x);
    let s = t.sum_all(r);
    let g = t.backward(s).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &[0.0, 1.0]);
}

fn mlp_ce_loss(store: &ParamStore, x: &Tensor, targets: &[usize]) -> (f32, glosslab::tensor::Gradients) {
    let mut t = Tape::with_params(store, true);
    let xv = t.input(x.clone(), false);
    let w = t.param(store.id("w").unwrap());
    let logits = t.matmul(xv, w).unwrap();
    let p = t.softmax(logits);
    let l = t.cross_entropy(p, targets, None).unwrap();
    let v = t.value(l).data()[0];
    (v, t.backward(l).unwrap())
}

#[test]
fn matmul_softmax_ce_param_gradients() {
    let mut rng = RngStream::new(5, 0);
    let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::uniform(&[3, 3], 1.0, &mut rng));
    let targets = [0, 2, 1, 2];
    let (_, g) = mlp_ce_loss(&store, &x, &targets);
    let auto = g.param(id).unwrap().to_vec();
    let h = 1e-3f32;
    let (mut d2, mut a2) = (0.0f64, 0.0f64);
    for i in 0..9 {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let fp = mlp_ce_loss(&store, &x, &targets).0 as f64;
        store.value_mut(id).data_mut()[i] = orig - h;
        let fm = mlp_ce_loss(&store, &x, &targets).0 as f64;
        store.value_mut(id).data_mut()[i] = orig;
        let num = (fp - fm) / (2.0 * h as f64);
        d2 += (num - auto[i] as f64).powi(2);
        a2 += num * num;
    }
    assert!(d2.sqrt() / a2.sqrt() < 1e-3);
}

#[test]
fn accumulate_twice_adds() {
    let mut rng = RngStream::new(1, 0);
    let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::uniform(&[3, 3], 1.0, &mut rng));
    let (_, g) = mlp_ce_loss(&store, &x, &[0, 1, 2, 0]);
    store.accumulate(&g);
    let once = store.grad(id).to_vec();
    store.accumulate(&g);
    for (a, b) in store.grad(id).iter().zip(&once) {
        assert!((a - 2.0 * b).abs() < 1e-6);
    }
    store.zero_grad();
    assert!(store.grad(id).iter().all(|v| *v == 0.0));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::new(false);
    let a = t.input(Tensor::zeros(&[2, 3]), false);
    let b = t.input(Tensor::zeros(&[4, 2]), false);
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn dropout_rate_and_rescale() {
    let mut t = Tape::new(true);
    let mut rng = RngStream::new(3, 0);
    let x = t.input(Tensor::full(&[100_000], 1.0), false);
    let y = t.dropout(x, 0.3, &mut rng);
    let data = t.value(y).data();
    let zeros = data.iter().filter(|v| **v == 0.0).count() as f64 / data.len() as f64;
    assert!((zeros - 0.3).abs() < 0.02, "{zeros}");
    assert!(data.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.7).abs() < 1e-6));
}

#[test]
fn dropout_eval_identity() {
    let mut t = Tape::new(false);
    let mut rng = RngStream::new(3, 0);
    let x = t.input(Tensor::full(&[10], 2.0), false);
    let y = t.dropout(x, 0.5, &mut rng);
    assert_eq!(t.value(y).data(), &[2.0; 10]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f32..30.0) {
        let mut rng = RngStream::new(seed, 0);
        let mut t = Tape::new(false);
        let x = t.input(Tensor::uniform(&[rows, cols], scale, &mut rng), false);
        let y = t.softmax(x);
        for r in t.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            let s: f32 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_grads_finite(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let mut store = ParamStore::new();
        store.add("w", Tensor::uniform(&[3, 3], 1.0, &mut rng));
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let (_, g) = mlp_ce_loss(&store, &x, &[0, 1, 2, 1]);
        store.accumulate(&g);
        for id in store.ids() {
            prop_assert!(store.grad(id).iter().all(|v| v.is_finite()));
        }
    }
}
