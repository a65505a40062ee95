//! Central finite-difference gradient checks for every tape primitive.

use glosslab::rng::RngStream;
use glosslab::tensor::{Tape, Tensor, Var};
use glosslab::Result;

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

type Build = dyn Fn(&mut Tape<'static>, &[Var], &mut RngStream) -> Result<Var>;

/// Loss `Σ y ⊙ R` for a fixed random `R` matching the output shape.
fn eval(inputs: &[Tensor], build: &Build, proj: &mut Option<Tensor>, seed: u64, grads: bool) -> (f64, Vec<Vec<f32>>) {
    let mut tape = Tape::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), grads)).collect();
    let mut rng = RngStream::new(seed, 99);
    let y = build(&mut tape, &vars, &mut rng).expect("forward");
    let shape = tape.shape(y).to_vec();
    let r = proj
        .get_or_insert_with(|| {
            let mut prng = RngStream::new(seed ^ 0xABCD, 7);
            Tensor::uniform(&shape, 1.0, &mut prng)
        })
        .clone();
    let rv = tape.constant(r);
    let prod = tape.mul(y, rv).expect("projection");
    let loss = tape.sum_all(prod);
    let value = tape.value(loss).data()[0] as f64;
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).expect("backward");
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.leaf(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    (value, out)
}

/// Norm-wise relative error between autodiff and central differences over
/// all differentiable inputs (those listed in `wrt`).
pub fn relative_error(inputs: &[Tensor], wrt: &[usize], seed: u64, build: &Build) -> f64 {
    let mut proj = None;
    let (_, auto) = eval(inputs, build, &mut proj, seed, true);
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for &k in wrt {
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let fp = eval(&plus, build, &mut proj, seed, false).0;
            let fm = eval(&minus, build, &mut proj, seed, false).0;
            let num = (fp - fm) / (2.0 * H as f64);
            let a = auto[k][i] as f64;
            diff2 += (a - num).powi(2);
            a2 += a * a;
            n2 += num * num;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
    diff2.sqrt() / denom
}

fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks are not straddled by ±h.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub wrt: Vec<usize>,
    pub build: Box<Build>,
}

/// One randomised instance of every primitive.
pub fn cases(rng: &mut RngStream) -> Vec<Case> {
    let (m, k, n) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
    let ids: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    let targets: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
    let weights = {
        let mut w = rand_tensor(&[2, 3], rng);
        w.data_mut()[1] = 0.0;
        w
    };
    let ids_c = ids.clone();
    let t_c = targets.clone();
    let t_ign = targets.clone();
    vec![
        Case {
            name: "add",
            inputs: vec![rand_tensor(&[m, n], rng), rand_tensor(&[m, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.add(v[0], v[1])),
        },
        Case {
            name: "sub",
            inputs: vec![rand_tensor(&[m, n], rng), rand_tensor(&[m, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.sub(v[0], v[1])),
        },
        Case {
            name: "mul",
            inputs: vec![rand_tensor(&[m, n], rng), rand_tensor(&[m, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.mul(v[0], v[1])),
        },
        Case {
            name: "add_bias",
            inputs: vec![rand_tensor(&[m, n], rng), rand_tensor(&[n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.add_bias(v[0], v[1])),
        },
        Case {
            name: "scale",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.scale(v[0], -1.7))),
        },
        Case {
            name: "matmul",
            inputs: vec![rand_tensor(&[m, k], rng), rand_tensor(&[k, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.matmul(v[0], v[1])),
        },
        Case {
            name: "bmm",
            inputs: vec![rand_tensor(&[2, m, k], rng), rand_tensor(&[2, k, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.bmm(v[0], v[1], false)),
        },
        Case {
            name: "bmm_trans",
            inputs: vec![rand_tensor(&[2, m, k], rng), rand_tensor(&[2, n, k], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.bmm(v[0], v[1], true)),
        },
        Case {
            name: "reshape",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(move |t, v, _| t.reshape(v[0], &[n, m])),
        },
        Case {
            name: "permute",
            inputs: vec![rand_tensor(&[2, m, 3, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| t.permute(v[0], &[0, 2, 1, 3])),
        },
        Case {
            name: "embedding",
            inputs: vec![rand_tensor(&[5, n], rng)],
            wrt: vec![0],
            build: Box::new(move |t, v, _| t.embedding(v[0], &ids_c)),
        },
        Case {
            name: "softmax",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.softmax(v[0]))),
        },
        Case {
            name: "log_softmax",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.log_softmax(v[0]))),
        },
        Case {
            name: "cross_entropy",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(move |t, v, _| t.cross_entropy(v[0], &t_c, None)),
        },
        Case {
            name: "cross_entropy_masked",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(move |t, v, _| t.cross_entropy(v[0], &t_ign, Some(t_ign[0]))),
        },
        Case {
            name: "mse",
            inputs: vec![rand_tensor(&[m, n], rng), rand_tensor(&[m, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.mse(v[0], v[1])),
        },
        Case {
            name: "cosine_similarity",
            inputs: vec![away_from_zero(&[m, n], rng), away_from_zero(&[m, n], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.cosine_similarity(v[0], v[1])),
        },
        Case {
            name: "tanh",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.tanh(v[0]))),
        },
        Case {
            name: "sigmoid",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.sigmoid(v[0]))),
        },
        Case {
            name: "relu",
            inputs: vec![away_from_zero(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.relu(v[0]))),
        },
        Case {
            name: "dropout",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, r| Ok(t.dropout(v[0], 0.3, r))),
        },
        Case {
            name: "concat",
            inputs: vec![rand_tensor(&[m, n], rng), rand_tensor(&[m, k], rng)],
            wrt: vec![0, 1],
            build: Box::new(|t, v, _| t.concat(&[v[0], v[1]])),
        },
        Case {
            name: "slice_cols",
            inputs: vec![rand_tensor(&[m, n + 2], rng)],
            wrt: vec![0],
            build: Box::new(move |t, v, _| t.slice_cols(v[0], 1, n)),
        },
        Case {
            name: "layer_norm",
            inputs: vec![rand_tensor(&[m, n + 2], rng), rand_tensor(&[n + 2], rng), rand_tensor(&[n + 2], rng)],
            wrt: vec![0, 1, 2],
            build: Box::new(|t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        },
        Case {
            name: "sum_all",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.sum_all(v[0]))),
        },
        Case {
            name: "mean_all",
            inputs: vec![rand_tensor(&[m, n], rng)],
            wrt: vec![0],
            build: Box::new(|t, v, _| Ok(t.mean_all(v[0]))),
        },
        Case {
            name: "weighted_rows",
            inputs: vec![rand_tensor(&[6, n], rng)],
            wrt: vec![0],
            build: Box::new(move |t, v, _| t.weighted_rows(v[0], weights.clone())),
        },
    ]
}

/// Worst relative error per primitive over `trials` random draws.
pub fn run_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut rng = RngStream::new(seed, 1);
    for trial in 0..trials {
        for (ci, case) in cases(&mut rng).into_iter().enumerate() {
            let err = relative_error(&case.inputs, &case.wrt, seed + trial as u64, &case.build);
            match worst.get_mut(ci) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    worst
}
