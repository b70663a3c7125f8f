//! Central finite-difference checks (h = 1e-4) for every differentiable op,
//! five seeds each. The oracle only ever runs forward passes. Each suite
//! returns the worst relative error seen.

use f0vc_core::nn::{
    BatchNorm, BiLstm, Conv1d, Layout, Linear, Lstm, Pass, ParamId, ParamStore, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Builds a scalar loss from the inputs; returns the tape, the loss and the
/// input variables.
type Build<'a> = dyn Fn(&ParamStore, &[Tensor], bool) -> (Tape, Var, Vec<Var>) + 'a;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn check(name: &str, store: &mut ParamStore, inputs: &[Tensor], build: &Build) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let (mut tape, loss, vars) = build(store, inputs, true);
    store.zero_grad();
    tape.backward(loss, store).unwrap();
    let eval = |s: &ParamStore, ins: &[Tensor]| {
        let (tape, loss, _) = build(s, ins, false);
        tape.value(loss).item()
    };
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("input gradient").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            numeric[j] = (eval(store, &plus) - eval(store, &minus)) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        if e >= TOL {
            return Err(format!("{name}: input {k} rel err {e:.2e}"));
        }
        worst = worst.max(e);
    }
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_optimized(id)).collect();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + H;
            let fp = eval(store, inputs);
            store.value_mut(id).data_mut()[j] = orig - H;
            let fm = eval(store, inputs);
            store.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        if e >= TOL {
            return Err(format!("{name}: param {} rel err {e:.2e}", store.name(id)));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// `inputs[0]` goes through `f`; the result is compared to `inputs[1]` with
/// a squared error so every output element reaches the loss.
fn through<'a, F>(f: F) -> Box<Build<'a>>
where
    F: Fn(&mut Pass, Var) -> Var + 'a,
{
    Box::new(move |store, inputs, _| {
        let mut pass = Pass::new(store, true);
        let x = pass.tape.input_with_grad(inputs[0].clone()).unwrap();
        let y = f(&mut pass, x);
        let target = pass.tape.input(inputs[1].clone()).unwrap();
        let loss = pass.tape.mse(y, target, None, 1.0).unwrap();
        (pass.tape, loss, vec![x])
    })
}

pub fn linear_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng);
        let inputs = [rand_tensor(&mut rng, 6, 4), rand_tensor(&mut rng, 6, 3)];
        worst = worst.max(check("linear", &mut store, &inputs, &through(|p, x| lin.forward(p, x).unwrap()))?);
    }
    Ok(worst)
}

pub fn conv_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "conv", 3, 4, &mut rng);
        let layout = Layout::new(2, 7);
        let inputs = [rand_tensor(&mut rng, 14, 3), rand_tensor(&mut rng, 14, 4)];
        worst = worst.max(check(
            "conv5x1",
            &mut store,
            &inputs,
            &through(|p, x| conv.forward(p, x, layout).unwrap()),
        )?);
    }
    Ok(worst)
}

pub fn batchnorm_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        // non-trivial affine parameters
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_trainable(id) {
                for v in store.value_mut(id).data_mut() {
                    *v += rng.gen_range(-0.5..0.5);
                }
            }
        }
        let inputs = [rand_tensor(&mut rng, 10, 3), rand_tensor(&mut rng, 10, 3)];
        worst = worst.max(check("batchnorm", &mut store, &inputs, &through(|p, x| bn.forward(p, x).unwrap()))?);
    }
    Ok(worst)
}

pub fn batchnorm_inference_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let inputs = [rand_tensor(&mut rng, 6, 3), rand_tensor(&mut rng, 6, 3)];
        let build: Box<Build> = Box::new(|store, inputs, _| {
            let mut pass = Pass::new(store, false);
            let x = pass.tape.input_with_grad(inputs[0].clone()).unwrap();
            let y = bn.forward(&mut pass, x).unwrap();
            let t = pass.tape.input(inputs[1].clone()).unwrap();
            let loss = pass.tape.mse(y, t, None, 1.0).unwrap();
            (pass.tape, loss, vec![x])
        });
        worst = worst.max(check("batchnorm-inference", &mut store, &inputs, &build)?);
    }
    Ok(worst)
}

pub fn lstm_gradients_through_time() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        for reverse in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng);
            let layout = Layout::new(2, 9);
            let inputs = [rand_tensor(&mut rng, 18, 3), rand_tensor(&mut rng, 18, 4)];
            worst = worst.max(check(
                "lstm",
                &mut store,
                &inputs,
                &through(|p, x| lstm.forward(p, x, layout, reverse).unwrap()),
            )?);
        }
    }
    Ok(worst)
}

pub fn bilstm_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "bi", 3, 3, &mut rng);
        let layout = Layout::new(2, 8);
        let inputs = [rand_tensor(&mut rng, 16, 3), rand_tensor(&mut rng, 16, 6)];
        worst = worst.max(check(
            "bilstm",
            &mut store,
            &inputs,
            &through(|p, x| bi.forward(p, x, layout).unwrap()),
        )?);
    }
    Ok(worst)
}

pub fn relu_concat_resampling_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = Layout::new(2, 8);
        let inputs = [rand_tensor(&mut rng, 16, 4), rand_tensor(&mut rng, 16, 8)];
        worst = worst.max(check(
            "relu/concat/down/up",
            &mut store,
            &inputs,
            &through(|p, x| {
                let r = p.tape.relu(x).unwrap();
                let s = p.tape.scale(x, 0.5).unwrap();
                let c = p.tape.concat(&[r, s]).unwrap();
                let d = p.tape.downsample(c, layout, 4).unwrap();
                p.tape.upsample(d, layout, 4).unwrap()
            }),
        )?);
    }
    Ok(worst)
}

pub fn loss_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let inputs = [rand_tensor(&mut rng, 5, 3), rand_tensor(&mut rng, 5, 3)];
        let mask: Vec<f64> = (0..5).map(|i| if i == 3 { 0.0 } else { 1.0 }).collect();
        let build: Box<Build> = Box::new(move |store, inputs, _| {
            let mut tape = Tape::new();
            let _ = store;
            let a = tape.input_with_grad(inputs[0].clone()).unwrap();
            let b = tape.input_with_grad(inputs[1].clone()).unwrap();
            let m = tape.mse(a, b, Some(&mask), 2.0).unwrap();
            let l = tape.l1(a, b, 2.0).unwrap();
            let l = tape.scale(l, 0.7).unwrap();
            let loss = tape.add(m, l).unwrap();
            (tape, loss, vec![a, b])
        });
        worst = worst.max(check("mse+l1", &mut store, &inputs, &build)?);
    }
    Ok(worst)
}

pub fn shared_parameter_gradients_accumulate() -> Result<f64, String> {
    // the same encoder weights used twice (as in the code-reconstruction term)
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "enc", 3, 3, &mut rng);
        let inputs = [rand_tensor(&mut rng, 4, 3), rand_tensor(&mut rng, 4, 3)];
        worst = worst.max(check(
            "shared",
            &mut store,
            &inputs,
            &through(|p, x| {
                let y = lin.forward(p, x).unwrap();
                let y = p.tape.relu(y).unwrap();
                lin.forward(p, y).unwrap()
            }),
        )?);
    }
    Ok(worst)
}

pub const SUITES: &[(&str, fn() -> Result<f64, String>)] = &[
    ("linear", linear_gradients),
    ("conv5x1", conv_gradients),
    ("batchnorm", batchnorm_gradients),
    ("batchnorm-inference", batchnorm_inference_gradients),
    ("lstm-8+-steps", lstm_gradients_through_time),
    ("bilstm", bilstm_gradients),
    ("relu-concat-resampling", relu_concat_resampling_gradients),
    ("losses", loss_gradients),
    ("shared-weights", shared_parameter_gradients_accumulate),
];
