//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both norms vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        0.0
    } else {
        diff / denom
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Checks the gradient of a scalar function of the given input tensors.
/// `f` must be deterministic: it is re-run for every perturbed coordinate.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference().with_finite_checks(true);
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut out = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .input(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for j in 0..numeric.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        out.push(TensorCheck {
            name: format!("input{k}"),
            rel_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// `store` (or only `only`, when given).
pub fn check_params<F>(store: &ParamStore, only: Option<&[ParamId]>, h: f64, f: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference().with_finite_checks(true);
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        out.push(TensorCheck {
            name: store.name(id).to_string(),
            rel_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from the relu/clamp kinks.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = rand_tensor(rng, shape);
    t.map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    // contract with fixed random weights so every output coordinate matters
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(x));
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum_all(p)
}

/// One differentiable op applied to random inputs, followed by a weighted sum.
fn op_case(rng: &mut ChaCha8Rng, which: usize) -> (String, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>) {
    let b = rng.gen_range(1..4);
    let n = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let m = rng.gen_range(1..5);
    let seed = rng.gen::<u64>();
    match which {
        0 => ("add".into(), vec![rand_tensor(rng, &[b, n, k]), rand_tensor(rng, &[n, k])], Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, seed)
        })),
        1 => ("sub".into(), vec![rand_tensor(rng, &[n, k]), rand_tensor(rng, &[n, 1])], Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, seed)
        })),
        2 => ("mul".into(), vec![rand_tensor(rng, &[b, n, k]), rand_tensor(rng, &[b, n, k])], Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, seed)
        })),
        3 => ("matmul".into(), vec![rand_tensor(rng, &[b, n, k]), rand_tensor(rng, &[k, m])], Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, seed)
        })),
        4 => ("bmm".into(), vec![rand_tensor(rng, &[b, n, k]), rand_tensor(rng, &[b, k, m])], Box::new(move |t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted_sum(t, y, seed)
        })),
        5 => ("concat".into(), vec![rand_tensor(rng, &[b, n, k]), rand_tensor(rng, &[b, n, m])], Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 2)?;
            weighted_sum(t, y, seed)
        })),
        6 => ("concat_rows".into(), vec![rand_tensor(rng, &[n, k]), rand_tensor(rng, &[m, k])], Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            weighted_sum(t, y, seed)
        })),
        7 => {
            let d = k + m;
            let (s, e) = (rng.gen_range(0..k), k + rng.gen_range(0..=m));
            ("slice".into(), vec![rand_tensor(rng, &[b, n, d])], Box::new(move |t, v| {
                let y = t.slice(v[0], s, e)?;
                weighted_sum(t, y, seed)
            }))
        }
        8 => {
            let axis = rng.gen_range(0..3);
            ("sum".into(), vec![rand_tensor(rng, &[b, n, k])], Box::new(move |t, v| {
                let y = t.sum(v[0], axis)?;
                weighted_sum(t, y, seed)
            }))
        }
        9 => {
            let axis = rng.gen_range(0..3);
            ("mean".into(), vec![rand_tensor(rng, &[b, n, k])], Box::new(move |t, v| {
                let y = t.mean(v[0], axis)?;
                weighted_sum(t, y, seed)
            }))
        }
        10 => ("relu".into(), vec![rand_away_from_zero(rng, &[n, k])], Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, seed)
        })),
        11 => ("sigmoid".into(), vec![rand_tensor(rng, &[b, n, k]).map(|x| 4.0 * x)], Box::new(move |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, seed)
        })),
        12 => ("exp".into(), vec![rand_tensor(rng, &[n, k])], Box::new(move |t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, seed)
        })),
        13 => ("log".into(), vec![rand_tensor(rng, &[n, k]).map(|x| x.abs() + 0.3)], Box::new(move |t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, seed)
        })),
        14 => ("cos".into(), vec![rand_tensor(rng, &[n, k]).map(|x| 3.0 * x)], Box::new(move |t, v| {
            let y = t.cos(v[0])?;
            weighted_sum(t, y, seed)
        })),
        15 => {
            let keep: Vec<bool> = (0..b * n * k).map(|i| i % k == 0 || rng.gen_bool(0.6)).collect();
            ("masked_softmax".into(), vec![rand_tensor(rng, &[b, n, k]).map(|x| 3.0 * x)], Box::new(move |t, v| {
                let y = t.masked_softmax(v[0], &keep)?;
                weighted_sum(t, y, seed)
            }))
        }
        16 => ("transpose".into(), vec![rand_tensor(rng, &[b, n, k])], Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, seed)
        })),
        17 => ("reshape".into(), vec![rand_tensor(rng, &[b, n, k])], Box::new(move |t, v| {
            let y = t.reshape(v[0], &[b * n, k])?;
            weighted_sum(t, y, seed)
        })),
        18 => {
            let rows: Vec<Option<usize>> = (0..m + 2).map(|_| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..n)) }).collect();
            ("gather".into(), vec![rand_tensor(rng, &[n, k])], Box::new(move |t, v| {
                let y = t.gather_padded(v[0], &rows)?;
                weighted_sum(t, y, seed)
            }))
        }
        19 => ("affine".into(), vec![rand_tensor(rng, &[n, k])], Box::new(move |t, v| {
            let y = t.affine(v[0], -1.7, 0.3)?;
            weighted_sum(t, y, seed)
        })),
        20 => ("clamp".into(), vec![rand_away_from_zero(rng, &[n, k])], Box::new(move |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5)?;
            weighted_sum(t, y, seed)
        })),
        _ => {
            let p = 0.3;
            ("dropout".into(), vec![rand_tensor(rng, &[n, k])], Box::new(move |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let y = t.dropout(v[0], p, true, &mut r)?;
                weighted_sum(t, y, seed)
            }))
        }
    }
}

pub const OP_CASES: usize = 22;

/// Finite-difference checks of every differentiable op, `trials` random
/// shape/input draws cycling through the ops.
pub fn op_suite(trials: usize, seed: u64, h: f64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for trial in 0..trials {
        let (name, inputs, f) = op_case(&mut rng, trial % OP_CASES);
        for mut c in check_inputs(&inputs, h, f)? {
            c.name = format!("{name}#{trial}/{}", c.name);
            out.push(c);
        }
    }
    Ok(out)
}

/// Checks a fixed eight-op composite on random inputs.
pub fn composite_suite(trials: usize, seed: u64, h: f64) -> Result<Vec<TensorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for trial in 0..trials {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let v = rand_tensor(&mut rng, &[5]);
        let checks = check_inputs(&[x, w, v], h, |t, vs| {
            let a = t.matmul(vs[0], vs[1])?;
            let b = t.add(a, vs[2])?;
            let c = t.sigmoid(b)?;
            let d = t.cos(c)?;
            let e = t.softmax(d)?;
            let f = t.mul(e, b)?;
            let g = t.exp(f)?;
            let h = t.mean(g, 1)?;
            t.sum_all(h)
        })?;
        for mut c in checks {
            c.name = format!("composite#{trial}/{}", c.name);
            out.push(c);
        }
    }
    Ok(out)
}
