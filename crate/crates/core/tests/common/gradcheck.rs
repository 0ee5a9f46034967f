//! Central finite-difference checks of tape gradients over random shapes.

use gemirec::tensor::{Tape, Tensor, Var};
use gemirec::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely, at `RTOL * FLOOR`.
pub const FLOOR: f64 = 1e-3;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_bt",
    "add",
    "add_broadcast",
    "sub",
    "sub_broadcast",
    "mul",
    "scale",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "leaky_relu",
    "gelu",
    "softmax",
    "layer_norm",
    "mse",
    "cross_entropy",
    "softmax_cross_entropy",
    "l2_norm_sq",
    "row_dot",
    "mean",
    "gather_rows",
    "gather",
    "transpose_causal_mask",
    "logsumexp_reshape",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) { x } else { -x }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a non-scalar output to a scalar through fixed random weights so
/// every output element contributes a distinct amount.
fn project(tape: &mut Tape, out: Var, weights_seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = rand_tensor(&mut rng, &tape.shape(out).to_vec());
    let w = tape.constant(w);
    tape.dot(out, w)
}

/// The `index`-th case: op `OPS[index % len]` on shapes drawn from `seed`.
pub fn case(index: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let name = OPS[index % OPS.len()];
    let mut d = || rng.gen_range(1..=6usize);
    let (m, k, n) = (d(), d(), d());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    let r = &mut rng;
    let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
    let (inputs, build): (Vec<Tensor>, Build) = match name {
        "matmul" => (
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "matmul_bt" => (
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[n, k])],
            Box::new(|t, v| t.matmul_bt(v[0], v[1])),
        ),
        "add" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "add_broadcast" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "sub" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        "sub_broadcast" => (
            vec![rand_tensor(r, &[k, m, n]), rand_tensor(r, &[m, n])],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        "mul" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        "scale" => {
            let s = r.gen_range(-2.0..2.0);
            (vec![rand_tensor(r, &[m, n])], Box::new(move |t, v| Ok(t.scale(v[0], s))))
        }
        "concat_rows" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[k, n]), rand_tensor(r, &[1, n])],
            Box::new(|t, v| t.concat(v, 0)),
        ),
        "concat_cols" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, k])],
            Box::new(|t, v| t.concat(v, 1)),
        ),
        "slice_cols" => {
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n - start);
            (
                vec![rand_tensor(r, &[m, n])],
                Box::new(move |t, v| t.slice_cols(v[0], start, len)),
            )
        }
        "leaky_relu" => (
            vec![rand_away_from_zero(r, &[m, n])],
            Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.1))),
        ),
        "gelu" => (vec![rand_tensor(r, &[m, n])], Box::new(|t, v| Ok(t.gelu(v[0])))),
        "softmax" => (vec![rand_tensor(r, &[m, n])], Box::new(|t, v| Ok(t.softmax(v[0])))),
        "layer_norm" => {
            let cols = n + 1;
            (
                vec![rand_tensor(r, &[m, cols]), rand_tensor(r, &[cols]), rand_tensor(r, &[cols])],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            )
        }
        "mse" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])],
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        "cross_entropy" => (
            vec![rand_tensor(r, &[m, n])],
            Box::new(move |t, v| {
                let p = t.softmax(v[0]);
                t.cross_entropy(p, &targets)
            }),
        ),
        "softmax_cross_entropy" => (
            vec![rand_tensor(r, &[m, n])],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)),
        ),
        "l2_norm_sq" => (vec![rand_tensor(r, &[m, n])], Box::new(|t, v| Ok(t.l2_norm_sq(v[0])))),
        "row_dot" => (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])],
            Box::new(|t, v| t.row_dot(v[0], v[1])),
        ),
        "mean" => (
            vec![rand_tensor(r, &[m, n])],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                let a = t.mean(sq);
                let b = t.sum(v[0]);
                t.add(a, b)
            }),
        ),
        "gather_rows" => {
            let rows: Vec<usize> = (0..k + 1).map(|_| r.gen_range(0..m)).collect();
            (
                vec![rand_tensor(r, &[m, n])],
                Box::new(move |t, v| t.gather_rows(v[0], &rows)),
            )
        }
        "gather" => {
            let idx: Vec<usize> = (0..k + 2).map(|_| r.gen_range(0..m * n)).collect();
            (
                vec![rand_tensor(r, &[m * n])],
                Box::new(move |t, v| t.gather(v[0], &idx)),
            )
        }
        "transpose_causal_mask" => (
            vec![rand_tensor(r, &[m, m])],
            Box::new(|t, v| {
                let tr = t.transpose(v[0])?;
                let masked = t.causal_mask(tr)?;
                Ok(t.softmax(masked))
            }),
        ),
        "logsumexp_reshape" => (
            vec![rand_tensor(r, &[m, n])],
            Box::new(move |t, v| {
                let flat = t.reshape(v[0], vec![m * n])?;
                Ok(t.logsumexp(flat))
            }),
        ),
        other => unreachable!("no case for {other}"),
    };
    Case { name, inputs, build }
}

fn evaluate(case: &Case, inputs: &[Tensor], weights_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, weights_seed).unwrap();
    tape.value(loss).item()
}

/// Worst relative disagreement between tape and finite-difference gradients.
pub fn max_rel_error(case: &Case, weights_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, weights_seed).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (evaluate(case, &plus, weights_seed) - evaluate(case, &minus, weights_seed)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
