//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

/// Names of every differentiable op the graph records.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "tanh",
    "gelu",
    "softplus",
    "sqrt",
    "ln",
    "exp",
    "sum",
    "mean",
    "variance",
    "sum_axis",
    "mean_axis",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "index_select",
    "matmul",
    "bmm",
    "softmax",
    "layernorm",
];

pub type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub func: CaseFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        func: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            func: Box::new(func),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Reduces the case output to a scalar by a fixed random weighting so that
/// ops whose plain sum is constant (softmax) are still exercised.
fn scalar_output(case: &GradCase, g: &mut Graph, vars: &[Var], weights: &mut Option<Tensor>, seed: u64) -> Result<Var> {
    let out = (case.func)(g, vars)?;
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let shape = g.shape(out).to_vec();
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
    });
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every element of every input.
pub fn check_case(case: &GradCase, h: f64, seed: u64) -> Result<f64> {
    let mut weights = None;
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t)).collect();
    let loss = scalar_output(case, &mut g, &vars, &mut weights, seed)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor], weights: &mut Option<Tensor>| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = scalar_output(case, &mut g, &vars, weights, seed)?;
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let mut inputs = case.inputs.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let fp = eval(&inputs, &mut weights)?;
            inputs[i].data_mut()[j] = orig - h;
            let fm = eval(&inputs, &mut weights)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad[j], numeric));
        }
    }
    Ok(worst)
}

pub fn run_cases(cases: &[GradCase], tolerance: f64, seed: u64) -> Vec<OpReport> {
    cases
        .iter()
        .map(|case| {
            let err = check_case(case, DEFAULT_STEP, seed).unwrap_or(f64::INFINITY);
            OpReport {
                name: case.name.clone(),
                max_rel_err: err,
                tolerance,
                passed: err < tolerance,
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("valid shape")
}

/// One case per differentiable op on random small tensors (dims ≤ 6) with
/// entries in [-2, 2], plus a softmax + cross-entropy composite.
pub fn op_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut u = |shape: &[usize]| uniform(r, shape, -2.0, 2.0);
    let a34 = u(&[3, 4]);
    let b34 = u(&[3, 4]);
    let row4 = u(&[4]);
    let col31 = u(&[3, 1]);
    let x25 = u(&[2, 5]);
    let x236 = u(&[2, 3, 6]);
    let m34 = u(&[3, 4]);
    let m42 = u(&[4, 2]);
    let b234 = u(&[2, 3, 4]);
    let b245 = u(&[2, 4, 5]);
    let s45 = u(&[4, 5]);
    let ln58 = u(&[5, 8]);
    let gamma8 = u(&[8]);
    let beta8 = u(&[8]);
    let logits = u(&[3, 5]);
    let c1 = u(&[2, 3]);
    let c2 = u(&[2, 2]);
    let tab = u(&[4, 3]);
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pos34 = uniform(&mut rng2, &[3, 4], 0.5, 2.0);
    let pos4 = uniform(&mut rng2, &[4], 0.5, 2.0);

    vec![
        GradCase::new("add", vec![a34.clone(), b34.clone()], |g, v| g.add(v[0], v[1])),
        GradCase::new("add_broadcast", vec![a34.clone(), row4.clone()], |g, v| g.add(v[0], v[1])),
        GradCase::new("sub", vec![a34.clone(), col31.clone()], |g, v| g.sub(v[0], v[1])),
        GradCase::new("mul", vec![a34.clone(), b34.clone()], |g, v| g.mul(v[0], v[1])),
        GradCase::new("mul_broadcast", vec![a34.clone(), col31], |g, v| g.mul(v[0], v[1])),
        GradCase::new("div", vec![a34.clone(), pos34.clone()], |g, v| g.div(v[0], v[1])),
        GradCase::new("div_broadcast", vec![a34.clone(), pos4], |g, v| g.div(v[0], v[1])),
        GradCase::new("scale", vec![a34.clone()], |g, v| Ok(g.scale(v[0], -1.7))),
        GradCase::new("add_scalar", vec![a34.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        GradCase::new("tanh", vec![a34.clone()], |g, v| Ok(g.tanh(v[0]))),
        GradCase::new("gelu", vec![a34.clone()], |g, v| Ok(g.gelu(v[0]))),
        GradCase::new("softplus", vec![a34.clone()], |g, v| Ok(g.softplus(v[0]))),
        GradCase::new("sqrt", vec![pos34.clone()], |g, v| Ok(g.sqrt(v[0]))),
        GradCase::new("ln", vec![pos34], |g, v| Ok(g.ln(v[0]))),
        GradCase::new("exp", vec![a34.clone()], |g, v| Ok(g.exp(v[0]))),
        GradCase::new("sum", vec![a34.clone()], |g, v| {
            let t = g.tanh(v[0]);
            Ok(g.sum(t))
        }),
        GradCase::new("mean", vec![a34.clone()], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        }),
        GradCase::new("variance", vec![x25.clone()], |g, v| Ok(g.variance(v[0]))),
        GradCase::new("sum_axis", vec![x236.clone()], |g, v| g.sum_axis(v[0], 1)),
        GradCase::new("mean_axis", vec![x236.clone()], |g, v| g.mean_axis(v[0], 2)),
        GradCase::new("reshape", vec![x236.clone()], |g, v| g.reshape(v[0], &[6, 6])),
        GradCase::new("transpose", vec![x236.clone()], |g, v| g.transpose(v[0], &[2, 0, 1])),
        GradCase::new("concat", vec![c1, c2], |g, v| g.concat(&[v[0], v[1]], 1)),
        GradCase::new("slice", vec![x236.clone()], |g, v| g.slice(v[0], 2, 1, 3)),
        GradCase::new("index_select", vec![tab], |g, v| g.index_select(v[0], 0, &[2, 0, 2, 3, 1])),
        GradCase::new("matmul", vec![m34, m42], |g, v| g.matmul(v[0], v[1])),
        GradCase::new("bmm", vec![b234, b245], |g, v| g.bmm(v[0], v[1])),
        GradCase::new("softmax", vec![s45.clone()], |g, v| g.softmax(v[0], 1)),
        GradCase::new("softmax_axis0", vec![s45], |g, v| g.softmax(v[0], 0)),
        GradCase::new("layernorm", vec![ln58, gamma8, beta8], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5)),
        GradCase::new("softmax_cross_entropy", vec![logits], |g, v| {
            // Mean negative log-likelihood of fixed targets.
            let p = g.softmax(v[0], 1)?;
            let logp = g.ln(p);
            let flat = g.reshape(logp, &[15])?;
            let picked = g.index_select(flat, 0, &[1, 5 + 4, 10])?;
            let m = g.mean(picked);
            Ok(g.scale(m, -1.0))
        }),
    ]
}

/// Checks every op in [`op_suite`] at the default step and tolerance.
pub fn gradcheck(seed: u64) -> Vec<OpReport> {
    run_cases(&op_suite(seed), DEFAULT_TOLERANCE, seed)
}
