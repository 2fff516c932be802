//! Finite-difference checks of every autodiff op, each loss and the full
//! generator objective on a tiny configuration.

use fncgen_autodiff::gradcheck::{op_suite, run_cases, GradCase, OpReport, DEFAULT_TOLERANCE};
use fncgen_autodiff::{Graph, Tensor, Var};

use crate::discriminator::{Discriminator, PerceptualConfig, PerceptualNet, VitConfig2d};
use crate::generator::{Generator, GeneratorConfig};
use crate::layers::ClassConditioning;
use crate::losses::{correlation_loss, g_adv_loss, mse_loss, perceptual_loss, LossWeights};
use crate::params::{Bound, Init};
use crate::types::{ClassLabel, FncMatrix, StructuralVolume};

/// Tolerance for the path through every generator parameter.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

const ORDER: usize = 4;
const CLASSES: [ClassLabel; 2] = [ClassLabel::Hc, ClassLabel::Sz];

fn tiny_generator(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        volume_dims: [4, 4, 4],
        patch: 2,
        d_model: 4,
        n_heads: 2,
        n_blocks: 1,
        ffn_hidden: 4,
        fnc_order: ORDER,
        fragment: 2,
        head_hidden: 4,
        conditioning: ClassConditioning::AdditiveEmbedding,
    };
    let mut gen = Generator::new(cfg, seed).expect("valid tiny generator");
    // Larger weights than the default init keep gradients well above the
    // finite-difference noise floor.
    let mut init = Init::new(seed ^ 0x77);
    for t in gen.params_mut().tensors_mut() {
        let noise = init.trunc_normal(t.shape(), 0.4);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    gen
}

fn tiny_vit() -> VitConfig2d {
    VitConfig2d {
        fnc_order: ORDER,
        patch: 2,
        d_model: 4,
        n_heads: 2,
        n_blocks: 2,
        ffn_hidden: 4,
    }
}

fn tiny_perceptual(seed: u64) -> PerceptualNet {
    PerceptualNet::new(PerceptualConfig {
        net: tiny_vit(),
        blocks: vec![1, 2],
        seed,
    })
    .expect("valid tiny perceptual net")
}

fn tiny_discriminator(seed: u64) -> Discriminator {
    Discriminator::new(
        VitConfig2d { n_blocks: 1, ..tiny_vit() },
        ClassConditioning::AdditiveEmbedding,
        seed,
    )
    .expect("valid tiny discriminator")
}

fn random_fncs(seed: u64) -> Tensor {
    let mut init = Init::new(seed);
    let mut data = Vec::new();
    for _ in 0..CLASSES.len() {
        let raw = init.trunc_normal(&[ORDER * ORDER], 0.5);
        data.extend_from_slice(FncMatrix::symmetrized(ORDER, raw.data()).expect("valid").values());
    }
    Tensor::new([CLASSES.len(), ORDER, ORDER], data).expect("valid shape")
}

fn random_patches(gen: &Generator, seed: u64) -> Tensor {
    let mut init = Init::new(seed);
    let patches: Vec<Tensor> = (0..CLASSES.len())
        .map(|_| {
            let v = init.trunc_normal(&[64], 0.2);
            let vol = StructuralVolume::new([4, 4, 4], v.data().iter().map(|x| x + 0.5).collect()).expect("in range");
            gen.patches(&vol).expect("tiny dims")
        })
        .collect();
    Generator::batch_patches(&patches.iter().collect::<Vec<_>>()).expect("same shapes")
}

/// Generator objective with every term enabled, differentiated w.r.t. ŷ.
fn total_on_output(g: &mut Graph, y: Var, y_hat: Var, disc: &Discriminator, perc: &PerceptualNet) -> fncgen_autodiff::Result<Var> {
    let w = LossWeights::default();
    let dp = disc.params().bind(g, false);
    let logit = disc.forward(g, &dp, y_hat, &CLASSES)?;
    let mut total = g_adv_loss(g, logit);
    for (weight, term) in [
        (w.lambda1, mse_loss(g, y, y_hat)?),
        (w.lambda2, perceptual_loss(g, perc, y, y_hat)?),
        (w.lambda3, correlation_loss(g, y, y_hat)?),
    ] {
        let s = g.scale(term, weight);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Loss cases differentiated with respect to the generated matrices.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    let y = random_fncs(seed);
    let y_hat = random_fncs(seed + 1);
    let mut cases = Vec::new();
    let yc = y.clone();
    let perc = tiny_perceptual(seed + 2);
    cases.push(GradCase::new("loss:perceptual", vec![y_hat.clone()], move |g, v| {
        let y = g.constant(yc.clone());
        Ok(perceptual_loss(g, &perc, y, v[0])?)
    }));
    let yc = y.clone();
    cases.push(GradCase::new("loss:correlation", vec![y_hat.clone()], move |g, v| {
        let y = g.constant(yc.clone());
        Ok(correlation_loss(g, y, v[0])?)
    }));
    let yc = y.clone();
    cases.push(GradCase::new("loss:mse", vec![y_hat.clone()], move |g, v| {
        let y = g.constant(yc.clone());
        Ok(mse_loss(g, y, v[0])?)
    }));
    let (disc, perc) = (tiny_discriminator(seed + 3), tiny_perceptual(seed + 2));
    cases.push(GradCase::new("loss:generator_total", vec![y_hat], move |g, v| {
        let y = g.constant(y.clone());
        total_on_output(g, y, v[0], &disc, &perc)
    }));
    cases
}

/// Generator objective differentiated with respect to every generator
/// parameter.
pub fn end_to_end_case(seed: u64) -> GradCase {
    let gen = tiny_generator(seed);
    let x = random_patches(&gen, seed + 4);
    let y = random_fncs(seed + 5);
    let (disc, perc) = (tiny_discriminator(seed + 6), tiny_perceptual(seed + 7));
    let inputs = gen.params().tensors().iter().map(|t| Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")).collect();
    GradCase::new("end_to_end:generator_total", inputs, move |g, v| {
        let p = Bound::from_vars(v.to_vec());
        let xv = g.constant(x.clone());
        let y_hat = gen.forward(g, &p, xv, &CLASSES)?;
        let y = g.constant(y.clone());
        total_on_output(g, y, y_hat, &disc, &perc)
    })
}

/// A custom op whose backward is deliberately wrong by a factor of two.
pub fn broken_case() -> GradCase {
    let x = Init::new(3).trunc_normal(&[3, 2], 1.0);
    GradCase::new("fixture:broken_square", vec![x], |g, v| {
        let value = g.value(v[0]);
        let out = Tensor::new(value.shape().to_vec(), value.data().iter().map(|a| a * a).collect())?;
        Ok(g.custom(
            &[v[0]],
            out,
            Box::new(|up, inputs, _| vec![Some(up.iter().zip(inputs[0].data()).map(|(u, a)| u * a).collect())]),
        ))
    })
}

/// Full suite: every autodiff op and each loss at 1e-4, the end-to-end
/// generator path at 1e-3. `include_broken` appends the failing fixture.
pub fn full_suite(seed: u64, include_broken: bool) -> Vec<OpReport> {
    let mut reports = run_cases(&op_suite(seed), DEFAULT_TOLERANCE, seed);
    reports.extend(run_cases(&loss_cases(seed), DEFAULT_TOLERANCE, seed));
    reports.extend(run_cases(&[end_to_end_case(seed)], END_TO_END_TOLERANCE, seed));
    if include_broken {
        reports.extend(run_cases(&[broken_case()], DEFAULT_TOLERANCE, seed));
    }
    reports
}
