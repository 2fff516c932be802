//! Training objectives: adversarial terms, MSE, perceptual feature
//! matching, correlation loss and the weighted generator total.
//!
//! Matrix losses operate on the off-diagonal upper triangle and average
//! over the batch.

use fncgen_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::discriminator::{batch_matrices, PerceptualNet};
use crate::error::{config_err, contract_err, Result};
use crate::types::FncMatrix;

/// Below this product of standard deviations the correlation is undefined.
pub const DEGENERATE_STD_PRODUCT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// MSE weight.
    pub lambda1: f64,
    /// Perceptual weight.
    pub lambda2: f64,
    /// Correlation weight.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 0.5,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Zeroes the weights of disabled terms.
    pub fn gated(self, use_perceptual: bool, use_correlation: bool) -> Self {
        Self {
            lambda1: self.lambda1,
            lambda2: if use_perceptual { self.lambda2 } else { 0.0 },
            lambda3: if use_correlation { self.lambda3 } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub correlation: f64,
    pub total: f64,
}

/// Weighted generator objective from its parts.
pub fn total_g_loss(gan: f64, mse: f64, perceptual: f64, correlation: f64, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    Ok(LossBreakdown {
        gan,
        mse,
        perceptual,
        correlation,
        total: gan + w.lambda1 * mse + w.lambda2 * perceptual + w.lambda3 * correlation,
    })
}

/// Flat indices of the strict upper triangle of an n×n matrix, row-major.
pub fn triangle_indices(n: usize) -> Vec<usize> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| i * n + j)).collect()
}

/// `[B, n, n]` → `[B, n(n−1)/2]`.
pub fn triangle(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
        return contract_err(format!("expected a [B, n, n] batch with n ≥ 2, got {s:?}"));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[1]])?;
    Ok(g.index_select(flat, 1, &triangle_indices(s[1]))?)
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return contract_err(format!("{op}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Mean over the batch of softplus(−real) + softplus(fake), i.e. binary
/// cross-entropy with logits for real = 1, fake = 0.
pub fn d_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    same_shape(g, real, fake, "d_loss")?;
    let nr = g.scale(real, -1.0);
    let a = g.softplus(nr);
    let b = g.softplus(fake);
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

/// Non-saturating generator term: mean of −ln σ(fake) = softplus(−fake).
pub fn g_adv_loss(g: &mut Graph, fake: Var) -> Var {
    let nf = g.scale(fake, -1.0);
    let s = g.softplus(nf);
    g.mean(s)
}

pub fn mse_loss(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(g, y, y_hat, "mse_loss")?;
    let (ty, th) = (triangle(g, y)?, triangle(g, y_hat)?);
    let d = g.sub(th, ty)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Mean over the batch of 1 − Pearson(triangle(y), triangle(ŷ)); samples
/// whose standard-deviation product is below [`DEGENERATE_STD_PRODUCT`]
/// contribute exactly 1.
pub fn correlation_loss(g: &mut Graph, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(g, y, y_hat, "correlation_loss")?;
    let b = g.shape(y)[0];
    let (ty, th) = (triangle(g, y)?, triangle(g, y_hat)?);
    let center = |g: &mut Graph, t: Var| -> Result<Var> {
        let m = g.mean_axis(t, 1)?;
        Ok(g.sub(t, m)?)
    };
    let (cy, ch) = (center(g, ty)?, center(g, th)?);
    let cross = g.mul(cy, ch)?;
    let cov = g.mean_axis(cross, 1)?;
    let yy = g.mul(cy, cy)?;
    let vy = g.mean_axis(yy, 1)?;
    let hh = g.mul(ch, ch)?;
    let vh = g.mean_axis(hh, 1)?;
    let prod = g.mul(vy, vh)?;
    let floor = DEGENERATE_STD_PRODUCT * DEGENERATE_STD_PRODUCT;
    let valid: Vec<f64> = g.data(prod).iter().map(|&p| if p >= floor { 1.0 } else { 0.0 }).collect();
    let shift = g.constant(Tensor::new([b, 1], valid.iter().map(|v| 1.0 - v).collect())?);
    let valid = g.constant(Tensor::new([b, 1], valid)?);
    let safe = g.add(prod, shift)?;
    let denom = g.sqrt(safe);
    let r = g.div(cov, denom)?;
    let r = g.mul(r, valid)?;
    let loss = g.scale(r, -1.0);
    let loss = g.add_scalar(loss, 1.0);
    Ok(g.mean(loss))
}

/// Mean over selected blocks of the mean squared activation difference
/// (normalized by tokens × width), with the network's weights frozen.
pub fn perceptual_loss(g: &mut Graph, net: &PerceptualNet, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(g, y, y_hat, "perceptual_loss")?;
    let fy = net.features(g, y)?;
    let fh = net.features(g, y_hat)?;
    let blocks = &net.config().blocks;
    let mut terms = Vec::with_capacity(blocks.len());
    for &l in blocks {
        let d = g.sub(fh[l - 1], fy[l - 1])?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// Evaluates a batched graph loss on plain matrices.
fn eval_pair(
    y: &FncMatrix,
    y_hat: &FncMatrix,
    f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    if y.order() != y_hat.order() {
        return contract_err(format!("matrix orders {} and {} differ", y.order(), y_hat.order()));
    }
    let mut g = Graph::new();
    let a = g.constant(batch_matrices(&[y])?);
    let b = g.constant(batch_matrices(&[y_hat])?);
    let out = f(&mut g, a, b)?;
    Ok(g.value(out).item()?)
}

pub fn mse(y: &FncMatrix, y_hat: &FncMatrix) -> Result<f64> {
    eval_pair(y, y_hat, mse_loss)
}

pub fn correlation(y: &FncMatrix, y_hat: &FncMatrix) -> Result<f64> {
    eval_pair(y, y_hat, correlation_loss)
}

pub fn perceptual(net: &PerceptualNet, y: &FncMatrix, y_hat: &FncMatrix) -> Result<f64> {
    eval_pair(y, y_hat, |g, a, b| perceptual_loss(g, net, a, b))
}

pub fn d_loss_value(real: f64, fake: f64) -> f64 {
    let mut g = Graph::new();
    let (r, f) = (g.scalar(real), g.scalar(fake));
    let l = d_loss(&mut g, r, f).expect("scalar shapes match");
    g.data(l)[0]
}

pub fn g_adv_value(fake: f64) -> f64 {
    let mut g = Graph::new();
    let f = g.scalar(fake);
    let l = g_adv_loss(&mut g, f);
    g.data(l)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::PerceptualConfig;
    use crate::params::Init;
    use fncgen_autodiff::gradcheck::{check_case, GradCase};
    use proptest::prelude::*;

    fn from_triangle(n: usize, tri: &[f64]) -> FncMatrix {
        let mut v = vec![0.0; n * n];
        for (k, idx) in triangle_indices(n).into_iter().enumerate() {
            let (i, j) = (idx / n, idx % n);
            v[i * n + j] = tri[k];
            v[j * n + i] = tri[k];
        }
        (0..n).for_each(|i| v[i * n + i] = 1.0);
        FncMatrix::new(n, v).unwrap()
    }

    fn random_fnc(n: usize, seed: u64) -> FncMatrix {
        let raw = Init::new(seed).trunc_normal(&[n * n], 0.4);
        FncMatrix::symmetrized(n, raw.data()).unwrap()
    }

    fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut c = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            c += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        c / (va * vb).sqrt()
    }

    #[test]
    fn adversarial_examples() {
        assert!((d_loss_value(0.0, 0.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(d_loss_value(40.0, -40.0) < 1e-15);
        assert!((g_adv_value(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(g_adv_value(40.0) < 1e-15);
        let oracle = -(1.0 / (1.0 + 2f64.exp())).ln();
        assert!((g_adv_value(-2.0) - oracle).abs() < 1e-14);
        assert!((g_adv_value(-2.0) - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn d_loss_grows_with_mislabeling() {
        let mut prev = d_loss_value(0.0, 0.0);
        for k in 1..200 {
            let a = k as f64 * 0.1;
            let cur = d_loss_value(-a, a);
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn d_loss_decreases_as_logits_separate() {
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let a = k as f64 * 0.2 - 10.0;
            let cur = d_loss_value(a, -a);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn mse_examples() {
        let y = from_triangle(4, &[0.1, 0.2, 0.3, -0.1, -0.2, 0.0]);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let shifted = from_triangle(4, &[0.6, 0.7, 0.8, 0.4, 0.3, 0.5]);
        assert!((mse(&y, &shifted).unwrap() - 0.25).abs() < 1e-15);
        let (a, b) = (random_fnc(7, 1), random_fnc(7, 2));
        let mut brute = 0.0;
        for i in 0..7 {
            for j in i + 1..7 {
                brute += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        assert!((mse(&a, &b).unwrap() - brute / 21.0).abs() < 1e-15);
        assert!(mse(&a, &random_fnc(6, 0)).is_err());
    }

    #[test]
    fn correlation_examples() {
        let y = random_fnc(6, 3);
        assert!(correlation(&y, &y).unwrap().abs() < 1e-12);
        let tri: Vec<f64> = triangle_indices(6).iter().map(|&k| -y.values()[k]).collect();
        assert!((correlation(&y, &from_triangle(6, &tri)).unwrap() - 2.0).abs() < 1e-12);
        let a = from_triangle(3, &[0.1, 0.2, 0.3]);
        let b = from_triangle(3, &[0.1, 0.2, 0.4]);
        let expected = 1.0 - 3.0 * 21f64.sqrt() / 14.0;
        assert!((correlation(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.01801).abs() < 1e-5);
    }

    #[test]
    fn degenerate_correlation_is_one() {
        let flat = from_triangle(5, &[0.2; 10]);
        let y = random_fnc(5, 4);
        assert_eq!(correlation(&flat, &y).unwrap(), 1.0);
        assert_eq!(correlation(&y, &flat).unwrap(), 1.0);
        assert_eq!(correlation(&flat, &flat).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_correlation_has_finite_gradient() {
        let mut g = Graph::new();
        let y = g.constant(batch_matrices(&[&from_triangle(4, &[0.3; 6])]).unwrap());
        let h = g.param(&batch_matrices(&[&random_fnc(4, 1)]).unwrap());
        let l = correlation_loss(&mut g, y, h).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(h).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_losses_average_samples() {
        let ys = [random_fnc(5, 10), random_fnc(5, 11)];
        let hs = [random_fnc(5, 12), random_fnc(5, 13)];
        let mut g = Graph::new();
        let y = g.constant(batch_matrices(&[&ys[0], &ys[1]]).unwrap());
        let h = g.constant(batch_matrices(&[&hs[0], &hs[1]]).unwrap());
        let c = correlation_loss(&mut g, y, h).unwrap();
        let expected = 0.5 * (correlation(&ys[0], &hs[0]).unwrap() + correlation(&ys[1], &hs[1]).unwrap());
        assert!((g.data(c)[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn correlation_matches_brute_force() {
        let (a, b) = (random_fnc(8, 5), random_fnc(8, 6));
        let idx = triangle_indices(8);
        let ta: Vec<f64> = idx.iter().map(|&k| a.values()[k]).collect();
        let tb: Vec<f64> = idx.iter().map(|&k| b.values()[k]).collect();
        assert!((correlation(&a, &b).unwrap() - (1.0 - brute_pearson(&ta, &tb))).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w0 = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        assert_eq!(total_g_loss(0.7, 3.0, 2.0, 1.0, &w0).unwrap().total, 0.7);
        let w1 = LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        };
        assert_eq!(total_g_loss(1.0, 1.0, 1.0, 1.0, &w1).unwrap().total, 4.0);
        let b = total_g_loss(0.7, 0.02, 0.01, 0.1, &LossWeights::default()).unwrap();
        assert!((b.total - 1.005).abs() < 1e-12);
        let bad = LossWeights {
            lambda2: -0.1,
            ..LossWeights::default()
        };
        assert!(matches!(total_g_loss(0.0, 0.0, 0.0, 0.0, &bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn gating_zeroes_disabled_weights() {
        let w = LossWeights::default().gated(false, false);
        assert_eq!((w.lambda1, w.lambda2, w.lambda3), (10.0, 0.0, 0.0));
        let w = LossWeights::default().gated(true, false);
        assert_eq!((w.lambda2, w.lambda3), (0.5, 0.0));
    }

    fn small_perceptual() -> PerceptualNet {
        let mut cfg = PerceptualConfig::default();
        cfg.net.fnc_order = 6;
        cfg.net.d_model = 8;
        cfg.net.n_heads = 2;
        cfg.net.ffn_hidden = 8;
        PerceptualNet::new(cfg).unwrap()
    }

    #[test]
    fn perceptual_identity_and_sensitivity() {
        let net = small_perceptual();
        let y = random_fnc(6, 7);
        assert_eq!(perceptual(&net, &y, &y).unwrap(), 0.0);
        for (i, j) in [(0, 1), (2, 5), (3, 4)] {
            let mut v = y.values().to_vec();
            v[i * 6 + j] = (v[i * 6 + j] + 0.05).min(1.0);
            v[j * 6 + i] = v[i * 6 + j];
            let p = perceptual(&net, &y, &FncMatrix::new(6, v).unwrap()).unwrap();
            assert!(p > 0.0);
        }
    }

    #[test]
    fn losses_match_finite_differences() {
        let y = batch_matrices(&[&random_fnc(5, 8), &random_fnc(5, 9)]).unwrap();
        let h = batch_matrices(&[&random_fnc(5, 10), &random_fnc(5, 11)]).unwrap();
        let yc = y.clone();
        let case = GradCase::new("correlation", vec![h.clone()], move |g, v| {
            let y = g.constant(yc.clone());
            Ok(correlation_loss(g, y, v[0])?)
        });
        assert!(check_case(&case, 1e-5, 0).unwrap() < 1e-4);
        let yc = y.clone();
        let case = GradCase::new("mse", vec![h.clone()], move |g, v| {
            let y = g.constant(yc.clone());
            Ok(mse_loss(g, y, v[0])?)
        });
        assert!(check_case(&case, 1e-5, 0).unwrap() < 1e-4);
        let case = GradCase::new("adversarial", vec![Init::new(1).trunc_normal(&[4], 1.0), Init::new(2).trunc_normal(&[4], 1.0)], |g, v| {
            let d = d_loss(g, v[0], v[1])?;
            let a = g_adv_loss(g, v[1]);
            g.add(d, a)
        });
        assert!(check_case(&case, 1e-5, 0).unwrap() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn correlation_in_range_and_affine_invariant(
            a in proptest::collection::vec(-0.9f64..0.9, 10),
            b in proptest::collection::vec(-0.9f64..0.9, 10),
            scale in 0.05f64..1.0,
            shift in -0.05f64..0.05,
        ) {
            let (y, h) = (from_triangle(5, &a), from_triangle(5, &b));
            let c = correlation(&y, &h).unwrap();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&c));
            let t: Vec<f64> = b.iter().map(|v| v * scale + shift).collect();
            let c2 = correlation(&y, &from_triangle(5, &t)).unwrap();
            prop_assert!((c - c2).abs() < 1e-10);
        }

        #[test]
        fn mse_non_negative(
            a in proptest::collection::vec(-1.0f64..1.0, 10),
            b in proptest::collection::vec(-1.0f64..1.0, 10),
        ) {
            let (y, h) = (from_triangle(5, &a), from_triangle(5, &b));
            prop_assert!(mse(&y, &h).unwrap() >= 0.0);
            prop_assert_eq!(mse(&y, &y).unwrap(), 0.0);
        }

        #[test]
        fn breakdown_total_identity(
            parts in proptest::collection::vec(0.0f64..5.0, 4),
            w in proptest::collection::vec(0.0f64..20.0, 3),
        ) {
            let lw = LossWeights { lambda1: w[0], lambda2: w[1], lambda3: w[2] };
            let b = total_g_loss(parts[0], parts[1], parts[2], parts[3], &lw).unwrap();
            let expected = b.gan + lw.lambda1 * b.mse + lw.lambda2 * b.perceptual + lw.lambda3 * b.correlation;
            prop_assert!((b.total - expected).abs() < 1e-12);
        }
    }
}
