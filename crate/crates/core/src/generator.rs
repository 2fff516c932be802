//! Generator: structural volume × class → connectivity matrix.
//!
//! Pipeline: 3D patches → token embedding (position + class) → transformer
//! blocks → token resampling to one token per fragment → shared MLP
//! fragment head → stitching into a symmetric, unit-diagonal matrix.

use fncgen_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::layers::{patchify3d, ClassConditioning, Linear, PatchConfig, VitEncoder};
use crate::params::{Bound, Init, ParamId, ParamSet, INIT_STD};
use crate::types::{ClassLabel, FncMatrix, StructuralVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub volume_dims: [usize; 3],
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub fnc_order: usize,
    pub fragment: usize,
    pub head_hidden: usize,
    pub conditioning: ClassConditioning,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            volume_dims: [32, 32, 32],
            patch: 8,
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            ffn_hidden: 128,
            fnc_order: 16,
            fragment: 2,
            head_hidden: 128,
            conditioning: ClassConditioning::AdditiveEmbedding,
        }
    }
}

impl GeneratorConfig {
    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            input_dims: self.volume_dims.to_vec(),
            patch_size: vec![self.patch; 3],
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn plan(&self) -> Result<FragmentPlan> {
        FragmentPlan::new(self.fnc_order, self.fragment)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_config().validate()?;
        self.plan()?;
        if self.head_hidden == 0 {
            return config_err("head_hidden must be positive");
        }
        Ok(())
    }
}

/// Tiling of the target matrix into f×f fragments on a g×g grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FragmentPlan {
    /// Target order.
    pub n: usize,
    /// Fragment side.
    pub f: usize,
    /// Fragment grid side, ceil(n / f).
    pub g: usize,
    /// Fragment count, g².
    pub k: usize,
    /// Padded order, g·f.
    pub m: usize,
}

impl FragmentPlan {
    pub fn new(n: usize, f: usize) -> Result<Self> {
        if n < 2 || f == 0 {
            return config_err(format!("fragment plan needs order ≥ 2 and fragment ≥ 1, got n={n}, f={f}"));
        }
        let g = n.div_ceil(f);
        Ok(Self { n, f, g, k: g * g, m: g * f })
    }
}

/// Learned map across the token axis: `[B, T, d]` → `[B, K, d]` with a
/// `[K, T]` weight.
pub fn resample_tokens(g: &mut Graph, weight: Var, x: Var) -> Result<Var> {
    let (ws, xs) = (g.shape(weight).to_vec(), g.shape(x).to_vec());
    if ws.len() != 2 || xs.len() != 3 || ws[1] != xs[1] {
        return contract_err(format!("resample weight {ws:?} does not match tokens {xs:?}"));
    }
    let (b, t, d, k) = (xs[0], xs[1], xs[2], ws[0]);
    let xt = g.transpose(x, &[1, 0, 2])?;
    let xt = g.reshape(xt, &[t, b * d])?;
    let y = g.matmul(weight, xt)?;
    let y = g.reshape(y, &[k, b, d])?;
    Ok(g.transpose(y, &[1, 0, 2])?)
}

/// Largest f64 below one. Scaling tanh by it keeps entries strictly inside
/// (-1, 1) where tanh itself rounds to ±1.
pub const OUTPUT_BOUND: f64 = 1.0 - f64::EPSILON / 2.0;

/// Shared MLP (linear → GELU → linear → tanh) mapping each token to one
/// flattened f×f fragment.
pub fn fragment_heads(g: &mut Graph, p: &Bound, hidden: &Linear, out: &Linear, x: Var) -> Result<Var> {
    let h = hidden.forward(g, p, x)?;
    let h = g.gelu(h);
    let h = out.forward(g, p, h)?;
    let t = g.tanh(h);
    Ok(g.scale(t, OUTPUT_BOUND))
}

/// Tiles `[B, K, f²]` fragments row-major over the fragment grid, crops to
/// n×n, symmetrizes with (A + Aᵀ)/2 and sets the diagonal to 1.
pub fn stitch(g: &mut Graph, fragments: Var, plan: &FragmentPlan) -> Result<Var> {
    let s = g.shape(fragments).to_vec();
    if s.len() != 3 || s[1] != plan.k || s[2] != plan.f * plan.f {
        return contract_err(format!(
            "fragments {s:?} do not match a {}×{} grid of {}×{} tiles",
            plan.g, plan.g, plan.f, plan.f
        ));
    }
    let b = s[0];
    let FragmentPlan { n, f, g: grid, m, .. } = *plan;
    let x = g.reshape(fragments, &[b, grid, grid, f, f])?;
    let x = g.transpose(x, &[0, 1, 3, 2, 4])?;
    let mut a = g.reshape(x, &[b, m, m])?;
    if m != n {
        a = g.slice(a, 1, 0, n)?;
        a = g.slice(a, 2, 0, n)?;
    }
    let at = g.transpose(a, &[0, 2, 1])?;
    let sum = g.add(a, at)?;
    let sym = g.scale(sum, 0.5);
    let off = g.constant(Tensor::from_fn([n, n], |i| if i / n == i % n { 0.0 } else { 1.0 })?);
    let eye = g.constant(Tensor::eye(n)?);
    let masked = g.mul(sym, off)?;
    Ok(g.add(masked, eye)?)
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    plan: FragmentPlan,
    params: ParamSet,
    encoder: VitEncoder,
    resample: ParamId,
    head_hidden: Linear,
    head_out: Linear,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan()?;
        let pc = cfg.patch_config();
        let t = pc.n_tokens();
        let mut params = ParamSet::new();
        let mut init = Init::new(seed);
        let encoder = VitEncoder::new(&mut params, &mut init, "gen", &pc, cfg.conditioning)?;
        let resample_init = if plan.k == t {
            Tensor::eye(t)?
        } else {
            let mut w = init.trunc_normal(&[plan.k, t], INIT_STD);
            w.data_mut().iter_mut().for_each(|v| *v += 1.0 / t as f64);
            w
        };
        let resample = params.add("gen.resample", resample_init);
        let head_hidden = Linear::new(&mut params, &mut init, "gen.head1", cfg.d_model, cfg.head_hidden);
        let head_out = Linear::new(&mut params, &mut init, "gen.head2", cfg.head_hidden, cfg.fragment * cfg.fragment);
        Ok(Self {
            cfg,
            plan,
            params,
            encoder,
            resample,
            head_hidden,
            head_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &FragmentPlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn resample_id(&self) -> ParamId {
        self.resample
    }

    pub fn head_ids(&self) -> (&Linear, &Linear) {
        (&self.head_hidden, &self.head_out)
    }

    pub fn n_tokens(&self) -> usize {
        self.cfg.patch_config().n_tokens()
    }

    /// Patch rows for one volume, checking its dims against the config.
    pub fn patches(&self, vol: &StructuralVolume) -> Result<Tensor> {
        if vol.dims() != self.cfg.volume_dims {
            return config_err(format!(
                "volume dims {:?} do not match generator dims {:?}",
                vol.dims(),
                self.cfg.volume_dims
            ));
        }
        patchify3d(vol, [self.cfg.patch; 3])
    }

    /// `patches` is `[B, T, p³]`; returns `[B, n, n]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var, classes: &[ClassLabel]) -> Result<Var> {
        let tokens = self.encoder.forward(g, p, patches, classes)?;
        let tokens = resample_tokens(g, p[self.resample], tokens)?;
        let frags = fragment_heads(g, p, &self.head_hidden, &self.head_out, tokens)?;
        stitch(g, frags, &self.plan)
    }

    /// Stacks per-subject patch tensors into one `[B, T, p³]` batch.
    pub fn batch_patches(patches: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = patches.first() else {
            return contract_err("empty batch");
        };
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(first.numel() * patches.len());
        for p in patches {
            if p.shape() != shape.as_slice() {
                return contract_err(format!("patch tensors {:?} and {shape:?} differ", p.shape()));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::new([patches.len(), shape[0], shape[1]], data)?)
    }

    /// Inference on pre-patchified inputs.
    pub fn generate_patches(&self, patches: &[&Tensor], classes: &[ClassLabel]) -> Result<Vec<FncMatrix>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Self::batch_patches(patches)?);
        let out = self.forward(&mut g, &p, x, classes)?;
        let n = self.plan.n;
        g.data(out)
            .chunks(n * n)
            .map(|c| FncMatrix::new(n, c.to_vec()))
            .collect()
    }

    pub fn generate(&self, vol: &StructuralVolume, class: ClassLabel) -> Result<FncMatrix> {
        let patches = self.patches(vol)?;
        let mut out = self.generate_patches(&[&patches], &[class])?;
        Ok(out.remove(0))
    }
}
