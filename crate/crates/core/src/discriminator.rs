//! ViT discriminator over connectivity matrices and the frozen perceptual
//! feature network.

use fncgen_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::layers::{ClassConditioning, Linear, PatchConfig, VitEncoder};
use crate::params::{Bound, Init, ParamSet};
use crate::types::{ClassLabel, FncMatrix};

/// Side of the zero-padded matrix for patch side `p`.
pub fn padded_order(n: usize, p: usize) -> usize {
    n.div_ceil(p) * p
}

/// Splits a matrix into p×p tiles in raster order, zero-padding the bottom
/// and right edges to a multiple of `p`. Returns `[T', p²]`.
pub fn patchify2d(fnc: &FncMatrix, p: usize) -> Result<Tensor> {
    if p == 0 {
        return config_err("patch size must be positive");
    }
    let n = fnc.order();
    let m = padded_order(n, p);
    let grid = m / p;
    let mut out = Vec::with_capacity(m * m);
    for gi in 0..grid {
        for gj in 0..grid {
            for i in gi * p..(gi + 1) * p {
                for j in gj * p..(gj + 1) * p {
                    out.push(if i < n && j < n { fnc.get(i, j) } else { 0.0 });
                }
            }
        }
    }
    Ok(Tensor::new([grid * grid, p * p], out)?)
}

/// Reassembles tiles from [`patchify2d`] into the padded `m × m` buffer.
pub fn unpatchify2d(patches: &Tensor, p: usize) -> Result<Vec<f64>> {
    let s = patches.shape();
    let grid = (s[0] as f64).sqrt().round() as usize;
    if s.len() != 2 || s[1] != p * p || grid * grid != s[0] {
        return contract_err(format!("patches {s:?} are not a square grid of {p}×{p} tiles"));
    }
    let m = grid * p;
    let mut out = vec![0.0; m * m];
    for (k, tile) in patches.data().chunks(p * p).enumerate() {
        let (gi, gj) = (k / grid, k % grid);
        for (e, &v) in tile.iter().enumerate() {
            out[(gi * p + e / p) * m + gj * p + e % p] = v;
        }
    }
    Ok(out)
}

/// Graph version of [`patchify2d`] for a `[B, n, n]` batch.
pub fn patchify2d_graph(g: &mut Graph, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return contract_err(format!("expected a [B, n, n] batch, got {s:?}"));
    }
    let (b, n) = (s[0], s[1]);
    let m = padded_order(n, p);
    let mut x = x;
    if m != n {
        let right = g.constant(Tensor::zeros([b, n, m - n])?);
        x = g.concat(&[x, right], 2)?;
        let bottom = g.constant(Tensor::zeros([b, m - n, m])?);
        x = g.concat(&[x, bottom], 1)?;
    }
    let grid = m / p;
    let x = g.reshape(x, &[b, grid, p, grid, p])?;
    let x = g.transpose(x, &[0, 1, 3, 2, 4])?;
    Ok(g.reshape(x, &[b, grid * grid, p * p])?)
}

/// Stacks matrices into a `[B, n, n]` tensor.
pub fn batch_matrices(fncs: &[&FncMatrix]) -> Result<Tensor> {
    let Some(first) = fncs.first() else {
        return contract_err("empty batch");
    };
    let n = first.order();
    let mut data = Vec::with_capacity(fncs.len() * n * n);
    for f in fncs {
        if f.order() != n {
            return contract_err(format!("matrix orders {} and {n} differ", f.order()));
        }
        data.extend_from_slice(f.values());
    }
    Ok(Tensor::new([fncs.len(), n, n], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig2d {
    pub fnc_order: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
}

impl VitConfig2d {
    pub fn patch_config(&self) -> PatchConfig {
        let m = padded_order(self.fnc_order, self.patch.max(1));
        PatchConfig {
            input_dims: vec![m, m],
            patch_size: vec![self.patch; 2],
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.patch_config().n_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fnc_order < 2 || self.patch == 0 {
            return config_err(format!(
                "matrix order {} and patch {} must be ≥ 2 and ≥ 1",
                self.fnc_order, self.patch
            ));
        }
        self.patch_config().validate()
    }
}

impl Default for VitConfig2d {
    fn default() -> Self {
        Self {
            fnc_order: 16,
            patch: 4,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ffn_hidden: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: VitConfig2d,
    conditioning: ClassConditioning,
    params: ParamSet,
    encoder: VitEncoder,
    head: Linear,
}

impl Discriminator {
    pub fn new(cfg: VitConfig2d, conditioning: ClassConditioning, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(seed);
        let encoder = VitEncoder::new(&mut params, &mut init, "disc", &cfg.patch_config(), conditioning)?;
        let head = Linear::new(&mut params, &mut init, "disc.head", cfg.d_model, 1);
        Ok(Self {
            cfg,
            conditioning,
            params,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &VitConfig2d {
        &self.cfg
    }

    pub fn conditioning(&self) -> ClassConditioning {
        self.conditioning
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `x` is `[B, n, n]`; returns logits `[B]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, classes: &[ClassLabel]) -> Result<Var> {
        let b = g.shape(x)[0];
        let patches = patchify2d_graph(g, x, self.cfg.patch)?;
        let h = self.encoder.forward(g, p, patches, classes)?;
        let pooled = g.mean_axis(h, 1)?;
        let logit = self.head.forward(g, p, pooled)?;
        Ok(g.reshape(logit, &[b])?)
    }

    pub fn discriminate(&self, fnc: &FncMatrix, class: ClassLabel) -> Result<f64> {
        if fnc.order() != self.cfg.fnc_order {
            return contract_err(format!(
                "matrix order {} does not match discriminator order {}",
                fnc.order(),
                self.cfg.fnc_order
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch_matrices(&[fnc])?);
        let y = self.forward(&mut g, &p, x, &[class])?;
        Ok(g.data(y)[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub net: VitConfig2d,
    /// 1-based block indices whose activations enter the loss.
    pub blocks: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            net: VitConfig2d {
                n_blocks: 4,
                ..VitConfig2d::default()
            },
            blocks: vec![2],
            seed: 0x5eed_f00d,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.blocks.is_empty() {
            return config_err("perceptual loss needs at least one block");
        }
        if let Some(&b) = self.blocks.iter().find(|&&b| b == 0 || b > self.net.n_blocks) {
            return config_err(format!(
                "perceptual block {b} outside 1..={}",
                self.net.n_blocks
            ));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.blocks.iter().copied().max().unwrap_or(0)
    }
}

/// Frozen, seeded ViT used only as a feature extractor. Never handed to an
/// optimizer.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    cfg: PerceptualConfig,
    params: ParamSet,
    encoder: VitEncoder,
}

impl PerceptualNet {
    pub fn new(cfg: PerceptualConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(cfg.seed);
        let encoder = VitEncoder::new(
            &mut params,
            &mut init,
            "perc",
            &cfg.net.patch_config(),
            ClassConditioning::Disabled,
        )?;
        Ok(Self { cfg, params, encoder })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replaces the weights with external ones (names `perc.*`).
    pub fn load_weights(&mut self, source: &[(String, Tensor)]) -> Result<()> {
        self.params.load_values(source)
    }

    /// Activations of every block up to the deepest selected one,
    /// `[B, T', d]` each, with parameters bound as constants.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let p = self.params.bind(g, false);
        let patches = patchify2d_graph(g, x, self.cfg.net.patch)?;
        self.encoder.forward_blocks(g, &p, patches, &[], self.cfg.depth())
    }

    /// Per-block activations `[T', d]` for every block of the network.
    pub fn extract_features(&self, fnc: &FncMatrix) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch_matrices(&[fnc])?);
        let patches = patchify2d_graph(&mut g, x, self.cfg.net.patch)?;
        let outs = self.encoder.forward_blocks(&mut g, &p, patches, &[], self.cfg.net.n_blocks)?;
        outs.into_iter()
            .map(|v| {
                let s = g.shape(v);
                Ok(Tensor::new([s[1], s[2]], g.data(v).to_vec())?)
            })
            .collect()
    }
}
