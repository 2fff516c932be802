//! Vision-transformer building blocks shared by the generator, the
//! discriminator and the perceptual feature network.

use fncgen_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::params::{Bound, Init, ParamId, ParamSet, INIT_STD};
use crate::types::{ClassLabel, StructuralVolume};

pub const LN_EPS: f64 = 1e-5;

/// How the class identifier enters the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassConditioning {
    /// No class information (ablation without class identifier).
    Disabled,
    /// A learned per-class vector added to every token.
    AdditiveEmbedding,
}

impl ClassConditioning {
    pub fn from_flag(enabled: bool) -> Self {
        if enabled {
            Self::AdditiveEmbedding
        } else {
            Self::Disabled
        }
    }
}

/// Shape of a ViT over a 2D or 3D input grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub input_dims: Vec<usize>,
    pub patch_size: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.len() != self.patch_size.len() || self.input_dims.is_empty() {
            return config_err(format!(
                "input dims {:?} and patch size {:?} must have the same rank",
                self.input_dims, self.patch_size
            ));
        }
        for (axis, (&d, &p)) in self.input_dims.iter().zip(&self.patch_size).enumerate() {
            if p == 0 || d == 0 || d % p != 0 {
                return config_err(format!("axis {axis}: input size {d} is not divisible by patch size {p}"));
            }
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return config_err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_hidden == 0 {
            return config_err("ffn_hidden must be positive");
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.input_dims.iter().zip(&self.patch_size).map(|(d, p)| d / p).product()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size.iter().product()
    }
}

fn check_patch3d(dims: [usize; 3], patch: [usize; 3]) -> Result<()> {
    const AXES: [&str; 3] = ["depth", "height", "width"];
    for a in 0..3 {
        if patch[a] == 0 || dims[a] % patch[a] != 0 {
            return config_err(format!(
                "{} axis: size {} is not divisible by patch size {}",
                AXES[a], dims[a], patch[a]
            ));
        }
    }
    Ok(())
}

/// Splits a volume into non-overlapping patches, one row per patch, in
/// raster order (z-major, then y, then x); each row is the patch's voxels
/// in the same order.
pub fn patchify3d(vol: &StructuralVolume, patch: [usize; 3]) -> Result<Tensor> {
    let dims = vol.dims();
    check_patch3d(dims, patch)?;
    let [pd, ph, pw] = patch;
    let (gd, gh, gw) = (dims[0] / pd, dims[1] / ph, dims[2] / pw);
    let plen = pd * ph * pw;
    let mut out = Vec::with_capacity(vol.voxels().len());
    for bz in 0..gd {
        for by in 0..gh {
            for bx in 0..gw {
                for z in 0..pd {
                    for y in 0..ph {
                        let row = (bz * pd + z) * dims[1] + by * ph + y;
                        let start = row * dims[2] + bx * pw;
                        out.extend_from_slice(&vol.voxels()[start..start + pw]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([gd * gh * gw, plen], out)?)
}

/// Inverse of [`patchify3d`].
pub fn unpatchify3d(patches: &Tensor, dims: [usize; 3], patch: [usize; 3]) -> Result<StructuralVolume> {
    check_patch3d(dims, patch)?;
    let [pd, ph, pw] = patch;
    let (gd, gh, gw) = (dims[0] / pd, dims[1] / ph, dims[2] / pw);
    if patches.shape() != [gd * gh * gw, pd * ph * pw] {
        return contract_err(format!("patch tensor {:?} does not fit volume {dims:?}", patches.shape()));
    }
    let mut vox = vec![0.0; dims.iter().product()];
    let src = patches.data();
    let mut k = 0;
    for bz in 0..gd {
        for by in 0..gh {
            for bx in 0..gw {
                for z in 0..pd {
                    for y in 0..ph {
                        let row = (bz * pd + z) * dims[1] + by * ph + y;
                        let start = row * dims[2] + bx * pw;
                        vox[start..start + pw].copy_from_slice(&src[k..k + pw]);
                        k += pw;
                    }
                }
            }
        }
    }
    StructuralVolume::new(dims, vox)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = params.add(format!("{name}.weight"), init.trunc_normal(&[in_dim, out_dim], INIT_STD));
        let b = params.add(format!("{name}.bias"), init.zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// Applies `x·W + b` over the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).numel() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim])? };
        let h = g.matmul(flat, p[self.w])?;
        let h = g.add(h, p[self.b])?;
        if shape.len() == 2 {
            return Ok(h);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank ≥ 1") = self.out_dim;
        Ok(g.reshape(h, &out_shape)?)
    }
}

/// Patch projection plus learned position and (optional) class embeddings.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub proj: Linear,
    pub pos: ParamId,
    pub class_table: Option<ParamId>,
    pub max_tokens: usize,
    pub d_model: usize,
}

impl TokenEmbedding {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        patch_len: usize,
        max_tokens: usize,
        d_model: usize,
        conditioning: ClassConditioning,
    ) -> Self {
        let proj = Linear::new(params, init, &format!("{name}.proj"), patch_len, d_model);
        let pos = params.add(format!("{name}.pos"), init.trunc_normal(&[max_tokens, d_model], INIT_STD));
        let class_table = match conditioning {
            ClassConditioning::Disabled => None,
            ClassConditioning::AdditiveEmbedding => {
                Some(params.add(format!("{name}.class"), init.trunc_normal(&[2, d_model], INIT_STD)))
            }
        };
        Self {
            proj,
            pos,
            class_table,
            max_tokens,
            d_model,
        }
    }

    /// `patches` is `[B, T, patch_len]`; returns `[B, T, d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var, classes: &[ClassLabel]) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        if shape.len() != 3 {
            return contract_err(format!("patch batch must be [B, T, P], got {shape:?}"));
        }
        let (b, t) = (shape[0], shape[1]);
        if t > self.max_tokens {
            return config_err(format!(
                "{t} tokens exceed the position table of {} entries",
                self.max_tokens
            ));
        }
        let h = self.proj.forward(g, p, patches)?;
        let pos = if t == self.max_tokens {
            p[self.pos]
        } else {
            g.slice(p[self.pos], 0, 0, t)?
        };
        let mut h = g.add(h, pos)?;
        if let Some(table) = self.class_table {
            if classes.len() != b {
                return contract_err(format!("{} class labels for a batch of {b}", classes.len()));
            }
            let idx: Vec<usize> = classes.iter().map(|c| c.index()).collect();
            let emb = g.index_select(p[table], 0, &idx)?;
            let emb = g.reshape(emb, &[b, 1, self.d_model])?;
            h = g.add(h, emb)?;
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product self-attention over `[B, T, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamSet, init: &mut Init, name: &str, d_model: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(params, init, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(params, init, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(params, init, &format!("{name}.v"), d_model, d_model),
            o: Linear::new(params, init, &format!("{name}.o"), d_model, d_model),
            n_heads,
            d_model,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.n_heads, d / self.n_heads);
        // [B, T, d] -> [B·h, T, dh]
        let split = |g: &mut Graph, lin: &Linear, perm: &[usize], out: [usize; 3]| -> Result<Var> {
            let y = lin.forward(g, p, x)?;
            let y = g.reshape(y, &[b, t, h, dh])?;
            let y = g.transpose(y, perm)?;
            Ok(g.reshape(y, &out)?)
        };
        let q = split(g, &self.q, &[0, 2, 1, 3], [b * h, t, dh])?;
        let kt = split(g, &self.k, &[0, 2, 3, 1], [b * h, dh, t])?;
        let v = split(g, &self.v, &[0, 2, 1, 3], [b * h, t, dh])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.o.forward(g, p, ctx)
    }
}

/// Residual block with normalization after each residual add:
/// `Z = LN(Attn(X) + X)`, `out = LN(Z + FFN(Z))`, FFN = linear → GELU → linear.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl TransformerBlock {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        let attn = MultiHeadAttention::new(params, init, &format!("{name}.attn"), d_model, n_heads);
        let ln1_gamma = params.add(format!("{name}.ln1.gamma"), init.ones(&[d_model]));
        let ln1_beta = params.add(format!("{name}.ln1.beta"), init.zeros(&[d_model]));
        let ff1 = Linear::new(params, init, &format!("{name}.ffn1"), d_model, ffn_hidden);
        let ff2 = Linear::new(params, init, &format!("{name}.ffn2"), ffn_hidden, d_model);
        let ln2_gamma = params.add(format!("{name}.ln2.gamma"), init.ones(&[d_model]));
        let ln2_beta = params.add(format!("{name}.ln2.beta"), init.zeros(&[d_model]));
        Self {
            attn,
            ln1_gamma,
            ln1_beta,
            ff1,
            ff2,
            ln2_gamma,
            ln2_beta,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, p, x)?;
        let r = g.add(a, x)?;
        let z = g.layernorm(r, p[self.ln1_gamma], p[self.ln1_beta], LN_EPS)?;
        let f = self.ff1.forward(g, p, z)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, p, f)?;
        let r = g.add(z, f)?;
        Ok(g.layernorm(r, p[self.ln2_gamma], p[self.ln2_beta], LN_EPS)?)
    }
}

/// Token embedding followed by a stack of transformer blocks.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub embed: TokenEmbedding,
    pub blocks: Vec<TransformerBlock>,
}

impl VitEncoder {
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        cfg: &PatchConfig,
        conditioning: ClassConditioning,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = TokenEmbedding::new(
            params,
            init,
            &format!("{name}.embed"),
            cfg.patch_len(),
            cfg.n_tokens(),
            cfg.d_model,
            conditioning,
        );
        let blocks = (0..cfg.n_blocks)
            .map(|i| TransformerBlock::new(params, init, &format!("{name}.block{i}"), cfg.d_model, cfg.n_heads, cfg.ffn_hidden))
            .collect();
        Ok(Self { embed, blocks })
    }

    /// Outputs of the first `depth` blocks (all blocks when `depth` exceeds
    /// the stack).
    pub fn forward_blocks(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: Var,
        classes: &[ClassLabel],
        depth: usize,
    ) -> Result<Vec<Var>> {
        let mut h = self.embed.forward(g, p, patches, classes)?;
        let mut outs = Vec::with_capacity(depth.min(self.blocks.len()));
        for block in self.blocks.iter().take(depth) {
            h = block.forward(g, p, h)?;
            outs.push(h);
        }
        if outs.is_empty() {
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, patches: Var, classes: &[ClassLabel]) -> Result<Var> {
        let outs = self.forward_blocks(g, p, patches, classes, self.blocks.len())?;
        Ok(*outs.last().expect("at least the embedding output"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fncgen_autodiff::gradcheck::{check_case, GradCase};

    fn random_tokens(seed: u64, shape: &[usize]) -> Tensor {
        Init::new(seed).trunc_normal(shape, 1.0)
    }

    fn volume(dims: [usize; 3]) -> StructuralVolume {
        let n: usize = dims.iter().product();
        StructuralVolume::new(dims, (0..n).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn patchify_counts() {
        let p = patchify3d(&volume([32, 32, 32]), [8, 8, 8]).unwrap();
        assert_eq!(p.shape(), &[64, 512]);
        let v = volume([16, 16, 16]);
        let p = patchify3d(&v, [16, 16, 16]).unwrap();
        assert_eq!(p.shape(), &[1, 4096]);
        assert_eq!(p.data(), v.voxels());
    }

    #[test]
    fn patchify_raster_order() {
        let v = volume([4, 4, 4]);
        let p = patchify3d(&v, [2, 2, 2]).unwrap();
        // Patch 1 is z-block 0, y-block 0, x-block 1; its first voxel is (0,0,2).
        assert_eq!(p.get(&[1, 0]), v.at(0, 0, 2));
        // Patch 2 is y-block 1; element 5 is (z=1, y=0, x=1) inside the patch.
        assert_eq!(p.get(&[2, 5]), v.at(1, 2, 1));
    }

    #[test]
    fn patchify_round_trip() {
        let v = volume([8, 12, 4]);
        let p = patchify3d(&v, [4, 3, 2]).unwrap();
        assert_eq!(unpatchify3d(&p, [8, 12, 4], [4, 3, 2]).unwrap(), v);
    }

    #[test]
    fn patchify_rejects_non_divisible_axis() {
        let err = patchify3d(&volume([8, 10, 8]), [4, 4, 4]).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn patch_config_validation() {
        let mut cfg = PatchConfig {
            input_dims: vec![32, 32, 32],
            patch_size: vec![8, 8, 8],
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            ffn_hidden: 128,
        };
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.n_tokens(), 64);
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    fn embedding(conditioning: ClassConditioning) -> (ParamSet, TokenEmbedding) {
        let mut ps = ParamSet::new();
        let emb = TokenEmbedding::new(&mut ps, &mut Init::new(1), "e", 6, 4, 8, conditioning);
        (ps, emb)
    }

    #[test]
    fn zero_patches_and_positions_give_class_vector() {
        let (mut ps, emb) = embedding(ClassConditioning::AdditiveEmbedding);
        ps.get_mut(emb.pos).data_mut().fill(0.0);
        let table = ps.get(emb.class_table.unwrap()).clone();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([2, 4, 6]).unwrap());
        let out = emb.forward(&mut g, &p, x, &[ClassLabel::Sz, ClassLabel::Hc]).unwrap();
        let d = g.data(out);
        for t in 0..4 {
            assert_eq!(&d[t * 8..(t + 1) * 8], &table.data()[8..16]);
            assert_eq!(&d[32 + t * 8..32 + (t + 1) * 8], &table.data()[..8]);
        }
    }

    #[test]
    fn disabled_conditioning_ignores_class() {
        let (ps, emb) = embedding(ClassConditioning::Disabled);
        let x = random_tokens(3, &[1, 4, 6]);
        let run = |c| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let x = g.constant(x.clone());
            let out = emb.forward(&mut g, &p, x, &[c]).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(ClassLabel::Hc), run(ClassLabel::Sz));
    }

    #[test]
    fn distinct_classes_give_distinct_tokens() {
        let (ps, emb) = embedding(ClassConditioning::AdditiveEmbedding);
        let x = random_tokens(3, &[1, 4, 6]);
        let run = |c| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let x = g.constant(x.clone());
            let out = emb.forward(&mut g, &p, x, &[c]).unwrap();
            g.value(out).clone()
        };
        assert_ne!(run(ClassLabel::Hc), run(ClassLabel::Sz));
    }

    #[test]
    fn too_many_tokens_is_config_error() {
        let (ps, emb) = embedding(ClassConditioning::Disabled);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 5, 6]).unwrap());
        assert!(matches!(
            emb.forward(&mut g, &p, x, &[ClassLabel::Hc]),
            Err(crate::Error::Config(_))
        ));
    }

    fn attention(seed: u64) -> (ParamSet, MultiHeadAttention) {
        let mut ps = ParamSet::new();
        let mut init = Init::new(seed);
        let attn = MultiHeadAttention::new(&mut ps, &mut init, "a", 8, 2);
        for t in ps.tensors_mut() {
            // Larger weights so the attention pattern is far from uniform.
            t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
        }
        (ps, attn)
    }

    #[test]
    fn single_token_attention_is_value_chain() {
        let (ps, attn) = attention(5);
        let x = random_tokens(9, &[1, 1, 8]);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(x);
        let out = attn.forward(&mut g, &p, xv).unwrap();
        let v = attn.v.forward(&mut g, &p, xv).unwrap();
        let expected = attn.o.forward(&mut g, &p, v).unwrap();
        let (a, b) = (g.data(out).to_vec(), g.data(expected).to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (ps, attn) = attention(6);
        let x = random_tokens(10, &[1, 5, 8]);
        let perm = [3, 0, 4, 1, 2];
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(x);
        let xp = g.index_select(xv, 1, &perm).unwrap();
        let out = attn.forward(&mut g, &p, xv).unwrap();
        let out_p = attn.forward(&mut g, &p, xp).unwrap();
        let permuted = g.index_select(out, 1, &perm).unwrap();
        for (a, b) in g.data(permuted).iter().zip(g.data(out_p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_attention_is_zero() {
        let (mut ps, attn) = attention(7);
        ps.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(random_tokens(1, &[2, 3, 8]));
        let out = attn.forward(&mut g, &p, xv).unwrap();
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    fn block(seed: u64) -> (ParamSet, TransformerBlock) {
        let mut ps = ParamSet::new();
        let b = TransformerBlock::new(&mut ps, &mut Init::new(seed), "b", 8, 2, 16);
        (ps, b)
    }

    #[test]
    fn block_preserves_shape() {
        let (ps, b) = block(1);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(random_tokens(2, &[3, 5, 8]));
        let out = b.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.shape(out), &[3, 5, 8]);
    }

    #[test]
    fn zero_weight_block_is_double_layernorm() {
        let (mut ps, b) = block(2);
        for id in [b.attn.q.w, b.attn.k.w, b.attn.v.w, b.attn.o.w, b.ff1.w, b.ff2.w] {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let x = random_tokens(4, &[1, 3, 8]);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(x);
        let out = b.forward(&mut g, &p, xv).unwrap();
        let ones = g.constant(Tensor::ones([8]).unwrap());
        let zeros = g.constant(Tensor::zeros([8]).unwrap());
        let l1 = g.layernorm(xv, ones, zeros, LN_EPS).unwrap();
        let l2 = g.layernorm(l1, ones, zeros, LN_EPS).unwrap();
        assert_eq!(g.data(out), g.data(l2));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (ps, b) = block(3);
        let x = random_tokens(5, &[1, 4, 8]);
        let perm = [2, 3, 1, 0];
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(x);
        let xp = g.index_select(xv, 1, &perm).unwrap();
        let out = b.forward(&mut g, &p, xv).unwrap();
        let out_p = b.forward(&mut g, &p, xp).unwrap();
        let permuted = g.index_select(out, 1, &perm).unwrap();
        for (a, c) in g.data(permuted).iter().zip(g.data(out_p)) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn every_block_parameter_receives_gradient() {
        let (mut ps, b) = block(4);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, true);
        let xv = g.constant(random_tokens(6, &[2, 3, 8]));
        let out = b.forward(&mut g, &p, xv).unwrap();
        let w = g.constant(random_tokens(7, &[2, 3, 8]));
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        ps.accumulate_grads(&g, &p).unwrap();
        for (name, t) in ps.names().iter().zip(ps.tensors()) {
            let grad = t.grad().expect("gradient present");
            assert!(grad.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let (ps, b) = block(8);
        let x = random_tokens(11, &[1, 3, 8]);
        let names = ps.names().to_vec();
        let q_idx = names.iter().position(|n| n == "b.attn.q.weight").unwrap();
        let f1_idx = names.iter().position(|n| n == "b.ffn1.weight").unwrap();
        let base = ps.clone();
        let case = GradCase::new(
            "block",
            vec![x, ps.tensors()[q_idx].clone(), ps.tensors()[f1_idx].clone()],
            move |g, v| {
                let mut local = base.clone();
                let ids: Vec<ParamId> = local.ids().collect();
                local.get_mut(ids[q_idx]).data_mut().copy_from_slice(g.data(v[1]));
                local.get_mut(ids[f1_idx]).data_mut().copy_from_slice(g.data(v[2]));
                let mut p = local.bind(g, false);
                // Route the two checked weights through the case inputs.
                let mut vars = p.vars().to_vec();
                vars[q_idx] = v[1];
                vars[f1_idx] = v[2];
                p = Bound::from_vars(vars);
                let out = b.forward(g, &p, v[0])?;
                Ok(g.tanh(out))
            },
        );
        assert!(check_case(&case, 1e-5, 2).unwrap() < 1e-4);
    }
}
