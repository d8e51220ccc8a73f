//! Convolutional feed-forward and the split-transform-merge group encoder.
//!
//! A group encoder evaluates `C` same-topology paths on one shared input and
//! merges them with a single shortcut: `y = x + Σ τ_i(x)`. Each path is
//! `τ(x) = ffn(norm2(sra(norm1(x))))` with no inner residuals.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{multi_head, spatial_reduce, AttentionParams, SpatialReduction, TokenMap};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, LinearParams, NormParams, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Where the pre-attention norm and the `W^S` reduction live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReductionSharing {
    /// One norm and one reduction per group encoder, read by every path.
    #[default]
    PerBlock,
    /// Each path owns its norm and reduction.
    PerPath,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvFfnParams {
    pub fc1: LinearParams,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub fc2: LinearParams,
    pub expansion: usize,
}

impl ConvFfnParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("expansion ratio must be >= 1".into()));
        }
        let hidden = dim * expansion;
        let fc1 = LinearParams::new(store, &format!("{name}.fc1"), dim, hidden, rng)?;
        // depthwise fan-out is 9
        let normal = Normal::new(0.0, (2.0f64 / 9.0).sqrt()).expect("valid std");
        let kernel = Tensor::from_fn(&[hidden, 3, 3], |_| T::from_f64(normal.sample(rng)));
        let dw_kernel = store.insert(format!("{name}.dw.weight"), kernel, true)?;
        let dw_bias = store.insert(format!("{name}.dw.bias"), Tensor::zeros(&[hidden]), false)?;
        let fc2 = LinearParams::new(store, &format!("{name}.fc2"), hidden, dim, rng)?;
        Ok(Self { fc1, dw_kernel, dw_bias, fc2, expansion })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.d_out
    }

    pub fn num_scalars(&self) -> usize {
        self.fc1.num_scalars() + 10 * self.hidden() + self.fc2.num_scalars()
    }
}

/// `fc2(gelu(dwconv(fc1(x))))`, the depthwise conv running on the token grid.
pub fn conv_ffn_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: &TokenMap, f: &ConvFfnParams) -> Result<TokenMap> {
    let s = g.shape(x.tokens).to_vec();
    if s.len() != 3 || s[1] != x.h * x.w {
        return Err(shape_err("conv_ffn", format!("tokens {s:?} do not form a {}x{} grid", x.h, x.w)));
    }
    let b = s[0];
    let hidden = f.hidden();
    let h1 = f.fc1.forward(g, p, x.tokens)?;
    let grid = g.reshape(h1, &[b, x.h, x.w, hidden])?;
    let chw = g.permute(grid, &[0, 3, 1, 2])?;
    let conv = g.depthwise_conv2d(chw, p[f.dw_kernel], Some(p[f.dw_bias]))?;
    let hwc = g.permute(conv, &[0, 2, 3, 1])?;
    let flat = g.reshape(hwc, &[b, x.h * x.w, hidden])?;
    let act = g.gelu(flat)?;
    let out = f.fc2.forward(g, p, act)?;
    Ok(x.with_tokens(out))
}

/// One transformation `τ_i`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderPathParams {
    /// Set only under [`ReductionSharing::PerPath`].
    pub norm1: Option<NormParams>,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub ffn: ConvFfnParams,
}

impl EncoderPathParams {
    pub fn num_scalars(&self) -> usize {
        self.norm1.map_or(0, |n| 2 * n.dim) + self.attn.num_scalars() + 2 * self.norm2.dim + self.ffn.num_scalars()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupEncoderSpec {
    pub dim: usize,
    pub num_heads: usize,
    pub expansion: usize,
    pub reduction: usize,
    pub paths: usize,
    pub sharing: ReductionSharing,
}

#[derive(Clone, Debug)]
pub struct GroupEncoderParams {
    pub spec: GroupEncoderSpec,
    /// Shared pre-attention norm (per-block sharing only).
    pub norm1: Option<NormParams>,
    /// Shared reduction (per-block sharing with `reduction > 1` only).
    pub sr: Option<SpatialReduction>,
    pub paths: Vec<EncoderPathParams>,
}

impl GroupEncoderParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: GroupEncoderSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.paths == 0 {
            return Err(Error::Config("group encoder needs at least one path".into()));
        }
        let per_block = spec.sharing == ReductionSharing::PerBlock;
        let (norm1, sr) = if per_block {
            let n = NormParams::new(store, &format!("{name}.norm1"), spec.dim)?;
            let sr = if spec.reduction > 1 {
                Some(SpatialReduction::new(store, &format!("{name}.sr"), spec.dim, spec.reduction, rng)?)
            } else {
                None
            };
            (Some(n), sr)
        } else {
            (None, None)
        };
        let mut paths = Vec::with_capacity(spec.paths);
        for i in 0..spec.paths {
            let pn = format!("{name}.paths.{i}");
            let norm1 = if per_block { None } else { Some(NormParams::new(store, &format!("{pn}.norm1"), spec.dim)?) };
            let attn =
                AttentionParams::new(store, &format!("{pn}.attn"), spec.dim, spec.num_heads, spec.reduction, !per_block, rng)?;
            let norm2 = NormParams::new(store, &format!("{pn}.norm2"), spec.dim)?;
            let ffn = ConvFfnParams::new(store, &format!("{pn}.ffn"), spec.dim, spec.expansion, rng)?;
            paths.push(EncoderPathParams { norm1, attn, norm2, ffn });
        }
        Ok(Self { spec, norm1, sr, paths })
    }

    /// Scalars shared by all paths of this block.
    pub fn shared_scalars(&self) -> usize {
        self.norm1.map_or(0, |n| 2 * n.dim) + self.sr.map_or(0, |s| s.num_scalars())
    }

    pub fn path_scalars(&self) -> usize {
        self.paths.iter().map(EncoderPathParams::num_scalars).sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.shared_scalars() + self.path_scalars()
    }
}

/// Normalized queries and the (possibly reduced) key/value grid.
struct AttentionInput {
    queries: TokenMap,
    kv: TokenMap,
}

fn attention_input<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    norm1: &NormParams,
    sr: Option<&SpatialReduction>,
) -> Result<AttentionInput> {
    let normed = x.with_tokens(norm1.forward(g, p, x.tokens)?);
    let kv = match sr {
        Some(sr) => spatial_reduce(g, p, &normed, sr)?,
        None => normed,
    };
    Ok(AttentionInput { queries: normed, kv })
}

fn path_body<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    input: &AttentionInput,
    path: &EncoderPathParams,
) -> Result<TokenMap> {
    let r = path.attn.reduction;
    if input.kv.len() * r * r != input.queries.len() {
        return Err(shape_err(
            "encoder_path",
            format!("key/value length {} is not {}/{r}^2", input.kv.len(), input.queries.len()),
        ));
    }
    let (attended, _) = multi_head(g, p, &input.queries, &input.kv, &path.attn)?;
    let normed = attended.with_tokens(path.norm2.forward(g, p, attended.tokens)?);
    conv_ffn_forward(g, p, &normed, &path.ffn)
}

fn path_input<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    block: &GroupEncoderParams,
    path: &EncoderPathParams,
) -> Result<AttentionInput> {
    match (path.norm1, block.norm1) {
        (Some(n), _) => attention_input(g, p, x, &n, path.attn.sr.as_ref()),
        (None, Some(n)) => attention_input(g, p, x, &n, block.sr.as_ref()),
        (None, None) => Err(Error::Config("encoder path has no pre-attention norm".into())),
    }
}

fn check_width<T: Scalar>(g: &Graph<T>, x: &TokenMap, block: &GroupEncoderParams) -> Result<()> {
    let d = x.dim(g);
    if d != block.spec.dim {
        return Err(shape_err("group_encoder", format!("token width {d}, encoder width {}", block.spec.dim)));
    }
    Ok(())
}

/// `τ_i(x)` for path `index` of `block`, evaluated standalone.
pub fn encoder_path_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    block: &GroupEncoderParams,
    index: usize,
) -> Result<TokenMap> {
    check_width(g, x, block)?;
    let path = block
        .paths
        .get(index)
        .ok_or_else(|| Error::Config(format!("path {index} out of range ({} paths)", block.paths.len())))?;
    let input = path_input(g, p, x, block, path)?;
    path_body(g, p, &input, path)
}

/// Attention weights `[B, heads, N, M]` of path `index` for block input `x`.
pub fn path_attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    block: &GroupEncoderParams,
    index: usize,
) -> Result<Var> {
    check_width(g, x, block)?;
    let path = block
        .paths
        .get(index)
        .ok_or_else(|| Error::Config(format!("path {index} out of range ({} paths)", block.paths.len())))?;
    let input = path_input(g, p, x, block, path)?;
    Ok(multi_head(g, p, &input.queries, &input.kv, &path.attn)?.1)
}

/// `x + Σ_i τ_i(x)`, paths summed in their stored order.
pub fn group_encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    block: &GroupEncoderParams,
) -> Result<TokenMap> {
    if block.paths.is_empty() {
        return Err(Error::Config("group encoder needs at least one path".into()));
    }
    check_width(g, x, block)?;
    let shared = match block.norm1 {
        Some(n) => Some(attention_input(g, p, x, &n, block.sr.as_ref())?),
        None => None,
    };
    let mut acc: Var = x.tokens;
    for path in &block.paths {
        let out = match &shared {
            Some(input) => path_body(g, p, input, path)?,
            None => {
                let input = path_input(g, p, x, block, path)?;
                path_body(g, p, &input, path)?
            }
        };
        acc = g.add(acc, out.tokens)?;
    }
    Ok(x.with_tokens(acc))
}
