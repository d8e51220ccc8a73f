//! Scaled dot-product, multi-head and spatial-reduction attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, LinearParams, NormParams, ParamStore};
use crate::tensor::{c, Scalar};

/// A `[B, N, D]` token tensor that remembers its `h × w` grid (`N = h·w`).
#[derive(Clone, Copy, Debug)]
pub struct TokenMap {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

impl TokenMap {
    pub fn new<T: Scalar>(g: &Graph<T>, tokens: Var, h: usize, w: usize) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] != h * w {
            return Err(shape_err("token_map", format!("tokens {s:?} do not form a {h}x{w} grid")));
        }
        Ok(Self { tokens, h, w })
    }

    pub fn batch<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[0]
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[2]
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }
}

/// `W^S` projection of R×R blocks plus its norm.
#[derive(Clone, Copy, Debug)]
pub struct SpatialReduction {
    pub proj: LinearParams,
    pub norm: NormParams,
    pub ratio: usize,
}

impl SpatialReduction {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if ratio < 2 {
            return Err(Error::Config(format!("spatial reduction needs ratio >= 2, got {ratio}")));
        }
        Ok(Self {
            proj: LinearParams::new(store, &format!("{name}.proj"), dim * ratio * ratio, dim, rng)?,
            norm: NormParams::new(store, &format!("{name}.norm"), dim)?,
            ratio,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.proj.num_scalars() + 2 * self.norm.dim
    }
}

/// Query/key/value/output projections of one attention layer. Per-head
/// matrices are column slices of the packed `[D, D]` weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub num_heads: usize,
    pub head_dim: usize,
    pub reduction: usize,
    /// Present iff `reduction > 1` and the layer owns its reduction.
    pub sr: Option<SpatialReduction>,
}

impl AttentionParams {
    /// Builds projections for width `dim`. With `own_reduction` the layer
    /// also owns its `W^S`; otherwise reduced keys/values are supplied by
    /// the caller.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        num_heads: usize,
        reduction: usize,
        own_reduction: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {num_heads} heads")));
        }
        if reduction == 0 {
            return Err(Error::Config("reduction ratio must be >= 1".into()));
        }
        let q = LinearParams::new(store, &format!("{name}.q"), dim, dim, rng)?;
        let k = LinearParams::new(store, &format!("{name}.k"), dim, dim, rng)?;
        let v = LinearParams::new(store, &format!("{name}.v"), dim, dim, rng)?;
        let o = LinearParams::new(store, &format!("{name}.proj"), dim, dim, rng)?;
        let sr = if own_reduction && reduction > 1 {
            Some(SpatialReduction::new(store, &format!("{name}.sr"), dim, reduction, rng)?)
        } else {
            None
        };
        Ok(Self { q, k, v, o, num_heads, head_dim: dim / num_heads, reduction, sr })
    }

    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn num_scalars(&self) -> usize {
        [self.q, self.k, self.v, self.o].iter().map(LinearParams::num_scalars).sum::<usize>()
            + self.sr.map_or(0, |s| s.num_scalars())
    }
}

/// `softmax(q kᵀ / √d) v` over the last two axes of `[..., N, d]` inputs.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let weights = attention_weights(g, q, k)?;
    let (sk, sv) = (g.shape(k).to_vec(), g.shape(v).to_vec());
    if sk[..sk.len() - 1] != sv[..sv.len() - 1] {
        return Err(shape_err("attention", format!("keys {sk:?} vs values {sv:?}")));
    }
    g.matmul(weights, v)
}

/// The row-stochastic `softmax(q kᵀ / √d)` matrix.
pub fn attention_weights<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() < 2 || sq.len() != sk.len() || sq.last() != sk.last() || sq[..sq.len() - 2] != sk[..sk.len() - 2] {
        return Err(shape_err("attention", format!("queries {sq:?} vs keys {sk:?}")));
    }
    let d = *sq.last().unwrap();
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / c::<T>(d as f64).sqrt())?;
    let last = g.shape(scores).len() - 1;
    g.softmax(scores, last)
}

/// Reshapes each non-overlapping R×R block into a `D·R²` vector, projects
/// it to `D` with `W^S` and normalizes. Output grid is `(h/R, w/R)`.
pub fn spatial_reduce<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    sr: &SpatialReduction,
) -> Result<TokenMap> {
    let r = sr.ratio;
    if x.h % r != 0 || x.w % r != 0 {
        return Err(shape_err(
            "spatial_reduce",
            format!("grid {}x{} not divisible by reduction {r}", x.h, x.w),
        ));
    }
    let (b, d) = (x.batch(g), x.dim(g));
    let grid = g.reshape(x.tokens, &[b, x.h, x.w, d])?;
    let blocks = g.space_to_depth(grid, r)?;
    let proj = sr.proj.forward(g, p, blocks)?;
    let normed = sr.norm.forward(g, p, proj)?;
    let out = TokenMap::new(g, normed, x.h / r, x.w / r)?;
    debug_assert_eq!(out.len() * r * r, x.len());
    Ok(out)
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, n, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let r = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(r, &[b, n, h * dh])
}

/// Multi-head attention with queries from `x` and keys/values from `kv`.
/// Returns the output tokens and the `[B, heads, N, M]` weights.
pub fn multi_head<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    kv: &TokenMap,
    params: &AttentionParams,
) -> Result<(TokenMap, Var)> {
    let d = x.dim(g);
    if d != params.dim() || kv.dim(g) != d {
        return Err(shape_err(
            "sra",
            format!("token width {d} / kv width {} against attention width {}", kv.dim(g), params.dim()),
        ));
    }
    let q = params.q.forward(g, p, x.tokens)?;
    let k = params.k.forward(g, p, kv.tokens)?;
    let v = params.v.forward(g, p, kv.tokens)?;
    let (q, k, v) = (
        split_heads(g, q, params.num_heads)?,
        split_heads(g, k, params.num_heads)?,
        split_heads(g, v, params.num_heads)?,
    );
    let weights = attention_weights(g, q, k)?;
    let heads = g.matmul(weights, v)?;
    let merged = merge_heads(g, heads)?;
    let out = params.o.forward(g, p, merged)?;
    Ok((x.with_tokens(out), weights))
}

/// Source of keys and values for `x`: the reduced grid when the layer owns
/// a spatial reduction, otherwise `x` itself.
pub fn key_value_source<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    params: &AttentionParams,
) -> Result<TokenMap> {
    match &params.sr {
        Some(sr) => spatial_reduce(g, p, x, sr),
        None if params.reduction == 1 => Ok(*x),
        None => Err(Error::Config(format!(
            "attention with reduction {} has no W^S; use multi_head with a reduced key/value map",
            params.reduction
        ))),
    }
}

/// Spatial-reduction attention. Output grid and width equal the input's.
pub fn sra_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: &TokenMap, params: &AttentionParams) -> Result<TokenMap> {
    Ok(sra_forward_with_weights(g, p, x, params)?.0)
}

/// As [`sra_forward`], also returning the attention weights.
pub fn sra_forward_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    x: &TokenMap,
    params: &AttentionParams,
) -> Result<(TokenMap, Var)> {
    let kv = key_value_source(g, p, x, params)?;
    if kv.len() * params.reduction * params.reduction != x.len() {
        return Err(shape_err(
            "sra",
            format!("key/value length {} is not {}/{}^2", kv.len(), x.len(), params.reduction),
        ));
    }
    multi_head(g, p, x, &kv, params)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[3, 2], &[1.0, -2.0, 0.5, 9.0, -4.0, 0.0]));
        let k = g.constant(t(&[1, 2], &[0.3, 0.7]));
        let v = g.constant(t(&[1, 2], &[5.0, -6.0]));
        let out = attention(&mut g, q, k, v).unwrap();
        for row in g.value(out).data().chunks(2) {
            assert_eq!(row, &[5.0, -6.0]);
        }
    }

    #[test]
    fn identical_values_pass_through() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64).sin()));
        let k = g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64).cos()));
        let v = g.constant(Tensor::from_fn(&[5, 2], |i| if i % 2 == 0 { 1.5 } else { -0.25 }));
        let out = attention(&mut g, q, k, v).unwrap();
        for row in g.value(out).data().chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12 && (row[1] + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_key_selects_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1], &[10.0]));
        let k = g.constant(t(&[2, 1], &[10.0, 0.0]));
        let v = g.constant(t(&[2, 1], &[1.0, 0.0]));
        let out = attention(&mut g, q, k, v).unwrap();
        assert!((g.value(out).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_widths_fail() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        assert!(attention(&mut g, q, k, k).is_err());
        let k = g.constant(Tensor::zeros(&[2, 3]));
        let v = g.constant(Tensor::zeros(&[5, 3]));
        assert!(attention(&mut g, q, k, v).is_err());
    }

    fn token_map(g: &mut Graph<f64>, b: usize, h: usize, w: usize, d: usize) -> TokenMap {
        let x = g.constant(Tensor::from_fn(&[b, h * w, d], |i| ((i * 7) as f64 * 0.13).sin()));
        TokenMap::new(g, x, h, w).unwrap()
    }

    #[test]
    fn spatial_reduce_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let sr2 = SpatialReduction::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let sr8 = SpatialReduction::new(&mut store, "b", 2, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = token_map(&mut g, 1, 8, 8, 4);
        let y = spatial_reduce(&mut g, &p, &x, &sr2).unwrap();
        assert_eq!((y.len(), y.h, y.w, y.dim(&g)), (16, 4, 4, 4));
        let big = token_map(&mut g, 1, 56, 56, 2);
        let y = spatial_reduce(&mut g, &p, &big, &sr8).unwrap();
        assert_eq!((y.len(), y.h, y.w), (49, 7, 7));
        let odd = token_map(&mut g, 1, 6, 6, 4);
        assert!(matches!(spatial_reduce(&mut g, &p, &odd, &sr8), Err(Error::Shape { .. })));
        assert!(SpatialReduction::new(&mut store, "c", 4, 1, &mut rng).is_err());
    }

    #[test]
    fn sra_preserves_shape_and_kv_length() {
        for (r, heads) in [(1, 2), (2, 2), (4, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
            let mut store = ParamStore::<f64>::new();
            let params = AttentionParams::new(&mut store, "attn", 8, heads, r, true, &mut rng).unwrap();
            assert_eq!(params.sr.is_some(), r > 1);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = token_map(&mut g, 2, 8, 8, 8);
            let (y, w) = sra_forward_with_weights(&mut g, &p, &x, &params).unwrap();
            assert_eq!(g.shape(y.tokens), g.shape(x.tokens));
            assert_eq!(g.shape(w), &[2, heads, 64, 64 / (r * r)]);
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(AttentionParams::new(&mut store, "a", 10, 3, 1, true, &mut rng).is_err());
    }
}
