//! Structural and numerical checks shared by the `gradcheck` and `selftest`
//! commands and the acceptance suite.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{sra_forward, sra_forward_with_weights, AttentionParams, TokenMap};
use crate::blocks::{
    conv_ffn_forward, encoder_path_forward, group_encoder_forward, ConvFfnParams, GroupEncoderParams, GroupEncoderSpec,
    ReductionSharing,
};
use crate::data_io::{apply_checkpoint, decode_checkpoint, encode_checkpoint};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::{
    patch_embed_forward, position_embed, Model, ModelConfig, ParamBreakdown, PatchEmbedParams, PatchInput, VARIANTS,
};
use crate::params::{Bound, LinearParams, NormParams, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::training::{lr_at_epoch, TrainRecipe};

/// Per-block gradient tolerance.
pub const BLOCK_GRAD_TOL: f64 = 1e-4;
/// End-to-end gradient tolerance.
pub const MODEL_GRAD_TOL: f64 = 1e-3;
pub const MERGE_TOL: f64 = 1e-12;
pub const MSA_TOL: f64 = 1e-6;
/// Allowed relative deviation from the published parameter counts.
pub const PARAM_TOL: f64 = 0.03;
pub const WIDTH_RATIO_RANGE: (f64, f64) = (1.40, 1.55);
pub const HEAD_DIM_RATIO_RANGE: (f64, f64) = (3.5, 4.5);

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold }
    }

    pub fn passed(&self) -> bool {
        self.value < self.threshold
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::CheckFailed { name: self.name.clone(), detail: format!("{:.3e} >= {:.1e}", self.value, self.threshold) })
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<34} {:.3e} (< {:.0e})", self.name, self.value, self.threshold)
    }
}

/// Shifts every parameter by `U(-scale, scale)` so that checks do not run
/// at the near-degenerate initial point (zero biases, unit norms).
pub fn perturb<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v + T::from_f64(rng.gen_range(-scale..scale));
        }
    }
}

pub fn random_tensor<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate carries a
/// distinct weight.
fn projected_sum(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let prod = g.mul(out, r)?;
    g.sum_all(prod)
}

/// Sizes of the block-level gradient checks.
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub depths: [usize; 4],
    pub paths: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub sharing: ReductionSharing,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { depths: [1, 1, 1, 1], paths: 2, head_dim: 8, seed: 0, sharing: ReductionSharing::PerBlock }
    }
}

struct BlockFixture {
    batch: usize,
    grid: (usize, usize),
    spec: GroupEncoderSpec,
}

impl BlockFixture {
    fn new(cfg: &SuiteConfig, sharing: ReductionSharing) -> Self {
        let spec = GroupEncoderSpec {
            dim: 2 * cfg.head_dim,
            num_heads: 2,
            expansion: 2,
            reduction: 2,
            paths: cfg.paths,
            sharing,
        };
        Self { batch: 2, grid: (4, 4), spec }
    }

    fn input(&self, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        random_tensor(&[self.batch, self.grid.0 * self.grid.1, self.spec.dim], rng)
    }
}

fn tokens(g: &mut Graph<f64>, x: &Tensor<f64>, grid: (usize, usize)) -> Result<TokenMap> {
    let v = g.constant(x.clone());
    TokenMap::new(g, v, grid.0, grid.1)
}

fn check(
    name: &str,
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
    opts: GradCheckOptions,
    tol: f64,
) -> Result<(CheckOutcome, GradCheckReport)> {
    let report = grad_check(store, f, opts)?;
    Ok((CheckOutcome::new(name, report.max_rel_err, tol), report))
}

/// Finite-difference checks for each building block and an end-to-end
/// micro model.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<(CheckOutcome, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let fx = BlockFixture::new(cfg, cfg.sharing);
    let out_r = random_tensor::<f64>(&[fx.batch, fx.grid.0 * fx.grid.1, fx.spec.dim], &mut rng);

    {
        let mut store = ParamStore::new();
        let ffn = ConvFfnParams::new(&mut store, "ffn", fx.spec.dim, fx.spec.expansion, &mut rng)?;
        perturb(&mut store, cfg.seed, 0.3);
        let x = fx.input(&mut rng);
        out.push(check(
            "conv-ffn",
            &mut store,
            |g, p| {
                let t = tokens(g, &x, fx.grid)?;
                let y = conv_ffn_forward(g, p, &t, &ffn)?;
                projected_sum(g, y.tokens, &out_r)
            },
            opts,
            BLOCK_GRAD_TOL,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "attn", fx.spec.dim, 2, 2, true, &mut rng)?;
        perturb(&mut store, cfg.seed + 1, 0.3);
        let x = fx.input(&mut rng);
        out.push(check(
            "spatial-reduction attention",
            &mut store,
            |g, p| {
                let t = tokens(g, &x, fx.grid)?;
                let y = sra_forward(g, p, &t, &attn)?;
                projected_sum(g, y.tokens, &out_r)
            },
            opts,
            BLOCK_GRAD_TOL,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let block = GroupEncoderParams::new(&mut store, "block", fx.spec, &mut rng)?;
        perturb(&mut store, cfg.seed + 2, 0.3);
        let x = fx.input(&mut rng);
        out.push(check(
            "encoder path",
            &mut store,
            |g, p| {
                let t = tokens(g, &x, fx.grid)?;
                let y = encoder_path_forward(g, p, &t, &block, 0)?;
                projected_sum(g, y.tokens, &out_r)
            },
            opts,
            BLOCK_GRAD_TOL,
        )?);
    }
    for sharing in [ReductionSharing::PerBlock, ReductionSharing::PerPath] {
        let fx = BlockFixture::new(cfg, sharing);
        let mut store = ParamStore::new();
        let block = GroupEncoderParams::new(&mut store, "block", fx.spec, &mut rng)?;
        perturb(&mut store, cfg.seed + 3, 0.3);
        let x = fx.input(&mut rng);
        let name = match sharing {
            ReductionSharing::PerBlock => "group encoder",
            ReductionSharing::PerPath => "group encoder (per-path reduction)",
        };
        out.push(check(
            name,
            &mut store,
            |g, p| {
                let t = tokens(g, &x, fx.grid)?;
                let y = group_encoder_forward(g, p, &t, &block)?;
                projected_sum(g, y.tokens, &out_r)
            },
            opts,
            BLOCK_GRAD_TOL,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let (patch, dim) = (4, fx.spec.dim);
        let proj = LinearParams::new(&mut store, "patch.proj", 3 * patch * patch, dim, &mut rng)?;
        let norm = NormParams::new(&mut store, "patch.norm", dim)?;
        let params = PatchEmbedParams { proj, norm, patch_size: patch };
        let pos = store.insert("pos", Tensor::zeros(&[9, dim]), false)?;
        perturb(&mut store, cfg.seed + 4, 0.3);
        let img = random_tensor::<f64>(&[2, 3, 8, 8], &mut rng);
        let r = random_tensor::<f64>(&[2, 4, dim], &mut rng);
        out.push(check(
            "patch + position embedding",
            &mut store,
            |g, p| {
                let x = g.constant(img.clone());
                let t = patch_embed_forward(g, p, PatchInput::Image(x), &params, 0)?;
                let t = position_embed(g, &t, p[pos], (3, 3))?;
                projected_sum(g, t.tokens, &r)
            },
            opts,
            BLOCK_GRAD_TOL,
        )?);
    }
    {
        let mut mcfg = ModelConfig::custom(cfg.depths, cfg.paths, cfg.head_dim, 3, (32, 32))?;
        mcfg.sharing = cfg.sharing;
        let model = Model::<f64>::build(&mcfg, cfg.seed)?;
        let mut store = model.store.clone();
        perturb(&mut store, cfg.seed + 5, 0.1);
        let img = random_tensor::<f64>(&[2, 3, 32, 32], &mut rng);
        let labels = [0usize, 2];
        let opts = GradCheckOptions { max_per_tensor: Some(6), ..opts };
        out.push(check(
            "end-to-end micro model",
            &mut store,
            |g, p| {
                let x = g.constant(img.clone());
                let logits = model.logits(g, p, x)?;
                g.cross_entropy(logits, &labels, 0.0)
            },
            opts,
            MODEL_GRAD_TOL,
        )?);
    }
    Ok(out)
}

/// `max |(group(x) − x) − Σ τ_i(x)|` for a `paths`-path encoder in 64-bit.
pub fn merge_additivity(paths: usize, sharing: ReductionSharing, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GroupEncoderSpec { dim: 16, num_heads: 2, expansion: 4, reduction: 2, paths, sharing };
    let mut store = ParamStore::<f64>::new();
    let block = GroupEncoderParams::new(&mut store, "block", spec, &mut rng)?;
    perturb(&mut store, seed, 0.3);
    let x = random_tensor::<f64>(&[2, 16, 16], &mut rng);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let t = tokens(&mut g, &x, (4, 4))?;
    let y = group_encoder_forward(&mut g, &p, &t, &block)?;
    let mut sum = vec![0.0; x.numel()];
    for i in 0..paths {
        let tau = encoder_path_forward(&mut g, &p, &t, &block, i)?;
        for (s, v) in sum.iter_mut().zip(g.value(tau.tokens).data()) {
            *s += v;
        }
    }
    let y = g.value(y.tokens).data();
    Ok(y.iter().zip(x.data()).zip(&sum).map(|((y, x), s)| ((y - x) - s).abs()).fold(0.0, f64::max))
}

fn row_matmul(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b[j];
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + j];
            }
            out[r * dout + j] = acc;
        }
    }
    out
}

/// Literal multi-head self-attention: per head `softmax(Q_h K_hᵀ / √d_h) V_h`,
/// heads concatenated and projected. `x` is `[N, D]`.
pub fn msa_oracle(store: &ParamStore<f64>, a: &AttentionParams, x: &[f64], n: usize) -> Vec<f64> {
    let d = a.dim();
    let lin = |l: &LinearParams, input: &[f64]| {
        row_matmul(input, store.get(l.weight).data(), store.get(l.bias).data(), n, d, d)
    };
    let (q, k, v) = (lin(&a.q, x), lin(&a.k, x), lin(&a.v, x));
    let dh = a.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; n * d];
    for h in 0..a.num_heads {
        let off = h * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| q[i * d + off + t] * k[j * d + off + t]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                concat[i * d + off + t] = (0..n).map(|j| e[j] / z * v[j * d + off + t]).sum();
            }
        }
    }
    lin(&a.o, &concat)
}

/// `max |sra_forward − msa_oracle|` at reduction 1.
pub fn msa_equivalence(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, heads, grid) = (16, 4, (4, 5));
    let n = grid.0 * grid.1;
    let mut store = ParamStore::<f64>::new();
    let attn = AttentionParams::new(&mut store, "attn", dim, heads, 1, true, &mut rng)?;
    perturb(&mut store, seed, 0.3);
    let x = random_tensor::<f64>(&[1, n, dim], &mut rng);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let t = tokens(&mut g, &x, grid)?;
    let y = sra_forward(&mut g, &p, &t, &attn)?;
    let oracle = msa_oracle(&store, &attn, x.data(), n);
    Ok(g.value(y.tokens).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// `(N, M)` query and key/value lengths of spatial-reduction attention with
/// ratio `r` on an `h × w` grid.
pub fn key_value_length(r: usize, grid: (usize, usize), seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let attn = AttentionParams::new(&mut store, "attn", 8, 2, r, true, &mut rng)?;
    let n = grid.0 * grid.1;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(random_tensor(&[1, n, 8], &mut rng));
    let t = TokenMap::new(&g, x, grid.0, grid.1)?;
    let (_, w) = sra_forward_with_weights(&mut g, &p, &t, &attn)?;
    let s = g.shape(w);
    Ok((s[2], s[3]))
}

/// Token-grid extents of the four stage outputs for one `input` image.
pub fn pyramid_extents(cfg: &ModelConfig, input: (usize, usize)) -> Result<[(usize, usize); 4]> {
    let model = Model::<f32>::build(cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let x = g.constant(random_tensor(&[1, cfg.in_channels, input.0, input.1], &mut rng));
    let feats = model.features(&mut g, &p, x)?;
    let mut out = [(0, 0); 4];
    for (o, f) in out.iter_mut().zip(&feats) {
        if g.shape(f.tokens)[1] != f.h * f.w {
            return Err(Error::CheckFailed { name: "stride contract".into(), detail: "token count off grid".into() });
        }
        *o = (f.h, f.w);
    }
    Ok(out)
}

/// Saves a model, restores into a differently seeded one and compares every
/// value bit for bit.
pub fn checkpoint_round_trip(cfg: &ModelConfig) -> Result<bool> {
    let a = Model::<f32>::build(cfg, 1)?;
    let mut b = Model::<f32>::build(cfg, 2)?;
    let bytes = encode_checkpoint(&a.store);
    apply_checkpoint(&mut b.store, &decode_checkpoint(&bytes)?)?;
    let same = a
        .store
        .iter()
        .zip(b.store.iter())
        .all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    Ok(same && encode_checkpoint(&b.store) == bytes)
}

/// Runs the structural invariants in order, stopping at the first failure.
pub fn selftest(out: &mut dyn Write) -> Result<()> {
    let fail = |name: &str, detail: String| Error::CheckFailed { name: name.into(), detail };
    for c in 1..=3 {
        let r = CheckOutcome::new(format!("merge additivity C={c}"), merge_additivity(c, ReductionSharing::PerBlock, 7)?, MERGE_TOL)
            .into_result()?;
        writeln!(out, "{r}")?;
    }
    let r = CheckOutcome::new("MSA equivalence at R=1", msa_equivalence(3)?, MSA_TOL).into_result()?;
    writeln!(out, "{r}")?;
    for r in [2, 4, 8] {
        let (n, m) = key_value_length(r, (16, 16), 0)?;
        if m * r * r != n {
            return Err(fail("key/value length", format!("R={r}: N={n}, M={m}")));
        }
        writeln!(out, "PASS key/value length R={r}: N={n} M={m}")?;
    }
    let micro = ModelConfig::custom([1, 1, 1, 1], 2, 8, 10, (32, 32))?;
    for (size, expect) in [(32, [8, 4, 2, 1]), (224, [56, 28, 14, 7])] {
        let cfg = ModelConfig { input_size: (size, size), ..micro.clone() };
        let got = pyramid_extents(&cfg, (size, size))?;
        if got != expect.map(|e| (e, e)) {
            return Err(fail("stride contract", format!("{size}x{size} gave {got:?}")));
        }
        writeln!(out, "PASS stride contract {size}x{size}: {got:?}")?;
    }
    if !checkpoint_round_trip(&micro)? {
        return Err(fail("checkpoint round trip", "restored values differ".into()));
    }
    writeln!(out, "PASS checkpoint round trip")?;
    let recipe = TrainRecipe::default();
    for (epoch, lr) in [(0, 5e-4), (29, 5e-4), (30, 5e-5), (59, 5e-5)] {
        let got = lr_at_epoch(&recipe, epoch);
        if (got - lr).abs() > 1e-15 {
            return Err(fail("lr schedule", format!("epoch {epoch}: {got}")));
        }
    }
    writeln!(out, "PASS lr schedule")?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AuditRow {
    pub name: String,
    /// Tallied from the built model's registry.
    pub built: ParamBreakdown,
    /// Closed-form count from the configuration alone.
    pub closed_form: ParamBreakdown,
    pub published_millions: f64,
}

impl AuditRow {
    pub fn total(&self) -> usize {
        self.built.total()
    }

    /// Signed relative deviation from the published count.
    pub fn deviation(&self) -> f64 {
        self.total() as f64 / (self.published_millions * 1e6) - 1.0
    }

    pub fn within_tolerance(&self) -> bool {
        self.deviation().abs() <= PARAM_TOL
    }
}

/// Builds every named variant and counts its parameters both ways.
pub fn parameter_audit(sharing: ReductionSharing) -> Result<Vec<AuditRow>> {
    VARIANTS
        .iter()
        .map(|v| {
            let cfg = ModelConfig { sharing, ..ModelConfig::variant(v.0)? };
            let model = Model::<f32>::build(&cfg, 0)?;
            Ok(AuditRow {
                name: cfg.name.clone(),
                built: model.count_parameters(),
                closed_form: cfg.parameter_breakdown(),
                published_millions: v.4,
            })
        })
        .collect()
}

/// `(count(8-4x-a) / count(8-2x-a), count(8-2x-b) / count(8-2x-a))`.
pub fn audit_ratios(rows: &[AuditRow]) -> (f64, f64) {
    let total = |n: &str| rows.iter().find(|r| r.name == n).map_or(f64::NAN, |r| r.total() as f64);
    let base = total("APVT-8-2x-a");
    (total("APVT-8-4x-a") / base, total("APVT-8-2x-b") / base)
}

/// `1234567` → `1,234,567`.
pub fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_at_reduction_one() {
        assert!(msa_equivalence(1).unwrap() < MSA_TOL);
    }

    #[test]
    fn merge_is_additive() {
        for c in 1..=3 {
            assert!(merge_additivity(c, ReductionSharing::PerPath, 2).unwrap() < MERGE_TOL);
        }
    }

    #[test]
    fn reduction_shrinks_keys() {
        assert_eq!(key_value_length(4, (8, 8), 0).unwrap(), (64, 4));
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(5_599_626), "5,599,626");
    }

    #[test]
    fn outcome_threshold_is_strict() {
        assert!(!CheckOutcome::new("x", 1e-4, 1e-4).passed());
        assert!(CheckOutcome::new("x", 0.0, 1e-4).into_result().is_ok());
    }
}
