//! Four-stage pyramid assembly, named variants and parameter accounting.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::TokenMap;
use crate::blocks::{group_encoder_forward, GroupEncoderParams, GroupEncoderSpec, ReductionSharing};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, LinearParams, NormParams, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PATCH_SIZES: [usize; 4] = [4, 2, 2, 2];
pub const HEADS: [usize; 4] = [1, 2, 5, 8];
pub const EXPANSIONS: [usize; 4] = [8, 8, 4, 4];
pub const REDUCTIONS: [usize; 4] = [8, 4, 2, 1];
/// Cumulative downsampling after each stage.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Named variants: (name, depths, paths, head dim, published size in millions).
pub const VARIANTS: [(&str, [usize; 4], usize, usize, f64); 5] = [
    ("APVT-8-2x-a", [2, 2, 2, 2], 2, 32, 5.52),
    ("APVT-8-2x-b", [2, 2, 2, 2], 2, 64, 22.88),
    ("APVT-16-2x-b", [3, 4, 6, 3], 2, 64, 42.15),
    ("APVT-8-4x-a", [2, 2, 2, 2], 3, 32, 8.16),
    ("APVT-16-4x-a", [3, 4, 6, 3], 3, 32, 15.48),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub patch_size: usize,
    pub dim: usize,
    pub expansion: usize,
    pub num_heads: usize,
    pub reduction: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub depths: [usize; 4],
    pub paths: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub sharing: ReductionSharing,
}

impl ModelConfig {
    /// Looks up a named variant (case-insensitive), sized for 32×32 RGB
    /// input and 10 classes.
    pub fn variant(name: &str) -> Result<Self> {
        let (canon, depths, paths, head_dim, _) = VARIANTS
            .iter()
            .find(|v| v.0.eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))?;
        Ok(Self {
            name: canon.to_string(),
            depths: *depths,
            paths: *paths,
            head_dim: *head_dim,
            num_classes: 10,
            input_size: (32, 32),
            in_channels: 3,
            sharing: ReductionSharing::default(),
        })
    }

    pub fn custom(depths: [usize; 4], paths: usize, head_dim: usize, num_classes: usize, input_size: (usize, usize)) -> Result<Self> {
        let cfg = Self {
            name: format!(
                "custom-d{}-{}-{}-{}-c{paths}-h{head_dim}",
                depths[0], depths[1], depths[2], depths[3]
            ),
            depths,
            paths,
            head_dim,
            num_classes,
            input_size,
            in_channels: 3,
            sharing: ReductionSharing::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Published parameter count in millions, for named variants.
    pub fn published_millions(&self) -> Option<f64> {
        VARIANTS.iter().find(|v| v.0 == self.name).map(|v| v.4)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 32")));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("stage depths {:?} must all be >= 1", self.depths)));
        }
        if self.paths == 0 {
            return Err(Error::Config("paths must be >= 1".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head dim must be >= 1".into()));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("classes and input channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> [StageSpec; 4] {
        std::array::from_fn(|i| StageSpec {
            patch_size: PATCH_SIZES[i],
            dim: HEADS[i] * self.head_dim,
            expansion: EXPANSIONS[i],
            num_heads: HEADS[i],
            reduction: REDUCTIONS[i],
            depth: self.depths[i],
        })
    }

    /// Token grid of each stage at the configured input size.
    pub fn stage_extents(&self) -> [(usize, usize); 4] {
        std::array::from_fn(|i| (self.input_size.0 / STRIDES[i], self.input_size.1 / STRIDES[i]))
    }

    /// Closed-form parameter breakdown, independent of any built model.
    pub fn parameter_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown::default();
        let mut din = self.in_channels;
        let extents = self.stage_extents();
        let ln = |d: usize| 2 * d;
        let lin = |i: usize, o: usize| i * o + o;
        for (i, s) in self.stages().iter().enumerate() {
            let d = s.dim;
            let hidden = s.expansion * d;
            b.patch_embed[i] = lin(din * s.patch_size * s.patch_size, d) + ln(d);
            b.pos_embed[i] = extents[i].0 * extents[i].1 * d;
            let reduction = if s.reduction > 1 { lin(d * s.reduction * s.reduction, d) + ln(d) } else { 0 };
            let ffn = lin(d, hidden) + 10 * hidden + lin(hidden, d);
            let core = 4 * lin(d, d) + ln(d) + ffn;
            let (shared, per_path) = match self.sharing {
                ReductionSharing::PerBlock => (ln(d) + reduction, core),
                ReductionSharing::PerPath => (0, core + ln(d) + reduction),
            };
            b.encoder_shared[i] = s.depth * shared;
            b.encoder_paths[i] = s.depth * self.paths * per_path;
            b.stage_norm[i] = ln(d);
            din = d;
        }
        b.head = lin(din, self.num_classes);
        b
    }
}

/// Scalar counts by component; index = stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub patch_embed: [usize; 4],
    pub pos_embed: [usize; 4],
    /// Per-block norm and reduction read by all paths.
    pub encoder_shared: [usize; 4],
    /// Everything owned by individual paths.
    pub encoder_paths: [usize; 4],
    pub stage_norm: [usize; 4],
    pub head: usize,
}

impl ParamBreakdown {
    pub fn encoder(&self, stage: usize) -> usize {
        self.encoder_shared[stage] + self.encoder_paths[stage]
    }

    pub fn stage_total(&self, stage: usize) -> usize {
        self.patch_embed[stage] + self.pos_embed[stage] + self.encoder(stage) + self.stage_norm[stage]
    }

    pub fn total(&self) -> usize {
        (0..4).map(|i| self.stage_total(i)).sum::<usize>() + self.head
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>12} {:>10} {:>12} {:>12} {:>8} {:>12}",
            "stage", "patch_embed", "pos_embed", "enc_shared", "enc_paths", "norm", "total"
        )?;
        for i in 0..4 {
            writeln!(
                f,
                "{:<8} {:>12} {:>10} {:>12} {:>12} {:>8} {:>12}",
                i + 1,
                self.patch_embed[i],
                self.pos_embed[i],
                self.encoder_shared[i],
                self.encoder_paths[i],
                self.stage_norm[i],
                self.stage_total(i)
            )?;
        }
        writeln!(f, "{:<8} {:>68}", "head", self.head)?;
        write!(f, "{:<8} {:>68}", "total", self.total())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedParams {
    pub proj: LinearParams,
    pub norm: NormParams,
    pub patch_size: usize,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub spec: StageSpec,
    pub patch: PatchEmbedParams,
    pub pos: ParamId,
    pub pos_extent: (usize, usize),
    pub blocks: Vec<GroupEncoderParams>,
    pub norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub stages: Vec<Stage>,
    pub head: LinearParams,
}

/// What [`Model::forward`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Classify,
    Features,
}

#[derive(Clone, Debug)]
pub enum Output {
    Logits(Var),
    Features(Vec<TokenMap>),
}

/// Input of a patch embedding: raw images or the previous stage's tokens.
#[derive(Clone, Copy, Debug)]
pub enum PatchInput {
    Image(Var),
    Tokens(TokenMap),
}

/// Splits the input into non-overlapping P×P patches, projects them to the
/// stage width and normalizes.
pub fn patch_embed_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    input: PatchInput,
    params: &PatchEmbedParams,
    stage: usize,
) -> Result<TokenMap> {
    let ps = params.patch_size;
    let grid = match input {
        PatchInput::Image(img) => {
            let s = g.shape(img).to_vec();
            if s.len() != 4 {
                return Err(shape_err("patch_embed", format!("stage {}: image {s:?} is not [B, C, H, W]", stage + 1)));
            }
            if s[2] % ps != 0 || s[3] % ps != 0 {
                return Err(shape_err(
                    "patch_embed",
                    format!("stage {}: extent {}x{} not divisible by patch {ps}", stage + 1, s[2], s[3]),
                ));
            }
            g.permute(img, &[0, 2, 3, 1])?
        }
        PatchInput::Tokens(x) => {
            if x.h % ps != 0 || x.w % ps != 0 {
                return Err(shape_err(
                    "patch_embed",
                    format!("stage {}: extent {}x{} not divisible by patch {ps}", stage + 1, x.h, x.w),
                ));
            }
            let (b, d) = (x.batch(g), x.dim(g));
            g.reshape(x.tokens, &[b, x.h, x.w, d])?
        }
    };
    let s = g.shape(grid).to_vec();
    if s[3] * ps * ps != params.proj.d_in {
        return Err(shape_err(
            "patch_embed",
            format!("stage {}: {} input channels, projection expects {}", stage + 1, s[3], params.proj.d_in / (ps * ps)),
        ));
    }
    let (h, w) = (s[1] / ps, s[2] / ps);
    let patches = g.space_to_depth(grid, ps)?;
    let proj = params.proj.forward(g, p, patches)?;
    let normed = params.norm.forward(g, p, proj)?;
    TokenMap::new(g, normed, h, w)
}

/// Adds a learned `[h0·w0, D]` grid, bilinearly resampled when the token
/// grid differs from `(h0, w0)`.
pub fn position_embed<T: Scalar>(g: &mut Graph<T>, x: &TokenMap, grid: Var, extent: (usize, usize)) -> Result<TokenMap> {
    let gs = g.shape(grid).to_vec();
    let d = x.dim(g);
    if gs.len() != 2 || gs[1] != d || gs[0] != extent.0 * extent.1 {
        return Err(shape_err("position_embed", format!("grid {gs:?} ({extent:?}) for width {d}")));
    }
    let grid = if (x.h, x.w) == extent { grid } else { g.resize_bilinear(grid, extent, (x.h, x.w))? };
    let out = g.add_broadcast(x.tokens, grid)?;
    Ok(x.with_tokens(out))
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model; deterministic for a fixed seed.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(4);
        let mut din = cfg.in_channels;
        let extents = cfg.stage_extents();
        for (i, spec) in cfg.stages().into_iter().enumerate() {
            let name = format!("stages.{i}");
            let proj = LinearParams::new(
                &mut store,
                &format!("{name}.patch_embed.proj"),
                din * spec.patch_size * spec.patch_size,
                spec.dim,
                &mut rng,
            )?;
            let norm = NormParams::new(&mut store, &format!("{name}.patch_embed.norm"), spec.dim)?;
            let patch = PatchEmbedParams { proj, norm, patch_size: spec.patch_size };
            let (h0, w0) = extents[i];
            let pos = store.insert(format!("{name}.pos_embed"), Tensor::zeros(&[h0 * w0, spec.dim]), false)?;
            let enc_spec = GroupEncoderSpec {
                dim: spec.dim,
                num_heads: spec.num_heads,
                expansion: spec.expansion,
                reduction: spec.reduction,
                paths: cfg.paths,
                sharing: cfg.sharing,
            };
            let blocks = (0..spec.depth)
                .map(|j| GroupEncoderParams::new(&mut store, &format!("{name}.blocks.{j}"), enc_spec, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let norm = NormParams::new(&mut store, &format!("{name}.norm"), spec.dim)?;
            stages.push(Stage { spec, patch, pos, pos_extent: (h0, w0), blocks, norm });
            din = spec.dim;
        }
        let head = LinearParams::new(&mut store, "head", din, cfg.num_classes, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, stages, head })
    }

    /// Same structure with every parameter converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), store: self.store.cast(), stages: self.stages.clone(), head: self.head }
    }

    /// Runs one stage: patch embed, position embed, group encoders, norm.
    pub fn stage_forward(&self, g: &mut Graph<T>, p: &Bound, input: PatchInput, i: usize) -> Result<TokenMap> {
        let st = &self.stages[i];
        let x = patch_embed_forward(g, p, input, &st.patch, i)?;
        let mut x = position_embed(g, &x, p[st.pos], st.pos_extent)?;
        for block in &st.blocks {
            x = group_encoder_forward(g, p, &x, block)?;
        }
        Ok(x.with_tokens(st.norm.forward(g, p, x.tokens)?))
    }

    /// Per-stage outputs at strides 4, 8, 16, 32.
    pub fn features(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Vec<TokenMap>> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(shape_err(
                "forward",
                format!("images {s:?}, expected [B, {}, H, W]", self.cfg.in_channels),
            ));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(shape_err("forward", format!("input {}x{} must be divisible by 32", s[2], s[3])));
        }
        let mut outs: Vec<TokenMap> = Vec::with_capacity(4);
        for i in 0..4 {
            let input = match outs.last() {
                None => PatchInput::Image(images),
                Some(prev) => PatchInput::Tokens(*prev),
            };
            outs.push(self.stage_forward(g, p, input, i)?);
        }
        Ok(outs)
    }

    /// `[B, num_classes]` logits: pooled stage-4 tokens through the head.
    pub fn logits(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let feats = self.features(g, p, images)?;
        let last = feats[3];
        let pooled = g.mean_axis(last.tokens, 1)?;
        self.head.forward(g, p, pooled)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, images: Var, mode: Mode) -> Result<Output> {
        match mode {
            Mode::Classify => Ok(Output::Logits(self.logits(g, p, images)?)),
            Mode::Features => Ok(Output::Features(self.features(g, p, images)?)),
        }
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let logits = self.logits(&mut g, &p, x)?;
        Ok(g.value(logits).clone())
    }

    /// Breakdown tallied from the parameter registry.
    pub fn count_parameters(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown::default();
        for (name, t) in self.store.iter() {
            let n = t.numel();
            if name.starts_with("head.") {
                b.head += n;
                continue;
            }
            let mut parts = name.split('.');
            let (Some("stages"), Some(idx)) = (parts.next(), parts.next()) else {
                unreachable!("parameter `{name}` outside the registry layout")
            };
            let i: usize = idx.parse().expect("stage index");
            match parts.next() {
                Some("patch_embed") => b.patch_embed[i] += n,
                Some("pos_embed") => b.pos_embed[i] += n,
                Some("norm") => b.stage_norm[i] += n,
                Some("blocks") if name.contains(".paths.") => b.encoder_paths[i] += n,
                Some("blocks") => b.encoder_shared[i] += n,
                _ => unreachable!("parameter `{name}` outside the registry layout"),
            }
        }
        b
    }
}
