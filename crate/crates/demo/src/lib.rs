//! Browser bindings for the aggregated pyramid vision transformer.
//!
//! Three operations are exposed: a closed-form parameter audit, the attention
//! map of one query token under spatial-reduction attention, and per-stage
//! feature-energy maps. The models run with random initial weights on a
//! synthetic grating image unless a checkpoint is loaded.

use apvt::attention::TokenMap;
use apvt::blocks::{group_encoder_forward, path_attention_weights};
use apvt::data_io::{apply_checkpoint, decode_checkpoint, synthetic_records, Dataset, NormStats, RawRecords, Split, IMAGE_BYTES, IMAGE_SIDE};
use apvt::model::{patch_embed_forward, position_embed, Model, ModelConfig, PatchInput, VARIANTS};
use apvt::{Error, Graph, Result, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCount {
    pub patch_embed: usize,
    pub pos_embed: usize,
    pub encoder_shared: usize,
    pub encoder_paths: usize,
    pub norm: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Breakdown {
    pub stages: Vec<StageCount>,
    pub head: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub name: String,
    pub depths: [usize; 4],
    pub paths: usize,
    pub head_dim: usize,
    pub total: usize,
    pub published_millions: f64,
    pub deviation_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub variants: Vec<VariantRow>,
    pub width_ratio: f64,
    pub head_dim_ratio: f64,
    pub custom: Breakdown,
}

fn breakdown(cfg: &ModelConfig) -> Breakdown {
    let b = cfg.parameter_breakdown();
    let stages = (0..4)
        .map(|i| StageCount {
            patch_embed: b.patch_embed[i],
            pos_embed: b.pos_embed[i],
            encoder_shared: b.encoder_shared[i],
            encoder_paths: b.encoder_paths[i],
            norm: b.stage_norm[i],
            total: b.stage_total(i),
        })
        .collect();
    Breakdown { stages, head: b.head, total: b.total() }
}

/// Counts the named variants and one custom configuration from their
/// configurations alone, without allocating any weights.
pub fn audit(depths: [usize; 4], paths: usize, head_dim: usize, classes: usize) -> Result<AuditReport> {
    let custom = ModelConfig::custom(depths, paths, head_dim, classes, (32, 32))?;
    let variants = VARIANTS
        .iter()
        .map(|v| {
            let total = ModelConfig::variant(v.0)?.parameter_breakdown().total();
            Ok(VariantRow {
                name: v.0.to_string(),
                depths: v.1,
                paths: v.2,
                head_dim: v.3,
                total,
                published_millions: v.4,
                deviation_percent: 100.0 * (total as f64 / (v.4 * 1e6) - 1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = |n: &str| variants.iter().find(|r| r.name == n).map_or(f64::NAN, |r| r.total as f64);
    let base = total("APVT-8-2x-a");
    Ok(AuditReport {
        width_ratio: total("APVT-8-4x-a") / base,
        head_dim_ratio: total("APVT-8-2x-b") / base,
        variants,
        custom: breakdown(&custom),
    })
}

/// Attention of one query token over the reduced key/value grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub grid: (usize, usize),
    pub kv_grid: (usize, usize),
    pub reduction: usize,
    pub query: (usize, usize),
    pub heads: usize,
    pub paths: usize,
    pub blocks: usize,
    /// Row-major over `kv_grid`; sums to one.
    pub weights: Vec<f32>,
}

/// Per-token L2 norm of one stage's residual stream before its final norm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyMap {
    pub stage: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub min: f32,
    pub max: f32,
    /// Row-major over `grid`.
    pub values: Vec<f32>,
}

/// A randomly initialized model and one synthetic input image.
pub struct Scene {
    pub model: Model<f32>,
    pub image: Tensor<f32>,
    /// The 32×32 source image as RGBA bytes.
    pub rgba: Vec<u8>,
    pub label: u8,
}

fn pick_image(class: u8, seed: u64) -> Result<(RawRecords, usize)> {
    let raw = synthetic_records(64, seed);
    let index = raw
        .labels
        .iter()
        .position(|&l| l == class)
        .ok_or_else(|| Error::Config(format!("no synthetic image of class {class} for seed {seed}")))?;
    Ok((raw, index))
}

impl Scene {
    /// `variant` names one of the published variants, built for 32×32
    /// inputs; `size` is the square side the image is upscaled to, a multiple
    /// of 32, with position embeddings resized to match.
    pub fn new(variant: &str, size: usize, class: u8, seed: u64) -> Result<Self> {
        if size == 0 || size % 32 != 0 || size > 256 {
            return Err(Error::Config(format!("input size {size} must be a multiple of 32 up to 256")));
        }
        let model = Model::build(&ModelConfig::variant(variant)?, seed)?;
        let (raw, index) = pick_image(class, seed)?;
        let stats = NormStats::from_records(&raw)?;
        let ds = Dataset::from_records(&raw, &stats, Split::Test, None)?;
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let src = &ds.images.data()[index * IMAGE_BYTES..(index + 1) * IMAGE_BYTES];
        let k = size / IMAGE_SIDE;
        let image = Tensor::from_fn(&[1, 3, size, size], |i| {
            let (c, y, x) = (i / (size * size), i / size % size, i % size);
            src[c * plane + (y / k) * IMAGE_SIDE + x / k]
        });
        let px = &raw.pixels[index * IMAGE_BYTES..(index + 1) * IMAGE_BYTES];
        let mut rgba = Vec::with_capacity(plane * 4);
        for i in 0..plane {
            rgba.extend([px[i], px[plane + i], px[2 * plane + i], 255]);
        }
        Ok(Self { model, image, rgba, label: raw.labels[index] })
    }

    pub fn input_size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Replaces the weights with a checkpoint; nothing changes on error.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        apply_checkpoint(&mut self.model.store, &decode_checkpoint(bytes)?)
    }

    /// Runs stages before `stage` in full, then `stage` up to the input of
    /// `block`, and reads the attention of path `path`, head `head` for the
    /// query token at `query`.
    pub fn attention(&self, stage: usize, block: usize, path: usize, head: usize, query: (usize, usize)) -> Result<Heatmap> {
        let st = self
            .model
            .stages
            .get(stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} out of range (4 stages)")))?;
        let enc = st
            .blocks
            .get(block)
            .ok_or_else(|| Error::Config(format!("block {block} out of range ({} blocks)", st.blocks.len())))?;
        let mut g = Graph::new();
        let p = self.model.store.bind_frozen(&mut g);
        let mut input = PatchInput::Image(g.constant(self.image.clone()));
        for i in 0..stage {
            input = PatchInput::Tokens(self.model.stage_forward(&mut g, &p, input, i)?);
        }
        let x = patch_embed_forward(&mut g, &p, input, &st.patch, stage)?;
        let mut x: TokenMap = position_embed(&mut g, &x, p[st.pos], st.pos_extent)?;
        for b in &st.blocks[..block] {
            x = group_encoder_forward(&mut g, &p, &x, b)?;
        }
        let (h, w) = (x.h, x.w);
        if query.0 >= h || query.1 >= w {
            return Err(Error::Config(format!("query {query:?} outside the {h}x{w} grid")));
        }
        let weights = path_attention_weights(&mut g, &p, &x, enc, path)?;
        let s = g.shape(weights).to_vec();
        let (heads, n, m) = (s[1], s[2], s[3]);
        if head >= heads {
            return Err(Error::Config(format!("head {head} out of range ({heads} heads)")));
        }
        let row = head * n * m + (query.0 * w + query.1) * m;
        let r = enc.spec.reduction;
        Ok(Heatmap {
            grid: (h, w),
            kv_grid: (h / r, w / r),
            reduction: r,
            query,
            heads,
            paths: enc.paths.len(),
            blocks: st.blocks.len(),
            weights: g.value(weights).data()[row..row + m].to_vec(),
        })
    }

    pub fn energy(&self) -> Result<Vec<EnergyMap>> {
        let mut g = Graph::new();
        let p = self.model.store.bind_frozen(&mut g);
        let mut input = PatchInput::Image(g.constant(self.image.clone()));
        let mut maps = Vec::with_capacity(4);
        for (stage, st) in self.model.stages.iter().enumerate() {
            let x = patch_embed_forward(&mut g, &p, input, &st.patch, stage)?;
            let mut x = position_embed(&mut g, &x, p[st.pos], st.pos_extent)?;
            for b in &st.blocks {
                x = group_encoder_forward(&mut g, &p, &x, b)?;
            }
            let t = g.value(x.tokens);
            let c = t.last_dim();
            let values: Vec<f32> =
                t.data().chunks(c).map(|tok| tok.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
            let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            maps.push(EnergyMap { stage, grid: (x.h, x.w), channels: c, min, max, values });
            input = PatchInput::Tokens(x.with_tokens(st.norm.forward(&mut g, &p, x.tokens)?));
        }
        Ok(maps)
    }
}

fn json<T: Serialize>(value: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON [`AuditReport`] for the named variants plus a custom configuration.
#[wasm_bindgen(js_name = parameterAudit)]
pub fn parameter_audit(depths: &str, paths: usize, head_dim: usize, classes: usize) -> std::result::Result<String, JsError> {
    let parsed: Vec<usize> = depths
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| JsError::new(&format!("depths `{depths}`: {e}")))?;
    let depths: [usize; 4] =
        parsed.try_into().map_err(|_| JsError::new(&format!("depths `{depths}` needs four values")))?;
    json(&audit(depths, paths, head_dim, classes)?)
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, size: usize, class: u8, seed: u32) -> std::result::Result<Demo, JsError> {
        Ok(Demo { scene: Scene::new(variant, size, class, seed as u64)? })
    }

    /// The 32×32 source image as RGBA bytes.
    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        self.scene.rgba.clone()
    }

    /// Loads checkpoint bytes written by the command-line trainer.
    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> std::result::Result<(), JsError> {
        Ok(self.scene.load_checkpoint(bytes)?)
    }

    #[wasm_bindgen(js_name = inputSize)]
    pub fn input_size(&self) -> usize {
        self.scene.input_size()
    }

    /// JSON [`Heatmap`].
    pub fn attention(
        &self,
        stage: usize,
        block: usize,
        path: usize,
        head: usize,
        row: usize,
        col: usize,
    ) -> std::result::Result<String, JsError> {
        json(&self.scene.attention(stage, block, path, head, (row, col))?)
    }

    /// JSON list of four [`EnergyMap`]s.
    pub fn energy(&self) -> std::result::Result<String, JsError> {
        json(&self.scene.energy()?)
    }
}
