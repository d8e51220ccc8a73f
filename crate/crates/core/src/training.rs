//! AdamW, the step learning-rate schedule, the training loop, evaluation and
//! latency measurement.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{save_checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{c, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecipe {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Global L2 gradient-norm cap.
    pub grad_clip: Option<f64>,
    /// Epochs of linear warmup before the step schedule.
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    /// Random horizontal mirroring of training images.
    pub hflip: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            batch_size: 128,
            base_lr: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 30,
            epochs: 60,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            seed: 0,
            grad_clip: None,
            warmup_epochs: 0,
            label_smoothing: 0.0,
            hflip: false,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return bad("batch size, epochs and decay interval must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay_factor > 0.0) || !(self.eps > 0.0) {
            return bad("learning rate, decay factor and eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// `base_lr · factor^⌊epoch / every⌋`, scaled linearly during warmup.
pub fn lr_at_epoch(recipe: &TrainRecipe, epoch: usize) -> f64 {
    let lr = recipe.base_lr * recipe.lr_decay_factor.powi((epoch / recipe.lr_decay_every) as i32);
    if epoch < recipe.warmup_epochs {
        lr * (epoch + 1) as f64 / recipe.warmup_epochs as f64
    } else {
        lr
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam step. Decay applies only to parameters
/// registered with the decay flag.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    recipe: &TrainRecipe,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        let (p, gr) = (store.get(*id), &grads[id.index()]);
        if p.shape() != gr.shape() {
            return Err(crate::error::shape_err(
                "adamw_step",
                format!("`{}` is {:?}, gradient {:?}", store.name(*id), p.shape(), gr.shape()),
            ));
        }
        if !gr.all_finite() {
            return Err(Error::NonFiniteGradient { name: store.name(*id).to_string() });
        }
    }
    state.step += 1;
    let (b1, b2) = recipe.betas;
    let bc1 = c::<T>(1.0 - b1.powi(state.step as i32));
    let bc2 = c::<T>(1.0 - b2.powi(state.step as i32));
    let (b1, b2, eps, lr_t) = (c::<T>(b1), c::<T>(b2), c::<T>(recipe.eps), c::<T>(lr));
    let one = T::one();
    for id in ids {
        let decay = if store.decays(id) { c::<T>(lr * recipe.weight_decay) } else { T::zero() };
        let k = id.index();
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let w = store.get_mut(id).data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] = w[i] - lr_t * mh / (vh.sqrt() + eps) - decay * w[i];
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = c::<T>(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Row-wise argmax of `[B, K]`; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .data()
        .chunks_exact(logits.last_dim())
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} lr {:e} loss {:.6} acc {:.4}", self.epoch, self.lr, self.loss, self.accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f32> {
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
}

/// Per-epoch permutation derived from `(seed, epoch)` alone.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Builds a model from `cfg` with `recipe.seed` and trains it.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    recipe: &TrainRecipe,
    data: &Dataset,
    out_path: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome<T>> {
    let mut model = Model::build(cfg, recipe.seed)?;
    let records = train_model(&mut model, recipe, data, out_path, log)?;
    Ok(TrainOutcome { model, log: records })
}

/// Trains an existing model in place, writing one log line per epoch and the
/// final checkpoint to `out_path`.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    recipe: &TrainRecipe,
    data: &Dataset,
    out_path: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<EpochRecord>> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.num_classes > model.cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, model.cfg.num_classes
        )));
    }
    let mut state = OptimizerState::new(&model.store);
    let mut records = Vec::with_capacity(recipe.epochs);
    let mut step = 0usize;
    for epoch in 0..recipe.epochs {
        let lr = lr_at_epoch(recipe, epoch);
        let mut rng = epoch_rng(recipe.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            let flips: Option<Vec<bool>> = recipe.hflip.then(|| chunk.iter().map(|_| rng.gen()).collect());
            let (images, labels) = data.batch::<T>(chunk, flips.as_deref());
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let x = g.constant(images);
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            };
            let logits = model.logits(&mut g, &p, x).map_err(non_finite)?;
            let loss = g.cross_entropy(logits, &labels, recipe.label_smoothing).map_err(non_finite)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            correct += argmax_rows(g.value(logits)).iter().zip(&labels).filter(|(a, b)| a == b).count();
            loss_sum += lv * chunk.len() as f64;
            g.backward(loss)?;
            let mut grads: Vec<Tensor<T>> = model
                .store
                .ids()
                .map(|id| g.grad(p[id]).cloned().unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape())))
                .collect();
            drop(g);
            if let Some(max) = recipe.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adamw_step(&mut model.store, &grads, &mut state, recipe, lr)?;
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        writeln!(log, "{rec}")?;
        log.flush()?;
        records.push(rec);
    }
    if let Some(path) = out_path {
        save_checkpoint(model, path)?;
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn accuracy_percent(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }

    pub fn error_percent(&self) -> f64 {
        100.0 * (self.total - self.correct) as f64 / self.total as f64
    }
}

/// Top-1 accuracy and mean cross-entropy over the dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch::<T>(chunk, None);
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let x = g.constant(images);
        let logits = model.logits(&mut g, &p, x)?;
        let loss = g.cross_entropy(logits, &labels, 0.0)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
        correct += argmax_rows(g.value(logits)).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(EvalReport { correct, total: data.len(), mean_loss: loss_sum / data.len() as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// Milliseconds per image for each timed pass.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub std_ms: f64,
}

impl BenchReport {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let std = (samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
        Self { samples_ms, mean_ms: mean, median_ms: median, std_ms: std }
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean {:.3} ms/img  median {:.3} ms/img  std {:.3}  ({} passes)",
            self.mean_ms,
            self.median_ms,
            self.std_ms,
            self.samples_ms.len()
        )
    }
}

/// Times inference-only forward passes on a fixed random batch.
pub fn benchmark_inference<T: Scalar>(model: &Model<T>, batch: usize, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters == 0 || batch == 0 {
        return Err(Error::Config("benchmark needs at least one pass over a nonempty batch".into()));
    }
    let (h, w) = model.cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::from_fn(&[batch, model.cfg.in_channels, h, w], |_| c::<T>(rng.gen_range(-1.0..1.0)));
    for _ in 0..warmup {
        model.predict(&images)?;
    }
    let samples = (0..iters)
        .map(|_| {
            let t0 = Instant::now();
            model.predict(&images)?;
            Ok(t0.elapsed().as_secs_f64() * 1e3 / batch as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport::from_samples(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, decay: bool) -> (ParamStore<f64>, OptimizerState<f64>) {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w), decay).unwrap();
        let st = OptimizerState::new(&s);
        (s, st)
    }

    #[test]
    fn schedule_values() {
        let r = TrainRecipe::default();
        assert_eq!(lr_at_epoch(&r, 0), 5e-4);
        assert_eq!(lr_at_epoch(&r, 29), 5e-4);
        assert!((lr_at_epoch(&r, 30) - 5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&r, 59) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, mut st) = single(1.0, true);
        let r = TrainRecipe { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, &[Tensor::scalar(1.0)], &mut st, &r, 1e-3).unwrap();
        assert!((s.by_name("w").unwrap().data()[0] - 0.999).abs() < 1e-10);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_only_step() {
        let (mut s, mut st) = single(2.0, true);
        let r = TrainRecipe::default();
        adamw_step(&mut s, &[Tensor::scalar(0.0)], &mut st, &r, 1e-3).unwrap();
        assert_eq!(s.by_name("w").unwrap().data()[0], 2.0 - 1e-3 * 0.05 * 2.0);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut s, mut st) = single(0.7, false);
        let r = TrainRecipe::default();
        adamw_step(&mut s, &[Tensor::scalar(0.0)], &mut st, &r, 1e-3).unwrap();
        assert_eq!(s.by_name("w").unwrap().data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, mut st) = single(1.0, true);
        let r = TrainRecipe::default();
        let e = adamw_step(&mut s, &[Tensor::scalar(f64::NAN)], &mut st, &r, 1e-3).unwrap_err();
        assert!(e.to_string().contains("`w`") || e.to_string().contains("w"), "{e}");
        assert!(matches!(e, Error::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::new(&[2, 3], vec![1.0f32, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), [1, 0]);
    }

    #[test]
    fn accuracy_and_error_sum_to_hundred() {
        for total in 1..=300 {
            for correct in 0..=total {
                let r = EvalReport { correct, total, mean_loss: 0.0 };
                assert_eq!(r.accuracy_percent() + r.error_percent(), 100.0, "{correct}/{total}");
            }
        }
    }

    #[test]
    fn bench_statistics() {
        let r = BenchReport::from_samples(vec![3.0]);
        assert_eq!((r.samples_ms.len(), r.mean_ms, r.median_ms, r.std_ms), (1, 3.0, 3.0, 0.0));
        let r = BenchReport::from_samples(vec![4.0, 1.0, 3.0, 2.0]);
        assert_eq!((r.mean_ms, r.median_ms), (2.5, 2.5));
    }

    #[test]
    fn log_line_format() {
        let r = EpochRecord { epoch: 3, lr: 5e-4, loss: 0.123456789, accuracy: 0.5 };
        assert_eq!(r.to_string(), "epoch 3 lr 5e-4 loss 0.123457 acc 0.5000");
    }

    #[test]
    fn recipe_defaults_validate() {
        TrainRecipe::default().validate().unwrap();
        assert!(TrainRecipe { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
