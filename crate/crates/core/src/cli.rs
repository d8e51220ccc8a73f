//! Command-line front end: parameter audit, gradient checks, training,
//! evaluation, latency benchmark and self-test.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::blocks::ReductionSharing;
use crate::data_io::{load_cifar10, load_checkpoint, write_synthetic_cifar, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Scalar;
use crate::training::{benchmark_inference, evaluate, train_model, TrainRecipe};
use crate::verify::{self, group_digits, SuiteConfig};

#[derive(Debug, Parser)]
#[command(name = "apvt", version, about = "Aggregated pyramid vision transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter audit; all named variants when no model is given.
    Params(ParamsArgs),
    /// Finite-difference gradient checks per block and end to end.
    Gradcheck(GradcheckArgs),
    /// Train on CIFAR-10 binaries.
    Train(TrainArgs),
    /// Top-1 accuracy and error of a checkpoint.
    Eval(EvalArgs),
    /// Per-image inference latency.
    Bench(BenchArgs),
    /// Structural invariants; stops at the first failure.
    Selftest,
    /// Write synthetic CIFAR-10-format batch files.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SharingArg {
    PerBlock,
    PerPath,
}

impl From<SharingArg> for ReductionSharing {
    fn from(s: SharingArg) -> Self {
        match s {
            SharingArg::PerBlock => ReductionSharing::PerBlock,
            SharingArg::PerPath => ReductionSharing::PerPath,
        }
    }
}

fn parse_depths(s: &str) -> std::result::Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected 4 comma-separated depths, got {}", v.len()))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((p(h)?, p(w)?))
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Named variant, e.g. apvt-8-2x-a.
    #[arg(long)]
    pub variant: Option<String>,
    /// Stage depths a,b,c,d.
    #[arg(long, value_parser = parse_depths, conflicts_with = "depth")]
    pub depths: Option<[usize; 4]>,
    /// One depth for all four stages.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Paths per group encoder.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Input size HxW (multiple of 32).
    #[arg(long, value_parser = parse_size)]
    pub input_size: Option<(usize, usize)>,
    /// Ownership of the pre-attention norm and spatial reduction.
    #[arg(long, value_enum, default_value = "per-block")]
    pub sharing: SharingArg,
}

impl ModelArgs {
    fn depths(&self) -> Option<[usize; 4]> {
        self.depths.or(self.depth.map(|d| [d; 4]))
    }

    pub fn is_empty(&self) -> bool {
        self.variant.is_none() && self.depths().is_none() && self.paths.is_none() && self.head_dim.is_none()
    }

    /// A named variant, or a custom model when every dimension is given.
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.variant {
            Some(name) => {
                if self.depths().is_some() || self.paths.is_some() || self.head_dim.is_some() {
                    return Err(Error::Config(
                        "--variant fixes depths, paths and head dim; drop the explicit overrides".into(),
                    ));
                }
                ModelConfig::variant(name)?
            }
            None => match (self.depths(), self.paths, self.head_dim) {
                (Some(d), Some(c), Some(h)) => ModelConfig::custom(d, c, h, 10, (32, 32))?,
                _ => {
                    return Err(Error::Config(
                        "without --variant, --depths (or --depth), --paths and --head-dim are all required".into(),
                    ))
                }
            },
        };
        if let Some(k) = self.classes {
            cfg.num_classes = k;
        }
        if let Some(s) = self.input_size {
            cfg.input_size = s;
        }
        cfg.sharing = self.sharing.into();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_depths, conflicts_with = "depth")]
    pub depths: Option<[usize; 4]>,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long, default_value_t = 2)]
    pub paths: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "per-block")]
    pub sharing: SharingArg,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Keep only the first N records (after class filtering).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Keep only these classes, relabeled 0..k.
    #[arg(long, value_delimiter = ',')]
    pub subset: Option<Vec<usize>>,
}

impl DataArgs {
    fn load(&self, split: Split) -> Result<Dataset> {
        match &self.subset {
            Some(classes) => {
                let all = load_cifar10(&self.data_dir, split, None)?;
                all.class_subset(classes, self.limit.unwrap_or(usize::MAX))
            }
            None => load_cifar10(&self.data_dir, split, self.limit),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written after the last epoch.
    #[arg(long, default_value = "apvt.ckpt")]
    pub ckpt: PathBuf,
    /// Training log, appended one line per epoch.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.0)]
    pub label_smoothing: f64,
    #[arg(long)]
    pub hflip: bool,
    /// Run in 64-bit floating point.
    #[arg(long)]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    pub train_split: bool,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long)]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Records per batch file.
    #[arg(long, default_value_t = 1000)]
    pub per_file: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn run_params(args: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    if !args.model.is_empty() {
        let cfg = args.model.resolve()?;
        let model = Model::<f32>::build(&cfg, 0)?;
        let b = model.count_parameters();
        writeln!(out, "{}  ({} classes, {}x{} input)", cfg.name, cfg.num_classes, cfg.input_size.0, cfg.input_size.1)?;
        writeln!(out, "{b}")?;
        if let Some(m) = cfg.published_millions() {
            let dev = b.total() as f64 / (m * 1e6) - 1.0;
            writeln!(out, "published {m:.2}M, deviation {:+.2}%", 100.0 * dev)?;
        }
        return Ok(());
    }
    let rows = verify::parameter_audit(args.model.sharing.into())?;
    for r in &rows {
        writeln!(out, "{}\n{}\n", r.name, r.built)?;
    }
    writeln!(out, "{:<14} {:>12} {:>10} {:>10}  within ±3%", "variant", "total", "published", "deviation")?;
    for r in &rows {
        writeln!(
            out,
            "{:<14} {:>12} {:>9.2}M {:>+9.2}%  {}",
            r.name,
            group_digits(r.total()),
            r.published_millions,
            100.0 * r.deviation(),
            if r.within_tolerance() { "yes" } else { "no" }
        )?;
    }
    let (width, head) = verify::audit_ratios(&rows);
    writeln!(out, "ratio 8-4x-a / 8-2x-a = {width:.3} (expected 1.40 to 1.55)")?;
    writeln!(out, "ratio 8-2x-b / 8-2x-a = {head:.3} (expected 3.5 to 4.5)")?;
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SuiteConfig {
        depths: args.depths.unwrap_or([args.depth; 4]),
        paths: args.paths,
        head_dim: args.head_dim,
        seed: args.seed,
        sharing: args.sharing.into(),
    };
    ModelConfig::custom(cfg.depths, cfg.paths, cfg.head_dim, 3, (32, 32))?;
    let mut failed = None;
    for (outcome, report) in verify::gradient_suite(&cfg)? {
        writeln!(out, "{outcome}  ({} coordinates)", report.checked)?;
        if !outcome.passed() && failed.is_none() {
            failed = Some(outcome);
        }
    }
    match failed {
        Some(o) => o.into_result().map(|_| ()),
        None => Ok(()),
    }
}

fn recipe_from(args: &TrainArgs) -> TrainRecipe {
    let d = TrainRecipe::default();
    TrainRecipe {
        batch_size: args.batch.unwrap_or(d.batch_size),
        base_lr: args.lr.unwrap_or(d.base_lr),
        epochs: args.epochs.unwrap_or(d.epochs),
        weight_decay: args.wd.unwrap_or(d.weight_decay),
        seed: args.seed,
        grad_clip: args.clip,
        warmup_epochs: args.warmup,
        label_smoothing: args.label_smoothing,
        hflip: args.hflip,
        ..d
    }
}

fn run_train_as<T: Scalar>(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let recipe = recipe_from(args);
    recipe.validate()?;
    let mut cfg = args.model.resolve()?;
    let data = args.data.load(Split::Train)?;
    if args.model.classes.is_none() {
        cfg.num_classes = data.num_classes;
    }
    writeln!(out, "training {} on {} images ({} classes)", cfg.name, data.len(), data.num_classes)?;
    let mut model = Model::<T>::build(&cfg, recipe.seed)?;
    let mut sink = Tee { out, file: None };
    if let Some(p) = &args.log {
        sink.file = Some(OpenOptions::new().create(true).append(true).open(p)?);
    }
    train_model(&mut model, &recipe, &data, Some(&args.ckpt), &mut sink)?;
    writeln!(sink.out, "checkpoint written to {}", args.ckpt.display())?;
    Ok(())
}

struct Tee<'a> {
    out: &'a mut dyn Write,
    file: Option<std::fs::File>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.out.write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn run_eval_as<T: Scalar>(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.model.resolve()?;
    let split = if args.train_split { Split::Train } else { Split::Test };
    let data = args.data.load(split)?;
    if args.model.classes.is_none() {
        cfg.num_classes = data.num_classes;
    }
    let mut model = Model::<T>::build(&cfg, 0)?;
    load_checkpoint(&mut model, &args.ckpt)?;
    let r = evaluate(&model, &data, args.batch)?;
    writeln!(
        out,
        "{} images: accuracy {:.2}%  error {:.2}%  loss {:.6}",
        r.total,
        r.accuracy_percent(),
        r.error_percent(),
        r.mean_loss
    )?;
    Ok(())
}

fn run_bench_as<T: Scalar>(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.model.resolve()?;
    let model = Model::<T>::build(&cfg, args.seed)?;
    let r = benchmark_inference(&model, args.batch, args.warmup, args.iters)?;
    writeln!(out, "{} ({}, batch {}): {r}", cfg.name, T::NAME, args.batch)?;
    Ok(())
}

/// Executes one parsed command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Params(a) => run_params(a, out),
        Command::Gradcheck(a) => run_gradcheck(a, out),
        Command::Train(a) if a.f64 => run_train_as::<f64>(a, out),
        Command::Train(a) => run_train_as::<f32>(a, out),
        Command::Eval(a) if a.f64 => run_eval_as::<f64>(a, out),
        Command::Eval(a) => run_eval_as::<f32>(a, out),
        Command::Bench(a) if a.f64 => run_bench_as::<f64>(a, out),
        Command::Bench(a) => run_bench_as::<f32>(a, out),
        Command::Selftest => {
            verify::selftest(out)?;
            writeln!(out, "selftest passed")?;
            Ok(())
        }
        Command::Synth(a) => {
            write_synthetic_cifar(&a.out, a.per_file, a.seed)?;
            writeln!(out, "wrote 6 batch files of {} records to {}", a.per_file, a.out.display())?;
            Ok(())
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let argv = std::iter::once("apvt").chain(args.iter().copied());
        let code = dispatch(argv, &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn unknown_variant_fails() {
        let (code, _, err) = call(&["params", "--variant", "no-such-model"]);
        assert_ne!(code, 0);
        assert!(err.contains("unknown variant"), "{err}");
    }

    #[test]
    fn unknown_subcommand_prints_usage() {
        let (code, _, err) = call(&["frobnicate"]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn named_variant_audit() {
        let (code, out, _) = call(&["params", "--variant", "apvt-8-2x-a"]);
        assert_eq!(code, 0);
        assert!(out.contains("5599626") && out.contains("published 5.52M"), "{out}");
    }

    #[test]
    fn partial_custom_config_is_rejected() {
        let (code, _, err) = call(&["params", "--depths", "1,1,1,1", "--paths", "2"]);
        assert_eq!(code, 1);
        assert!(err.contains("--head-dim"), "{err}");
        let (code, _, err) = call(&["params", "--variant", "apvt-8-2x-a", "--paths", "3"]);
        assert_eq!(code, 1);
        assert!(err.contains("--variant fixes"), "{err}");
    }

    #[test]
    fn invalid_input_size_is_named() {
        let (code, _, err) = call(&["params", "--depth", "1", "--paths", "2", "--head-dim", "8", "--input-size", "30x30"]);
        assert_eq!(code, 1);
        assert!(err.contains("input size 30x30"), "{err}");
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_depths("3,4,6,3").unwrap(), [3, 4, 6, 3]);
        assert!(parse_depths("1,2,3").is_err());
        assert_eq!(parse_size("224x224").unwrap(), (224, 224));
        assert!(parse_size("224").is_err());
    }
}
