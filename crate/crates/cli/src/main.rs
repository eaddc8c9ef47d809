//! `restrans`: parameter accounting, toy training, evaluation, gradient
//! checks and load simulation for shared + residual encoders.
//!
//! Exit codes: 0 success, 1 gradient check above tolerance, 2 usage or
//! invalid configuration, 3 data or file format error.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residual_transformer::accounting::{render_tables_csv, render_tables_text};
use residual_transformer::gradcheck::finite_diff_check;
use residual_transformer::train::evaluate;
use residual_transformer::{
    count_params, format_millions, load_checkpoint, sweep_tables, save_checkpoint, simulate_load, train,
    two_stage, Activation, Checkpoint, ChunkMaskSpec, EncoderConfig, Error, Model, ModelConfig, Scalar,
    TaskKind, ToyTask, TrainConfig,
};

#[derive(Parser)]
#[command(name = "restrans", version, about = "Grouped weight sharing with low-rank + diagonal residuals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact parameter counts (defaults: 18 layers, 512/2048, 8 heads).
    Params {
        #[command(flatten)]
        model: ModelArgs,
        /// Print the full sharing and rank sweeps instead of one config.
        #[arg(long)]
        tables: bool,
    },
    /// Train on a toy task; with --from, run stage two from a sharing-only checkpoint
    /// (defaults: 6 layers, 64/256, 4 heads).
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        opts: TrainArgs,
    },
    /// Held-out loss of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Finite-difference check of every parameter gradient in 64-bit
    /// (defaults: the 4-layer, 8-dim tiny encoder with GELU).
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 6)]
        vocab: usize,
        /// Finite-difference step; near the optimum eps^(1/5) of the
        /// fourth-order stencil.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Weight bytes loaded by a layer-sequential pass (defaults as `params`).
    Loadsim {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 4)]
        bytes_per_param: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Sharing-only checkpoint to start stage two from.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Diagnostic: keep shared weights fixed in stage two.
    #[arg(long)]
    freeze_shared: bool,
    /// Write the per-step loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Gelu,
}

/// Structural flags. Unset flags keep the command's base configuration.
#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    share_every: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_enum)]
    diag: Option<Switch>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Give the last layer its own shared weights.
    #[arg(long)]
    unique_last_layer: bool,
    /// Chunk-wise attention mask as CHUNK,HISTORY,LOOKAHEAD in frames.
    #[arg(long, value_parser = parse_mask)]
    mask: Option<ChunkMaskSpec>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path: CSV for params/loadsim, checkpoint for train.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, default_value = "reverse")]
    task: TaskKind,
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 24)]
    length: usize,
    #[arg(long, default_value_t = 256)]
    eval_size: usize,
}

impl TaskArgs {
    fn task(&self) -> residual_transformer::Result<ToyTask> {
        ToyTask::new(self.task, self.vocab, self.length)
    }
}

fn parse_mask(s: &str) -> Result<ChunkMaskSpec, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [c, h, l] => ChunkMaskSpec::new(c, h, l).map_err(|e| e.to_string()),
        _ => Err("expected CHUNK,HISTORY,LOOKAHEAD".into()),
    }
}

impl ModelArgs {
    fn apply(&self, mut cfg: EncoderConfig) -> EncoderConfig {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.layers, self.layers);
        set(&mut cfg.share_every, self.share_every);
        set(&mut cfg.rank, self.rank);
        set(&mut cfg.d_model, self.d_model);
        set(&mut cfg.d_ff, self.d_ff);
        set(&mut cfg.heads, self.heads);
        if let Some(d) = self.diag {
            cfg.diag = d == Switch::On;
        }
        if let Some(a) = self.activation {
            cfg.activation = match a {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Gelu => Activation::Gelu,
            };
        }
        if self.unique_last_layer {
            cfg.unique_last_layer = true;
        }
        if self.mask.is_some() {
            cfg.mask = self.mask;
        }
        cfg.seed = self.seed;
        cfg
    }
}

fn write_out(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_params(model: &ModelArgs, tables: bool) -> anyhow::Result<String> {
    let mut o = String::new();
    if tables {
        let rows = sweep_tables();
        let _ = write!(o, "{}", render_tables_text(&rows));
        if let Some(out) = &model.out {
            write_out(out, render_tables_csv(&rows).as_bytes())?;
        }
        return Ok(o);
    }
    let cfg = model.apply(EncoderConfig::full_scale());
    cfg.validate()?;
    let c = count_params(&cfg);
    let _ = write!(o, "{}", c.to_key_values());
    let _ = writeln!(o);
    let _ = writeln!(o, "{:<18} {:>12} {:>8}", "", "scalars", "approx");
    for (label, n) in [
        ("shared", c.shared_total),
        ("residual", c.residual_total),
        ("transformer", c.transformer_total()),
        ("layer norms", c.norm_total),
    ] {
        let _ = writeln!(o, "{label:<18} {n:>12} {:>8}", format_millions(n));
    }
    if let Some(out) = &model.out {
        write_out(out, c.per_layer_csv().as_bytes())?;
    }
    Ok(o)
}

/// Toy-scale base for training: 6 layers, 64/256, 4 heads, no sharing.
fn train_base() -> EncoderConfig {
    EncoderConfig::tiny().with_layers(6).with_sharing(1).with_rank(0).with_dims(64, 256, 4)
}

fn cmd_train<S: Scalar>(model: &ModelArgs, task: &TaskArgs, opts: &TrainArgs) -> anyhow::Result<String> {
    let mut o = String::new();
    let steps = opts.steps;
    let from = opts.from.as_deref();
    let mut tc = TrainConfig::new(task.task()?, steps);
    tc.peak_lr = opts.lr;
    tc.warmup_fraction = opts.warmup;
    tc.batch_size = opts.batch;
    tc.eval_size = task.eval_size;
    tc.seed = model.seed;
    tc.freeze_shared = opts.freeze_shared;

    let (trained, outcome, start_loss) = match from {
        None => {
            let cfg = ModelConfig::new(model.apply(train_base()), task.vocab);
            let mut m = Model::<S>::new(&cfg)?;
            let outcome = train(&mut m, &tc)?;
            (m, outcome, None)
        }
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
            let mut target = ckpt.model_config()?;
            target.encoder = model.apply(target.encoder);
            let two = two_stage::<S>(&ckpt, &target, &tc)?;
            (two.model, two.outcome, Some(two.checkpoint_eval_loss))
        }
    };

    let cfg = trained.config().encoder.clone();
    let _ = writeln!(o, "stage: {}", if from.is_some() { 2 } else { 1 });
    let _ = writeln!(o, "precision: {}", S::NAME);
    let _ = writeln!(o, "layers: {}", cfg.layers);
    let _ = writeln!(o, "share_every: {}", cfg.share_every);
    let _ = writeln!(o, "rank: {}", cfg.rank);
    let _ = writeln!(o, "params: {}", trained.num_params());
    let _ = writeln!(o, "steps: {steps}");
    if let Some(l) = start_loss {
        let _ = writeln!(o, "checkpoint_eval_loss: {l}");
    }
    let _ = writeln!(o, "initial_eval_loss: {}", outcome.initial_eval_loss);
    let _ = writeln!(o, "final_eval_loss: {}", outcome.final_eval_loss);
    let _ = writeln!(o);
    let _ = writeln!(o, "{:>8} {:>12} {:>12}", "step", "lr", "loss");
    let every = (steps / 10).max(1);
    for r in outcome.trace.iter().filter(|r| r.step % every == 0 || r.step + 1 == steps) {
        let _ = writeln!(o, "{:>8} {:>12.3e} {:>12.6}", r.step, r.lr, r.loss);
    }
    if let Some(path) = &opts.trace {
        write_out(path, outcome.trace_csv().as_bytes())?;
    }
    if let Some(path) = &model.out {
        save_checkpoint(&trained, path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(o)
}

fn cmd_eval<S: Scalar>(path: &Path, task: &TaskArgs, seed: u64) -> anyhow::Result<String> {
    let mut o = String::new();
    let m: Model<S> = load_checkpoint(path, None).with_context(|| format!("reading {}", path.display()))?;
    if m.config().vocab != task.vocab {
        return Err(Error::ConfigMismatch {
            fields: vec![format!("vocab ({} vs {})", m.config().vocab, task.vocab)],
        }
        .into());
    }
    let mut tc = TrainConfig::new(task.task()?, 1);
    tc.seed = seed;
    tc.eval_size = task.eval_size;
    let cfg = &m.config().encoder;
    let _ = writeln!(o, "layers: {}", cfg.layers);
    let _ = writeln!(o, "share_every: {}", cfg.share_every);
    let _ = writeln!(o, "rank: {}", cfg.rank);
    let _ = writeln!(o, "params: {}", m.num_params());
    let _ = writeln!(o, "eval_loss: {}", evaluate(&m, &tc)?);
    Ok(o)
}

fn gradcheck_base() -> EncoderConfig {
    let mut cfg = EncoderConfig::tiny();
    cfg.activation = Activation::Gelu;
    cfg
}

/// Returns the report and whether the check passed.
fn cmd_gradcheck(model: &ModelArgs, vocab: usize, step: f64, tol: f64) -> anyhow::Result<(String, bool)> {
    let mut o = String::new();
    if step <= 0.0 {
        bail!(Error::InvalidConfig(format!("--step must be > 0, got {step}")));
    }
    let cfg = ModelConfig::new(model.apply(gradcheck_base()), vocab);
    let mut m = Model::<f64>::new(&cfg)?;
    // away from the zero-effect init, so no path is trivially zero
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x6c_ec4b);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let batch = ToyTask::new(TaskKind::Reverse, vocab, 5)?.eval_batch(model.seed, 2);
    let mut params: Vec<_> = m.params().into_iter().map(|(n, p)| (n, p.tensor.clone())).collect();
    let report = finite_diff_check(&mut params, step, |g, leaves| {
        let vars = m.bind_leaves(leaves.to_vec());
        m.loss(g, &vars, &batch, None)
    })?;

    let worst = report.max_rel_error();
    let _ = writeln!(o, "tensors: {}", report.per_param.len());
    let _ = writeln!(o, "coordinates: {}", report.per_param.iter().map(|p| p.numel).sum::<usize>());
    let _ = writeln!(o, "zero_coordinates: {}", report.per_param.iter().map(|p| p.zero_coords).sum::<usize>());
    let _ = writeln!(o, "zero_tolerance: {:e}", report.zero_tolerance);
    let _ = writeln!(o, "max_rel_error: {worst:e}");
    let _ = writeln!(o, "tolerance: {tol:e}");
    let _ = writeln!(o, "pass: {}", worst < tol);
    let _ = writeln!(o);
    let mut table = format!("{:<36} {:>6} {:>12} {:>6}\n", "tensor", "numel", "max rel err", "zeros");
    for p in &report.per_param {
        let _ = writeln!(table, "{:<36} {:>6} {:>12.3e} {:>6}", p.name, p.numel, p.max_rel_error, p.zero_coords);
    }
    o.push_str(&table);
    Ok((o, worst < tol))
}

fn cmd_loadsim(model: &ModelArgs, bytes_per_param: u64) -> anyhow::Result<String> {
    let mut o = String::new();
    let cfg = model.apply(EncoderConfig::full_scale());
    let report = simulate_load(&cfg, bytes_per_param)?;
    let _ = write!(o, "{}", report.to_key_values());
    let _ = writeln!(o);
    let _ = writeln!(o, "{:>6} {:>14} {:>14}", "layer", "shared bytes", "residual bytes");
    for l in 0..cfg.layers {
        let bytes = |prefix: &str| -> u64 {
            report
                .load_events
                .iter()
                .filter(|e| e.layer == l && e.tensor.starts_with(prefix))
                .map(|e| e.bytes)
                .sum()
        };
        let _ = writeln!(o, "{l:>6} {:>14} {:>14}", bytes("group"), bytes("layer"));
    }
    if let Some(out) = &model.out {
        write_out(out, report.events_csv().as_bytes())?;
    }
    Ok(o)
}

fn run(cli: Cli) -> anyhow::Result<(String, bool)> {
    let text = match cli.command {
        Command::Params { model, tables } => cmd_params(&model, tables)?,
        Command::Train { model, task, opts } => match opts.precision {
            Precision::F32 => cmd_train::<f32>(&model, &task, &opts)?,
            Precision::F64 => cmd_train::<f64>(&model, &task, &opts)?,
        },
        Command::Eval { checkpoint, task, seed, precision } => match precision {
            Precision::F32 => cmd_eval::<f32>(&checkpoint, &task, seed)?,
            Precision::F64 => cmd_eval::<f64>(&checkpoint, &task, seed)?,
        },
        Command::Gradcheck { model, vocab, step, tol } => return cmd_gradcheck(&model, vocab, step, tol),
        Command::Loadsim { model, bytes_per_param } => cmd_loadsim(&model, bytes_per_param)?,
    };
    Ok((text, true))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((text, passed)) => {
            // a closed pipe (e.g. `| head`) is not an error worth reporting
            let _ = io::stdout().lock().write_all(text.as_bytes());
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
