//! Training loop and the two-stage sharing-then-residual pipeline.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::encoder::{DropoutState, ParamKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, lr_at, AdamConfig, AdamState};
use crate::tasks::{TaskKind, ToyTask};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub task: ToyTask,
    pub seed: u64,
    /// Sequences in the held-out evaluation batch.
    pub eval_size: usize,
    /// Diagnostic only: keep shared weights fixed during training.
    pub freeze_shared: bool,
}

impl TrainConfig {
    pub fn new(task: ToyTask, total_steps: usize) -> Self {
        Self {
            total_steps,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            batch_size: 8,
            adam: AdamConfig::default(),
            task,
            seed: 0,
            eval_size: 64,
            freeze_shared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::InvalidConfig("batch and eval sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.total_steps, self.peak_lr, self.warmup_fraction)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let task = ToyTask::new(TaskKind::Reverse, 16, 24).expect("valid default task");
        Self::new(task, 1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<StepRecord>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

impl TrainOutcome {
    /// `step,lr,loss` rows with a header.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{:e},{:e}", r.step, r.lr, r.loss);
        }
        s
    }
}

fn is_shared(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::SharedWeight | ParamKind::SharedBias)
}

/// Held-out loss for `config`'s task.
pub fn evaluate<S: Scalar>(model: &Model<S>, config: &TrainConfig) -> Result<f64> {
    model.eval_loss(&config.task.eval_batch(config.seed, config.eval_size))
}

/// Trains every parameter (shared weights too, unless `freeze_shared`)
/// with Adam for `total_steps` steps.
pub fn train<S: Scalar>(model: &mut Model<S>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.task.vocab != model.config().vocab {
        return Err(Error::ConfigMismatch {
            fields: vec![format!("vocab ({} vs {})", config.task.vocab, model.config().vocab)],
        });
    }
    let initial_eval_loss = evaluate(model, config)?;
    let mut stream = config.task.stream(config.seed);
    let mut adam = AdamState::new(config.adam, model.params().iter().map(|(_, p)| p.tensor));
    let mut dropout = (model.config().encoder.dropout > 0.0).then(|| DropoutState::new(&model.config().encoder));
    let trainable = |k: ParamKind| !(config.freeze_shared && is_shared(k));

    let mut trace = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let batch = stream.next_batch(config.batch_size);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, trainable);
        let loss = model.loss(&mut g, &vars, &batch, dropout.as_mut())?;
        let loss_value = g.value(loss).data()[0].to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        g.backward(loss)?;

        let lr = config.lr_at(step);
        let grads: Vec<Option<&Tensor<S>>> = vars.leaves.iter().map(|&v: &Var| g.grad(v)).collect();
        let mut params = model.tensors_mut();
        adam_step(&mut params, &grads, &mut adam, lr)?;
        trace.push(StepRecord { step, lr, loss: loss_value });
    }
    let final_eval_loss = evaluate(model, config)?;
    Ok(TrainOutcome {
        trace,
        initial_eval_loss,
        final_eval_loss,
    })
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome<S> {
    pub model: Model<S>,
    /// Held-out loss of the sharing-only model restored from the checkpoint.
    pub checkpoint_eval_loss: f64,
    pub outcome: TrainOutcome,
}

/// Stage two: restore a sharing-only checkpoint, attach zero-effect
/// adapters of `target.encoder.rank`, and train all parameters.
pub fn two_stage<S: Scalar>(
    checkpoint: &Checkpoint,
    target: &ModelConfig,
    config: &TrainConfig,
) -> Result<TwoStageOutcome<S>> {
    let source = checkpoint.model_config()?;
    if source.encoder.has_adapters() {
        return Err(Error::InvalidConfig("stage-two source must be sharing-only (rank 0)".into()));
    }
    if !target.encoder.has_adapters() {
        return Err(Error::InvalidConfig("stage-two target needs rank >= 1".into()));
    }
    let mut expected = target.clone();
    expected.encoder.rank = 0;
    expected.encoder.diag = source.encoder.diag;
    let fields = source.structural_diff(&expected);
    if !fields.is_empty() {
        return Err(Error::ConfigMismatch { fields });
    }

    let base: Model<S> = checkpoint.to_model()?;
    let checkpoint_eval_loss = evaluate(&base, config)?;
    let mut model = base.with_adapters(target.encoder.rank, target.encoder.diag, target.encoder.seed)?;
    let outcome = train(&mut model, config)?;
    Ok(TwoStageOutcome {
        model,
        checkpoint_eval_loss,
        outcome,
    })
}
