//! Multi-seed toy-scale comparison of sharing factors, residual adapters
//! and depth.
//!
//! Every arm is trained on the same task stream per seed. The residual arm
//! runs stage two from the `K = 3` sharing-only arm's checkpoint with the
//! same step budget.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::config::{EncoderConfig, ModelConfig};
use crate::error::Result;
use crate::model::Model;
use crate::tasks::{TaskKind, ToyTask};
use crate::tensor::Scalar;
use crate::train::{train, two_stage, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrendSettings {
    pub task: TaskKind,
    pub vocab: usize,
    pub length: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub deep_layers: usize,
    pub shallow_layers: usize,
    pub rank: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub eval_size: usize,
}

impl Default for TrendSettings {
    fn default() -> Self {
        Self {
            task: TaskKind::Reverse,
            vocab: 16,
            length: 24,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            deep_layers: 18,
            shallow_layers: 6,
            rank: 4,
            seeds: (0..5).collect(),
            steps: 10_000,
            batch_size: 8,
            peak_lr: 1e-3,
            eval_size: 256,
        }
    }
}

/// One trained configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Deep, no sharing.
    Baseline,
    /// Deep, `K = 3`, stage two with adapters.
    Share3Residual,
    /// Deep, `K = 3`, sharing only.
    Share3,
    /// Deep, `K = 9`, sharing only.
    Share9,
    /// Shallow, no sharing; same size as `Share3`.
    Shallow,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::Share3Residual, Arm::Share3, Arm::Share9, Arm::Shallow];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "L=deep K=1",
            Arm::Share3Residual => "L=deep K=3 +residual",
            Arm::Share3 => "L=deep K=3",
            Arm::Share9 => "L=deep K=9",
            Arm::Shallow => "L=shallow K=1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub settings: TrendSettings,
    /// `(arm, seed, final eval loss)`.
    pub runs: Vec<(Arm, u64, f64)>,
}

impl TrendReport {
    pub fn mean(&self, arm: Arm) -> f64 {
        let losses: Vec<f64> = self.runs.iter().filter(|r| r.0 == arm).map(|r| r.2).collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    }

    /// `K=1 <= K=3+residual <= K=3 <= K=9` on mean final loss.
    pub fn sharing_order_holds(&self) -> bool {
        let m = |a| self.mean(a);
        m(Arm::Baseline) <= m(Arm::Share3Residual)
            && m(Arm::Share3Residual) <= m(Arm::Share3)
            && m(Arm::Share3) <= m(Arm::Share9)
    }

    /// Deep `K=3` beats shallow `K=1` of the same size.
    pub fn depth_beats_width(&self) -> bool {
        self.mean(Arm::Share3) < self.mean(Arm::Shallow)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,final_eval_loss\n");
        for (arm, seed, loss) in &self.runs {
            let _ = writeln!(s, "{},{seed},{loss:e}", arm.label());
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for arm in Arm::ALL {
            let _ = writeln!(s, "{:<22} mean final loss {:.4e}", arm.label(), self.mean(arm));
        }
        s
    }
}

impl TrendSettings {
    fn encoder(&self, layers: usize, share_every: usize, seed: u64) -> EncoderConfig {
        EncoderConfig::tiny()
            .with_layers(layers)
            .with_sharing(share_every)
            .with_rank(0)
            .with_dims(self.d_model, self.d_ff, self.heads)
            .with_seed(seed)
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut tc = TrainConfig::new(ToyTask::new(self.task, self.vocab, self.length)?, self.steps);
        tc.seed = seed;
        tc.batch_size = self.batch_size;
        tc.peak_lr = self.peak_lr;
        tc.eval_size = self.eval_size;
        Ok(tc)
    }

    fn scratch<S: Scalar>(&self, layers: usize, share_every: usize, seed: u64) -> Result<(Model<S>, f64)> {
        let tc = self.train_config(seed)?;
        let cfg = ModelConfig::new(self.encoder(layers, share_every, seed), self.vocab);
        let mut m = Model::<S>::new(&cfg)?;
        let out = train(&mut m, &tc)?;
        Ok((m, out.final_eval_loss))
    }

    fn residual_from<S: Scalar>(&self, stage1: &Model<S>, seed: u64) -> Result<f64> {
        let tc = self.train_config(seed)?;
        let ckpt = Checkpoint::from_model(stage1);
        let mut target = stage1.config().clone();
        target.encoder.rank = self.rank;
        target.encoder.diag = true;
        target.encoder.seed = seed;
        Ok(two_stage::<S>(&ckpt, &target, &tc)?.outcome.final_eval_loss)
    }

    /// Trains one arm for one seed and returns its final held-out loss.
    pub fn run_arm<S: Scalar>(&self, arm: Arm, seed: u64) -> Result<f64> {
        match arm {
            Arm::Baseline => Ok(self.scratch::<S>(self.deep_layers, 1, seed)?.1),
            Arm::Share3 => Ok(self.scratch::<S>(self.deep_layers, 3, seed)?.1),
            Arm::Share9 => Ok(self.scratch::<S>(self.deep_layers, 9, seed)?.1),
            Arm::Shallow => Ok(self.scratch::<S>(self.shallow_layers, 1, seed)?.1),
            Arm::Share3Residual => {
                let (stage1, _) = self.scratch::<S>(self.deep_layers, 3, seed)?;
                self.residual_from(&stage1, seed)
            }
        }
    }

    /// Runs every arm for every seed; `progress` sees each finished run.
    pub fn run<S: Scalar>(&self, mut progress: impl FnMut(Arm, u64, f64)) -> Result<TrendReport> {
        let mut runs = Vec::new();
        for &seed in &self.seeds {
            let mut record = |arm, loss| {
                progress(arm, seed, loss);
                runs.push((arm, seed, loss));
            };
            record(Arm::Baseline, self.run_arm::<S>(Arm::Baseline, seed)?);
            // the sharing-only K=3 run doubles as stage one of the residual arm
            let (stage1, share3) = self.scratch::<S>(self.deep_layers, 3, seed)?;
            record(Arm::Share3, share3);
            record(Arm::Share3Residual, self.residual_from(&stage1, seed)?);
            record(Arm::Share9, self.run_arm::<S>(Arm::Share9, seed)?);
            record(Arm::Shallow, self.run_arm::<S>(Arm::Shallow, seed)?);
        }
        Ok(TrendReport {
            settings: self.clone(),
            runs,
        })
    }
}
