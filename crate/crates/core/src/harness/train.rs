use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{AttentionMode, ToyDiTConfig};
use super::data::Dataset;
use super::model::{AttentionPlan, BatchItem, ForwardStats, ToyDiT};
use super::optim::Adam;
use crate::attention::FlopCount;
use crate::error::{bail, NablaError, Result};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,train_loss,val_loss,step_seconds,sparsity";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Wall-clock seconds of the optimisation step (targets, forward,
    /// backward, update); validation is excluded.
    pub step_seconds: f64,
    /// Mean sparsity of the attention masks used in the step; 0 for full.
    pub sparsity: f64,
}

/// Per-step attention counters, summed over the batch and all layers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    /// Forward attention multiply-accumulates of the trained model.
    pub flops: FlopCount,
    pub nabla_popcount: u64,
    pub sta_popcount: u64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<RunRecord>,
    pub stats: Vec<StepStats>,
    pub model: ToyDiT,
}

impl TrainRun {
    /// Mean training loss over the last `window` steps.
    pub fn final_train_loss(&self, window: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(window.max(1))..];
        tail.iter().map(|r| r.train_loss).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_loss)
    }

    pub fn mean_step_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.step_seconds).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn total_flops(&self) -> FlopCount {
        self.stats.iter().map(|s| s.flops).sum()
    }
}

enum Objective<'a> {
    /// Predict the injected Gaussian noise.
    Denoise,
    /// Match a frozen teacher's output.
    Distill {
        teacher: &'a ToyDiT,
        plan: AttentionPlan,
    },
}

fn check_data(config: &ToyDiTConfig, data: &Dataset) -> Result<()> {
    if data.train.is_empty() || data.val.is_empty() {
        bail!(Param, "training and validation sets must be non-empty");
    }
    let want = [config.grid.seq_len(), config.channels];
    for t in data.train.iter().chain(&data.val) {
        if t.shape() != want {
            bail!(
                Geometry,
                "sample shape {:?} does not match [S, C] = {:?}",
                t.shape(),
                want
            );
        }
    }
    Ok(())
}

/// Linear-interpolation corruption `x_t = (1 - t) x_0 + t * noise` with
/// `t ~ U[0, 1)` and standard normal noise.
fn draw_item(rng: &mut ChaCha8Rng, clip: &Tensor, objective: &Objective<'_>) -> Result<BatchItem> {
    let t: f32 = rng.random_range(0.0..1.0);
    let noise: Vec<f32> = (0..clip.len()).map(|_| rng.sample(StandardNormal)).collect();
    let input: Vec<f32> = clip
        .data()
        .iter()
        .zip(&noise)
        .map(|(x, n)| (1.0 - t) * x + t * n)
        .collect();
    let target = match objective {
        Objective::Denoise => noise,
        Objective::Distill { teacher, plan } => teacher.forward(plan, &input, t)?.0,
    };
    Ok(BatchItem { input, t, target })
}

/// Non-finite activations surface as validation errors inside the kernels;
/// during training they mean the run has blown up.
fn diverged<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        NablaError::Validation(_) => NablaError::Divergence { step, loss: f64::NAN },
        other => other,
    })
}

fn run(
    config: &ToyDiTConfig,
    data: &Dataset,
    mut model: ToyDiT,
    mode: AttentionMode,
    objective: Objective<'_>,
    mut rng: ChaCha8Rng,
) -> Result<TrainRun> {
    let plan = AttentionPlan::new(mode, model.config())?;
    let val: Vec<BatchItem> = data
        .val
        .iter()
        .map(|clip| draw_item(&mut rng, clip, &objective))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(
        model.params().iter().map(Vec::len),
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    );
    let mut records = Vec::with_capacity(config.train_steps);
    let mut stats = Vec::with_capacity(config.train_steps);
    for step in 0..config.train_steps {
        let val_loss = if step % config.val_every == 0 || step + 1 == config.train_steps {
            Some(diverged(step, model.eval_loss(&plan, &val))?)
        } else {
            None
        };

        let start = Instant::now();
        let batch: Vec<BatchItem> = (0..config.batch)
            .map(|_| {
                let idx = rng.random_range(0..data.train.len());
                draw_item(&mut rng, &data.train[idx], &objective)
            })
            .collect::<Result<_>>()?;
        let (loss, grads, fwd): (f64, Vec<Vec<f32>>, ForwardStats) =
            diverged(step, model.loss_and_grad(&plan, &batch))?;
        if !loss.is_finite() {
            return Err(NablaError::Divergence { step, loss });
        }
        adam.step(model.params_mut(), &grads);
        let step_seconds = start.elapsed().as_secs_f64().max(1e-9);

        records.push(RunRecord {
            step,
            train_loss: loss,
            val_loss,
            step_seconds,
            sparsity: fwd.mean_sparsity(),
        });
        stats.push(StepStats {
            flops: fwd.flops,
            nabla_popcount: fwd.nabla_popcount,
            sta_popcount: fwd.sta_popcount,
        });
    }
    Ok(TrainRun {
        records,
        stats,
        model,
    })
}

/// Trains a fresh denoiser from `config.seed` with `config.attention_mode`.
pub fn train(config: &ToyDiTConfig, data: &Dataset) -> Result<TrainRun> {
    config.validate()?;
    check_data(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = ToyDiT::init(config, &mut rng)?;
    run(
        config,
        data,
        model,
        config.attention_mode,
        Objective::Denoise,
        rng,
    )
}

/// Initialises a student from `teacher`'s weights, switches its attention
/// to `student_mode`, and regresses its output onto the frozen teacher
/// evaluated with `teacher_mode`. The architecture comes from the teacher;
/// `config` supplies the optimisation settings.
pub fn distill(
    student_mode: AttentionMode,
    teacher_mode: AttentionMode,
    teacher: &ToyDiT,
    config: &ToyDiTConfig,
    data: &Dataset,
) -> Result<TrainRun> {
    let mut arch = teacher.config().clone();
    arch.train_steps = config.train_steps;
    arch.batch = config.batch;
    arch.lr = config.lr;
    arch.beta1 = config.beta1;
    arch.beta2 = config.beta2;
    arch.eps = config.eps;
    arch.seed = config.seed;
    arch.val_every = config.val_every;
    arch.attention_mode = student_mode;
    arch.validate()?;
    check_data(&arch, data)?;
    let rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let objective = Objective::Distill {
        teacher,
        plan: AttentionPlan::new(teacher_mode, teacher.config())?,
    };
    run(&arch, data, teacher.clone(), student_mode, objective, rng)
}

pub fn write_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.train_loss, val, r.step_seconds, r.sparsity
        );
    }
    std::fs::write(path.as_ref(), s)?;
    Ok(())
}
