//! Window construction and the training / fine-tuning loops.
//!
//! All randomness (epoch shuffles, dropout masks) is derived statelessly
//! from `TrainConfig::seed` and the step counter, so resuming from a
//! checkpoint at step k replays the uninterrupted run exactly, step for
//! step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{DatasetSplit, UserHistory};
use crate::linearize::{linearize_window, LinearizeError, LinearizedWindow};
use crate::model::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::model::optim::{
    adamw_step, clip_gradients, lr_at, AdamState, LossMask, OptimError, TrainConfig,
};
use crate::model::{eval_loss, loss_and_grads, ModelError, ModelParams};
use crate::seeds;
use crate::tensor::tape::IGNORE_TARGET;
use crate::vocab::{TokenId, EOS};
use crate::WINDOW_DAYS;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("day range [{min}, {max}) is shorter than one window")]
    RangeTooShort { min: u32, max: u32 },
    #[error("no training windows")]
    EmptyWindows,
    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: u64 },
    #[error("no history for uid {0}")]
    MissingHistory(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One 8-day training window: days `start_day ..= start_day + 7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingWindow {
    pub uid: u32,
    pub start_day: u32,
}

impl TrainingWindow {
    pub fn days(&self) -> std::ops::RangeInclusive<u32> {
        self.start_day..=self.start_day + WINDOW_DAYS - 1
    }
}

/// Stride-1 windows for every user inside `[day_min, day_max)`, additionally
/// clipped to each user's observed span, and — for val/test users — to days
/// before the split horizon.
pub fn make_windows(
    split: &DatasetSplit,
    histories: &BTreeMap<u32, UserHistory>,
    day_min: u32,
    day_max: u32,
) -> Result<Vec<TrainingWindow>, TrainError> {
    if day_max < day_min + WINDOW_DAYS {
        return Err(TrainError::RangeTooShort { min: day_min, max: day_max });
    }
    let mut out = Vec::new();
    for (&uid, hist) in histories {
        let Some((first, last)) = hist.span() else { continue };
        let mut limit = day_max; // exclusive
        if let Some(horizon) = split.training_day_limit(uid) {
            limit = limit.min(horizon);
        }
        limit = limit.min(last + 1);
        let lo = day_min.max(first);
        if limit < lo + WINDOW_DAYS {
            continue;
        }
        for start in lo..=limit - WINDOW_DAYS {
            out.push(TrainingWindow { uid, start_day: start });
        }
    }
    Ok(out)
}

/// A padded batch ready for the model, with provenance kept for audits.
pub struct Batch {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub rows: usize,
    pub row_len: usize,
    pub windows: Vec<TrainingWindow>,
}

/// Linearize and right-pad a set of windows. Padding inputs are `<eos>`;
/// padded target positions are ignore-marked. With
/// [`LossMask::TargetDayOnly`], context targets (everything up to and
/// including `<|sep|>`) are ignore-marked as well.
pub fn build_batch(
    windows: &[TrainingWindow],
    histories: &BTreeMap<u32, UserHistory>,
    split: &DatasetSplit,
    mask: LossMask,
) -> Result<Batch, TrainError> {
    assert!(!windows.is_empty(), "build_batch: empty window set");
    let mut lins: Vec<LinearizedWindow> = Vec::with_capacity(windows.len());
    for w in windows {
        let hist = histories.get(&w.uid).ok_or(TrainError::MissingHistory(w.uid))?;
        let limit = split.training_day_limit(w.uid).unwrap_or(u32::MAX);
        lins.push(linearize_window(hist, w.start_day, limit)?);
    }
    let max_len = lins.iter().map(|l| l.tokens.len()).max().unwrap();
    let row_len = max_len - 1;
    let rows = lins.len();
    let mut inputs = Vec::with_capacity(rows * row_len);
    let mut targets = Vec::with_capacity(rows * row_len);
    for lin in &lins {
        let n = lin.tokens.len();
        for j in 0..row_len {
            inputs.push(if j < n - 1 { lin.tokens[j] } else { EOS });
            let tgt = if j + 1 < n {
                let keep = match mask {
                    LossMask::Full => true,
                    LossMask::TargetDayOnly => j + 1 > lin.sep_pos,
                };
                if keep {
                    lin.tokens[j + 1]
                } else {
                    IGNORE_TARGET
                }
            } else {
                IGNORE_TARGET
            };
            targets.push(tgt);
        }
    }
    Ok(Batch { inputs, targets, rows, row_len, windows: windows.to_vec() })
}

/// The exact batch composition `run_training` uses for `epoch`: a seeded
/// shuffle of the window list, cut into `batch_size` chunks. Exposed so the
/// leakage audit can enumerate precisely what the loop would feed the model.
pub fn epoch_batches(
    windows: &[TrainingWindow],
    tc: &TrainConfig,
    epoch: u64,
) -> Vec<Vec<TrainingWindow>> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix3(tc.seed, SHUFFLE, epoch));
    order.shuffle(&mut rng);
    order
        .chunks(tc.batch_size)
        .map(|chunk| chunk.iter().map(|&i| windows[i]).collect())
        .collect()
}

const SHUFFLE: u64 = 0x53_48_55_46; // stream tag
const DROPOUT: u64 = 0x44_52_4F_50;

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub step: u64,
    pub trace: Vec<TraceEntry>,
    /// Step and loss of the best validation checkpoint (argmin of eval
    /// losses); falls back to the final step when no eval windows exist.
    pub best_step: u64,
    pub best_eval_loss: Option<f64>,
    pub best_params: ModelParams<f32>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Run (or resume) the training loop.
///
/// When `out_dir` is set, a checkpoint `ckpt_step{N}.geof` is written at
/// every evaluation interval, `best` records the file name of the
/// lowest-eval-loss checkpoint, and `loss_log.jsonl` captures the trace.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    mut params: ModelParams<f32>,
    mut adam: AdamState,
    resume_step: u64,
    histories: &BTreeMap<u32, UserHistory>,
    split: &DatasetSplit,
    windows: &[TrainingWindow],
    eval_windows: &[TrainingWindow],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    if windows.is_empty() {
        return Err(TrainError::EmptyWindows);
    }
    let steps_per_epoch = windows.len().div_ceil(tc.batch_size);
    let total_steps = if tc.total_steps > 0 {
        tc.total_steps
    } else {
        tc.epochs * steps_per_epoch
    } as u64;
    let tc_resolved = TrainConfig { total_steps: total_steps as usize, ..tc.clone() };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("loss_log.jsonl"))?))
        }
        None => None,
    };

    let mut trace = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut best: Option<(u64, f64)> = None;
    let mut best_params = params.clone();
    let mut step = resume_step;

    'outer: while step < total_steps {
        let epoch = step / steps_per_epoch as u64;
        let batches = epoch_batches(windows, tc, epoch);
        let skip = (step % steps_per_epoch as u64) as usize;
        for batch_windows in batches.into_iter().skip(skip) {
            let batch = build_batch(&batch_windows, histories, split, tc.loss_mask)?;
            let lr = lr_at(step as usize + 1, &tc_resolved);
            let dropout_seed = seeds::mix3(tc.seed, DROPOUT, step);
            let (loss, mut grads) =
                loss_and_grads(&params, &batch.inputs, &batch.targets, batch.rows, dropout_seed)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            clip_gradients(&mut grads, tc.clip_norm)?;
            adamw_step(&mut params, &grads, &mut adam, tc, lr, step + 1)?;
            step += 1;

            let mut entry = TraceEntry { step, lr, train_loss: loss, eval_loss: None };
            if step % tc.eval_interval as u64 == 0 || step == total_steps {
                let ev = if eval_windows.is_empty() {
                    None
                } else {
                    Some(evaluate_windows(&params, histories, split, eval_windows, tc)?)
                };
                entry.eval_loss = ev;
                let is_best = match (ev, best) {
                    (Some(e), Some((_, b))) => e < b,
                    (Some(_), None) => true,
                    (None, _) => true, // no eval signal: latest wins
                };
                if is_best {
                    best = ev.map(|e| (step, e));
                    best_params = params.clone();
                }
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("ckpt_step{step}.geof"));
                    let ckpt = Checkpoint::new(params.clone(), adam.clone(), step, tc.seed);
                    save_checkpoint(&path, &ckpt)?;
                    checkpoint_paths.push(path);
                    if is_best {
                        std::fs::write(dir.join("best"), format!("ckpt_step{step}.geof\n"))?;
                    }
                }
            }
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry).expect("trace serializes"))?;
            }
            trace.push(entry);
            if step >= total_steps {
                break 'outer;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }

    let (best_step, best_eval_loss) = match best {
        Some((s, l)) => (s, Some(l)),
        None => (step, None),
    };
    Ok(TrainOutcome {
        params,
        adam,
        step,
        trace,
        best_step,
        best_eval_loss,
        best_params,
        checkpoint_paths,
    })
}

/// Mean eval loss over the given windows (dropout off), batched like training.
pub fn evaluate_windows(
    params: &ModelParams<f32>,
    histories: &BTreeMap<u32, UserHistory>,
    split: &DatasetSplit,
    windows: &[TrainingWindow],
    tc: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in windows.chunks(tc.batch_size) {
        let batch = build_batch(chunk, histories, split, tc.loss_mask)?;
        let loss = eval_loss(params, &batch.inputs, &batch.targets, batch.rows)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Fine-tune from a checkpoint: optimizer moments reset, fresh schedule.
/// `windows` must lie entirely at or past the split horizon (the emergency
/// period); that bound is asserted.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    ckpt: Checkpoint,
    histories: &BTreeMap<u32, UserHistory>,
    split: &DatasetSplit,
    windows: &[TrainingWindow],
    eval_windows: &[TrainingWindow],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    for w in windows {
        assert!(
            w.start_day >= split.horizon_day,
            "fine-tune window for uid {} starts at day {} before horizon {}",
            w.uid,
            w.start_day,
            split.horizon_day
        );
    }
    let adam = AdamState::zeros_like(&ckpt.params);
    run_training(ckpt.params, adam, 0, histories, split, windows, eval_windows, tc, out_dir)
}

impl TrainConfig {
    /// Fine-tuning variant: warmup cut 10x, fresh cosine horizon.
    pub fn for_finetune(&self) -> TrainConfig {
        TrainConfig {
            warmup_steps: (self.warmup_steps / 10).max(1),
            total_steps: 0,
            ..self.clone()
        }
    }
}
