//! Training recipe: per-sample L1 with online hard example mining, Adam,
//! epoch-wise learning-rate schedules and validation-based selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{assemble_batch, make_batches, stream_seed, BatchItem, Dataset};
use crate::error::{Error, Result};
use crate::gaze::{angular_error_deg, GazeLabel};
use crate::models::{Family, GazeModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{no_grad, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Schedule {
    Exponential { gamma: f64 },
    Step { milestones: Vec<usize>, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhemConfig {
    pub enabled: bool,
    pub fraction: f64,
    pub factor: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            enabled: false,
            fraction: 0.3,
            factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    #[serde(default)]
    pub ohem: OhemConfig,
    #[serde(default)]
    pub flip_augment: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale hyperparameters, with the 8-GPU batch and learning rate
    /// flattened into one effective batch.
    pub fn reference_preset(family: Family) -> Self {
        let (batch_size, lr0) = match family {
            Family::ItrackerMhsa => (30 * 8, 1e-4 * 8.0),
            Family::Botnet => (24 * 8, 1e-4 * 8.0),
            Family::Resnest => (12 * 8, 1e-4 * 8.0),
            Family::Hrnet => (24 * 8, 2.5e-5 * 8.0),
        };
        TrainConfig {
            batch_size,
            lr0,
            epochs: if family == Family::Resnest { 10 } else { 15 },
            ..Self::recipe(family)
        }
    }

    /// Single-CPU settings for the synthetic set.
    pub fn desk_preset(family: Family) -> Self {
        let lr0 = match family {
            Family::Hrnet => 1e-3,
            _ => 2e-3,
        };
        TrainConfig {
            batch_size: 32,
            lr0,
            epochs: 15,
            ..Self::recipe(family)
        }
    }

    fn recipe(family: Family) -> Self {
        let hr = family == Family::Hrnet;
        TrainConfig {
            batch_size: 32,
            lr0: 1e-3,
            schedule: if hr {
                Schedule::Step {
                    milestones: vec![8, 12],
                    factor: 0.1,
                }
            } else {
                Schedule::Exponential { gamma: 0.8 }
            },
            epochs: 15,
            ohem: OhemConfig {
                enabled: family == Family::ItrackerMhsa,
                ..OhemConfig::default()
            },
            flip_augment: hr,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        match &self.schedule {
            Schedule::Exponential { gamma } if !(gamma.is_finite() && *gamma > 0.0) => {
                return bad(format!("gamma must be positive, got {gamma}"));
            }
            Schedule::Step { milestones, factor } => {
                if !(factor.is_finite() && *factor > 0.0) {
                    return bad(format!("step factor must be positive, got {factor}"));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("milestones {milestones:?} must be strictly increasing"));
                }
            }
            _ => {}
        }
        let o = &self.ohem;
        if !(o.fraction > 0.0 && o.fraction <= 1.0) || !(o.factor >= 1.0 && o.factor.is_finite()) {
            return bad(format!(
                "ohem fraction must be in (0, 1] and factor ≥ 1, got {} and {}",
                o.fraction, o.factor
            ));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &Schedule, lr0: f64, epoch: usize) -> f64 {
    match schedule {
        Schedule::Exponential { gamma } => lr0 * gamma.powi(epoch as i32),
        Schedule::Step { milestones, factor } => {
            lr0 * factor.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
        }
    }
}

/// Number of hard examples amplified in a batch of `b`.
pub fn ohem_count(b: usize, fraction: f64) -> usize {
    ((fraction * b as f64).floor() as usize).clamp(1, b)
}

/// Sample order by descending loss, lower index first on ties.
fn hardest_first<T: Real>(losses: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&i, &j| losses[j].partial_cmp(&losses[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    order
}

/// Correctly rounded sum of `values`, so the result is independent of their
/// order. Non-finite inputs fall back to plain summation.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut plain = 0.0;
    for mut x in values {
        plain += x;
        if !x.is_finite() {
            continue;
        }
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    if !plain.is_finite() {
        return plain;
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // round half to even when the remaining partials push past the tie
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

fn reduce_mean<T: Real>(losses: &Tensor<T>, weights: Vec<T>) -> Tensor<T> {
    let b = losses.numel();
    let total = {
        let data = losses.data();
        exact_sum(data.iter().zip(&weights).map(|(&l, &w)| (l * w).f64()))
    };
    let value = T::c(total) / T::c(b as f64);
    let inv_b = T::one() / T::c(b as f64);
    Tensor::from_op(vec![], vec![value], vec![losses.clone()], move |ctx| {
        let g = ctx.grad[0] * inv_b;
        vec![Some(weights.iter().map(|&w| g * w).collect())]
    })
}

fn check_losses<T: Real>(losses: &Tensor<T>) -> Result<()> {
    if losses.rank() != 1 || losses.numel() == 0 {
        return Err(Error::Input(format!("expected a non-empty [B] loss vector, got {:?}", losses.shape())));
    }
    Ok(())
}

/// Mean of per-sample losses, exactly rounded and independent of their order.
pub fn mean_loss<T: Real>(losses: &Tensor<T>) -> Result<Tensor<T>> {
    check_losses(losses)?;
    Ok(reduce_mean(losses, vec![T::one(); losses.numel()]))
}

/// Mean of per-sample losses after multiplying the `k` largest by `factor`.
/// The weighted sum is exactly rounded, so the value does not depend on the
/// order of the input and `factor = 1` reproduces [`mean_loss`].
pub fn ohem_weights<T: Real>(losses: &Tensor<T>, fraction: f64, factor: f64) -> Result<Tensor<T>> {
    check_losses(losses)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("OHEM fraction {fraction} outside (0, 1]")));
    }
    let b = losses.numel();
    let k = ohem_count(b, fraction);
    let order = hardest_first(&losses.to_vec());
    let mut weights = vec![T::one(); b];
    for &i in &order[..k] {
        weights[i] = T::c(factor);
    }
    Ok(reduce_mean(losses, weights))
}

/// One epoch in the log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error_deg: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Lowest validation error, earliest epoch on ties; `None` without epochs.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_error_deg,lr";

    /// Line-oriented CSV without wall-clock times, so identical runs give
    /// identical text.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_error_deg, r.lr));
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e])
    }
}

/// Batch plan for one epoch; the shuffle seed depends on the run seed and
/// the epoch only.
pub fn epoch_plan(cfg: &TrainConfig, n: usize, epoch: usize) -> Result<Vec<Vec<BatchItem>>> {
    make_batches(n, cfg.batch_size, stream_seed(cfg.seed, epoch as u64, 0x5EED), cfg.flip_augment)
}

/// Scalar training loss for a batch: per-sample L1, then OHEM or a plain mean.
pub fn batch_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, ohem: &OhemConfig) -> Result<Tensor<T>> {
    let per_sample = pred.l1_per_sample(target)?;
    if ohem.enabled {
        ohem_weights(&per_sample, ohem.fraction, ohem.factor)
    } else {
        mean_loss(&per_sample)
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

pub fn fit<T: Real>(model: &GazeModel<T>, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_with(model, train, val, cfg, |_| {})
}

/// Trains `model` in place and leaves it holding the best epoch's weights.
/// `on_epoch` sees every record as soon as validation finishes.
pub fn fit_with<T: Real>(
    model: &GazeModel<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let val_subjects = val.subjects();
    if let Some(s) = train.subjects().intersection(&val_subjects).next() {
        return Err(Error::Data(format!("subject {s} appears in both training and validation sets")));
    }
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Vec<Vec<T>>)> = None;
    let mut adam = Adam::new(model.store(), AdamConfig::default());
    let size = model.config.input_size;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(&cfg.schedule, cfg.lr0, epoch);
        let plan = epoch_plan(cfg, train.len(), epoch)?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, items) in plan.iter().enumerate() {
            let (batch, target) = assemble_batch::<T>(&train.samples, items, size)?;
            let pred = model.forward(&batch)?;
            let loss = batch_loss(&pred, &target, &cfg.ohem)?;
            let value = loss.item().f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {value} at epoch {epoch}, batch {bi}, lr {lr:e}"
                )));
            }
            model.store().zero_grad();
            loss.backward()?;
            adam.step(model.store(), lr).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, batch {bi}, lr {lr:e})")),
                other => other,
            })?;
            loss_sum += value * items.len() as f64;
            seen += items.len();
        }
        let eval = evaluate(model, val, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_error_deg: eval.mean_deg,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|(b, _)| eval.mean_deg < *b) {
            best = Some((eval.mean_deg, model.store().snapshot()));
            report.best_epoch = Some(epoch);
        }
        on_epoch(&rec);
        report.epochs.push(rec);
    }
    if let Some((_, weights)) = &best {
        model.store().restore(weights)?;
    }
    Ok(FitOutcome {
        checkpoint: model.to_checkpoint(),
        report,
    })
}

/// Model outputs in dataset order.
pub fn predict<T: Real>(model: &GazeModel<T>, ds: &Dataset, batch_size: usize) -> Result<Vec<GazeLabel>> {
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(bs) {
        let items: Vec<BatchItem> = (start..(start + bs).min(ds.len()))
            .map(|index| BatchItem { index, flipped: false })
            .collect();
        let (batch, _) = assemble_batch::<T>(&ds.samples, &items, model.config.input_size)?;
        let pred = no_grad(|| model.forward(&batch))?;
        out.extend(pred.to_f64_vec().chunks_exact(2).map(|p| GazeLabel::new(p[0], p[1])));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_deg: f64,
    pub per_sample_deg: Vec<f64>,
}

/// Angular errors per pair and their mean, summed in index order.
pub fn score_predictions(pred: &[GazeLabel], truth: &[GazeLabel]) -> Result<Evaluation> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Input(format!(
            "cannot score {} predictions against {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let per_sample_deg: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| angular_error_deg(*p, *t)).collect();
    let mean_deg = per_sample_deg.iter().sum::<f64>() / per_sample_deg.len() as f64;
    Ok(Evaluation {
        mean_deg,
        per_sample_deg,
    })
}

pub fn evaluate<T: Real>(model: &GazeModel<T>, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    score_predictions(&predict(model, ds, batch_size)?, &ds.labels())
}

/// Error of always predicting the mean training label.
pub fn mean_label_baseline(train: &Dataset, val: &Dataset) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("baseline needs non-empty sets".into()));
    }
    let n = train.len() as f64;
    let mean = train
        .labels()
        .iter()
        .fold(GazeLabel::new(0.0, 0.0), |a, l| GazeLabel::new(a.pitch + l.pitch, a.yaw + l.yaw));
    let guess = GazeLabel::new(mean.pitch / n, mean.yaw / n);
    Ok(score_predictions(&vec![guess; val.len()], &val.labels())?.mean_deg)
}
