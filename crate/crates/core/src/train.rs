//! Mini-batch training, multi-clip evaluation and per-epoch metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{gather, Dataset, Label, Sampling};
use crate::metrics::{self, MetricError, MetricsReport, Split};
use crate::model::{LabelMode, Model, ModelError, Targets};
use crate::optim::{OptimError, Schedule, Sgd, SgdConfig};
use crate::params::{Graph, Mode};
use crate::parallel;
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("dataset does not fit the model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub sampling: Sampling,
    /// Clips averaged per sample at evaluation.
    pub eval_clips: usize,
    pub seed: u64,
}

/// Evaluation result with the clip-averaged class probabilities per sample.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub map: Option<f64>,
    pub scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<MetricsReport>,
    pub best_val_top1: f64,
    pub final_val: Evaluation,
}

fn check_compat(model: &Model<f32>, ds: &Dataset, sampling: &Sampling) -> Result<(), TrainError> {
    let (h, c) = (&ds.header, &model.config);
    if (h.channels, h.height, h.width) != (c.in_channels, c.height, c.width) {
        return Err(TrainError::Incompatible(format!(
            "frames are {}x{}x{}, model expects {}x{}x{}",
            h.channels, h.height, h.width, c.in_channels, c.height, c.width
        )));
    }
    if h.classes != c.classes || h.label_mode != c.label_mode {
        return Err(TrainError::Incompatible(format!(
            "dataset has {} classes ({:?}), model expects {} ({:?})",
            h.classes, h.label_mode, c.classes, c.label_mode
        )));
    }
    if sampling.frames != c.frames {
        return Err(TrainError::Incompatible(format!(
            "sampling draws {} frames, model expects {}",
            sampling.frames, c.frames
        )));
    }
    sampling.validate(h.total_frames).map_err(|e| TrainError::Incompatible(e.to_string()))?;
    if ds.is_empty() {
        return Err(TrainError::Metric(MetricError::Empty));
    }
    Ok(())
}

fn targets(ds: &Dataset, idx: &[usize]) -> Targets<f32> {
    match ds.header.label_mode {
        LabelMode::Single => Targets::Single(
            idx.iter()
                .map(|&i| match &ds.samples[i].label {
                    Label::Class(c) => *c as usize,
                    Label::Multi(_) => unreachable!("header says single-label"),
                })
                .collect(),
        ),
        LabelMode::Multi => {
            let k = ds.header.classes;
            let mut y = Vec::with_capacity(idx.len() * k);
            for &i in idx {
                match &ds.samples[i].label {
                    Label::Multi(v) => y.extend(v.iter().map(|&b| f32::from(b))),
                    Label::Class(_) => unreachable!("header says multi-label"),
                }
            }
            Targets::Multi(Tensor::new(&[idx.len(), k], y).expect("label matrix"))
        }
    }
}

/// Stacks the chosen frames of each sample into `[B·T, C, H, W]`.
fn assemble(ds: &Dataset, idx: &[usize], frames: impl Fn(usize) -> Vec<usize> + Sync) -> Tensor<f32> {
    let h = &ds.header;
    let parts = parallel::map_indices(idx.len(), |j| {
        let mut out = Vec::new();
        gather(&ds.samples[idx[j]], h, &frames(j), &mut out);
        out
    });
    let t = parts[0].len() / h.frame_len();
    Tensor::new(&[idx.len() * t, h.channels, h.height, h.width], parts.concat()).expect("batch shape")
}

fn probabilities(logits: &Tensor<f32>, mode: LabelMode) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            match mode {
                LabelMode::Single => {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / z).collect()
                }
                LabelMode::Multi => row.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            }
        })
        .collect()
}

fn score_metrics(ds: &Dataset, idx: &[usize], scores: &[Vec<f64>]) -> Result<(f64, f64, Option<f64>), MetricError> {
    let ranked: Vec<Vec<usize>> = scores.iter().map(|s| metrics::rank_classes(s)).collect();
    let truth: Vec<Vec<usize>> = idx.iter().map(|&i| ds.samples[i].label.positives()).collect();
    let top1 = metrics::topk_precision(&ranked, &truth, 1)?;
    let top5 = metrics::topk_precision(&ranked, &truth, 5)?;
    let map = match ds.header.label_mode {
        LabelMode::Single => None,
        LabelMode::Multi => {
            let labels: Vec<Vec<bool>> = idx
                .iter()
                .map(|&i| {
                    let mut l = vec![false; ds.header.classes];
                    for c in ds.samples[i].label.positives() {
                        l[c] = true;
                    }
                    l
                })
                .collect();
            Some(metrics::mean_average_precision(scores, &labels)?)
        }
    };
    Ok((top1, top5, map))
}

/// Eval-mode metrics with predictions averaged over `clips` deterministic clips.
pub fn evaluate(
    model: &Model<f32>,
    ds: &Dataset,
    sampling: &Sampling,
    clips: usize,
    batch_size: usize,
) -> Result<Evaluation, TrainError> {
    check_compat(model, ds, sampling)?;
    let clips = clips.max(1);
    let n = ds.len();
    let bs = batch_size.max(1);
    let batches: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(bs).map(<[usize]>::to_vec).collect();
    let total = ds.header.total_frames;
    let per_batch = parallel::map_indices(batches.len(), |b| -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let idx = &batches[b];
        let mut loss = 0.0;
        let mut acc: Vec<Vec<f64>> = vec![vec![0.0; ds.header.classes]; idx.len()];
        for c in 0..clips {
            let frames = sampling.eval_indices(total, c, clips).expect("validated sampling");
            let x = assemble(ds, idx, |_| frames.clone());
            let mut g = Graph::new(&model.store, Mode::Eval);
            let xv = g.constant(x);
            let step = |source| TrainError::Step { epoch: 0, step: b, source };
            let out = model.forward(&mut g, xv, idx.len())?;
            let l = model.loss(&mut g, out.logits, &targets(ds, idx)).map_err(|e| match e {
                ModelError::Tensor(t) => step(t),
                other => other.into(),
            })?;
            loss += f64::from(g.value(l).data()[0]) * idx.len() as f64;
            for (a, p) in acc.iter_mut().zip(probabilities(g.value(out.logits), ds.header.label_mode)) {
                for (x, y) in a.iter_mut().zip(p) {
                    *x += y / clips as f64;
                }
            }
        }
        Ok((loss / clips as f64, acc))
    });
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(n);
    for r in per_batch {
        let (l, s) = r?;
        loss += l;
        scores.extend(s);
    }
    let all: Vec<usize> = (0..n).collect();
    let (top1, top5, map) = score_metrics(ds, &all, &scores)?;
    Ok(Evaluation {
        loss: loss / n as f64,
        top1,
        top5,
        map,
        scores,
    })
}

/// Trains in place. Epoch 0 is an evaluation of the initial model; epochs
/// `1..=E` each add a train row (running averages over the epoch's batches)
/// and a validation row. `on_report` sees every row as it is produced.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_report: impl FnMut(&MetricsReport),
) -> Result<TrainOutcome, TrainError> {
    check_compat(model, train_set, &cfg.sampling)?;
    check_compat(model, val_set, &cfg.sampling)?;
    cfg.schedule.validate()?;
    if cfg.batch_size == 0 {
        return Err(TrainError::Incompatible("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut emit = |r: MetricsReport, reports: &mut Vec<MetricsReport>| {
        on_report(&r);
        reports.push(r);
    };
    let val_report = |epoch: usize, e: &Evaluation| MetricsReport {
        epoch,
        split: Split::Val,
        loss: e.loss,
        top1: e.top1,
        top5: e.top5,
        map: e.map,
        wall_time: start.elapsed().as_secs_f64(),
    };

    let mut last = evaluate(model, val_set, &cfg.sampling, cfg.eval_clips, cfg.eval_batch_size)?;
    emit(val_report(0, &last), &mut reports);
    let mut best = last.top1;

    let mut opt = Sgd::new(cfg.sgd);
    let n = train_set.len();
    let total = train_set.header.total_frames;
    let mut step = 0usize;
    for epoch in 1..=cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut scores = Vec::with_capacity(n);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let x = assemble(train_set, idx, |j| {
                let key = (epoch as u64) * n as u64 + idx[j] as u64;
                let mut r = rng::stream(cfg.seed, "sampling", key);
                cfg.sampling.train_indices(total, &mut r).expect("validated sampling")
            });
            let at = |source| TrainError::Step { epoch, step, source };
            let lift = |e: ModelError| match e {
                ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                ModelError::Tensor(t) => at(t),
                other => other.into(),
            };
            let (outcome, loss, logits) = {
                let mut g = Graph::new(&model.store, Mode::Train);
                let xv = g.constant(x);
                let out = model.forward(&mut g, xv, idx.len()).map_err(lift)?;
                let l = model.loss(&mut g, out.logits, &targets(train_set, idx)).map_err(lift)?;
                let loss = f64::from(g.value(l).data()[0]);
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch, step, loss });
                }
                let grads = g.backward(l).map_err(|e| lift(e.into()))?;
                let logits = g.value(out.logits).clone();
                (g.finish(grads), loss, logits)
            };
            model.store.absorb(outcome);
            opt.step(&mut model.store, lr)?;
            if model.store.iter().any(|(_, p)| !p.value.all_finite()) {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            loss_sum += loss * idx.len() as f64;
            scores.extend(probabilities(&logits, train_set.header.label_mode));
        }
        let (top1, top5, map) = score_metrics(train_set, &order, &scores)?;
        emit(
            MetricsReport {
                epoch,
                split: Split::Train,
                loss: loss_sum / n as f64,
                top1,
                top5,
                map,
                wall_time: start.elapsed().as_secs_f64(),
            },
            &mut reports,
        );
        last = evaluate(model, val_set, &cfg.sampling, cfg.eval_clips, cfg.eval_batch_size)?;
        best = best.max(last.top1);
        emit(val_report(epoch, &last), &mut reports);
    }
    Ok(TrainOutcome {
        reports,
        best_val_top1: best,
        final_val: last,
    })
}
