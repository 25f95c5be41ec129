//! Multi-run experiments: single training runs, variant ablations, head sweeps
//! and adjacency inspection.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError, Dataset, Sample};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelError, Variant};
use crate::params::{Graph, Mode};
use crate::tensor::{Tensor, TensorError};
use crate::train::{self, TrainError, TrainOutcome};
use crate::trg::{AdjacencyStack, SeqShape};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sample index {index} out of range for {len} samples")]
    Index { index: usize, len: usize },
    #[error("dataset does not match the config: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Generates the train and validation splits of a config in memory.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let generator = cfg.validate()?;
    Ok((
        generator.generate(cfg.train_samples, cfg.data_seed(0)),
        generator.generate(cfg.val_samples, cfg.data_seed(1)),
    ))
}

pub fn load_splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        data::read_dataset(&dir.join("train.trgd"))?,
        data::read_dataset(&dir.join("val.trgd"))?,
    ))
}

/// Trains one model of `cfg.variant` from the `"init"` stream of `cfg.seed`.
pub fn run(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    on_report: impl FnMut(&MetricsReport),
) -> Result<(Model<f32>, TrainOutcome)> {
    cfg.validate()?;
    let mut model = Model::<f32>::build(cfg.model(), cfg.seed)?;
    let outcome = train::train(&mut model, train_set, val_set, &cfg.train_config(), on_report)?;
    Ok((model, outcome))
}

pub fn checkpoint(cfg: &RunConfig, model: &Model<f32>) -> Checkpoint {
    Checkpoint::from_store(cfg.to_json(), &model.store)
}

/// Restores the model and the run config stored in a checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(RunConfig, Model<f32>)> {
    let cfg = RunConfig::from_json(&ck.config)?;
    let model = ck.restore(cfg.model())?;
    Ok((cfg, model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub top1: f64,
    pub top5: f64,
}

/// Final validation metrics of one variant run with `cfg`'s seed and schedule.
pub fn variant_row(cfg: &RunConfig, variant: Variant, train_set: &Dataset, val_set: &Dataset) -> Result<ResultRow> {
    let c = RunConfig {
        variant,
        ..cfg.clone()
    };
    let (_, out) = run(&c, train_set, val_set, |_| {})?;
    Ok(ResultRow {
        label: variant.name().to_string(),
        top1: out.final_val.top1,
        top5: out.final_val.top5,
    })
}

/// One row per variant, all sharing data, seed and schedule.
pub fn ablate(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset) -> Result<Vec<ResultRow>> {
    Variant::ALL.into_iter().map(|v| variant_row(cfg, v, train_set, val_set)).collect()
}

/// Full-variant runs for each head count.
pub fn sweep_heads(cfg: &RunConfig, heads: &[usize], train_set: &Dataset, val_set: &Dataset) -> Result<Vec<ResultRow>> {
    heads
        .iter()
        .map(|&n| {
            let c = RunConfig {
                heads: n,
                ..cfg.clone()
            };
            let mut row = variant_row(&c, Variant::Full, train_set, val_set)?;
            row.label = n.to_string();
            Ok(row)
        })
        .collect()
}

/// CSV with `key_name,top1,top5` columns, 6-decimal values, LF endings.
pub fn write_rows<W: Write>(out: W, key_name: &str, rows: &[ResultRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([key_name, "top1", "top5"])?;
    for r in rows {
        w.write_record([r.label.clone(), format!("{:.6}", r.top1), format!("{:.6}", r.top5)])?;
    }
    w.flush()?;
    Ok(())
}

/// Eval-mode adjacency stacks of every TRG layer for one clip `[T, C_in, H, W]`.
pub fn clip_adjacency(model: &Model<f32>, clip: &Tensor<f32>) -> Result<Vec<AdjacencyStack<f32>>> {
    let t = clip.shape()[0];
    let mut g = Graph::new(&model.store, Mode::Eval);
    let x = g.constant(clip.clone());
    let mut x = model.backbone(&mut g, x)?;
    let (c, h, w) = model.config.feature_dims();
    let s = SeqShape {
        batch: 1,
        frames: t,
        channels: c,
        height: h,
        width: w,
    };
    let mut stacks = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        stacks.push(layer.adjacency_stack(&model.store, g.value(x))?);
        x = layer.forward(&mut g, x, s)?.out;
    }
    Ok(stacks)
}

/// Adjacency stacks for sample `index` of `ds`, using the first evaluation clip.
pub fn inspect_adjacency(
    model: &Model<f32>,
    cfg: &RunConfig,
    ds: &Dataset,
    index: usize,
) -> Result<Vec<AdjacencyStack<f32>>> {
    let sample: &Sample = ds.samples.get(index).ok_or(ExperimentError::Index {
        index,
        len: ds.len(),
    })?;
    let h = &ds.header;
    if (h.channels, h.height, h.width) != (cfg.in_channels, cfg.height, cfg.width) {
        return Err(ExperimentError::Mismatch(format!(
            "frames are {}x{}x{}, checkpoint expects {}x{}x{}",
            h.channels, h.height, h.width, cfg.in_channels, cfg.height, cfg.width
        )));
    }
    let sampling = cfg.sampling();
    let idx = sampling
        .eval_indices(h.total_frames, 0, 1)
        .map_err(|e| ExperimentError::Mismatch(e.to_string()))?;
    let mut buf = Vec::new();
    data::gather(sample, h, &idx, &mut buf);
    let clip = Tensor::new(&[idx.len(), h.channels, h.height, h.width], buf)?;
    clip_adjacency(model, &clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> RunConfig {
        RunConfig {
            height: 8,
            width: 8,
            frames: 4,
            hidden_channels: 4,
            channels: 4,
            heads: 2,
            train_samples: 24,
            val_samples: 12,
            epochs: 2,
            drop_epoch: 1,
            initial_lr: 0.05,
            ..RunConfig::default()
        }
    }

    #[test]
    fn ablation_has_one_row_per_variant_and_is_repeatable() {
        let cfg = tiny();
        let (tr, va) = generate_splits(&cfg).unwrap();
        let a = ablate(&cfg, &tr, &va).unwrap();
        assert_eq!(a.len(), 4);
        let labels: Vec<&str> = a.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["avgpool", "concat", "elemavg", "full"]);
        let again = variant_row(&cfg, Variant::Avgpool, &tr, &va).unwrap();
        assert_eq!(again, a[0]);
        let mut buf = Vec::new();
        write_rows(&mut buf, "variant", &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("variant,top1,top5\n"));
    }

    #[test]
    fn sweep_row_matches_direct_run() {
        let cfg = tiny();
        let (tr, va) = generate_splits(&cfg).unwrap();
        let rows = sweep_heads(&cfg, &[1, 3], &tr, &va).unwrap();
        assert_eq!(rows.len(), 2);
        let direct = variant_row(
            &RunConfig {
                heads: 1,
                ..cfg.clone()
            },
            Variant::Full,
            &tr,
            &va,
        )
        .unwrap();
        assert_eq!((rows[0].top1, rows[0].top5), (direct.top1, direct.top5));
        assert_eq!(rows[0].label, "1");
    }

    #[test]
    fn adjacency_of_a_checkpointed_model() {
        let cfg = tiny();
        let (tr, va) = generate_splits(&cfg).unwrap();
        let (model, _) = run(&cfg, &tr, &va, |_| {}).unwrap();
        let ck = Checkpoint::decode(&checkpoint(&cfg, &model).encode()).unwrap();
        let (cfg2, restored) = restore(&ck).unwrap();
        assert_eq!(cfg2, cfg);
        let stacks = inspect_adjacency(&restored, &cfg2, &va, 3).unwrap();
        assert_eq!(stacks.len(), 1);
        assert_eq!(stacks[0].heads, 2);
        let (dev, bounded) = stacks[0].stochastic_error();
        assert!(dev < 1e-5 && bounded);
        assert!(matches!(
            inspect_adjacency(&restored, &cfg2, &va, 99),
            Err(ExperimentError::Index { index: 99, len: 12 })
        ));
    }

    #[test]
    fn single_frame_clip_gives_unit_adjacency() {
        let model = Model::<f32>::build(
            ModelConfig {
                frames: 1,
                height: 8,
                width: 8,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let clip = Tensor::from_fn(&[1, 3, 8, 8], |i| (i % 7) as f32 * 0.1);
        let stacks = clip_adjacency(&model, &clip).unwrap();
        assert!(stacks[0].values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_frames_give_uniform_adjacency() {
        let model = Model::<f32>::build(
            ModelConfig {
                frames: 5,
                height: 8,
                width: 8,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let frame: Vec<f32> = (0..3 * 64).map(|i| ((i * 37) % 11) as f32 * 0.1).collect();
        let clip = Tensor::new(&[5, 3, 8, 8], frame.repeat(5)).unwrap();
        for stack in clip_adjacency(&model, &clip).unwrap() {
            assert!(stack.values.iter().all(|&v| (v - 0.2).abs() < 1e-6));
        }
    }
}
