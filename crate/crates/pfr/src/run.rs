//! The training loop over an on-disk dataset.
//!
//! A run directory receives:
//!
//! | file | contents |
//! |---|---|
//! | `config.ini` | the resolved configuration |
//! | `runlog.csv` | one loss row per step |
//! | `ckpt_{step:06}.pfrc` | parameters every `eval_every` steps |
//! | `final.pfrc` | parameters after the last step |
//! | `eval.csv` | validation mIoU snapshots |
//! | `metrics_{domain}_val.csv` | final per-class IoU |
//! | `timing.csv` | wall-clock seconds at each snapshot |
//!
//! The first four are the training artifacts: they depend only on the
//! configuration, the source data and the target images. Target labels
//! are read solely for the validation snapshots and final metrics, which
//! are skipped when the label files are missing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pfr_core::losses::LossBreakdown;
use pfr_core::metrics::ConfusionMatrix;
use pfr_core::models::{DiscriminatorConfig, SegNetConfig};
use pfr_core::train::{
    derive_seed, stack_images, EpochSampler, SourceBatch, TargetBatch, TrainError, Trainer,
    STREAM_SOURCE_ORDER, STREAM_TARGET_ORDER,
};
use pfr_core::Tensor;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::dataset::{self, DatasetError, DatasetInfo, Domain, Manifest, Split};
use crate::eval::{confusion, iou_csv, predict_all, EvalError};
use crate::runlog;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.into(),
        source,
    }
}

pub const TRAINING_ARTIFACTS: [&str; 2] = ["config.ini", "runlog.csv"];

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.pfrc")
}

/// Steps after which a checkpoint is written: multiples of `eval_every`
/// below `iterations`, then `iterations` itself (as `final.pfrc`).
pub fn checkpoint_steps(iterations: usize, eval_every: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (1..)
        .map(|k| k * eval_every)
        .take_while(|&s| s < iterations)
        .collect();
    steps.push(iterations);
    steps
}

struct ValSplit {
    domain: Domain,
    images: Vec<Tensor<f32>>,
    labels: Vec<Vec<u8>>,
}

/// mIoU of each evaluated domain at the end of training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_miou: Vec<(Domain, Option<f64>)>,
    pub losses: Vec<LossBreakdown>,
}

impl RunSummary {
    pub fn miou(&self, domain: Domain) -> Option<f64> {
        self.final_miou
            .iter()
            .find(|(d, _)| *d == domain)
            .and_then(|(_, m)| *m)
    }
}

fn batch_of(images: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>, RunError> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &images[i]).collect();
    stack_images(&refs).map_err(|e| RunError::Invalid(e.to_string()))
}

/// Trains on `data_dir`, writing the run directory `out_dir`. Diagnostics go
/// to `log`.
pub fn train_loop(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<RunSummary, RunError> {
    let t = &cfg.train;
    t.validate()?;
    let info = DatasetInfo::load(data_dir)?;
    let manifest = Manifest::load(data_dir)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("config.ini");
    fs::write(&path, cfg.to_ini()).map_err(io_err(&path))?;

    let src_images = dataset::load_images(data_dir, &manifest, Domain::Source, Split::Train)?;
    let src_labels = dataset::load_labels(data_dir, &manifest, Domain::Source, Split::Train)?;
    let tgt_images = dataset::load_images(data_dir, &manifest, Domain::Target, Split::Train)?;
    if src_images.is_empty() || tgt_images.is_empty() {
        return Err(RunError::Invalid("both domains need training images".into()));
    }
    if t.paired_debug && src_images.len() != tgt_images.len() {
        return Err(RunError::Invalid("paired_debug needs equally sized training splits".into()));
    }

    let mut val = Vec::new();
    for domain in Domain::ALL {
        if dataset::labels_present(data_dir, &manifest, domain, Split::Val) {
            val.push(ValSplit {
                domain,
                images: dataset::load_images(data_dir, &manifest, domain, Split::Val)?,
                labels: dataset::load_labels(data_dir, &manifest, domain, Split::Val)?,
            });
        } else {
            let _ = writeln!(log, "warning: {domain} validation labels missing, skipping {domain} evaluation");
        }
    }

    let seg_config = SegNetConfig {
        stage_channels: cfg.stage_channels,
        num_classes: info.num_classes,
        in_channels: 3,
        input_height: info.image_size,
        input_width: info.image_size,
    };
    let disc_config = DiscriminatorConfig {
        num_classes: info.num_classes,
        hidden_channels: cfg.disc_channels,
    };
    let mut trainer = Trainer::new(t.clone(), seg_config, disc_config)?;
    let mut src_order = EpochSampler::new(src_images.len(), derive_seed(t.seed, STREAM_SOURCE_ORDER));
    let mut tgt_order = EpochSampler::new(tgt_images.len(), derive_seed(t.seed, STREAM_TARGET_ORDER));

    let create = |name: &str| -> Result<BufWriter<fs::File>, RunError> {
        let path = out_dir.join(name);
        Ok(BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?))
    };
    let mut runlog_file = create("runlog.csv")?;
    let mut eval_file = create("eval.csv")?;
    let mut timing_file = create("timing.csv")?;
    let write = |w: &mut BufWriter<fs::File>, name: &str, line: &str| -> Result<(), RunError> {
        writeln!(w, "{line}").map_err(io_err(&out_dir.join(name)))
    };
    write(&mut runlog_file, "runlog.csv", runlog::HEADER)?;
    let classes: Vec<String> = (0..info.num_classes).map(|c| format!("iou_{c}")).collect();
    write(&mut eval_file, "eval.csv", &format!("step,domain,miou,{}", classes.join(",")))?;
    write(&mut timing_file, "timing.csv", "step,elapsed_s")?;

    let start = Instant::now();
    let snapshot = |trainer: &Trainer, step: usize, eval_file: &mut BufWriter<fs::File>, log: &mut dyn Write| -> Result<Vec<(Domain, ConfusionMatrix)>, RunError> {
        let mut out = Vec::new();
        let mut summary = format!("step {step}");
        for v in &val {
            let preds = predict_all(trainer.seg_net(), &v.images).map_err(EvalError::from)?;
            let cm = confusion(info.num_classes, &preds, &v.labels).map_err(EvalError::from)?;
            let fmt = |x: Option<f64>| x.map_or("absent".to_string(), |m| format!("{m:.6}"));
            let per: Vec<String> = cm.iou_per_class().into_iter().map(fmt).collect();
            writeln!(eval_file, "{step},{},{},{}", v.domain, fmt(cm.miou()), per.join(","))
                .map_err(io_err(&out_dir.join("eval.csv")))?;
            summary.push_str(&format!(" {}_miou={}", v.domain, fmt(cm.miou())));
            out.push((v.domain, cm));
        }
        let _ = writeln!(log, "{summary} ({:.1}s)", start.elapsed().as_secs_f64());
        Ok(out)
    };

    snapshot(&trainer, 0, &mut eval_file, log)?;
    let save_at = checkpoint_steps(t.iterations, t.eval_every);
    let mut losses = Vec::with_capacity(t.iterations);
    let mut last = Vec::new();
    for step in 1..=t.iterations {
        let si = src_order.next_batch(t.batch_size);
        let ti = if t.paired_debug {
            si.clone()
        } else {
            tgt_order.next_batch(t.batch_size)
        };
        let src = SourceBatch {
            images: batch_of(&src_images, &si)?,
            labels: si.iter().flat_map(|&i| src_labels[i].iter().copied()).collect(),
        };
        let tgt = TargetBatch {
            images: batch_of(&tgt_images, &ti)?,
        };
        let l = trainer.train_step(&src, &tgt)?;
        write(&mut runlog_file, "runlog.csv", &runlog::format_row(step, &l))?;
        losses.push(l);

        if save_at.contains(&step) {
            let ck = Checkpoint {
                seg: trainer.seg_net().clone(),
                disc: trainer.discriminator().clone(),
            };
            let name = if step == t.iterations {
                "final.pfrc".to_string()
            } else {
                checkpoint_name(step)
            };
            ck.save(&out_dir.join(name))?;
            last = snapshot(&trainer, step, &mut eval_file, log)?;
            write(
                &mut timing_file,
                "timing.csv",
                &format!("{step},{:.3}", start.elapsed().as_secs_f64()),
            )?;
        }
    }
    if t.iterations == 0 {
        let ck = Checkpoint {
            seg: trainer.seg_net().clone(),
            disc: trainer.discriminator().clone(),
        };
        ck.save(&out_dir.join("final.pfrc"))?;
        last = snapshot(&trainer, 0, &mut eval_file, log)?;
    }
    for (name, f) in [
        ("runlog.csv", &mut runlog_file),
        ("eval.csv", &mut eval_file),
        ("timing.csv", &mut timing_file),
    ] {
        f.flush().map_err(io_err(&out_dir.join(name)))?;
    }

    let mut final_miou = Vec::new();
    for (domain, cm) in &last {
        let path = out_dir.join(format!("metrics_{domain}_val.csv"));
        fs::write(&path, iou_csv(cm)).map_err(io_err(&path))?;
        final_miou.push((*domain, cm.miou()));
    }
    Ok(RunSummary { final_miou, losses })
}
