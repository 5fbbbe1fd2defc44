//! Prediction over a split, IoU tables and prediction dumps.

use std::fs;
use std::path::{Path, PathBuf};

use pfr_core::metrics::{ConfusionMatrix, MetricsError};
use pfr_core::models::{ModelError, SegNet};
use pfr_core::train::{predict, stack_images};
use pfr_core::Tensor;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataset::{self, DatasetError, DatasetInfo, Domain, Manifest, Split};
use crate::pnm::{self, PnmError};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Mismatch(String),
    #[error("no label files for {domain}/{split} under {root}")]
    MissingLabels { domain: Domain, split: Split, root: PathBuf },
}

/// Argmax predictions for every image, in order.
pub fn predict_all(net: &SegNet<f32>, images: &[Tensor<f32>]) -> Result<Vec<Vec<u8>>, ModelError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let batch = stack_images(&refs)?;
        let flat = predict(net, &batch)?;
        let per = flat.len() / chunk.len();
        out.extend(flat.chunks(per).map(<[u8]>::to_vec));
    }
    Ok(out)
}

pub fn confusion(num_classes: usize, preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<ConfusionMatrix, MetricsError> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in preds.iter().zip(labels) {
        cm.update(p, t)?;
    }
    Ok(cm)
}

/// `class,iou` header, one row per class (`absent` where undefined), then
/// `miou,<value>`.
pub fn iou_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in cm.iou_per_class().iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("{c},{v:.6}\n")),
            None => out.push_str(&format!("{c},absent\n")),
        }
    }
    match cm.miou() {
        Some(m) => out.push_str(&format!("miou,{m:.6}\n")),
        None => out.push_str("miou,absent\n"),
    }
    out
}

/// Per-class IoU (`None` for absent) and mIoU from an [`iou_csv`] table.
pub fn parse_iou_csv(text: &str) -> Result<(Vec<Option<f64>>, Option<f64>), String> {
    let mut lines = text.lines();
    if lines.next() != Some("class,iou") {
        return Err("missing `class,iou` header".into());
    }
    let value = |v: &str| -> Result<Option<f64>, String> {
        if v == "absent" {
            Ok(None)
        } else {
            v.parse().map(Some).map_err(|_| format!("bad value {v:?}"))
        }
    };
    let mut classes = Vec::new();
    for line in lines {
        let (key, v) = line.split_once(',').ok_or_else(|| format!("bad row {line:?}"))?;
        if key == "miou" {
            return Ok((classes, value(v)?));
        }
        if key.parse::<usize>() != Ok(classes.len()) {
            return Err(format!("unexpected class key {key:?}"));
        }
        classes.push(value(v)?);
    }
    Err("missing miou row".into())
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub domain: Domain,
    pub split: Split,
    pub dump_preds: Option<&'a Path>,
}

/// Evaluates a checkpoint on one split; optionally writes one P5 PGM of
/// predicted classes per image.
pub fn evaluate(req: &EvalRequest<'_>) -> Result<ConfusionMatrix, EvalError> {
    let info = DatasetInfo::load(req.data)?;
    let ck = Checkpoint::load(req.checkpoint, (info.image_size, info.image_size))?;
    let classes = ck.seg.config().num_classes;
    if classes != info.num_classes {
        return Err(EvalError::Mismatch(format!(
            "checkpoint predicts {classes} classes but the dataset has {}",
            info.num_classes
        )));
    }
    let manifest = Manifest::load(req.data)?;
    if !dataset::labels_present(req.data, &manifest, req.domain, req.split) {
        return Err(EvalError::MissingLabels {
            domain: req.domain,
            split: req.split,
            root: req.data.into(),
        });
    }
    let images = dataset::load_images(req.data, &manifest, req.domain, req.split)?;
    let labels = dataset::load_labels(req.data, &manifest, req.domain, req.split)?;
    let preds = predict_all(&ck.seg, &images)?;
    if let Some(dir) = req.dump_preds {
        fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.into(),
            source,
        })?;
        for (row, p) in manifest.select(req.domain, req.split).iter().zip(&preds) {
            let path = dir.join(format!("{}_{}_{:04}.pgm", req.domain, req.split, row.index));
            pnm::write_pgm(&path, info.image_size, info.image_size, p)?;
        }
    }
    Ok(confusion(classes, &preds, &labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_class_plus_miou() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        let csv = iou_csv(&cm);
        assert_eq!(csv, "class,iou\n0,0.500000\n1,0.666667\n2,absent\nmiou,0.583333\n");
        assert_eq!(csv.lines().count() - 1, 3 + 1);
        let (classes, miou) = parse_iou_csv(&csv).unwrap();
        assert_eq!(classes, vec![Some(0.5), Some(0.666667), None]);
        assert_eq!(miou, Some(0.583333));
        assert!(parse_iou_csv("class,iou\n1,0.5\nmiou,0.5\n").is_err());
    }
}
