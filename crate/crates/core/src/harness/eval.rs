//! Scoring checkpoints and dumping intermediate maps.

use std::path::{Path, PathBuf};

use crate::boxops::{boxes_to_mask, build_proxy, decoupled_values, BoxRect};
use crate::checkpoint::Checkpoint;
use crate::data::{mask_to_boxes, write_pgm, DataSample};
use crate::error::{DataError, Result};
use crate::metrics::{dice_at, evaluate_image, summarize, ImageScores, Summary, BINARIZE_AT};
use crate::model::Model;
use crate::params::ParamSet;
use crate::teacher::{anchor_contrast, contrastive_map, make_anchors, select_features};
use crate::tensor::{area_downsample, bilinear_resize, Tape, Tensor};
use crate::teacher::{BACKGROUND_THRESHOLD, POLYP_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<ImageScores>,
    pub summary: Summary,
    /// Mean per-image dice of `pred > 0.5` against the box-filled GT mask.
    pub dice_box: f64,
    /// Mean feature contrast gap measured with ground-truth selection.
    pub feature_gap: Option<f64>,
}

/// Student parameters of a checkpoint: the `student/` section when present,
/// otherwise all records.
pub fn student_params(ckpt: &Checkpoint) -> ParamSet<f64> {
    let s = ckpt.section("student/");
    if s.is_empty() {
        ckpt.records.clone()
    } else {
        s
    }
}

/// Teacher parameters, falling back to the student's.
pub fn teacher_params(ckpt: &Checkpoint) -> ParamSet<f64> {
    let t = ckpt.section("teacher/");
    if t.is_empty() {
        student_params(ckpt)
    } else {
        t
    }
}

/// Mean cosine to the mean polyp feature over polyp positions minus that
/// over background positions, where positions are classified by the
/// block-averaged ground-truth mask (`>= 0.8` polyp, `< 0.5` background).
pub fn gt_feature_gap(f: &Tensor<f64>, gt_mask: &Tensor<f64>) -> Result<Option<f64>> {
    let (c, h) = (f.shape()[0], f.shape()[1]);
    let (gh, _) = gt_mask.hw()?;
    let conf = area_downsample(gt_mask, gh / h)?;
    let p = conf.len();
    let polyp: Vec<usize> = (0..p).filter(|&k| conf.data()[k] >= POLYP_THRESHOLD).collect();
    let background: Vec<usize> = (0..p).filter(|&k| conf.data()[k] < BACKGROUND_THRESHOLD).collect();
    if polyp.is_empty() || background.is_empty() {
        return Ok(None);
    }
    let d = f.data();
    let anchor = Tensor::from_fn(&[c], |ch| {
        polyp.iter().map(|&k| d[ch * p + k]).sum::<f64>() / polyp.len() as f64
    });
    Ok(Some(anchor_contrast(f, &anchor, &polyp, &background)?.gap()))
}

/// Scores `params` on every sample. Samples need a ground-truth mask.
/// With `gt_as_pred` the mask itself is scored as the prediction.
pub fn evaluate_samples(model: &Model, params: &ParamSet<f64>, samples: &[DataSample], gt_as_pred: bool) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut dice_box = 0.0;
    let mut gaps = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let gt = s.mask.as_ref().ok_or_else(|| DataError::Manifest {
            path: PathBuf::from(&s.name),
            line: i + 1,
            reason: "evaluation needs a ground-truth mask".into(),
        })?;
        let pred = if gt_as_pred {
            gt.clone()
        } else {
            let out = model.forward_teacher(params, &s.image)?;
            if let Some(g) = gt_feature_gap(&out.f, gt)? {
                gaps.push(g);
            }
            out.m
        };
        scores.push(evaluate_image(&s.name, &pred, gt)?);
        let (h, w) = gt.hw()?;
        let filled = boxes_to_mask(&mask_to_boxes(gt)?, h, w)?;
        dice_box += dice_at(&pred, &filled, BINARIZE_AT)?;
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        summary: summarize(&scores),
        scores,
        dice_box: dice_box / n,
        feature_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
    })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[DataSample], gt_as_pred: bool) -> Result<EvalReport> {
    let model = Model::new(ckpt.config.clone())?;
    evaluate_samples(&model, &student_params(ckpt), samples, gt_as_pred)
}

/// Intermediate maps for one image, all `S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    pub m: Tensor<f64>,
    pub p_m: Tensor<f64>,
    /// Present when boxes are given.
    pub p: Option<Tensor<f64>>,
    pub c: Option<Tensor<f64>>,
    /// Present when boxes are given and the teacher selects both classes.
    pub m_ctr: Option<Tensor<f64>>,
}

pub fn compute_maps(ckpt: &Checkpoint, image: &Tensor<f64>, boxes: Option<&[BoxRect]>) -> Result<MapSet> {
    let model = Model::new(ckpt.config.clone())?;
    let student = student_params(ckpt);
    let out = model.forward_teacher(&student, image)?;
    let p_m = decoupled_values(&out.m)?;
    let Some(boxes) = boxes else {
        return Ok(MapSet {
            m: out.m,
            p_m,
            p: None,
            c: None,
            m_ctr: None,
        });
    };
    let (h, w) = out.m.hw()?;
    let b = boxes_to_mask(boxes, h, w)?;
    let mut tape = Tape::detached();
    let mv = tape.constant(out.m.clone());
    let proxy = build_proxy(&mut tape, mv, &b, true)?;
    let p = tape.value(proxy.proxy).clone();

    let tea = model.forward_teacher(&teacher_params(ckpt), image)?;
    let sel = select_features(&tea.f, &b, &tea.m, POLYP_THRESHOLD, BACKGROUND_THRESHOLD)?;
    let anchors = make_anchors(&sel, &tea.f, None)?;
    let m_ctr = if anchors.valid {
        let f = tape.constant(out.f.clone());
        let map = contrastive_map(&mut tape, f, &anchors)?;
        Some(bilinear_resize(tape.value(map), h, w)?)
    } else {
        None
    };
    Ok(MapSet {
        m: out.m,
        p_m,
        p: Some(p),
        c: Some(proxy.confusion),
        m_ctr,
    })
}

/// Writes the maps of [`compute_maps`] as 8-bit PGMs named after each map.
pub fn export_maps(ckpt: &Checkpoint, image: &Tensor<f64>, boxes: Option<&[BoxRect]>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = compute_maps(ckpt, image, boxes)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let named = [
        ("m", Some(&maps.m)),
        ("p_m", Some(&maps.p_m)),
        ("p", maps.p.as_ref()),
        ("c", maps.c.as_ref()),
        ("m_ctr", maps.m_ctr.as_ref()),
    ];
    for (name, map) in named {
        if let Some(map) = map {
            let path = out_dir.join(format!("{name}.pgm"));
            write_pgm(&path, map)?;
            written.push(path);
        }
    }
    Ok(written)
}
