//! Threshold-swept dice/IoU, region detection scores and Hausdorff distance.

use std::fmt::Write as _;

use crate::boxops::BoxRect;
use crate::components::{label, Component};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_THRESHOLDS: usize = 256;
pub const DETECTION_IOU: f64 = 0.5;
pub const BINARIZE_AT: f64 = 0.5;
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Threshold `i / 255`.
pub fn threshold(i: usize) -> f64 {
    i as f64 / 255.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegScores {
    pub m_dice: f64,
    pub m_iou: f64,
    pub dice_curve: Vec<f64>,
    pub iou_curve: Vec<f64>,
}

/// Dice and IoU from counts; an empty union scores one.
pub fn dice_iou(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0);
    }
    let tp = tp as f64;
    let (fp, fn_) = (fp as f64, fn_ as f64);
    (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
}

/// Index of the last threshold that `p` strictly exceeds, plus one.
fn positive_run(p: f64) -> usize {
    let mut k = ((p * 255.0).floor().max(-1.0) as i64 + 1).clamp(0, NUM_THRESHOLDS as i64) as usize;
    while k < NUM_THRESHOLDS && p > threshold(k) {
        k += 1;
    }
    while k > 0 && p <= threshold(k - 1) {
        k -= 1;
    }
    k
}

/// Dice and IoU of `pred > i/255` against `gt` for every threshold, and
/// their means.
pub fn threshold_sweep(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<SegScores> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", pred.shape(), gt.shape())));
    }
    // hist[k]: pixels positive for exactly thresholds 0..k
    let mut hist_fg = [0usize; NUM_THRESHOLDS + 1];
    let mut hist_bg = [0usize; NUM_THRESHOLDS + 1];
    let mut total_fg = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let k = positive_run(p);
        if g > 0.5 {
            hist_fg[k] += 1;
            total_fg += 1;
        } else {
            hist_bg[k] += 1;
        }
    }
    let mut dice_curve = vec![0.0; NUM_THRESHOLDS];
    let mut iou_curve = vec![0.0; NUM_THRESHOLDS];
    let (mut tp, mut fp) = (0, 0);
    for i in (0..NUM_THRESHOLDS).rev() {
        tp += hist_fg[i + 1];
        fp += hist_bg[i + 1];
        let (d, j) = dice_iou(tp, fp, total_fg - tp);
        dice_curve[i] = d;
        iou_curve[i] = j;
    }
    let n = NUM_THRESHOLDS as f64;
    Ok(SegScores {
        m_dice: dice_curve.iter().sum::<f64>() / n,
        m_iou: iou_curve.iter().sum::<f64>() / n,
        dice_curve,
        iou_curve,
    })
}

/// Dice of `pred > t` against `target`.
pub fn dice_at(pred: &Tensor<f64>, target: &Tensor<f64>, t: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", pred.shape(), target.shape())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        match (p > t, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(dice_iou(tp, fp, fn_).0)
}

/// Components of `pred > 0.5`.
pub fn detect_regions(pred: &Tensor<f64>) -> Result<Vec<Component>> {
    let (h, w) = pred.hw()?;
    let cells: Vec<bool> = pred.data().iter().map(|&v| v > BINARIZE_AT).collect();
    Ok(label(&cells, h, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(region index, box index)` of each true positive.
    pub pairs: Vec<(usize, usize)>,
    pub num_pred: usize,
    pub num_gt: usize,
}

impl DetectionScores {
    pub fn from_counts(tp: usize, num_pred: usize, num_gt: usize) -> (f64, f64, f64) {
        let p = if num_pred > 0 { tp as f64 / num_pred as f64 } else { 0.0 };
        let r = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

/// Greedy one-to-one matching by descending IoU; a pair counts when its IoU
/// is strictly above 0.5. Equal IoUs are ordered by the boxes' coordinates so
/// the result does not depend on input order.
pub fn match_detections(regions: &[BoxRect], gt: &[BoxRect]) -> DetectionScores {
    let mut cands = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = r.iou(g);
            if iou > DETECTION_IOU {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| regions[a.1].cmp(&regions[b.1]))
            .then_with(|| gt[a.2].cmp(&gt[b.2]))
    });
    let mut used_r = vec![false; regions.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_r[i] && !used_g[j] {
            used_r[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    let (precision, recall, f1) = DetectionScores::from_counts(pairs.len(), regions.len(), gt.len());
    DetectionScores {
        precision,
        recall,
        f1,
        pairs,
        num_pred: regions.len(),
        num_gt: gt.len(),
    }
}

/// Symmetric Hausdorff distance between two pixel sets.
pub fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let d2 = |p: (usize, usize), q: (usize, usize)| {
        let dy = p.0 as f64 - q.0 as f64;
        let dx = p.1 as f64 - q.1 as f64;
        dy * dy + dx * dx
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)).sqrt())
}

/// Every score for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub m_dice: f64,
    pub m_iou: f64,
    /// Dice of `pred > 0.5`.
    pub dice: f64,
    pub tp: usize,
    pub num_pred: usize,
    pub num_gt: usize,
    /// Hausdorff distance of each true positive.
    pub hd: Vec<f64>,
    /// Pixel count over bounding-box area of each predicted region.
    pub rectangularity: Vec<f64>,
}

impl ImageScores {
    pub fn detection(&self) -> (f64, f64, f64) {
        DetectionScores::from_counts(self.tp, self.num_pred, self.num_gt)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate_image(name: &str, pred: &Tensor<f64>, gt_mask: &Tensor<f64>) -> Result<ImageScores> {
    let seg = threshold_sweep(pred, gt_mask)?;
    let dice = dice_at(pred, gt_mask, BINARIZE_AT)?;
    let regions = detect_regions(pred)?;
    let (h, w) = gt_mask.hw()?;
    let gt_cells: Vec<bool> = gt_mask.data().iter().map(|&v| v > 0.5).collect();
    let gt_boxes: Vec<BoxRect> = label(&gt_cells, h, w).into_iter().map(|c| c.bbox).collect();
    let pred_boxes: Vec<BoxRect> = regions.iter().map(|c| c.bbox).collect();
    let det = match_detections(&pred_boxes, &gt_boxes);
    let mut hd = Vec::with_capacity(det.pairs.len());
    for &(i, j) in &det.pairs {
        let g = gt_boxes[j];
        let gt_pts: Vec<(usize, usize)> = (g.y0..=g.y1)
            .flat_map(|y| (g.x0..=g.x1).map(move |x| (y, x)))
            .filter(|&(y, x)| gt_cells[y * w + x])
            .collect();
        hd.push(hausdorff(&regions[i].pixels, &gt_pts)?);
    }
    Ok(ImageScores {
        name: name.to_string(),
        m_dice: seg.m_dice,
        m_iou: seg.m_iou,
        dice,
        tp: det.pairs.len(),
        num_pred: det.num_pred,
        num_gt: det.num_gt,
        hd,
        rectangularity: regions.iter().map(Component::rectangularity).collect(),
    })
}

/// Dataset-level aggregate. Segmentation scores are per-image means;
/// detection scores pool counts over images; HD and rectangularity average
/// over all true positives and all predicted regions.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub images: usize,
    pub m_dice: f64,
    pub m_iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub num_pred: usize,
    pub num_gt: usize,
    pub mean_hd: Option<f64>,
    pub rectangularity: Option<f64>,
}

pub fn summarize(scores: &[ImageScores]) -> Summary {
    let n = scores.len().max(1) as f64;
    let tp = scores.iter().map(|s| s.tp).sum();
    let num_pred = scores.iter().map(|s| s.num_pred).sum();
    let num_gt = scores.iter().map(|s| s.num_gt).sum();
    let (precision, recall, f1) = DetectionScores::from_counts(tp, num_pred, num_gt);
    let hd: Vec<f64> = scores.iter().flat_map(|s| s.hd.iter().copied()).collect();
    let rect: Vec<f64> = scores.iter().flat_map(|s| s.rectangularity.iter().copied()).collect();
    Summary {
        images: scores.len(),
        m_dice: scores.iter().map(|s| s.m_dice).sum::<f64>() / n,
        m_iou: scores.iter().map(|s| s.m_iou).sum::<f64>() / n,
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
        precision,
        recall,
        f1,
        tp,
        num_pred,
        num_gt,
        mean_hd: mean(&hd),
        rectangularity: mean(&rect),
    }
}

pub const CSV_HEADER: &str =
    "schema_version,name,mdice,miou,dice,precision,recall,f1,tp,num_pred,num_gt,mean_hd,rectangularity";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Header, one row per image, then an `ALL` aggregate row.
pub fn scores_csv(scores: &[ImageScores]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in scores {
        let (p, r, f1) = s.detection();
        let _ = writeln!(
            out,
            "{CSV_SCHEMA_VERSION},{},{:.6},{:.6},{:.6},{p:.6},{r:.6},{f1:.6},{},{},{},{},{}",
            s.name,
            s.m_dice,
            s.m_iou,
            s.dice,
            s.tp,
            s.num_pred,
            s.num_gt,
            opt(mean(&s.hd)),
            opt(mean(&s.rectangularity)),
        );
    }
    let a = summarize(scores);
    let _ = writeln!(
        out,
        "{CSV_SCHEMA_VERSION},ALL,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
        a.m_dice,
        a.m_iou,
        a.dice,
        a.precision,
        a.recall,
        a.f1,
        a.tp,
        a.num_pred,
        a.num_gt,
        opt(a.mean_hd),
        opt(a.rectangularity),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_run_matches_definition() {
        for &p in &[0.0, 1e-12, 0.5, 1.0 / 255.0, 2.0 / 255.0, 0.999, 1.0, -0.1, 1.5] {
            let direct = (0..NUM_THRESHOLDS).take_while(|&i| p > threshold(i)).count();
            assert_eq!(positive_run(p), direct, "p = {p}");
        }
    }

    #[test]
    fn perfect_and_inverted() {
        let gt = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let s = threshold_sweep(&gt, &gt).unwrap();
        // t = 1 leaves nothing positive
        let expected = 255.0 / 256.0;
        assert!((s.m_dice - expected).abs() < 1e-15);
        assert!((s.m_iou - expected).abs() < 1e-15);
        let inv = gt.map(|v| 1.0 - v);
        let s = threshold_sweep(&inv, &gt).unwrap();
        assert_eq!((s.m_dice, s.m_iou), (0.0, 0.0));
        assert_eq!(s.dice_curve.len(), 256);
    }

    #[test]
    fn uniform_half_prediction() {
        let gt = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let pred = Tensor::full(&[2, 2], 0.5);
        let s = threshold_sweep(&pred, &gt).unwrap();
        // 0.5 > i/255 for i = 0..=127: dice 2/3, IoU 1/2; later thresholds score 0
        assert!((s.m_dice - 128.0 * (2.0 / 3.0) / 256.0).abs() < 1e-15);
        assert!((s.m_iou - 128.0 * 0.5 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn empty_pair_scores_one() {
        let z = Tensor::zeros(&[3, 3]);
        let s = threshold_sweep(&z, &z).unwrap();
        assert_eq!((s.m_dice, s.m_iou), (1.0, 1.0));
    }

    #[test]
    fn detection_cases() {
        let g = [BoxRect::new(0, 0, 3, 3), BoxRect::new(6, 6, 9, 9)];
        let d = match_detections(&g, &g);
        assert_eq!((d.precision, d.recall, d.f1), (1.0, 1.0, 1.0));
        let d = match_detections(&[], &g);
        assert_eq!((d.precision, d.recall, d.f1), (0.0, 0.0, 0.0));
        // one wide region against two adjacent boxes
        let gt = [BoxRect::new(0, 0, 3, 3), BoxRect::new(4, 0, 6, 3)];
        let d = match_detections(&[BoxRect::new(0, 0, 5, 3)], &gt);
        assert!(d.pairs.len() <= 1);
    }

    #[test]
    fn hausdorff_cases() {
        assert_eq!(hausdorff(&[(1, 2), (3, 3)], &[(3, 3), (1, 2)]).unwrap(), 0.0);
        assert_eq!(hausdorff(&[(0, 0)], &[(3, 4)]).unwrap(), 5.0);
        assert!(matches!(hausdorff(&[], &[(0, 0)]), Err(Error::EmptySet)));
    }

    #[test]
    fn identity_prediction_scores() {
        let mut gt = Tensor::zeros(&[8, 8]);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2), (2, 3), (6, 6)] {
            gt.data_mut()[y * 8 + x] = 1.0;
        }
        let s = evaluate_image("a", &gt, &gt).unwrap();
        assert_eq!((s.tp, s.num_pred, s.num_gt), (2, 2, 2));
        assert_eq!(s.hd, vec![0.0, 0.0]);
        assert_eq!(s.dice, 1.0);
        let csv = scores_csv(&[s.clone(), s]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().starts_with("1,ALL,"));
    }
}
