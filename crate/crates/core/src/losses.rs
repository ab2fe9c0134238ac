//! Training objectives: the box-dice term on the proxy map, the contrastive
//! anchor term, the teacher pseudo-mask term and their unweighted sum.

use crate::boxops::build_proxy;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::teacher::{contrastive_map, AnchorSet};
use crate::tensor::{Tape, Tensor, Var};

/// Which loss terms are active and how the box-dice proxy is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub ibox: bool,
    pub cla: bool,
    pub px: bool,
    /// Off: box terms compare the raw map with the box mask directly.
    pub decouple: bool,
    /// Off: the preliminary decoupled map is used without confusion swapping.
    pub swap_confusion: bool,
    /// Binarize the teacher map at 0.5 inside the pseudo-mask term.
    pub binarize_teacher: bool,
}

impl LossFlags {
    pub const FULL: Self = Self {
        ibox: true,
        cla: true,
        px: true,
        decouple: true,
        swap_confusion: true,
        binarize_teacher: true,
    };

    pub const IBOX_ONLY: Self = Self {
        cla: false,
        px: false,
        ..Self::FULL
    };

    /// Plain dice between the raw prediction and the box-filled mask.
    pub const BASELINE: Self = Self {
        decouple: false,
        ..Self::IBOX_ONLY
    };

    pub fn needs_teacher(&self) -> bool {
        self.cla || self.px
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::FULL
    }
}

/// Negative soft dice between the box mask and either the proxy of `m`
/// (`decouple`) or `m` itself.
pub fn box_dice<T: Scalar>(tape: &mut Tape<T>, m: Var, b: &Tensor<T>, decouple: bool, swap: bool) -> Result<Var> {
    let target = tape.constant(b.clone());
    let pred = if decouple {
        build_proxy(tape, m, b, swap)?.proxy
    } else {
        if tape.shape(m) != b.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs box mask {:?}",
                tape.shape(m),
                b.shape()
            )));
        }
        m
    };
    tape.soft_dice(pred, target)
}

/// Box-dice on the confusion-corrected proxy map.
pub fn ibox_loss<T: Scalar>(tape: &mut Tape<T>, m: Var, b: &Tensor<T>) -> Result<Var> {
    box_dice(tape, m, b, true, true)
}

/// Box-dice of the contrastive map after bilinear upsampling to the mask size.
pub fn cla_loss<T: Scalar>(tape: &mut Tape<T>, m_ctr: Var, b: &Tensor<T>, decouple: bool, swap: bool) -> Result<Var> {
    let (h, w) = b.hw()?;
    let up = tape.bilinear_upsample(m_ctr, h, w)?;
    let up = tape.reshape(up, &[h, w])?;
    box_dice(tape, up, b, decouple, swap)
}

/// Pseudo mask `b * binarize(m_tea, 0.5)` (or `b * m_tea` when not binarizing).
pub fn teacher_target<T: Scalar>(m_tea: &Tensor<T>, b: &Tensor<T>, binarize: bool) -> Result<Tensor<T>> {
    let half = T::lit(0.5);
    let m_tea = m_tea.clone().reshape(b.shape())?;
    b.zip_map(&m_tea, |bv, tv| {
        let t = if binarize {
            if tv >= half {
                T::one()
            } else {
                T::zero()
            }
        } else {
            tv
        };
        bv * t
    })
}

/// Negative soft dice between `m` and the teacher pseudo mask. The teacher
/// map is a constant.
pub fn px_loss<T: Scalar>(tape: &mut Tape<T>, m: Var, m_tea: &Tensor<T>, b: &Tensor<T>, binarize: bool) -> Result<Var> {
    if tape.shape(m) != b.shape() || m_tea.len() != b.len() {
        return Err(Error::Shape(format!(
            "px loss: m {:?}, teacher {:?}, box mask {:?}",
            tape.shape(m),
            m_tea.shape(),
            b.shape()
        )));
    }
    let t = tape.constant(teacher_target(m_tea, b, binarize)?);
    tape.soft_dice(m, t)
}

/// Detached teacher products for one sample.
#[derive(Debug, Clone, Copy)]
pub struct TeacherView<'a, T> {
    pub m_tea: &'a Tensor<T>,
    /// `None` or invalid anchors skip the contrastive term.
    pub anchors: Option<&'a AnchorSet<T>>,
}

/// Loss terms recorded on a tape; `total = ibox + cla + px`.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub ibox: Var,
    pub cla: Var,
    pub px: Var,
    pub total: Var,
}

/// Scalar values of a [`LossBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ibox: f64,
    pub cla: f64,
    pub px: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Var| tape.value(v).data()[0].as_f64();
        LossValues {
            ibox: get(self.ibox),
            cla: get(self.cla),
            px: get(self.px),
            total: get(self.total),
        }
    }

    fn from_terms<T: Scalar>(tape: &mut Tape<T>, ibox: Var, cla: Var, px: Var) -> Result<Self> {
        let partial = tape.add(ibox, cla)?;
        let total = tape.add(partial, px)?;
        Ok(Self { ibox, cla, px, total })
    }
}

/// Total objective for a box-annotated sample. `m` is the student map
/// (`H x W`), `f` the fused student features (`C x h x w`).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    m: Var,
    f: Var,
    b: &Tensor<T>,
    teacher: Option<TeacherView<'_, T>>,
    flags: LossFlags,
) -> Result<LossBundle> {
    let zero = || Tensor::scalar(T::zero());
    let ibox = if flags.ibox {
        box_dice(tape, m, b, flags.decouple, flags.swap_confusion)?
    } else {
        tape.constant(zero())
    };
    let anchors = teacher.and_then(|t| t.anchors).filter(|a| a.valid);
    let cla = match anchors {
        Some(a) if flags.cla => {
            let m_ctr = contrastive_map(tape, f, a)?;
            cla_loss(tape, m_ctr, b, flags.decouple, flags.swap_confusion)?
        }
        _ => tape.constant(zero()),
    };
    let px = match teacher {
        Some(t) if flags.px => px_loss(tape, m, t.m_tea, b, flags.binarize_teacher)?,
        _ => tape.constant(zero()),
    };
    LossBundle::from_terms(tape, ibox, cla, px)
}

/// Objective for a sample with a full mask: plain dice on the prediction,
/// reported in the `ibox` slot.
pub fn mask_loss<T: Scalar>(tape: &mut Tape<T>, m: Var, mask: &Tensor<T>) -> Result<LossBundle> {
    let dice = box_dice(tape, m, mask, false, false)?;
    let cla = tape.constant(Tensor::scalar(T::zero()));
    let px = tape.constant(Tensor::scalar(T::zero()));
    LossBundle::from_terms(tape, dice, cla, px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxops::{boxes_to_mask, BoxRect};

    fn layout() -> Tensor<f64> {
        boxes_to_mask(&[BoxRect::new(0, 0, 2, 2), BoxRect::new(4, 3, 6, 6)], 8, 8).unwrap()
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn ibox_of_box_mask_is_minus_one() {
        let b = layout();
        let mut tape = Tape::new();
        let m = tape.constant(b.clone());
        let l = ibox_loss(&mut tape, m, &b).unwrap();
        assert!((value(&tape, l) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn ibox_of_zeros_is_zero() {
        let b = layout();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::zeros(&[8, 8]));
        let l = ibox_loss(&mut tape, m, &b).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn diamond_reaches_minus_one_only_when_spanning_its_box() {
        let diamond = |n: usize| {
            let c = n / 2;
            Tensor::<f64>::from_fn(&[n, n], |k| {
                let (i, j) = (k / n, k % n);
                if i.abs_diff(c) + j.abs_diff(c) <= c {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let b: Tensor<f64> = boxes_to_mask(&[BoxRect::new(0, 0, 4, 4)], 5, 5).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(diamond(5));
        let l = ibox_loss(&mut tape, m, &b).unwrap();
        assert!((value(&tape, l) + 1.0).abs() < 1e-6);

        // A smaller diamond leaves the outer rows and columns empty.
        let mut small = Tensor::zeros(&[5, 5]);
        for (k, v) in diamond(3).data().iter().enumerate() {
            small.data_mut()[(k / 3 + 1) * 5 + k % 3 + 1] = *v;
        }
        let m = tape.constant(small);
        let l = ibox_loss(&mut tape, m, &b).unwrap();
        let expect = -2.0 * 9.0 / (9.0 + 25.0 + 1e-6);
        assert!((value(&tape, l) - expect).abs() < 1e-12);
    }

    #[test]
    fn px_examples() {
        let b = layout();
        let mut tape = Tape::new();
        let m = tape.constant(b.clone());
        let l = px_loss(&mut tape, m, &b, &b, true).unwrap();
        assert!((value(&tape, l) + 1.0).abs() < 1e-6);

        let m = tape.constant(Tensor::from_fn(&[8, 8], |i| (i % 5) as f64 / 4.0));
        let l = px_loss(&mut tape, m, &Tensor::zeros(&[8, 8]), &b, true).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn uniform_contrastive_map() {
        // Uniform 0.5 decouples to 0.25 everywhere; confusion pixels take
        // the raw 0.5 back. Box pixels never lie on confusion pixels.
        let b = layout();
        let c = crate::boxops::confusion_mask(&b).unwrap();
        let proxy: Vec<f64> = c.data().iter().map(|&cv| if cv == 1.0 { 0.5 } else { 0.25 }).collect();
        let inter: f64 = proxy.iter().zip(b.data()).map(|(p, t)| p * t).sum();
        let expect = -2.0 * inter / (proxy.iter().sum::<f64>() + b.sum() + 1e-6);
        assert_eq!(c.sum(), 21.0);

        let mut tape = Tape::new();
        let m_ctr = tape.constant(Tensor::full(&[4, 4], 0.5));
        let l = cla_loss(&mut tape, m_ctr, &b, true, true).unwrap();
        assert!((value(&tape, l) - expect).abs() < 1e-12);

        let z = tape.constant(Tensor::zeros(&[4, 4]));
        let l = cla_loss(&mut tape, z, &b, true, true).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn empty_frame_totals_zero() {
        let b = Tensor::<f64>::zeros(&[8, 8]);
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::full(&[8, 8], 0.3), true);
        let f = tape.leaf(Tensor::full(&[2, 2, 2], 0.1), true);
        let m_tea = Tensor::full(&[8, 8], 0.9);
        let teacher = TeacherView {
            m_tea: &m_tea,
            anchors: None,
        };
        let bundle = total_loss(&mut tape, m, f, &b, Some(teacher), LossFlags::FULL).unwrap();
        assert_eq!(bundle.values(&tape).total, 0.0);
    }

    #[test]
    fn ablation_flags_zero_terms() {
        let b = layout();
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::full(&[8, 8], 0.6), true);
        let f = tape.leaf(Tensor::full(&[2, 2, 2], 0.1), true);
        let m_tea = b.clone();
        let teacher = TeacherView {
            m_tea: &m_tea,
            anchors: None,
        };
        let full = total_loss(&mut tape, m, f, &b, Some(teacher), LossFlags::FULL).unwrap();
        let only = total_loss(&mut tape, m, f, &b, Some(teacher), LossFlags::IBOX_ONLY).unwrap();
        let (fv, ov) = (full.values(&tape), only.values(&tape));
        assert!(fv.px < 0.0);
        assert_eq!(ov.px, 0.0);
        assert_eq!(ov.cla, 0.0);
        assert_eq!(fv.ibox, ov.ibox);
        assert_eq!(fv.total, fv.ibox + fv.cla + fv.px);
    }
}
