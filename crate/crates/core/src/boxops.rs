//! Box annotations, shape decoupling and confusion-region handling.
//!
//! A prediction `m` is replaced by the outer product of its row-wise and
//! column-wise maxima (`p_m = o_m x v_m`), which keeps where and how large an
//! object is while discarding its shape. With several boxes the outer
//! product also lights up every crossing of one box's rows with another box's
//! columns. Those pixels are found from the box mask itself
//! (`c = o_b x v_b - b`) and refilled with the raw prediction:
//! `p = m * c + p_m * (1 - c)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Axis-aligned box with inclusive pixel corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoxRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn iou(&self, other: &BoxRect) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix0 > ix1 || iy0 > iy1 {
            return 0.0;
        }
        let inter = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

/// Checks that every box satisfies `x0 <= x1 < width` and `y0 <= y1 < height`.
pub fn validate_boxes(boxes: &[BoxRect], height: usize, width: usize) -> Result<()> {
    for (index, b) in boxes.iter().enumerate() {
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= width || b.y1 >= height {
            return Err(Error::BoxRange {
                index,
                x0: b.x0 as i64,
                y0: b.y0 as i64,
                x1: b.x1 as i64,
                y1: b.y1 as i64,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Union indicator of the boxes on an `height x width` grid.
pub fn boxes_to_mask<T: Scalar>(boxes: &[BoxRect], height: usize, width: usize) -> Result<Tensor<T>> {
    validate_boxes(boxes, height, width)?;
    let mut mask = Tensor::zeros(&[height, width]);
    let data = mask.data_mut();
    for b in boxes {
        for y in b.y0..=b.y1 {
            data[y * width + b.x0..=y * width + b.x1].fill(T::one());
        }
    }
    Ok(mask)
}

/// Output of [`shape_decouple`].
#[derive(Debug, Clone, Copy)]
pub struct Decoupled {
    /// Row maxima, `H x 1`.
    pub o: Var,
    /// Column maxima, `1 x W`.
    pub v: Var,
    /// `o x v`, `H x W`.
    pub prelim: Var,
}

pub fn shape_decouple<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Decoupled> {
    let (o, v) = tape.rowcol_maxpool(x)?;
    let prelim = tape.outer_product(o, v)?;
    Ok(Decoupled { o, v, prelim })
}

/// Plain-tensor version of the decoupled map `o_x x v_x`.
pub fn decoupled_values<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match x.shape() {
        [h, w] if *h > 0 && *w > 0 => (*h, *w),
        s => return Err(Error::Dimension(format!("expected a non-empty 2-D map, got {s:?}"))),
    };
    let d = x.data();
    let rows: Vec<T> = (0..h)
        .map(|i| d[i * w..(i + 1) * w].iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let cols: Vec<T> = (0..w)
        .map(|j| (0..h).map(|i| d[i * w + j]).fold(T::neg_infinity(), T::max))
        .collect();
    Tensor::new(
        &[h, w],
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| r * c)).collect(),
    )
}

/// Confusion regions of a binary box mask: `c = o_b x v_b - b`.
pub fn confusion_mask<T: Scalar>(b: &Tensor<T>) -> Result<Tensor<T>> {
    if !b.is_binary() {
        return Err(Error::NotBinary);
    }
    let pb = decoupled_values(b)?;
    let c = pb.zip_map(b, |p, x| p - x)?;
    debug_assert!(c.is_binary());
    Ok(c)
}

/// `p = m * c + prelim * (1 - c)` with constant binary `c`.
pub fn swap_confusion<T: Scalar>(tape: &mut Tape<T>, prelim: Var, m: Var, c: &Tensor<T>) -> Result<Var> {
    if !c.is_binary() {
        return Err(Error::NotBinary);
    }
    if tape.shape(prelim) != c.shape() || tape.shape(m) != c.shape() {
        return Err(Error::Shape(format!(
            "swap: prelim {:?}, m {:?}, c {:?}",
            tape.shape(prelim),
            tape.shape(m),
            c.shape()
        )));
    }
    let keep = tape.constant(c.map(|x| T::one() - x));
    let cv = tape.constant(c.clone());
    let from_m = tape.mul(m, cv)?;
    let from_prelim = tape.mul(prelim, keep)?;
    tape.add(from_m, from_prelim)
}

/// Intermediate maps of [`build_proxy`], kept for inspection and export.
#[derive(Debug, Clone)]
pub struct Proxy<T> {
    pub decoupled: Decoupled,
    pub confusion: Tensor<T>,
    pub proxy: Var,
}

/// Full proxy construction: decouple `m`, then swap in raw values on the
/// confusion regions of `b`. With `swap = false` the preliminary map is
/// returned unchanged.
pub fn build_proxy<T: Scalar>(tape: &mut Tape<T>, m: Var, b: &Tensor<T>, swap: bool) -> Result<Proxy<T>> {
    if tape.shape(m) != b.shape() {
        return Err(Error::Shape(format!(
            "proxy: prediction {:?} vs box mask {:?}",
            tape.shape(m),
            b.shape()
        )));
    }
    let decoupled = shape_decouple(tape, m)?;
    let confusion = confusion_mask(b)?;
    let proxy = if swap {
        swap_confusion(tape, decoupled.prelim, m, &confusion)?
    } else {
        decoupled.prelim
    };
    Ok(Proxy {
        decoupled,
        confusion,
        proxy,
    })
}
