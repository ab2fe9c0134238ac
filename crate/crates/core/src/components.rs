//! 8-connected component labeling of binary grids.

use crate::boxops::BoxRect;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Pixels as `(y, x)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoxRect,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Pixel count over bounding-box area.
    pub fn rectangularity(&self) -> f64 {
        self.area() as f64 / self.bbox.area() as f64
    }
}

/// Components of the `true` cells of a row-major `h x w` grid, ordered by
/// their first pixel in raster order.
pub fn label(cells: &[bool], h: usize, w: usize) -> Vec<Component> {
    assert_eq!(cells.len(), h * w, "grid length does not match {h} x {w}");
    let mut seen = vec![false; cells.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..cells.len() {
        if !cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(k) = stack.pop() {
            let (y, x) = (k / w, k % w);
            pixels.push((y, x));
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let nk = ny * w + nx;
                    if cells[nk] && !seen[nk] {
                        seen[nk] = true;
                        stack.push(nk);
                    }
                }
            }
        }
        pixels.sort_unstable();
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for &(y, x) in &pixels {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        out.push(Component {
            pixels,
            bbox: BoxRect::new(x0, y0, x1, y1),
        });
    }
    out
}
