//! Deterministic property and oracle checks shared by the test suites and
//! the acceptance runner. Each returns a one-line summary or the first
//! counterexample.

use boxseg::boxops::{boxes_to_mask, build_proxy, confusion_mask, BoxRect};
use boxseg::components::label;
use boxseg::losses::ibox_loss;
use boxseg::metrics::{hausdorff, match_detections, threshold_sweep};
use boxseg::params::ParamSet;
use boxseg::rng::SplitMix64;
use boxseg::teacher::{contrastive_map, ema_update, make_anchors, select_features, AnchorSet};
use boxseg::tensor::{Tape, Tensor};

pub type Check = Result<String, String>;

pub fn random_boxes(rng: &mut SplitMix64, n: usize, h: usize, w: usize) -> Vec<BoxRect> {
    (0..n)
        .map(|_| {
            let (xa, xb) = (rng.below(w as u64) as usize, rng.below(w as u64) as usize);
            let (ya, yb) = (rng.below(h as u64) as usize, rng.below(h as u64) as usize);
            BoxRect::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb))
        })
        .collect()
}

pub fn ibox_value(m: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut tape = Tape::detached();
    let mv = tape.constant(m.clone());
    let loss = ibox_loss(&mut tape, mv, b).unwrap();
    tape.value(loss).data()[0]
}

/// `build_proxy(b, b) == b` and `ibox_loss(b, b) <= -1 + 1e-5`.
pub fn proxy_identity(cases: usize, seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for case in 0..cases {
        let h = 8 + rng.below(57) as usize;
        let w = 8 + rng.below(57) as usize;
        let n = 1 + rng.below(4) as usize;
        let boxes = random_boxes(&mut rng, n, h, w);
        let b: Tensor<f64> = boxes_to_mask(&boxes, h, w).unwrap();
        let mut tape = Tape::detached();
        let m = tape.constant(b.clone());
        let proxy = build_proxy(&mut tape, m, &b, true).unwrap();
        if tape.value(proxy.proxy) != &b {
            return Err(format!("case {case}: proxy differs from b for {boxes:?} on {h}x{w}"));
        }
        let loss = ibox_value(&b, &b);
        if loss > -1.0 + 1e-5 {
            return Err(format!("case {case}: ibox_loss(b, b) = {loss}"));
        }
        worst = worst.max(loss);
    }
    Ok(format!("{cases} layouts, max ibox_loss(b,b) = {worst:.9}"))
}

/// Every box on a `side x side` grid.
fn all_boxes(side: usize) -> Vec<BoxRect> {
    let mut out = Vec::new();
    for y0 in 0..side {
        for y1 in y0..side {
            for x0 in 0..side {
                for x1 in x0..side {
                    out.push(BoxRect::new(x0, y0, x1, y1));
                }
            }
        }
    }
    out
}

/// Per-pixel definition: a pixel is confused when its row and its column
/// each meet some box but no box covers the pixel itself.
fn confusion_oracle(boxes: &[&BoxRect], side: usize) -> u64 {
    let mut rows = 0u64;
    let mut cols = 0u64;
    let mut cover = 0u64;
    for b in boxes {
        for y in b.y0..=b.y1 {
            rows |= 1 << y;
            for x in b.x0..=b.x1 {
                cover |= 1 << (y * side + x);
            }
        }
        for x in b.x0..=b.x1 {
            cols |= 1 << x;
        }
    }
    let mut c = 0u64;
    for y in 0..side {
        for x in 0..side {
            if rows >> y & 1 == 1 && cols >> x & 1 == 1 && cover >> (y * side + x) & 1 == 0 {
                c |= 1 << (y * side + x);
            }
        }
    }
    c
}

/// Exhaustive agreement of `confusion_mask` with the per-pixel definition
/// on all unordered 2- and 3-box layouts.
pub fn confusion_exhaustive(side: usize) -> Check {
    let boxes = all_boxes(side);
    let n = boxes.len();
    let mut count = 0usize;
    let mut compare = |set: &[&BoxRect]| -> Result<(), String> {
        let owned: Vec<BoxRect> = set.iter().map(|b| **b).collect();
        let b: Tensor<f64> = boxes_to_mask(&owned, side, side).unwrap();
        let c = confusion_mask(&b).unwrap();
        let mut bits = 0u64;
        for (k, &v) in c.data().iter().enumerate() {
            if v == 1.0 {
                bits |= 1 << k;
            } else if v != 0.0 {
                return Err(format!("non-binary confusion value {v} for {owned:?}"));
            }
        }
        if bits != confusion_oracle(set, side) {
            return Err(format!("mismatch for {owned:?}"));
        }
        count += 1;
        Ok(())
    };
    for i in 0..n {
        for j in i + 1..n {
            compare(&[&boxes[i], &boxes[j]])?;
            for k in j + 1..n {
                compare(&[&boxes[i], &boxes[j], &boxes[k]])?;
            }
        }
    }
    Ok(format!("{count} layouts on {side}x{side}"))
}

/// Raising or lowering `m` at pixels that are neither a row/column maximum
/// nor confused leaves the loss bit-identical.
pub fn shape_blindness(cases: usize, seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let mut touched = 0usize;
    for case in 0..cases {
        let h = 6 + rng.below(27) as usize;
        let w = 6 + rng.below(27) as usize;
        let n = 1 + rng.below(3) as usize;
        let boxes = random_boxes(&mut rng, n, h, w);
        let b: Tensor<f64> = boxes_to_mask(&boxes, h, w).unwrap();
        let c = confusion_mask(&b).unwrap();
        let m = Tensor::from_fn(&[h, w], |_| rng.uniform(0.0, 1.0));
        let d = m.data();
        let row_max: Vec<f64> = (0..h).map(|y| (0..w).map(|x| d[y * w + x]).fold(f64::MIN, f64::max)).collect();
        let col_max: Vec<f64> = (0..w).map(|x| (0..h).map(|y| d[y * w + x]).fold(f64::MIN, f64::max)).collect();
        let mut m2 = m.clone();
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let v = d[k];
                if v == row_max[y] || v == col_max[x] || c.data()[k] == 1.0 {
                    continue;
                }
                if rng.below(2) == 0 {
                    continue;
                }
                // Anything strictly below both maxima keeps them unchanged.
                let cap = row_max[y].min(col_max[x]);
                m2.data_mut()[k] = rng.uniform(0.0, cap);
                touched += 1;
            }
        }
        let (a, b2) = (ibox_value(&m, &b), ibox_value(&m2, &b));
        if a.to_bits() != b2.to_bits() {
            return Err(format!("case {case}: loss {a} became {b2}"));
        }
    }
    Ok(format!("{cases} pairs, {touched} pixels perturbed, losses bit-identical"))
}

/// `|teacher - w| = 0.99^k |teacher_0 - w|` against a fixed student `w`.
pub fn ema_law(steps: usize, seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let mut teacher = ParamSet::new();
    let mut student = ParamSet::new();
    let len = 64;
    let w: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    // Initial gaps are at least |w|: the stored teacher cannot resolve
    // |teacher - w| finer than ulp(w), so the relative error of the law
    // grows like |w| / (0.99^k |teacher_0 - w|).
    let t0: Vec<f64> = w
        .iter()
        .map(|&w| w + rng.uniform(1.0, 2.0) * if rng.below(2) == 0 { 1.0 } else { -1.0 })
        .collect();
    teacher.push("a", Tensor::new(&[len], t0.clone()).unwrap());
    student.push("a", Tensor::new(&[len], w.clone()).unwrap());
    let mut worst = 0.0f64;
    for k in 1..=steps {
        ema_update(&mut teacher, &student, 0.99).unwrap();
        let decay = 0.99f64.powi(k as i32);
        for ((&t, &t0), &w) in teacher.tensors()[0].data().iter().zip(&t0).zip(&w) {
            let expected = decay * (t0 - w).abs();
            let rel = ((t - w).abs() - expected).abs() / expected;
            worst = worst.max(rel);
        }
    }
    if worst <= 1e-12 {
        Ok(format!("{steps} steps x {len} values, max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.3e} over {steps} steps"))
    }
}

fn unit(c: usize, i: usize) -> Vec<f64> {
    (0..c).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

fn ctr_value(f: Tensor<f64>, anchors: &AnchorSet<f64>) -> Vec<f64> {
    let mut tape = Tape::detached();
    let fv = tape.constant(f);
    let out = contrastive_map(&mut tape, fv, anchors).unwrap();
    tape.value(out).data().to_vec()
}

/// Aligned features give sigmoid(1), equidistant ones exactly 0.5, and the
/// background attention is a distribution at every position.
pub fn contrastive_analytics(seed: u64) -> Check {
    let c = 4;
    let (h, w) = (2, 3);
    let p = h * w;
    let r_plp = unit(c, 0);
    let r_bgd = unit(c, 1);
    let anchors = AnchorSet {
        polyp: Tensor::new(&[c], r_plp.clone()).unwrap(),
        background: Tensor::from_fn(&[c, h, w], |k| r_bgd[k / p]),
        weights: Tensor::zeros(&[1, p]),
        valid: true,
    };
    let aligned = ctr_value(Tensor::from_fn(&[c, h, w], |k| 2.5 * r_plp[k / p]), &anchors);
    let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
    if let Some(v) = aligned.iter().find(|v| (*v - 0.7311).abs() > 1e-4 || (*v - sigma1).abs() > 1e-12) {
        return Err(format!("aligned case gave {v}"));
    }
    let both: Vec<f64> = (0..c).map(|k| r_plp[k] + r_bgd[k]).collect();
    let equi = ctr_value(Tensor::from_fn(&[c, h, w], |k| both[k / p] + if k / p > 1 { 0.3 } else { 0.0 }), &anchors);
    if let Some(v) = equi.iter().find(|v| **v != 0.5) {
        return Err(format!("equidistant case gave {v}"));
    }

    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    let mut maps = 0;
    while maps < 200 {
        let (c, h, w) = (2 + rng.below(7) as usize, 2 + rng.below(4) as usize, 2 + rng.below(4) as usize);
        let f = Tensor::from_fn(&[c, h, w], |_| rng.uniform(-3.0, 3.0));
        let b = boxes_to_mask(&random_boxes(&mut rng, 2, 4 * h, 4 * w), 4 * h, 4 * w).unwrap();
        let tea = Tensor::from_fn(&[4 * h, 4 * w], |_| rng.uniform(0.0, 1.0));
        let sel = select_features(&f, &b, &tea, 0.5, 0.4).unwrap();
        if !sel.is_complete() {
            continue;
        }
        let a = make_anchors(&sel, &f, None).unwrap();
        let (m, q) = (a.weights.shape()[0], a.weights.shape()[1]);
        for pos in 0..q {
            let s: f64 = (0..m).map(|j| a.weights.data()[j * q + pos]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        maps += 1;
    }
    if worst > 1e-9 {
        return Err(format!("attention column sum off by {worst:e}"));
    }
    Ok(format!("aligned {:.6}, equidistant 0.5 exact, attention sums within {worst:.1e}", aligned[0]))
}

// Metric oracles. Each re-derives the score from its definition with no code
// shared with the metrics module.

fn oracle_sweep(pred: &[f64], gt: &[bool]) -> (f64, f64) {
    let (mut sd, mut si) = (0.0, 0.0);
    for i in 0..256 {
        let t = i as f64 / 255.0;
        let (mut inter, mut ps, mut gs) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            let pb = p > t;
            inter += (pb && g) as usize;
            ps += pb as usize;
            gs += g as usize;
        }
        let union = ps + gs - inter;
        if union == 0 {
            sd += 1.0;
            si += 1.0;
        } else {
            sd += 2.0 * inter as f64 / (ps + gs) as f64;
            si += inter as f64 / union as f64;
        }
    }
    (sd / 256.0, si / 256.0)
}

/// Components by repeated relaxation of minimum labels over 8-neighbours.
fn oracle_components(cells: &[bool], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut lab: Vec<usize> = (0..cells.len()).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                if !cells[k] {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let nk = ny as usize * w + nx as usize;
                        if cells[nk] && lab[nk] < lab[k] {
                            lab[k] = lab[nk];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = (0..cells.len()).filter(|&k| cells[k] && lab[k] == k).collect();
    roots.sort_unstable();
    roots
        .iter()
        .map(|&r| (0..cells.len()).filter(|&k| cells[k] && lab[k] == r).map(|k| (k / w, k % w)).collect())
        .collect()
}

fn bbox(px: &[(usize, usize)]) -> BoxRect {
    let y0 = px.iter().map(|p| p.0).min().unwrap();
    let y1 = px.iter().map(|p| p.0).max().unwrap();
    let x0 = px.iter().map(|p| p.1).min().unwrap();
    let x1 = px.iter().map(|p| p.1).max().unwrap();
    BoxRect::new(x0, y0, x1, y1)
}

fn oracle_iou(a: &BoxRect, b: &BoxRect, w: usize, h: usize) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

/// Largest number of disjoint (region, box) pairs with IoU above 0.5, by
/// exhaustive search.
fn oracle_max_matching(ok: &[Vec<bool>], i: usize, used: &mut Vec<bool>) -> usize {
    if i == ok.len() {
        return 0;
    }
    let mut best = oracle_max_matching(ok, i + 1, used);
    for j in 0..used.len() {
        if ok[i][j] && !used[j] {
            used[j] = true;
            best = best.max(1 + oracle_max_matching(ok, i + 1, used));
            used[j] = false;
        }
    }
    best
}

/// Hausdorff distance as the smallest candidate radius at which each set
/// lies inside the other's dilation.
fn oracle_hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let d2 = |p: &(usize, usize), q: &(usize, usize)| {
        let dy = p.0 as i64 - q.0 as i64;
        let dx = p.1 as i64 - q.1 as i64;
        dy * dy + dx * dx
    };
    let mut radii: Vec<i64> = a.iter().flat_map(|p| b.iter().map(move |q| d2(p, q))).collect();
    radii.sort_unstable();
    radii.dedup();
    let covers = |from: &[(usize, usize)], to: &[(usize, usize)], r: i64| from.iter().all(|p| to.iter().any(|q| d2(p, q) <= r));
    let r = radii.into_iter().find(|&r| covers(a, b, r) && covers(b, a, r)).unwrap();
    (r as f64).sqrt()
}

/// Compares the three metric primitives against the oracles on one pair.
fn compare_metrics(pred: &[f64], gt: &[bool], h: usize, w: usize) -> Result<(), String> {
    let pt = Tensor::new(&[h, w], pred.to_vec()).unwrap();
    let gtt = Tensor::new(&[h, w], gt.iter().map(|&g| g as u8 as f64).collect()).unwrap();
    let s = threshold_sweep(&pt, &gtt).unwrap();
    let (od, oi) = oracle_sweep(pred, gt);
    if (s.m_dice - od).abs() > 1e-12 || (s.m_iou - oi).abs() > 1e-12 {
        return Err(format!("sweep {h}x{w} pred {pred:?} gt {gt:?}: {} / {} vs {od} / {oi}", s.m_dice, s.m_iou));
    }

    let pcells: Vec<bool> = pred.iter().map(|&p| p > 0.5).collect();
    let regions = label(&pcells, h, w);
    let oregions = oracle_components(&pcells, h, w);
    let ogt = oracle_components(gt, h, w);
    if regions.len() != oregions.len() || regions.iter().zip(&oregions).any(|(r, o)| &r.pixels != o) {
        return Err(format!("components of {pcells:?} on {h}x{w}"));
    }
    let pboxes: Vec<BoxRect> = oregions.iter().map(|c| bbox(c)).collect();
    let gboxes: Vec<BoxRect> = ogt.iter().map(|c| bbox(c)).collect();
    let det = match_detections(&pboxes, &gboxes);
    let ok: Vec<Vec<bool>> = pboxes
        .iter()
        .map(|p| gboxes.iter().map(|g| oracle_iou(p, g, w, h) > 0.5).collect())
        .collect();
    let best = oracle_max_matching(&ok, 0, &mut vec![false; gboxes.len()]);
    if det.pairs.len() != best || det.pairs.iter().any(|&(i, j)| !ok[i][j]) {
        return Err(format!("matching on {h}x{w} pred {pcells:?} gt {gt:?}: {:?} vs {best}", det.pairs));
    }
    let tp = best as f64;
    let op = if pboxes.is_empty() { 0.0 } else { tp / pboxes.len() as f64 };
    let or = if gboxes.is_empty() { 0.0 } else { tp / gboxes.len() as f64 };
    if (det.precision - op).abs() > 1e-15 || (det.recall - or).abs() > 1e-15 {
        return Err(format!("precision/recall {} {} vs {op} {or}", det.precision, det.recall));
    }

    for a in &oregions {
        for b in &ogt {
            let hd = hausdorff(a, b).unwrap();
            let ohd = oracle_hausdorff(a, b);
            if (hd - ohd).abs() > 1e-12 {
                return Err(format!("hausdorff {a:?} {b:?}: {hd} vs {ohd}"));
            }
        }
    }
    Ok(())
}

fn bits(v: u32, n: usize) -> Vec<bool> {
    (0..n).map(|k| v >> k & 1 == 1).collect()
}

/// Exhaustive small maps: every binary pred/gt pair up to nine pixels,
/// graded predictions on threshold boundaries up to four pixels, and on the
/// 12- and 16-pixel grids every map against a fixed set of partners.
pub fn metrics_exhaustive() -> Check {
    let mut count = 0usize;
    let levels = [0.0, 1.0 / 255.0, 0.5, 0.5 + 1e-12, 254.0 / 255.0, 1.0];
    for h in 1..=4 {
        for w in 1..=4 {
            let n = h * w;
            if n <= 9 {
                for pv in 0..1u32 << n {
                    let pred: Vec<f64> = bits(pv, n).iter().map(|&b| b as u8 as f64).collect();
                    for gv in 0..1u32 << n {
                        compare_metrics(&pred, &bits(gv, n), h, w)?;
                        count += 1;
                    }
                }
            } else {
                let partners: Vec<u32> = vec![0, (1 << n) - 1, 0b1011_0001_1100_0111 & ((1 << n) - 1), 0x0F0F & ((1 << n) - 1)];
                for v in 0..1u32 << n {
                    let map = bits(v, n);
                    let as_pred: Vec<f64> = map.iter().map(|&b| b as u8 as f64).collect();
                    for &q in &partners {
                        compare_metrics(&as_pred, &bits(q, n), h, w)?;
                        let qp: Vec<f64> = bits(q, n).iter().map(|&b| b as u8 as f64).collect();
                        compare_metrics(&qp, &map, h, w)?;
                        count += 2;
                    }
                }
            }
            if n <= 4 {
                let mut idx = vec![0usize; n];
                loop {
                    let pred: Vec<f64> = idx.iter().map(|&i| levels[i]).collect();
                    for gv in 0..1u32 << n {
                        compare_metrics(&pred, &bits(gv, n), h, w)?;
                        count += 1;
                    }
                    let mut k = 0;
                    while k < n && idx[k] + 1 == levels.len() {
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == n {
                        break;
                    }
                    idx[k] += 1;
                }
            }
        }
    }
    Ok(format!("{count} exhaustive pairs"))
}

/// Random 16 x 16 maps: blobby ground truth and graded predictions quantized
/// to k/255 half the time.
pub fn metrics_random(cases: usize, seed: u64) -> Check {
    let mut rng = SplitMix64::new(seed);
    let (h, w) = (16, 16);
    for case in 0..cases {
        let mut gt = vec![false; h * w];
        let n = 1 + rng.below(4) as usize;
        for b in random_boxes(&mut rng, n, h, w) {
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    gt[y * w + x] = rng.below(5) != 0;
                }
            }
        }
        let quantize = rng.below(2) == 0;
        let pred: Vec<f64> = gt
            .iter()
            .map(|&g| {
                let v = (rng.uniform(0.0, 0.8) + if g { 0.3 } else { 0.0 }).min(1.0);
                if quantize {
                    (v * 255.0).round() / 255.0
                } else {
                    v
                }
            })
            .collect();
        compare_metrics(&pred, &gt, h, w).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!("{cases} random 16x16 pairs"))
}
