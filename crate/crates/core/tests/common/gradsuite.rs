//! Finite-difference checks of every differentiable op and loss on random
//! small inputs.

use boxseg::boxops::{boxes_to_mask, BoxRect};
use boxseg::gradcheck::check_gradients;
use boxseg::losses::{cla_loss, ibox_loss, px_loss};
use boxseg::rng::SplitMix64;
use boxseg::teacher::{contrastive_map, make_anchors, select_features};
use boxseg::tensor::{Tape, Tensor, Var};
use boxseg::Result;

pub const TRIALS: usize = 20;
pub const STEP: f64 = 1e-6;

pub struct OpResult {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// `H x W` map whose row and column maxima are separated from the runner-up
/// by more than `gap`, so finite differences never cross a max-pool tie.
fn tie_free_map(rng: &mut SplitMix64, h: usize, w: usize, gap: f64) -> Tensor<f64> {
    loop {
        let t = rand_tensor(rng, &[h, w], 0.02, 0.98);
        let d = t.data();
        let separated = |vals: Vec<f64>| {
            let mut v = vals;
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v.len() < 2 || v[0] - v[1] > gap
        };
        let rows = (0..h).all(|y| separated((0..w).map(|x| d[y * w + x]).collect()));
        let cols = (0..w).all(|x| separated((0..h).map(|y| d[y * w + x]).collect()));
        if rows && cols {
            return t;
        }
    }
}

fn rand_boxes(rng: &mut SplitMix64, h: usize, w: usize) -> Vec<BoxRect> {
    let n = 1 + rng.below(3) as usize;
    (0..n)
        .map(|_| {
            let x0 = rng.below(w as u64 - 1) as usize;
            let y0 = rng.below(h as u64 - 1) as usize;
            let x1 = x0 + 1 + rng.below((w - x0 - 1) as u64) as usize;
            let y1 = y0 + 1 + rng.below((h - y0 - 1) as u64) as usize;
            BoxRect::new(x0, y0, x1, y1)
        })
        .collect()
}

/// Sums `out * weight` for a fixed random weight so every output entry gets
/// a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, out: Var, weight: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weight.clone().reshape(tape.shape(out))?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn run<F>(name: &'static str, seed: u64, mut case: F) -> OpResult
where
    F: FnMut(&mut SplitMix64) -> f64,
{
    let mut rng = SplitMix64::new(seed);
    let worst = (0..TRIALS).map(|_| case(&mut rng)).fold(0.0, f64::max);
    OpResult { name, trials: TRIALS, worst }
}

/// Checks a unary-or-more op whose output is weighted by a random probe.
fn weighted(
    rng: &mut SplitMix64,
    inputs: Vec<Tensor<f64>>,
    out_len: usize,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let weight = rand_tensor(rng, &[out_len], -1.0, 1.0);
    check_gradients(&inputs, STEP, |t, v| {
        let out = f(t, v)?;
        probe(t, out, &weight)
    })
    .unwrap()
    .max_rel_error()
}

fn unary(
    rng: &mut SplitMix64,
    shape: &[usize],
    lo: f64,
    hi: f64,
    out_len: usize,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let x = rand_tensor(rng, shape, lo, hi);
    weighted(rng, vec![x], out_len, f)
}

pub fn run_suite() -> Vec<OpResult> {
    let mut out = Vec::new();
    out.push(run("add", 1, |r| {
        let (a, b) = (rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0));
        weighted(r, vec![a, b], 12, |t, v| t.add(v[0], v[1]))
    }));
    out.push(run("sub", 2, |r| {
        let (a, b) = (rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0));
        weighted(r, vec![a, b], 12, |t, v| t.sub(v[0], v[1]))
    }));
    out.push(run("mul", 3, |r| {
        let (a, b) = (rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0));
        weighted(r, vec![a, b], 12, |t, v| t.mul(v[0], v[1]))
    }));
    out.push(run("scale", 4, |r| {
        let c = r.uniform(-2.0, 2.0);
        unary(r, &[5], -1.0, 1.0, 5, move |t, v| Ok(t.scale(v[0], c)))
    }));
    out.push(run("add_scalar", 5, |r| {
        let c = r.uniform(-2.0, 2.0);
        unary(r, &[5], -1.0, 1.0, 5, move |t, v| Ok(t.add_scalar(v[0], c)))
    }));
    out.push(run("sigmoid", 6, |r| unary(r, &[6], -4.0, 4.0, 6, |t, v| Ok(t.sigmoid(v[0])))));
    out.push(run("complement", 7, |r| unary(r, &[6], 0.0, 1.0, 6, |t, v| Ok(t.complement(v[0])))));
    out.push(run("leaky_relu", 8, |r| {
        // Keep inputs away from the kink at zero.
        let x = Tensor::from_fn(&[8], |_| {
            let m = r.uniform(0.01, 1.0);
            if r.below(2) == 0 {
                m
            } else {
                -m
            }
        });
        weighted(r, vec![x], 8, |t, v| Ok(t.leaky_relu(v[0], 0.1)))
    }));
    out.push(run("reshape", 9, |r| unary(r, &[2, 6], -1.0, 1.0, 12, |t, v| t.reshape(v[0], &[3, 4]))));
    out.push(run("concat", 10, |r| {
        let (a, b) = (rand_tensor(r, &[2, 3, 3], -1.0, 1.0), rand_tensor(r, &[1, 3, 3], -1.0, 1.0));
        weighted(r, vec![a, b], 27, |t, v| t.concat(&[v[0], v[1]]))
    }));
    out.push(run("matmul", 11, |r| {
        let (a, b) = (rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0));
        weighted(r, vec![a, b], 6, |t, v| t.matmul(v[0], v[1]))
    }));
    out.push(run("conv2d", 12, |r| {
        let stride = 1 + r.below(2) as usize;
        let x = rand_tensor(r, &[2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(r, &[3], -0.5, 0.5);
        let side = (6 + 2 - 3) / stride + 1;
        weighted(r, vec![x, w, b], 3 * side * side, move |t, v| t.conv2d(v[0], v[1], v[2], stride, 1))
    }));
    out.push(run("conv2d_1x1", 13, |r| {
        let x = rand_tensor(r, &[3, 4, 4], -1.0, 1.0);
        let w = rand_tensor(r, &[2, 3, 1, 1], -0.5, 0.5);
        let b = rand_tensor(r, &[2], -0.5, 0.5);
        weighted(r, vec![x, w, b], 32, |t, v| t.conv2d(v[0], v[1], v[2], 1, 0))
    }));
    out.push(run("deconv2d", 14, |r| {
        let x = rand_tensor(r, &[2, 3, 3], -1.0, 1.0);
        let w = rand_tensor(r, &[2, 3, 2, 2], -0.5, 0.5);
        let b = rand_tensor(r, &[3], -0.5, 0.5);
        weighted(r, vec![x, w, b], 3 * 36, |t, v| t.deconv2d(v[0], v[1], v[2]))
    }));
    out.push(run("group_norm", 15, |r| {
        let x = rand_tensor(r, &[4, 3, 3], -1.0, 1.0);
        let g = rand_tensor(r, &[4], 0.5, 1.5);
        let b = rand_tensor(r, &[4], -0.5, 0.5);
        weighted(r, vec![x, g, b], 36, |t, v| t.group_norm(v[0], v[1], v[2], 2))
    }));
    out.push(run("sum", 16, |r| unary(r, &[7], -1.0, 1.0, 1, |t, v| Ok(t.sum(v[0])))));
    out.push(run("mean", 17, |r| unary(r, &[7], -1.0, 1.0, 1, |t, v| Ok(t.mean(v[0])))));
    out.push(run("row_max", 18, |r| {
        let m = tie_free_map(r, 4, 5, 1e-3);
        weighted(r, vec![m], 4, |t, v| t.row_max(v[0]))
    }));
    out.push(run("col_max", 19, |r| {
        let m = tie_free_map(r, 4, 5, 1e-3);
        weighted(r, vec![m], 5, |t, v| t.col_max(v[0]))
    }));
    out.push(run("outer_product", 20, |r| {
        let (o, v) = (rand_tensor(r, &[4, 1], 0.0, 1.0), rand_tensor(r, &[1, 3], 0.0, 1.0));
        weighted(r, vec![o, v], 12, |t, v| t.outer_product(v[0], v[1]))
    }));
    out.push(run("softmax", 21, |r| {
        let axis = r.below(2) as usize;
        unary(r, &[3, 4], -2.0, 2.0, 12, move |t, v| t.softmax(v[0], axis))
    }));
    out.push(run("channel_cosine", 22, |r| {
        let (a, b) = (rand_tensor(r, &[4, 5], -1.0, 1.0), rand_tensor(r, &[4, 5], -1.0, 1.0));
        weighted(r, vec![a, b], 5, |t, v| t.channel_cosine(v[0], v[1]))
    }));
    out.push(run("channel_cosine_broadcast", 23, |r| {
        let (a, b) = (rand_tensor(r, &[4, 5], -1.0, 1.0), rand_tensor(r, &[4, 1], -1.0, 1.0));
        weighted(r, vec![a, b], 5, |t, v| t.channel_cosine(v[0], v[1]))
    }));
    out.push(run("cosine_sim", 24, |r| {
        let (a, b) = (rand_tensor(r, &[6], -1.0, 1.0), rand_tensor(r, &[6], -1.0, 1.0));
        weighted(r, vec![a, b], 1, |t, v| t.cosine_sim(v[0], v[1]))
    }));
    out.push(run("soft_dice", 25, |r| {
        let (p, q) = (rand_tensor(r, &[4, 4], 0.0, 1.0), rand_tensor(r, &[4, 4], 0.0, 1.0));
        check_gradients(&[p, q], STEP, |t, v| t.soft_dice(v[0], v[1])).unwrap().max_rel_error()
    }));
    out.push(run("bilinear_upsample", 26, |r| {
        let x = rand_tensor(r, &[2, 3, 3], -1.0, 1.0);
        weighted(r, vec![x], 2 * 49, |t, v| t.bilinear_upsample(v[0], 7, 7))
    }));
    out.push(run("ibox_loss", 27, |r| {
        let (h, w) = (4 + r.below(5) as usize, 4 + r.below(5) as usize);
        let m = tie_free_map(r, h, w, 1e-3);
        let b = boxes_to_mask(&rand_boxes(r, h, w), h, w).unwrap();
        check_gradients(&[m], STEP, |t, v| ibox_loss(t, v[0], &b)).unwrap().max_rel_error()
    }));
    out.push(run("px_loss", 28, |r| {
        let m = rand_tensor(r, &[6, 6], 0.02, 0.98);
        let tea = rand_tensor(r, &[6, 6], 0.0, 1.0);
        let b = boxes_to_mask(&rand_boxes(r, 6, 6), 6, 6).unwrap();
        let binarize = r.below(2) == 0;
        check_gradients(&[m], STEP, |t, v| px_loss(t, v[0], &tea, &b, binarize))
            .unwrap()
            .max_rel_error()
    }));
    out.push(run("cla_loss", 29, |r| {
        let ctr = tie_free_map(r, 3, 3, 1e-3);
        let b = boxes_to_mask(&rand_boxes(r, 12, 12), 12, 12).unwrap();
        check_gradients(&[ctr], STEP, |t, v| cla_loss(t, v[0], &b, true, true))
            .unwrap()
            .max_rel_error()
    }));
    out.push(run("contrastive_map", 30, |r| {
        let (f, anchors) = loop {
            let f = rand_tensor(r, &[4, 3, 3], -1.0, 1.0);
            let b = boxes_to_mask(&rand_boxes(r, 12, 12), 12, 12).unwrap();
            let tea = rand_tensor(r, &[12, 12], 0.0, 1.0);
            let sel = select_features(&f, &b, &tea, 0.5, 0.3).unwrap();
            if sel.is_complete() {
                let a = make_anchors(&sel, &f, None).unwrap();
                break (f, a);
            }
        };
        weighted(r, vec![f], 9, |t, v| contrastive_map(t, v[0], &anchors))
    }));
    out
}
