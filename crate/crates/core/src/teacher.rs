//! EMA teacher, input perturbation, latent anchors and the contrastive map.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{area_downsample, bilinear_resize, Tape, Tensor, Var};

pub const EMA_MOMENTUM: f64 = 0.99;
pub const POLYP_THRESHOLD: f64 = 0.8;
pub const BACKGROUND_THRESHOLD: f64 = 0.5;

/// `teacher <- momentum * teacher + (1 - momentum) * student`, tensor by tensor.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, momentum: T) -> Result<()> {
    teacher.check_mirrors(student)?;
    let keep = momentum;
    let take = T::one() - momentum;
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = keep * *tv + take * sv;
        }
    }
    Ok(())
}

/// Chromatic jitter plus a down/up rescale, applied to the teacher's input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    /// Multiplicative brightness factor.
    pub brightness: f64,
    /// Contrast factor around the image's mean gray level.
    pub contrast: f64,
    /// Hue rotation as a fraction of a full turn.
    pub hue: f64,
    /// Intermediate rescale factor before resizing back.
    pub scale: f64,
}

pub const PERTURB_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

impl Perturbation {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        hue: 0.0,
        scale: 1.0,
    };

    /// Brightness and contrast in `[0.8, 1.2)`, hue in `[-0.2, 0.2)`, scale
    /// drawn from {0.75, 1, 1.25}.
    pub fn sample(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self {
            brightness: rng.uniform(0.8, 1.2),
            contrast: rng.uniform(0.8, 1.2),
            hue: rng.uniform(-0.2, 0.2),
            scale: PERTURB_SCALES[rng.below(3) as usize],
        }
    }

    /// Applies the perturbation to a `3 x H x W` image in `[0, 1]`. Values
    /// are clamped back into `[0, 1]` after every stage.
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::Dimension(format!("expected 3 x H x W image, got {s:?}"))),
        };
        let clamp = |x: T| x.max(T::zero()).min(T::one());
        let mut out = image.clone();
        if self.brightness != 1.0 {
            let f = T::lit(self.brightness);
            out = out.map(|x| clamp(x * f));
        }
        if self.contrast != 1.0 {
            let mean = out.sum() / T::lit(out.len() as f64);
            let f = T::lit(self.contrast);
            out = out.map(|x| clamp((x - mean) * f + mean));
        }
        if self.hue != 0.0 {
            let m = hue_rotation(self.hue);
            let plane = h * w;
            let d = out.data_mut();
            for k in 0..plane {
                let rgb = [d[k].as_f64(), d[plane + k].as_f64(), d[2 * plane + k].as_f64()];
                for (ch, row) in m.iter().enumerate() {
                    let v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
                    d[ch * plane + k] = clamp(T::lit(v));
                }
            }
        }
        if self.scale != 1.0 {
            let sh = ((h as f64 * self.scale).round() as usize).max(1);
            let sw = ((w as f64 * self.scale).round() as usize).max(1);
            let small = bilinear_resize(&out, sh, sw)?;
            out = bilinear_resize(&small, h, w)?.map(clamp);
        }
        Ok(out)
    }
}

/// Rotation about the gray axis `(1, 1, 1)` by `turns` of a full circle.
fn hue_rotation(turns: f64) -> [[f64; 3]; 3] {
    let theta = turns * std::f64::consts::TAU;
    let (s, c) = theta.sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = 3f64.sqrt().recip() * s;
    [
        [c + k, k - r, k + r],
        [k + r, c + k, k - r],
        [k - r, k + r, c + k],
    ]
}

/// Draws a perturbation from `seed` and applies it.
pub fn perturb_input<T: Scalar>(image: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    Perturbation::sample(seed).apply(image)
}

/// Teacher feature columns split into confident polyp and background
/// positions of the feature grid.
#[derive(Debug, Clone)]
pub struct FeatureSelection<T> {
    /// `C x N`
    pub polyp: Tensor<T>,
    /// `C x M`
    pub background: Tensor<T>,
    /// Flat grid positions of the polyp columns.
    pub polyp_index: Vec<usize>,
    /// Flat grid positions of the background columns.
    pub background_index: Vec<usize>,
}

impl<T: Scalar> FeatureSelection<T> {
    pub fn is_complete(&self) -> bool {
        !self.polyp_index.is_empty() && !self.background_index.is_empty()
    }
}

/// Confidence map `binarize(down(b), 0.5) * down(m_tea)` on the feature
/// grid, where `down` is block averaging.
pub fn confidence_map<T: Scalar>(b: &Tensor<T>, m_tea: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let (bh, bw) = b.hw()?;
    let m2 = m_tea.clone().reshape(&[bh, bw])?;
    if bh % grid.0 != 0 || bh / grid.0 != bw / grid.1 || bw % grid.1 != 0 {
        return Err(Error::Shape(format!(
            "cannot map a {bh} x {bw} mask onto a {} x {} feature grid",
            grid.0, grid.1
        )));
    }
    let factor = bh / grid.0;
    let b_ds = area_downsample(b, factor)?.map(|x| if x >= T::lit(0.5) { T::one() } else { T::zero() });
    let m_ds = area_downsample(&m2, factor)?;
    b_ds.zip_map(&m_ds, |x, y| x * y)
}

/// Splits teacher features by the confidence map: positions `>= hi` are
/// polyp, positions `< lo` background, the band in between is ignored.
pub fn select_features<T: Scalar>(
    f_tea: &Tensor<T>,
    b: &Tensor<T>,
    m_tea: &Tensor<T>,
    hi: T,
    lo: T,
) -> Result<FeatureSelection<T>> {
    let (c, h, w) = match f_tea.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("features must be C x h x w, got {s:?}"))),
    };
    let conf = confidence_map(b, m_tea, (h, w))?;
    let mut polyp_index = Vec::new();
    let mut background_index = Vec::new();
    for (k, &v) in conf.data().iter().enumerate() {
        if v >= hi {
            polyp_index.push(k);
        } else if v < lo {
            background_index.push(k);
        }
    }
    let gather = |idx: &[usize]| -> Result<Tensor<T>> {
        let p = h * w;
        let d = f_tea.data();
        let mut out = Vec::with_capacity(c * idx.len());
        for ch in 0..c {
            out.extend(idx.iter().map(|&k| d[ch * p + k]));
        }
        Tensor::new(&[c, idx.len()], out)
    };
    Ok(FeatureSelection {
        polyp: gather(&polyp_index)?,
        background: gather(&background_index)?,
        polyp_index,
        background_index,
    })
}

/// Polyp prototype and per-position background prototypes.
#[derive(Debug, Clone)]
pub struct AnchorSet<T> {
    /// `C`
    pub polyp: Tensor<T>,
    /// `C x h x w`
    pub background: Tensor<T>,
    /// Attention weights over background columns, `M x (h*w)`; columns sum to 1.
    pub weights: Tensor<T>,
    /// False when either selection was empty; such anchors must not be used.
    pub valid: bool,
}

/// Builds anchors from a selection. The polyp anchor is the mean selected
/// polyp column; each background anchor is `f_bgd * softmax_M(f_bgd^T f_tea / sqrt(d_k))`
/// evaluated at that grid position. `d_k` defaults to the channel count.
pub fn make_anchors<T: Scalar>(sel: &FeatureSelection<T>, f_tea: &Tensor<T>, d_k: Option<T>) -> Result<AnchorSet<T>> {
    let (c, h, w) = match f_tea.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("features must be C x h x w, got {s:?}"))),
    };
    let p = h * w;
    let (n, m) = (sel.polyp_index.len(), sel.background_index.len());
    if n == 0 || m == 0 {
        return Ok(AnchorSet {
            polyp: Tensor::zeros(&[c]),
            background: Tensor::zeros(&[c, h, w]),
            weights: Tensor::zeros(&[m, p]),
            valid: false,
        });
    }
    let pd = sel.polyp.data();
    let polyp = Tensor::from_fn(&[c], |ch| {
        pd[ch * n..(ch + 1) * n].iter().copied().sum::<T>() / T::lit(n as f64)
    });

    let scale = d_k.unwrap_or_else(|| T::lit(c as f64)).sqrt();
    let bg = sel.background.data();
    let fd = f_tea.data();
    // logits[j, q] = sum_ch bg[ch, j] * f[ch, q] / sqrt(d_k)
    let mut logits = vec![T::zero(); m * p];
    for ch in 0..c {
        let frow = &fd[ch * p..(ch + 1) * p];
        for j in 0..m {
            let a = bg[ch * m + j];
            let lrow = &mut logits[j * p..(j + 1) * p];
            for (l, &f) in lrow.iter_mut().zip(frow) {
                *l = *l + a * f;
            }
        }
    }
    logits.iter_mut().for_each(|l| *l = *l / scale);
    let weights = crate::tensor::softmax_along(&Tensor::new(&[m, p], logits)?, 0);
    let wd = weights.data();
    let mut background = vec![T::zero(); c * p];
    for ch in 0..c {
        let out = &mut background[ch * p..(ch + 1) * p];
        for j in 0..m {
            let a = bg[ch * m + j];
            for (o, &wv) in out.iter_mut().zip(&wd[j * p..(j + 1) * p]) {
                *o = *o + a * wv;
            }
        }
    }
    Ok(AnchorSet {
        polyp,
        background: Tensor::new(&[c, h, w], background)?,
        weights,
        valid: true,
    })
}

/// `m_ctr[i, j] = e^{cos(f, r_plp)} / (e^{cos(f, r_plp)} + e^{cos(f, r_bgd[i, j])})`,
/// evaluated as a sigmoid of the cosine difference. Returns an `h x w` map;
/// gradients flow into `f` only.
pub fn contrastive_map<T: Scalar>(tape: &mut Tape<T>, f: Var, anchors: &AnchorSet<T>) -> Result<Var> {
    let (c, h, w) = match tape.shape(f) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("features must be C x h x w, got {s:?}"))),
    };
    if anchors.background.shape() != [c, h, w] || anchors.polyp.len() != c {
        return Err(Error::Shape(format!(
            "anchors {:?} / {:?} do not match features {:?}",
            anchors.polyp.shape(),
            anchors.background.shape(),
            [c, h, w]
        )));
    }
    let flat = tape.reshape(f, &[c, h * w])?;
    let rp = tape.constant(anchors.polyp.clone().reshape(&[c, 1])?);
    let rb = tape.constant(anchors.background.clone().reshape(&[c, h * w])?);
    let cos_p = tape.channel_cosine(flat, rp)?;
    let cos_b = tape.channel_cosine(flat, rb)?;
    let diff = tape.sub(cos_p, cos_b)?;
    let prob = tape.sigmoid(diff);
    tape.reshape(prob, &[h, w])
}

/// Mean cosine to the polyp anchor over polyp positions and over background
/// positions of a feature map, and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorContrast {
    pub polyp_cos: f64,
    pub background_cos: f64,
}

impl AnchorContrast {
    pub fn gap(&self) -> f64 {
        self.polyp_cos - self.background_cos
    }
}

pub fn anchor_contrast<T: Scalar>(
    f: &Tensor<T>,
    polyp_anchor: &Tensor<T>,
    polyp_index: &[usize],
    background_index: &[usize],
) -> Result<AnchorContrast> {
    let (c, h, w) = match f.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("features must be C x h x w, got {s:?}"))),
    };
    let p = h * w;
    let d = f.data();
    let r = polyp_anchor.data();
    let rn = r.iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let cos_at = |k: usize| {
        let mut dot = 0.0;
        let mut nn = 0.0;
        for ch in 0..c {
            let x = d[ch * p + k].as_f64();
            dot += x * r[ch].as_f64();
            nn += x * x;
        }
        let nn = nn.sqrt();
        if nn <= 1e-8 || rn <= 1e-8 {
            0.0
        } else {
            dot / (nn * rn)
        }
    };
    let mean = |idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&k| cos_at(k)).sum::<f64>() / idx.len() as f64
        }
    };
    Ok(AnchorContrast {
        polyp_cos: mean(polyp_index),
        background_cos: mean(background_index),
    })
}
