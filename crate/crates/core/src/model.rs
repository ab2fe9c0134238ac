//! Desk-scale segmentation network.
//!
//! Encoder: a stride-2 stem and four stages, each a stride-2 3x3 conv and a
//! 3x3 conv with group norm and leaky ReLU, giving maps at 1/4, 1/8, 1/16
//! and 1/32 of the input. A 1x1 conv reduces every stage to `C'` channels.
//!
//! Decoder: each level is multiplied by all deeper levels (bilinearly
//! resized to its size). Starting from the coarsest level, the running map
//! is doubled by a 2x2 transposed conv, concatenated with the next level and
//! mixed by a 3x3 conv back to `C'` channels. A 1x1 head gives logits at 1/4
//! resolution that are resized to the input and passed through a sigmoid.
//!
//! Fusion: the un-multiplied pyramid is resized to 1/4 resolution and
//! concatenated, giving the `4 C'` feature map used by the anchor term.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

const LEAK: f64 = 0.1;
pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square input side, divisible by 32.
    pub input_size: usize,
    pub stage_channels: [usize; NUM_STAGES],
    /// Common channel count `C'` after per-stage reduction.
    pub reduced_channels: usize,
    pub norm_groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: [8, 16, 32, 64],
            reduced_channels: 8,
            norm_groups: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if self.reduced_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.norm_groups == 0 || self.stage_channels.iter().any(|c| c % self.norm_groups != 0) {
            return Err(Error::Config(format!(
                "stage channels {:?} do not split into {} groups",
                self.stage_channels, self.norm_groups
            )));
        }
        Ok(())
    }

    /// Channels of the fused feature map, `4 C'`.
    pub fn fused_channels(&self) -> usize {
        NUM_STAGES * self.reduced_channels
    }

    /// Side of the fused feature map, `S / 4`.
    pub fn feature_size(&self) -> usize {
        self.input_size / 4
    }
}

/// Per-stage features after channel reduction, finest first.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; NUM_STAGES],
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Probability map, `S x S`.
    pub m: Var,
    /// Fused features, `4C' x S/4 x S/4`.
    pub f: Var,
}

/// Detached outputs of a teacher forward pass.
#[derive(Debug, Clone)]
pub struct TeacherOutput<T> {
    pub m: Tensor<T>,
    pub f: Tensor<T>,
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Variables in parameter-set order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Vec<(String, Vec<usize>)>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    pub fn num_parameters(&self) -> usize {
        self.layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Seeded initialization: conv weights uniform in `±sqrt(6 / fan_in)`,
    /// biases zero, norm scales one.
    pub fn init_params<T: Scalar>(&self) -> ParamSet<T> {
        let mut rng = SplitMix64::new(self.config.seed);
        let mut params = ParamSet::new();
        for (name, shape) in &self.layout {
            let t = if name.ends_with(".w") {
                let fan_in = if name.contains(".up.") {
                    shape[0]
                } else {
                    shape[1..].iter().product::<usize>()
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.uniform(-bound, bound)))
            } else if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else {
                Tensor::zeros(shape)
            };
            params.push(name.clone(), t);
        }
        params
    }

    /// Registers `params` on the tape. On a recording tape every parameter
    /// requires a gradient.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>) -> Result<BoundParams> {
        if params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (k, ((name, shape), (pname, t))) in self.layout.iter().zip(params.iter()).enumerate() {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {k}: expected {name} {shape:?}, got {pname} {:?}",
                    t.shape()
                )));
            }
            vars.push(tape.leaf(t.clone(), true));
            index.insert(name.clone(), k);
        }
        Ok(BoundParams { vars, index })
    }

    fn conv_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        x: Var,
        prefix: &str,
        stride: usize,
    ) -> Result<Var> {
        let y = tape.conv2d(
            x,
            p.get(&format!("{prefix}.w")),
            p.get(&format!("{prefix}.b")),
            stride,
            1,
        )?;
        let y = tape.group_norm(
            y,
            p.get(&format!("{prefix}.gamma")),
            p.get(&format!("{prefix}.beta")),
            self.config.norm_groups,
        )?;
        Ok(tape.leaky_relu(y, T::lit(LEAK)))
    }

    /// Image `3 x S x S` to the reduced four-level pyramid.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, image: Var) -> Result<FeaturePyramid> {
        let s = self.config.input_size;
        if tape.shape(image) != [3, s, s] {
            return Err(Error::Shape(format!(
                "model expects a 3 x {s} x {s} image, got {:?}",
                tape.shape(image)
            )));
        }
        let mut x = self.conv_block(tape, p, image, "stem", 2)?;
        let mut levels = Vec::with_capacity(NUM_STAGES);
        for stage in 1..=NUM_STAGES {
            x = self.conv_block(tape, p, x, &format!("s{stage}.down"), 2)?;
            x = self.conv_block(tape, p, x, &format!("s{stage}.conv"), 1)?;
            let r = tape.conv2d(
                x,
                p.get(&format!("s{stage}.reduce.w")),
                p.get(&format!("s{stage}.reduce.b")),
                1,
                0,
            )?;
            levels.push(r);
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four stages"),
        })
    }

    /// Resizes every level to the finest level's size and concatenates.
    pub fn fuse_features<T: Scalar>(&self, tape: &mut Tape<T>, pyr: &FeaturePyramid) -> Result<Var> {
        let (h, w) = {
            let s = tape.shape(pyr.levels[0]);
            (s[1], s[2])
        };
        let mut parts = vec![pyr.levels[0]];
        for &lvl in &pyr.levels[1..] {
            parts.push(tape.bilinear_upsample(lvl, h, w)?);
        }
        tape.concat(&parts)
    }

    /// Multiplicative level update followed by coarse-to-fine fusion. Returns
    /// the `S x S` probability map.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, pyr: &FeaturePyramid) -> Result<Var> {
        let updated = self.multiply_levels(tape, pyr)?;
        let mut x = updated[NUM_STAGES - 1];
        for level in (1..NUM_STAGES).rev() {
            x = tape.deconv2d(
                x,
                p.get(&format!("dec{level}.up.w")),
                p.get(&format!("dec{level}.up.b")),
            )?;
            let joined = tape.concat(&[x, updated[level - 1]])?;
            let mixed = tape.conv2d(
                joined,
                p.get(&format!("dec{level}.fuse.w")),
                p.get(&format!("dec{level}.fuse.b")),
                1,
                1,
            )?;
            x = tape.leaky_relu(mixed, T::lit(LEAK));
        }
        let logits = tape.conv2d(x, p.get("head.w"), p.get("head.b"), 1, 0)?;
        let s = self.config.input_size;
        let full = tape.bilinear_upsample(logits, s, s)?;
        let prob = tape.sigmoid(full);
        tape.reshape(prob, &[s, s])
    }

    /// `u_i = f_i * prod_{j > i} resize(f_j)`.
    pub fn multiply_levels<T: Scalar>(&self, tape: &mut Tape<T>, pyr: &FeaturePyramid) -> Result<[Var; NUM_STAGES]> {
        let mut out = pyr.levels;
        for i in 0..NUM_STAGES - 1 {
            let (h, w) = {
                let s = tape.shape(pyr.levels[i]);
                (s[1], s[2])
            };
            let mut acc = pyr.levels[i];
            for &deeper in &pyr.levels[i + 1..] {
                let up = tape.bilinear_upsample(deeper, h, w)?;
                acc = tape.mul(acc, up)?;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, image: &Tensor<T>) -> Result<ModelOutput> {
        let x = tape.constant(image.clone());
        let pyr = self.encode(tape, p, x)?;
        let f = self.fuse_features(tape, &pyr)?;
        let m = self.decode(tape, p, &pyr)?;
        Ok(ModelOutput { m, f })
    }

    /// Forward pass of each image on the same tape.
    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        images: &[Tensor<T>],
    ) -> Result<Vec<ModelOutput>> {
        images.iter().map(|img| self.forward(tape, p, img)).collect()
    }

    /// Forward pass on a detached tape; the outputs carry no graph.
    pub fn forward_teacher<T: Scalar>(&self, params: &ParamSet<T>, image: &Tensor<T>) -> Result<TeacherOutput<T>> {
        let mut tape = Tape::detached();
        let p = self.bind(&mut tape, params)?;
        let out = self.forward(&mut tape, &p, image)?;
        Ok(TeacherOutput {
            m: tape.value(out.m).clone(),
            f: tape.value(out.f).clone(),
        })
    }
}

fn build_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let conv = |layout: &mut Vec<(String, Vec<usize>)>, name: &str, cout: usize, cin: usize, k: usize, norm: bool| {
        layout.push((format!("{name}.w"), vec![cout, cin, k, k]));
        layout.push((format!("{name}.b"), vec![cout]));
        if norm {
            layout.push((format!("{name}.gamma"), vec![cout]));
            layout.push((format!("{name}.beta"), vec![cout]));
        }
    };
    let ch = cfg.stage_channels;
    let cr = cfg.reduced_channels;
    conv(&mut layout, "stem", ch[0], 3, 3, true);
    let mut cin = ch[0];
    for (i, &c) in ch.iter().enumerate() {
        let s = i + 1;
        conv(&mut layout, &format!("s{s}.down"), c, cin, 3, true);
        conv(&mut layout, &format!("s{s}.conv"), c, c, 3, true);
        conv(&mut layout, &format!("s{s}.reduce"), cr, c, 1, false);
        cin = c;
    }
    for level in (1..NUM_STAGES).rev() {
        layout.push((format!("dec{level}.up.w"), vec![cr, cr, 2, 2]));
        layout.push((format!("dec{level}.up.b"), vec![cr]));
        conv(&mut layout, &format!("dec{level}.fuse"), cr, 2 * cr, 3, false);
    }
    conv(&mut layout, "head", 1, cr, 1, false);
    layout
}
