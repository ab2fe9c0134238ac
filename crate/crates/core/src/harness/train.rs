//! Teacher-student training loop.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use super::config::TrainConfig;
use super::eval::{evaluate_samples, EvalReport};
use crate::checkpoint::Checkpoint;
use crate::data::{gen_dataset, load_dataset, DataSample, Manifest};
use crate::error::{DataError, Error, Result};
use crate::losses::{mask_loss, total_loss, LossValues, TeacherView};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::rng::{derive_seed, SplitMix64};
use crate::teacher::{
    anchor_contrast, ema_update, make_anchors, perturb_input, select_features, BACKGROUND_THRESHOLD, POLYP_THRESHOLD,
};
use crate::tensor::{Tape, Tensor};

const SHUFFLE_SALT: u64 = 0x5348_5546_464C_4531;
const PERTURB_SALT: u64 = 0x5045_5254_5552_4231;

/// Batch means for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossValues,
    /// Mean selected polyp / background positions per teacher-guided item.
    pub n_polyp: f64,
    pub n_background: f64,
    /// Items whose teacher selection produced usable anchors.
    pub anchored: usize,
    /// Means over anchored items of the teacher-feature cosines to the polyp anchor.
    pub cos_polyp: Option<f64>,
    pub cos_background: Option<f64>,
}

impl StepRecord {
    pub fn gap(&self) -> Option<f64> {
        Some(self.cos_polyp? - self.cos_background?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub step: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const STEP_CSV_HEADER: &str = "unix_ms,elapsed_ms,seed,step,epoch,loss_total,loss_ibox,loss_cla,loss_px,n_polyp,n_background,anchored,cos_polyp,cos_background,gap";
pub const EPOCH_CSV_HEADER: &str = "unix_ms,elapsed_ms,seed,epoch,step,mdice,miou,dice,dice_box,precision,recall,f1,mean_hd,rectangularity,feature_gap";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Training and held-out splits named by `config`.
pub fn load_splits(config: &TrainConfig) -> Result<(Vec<DataSample>, Vec<DataSample>)> {
    let synth = |seed, count, prefix: &str| -> Result<Vec<DataSample>> {
        Ok(gen_dataset(seed, count, config.image_size)?
            .iter()
            .enumerate()
            .map(|(i, s)| s.to_data_sample(format!("{prefix}{i:05}")))
            .collect())
    };
    let train = match &config.train_manifest {
        Some(p) => load_dataset(&Manifest::load(p)?)?,
        None => synth(config.data_seed, config.train_count, "train")?,
    };
    let eval = match &config.eval_manifest {
        Some(p) => load_dataset(&Manifest::load(p)?)?,
        None if config.eval_count > 0 => synth(config.eval_seed, config.eval_count, "eval")?,
        None => Vec::new(),
    };
    for s in train.iter().chain(&eval) {
        if s.height() != config.image_size || s.width() != config.image_size {
            return Err(DataError::SizeMismatch {
                path: PathBuf::from(&s.name),
                expected: (config.image_size, config.image_size),
                found: (s.height(), s.width()),
            }
            .into());
        }
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    Ok((train, eval))
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    train: Vec<DataSample>,
    eval: Vec<DataSample>,
    student: ParamSet<f64>,
    teacher: ParamSet<f64>,
    opt: AdamW<f64>,
    log: RunLog,
    started: Instant,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, eval) = load_splits(&config)?;
        Self::with_data(config, train, eval)
    }

    pub fn with_data(config: TrainConfig, train: Vec<DataSample>, eval: Vec<DataSample>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let model = Model::new(config.model_config())?;
        let student = model.init_params::<f64>();
        let opt = AdamW::new(&student, config.learning_rate, config.weight_decay);
        Ok(Self {
            teacher: student.clone(),
            student,
            opt,
            model,
            train,
            eval,
            config,
            log: RunLog::default(),
            started: Instant::now(),
            order: None,
        })
    }

    /// Restores parameters, teacher, optimizer moments and step count.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config != self.model.config().clone() {
            return Err(Error::Config(format!(
                "checkpoint model {:?} differs from configured {:?}",
                ckpt.config,
                self.model.config()
            )));
        }
        let student = ckpt.section("student/");
        let teacher = ckpt.section("teacher/");
        let m = ckpt.section("adamw.m/");
        let v = ckpt.section("adamw.v/");
        for set in [&student, &teacher, &m, &v] {
            set.check_mirrors(&self.student)
                .map_err(|e| Error::Checkpoint(format!("training state does not match the model: {e}")))?;
        }
        let step = ckpt
            .records
            .get("state/step")
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| Error::Checkpoint("missing state/step".into()))?;
        self.student = student;
        self.teacher = teacher;
        self.opt.m = m;
        self.opt.v = v;
        self.opt.step = step as u64;
        self.order = None;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.model.config().clone(),
            records: ParamSet::new(),
        };
        ck.push_section("student/", &self.student);
        ck.push_section("teacher/", &self.teacher);
        ck.push_section("adamw.m/", &self.opt.m);
        ck.push_section("adamw.v/", &self.opt.v);
        ck.records
            .push("state/step", Tensor::new(&[1], vec![self.opt.step as f64]).expect("one element"));
        ck
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn student(&self) -> &ParamSet<f64> {
        &self.student
    }

    pub fn teacher(&self) -> &ParamSet<f64> {
        &self.teacher
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.train.len()).collect();
            SplitMix64::new(derive_seed(self.config.seed ^ SHUFFLE_SALT, epoch as u64)).shuffle(&mut idx);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("set above").1
    }

    /// Seed of the teacher perturbation for item `item` of step `step`.
    pub fn perturb_seed(&self, step: u64, item: usize) -> u64 {
        derive_seed(derive_seed(self.config.seed ^ PERTURB_SALT, step), item as u64)
    }

    /// One optimizer step on the next batch, followed by the teacher update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let spe = self.steps_per_epoch();
        let step = self.opt.step;
        let epoch = (step / spe as u64) as usize;
        let pos = (step % spe as u64) as usize;
        let b = self.config.batch_size;
        let batch: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
        };
        let scale = 1.0 / batch.len() as f64;
        let flags = self.config.flags();
        let mut grads = self.student.zeros_like().tensors().to_vec();
        let mut rec = StepRecord {
            step: step + 1,
            epoch: epoch + 1,
            losses: LossValues::default(),
            n_polyp: 0.0,
            n_background: 0.0,
            anchored: 0,
            cos_polyp: None,
            cos_background: None,
        };
        let (mut guided, mut cos_p, mut cos_b) = (0usize, 0.0, 0.0);

        for (item, &idx) in batch.iter().enumerate() {
            let sample = &self.train[idx];
            let mut tape = Tape::new();
            let p = self.model.bind(&mut tape, &self.student)?;
            let out = self.model.forward(&mut tape, &p, &sample.image)?;
            let bundle = match sample.box_mask() {
                Some(bm) => {
                    let bm = bm?;
                    if flags.needs_teacher() {
                        let input = if self.config.perturb_teacher {
                            perturb_input(&sample.image, self.perturb_seed(step, item))?
                        } else {
                            sample.image.clone()
                        };
                        let tea = self.model.forward_teacher(&self.teacher, &input)?;
                        let sel = select_features(&tea.f, &bm, &tea.m, POLYP_THRESHOLD, BACKGROUND_THRESHOLD)?;
                        let anchors = make_anchors(&sel, &tea.f, None)?;
                        guided += 1;
                        rec.n_polyp += sel.polyp_index.len() as f64;
                        rec.n_background += sel.background_index.len() as f64;
                        if anchors.valid {
                            let ac = anchor_contrast(&tea.f, &anchors.polyp, &sel.polyp_index, &sel.background_index)?;
                            rec.anchored += 1;
                            cos_p += ac.polyp_cos;
                            cos_b += ac.background_cos;
                        }
                        let view = TeacherView {
                            m_tea: &tea.m,
                            anchors: Some(&anchors),
                        };
                        total_loss(&mut tape, out.m, out.f, &bm, Some(view), flags)?
                    } else {
                        total_loss(&mut tape, out.m, out.f, &bm, None, flags)?
                    }
                }
                None => {
                    let mask = sample.mask.as_ref().expect("manifest entries carry a mask or boxes");
                    mask_loss(&mut tape, out.m, mask)?
                }
            };
            let v = bundle.values(&tape);
            if !v.total.is_finite() {
                return Err(self.numeric_failure(step, &batch, &format!("loss {v:?} on item {item}")));
            }
            rec.losses.ibox += v.ibox * scale;
            rec.losses.cla += v.cla * scale;
            rec.losses.px += v.px * scale;
            rec.losses.total += v.total * scale;
            let scaled = tape.scale(bundle.total, scale);
            tape.backward(scaled)?;
            for (acc, &var) in grads.iter_mut().zip(p.vars()) {
                if let Some(g) = tape.grad(var) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
            }
        }
        if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(self.numeric_failure(step, &batch, "non-finite gradient"));
        }
        if guided > 0 {
            rec.n_polyp /= guided as f64;
            rec.n_background /= guided as f64;
        }
        if rec.anchored > 0 {
            rec.cos_polyp = Some(cos_p / rec.anchored as f64);
            rec.cos_background = Some(cos_b / rec.anchored as f64);
        }
        self.opt.step(&mut self.student, &grads)?;
        ema_update(&mut self.teacher, &self.student, self.config.ema_momentum)?;
        self.append_step_csv(&rec)?;
        self.log.steps.push(rec.clone());
        Ok(rec)
    }

    fn numeric_failure(&self, step: u64, batch: &[usize], what: &str) -> Error {
        let items: Vec<String> = batch
            .iter()
            .enumerate()
            .map(|(k, &i)| format!("{} (perturb seed {:#018x})", self.train[i].name, self.perturb_seed(step, k)))
            .collect();
        Error::Numeric {
            step: step + 1,
            detail: format!("{what}; run seed {}; batch: {}", self.config.seed, items.join(", ")),
        }
    }

    /// Scores the student on the held-out split.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_samples(&self.model, &self.student, &self.eval, false)
    }

    /// Runs the remaining steps of the current epoch, then evaluates and
    /// checkpoints as configured.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        let spe = self.steps_per_epoch() as u64;
        let target = (self.opt.step / spe + 1) * spe;
        while self.opt.step < target {
            self.step()?;
        }
        let epoch = (self.opt.step / spe) as usize;
        let record = if self.config.eval_every_epoch && !self.eval.is_empty() {
            let rec = EpochRecord {
                epoch,
                step: self.opt.step,
                report: self.evaluate()?,
            };
            self.append_epoch_csv(&rec)?;
            self.log.epochs.push(rec.clone());
            Some(rec)
        } else {
            None
        };
        let every = self.config.checkpoint_every;
        if every > 0 && epoch % every == 0 && epoch < self.config.epochs {
            self.save_checkpoint(&format!("epoch_{epoch:03}.bsl"))?;
        }
        Ok(record)
    }

    /// Trains up to the configured epoch count and writes the final checkpoint.
    pub fn train(&mut self) -> Result<&RunLog> {
        let spe = self.steps_per_epoch() as u64;
        while self.opt.step < self.config.epochs as u64 * spe {
            self.run_epoch()?;
        }
        self.save_checkpoint("final.bsl")?;
        if let Some(dir) = &self.config.out_dir {
            fs::write(dir.join("config.txt"), self.config.to_text())?;
        }
        Ok(&self.log)
    }

    fn save_checkpoint(&mut self, name: &str) -> Result<()> {
        if let Some(dir) = &self.config.out_dir {
            let path = dir.join("checkpoints").join(name);
            self.checkpoint().save(&path)?;
            self.log.checkpoints.push(path);
        }
        Ok(())
    }

    fn append_row(&self, file: &str, header: &str, row: &str) -> Result<()> {
        let Some(dir) = &self.config.out_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir)?;
        append_csv(&dir.join(file), header, row)
    }

    fn append_step_csv(&self, r: &StepRecord) -> Result<()> {
        let row = format!(
            "{},{},{},{},{},{:.8},{:.8},{:.8},{:.8},{:.2},{:.2},{},{},{},{}",
            unix_ms(),
            self.started.elapsed().as_millis(),
            self.config.seed,
            r.step,
            r.epoch,
            r.losses.total,
            r.losses.ibox,
            r.losses.cla,
            r.losses.px,
            r.n_polyp,
            r.n_background,
            r.anchored,
            opt(r.cos_polyp),
            opt(r.cos_background),
            opt(r.gap()),
        );
        self.append_row("steps.csv", STEP_CSV_HEADER, &row)
    }

    fn append_epoch_csv(&self, r: &EpochRecord) -> Result<()> {
        let s = &r.report.summary;
        let row = format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            unix_ms(),
            self.started.elapsed().as_millis(),
            self.config.seed,
            r.epoch,
            r.step,
            s.m_dice,
            s.m_iou,
            s.dice,
            r.report.dice_box,
            s.precision,
            s.recall,
            s.f1,
            opt(s.mean_hd),
            opt(s.rectangularity),
            opt(r.report.feature_gap),
        );
        self.append_row("epochs.csv", EPOCH_CSV_HEADER, &row)
    }
}

/// Appends `row`, writing `header` first when the file is new.
pub fn append_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}
