//! Training, evaluation, ablation and map export.

mod config;
mod eval;
mod train;

pub use config::{parse_preset, TrainConfig};
pub use eval::{
    compute_maps, evaluate_checkpoint, evaluate_samples, export_maps, gt_feature_gap, student_params, teacher_params,
    EvalReport, MapSet,
};
pub use train::{append_csv, load_splits, EpochRecord, RunLog, StepRecord, Trainer, EPOCH_CSV_HEADER, STEP_CSV_HEADER};

use crate::error::Result;
use crate::metrics::Summary;

/// Final held-out scores of one ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub preset: String,
    pub seed: u64,
    pub summary: Summary,
    pub dice_box: f64,
    /// Ground-truth feature gap after the first and the last epoch.
    pub first_gap: Option<f64>,
    pub final_gap: Option<f64>,
}

pub const ABLATION_CSV_HEADER: &str =
    "preset,seed,mdice,miou,dice,dice_box,precision,recall,f1,mean_hd,rectangularity,first_gap,final_gap";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let s = &self.summary;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.preset,
            self.seed,
            s.m_dice,
            s.m_iou,
            s.dice,
            self.dice_box,
            s.precision,
            s.recall,
            s.f1,
            o(s.mean_hd),
            o(s.rectangularity),
            o(self.first_gap),
            o(self.final_gap),
        )
    }
}

/// Trains one run with the given preset and seed, returning its final scores.
pub fn run_preset(base: &TrainConfig, preset: &str, seed: u64) -> Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.set_flags(parse_preset(preset)?);
    cfg.seed = seed;
    cfg.out_dir = base
        .out_dir
        .as_ref()
        .map(|d| d.join(format!("{}_seed{seed}", preset.replace('+', "-"))));
    let mut trainer = Trainer::new(cfg)?;
    trainer.train()?;
    let report = match trainer.log().epochs.last() {
        Some(e) if e.epoch == trainer.config().epochs => e.report.clone(),
        _ => trainer.evaluate()?,
    };
    let log = trainer.log();
    Ok(AblationRow {
        preset: preset.to_string(),
        seed,
        summary: report.summary,
        dice_box: report.dice_box,
        first_gap: log.epochs.first().and_then(|e| e.report.feature_gap),
        final_gap: report.feature_gap,
    })
}

/// Every preset for every seed in `base.ablation_seeds` (or `base.seed`).
/// Rows are appended to `ablation.csv` in the output directory as they finish.
pub fn ablate(base: &TrainConfig, presets: &[String]) -> Result<Vec<AblationRow>> {
    for p in presets {
        parse_preset(p)?;
    }
    let seeds = if base.ablation_seeds.is_empty() {
        vec![base.seed]
    } else {
        base.ablation_seeds.clone()
    };
    let mut rows = Vec::new();
    for preset in presets {
        for &seed in &seeds {
            let row = run_preset(base, preset, seed)?;
            if let Some(dir) = &base.out_dir {
                std::fs::create_dir_all(dir)?;
                append_csv(&dir.join("ablation.csv"), ABLATION_CSV_HEADER, &row.csv_row())?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
