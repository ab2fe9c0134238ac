use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxseg::checkpoint::Checkpoint;
use boxseg::data::{gen_dataset, load_dataset, read_boxes, read_ppm, save_dataset, Manifest};
use boxseg::harness::{ablate, evaluate_checkpoint, export_maps, TrainConfig, Trainer};
use boxseg::metrics::scores_csv;
use boxseg::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boxseg", version, about = "Box-supervised segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Split tag written to the manifest.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset manifest and write per-image CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground-truth masks as predictions.
        #[arg(long)]
        gt_as_pred: bool,
    },
    /// Write m, p_m, p, c and m_ctr maps for one image as PGM files.
    ExportMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        boxes: Option<PathBuf>,
    },
    /// Train and score each comma-separated preset over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "baseline,ibox,full")]
        flags: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { seed, count, size, out, split } => {
            if count == 0 {
                return Err(Error::Config("count must be positive".into()));
            }
            let samples = gen_dataset(seed, count, size)?;
            let manifest = save_dataset(&out, &samples, &split)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let mut trainer = Trainer::new(cfg)?;
            let log = trainer.train()?;
            if let Some(e) = log.epochs.last() {
                let s = &e.report.summary;
                println!("epoch {} step {} mdice {:.4} miou {:.4} f1 {:.4}", e.epoch, e.step, s.m_dice, s.m_iou, s.f1);
            }
        }
        Command::Eval { ckpt, data, out, gt_as_pred } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let samples = load_dataset(&Manifest::load(&data)?)?;
            let report = evaluate_checkpoint(&ckpt, &samples, gt_as_pred)?;
            write_file(&out, &scores_csv(&report.scores))?;
            let s = &report.summary;
            println!(
                "{} images: mdice {:.4} miou {:.4} precision {:.4} recall {:.4} f1 {:.4}",
                report.scores.len(),
                s.m_dice,
                s.m_iou,
                s.precision,
                s.recall,
                s.f1
            );
        }
        Command::ExportMaps { ckpt, image, out, boxes } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let image = read_ppm(&image)?;
            let shape = image.shape();
            let frame = (shape[1], shape[2]);
            let boxes = boxes.map(|p| read_boxes(&p, Some(frame))).transpose()?;
            for p in export_maps(&ckpt, &image, boxes.as_deref(), &out)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { config, flags } => {
            let cfg = TrainConfig::load(&config)?;
            let presets: Vec<String> = flags.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if presets.is_empty() {
                return Err(Error::Config("no presets given".into()));
            }
            println!("{}", boxseg::harness::ABLATION_CSV_HEADER);
            for row in ablate(&cfg, &presets)? {
                println!("{}", row.csv_row());
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
