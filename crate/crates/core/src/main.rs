use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use efpn_core::assign::GtImage;
use efpn_core::dcloss::{verify_theorem1, DcLossParams, VerifyTolerances};
use efpn_core::harness::eval::evaluate_model;
use efpn_core::harness::experiments::{self, reports_dir, write_json, write_text};
use efpn_core::harness::train::curve_csv;
use efpn_core::harness::{train, Detector, ModelConfig, RegressionLoss, RunConfig};
use efpn_core::params::Checkpoint;
use efpn_core::synth::{self, Scene};
use efpn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "efpn", version, about = "Tiny-object detection experiments on synthetic scenes")]
struct Cli {
    /// Overrides the data and training seeds of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    SmoothL1,
    Dcloss,
    DclossSwapped,
}

impl From<LossArg> for RegressionLoss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::SmoothL1 => RegressionLoss::SmoothL1,
            LossArg::Dcloss => RegressionLoss::Dcloss,
            LossArg::DclossSwapped => RegressionLoss::DclossSwapped,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train and validation datasets under <out>/data.
    Gen {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
    },
    /// Per-level positive/negative anchor statistics.
    Audit {
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        scenes: usize,
    },
    /// Numeric checks of the regression loss's gradient phases.
    VerifyLoss {
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        swap_weights: bool,
    },
    /// Train a detector and evaluate it on the validation split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Pyramid-level subset ablation over several seeds.
    Ablate,
    /// One training run per loss threshold.
    SweepDelta,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scenes_or_split(cfg: &RunConfig, train: Option<&Path>, val: Option<&Path>) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let (gen_train, gen_val) = match (train, val) {
        (Some(_), Some(_)) => (Vec::new(), Vec::new()),
        _ => experiments::split(cfg, cfg.train_scenes, cfg.val_scenes)?,
    };
    let tr = match train {
        Some(d) => synth::read_dataset(d)?.scenes,
        None => gen_train,
    };
    let va = match val {
        Some(d) => synth::read_dataset(d)?.scenes,
        None => gen_val,
    };
    Ok((tr, va))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out;
    let reports = reports_dir(out)?;
    match &cli.command {
        Command::Gen { train, val } => {
            let n_train = train.unwrap_or(cfg.train_scenes);
            let n_val = val.unwrap_or(cfg.val_scenes);
            let t = synth::write_dataset_from(&cfg.data, 0, n_train, &out.join("data/train"))?;
            let v = synth::write_dataset_from(&cfg.data, n_train as u64, n_val, &out.join("data/val"))?;
            write_json(&reports.join("gen.json"), &serde_json::json!({"train": t.manifest, "val": v.manifest}))?;
            info!("wrote {n_train} train and {n_val} validation scenes");
        }
        Command::Audit { data, scenes } => {
            let images: Vec<GtImage> = match data {
                Some(d) => synth::read_gt_images(d)?,
                None => synth::generate_scenes(&cfg.data, 0, *scenes)?.iter().map(Scene::gt_image).collect(),
            };
            let report = experiments::experiment_fig1(&images, &cfg.model.anchors(), &cfg.assign)?;
            experiments::write_fig1(out, &report)?;
            for (l, share) in &report.positive_share {
                println!("{l}: {:.2}% of positives", share * 100.0);
            }
        }
        Command::VerifyLoss { k, delta, swap_weights } => {
            let base = DcLossParams::default();
            let mut p = DcLossParams::new(k.unwrap_or(base.k), delta.unwrap_or(base.delta));
            p.swap_weights = *swap_weights;
            p.validate()?;
            let report = verify_theorem1(&p, &VerifyTolerances::default())?;
            write_json(&reports.join("verify_loss.json"), &report)?;
            for n in &report.discrepancy_notes {
                println!("note: {n}");
            }
        }
        Command::Train { data, val, loss } => {
            if let Some(l) = loss {
                cfg.train.regression = (*l).into();
            }
            let (tr, va) = scenes_or_split(&cfg, data.as_deref(), val.as_deref())?;
            let det = Detector::new(cfg.model.clone())?;
            let outcome = train(&det, &tr, &cfg.train, &cfg.assign)?;
            outcome.checkpoint.save(&out.join("checkpoint"))?;
            write_text(&reports.join("train_curve.csv"), &curve_csv(&outcome.curve))?;
            write_json(&reports.join("train_curve.json"), &outcome.curve)?;
            if !va.is_empty() {
                let eval = evaluate_model(&det, &outcome.checkpoint.params, &va, &cfg.eval)?;
                write_json(&reports.join("eval.json"), &eval)?;
                println!("{}", serde_json::to_string(&eval)?);
            }
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::load(checkpoint)?;
            let model: ModelConfig = match ck.meta.get("model") {
                Some(m) => serde_json::from_value(m.clone())?,
                None => cfg.model.clone(),
            };
            let det = Detector::new(model)?;
            let scenes = match data {
                Some(d) => synth::read_dataset(d)?.scenes,
                None => experiments::split(&cfg, 0, cfg.val_scenes)?.1,
            };
            let eval = evaluate_model(&det, &ck.params, &scenes, &cfg.eval)?;
            write_json(&reports.join("eval.json"), &eval)?;
            println!("{}", serde_json::to_string(&eval)?);
        }
        Command::Ablate => {
            let r = experiments::experiment_ablation(&cfg)?;
            experiments::write_ablation(out, &r)?;
            print!("{}", experiments::ablation_csv(&r));
        }
        Command::SweepDelta => {
            let rows = experiments::experiment_delta_sweep(&cfg)?;
            experiments::write_sweep(out, &rows)?;
            print!("{}", experiments::sweep_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if let Error::Diverged { last_good, .. } = &e {
                let dir = cli.out.join("last_good");
                if let Err(save) = last_good.save(&dir) {
                    error!("could not save the last good checkpoint: {save}");
                } else {
                    error!("last good checkpoint written to {}", dir.display());
                }
            }
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
