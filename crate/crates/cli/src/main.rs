use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mubert::checkpoint;
use mubert::config::TrainConfig;
use mubert::data::manifest::{write_dataset, Manifest};
use mubert::data::pnm::load_image;
use mubert::data::synth::generate_pair;
use mubert::heatmap::write_spot;
use mubert::model::MuBert;
use mubert::rng::mix_seed;
use mubert::train::{evaluate, finetune, labeled_sets, log_text, pretrain, spot_maps};
use mubert::{Error, Result};

#[derive(Parser)]
#[command(name = "mubert", version, about = "Micro-motion transformer: pretraining, recognition and spotting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic pretraining pairs and labeled train/test sets.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recognition fine-tuning; without `--init` the backbone starts random.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heatmaps of diagonal weights, saliency and combined weights.
    Spot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        onset: PathBuf,
        #[arg(long)]
        apex: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// UF1/UAR of a classifier checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `.json` writes JSON, anything else the text table.
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let ps = cfg.model.patch_size;
    let pairs = (0..cfg.gen_count as u64)
        .map(|i| generate_pair(&cfg.gen, mix_seed(cfg.train_data_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&out.join("pretrain"), &pairs, ps)?;
    let (train, test) = labeled_sets(cfg)?;
    write_dataset(&out.join("train"), &train, ps)?;
    write_dataset(&out.join("test"), &test, ps)?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    info!("wrote {} pretraining pairs, {} train and {} test samples to {}", pairs.len(), train.len(), test.len(), out.display());
    Ok(())
}

fn run_pretrain(cfg: &TrainConfig, out: &Path) -> Result<()> {
    write(&sibling(out, ".config.txt"), &cfg.to_text())?;
    let every = cfg.pretrain.log_every.max(1);
    let result = pretrain(cfg, |e| {
        if e.step % every == 0 || e.step == 1 {
            info!("step {} lr {:.3e} loss {:.5} rec {:.5} agg {:.5}", e.step, e.lr, e.loss, e.reconstruction, e.agreement);
        }
    })?;
    checkpoint::save(out, cfg, &result.model)?;
    write(&sibling(out, ".log"), &log_text(&result.log))?;
    info!("saved {}", out.display());
    Ok(())
}

fn compatible(a: &TrainConfig, b: &TrainConfig) -> bool {
    let (x, y) = (&a.model, &b.model);
    (x.height, x.width, x.channels, x.patch_size, x.d, x.enc_layers, x.n_heads, x.mlp_ratio)
        == (y.height, y.width, y.channels, y.patch_size, y.d, y.enc_layers, y.n_heads, y.mlp_ratio)
}

fn run_finetune(cfg: &TrainConfig, init: Option<&Path>, out: &Path) -> Result<()> {
    write(&sibling(out, ".config.txt"), &cfg.to_text())?;
    let model = match init {
        Some(path) => {
            let (init_cfg, model) = checkpoint::load(path)?;
            if !compatible(&init_cfg, cfg) {
                return Err(Error::config(format!("checkpoint {} does not match the configured model", path.display())));
            }
            model
        }
        None => MuBert::new(cfg.model.clone(), cfg.seed)?,
    };
    let (train, test) = labeled_sets(cfg)?;
    let every = cfg.pretrain.log_every.max(1);
    let result = finetune(cfg, model, &train, &test, |e| {
        if e.step % every == 0 || e.step == 1 {
            info!("step {} lr {:.3e} loss {:.5}", e.step, e.lr, e.loss);
        }
    })?;
    let mut saved = cfg.clone();
    saved.model.classes = result.model.config.classes;
    checkpoint::save(out, &saved, &result.model)?;
    write(&sibling(out, ".log"), &log_text(&result.log))?;
    write(&sibling(out, ".report.json"), &result.report.to_json())?;
    println!("{}", result.report.to_text());
    Ok(())
}

fn run_spot(ckpt: &Path, onset: &Path, apex: &Path, out: &Path) -> Result<()> {
    let (_, model) = checkpoint::load(ckpt)?;
    let a = load_image(onset)?;
    let b = load_image(apex)?;
    let maps = spot_maps(&model, &a, &b)?;
    for p in write_spot(out, &maps, &a, &b)? {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn run_eval(ckpt: &Path, manifest: &Path, report: &Path) -> Result<()> {
    let (cfg, model) = checkpoint::load(ckpt)?;
    let samples = Manifest::load(manifest)?.samples(cfg.model.patch_size)?;
    if samples.is_empty() {
        return Err(Error::data(format!("manifest {} is empty", manifest.display())));
    }
    let r = evaluate(&cfg, &model, &samples)?;
    let json = report.extension().is_some_and(|e| e == "json");
    write(report, &if json { r.to_json() } else { r.to_text() })?;
    write(&sibling(report, ".config.txt"), &cfg.to_text())?;
    println!("uf1 {:.4} uar {:.4}", r.uf1, r.uar);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, overrides, out } => gen_data(&load_config(config.as_deref(), &overrides)?, &out),
        Command::Pretrain { config, overrides, out } => run_pretrain(&load_config(config.as_deref(), &overrides)?, &out),
        Command::Finetune { config, overrides, init, out } => {
            run_finetune(&load_config(config.as_deref(), &overrides)?, init.as_deref(), &out)
        }
        Command::Spot { ckpt, onset, apex, out } => run_spot(&ckpt, &onset, &apex, &out),
        Command::Eval { ckpt, manifest, report } => run_eval(&ckpt, &manifest, &report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
