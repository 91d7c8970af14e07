use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use farmamba::ablation::{ablation_suite, ROWS};
use farmamba::trainer::{load_data, load_for_eval};
use farmamba::verify;
use farmamba::{Dataset, RunConfig, SyntheticSpec};
use farmamba_core::msfm::Variant;

#[derive(Parser)]
#[command(name = "farmamba", version, about = "Frequency-aware Mamba segmentation: training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from `last.farm` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of image/mask pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        /// Config to use instead of the `config.json` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the numerical property checks.
    Verify {
        /// Also run the multi-seed ablation trend (slow).
        #[arg(long)]
        ablation: bool,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train the ablation grid and print the DSC / MIoU table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "dwt,fft,dct")]
        variants: Vec<Variant>,
        /// Row labels; all six by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
    },
    /// Write a synthetic dataset as `train/` and `val/` image/mask folders.
    GenData {
        /// JSON generator settings; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { config, resume, out } => {
            let mut cfg = load_config(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            if cfg.output_dir.is_none() {
                bail!("no output directory: set `output_dir` in the config or pass --out");
            }
            for (i, o) in farmamba::train(&cfg, resume)?.iter().enumerate() {
                match &o.final_val {
                    Some(r) => println!(
                        "run {i}: final val DSC {:.4} MIoU {:.4}, best val DSC {:.4}",
                        r.dsc, r.miou, o.best_val_dsc
                    ),
                    None => println!("run {i}: no validation rows"),
                }
            }
            Ok(true)
        }
        Cmd::Eval { ckpt, data, config } => {
            let cfg = config.as_ref().map(load_config).transpose()?;
            let (cfg, model, params) = load_for_eval(&ckpt, cfg.as_ref())?;
            let ds = Dataset::load(&data, Some(cfg.data.size))?;
            let r = params.evaluate(&model, &ds, &cfg)?;
            println!("samples {}  seg_loss {:.5}", ds.len(), r.seg_loss);
            println!("DSC {:.4}  MIoU {:.4}", r.report.dsc, r.report.miou);
            for (c, (d, j)) in r.report.dice.iter().zip(&r.report.iou).enumerate() {
                let f = |v: &Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                let name = ds.names.get(c).map(String::as_str).unwrap_or("");
                println!("class {c} {name:<12} dice {}  iou {}", f(d), f(j));
            }
            Ok(true)
        }
        Cmd::Verify { ablation, seeds } => {
            let mut all_ok = true;
            for c in verify::fast_checks() {
                println!("{c}");
                all_ok &= c.passed;
            }
            if ablation {
                let cfg = verify::ablation_config();
                let (train, val) = load_data(&cfg)?;
                let (c, table) = verify::ablation_trend(&cfg, &seeds, &train, &val);
                print!("{}", table.render(&[cfg.msfm.variant]));
                println!("{c}");
                all_ok &= c.passed;
            }
            Ok(all_ok)
        }
        Cmd::Ablate {
            config,
            seeds,
            variants,
            rows,
        } => {
            let cfg = load_config(&config)?;
            let rows: Vec<String> = if rows.is_empty() {
                ROWS.iter().map(|(n, _)| n.to_string()).collect()
            } else {
                rows
            };
            let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
            let (train, val) = load_data(&cfg)?;
            let table = ablation_suite(&cfg, &rows, &variants, &seeds, &train, &val)?;
            print!("{}", table.render(&variants));
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                table.write_csv(&dir.join("ablation.csv"))?;
                std::fs::write(dir.join("ablation.txt"), table.render(&variants))?;
            }
            Ok(true)
        }
        Cmd::GenData { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SyntheticSpec::default(),
            };
            spec.validate()?;
            let (train, val) = spec.generate()?;
            train.save(&out.join("train"))?;
            val.save(&out.join("val"))?;
            println!("wrote {} train and {} val samples to {}", train.len(), val.len(), out.display());
            Ok(true)
        }
    }
}
