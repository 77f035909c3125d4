use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use sas_core::backbone::Backbone;
use sas_core::config::ExperimentConfig;
use sas_core::data::DatasetSpec;
use sas_core::error::{Error, Result};
use sas_core::experiment::{downstream_splits, few_shot_sweep, mean_top1, pretrain_source, run_one};
use sas_core::gradcheck::{check_model_gradients, model_setup, small_model_setup, DEFAULT_STEP};
use sas_core::metrics::ppt_score;
use sas_core::params::ParamSet;
use sas_core::results::{emit_results, jsonl_path};
use sas_core::sas::{param_count, SasConfig};
use sas_core::train::{evaluate_top1, RunResult};
use sas_core::variants::{load_model, save_model, VariantKind};

#[derive(Parser)]
#[command(name = "sas", version, about = "Shared + layer-specific adapters on a frozen ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapter parameter counts, including a sweep over the hypernetwork count M.
    Params {
        /// Read d, L, d', r, r' from an experiment config instead of the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 768)]
        d: usize,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        d_prime: usize,
        #[arg(long, default_value_t = 4)]
        r: usize,
        #[arg(long, default_value_t = 8)]
        r_prime: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,3,4,6")]
        m_list: Vec<usize>,
    },
    /// Performance-parameter trade-off score for an accuracy (percent) and parameter count.
    Ppt { top1: f64, params: u64 },
    /// Checks analytic gradients of every trainable scalar against finite differences.
    Gradcheck {
        /// Check a model with this config's backbone and adapter shape
        /// instead of the small built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Pretrains the backbone on the source task and saves it frozen.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes one variant over the configured seeds and writes results.
    Finetune {
        /// linear_probe | bias_only | shared_only | shared_plus_bias | full_sas
        #[arg(long)]
        variant: String,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Results CSV; a .jsonl log is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Also save the model trained with the first seed.
        #[arg(long)]
        model_out: Option<PathBuf>,
        /// Record measured wall time (makes results files non-reproducible).
        #[arg(long)]
        wall_time: bool,
    },
    /// Evaluates a saved model on a dataset spec (TOML).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Full adapter for each hypernetwork count M, averaged over seeds.
    AblateM {
        #[arg(long, value_delimiter = ',')]
        m_list: Option<Vec<usize>>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained backbone; pretrains from the config when omitted.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        wall_time: bool,
    },
    /// Full adapter trained on k shots per class for each k in the protocol.
    FewShot {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the default experiment config.
    DefaultConfig,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_backbone(path: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<Backbone<f32>> {
    let bb = match path {
        Some(p) => Backbone::load(p)?,
        None => {
            let out = pretrain_source(cfg)?;
            eprintln!("pretrained backbone: source train top-1 {:.2}%", out.train_top1);
            out.backbone
        }
    };
    if bb.config != cfg.backbone {
        return Err(Error::Config("backbone checkpoint does not match [backbone] in the config".into()));
    }
    Ok(bb)
}

fn write_results(results: &[RunResult], out: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = out {
        emit_results(results, path)?;
        eprintln!("wrote {} and {}", path.display(), jsonl_path(path).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Params {
            config,
            d,
            layers,
            d_prime,
            r,
            r_prime,
            m_list,
        } => {
            let base = match &config {
                Some(p) => ExperimentConfig::load(p)?.sas_config(),
                None => SasConfig {
                    d,
                    layers,
                    d_prime,
                    r,
                    r_prime,
                    m: 1,
                },
            };
            println!(
                "d={} L={} d'={} r={} r'={}",
                base.d, base.layers, base.d_prime, base.r, base.r_prime
            );
            println!("{:>4} {:>10} {:>8}", "M", "params", "M-params");
            for m in m_list {
                let c = SasConfig { m, ..base.clone() };
                c.validate()?;
                let p = param_count(&c);
                println!("{m:>4} {p:>10} {:>8.3}", p as f64 / 1e6);
            }
        }
        Command::Ppt { top1, params } => {
            if !(0.0..=100.0).contains(&top1) {
                return Err(Error::Config(format!("top1 must be in [0, 100], got {top1}")));
            }
            println!("{:.4}", ppt_score(top1, params));
        }
        Command::Gradcheck { config, seed, tol } => {
            let (bb, model, images, labels) = match &config {
                Some(p) => {
                    let cfg = ExperimentConfig::load(p)?;
                    let classes = cfg.backbone.num_classes_pretrain;
                    model_setup(cfg.backbone.clone(), cfg.sas_config(), 2, classes, seed)?
                }
                None => small_model_setup(seed)?,
            };
            let report = check_model_gradients(&bb, &model, &images, &labels, DEFAULT_STEP)?;
            println!(
                "checked {} scalars: max relative error {:.3e} at {}",
                report.scalars, report.max_rel_err, report.worst
            );
            if report.max_rel_err > tol {
                return Err(Error::Training {
                    step: 0,
                    reason: format!("gradient check exceeded tolerance {tol:e}"),
                });
            }
        }
        Command::Pretrain { config, out } => {
            let cfg = load_config(&config)?;
            let res = pretrain_source(&cfg)?;
            res.backbone.save(&out)?;
            println!(
                "source train top-1 {:.2}% after {} steps; backbone {} saved to {}",
                res.train_top1,
                res.log.losses.len(),
                &res.backbone.checksum()[..16],
                out.display()
            );
        }
        Command::Finetune {
            variant,
            backbone,
            config,
            out,
            model_out,
            wall_time,
        } => {
            let cfg = load_config(&config)?;
            let kind = VariantKind::from_name(&variant, &cfg.sas_config())?;
            let bb = load_backbone(&Some(backbone), &cfg)?;
            let (train, test) = downstream_splits(&cfg)?;
            let mut results = Vec::new();
            for (i, &seed) in cfg.protocol.seeds.iter().enumerate() {
                let start = Instant::now();
                let run = run_one(&cfg, &bb, &kind, seed, &train, &test)?;
                let mut result = run.result;
                if wall_time {
                    result.wall_time = start.elapsed().as_secs_f64();
                }
                println!(
                    "{} seed {seed}: top-1 {:.2}% ppt {:.4} ({} adapter params)",
                    result.variant, result.top1, result.ppt, result.adapter_params
                );
                if i == 0 {
                    if let Some(path) = &model_out {
                        save_model(path, &bb, &run.model)?;
                    }
                }
                results.push(result);
            }
            write_results(&results, &Some(out))?;
        }
        Command::Eval { model, data } => {
            let (bb, m) = load_model(&model)?;
            let text = std::fs::read_to_string(&data)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", data.display())))?;
            let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let dataset = spec.load()?;
            let top1 = evaluate_top1(&m, &bb, &dataset)?;
            println!("{}: top-1 {top1:.2}% on {} examples", m.kind.label(), dataset.len());
        }
        Command::AblateM {
            m_list,
            config,
            backbone,
            out,
            wall_time,
        } => {
            let cfg = load_config(&config)?;
            let m_list = m_list.unwrap_or_else(|| cfg.protocol.m_list.clone());
            let bb = load_backbone(&backbone, &cfg)?;
            let (train, test) = downstream_splits(&cfg)?;
            let mut results = Vec::new();
            println!("{:>4} {:>10} {:>8} {:>7}", "M", "params", "top-1", "ppt");
            for m in m_list {
                let kind = VariantKind::FullSas(cfg.sas_config_with_m(m));
                let mut rows = Vec::new();
                for &seed in &cfg.protocol.seeds {
                    let start = Instant::now();
                    let mut r = run_one(&cfg, &bb, &kind, seed, &train, &test)?.result;
                    if wall_time {
                        r.wall_time = start.elapsed().as_secs_f64();
                    }
                    rows.push(r);
                }
                let top1 = mean_top1(&rows, &kind.label()).expect("at least one seed");
                let params = rows[0].adapter_params;
                println!("{m:>4} {params:>10} {top1:>8.2} {:>7.4}", ppt_score(top1, params));
                results.extend(rows);
            }
            write_results(&results, &out)?;
        }
        Command::FewShot {
            config,
            backbone,
            out,
        } => {
            let cfg = load_config(&config)?;
            let bb = load_backbone(&backbone, &cfg)?;
            let (train, test) = downstream_splits(&cfg)?;
            let kind = VariantKind::FullSas(cfg.sas_config());
            let runs = few_shot_sweep(&cfg, &bb, &kind, &cfg.protocol.shots, &train, &test)?;
            println!("{:>4} {:>8}", "k", "top-1");
            for &k in &cfg.protocol.shots {
                let accs: Vec<f64> = runs.iter().filter(|(kk, _)| *kk == k).map(|(_, r)| r.top1).collect();
                println!("{k:>4} {:>8.2}", accs.iter().sum::<f64>() / accs.len() as f64);
            }
            let results: Vec<RunResult> = runs.into_iter().map(|(_, r)| r).collect();
            write_results(&results, &out)?;
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
