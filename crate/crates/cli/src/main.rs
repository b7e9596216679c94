//! `renet`: train, evaluate and inspect spatially recurrent segmentation
//! networks on the synthetic long-range task or on PPM/PGM datasets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure
//! (non-finite loss or failed gradient check), 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use renet_seg::autograd::{grad_check_with, GradCheckConfig};
use renet_seg::config::{parse_size, KeyValues};
use renet_seg::data::{load_ppm, save_pgm_labels, Dataset};
use renet_seg::densecrf::{argmax_labels, mean_field, CrfParams};
use renet_seg::harness::{
    bench_csv, bench_sweeps, evaluate, init_params_with, run_ablation_cached, stack_batch, train, AblationKind, RunCache,
    EvalReport, ExperimentConfig,
};
use renet_seg::layers::IGNORE_LABEL;
use renet_seg::models::Network;
use renet_seg::tensor::{read_tensor_file, write_tensor_file};
use renet_seg::Error;

/// Gradients below this are beyond what differencing a loss of order one
/// resolves; they enter the relative error with this as the denominator.
const GRADIENT_FLOOR: f64 = 1e-6;
/// Step sizes epsilon, epsilon/10, ... combined per element.
const EXTRAPOLATION_LEVELS: usize = 4;

#[derive(Parser)]
#[command(name = "renet", version, about = "Spatially recurrent segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                KeyValues::parse(&text)?
            }
            None => KeyValues::default(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint directory
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory with a `train` split; generated from the
        /// config when absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// CSV report path (printed when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label one PPM image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label map (PGM of class indices)
        #[arg(long)]
        out: PathBuf,
        /// Also store the probability tensor
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Refine stored probabilities with the dense CRF
    Crf {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_probs: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Finite-difference check of a small double-precision network
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input size HxW
        #[arg(long, default_value = "8x16")]
        size: String,
        /// Largest finite-difference step; shorter ones follow by factors of 10
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Entries probed per parameter tensor (0 = all)
        #[arg(long, default_value_t = 8)]
        max_elements: usize,
    },
    /// Run an ablation table on the synthetic task
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// lstm_vs_irnn, crop_size, mlfb, norm or all
        #[arg(long)]
        kind: String,
        /// Directory receiving one CSV per table
        #[arg(long)]
        out: PathBuf,
    },
    /// Time sequential against lane-parallel recurrent sweeps
    Bench {
        #[arg(long, default_value = "64x64,128x128")]
        sizes: String,
        #[arg(long, default_value = "16,32")]
        widths: String,
        #[arg(long, default_value = "1,2,4")]
        threads: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the channels of one layer as PGM images
    Dumpfeat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic long-range dataset
    Gendata {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Parse { .. }) => 2,
        Some(Error::Numeric { .. }) => 3,
        _ => 1,
    }
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid {what} {v:?}")).into())
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn report_text(r: &EvalReport) -> String {
    r.to_csv()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata { cfg, out } => {
            let exp = ExperimentConfig::from_kv(&cfg.load()?)?;
            let ds = exp.dataset()?;
            ds.save_dir(&out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { cfg, data, out } => {
            let kv = cfg.load()?;
            let mut exp = ExperimentConfig::from_kv(&kv)?;
            let ds = match data {
                Some(dir) => Dataset::load_dir(&dir)?,
                None => exp.dataset()?,
            };
            exp.model.labels = ds.classes;
            if exp.sgd.diagnostic_dir.is_none() {
                exp.sgd.diagnostic_dir = Some(out.join("diagnostic"));
            }
            let mut net = Network::<f32>::new(exp.model.build()?)?;
            init_params_with(&mut net, exp.init_seed, exp.conv_std)?;
            let train_set = if ds.splits.contains_key("train") { ds.split("train")? } else { ds.clone() };
            let rep = train(&mut net, &train_set, &exp.sgd)?;
            net.save(&out)?;
            write(&out.join("loss.csv"), &rep.loss_csv())?;
            println!(
                "trained {} iterations in {:.1}s, final loss {:.5}",
                rep.losses.len(),
                rep.seconds,
                rep.losses.last().copied().unwrap_or(f64::NAN)
            );
            if ds.splits.contains_key("test") {
                let r = evaluate(&mut net, &ds.split("test")?)?;
                write(&out.join("eval.csv"), &report_text(&r))?;
                print!("{}", report_text(&r));
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let mut net = Network::<f32>::load(&checkpoint)?;
            let ds = Dataset::load_dir(&data)?;
            let part = if ds.splits.contains_key(&split) { ds.split(&split)? } else { ds };
            let r = evaluate(&mut net, &part)?;
            match out {
                Some(p) => write(&p, &report_text(&r))?,
                None => print!("{}", report_text(&r)),
            }
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            probs,
        } => {
            let mut net = Network::<f32>::load(&checkpoint)?;
            let img = load_ppm(&image)?;
            let p = net.forward_variable_size(&img)?;
            save_pgm_labels(&out, &argmax_labels(&p)?)?;
            if let Some(path) = probs {
                write_tensor_file(&path, &p)?;
            }
        }
        Command::Crf {
            cfg,
            probs,
            image,
            out_probs,
            out_labels,
        } => {
            let params = CrfParams::from_kv(&cfg.load()?)?;
            let p = read_tensor_file(&probs)?.into_precision::<f64>();
            let img = load_ppm(&image)?.cast::<f64>();
            let q = mean_field(&p, &img, &params)?;
            write_tensor_file(&out_probs, &q)?;
            save_pgm_labels(&out_labels, &argmax_labels(&q)?)?;
        }
        Command::Gradcheck {
            cfg,
            size,
            epsilon,
            tolerance,
            max_elements,
        } => {
            let exp = ExperimentConfig::from_kv(&cfg.load()?)?;
            let (h, w) = parse_size(&size).ok_or_else(|| Error::Config(format!("invalid size {size:?}")))?;
            let mut net = Network::<f64>::new(exp.model.build()?)?;
            init_params_with(&mut net, exp.init_seed, exp.conv_std)?;
            let task = renet_seg::data::LongRangeTaskConfig {
                height: h,
                width: w,
                cue_size: 1,
                band_start: w / 2,
                band_width: w - w / 2,
                ..exp.task.clone()
            };
            let ds = renet_seg::data::generate_longrange_task(2, &task)?;
            let (img, mut lab) = stack_batch::<f64>(&ds.samples)?;
            // a few labelled pixels keep the mean loss sensitive to each weight
            for (i, v) in lab.data_mut().iter_mut().enumerate() {
                if i % 64 != 0 {
                    *v = f64::from(IGNORE_LABEL);
                }
            }
            net.forward_backward(img, lab)?;
            let rep = grad_check_with(
                net.graph_mut(),
                GradCheckConfig {
                    epsilon,
                    max_elements: (max_elements > 0).then_some(max_elements),
                    seed: exp.init_seed,
                    skip_kinks: true,
                    levels: EXTRAPOLATION_LEVELS,
                    floor: GRADIENT_FLOOR,
                },
            )?;
            for (name, err) in &rep.params {
                println!("{name} {err:.3e}");
            }
            let worst = rep.max();
            println!("max relative error {worst:.3e} (tolerance {tolerance:.0e})");
            if !(worst < tolerance) {
                return Err(Error::Numeric {
                    message: format!("gradient check failed: {worst:.3e} >= {tolerance:.0e}"),
                    checkpoint: None,
                }
                .into());
            }
        }
        Command::Ablate { cfg, kind, out } => {
            let exp = ExperimentConfig::from_kv(&cfg.load()?)?;
            let kinds = if kind == "all" {
                AblationKind::ALL.to_vec()
            } else {
                vec![AblationKind::parse(&kind)?]
            };
            let data = exp.dataset()?;
            let mut cache = RunCache::default();
            for k in kinds {
                let table = run_ablation_cached(k, &exp, &data, &mut cache)?;
                let csv = table.to_csv();
                write(&out.join(format!("{}.csv", k.name())), &csv)?;
                println!("# {}\n{csv}", k.name());
            }
        }
        Command::Bench {
            sizes,
            widths,
            threads,
            out,
        } => {
            let sizes = sizes
                .split(',')
                .map(|s| parse_size(s).ok_or_else(|| Error::Config(format!("invalid size {s:?}")).into()))
                .collect::<Result<Vec<_>>>()?;
            let rows = bench_sweeps(&sizes, &list(&widths, "width")?, &list(&threads, "thread count")?)?;
            let csv = bench_csv(&rows);
            if let Some(p) = out {
                write(&p, &csv)?;
            }
            print!("{csv}");
            if rows.iter().any(|r| !r.identical) {
                bail!("parallel sweep output differs from the sequential one");
            }
        }
        Command::Dumpfeat {
            checkpoint,
            image,
            layer,
            out,
        } => {
            let mut net = Network::<f32>::load(&checkpoint)?;
            let img = load_ppm(&image)?;
            net.forward_variable_size(&img)?;
            let paths = net.dump_feature_maps(&layer, &out)?;
            println!("wrote {} maps to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
