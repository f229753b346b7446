//! `nic`: train a model zoo, encode and decode images, and run overfitting sweeps.

mod exit;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use nic_core::eval::{run_eval, write_report_csv, write_summary_csv, EvalConfig, LoadedZoo};
use nic_core::overfit::{write_trace_csv, OverfitConfig, DEFAULT_ITERATIONS, DEFAULT_LEARNING_RATE, DEFAULT_Q};
use nic_core::pipeline::decode_image;
use nic_core::train::{list_png_dir, load_png_dir, train_zoo_entry, RunStatus, TrainConfig, ZooManifest};
use nic_core::{bd_rate, ArchConfig, ModelParams, RdCurve, RgbImage};

use exit::Failure;

#[derive(Parser, Debug)]
#[command(name = "nic", version, about = "Learned image codec with per-image decoder bias overfitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one zoo checkpoint per lambda and record its validation anchor.
    Train(TrainArgs),
    /// Encode a PNG into a container, optionally overfitting the decoder biases.
    Encode(EncodeArgs),
    /// Decode a container into a PNG.
    Decode(DecodeArgs),
    /// Sweep overfitting over images, qualities and layer counts.
    Eval(EvalArgs),
    /// BD-rate of curve B against curve A, in percent.
    Bdrate(BdrateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Hyperprior,
    Factorized,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of 8-bit RGB PNG training images.
    #[arg(long)]
    data: PathBuf,
    /// Validation images for the anchors; defaults to the training set.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, required = true, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, env = "NIC_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().crop_size)]
    crop_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    /// Checkpoint to fine-tune from instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Architecture of a new zoo; an existing zoo keeps its own.
    #[arg(long, value_enum, default_value_t = Kind::Hyperprior)]
    kind: Kind,
    /// Zoo directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OverfitArgs {
    /// Number of trailing decoder layers whose biases are tuned.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_Q)]
    q_init: f32,
    /// Evaluate the coded update every k iterations.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, env = "NIC_SEED", default_value_t = 0)]
    seed: u64,
}

impl OverfitArgs {
    fn config(&self) -> OverfitConfig {
        OverfitConfig {
            layers: self.layers,
            iterations: self.iters,
            learning_rate: self.lr,
            q_init: self.q_init,
            eval_every: self.eval_every,
            seed: self.seed,
            ..OverfitConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct EncodeArgs {
    input: PathBuf,
    #[arg(long)]
    zoo: PathBuf,
    #[arg(long)]
    quality: u8,
    #[arg(long)]
    overfit: bool,
    #[command(flatten)]
    tune: OverfitArgs,
    /// Emit the baseline container when the best update does not beat it.
    #[arg(long, requires = "overfit")]
    allow_skip: bool,
    /// Per-iteration trace CSV.
    #[arg(long, requires = "overfit")]
    trace: Option<PathBuf>,
    /// Also write the encoder-side reconstruction.
    #[arg(long)]
    recon: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    input: PathBuf,
    #[arg(long)]
    zoo: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    zoo: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `a..b` (inclusive) or a comma list.
    #[arg(long, default_value = "1..3", value_parser = parse_layers)]
    layers_sweep: LayerList,
    /// Comma list; every usable quality when omitted.
    #[arg(long, value_delimiter = ',')]
    qualities: Vec<u8>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, env = "NIC_SEED", default_value_t = 0)]
    seed: u64,
    /// Per-row report CSV.
    #[arg(long)]
    report: PathBuf,
    /// Aggregate CSV; defaults to `<report>.summary.csv`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BdrateArgs {
    curve_a: PathBuf,
    curve_b: PathBuf,
}

#[derive(Clone, Debug)]
struct LayerList(Vec<usize>);

fn parse_layers(s: &str) -> Result<LayerList, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let v: Vec<usize> = match s.split_once("..") {
        Some((a, b)) => (num(a)?..=num(b)?).collect(),
        None => s.split(',').map(num).collect::<Result<_, _>>()?,
    };
    if v.is_empty() || v.contains(&0) {
        return Err("layer counts must be a nonempty set of positive integers".into());
    }
    Ok(LayerList(v))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    info!("{:?}", cli.command);
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bdrate(a) => cmd_bdrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let init = a.init.as_ref().map(ModelParams::load).transpose()?;
    let requested = match (&init, a.kind) {
        (Some(p), _) => p.config.clone(),
        (None, Kind::Hyperprior) => ArchConfig::default(),
        (None, Kind::Factorized) => ArchConfig::factorized(),
    };
    let mut manifest = match ZooManifest::load(&a.out) {
        Ok(m) => m,
        Err(_) if !a.out.join(nic_core::train::MANIFEST_FILE).exists() => ZooManifest::new(requested.clone()),
        Err(e) => return Err(e.into()),
    };
    if manifest.arch != requested {
        if init.is_some() {
            return Err(Failure::usage("--init checkpoint does not match the zoo's architecture"));
        }
        warn!("zoo already holds {:?} models; --kind ignored", manifest.arch.kind);
    }
    let arch = manifest.arch.clone();
    let train_set = load_png_dir(&a.data)?;
    let val_set = match &a.val {
        Some(dir) => load_png_dir(dir)?,
        None => train_set.clone(),
    };
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Failure::usage("no PNG images found"));
    }
    let mut failed = Vec::new();
    for &lambda in &a.lambda {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Failure::usage(format!("lambda must be positive, got {lambda}")));
        }
        let cfg = TrainConfig {
            lambda,
            steps: a.steps,
            batch_size: a.batch_size,
            crop_size: a.crop_size,
            learning_rate: a.lr,
            seed: a.seed,
        };
        cfg.validate(&arch)?;
        info!("training lambda {lambda} with seed {}", a.seed);
        let entry = train_zoo_entry(&arch, &cfg, &train_set, &val_set, init.as_ref(), &a.out)?;
        if entry.status == RunStatus::Failed {
            failed.push(lambda);
        }
        manifest.upsert(entry);
        manifest.save(&a.out)?;
    }
    manifest.check_monotone();
    for m in &manifest.models {
        let anchor = m.anchor.map_or("-".into(), |x| format!("{:.1} bits {:.3} dB", x.bits, x.psnr));
        println!("quality {} lambda {} {:?} {anchor}", m.quality, m.lambda, m.status);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!("training diverged for lambda {failed:?}")))
    }
}

fn cmd_encode(a: EncodeArgs) -> Result<(), Failure> {
    let zoo = LoadedZoo::open(&a.zoo)?;
    if !zoo.qualities().contains(&a.quality) {
        return Err(Failure::usage(format!(
            "quality {} is not a usable zoo entry (available: {:?})",
            a.quality,
            zoo.qualities()
        )));
    }
    let image = RgbImage::load_png(&a.input)?;
    let tune = a.overfit.then(|| a.tune.config());
    if let Some(cfg) = &tune {
        let max = zoo.model(a.quality)?.decoder.len();
        if cfg.layers == 0 || cfg.layers > max {
            return Err(Failure::usage(format!("--layers must be in 1..={max}")));
        }
    }
    let enc = zoo.encode(&image, a.quality, tune.as_ref())?;
    let base = &enc.baseline;
    let (bytes, recon, psnr) = match &enc.overfit {
        None => (&base.bytes, &base.recon, base.psnr),
        Some(o) if a.allow_skip && o.never_helped() => {
            info!("update does not beat the baseline; emitting the baseline container");
            (&base.bytes, &base.recon, base.psnr)
        }
        Some(o) => {
            let best = &o.result.best;
            let anchors = enc.anchors.expect("anchors accompany an overfit encode");
            info!(
                "best iteration {} acc {:.5} (initial {:.5}), q {}, update {} bits, {} anchors",
                best.iteration,
                best.eval.acc,
                o.result.initial_acc,
                best.eval.update.extra.q(),
                best.eval.update.payload_bits(),
                if anchors.per_image { "per-image" } else { "validation" }
            );
            let saving = nic_core::bit_saving(o.total_bits() as f64, &anchors.container, best.eval.psnr);
            println!("bit_saving {:.6}", saving);
            (&o.bytes, &best.eval.recon, best.eval.psnr)
        }
    };
    if let (Some(path), Some(o)) = (&a.trace, &enc.overfit) {
        write_trace_csv(&o.result.trace, File::create(path)?)?;
    }
    std::fs::write(&a.out, bytes)?;
    if let Some(path) = &a.recon {
        recon.save_png(path)?;
    }
    println!("bits {} psnr_db {:.6}", 8 * bytes.len(), psnr);
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<(), Failure> {
    let zoo = LoadedZoo::open(&a.zoo)?;
    let bytes = std::fs::read(&a.input)?;
    let container = nic_core::read_container(&bytes)?;
    let params = zoo.model(container.header.quality)?;
    decode_image(params, &bytes)?.save_png(&a.out)?;
    Ok(())
}

fn summary_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}.summary.csv"))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let zoo = LoadedZoo::open(&a.zoo)?;
    let images = list_png_dir(&a.data)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
            Ok((name, RgbImage::load_png(&p)?))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    if images.is_empty() {
        return Err(Failure::usage("no PNG images found"));
    }
    let max = zoo.model(zoo.qualities()[0])?.decoder.len();
    if a.layers_sweep.0.iter().any(|&l| l > max) {
        return Err(Failure::usage(format!("layer counts must be in 1..={max}")));
    }
    let cfg = EvalConfig {
        layers: a.layers_sweep.0.clone(),
        qualities: a.qualities.clone(),
        overfit: OverfitConfig {
            iterations: a.iters,
            learning_rate: a.lr,
            eval_every: a.eval_every,
            seed: a.seed,
            ..OverfitConfig::default()
        },
    };
    let report = run_eval(&zoo, &images, &cfg)?;
    write_report_csv(&report.rows, File::create(&a.report)?)?;
    let summary = a.summary.clone().unwrap_or_else(|| summary_path(&a.report));
    write_summary_csv(&report.summary, File::create(&summary)?)?;
    for s in report.summary.iter().filter(|s| s.quality.is_none()) {
        let bd = s.bd_rate.map_or("n/a".into(), |v| format!("{v:.3}%"));
        println!("l={} mean_bit_saving {:.6} bd_rate {bd}", s.layers, s.mean_bit_saving);
    }
    match report.best_layers() {
        Some(l) => println!("best_l {l}"),
        None => println!("best_l n/a"),
    }
    Ok(())
}

fn cmd_bdrate(a: BdrateArgs) -> Result<(), Failure> {
    let read = |p: &Path| -> Result<RdCurve, Failure> { Ok(RdCurve::read_csv(BufReader::new(File::open(p)?))?) };
    let v = bd_rate(&read(&a.curve_a)?, &read(&a.curve_b)?)?;
    println!("{v:.6}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists() {
        assert_eq!(parse_layers("1..3").unwrap().0, vec![1, 2, 3]);
        assert_eq!(parse_layers("2,1").unwrap().0, vec![2, 1]);
        assert!(parse_layers("0..2").is_err());
        assert!(parse_layers("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
