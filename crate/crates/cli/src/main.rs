mod data;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coda::datasets::{digit_glyph, load_pnm, LabeledImageSet};
use coda::interpretability::{
    attribute, eigen_recovery, pixel_removal_curve, pointing_game, removal_areas, render_heatmap, sanity_distances,
    AttributionMethod, MetricSummary, OutputMaxConfig, RemovalOrder,
};
use coda::training::{self, checkpoint_precision, read_checkpoint, save_checkpoint};
use coda::verify::{self, Fault, Suite, VerifyOptions};
use coda::{AdamState, Checkpoint, CodaNet, Error, Nonlinearity, Rng, RunConfig, Scalar, Tensor};
use thiserror::Error;

use data::{DataSource, Split};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 4,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Input(_) | Error::Index { .. } => 2,
                Error::NonFinite { .. } | Error::Contract(_) => 4,
                _ => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Convolutional dynamic alignment networks: train, evaluate and explain.
#[derive(Debug, Parser)]
#[command(name = "coda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a run config and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// MNIST directory, CIFAR-10 directory or .bin file, or noisy-digits[:k=v,...].
        #[arg(long)]
        data: DataSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<u32>,
        /// Epoch log; defaults to the checkpoint path with `.log` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Test-set accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: DataSource,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Attribution heatmap for one image and class.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        /// Binary PGM or PPM image.
        #[arg(long, conflicts_with_all = ["data", "index"], required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long, requires = "index")]
        data: Option<DataSource>,
        /// Test-set index, with --data.
        #[arg(long, requires = "data")]
        index: Option<usize>,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
        /// coda, grad, ixg, occ, occK or occKsS.
        #[arg(long, default_value = "coda")]
        method: AttributionMethod,
    },
    /// Localisation on grids of test images with distinct classes.
    PointingGame {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: DataSource,
        #[arg(long, default_value_t = 200)]
        grids: usize,
        #[arg(long, default_value_t = 3)]
        grid_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "coda,grad,ixg")]
        methods: Vec<AttributionMethod>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Logit under pixel removal, inherent ranking against random orders.
    PixelRemoval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: DataSource,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        random_orders: usize,
        /// Also report most-important-first areas.
        #[arg(long)]
        most_first: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Cascading layer re-initialisation, deepest first.
    SanityCheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: DataSource,
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Eigenvectors of an output-maximised DAU on noisy digits.
    EvDemo {
        #[arg(long, value_delimiter = ',', default_value = "0.25")]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 3072)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,7")]
        digits: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        rank: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 5e-2)]
        lr: f64,
        #[arg(long, default_value = "l2", value_parser = parse_nonlinearity)]
        nonlinearity: Nonlinearity,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes each eigenvector as a heatmap here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        draws: usize,
        /// Scales one row of a layer map before collapsing: LAYER:ROW:FACTOR.
        #[arg(long, hide = true, value_parser = parse_fault)]
        inject_fault: Option<Fault>,
    },
}

fn parse_precision(s: &str) -> Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("precision must be 32 or 64, got {s:?}")),
    }
}

fn parse_nonlinearity(s: &str) -> Result<Nonlinearity, String> {
    match s.to_ascii_lowercase().as_str() {
        "l2" => Ok(Nonlinearity::L2),
        "sq" => Ok(Nonlinearity::Sq),
        _ => Err(format!("expected l2 or sq, got {s:?}")),
    }
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected LAYER:ROW:FACTOR, got {s:?}");
    let [l, r, f] = parts[..] else { return Err(bad()) };
    Ok(Fault {
        layer: l.parse().map_err(|_| bad())?,
        row: r.parse().map_err(|_| bad())?,
        factor: f.parse().map_err(|_| bad())?,
    })
}

fn write_summary(path: Option<&Path>, summary: &MetricSummary) -> CliResult<()> {
    if let Some(path) = path {
        std::fs::write(path, summary.to_string()).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// A checkpoint at the precision it was written in.
enum Loaded {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn load(path: &Path) -> CliResult<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(match checkpoint_precision(&bytes)? {
        64 => Loaded::F64(read_checkpoint(&bytes)?),
        _ => Loaded::F32(read_checkpoint(&bytes)?),
    })
}

macro_rules! with_net {
    ($loaded:expr, $net:ident => $body:expr) => {
        match $loaded {
            Loaded::F32(ck) => {
                let $net = &ck.net;
                $body
            }
            Loaded::F64(ck) => {
                let $net = &ck.net;
                $body
            }
        }
    };
}

fn check_class<S: Scalar>(net: &CodaNet<S>, class: usize) -> CliResult<()> {
    if class >= net.num_classes() {
        return Err(CliError::Usage(format!(
            "class {class} out of range: the network has {} classes",
            net.num_classes()
        )));
    }
    Ok(())
}

fn train_at<S: Scalar>(cfg: RunConfig, data: &LabeledImageSet, out: &Path, log: &Path) -> CliResult<()> {
    let mut net = CodaNet::<S>::new(cfg.net.clone(), &mut Rng::new(cfg.train.seed).fork(u64::MAX))?;
    let mut adam = AdamState::for_net(&net);
    let mut text = String::new();
    let result = training::train(&mut net, &mut adam, data, &cfg.train, |e| {
        println!("{e}");
        let _ = writeln!(text, "{e}");
    });
    std::fs::write(log, &text).map_err(|e| Error::Io {
        path: log.into(),
        source: e,
    })?;
    result?;
    save_checkpoint(
        &Checkpoint {
            config: cfg,
            net,
            adam: Some(adam),
        },
        out,
    )?;
    println!("saved {}", out.display());
    Ok(())
}

fn train(
    config: &Path,
    data: &DataSource,
    out: &Path,
    seed: Option<u64>,
    precision: Option<u32>,
    log: Option<PathBuf>,
) -> CliResult<()> {
    if !config.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", config.display())));
    }
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(p) = precision {
        cfg.train.precision = p;
    }
    let set = data.load(Split::Train)?;
    let log = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        p.into()
    });
    if cfg.train.precision == 64 {
        train_at::<f64>(cfg, &set, out, &log)
    } else {
        train_at::<f32>(cfg, &set, out, &log)
    }
}

fn eval(ckpt: &Path, data: &DataSource, limit: Option<usize>, summary: Option<&Path>) -> CliResult<()> {
    let loaded = load(ckpt)?;
    let mut set = data.load(Split::Test)?;
    if let Some(n) = limit {
        set = set.take(n);
    }
    let acc = with_net!(&loaded, net => training::evaluate(net, &set)?.0);
    println!("accuracy={acc:.4} images={}", set.len());
    let mut s = MetricSummary::default();
    s.push("accuracy", acc);
    s.push("images", set.len());
    write_summary(summary, &s)
}

/// Evaluated in 64-bit whatever the checkpoint precision, so the printed
/// contribution sum matches the printed logit.
fn explain_at<S: Scalar>(
    net: &CodaNet<S>,
    image: &Tensor<f32>,
    class: usize,
    method: AttributionMethod,
    out: &Path,
) -> CliResult<()> {
    check_class(net, class)?;
    let net: CodaNet<f64> = net.cast();
    let net = &net;
    let image: Tensor<f64> = image.cast();
    let logit = net.forward(&image)?.data()[class];
    let map = attribute(method, net, &image, class)?;
    let sum: f64 = map.data().iter().sum();
    render_heatmap(&map, out)?;
    println!("class={class} method={method}");
    println!("logit={logit:.6}");
    match method {
        AttributionMethod::Coda => println!("contribution_sum={sum:.6}"),
        _ => println!("attribution_sum={sum:.6}"),
    }
    Ok(())
}

fn pointing<S: Scalar>(
    net: &CodaNet<S>,
    set: &LabeledImageSet,
    methods: &[AttributionMethod],
    n: usize,
    grids: usize,
    seed: u64,
) -> CliResult<MetricSummary> {
    let scores = pointing_game(net, set, methods, n, grids, &mut Rng::new(seed))?;
    let mut s = MetricSummary::default();
    s.push("grids", grids);
    s.push("grid_size", n);
    s.push("random_baseline", 1.0 / (n * n) as f64);
    for (m, sc) in methods.iter().zip(&scores) {
        s.push(format!("pointing.{m}"), mean(sc));
    }
    Ok(s)
}

fn removal<S: Scalar>(
    net: &CodaNet<S>,
    set: &LabeledImageSet,
    steps: usize,
    random_orders: usize,
    most_first: bool,
    seed: u64,
) -> CliResult<MetricSummary> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let rows = coda::parallel::par_map(&idx, |_, &i| -> coda::Result<(f64, f64, f64)> {
        let image: Tensor<S> = set.image(i);
        let class = set.label(i);
        let (least, random) = removal_areas(
            net,
            &image,
            class,
            steps,
            random_orders,
            seed + (i * random_orders) as u64,
        )?;
        let most = if most_first {
            let ranking = attribute(AttributionMethod::Coda, net, &image, class)?;
            pixel_removal_curve(net, &image, class, &ranking, RemovalOrder::MostFirst, steps)?.area()
        } else {
            f64::NAN
        };
        Ok((least, random, most))
    })?;
    let wins = rows.iter().filter(|r| r.0 >= r.1).count();
    let mut s = MetricSummary::default();
    s.push("images", rows.len());
    s.push("least_first_area", mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>()));
    s.push("random_area", mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()));
    if most_first {
        s.push("most_first_area", mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>()));
    }
    s.push("least_first_at_least_random", wins as f64 / rows.len().max(1) as f64);
    Ok(s)
}

fn sanity<S: Scalar>(net: &CodaNet<S>, set: &LabeledImageSet, seed: u64) -> CliResult<MetricSummary> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let root = Rng::new(seed);
    let dists = coda::parallel::par_map(&idx, |_, &i| {
        sanity_distances(net, &set.image::<S>(i), set.label(i), &mut root.fork(i as u64))
    })?;
    let increasing = dists
        .iter()
        .filter(|d| d.first().is_some_and(|&x| x > 0.0) && d.windows(2).all(|w| w[1] > w[0]))
        .count();
    let mut s = MetricSummary::default();
    s.push("probes", dists.len());
    s.push("strictly_increasing", increasing as f64 / dists.len().max(1) as f64);
    for l in 0..net.layers().len() {
        let col: Vec<f64> = dists.iter().map(|d| d[l]).collect();
        s.push(format!("distance.reinit_{}", l + 1), mean(&col));
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn ev_demo(
    noise: &[f64],
    n: usize,
    size: usize,
    digits: &[usize],
    cfg: &OutputMaxConfig,
    out_dir: Option<&Path>,
) -> CliResult<MetricSummary> {
    let bases = digits
        .iter()
        .map(|&d| digit_glyph(d, size))
        .collect::<coda::Result<Vec<_>>>()?;
    let mut s = MetricSummary::default();
    for &std in noise {
        let got = eigen_recovery(&bases, n, std, cfg.seed, cfg)?;
        let values: Vec<String> = got.pairs.iter().map(|p| format!("{:.4}", p.value)).collect();
        println!(
            "noise={std} eigenvalues=[{}] mean_output={:.4}->{:.4}",
            values.join(", "),
            got.history.first().copied().unwrap_or(f64::NAN),
            got.history.last().copied().unwrap_or(f64::NAN)
        );
        for (d, c) in digits.iter().zip(&got.cosines) {
            println!("  digit {d}: subspace cosine {c:.4}");
            s.push(format!("noise_{std}.cosine.digit_{d}"), c);
        }
        s.push(format!("noise_{std}.pairs"), got.pairs.len());
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.into(),
                source: e,
            })?;
            for (k, p) in got.pairs.iter().enumerate() {
                let map = Tensor::new(&[size, size], p.vector.clone())?;
                render_heatmap(&map, dir.join(format!("noise_{std}_ev{k}.ppm")))?;
            }
        }
    }
    Ok(s)
}

fn verify(suite: Suite, seed: u64, draws: usize, fault: Option<Fault>) -> CliResult<()> {
    let opts = VerifyOptions {
        seed,
        draws,
        fault,
        ..VerifyOptions::default()
    };
    let reports = verify::run(suite, &opts)?;
    for r in &reports {
        print!("{r}");
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.suite.to_string())
        .collect();
    if failed.is_empty() {
        println!("all suites passed");
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}

fn print_summary(s: &MetricSummary) {
    print!("{s}");
    let _ = std::io::stdout().flush();
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            precision,
            log,
        } => train(&config, &data, &out, seed, precision, log),
        Command::Eval {
            ckpt,
            data,
            limit,
            summary,
        } => eval(&ckpt, &data, limit, summary.as_deref()),
        Command::Explain {
            ckpt,
            image,
            data,
            index,
            class,
            out,
            method,
        } => {
            let loaded = load(&ckpt)?;
            let image = match (image, data, index) {
                (Some(path), _, _) => load_pnm(path)?,
                (None, Some(src), Some(i)) => {
                    let set = src.load(Split::Test)?;
                    if i >= set.len() {
                        return Err(CliError::Usage(format!("index {i} out of range: {} images", set.len())));
                    }
                    set.image(i)
                }
                _ => return Err(CliError::Usage("give --image or --data with --index".into())),
            };
            with_net!(&loaded, net => explain_at(net, &image, class, method, &out))
        }
        Command::PointingGame {
            ckpt,
            data,
            grids,
            grid_size,
            methods,
            seed,
            summary,
        } => {
            let loaded = load(&ckpt)?;
            let set = data.load(Split::Test)?;
            let s = with_net!(&loaded, net => pointing(net, &set, &methods, grid_size, grids, seed)?);
            print_summary(&s);
            write_summary(summary.as_deref(), &s)
        }
        Command::PixelRemoval {
            ckpt,
            data,
            images,
            steps,
            random_orders,
            most_first,
            seed,
            summary,
        } => {
            if random_orders == 0 {
                return Err(CliError::Usage("--random-orders must be positive".into()));
            }
            let loaded = load(&ckpt)?;
            let set = data.load(Split::Test)?.take(images);
            let s = with_net!(&loaded, net => removal(net, &set, steps, random_orders, most_first, seed)?);
            print_summary(&s);
            write_summary(summary.as_deref(), &s)
        }
        Command::SanityCheck {
            ckpt,
            data,
            probes,
            seed,
            summary,
        } => {
            let loaded = load(&ckpt)?;
            let set = data.load(Split::Test)?.take(probes);
            let s = with_net!(&loaded, net => sanity(net, &set, seed)?);
            print_summary(&s);
            write_summary(summary.as_deref(), &s)
        }
        Command::EvDemo {
            noise,
            n,
            size,
            digits,
            rank,
            steps,
            lr,
            nonlinearity,
            seed,
            out_dir,
            summary,
        } => {
            let cfg = OutputMaxConfig {
                rank,
                steps,
                lr,
                nonlinearity,
                seed,
            };
            let s = ev_demo(&noise, n, size, &digits, &cfg, out_dir.as_deref())?;
            write_summary(summary.as_deref(), &s)
        }
        Command::Verify {
            suite,
            seed,
            draws,
            inject_fault,
        } => verify(suite, seed, draws, inject_fault),
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("CODA_THREADS") {
        match v.parse::<usize>() {
            Ok(n) => coda::parallel::set_max_threads(n),
            Err(_) => {
                eprintln!("error: CODA_THREADS must be a non-negative integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_syntax() {
        assert_eq!(
            parse_fault("1:2:0.5").unwrap(),
            Fault {
                layer: 1,
                row: 2,
                factor: 0.5
            }
        );
        for bad in ["1:2", "a:2:1", "1:2:3:4", ""] {
            assert!(parse_fault(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let core = |e: Error| CliError::Core(e).exit_code();
        assert_eq!(core(Error::Config("x".into())), 2);
        assert_eq!(core(Error::Index { index: 3, limit: 2 }), 2);
        assert_eq!(
            core(Error::Format {
                offset: 0,
                msg: "x".into()
            }),
            3
        );
        assert_eq!(core(Error::Geometry("x".into())), 3);
        assert_eq!(
            core(Error::NonFinite {
                epoch: 1,
                batch: 0,
                value: f64::NAN
            }),
            4
        );
        assert_eq!(core(Error::Contract("x".into())), 4);
        assert_eq!(CliError::Failed("x".into()).exit_code(), 4);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    }

    #[test]
    fn precision_and_nonlinearity_flags() {
        assert_eq!(parse_precision("64"), Ok(64));
        assert!(parse_precision("16").is_err());
        assert_eq!(parse_nonlinearity("SQ"), Ok(Nonlinearity::Sq));
        assert!(parse_nonlinearity("relu").is_err());
    }
}
