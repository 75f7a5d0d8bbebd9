//! `gvae`: generate grouped data, train, evaluate, analyze and render.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data or file
//! format error, 4 numerical failure.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gvae::eval::{self, ImageGrid};
use gvae::synthdata::{self, GroupedDataset};
use gvae::trainer::{self, Checkpoint};
use gvae::Error;
use serde::Serialize;

use config::{Mode, Overrides, RunConfig};

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }

    fn context(self, what: impl fmt::Display) -> Self {
        Failure {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::NonFinite { .. } | Error::DegenerateDimension(_) | Error::Tensor(_) => 4,
            Error::Contract(_)
            | Error::Format { .. }
            | Error::Version { .. }
            | Error::Protocol(_)
            | Error::Io(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| e.into().context(what))
    }
}

#[derive(Parser)]
#[command(
    name = "gvae",
    version,
    about = "Grouped VAEs on synthetic or external grouped data"
)]
struct Cli {
    /// TOML run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Content aggregation; `vae` also forces groups of one.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    GenData,
    /// Train a model on a dataset.
    Train { dataset: PathBuf },
    /// Few-shot rates and latent statistics on a test dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
    /// Dimension, precision and perturbation analysis as TOML and CSV.
    Analyze {
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
    /// Swap or interpolation image grid.
    Render {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "swap")]
        kind: RenderKind,
        /// Item indices supplying content (swap rows).
        #[arg(long, value_delimiter = ',')]
        content: Vec<usize>,
        /// Item indices supplying transformations (swap columns).
        #[arg(long, value_delimiter = ',')]
        transformation: Vec<usize>,
        /// Two item indices to interpolate between.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        pair: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RenderKind {
    Swap,
    Interp,
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn prepare(dir: &Path, force: bool, files: &[&str]) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).context(format!("creating {}", dir.display()))?;
        if !force {
            if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
                return Err(Failure::config(format!(
                    "{} already exists; pass --force to overwrite",
                    dir.join(f).display()
                )));
            }
        }
        Ok(Output {
            dir: dir.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.path(name);
        std::fs::write(&p, bytes)
            .map_err(Error::from)
            .context(p.display())
    }

    fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<(), Failure> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p)
            .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        for r in rows {
            w.serialize(r)
                .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        }
        w.flush().map_err(Error::from).context(p.display())
    }
}

fn load_dataset(path: &Path) -> Result<GroupedDataset, Failure> {
    synthdata::load_dataset(path).context(format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    trainer::load_checkpoint(path).context(format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct DataManifest<'a> {
    seed: u64,
    train_file: &'a str,
    test_file: &'a str,
    train_classes: usize,
    test_classes: usize,
    train_items: usize,
    test_items: usize,
    spec: &'a gvae::FactorSpec,
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), Failure> {
    let files = [
        "train.grpd",
        "test.grpd",
        "data_manifest.toml",
        "gen-data.config.toml",
    ];
    let out = Output::prepare(out, force, &files)?;
    let d = &cfg.data;
    let (train, test) = synthdata::generate(
        &d.spec,
        d.train_classes,
        d.test_classes,
        d.items_per_class,
        cfg.model.group_size,
        cfg.seed,
    )?;
    out.write("train.grpd", &synthdata::encode_dataset(&train)?)?;
    out.write("test.grpd", &synthdata::encode_dataset(&test)?)?;
    let manifest = DataManifest {
        seed: cfg.seed,
        train_file: files[0],
        test_file: files[1],
        train_classes: train.class_members().len(),
        test_classes: test.class_members().len(),
        train_items: train.len(),
        test_items: test.len(),
        spec: &d.spec,
    };
    let text = toml::to_string(&manifest).map_err(|e| Failure::config(e.to_string()))?;
    out.write("data_manifest.toml", text.as_bytes())?;
    out.write("gen-data.config.toml", cfg.to_toml()?.as_bytes())?;
    println!(
        "wrote {} train and {} test items to {}",
        train.len(),
        test.len(),
        out.dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    mean_elbo: f64,
}

fn train(cfg: &mut RunConfig, dataset: &Path, out: &Path, force: bool) -> Result<(), Failure> {
    let out = Output::prepare(
        out,
        force,
        &["checkpoint.gvae", "elbo.csv", "train.config.toml"],
    )?;
    let ds = load_dataset(dataset)?;
    cfg.model.data_dim = ds.dim;
    // echoed before training so an aborted run still records its inputs
    out.write("train.config.toml", cfg.to_toml()?.as_bytes())?;
    let ckpt = Checkpoint::initial(cfg.model.clone(), cfg.train.clone())?;
    let result = trainer::continue_training(ckpt, &ds, cfg.train.epochs, |r| {
        eprintln!("epoch {:>4}  mean ELBO {:.4}", r.epoch, r.mean_elbo);
    })?;
    let rows: Vec<EpochRow> = result
        .log
        .iter()
        .map(|r| EpochRow {
            epoch: r.epoch,
            mean_elbo: r.mean_elbo,
        })
        .collect();
    out.csv("elbo.csv", &rows)?;
    out.write(
        "checkpoint.gvae",
        &trainer::encode_checkpoint(&result.checkpoint)?,
    )?;
    println!(
        "trained {} steps, checkpoint in {}",
        result.checkpoint.step(),
        out.dir.display()
    );
    Ok(())
}

fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let out = Output::prepare(out, force, &["eval_report.toml", "eval.config.toml"])?;
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    out.write("eval.config.toml", cfg.to_toml()?.as_bytes())?;
    let report = eval::evaluate(
        &ckpt.model,
        &ds,
        &cfg.protocol,
        cfg.analysis.threshold,
        cfg.analysis.top,
    )?;
    for b in &report.one_shot_by_bin.omitted {
        eprintln!("warning: transformation bin {b} has no probes and is omitted");
    }
    out.write("eval_report.toml", report.to_toml()?.as_bytes())?;
    for r in &report.fewshot {
        println!("S={:<3} success {:.4} ± {:.4}", r.shots, r.mean, r.sd);
    }
    Ok(())
}

#[derive(Serialize)]
struct DimensionRow {
    rank: usize,
    dim: usize,
    std: f64,
    effective: bool,
}

#[derive(Serialize)]
struct ProfileRow {
    dim: usize,
    bin: u32,
    count: usize,
    precision_q1: f64,
    precision_median: f64,
    precision_q3: f64,
    mean_distance: f64,
}

fn analyze(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let files = [
        "analysis.toml",
        "dimensions.csv",
        "profiles.csv",
        "analyze.config.toml",
    ];
    let out = Output::prepare(out, force, &files)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    out.write("analyze.config.toml", cfg.to_toml()?.as_bytes())?;
    let report = eval::analyze(&ckpt.model, &ds, cfg.analysis.threshold, cfg.analysis.top)?;
    let text = toml::to_string(&report).map_err(|e| Failure::config(e.to_string()))?;
    out.write("analysis.toml", text.as_bytes())?;
    let dims: Vec<DimensionRow> = report
        .dimensions
        .dimensions
        .iter()
        .enumerate()
        .map(|(rank, d)| DimensionRow {
            rank,
            dim: d.dim,
            std: d.std,
            effective: report.dimensions.effective.contains(&d.dim),
        })
        .collect();
    out.csv("dimensions.csv", &dims)?;
    let mut rows = Vec::new();
    for a in &report.per_dimension {
        for (p, d) in a.precision.iter().zip(&a.distance) {
            rows.push(ProfileRow {
                dim: a.dim,
                bin: p.bin,
                count: p.count,
                precision_q1: p.q1,
                precision_median: p.median,
                precision_q3: p.q3,
                mean_distance: d.mean,
            });
        }
    }
    out.csv("profiles.csv", &rows)?;
    println!(
        "{} effective content dimensions of {}",
        report.dimensions.effective.len(),
        ckpt.model.config.content_dim
    );
    Ok(())
}

/// Item `pick` of up to `n` classes, starting at class `offset` and
/// wrapping around.
fn default_samples(ds: &GroupedDataset, n: usize, offset: usize, pick: usize) -> Vec<usize> {
    let classes: Vec<Vec<usize>> = ds.class_members().into_values().collect();
    let n = n.min(classes.len());
    (0..n)
        .map(|k| {
            let m = &classes[(k + offset) % classes.len()];
            m[pick.min(m.len() - 1)]
        })
        .collect()
}

fn rows_for(ds: &GroupedDataset, indices: &[usize]) -> Result<Vec<f64>, Failure> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Failure::config(format!(
            "item index {bad} out of range ({} items)",
            ds.len()
        )));
    }
    Ok(ds.flat_rows(indices))
}

fn tile_shape(ds: &GroupedDataset) -> (usize, usize) {
    if ds.height > 0 && ds.width > 0 {
        (ds.height as usize, ds.width as usize)
    } else {
        (1, ds.dim)
    }
}

#[allow(clippy::too_many_arguments)]
fn render(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    kind: RenderKind,
    content: &[usize],
    transformation: &[usize],
    pair: &[usize],
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let stem = match kind {
        RenderKind::Swap => "swap",
        RenderKind::Interp => "interp",
    };
    let pgm = format!("{stem}.pgm");
    let raw = format!("{stem}.f32");
    let echo = format!("render-{stem}.config.toml");
    let out = Output::prepare(out, force, &[pgm.as_str(), raw.as_str(), echo.as_str()])?;
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let (h, w) = tile_shape(&ds);
    out.write(&echo, cfg.to_toml()?.as_bytes())?;
    let grid = match kind {
        RenderKind::Swap => {
            let ci = if content.is_empty() {
                default_samples(&ds, 5, 0, 0)
            } else {
                content.to_vec()
            };
            let tj = if transformation.is_empty() {
                default_samples(&ds, 5, 1, 1)
            } else {
                transformation.to_vec()
            };
            let (xs, ys) = (rows_for(&ds, &ci)?, rows_for(&ds, &tj)?);
            let m = eval::swap_matrix(&ckpt.model, &xs, &ys)?;
            ImageGrid::with_samples(&m, Some(&xs), Some(&ys), h, w)?
        }
        RenderKind::Interp => {
            let pair = match pair {
                [] => {
                    let s = default_samples(&ds, 2, 0, 0);
                    [s[0], s[1]]
                }
                [a, b] => [*a, *b],
                _ => return Err(Failure::config("--pair takes exactly two item indices")),
            };
            let xs = rows_for(&ds, &pair)?;
            let (x1, x2) = xs.split_at(ds.dim);
            let m =
                eval::interp_matrix(&ckpt.model, x1, x2, &cfg.render.alphas, &cfg.render.betas)?;
            ImageGrid::with_samples(&m, None, None, h, w)?
        }
    };
    out.write(&pgm, &grid.to_pgm())?;
    out.write(&raw, &grid.to_f32_le())?;
    println!(
        "wrote {}x{} grid to {}",
        grid.width,
        grid.height,
        out.path(&pgm).display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        threads: eval::threads_from_env()?,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let (out, force) = (cli.out.as_path(), cli.force);
    match &cli.command {
        Command::GenData => gen_data(&cfg, out, force),
        Command::Train { dataset } => train(&mut cfg, dataset, out, force),
        Command::Eval {
            checkpoint,
            dataset,
        } => evaluate(&cfg, checkpoint, dataset, out, force),
        Command::Analyze {
            checkpoint,
            dataset,
        } => analyze(&cfg, checkpoint, dataset, out, force),
        Command::Render {
            checkpoint,
            dataset,
            kind,
            content,
            transformation,
            pair,
        } => render(
            &cfg,
            checkpoint,
            dataset,
            *kind,
            content,
            transformation,
            pair,
            out,
            force,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
