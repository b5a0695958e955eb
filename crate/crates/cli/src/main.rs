use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use latmap_core::baselines::{kl_blowup_probe, probe_csv, ProbeBudget};
use latmap_core::checkpoint::{restore_bundle, Checkpoint};
use latmap_core::config::{from_checkpoint_meta, run_dir_name, to_text, ConfigBuilder};
use latmap_core::data::DatasetSpec;
use latmap_core::gradcheck::{run_suite, suite_csv};
use latmap_core::metrics::{row_mse, sphere_concentration_check, REPORT_HEADER};
use latmap_core::model::ModelBundle;
use latmap_core::training::{Trainer, TrainConfig};
use latmap_core::Tensor;

mod plot;

#[derive(Parser)]
#[command(name = "latmap", version, about = "Latent-mapping autoencoder: train, sample, evaluate, probe")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages and write runlog.csv, report.csv and final.ckpt
    Train(TrainArgs),
    /// Sample the generative model
    Generate(GenerateArgs),
    /// Encode and decode a CSV point cloud
    Reconstruct(ReconstructArgs),
    /// Evaluate a checkpoint on its held-out set
    Eval(EvalArgs),
    /// Diagnostic probes
    Probe {
        #[command(subcommand)]
        kind: Probe,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// key=value override, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default $LM_OUT_DIR, else ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (default stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scatter plot over the held-out data
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// CSV with a header row (default: the checkpoint's held-out set)
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Probe {
    /// VAE max-KL and MSE across a descending beta grid
    KlBlowup {
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.3, 0.1, 0.03, 0.01])]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        points: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        latent: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 1500)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assignment distance between two uniform samples on a sphere
    Sphere {
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss; exits 1 on any failure
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, err: e.into() }
    }
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, Failure> {
    match cmd {
        Command::Train(a) => train(a)?,
        Command::Generate(a) => generate(a)?,
        Command::Reconstruct(a) => reconstruct(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Probe { kind } => return probe(kind),
    }
    Ok(ExitCode::SUCCESS)
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    if !a.config.is_file() {
        return Err(usage(anyhow::anyhow!("config file {} not found", a.config.display())));
    }
    let mut b = ConfigBuilder::new();
    b.parse_file(&a.config).map_err(usage)?;
    for o in &a.overrides {
        b.set_override(o).map_err(usage)?;
    }
    if let Some(s) = a.seed {
        b.set_override(&format!("seed={s}")).map_err(usage)?;
    }
    let mut config = b.finish().map_err(usage)?;

    let root = a
        .out
        .or_else(|| std::env::var_os("LM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = run_dir_name(&config);
    let dir = root.join(&name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.txt"), &to_text(&config))?;
    config.checkpoint = Some(dir.join("last.ckpt"));

    let mut t = Trainer::new(config)?;
    let result = t.run();
    // the log is useful even when training diverged
    write_file(&dir.join("runlog.csv"), &t.log.to_csv())?;
    let report = result?;
    let csv = format!("{REPORT_HEADER}\n{}", report.csv_rows(&name, t.step()));
    write_file(&dir.join("report.csv"), &csv)?;
    std::fs::rename(dir.join("last.ckpt"), dir.join("final.ckpt"))
        .with_context(|| format!("finalizing checkpoint in {}", dir.display()))?;
    println!("{}", dir.display());
    Ok(())
}

/// Trained bundle and its configuration from a checkpoint.
fn load_model(path: &Path) -> anyhow::Result<(TrainConfig, ModelBundle<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let config = from_checkpoint_meta(&ck).context("reading configuration echo")?;
    let mut bundle = ModelBundle::new(config.model, config.hp, config.ae_opt, config.adv_opt, config.seed)?;
    restore_bundle(&mut bundle, &ck)?;
    Ok((config, bundle, ck))
}

fn points_csv(points: &Tensor<f32>, cols: usize, extra: Option<(&str, &[f64])>) -> String {
    let mut header: Vec<String> = (0..cols).map(|i| format!("x{i}")).collect();
    if let Some((name, _)) = extra {
        header.push(name.to_string());
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..points.rows() {
        let mut fields: Vec<String> = points.row(r).iter().map(|v| format!("{v:e}")).collect();
        if let Some((_, col)) = extra {
            fields.push(format!("{:e}", col[r]));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let (config, bundle, _) = load_model(&a.ckpt)?;
    let samples = bundle.generate(a.n, a.seed)?;
    emit(a.out.as_deref(), &points_csv(&samples, config.model.data_dim, None))?;
    if let Some(svg) = a.svg {
        let (_, held) = config.datasets()?;
        write_file(&svg, &plot::scatter(&held, &samples)?)?;
    }
    Ok(())
}

/// Numeric CSV with one header row.
fn read_points(path: &Path) -> anyhow::Result<Tensor<f32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(Tensor::from_rows(&rows)?)
}

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let (config, bundle, _) = load_model(&a.ckpt)?;
    let input = match &a.input {
        Some(p) => read_points(p)?,
        None => config.datasets()?.1,
    };
    if input.cols() != config.model.data_dim {
        bail!("input has {} columns, model expects {}", input.cols(), config.model.data_dim);
    }
    let out = bundle.reconstruct(&input)?;
    let mse = row_mse(&input, &out)?;
    emit(a.out.as_deref(), &points_csv(&out, config.model.data_dim, Some(("mse", &mse))))?;
    eprintln!("mean mse {:e}", mse.iter().sum::<f64>() / mse.len() as f64);
    if let Some(svg) = a.svg {
        write_file(&svg, &plot::scatter(&input, &out)?)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut config = from_checkpoint_meta(&ck)?;
    config.checkpoint = None;
    let name = run_dir_name(&config);
    let mut t = Trainer::resume(config, &ck)?;
    let report = t.evaluate()?;
    let csv = format!("{REPORT_HEADER}\n{}", report.csv_rows(&name, t.step()));
    emit(a.out.as_deref(), &csv)
}

fn probe(kind: Probe) -> Result<ExitCode, Failure> {
    match kind {
        Probe::KlBlowup {
            betas,
            points,
            width,
            depth,
            latent,
            batch,
            steps,
            seed,
            out,
        } => {
            let data = DatasetSpec::swiss_roll_3d(points, seed).generate::<f32>()?;
            let budget = ProbeBudget {
                width,
                depth,
                latent_dim: latent,
                batch,
                steps,
            };
            let rows = kl_blowup_probe(&data, &betas, budget, seed).map_err(usage)?;
            emit(out.as_deref(), &probe_csv(&rows))?;
        }
        Probe::Sphere { d, n, r, seeds, out } => {
            let mut csv = String::from("d,n,r,seed,empirical,predicted,relative_error\n");
            for seed in 0..seeds {
                let c = sphere_concentration_check(n, d, r, seed).map_err(usage)?;
                csv.push_str(&format!(
                    "{d},{n},{r},{seed},{:e},{:e},{:e}\n",
                    c.empirical,
                    c.predicted,
                    c.relative_error()
                ));
            }
            emit(out.as_deref(), &csv)?;
        }
        Probe::Gradcheck { cases, seed, out } => {
            let rows = run_suite(cases, seed)?;
            emit(out.as_deref(), &suite_csv(&rows))?;
            if let Some(bad) = rows.iter().find(|r| !r.passed()) {
                eprintln!(
                    "gradient check failed: {} ({}) max rel error {:e} ≥ {:e}",
                    bad.name, bad.precision, bad.max_rel_error, bad.tolerance
                );
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
