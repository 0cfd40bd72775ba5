//! Command-line surface: data generation, training, evaluation, and
//! decomposition of measured pressure vectors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex;

use wavesplit::acoustics::{MicArray, PointSource, PressureVector, Wavenumber};
use wavesplit::evaluation::{field_map, run_sweep, ExperimentConfig, Method};
use wavesplit::io::{
    load_dataset, save_sfs_dataset, save_ssl_dataset, Dataset, ModelKind, ModelWeights,
};
use wavesplit::models::net::{SfsNet, SslNet};
use wavesplit::pipeline::decompose;
use wavesplit::scalar::Point3;
use wavesplit::training::{
    curves_to_csv, train_baseline, train_sfs, train_sfs_frozen_ssl, train_ssl, SfsDataset,
    SslDataset, TrainConfig, Trained,
};

#[derive(Parser)]
#[command(
    name = "wavesplit",
    about = "Sound field decomposition: two-stage neural pipeline and sparse baseline",
    version
)]
struct Cli {
    /// Worker thread cap for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a microphone array definition file.
    GenMics(GenMics),
    /// Generate a dataset of source positions.
    GenData(GenData),
    /// Train a model and save its weights.
    Train(Train),
    /// Run a metrics sweep over frequencies, SNRs, and trials.
    Eval(Eval),
    /// Decompose one observed pressure vector into point sources.
    Decompose(Decompose),
    /// Evaluate a reconstructed field on a plane lattice.
    Field(Field),
}

#[derive(Args)]
struct GenMics {
    /// Number of microphones (64 uses the bundled spherical t-design).
    #[arg(long, default_value_t = 64)]
    m: usize,
    /// Sphere radius in meters.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Use the Fibonacci spiral layout instead of the t-design.
    #[arg(long)]
    fibonacci: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenData {
    /// Dataset kind: ssl (single positions) or sfs (position pairs).
    #[arg(long)]
    kind: String,
    /// Frequency in Hz baked into the dataset header.
    #[arg(long, default_value_t = 500.0)]
    freq: f64,
    /// Number of items.
    #[arg(long)]
    count: usize,
    /// Master seed (required when WAVESPLIT_CI=1).
    #[arg(long)]
    seed: Option<u64>,
    /// SSL dataset supplying the position pools (required for --kind sfs).
    #[arg(long)]
    ssl_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Model: ssl, sfs, baseline, or sfs-frozen.
    #[arg(long)]
    model: String,
    /// Dataset file from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// key=value hyperparameter file (epochs, batch_size, learning_rate,
    /// snr_min, snr_max, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Microphone array file; defaults to the bundled 64-mic t-design.
    #[arg(long)]
    mics: Option<PathBuf>,
    /// Frozen localizer weights (required for --model sfs-frozen).
    #[arg(long)]
    weights_ssl: Option<PathBuf>,
    /// Initial separator weights to fine-tune (sfs-frozen only).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Master seed override (required when WAVESPLIT_CI=1 and the config
    /// file sets none).
    #[arg(long)]
    seed: Option<u64>,
    /// Best-validation weights output path; final-epoch weights are
    /// written alongside with a .final suffix.
    #[arg(long)]
    out: PathBuf,
    /// Learning-curve CSV (epoch,train_loss,val_loss).
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    /// Method: proposed, proposed-lbase, baseline, or sparse.
    #[arg(long)]
    method: String,
    /// Source count S (1 or 2).
    #[arg(long)]
    sources: usize,
    /// Frequencies in Hz: comma list or start:end:step range.
    #[arg(long, default_value = "500")]
    freqs: String,
    /// SNRs in dB (comma list; inf for noiseless).
    #[arg(long, default_value = "40")]
    snr: String,
    /// Trials per (frequency, snr) cell.
    #[arg(long)]
    trials: usize,
    /// Master seed (required when WAVESPLIT_CI=1).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mics: Option<PathBuf>,
    /// Localizer weights (proposed / proposed-lbase).
    #[arg(long)]
    weights_ssl: Option<PathBuf>,
    /// Separator weights (proposed / proposed-lbase with S=2).
    #[arg(long)]
    weights_sfs: Option<PathBuf>,
    /// Baseline localizer weights (method baseline).
    #[arg(long)]
    weights_baseline: Option<PathBuf>,
    /// Grid pitch in meters (method sparse).
    #[arg(long)]
    delta: Option<f64>,
    /// Draw trial positions from this dataset's validation split.
    #[arg(long)]
    positions_from: Option<PathBuf>,
    /// Report Eq-literal error-over-signal SDR instead of
    /// signal-over-distortion.
    #[arg(long)]
    literal_sdr: bool,
    /// Per-trial metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Aggregate CSV path (default: <out>.agg.csv).
    #[arg(long)]
    agg_out: Option<PathBuf>,
}

#[derive(Args)]
struct Decompose {
    /// Input pressure CSV: mic_index,re,im per line.
    #[arg(long)]
    input: PathBuf,
    /// Source count S (1 or 2).
    #[arg(long)]
    s: usize,
    #[arg(long)]
    mics: Option<PathBuf>,
    #[arg(long)]
    freq: f64,
    #[arg(long)]
    weights_ssl: PathBuf,
    #[arg(long)]
    weights_sfs: Option<PathBuf>,
    /// Output sources CSV: index,x,y,z,amp_re,amp_im.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Field {
    /// Sources CSV from decompose (index,x,y,z,amp_re,amp_im).
    #[arg(long)]
    sources: PathBuf,
    /// Plane spec: x=V, y=V, or z=V.
    #[arg(long)]
    plane: String,
    /// Half-extent of the plane lattice in meters.
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    /// Lattice pitch in meters.
    #[arg(long, default_value_t = 0.1)]
    pitch: f64,
    #[arg(long)]
    freq: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    match cli.command {
        Command::GenMics(c) => gen_mics(c),
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Decompose(c) => decompose_cmd(c),
        Command::Field(c) => field(c),
    }
}

fn ci_seed(seed: Option<u64>, what: &str) -> Result<u64> {
    match seed {
        Some(s) => Ok(s),
        None => {
            if std::env::var("WAVESPLIT_CI").as_deref() == Ok("1") {
                bail!("{what} requires an explicit --seed when WAVESPLIT_CI=1");
            }
            Ok(0)
        }
    }
}

fn load_mics(path: &Option<PathBuf>) -> Result<MicArray<f64>> {
    match path {
        Some(p) => {
            // radius is inferred from the first point
            let text = std::fs::read_to_string(p).with_context(|| format!("read {}", p.display()))?;
            let first = text
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty() && !l.starts_with('#'))
                .context("empty mic file")?;
            let coords: Vec<f64> = first
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .context("parse mic file")?;
            let radius = Point3([coords[0], coords[1], coords[2]]).norm();
            Ok(MicArray::parse(&text, radius)?)
        }
        None => Ok(MicArray::tdesign_64()),
    }
}

fn gen_mics(c: GenMics) -> Result<()> {
    let mics: MicArray<f64> = if c.fibonacci {
        MicArray::fibonacci_sphere(c.m, c.radius)
    } else {
        if c.m != 64 {
            bail!("the bundled t-design has 64 points; use --fibonacci for other sizes");
        }
        let unit = MicArray::tdesign_64();
        MicArray {
            positions: unit.positions.iter().map(|p| p.scale(c.radius)).collect(),
            radius: c.radius,
        }
    };
    mics.save(&c.out)?;
    println!("wrote {} microphones to {}", mics.len(), c.out.display());
    Ok(())
}

fn gen_data(c: GenData) -> Result<()> {
    let seed = ci_seed(c.seed, "gen-data")?;
    match c.kind.as_str() {
        "ssl" => {
            let ds = SslDataset::generate(c.count, c.freq, seed);
            save_ssl_dataset(&ds, &c.out)?;
            println!(
                "wrote {} positions ({} train) to {}",
                ds.positions.len(),
                ds.train_count,
                c.out.display()
            );
        }
        "sfs" => {
            let ssl_path = c
                .ssl_data
                .context("--kind sfs requires --ssl-data (the SSL dataset to pair from)")?;
            let ssl = match load_dataset(&ssl_path)? {
                Dataset::Ssl(ds) => ds,
                Dataset::Sfs(_) => bail!("--ssl-data must be an SSL dataset"),
            };
            let ds = SfsDataset::generate_from(&ssl, c.count, seed);
            save_sfs_dataset(&ds, &c.out)?;
            println!(
                "wrote {} pairs ({} train) to {}",
                ds.pairs.len(),
                ds.train_count,
                c.out.display()
            );
        }
        other => bail!("unknown dataset kind `{other}` (expected ssl or sfs)"),
    }
    Ok(())
}

fn parse_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let Some(path) = path else { return Ok(cfg) };
    let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let ctx = || format!("{}:{}: bad value for {key}", path.display(), lineno + 1);
        match key {
            "epochs" => cfg.epochs = value.parse().with_context(ctx)?,
            "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
            "learning_rate" => cfg.learning_rate = value.parse().with_context(ctx)?,
            "snr_min" => cfg.snr_range_db.0 = value.parse().with_context(ctx)?,
            "snr_max" => cfg.snr_range_db.1 = value.parse().with_context(ctx)?,
            "seed" => cfg.seed = value.parse().with_context(ctx)?,
            other => bail!("{}:{}: unknown key `{other}`", path.display(), lineno + 1),
        }
    }
    Ok(cfg)
}

fn save_run<N>(
    trained: &Trained<N>,
    to_weights: impl Fn(&N) -> ModelWeights,
    out: &Path,
    curves: &Option<PathBuf>,
) -> Result<()> {
    to_weights(&trained.best).save(out)?;
    let final_path = out.with_extension("final.bin");
    to_weights(&trained.final_net).save(&final_path)?;
    if let Some(c) = curves {
        std::fs::write(c, curves_to_csv(&trained.curves))?;
    }
    println!(
        "best epoch {} -> {}; final -> {}",
        trained.best_epoch,
        out.display(),
        final_path.display()
    );
    Ok(())
}

fn train(c: Train) -> Result<()> {
    let mut cfg = parse_config(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    } else if !config_sets_seed(&c.config)? {
        // in CI the seed must come from the flag or the config file
        cfg.seed = ci_seed(None, "train")?;
    }
    let mics = load_mics(&c.mics)?;
    let ds = load_dataset(&c.data)?;
    match (c.model.as_str(), ds) {
        ("ssl", Dataset::Ssl(ds)) => {
            let t = train_ssl(&ds, &mics, &cfg, None)?;
            save_run(&t, |n| ModelWeights::from_ssl(n, ModelKind::Ssl), &c.out, &c.curves)
        }
        ("sfs", Dataset::Sfs(ds)) => {
            let t = train_sfs(&ds, &mics, &cfg, None)?;
            save_run(&t, ModelWeights::from_sfs, &c.out, &c.curves)
        }
        ("baseline", Dataset::Sfs(ds)) => {
            let t = train_baseline(&ds, &mics, &cfg, None)?;
            save_run(
                &t,
                |n| ModelWeights::from_ssl(n, ModelKind::Baseline),
                &c.out,
                &c.curves,
            )
        }
        ("sfs-frozen", Dataset::Sfs(ds)) => {
            let ssl_path = c
                .weights_ssl
                .context("--model sfs-frozen requires --weights-ssl")?;
            let ssl: SslNet<f64> = ModelWeights::load(&ssl_path)?.to_ssl()?;
            let init = match &c.init {
                Some(p) => Some(ModelWeights::load(p)?.to_sfs()?),
                None => None,
            };
            let t = train_sfs_frozen_ssl(&ds, &mics, &ssl, init, &cfg)?;
            save_run(&t, ModelWeights::from_sfs, &c.out, &c.curves)
        }
        ("ssl", _) => bail!("--model ssl needs an SSL dataset"),
        ("sfs" | "baseline" | "sfs-frozen", _) => bail!("--model {} needs an SFS dataset", c.model),
        (other, _) => bail!("unknown model `{other}`"),
    }
}

fn config_sets_seed(path: &Option<PathBuf>) -> Result<bool> {
    let Some(path) = path else { return Ok(false) };
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .any(|l| !l.starts_with('#') && l.split_once('=').map(|(k, _)| k.trim()) == Some("seed")))
}

fn parse_list(spec: &str) -> Result<Vec<f64>> {
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            bail!("range must be start:end:step, got `{spec}`");
        }
        let (start, end, step): (f64, f64, f64) =
            (parts[0].parse()?, parts[1].parse()?, parts[2].parse()?);
        if step <= 0.0 || end < start {
            bail!("bad range `{spec}`");
        }
        let mut out = Vec::new();
        let mut v = start;
        while v <= end + 1e-9 {
            out.push(v);
            v += step;
        }
        Ok(out)
    } else {
        spec.split(',')
            .map(|t| {
                let t = t.trim();
                if t.eq_ignore_ascii_case("inf") {
                    Ok(f64::INFINITY)
                } else {
                    t.parse::<f64>().map_err(Into::into)
                }
            })
            .collect()
    }
}

fn eval(c: Eval) -> Result<()> {
    let seed = ci_seed(c.seed, "eval")?;
    let mics = load_mics(&c.mics)?;
    let positions_pool = match &c.positions_from {
        Some(p) => Some(match load_dataset(p)? {
            Dataset::Ssl(ds) => ds.val().to_vec(),
            Dataset::Sfs(ds) => {
                let mut v: Vec<Point3<f64>> = Vec::new();
                for (a, b) in ds.val() {
                    for cand in [a, b] {
                        if !v.contains(cand) {
                            v.push(*cand);
                        }
                    }
                }
                v
            }
        }),
        None => None,
    };
    let cfg = ExperimentConfig {
        frequencies_hz: parse_list(&c.freqs)?,
        snrs_db: parse_list(&c.snr)?,
        source_count: c.sources,
        trials: c.trials,
        seed,
        positions_pool,
        literal_sdr: c.literal_sdr,
    };
    let ssl_weights = |p: &Option<PathBuf>| -> Result<SslNet<f64>> {
        let p = p.as_ref().context("--weights-ssl is required for this method")?;
        Ok(ModelWeights::load(p)?.to_ssl()?)
    };
    let sfs_weights = |p: &Option<PathBuf>| -> Result<Option<SfsNet<f64>>> {
        Ok(match p {
            Some(p) => Some(ModelWeights::load(p)?.to_sfs()?),
            None => None,
        })
    };
    let result = match c.method.as_str() {
        "proposed" | "proposed-lbase" => {
            let ssl = ssl_weights(&c.weights_ssl)?;
            let sfs = sfs_weights(&c.weights_sfs)?;
            run_sweep(
                &cfg,
                &mics,
                &Method::Proposed {
                    ssl: &ssl,
                    sfs: sfs.as_ref(),
                },
                Some(c.method.as_str()),
            )?
        }
        "baseline" => {
            let p = c
                .weights_baseline
                .as_ref()
                .context("--weights-baseline is required for method baseline")?;
            let net: SslNet<f64> = ModelWeights::load(p)?.to_ssl()?;
            run_sweep(&cfg, &mics, &Method::Baseline { net: &net }, None)?
        }
        "sparse" => {
            let delta = c.delta.context("--delta is required for method sparse")?;
            run_sweep(&cfg, &mics, &Method::Sparse { delta }, None)?
        }
        other => bail!("unknown method `{other}`"),
    };
    std::fs::write(&c.out, &result.trials_csv)?;
    let agg_path = c
        .agg_out
        .unwrap_or_else(|| c.out.with_extension("agg.csv"));
    std::fs::write(&agg_path, &result.aggregate_csv)?;
    println!(
        "wrote {} trial rows to {} (aggregates: {})",
        result.rows.len(),
        c.out.display(),
        agg_path.display()
    );
    Ok(())
}

fn read_pressures(path: &Path, m: usize) -> Result<PressureVector<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let mut p = vec![Complex::new(0.0, 0.0); m];
    let mut seen = vec![false; m];
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') || line.starts_with("mic_index") {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            bail!("pressure CSV expects mic_index,re,im; got `{line}`");
        }
        let idx: usize = f[0].parse()?;
        if idx >= m {
            bail!("mic index {idx} out of range (array has {m} mics)");
        }
        p[idx] = Complex::new(f[1].parse()?, f[2].parse()?);
        seen[idx] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        bail!("pressure CSV is missing mic index {missing}");
    }
    Ok(p)
}

fn decompose_cmd(c: Decompose) -> Result<()> {
    let mics = load_mics(&c.mics)?;
    let k = Wavenumber::from_frequency(c.freq);
    let p = read_pressures(&c.input, mics.len())?;
    let ssl: SslNet<f64> = ModelWeights::load(&c.weights_ssl)?.to_ssl()?;
    let sfs: Option<SfsNet<f64>> = match &c.weights_sfs {
        Some(w) => Some(ModelWeights::load(w)?.to_sfs()?),
        None => None,
    };
    let dec = decompose(&p, c.s, sfs.as_ref(), &ssl, &mics, &k)?;
    let mut out = String::from("index,x,y,z,amp_re,amp_im\n");
    for (i, src) in dec.sources.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, src.position.0[0], src.position.0[1], src.position.0[2], src.amplitude.re,
            src.amplitude.im
        ));
    }
    std::fs::write(&c.out, &out)?;
    if dec.degenerate {
        eprintln!("warning: coincident position estimates; collapsed to one source");
    }
    println!("wrote {} sources to {}", dec.sources.len(), c.out.display());
    Ok(())
}

fn read_sources(path: &Path) -> Result<Vec<PointSource<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') || line.starts_with("index") {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            bail!("sources CSV expects index,x,y,z,amp_re,amp_im; got `{line}`");
        }
        out.push(PointSource {
            position: Point3([f[1].parse()?, f[2].parse()?, f[3].parse()?]),
            amplitude: Complex::new(f[4].parse()?, f[5].parse()?),
        });
    }
    if out.is_empty() {
        bail!("no sources in {}", path.display());
    }
    Ok(out)
}

fn field(c: Field) -> Result<()> {
    let sources = read_sources(&c.sources)?;
    let (axis, level) = c
        .plane
        .split_once('=')
        .with_context(|| format!("plane must be x=V, y=V, or z=V; got `{}`", c.plane))?;
    let axis = match axis.trim() {
        "x" => 'x',
        "y" => 'y',
        "z" => 'z',
        other => bail!("unknown plane axis `{other}`"),
    };
    let level: f64 = level.trim().parse()?;
    let k = Wavenumber::from_frequency(c.freq);
    let csv = field_map(&sources, axis, level, c.extent, c.pitch, &k);
    std::fs::write(&c.out, &csv)?;
    println!("wrote field map to {}", c.out.display());
    Ok(())
}
