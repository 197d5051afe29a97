use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refinegan::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use refinegan::config::{DataKind, RunConfig};
use refinegan::dataset::{self, load_image_dir, load_image_set, load_kspace_dataset, Dataset, Split, SplitManifest};
use refinegan::kspace::{self, ComplexImage};
use refinegan::masks::{generate_mask, load_mask, save_mask, MaskSpec, Pattern};
use refinegan::metrics::{evaluate_with, zero_fill_baseline, EvaluationReport, ReportSummary};
use refinegan::trainer::{self, history_from_csv, history_to_csv, RunManifest, TrainState};
use refinegan::{plot, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

/// Compressed-sensing MRI reconstruction with chained residual generators.
#[derive(Parser)]
#[command(name = "refinegan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an undersampling mask (P5 graymap plus TOML sidecar).
    GenMasks(GenMasks),
    /// Synthesize phantoms or index an image directory; optionally write k-space grids.
    Prepare(Prepare),
    /// Train from a run configuration.
    Train(Train),
    /// Reconstruct one measurement.
    Reconstruct(Reconstruct),
    /// Score reconstructions of a test directory.
    Evaluate(Evaluate),
    /// Render training curves or metric-vs-rate charts as SVG.
    Plot(Plot),
}

#[derive(Args)]
struct GenMasks {
    #[arg(long)]
    pattern: Pattern,
    #[arg(long)]
    rate: f64,
    /// Side length; use --height/--width for rectangles.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output `.pgm`; the sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Prepare {
    /// Synthesize this many phantoms instead of reading --input.
    #[arg(long, conflicts_with = "input")]
    phantoms: Option<usize>,
    /// Directory of grayscale PNG/PGM images.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Phantom side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of images assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    split_fraction: f64,
    /// Also write each image as a fully sampled `.ksp` grid.
    #[arg(long)]
    kspace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.lr0=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Reconstruct {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Measurement `.ksp` with its `.mask.pgm` next to it.
    #[arg(long, conflicts_with_all = ["image", "mask"])]
    measurement: Option<PathBuf>,
    /// Fully sampled image to undersample with --mask.
    #[arg(long, requires = "mask")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    mask: Option<PathBuf>,
    /// 1-based checkpoint of the chain (default: last).
    #[arg(long)]
    fold: Option<usize>,
    /// Output PNG of the reconstruction magnitude.
    #[arg(long)]
    out: PathBuf,
    /// Also write the zero-filled baseline here.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Also write the complex reconstruction as a `.ksp`-format image grid.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    /// Checkpoint to evaluate; omit with --zero-fill or --oracle.
    #[arg(long, required_unless_present_any = ["zero_fill", "oracle"])]
    checkpoint: Option<PathBuf>,
    /// Score the zero-filled baseline instead of a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "oracle"])]
    zero_fill: bool,
    /// Score the ground truth itself (sanity check).
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Directory of test images (PNG/PGM) or `.ksp` grids.
    #[arg(long)]
    test_dir: PathBuf,
    #[arg(long)]
    pattern: Pattern,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 1-based checkpoint of the chain (default: last).
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Report file stem.
    #[arg(long, default_value = "report")]
    name: String,
}

#[derive(Args)]
struct Plot {
    /// Training history CSV.
    #[arg(long, required_unless_present = "reports")]
    history: Option<PathBuf>,
    /// Evaluation summaries (`.toml`) for metric-vs-rate charts.
    #[arg(long, num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenMasks(a) => gen_masks(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(Error::InvalidInput(_) | Error::Config(_)) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

// Library errors already print their source, so skip causes that repeat.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn gen_masks(a: GenMasks) -> Result<()> {
    let spec = MaskSpec::new(
        a.pattern,
        a.rate,
        a.height.unwrap_or(a.size),
        a.width.unwrap_or(a.size),
        a.seed,
    );
    let mask = generate_mask(&spec)?;
    create_parent(&a.out)?;
    save_mask(&mask, &a.out)?;
    println!(
        "{}: {} {}x{} nominal {:.4} achieved {:.4}",
        a.out.display(),
        spec.pattern,
        spec.height,
        spec.width,
        spec.nominal_rate,
        mask.rate()
    );
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn prepare(a: Prepare) -> Result<()> {
    let images_dir = a.out.join("images");
    let source = match (a.phantoms, &a.input) {
        (Some(n), _) => {
            if n < 2 {
                bail!(Error::InvalidInput("need at least 2 phantoms".into()));
            }
            fs::create_dir_all(&images_dir)?;
            for i in 0..n {
                let p = dataset::phantom(a.size, a.seed.wrapping_add(i as u64));
                dataset::write_gray_png8(&images_dir.join(format!("phantom_{i:04}.png")), a.size, a.size, &p)?;
            }
            images_dir.clone()
        }
        (None, Some(dir)) => dir.clone(),
        (None, None) => bail!(Error::InvalidInput("give --phantoms N or --input DIR".into())),
    };
    let (train, test) = load_image_dir(&source, a.split_fraction, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let manifest = SplitManifest::new(&train, &test, a.split_fraction, a.seed);
    fs::write(a.out.join("split.toml"), manifest.to_toml())?;
    for (set, sub) in [(&train, "train"), (&test, "test")] {
        let dir = a.out.join(sub);
        fs::create_dir_all(&dir)?;
        for name in set.names() {
            fs::copy(source.join(name), dir.join(name))?;
        }
        if a.kspace {
            let kdir = a.out.join(format!("{sub}_kspace"));
            fs::create_dir_all(&kdir)?;
            for (i, name) in set.names().iter().enumerate() {
                let grid = kspace::forward_fourier(&set.raw_item(i))?;
                let stem = Path::new(name).with_extension("ksp");
                kspace::write_grid(&grid, &kdir.join(stem))?;
            }
        }
    }
    println!(
        "{} train / {} test images under {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_train_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok(match cfg.data.kind {
        DataKind::Images => load_image_dir(&cfg.data.dir, cfg.data.split_fraction, cfg.data.split_seed)?,
        DataKind::Kspace => load_kspace_dataset(&cfg.data.dir)?.split(cfg.data.split_fraction, cfg.data.split_seed)?,
    })
}

fn train(a: Train) -> Result<()> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let (train_set, test_set) = load_train_data(&cfg)?;
    let run = &cfg.output;
    let ckpt_dir = run.join("checkpoints");
    for d in [run.clone(), ckpt_dir.clone(), run.join("reports"), run.join("plots")] {
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    }
    fs::write(run.join("config.resolved.toml"), cfg.to_toml())?;
    RunManifest::new(&cfg.train, &[&train_set, &test_set]).write(&run.join("manifest.toml"))?;
    let split = SplitManifest::new(&train_set, &test_set, cfg.data.split_fraction, cfg.data.split_seed);
    fs::write(run.join("split.toml"), split.to_toml())?;

    let mut state = match &a.resume {
        Some(path) => {
            let mut st = load_checkpoint(path)?;
            // Only the epoch budget may change on resume; it also rescales the lr schedule.
            let same = trainer::TrainConfig {
                epochs: cfg.train.epochs,
                ..st.config.clone()
            } == cfg.train;
            if !same {
                bail!(Error::Config(format!(
                    "{} was written with a different training configuration",
                    path.display()
                )));
            }
            if st.epoch > cfg.train.epochs {
                bail!(Error::Config(format!(
                    "{} is already at epoch {}, past train.epochs = {}",
                    path.display(),
                    st.epoch,
                    cfg.train.epochs
                )));
            }
            st.config.epochs = cfg.train.epochs;
            st
        }
        None => TrainState::new(cfg.train.clone())?,
    };
    let every = cfg.train.checkpoint_every;
    let history_path = run.join("history.csv");
    let start = Instant::now();
    let outcome = trainer::train_until(&mut state, &train_set, cfg.train.epochs, |st| {
        let last = st.history.last().expect("one step per epoch");
        println!(
            "epoch {:>4}  total {:.6}  freq {:.6}  imag {:.6}  adv_g {:.4}  adv_d {:.4}  lr {:.3e}",
            st.epoch, last.total, last.freq, last.imag, last.adv_g, last.adv_d, last.lr
        );
        if every > 0 && st.epoch % every == 0 {
            save_checkpoint(st, &ckpt_dir.join(format!("epoch-{:04}.ckpt", st.epoch)))?;
        }
        Ok(())
    });
    fs::write(&history_path, history_to_csv(&state.history)?)?;
    outcome?;
    save_checkpoint(&state, &ckpt_dir.join("final.ckpt"))?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s; run directory {}",
        state.epoch,
        state.step,
        start.elapsed().as_secs_f64(),
        run.display()
    );
    Ok(())
}

fn fold_index(fold: Option<usize>, folds: usize) -> Result<usize> {
    match fold {
        None => Ok(folds - 1),
        Some(k) if (1..=folds).contains(&k) => Ok(k - 1),
        Some(k) => bail!(Error::InvalidInput(format!("fold {k} outside 1..={folds}"))),
    }
}

fn write_magnitude(path: &Path, img: &ComplexImage, range: (f64, f64)) -> Result<()> {
    create_parent(path)?;
    let (h, w) = img.shape();
    dataset::write_gray_png(path, h, w, &img.magnitude(), range.0, range.1)?;
    Ok(())
}

fn reconstruct(a: Reconstruct) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let k = fold_index(a.fold, model.network.folds)?;
    let m = match (&a.measurement, &a.image, &a.mask) {
        (Some(p), _, _) => kspace::read_measurement(p)?,
        (None, Some(img), Some(mask)) => {
            let (h, w, px) = dataset::read_gray_image(img)?;
            let truth = ComplexImage::from_real(h, w, &px)?;
            kspace::undersample(&truth, &load_mask(mask)?)?
        }
        _ => bail!(Error::InvalidInput("give --measurement or --image with --mask".into())),
    };
    let start = Instant::now();
    let recon = trainer::reconstruct_checkpoints(&model, &m)?.swap_remove(k);
    let elapsed = start.elapsed();
    let s0 = kspace::zero_fill(&m)?;
    let mag = s0.magnitude();
    let range = (0.0, mag.iter().cloned().fold(0.0, f64::max));
    write_magnitude(&a.out, &recon, range)?;
    if let Some(b) = &a.baseline {
        write_magnitude(b, &s0, range)?;
    }
    if let Some(r) = &a.raw {
        create_parent(r)?;
        let grid = kspace::KSpaceGrid::new(recon.height(), recon.width(), recon.data().to_vec())?;
        kspace::write_grid(&grid, r)?;
    }
    println!("wall time: {:.1} ms", elapsed.as_secs_f64() * 1e3);
    Ok(())
}

fn load_test_dir(dir: &Path) -> Result<Dataset> {
    let has_ksp = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("ksp")));
    Ok(if has_ksp {
        load_kspace_dataset(dir)?
    } else {
        load_image_set(dir, Split::Test)?
    })
}

fn evaluate(a: Evaluate) -> Result<()> {
    let test = load_test_dir(&a.test_dir)?;
    let (h, w) = test.shape().expect("loaders reject empty sets");
    let spec = MaskSpec::new(a.pattern, a.rate, h, w, a.seed);
    let report: EvaluationReport = if a.zero_fill {
        zero_fill_baseline(&test, &spec)?
    } else if a.oracle {
        let mut next = 0;
        evaluate_with(&test, &spec, "oracle", |_| {
            next += 1;
            Ok(test.raw_item(next - 1))
        })?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let model = load_model(path)?;
        let k = fold_index(a.fold, model.network.folds)?;
        let label = format!("{}#{}", path.display(), k + 1);
        trainer::evaluate(&model, &test, &spec, Some(k), &label)?
    };
    report.write(&a.out, &a.name)?;
    let s = report.summary();
    println!(
        "{} images, {} {:.3}: psnr {:.3} dB  ssim {:.4}  nrmse {:.4}",
        s.count, spec.pattern, s.achieved_rate, s.psnr.mean, s.ssim.mean, s.nrmse.mean
    );
    Ok(())
}

fn plot_cmd(a: Plot) -> Result<()> {
    let mut written = Vec::new();
    if let Some(h) = &a.history {
        let text = fs::read_to_string(h).with_context(|| format!("reading {}", h.display()))?;
        written.extend(plot::plot_history(&history_from_csv(&text)?, &a.out)?);
    }
    if !a.reports.is_empty() {
        let summaries = a
            .reports
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<ReportSummary>(&text)
                    .map_err(|e| Error::malformed("evaluation summary", e.to_string()))
                    .with_context(|| p.display().to_string())
            })
            .collect::<Result<Vec<_>>>()?;
        written.extend(plot::plot_rate_sweep(&summaries, &a.out)?);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
