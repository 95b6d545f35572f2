use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sigan::image_io::{load_mask, load_rgb, save_heatmap, save_rgb};
use sigan::metrics::{diversity, sifid, FeatureExtractor, InceptionStem, RandomConvExtractor, TapPoint};
use sigan::pyramid::build_pyramid;
use sigan::{Error, RunConfig, Sampler, Tensor, Trainer};

#[derive(Parser)]
#[command(name = "sigan", version, about = "Train and sample single-image GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a run on one image.
    Train(TrainArgs),
    /// Draw random samples from a trained run.
    Generate(GenerateArgs),
    /// Repaint a composite so pasted content matches the learned texture.
    Harmonize(HarmonizeArgs),
    /// Repaint a masked region of an edited image.
    Edit(EditArgs),
    /// SIFID and diversity of a directory of generated images.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    image: PathBuf,
    /// Run directory; created if missing, resumed if partially trained.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    scales_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set sigma_max=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// `N` (coarsest), `N-k`, or a scale index.
    #[arg(long, default_value = "N")]
    start_scale: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    width_mult: f64,
    #[arg(long, default_value_t = 1.0)]
    height_mult: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    run: PathBuf,
    /// Scale at which the input enters the chain; must be below the coarsest.
    #[arg(long, default_value_t = 1)]
    inject_scale: usize,
    /// 1 adds per-scale noise below the injection scale, 0 runs noise-free.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    noise: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HarmonizeArgs {
    #[command(flatten)]
    inject: InjectArgs,
    /// Composite image; resized to the run's finest dims when needed.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    inject: InjectArgs,
    /// Edited image at the run's finest dims.
    #[arg(long)]
    image: PathBuf,
    /// Binary mask (white = repaint) at the same dims.
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tap {
    SecondLayer,
    BeforeSecondPool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    /// Directory of generated PNGs.
    #[arg(long)]
    fakes: PathBuf,
    /// Reference image; defaults to the run's finest training image.
    #[arg(long)]
    real: Option<PathBuf>,
    /// Exported stem weights; without them a fixed random conv net is used.
    #[arg(long)]
    inception: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "before-second-pool")]
    tap: Tap,
    /// Output directory for metrics.json and the diversity heatmap;
    /// defaults to `--fakes`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Harmonize(a) => harmonize(a),
        Command::Edit(a) => edit(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig, Error> {
    let mut cfg = if a.config == "default" {
        RunConfig::default()
    } else {
        RunConfig::load(Path::new(&a.config))?
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(c) = a.scales_cap {
        cfg.scales_cap = Some(c);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let cfg = resolve_config(&a)?;
    let image = load_rgb(&a.image)?;
    let mut trainer = if a.out.join(sigan::checkpoint::CONFIG_FILE).exists() {
        let t = Trainer::load(&a.out)?;
        if t.config().hash() != cfg.hash() {
            return Err(Error::Argument(format!(
                "{} holds a run with a different configuration; use a new --out",
                a.out.display()
            )));
        }
        let pyramid = build_pyramid(&image, &cfg.pyramid())?;
        if pyramid.levels() != t.pyramid().levels() {
            return Err(Error::Argument(format!(
                "{} was trained on a different image",
                a.out.display()
            )));
        }
        if t.is_complete() {
            println!("{} is already fully trained; nothing to do", a.out.display());
            return Ok(());
        }
        info!("resuming at scale {}", t.next_scale().unwrap_or(0));
        t
    } else {
        Trainer::new(cfg, &image)?.with_run_dir(&a.out)?
    };
    info!(
        "training {} scales {:?}",
        trainer.pyramid().len(),
        trainer.pyramid().all_dims()
    );
    while let Some(n) = trainer.next_scale() {
        let done = trainer.train_scale(n)?;
        if let Some(last) = done.log.last() {
            info!("scale {n} done: d {:.4} g {:.4} rec {:.5}", last.d_loss, last.g_loss, last.rec);
        }
    }
    trainer.train_all()?;
    println!("trained run written to {}", a.out.display());
    Ok(())
}

fn parse_start_scale(raw: &str, coarsest: usize) -> Result<usize, Error> {
    let bad = || Error::Argument(format!("--start-scale expects N, N-k or an index, got `{raw}`"));
    let s = raw.trim();
    let n = if s == "N" {
        coarsest
    } else if let Some(k) = s.strip_prefix("N-") {
        let k: usize = k.parse().map_err(|_| bad())?;
        coarsest
            .checked_sub(k)
            .ok_or_else(|| Error::Argument(format!("--start-scale {s} is below scale 0")))?
    } else {
        s.parse().map_err(|_| bad())?
    };
    Ok(n)
}

fn load_complete(run: &Path) -> Result<Trainer, Error> {
    if !run.join(sigan::checkpoint::CONFIG_FILE).exists() {
        return Err(Error::Argument(format!("{} is not a run directory", run.display())));
    }
    let t = Trainer::load(run)?;
    if !t.is_complete() {
        return Err(Error::Contract(format!(
            "{} is not fully trained ({} of {} scales)",
            run.display(),
            t.trained().len(),
            t.pyramid().len()
        )));
    }
    Ok(t)
}

fn generate(a: GenerateArgs) -> Result<(), Error> {
    let t = load_complete(&a.run)?;
    let s = Sampler::new(&t)?;
    let start = parse_start_scale(&a.start_scale, t.coarsest())?;
    if !(a.width_mult > 0.0 && a.height_mult > 0.0) {
        return Err(Error::Argument("size multipliers must be positive".into()));
    }
    let (h, w) = s.finest_dims();
    let out_dims = ((h as f64 * a.height_mult).round() as usize, (w as f64 * a.width_mult).round() as usize);
    let samples = s.generate(start, a.n, &mut ChaCha8Rng::seed_from_u64(a.seed), Some(out_dims))?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut files = Vec::new();
    for (i, x) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.png");
        save_rgb(x, &a.out.join(&name))?;
        files.push(name);
    }
    write_json(
        &a.out.join("manifest.json"),
        &json!({
            "run": a.run,
            "seed": a.seed,
            "start_scale": start,
            "height": out_dims.0,
            "width": out_dims.1,
            "files": files,
        }),
    )?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn save_output(x: &Tensor, out: &Path) -> Result<(), Error> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_rgb(x, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn harmonize(a: HarmonizeArgs) -> Result<(), Error> {
    let t = load_complete(&a.inject.run)?;
    let s = Sampler::new(&t)?;
    let mut composite = load_rgb(&a.image)?;
    let (_, h, w) = composite.chw();
    if (h, w) != s.finest_dims() {
        composite = sigan::pyramid::resize(&composite, s.finest_dims(), sigan::pyramid::ResizeMode::Auto);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.inject.seed);
    let out = s.harmonize(&composite, a.inject.inject_scale, a.inject.noise == 1, &mut rng)?;
    save_output(&out, &a.inject.out)
}

fn edit(a: EditArgs) -> Result<(), Error> {
    let t = load_complete(&a.inject.run)?;
    let s = Sampler::new(&t)?;
    let edited = load_rgb(&a.image)?;
    let mask = load_mask(&a.mask)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(a.inject.seed);
    let out = s.edit(&edited, &mask, a.inject.inject_scale, a.inject.noise == 1, &mut rng)?;
    save_output(&out, &a.inject.out)
}

fn evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let t = load_complete(&a.run)?;
    let real = match &a.real {
        Some(p) => load_rgb(p)?,
        None => t.pyramid().level(0).clone(),
    };
    let tap = match a.tap {
        Tap::SecondLayer => TapPoint::SecondLayer,
        Tap::BeforeSecondPool => TapPoint::BeforeSecondPool,
    };
    let extractor: Box<dyn FeatureExtractor> = match &a.inception {
        Some(p) => Box::new(InceptionStem::load(p, tap)?),
        None => Box::new(RandomConvExtractor::new(0, tap)),
    };

    let mut paths: Vec<PathBuf> = fs::read_dir(&a.fakes)
        .map_err(io_err(&a.fakes))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no PNG files in {}", a.fakes.display())));
    }

    let mut fakes = Vec::new();
    let mut per_image = serde_json::Map::new();
    for p in &paths {
        let fake = load_rgb(p)?;
        let score = sifid(&real, &fake, extractor.as_ref())?;
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        per_image.insert(name, json!(score));
        fakes.push(fake);
    }
    let mean = per_image.values().filter_map(|v| v.as_f64()).sum::<f64>() / per_image.len() as f64;

    let out_dir = a.out.unwrap_or_else(|| a.fakes.clone());
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut report = json!({
        "real": a.real.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "run finest scale".into()),
        "extractor": if a.inception.is_some() { "inception-stem" } else { "random-conv" },
        "sifid": { "per_image": per_image, "mean": mean },
    });
    if fakes.len() >= 2 && fakes.iter().all(|f| f.shape() == real.shape()) {
        let d = diversity(&fakes, &real)?;
        save_heatmap(&d.heatmap(), &out_dir.join("diversity.png"))?;
        report["diversity"] = json!({
            "scalar": d.scalar,
            "normalized": d.normalized,
            "heatmap": "diversity.png",
        });
    } else {
        report["diversity"] = json!(null);
        info!("diversity needs at least two fakes at the real image's size; skipped");
    }
    write_json(&out_dir.join("metrics.json"), &report)?;
    println!("mean SIFID {mean:.5} over {} images", paths.len());
    Ok(())
}
