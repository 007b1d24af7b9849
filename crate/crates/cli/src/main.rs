mod data;
mod manifest;
mod plot;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use cqlab::baselines::Baseline;
use cqlab::colour::RgbImage;
use cqlab::dataset::Dataset;
use cqlab::harness::{metrics_csv, run_embedding_stage, run_evolution_stage, EvolutionConfig, Objective, TrainConfig, TrainOptions, Trainer};
use cqlab::io::{encode_indexed_png, palette_csv, write_rgb_png, Checkpoint};
use cqlab::recognition::{evaluate_top1, Quantiser};
use cqlab::wcs::{map_agreement, nafaanra_1978, HumanWcsMap, MachineWcsMap};

use data::DataSpec;
use manifest::{hash_path, InputRecord, Run};

#[derive(Parser)]
#[command(name = "cqlab", version, about = "Colour quantisation laboratory", after_help = "Runs without --out go to $CQLAB_OUT/<command>-<input hash> (default root: ./runs).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Cqformer,
    Mediancut,
    MediancutDither,
    Octree,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Cqformer => "cqformer",
            Method::Mediancut => "mediancut",
            Method::MediancutDither => "mediancut-dither",
            Method::Octree => "octree",
        }
    }

    fn baseline(self) -> Option<Baseline> {
        match self {
            Method::Cqformer => None,
            Method::Mediancut => Some(Baseline::MedianCut),
            Method::MediancutDither => Some(Baseline::MedianCutDither),
            Method::Octree => Some(Baseline::Octree),
        }
    }
}

#[derive(clap::Args)]
struct OutArg {
    /// Run directory (default: $CQLAB_OUT/<command>-<input hash>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Quantise an image or a directory of images to an indexed PNG and palette CSV
    Quantise {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "mediancut")]
        method: Method,
        /// Palette size is 2^bits (cqformer: must match the checkpoint)
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=6))]
        bits: Option<u32>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Jointly train quantiser and classifier
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: String,
        /// Held-out evaluation data
        #[arg(long, conflicts_with = "holdout")]
        test: Option<String>,
        /// Use the last N samples of --data for evaluation
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier train run
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Embed a human naming system, then split one term into a new colour
    Evolve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `nafaanra`, `synthetic` or a row,col,term,probability CSV
        #[arg(long, default_value = "nafaanra")]
        hmap: String,
        #[arg(long, default_value = "synthetic-chips:800")]
        data: String,
        /// Data for the accuracy trace
        #[arg(long)]
        test: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Build and render the machine WCS map of a trained quantiser
    WcsMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Human map to score agreement against (also labels synthetic-chips data)
        #[arg(long)]
        hmap: Option<String>,
        /// Rendered pixels per chip
        #[arg(long, default_value_t = 8)]
        cell: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Top-1 accuracy of a checkpoint's classifier behind a quantiser
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value = "cqformer")]
        method: Method,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=6))]
        bits: Option<u32>,
        /// Skip quantisation entirely
        #[arg(long, conflicts_with_all = ["method", "bits"])]
        upper_bound: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Aggregate eval runs into a bits-accuracy table and curve
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
}

/// Exit status 2 for bad usage or configuration, 1 for everything else.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<cqlab::Error>().is_some_and(|e| matches!(e, cqlab::Error::Config(_)))
                || e.downcast_ref::<Usage>().is_some();
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn dispatch(cmd: Command) -> Result<PathBuf> {
    match cmd {
        Command::Quantise { input, method, bits, checkpoint, out } => quantise(&input, method, bits, checkpoint.as_deref(), out.out.as_deref()),
        Command::Train { config, data, test, holdout, seed, checkpoint, out } => {
            train(config.as_deref(), &data, test.as_deref(), holdout, seed, checkpoint.as_deref(), out.out.as_deref())
        }
        Command::Evolve { config, hmap, data, test, seed, out } => evolve(config.as_deref(), &hmap, &data, test.as_deref(), seed, out.out.as_deref()),
        Command::WcsMap { checkpoint, data, hmap, cell, out } => wcs_map(&checkpoint, &data, hmap.as_deref(), cell, out.out.as_deref()),
        Command::Eval { checkpoint, data, method, bits, upper_bound, out } => eval(&checkpoint, &data, method, bits, upper_bound, out.out.as_deref()),
        Command::Report { runs, out } => report_cmd(&runs, out.out.as_deref()),
    }
}

fn spec(raw: &str) -> Result<DataSpec> {
    raw.parse().map_err(|e: anyhow::Error| usage(format!("{e:#}")))
}

fn file_input(role: &str, path: &Path) -> Result<InputRecord> {
    Ok(InputRecord { role: role.into(), source: path.display().to_string(), hash: hash_path(path)? })
}

fn load_hmap(spec: &str) -> Result<HumanWcsMap> {
    Ok(match spec {
        "nafaanra" => nafaanra_1978(),
        "synthetic" => {
            // light rows / dark cool / dark warm, one-hot
            let modes: Vec<usize> = cqlab::colour::WcsGrid::chips().map(|c| if c.row < 3 { 1 } else if c.col < 14 { 2 } else { 0 }).collect();
            HumanWcsMap::one_hot(vec!["light".into(), "dark".into(), "warm".into()], &modes)?
        }
        path => HumanWcsMap::load(Path::new(path))?,
    })
}

fn hmap_input(spec: &str) -> Result<InputRecord> {
    match spec {
        "nafaanra" | "synthetic" => Ok(InputRecord { role: "hmap".into(), source: spec.into(), hash: cqlab::io::blob_hash(spec.as_bytes()) }),
        path => file_input("hmap", Path::new(path)),
    }
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no images in {}", input.display());
        }
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

fn quantise(input: &Path, method: Method, bits: Option<u32>, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let learned = match (method, checkpoint) {
        (Method::Cqformer, None) => return Err(usage("--method cqformer needs --checkpoint")),
        (Method::Cqformer, Some(p)) => {
            let q = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.quantiser()?;
            if let Some(b) = bits {
                if 1usize << b != q.colours() {
                    return Err(usage(format!("checkpoint quantises to {} colours, not 2^{b}", q.colours())));
                }
            }
            Some(q)
        }
        (_, _) => None,
    };
    let colours = match (&learned, bits) {
        (Some(q), _) => q.colours(),
        (None, Some(b)) => 1usize << b,
        (None, None) => return Err(usage(format!("--method {} needs --bits", method.name()))),
    };
    let files = image_files(input)?;
    let mut inputs = vec![file_input("input", input)?];
    if let Some(p) = checkpoint {
        inputs.push(file_input("checkpoint", p)?);
    }
    let mut run = Run::start("quantise", json!({"method": method.name(), "colours": colours}), None, inputs, out)?;
    let mut summary = String::from("file,colours,palette_size,mse\n");
    for f in &files {
        let img = RgbImage::from_rgb8(&image::open(f).with_context(|| format!("reading {}", f.display()))?.to_rgb8())?;
        let (palette, index) = match (&learned, method.baseline()) {
            (Some(q), _) => {
                let (_, idx, pal) = q.quantise_test(&img)?;
                (pal, idx)
            }
            (None, Some(b)) => b.quantise(&img, colours)?,
            (None, None) => unreachable!(),
        };
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        run.write(&format!("{stem}.png"), encode_indexed_png(&index, &palette)?)?;
        run.write(&format!("{stem}.palette.csv"), palette_csv(&palette))?;
        let mse = palette.render(&index).mse(&img)?;
        let used = index.shares().iter().filter(|&&s| s > 0.0).count();
        summary.push_str(&format!("{stem},{used},{},{mse}\n", palette.len()));
    }
    run.write("quantise.csv", summary)?;
    run.finish()
}

fn split_data(raw: &str, test: Option<&str>, holdout: Option<usize>, hmap: Option<&HumanWcsMap>) -> Result<(Dataset, Option<Dataset>)> {
    let all = spec(raw)?.load(hmap)?;
    match (test, holdout) {
        (Some(t), _) => Ok((all, Some(spec(t)?.load(hmap)?))),
        (None, Some(n)) => {
            if n == 0 || n >= all.len() {
                return Err(usage(format!("--holdout must be between 1 and {}", all.len().saturating_sub(1))));
            }
            let (a, b) = all.split_at(all.len() - n);
            Ok((a, Some(b)))
        }
        (None, None) => Ok((all, None)),
    }
}

fn train(config: Option<&Path>, data: &str, test: Option<&str>, holdout: Option<usize>, seed: Option<u64>, resume: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data_spec = spec(data)?;
    let mut inputs = vec![data_spec.record("data", data)?];
    if let Some(t) = test {
        inputs.push(spec(t)?.record("test", t)?);
    }
    if let Some(p) = resume {
        inputs.push(file_input("checkpoint", p)?);
    }
    let resolved = json!({"train": serde_json::to_value(&cfg)?, "holdout": holdout});
    let (train_set, test_set) = split_data(data, test, holdout, None)?;
    let mut run = Run::start("train", resolved, Some(cfg.seed), inputs, out)?;
    run.write("config.toml", cfg.to_toml())?;

    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), &Checkpoint::load(p)?, Objective::Standard)?,
        None => Trainer::new(cfg.clone(), train_set.num_classes())?,
    };
    let opts = TrainOptions { checkpoint_dir: Some(run.path("checkpoints")) };
    let outcome = trainer.run(&train_set, test_set.as_ref(), &opts);
    run.write("metrics.csv", metrics_csv(&trainer.history))?;
    for e in 1..=trainer.epoch {
        let name = format!("checkpoints/epoch_{e:03}.cqck");
        if run.path(&name).exists() {
            run.record(name);
        }
    }
    if let Err(e) = outcome {
        if run.path("checkpoints/diverged.cqck").exists() {
            run.record("checkpoints/diverged.cqck");
        }
        run.finish()?;
        return Err(e.into());
    }
    run.write("final.cqck", trainer.checkpoint().to_bytes()?)?;
    run.finish()
}

fn write_map(run: &mut Run, stem: &str, map: &MachineWcsMap, cell: usize) -> Result<()> {
    run.write(&format!("{stem}.csv"), map.to_csv())?;
    write_rgb_png(&run.path(&format!("{stem}.png")), &map.render(cell))?;
    run.record(format!("{stem}.png"));
    Ok(())
}

fn shares_csv(shares: &[f64]) -> String {
    let mut out = String::from("colour,share\n");
    for (k, s) in shares.iter().enumerate() {
        out.push_str(&format!("{k},{s}\n"));
    }
    out
}

fn evolve(config: Option<&Path>, hmap_spec: &str, data: &str, test: Option<&str>, seed: Option<u64>, out: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = match config {
        Some(p) => EvolutionConfig::load(p)?,
        None => EvolutionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let hmap = load_hmap(hmap_spec)?;
    if hmap.colours() != cfg.colours {
        return Err(usage(format!("config has {} colours but the human map has {} terms", cfg.colours, hmap.colours())));
    }
    if hmap.term_index(&cfg.parent_term).is_none() {
        return Err(usage(format!("parent term {:?} is not one of {:?}", cfg.parent_term, hmap.terms())));
    }
    let mut inputs = vec![hmap_input(hmap_spec)?, spec(data)?.record("data", data)?];
    if let Some(t) = test {
        inputs.push(spec(t)?.record("test", t)?);
    }
    let (train_set, test_set) = split_data(data, test, None, Some(&hmap))?;
    let mut run = Run::start("evolve", serde_json::to_value(&cfg)?, Some(cfg.seed), inputs, out)?;
    run.write("config.toml", cfg.to_toml())?;

    let embedded = run_embedding_stage(&cfg, &hmap, &train_set)?;
    run.write("embedding_metrics.csv", metrics_csv(&embedded.trainer.history))?;
    write_map(&mut run, "wcs_embedded", &embedded.machine_map, 8)?;
    let report = run_evolution_stage(&embedded, &cfg, &train_set, test_set.as_ref())?;
    run.write("evolution_metrics.csv", metrics_csv(&report.history))?;
    write_map(&mut run, "wcs_pre", &report.pre_map, 8)?;
    write_map(&mut run, "wcs_post", &report.post_map, 8)?;
    run.write("shares_pre.csv", shares_csv(&report.pre_shares))?;
    run.write("shares_post.csv", shares_csv(&report.post_shares))?;
    let mut summary = report.summary_json();
    summary["embedding_agreement"] = json!(embedded.agreement);
    summary["terms"] = json!(embedded.terms);
    run.write("report.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    run.write("final.cqck", report.trainer.checkpoint().to_bytes()?)?;
    println!("new colour share {:.4}", report.new_colour_share);
    run.finish()
}

fn wcs_map(checkpoint: &Path, data: &str, hmap_spec: Option<&str>, cell: usize, out: Option<&Path>) -> Result<PathBuf> {
    if cell == 0 {
        return Err(usage("--cell must be positive"));
    }
    let quantiser = Checkpoint::load(checkpoint)?.quantiser()?;
    let hmap = hmap_spec.map(load_hmap).transpose()?;
    let mut inputs = vec![file_input("checkpoint", checkpoint)?, spec(data)?.record("data", data)?];
    if let Some(h) = hmap_spec {
        inputs.push(hmap_input(h)?);
    }
    let dataset = spec(data)?.load(hmap.as_ref())?;
    let mut run = Run::start("wcs-map", json!({"cell": cell}), None, inputs, out)?;
    let map = cqlab::harness::machine_map(&quantiser, &dataset)?;
    write_map(&mut run, "wcs_map", &map, cell)?;
    run.write("shares.csv", shares_csv(&map.pixel_shares()))?;
    if let Some(h) = &hmap {
        if h.colours() == map.colours() {
            let a = map_agreement(&map, h)?;
            run.write("agreement.json", serde_json::to_string_pretty(&json!({"map_agreement": a}))? + "\n")?;
        } else {
            log::warn!("human map has {} terms but the quantiser has {} colours; agreement skipped", h.colours(), map.colours());
        }
    }
    run.finish()
}

fn eval(checkpoint: &Path, data: &str, method: Method, bits: Option<u32>, upper_bound: bool, out: Option<&Path>) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let classifier = ck.classifier()?.ok_or_else(|| usage("checkpoint has no classifier"))?;
    let learned = if !upper_bound && method == Method::Cqformer { Some(ck.quantiser()?) } else { None };
    let (label, bits) = if upper_bound {
        ("upper-bound".to_string(), 24)
    } else if let Some(q) = &learned {
        let b = q.colours().ilog2();
        if let Some(want) = bits {
            if want != b || q.colours() != 1 << b {
                return Err(usage(format!("checkpoint quantises to {} colours, not 2^{want}", q.colours())));
            }
        }
        (method.name().to_string(), b)
    } else {
        (method.name().to_string(), bits.ok_or_else(|| usage(format!("--method {} needs --bits", method.name())))?)
    };
    let quantiser = match (&learned, method.baseline()) {
        _ if upper_bound => Quantiser::Bypass,
        (Some(q), _) => Quantiser::Learned(q),
        (None, Some(b)) => Quantiser::Classical(b, 1usize << bits),
        (None, None) => unreachable!(),
    };
    let inputs = vec![file_input("checkpoint", checkpoint)?, spec(data)?.record("data", data)?];
    let dataset = spec(data)?.load(None)?;
    if dataset.num_classes() != classifier.config().num_classes {
        bail!("data has {} classes, classifier has {}", dataset.num_classes(), classifier.config().num_classes);
    }
    let mut run = Run::start("eval", json!({"method": label, "bits": bits}), None, inputs, out)?;
    let result = evaluate_top1(&classifier, quantiser, &dataset)?;
    run.write("eval.csv", format!("{}\n{label},{bits},{},{}\n", report::EVAL_HEADER, result.top1, result.samples))?;
    let mut per_class = String::from("class,top1\n");
    for (k, a) in result.per_class.iter().enumerate() {
        per_class.push_str(&format!("{k},{}\n", a.map(|v| v.to_string()).unwrap_or_default()));
    }
    run.write("per_class.csv", per_class)?;
    println!("top1 {:.4}", result.top1);
    run.finish()
}

fn report_cmd(runs: &[PathBuf], out: Option<&Path>) -> Result<PathBuf> {
    let (rows, warnings) = report::collect(runs);
    for w in &warnings {
        log::warn!("skipping {w}");
    }
    if rows.is_empty() {
        return Err(anyhow!("no readable eval runs"));
    }
    let inputs = runs
        .iter()
        .filter(|r| r.join("eval.csv").exists())
        .map(|r| file_input("eval", &r.join("eval.csv")))
        .collect::<Result<Vec<_>>>()?;
    let mut run = Run::start("report", json!({"runs": runs.len()}), None, inputs, out)?;
    run.write("report.csv", report::table_csv(&rows))?;
    let curves = report::curves(&rows);
    run.write("curves.csv", report::curves_csv(&curves))?;
    let series: Vec<Vec<(u32, f64)>> = curves.iter().map(|c| c.1.clone()).collect();
    write_rgb_png(&run.path("curve.png"), &plot::render_curves(&series))?;
    run.record("curve.png");
    run.finish()
}
