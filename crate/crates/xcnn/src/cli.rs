//! The `xcnn` binary: train, sweep, visualize, params and data subcommands.
//!
//! Every run logs its fully resolved configuration at info level, so any
//! result can be re-derived from the log alone.

use std::fs;
use std::io::Read;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xcnn_core::data::{Dataset, NormStats};
use xcnn_core::graph::{
    architecture, train_defaults, NetworkGraph, Preset, PresetOptions,
};
use xcnn_core::introspect::{self, AscentConfig, RgbImage};
use xcnn_core::optim::{train, AdamConfig, AugmentConfig, TrainConfig};
use xcnn_core::Tape;

use crate::archfile;
use crate::checkpoint::{self, Checkpoint};
use crate::cifar::{self, class_counts, Split, Variant};
use crate::error::{Error, Result};
use crate::harness::{self, DataSource, PointsMode, SweepConfig};
use crate::ppm;
use crate::report;

#[derive(Debug, Parser)]
#[command(
    name = "xcnn",
    version,
    about = "Cross-modal CNNs: training, sparsity sweeps and visualisation",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model once; writes a checkpoint and a history CSV.
    Train(TrainArgs),
    /// Train baseline/cross pairs over a grid of subset sizes and seeds.
    Sweep(SweepArgs),
    /// Render pieces of a trained network as PPM images.
    #[command(subcommand)]
    Visualize(VisualizeCmd),
    /// Print exact trainable-parameter counts for the built-in presets.
    Params(ParamsArgs),
    /// Describe a dataset: split sizes, class balance, record round-trip.
    Data(DataArgs),
}

/// Dispatch a parsed invocation; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Params(a) => cmd_params(a),
        Command::Data(a) => cmd_data(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

// ---- shared flags ---------------------------------------------------------

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DatasetArg {
    Cifar10,
    Cifar100,
}

impl DatasetArg {
    fn variant(self) -> Variant {
        match self {
            DatasetArg::Cifar10 => Variant::Cifar10,
            DatasetArg::Cifar100 => Variant::Cifar100,
        }
    }
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Which dataset geometry and label set to use.
    #[arg(long, value_enum, default_value_t = DatasetArg::Cifar10)]
    dataset: DatasetArg,
    /// Directory holding the official CIFAR binary files.
    #[arg(long, env = "DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Use seeded synthetic data even when real files are available.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic training images.
    #[arg(long, default_value_t = 2000)]
    synthetic_train: usize,
    /// Synthetic test images.
    #[arg(long, default_value_t = 500)]
    synthetic_test: usize,
}

impl SourceArgs {
    /// Real files when a directory is known, the seeded synthetic stand-in
    /// otherwise.
    fn resolve(&self) -> DataSource {
        let variant = self.dataset.variant();
        if !self.synthetic {
            if let Some(dir) = &self.data_dir {
                return DataSource::Cifar { dir: dir.clone(), variant };
            }
            log::warn!("no --data-dir or DATA_DIR; falling back to synthetic data");
        }
        DataSource::Synthetic {
            train: self.synthetic_train,
            test: self.synthetic_test,
            classes: variant.num_classes(),
            noise: 0.05,
            seed: 9,
        }
    }
}

fn source_classes(source: &DataSource) -> usize {
    match source {
        DataSource::Cifar { variant, .. } => variant.num_classes(),
        DataSource::Synthetic { classes, .. } => *classes,
    }
}

/// `0,1,2`, a half-open `0..3`, or an inclusive `0..=2`.
fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let one = |t: &str| {
        t.trim().parse::<u64>().map_err(|_| Error::invalid(format!("bad seed `{t}` in `{s}`")))
    };
    let seeds: Vec<u64> = if let Some((a, rest)) = s.split_once("..") {
        let start = one(a)?;
        match rest.strip_prefix('=') {
            Some(end) => (start..=one(end)?).collect(),
            None => (start..one(rest)?).collect(),
        }
    } else {
        s.split(',').map(one).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(Error::invalid(format!("no seeds in `{s}`")));
    }
    Ok(seeds)
}

/// `4460106` -> `4,460,106`.
fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

// ---- params ---------------------------------------------------------------

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Preset name, or `all`.
    #[arg(default_value = "all")]
    preset: String,
    /// Output classes; the design targets assume 10.
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

/// The model sizes each preset was designed to land on.
fn design_target(preset: Preset) -> &'static str {
    match preset {
        Preset::KerasNet => "~4.46M",
        Preset::XKerasNet => "~4.37M",
        Preset::FitNet4 => "~2.75M",
        Preset::XFitNet4 => "~2.72M",
    }
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let presets: Vec<Preset> = if a.preset == "all" {
        Preset::all().to_vec()
    } else {
        vec![Preset::parse(&a.preset)?]
    };
    for preset in presets {
        let spec = architecture(preset, a.classes, PresetOptions::default());
        let graph = NetworkGraph::<f32>::build(spec, 0)?;
        let count = group_thousands(graph.count_params());
        if a.classes == 10 {
            println!(
                "{:<12} {:>9} parameters (design target {})",
                preset.name(),
                count,
                design_target(preset)
            );
        } else {
            println!("{:<12} {:>9} parameters ({} classes)", preset.name(), count, a.classes);
        }
    }
    Ok(())
}

// ---- train ----------------------------------------------------------------

#[derive(Debug, Args)]
struct TrainArgs {
    /// Built-in architecture to train.
    #[arg(long, required_unless_present = "arch", conflicts_with = "arch")]
    preset: Option<String>,
    /// TOML architecture file instead of a preset.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Training-subset size, percent of the training split.
    #[arg(long, default_value_t = 100.0)]
    p: f64,
    /// Random shifts and horizontal flips during training.
    #[arg(long)]
    augment: bool,
    /// Per-preset default when omitted.
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-preset default when omitted.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for weight init, shuffling, augmentation and dropout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class-stratified subset instead of the canonical prefix.
    #[arg(long)]
    stratified: bool,
    /// Cap on test images evaluated per epoch.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let preset = a.preset.as_deref().map(Preset::parse).transpose()?;
    let source = a.source.resolve();
    let classes = source_classes(&source);
    let spec = match (&a.arch, preset) {
        (Some(path), _) => archfile::load_architecture(path)?,
        (None, Some(p)) => architecture(p, classes, PresetOptions::default()),
        (None, None) => unreachable!("clap requires --preset or --arch"),
    };
    if spec.num_classes != classes {
        return Err(Error::invalid(format!(
            "architecture `{}` has {} classes but the dataset has {classes}",
            spec.name, spec.num_classes
        )));
    }
    // Multi-stream models read one YUV channel per superlayer.
    let yuv = spec.superlayers.len() > 1;
    log::info!("data: {}, fed as {}", source.describe(), if yuv { "yuv" } else { "rgb" });
    let (train_full, test_full) = harness::load_datasets(&source, yuv)?;

    let subset = if a.stratified {
        train_full.subset_percent(a.p, 0)?
    } else {
        train_full.subset_prefix(a.p)?
    };
    let counts = class_counts(&subset);
    log::info!(
        "{} training images at p={}%, per-class min {} max {}",
        subset.len(),
        a.p,
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap()
    );
    let norm = NormStats::compute(&subset)?;
    let mut train_set = subset;
    norm.apply(&mut train_set)?;
    let mut test_set = test_full;
    norm.apply(&mut test_set)?;

    let defaults = train_defaults(preset.unwrap_or(Preset::KerasNet));
    let mut adam = AdamConfig::default();
    if let Some(lr) = a.lr {
        adam.lr = lr;
    }
    let tc = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        l2: defaults.l2,
        augment: a.augment.then_some(AugmentConfig { max_shift: 4, hflip: true }),
        seed: a.seed,
        adam,
        eval_batch: 200,
        eval_limit: a.eval_limit,
    };

    let mut graph = NetworkGraph::<f32>::build(spec, a.seed)?;
    log::info!(
        "model {}: {} parameters; resolved config {tc:?}",
        graph.spec().name,
        graph.count_params()
    );

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let history = train(&mut graph, &train_set, Some(&test_set), &tc)?;

    let stem = format!("{}-p{}-s{}", graph.spec().name, a.p, a.seed);
    let history_path = a.out.join(format!("{stem}.csv"));
    let ckpt_path = a.out.join(format!("{stem}.ckpt"));
    report::write_history_csv(&history_path, &history)?;
    checkpoint::save(&ckpt_path, &graph, Some(&norm))?;
    println!(
        "final test accuracy {:.4}; wrote {} and {}",
        history.final_test_accuracy().unwrap_or(0.0),
        history_path.display(),
        ckpt_path.display()
    );
    Ok(())
}

// ---- sweep ----------------------------------------------------------------

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Comma-separated preset names in baseline,cross order, e.g.
    /// `kerasnet,x-kerasnet,fitnet4,x-fitnet4`.
    #[arg(long, value_delimiter = ',', default_value = "kerasnet,x-kerasnet")]
    models: Vec<String>,
    /// Random shifts and horizontal flips during training.
    #[arg(long)]
    augment: bool,
    /// `0,1,2`, a half-open `0..3`, or an inclusive `0..=2`.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Per-preset default when omitted.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated subset percentages; the adaptive schedule when omitted.
    #[arg(long, value_delimiter = ',')]
    points: Option<Vec<usize>>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Class-stratified subsets instead of canonical prefixes.
    #[arg(long)]
    stratified: bool,
    /// Cap on test images evaluated per epoch.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Print the unconditional grid and exit without training.
    #[arg(long)]
    dry_run: bool,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let presets = a
        .models
        .iter()
        .map(|n| Preset::parse(n).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    if presets.is_empty() || presets.len() % 2 != 0 {
        return Err(Error::invalid("--models wants baseline,cross pairs"));
    }
    let pairs: Vec<(Preset, Preset)> = presets.chunks(2).map(|c| (c[0], c[1])).collect();
    for &(base, cross) in &pairs {
        if cross != base.counterpart() {
            log::warn!("{} is not the designed partner of {}", cross.name(), base.name());
        }
    }
    let cfg = SweepConfig {
        pairs,
        source: a.source.resolve(),
        augment: a.augment,
        seeds: parse_seeds(&a.seeds)?,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        points: match a.points {
            Some(pts) => PointsMode::Fixed(pts),
            None => PointsMode::Adaptive,
        },
        out_dir: a.out,
        stratified: a.stratified,
        eval_limit: a.eval_limit,
    };
    if a.dry_run {
        let grid = harness::plan(&cfg);
        println!("{} runs over {}:", grid.len(), cfg.source.describe());
        for (model, p, seed) in grid {
            println!("  {model} p={p} seed={seed}");
        }
        if matches!(cfg.points, PointsMode::Adaptive) {
            println!("(adaptive extensions past 50% depend on measured gaps)");
        }
        return Ok(());
    }
    let out = harness::run_sweep(&cfg)?;
    println!(
        "{} runs finished, {} failed; subsets visited: {:?}",
        out.results.len(),
        out.failures.len(),
        out.points
    );
    println!("report: {}", cfg.out_dir.join("report.md").display());
    Ok(())
}

// ---- visualize ------------------------------------------------------------

#[derive(Debug, Subcommand)]
enum VisualizeCmd {
    /// A 1x1 cross-connection kernel as a red/blue weight grid.
    Heatmap(HeatmapArgs),
    /// Gradient-ascent image that maximises one channel of a layer.
    Ascend(AscendArgs),
    /// One input's activation volume at a layer, projected to RGB.
    Featuremap(FeaturemapArgs),
}

fn cmd_visualize(cmd: VisualizeCmd) -> Result<()> {
    match cmd {
        VisualizeCmd::Heatmap(a) => cmd_heatmap(a),
        VisualizeCmd::Ascend(a) => cmd_ascend(a),
        VisualizeCmd::Featuremap(a) => cmd_featuremap(a),
    }
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    /// Checkpoint written by `train` or `sweep`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Architecture file, for checkpoints of non-preset models.
    #[arg(long)]
    arch: Option<PathBuf>,
}

impl CheckpointArgs {
    /// The trained graph plus any stored input-normalisation statistics.
    fn load(&self) -> Result<(NetworkGraph<f32>, Option<NormStats<f32>>)> {
        let ckpt: Checkpoint<f32> = checkpoint::load(&self.checkpoint)?;
        let spec = match &self.arch {
            Some(path) => archfile::load_architecture(path)?,
            None => {
                let preset = Preset::parse(&ckpt.spec_name).map_err(|_| {
                    Error::invalid(format!(
                        "checkpoint model `{}` is not a preset; pass --arch",
                        ckpt.spec_name
                    ))
                })?;
                architecture(preset, ckpt.num_classes, PresetOptions::default())
            }
        };
        let mut graph = NetworkGraph::build(spec, 0)?;
        let norm = ckpt.restore(&mut graph)?;
        Ok((graph, norm))
    }
}

/// A named-step check that lists the alternatives on a miss.
fn check_layer(graph: &NetworkGraph<f32>, layer: &str) -> Result<()> {
    let names = graph.layer_names();
    if names.iter().any(|n| *n == layer) {
        return Ok(());
    }
    Err(Error::invalid(format!("unknown layer `{layer}`; known layers:\n  {}", names.join("\n  "))))
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Conv layer whose kernel to draw; must be 1x1.
    #[arg(long)]
    layer: String,
    /// Square cell size in pixels.
    #[arg(long, default_value_t = 8)]
    cell: usize,
    /// Output PPM file.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<()> {
    let (graph, _) = a.ckpt.load()?;
    check_layer(&graph, &a.layer)?;
    let kernel = graph.conv_kernel(&a.layer)?;
    let img = introspect::kernel_heatmap(kernel, a.cell)?;
    ppm::write_ppm(&a.out, &img)?;
    println!("wrote {} ({}x{})", a.out.display(), img.width, img.height);
    Ok(())
}

#[derive(Debug, Args)]
struct AscendArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Layer whose activation to maximise.
    #[arg(long)]
    layer: String,
    /// Channel within the layer.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// L2 pull toward zero.
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    /// Accepted gradient steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Seed of the white-noise starting image.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PPM file.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_ascend(a: AscendArgs) -> Result<()> {
    let (graph, _) = a.ckpt.load()?;
    check_layer(&graph, &a.layer)?;
    let cfg = AscentConfig {
        lambda: a.lambda,
        steps: a.steps,
        seed: a.seed,
        ..AscentConfig::default()
    };
    log::info!("ascent on {} channel {} with {cfg:?}", a.layer, a.channel);
    let res = introspect::maximize_channel(&graph, &a.layer, a.channel, &cfg)?;
    let (_, c, h, w) = res.image.dims4()?;
    let img = introspect::feature_map_rgb(res.image.data(), c, h, w, a.seed)?;
    ppm::write_ppm(&a.out, &img)?;
    println!(
        "objective {:.4} -> {:.4} over {} accepted steps; wrote {}",
        res.trace.first().copied().unwrap_or(0.0),
        res.trace.last().copied().unwrap_or(0.0),
        res.trace.len().saturating_sub(1),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
struct FeaturemapArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Layer whose activations to render.
    #[arg(long)]
    layer: String,
    /// PPM image to feed in; a test-split image when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Test-split image to feed in.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    source: SourceArgs,
    /// Seed of the many-channel colour projection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PPM file.
    #[arg(long)]
    out: PathBuf,
}

/// One PPM image as a single-record RGB dataset in `[0, 1]`.
fn dataset_from_ppm(img: &RgbImage, classes: usize) -> Result<Dataset<f32>> {
    let mut planar = Vec::with_capacity(3 * img.height * img.width);
    for ch in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                planar.push(f32::from(img.get(x, y)[ch]) / 255.0);
            }
        }
    }
    Ok(Dataset::new(planar, vec![0], classes, 3, img.height, img.width)?)
}

fn cmd_featuremap(a: FeaturemapArgs) -> Result<()> {
    let (graph, norm) = a.ckpt.load()?;
    check_layer(&graph, &a.layer)?;
    let yuv = graph.spec().superlayers.len() > 1;
    let mut input = match &a.image {
        Some(path) => {
            let img = ppm::read_ppm(path)?;
            let ds = dataset_from_ppm(&img, graph.spec().num_classes)?;
            if yuv {
                ds.to_yuv()?
            } else {
                ds
            }
        }
        None => {
            let source = a.source.resolve();
            let (_, test) = harness::load_datasets(&source, yuv)?;
            if a.index >= test.len() {
                return Err(Error::invalid(format!(
                    "--index {} of {} test images",
                    a.index,
                    test.len()
                )));
            }
            Dataset::new(
                test.image(a.index).to_vec(),
                vec![test.label(a.index)],
                test.num_classes(),
                test.channels(),
                test.height(),
                test.width(),
            )?
        }
    };
    if let Some(n) = &norm {
        n.apply(&mut input)?;
    }
    let (batch, _) = input.batch(&[0])?;
    let mut tape = Tape::new();
    let id = graph.forward_to(&mut tape, &batch, &a.layer)?;
    let shape = tape.shape(id)?.to_vec();
    let (c, h, w) = match shape.as_slice() {
        [_, c, h, w] => (*c, *h, *w),
        [_, u] => (*u, 1, 1),
        _ => return Err(Error::invalid(format!("layer {} has shape {shape:?}", a.layer))),
    };
    let img = introspect::feature_map_rgb(tape.value(id)?, c, h, w, a.seed)?;
    ppm::write_ppm(&a.out, &img)?;
    println!("layer {}: {} maps of {}x{}; wrote {}", a.layer, c, h, w, a.out.display());
    Ok(())
}

// ---- data -----------------------------------------------------------------

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    source: SourceArgs,
}

fn describe_split(name: &str, ds: &Dataset<f32>) {
    println!(
        "{name}: {} images, {} classes, {}x{}x{}",
        ds.len(),
        ds.num_classes(),
        ds.channels(),
        ds.height(),
        ds.width()
    );
    let counts = class_counts(ds);
    if counts.len() <= 20 {
        println!("  per-class: {counts:?}");
    } else {
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        println!("  per-class: min {min}, max {max}");
    }
}

fn cmd_data(a: DataArgs) -> Result<()> {
    let source = a.source.resolve();
    println!("source: {}", source.describe());
    match &source {
        DataSource::Cifar { dir, variant } => {
            let train = cifar::load_split(dir, *variant, Split::Train)?;
            let test = cifar::load_split(dir, *variant, Split::Test)?;
            describe_split("train", &train.data);
            describe_split("test", &test.data);

            // The first record must re-serialise to the exact file bytes.
            let (name, _) = variant.train_files()[0];
            let path = dir.join(name);
            let mut raw = vec![0u8; variant.record_len()];
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            file.take(raw.len() as u64)
                .read_exact(&mut raw)
                .map_err(|e| Error::io(&path, e))?;
            if train.record_bytes(0)? != raw {
                return Err(Error::format(&path, "first record does not re-serialise", 0));
            }
            println!("first train record round-trips: ok");
        }
        DataSource::Synthetic { .. } => {
            let (train, test) = harness::load_datasets(&source, false)?;
            describe_split("train", &train);
            describe_split("test", &test);
        }
    }
    Ok(())
}
