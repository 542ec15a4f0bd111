//! The sparsity sweep: train every scheduled `(model, subset, seed)` cell,
//! collect accuracies, and write the result files.  One failed run is a row
//! in the report, not the end of the sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use xcnn_core::data::{Dataset, NormStats};
use xcnn_core::eval;
use xcnn_core::graph::{architecture, train_defaults, NetworkGraph, Preset, PresetOptions};
use xcnn_core::optim::{train, AdamConfig, AugmentConfig, TrainConfig};

use crate::checkpoint;
use crate::cifar::{self, class_counts, Variant};
use crate::error::{Error, Result};
use crate::report::{self, RunFailure, RunResult};

#[derive(Debug, Clone)]
pub enum DataSource {
    /// The official binary files under `dir`.
    Cifar { dir: PathBuf, variant: Variant },
    /// Seeded synthetic stand-in with the CIFAR geometry, for machines
    /// without the datasets.
    Synthetic { train: usize, test: usize, classes: usize, noise: f64, seed: u64 },
}

impl DataSource {
    pub fn describe(&self) -> String {
        match self {
            DataSource::Cifar { dir, variant } => {
                format!("{} at {}", variant.name(), dir.display())
            }
            DataSource::Synthetic { train, test, classes, noise, seed } => format!(
                "synthetic ({train} train / {test} test images, {classes} classes, \
                 noise {noise}, seed {seed})"
            ),
        }
    }
}

/// Which subset sizes to visit.
#[derive(Debug, Clone)]
pub enum PointsMode {
    /// The full protocol: mandatory sizes, then extend by 10 while the pair
    /// disagrees by more than half a point, closing with 100%.
    Adaptive,
    /// An explicit list, for partial or desk-scale sweeps.
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// `(baseline, cross)` pairs; the adaptive rule runs per pair and the
    /// visited points are the union.
    pub pairs: Vec<(Preset, Preset)>,
    pub source: DataSource,
    pub augment: bool,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Per-preset default when `None`.
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub points: PointsMode,
    pub out_dir: PathBuf,
    /// Class-stratified subsets instead of the default canonical prefix.
    pub stratified: bool,
    /// Cap on test images per epoch evaluation.
    pub eval_limit: Option<usize>,
}

impl SweepConfig {
    pub fn pair_names(&self) -> Vec<(String, String)> {
        self.pairs.iter().map(|&(a, b)| (a.name().to_string(), b.name().to_string())).collect()
    }
}

#[derive(Debug)]
pub struct SweepOutput {
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    /// Every subset size any pair visited, ascending.
    pub points: Vec<usize>,
}

/// The grid a sweep would visit, without training.  Under the adaptive rule
/// the extension points depend on measured accuracies, so the plan lists the
/// unconditional part.
pub fn plan(cfg: &SweepConfig) -> Vec<(String, usize, u64)> {
    let points: Vec<usize> = match &cfg.points {
        PointsMode::Fixed(pts) => pts.clone(),
        PointsMode::Adaptive => {
            eval::MANDATORY_SUBSETS.iter().copied().chain([100]).collect()
        }
    };
    let mut out = Vec::new();
    for &p in &points {
        for &(a, b) in &cfg.pairs {
            for model in [a, b] {
                for &seed in &cfg.seeds {
                    out.push((model.name().to_string(), p, seed));
                }
            }
        }
    }
    out
}

/// Both colourspaces of both splits, loaded once and shared by every run.
struct PreparedData {
    rgb: (Dataset<f32>, Dataset<f32>),
    yuv: Option<(Dataset<f32>, Dataset<f32>)>,
}

impl PreparedData {
    fn for_preset(&self, preset: Preset) -> Result<(&Dataset<f32>, &Dataset<f32>)> {
        if preset.is_cross_modal() {
            let (tr, te) = self
                .yuv
                .as_ref()
                .ok_or_else(|| Error::invalid("cross-modal preset without YUV data"))?;
            Ok((tr, te))
        } else {
            Ok((&self.rgb.0, &self.rgb.1))
        }
    }
}

/// Images `[start, len)` of a dataset, keeping order.
fn split_tail(ds: &Dataset<f32>, start: usize) -> Result<Dataset<f32>> {
    if start >= ds.len() {
        return Err(Error::invalid(format!("tail from {start} of {} images", ds.len())));
    }
    let mut images = Vec::with_capacity((ds.len() - start) * ds.image_len());
    let mut labels = Vec::with_capacity(ds.len() - start);
    for i in start..ds.len() {
        images.extend_from_slice(ds.image(i));
        labels.push(ds.label(i));
    }
    Ok(Dataset::new(images, labels, ds.num_classes(), ds.channels(), ds.height(), ds.width())?)
}

/// Load the `(train, test)` splits of a source, converted to YUV on request.
pub fn load_datasets(source: &DataSource, yuv: bool) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let (tr, te) = match source {
        DataSource::Cifar { dir, variant } => {
            let (train, test) = cifar::load_cifar(dir, *variant)?;
            (train.data, test.data)
        }
        DataSource::Synthetic { train, test, classes, noise, seed } => {
            let pool = xcnn_core::data::synthetic_learnable::<f32>(
                train + test,
                *classes,
                3,
                32,
                32,
                *seed,
                *noise,
            )?;
            (pool.take_prefix(*train)?, split_tail(&pool, *train)?)
        }
    };
    if yuv {
        Ok((tr.to_yuv()?, te.to_yuv()?))
    } else {
        Ok((tr, te))
    }
}

fn prepare_data(cfg: &SweepConfig) -> Result<PreparedData> {
    let needs_yuv = cfg.pairs.iter().any(|&(a, b)| a.is_cross_modal() || b.is_cross_modal());
    let rgb = load_datasets(&cfg.source, false)?;
    let yuv = if needs_yuv { Some((rgb.0.to_yuv()?, rgb.1.to_yuv()?)) } else { None };
    Ok(PreparedData { rgb, yuv })
}

/// Train one cell of the grid.
#[allow(clippy::too_many_arguments)]
fn run_one(
    preset: Preset,
    p: usize,
    seed: u64,
    data: &PreparedData,
    cfg: &SweepConfig,
    runs_dir: &Path,
) -> Result<RunResult> {
    let (train_full, test_full) = data.for_preset(preset)?;
    let subset = if cfg.stratified {
        // The subset stream is keyed by the class, not the run seed: every
        // seed trains on the same images.
        train_full.subset_percent(p as f64, 0)?
    } else {
        train_full.subset_prefix(p as f64)?
    };
    let counts = class_counts(&subset);
    let missing = counts.iter().filter(|&&c| c == 0).count();
    log::info!(
        "{} p={p} seed={seed}: {} training images, per-class min {} max {}",
        preset.name(),
        subset.len(),
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap(),
    );
    if missing > 0 {
        log::warn!("{} p={p}: {missing} classes have no training images", preset.name());
    }

    let norm = NormStats::compute(&subset)?;
    let mut train_set = subset;
    norm.apply(&mut train_set)?;
    let mut test_set = test_full.clone();
    norm.apply(&mut test_set)?;

    let spec = architecture(preset, train_set.num_classes(), PresetOptions::default());
    let mut graph = NetworkGraph::<f32>::build(spec, seed)?;
    let params = graph.count_params();

    let defaults = train_defaults(preset);
    let mut adam = AdamConfig::default();
    if let Some(lr) = cfg.learning_rate {
        adam.lr = lr;
    }
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size.unwrap_or(defaults.batch_size),
        l2: defaults.l2,
        augment: cfg.augment.then_some(AugmentConfig { max_shift: 4, hflip: true }),
        seed,
        adam,
        eval_batch: 200,
        eval_limit: cfg.eval_limit,
    };
    log::info!("{} p={p} seed={seed}: resolved config {tc:?}", preset.name());

    let started = Instant::now();
    let history = train(&mut graph, &train_set, Some(&test_set), &tc)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let final_accuracy = history.final_test_accuracy().unwrap_or(0.0);

    let stem = format!("{}-p{p}-s{seed}", preset.name());
    report::write_history_csv(&runs_dir.join(format!("{stem}.csv")), &history)?;
    checkpoint::save(&runs_dir.join(format!("{stem}.ckpt")), &graph, Some(&norm))?;
    log::info!(
        "{} p={p} seed={seed}: accuracy {:.4} in {wall_seconds:.0}s",
        preset.name(),
        final_accuracy
    );

    Ok(RunResult {
        model: preset.name().to_string(),
        p,
        seed,
        final_accuracy,
        history,
        params,
        wall_seconds,
    })
}

struct SweepState<'a> {
    cfg: &'a SweepConfig,
    data: PreparedData,
    runs_dir: PathBuf,
    results: Vec<RunResult>,
    failures: Vec<RunFailure>,
    visited: BTreeMap<(Preset, usize), Option<f64>>,
}

impl SweepState<'_> {
    /// Run every seed of `(preset, p)` once; the mean accuracy of the runs
    /// that finished, or `None` if none did.
    fn mean_accuracy(&mut self, preset: Preset, p: usize) -> Option<f64> {
        if let Some(&m) = self.visited.get(&(preset, p)) {
            return m;
        }
        let mut accs = Vec::new();
        for &seed in &self.cfg.seeds {
            match run_one(preset, p, seed, &self.data, self.cfg, &self.runs_dir) {
                Ok(r) => {
                    accs.push(r.final_accuracy);
                    self.results.push(r);
                }
                Err(e) => {
                    log::error!("{} p={p} seed={seed} failed: {e}", preset.name());
                    self.failures.push(RunFailure {
                        model: preset.name().to_string(),
                        p,
                        seed,
                        message: e.to_string(),
                    });
                }
            }
        }
        let mean = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
        self.visited.insert((preset, p), mean);
        mean
    }
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    if cfg.pairs.is_empty() || cfg.seeds.is_empty() || cfg.epochs == 0 {
        return Err(Error::invalid("sweep needs at least one pair, one seed and one epoch"));
    }
    let runs_dir = cfg.out_dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    log::info!("sweep over {}; output to {}", cfg.source.describe(), cfg.out_dir.display());

    let mut state = SweepState {
        cfg,
        data: prepare_data(cfg)?,
        runs_dir,
        results: Vec::new(),
        failures: Vec::new(),
        visited: BTreeMap::new(),
    };

    let mut points: BTreeSet<usize> = BTreeSet::new();
    match &cfg.points {
        PointsMode::Fixed(pts) => {
            if pts.is_empty() {
                return Err(Error::invalid("empty subset list"));
            }
            for &p in pts {
                if p == 0 || p > 100 {
                    return Err(Error::invalid(format!("subset {p}% outside 1..=100")));
                }
                for &(a, b) in &cfg.pairs {
                    state.mean_accuracy(a, p);
                    state.mean_accuracy(b, p);
                }
                points.insert(p);
            }
        }
        PointsMode::Adaptive => {
            for &(a, b) in &cfg.pairs {
                let visited = eval::run_schedule(|p| {
                    let ma = state.mean_accuracy(a, p);
                    let mb = state.mean_accuracy(b, p);
                    match (ma, mb) {
                        (Some(x), Some(y)) => (x - y).abs(),
                        // A fully failed point cannot justify extending.
                        _ => 0.0,
                    }
                });
                points.extend(visited.into_iter().map(|(p, _)| p));
            }
        }
    }

    let points: Vec<usize> = points.into_iter().collect();
    let pair_names = cfg.pair_names();
    report::write_results_csv(
        &cfg.out_dir.join("results.csv"),
        &state.results,
        &state.failures,
    )?;
    report::write_report(
        &cfg.out_dir.join("report.md"),
        &pair_names,
        &points,
        &state.results,
        &state.failures,
    )?;
    Ok(SweepOutput { results: state.results, failures: state.failures, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg(out: PathBuf) -> SweepConfig {
        SweepConfig {
            pairs: vec![(Preset::KerasNet, Preset::XKerasNet)],
            source: DataSource::Synthetic { train: 64, test: 32, classes: 4, noise: 0.05, seed: 9 },
            augment: false,
            seeds: vec![0],
            epochs: 1,
            batch_size: Some(16),
            learning_rate: None,
            points: PointsMode::Fixed(vec![50, 100]),
            out_dir: out,
            stratified: false,
            eval_limit: Some(32),
        }
    }

    #[test]
    fn a_fixed_point_sweep_produces_all_artifacts() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf());
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.results.len(), 4, "2 models x 2 points x 1 seed");
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.points, vec![50, 100]);
        for r in &out.results {
            assert!((0.0..=1.0).contains(&r.final_accuracy));
            assert!(r.params > 1_000_000);
            assert_eq!(r.history.epochs.len(), 1);
        }
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("report.md").exists());
        assert!(dir.path().join("runs/kerasnet-p50-s0.ckpt").exists());
        assert!(dir.path().join("runs/x-kerasnet-p100-s0.csv").exists());
        let report = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(report.contains("| kerasnet |"), "{report}");
    }

    #[test]
    fn the_plan_lists_the_grid_without_training() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf());
        cfg.seeds = vec![0, 1];
        let grid = plan(&cfg);
        assert_eq!(grid.len(), 2 * 2 * 2, "points x models x seeds");
        assert!(grid.contains(&("x-kerasnet".to_string(), 100, 1)));
        assert!(!dir.path().join("results.csv").exists());

        cfg.points = PointsMode::Adaptive;
        let grid = plan(&cfg);
        assert_eq!(grid.len(), 9 * 2 * 2, "mandatory points + 100");
    }

    #[test]
    fn synthetic_splits_do_not_overlap() {
        let cfg = tiny_cfg(PathBuf::from("/unused"));
        let data = prepare_data(&cfg).unwrap();
        let (tr, te) = (&data.rgb.0, &data.rgb.1);
        assert_eq!((tr.len(), te.len()), (64, 32));
        // Same generator, disjoint streams: no test image equals a train one.
        for i in 0..te.len() {
            for j in 0..tr.len() {
                assert_ne!(te.image(i), tr.image(j), "test {i} duplicates train {j}");
            }
        }
    }

    #[test]
    fn failed_cells_are_recorded_and_the_sweep_continues() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf());
        // 100% of 64 images at batch 16 is fine; make one cell impossible by
        // training on a subset smaller than any usable batch.
        cfg.points = PointsMode::Fixed(vec![1, 100]);
        cfg.batch_size = Some(128);
        let out = run_sweep(&cfg).unwrap();
        // p=1 -> 1 image -> "no usable batches" for both models; p=100 works.
        assert_eq!(out.failures.len(), 2, "{:?}", out.failures);
        assert_eq!(out.results.len(), 2);
        assert!(out.failures.iter().all(|f| f.p == 1));
        let report = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(report.contains("## Failed runs"), "{report}");
    }
}
