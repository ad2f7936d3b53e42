use std::path::Path;
use std::time::Instant;

use corrattack_core::attack::{hierarchical_attack, AttackConfig, AttackMode, AttackResult, NoObserver, Selection};
use corrattack_core::image::Shape;
use corrattack_core::oracle::{
    argmax, CountingOracle, LinearModel, LogitsModel, LogitsOracle, MlpModel, RemoteModel, SyntheticModel,
    BENCH_CLASSES,
};
use rayon::prelude::*;

use crate::config::{BenchConfig, DatasetSource, OracleSource, SyntheticKind};
use crate::dataset::{load_dataset, synthetic_dataset, Ingest, Sample};
use crate::error::BenchError;
use crate::report::{BenchmarkReport, ImageRecord};

/// Hidden width of the synthetic two-layer model.
pub const MLP_HIDDEN: usize = 64;

/// Produces one independent model handle per worker.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Synthetic(SyntheticModel),
    Remote(RemoteModel),
}

impl ModelSource {
    pub fn synthetic(kind: SyntheticKind, shape: Shape, seed: u64) -> Self {
        ModelSource::Synthetic(match kind {
            SyntheticKind::Linear => SyntheticModel::Linear(LinearModel::seeded(shape, BENCH_CLASSES, seed)),
            SyntheticKind::Mlp => SyntheticModel::Mlp2(MlpModel::seeded(shape, BENCH_CLASSES, MLP_HIDDEN, seed)),
        })
    }

    /// Synthetic models are built for `shape`; remote models are health-checked.
    pub fn open(source: &OracleSource, shape: Shape) -> Result<Self, BenchError> {
        Ok(match source {
            OracleSource::Synthetic { kind, seed } => Self::synthetic(*kind, shape, *seed),
            OracleSource::Remote { url } => ModelSource::Remote(RemoteModel::connect(url)?),
        })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSource::Synthetic(m) => m.num_classes(),
            ModelSource::Remote(m) => m.num_classes(),
        }
    }

    pub fn handle(&self) -> Box<dyn LogitsModel + Send> {
        match self {
            ModelSource::Synthetic(m) => Box::new(m.clone()),
            ModelSource::Remote(m) => Box::new(m.clone()),
        }
    }
}

/// Same action space and acceptance rule as the flip attack, but each pass
/// visits its actions in uniformly random order instead of by expected
/// improvement.
pub fn random_block_baseline<O: LogitsOracle + ?Sized>(
    oracle: &mut O,
    x: &corrattack_core::Image,
    label: usize,
    config: &AttackConfig,
) -> corrattack_core::Result<AttackResult> {
    let mut config = config.clone();
    config.mode = AttackMode::Flip;
    config.selection = Selection::UniformRandom;
    hierarchical_attack(oracle, x, label, &config, &mut NoObserver)
}

/// Loads the configured dataset and the model that will answer queries.
pub fn prepare(config: &BenchConfig) -> Result<(Vec<Sample>, ModelSource), BenchError> {
    match &config.dataset {
        DatasetSource::Synthetic { count, seed } => {
            let side = config.image_size.unwrap_or(32);
            let shape = Shape::new(config.channels, side, side);
            let source = ModelSource::open(&config.oracle, shape)?;
            let samples = synthetic_dataset(*count, *seed, shape, &mut source.handle())?;
            Ok((samples, source))
        }
        DatasetSource::Directory { dir, labels } => {
            let mut ingest = Ingest {
                channels: config.channels,
                size: config.image_size,
                block: config.attack.initial_block,
                num_classes: None,
            };
            let remote = match &config.oracle {
                OracleSource::Remote { .. } => {
                    let source = ModelSource::open(&config.oracle, Shape::new(config.channels, 1, 1))?;
                    ingest.num_classes = Some(source.num_classes());
                    Some(source)
                }
                OracleSource::Synthetic { .. } => {
                    ingest.num_classes = Some(BENCH_CLASSES);
                    None
                }
            };
            let samples = load_dataset(dir, labels, &ingest)?;
            let source = match remote {
                Some(s) => s,
                None => {
                    let shape = samples
                        .first()
                        .map(|s| s.image.shape)
                        .unwrap_or(Shape::new(config.channels, 32, 32));
                    ModelSource::open(&config.oracle, shape)?
                }
            };
            Ok((samples, source))
        }
    }
}

/// Attacks one sample. Images the model already gets wrong are recorded as
/// not attempted.
pub fn attack_sample(
    config: &BenchConfig,
    source: &ModelSource,
    index: usize,
    sample: &Sample,
) -> Result<(ImageRecord, Option<AttackResult>), BenchError> {
    let mut model = source.handle();
    let predicted = argmax(&model.logits(&sample.image)?);
    if predicted != sample.label {
        let record = ImageRecord {
            image_id: sample.id.clone(),
            attempted: false,
            success: false,
            queries: None,
            final_loss: None,
            wall_ms: None,
        };
        return Ok((record, None));
    }
    let mut attack = config.attack.clone();
    attack.seed = config.attack.seed ^ index as u64;
    if sample.target.is_some() {
        attack.target = sample.target;
    }
    let mut oracle = CountingOracle::new(model);
    let start = Instant::now();
    let result = hierarchical_attack(&mut oracle, &sample.image, sample.label, &attack, &mut NoObserver)?;
    let record = ImageRecord {
        image_id: sample.id.clone(),
        attempted: true,
        success: result.success,
        queries: Some(result.queries),
        final_loss: Some(result.final_loss),
        wall_ms: config.record_wall_time.then(|| start.elapsed().as_millis() as u64),
    };
    Ok((record, Some(result)))
}

/// Runs the configured attack over every sample on `config.workers` threads.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchmarkReport, BenchError> {
    let (samples, source) = prepare(config)?;
    run_samples(config, &source, &samples)
}

pub fn run_samples(
    config: &BenchConfig,
    source: &ModelSource,
    samples: &[Sample],
) -> Result<BenchmarkReport, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
    let records = pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| attack_sample(config, source, i, s).map(|(r, _)| r))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(BenchmarkReport::from_records(records, config.attack.query_budget, config.curve_points))
}

/// [`run_benchmark`] plus `results.csv` and `report.json` in `out_dir`.
pub fn run_benchmark_to(config: &BenchConfig, out_dir: &Path) -> Result<BenchmarkReport, BenchError> {
    let report = run_benchmark(config)?;
    report.save(out_dir)?;
    Ok(report)
}
