//! Experiment configuration: a flat INI-style text format plus validation.
//!
//! Grammar: `[section]` headers, `key = value` pairs, `#` or `;` line
//! comments, blank lines ignored. Keys are case-sensitive. List values are
//! comma-separated. CLI flags override file keys.
//!
//! Sections and keys (all optional; defaults are desk-scale):
//!
//! ```text
//! [experiment]  seeds = 1,2,3,4,5    jobs = 0 (auto)    timings = false
//! [dataset]     kinds = digits,synth    train = 2000    test = 1000
//!               classes = 4    channels = 1    height = 28    width = 28
//!               seed = 7
//! [model]       arch = cnn | dense    seed = 11
//! [attack]      lr = 0.03    weight_decay = 0.01    checkpoint_interval = 30
//!               max_iterations = 3000    masked = drop | zero
//!               init_max = 1.0 (dummy image init is uniform in [0, init_max])
//! [grid]        none =    mask = 0.2,0.3,0.4    clip = 0.995
//!               prune = 0.95    noise = 0.5
//! [rounds]      rounds = 25    epochs = 1    clients = 10    batch_size = 32
//!               lr = 0.001    seed = 3
//! [aggregation] kinds = mean,median
//! [partition]   kinds = iid,dirichlet    beta = 0.5    min_shard = 1    seed = 5
//! [output]      dir = out
//! ```
//!
//! `mnist` and `cifar10` dataset kinds read their standard binary files
//! from the directory in the `FEDLEAK_DATA_DIR` environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::aggregate::AggregationKind;
use crate::attack::{AttackConfig, DummyInit, MaskedTargets};
use crate::data::{load_cifar10, load_mnist, synth_dataset, synth_digits, Dataset};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelConfig, OptimizerSpec};
use crate::obfuscate::{ObfuscationMethod, ObfuscationSpec};
use crate::protocol::{PartitionKind, PartitionSpec, RoundConfig};
use crate::rng;

pub const DATA_DIR_ENV: &str = "FEDLEAK_DATA_DIR";

/// Parsed INI document: section -> key -> value.
pub type IniDoc = BTreeMap<String, BTreeMap<String, String>>;

pub fn parse_ini(text: &str) -> Result<IniDoc> {
    let mut doc: IniDoc = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {}: unterminated section header", lineno + 1))
            })?;
            section = name.trim().to_string();
            doc.entry(section.clone()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        doc.entry(section.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(doc)
}

fn get<'d>(doc: &'d IniDoc, section: &str, key: &str) -> Option<&'d str> {
    doc.get(section).and_then(|s| s.get(key)).map(|s| s.as_str())
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::Config(format!("[{section}] {key}: cannot parse `{v}`"))
    })
}

fn num_or<T: std::str::FromStr>(doc: &IniDoc, section: &str, key: &str, default: T) -> Result<T> {
    match get(doc, section, key) {
        Some(v) => parse_num(section, key, v),
        None => Ok(default),
    }
}

fn list(doc: &IniDoc, section: &str, key: &str, default: &str) -> Vec<String> {
    let raw = get(doc, section, key).unwrap_or(default);
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Digits,
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DatasetKind::Synth),
            "digits" => Ok(DatasetKind::Digits),
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Digits => "digits",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train: usize,
    pub test: usize,
    /// Synth only; fixed for the other kinds.
    pub classes: usize,
    pub shape: (usize, usize, usize),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.kind {
            DatasetKind::Synth => self.shape,
            DatasetKind::Digits | DatasetKind::Mnist => (1, 28, 28),
            DatasetKind::Cifar10 => (3, 32, 32),
        }
    }

    pub fn class_count(&self) -> usize {
        match self.kind {
            DatasetKind::Synth => self.classes,
            _ => 10,
        }
    }

    fn data_dir() -> Result<PathBuf> {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!(
                    "dataset requires the {DATA_DIR_ENV} environment variable"
                ))
            })
    }

    /// Materialize (train, test) datasets, truncated to the configured
    /// sizes.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.kind {
            DatasetKind::Synth => Ok((
                synth_dataset(self.train, self.classes, self.shape, self.seed)?,
                synth_dataset(
                    self.test,
                    self.classes,
                    self.shape,
                    rng::derive(self.seed, &[0x7e57]),
                )?,
            )),
            DatasetKind::Digits => Ok((
                synth_digits(self.train, self.seed)?,
                synth_digits(self.test, rng::derive(self.seed, &[0x7e57]))?,
            )),
            DatasetKind::Mnist => {
                let dir = Self::data_dir()?;
                let train = load_mnist(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_mnist(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                Ok((train.take(self.train), test.take(self.test)))
            }
            DatasetKind::Cifar10 => {
                let dir = Self::data_dir()?.join("cifar-10-batches-bin");
                let batches: Vec<PathBuf> = (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .collect();
                let train = load_cifar10(&batches)?;
                let test = load_cifar10(&[dir.join("test_batch.bin")])?;
                Ok((train.take(self.train), test.take(self.test)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelArch {
    /// The default two-block CNN with batch norm.
    Cnn,
    /// Flatten + dense head only.
    Dense,
}

impl ModelArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelArch::Cnn),
            "dense" => Ok(ModelArch::Dense),
            other => Err(Error::Config(format!("unknown model arch `{other}`"))),
        }
    }

    pub fn model_config(&self, input: (usize, usize, usize), classes: usize, seed: u64) -> ModelConfig {
        match self {
            ModelArch::Cnn => ModelConfig::default_cnn(input, classes, seed),
            ModelArch::Dense => ModelConfig::new(input, classes, vec![LayerSpec::flatten()], seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    pub arch: ModelArch,
    pub model_seed: u64,
    pub attack: AttackConfig,
    /// Ordered (method, hyperparameter list); `none` carries a single 0.
    pub grid: Vec<(ObfuscationMethod, Vec<f64>)>,
    pub rounds: RoundConfig,
    pub aggregations: Vec<AggregationKind>,
    pub partitions: Vec<PartitionSpec>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            datasets: vec![DatasetSpec {
                kind: DatasetKind::Digits,
                train: 2000,
                test: 1000,
                classes: 4,
                shape: (1, 28, 28),
                seed: 7,
            }],
            arch: ModelArch::Cnn,
            model_seed: 11,
            attack: AttackConfig {
                // desk-scale stopping patience and init; see configs/
                checkpoint_interval: 100,
                init: DummyInit::UniformTo(0.3),
                ..AttackConfig::default()
            },
            grid: vec![(ObfuscationMethod::None, vec![0.0])],
            rounds: RoundConfig::default(),
            aggregations: vec![AggregationKind::Mean],
            partitions: vec![PartitionSpec::iid(5)],
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("out"),
            jobs: 0,
            timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_ini(doc: &IniDoc) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();

        let seeds = list(doc, "experiment", "seeds", "1,2,3,4,5");
        cfg.seeds = seeds
            .iter()
            .map(|s| parse_num("experiment", "seeds", s))
            .collect::<Result<_>>()?;
        cfg.jobs = num_or(doc, "experiment", "jobs", 0)?;
        cfg.timings = match get(doc, "experiment", "timings") {
            Some("true") => true,
            Some("false") | None => false,
            Some(v) => {
                return Err(Error::Config(format!(
                    "[experiment] timings: expected true/false, got `{v}`"
                )))
            }
        };

        let kinds = list(doc, "dataset", "kinds", "digits,synth");
        let train = num_or(doc, "dataset", "train", 2000)?;
        let test = num_or(doc, "dataset", "test", 1000)?;
        let classes = num_or(doc, "dataset", "classes", 4)?;
        let channels = num_or(doc, "dataset", "channels", 1)?;
        let height = num_or(doc, "dataset", "height", 28)?;
        let width = num_or(doc, "dataset", "width", 28)?;
        let dseed = num_or(doc, "dataset", "seed", 7)?;
        cfg.datasets = kinds
            .iter()
            .map(|k| {
                Ok(DatasetSpec {
                    kind: DatasetKind::parse(k)?,
                    train,
                    test,
                    classes,
                    shape: (channels, height, width),
                    seed: dseed,
                })
            })
            .collect::<Result<_>>()?;

        cfg.arch = match get(doc, "model", "arch") {
            Some(a) => ModelArch::parse(a)?,
            None => ModelArch::Cnn,
        };
        cfg.model_seed = num_or(doc, "model", "seed", 11)?;

        cfg.attack = AttackConfig {
            lr: num_or(doc, "attack", "lr", 0.03)?,
            weight_decay: num_or(doc, "attack", "weight_decay", 0.01)?,
            checkpoint_interval: num_or(doc, "attack", "checkpoint_interval", 30)?,
            max_iterations: num_or(doc, "attack", "max_iterations", 3000)?,
            init: match get(doc, "attack", "init_max") {
                Some(v) => DummyInit::UniformTo(parse_num("attack", "init_max", v)?),
                None => DummyInit::Uniform,
            },
            masked_targets: match get(doc, "attack", "masked") {
                Some("drop") | None => MaskedTargets::Drop,
                Some("zero") => MaskedTargets::ZeroFill,
                Some(v) => {
                    return Err(Error::Config(format!(
                        "[attack] masked: expected drop|zero, got `{v}`"
                    )))
                }
            },
            ..AttackConfig::default()
        };

        if let Some(grid_section) = doc.get("grid") {
            let mut grid = Vec::new();
            // fixed method order keeps cell enumeration stable
            for method in ["none", "mask", "noise", "clip", "prune"] {
                if let Some(raw) = grid_section.get(method) {
                    let m = ObfuscationMethod::parse(method)?;
                    if m == ObfuscationMethod::None {
                        grid.push((m, vec![0.0]));
                        continue;
                    }
                    let ps: Vec<f64> = raw
                        .split(',')
                        .map(|s| s.trim())
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_num("grid", method, s))
                        .collect::<Result<_>>()?;
                    if ps.is_empty() {
                        return Err(Error::Config(format!(
                            "[grid] {method}: needs at least one value"
                        )));
                    }
                    grid.push((m, ps));
                }
            }
            if grid.is_empty() {
                return Err(Error::Config("[grid] section is empty".into()));
            }
            cfg.grid = grid;
        }

        cfg.rounds = RoundConfig {
            rounds: num_or(doc, "rounds", "rounds", 25)?,
            epochs: num_or(doc, "rounds", "epochs", 1)?,
            clients: num_or(doc, "rounds", "clients", 10)?,
            batch_size: num_or(doc, "rounds", "batch_size", 32)?,
            optimizer: OptimizerSpec::adam(num_or(doc, "rounds", "lr", 0.001)?),
            seed: num_or(doc, "rounds", "seed", 3)?,
            ..RoundConfig::default()
        };

        cfg.aggregations = list(doc, "aggregation", "kinds", "mean")
            .iter()
            .map(|s| AggregationKind::parse(s))
            .collect::<Result<_>>()?;

        let pseed = num_or(doc, "partition", "seed", 5)?;
        let beta = num_or(doc, "partition", "beta", 0.5)?;
        let min_shard = num_or(doc, "partition", "min_shard", 1)?;
        cfg.partitions = list(doc, "partition", "kinds", "iid")
            .iter()
            .map(|s| {
                let kind = match s.as_str() {
                    "iid" => PartitionKind::Iid,
                    "dirichlet" => PartitionKind::Dirichlet { beta },
                    other => {
                        return Err(Error::Config(format!("unknown partition kind `{other}`")))
                    }
                };
                Ok(PartitionSpec {
                    kind,
                    min_shard,
                    seed: pseed,
                })
            })
            .collect::<Result<_>>()?;

        if let Some(dir) = get(doc, "output", "dir") {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini(&parse_ini(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("obfuscation grid is empty".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("dataset list is empty".into()));
        }
        for (method, ps) in &self.grid {
            for &p in ps {
                ObfuscationSpec {
                    method: *method,
                    p,
                    seed: 0,
                    mask_all: false,
                }
                .validate()?;
            }
        }
        if self.aggregations.is_empty() || self.partitions.is_empty() {
            return Err(Error::Config("aggregation/partition lists are empty".into()));
        }
        self.rounds.validate()?;
        self.attack.validate()?;
        Ok(())
    }

    /// Canonical one-line-per-field rendering; the config hash is FNV-1a64
    /// over this text.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for d in &self.datasets {
            s.push_str(&format!(
                "dataset={} train={} test={} classes={} shape={:?} seed={}\n",
                d.kind.name(),
                d.train,
                d.test,
                d.class_count(),
                d.image_shape(),
                d.seed
            ));
        }
        s.push_str(&format!("arch={:?} model_seed={}\n", self.arch, self.model_seed));
        s.push_str(&format!(
            "attack lr={} wd={} ckpt={} max_iter={} masked={:?} init={:?}\n",
            self.attack.lr,
            self.attack.weight_decay,
            self.attack.checkpoint_interval,
            self.attack.max_iterations,
            self.attack.masked_targets,
            self.attack.init
        ));
        for (m, ps) in &self.grid {
            s.push_str(&format!("grid {}={:?}\n", m.name(), ps));
        }
        s.push_str(&format!(
            "rounds={} epochs={} clients={} batch={} opt={:?} seed={}\n",
            self.rounds.rounds,
            self.rounds.epochs,
            self.rounds.clients,
            self.rounds.batch_size,
            self.rounds.optimizer,
            self.rounds.seed
        ));
        for a in &self.aggregations {
            s.push_str(&format!("agg={}\n", a.name()));
        }
        for p in &self.partitions {
            s.push_str(&format!("partition={} seed={}\n", p.label(), p.seed));
        }
        s.push_str(&format!("seeds={:?}\n", self.seeds));
        s
    }

    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}
