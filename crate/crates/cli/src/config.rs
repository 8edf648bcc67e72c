//! Configuration merging: defaults, then an optional JSON config file,
//! then command-line flags. Every effective value remembers where it came
//! from, and `--print-config` dumps a file that reproduces the run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::ValueEnum;
use salm_core::corpus::{Level, Mode};
use salm_core::eval::Variant;
use salm_core::oracle::EnumerationBudget;
use salm_core::synsir::{Kernel, ResamplePolicy, SynsirConfig};
use salm_core::train::TrainConfig;
use salm_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Char,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Salm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Prior,
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResampleArg {
    EveryWord,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    /// Direct for plain models, the particle filter for tag-prefixed ones.
    Auto,
    Direct,
    Synsir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Human,
}

impl From<LevelArg> for Level {
    fn from(v: LevelArg) -> Level {
        match v {
            LevelArg::Char => Level::Char,
            LevelArg::Word => Level::Word,
        }
    }
}

impl From<ModeArg> for Mode {
    fn from(v: ModeArg) -> Mode {
        match v {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Salm => Mode::Salm,
        }
    }
}

impl From<KernelArg> for Kernel {
    fn from(v: KernelArg) -> Kernel {
        match v {
            KernelArg::Prior => Kernel::Prior,
            KernelArg::Optimal => Kernel::Optimal,
        }
    }
}

/// Knobs shared by every subcommand. All optional: an unset knob falls
/// back to the config file, then to the built-in default.
#[derive(Debug, Clone, clap::Args)]
pub struct Knobs {
    /// JSON config file; flags override its values
    #[arg(long, env = "SALM_CONFIG", value_name = "PATH", global = false)]
    pub config: Option<PathBuf>,

    /// Print the merged configuration (with per-key sources) and exit
    #[arg(long)]
    pub print_config: bool,

    /// Symbol granularity of the model
    #[arg(long, value_enum)]
    pub level: Option<LevelArg>,

    /// Whether sequences carry tag-prefix symbols
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,

    /// Keep only this many most-frequent words (word level only)
    #[arg(long)]
    pub word_cap: Option<usize>,

    /// Validation sentences held out from the corpus tail
    #[arg(long)]
    pub val: Option<usize>,

    /// Test sentences held out after the validation slice
    #[arg(long)]
    pub test: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Truncated-backprop block length; 0 picks the per-variant reference
    #[arg(long)]
    pub block_len: Option<usize>,

    /// Initial SGD learning rate
    #[arg(long)]
    pub lr: Option<f64>,

    /// Learning-rate divisor applied when validation stops improving
    #[arg(long)]
    pub anneal_divisor: Option<f64>,

    /// Global gradient-norm clip; 0 disables clipping
    #[arg(long)]
    pub clip_norm: Option<f64>,

    /// Dropout probability on embeddings and pre-softmax states
    #[arg(long)]
    pub dropout: Option<f64>,

    /// Hidden width of each LSTM layer
    #[arg(long)]
    pub n_h: Option<usize>,

    /// Embedding width; 0 matches the hidden width
    #[arg(long)]
    pub n_e: Option<usize>,

    /// Seed for everything random: init, dropout, particle draws
    #[arg(long)]
    pub seed: Option<u64>,

    /// Particle count for filter-based scoring
    #[arg(long)]
    pub m: Option<usize>,

    /// Tag proposal distribution
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,

    /// When to resample the particle population
    #[arg(long, value_enum)]
    pub resample: Option<ResampleArg>,

    /// Low-weight cutoff for the threshold resample policy
    #[arg(long)]
    pub gamma: Option<f64>,

    /// How many low-weight particles trigger a threshold resample
    #[arg(long)]
    pub n_thresh: Option<usize>,

    /// Probability estimator for scoring plain text
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,

    /// Report rendering on standard out
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,

    /// Sampling temperature; 0 picks the argmax symbol
    #[arg(long)]
    pub temperature: Option<f64>,

    /// Generation length cap, counted in model symbols
    #[arg(long)]
    pub max_symbols: Option<usize>,

    /// Exact-enumeration cap on sentence length in words
    #[arg(long)]
    pub budget_words: Option<usize>,

    /// Exact-enumeration cap on tagset size
    #[arg(long)]
    pub budget_tagset: Option<usize>,

    /// Training-set sizes for the sweep grid, comma separated
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,

    /// Model variants for the sweep grid, comma separated
    /// (e.g. char-baseline,char-salm)
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

/// The config-file shape: every knob, optional. Unknown keys are ignored,
/// which lets `--print-config` dumps (carrying `_sources`) feed back in.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(default)]
pub struct FileConfig {
    corpus: Option<PathBuf>,
    level: Option<String>,
    mode: Option<String>,
    word_cap: Option<usize>,
    val: Option<usize>,
    test: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    block_len: Option<usize>,
    lr: Option<f64>,
    anneal_divisor: Option<f64>,
    clip_norm: Option<f64>,
    dropout: Option<f64>,
    n_h: Option<usize>,
    n_e: Option<usize>,
    seed: Option<u64>,
    m: Option<usize>,
    kernel: Option<String>,
    resample: Option<String>,
    gamma: Option<f64>,
    n_thresh: Option<usize>,
    estimator: Option<String>,
    format: Option<String>,
    temperature: Option<f64>,
    max_symbols: Option<usize>,
    budget_words: Option<usize>,
    budget_tagset: Option<usize>,
    n_list: Option<Vec<usize>>,
    variants: Option<Vec<String>>,
}

fn load_file(path: &PathBuf) -> Result<FileConfig> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&body).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("config file {}: {e}", path.display()),
    })
}

/// A file-config enum value, parsed case-insensitively with `_`/`-`
/// treated alike so dumps and hand-written files both load.
fn file_enum<T: ValueEnum>(raw: &Option<String>, key: &str) -> Result<Option<T>> {
    raw.as_ref()
        .map(|s| {
            T::from_str(&s.replace('_', "-"), true).map_err(|_| {
                Error::InvalidConfig(format!("config key {key}: unknown value {s:?}"))
            })
        })
        .transpose()
}

fn enum_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().replace('-', "_")
}

/// Merged view of every knob, with a per-key source record.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub corpus: Option<PathBuf>,
    pub level: Level,
    pub mode: Mode,
    pub word_cap: usize,
    pub val: usize,
    pub test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub block_len: usize,
    pub lr: f64,
    pub anneal_divisor: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub n_h: usize,
    pub n_e: usize,
    pub seed: u64,
    pub m: usize,
    pub kernel: KernelArg,
    pub resample: ResampleArg,
    pub gamma: f64,
    pub n_thresh: usize,
    pub estimator: EstimatorArg,
    pub format: FormatArg,
    pub temperature: f64,
    pub max_symbols: usize,
    pub budget_words: usize,
    pub budget_tagset: usize,
    pub n_list: Vec<usize>,
    pub variants: Vec<Variant>,
    pub sources: BTreeMap<&'static str, &'static str>,
}

fn pick<T>(
    sources: &mut BTreeMap<&'static str, &'static str>,
    key: &'static str,
    flag: Option<T>,
    file: Option<T>,
    default: T,
) -> T {
    if let Some(v) = flag {
        sources.insert(key, "flag");
        v
    } else if let Some(v) = file {
        sources.insert(key, "file");
        v
    } else {
        sources.insert(key, "default");
        default
    }
}

impl CliConfig {
    /// Merge flag values over the config file over defaults. `corpus_arg`
    /// is the positional corpus path, which counts as a flag.
    pub fn merge(knobs: &Knobs, corpus_arg: Option<PathBuf>) -> Result<CliConfig> {
        let file = match &knobs.config {
            Some(path) => load_file(path)?,
            None => FileConfig::default(),
        };
        let mut src = BTreeMap::new();

        let level: LevelArg = pick(&mut src, "level", knobs.level, file_enum(&file.level, "level")?, LevelArg::Char);
        let mode: ModeArg = pick(&mut src, "mode", knobs.mode, file_enum(&file.mode, "mode")?, ModeArg::Salm);
        let n_h = pick(&mut src, "n_h", knobs.n_h, file.n_h, 256);
        let n_e_raw = pick(&mut src, "n_e", knobs.n_e, file.n_e, 0);
        let m = pick(&mut src, "m", knobs.m, file.m, 1000);

        let variant_names = pick(
            &mut src,
            "variants",
            knobs.variants.clone(),
            file.variants.clone(),
            Variant::ALL.iter().map(|v| v.to_string()).collect(),
        );
        let variants = variant_names
            .into_iter()
            .map(Variant::try_from)
            .collect::<Result<Vec<_>>>()?;

        // an empty path is the "unset" default; nonempty() restores Option-ness
        let config = CliConfig {
            corpus: nonempty(pick(&mut src, "corpus", corpus_arg, file.corpus.clone(), PathBuf::new())),
            level: level.into(),
            mode: mode.into(),
            word_cap: pick(&mut src, "word_cap", knobs.word_cap, file.word_cap, 10_000),
            val: pick(&mut src, "val", knobs.val, file.val, 50),
            test: pick(&mut src, "test", knobs.test, file.test, 50),
            epochs: pick(&mut src, "epochs", knobs.epochs, file.epochs, 40),
            batch_size: pick(&mut src, "batch_size", knobs.batch_size, file.batch_size, 20),
            block_len: pick(&mut src, "block_len", knobs.block_len, file.block_len, 0),
            lr: pick(&mut src, "lr", knobs.lr, file.lr, 1.0),
            anneal_divisor: pick(&mut src, "anneal_divisor", knobs.anneal_divisor, file.anneal_divisor, 4.0),
            clip_norm: pick(&mut src, "clip_norm", knobs.clip_norm, file.clip_norm, 5.0),
            dropout: pick(&mut src, "dropout", knobs.dropout, file.dropout, 0.2),
            n_h,
            n_e: if n_e_raw == 0 { n_h } else { n_e_raw },
            seed: pick(&mut src, "seed", knobs.seed, file.seed, 42),
            m,
            kernel: pick(&mut src, "kernel", knobs.kernel, file_enum(&file.kernel, "kernel")?, KernelArg::Prior),
            resample: pick(
                &mut src,
                "resample",
                knobs.resample,
                file_enum(&file.resample, "resample")?,
                ResampleArg::EveryWord,
            ),
            gamma: pick(&mut src, "gamma", knobs.gamma, file.gamma, 0.1),
            n_thresh: pick(&mut src, "n_thresh", knobs.n_thresh, file.n_thresh, 1),
            estimator: pick(
                &mut src,
                "estimator",
                knobs.estimator,
                file_enum(&file.estimator, "estimator")?,
                EstimatorArg::Auto,
            ),
            format: pick(&mut src, "format", knobs.format, file_enum(&file.format, "format")?, FormatArg::Json),
            temperature: pick(&mut src, "temperature", knobs.temperature, file.temperature, 1.0),
            max_symbols: pick(&mut src, "max_symbols", knobs.max_symbols, file.max_symbols, 200),
            budget_words: pick(&mut src, "budget_words", knobs.budget_words, file.budget_words, 8),
            budget_tagset: pick(&mut src, "budget_tagset", knobs.budget_tagset, file.budget_tagset, 5),
            n_list: pick(&mut src, "n_list", knobs.n_list.clone(), file.n_list.clone(), vec![500, 1000, 2000]),
            variants,
            sources: src,
        };
        Ok(config)
    }

    /// Training knobs as the library's config. `block_len` 0 resolves to
    /// the reference length for this level and mode.
    pub fn train_config(&self, checkpoint: Option<PathBuf>) -> TrainConfig {
        let block_len = if self.block_len == 0 {
            TrainConfig::reference_block_len(self.level, self.mode)
        } else {
            self.block_len
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            block_len,
            lr_init: self.lr,
            anneal_divisor: self.anneal_divisor,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            p_d: self.dropout,
            n_h: self.n_h,
            n_e: self.n_e,
            seed: self.seed,
            checkpoint,
        }
    }

    /// Training knobs with the sweep's block-length sentinel preserved:
    /// 0 stays 0 so each grid cell resolves its own reference length.
    pub fn sweep_train_config(&self) -> TrainConfig {
        TrainConfig { block_len: self.block_len, ..self.train_config(None) }
    }

    pub fn synsir_config(&self) -> SynsirConfig {
        let resample = match self.resample {
            ResampleArg::EveryWord => ResamplePolicy::EveryWord,
            ResampleArg::Threshold => ResamplePolicy::Threshold { gamma: self.gamma, n_thresh: self.n_thresh },
        };
        SynsirConfig { m: self.m, kernel: self.kernel.into(), resample, seed: self.seed }
    }

    pub fn enumeration_budget(&self) -> EnumerationBudget {
        EnumerationBudget { max_tagset: self.budget_tagset, max_words: self.budget_words }
    }

    /// The merged view as JSON. All keys load back as a config file; the
    /// extra `_sources` map records where each value came from.
    pub fn dump(&self) -> serde_json::Value {
        serde_json::json!({
            "corpus": self.corpus,
            "level": self.level.to_string(),
            "mode": self.mode.to_string(),
            "word_cap": self.word_cap,
            "val": self.val,
            "test": self.test,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "block_len": self.block_len,
            "lr": self.lr,
            "anneal_divisor": self.anneal_divisor,
            "clip_norm": self.clip_norm,
            "dropout": self.dropout,
            "n_h": self.n_h,
            "n_e": self.n_e,
            "seed": self.seed,
            "m": self.m,
            "kernel": enum_name(self.kernel),
            "resample": enum_name(self.resample),
            "gamma": self.gamma,
            "n_thresh": self.n_thresh,
            "estimator": enum_name(self.estimator),
            "format": enum_name(self.format),
            "temperature": self.temperature,
            "max_symbols": self.max_symbols,
            "budget_words": self.budget_words,
            "budget_tagset": self.budget_tagset,
            "n_list": self.n_list,
            "variants": self.variants.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            "_sources": self.sources,
        })
    }

    /// The corpus path, which must have come from the positional argument
    /// or the config file by now.
    pub fn corpus_required(&self) -> Result<&PathBuf> {
        self.corpus
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no corpus given (positional argument or config key)".into()))
    }
}

fn nonempty(p: PathBuf) -> Option<PathBuf> {
    (!p.as_os_str().is_empty()).then_some(p)
}
