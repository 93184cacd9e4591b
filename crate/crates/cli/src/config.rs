//! Run configuration.
//!
//! A config file is `key = value` lines under `[section]` headers; `#` and
//! `;` start full-line comments. Relative paths resolve against the directory
//! holding the config file. Unknown sections or keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use finesent::encoder::ModelConfig;
use finesent::objectives::MaskConfig;
use finesent::{FinetuneHyper, PretrainHyper, Scope, Split, Task};
use ini::Ini;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("config {0}: {1}")]
    Syntax(PathBuf, String),
    #[error("config: unknown key {0}")]
    UnknownKey(String),
    #[error("config: {key}: {message}")]
    Invalid { key: String, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(key: &str, message: impl Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Directory holding `train.txt`, `dev.txt`, `test.txt` trees.
    pub corpus_dir: PathBuf,
    /// Sentence exports and the corpus statistics.
    pub prepared_dir: PathBuf,
    pub vocab: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub pretrain_log: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "data/sst".into(),
            prepared_dir: "out/prepared".into(),
            vocab: "out/vocab.txt".into(),
            pretrain_checkpoint: "out/pretrain.sstb".into(),
            pretrain_log: "out/pretrain_loss.csv".into(),
            classifier_checkpoint: "out/classifier.sstb".into(),
            report_dir: "out/reports".into(),
        }
    }
}

/// Where fine-tuning takes its encoder from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneInit {
    Pretrained,
    Random,
}

impl FromStr for FinetuneInit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "random" => Ok(Self::Random),
            other => Err(format!("expected pretrained or random, got {other:?}")),
        }
    }
}

impl Display for FinetuneInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pretrained => "pretrained",
            Self::Random => "random",
        })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub task: Option<Task>,
    pub scopes: Option<Vec<Scope>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    /// Target vocab size for the `vocab` command.
    pub vocab_size: usize,
    pub paths: Paths,
    pub pretrain: PretrainHyper,
    /// Checkpoint to continue pretraining from.
    pub resume_from: Option<PathBuf>,
    pub task: Task,
    pub finetune: FinetuneHyper,
    pub finetune_init: FinetuneInit,
    /// Which nodes of the training trees become examples.
    pub train_scope: Scope,
    /// Use only the first N training sentences.
    pub train_limit: Option<usize>,
    pub eval_split: Split,
    pub scopes: Vec<Scope>,
    base_dir: PathBuf,
}

/// Tracks which keys were read so leftovers can be reported.
struct Table<'a> {
    ini: &'a Ini,
    used: BTreeSet<(Option<String>, String)>,
}

impl Table<'_> {
    fn raw(&mut self, section: &str, key: &str) -> Option<&str> {
        let v = self.ini.get_from(Some(section), key)?;
        self.used
            .insert((Some(section.to_string()), key.to_string()));
        Some(v.trim())
    }

    fn get<T>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| invalid(&format!("{section}.{key}"), e)),
        }
    }

    fn leftovers(&self) -> Result<()> {
        for (section, props) in self.ini.iter() {
            for (key, _) in props.iter() {
                if !self
                    .used
                    .contains(&(section.map(str::to_string), key.to_string()))
                {
                    let full = match section {
                        Some(s) => format!("{s}.{key}"),
                        None => key.to_string(),
                    };
                    return Err(ConfigError::UnknownKey(full));
                }
            }
        }
        Ok(())
    }
}

fn parse_scopes(s: &str) -> std::result::Result<Vec<Scope>, String> {
    let scopes: Vec<Scope> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()?;
    if scopes.is_empty() {
        return Err("at least one scope required".into());
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = scopes.iter().find(|s| !seen.insert(**s)) {
        return Err(format!("scope {dup} listed twice"));
    }
    Ok(scopes)
}

/// Parses a comma-separated scope list such as `all,root`.
pub fn scope_list(s: &str) -> std::result::Result<Vec<Scope>, String> {
    parse_scopes(s)
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, base, overrides).map_err(|e| match e {
            ConfigError::Syntax(_, m) => ConfigError::Syntax(path.to_path_buf(), m),
            other => other,
        })
    }

    /// Parses config text; relative paths will resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: PathBuf, overrides: &Overrides) -> Result<Self> {
        let ini = Ini::load_from_str(text)
            .map_err(|e| ConfigError::Syntax(PathBuf::new(), e.to_string()))?;
        let mut t = Table {
            ini: &ini,
            used: BTreeSet::new(),
        };
        let d = Paths::default();
        let paths = Paths {
            corpus_dir: t.get("paths", "corpus_dir", d.corpus_dir)?,
            prepared_dir: t.get("paths", "prepared_dir", d.prepared_dir)?,
            vocab: t.get("paths", "vocab", d.vocab)?,
            pretrain_checkpoint: t.get("paths", "pretrain_checkpoint", d.pretrain_checkpoint)?,
            pretrain_log: t.get("paths", "pretrain_log", d.pretrain_log)?,
            classifier_checkpoint: t.get(
                "paths",
                "classifier_checkpoint",
                d.classifier_checkpoint,
            )?,
            report_dir: t.get("paths", "report_dir", d.report_dir)?,
        };
        let file_seed = t.get("run", "seed", 0u64)?;
        let seed = overrides.seed.unwrap_or(file_seed);
        let file_preset: String = t.get("model", "preset", "toy".to_string())?;
        let preset = overrides.preset.clone().unwrap_or(file_preset);
        let vocab_size = t.get("model", "vocab_size", 2000usize)?;

        let pd = PretrainHyper::default();
        let md = MaskConfig::default();
        let pretrain = PretrainHyper {
            epochs: t.get("pretrain", "epochs", pd.epochs)?,
            batch_size: t.get("pretrain", "batch_size", pd.batch_size)?,
            lr: t.get("pretrain", "lr", pd.lr)?,
            warmup_frac: t.get("pretrain", "warmup_frac", pd.warmup_frac)?,
            weight_decay: t.get("pretrain", "weight_decay", pd.weight_decay)?,
            max_len: t.get("pretrain", "max_len", pd.max_len)?,
            p_next: t.get("pretrain", "p_next", pd.p_next)?,
            mask: MaskConfig {
                rate: t.get("pretrain", "mask_rate", md.rate)?,
                mask_frac: t.get("pretrain", "mask_frac", md.mask_frac)?,
                random_frac: t.get("pretrain", "random_frac", md.random_frac)?,
                whole_word: t.get("pretrain", "whole_word", md.whole_word)?,
            },
            seed,
        };
        let resume_from = t
            .raw("pretrain", "resume_from")
            .filter(|s| !s.is_empty())
            .map(PathBuf::from);

        let file_task: Task = t.get("finetune", "task", Task::Sst5)?;
        let task = overrides.task.unwrap_or(file_task);
        let freeze: bool = t.get("finetune", "freeze_encoder", false)?;
        let fd = FinetuneHyper::new(freeze);
        let finetune = FinetuneHyper {
            epochs: t.get("finetune", "epochs", fd.epochs)?,
            batch_size: t.get("finetune", "batch_size", fd.batch_size)?,
            lr: t.get("finetune", "lr", fd.lr)?,
            warmup_frac: t.get("finetune", "warmup_frac", fd.warmup_frac)?,
            weight_decay: t.get("finetune", "weight_decay", fd.weight_decay)?,
            max_len: t.get("finetune", "max_len", fd.max_len)?,
            dropout_p: t.get("finetune", "dropout", fd.dropout_p)?,
            freeze_encoder: freeze,
            seed,
        };
        let finetune_init = t.get("finetune", "init", FinetuneInit::Pretrained)?;
        let train_scope = t.get("finetune", "train_scope", Scope::All)?;
        let train_limit = match t.raw("finetune", "train_limit") {
            None | Some("") | Some("none") => None,
            Some(v) => Some(
                v.parse::<usize>()
                    .map_err(|e| invalid("finetune.train_limit", e))?,
            ),
        };

        let eval_split = t.get("eval", "split", Split::Test)?;
        let file_scopes = match t.raw("eval", "scopes") {
            None => vec![Scope::All, Scope::Root],
            Some(v) => parse_scopes(v).map_err(|e| invalid("eval.scopes", e))?,
        };
        let scopes = overrides.scopes.clone().unwrap_or(file_scopes);
        t.leftovers()?;

        let cfg = Self {
            seed,
            preset,
            vocab_size,
            paths,
            pretrain,
            resume_from,
            task,
            finetune,
            finetune_init,
            train_scope,
            train_limit,
            eval_split,
            scopes,
            base_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model shape for the preset, before the vocab size is known.
    pub fn model(&self) -> ModelConfig {
        ModelConfig::preset(&self.preset)
            .expect("preset validated")
            .with_vocab_size(self.vocab_size)
    }

    fn validate(&self) -> Result<()> {
        let model = ModelConfig::preset(&self.preset).map_err(|e| invalid("model.preset", e))?;
        if self.vocab_size < finesent::tokenizer::SPECIALS.len() + 1 {
            return Err(invalid(
                "model.vocab_size",
                "must exceed the special-token count",
            ));
        }
        let model = model.with_vocab_size(self.vocab_size);
        self.pretrain
            .validate(&model)
            .map_err(|e| invalid("pretrain", e))?;
        self.finetune
            .validate(&model)
            .map_err(|e| invalid("finetune", e))?;
        if self.train_limit == Some(0) {
            return Err(invalid("finetune.train_limit", "must be positive"));
        }
        Ok(())
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Evaluation cells: the configured task crossed with each scope.
    pub fn cells(&self) -> Vec<(Task, Scope)> {
        self.scopes.iter().map(|&s| (self.task, s)).collect()
    }

    /// Fully resolved config in the file format, every key spelled out.
    pub fn to_ini_string(&self) -> String {
        let p = |x: &Path| x.display().to_string();
        let mut ini = Ini::new();
        ini.with_section(Some("run"))
            .set("seed", self.seed.to_string());
        ini.with_section(Some("paths"))
            .set("corpus_dir", p(&self.paths.corpus_dir))
            .set("prepared_dir", p(&self.paths.prepared_dir))
            .set("vocab", p(&self.paths.vocab))
            .set("pretrain_checkpoint", p(&self.paths.pretrain_checkpoint))
            .set("pretrain_log", p(&self.paths.pretrain_log))
            .set(
                "classifier_checkpoint",
                p(&self.paths.classifier_checkpoint),
            )
            .set("report_dir", p(&self.paths.report_dir));
        ini.with_section(Some("model"))
            .set("preset", self.preset.clone())
            .set("vocab_size", self.vocab_size.to_string());
        let h = &self.pretrain;
        ini.with_section(Some("pretrain"))
            .set("epochs", h.epochs.to_string())
            .set("batch_size", h.batch_size.to_string())
            .set("lr", h.lr.to_string())
            .set("warmup_frac", h.warmup_frac.to_string())
            .set("weight_decay", h.weight_decay.to_string())
            .set("max_len", h.max_len.to_string())
            .set("p_next", h.p_next.to_string())
            .set("mask_rate", h.mask.rate.to_string())
            .set("mask_frac", h.mask.mask_frac.to_string())
            .set("random_frac", h.mask.random_frac.to_string())
            .set("whole_word", h.mask.whole_word.to_string())
            .set(
                "resume_from",
                self.resume_from.as_deref().map(p).unwrap_or_default(),
            );
        let f = &self.finetune;
        ini.with_section(Some("finetune"))
            .set("task", self.task.to_string())
            .set("init", self.finetune_init.to_string())
            .set("epochs", f.epochs.to_string())
            .set("batch_size", f.batch_size.to_string())
            .set("lr", f.lr.to_string())
            .set("warmup_frac", f.warmup_frac.to_string())
            .set("weight_decay", f.weight_decay.to_string())
            .set("max_len", f.max_len.to_string())
            .set("dropout", f.dropout_p.to_string())
            .set("freeze_encoder", f.freeze_encoder.to_string())
            .set("train_scope", self.train_scope.to_string())
            .set(
                "train_limit",
                self.train_limit
                    .map_or_else(|| "none".to_string(), |n| n.to_string()),
            );
        let scopes: Vec<&str> = self.scopes.iter().map(|s| s.name()).collect();
        ini.with_section(Some("eval"))
            .set("split", self.eval_split.name())
            .set("scopes", scopes.join(","));
        let mut out = Vec::new();
        ini.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ini output is UTF-8")
    }
}
