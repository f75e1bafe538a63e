//! Tool settings: defaults, key=value config files, and flag overrides.
//!
//! Precedence is flags over config file over defaults. The config format is
//! one `key=value` per line; blank lines and `#` comments are ignored.

use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Slp,
    Mlp,
    Rnn,
    Cnn,
}

impl ModelChoice {
    pub fn parse(s: &str) -> Result<ModelChoice, CliError> {
        match s {
            "slp" => Ok(ModelChoice::Slp),
            "mlp" => Ok(ModelChoice::Mlp),
            "rnn" => Ok(ModelChoice::Rnn),
            "cnn" => Ok(ModelChoice::Cnn),
            other => Err(CliError::Usage(format!(
                "unknown model {other:?} (expected slp, mlp, rnn or cnn)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Slp => "slp",
            ModelChoice::Mlp => "mlp",
            ModelChoice::Rnn => "rnn",
            ModelChoice::Cnn => "cnn",
        }
    }
}

/// Which split `evaluate` reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Validation,
    Test,
    All,
}

/// Every knob of the tool. Numeric defaults mirror the pipeline this
/// reproduces: 0.1 s segments, decimation by 4, -20 dBFS, lr 0.001,
/// 22 recurrent steps.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub segment_sec: f64,
    pub downsample: usize,
    pub target_dbfs: f64,
    pub model: ModelChoice,
    pub classes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub eval_every: usize,
    pub steps: usize,
    pub slp_hidden: usize,
    pub mlp_hidden: (usize, usize),
    pub log_power: bool,
    pub out: PathBuf,
    pub n_files: usize,
    pub duration: f64,
    pub speech_fraction: f64,
    pub noise_dbfs: f64,
    pub eval_split: EvalSplit,
    pub plot_channel: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            segment_sec: 0.1,
            downsample: 4,
            target_dbfs: -20.0,
            model: ModelChoice::Slp,
            classes: 2,
            epochs: 10,
            batch: 128,
            learning_rate: 0.001,
            dropout: 0.0,
            eval_every: 50,
            steps: 22,
            slp_hidden: 100,
            mlp_hidden: (100, 50),
            log_power: false,
            out: PathBuf::from("out"),
            n_files: 6,
            duration: 30.0,
            speech_fraction: 0.4,
            noise_dbfs: -45.0,
            eval_split: EvalSplit::Test,
            plot_channel: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("cannot parse {key}={value:?}")))
}

impl Settings {
    /// Apply one key=value pair (shared by config files and flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "segment_sec" => self.segment_sec = parse_num(key, value)?,
            "downsample" => self.downsample = parse_num(key, value)?,
            "target_dbfs" => self.target_dbfs = parse_num(key, value)?,
            "model" => self.model = ModelChoice::parse(value)?,
            "classes" => {
                let c: usize = parse_num(key, value)?;
                if c != 2 && c != 4 {
                    return Err(CliError::Usage(format!("classes must be 2 or 4, got {c}")));
                }
                self.classes = c;
            }
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "hidden" => self.slp_hidden = parse_num(key, value)?,
            "mlp_hidden" => {
                let (a, b) = value.split_once(',').ok_or_else(|| {
                    CliError::Usage(format!("mlp_hidden wants two sizes, got {value:?}"))
                })?;
                self.mlp_hidden = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
            }
            "log_power" => {
                self.log_power = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    other => {
                        return Err(CliError::Usage(format!("log_power must be a bool, got {other:?}")))
                    }
                }
            }
            "out" => self.out = PathBuf::from(value),
            "n_files" => self.n_files = parse_num(key, value)?,
            "duration" => self.duration = parse_num(key, value)?,
            "speech_fraction" => self.speech_fraction = parse_num(key, value)?,
            "noise_dbfs" => self.noise_dbfs = parse_num(key, value)?,
            "eval_split" => {
                self.eval_split = match value {
                    "train" => EvalSplit::Train,
                    "validation" | "val" => EvalSplit::Validation,
                    "test" => EvalSplit::Test,
                    "all" => EvalSplit::All,
                    other => {
                        return Err(CliError::Usage(format!("unknown eval_split {other:?}")))
                    }
                }
            }
            "plot_channel" => {
                let c: usize = parse_num(key, value)?;
                if c != 1 && c != 2 {
                    return Err(CliError::Usage(format!("plot_channel must be 1 or 2, got {c}")));
                }
                self.plot_channel = c;
            }
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Load keys from a config file.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    ln + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}
