//! Flat key=value run configuration. Defaults < config file < environment
//! (`MW_<KEY>` with dots as underscores) < command-line flags. Unknown keys
//! are rejected; the resolved config is written verbatim into run
//! directories so every artifact is reproducible from (config, seed).

use std::path::{Path, PathBuf};

use crate::data::{Style, WorldSpec};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::meta::MetaConfig;
use crate::metrics::SWEEP_GRID;
use crate::stream::AdaptConfig;
use crate::weighting::WeightModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub data_entities: usize,
    pub data_word_relations: usize,
    pub data_num_relations: usize,
    pub data_value_words: usize,
    pub data_fillers: usize,
    pub data_numerals: usize,
    pub data_drift_frac: f64,
    pub data_times: usize,
    pub data_style: Style,
    pub data_docs: usize,
    pub data_locality_docs: usize,
    // base / proxy language model
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_width: usize,
    pub lm_ff_width: usize,
    pub lm_context: usize,
    pub lm_dropout: f64,
    // weighting model
    pub wm_head_hidden: usize,
    // base-model preparation
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub qa_epochs: usize,
    pub qa_lr: f64,
    // meta-training
    pub meta_alpha: f64,
    pub meta_c_loc: f64,
    pub meta_c_reset: usize,
    pub meta_k: usize,
    pub meta_outer_lr: f64,
    pub meta_accum: usize,
    pub meta_micro: usize,
    pub meta_episodes: usize,
    // test-time adaptation
    pub adapt_lr: f64,
    pub adapt_steps_per_doc: usize,
    pub adapt_checkpoint_every: usize,
    pub adapt_persist_adam: bool,
    pub adapt_qa_tune_after: bool,
    /// uniform | tfidf | salient | learned | pos_mean | pos_resample | bimodal
    pub adapt_weighter: String,
    // sweep / evaluation
    pub sweep_grid: Vec<f64>,
    pub eval_max_answer_len: usize,
    pub eval_seeds: usize,
    // run plumbing
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            data_entities: 30,
            data_word_relations: 3,
            data_num_relations: 3,
            data_value_words: 40,
            data_fillers: 60,
            data_numerals: 40,
            data_drift_frac: 0.25,
            data_times: 1000,
            data_style: Style::A,
            data_docs: 400,
            data_locality_docs: 40,
            lm_layers: 2,
            lm_heads: 4,
            lm_width: 64,
            lm_ff_width: 256,
            lm_context: 256,
            lm_dropout: 0.0,
            wm_head_hidden: 128,
            pretrain_epochs: 3,
            pretrain_lr: 1e-3,
            qa_epochs: 3,
            qa_lr: 1e-3,
            meta_alpha: 5e-4,
            meta_c_loc: 0.1,
            meta_c_reset: 4,
            meta_k: 6,
            meta_outer_lr: 1e-5,
            meta_accum: 24,
            meta_micro: 6,
            meta_episodes: 300,
            adapt_lr: 2.5e-5,
            adapt_steps_per_doc: 1,
            adapt_checkpoint_every: 200,
            adapt_persist_adam: true,
            adapt_qa_tune_after: false,
            adapt_weighter: "learned".to_string(),
            sweep_grid: SWEEP_GRID.to_vec(),
            eval_max_answer_len: 8,
            eval_seeds: 4,
            seed: 0,
            out: PathBuf::from("runs/default"),
            jobs: 0,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        const KEY_LIST: &[&str] = &[$($key),+];

        impl RunConfig {
            /// Apply one key=value assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { self.$field = parse_value!($kind, key, value)?; Ok(()) })+
                    _ => Err(Error::invalid(format!("unknown config key `{key}`"))),
                }
            }

            /// The resolved config in the same flat format it is parsed from.
            pub fn to_kv_string(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", $key, format_value!($kind, &self.$field)));)+
                s
            }
        }
    };
}

macro_rules! parse_value {
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>().map_err(|_| Error::invalid(format!("{}: expected an integer, got `{}`", $key, $v)))
    };
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>().map_err(|_| Error::invalid(format!("{}: expected an integer, got `{}`", $key, $v)))
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>().map_err(|_| Error::invalid(format!("{}: expected a number, got `{}`", $key, $v)))
    };
    (bool, $key:expr, $v:expr) => {
        match $v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(Error::invalid(format!("{}: expected true|false, got `{}`", $key, $v))),
        }
    };
    (style, $key:expr, $v:expr) => {
        Style::parse($v)
    };
    (path, $key:expr, $v:expr) => {
        Ok::<PathBuf, Error>(PathBuf::from($v))
    };
    (string, $key:expr, $v:expr) => {
        Ok::<String, Error>($v.to_string())
    };
    (grid, $key:expr, $v:expr) => {
        $v.split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: bad grid entry `{}`", $key, x)))
            })
            .collect::<Result<Vec<f64>>>()
    };
}

macro_rules! format_value {
    (style, $v:expr) => { $v.to_string() };
    (path, $v:expr) => { $v.display().to_string() };
    (grid, $v:expr) => {
        $v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    };
    ($other:ident, $v:expr) => { $v.to_string() };
}

keys! {
    "data.entities" => data_entities: usize,
    "data.word_relations" => data_word_relations: usize,
    "data.num_relations" => data_num_relations: usize,
    "data.value_words" => data_value_words: usize,
    "data.fillers" => data_fillers: usize,
    "data.numerals" => data_numerals: usize,
    "data.drift_frac" => data_drift_frac: f64,
    "data.times" => data_times: usize,
    "data.style" => data_style: style,
    "data.docs" => data_docs: usize,
    "data.locality_docs" => data_locality_docs: usize,
    "lm.layers" => lm_layers: usize,
    "lm.heads" => lm_heads: usize,
    "lm.width" => lm_width: usize,
    "lm.ff_width" => lm_ff_width: usize,
    "lm.context" => lm_context: usize,
    "lm.dropout" => lm_dropout: f64,
    "wm.head_hidden" => wm_head_hidden: usize,
    "pretrain.epochs" => pretrain_epochs: usize,
    "pretrain.lr" => pretrain_lr: f64,
    "qa.epochs" => qa_epochs: usize,
    "qa.lr" => qa_lr: f64,
    "meta.alpha" => meta_alpha: f64,
    "meta.c_loc" => meta_c_loc: f64,
    "meta.c_reset" => meta_c_reset: usize,
    "meta.k" => meta_k: usize,
    "meta.outer_lr" => meta_outer_lr: f64,
    "meta.accum" => meta_accum: usize,
    "meta.micro" => meta_micro: usize,
    "meta.episodes" => meta_episodes: usize,
    "adapt.lr" => adapt_lr: f64,
    "adapt.steps_per_doc" => adapt_steps_per_doc: usize,
    "adapt.checkpoint_every" => adapt_checkpoint_every: usize,
    "adapt.persist_adam" => adapt_persist_adam: bool,
    "adapt.qa_tune_after" => adapt_qa_tune_after: bool,
    "adapt.weighter" => adapt_weighter: string,
    "sweep.grid" => sweep_grid: grid,
    "eval.max_answer_len" => eval_max_answer_len: usize,
    "eval.seeds" => eval_seeds: usize,
    "seed" => seed: u64,
    "out" => out: path,
    "jobs" => jobs: usize,
}

impl RunConfig {
    /// Parse the flat `key = value` format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Environment variable for a key: `MW_` + uppercase with `.` → `_`.
    pub fn env_var_for(key: &str) -> String {
        format!("MW_{}", key.to_uppercase().replace('.', "_"))
    }

    pub fn apply_env(&mut self) -> Result<()> {
        for key in KEY_LIST {
            if let Ok(v) = std::env::var(Self::env_var_for(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        KEY_LIST
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            n_entities: self.data_entities,
            n_word_relations: self.data_word_relations,
            n_num_relations: self.data_num_relations,
            n_value_words: self.data_value_words,
            n_fillers: self.data_fillers,
            n_numerals: self.data_numerals,
            drift_frac: self.data_drift_frac,
            n_times: self.data_times,
            seed: self.seed,
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            layers: self.lm_layers,
            heads: self.lm_heads,
            width: self.lm_width,
            ff_width: self.lm_ff_width,
            context: self.lm_context,
            vocab_size,
            dropout: self.lm_dropout,
            init_seed: self.seed ^ 0xb45e,
        }
    }

    pub fn wm_config(&self, vocab_size: usize) -> WeightModelConfig {
        WeightModelConfig {
            trunk: LmConfig {
                init_seed: self.seed ^ 0x3a9f,
                ..self.lm_config(vocab_size)
            },
            head_hidden: self.wm_head_hidden,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            alpha: self.meta_alpha,
            c_loc: self.meta_c_loc,
            c_reset: self.meta_c_reset,
            k: self.meta_k,
            outer_lr: self.meta_outer_lr,
            accum_examples: self.meta_accum,
            micro_batch: self.meta_micro,
            episodes: self.meta_episodes,
            seed: self.seed ^ 0x8d2c,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            lr: self.adapt_lr,
            steps_per_doc: self.adapt_steps_per_doc,
            checkpoint_every: self.adapt_checkpoint_every,
            persist_adam: self.adapt_persist_adam,
            qa_tune_after: self.adapt_qa_tune_after,
            seed: self.seed ^ 0x51ab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world_spec().validate()?;
        self.lm_config(16).validate()?;
        self.wm_config(16).validate()?;
        self.meta_config().validate()?;
        self.adapt_config().validate()?;
        if self.data_docs == 0 || self.data_locality_docs == 0 {
            return Err(Error::invalid("data.docs and data.locality_docs must be at least 1"));
        }
        if self.sweep_grid.is_empty() {
            return Err(Error::invalid("sweep.grid must be nonempty"));
        }
        if self.eval_max_answer_len == 0 {
            return Err(Error::invalid("eval.max_answer_len must be at least 1"));
        }
        if self.eval_seeds == 0 {
            return Err(Error::invalid("eval.seeds must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_kv_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parses_assignments_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\nmeta.alpha = 0.001\ndata.style = b  # inline\nsweep.grid = 1e-4, 1e-5\n",
        )
        .unwrap();
        assert_eq!(cfg.meta_alpha, 1e-3);
        assert_eq!(cfg.data_style, Style::B);
        assert_eq!(cfg.sweep_grid, vec![1e-4, 1e-5]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("nonsense.key = 1\n").is_err());
        assert!(RunConfig::parse("meta.alpha = fast\n").is_err());
        assert!(RunConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn env_override_naming() {
        assert_eq!(RunConfig::env_var_for("meta.alpha"), "MW_META_ALPHA");
        assert_eq!(RunConfig::env_var_for("seed"), "MW_SEED");
    }

    #[test]
    fn env_overrides_apply() {
        let key = "MW_DATA_ENTITIES";
        std::env::set_var(key, "7");
        let mut cfg = RunConfig::default();
        cfg.apply_env().unwrap();
        std::env::remove_var(key);
        assert_eq!(cfg.data_entities, 7);
    }
}
