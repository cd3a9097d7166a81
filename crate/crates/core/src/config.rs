//! Flat `key = value` run configuration with two presets.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::synth::GrammarConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

pub struct KeySpec {
    pub key: &'static str,
    pub paper: &'static str,
    pub desk: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($( $key:literal : $paper:literal , $desk:literal , $help:literal ;)*) => {
        pub const KEYS: &[KeySpec] = &[ $( KeySpec { key: $key, paper: $paper, desk: $desk, help: $help }, )* ];
    };
}

keys! {
    "seed": "1", "1", "seed for initialization, shuffling, dropout and sampling";
    "d_model": "512", "64", "encoder feature depth D (also the decoder hidden size)";
    "cnn_maps": "64,128,256,256,512,512", "8,16,32,32,64,64", "feature maps of the six convolutions";
    "pe_max_timescale": "10000", "10000", "largest positional-encoding timescale";
    "bn_momentum": "0.1", "0.1", "batch-norm running-average momentum";
    "bn_eps": "1e-5", "1e-5", "batch-norm epsilon";
    "embed_dim": "32", "16", "token embedding size";
    "decoder_layers": "2", "2", "stacked LSTM layers";
    "dropout": "0.4", "0.1", "dropout rate on embeddings and attentional vectors";
    "standard_cell_output": "false", "false", "use h = o*tanh(c) instead of h = o*c";
    "query_current": "false", "false", "attend with h_t instead of h_(t-1)";
    "phase": "mle", "mle", "training phase: mle | rl";
    "lr_mle": "0.1", "0.002", "Adam learning rate, token-level phase";
    "lr_rl": "0.00005", "0.0005", "Adam learning rate, sequence-level phase";
    "adam_beta1": "0.9", "0.9", "Adam beta1";
    "adam_beta2": "0.999", "0.999", "Adam beta2";
    "adam_eps": "1e-8", "1e-8", "Adam epsilon";
    "batch_size": "16", "16", "examples per step";
    "clip_norm": "5", "5", "global gradient-norm clip (0 disables)";
    "max_steps": "0", "2000", "stop after this many steps (0 = no limit)";
    "max_epochs": "0", "0", "stop after this many epochs (0 = no limit)";
    "validate_every": "1000", "100", "steps between validations";
    "patience": "3", "3", "stop after this many validations without improvement (0 disables)";
    "target_exact_match": "0", "0", "stop once validation exact match reaches this fraction (0 disables)";
    "k_samples": "20", "5", "sampled sequences per example for the reward baseline";
    "baseline": "mean", "mean", "reward baseline: mean | leave_one_out";
    "reward": "bleu4", "bleu4", "sequence reward: bleu4";
    "freeze_encoder": "false", "false", "keep encoder parameters fixed in the rl phase";
    "max_seq_len": "150", "40", "longest accepted target sequence in tokens";
    "decode_max_len": "200", "200", "longest decoded sequence in tokens";
    "beam": "5", "5", "beam width";
    "length_norm": "false", "false", "rank beam hypotheses by log-prob per token";
    "bleu_mode": "corpus", "corpus", "aggregate BLEU: corpus | sentence";
    "binarize_threshold": "0.5", "0.5", "pixels darker than this count as ink";
    "tokenizer": "lexicon", "lexicon", "tokenizer: chars | lexicon";
    "lexicon": "", "", "lexicon file (empty = built-in command list)";
    "buckets": "", "", "bucket file of `W H` lines (empty = automatic grid)";
    "bucket_width_step": "32", "32", "automatic grid: width step in pixels";
    "bucket_height_step": "8", "8", "automatic grid: height step in pixels";
    "round_buckets": "true", "true", "round bucket sizes up to multiples of 8";
    "drop_oversize": "true", "true", "drop images larger than every bucket";
    "grammar_max_depth": "2", "2", "synthetic grammar: nesting depth";
    "grammar_max_len": "40", "40", "synthetic grammar: longest formula in tokens";
    "grammar_max_terms": "4", "3", "synthetic grammar: top-level terms";
    "grammar_margin": "4", "4", "synthetic grammar: white margin in pixels";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Mle,
    Rl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Mean of all `k` rewards, including the sample being weighted.
    Mean,
    /// Mean of the other `k - 1` rewards.
    LeaveOneOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BleuMode {
    Corpus,
    Sentence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub d_model: usize,
    pub cnn_maps: [usize; 6],
    pub pe_max_timescale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub standard_cell_output: bool,
    pub query_current: bool,
    pub phase: Phase,
    pub lr_mle: f64,
    pub lr_rl: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub max_steps: u64,
    pub max_epochs: u64,
    pub validate_every: u64,
    pub patience: u32,
    pub target_exact_match: f64,
    pub k_samples: usize,
    pub baseline: Baseline,
    pub reward: String,
    pub freeze_encoder: bool,
    pub max_seq_len: usize,
    pub decode_max_len: usize,
    pub beam: usize,
    pub length_norm: bool,
    pub bleu_mode: BleuMode,
    pub binarize_threshold: f64,
    pub tokenizer: String,
    pub lexicon: String,
    pub buckets: String,
    pub bucket_width_step: usize,
    pub bucket_height_step: usize,
    pub round_buckets: bool,
    pub drop_oversize: bool,
    pub grammar_max_depth: usize,
    pub grammar_max_len: usize,
    pub grammar_max_terms: usize,
    pub grammar_margin: usize,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key} = {v:?}: cannot parse value")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {v:?}: expected true or false"))),
    }
}

impl Config {
    /// Defaults mirroring the full-size model.
    pub fn paper() -> Config {
        Self::preset(|k| k.paper)
    }

    /// Small model that trains on one CPU core in minutes.
    pub fn desk() -> Config {
        Self::preset(|k| k.desk)
    }

    pub fn preset_named(name: &str) -> Result<Config> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (paper | desk)"))),
        }
    }

    fn preset(pick: impl Fn(&KeySpec) -> &'static str) -> Config {
        let mut c = Config {
            seed: 0,
            d_model: 0,
            cnn_maps: [0; 6],
            pe_max_timescale: 0.0,
            bn_momentum: 0.0,
            bn_eps: 0.0,
            embed_dim: 0,
            decoder_layers: 0,
            dropout: 0.0,
            standard_cell_output: false,
            query_current: false,
            phase: Phase::Mle,
            lr_mle: 0.0,
            lr_rl: 0.0,
            adam_beta1: 0.0,
            adam_beta2: 0.0,
            adam_eps: 0.0,
            batch_size: 0,
            clip_norm: 0.0,
            max_steps: 0,
            max_epochs: 0,
            validate_every: 0,
            patience: 0,
            target_exact_match: 0.0,
            k_samples: 0,
            baseline: Baseline::Mean,
            reward: String::new(),
            freeze_encoder: false,
            max_seq_len: 0,
            decode_max_len: 0,
            beam: 0,
            length_norm: false,
            bleu_mode: BleuMode::Corpus,
            binarize_threshold: 0.0,
            tokenizer: String::new(),
            lexicon: String::new(),
            buckets: String::new(),
            bucket_width_step: 0,
            bucket_height_step: 0,
            round_buckets: false,
            drop_oversize: false,
            grammar_max_depth: 0,
            grammar_max_len: 0,
            grammar_max_terms: 0,
            grammar_margin: 0,
        };
        for k in KEYS {
            c.set(k.key, pick(k)).expect("preset values parse");
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "cnn_maps" => {
                let maps: Vec<usize> = v.split(',').map(|m| parse(key, m.trim())).collect::<Result<_>>()?;
                self.cnn_maps = maps
                    .try_into()
                    .map_err(|_| Error::Config(format!("cnn_maps = {v:?}: expected six comma-separated counts")))?;
            }
            "pe_max_timescale" => self.pe_max_timescale = parse(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "bn_eps" => self.bn_eps = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "decoder_layers" => self.decoder_layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "standard_cell_output" => self.standard_cell_output = parse_bool(key, v)?,
            "query_current" => self.query_current = parse_bool(key, v)?,
            "phase" => {
                self.phase = match v {
                    "mle" => Phase::Mle,
                    "rl" => Phase::Rl,
                    _ => return Err(Error::Config(format!("phase = {v:?}: expected mle or rl"))),
                }
            }
            "lr_mle" => self.lr_mle = parse(key, v)?,
            "lr_rl" => self.lr_rl = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "validate_every" => self.validate_every = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "target_exact_match" => self.target_exact_match = parse(key, v)?,
            "k_samples" => self.k_samples = parse(key, v)?,
            "baseline" => {
                self.baseline = match v {
                    "mean" => Baseline::Mean,
                    "leave_one_out" => Baseline::LeaveOneOut,
                    _ => return Err(Error::Config(format!("baseline = {v:?}: expected mean or leave_one_out"))),
                }
            }
            "reward" => self.reward = v.to_string(),
            "freeze_encoder" => self.freeze_encoder = parse_bool(key, v)?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "decode_max_len" => self.decode_max_len = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "length_norm" => self.length_norm = parse_bool(key, v)?,
            "bleu_mode" => {
                self.bleu_mode = match v {
                    "corpus" => BleuMode::Corpus,
                    "sentence" => BleuMode::Sentence,
                    _ => return Err(Error::Config(format!("bleu_mode = {v:?}: expected corpus or sentence"))),
                }
            }
            "binarize_threshold" => self.binarize_threshold = parse(key, v)?,
            "tokenizer" => self.tokenizer = v.to_string(),
            "lexicon" => self.lexicon = v.to_string(),
            "buckets" => self.buckets = v.to_string(),
            "bucket_width_step" => self.bucket_width_step = parse(key, v)?,
            "bucket_height_step" => self.bucket_height_step = parse(key, v)?,
            "round_buckets" => self.round_buckets = parse_bool(key, v)?,
            "drop_oversize" => self.drop_oversize = parse_bool(key, v)?,
            "grammar_max_depth" => self.grammar_max_depth = parse(key, v)?,
            "grammar_max_len" => self.grammar_max_len = parse(key, v)?,
            "grammar_max_terms" => self.grammar_max_terms = parse(key, v)?,
            "grammar_margin" => self.grammar_margin = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "d_model" => self.d_model.to_string(),
            "cnn_maps" => self.cnn_maps.map(|m| m.to_string()).join(","),
            "pe_max_timescale" => self.pe_max_timescale.to_string(),
            "bn_momentum" => self.bn_momentum.to_string(),
            "bn_eps" => self.bn_eps.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "dropout" => self.dropout.to_string(),
            "standard_cell_output" => self.standard_cell_output.to_string(),
            "query_current" => self.query_current.to_string(),
            "phase" => match self.phase {
                Phase::Mle => "mle".into(),
                Phase::Rl => "rl".into(),
            },
            "lr_mle" => self.lr_mle.to_string(),
            "lr_rl" => self.lr_rl.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "validate_every" => self.validate_every.to_string(),
            "patience" => self.patience.to_string(),
            "target_exact_match" => self.target_exact_match.to_string(),
            "k_samples" => self.k_samples.to_string(),
            "baseline" => match self.baseline {
                Baseline::Mean => "mean".into(),
                Baseline::LeaveOneOut => "leave_one_out".into(),
            },
            "reward" => self.reward.clone(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "decode_max_len" => self.decode_max_len.to_string(),
            "beam" => self.beam.to_string(),
            "length_norm" => self.length_norm.to_string(),
            "bleu_mode" => match self.bleu_mode {
                BleuMode::Corpus => "corpus".into(),
                BleuMode::Sentence => "sentence".into(),
            },
            "binarize_threshold" => self.binarize_threshold.to_string(),
            "tokenizer" => self.tokenizer.clone(),
            "lexicon" => self.lexicon.clone(),
            "buckets" => self.buckets.clone(),
            "bucket_width_step" => self.bucket_width_step.to_string(),
            "bucket_height_step" => self.bucket_height_step.to_string(),
            "round_buckets" => self.round_buckets.to_string(),
            "drop_oversize" => self.drop_oversize.to_string(),
            "grammar_max_depth" => self.grammar_max_depth.to_string(),
            "grammar_max_len" => self.grammar_max_len.to_string(),
            "grammar_max_terms" => self.grammar_max_terms.to_string(),
            "grammar_margin" => self.grammar_margin.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        };
        Ok(s)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v).map_err(|e| e.context(format!("line {}", no + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Applies `key=value` command-line overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?}: expected key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key in table order; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.key, self.get(k.key).expect("table keys are known"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder_config().validate()?;
        if self.embed_dim == 0 || self.decoder_layers == 0 {
            return bad("embed_dim and decoder_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must be in [0, 1)", self.dropout));
        }
        if self.lr_mle <= 0.0 || self.lr_rl <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.k_samples < 2 {
            return bad(format!("k_samples = {} must be at least 2", self.k_samples));
        }
        if self.reward != "bleu4" {
            return bad(format!("reward = {:?}: only bleu4 is available", self.reward));
        }
        if self.beam == 0 {
            return bad("beam must be at least 1".into());
        }
        if self.decode_max_len == 0 || self.max_seq_len == 0 {
            return bad("sequence length limits must be positive".into());
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return bad(format!("binarize_threshold = {} must be in (0, 1)", self.binarize_threshold));
        }
        if self.tokenizer != "chars" && self.tokenizer != "lexicon" {
            return bad(format!("tokenizer = {:?}: expected chars or lexicon", self.tokenizer));
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive".into());
        }
        if self.bucket_width_step == 0 || self.bucket_height_step == 0 {
            return bad("bucket steps must be positive".into());
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut e = EncoderConfig::with_maps(self.cnn_maps);
        e.d_model = self.d_model;
        e.pe_max_timescale = self.pe_max_timescale;
        e.bn_momentum = self.bn_momentum;
        e.bn_eps = self.bn_eps;
        e
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.d_model,
            memory_dim: self.d_model,
            layers: self.decoder_layers,
            dropout: self.dropout,
            standard_cell_output: self.standard_cell_output,
            query_current: self.query_current,
        }
    }

    pub fn grammar(&self) -> GrammarConfig {
        GrammarConfig {
            max_depth: self.grammar_max_depth,
            max_len: self.grammar_max_len,
            max_terms: self.grammar_max_terms,
            margin: self.grammar_margin,
            ..GrammarConfig::default()
        }
    }

    /// `--help` table: key, paper default, desk default, description.
    pub fn help_table() -> String {
        let w = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
        let pw = KEYS.iter().map(|k| k.paper.len().max(2)).max().unwrap_or(0);
        let dw = KEYS.iter().map(|k| k.desk.len().max(2)).max().unwrap_or(0);
        let mut s = format!("{:w$}  {:pw$}  {:dw$}  description\n", "key", "paper", "desk");
        let show = |v: &'static str| if v.is_empty() { "\"\"" } else { v };
        for k in KEYS {
            let _ = writeln!(s, "{:w$}  {:pw$}  {:dw$}  {}", k.key, show(k.paper), show(k.desk), k.help);
        }
        s
    }
}
