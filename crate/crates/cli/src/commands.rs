use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use im2tex::checkpoint::Checkpoint;
use im2tex::config::{Phase, BleuMode};
use im2tex::data::bucket::{self, Bucket};
use im2tex::data::image::GrayImage;
use im2tex::data::manifest::{load_dataset, save_dataset, Example};
use im2tex::data::pgm::{self, Pgm};
use im2tex::data::synth;
use im2tex::data::tokenize::{detokenize, Lexicon, TokenizerMode};
use im2tex::data::vocab::Vocabulary;
use im2tex::decoding::decode_image;
use im2tex::metrics::{bleu4, evaluate_pair};
use im2tex::training::{model_from_checkpoint, TrainOptions, TrainSet, Trainer};
use im2tex::{Config, Error, Model};

use crate::error::{CliError, CliResult};
use crate::ConfigArgs;

fn base_config(args: &ConfigArgs) -> CliResult<Config> {
    let mut cfg = Config::preset_named(&args.preset)?;
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(&args.set)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Overrides from `--config`/`--set`/`--seed` as `key=value` strings, for
/// layering over a checkpoint's stored configuration.
fn override_list(args: &ConfigArgs) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}: expected `key = value`, got {line:?}", p.display())))?;
                out.push(format!("{}={}", k.trim(), v.trim()));
            }
        }
    }
    out.extend(args.set.iter().cloned());
    if let Some(s) = args.seed {
        out.push(format!("seed={s}"));
    }
    Ok(out)
}

fn echo_config(cfg: &Config) {
    log::info!("effective configuration:\n{}", cfg.to_text().trim_end());
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Checkpoint weights with decode-time overrides applied.
fn load_model(args: &ConfigArgs, path: &Path) -> CliResult<Model> {
    let ckpt = load_checkpoint(path)?;
    let model = model_from_checkpoint(&ckpt, &override_list(args)?)?;
    echo_config(&model.config);
    Ok(model)
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn buckets_from(cfg: &Config) -> CliResult<Option<Vec<Bucket>>> {
    if cfg.buckets.is_empty() {
        Ok(None)
    } else {
        Ok(Some(bucket::load_buckets(Path::new(&cfg.buckets), cfg.round_buckets)?))
    }
}

/// Pads an image the way training does: into the configured bucket list, or
/// onto the automatic grid.
fn pad_for_model(img: &GrayImage, cfg: &Config) -> CliResult<GrayImage> {
    let b = match buckets_from(cfg)? {
        Some(list) => bucket::assign(img, &list).ok_or_else(|| {
            Error::Invalid(format!("a {}x{} image fits no configured bucket", img.width, img.height))
        })?,
        None => Bucket::quantized(img.width, img.height, cfg.bucket_width_step, cfg.bucket_height_step),
    };
    Ok(img.pad_to(b.width, b.height)?)
}

fn tokenizer_mode(cfg: &Config) -> CliResult<TokenizerMode> {
    Ok(match cfg.tokenizer.as_str() {
        "chars" => TokenizerMode::Chars,
        _ if cfg.lexicon.is_empty() => TokenizerMode::Lexicon(Lexicon::default_commands()),
        _ => TokenizerMode::Lexicon(Lexicon::load(Path::new(&cfg.lexicon))?),
    })
}

pub fn gen_data(args: &ConfigArgs, out: &Path, count: usize, binary: bool) -> CliResult<()> {
    let cfg = base_config(args)?;
    echo_config(&cfg);
    let set = synth::generate(cfg.seed, count, &cfg.grammar())?;
    let pairs: Vec<(GrayImage, Vec<String>)> = set.into_iter().map(|e| (e.image, e.tokens)).collect();
    let manifest = save_dataset(out, "manifest.tsv", &pairs, binary)?;
    let mut lens: Vec<usize> = pairs.iter().map(|p| p.1.len()).collect();
    lens.sort_unstable();
    print!("{}", length_stats(&lens));
    log::info!("wrote {}", manifest.display());
    Ok(())
}

/// Count, mean/median length and a histogram in bins of 5 tokens.
fn length_stats(sorted: &[usize]) -> String {
    let n = sorted.len();
    let mut s = String::new();
    if n == 0 {
        s.push_str("count 0\n");
        return s;
    }
    let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let _ = writeln!(
        s,
        "count {n} mean {mean:.2} median {median} min {} max {}",
        sorted[0],
        sorted[n - 1]
    );
    let top = sorted[n - 1] / 5;
    for bin in 0..=top {
        let c = sorted.iter().filter(|&&l| l / 5 == bin).count();
        let _ = writeln!(s, "length {:>3}-{:<3} {c}", bin * 5, bin * 5 + 4);
    }
    s
}

pub struct TrainArgs {
    pub cfg: ConfigArgs,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: PathBuf,
    pub phase: Option<String>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

fn same_architecture(a: &Config, b: &Config) -> bool {
    let dec = |c: &Config| {
        let mut d = c.decoder_config(0);
        d.dropout = 0.0;
        d
    };
    a.encoder_config() == b.encoder_config() && dec(a) == dec(b)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut overrides = override_list(&args.cfg)?;
    if let Some(p) = &args.phase {
        overrides.push(format!("phase={p}"));
    }
    let mut trainer = if let Some(path) = &args.resume {
        let ckpt = load_checkpoint(path)?;
        let mut t = Trainer::from_checkpoint(&ckpt)?;
        let mut cfg = t.model.config.clone();
        cfg.apply_overrides(&overrides)?;
        cfg.validate()?;
        if !same_architecture(&cfg, &t.model.config) || cfg.phase != t.model.config.phase {
            return Err(CliError::Usage("--resume cannot change the architecture or the phase".into()));
        }
        if cfg.lr_mle != t.model.config.lr_mle || cfg.lr_rl != t.model.config.lr_rl {
            t.adam.lr = match cfg.phase {
                Phase::Mle => cfg.lr_mle,
                Phase::Rl => cfg.lr_rl,
            };
        }
        t.model.config = cfg;
        t
    } else {
        let cfg = {
            let mut c = Config::preset_named(&args.cfg.preset)?;
            c.apply_overrides(&overrides)?;
            c.validate()?;
            c
        };
        match (cfg.phase, &args.init) {
            (Phase::Rl, None) => {
                return Err(CliError::Usage(
                    "the rl phase starts from a model trained with phase=mle; pass it with --init <checkpoint>".into(),
                ))
            }
            (Phase::Rl, Some(init)) => {
                let ckpt = load_checkpoint(init)?;
                let mut model = model_from_checkpoint(&ckpt, &overrides)?;
                let stored = model_from_checkpoint(&ckpt, &[] as &[&str])?.config;
                if !same_architecture(&model.config, &stored) {
                    return Err(CliError::Usage("--init checkpoint has a different architecture".into()));
                }
                model.config.phase = Phase::Rl;
                Trainer::new(model)
            }
            (Phase::Mle, Some(_)) => return Err(CliError::Usage("--init is only used with phase=rl".into())),
            (Phase::Mle, None) => {
                let manifest = args
                    .train
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--train <manifest> is required".into()))?;
                let ex = load_dataset(manifest, cfg.max_seq_len)?;
                let vocab = Vocabulary::build(ex.iter().map(|e| &e.tokens));
                Trainer::new(Model::new(&cfg, vocab)?)
            }
        }
    };
    let cfg = trainer.model.config.clone();
    echo_config(&cfg);
    let train_path = args
        .train
        .as_ref()
        .ok_or_else(|| CliError::Usage("--train <manifest> is required".into()))?;
    let buckets = buckets_from(&cfg)?;
    let prepare = |p: &Path| -> CliResult<TrainSet> {
        let ex: Vec<Example> = load_dataset(p, cfg.max_seq_len)?;
        Ok(TrainSet::prepare(&ex, &trainer.model.vocab, buckets.as_deref(), &cfg)?)
    };
    let train_set = prepare(train_path)?;
    let val_set = prepare(args.val.as_deref().unwrap_or(train_path))?;
    if train_set.dropped > 0 {
        log::warn!("{} training images fit no bucket and were dropped", train_set.dropped);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cfg_path = args.out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        log: Some(args.out.join("train.tsv")),
    };
    let summary = trainer.train(&train_set, &val_set, &opts)?;
    println!(
        "phase {} steps {} (total {}) best validation {:.6} stop: {}",
        cfg.get("phase")?,
        summary.steps,
        trainer.state.step,
        summary.best,
        summary.stop_reason
    );
    Ok(())
}

pub fn predict(
    args: &ConfigArgs,
    checkpoint: &Path,
    manifest: &Path,
    beam: Option<usize>,
    greedy: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let model = load_model(args, checkpoint)?;
    let cfg = &model.config;
    let width = beam.unwrap_or(cfg.beam);
    if width == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let mode = tokenizer_mode(cfg)?;
    let examples = load_dataset(manifest, usize::MAX)?;
    let mut text = String::from("id\tprediction\tlatex\tlog_prob\tfinished\n");
    for ex in &examples {
        let img = pad_for_model(&ex.image, cfg)?;
        let d = decode_image(&model, &img, width, greedy)?;
        let toks = model.vocab.decode(&d.tokens);
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{:.6}\t{}",
            ex.id,
            toks.join(" "),
            detokenize(&toks, &mode),
            d.log_prob,
            d.finished
        );
    }
    write_output(out, &text)
}

fn read_predictions(path: &Path) -> CliResult<HashMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (no, line) in text.lines().enumerate() {
        if no == 0 && line.starts_with("id\t") || line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        let pred = cols
            .next()
            .ok_or_else(|| Error::Config(format!("{} line {}: missing prediction column", path.display(), no + 1)))?;
        out.insert(id, pred.split_whitespace().map(String::from).collect());
    }
    Ok(out)
}

pub fn evaluate(args: &ConfigArgs, manifest: &Path, predictions: &Path, out: Option<&Path>) -> CliResult<()> {
    let cfg = base_config(args)?;
    let refs = im2tex::data::manifest::read_manifest(manifest)?;
    let preds = read_predictions(predictions)?;
    let mut text = String::from("id\tbleu\tedit_distance\texact_match\texact_match_ws\n");
    let (mut edit, mut exact, mut exact_ws) = (0.0, 0usize, 0usize);
    let (mut cands, mut references) = (Vec::new(), Vec::new());
    for r in &refs {
        let id = r.path.to_string_lossy().into_owned();
        let pred = match preds.get(&id) {
            Some(p) => p.clone(),
            None => {
                log::warn!("{id}: no prediction, scored as empty");
                Vec::new()
            }
        };
        let m = evaluate_pair(&r.tokens, &pred, cfg.grammar_margin, cfg.binarize_threshold)?;
        let _ = writeln!(
            text,
            "{id}\t{:.6}\t{:.6}\t{}\t{}",
            m.bleu4,
            m.edit_distance_score,
            u8::from(m.exact_match),
            u8::from(m.exact_match_no_ws)
        );
        edit += m.edit_distance_score;
        exact += usize::from(m.exact_match);
        exact_ws += usize::from(m.exact_match_no_ws);
        cands.push(pred);
        references.push(r.tokens.clone());
    }
    let n = refs.len().max(1) as f64;
    let bleu = if refs.is_empty() {
        0.0
    } else {
        bleu4(&cands, &references, cfg.bleu_mode)?
    };
    let label = match cfg.bleu_mode {
        BleuMode::Corpus => "ALL",
        BleuMode::Sentence => "ALL(sentence)",
    };
    let _ = writeln!(
        text,
        "{label}\t{bleu:.6}\t{:.6}\t{:.6}\t{:.6}",
        edit / n,
        exact as f64 / n,
        exact_ws as f64 / n
    );
    write_output(out, &text)
}

/// Attention weights per step are written as 16-bit PGMs scaled to their
/// own maximum; `heatmaps.tsv` records the factor turning pixel values
/// back into weights per pixel (each weight covers an 8×8 block).
pub fn inspect(args: &ConfigArgs, checkpoint: &Path, image: &Path, out: &Path, beam: Option<usize>, greedy: bool) -> CliResult<()> {
    const BLOCK: usize = 8;
    const MAXVAL: u16 = u16::MAX;
    let model = load_model(args, checkpoint)?;
    let cfg = &model.config;
    let img = pad_for_model(&pgm::read_image(image)?, cfg)?;
    let d = decode_image(&model, &img, beam.unwrap_or(cfg.beam), greedy)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    pgm::write_image(&out.join("input.pgm"), &img, true)?;
    let (rows, cols) = (img.height / BLOCK, img.width / BLOCK);
    let mut meta = String::from("step\ttoken\tfile\trows\tcols\tpixel_scale\n");
    for (t, alpha) in d.alphas.iter().enumerate() {
        if alpha.len() != rows * cols {
            return Err(Error::Invalid(format!("{} attention weights for a {rows}x{cols} grid", alpha.len())).into());
        }
        let peak = alpha.iter().cloned().fold(0.0, f64::max);
        let q = |a: f64| if peak > 0.0 { (a / peak * MAXVAL as f64).round() as u16 } else { 0 };
        let mut samples = vec![0u16; img.width * img.height];
        for y in 0..img.height {
            for x in 0..img.width {
                samples[y * img.width + x] = q(alpha[(y / BLOCK) * cols + x / BLOCK]);
            }
        }
        let heat = Pgm {
            width: img.width,
            height: img.height,
            maxval: MAXVAL,
            samples,
        };
        let name = format!("step_{t:03}.pgm");
        let path = out.join(&name);
        std::fs::write(&path, heat.encode(true)).map_err(|e| Error::io(&path, e))?;
        let token = match d.tokens.get(t) {
            Some(&id) => model.vocab.token(id).unwrap_or("<UNK>").to_string(),
            None => "<END>".into(),
        };
        let scale = peak / MAXVAL as f64 / (BLOCK * BLOCK) as f64;
        let _ = writeln!(meta, "{t}\t{token}\t{name}\t{rows}\t{cols}\t{scale:e}");
    }
    let meta_path = out.join("heatmaps.tsv");
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    println!("{}", model.vocab.decode(&d.tokens).join(" "));
    Ok(())
}
