use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fvn_core::checkpoint::Checkpoint;
use fvn_core::classifier::{style_report, ClassifierConfig, StyleClassifier};
use fvn_core::corpus::{
    build_dataset, delexicalize, load_dataset, read_conditions, read_records, split_validation, tokenize,
    write_dump, Condition, DatasetMode, Example, LoadStats, Vocabulary,
};
use fvn_core::evaluation::{par_map, EvalReport};
use fvn_core::layers::load_pretrained_embeddings;
use fvn_core::metrics::{expected_slots, parse_reference_groups, Tokens};
use fvn_core::network::DecodeMode;
use fvn_core::sampler::{build_tables, generate, inspect_codes, CodeTables};
use fvn_core::selftest;
use fvn_core::trainer::{TrainConfig, Trainer};
use fvn_core::FvnError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::manifest::{default_path, RunManifest};
use crate::{Cli, CliError, Command, Decode};

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(FvnError::Config(msg.into()))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => usage(format!("{flag} is required")),
    }
}

fn parse_set(raw: &str) -> CliResult<(String, toml::Value)> {
    let Some((key, value)) = raw.split_once('=') else {
        return usage(format!("--set expects KEY=VALUE, got {raw:?}"));
    };
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.trim().to_string(), parsed))
}

/// Defaults, then the `--config` file, then `--set`, then dedicated flags.
fn resolve_config<T: DeserializeOwned>(cli: &Cli, flags: Vec<(&str, toml::Value)>) -> CliResult<T> {
    let mut table = match &cli.config {
        Some(p) => fs::read_to_string(p)?.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))?,
        None => toml::Table::new(),
    };
    for raw in &cli.sets {
        let (k, v) = parse_set(raw)?;
        table.insert(k, v);
    }
    for (k, v) in flags {
        table.insert(k.to_string(), v);
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.message().to_string()))
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn train_config(cli: &Cli, train: Option<&Path>, dev: Option<&Path>, epochs: Option<usize>) -> CliResult<TrainConfig> {
    let mut flags = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(("seed", toml::Value::Integer(s as i64)));
    }
    if let Some(m) = cli.mode {
        flags.push(("mode", toml::Value::String(m.as_str().into())));
    }
    if let Some(t) = cli.threads {
        flags.push(("threads", toml::Value::Integer(t as i64)));
    }
    if let Some(e) = epochs {
        flags.push(("epochs", toml::Value::Integer(e as i64)));
    }
    if let Some(p) = train {
        flags.push(("train_path", path_value(p)));
    }
    if let Some(p) = dev {
        flags.push(("dev_path", path_value(p)));
    }
    let cfg: TrainConfig = resolve_config(cli, flags)?;
    cfg.validate()?;
    Ok(cfg)
}

struct Data {
    vocab: Vocabulary,
    train: Vec<Example>,
    val: Vec<Example>,
    stats: LoadStats,
    inputs: Vec<PathBuf>,
}

/// Training split (and vocabulary) plus validation: the dev file when
/// given, else a seeded hold-out of the training file.
fn load_data(cfg: &TrainConfig, vocab: Option<&Vocabulary>) -> CliResult<Data> {
    let Some(train_path) = &cfg.train_path else {
        return usage("--train (or train_path in the config) is required");
    };
    let ds = load_dataset(train_path, cfg.mode, vocab)?;
    let mut inputs = vec![train_path.clone()];
    let (train, val) = match &cfg.dev_path {
        Some(dev) => {
            inputs.push(dev.clone());
            let d = load_dataset(dev, cfg.mode, Some(&ds.vocab))?;
            (ds.examples, d.examples)
        }
        None => split_validation(ds.examples, cfg.validation_fraction, cfg.seed),
    };
    Ok(Data { vocab: ds.vocab, train, val, stats: ds.stats, inputs })
}

fn load_checkpoint(cli: &Cli) -> CliResult<(PathBuf, Checkpoint)> {
    let path = require(&cli.checkpoint, "--checkpoint")?.to_path_buf();
    let ckpt = Checkpoint::load(&path)?;
    if let Some(m) = cli.mode {
        ckpt.expect_mode(m)?;
    }
    Ok((path, ckpt))
}

fn tables_of(ckpt: &Checkpoint) -> CliResult<&CodeTables> {
    ckpt.tables.as_ref().ok_or_else(|| CliError::Core(FvnError::State("checkpoint has no code tables; run build-codes first".into())))
}

fn manifest_path(cli: &Cli, out: &Path) -> PathBuf {
    cli.manifest.clone().unwrap_or_else(|| default_path(out))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Prepare { train, dev, test } => prepare(&cli, train, dev.as_deref(), test.as_deref()),
        Command::Train { train, dev, epochs, stop_after, log } => {
            train_cmd(&cli, train.as_deref(), dev.as_deref(), *epochs, *stop_after, log.clone())
        }
        Command::BuildCodes { train } => build_codes(&cli, train.as_deref()),
        Command::Generate { conditions, details } => generate_cmd(&cli, conditions, details.as_deref()),
        Command::Evaluate { hyps, refs, conditions, classifier } => {
            evaluate_cmd(&cli, hyps, refs, conditions.as_deref(), classifier.as_deref())
        }
        Command::InspectCodes { style, top_m, per_code, conditions } => {
            inspect_cmd(&cli, style, *top_m, *per_code, conditions.as_deref())
        }
        Command::Selftest => selftest_cmd(&cli),
        Command::TrainClassifier { train } => train_classifier(&cli, train),
    }
}

fn prepare(cli: &Cli, train: &Path, dev: Option<&Path>, test: Option<&Path>) -> CliResult<()> {
    let out = require(&cli.out, "--out")?;
    let cfg = train_config(cli, Some(train), dev, None)?;
    let mut m = RunManifest::start("prepare");
    m.seed = Some(cfg.seed);
    m.config = Some(cfg.to_toml());
    let data = load_data(&cfg, None)?;
    fs::create_dir_all(out)?;
    let mut splits: Vec<(&str, Vec<Example>, LoadStats)> =
        vec![("train", data.train, data.stats), ("dev", data.val, LoadStats::default())];
    if let Some(t) = test {
        let ds = load_dataset(t, cfg.mode, Some(&data.vocab))?;
        splits.push(("test", ds.examples, ds.stats));
        m.input(t)?;
    }
    let mut counts = serde_json::Map::new();
    let mut stats = serde_json::Map::new();
    for (name, examples, st) in &splits {
        let path = out.join(format!("{name}.jsonl"));
        write_dump(examples, &data.vocab, fs::File::create(&path)?)?;
        counts.insert(name.to_string(), json!(examples.len()));
        if st.records > 0 {
            stats.insert(name.to_string(), serde_json::to_value(st).expect("stats serialize"));
        }
        m.output(&path)?;
    }
    let vocab_path = out.join("vocab.txt");
    fs::write(&vocab_path, data.vocab.tokens().join("\n") + "\n")?;
    m.output(&vocab_path)?;
    for p in &data.inputs {
        m.input(p)?;
    }
    m.summary = json!({ "records": counts, "load_stats": stats, "vocab_size": data.vocab.len() });
    println!("{}", serde_json::to_string(&m.summary).expect("summary serializes"));
    m.finish(&manifest_path(cli, out))?;
    Ok(())
}

fn train_cmd(
    cli: &Cli,
    train: Option<&Path>,
    dev: Option<&Path>,
    epochs: Option<usize>,
    stop_after: Option<usize>,
    log: Option<PathBuf>,
) -> CliResult<()> {
    let out = require(&cli.out, "--out")?.to_path_buf();
    let log = log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut m = RunManifest::start("train");
    let resuming = cli.checkpoint.is_some();
    let mut trainer = if resuming {
        let (path, ckpt) = load_checkpoint(cli)?;
        m.input(&path)?;
        if cli.config.is_some() || !cli.sets.is_empty() || cli.seed.is_some() || cli.threads.is_some() {
            return usage("only --epochs may change when resuming from --checkpoint");
        }
        let mut cfg = ckpt.config.clone();
        if let Some(p) = train {
            cfg.train_path = Some(p.to_path_buf());
        }
        if let Some(p) = dev {
            cfg.dev_path = Some(p.to_path_buf());
        }
        let data = load_data(&cfg, Some(&ckpt.vocab))?;
        for p in &data.inputs {
            m.input(p)?;
        }
        ckpt.into_trainer(epochs.unwrap_or(cfg.epochs), data.train, data.val)?
    } else {
        let cfg = train_config(cli, train, dev, epochs)?;
        let data = load_data(&cfg, None)?;
        for p in &data.inputs {
            m.input(p)?;
        }
        let pretrained = match &cfg.pretrained_embeddings {
            Some(p) => {
                m.input(p)?;
                Some(load_pretrained_embeddings(p, &data.vocab, cfg.dim, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?)
            }
            None => None,
        };
        Trainer::new(cfg, data.vocab, data.train, data.val, pretrained)?
    };
    m.seed = Some(trainer.config.seed);
    m.config = Some(trainer.config.to_toml());

    let mut log_file = fs::OpenOptions::new().create(true).write(true).append(resuming).truncate(!resuming).open(&log)?;
    trainer.run(stop_after, |t, entry| {
        writeln!(log_file, "{}", entry.to_json_line())?;
        eprintln!(
            "epoch {} loss {:.6} dec/token {:.6} val {}",
            entry.epoch,
            entry.train.total,
            entry.train_dec_per_token,
            entry.val_dec.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        Checkpoint::from_trainer(t).save(&out)
    })?;
    if !out.exists() {
        Checkpoint::from_trainer(&trainer).save(&out)?;
    }
    m.output(&out)?;
    m.output(&log)?;
    m.summary = json!({
        "epochs_done": trainer.progress.epochs_done,
        "best_val": trainer.progress.best_val,
        "last": trainer.progress.history.last(),
    });
    m.finish(&manifest_path(cli, &out))?;
    Ok(())
}

fn build_codes(cli: &Cli, train: Option<&Path>) -> CliResult<()> {
    let (path, mut ckpt) = load_checkpoint(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| path.clone());
    let mut m = RunManifest::start("build-codes");
    m.input(&path)?;
    let mut cfg = ckpt.config.clone();
    if let Some(p) = train {
        cfg.train_path = Some(p.to_path_buf());
    }
    let data = load_data(&cfg, Some(&ckpt.vocab))?;
    for p in &data.inputs {
        m.input(p)?;
    }
    let tables = build_tables(&ckpt.best_model()?, &data.train)?;
    m.summary = json!({
        "examples": data.train.len(),
        "content_keys": tables.content.len(),
        "style_keys": tables.style.len(),
    });
    ckpt.tables = Some(tables);
    ckpt.save(&out)?;
    m.seed = Some(cfg.seed);
    m.config = Some(ckpt.config.to_toml());
    m.output(&out)?;
    m.finish(&manifest_path(cli, &out))?;
    Ok(())
}

fn decode_mode(cli: &Cli) -> CliResult<DecodeMode> {
    match (cli.decode.unwrap_or(Decode::Greedy), cli.temperature) {
        (Decode::Greedy, None) => Ok(DecodeMode::Greedy),
        (Decode::Greedy, Some(_)) => usage("--temperature requires --decode sample"),
        (Decode::Sample, t) => {
            let temperature = t.unwrap_or(1.0);
            if !(temperature > 0.0 && temperature.is_finite()) {
                return usage(format!("--temperature must be positive, got {temperature}"));
            }
            Ok(DecodeMode::Sample { temperature })
        }
    }
}

fn generate_cmd(cli: &Cli, conditions: &Path, details: Option<&Path>) -> CliResult<()> {
    let out = require(&cli.out, "--out")?;
    let (path, ckpt) = load_checkpoint(cli)?;
    let tables = tables_of(&ckpt)?;
    let model = ckpt.best_model()?;
    let mode = decode_mode(cli)?;
    let seed = cli.seed.unwrap_or(ckpt.config.seed);
    let conds = read_conditions(conditions, ckpt.mode())?;
    let indexed: Vec<(usize, &Condition)> = conds.iter().enumerate().collect();
    let results = par_map(&indexed, cli.threads.unwrap_or(1), |(i, c)| {
        generate(&model, tables, &c.cmr, c.style, mode, &mut rng_for(seed, *i as u64))
    });
    let gens = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut text = String::new();
    for g in &gens {
        let _ = writeln!(text, "{}", g.text);
    }
    fs::write(out, text)?;

    let mut m = RunManifest::start("generate");
    m.seed = Some(seed);
    m.config = Some(ckpt.config.to_toml());
    m.input(&path)?;
    m.input(conditions)?;
    m.output(out)?;
    if let Some(d) = details {
        let mut lines = String::new();
        for (i, g) in gens.iter().enumerate() {
            let _ = writeln!(lines, "{}", json!({ "index": i, "generation": g }));
        }
        fs::write(d, lines)?;
        m.output(d)?;
    }
    m.summary = json!({ "generations": gens.len(), "decode": format!("{mode:?}") });
    m.finish(&manifest_path(cli, out))?;
    Ok(())
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

fn evaluate_cmd(cli: &Cli, hyps: &Path, refs: &Path, conditions: Option<&Path>, classifier: Option<&Path>) -> CliResult<()> {
    let out = require(&cli.out, "--out")?;
    let mut m = RunManifest::start("evaluate");
    let hyp_text = read_lines(hyps)?;
    let groups = parse_reference_groups(&fs::read_to_string(refs)?);
    if hyp_text.len() != groups.len() {
        return Err(FvnError::Argument(format!("{} hypotheses but {} reference groups", hyp_text.len(), groups.len())).into());
    }
    m.input(hyps)?;
    m.input(refs)?;
    let hyp_tokens: Vec<Tokens> = hyp_text.iter().map(|h| tokenize(h)).collect();
    let ref_tokens: Vec<Vec<Tokens>> = groups.iter().map(|g| g.iter().map(|r| tokenize(r)).collect()).collect();
    let mut report = EvalReport::compute(&hyp_tokens, &ref_tokens, cli.threads.unwrap_or(1))?;
    if let Some(cpath) = conditions {
        let Some(mode) = cli.mode else {
            return usage("--mode is required with --conditions");
        };
        m.input(cpath)?;
        let conds = read_conditions(cpath, mode)?;
        if conds.len() != hyp_text.len() {
            return Err(FvnError::Argument(format!("{} conditions for {} hypotheses", conds.len(), hyp_text.len())).into());
        }
        let delex: Vec<Tokens> =
            hyp_text.iter().zip(&conds).map(|(h, c)| tokenize(&delexicalize(h, &c.cmr, mode.delex_mode()).text)).collect();
        let cmrs: Vec<_> = conds.iter().map(|c| c.cmr.clone()).collect();
        report = report.with_slots(&delex, &expected_slots(&cmrs, mode))?;
        if let Some(clf_path) = classifier {
            m.input(clf_path)?;
            let clf = StyleClassifier::from_bytes(&fs::read(clf_path)?)?;
            let gold: Vec<_> = conds.iter().map(|c| c.style).collect::<Option<Vec<_>>>().ok_or_else(|| {
                FvnError::Argument("style scoring needs a personality column in the conditions".into())
            })?;
            let predicted = delex.iter().map(|t| clf.predict(t)).collect::<Result<Vec<_>, _>>()?;
            report = report.with_style(style_report(&gold, &predicted));
        }
    } else if classifier.is_some() {
        return usage("--classifier requires --conditions");
    }
    fs::write(out, report.to_json() + "\n")?;
    print!("{}", report.to_table());
    m.output(out)?;
    m.summary = json!({ "bleu": report.bleu, "nist": report.nist, "meteor_lite": report.meteor_lite, "rouge_l": report.rouge_l });
    m.finish(&manifest_path(cli, out))?;
    Ok(())
}

fn inspect_cmd(cli: &Cli, style: &str, top_m: usize, per_code: usize, conditions: Option<&Path>) -> CliResult<()> {
    let out = require(&cli.out, "--out")?;
    let (path, ckpt) = load_checkpoint(cli)?;
    let tables = tables_of(&ckpt)?;
    let model = ckpt.best_model()?;
    let mut m = RunManifest::start("inspect-codes");
    m.input(&path)?;
    let cond_path = match conditions {
        Some(p) => p.to_path_buf(),
        None => match &ckpt.config.train_path {
            Some(p) => p.clone(),
            None => return usage("--conditions is required"),
        },
    };
    m.input(&cond_path)?;
    let cmrs: Vec<_> = read_conditions(&cond_path, ckpt.mode())?.into_iter().map(|c| c.cmr).collect();
    let seed = cli.seed.unwrap_or(ckpt.config.seed);
    let report = inspect_codes(&model, tables, style, top_m, per_code, &cmrs, &mut rng_for(seed, 0))?;
    let mut text = format!("style_key: {}\n", report.style_key);
    for (rank, e) in report.entries.iter().enumerate() {
        let _ = writeln!(text, "rank {}  code {}  probability {:.6}", rank + 1, e.index, e.probability);
        for g in &e.generations {
            let _ = writeln!(text, "  - {g}");
        }
    }
    fs::write(out, &text)?;
    print!("{text}");
    m.seed = Some(seed);
    m.config = Some(ckpt.config.to_toml());
    m.output(out)?;
    m.summary = json!({ "codes": report.entries.len() });
    m.finish(&manifest_path(cli, out))?;
    Ok(())
}

fn selftest_cmd(cli: &Cli) -> CliResult<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("selftest-report.json"));
    let seed = cli.seed.unwrap_or(0);
    let mut m = RunManifest::start("selftest");
    m.seed = Some(seed);
    let started = std::time::Instant::now();
    let outcomes = selftest::run_all(seed, |o| println!("{}", o.line()));
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let secs = started.elapsed().as_secs_f64();
    println!("{} checks, {failed} failed, {secs:.1}s", outcomes.len());
    fs::write(&out, serde_json::to_string_pretty(&outcomes).expect("outcomes serialize") + "\n")?;
    m.output(&out)?;
    m.summary = json!({ "checks": outcomes.len(), "failed": failed, "seconds": secs });
    m.finish(&manifest_path(cli, &out))?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} self-test checks failed", outcomes.len())));
    }
    Ok(())
}

fn classifier_config(cli: &Cli) -> CliResult<ClassifierConfig> {
    let mut flags = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(("seed", toml::Value::Integer(s as i64)));
    }
    resolve_config(cli, flags)
}

fn train_classifier(cli: &Cli, train: &Path) -> CliResult<()> {
    let out = require(&cli.out, "--out")?;
    if cli.mode == Some(DatasetMode::E2e) {
        return Err(FvnError::Argument("the e2e corpus has no style labels to train on".into()).into());
    }
    let cfg = classifier_config(cli)?;
    let ds = build_dataset(&read_records(train, DatasetMode::Personage)?, DatasetMode::Personage, None)?;
    let texts: Vec<Tokens> =
        ds.examples.iter().map(|e| ds.vocab.decode(&e.delex_tokens).into_iter().map(str::to_string).collect()).collect();
    let labels: Vec<_> = ds.examples.iter().filter_map(|e| e.style).collect();
    let clf = StyleClassifier::train(&texts, &labels, cfg.clone())?;
    let fit = clf.evaluate(&texts, &labels)?;
    fs::write(out, clf.to_bytes())?;
    let mut m = RunManifest::start("train-classifier");
    m.seed = Some(cfg.seed);
    m.config = Some(toml_snapshot(&cfg));
    m.input(train)?;
    m.output(out)?;
    m.summary = json!({ "examples": texts.len(), "train_accuracy": fit.accuracy, "train_macro_f1": fit.macro_f1 });
    m.finish(&manifest_path(cli, out))?;
    Ok(())
}

fn toml_snapshot<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serializes")
}
