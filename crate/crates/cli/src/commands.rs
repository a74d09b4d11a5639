use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use mtaw::config::RunConfig;
use mtaw::data::{
    generate_synthetic, load_dataset, write_native, Batch, Dataset, Rule, Session, Split, SyntheticSpec, Vocab, VocabPolicy,
};
use mtaw::eval::{evaluate, DEFAULT_KS};
use mtaw::model::predict_scores;
use mtaw::training::{fit, Checkpoint, MetricRow, Trainer};

use crate::error::CliError;
use crate::{EvalArgs, RecommendArgs, RuleKind, RunArgs, SweepArgs, SynthArgs, TimingArgs};

fn build_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags: [(&str, Option<String>); 16] = [
        ("train", path(&args.train)),
        ("test", path(&args.test)),
        ("out_dir", path(&args.out)),
        ("format", args.format.clone()),
        ("dataset", args.dataset.clone()),
        ("gamma", args.gamma.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("embed_dim", args.embed_dim.map(|v| v.to_string())),
        ("ffn_dim", args.ffn_dim.map(|v| v.to_string())),
        ("max_len", args.max_len.map(|v| v.to_string())),
        ("dropout_rate", args.dropout.map(|v| v.to_string())),
        ("score_temperature", args.temperature.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("factor", args.factor.clone()),
    ];
    for (key, value) in flags {
        if let Some(value) = value {
            cfg.set(key, &value)?;
        }
    }
    for pair in &args.overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {pair:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("missing required setting {key}")))
}

fn existing<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let path = required(value, key)?;
    if !path.is_file() {
        return Err(CliError::Config(format!("{key} file {} does not exist", path.display())));
    }
    Ok(path)
}

struct Splits {
    train: Dataset,
    test: Dataset,
    vocab: Vocab,
}

/// Loads both splits through one growing vocabulary, so test-only items
/// still get an embedding row.
fn load_splits(cfg: &RunConfig, train_path: &Path, test_path: &Path) -> Result<Splits, CliError> {
    let mut vocab = Vocab::new();
    let max_len = Some(cfg.max_len);
    let train = load_dataset(train_path, cfg.format, &mut vocab, VocabPolicy::Extend, max_len, Split::Train)?;
    let test = load_dataset(test_path, cfg.format, &mut vocab, VocabPolicy::Extend, max_len, Split::Test)?;
    let n = vocab.len();
    log::info!("train: {}", train.stats());
    log::info!("test: {}", test.stats());
    Ok(Splits {
        train: train.with_num_items(n),
        test: test.with_num_items(n),
        vocab,
    })
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let train_path = existing(&cfg.train_path, "train")?;
    let test_path = existing(&cfg.test_path, "test")?;
    let out = required(&cfg.out_dir, "out_dir")?;
    let data = load_splits(&cfg, train_path, test_path)?;
    let model = cfg.model(data.vocab.len());
    let mut trainer = Trainer::new(model.clone(), cfg.loss(), cfg.train.clone())?;

    fs::create_dir_all(out)?;
    fs::write(out.join("vocab.txt"), data.vocab.to_text())?;
    let mut manifest = String::from("# mtaw run manifest\n");
    manifest.push_str(&cfg.to_text());
    manifest.push_str(&format!(
        "# num_items {}\n# parameters {}\n",
        model.num_items,
        model.param_count()
    ));
    for (name, path) in [("train", train_path), ("test", test_path)] {
        manifest.push_str(&format!("# sha256 {name} {} {}\n", file_sha256(path)?, path.display()));
    }
    fs::write(out.join("manifest.txt"), manifest)?;

    let mut log_file = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(log_file, "{}", MetricRow::CSV_HEADER)?;
    log_file.flush()?;
    let mut write_error = None;
    let outcome = fit(&mut trainer, &data.train, &data.test, Some(data.vocab.digest()), |row| {
        log::info!("epoch {}: loss {:.6} {}", row.epoch, row.loss, row.report);
        let written = writeln!(log_file, "{}", row.to_csv()).and_then(|_| log_file.flush());
        if let Err(e) = written {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    outcome.best.save(&out.join("best.ckpt"))?;
    match &outcome.best_report {
        Some(report) => println!("best epoch {}: {}", outcome.best.state.epoch, report.percent_line()),
        None => println!("no epochs run; saved initial parameters"),
    }
    Ok(())
}

fn load_vocab(checkpoint: &Path, explicit: &Option<PathBuf>, ckpt: &Checkpoint) -> Result<Vocab, CliError> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let text = fs::read_to_string(&path).map_err(|e| CliError::Checkpoint(format!("vocabulary {}: {e}", path.display())))?;
    let vocab = Vocab::parse(&text).map_err(|e| CliError::Checkpoint(format!("vocabulary {}: {e}", path.display())))?;
    if let Some(expected) = &ckpt.vocab_digest {
        if &vocab.digest() != expected {
            return Err(CliError::Checkpoint(format!(
                "vocabulary mismatch: {} does not belong to this checkpoint",
                path.display()
            )));
        }
    }
    if vocab.len() != ckpt.model.num_items {
        return Err(CliError::Checkpoint(format!(
            "vocabulary mismatch: {} items in {} but the checkpoint has {}",
            vocab.len(),
            path.display(),
            ckpt.model.num_items
        )));
    }
    Ok(vocab)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let format = args.format.parse().map_err(CliError::Config)?;
    if args.batch_size == 0 {
        return Err(CliError::Config("batch_size must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut vocab = load_vocab(&args.checkpoint, &args.vocab, &ckpt)?;
    let test = load_dataset(
        &args.test,
        format,
        &mut vocab,
        VocabPolicy::Frozen,
        Some(ckpt.model.max_len),
        Split::Test,
    )?
    .with_num_items(ckpt.model.num_items);
    let report = evaluate(&ckpt.params, &ckpt.model, &test, &DEFAULT_KS, args.batch_size)?;
    println!("{}", report.percent_line());
    Ok(())
}

pub fn sweep_gamma(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = build_config(&args.run)?;
    if args.gammas.is_empty() {
        return Err(CliError::Config("at least one gamma is required".into()));
    }
    if let Some(bad) = args.gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
        return Err(CliError::Config(format!("gamma must be non-negative, got {bad}")));
    }
    let train_path = existing(&cfg.train_path, "train")?;
    let test_path = existing(&cfg.test_path, "test")?;
    let data = load_splits(&cfg, train_path, test_path)?;

    let mut gammas = args.gammas.clone();
    if !gammas.contains(&0.0) {
        gammas.insert(0, 0.0);
    }
    let mut table = String::from("gamma,status,best_epoch,p@10,mrr@10,p@20,mrr@20\n");
    for gamma in gammas {
        let mut run_cfg = cfg.clone();
        run_cfg.gamma = Some(gamma);
        let outcome = Trainer::new(run_cfg.model(data.vocab.len()), run_cfg.loss(), run_cfg.train.clone())
            .map_err(CliError::from)
            .and_then(|mut t| fit(&mut t, &data.train, &data.test, None, |_| {}).map_err(CliError::from));
        let row = match outcome {
            Ok(out) => match out.best_report {
                Some(r) => format!("{gamma},ok,{},{}", out.best.state.epoch, r.csv_fields()),
                None => format!("{gamma},ok,0,,,,"),
            },
            Err(e) => {
                log::warn!("gamma {gamma} failed: {e}");
                format!("{gamma},failed: {},,,,,", e.to_string().replace([',', '\n'], ";"))
            }
        };
        log::info!("{row}");
        table.push_str(&row);
        table.push('\n');
    }
    match &args.output {
        Some(path) => fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

pub fn recommend(args: &RecommendArgs) -> Result<(), CliError> {
    if args.k == 0 {
        return Err(CliError::Config("k must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab = load_vocab(&args.checkpoint, &args.vocab, &ckpt)?;
    let unknown: Vec<&str> = args
        .items
        .iter()
        .filter(|t| vocab.get(t).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Data(format!("unknown item(s): {}", unknown.join(", "))));
    }
    let items = args.items.iter().filter_map(|t| vocab.get(t)).collect();
    let session = Session::new(items, 0);
    let scores = predict_scores(&ckpt.params, &ckpt.model, &Batch::from_sessions([&session]))?;
    let row = scores.row(0);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for &id in order.iter().take(args.k) {
        let token = vocab.token(id as u32).unwrap_or("?");
        println!("{token}, {}", row[id]);
    }
    Ok(())
}

pub fn timing(args: &TimingArgs) -> Result<(), CliError> {
    let cfg = build_config(&args.run)?;
    let data = match &cfg.train_path {
        Some(_) => {
            let train_path = existing(&cfg.train_path, "train")?;
            let mut vocab = Vocab::new();
            let train = load_dataset(
                train_path,
                cfg.format,
                &mut vocab,
                VocabPolicy::Extend,
                Some(cfg.max_len),
                Split::Train,
            )?;
            if let Some(test_path) = &cfg.test_path {
                load_dataset(
                    test_path,
                    cfg.format,
                    &mut vocab,
                    VocabPolicy::Extend,
                    Some(cfg.max_len),
                    Split::Test,
                )?;
            }
            let n = vocab.len();
            Some(train.with_num_items(n))
        }
        None => None,
    };
    let num_items = match (&data, args.num_items) {
        (Some(d), _) => d.num_items(),
        (None, Some(n)) => n,
        (None, None) => return Err(CliError::Config("timing needs --train or --num-items".into())),
    };
    let model = cfg.model(num_items);
    model.validate()?;
    let count = model.param_count();
    println!("parameters: {count} ({:.2}M)", count as f64 / 1e6);
    let Some(train) = data else {
        return Ok(());
    };
    let mut trainer = Trainer::new(model, cfg.loss(), cfg.train.clone())?;
    let mut total = 0.0;
    for epoch in 1..=cfg.train.epochs {
        let stats = trainer.train_epoch(&train)?;
        total += stats.seconds;
        println!(
            "epoch {epoch}: {:.3} s ({} samples, {:.0} samples/s)",
            stats.seconds,
            stats.samples,
            stats.samples_per_sec()
        );
    }
    if cfg.train.epochs > 0 {
        println!("mean: {:.3} s/epoch", total / cfg.train.epochs as f64);
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let rule = match args.rule {
        RuleKind::Successor => Rule::Successor,
        RuleKind::Permutation => Rule::Permutation { seed: args.rule_seed },
        RuleKind::Mixture => Rule::Mixture {
            hard_fraction: args.hard_fraction,
        },
    };
    let spec = SyntheticSpec {
        num_items: args.items,
        min_len: args.min_len,
        max_len: args.max_len,
        noise: args.noise,
        rule,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if args.sessions == 0 {
        return Err(CliError::Config("sessions must be at least 1".into()));
    }
    let dataset = generate_synthetic(&spec, args.sessions, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_native(&mut out, dataset.sessions(), &Vocab::identity(spec.num_items))?;
    out.flush()?;
    eprintln!("wrote {} sessions to {}", dataset.len(), args.out.display());
    Ok(())
}
