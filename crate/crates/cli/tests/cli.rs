use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtaw::data::{generate_synthetic, load_dataset, write_native, Format, Split, SyntheticSpec, Vocab, VocabPolicy};
use mtaw::eval::{evaluate, DEFAULT_KS};
use mtaw::model::ModelConfig;
use mtaw::training::{fit, Checkpoint, LossConfig, TrainConfig, Trainer};

fn mtaw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtaw"))
        .args(args)
        .output()
        .expect("spawn mtaw")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes successor-rule train and test splits over an identity vocabulary.
fn write_splits(dir: &Path, n: usize, train: usize, test: usize) -> (PathBuf, PathBuf) {
    let spec = SyntheticSpec::successor(n, 0.0);
    let vocab = Vocab::identity(n);
    let mut paths = Vec::new();
    for (name, count, seed) in [("train.txt", train, 1), ("test.txt", test, 2)] {
        let ds = generate_synthetic(&spec, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let path = dir.join(name);
        write_native(fs::File::create(&path).unwrap(), ds.sessions(), &vocab).unwrap();
        paths.push(path);
    }
    (paths.remove(0), paths.remove(0))
}

fn small_run(train: &Path, test: &Path, out: &Path) -> Vec<String> {
    [
        "train",
        "--train",
        s(train),
        "--test",
        s(test),
        "--out",
        s(out),
        "--embed-dim",
        "8",
        "--ffn-dim",
        "8",
        "--max-len",
        "6",
        "--batch-size",
        "20",
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

fn run(args: &[String]) -> Output {
    mtaw(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Trains a successor model to perfect held-out accuracy and stores it the
/// way `train` does.
fn oracle_checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    let n = 10;
    let (train_path, test_path) = write_splits(dir, n, 300, 100);
    let mut vocab = Vocab::new();
    let train = load_dataset(
        &train_path,
        Format::Native,
        &mut vocab,
        VocabPolicy::Extend,
        Some(6),
        Split::Train,
    )
    .unwrap();
    let test = load_dataset(
        &test_path,
        Format::Native,
        &mut vocab,
        VocabPolicy::Extend,
        Some(6),
        Split::Test,
    )
    .unwrap();
    let model = ModelConfig {
        embed_dim: 16,
        ffn_dim: 16,
        max_len: 6,
        dropout_rate: 0.0,
        ..ModelConfig::new(vocab.len())
    };
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 60,
        batch_size: 50,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), LossConfig::new(0.0), cfg).unwrap();
    let outcome = fit(&mut trainer, &train, &test, Some(vocab.digest()), |_| {}).unwrap();
    let p1 = evaluate(&outcome.best.params, &model, &test, &[1], 100).unwrap();
    assert_eq!(p1.precision_at(1), Some(1.0), "oracle model is not perfect");
    let ckpt = dir.join("oracle.ckpt");
    outcome.best.save(&ckpt).unwrap();
    fs::write(dir.join("vocab.txt"), vocab.to_text()).unwrap();
    (ckpt, test_path)
}

fn parse_floats(line: &str) -> Vec<f64> {
    line.trim().split(", ").map(|v| v.parse().unwrap()).collect()
}

#[test]
fn default_train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 20, 200, 60);
    let out = dir.path().join("run");
    let res = mtaw(&["train", "--train", s(&train), "--test", s(&test), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 51);
    assert!(log.starts_with("epoch,loss,p@10,mrr@10,p@20,mrr@20,seconds\n"));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = "));
    assert_eq!(manifest.matches("# sha256 ").count(), 2);
    let ckpt = Checkpoint::load(&out.join("best.ckpt")).unwrap();
    assert_eq!(ckpt.model.embed_dim, 100);
    assert!(stdout(&res).starts_with("best epoch "));
}

#[test]
fn zero_epochs_saves_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 12, 40, 10);
    let out = dir.path().join("run");
    let mut args = small_run(&train, &test, &out);
    args.extend(["--epochs".into(), "0".into()]);
    let res = run(&args);
    assert!(res.status.success());
    let ckpt = Checkpoint::load(&out.join("best.ckpt")).unwrap();
    assert_eq!(ckpt.state.epoch, 0);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn eval_matches_in_process_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 15, 80, 30);
    let out = dir.path().join("run");
    let mut args = small_run(&train, &test, &out);
    args.extend(["--epochs".into(), "2".into()]);
    assert!(run(&args).status.success());
    let ckpt_path = out.join("best.ckpt");
    let res = mtaw(&["eval", "--checkpoint", s(&ckpt_path), "--test", s(&test)]);
    assert!(res.status.success());
    let line = stdout(&res);
    assert_eq!(parse_floats(&line).len(), 4);

    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let mut vocab = Vocab::parse(&fs::read_to_string(out.join("vocab.txt")).unwrap()).unwrap();
    let ds = load_dataset(&test, Format::Native, &mut vocab, VocabPolicy::Frozen, Some(6), Split::Test)
        .unwrap()
        .with_num_items(ckpt.model.num_items);
    let report = evaluate(&ckpt.params, &ckpt.model, &ds, &DEFAULT_KS, 100).unwrap();
    assert_eq!(line.trim(), report.percent_line());
}

#[test]
fn oracle_checkpoint_scores_perfectly_and_recommends_successor() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, test) = oracle_checkpoint(dir.path());
    let res = mtaw(&["eval", "--checkpoint", s(&ckpt), "--test", s(&test)]);
    assert!(res.status.success());
    assert_eq!(stdout(&res).trim(), "100.00, 100.00, 100.00, 100.00");

    let res = mtaw(&["recommend", "--checkpoint", s(&ckpt), "-k", "1", "3", "6"]);
    assert!(res.status.success());
    assert_eq!(stdout(&res).lines().next().unwrap().split(", ").next(), Some("7"));

    let res = mtaw(&["recommend", "--checkpoint", s(&ckpt), "-k", "10", "4"]);
    let lines = stdout(&res);
    let scores: Vec<f64> = lines
        .lines()
        .map(|l| l.split(", ").nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 10);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn unknown_item_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = oracle_checkpoint(dir.path());
    let res = mtaw(&["recommend", "--checkpoint", s(&ckpt), "3", "nope"]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope"));
}

#[test]
fn checkpoint_problems_exit_five() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, test) = oracle_checkpoint(dir.path());
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let res = mtaw(&[
        "eval",
        "--checkpoint",
        s(&broken),
        "--test",
        s(&test),
        "--vocab",
        s(&dir.path().join("vocab.txt")),
    ]);
    assert_eq!(res.status.code(), Some(5));

    let other = dir.path().join("other_vocab.txt");
    fs::write(&other, Vocab::identity(11).to_text()).unwrap();
    let res = mtaw(&["eval", "--checkpoint", s(&ckpt), "--test", s(&test), "--vocab", s(&other)]);
    assert_eq!(res.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&res.stderr).contains("vocabulary mismatch"));
}

#[test]
fn invalid_config_exits_two_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 12, 40, 10);
    let out = dir.path().join("run");
    for extra in [
        ["--dropout", "1.5"],
        ["--gamma", "-1"],
        ["--set", "bogus=1"],
        ["--batch-size", "0"],
    ] {
        let mut args = small_run(&train, &test, &out);
        args.extend(extra.iter().map(|a| a.to_string()));
        let res = run(&args);
        assert_eq!(res.status.code(), Some(2), "{extra:?}");
        assert!(!out.exists(), "{extra:?} left artifacts");
    }
    let missing = dir.path().join("missing.txt");
    let res = mtaw(&["train", "--train", s(&missing), "--test", s(&test), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_data_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = write_splits(dir.path(), 12, 40, 10);
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1 2 3\n").unwrap();
    let res = mtaw(&[
        "train",
        "--train",
        s(&bad),
        "--test",
        s(&test),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 12, 40, 10);
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "train = {}\ntest = {}\nepochs = 5\nembed_dim = 4\nffn_dim = 4\n",
            s(&train),
            s(&test)
        ),
    )
    .unwrap();
    let res = mtaw(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 2);
    assert_eq!(Checkpoint::load(&out.join("best.ckpt")).unwrap().model.embed_dim, 4);
}

#[test]
fn preset_sets_gamma_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 12, 40, 10);
    for (extra, gamma) in [
        (vec!["--dataset", "retailrocket"], 6.0),
        (vec!["--dataset", "tmall"], 2.0),
        (vec!["--gamma", "6", "--dataset", "tmall"], 6.0),
    ] {
        let out = dir.path().join(format!("run{gamma}{}", extra.len()));
        let mut args = small_run(&train, &test, &out);
        args.extend(["--epochs", "1"].iter().chain(&extra).map(|a| a.to_string()));
        assert!(run(&args).status.success());
        assert_eq!(Checkpoint::load(&out.join("best.ckpt")).unwrap().state.gamma, gamma);
    }
}

#[test]
fn sweep_adds_cross_entropy_row() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = write_splits(dir.path(), 12, 40, 10);
    let table = dir.path().join("sweep.csv");
    let base = [
        "sweep-gamma",
        "--train",
        s(&train),
        "--test",
        s(&test),
        "--epochs",
        "1",
        "--embed-dim",
        "4",
        "--ffn-dim",
        "4",
    ];
    let mut args = base.to_vec();
    args.extend(["--gammas", "2,4,6", "--output", s(&table)]);
    assert!(mtaw(&args).status.success());
    let text = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0,ok,"));

    let mut args = base.to_vec();
    args.extend(["--gammas", "0"]);
    let res = mtaw(&args);
    assert_eq!(stdout(&res).lines().count(), 2);
}

#[test]
fn timing_reports_parameter_count() {
    let res = mtaw(&["timing", "--num-items", "36968"]);
    assert!(res.status.success());
    assert_eq!(stdout(&res).trim(), "parameters: 3732300 (3.73M)");

    let dir = tempfile::tempdir().unwrap();
    let (train, _) = write_splits(dir.path(), 12, 40, 10);
    let res = mtaw(&[
        "timing",
        "--train",
        s(&train),
        "--epochs",
        "2",
        "--embed-dim",
        "4",
        "--ffn-dim",
        "4",
    ]);
    assert!(res.status.success());
    let text = stdout(&res);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 2);
    assert!(text.contains("mean: "));
}

#[test]
fn synth_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    let res = mtaw(&[
        "synth",
        "--rule",
        "mixture",
        "--items",
        "16",
        "--sessions",
        "120",
        "--seed",
        "4",
        "--out",
        s(&path),
    ]);
    assert!(res.status.success());
    let mut vocab = Vocab::new();
    let ds = load_dataset(&path, Format::Native, &mut vocab, VocabPolicy::Extend, None, Split::Train).unwrap();
    assert_eq!(ds.len(), 120);
}
