use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memts::data::{synth_corpus, to_tsv, SynthKind};
use memts::numerics::RngState;

const TINY: &str = "input_len = 32
d_model = 8
depth = 1
cms_levels = 2
proj_dim = 8
pretrain_epochs = 2
pretrain_batch = 8
lp_epochs = 3
ft_epochs = 2
";

fn memts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memts")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        ws.write("tiny.cfg", TINY);
        let mut rng = RngState::new(5).rng();
        let train = synth_corpus(&[SynthKind::Sine, SynthKind::Ar1], 8, 32, &mut rng).unwrap();
        let test = synth_corpus(&[SynthKind::Sine, SynthKind::Ar1], 6, 32, &mut rng).unwrap();
        ws.write("train.tsv", &to_tsv(&train));
        ws.write("test.tsv", &to_tsv(&test));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.path(name), text).unwrap();
    }

    fn finetune(&self, out: &str, extra: &[&str]) -> Output {
        let (train, test, cfg, out) = (self.p("train.tsv"), self.p("test.tsv"), self.p("tiny.cfg"), self.p(out));
        let mut args = vec!["finetune", "--train", &train, "--test", &test, "--config", &cfg, "--seed", "3", "--out", &out];
        args.extend_from_slice(extra);
        memts(&args)
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn finetune_then_eval_round_trip() {
    let ws = Workspace::new();
    let out = ws.finetune("ft", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("accuracy = "), "{stdout}");
    for f in ["checkpoint.bin", "metrics.csv", "report.txt", "config.txt", "manifest.txt"] {
        assert!(ws.path("ft").join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(ws.path("ft/metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,epoch,loss,mtsm,nce,accuracy,macro_f1\n"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("lp,")).count(), 3);
    assert_eq!(metrics.lines().filter(|l| l.starts_with("ft,")).count(), 2);
    assert!(metrics.lines().last().unwrap().starts_with("test,"));

    let (test, ck, ev) = (ws.p("test.tsv"), ws.p("ft/checkpoint.bin"), ws.p("ev"));
    let out = memts(&["eval", "--test", &test, "--checkpoint", &ck, "--out", &ev]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // the same model on the same split gives the report written at training time
    assert_eq!(read(&ws.path("ev/report.txt")), read(&ws.path("ft/report.txt")));
    assert_eq!(String::from_utf8_lossy(&out.stdout), fs::read_to_string(ws.path("ev/report.txt")).unwrap());
}

#[test]
fn eval_of_memorized_set_is_perfect() {
    let ws = Workspace::new();
    let mut rng = RngState::new(9).rng();
    let four = synth_corpus(&[SynthKind::Sine, SynthKind::Square], 4, 32, &mut rng).unwrap();
    ws.write("four.tsv", &to_tsv(&four));
    let base: String = TINY.lines().filter(|l| !l.starts_with("lp_epochs") && !l.starts_with("ft_epochs")).map(|l| format!("{l}\n")).collect();
    ws.write("memorize.cfg", &format!("{base}lp_epochs = 40\nlp_lr = 0.01\nft_epochs = 20\nft_lr_head = 0.01\nft_lr_backbone = 0.001\nhead_dropout = 0\n"));
    let (four, cfg, out) = (ws.p("four.tsv"), ws.p("memorize.cfg"), ws.p("mem"));
    let run = memts(&["finetune", "--train", &four, "--test", &four, "--config", &cfg, "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let ck = ws.p("mem/checkpoint.bin");
    let run = memts(&["eval", "--test", &four, "--checkpoint", &ck, "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("accuracy = 1\n"), "{}", String::from_utf8_lossy(&run.stdout));
}

#[test]
fn rerun_from_manifest_config_reproduces_every_artifact() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.finetune("a", &[])), 0);
    let cfg = ws.p("a/config.txt");
    let (train, test, out) = (ws.p("train.tsv"), ws.p("test.tsv"), ws.p("b"));
    let run = memts(&["finetune", "--train", &train, "--test", &test, "--config", &cfg, "--seed", "3", "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    for f in ["checkpoint.bin", "metrics.csv", "report.txt", "config.txt", "manifest.txt"] {
        assert_eq!(read(&ws.path("a").join(f)), read(&ws.path("b").join(f)), "{f} differs");
    }
}

#[test]
fn pretrain_checkpoint_feeds_finetune() {
    let ws = Workspace::new();
    let (cfg, out) = (ws.p("tiny.cfg"), ws.p("pre"));
    let run = memts(&["pretrain", "--synthetic", "12", "--config", &cfg, "--seed", "1", "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let metrics = fs::read_to_string(ws.path("pre/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("pretrain,")).count(), 2);
    let manifest = fs::read_to_string(ws.path("pre/manifest.txt")).unwrap();
    assert!(manifest.contains("input.corpus = synthetic:12"));

    let ck = ws.p("pre/checkpoint.bin");
    let run = ws.finetune("ft", &["--checkpoint", &ck]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let manifest = fs::read_to_string(ws.path("ft/manifest.txt")).unwrap();
    assert!(manifest.contains("input.checkpoint = "));

    // a TSV corpus works the same way
    let (corpus, out) = (ws.p("train.tsv"), ws.p("pre2"));
    let run = memts(&["pretrain", "--corpus", &corpus, "--config", &cfg, "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
}

#[test]
fn architecture_mismatch_with_checkpoint_is_a_config_error() {
    let ws = Workspace::new();
    let (cfg, out) = (ws.p("tiny.cfg"), ws.p("pre"));
    assert_eq!(code(&memts(&["pretrain", "--synthetic", "8", "--config", &cfg, "--out", &out])), 0);
    ws.write("wide.cfg", &format!("{TINY}d_model = 16\n").replace("d_model = 8\n", ""));
    let (train, test, wide, ck, out) = (ws.p("train.tsv"), ws.p("test.tsv"), ws.p("wide.cfg"), ws.p("pre/checkpoint.bin"), ws.p("x"));
    let run = memts(&["finetune", "--train", &train, "--test", &test, "--checkpoint", &ck, "--config", &wide, "--out", &out]);
    assert_eq!(code(&run), 2, "{}", stderr(&run));
}

#[test]
fn features_rows_per_series() {
    let ws = Workspace::new();
    let (data, out) = (ws.p("train.tsv"), ws.p("feat"));
    let run = memts(&["features", "--data", &data, "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let csv = fs::read_to_string(ws.path("feat/features.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0].split(',').count(), 9);
    assert!(lines[1..].iter().all(|l| l.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite())));
}

#[test]
fn gradcheck_default_config_exits_zero() {
    let ws = Workspace::new();
    let out = ws.p("gc");
    let run = memts(&["gradcheck", "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(String::from_utf8_lossy(&run.stdout).contains("PASS"));
    let run = memts(&["gradcheck", "--tol", "1e-300", "--max-per-param", "2", "--out", &out]);
    assert_eq!(code(&run), 1);
}

#[test]
fn bench_writes_a_table() {
    let ws = Workspace::new();
    let out = ws.p("bn");
    let run = memts(&["bench", "--lengths", "8,16", "--runs", "2", "--out", &out]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let csv = fs::read_to_string(ws.path("bn/bench.csv")).unwrap();
    assert!(csv.starts_with("model,length,median_ms,flops,ratio_vs_half\nencoder,8,"));
}

#[test]
fn usage_and_config_errors_exit_two_before_work() {
    let ws = Workspace::new();
    let test = ws.p("test.tsv");
    let out = ws.p("never");
    // missing --train
    let run = memts(&["finetune", "--test", &test, "--out", &out]);
    assert_eq!(code(&run), 2);
    let (train, cfg) = (ws.p("train.tsv"), ws.p("tiny.cfg"));
    let run = memts(&["pretrain", "--corpus", &train, "--synthetic", "4", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&run), 2);
    ws.write("bad.cfg", "d_modle = 8\n");
    let bad = ws.p("bad.cfg");
    let run = memts(&["finetune", "--train", &train, "--test", &test, "--config", &bad, "--out", &out]);
    assert_eq!(code(&run), 2);
    assert_eq!(stderr(&run).lines().count(), 1, "{}", stderr(&run));
    assert!(stderr(&run).starts_with("error: configuration error"));
    let run = memts(&["finetune", "--train", &train, "--test", &test, "--preset", "huge", "--out", &out]);
    assert_eq!(code(&run), 2);
    assert!(!ws.path("never").exists());
}

#[test]
fn data_errors_exit_three() {
    let ws = Workspace::new();
    ws.write("broken.tsv", "0\t1.0\t2.0\n1\t1.0\n");
    let (broken, test, cfg, out) = (ws.p("broken.tsv"), ws.p("test.tsv"), ws.p("tiny.cfg"), ws.p("o"));
    let run = memts(&["finetune", "--train", &broken, "--test", &test, "--config", &cfg, "--out", &out]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
    assert!(stderr(&run).contains("line 2"), "{}", stderr(&run));
    let missing = ws.p("nope.tsv");
    let run = memts(&["features", "--data", &missing, "--out", &out]);
    assert_eq!(code(&run), 3);
    let run = memts(&["eval", "--test", &test, "--checkpoint", &missing, "--out", &out]);
    assert_eq!(code(&run), 3);
    ws.write("garbage.bin", "not a checkpoint");
    let garbage = ws.p("garbage.bin");
    let run = memts(&["eval", "--test", &test, "--checkpoint", &garbage, "--out", &out]);
    assert_eq!(code(&run), 3);
}

#[test]
fn divergence_exits_four() {
    let ws = Workspace::new();
    ws.write("hot.cfg", &format!("{TINY}pretrain_lr = 1e200\ngrad_clip = 0\n"));
    let (cfg, out) = (ws.p("hot.cfg"), ws.p("hot"));
    let run = memts(&["pretrain", "--synthetic", "16", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&run), 4, "{}", stderr(&run));
    assert!(stderr(&run).contains("numeric divergence"));
}
