//! The batch commands. Each validates its inputs before computing, writes
//! its artifacts and a run manifest into `--out`, and returns a summary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use memts::data::{load_split, load_tsv, synth_corpus, Dataset, LabelMap, SynthKind};
use memts::hope::checkpoint::Checkpoint;
use memts::model::{parse_meta, Model, RunConfig};
use memts::numerics::RngState;
use memts::statfeatures::{features, to_csv};
use memts::trainer::{evaluate, finetune, pretrain, test_row, tags, EvalReport, MetricsLog};
use memts::{Error, Result};

use crate::bench::{run_bench, BenchReport, DEFAULT_LENGTHS, DEFAULT_RUNS};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const FEATURES_FILE: &str = "features.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const BENCH_FILE: &str = "bench.csv";

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// File of `key = value` settings applied over the preset
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: `desk` (small, single core) or `full`
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

impl Default for ConfigArgs {
    fn default() -> Self {
        Self { config: None, preset: "desk".into() }
    }
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let base = RunConfig::preset(&self.preset)?;
        let cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::parse(&text, base)?
            }
            None => base,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug)]
pub struct PretrainArgs {
    /// Label-first TSV of unlabeled series (labels are ignored)
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Generate this many synthetic series instead of reading a corpus
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Pretrained checkpoint; the encoder starts from scratch without one
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct FeaturesArgs {
    /// Label-first TSV of series
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Elements checked per tensor (0 checks all)
    #[arg(long, default_value_t = 0)]
    pub max_per_param: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Patch-token counts to time
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS)]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn require_file(role: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Format(format!("{role} file {} does not exist", path.display())))
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", out.display()))))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub report: Option<EvalReport>,
    pub manifest: RunManifest,
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<TrainOutcome> {
    let cfg = args.config.load()?;
    if let Some(path) = &args.corpus {
        require_file("corpus", path)?;
    }
    let seed = RngState::new(args.seed);
    let mut manifest = RunManifest::new("pretrain", args.seed, Some(&cfg));
    let corpus = match (&args.corpus, args.synthetic) {
        (Some(path), None) => {
            let raw = load_tsv(path)?;
            manifest.add_input_file("corpus", path)?;
            Dataset::from_series(&raw.series, vec![0; raw.series.len()], 1, cfg.model.input_len)?
        }
        (None, Some(n)) => {
            manifest.add_input_text("corpus", &format!("synthetic:{n}"));
            synth_corpus(&SynthKind::ALL, n, cfg.model.input_len, &mut seed.split(tags::DATA).rng())?
        }
        _ => return Err(Error::Config("pass exactly one of --corpus and --synthetic".into())),
    };
    prepare_out(&args.out)?;
    let mut model = Model::init(&cfg.model, &mut seed.split(tags::INIT).rng())?;
    let log = pretrain(&mut model, &corpus, &cfg.train, &seed)?;
    manifest.write_output(&args.out, CHECKPOINT_FILE, &model.to_checkpoint("stage = pretrain\n").to_bytes())?;
    manifest.write_output(&args.out, METRICS_FILE, log.to_csv().as_bytes())?;
    manifest.write_output(&args.out, CONFIG_FILE, cfg.to_kv().as_bytes())?;
    manifest.write(&args.out)?;
    Ok(TrainOutcome { log, report: None, manifest })
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<TrainOutcome> {
    let cfg = args.config.load()?;
    require_file("train", &args.train)?;
    require_file("test", &args.test)?;
    let seed = RngState::new(args.seed);
    let mut model = Model::init(&cfg.model, &mut seed.split(tags::INIT).rng())?;
    let mut manifest = RunManifest::new("finetune", args.seed, Some(&cfg));
    if let Some(path) = &args.checkpoint {
        require_file("checkpoint", path)?;
        model.load_backbone(&Model::from_checkpoint(&Checkpoint::load(path)?)?)?;
        manifest.add_input_file("checkpoint", path)?;
    }
    let split = load_split(&dataset_name(&args.train), &args.train, &args.test, cfg.model.input_len)?;
    manifest.add_input_file("train", &args.train)?;
    manifest.add_input_file("test", &args.test)?;
    prepare_out(&args.out)?;
    let mut log = finetune(&mut model, &split.train, &cfg.train, &seed)?;
    let report = evaluate(&model, &split.test)?;
    log.rows.push(test_row(&report));
    let meta = format!("stage = finetune\nlabels = {}\n", split.labels.describe());
    manifest.write_output(&args.out, CHECKPOINT_FILE, &model.to_checkpoint(&meta).to_bytes())?;
    manifest.write_output(&args.out, METRICS_FILE, log.to_csv().as_bytes())?;
    manifest.write_output(&args.out, REPORT_FILE, report.to_text().as_bytes())?;
    manifest.write_output(&args.out, CONFIG_FILE, cfg.to_kv().as_bytes())?;
    manifest.write(&args.out)?;
    Ok(TrainOutcome { log, report: Some(report), manifest })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, RunManifest)> {
    require_file("test", &args.test)?;
    require_file("checkpoint", &args.checkpoint)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let head = model.head().map_err(|_| Error::Config("checkpoint has no classifier; run finetune first".into()))?;
    let labels_text = parse_meta(&ck.meta)
        .into_iter()
        .find(|(k, _)| k == "labels")
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Format("checkpoint metadata lacks the label mapping".into()))?;
    let labels = LabelMap::parse(&labels_text)?;
    if labels.num_classes() != head.num_classes() {
        return Err(Error::Format(format!(
            "label mapping has {} classes, classifier {}",
            labels.num_classes(),
            head.num_classes()
        )));
    }
    let raw = load_tsv(&args.test)?;
    let y = labels.encode(&raw.labels)?;
    let test = Dataset::from_series(&raw.series, y, labels.num_classes(), model.config.input_len)?;
    prepare_out(&args.out)?;
    let report = evaluate(&model, &test)?;
    let mut manifest = RunManifest::new("eval", 0, None);
    manifest.add_input_file("test", &args.test)?;
    manifest.add_input_file("checkpoint", &args.checkpoint)?;
    manifest.write_output(&args.out, REPORT_FILE, report.to_text().as_bytes())?;
    manifest.write(&args.out)?;
    Ok((report, manifest))
}

/// Features of each series as given (no length alignment).
pub fn cmd_features(args: &FeaturesArgs) -> Result<(usize, RunManifest)> {
    require_file("data", &args.data)?;
    let raw = load_tsv(&args.data)?;
    let rows: Vec<_> = raw.series.iter().map(|s| features(s).values).collect();
    prepare_out(&args.out)?;
    let mut manifest = RunManifest::new("features", 0, None);
    manifest.add_input_file("data", &args.data)?;
    manifest.write_output(&args.out, FEATURES_FILE, to_csv(&rows).as_bytes())?;
    manifest.write(&args.out)?;
    Ok((rows.len(), manifest))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(GradcheckReport, RunManifest)> {
    let cfg = args.config.load()?;
    let cap = (args.max_per_param > 0).then_some(args.max_per_param);
    let report = run_gradcheck(&cfg, args.tol, cap, args.seed)?;
    prepare_out(&args.out)?;
    let mut manifest = RunManifest::new("gradcheck", args.seed, Some(&cfg));
    manifest.write_output(&args.out, GRADCHECK_FILE, report.to_text().as_bytes())?;
    manifest.write(&args.out)?;
    Ok((report, manifest))
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(BenchReport, RunManifest)> {
    let cfg = args.config.load()?;
    let report = run_bench(&cfg, &args.lengths, args.runs, args.seed)?;
    prepare_out(&args.out)?;
    let mut manifest = RunManifest::new("bench", args.seed, Some(&cfg));
    manifest.write_output(&args.out, BENCH_FILE, report.to_csv().as_bytes())?;
    manifest.write(&args.out)?;
    Ok((report, manifest))
}
