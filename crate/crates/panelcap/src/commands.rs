//! The `synth`, `train`, `infer`, `eval-cap` and `eval-det` commands.
//!
//! Each command returns its result together with warnings; the binary exits
//! with 0 when there are none, 2 when the command finished with warnings
//! (skipped records, ignored config keys, missing predictions) and 1 on error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use panelcap_core::captioner::Vocab;
use panelcap_core::checkpoint::{self, Checkpoint};
use panelcap_core::datagen::{make_dataset, stats, FigureRecord};
use panelcap_core::detection::{compute_map, default_thresholds, ScoredBox};
use panelcap_core::eval::{aggregate, align_occurrences, FigureEvalRecord};
use panelcap_core::model::{infer, FigModel};
use panelcap_core::structured::parse_structured;
use panelcap_core::training::{run_stage, StepLog, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{self, TrainConfig};
use crate::dataset::{read_split, write_dataset, StatsRow};
use crate::predictions::{read_predictions, write_predictions, PredictionRecord};
use crate::report::{CaptionReport, DetectionReport, Format, StatsReport};
use crate::{io_err, Error, Result};

/// A command's value plus everything that should make the exit code nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory for `train.jsonl`, `val.jsonl`, `test.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Distractor textures and near-synonym captions.
    #[arg(long)]
    pub hard: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

pub fn synth(args: &SynthArgs) -> Result<Outcome<StatsReport>> {
    let ds = make_dataset(args.train, args.val, args.test, args.seed, args.hard)?;
    write_dataset(&args.out, &ds)?;
    let report = StatsReport {
        splits: stats(&ds).iter().map(StatsRow::from).collect(),
    };
    let path = args.out.join("stats.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(io_err(&path))?;
    Ok(Outcome {
        value: report,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Stage to run; stages 2 to 4 start from the previous stage's checkpoint.
    #[arg(long)]
    pub stage: u8,
    /// Training split JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory holding `stageN.ckpt`, `manifest.json` and `metrics.jsonl`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// TOML or JSON file with training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "lambda-text-ce")]
    pub lambda_text_ce: Option<f64>,
    #[arg(long = "lambda-det")]
    pub lambda_det: Option<f64>,
    #[arg(long = "lambda-rl")]
    pub lambda_rl: Option<f64>,
    #[arg(long = "rl-w-bert")]
    pub rl_w_bert: Option<f64>,
    #[arg(long = "rl-w-clip")]
    pub rl_w_clip: Option<f64>,
    #[arg(long = "top-p")]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long = "max-new-tokens-rl")]
    pub max_new_tokens_rl: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "grad-accum")]
    pub grad_accum: Option<usize>,
}

impl TrainArgs {
    /// Config file values overridden by flags.
    pub fn resolve(&self) -> Result<config::Loaded> {
        let mut loaded = match &self.config {
            Some(p) => config::load(p)?,
            None => config::Loaded {
                config: TrainConfig::default(),
                warnings: Vec::new(),
            },
        };
        let c = &mut loaded.config;
        macro_rules! over {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        over!(lambda_text_ce, lambda_det, lambda_rl, rl_w_bert, rl_w_clip, top_p, temperature, max_new_tokens_rl, seed, batch_size, grad_accum);
        if self.steps.is_some() {
            c.steps = self.steps;
        }
        if self.lr.is_some() {
            c.lr = self.lr;
        }
        Ok(loaded)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub checkpoint: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub steps: usize,
    pub seconds: f64,
    pub final_loss: f64,
}

/// `manifest.json` in a run directory, keyed by stage number.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

pub fn checkpoint_path(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join(format!("stage{stage}.ckpt"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(checkpoint::decode(&bytes)?)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint::encode(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Vocabulary of caption words in first-seen order.
pub fn build_vocab(figures: &[FigureRecord]) -> Vocab {
    let words: Vec<&str> = figures
        .iter()
        .flat_map(|f| f.panels.iter().flat_map(|p| p.caption.split_whitespace()))
        .collect();
    Vocab::new(words)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub logs: Vec<StepLog>,
    pub config: TrainConfig,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    stage: u8,
    step: u64,
    loss: f64,
    l_cap: f64,
    l_det: f64,
    l_rl: f64,
    reward_sample: f64,
    reward_greedy: f64,
    grad_norm: f64,
    lr: f64,
    config_hash: &'a str,
}

pub fn train(args: &TrainArgs) -> Result<Outcome<TrainSummary>> {
    let loaded = args.resolve()?;
    let mut warnings = loaded.warnings;
    let cfg = loaded.config;
    let stage_cfg = cfg.stage_config(args.stage)?;
    let data = read_split(&args.data)?;
    warnings.extend(data.skipped.iter().map(|s| format!("skipped record {s}")));
    if data.items.is_empty() {
        return Err(Error::Invalid(format!("{} has no usable records", args.data.display())));
    }
    fs::create_dir_all(&args.run_dir).map_err(io_err(&args.run_dir))?;

    let (model, mut state) = if args.stage == 1 {
        let (model, store) = FigModel::new(cfg.model_config(), build_vocab(&data.items), cfg.seed)?;
        (model, TrainState::new(store, cfg.seed))
    } else {
        let prev = checkpoint_path(&args.run_dir, args.stage - 1);
        if !prev.exists() {
            return Err(Error::Invalid(format!(
                "stage {} starts from {}, which does not exist; run `panelcap train --stage {}` with the same --run-dir first",
                args.stage,
                prev.display(),
                args.stage - 1
            )));
        }
        let ckpt = load_checkpoint(&prev)?;
        (ckpt.model()?, ckpt.state)
    };

    let started = Instant::now();
    let logs = run_stage(&model, &mut state, &stage_cfg, &data.items)?;
    let seconds = started.elapsed().as_secs_f64();

    let ckpt_path = checkpoint_path(&args.run_dir, args.stage);
    let ckpt = Checkpoint {
        config: model.config,
        vocab: model.vocab.clone(),
        state,
    };
    save_checkpoint(&ckpt_path, &ckpt)?;
    let vocab_path = args.run_dir.join("vocab.json");
    fs::write(&vocab_path, serde_json::to_vec(model.vocab.tokens())?).map_err(io_err(&vocab_path))?;

    let hash = cfg.hash();
    let metrics_path = args.run_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    for l in &logs {
        let line = MetricsLine {
            stage: l.stage,
            step: l.step,
            loss: l.loss,
            l_cap: l.l_cap,
            l_det: l.l_det,
            l_rl: l.l_rl,
            reward_sample: l.reward_sample,
            reward_greedy: l.reward_greedy,
            grad_norm: l.grad_norm,
            lr: l.lr,
            config_hash: &hash,
        };
        serde_json::to_writer(&mut metrics, &line)?;
        metrics.write_all(b"\n").map_err(io_err(&metrics_path))?;
    }

    let manifest_path = args.run_dir.join("manifest.json");
    let mut manifest: Manifest = match fs::read(&manifest_path) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(_) => Manifest::default(),
    };
    manifest.stages.insert(
        args.stage.to_string(),
        StageEntry {
            checkpoint: ckpt_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            config_hash: hash,
            config: serde_json::to_value(&cfg)?,
            steps: logs.len(),
            seconds,
            final_loss: logs.last().map_or(0.0, |l| l.loss),
        },
    );
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&manifest_path))?;

    Ok(Outcome {
        value: TrainSummary {
            checkpoint: ckpt_path,
            logs,
            config: cfg,
        },
        warnings,
    })
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset split JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "max-new-tokens", default_value_t = 127)]
    pub max_new_tokens: usize,
    /// Zero the gated modulation before inference.
    #[arg(long)]
    pub no_gate: bool,
}

pub fn infer_cmd(args: &InferArgs) -> Result<Outcome<Vec<PredictionRecord>>> {
    let mut ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    if args.no_gate {
        model.detector.fusion.disable_gate(&mut ckpt.state.store);
    }
    let data = read_split(&args.data)?;
    let mut warnings: Vec<String> = data.skipped.iter().map(|s| format!("skipped record {s}")).collect();
    let mut records = Vec::with_capacity(data.items.len());
    for f in &data.items {
        match infer(&model, &ckpt.state.store, &f.image, args.max_new_tokens) {
            Ok(p) => records.push(PredictionRecord::from_prediction(&f.figure_id, &p)),
            Err(e) => warnings.push(format!("{}: {e}", f.figure_id)),
        }
    }
    write_predictions(&args.out, &records)?;
    Ok(Outcome {
        value: records,
        warnings,
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground-truth split JSONL.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions JSONL.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Paired {
    gt: Vec<FigureRecord>,
    preds: Vec<Option<PredictionRecord>>,
    missing: usize,
    skipped: usize,
    warnings: Vec<String>,
}

fn pair_up(args: &EvalArgs) -> Result<Paired> {
    let gt = read_split(&args.gt)?;
    let pred = read_predictions(&args.pred)?;
    let mut warnings: Vec<String> = gt.skipped.iter().chain(&pred.skipped).map(|s| format!("skipped record {s}")).collect();
    let mut by_id: BTreeMap<String, PredictionRecord> = pred.items.into_iter().map(|p| (p.figure_id.clone(), p)).collect();
    let preds: Vec<Option<PredictionRecord>> = gt.items.iter().map(|f| by_id.remove(&f.figure_id)).collect();
    let missing = preds.iter().filter(|p| p.is_none()).count();
    if missing > 0 {
        warnings.push(format!("{missing} figures have no prediction and score 0"));
    }
    if !by_id.is_empty() {
        warnings.push(format!("{} predictions match no ground-truth figure", by_id.len()));
    }
    Ok(Paired {
        skipped: gt.skipped.len() + pred.skipped.len() + by_id.len(),
        gt: gt.items,
        preds,
        missing,
        warnings,
    })
}

fn emit(out: &Option<PathBuf>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(io_err(p))?;
            write(&mut f)
        }
        None => write(&mut std::io::stdout().lock()),
    }
}

pub fn caption_report(args: &EvalArgs) -> Result<Outcome<CaptionReport>> {
    let p = pair_up(args)?;
    let mut records = Vec::with_capacity(p.gt.len());
    let mut parsed = 0usize;
    for (f, pred) in p.gt.iter().zip(&p.preds) {
        let structured = pred.as_ref().map(|r| parse_structured(&r.raw_output)).unwrap_or_default();
        if !structured.is_empty() && structured.det_terminated {
            parsed += 1;
        }
        records.push(FigureEvalRecord::new(&f.figure_id, align_occurrences(&f.captions(), &structured)));
    }
    let agg = aggregate(&records)?;
    let parse_rate = parsed as f64 / p.gt.len() as f64;
    let mut warnings = p.warnings;
    if agg.skipped > 0 {
        warnings.push(format!("{} figures without ground-truth panels excluded", agg.skipped));
    }
    Ok(Outcome {
        value: CaptionReport::new(&records, &agg, parse_rate, p.missing, p.skipped),
        warnings,
    })
}

pub fn eval_cap(args: &EvalArgs) -> Result<Outcome<CaptionReport>> {
    let o = caption_report(args)?;
    emit(&args.out, |w| crate::report::write_caption(w, &o.value, args.format))?;
    Ok(o)
}

pub fn detection_report(args: &EvalArgs) -> Result<Outcome<DetectionReport>> {
    let mut p = pair_up(args)?;
    let mut all_preds = Vec::with_capacity(p.gt.len());
    let mut bad = 0usize;
    for pred in &p.preds {
        let mut boxes: Vec<ScoredBox> = Vec::new();
        for d in pred.iter().flat_map(|r| &r.detections) {
            match d.to_scored() {
                Ok(b) => boxes.push(b),
                Err(_) => bad += 1,
            }
        }
        all_preds.push(boxes);
    }
    if bad > 0 {
        p.warnings.push(format!("{bad} malformed detections skipped"));
    }
    let gts: Vec<_> = p.gt.iter().map(|f| f.panels.iter().map(|a| (a.label, a.bbox)).collect()).collect();
    let thresholds = default_thresholds();
    let m = compute_map(&all_preds, &gts, &thresholds);
    if m.no_ground_truth {
        p.warnings.push("no ground-truth panels; mAP reported as 0".into());
    }
    Ok(Outcome {
        value: DetectionReport::new(&m, &thresholds, p.gt.len(), p.missing, p.skipped + bad),
        warnings: p.warnings,
    })
}

pub fn eval_det(args: &EvalArgs) -> Result<Outcome<DetectionReport>> {
    let o = detection_report(args)?;
    emit(&args.out, |w| crate::report::write_detection(w, &o.value, args.format))?;
    Ok(o)
}
