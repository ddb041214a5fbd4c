//! The five subcommands: generate, train, eval, assess, selfcheck.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sonoqa_core::anatomy::{section_structures, Section};
use sonoqa_core::eval::{evaluate, EvalSample, MetricSummary};
use sonoqa_core::model::{prepare_image, Model, ModelConfig};
use sonoqa_core::phantom::{DatasetConfig, Split};
use sonoqa_core::report::{annotate, assess, QualityReport};
use sonoqa_core::selfcheck;
use sonoqa_core::trainer::{train, TrainConfig, TrainLog, TrainSample, TrainState};
use sonoqa_core::Real;

use crate::checkpoint::{self, Checkpoint, Precision};
use crate::dataset::{self, LoadedSample};
use crate::imageio;
use crate::{CliError, CliResult};

fn log_resolved<T: Serialize>(name: &str, options: &T) {
    match serde_json::to_string(options) {
        Ok(json) => println!("resolved {name} config: {json}"),
        Err(e) => println!("resolved {name} config unprintable: {e}"),
    }
}

// ---- generate -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GenerateOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub format: String,
    pub dataset: DatasetConfig,
}

pub fn cmd_generate(opts: &GenerateOptions) -> CliResult<()> {
    log_resolved("generate", opts);
    let manifest = dataset::write_dataset(&opts.dataset, opts.seed, &opts.out, &opts.format)?;
    let standard = manifest.samples.len();
    println!(
        "wrote {} samples ({} head / {} abdominal / {} heart) to {}",
        standard,
        opts.dataset.head,
        opts.dataset.abdominal,
        opts.dataset.heart,
        opts.out.display()
    );
    Ok(())
}

// ---- train --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
}

pub const CHECKPOINT_NAME: &str = "checkpoint.json";
pub const TRAIN_LOG_NAME: &str = "train_log.csv";

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_train_log(path: &Path, log: &TrainLog) -> CliResult<()> {
    let mut csv = String::from(
        "epoch,learning_rate,objectness,box_regression,classification,quality,total,val_map,val_verdict_accuracy\n",
    );
    for e in &log.epochs {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.learning_rate,
            e.objectness,
            e.box_regression,
            e.classification,
            e.quality,
            e.total,
            csv_opt(e.val_map),
            csv_opt(e.val_verdict_accuracy),
        ));
    }
    fs::write(path, csv)?;
    Ok(())
}

fn run_training<T: Real>(
    opts: &TrainOptions,
    mut model: Model<T>,
    resume_state: Option<TrainState<T>>,
    train_samples: Vec<TrainSample>,
    val_samples: Vec<EvalSample>,
) -> CliResult<()> {
    let ckpt_path = opts.out.join(CHECKPOINT_NAME);
    let precision = opts.precision;
    let mut callback = |stats: &sonoqa_core::trainer::EpochStats,
                        m: &Model<T>,
                        state: &TrainState<T>|
     -> sonoqa_core::Result<()> {
        println!(
            "epoch {:>3}  lr {:.4}  total {:.4}  obj {:.4}  box {:.4}  cls {:.4}  qual {:.4}  val mAP {}  val verdict {}",
            stats.epoch,
            stats.learning_rate,
            stats.total,
            stats.objectness,
            stats.box_regression,
            stats.classification,
            stats.quality,
            csv_opt(stats.val_map),
            csv_opt(stats.val_verdict_accuracy),
        );
        let snap = checkpoint::snapshot(m, precision, state.next_epoch, Some(state));
        checkpoint::save(&ckpt_path, &snap).map_err(|e| sonoqa_core::Error::Data(e.to_string()))
    };
    let val_ref = (!val_samples.is_empty()).then_some(val_samples.as_slice());
    let (log, _state) = train(
        &mut model,
        &train_samples,
        val_ref,
        &opts.train,
        resume_state,
        Some(&mut callback),
    )?;
    write_train_log(&opts.out.join(TRAIN_LOG_NAME), &log)?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

pub fn cmd_train(opts: &TrainOptions) -> CliResult<()> {
    log_resolved("train", opts);
    opts.train.validate()?;
    opts.model.validate()?;
    fs::create_dir_all(&opts.out)?;

    let manifest = dataset::read_manifest(&opts.data)?;
    let loaded_train = dataset::load_split(&opts.data, &manifest, Some(Split::Train))?;
    let loaded_val = dataset::load_split(&opts.data, &manifest, Some(Split::Val))?;
    if loaded_train.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }
    println!("loaded {} train / {} val samples", loaded_train.len(), loaded_val.len());

    match opts.precision {
        Precision::F32 => {
            let (model, state) = match &opts.resume {
                Some(path) => {
                    let ckpt = checkpoint::load(path)?;
                    if ckpt.precision != Precision::F32 {
                        return Err(CliError::Usage(
                            "checkpoint precision does not match --precision".into(),
                        ));
                    }
                    let (m, s) = checkpoint::restore::<f32>(&ckpt)?;
                    println!("resuming from epoch {}", ckpt.epoch);
                    (m, s)
                }
                None => (Model::<f32>::init(opts.model.clone(), opts.seed)?, None),
            };
            let train_samples = prepare_train_samples(&model.config, &loaded_train)?;
            let val_samples: Vec<EvalSample> =
                loaded_val.into_iter().map(|l| l.sample).collect();
            run_training(opts, model, state, train_samples, val_samples)
        }
        Precision::F64 => {
            let (model, state) = match &opts.resume {
                Some(path) => {
                    let ckpt = checkpoint::load(path)?;
                    if ckpt.precision != Precision::F64 {
                        return Err(CliError::Usage(
                            "checkpoint precision does not match --precision".into(),
                        ));
                    }
                    let (m, s) = checkpoint::restore::<f64>(&ckpt)?;
                    println!("resuming from epoch {}", ckpt.epoch);
                    (m, s)
                }
                None => (Model::<f64>::init(opts.model.clone(), opts.seed)?, None),
            };
            let train_samples = prepare_train_samples(&model.config, &loaded_train)?;
            let val_samples: Vec<EvalSample> =
                loaded_val.into_iter().map(|l| l.sample).collect();
            run_training(opts, model, state, train_samples, val_samples)
        }
    }
}

fn prepare_train_samples(
    config: &ModelConfig,
    loaded: &[LoadedSample],
) -> CliResult<Vec<TrainSample>> {
    loaded
        .iter()
        .map(|l| {
            Ok(TrainSample {
                image: prepare_image(&config.preprocess, &l.sample.image)?,
                section: l.section,
                annotations: l.sample.annotations.clone(),
            })
        })
        .collect()
}

// ---- eval ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub out: PathBuf,
}

pub const METRICS_NAME: &str = "metrics.json";
pub const AP_TABLE_NAME: &str = "ap_table.csv";
pub const TIMING_NAME: &str = "timing.json";

fn ap_table_csv(summary: &MetricSummary) -> String {
    let mut out = String::new();
    for sec in &summary.sections {
        let classes: Vec<&str> =
            section_structures(sec.section).iter().map(|s| s.abbrev).collect();
        out.push_str(&format!("section,{},mAP\n", classes.join(",")));
        let aps: Vec<String> = sec
            .per_class_ap
            .iter()
            .map(|c| c.ap.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        out.push_str(&format!(
            "{},{},{}\n",
            sec.section,
            aps.join(","),
            csv_opt(sec.map)
        ));
    }
    out
}

fn run_eval<T: Real>(model: &Model<T>, opts: &EvalOptions) -> CliResult<()> {
    let manifest = dataset::read_manifest(&opts.data)?;
    let loaded = dataset::load_split(&opts.data, &manifest, Some(opts.split))?;
    if loaded.is_empty() {
        return Err(CliError::Data(format!("split '{}' has no samples", opts.split.as_str())));
    }
    let samples: Vec<EvalSample> = loaded.into_iter().map(|l| l.sample).collect();
    let started = Instant::now();
    let summary = evaluate(model, &samples)?;
    let seconds = started.elapsed().as_secs_f64();

    fs::create_dir_all(&opts.out)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Data(format!("metrics encode: {e}")))?;
    fs::write(opts.out.join(METRICS_NAME), json)?;
    fs::write(opts.out.join(AP_TABLE_NAME), ap_table_csv(&summary))?;
    fs::write(
        opts.out.join(TIMING_NAME),
        serde_json::to_string_pretty(&serde_json::json!({
            "eval_seconds": seconds,
            "images": samples.len(),
        }))
        .expect("timing json"),
    )?;

    for sec in &summary.sections {
        println!(
            "{}: {} images, mAP {}, verdict accuracy {}, AUC {}",
            sec.section,
            sec.n_images,
            csv_opt(sec.map),
            csv_opt(sec.verdict_accuracy),
            csv_opt(sec.quality.as_ref().and_then(|q| q.auc)),
        );
    }
    println!(
        "overall: mAP {}, verdict accuracy {} ({} images, {seconds:.1}s)",
        csv_opt(summary.overall.map),
        csv_opt(summary.overall.verdict_accuracy),
        summary.overall.n_images,
    );
    Ok(())
}

pub fn cmd_eval(opts: &EvalOptions) -> CliResult<()> {
    log_resolved("eval", opts);
    let ckpt = checkpoint::load(&opts.checkpoint)?;
    match ckpt.precision {
        Precision::F32 => run_eval(&checkpoint::restore::<f32>(&ckpt)?.0, opts),
        Precision::F64 => run_eval(&checkpoint::restore::<f64>(&ckpt)?.0, opts),
    }
}

// ---- assess -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AssessOptions {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub section: Section,
    pub out: PathBuf,
}

pub const REPORT_NAME: &str = "report.json";
pub const ANNOTATED_NAME: &str = "annotated.png";

fn run_assess<T: Real>(model: &Model<T>, opts: &AssessOptions) -> CliResult<QualityReport> {
    let image = imageio::read_image(&opts.image)?;
    let started = Instant::now();
    let mut report = assess(model, &image, opts.section)?;
    report.timing_s = started.elapsed().as_secs_f64();

    fs::create_dir_all(&opts.out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("report encode: {e}")))?;
    fs::write(opts.out.join(REPORT_NAME), json)?;
    imageio::write_png(&opts.out.join(ANNOTATED_NAME), &annotate(&image, &report))?;

    for s in &report.structures {
        println!(
            "{:<4} {}  detected={} confidence={:.3} quality={:.3}",
            s.id, s.flag, s.detected, s.confidence, s.quality_prob
        );
    }
    println!("verdict: {}  ({:.3}s)", report.verdict.as_str(), report.timing_s);
    Ok(report)
}

pub fn cmd_assess(opts: &AssessOptions) -> CliResult<QualityReport> {
    log_resolved("assess", opts);
    let ckpt = checkpoint::load(&opts.checkpoint)?;
    match ckpt.precision {
        Precision::F32 => run_assess(&checkpoint::restore::<f32>(&ckpt)?.0, opts),
        Precision::F64 => run_assess(&checkpoint::restore::<f64>(&ckpt)?.0, opts),
    }
}

// ---- selfcheck ----------------------------------------------------------------

pub fn cmd_selfcheck(seed: u64) -> CliResult<()> {
    println!("resolved selfcheck config: {{\"seed\":{seed}}}");
    let started = Instant::now();
    let outcomes = selfcheck::run_all(seed)?;
    let mut all_ok = true;
    for o in &outcomes {
        println!("[{}] {} — {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        all_ok &= o.passed;
    }
    println!("selfcheck finished in {:.1}s", started.elapsed().as_secs_f64());
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Numeric("selfcheck failed".into()))
    }
}

/// Helper shared by eval/assess paths and tests: restore any-precision
/// model and hand it to a monomorphic closure.
pub fn with_model<R>(
    ckpt: &Checkpoint,
    f32_path: impl FnOnce(Model<f32>) -> CliResult<R>,
    f64_path: impl FnOnce(Model<f64>) -> CliResult<R>,
) -> CliResult<R> {
    match ckpt.precision {
        Precision::F32 => f32_path(checkpoint::restore::<f32>(ckpt)?.0),
        Precision::F64 => f64_path(checkpoint::restore::<f64>(ckpt)?.0),
    }
}

/// Per-section sample counts of a dataset config (used by the argv layer).
pub fn counts_by_section(count: usize, sections: &[Section]) -> (usize, usize, usize) {
    let has = |s: Section| if sections.contains(&s) { count } else { 0 };
    (has(Section::Head), has(Section::Abdominal), has(Section::Heart))
}
