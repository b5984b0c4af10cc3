//! `hmid` — the full pipeline in one binary: corpus generation, teacher
//! pretraining, student distillation, baselines, evaluation, ablation
//! presets, traversal demos, and the gradient battery.
//!
//! Every command exits 0 on success and nonzero with a one-line
//! machine-parsable error otherwise; config parse errors exit 3, usage
//! errors exit 2. Set `HMID_LOG=error|info|debug` to control progress
//! output on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hmid_core::datasynth::{generate_corpus, load_corpus, Corpus, Split};
use hmid_core::encoders::checkpoint::{self, CheckpointMeta};
use hmid_core::encoders::Model;
use hmid_core::eval::{
    geodesic_traversal, recall_from_tangents, retrieval_recall, val_recall_at_1,
    zero_shot_classify, EvalArtifact, RecallTable,
};
use hmid_core::gradcheck::gradient_battery;
use hmid_core::tensor::RawTensor;
use hmid_core::trainer::{
    check_teacher_gate, parse_config_file, save_model, train_loop, train_teacher, Objective,
    TrainConfig, TrainError, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "hmid", version, about = "Hyperbolic masked image distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Flat key=value config file; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    lambda_distill: Option<f64>,
    #[arg(long)]
    lambda_entail: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic hierarchical corpus.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Pretrain the 2x-width frozen teacher (no distillation) and record
    /// its validation recall gate.
    TrainTeacher(TrainArgs),
    /// Train a student with contrastive + entailment + distillation from a
    /// frozen teacher checkpoint.
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        /// Teacher checkpoint from train-teacher.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train a student without distillation (contrastive + entailment).
    TrainMeru(TrainArgs),
    /// Train the Euclidean cosine-similarity contrastive baseline.
    TrainClipBaseline(TrainArgs),
    /// Zero-shot classification into the corpus' category captions.
    EvalClassify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report (defaults next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired image-text retrieval, recall@{1,5,10} in both directions.
    EvalRetrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Walk validation images toward the root and print the caption ladder.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// How many validation images to traverse.
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mask-ratio sweep {0, 0.25, 0.5, 0.75}, no distillation.
    AblateMask(TrainArgs),
    /// The four loss-combination rows (a teacher supplies the distillation
    /// rows).
    AblateLoss {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Finite-difference gradient battery over every op and loss (f64).
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Random inputs per geometry op.
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

#[derive(PartialEq, PartialOrd, Clone, Copy)]
enum LogLevel {
    Error = 0,
    Info = 1,
    Debug = 2,
}

fn log_level() -> LogLevel {
    match std::env::var("HMID_LOG").as_deref() {
        Ok("error") => LogLevel::Error,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= LogLevel::Info {
            eprintln!($($arg)*);
        }
    };
}

macro_rules! debug {
    ($($arg:tt)*) => {
        if log_level() >= LogLevel::Debug {
            eprintln!($($arg)*);
        }
    };
}

// ---------------------------------------------------------------------------
// Error plumbing
// ---------------------------------------------------------------------------

struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 1,
        }
    }
}

macro_rules! cli_from {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError {
                    message: e.to_string(),
                    code: 1,
                }
            }
        }
    };
}

cli_from!(hmid_core::datasynth::SynthError);
cli_from!(hmid_core::encoders::EncoderError);
cli_from!(hmid_core::encoders::checkpoint::CheckpointError);
cli_from!(hmid_core::eval::EvalError);
cli_from!(hmid_core::losses::LossError);
cli_from!(hmid_core::masking::MaskError);
cli_from!(hmid_core::tensor::TensorError);
cli_from!(std::io::Error);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            // Config parse errors have their own exit code.
            TrainError::Config { .. } => 3,
            _ => 1,
        };
        CliError {
            message: e.to_string(),
            code,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn resolve_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::new(format!("reading config {}: {e}", path.display())))?;
            parse_config_file(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iters) = args.iters {
        config.max_iters = iters;
    }
    if let Some(batch) = args.batch {
        config.batch_size = batch;
    }
    if let Some(ratio) = args.mask_ratio {
        config.mask_ratio = ratio;
    }
    if let Some(ld) = args.lambda_distill {
        config.lambda_distill = ld;
    }
    if let Some(le) = args.lambda_entail {
        config.lambda_entail = le;
    }
    config.validate()?;
    Ok(config)
}

fn load_data(dir: &Path) -> CliResult<Corpus<f32>> {
    Ok(load_corpus::<f32>(dir)?)
}

fn load_model(path: &Path) -> CliResult<(Model<f32>, CheckpointMeta)> {
    Ok(checkpoint::load::<f32>(path)?)
}

fn meta_hash(meta: &CheckpointMeta) -> String {
    let json = serde_json::to_string(&meta.config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes().iter().chain(meta.seed.to_le_bytes().iter()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn finish_train(
    outcome: &TrainOutcome<f32>,
    config: &TrainConfig,
    corpus: &Corpus<f32>,
    role: &str,
) -> CliResult<f64> {
    let recall = val_recall_at_1(&outcome.model, corpus)?;
    save_model(&outcome.final_path, &outcome.model, config, role, Some(recall))?;
    info!(
        "{role}: done, config-hash {:016x}, val recall@1 {recall:.3}",
        config.config_hash()
    );
    info!(
        "  final: {}\n  best: {}\n  metrics: {}",
        outcome.final_path.display(),
        outcome.best_path.display(),
        outcome.metrics_path.display()
    );
    for m in &outcome.metrics {
        debug!(
            "  step {:>6} lr {:.2e} total {:.4} contr {:.4} distill {:.4} entail {:.4} tau {:.3} c {:.3}",
            m.step, m.lr, m.total, m.contrastive, m.distillation, m.entailment, m.tau, m.c
        );
    }
    Ok(recall)
}

fn val_images_and_captions(corpus: &Corpus<f32>) -> (Vec<&RawTensor<f32>>, Vec<&str>) {
    let val = corpus.indices(Split::Val);
    let images = val.iter().map(|&i| &corpus.samples[i].image).collect();
    let captions = val
        .iter()
        .map(|&i| corpus.samples[i].captions.specific.as_str())
        .collect();
    (images, captions)
}

/// Validation categories (mid captions), their per-image labels.
fn category_labels(corpus: &Corpus<f32>) -> (Vec<String>, Vec<usize>) {
    let val = corpus.indices(Split::Val);
    let mut classes: Vec<String> = val
        .iter()
        .map(|&i| corpus.samples[i].captions.mid.clone())
        .collect();
    classes.sort();
    classes.dedup();
    let labels = val
        .iter()
        .map(|&i| {
            classes
                .iter()
                .position(|c| *c == corpus.samples[i].captions.mid)
                .expect("class built from this sample")
        })
        .collect();
    (classes, labels)
}

fn classify_accuracy(model: &Model<f32>, corpus: &Corpus<f32>) -> CliResult<f64> {
    let val = corpus.indices(Split::Val);
    let (classes, labels) = category_labels(corpus);
    let refs: Vec<&str> = classes.iter().map(|s| s.as_str()).collect();
    let images: Vec<&RawTensor<f32>> = val.iter().map(|&i| &corpus.samples[i].image).collect();
    Ok(zero_shot_classify(model, &images, &labels, &refs)?.accuracy)
}

fn print_recall(table: &RecallTable) {
    println!(
        "direction      {}",
        table
            .ks
            .iter()
            .map(|k| format!("R@{k:<6}"))
            .collect::<String>()
    );
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:<8.3}")).collect::<String>();
    println!("image-to-text  {}", fmt(&table.image_to_text));
    println!("text-to-image  {}", fmt(&table.text_to_image));
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(n: usize, seed: u64, out: &Path, image_size: usize) -> CliResult<()> {
    let summary = generate_corpus(n, seed, image_size, out)?;
    println!(
        "generated {} samples ({} train / {} val) at {}",
        summary.n,
        summary.train,
        summary.val,
        out.display()
    );
    Ok(())
}

fn cmd_train_teacher(args: &TrainArgs) -> CliResult<()> {
    let config = resolve_config(args)?;
    let corpus = load_data(&args.data)?;
    info!("training teacher ({} iters, 2x width)...", config.max_iters);
    let (outcome, recall) = train_teacher(&config, &corpus, &args.out)?;
    println!(
        "teacher recall@1 {recall:.3} (gate {}), checkpoint {}",
        if recall >= hmid_core::trainer::TEACHER_RECALL_GATE {
            "met"
        } else {
            "NOT met"
        },
        outcome.final_path.display()
    );
    Ok(())
}

fn cmd_distill(args: &TrainArgs, teacher_path: &Path) -> CliResult<()> {
    let config = resolve_config(args)?;
    let corpus = load_data(&args.data)?;
    let (teacher, meta) = load_model(teacher_path)?;
    check_teacher_gate(&meta)?;
    info!(
        "distilling from {} (teacher recall@1 {:.3})...",
        teacher_path.display(),
        meta.val_recall_at_1.unwrap_or(f64::NAN)
    );
    let outcome = train_loop(
        &config,
        &corpus,
        Some(&teacher),
        Objective::Hyperbolic,
        "student-distilled",
        &args.out,
    )?;
    let recall = finish_train(&outcome, &config, &corpus, "student-distilled")?;
    println!("distilled student recall@1 {recall:.3}");
    Ok(())
}

fn cmd_train_meru(args: &TrainArgs) -> CliResult<()> {
    let mut config = resolve_config(args)?;
    // Without a teacher the distillation term is inert; zero its weight so
    // the config hash reflects what actually trained.
    config.lambda_distill = 0.0;
    let corpus = load_data(&args.data)?;
    let outcome = train_loop(
        &config,
        &corpus,
        None,
        Objective::Hyperbolic,
        "student-meru",
        &args.out,
    )?;
    let recall = finish_train(&outcome, &config, &corpus, "student-meru")?;
    println!("meru-mode student recall@1 {recall:.3}");
    Ok(())
}

fn cmd_train_clip(args: &TrainArgs) -> CliResult<()> {
    let mut config = resolve_config(args)?;
    if args.mask_ratio.is_none() {
        // The Euclidean baseline trains unmasked unless told otherwise.
        config.mask_ratio = 0.0;
    }
    let corpus = load_data(&args.data)?;
    let outcome = train_loop(
        &config,
        &corpus,
        None,
        Objective::EuclideanClip,
        "clip-baseline",
        &args.out,
    )?;
    // Score the baseline with its own geometry: cosine over tangents.
    let (images, captions) = val_images_and_captions(&corpus);
    let img_t = outcome.model.image_tangents(&images)?;
    let txt_t = outcome.model.text_tangents(&captions)?;
    let table = recall_from_tangents(&img_t, &txt_t, &[1])?;
    let recall = (table.image_to_text[0] + table.text_to_image[0]) / 2.0;
    save_model(
        &outcome.final_path,
        &outcome.model,
        &config,
        "clip-baseline",
        Some(recall),
    )?;
    println!("clip-baseline recall@1 (cosine) {recall:.3}");
    Ok(())
}

fn cmd_eval_classify(checkpoint_path: &Path, data: &Path, out: Option<&Path>) -> CliResult<()> {
    let (model, meta) = load_model(checkpoint_path)?;
    let corpus = load_data(data)?;
    let val = corpus.indices(Split::Val);
    let (classes, labels) = category_labels(&corpus);
    let refs: Vec<&str> = classes.iter().map(|s| s.as_str()).collect();
    let images: Vec<&RawTensor<f32>> = val.iter().map(|&i| &corpus.samples[i].image).collect();
    let report = zero_shot_classify(&model, &images, &labels, &refs)?;
    println!(
        "zero-shot accuracy {:.3} over {} classes ({} images)",
        report.accuracy,
        classes.len(),
        images.len()
    );
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path.with_extension("classify.json"));
    hmid_core::eval::write_json(
        &out_path,
        &EvalArtifact {
            task: "zero-shot-classify".into(),
            metrics: &report,
            config_hash: meta_hash(&meta),
            checkpoint_path: checkpoint_path.display().to_string(),
        },
    )?;
    info!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_eval_retrieve(checkpoint_path: &Path, data: &Path, out: Option<&Path>) -> CliResult<()> {
    let (model, meta) = load_model(checkpoint_path)?;
    let corpus = load_data(data)?;
    let (images, captions) = val_images_and_captions(&corpus);
    let table = if meta.role == "clip-baseline" {
        let img_t = model.image_tangents(&images)?;
        let txt_t = model.text_tangents(&captions)?;
        recall_from_tangents(&img_t, &txt_t, &[1, 5, 10])?
    } else {
        retrieval_recall(&model, &images, &captions, &[1, 5, 10])?
    };
    print_recall(&table);
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path.with_extension("retrieval.json"));
    hmid_core::eval::write_json(
        &out_path,
        &EvalArtifact {
            task: "retrieval".into(),
            metrics: &table,
            config_hash: meta_hash(&meta),
            checkpoint_path: checkpoint_path.display().to_string(),
        },
    )?;
    info!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_traverse(
    checkpoint_path: &Path,
    data: &Path,
    count: usize,
    steps: usize,
    out: Option<&Path>,
) -> CliResult<()> {
    let (model, _) = load_model(checkpoint_path)?;
    let corpus = load_data(data)?;
    let val = corpus.indices(Split::Val);
    // Pool: every caption level present in the validation split, deduped.
    let mut pool: Vec<String> = Vec::new();
    for &i in &val {
        let caps = &corpus.samples[i].captions;
        for c in [&caps.specific, &caps.mid, &caps.generic] {
            if !pool.contains(c) {
                pool.push(c.clone());
            }
        }
    }
    let pool_refs: Vec<&str> = pool.iter().map(|s| s.as_str()).collect();
    let mut lines = Vec::new();
    for &i in val.iter().take(count) {
        let sample = &corpus.samples[i];
        let ladder = geodesic_traversal(&model, &sample.image, &pool_refs, steps)?;
        lines.push(format!(
            "image {:>5} [{}]: {}",
            sample.id,
            sample.captions.specific,
            ladder.join("  ->  ")
        ));
    }
    let text = lines.join("\n");
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n"))
            .map_err(|e| CliError::new(format!("writing {}: {e}", path.display())))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate_mask(args: &TrainArgs) -> CliResult<()> {
    let base = resolve_config(args)?;
    let corpus = load_data(&args.data)?;
    println!("mask   recall@1(t2i)  recall@1(i2t)  accuracy");
    for ratio in [0.0, 0.25, 0.5, 0.75] {
        let mut config = base.clone();
        config.mask_ratio = ratio;
        config.lambda_distill = 0.0;
        let out = args.out.join(format!("mask-{:02}", (ratio * 100.0) as u32));
        let outcome = train_loop(
            &config,
            &corpus,
            None,
            Objective::Hyperbolic,
            "student-meru",
            &out,
        )?;
        let (images, captions) = val_images_and_captions(&corpus);
        let table = retrieval_recall(&outcome.model, &images, &captions, &[1])?;
        let acc = classify_accuracy(&outcome.model, &corpus)?;
        println!(
            "{:>4.0}%  {:<14.3} {:<14.3} {:.3}",
            ratio * 100.0,
            table.text_to_image[0],
            table.image_to_text[0],
            acc
        );
    }
    Ok(())
}

fn cmd_ablate_loss(args: &TrainArgs, teacher_path: &Path) -> CliResult<()> {
    let base = resolve_config(args)?;
    let corpus = load_data(&args.data)?;
    let (teacher, meta) = load_model(teacher_path)?;
    check_teacher_gate(&meta)?;

    // (mask ratio, entailment on, distillation on) — the four-row grid.
    let rows = [
        (0.0, true, false),
        (0.5, true, false),
        (0.5, false, true),
        (0.5, true, true),
    ];
    println!(
        "mask0  mask50  contrastive  entailment  distillation  recall@1(t2i)  recall@1(i2t)  accuracy"
    );
    for (idx, (mask, entail, distill)) in rows.into_iter().enumerate() {
        let mut config = base.clone();
        config.mask_ratio = mask;
        config.lambda_entail = if entail { base.lambda_entail } else { 0.0 };
        config.lambda_distill = if distill { base.lambda_distill } else { 0.0 };
        let out = args.out.join(format!("loss-row-{idx}"));
        let outcome = train_loop(
            &config,
            &corpus,
            distill.then_some(&teacher),
            Objective::Hyperbolic,
            "student-ablate",
            &out,
        )?;
        let (images, captions) = val_images_and_captions(&corpus);
        let table = retrieval_recall(&outcome.model, &images, &captions, &[1])?;
        let acc = classify_accuracy(&outcome.model, &corpus)?;
        let tick = |on: bool| if on { "x" } else { "-" };
        println!(
            "{:<6} {:<7} {:<12} {:<11} {:<13} {:<14.3} {:<14.3} {:.3}",
            tick(mask == 0.0),
            tick(mask == 0.5),
            tick(true),
            tick(entail),
            tick(distill),
            table.text_to_image[0],
            table.image_to_text[0],
            acc
        );
    }
    Ok(())
}

fn cmd_grad_check(tol: f64, reps: usize) -> CliResult<()> {
    let entries = gradient_battery(reps);
    let mut failed = false;
    for e in &entries {
        let ok = e.max_rel_err <= tol;
        failed |= !ok;
        println!(
            "{:<22} {:>12.3e}  {}",
            e.name,
            e.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(CliError::new(format!(
            "gradient check failed at tolerance {tol:e}"
        )));
    }
    println!("all {} entries within {tol:e}", entries.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            image_size,
        } => cmd_gen_data(n, seed, &out, image_size),
        Command::TrainTeacher(args) => cmd_train_teacher(&args),
        Command::Distill { train, teacher } => cmd_distill(&train, &teacher),
        Command::TrainMeru(args) => cmd_train_meru(&args),
        Command::TrainClipBaseline(args) => cmd_train_clip(&args),
        Command::EvalClassify {
            checkpoint,
            data,
            out,
        } => cmd_eval_classify(&checkpoint, &data, out.as_deref()),
        Command::EvalRetrieve {
            checkpoint,
            data,
            out,
        } => cmd_eval_retrieve(&checkpoint, &data, out.as_deref()),
        Command::Traverse {
            checkpoint,
            data,
            count,
            steps,
            out,
        } => cmd_traverse(&checkpoint, &data, count, steps, out.as_deref()),
        Command::AblateMask(args) => cmd_ablate_mask(&args),
        Command::AblateLoss { train, teacher } => cmd_ablate_loss(&train, &teacher),
        Command::GradCheck { tol, reps } => cmd_grad_check(tol, reps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
