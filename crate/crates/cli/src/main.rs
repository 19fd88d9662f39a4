//! Command-line front end: synthetic data generation, training,
//! evaluation, single-image prediction, scheme ablations and report
//! merging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use segvote::data::{
    generate_synthetic_dataset, load_manifest, load_split, Sample, Split, SynthConfig,
};
use segvote::error::Error;
use segvote::metrics::{confusion, optimal_cutoff, roc_to_csv};
use segvote::model::{build_ensemble, forward_ensemble, Arch, Profile};
use segvote::segmentation::{Label, SegmentationScheme, SCHEME_NAMES};
use segvote::train::{evaluate, fit, load_checkpoint, TrainConfig};
use segvote::Rng;

fn scheme_help() -> String {
    format!("Valid segmentation schemes: {}", SCHEME_NAMES.join(", "))
}

#[derive(Parser)]
#[command(
    name = "segvote",
    about = "Forgery detection by latent-feature segmentation and voting",
    version,
    after_help = scheme_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic splice-tamper dataset
    Synth(SynthArgs),
    /// Train a model on a manifest's train/val splits
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Classify a single image
    Predict(PredictArgs),
    /// Train and evaluate one model per segmentation scheme
    #[command(after_help = scheme_help())]
    Ablate(AblateArgs),
    /// Merge ablation CSVs in a directory into one table
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Images per class
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class in the train split
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    /// Fraction of each class in the val split (remainder is test)
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest (JSON Lines) with train and val splits
    #[arg(long)]
    manifest: PathBuf,
    /// JSON file with TrainConfig fields; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture: proposed, mesonet or mesonet-seg
    #[arg(long, default_value = "proposed")]
    arch: String,
    /// Segmentation scheme (see --help for the list)
    #[arg(long, default_value = "v5", help = "Segmentation scheme name")]
    scheme: String,
    /// Scale profile: full (256x256) or desk (64x64)
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Training-log JSON path (default: <out>.log.json)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Share one head parameter set across all blocks
    #[arg(long, default_value_t = false)]
    shared_heads: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split to evaluate: train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Assert the checkpoint was trained with this scheme
    #[arg(long)]
    scheme: Option<String>,
    /// Write the ROC curve as CSV here
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    /// Write the report JSON here (always printed to stdout)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Additional score threshold to report accuracy at
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint path
    #[arg(long)]
    model: PathBuf,
    /// Image to classify (PNG or PPM)
    #[arg(long)]
    image: PathBuf,
    /// Emit per-voter detail as JSON
    #[arg(long, default_value_t = false)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated scheme names
    #[arg(long)]
    schemes: String,
    /// Output directory for <name>.csv and <name>.md
    #[arg(long)]
    out: PathBuf,
    /// Run name, used as the report file stem and run id
    #[arg(long, default_value = "ablation")]
    name: String,
    /// Architecture trained per scheme
    #[arg(long, default_value = "mesonet-seg")]
    arch: String,
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding ablation CSVs
    #[arg(long = "in", value_name = "DIR")]
    in_dir: PathBuf,
    /// Output format: csv or md
    #[arg(long, default_value = "csv")]
    format: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage error, 2 data error, 3 internal invariant violation.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::UnknownScheme(..) => 1,
        Error::Io(_)
        | Error::Manifest { .. }
        | Error::ImageDecode { .. }
        | Error::EmptyDataset(_)
        | Error::MalformedCheckpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::TruncatedCheckpoint(_)
        | Error::SchemeMismatch { .. } => 2,
        Error::ShapeMismatch(_) => 3,
    }
}

type Result<T> = std::result::Result<T, Error>;

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidArgument(format!(
            "unknown split '{other}' (expected train, val or test)"
        ))),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        count_per_class: a.count,
        size: a.size,
        seed: a.seed,
        patch_min: 0.2,
        patch_max: 0.4,
        feather: 2,
        blur_radius: 1,
        train_frac: a.train_frac,
        val_frac: a.val_frac,
    };
    let entries = generate_synthetic_dataset(&cfg, &a.out)?;
    println!("wrote {} images + manifest to {}", entries.len(), a.out.display());
    Ok(())
}

fn load_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("bad config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_labeled_split(manifest: &Path, split: Split, side: usize) -> Result<Vec<Sample>> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        eprintln!("warning: manifest {} is empty", manifest.display());
    }
    let samples = load_split(manifest, &entries, split, side)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("no {split:?} samples in manifest")));
    }
    Ok(samples)
}

fn epoch_line(e: &segvote::train::EpochLog) -> String {
    let auc = match e.val_auc {
        Some(a) => format!("{a:.6}"),
        None => "n/a".to_string(),
    };
    format!(
        "epoch {:>3}  train_loss {:.6}  val_acc {:.6}  val_auc {auc}",
        e.epoch, e.train_loss, e.val_acc
    )
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_train_config(&a)?;
    let arch = Arch::parse(&a.arch)?;
    let scheme = SegmentationScheme::parse(&a.scheme)?;
    let profile = Profile::parse(&a.profile)?;
    let side = profile.input_side();
    // build first so arch/scheme incompatibilities surface before data IO
    let mut rng = Rng::new(cfg.seed);
    let mut model = build_ensemble(arch, scheme, profile, a.shared_heads, &mut rng)?;
    let train_set = load_labeled_split(&a.manifest, Split::Train, side)?;
    let val_set = load_labeled_split(&a.manifest, Split::Val, side)?;
    println!(
        "training {} / {} ({} voters, {} params) on {} train / {} val samples",
        arch.name(),
        scheme.name(),
        model.voter_count(),
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let outcome = fit(&mut model, &train_set, &val_set, &cfg, Some(&a.out), |e| {
        println!("{}", epoch_line(e));
        true
    })?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.json");
        PathBuf::from(s)
    });
    let log_json = serde_json::to_string_pretty(&outcome.log).expect("log serializes");
    std::fs::write(&log_path, log_json)?;
    println!(
        "best epoch {} (val_auc {:.6}); checkpoint {}, log {}",
        outcome.best_epoch,
        outcome.best_auc,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    if let Some(name) = &a.scheme {
        ck.expect_scheme(SegmentationScheme::parse(name)?)?;
    }
    let mut model = ck.build_model()?;
    let split = parse_split(&a.split)?;
    let samples = load_labeled_split(&a.manifest, split, model.input_side())?;
    let report = evaluate(&mut model, &samples, a.threshold)?;
    let eff_threshold = a.threshold.unwrap_or(0.5);
    let conf = confusion(&report.scores, eff_threshold);
    let mut out = serde_json::json!({
        "n": report.n,
        "accuracy": report.vote_accuracy,
        "confusion": {
            "tp": conf.tp, "fp": conf.fp, "tn": conf.tn, "fn": conf.fn_,
            "threshold": eff_threshold,
        },
    });
    match (&report.auc, &report.roc) {
        (Some(auc), Some(roc)) => {
            let cut = optimal_cutoff(roc);
            out["auc"] = serde_json::json!(auc);
            out["optimal_cutoff"] = serde_json::json!({
                "threshold": cut.threshold,
                "fpr": cut.fpr,
                "tpr": cut.tpr,
            });
            if let Some(p) = &a.roc_csv {
                std::fs::write(p, roc_to_csv(roc))?;
            }
        }
        _ => {
            eprintln!("warning: single-class split, AUC undefined");
            out["auc"] = serde_json::Value::Null;
        }
    }
    if let Some(acc) = report.threshold_accuracy {
        out["accuracy_at_threshold"] = serde_json::json!(acc);
    }
    let text = serde_json::to_string_pretty(&out).expect("report serializes");
    println!("{text}");
    if let Some(p) = &a.report {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let mut model = ck.build_model()?;
    let side = model.input_side();
    let img = segvote::data::decode_image(&a.image)?;
    let img =
        if img.shape() == [side, side, 3] { img } else { segvote::data::resize_bilinear(&img, side)? };
    let vote = forward_ensemble(&mut model, &img)?;
    let label_str = |l: Label| match l {
        Label::Real => "REAL",
        Label::Fake => "FAKE",
    };
    if a.json {
        let per_voter: Vec<serde_json::Value> = vote
            .per_voter
            .iter()
            .map(|&(l, p)| serde_json::json!({"label": label_str(l), "prob_real": p}))
            .collect();
        let out = serde_json::json!({
            "label": label_str(vote.label),
            "tally": {"real": vote.tally.0, "fake": vote.tally.1},
            "per_voter": per_voter,
            "tiebreak_used": vote.tiebreak_used,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("vote serializes"));
    } else {
        println!("{}", label_str(vote.label));
    }
    Ok(())
}

struct AblationRow {
    scheme: String,
    accuracy_pct: Option<f64>,
    auc: Option<f64>,
    error: Option<String>,
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("scheme,accuracy_pct,auc,error\n");
    for r in rows {
        let acc = r.accuracy_pct.map(|a| format!("{a:.1}")).unwrap_or_default();
        let auc = r.auc.map(|a| format!("{a:.4}")).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace(',', ";");
        s.push_str(&format!("{},{},{},{}\n", r.scheme, acc, auc, err));
    }
    s
}

fn ablation_md(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Method | Accuracy (%) | AUC |\n|---|---|---|\n");
    for r in rows {
        let acc = r.accuracy_pct.map(|a| format!("{a:.1}")).unwrap_or_else(|| "—".into());
        let auc = r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "—".into());
        let name = match &r.error {
            Some(e) => format!("{} (failed: {e})", r.scheme),
            None => r.scheme.clone(),
        };
        s.push_str(&format!("| {name} | {acc} | {auc} |\n"));
    }
    s
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let arch = Arch::parse(&a.arch)?;
    let profile = Profile::parse(&a.profile)?;
    let side = profile.input_side();
    let names: Vec<&str> = a.schemes.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::InvalidArgument("--schemes must list at least one scheme".into()));
    }
    let train_set = load_labeled_split(&a.manifest, Split::Train, side)?;
    // evaluate on the test split, falling back to val
    let eval_set = load_labeled_split(&a.manifest, Split::Test, side)
        .or_else(|_| load_labeled_split(&a.manifest, Split::Val, side))?;
    let val_set = load_labeled_split(&a.manifest, Split::Val, side).unwrap_or_else(|_| eval_set.clone());
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        lr: a.lr.unwrap_or_else(|| TrainConfig::default().lr),
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(&a.out)?;
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let row = (|| -> Result<AblationRow> {
            let scheme = SegmentationScheme::parse(name)?;
            let mut rng = Rng::new(cfg.seed);
            let mut model = build_ensemble(arch, scheme, profile, false, &mut rng)?;
            fit(&mut model, &train_set, &val_set, &cfg, None, |_| true)?;
            let report = evaluate(&mut model, &eval_set, None)?;
            Ok(AblationRow {
                scheme: name.to_string(),
                accuracy_pct: Some(report.vote_accuracy * 100.0),
                auc: report.auc,
                error: None,
            })
        })();
        let row = row.unwrap_or_else(|e| AblationRow {
            scheme: name.to_string(),
            accuracy_pct: None,
            auc: None,
            error: Some(e.to_string()),
        });
        match &row.error {
            None => println!(
                "{:<8} acc {:>5.1}%  auc {}",
                row.scheme,
                row.accuracy_pct.unwrap(),
                row.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
            ),
            Some(e) => println!("{:<8} failed: {e}", row.scheme),
        }
        rows.push(row);
    }
    std::fs::write(a.out.join(format!("{}.csv", a.name)), ablation_csv(&rows))?;
    std::fs::write(a.out.join(format!("{}.md", a.name)), ablation_md(&rows))?;
    println!("reports written to {}", a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.in_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no ablation CSVs in {}",
            a.in_dir.display()
        )));
    }
    // (run id, scheme, accuracy, auc, error)
    let mut merged: Vec<(String, String, String, String, String)> = Vec::new();
    for f in &files {
        let run = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(f)?;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                continue;
            }
            merged.push((
                run.clone(),
                cols[0].to_string(),
                cols[1].to_string(),
                cols[2].to_string(),
                cols.get(3).copied().unwrap_or("").to_string(),
            ));
        }
    }
    match a.format.as_str() {
        "csv" => {
            println!("run,scheme,accuracy_pct,auc,error");
            for (run, scheme, acc, auc, err) in &merged {
                println!("{run},{scheme},{acc},{auc},{err}");
            }
        }
        "md" => {
            println!("| Run | Method | Accuracy (%) | AUC |");
            println!("|---|---|---|---|");
            for (run, scheme, acc, auc, err) in &merged {
                let name = if err.is_empty() {
                    scheme.clone()
                } else {
                    format!("{scheme} (failed: {err})")
                };
                let acc = if acc.is_empty() { "—" } else { acc };
                let auc = if auc.is_empty() { "—" } else { auc };
                println!("| {run} | {name} | {acc} | {auc} |");
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown format '{other}' (expected csv or md)"
            )))
        }
    }
    Ok(())
}
