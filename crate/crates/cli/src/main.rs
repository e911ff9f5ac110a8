//! `aissm` command line: synthetic dataset generation, training, evaluation,
//! confidence labeling, gradient checking, and checkpoint inspection.
//!
//! Every subcommand reads a flat `key = value` config file (`--config`) with
//! `--set key=value` overrides on top, echoes the effective configuration to
//! its output directory, and is deterministic given identical inputs and
//! seeds. Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 data error, 4 checkpoint I/O, 5 missing artifact.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use aissm_core::ckpt::{self, CkptError};
use aissm_core::confidence::{alpha_parts, ConfidenceParams};
use aissm_core::config::{canonical, ConfigError, KvConfig};
use aissm_core::event::{
    frame_sequence, load_dataset, write_dataset, DataError, Dataset, EventFormat, FramedSequence,
};
use aissm_core::gradcheck::{GradCheckConfig, GradCheckReport};
use aissm_core::metrics::{pixel_distance, summarize_at, EvalSummary, FrameEval, EVAL_GRID};
use aissm_core::model::{assembled_gradcheck, Model, ModelConfig, ModelError, ModelKind};
use aissm_core::synth::{generate_dataset, SynthConfig};
use aissm_core::train::{prepare, train_epochs, LogEvent, TrainConfig, TrainError, TrainRun};

#[derive(Parser)]
#[command(
    name = "aissm",
    version,
    about = "Event-camera eye tracking: data synthesis, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic event-stream dataset
    Gen(GenArgs),
    /// Train a tracker on an event dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Emit per-frame confidence labels for a dataset
    Confidence(ConfidenceArgs),
    /// Finite-difference checks of every differentiable operation
    Gradcheck(GradcheckArgs),
    /// Print checkpoint metadata
    InspectCkpt(InspectArgs),
}

/// Config file plus overrides, shared by every subcommand.
#[derive(Args)]
struct ConfigOpts {
    /// Flat `key = value` config file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Dataset directory to create
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory for config echo, logs, and the checkpoint
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from a checkpoint (only the `epochs` key may be overridden)
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Directory for per-frame records and the summary (optional)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfidenceArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Directory for the per-sequence label CSVs
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to describe
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
}

/// A failed command, carrying the process exit code it maps to.
struct Failure {
    code: i32,
    msg: String,
}

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        fail(2, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = if matches!(e, DataError::Missing { .. }) { 5 } else { 3 };
        fail(code, e.to_string())
    }
}

impl From<CkptError> for Failure {
    fn from(e: CkptError) -> Self {
        let code = match &e {
            CkptError::Io(io) if io.kind() == ErrorKind::NotFound => 5,
            _ => 4,
        };
        fail(code, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = if matches!(e, ModelError::BadConfig(_)) { 2 } else { 1 };
        fail(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NoItems => fail(3, e.to_string()),
            TrainError::Model(m) => m.into(),
            other => fail(1, other.to_string()),
        }
    }
}

/// Output-file writes are data errors; a vanished path is a missing artifact.
fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    let code = if e.kind() == ErrorKind::NotFound { 5 } else { 3 };
    fail(code, format!("{}: {e}", path.display()))
}

impl ConfigOpts {
    fn kv(&self) -> Result<KvConfig, Failure> {
        let mut kv = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| fail(2, format!("{}: {e}", path.display())))?;
                KvConfig::parse(&text)?
            }
            None => KvConfig::new(),
        };
        for pair in &self.set {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(fail(2, format!("--set `{pair}`: expected KEY=VALUE")));
            };
            kv.set(k, v);
        }
        Ok(kv)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn make_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

/// Echo the effective config to stdout and `<out>/config.txt`.
fn echo_config(out: &Path, pairs: &BTreeMap<String, String>) -> Result<(), Failure> {
    let text = canonical(pairs);
    print!("{text}");
    write_text(&out.join("config.txt"), &text)
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.cmd) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    };
    std::process::exit(code);
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Confidence(a) => cmd_confidence(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::InspectCkpt(a) => cmd_inspect(a),
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let mut kv = args.config.kv()?;
    let format: EventFormat = kv
        .get_str("format", EventFormat::Csv.as_str())
        .parse()
        .map_err(|m: String| fail(2, m))?;
    let scfg = SynthConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if scfg.n_sequences == 0 {
        return Err(fail(2, "n_sequences must be at least 1"));
    }
    if scfg.duration_us == 0 {
        return Err(fail(2, "duration_s must be positive"));
    }

    let sequences = generate_dataset(&scfg);
    make_dir(&args.out)?;
    write_dataset(&args.out, &sequences, scfg.window_us, format)?;

    let mut pairs = BTreeMap::new();
    scfg.to_pairs(&mut pairs);
    pairs.insert("format".into(), format.as_str().into());
    echo_config(&args.out, &pairs)?;

    let events: usize = sequences.iter().map(|s| s.events.len()).sum();
    let labels: usize = sequences.iter().map(|s| s.labels.len()).sum();
    println!(
        "wrote {} sequences ({events} events, {labels} labels) to {}",
        sequences.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn check_sensor(model: &Model, ds: &Dataset) -> Result<(), Failure> {
    if model.width != ds.width || model.height != ds.height {
        return Err(fail(
            3,
            format!(
                "sensor mismatch: model is {}x{}, dataset is {}x{}",
                model.width, model.height, ds.width, ds.height
            ),
        ));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut kv = args.config.kv()?;
    let ds = load_dataset(&args.data)?;

    let (mut run, tcfg) = match &args.resume {
        Some(ckpt_path) => {
            // A checkpoint carries its full configuration; accepting anything
            // beyond a new epoch target would silently diverge from it.
            let (run, mut tcfg) = ckpt::load(ckpt_path)?;
            tcfg.epochs = kv.get_usize("epochs", tcfg.epochs)?;
            kv.finish().map_err(|e| {
                fail(2, format!("{e} (resume accepts only the `epochs` key)"))
            })?;
            (run, tcfg)
        }
        None => {
            let kind: ModelKind = kv
                .get_str("model", ModelKind::Aissm.as_str())
                .parse()
                .map_err(|m: String| fail(2, m))?;
            let mcfg = ModelConfig::from_kv(kind, &mut kv)?;
            let tcfg = TrainConfig::from_kv(&mut kv)?;
            kv.finish()?;
            let model = Model::new(kind, mcfg, ds.width, ds.height, tcfg.seed)?;
            if !model.budget_ok() {
                return Err(fail(
                    2,
                    format!(
                        "{} model has {} parameters, outside +/-10% of the {} target \
                         (adjust the architecture or set param_budget)",
                        kind.as_str(),
                        model.param_count(),
                        model.cfg.param_budget
                    ),
                ));
            }
            (TrainRun::new(model, &tcfg)?, tcfg)
        }
    };
    check_sensor(&run.model, &ds)?;

    make_dir(&args.out)?;
    let mut pairs = BTreeMap::new();
    run.model.cfg.to_pairs(&mut pairs);
    tcfg.to_pairs(&mut pairs);
    pairs.insert("model".into(), run.model.kind.as_str().into());
    pairs.insert("sensor_width".into(), ds.width.to_string());
    pairs.insert("sensor_height".into(), ds.height.to_string());
    echo_config(&args.out, &pairs)?;

    let data = prepare(&ds, &tcfg)?;
    println!(
        "training {} ({} parameters) on {} sequences ({} train / {} val), epochs {} -> {}",
        run.model.kind.as_str(),
        run.model.param_count(),
        ds.sequences.len(),
        data.train_idx.len(),
        data.val_idx.len(),
        run.epochs_done,
        tcfg.epochs,
    );

    let mut log = String::from("event,epoch,step,task_loss,conf_loss,split,n,p5,p10,p15,mean_norm\n");
    let mut sink = |ev: &LogEvent| match ev {
        LogEvent::Step { epoch, step, task_loss, conf_loss } => {
            log.push_str(&format!("step,{epoch},{step},{task_loss},{conf_loss},,,,,,\n"));
        }
        LogEvent::Eval { epoch, split, summary } => {
            log.push_str(&format!(
                "eval,{epoch},,,,{split},{}\n",
                summary.csv_fields()
            ));
            println!(
                "epoch {epoch} {split}: n={} p5={:.4} p10={:.4} p15={:.4} mean_norm={:.5}",
                summary.n, summary.p5, summary.p10, summary.p15, summary.mean_norm
            );
        }
    };
    let target = tcfg.epochs;
    train_epochs(&mut run, &data, &tcfg, target, &mut sink)?;

    write_text(&args.out.join("train_log.csv"), &log)?;
    let ckpt_path = args.out.join("ckpt.aism");
    ckpt::save(&ckpt_path, &mut run, &tcfg)?;
    println!(
        "trained to epoch {} ({} steps); checkpoint at {}",
        run.epochs_done,
        run.steps_done,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn summary_block(label: &str, s: &EvalSummary, indent: &str) -> String {
    let mut out = format!("{indent}\"{label}\": {{\n");
    out.push_str(&format!("{indent}  \"frames\": {},\n", s.n));
    out.push_str(&format!("{indent}  \"p5\": {},\n", s.p5));
    out.push_str(&format!("{indent}  \"p10\": {},\n", s.p10));
    out.push_str(&format!("{indent}  \"p15\": {},\n", s.p15));
    match s.mean_alpha {
        Some(a) => {
            out.push_str(&format!("{indent}  \"mean_norm\": {},\n", s.mean_norm));
            out.push_str(&format!("{indent}  \"mean_alpha\": {}\n", a));
        }
        None => out.push_str(&format!("{indent}  \"mean_norm\": {}\n", s.mean_norm)),
    }
    out.push_str(&format!("{indent}}}"));
    out
}

fn frames_csv(evals: &[FrameEval], grid: usize) -> String {
    let mut csv = String::from(
        "seq,frame_idx,pred_x,pred_y,label_x,label_y,px_dist,hit5,hit10,hit15,event_density\n",
    );
    for e in evals {
        let d = pixel_distance(e.pred, e.truth, grid, grid);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            e.seq,
            e.frame,
            e.pred.0,
            e.pred.1,
            e.truth.0,
            e.truth.1,
            d,
            (d <= 5.0) as u8,
            (d <= 10.0) as u8,
            (d <= 15.0) as u8,
            e.density,
        ));
    }
    csv
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let mut kv = args.config.kv()?;
    let split = kv.get_str("split", "val");
    let grid = kv.get_usize("eval_grid", EVAL_GRID)?;
    let (run, tcfg) = ckpt::load(&args.ckpt)?;
    let seed = kv.get_u64("seed", tcfg.seed)?;
    kv.finish()?;
    if grid == 0 {
        return Err(fail(2, "eval_grid must be positive"));
    }

    let ds = load_dataset(&args.data)?;
    check_sensor(&run.model, &ds)?;
    let data = prepare(&ds, &tcfg)?;
    let idx: Vec<usize> = match split.as_str() {
        "train" => data.train_idx.clone(),
        "val" => data.val_idx.clone(),
        "all" => (0..data.framed.len()).collect(),
        other => return Err(fail(2, format!("split must be train|val|all, got `{other}`"))),
    };
    if idx.is_empty() {
        return Err(fail(3, format!("split `{split}` has no sequences")));
    }
    let pairs: Vec<(usize, &FramedSequence)> =
        idx.iter().map(|&i| (i, &data.framed[i])).collect();
    let evals = aissm_core::metrics::evaluate(&run.model, &pairs, seed)?;
    if evals.is_empty() {
        return Err(fail(3, format!("split `{split}` has no labeled frames")));
    }

    let overall = summarize_at(&evals, grid);
    let fixation = summarize_at(evals.iter().filter(|e| e.fixation), grid);
    let mut block = String::from("{\n");
    block.push_str(&format!("  \"split\": \"{split}\",\n"));
    block.push_str(&format!("  \"eval_grid\": {grid},\n"));
    block.push_str(&summary_block("overall", &overall, "  "));
    block.push_str(",\n");
    block.push_str(&summary_block("fixation", &fixation, "  "));
    block.push_str("\n}\n");
    print!("{block}");

    if let Some(out) = &args.out {
        make_dir(out)?;
        let mut pairs = BTreeMap::new();
        pairs.insert("split".into(), split.clone());
        pairs.insert("eval_grid".into(), grid.to_string());
        pairs.insert("seed".into(), seed.to_string());
        write_text(&out.join("config.txt"), &canonical(&pairs))?;
        write_text(&out.join("frames.csv"), &frames_csv(&evals, grid))?;
        write_text(&out.join("summary.txt"), &block)?;
        println!("wrote {} frame records to {}", evals.len(), out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// confidence
// ---------------------------------------------------------------------------

fn cmd_confidence(args: ConfidenceArgs) -> Result<(), Failure> {
    let mut kv = args.config.kv()?;
    let d = ConfidenceParams::default();
    let reference = ConfidenceParams {
        beta: kv.get_f64("beta", d.beta)?,
        tau: kv.get_f64("tau", d.tau)?,
        roi_h: kv.get_usize("roi_h", d.roi_h)?,
        roi_w: kv.get_usize("roi_w", d.roi_w)?,
    };
    kv.finish()?;

    let ds = load_dataset(&args.data)?;
    let p = reference.scaled_for_sensor(ds.width, ds.height);
    make_dir(&args.out)?;

    let mut pairs = BTreeMap::new();
    pairs.insert("beta".into(), reference.beta.to_string());
    pairs.insert("tau".into(), reference.tau.to_string());
    pairs.insert("roi_h".into(), reference.roi_h.to_string());
    pairs.insert("roi_w".into(), reference.roi_w.to_string());
    echo_config(&args.out, &pairs)?;

    let mut total = 0usize;
    for (i, seq) in ds.sequences.iter().enumerate() {
        let fs = frame_sequence(seq, ds.window_us)?;
        let mut csv = String::from("frame_idx,t_end,snr,ed,alpha\n");
        let mut n = 0usize;
        let mut sum = 0.0;
        for (fi, (frame, label)) in fs.frames.iter().zip(&fs.labels).enumerate() {
            let Some(lbl) = label else { continue };
            let parts = alpha_parts(frame, lbl.cx, lbl.cy, &p);
            csv.push_str(&format!(
                "{fi},{},{},{},{}\n",
                frame.t_end_us, parts.snr, parts.ed, parts.alpha
            ));
            n += 1;
            sum += parts.alpha;
        }
        let path = args.out.join(format!("alpha_{i:03}.csv"));
        write_text(&path, &csv)?;
        if n > 0 {
            println!("seq {i}: {n} labeled frames, mean alpha {:.4}", sum / n as f64);
        } else {
            println!("seq {i}: no labeled frames");
        }
        total += n;
    }
    if total == 0 {
        return Err(fail(3, "dataset has no labeled frames"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Fold a report into the per-name worst-case table.
fn merge_report(
    table: &mut BTreeMap<String, (f64, bool)>,
    name: &str,
    report: &GradCheckReport,
) {
    let slot = table.entry(name.to_string()).or_insert((0.0, true));
    slot.0 = slot.0.max(report.max_rel_err);
    slot.1 &= report.pass && report.deterministic;
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let mut kv = args.config.kv()?;
    let seeds = kv.get_u64("seeds", 20)?;
    let d = GradCheckConfig::default();
    let gcfg = GradCheckConfig {
        epsilon: kv.get_f64("epsilon", d.epsilon)?,
        tolerance: kv.get_f64("tolerance", d.tolerance)?,
        max_probes_per_param: kv.get_usize("max_probes", d.max_probes_per_param)?,
    };
    kv.finish()?;
    if seeds == 0 {
        return Err(fail(2, "seeds must be at least 1"));
    }

    // Worst relative error per op across all seeds, plus the assembled
    // model's per-parameter breakdown.
    let mut ops: BTreeMap<String, (f64, bool)> = BTreeMap::new();
    let mut params: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..seeds {
        for (name, report) in aissm_core::gradcheck::run_op_suite(seed, &gcfg) {
            merge_report(&mut ops, name, &report);
        }
        let asm = assembled_gradcheck(seed, &gcfg)?;
        for pc in &asm.params {
            let worst = params.entry(pc.name.clone()).or_insert(0.0);
            *worst = worst.max(pc.max_rel_err);
        }
        merge_report(&mut ops, "model/assembled_step", &asm);
    }

    println!(
        "gradient check: {seeds} seeds, tolerance {}, epsilon {}",
        gcfg.tolerance, gcfg.epsilon
    );
    let mut failures = Vec::new();
    for (name, (err, pass)) in &ops {
        let tag = if *pass { "ok  " } else { "FAIL" };
        println!("{tag} {name:<28} max_rel_err {err:.3e}");
        if !*pass {
            failures.push(name.clone());
        }
    }
    println!("assembled step, per parameter:");
    for (name, err) in &params {
        println!("     {name:<28} max_rel_err {err:.3e}");
    }
    if failures.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(fail(1, format!("gradient check failed for: {}", failures.join(", "))))
    }
}

// ---------------------------------------------------------------------------
// inspect-ckpt
// ---------------------------------------------------------------------------

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let info = ckpt::inspect(&args.ckpt)?;
    println!("version = {}", info.version);
    println!("entries = {}", info.n_entries);
    println!("values = {}", info.n_values);
    println!("parameter_values = {}", info.n_params);
    println!("state_store_entries = {}", info.n_store_entries);
    println!("-- embedded config --");
    print!("{}", info.config);
    Ok(())
}
