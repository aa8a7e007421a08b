//! Command-line workbench: dataset synthesis, two-stage training,
//! retrieval evaluation, feature export, and self-verification.
//!
//! Exit codes: 0 success, 1 generic failure (including a failed
//! verification), 2 configuration errors, 3 training aborts on a
//! non-finite loss, 4 empty evaluation protocol.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use transoss::dataio::{synth_generate, DatasetStats, SplitManifest};
use transoss::dataio::preprocess::{preprocess, PreprocessConfig};
use transoss::error::{Error, Result};
use transoss::eval::{embed_set, evaluate_set, write_artifacts, EvalConfig, EvalMode};
use transoss::model::{extract_feature, load_checkpoint, ForwardInput, ModelConfig, Params};
use transoss::runconfig::RunConfig;
use transoss::trainer::{self, load_train_state, TrainState};
use transoss::verify::run_verification;

#[derive(Parser)]
#[command(
    name = "transoss",
    about = "Cross-modal optical/SAR ship re-identification workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Route SAR patches through the optical tokenizer head.
    NoCdt,
    /// Drop the modality embedding.
    NoMie,
    /// Drop the ship-size token.
    NoSse,
    /// Fine-tune from random init instead of a pretrained trunk.
    NoPretrain,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    All,
    Opt2sar,
    Sar2opt,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::All => EvalMode::All,
            ModeArg::Opt2sar => EvalMode::OptToSar,
            ModeArg::Sar2opt => EvalMode::SarToOpt,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-modality ship dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides synth.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: symmetric contrastive pretraining on aligned pairs.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training seed for both init and batching streams.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root; overrides data.root from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Start from this checkpoint instead of random init.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from OUT/pretrain.{toss,tsst}.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: identity + batch-hard triplet fine-tuning.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained trunk checkpoint (required unless --ablate
        /// no-pretrain or --resume).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from OUT/finetune.{toss,tsst}.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the retrieval protocol and write CSVs.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        /// Protocol direction; defaults to eval.mode from the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-item feature vectors to OUT/features.tsv.
    Embed {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-verification suite.
    Verify {
        /// Implant a gradient bug into this op; verification must fail.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Print the config, parameter count, and temperature of a checkpoint.
    Inspect {
        #[arg(long)]
        init: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::EmptyProtocol => 4,
        _ => 1,
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Synth { config, seed, out } => cmd_synth(config.as_deref(), seed, &out),
        Command::Pretrain {
            config,
            seed,
            data,
            init,
            resume,
            ablate,
            out,
        } => cmd_pretrain(
            config.as_deref(),
            seed,
            data.as_deref(),
            init.as_deref(),
            resume,
            &ablate,
            &out,
        ),
        Command::Finetune {
            config,
            seed,
            data,
            init,
            resume,
            ablate,
            out,
        } => cmd_finetune(
            config.as_deref(),
            seed,
            data.as_deref(),
            init.as_deref(),
            resume,
            &ablate,
            &out,
        ),
        Command::Eval {
            config,
            data,
            init,
            mode,
            out,
        } => cmd_eval(config.as_deref(), data.as_deref(), &init, mode, &out),
        Command::Embed {
            config,
            data,
            init,
            out,
        } => cmd_embed(config.as_deref(), data.as_deref(), &init, &out),
        Command::Verify { corrupt } => cmd_verify(corrupt.as_deref()),
        Command::Inspect { init } => cmd_inspect(&init),
    }
}

fn cmd_inspect(init: &Path) -> Result<u8> {
    let (params, cfg) = load_checkpoint(init)?;
    print!("{}", cfg.to_kv_block());
    let log_tau = params.log_tau.data()[0];
    println!("params={}", params.num_params());
    println!("fingerprint={:016x}", params.fingerprint());
    println!("log_tau={log_tau}");
    println!("logit_scale={}", (0.5 * log_tau).exp());
    Ok(0)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Model switches toggled by ablations. `no-pretrain` is a pipeline
/// choice handled by the finetune command, not a model switch.
fn apply_ablations(cfg: &mut ModelConfig, ablations: &[Ablation]) {
    for a in ablations {
        match a {
            Ablation::NoCdt => cfg.use_dual_tokenizer = false,
            Ablation::NoMie => cfg.use_modality_embed = false,
            Ablation::NoSse => cfg.use_size_embed = false,
            Ablation::NoPretrain => {}
        }
    }
}

fn load_dataset(rc: &RunConfig, flag: Option<&Path>) -> Result<(SplitManifest, DatasetStats)> {
    let root = flag
        .map(Path::to_path_buf)
        .or_else(|| rc.data_root.clone())
        .ok_or_else(|| {
            Error::Config("no dataset root; pass --data or set data.root in the config".into())
        })?;
    let manifest = SplitManifest::load(&root.join("manifest.tsv"))?;
    let stats = DatasetStats::load(&root.join("stats.txt"))?;
    Ok((manifest, stats))
}

/// Checkpoints must agree with the active config on every dimension;
/// the wiring flags stay with the invocation.
fn check_shapes(ckpt: &ModelConfig, active: &ModelConfig) -> Result<()> {
    let same = ckpt.embed_dim == active.embed_dim
        && ckpt.num_layers == active.num_layers
        && ckpt.num_heads == active.num_heads
        && ckpt.patch_size == active.patch_size
        && ckpt.input_h == active.input_h
        && ckpt.input_w == active.input_w;
    if !same {
        return Err(Error::Config(format!(
            "checkpoint shape (D={} L={} H={} patch={} input={}x{}) does not match the config \
             (D={} L={} H={} patch={} input={}x{})",
            ckpt.embed_dim,
            ckpt.num_layers,
            ckpt.num_heads,
            ckpt.patch_size,
            ckpt.input_h,
            ckpt.input_w,
            active.embed_dim,
            active.num_layers,
            active.num_heads,
            active.patch_size,
            active.input_h,
            active.input_w,
        )));
    }
    Ok(())
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<u8> {
    let mut rc = load_config(config)?;
    if let Some(s) = seed {
        rc.synth.seed = s;
    }
    let manifest = synth_generate(&rc.synth, out)?;
    rc.save(&out.join("run_config.cfg"))?;
    println!(
        "synth: {} items ({} identities, {} distractors) at {}",
        manifest.items.len(),
        rc.synth.identities,
        rc.synth.distractors,
        out.display()
    );
    Ok(0)
}

fn resume_pair(out: &Path, stage: &str) -> Result<(Params, ModelConfig, TrainState)> {
    let ckpt = out.join(format!("{stage}.toss"));
    let state = out.join(format!("{stage}.tsst"));
    if !ckpt.exists() || !state.exists() {
        return Err(Error::Config(format!(
            "--resume needs {} and {}",
            ckpt.display(),
            state.display()
        )));
    }
    let (params, cfg) = load_checkpoint(&ckpt)?;
    let st = load_train_state(&state)?;
    Ok((params, cfg, st))
}

fn cmd_pretrain(
    config: Option<&Path>,
    seed: Option<u64>,
    data: Option<&Path>,
    init: Option<&Path>,
    resume: bool,
    ablate: &[Ablation],
    out: &Path,
) -> Result<u8> {
    if ablate.contains(&Ablation::NoPretrain) {
        return Err(Error::Config(
            "--ablate no-pretrain applies to the finetune command".into(),
        ));
    }
    let mut rc = load_config(config)?;
    if let Some(s) = seed {
        rc.set_training_seed(s);
    }
    apply_ablations(&mut rc.model, ablate);
    let (manifest, stats) = load_dataset(&rc, data)?;
    ensure_out_dir(out)?;
    let (mut params, resume_state) = if resume {
        let (p, ckpt_cfg, st) = resume_pair(out, "pretrain")?;
        check_shapes(&ckpt_cfg, &rc.model)?;
        (p, Some(st))
    } else if let Some(init) = init {
        let (p, ckpt_cfg) = load_checkpoint(init)?;
        check_shapes(&ckpt_cfg, &rc.model)?;
        (p, None)
    } else {
        (Params::init(&rc.model, rc.pretrain.seed), None)
    };
    let (report, _) = trainer::pretrain(
        &mut params,
        &manifest,
        &stats,
        &rc.model,
        &rc.pretrain,
        resume_state,
        Some(out),
    )?;
    report.save_timing(&out.join("timing_pretrain.txt"))?;
    rc.save(&out.join("run_config.cfg"))?;
    let last = report.rows.last();
    println!(
        "pretrain: {} epochs, loss {} -> {}, checkpoint {}",
        report.rows.len(),
        report.rows.first().map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.loss),
        out.join("pretrain.toss").display()
    );
    Ok(0)
}

fn cmd_finetune(
    config: Option<&Path>,
    seed: Option<u64>,
    data: Option<&Path>,
    init: Option<&Path>,
    resume: bool,
    ablate: &[Ablation],
    out: &Path,
) -> Result<u8> {
    let mut rc = load_config(config)?;
    if let Some(s) = seed {
        rc.set_training_seed(s);
    }
    apply_ablations(&mut rc.model, ablate);
    let no_pretrain = ablate.contains(&Ablation::NoPretrain);
    let (manifest, stats) = load_dataset(&rc, data)?;
    ensure_out_dir(out)?;
    let (mut params, resume_state) = if resume {
        let (p, ckpt_cfg, st) = resume_pair(out, "finetune")?;
        check_shapes(&ckpt_cfg, &rc.model)?;
        (p, Some(st))
    } else if no_pretrain {
        (Params::init(&rc.model, rc.finetune.seed), None)
    } else {
        let init = init.ok_or_else(|| {
            Error::Config(
                "finetune needs --init <pretrain checkpoint>, or --ablate no-pretrain to start \
                 from scratch"
                    .into(),
            )
        })?;
        let (p, ckpt_cfg) = load_checkpoint(init)?;
        check_shapes(&ckpt_cfg, &rc.model)?;
        (p, None)
    };
    let (report, _) = trainer::finetune(
        &mut params,
        &manifest,
        &stats,
        &rc.model,
        &rc.finetune,
        resume_state,
        Some(out),
    )?;
    report.save_timing(&out.join("timing_finetune.txt"))?;
    rc.save(&out.join("run_config.cfg"))?;
    println!(
        "finetune: {} epochs, final loss {}, validation mAP {}, checkpoint {}",
        report.rows.len(),
        report.rows.last().map_or(f64::NAN, |r| r.loss),
        report
            .final_map
            .map_or("n/a".to_string(), |m| format!("{m:.4}")),
        out.join("finetune.toss").display()
    );
    Ok(0)
}

fn cmd_eval(
    config: Option<&Path>,
    data: Option<&Path>,
    init: &Path,
    mode: Option<ModeArg>,
    out: &Path,
) -> Result<u8> {
    let rc = load_config(config)?;
    let (manifest, stats) = load_dataset(&rc, data)?;
    let (params, ckpt_cfg) = load_checkpoint(init)?;
    let mode = mode.map_or(rc.eval_mode, EvalMode::from);
    let eval_cfg = EvalConfig {
        normalize_features: rc.eval_normalize,
    };
    let set = embed_set(&manifest, &params, &ckpt_cfg, &stats, &eval_cfg)?;
    let result = evaluate_set(&set, mode)?;
    ensure_out_dir(out)?;
    write_artifacts(&result, &set, out)?;
    println!(
        "eval {}: mAP={:.4} R1={:.4} R5={:.4} R10={:.4} (dropped {})",
        mode.as_str(),
        result.map,
        result.rank_k(1),
        result.rank_k(5),
        result.rank_k(10),
        result.dropped_queries
    );
    Ok(0)
}

fn cmd_embed(
    config: Option<&Path>,
    data: Option<&Path>,
    init: &Path,
    out: &Path,
) -> Result<u8> {
    let rc = load_config(config)?;
    let (manifest, stats) = load_dataset(&rc, data)?;
    let (params, cfg) = load_checkpoint(init)?;
    let pp = PreprocessConfig::for_model(cfg.input_h, cfg.input_w);
    let mut text = String::from("path\tobject_id\tsequence_id\tcamera_id\tmodality\tfeature\n");
    for item in &manifest.items {
        let loaded = manifest.load_item(item)?;
        let (image, size) = preprocess(&loaded, &pp, Some(&stats))?;
        let input = ForwardInput {
            image: &image,
            modality: item.modality,
            size: cfg.use_size_embed.then(|| size.as_array()),
        };
        let feature = extract_feature(&params, input, &cfg)?;
        let joined: Vec<String> = feature.iter().map(f64::to_string).collect();
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            item.path.display(),
            item.object_id,
            item.sequence_id,
            item.camera_id,
            item.modality.as_str(),
            joined.join(",")
        ));
    }
    ensure_out_dir(out)?;
    let path = out.join("features.tsv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("embed: {} items -> {}", manifest.items.len(), path.display());
    Ok(0)
}

fn cmd_verify(corrupt: Option<&str>) -> Result<u8> {
    let report = run_verification(corrupt)?;
    print!("{}", report.render());
    Ok(if report.all_passed() { 0 } else { 1 })
}
