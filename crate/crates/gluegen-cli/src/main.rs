//! `gluegen`: command-line front door for the alignment toolkit.
//!
//! Every command is a pure function of its declared inputs: no environment
//! variables are consumed, all randomness comes from `--seed` flags, and a
//! [`RunManifest`] JSON sidecar is written next to every produced artifact so
//! a run can be reproduced from the manifest alone.
//!
//! Failures print a single machine-parseable line, `error[E<code>]: <message>`,
//! and exit with that code; see the `--help` footer for the code table.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use gluegen_core::data::{
    gen_synthetic_pair, pair, read_gge, write_gge, EmbeddingStore, SyntheticEncoderSpec,
    TransformKind,
};
use gluegen_core::diagnostics::{export_dissimilarity_csv, export_projection_csv, pca_project};
use gluegen_core::fusion::{dissimilarity_map, topk_fuse, FusionParams};
use gluegen_core::model::{param_count, GlueNetConfig, GlueNetDecoder, GlueNetEncoder};
use gluegen_core::objectives::LossWeights;
use gluegen_core::train::{
    load_checkpoint, loop_stability_eval, save_checkpoint, translate, TrainConfig, Trainer,
    CHECKPOINT_VERSION,
};
use gluegen_core::{Error, Result};

use manifest::RunManifest;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing required flag, invalid flag syntax)
  3  file I/O failure
  4  file-format failure (bad magic, version, corruption, digest mismatch)
  5  invalid configuration or parameter value
  6  data mismatch (shapes, counts, joins, batches)
  7  training diverged
  1  any other failure";

#[derive(Parser)]
#[command(
    name = "gluegen",
    version,
    about = "Train and run feature-space translators between frozen encoders",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an aligned synthetic source/target embedding pair.
    GenSynth(GenSynthArgs),
    /// Train a translator on a parallel corpus of GGE files.
    Train(TrainArgs),
    /// Map a GGE file through a checkpoint's encoder.
    Translate(TranslateArgs),
    /// Top-K fuse two aligned GGE files record by record.
    Fuse(FuseArgs),
    /// Project and report alignment diagnostics for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Print the exact parameter count of a configuration.
    ParamCount(ParamCountArgs),
    /// Print the header fields of a GGE or GGCK file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    /// One orthogonal rotation applied per token (extents must match).
    OrthogonalRotation,
    /// Token permutation followed by the rotation (extents must match).
    TokenPermutationRotation,
    /// Dense two-layer tanh net on the flattened record (any extents).
    RandomTwoLayerNet,
}

impl From<TransformArg> for TransformKind {
    fn from(t: TransformArg) -> TransformKind {
        match t {
            TransformArg::OrthogonalRotation => TransformKind::OrthogonalRotation,
            TransformArg::TokenPermutationRotation => TransformKind::TokenPermutationRotation,
            TransformArg::RandomTwoLayerNet => TransformKind::RandomTwoLayerNet,
        }
    }
}

#[derive(Args)]
struct GenSynthArgs {
    /// RNG seed for the transform, the sources, and the noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source tokens per record.
    #[arg(long)]
    l_in: usize,
    /// Source channels per token.
    #[arg(long)]
    c_in: usize,
    /// Target tokens per record.
    #[arg(long)]
    l_out: usize,
    /// Target channels per token.
    #[arg(long)]
    c_out: usize,
    /// Fixed map from each source record to its pre-noise target.
    #[arg(long, value_enum, default_value_t = TransformArg::OrthogonalRotation)]
    transform: TransformArg,
    /// Per-element Gaussian noise sigma added on the target side.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Number of record pairs to generate.
    #[arg(long)]
    count: usize,
    /// Output GGE path for the source records.
    #[arg(long)]
    out_src: PathBuf,
    /// Output GGE path for the target records.
    #[arg(long)]
    out_tgt: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Source-side GGE corpus (the new encoder's embeddings).
    #[arg(long)]
    src: PathBuf,
    /// Target-side GGE corpus (the consumer's embeddings).
    #[arg(long)]
    tgt: PathBuf,
    /// Architecture file, `key = value` text (see the bundled configs/).
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Generator and critic learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Total step budget [default: 1000]. With --resume this replaces the
    /// checkpoint's budget, so a finished run can be extended.
    #[arg(long)]
    steps: Option<u64>,
    /// Records per step.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Weight of the alignment MSE term.
    #[arg(long, default_value_t = 1.0)]
    lambda_mse: f64,
    /// Weight of the adversarial term (0 disables the critic).
    #[arg(long, default_value_t = 0.0)]
    lambda_adv: f64,
    /// Weight of the reconstruction term (0 disables the decoder).
    #[arg(long, default_value_t = 1.0)]
    lambda_rec: f64,
    /// Weight each token's alignment loss by its distance to the last token.
    #[arg(long)]
    reweight: bool,
    /// GGE file whose records define the token weights (defaults to --tgt).
    #[arg(long)]
    weights_from: Option<PathBuf>,
    /// RNG seed for initialization and batch shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for model.ggck, loss.csv, and the run manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Save checkpoint-<step>.ggck every N steps (0 = never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Resume from a GGCK checkpoint; hyperparameters other than --steps
    /// come from the checkpoint and the matching flags are ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Trained GGCK checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input GGE file in the encoder's source space.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output GGE path for the translated records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// First GGE file; its first k tokens lead each fused record.
    #[arg(long)]
    a: PathBuf,
    /// Second GGE file; its first k tokens follow.
    #[arg(long)]
    b: PathBuf,
    /// Kept prefix length per side (1 <= k, 2k < tokens).
    #[arg(long)]
    k: usize,
    /// Output GGE path for the fused records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Trained GGCK checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Source-side GGE file to translate and round-trip.
    #[arg(long)]
    src: PathBuf,
    /// Target-side GGE file the translations should land near.
    #[arg(long)]
    tgt: PathBuf,
    /// Directory for projection.csv, dissimilarity.csv, loop_stability.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ParamCountArgs {
    /// Architecture file, `key = value` text.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// A GGE embedding file or GGCK checkpoint.
    #[arg(long)]
    file: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::ParamCount(a) => cmd_param_count(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error[E{code}]: {}", e.to_string().replace('\n', "; "));
            ExitCode::from(code)
        }
    }
}

/// Map library errors onto the documented exit codes.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Format { .. } | Error::DigestMismatch { .. } => 4,
        Error::Config(_) | Error::FusionWindow { .. } | Error::DegenerateWeights(_) => 5,
        Error::ShapeMismatch { .. }
        | Error::InvalidShape(_)
        | Error::CountMismatch { .. }
        | Error::EmptyJoin
        | Error::EmptyBatch
        | Error::Diagnostics(_) => 6,
        Error::Diverged { .. } => 7,
        _ => 1,
    }
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = SyntheticEncoderSpec {
        seed: a.seed,
        l_in: a.l_in,
        c_in: a.c_in,
        l_out: a.l_out,
        c_out: a.c_out,
        transform: a.transform.into(),
        noise_sigma: a.noise,
    };
    let (corpus, _) = gen_synthetic_pair(&spec, a.count)?;
    write_gge(&corpus.source, &a.out_src)?;
    write_gge(&corpus.target, &a.out_tgt)?;

    let mut m = RunManifest::new("gen-synth", Some(a.seed));
    m.flag("l-in", a.l_in);
    m.flag("c-in", a.c_in);
    m.flag("l-out", a.l_out);
    m.flag("c-out", a.c_out);
    m.flag("transform", format!("{:?}", spec.transform));
    m.flag("noise", a.noise);
    m.flag("count", a.count);
    m.flag("out-src", a.out_src.display());
    m.flag("out-tgt", a.out_tgt.display());
    m.write_alongside(&a.out_src)?;
    m.write_alongside(&a.out_tgt)?;

    println!(
        "wrote {} record pairs: {} ({}x{}) and {} ({}x{})",
        a.count,
        a.out_src.display(),
        a.l_in,
        a.c_in,
        a.out_tgt.display(),
        a.l_out,
        a.c_out
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let corpus = pair(&a.src, &a.tgt)?;

    let mut m = RunManifest::new("train", Some(a.seed));
    m.flag("src", a.src.display());
    m.flag("tgt", a.tgt.display());
    m.flag("out-dir", a.out_dir.display());
    m.input(&a.src)?;
    m.input(&a.tgt)?;

    let mut trainer = if let Some(ckpt_path) = &a.resume {
        m.flag("resume", ckpt_path.display());
        m.input(ckpt_path)?;
        let mut t = Trainer::resume(load_checkpoint(ckpt_path, None)?, corpus)?;
        if let Some(steps) = a.steps {
            m.flag("steps", steps);
            t.set_steps(steps);
        }
        t
    } else {
        let cfg_path = a.config.as_ref().expect("clap requires --config without --resume");
        let text = fs::read_to_string(cfg_path).map_err(|e| Error::io(cfg_path, e))?;
        let gcfg = GlueNetConfig::from_text(&text)?;
        let tcfg = TrainConfig {
            lr: a.lr,
            lr_disc: a.lr,
            steps: a.steps.unwrap_or(1000),
            batch_size: a.batch,
            loss_weights: LossWeights {
                lambda_mse: a.lambda_mse,
                lambda_adv: a.lambda_adv,
                lambda_rec: a.lambda_rec,
            },
            seed: a.seed,
            checkpoint_every: a.checkpoint_every,
            reweight: a.reweight,
            weights_from: a.weights_from.clone(),
            ..TrainConfig::default()
        };
        m.flag("config", cfg_path.display());
        m.flag("lr", tcfg.lr);
        m.flag("steps", tcfg.steps);
        m.flag("batch", tcfg.batch_size);
        m.flag("lambda-mse", a.lambda_mse);
        m.flag("lambda-adv", a.lambda_adv);
        m.flag("lambda-rec", a.lambda_rec);
        m.flag("reweight", a.reweight);
        m.flag("checkpoint-every", a.checkpoint_every);
        m.input(cfg_path)?;
        if let Some(w) = &a.weights_from {
            m.flag("weights-from", w.display());
            m.input(w)?;
        }
        Trainer::new(corpus, gcfg, tcfg)?
    };

    let out_dir = a.out_dir.clone();
    trainer.run_with(|t| {
        save_checkpoint(t, &out_dir.join(format!("checkpoint-{:06}.ggck", t.step())))
    })?;

    let model_path = a.out_dir.join("model.ggck");
    save_checkpoint(&trainer, &model_path)?;
    let loss_path = a.out_dir.join("loss.csv");
    fs::write(&loss_path, trainer.loss_csv()).map_err(|e| Error::io(&loss_path, e))?;
    m.write_into(&a.out_dir)?;

    println!("trained to step {}; model at {}", trainer.step(), model_path.display());
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt, None)?;
    let enc = GlueNetEncoder { config: ckpt.gcfg.clone(), params: ckpt.encoder_params };
    let store = read_gge(&a.input)?;
    let out = translate(&enc, &store)?;
    write_gge(&out, &a.out)?;

    let mut m = RunManifest::new("translate", None);
    m.flag("ckpt", a.ckpt.display());
    m.flag("in", a.input.display());
    m.flag("out", a.out.display());
    m.input(&a.ckpt)?;
    m.input(&a.input)?;
    m.write_alongside(&a.out)?;

    println!("translated {} records to {}", out.count(), a.out.display());
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let store_a = read_gge(&a.a)?;
    let store_b = read_gge(&a.b)?;
    if store_a.count() != store_b.count() {
        return Err(Error::CountMismatch { src: store_a.count(), tgt: store_b.count() });
    }
    let params = FusionParams::new(a.k);
    let mut records = Vec::with_capacity(store_a.count());
    for i in 0..store_a.count() {
        records.push(topk_fuse(&store_a.record(i), &store_b.record(i), &params)?);
    }
    // Ids survive only when both sides agree on them record for record.
    let ids = match (store_a.ids(), store_b.ids()) {
        (Some(x), Some(y)) if x == y => Some(x.to_vec()),
        _ => None,
    };
    let fused = EmbeddingStore::from_records(&records, ids)?;
    write_gge(&fused, &a.out)?;

    let mut m = RunManifest::new("fuse", None);
    m.flag("a", a.a.display());
    m.flag("b", a.b.display());
    m.flag("k", a.k);
    m.flag("out", a.out.display());
    m.input(&a.a)?;
    m.input(&a.b)?;
    m.write_alongside(&a.out)?;

    println!("fused {} records (k = {}) to {}", fused.count(), a.k, a.out.display());
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let ckpt = load_checkpoint(&a.ckpt, None)?;
    let enc = GlueNetEncoder { config: ckpt.gcfg.clone(), params: ckpt.encoder_params };
    let dec = GlueNetDecoder { config: ckpt.gcfg.mirrored(), params: ckpt.decoder_params };
    let src = read_gge(&a.src)?;
    let tgt = read_gge(&a.tgt)?;

    let translated = translate(&enc, &src)?;
    let translated_records = translated.records();
    let target_records = tgt.records();
    let projection = pca_project(&[
        ("translated", &translated_records[..]),
        ("target", &target_records[..]),
    ])?;
    let projection_path = a.out_dir.join("projection.csv");
    export_projection_csv(&projection, &projection_path)?;

    // Token dissimilarity of the consumer-side records: the structure the
    // reweighting mechanism keys on.
    let dissim = dissimilarity_map(&target_records)?;
    let dissim_path = a.out_dir.join("dissimilarity.csv");
    export_dissimilarity_csv(&dissim, &dissim_path)?;

    let stability = loop_stability_eval(&enc, &dec, &src)?;
    let report = format!("e1 = {}\ne2 = {}\n", stability.e1, stability.e2);
    let report_path = a.out_dir.join("loop_stability.txt");
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;

    let mut m = RunManifest::new("diagnose", None);
    m.flag("ckpt", a.ckpt.display());
    m.flag("src", a.src.display());
    m.flag("tgt", a.tgt.display());
    m.flag("out-dir", a.out_dir.display());
    m.input(&a.ckpt)?;
    m.input(&a.src)?;
    m.input(&a.tgt)?;
    m.write_into(&a.out_dir)?;

    print!("{report}");
    println!("wrote {} and {}", projection_path.display(), dissim_path.display());
    Ok(())
}

fn cmd_param_count(a: ParamCountArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let cfg = GlueNetConfig::from_text(&text)?;
    cfg.validate()?;
    println!("{}", param_count(&cfg));
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.file).map_err(|e| Error::io(&a.file, e))?;
    match bytes.get(..4) {
        Some(b"GGEM") => inspect_gge(&a.file),
        Some(b"GGCK") => inspect_checkpoint(&a.file),
        _ => Err(Error::Format {
            what: "magic",
            detail: format!("{} is neither a GGE nor a GGCK file", a.file.display()),
        }),
    }
}

fn inspect_gge(path: &Path) -> Result<()> {
    let store = read_gge(path)?;
    println!("format = GGE");
    println!("version = 1");
    println!("count = {}", store.count());
    println!("tokens = {}", store.tokens());
    println!("dim = {}", store.dim());
    println!("ids = {}", if store.ids().is_some() { "present" } else { "absent" });
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path, None)?;
    let digest = Sha256::digest(ckpt.gcfg.to_text().as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("format = GGCK");
    println!("version = {CHECKPOINT_VERSION}");
    println!("architecture_digest = {hex}");
    println!(
        "architecture = {}x{} -> {}x{} ({} rms)",
        ckpt.gcfg.token_in, ckpt.gcfg.dim_in, ckpt.gcfg.token_out, ckpt.gcfg.dim_out,
        ckpt.gcfg.num_rms
    );
    println!("step = {}", ckpt.step);
    println!("steps_budget = {}", ckpt.tcfg.steps);
    println!("shuffle_seed = {}", ckpt.shuffle_seed);
    println!("encoder_tensors = {}", ckpt.encoder_params.len());
    println!("decoder_tensors = {}", ckpt.decoder_params.len());
    println!("discriminator_tensors = {}", ckpt.disc_params.len());
    println!("optimizer_t = {}", ckpt.gen_opt.t());
    Ok(())
}
