//! `vlaq` command-line driver.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 for
//! numerical failures (non-finite values, failed gradient checks).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlaq_core::checks::{run_gradcheck, GradcheckOptions, OPS};
use vlaq_core::config::RunConfig;
use vlaq_core::io::checkpoint::Checkpoint;
use vlaq_core::io::descriptors::{DescriptorFile, Role};
use vlaq_core::io::manifest::DatasetManifest;
use vlaq_core::io::synth::generate_synthetic;
use vlaq_core::model::Model;
use vlaq_core::pipeline::{build_index, encode_manifest, evaluate, token_dims};
use vlaq_core::train::{TrainOptions, Trainer, TrainingSet};
use vlaq_core::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.vprc";
const LOG_FILE: &str = "train.log";
const DESCRIPTOR_FILE: &str = "descriptors.vprd";
const INDEX_FILE: &str = "index.vprd";

#[derive(Parser, Debug)]
#[command(
    name = "vlaq",
    version,
    about = "Place recognition descriptors: fuse, aggregate, train, retrieve"
)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Inputs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    descriptors: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (manifest and token files).
    Synth,
    /// Train fusion and aggregation parameters; resumes from --checkpoint.
    Train(Inputs),
    /// Encode every manifest image to a global descriptor.
    Encode(Inputs),
    /// Build a database index from encoded descriptors.
    Index(Inputs),
    /// Nearest database entries for one encoded query.
    Query {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        descriptors: Option<PathBuf>,
        /// Query id within the descriptor file.
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Recall@K of encoded queries against the database.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
        /// Corrupt the analytic gradient of one op (self-test of the checker).
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    explicit_out: bool,
}

impl Ctx {
    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = flag
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::config(format!("no {what} given (flag or [paths] entry)")))?;
    if !p.exists() {
        return Err(Error::invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_model(ctx: &Ctx, checkpoint: Option<&Path>, manifest: &DatasetManifest) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let model = Checkpoint::load(p)?.restore()?;
            let (d, c) = token_dims(manifest)?;
            if (d, c) != (model.config.dino_dim, model.config.clip_dim) {
                return Err(Error::invalid(format!(
                    "checkpoint expects token dims ({}, {}), manifest has ({d}, {c})",
                    model.config.dino_dim, model.config.clip_dim
                )));
            }
            Ok(model)
        }
        None => {
            log::warn!(
                "no checkpoint given; encoding with a fresh initialization (seed {})",
                ctx.cfg.seed
            );
            let (d, c) = token_dims(manifest)?;
            Model::init(ctx.cfg.model(d, c), ctx.cfg.seed)
        }
    }
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let ds = generate_synthetic(&ctx.cfg.synth)?;
    ds.write(&ctx.out)?;
    println!(
        "wrote {} images of {} places to {}",
        ds.images.len(),
        ctx.cfg.synth.places,
        ctx.out_file("manifest.toml").display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let manifest = DatasetManifest::load(&pick(&inputs.manifest, &ctx.cfg.paths.manifest, "manifest")?)?;
    let data = TrainingSet::from_manifest(&manifest)?;
    let opts = TrainOptions::from_config(&ctx.cfg);
    let resume = inputs.checkpoint.as_ref().or(ctx.cfg.paths.checkpoint.as_ref());
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            log::info!("resuming from {} at step {}", p.display(), ck.step);
            Trainer::resume(&ck, data, opts)?
        }
        None => {
            let (d, c) = data.dims()?;
            Trainer::new(Model::init(ctx.cfg.model(d, c), ctx.cfg.seed)?, data, opts)?
        }
    };
    let log_path = ctx.out_file(LOG_FILE);
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if resume.is_none() {
        writeln!(log_file, "step loss lr").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut write_err = None;
    let result = trainer.run(|s| {
        log::info!(
            "step {} epoch {:.2} loss {:.6} lr {:.3e} pairs {}",
            s.step,
            s.epoch,
            s.loss,
            s.lr,
            s.pairs
        );
        if let Err(e) = writeln!(log_file, "{}", s.line()) {
            write_err.get_or_insert(e);
        }
    });
    // keep the progress made so far even when a step fails
    let ck_path = ctx.out_file(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ck_path)?;
    result?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    println!("trained to step {}; checkpoint {}", trainer.step, ck_path.display());
    Ok(())
}

fn cmd_encode(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let manifest = DatasetManifest::load(&pick(&inputs.manifest, &ctx.cfg.paths.manifest, "manifest")?)?;
    let ck = inputs.checkpoint.as_ref().or(ctx.cfg.paths.checkpoint.as_ref());
    let model = load_model(ctx, ck.map(PathBuf::as_path), &manifest)?;
    let file = encode_manifest(&model, &manifest)?;
    let path = ctx.out_file(DESCRIPTOR_FILE);
    file.save(&path)?;
    println!(
        "encoded {} images (dim {}) to {}",
        file.records.len(),
        file.dim,
        path.display()
    );
    Ok(())
}

fn cmd_index(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let file = DescriptorFile::load(&pick(
        &inputs.descriptors,
        &ctx.cfg.paths.descriptors,
        "descriptor file",
    )?)?;
    let index = build_index(&file)?;
    let db = DescriptorFile {
        dim: file.dim,
        records: file.with_role(Role::Database).cloned().collect(),
    };
    let path = ctx.out_file(INDEX_FILE);
    db.save(&path)?;
    println!("indexed {} database descriptors to {}", index.len(), path.display());
    Ok(())
}

fn cmd_query(ctx: &Ctx, index: &Option<PathBuf>, descriptors: &Option<PathBuf>, id: &str, k: usize) -> Result<()> {
    let db = DescriptorFile::load(&pick(index, &ctx.cfg.paths.index, "index")?)?;
    let index = build_index(&db)?;
    let file = DescriptorFile::load(&pick(descriptors, &ctx.cfg.paths.descriptors, "descriptor file")?)?;
    let query = file
        .records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::invalid(format!("no descriptor with id {id}")))?;
    println!("rank id similarity");
    for (i, n) in index.knn_query(&query.values, k)?.iter().enumerate() {
        println!("{} {} {:.6}", i + 1, n.id, n.similarity);
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, inputs: &Inputs, ks: &[usize]) -> Result<()> {
    let manifest = DatasetManifest::load(&pick(&inputs.manifest, &ctx.cfg.paths.manifest, "manifest")?)?;
    let file = DescriptorFile::load(&pick(
        &inputs.descriptors,
        &ctx.cfg.paths.descriptors,
        "descriptor file",
    )?)?;
    let report = evaluate(&file, &manifest, ks)?;
    let table = report.to_table();
    vlaq_core::io::write_file(&ctx.out_file("report.txt"), table.as_bytes())?;
    vlaq_core::io::write_file(&ctx.out_file("report.json"), report.to_json().as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, instances: usize, perturb: &Option<String>) -> Result<()> {
    if let Some(op) = perturb.as_deref().filter(|op| !OPS.contains(op)) {
        return Err(Error::invalid(format!("unknown op {op}; known: {}", OPS.join(", "))));
    }
    let summary = run_gradcheck(&GradcheckOptions {
        seed: ctx.cfg.seed,
        instances,
        perturb: perturb.clone(),
        ..GradcheckOptions::default()
    })?;
    let table = summary.to_table();
    print!("{table}");
    if ctx.explicit_out {
        vlaq_core::io::write_file(&ctx.out_file("gradcheck.txt"), table.as_bytes())?;
    }
    if !summary.passed() {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            summary.max_rel_err(),
            summary.tolerance
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    let explicit = cli.out.clone().or_else(|| cfg.paths.out.clone());
    let ctx = Ctx {
        explicit_out: explicit.is_some(),
        out: explicit.unwrap_or_else(|| PathBuf::from(".")),
        cfg,
    };
    match &cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Train(i) => cmd_train(&ctx, i),
        Command::Encode(i) => cmd_encode(&ctx, i),
        Command::Index(i) => cmd_index(&ctx, i),
        Command::Query {
            index,
            descriptors,
            id,
            k,
        } => cmd_query(&ctx, index, descriptors, id, *k),
        Command::Eval { inputs, k } => cmd_eval(&ctx, inputs, k),
        Command::Gradcheck { instances, perturb } => cmd_gradcheck(&ctx, *instances, perturb),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
