use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minirec_core::config::{RunConfig, Variant};
use minirec_core::eval::MetricsReport;
use minirec_core::pipeline::{Pipeline, StageRecord};
use minirec_core::Error;

#[derive(Parser)]
#[command(name = "minirec", version, about = "Generative recommendation over semantic IDs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `section.key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over MINIREC_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rebuild stages whose output directory already exists.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog and interaction log.
    GenData,
    /// Fit the residual quantizer and assign semantic IDs.
    TrainTokenizer,
    /// Supervised training on the mixed-task corpus.
    Sft,
    /// GRPO starting from the SFT checkpoint.
    Rl,
    /// Evaluate the baseline and trained checkpoints on the test split.
    Eval,
    /// Run every stage in order.
    All,
    /// Compare variants side by side.
    Ablate {
        /// Variant name; repeat for several. Defaults to every variant.
        #[arg(long)]
        variant: Vec<String>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_record(r: &StageRecord) {
    println!("{} -> {}", r.stage, r.dir.display());
}

fn print_report(r: &MetricsReport) {
    let hr: Vec<String> = r.hr.iter().map(|(k, v)| format!("HR@{k}={v:.4}")).collect();
    let ndcg: Vec<String> = r.ndcg.iter().map(|(k, v)| format!("NDCG@{k}={v:.4}")).collect();
    println!("{:<10} {} {} diversity={:.3}", r.stage, hr.join(" "), ndcg.join(" "), r.mean_diversity);
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.render());
        return Ok(());
    }
    let mut p = Pipeline::new(cfg);
    p.force = cli.force;
    match &cli.command {
        Command::GenData => print_record(&p.gen_data()?),
        Command::TrainTokenizer => print_record(&p.train_tokenizer()?),
        Command::Sft => print_record(&p.sft()?),
        Command::Rl => print_record(&p.rl()?),
        Command::Eval => p.eval()?.all().into_iter().for_each(print_report),
        Command::All => p.run_all()?.all().into_iter().for_each(print_report),
        Command::Ablate { variant } => {
            let names: Vec<&str> = if variant.is_empty() {
                Variant::NAMES.to_vec()
            } else {
                variant.iter().map(String::as_str).collect()
            };
            let variants = names.iter().map(|n| Variant::from_name(n)).collect::<Result<Vec<_>, _>>()?;
            print!("{}", p.ablate(&variants)?.side_by_side());
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

/// Problems the user can fix get exit status 1; everything else is 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::MissingArtifact { .. } | Error::Parse { .. } | Error::Incompatible { .. } => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are user errors; --help and --version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
