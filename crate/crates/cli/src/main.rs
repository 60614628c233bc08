mod attest;
mod bmac_cmd;
mod card;
mod config;
mod output;
mod puf;
mod shards;
mod wallet;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

pub use output::{Output, Status};

const AFTER_HELP: &str = "\
Exit codes: 0 success or accept, 1 security rejection, 2 usage or input error.

A --config file holds flat key=value lines ('#' starts a comment). Keys are
long option names of the selected subcommand, e.g. `seed=7` or
`cost-mul=60`; flags given on the command line take precedence.";

#[derive(Parser, Debug)]
#[command(name = "cryptoterm", version, about = "Crypto terminal countermeasure toolkit", after_help = AFTER_HELP)]
pub struct Cli {
    /// key=value file supplying default option values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the machine-readable summary (JSON) instead of human text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Directory for artifacts (CSV, PPM, JSON summaries, transcripts).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Bijective-MAC fingerprints and authentication codes.
    #[command(subcommand)]
    Bmac(bmac_cmd::BmacCmd),
    /// Verifier/device attestation sessions and attack runs.
    #[command(subcommand)]
    Attest(attest::AttestCmd),
    /// Duplicated code-shard search and compression.
    #[command(subcommand)]
    Shards(shards::ShardsCmd),
    /// SRAM power-up fingerprint experiments.
    #[command(subcommand)]
    Puf(puf::PufCmd),
    /// ECDSA key-leak analyses on signature datasets.
    #[command(subcommand)]
    Ecdsa(wallet::EcdsaCmd),
    /// Hierarchical key derivation and brainwallet search.
    #[command(subcommand)]
    Keys(wallet::KeysCmd),
    /// Secure element sessions over APDUs.
    #[command(subcommand)]
    Card(card::CardCmd),
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let out = Output::new(cli.json, cli.out)?;
    match cli.command {
        Command::Bmac(c) => bmac_cmd::run(c, &out),
        Command::Attest(c) => attest::run(c, &out),
        Command::Shards(c) => shards::run(c, &out),
        Command::Puf(c) => puf::run(c, &out),
        Command::Ecdsa(c) => wallet::run_ecdsa(c, &out),
        Command::Keys(c) => wallet::run_keys(c, &out),
        Command::Card(c) => card::run(c, &out),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let args = match config::apply(&Cli::command(), args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Rejected) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
