use std::path::PathBuf;

use clap::{Args, Subcommand};
use cryptoterm_core::shardlib::{self, IsaParams, ShardOptions, ShardReport};
use serde::Serialize;

use crate::output::{read, write, Output, Status};

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    /// Raw firmware binary.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 16)]
    min_len: usize,
    /// One byte per image byte, 1 marking control-flow bytes.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Shard start/length alignment; 2 by default when a mask is given.
    #[arg(long)]
    alignment: Option<usize>,
    /// Seed for the bytes that overwrite found replicas during the search.
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// CALL instruction size in bytes.
    #[arg(long, default_value_t = 2)]
    call: usize,
    /// JUMP instruction size in bytes.
    #[arg(long, default_value_t = 2)]
    jump: usize,
    /// RET instruction size in bytes.
    #[arg(long, default_value_t = 2)]
    ret: usize,
}

impl SearchArgs {
    fn isa(&self) -> IsaParams {
        IsaParams {
            call: self.call,
            jump: self.jump,
            ret: self.ret,
        }
    }

    fn search(&self) -> anyhow::Result<(Vec<u8>, ShardReport)> {
        let image = read(&self.image)?;
        let mask = match &self.mask {
            Some(p) => Some(shardlib::parse_mask(&read(p)?)),
            None => None,
        };
        let report = shardlib::find_shards(
            &image,
            &ShardOptions {
                min_len: self.min_len,
                mask,
                alignment: self.alignment,
                seed: self.seed,
            },
        )?;
        Ok((image, report))
    }
}

#[derive(Subcommand, Debug)]
pub enum ShardsCmd {
    /// Lists duplicated shards, longest first.
    Find {
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Replaces duplicated shards by subroutine calls and writes the result.
    Compress {
        #[command(flatten)]
        search: SearchArgs,
        /// Rewritten image, same length as the input.
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Serialize)]
struct CompressSummary {
    image_len: usize,
    shards: usize,
    dropped: usize,
    freed: usize,
    free_region: [usize; 2],
}

pub fn run(cmd: ShardsCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        ShardsCmd::Find { search } => {
            let (_, report) = search.search()?;
            let lines = shardlib::report_lines(&report, &search.isa());
            out.human(format!("{} shards in {} bytes", report.shards.len(), report.image_len));
            out.human(lines.trim_end());
            out.artifact("shards.txt", lines.as_bytes())?;
            out.summary("shards", &report)?;
            Ok(Status::Ok)
        }
        ShardsCmd::Compress { search, output } => {
            let (image, report) = search.search()?;
            let plan = shardlib::plan_compression(&report, search.isa())?;
            let rewritten = shardlib::apply_compression(&image, &plan)?;
            write(&output, &rewritten)?;
            let region = plan.free_region();
            out.human(format!(
                "{} shards applied, {} dropped; {} bytes freed at {}..{}",
                plan.shards.len(),
                plan.dropped.len(),
                plan.freed(),
                region.start,
                region.end
            ));
            out.artifact("plan.json", serde_json::to_string_pretty(&plan)?.as_bytes())?;
            out.summary(
                "compress",
                &CompressSummary {
                    image_len: image.len(),
                    shards: plan.shards.len(),
                    dropped: plan.dropped.len(),
                    freed: plan.freed(),
                    free_region: [region.start, region.end],
                },
            )?;
            Ok(Status::Ok)
        }
    }
}
