use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use cryptoterm_core::bmac::{self, AuthCode, CostModel, HashAlg, MemoryImage};
use cryptoterm_core::numlib::{PermutationParams, PrimeGroup};
use serde::Serialize;

use crate::output::{read, read_text, Output, Status};

#[derive(Args, Debug, Clone)]
pub struct ImageArgs {
    /// Raw firmware binary.
    #[arg(long)]
    pub image: PathBuf,
    /// key=value region manifest (`order=FLASH,EEPROM`, `FLASH=<bytes>`);
    /// without it the whole binary is FLASH.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl ImageArgs {
    pub fn load(&self) -> anyhow::Result<MemoryImage> {
        let raw = read(&self.image)?;
        Ok(match &self.manifest {
            Some(m) => MemoryImage::from_manifest(&read_text(m)?, &raw)?,
            None => MemoryImage::flash(raw)?,
        })
    }
}

#[derive(Args, Debug, Clone)]
pub struct CostArgs {
    /// Cycles per modular multiplication.
    #[arg(long, default_value_t = 60)]
    pub cost_mul: u64,
    /// Cycles per byte fetched and absorbed.
    #[arg(long, default_value_t = 10)]
    pub cost_byte: u64,
    /// Setup cycles.
    #[arg(long, default_value_t = 1000)]
    pub cost_fixed: u64,
}

impl CostArgs {
    pub fn model(&self) -> CostModel {
        CostModel {
            cost_mul: self.cost_mul,
            cost_byte: self.cost_byte,
            cost_fixed: self.cost_fixed,
        }
    }
}

/// Explicit walk parameters instead of deriving them from the seed.
#[derive(Args, Debug, Clone)]
pub struct ExplicitParams {
    /// Safe prime of the permutation group.
    #[arg(long)]
    pub prime: Option<u64>,
    #[arg(long)]
    pub g1: Option<u64>,
    #[arg(long)]
    pub g2: Option<u64>,
    #[arg(long)]
    pub s1: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum BmacCmd {
    /// Digest, cycle count and authentication code of an image.
    Compute {
        #[command(flatten)]
        image: ImageArgs,
        /// Attestation seed (1 to 2^31-2); ignored with --prime.
        #[arg(long, default_value_t = 1)]
        seed: u32,
        #[arg(long, default_value = "sha256")]
        hash: HashAlg,
        #[command(flatten)]
        cost: CostArgs,
        #[command(flatten)]
        params: ExplicitParams,
    },
    /// Checks a received code against the reference image.
    Verify {
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long, default_value_t = 1)]
        seed: u32,
        /// Received code as 4 hex digits, or a blink pattern like sssL.ssLs.ssLL.sLss.
        #[arg(long)]
        code: String,
        #[arg(long, default_value = "sha256")]
        hash: HashAlg,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// CSV histogram of tick counts over consecutive seeds.
    Histogram {
        #[command(flatten)]
        image: ImageArgs,
        /// First seed.
        #[arg(long, default_value_t = 1)]
        seed: u32,
        #[arg(long, default_value_t = 1000)]
        seeds: u32,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value = "sha256")]
        hash: HashAlg,
        #[command(flatten)]
        cost: CostArgs,
    },
}

#[derive(Serialize)]
struct ComputeSummary {
    bytes: usize,
    seed: Option<u32>,
    hash: String,
    digest: String,
    cycles: u64,
    ticks: u64,
    code: String,
    blink: String,
}

#[derive(Serialize)]
struct VerifySummary {
    seed: u32,
    expected: String,
    received: String,
    accept: bool,
}

pub fn parse_code(s: &str) -> anyhow::Result<AuthCode> {
    if let Some(c) = bmac::blink_decode(s) {
        return Ok(c);
    }
    let s = s.trim_start_matches("0x");
    if s.len() != 4 {
        bail!("code must be 4 hex digits or a 16-symbol blink pattern");
    }
    Ok(AuthCode(u16::from_str_radix(s, 16).context("code is not hex")?))
}

pub fn run(cmd: BmacCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        BmacCmd::Compute {
            image,
            seed,
            hash,
            cost,
            params,
        } => {
            let img = image.load()?;
            let cost = cost.model();
            if params.prime.is_none() && (params.g1.is_some() || params.g2.is_some() || params.s1.is_some()) {
                bail!("--g1, --g2 and --s1 need --prime");
            }
            let (result, seed) = match params.prime {
                Some(p) => {
                    let (Some(g1), Some(g2), Some(s1)) = (params.g1, params.g2, params.s1) else {
                        bail!("--prime needs --g1, --g2 and --s1");
                    };
                    let params = PermutationParams::new(PrimeGroup::new(p)?, g1, g2, s1)?;
                    (bmac::bmac_with_params(&img, &params, hash, &cost)?.0, None)
                }
                None => (bmac::bmac_compute(&img, seed, hash, &cost)?, Some(seed)),
            };
            let code = bmac::auth_code(&result);
            out.human(format!("digest {}", hex::encode(result.digest)));
            out.human(format!("cycles {} ticks {}", result.cycles, result.ticks));
            out.human(format!("code {code} blink {}", bmac::blink_encode(code)));
            out.summary(
                "bmac",
                &ComputeSummary {
                    bytes: img.len(),
                    seed,
                    hash: hash.to_string(),
                    digest: hex::encode(result.digest),
                    cycles: result.cycles,
                    ticks: result.ticks,
                    code: code.to_string(),
                    blink: bmac::blink_encode(code),
                },
            )?;
            Ok(Status::Ok)
        }
        BmacCmd::Verify {
            image,
            seed,
            code,
            hash,
            cost,
        } => {
            let received = parse_code(&code)?;
            let img = image.load()?;
            let expected = bmac::auth_code(&bmac::bmac_compute(&img, seed, hash, &cost.model())?);
            let accept = expected == received;
            out.human(format!(
                "{} (expected {expected}, received {received})",
                if accept { "ACCEPT" } else { "REJECT" }
            ));
            out.summary(
                "verify",
                &VerifySummary {
                    seed,
                    expected: expected.to_string(),
                    received: received.to_string(),
                    accept,
                },
            )?;
            Ok(Status::from_accept(accept))
        }
        BmacCmd::Histogram {
            image,
            seed,
            seeds,
            bins,
            hash,
            cost,
        } => {
            if seeds == 0 || bins == 0 {
                bail!("--seeds and --bins must be positive");
            }
            let img = image.load()?;
            let cost = cost.model();
            let mut ticks = Vec::with_capacity(seeds as usize);
            for s in seed..seed.saturating_add(seeds) {
                ticks.push(bmac::bmac_compute(&img, s, hash, &cost)?.ticks);
            }
            let csv = histogram_csv(&ticks, bins);
            out.human(csv.trim_end());
            out.artifact("histogram.csv", csv.as_bytes())?;
            Ok(Status::Ok)
        }
    }
}

/// `bin_start,bin_end,count` rows over equal-width bins covering the data.
pub fn histogram_csv(values: &[u64], bins: usize) -> String {
    let lo = *values.iter().min().unwrap_or(&0);
    let hi = *values.iter().max().unwrap_or(&0);
    let width = (hi - lo + 1).div_ceil(bins as u64);
    let mut counts = vec![0u64; bins];
    for v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let mut csv = String::from("bin_start,bin_end,count\n");
    for (i, c) in counts.iter().enumerate() {
        let start = lo + i as u64 * width;
        csv.push_str(&format!("{start},{},{c}\n", start + width - 1));
    }
    csv
}
