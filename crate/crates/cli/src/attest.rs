use std::path::PathBuf;

use anyhow::bail;
use clap::{Subcommand, ValueEnum};
use cryptoterm_core::bmac::{HashAlg, MemoryImage};
use cryptoterm_core::devsim::{
    self, AttackConfig, CheckReport, LossRule, SimDevice, StopStartStats, TimerConfig, Verifier, VerifierPolicy,
};
use cryptoterm_core::shardlib::{self, IsaParams, ShardOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bmac_cmd::{CostArgs, ImageArgs};
use crate::output::{read, Output, Status};

/// Monte-Carlo trials per batch; batch `i` uses seed `seed + i`, so results
/// do not depend on `--jobs`.
const TRIALS_PER_BATCH: u64 = 1000;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    StopStart,
    Hideout,
}

#[derive(Subcommand, Debug)]
pub enum AttestCmd {
    /// Honest device answering attestation requests over the framed channel.
    Run {
        #[command(flatten)]
        image: ImageArgs,
        /// Seed for the session challenges.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        sessions: u32,
        #[arg(long, default_value = "sha256")]
        hash: HashAlg,
        /// Accept codes within this many ticks of the expected count.
        #[arg(long, default_value_t = 0)]
        tick_window: u64,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Compromised device against an honest verifier.
    Attack {
        #[arg(long, value_enum)]
        attack: AttackKind,
        /// Firmware to attest; stop-start falls back to random bytes.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Size of the random image when no --image is given.
        #[arg(long, default_value_t = 8192)]
        bytes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Framed sessions to run and transcribe.
        #[arg(long, default_value_t = 1)]
        sessions: u32,
        /// Stop-start Monte-Carlo trials; 0 skips the experiment.
        #[arg(long, default_value_t = 0)]
        trials: u64,
        /// Timer loss rule for stop-start: wrap or uniform.
        #[arg(long, default_value = "wrap")]
        loss_rule: LossRule,
        /// Worker threads for the Monte-Carlo batches.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Hideout payload; defaults to 0xFF over the whole freed region.
        #[arg(long)]
        payload: Option<PathBuf>,
        /// Minimum shard length for the hideout compression.
        #[arg(long, default_value_t = 16)]
        min_len: usize,
        #[arg(long, default_value = "sha256")]
        hash: HashAlg,
        #[command(flatten)]
        cost: CostArgs,
    },
}

#[derive(Serialize)]
struct SessionRow {
    session: u32,
    seed: u32,
    #[serde(flatten)]
    report: CheckReport,
}

#[derive(Serialize)]
struct AttackSummary {
    attack: &'static str,
    bytes: usize,
    sessions: Vec<SessionRow>,
    rejected: usize,
    stop_start: Option<StopStartStats>,
    freed_bytes: Option<usize>,
}

fn run_sessions(
    mut device: SimDevice,
    verifier: &Verifier,
    count: u32,
    seed: u64,
    out: &Output,
) -> anyhow::Result<Vec<SessionRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut transcript = String::new();
    let mut csv = String::from("session,seed,expected,received,expected_ticks,verdict\n");
    for session in 0..count {
        let s = rng.gen_range(1..0x7fff_ffffu32);
        let (dev, outcome) = devsim::channel_run(device, verifier, s, None);
        device = dev;
        let outcome = outcome?;
        let r = &outcome.report;
        let verdict = if r.verdict.accepted() { "accept" } else { "reject" };
        out.human(format!(
            "session {session} seed {s}: expected {} received {} -> {}",
            r.expected,
            r.received,
            verdict.to_uppercase()
        ));
        transcript.push_str(&outcome.transcript.hex_lines());
        csv.push_str(&format!(
            "{session},{s},{},{},{},{verdict}\n",
            r.expected, r.received, r.expected_ticks
        ));
        rows.push(SessionRow {
            session,
            seed: s,
            report: outcome.report,
        });
    }
    out.human(transcript.trim_end());
    out.artifact("transcript.txt", transcript.as_bytes())?;
    out.artifact("sessions.csv", csv.as_bytes())?;
    Ok(rows)
}

/// Batched stop-start experiment reduced in batch order.
pub fn stop_start_batches(
    bytes: usize,
    trials: u64,
    rule: LossRule,
    seed: u64,
    jobs: usize,
) -> anyhow::Result<StopStartStats> {
    let batches: Vec<(u64, u64)> = (0..trials.div_ceil(TRIALS_PER_BATCH))
        .map(|i| (i, TRIALS_PER_BATCH.min(trials - i * TRIALS_PER_BATCH)))
        .collect();
    let jobs = jobs.clamp(1, batches.len().max(1));
    let per_job = batches.len().div_ceil(jobs);
    let results: Vec<anyhow::Result<Vec<StopStartStats>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batches
            .chunks(per_job)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&(i, n)| Ok(devsim::stop_start_experiment(bytes, n, Some(rule), seed.wrapping_add(i))?))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut extra = 0.0;
    let mut detected = 0.0;
    for stats in results.into_iter().collect::<anyhow::Result<Vec<_>>>()?.into_iter().flatten() {
        extra += stats.mean_extra_cycles_per_byte * stats.trials as f64;
        detected += stats.detection_rate * stats.trials as f64;
    }
    Ok(StopStartStats {
        trials,
        bytes: bytes as u64,
        mean_extra_cycles_per_byte: extra / trials as f64,
        detection_rate: detected / trials as f64,
    })
}

pub fn run(cmd: AttestCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        AttestCmd::Run {
            image,
            seed,
            sessions,
            hash,
            tick_window,
            cost,
        } => {
            let img = image.load()?;
            let cost = cost.model();
            cost.validate()?;
            let mut verifier = Verifier::new(img.clone());
            verifier.cost = cost;
            verifier.hash = hash;
            if tick_window > 0 {
                verifier.policy = VerifierPolicy::TickWindow(tick_window);
            }
            let device = SimDevice::new(img, cost, AttackConfig::Honest, TimerConfig::default(), seed)?;
            let rows = run_sessions(device, &verifier, sessions, seed, out)?;
            let rejected = rows.iter().filter(|r| !r.report.verdict.accepted()).count();
            out.summary("attest", &rows)?;
            Ok(Status::from_accept(rejected == 0))
        }
        AttestCmd::Attack {
            attack,
            image,
            bytes,
            seed,
            sessions,
            trials,
            loss_rule,
            jobs,
            payload,
            min_len,
            hash,
            cost,
        } => {
            let cost = cost.model();
            cost.validate()?;
            let img = match &image {
                Some(p) => MemoryImage::flash(read(p)?)?,
                None if attack == AttackKind::StopStart => {
                    if bytes == 0 {
                        bail!("--bytes must be positive");
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    MemoryImage::flash((0..bytes).map(|_| rng.gen()).collect())?
                }
                None => bail!("the hideout attack needs --image"),
            };
            let mut verifier = Verifier::new(img.clone());
            verifier.cost = cost;
            verifier.hash = hash;
            let timer = TimerConfig {
                loss_rule,
                noise_sigma: 0.0,
            };
            let (config, freed) = match attack {
                AttackKind::StopStart => (AttackConfig::StopStart, None),
                AttackKind::Hideout => {
                    let linear = img.to_linear();
                    let report = shardlib::find_shards(
                        &linear,
                        &ShardOptions {
                            min_len,
                            seed,
                            ..Default::default()
                        },
                    )?;
                    let plan = shardlib::plan_compression(&report, IsaParams::default())?;
                    let freed = plan.freed();
                    if freed == 0 {
                        bail!("no duplicated shards free any room in this image");
                    }
                    let payload = match &payload {
                        Some(p) => read(p)?,
                        None => vec![0xFF; freed],
                    };
                    out.human(format!("compression frees {freed} bytes; payload {} bytes", payload.len()));
                    (AttackConfig::Hideout { payload, plan }, Some(freed))
                }
            };
            let device = SimDevice::new(img.clone(), cost, config, timer, seed)?;
            let rows = run_sessions(device, &verifier, sessions, seed, out)?;
            let rejected = rows.iter().filter(|r| !r.report.verdict.accepted()).count();
            let stats = if attack == AttackKind::StopStart && trials > 0 {
                let s = stop_start_batches(img.len(), trials, loss_rule, seed, jobs)?;
                out.human(format!(
                    "stop-start over {} trials at {} bytes: extra {:.4} cycles/byte, detection {:.2}%",
                    s.trials,
                    s.bytes,
                    s.mean_extra_cycles_per_byte,
                    100.0 * s.detection_rate
                ));
                let csv = format!(
                    "trials,bytes,mean_extra_cycles_per_byte,detection_rate\n{},{},{},{}\n",
                    s.trials, s.bytes, s.mean_extra_cycles_per_byte, s.detection_rate
                );
                out.artifact("stopstart.csv", csv.as_bytes())?;
                Some(s)
            } else {
                None
            };
            out.human(format!("{rejected} of {} sessions rejected", rows.len()));
            out.summary(
                "attack",
                &AttackSummary {
                    attack: match attack {
                        AttackKind::StopStart => "stop-start",
                        AttackKind::Hideout => "hideout",
                    },
                    bytes: img.len(),
                    sessions: rows,
                    rejected,
                    stop_start: stats,
                    freed_bytes: freed,
                },
            )?;
            Ok(Status::from_accept(rejected == 0))
        }
    }
}
