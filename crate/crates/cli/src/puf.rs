use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use cryptoterm_core::pufsim::{
    self, Bitmap, CellClass, DynamicPolicy, GenuineDevice, Palette, PopulationConfig, PowerUp, PufReference,
    ReplayClone, SramArray, Waveform, READ_SECONDS, STATIC_THRESHOLD,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::output::{read_json, write, Output, Status};

#[derive(Args, Debug, Clone)]
pub struct PopArgs {
    /// Population JSON written by `puf populate`; otherwise one is sampled.
    #[arg(long)]
    array: Option<PathBuf>,
    /// Seed of the sampled population.
    #[arg(long, default_value_t = 1)]
    population_seed: u64,
    #[arg(long, default_value_t = 8192)]
    cells: usize,
}

impl PopArgs {
    fn load(&self) -> anyhow::Result<SramArray> {
        match &self.array {
            Some(p) => read_json(p),
            None => Ok(pufsim::sample_population(
                self.population_seed,
                &PopulationConfig {
                    cells: self.cells,
                    ..Default::default()
                },
            )?),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RefArgs {
    /// Reference JSON written by `puf enroll`; otherwise one is enrolled.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Enrollment reads (multiple of 250) when enrolling here.
    #[arg(long, default_value_t = 250)]
    reads: u64,
    /// Enrollment waveform: rf, rs, sy:<y> or ramp:<mV/ms>.
    #[arg(long, default_value = "rs")]
    waveform: Waveform,
}

impl RefArgs {
    fn load(&self, array: &SramArray, rng: &mut ChaCha8Rng) -> anyhow::Result<PufReference> {
        let r: PufReference = match &self.reference {
            Some(p) => read_json(p)?,
            None => pufsim::enroll(array, self.waveform, self.reads, rng)?,
        };
        if r.cells != array.len() {
            bail!("reference covers {} cells, population has {}", r.cells, array.len());
        }
        Ok(r)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthMode {
    Static,
    Dynamic,
}

#[derive(Subcommand, Debug)]
pub enum PufCmd {
    /// Samples a cell population and writes it as JSON.
    Populate {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Enrolls a reference; optionally records the stable-set decay.
    Enroll {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long, default_value_t = 250)]
        reads: u64,
        #[arg(long, default_value = "rs")]
        waveform: Waveform,
        /// Read noise seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated read counts for a decay curve, e.g. 250,10000,50000.
        #[arg(long, value_delimiter = ',')]
        decay: Vec<u64>,
    },
    /// Authenticates a genuine device or a replay clone.
    Auth {
        #[command(flatten)]
        pop: PopArgs,
        #[command(flatten)]
        reference: RefArgs,
        #[arg(long, value_enum, default_value = "static")]
        mode: AuthMode,
        /// Answer with a replayed slow-ramp fingerprint instead of the array.
        #[arg(long)]
        clone: bool,
        #[arg(long, default_value_t = 1)]
        trials: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Estimates flipping-cell switch points over S_y waveforms.
    Sweep {
        #[command(flatten)]
        pop: PopArgs,
        /// Cells to sweep; defaults to every flipping cell.
        #[arg(long, value_delimiter = ',')]
        cell: Vec<usize>,
        /// Grid of y values; defaults to 0.005..=0.125 in steps of 0.005.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 25)]
        reads: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// PPM bitmap of a reference, or of one read compared against it.
    Bitmap {
        #[command(flatten)]
        pop: PopArgs,
        #[command(flatten)]
        reference: RefArgs,
        /// Mark cells of a fresh read that disagree with the reference.
        #[arg(long)]
        compare: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Serialize)]
struct PopulationSummary {
    cells: usize,
    stable0: usize,
    stable1: usize,
    noisy: usize,
    flipping: usize,
    fingerprint: String,
}

#[derive(Serialize)]
struct EnrollSummary {
    reads: u64,
    always0: usize,
    always1: usize,
    flipping: usize,
    flipping_fraction: f64,
    decay: Vec<pufsim::DecayPoint>,
}

#[derive(Serialize)]
struct AuthSummary {
    mode: &'static str,
    clone: bool,
    trials: u32,
    accepted: u32,
    mean_error: f64,
}

#[derive(Serialize)]
struct BitmapSummary {
    pixels: usize,
    flagged: usize,
    flagged_fraction: f64,
}

fn default_grid() -> Vec<f64> {
    (1..=25).map(|k| k as f64 * 0.005).collect()
}

pub fn run(cmd: PufCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        PufCmd::Populate { pop, output } => {
            let array = pop.load()?;
            let s = PopulationSummary {
                cells: array.len(),
                stable0: array.count(|c| *c == CellClass::Stable0),
                stable1: array.count(|c| *c == CellClass::Stable1),
                noisy: array.count(|c| *c == CellClass::Noisy),
                flipping: array.flipping_indices().len(),
                fingerprint: array.fingerprint(),
            };
            write(&output, serde_json::to_string(&array)?.as_bytes())?;
            out.human(format!(
                "{} cells: {} stable-0, {} stable-1, {} noisy, {} flipping",
                s.cells, s.stable0, s.stable1, s.noisy, s.flipping
            ));
            out.summary("population", &s)?;
            Ok(Status::Ok)
        }
        PufCmd::Enroll {
            pop,
            reads,
            waveform,
            seed,
            output,
            decay,
        } => {
            let array = pop.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = pufsim::enroll(&array, waveform, reads, &mut rng)?;
            if let Some(o) = &output {
                write(o, serde_json::to_string_pretty(&r)?.as_bytes())?;
            }
            let points = if decay.is_empty() {
                Vec::new()
            } else {
                pufsim::decay_curve(&array, waveform, &decay, &mut rng)?
            };
            let s = EnrollSummary {
                reads,
                always0: r.always0.len(),
                always1: r.always1.len(),
                flipping: r.flipping.len(),
                flipping_fraction: r.flipping.len() as f64 / r.cells as f64,
                decay: points,
            };
            out.human(format!(
                "{} reads: {} always-0, {} always-1, {} flipping ({:.2}%)",
                reads,
                s.always0,
                s.always1,
                s.flipping,
                100.0 * s.flipping_fraction
            ));
            if !s.decay.is_empty() {
                let csv = pufsim::decay_csv(&s.decay);
                out.human(csv.trim_end());
                out.artifact("decay.csv", csv.as_bytes())?;
            }
            out.summary("enroll", &s)?;
            Ok(Status::Ok)
        }
        PufCmd::Auth {
            pop,
            reference,
            mode,
            clone,
            trials,
            seed,
        } => {
            if trials == 0 {
                bail!("--trials must be positive");
            }
            let array = pop.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = reference.load(&array, &mut rng)?;
            let mut genuine = GenuineDevice::new(array, seed.wrapping_add(1));
            let mut replay = ReplayClone {
                recorded: genuine.power_up(Waveform::rs())?.bits,
            };
            let mut accepted = 0;
            let mut error = 0.0;
            let mut csv = String::from("trial,error,accept\n");
            for t in 0..trials {
                let device: &mut dyn PowerUp = if clone { &mut replay } else { &mut genuine };
                let (rate, accept) = match mode {
                    AuthMode::Static => {
                        let s = pufsim::static_auth(&device.power_up(r.waveform)?, &r, STATIC_THRESHOLD)?;
                        (s.rate, s.accept)
                    }
                    AuthMode::Dynamic => {
                        let d = pufsim::dynamic_auth(device, &r, DynamicPolicy::default())
                            .context("dynamic authentication needs a reference with flipping cells")?;
                        (d.stable.rate, d.accept)
                    }
                };
                accepted += accept as u32;
                error += rate;
                csv.push_str(&format!("{t},{rate},{accept}\n"));
            }
            let s = AuthSummary {
                mode: match mode {
                    AuthMode::Static => "static",
                    AuthMode::Dynamic => "dynamic",
                },
                clone,
                trials,
                accepted,
                mean_error: error / trials as f64,
            };
            out.human(format!(
                "{} {}: {accepted}/{trials} accepted, mean stable-cell error {:.4}% (read time {READ_SECONDS} s)",
                s.mode,
                if clone { "replay clone" } else { "genuine device" },
                100.0 * s.mean_error
            ));
            out.artifact("auth.csv", csv.as_bytes())?;
            out.summary("auth", &s)?;
            Ok(Status::from_accept(accepted == trials))
        }
        PufCmd::Sweep {
            pop,
            cell,
            grid,
            reads,
            seed,
        } => {
            let array = pop.load()?;
            let cells = if cell.is_empty() { array.flipping_indices() } else { cell };
            let grid = if grid.is_empty() { default_grid() } else { grid };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = pufsim::threshold_sweep(&array, &cells, &grid, reads, &mut rng)?;
            let mut csv = String::from("cell,estimate,threshold\n");
            for e in &est {
                let truth = match array.cells[e.cell].class {
                    CellClass::Flipping { threshold, .. } => threshold.to_string(),
                    _ => String::new(),
                };
                let estimate = e.threshold.map(|t| t.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{estimate},{truth}\n", e.cell));
            }
            out.human(csv.trim_end());
            out.artifact("sweep.csv", csv.as_bytes())?;
            out.summary("sweep", &est)?;
            Ok(Status::Ok)
        }
        PufCmd::Bitmap {
            pop,
            reference,
            compare,
            seed,
            output,
        } => {
            let array = pop.load()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = reference.load(&array, &mut rng)?;
            let palette = Palette::default();
            let bitmap = if compare {
                let read = pufsim::read(&array, r.waveform, READ_SECONDS, &mut rng)?;
                Bitmap::comparison(&r, &read, &palette)?
            } else {
                Bitmap::from_reference(&r, &palette)
            };
            write(&output, &bitmap.to_ppm(&palette))?;
            let flagged = bitmap.count(palette.flagged);
            let s = BitmapSummary {
                pixels: bitmap.pixels.len(),
                flagged,
                flagged_fraction: flagged as f64 / bitmap.pixels.len().max(1) as f64,
            };
            out.human(format!(
                "{} pixels, {} red ({:.2}%)",
                s.pixels,
                flagged,
                100.0 * s.flagged_fraction
            ));
            out.summary("bitmap", &s)?;
            Ok(Status::Ok)
        }
    }
}
