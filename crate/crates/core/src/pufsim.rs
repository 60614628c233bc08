//! SRAM power-up fingerprint simulator: cell population, power-up
//! waveforms, enrollment, static and flipping-bit authentication, threshold
//! sweeps and PPM bitmaps.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reads per enrollment batch.
pub const BATCH: u64 = 250;
/// Supply voltage in mV.
pub const VDD_MV: f64 = 5000.0;
/// Slopes below this many mV/ms leave flipping cells at `1 - b`.
pub const LOW_SLOPE_MAX: f64 = 10.0;
/// Slopes above this many mV/ms set flipping cells to `b`.
pub const HIGH_SLOPE_MIN: f64 = 200.0;
/// Seconds per power-up read.
pub const READ_SECONDS: f64 = 2.4;

#[derive(Debug, Error, PartialEq)]
pub enum PufError {
    #[error("class fractions must be non-negative and sum to at most 1")]
    Fractions,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("enrollment count {0} is not a positive multiple of 250")]
    EnrollCount(u64),
    #[error("reference has no flipping cells; dynamic authentication unavailable")]
    NoFlippingCells,
    #[error("threshold grid needs at least 3 points inside (0, 1)")]
    Grid,
    #[error("read has {read} cells, reference {reference}")]
    SizeMismatch { read: usize, reference: usize },
}

pub type Result<T> = std::result::Result<T, PufError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum CellClass {
    Stable0,
    Stable1,
    Noisy,
    /// Reads `fast_value` under a high slope and its complement under a low
    /// slope; `threshold` is the fraction of VDD at which the cell decides.
    Flipping { fast_value: bool, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub class: CellClass,
    /// Misread rate per second of read time.
    pub misread_rate: f64,
}

impl CellParams {
    /// Misread probability for a read of `t` seconds.
    pub fn misread_prob(&self, t: f64) -> f64 {
        -(-self.misread_rate * t).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MisreadModel {
    Fixed { rate: f64 },
    /// Log-normal per-cell rate, clamped to `max_rate`.
    LogNormal { median: f64, sigma: f64, max_rate: f64 },
}

impl Default for MisreadModel {
    fn default() -> Self {
        MisreadModel::LogNormal {
            median: 4.46e-4,
            sigma: 2.0,
            max_rate: 8.4e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub cells: usize,
    pub stable0: f64,
    pub stable1: f64,
    /// Any fraction not assigned to another class is noisy as well.
    pub noisy: f64,
    pub flipping: f64,
    pub misread: MisreadModel,
    /// Flipping thresholds are `threshold_scale * Beta(alpha, beta)`.
    pub threshold_scale: f64,
    pub threshold_alpha: f64,
    pub threshold_beta: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            cells: 8192,
            stable0: 0.46,
            stable1: 0.46,
            noisy: 0.03,
            flipping: 0.05,
            misread: MisreadModel::default(),
            threshold_scale: 0.1,
            threshold_alpha: 2.0,
            threshold_beta: 5.0,
        }
    }
}

impl PopulationConfig {
    pub fn noiseless(mut self) -> Self {
        self.misread = MisreadModel::Fixed { rate: 0.0 };
        self
    }

    fn validate(&self) -> Result<()> {
        let f = [self.stable0, self.stable1, self.noisy, self.flipping];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || f.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(PufError::Fractions);
        }
        if self.cells == 0 {
            return Err(PufError::Parameter("array needs at least one cell".into()));
        }
        if !(self.threshold_scale > 0.0 && self.threshold_scale <= 1.0) {
            return Err(PufError::Parameter("threshold scale must be in (0, 1]".into()));
        }
        match self.misread {
            MisreadModel::Fixed { rate } if rate < 0.0 || !rate.is_finite() => {
                Err(PufError::Parameter("misread rate must be >= 0".into()))
            }
            MisreadModel::LogNormal { median, sigma, max_rate }
                if median <= 0.0 || sigma < 0.0 || max_rate <= 0.0 =>
            {
                Err(PufError::Parameter("log-normal misread parameters must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SramArray {
    pub seed: u64,
    pub cells: Vec<CellParams>,
}

pub fn sample_population(seed: u64, config: &PopulationConfig) -> Result<SramArray> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(config.threshold_alpha, config.threshold_beta)
        .map_err(|e| PufError::Parameter(e.to_string()))?;
    let lognormal = match config.misread {
        MisreadModel::LogNormal { median, sigma, .. } => {
            Some(LogNormal::new(median.ln(), sigma).map_err(|e| PufError::Parameter(e.to_string()))?)
        }
        MisreadModel::Fixed { .. } => None,
    };
    let cells = (0..config.cells)
        .map(|_| {
            let u: f64 = rng.gen();
            let class = if u < config.stable0 {
                CellClass::Stable0
            } else if u < config.stable0 + config.stable1 {
                CellClass::Stable1
            } else if u < config.stable0 + config.stable1 + config.flipping {
                CellClass::Flipping {
                    fast_value: rng.gen(),
                    threshold: (config.threshold_scale * beta.sample(&mut rng)).clamp(1e-6, 1.0 - 1e-6),
                }
            } else {
                CellClass::Noisy
            };
            let misread_rate = match (config.misread, &lognormal) {
                (MisreadModel::Fixed { rate }, _) => rate,
                (MisreadModel::LogNormal { max_rate, .. }, Some(d)) => d.sample(&mut rng).min(max_rate),
                _ => unreachable!(),
            };
            CellParams { class, misread_rate }
        })
        .collect();
    Ok(SramArray { seed, cells })
}

impl SramArray {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&CellClass) -> bool) -> usize {
        self.cells.iter().filter(|c| pred(&c.class)).count()
    }

    pub fn flipping_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.cells[i].class, CellClass::Flipping { .. }))
            .collect()
    }

    /// Same array with every flipping cell pinned to its fast value.
    pub fn without_flipping(&self) -> Self {
        let mut out = self.clone();
        for c in &mut out.cells {
            if let CellClass::Flipping { fast_value, .. } = c.class {
                c.class = if fast_value { CellClass::Stable1 } else { CellClass::Stable0 };
            }
        }
        out
    }

    /// SHA-256 over the cell parameters, identifying the physical array.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cells {
            let (tag, b, y) = match c.class {
                CellClass::Stable0 => (0u8, 0u8, 0.0),
                CellClass::Stable1 => (1, 0, 0.0),
                CellClass::Noisy => (2, 0, 0.0),
                CellClass::Flipping { fast_value, threshold } => (3, fast_value as u8, threshold),
            };
            h.update([tag, b]);
            h.update(y.to_le_bytes());
            h.update(c.misread_rate.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Power-up supply waveform. Slopes are in mV/ms; a square edge is an
/// infinite slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    /// Square power-up.
    Square,
    /// Slow ramp of `slope` up to `ramp_ms`, then a fast rise.
    SlopeSquare { slope: f64, ramp_ms: f64 },
    /// `low_slope` up to `y * VDD`, then `high_slope`.
    TwoSlope { y: f64, low_slope: f64, high_slope: f64 },
    /// Single linear ramp.
    Ramp { slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeRegime {
    Low,
    High,
    /// Between the two regimes; flipping cells read randomly.
    Undefined,
}

pub fn slope_regime(slope: f64) -> SlopeRegime {
    if slope < LOW_SLOPE_MAX {
        SlopeRegime::Low
    } else if slope > HIGH_SLOPE_MIN {
        SlopeRegime::High
    } else {
        SlopeRegime::Undefined
    }
}

impl Waveform {
    /// Square power-up, sets flipping cells to their fast value.
    pub fn rf() -> Self {
        Waveform::Square
    }

    /// 625/512 mV/ms for 512 ms, then a fast rise.
    pub fn rs() -> Self {
        Waveform::SlopeSquare {
            slope: 625.0 / 512.0,
            ramp_ms: 512.0,
        }
    }

    pub fn sy(y: f64) -> Self {
        Waveform::TwoSlope {
            y,
            low_slope: 625.0 / 512.0,
            high_slope: f64::INFINITY,
        }
    }

    /// Slope in effect when the supply crosses `fraction * VDD`.
    pub fn slope_at(&self, fraction: f64) -> f64 {
        let v = fraction * VDD_MV;
        match *self {
            Waveform::Square => f64::INFINITY,
            Waveform::SlopeSquare { slope, ramp_ms } => {
                if v < slope * ramp_ms {
                    slope
                } else {
                    f64::INFINITY
                }
            }
            Waveform::TwoSlope { y, low_slope, high_slope } => {
                if fraction < y {
                    low_slope
                } else {
                    high_slope
                }
            }
            Waveform::Ramp { slope } => slope,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Waveform::Square => true,
            Waveform::SlopeSquare { slope, ramp_ms } => slope > 0.0 && ramp_ms >= 0.0,
            Waveform::TwoSlope { y, low_slope, high_slope } => {
                (0.0..=1.0).contains(&y) && low_slope > 0.0 && high_slope > 0.0
            }
            Waveform::Ramp { slope } => slope > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(PufError::Parameter(format!("invalid waveform {self:?}")))
        }
    }
}

impl std::str::FromStr for Waveform {
    type Err = PufError;
    /// `rf`, `rs`, `sy:<y>` or `ramp:<mV/ms>`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| PufError::Parameter(format!("bad number {v:?}")))
        };
        let w = match s.split_once(':') {
            None if s == "rf" => Waveform::rf(),
            None if s == "rs" => Waveform::rs(),
            Some(("sy", y)) => Waveform::sy(num(y)?),
            Some(("ramp", v)) => Waveform::Ramp { slope: num(v)? },
            _ => return Err(PufError::Parameter(format!("unknown waveform {s:?}"))),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Probability that the cell reads 1 before misreads are applied.
fn nominal_one(cell: &CellParams, w: &Waveform) -> f64 {
    match cell.class {
        CellClass::Stable0 => 0.0,
        CellClass::Stable1 => 1.0,
        CellClass::Noisy => 0.5,
        CellClass::Flipping { fast_value, threshold } => match slope_regime(w.slope_at(threshold)) {
            SlopeRegime::High => fast_value as u8 as f64,
            SlopeRegime::Low => !fast_value as u8 as f64,
            SlopeRegime::Undefined => 0.5,
        },
    }
}

/// Probability that the cell reads 1, misreads included.
fn prob_one(cell: &CellParams, w: &Waveform, t: f64) -> f64 {
    let q = nominal_one(cell, w);
    let e = cell.misread_prob(t);
    q * (1.0 - e) + (1.0 - q) * e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PufRead {
    pub waveform: Waveform,
    pub bits: Vec<bool>,
}

/// One power-up of `t` seconds.
pub fn read<R: Rng + ?Sized>(array: &SramArray, waveform: Waveform, t: f64, rng: &mut R) -> Result<PufRead> {
    if !(t > 0.0) {
        return Err(PufError::Parameter("read time must be positive".into()));
    }
    waveform.validate()?;
    let bits = array
        .cells
        .iter()
        .map(|c| {
            let nominal = match nominal_one(c, &waveform) {
                q if q == 0.0 => false,
                q if q == 1.0 => true,
                _ => rng.gen(),
            };
            let e = c.misread_prob(t);
            nominal ^ (e > 0.0 && rng.gen_bool(e))
        })
        .collect();
    Ok(PufRead { waveform, bits })
}

/// Per-cell counts of ones over a sequence of reads.
struct Tally {
    ones: Vec<u64>,
    reads: u64,
}

impl Tally {
    fn new(n: usize) -> Self {
        Self {
            ones: vec![0; n],
            reads: 0,
        }
    }

    /// Adds one batch of reads, drawn per cell from its binomial.
    fn add_batch<R: Rng + ?Sized>(&mut self, array: &SramArray, w: &Waveform, t: f64, rng: &mut R) {
        for (count, cell) in self.ones.iter_mut().zip(&array.cells) {
            let q = prob_one(cell, w, t);
            *count += if q <= 0.0 {
                0
            } else if q >= 1.0 {
                BATCH
            } else {
                Binomial::new(BATCH, q).unwrap().sample(rng)
            };
        }
        self.reads += BATCH;
    }

    fn always0(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.ones.len()).filter(|&i| self.ones[i] == 0)
    }

    fn always1(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.ones.len()).filter(|&i| self.ones[i] == self.reads)
    }

    /// Value read in at least `share` of all reads, if any.
    fn majority(&self, i: usize, share: f64) -> Option<bool> {
        let f = self.ones[i] as f64 / self.reads as f64;
        if f >= share {
            Some(true)
        } else if 1.0 - f >= share {
            Some(false)
        } else {
            None
        }
    }
}

/// Share of reads a value needs before it counts as a cell's settled value
/// when comparing the square and slow-ramp references.
pub const FLIP_MAJORITY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PufReference {
    pub cells: usize,
    pub enrollment_reads: u64,
    pub waveform: Waveform,
    pub always0: Vec<usize>,
    pub always1: Vec<usize>,
    /// Cells whose settled value differs between the square and slow-ramp
    /// references.
    pub flipping: Vec<usize>,
    /// Slow-ramp reference value of each flipping cell.
    pub flipping_values: Vec<bool>,
    pub population_hash: String,
}

impl PufReference {
    pub fn stable_count(&self) -> usize {
        self.always0.len() + self.always1.len()
    }

    /// Expected value of every referenced cell.
    pub fn expected(&self) -> Vec<Option<bool>> {
        let mut out = vec![None; self.cells];
        for &i in &self.always0 {
            out[i] = Some(false);
        }
        for &i in &self.always1 {
            out[i] = Some(true);
        }
        for (&i, &v) in self.flipping.iter().zip(&self.flipping_values) {
            out[i] = Some(v);
        }
        out
    }
}

/// Enrolls with `n` reads under `waveform`, plus `n` square and `n`
/// slow-ramp reads to locate flipping cells. Flipping cells are excluded from
/// the always-0/always-1 sets.
pub fn enroll<R: Rng + ?Sized>(array: &SramArray, waveform: Waveform, n: u64, rng: &mut R) -> Result<PufReference> {
    if n == 0 || n % BATCH != 0 {
        return Err(PufError::EnrollCount(n));
    }
    waveform.validate()?;
    let tally = |w: &Waveform, rng: &mut R| {
        let mut t = Tally::new(array.len());
        for _ in 0..n / BATCH {
            t.add_batch(array, w, READ_SECONDS, rng);
        }
        t
    };
    let main = tally(&waveform, rng);
    let fast = tally(&Waveform::rf(), rng);
    let slow = tally(&Waveform::rs(), rng);
    let mut flipping = Vec::new();
    let mut flipping_values = Vec::new();
    for i in 0..array.len() {
        if let (Some(f), Some(s)) = (fast.majority(i, FLIP_MAJORITY), slow.majority(i, FLIP_MAJORITY)) {
            if f != s {
                flipping.push(i);
                flipping_values.push(s);
            }
        }
    }
    let flip_set: BTreeSet<usize> = flipping.iter().copied().collect();
    Ok(PufReference {
        cells: array.len(),
        enrollment_reads: n,
        waveform,
        always0: main.always0().filter(|i| !flip_set.contains(i)).collect(),
        always1: main.always1().filter(|i| !flip_set.contains(i)).collect(),
        flipping,
        flipping_values,
        population_hash: array.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayPoint {
    pub reads: u64,
    pub stable0: usize,
    pub stable1: usize,
}

/// Sizes of the always-0/always-1 sets as reads accumulate, recorded at each
/// checkpoint of one continuous enrollment.
pub fn decay_curve<R: Rng + ?Sized>(
    array: &SramArray,
    waveform: Waveform,
    checkpoints: &[u64],
    rng: &mut R,
) -> Result<Vec<DecayPoint>> {
    if let Some(&bad) = checkpoints.iter().find(|&&n| n == 0 || n % BATCH != 0) {
        return Err(PufError::EnrollCount(bad));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PufError::Parameter("checkpoints must increase".into()));
    }
    let mut tally = Tally::new(array.len());
    let mut out = Vec::with_capacity(checkpoints.len());
    for &n in checkpoints {
        while tally.reads < n {
            tally.add_batch(array, &waveform, READ_SECONDS, rng);
        }
        out.push(DecayPoint {
            reads: n,
            stable0: tally.always0().count(),
            stable1: tally.always1().count(),
        });
    }
    Ok(out)
}

pub fn decay_csv(points: &[DecayPoint]) -> String {
    let mut s = String::from("n,stable0,stable1\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.reads, p.stable0, p.stable1));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StaticResult {
    pub mismatches: usize,
    pub positions: usize,
    pub rate: f64,
    pub accept: bool,
    pub waveform_mismatch: bool,
}

/// Default static acceptance threshold on the mismatch rate.
pub const STATIC_THRESHOLD: f64 = 0.01;

pub fn static_auth(read: &PufRead, reference: &PufReference, threshold: f64) -> Result<StaticResult> {
    if read.bits.len() != reference.cells {
        return Err(PufError::SizeMismatch {
            read: read.bits.len(),
            reference: reference.cells,
        });
    }
    let mismatches = reference.always0.iter().filter(|&&i| read.bits[i]).count()
        + reference.always1.iter().filter(|&&i| !read.bits[i]).count();
    let positions = reference.stable_count();
    let rate = if positions == 0 {
        1.0
    } else {
        mismatches as f64 / positions as f64
    };
    Ok(StaticResult {
        mismatches,
        positions,
        rate,
        accept: positions > 0 && rate <= threshold,
        waveform_mismatch: read.waveform != reference.waveform,
    })
}

/// Something that answers power-up requests: a real array or a clone.
pub trait PowerUp {
    fn power_up(&mut self, waveform: Waveform) -> Result<PufRead>;
}

pub struct GenuineDevice {
    pub array: SramArray,
    pub rng: ChaCha8Rng,
}

impl GenuineDevice {
    pub fn new(array: SramArray, read_seed: u64) -> Self {
        Self {
            array,
            rng: ChaCha8Rng::seed_from_u64(read_seed),
        }
    }
}

impl PowerUp for GenuineDevice {
    fn power_up(&mut self, waveform: Waveform) -> Result<PufRead> {
        read(&self.array, waveform, READ_SECONDS, &mut self.rng)
    }
}

/// Software clone replaying a recorded slow-ramp fingerprint whatever the
/// waveform.
pub struct ReplayClone {
    pub recorded: Vec<bool>,
}

impl PowerUp for ReplayClone {
    fn power_up(&mut self, waveform: Waveform) -> Result<PufRead> {
        Ok(PufRead {
            waveform,
            bits: self.recorded.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicPolicy {
    /// Maximum mismatch rate of the slow-ramp read on stable cells.
    pub max_stable_rate: f64,
    /// Minimum share of flipping cells that must change under a square read.
    pub min_flip_share: f64,
}

impl Default for DynamicPolicy {
    fn default() -> Self {
        Self {
            max_stable_rate: STATIC_THRESHOLD,
            min_flip_share: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DynamicResult {
    pub stable: StaticResult,
    pub flip_changed: usize,
    pub flip_positions: usize,
    pub flip_share: f64,
    pub accept: bool,
}

/// One slow-ramp and one square power-up against a slow-ramp reference.
pub fn dynamic_auth(device: &mut dyn PowerUp, reference: &PufReference, policy: DynamicPolicy) -> Result<DynamicResult> {
    if reference.flipping.is_empty() {
        return Err(PufError::NoFlippingCells);
    }
    let slow = device.power_up(Waveform::rs())?;
    let stable = static_auth(&slow, reference, policy.max_stable_rate)?;
    let fast = device.power_up(Waveform::rf())?;
    if fast.bits.len() != reference.cells {
        return Err(PufError::SizeMismatch {
            read: fast.bits.len(),
            reference: reference.cells,
        });
    }
    let flip_changed = reference
        .flipping
        .iter()
        .zip(&reference.flipping_values)
        .filter(|(&i, &v)| fast.bits[i] != v)
        .count();
    let flip_share = flip_changed as f64 / reference.flipping.len() as f64;
    Ok(DynamicResult {
        stable,
        flip_changed,
        flip_positions: reference.flipping.len(),
        flip_share,
        accept: stable.accept && flip_share >= policy.min_flip_share,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdEstimate {
    pub cell: usize,
    /// First grid point where the majority value departs from the pure
    /// high-slope value; `None` if it never does.
    pub threshold: Option<f64>,
}

/// Estimates the switch point of each listed cell from `reads_per_point`
/// S_y power-ups at every grid value.
pub fn threshold_sweep<R: Rng + ?Sized>(
    array: &SramArray,
    cells: &[usize],
    grid: &[f64],
    reads_per_point: usize,
    rng: &mut R,
) -> Result<Vec<ThresholdEstimate>> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() < 3 || grid.iter().any(|&y| !(y > 0.0 && y < 1.0)) {
        return Err(PufError::Grid);
    }
    if reads_per_point == 0 {
        return Err(PufError::Parameter("need at least one read per point".into()));
    }
    if let Some(&bad) = cells.iter().find(|&&i| i >= array.len()) {
        return Err(PufError::Parameter(format!("cell {bad} out of range")));
    }
    let mut majorities = vec![Vec::with_capacity(grid.len() + 1); cells.len()];
    // S_0 is the pure high slope and anchors the comparison
    for y in std::iter::once(0.0).chain(grid.iter().copied()) {
        let w = Waveform::sy(y);
        for (k, &i) in cells.iter().enumerate() {
            let cell = &array.cells[i];
            let q = prob_one(cell, &w, READ_SECONDS);
            let ones = (0..reads_per_point).filter(|_| rng.gen_bool(q)).count();
            majorities[k].push(2 * ones > reads_per_point);
        }
    }
    Ok(cells
        .iter()
        .zip(&majorities)
        .map(|(&cell, m)| ThresholdEstimate {
            cell,
            threshold: m.iter().position(|&v| v != m[0]).map(|k| grid[k - 1]),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Palette {
    pub always1: [u8; 3],
    pub always0: [u8; 3],
    pub other: [u8; 3],
    pub flagged: [u8; 3],
    pub padding: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            always1: [0, 160, 0],
            always0: [255, 220, 0],
            other: [255, 255, 255],
            flagged: [220, 0, 0],
            padding: [0, 0, 0],
        }
    }
}

/// Pixels per bitmap row.
pub const BITMAP_WIDTH: usize = 64;

/// Cell-per-pixel image before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub pixels: Vec<[u8; 3]>,
}

impl Bitmap {
    /// Reference map: green always-1, yellow always-0, red flipping, white
    /// the rest.
    pub fn from_reference(reference: &PufReference, palette: &Palette) -> Self {
        let mut pixels = vec![palette.other; reference.cells];
        for &i in &reference.always1 {
            pixels[i] = palette.always1;
        }
        for &i in &reference.always0 {
            pixels[i] = palette.always0;
        }
        for &i in &reference.flipping {
            pixels[i] = palette.flagged;
        }
        Self { pixels }
    }

    /// Comparison map: every referenced cell whose read value differs is red,
    /// the rest coloured as in the reference with flipping cells white.
    pub fn comparison(reference: &PufReference, read: &PufRead, palette: &Palette) -> Result<Self> {
        if read.bits.len() != reference.cells {
            return Err(PufError::SizeMismatch {
                read: read.bits.len(),
                reference: reference.cells,
            });
        }
        let mut pixels = vec![palette.other; reference.cells];
        for &i in &reference.always1 {
            pixels[i] = palette.always1;
        }
        for &i in &reference.always0 {
            pixels[i] = palette.always0;
        }
        for (i, e) in reference.expected().into_iter().enumerate() {
            if e.is_some_and(|v| v != read.bits[i]) {
                pixels[i] = palette.flagged;
            }
        }
        Ok(Self { pixels })
    }

    pub fn count(&self, colour: [u8; 3]) -> usize {
        self.pixels.iter().filter(|&&p| p == colour).count()
    }

    /// Binary PPM, `BITMAP_WIDTH` pixels wide, last row padded.
    pub fn to_ppm(&self, palette: &Palette) -> Vec<u8> {
        let rows = self.pixels.len().div_ceil(BITMAP_WIDTH).max(1);
        let mut out = format!("P6\n{BITMAP_WIDTH} {rows}\n255\n").into_bytes();
        for k in 0..rows * BITMAP_WIDTH {
            out.extend_from_slice(self.pixels.get(k).unwrap_or(&palette.padding));
        }
        out
    }
}
