//! Simulated attested device and verifier talking over a framed byte channel,
//! with stop&start timer tampering and shard-compression hideouts.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::bmac::{
    self, AuthCode, BmacError, BmacResult, CostModel, HashAlg, MemoryImage, Verdict, TICK_DIVISOR,
};
use crate::numlib::MinstdState;
use crate::shardlib::{self, CompressionPlan, ShardError};

/// Prescaler period in cycles.
pub const PRESCALER: u8 = 64;
/// Measured cycles of the instructions that stop the timer.
pub const STOP_PREFIX_CYCLES: i64 = 2;
/// Measured cycles of the instructions that restart it.
pub const RESTART_SUFFIX_CYCLES: i64 = 3;

const MSG_REQUEST: u8 = 0x01;
const MSG_RESPONSE: u8 = 0x02;
const MSG_ERROR: u8 = 0x7F;

#[derive(Debug, Error)]
pub enum DevError {
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("channel closed")]
    Closed,
    #[error("device reported: {0}")]
    Remote(String),
    #[error("unexpected message {0:?}")]
    Unexpected(Message),
    #[error("hideout payload of {payload} bytes does not fit in {free} freed bytes")]
    PayloadTooLarge { payload: usize, free: usize },
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Bmac(#[from] BmacError),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

pub type Result<T> = std::result::Result<T, DevError>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame shorter than its header")]
    Truncated,
    #[error("length field says {declared} bytes, {actual} present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {len} bytes is wrong for message type {kind:#04x}")]
    BadPayload { kind: u8, len: usize },
    #[error("unknown hash id {0:#04x}")]
    UnknownHash(u8),
    #[error("error text is not UTF-8")]
    BadText,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request { seed: u32, hash: HashAlg },
    Response { code: AuthCode },
    Error { reason: String },
}

impl Message {
    /// `len(4, BE) | type | payload`, where the length covers type and payload.
    pub fn encode(&self) -> Vec<u8> {
        let (kind, payload) = match self {
            Message::Request { seed, hash } => {
                let mut p = seed.to_be_bytes().to_vec();
                p.push(hash.id());
                (MSG_REQUEST, p)
            }
            Message::Response { code } => (MSG_RESPONSE, code.0.to_be_bytes().to_vec()),
            Message::Error { reason } => (MSG_ERROR, reason.as_bytes().to_vec()),
        };
        let mut out = Vec::with_capacity(5 + payload.len());
        out.extend_from_slice(&(payload.len() as u32 + 1).to_be_bytes());
        out.push(kind);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(frame: &[u8]) -> std::result::Result<Self, FrameError> {
        if frame.len() < 5 {
            return Err(FrameError::Truncated);
        }
        let declared = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if declared != frame.len() - 4 {
            return Err(FrameError::LengthMismatch {
                declared,
                actual: frame.len() - 4,
            });
        }
        let kind = frame[4];
        let payload = &frame[5..];
        let bad = || FrameError::BadPayload {
            kind,
            len: payload.len(),
        };
        match kind {
            MSG_REQUEST => {
                if payload.len() != 5 {
                    return Err(bad());
                }
                let seed = u32::from_be_bytes(payload[..4].try_into().unwrap());
                let hash = HashAlg::from_id(payload[4]).ok_or(FrameError::UnknownHash(payload[4]))?;
                Ok(Message::Request { seed, hash })
            }
            MSG_RESPONSE => {
                if payload.len() != 2 {
                    return Err(bad());
                }
                Ok(Message::Response {
                    code: AuthCode(u16::from_be_bytes([payload[0], payload[1]])),
                })
            }
            MSG_ERROR => Ok(Message::Error {
                reason: String::from_utf8(payload.to_vec()).map_err(|_| FrameError::BadText)?,
            }),
            other => Err(FrameError::UnknownType(other)),
        }
    }
}

/// What the timer loses when the attacker stops and restarts it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum LossRule {
    /// A stop that lands on sub-count 61, 62 or 63 throws away the current
    /// prescaler period together with the instrumentation cycles inside it;
    /// any other sub-count leaves the timer intact and the 5 instrumentation
    /// cycles are measured.
    #[default]
    PeriodWrap,
    /// Every stop discards the whole sub-count.
    Uniform,
}

impl LossRule {
    /// Cycles the timer loses for one stop event at the given sub-count.
    pub fn event_loss(self, subcount: u8) -> i64 {
        match self {
            LossRule::PeriodWrap if subcount < PRESCALER - 3 => 0,
            _ => subcount as i64,
        }
    }

    /// Measured-cycle change for one stop event: the instrumentation cycles
    /// minus the loss, where a wrapped period also swallows the
    /// instrumentation.
    pub fn event_delta(self, subcount: u8) -> i64 {
        let measured = STOP_PREFIX_CYCLES + RESTART_SUFFIX_CYCLES;
        let loss = self.event_loss(subcount);
        match self {
            LossRule::PeriodWrap if loss > 0 => -loss,
            _ => measured - loss,
        }
    }

    /// Exact mean of `event_delta` over a uniform sub-count.
    pub fn mean_delta(self) -> f64 {
        (0..PRESCALER).map(|u| self.event_delta(u) as f64).sum::<f64>() / PRESCALER as f64
    }
}

impl std::str::FromStr for LossRule {
    type Err = DevError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrap" | "period-wrap" => Ok(LossRule::PeriodWrap),
            "uniform" => Ok(LossRule::Uniform),
            _ => Err(DevError::InvalidParameter(format!("unknown loss rule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackConfig {
    Honest,
    /// Timer stopped around hidden work once per absorbed byte.
    StopStart,
    /// Image compressed per `plan` with `payload` written into the freed tail.
    Hideout {
        payload: Vec<u8>,
        plan: CompressionPlan,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimerConfig {
    pub loss_rule: LossRule,
    /// Standard deviation of Gaussian cycle noise; 0 disables it.
    pub noise_sigma: f64,
}

impl Default for TimerConfig {
    fn default() -> Self {
        Self {
            loss_rule: LossRule::PeriodWrap,
            noise_sigma: 0.0,
        }
    }
}

pub struct SimDevice {
    image: MemoryImage,
    cost: CostModel,
    attack: AttackConfig,
    timer: TimerConfig,
    subcount: u8,
    rng: ChaCha8Rng,
    cache: Option<(u32, HashAlg, BmacResult, u64)>,
}

impl SimDevice {
    /// `image` is the genuine firmware; a hideout device rewrites it.
    pub fn new(
        image: MemoryImage,
        cost: CostModel,
        attack: AttackConfig,
        timer: TimerConfig,
        rng_seed: u64,
    ) -> Result<Self> {
        cost.validate()?;
        if timer.noise_sigma < 0.0 || !timer.noise_sigma.is_finite() {
            return Err(DevError::InvalidParameter("noise sigma must be finite and >= 0".into()));
        }
        let image = match &attack {
            AttackConfig::Hideout { payload, plan } => infect(&image, payload, plan)?,
            _ => image,
        };
        Ok(Self {
            image,
            cost,
            attack,
            timer,
            subcount: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            cache: None,
        })
    }

    pub fn honest(image: MemoryImage) -> Result<Self> {
        Self::new(image, CostModel::default(), AttackConfig::Honest, TimerConfig::default(), 0)
    }

    /// Memory content the device actually holds.
    pub fn image(&self) -> &MemoryImage {
        &self.image
    }

    pub fn attack(&self) -> &AttackConfig {
        &self.attack
    }

    pub fn subcount(&self) -> u8 {
        self.subcount
    }

    fn honest_run(&mut self, seed: u32, hash: HashAlg) -> Result<(BmacResult, u64)> {
        if let Some((s, h, r, absorbed)) = self.cache {
            if s == seed && h == hash {
                return Ok((r, absorbed));
            }
        }
        let (r, trace) = bmac::bmac_traced(&self.image, seed, hash, &self.cost)?;
        self.cache = Some((seed, hash, r, trace.absorbed));
        Ok((r, trace.absorbed))
    }

    /// Cycles the device's timer reports for this run.
    fn measured_cycles(&mut self, honest: &BmacResult, absorbed: u64) -> u64 {
        let mut cycles = honest.cycles as i64;
        if self.attack == AttackConfig::StopStart {
            for _ in 0..absorbed {
                self.subcount = self.rng.gen_range(0..PRESCALER);
                cycles += self.timer.loss_rule.event_delta(self.subcount);
            }
        }
        if self.timer.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.timer.noise_sigma).unwrap();
            cycles += noise.sample(&mut self.rng).round() as i64;
        }
        cycles.max(0) as u64
    }

    pub fn attest(&mut self, seed: u32, hash: HashAlg) -> Result<AuthCode> {
        MinstdState::new(seed).map_err(|e| DevError::InvalidParameter(e.to_string()))?;
        let (honest, absorbed) = self.honest_run(seed, hash)?;
        let cycles = self.measured_cycles(&honest, absorbed);
        Ok(bmac::code_for_ticks(&honest, cycles / TICK_DIVISOR))
    }

    /// Answers one wire frame. Malformed or unexpected input produces an
    /// error frame rather than a failure.
    pub fn handle_frame(&mut self, frame: &[u8]) -> Vec<u8> {
        let reply = match Message::decode(frame) {
            Ok(Message::Request { seed, hash }) => match self.attest(seed, hash) {
                Ok(code) => Message::Response { code },
                Err(e) => Message::Error { reason: e.to_string() },
            },
            Ok(other) => Message::Error {
                reason: format!("device expects a request, got {other:?}"),
            },
            Err(e) => Message::Error { reason: e.to_string() },
        };
        reply.encode()
    }
}

/// Compressed image with `payload` at the start of the freed region, split
/// back into the original region layout.
pub fn infect(image: &MemoryImage, payload: &[u8], plan: &CompressionPlan) -> Result<MemoryImage> {
    let free = plan.free_region();
    if payload.len() > free.len() {
        return Err(DevError::PayloadTooLarge {
            payload: payload.len(),
            free: free.len(),
        });
    }
    let mut linear = shardlib::apply_compression(&image.to_linear(), plan)?;
    linear[free.start..free.start + payload.len()].copy_from_slice(payload);
    let mut regions = Vec::with_capacity(image.regions().len());
    let mut pos = 0;
    for (name, bytes) in image.regions() {
        regions.push((*name, linear[pos..pos + bytes.len()].to_vec()));
        pos += bytes.len();
    }
    Ok(MemoryImage::new(regions)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum VerifierPolicy {
    #[default]
    Exact,
    /// Accept codes matching any tick count within ±k of the expected one.
    TickWindow(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckReport {
    #[serde(serialize_with = "verdict_str")]
    pub verdict: Verdict,
    pub expected: AuthCode,
    pub received: AuthCode,
    pub expected_ticks: u64,
    /// Smallest tick offset that would explain the received code with an
    /// unchanged digest, searched within a bounded range.
    pub tick_offset: Option<i64>,
}

fn verdict_str<S: serde::Serializer>(v: &Verdict, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(if v.accepted() { "accept" } else { "reject" })
}

const DIAGNOSTIC_TICK_RANGE: i64 = 1 << 14;

pub struct Verifier {
    pub reference: MemoryImage,
    pub cost: CostModel,
    pub hash: HashAlg,
    pub policy: VerifierPolicy,
    pub timeout: Duration,
}

impl Verifier {
    pub fn new(reference: MemoryImage) -> Self {
        Self {
            reference,
            cost: CostModel::default(),
            hash: HashAlg::Sha256,
            policy: VerifierPolicy::Exact,
            timeout: Duration::from_secs(5),
        }
    }

    pub fn check(&self, seed: u32, received: AuthCode) -> Result<CheckReport> {
        verifier_check(&self.reference, seed, self.hash, &self.cost, self.policy, received)
    }
}

pub fn verifier_check(
    reference: &MemoryImage,
    seed: u32,
    hash: HashAlg,
    cost: &CostModel,
    policy: VerifierPolicy,
    received: AuthCode,
) -> Result<CheckReport> {
    let honest = bmac::bmac_compute(reference, seed, hash, cost)?;
    let expected = bmac::auth_code(&honest);
    let window = match policy {
        VerifierPolicy::Exact => 0,
        VerifierPolicy::TickWindow(k) => k,
    };
    let accepted = (honest.ticks.saturating_sub(window)..=honest.ticks.saturating_add(window))
        .any(|t| bmac::code_for_ticks(&honest, t) == received);
    let diff = (received.0 ^ honest.digest_word()) as i64;
    let tick_offset = (0..=DIAGNOSTIC_TICK_RANGE)
        .flat_map(|d| [d, -d])
        .find(|&d| {
            let t = honest.ticks as i64 + d;
            t >= 0 && (t & 0xffff) == diff
        });
    Ok(CheckReport {
        verdict: if accepted {
            Verdict::Accept
        } else {
            Verdict::Mismatch { expected, received }
        },
        expected,
        received,
        expected_ticks: honest.ticks,
        tick_offset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    ToDevice,
    ToVerifier,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub frames: Vec<(Direction, Vec<u8>)>,
}

impl Transcript {
    /// One `> hex` (to device) or `< hex` (to verifier) line per frame.
    pub fn hex_lines(&self) -> String {
        self.frames
            .iter()
            .map(|(d, f)| {
                let arrow = match d {
                    Direction::ToDevice => '>',
                    Direction::ToVerifier => '<',
                };
                format!("{arrow} {}\n", hex::encode(f))
            })
            .collect()
    }
}

/// Blocking byte stream over an mpsc channel, reassembling frames from
/// arbitrary chunks.
pub struct FrameReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new(rx: Receiver<Vec<u8>>) -> Self {
        Self { rx, buf: Vec::new() }
    }

    fn fill(&mut self, want: usize, timeout: Option<Duration>) -> Result<()> {
        while self.buf.len() < want {
            let chunk = match timeout {
                Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                    RecvTimeoutError::Timeout => DevError::Timeout,
                    RecvTimeoutError::Disconnected => DevError::Closed,
                })?,
                None => self.rx.recv().map_err(|_| DevError::Closed)?,
            };
            self.buf.extend_from_slice(&chunk);
        }
        Ok(())
    }

    /// Next complete frame, header included.
    pub fn read_frame(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        self.fill(4, timeout)?;
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len == 0 || len > 1 << 16 {
            self.buf.clear();
            return Err(FrameError::LengthMismatch { declared: len, actual: 0 }.into());
        }
        self.fill(4 + len, timeout)?;
        Ok(self.buf.drain(..4 + len).collect())
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub seed: u32,
    pub report: CheckReport,
    pub transcript: Transcript,
}

/// Rewrites response frames in transit.
pub type Tamper<'a> = &'a dyn Fn(&[u8]) -> Vec<u8>;

/// One request/response exchange with the device running on its own thread.
/// The device is handed back together with the outcome.
pub fn channel_run(
    device: SimDevice,
    verifier: &Verifier,
    seed: u32,
    tamper: Option<Tamper<'_>>,
) -> (SimDevice, Result<SessionOutcome>) {
    let (to_dev, dev_rx) = mpsc::channel::<Vec<u8>>();
    let (dev_tx, from_dev) = mpsc::channel::<Vec<u8>>();
    let worker = thread::spawn(move || device_loop(device, FrameReader::new(dev_rx), dev_tx));
    let outcome = verifier_session(verifier, seed, tamper, &to_dev, FrameReader::new(from_dev));
    drop(to_dev);
    let device = worker.join().expect("device thread panicked");
    (device, outcome)
}

fn device_loop(mut device: SimDevice, mut rx: FrameReader, tx: Sender<Vec<u8>>) -> SimDevice {
    loop {
        match rx.read_frame(None) {
            Ok(frame) => {
                if tx.send(device.handle_frame(&frame)).is_err() {
                    break;
                }
            }
            Err(DevError::Closed) => break,
            Err(e) => {
                let reply = Message::Error { reason: e.to_string() }.encode();
                if tx.send(reply).is_err() {
                    break;
                }
            }
        }
    }
    device
}

fn verifier_session(
    verifier: &Verifier,
    seed: u32,
    tamper: Option<Tamper<'_>>,
    tx: &Sender<Vec<u8>>,
    mut rx: FrameReader,
) -> Result<SessionOutcome> {
    let mut transcript = Transcript::default();
    let request = Message::Request {
        seed,
        hash: verifier.hash,
    }
    .encode();
    transcript.frames.push((Direction::ToDevice, request.clone()));
    tx.send(request).map_err(|_| DevError::Closed)?;
    let mut frame = rx.read_frame(Some(verifier.timeout))?;
    if let Some(t) = tamper {
        frame = t(&frame);
    }
    transcript.frames.push((Direction::ToVerifier, frame.clone()));
    match Message::decode(&frame)? {
        Message::Response { code } => Ok(SessionOutcome {
            seed,
            report: verifier.check(seed, code)?,
            transcript,
        }),
        Message::Error { reason } => Err(DevError::Remote(reason)),
        other => Err(DevError::Unexpected(other)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopStartStats {
    pub trials: u64,
    pub bytes: u64,
    pub mean_extra_cycles_per_byte: f64,
    pub detection_rate: f64,
}

/// Distinct attestation seeds used by the Monte-Carlo experiment; the honest
/// run for each is computed once.
const EXPERIMENT_SEEDS: usize = 16;

/// Monte-Carlo run of a device attesting an `m`-byte random image. `None`
/// runs the honest device as a baseline.
pub fn stop_start_experiment(m: usize, trials: u64, rule: Option<LossRule>, rng_seed: u64) -> Result<StopStartStats> {
    if m < 64 {
        return Err(DevError::InvalidParameter(format!("image of {m} bytes is below 64")));
    }
    if trials == 0 {
        return Err(DevError::InvalidParameter("no trials requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut bytes = vec![0u8; m];
    rng.fill(&mut bytes[..]);
    let image = MemoryImage::flash(bytes)?;
    let (attack, loss_rule) = match rule {
        Some(r) => (AttackConfig::StopStart, r),
        None => (AttackConfig::Honest, LossRule::default()),
    };
    let timer = TimerConfig {
        loss_rule,
        noise_sigma: 0.0,
    };
    let cost = CostModel::default();
    let seeds: Vec<u32> = (0..EXPERIMENT_SEEDS).map(|_| rng.gen_range(1..0x7fff_ffff)).collect();
    let mut device = SimDevice::new(image.clone(), cost, attack, timer, rng.gen())?;
    let mut honest = Vec::with_capacity(EXPERIMENT_SEEDS);
    for &s in &seeds {
        let (r, trace) = bmac::bmac_traced(&image, s, HashAlg::Sha256, &cost)?;
        honest.push((r, trace.absorbed));
    }
    let mut extra = 0f64;
    let mut detected = 0u64;
    for t in 0..trials {
        let (reference, absorbed) = honest[t as usize % EXPERIMENT_SEEDS];
        let measured = device.measured_cycles(&reference, absorbed);
        extra += (measured as f64 - reference.cycles as f64) / absorbed as f64;
        if bmac::code_for_ticks(&reference, measured / TICK_DIVISOR) != bmac::auth_code(&reference) {
            detected += 1;
        }
    }
    Ok(StopStartStats {
        trials,
        bytes: m as u64,
        mean_extra_cycles_per_byte: extra / trials as f64,
        detection_rate: detected as f64 / trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shardlib::{find_shards, plan_compression, IsaParams, ShardOptions};
    use proptest::prelude::{any, prop_assert_eq, prop_oneof, proptest, Strategy};

    fn random_image(seed: u64, n: usize) -> MemoryImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = vec![0u8; n];
        rng.fill(&mut b[..]);
        MemoryImage::flash(b).unwrap()
    }

    #[test]
    fn loss_rules() {
        assert!((LossRule::PeriodWrap.mean_delta() - 119.0 / 64.0).abs() < 1e-12);
        assert_eq!(LossRule::PeriodWrap.event_delta(0), 5);
        assert_eq!(LossRule::PeriodWrap.event_delta(62), -62);
        assert_eq!(LossRule::Uniform.event_delta(63), -58);
        for u in 0..PRESCALER {
            for rule in [LossRule::PeriodWrap, LossRule::Uniform] {
                let loss = rule.event_loss(u);
                assert!((0..=63).contains(&loss), "{rule:?} {u} {loss}");
            }
            assert_eq!(LossRule::Uniform.event_delta(u), 5 - LossRule::Uniform.event_loss(u));
        }
    }

    #[test]
    fn honest_device_agrees_with_verifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000u64 {
            let n = rng.gen_range(1..200);
            let image = random_image(i, n);
            let seed = rng.gen_range(1..0x7fff_ffff);
            let mut dev = SimDevice::honest(image.clone()).unwrap();
            let code = dev.attest(seed, HashAlg::Sha256).unwrap();
            let v = Verifier::new(image);
            assert!(v.check(seed, code).unwrap().verdict.accepted());
        }
    }

    #[test]
    fn honest_session_over_channel() {
        let image = random_image(1, 1024);
        let v = Verifier::new(image.clone());
        let (dev, out) = channel_run(SimDevice::honest(image).unwrap(), &v, 12345, None);
        let out = out.unwrap();
        assert!(out.report.verdict.accepted());
        assert_eq!(out.report.tick_offset, Some(0));
        assert_eq!(out.transcript.frames.len(), 2);
        let lines = out.transcript.hex_lines();
        assert!(lines.starts_with("> 00000006010000303901\n< 0000000302"));
        // the device survives the session and can be reused
        let (_, again) = channel_run(dev, &v, 99, None);
        assert!(again.unwrap().report.verdict.accepted());
    }

    #[test]
    fn corrupted_response_rejected() {
        let image = random_image(2, 512);
        let v = Verifier::new(image.clone());
        let flip = |f: &[u8]| {
            let mut f = f.to_vec();
            f[6] ^= 1;
            f
        };
        let (_, out) = channel_run(SimDevice::honest(image).unwrap(), &v, 7, Some(&flip));
        assert!(!out.unwrap().report.verdict.accepted());
    }

    #[test]
    fn stale_response_replay_rejected() {
        let image = random_image(5, 256);
        let mut dev = SimDevice::honest(image.clone()).unwrap();
        let stale = Message::Response {
            code: dev.attest(1000, HashAlg::Sha256).unwrap(),
        }
        .encode();
        let v = Verifier::new(image);
        let replay = |_: &[u8]| stale.clone();
        let mut rejected = 0;
        for seed in 1001..1101 {
            let (d, out) = channel_run(dev, &v, seed, Some(&replay));
            dev = d;
            if !out.unwrap().report.verdict.accepted() {
                rejected += 1;
            }
        }
        // two random 16-bit codes collide with probability 2^-16 per seed
        assert!(rejected >= 99, "{rejected}");
    }

    #[test]
    fn malformed_frames_get_error_replies() {
        let mut dev = SimDevice::honest(random_image(1, 64)).unwrap();
        for bad in [
            vec![0, 0, 0, 6, 1, 0, 0, 0, 1, 9],
            vec![0, 0, 0, 3, 2, 0, 1],
            vec![0, 0, 0, 1, 0x33],
            vec![1, 2],
            Message::Request { seed: 0, hash: HashAlg::Sha256 }.encode(),
        ] {
            let reply = Message::decode(&dev.handle_frame(&bad)).unwrap();
            assert!(matches!(reply, Message::Error { .. }), "{bad:?}");
        }
        let mut r = FrameReader::new({
            let (tx, rx) = mpsc::channel();
            tx.send(vec![0, 0]).unwrap();
            rx
        });
        assert!(matches!(r.read_frame(Some(Duration::from_millis(10))), Err(DevError::Closed)));
    }

    #[test]
    fn timeout_reported() {
        let (_tx, rx) = mpsc::channel::<Vec<u8>>();
        let mut r = FrameReader::new(rx);
        assert!(matches!(r.read_frame(Some(Duration::from_millis(5))), Err(DevError::Timeout)));
    }

    #[test]
    fn frames_split_across_chunks() {
        let (tx, rx) = mpsc::channel();
        let frame = Message::Response { code: AuthCode(0xbeef) }.encode();
        for b in &frame {
            tx.send(vec![*b]).unwrap();
        }
        let mut r = FrameReader::new(rx);
        assert_eq!(r.read_frame(None).unwrap(), frame);
    }

    #[test]
    fn stop_start_band_and_detection() {
        let s = stop_start_experiment(8192, 1000, Some(LossRule::PeriodWrap), 1).unwrap();
        assert!((1.5..=2.5).contains(&s.mean_extra_cycles_per_byte), "{s:?}");
        assert!(s.detection_rate >= 0.95);
        let h = stop_start_experiment(8192, 10, None, 1).unwrap();
        assert_eq!(h.mean_extra_cycles_per_byte, 0.0);
        assert_eq!(h.detection_rate, 0.0);
        assert!(stop_start_experiment(8192, 0, None, 1).is_err());
        assert!(stop_start_experiment(63, 1, None, 1).is_err());
    }

    #[test]
    fn detection_monotone_in_size() {
        let small = stop_start_experiment(1024, 500, Some(LossRule::PeriodWrap), 9).unwrap();
        let large = stop_start_experiment(65536, 500, Some(LossRule::PeriodWrap), 9).unwrap();
        assert!(large.detection_rate >= small.detection_rate);
    }

    #[test]
    fn noise_with_tick_window() {
        let image = random_image(4, 2048);
        let timer = TimerConfig {
            noise_sigma: 20.0,
            ..Default::default()
        };
        let mut dev = SimDevice::new(image.clone(), CostModel::default(), AttackConfig::Honest, timer, 3).unwrap();
        let mut v = Verifier::new(image);
        v.policy = VerifierPolicy::TickWindow(2);
        for seed in 1..50 {
            let code = dev.attest(seed, HashAlg::Sha256).unwrap();
            assert!(v.check(seed, code).unwrap().verdict.accepted());
        }
    }

    fn hideout_fixture() -> (MemoryImage, CompressionPlan) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bytes = vec![0u8; 4096];
        rng.fill(&mut bytes[..]);
        let pat: Vec<u8> = (0..128).map(|_| rng.gen_range(1..=255)).collect();
        for o in [512, 2048, 3072] {
            bytes[o..o + 128].copy_from_slice(&pat);
        }
        let report = find_shards(&bytes, &ShardOptions::default()).unwrap();
        let plan = plan_compression(&report, IsaParams::default()).unwrap();
        (MemoryImage::flash(bytes).unwrap(), plan)
    }

    #[test]
    fn hideout_rejected() {
        let (image, plan) = hideout_fixture();
        assert!(plan.freed() >= 200);
        let attack = AttackConfig::Hideout {
            payload: vec![0x0C; 200],
            plan: plan.clone(),
        };
        let dev = SimDevice::new(image.clone(), CostModel::default(), attack, TimerConfig::default(), 0).unwrap();
        assert_eq!(dev.image().len(), image.len());
        let v = Verifier::new(image.clone());
        let (_, out) = channel_run(dev, &v, 4242, None);
        assert!(!out.unwrap().report.verdict.accepted());
        let too_big = AttackConfig::Hideout {
            payload: vec![1; plan.freed() + 1],
            plan,
        };
        assert!(matches!(
            SimDevice::new(image, CostModel::default(), too_big, TimerConfig::default(), 0),
            Err(DevError::PayloadTooLarge { .. })
        ));
    }

    fn message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u32>(), any::<bool>()).prop_map(|(seed, k)| Message::Request {
                seed,
                hash: if k { HashAlg::Keccak256 } else { HashAlg::Sha256 }
            }),
            any::<u16>().prop_map(|c| Message::Response { code: AuthCode(c) }),
            ".{0,40}".prop_map(|reason| Message::Error { reason }),
        ]
    }

    proptest! {
        #[test]
        fn frame_round_trip(m in message()) {
            prop_assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..16)) {
            let _ = Message::decode(&bytes);
        }
    }
}
