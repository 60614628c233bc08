//! Bijective MAC over a device memory image.
//!
//! The digest absorbs every byte of the image exactly once, in the order
//! given by the exponential permutation of [`crate::numlib`]. The work done
//! along the way is charged against a [`CostModel`] so that the elapsed time,
//! measured by a /64 timer, can be folded into a 16-bit authentication code.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sha3::Keccak256;
use thiserror::Error;

use crate::numlib::{self, NumError, PermutationParams};

/// Timer prescaler: one tick every 64 cycles.
pub const TICK_DIVISOR: u64 = 64;

#[derive(Debug, Error)]
pub enum BmacError {
    #[error("memory image is empty")]
    EmptyImage,
    #[error("duplicate region {0}")]
    DuplicateRegion(Region),
    #[error("unknown region name {0:?}")]
    UnknownRegion(String),
    #[error("unknown hash algorithm {0:?}")]
    UnknownHash(String),
    #[error("cost model field {0} must be at least 1")]
    InvalidCost(&'static str),
    #[error("image holds {image} bytes but permutation group only covers {covered}")]
    GroupTooSmall { image: u64, covered: u64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, BmacError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "FLASH")]
    Flash,
    #[serde(rename = "SRAM")]
    Sram,
    #[serde(rename = "EEPROM")]
    Eeprom,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Flash => "FLASH",
            Region::Sram => "SRAM",
            Region::Eeprom => "EEPROM",
        })
    }
}

impl FromStr for Region {
    type Err = BmacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FLASH" => Ok(Region::Flash),
            "SRAM" => Ok(Region::Sram),
            "EEPROM" => Ok(Region::Eeprom),
            _ => Err(BmacError::UnknownRegion(s.to_string())),
        }
    }
}

/// Attested memories laid out as one linear address space, regions
/// concatenated in the order given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryImage {
    regions: Vec<(Region, Vec<u8>)>,
    len: usize,
}

impl MemoryImage {
    pub fn new(regions: Vec<(Region, Vec<u8>)>) -> Result<Self> {
        for (i, (name, _)) in regions.iter().enumerate() {
            if regions[..i].iter().any(|(other, _)| other == name) {
                return Err(BmacError::DuplicateRegion(*name));
            }
        }
        let len = regions.iter().map(|(_, bytes)| bytes.len()).sum();
        if len == 0 {
            return Err(BmacError::EmptyImage);
        }
        Ok(Self { regions, len })
    }

    /// Single FLASH region.
    pub fn flash(bytes: Vec<u8>) -> Result<Self> {
        Self::new(vec![(Region::Flash, bytes)])
    }

    /// Splits a raw binary according to a `key=value` manifest:
    ///
    /// ```text
    /// order=FLASH,EEPROM
    /// FLASH=4096
    /// EEPROM=512
    /// ```
    ///
    /// Sizes must add up to the binary length. Blank lines and `#` comments
    /// are ignored.
    pub fn from_manifest(manifest: &str, raw: &[u8]) -> Result<Self> {
        let mut order: Option<Vec<Region>> = None;
        let mut sizes: Vec<(Region, usize)> = Vec::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BmacError::Manifest(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.eq_ignore_ascii_case("order") {
                order = Some(
                    value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(str::parse)
                        .collect::<Result<_>>()?,
                );
            } else {
                let region: Region = key.parse()?;
                let size = value
                    .parse()
                    .map_err(|_| BmacError::Manifest(format!("bad size for {region}: {value:?}")))?;
                sizes.push((region, size));
            }
        }
        let order = order.unwrap_or_else(|| sizes.iter().map(|(r, _)| *r).collect());
        let total: usize = order
            .iter()
            .map(|r| sizes.iter().find(|(s, _)| s == r).map_or(0, |(_, n)| *n))
            .sum();
        if total != raw.len() {
            return Err(BmacError::Manifest(format!(
                "manifest sizes add up to {total} bytes, binary has {}",
                raw.len()
            )));
        }
        let mut offset = 0;
        let mut regions = Vec::with_capacity(order.len());
        for region in order {
            let size = sizes
                .iter()
                .find(|(s, _)| *s == region)
                .map(|(_, n)| *n)
                .ok_or_else(|| BmacError::Manifest(format!("no size given for {region}")))?;
            regions.push((region, raw[offset..offset + size].to_vec()));
            offset += size;
        }
        Self::new(regions)
    }

    pub fn manifest(&self) -> String {
        let order: Vec<String> = self.regions.iter().map(|(r, _)| r.to_string()).collect();
        let mut out = format!("order={}\n", order.join(","));
        for (r, bytes) in &self.regions {
            out.push_str(&format!("{r}={}\n", bytes.len()));
        }
        out
    }

    pub fn regions(&self) -> &[(Region, Vec<u8>)] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Byte at a linear address.
    pub fn byte(&self, mut addr: usize) -> Option<u8> {
        for (_, bytes) in &self.regions {
            if addr < bytes.len() {
                return Some(bytes[addr]);
            }
            addr -= bytes.len();
        }
        None
    }

    pub fn to_linear(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len);
        for (_, bytes) in &self.regions {
            out.extend_from_slice(bytes);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HashAlg {
    #[default]
    Sha256,
    Keccak256,
}

impl HashAlg {
    pub fn id(self) -> u8 {
        match self {
            HashAlg::Sha256 => 0x01,
            HashAlg::Keccak256 => 0x02,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0x01 => Some(HashAlg::Sha256),
            0x02 => Some(HashAlg::Keccak256),
            _ => None,
        }
    }

    pub fn digest(self, data: &[u8]) -> [u8; 32] {
        let mut h = Hasher::new(self);
        h.update(data);
        h.finalize()
    }
}

impl FromStr for HashAlg {
    type Err = BmacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sha256" => Ok(HashAlg::Sha256),
            "keccak256" | "keccak" => Ok(HashAlg::Keccak256),
            _ => Err(BmacError::UnknownHash(s.to_string())),
        }
    }
}

impl fmt::Display for HashAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HashAlg::Sha256 => "sha256",
            HashAlg::Keccak256 => "keccak256",
        })
    }
}

enum Hasher {
    Sha256(Sha256),
    Keccak256(Keccak256),
}

impl Hasher {
    fn new(alg: HashAlg) -> Self {
        match alg {
            HashAlg::Sha256 => Hasher::Sha256(Sha256::new()),
            HashAlg::Keccak256 => Hasher::Keccak256(Keccak256::new()),
        }
    }

    fn update(&mut self, data: &[u8]) {
        match self {
            Hasher::Sha256(h) => h.update(data),
            Hasher::Keccak256(h) => h.update(data),
        }
    }

    fn finalize(self) -> [u8; 32] {
        match self {
            Hasher::Sha256(h) => h.finalize().into(),
            Hasher::Keccak256(h) => h.finalize().into(),
        }
    }
}

/// Abstract cycle costs of the attestation routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostModel {
    /// Cycles per modular multiplication.
    pub cost_mul: u64,
    /// Cycles per memory fetch plus hash absorb.
    pub cost_byte: u64,
    /// Setup cycles.
    pub cost_fixed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            cost_mul: 60,
            cost_byte: 10,
            cost_fixed: 1000,
        }
    }
}

impl CostModel {
    pub fn new(cost_mul: u64, cost_byte: u64, cost_fixed: u64) -> Result<Self> {
        let model = Self {
            cost_mul,
            cost_byte,
            cost_fixed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cost_mul == 0 {
            return Err(BmacError::InvalidCost("cost_mul"));
        }
        if self.cost_byte == 0 {
            return Err(BmacError::InvalidCost("cost_byte"));
        }
        if self.cost_fixed == 0 {
            return Err(BmacError::InvalidCost("cost_fixed"));
        }
        Ok(())
    }
}

/// Modular multiplications spent on one walk step with exponent `z`: the
/// recursive update of `z`, then `bits - 1` squarings of `g2` plus one
/// multiply per set bit of `z`.
pub fn step_multiplications(z: u64, bits: u32) -> u64 {
    1 + (bits as u64 - 1) + z.count_ones() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BmacResult {
    #[serde(with = "hex_bytes")]
    pub digest: [u8; 32],
    pub cycles: u64,
    pub ticks: u64,
}

impl BmacResult {
    pub fn new(digest: [u8; 32], cycles: u64) -> Self {
        Self {
            digest,
            cycles,
            ticks: cycles / TICK_DIVISOR,
        }
    }

    /// Last two digest bytes, big-endian.
    pub fn digest_word(&self) -> u16 {
        u16::from_be_bytes([self.digest[30], self.digest[31]])
    }
}

/// Per-step trace of a bMAC run, for timing models layered on top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTrace {
    /// Walk steps executed, including skipped indices.
    pub steps: u64,
    /// Bytes absorbed.
    pub absorbed: u64,
    pub multiplications: u64,
}

/// Runs the bMAC walk with explicit parameters. The walk stops as soon as the
/// last of the `m` bytes has been absorbed; trailing out-of-range steps are
/// never executed.
pub fn bmac_with_params(
    image: &MemoryImage,
    params: &PermutationParams,
    hash: HashAlg,
    cost: &CostModel,
) -> Result<(BmacResult, StepTrace)> {
    let m = image.len() as u64;
    let covered = params.group().p() - 1;
    if m > covered {
        return Err(BmacError::GroupTooSmall { image: m, covered });
    }
    let linear = image.to_linear();
    let bits = params.group().bit_len();
    let mut hasher = Hasher::new(hash);
    let mut trace = StepTrace {
        steps: 0,
        absorbed: 0,
        multiplications: 0,
    };
    for step in params.steps() {
        if trace.absorbed == m {
            break;
        }
        trace.steps += 1;
        trace.multiplications += step_multiplications(step.z, bits);
        if step.index < m {
            hasher.update(&[linear[step.index as usize]]);
            trace.absorbed += 1;
        }
    }
    let cycles = cost.cost_fixed + cost.cost_mul * trace.multiplications + cost.cost_byte * trace.absorbed;
    Ok((BmacResult::new(hasher.finalize(), cycles), trace))
}

/// Group used for an image of `m` bytes: the smallest qualifying safe prime
/// strictly greater than `m`.
pub fn group_for_len(m: usize) -> Result<numlib::PrimeGroup> {
    Ok(numlib::find_safe_prime(m as u64 + 1)?)
}

pub fn bmac_compute(image: &MemoryImage, seed: u32, hash: HashAlg, cost: &CostModel) -> Result<BmacResult> {
    Ok(bmac_traced(image, seed, hash, cost)?.0)
}

pub fn bmac_traced(
    image: &MemoryImage,
    seed: u32,
    hash: HashAlg,
    cost: &CostModel,
) -> Result<(BmacResult, StepTrace)> {
    cost.validate()?;
    let group = group_for_len(image.len())?;
    let params = numlib::derive_params(seed, group)?;
    bmac_with_params(image, &params, hash, cost)
}

/// 16-bit authentication code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuthCode(pub u16);

impl fmt::Display for AuthCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04x}", self.0)
    }
}

/// Digest word XOR the 16-bit tick register.
pub fn auth_code(result: &BmacResult) -> AuthCode {
    code_for_ticks(result, result.ticks)
}

pub fn code_for_ticks(result: &BmacResult, ticks: u64) -> AuthCode {
    AuthCode(result.digest_word() ^ (ticks & 0xffff) as u16)
}

/// LED pattern, most significant bit first: `L` long blink for 1, `s` short
/// for 0, nibbles separated by a pause `.`.
pub fn blink_encode(code: AuthCode) -> String {
    let mut out = String::with_capacity(19);
    for bit in (0..16).rev() {
        out.push(if code.0 >> bit & 1 == 1 { 'L' } else { 's' });
        if bit % 4 == 0 && bit != 0 {
            out.push('.');
        }
    }
    out
}

pub fn blink_decode(pattern: &str) -> Option<AuthCode> {
    let bits: Vec<char> = pattern.chars().filter(|&c| c != '.').collect();
    if bits.len() != 16 {
        return None;
    }
    bits.iter().try_fold(0u16, |acc, c| match c {
        'L' => Some(acc << 1 | 1),
        's' => Some(acc << 1),
        _ => None,
    })
    .map(AuthCode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    /// Codes differ. A digest change and a tick change are indistinguishable
    /// once XORed together, so only the difference pattern is reported.
    Mismatch { expected: AuthCode, received: AuthCode },
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

pub fn bmac_verify(
    reference: &MemoryImage,
    seed: u32,
    received: AuthCode,
    hash: HashAlg,
    cost: &CostModel,
) -> Result<Verdict> {
    let expected = auth_code(&bmac_compute(reference, seed, hash, cost)?);
    Ok(if expected == received {
        Verdict::Accept
    } else {
        Verdict::Mismatch { expected, received }
    })
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlib::PrimeGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture_params() -> PermutationParams {
        PermutationParams::new(PrimeGroup::new(7).unwrap(), 5, 3, 1).unwrap()
    }

    fn fixture_image() -> MemoryImage {
        MemoryImage::flash(vec![0xAA, 0xBB, 0xCC, 0xDD]).unwrap()
    }

    /// Independent cycle count: brute-force P over [0, p-2], recompute every
    /// exponent from scratch and stop after the last in-range index.
    fn oracle_cycles(params: &PermutationParams, m: u64, cost: &CostModel) -> u64 {
        let p = params.group().p();
        let bits = 64 - p.leading_zeros() as u64;
        let table: Vec<u64> = (0..p - 1).map(|y| params.perm_p(y).unwrap()).collect();
        let last = table.iter().rposition(|&i| i < m).unwrap();
        let mut muls = 0;
        for y in 0..=last as u64 {
            let z = params.s1() as u128 * numlib::pow_mod(params.g1(), y + 1, p) as u128 % p as u128;
            muls += 1 + (bits - 1) + (z as u64).count_ones() as u64;
        }
        cost.cost_fixed + cost.cost_mul * muls + cost.cost_byte * m
    }

    #[test]
    fn fixture_digest_matches_permuted_hash() {
        let (res, trace) =
            bmac_with_params(&fixture_image(), &fixture_params(), HashAlg::Sha256, &CostModel::default()).unwrap();
        assert_eq!(
            hex::encode(res.digest),
            "c1981adbc483ce1a24eb14fedf804a801ee91d3beebe9ad6758b75c25e1efe99"
        );
        let expected: [u8; 32] = Sha256::digest([0xDD, 0xAA, 0xBB, 0xCC]).into();
        assert_eq!(res.digest, expected);
        // order [3,0,1,2] is complete after y = 5 (value 2)
        assert_eq!(trace.steps, 6);
        assert_eq!(trace.absorbed, 4);
    }

    #[test]
    fn fixture_code_matches_cycle_oracle() {
        // fixture parameters bypass validation, so a zero setup cost is allowed
        let cost = CostModel {
            cost_mul: 10,
            cost_byte: 5,
            cost_fixed: 0,
        };
        let (res, _) = bmac_with_params(&fixture_image(), &fixture_params(), HashAlg::Sha256, &cost).unwrap();
        let cycles = oracle_cycles(&fixture_params(), 4, &cost);
        assert_eq!(res.cycles, cycles);
        let expected_code = u16::from_be_bytes([res.digest[30], res.digest[31]]) ^ (cycles / 64) as u16;
        assert_eq!(auth_code(&res).0, expected_code);
    }

    #[test]
    fn cycles_match_oracle_for_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = CostModel::default();
        for _ in 0..30 {
            let m = rng.gen_range(1..600usize);
            let seed = rng.gen_range(1..numlib::MINSTD_MODULUS);
            let image = MemoryImage::flash((0..m).map(|_| rng.gen()).collect()).unwrap();
            let params = numlib::derive_params(seed, group_for_len(m).unwrap()).unwrap();
            let (res, _) = bmac_with_params(&image, &params, HashAlg::Sha256, &cost).unwrap();
            assert_eq!(res.cycles, oracle_cycles(&params, m as u64, &cost));
            assert_eq!(res, bmac_compute(&image, seed, HashAlg::Sha256, &cost).unwrap());
        }
    }

    #[test]
    fn deterministic_and_bit_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bytes: Vec<u8> = (0..512).map(|_| rng.gen()).collect();
        let image = MemoryImage::flash(bytes.clone()).unwrap();
        let cost = CostModel::default();
        let a = bmac_compute(&image, 77, HashAlg::Sha256, &cost).unwrap();
        assert_eq!(a, bmac_compute(&image, 77, HashAlg::Sha256, &cost).unwrap());
        for _ in 0..100 {
            let mut flipped = bytes.clone();
            let i = rng.gen_range(0..flipped.len());
            flipped[i] ^= 1 << rng.gen_range(0..8);
            let b = bmac_compute(&MemoryImage::flash(flipped).unwrap(), 77, HashAlg::Sha256, &cost).unwrap();
            assert_ne!(a.digest, b.digest);
            assert_eq!(a.cycles, b.cycles);
        }
    }

    #[test]
    fn keccak_differs_from_sha() {
        let image = fixture_image();
        let cost = CostModel::default();
        let s = bmac_compute(&image, 5, HashAlg::Sha256, &cost).unwrap();
        let k = bmac_compute(&image, 5, HashAlg::Keccak256, &cost).unwrap();
        assert_ne!(s.digest, k.digest);
        assert_eq!(s.cycles, k.cycles);
    }

    #[test]
    fn auth_code_examples() {
        let mut digest = [0u8; 32];
        digest[30] = 0x12;
        digest[31] = 0x34;
        assert_eq!(auth_code(&BmacResult::new(digest, 0)), AuthCode(0x1234));
        assert_eq!(auth_code(&BmacResult::new(digest, 64)), AuthCode(0x1235));
        assert_eq!(BmacResult::new(digest, 64 * 0x10001).ticks, 0x10001);
        assert_eq!(auth_code(&BmacResult::new(digest, 64 * 0x10001)), AuthCode(0x1235));
    }

    #[test]
    fn blink_examples() {
        assert_eq!(blink_encode(AuthCode(0)), "ssss.ssss.ssss.ssss");
        assert_eq!(blink_encode(AuthCode(0xFFFF)), "LLLL.LLLL.LLLL.LLLL");
        assert_eq!(blink_encode(AuthCode(0x1234)), "sssL.ssLs.ssLL.sLss");
        for v in [0u16, 1, 0x1234, 0xBEEF, 0xFFFF] {
            assert_eq!(blink_decode(&blink_encode(AuthCode(v))), Some(AuthCode(v)));
        }
        assert_eq!(blink_decode("sss"), None);
    }

    #[test]
    fn verify_accepts_and_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes: Vec<u8> = (0..300).map(|_| rng.gen()).collect();
        let image = MemoryImage::flash(bytes.clone()).unwrap();
        let cost = CostModel::default();
        let res = bmac_compute(&image, 1234, HashAlg::Sha256, &cost).unwrap();
        let code = auth_code(&res);
        assert!(bmac_verify(&image, 1234, code, HashAlg::Sha256, &cost).unwrap().accepted());
        let mut tampered = bytes;
        tampered[17] ^= 0x40;
        let tampered = MemoryImage::flash(tampered).unwrap();
        assert!(!bmac_verify(&tampered, 1234, code, HashAlg::Sha256, &cost).unwrap().accepted());
        let late = code_for_ticks(&res, res.ticks + 1);
        assert!(!bmac_verify(&image, 1234, late, HashAlg::Sha256, &cost).unwrap().accepted());
    }

    #[test]
    fn image_layout_and_manifest() {
        let image = MemoryImage::new(vec![
            (Region::Flash, vec![1, 2, 3]),
            (Region::Eeprom, vec![4, 5]),
        ])
        .unwrap();
        assert_eq!(image.len(), 5);
        assert_eq!(image.byte(3), Some(4));
        assert_eq!(image.byte(5), None);
        let raw = image.to_linear();
        let back = MemoryImage::from_manifest(&image.manifest(), &raw).unwrap();
        assert_eq!(back, image);
        assert!(MemoryImage::from_manifest("order=FLASH\nFLASH=4\n", &raw).is_err());
        assert!(MemoryImage::from_manifest("FLASH\n", &raw).is_err());
        assert!(MemoryImage::new(vec![(Region::Sram, vec![1]), (Region::Sram, vec![2])]).is_err());
        assert!(MemoryImage::new(vec![(Region::Sram, vec![])]).is_err());
        let default_order = MemoryImage::from_manifest("# comment\nFLASH=2\nSRAM=3\n", &raw).unwrap();
        assert_eq!(default_order.regions()[1].0, Region::Sram);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::new(0, 1, 1).is_err());
        assert!(CostModel::new(1, 0, 1).is_err());
        assert!(CostModel::new(1, 1, 0).is_err());
        assert_eq!("keccak-256".parse::<HashAlg>().unwrap(), HashAlg::Keccak256);
        assert!("md5".parse::<HashAlg>().is_err());
    }
}
