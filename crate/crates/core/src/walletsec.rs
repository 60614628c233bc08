//! secp256k1 wallet cryptography and attacks on it: nonce reuse, duplicate
//! r scanning, the k = 1/2 nonce, SPA trace inversion, HD derivation,
//! passphrase seeds and brainwallet search.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;
use std::time::Instant;

use hmac::{Hmac, Mac};
use k256::elliptic_curve::group::Group;
use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::point::AffineCoordinates;
use k256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use k256::elliptic_curve::PrimeField;
use k256::{FieldBytes, ProjectivePoint, U256};
pub use k256::{AffinePoint, Scalar};
use ripemd::Ripemd160;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WalletError {
    #[error("scalar is zero or not below the group order")]
    ScalarRange,
    #[error("nonce gives r = 0 or s = 0")]
    RejectedNonce,
    #[error("records have different r values")]
    NotDuplicate,
    #[error("s values are equal; the pair carries no key information")]
    Degenerate,
    #[error("no recovered candidate is consistent with both records")]
    Inconsistent,
    #[error("empty trace")]
    EmptyTrace,
    #[error("trace of {0} operations exceeds 256 bits")]
    TraceTooLong(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("seed must be 16 to 64 bytes, got {0}")]
    SeedLength(usize),
    #[error("child key at index {0:#x} is invalid; use the next index")]
    InvalidChild(u32),
    #[error("bad derivation path {0:?}")]
    BadPath(String),
    #[error("bad hex in {field}: {value:?}")]
    Hex { field: &'static str, value: String },
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, WalletError>;

/// Big-endian 32 bytes to a scalar, rejecting 0 and values >= n.
pub fn scalar_from_bytes(bytes: &[u8; 32]) -> Result<Scalar> {
    let s: Option<Scalar> = Scalar::from_repr(FieldBytes::from(*bytes)).into();
    match s {
        Some(s) if !bool::from(s.is_zero()) => Ok(s),
        _ => Err(WalletError::ScalarRange),
    }
}

pub fn scalar_bytes(s: &Scalar) -> [u8; 32] {
    s.to_bytes().into()
}

/// Message hash as a scalar, reduced mod n.
pub fn hash_scalar(e: &[u8; 32]) -> Scalar {
    <Scalar as Reduce<U256>>::reduce_bytes(&FieldBytes::from(*e))
}

fn x_scalar(p: &AffinePoint) -> Scalar {
    <Scalar as Reduce<U256>>::reduce_bytes(&p.x())
}

pub fn public_key(z: &Scalar) -> AffinePoint {
    (ProjectivePoint::GENERATOR * z).to_affine()
}

/// SEC1 encoding.
pub fn encode_point(p: &AffinePoint, compressed: bool) -> Vec<u8> {
    p.to_encoded_point(compressed).as_bytes().to_vec()
}

pub fn decode_point(bytes: &[u8]) -> Option<AffinePoint> {
    let ep = k256::EncodedPoint::from_bytes(bytes).ok()?;
    Option::from(AffinePoint::from_encoded_point(&ep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub r: Scalar,
    pub s: Scalar,
}

pub fn ecdsa_sign(z: &Scalar, e: &[u8; 32], k: &Scalar) -> Result<Signature> {
    if bool::from(z.is_zero()) || bool::from(k.is_zero()) {
        return Err(WalletError::ScalarRange);
    }
    let r = x_scalar(&public_key(k));
    let k_inv: Scalar = Option::from(k.invert()).ok_or(WalletError::ScalarRange)?;
    let s = k_inv * (hash_scalar(e) + z * &r);
    if bool::from(r.is_zero()) || bool::from(s.is_zero()) {
        return Err(WalletError::RejectedNonce);
    }
    Ok(Signature { r, s })
}

pub fn ecdsa_verify(public: &AffinePoint, e: &[u8; 32], sig: &Signature) -> bool {
    if bool::from(sig.r.is_zero()) || bool::from(sig.s.is_zero()) {
        return false;
    }
    let Some(w) = Option::<Scalar>::from(sig.s.invert()) else {
        return false;
    };
    let u1 = hash_scalar(e) * &w;
    let u2 = sig.r * &w;
    let p = ProjectivePoint::GENERATOR * u1 + ProjectivePoint::from(*public) * u2;
    if bool::from(p.is_identity()) {
        return false;
    }
    x_scalar(&p.to_affine()) == sig.r
}

mod hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// A signature together with its message hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureRecord {
    #[serde(with = "hex32")]
    pub r: [u8; 32],
    #[serde(with = "hex32")]
    pub s: [u8; 32],
    #[serde(with = "hex32")]
    pub e: [u8; 32],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_id: Option<String>,
}

impl SignatureRecord {
    pub fn new(sig: &Signature, e: [u8; 32], key_id: Option<String>) -> Self {
        Self {
            r: scalar_bytes(&sig.r),
            s: scalar_bytes(&sig.s),
            e,
            key_id,
        }
    }

    pub fn signature(&self) -> Result<Signature> {
        Ok(Signature {
            r: scalar_from_bytes(&self.r)?,
            s: scalar_from_bytes(&self.s)?,
        })
    }
}

fn parse_hex32(field: &'static str, value: &str) -> Result<[u8; 32]> {
    let v = value.trim().trim_start_matches("0x");
    let padded = format!("{v:0>64}");
    hex::decode(&padded)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| WalletError::Hex {
            field,
            value: value.to_string(),
        })
}

#[derive(Deserialize)]
struct CsvRow {
    r: String,
    s: String,
    e: String,
    #[serde(default)]
    key_id: Option<String>,
}

/// Reads `r,s,e[,key_id]` hex columns with a header row.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<SignatureRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| WalletError::Csv(e.to_string()))?;
        out.push(SignatureRecord {
            r: parse_hex32("r", &row.r)?,
            s: parse_hex32("s", &row.s)?,
            e: parse_hex32("e", &row.e)?,
            key_id: row.key_id.filter(|k| !k.is_empty()),
        });
    }
    Ok(out)
}

pub fn write_records_csv(records: &[SignatureRecord]) -> String {
    let mut s = String::from("r,s,e,key_id\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{}\n",
            hex::encode(r.r),
            hex::encode(r.s),
            hex::encode(r.e),
            r.key_id.as_deref().unwrap_or("")
        ));
    }
    s
}

/// Private key from two signatures made with the same nonce. Both the
/// given `s2` and its negation are tried; a candidate is returned only if
/// the nonce it implies reproduces both records.
pub fn recover_from_duplicate_k(a: &SignatureRecord, b: &SignatureRecord) -> Result<Scalar> {
    if a.r != b.r {
        return Err(WalletError::NotDuplicate);
    }
    let s1 = scalar_from_bytes(&a.s)?;
    let s2 = scalar_from_bytes(&b.s)?;
    let r = scalar_from_bytes(&a.r)?;
    if s1 == s2 {
        return Err(WalletError::Degenerate);
    }
    let (e1, e2) = (hash_scalar(&a.e), hash_scalar(&b.e));
    let r_inv: Scalar = Option::from(r.invert()).ok_or(WalletError::ScalarRange)?;
    for s2c in [s2, -s2] {
        let Some(d) = Option::<Scalar>::from((s1 - s2c).invert()) else {
            continue;
        };
        let z = (e1 * &s2c - e2 * &s1) * &r_inv * &d;
        if bool::from(z.is_zero()) {
            continue;
        }
        let Some(s1_inv) = Option::<Scalar>::from(s1.invert()) else {
            continue;
        };
        let k = (e1 + z * &r) * &s1_inv;
        let consistent = !bool::from(k.is_zero())
            && x_scalar(&public_key(&k)) == r
            && (s2 * &k == e2 + z * &r || -s2 * &k == e2 + z * &r);
        if consistent {
            return Ok(z);
        }
    }
    Err(WalletError::Inconsistent)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RGroup {
    pub r: String,
    /// Record indices sharing this r, ascending.
    pub records: Vec<usize>,
    pub recovered_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DuplicateReport {
    pub total_records: usize,
    /// Distinct r values appearing at least twice.
    pub repeated_r: usize,
    /// Distinct keys involved in repeated r values; records without a key id
    /// count individually.
    pub affected_keys: usize,
    /// Largest group first.
    pub groups: Vec<RGroup>,
}

/// Groups records by r. Groups of the same key are run through nonce-reuse
/// recovery on their first usable pair.
pub fn scan_duplicate_r(records: &[SignatureRecord]) -> DuplicateReport {
    let mut by_r: HashMap<[u8; 32], Vec<usize>> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        by_r.entry(rec.r).or_default().push(i);
    }
    let mut groups: Vec<RGroup> = by_r
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(r, v)| {
            let recovered_key = first_recovery(records, &v).map(|z| hex::encode(scalar_bytes(&z)));
            RGroup {
                r: hex::encode(r),
                records: v,
                recovered_key,
            }
        })
        .collect();
    groups.sort_by(|a, b| b.records.len().cmp(&a.records.len()).then_with(|| a.r.cmp(&b.r)));
    let mut keys = HashSet::new();
    let mut anonymous = 0;
    for g in &groups {
        for &i in &g.records {
            match &records[i].key_id {
                Some(k) => {
                    keys.insert(k.as_str());
                }
                None => anonymous += 1,
            }
        }
    }
    DuplicateReport {
        total_records: records.len(),
        repeated_r: groups.len(),
        affected_keys: keys.len() + anonymous,
        groups,
    }
}

fn first_recovery(records: &[SignatureRecord], idx: &[usize]) -> Option<Scalar> {
    for (n, &i) in idx.iter().enumerate() {
        for &j in &idx[n + 1..] {
            let (a, b) = (&records[i], &records[j]);
            if a.key_id.is_some() && b.key_id.is_some() && a.key_id != b.key_id {
                continue;
            }
            if let Ok(z) = recover_from_duplicate_k(a, b) {
                return Some(z);
            }
        }
    }
    None
}

/// One step of the scalar-multiplication trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaOp {
    /// Doubling only, for a 0 bit.
    D,
    /// Doubling and addition, for a 1 bit.
    DA,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaTrace(pub Vec<SpaOp>);

impl fmt::Display for SpaTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .0
            .iter()
            .map(|op| match op {
                SpaOp::D => "D",
                SpaOp::DA => "DA",
            })
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl FromStr for SpaTrace {
    type Err = WalletError;
    fn from_str(s: &str) -> Result<Self> {
        s.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "D" => Ok(SpaOp::D),
                "DA" => Ok(SpaOp::DA),
                _ => Err(WalletError::Hex {
                    field: "trace",
                    value: t.to_string(),
                }),
            })
            .collect::<Result<Vec<_>>>()
            .map(SpaTrace)
    }
}

/// `z * point` by right-to-left double-and-add over the big-endian 256-bit
/// integer `z` (not reduced mod n), recording one op per bit up to the top
/// set bit.
pub fn scalar_mul_traced(z: &[u8; 32], point: &ProjectivePoint) -> (ProjectivePoint, SpaTrace) {
    let bits = 256 - leading_zero_bits(z);
    let mut acc = ProjectivePoint::IDENTITY;
    let mut d = *point;
    let mut ops = Vec::with_capacity(bits);
    for i in 0..bits {
        if z[31 - i / 8] >> (i % 8) & 1 == 1 {
            acc += d;
            ops.push(SpaOp::DA);
        } else {
            ops.push(SpaOp::D);
        }
        d = d.double();
    }
    (acc, SpaTrace(ops))
}

fn leading_zero_bits(z: &[u8; 32]) -> usize {
    let mut n = 0;
    for &b in z {
        if b == 0 {
            n += 8;
        } else {
            return n + b.leading_zeros() as usize;
        }
    }
    n
}

/// Operation sequence an observer sees while `z * G` is computed.
pub fn spa_trace(z: &[u8; 32]) -> Result<SpaTrace> {
    if z.iter().all(|&b| b == 0) {
        return Err(WalletError::EmptyInput);
    }
    Ok(scalar_mul_traced(z, &ProjectivePoint::GENERATOR).1)
}

/// Reads the scalar back off a trace, least significant bit first.
pub fn spa_recover(trace: &SpaTrace) -> Result<[u8; 32]> {
    if trace.0.is_empty() {
        return Err(WalletError::EmptyTrace);
    }
    if trace.0.len() > 256 {
        return Err(WalletError::TraceTooLong(trace.0.len()));
    }
    let mut z = [0u8; 32];
    for (i, op) in trace.0.iter().enumerate() {
        if *op == SpaOp::DA {
            z[31 - i / 8] |= 1 << (i % 8);
        }
    }
    Ok(z)
}

/// Nonce k = 1/2 mod n.
pub fn half_k() -> Scalar {
    Scalar::from(2u64).invert().unwrap()
}

/// r produced by the nonce 1/2, via the traced double-and-add.
pub fn half_k_r_value() -> Scalar {
    let (p, _) = scalar_mul_traced(&scalar_bytes(&half_k()), &ProjectivePoint::GENERATOR);
    x_scalar(&p.to_affine())
}

/// Indices of records whose r comes from the nonce 1/2.
pub fn flag_half_k(records: &[SignatureRecord]) -> Vec<usize> {
    let r = scalar_bytes(&half_k_r_value());
    (0..records.len()).filter(|&i| records[i].r == r).collect()
}

/// RIPEMD-160 of SHA-256.
pub fn hash160(data: &[u8]) -> Result<[u8; 20]> {
    if data.is_empty() {
        return Err(WalletError::EmptyInput);
    }
    Ok(Ripemd160::digest(Sha256::digest(data)).into())
}

const HARDENED: u32 = 1 << 31;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyNode {
    pub depth: u8,
    /// High bit set for hardened children.
    pub index: u32,
    pub parent_fingerprint: [u8; 4],
    pub private_key: [u8; 32],
    pub chain_code: [u8; 32],
}

type HmacSha512 = Hmac<Sha512>;

fn hmac512(key: &[u8], data: &[u8]) -> [u8; 64] {
    let mut mac = HmacSha512::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

pub fn bip32_master(seed: &[u8]) -> Result<KeyNode> {
    if !(16..=64).contains(&seed.len()) {
        return Err(WalletError::SeedLength(seed.len()));
    }
    let i = hmac512(b"Bitcoin seed", seed);
    let key: [u8; 32] = i[..32].try_into().unwrap();
    scalar_from_bytes(&key).map_err(|_| WalletError::InvalidChild(0))?;
    Ok(KeyNode {
        depth: 0,
        index: 0,
        parent_fingerprint: [0; 4],
        private_key: key,
        chain_code: i[32..].try_into().unwrap(),
    })
}

impl KeyNode {
    pub fn secret(&self) -> Scalar {
        scalar_from_bytes(&self.private_key).expect("node keys are always valid")
    }

    pub fn public_key(&self) -> Vec<u8> {
        encode_point(&public_key(&self.secret()), true)
    }

    pub fn fingerprint(&self) -> [u8; 4] {
        hash160(&self.public_key()).unwrap()[..4].try_into().unwrap()
    }

    /// Base58Check extended private key (mainnet version bytes).
    pub fn xprv(&self) -> String {
        let mut data = Vec::with_capacity(78);
        data.extend_from_slice(&[0x04, 0x88, 0xAD, 0xE4]);
        data.push(self.depth);
        data.extend_from_slice(&self.parent_fingerprint);
        data.extend_from_slice(&self.index.to_be_bytes());
        data.extend_from_slice(&self.chain_code);
        data.push(0);
        data.extend_from_slice(&self.private_key);
        bs58::encode(data).with_check().into_string()
    }

    /// Base58Check extended public key.
    pub fn xpub(&self) -> String {
        let mut data = Vec::with_capacity(78);
        data.extend_from_slice(&[0x04, 0x88, 0xB2, 0x1E]);
        data.push(self.depth);
        data.extend_from_slice(&self.parent_fingerprint);
        data.extend_from_slice(&self.index.to_be_bytes());
        data.extend_from_slice(&self.chain_code);
        data.extend_from_slice(&self.public_key());
        bs58::encode(data).with_check().into_string()
    }
}

/// Private child derivation.
pub fn ckd(node: &KeyNode, index: u32) -> Result<KeyNode> {
    let mut data = Vec::with_capacity(37);
    if index & HARDENED != 0 {
        data.push(0);
        data.extend_from_slice(&node.private_key);
    } else {
        data.extend_from_slice(&node.public_key());
    }
    data.extend_from_slice(&index.to_be_bytes());
    let i = hmac512(&node.chain_code, &data);
    let il = scalar_from_bytes(&i[..32].try_into().unwrap()).map_err(|_| WalletError::InvalidChild(index))?;
    let child = il + node.secret();
    if bool::from(child.is_zero()) {
        return Err(WalletError::InvalidChild(index));
    }
    Ok(KeyNode {
        depth: node.depth.wrapping_add(1),
        index,
        parent_fingerprint: node.fingerprint(),
        private_key: scalar_bytes(&child),
        chain_code: i[32..].try_into().unwrap(),
    })
}

/// Parses `m/0'/1/2h` into child indices.
pub fn parse_path(path: &str) -> Result<Vec<u32>> {
    let bad = || WalletError::BadPath(path.to_string());
    let mut parts = path.trim().split('/');
    if parts.next() != Some("m") {
        return Err(bad());
    }
    parts
        .map(|p| {
            let (num, hardened) = match p.strip_suffix(['\'', 'h', 'H']) {
                Some(n) => (n, true),
                None => (p, false),
            };
            let i: u32 = num.parse().map_err(|_| bad())?;
            if i & HARDENED != 0 {
                return Err(bad());
            }
            Ok(if hardened { i | HARDENED } else { i })
        })
        .collect()
}

pub fn derive_path(master: &KeyNode, path: &str) -> Result<KeyNode> {
    parse_path(path)?.into_iter().try_fold(master.clone(), |n, i| ckd(&n, i))
}

/// PBKDF2-HMAC-SHA512, 2048 rounds, over the space-joined words with salt
/// `"mnemonic" + salt`. Input is used as given, without Unicode normalisation.
pub fn passphrase_seed(words: &[&str], salt: &str) -> Result<[u8; 64]> {
    if words.is_empty() {
        return Err(WalletError::EmptyInput);
    }
    let mnemonic = words.join(" ");
    let mut out = [0u8; 64];
    pbkdf2::pbkdf2_hmac::<Sha512>(mnemonic.as_bytes(), format!("mnemonic{salt}").as_bytes(), 2048, &mut out);
    Ok(out)
}

/// Brainwallet private key: SHA-256 of the phrase.
pub fn brainwallet_key(phrase: &str) -> Result<Scalar> {
    scalar_from_bytes(&Sha256::digest(phrase.as_bytes()).into())
}

/// Compressed and uncompressed key identifiers of a brainwallet phrase.
pub fn brainwallet_ids(phrase: &str) -> Result<([u8; 20], [u8; 20])> {
    let p = public_key(&brainwallet_key(phrase)?);
    Ok((hash160(&encode_point(&p, true))?, hash160(&encode_point(&p, false))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BrainMatch {
    pub phrase: String,
    pub hash160: String,
    pub compressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrainReport {
    pub candidates: usize,
    pub matches: Vec<BrainMatch>,
    pub seconds: f64,
    pub keys_per_second: f64,
}

pub fn brainwallet_attack<'a>(
    dictionary: impl IntoIterator<Item = &'a str>,
    targets: &HashSet<[u8; 20]>,
) -> Result<BrainReport> {
    let start = Instant::now();
    let mut candidates = 0;
    let mut matches = Vec::new();
    for phrase in dictionary {
        candidates += 1;
        if targets.is_empty() {
            continue;
        }
        let Ok((c, u)) = brainwallet_ids(phrase) else {
            continue;
        };
        for (id, compressed) in [(c, true), (u, false)] {
            if targets.contains(&id) {
                matches.push(BrainMatch {
                    phrase: phrase.to_string(),
                    hash160: hex::encode(id),
                    compressed,
                });
            }
        }
    }
    if candidates == 0 {
        return Err(WalletError::EmptyInput);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BrainReport {
        candidates,
        matches,
        seconds,
        keys_per_second: if seconds > 0.0 { candidates as f64 / seconds } else { 0.0 },
    })
}
