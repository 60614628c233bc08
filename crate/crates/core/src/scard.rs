//! Simulated secure element with a CA-certified device key, PIN-gated
//! keystore and content self-attestation, driven over ISO 7816-style APDUs,
//! plus the terminal side that authenticates it.

use std::collections::{BTreeMap, HashSet};

use k256::elliptic_curve::Field;
use k256::{AffinePoint, FieldBytes, Scalar};
use rand::RngCore;
use rand_chacha::rand_core::CryptoRngCore;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::walletsec::{
    decode_point, ecdsa_sign, ecdsa_verify, encode_point, hash_scalar, public_key, scalar_bytes, scalar_from_bytes,
    Signature,
};

pub const CLA: u8 = 0x80;

pub const INS_VERIFY_PIN: u8 = 0x20;
pub const INS_CHANGE_PIN: u8 = 0x24;
pub const INS_LOGOUT: u8 = 0x26;
pub const INS_GET_DEVICE_KEY: u8 = 0x30;
pub const INS_GET_CERT: u8 = 0x32;
pub const INS_SELF_ATTEST: u8 = 0x40;
pub const INS_GENERATE: u8 = 0x50;
pub const INS_GET_PUBLIC: u8 = 0x52;
pub const INS_SIGN_HASH: u8 = 0x54;
pub const INS_INTERNAL_AUTH: u8 = 0x88;

pub const P2_USER: u8 = 0x01;
pub const P2_ADMIN: u8 = 0x02;

pub const SW_OK: u16 = 0x9000;
pub const SW_WRONG_LENGTH: u16 = 0x6700;
pub const SW_SECURITY: u16 = 0x6982;
pub const SW_BLOCKED: u16 = 0x6983;
pub const SW_BAD_DATA: u16 = 0x6A80;
pub const SW_BAD_P1P2: u16 = 0x6A86;
pub const SW_NOT_FOUND: u16 = 0x6A88;
pub const SW_EXISTS: u16 = 0x6A89;
pub const SW_UNKNOWN_INS: u16 = 0x6D00;
pub const SW_BAD_CLA: u16 = 0x6E00;

/// Wrong PIN with `tries` attempts left.
pub fn sw_wrong_pin(tries: u8) -> u16 {
    0x63C0 | tries as u16
}

pub const PIN_TRIES: u8 = 3;
pub const DEFAULT_USER_PIN: &str = "1234";
pub const DEFAULT_ADMIN_PIN: &str = "12345678";
/// Curve identifier in the attestation serialization.
pub const CURVE_SECP256K1: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CardError {
    #[error("frame of {0} bytes is not a valid APDU")]
    Framing(usize),
    #[error("card answered status {0:04X}")]
    Status(u16),
    #[error("response too short")]
    ShortResponse,
    #[error("malformed card data: {0}")]
    BadData(&'static str),
    #[error("attestation signature invalid")]
    BadAttestation,
    #[error("challenge was not issued by this terminal or was already used")]
    StaleChallenge,
}

pub type Result<T> = std::result::Result<T, CardError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Apdu {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    pub le: Option<u8>,
}

impl Apdu {
    pub fn new(ins: u8, p1: u8, p2: u8, data: Vec<u8>) -> Self {
        Self {
            cla: CLA,
            ins,
            p1,
            p2,
            data,
            le: None,
        }
    }

    /// Short-form encoding: `CLA INS P1 P2 [Lc data] [Le]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.cla, self.ins, self.p1, self.p2];
        if !self.data.is_empty() {
            out.push(self.data.len() as u8);
            out.extend_from_slice(&self.data);
        }
        if let Some(le) = self.le {
            out.push(le);
        }
        out
    }

    pub fn parse(frame: &[u8]) -> Result<Self> {
        let err = || CardError::Framing(frame.len());
        if frame.len() < 4 {
            return Err(err());
        }
        let (cla, ins, p1, p2) = (frame[0], frame[1], frame[2], frame[3]);
        let body = &frame[4..];
        let (data, le) = match body.len() {
            0 => (Vec::new(), None),
            1 => (Vec::new(), Some(body[0])),
            n => {
                let lc = body[0] as usize;
                if lc == 0 {
                    return Err(err());
                }
                if n == 1 + lc {
                    (body[1..].to_vec(), None)
                } else if n == 2 + lc {
                    (body[1..1 + lc].to_vec(), Some(body[1 + lc]))
                } else {
                    return Err(err());
                }
            }
        };
        Ok(Self {
            cla,
            ins,
            p1,
            p2,
            data,
            le,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub data: Vec<u8>,
    pub sw: u16,
}

impl Response {
    fn status(sw: u16) -> Self {
        Self { data: Vec::new(), sw }
    }

    fn ok(data: Vec<u8>) -> Self {
        Self { data, sw: SW_OK }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.data.clone();
        out.extend_from_slice(&self.sw.to_be_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(CardError::ShortResponse);
        }
        let (data, sw) = bytes.split_at(bytes.len() - 2);
        Ok(Self {
            data: data.to_vec(),
            sw: u16::from_be_bytes([sw[0], sw[1]]),
        })
    }

    /// Data on success, the status word as an error otherwise.
    pub fn into_data(self) -> Result<Vec<u8>> {
        if self.sw == SW_OK {
            Ok(self.data)
        } else {
            Err(CardError::Status(self.sw))
        }
    }
}

/// Anything that answers APDUs.
pub trait Card {
    fn transmit(&mut self, command: &[u8]) -> Vec<u8>;
}

impl<C: Card + ?Sized> Card for Box<C> {
    fn transmit(&mut self, command: &[u8]) -> Vec<u8> {
        (**self).transmit(command)
    }
}

/// secp256k1 order, big-endian.
const ORDER: [u8; 32] = [
    0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFE, 0xBA, 0xAE, 0xDC,
    0xE6, 0xAF, 0x48, 0xA0, 0x3B, 0xBF, 0xD2, 0x5E, 0x8C, 0xD0, 0x36, 0x41, 0x41,
];

/// Deterministic nonce from the private key and message hash (RFC 6979,
/// HMAC-SHA256).
pub fn rfc6979_nonce(key: &Scalar, e: &[u8; 32]) -> Scalar {
    let h = hash_scalar(e).to_bytes();
    let k = rfc6979::generate_k::<Sha256, _>(&key.to_bytes(), &FieldBytes::from(ORDER), &h, &[]);
    scalar_from_bytes(&k.into()).expect("generate_k yields a scalar in [1, n)")
}

/// ECDSA with an RFC 6979 nonce. A nonce giving r = 0 or s = 0 is
/// astronomically unlikely; signing then reports failure to the caller.
pub fn sign_deterministic(key: &Scalar, e: &[u8; 32]) -> Option<Signature> {
    ecdsa_sign(key, e, &rfc6979_nonce(key, e)).ok()
}

pub fn signature_bytes(sig: &Signature) -> Vec<u8> {
    let mut out = scalar_bytes(&sig.r).to_vec();
    out.extend_from_slice(&scalar_bytes(&sig.s));
    out
}

pub fn signature_from_bytes(bytes: &[u8]) -> Result<Signature> {
    if bytes.len() != 64 {
        return Err(CardError::BadData("signature must be 64 bytes"));
    }
    let r = scalar_from_bytes(&bytes[..32].try_into().unwrap()).map_err(|_| CardError::BadData("r out of range"))?;
    let s = scalar_from_bytes(&bytes[32..].try_into().unwrap()).map_err(|_| CardError::BadData("s out of range"))?;
    Ok(Signature { r, s })
}

fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Certificate message for a device key: SHA-256 of its uncompressed encoding.
pub fn certificate_hash(device_key: &AffinePoint) -> [u8; 32] {
    sha256(&encode_point(device_key, false))
}

pub struct CertificationAuthority {
    secret: Scalar,
    public: AffinePoint,
}

impl CertificationAuthority {
    pub fn new(rng: &mut impl CryptoRngCore) -> Self {
        let secret = Scalar::random(rng);
        Self {
            public: public_key(&secret),
            secret,
        }
    }

    pub fn public(&self) -> AffinePoint {
        self.public
    }

    pub fn certify(&self, device_key: &AffinePoint) -> Signature {
        sign_deterministic(&self.secret, &certificate_hash(device_key)).expect("CA signing")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Locked,
    User,
    Admin,
}

/// Who may run an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Anyone,
    UserOrAdmin,
    Admin,
}

impl Access {
    pub fn allows(self, mode: Mode) -> bool {
        match self {
            Access::Anyone => true,
            Access::UserOrAdmin => mode != Mode::Locked,
            Access::Admin => mode == Mode::Admin,
        }
    }
}

/// Access rule per instruction; `None` for unknown instructions.
pub fn access_rule(ins: u8) -> Option<Access> {
    Some(match ins {
        INS_VERIFY_PIN | INS_LOGOUT | INS_GET_DEVICE_KEY | INS_GET_CERT | INS_INTERNAL_AUTH => Access::Anyone,
        INS_CHANGE_PIN | INS_SELF_ATTEST | INS_GET_PUBLIC | INS_SIGN_HASH => Access::UserOrAdmin,
        INS_GENERATE => Access::Admin,
        _ => return None,
    })
}

#[derive(Clone)]
struct Pin {
    value: String,
    tries: u8,
}

#[derive(Clone)]
struct Slot {
    secret: Scalar,
    public: AffinePoint,
    /// Tag/value attributes, kept in the order given.
    attributes: Vec<(u8, Vec<u8>)>,
}

fn valid_pin(pin: &[u8]) -> bool {
    (4..=8).contains(&pin.len()) && pin.iter().all(u8::is_ascii_digit)
}

/// Attribute TLVs: `tag len value`, each value at most 255 bytes.
pub fn parse_tlvs(mut data: &[u8]) -> Option<Vec<(u8, Vec<u8>)>> {
    let mut out = Vec::new();
    while !data.is_empty() {
        if data.len() < 2 || data.len() < 2 + data[1] as usize {
            return None;
        }
        let len = data[1] as usize;
        out.push((data[0], data[2..2 + len].to_vec()));
        data = &data[2 + len..];
    }
    Some(out)
}

pub fn encode_tlvs(attrs: &[(u8, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (tag, value) in attrs {
        out.push(*tag);
        out.push(value.len() as u8);
        out.extend_from_slice(value);
    }
    out
}

/// Public keystore content in attestation order: per slot, ascending index,
/// `index curve-id compressed-key attr-len(2, BE) attr-TLVs`.
pub fn attestation_serialization<'a>(
    slots: impl IntoIterator<Item = (u8, &'a AffinePoint, &'a [(u8, Vec<u8>)])>,
) -> Vec<u8> {
    let mut sorted: Vec<_> = slots.into_iter().collect();
    sorted.sort_by_key(|s| s.0);
    let mut out = Vec::new();
    for (index, public, attrs) in sorted {
        out.push(index);
        out.push(CURVE_SECP256K1);
        out.extend_from_slice(&encode_point(public, true));
        let tlv = encode_tlvs(attrs);
        out.extend_from_slice(&(tlv.len() as u16).to_be_bytes());
        out.extend_from_slice(&tlv);
    }
    out
}

/// Message signed in a self-attestation response.
pub fn attestation_message(hash: &[u8; 32], rnd: &[u8; 32]) -> [u8; 32] {
    let mut m = hash.to_vec();
    m.extend_from_slice(rnd);
    sha256(&m)
}

pub struct SecureElement {
    device_secret: Scalar,
    device_public: AffinePoint,
    certificate: Signature,
    user_pin: Pin,
    admin_pin: Pin,
    mode: Mode,
    blocked: bool,
    slots: BTreeMap<u8, Slot>,
    rng: Box<dyn CryptoRngCore + Send>,
}

impl SecureElement {
    /// Fresh device key certified by `ca`, default PINs, empty keystore. The
    /// element keeps `rng` for key generation.
    pub fn provision(ca: &CertificationAuthority, mut rng: impl CryptoRngCore + Send + 'static) -> Self {
        let device_secret = Scalar::random(&mut rng);
        let device_public = public_key(&device_secret);
        Self {
            certificate: ca.certify(&device_public),
            device_secret,
            device_public,
            user_pin: Pin {
                value: DEFAULT_USER_PIN.into(),
                tries: PIN_TRIES,
            },
            admin_pin: Pin {
                value: DEFAULT_ADMIN_PIN.into(),
                tries: PIN_TRIES,
            },
            mode: Mode::Locked,
            blocked: false,
            slots: BTreeMap::new(),
            rng: Box::new(rng),
        }
    }

    pub fn device_public(&self) -> AffinePoint {
        self.device_public
    }

    pub fn certificate(&self) -> Signature {
        self.certificate
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_blocked(&self) -> bool {
        self.blocked
    }

    pub fn slot_indices(&self) -> Vec<u8> {
        self.slots.keys().copied().collect()
    }

    /// SHA-256 of the public keystore content.
    pub fn content_hash(&self) -> [u8; 32] {
        sha256(&attestation_serialization(
            self.slots.iter().map(|(&i, s)| (i, &s.public, s.attributes.as_slice())),
        ))
    }

    fn pin_mut(&mut self, p2: u8) -> Option<&mut Pin> {
        match p2 {
            P2_USER => Some(&mut self.user_pin),
            P2_ADMIN => Some(&mut self.admin_pin),
            _ => None,
        }
    }

    pub fn process(&mut self, apdu: &Apdu) -> Response {
        if apdu.cla != CLA {
            return Response::status(SW_BAD_CLA);
        }
        let Some(rule) = access_rule(apdu.ins) else {
            return Response::status(SW_UNKNOWN_INS);
        };
        if !rule.allows(self.mode) {
            return Response::status(SW_SECURITY);
        }
        match apdu.ins {
            INS_VERIFY_PIN => self.verify_pin(apdu),
            INS_CHANGE_PIN => self.change_pin(apdu),
            INS_LOGOUT => {
                self.mode = Mode::Locked;
                Response::ok(Vec::new())
            }
            INS_GET_DEVICE_KEY => Response::ok(encode_point(&self.device_public, false)),
            INS_GET_CERT => Response::ok(signature_bytes(&self.certificate)),
            INS_INTERNAL_AUTH => match <[u8; 32]>::try_from(apdu.data.as_slice()) {
                Ok(rnd) => self.sign_with_device(&sha256(&rnd)),
                Err(_) => Response::status(SW_WRONG_LENGTH),
            },
            INS_SELF_ATTEST => match <[u8; 32]>::try_from(apdu.data.as_slice()) {
                Ok(rnd) => {
                    let hash = self.content_hash();
                    let mut r = self.sign_with_device(&attestation_message(&hash, &rnd));
                    if r.sw == SW_OK {
                        r.data.splice(0..0, hash);
                    }
                    r
                }
                Err(_) => Response::status(SW_WRONG_LENGTH),
            },
            INS_GENERATE => self.generate(apdu),
            INS_GET_PUBLIC => match self.slots.get(&apdu.p1) {
                Some(slot) => {
                    let mut out = encode_point(&slot.public, true);
                    out.extend_from_slice(&encode_tlvs(&slot.attributes));
                    Response::ok(out)
                }
                None => Response::status(SW_NOT_FOUND),
            },
            INS_SIGN_HASH => {
                let Ok(e) = <[u8; 32]>::try_from(apdu.data.as_slice()) else {
                    return Response::status(SW_WRONG_LENGTH);
                };
                match self.slots.get(&apdu.p1) {
                    Some(slot) => match sign_deterministic(&slot.secret, &e) {
                        Some(sig) => Response::ok(signature_bytes(&sig)),
                        None => Response::status(SW_BAD_DATA),
                    },
                    None => Response::status(SW_NOT_FOUND),
                }
            }
            _ => Response::status(SW_UNKNOWN_INS),
        }
    }

    fn sign_with_device(&self, e: &[u8; 32]) -> Response {
        match sign_deterministic(&self.device_secret, e) {
            Some(sig) => Response::ok(signature_bytes(&sig)),
            None => Response::status(SW_BAD_DATA),
        }
    }

    fn verify_pin(&mut self, apdu: &Apdu) -> Response {
        if self.blocked {
            return Response::status(SW_BLOCKED);
        }
        let target = match apdu.p2 {
            P2_USER => Mode::User,
            P2_ADMIN => Mode::Admin,
            _ => return Response::status(SW_BAD_P1P2),
        };
        if apdu.p1 != 0 {
            return Response::status(SW_BAD_P1P2);
        }
        if !(4..=8).contains(&apdu.data.len()) {
            return Response::status(SW_WRONG_LENGTH);
        }
        let pin = self.pin_mut(apdu.p2).expect("p2 checked");
        if pin.value.as_bytes() == apdu.data.as_slice() {
            pin.tries = PIN_TRIES;
            self.mode = target;
            Response::ok(Vec::new())
        } else {
            pin.tries -= 1;
            let left = pin.tries;
            self.mode = Mode::Locked;
            if left == 0 {
                self.blocked = true;
            }
            Response::status(sw_wrong_pin(left))
        }
    }

    /// New value for the PIN selected by P2. The admin PIN needs admin mode.
    fn change_pin(&mut self, apdu: &Apdu) -> Response {
        if apdu.p1 != 0 || !matches!(apdu.p2, P2_USER | P2_ADMIN) {
            return Response::status(SW_BAD_P1P2);
        }
        if apdu.p2 == P2_ADMIN && self.mode != Mode::Admin {
            return Response::status(SW_SECURITY);
        }
        if !valid_pin(&apdu.data) {
            return Response::status(SW_BAD_DATA);
        }
        let pin = self.pin_mut(apdu.p2).expect("p2 checked");
        pin.value = String::from_utf8(apdu.data.clone()).expect("digits are utf-8");
        pin.tries = PIN_TRIES;
        Response::ok(Vec::new())
    }

    /// Key generation into slot P1 with optional attribute TLVs.
    fn generate(&mut self, apdu: &Apdu) -> Response {
        if self.slots.contains_key(&apdu.p1) {
            return Response::status(SW_EXISTS);
        }
        let Some(attributes) = parse_tlvs(&apdu.data) else {
            return Response::status(SW_BAD_DATA);
        };
        let secret = Scalar::random(&mut self.rng);
        let public = public_key(&secret);
        self.slots.insert(
            apdu.p1,
            Slot {
                secret,
                public,
                attributes,
            },
        );
        Response::ok(encode_point(&public, true))
    }

    /// Every private scalar held by the element, for leak checks in tests.
    #[doc(hidden)]
    pub fn private_material(&self) -> Vec<[u8; 32]> {
        std::iter::once(scalar_bytes(&self.device_secret))
            .chain(self.slots.values().map(|s| scalar_bytes(&s.secret)))
            .collect()
    }

    /// Plaintext JSON dump of the full state, private keys included.
    #[cfg(feature = "insecure-export")]
    pub fn insecure_export_json(&self) -> String {
        let slots: Vec<_> = self
            .slots
            .iter()
            .map(|(i, s)| {
                serde_json::json!({
                    "index": i,
                    "private_key": hex::encode(scalar_bytes(&s.secret)),
                    "public_key": hex::encode(encode_point(&s.public, true)),
                    "attributes": hex::encode(encode_tlvs(&s.attributes)),
                })
            })
            .collect();
        serde_json::json!({
            "device_private_key": hex::encode(scalar_bytes(&self.device_secret)),
            "device_public_key": hex::encode(encode_point(&self.device_public, false)),
            "certificate": hex::encode(signature_bytes(&self.certificate)),
            "mode": self.mode,
            "blocked": self.blocked,
            "slots": slots,
        })
        .to_string()
    }
}

impl Card for SecureElement {
    fn transmit(&mut self, command: &[u8]) -> Vec<u8> {
        match Apdu::parse(command) {
            Ok(apdu) => self.process(&apdu).encode(),
            Err(_) => Response::status(SW_WRONG_LENGTH).encode(),
        }
    }
}

/// Clone that copied a genuine card's public key and certificate but not its
/// private key. It answers challenges by replaying a recorded signature, or
/// with a random one if it has none.
pub struct ReplayClone {
    pub device_public: AffinePoint,
    pub certificate: Signature,
    pub recorded: Option<Vec<u8>>,
    rng: Box<dyn CryptoRngCore + Send>,
}

impl ReplayClone {
    pub fn new(
        device_public: AffinePoint,
        certificate: Signature,
        recorded: Option<Vec<u8>>,
        rng: impl CryptoRngCore + Send + 'static,
    ) -> Self {
        Self {
            device_public,
            certificate,
            recorded,
            rng: Box::new(rng),
        }
    }
}

impl Card for ReplayClone {
    fn transmit(&mut self, command: &[u8]) -> Vec<u8> {
        let Ok(apdu) = Apdu::parse(command) else {
            return Response::status(SW_WRONG_LENGTH).encode();
        };
        let r = match apdu.ins {
            INS_GET_DEVICE_KEY => Response::ok(encode_point(&self.device_public, false)),
            INS_GET_CERT => Response::ok(signature_bytes(&self.certificate)),
            INS_INTERNAL_AUTH => Response::ok(self.recorded.clone().unwrap_or_else(|| {
                let mut sig = vec![0u8; 64];
                self.rng.fill_bytes(&mut sig);
                sig
            })),
            _ => Response::status(SW_UNKNOWN_INS),
        };
        r.encode()
    }
}

/// Clone running its own key pair, certified by a CA it controls.
pub fn own_key_clone(rng: &mut (impl CryptoRngCore + Send + Clone + 'static)) -> SecureElement {
    let rogue = CertificationAuthority::new(rng);
    SecureElement::provision(&rogue, rng.clone())
}

/// Records every exchanged frame as hex lines.
pub struct Logged<C> {
    pub card: C,
    pub lines: Vec<String>,
}

impl<C: Card> Logged<C> {
    pub fn new(card: C) -> Self {
        Self {
            card,
            lines: Vec::new(),
        }
    }

    pub fn transcript(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

impl<C: Card> Card for Logged<C> {
    fn transmit(&mut self, command: &[u8]) -> Vec<u8> {
        let reply = self.card.transmit(command);
        self.lines.push(format!("> {}", hex::encode(command)));
        self.lines.push(format!("< {}", hex::encode(&reply)));
        reply
    }
}

pub fn exchange(card: &mut dyn Card, apdu: &Apdu) -> Result<Response> {
    Response::parse(&card.transmit(&apdu.encode()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum AuthOutcome {
    Accepted,
    /// Step 1 or 2 failed: public key or certificate unreadable.
    Unreadable { step: u8, status: u16 },
    /// Step 3: the certificate does not verify under the CA key.
    BadCertificate,
    /// Step 4: the challenge signature does not verify under the card key.
    BadChallenge,
}

impl AuthOutcome {
    pub fn accepted(&self) -> bool {
        *self == AuthOutcome::Accepted
    }
}

pub struct Terminal {
    pub ca_public: AffinePoint,
    issued: HashSet<[u8; 32]>,
    used: HashSet<[u8; 32]>,
    rng: Box<dyn CryptoRngCore + Send>,
}

impl Terminal {
    pub fn new(ca_public: AffinePoint, rng: impl CryptoRngCore + Send + 'static) -> Self {
        Self {
            ca_public,
            issued: HashSet::new(),
            used: HashSet::new(),
            rng: Box::new(rng),
        }
    }

    /// Fresh 32-byte challenge, remembered until it is consumed.
    pub fn fresh_nonce(&mut self) -> [u8; 32] {
        let mut rnd = [0u8; 32];
        self.rng.fill_bytes(&mut rnd);
        self.issued.insert(rnd);
        rnd
    }

    /// Reads the device key, reads and checks its certificate, then checks a
    /// signature over a fresh challenge.
    pub fn authenticate_card(&mut self, card: &mut dyn Card) -> Result<AuthOutcome> {
        let r = exchange(card, &Apdu::new(INS_GET_DEVICE_KEY, 0, 0, vec![]))?;
        if r.sw != SW_OK {
            return Ok(AuthOutcome::Unreadable { step: 1, status: r.sw });
        }
        let Some(device_key) = decode_point(&r.data) else {
            return Ok(AuthOutcome::Unreadable { step: 1, status: r.sw });
        };
        let r = exchange(card, &Apdu::new(INS_GET_CERT, 0, 0, vec![]))?;
        if r.sw != SW_OK {
            return Ok(AuthOutcome::Unreadable { step: 2, status: r.sw });
        }
        let cert_ok = signature_from_bytes(&r.data)
            .map(|cert| ecdsa_verify(&self.ca_public, &certificate_hash(&device_key), &cert))
            .unwrap_or(false);
        if !cert_ok {
            return Ok(AuthOutcome::BadCertificate);
        }
        let rnd = self.fresh_nonce();
        self.used.insert(rnd);
        let r = exchange(card, &Apdu::new(INS_INTERNAL_AUTH, 0, 0, rnd.to_vec()))?;
        let challenge_ok = r.sw == SW_OK
            && signature_from_bytes(&r.data)
                .map(|sig| ecdsa_verify(&device_key, &sha256(&rnd), &sig))
                .unwrap_or(false);
        Ok(if challenge_ok {
            AuthOutcome::Accepted
        } else {
            AuthOutcome::BadChallenge
        })
    }

    /// Checks a self-attestation response for a challenge this terminal
    /// issued and has not seen answered; returns the content hash to display.
    pub fn verify_attestation(&mut self, response: &[u8], rnd: &[u8; 32], device_key: &AffinePoint) -> Result<[u8; 32]> {
        if !self.issued.contains(rnd) || self.used.contains(rnd) {
            return Err(CardError::StaleChallenge);
        }
        self.used.insert(*rnd);
        if response.len() != 96 {
            return Err(CardError::BadData("attestation must be 96 bytes"));
        }
        let hash: [u8; 32] = response[..32].try_into().unwrap();
        let sig = signature_from_bytes(&response[32..])?;
        if ecdsa_verify(device_key, &attestation_message(&hash, rnd), &sig) {
            Ok(hash)
        } else {
            Err(CardError::BadAttestation)
        }
    }

    /// Requests and verifies a self-attestation; the card must be unlocked.
    pub fn attest_card(&mut self, card: &mut dyn Card, device_key: &AffinePoint) -> Result<[u8; 32]> {
        let rnd = self.fresh_nonce();
        let data = exchange(card, &Apdu::new(INS_SELF_ATTEST, 0, 0, rnd.to_vec()))?.into_data()?;
        self.verify_attestation(&data, &rnd, device_key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn setup(seed: u64) -> (CertificationAuthority, SecureElement, Terminal) {
        let ca = CertificationAuthority::new(&mut rng(seed));
        let se = SecureElement::provision(&ca, rng(seed + 1));
        let t = Terminal::new(ca.public(), rng(seed + 2));
        (ca, se, t)
    }

    fn send(card: &mut dyn Card, ins: u8, p1: u8, p2: u8, data: &[u8]) -> Response {
        exchange(card, &Apdu::new(ins, p1, p2, data.to_vec())).unwrap()
    }

    #[test]
    fn rfc6979_reference_nonce() {
        // private key 1, message "Satoshi Nakamoto"
        let e: [u8; 32] = Sha256::digest(b"Satoshi Nakamoto").into();
        let k = rfc6979_nonce(&Scalar::ONE, &e);
        assert_eq!(
            hex::encode(scalar_bytes(&k)),
            "8f8a276c19f4149656b280621e358cce24f5f52542772691ee69063b74f15d15"
        );
    }

    #[test]
    fn apdu_framing() {
        let a = Apdu::new(0x54, 1, 0, vec![9; 32]);
        assert_eq!(Apdu::parse(&a.encode()).unwrap(), a);
        let with_le = Apdu { le: Some(0), ..a.clone() };
        assert_eq!(Apdu::parse(&with_le.encode()).unwrap(), with_le);
        assert_eq!(Apdu::parse(&[0x80, 0x30, 0, 0]).unwrap().data.len(), 0);
        assert!(Apdu::parse(&[0x80, 0x30, 0]).is_err());
        assert!(Apdu::parse(&[0x80, 0x30, 0, 0, 5, 1, 2]).is_err());
        let (_, mut se, _) = setup(1);
        assert_eq!(Response::parse(&se.transmit(&[0x80, 0x30, 0, 0, 5, 1])).unwrap().sw, SW_WRONG_LENGTH);
    }

    #[test]
    fn provisioning() {
        let (ca, se, _) = setup(2);
        assert!(ecdsa_verify(&ca.public(), &certificate_hash(&se.device_public()), &se.certificate()));
        let mut raw = encode_point(&se.device_public(), false);
        raw[10] ^= 1;
        assert!(!ecdsa_verify(&ca.public(), &sha256(&raw), &se.certificate()));
        let keys: HashSet<Vec<u8>> = (0..100)
            .map(|i| encode_point(&SecureElement::provision(&ca, rng(100 + i)).device_public(), true))
            .collect();
        assert_eq!(keys.len(), 100);
    }

    #[test]
    fn genuine_and_clones() {
        let (_, mut se, mut t) = setup(3);
        assert_eq!(t.authenticate_card(&mut se).unwrap(), AuthOutcome::Accepted);
        let mut own = own_key_clone(&mut rng(50));
        assert_eq!(t.authenticate_card(&mut own).unwrap(), AuthOutcome::BadCertificate);
        let recorded = send(&mut se, INS_INTERNAL_AUTH, 0, 0, &[1; 32]).data;
        let mut replay = ReplayClone::new(se.device_public(), se.certificate(), Some(recorded), rng(4));
        for _ in 0..100 {
            assert_eq!(t.authenticate_card(&mut replay).unwrap(), AuthOutcome::BadChallenge);
        }
        let mut blind = ReplayClone::new(se.device_public(), se.certificate(), None, rng(4));
        assert_eq!(t.authenticate_card(&mut blind).unwrap(), AuthOutcome::BadChallenge);
    }

    #[test]
    fn pin_policy() {
        let (_, mut se, _) = setup(4);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234").sw, SW_OK);
        assert_eq!(se.mode(), Mode::User);
        assert_eq!(send(&mut se, INS_GENERATE, 1, 0, &[]).sw, SW_SECURITY);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, b"0000").sw, 0x63C2);
        assert_eq!(se.mode(), Mode::Locked);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, b"0000").sw, 0x63C1);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, b"0000").sw, 0x63C0);
        assert!(se.is_blocked());
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, DEFAULT_ADMIN_PIN.as_bytes()).sw, SW_BLOCKED);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234").sw, SW_BLOCKED);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, 7, b"1234").sw, SW_BLOCKED);
    }

    #[test]
    fn pin_counter_resets_and_change() {
        let (_, mut se, _) = setup(5);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"9999").sw, 0x63C2);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234").sw, SW_OK);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"9999").sw, 0x63C2);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"12").sw, SW_WRONG_LENGTH);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, 9, b"1234").sw, SW_BAD_P1P2);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234").sw, SW_OK);
        assert_eq!(send(&mut se, INS_CHANGE_PIN, 0, P2_ADMIN, b"87654321").sw, SW_SECURITY);
        assert_eq!(send(&mut se, INS_CHANGE_PIN, 0, P2_USER, b"12a4").sw, SW_BAD_DATA);
        assert_eq!(send(&mut se, INS_CHANGE_PIN, 0, P2_USER, b"4321").sw, SW_OK);
        assert_eq!(send(&mut se, INS_LOGOUT, 0, 0, &[]).sw, SW_OK);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234").sw, 0x63C2);
        assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"4321").sw, SW_OK);
    }

    #[test]
    fn mode_matrix_is_enforced() {
        let instructions = [
            INS_CHANGE_PIN,
            INS_LOGOUT,
            INS_GET_DEVICE_KEY,
            INS_GET_CERT,
            INS_SELF_ATTEST,
            INS_GENERATE,
            INS_GET_PUBLIC,
            INS_SIGN_HASH,
            INS_INTERNAL_AUTH,
        ];
        for mode in [Mode::Locked, Mode::User, Mode::Admin] {
            for ins in instructions {
                let (_, mut se, _) = setup(6);
                match mode {
                    Mode::User => assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234").sw, SW_OK),
                    Mode::Admin => assert_eq!(send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, b"12345678").sw, SW_OK),
                    Mode::Locked => {}
                }
                let allowed = access_rule(ins).unwrap().allows(mode);
                let sw = send(&mut se, ins, 0, 0, &[0; 32]).sw;
                assert_eq!(sw == SW_SECURITY, !allowed, "{mode:?} {ins:#x} {sw:04x}");
            }
        }
        let (_, mut se, _) = setup(6);
        assert_eq!(send(&mut se, 0xCA, 0, 0, &[]).sw, SW_UNKNOWN_INS);
        assert_eq!(se.transmit(&[0x00, 0x30, 0, 0]), SW_BAD_CLA.to_be_bytes().to_vec());
    }

    #[test]
    fn keystore_round_trip() {
        let (_, mut se, _) = setup(7);
        send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, b"12345678");
        let pubkey = send(&mut se, INS_GENERATE, 3, 0, &[0x01, 2, b'h', b'i']).into_data().unwrap();
        assert_eq!(send(&mut se, INS_GENERATE, 3, 0, &[]).sw, SW_EXISTS);
        assert_eq!(send(&mut se, INS_GENERATE, 4, 0, &[0x01, 5]).sw, SW_BAD_DATA);
        send(&mut se, INS_VERIFY_PIN, 0, P2_USER, b"1234");
        let got = send(&mut se, INS_GET_PUBLIC, 3, 0, &[]).into_data().unwrap();
        assert_eq!(&got[..33], &pubkey[..]);
        assert_eq!(&got[33..], &[0x01, 2, b'h', b'i']);
        assert_eq!(send(&mut se, INS_GET_PUBLIC, 9, 0, &[]).sw, SW_NOT_FOUND);
        let e = [0x42u8; 32];
        let sig1 = send(&mut se, INS_SIGN_HASH, 3, 0, &e).into_data().unwrap();
        let sig2 = send(&mut se, INS_SIGN_HASH, 3, 0, &e).into_data().unwrap();
        assert_eq!(sig1, sig2);
        let key = decode_point(&pubkey).unwrap();
        assert!(ecdsa_verify(&key, &e, &signature_from_bytes(&sig1).unwrap()));
        assert_eq!(send(&mut se, INS_SIGN_HASH, 3, 0, &e[..31]).sw, SW_WRONG_LENGTH);
        // there is no export instruction
        for ins in [0x56, 0x58, 0xCA, 0xF0] {
            assert_eq!(send(&mut se, ins, 3, 0, &[]).sw, SW_UNKNOWN_INS);
        }
    }

    #[test]
    fn self_attestation() {
        let (_, mut se, mut t) = setup(8);
        let key = se.device_public();
        assert_eq!(t.attest_card(&mut se, &key), Err(CardError::Status(SW_SECURITY)));
        send(&mut se, INS_VERIFY_PIN, 0, P2_ADMIN, b"12345678");
        let h1 = t.attest_card(&mut se, &key).unwrap();
        let rnd = t.fresh_nonce();
        let resp1 = send(&mut se, INS_SELF_ATTEST, 0, 0, &rnd).into_data().unwrap();
        assert_eq!(t.verify_attestation(&resp1, &rnd, &key).unwrap(), h1);
        assert_eq!(t.verify_attestation(&resp1, &rnd, &key), Err(CardError::StaleChallenge));
        let rnd2 = t.fresh_nonce();
        let resp2 = send(&mut se, INS_SELF_ATTEST, 0, 0, &rnd2).into_data().unwrap();
        assert_eq!(resp1[..32], resp2[..32]);
        assert_ne!(resp1[32..], resp2[32..]);
        send(&mut se, INS_GENERATE, 0, 0, &[]);
        let h2 = t.attest_card(&mut se, &key).unwrap();
        assert_ne!(h1, h2);
        let other = public_key(&Scalar::from(5u64));
        let rnd3 = t.fresh_nonce();
        let resp3 = send(&mut se, INS_SELF_ATTEST, 0, 0, &rnd3).into_data().unwrap();
        assert_eq!(t.verify_attestation(&resp3, &rnd3, &other), Err(CardError::BadAttestation));
    }

    #[test]
    fn attestation_hash_ignores_insertion_order() {
        let k1 = public_key(&Scalar::from(3u64));
        let k2 = public_key(&Scalar::from(4u64));
        let a: Vec<(u8, Vec<u8>)> = vec![(1, vec![7])];
        let b = vec![];
        let x = attestation_serialization([(2, &k1, a.as_slice()), (0, &k2, b.as_slice())]);
        let y = attestation_serialization([(0, &k2, b.as_slice()), (2, &k1, a.as_slice())]);
        assert_eq!(x, y);
        assert_eq!(x[0], 0);
        assert_eq!(x.len(), 2 * (1 + 1 + 33 + 2) + 3);
    }

    #[test]
    fn logged_transcript() {
        let (_, se, mut t) = setup(9);
        let mut logged = Logged::new(se);
        t.authenticate_card(&mut logged).unwrap();
        assert_eq!(logged.lines.len(), 6);
        assert!(logged.lines[0].starts_with("> 80300000"));
        assert!(logged.lines[1].ends_with("9000"));
    }
}
