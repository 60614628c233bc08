use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};
use cryptoterm_core::scard::{
    self, exchange, Apdu, AuthOutcome, Card, CertificationAuthority, Logged, ReplayClone, SecureElement, Terminal,
    INS_CHANGE_PIN, INS_GENERATE, INS_INTERNAL_AUTH, INS_SIGN_HASH, INS_VERIFY_PIN, P2_ADMIN, P2_USER, SW_OK,
};
use cryptoterm_core::walletsec::{decode_point, ecdsa_verify, encode_point};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::output::{parse_hex32, read_text, Output, Status};

#[derive(Args, Debug, Clone)]
pub struct SessionArgs {
    /// Seed for the CA, the element and the terminal.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// APDUs (hex, one per line, '#' comments) sent right after provisioning.
    #[arg(long)]
    script: Option<PathBuf>,
}

struct Session {
    ca: CertificationAuthority,
    card: Logged<SecureElement>,
    terminal: Terminal,
}

impl SessionArgs {
    fn open(&self) -> anyhow::Result<Session> {
        let ca = CertificationAuthority::new(&mut ChaCha20Rng::seed_from_u64(self.seed));
        let se = SecureElement::provision(&ca, ChaCha20Rng::seed_from_u64(self.seed.wrapping_add(1)));
        let terminal = Terminal::new(ca.public(), ChaCha20Rng::seed_from_u64(self.seed.wrapping_add(2)));
        let mut card = Logged::new(se);
        if let Some(p) = &self.script {
            for (n, line) in read_text(p)?.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let frame: String = line.split_whitespace().collect();
                let bytes = hex::decode(&frame).with_context(|| format!("script line {}: not hex", n + 1))?;
                card.transmit(&bytes);
            }
        }
        Ok(Session { ca, card, terminal })
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloneKind {
    None,
    /// Own key pair under a rogue CA.
    OwnKey,
    /// Genuine public key and certificate, replayed signature.
    Replay,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinKind {
    User,
    Admin,
}

#[derive(Subcommand, Debug)]
pub enum CardCmd {
    /// Provisions an element and prints its public artifacts.
    Provision {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Terminal authentication of the element or of a clone.
    Auth {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long, value_enum, default_value = "none")]
        clone: CloneKind,
        #[arg(long, default_value_t = 1)]
        sessions: u32,
    },
    /// Self-attestation of the keystore content.
    Attest {
        #[command(flatten)]
        session: SessionArgs,
        /// Key slots to generate (as admin) before attesting.
        #[arg(long, default_value_t = 0)]
        generate: u8,
        #[arg(long, default_value = "1234")]
        pin: String,
    },
    /// PIN verification, optionally followed by a PIN change.
    Pin {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long, value_enum, default_value = "user")]
        which: PinKind,
        /// Comma-separated attempts, tried in order.
        #[arg(long, value_delimiter = ',')]
        pin: Vec<String>,
        #[arg(long)]
        new_pin: Option<String>,
    },
    /// Generates a key in a slot and signs a 32-byte hash with it.
    Sign {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long, default_value_t = 0)]
        slot: u8,
        /// Hash to sign, 32 bytes hex.
        #[arg(long)]
        hash: String,
        #[arg(long, default_value = "12345678")]
        admin_pin: String,
        #[arg(long, default_value = "1234")]
        pin: String,
    },
}

#[derive(Serialize)]
struct ProvisionSummary {
    ca_public_key: String,
    device_public_key: String,
    certificate: String,
}

#[derive(Serialize)]
struct AuthSummary {
    clone: String,
    outcomes: Vec<AuthOutcome>,
    accepted: usize,
}

fn finish(out: &Output, lines: &[String]) -> anyhow::Result<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    if !text.is_empty() {
        out.human(text.trim_end());
    }
    out.artifact("apdu.txt", text.as_bytes())
}

fn send(card: &mut dyn Card, ins: u8, p1: u8, p2: u8, data: &[u8]) -> anyhow::Result<scard::Response> {
    Ok(exchange(card, &Apdu::new(ins, p1, p2, data.to_vec()))?)
}

pub fn run(cmd: CardCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        CardCmd::Provision { session } => {
            let s = session.open()?;
            let se = &s.card.card;
            let summary = ProvisionSummary {
                ca_public_key: hex::encode(encode_point(&s.ca.public(), true)),
                device_public_key: hex::encode(encode_point(&se.device_public(), false)),
                certificate: hex::encode(scard::signature_bytes(&se.certificate())),
            };
            out.human(format!("CA key {}", summary.ca_public_key));
            out.human(format!("device key {}", summary.device_public_key));
            out.human(format!("certificate {}", summary.certificate));
            finish(out, &s.card.lines)?;
            out.summary("provision", &summary)?;
            Ok(Status::Ok)
        }
        CardCmd::Auth {
            session,
            clone,
            sessions,
        } => {
            let Session {
                mut card, mut terminal, ..
            } = session.open()?;
            let mut seed = session.seed.wrapping_add(100);
            let mut replay_rng = || {
                seed += 1;
                ChaCha20Rng::seed_from_u64(seed)
            };
            let target: Box<dyn Card> = match clone {
                CloneKind::None => Box::new(card),
                CloneKind::OwnKey => Box::new(scard::own_key_clone(&mut replay_rng())),
                CloneKind::Replay => {
                    let recorded = send(&mut card, INS_INTERNAL_AUTH, 0, 0, &[0u8; 32])?.data;
                    let se = &card.card;
                    Box::new(ReplayClone::new(
                        se.device_public(),
                        se.certificate(),
                        Some(recorded),
                        replay_rng(),
                    ))
                }
            };
            let mut target = Logged::new(target);
            let mut outcomes = Vec::new();
            for n in 0..sessions {
                let o = terminal.authenticate_card(&mut target)?;
                out.human(format!("session {n}: {o:?}"));
                outcomes.push(o);
            }
            finish(out, &target.lines)?;
            let accepted = outcomes.iter().filter(|o| o.accepted()).count();
            out.summary(
                "auth",
                &AuthSummary {
                    clone: format!("{clone:?}").to_lowercase(),
                    outcomes,
                    accepted,
                },
            )?;
            Ok(Status::from_accept(accepted == sessions as usize))
        }
        CardCmd::Attest {
            session,
            generate,
            pin,
        } => {
            let mut s = session.open()?;
            if generate > 0 {
                send(&mut s.card, INS_VERIFY_PIN, 0, P2_ADMIN, scard::DEFAULT_ADMIN_PIN.as_bytes())?.into_data()?;
                for slot in 0..generate {
                    send(&mut s.card, INS_GENERATE, slot, 0, &[])?;
                }
            }
            let r = send(&mut s.card, INS_VERIFY_PIN, 0, P2_USER, pin.as_bytes())?;
            if r.sw != SW_OK {
                finish(out, &s.card.lines)?;
                out.human(format!("PIN rejected with status {:04X}", r.sw));
                return Ok(Status::Rejected);
            }
            let key = s.card.card.device_public();
            let result = s.terminal.attest_card(&mut s.card, &key);
            finish(out, &s.card.lines)?;
            match result {
                Ok(hash) => {
                    out.human(format!("attested content hash {}", hex::encode(hash)));
                    out.summary("attest", &serde_json::json!({ "hash": hex::encode(hash), "accept": true }))?;
                    Ok(Status::Ok)
                }
                Err(e) => {
                    out.human(format!("attestation rejected: {e}"));
                    out.summary("attest", &serde_json::json!({ "error": e.to_string(), "accept": false }))?;
                    Ok(Status::Rejected)
                }
            }
        }
        CardCmd::Pin {
            session,
            which,
            pin,
            new_pin,
        } => {
            if pin.is_empty() {
                bail!("give at least one --pin attempt");
            }
            let mut s = session.open()?;
            let p2 = match which {
                PinKind::User => P2_USER,
                PinKind::Admin => P2_ADMIN,
            };
            let mut statuses = Vec::new();
            for attempt in &pin {
                statuses.push(send(&mut s.card, INS_VERIFY_PIN, 0, p2, attempt.as_bytes())?.sw);
            }
            let mut ok = statuses.last() == Some(&SW_OK);
            if let (true, Some(new)) = (ok, &new_pin) {
                let sw = send(&mut s.card, INS_CHANGE_PIN, 0, p2, new.as_bytes())?.sw;
                statuses.push(sw);
                ok = sw == SW_OK;
            }
            finish(out, &s.card.lines)?;
            let codes: Vec<String> = statuses.iter().map(|sw| format!("{sw:04X}")).collect();
            out.human(format!(
                "status {} mode {:?}{}",
                codes.join(" "),
                s.card.card.mode(),
                if s.card.card.is_blocked() { " (blocked)" } else { "" }
            ));
            out.summary(
                "pin",
                &serde_json::json!({
                    "statuses": codes,
                    "mode": s.card.card.mode(),
                    "blocked": s.card.card.is_blocked(),
                }),
            )?;
            Ok(Status::from_accept(ok))
        }
        CardCmd::Sign {
            session,
            slot,
            hash,
            admin_pin,
            pin,
        } => {
            let e = parse_hex32(&hash)?;
            let mut s = session.open()?;
            let steps: [(u8, u8, u8, Vec<u8>); 3] = [
                (INS_VERIFY_PIN, 0, P2_ADMIN, admin_pin.into_bytes()),
                (INS_GENERATE, slot, 0, Vec::new()),
                (INS_VERIFY_PIN, 0, P2_USER, pin.into_bytes()),
            ];
            let mut public = Vec::new();
            for (ins, p1, p2, data) in steps {
                let r = send(&mut s.card, ins, p1, p2, &data)?;
                if r.sw != SW_OK {
                    finish(out, &s.card.lines)?;
                    out.human(format!("card refused INS {ins:02X} with status {:04X}", r.sw));
                    return Ok(Status::Rejected);
                }
                if ins == INS_GENERATE {
                    public = r.data;
                }
            }
            let sig = send(&mut s.card, INS_SIGN_HASH, slot, 0, &e)?.into_data()?;
            finish(out, &s.card.lines)?;
            let key = decode_point(&public).context("card returned a malformed public key")?;
            let valid = ecdsa_verify(&key, &e, &scard::signature_from_bytes(&sig)?);
            out.human(format!("public key {}", hex::encode(&public)));
            out.human(format!("signature {}", hex::encode(&sig)));
            out.human(format!("signature {}", if valid { "verifies" } else { "DOES NOT verify" }));
            out.summary(
                "sign",
                &serde_json::json!({
                    "slot": slot,
                    "public_key": hex::encode(&public),
                    "signature": hex::encode(&sig),
                    "valid": valid,
                }),
            )?;
            Ok(Status::from_accept(valid))
        }
    }
}
