use std::collections::HashSet;
use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Subcommand;
use cryptoterm_core::walletsec::{
    self, ecdsa_sign, public_key, scalar_bytes, scalar_from_bytes, KeyNode, Scalar, SignatureRecord, SpaTrace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::output::{parse_hex32, read_text, write, Output, Status};

#[derive(Subcommand, Debug)]
pub enum EcdsaCmd {
    /// Writes a synthetic signature dataset with planted weaknesses.
    Generate {
        #[arg(long, default_value_t = 1000)]
        records: usize,
        /// Distinct signing keys.
        #[arg(long, default_value_t = 50)]
        keys: usize,
        /// Signature pairs that reuse a nonce under the same key.
        #[arg(long, default_value_t = 3)]
        reuse: usize,
        /// Signatures made with the nonce 1/2.
        #[arg(long, default_value_t = 1)]
        half_k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Private key from two signatures that share a nonce.
    Recover {
        /// CSV with columns r,s,e[,key_id] (hex).
        #[arg(long)]
        input: PathBuf,
        /// Zero-based data rows of the pair.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
        rows: Vec<usize>,
    },
    /// Groups repeated r values and recovers the keys behind them.
    Scan {
        #[arg(long)]
        input: PathBuf,
    },
    /// Flags signatures made with the nonce 1/2.
    HalfK {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Converts between a scalar and its double-and-add operation trace.
    Spa {
        /// Trace of D / DA tokens, least significant bit first.
        #[arg(long, conflicts_with = "key")]
        trace: Option<String>,
        /// 32-byte scalar in hex.
        #[arg(long)]
        key: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum KeysCmd {
    /// Master node from a binary seed.
    Master {
        /// 16 to 64 byte seed in hex.
        #[arg(long)]
        seed_hex: String,
    },
    /// Child node along a path such as m/0'/1.
    Ckd {
        #[arg(long)]
        seed_hex: String,
        #[arg(long)]
        path: String,
    },
    /// Binary seed from a mnemonic sentence.
    Mnemonic {
        #[arg(long)]
        words: String,
        #[arg(long, default_value = "")]
        passphrase: String,
        /// Also derive this path from the resulting master node.
        #[arg(long)]
        path: Option<String>,
    },
    /// Dictionary search for brainwallet phrases behind known key ids.
    Brainattack {
        /// One candidate phrase per line.
        #[arg(long)]
        dictionary: PathBuf,
        /// One 20-byte key id (hex) per line.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Phrase whose key ids are added to the targets.
        #[arg(long)]
        target_phrase: Vec<String>,
    },
}

fn random_scalar(rng: &mut impl Rng) -> Scalar {
    loop {
        let mut b = [0u8; 32];
        rng.fill(&mut b);
        if let Ok(s) = scalar_from_bytes(&b) {
            return s;
        }
    }
}

fn load_records(path: &PathBuf) -> anyhow::Result<Vec<SignatureRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    walletsec::read_records_csv(f).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct NodeSummary {
    path: String,
    depth: u8,
    index: u32,
    private_key: String,
    chain_code: String,
    public_key: String,
    xprv: String,
    xpub: String,
}

impl NodeSummary {
    fn new(path: &str, n: &KeyNode) -> Self {
        Self {
            path: path.to_string(),
            depth: n.depth,
            index: n.index,
            private_key: hex::encode(n.private_key),
            chain_code: hex::encode(n.chain_code),
            public_key: hex::encode(n.public_key()),
            xprv: n.xprv(),
            xpub: n.xpub(),
        }
    }

    fn print(&self, out: &Output) {
        out.human(format!("path {}", self.path));
        out.human(format!("private key {}", self.private_key));
        out.human(format!("chain code {}", self.chain_code));
        out.human(format!("xprv {}", self.xprv));
        out.human(format!("xpub {}", self.xpub));
    }
}

pub fn run_ecdsa(cmd: EcdsaCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        EcdsaCmd::Generate {
            records,
            keys,
            reuse,
            half_k,
            seed,
            output,
        } => {
            if keys == 0 || records < 2 * reuse + half_k {
                bail!("need at least one key and room for {reuse} pairs plus {half_k} half-k records");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let secrets: Vec<_> = (0..keys).map(|_| random_scalar(&mut rng)).collect();
            let mut rows = Vec::with_capacity(records);
            let sign = |key: usize, k: &Scalar, rng: &mut ChaCha8Rng| -> anyhow::Result<SignatureRecord> {
                let mut e = [0u8; 32];
                rng.fill(&mut e);
                let sig = ecdsa_sign(&secrets[key], &e, k)?;
                Ok(SignatureRecord::new(&sig, e, Some(format!("key{key}"))))
            };
            for i in 0..reuse {
                let key = i % keys;
                let k = random_scalar(&mut rng);
                rows.push(sign(key, &k, &mut rng)?);
                rows.push(sign(key, &k, &mut rng)?);
            }
            for i in 0..half_k {
                rows.push(sign(i % keys, &walletsec::half_k(), &mut rng)?);
            }
            while rows.len() < records {
                let key = rng.gen_range(0..keys);
                let k = random_scalar(&mut rng);
                rows.push(sign(key, &k, &mut rng)?);
            }
            // shuffle so planted rows are not adjacent
            for i in (1..rows.len()).rev() {
                rows.swap(i, rng.gen_range(0..=i));
            }
            write(&output, walletsec::write_records_csv(&rows).as_bytes())?;
            out.human(format!("{} records over {keys} keys written", rows.len()));
            Ok(Status::Ok)
        }
        EcdsaCmd::Recover { input, rows } => {
            let records = load_records(&input)?;
            let [i, j] = rows[..] else {
                bail!("--rows takes exactly two indices");
            };
            let (Some(a), Some(b)) = (records.get(i), records.get(j)) else {
                bail!("dataset has {} rows", records.len());
            };
            let z = walletsec::recover_from_duplicate_k(a, b)?;
            let key = hex::encode(scalar_bytes(&z));
            let public = hex::encode(walletsec::encode_point(&public_key(&z), true));
            out.human(format!("private key {key}"));
            out.human(format!("public key {public}"));
            out.summary(
                "recover",
                &serde_json::json!({ "rows": [i, j], "private_key": key, "public_key": public }),
            )?;
            Ok(Status::Ok)
        }
        EcdsaCmd::Scan { input } => {
            let records = load_records(&input)?;
            let report = walletsec::scan_duplicate_r(&records);
            out.human(format!(
                "{} records, {} repeated r values, {} affected keys",
                report.total_records, report.repeated_r, report.affected_keys
            ));
            for g in &report.groups {
                out.human(format!(
                    "r={} rows={:?} key={}",
                    g.r,
                    g.records,
                    g.recovered_key.as_deref().unwrap_or("-")
                ));
            }
            out.summary("scan", &report)?;
            Ok(Status::Ok)
        }
        EcdsaCmd::HalfK { input } => {
            let r = hex::encode(scalar_bytes(&walletsec::half_k_r_value()));
            out.human(format!("r for nonce 1/2: {r}"));
            let flagged = match &input {
                Some(p) => walletsec::flag_half_k(&load_records(p)?),
                None => Vec::new(),
            };
            if input.is_some() {
                out.human(format!("flagged rows: {flagged:?}"));
            }
            out.summary("half_k", &serde_json::json!({ "r": r, "flagged": flagged }))?;
            Ok(Status::Ok)
        }
        EcdsaCmd::Spa { trace, key } => match (trace, key) {
            (Some(t), None) => {
                let trace: SpaTrace = t.parse()?;
                let key = hex::encode(walletsec::spa_recover(&trace)?);
                out.human(format!("key {key}"));
                out.summary("spa", &serde_json::json!({ "key": key, "trace": trace.to_string() }))?;
                Ok(Status::Ok)
            }
            (None, Some(k)) => {
                let trace = walletsec::spa_trace(&parse_hex32(&k)?)?.to_string();
                out.human(&trace);
                out.summary("spa", &serde_json::json!({ "key": k, "trace": trace }))?;
                Ok(Status::Ok)
            }
            _ => bail!("give exactly one of --trace or --key"),
        },
    }
}

pub fn run_keys(cmd: KeysCmd, out: &Output) -> anyhow::Result<Status> {
    match cmd {
        KeysCmd::Master { seed_hex } => {
            let node = walletsec::bip32_master(&hex::decode(seed_hex.trim()).context("seed is not hex")?)?;
            let s = NodeSummary::new("m", &node);
            s.print(out);
            out.summary("node", &s)?;
            Ok(Status::Ok)
        }
        KeysCmd::Ckd { seed_hex, path } => {
            let master = walletsec::bip32_master(&hex::decode(seed_hex.trim()).context("seed is not hex")?)?;
            let node = walletsec::derive_path(&master, &path)?;
            let s = NodeSummary::new(&path, &node);
            s.print(out);
            out.summary("node", &s)?;
            Ok(Status::Ok)
        }
        KeysCmd::Mnemonic {
            words,
            passphrase,
            path,
        } => {
            let list: Vec<&str> = words.split_whitespace().collect();
            let seed = walletsec::passphrase_seed(&list, &passphrase)?;
            let master = walletsec::bip32_master(&seed)?;
            let path = path.unwrap_or_else(|| "m".into());
            let node = walletsec::derive_path(&master, &path)?;
            let s = NodeSummary::new(&path, &node);
            out.human(format!("seed {}", hex::encode(seed)));
            s.print(out);
            out.summary("mnemonic", &serde_json::json!({ "seed": hex::encode(seed), "node": s }))?;
            Ok(Status::Ok)
        }
        KeysCmd::Brainattack {
            dictionary,
            targets,
            target_phrase,
        } => {
            let mut ids: HashSet<[u8; 20]> = HashSet::new();
            if let Some(t) = &targets {
                for line in read_text(t)?.lines().map(str::trim).filter(|l| !l.is_empty()) {
                    let v = hex::decode(line).with_context(|| format!("bad key id {line:?}"))?;
                    ids.insert(v.try_into().map_err(|_| anyhow::anyhow!("key id {line:?} is not 20 bytes"))?);
                }
            }
            for p in &target_phrase {
                let (c, u) = walletsec::brainwallet_ids(p)?;
                ids.insert(c);
                ids.insert(u);
            }
            let dict = read_text(&dictionary)?;
            let report = walletsec::brainwallet_attack(dict.lines(), &ids)?;
            for m in &report.matches {
                out.human(format!(
                    "match {:?} -> {} ({})",
                    m.phrase,
                    m.hash160,
                    if m.compressed { "compressed" } else { "uncompressed" }
                ));
            }
            out.human(format!("{} candidates, {} matches", report.candidates, report.matches.len()));
            eprintln!("{:.0} keys/s", report.keys_per_second);
            // timing is left out of the summary so reruns compare byte for byte
            out.summary(
                "brainattack",
                &serde_json::json!({ "candidates": report.candidates, "matches": report.matches }),
            )?;
            Ok(Status::Ok)
        }
    }
}
