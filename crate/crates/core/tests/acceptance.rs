//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use cryptoterm_core::bmac::{self, CostModel, HashAlg, MemoryImage};
use cryptoterm_core::devsim::{stop_start_experiment, LossRule};
use cryptoterm_core::numlib::{derive_params, PrimeGroup};
use cryptoterm_core::pufsim::{
    self, DynamicPolicy, GenuineDevice, PopulationConfig, PowerUp, ReplayClone as PufReplay, Waveform,
    STATIC_THRESHOLD,
};
use cryptoterm_core::scard::{
    self, Apdu, Card, CertificationAuthority, ReplayClone, SecureElement, Terminal, INS_INTERNAL_AUTH,
};
use cryptoterm_core::shardlib::{
    apply_compression, find_shards, longest_repeat, plan_compression, IsaParams, ShardOptions, SuffixTree,
};
use cryptoterm_core::walletsec::{self, ecdsa_sign, scalar_bytes, scalar_from_bytes, Scalar, SignatureRecord};
use k256::elliptic_curve::sec1::ToEncodedPoint;
use k256::ProjectivePoint;
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn modpow(base: u64, mut exp: u64, p: u64) -> u64 {
    let (mut acc, mut b) = (1u128, base as u128 % p as u128);
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % p as u128;
        }
        b = b * b % p as u128;
        exp >>= 1;
    }
    acc as u64
}

fn trial_division_prime(n: u64) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

fn safe_primes_7_mod_8(limit: u64) -> Vec<u64> {
    (7..=limit)
        .filter(|&p| p % 8 == 7 && trial_division_prime(p) && trial_division_prime((p - 1) / 2))
        .collect()
}

fn minstd_seed(rng: &mut impl Rng) -> u32 {
    rng.gen_range(1..0x7fff_ffff)
}

/// `P(y) = g2^(s1 g1^(y+1) mod p) - 1`, evaluated from scratch.
fn oracle_index(p: u64, g1: u64, g2: u64, s1: u64, y: u64) -> u64 {
    let z = (s1 as u128 * modpow(g1, y + 1, p) as u128 % p as u128) as u64;
    modpow(g2, z, p) - 1
}

fn permutation_correctness() -> Check {
    let start = Instant::now();
    let primes = safe_primes_7_mod_8(10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0u64;
    for &p in &primes {
        let group = PrimeGroup::new(p).map_err(|e| format!("p={p}: {e}"))?;
        for _ in 0..100 {
            let seed = minstd_seed(&mut rng);
            let params = derive_params(seed, group).map_err(|e| e.to_string())?;
            let mut seen = vec![false; (p - 1) as usize];
            for y in 0..p - 1 {
                let v = params.perm_p(y).map_err(|e| e.to_string())?;
                ensure(v <= p - 2 && !seen[v as usize], || format!("p={p} seed={seed}: P({y})={v} repeats"))?;
                seen[v as usize] = true;
            }
            for _ in 0..5 {
                let m = rng.gen_range(1..p);
                let mut hit = vec![false; m as usize];
                let mut count = 0u64;
                for i in params.walk(m).map_err(|e| e.to_string())? {
                    ensure(i < m && !hit[i as usize], || format!("p={p} seed={seed} m={m}: {i} repeats"))?;
                    hit[i as usize] = true;
                    count += 1;
                }
                ensure(count == m, || format!("p={p} seed={seed} m={m}: walk yields {count}"))?;
            }
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed <= Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} primes, {cases} seeded permutations exact in {:.1?}", primes.len(), elapsed))
}

fn bmac_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let m = rng.gen_range(1..=4096usize);
        let mut bytes = vec![0u8; m];
        rng.fill(&mut bytes[..]);
        let seed = minstd_seed(&mut rng);
        let image = MemoryImage::flash(bytes.clone()).map_err(|e| e.to_string())?;
        let got = bmac::bmac_compute(&image, seed, HashAlg::Sha256, &CostModel::default())
            .map_err(|e| e.to_string())?;

        let p = (m as u64 + 1..)
            .find(|&p| p % 8 == 7 && trial_division_prime(p) && trial_division_prime((p - 1) / 2))
            .unwrap();
        let params = derive_params(seed, PrimeGroup::new(p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let permuted: Vec<u8> = (0..p - 1)
            .map(|y| oracle_index(p, params.g1(), params.g2(), params.s1(), y))
            .filter(|&i| i < m as u64)
            .map(|i| bytes[i as usize])
            .collect();
        ensure(permuted.len() == m, || format!("case {case}: oracle permuted {} of {m}", permuted.len()))?;
        let want: [u8; 32] = Sha256::digest(&permuted).into();
        ensure(got.digest == want, || format!("case {case}: m={m} seed={seed} digest differs"))?;
    }
    Ok("50 random images up to 4 KB match the permute-then-hash oracle".into())
}

fn stop_start_band() -> Check {
    let start = Instant::now();
    let stats = stop_start_experiment(8192, 10_000, Some(LossRule::PeriodWrap), 3).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mean = stats.mean_extra_cycles_per_byte;
    let detail = format!(
        "mean extra {mean:.4} cycles/byte, detection {:.2}%, {elapsed:.1?}",
        100.0 * stats.detection_rate
    );
    ensure((1.5..=2.5).contains(&mean), || format!("{detail}: mean outside [1.5, 2.5]"))?;
    ensure(stats.detection_rate >= 0.95, || format!("{detail}: detection below 95%"))?;
    ensure(elapsed <= Duration::from_secs(120), || format!("{detail}: too slow"))?;
    Ok(detail)
}

fn per_byte_growth() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut per_byte = |m: usize| -> Result<f64, String> {
        let mut bytes = vec![0u8; m];
        rng.fill(&mut bytes[..]);
        let image = MemoryImage::flash(bytes).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for _ in 0..3 {
            let seed = minstd_seed(&mut rng);
            let r = bmac::bmac_compute(&image, seed, HashAlg::Sha256, &CostModel::default())
                .map_err(|e| e.to_string())?;
            total += r.cycles as f64 / m as f64;
        }
        Ok(total / 3.0)
    };
    let small = per_byte(8 * 1024)?;
    let large = per_byte(256 * 1024)?;
    let ratio = large / small;
    let detail = format!("{small:.1} cycles/byte at 8 KB, {large:.1} at 256 KB, ratio {ratio:.3}");
    ensure((1.2..=1.7).contains(&ratio), || format!("{detail}: outside [1.2, 1.7]"))?;
    Ok(detail)
}

/// Longest repeat by comparing every pair of suffixes; earliest start wins
/// ties and every (possibly overlapping) occurrence is listed.
fn brute_repeat(data: &[u8]) -> Option<(usize, Vec<usize>)> {
    let n = data.len();
    let mut best = (0usize, usize::MAX);
    for i in 0..n {
        for j in i + 1..n {
            let l = data[i..].iter().zip(&data[j..]).take_while(|(a, b)| a == b).count();
            if l > best.0 || (l == best.0 && l > 0 && i < best.1) {
                best = (l, i);
            }
        }
    }
    let (len, start) = best;
    if len == 0 {
        return None;
    }
    let pat = &data[start..start + len];
    let offsets = (0..=n - len).filter(|&k| &data[k..k + len] == pat).collect();
    Some((len, offsets))
}

/// Expands a compressed image back to the original: every call site is
/// followed to its subroutine, whose body replaces the call/jump stub.
fn expand(out: &[u8], plan: &cryptoterm_core::shardlib::CompressionPlan) -> Result<Vec<u8>, String> {
    let stub = plan.isa.call + plan.isa.jump;
    let mut sites: Vec<(usize, usize, usize)> = plan
        .shards
        .iter()
        .flat_map(|s| s.call_sites.iter().map(move |&c| (c, s.subroutine_offset, s.shard.length)))
        .collect();
    sites.sort_unstable();
    let code_end = plan.shards.iter().map(|s| s.subroutine_offset).min().unwrap_or(out.len() - plan.freed());
    let mut back = Vec::with_capacity(plan.image_len);
    let mut pos = 0;
    for (site, sub, len) in sites {
        let word = u16::from_le_bytes([out[site], out[site + 1]]);
        ensure(word & 0xF000 == 0xD000, || format!("no call at {site}"))?;
        let k = ((word & 0x0FFF) as i16) << 4 >> 4;
        // 12-bit word offsets reach 8 KB, so compare modulo that span
        let reach = (sub as i64 - site as i64 - 2).rem_euclid(8192);
        ensure(reach == (2 * k as i64).rem_euclid(8192), || format!("call at {site} misses subroutine at {sub}"))?;
        back.extend_from_slice(&out[pos..site]);
        back.extend_from_slice(&out[sub..sub + len]);
        pos = site + stub;
    }
    back.extend_from_slice(&out[pos..code_end]);
    Ok(back)
}

fn shard_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.gen_range(2..=2048usize);
        let alphabet = [2u8, 4, 16, 255][case % 4];
        let data: Vec<u8> = (0..n).map(|_| rng.gen_range(0..alphabet)).collect();
        let got = longest_repeat(&SuffixTree::new(&data))
            .filter(|s| s.length > 0)
            .map(|s| {
                assert_eq!(s.bytes, data[s.offsets[0]..s.offsets[0] + s.length]);
                (s.length, s.offsets)
            });
        let want = brute_repeat(&data);
        ensure(got == want, || format!("case {case} (n={n}): tree {got:?} vs oracle {want:?}"))?;
    }

    let mut image = vec![0u8; 4096];
    rng.fill(&mut image[..]);
    let block: Vec<u8> = (0..64).map(|_| rng.gen()).collect();
    image[700..764].copy_from_slice(&block);
    image[3100..3164].copy_from_slice(&block);
    let report = find_shards(&image, &ShardOptions::default()).map_err(|e| e.to_string())?;
    let first = report.shards.first().ok_or("planted duplicate not found")?;
    ensure(first.length == 64 && first.offsets == [700, 3100], || format!("planted duplicate reported as {first:?}"))?;

    let mut big = vec![0u8; 256 * 1024];
    rng.fill(&mut big[..]);
    for (len, from, to) in [(64, 1000, 200_000), (128, 50_000, 120_000), (40, 90_000, 250_000)] {
        let chunk = big[from..from + len].to_vec();
        big[to..to + len].copy_from_slice(&chunk);
    }
    let start = Instant::now();
    let report = find_shards(&big, &ShardOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed <= Duration::from_secs(30), || format!("256 KB analysis took {elapsed:?}"))?;
    ensure(report.sizes() == [128, 64, 40], || format!("256 KB shards {:?}", report.sizes()))?;

    let plan = plan_compression(&report, IsaParams::default()).map_err(|e| e.to_string())?;
    let out = apply_compression(&big, &plan).map_err(|e| e.to_string())?;
    let expected_freed: usize = report
        .shards
        .iter()
        .map(|s| s.offsets.len() * s.length - (s.length + 2) - s.offsets.len() * 4)
        .sum();
    let region = plan.free_region();
    ensure(plan.freed() == expected_freed, || format!("freed {} vs {expected_freed}", plan.freed()))?;
    ensure(out.len() == big.len() && out[region.clone()].iter().all(|&b| b == 0), || "filler region not clear".into())?;
    let content = region.start;
    let duplicated: usize = report.shards.iter().map(|s| (s.offsets.len() - 1) * s.length).sum();
    let overhead: usize = report.shards.iter().map(|s| s.offsets.len() * 4 + 2).sum();
    ensure(content == big.len() - duplicated + overhead, || format!("content {content} bytes"))?;
    ensure(expand(&out, &plan)? == big, || "expanded image differs from the original".into())?;
    Ok(format!(
        "200 random inputs exact, planted pair at 700/3100, 256 KB in {elapsed:.1?}, {} of {} bytes freed",
        plan.freed(),
        big.len()
    ))
}

fn random_scalar(rng: &mut impl Rng) -> Scalar {
    loop {
        let b: [u8; 32] = rng.gen();
        if let Ok(s) = scalar_from_bytes(&b) {
            if !bool::from(s.is_zero()) {
                return s;
            }
        }
    }
}

/// x coordinate of `k G` from a Montgomery ladder, reduced mod n.
fn ladder_r(k: &Scalar) -> Scalar {
    let bytes = scalar_bytes(k);
    let (mut r0, mut r1) = (ProjectivePoint::IDENTITY, ProjectivePoint::GENERATOR);
    for bit in (0..256).rev().map(|i| bytes[31 - i / 8] >> (i % 8) & 1) {
        if bit == 1 {
            r0 += r1;
            r1 = r1.double();
        } else {
            r1 += r0;
            r0 = r0.double();
        }
    }
    let point = r0.to_affine().to_encoded_point(false);
    let x: [u8; 32] = (*point.x().unwrap()).into();
    <Scalar as k256::elliptic_curve::ops::Reduce<k256::U256>>::reduce_bytes(&x.into())
}

fn ecdsa_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in 0..500 {
        let (z, k) = (random_scalar(&mut rng), random_scalar(&mut rng));
        let (e1, e2): ([u8; 32], [u8; 32]) = (rng.gen(), rng.gen());
        let a = SignatureRecord::new(&ecdsa_sign(&z, &e1, &k).map_err(|e| e.to_string())?, e1, None);
        let b = SignatureRecord::new(&ecdsa_sign(&z, &e2, &k).map_err(|e| e.to_string())?, e2, None);
        let got = walletsec::recover_from_duplicate_k(&a, &b).map_err(|e| format!("trial {t}: {e}"))?;
        ensure(got == z, || format!("trial {t}: wrong key"))?;
    }

    let keys: Vec<Scalar> = (0..40).map(|_| random_scalar(&mut rng)).collect();
    let mut records = Vec::with_capacity(10_000);
    let mut planted = BTreeMap::new();
    for i in 0..25 {
        let key = i % keys.len();
        let k = random_scalar(&mut rng);
        for _ in 0..2 + i % 3 {
            let e: [u8; 32] = rng.gen();
            records.push(SignatureRecord::new(&ecdsa_sign(&keys[key], &e, &k).unwrap(), e, Some(format!("k{key}"))));
        }
        planted.insert(records.last().unwrap().r, key);
    }
    while records.len() < 10_000 {
        let key = rng.gen_range(0..keys.len());
        let e: [u8; 32] = rng.gen();
        let sig = ecdsa_sign(&keys[key], &e, &random_scalar(&mut rng)).unwrap();
        records.push(SignatureRecord::new(&sig, e, Some(format!("k{key}"))));
    }
    for i in (1..records.len()).rev() {
        records.swap(i, rng.gen_range(0..=i));
    }
    let mut oracle_groups: BTreeSet<Vec<usize>> = BTreeSet::new();
    for i in 0..records.len() {
        let group: Vec<usize> = (0..records.len()).filter(|&j| records[j].r == records[i].r).collect();
        if group.len() >= 2 {
            oracle_groups.insert(group);
        }
    }
    let report = walletsec::scan_duplicate_r(&records);
    let scanned: BTreeSet<Vec<usize>> = report.groups.iter().map(|g| g.records.clone()).collect();
    ensure(scanned == oracle_groups, || format!("{} scanned groups vs {} pairwise", scanned.len(), oracle_groups.len()))?;
    for g in &report.groups {
        let r: [u8; 32] = hex::decode(&g.r).unwrap().try_into().unwrap();
        let want = planted.get(&r).map(|&key| hex::encode(scalar_bytes(&keys[key])));
        ensure(g.recovered_key == want, || format!("group {} recovered {:?}", g.r, g.recovered_key))?;
    }

    let half = walletsec::half_k_r_value();
    let frozen = "00000000000000000000003b78ce563f89a0ed9414f5aa28ad0d96d6795f9c63";
    ensure(half == ladder_r(&walletsec::half_k()), || "half-k r differs from the ladder".into())?;
    ensure(hex::encode(scalar_bytes(&half)) == frozen, || "half-k r differs from the published value".into())?;
    Ok(format!(
        "500/500 keys recovered, {} duplicate-r groups match the pairwise scan, half-k r confirmed",
        scanned.len()
    ))
}

fn spa_inverse() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..1000 {
        let mut z: [u8; 32] = rng.gen();
        if t % 10 == 0 {
            // short scalars exercise the trace length
            z[..t % 32].fill(0);
            z[31] |= 1;
        }
        let trace = walletsec::spa_trace(&z).map_err(|e| e.to_string())?;
        let back = walletsec::spa_recover(&trace).map_err(|e| e.to_string())?;
        ensure(back == z, || format!("trial {t}: {} -> {}", hex::encode(z), hex::encode(back)))?;
    }
    Ok("1000/1000 scalars recovered from their traces".into())
}

fn hd_derivation() -> Check {
    let seed = hex::decode("000102030405060708090a0b0c0d0e0f").unwrap();
    let master = walletsec::bip32_master(&seed).map_err(|e| e.to_string())?;
    let vectors = [
        ("m", "xprv9s21ZrQH143K3QTDL4LXw2F7HEK3wJUD2nW2nRk4stbPy6cq3jPPqjiChkVvvNKmPGJxWUtg6LnF5kejMRNNU3TGtRBeJgk33yuGBxrMPHi", "xpub661MyMwAqRbcFtXgS5sYJABqqG9YLmC4Q1Rdap9gSE8NqtwybGhePY2gZ29ESFjqJoCu1Rupje8YtGqsefD265TMg7usUDFdp6W1EGMcet8"),
        ("m/0'", "xprv9uHRZZhk6KAJC1avXpDAp4MDc3sQKNxDiPvvkX8Br5ngLNv1TxvUxt4cV1rGL5hj6KCesnDYUhd7oWgT11eZG7XnxHrnYeSvkzY7d2bhkJ7", "xpub68Gmy5EdvgibQVfPdqkBBCHxA5htiqg55crXYuXoQRKfDBFA1WEjWgP6LHhwBZeNK1VTsfTFUHCdrfp1bgwQ9xv5ski8PX9rL2dZXvgGDnw"),
        ("m/0'/1", "xprv9wTYmMFdV23N2TdNG573QoEsfRrWKQgWeibmLntzniatZvR9BmLnvSxqu53Kw1UmYPxLgboyZQaXwTCg8MSY3H2EU4pWcQDnRnrVA1xe8fs", "xpub6ASuArnXKPbfEwhqN6e3mwBcDTgzisQN1wXN9BJcM47sSikHjJf3UFHKkNAWbWMiGj7Wf5uMash7SyYq527Hqck2AxYysAA7xmALppuCkwQ"),
    ];
    for (path, xprv, xpub) in vectors {
        let node = walletsec::derive_path(&master, path).map_err(|e| e.to_string())?;
        ensure(node.xprv() == xprv, || format!("{path}: xprv {}", node.xprv()))?;
        ensure(node.xpub() == xpub, || format!("{path}: xpub {}", node.xpub()))?;
    }
    let words: Vec<&str> = "abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon about"
        .split(' ')
        .collect();
    let mseed = walletsec::passphrase_seed(&words, "TREZOR").map_err(|e| e.to_string())?;
    let want = "c55257c360c07c72029aebc1b53c05ed0362ada38ead3e3e9efa3708e53495531f09a6987599d18264c1e1c92f2cf141630c7a3c4ab7c81b2f001698e7463b04";
    ensure(hex::encode(mseed) == want, || format!("mnemonic seed {}", hex::encode(mseed)))?;
    Ok("key chain m, m/0', m/0'/1 and the TREZOR mnemonic seed reproduce exactly".into())
}

fn puf_calibration() -> Check {
    let config = PopulationConfig::default();
    let mut static_error = Vec::new();
    let mut flip_fraction = Vec::new();
    let mut genuine_accept = 0;
    let mut replay_accept = 0;
    let mut trials = 0;
    for pop in 0..4u64 {
        let array = pufsim::sample_population(100 + pop, &config).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + pop);
        let reference = pufsim::enroll(&array, Waveform::rs(), 250, &mut rng).map_err(|e| e.to_string())?;
        flip_fraction.push(reference.flipping.len() as f64 / array.len() as f64);
        let mut genuine = GenuineDevice::new(array.clone(), 300 + pop);
        for _ in 0..100 {
            let read = genuine.power_up(reference.waveform).map_err(|e| e.to_string())?;
            static_error.push(pufsim::static_auth(&read, &reference, STATIC_THRESHOLD).unwrap().rate);
        }
        let mut replay = PufReplay {
            recorded: genuine.power_up(Waveform::rs()).map_err(|e| e.to_string())?.bits,
        };
        for _ in 0..250 {
            genuine_accept += pufsim::dynamic_auth(&mut genuine, &reference, DynamicPolicy::default())
                .map_err(|e| e.to_string())?
                .accept as usize;
            replay_accept += pufsim::dynamic_auth(&mut replay, &reference, DynamicPolicy::default())
                .map_err(|e| e.to_string())?
                .accept as usize;
            trials += 1;
        }
        if pop == 0 {
            let curve = pufsim::decay_curve(&array, Waveform::rs(), &[250, 10_000, 50_000], &mut rng)
                .map_err(|e| e.to_string())?;
            let s: Vec<f64> = curve.iter().map(|p| (p.stable0 + p.stable1) as f64).collect();
            ensure(s[0] > s[1] && s[1] > s[2], || format!("stable counts {s:?} not decreasing"))?;
            ensure(s[0] - s[1] > s[1] - s[2], || format!("stable counts {s:?} do not decelerate"))?;
        }
    }
    let error = static_error.iter().sum::<f64>() / static_error.len() as f64;
    let flips = flip_fraction.iter().sum::<f64>() / flip_fraction.len() as f64;
    let detail = format!(
        "static error {:.4}%, flipping {:.2}%, dynamic genuine {genuine_accept}/{trials}, replay {replay_accept}/{trials}",
        100.0 * error,
        100.0 * flips
    );
    ensure((0.0005..=0.0015).contains(&error), || format!("{detail}: static error off target"))?;
    ensure((0.04..=0.06).contains(&flips), || format!("{detail}: flipping fraction off target"))?;
    ensure(genuine_accept * 100 >= trials * 99, || format!("{detail}: genuine accept below 99%"))?;
    ensure(replay_accept == 0, || format!("{detail}: replay accepted"))?;
    Ok(detail)
}

fn contains_secret(haystack: &[u8], secrets: &[[u8; 32]]) -> bool {
    haystack.windows(32).any(|w| secrets.iter().any(|s| w == s))
}

fn fuzz_frame(rng: &mut ChaCha8Rng) -> Vec<u8> {
    if rng.gen_bool(0.3) {
        let n = rng.gen_range(0..300);
        return (0..n).map(|_| rng.gen()).collect();
    }
    const INS: [u8; 11] = [0x20, 0x24, 0x26, 0x30, 0x32, 0x40, 0x50, 0x52, 0x54, 0x88, 0x00];
    let mut ins = INS[rng.gen_range(0..INS.len())];
    if ins == 0 {
        ins = rng.gen();
    }
    let data: Vec<u8> = match rng.gen_range(0..6) {
        0 => scard::DEFAULT_USER_PIN.into(),
        1 => scard::DEFAULT_ADMIN_PIN.into(),
        2 => (0..rng.gen_range(4..=8)).map(|_| rng.gen_range(b'0'..=b'9')).collect(),
        3 => (0..32).map(|_| rng.gen()).collect(),
        4 => Vec::new(),
        _ => (0..rng.gen_range(0..255)).map(|_| rng.gen()).collect(),
    };
    let mut apdu = Apdu::new(ins, rng.gen_range(0..4), rng.gen_range(0..4), data);
    if rng.gen_bool(0.05) {
        apdu.cla = rng.gen();
    }
    if rng.gen_bool(0.3) {
        apdu.le = Some(rng.gen());
    }
    let mut frame = apdu.encode();
    if rng.gen_bool(0.05) && !frame.is_empty() {
        let i = rng.gen_range(0..frame.len());
        frame[i] ^= 1 << rng.gen_range(0..8);
    }
    frame
}

fn card_soundness() -> Check {
    let mut false_accepts = 0;
    let mut false_rejects = 0;
    for session in 0..1000u64 {
        let base = 10_000 + 4 * session;
        let ca = CertificationAuthority::new(&mut ChaCha20Rng::seed_from_u64(base));
        let mut genuine = SecureElement::provision(&ca, ChaCha20Rng::seed_from_u64(base + 1));
        let mut terminal = Terminal::new(ca.public(), ChaCha20Rng::seed_from_u64(base + 2));
        let rnd: [u8; 32] = ChaCha8Rng::seed_from_u64(base).gen();
        let recorded = scard::exchange(&mut genuine, &Apdu::new(INS_INTERNAL_AUTH, 0, 0, rnd.to_vec()))
            .map_err(|e| e.to_string())?
            .data;
        let mut replay = ReplayClone::new(
            genuine.device_public(),
            genuine.certificate(),
            Some(recorded),
            ChaCha20Rng::seed_from_u64(base + 3),
        );
        let mut own = scard::own_key_clone(&mut ChaCha20Rng::seed_from_u64(!base));
        let auth = |t: &mut Terminal, c: &mut dyn Card| t.authenticate_card(c).map(|o| o.accepted());
        false_rejects += !auth(&mut terminal, &mut genuine).map_err(|e| e.to_string())? as usize;
        false_accepts += auth(&mut terminal, &mut replay).map_err(|e| e.to_string())? as usize;
        false_accepts += auth(&mut terminal, &mut own).map_err(|e| e.to_string())? as usize;
    }
    ensure(false_accepts == 0 && false_rejects == 0, || {
        format!("{false_accepts} false accepts, {false_rejects} false rejects")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut element = None;
    let mut ok_responses = 0;
    for n in 0..100_000u64 {
        if n % 2000 == 0 {
            let ca = CertificationAuthority::new(&mut ChaCha20Rng::seed_from_u64(n));
            element = Some(SecureElement::provision(&ca, ChaCha20Rng::seed_from_u64(n + 1)));
        }
        let se = element.as_mut().unwrap();
        let response = se.transmit(&fuzz_frame(&mut rng));
        ensure(response.len() >= 2, || format!("frame {n}: short response"))?;
        ok_responses += (response[response.len() - 2..] == [0x90, 0x00]) as usize;
        let secrets = se.private_material();
        ensure(!contains_secret(&response, &secrets), || format!("frame {n}: private key bytes in response"))?;
    }
    Ok(format!(
        "3000 sessions without a wrong verdict, 100000 fuzz frames ({ok_responses} answered 9000) leak nothing"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("permutation correctness", permutation_correctness),
        ("bMAC oracle equivalence", bmac_oracle_equivalence),
        ("stop and start band", stop_start_band),
        ("per-byte cost growth", per_byte_growth),
        ("shard oracle", shard_oracle),
        ("ECDSA recovery identity", ecdsa_recovery),
        ("SPA inverse", spa_inverse),
        ("HD derivation", hd_derivation),
        ("PUF calibration", puf_calibration),
        ("card protocol soundness", card_soundness),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", n + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
