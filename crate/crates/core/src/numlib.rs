//! Number theory behind the bijective MAC walk: safe-prime groups, the
//! `g_k = p - 2^k` generator family, the Park–Miller MINSTD generator and
//! the exponential permutation `P(y) = F(1 + y) - 1`.
//!
//! Also hosts the classical permutation-polynomial criteria (Klimov–Shamir
//! invertible mapping, Rivest's mod-2^w test, Matthews' degree rule) that the
//! exponential permutation is compared against.

use thiserror::Error;

/// Modulus of the MINSTD generator, `2^31 - 1`.
pub const MINSTD_MODULUS: u32 = 0x7fff_ffff;
/// Multiplier of the MINSTD generator.
pub const MINSTD_MULTIPLIER: u64 = 16807;
/// Default number of candidates scanned by [`find_safe_prime`].
pub const DEFAULT_SEARCH_LIMIT: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumError {
    #[error("no safe prime p = 2q + 1 with p = 7 mod 8 in [{min}, {max}]")]
    SearchExhausted { min: u64, max: u64 },
    #[error("{p} is not a safe prime congruent to 7 mod 8")]
    NotSafePrime { p: u64 },
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: u64,
        lo: u64,
        hi: u64,
    },
    #[error("{value} is not a generator of the multiplicative group mod {p}")]
    NotGenerator { value: u64, p: u64 },
    #[error("constant C = {c:#x} must have bits 0 and 2 set")]
    InvalidMappingConstant { c: u64 },
    #[error("bit width {0} unsupported")]
    InvalidWidth(u32),
    #[error("empty coefficient list")]
    EmptyPolynomial,
}

pub type Result<T> = std::result::Result<T, NumError>;

#[inline]
pub fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

/// Square-and-multiply over the bits of `exp`, least significant first.
pub fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    if m == 1 {
        return 0;
    }
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        exp >>= 1;
        if exp > 0 {
            base = mul_mod(base, base, m);
        }
    }
    acc
}

/// Deterministic Miller–Rabin; the first twelve prime bases are exact for
/// every `n < 2^64`.
pub fn is_prime(n: u64) -> bool {
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &b in &BASES {
        if n % b == 0 {
            return n == b;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..r {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A safe prime `p = 2q + 1` with `p = 7 (mod 8)`, so that `2` is a
/// quadratic residue and `-2^k` generates the whole group for every
/// `k` in `[1, q - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrimeGroup {
    p: u64,
    q: u64,
}

impl PrimeGroup {
    pub fn new(p: u64) -> Result<Self> {
        if p < 7 || p % 8 != 7 || !is_prime(p) || !is_prime((p - 1) / 2) {
            return Err(NumError::NotSafePrime { p });
        }
        Ok(Self { p, q: (p - 1) / 2 })
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn q(&self) -> u64 {
        self.q
    }

    /// Number of bits needed to hold any residue mod `p`.
    pub fn bit_len(&self) -> u32 {
        64 - self.p.leading_zeros()
    }

    /// True iff `g` has multiplicative order `p - 1`. Since `p - 1 = 2q`
    /// the only proper divisors to rule out are `2` and `q`.
    pub fn is_generator(&self, g: u64) -> bool {
        let g = g % self.p;
        g != 0 && mul_mod(g, g, self.p) != 1 && pow_mod(g, self.q, self.p) != 1
    }
}

/// Smallest qualifying safe prime `p >= min`, scanning at most
/// [`DEFAULT_SEARCH_LIMIT`] candidates.
pub fn find_safe_prime(min: u64) -> Result<PrimeGroup> {
    find_safe_prime_within(min, DEFAULT_SEARCH_LIMIT)
}

pub fn find_safe_prime_within(min: u64, limit: u64) -> Result<PrimeGroup> {
    if min < 2 {
        return Err(NumError::OutOfRange {
            name: "min",
            value: min,
            lo: 2,
            hi: u64::MAX,
        });
    }
    let max = min.saturating_add(limit);
    // first candidate congruent to 7 mod 8
    let mut p = min + (7 + 8 - min % 8) % 8;
    while p <= max {
        if let Ok(group) = PrimeGroup::new(p) {
            return Ok(group);
        }
        p = match p.checked_add(8) {
            Some(next) => next,
            None => break,
        };
    }
    Err(NumError::SearchExhausted { min, max })
}

/// `g_k = p - (2^k mod p)`, a generator for every `k` in `[1, q - 1]`.
pub fn generator(group: &PrimeGroup, k: u64) -> Result<u64> {
    if k < 1 || k > group.q - 1 {
        return Err(NumError::OutOfRange {
            name: "k",
            value: k,
            lo: 1,
            hi: group.q - 1,
        });
    }
    Ok(group.p - pow_mod(2, k, group.p))
}

/// State of the Park–Miller minimal standard generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MinstdState(u32);

impl MinstdState {
    pub fn new(x: u32) -> Result<Self> {
        if x == 0 || x >= MINSTD_MODULUS {
            return Err(NumError::OutOfRange {
                name: "MINSTD state",
                value: x as u64,
                lo: 1,
                hi: MINSTD_MODULUS as u64 - 1,
            });
        }
        Ok(Self(x))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// `x' = 16807 x mod (2^31 - 1)`.
    #[must_use]
    pub fn next(self) -> Self {
        Self((self.0 as u64 * MINSTD_MULTIPLIER % MINSTD_MODULUS as u64) as u32)
    }
}

/// Successive MINSTD outputs, the seed itself excluded.
pub fn minstd_stream(seed: MinstdState) -> impl Iterator<Item = u32> {
    std::iter::successors(Some(seed.next()), |s| Some(s.next())).map(MinstdState::value)
}

/// Parameters of one exponential permutation `F(x) = g2^(s1 g1^x) mod p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PermutationParams {
    group: PrimeGroup,
    g1: u64,
    g2: u64,
    s1: u64,
}

impl PermutationParams {
    pub fn new(group: PrimeGroup, g1: u64, g2: u64, s1: u64) -> Result<Self> {
        for g in [g1, g2] {
            if g >= group.p || !group.is_generator(g) {
                return Err(NumError::NotGenerator { value: g, p: group.p });
            }
        }
        check_range("s1", s1, 1, group.p - 1)?;
        Ok(Self { group, g1, g2, s1 })
    }

    pub fn group(&self) -> &PrimeGroup {
        &self.group
    }

    pub fn g1(&self) -> u64 {
        self.g1
    }

    pub fn g2(&self) -> u64 {
        self.g2
    }

    pub fn s1(&self) -> u64 {
        self.s1
    }

    /// `F(x) = g2^(s1 g1^x mod p) mod p`, a bijection of `[1, p - 1]`.
    pub fn perm_f(&self, x: u64) -> Result<u64> {
        let p = self.group.p;
        check_range("x", x, 1, p - 1)?;
        let z = mul_mod(self.s1, pow_mod(self.g1, x, p), p);
        Ok(pow_mod(self.g2, z, p))
    }

    /// `P(y) = F(1 + y) - 1`, a bijection of `[0, p - 2]`.
    pub fn perm_p(&self, y: u64) -> Result<u64> {
        check_range("y", y, 0, self.group.p - 2)?;
        Ok(self.perm_f(y + 1)? - 1)
    }

    /// Every step of the walk over `[0, p - 2]`, with the exponent maintained
    /// by the recursive update `z(x+1) = g1 z(x) mod p`.
    pub fn steps(&self) -> WalkSteps {
        WalkSteps {
            params: *self,
            y: 0,
            z: mul_mod(self.s1, self.g1, self.group.p),
        }
    }

    /// Indices `P(0), P(1), ...` restricted to `[0, m - 1]`. Values `>= m`
    /// are skipped, so the walk yields every index below `m` exactly once.
    pub fn walk(&self, m: u64) -> Result<impl Iterator<Item = u64>> {
        check_range("m", m, 0, self.group.p - 1)?;
        Ok(self.steps().map(|s| s.index).filter(move |&i| i < m))
    }
}

/// One step of the permutation walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkStep {
    pub y: u64,
    /// Exponent `s1 g1^(y+1) mod p`.
    pub z: u64,
    /// `P(y)`.
    pub index: u64,
}

#[derive(Debug, Clone)]
pub struct WalkSteps {
    params: PermutationParams,
    y: u64,
    z: u64,
}

impl Iterator for WalkSteps {
    type Item = WalkStep;

    fn next(&mut self) -> Option<WalkStep> {
        let p = self.params.group.p;
        if self.y > p - 2 {
            return None;
        }
        let step = WalkStep {
            y: self.y,
            z: self.z,
            index: pow_mod(self.params.g2, self.z, p) - 1,
        };
        self.y += 1;
        self.z = mul_mod(self.params.g1, self.z, p);
        Some(step)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.params.group.p - 1).saturating_sub(self.y) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for WalkSteps {}

/// Derives `(g1, g2, s1)` from three successive MINSTD draws `r1, r2, r3`:
/// `g1 = g_(1 + r1 mod (q-1))`, `g2 = g_(1 + r2 mod (q-1))`,
/// `s1 = 1 + r3 mod (p-1)`.
pub fn derive_params(seed: u32, group: PrimeGroup) -> Result<PermutationParams> {
    let state = MinstdState::new(seed)?;
    let mut draws = minstd_stream(state).map(u64::from);
    let (r1, r2, r3) = (
        draws.next().unwrap_or(1),
        draws.next().unwrap_or(1),
        draws.next().unwrap_or(1),
    );
    let q1 = group.q - 1;
    let g1 = generator(&group, 1 + r1 % q1)?;
    let g2 = generator(&group, 1 + r2 % q1)?;
    let s1 = 1 + r3 % (group.p - 1);
    Ok(PermutationParams { group, g1, g2, s1 })
}

/// Invertible mapping `x + (x^2 OR C) mod 2^n`; a permutation whenever bits
/// 0 and 2 of `C` are set.
pub fn klimov_shamir_map(x: u64, c: u64, bits: u32) -> Result<u64> {
    if bits == 0 || bits > 32 {
        return Err(NumError::InvalidWidth(bits));
    }
    if c & 0b101 != 0b101 {
        return Err(NumError::InvalidMappingConstant { c });
    }
    let mask = (1u64 << bits) - 1;
    check_range("x", x, 0, mask)?;
    let sq = x.wrapping_mul(x) & mask;
    Ok(x.wrapping_add(sq | c) & mask)
}

/// Rivest's characterisation of permutation polynomials mod `2^w`:
/// `a1` odd, `a2 + a4 + ...` even and `a3 + a5 + ...` even.
pub fn rivest_is_permutation_poly(coeffs: &[u64], w: u32) -> Result<bool> {
    if w < 2 {
        return Err(NumError::InvalidWidth(w));
    }
    if coeffs.is_empty() {
        return Err(NumError::EmptyPolynomial);
    }
    let a1 = coeffs.get(1).copied().unwrap_or(0);
    let mut even = 0u64;
    let mut odd = 0u64;
    for (i, &a) in coeffs.iter().enumerate().skip(2) {
        if i % 2 == 0 {
            even = even.wrapping_add(a);
        } else {
            odd = odd.wrapping_add(a);
        }
    }
    Ok(a1 % 2 == 1 && even % 2 == 0 && odd % 2 == 0)
}

/// Matthews' condition for `1 + x + ... + x^d` to permute `F(q)`, `q = p^e`:
/// `d = 1 mod p (q - 1)`. Exact in odd characteristic; in characteristic 2
/// it is sufficient but a few extra degrees also permute. For prime fields
/// the modulus is `p (p - 1)`.
pub fn matthews_degree_ok(d: u64, p: u64, e: u32) -> bool {
    let modulus = (p as u128)
        .checked_pow(e)
        .and_then(|q| (q - 1).checked_mul(p as u128));
    match modulus {
        Some(1) => true,
        Some(m) => d as u128 % m == 1,
        None => d == 1,
    }
}

fn check_range(name: &'static str, value: u64, lo: u64, hi: u64) -> Result<()> {
    if value < lo || value > hi {
        Err(NumError::OutOfRange { name, value, lo, hi })
    } else {
        Ok(())
    }
}
