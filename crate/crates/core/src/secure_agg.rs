//! Secure aggregation over `Z_{N²}` with reusable pairwise pads.
//!
//! Each user `ν` holds a pad `p_ν` with `Σ_ν p_ν ≡ 0 (mod N)` and masks an
//! integer vector `x_ν ∈ Z_N` for round tag `t` as
//!
//! ```text
//! y_ν = (1 + x_ν·N) · H(t)^{p_ν}  mod N²,   H(t) = g_H^t mod N²
//! ```
//!
//! The product of all users' `y_ν` is `1 + (Σ x_ν)·N` because the pads cancel
//! in the exponent, so `((Π y_ν) − 1) / N` recovers the sum. Real vectors go
//! through a signed fixed-point encoding first.
//!
//! `g_H = r^{φ(N)}` lies in the order-`N` subgroup `{1 + kN}`, so
//! `H(t)^{p} = 1 + k·t·p·N`. A sum with one contribution missing is therefore
//! still divisible and decodes to a pseudo-random value; [`aggregate_in_range`]
//! and the `value_bound` of [`secure_sum_reals`] catch that case.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum SecureAggError {
    #[error("modulus of {bits} bits is below the {floor}-bit floor")]
    ModulusTooSmall { bits: u64, floor: u64 },
    #[error("no prime found after {0} candidates")]
    PrimeGeneration(usize),
    #[error("duplicate user id {0}")]
    DuplicateUserId(u64),
    #[error("at least two users are required, got {0}")]
    TooFewUsers(usize),
    #[error("round tag must be at least 1")]
    InvalidRoundTag,
    #[error("round tag {got} is not greater than the last used tag {last}")]
    RoundTagReused { last: u64, got: u64 },
    #[error("vector length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("round tag mismatch: expected {expected}, found {found}")]
    RoundMismatch { expected: u64, found: u64 },
    #[error("no masked vectors to aggregate")]
    Empty,
    #[error("value at coordinate {0} is not in Z_N")]
    ValueOutOfField(usize),
    #[error("coordinate {0}: product minus one is not divisible by N; a contribution is missing or corrupt")]
    NotDivisible(usize),
    #[error("coordinate {coordinate}: aggregate lies outside the plaintext range; a contribution is missing or corrupt")]
    OutOfRange { coordinate: usize },
    #[error("fixed-point value {0} exceeds the headroom N/(2|U|)")]
    Headroom(f64),
    #[error("one-time pad set {0} was already used")]
    PadReused(u64),
    #[error("pad matrix does not match the number of users")]
    PadShape,
    #[error("missing pairwise share from {from} to {to}")]
    MissingShare { from: u64, to: u64 },
    #[error("parameters: {0}")]
    Params(String),
    #[error("wire format: {0}")]
    Wire(String),
}

pub type Result<T> = std::result::Result<T, SecureAggError>;

pub const DEFAULT_MODULUS_BITS: u64 = 2048;
pub const MIN_MODULUS_BITS: u64 = 512;
pub const DEFAULT_FIXED_E: u32 = 20;
const MILLER_RABIN_ROUNDS: usize = 64;
const MAX_PRIME_CANDIDATES: usize = 100_000;

/// Public system parameters. Holds no trapdoor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecureParams {
    pub n: BigUint,
    pub n_sq: BigUint,
    pub g_h: BigUint,
    pub fixed_e: u32,
    pub session_id: u32,
}

/// Names of the secrets erased at the end of [`setup_params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attestation {
    pub erased: Vec<&'static str>,
}

/// Big integer that overwrites its limbs on drop. Best effort: temporaries
/// produced by arithmetic are not covered.
struct Secret(BigUint);

impl Drop for Secret {
    fn drop(&mut self) {
        wipe(&mut self.0);
    }
}

// Clearing low bits first zeroes the limbs in place before the top bit
// truncates the vector.
fn wipe(x: &mut BigUint) {
    for i in 0..x.bits() {
        x.set_bit(i, false);
    }
}

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103,
    107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223,
    227, 229, 233, 239, 241, 251,
];

/// Miller–Rabin with `rounds` random bases after trial division.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime of exactly `bits` bits with the top two bits set, so the
/// product of two such primes has exactly `2·bits` bits.
fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint> {
    for _ in 0..MAX_PRIME_CANDIDATES {
        let mut c = rng.gen_biguint(bits);
        c.set_bit(bits - 1, true);
        c.set_bit(bits - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, MILLER_RABIN_ROUNDS, rng) {
            return Ok(c);
        }
    }
    Err(SecureAggError::PrimeGeneration(MAX_PRIME_CANDIDATES))
}

/// Generates `N = pq` and `g_H = r^{φ(N)} mod N²`, then erases `p`, `q`,
/// `φ(N)` and `r`. A seed makes the output reproducible; without one the
/// generator is seeded from the OS.
pub fn setup_params(
    modulus_bits: u64,
    fixed_e: u32,
    seed: Option<u64>,
    session_id: u32,
) -> Result<(SecureParams, Attestation)> {
    if modulus_bits < MIN_MODULUS_BITS {
        return Err(SecureAggError::ModulusTooSmall {
            bits: modulus_bits,
            floor: MIN_MODULUS_BITS,
        });
    }
    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let half = modulus_bits / 2;
    let p = Secret(random_prime(half, &mut rng)?);
    let q = loop {
        let q = Secret(random_prime(modulus_bits - half, &mut rng)?);
        if q.0 != p.0 {
            break q;
        }
    };
    let n = &p.0 * &q.0;
    let n_sq = &n * &n;
    let phi = Secret((&p.0 - 1u32) * (&q.0 - 1u32));
    let g_h = loop {
        let r = Secret(rng.gen_biguint_below(&n_sq));
        if r.0.is_zero() || !r.0.gcd(&n).is_one() {
            continue;
        }
        let g = r.0.modpow(&phi.0, &n_sq);
        if !g.is_one() {
            break g;
        }
    };
    drop((p, q, phi));
    let params = SecureParams {
        n,
        n_sq,
        g_h,
        fixed_e,
        session_id,
    };
    params.validate()?;
    Ok((
        params,
        Attestation {
            erased: vec!["p", "q", "phi", "r"],
        },
    ))
}

impl SecureParams {
    /// Checks the public invariants: odd composite-sized `N`, `N² = N·N`,
    /// `g_H ≠ 1` and `g_H^N ≡ 1 (mod N²)`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SecureAggError::Params(m.into()));
        if self.n.bits() < MIN_MODULUS_BITS {
            return Err(SecureAggError::ModulusTooSmall {
                bits: self.n.bits(),
                floor: MIN_MODULUS_BITS,
            });
        }
        if self.n.is_even() {
            return bad("N must be odd");
        }
        if self.n_sq != &self.n * &self.n {
            return bad("N_sq does not equal N squared");
        }
        if self.g_h.is_one() || self.g_h >= self.n_sq {
            return bad("g_H must be a non-trivial element of Z_{N^2}");
        }
        if !self.g_h.modpow(&self.n, &self.n_sq).is_one() {
            return bad("g_H^N is not 1 mod N^2");
        }
        Ok(())
    }

    /// Bytes per masked element on the wire, `⌈bits(N²)/8⌉`.
    pub fn element_width(&self) -> usize {
        self.n_sq.bits().div_ceil(8) as usize
    }

    /// Serializes the public fields as TOML with hex integers.
    pub fn to_toml(&self) -> String {
        let file = ParamsFile {
            n: self.n.to_str_radix(16),
            g_h: self.g_h.to_str_radix(16),
            fixed_e: self.fixed_e,
            session_id: self.session_id,
        };
        toml::to_string(&file).expect("params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ParamsFile = toml::from_str(text).map_err(|e| SecureAggError::Params(e.to_string()))?;
        let parse = |s: &str, what: &str| {
            let digits = s.trim_start_matches("0x");
            BigUint::parse_bytes(digits.as_bytes(), 16)
                .ok_or_else(|| SecureAggError::Params(format!("{what} is not a hex integer")))
        };
        let n = parse(&file.n, "n")?;
        let params = SecureParams {
            n_sq: &n * &n,
            g_h: parse(&file.g_h, "g_h")?,
            n,
            fixed_e: file.fixed_e,
            session_id: file.session_id,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    n: String,
    g_h: String,
    fixed_e: u32,
    session_id: u32,
}

/// `t = (session_id << 32) | round`.
pub fn round_tag(session_id: u32, round: u32) -> u64 {
    ((session_id as u64) << 32) | round as u64
}

/// `H(t) = g_H^t mod N²`.
pub fn hash_round(params: &SecureParams, t: u64) -> Result<BigUint> {
    if t == 0 {
        return Err(SecureAggError::InvalidRoundTag);
    }
    Ok(params.g_h.modpow(&BigUint::from(t), &params.n_sq))
}

/// A user's pad together with the last round tag it masked under.
#[derive(Clone)]
pub struct ClientKey {
    pub user_id: u64,
    pad: BigUint,
    last_t: Option<u64>,
}

impl std::fmt::Debug for ClientKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientKey")
            .field("user_id", &self.user_id)
            .field("last_t", &self.last_t)
            .finish_non_exhaustive()
    }
}

impl Drop for ClientKey {
    fn drop(&mut self) {
        drop(Secret(std::mem::take(&mut self.pad)));
    }
}

impl ClientKey {
    pub fn new(user_id: u64, pad: BigUint) -> Self {
        Self {
            user_id,
            pad,
            last_t: None,
        }
    }

    pub fn pad(&self) -> &BigUint {
        &self.pad
    }

    pub fn last_round_tag(&self) -> Option<u64> {
        self.last_t
    }
}

/// Point-to-point delivery of pairwise shares between users.
pub trait PairwiseChannel {
    fn send(&mut self, from: u64, to: u64, share: BigUint);
    fn receive(&mut self, from: u64, to: u64) -> Option<BigUint>;
}

/// Trusted in-process delivery.
#[derive(Debug, Default)]
pub struct InProcessChannel {
    mailbox: HashMap<(u64, u64), BigUint>,
}

impl PairwiseChannel for InProcessChannel {
    fn send(&mut self, from: u64, to: u64, share: BigUint) {
        self.mailbox.insert((from, to), share);
    }

    fn receive(&mut self, from: u64, to: u64) -> Option<BigUint> {
        self.mailbox.remove(&(from, to))
    }
}

fn check_users(user_ids: &[u64]) -> Result<()> {
    if user_ids.len() < 2 {
        return Err(SecureAggError::TooFewUsers(user_ids.len()));
    }
    let mut seen = HashSet::new();
    for &id in user_ids {
        if !seen.insert(id) {
            return Err(SecureAggError::DuplicateUserId(id));
        }
    }
    Ok(())
}

/// `p_ν = Σ_μ (s_{ν,μ} − s_{μ,ν}) mod N` from explicit shares `s[(ν, μ)]`.
pub fn pads_from_shares(n: &BigUint, user_ids: &[u64], shares: &BTreeMap<(u64, u64), BigUint>) -> Result<Vec<BigUint>> {
    check_users(user_ids)?;
    let share = |from: u64, to: u64| {
        shares
            .get(&(from, to))
            .ok_or(SecureAggError::MissingShare { from, to })
    };
    user_ids
        .iter()
        .map(|&nu| {
            let mut pad = BigUint::zero();
            for &mu in user_ids.iter().filter(|&&mu| mu != nu) {
                pad += share(nu, mu)? % n;
                pad += n - share(mu, nu)? % n;
            }
            Ok(pad % n)
        })
        .collect()
}

/// Every user sends a uniform share in `Z_N` to every other user, then builds
/// its pad from what it sent and received.
pub fn keygen<C: PairwiseChannel, R: Rng + ?Sized>(
    params: &SecureParams,
    user_ids: &[u64],
    channel: &mut C,
    rng: &mut R,
) -> Result<Vec<ClientKey>> {
    check_users(user_ids)?;
    let mut sent: BTreeMap<(u64, u64), BigUint> = BTreeMap::new();
    for &from in user_ids {
        for &to in user_ids.iter().filter(|&&to| to != from) {
            let s = rng.gen_biguint_below(&params.n);
            channel.send(from, to, s.clone());
            sent.insert((from, to), s);
        }
    }
    user_ids
        .iter()
        .map(|&nu| {
            let mut pad = BigUint::zero();
            for &mu in user_ids.iter().filter(|&&mu| mu != nu) {
                let incoming = channel
                    .receive(mu, nu)
                    .ok_or(SecureAggError::MissingShare { from: mu, to: nu })?;
                pad += &sent[&(nu, mu)];
                pad += &params.n - incoming;
            }
            Ok(ClientKey::new(nu, pad % &params.n))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVector {
    pub user_id: u64,
    pub t: u64,
    pub elements: Vec<BigUint>,
}

/// Masks `values ∈ Z_N` under round tag `t`, which must exceed every tag this
/// key has used before.
pub fn mask(values: &[BigUint], key: &mut ClientKey, params: &SecureParams, t: u64) -> Result<MaskedVector> {
    if let Some(last) = key.last_t {
        if t <= last {
            return Err(SecureAggError::RoundTagReused { last, got: t });
        }
    }
    if let Some(i) = values.iter().position(|x| *x >= params.n) {
        return Err(SecureAggError::ValueOutOfField(i));
    }
    let h = hash_round(params, t)?.modpow(&key.pad, &params.n_sq);
    key.last_t = Some(t);
    let (n, n_sq) = (&params.n, &params.n_sq);
    let elements = values
        .par_iter()
        .map(|x| {
            // (1 + N)^x ≡ 1 + xN (mod N²), already reduced since x < N
            (x * n + 1u32) * &h % n_sq
        })
        .collect();
    Ok(MaskedVector {
        user_id: key.user_id,
        t,
        elements,
    })
}

fn product(masked: &[MaskedVector], params: &SecureParams) -> Result<Vec<BigUint>> {
    let first = masked.first().ok_or(SecureAggError::Empty)?;
    let mut seen = HashSet::new();
    for mv in masked {
        if mv.t != first.t {
            return Err(SecureAggError::RoundMismatch {
                expected: first.t,
                found: mv.t,
            });
        }
        if mv.elements.len() != first.elements.len() {
            return Err(SecureAggError::LengthMismatch {
                expected: first.elements.len(),
                found: mv.elements.len(),
            });
        }
        if !seen.insert(mv.user_id) {
            return Err(SecureAggError::DuplicateUserId(mv.user_id));
        }
    }
    let n_sq = &params.n_sq;
    Ok((0..first.elements.len())
        .into_par_iter()
        .map(|c| {
            masked
                .iter()
                .fold(BigUint::one(), |acc, mv| acc * &mv.elements[c] % n_sq)
        })
        .collect())
}

/// `((Π_ν y_ν) − 1) / N mod N` per coordinate, which is `Σ_ν x_ν mod N` when
/// every user of the key set contributed.
pub fn aggregate(masked: &[MaskedVector], params: &SecureParams) -> Result<Vec<BigUint>> {
    let n = &params.n;
    product(masked, params)?
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            let s_minus_1 = (s + &params.n_sq - 1u32) % &params.n_sq;
            let (quot, rem) = s_minus_1.div_rem(n);
            if !rem.is_zero() {
                return Err(SecureAggError::NotDivisible(c));
            }
            Ok(quot % n)
        })
        .collect()
}

/// [`aggregate`] for non-negative plaintexts whose true sum is at most `max`.
/// Any coordinate above `max` is reported instead of returned.
pub fn aggregate_in_range(masked: &[MaskedVector], params: &SecureParams, max: &BigUint) -> Result<Vec<BigUint>> {
    let sums = aggregate(masked, params)?;
    if let Some(c) = sums.iter().position(|s| s > max) {
        return Err(SecureAggError::OutOfRange { coordinate: c });
    }
    Ok(sums)
}

/// Round-half-to-even of `x·2^e`, mapped into `Z_N` (negatives as `N − |v|`).
/// Fails unless `|v| < N / (2·users)`.
pub fn fixed_encode(x: f64, e: u32, n: &BigUint, users: usize) -> Result<BigUint> {
    let scaled = (x * 2f64.powi(e as i32)).round_ties_even();
    let v = BigInt::from_f64(scaled).ok_or(SecureAggError::Headroom(x))?;
    let mag = v.magnitude();
    if mag * 2u32 * BigUint::from(users.max(1)) >= *n {
        return Err(SecureAggError::Headroom(x));
    }
    Ok(match v.sign() {
        Sign::Minus => n - mag,
        _ => mag.clone(),
    })
}

/// Centered lift of `s` (values above `N/2` are negative), scaled by `2^-e`.
pub fn fixed_decode(s: &BigUint, e: u32, n: &BigUint) -> f64 {
    centered(s, n).to_f64().unwrap_or(f64::NAN) / 2f64.powi(e as i32)
}

fn centered(s: &BigUint, n: &BigUint) -> BigInt {
    if *s > n >> 1 {
        -BigInt::from(n - s)
    } else {
        BigInt::from(s.clone())
    }
}

/// Worst-case absolute error of a fixed-point sum over `users` inputs,
/// `users · 2^-(e+1)`.
pub fn fixed_point_bound(e: u32, users: usize) -> f64 {
    users as f64 * 2f64.powi(-(e as i32 + 1))
}

/// Encodes, masks, aggregates and decodes one real vector per key. Any decoded
/// coordinate with magnitude above `value_bound` is treated as a failed round.
pub fn secure_sum_reals(
    vectors: &[Vec<f64>],
    keys: &mut [ClientKey],
    params: &SecureParams,
    t: u64,
    value_bound: f64,
) -> Result<Vec<f64>> {
    if vectors.len() != keys.len() {
        return Err(SecureAggError::LengthMismatch {
            expected: keys.len(),
            found: vectors.len(),
        });
    }
    let users = keys.len();
    let masked = vectors
        .iter()
        .zip(keys.iter_mut())
        .map(|(v, key)| {
            let encoded = v
                .par_iter()
                .map(|&x| fixed_encode(x, params.fixed_e, &params.n, users))
                .collect::<Result<Vec<_>>>()?;
            mask(&encoded, key, params, t)
        })
        .collect::<Result<Vec<_>>>()?;
    decode_sums(&aggregate(&masked, params)?, params, value_bound)
}

/// Decodes aggregated fixed-point sums, rejecting magnitudes above `value_bound`.
pub fn decode_sums(sums: &[BigUint], params: &SecureParams, value_bound: f64) -> Result<Vec<f64>> {
    sums.iter()
        .enumerate()
        .map(|(c, s)| {
            let x = fixed_decode(s, params.fixed_e, &params.n);
            if x.abs() <= value_bound {
                Ok(x)
            } else {
                Err(SecureAggError::OutOfRange { coordinate: c })
            }
        })
        .collect()
}

const WIRE_HEADER: usize = 24;

/// Header `{user_id, t, count}` as big-endian u64s, then `count` big-endian
/// integers of [`SecureParams::element_width`] bytes each.
pub fn encode_wire(mv: &MaskedVector, params: &SecureParams) -> Vec<u8> {
    let width = params.element_width();
    let mut out = Vec::with_capacity(wire_size(mv.elements.len(), params));
    out.extend_from_slice(&mv.user_id.to_be_bytes());
    out.extend_from_slice(&mv.t.to_be_bytes());
    out.extend_from_slice(&(mv.elements.len() as u64).to_be_bytes());
    for e in &mv.elements {
        let bytes = e.to_bytes_be();
        out.resize(out.len() + width - bytes.len(), 0);
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode_wire(bytes: &[u8], params: &SecureParams) -> Result<MaskedVector> {
    let err = |m: &str| SecureAggError::Wire(m.into());
    if bytes.len() < WIRE_HEADER {
        return Err(err("truncated header"));
    }
    let word = |i: usize| u64::from_be_bytes(bytes[i * 8..(i + 1) * 8].try_into().expect("8 bytes"));
    let (user_id, t, count) = (word(0), word(1), word(2) as usize);
    let width = params.element_width();
    if bytes.len() != wire_size(count, params) {
        return Err(err("length does not match the element count"));
    }
    let elements = bytes[WIRE_HEADER..]
        .chunks_exact(width)
        .map(|c| {
            let v = BigUint::from_bytes_be(c);
            if v < params.n_sq {
                Ok(v)
            } else {
                Err(err("element not below N^2"))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskedVector { user_id, t, elements })
}

/// Bytes of one masked vector on the wire.
pub fn wire_size(count: usize, params: &SecureParams) -> usize {
    WIRE_HEADER + count * params.element_width()
}

/// One-time pairwise pads `p_{ν,μ} = s_{ν,μ} − s_{μ,ν} mod q` for the
/// reference scheme, identified so a session can refuse reuse.
#[derive(Debug, Clone)]
pub struct PairwisePads {
    id: u64,
    /// `pads[ν][μ]`.
    pads: Vec<Vec<BigUint>>,
}

impl PairwisePads {
    pub fn users(&self) -> usize {
        self.pads.len()
    }
}

/// Issues one-time pads and tracks which have been consumed.
#[derive(Debug, Default)]
pub struct PadSession {
    next_id: u64,
    used: HashSet<u64>,
}

impl PadSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh_pads<R: Rng + ?Sized>(&mut self, users: usize, q: &BigUint, rng: &mut R) -> PairwisePads {
        let s: Vec<Vec<BigUint>> = (0..users)
            .map(|_| (0..users).map(|_| rng.gen_biguint_below(q)).collect())
            .collect();
        let pads = (0..users)
            .map(|nu| {
                (0..users)
                    .map(|mu| {
                        if nu == mu {
                            BigUint::zero()
                        } else {
                            (&s[nu][mu] + q - &s[mu][nu]) % q
                        }
                    })
                    .collect()
            })
            .collect();
        self.issue(pads)
    }

    /// Wraps a caller-supplied antisymmetric pad matrix.
    pub fn pads_from_matrix(&mut self, pads: Vec<Vec<BigUint>>) -> Result<PairwisePads> {
        if pads.iter().any(|row| row.len() != pads.len()) {
            return Err(SecureAggError::PadShape);
        }
        Ok(self.issue(pads))
    }

    fn issue(&mut self, pads: Vec<Vec<BigUint>>) -> PairwisePads {
        let id = self.next_id;
        self.next_id += 1;
        PairwisePads { id, pads }
    }

    /// `Σ_ν (x_ν + Σ_μ p_{ν,μ}) mod q`. Each pad set works once.
    pub fn reference_pad_sum(&mut self, values: &[BigUint], pads: &PairwisePads, q: &BigUint) -> Result<BigUint> {
        if values.len() != pads.users() {
            return Err(SecureAggError::PadShape);
        }
        if !self.used.insert(pads.id) {
            return Err(SecureAggError::PadReused(pads.id));
        }
        let masked = values.iter().zip(&pads.pads).map(|(x, row)| {
            let y: BigUint = row.iter().fold(x % q, |acc, p| acc + p);
            y % q
        });
        Ok(masked.fold(BigUint::zero(), |acc, y| acc + y) % q)
    }
}
