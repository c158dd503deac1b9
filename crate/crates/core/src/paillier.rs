//! Paillier cryptosystem over `Z_{N^2}` with generator `g = N + 1`.
//!
//! Plaintexts are signed: residues above `N/2` decode as negative values.
//! Encryption randomness is drawn as `h^a` for a fixed public `N`-th residue
//! `h` and a random exponent `a` of `K/2` bits, which lets every party use a
//! precomputed fixed-base table instead of a full-size `r^N` exponentiation.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, CodecError, Reader};

pub const ALLOWED_KEY_BITS: [u32; 5] = [512, 1024, 2048, 3072, 4096];
pub const DEFAULT_KEY_BITS: u32 = 1024;
const MILLER_RABIN_ROUNDS: usize = 64;

pub type KeyId = [u8; 16];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaillierError {
    #[error("unsupported key length {0}; expected one of 512, 1024, 2048, 3072, 4096")]
    UnsupportedKeyLength(u32),
    #[error("plaintext outside the signed domain (|m| must be below N/2)")]
    PlaintextOutOfRange,
    #[error("ciphertext was produced under a different public key")]
    KeyMismatch,
    #[error("malformed ciphertext: {0}")]
    MalformedCiphertext(&'static str),
    #[error("bad key file: {0}")]
    BadKeyFile(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Signed plaintext encoding: `[-(N-1)/2, (N-1)/2]` onto `Z_N`, plus an
/// optional fixed-point scale `2^frac_bits` for real-valued inputs.
#[derive(Clone, Debug)]
pub struct SignedEncoding {
    modulus: BigUint,
    half: BigUint,
    pub frac_bits: u32,
}

impl SignedEncoding {
    pub const DEFAULT_FRAC_BITS: u32 = 16;

    pub fn new(modulus: BigUint, frac_bits: u32) -> Self {
        let half = &modulus >> 1u32;
        Self {
            modulus,
            half,
            frac_bits,
        }
    }

    pub fn half(&self) -> &BigUint {
        &self.half
    }

    pub fn encode(&self, m: &BigInt) -> Result<BigUint, PaillierError> {
        if m.magnitude() > &self.half {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        Ok(match m.sign() {
            Sign::Minus => &self.modulus - m.magnitude(),
            _ => m.magnitude().clone(),
        })
    }

    pub fn decode(&self, residue: &BigUint) -> BigInt {
        if residue > &self.half {
            -BigInt::from(&self.modulus - residue)
        } else {
            BigInt::from(residue.clone())
        }
    }

    /// Round-to-nearest fixed-point embedding of a real value.
    pub fn encode_real(&self, x: f64) -> Result<BigUint, PaillierError> {
        let scaled = (x * (self.frac_bits as f64).exp2()).round();
        if !scaled.is_finite() || scaled.abs() >= 2f64.powi(120) {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        self.encode(&BigInt::from(scaled as i128))
    }

    pub fn decode_real(&self, residue: &BigUint) -> f64 {
        let v = self.decode(residue);
        v.to_f64().unwrap_or(f64::NAN) / (self.frac_bits as f64).exp2()
    }
}

/// Fixed-base window table for `h^a mod N^2`.
struct FixedBase {
    window: u32,
    /// `table[i][j] = h^((j+1) * 2^(window*i))`.
    table: Vec<Vec<BigUint>>,
}

impl FixedBase {
    fn new(h: &BigUint, modulus: &BigUint, exp_bits: u64) -> Self {
        let window: u32 = if modulus.bits() <= 2048 { 8 } else { 4 };
        let windows = exp_bits.div_ceil(window as u64) as usize;
        let per = (1usize << window) - 1;
        let mut table = Vec::with_capacity(windows);
        let mut base = h.clone();
        for _ in 0..windows {
            let mut row = Vec::with_capacity(per);
            let mut acc = base.clone();
            row.push(acc.clone());
            for _ in 1..per {
                acc = (&acc * &base) % modulus;
                row.push(acc.clone());
            }
            // next base = base^(2^window) = row[per-1] * base
            base = (&row[per - 1] * &base) % modulus;
            table.push(row);
        }
        Self { window, table }
    }

    fn pow(&self, exp: &BigUint, modulus: &BigUint) -> BigUint {
        let mask = (1u64 << self.window) - 1;
        let mut acc = BigUint::one();
        let digits = exp.to_u64_digits();
        for (i, row) in self.table.iter().enumerate() {
            let bit = i as u64 * self.window as u64;
            let limb = (bit / 64) as usize;
            let off = bit % 64;
            if limb >= digits.len() {
                break;
            }
            let mut d = digits[limb] >> off;
            if off + self.window as u64 > 64 && limb + 1 < digits.len() {
                d |= digits[limb + 1] << (64 - off);
            }
            let d = (d & mask) as usize;
            if d != 0 {
                acc = (acc * &row[d - 1]) % modulus;
            }
        }
        acc
    }
}

struct PublicInner {
    n: BigUint,
    n_sq: BigUint,
    g: BigUint,
    bits: u32,
    key_id: KeyId,
    ct_bytes: usize,
    encoding: SignedEncoding,
    h: BigUint,
    rand_bits: u64,
    fixed: OnceLock<FixedBase>,
}

/// Paillier public key. Cloning is cheap (shared, immutable).
#[derive(Clone)]
pub struct PublicKey {
    inner: Arc<PublicInner>,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.inner.bits)
            .field("key_id", &hex(&self.inner.key_id))
            .finish()
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.inner.n == other.inner.n && self.inner.g == other.inner.g
    }
}

impl Eq for PublicKey {}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.value.to_str_radix(16);
        let head = &s[..s.len().min(12)];
        write!(f, "Ciphertext({head}…)")
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> &KeyId {
        &self.key_id
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, PaillierError> {
        let bits = n.bits() as u32;
        if !ALLOWED_KEY_BITS.contains(&bits) {
            return Err(PaillierError::UnsupportedKeyLength(bits));
        }
        if n.is_even() {
            return Err(PaillierError::BadKeyFile("modulus is even".into()));
        }
        let g = &n + 1u32;
        let n_sq = &n * &n;
        let key_id = key_id_of(&n, &g);
        let ct_bytes = n_sq.bits().div_ceil(8) as usize;
        let encoding = SignedEncoding::new(n.clone(), SignedEncoding::DEFAULT_FRAC_BITS);
        let h = derive_fixed_base(&n, &n_sq);
        Ok(Self {
            inner: Arc::new(PublicInner {
                rand_bits: (bits / 2) as u64,
                n,
                n_sq,
                g,
                bits,
                key_id,
                ct_bytes,
                encoding,
                h,
                fixed: OnceLock::new(),
            }),
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.inner.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.inner.n_sq
    }

    pub fn g(&self) -> &BigUint {
        &self.inner.g
    }

    pub fn bits(&self) -> u32 {
        self.inner.bits
    }

    pub fn key_id(&self) -> &KeyId {
        &self.inner.key_id
    }

    /// Width in bytes of a fixed-size ciphertext field on the wire.
    pub fn ciphertext_bytes(&self) -> usize {
        self.inner.ct_bytes
    }

    pub fn encoding(&self) -> &SignedEncoding {
        &self.inner.encoding
    }

    /// Largest bit length a signed plaintext may have.
    pub fn plaintext_bits(&self) -> u64 {
        self.inner.n.bits() - 2
    }

    fn fixed_base(&self) -> &FixedBase {
        self.inner
            .fixed
            .get_or_init(|| FixedBase::new(&self.inner.h, &self.inner.n_sq, self.inner.rand_bits))
    }

    /// Warm the fixed-base table so later encryptions have stable latency.
    pub fn precompute(&self) {
        let _ = self.fixed_base();
    }

    fn wrap(&self, value: BigUint) -> Ciphertext {
        Ciphertext {
            value,
            key_id: self.inner.key_id,
        }
    }

    fn check(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.key_id != self.inner.key_id {
            return Err(PaillierError::KeyMismatch);
        }
        Ok(())
    }

    /// `g^m = 1 + mN mod N^2` for an already-encoded residue.
    fn g_pow(&self, residue: &BigUint) -> BigUint {
        (BigUint::one() + residue * &self.inner.n) % &self.inner.n_sq
    }

    fn noise<R: RngCore + CryptoRng + ?Sized>(&self, rng: &mut R) -> BigUint {
        let a = rng.gen_biguint(self.inner.rand_bits);
        self.fixed_base().pow(&a, &self.inner.n_sq)
    }

    pub fn encrypt<R: RngCore + CryptoRng + ?Sized>(
        &self,
        m: &BigInt,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        let residue = self.inner.encoding.encode(m)?;
        let r = self.noise(rng);
        Ok(self.wrap((self.g_pow(&residue) * r) % &self.inner.n_sq))
    }

    pub fn encrypt_i128<R: RngCore + CryptoRng + ?Sized>(
        &self,
        m: i128,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        self.encrypt(&BigInt::from(m), rng)
    }

    /// Deterministic encryption with unit randomness. Only for values that are
    /// immediately combined with a randomized ciphertext or sent to the key
    /// holder, never as a standalone hiding ciphertext.
    pub fn encrypt_trivial(&self, m: &BigInt) -> Result<Ciphertext, PaillierError> {
        let residue = self.inner.encoding.encode(m)?;
        Ok(self.wrap(self.g_pow(&residue)))
    }

    pub fn rerandomize<R: RngCore + CryptoRng + ?Sized>(
        &self,
        c: &Ciphertext,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        Ok(self.wrap((&c.value * self.noise(rng)) % &self.inner.n_sq))
    }

    /// Homomorphic addition: `D(c1 * c2) = x0 + x1 mod N`.
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        self.check(c1)?;
        self.check(c2)?;
        Ok(self.wrap((&c1.value * &c2.value) % &self.inner.n_sq))
    }

    /// Adds a public plaintext constant without fresh randomness.
    pub fn add_plain(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        let residue = self.inner.encoding.encode(k)?;
        Ok(self.wrap((&c.value * self.g_pow(&residue)) % &self.inner.n_sq))
    }

    pub fn add_plain_i128(&self, c: &Ciphertext, k: i128) -> Result<Ciphertext, PaillierError> {
        self.add_plain(c, &BigInt::from(k))
    }

    /// Homomorphic scalar multiplication: `D(c^k) = k * x mod N`. Negative `k`
    /// goes through a modular inverse.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        let pos = self.pow_unsigned(&c.value, k.magnitude());
        Ok(self.wrap(if k.is_negative() {
            self.invert_raw(&pos)?
        } else {
            pos
        }))
    }

    pub fn scalar_mul_i128(&self, c: &Ciphertext, k: i128) -> Result<Ciphertext, PaillierError> {
        self.scalar_mul(c, &BigInt::from(k))
    }

    /// Homomorphic negation, written `E(x)^-1` in the protocols.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        Ok(self.wrap(self.invert_raw(&c.value)?))
    }

    /// `E(a) * E(b)^-1 = E(a - b)`.
    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        let nb = self.negate(b)?;
        self.add(a, &nb)
    }

    fn pow_unsigned(&self, base: &BigUint, e: &BigUint) -> BigUint {
        if e.is_zero() {
            BigUint::one()
        } else if e.is_one() {
            base.clone()
        } else {
            base.modpow(e, &self.inner.n_sq)
        }
    }

    fn invert_raw(&self, v: &BigUint) -> Result<BigUint, PaillierError> {
        v.modinv(&self.inner.n_sq)
            .ok_or(PaillierError::MalformedCiphertext("not invertible mod N^2"))
    }

    /// Product of `base_i^exp_i` for non-negative exponents.
    pub fn multi_exp(
        &self,
        terms: &[(&Ciphertext, &BigUint)],
    ) -> Result<Ciphertext, PaillierError> {
        let mut acc = BigUint::one();
        for (c, e) in terms {
            self.check(c)?;
            if e.is_zero() {
                continue;
            }
            acc = (acc * self.pow_unsigned(&c.value, e)) % &self.inner.n_sq;
        }
        Ok(self.wrap(acc))
    }

    /// Inverts many ciphertexts with a single modular inversion
    /// (Montgomery's batch trick).
    pub fn batch_negate(&self, cs: &[Ciphertext]) -> Result<Vec<Ciphertext>, PaillierError> {
        if cs.is_empty() {
            return Ok(Vec::new());
        }
        for c in cs {
            self.check(c)?;
        }
        let m = &self.inner.n_sq;
        let mut prefix = Vec::with_capacity(cs.len());
        let mut acc = BigUint::one();
        for c in cs {
            acc = (acc * &c.value) % m;
            prefix.push(acc.clone());
        }
        let mut inv = self.invert_raw(&acc)?;
        let mut out = vec![BigUint::zero(); cs.len()];
        for i in (0..cs.len()).rev() {
            if i == 0 {
                out[0] = inv.clone();
            } else {
                out[i] = (&inv * &prefix[i - 1]) % m;
                inv = (inv * &cs[i].value) % m;
            }
        }
        Ok(out.into_iter().map(|v| self.wrap(v)).collect())
    }

    /// Rebuilds a ciphertext from a raw residue, validating range and key.
    pub fn ciphertext_from_value(&self, value: BigUint) -> Result<Ciphertext, PaillierError> {
        if value >= self.inner.n_sq {
            return Err(PaillierError::MalformedCiphertext("value >= N^2"));
        }
        if value.is_zero() {
            return Err(PaillierError::MalformedCiphertext("zero is not a ciphertext"));
        }
        Ok(self.wrap(value))
    }

    /// Fixed-width encoding used inside protocol frames.
    pub fn write_fixed(&self, out: &mut Vec<u8>, c: &Ciphertext) {
        codec::put_biguint_fixed(out, &c.value, self.inner.ct_bytes);
    }

    pub fn read_fixed(&self, r: &mut Reader<'_>) -> Result<Ciphertext, PaillierError> {
        let v = r.biguint_fixed(self.inner.ct_bytes)?;
        self.ciphertext_from_value(v)
    }
}

/// `4-byte big-endian length || minimal big-endian value`.
pub fn serialize_ct(c: &Ciphertext) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + (c.value.bits() as usize).div_ceil(8));
    codec::put_biguint(&mut out, &c.value);
    out
}

pub fn deserialize_ct(pk: &PublicKey, bytes: &[u8]) -> Result<Ciphertext, PaillierError> {
    let mut r = Reader::new(bytes);
    let v = r.biguint()?;
    r.expect_end()?;
    pk.ciphertext_from_value(v)
}

fn key_id_of(n: &BigUint, g: &BigUint) -> KeyId {
    let mut h = Sha256::new();
    h.update(b"slq-paillier-pk");
    h.update(n.to_bytes_be());
    h.update(g.to_bytes_be());
    let digest = h.finalize();
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    id
}

/// `h = x^N mod N^2` with `x` expanded from a hash of `N`.
fn derive_fixed_base(n: &BigUint, n_sq: &BigUint) -> BigUint {
    let mut bytes = Vec::new();
    let mut counter = 0u32;
    while bytes.len() * 8 < n.bits() as usize + 128 {
        let mut h = Sha256::new();
        h.update(b"slq-paillier-base");
        h.update(counter.to_be_bytes());
        h.update(n.to_bytes_be());
        bytes.extend_from_slice(&h.finalize());
        counter += 1;
    }
    let mut x = BigUint::from_bytes_be(&bytes) % n;
    while x.is_zero() || !x.gcd(n).is_one() {
        x += 1u32;
    }
    x.modpow(n, n_sq)
}

#[derive(Clone)]
struct SecretInner {
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    p_sq: BigUint,
    q_sq: BigUint,
    p_minus_1: BigUint,
    q_minus_1: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

/// Public key plus the decryption trapdoor. Only the data owner and the
/// assisting server ever hold one.
#[derive(Clone)]
pub struct KeyPair {
    pub pk: PublicKey,
    sk: Arc<SecretInner>,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

impl KeyPair {
    fn from_primes(p: BigUint, q: BigUint) -> Result<Self, PaillierError> {
        let n = &p * &q;
        let pk = PublicKey::from_modulus(n.clone())?;
        let p_minus_1 = &p - 1u32;
        let q_minus_1 = &q - 1u32;
        let lambda = p_minus_1.lcm(&q_minus_1);
        let n_sq = pk.n_squared();
        let g_lambda = pk.g().modpow(&lambda, n_sq);
        let mu = l_function(&g_lambda, &n)
            .modinv(&n)
            .ok_or_else(|| PaillierError::BadKeyFile("lambda not invertible mod N".into()))?;
        let p_sq = &p * &p;
        let q_sq = &q * &q;
        let hp = l_function(&pk.g().modpow(&p_minus_1, &p_sq), &p)
            .modinv(&p)
            .ok_or_else(|| PaillierError::BadKeyFile("degenerate p".into()))?;
        let hq = l_function(&pk.g().modpow(&q_minus_1, &q_sq), &q)
            .modinv(&q)
            .ok_or_else(|| PaillierError::BadKeyFile("degenerate q".into()))?;
        let q_inv_p = (&q % &p)
            .modinv(&p)
            .ok_or_else(|| PaillierError::BadKeyFile("p and q not coprime".into()))?;
        Ok(Self {
            pk,
            sk: Arc::new(SecretInner {
                lambda,
                mu,
                p,
                q,
                p_sq,
                q_sq,
                p_minus_1,
                q_minus_1,
                hp,
                hq,
                q_inv_p,
            }),
        })
    }

    pub fn lambda(&self) -> &BigUint {
        &self.sk.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.sk.mu
    }

    fn decrypt_residue(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        if c.key_id != *self.pk.key_id() {
            return Err(PaillierError::KeyMismatch);
        }
        if &c.value >= self.pk.n_squared() {
            return Err(PaillierError::MalformedCiphertext("value >= N^2"));
        }
        let sk = &*self.sk;
        let cp = &c.value % &sk.p_sq;
        let cq = &c.value % &sk.q_sq;
        if (&cp % &sk.p).is_zero() || (&cq % &sk.q).is_zero() {
            return Err(PaillierError::MalformedCiphertext("not a unit mod N^2"));
        }
        let mp = (l_function(&cp.modpow(&sk.p_minus_1, &sk.p_sq), &sk.p) * &sk.hp) % &sk.p;
        let mq = (l_function(&cq.modpow(&sk.q_minus_1, &sk.q_sq), &sk.q) * &sk.hq) % &sk.q;
        // CRT: m = mq + q * ((mp - mq) * q^-1 mod p)
        let diff = ((&mp + &sk.p) - (&mq % &sk.p)) % &sk.p;
        let h = (diff * &sk.q_inv_p) % &sk.p;
        Ok(mq + h * &sk.q)
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigInt, PaillierError> {
        let residue = self.decrypt_residue(c)?;
        Ok(self.pk.encoding().decode(&residue))
    }

    pub fn decrypt_i128(&self, c: &Ciphertext) -> Result<i128, PaillierError> {
        self.decrypt(c)?
            .to_i128()
            .ok_or(PaillierError::PlaintextOutOfRange)
    }

    /// Textbook decryption `L(c^lambda mod N^2) * mu mod N`, kept as an
    /// independent route to cross-check the CRT path.
    pub fn decrypt_textbook(&self, c: &Ciphertext) -> Result<BigInt, PaillierError> {
        if c.key_id != *self.pk.key_id() {
            return Err(PaillierError::KeyMismatch);
        }
        let n = self.pk.n();
        let u = c.value.modpow(&self.sk.lambda, self.pk.n_squared());
        let residue = (l_function(&u, n) * &self.sk.mu) % n;
        Ok(self.pk.encoding().decode(&residue))
    }
}

pub fn keygen<R: RngCore + CryptoRng + ?Sized>(
    bits: u32,
    rng: &mut R,
) -> Result<KeyPair, PaillierError> {
    if !ALLOWED_KEY_BITS.contains(&bits) {
        return Err(PaillierError::UnsupportedKeyLength(bits));
    }
    loop {
        let p = random_prime(bits / 2, rng);
        let q = random_prime(bits / 2, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if n.bits() != bits as u64 || !n.gcd(&phi).is_one() {
            continue;
        }
        return KeyPair::from_primes(p, q);
    }
}

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

fn random_prime<R: RngCore + CryptoRng + ?Sized>(bits: u32, rng: &mut R) -> BigUint {
    loop {
        let mut cand = rng.gen_biguint(bits as u64);
        cand.set_bit(bits as u64 - 1, true);
        cand.set_bit(bits as u64 - 2, true);
        cand.set_bit(0, true);
        if is_probable_prime(&cand, MILLER_RABIN_ROUNDS, rng) {
            return cand;
        }
    }
}

pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    if n < &BigUint::from(2u32) {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let two = BigUint::from(2u32);
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

const KEY_MAGIC: &[u8; 4] = b"SLQK";
const KEY_VERSION: u8 = 1;
const KIND_PUBLIC: u8 = 0;
const KIND_SECRET: u8 = 1;

fn key_header(out: &mut Vec<u8>, kind: u8, pk: &PublicKey) {
    out.extend_from_slice(KEY_MAGIC);
    codec::put_u8(out, KEY_VERSION);
    codec::put_u8(out, kind);
    codec::put_u32(out, pk.bits());
    codec::put_biguint(out, pk.n());
    codec::put_biguint(out, pk.g());
}

/// `"SLQK" | version | kind=0 | bits | N | g`.
pub fn public_key_to_bytes(pk: &PublicKey) -> Vec<u8> {
    let mut out = Vec::new();
    key_header(&mut out, KIND_PUBLIC, pk);
    out
}

/// Public header followed by `lambda | mu | p | q`.
pub fn secret_key_to_bytes(kp: &KeyPair) -> Vec<u8> {
    let mut out = Vec::new();
    key_header(&mut out, KIND_SECRET, &kp.pk);
    codec::put_biguint(&mut out, &kp.sk.lambda);
    codec::put_biguint(&mut out, &kp.sk.mu);
    codec::put_biguint(&mut out, &kp.sk.p);
    codec::put_biguint(&mut out, &kp.sk.q);
    out
}

fn read_key_header(r: &mut Reader<'_>, want_kind: u8) -> Result<PublicKey, PaillierError> {
    if r.take(4)? != KEY_MAGIC {
        return Err(PaillierError::BadKeyFile("bad magic".into()));
    }
    let version = r.u8()?;
    if version != KEY_VERSION {
        return Err(PaillierError::BadKeyFile(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != want_kind {
        return Err(PaillierError::BadKeyFile(format!(
            "expected key kind {want_kind}, found {kind}"
        )));
    }
    let bits = r.u32()?;
    let n = r.biguint()?;
    let g = r.biguint()?;
    if n.bits() != bits as u64 {
        return Err(PaillierError::BadKeyFile("declared bits disagree with N".into()));
    }
    let pk = PublicKey::from_modulus(n)?;
    if &g != pk.g() {
        return Err(PaillierError::BadKeyFile("generator must be N + 1".into()));
    }
    Ok(pk)
}

pub fn public_key_from_bytes(bytes: &[u8]) -> Result<PublicKey, PaillierError> {
    let mut r = Reader::new(bytes);
    let pk = read_key_header(&mut r, KIND_PUBLIC)?;
    r.expect_end()?;
    Ok(pk)
}

pub fn secret_key_from_bytes(bytes: &[u8]) -> Result<KeyPair, PaillierError> {
    let mut r = Reader::new(bytes);
    let pk = read_key_header(&mut r, KIND_SECRET)?;
    let lambda = r.biguint()?;
    let mu = r.biguint()?;
    let p = r.biguint()?;
    let q = r.biguint()?;
    r.expect_end()?;
    if &(&p * &q) != pk.n() {
        return Err(PaillierError::BadKeyFile("p * q != N".into()));
    }
    let kp = KeyPair::from_primes(p, q)?;
    if kp.sk.lambda != lambda || kp.sk.mu != mu {
        return Err(PaillierError::BadKeyFile("lambda/mu inconsistent with p, q".into()));
    }
    Ok(kp)
}

#[cfg(test)]
pub(crate) mod test_keys {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    /// A shared 512-bit key so unit tests do not each pay for prime search.
    pub fn k512() -> &'static KeyPair {
        static KP: OnceLock<KeyPair> = OnceLock::new();
        KP.get_or_init(|| keygen(512, &mut ChaCha20Rng::seed_from_u64(0x51)).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::test_keys::k512;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn keygen_sizes_and_rejection() {
        let kp = k512();
        assert_eq!(kp.pk.n().bits(), 512);
        let p = &kp.sk.p;
        let q = &kp.sk.q;
        assert_ne!(p, q);
        assert_eq!(p.bits(), 256);
        let phi = (p - 1u32) * (q - 1u32);
        assert!(kp.pk.n().gcd(&phi).is_one());
        assert_eq!(
            keygen(768, &mut rng()).unwrap_err(),
            PaillierError::UnsupportedKeyLength(768)
        );
    }

    #[test]
    fn keygen_twice_gives_distinct_moduli() {
        let mut r = rng();
        let a = keygen(512, &mut r).unwrap();
        let b = keygen(512, &mut r).unwrap();
        assert_ne!(a.pk.n(), b.pk.n());
        assert_ne!(a.pk.key_id(), b.pk.key_id());
    }

    #[test]
    fn basic_encrypt_decrypt_cases() {
        let kp = k512();
        let mut r = rng();
        for m in [0i128, -5, 42, i64::MAX as i128, -(1i128 << 100)] {
            let c = kp.pk.encrypt_i128(m, &mut r).unwrap();
            assert_eq!(kp.decrypt_i128(&c).unwrap(), m);
            assert_eq!(kp.decrypt_textbook(&c).unwrap(), BigInt::from(m));
        }
        let a = kp.pk.encrypt_i128(42, &mut r).unwrap();
        let b = kp.pk.encrypt_i128(42, &mut r).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encryption_is_randomized() {
        let kp = k512();
        let mut r = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            assert!(seen.insert(kp.pk.encrypt_i128(9, &mut r).unwrap()));
        }
    }

    #[test]
    fn homomorphic_examples() {
        let kp = k512();
        let pk = &kp.pk;
        let mut r = rng();
        let e = |m: i128, r: &mut ChaCha20Rng| pk.encrypt_i128(m, r).unwrap();
        let d = |c: &Ciphertext| kp.decrypt_i128(c).unwrap();
        let (c3, c4) = (e(3, &mut r), e(4, &mut r));
        assert_eq!(d(&pk.add(&c3, &c4).unwrap()), 7);
        let x = e(11, &mut r);
        assert_eq!(d(&pk.add(&x, &e(0, &mut r)).unwrap()), 11);
        assert_eq!(d(&pk.add(&e(5, &mut r), &e(-5, &mut r)).unwrap()), 0);
        assert_eq!(d(&pk.scalar_mul_i128(&e(6, &mut r), 3).unwrap()), 18);
        assert_eq!(d(&pk.scalar_mul_i128(&x, 1).unwrap()), 11);
        assert_eq!(d(&pk.scalar_mul_i128(&x, 0).unwrap()), 0);
        // E(7)^-1 agrees with a fresh encryption of -7
        let neg = pk.scalar_mul_i128(&e(7, &mut r), -1).unwrap();
        assert_eq!(d(&neg), kp.decrypt_i128(&e(-7, &mut r)).unwrap());
        assert_eq!(d(&neg), -7);
        assert_eq!(d(&pk.sub(&c3, &c4).unwrap()), -1);
        assert_eq!(d(&pk.add_plain_i128(&c3, -10).unwrap()), -7);
    }

    #[test]
    fn batch_negate_matches_single() {
        let kp = k512();
        let mut r = rng();
        let cs: Vec<_> = (0..9)
            .map(|i| kp.pk.encrypt_i128(i * 13 - 40, &mut r).unwrap())
            .collect();
        let negs = kp.pk.batch_negate(&cs).unwrap();
        for (c, n) in cs.iter().zip(&negs) {
            assert_eq!(n, &kp.pk.negate(c).unwrap());
            assert_eq!(kp.decrypt_i128(n).unwrap(), -kp.decrypt_i128(c).unwrap());
        }
    }

    #[test]
    fn plaintext_domain_is_enforced() {
        let kp = k512();
        let half = kp.pk.encoding().half().clone();
        let over = BigInt::from(half.clone()) + 1;
        assert_eq!(
            kp.pk.encrypt(&over, &mut rng()).unwrap_err(),
            PaillierError::PlaintextOutOfRange
        );
        let edge = BigInt::from(half);
        let c = kp.pk.encrypt(&edge, &mut rng()).unwrap();
        assert_eq!(kp.decrypt(&c).unwrap(), edge);
        assert_eq!(kp.decrypt(&kp.pk.encrypt(&-&edge, &mut rng()).unwrap()).unwrap(), -edge);
    }

    #[test]
    fn decrypt_rejects_out_of_range_and_foreign_values() {
        let kp = k512();
        let bogus = Ciphertext {
            value: kp.pk.n_squared().clone(),
            key_id: *kp.pk.key_id(),
        };
        assert!(matches!(
            kp.decrypt(&bogus),
            Err(PaillierError::MalformedCiphertext(_))
        ));
        let foreign = Ciphertext {
            value: BigUint::from(5u8),
            key_id: [9; 16],
        };
        assert_eq!(kp.decrypt(&foreign).unwrap_err(), PaillierError::KeyMismatch);
        assert!(kp.pk.ciphertext_from_value(kp.pk.n_squared() + 1u32).is_err());
    }

    #[test]
    fn key_mismatch_on_hom_add() {
        let kp = k512();
        let other = keygen(512, &mut ChaCha20Rng::seed_from_u64(99)).unwrap();
        let a = kp.pk.encrypt_i128(1, &mut rng()).unwrap();
        let b = other.pk.encrypt_i128(1, &mut rng()).unwrap();
        assert_eq!(kp.pk.add(&a, &b).unwrap_err(), PaillierError::KeyMismatch);
    }

    #[test]
    fn ciphertext_serialization() {
        let kp = k512();
        let mut r = rng();
        let z = kp.pk.encrypt_i128(0, &mut r).unwrap();
        assert_eq!(deserialize_ct(&kp.pk, &serialize_ct(&z)).unwrap(), z);
        assert!(deserialize_ct(&kp.pk, &[]).is_err());
        let mut bytes = serialize_ct(&z);
        bytes.truncate(bytes.len() - 1);
        assert!(deserialize_ct(&kp.pk, &bytes).is_err());
        for _ in 0..100 {
            let c = kp.pk.encrypt_i128(r.gen::<i64>() as i128, &mut r).unwrap();
            assert_eq!(deserialize_ct(&kp.pk, &serialize_ct(&c)).unwrap(), c);
        }
    }

    #[test]
    fn key_files_roundtrip() {
        let kp = k512();
        let pub_bytes = public_key_to_bytes(&kp.pk);
        assert_eq!(&pub_bytes[..4], b"SLQK");
        assert_eq!(public_key_from_bytes(&pub_bytes).unwrap(), kp.pk);
        let sec = secret_key_from_bytes(&secret_key_to_bytes(kp)).unwrap();
        let c = kp.pk.encrypt_i128(-77, &mut rng()).unwrap();
        assert_eq!(sec.decrypt_i128(&c).unwrap(), -77);
        assert!(secret_key_from_bytes(&pub_bytes).is_err());
        let mut bad = pub_bytes.clone();
        bad[0] = b'X';
        assert!(public_key_from_bytes(&bad).is_err());
    }

    #[test]
    fn signed_encoding_fixed_point() {
        let enc = k512().pk.encoding().clone();
        let r = enc.encode_real(0.5).unwrap();
        assert_eq!(r, BigUint::from(32768u32));
        assert_eq!(enc.decode_real(&enc.encode_real(-1.25).unwrap()), -1.25);
    }

    #[test]
    fn miller_rabin_known_values() {
        let mut r = rng();
        assert!(is_probable_prime(&BigUint::from(2u32), 8, &mut r));
        assert!(is_probable_prime(&BigUint::from(1_000_000_007u64), 16, &mut r));
        assert!(!is_probable_prime(&BigUint::from(561u32), 16, &mut r)); // Carmichael
        assert!(!is_probable_prime(&BigUint::from(1_000_000_007u64 * 998_244_353), 16, &mut r));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn signed_decode_inverts_encode(x in any::<i128>()) {
            let enc = k512().pk.encoding();
            let m = BigInt::from(x);
            prop_assert_eq!(enc.decode(&enc.encode(&m).unwrap()), m);
        }

        #[test]
        fn hom_add_and_scalar_mul_are_exact(a in -(1i64<<60)..(1i64<<60), b in -(1i64<<60)..(1i64<<60), seed in any::<u64>()) {
            let kp = k512();
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            let ca = kp.pk.encrypt_i128(a as i128, &mut r).unwrap();
            let cb = kp.pk.encrypt_i128(b as i128, &mut r).unwrap();
            prop_assert_eq!(kp.decrypt_i128(&kp.pk.add(&ca, &cb).unwrap()).unwrap(), a as i128 + b as i128);
            prop_assert_eq!(kp.decrypt_i128(&kp.pk.scalar_mul_i128(&ca, b as i128).unwrap()).unwrap(), a as i128 * b as i128);
        }
    }
}
