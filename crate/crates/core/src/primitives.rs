//! Two-party building blocks: blinding PRF, permutations, bit-field packing
//! and the batched secure comparison / multiplication family.
//!
//! Every batched call costs exactly one round trip per phase and its message
//! shapes depend only on the batch sizes, never on the plaintexts.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, PublicKey};
use crate::transport::message::{MulGroup, Request, Response};
use crate::transport::Session;

/// Statistical blinding parameter in bits.
pub const BLIND_BITS: u64 = 40;
/// Declared magnitude bound for rank-space values.
pub const RANK_BOUND_BITS: u64 = 40;
pub const SIC_R_MIN: i128 = 1 << 20;
pub const SIC_R_MAX: i128 = 1 << 40;

/// Keyed pseudo-random function `f(counter)` over SHA-256 and ChaCha20.
#[derive(Clone)]
pub struct Prf {
    key: [u8; 32],
}

impl Prf {
    pub fn new(key: [u8; 32]) -> Self {
        Self { key }
    }

    pub fn stream(&self, counter: u64) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(counter.to_be_bytes());
        ChaCha20Rng::from_seed(h.finalize().into())
    }

    /// Uniform in `[1, bound]`; `bound` must be positive and fit in `i128`.
    pub fn scalar(&self, counter: u64, bound: u128) -> i128 {
        assert!(bound >= 1 && bound <= i128::MAX as u128, "prf bound out of range");
        self.stream(counter).gen_range(1..=bound) as i128
    }
}

pub fn prf_scalar(seed: &[u8; 32], counter: u64, bound: i128) -> Result<i128> {
    if bound <= 0 {
        return Err(Error::InvalidInput(format!("prf bound {bound} must be positive")));
    }
    Ok(Prf::new(*seed).scalar(counter, bound as u128))
}

/// A bijection on `0..len`; applying it yields `out[i] = items[map[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Self {
            map: (0..len).collect(),
            inverse: (0..len).collect(),
        }
    }

    /// From one-based notation, e.g. `(5,4,3,2,1)` reverses five items.
    pub fn from_one_based(map: &[usize]) -> Result<Self> {
        let mut inverse = vec![usize::MAX; map.len()];
        for (i, &m) in map.iter().enumerate() {
            if m == 0 || m > map.len() || inverse[m - 1] != usize::MAX {
                return Err(Error::InvalidInput(format!("{map:?} is not a permutation")));
            }
            inverse[m - 1] = i;
        }
        Ok(Self {
            map: map.iter().map(|m| m - 1).collect(),
            inverse,
        })
    }

    pub fn random<R: RngCore + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            let j = rng.gen_range(0..=i);
            map.swap(i, j);
        }
        let mut inverse = vec![0; len];
        for (i, &m) in map.iter().enumerate() {
            inverse[m] = i;
        }
        Self { map, inverse }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Source index of output position `i`.
    pub fn source(&self, i: usize) -> usize {
        self.map[i]
    }

    /// Output position that item `j` moves to.
    pub fn target(&self, j: usize) -> usize {
        self.inverse[j]
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.map.len() {
            return Err(Error::DimensionMismatch {
                expected: self.map.len(),
                got: n,
            });
        }
        Ok(())
    }

    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        self.check(items.len())?;
        Ok(self.map.iter().map(|&m| items[m].clone()).collect())
    }

    pub fn invert_apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        self.check(items.len())?;
        Ok(self.inverse.iter().map(|&i| items[i].clone()).collect())
    }
}

/// `<x_1|...|x_λ> = Σ x_i 2^{σ(λ-i)}`: slot 1 is most significant.
pub fn pack(slots: &[u64], sigma: u32) -> Result<BigUint> {
    if sigma == 0 || sigma > 64 {
        return Err(Error::InvalidInput(format!("slot width {sigma} not in 1..=64")));
    }
    let mut acc = BigUint::zero();
    for &x in slots {
        if sigma < 64 && x >> sigma != 0 {
            return Err(Error::BoundExceeded(format!("{x} does not fit {sigma} bits")));
        }
        acc = (acc << sigma) | BigUint::from(x);
    }
    Ok(acc)
}

pub fn unpack(nu: &BigUint, sigma: u32, lambda: usize) -> Result<Vec<u64>> {
    if sigma == 0 || sigma > 64 {
        return Err(Error::InvalidInput(format!("slot width {sigma} not in 1..=64")));
    }
    if nu.bits() > sigma as u64 * lambda as u64 {
        return Err(Error::BoundExceeded("packed value wider than its slots".into()));
    }
    let mask = if sigma == 64 { u64::MAX } else { (1u64 << sigma) - 1 };
    let mut out = vec![0u64; lambda];
    let mut v = nu.clone();
    for slot in out.iter_mut().rev() {
        *slot = (&v & BigUint::from(mask)).to_u64().unwrap();
        v >>= sigma;
    }
    Ok(out)
}

/// Homomorphic packing by Horner's rule: `acc <- acc^{2^σ} · E(x_i)`.
pub fn pack_ciphertexts(pk: &PublicKey, cts: &[Ciphertext], sigma: u32) -> Result<Ciphertext> {
    let shift = BigInt::one() << sigma;
    let mut it = cts.iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::InvalidInput("nothing to pack".into()))?
        .clone();
    for c in it {
        acc = pk.add(&pk.scalar_mul(&acc, &shift)?, c)?;
    }
    Ok(acc)
}

/// Slots that fit one ciphertext at width `sigma`.
pub fn slots_per_ciphertext(pk: &PublicKey, sigma: u32) -> usize {
    (pk.plaintext_bits() / sigma as u64) as usize
}

/// Nearest-integer division by `2^shift`, halves rounded up.
pub fn round_div_pow2(v: &BigInt, shift: u32) -> BigInt {
    if shift == 0 {
        return v.clone();
    }
    let d = BigInt::one() << shift;
    let half: BigInt = &d >> 1u32;
    Integer::div_floor(&(v + half), &d)
}

/// Nearest-integer division, halves rounded up.
pub fn round_div(v: i128, d: i128) -> i128 {
    debug_assert!(d > 0);
    (v + d / 2).div_euclid(d)
}

fn random_in_bits<R: RngCore + ?Sized>(rng: &mut R, bits: u64) -> BigInt {
    let lo = BigUint::one() << bits;
    let hi = BigUint::one() << (bits + 1);
    BigInt::from(rng.gen_biguint_range(&lo, &hi))
}

/// Secure comparison: each result decrypts to 1 iff `a <= b`.
///
/// The DSP sends `±(r(2(b-a)+1) + r')` with a secret coin for the sign,
/// `r ∈ [2^20, 2^40]` and `0 <= r' < r`; the DAP answers with an encrypted
/// sign bit, which the DSP flips back when the coin was set.
pub fn sic_batch(sess: &mut Session, pairs: &[(Ciphertext, Ciphertext)]) -> Result<Vec<Ciphertext>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let pk = sess.pk().clone();
    let mut coins = Vec::with_capacity(pairs.len());
    let mut pos = Vec::with_capacity(pairs.len());
    let mut neg = Vec::with_capacity(pairs.len());
    let mut offsets = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let rng = sess.rng();
        let coin: bool = rng.gen();
        let r = rng.gen_range(SIC_R_MIN..=SIC_R_MAX);
        let r2 = rng.gen_range(0..r);
        let (p, n) = if coin { (a, b) } else { (b, a) };
        pos.push(pk.scalar_mul_i128(p, 2 * r)?);
        neg.push(pk.scalar_mul_i128(n, 2 * r)?);
        offsets.push(if coin { -(r + r2) } else { r + r2 });
        coins.push(coin);
    }
    let neg = pk.batch_negate(&neg)?;
    let blinded = pos
        .iter()
        .zip(&neg)
        .zip(&offsets)
        .map(|((p, n), off)| pk.add_plain_i128(&pk.add(p, n)?, *off).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    sess.count_sic(pairs.len());
    let bits = match sess.call(Request::Sic(blinded))? {
        Response::Bits(b) if b.len() == pairs.len() => b,
        other => return Err(unexpected("SIC", &other)),
    };
    let flip_idx: Vec<usize> = (0..bits.len()).filter(|&i| coins[i]).collect();
    let flipped = pk.batch_negate(&flip_idx.iter().map(|&i| bits[i].clone()).collect::<Vec<_>>())?;
    let mut out = bits;
    for (k, &i) in flip_idx.iter().enumerate() {
        out[i] = pk.add_plain_i128(&flipped[k], 1)?;
    }
    Ok(out)
}

pub fn sic(sess: &mut Session, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    Ok(sic_batch(sess, &[(a.clone(), b.clone())])?.remove(0))
}

/// Secure multiplication with one shared multiplier per group:
/// `out[g][k] = E(x_g · y_{g,k})`.
///
/// The DAP decrypts only the masked multiplier `x + r_x` and raises each
/// masked multiplicand `E(y + r_y)` to it; the DSP strips
/// `x·r_y + y·r_x + r_x·r_y` afterwards. `x_bits` and `y_bits` bound the
/// operand magnitudes.
pub fn sm_grouped(
    sess: &mut Session,
    groups: &[(Ciphertext, Vec<Ciphertext>)],
    x_bits: u64,
    y_bits: u64,
) -> Result<Vec<Vec<Ciphertext>>> {
    if groups.is_empty() {
        return Ok(Vec::new());
    }
    let pk = sess.pk().clone();
    if x_bits + y_bits + 2 * BLIND_BITS + 4 >= pk.plaintext_bits() {
        return Err(Error::BoundExceeded(format!(
            "product of {x_bits}-bit and {y_bits}-bit operands does not fit a {}-bit key",
            pk.bits()
        )));
    }
    let mut msg = Vec::with_capacity(groups.len());
    let mut corrections = Vec::new();
    let mut total = 0;
    for (x, ys) in groups {
        let rx = random_in_bits(sess.rng(), x_bits + BLIND_BITS);
        let mut masked = Vec::with_capacity(ys.len());
        for y in ys {
            let ry = random_in_bits(sess.rng(), y_bits + BLIND_BITS);
            masked.push(pk.add_plain(y, &ry)?);
            let cross = pk.multi_exp(&[
                (x, ry.magnitude()),
                (y, rx.magnitude()),
            ])?;
            corrections.push(pk.add_plain(&cross, &(&rx * &ry))?);
        }
        total += ys.len();
        msg.push(MulGroup {
            x: pk.add_plain(x, &rx)?,
            ys: masked,
        });
    }
    sess.count_sm(total);
    let products = match sess.call(Request::Mul(msg))? {
        Response::Products(p)
            if p.len() == groups.len()
                && p.iter().zip(groups).all(|(a, (_, ys))| a.len() == ys.len()) =>
        {
            p
        }
        other => return Err(unexpected("MUL", &other)),
    };
    let inv = pk.batch_negate(&corrections)?;
    let mut k = 0;
    let mut out = Vec::with_capacity(groups.len());
    for row in products {
        let mut r = Vec::with_capacity(row.len());
        for p in row {
            r.push(pk.add(&p, &inv[k])?);
            k += 1;
        }
        out.push(r);
    }
    Ok(out)
}

/// Elementwise secure multiplication of pairs.
pub fn sm_batch(
    sess: &mut Session,
    pairs: &[(Ciphertext, Ciphertext)],
    x_bits: u64,
    y_bits: u64,
) -> Result<Vec<Ciphertext>> {
    let groups: Vec<_> = pairs
        .iter()
        .map(|(x, y)| (x.clone(), vec![y.clone()]))
        .collect();
    Ok(sm_grouped(sess, &groups, x_bits, y_bits)?
        .into_iter()
        .map(|mut g| g.remove(0))
        .collect())
}

pub fn sm(sess: &mut Session, x: &Ciphertext, y: &Ciphertext, bits: u64) -> Result<Ciphertext> {
    Ok(sm_batch(sess, &[(x.clone(), y.clone())], bits, bits)?.remove(0))
}

/// `SReLU(E(x)) = SM(SIC(E(0), E(x)), E(x))`, branch free.
pub fn srelu_batch(sess: &mut Session, xs: &[Ciphertext], bits: u64) -> Result<Vec<Ciphertext>> {
    let zero = sess.pk().encrypt_trivial(&BigInt::zero())?;
    let pairs: Vec<_> = xs.iter().map(|x| (zero.clone(), x.clone())).collect();
    let signs = sic_batch(sess, &pairs)?;
    let pairs: Vec<_> = signs.into_iter().zip(xs.iter().cloned()).collect();
    sm_batch(sess, &pairs, 1, bits)
}

pub fn srelu(sess: &mut Session, x: &Ciphertext, bits: u64) -> Result<Ciphertext> {
    Ok(srelu_batch(sess, std::slice::from_ref(x), bits)?.remove(0))
}

/// Secure point-in-range test for many points against one closed box.
/// Runs `2d` comparisons per point in one round, then ANDs the bits with
/// a multiplication tree (`⌈log2 2d⌉` rounds).
pub fn sqp_batch(
    sess: &mut Session,
    points: &[&[Ciphertext]],
    lo: &[Ciphertext],
    hi: &[Ciphertext],
) -> Result<Vec<Ciphertext>> {
    let d = lo.len();
    if hi.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: hi.len(),
        });
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::with_capacity(points.len() * 2 * d);
    for p in points {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        for j in 0..d {
            pairs.push((lo[j].clone(), p[j].clone()));
            pairs.push((p[j].clone(), hi[j].clone()));
        }
    }
    let bits = sic_batch(sess, &pairs)?;
    let mut layers: Vec<Vec<Ciphertext>> = bits.chunks(2 * d).map(<[_]>::to_vec).collect();
    while layers[0].len() > 1 {
        let mut pairs = Vec::new();
        for l in &layers {
            for c in l.chunks(2) {
                if c.len() == 2 {
                    pairs.push((c[0].clone(), c[1].clone()));
                }
            }
        }
        let mut prods = sm_batch(sess, &pairs, 1, 1)?.into_iter();
        for l in layers.iter_mut() {
            let odd = (l.len() % 2 == 1).then(|| l[l.len() - 1].clone());
            let mut next: Vec<_> = prods.by_ref().take(l.len() / 2).collect();
            next.extend(odd);
            *l = next;
        }
    }
    Ok(layers.into_iter().map(|mut l| l.remove(0)).collect())
}

pub fn sqp(
    sess: &mut Session,
    p: &[Ciphertext],
    lo: &[Ciphertext],
    hi: &[Ciphertext],
) -> Result<Ciphertext> {
    Ok(sqp_batch(sess, &[p], lo, hi)?.remove(0))
}

/// Draws a PRF-uniform dummy id in `[lo, hi]` and encrypts it.
pub fn srand(sess: &mut Session, lo: i128, hi: i128) -> Result<Ciphertext> {
    if lo < 1 || hi < lo {
        return Err(Error::InvalidInput(format!("empty id range [{lo}, {hi}]")));
    }
    let u = sess.blind_range(lo, hi);
    let pk = sess.pk().clone();
    Ok(pk.encrypt_i128(u, sess.rng())?)
}

pub(crate) fn unexpected(what: &str, got: &Response) -> Error {
    let kind = match got {
        Response::Error(m) => return Error::Remote(m.clone()),
        Response::Bits(v) => format!("{} bits", v.len()),
        Response::Products(v) => format!("{} product groups", v.len()),
        other => format!("{other:?}").chars().take(40).collect(),
    };
    Error::Format(format!("malformed {what} reply: {kind}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::test_keys::k512;
    use crate::transport::{DapConfig, DapService};
    use proptest::prelude::*;

    pub(crate) fn local_session(seed: u8) -> (DapService, Session) {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([seed; 32]));
        let s = Session::local(&svc, &[seed.wrapping_add(1); 32]).unwrap();
        (svc, s)
    }

    fn enc(s: &mut Session, v: i128) -> Ciphertext {
        let pk = s.pk().clone();
        pk.encrypt_i128(v, s.rng()).unwrap()
    }

    fn dec(c: &Ciphertext) -> i128 {
        k512().decrypt_i128(c).unwrap()
    }

    #[test]
    fn table_three_packing() {
        assert_eq!(pack(&[0, 0, 1, 0, 1], 2).unwrap(), BigUint::from(17u32));
        assert_eq!(pack(&[0; 5], 2).unwrap(), BigUint::zero());
        assert_eq!(unpack(&BigUint::from(17u32), 2, 5).unwrap(), vec![0, 0, 1, 0, 1]);
        assert!(pack(&[4], 2).is_err());
        assert!(unpack(&BigUint::from(1u32 << 10), 2, 5).is_err());
    }

    #[test]
    fn table_three_permutation() {
        let pi = Permutation::from_one_based(&[5, 4, 3, 2, 1]).unwrap();
        assert_eq!(pi.apply(&[1, 0, 1, 0, 0]).unwrap(), vec![0, 0, 1, 0, 1]);
        assert_eq!(pi.invert_apply(&[0, 0, 1, 0, 1]).unwrap(), vec![1, 0, 1, 0, 0]);
        let id = Permutation::identity(3);
        assert_eq!(id.apply(&[7, 8, 9]).unwrap(), vec![7, 8, 9]);
        assert!(Permutation::from_one_based(&[1, 1]).is_err());
        assert!(pi.apply(&[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn pack_roundtrip(sigma in 1u32..=64, xs in proptest::collection::vec(any::<u64>(), 0..12)) {
            let xs: Vec<u64> = xs.into_iter()
                .map(|x| if sigma == 64 { x } else { x & ((1u64 << sigma) - 1) })
                .collect();
            let nu = pack(&xs, sigma).unwrap();
            prop_assert_eq!(unpack(&nu, sigma, xs.len()).unwrap(), xs);
        }

        #[test]
        fn permutation_roundtrip(seed in any::<u64>(), len in 0usize..40) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let pi = Permutation::random(len, &mut rng);
            let xs: Vec<usize> = (0..len).map(|i| i * 3 + 1).collect();
            let y = pi.apply(&xs).unwrap();
            prop_assert_eq!(pi.invert_apply(&y).unwrap(), xs);
        }
    }

    #[test]
    fn prf_is_deterministic_and_rejects_bad_bounds() {
        let seed = [7u8; 32];
        assert_eq!(prf_scalar(&seed, 3, 100).unwrap(), prf_scalar(&seed, 3, 100).unwrap());
        let a: Vec<_> = (0..8).map(|c| prf_scalar(&seed, c, 1 << 40).unwrap()).collect();
        let distinct: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 8);
        assert!(prf_scalar(&seed, 0, 0).is_err());
        assert!(prf_scalar(&seed, 0, -3).is_err());
    }

    #[test]
    fn prf_chi_square_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let prf = Prf::new([42; 32]);
        let mut counts = [0u32; 256];
        for c in 0..10_000 {
            counts[(prf.scalar(c, 256) - 1) as usize] += 1;
        }
        let expected = 10_000.0 / 256.0;
        let chi: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(chi);
        assert!(p > 0.01, "chi2 {chi} p {p}");
    }

    #[test]
    fn homomorphic_packing_matches_plain() {
        let (_svc, mut s) = local_session(1);
        let cts: Vec<_> = [0, 0, 1, 0, 1].iter().map(|&v| enc(&mut s, v)).collect();
        let nu = pack_ciphertexts(s.pk(), &cts, 2).unwrap();
        assert_eq!(dec(&nu), 17);
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(round_div(7, 2), 4);
        assert_eq!(round_div(-7, 2), -3);
        assert_eq!(round_div(5, 4), 1);
        assert_eq!(round_div_pow2(&BigInt::from(6), 2), BigInt::from(2));
        assert_eq!(round_div_pow2(&BigInt::from(-6), 2), BigInt::from(-1));
        assert_eq!(round_div_pow2(&BigInt::from(5), 0), BigInt::from(5));
    }

    #[test]
    fn sic_fixed_cases() {
        let (_svc, mut s) = local_session(2);
        let a = enc(&mut s, 0);
        let b = enc(&mut s, 5);
        let pairs = vec![(a.clone(), b.clone()), (b.clone(), a.clone()), (a.clone(), a)];
        let out = sic_batch(&mut s, &pairs).unwrap();
        assert_eq!(out.iter().map(dec).collect::<Vec<_>>(), vec![1, 0, 1]);
    }

    #[test]
    fn sm_fixed_cases() {
        let (_svc, mut s) = local_session(3);
        let zero = enc(&mut s, 0);
        let one = enc(&mut s, 1);
        let nine = enc(&mut s, 9);
        let neg = enc(&mut s, -12);
        let out = sm_batch(
            &mut s,
            &[(zero, nine.clone()), (one, nine.clone()), (neg, nine)],
            8,
            8,
        )
        .unwrap();
        assert_eq!(out.iter().map(dec).collect::<Vec<_>>(), vec![0, 9, -108]);
    }

    #[test]
    fn srelu_cases_and_shape() {
        let mut shapes = Vec::new();
        for x in [-3, 0, 7] {
            let (_svc, mut s) = local_session(4);
            let c = enc(&mut s, x);
            let before = s.transcript().len();
            let r = srelu(&mut s, &c, 8).unwrap();
            assert_eq!(dec(&r), x.max(0));
            let t = s.transcript().since(before);
            shapes.push(t);
        }
        assert_eq!(shapes[0], shapes[1]);
        assert_eq!(shapes[1], shapes[2]);
    }

    #[test]
    fn sqp_cases() {
        let (_svc, mut s) = local_session(5);
        let lo = vec![enc(&mut s, 0), enc(&mut s, 0)];
        let hi = vec![enc(&mut s, 10), enc(&mut s, 10)];
        let inside = vec![enc(&mut s, 5), enc(&mut s, 5)];
        let out = vec![enc(&mut s, 5), enc(&mut s, 11)];
        let edge = vec![enc(&mut s, 10), enc(&mut s, 0)];
        let r = sqp_batch(&mut s, &[&inside, &out, &edge], &lo, &hi).unwrap();
        assert_eq!(r.iter().map(dec).collect::<Vec<_>>(), vec![1, 0, 1]);
        assert!(sqp_batch(&mut s, &[&inside[..1]], &lo, &hi).is_err());
    }

    #[test]
    fn srand_range() {
        let (_svc, mut s) = local_session(6);
        assert_eq!(dec(&srand(&mut s, 1, 1).unwrap()), 1);
        for _ in 0..20 {
            let v = dec(&srand(&mut s, 3, 9).unwrap());
            assert!((3..=9).contains(&v));
        }
        assert!(srand(&mut s, 5, 4).is_err());
    }
}
