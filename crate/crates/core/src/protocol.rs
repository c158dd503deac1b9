//! DSP side of the query protocols: bucket prediction (SBP), point
//! extraction (SPE), the range query itself (SLQ) and the masked result
//! return. Every protocol runs over one [`Session`] with the DAP.

use num_bigint::BigInt;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::index::{DspIndex, DspNode};
use crate::paillier::{Ciphertext, PublicKey};
use crate::predictor::{eval_smlp_c, eval_smlp_p, select_leaf_fuzzy, SmlpC};
use crate::primitives::{
    pack_ciphertexts, slots_per_ciphertext, sqp_batch, unexpected, Permutation, RANK_BOUND_BITS,
    SIC_R_MIN, SIC_R_MAX,
};
use crate::spatial::RankSpace;
use crate::transport::{Request, Response, Session, Token};

/// Upper bound of the additive blinds and perturbations.
pub const BLIND_BITS: u32 = 40;
/// Magnitude of the offsets that push dead and decoy slots off any match.
pub const OFFSET_BITS: u32 = 80;
/// Shared MBR/query offset in SPE; packed slots must stay within 64 bits.
pub const MBR_OFFSET_BITS: u32 = 60;
const _: () = assert!(RANK_BOUND_BITS < MBR_OFFSET_BITS as u64);
/// Result masks are wide enough to hide a rank value statistically.
pub const MASK_BITS: u32 = 80;
/// Slot width when packing indicator bits.
pub const MARK_SIGMA: u32 = 2;

/// Encrypted query rectangle in rank space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncRangeQuery {
    pub lo: Vec<Ciphertext>,
    pub hi: Vec<Ciphertext>,
}

impl EncRangeQuery {
    pub fn dims(&self) -> usize {
        self.lo.len()
    }
}

/// Maps a plaintext rectangle into rank space. A dimension with no value
/// inside the rectangle gives the canonical empty query `lo = 1, hi = 0`.
pub fn rank_rect(ranks: &RankSpace, lo: &[f64], hi: &[f64]) -> Result<(Vec<u64>, Vec<u64>)> {
    if lo.len() != hi.len() {
        return Err(Error::DimensionMismatch {
            expected: lo.len(),
            got: hi.len(),
        });
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidInput("query rectangle needs lo <= hi in every dimension".into()));
    }
    Ok(ranks
        .map_rect(lo, hi)?
        .unwrap_or_else(|| (vec![1; lo.len()], vec![0; lo.len()])))
}

/// Client-side trapdoor: rank mapping followed by encryption.
pub fn trapdoor<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    ranks: &RankSpace,
    lo: &[f64],
    hi: &[f64],
    rng: &mut R,
) -> Result<EncRangeQuery> {
    let (l, h) = rank_rect(ranks, lo, hi)?;
    encrypt_rect(pk, &l, &h, rng)
}

pub fn encrypt_rect<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    lo: &[u64],
    hi: &[u64],
    rng: &mut R,
) -> Result<EncRangeQuery> {
    let mut enc = |v: &u64| pk.encrypt_i128(*v as i128, &mut *rng).map_err(Error::from);
    Ok(EncRangeQuery {
        lo: lo.iter().map(&mut enc).collect::<Result<_>>()?,
        hi: hi.iter().map(&mut enc).collect::<Result<_>>()?,
    })
}

/// Result of secure bucket prediction for one point.
#[derive(Clone, Debug)]
pub struct SbpOutcome {
    /// Leaf output at scale `S²`, before blinding.
    pub pred: Ciphertext,
    /// The selected leaf's encrypted error bound.
    pub err_max: Ciphertext,
    pub found: bool,
}

fn check_point(idx: &DspIndex, x: &[Ciphertext]) -> Result<()> {
    if x.len() != idx.meta.d {
        return Err(Error::DimensionMismatch {
            expected: idx.meta.d,
            got: x.len(),
        });
    }
    Ok(())
}

/// Walks the routing predictors and returns the (possibly obliviously
/// selected) leaf predictor.
fn descend(sess: &mut Session, idx: &DspIndex, x: &[Ciphertext]) -> Result<SmlpC> {
    let mut node = 0;
    loop {
        match &idx.nodes[node] {
            DspNode::Leaf { pred, .. } => return Ok(pred.clone()),
            DspNode::Router {
                pred,
                children,
                fuzzy,
                ..
            } => {
                let label = eval_smlp_p(sess, pred, x)?;
                match fuzzy {
                    Some(table) => {
                        let leaves = children
                            .iter()
                            .map(|&c| match &idx.nodes[c] {
                                DspNode::Leaf { pred, .. } => Ok(pred),
                                DspNode::Router { .. } => {
                                    Err(Error::Format("fuzzy router with a non-leaf child".into()))
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        return select_leaf_fuzzy(sess, table, label, &leaves);
                    }
                    None => node = children[label - 1],
                }
            }
        }
    }
}

fn bucket_range(idx: &DspIndex) -> Result<i128> {
    match idx.buckets.len() {
        0 => Err(Error::InvalidInput("index holds no buckets".into())),
        n => Ok(n as i128),
    }
}

/// Secure bucket prediction. The DAP sees the real and a random bucket id
/// (blinded and shuffled), then zero-tests blinded differences between the
/// query and the slots of both buckets. `found` is true only for a live
/// slot of the predicted bucket.
pub fn sbp(sess: &mut Session, idx: &DspIndex, x: &[Ciphertext]) -> Result<SbpOutcome> {
    check_point(idx, x)?;
    let pk = sess.pk().clone();
    let nb = bucket_range(idx)?;
    let leaf = descend(sess, idx, x)?;
    let pred = eval_smlp_c(sess, &leaf, x)?;
    let shift = 2 * idx.meta.leaf_scale_bits;
    let scale = BigInt::from(1) << shift;

    let decoy_id = sess.blind_range(1, nb);
    let decoy = pk.encrypt_i128(decoy_id, sess.rng())?;
    let r1 = sess.blind(1u128 << BLIND_BITS);
    let r1_scaled = BigInt::from(r1) << shift;
    let blinded = vec![
        pk.add_plain(&pred, &r1_scaled)?,
        pk.add_plain(&pk.scalar_mul(&decoy, &scale)?, &r1_scaled)?,
    ];
    let ids = match sess.call(Request::SbpIds { shift, items: blinded })? {
        Response::Ids(v) if v.len() == 2 => v,
        other => return Err(unexpected("SBP_IDS", &other)),
    };
    let mut ids: Vec<i128> = ids.iter().map(|v| (v - r1).clamp(1, nb)).collect();
    if ids[0] == decoy_id {
        ids.swap(0, 1);
    }

    // z = r·(slot − x) + dead·s per coordinate: zero exactly on a live match
    let d = idx.meta.d;
    let one = pk.encrypt_trivial(&BigInt::from(1))?;
    let neg_x = pk.batch_negate(x)?;
    let mut pooled: Vec<Vec<Ciphertext>> = Vec::with_capacity(2 * idx.meta.b);
    for (k, &id) in ids.iter().enumerate() {
        let bucket = &idx.buckets[(id - 1) as usize];
        for (slot, live) in bucket.slots.iter().zip(&bucket.bitmap) {
            let dead = if k == 0 { pk.sub(&one, live)? } else { one.clone() };
            let mut z = Vec::with_capacity(d);
            for (c, nx) in slot.iter().zip(&neg_x) {
                let r = sess.blind_range(SIC_R_MIN, SIC_R_MAX);
                let s = sess.blind(1u128 << OFFSET_BITS) * if sess.rng().gen() { 1 } else { -1 };
                let diff = pk.scalar_mul_i128(&pk.add(c, nx)?, r)?;
                z.push(pk.add(&diff, &pk.scalar_mul_i128(&dead, s)?)?);
            }
            pooled.push(z);
        }
    }
    let pi = Permutation::random(pooled.len(), sess.rng());
    let points: Vec<Ciphertext> = pi.apply(&pooled)?.into_iter().flatten().collect();
    let query = (0..d)
        .map(|_| pk.encrypt_i128(0, sess.rng()).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let found = match sess.call(Request::SbpMatch {
        dims: d as u32,
        query,
        points,
    })? {
        Response::Found(f) => f,
        other => return Err(unexpected("SBP_MATCH", &other)),
    };
    Ok(SbpOutcome {
        pred,
        err_max: leaf.err_max,
        found,
    })
}

/// What the DSP learned while running one query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryTrace {
    pub found: [bool; 2],
    /// Scanned bucket ids (1-based, inclusive).
    pub beta_low: usize,
    pub beta_upp: usize,
    /// Buckets whose MBR intersected the query.
    pub hit_buckets: usize,
    pub candidates: usize,
    pub results: usize,
}

impl QueryTrace {
    pub fn scan_width(&self) -> usize {
        self.beta_upp + 1 - self.beta_low
    }
}

fn perturb(pk: &PublicKey, cts: &[Ciphertext], noise: &[i128]) -> Result<Vec<Ciphertext>> {
    cts.iter()
        .zip(noise)
        .map(|(c, &r)| pk.add_plain_i128(c, r).map_err(Error::from))
        .collect()
}

/// Removes per-slot noise from items the DAP selected with one-hot rows:
/// `Θ = Π_j U[j]^{r_j}` is the encrypted noise of the selected entry.
fn strip_selected(
    pk: &PublicKey,
    selectors: &[Ciphertext],
    width: usize,
    items: &[Ciphertext],
    block: usize,
    noise: &[Vec<i128>],
) -> Result<Vec<Vec<Ciphertext>>> {
    if width == 0 || selectors.len() % width != 0 || items.len() != selectors.len() / width * block {
        return Err(Error::Format("selector and item counts disagree".into()));
    }
    let mut out = Vec::with_capacity(selectors.len() / width);
    for (sel, blk) in selectors.chunks(width).zip(items.chunks(block)) {
        let mut entry = Vec::with_capacity(block);
        for (slot, item) in blk.iter().enumerate() {
            let neg: Vec<BigInt> = noise.iter().map(|r| BigInt::from(-r[slot])).collect();
            let mut theta = pk.encrypt_trivial(&BigInt::from(0))?;
            for (u, e) in sel.iter().zip(&neg) {
                theta = pk.add(&theta, &pk.scalar_mul(u, e)?)?;
            }
            entry.push(pk.add(item, &theta)?);
        }
        out.push(entry);
    }
    Ok(out)
}

/// Secure point extraction: predicts both corners, widens unmatched
/// corners by the leaf error bound, then lets the DAP filter the scanned
/// buckets by MBR. Returns candidate points (`d` ciphertexts each).
pub fn spe(
    sess: &mut Session,
    idx: &DspIndex,
    q: &EncRangeQuery,
) -> Result<(Vec<Vec<Ciphertext>>, QueryTrace)> {
    check_point(idx, &q.lo)?;
    check_point(idx, &q.hi)?;
    let pk = sess.pk().clone();
    let nb = bucket_range(idx)?;
    let (d, b) = (idx.meta.d, idx.meta.b);
    let shift = 2 * idx.meta.leaf_scale_bits;
    let scale = BigInt::from(1) << shift;

    let low = sbp(sess, idx, &q.lo)?;
    let upp = sbp(sess, idx, &q.hi)?;
    let widen = |o: &SbpOutcome, sign: i32| -> Result<Ciphertext> {
        if o.found {
            return Ok(o.pred.clone());
        }
        let e = pk.scalar_mul(&o.err_max, &scale)?;
        Ok(if sign < 0 { pk.sub(&o.pred, &e)? } else { pk.add(&o.pred, &e)? })
    };
    let beta = [widen(&low, -1)?, widen(&upp, 1)?];
    let blinds = [sess.blind(1u128 << BLIND_BITS), sess.blind(1u128 << BLIND_BITS)];
    let items = beta
        .iter()
        .zip(&blinds)
        .map(|(c, &r)| pk.add_plain(c, &(BigInt::from(r) << shift)).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let bounds = match sess.call(Request::SpeBounds { shift, items })? {
        Response::Bounds(v) if v.len() == 2 => v,
        other => return Err(unexpected("SPE_BOUNDS", &other)),
    };
    let mut lo = (bounds[0] - blinds[0]).clamp(1, nb) as usize;
    let mut hi = (bounds[1] - blinds[1]).clamp(1, nb) as usize;
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let mut trace = QueryTrace {
        found: [low.found, upp.found],
        beta_low: lo,
        beta_upp: hi,
        ..QueryTrace::default()
    };

    let width = hi + 1 - lo;
    let block = b * d;
    let r2 = sess.blind(1u128 << MBR_OFFSET_BITS);
    let noise: Vec<Vec<i128>> = (0..width)
        .map(|_| (0..block).map(|_| sess.blind(1u128 << BLIND_BITS)).collect())
        .collect();
    let pi = Permutation::random(width, sess.rng());
    let order: Vec<usize> = (0..width).map(|k| pi.source(k)).collect();
    let mut mbrs = Vec::with_capacity(width * 2 * d);
    let mut slots = Vec::with_capacity(width * block);
    for &k in &order {
        let bucket = &idx.buckets[lo - 1 + k];
        mbrs.extend(perturb(&pk, &bucket.mbr, &vec![r2; 2 * d])?);
        let flat: Vec<Ciphertext> = bucket.slots.iter().flatten().cloned().collect();
        slots.extend(perturb(&pk, &flat, &noise[k])?);
    }
    let qv: Vec<Ciphertext> = q.lo.iter().chain(&q.hi).cloned().collect();
    let theta_src = perturb(&pk, &qv, &vec![r2; 2 * d])?;
    let sigma = MBR_OFFSET_BITS + 2;
    let per_ct = slots_per_ciphertext(&pk, sigma);
    let pack = |v: &[Ciphertext]| -> Result<Vec<Ciphertext>> {
        v.chunks(per_ct).map(|c| pack_ciphertexts(&pk, c, sigma)).collect()
    };
    let req = Request::SpeFilter {
        dims: d as u32,
        slot_bits: sigma,
        per_ct: per_ct as u32,
        mbr_count: width as u32,
        bucket_slots: block as u32,
        theta: pack(&theta_src)?,
        delta: pack(&mbrs)?,
        buckets: slots,
    };
    let (selectors, items) = match sess.call(req)? {
        Response::Selected {
            width: w,
            selectors,
            block: bl,
            items,
        } if w as usize == width && bl as usize == block => (selectors, items),
        other => return Err(unexpected("SPE_FILTER", &other)),
    };
    let permuted_noise: Vec<Vec<i128>> = order.iter().map(|&k| noise[k].clone()).collect();
    let hits = strip_selected(&pk, &selectors, width, &items, block, &permuted_noise)?;
    trace.hit_buckets = hits.len();
    let candidates: Vec<Vec<Ciphertext>> = hits
        .into_iter()
        .flat_map(|blk| blk.chunks(d).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect();
    trace.candidates = candidates.len();
    Ok((candidates, trace))
}

/// Secure range query: SPE candidates, an encrypted containment test per
/// candidate, and DAP-side selection of the marked ones.
pub fn slq_range_query(
    sess: &mut Session,
    idx: &DspIndex,
    q: &EncRangeQuery,
) -> Result<(Vec<Vec<Ciphertext>>, QueryTrace)> {
    let (cands, mut trace) = spe(sess, idx, q)?;
    if cands.is_empty() {
        return Ok((Vec::new(), trace));
    }
    let d = idx.meta.d;
    let refs: Vec<&[Ciphertext]> = cands.iter().map(Vec::as_slice).collect();
    let marks = sqp_batch(sess, &refs, &q.lo, &q.hi)?;
    let results = mark_and_collect(sess, &cands, &marks, d)?;
    trace.results = results.len();
    Ok((results, trace))
}

/// Messages of one marking round, kept for inspection.
#[derive(Clone, Debug)]
pub struct MarkRound {
    /// Packed, permuted indicator bits.
    pub nu: Vec<Ciphertext>,
    /// One-hot rows returned by the DAP, in its (permuted) order.
    pub selectors: Vec<Ciphertext>,
    pub results: Vec<Vec<Ciphertext>>,
}

/// Packs shuffled indicator bits, lets the DAP pick out the marked
/// (perturbed) points, and strips the perturbation.
pub fn mark_and_collect(
    sess: &mut Session,
    points: &[Vec<Ciphertext>],
    marks: &[Ciphertext],
    d: usize,
) -> Result<Vec<Vec<Ciphertext>>> {
    let pi = Permutation::random(points.len(), sess.rng());
    Ok(mark_round(sess, points, marks, d, &pi)?.results)
}

/// One marking round under a given permutation.
pub fn mark_round(
    sess: &mut Session,
    points: &[Vec<Ciphertext>],
    marks: &[Ciphertext],
    d: usize,
    pi: &Permutation,
) -> Result<MarkRound> {
    let pk = sess.pk().clone();
    let count = points.len();
    if marks.len() != count || pi.len() != count {
        return Err(Error::InvalidInput("one mark and one permutation entry per point required".into()));
    }
    let noise: Vec<Vec<i128>> = (0..count)
        .map(|_| (0..d).map(|_| sess.blind(1u128 << BLIND_BITS)).collect())
        .collect();
    let order: Vec<usize> = (0..count).map(|k| pi.source(k)).collect();
    let per_ct = slots_per_ciphertext(&pk, MARK_SIGMA);
    let shuffled_marks: Vec<Ciphertext> = order.iter().map(|&k| marks[k].clone()).collect();
    let nu = shuffled_marks
        .chunks(per_ct)
        .map(|c| pack_ciphertexts(&pk, c, MARK_SIGMA))
        .collect::<Result<Vec<_>>>()?;
    let mut perturbed = Vec::with_capacity(count * d);
    for &k in &order {
        perturbed.extend(perturb(&pk, &points[k], &noise[k])?);
    }
    let (selectors, items) = match sess.call(Request::SlqMark {
        sigma: MARK_SIGMA,
        per_ct: per_ct as u32,
        count: count as u32,
        dims: d as u32,
        nu: nu.clone(),
        points: perturbed,
    })? {
        Response::Selected {
            width,
            selectors,
            block,
            items,
        } if width as usize == count && block as usize == d => (selectors, items),
        other => return Err(unexpected("SLQ_MARK", &other)),
    };
    let permuted_noise: Vec<Vec<i128>> = order.iter().map(|&k| noise[k].clone()).collect();
    let results = strip_selected(&pk, &selectors, count, &items, d, &permuted_noise)?;
    Ok(MarkRound {
        nu,
        selectors,
        results,
    })
}

/// DSP half of the result return: masks every coordinate, ships the masked
/// ciphertexts to the DAP under a fresh token and returns the masks, which
/// go to the client.
pub fn return_results(
    sess: &mut Session,
    results: &[Vec<Ciphertext>],
) -> Result<(Token, Vec<i128>)> {
    let pk = sess.pk().clone();
    let mut token = [0u8; 16];
    sess.rng().fill(&mut token);
    let mut masks = Vec::new();
    let mut values = Vec::new();
    for p in results {
        for c in p {
            let m = sess.blind(1u128 << MASK_BITS);
            masks.push(m);
            values.push(pk.add_plain_i128(c, m)?);
        }
    }
    match sess.call(Request::Return { token, values })? {
        Response::Ack => Ok((token, masks)),
        other => Err(unexpected("RETURN", &other)),
    }
}

/// Client-side merge of the DAP's masked plaintexts and the DSP's masks.
pub fn merge_results(masked: &[i128], masks: &[i128], d: usize) -> Result<Vec<Vec<u64>>> {
    if masked.len() != masks.len() || d == 0 || masks.len() % d != 0 {
        return Err(Error::ShareMismatch(format!(
            "{} masked values against {} masks",
            masked.len(),
            masks.len()
        )));
    }
    masked
        .iter()
        .zip(masks)
        .map(|(v, m)| {
            u64::try_from(v - m).map_err(|_| Error::ShareMismatch("unmasked value out of range".into()))
        })
        .collect::<Result<Vec<u64>>>()
        .map(|flat| flat.chunks(d).map(<[_]>::to_vec).collect())
}

/// Maps rank-space results back to coordinates through the published table.
pub fn ranks_to_coords(ranks: &RankSpace, points: &[Vec<u64>]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let col = &ranks.dims[j];
                    let i = col.partition_point(|e| e.1 < v);
                    col.get(i)
                        .filter(|e| e.1 == v)
                        .map(|e| e.0)
                        .ok_or_else(|| Error::Format(format!("rank value {v} unknown in dimension {j}")))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build_index, BuildConfig, BuiltIndex};
    use crate::paillier::test_keys::k512;
    use crate::primitives::round_div_pow2;
    use crate::transport::{DapConfig, DapService};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn fixture() -> &'static BuiltIndex {
        static F: OnceLock<BuiltIndex> = OnceLock::new();
        F.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(11);
            let pts: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let cfg = BuildConfig {
                m: 120,
                epochs: 400,
                ..BuildConfig::default()
            };
            build_index(&k512().pk, &pts, &cfg, &mut rng).unwrap()
        })
    }

    fn dap() -> DapService {
        DapService::new(k512().clone(), DapConfig::with_seed([5; 32]))
    }

    fn enc_point(p: &[u64], rng: &mut ChaCha20Rng) -> Vec<Ciphertext> {
        p.iter().map(|&v| k512().pk.encrypt_i128(v as i128, rng).unwrap()).collect()
    }

    #[test]
    fn sbp_matches_the_plaintext_index() {
        let built = fixture();
        let (o, idx) = (&built.owner, &built.dsp);
        let svc = dap();
        let bucket = o.bucket_of_records();
        let nb = idx.buckets.len() as i64;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (mut hits, mut total) = (0, 0);
        for (i, r) in o.records.iter().enumerate().step_by(7) {
            let mut sess = Session::local(&svc, &[i as u8; 32]).unwrap();
            let out = sbp(&mut sess, idx, &enc_point(&r.ranks, &mut rng)).unwrap();
            let v = round_div_pow2(&k512().decrypt(&out.pred).unwrap(), 2 * idx.meta.leaf_scale_bits);
            let v = i64::try_from(v).unwrap();
            assert_eq!(v, o.predict(&r.ranks).1);
            let expect = v.clamp(1, nb) as usize == bucket[i].unwrap();
            assert_eq!(out.found, expect, "record {i}");
            hits += out.found as usize;
            total += 1;
        }
        assert!(hits * 3 > total, "{hits} of {total}");
    }

    #[test]
    fn sentinel_point_is_never_found() {
        let idx = &fixture().dsp;
        let svc = dap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut sess = Session::local(&svc, &[1; 32]).unwrap();
        assert!(!sbp(&mut sess, idx, &enc_point(&[0, 0], &mut rng)).unwrap().found);
    }

    #[test]
    fn sbp_transcripts_do_not_depend_on_found() {
        let built = fixture();
        let svc = dap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let live = &built.owner.records[10].ranks;
        let absent: Vec<u64> = live.iter().map(|v| v + 1).collect();
        let run = |p: &[u64], seed: u8, rng: &mut ChaCha20Rng| {
            let mut sess = Session::local(&svc, &[seed; 32]).unwrap();
            let found = sbp(&mut sess, &built.dsp, &enc_point(p, rng)).unwrap().found;
            (found, sess.close().unwrap())
        };
        let (f1, t1) = run(live, 1, &mut rng);
        let (f0, t0) = run(&absent, 2, &mut rng);
        assert!(!f0);
        let _ = f1;
        assert_eq!(t0, t1);
    }

    fn plain_candidates(built: &BuiltIndex, lo: &[u64], hi: &[u64]) -> usize {
        let (bl, bh) = built.owner.plain_scan(lo, hi);
        let nb = built.owner.buckets.len() as i64;
        let (bl, bh) = (bl.clamp(1, nb), bh.clamp(1, nb));
        let (bl, bh) = (bl.min(bh) as usize, bl.max(bh) as usize);
        (bl..=bh)
            .filter(|&i| {
                let m = crate::index::bucket_mbr(&built.owner, i - 1);
                m.intersects(lo, hi)
            })
            .count()
            * built.dsp.meta.b
    }

    #[test]
    fn spe_returns_a_superset_and_matches_the_plain_scan() {
        let built = fixture();
        let o = &built.owner;
        let svc = dap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for k in 0..6 {
            let (x, y) = (rng.gen::<f64>() * 0.8, rng.gen::<f64>() * 0.8);
            let (lo, hi) = rank_rect(&o.ranks, &[x, y], &[x + 0.2, y + 0.15]).unwrap();
            let q = encrypt_rect(&k512().pk, &lo, &hi, &mut rng).unwrap();
            let mut sess = Session::local(&svc, &[k; 32]).unwrap();
            let (cands, trace) = spe(&mut sess, &built.dsp, &q).unwrap();
            let got: Vec<Vec<u64>> = cands
                .iter()
                .map(|p| p.iter().map(|c| k512().decrypt_i128(c).unwrap() as u64).collect())
                .collect();
            assert_eq!(got.len(), plain_candidates(built, &lo, &hi));
            let (bl, bh) = o.plain_scan(&lo, &hi);
            let nb = o.buckets.len() as i64;
            assert_eq!(
                (trace.beta_low as i64, trace.beta_upp as i64),
                (bl.clamp(1, nb).min(bh.clamp(1, nb)), bl.clamp(1, nb).max(bh.clamp(1, nb)))
            );
            for r in o.records.iter().filter(|r| r.live) {
                assert!(got.contains(&r.ranks) || !(0..2).all(|j| lo[j] <= r.ranks[j] && r.ranks[j] <= hi[j]));
            }
            let stored: std::collections::HashSet<&Vec<u64>> = o.records.iter().map(|r| &r.ranks).collect();
            assert!(got.iter().all(|p| p == &vec![0, 0] || stored.contains(p)));
        }
    }

    #[test]
    fn table_iii_replay() {
        let svc = dap();
        let pk = &k512().pk;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pts: Vec<Vec<u64>> = (1..=5).map(|i| vec![10 * i, 10 * i + 1]).collect();
        let enc: Vec<Vec<Ciphertext>> = pts.iter().map(|p| enc_point(p, &mut rng)).collect();
        let marks: Vec<Ciphertext> = [1, 0, 1, 0, 0]
            .iter()
            .map(|&v| pk.encrypt_i128(v, &mut rng).unwrap())
            .collect();
        let pi = Permutation::from_one_based(&[5, 4, 3, 2, 1]).unwrap();
        let mut sess = Session::local(&svc, &[6; 32]).unwrap();
        let round = mark_round(&mut sess, &enc, &marks, 2, &pi).unwrap();
        assert_eq!(round.nu.len(), 1);
        assert_eq!(k512().decrypt_i128(&round.nu[0]).unwrap(), 17);
        let rows: Vec<Vec<i128>> = round
            .selectors
            .chunks(5)
            .map(|r| r.iter().map(|c| k512().decrypt_i128(c).unwrap()).collect())
            .collect();
        assert_eq!(rows, vec![vec![0, 0, 1, 0, 0], vec![0, 0, 0, 0, 1]]);
        let got: Vec<Vec<u64>> = round
            .results
            .iter()
            .map(|p| p.iter().map(|c| k512().decrypt_i128(c).unwrap() as u64).collect())
            .collect();
        assert_eq!(got, vec![pts[2].clone(), pts[0].clone()]);
    }

    #[test]
    fn range_queries_match_the_plaintext_oracle() {
        let built = fixture();
        let o = &built.owner;
        let svc = dap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for k in 0..8u8 {
            let (x, y) = (rng.gen::<f64>() * 0.9, rng.gen::<f64>() * 0.9);
            let (lo, hi) = ([x, y], [x + 0.1, y + 0.25]);
            let q = trapdoor(&k512().pk, &o.ranks, &lo, &hi, &mut rng).unwrap();
            let mut sess = Session::local(&svc, &[k; 32]).unwrap();
            let (res, trace) = slq_range_query(&mut sess, &built.dsp, &q).unwrap();
            let (token, masks) = return_results(&mut sess, &res).unwrap();
            sess.close().unwrap();
            let share = crate::transport::collect_share(
                crate::transport::LocalLink::connect(&svc, &k512().pk).unwrap(),
                &k512().pk,
                token,
            )
            .unwrap();
            let pts = merge_results(&share, &masks, 2).unwrap();
            assert_eq!(pts.len(), trace.results);
            let mut coords = ranks_to_coords(&o.ranks, &pts).unwrap();
            coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want: Vec<Vec<f64>> = o
                .plain_query(&lo, &hi)
                .iter()
                .map(|&id| o.records.iter().find(|r| r.id == id).unwrap().coords.clone())
                .collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(coords, want);
        }
    }

    #[test]
    fn empty_query_skips_marking() {
        let built = fixture();
        let svc = dap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let q = trapdoor(&k512().pk, &built.owner.ranks, &[2.0, 2.0], &[3.0, 3.0], &mut rng).unwrap();
        assert_eq!(
            k512().decrypt_i128(&q.lo[0]).unwrap() - k512().decrypt_i128(&q.hi[0]).unwrap(),
            1
        );
        let mut sess = Session::local(&svc, &[2; 32]).unwrap();
        let (res, trace) = slq_range_query(&mut sess, &built.dsp, &q).unwrap();
        assert!(res.is_empty());
        assert_eq!(trace.candidates, 0);
        let t = sess.close().unwrap();
        assert!(t.entries().iter().all(|e| e.msg_type & 0x7f != crate::transport::message::ty::SLQ_MARK));
    }

    #[test]
    fn reversed_rectangle_is_rejected() {
        let o = &fixture().owner;
        assert!(rank_rect(&o.ranks, &[0.5, 0.1], &[0.4, 0.2]).is_err());
    }

    #[test]
    fn degenerate_rectangle_maps_to_the_point_ranks() {
        let o = &fixture().owner;
        let r = &o.records[17];
        let (lo, hi) = rank_rect(&o.ranks, &r.coords, &r.coords).unwrap();
        assert_eq!(lo, r.ranks);
        assert_eq!(hi, r.ranks);
    }

    #[test]
    fn merge_checks_counts() {
        assert_eq!(merge_results(&[13, 24], &[10, 20], 2).unwrap(), vec![vec![3, 4]]);
        assert!(merge_results(&[13], &[10, 20], 2).is_err());
        assert!(merge_results(&[], &[], 2).unwrap().is_empty());
    }
}
