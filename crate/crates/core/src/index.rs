//! The secure learned index: a tree of routing predictors over quantile
//! grid partitions, leaf predictors over a global bucket order, and the
//! encrypted view handed to the DSP.
//!
//! The data owner keeps an [`OwnerIndex`] (plaintext mirror, JSON) and the
//! matching [`DspIndex`] (binary, `SLQ1`). Updates mutate both and emit a
//! [`Delta`] that brings an older DSP copy to the same state.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{put_i128, put_i64, put_u32, put_u64, put_u8, Reader};
use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, PublicKey};
use crate::predictor::{
    choose_scale_bits, encrypt_router, make_smlp_c, noise_router, quantize, train_predictor,
    FuzzyLabelTable, Level, MlpParams, NoiseConfig, SmlpC, SmlpP, TrainConfig, DEFAULT_HIDDEN,
    PARAM_BUDGET_BITS,
};
use crate::primitives::RANK_BOUND_BITS;
use crate::spatial::{
    bit_width, compute_mbr, grid_splits, morton_encode, rank_map, Mbr, RankSpace,
    DEFAULT_STRIDE, SENTINEL,
};

pub const INDEX_MAGIC: &[u8; 4] = b"SLQ1";
pub const DELTA_MAGIC: &[u8; 4] = b"SLQD";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Bucket capacity.
    pub b: usize,
    /// Maximum points per leaf.
    pub m: usize,
    /// Maximum fan-out of a routing node.
    pub k: usize,
    /// Decoy buckets as a fraction of real buckets.
    pub dummy_ratio: f64,
    pub hidden: usize,
    pub stride: u64,
    /// Hide which leaf a fuzzy router selects.
    pub fuzzy: bool,
    pub noise: NoiseConfig,
    pub epochs: usize,
    /// Random corner probes per live point used to calibrate leaf error.
    pub probes_per_point: usize,
    /// Random corners per point added to every predictor's training set.
    pub train_probes_per_point: usize,
    pub max_probes: usize,
    /// Layout and training seed. Encryption randomness comes from the
    /// caller's RNG.
    pub seed: u64,
    /// Rebuild once updates exceed this fraction of the build size.
    pub tau: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            b: 8,
            m: 300,
            k: 64,
            dummy_ratio: 0.1,
            hidden: DEFAULT_HIDDEN,
            stride: DEFAULT_STRIDE,
            fuzzy: true,
            noise: NoiseConfig::default(),
            epochs: 2000,
            probes_per_point: 32,
            train_probes_per_point: 4,
            max_probes: 200_000,
            seed: 0,
            tau: 0.2,
        }
    }
}

impl BuildConfig {
    fn validate(&self) -> Result<()> {
        if self.b == 0 || self.m <= self.b {
            return Err(Error::InvalidInput(format!(
                "need 1 <= b < m, got b = {} and m = {}",
                self.b, self.m
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidInput("fan-out k must be at least 2".into()));
        }
        if !(0.0..=10.0).contains(&self.dummy_ratio) {
            return Err(Error::InvalidInput(format!("dummy ratio {} out of range", self.dummy_ratio)));
        }
        if self.hidden == 0 || self.stride < 2 {
            return Err(Error::InvalidInput("hidden width must be positive and stride >= 2".into()));
        }
        Ok(())
    }
}

/// Equal-count slabs along one dimension. Nesting slab splits over the
/// dimensions in turn yields the quantile grid cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub dim: usize,
    /// Strictly increasing; child `c` (1-based) holds values in
    /// `[cuts[c-2], cuts[c-1])`.
    pub cuts: Vec<u64>,
}

impl Split {
    pub fn child(&self, ranks: &[u64]) -> usize {
        1 + self.cuts.partition_point(|&c| c <= ranks[self.dim])
    }

    pub fn fanout(&self) -> usize {
        self.cuts.len() + 1
    }
}

/// Routing model computing `1 + #{cuts <= x_dim}` exactly on integer
/// inputs: each cut contributes `ReLU(S(x-t+1)) - ReLU(S(x-t))`.
pub fn staircase(d: usize, split: &Split, hidden: usize, scale_bits: u32) -> MlpParams {
    let s = 1i64 << scale_bits;
    let hidden = hidden.max(2 * split.cuts.len());
    let mut m = MlpParams::zero(d, hidden, scale_bits);
    for (c, &t) in split.cuts.iter().enumerate() {
        let (a, b) = (2 * c, 2 * c + 1);
        m.w1[a * d + split.dim] = s;
        m.w1[b * d + split.dim] = s;
        m.b1[a] = -s * (t as i64 - 1);
        m.b1[b] = -s * t as i64;
        m.w2[a] = s;
        m.w2[b] = -s;
    }
    m.b2 = 1i128 << (2 * scale_bits);
    m
}

/// Largest router scale keeping `S · max_value` inside the parameter budget.
fn router_scale_bits(max_value: u64) -> u32 {
    (PARAM_BUDGET_BITS - 1).saturating_sub(bit_width(max_value)).clamp(1, 16)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnerRouter {
    pub level: Level,
    pub split: Split,
    /// Node ids in logical (label) order.
    pub children: Vec<usize>,
    /// Noised plaintext model; routing decisions always use it.
    pub model: MlpParams,
    pub err_max: i64,
    pub delta: f64,
    /// `position[j]` is the stored slot of logical child `j` on the DSP.
    pub position: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnerLeaf {
    pub model: MlpParams,
    pub err_max: i64,
    /// 0-based position of the first owned bucket.
    pub first: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OwnerNode {
    Router(OwnerRouter),
    Leaf(OwnerLeaf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub coords: Vec<f64>,
    /// Rank-space values.
    pub ranks: Vec<u64>,
    pub cur: u128,
    pub live: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnerBucket {
    pub leaf: usize,
    pub dummy: bool,
    /// Record index per slot, `None` for a sentinel slot.
    pub slots: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub inserts: u64,
    pub deletes: u64,
    /// A rank value was allocated past the build-time maximum.
    pub domain_grew: bool,
    /// Calibration rounds, used to vary the probe stream.
    pub epoch: u64,
}

/// Data-owner view of the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnerIndex {
    pub cfg: BuildConfig,
    pub d: usize,
    pub n_build: usize,
    pub curve_width: u32,
    pub leaf_scale_bits: u32,
    pub leaf_param_bits: u64,
    pub ranks: RankSpace,
    pub records: Vec<Record>,
    pub nodes: Vec<OwnerNode>,
    pub buckets: Vec<OwnerBucket>,
    pub log: UpdateLog,
    pub next_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMeta {
    pub n: u64,
    pub d: usize,
    pub b: usize,
    pub hidden: usize,
    pub leaf_scale_bits: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DspNode {
    Router {
        level: Level,
        pred: SmlpP,
        /// Node ids in stored order.
        children: Vec<usize>,
        fuzzy: Option<FuzzyLabelTable>,
        err_max: i64,
    },
    Leaf {
        pred: SmlpC,
        /// 1-based id of the first owned bucket.
        first_bucket: u64,
        bucket_count: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncBucket {
    /// `b` slots of `d` encrypted rank values.
    pub slots: Vec<Vec<Ciphertext>>,
    /// Encrypted lows then highs.
    pub mbr: Vec<Ciphertext>,
    /// Encrypted live bits.
    pub bitmap: Vec<Ciphertext>,
}

/// DSP view of the index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DspIndex {
    pub pk: PublicKey,
    pub meta: IndexMeta,
    pub nodes: Vec<DspNode>,
    pub buckets: Vec<EncBucket>,
}

impl DspIndex {
    pub fn root(&self) -> &DspNode {
        &self.nodes[0]
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }
}

/// Everything a build produces.
#[derive(Clone, Debug)]
pub struct BuiltIndex {
    pub owner: OwnerIndex,
    pub dsp: DspIndex,
}

/// Ordering key realising the global bucket order: child labels along the
/// true split path, then curve value.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Key {
    pub path: Vec<u32>,
    pub cur: u128,
}

fn sub_seed(seed: u64, tag: &str, idx: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(tag.as_bytes());
    h.update(idx.to_be_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

fn item_rng(key: &[u8; 32], tag: u8, idx: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(key);
    h.update([tag]);
    h.update(idx.to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn par_map<T: Sync, U: Send, F: Fn(usize, &T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

impl OwnerIndex {
    pub fn live_count(&self) -> usize {
        self.records.iter().filter(|r| r.live).count()
    }

    pub fn key(&self, ranks: &[u64], cur: u128) -> Key {
        let mut path = Vec::new();
        let mut node = 0;
        while let OwnerNode::Router(r) = &self.nodes[node] {
            let c = r.split.child(ranks);
            path.push(c as u32);
            node = r.children[c - 1];
        }
        Key { path, cur }
    }

    pub fn true_leaf(&self, ranks: &[u64]) -> usize {
        let mut node = 0;
        while let OwnerNode::Router(r) = &self.nodes[node] {
            node = r.children[r.split.child(ranks) - 1];
        }
        node
    }

    /// Leaf reached by evaluating the routing models, as a query would.
    pub fn route(&self, ranks: &[u64]) -> usize {
        let mut node = 0;
        while let OwnerNode::Router(r) = &self.nodes[node] {
            let eta = r.children.len() as i64;
            node = r.children[(r.model.label(ranks).clamp(1, eta) - 1) as usize];
        }
        node
    }

    pub fn leaf(&self, node: usize) -> Option<&OwnerLeaf> {
        match &self.nodes[node] {
            OwnerNode::Leaf(l) => Some(l),
            OwnerNode::Router(_) => None,
        }
    }

    /// Leaf node ids in preorder.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                OwnerNode::Leaf(_) => out.push(n),
                OwnerNode::Router(r) => stack.extend(r.children.iter().rev()),
            }
        }
        out
    }

    /// Leaf prediction (1-based bucket id) for a point or corner.
    pub fn predict(&self, ranks: &[u64]) -> (usize, i64) {
        let leaf = self.route(ranks);
        (leaf, self.leaf(leaf).unwrap().model.label(ranks))
    }

    /// 1-based bucket id holding each live record.
    pub fn bucket_of_records(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.records.len()];
        for (pos, bk) in self.buckets.iter().enumerate() {
            for &r in bk.slots.iter().flatten() {
                out[r] = Some(pos + 1);
            }
        }
        out
    }

    pub fn cur_of(&self, ranks: &[u64]) -> Result<u128> {
        morton_encode(ranks, self.curve_width)
    }

    /// Clamps a rank-space corner into the curve domain.
    fn clamp_corner(&self, q: &[u64]) -> Vec<u64> {
        let max = (1u64 << self.curve_width) - 1;
        q.iter().map(|&v| v.min(max)).collect()
    }

    fn sorted_keys(&self) -> Vec<(Key, usize)> {
        let bucket = self.bucket_of_records();
        let mut v: Vec<(Key, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.live)
            .map(|(i, r)| (self.key(&r.ranks, r.cur), bucket[i].expect("live record without bucket")))
            .collect();
        v.sort();
        v
    }

    /// Scan bounds that any corner `q` must respect: the bucket of the first
    /// live point with key `>= key(q)` and of the last with key `<= key(q)`.
    fn corner_labels(&self, sorted: &[(Key, usize)], q: &[u64]) -> Result<(i64, i64)> {
        let q = self.clamp_corner(q);
        let kq = self.key(&q, self.cur_of(&q)?);
        let ge = sorted.partition_point(|e| e.0 < kq);
        let le = sorted.partition_point(|e| e.0 <= kq);
        let lower = sorted.get(ge).map(|e| e.1).unwrap_or(self.buckets.len()) as i64;
        let upper = if le > 0 { sorted[le - 1].1 } else { 1 } as i64;
        Ok((lower, upper))
    }

    fn probes(&self) -> Vec<Vec<u64>> {
        let count = (self.cfg.probes_per_point * self.live_count()).min(self.cfg.max_probes);
        sample_corners(&self.ranks, count, sub_seed(self.cfg.seed, "probe", self.log.epoch))
    }

    /// Per-leaf error bound over live points (two-sided) and corner probes
    /// (one-sided). With `extend`, bounds only grow.
    fn calibrate(&mut self, extend: bool) -> Result<()> {
        let sorted = self.sorted_keys();
        let bucket = self.bucket_of_records();
        let mut err = vec![0i64; self.nodes.len()];
        for (i, r) in self.records.iter().enumerate().filter(|(_, r)| r.live) {
            let (leaf, pred) = self.predict(&r.ranks);
            let e = (pred - bucket[i].unwrap() as i64).abs();
            err[leaf] = err[leaf].max(e);
        }
        let probes = self.probes();
        let probe_err: Vec<Result<(usize, i64)>> = par_map(&probes, |_, q| {
            let (lower, upper) = self.corner_labels(&sorted, q)?;
            let (leaf, pred) = self.predict(q);
            Ok((leaf, (pred - lower).max(upper - pred).max(0)))
        });
        for pe in probe_err {
            let (leaf, e) = pe?;
            err[leaf] = err[leaf].max(e);
        }
        for (n, node) in self.nodes.iter_mut().enumerate() {
            if let OwnerNode::Leaf(l) = node {
                l.err_max = if extend { l.err_max.max(err[n]) } else { err[n] };
            }
        }
        self.log.epoch += 1;
        Ok(())
    }

    fn refresh_leaf_ranges(&mut self) {
        let mut ranges: Vec<Option<(usize, usize)>> = vec![None; self.nodes.len()];
        for (pos, bk) in self.buckets.iter().enumerate() {
            let e = ranges[bk.leaf].get_or_insert((pos, 0));
            e.1 += 1;
        }
        for (n, node) in self.nodes.iter_mut().enumerate() {
            if let OwnerNode::Leaf(l) = node {
                let (first, count) = ranges[n].unwrap_or((l.first, 0));
                l.first = first;
                l.count = count;
            }
        }
    }

    /// Checks every invariant the query protocols rely on.
    pub fn audit(&self) -> AuditReport {
        let mut rep = AuditReport::default();
        let bucket = self.bucket_of_records();
        for (i, r) in self.records.iter().enumerate().filter(|(_, r)| r.live) {
            rep.points += 1;
            let Some(bkt) = bucket[i] else {
                rep.unplaced += 1;
                continue;
            };
            let (leaf, pred) = self.predict(&r.ranks);
            let err = self.leaf(leaf).unwrap().err_max;
            if (pred - bkt as i64).abs() > err {
                rep.violations.push(Violation {
                    id: r.id,
                    pred,
                    bucket: bkt as i64,
                    err_max: err,
                });
            }
        }
        let sorted = self.sorted_keys();
        rep.order_violations = sorted.windows(2).filter(|w| w[0].1 > w[1].1).count();
        for bk in &self.buckets {
            if bk.slots.len() != self.cfg.b {
                rep.slot_violations += 1;
            }
            if bk.dummy && bk.slots.iter().any(|s| s.is_some()) {
                rep.slot_violations += 1;
            }
        }
        rep
    }

    pub fn should_rebuild(&self) -> bool {
        should_rebuild(self.log.inserts + self.log.deletes, self.n_build, self.cfg.tau)
            || self.log.domain_grew
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Format(format!("owner index: {e}")))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("owner index: {e}")))
    }

    /// Bucket interval the query protocol scans for a rank-space rectangle:
    /// a corner found in its predicted bucket pins that bucket, otherwise
    /// the prediction is widened by the leaf's error bound.
    pub fn plain_scan(&self, lo: &[u64], hi: &[u64]) -> (i64, i64) {
        let nb = self.buckets.len() as i64;
        let bucket = self.bucket_of_records();
        let bound = |q: &[u64], sign: i64| {
            let (leaf, pred) = self.predict(q);
            let v = pred.clamp(1, nb);
            let found = self.buckets[(v - 1) as usize]
                .slots
                .iter()
                .flatten()
                .any(|&r| self.records[r].live && self.records[r].ranks == q && bucket[r] == Some(v as usize));
            if found {
                v
            } else {
                (pred + sign * self.leaf(leaf).unwrap().err_max).clamp(1, nb)
            }
        };
        (bound(lo, -1), bound(hi, 1))
    }

    /// Live coordinates inside a closed rectangle, by brute force.
    pub fn plain_query(&self, lo: &[f64], hi: &[f64]) -> Vec<u64> {
        let mut ids: Vec<u64> = self
            .records
            .iter()
            .filter(|r| r.live && r.coords.iter().zip(lo.iter().zip(hi)).all(|(c, (l, h))| l <= c && c <= h))
            .map(|r| r.id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Corners whose coordinates are drawn independently from the published
/// rank values, the way query rectangles map into rank space.
fn sample_corners(ranks: &RankSpace, count: usize, seed: u64) -> Vec<Vec<u64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    if ranks.dims.iter().any(|c| c.is_empty()) {
        return Vec::new();
    }
    (0..count)
        .map(|_| ranks.dims.iter().map(|c| c[rng.gen_range(0..c.len())].1).collect())
        .collect()
}

/// Strictly more than `tau · n_build` updates.
pub fn should_rebuild(updates: u64, n_build: usize, tau: f64) -> bool {
    updates as f64 > tau * n_build as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub id: u64,
    pub pred: i64,
    pub bucket: i64,
    pub err_max: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub points: usize,
    pub unplaced: usize,
    pub violations: Vec<Violation>,
    pub order_violations: usize,
    pub slot_violations: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.unplaced == 0
            && self.violations.is_empty()
            && self.order_violations == 0
            && self.slot_violations == 0
    }
}

struct Builder<'a> {
    cfg: &'a BuildConfig,
    records: &'a [Record],
    corners: &'a [Vec<u64>],
    d: usize,
    scale_bits: u32,
    nodes: Vec<OwnerNode>,
}

impl Builder<'_> {
    fn placeholder(&mut self) -> usize {
        self.nodes.push(OwnerNode::Leaf(OwnerLeaf {
            model: MlpParams::zero(0, 0, 0),
            err_max: 0,
            first: 0,
            count: 0,
        }));
        self.nodes.len() - 1
    }

    fn split(&self, idx: &[usize], dim: usize) -> Split {
        let g = grid_splits(self.cfg.m, self.cfg.b, self.d).clamp(2, self.cfg.k);
        let mut vals: Vec<u64> = idx.iter().map(|&i| self.records[i].ranks[dim]).collect();
        vals.sort_unstable();
        let mut cuts: Vec<u64> = (1..g).map(|c| vals[c * vals.len() / g]).collect();
        cuts.dedup();
        // a cut at the minimum would leave the first slab empty
        cuts.retain(|&c| c > vals[0]);
        Split { dim, cuts }
    }

    fn build(&mut self, idx: Vec<usize>, corners: Vec<usize>, level: Level, dim: usize) -> Result<usize> {
        let id = self.placeholder();
        if idx.len() <= self.cfg.m {
            return Ok(id);
        }
        let split = self.split(&idx, dim);
        if split.cuts.is_empty() {
            return Err(Error::InvalidInput(format!(
                "cannot split {} points along dimension {dim}",
                idx.len()
            )));
        }
        let eta = split.fanout();
        let exact = staircase(self.d, &split, self.cfg.hidden, self.scale_bits);
        let inputs: Vec<Vec<u64>> = idx
            .iter()
            .map(|&i| self.records[i].ranks.clone())
            .chain(corners.iter().map(|&c| self.corners[c].clone()))
            .collect();
        let labels: Vec<i64> = inputs.iter().map(|x| split.child(x) as i64).collect();
        let span: Vec<f64> = (0..self.d)
            .map(|j| {
                let lo = inputs.iter().map(|x| x[j]).min().unwrap();
                let hi = inputs.iter().map(|x| x[j]).max().unwrap();
                (hi - lo).max(1) as f64
            })
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(self.cfg.seed, "noise", id as u64));
        let (model, err_max, delta) =
            noise_router(&exact, &span, eta, self.cfg.noise, &inputs, &labels, 0, &mut rng)?;
        log::debug!(
            "router {id}: {} points, {eta} children on dimension {dim}, noise {delta}",
            idx.len()
        );
        let mut parts = vec![(Vec::new(), Vec::new()); eta];
        for &i in &idx {
            parts[split.child(&self.records[i].ranks) - 1].0.push(i);
        }
        for &c in &corners {
            parts[split.child(&self.corners[c]) - 1].1.push(c);
        }
        let mut children = Vec::with_capacity(eta);
        for (part, part_corners) in parts {
            children.push(self.build(part, part_corners, Level::Intermediate, (dim + 1) % self.d)?);
        }
        self.nodes[id] = OwnerNode::Router(OwnerRouter {
            level,
            split,
            children,
            model,
            err_max,
            delta,
            position: None,
        });
        Ok(id)
    }
}

fn train_leaf(
    owner: &OwnerIndex,
    leaf: usize,
    sets: &[(Vec<Vec<u64>>, Vec<i64>)],
) -> Result<(crate::predictor::FloatMlp, u32)> {
    let (inputs, labels) = &sets[leaf];
    let tcfg = TrainConfig {
        hidden: owner.cfg.hidden,
        epochs: owner.cfg.epochs,
        err_target: 1,
        seed: sub_seed(owner.cfg.seed, "leaf", leaf as u64),
        ..TrainConfig::default()
    };
    let (fm, _) = train_predictor(inputs, labels, &tcfg)?;
    let bits = choose_scale_bits(&fm, inputs)?;
    Ok((fm, bits))
}

/// Builds both views of the index. `points` are the raw coordinates;
/// record ids are their positions.
pub fn build_index<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    points: &[Vec<f64>],
    cfg: &BuildConfig,
    rng: &mut R,
) -> Result<BuiltIndex> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty dataset".into()));
    }
    let d = points[0].len();
    let ids: Vec<u64> = (0..points.len() as u64).collect();
    let ranks = rank_map(points, &ids)?;
    let space = RankSpace::new(points, &ranks, cfg.stride);
    let curve_width = bit_width(space.max_value()) + 1;
    if curve_width as u64 > RANK_BOUND_BITS {
        return Err(Error::BoundExceeded(format!("rank values need {curve_width} bits")));
    }
    let records = points
        .iter()
        .zip(&ranks)
        .enumerate()
        .map(|(i, (p, r))| {
            let ranks: Vec<u64> = r.iter().map(|v| v * cfg.stride).collect();
            Ok(Record {
                id: i as u64,
                coords: p.clone(),
                cur: morton_encode(&ranks, curve_width)?,
                ranks,
                live: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let corners = training_corners(&space, cfg);
    let mut builder = Builder {
        cfg,
        records: &records,
        corners: &corners,
        d,
        scale_bits: router_scale_bits(space.max_value() * 2),
        nodes: Vec::new(),
    };
    builder.build((0..records.len()).collect(), (0..corners.len()).collect(), Level::Head, 0)?;
    let nodes = builder.nodes;
    let mut owner = OwnerIndex {
        cfg: cfg.clone(),
        d,
        n_build: points.len(),
        curve_width,
        leaf_scale_bits: 0,
        leaf_param_bits: 0,
        ranks: space,
        records,
        nodes,
        buckets: Vec::new(),
        log: UpdateLog::default(),
        next_id: points.len() as u64,
    };
    layout_buckets(&mut owner)?;
    train_leaves(&mut owner)?;
    owner.calibrate(false)?;
    assign_fuzzy(&mut owner);
    let dsp = encrypt_index(pk, &owner, rng)?;
    Ok(BuiltIndex { owner, dsp })
}

fn training_corners(space: &RankSpace, cfg: &BuildConfig) -> Vec<Vec<u64>> {
    let count = (cfg.train_probes_per_point * space.dims[0].len()).min(cfg.max_probes);
    sample_corners(space, count, sub_seed(cfg.seed, "train-corner", 0))
}

fn layout_buckets(owner: &mut OwnerIndex) -> Result<()> {
    let b = owner.cfg.b;
    let mut order: Vec<(Key, usize)> = owner
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (owner.key(&r.ranks, r.cur), i))
        .collect();
    order.sort();
    let mut buckets: Vec<OwnerBucket> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let leaf = {
            let r = &owner.records[order[i].1];
            owner.true_leaf(&r.ranks)
        };
        let mut j = i;
        while j < order.len() && {
            let r = &owner.records[order[j].1];
            owner.true_leaf(&r.ranks) == leaf
        } {
            j += 1;
        }
        for chunk in order[i..j].chunks(b) {
            let mut slots: Vec<Option<usize>> = chunk.iter().map(|e| Some(e.1)).collect();
            slots.resize(b, None);
            buckets.push(OwnerBucket {
                leaf,
                dummy: false,
                slots,
            });
        }
        i = j;
    }
    let decoys = (owner.cfg.dummy_ratio * buckets.len() as f64).ceil() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(owner.cfg.seed, "decoy", 0));
    for _ in 0..decoys {
        let pos = rng.gen_range(0..=buckets.len());
        let leaf = buckets[pos.saturating_sub(1)].leaf;
        buckets.insert(
            pos,
            OwnerBucket {
                leaf,
                dummy: true,
                slots: vec![None; b],
            },
        );
    }
    owner.buckets = buckets;
    owner.refresh_leaf_ranges();
    Ok(())
}

fn train_leaves(owner: &mut OwnerIndex) -> Result<()> {
    let bucket = owner.bucket_of_records();
    let mut sets: Vec<(Vec<Vec<u64>>, Vec<i64>)> = vec![(Vec::new(), Vec::new()); owner.nodes.len()];
    for (i, r) in owner.records.iter().enumerate() {
        let bkt = bucket[i].unwrap() as i64;
        let own = owner.true_leaf(&r.ranks);
        let routed = owner.route(&r.ranks);
        for leaf in [own, routed] {
            sets[leaf].0.push(r.ranks.clone());
            sets[leaf].1.push(bkt);
            if own == routed {
                break;
            }
        }
    }
    // corners learn the middle of the bucket interval they must cover
    let sorted = owner.sorted_keys();
    let corners = training_corners(&owner.ranks, &owner.cfg);
    for q in &corners {
        let (lower, upper) = owner.corner_labels(&sorted, q)?;
        let leaf = owner.route(q);
        sets[leaf].0.push(q.clone());
        sets[leaf].1.push((lower + upper + 1).div_euclid(2));
    }
    let leaves = owner.leaves();
    let trained: Vec<Result<(crate::predictor::FloatMlp, u32)>> =
        par_map(&leaves, |_, &leaf| train_leaf(owner, leaf, &sets));
    let trained = trained.into_iter().collect::<Result<Vec<_>>>()?;
    let mut bits = trained.iter().map(|t| t.1).max().unwrap_or(16);
    let models = loop {
        match trained.iter().map(|(fm, _)| quantize(fm, bits)).collect::<Result<Vec<_>>>() {
            Ok(m) => break m,
            Err(e) if bits > 1 => {
                log::debug!("leaf scale 2^{bits} over budget ({e}), lowering");
                bits -= 1;
            }
            Err(e) => return Err(e),
        }
    };
    owner.leaf_scale_bits = bits;
    let mut max_bits = 0;
    for (&leaf, model) in leaves.iter().zip(models) {
        max_bits = max_bits.max(model.param_bits());
        if let OwnerNode::Leaf(l) = &mut owner.nodes[leaf] {
            l.model = model;
        }
    }
    owner.leaf_param_bits = max_bits + 1;
    Ok(())
}

fn assign_fuzzy(owner: &mut OwnerIndex) {
    if !owner.cfg.fuzzy {
        return;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(owner.cfg.seed, "fuzzy", 0));
    let leaf_ids: Vec<bool> = owner.nodes.iter().map(|n| matches!(n, OwnerNode::Leaf(_))).collect();
    for node in owner.nodes.iter_mut() {
        if let OwnerNode::Router(r) = node {
            if r.children.iter().all(|&c| leaf_ids[c]) {
                let mut pos: Vec<usize> = (0..r.children.len()).collect();
                pos.shuffle(&mut rng);
                r.position = Some(pos);
            }
        }
    }
}

fn encrypt_bucket(pk: &PublicKey, owner: &OwnerIndex, pos: usize, rng: &mut ChaCha20Rng) -> Result<EncBucket> {
    let bk = &owner.buckets[pos];
    let d = owner.d;
    let mut enc = |v: u64| pk.encrypt_i128(v as i128, &mut *rng).map_err(Error::from);
    let mut slots = Vec::with_capacity(bk.slots.len());
    let mut bitmap = Vec::with_capacity(bk.slots.len());
    for s in &bk.slots {
        let live = s.map(|r| &owner.records[r]).filter(|r| r.live);
        let vals: Vec<u64> = match live {
            Some(r) => r.ranks.clone(),
            None => vec![SENTINEL; d],
        };
        slots.push(vals.into_iter().map(&mut enc).collect::<Result<Vec<_>>>()?);
        bitmap.push(enc(live.is_some() as u64)?);
    }
    let mbr = bucket_mbr(owner, pos);
    let mbr = mbr.flatten().into_iter().map(&mut enc).collect::<Result<Vec<_>>>()?;
    Ok(EncBucket { slots, mbr, bitmap })
}

/// MBR of a bucket's live points (sentinel when empty).
pub fn bucket_mbr(owner: &OwnerIndex, pos: usize) -> Mbr {
    let pts: Vec<&[u64]> = owner.buckets[pos]
        .slots
        .iter()
        .flatten()
        .map(|&r| &owner.records[r])
        .filter(|r| r.live)
        .map(|r| r.ranks.as_slice())
        .collect();
    if pts.is_empty() {
        Mbr::sentinel(owner.d)
    } else {
        compute_mbr(pts, owner.d)
    }
}

fn encrypt_leaf(pk: &PublicKey, owner: &OwnerIndex, node: usize, rng: &mut ChaCha20Rng) -> Result<DspNode> {
    let l = owner.leaf(node).unwrap();
    Ok(DspNode::Leaf {
        pred: make_smlp_c(pk, &l.model, l.err_max, owner.leaf_param_bits, rng)?,
        first_bucket: l.first as u64 + 1,
        bucket_count: l.count as u64,
    })
}

fn encrypt_node(pk: &PublicKey, owner: &OwnerIndex, node: usize, rng: &mut ChaCha20Rng) -> Result<DspNode> {
    match &owner.nodes[node] {
        OwnerNode::Leaf(_) => encrypt_leaf(pk, owner, node, rng),
        OwnerNode::Router(r) => {
            let eta = r.children.len();
            let pred = encrypt_router(pk, &r.model, eta, rng)?;
            let (children, fuzzy) = match &r.position {
                Some(pos) => {
                    let mut stored = vec![0; eta];
                    for (j, &p) in pos.iter().enumerate() {
                        stored[p] = r.children[j];
                    }
                    (stored, Some(FuzzyLabelTable::build(pk, pos, rng)?))
                }
                None => (r.children.clone(), None),
            };
            Ok(DspNode::Router {
                level: r.level,
                pred,
                children,
                fuzzy,
                err_max: r.err_max,
            })
        }
    }
}

fn meta_of(owner: &OwnerIndex) -> IndexMeta {
    IndexMeta {
        n: owner.live_count() as u64,
        d: owner.d,
        b: owner.cfg.b,
        hidden: owner.cfg.hidden,
        leaf_scale_bits: owner.leaf_scale_bits,
    }
}

/// Encrypts the owner view into the DSP view.
pub fn encrypt_index<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    owner: &OwnerIndex,
    rng: &mut R,
) -> Result<DspIndex> {
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    let node_ids: Vec<usize> = (0..owner.nodes.len()).collect();
    let nodes = par_map(&node_ids, |_, &n| encrypt_node(pk, owner, n, &mut item_rng(&key, 1, n as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let pos: Vec<usize> = (0..owner.buckets.len()).collect();
    let buckets = par_map(&pos, |_, &p| encrypt_bucket(pk, owner, p, &mut item_rng(&key, 2, p as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(DspIndex {
        pk: pk.clone(),
        meta: meta_of(owner),
        nodes,
        buckets,
    })
}

// ---------------------------------------------------------------- updates

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeltaOp {
    ReplaceBucket(u64, EncBucket),
    InsertBucket(u64, EncBucket),
    RemoveBucket(u64),
    ReplaceLeaf(u32, DspNode),
    SetN(u64),
}

/// Changes that bring a DSP copy in line with the owner after an update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delta {
    pub ops: Vec<DeltaOp>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied(Delta),
    NotFound,
}

impl OwnerIndex {
    fn leaf_snapshot(&self) -> Vec<Option<OwnerLeaf>> {
        self.nodes
            .iter()
            .map(|n| match n {
                OwnerNode::Leaf(l) => Some(l.clone()),
                OwnerNode::Router(_) => None,
            })
            .collect()
    }

    /// Shifts the labels of every leaf whose buckets start after `pos`.
    fn shift_leaves_after(&mut self, pos: usize, by: i128) {
        let s2 = 1i128 << (2 * self.leaf_scale_bits);
        for node in self.nodes.iter_mut() {
            if let OwnerNode::Leaf(l) = node {
                if l.first > pos {
                    l.model.b2 += by * s2;
                }
            }
        }
    }

    fn finish_update<R: RngCore + rand::CryptoRng>(
        &mut self,
        dsp: &mut DspIndex,
        before: Vec<Option<OwnerLeaf>>,
        mut ops: Vec<DeltaOp>,
        rng: &mut R,
    ) -> Result<Delta> {
        self.refresh_leaf_ranges();
        self.calibrate(true)?;
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        for (n, old) in before.into_iter().enumerate() {
            let Some(old) = old else { continue };
            if self.leaf(n) != Some(&old) {
                let enc = encrypt_leaf(&dsp.pk, self, n, &mut item_rng(&key, 1, n as u64))?;
                ops.push(DeltaOp::ReplaceLeaf(n as u32, enc));
            }
        }
        ops.push(DeltaOp::SetN(self.live_count() as u64));
        let delta = Delta { ops };
        apply_delta(dsp, &delta)?;
        Ok(delta)
    }

    fn bucket_op(&self, pk: &PublicKey, pos: usize, insert: bool, rng: &mut ChaCha20Rng) -> Result<DeltaOp> {
        let b = encrypt_bucket(pk, self, pos, rng)?;
        Ok(if insert {
            DeltaOp::InsertBucket(pos as u64, b)
        } else {
            DeltaOp::ReplaceBucket(pos as u64, b)
        })
    }

    /// Inserts a point. The target bucket follows the key order: the bucket
    /// of the preceding live point if it has a free slot, else the bucket of
    /// the following one, else a new bucket right after the predecessor.
    pub fn insert<R: RngCore + rand::CryptoRng>(
        &mut self,
        dsp: &mut DspIndex,
        coords: &[f64],
        rng: &mut R,
    ) -> Result<Delta> {
        if coords.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: coords.len(),
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("coordinates must be finite".into()));
        }
        let limit = (1u64 << self.curve_width) - 1;
        let mut trial = self.ranks.clone();
        let mut ranks = Vec::with_capacity(self.d);
        for (j, &c) in coords.iter().enumerate() {
            let (v, grew) = trial.insert(j, c)?;
            if v > limit {
                return Err(Error::BoundExceeded(format!(
                    "rank value {v} exceeds the curve domain; rebuild required"
                )));
            }
            self.log.domain_grew |= grew;
            ranks.push(v);
        }
        self.ranks = trial;
        let cur = self.cur_of(&ranks)?;
        let key = self.key(&ranks, cur);
        let rec = self.records.len();
        self.records.push(Record {
            id: self.next_id,
            coords: coords.to_vec(),
            ranks,
            cur,
            live: true,
        });
        self.next_id += 1;
        self.log.inserts += 1;

        let sorted = self.sorted_keys_excluding(rec);
        let at = sorted.partition_point(|e| e.0 < key);
        let pred = at.checked_sub(1).map(|i| sorted[i].1 - 1);
        let succ = sorted.get(at).map(|e| e.1 - 1);
        let free = |pos: usize| self.buckets[pos].slots.iter().position(|s| s.is_none());
        let before = self.leaf_snapshot();
        let mut erng = ChaCha20Rng::from_seed({
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            k
        });
        let mut ops = Vec::new();
        let target = [pred, succ].into_iter().flatten().find_map(|p| free(p).map(|s| (p, s)));
        match target {
            Some((pos, slot)) => {
                self.buckets[pos].slots[slot] = Some(rec);
                ops.push(self.bucket_op(&dsp.pk, pos, false, &mut erng)?);
            }
            None => {
                let (pos, leaf) = match (pred, succ) {
                    (Some(p), _) => (p + 1, self.buckets[p].leaf),
                    (None, Some(s)) => (s, self.buckets[s].leaf),
                    (None, None) => (0, self.leaves()[0]),
                };
                let mut slots = vec![Some(rec)];
                if let Some(p) = pred {
                    // keys above the new one move along so the order holds
                    for i in 0..self.cfg.b {
                        if let Some(r) = self.buckets[p].slots[i] {
                            if self.key(&self.records[r].ranks, self.records[r].cur) > key {
                                slots.push(Some(r));
                                self.buckets[p].slots[i] = None;
                            }
                        }
                    }
                    if slots.len() > 1 {
                        ops.push(self.bucket_op(&dsp.pk, p, false, &mut erng)?);
                    }
                }
                slots.resize(self.cfg.b, None);
                self.buckets.insert(
                    pos,
                    OwnerBucket {
                        leaf,
                        dummy: false,
                        slots,
                    },
                );
                let owner_first = self.leaf(leaf).unwrap().first;
                self.shift_leaves_after(owner_first.max(pos.saturating_sub(1)), 1);
                ops.push(self.bucket_op(&dsp.pk, pos, true, &mut erng)?);
            }
        }
        self.finish_update(dsp, before, ops, rng)
    }

    fn sorted_keys_excluding(&self, rec: usize) -> Vec<(Key, usize)> {
        let bucket = self.bucket_of_records();
        let mut v: Vec<(Key, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| r.live && *i != rec)
            .map(|(i, r)| (self.key(&r.ranks, r.cur), bucket[i].unwrap()))
            .collect();
        v.sort();
        v
    }

    /// Deletes one live point with exactly these coordinates.
    pub fn delete<R: RngCore + rand::CryptoRng>(
        &mut self,
        dsp: &mut DspIndex,
        coords: &[f64],
        rng: &mut R,
    ) -> Result<UpdateOutcome> {
        let Some(rec) = self.records.iter().position(|r| r.live && r.coords == coords) else {
            return Ok(UpdateOutcome::NotFound);
        };
        let before = self.leaf_snapshot();
        self.records[rec].live = false;
        for j in 0..self.d {
            let (c, v) = (self.records[rec].coords[j], self.records[rec].ranks[j]);
            self.ranks.remove(j, c, v);
        }
        self.log.deletes += 1;
        let pos = self
            .buckets
            .iter()
            .position(|b| b.slots.contains(&Some(rec)))
            .ok_or_else(|| Error::Format("live record without bucket".into()))?;
        let slot = self.buckets[pos].slots.iter().position(|s| *s == Some(rec)).unwrap();
        self.buckets[pos].slots[slot] = None;
        let mut erng = ChaCha20Rng::from_seed({
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            k
        });
        let leaf = self.buckets[pos].leaf;
        let (first, count) = {
            let l = self.leaf(leaf).unwrap();
            (l.first, l.count)
        };
        let empty = self.buckets[pos].slots.iter().all(|s| s.is_none());
        let ops = if empty && count > 1 && pos + 1 < first + count {
            self.buckets.remove(pos);
            self.shift_leaves_after(pos, -1);
            vec![DeltaOp::RemoveBucket(pos as u64)]
        } else {
            vec![self.bucket_op(&dsp.pk, pos, false, &mut erng)?]
        };
        Ok(UpdateOutcome::Applied(self.finish_update(dsp, before, ops, rng)?))
    }
}

/// Applies a delta to a DSP copy.
pub fn apply_delta(dsp: &mut DspIndex, delta: &Delta) -> Result<()> {
    let d = dsp.meta.d;
    let b = dsp.meta.b;
    let check = |bk: &EncBucket| -> Result<()> {
        if bk.slots.len() != b || bk.slots.iter().any(|s| s.len() != d) || bk.mbr.len() != 2 * d {
            return Err(Error::Format("delta bucket has the wrong shape".into()));
        }
        Ok(())
    };
    for op in &delta.ops {
        match op {
            DeltaOp::ReplaceBucket(pos, bk) => {
                check(bk)?;
                let slot = dsp
                    .buckets
                    .get_mut(*pos as usize)
                    .ok_or_else(|| Error::Format(format!("bucket {pos} out of range")))?;
                *slot = bk.clone();
            }
            DeltaOp::InsertBucket(pos, bk) => {
                check(bk)?;
                if *pos as usize > dsp.buckets.len() {
                    return Err(Error::Format(format!("bucket {pos} out of range")));
                }
                dsp.buckets.insert(*pos as usize, bk.clone());
            }
            DeltaOp::RemoveBucket(pos) => {
                if *pos as usize >= dsp.buckets.len() {
                    return Err(Error::Format(format!("bucket {pos} out of range")));
                }
                dsp.buckets.remove(*pos as usize);
            }
            DeltaOp::ReplaceLeaf(node, leaf) => {
                let n = *node as usize;
                match (dsp.nodes.get(n), leaf) {
                    (Some(DspNode::Leaf { .. }), DspNode::Leaf { .. }) => dsp.nodes[n] = leaf.clone(),
                    _ => return Err(Error::Format(format!("node {node} is not a leaf"))),
                }
            }
            DeltaOp::SetN(n) => dsp.meta.n = *n,
        }
    }
    Ok(())
}

// ---------------------------------------------------------- serialization

fn write_smlp_p(pk: &PublicKey, out: &mut Vec<u8>, p: &SmlpP) {
    put_u32(out, p.scale_bits);
    put_u32(out, p.eta as u32);
    for &w in &p.w1 {
        put_i64(out, w);
    }
    for c in &p.b1 {
        pk.write_fixed(out, c);
    }
    for &w in &p.w2 {
        put_i64(out, w);
    }
    put_i128(out, p.b2);
}

fn read_smlp_p(pk: &PublicKey, r: &mut Reader<'_>, d: usize, hidden: usize) -> Result<SmlpP> {
    let scale_bits = r.u32()?;
    let eta = r.u32()? as usize;
    if scale_bits > 62 || eta == 0 {
        return Err(Error::Format("bad routing predictor header".into()));
    }
    let w1 = (0..hidden * d).map(|_| r.i64()).collect::<std::result::Result<_, _>>()?;
    let b1 = (0..hidden).map(|_| pk.read_fixed(r)).collect::<std::result::Result<_, _>>()?;
    let w2 = (0..hidden).map(|_| r.i64()).collect::<std::result::Result<_, _>>()?;
    Ok(SmlpP {
        d,
        hidden,
        scale_bits,
        eta,
        w1,
        b1,
        w2,
        b2: r.i128()?,
    })
}

fn write_node(pk: &PublicKey, out: &mut Vec<u8>, node: &DspNode) {
    match node {
        DspNode::Router {
            level,
            pred,
            children,
            fuzzy,
            err_max,
        } => {
            put_u8(out, level.tag());
            put_u8(out, 0);
            put_u32(out, pred.hidden as u32);
            put_u32(out, pred.d as u32);
            put_i64(out, *err_max);
            write_smlp_p(pk, out, pred);
            for &c in children {
                put_u32(out, c as u32);
            }
            match fuzzy {
                None => put_u8(out, 0),
                Some(t) => {
                    put_u8(out, 1);
                    for c in t.rows.iter().flatten() {
                        pk.write_fixed(out, c);
                    }
                }
            }
        }
        DspNode::Leaf {
            pred,
            first_bucket,
            bucket_count,
        } => {
            put_u8(out, Level::Leaf.tag());
            put_u8(out, 1);
            put_u32(out, pred.hidden as u32);
            put_u32(out, pred.d as u32);
            // the leaf bound only exists encrypted
            put_i64(out, -1);
            put_u64(out, pred.param_bits);
            for c in pred.flatten() {
                pk.write_fixed(out, &c);
            }
            put_u64(out, *first_bucket);
            put_u64(out, *bucket_count);
        }
    }
}

fn read_node(pk: &PublicKey, r: &mut Reader<'_>, meta: &IndexMeta, node_count: usize) -> Result<DspNode> {
    let level = Level::from_tag(r.u8()?)?;
    let mode = r.u8()?;
    let hidden = r.u32()? as usize;
    let d = r.u32()? as usize;
    let err_max = r.i64()?;
    if d != meta.d || (mode == 1 && hidden != meta.hidden) || hidden == 0 || hidden > 1 << 16 {
        return Err(Error::Format(format!("predictor shape {hidden}x{d} does not match the index")));
    }
    match (mode, level) {
        (0, Level::Head | Level::Intermediate) => {
            let pred = read_smlp_p(pk, r, d, hidden)?;
            let children = (0..pred.eta)
                .map(|_| {
                    let c = r.u32()? as usize;
                    if c >= node_count || c == 0 {
                        return Err(Error::Format(format!("child id {c} out of range")));
                    }
                    Ok(c)
                })
                .collect::<Result<Vec<_>>>()?;
            let fuzzy = match r.u8()? {
                0 => None,
                1 => {
                    let rows = (0..pred.eta)
                        .map(|_| (0..pred.eta).map(|_| pk.read_fixed(r)).collect::<std::result::Result<Vec<_>, _>>())
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    Some(FuzzyLabelTable { eta: pred.eta, rows })
                }
                t => return Err(Error::Format(format!("bad fuzzy flag {t}"))),
            };
            Ok(DspNode::Router {
                level,
                pred,
                children,
                fuzzy,
                err_max,
            })
        }
        (1, Level::Leaf) => {
            let param_bits = r.u64()?;
            let count = hidden * (d + 2) + 2;
            let flat = (0..count).map(|_| pk.read_fixed(r)).collect::<std::result::Result<Vec<_>, _>>()?;
            let pred = SmlpC::from_flat(d, hidden, param_bits, flat)?;
            Ok(DspNode::Leaf {
                pred,
                first_bucket: r.u64()?,
                bucket_count: r.u64()?,
            })
        }
        _ => Err(Error::Format(format!("mode {mode} does not fit level {level:?}"))),
    }
}

fn write_bucket(pk: &PublicKey, out: &mut Vec<u8>, bk: &EncBucket) {
    for c in bk.slots.iter().flatten().chain(&bk.mbr).chain(&bk.bitmap) {
        pk.write_fixed(out, c);
    }
}

fn read_bucket(pk: &PublicKey, r: &mut Reader<'_>, b: usize, d: usize) -> Result<EncBucket> {
    let mut ct = || pk.read_fixed(r).map_err(Error::from);
    let slots = (0..b)
        .map(|_| (0..d).map(|_| ct()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mbr = (0..2 * d).map(|_| ct()).collect::<Result<Vec<_>>>()?;
    let bitmap = (0..b).map(|_| ct()).collect::<Result<Vec<_>>>()?;
    Ok(EncBucket { slots, mbr, bitmap })
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], pk: &PublicKey) {
    out.extend_from_slice(magic);
    put_u8(out, FORMAT_VERSION);
    out.extend_from_slice(pk.key_id().as_ref());
}

fn read_header(r: &mut Reader<'_>, magic: &[u8; 4], pk: &PublicKey) -> Result<()> {
    if r.take(4)? != magic {
        return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let v = r.u8()?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    if r.take(16)? != pk.key_id().as_ref() {
        return Err(Error::Format("file was written under a different public key".into()));
    }
    Ok(())
}

/// `SLQ1` file image of the DSP view.
pub fn serialize_index(idx: &DspIndex) -> Vec<u8> {
    let pk = &idx.pk;
    let mut out = Vec::new();
    write_header(&mut out, INDEX_MAGIC, pk);
    let m = &idx.meta;
    put_u64(&mut out, m.n);
    put_u32(&mut out, m.d as u32);
    put_u32(&mut out, m.b as u32);
    put_u32(&mut out, m.hidden as u32);
    put_u32(&mut out, m.leaf_scale_bits);
    put_u32(&mut out, idx.nodes.len() as u32);
    for n in &idx.nodes {
        write_node(pk, &mut out, n);
    }
    put_u64(&mut out, idx.buckets.len() as u64);
    for bk in &idx.buckets {
        write_bucket(pk, &mut out, bk);
    }
    out
}

pub fn load_index(pk: &PublicKey, bytes: &[u8]) -> Result<DspIndex> {
    let mut r = Reader::new(bytes);
    read_header(&mut r, INDEX_MAGIC, pk)?;
    let meta = IndexMeta {
        n: r.u64()?,
        d: r.u32()? as usize,
        b: r.u32()? as usize,
        hidden: r.u32()? as usize,
        leaf_scale_bits: r.u32()?,
    };
    if meta.d == 0 || meta.b == 0 || meta.hidden == 0 || meta.leaf_scale_bits > 62 {
        return Err(Error::Format("bad index metadata".into()));
    }
    let node_count = r.u32()? as usize;
    if node_count == 0 || node_count > r.remaining() {
        return Err(Error::Format(format!("bad node count {node_count}")));
    }
    let nodes = (0..node_count)
        .map(|_| read_node(pk, &mut r, &meta, node_count))
        .collect::<Result<Vec<_>>>()?;
    let bucket_count = r.u64()? as usize;
    let per_bucket = (meta.b * meta.d + 2 * meta.d + meta.b) * pk.ciphertext_bytes();
    if bucket_count.checked_mul(per_bucket) != Some(r.remaining()) {
        return Err(Error::Format("bucket section length does not match its count".into()));
    }
    let buckets = (0..bucket_count)
        .map(|_| read_bucket(pk, &mut r, meta.b, meta.d))
        .collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    for n in &nodes {
        if let DspNode::Leaf {
            first_bucket,
            bucket_count: c,
            ..
        } = n
        {
            if *first_bucket == 0 || first_bucket + c - 1 > bucket_count as u64 {
                return Err(Error::Format("leaf bucket range out of bounds".into()));
            }
        }
    }
    Ok(DspIndex {
        pk: pk.clone(),
        meta,
        nodes,
        buckets,
    })
}

pub fn serialize_delta(pk: &PublicKey, delta: &Delta) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, DELTA_MAGIC, pk);
    put_u32(&mut out, delta.ops.len() as u32);
    for op in &delta.ops {
        match op {
            DeltaOp::ReplaceBucket(p, b) => {
                put_u8(&mut out, 1);
                put_u64(&mut out, *p);
                write_bucket(pk, &mut out, b);
            }
            DeltaOp::InsertBucket(p, b) => {
                put_u8(&mut out, 2);
                put_u64(&mut out, *p);
                write_bucket(pk, &mut out, b);
            }
            DeltaOp::RemoveBucket(p) => {
                put_u8(&mut out, 3);
                put_u64(&mut out, *p);
            }
            DeltaOp::ReplaceLeaf(n, leaf) => {
                put_u8(&mut out, 4);
                put_u32(&mut out, *n);
                write_node(pk, &mut out, leaf);
            }
            DeltaOp::SetN(n) => {
                put_u8(&mut out, 5);
                put_u64(&mut out, *n);
            }
        }
    }
    out
}

/// Parses a delta against the index it applies to (for shapes).
pub fn load_delta(pk: &PublicKey, meta: &IndexMeta, bytes: &[u8]) -> Result<Delta> {
    let mut r = Reader::new(bytes);
    read_header(&mut r, DELTA_MAGIC, pk)?;
    let count = r.u32()? as usize;
    if count > r.remaining() {
        return Err(Error::Format(format!("bad op count {count}")));
    }
    let mut ops = Vec::with_capacity(count);
    for _ in 0..count {
        ops.push(match r.u8()? {
            1 => DeltaOp::ReplaceBucket(r.u64()?, read_bucket(pk, &mut r, meta.b, meta.d)?),
            2 => DeltaOp::InsertBucket(r.u64()?, read_bucket(pk, &mut r, meta.b, meta.d)?),
            3 => DeltaOp::RemoveBucket(r.u64()?),
            4 => {
                let n = r.u32()?;
                DeltaOp::ReplaceLeaf(n, read_node(pk, &mut r, meta, usize::MAX)?)
            }
            5 => DeltaOp::SetN(r.u64()?),
            t => return Err(Error::Format(format!("unknown delta op {t}"))),
        });
    }
    r.expect_end()?;
    Ok(Delta { ops })
}

/// Published rank boundaries, bound to the public key they were built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RanksFile {
    pub key_id: String,
    /// Hex of the public key file, so a client needs only this file.
    pub public_key: String,
    pub curve_width: u32,
    pub ranks: RankSpace,
}

impl RanksFile {
    pub fn of(owner: &OwnerIndex, pk: &PublicKey) -> Self {
        Self {
            key_id: crate::paillier::hex(pk.key_id().as_ref()),
            public_key: crate::paillier::hex(&crate::paillier::public_key_to_bytes(pk)),
            curve_width: owner.curve_width,
            ranks: owner.ranks.clone(),
        }
    }

    pub fn public_key(&self) -> Result<PublicKey> {
        let bytes = hex::decode(&self.public_key).map_err(|e| Error::Format(format!("public key hex: {e}")))?;
        let pk = crate::paillier::public_key_from_bytes(&bytes)?;
        if crate::paillier::hex(pk.key_id().as_ref()) != self.key_id {
            return Err(Error::Format("ranks file key id does not match its public key".into()));
        }
        Ok(pk)
    }
}
