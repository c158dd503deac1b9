//! Data-owner geometry: rank space, Morton codes, buckets, MBRs and grid
//! partitioning.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank value reserved for padding and deleted slots.
pub const SENTINEL: u64 = 0;
/// Default spacing between consecutive rank values, leaving room for inserts.
pub const DEFAULT_STRIDE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPoint {
    pub id: u64,
    /// Rank-space value per dimension (rank times stride, never the sentinel).
    pub ranks: Vec<u64>,
    pub cur: u128,
    /// One-based position in curve order.
    pub ord: usize,
    /// One-based bucket id.
    pub bkt: usize,
}

fn cmp_from(a: &[f64], b: &[f64], start: usize) -> Ordering {
    let d = a.len();
    (0..d)
        .map(|k| (start + k) % d)
        .map(|j| a[j].total_cmp(&b[j]))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// One-based per-dimension ranks. Ties fall back to the following
/// dimensions (cyclically) and finally to the record id.
pub fn rank_map(points: &[Vec<f64>], ids: &[u64]) -> Result<Vec<Vec<u64>>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if ids.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: ids.len(),
        });
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidInput("points must share a positive dimension".into()));
    }
    if points.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN coordinate".into()));
    }
    let mut ranks = vec![vec![0u64; d]; n];
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..d {
        order.sort_by(|&a, &b| cmp_from(&points[a], &points[b], j).then(ids[a].cmp(&ids[b])));
        for (r, &i) in order.iter().enumerate() {
            ranks[i][j] = r as u64 + 1;
        }
    }
    Ok(ranks)
}

/// Bits needed per dimension to encode values up to `max`.
pub fn bit_width(max: u64) -> u32 {
    64 - max.leading_zeros()
}

/// Interleaves bits: bit `i` of dimension `j` lands at position `i·d + j`.
pub fn morton_encode(ranks: &[u64], width: u32) -> Result<u128> {
    let d = ranks.len() as u32;
    if d == 0 || d * width > 128 {
        return Err(Error::InvalidInput(format!(
            "{d} dimensions of {width} bits exceed a 128-bit code"
        )));
    }
    let mut code = 0u128;
    for (j, &r) in ranks.iter().enumerate() {
        if width < 64 && r >> width != 0 {
            return Err(Error::BoundExceeded(format!("rank {r} exceeds {width} bits")));
        }
        for i in 0..width {
            code |= (((r >> i) & 1) as u128) << (i * d + j as u32);
        }
    }
    Ok(code)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mbr {
    pub lo: Vec<u64>,
    pub hi: Vec<u64>,
}

impl Mbr {
    pub fn sentinel(d: usize) -> Self {
        Self {
            lo: vec![SENTINEL; d],
            hi: vec![SENTINEL; d],
        }
    }

    pub fn contains(&self, p: &[u64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn intersects(&self, lo: &[u64], hi: &[u64]) -> bool {
        (0..self.lo.len()).all(|j| self.lo[j] <= hi[j] && lo[j] <= self.hi[j])
    }

    /// Slot order used when an MBR is encrypted: all lows, then all highs.
    pub fn flatten(&self) -> Vec<u64> {
        self.lo.iter().chain(&self.hi).copied().collect()
    }
}

/// Componentwise bounds of the live points; the sentinel box when empty.
pub fn compute_mbr<'a, I>(points: I, d: usize) -> Mbr
where
    I: IntoIterator<Item = &'a [u64]>,
{
    let mut it = points.into_iter().peekable();
    if it.peek().is_none() {
        return Mbr::sentinel(d);
    }
    let mut lo = vec![u64::MAX; d];
    let mut hi = vec![0; d];
    for p in it {
        for j in 0..d {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    Mbr { lo, hi }
}

/// Sorts points by curve value (ties by rank tuple) and fills `ord`/`bkt`.
pub fn sort_by_curve(points: &mut [RankPoint], b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::InvalidInput("bucket capacity must be positive".into()));
    }
    points.sort_by(|p, q| p.cur.cmp(&q.cur).then_with(|| p.ranks.cmp(&q.ranks)));
    for (i, p) in points.iter_mut().enumerate() {
        p.ord = i + 1;
        p.bkt = (i + 1).div_ceil(b);
    }
    Ok(())
}

/// A bucket before encryption: member indices into the curve-sorted list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketLayout {
    pub members: Vec<usize>,
    pub mbr: Mbr,
}

/// Groups a curve-sorted list into buckets of `b`: bucket `i` holds the
/// points with `ord ∈ ((i-1)b, ib]`.
pub fn assign_buckets(sorted: &[RankPoint], b: usize) -> Result<Vec<BucketLayout>> {
    if b == 0 {
        return Err(Error::InvalidInput("bucket capacity must be positive".into()));
    }
    let d = sorted.first().map_or(0, |p| p.ranks.len());
    Ok((0..sorted.len())
        .collect::<Vec<_>>()
        .chunks(b)
        .map(|idx| BucketLayout {
            members: idx.to_vec(),
            mbr: compute_mbr(idx.iter().map(|&i| sorted[i].ranks.as_slice()), d),
        })
        .collect())
}

/// Nested quantile cuts: `cuts` split one dimension, and each resulting
/// slab carries its own cuts for the next dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutTree {
    /// First value of slab `c + 1`; a value lies in slab `#{cuts <= v}`.
    pub cuts: Vec<u64>,
    pub children: Vec<CutTree>,
}

impl CutTree {
    fn slab(&self, v: u64) -> usize {
        self.cuts.partition_point(|&c| c <= v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub splits_per_dim: usize,
    pub d: usize,
    /// Dimension-0 column boundaries (first value of each later column).
    pub column_bounds: Vec<u64>,
    pub cuts: CutTree,
}

impl GridSpec {
    pub fn cell_count(&self) -> usize {
        self.splits_per_dim.pow(self.d as u32)
    }

    /// Cell index of any rank-space point, in lexicographic cell order
    /// (column-major for `d = 2`). Monotone under componentwise `<=`
    /// within a column, which keeps range scans over cells complete.
    pub fn cell_of(&self, p: &[u64]) -> usize {
        let mut node = &self.cuts;
        let mut idx = 0;
        for (j, &v) in p.iter().enumerate().take(self.d) {
            let c = node.slab(v);
            idx = idx * self.splits_per_dim + c;
            if j + 1 < self.d {
                node = &node.children[c];
            }
        }
        idx
    }
}

/// `g = 2^⌊log_{2^d}(m/b)⌋`, or 1 when `m/b < 2^d`.
pub fn grid_splits(m: usize, b: usize, d: usize) -> usize {
    let mut e = 0;
    while (1u128 << (d * (e + 1))) * b as u128 <= m as u128 {
        e += 1;
    }
    1 << e
}

fn split_nested(points: &[&[u64]], idx: Vec<usize>, j: usize, g: usize) -> CutTree {
    let d = points[0].len();
    let mut idx = idx;
    idx.sort_by_key(|&i| (points[i][j], i));
    let len = idx.len();
    let parts: Vec<Vec<usize>> = (0..g)
        .map(|c| idx[c * len / g..(c + 1) * len / g].to_vec())
        .collect();
    let mut cuts = vec![u64::MAX; g - 1];
    let mut next = u64::MAX;
    for c in (1..g).rev() {
        if let Some(&i) = parts[c].first() {
            next = points[i][j];
        }
        cuts[c - 1] = next;
    }
    let children = if j + 1 < d {
        parts
            .into_iter()
            .map(|p| split_nested(points, p, j + 1, g))
            .collect()
    } else {
        Vec::new()
    };
    CutTree { cuts, children }
}

/// Quantile grid: dimension 0 is cut into `g` equal-count columns, each
/// column is cut independently along dimension 1, and so on. Returns the
/// spec and each point's cell index.
pub fn grid_partition(points: &[&[u64]], m: usize, b: usize) -> Result<(GridSpec, Vec<usize>)> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput("cannot partition an empty set".into()));
    }
    if b == 0 || m <= b {
        return Err(Error::InvalidInput(format!("m = {m} must exceed b = {b} >= 1")));
    }
    let d = points[0].len();
    let g = grid_splits(m, b, d);
    let cuts = split_nested(points, (0..n).collect(), 0, g);
    let spec = GridSpec {
        splits_per_dim: g,
        d,
        column_bounds: cuts.cuts.clone(),
        cuts,
    };
    let labels = points.iter().map(|p| spec.cell_of(p)).collect();
    Ok((spec, labels))
}

/// Published per-dimension rank boundaries: sorted `(coordinate, value)`
/// pairs. Clients map query rectangles through these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSpace {
    pub stride: u64,
    pub dims: Vec<Vec<(f64, u64)>>,
}

impl RankSpace {
    pub fn new(points: &[Vec<f64>], ranks: &[Vec<u64>], stride: u64) -> Self {
        let d = points[0].len();
        let mut dims = vec![Vec::with_capacity(points.len()); d];
        for (p, r) in points.iter().zip(ranks) {
            for j in 0..d {
                dims[j].push((p[j], r[j] * stride));
            }
        }
        for col in &mut dims {
            col.sort_by(|a, b| a.1.cmp(&b.1));
        }
        Self { stride, dims }
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn max_value(&self) -> u64 {
        self.dims
            .iter()
            .filter_map(|c| c.last().map(|e| e.1))
            .max()
            .unwrap_or(0)
    }

    /// Smallest value whose coordinate is `>= q`.
    pub fn lower(&self, j: usize, q: f64) -> Option<u64> {
        let col = &self.dims[j];
        let i = col.partition_point(|e| e.0 < q);
        col.get(i).map(|e| e.1)
    }

    /// Largest value whose coordinate is `<= q`.
    pub fn upper(&self, j: usize, q: f64) -> Option<u64> {
        let col = &self.dims[j];
        let i = col.partition_point(|e| e.0 <= q);
        i.checked_sub(1).map(|i| col[i].1)
    }

    /// Maps a closed rectangle to rank space; `None` when some dimension
    /// holds no coordinate inside it.
    pub fn map_rect(&self, lo: &[f64], hi: &[f64]) -> Result<Option<(Vec<u64>, Vec<u64>)>> {
        if lo.len() != self.d() || hi.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: lo.len().min(hi.len()),
            });
        }
        let mut l = Vec::with_capacity(self.d());
        let mut h = Vec::with_capacity(self.d());
        for j in 0..self.d() {
            match (self.lower(j, lo[j]), self.upper(j, hi[j])) {
                (Some(a), Some(b)) if a <= b => {
                    l.push(a);
                    h.push(b);
                }
                _ => return Ok(None),
            }
        }
        Ok(Some((l, h)))
    }

    /// Exact rank value of an existing coordinate in dimension `j`.
    pub fn value_of(&self, j: usize, coord: f64) -> Option<u64> {
        let col = &self.dims[j];
        let i = col.partition_point(|e| e.0 < coord);
        col.get(i).filter(|e| e.0 == coord).map(|e| e.1)
    }

    /// Allocates a value for a new coordinate, placed after any equal ones.
    /// The boolean is true when the domain had to grow past its maximum.
    pub fn insert(&mut self, j: usize, coord: f64) -> Result<(u64, bool)> {
        let stride = self.stride;
        let col = &mut self.dims[j];
        let i = col.partition_point(|e| e.0 <= coord);
        let prev = if i == 0 { SENTINEL } else { col[i - 1].1 };
        let (value, grew) = match col.get(i) {
            None => (prev + stride, true),
            Some(next) if next.1 - prev >= 2 => (prev + (next.1 - prev) / 2, false),
            Some(_) => {
                return Err(Error::BoundExceeded(format!(
                    "no free rank value between {prev} and its successor; rebuild required"
                )))
            }
        };
        col.insert(i, (coord, value));
        Ok((value, grew))
    }

    /// Removes one occurrence of `(coord, value)`.
    pub fn remove(&mut self, j: usize, coord: f64, value: u64) -> bool {
        let col = &mut self.dims[j];
        match col.iter().position(|e| e.0 == coord && e.1 == value) {
            Some(i) => {
                col.remove(i);
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rank_examples() {
        let r = rank_map(&[vec![3.0, 7.0], vec![1.0, 9.0]], &[0, 1]).unwrap();
        assert_eq!(r, vec![vec![2, 1], vec![1, 2]]);
        assert_eq!(rank_map(&[vec![0.3, 0.4]], &[5]).unwrap(), vec![vec![1, 1]]);
        let same = vec![vec![1.0, 1.0]; 4];
        let r = rank_map(&same, &[3, 1, 2, 0]).unwrap();
        assert_eq!(r, vec![vec![4, 4], vec![2, 2], vec![3, 3], vec![1, 1]]);
    }

    #[test]
    fn rank_ties_use_following_dimension() {
        // equal x, so y decides; equal y, so x decides
        let pts = vec![vec![1.0, 5.0], vec![1.0, 2.0], vec![0.0, 5.0]];
        let r = rank_map(&pts, &[0, 1, 2]).unwrap();
        assert_eq!(r, vec![vec![3, 3], vec![2, 1], vec![1, 2]]);
    }

    proptest! {
        #[test]
        fn ranks_are_a_bijection(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64])
                .collect();
            let ids: Vec<u64> = (0..n as u64).collect();
            let r = rank_map(&pts, &ids).unwrap();
            for j in 0..2 {
                let mut col: Vec<u64> = r.iter().map(|x| x[j]).collect();
                col.sort();
                prop_assert_eq!(col, (1..=n as u64).collect::<Vec<_>>());
            }
        }

        #[test]
        fn morton_monotone_per_coordinate(x in 0u64..1024, y in 0u64..1023) {
            let a = morton_encode(&[x, y], 10).unwrap();
            let b = morton_encode(&[x, y + 1], 10).unwrap();
            prop_assert!(a < b);
        }
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode(&[0, 0], 4).unwrap(), 0);
        assert_eq!(morton_encode(&[1, 1], 4).unwrap(), 3);
        assert_eq!(morton_encode(&[2, 3], 2).unwrap(), 14);
        assert!(morton_encode(&[4, 0], 2).is_err());
    }

    fn brute_interleave(x: u64, y: u64, w: u32) -> u128 {
        let mut s = String::new();
        for i in (0..w).rev() {
            s.push(if (y >> i) & 1 == 1 { '1' } else { '0' });
            s.push(if (x >> i) & 1 == 1 { '1' } else { '0' });
        }
        u128::from_str_radix(&s, 2).unwrap()
    }

    #[test]
    fn morton_matches_string_interleaving() {
        for x in 0..16 {
            for y in 0..16 {
                assert_eq!(morton_encode(&[x, y], 4).unwrap(), brute_interleave(x, y, 4));
            }
        }
    }

    #[test]
    fn z_range_completeness_exhaustive_8x8() {
        let z = |x: u64, y: u64| morton_encode(&[x, y], 3).unwrap();
        for x0 in 0..8 {
            for x1 in x0..8 {
                for y0 in 0..8 {
                    for y1 in y0..8 {
                        let (zl, zh) = (z(x0, y0), z(x1, y1));
                        for x in x0..=x1 {
                            for y in y0..=y1 {
                                assert!((zl..=zh).contains(&z(x, y)));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn z_range_completeness_random_1024() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for _ in 0..300 {
            let (a, b) = (rng.gen_range(0..1024u64), rng.gen_range(0..1024u64));
            let (c, e) = (rng.gen_range(0..1024u64), rng.gen_range(0..1024u64));
            let lo = [a.min(b), c.min(e)];
            let hi = [a.max(b), c.max(e)];
            let zl = morton_encode(&lo, 10).unwrap();
            let zh = morton_encode(&hi, 10).unwrap();
            for _ in 0..50 {
                let p = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
                let z = morton_encode(&p, 10).unwrap();
                assert!(zl <= z && z <= zh);
            }
        }
    }

    #[test]
    fn bucket_assignment() {
        let mk = |i: usize| RankPoint {
            id: i as u64,
            ranks: vec![i as u64 + 1, 10 - i as u64],
            cur: i as u128,
            ord: 0,
            bkt: 0,
        };
        let mut pts: Vec<_> = (0..10).map(mk).collect();
        sort_by_curve(&mut pts, 8).unwrap();
        assert_eq!(pts[8].bkt, 2);
        assert_eq!(pts[7].bkt, 1);
        let buckets = assign_buckets(&pts, 8).unwrap();
        assert_eq!(buckets.len(), 2);
        assert_eq!(buckets[1].members.len(), 2);
        assert_eq!(buckets[1].mbr, Mbr { lo: vec![9, 1], hi: vec![10, 2] });
        assert_eq!(assign_buckets(&pts[..8], 8).unwrap().len(), 1);
        assert!(assign_buckets(&pts, 0).is_err());
    }

    #[test]
    fn mbr_examples() {
        let pts: Vec<&[u64]> = vec![&[1, 5], &[3, 2]];
        assert_eq!(compute_mbr(pts, 2), Mbr { lo: vec![1, 2], hi: vec![3, 5] });
        let one: Vec<&[u64]> = vec![&[4, 4]];
        assert_eq!(compute_mbr(one, 2), Mbr { lo: vec![4, 4], hi: vec![4, 4] });
        assert_eq!(compute_mbr(Vec::<&[u64]>::new(), 2), Mbr::sentinel(2));
    }

    #[test]
    fn mbr_matches_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pts: Vec<Vec<u64>> = (0..rng.gen_range(1..20))
                .map(|_| vec![rng.gen_range(1..100), rng.gen_range(1..100)])
                .collect();
            let m = compute_mbr(pts.iter().map(Vec::as_slice), 2);
            for j in 0..2 {
                assert_eq!(m.lo[j], pts.iter().map(|p| p[j]).min().unwrap());
                assert_eq!(m.hi[j], pts.iter().map(|p| p[j]).max().unwrap());
            }
        }
    }

    #[test]
    fn grid_formula() {
        assert_eq!(grid_splits(300, 8, 2), 4);
        assert_eq!(grid_splits(31, 8, 2), 1);
        assert_eq!(grid_splits(64, 4, 2), 4);
        assert_eq!(grid_splits(300, 8, 3), 2);
    }

    #[test]
    fn grid_sixteen_uniform_points() {
        let pts: Vec<Vec<u64>> = (0..16).map(|i| vec![i % 4 + 1, i / 4 + 1]).collect();
        let refs: Vec<&[u64]> = pts.iter().map(Vec::as_slice).collect();
        // m/b = 4 gives g = 2
        let (spec, labels) = grid_partition(&refs, 16, 4).unwrap();
        assert_eq!(spec.splits_per_dim, 2);
        for cell in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == cell).count(), 4);
        }
        // lower-left quadrant is cell 0, then up the first column
        assert_eq!(labels[0], 0);
        assert_eq!(labels[12], 1);
        assert_eq!(labels[3], 2);
        assert_eq!(labels[15], 3);
    }

    #[test]
    fn grid_cells_bounded() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let n: usize = 20_000;
        let pts: Vec<Vec<u64>> = (0..n)
            .map(|_| vec![rng.gen_range(1..=n as u64), rng.gen_range(1..=n as u64)])
            .collect();
        let refs: Vec<&[u64]> = pts.iter().map(Vec::as_slice).collect();
        let (spec, labels) = grid_partition(&refs, 300, 8).unwrap();
        assert_eq!(spec.splits_per_dim, 4);
        for col in 0..4 {
            let c = pts.iter().filter(|p| spec.cuts.slab(p[0]) == col).count();
            assert!(c.abs_diff(n / 4) <= 1, "column {col} has {c}");
        }
        for cell in 0..16 {
            let c = labels.iter().filter(|&&l| l == cell).count();
            assert!(c <= n.div_ceil(16) + 4, "cell {cell} has {c}");
        }
    }

    #[test]
    fn cell_order_is_monotone_for_dominated_points() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let pts: Vec<Vec<u64>> = (0..500)
            .map(|_| vec![rng.gen_range(1..5000), rng.gen_range(1..5000)])
            .collect();
        let refs: Vec<&[u64]> = pts.iter().map(Vec::as_slice).collect();
        let (spec, _) = grid_partition(&refs, 300, 8).unwrap();
        for _ in 0..5000 {
            let a = [rng.gen_range(0..5000u64), rng.gen_range(0..5000u64)];
            let b = [a[0] + rng.gen_range(0..300), a[1] + rng.gen_range(0..300)];
            assert!(spec.cell_of(&a) <= spec.cell_of(&b));
        }
    }

    #[test]
    fn rank_space_lookup_and_insert() {
        let pts = vec![vec![0.1, 5.0], vec![0.5, 1.0], vec![0.3, 3.0]];
        let ranks = rank_map(&pts, &[0, 1, 2]).unwrap();
        let mut rs = RankSpace::new(&pts, &ranks, 16);
        assert_eq!(rs.map_rect(&[0.0, 0.0], &[1.0, 10.0]).unwrap(), Some((vec![16, 16], vec![48, 48])));
        assert_eq!(rs.map_rect(&[0.3, 3.0], &[0.3, 3.0]).unwrap(), Some((vec![32, 32], vec![32, 32])));
        assert_eq!(rs.map_rect(&[0.31, 0.0], &[0.49, 10.0]).unwrap(), None);
        let (v, grew) = rs.insert(0, 0.2).unwrap();
        assert_eq!((v, grew), (24, false));
        assert_eq!(rs.insert(0, 0.9).unwrap(), (64, true));
        assert_eq!(rs.insert(0, 0.0).unwrap(), (8, false));
        assert_eq!(rs.value_of(0, 0.2), Some(24));
        assert!(rs.remove(0, 0.2, 24));
        assert_eq!(rs.value_of(0, 0.2), None);
    }
}
