//! Synthetic datasets, plaintext oracles, query workloads and the
//! end-to-end benchmark driver.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{build_index, serialize_index, BuildConfig};
use crate::paillier::{keygen, KeyPair};
use crate::protocol::{ranks_to_coords, trapdoor};
use crate::service::{answer_query, finish_query, session_seed, DapEndpoint};
use crate::transport::tcp::spawn_dap_server;
use crate::transport::{DapConfig, DapService, Transcript};

pub const POINTS_MAGIC: &[u8; 4] = b"SLQP";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    Uni,
    Nor,
    /// Uniform with the last coordinate raised to `exponent`.
    Ske { exponent: f64 },
}

impl Distribution {
    pub const SKE_EXPONENT: f64 = 4.0;
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uni" => Ok(Self::Uni),
            "nor" => Ok(Self::Nor),
            "ske" => Ok(Self::Ske {
                exponent: Self::SKE_EXPONENT,
            }),
            other => Err(Error::InvalidInput(format!("unknown distribution {other:?}"))),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uni => f.write_str("uni"),
            Self::Nor => f.write_str("nor"),
            Self::Ske { .. } => f.write_str("ske"),
        }
    }
}

pub fn gen_dataset(dist: Distribution, n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut p: Vec<f64> = match dist {
                Distribution::Nor => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
                _ => (0..d).map(|_| rng.gen()).collect(),
            };
            if let Distribution::Ske { exponent } = dist {
                p[d - 1] = p[d - 1].powf(exponent);
            }
            p
        })
        .collect()
}

fn check_rows(rows: &[Vec<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::InvalidInput(format!("row {} has {} coordinates, expected {d}", i + 1, rows[i].len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("dataset holds a non-finite coordinate".into()));
    }
    Ok(())
}

/// Parses text rows of coordinates separated by commas or whitespace.
/// Blank lines, `#` comments and a leading non-numeric header are skipped.
pub fn parse_points_text(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: std::result::Result<Vec<f64>, _> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(str::parse)
            .collect();
        match fields {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() => continue,
            Err(e) => return Err(Error::InvalidInput(format!("line {}: {e}", no + 1))),
        }
    }
    check_rows(&rows)?;
    Ok(rows)
}

/// Binary rows: magic, `u32` d, `u64` n, then `n·d` big-endian `f64`s.
pub fn points_to_binary(rows: &[Vec<f64>]) -> Vec<u8> {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(16 + rows.len() * d * 8);
    out.extend_from_slice(POINTS_MAGIC);
    crate::codec::put_u32(&mut out, d as u32);
    crate::codec::put_u64(&mut out, rows.len() as u64);
    for v in rows.iter().flatten() {
        crate::codec::put_f64(&mut out, *v);
    }
    out
}

pub fn points_from_binary(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut r = crate::codec::Reader::new(bytes);
    if r.take(4)? != POINTS_MAGIC {
        return Err(Error::Format("not a binary point file".into()));
    }
    let d = r.u32()? as usize;
    let n = r.u64()? as usize;
    if d == 0 || r.remaining() != n.saturating_mul(d).saturating_mul(8) {
        return Err(Error::Format("point file length does not match its header".into()));
    }
    let rows = (0..n)
        .map(|_| (0..d).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    check_rows(&rows)?;
    Ok(rows)
}

/// Loads a dataset, binary if it starts with the magic, text otherwise.
pub fn load_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(POINTS_MAGIC) {
        return points_from_binary(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("point file is neither binary nor UTF-8".into()))?;
    parse_points_text(&text)
}

pub fn write_points_csv<W: Write>(mut w: W, rows: &[Vec<f64>]) -> Result<()> {
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

fn contains(p: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    p.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l <= v && v <= h)
}

/// Brute-force closed-box scan; returns row indices in order.
pub fn oracle_query(points: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Vec<usize> {
    (0..points.len()).filter(|&i| contains(&points[i], lo, hi)).collect()
}

/// Second implementation for cross-checking: binary search on a copy
/// sorted by the first coordinate, then filter the slice.
pub struct SortedOracle<'a> {
    points: &'a [Vec<f64>],
    order: Vec<usize>,
}

impl<'a> SortedOracle<'a> {
    pub fn new(points: &'a [Vec<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
        Self { points, order }
    }

    pub fn query(&self, lo: &[f64], hi: &[f64]) -> Vec<usize> {
        let key = |i: &usize| self.points[*i][0];
        let start = self.order.partition_point(|i| key(i) < lo[0]);
        let end = self.order.partition_point(|i| key(i) <= hi[0]);
        let mut out: Vec<usize> = self.order[start..end.max(start)]
            .iter()
            .copied()
            .filter(|&i| contains(&self.points[i], lo, hi))
            .collect();
        out.sort_unstable();
        out
    }
}

/// Componentwise bounding box of a dataset.
pub fn bounds(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = points[0].len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for j in 0..d {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    (lo, hi)
}

/// Query rectangles covering `area_fraction` of the data space's volume,
/// with side ratio `aspect` between the first and second dimension,
/// random centers, clipped to the space.
pub fn gen_queries(
    space: &(Vec<f64>, Vec<f64>),
    area_fraction: f64,
    aspect: f64,
    count: usize,
    seed: u64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = space;
    let d = lo.len();
    let ext: Vec<f64> = (0..d).map(|j| hi[j] - lo[j]).collect();
    // relative side lengths s_j with s_0 = aspect·s_1 and the others equal to s_1
    let rel = if d == 1 { area_fraction } else { (area_fraction / aspect).powf(1.0 / d as f64) };
    let sides: Vec<f64> = (0..d)
        .map(|j| match (d, j) {
            (1, _) => rel * ext[0],
            (_, 0) => aspect * rel * ext[0],
            _ => rel * ext[j],
        })
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c: Vec<f64> = (0..d).map(|j| lo[j] + rng.gen::<f64>() * ext[j]).collect();
            let ql = (0..d).map(|j| (c[j] - sides[j] / 2.0).max(lo[j])).collect();
            let qh = (0..d).map(|j| (c[j] + sides[j] / 2.0).min(hi[j])).collect();
            (ql, qh)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Inproc,
    Tcp,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Self::Inproc),
            "tcp" => Ok(Self::Tcp),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// Benchmark settings; the key=value names follow the paper's parameter
/// table where one exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n: usize,
    pub d: usize,
    pub dist: Distribution,
    pub key_bits: u32,
    /// Query area as a percentage of the data space.
    pub query_size: f64,
    pub aspect_ratio: f64,
    pub queries: usize,
    /// Points inserted before querying, as a percentage of `n`.
    pub insertion_rate: f64,
    pub mode: Mode,
    pub seed: u64,
    pub build: BuildConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 2,
            dist: Distribution::Uni,
            key_bits: 512,
            query_size: 0.0025,
            aspect_ratio: 0.25,
            queries: 100,
            insertion_rate: 0.0,
            mode: Mode::Inproc,
            seed: 1,
            build: BuildConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidInput(format!("bad value {v:?} for {key}")))
}

impl BenchConfig {
    pub const KEYS: [&'static str; 18] = [
        "n", "d", "dist", "K", "b", "m", "k", "query_size", "aspect_ratio", "queries", "insertion_rate",
        "mode", "seed", "dummy_ratio", "hidden", "epochs", "fuzzy", "tau",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n" => self.n = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "dist" => self.dist = v.parse()?,
            "K" => self.key_bits = parse(key, v)?,
            "b" => self.build.b = parse(key, v)?,
            "m" => self.build.m = parse(key, v)?,
            "k" => self.build.k = parse(key, v)?,
            "query_size" => self.query_size = parse(key, v.trim_end_matches('%'))?,
            "aspect_ratio" => self.aspect_ratio = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "insertion_rate" => self.insertion_rate = parse(key, v.trim_end_matches('%'))?,
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "dummy_ratio" => self.build.dummy_ratio = parse(key, v)?,
            "hidden" => self.build.hidden = parse(key, v)?,
            "epochs" => self.build.epochs = parse(key, v)?,
            "fuzzy" => self.build.fuzzy = parse(key, v)?,
            "tau" => self.build.tau = parse(key, v)?,
            _ => return Err(Error::InvalidInput(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn from_kv<R: BufRead>(r: R) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let b = &self.build;
        let mut m = BTreeMap::new();
        m.insert("n", self.n.to_string());
        m.insert("d", self.d.to_string());
        m.insert("dist", self.dist.to_string());
        m.insert("K", self.key_bits.to_string());
        m.insert("b", b.b.to_string());
        m.insert("m", b.m.to_string());
        m.insert("k", b.k.to_string());
        m.insert("query_size", self.query_size.to_string());
        m.insert("aspect_ratio", self.aspect_ratio.to_string());
        m.insert("queries", self.queries.to_string());
        m.insert("insertion_rate", self.insertion_rate.to_string());
        m.insert("mode", if self.mode == Mode::Tcp { "tcp" } else { "inproc" }.into());
        m.insert("seed", self.seed.to_string());
        m.insert("dummy_ratio", b.dummy_ratio.to_string());
        m.insert("hidden", b.hidden.to_string());
        m.insert("epochs", b.epochs.to_string());
        m.insert("fuzzy", b.fuzzy.to_string());
        m.insert("tau", b.tau.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Outcome of one benchmark query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query: usize,
    pub truth: usize,
    pub returned: usize,
    pub correct: usize,
    pub scan_width: usize,
    pub candidates: usize,
    pub found_low: bool,
    pub found_upp: bool,
    pub round_trips: u64,
    pub bytes: u64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub build_time_s: f64,
    pub index_bytes: usize,
    pub buckets: usize,
    pub inserted: usize,
    pub rows: Vec<QueryRow>,
    /// Per-query DSP-DAP transcripts.
    #[serde(skip)]
    pub transcripts: Vec<Transcript>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl BenchReport {
    /// `|returned ∩ truth| / |truth|` over all queries; 1 when nothing was expected.
    pub fn recall(&self) -> f64 {
        let truth: usize = self.rows.iter().map(|r| r.truth).sum();
        let correct: usize = self.rows.iter().map(|r| r.correct).sum();
        if truth == 0 {
            1.0
        } else {
            correct as f64 / truth as f64
        }
    }

    /// Aggregate precision; 1 when nothing was returned.
    pub fn precision(&self) -> f64 {
        let returned: usize = self.rows.iter().map(|r| r.returned).sum();
        let correct: usize = self.rows.iter().map(|r| r.correct).sum();
        if returned == 0 {
            1.0
        } else {
            correct as f64 / returned as f64
        }
    }

    pub fn min_precision(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| if r.returned == 0 { 1.0 } else { r.correct as f64 / r.returned as f64 })
            .fold(1.0, f64::min)
    }

    pub fn mean_latency_ms(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.latency_ms))
    }

    pub fn latency_percentile_ms(&self, p: f64) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.latency_ms).collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)]
    }

    pub fn mean_bytes(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.bytes as f64))
    }

    pub fn mean_scan_width(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.scan_width as f64))
    }

    pub fn max_scan_width(&self) -> usize {
        self.rows.iter().map(|r| r.scan_width).max().unwrap_or(0)
    }

    /// Equality ignoring wall-clock fields; transcripts must match byte for byte.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            r.build_time_s = 0.0;
            r.rows.iter_mut().for_each(|q| q.latency_ms = 0.0);
            r
        };
        let digests = |r: &Self| r.transcripts.iter().map(Transcript::digest).collect::<Vec<_>>();
        strip(self) == strip(other)
            && self.transcripts == other.transcripts
            && digests(self) == digests(other)
    }

    pub const ROW_COLUMNS: [&'static str; 11] = [
        "query", "truth", "returned", "correct", "scan_width", "candidates", "found_low", "found_upp",
        "round_trips", "bytes", "latency_ms",
    ];

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub const SUMMARY_COLUMNS: [&'static str; 17] = [
        "dist", "n", "d", "K", "b", "m", "query_size", "aspect_ratio", "queries", "build_time_s",
        "index_bytes", "buckets", "latency_mean_ms", "latency_p95_ms", "bytes_mean", "recall", "precision",
    ];

    pub fn summary_record(&self) -> Vec<String> {
        let c = &self.config;
        vec![
            c.dist.to_string(),
            c.n.to_string(),
            c.d.to_string(),
            c.key_bits.to_string(),
            c.build.b.to_string(),
            c.build.m.to_string(),
            c.query_size.to_string(),
            c.aspect_ratio.to_string(),
            self.rows.len().to_string(),
            format!("{:.3}", self.build_time_s),
            self.index_bytes.to_string(),
            self.buckets.to_string(),
            format!("{:.2}", self.mean_latency_ms()),
            format!("{:.2}", self.latency_percentile_ms(0.95)),
            format!("{:.0}", self.mean_bytes()),
            format!("{:.4}", self.recall()),
            format!("{:.4}", self.precision()),
        ]
    }

    pub fn write_summary_csv<W: Write>(reports: &[BenchReport], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::SUMMARY_COLUMNS).map_err(csv_err)?;
        for r in reports {
            out.write_record(r.summary_record()).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let c = &self.config;
        format!(
            "{} n={} d={} K={} b={} m={}: build {:.2}s, index {} bytes, {} buckets\n\
             {} queries: latency mean {:.1} ms (p95 {:.1}), {:.0} bytes/query, scan width mean {:.1} (max {})\n\
             recall {:.4}, precision {:.4}\n",
            c.dist,
            c.n,
            c.d,
            c.key_bits,
            c.build.b,
            c.build.m,
            self.build_time_s,
            self.index_bytes,
            self.buckets,
            self.rows.len(),
            self.mean_latency_ms(),
            self.latency_percentile_ms(0.95),
            self.mean_bytes(),
            self.mean_scan_width(),
            self.max_scan_width(),
            self.recall(),
            self.precision(),
        )
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn multiset_overlap(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> usize {
    let cmp = |x: &Vec<f64>, y: &Vec<f64>| {
        x.iter()
            .zip(y)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    a.sort_by(cmp);
    b.sort_by(cmp);
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match cmp(&a[i], &b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Runs a workload end to end with a freshly generated key and dataset.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let points = gen_dataset(cfg.dist, cfg.n, cfg.d, cfg.seed);
    let kp = keygen(cfg.key_bits, &mut ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6b6579))?;
    run_bench_with(cfg, &kp, &points)
}

/// Runs a workload over the given keys and dataset.
pub fn run_bench_with(cfg: &BenchConfig, kp: &KeyPair, points: &[Vec<f64>]) -> Result<BenchReport> {
    check_rows(points)?;
    let pk = kp.pk.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let build = BuildConfig {
        seed: cfg.seed,
        ..cfg.build.clone()
    };
    let t0 = Instant::now();
    let built = build_index(&pk, points, &build, &mut rng)?;
    let build_time_s = t0.elapsed().as_secs_f64();
    let (mut owner, mut dsp) = (built.owner, built.dsp);

    let mut all: Vec<Vec<f64>> = points.to_vec();
    let inserts = (cfg.insertion_rate / 100.0 * points.len() as f64).round() as usize;
    if inserts > 0 {
        let extra = gen_dataset(cfg.dist, inserts, points[0].len(), cfg.seed.wrapping_add(0x1000));
        for p in &extra {
            owner.insert(&mut dsp, p, &mut rng)?;
        }
        all.extend(extra);
    }
    let index_bytes = serialize_index(&dsp).len();

    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&cfg.seed.to_be_bytes());
    let svc = DapService::new(kp.clone(), DapConfig::with_seed(seed));
    let (dap, server) = match cfg.mode {
        Mode::Tcp if cfg.queries > 0 => {
            let (addr, h) = spawn_dap_server(svc, "127.0.0.1:0", Some(2 * cfg.queries))?;
            (DapEndpoint::Tcp(addr), Some(h))
        }
        _ => (DapEndpoint::Local(svc), None),
    };

    let space = bounds(&all);
    let queries = gen_queries(&space, cfg.query_size / 100.0, cfg.aspect_ratio, cfg.queries, cfg.seed.wrapping_add(2));
    let d = all[0].len();
    let mut rows = Vec::with_capacity(queries.len());
    let mut transcripts = Vec::with_capacity(queries.len());
    for (i, (lo, hi)) in queries.iter().enumerate() {
        let truth: Vec<Vec<f64>> = oracle_query(&all, lo, hi).into_iter().map(|k| all[k].clone()).collect();
        let t = Instant::now();
        let q = trapdoor(&pk, &owner.ranks, lo, hi, &mut rng)?;
        let ans = answer_query(&dsp, dap.link(&pk)?, &session_seed(&seed, i as u64), &q)?;
        let got = finish_query(&dap, &pk, ans.token, &ans.masks, d)?;
        let coords = ranks_to_coords(&owner.ranks, &got)?;
        let latency_ms = t.elapsed().as_secs_f64() * 1e3;
        let correct = multiset_overlap(coords.clone(), truth.clone());
        if correct < truth.len() {
            log::warn!(
                "query {i}: {} of {} results missing; corner found flags {:?}, scanned buckets {}..={}",
                truth.len() - correct,
                truth.len(),
                ans.trace.found,
                ans.trace.beta_low,
                ans.trace.beta_upp
            );
        }
        rows.push(QueryRow {
            query: i,
            truth: truth.len(),
            returned: coords.len(),
            correct,
            scan_width: ans.trace.scan_width(),
            candidates: ans.trace.candidates,
            found_low: ans.trace.found[0],
            found_upp: ans.trace.found[1],
            round_trips: ans.stats.round_trips,
            bytes: ans.transcript.total_bytes(),
            latency_ms,
        });
        transcripts.push(ans.transcript);
    }
    if let Some(h) = server {
        h.join()
            .map_err(|_| Error::Remote("DAP server thread panicked".into()))??;
    }
    Ok(BenchReport {
        config: cfg.clone(),
        build_time_s,
        index_bytes,
        buckets: dsp.buckets.len(),
        inserted: inserts,
        rows,
        transcripts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks_uniform(xs: &mut [f64]) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn datasets_are_seeded() {
        for dist in [Distribution::Uni, Distribution::Nor, "ske".parse().unwrap()] {
            assert_eq!(gen_dataset(dist, 50, 3, 9), gen_dataset(dist, 50, 3, 9));
            assert_ne!(gen_dataset(dist, 50, 3, 9), gen_dataset(dist, 50, 3, 10));
        }
    }

    #[test]
    fn uniform_passes_ks() {
        let pts = gen_dataset(Distribution::Uni, 10_000, 2, 4);
        for j in 0..2 {
            let mut col: Vec<f64> = pts.iter().map(|p| p[j]).collect();
            assert!(ks_uniform(&mut col) < 0.02);
        }
    }

    #[test]
    fn skewed_last_dimension_has_positive_skewness() {
        let pts = gen_dataset("ske".parse().unwrap(), 10_000, 2, 5);
        let col: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        let n = col.len() as f64;
        let mu = col.iter().sum::<f64>() / n;
        let m2 = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        let m3 = col.iter().map(|x| (x - mu).powi(3)).sum::<f64>() / n;
        assert!(m3 / m2.powf(1.5) > 0.0);
    }

    #[test]
    fn normal_moments() {
        let pts = gen_dataset(Distribution::Nor, 20_000, 1, 6);
        let n = pts.len() as f64;
        let mu = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let var = pts.iter().map(|p| (p[0] - mu).powi(2)).sum::<f64>() / n;
        assert!(mu.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn oracles_agree() {
        let pts = gen_dataset(Distribution::Nor, 3000, 2, 7);
        let sorted = SortedOracle::new(&pts);
        let qs = gen_queries(&bounds(&pts), 0.01, 1.0, 1000, 8);
        let mut nonempty = 0;
        for (lo, hi) in &qs {
            let a = oracle_query(&pts, lo, hi);
            assert_eq!(a, sorted.query(lo, hi));
            nonempty += !a.is_empty() as usize;
        }
        assert!(nonempty > 500);
        assert_eq!(oracle_query(&pts, &[-9.0, -9.0], &[9.0, 9.0]).len(), pts.len());
        assert!(oracle_query(&pts, &[0.5, 0.0], &[0.4, 1.0]).is_empty());
        assert!(sorted.query(&[0.5, 0.0], &[0.4, 1.0]).is_empty());
    }

    #[test]
    fn queries_have_the_requested_shape() {
        let space = (vec![0.0, 0.0], vec![10.0, 20.0]);
        let qs = gen_queries(&space, 0.0025 / 100.0, 0.25, 200, 1);
        let area = 200.0 * 0.0025 / 100.0;
        let mut unclipped = 0;
        for (lo, hi) in &qs {
            let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
            assert!(w <= 10.0 && h <= 20.0 && w >= 0.0 && h >= 0.0);
            if lo[0] > 0.0 && lo[1] > 0.0 && hi[0] < 10.0 && hi[1] < 20.0 {
                unclipped += 1;
                assert!((w * h - area).abs() < 1e-9 * area.max(1.0));
                assert!(((w / 10.0) / (h / 20.0) - 0.25).abs() < 1e-9);
            }
        }
        assert!(unclipped > 150);
    }

    #[test]
    fn text_and_binary_loaders() {
        let text = "x,y\n# comment\n1.5, 2\n\n3 4\n";
        assert_eq!(parse_points_text(text).unwrap(), vec![vec![1.5, 2.0], vec![3.0, 4.0]]);
        assert!(parse_points_text("1,2\n3\n").is_err());
        assert!(parse_points_text("1,2\nfoo,bar\n").is_err());
        let pts = gen_dataset(Distribution::Nor, 20, 3, 2);
        assert_eq!(points_from_binary(&points_to_binary(&pts)).unwrap(), pts);
        let mut bytes = points_to_binary(&pts);
        bytes.pop();
        assert!(points_from_binary(&bytes).is_err());
        let mut csv = Vec::new();
        write_points_csv(&mut csv, &pts).unwrap();
        assert_eq!(parse_points_text(std::str::from_utf8(&csv).unwrap()).unwrap(), pts);
    }

    #[test]
    fn config_roundtrips_through_key_value_text() {
        let mut cfg = BenchConfig::default();
        cfg.set("b", "16").unwrap();
        cfg.set("query_size", "0.01%").unwrap();
        cfg.set("dist", "ske").unwrap();
        cfg.set("mode", "tcp").unwrap();
        let back = BenchConfig::from_kv(cfg.to_kv().as_bytes()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.build.b, 16);
        assert!(BenchConfig::from_kv("nope = 1".as_bytes()).is_err());
        assert!(BenchConfig::from_kv("b 4".as_bytes()).is_err());
        for k in BenchConfig::KEYS {
            assert!(cfg.to_kv().contains(&format!("{k} = ")));
        }
    }

    #[test]
    fn zero_query_workload_gives_an_empty_report() {
        let cfg = BenchConfig {
            n: 40,
            queries: 0,
            build: BuildConfig {
                epochs: 50,
                ..BuildConfig::default()
            },
            ..BenchConfig::default()
        };
        let rep = run_bench_with(&cfg, crate::paillier::test_keys::k512(), &gen_dataset(cfg.dist, 40, 2, 1)).unwrap();
        assert!(rep.rows.is_empty());
        assert_eq!(rep.recall(), 1.0);
        assert_eq!(rep.precision(), 1.0);
        let mut out = Vec::new();
        BenchReport::write_summary_csv(&[rep], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 2);
    }
}
