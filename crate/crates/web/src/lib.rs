//! Browser demo: builds a small encrypted index in the page and runs the
//! two-server query protocol in-process.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use slq_core::bench::{gen_dataset, oracle_query, Distribution};
use slq_core::index::{bucket_mbr, build_index, BuildConfig, DspIndex, OwnerIndex};
use slq_core::paillier::{keygen, KeyPair};
use slq_core::protocol::{ranks_to_coords, trapdoor};
use slq_core::service::{answer_query, finish_query, session_seed, DapEndpoint};
use slq_core::transport::{DapConfig, DapService};

pub const DEMO_KEY_BITS: u32 = 512;

#[derive(Serialize)]
pub struct BucketView {
    pub id: usize,
    pub leaf: usize,
    pub dummy: bool,
    /// Coordinate-space MBR `[x1, y1, x2, y2]`; absent for empty buckets.
    pub mbr: Option<[f64; 4]>,
}

#[derive(Serialize)]
pub struct Layout {
    /// `[x, y, bucket]` per live point.
    pub points: Vec<(f64, f64, usize)>,
    pub buckets: Vec<BucketView>,
    pub leaves: usize,
    pub bounds: [f64; 4],
}

#[derive(Serialize)]
pub struct QueryView {
    pub results: Vec<(f64, f64)>,
    pub expected: usize,
    pub scan: (usize, usize),
    pub candidates: usize,
    pub found: [bool; 2],
    pub messages: usize,
    pub bytes: u64,
    pub millis: f64,
}

#[derive(Serialize)]
pub struct CurvePoint {
    /// Position in the global key order.
    pub rank: usize,
    pub bucket: usize,
    pub predicted: i64,
    pub err_max: i64,
    pub leaf: usize,
}

/// Plain-Rust core of the demo; the wasm wrapper only adds JSON.
pub struct DemoState {
    points: Vec<Vec<f64>>,
    owner: OwnerIndex,
    dsp: DspIndex,
    kp: KeyPair,
    dap: DapEndpoint,
    queries: u64,
    seed: [u8; 32],
}

impl DemoState {
    pub fn new(dist: &str, n: usize, b: usize, m: usize, seed: u64) -> Result<Self, String> {
        let dist: Distribution = dist.parse().map_err(|e| format!("{e}"))?;
        if !(8..=3000).contains(&n) {
            return Err("the demo handles 8 to 3000 points".into());
        }
        let points = gen_dataset(dist, n, 2, seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let kp = keygen(DEMO_KEY_BITS, &mut rng).map_err(|e| e.to_string())?;
        let cfg = BuildConfig {
            b,
            m,
            epochs: 300,
            seed,
            ..BuildConfig::default()
        };
        let built = build_index(&kp.pk, &points, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&seed.to_le_bytes());
        let dap = DapEndpoint::Local(DapService::new(kp.clone(), DapConfig::with_seed(s)));
        Ok(Self {
            points,
            owner: built.owner,
            dsp: built.dsp,
            kp,
            dap,
            queries: 0,
            seed: s,
        })
    }

    pub fn layout(&self) -> Layout {
        let o = &self.owner;
        let bucket = o.bucket_of_records();
        let points = o
            .records
            .iter()
            .zip(&bucket)
            .filter(|(r, _)| r.live)
            .map(|(r, b)| (r.coords[0], r.coords[1], b.unwrap_or(0)))
            .collect();
        let buckets = o
            .buckets
            .iter()
            .enumerate()
            .map(|(i, bk)| {
                let m = bucket_mbr(o, i);
                let mbr = (m.hi.iter().any(|&v| v > 0))
                    .then(|| ranks_to_coords(&o.ranks, &[m.lo.clone(), m.hi.clone()]).ok())
                    .flatten()
                    .map(|c| [c[0][0], c[0][1], c[1][0], c[1][1]]);
                BucketView {
                    id: i + 1,
                    leaf: bk.leaf,
                    dummy: bk.dummy,
                    mbr,
                }
            })
            .collect();
        let (lo, hi) = slq_core::bench::bounds(&self.points);
        Layout {
            points,
            buckets,
            leaves: o.leaves().len(),
            bounds: [lo[0], lo[1], hi[0], hi[1]],
        }
    }

    /// Runs the secure query protocol with both servers in-process.
    pub fn query(&mut self, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<QueryView, String> {
        let (lo, hi) = ([x1.min(x2), y1.min(y2)], [x1.max(x2), y1.max(y2)]);
        let started = now();
        let pk = &self.kp.pk;
        let mut rng = ChaCha20Rng::from_seed(session_seed(&self.seed, u64::MAX - self.queries));
        let mut run = || -> slq_core::Result<_> {
            let q = trapdoor(pk, &self.owner.ranks, &lo, &hi, &mut rng)?;
            let ans = answer_query(&self.dsp, self.dap.link(pk)?, &session_seed(&self.seed, self.queries), &q)?;
            let pts = finish_query(&self.dap, pk, ans.token, &ans.masks, 2)?;
            Ok((ans, ranks_to_coords(&self.owner.ranks, &pts)?))
        };
        let (ans, coords) = run().map_err(|e| e.to_string())?;
        self.queries += 1;
        Ok(QueryView {
            results: coords.iter().map(|c| (c[0], c[1])).collect(),
            expected: oracle_query(&self.points, &lo, &hi).len(),
            scan: (ans.trace.beta_low, ans.trace.beta_upp),
            candidates: ans.trace.candidates,
            found: ans.trace.found,
            messages: ans.transcript.len(),
            bytes: ans.transcript.total_bytes(),
            millis: (now() - started).as_secs_f64() * 1e3,
        })
    }

    /// Leaf predictions against true buckets along the key order.
    pub fn predictor_curve(&self) -> Vec<CurvePoint> {
        let o = &self.owner;
        let bucket = o.bucket_of_records();
        let mut live: Vec<usize> = (0..o.records.len()).filter(|&i| o.records[i].live).collect();
        live.sort_by_key(|&i| bucket[i]);
        live.iter()
            .enumerate()
            .map(|(rank, &i)| {
                let r = &o.records[i];
                let (leaf, predicted) = o.predict(&r.ranks);
                CurvePoint {
                    rank,
                    bucket: bucket[i].unwrap_or(0),
                    predicted,
                    err_max: o.leaf(leaf).map_or(0, |l| l.err_max),
                    leaf,
                }
            })
            .collect()
    }
}

#[cfg(target_arch = "wasm32")]
fn now() -> Duration {
    Duration::from_secs_f64(js_sys::Date::now() / 1e3)
}

#[cfg(not(target_arch = "wasm32"))]
fn now() -> Duration {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(dist: &str, n: usize, b: usize, m: usize, seed: u64) -> Result<Demo, JsError> {
        DemoState::new(dist, n, b, m, seed)
            .map(|state| Demo { state })
            .map_err(|e| JsError::new(&e))
    }

    pub fn layout(&self) -> Result<String, JsError> {
        to_json(&self.state.layout())
    }

    pub fn query(&mut self, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<String, JsError> {
        let v = self.state.query(x1, y1, x2, y2).map_err(|e| JsError::new(&e))?;
        to_json(&v)
    }

    #[wasm_bindgen(js_name = predictorCurve)]
    pub fn predictor_curve(&self) -> Result<String, JsError> {
        to_json(&self.state.predictor_curve())
    }
}
