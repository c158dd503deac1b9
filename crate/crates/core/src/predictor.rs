//! Bucket predictors: a 3-layer MLP trained in floating point, quantized to
//! fixed point, and deployed either partially encrypted (routing nodes) or
//! fully encrypted (leaves).

use num_bigint::{BigInt, BigUint};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, PublicKey};
use crate::primitives::{
    round_div, sm_grouped, sm_batch, srelu_batch, unexpected, RANK_BOUND_BITS, SIC_R_MAX,
    SIC_R_MIN,
};
use crate::transport::{Request, Response, Session};

pub const DEFAULT_HIDDEN: usize = 32;
const B1: f64 = 0.9;
const B2: f64 = 0.999;
/// Smallest fixed-point scale tried, as a power of two.
pub const MIN_SCALE_BITS: u32 = 16;
pub const MAX_SCALE_BITS: u32 = 30;
/// Magnitude budget for every quantized parameter.
pub const PARAM_BUDGET_BITS: u32 = 31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stop once the rounded training error is at most this many labels.
    pub err_target: i64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            lr: 0.01,
            batch: 32,
            epochs: 2000,
            err_target: 1,
            seed: 0,
        }
    }
}

/// Floating-point model over inputs normalized per dimension to `[0, 1]`
/// and labels normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatMlp {
    pub d: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub in_lo: Vec<f64>,
    pub in_span: Vec<f64>,
    pub out_lo: f64,
    pub out_span: f64,
}

impl FloatMlp {
    fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let s1 = (2.0 / d as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            d,
            hidden,
            w1: (0..hidden * d).map(|_| rng.gen_range(-s1..s1)).collect(),
            b1: (0..hidden).map(|_| rng.gen_range(0.0..0.1)).collect(),
            w2: (0..hidden).map(|_| rng.gen_range(-s2..s2)).collect(),
            b2: 0.0,
            in_lo: vec![0.0; d],
            in_span: vec![1.0; d],
            out_lo: 0.0,
            out_span: 1.0,
        }
    }

    fn normalize(&self, x: &[u64]) -> Vec<f64> {
        (0..self.d)
            .map(|j| (x[j] as f64 - self.in_lo[j]) / self.in_span[j])
            .collect()
    }

    fn forward_norm(&self, xn: &[f64], act: &mut [f64]) -> f64 {
        let mut out = self.b2;
        for h in 0..self.hidden {
            let mut z = self.b1[h];
            for j in 0..self.d {
                z += self.w1[h * self.d + j] * xn[j];
            }
            act[h] = z;
            out += self.w2[h] * z.max(0.0);
        }
        out
    }

    /// Continuous prediction in label units.
    pub fn predict(&self, x: &[u64]) -> f64 {
        let mut act = vec![0.0; self.hidden];
        self.out_lo + self.out_span * self.forward_norm(&self.normalize(x), &mut act)
    }

    pub fn label(&self, x: &[u64]) -> i64 {
        (self.predict(x) + 0.5).floor() as i64
    }
}

/// Largest absolute difference between rounded predictions and labels.
pub fn max_error<F: Fn(&[u64]) -> i64>(f: F, inputs: &[Vec<u64>], labels: &[i64]) -> i64 {
    inputs
        .iter()
        .zip(labels)
        .map(|(x, &l)| (f(x) - l).abs())
        .max()
        .unwrap_or(0)
}

fn check_training_set(inputs: &[Vec<u64>], labels: &[i64]) -> Result<usize> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    let d = inputs[0].len();
    if d == 0 || inputs.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidInput("inconsistent input dimension".into()));
    }
    Ok(d)
}

/// Minibatch gradient descent (Adam step rule) on squared error. Returns the snapshot with the lowest
/// training error and that error.
pub fn train_predictor(
    inputs: &[Vec<u64>],
    labels: &[i64],
    cfg: &TrainConfig,
) -> Result<(FloatMlp, i64)> {
    let d = check_training_set(inputs, labels)?;
    if cfg.hidden == 0 || cfg.batch == 0 {
        return Err(Error::InvalidInput("hidden width and batch must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut m = FloatMlp::init(d, cfg.hidden, &mut rng);
    for j in 0..d {
        let lo = inputs.iter().map(|x| x[j]).min().unwrap() as f64;
        let hi = inputs.iter().map(|x| x[j]).max().unwrap() as f64;
        m.in_lo[j] = lo;
        m.in_span[j] = (hi - lo).max(1.0);
    }
    let lo = *labels.iter().min().unwrap() as f64;
    let hi = *labels.iter().max().unwrap() as f64;
    m.out_lo = lo;
    m.out_span = (hi - lo).max(1.0);

    let xs: Vec<Vec<f64>> = inputs.iter().map(|x| m.normalize(x)).collect();
    let ts: Vec<f64> = labels.iter().map(|&l| (l as f64 - lo) / m.out_span).collect();
    let h = cfg.hidden;
    let mut act = vec![0.0; h];
    let mut g_w1 = vec![0.0; h * d];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut v_w1 = vec![0.0; h * d];
    let mut v_b1 = vec![0.0; h];
    let mut v_w2 = vec![0.0; h];
    let mut v_b2 = [0.0];
    let mut s_w1 = vec![0.0; h * d];
    let mut s_b1 = vec![0.0; h];
    let mut s_w2 = vec![0.0; h];
    let mut s_b2 = [0.0];
    let mut t = 0;

    let mut best = m.clone();
    let mut best_err = max_error(|x| m.label(x), inputs, labels);
    for epoch in 0..cfg.epochs {
        if best_err <= cfg.err_target {
            break;
        }
        order.shuffle(&mut rng);
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        for chunk in order.chunks(cfg.batch) {
            g_w1.iter_mut().for_each(|v| *v = 0.0);
            g_b1.iter_mut().for_each(|v| *v = 0.0);
            g_w2.iter_mut().for_each(|v| *v = 0.0);
            let mut g_b2 = 0.0;
            for &i in chunk {
                let x = &xs[i];
                let e = m.forward_norm(x, &mut act) - ts[i];
                g_b2 += e;
                for k in 0..h {
                    if act[k] > 0.0 {
                        g_w2[k] += e * act[k];
                        let back = e * m.w2[k];
                        g_b1[k] += back;
                        for j in 0..d {
                            g_w1[k * d + j] += back * x[j];
                        }
                    }
                }
            }
            t += 1;
            let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
            let n = chunk.len() as f64;
            let update = |w: &mut [f64], v: &mut [f64], s: &mut [f64], g: &[f64]| {
                for i in 0..w.len() {
                    let g = g[i] / n;
                    v[i] = B1 * v[i] + (1.0 - B1) * g;
                    s[i] = B2 * s[i] + (1.0 - B2) * g * g;
                    w[i] -= lr * (v[i] / c1) / ((s[i] / c2).sqrt() + 1e-8);
                }
            };
            update(&mut m.w1, &mut v_w1, &mut s_w1, &g_w1);
            update(&mut m.b1, &mut v_b1, &mut s_b1, &g_b1);
            update(&mut m.w2, &mut v_w2, &mut s_w2, &g_w2);
            let mut b2 = [m.b2];
            update(&mut b2, &mut v_b2, &mut s_b2, &[g_b2]);
            m.b2 = b2[0];
        }
        if epoch % 10 == 9 || epoch + 1 == cfg.epochs {
            let err = max_error(|x| m.label(x), inputs, labels);
            if err < best_err {
                best_err = err;
                best = m.clone();
            }
        }
    }
    Ok((best, best_err))
}

/// Fixed-point model: `W1, b1, W2` at scale `S = 2^scale_bits`, `b2` at `S²`.
/// Inputs are raw rank values, so normalization is folded into layer 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpParams {
    pub d: usize,
    pub hidden: usize,
    pub scale_bits: u32,
    pub w1: Vec<i64>,
    pub b1: Vec<i64>,
    pub w2: Vec<i64>,
    pub b2: i128,
}

impl MlpParams {
    pub fn zero(d: usize, hidden: usize, scale_bits: u32) -> Self {
        Self {
            d,
            hidden,
            scale_bits,
            w1: vec![0; d * hidden],
            b1: vec![0; hidden],
            w2: vec![0; hidden],
            b2: 0,
        }
    }

    /// Output at scale `S²`.
    pub fn forward(&self, x: &[u64]) -> i128 {
        let mut out = self.b2;
        for h in 0..self.hidden {
            let mut z = self.b1[h] as i128;
            for j in 0..self.d {
                z += self.w1[h * self.d + j] as i128 * x[j] as i128;
            }
            out += self.w2[h] as i128 * z.max(0);
        }
        out
    }

    pub fn label(&self, x: &[u64]) -> i64 {
        round_div(self.forward(x), 1i128 << (2 * self.scale_bits)) as i64
    }

    /// Bit length bounding every parameter magnitude.
    pub fn param_bits(&self) -> u64 {
        let m = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .map(|v| v.unsigned_abs() as u128)
            .chain(std::iter::once(self.b2.unsigned_abs()))
            .max()
            .unwrap_or(0);
        (128 - m.leading_zeros()) as u64
    }
}

/// Rounds the effective (denormalized) parameters at scale `2^scale_bits`.
pub fn quantize(m: &FloatMlp, scale_bits: u32) -> Result<MlpParams> {
    let s = (1u64 << scale_bits) as f64;
    let budget = (1u64 << PARAM_BUDGET_BITS) as f64;
    let (d, h) = (m.d, m.hidden);
    let mut q = MlpParams::zero(d, h, scale_bits);
    let fit = |v: f64, what: &str| -> Result<i64> {
        let r = v.round();
        if !r.is_finite() || r.abs() >= budget {
            return Err(Error::BoundExceeded(format!(
                "{what} = {v:.3e} exceeds the {PARAM_BUDGET_BITS}-bit budget at scale 2^{scale_bits}"
            )));
        }
        Ok(r as i64)
    };
    for k in 0..h {
        let mut bias = m.b1[k];
        for j in 0..d {
            let w = m.w1[k * d + j] / m.in_span[j];
            bias -= w * m.in_lo[j];
            q.w1[k * d + j] = fit(w * s, "W1")?;
        }
        q.b1[k] = fit(bias * s, "b1")?;
        q.w2[k] = fit(m.w2[k] * m.out_span * s, "W2")?;
    }
    let b2 = (m.out_lo + m.out_span * m.b2) * s;
    fit(b2, "b2")?;
    q.b2 = (b2 * s).round() as i128;
    Ok(q)
}

/// Smallest scale at which the quantized model tracks the float model to
/// within a twentieth of a label on every training input, limited by the
/// parameter budget.
pub fn choose_scale_bits(m: &FloatMlp, inputs: &[Vec<u64>]) -> Result<u32> {
    let mut last_ok = None;
    for bits in MIN_SCALE_BITS..=MAX_SCALE_BITS {
        let q = match quantize(m, bits) {
            Ok(q) => q,
            Err(e) => return last_ok.ok_or(e),
        };
        last_ok = Some(bits);
        let s2 = (1u128 << (2 * bits)) as f64;
        let worst = inputs
            .iter()
            .map(|x| (q.forward(x) as f64 / s2 - m.predict(x)).abs())
            .fold(0.0, f64::max);
        if worst <= 0.05 {
            return Ok(bits);
        }
    }
    Ok(MAX_SCALE_BITS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Head,
    Intermediate,
    Leaf,
}

impl Level {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Self::Head),
            1 => Ok(Self::Intermediate),
            2 => Ok(Self::Leaf),
            _ => Err(Error::Format(format!("unknown predictor level {t}"))),
        }
    }
}

/// Routing predictor: layer-1 weights (noised) and layer 2 in plaintext,
/// `b1` encrypted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmlpP {
    pub d: usize,
    pub hidden: usize,
    pub scale_bits: u32,
    pub eta: usize,
    pub w1: Vec<i64>,
    pub b1: Vec<Ciphertext>,
    pub w2: Vec<i64>,
    pub b2: i128,
}

/// Leaf predictor with every parameter encrypted, plus `E(err_max)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmlpC {
    pub d: usize,
    pub hidden: usize,
    /// Public bound on parameter magnitudes, used to size SM blinding.
    pub param_bits: u64,
    pub w1: Vec<Ciphertext>,
    pub b1: Vec<Ciphertext>,
    pub w2: Vec<Ciphertext>,
    pub b2: Ciphertext,
    pub err_max: Ciphertext,
}

impl SmlpC {
    /// Parameters in a fixed order: W1, b1, W2, b2, err_max.
    pub fn flatten(&self) -> Vec<Ciphertext> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(self.w1.iter().cloned());
        v.extend(self.b1.iter().cloned());
        v.extend(self.w2.iter().cloned());
        v.push(self.b2.clone());
        v.push(self.err_max.clone());
        v
    }

    pub fn param_count(&self) -> usize {
        self.hidden * (self.d + 2) + 2
    }

    pub fn from_flat(d: usize, hidden: usize, param_bits: u64, mut v: Vec<Ciphertext>) -> Result<Self> {
        if v.len() != hidden * (d + 2) + 2 {
            return Err(Error::DimensionMismatch {
                expected: hidden * (d + 2) + 2,
                got: v.len(),
            });
        }
        let err_max = v.pop().unwrap();
        let b2 = v.pop().unwrap();
        let w2 = v.split_off(hidden * (d + 1));
        let b1 = v.split_off(hidden * d);
        Ok(Self {
            d,
            hidden,
            param_bits,
            w1: v,
            b1,
            w2,
            b2,
            err_max,
        })
    }
}

/// Noise configuration for routing predictors. `delta` is in units of the
/// normalized layer-1 weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub delta: f64,
    pub max_halvings: u32,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            delta: 1.0 / 16.0,
            max_halvings: 8,
        }
    }
}

/// Outcome of noising a routing predictor.
#[derive(Clone, Debug)]
pub struct NoisedRouter {
    pub pred: SmlpP,
    /// The noised plaintext model (DO side), used for routing decisions.
    pub plain: MlpParams,
    pub err_max: i64,
    pub delta: f64,
}

/// Perturbs `W1` with uniform noise, halving `δ` until the training error
/// does not exceed `declared_err`. Returns the noised model, its routing
/// error and the `δ` used.
#[allow(clippy::too_many_arguments)]
pub fn noise_router<R: RngCore>(
    params: &MlpParams,
    in_span: &[f64],
    eta: usize,
    noise: NoiseConfig,
    inputs: &[Vec<u64>],
    labels: &[i64],
    declared_err: i64,
    rng: &mut R,
) -> Result<(MlpParams, i64, f64)> {
    if eta == 0 {
        return Err(Error::InvalidInput("router needs at least one child".into()));
    }
    let route = |p: &MlpParams, x: &[u64]| p.label(x).clamp(1, eta as i64);
    let s = (1u64 << params.scale_bits) as f64;
    let mut delta = noise.delta;
    for _ in 0..=noise.max_halvings {
        if delta <= 0.0 {
            break;
        }
        let mut p = params.clone();
        for k in 0..p.hidden {
            for j in 0..p.d {
                let bound = delta * s / in_span[j];
                let n = if bound >= 0.5 { rng.gen_range(-bound..=bound).round() as i64 } else { 0 };
                p.w1[k * p.d + j] += n;
            }
        }
        let err = max_error(|x| route(&p, x), inputs, labels);
        if err <= declared_err {
            return Ok((p, err, delta));
        }
        delta /= 2.0;
    }
    if noise.delta > 0.0 {
        log::warn!("routing predictor emitted without weight noise: bound {declared_err} unattainable");
    }
    let err = max_error(|x| route(params, x), inputs, labels);
    Ok((params.clone(), err, 0.0))
}

/// Encrypts the layer-1 biases of an (already noised) routing model.
pub fn encrypt_router<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    plain: &MlpParams,
    eta: usize,
    rng: &mut R,
) -> Result<SmlpP> {
    let b1 = plain
        .b1
        .iter()
        .map(|&v| pk.encrypt_i128(v as i128, &mut *rng))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SmlpP {
        d: plain.d,
        hidden: plain.hidden,
        scale_bits: plain.scale_bits,
        eta,
        w1: plain.w1.clone(),
        b1,
        w2: plain.w2.clone(),
        b2: plain.b2,
    })
}

/// [`noise_router`] followed by [`encrypt_router`].
#[allow(clippy::too_many_arguments)]
pub fn make_smlp_p<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    params: &MlpParams,
    in_span: &[f64],
    eta: usize,
    noise: NoiseConfig,
    inputs: &[Vec<u64>],
    labels: &[i64],
    declared_err: i64,
    rng: &mut R,
) -> Result<NoisedRouter> {
    let (plain, err_max, delta) =
        noise_router(params, in_span, eta, noise, inputs, labels, declared_err, rng)?;
    Ok(NoisedRouter {
        pred: encrypt_router(pk, &plain, eta, rng)?,
        plain,
        err_max,
        delta,
    })
}

/// Encrypts every parameter. `err_max` is stored at label scale.
pub fn make_smlp_c<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    params: &MlpParams,
    err_max: i64,
    param_bits: u64,
    rng: &mut R,
) -> Result<SmlpC> {
    let mut enc = |v: i128| pk.encrypt_i128(v, &mut *rng).map_err(Error::from);
    let w1 = params.w1.iter().map(|&v| enc(v as i128)).collect::<Result<_>>()?;
    let b1 = params.b1.iter().map(|&v| enc(v as i128)).collect::<Result<_>>()?;
    let w2 = params.w2.iter().map(|&v| enc(v as i128)).collect::<Result<_>>()?;
    Ok(SmlpC {
        d: params.d,
        hidden: params.hidden,
        param_bits: param_bits.max(params.param_bits()),
        w1,
        b1,
        w2,
        b2: enc(params.b2)?,
        err_max: enc(err_max as i128)?,
    })
}

fn check_input(d: usize, x: &[Ciphertext]) -> Result<()> {
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    Ok(())
}

/// Routing evaluation. The DSP forms `E(r_h · (W1·x + b1)_h)` with a fresh
/// `r_h` per unit, the DAP returns the rectified plaintexts, and the DSP
/// unblinds and finishes layer 2 in the clear. Returns a label in `[1, η]`.
pub fn eval_smlp_p(sess: &mut Session, pred: &SmlpP, x: &[Ciphertext]) -> Result<usize> {
    check_input(pred.d, x)?;
    let pk = sess.pk().clone();
    let neg_x = pk.batch_negate(x)?;
    let mut blinds = Vec::with_capacity(pred.hidden);
    let mut psi = Vec::with_capacity(pred.hidden);
    for h in 0..pred.hidden {
        let r = sess.blind_range(SIC_R_MIN, SIC_R_MAX);
        blinds.push(r);
        let exps: Vec<(usize, i128)> = (0..pred.d)
            .map(|j| (j, r * pred.w1[h * pred.d + j] as i128))
            .collect();
        let mags: Vec<BigUint> = exps.iter().map(|(_, e)| BigUint::from(e.unsigned_abs())).collect();
        let mut terms: Vec<(&Ciphertext, &BigUint)> = exps
            .iter()
            .zip(&mags)
            .map(|((j, e), m)| (if *e < 0 { &neg_x[*j] } else { &x[*j] }, m))
            .collect();
        let rb = BigUint::from(r as u128);
        terms.push((&pred.b1[h], &rb));
        psi.push(pk.multi_exp(&terms)?);
    }
    let acts = match sess.call(Request::Relu(psi))? {
        Response::Activations(a) if a.len() == pred.hidden => a,
        other => return Err(unexpected("RELU", &other)),
    };
    let mut out = pred.b2;
    for h in 0..pred.hidden {
        if acts[h] < 0 || acts[h] % blinds[h] != 0 {
            return Err(Error::Format("activation is not a multiple of its blind".into()));
        }
        out += pred.w2[h] as i128 * (acts[h] / blinds[h]);
    }
    let label = round_div(out, 1i128 << (2 * pred.scale_bits));
    Ok(label.clamp(1, pred.eta as i128) as usize)
}

/// Bits bounding a layer-1 pre-activation for `d` inputs.
pub fn preactivation_bits(d: usize, param_bits: u64) -> u64 {
    RANK_BOUND_BITS + param_bits + (usize::BITS - d.leading_zeros()) as u64 + 1
}

/// Fully encrypted forward pass. Returns `E(output)` at scale `S²`.
pub fn eval_smlp_c(sess: &mut Session, pred: &SmlpC, x: &[Ciphertext]) -> Result<Ciphertext> {
    check_input(pred.d, x)?;
    let pk = sess.pk().clone();
    let (d, hidden) = (pred.d, pred.hidden);
    let groups: Vec<(Ciphertext, Vec<Ciphertext>)> = (0..d)
        .map(|j| (x[j].clone(), (0..hidden).map(|h| pred.w1[h * d + j].clone()).collect()))
        .collect();
    let prods = sm_grouped(sess, &groups, RANK_BOUND_BITS, pred.param_bits)?;
    let mut z = pred.b1.clone();
    for row in &prods {
        for (h, p) in row.iter().enumerate() {
            z[h] = pk.add(&z[h], p)?;
        }
    }
    let zb = preactivation_bits(d, pred.param_bits);
    let acts = srelu_batch(sess, &z, zb)?;
    let pairs: Vec<_> = acts.into_iter().zip(pred.w2.iter().cloned()).collect();
    let outs = sm_batch(sess, &pairs, zb, pred.param_bits)?;
    let mut acc = pred.b2.clone();
    for o in &outs {
        acc = pk.add(&acc, o)?;
    }
    Ok(acc)
}

/// Encrypted one-hot rows selecting among `eta` leaves stored in a secret
/// order: row `j` (label `j+1`) is hot at the stored position of child `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuzzyLabelTable {
    pub eta: usize,
    pub rows: Vec<Vec<Ciphertext>>,
}

impl FuzzyLabelTable {
    /// `position[j]` is where logical child `j` sits in the stored order.
    pub fn build<R: RngCore + rand::CryptoRng>(
        pk: &PublicKey,
        position: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let eta = position.len();
        let rows = position
            .iter()
            .map(|&p| {
                (0..eta)
                    .map(|k| pk.encrypt_i128((k == p) as i128, &mut *rng).map_err(Error::from))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { eta, rows })
    }
}

/// `M = Σ_k SM(F_j[k], leaf_k)` for every parameter position, in a single
/// round. `leaves` are in stored order.
pub fn select_leaf_fuzzy(
    sess: &mut Session,
    table: &FuzzyLabelTable,
    label: usize,
    leaves: &[&SmlpC],
) -> Result<SmlpC> {
    if leaves.len() != table.eta || label == 0 || label > table.eta {
        return Err(Error::InvalidInput(format!(
            "label {label} or {} leaves do not fit a table of {}",
            leaves.len(),
            table.eta
        )));
    }
    let first = leaves[0];
    if leaves
        .iter()
        .any(|l| l.d != first.d || l.hidden != first.hidden)
    {
        return Err(Error::InvalidInput("leaf predictors differ in shape".into()));
    }
    let bits = leaves.iter().map(|l| l.param_bits).max().unwrap_or(0).max(
        // err_max is small; the slot still needs room for it
        16,
    );
    let row = &table.rows[label - 1];
    let groups: Vec<_> = leaves
        .iter()
        .zip(row)
        .map(|(l, f)| (f.clone(), l.flatten()))
        .collect();
    let prods = sm_grouped(sess, &groups, 1, bits)?;
    let pk = sess.pk().clone();
    let mut acc = prods[0].clone();
    for p in &prods[1..] {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = pk.add(a, v)?;
        }
    }
    SmlpC::from_flat(first.d, first.hidden, bits, acc)
}

/// Encrypts plaintext scalars, convenience for the evaluation tests.
pub fn encrypt_point<R: RngCore + rand::CryptoRng>(
    pk: &PublicKey,
    x: &[u64],
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    x.iter()
        .map(|&v| pk.encrypt(&BigInt::from(v), &mut *rng).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::test_keys::k512;
    use crate::transport::{DapConfig, DapService};

    fn session(seed: u8) -> (DapService, Session) {
        let svc = DapService::new(k512().clone(), DapConfig::with_seed([seed; 32]));
        let s = Session::local(&svc, &[seed ^ 0x5a; 32]).unwrap();
        (svc, s)
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn uniform_leaf(n: usize, b: usize, seed: u64) -> (Vec<Vec<u64>>, Vec<i64>) {
        let mut r = rng(seed);
        let mut pts: Vec<(u128, Vec<u64>)> = (0..n)
            .map(|_| {
                let p = vec![r.gen_range(1..4096u64) * 16, r.gen_range(1..4096u64) * 16];
                (crate::spatial::morton_encode(&p, 32).unwrap(), p)
            })
            .collect();
        pts.sort();
        let labels = (0..n).map(|i| (i / b + 1) as i64).collect();
        (pts.into_iter().map(|p| p.1).collect(), labels)
    }

    #[test]
    fn single_point_fits() {
        let (m, err) = train_predictor(&[vec![5, 9]], &[3], &TrainConfig::default()).unwrap();
        assert_eq!(err, 0);
        assert_eq!(m.label(&[5, 9]), 3);
    }

    #[test]
    fn constant_labels_fit() {
        let xs: Vec<Vec<u64>> = (0..40).map(|i| vec![i * 7 + 1, 300 - i]).collect();
        let ls = vec![4; 40];
        let (m, err) = train_predictor(&xs, &ls, &TrainConfig::default()).unwrap();
        assert_eq!(err, 0);
        let q = quantize(&m, choose_scale_bits(&m, &xs).unwrap()).unwrap();
        assert_eq!(max_error(|x| q.label(x), &xs, &ls), 0);
    }

    #[test]
    fn leaf_training_meets_bound_by_recomputation() {
        // observed with the default config: 6 buckets at 300 points, 2 at 125
        for (n, bound) in [(300, 8), (125, 3)] {
            let (xs, ls) = uniform_leaf(n, 8, 1);
            let (m, err) = train_predictor(&xs, &ls, &TrainConfig::default()).unwrap();
            assert_eq!(err, max_error(|x| m.label(x), &xs, &ls));
            assert!(err <= bound, "n={n}: err_max {err}");
        }
    }

    #[test]
    fn quantize_examples() {
        let mut m = FloatMlp::init(1, 1, &mut rng(0));
        m.w1 = vec![0.5];
        m.b1 = vec![0.0];
        m.w2 = vec![0.0];
        m.b2 = 0.0;
        let q = quantize(&m, 16).unwrap();
        assert_eq!(q.w1, vec![32768]);
        assert_eq!(q.w2, vec![0]);
        m.w1 = vec![1e6];
        assert!(quantize(&m, 16).is_err());
    }

    #[test]
    fn quantized_labels_track_float() {
        let (xs, ls) = uniform_leaf(200, 8, 2);
        let (m, _) = train_predictor(&xs, &ls, &TrainConfig { epochs: 200, ..Default::default() }).unwrap();
        let q = quantize(&m, choose_scale_bits(&m, &xs).unwrap()).unwrap();
        for x in &xs {
            assert!((q.label(x) - m.label(x)).abs() <= 1);
        }
    }

    fn small_params(seed: u64) -> MlpParams {
        let mut r = rng(seed);
        let (d, h) = (2, 4);
        MlpParams {
            d,
            hidden: h,
            scale_bits: 16,
            w1: (0..d * h).map(|_| r.gen_range(-2000..2000)).collect(),
            b1: (0..h).map(|_| r.gen_range(-1 << 20..1 << 20)).collect(),
            w2: (0..h).map(|_| r.gen_range(-70000..70000)).collect(),
            b2: r.gen_range(-(1i128 << 40)..(1i128 << 40)),
        }
    }

    #[test]
    fn zero_noise_keeps_routing_and_b1_roundtrips() {
        let p = small_params(3);
        let xs: Vec<Vec<u64>> = (0..50).map(|i| vec![i * 40, 2000 - i * 30]).collect();
        let ls: Vec<i64> = xs.iter().map(|x| p.label(x).clamp(1, 6)).collect();
        let kp = k512();
        let noise = NoiseConfig { delta: 0.0, max_halvings: 0 };
        let r = make_smlp_p(&kp.pk, &p, &[2000.0, 2000.0], 6, noise, &xs, &ls, 0, &mut rng(4)).unwrap();
        assert_eq!(r.plain, p);
        assert_eq!(r.err_max, 0);
        for (c, &v) in r.pred.b1.iter().zip(&p.b1) {
            assert_eq!(kp.decrypt_i128(c).unwrap(), v as i128);
        }
    }

    #[test]
    fn noise_is_halved_until_routing_holds() {
        let (xs, _) = uniform_leaf(300, 8, 5);
        let ls: Vec<i64> = xs.iter().map(|x| (x[0] / 16 / 1024 + 1) as i64).collect();
        let (m, _) = train_predictor(&xs, &ls, &TrainConfig { err_target: 0, ..Default::default() }).unwrap();
        let q = quantize(&m, choose_scale_bits(&m, &xs).unwrap()).unwrap();
        let eta = 4;
        let base = max_error(|x| q.label(x).clamp(1, eta), &xs, &ls);
        let r = make_smlp_p(
            &k512().pk,
            &q,
            &m.in_span,
            eta as usize,
            NoiseConfig::default(),
            &xs,
            &ls,
            base,
            &mut rng(6),
        )
        .unwrap();
        assert!(r.err_max <= base);
        assert_eq!(r.err_max, max_error(|x| r.plain.label(x).clamp(1, eta), &xs, &ls));
    }

    #[test]
    fn smlp_p_matches_plain_forward() {
        let (_svc, mut s) = session(7);
        let kp = k512();
        let p = small_params(8);
        let noise = NoiseConfig { delta: 0.0, max_halvings: 0 };
        let eta = 9;
        let r = make_smlp_p(&kp.pk, &p, &[1.0, 1.0], eta, noise, &[vec![1, 1]], &[1], 99, &mut rng(1)).unwrap();
        let mut g = rng(9);
        for _ in 0..100 {
            let x = vec![g.gen_range(0..4096u64), g.gen_range(0..4096u64)];
            let enc = encrypt_point(&kp.pk, &x, &mut g).unwrap();
            let before = s.transcript().len();
            let got = eval_smlp_p(&mut s, &r.pred, &enc).unwrap();
            assert_eq!(got as i64, p.label(&x).clamp(1, eta as i64));
            let t = &s.transcript().entries()[before..];
            assert_eq!(t.len(), 2);
            assert_eq!(t[0].ct_count, 4);
        }
    }

    #[test]
    fn constant_router_ignores_input() {
        let (_svc, mut s) = session(10);
        let kp = k512();
        let mut p = MlpParams::zero(2, 3, 16);
        p.b2 = 3 << 32;
        let noise = NoiseConfig { delta: 0.0, max_halvings: 0 };
        let r = make_smlp_p(&kp.pk, &p, &[1.0, 1.0], 5, noise, &[vec![0, 0]], &[3], 0, &mut rng(2)).unwrap();
        for x in [[0u64, 0], [77, 12], [4000, 1]] {
            let enc = encrypt_point(&kp.pk, &x, &mut rng(3)).unwrap();
            assert_eq!(eval_smlp_p(&mut s, &r.pred, &enc).unwrap(), 3);
        }
    }

    #[test]
    fn smlp_c_zero_model_and_roundtrip() {
        let kp = k512();
        let p = MlpParams::zero(2, 3, 16);
        let c = make_smlp_c(&kp.pk, &p, 0, 1, &mut rng(1)).unwrap();
        assert!(c.flatten().iter().all(|v| kp.decrypt_i128(v).unwrap() == 0));
        let q = small_params(4);
        let c = make_smlp_c(&kp.pk, &q, 5, 0, &mut rng(1)).unwrap();
        let dec: Vec<i128> = c.w1.iter().map(|v| kp.decrypt_i128(v).unwrap()).collect();
        assert_eq!(dec, q.w1.iter().map(|&v| v as i128).collect::<Vec<_>>());
        assert_eq!(kp.decrypt_i128(&c.b2).unwrap(), q.b2);
        assert_eq!(kp.decrypt_i128(&c.err_max).unwrap(), 5);
        let (_svc, mut s) = session(11);
        let zero = make_smlp_c(&kp.pk, &p, 0, 1, &mut rng(1)).unwrap();
        let x = encrypt_point(&kp.pk, &[5, 6], &mut rng(2)).unwrap();
        assert_eq!(kp.decrypt_i128(&eval_smlp_c(&mut s, &zero, &x).unwrap()).unwrap(), 0);
    }

    #[test]
    fn smlp_c_matches_plain_forward() {
        let (_svc, mut s) = session(12);
        let kp = k512();
        let p = small_params(13);
        let c = make_smlp_c(&kp.pk, &p, 0, 0, &mut rng(5)).unwrap();
        let mut g = rng(14);
        let mut shapes = Vec::new();
        for _ in 0..50 {
            let x = vec![g.gen_range(0..1u64 << 20), g.gen_range(0..1u64 << 20)];
            let enc = encrypt_point(&kp.pk, &x, &mut g).unwrap();
            let before = s.transcript().len();
            let sm_before = s.stats().sm;
            let out = eval_smlp_c(&mut s, &c, &enc).unwrap();
            assert_eq!(kp.decrypt_i128(&out).unwrap(), p.forward(&x));
            // layer 1 plus the ReLU gates, then layer 2
            assert_eq!(s.stats().sm - sm_before, (p.hidden * p.d + p.hidden + p.hidden) as u64);
            let shape: Vec<_> = s.transcript().entries()[before..]
                .iter()
                .map(|e| (e.msg_type, e.ct_count, e.byte_len))
                .collect();
            shapes.push(shape);
        }
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn fuzzy_selection_picks_permuted_leaf() {
        let kp = k512();
        let pk = &kp.pk;
        let leaves: Vec<MlpParams> = (0..3).map(|i| small_params(20 + i)).collect();
        let enc: Vec<SmlpC> = leaves
            .iter()
            .enumerate()
            .map(|(i, l)| make_smlp_c(pk, l, i as i64 + 1, 0, &mut rng(i as u64)).unwrap())
            .collect();
        // logical child j is stored at position[j]
        let position = [2usize, 0, 1];
        let stored: Vec<&SmlpC> = (0..3)
            .map(|p| &enc[position.iter().position(|&q| q == p).unwrap()])
            .collect();
        let table = FuzzyLabelTable::build(pk, &position, &mut rng(9)).unwrap();
        for row in &table.rows {
            let s: i128 = row.iter().map(|c| kp.decrypt_i128(c).unwrap()).sum();
            assert_eq!(s, 1);
        }
        let (_svc, mut s) = session(15);
        for label in 1..=3 {
            let got = select_leaf_fuzzy(&mut s, &table, label, &stored).unwrap();
            let want = &leaves[label - 1];
            let dec = |v: &[Ciphertext]| v.iter().map(|c| kp.decrypt_i128(c).unwrap() as i64).collect::<Vec<_>>();
            assert_eq!(dec(&got.w1), want.w1);
            assert_eq!(dec(&got.b1), want.b1);
            assert_eq!(dec(&got.w2), want.w2);
            assert_eq!(kp.decrypt_i128(&got.b2).unwrap(), want.b2);
            assert_eq!(kp.decrypt_i128(&got.err_max).unwrap(), label as i128);
        }
        let single = FuzzyLabelTable::build(pk, &[0], &mut rng(1)).unwrap();
        let got = select_leaf_fuzzy(&mut s, &single, 1, &[&enc[0]]).unwrap();
        assert_eq!(kp.decrypt_i128(&got.b2).unwrap(), leaves[0].b2);
    }
}
