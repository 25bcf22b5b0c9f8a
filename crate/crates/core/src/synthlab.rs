// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic workloads: softmax attention stacks with a
//! temperature schedule, value propagation through them, planted-concept
//! activation datasets, and the temperature sweep relating sparsity to
//! spectral gap.
//!
//! Every generator draws from a ChaCha8 stream keyed by `(seed, stream)`,
//! so results depend only on the arguments, never on thread scheduling.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationSet, MaskKind, Polarity};
use crate::concept::prompt_id;
use crate::error::{Error, Result};
use crate::linalg::{norm, power_iteration, DenseMatrix, Side, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::par::Exec;
use crate::spectra::{attention_sparsity, spectral_gap};
use crate::stats;

// Stream ids. Attention for layer ℓ uses stream ℓ.
const STREAM_VALUES: u64 = 1 << 40;
const STREAM_PLANTED: u64 = 2 << 40;
const STREAM_DIRECTION: u64 = 3 << 40;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSchedule {
    Constant { tau: f64 },
    /// `τ_ℓ = start · (end/start)^(ℓ/(L−1))`.
    Geometric { start: f64, end: f64 },
    List { taus: Vec<f64> },
}

impl TauSchedule {
    pub fn resolve(&self, layers: usize) -> Result<Vec<f64>> {
        let taus = match self {
            TauSchedule::Constant { tau } => vec![*tau; layers],
            TauSchedule::Geometric { start, end } => {
                if layers == 1 {
                    vec![*start]
                } else {
                    let ratio = end / start;
                    (0..layers)
                        .map(|l| start * ratio.powf(l as f64 / (layers - 1) as f64))
                        .collect()
                }
            }
            TauSchedule::List { taus } => {
                if taus.len() != layers {
                    return Err(Error::InvalidArgument(format!(
                        "tau list has {} entries for {layers} layers",
                        taus.len()
                    )));
                }
                taus.clone()
            }
        };
        if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidArgument(format!("temperature must be finite and positive, got {t}")));
        }
        Ok(taus)
    }
}

impl FromStr for TauSchedule {
    type Err = Error;

    /// `constant:x`, `geometric:start,end` or `list:t0,t1,…`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad tau schedule {s:?}"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums = args
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad())?;
        match (kind, nums.as_slice()) {
            ("constant", [tau]) => Ok(TauSchedule::Constant { tau: *tau }),
            ("geometric", [start, end]) => Ok(TauSchedule::Geometric {
                start: *start,
                end: *end,
            }),
            ("list", taus) if !taus.is_empty() => Ok(TauSchedule::List {
                taus: taus.to_vec(),
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for TauSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauSchedule::Constant { tau } => write!(f, "constant:{tau}"),
            TauSchedule::Geometric { start, end } => write!(f, "geometric:{start},{end}"),
            TauSchedule::List { taus } => {
                let parts: Vec<String> = taus.iter().map(f64::to_string).collect();
                write!(f, "list:{}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    /// One temperature per layer.
    pub taus: Vec<f64>,
    pub mask: MaskKind,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(
        n: usize,
        d: usize,
        layers: usize,
        schedule: &TauSchedule,
        mask: MaskKind,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 || d == 0 || layers == 0 {
            return Err(Error::InvalidArgument("n, d and layers must all be >= 1".into()));
        }
        Ok(Self {
            n,
            d,
            layers,
            taus: schedule.resolve(layers)?,
            mask,
            seed,
        })
    }

    pub fn tau(&self, layer: usize) -> f64 {
        self.taus[layer]
    }
}

/// Row-wise softmax of Gaussian logits scaled by `1/τ_ℓ`.
///
/// The full `n×n` logit block is always drawn so the causal and full
/// variants share logits. Full-mask entries are floored at the smallest
/// normal float before normalization so they stay strictly positive even
/// when `exp` underflows.
pub fn gen_attention(spec: &SynthSpec, layer: usize) -> DenseMatrix {
    let n = spec.n;
    let tau = spec.tau(layer);
    let mut r = rng(spec.seed, layer as u64);
    let logits: Vec<f64> = (0..n * n).map(|_| gaussian(&mut r) / tau).collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let width = match spec.mask {
            MaskKind::Full => n,
            MaskKind::Causal => i + 1,
        };
        let row = &logits[i * n..i * n + width];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * n..i * n + width];
        for (o, z) in out.iter_mut().zip(row) {
            *o = (z - mx).exp();
            if spec.mask == MaskKind::Full {
                *o = o.max(f64::MIN_POSITIVE);
            }
        }
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= s);
    }
    DenseMatrix::new(n, n, data).expect("softmax output is finite")
}

/// Standard normal `n×d` value matrix for the given stream index.
pub fn gen_values(n: usize, d: usize, seed: u64, index: u64) -> Result<DenseMatrix> {
    let mut r = rng(seed, STREAM_VALUES + index);
    DenseMatrix::new(n, d, (0..n * d).map(|_| gaussian(&mut r)).collect())
}

/// Strictly positive matrix with rows normalized to 1 (entries uniform in
/// `(0, 1]` before normalization).
pub fn gen_positive_stochastic(n: usize, seed: u64, index: u64) -> Result<DenseMatrix> {
    use rand::Rng;
    let mut r = rng(seed, STREAM_VALUES + (1 << 32) + index);
    let raw: Vec<f64> = (0..n * n).map(|_| 1.0 - r.gen::<f64>()).collect();
    let mut data = Vec::with_capacity(n * n);
    for row in raw.chunks(n) {
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|x| x / s));
    }
    DenseMatrix::new(n, n, data)
}

pub fn random_unit_vector(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed, STREAM_DIRECTION);
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
        let nv = norm(&v);
        if nv > 0.0 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationTrace {
    /// `O_k` for `k = 1..=steps`.
    pub outputs: Vec<DenseMatrix>,
    /// `‖O_k − u₁u₁ᵀO_k‖_F / ‖O_k‖_F`.
    pub residuals: Vec<f64>,
    /// `u₁ᵀV`.
    pub alpha1: Vec<f64>,
    pub u1: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PropagationTrace {
    /// Least-squares slope of `ln r_k` against `k` over `k ≥ from_step`,
    /// skipping residuals at the rounding floor.
    pub fn fitted_slope(&self, from_step: usize) -> Option<f64> {
        let (ks, logs): (Vec<f64>, Vec<f64>) = self
            .residuals
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1, r))
            .filter(|&(k, r)| k >= from_step && r > 1e-13)
            .map(|(k, r)| (k as f64, r.ln()))
            .unzip();
        (ks.len() >= 2).then(|| stats::slope(&ks, &logs))
    }
}

/// `O_k = aᵏ·v` for `k = 1..=steps`, with residuals against the right
/// principal eigenvector of `a`.
pub fn propagate(a: &DenseMatrix, v: &DenseMatrix, steps: usize) -> Result<PropagationTrace> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let mut warnings = Vec::new();
    if a.data().iter().any(|&x| x <= 0.0) {
        warnings.push("matrix is not strictly positive; convergence to u1 is not guaranteed".into());
    }
    let u1 = power_iteration(a, Side::Right, DEFAULT_TOL, DEFAULT_MAX_ITER)?.eigenvector;
    run_propagation(std::iter::repeat(a).take(steps), v, steps, u1, warnings)
}

/// Applies a different matrix per step: `O_k = a_k ⋯ a_1 · v`. Residuals
/// are taken against the all-ones direction, the common right fixed point
/// of row-stochastic matrices.
pub fn propagate_stack(stack: &[DenseMatrix], v: &DenseMatrix) -> Result<PropagationTrace> {
    let n = v.rows();
    if let Some(m) = stack.iter().find(|m| m.rows() != n || !m.is_square()) {
        return Err(Error::DimensionMismatch {
            context: "propagation stack",
            expected: n,
            found: m.rows(),
        });
    }
    let u1 = vec![1.0 / (n as f64).sqrt(); n];
    run_propagation(stack.iter(), v, stack.len(), u1, Vec::new())
}

fn run_propagation<'a>(
    mats: impl Iterator<Item = &'a DenseMatrix>,
    v: &DenseMatrix,
    steps: usize,
    u1: Vec<f64>,
    warnings: Vec<String>,
) -> Result<PropagationTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("propagation needs at least one step".into()));
    }
    if v.frobenius_norm() == 0.0 {
        return Err(Error::ZeroVector("value matrix"));
    }
    let alpha1 = v.vec_mul(&u1)?;
    let mut outputs = Vec::with_capacity(steps);
    let mut residuals = Vec::with_capacity(steps);
    let mut o = v.clone();
    for a in mats {
        o = a.matmul(&o)?;
        let total = o.frobenius_norm();
        if total == 0.0 {
            return Err(Error::ZeroVector("propagated output"));
        }
        let coeff = o.vec_mul(&u1)?;
        let mut off = 0.0;
        for (i, row) in o.row_iter().enumerate() {
            for (x, c) in row.iter().zip(&coeff) {
                off += (x - u1[i] * c).powi(2);
            }
        }
        residuals.push(off.sqrt() / total);
        outputs.push(o.clone());
    }
    Ok(PropagationTrace {
        outputs,
        residuals,
        alpha1,
        u1,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub d: usize,
    pub layers: usize,
    pub pairs: usize,
    pub truncations: usize,
    /// One unit direction shared by all layers, or one per layer.
    pub directions: Vec<Vec<f64>>,
    pub margin: f64,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    pub acts: ActivationSet,
    /// Ground-truth unit direction per layer.
    pub directions: Vec<Vec<f64>>,
}

pub fn pair_name(i: usize) -> String {
    format!("pair{i:05}")
}

/// `A± = base ± (δ/2)·w_ℓ + ε±` with a shared standard-normal base per
/// `(pair, k, ℓ)` and independent `N(0, σ²)` noise per coordinate.
pub fn planted_concept_dataset(spec: &PlantedSpec) -> Result<PlantedDataset> {
    let PlantedSpec {
        d,
        layers,
        pairs,
        truncations,
        margin,
        noise,
        seed,
        ..
    } = *spec;
    if d == 0 || layers == 0 || pairs == 0 || truncations == 0 {
        return Err(Error::InvalidArgument("d, layers, pairs and truncations must be >= 1".into()));
    }
    if !(margin > 0.0) || !(noise >= 0.0) || !noise.is_finite() || !margin.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need margin > 0 and noise >= 0, got {margin} and {noise}"
        )));
    }
    let directions: Vec<Vec<f64>> = match spec.directions.len() {
        1 => vec![spec.directions[0].clone(); layers],
        l if l == layers => spec.directions.clone(),
        l => {
            return Err(Error::InvalidArgument(format!(
                "{l} directions for {layers} layers"
            )))
        }
    };
    for w in &directions {
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                context: "planted direction",
                expected: d,
                found: w.len(),
            });
        }
        if (norm(w) - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument("planted directions must be unit vectors".into()));
        }
    }

    let mut r = rng(seed, STREAM_PLANTED);
    let mut acts = ActivationSet::new();
    for p in 0..pairs {
        let pair = pair_name(p);
        let pos = prompt_id(&pair, Polarity::Positive);
        let neg = prompt_id(&pair, Polarity::Negative);
        acts.set_prompt(pos.clone(), Some(Polarity::Positive), Some(pair.clone()));
        acts.set_prompt(neg.clone(), Some(Polarity::Negative), Some(pair.clone()));
        for k in 1..=truncations as u32 {
            for (layer, w) in directions.iter().enumerate() {
                let base: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
                let ep: Vec<f64> = (0..d).map(|_| noise * gaussian(&mut r)).collect();
                let en: Vec<f64> = (0..d).map(|_| noise * gaussian(&mut r)).collect();
                let half = margin / 2.0;
                let a_pos = (0..d).map(|i| base[i] + half * w[i] + ep[i]).collect();
                let a_neg = (0..d).map(|i| base[i] - half * w[i] + en[i]).collect();
                acts.insert(pos.clone(), k, layer, a_pos)?;
                acts.insert(neg.clone(), k, layer, a_neg)?;
            }
            acts.set_token_text(pos.clone(), k, format!("tok{k}"));
            acts.set_token_text(neg.clone(), k, format!("tok{k}"));
        }
    }
    Ok(PlantedDataset { acts, directions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mean_sparsity: f64,
    pub mean_gap: f64,
}

/// Mean sparsity and gap of full-mask `n×n` matrices at each temperature,
/// averaged over the given seeds. Rows are sorted by `τ`.
pub fn sparsity_gap_sweep(taus: &[f64], n: usize, seeds: &[u64], exec: Exec) -> Result<Vec<SweepRow>> {
    if taus.len() < 3 {
        return Err(Error::InvalidArgument("a sweep needs at least 3 temperatures".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("a sweep needs at least one seed".into()));
    }
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    let jobs: Vec<(f64, u64)> = taus
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results = exec.try_map(&jobs, |&(tau, seed)| {
        let spec = SynthSpec::new(n, 1, 1, &TauSchedule::Constant { tau }, MaskKind::Full, seed)?;
        let a = gen_attention(&spec, 0);
        Ok::<_, Error>((attention_sparsity(&a)?, spectral_gap(&a)?.gap))
    })?;
    Ok(taus
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(&tau, chunk)| {
            let sp: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let gp: Vec<f64> = chunk.iter().map(|r| r.1).collect();
            SweepRow {
                tau,
                mean_sparsity: stats::mean(&sp),
                mean_gap: stats::mean(&gp),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub layer: usize,
    pub tau: f64,
    pub mean_sparsity: f64,
    pub mean_gap: f64,
}

/// Per-layer mean gap and sparsity of a depth schedule, averaged over
/// seeds (the seed replaces `spec.seed`).
pub fn depth_schedule_curve(spec: &SynthSpec, seeds: &[u64], exec: Exec) -> Result<Vec<DepthRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..spec.layers)
        .flat_map(|l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results = exec.try_map(&jobs, |&(layer, seed)| {
        let s = SynthSpec {
            seed,
            ..spec.clone()
        };
        let a = gen_attention(&s, layer);
        Ok::<_, Error>((attention_sparsity(&a)?, spectral_gap(&a)?.gap))
    })?;
    Ok(results
        .chunks(seeds.len())
        .enumerate()
        .map(|(layer, chunk)| {
            let sp: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let gp: Vec<f64> = chunk.iter().map(|r| r.1).collect();
            DepthRow {
                layer,
                tau: spec.tau(layer),
                mean_sparsity: stats::mean(&sp),
                mean_gap: stats::mean(&gp),
            }
        })
        .collect())
}
