// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every primary criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero on any FAIL.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::Value;

use common::{build_payload, rng, Payload};
use rand::Rng;
use repscope::actstore::{read_rad, write_rad_bytes, AttentionDump, Dtype, MaskKind, RadManifest};
use repscope::concept::{build_difference_set, calibrate_sign, fit_directions};
use repscope::linalg::{dot, eigen_spectrum, norm, power_iteration, DenseMatrix, Side, DEFAULT_MAX_ITER, DEFAULT_TOL};
use repscope::par::Exec;
use repscope::scan::{project_tokens, TokenStates};
use repscope::spectra::{gershgorin_bound, principal_alignment};
use repscope::stats;
use repscope::synthlab::{
    depth_schedule_curve, gen_attention, gen_values, planted_concept_dataset, propagate,
    random_unit_vector, sparsity_gap_sweep, PlantedSpec, SynthSpec, TauSchedule,
};

struct Outcome {
    pass: bool,
    detail: String,
    /// Time spent in the code under test, when oracles dominate the wall clock.
    timed: Option<Duration>,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail, timed: None }
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn perron_frobenius() -> Outcome {
    const TAUS: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 10.0];
    let mut worst = [0.0f64; 5];
    let mut oracle_dev = 0.0f64;
    let mut timed = Duration::ZERO;
    for i in 0..1000u64 {
        let n = 4 + (i as usize % 61);
        let tau = TAUS[(i / 61) as usize % TAUS.len()];
        let spec = SynthSpec::new(n, 1, 1, &TauSchedule::Constant { tau }, MaskKind::Full, i).unwrap();
        let t = Instant::now();
        let a = gen_attention(&spec, 0);
        let row_dev = a.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let s = eigen_spectrum(&a).unwrap();
        let lambda1 = s.dominant_value.unwrap_or(f64::NAN);
        let max_mag = s.magnitudes[0];
        let gersh = gershgorin_bound(&a).global_max;
        let u = power_iteration(&a, Side::Right, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().eigenvector;
        let ones = 1.0 / (n as f64).sqrt();
        let cos = u.iter().map(|x| x * ones).sum::<f64>() / norm(&u);
        let angle = (1.0 - cos.min(1.0) * cos.min(1.0)).max(0.0).sqrt().asin();
        timed += t.elapsed();
        worst[0] = worst[0].max(row_dev);
        worst[1] = worst[1].max((lambda1 - 1.0).abs());
        worst[2] = worst[2].max(max_mag - 1.0);
        worst[3] = worst[3].max((gersh - 1.0).abs());
        worst[4] = worst[4].max(angle);
        // Independent solver: largest modulus.
        let theirs = to_na(&a).complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        oracle_dev = oracle_dev.max((theirs - max_mag).abs());
    }
    let pass = worst[0] <= 1e-12
        && worst[1] <= 1e-8
        && worst[2] <= 1e-8
        && worst[3] <= 1e-9
        && worst[4] <= 1e-6
        && oracle_dev <= 1e-8;
    let mut o = outcome(
        pass,
        format!(
            "1000 matrices: row-sum dev {:.1e}, |λ1-1| {:.1e}, max|λ|-1 {:.1e}, Gershgorin dev {:.1e}, u1 angle {:.1e} rad, oracle |λ|max dev {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], oracle_dev
        ),
    );
    o.timed = Some(timed);
    o
}

fn convergence_slope() -> Outcome {
    let a = DenseMatrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
    // Characteristic polynomial λ² − tr·λ + det = 0.
    let (tr, det): (f64, f64) = (0.9 + 0.8, 0.9 * 0.8 - 0.1 * 0.2);
    let disc = (tr * tr - 4.0 * det).sqrt();
    let lambda2 = (tr - disc) / 2.0;
    let solver = eigen_spectrum(&a).unwrap().second_magnitude();
    let target = lambda2.ln();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut all_within = true;
    for seed in 0..100 {
        let v = gen_values(2, 4, seed, 0).unwrap();
        let trace = propagate(&a, &v, 40).unwrap();
        let slope = trace.fitted_slope(5).unwrap_or(f64::NAN);
        lo = lo.min(slope);
        hi = hi.max(slope);
        all_within &= (slope / target - 1.0).abs() <= 0.1;
    }
    let pass = (lambda2 - 0.7).abs() < 1e-12 && (solver - lambda2).abs() < 1e-12 && all_within;
    outcome(
        pass,
        format!(
            "oracle λ2 {lambda2:.12}, solver |λ2| {solver:.12}; 100 V: slope ∈ [{lo:.6}, {hi:.6}] vs ln 0.7 = {target:.6} (±10%)"
        ),
    )
}

fn alignment_convergence() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut oracle_dev = 0.0f64;
    for seed in 0..50 {
        let spec = SynthSpec::new(16, 8, 1, &TauSchedule::Constant { tau: 1.0 }, MaskKind::Full, seed).unwrap();
        let a = gen_attention(&spec, 0);
        assert!(a.data().iter().all(|&x| x > 0.0));
        let mut o = gen_values(16, 8, seed, 0).unwrap();
        for _ in 0..20 {
            o = a.matmul(&o).unwrap();
        }
        let ours = principal_alignment(&a, &o).unwrap();
        // Oracle: all-ones against the first left singular vector from an SVD.
        let svd = to_na(&o).svd(true, false);
        let (imax, _) = svd.singular_values.iter().enumerate().fold((0, f64::MIN), |b, (i, &s)| if s > b.1 { (i, s) } else { b });
        let u = svd.u.unwrap().column(imax).into_owned();
        let theirs = u.iter().sum::<f64>().abs() / (16f64.sqrt() * u.norm());
        worst = worst.min(ours);
        oracle_dev = oracle_dev.max((ours - theirs).abs());
    }
    outcome(
        worst >= 0.99 && oracle_dev <= 1e-6,
        format!("50 positive A (n=16): min alignment {worst:.9}, SVD oracle dev {oracle_dev:.1e}"),
    )
}

fn sparsity_gap_trend() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let taus = [0.1, 0.5, 1.0, 2.0, 10.0];
    let rows = sparsity_gap_sweep(&taus, 32, &seeds, Exec::default()).unwrap();
    let seq = sparsity_gap_sweep(&taus, 32, &seeds, Exec::Sequential).unwrap();
    let sp: Vec<f64> = rows.iter().map(|r| r.mean_sparsity).collect();
    let gp: Vec<f64> = rows.iter().map(|r| r.mean_gap).collect();
    let rho = stats::spearman(&sp, &gp);
    // Oracle for ρ = −1: strictly opposite orderings.
    let opposite = sp.windows(2).all(|w| w[1] < w[0]) && gp.windows(2).all(|w| w[1] > w[0]);

    let spec = SynthSpec::new(32, 1, 8, &TauSchedule::Geometric { start: 2.0, end: 0.25 }, MaskKind::Full, 0).unwrap();
    let depth = depth_schedule_curve(&spec, &seeds, Exec::default()).unwrap();
    let gaps: Vec<f64> = depth.iter().map(|r| r.mean_gap).collect();
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);

    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        (rho + 1.0).abs() < 1e-12 && opposite && decreasing && rows == seq,
        format!(
            "ρ = {rho}; sparsity [{}], gap [{}]; depth gaps (τ 2→0.25, 8 layers, 20-seed mean) [{}]; parallel == sequential: {}",
            fmt(&sp),
            fmt(&gp),
            fmt(&gaps),
            rows == seq
        ),
    )
}

fn pipeline_oracle() -> Outcome {
    let (d, layers, pairs, margin, noise) = (64, 4, 100, 1.0, 0.05);
    let w = random_unit_vector(d, 2024);
    let data = planted_concept_dataset(&PlantedSpec {
        d,
        layers,
        pairs,
        truncations: 4,
        directions: vec![w.clone()],
        margin,
        noise,
        seed: 2024,
    })
    .unwrap();
    let bytes = write_rad_bytes(
        &RadManifest::new("planted", d, layers, 0, Dtype::F32),
        &data.acts,
        &AttentionDump::new(MaskKind::Full),
    )
    .unwrap();
    let (_, acts, _) = read_rad(&bytes).unwrap();

    let diffs = build_difference_set(&acts).unwrap();
    let dir = calibrate_sign(&fit_directions(&diffs, false, "planted").unwrap(), &acts).unwrap();

    let mut min_cos = f64::INFINITY;
    let mut min_oracle = f64::INFINITY;
    let mut min_signed = f64::INFINITY;
    for ld in &dir.layers {
        min_cos = min_cos.min(dot(&ld.vector, &w).abs());
        min_signed = min_signed.min(dot(&ld.vector, &w));
        // Brute force: top eigenvector of the d×d second-moment matrix.
        let vs = diffs.vectors(ld.layer).unwrap();
        let mut m = DMatrix::<f64>::zeros(d, d);
        for v in &vs {
            let x = nalgebra::DVector::from_column_slice(v);
            m += &x * x.transpose();
        }
        m /= vs.len() as f64;
        let eig = SymmetricEigen::new(m);
        let (imax, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::MIN), |b, (i, &s)| if s > b.1 { (i, s) } else { b });
        let top = eig.eigenvectors.column(imax);
        min_oracle = min_oracle.min(dot(top.as_slice(), &ld.vector).abs());
    }

    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (id, info) in acts.prompts() {
        let scan = project_tokens(&TokenStates::from_activation_set(&acts, id).unwrap(), &dir).unwrap();
        let scores = scan.scores.iter().flatten().copied();
        match info.polarity {
            Some(repscope::actstore::Polarity::Positive) => pos.extend(scores),
            Some(repscope::actstore::Polarity::Negative) => neg.extend(scores),
            None => {}
        }
    }
    let delta = stats::mean(&pos) - stats::mean(&neg);
    let bound = 3.0 * noise / (pairs as f64).sqrt();
    outcome(
        min_cos >= 0.99 && min_oracle >= 1.0 - 1e-8 && min_signed > 0.0 && (delta - margin).abs() <= bound,
        format!(
            "min |cos(v,w)| {min_cos:.6}, min |cos(v,oracle)| {min_oracle:.12}, signed min {min_signed:.6}, margin {delta:.6} (δ=1 ± {bound:.3})"
        ),
    )
}

/// Re-serializes the manifest after `edit`, padding with JSON whitespace so
/// the payload offsets stay valid.
fn patch_manifest(bytes: &[u8], edit: impl FnOnce(&mut Value)) -> Vec<u8> {
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut json: Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    edit(&mut json);
    let mut text = serde_json::to_vec(&json).unwrap();
    assert!(text.len() <= len, "edit grew the manifest");
    text.resize(len, b' ');
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + len..]);
    out
}

fn format_round_trip() -> Outcome {
    let mut r = rng(77);
    let mut identical = 0;
    let mut records = 0;
    for _ in 0..200 {
        let p = Payload {
            dtype: [Dtype::F16, Dtype::Bf16, Dtype::F32][r.gen_range(0..3)],
            d: r.gen_range(1..9),
            layers: r.gen_range(1..4),
            prompts: r.gen_range(1..5),
            ks: r.gen_range(1..4),
            heads: r.gen_range(0..3),
            n: r.gen_range(1..6),
            seed: r.gen(),
        };
        let (m, a, t) = build_payload(&p);
        let first = write_rad_bytes(&m, &a, &t).unwrap();
        let (m2, a2, t2) = read_rad(&first).unwrap();
        let second = write_rad_bytes(&m2, &a2, &t2).unwrap();
        identical += usize::from(first == second);
        records += m2.record_index.len();
    }

    let p = Payload { dtype: Dtype::F32, d: 4, layers: 2, prompts: 2, ks: 2, heads: 2, n: 3, seed: 5 };
    let (m, a, t) = build_payload(&p);
    let good = write_rad_bytes(&m, &a, &t).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let version = patch_manifest(&good, |j| j["format_version"] = 2.into());
    let truncated = good[..good.len() - 1].to_vec();
    let overlap = patch_manifest(&good, |j| {
        let first = j["record_index"][0]["offset"].clone();
        j["record_index"][1]["offset"] = first;
    });
    let shape = patch_manifest(&good, |j| j["hidden_dim"] = 5.into());
    let cases = [
        ("magic", bad_magic, "bad_magic"),
        ("version", version, "version_mismatch"),
        ("truncation", truncated, "truncated_payload"),
        ("offset overlap", overlap, "offset_overlap"),
        ("shape", shape, "shape_mismatch"),
    ];
    let mut codes = Vec::new();
    let mut all_match = true;
    for (name, bytes, want) in &cases {
        let got = match read_rad(bytes) {
            Ok(_) => "accepted".to_string(),
            Err(e) => e.code().to_string(),
        };
        all_match &= got == *want;
        codes.push(format!("{name}→{got}"));
    }
    let distinct = codes.len() == cases.iter().map(|c| c.2).collect::<std::collections::BTreeSet<_>>().len();
    outcome(
        identical == 200 && all_match && distinct,
        format!(
            "{identical}/200 payloads ({records} records) rewrite byte-identically; {}",
            codes.join(", ")
        ),
    )
}

const SESSION: &[&[&str]] = &[
    &["--seed", "3", "simulate", "planted", "--d", "16", "--layers", "4", "--pairs", "12", "--truncations", "3", "--out", "planted.rad"],
    &["validate", "planted.rad", "--out", "validate.json"],
    &["directions", "--dump", "planted.rad", "--concept", "honesty", "--out", "dirs.rad"],
    &["score", "--dump", "planted.rad", "--dirs", "dirs.rad", "--out", "scores.json", "--csv", "scores.csv"],
    &["scan", "--dump", "planted.rad", "--dirs", "dirs.rad", "--normalize", "planted.rad", "--out", "scan.svg", "--csv", "scan.csv"],
    &["--seed", "3", "simulate", "--n", "16", "--layers", "6", "--per-layer-matrices", "--out", "trace.csv", "--rad", "stack.rad"],
    &["spectra", "--dump", "stack.rad", "--out", "spectra.json", "--csv", "spectra.csv", "--svg", "spectra.svg"],
    &["spectra", "--dump", "stack.rad", "--head-mode", "per-head", "--out", "spectra_heads.json"],
    &["--seed", "3", "simulate", "sweep", "--seeds", "4", "--n", "12", "--out", "sweep.csv"],
];

fn run_session(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    for args in SESSION {
        let out = Command::new(env!("CARGO_BIN_EXE_repscope"))
            .current_dir(dir)
            .args(*args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect())
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, fb) = match (run_session(a.path()), run_session(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e),
    };
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != Some(&fa[*k])).collect();
    // Second run in place must reproduce the first.
    let again = run_session(a.path()).unwrap_or_default();
    let unstable: Vec<&String> = fa.keys().filter(|k| again.get(*k) != Some(&fa[*k])).collect();
    outcome(
        differing.is_empty() && unstable.is_empty() && fa.len() == fb.len(),
        format!(
            "{} subcommand runs, {} artifacts; differing across dirs {:?}, differing on rerun {:?}",
            SESSION.len(),
            fa.len(),
            differing,
            unstable
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 7] = [
        ("perron-frobenius suite", perron_frobenius, Some(Duration::from_secs(30))),
        ("convergence slope", convergence_slope, Some(Duration::from_secs(5))),
        ("alignment convergence", alignment_convergence, None),
        ("sparsity-gap trend", sparsity_gap_trend, Some(Duration::from_secs(60))),
        ("pipeline oracle", pipeline_oracle, Some(Duration::from_secs(10))),
        ("format round-trip", format_round_trip, None),
        ("cli determinism", cli_determinism, None),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let t = Instant::now();
        let o = run();
        let wall = t.elapsed();
        let elapsed = o.timed.unwrap_or(wall);
        let in_time = budget.map_or(true, |b| elapsed <= b);
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        let budget_note = budget.map_or(String::new(), |b| format!(" / budget {}s", b.as_secs()));
        let wall_note = o.timed.map_or(String::new(), |_| format!(", {:.2}s with oracles", wall.as_secs_f64()));
        println!(
            "{} {name}: {} [{:.2}s{budget_note}{wall_note}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
