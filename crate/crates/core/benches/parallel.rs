// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use repscope::actstore::{AttentionDump, MaskKind};
use repscope::concept::{build_difference_set, fit_directions_with};
use repscope::spectra::{build_spectral_report, HeadMode, ReportOptions};
use repscope::synthlab::{
    gen_attention, planted_concept_dataset, random_unit_vector, sparsity_gap_sweep, PlantedSpec,
    SynthSpec, TauSchedule,
};
use repscope::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sweep(c: &mut Criterion) {
    let taus = [0.1, 0.5, 1.0, 2.0, 10.0];
    let seeds: Vec<u64> = (0..20).collect();
    let mut g = c.benchmark_group("sparsity_gap_sweep");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| sparsity_gap_sweep(&taus, 48, &seeds, exec).unwrap())
        });
    }
    g.finish();
}

fn spectra(c: &mut Criterion) {
    let (layers, heads, n) = (12, 4, 48);
    let spec = SynthSpec::new(n, 1, layers, &TauSchedule::Geometric { start: 2.0, end: 0.25 }, MaskKind::Full, 9).unwrap();
    let mut dump = AttentionDump::new(MaskKind::Full);
    for layer in 0..layers {
        for head in 0..heads {
            let s = SynthSpec { seed: spec.seed + head as u64, ..spec.clone() };
            dump.insert_matrix("p", layer, head, gen_attention(&s, layer)).unwrap();
        }
    }
    let mut g = c.benchmark_group("spectral_report");
    for (name, exec) in MODES {
        let opts = ReportOptions { head_mode: HeadMode::PerHead, exec, ..ReportOptions::default() };
        g.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| build_spectral_report(&dump, "p", None, opts).unwrap())
        });
    }
    g.finish();
}

fn directions(c: &mut Criterion) {
    let d = 128;
    let data = planted_concept_dataset(&PlantedSpec {
        d,
        layers: 16,
        pairs: 100,
        truncations: 4,
        directions: vec![random_unit_vector(d, 1)],
        margin: 1.0,
        noise: 0.05,
        seed: 1,
    })
    .unwrap();
    let diffs = build_difference_set(&data.acts).unwrap();
    let mut g = c.benchmark_group("fit_directions");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| fit_directions_with(&diffs, false, "bench", exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sweep, spectra, directions);
criterion_main!(benches);
