// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::{
    Cli, DirectionsArgs, Failure, PlantedArgs, ScanArgs, ScoreArgs, SimulateArgs, SimulateCommand,
    SpectraArgs, SweepArgs, TraceArgs, ValidateArgs,
};
use crate::actstore::{
    read_rad, validate_attention, write_rad_bytes, ActivationSet, AttentionDump, Dtype, MaskKind,
    RadManifest,
};
use crate::artifact::{format_g9, write_atomic, Provenance};
use crate::concept::{
    build_difference_set, calibrate_sign, directions_from_rad, directions_to_rad,
    fit_directions_with, ConceptDirection, DirectionSidecar,
};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::par::Exec;
use crate::scan::{
    normalize_scan, project_tokens, render_csv, render_svg, tokenwise_report, LatScan,
    LayerAggregation, TokenStates,
};
use crate::spectra::{
    attention_sparsity, build_spectral_report, report_csv, report_svg, spectral_gap, ReportOptions,
};
use crate::synthlab::{
    gen_attention, gen_values, planted_concept_dataset, propagate, propagate_stack,
    random_unit_vector, sparsity_gap_sweep, PlantedSpec, SynthSpec, TauSchedule,
};

type CmdResult = std::result::Result<(), Failure>;

struct Input {
    manifest: RadManifest,
    acts: ActivationSet,
    attn: AttentionDump,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_input(path: &Path, prov: &mut Provenance) -> Result<Input> {
    let bytes = read_file(path)?;
    prov.add_input(&path.display().to_string(), &bytes);
    let (manifest, acts, attn) = read_rad(&bytes)?;
    Ok(Input {
        manifest,
        acts,
        attn,
    })
}

fn provenance(cli: &Cli, command: &str) -> Provenance {
    let config = serde_json::to_value(cli).expect("arguments serialize to JSON");
    Provenance::new(command, config)
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes to JSON");
    out.push(b'\n');
    out
}

/// Writes a CSV and its `<path>.prov.json` sidecar.
fn write_csv(path: &Path, text: &str, prov: &Provenance) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    write_atomic(&sidecar_path(path, ".prov.json"), &json_bytes(prov))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}

fn require_seed(cli: &Cli) -> std::result::Result<u64, Failure> {
    cli.seed
        .ok_or_else(|| Failure::Usage("the simulate commands require --seed".into()))
}

pub(super) fn validate(cli: &Cli, args: &ValidateArgs) -> CmdResult {
    let mut prov = provenance(cli, "validate");
    let input = read_input(&args.file, &mut prov)?;
    let report = validate_attention(&input.attn, cli.row_sum_tol);
    let m = &input.manifest;
    let doc = json!({
        "file": args.file.display().to_string(),
        "manifest": {
            "model_id": m.model_id,
            "hidden_dim": m.hidden_dim,
            "num_layers": m.num_layers,
            "num_heads": m.num_heads,
            "dtype_of_payload": m.dtype_of_payload,
            "records": m.record_index.len(),
        },
        "hidden_records": input.acts.len(),
        "attention": report,
        "provenance": prov,
    });
    let bytes = json_bytes(&doc);
    if let Some(out) = &args.out {
        write_atomic(out, &bytes)?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::Invalid {
            violations: report.violations,
        })
    }
}

pub(super) fn directions(cli: &Cli, args: &DirectionsArgs) -> CmdResult {
    let mut prov = provenance(cli, "directions");
    let input = read_input(&args.dump, &mut prov)?;
    let mut diffs = build_difference_set(&input.acts)?;
    if args.normalize_diffs {
        diffs = diffs.normalized();
    }
    let fitted = fit_directions_with(&diffs, args.center, &args.concept, Exec::default())?;
    let dir = calibrate_sign(&fitted, &input.acts)?;
    let (mut manifest, acts, mut sidecar) = directions_to_rad(&dir, &input.manifest.model_id)?;
    manifest.tokenizer_note = input.manifest.tokenizer_note.clone();
    manifest
        .extra
        .insert("concept_name".into(), Value::String(dir.concept_name.clone()));
    manifest.extra.insert("provenance".into(), prov.to_value());
    sidecar.provenance = Some(prov.to_value());
    let bytes = write_rad_bytes(&manifest, &acts, &AttentionDump::new(MaskKind::Full))?;
    write_atomic(&args.out, &bytes)?;
    write_atomic(&sidecar_path(&args.out, ".json"), &json_bytes(&sidecar))?;
    Ok(())
}

fn load_directions(path: &Path, prov: &mut Provenance) -> Result<ConceptDirection> {
    let input = read_input(path, prov)?;
    let side_path = sidecar_path(path, ".json");
    let side_bytes = read_file(&side_path)?;
    prov.add_input(&side_path.display().to_string(), &side_bytes);
    let sidecar: DirectionSidecar = serde_json::from_slice(&side_bytes)?;
    directions_from_rad(&input.acts, &sidecar)
}

/// Prompts that carry hidden states, in id order.
fn hidden_prompts(acts: &ActivationSet) -> Vec<String> {
    acts.prompts()
        .filter(|(id, _)| !acts.truncations(id).is_empty())
        .map(|(id, _)| id.to_string())
        .collect()
}

/// Pooled raw scan of every prompt in a baseline dump.
fn baseline_scan(path: &Path, dir: &ConceptDirection, prov: &mut Provenance) -> Result<LatScan> {
    let input = read_input(path, prov)?;
    let ids = hidden_prompts(&input.acts);
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "baseline {} has no hidden states",
            path.display()
        )));
    }
    let scans = ids
        .iter()
        .map(|id| project_tokens(&TokenStates::from_activation_set(&input.acts, id)?, dir))
        .collect::<Result<Vec<_>>>()?;
    LatScan::pool(&scans)
}

fn scan_prompt(acts: &ActivationSet, id: &str, dir: &ConceptDirection, baseline: Option<&LatScan>) -> Result<LatScan> {
    let raw = project_tokens(&TokenStates::from_activation_set(acts, id)?, dir)?;
    match baseline {
        Some(b) => normalize_scan(&raw, b),
        None => Ok(raw),
    }
}

pub(super) fn score(cli: &Cli, args: &ScoreArgs) -> CmdResult {
    let agg: LayerAggregation = args
        .layer_agg
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let mut prov = provenance(cli, "score");
    let input = read_input(&args.dump, &mut prov)?;
    let dir = load_directions(&args.dirs, &mut prov)?;
    let baseline = match &args.normalize {
        Some(p) => Some(baseline_scan(p, &dir, &mut prov)?),
        None => None,
    };
    let ids = if args.prompts.is_empty() {
        hidden_prompts(&input.acts)
    } else {
        args.prompts.clone()
    };
    if ids.is_empty() {
        return Err(Error::InvalidArgument("dump has no hidden states to score".into()).into());
    }

    let mut prompts = Vec::with_capacity(ids.len());
    let mut rows = Vec::new();
    for id in &ids {
        let scan = scan_prompt(&input.acts, id, &dir, baseline.as_ref())?;
        let report = tokenwise_report(&scan, agg)?;
        let polarity = input
            .acts
            .polarity(id)
            .map(|p| p.symbol())
            .unwrap_or("");
        for (j, (text, s)) in report.token_texts.iter().zip(&report.scores).enumerate() {
            rows.push(vec![
                id.clone(),
                polarity.to_string(),
                j.to_string(),
                text.clone(),
                format_g9(*s),
            ]);
        }
        prompts.push(json!({
            "prompt_id": id,
            "polarity": polarity,
            "layers": report.layers,
            "token_texts": report.token_texts,
            "scores": report.scores,
        }));
    }
    let doc = json!({
        "concept_name": dir.concept_name,
        "aggregation": agg,
        "normalized": baseline.is_some(),
        "prompts": prompts,
        "provenance": prov,
    });
    write_atomic(&args.out, &json_bytes(&doc))?;
    if let Some(path) = &args.csv {
        let text = csv_text(
            &["prompt_id", "polarity", "token_index", "token_text", "score"],
            rows,
        )?;
        write_csv(path, &text, &prov)?;
    }
    Ok(())
}

pub(super) fn scan(cli: &Cli, args: &ScanArgs) -> CmdResult {
    if args.out.is_none() && args.csv.is_none() {
        return Err(Failure::Usage("scan needs --out and/or --csv".into()));
    }
    let mut prov = provenance(cli, "scan");
    let input = read_input(&args.dump, &mut prov)?;
    let dir = load_directions(&args.dirs, &mut prov)?;
    let baseline = match &args.normalize {
        Some(p) => Some(baseline_scan(p, &dir, &mut prov)?),
        None => None,
    };
    let id = match &args.prompt {
        Some(p) => p.clone(),
        None => hidden_prompts(&input.acts)
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument("dump has no hidden states to scan".into()))?,
    };
    let scan = scan_prompt(&input.acts, &id, &dir, baseline.as_ref())?;
    let prov_value = prov.to_value();
    if let Some(path) = &args.out {
        write_atomic(path, render_svg(&scan, Some(&prov_value))?.as_bytes())?;
    }
    if let Some(path) = &args.csv {
        write_csv(path, &render_csv(&scan)?, &prov)?;
    }
    Ok(())
}

pub(super) fn spectra(cli: &Cli, args: &SpectraArgs) -> CmdResult {
    let mut prov = provenance(cli, "spectra");
    let input = read_input(&args.dump, &mut prov)?;
    let id = match &args.prompt {
        Some(p) => p.clone(),
        None => input
            .attn
            .prompt_ids()
            .into_iter()
            .next()
            .map(str::to_string)
            .ok_or_else(|| Error::InvalidArgument("dump has no attention matrices".into()))?,
    };
    // Hidden states at the last stored token, one per layer.
    let hidden: Option<Vec<Vec<f64>>> = input.acts.truncations(&id).last().and_then(|&k| {
        let states: Vec<Vec<f64>> = input
            .acts
            .layers()
            .into_iter()
            .map_while(|l| input.acts.get(&id, k, l).map(<[f64]>::to_vec))
            .collect();
        (states.len() >= 2).then_some(states)
    });
    let opts = ReportOptions {
        head_mode: args.head_mode.into(),
        row_sum_tol: cli.row_sum_tol,
        exec: Exec::default(),
    };
    let report = build_spectral_report(&input.attn, &id, hidden.as_deref(), &opts)?;
    let doc = json!({ "report": report, "provenance": prov });
    write_atomic(&args.out, &json_bytes(&doc))?;
    if let Some(path) = &args.csv {
        write_csv(path, &report_csv(&report)?, &prov)?;
    }
    if let Some(path) = &args.svg {
        write_atomic(path, report_svg(&report, Some(&prov.to_value())).as_bytes())?;
    }
    Ok(())
}

pub(super) fn simulate(cli: &Cli, args: &SimulateArgs) -> CmdResult {
    let seed = require_seed(cli)?;
    match &args.command {
        Some(SimulateCommand::Sweep(a)) => sweep(cli, a, seed),
        Some(SimulateCommand::Planted(a)) => planted(cli, a, seed),
        None => trace(cli, &args.trace, seed),
    }
}

fn trace(cli: &Cli, args: &TraceArgs, seed: u64) -> CmdResult {
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| Failure::Usage("simulate needs --out".into()))?;
    let schedule: TauSchedule = args
        .tau_schedule
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let spec = SynthSpec::new(args.n, args.d, args.layers, &schedule, args.mask.into(), seed)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let prov = provenance(cli, "simulate");

    let exec = Exec::default();
    let layer_ids: Vec<usize> = (0..spec.layers).collect();
    let stack: Vec<DenseMatrix> = if args.per_layer_matrices {
        exec.map(&layer_ids, |&l| gen_attention(&spec, l))
    } else {
        vec![gen_attention(&spec, 0); spec.layers]
    };
    let v = gen_values(spec.n, spec.d, seed, 0)?;
    let trace = if args.per_layer_matrices {
        propagate_stack(&stack, &v)?
    } else {
        propagate(&stack[0], &v, spec.layers)?
    };
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    let stats = exec.try_map(&stack, |a| Ok::<_, Error>((spectral_gap(a)?, attention_sparsity(a)?)))?;
    let rows = layer_ids.iter().map(|&l| {
        let tau = if args.per_layer_matrices {
            spec.tau(l)
        } else {
            spec.tau(0)
        };
        let (g, sp) = &stats[l];
        vec![
            l.to_string(),
            format_g9(tau),
            format_g9(g.lambda1),
            format_g9(g.lambda2_magnitude),
            format_g9(g.gap),
            format_g9(*sp),
            format_g9(trace.residuals[l]),
        ]
    });
    let text = csv_text(
        &["index", "tau", "lambda1", "lambda2_magnitude", "gap", "sparsity", "residual"],
        rows,
    )?;
    write_csv(out, &text, &prov)?;

    if let Some(path) = &args.rad {
        let mut attn = AttentionDump::new(spec.mask);
        for (l, (a, o)) in stack.iter().zip(&trace.outputs).enumerate() {
            attn.insert_matrix("synth", l, 0, a.clone())?;
            attn.insert_output("synth", l, o.clone())?;
        }
        let mut manifest = RadManifest::new("synthlab", spec.d, spec.layers, 1, Dtype::F32);
        manifest.extra.insert(
            "synth_spec".into(),
            serde_json::to_value(&spec).expect("spec serializes"),
        );
        manifest.extra.insert("provenance".into(), prov.to_value());
        write_atomic(path, &write_rad_bytes(&manifest, &ActivationSet::new(), &attn)?)?;
    }
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs, seed: u64) -> CmdResult {
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| seed.wrapping_add(i)).collect();
    let rows = sparsity_gap_sweep(&args.taus, args.n, &seeds, Exec::default())
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Data(other),
        })?;
    let text = csv_text(
        &["tau", "mean_sparsity", "mean_gap"],
        rows.iter().map(|r| {
            vec![
                format_g9(r.tau),
                format_g9(r.mean_sparsity),
                format_g9(r.mean_gap),
            ]
        }),
    )?;
    write_csv(&args.out, &text, &provenance(cli, "simulate sweep"))?;
    Ok(())
}

fn planted(cli: &Cli, args: &PlantedArgs, seed: u64) -> CmdResult {
    let directions = if args.per_layer_directions {
        (0..args.layers)
            .map(|l| random_unit_vector(args.d, seed.wrapping_add(l as u64)))
            .collect()
    } else {
        vec![random_unit_vector(args.d, seed)]
    };
    let spec = PlantedSpec {
        d: args.d,
        layers: args.layers,
        pairs: args.pairs,
        truncations: args.truncations,
        directions,
        margin: args.margin,
        noise: args.noise,
        seed,
    };
    let data = planted_concept_dataset(&spec).map_err(|e| match e {
        Error::InvalidArgument(m) => Failure::Usage(m),
        other => Failure::Data(other),
    })?;
    let prov = provenance(cli, "simulate planted");
    let mut manifest = RadManifest::new("synthlab/planted", args.d, args.layers, 0, Dtype::F32);
    manifest.extra.insert(
        "ground_truth".into(),
        json!({
            "directions": data.directions,
            "margin": args.margin,
            "noise": args.noise,
            "seed": seed,
        }),
    );
    manifest.extra.insert("provenance".into(), prov.to_value());
    let bytes = write_rad_bytes(&manifest, &data.acts, &AttentionDump::new(MaskKind::Full))?;
    write_atomic(&args.out, &bytes)?;
    Ok(())
}
