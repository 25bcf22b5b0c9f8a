// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral diagnostics of attention matrices: stochasticity, eigenvalue
//! magnitudes, spectral gap, principal-eigenvector alignment with the
//! attention output, adjacent-layer similarity and row-entropy sparsity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::actstore::{renormalize_rows, AttentionDump, DEFAULT_ROW_SUM_TOL};
use crate::artifact::format_g9;
use crate::error::{Error, Result};
use crate::linalg::{
    cosine_similarity, dominant_left_singular_vector, eigen_spectrum, power_iteration, DenseMatrix,
    Side, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub lambda1: f64,
    pub lambda2_magnitude: f64,
    pub gap: f64,
}

/// Largest row-sum deviation and smallest entry of `a`.
fn stochasticity(a: &DenseMatrix) -> (f64, f64) {
    let dev = ones_fixed_point_check(a);
    let min = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    (dev, min)
}

fn require_stochastic(a: &DenseMatrix, tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let (dev, min) = stochasticity(a);
    if dev > tol || min < -tol {
        return Err(Error::NotStochastic {
            max_row_sum_deviation: dev,
            min_entry: min,
        });
    }
    Ok(())
}

/// `λ₁ − |λ₂|` of a row-stochastic matrix (row sums within the default
/// tolerance).
pub fn spectral_gap(a: &DenseMatrix) -> Result<GapResult> {
    require_stochastic(a, DEFAULT_ROW_SUM_TOL)?;
    gap_unchecked(a)
}

fn gap_unchecked(a: &DenseMatrix) -> Result<GapResult> {
    let s = eigen_spectrum(a)?;
    let lambda1 = s
        .dominant_value
        .ok_or_else(|| Error::InvalidArgument("matrix has no real eigenvalue".into()))?;
    let lambda2_magnitude = s.second_magnitude();
    Ok(GapResult {
        lambda1,
        lambda2_magnitude,
        gap: lambda1 - lambda2_magnitude,
    })
}

/// `‖a·1 − 1‖∞`.
pub fn ones_fixed_point_check(a: &DenseMatrix) -> f64 {
    a.row_sums()
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// `|cos(u₁, dominant left singular vector of o)|`, with `u₁` the right
/// principal eigenvector of `a` from power iteration.
pub fn principal_alignment(a: &DenseMatrix, o: &DenseMatrix) -> Result<f64> {
    alignment_with(a, o, Side::Right)
}

/// Same as [`principal_alignment`] with the left principal eigenvector.
pub fn principal_alignment_left(a: &DenseMatrix, o: &DenseMatrix) -> Result<f64> {
    alignment_with(a, o, Side::Left)
}

fn alignment_with(a: &DenseMatrix, o: &DenseMatrix, side: Side) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if o.rows() != a.rows() {
        return Err(Error::DimensionMismatch {
            context: "attention output rows",
            expected: a.rows(),
            found: o.rows(),
        });
    }
    let u = principal_vector(a, side)?;
    let s = dominant_left_singular_vector(o)?;
    Ok(cosine_similarity(&u, &s)?.abs())
}

fn principal_vector(a: &DenseMatrix, side: Side) -> Result<Vec<f64>> {
    match side {
        Side::Right => Ok(power_iteration(a, side, DEFAULT_TOL, DEFAULT_MAX_ITER)?.eigenvector),
        // The stationary distribution converges at rate |λ₂|, which is
        // close to 1 for sharp attention; inverse iteration does not care.
        Side::Left => eigen_spectrum(&a.transpose())?
            .dominant_vector
            .ok_or_else(|| Error::InvalidArgument("matrix has no real eigenvalue".into())),
    }
}

/// Cosines between consecutive layers' states at a fixed token.
pub fn adjacent_layer_similarity(hidden: &[Vec<f64>]) -> Result<Vec<f64>> {
    if hidden.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: hidden.len(),
        });
    }
    hidden
        .windows(2)
        .map(|w| cosine_similarity(&w[0], &w[1]))
        .collect()
}

/// `1 − mean row entropy / ln n`; 1 for `n = 1`.
pub fn attention_sparsity(a: &DenseMatrix) -> Result<f64> {
    let n = a.cols();
    if n == 1 {
        return Ok(1.0);
    }
    let mut entropies: Vec<f64> = a
        .row_iter()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect();
    // Summing in sorted order makes the mean independent of row order.
    entropies.sort_by(f64::total_cmp);
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    Ok((1.0 - mean / (n as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GershgorinBound {
    /// `|a_ii| + Σ_{j≠i} |a_ij|` per row.
    pub per_row: Vec<f64>,
    pub global_max: f64,
}

pub fn gershgorin_bound(a: &DenseMatrix) -> GershgorinBound {
    let per_row: Vec<f64> = a
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum())
        .collect();
    let global_max = per_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    GershgorinBound {
        per_row,
        global_max,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Averaged,
    PerHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub layer: usize,
    /// `None` for head-averaged entries.
    pub head: Option<usize>,
    pub n: usize,
    /// Largest `|row sum − 1|` before renormalization (worst head when averaged).
    pub max_row_sum_deviation: f64,
    pub magnitudes: Vec<f64>,
    pub lambda1: f64,
    pub lambda2_magnitude: f64,
    pub gap: f64,
    pub principal_right: Vec<f64>,
    pub gershgorin_max_bound: f64,
    /// Present when the dump holds the layer's attention output.
    pub alignment: Option<f64>,
    pub alignment_left: Option<f64>,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub prompt_id: String,
    pub head_mode: HeadMode,
    pub row_sum_tol: f64,
    /// Rows are always renormalized before analysis.
    pub renormalized: bool,
    pub entries: Vec<EntryReport>,
    /// Cosine between layers `(ℓ, ℓ+1)`; present when hidden states were given.
    pub adjacent_similarity: Option<Vec<f64>>,
}

impl SpectralReport {
    pub fn gap_curve(&self) -> Vec<(usize, Option<usize>, f64)> {
        self.entries.iter().map(|e| (e.layer, e.head, e.gap)).collect()
    }

    pub fn alignment_curve(&self) -> Vec<(usize, Option<usize>, Option<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.layer, e.head, e.alignment))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub head_mode: HeadMode,
    pub row_sum_tol: f64,
    pub exec: Exec,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            head_mode: HeadMode::Averaged,
            row_sum_tol: DEFAULT_ROW_SUM_TOL,
            exec: Exec::default(),
        }
    }
}

struct Job<'a> {
    layer: usize,
    head: Option<usize>,
    matrices: Vec<(usize, &'a DenseMatrix)>,
    output: Option<&'a DenseMatrix>,
}

/// Analyzes every layer of one prompt. `hidden`, when given, holds one
/// state per layer (at a fixed token) for the adjacent-layer curve.
pub fn build_spectral_report(
    dump: &AttentionDump,
    prompt_id: &str,
    hidden: Option<&[Vec<f64>]>,
    opts: &ReportOptions,
) -> Result<SpectralReport> {
    if !(opts.row_sum_tol > 0.0) {
        return Err(Error::InvalidArgument("row_sum_tol must be positive".into()));
    }
    let mut jobs = Vec::new();
    for layer in dump.layers(prompt_id) {
        let heads = dump.heads(prompt_id, layer);
        let output = dump.output(prompt_id, layer);
        match opts.head_mode {
            HeadMode::Averaged => jobs.push(Job {
                layer,
                head: None,
                matrices: heads,
                output,
            }),
            HeadMode::PerHead => jobs.extend(heads.into_iter().map(|(h, m)| Job {
                layer,
                head: Some(h),
                matrices: vec![(h, m)],
                output,
            })),
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no attention matrices for prompt {prompt_id}"
        )));
    }
    let entries = opts.exec.try_map(&jobs, |job| analyze(job, opts.row_sum_tol))?;
    let adjacent_similarity = hidden.map(adjacent_layer_similarity).transpose()?;
    Ok(SpectralReport {
        prompt_id: prompt_id.to_string(),
        head_mode: opts.head_mode,
        row_sum_tol: opts.row_sum_tol,
        renormalized: true,
        entries,
        adjacent_similarity,
    })
}

fn analyze(job: &Job<'_>, tol: f64) -> Result<EntryReport> {
    let tag = |head: Option<usize>| Error::at(job.layer, head.map_or(-1, |h| h as i64));
    let mut worst = 0.0f64;
    let mut renormed = Vec::with_capacity(job.matrices.len());
    for &(h, m) in &job.matrices {
        require_stochastic(m, tol).map_err(tag(Some(h)))?;
        worst = worst.max(ones_fixed_point_check(m));
        renormed.push(renormalize_rows(m).map_err(tag(Some(h)))?);
    }
    let a = if renormed.len() == 1 {
        renormed.pop().expect("one matrix")
    } else {
        let refs: Vec<&DenseMatrix> = renormed.iter().collect();
        DenseMatrix::mean_of(&refs).map_err(tag(job.head))?
    };
    let inner = || -> Result<EntryReport> {
        let s = eigen_spectrum(&a)?;
        let lambda1 = s
            .dominant_value
            .ok_or_else(|| Error::InvalidArgument("matrix has no real eigenvalue".into()))?;
        let lambda2_magnitude = s.second_magnitude();
        let principal_right = power_iteration(&a, Side::Right, DEFAULT_TOL, DEFAULT_MAX_ITER)?.eigenvector;
        let (alignment, alignment_left) = match job.output {
            Some(o) => (
                Some(principal_alignment(&a, o)?),
                Some(principal_alignment_left(&a, o)?),
            ),
            None => (None, None),
        };
        Ok(EntryReport {
            layer: job.layer,
            head: job.head,
            n: a.rows(),
            max_row_sum_deviation: worst,
            magnitudes: s.magnitudes,
            lambda1,
            lambda2_magnitude,
            gap: lambda1 - lambda2_magnitude,
            principal_right,
            gershgorin_max_bound: gershgorin_bound(&a).global_max,
            alignment,
            alignment_left,
            sparsity: attention_sparsity(&a)?,
        })
    };
    inner().map_err(tag(job.head))
}

/// `layer,head,lambda1,lambda2_magnitude,gap,sparsity,alignment,alignment_left`;
/// head is empty for averaged entries, missing alignments are empty.
pub fn report_csv(report: &SpectralReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "head",
        "lambda1",
        "lambda2_magnitude",
        "gap",
        "sparsity",
        "alignment",
        "alignment_left",
    ])?;
    let opt = |x: Option<f64>| x.map(format_g9).unwrap_or_default();
    for e in &report.entries {
        w.write_record([
            e.layer.to_string(),
            e.head.map(|h| h.to_string()).unwrap_or_default(),
            format_g9(e.lambda1),
            format_g9(e.lambda2_magnitude),
            format_g9(e.gap),
            format_g9(e.sparsity),
            opt(e.alignment),
            opt(e.alignment_left),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv of ASCII fields is UTF-8"))
}

/// Line chart of gap (and alignment, when present) against layer. Per-head
/// reports are averaged over heads for the chart.
pub fn report_svg(report: &SpectralReport, provenance: Option<&Value>) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 20.0;
    const B: f64 = 50.0;

    let mut layers: Vec<usize> = report.entries.iter().map(|e| e.layer).collect();
    layers.dedup();
    let mean_at = |layer: usize, f: &dyn Fn(&EntryReport) -> Option<f64>| {
        let xs: Vec<f64> = report
            .entries
            .iter()
            .filter(|e| e.layer == layer)
            .filter_map(f)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let gaps: Vec<Option<f64>> = layers.iter().map(|&l| mean_at(l, &|e| Some(e.gap))).collect();
    let aligns: Vec<Option<f64>> = layers.iter().map(|&l| mean_at(l, &|e| e.alignment)).collect();

    let span = (layers.len().max(2) - 1) as f64;
    let px = |i: usize| L + (W - L - R) * i as f64 / span;
    let py = |v: f64| T + (H - T - B) * (1.0 - v.clamp(0.0, 1.0));
    let polyline = |vals: &[Option<f64>], colour: &str, class: &str| {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", px(i), py(v))))
            .collect();
        if pts.is_empty() {
            String::new()
        } else {
            format!(
                "<polyline class=\"{class}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            )
        }
    };

    let mut meta = serde_json::json!({
        "prompt_id": report.prompt_id,
        "head_mode": report.head_mode,
        "layers": layers,
        "gap": gaps,
        "alignment": aligns,
    });
    if let Some(p) = provenance {
        meta["provenance"] = p.clone();
    }
    let meta = meta
        .to_string()
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, "<metadata>{meta}</metadata>");
    let _ = writeln!(
        s,
        r##"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - L - R,
        H - T - B
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v}</text>"#,
            L - 6.0,
            py(v) + 3.0
        );
    }
    for (i, l) in layers.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{l}</text>"#,
            px(i),
            H - B + 14.0
        );
    }
    s.push_str(&polyline(&gaps, "#2166ac", "gap"));
    s.push_str(&polyline(&aligns, "#b2182b", "alignment"));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">layer</text>"#,
        L + (W - L - R) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{cy}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {cy})">spectral gap / alignment</text>"#,
        cy = T + (H - T - B) / 2.0
    );
    s.push_str("</svg>\n");
    s
}
