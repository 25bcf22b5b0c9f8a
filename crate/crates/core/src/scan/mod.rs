// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading concepts back out: per-token projections onto a concept
//! direction (LAT scans), z-score normalization and token-wise reports.

mod heatmap;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::actstore::ActivationSet;
use crate::concept::ConceptDirection;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::stats;

pub use heatmap::{heatmap_color, render_csv, render_heatmap, render_svg, HeatmapFormat, PALETTE};

/// Hidden states of one prompt, indexed `[layer][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    pub layers: Vec<usize>,
    pub token_texts: Vec<String>,
    /// `states[i][t]` is the state at `layers[i]`, token `t`.
    pub states: Vec<Vec<Vec<f64>>>,
}

impl TokenStates {
    pub fn new(layers: Vec<usize>, token_texts: Vec<String>, states: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if layers.is_empty() || token_texts.is_empty() {
            return Err(Error::InvalidShape("token states need at least one layer and one token".into()));
        }
        if states.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                context: "token states layers",
                expected: layers.len(),
                found: states.len(),
            });
        }
        for row in &states {
            if row.len() != token_texts.len() {
                return Err(Error::DimensionMismatch {
                    context: "token states per layer",
                    expected: token_texts.len(),
                    found: row.len(),
                });
            }
        }
        Ok(Self {
            layers,
            token_texts,
            states,
        })
    }

    /// Collects the per-token states of one prompt: the record at
    /// truncation `k` is the final-token state after `k` answer tokens, so
    /// ascending `k` walks the response token by token.
    pub fn from_activation_set(acts: &ActivationSet, prompt_id: &str) -> Result<Self> {
        let ks: Vec<u32> = acts.truncations(prompt_id).into_iter().collect();
        if ks.is_empty() {
            return Err(Error::InvalidArgument(format!("no records for prompt {prompt_id}")));
        }
        let layers: Vec<usize> = acts
            .prompt_records(prompt_id)
            .map(|(key, _)| key.layer)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut states = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let mut row = Vec::with_capacity(ks.len());
            for &k in &ks {
                let v = acts.get(prompt_id, k, layer).ok_or_else(|| {
                    Error::InvalidShape(format!(
                        "prompt {prompt_id} lacks a record at k={k}, layer {layer}"
                    ))
                })?;
                row.push(v.to_vec());
            }
            states.push(row);
        }
        let token_texts = ks
            .iter()
            .map(|&k| acts.token_text(prompt_id, k).map_or_else(|| k.to_string(), str::to_string))
            .collect();
        Self::new(layers, token_texts, states)
    }

    pub fn token_count(&self) -> usize {
        self.token_texts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Per-layer baseline mean and population standard deviation.
    Zscore { mean: Vec<f64>, std: Vec<f64> },
}

/// Layer × token projection scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatScan {
    pub layers: Vec<usize>,
    pub token_texts: Vec<String>,
    /// `scores[i][t]` for `layers[i]`.
    pub scores: Vec<Vec<f64>>,
    pub normalization: Normalization,
}

impl LatScan {
    pub fn token_count(&self) -> usize {
        self.token_texts.len()
    }

    pub fn row(&self, layer: usize) -> Option<&[f64]> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.scores[i].as_slice())
    }

    pub fn max_abs(&self) -> f64 {
        self.scores
            .iter()
            .flatten()
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Concatenates the token axes of several scans over the same layers,
    /// e.g. to pool a baseline over many prompts.
    pub fn pool(scans: &[LatScan]) -> Result<LatScan> {
        let first = scans
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to pool".into()))?;
        let mut out = LatScan {
            layers: first.layers.clone(),
            token_texts: Vec::new(),
            scores: vec![Vec::new(); first.layers.len()],
            normalization: Normalization::Raw,
        };
        for s in scans {
            if s.layers != out.layers {
                return Err(Error::InvalidShape("pooled scans cover different layers".into()));
            }
            if s.normalization != Normalization::Raw {
                return Err(Error::InvalidArgument("only raw scans can be pooled".into()));
            }
            out.token_texts.extend(s.token_texts.iter().cloned());
            for (dst, src) in out.scores.iter_mut().zip(&s.scores) {
                dst.extend_from_slice(src);
            }
        }
        Ok(out)
    }
}

/// `scores[ℓ][t] = h_{ℓ,t} · v_ℓ`.
pub fn project_tokens(states: &TokenStates, dir: &ConceptDirection) -> Result<LatScan> {
    if !dir.sign_calibrated {
        return Err(Error::Uncalibrated);
    }
    let mut scores = Vec::with_capacity(states.layers.len());
    for (&layer, row) in states.layers.iter().zip(&states.states) {
        let v = &dir.layer(layer).ok_or(Error::MissingLayer { layer })?.vector;
        let mut out = Vec::with_capacity(row.len());
        for h in row {
            if h.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    context: "hidden state vs direction",
                    expected: v.len(),
                    found: h.len(),
                });
            }
            out.push(dot(h, v));
        }
        scores.push(out);
    }
    Ok(LatScan {
        layers: states.layers.clone(),
        token_texts: states.token_texts.clone(),
        scores,
        normalization: Normalization::Raw,
    })
}

/// Z-scores each layer of `scan` against the same layer of `baseline`.
pub fn normalize_scan(scan: &LatScan, baseline: &LatScan) -> Result<LatScan> {
    if scan.normalization != Normalization::Raw || baseline.normalization != Normalization::Raw {
        return Err(Error::InvalidArgument("normalize_scan expects raw scans".into()));
    }
    let mut means = Vec::with_capacity(scan.layers.len());
    let mut stds = Vec::with_capacity(scan.layers.len());
    let mut scores = Vec::with_capacity(scan.layers.len());
    for (&layer, row) in scan.layers.iter().zip(&scan.scores) {
        let base = baseline.row(layer).ok_or(Error::MissingLayer { layer })?;
        if base.len() < 2 {
            return Err(Error::DegenerateLayer {
                layer,
                detail: "baseline has fewer than 2 tokens",
            });
        }
        let mu = stats::mean(base);
        let sd = stats::std_dev(base);
        if !(sd > 0.0) {
            return Err(Error::DegenerateLayer {
                layer,
                detail: "zero baseline variance",
            });
        }
        scores.push(row.iter().map(|x| (x - mu) / sd).collect());
        means.push(mu);
        stds.push(sd);
    }
    Ok(LatScan {
        layers: scan.layers.clone(),
        token_texts: scan.token_texts.clone(),
        scores,
        normalization: Normalization::Zscore {
            mean: means,
            std: stds,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerAggregation {
    SingleLayer { layer: usize },
    /// Inclusive layer range.
    MeanOverLayers { first: usize, last: usize },
    /// Mean over the deepest `⌈L/3⌉` layers of the scan.
    TopThird,
}

impl std::str::FromStr for LayerAggregation {
    type Err = Error;

    /// `top-third`, `layer:N` or `mean:A-B` (inclusive).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad layer aggregation {s:?}"));
        let s = s.trim();
        if s == "top-third" {
            return Ok(LayerAggregation::TopThird);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "layer" => Ok(LayerAggregation::SingleLayer {
                layer: rest.trim().parse().map_err(|_| bad())?,
            }),
            "mean" => {
                let (a, b) = rest.split_once('-').ok_or_else(bad)?;
                let first = a.trim().parse().map_err(|_| bad())?;
                let last = b.trim().parse().map_err(|_| bad())?;
                if first > last {
                    return Err(bad());
                }
                Ok(LayerAggregation::MeanOverLayers { first, last })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreReport {
    pub aggregation: LayerAggregation,
    /// Layers actually averaged.
    pub layers: Vec<usize>,
    pub token_texts: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn tokenwise_report(scan: &LatScan, aggregation: LayerAggregation) -> Result<TokenScoreReport> {
    let rows: Vec<usize> = match aggregation {
        LayerAggregation::SingleLayer { layer } => {
            let i = scan
                .layers
                .iter()
                .position(|&l| l == layer)
                .ok_or(Error::MissingLayer { layer })?;
            vec![i]
        }
        LayerAggregation::MeanOverLayers { first, last } => {
            if first > last {
                return Err(Error::InvalidArgument(format!("empty layer range {first}..={last}")));
            }
            let rows: Vec<usize> = (0..scan.layers.len())
                .filter(|&i| (first..=last).contains(&scan.layers[i]))
                .collect();
            if let Some(layer) = (first..=last).find(|l| !scan.layers.contains(l)) {
                return Err(Error::MissingLayer { layer });
            }
            rows
        }
        LayerAggregation::TopThird => {
            let l = scan.layers.len();
            if l == 0 {
                return Err(Error::InvalidArgument("scan has no layers".into()));
            }
            let mut idx: Vec<usize> = (0..l).collect();
            idx.sort_by_key(|&i| scan.layers[i]);
            idx[l - l.div_ceil(3)..].to_vec()
        }
    };
    let t = scan.token_count();
    let mut scores = vec![0.0; t];
    for &i in &rows {
        for (acc, x) in scores.iter_mut().zip(&scan.scores[i]) {
            *acc += x;
        }
    }
    scores.iter_mut().for_each(|s| *s /= rows.len() as f64);
    let mut layers: Vec<usize> = rows.iter().map(|&i| scan.layers[i]).collect();
    layers.sort_unstable();
    Ok(TokenScoreReport {
        aggregation,
        layers,
        token_texts: scan.token_texts.clone(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::LayerDirection;

    fn dir(vectors: &[Vec<f64>]) -> ConceptDirection {
        ConceptDirection {
            concept_name: "t".into(),
            layers: vectors
                .iter()
                .enumerate()
                .map(|(layer, v)| LayerDirection {
                    layer,
                    vector: v.clone(),
                    explained_variance: 1.0,
                    explained_variance_ratio: 1.0,
                })
                .collect(),
            sign_calibrated: true,
            centered: false,
        }
    }

    fn scan(rows: Vec<Vec<f64>>) -> LatScan {
        let t = rows[0].len();
        LatScan {
            layers: (0..rows.len()).collect(),
            token_texts: (0..t).map(|i| format!("t{i}")).collect(),
            scores: rows,
            normalization: Normalization::Raw,
        }
    }

    #[test]
    fn projection_examples() {
        let v = vec![0.6, 0.8, 0.0];
        let w = vec![0.8, -0.6, 0.0];
        let h2: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 2.0 * a + b).collect();
        let states = TokenStates::new(
            vec![0],
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![v.clone(), w, h2]],
        )
        .unwrap();
        let s = project_tokens(&states, &dir(&[v])).unwrap();
        assert!((s.scores[0][0] - 1.0).abs() < 1e-15);
        assert!(s.scores[0][1].abs() < 1e-15);
        assert!((s.scores[0][2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn projection_requires_calibration_and_layers() {
        let states = TokenStates::new(vec![0, 1], vec!["a".into()], vec![vec![vec![1.0]], vec![vec![1.0]]])
            .unwrap();
        let mut d = dir(&[vec![1.0]]);
        assert!(matches!(project_tokens(&states, &d).unwrap_err(), Error::MissingLayer { layer: 1 }));
        d.sign_calibrated = false;
        assert!(matches!(project_tokens(&states, &d).unwrap_err(), Error::Uncalibrated));
    }

    #[test]
    fn self_normalization_is_standard() {
        let s = scan(vec![vec![1.0, 4.0, -2.0, 0.5], vec![10.0, 10.5, 9.0, 12.0]]);
        let z = normalize_scan(&s, &s).unwrap();
        for row in &z.scores {
            assert!(stats::mean(row).abs() <= 1e-10);
            assert!((stats::std_dev(row) - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn shift_moves_zscores_by_c_over_sigma() {
        let base = scan(vec![vec![1.0, 2.0, 3.0, 4.0]]);
        let shifted = scan(vec![vec![1.0 + 3.0, 2.0 + 3.0, 3.0 + 3.0, 4.0 + 3.0]]);
        let z0 = normalize_scan(&base, &base).unwrap();
        let z1 = normalize_scan(&shifted, &base).unwrap();
        let sigma = stats::std_dev(&[1.0, 2.0, 3.0, 4.0]);
        for (a, b) in z0.scores[0].iter().zip(&z1.scores[0]) {
            assert!((b - a - 3.0 / sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_baseline_variance_rejected() {
        let base = scan(vec![vec![1.0, 1.0, 1.0]]);
        assert!(matches!(
            normalize_scan(&base, &base).unwrap_err(),
            Error::DegenerateLayer { layer: 0, .. }
        ));
    }

    #[test]
    fn report_aggregations() {
        let one = scan(vec![vec![1.0, 2.0, 3.0]]);
        let r = tokenwise_report(&one, LayerAggregation::SingleLayer { layer: 0 }).unwrap();
        assert_eq!(r.scores, vec![1.0, 2.0, 3.0]);

        let same = scan(vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        let r = tokenwise_report(&same, LayerAggregation::MeanOverLayers { first: 0, last: 1 }).unwrap();
        assert_eq!(r.scores, vec![1.0, 2.0]);

        let basis = scan(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let r = tokenwise_report(&basis, LayerAggregation::MeanOverLayers { first: 0, last: 1 }).unwrap();
        assert_eq!(r.scores, vec![0.5, 0.5, 0.0]);

        assert!(tokenwise_report(&basis, LayerAggregation::MeanOverLayers { first: 1, last: 0 }).is_err());
        assert!(tokenwise_report(&basis, LayerAggregation::MeanOverLayers { first: 1, last: 2 }).is_err());
    }

    #[test]
    fn top_third_picks_deepest_layers() {
        let rows: Vec<Vec<f64>> = (0..7).map(|l| vec![l as f64]).collect();
        let r = tokenwise_report(&scan(rows), LayerAggregation::TopThird).unwrap();
        assert_eq!(r.layers, vec![4, 5, 6]);
        assert_eq!(r.scores, vec![5.0]);
    }

    #[test]
    fn pooling_concatenates_tokens() {
        let a = scan(vec![vec![1.0], vec![2.0]]);
        let b = scan(vec![vec![3.0, 4.0], vec![5.0, 6.0]]);
        let p = LatScan::pool(&[a, b]).unwrap();
        assert_eq!(p.scores, vec![vec![1.0, 3.0, 4.0], vec![2.0, 5.0, 6.0]]);
        assert_eq!(p.token_count(), 3);
    }

    #[test]
    fn aggregation_parses() {
        assert_eq!("top-third".parse::<LayerAggregation>().unwrap(), LayerAggregation::TopThird);
        assert_eq!(
            "layer:7".parse::<LayerAggregation>().unwrap(),
            LayerAggregation::SingleLayer { layer: 7 }
        );
        assert_eq!(
            "mean:2-5".parse::<LayerAggregation>().unwrap(),
            LayerAggregation::MeanOverLayers { first: 2, last: 5 }
        );
        for bad in ["", "top", "layer:x", "mean:5-2", "mean:3", "max:1"] {
            assert!(bad.parse::<LayerAggregation>().is_err(), "{bad}");
        }
    }
}
