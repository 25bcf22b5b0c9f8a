// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive stimuli, difference sets and per-layer concept directions.
//!
//! A stimulus template is rendered twice per (question, truncated answer):
//! once with the experimental concept word and once with the reference
//! word. The hidden states of the two renderings are subtracted, and the
//! first principal component of the differences at each layer is the
//! concept direction for that layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationSet, Dtype, Polarity, RadManifest};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, pca_components};
use crate::par::Exec;

pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const CONCEPT_PLACEHOLDER: &str = "<concept>";
pub const QA_PLACEHOLDER: &str = "<qa>";

/// Relative tolerance under which the top two PCA eigenvalues count as tied.
pub const DEGENERACY_TOL: f64 = 1e-10;

/// Prefix of the prompt ids under which directions are stored in RAD files.
pub const DIRECTION_PREFIX: &str = "direction/layer_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusTemplate {
    pub template_text: String,
    pub experimental_value: String,
    pub reference_value: String,
}

impl StimulusTemplate {
    pub fn new(
        template_text: impl Into<String>,
        experimental_value: impl Into<String>,
        reference_value: impl Into<String>,
    ) -> Result<Self> {
        let t = Self {
            template_text: template_text.into(),
            experimental_value: experimental_value.into(),
            reference_value: reference_value.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [IMAGE_PLACEHOLDER, CONCEPT_PLACEHOLDER, QA_PLACEHOLDER] {
            match self.template_text.matches(p).count() {
                1 => {}
                0 => return Err(Error::Template(format!("missing placeholder {p}"))),
                c => {
                    return Err(Error::Template(format!(
                        "placeholder {p} appears {c} times, expected once"
                    )))
                }
            }
        }
        if self.experimental_value == self.reference_value {
            return Err(Error::Template(format!(
                "experimental and reference values are both {:?}",
                self.experimental_value
            )));
        }
        Ok(())
    }

    pub fn concept_word(&self, polarity: Polarity) -> &str {
        match polarity {
            Polarity::Positive => &self.experimental_value,
            Polarity::Negative => &self.reference_value,
        }
    }

    /// Fills the template. `<qa>` becomes `"{question}\nASSISTANT: {answer}"`;
    /// `<image>` is left for the extractor to replace with image tokens.
    pub fn render(&self, polarity: Polarity, question: &str, answer_prefix: &str) -> String {
        let qa = format!("{question}\nASSISTANT: {answer_prefix}");
        self.template_text
            .replacen(CONCEPT_PLACEHOLDER, self.concept_word(polarity), 1)
            .replacen(QA_PLACEHOLDER, &qa, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    All,
    Stride(usize),
    MaxCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub mode: TruncationMode,
    pub min_k: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            mode: TruncationMode::All,
            min_k: 1,
        }
    }
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_k == 0 {
            return Err(Error::InvalidArgument("minimum k must be >= 1".into()));
        }
        match self.mode {
            TruncationMode::Stride(0) => Err(Error::InvalidArgument("stride must be >= 1".into())),
            TruncationMode::MaxCount(0) => {
                Err(Error::InvalidArgument("max_count must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Truncation positions for an answer of `len` tokens, ascending.
    /// Empty when `len < min_k`.
    pub fn select(&self, len: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if len < self.min_k {
            return Ok(Vec::new());
        }
        let lo = self.min_k;
        Ok(match self.mode {
            TruncationMode::All => (lo..=len).collect(),
            TruncationMode::Stride(s) => (lo..=len).step_by(s).collect(),
            TruncationMode::MaxCount(m) => {
                let span = len - lo;
                if m == 1 {
                    vec![len]
                } else if m > span {
                    (lo..=len).collect()
                } else {
                    // Evenly spaced including both ends; integer rounding
                    // keeps the picks strictly increasing because m ≤ span.
                    (0..m)
                        .map(|i| lo + (i * span + (m - 1) / 2) / (m - 1))
                        .collect()
                }
            }
        })
    }
}

/// An instruction with its reference answer and the answer's token
/// boundaries, given as byte offsets where each token ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub pair_id: String,
    pub question: String,
    pub answer: String,
    pub cut_points: Vec<usize>,
}

impl QaPair {
    pub fn new(
        pair_id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
        cut_points: Vec<usize>,
    ) -> Result<Self> {
        let p = Self {
            pair_id: pair_id.into(),
            question: question.into(),
            answer: answer.into(),
            cut_points,
        };
        p.validate()?;
        Ok(p)
    }

    /// Tokenizes the answer on whitespace; each token keeps its leading space.
    pub fn whitespace(
        pair_id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Result<Self> {
        let answer = answer.into();
        let mut cuts = Vec::new();
        let mut in_word = false;
        for (i, c) in answer.char_indices() {
            if c.is_whitespace() {
                if in_word {
                    cuts.push(i);
                }
                in_word = false;
            } else {
                in_word = true;
            }
        }
        if in_word {
            cuts.push(answer.len());
        }
        Self::new(pair_id, question, answer, cuts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cut_points.is_empty() || self.answer.is_empty() {
            return Err(Error::EmptyAnswer {
                pair_id: self.pair_id.clone(),
            });
        }
        let mut prev = 0;
        for &c in &self.cut_points {
            if c <= prev || c > self.answer.len() || !self.answer.is_char_boundary(c) {
                return Err(Error::InvalidArgument(format!(
                    "pair {}: cut point {c} is not an increasing character boundary",
                    self.pair_id
                )));
            }
            prev = c;
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.cut_points.len()
    }

    /// The first `k` tokens of the answer.
    pub fn prefix(&self, k: usize) -> &str {
        &self.answer[..self.cut_points[k - 1]]
    }

    /// Text of the `k`-th answer token (1-based).
    pub fn token(&self, k: usize) -> &str {
        let start = if k == 1 { 0 } else { self.cut_points[k - 2] };
        &self.answer[start..self.cut_points[k - 1]]
    }
}

/// Id of the rendering of `pair_id` under `polarity`.
pub fn prompt_id(pair_id: &str, polarity: Polarity) -> String {
    match polarity {
        Polarity::Positive => format!("{pair_id}:pos"),
        Polarity::Negative => format!("{pair_id}:neg"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prompt_id: String,
    pub pair_id: String,
    pub polarity: Polarity,
    pub k: usize,
    pub full_text: String,
    /// The answer token the truncation ends on.
    pub token_text: String,
}

/// Renders every pair at every selected truncation, positive first.
pub fn render_prompts(
    template: &StimulusTemplate,
    qa_pairs: &[QaPair],
    policy: &TruncationPolicy,
) -> Result<Vec<RenderedPrompt>> {
    template.validate()?;
    policy.validate()?;
    if qa_pairs.is_empty() {
        return Err(Error::InvalidArgument("no question/answer pairs".into()));
    }
    let mut out = Vec::new();
    for pair in qa_pairs {
        pair.validate()?;
        for k in policy.select(pair.token_count())? {
            for polarity in [Polarity::Positive, Polarity::Negative] {
                out.push(RenderedPrompt {
                    prompt_id: prompt_id(&pair.pair_id, polarity),
                    pair_id: pair.pair_id.clone(),
                    polarity,
                    k,
                    full_text: template.render(polarity, &pair.question, pair.prefix(k)),
                    token_text: pair.token(k).to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    pub pair_id: String,
    pub k: u32,
    pub vector: Vec<f64>,
}

/// `A⁺ − A⁻` per layer, each layer ordered by `(pair_id, k)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSet {
    pub layers: BTreeMap<usize, Vec<Difference>>,
}

impl DifferenceSet {
    pub fn layer(&self, layer: usize) -> Option<&[Difference]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn vectors(&self, layer: usize) -> Option<Vec<&[f64]>> {
        self.layer(layer)
            .map(|ds| ds.iter().map(|d| d.vector.as_slice()).collect())
    }

    /// Rescales every difference to unit norm; zero differences are left as is.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for d in out.layers.values_mut().flatten() {
            let n = norm(&d.vector);
            if n > 0.0 {
                d.vector.iter_mut().for_each(|x| *x /= n);
            }
        }
        out
    }
}

/// Pairs the positive and negative renderings of every pair and subtracts.
///
/// Prompts without a polarity label are ignored.
pub fn build_difference_set(acts: &ActivationSet) -> Result<DifferenceSet> {
    let mut pairs: BTreeMap<&str, (Option<&str>, Option<&str>)> = BTreeMap::new();
    for (id, info) in acts.prompts() {
        let Some(pol) = info.polarity else { continue };
        let Some(pair_id) = info.pair_id.as_deref() else {
            return Err(Error::InvalidArgument(format!(
                "prompt {id} has a polarity but no pair_id"
            )));
        };
        let slot = pairs.entry(pair_id).or_default();
        let side = match pol {
            Polarity::Positive => &mut slot.0,
            Polarity::Negative => &mut slot.1,
        };
        if let Some(prev) = side.replace(id) {
            return Err(Error::InvalidArgument(format!(
                "pair {pair_id} has two {} prompts: {prev} and {id}",
                pol.symbol()
            )));
        }
    }

    let mut out = DifferenceSet::default();
    for (pair_id, (pos, neg)) in pairs {
        let orphan = |k: u32, layer: usize| Error::UnmatchedRecord {
            pair_id: pair_id.to_string(),
            k,
            layer,
        };
        let (pos, neg) = match (pos, neg) {
            (Some(p), Some(n)) => (p, n),
            (Some(only), None) | (None, Some(only)) => {
                return Err(match acts.prompt_records(only).next() {
                    Some((key, _)) => orphan(key.k, key.layer),
                    None => Error::InvalidArgument(format!("pair {pair_id} has a single prompt")),
                });
            }
            (None, None) => unreachable!(),
        };
        let mut neg_records: BTreeMap<(u32, usize), &[f64]> = acts
            .prompt_records(neg)
            .map(|(key, v)| ((key.k, key.layer), v))
            .collect();
        for (key, a_pos) in acts.prompt_records(pos) {
            let a_neg = neg_records
                .remove(&(key.k, key.layer))
                .ok_or_else(|| orphan(key.k, key.layer))?;
            out.layers.entry(key.layer).or_default().push(Difference {
                pair_id: pair_id.to_string(),
                k: key.k,
                vector: a_pos.iter().zip(a_neg).map(|(p, n)| p - n).collect(),
            });
        }
        if let Some(&(k, layer)) = neg_records.keys().next() {
            return Err(orphan(k, layer));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDirection {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub explained_variance: f64,
    pub explained_variance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDirection {
    pub concept_name: String,
    /// Ascending, contiguous layer indices.
    pub layers: Vec<LayerDirection>,
    pub sign_calibrated: bool,
    pub centered: bool,
}

impl ConceptDirection {
    pub fn layer(&self, layer: usize) -> Option<&LayerDirection> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.vector.len())
    }
}

/// First principal component of each layer's differences.
pub fn fit_directions(
    diffs: &DifferenceSet,
    center: bool,
    concept_name: &str,
) -> Result<ConceptDirection> {
    fit_directions_with(diffs, center, concept_name, Exec::default())
}

pub fn fit_directions_with(
    diffs: &DifferenceSet,
    center: bool,
    concept_name: &str,
    exec: Exec,
) -> Result<ConceptDirection> {
    if diffs.layers.is_empty() {
        return Err(Error::InvalidArgument("difference set is empty".into()));
    }
    let layers: Vec<usize> = diffs.layers.keys().copied().collect();
    if let Some(w) = layers.windows(2).find(|w| w[1] != w[0] + 1) {
        return Err(Error::MissingLayer { layer: w[0] + 1 });
    }
    let fitted = exec.try_map(&layers, |&layer| {
        let samples = diffs.vectors(layer).unwrap_or_default();
        fit_layer(layer, &samples, center)
    })?;
    Ok(ConceptDirection {
        concept_name: concept_name.to_string(),
        layers: fitted,
        sign_calibrated: false,
        centered: center,
    })
}

fn fit_layer(layer: usize, samples: &[&[f64]], center: bool) -> Result<LayerDirection> {
    let degenerate = |detail| Error::DegenerateLayer { layer, detail };
    if samples.len() < 2 {
        return Err(degenerate("fewer than 2 difference vectors"));
    }
    let d = samples[0].len();
    let k = 2.min(samples.len()).min(d);
    let pca = pca_components(samples, k, center).map_err(|e| match e {
        Error::ZeroVariance => degenerate("all differences identical"),
        other => other,
    })?;
    if let [l1, l2, ..] = pca.explained_variance[..] {
        if l1 - l2 <= DEGENERACY_TOL * l1 {
            return Err(degenerate("top two principal components are tied"));
        }
    }
    Ok(LayerDirection {
        layer,
        vector: pca.components[0].clone(),
        explained_variance: pca.explained_variance[0],
        explained_variance_ratio: pca.explained_variance_ratio[0],
    })
}

/// Orients each layer so the mean difference projects non-negatively.
pub fn calibrate_sign(dir: &ConceptDirection, acts: &ActivationSet) -> Result<ConceptDirection> {
    calibrate_sign_with(dir, &build_difference_set(acts)?)
}

pub fn calibrate_sign_with(dir: &ConceptDirection, diffs: &DifferenceSet) -> Result<ConceptDirection> {
    let mut out = dir.clone();
    for ld in &mut out.layers {
        let layer = ld.layer;
        let ds = diffs
            .layer(layer)
            .filter(|ds| !ds.is_empty())
            .ok_or(Error::MissingLayer { layer })?;
        let mut sum = 0.0;
        let mut sum_abs = 0.0;
        for d in ds {
            if d.vector.len() != ld.vector.len() {
                return Err(Error::DimensionMismatch {
                    context: "difference vs direction",
                    expected: ld.vector.len(),
                    found: d.vector.len(),
                });
            }
            let p = dot(&d.vector, &ld.vector);
            sum += p;
            sum_abs += p.abs();
        }
        if sum.abs() <= 1e-12 * sum_abs || sum_abs == 0.0 {
            return Err(Error::UndecidableOrientation { layer });
        }
        if sum < 0.0 {
            ld.vector.iter_mut().for_each(|x| *x = -*x);
        }
    }
    out.sign_calibrated = true;
    Ok(out)
}

/// Per-layer metadata written next to a directions RAD file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSidecar {
    pub concept_name: String,
    pub sign_calibrated: bool,
    pub centered: bool,
    pub layers: Vec<SidecarLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarLayer {
    pub layer: usize,
    pub explained_variance: f64,
    pub explained_variance_ratio: f64,
}

pub fn direction_prompt_id(layer: usize) -> String {
    format!("{DIRECTION_PREFIX}{layer}")
}

/// Splits a direction into the RAD records and the JSON sidecar.
pub fn directions_to_rad(
    dir: &ConceptDirection,
    model_id: &str,
) -> Result<(RadManifest, ActivationSet, DirectionSidecar)> {
    let mut acts = ActivationSet::new();
    for ld in &dir.layers {
        let id = direction_prompt_id(ld.layer);
        acts.set_prompt(id.clone(), None, None);
        acts.insert(id, 1, ld.layer, ld.vector.clone())?;
    }
    let manifest = RadManifest::new(
        model_id,
        dir.dim(),
        dir.layers.len(),
        0,
        Dtype::F32,
    );
    let sidecar = DirectionSidecar {
        concept_name: dir.concept_name.clone(),
        sign_calibrated: dir.sign_calibrated,
        centered: dir.centered,
        layers: dir
            .layers
            .iter()
            .map(|l| SidecarLayer {
                layer: l.layer,
                explained_variance: l.explained_variance,
                explained_variance_ratio: l.explained_variance_ratio,
            })
            .collect(),
        provenance: None,
    };
    Ok((manifest, acts, sidecar))
}

/// Rebuilds a direction from its RAD records and sidecar. Vectors are
/// renormalized to undo payload rounding.
pub fn directions_from_rad(acts: &ActivationSet, sidecar: &DirectionSidecar) -> Result<ConceptDirection> {
    let mut layers = Vec::with_capacity(sidecar.layers.len());
    for sl in &sidecar.layers {
        let v = acts
            .get(&direction_prompt_id(sl.layer), 1, sl.layer)
            .ok_or(Error::MissingLayer { layer: sl.layer })?;
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::ZeroVector("stored direction"));
        }
        layers.push(LayerDirection {
            layer: sl.layer,
            vector: v.iter().map(|x| x / n).collect(),
            explained_variance: sl.explained_variance,
            explained_variance_ratio: sl.explained_variance_ratio,
        });
    }
    if layers.is_empty() {
        return Err(Error::BadManifest("directions sidecar lists no layers".into()));
    }
    Ok(ConceptDirection {
        concept_name: sidecar.concept_name.clone(),
        layers,
        sign_calibrated: sidecar.sign_calibrated,
        centered: sidecar.centered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> StimulusTemplate {
        StimulusTemplate::new(
            "USER: <image> Pretend you are an <concept> person talking about the image: <qa>",
            "honest",
            "untruthful",
        )
        .unwrap()
    }

    fn acts_from(diffs: &[(&str, u32, usize, Vec<f64>, Vec<f64>)]) -> ActivationSet {
        let mut a = ActivationSet::new();
        for (pair, k, layer, pos, neg) in diffs {
            let p = prompt_id(pair, Polarity::Positive);
            let n = prompt_id(pair, Polarity::Negative);
            a.set_prompt(p.clone(), Some(Polarity::Positive), Some(pair.to_string()));
            a.set_prompt(n.clone(), Some(Polarity::Negative), Some(pair.to_string()));
            a.insert(p, *k, *layer, pos.clone()).unwrap();
            a.insert(n, *k, *layer, neg.clone()).unwrap();
        }
        a
    }

    #[test]
    fn template_placeholders_checked() {
        assert!(StimulusTemplate::new("<image> <concept>", "a", "b").is_err());
        assert!(StimulusTemplate::new("<image> <concept> <qa> <qa>", "a", "b").is_err());
        assert!(StimulusTemplate::new("<image> <concept> <qa>", "a", "a").is_err());
    }

    #[test]
    fn renders_two_polarities_per_truncation() {
        let qa = QaPair::whitespace("p0", "Describe it.", "A red bus").unwrap();
        let out = render_prompts(&template(), &[qa], &TruncationPolicy::default()).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[0].full_text.matches("honest").count(), 1);
        assert!(out[1].full_text.contains("untruthful"));
        assert!(out[5].full_text.ends_with("ASSISTANT: A red bus"));
        assert_eq!(out[2].token_text, " red");
    }

    #[test]
    fn renderings_differ_only_at_concept_word() {
        let qa = QaPair::whitespace("p0", "Q?", "one two").unwrap();
        let out = render_prompts(&template(), &[qa], &TruncationPolicy::default()).unwrap();
        for pair in out.chunks(2) {
            let pos = &pair[0].full_text;
            let neg = &pair[1].full_text;
            let head = pos.find("honest").unwrap();
            assert_eq!(&pos[..head], &neg[..head]);
            assert_eq!(&pos[head + "honest".len()..], &neg[head + "untruthful".len()..]);
        }
    }

    #[test]
    fn truncation_modes() {
        let stride = TruncationPolicy {
            mode: TruncationMode::Stride(2),
            min_k: 1,
        };
        assert_eq!(stride.select(5).unwrap(), vec![1, 3, 5]);
        let capped = TruncationPolicy {
            mode: TruncationMode::MaxCount(4),
            min_k: 1,
        };
        assert_eq!(capped.select(10).unwrap(), vec![1, 4, 7, 10]);
        assert_eq!(capped.select(3).unwrap(), vec![1, 2, 3]);
        let high = TruncationPolicy {
            mode: TruncationMode::All,
            min_k: 4,
        };
        assert!(high.select(3).unwrap().is_empty());
        assert!(TruncationPolicy {
            mode: TruncationMode::Stride(0),
            min_k: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn empty_answer_rejected() {
        let err = QaPair::whitespace("p9", "Q?", "   ").unwrap_err();
        assert!(matches!(err, Error::EmptyAnswer { .. }));
    }

    #[test]
    fn difference_is_positive_minus_negative() {
        let acts = acts_from(&[
            ("a", 1, 0, vec![1.0, 2.0], vec![0.0, 2.0]),
            ("b", 1, 0, vec![3.0, 3.0], vec![3.0, 3.0]),
        ]);
        let ds = build_difference_set(&acts).unwrap();
        let l0 = ds.layer(0).unwrap();
        assert_eq!(l0[0].vector, vec![1.0, 0.0]);
        assert_eq!(l0[1].vector, vec![0.0, 0.0]);
    }

    #[test]
    fn difference_counts() {
        let mut rows = Vec::new();
        for p in ["p0", "p1", "p2"] {
            for k in 1..=4 {
                rows.push((p, k, 0, vec![1.0, 0.0], vec![0.0, 0.0]));
            }
        }
        let ds = build_difference_set(&acts_from(&rows)).unwrap();
        assert_eq!(ds.layer(0).unwrap().len(), 12);
    }

    #[test]
    fn orphan_named() {
        let mut acts = acts_from(&[("a", 1, 0, vec![1.0], vec![0.0])]);
        acts.insert("a:pos", 2, 0, vec![1.0]).unwrap();
        match build_difference_set(&acts).unwrap_err() {
            Error::UnmatchedRecord { pair_id, k, layer } => {
                assert_eq!((pair_id.as_str(), k, layer), ("a", 2, 0));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn noiseless_rank_one_recovers_direction() {
        let w = [0.6, 0.0, -0.8];
        let mut rows = Vec::new();
        let pairs = ["a", "b", "c", "d"];
        for (i, p) in pairs.iter().enumerate() {
            let s = (i + 1) as f64;
            let pos: Vec<f64> = w.iter().map(|x| s * x).collect();
            rows.push((*p, 1, 0, pos, vec![0.0; 3]));
        }
        let ds = build_difference_set(&acts_from(&rows)).unwrap();
        let dir = fit_directions(&ds, false, "t").unwrap();
        let v = &dir.layers[0].vector;
        assert!((dot(v, &w).abs() - 1.0).abs() < 1e-12);
        assert!((dir.layers[0].explained_variance_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_differences_degenerate_when_centered() {
        let rows: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|p| (*p, 1, 3, vec![1.0, 1.0], vec![0.0, 0.0]))
            .collect();
        let ds = build_difference_set(&acts_from(&rows)).unwrap();
        match fit_directions(&ds, true, "t").unwrap_err() {
            Error::DegenerateLayer { layer, .. } => assert_eq!(layer, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tied_components_rejected() {
        let rows = vec![
            ("a", 1, 0, vec![1.0, 0.0], vec![0.0, 0.0]),
            ("b", 1, 0, vec![0.0, 1.0], vec![0.0, 0.0]),
        ];
        let ds = build_difference_set(&acts_from(&rows)).unwrap();
        assert!(matches!(
            fit_directions(&ds, false, "t").unwrap_err(),
            Error::DegenerateLayer { .. }
        ));
    }

    fn single_layer_dir(v: Vec<f64>) -> ConceptDirection {
        ConceptDirection {
            concept_name: "t".into(),
            layers: vec![LayerDirection {
                layer: 0,
                vector: v,
                explained_variance: 1.0,
                explained_variance_ratio: 1.0,
            }],
            sign_calibrated: false,
            centered: false,
        }
    }

    #[test]
    fn calibration_flips_and_keeps() {
        let acts = acts_from(&[
            ("a", 1, 0, vec![1.0, 0.0], vec![0.0, 0.0]),
            ("b", 1, 0, vec![1.0, 0.0], vec![0.0, 0.0]),
        ]);
        let flipped = calibrate_sign(&single_layer_dir(vec![-1.0, 0.0]), &acts).unwrap();
        assert_eq!(flipped.layers[0].vector, vec![1.0, 0.0]);
        assert!(flipped.sign_calibrated);
        let kept = calibrate_sign(&single_layer_dir(vec![1.0, 0.0]), &acts).unwrap();
        assert_eq!(kept.layers[0].vector, vec![1.0, 0.0]);
    }

    #[test]
    fn calibration_with_mixed_projections() {
        // Projections 1.0, -0.4, 0.3 onto e₁: mean +0.3.
        let acts = acts_from(&[
            ("a", 1, 0, vec![1.0, 5.0], vec![0.0, 0.0]),
            ("b", 1, 0, vec![-0.4, -2.0], vec![0.0, 0.0]),
            ("c", 1, 0, vec![0.3, 1.0], vec![0.0, 0.0]),
        ]);
        let ds = build_difference_set(&acts).unwrap();
        let mean: f64 = ds.layer(0).unwrap().iter().map(|d| d.vector[0]).sum::<f64>() / 3.0;
        assert!((mean - 0.3).abs() < 1e-15);
        let out = calibrate_sign(&single_layer_dir(vec![1.0, 0.0]), &acts).unwrap();
        assert_eq!(out.layers[0].vector, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_mean_projection_is_undecidable() {
        let acts = acts_from(&[
            ("a", 1, 0, vec![1.0, 0.0], vec![0.0, 0.0]),
            ("b", 1, 0, vec![-1.0, 0.0], vec![0.0, 0.0]),
        ]);
        assert!(matches!(
            calibrate_sign(&single_layer_dir(vec![1.0, 0.0]), &acts).unwrap_err(),
            Error::UndecidableOrientation { layer: 0 }
        ));
    }

    #[test]
    fn rad_round_trip_keeps_unit_norm() {
        let v: Vec<f64> = (0..16).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let n = norm(&v);
        let mut dir = single_layer_dir(v.iter().map(|x| x / n).collect());
        dir.sign_calibrated = true;
        let (_, acts, side) = directions_to_rad(&dir, "test").unwrap();
        let back = directions_from_rad(&acts, &side).unwrap();
        assert!((norm(&back.layers[0].vector) - 1.0).abs() < 1e-12);
        assert!(back.sign_calibrated);
        assert!(dot(&back.layers[0].vector, &dir.layers[0].vector) > 1.0 - 1e-12);
    }
}
