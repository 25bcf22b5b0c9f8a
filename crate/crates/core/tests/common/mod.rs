// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random RAD payloads shared by the property and acceptance suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use repscope::actstore::{ActivationSet, AttentionDump, Dtype, MaskKind, Polarity, RadManifest};
use repscope::linalg::DenseMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

#[derive(Debug, Clone)]
pub struct Payload {
    pub dtype: Dtype,
    pub d: usize,
    pub layers: usize,
    pub prompts: usize,
    pub ks: u32,
    pub heads: usize,
    pub n: usize,
    pub seed: u64,
}

pub fn build_payload(p: &Payload) -> (RadManifest, ActivationSet, AttentionDump) {
    let mut r = rng(p.seed);
    let mut acts = ActivationSet::new();
    let mut attn = AttentionDump::new(if r.gen() { MaskKind::Causal } else { MaskKind::Full });
    for i in 0..p.prompts {
        let id = format!("prompt-{i}");
        let polarity = match i % 3 {
            0 => Some(Polarity::Positive),
            1 => Some(Polarity::Negative),
            _ => None,
        };
        acts.set_prompt(id.clone(), polarity, polarity.map(|_| format!("pair-{}", i / 3)));
        for k in 1..=p.ks {
            for l in 0..p.layers {
                let v = (0..p.d).map(|_| { let z: f64 = StandardNormal.sample(&mut r); 4.0 * z }).collect();
                acts.insert(id.clone(), k, l, v).unwrap();
            }
            acts.set_token_text(id.clone(), k, format!("t\"ok{k}"));
        }
        for l in 0..p.layers {
            for h in 0..p.heads {
                attn.insert_matrix(id.clone(), l, h, gaussian_matrix(p.n, p.n, r.gen())).unwrap();
            }
            if p.heads > 0 {
                attn.insert_output(id.clone(), l, gaussian_matrix(p.n, p.d, r.gen())).unwrap();
            }
        }
    }
    let mut manifest = RadManifest::new("model/x", p.d, p.layers, p.heads, p.dtype);
    manifest.extra.insert("hook_points".into(), serde_json::json!({"hidden": "resid_post"}));
    (manifest, acts, attn)
}

