//! Prompt construction and the label-derived HOI embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensorcore::Tensor;
use crate::{Error, Result};

const NO_INTERACTION: &str = "no_interaction";

/// Present participles that the suffix rule gets wrong.
const IRREGULAR: &[(&str, &str)] = &[
    ("be", "being"),
    ("see", "seeing"),
    ("flee", "fleeing"),
    ("lie", "lying"),
    ("tie", "tying"),
    ("die", "dying"),
    ("ride", "riding"),
    ("make", "making"),
    ("sit", "sitting"),
    ("hit", "hitting"),
    ("cut", "cutting"),
    ("run", "running"),
    ("swim", "swimming"),
    ("stop", "stopping"),
    ("get", "getting"),
    ("set", "setting"),
    ("put", "putting"),
    ("dig", "digging"),
    ("drag", "dragging"),
    ("hug", "hugging"),
    ("jog", "jogging"),
    ("pet", "petting"),
    ("flip", "flipping"),
    ("grab", "grabbing"),
    ("stab", "stabbing"),
    ("zip", "zipping"),
    ("hop", "hopping"),
    ("wag", "wagging"),
];

fn check_token(t: &str) -> Result<()> {
    let ok = !t.is_empty()
        && !t.starts_with('_')
        && !t.ends_with('_')
        && !t.contains("__")
        && t.chars().all(|c| c.is_ascii_lowercase() || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::Token(t.to_string()))
    }
}

/// `"ride" → "riding"`, `"play" → "playing"`.
pub fn gerund(verb: &str) -> String {
    if let Some((_, g)) = IRREGULAR.iter().find(|(v, _)| *v == verb) {
        return g.to_string();
    }
    match verb.strip_suffix('e') {
        Some(stem) if !stem.ends_with('e') && !stem.is_empty() => format!("{stem}ing"),
        _ => format!("{verb}ing"),
    }
}

/// `"a person is {verb}ing {object}"`; underscores become spaces and only
/// the first word of a multiword verb is inflected (`sit_on → sitting on`).
pub fn build_prompt(verb: &str, object: &str) -> Result<String> {
    check_token(verb)?;
    check_token(object)?;
    let object = object.replace('_', " ");
    if verb == NO_INTERACTION {
        return Ok(format!("a person and {object}"));
    }
    let mut words = verb.split('_');
    let head = gerund(words.next().expect("non-empty token"));
    let rest: Vec<&str> = words.collect();
    let verb = if rest.is_empty() { head } else { format!("{head} {}", rest.join(" ")) };
    Ok(format!("a person is {verb} {object}"))
}

pub fn build_prompts(labels: &[(String, String)]) -> Result<Vec<String>> {
    labels.iter().map(|(v, o)| build_prompt(v, o)).collect()
}

/// FNV-1a, 64-bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag of character trigrams of `" {prompt} "`, each hashed (with the seed)
/// to a seeded Gaussian direction; the sum is unit-normalized.
pub fn embed_prompt(prompt: &str, dim: usize, seed: u64) -> Vec<f32> {
    let padded: Vec<u8> = format!(" {prompt} ").into_bytes();
    let mut acc = vec![0.0f64; dim];
    for tri in padded.windows(3) {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tri) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    acc.iter().map(|v| (v / norm) as f32).collect()
}

/// `[N, D]` matrix of unit rows, one per `(verb, object)` label.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiEmbedding {
    pub matrix: Tensor<f32>,
    pub labels: Vec<(String, String)>,
}

impl HoiEmbedding {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Rows `rows` only, in the given order.
    pub fn subset(&self, rows: &[usize]) -> HoiEmbedding {
        let d = self.dim();
        let data = rows.iter().flat_map(|&r| self.matrix.row(r).to_vec()).collect();
        HoiEmbedding {
            matrix: Tensor::new([rows.len(), d], data).expect("subset shape"),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
        }
    }
}

/// Embeds already-built prompts.
pub fn embed_prompts(prompts: &[String], dim: usize, seed: u64) -> Result<Tensor<f32>> {
    if prompts.is_empty() {
        return Err(Error::Config("no prompts to embed".into()));
    }
    let data = prompts.iter().flat_map(|p| embed_prompt(p, dim, seed)).collect();
    Ok(Tensor::new([prompts.len(), dim], data)?)
}

/// Builds prompts for `labels` and embeds them.
pub fn embed_labels(labels: &[(String, String)], dim: usize, seed: u64) -> Result<HoiEmbedding> {
    let prompts = build_prompts(labels)?;
    Ok(HoiEmbedding { matrix: embed_prompts(&prompts, dim, seed)?, labels: labels.to_vec() })
}
