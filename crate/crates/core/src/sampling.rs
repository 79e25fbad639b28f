//! Mini-batch construction and negative mining.
//!
//! Batches are P speakers x K segments. For each ordered anchor-positive
//! pair a negative is attached by one of three strategies: uniform random,
//! semi-hard (negatives inside the margin window around the positive
//! distance), or distance-weighted (probability proportional to inverse
//! anchor distance). Quadruplets additionally draw a second negative from a
//! third class using its distances to the first negative.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::losses::LossKind;

/// Default clamp for inverse-distance weights.
pub const DEFAULT_DW_MIN_DIST: f64 = 0.1;

/// Negative sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Uniform over all other-class items.
    Random,
    /// Uniform over the semi-hard window, with fallbacks.
    SemiHard,
    /// Probability proportional to inverse anchor distance.
    DistanceWeighted {
        /// Lower clamp on distances before inversion.
        #[serde(default = "default_d_min")]
        d_min: f64,
        /// Compatibility mode: weight by the inverse hypersphere density
        /// `q(d) = d^(e-2) (1 - d^2/4)^((e-3)/2)` instead of plain inverse
        /// distance. Off by default.
        #[serde(default)]
        density_correction: bool,
    },
}

fn default_d_min() -> f64 {
    DEFAULT_DW_MIN_DIST
}

impl SamplingStrategy {
    pub fn distance_weighted() -> Self {
        SamplingStrategy::DistanceWeighted {
            d_min: DEFAULT_DW_MIN_DIST,
            density_correction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplingStrategy::DistanceWeighted { d_min, .. } = self {
            if *d_min <= 0.0 {
                return Err(Error::Argument("d_min must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            SamplingStrategy::Random => "Random",
            SamplingStrategy::SemiHard => "Semi-hard",
            SamplingStrategy::DistanceWeighted { .. } => "DWS",
        }
    }
}

/// One batch item: a segment handle plus its speaker label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    /// Index into the corpus' flattened segment list.
    pub segment: usize,
    pub speaker: String,
}

/// A P-speakers-by-K-segments mini-batch. Embeddings are attached once the
/// current model has been run over the items.
#[derive(Debug, Clone)]
pub struct PkBatch {
    speakers: usize,
    per_speaker: usize,
    items: Vec<BatchItem>,
    embeddings: Vec<Embedding>,
}

impl PkBatch {
    /// Builds a batch from items (and optionally embeddings), validating the
    /// P x K structure.
    pub fn new(
        speakers: usize,
        per_speaker: usize,
        items: Vec<BatchItem>,
        embeddings: Vec<Embedding>,
    ) -> Result<Self> {
        if speakers < 2 {
            return Err(Error::Argument("a batch needs at least 2 speakers".into()));
        }
        if items.len() != speakers * per_speaker {
            return Err(Error::Validation(format!(
                "batch needs {} items for {}x{}, got {}",
                speakers * per_speaker,
                speakers,
                per_speaker,
                items.len()
            )));
        }
        let mut counts = std::collections::BTreeMap::new();
        for item in &items {
            *counts.entry(item.speaker.as_str()).or_insert(0usize) += 1;
        }
        if counts.len() != speakers || counts.values().any(|&c| c != per_speaker) {
            return Err(Error::Validation(format!(
                "batch must hold exactly {per_speaker} items for each of {speakers} speakers"
            )));
        }
        let mut batch = PkBatch {
            speakers,
            per_speaker,
            items,
            embeddings: Vec::new(),
        };
        if !embeddings.is_empty() {
            batch.set_embeddings(embeddings)?;
        }
        Ok(batch)
    }

    /// Attaches per-item embeddings (one unit vector per item, same order).
    pub fn set_embeddings(&mut self, embeddings: Vec<Embedding>) -> Result<()> {
        if embeddings.len() != self.items.len() {
            return Err(Error::Validation(format!(
                "{} embeddings for {} items",
                embeddings.len(),
                self.items.len()
            )));
        }
        self.embeddings = embeddings;
        Ok(())
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn per_speaker(&self) -> usize {
        self.per_speaker
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.items[idx].speaker
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    fn embedding(&self, idx: usize) -> Result<&Embedding> {
        self.embeddings.get(idx).ok_or_else(|| {
            Error::Validation("batch has no embeddings attached yet".into())
        })
    }

    fn sq_dist(&self, i: usize, j: usize) -> Result<f64> {
        Ok(crate::losses::sq_dist(
            self.embedding(i)?,
            self.embedding(j)?,
        ))
    }

    /// Indices whose label differs from every label in `excluded`.
    fn candidates_excluding(&self, excluded: &[&str]) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| !excluded.contains(&self.label(i)))
            .collect()
    }
}

/// Samples P speakers then K labeled segments per speaker, both uniformly
/// without replacement. Embeddings are left unattached.
pub fn make_pk_batch(
    corpus: &Corpus,
    speakers: usize,
    per_speaker: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PkBatch> {
    if speakers < 2 || per_speaker == 0 {
        return Err(Error::Argument(
            "batch needs speakers >= 2 and per_speaker >= 1".into(),
        ));
    }
    // speaker -> flattened segment indices, deterministic order
    let flat = corpus.flat_segments();
    let mut by_speaker: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, seg) in flat.iter().enumerate() {
        if let Some(label) = &seg.speaker {
            by_speaker.entry(label.as_str()).or_default().push(i);
        }
    }
    let eligible: Vec<(&str, &Vec<usize>)> = by_speaker
        .iter()
        .filter(|(_, segs)| segs.len() >= per_speaker)
        .map(|(s, v)| (*s, v))
        .collect();
    if eligible.len() < speakers {
        return Err(Error::Capacity(format!(
            "need {speakers} speakers with >= {per_speaker} labeled segments, corpus has {}",
            eligible.len()
        )));
    }

    let chosen = rand::seq::index::sample(rng, eligible.len(), speakers);
    let mut items = Vec::with_capacity(speakers * per_speaker);
    for spk_idx in chosen.iter() {
        let (label, segs) = eligible[spk_idx];
        let picks = rand::seq::index::sample(rng, segs.len(), per_speaker);
        for p in picks.iter() {
            items.push(BatchItem {
                segment: segs[p],
                speaker: label.to_string(),
            });
        }
    }
    PkBatch::new(speakers, per_speaker, items, Vec::new())
}

/// Uniform negative: any item whose label differs from the anchor's.
pub fn random_negative(batch: &PkBatch, anchor: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let candidates = batch.candidates_excluding(&[batch.label(anchor)]);
    pick_uniform(&candidates, rng)
}

fn pick_uniform(candidates: &[usize], rng: &mut ChaCha8Rng) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Capacity("no other-class items in batch".into()));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// Semi-hard negative: uniform over candidates whose squared distance to the
/// anchor lies in the closed window `[d_ap^2, d_ap^2 + alpha]`. If the window
/// is empty, falls back to the easiest negative beyond the margin (smallest
/// squared distance above `d_ap^2 + alpha`); if that set is empty too, falls
/// back to a uniform random negative.
pub fn semi_hard_negative(
    batch: &PkBatch,
    anchor: usize,
    positive: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if batch.label(anchor) != batch.label(positive) {
        return Err(Error::Argument(
            "anchor and positive must share a label".into(),
        ));
    }
    let d_ap_sq = batch.sq_dist(anchor, positive)?;
    let candidates = batch.candidates_excluding(&[batch.label(anchor)]);
    semi_hard_pick(batch, anchor, d_ap_sq, &candidates, alpha, rng)
}

fn semi_hard_pick(
    batch: &PkBatch,
    origin: usize,
    d_ap_sq: f64,
    candidates: &[usize],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Capacity("no eligible negatives in batch".into()));
    }
    let mut window = Vec::new();
    let mut beyond: Option<(usize, f64)> = None;
    for &j in candidates {
        let d = batch.sq_dist(origin, j)?;
        if d >= d_ap_sq && d <= d_ap_sq + alpha {
            window.push(j);
        } else if d > d_ap_sq + alpha {
            match beyond {
                Some((_, best)) if best <= d => {}
                _ => beyond = Some((j, d)),
            }
        }
    }
    if !window.is_empty() {
        return Ok(window[rng.gen_range(0..window.len())]);
    }
    if let Some((j, _)) = beyond {
        return Ok(j);
    }
    pick_uniform(candidates, rng)
}

/// Normalized inverse-distance selection probabilities:
/// `p_j = w_j / sum(w)`, `w_j = 1 / max(d_j, d_min)` for raw distances.
pub fn dw_probs(anchor_negative_dists: &[f64], d_min: f64) -> Result<Vec<f64>> {
    if anchor_negative_dists.is_empty() {
        return Err(Error::Argument("distance list is empty".into()));
    }
    if d_min <= 0.0 {
        return Err(Error::Argument("d_min must be > 0".into()));
    }
    let weights: Vec<f64> = anchor_negative_dists
        .iter()
        .map(|&d| 1.0 / d.max(d_min))
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Inverse hypersphere-density weights: `p_j` proportional to `1 / q(d_j)`
/// with `q(d) = d^(e-2) (1 - d^2/4)^((e-3)/2)`, the pairwise distance
/// density on the unit (e-1)-sphere. Distances are clamped into
/// `[d_min, 2 - d_min]` before evaluation.
pub fn dw_density_probs(
    anchor_negative_dists: &[f64],
    embed_dim: usize,
    d_min: f64,
) -> Result<Vec<f64>> {
    if anchor_negative_dists.is_empty() {
        return Err(Error::Argument("distance list is empty".into()));
    }
    if d_min <= 0.0 || d_min >= 1.0 {
        return Err(Error::Argument("d_min must be in (0, 1)".into()));
    }
    let e = embed_dim as f64;
    let weights: Vec<f64> = anchor_negative_dists
        .iter()
        .map(|&d| {
            let d = d.clamp(d_min, 2.0 - d_min);
            let q = d.powf(e - 2.0) * (1.0 - d * d / 4.0).powf((e - 3.0) / 2.0);
            1.0 / q
        })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws an index from `candidates` with the given probabilities.
fn pick_weighted(candidates: &[usize], probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (&c, &p) in candidates.iter().zip(probs) {
        acc += p;
        if u < acc {
            return c;
        }
    }
    *candidates.last().unwrap()
}

/// Distance-weighted negative for an anchor.
pub fn dw_negative(
    batch: &PkBatch,
    anchor: usize,
    d_min: f64,
    density_correction: bool,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let candidates = batch.candidates_excluding(&[batch.label(anchor)]);
    dw_pick(batch, anchor, &candidates, d_min, density_correction, rng)
}

fn dw_pick(
    batch: &PkBatch,
    origin: usize,
    candidates: &[usize],
    d_min: f64,
    density_correction: bool,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Capacity("no eligible negatives in batch".into()));
    }
    let mut dists = Vec::with_capacity(candidates.len());
    for &j in candidates {
        dists.push(batch.sq_dist(origin, j)?.sqrt());
    }
    let probs = if density_correction {
        let dim = batch.embedding(origin)?.dim();
        dw_density_probs(&dists, dim, d_min)?
    } else {
        dw_probs(&dists, d_min)?
    };
    Ok(pick_weighted(candidates, &probs, rng))
}

/// One training tuple of batch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tuple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Third-class negative, present for quadruplets.
    pub second_negative: Option<usize>,
}

/// The tuples mined from one batch.
#[derive(Debug, Clone, Default)]
pub struct TupleSet {
    pub tuples: Vec<Tuple>,
}

impl TupleSet {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Builds one tuple per ordered anchor-positive pair within each speaker.
///
/// The negative is attached by `strategy`; for quadruplets a second negative
/// is drawn by the same strategy from classes distinct from both the anchor's
/// and the negative's, using its distances to the negative. `alpha1` bounds
/// the semi-hard window for the negative and `alpha2` the window for the
/// second negative; both are ignored by the other strategies.
pub fn build_tuples(
    batch: &PkBatch,
    loss_kind: LossKind,
    strategy: &SamplingStrategy,
    alpha1: f64,
    alpha2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TupleSet> {
    strategy.validate()?;
    if loss_kind == LossKind::Quadruplet && batch.speakers() < 3 {
        return Err(Error::Capacity(
            "quadruplets need at least 3 speakers in the batch".into(),
        ));
    }
    let n = batch.len();
    let mut tuples = Vec::new();
    for anchor in 0..n {
        for positive in 0..n {
            if anchor == positive || batch.label(anchor) != batch.label(positive) {
                continue;
            }
            let negative = match strategy {
                SamplingStrategy::Random => random_negative(batch, anchor, rng)?,
                SamplingStrategy::SemiHard => {
                    semi_hard_negative(batch, anchor, positive, alpha1, rng)?
                }
                SamplingStrategy::DistanceWeighted {
                    d_min,
                    density_correction,
                } => dw_negative(batch, anchor, *d_min, *density_correction, rng)?,
            };
            let second_negative = match loss_kind {
                LossKind::Triplet => None,
                LossKind::Quadruplet => {
                    let excluded = [batch.label(anchor), batch.label(negative)];
                    let candidates = batch.candidates_excluding(&excluded);
                    let pick = match strategy {
                        SamplingStrategy::Random => pick_uniform(&candidates, rng)?,
                        SamplingStrategy::SemiHard => {
                            let d_ap_sq = batch.sq_dist(anchor, positive)?;
                            semi_hard_pick(batch, negative, d_ap_sq, &candidates, alpha2, rng)?
                        }
                        SamplingStrategy::DistanceWeighted {
                            d_min,
                            density_correction,
                        } => dw_pick(
                            batch,
                            negative,
                            &candidates,
                            *d_min,
                            *density_correction,
                            rng,
                        )?,
                    };
                    Some(pick)
                }
            };
            tuples.push(Tuple {
                anchor,
                positive,
                negative,
                second_negative,
            });
        }
    }
    Ok(TupleSet { tuples })
}
