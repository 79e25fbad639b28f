//! End-to-end glue: embed every segment of a corpus, cluster each
//! conversation into speakers, emit hypothesis annotations, and score them
//! against the reference labels.

use crate::clustering::{self, xmeans};
use crate::der::{compute_der, Annotation, DerBreakdown, Turn};
use crate::embedder::{forward, EmbedderModel, Embedding};
use crate::error::{Error, Result};
use crate::features::{Corpus, SegmentRecord};

/// Diarization and scoring options shared by the pipeline entry points.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub collar: f64,
    pub skip_overlap: bool,
    pub k_min: usize,
    /// Cap on the estimated speaker count; `None` means `min(n, 10)`.
    pub k_max: Option<usize>,
    /// Seed for the clustering stage.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            collar: 0.25,
            skip_overlap: true,
            k_min: 2,
            k_max: None,
            seed: 0,
        }
    }
}

/// Embeds all segments of one conversation in order.
pub fn embed_segments(model: &EmbedderModel, segments: &[SegmentRecord]) -> Result<Vec<Embedding>> {
    segments.iter().map(|s| forward(model, &s.features)).collect()
}

/// Clusters one conversation's segments into speakers and emits one
/// hypothesis turn per segment, labeled `spk00`, `spk01`, ...
pub fn diarize_conversation(
    model: &EmbedderModel,
    conversation_id: &str,
    segments: &[SegmentRecord],
    opts: &EvalOptions,
) -> Result<Annotation> {
    if segments.len() < 2 {
        return Err(Error::Capacity(format!(
            "conversation {conversation_id} has {} segment(s); clustering needs at least 2",
            segments.len()
        )));
    }
    let embeddings = embed_segments(model, segments)?;
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.to_vec()).collect();
    let k_max = opts
        .k_max
        .unwrap_or_else(|| clustering::default_k_max(points.len()))
        .min(points.len())
        .max(opts.k_min);
    let result = xmeans(&points, opts.k_min, k_max, opts.seed)?;

    let turns = segments
        .iter()
        .zip(&result.labels)
        .map(|(seg, &label)| Turn::new(seg.onset, seg.duration, format!("spk{label:02}")))
        .collect();
    Annotation::new(conversation_id, turns)
}

/// Diarizes every conversation of a corpus.
pub fn diarize_corpus(
    model: &EmbedderModel,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<Vec<Annotation>> {
    corpus
        .conversations
        .iter()
        .map(|(id, segments)| diarize_conversation(model, id, segments, opts))
        .collect()
}

/// Ground-truth annotations from a labeled corpus.
pub fn reference_annotations(corpus: &Corpus) -> Result<Vec<Annotation>> {
    corpus
        .conversations
        .iter()
        .map(|(id, segments)| {
            let turns = segments
                .iter()
                .map(|seg| {
                    let speaker = seg.speaker.clone().ok_or_else(|| {
                        Error::Validation(format!(
                            "conversation {id} has an unlabeled segment; cannot build a reference"
                        ))
                    })?;
                    Ok(Turn::new(seg.onset, seg.duration, speaker))
                })
                .collect::<Result<Vec<_>>>()?;
            Annotation::new(id, turns)
        })
        .collect()
}

/// Scores hypothesis annotations against references file-by-file and
/// aggregates time-weighted.
pub fn score_annotations(
    references: &[Annotation],
    hypotheses: &[Annotation],
    collar: f64,
    skip_overlap: bool,
) -> Result<DerBreakdown> {
    let mut parts = Vec::new();
    for reference in references {
        let hypothesis = hypotheses
            .iter()
            .find(|h| h.file_id == reference.file_id)
            .ok_or_else(|| {
                Error::Evaluation(format!(
                    "no hypothesis for file {}",
                    reference.file_id
                ))
            })?;
        parts.push(compute_der(reference, hypothesis, collar, skip_overlap)?);
    }
    DerBreakdown::combine(parts.iter())
}

/// Diarizes an eval corpus with `model` and scores against its labels.
pub fn evaluate_model(
    model: &EmbedderModel,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<DerBreakdown> {
    let references = reference_annotations(corpus)?;
    let hypotheses = diarize_corpus(model, corpus, opts)?;
    score_annotations(&references, &hypotheses, opts.collar, opts.skip_overlap)
}

/// FNV-1a 64 over the little-endian bytes of the embeddings of the first
/// segment of each conversation. A stable self-consistency token for
/// checkpoint round-trips.
pub fn embedding_fingerprint(model: &EmbedderModel, corpus: &Corpus) -> Result<String> {
    let mut hash: u64 = 0xcbf29ce484222325;
    for segments in corpus.conversations.values() {
        if let Some(seg) = segments.first() {
            let z = forward(model, &seg.features)?;
            for v in z.iter() {
                for b in v.to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
    }
    Ok(format!("{hash:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{init_model, Arch, EmbedderConfig};
    use crate::synth::{generate_corpus, SynthSpec};

    fn spec(separation: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_speakers: 6,
            segments_per_speaker: 10,
            frames_per_segment: 6,
            dim: 8,
            separation,
            seed,
            ..Default::default()
        }
    }

    fn model(dim: usize, seed: u64) -> crate::embedder::EmbedderModel {
        init_model(&EmbedderConfig {
            arch: Arch::MeanpoolMlp,
            input_dim: dim,
            hidden: vec![12],
            embed_dim: 8,
            key_dim: 4,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn pooled_features_diarize_high_separation_corpus() {
        // at separation 10 the temporal mean of the raw features (an
        // untrained identity embedder) already clusters cleanly
        let mut perfect = 0;
        for seed in 0..20 {
            let corpus = generate_corpus(&SynthSpec {
                n_speakers: 3,
                speakers_per_conversation: 3,
                segments_per_speaker: 20,
                separation: 10.0,
                ..spec(10.0, seed)
            })
            .unwrap();
            let references = reference_annotations(&corpus).unwrap();
            let mut hypotheses = Vec::new();
            let mut all_k3 = true;
            for (id, segments) in &corpus.conversations {
                let points: Vec<Vec<f64>> = segments
                    .iter()
                    .map(|s| {
                        let mut mean = vec![0.0f64; s.features.dim()];
                        for t in 0..s.features.frames() {
                            for (m, &v) in mean.iter_mut().zip(s.features.frame(t)) {
                                *m += v as f64;
                            }
                        }
                        mean.iter_mut()
                            .for_each(|m| *m /= s.features.frames() as f64);
                        mean
                    })
                    .collect();
                let result =
                    crate::clustering::xmeans(&points, 2, points.len().min(10), seed).unwrap();
                all_k3 &= result.k == 3;
                let turns = segments
                    .iter()
                    .zip(&result.labels)
                    .map(|(s, &l)| Turn::new(s.onset, s.duration, format!("spk{l:02}")))
                    .collect();
                hypotheses.push(Annotation::new(id.clone(), turns).unwrap());
            }
            let breakdown = score_annotations(&references, &hypotheses, 0.0, true).unwrap();
            if all_k3 && breakdown.der == 0.0 {
                perfect += 1;
            }
        }
        assert!(perfect >= 18, "only {perfect}/20 seeds diarized cleanly");
    }

    #[test]
    fn zero_separation_scores_near_chance() {
        let corpus = generate_corpus(&spec(0.0, 3)).unwrap();
        let m = model(8, 0);
        let opts = EvalOptions {
            collar: 0.0,
            ..Default::default()
        };
        let breakdown = evaluate_model(&m, &corpus, &opts).unwrap();
        // with no signal, confusion should be substantial
        assert!(breakdown.der > 0.2, "der {}", breakdown.der);
    }

    #[test]
    fn reference_requires_labels() {
        let mut corpus = generate_corpus(&spec(5.0, 1)).unwrap();
        if let Some(segs) = corpus.conversations.values_mut().next() {
            segs[0].speaker = None;
        }
        assert!(matches!(
            reference_annotations(&corpus),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn single_segment_conversation_is_capacity_error() {
        let corpus = generate_corpus(&SynthSpec {
            n_speakers: 1,
            segments_per_speaker: 1,
            speakers_per_conversation: 1,
            ..spec(5.0, 1)
        })
        .unwrap();
        let m = model(8, 0);
        assert!(matches!(
            diarize_corpus(&m, &corpus, &EvalOptions::default()),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn fingerprint_is_deterministic_and_model_sensitive() {
        let corpus = generate_corpus(&spec(5.0, 2)).unwrap();
        let a = embedding_fingerprint(&model(8, 0), &corpus).unwrap();
        let b = embedding_fingerprint(&model(8, 0), &corpus).unwrap();
        let c = embedding_fingerprint(&model(8, 1), &corpus).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
