//! Seeded synthetic corpora with controllable speaker separation, plus
//! conversation concatenation for raising the speaker count per conversation.
//!
//! Each speaker gets an archetype mean in feature space; segments are the
//! mean plus unit-variance Gaussian noise, optionally colored along the time
//! axis so attention models have temporal structure to exploit. Speakers are
//! grouped into fixed-size conversations with consecutive 2-second slots.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Corpus, FeatureMatrix, SegmentRecord};

/// Slot length assigned to each synthetic segment, in seconds.
pub const SLOT_SECONDS: f64 = 2.0;

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub segments_per_speaker: usize,
    pub frames_per_segment: usize,
    pub dim: usize,
    /// Distance between speaker archetype means, in units of the
    /// within-speaker noise sigma (= 1).
    pub separation: f64,
    pub seed: u64,
    /// How many speakers share one conversation.
    #[serde(default = "default_speakers_per_conversation")]
    pub speakers_per_conversation: usize,
    /// Color the within-speaker noise along the time axis with a fixed
    /// per-speaker lower-triangular map. Disable for plain white noise.
    #[serde(default = "default_true")]
    pub temporal_coloring: bool,
}

fn default_speakers_per_conversation() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_speakers: 8,
            segments_per_speaker: 20,
            frames_per_segment: 50,
            dim: 12,
            separation: 6.0,
            seed: 0,
            speakers_per_conversation: default_speakers_per_conversation(),
            temporal_coloring: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0
            || self.segments_per_speaker == 0
            || self.frames_per_segment == 0
            || self.dim == 0
            || self.speakers_per_conversation == 0
        {
            return Err(Error::Argument("all synth counts must be >= 1".into()));
        }
        if self.separation < 0.0 {
            return Err(Error::Argument("separation must be >= 0".into()));
        }
        Ok(())
    }
}

/// Archetype means with pairwise distance `separation`: random directions,
/// orthonormalized while dimensions allow, scaled by `separation / sqrt(2)`.
fn speaker_means(rng: &mut ChaCha8Rng, n: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while dirs.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dirs.len() < dim {
            // Gram-Schmidt against accepted directions
            for u in &dirs {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        dirs.push(v);
    }
    let scale = separation / 2f64.sqrt();
    dirs.iter_mut()
        .for_each(|v| v.iter_mut().for_each(|x| *x *= scale));
    dirs
}

/// Per-speaker temporal coloring: random lower-triangular map with unit-norm
/// rows, so the marginal variance of each colored frame stays 1.
fn coloring_map(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut row: Vec<f64> = (0..=t).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
        rows.push(row);
    }
    rows
}

/// Generates a labeled corpus: speakers in fixed-size conversations taking
/// round-robin turns over consecutive 2-second slots. Deterministic per seed.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = speaker_means(&mut rng, spec.n_speakers, spec.dim, spec.separation);

    // per-speaker segment pools, drawn in speaker order
    let mut pools: Vec<Vec<FeatureMatrix>> = Vec::with_capacity(spec.n_speakers);
    for mean in &means {
        let color = if spec.temporal_coloring {
            Some(coloring_map(&mut rng, spec.frames_per_segment))
        } else {
            None
        };
        let mut segments = Vec::with_capacity(spec.segments_per_speaker);
        for _ in 0..spec.segments_per_speaker {
            let noise: Vec<Vec<f64>> = (0..spec.frames_per_segment)
                .map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let mut data = Vec::with_capacity(spec.frames_per_segment * spec.dim);
            for t in 0..spec.frames_per_segment {
                for c in 0..spec.dim {
                    let raw = match &color {
                        Some(map) => map[t]
                            .iter()
                            .enumerate()
                            .map(|(s, w)| w * noise[s][c])
                            .sum::<f64>(),
                        None => noise[t][c],
                    };
                    data.push((mean[c] + raw) as f32);
                }
            }
            segments.push(FeatureMatrix::new(spec.frames_per_segment, spec.dim, data)?);
        }
        pools.push(segments);
    }

    let mut corpus = Corpus::new(spec.frames_per_segment, spec.dim);
    let conv_count = spec.n_speakers.div_ceil(spec.speakers_per_conversation);
    for conv_idx in 0..conv_count {
        let conv_id = format!("c{conv_idx:03}");
        let first = conv_idx * spec.speakers_per_conversation;
        let members: Vec<usize> =
            (first..(first + spec.speakers_per_conversation).min(spec.n_speakers)).collect();

        let mut segments = Vec::new();
        let mut slot = 0usize;
        let mut cursors = vec![0usize; members.len()];
        loop {
            let mut placed = false;
            for (mi, &spk) in members.iter().enumerate() {
                if cursors[mi] < spec.segments_per_speaker {
                    segments.push(SegmentRecord {
                        conversation_id: conv_id.clone(),
                        speaker: Some(format!("s{spk:03}")),
                        onset: slot as f64 * SLOT_SECONDS,
                        duration: SLOT_SECONDS,
                        features: pools[spk][cursors[mi]].clone(),
                    });
                    cursors[mi] += 1;
                    slot += 1;
                    placed = true;
                }
            }
            if !placed {
                break;
            }
        }
        let mut tags = std::collections::BTreeMap::new();
        tags.insert("speakers".to_string(), members.len().to_string());
        corpus.insert_conversation(&conv_id, segments, tags)?;
    }
    Ok(corpus)
}

/// Randomly partitions conversations into groups of `group_size` and
/// concatenates each group into one conversation with re-based onsets.
/// A remainder smaller than `group_size` forms its own final group, so the
/// total segment count is preserved. Speaker labels are prefixed with their
/// source conversation id whenever labels would otherwise collide across
/// group members.
pub fn concatenate_conversations(
    corpus: &Corpus,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Corpus> {
    if group_size == 0 {
        return Err(Error::Argument("group_size must be >= 1".into()));
    }
    let mut ids: Vec<&String> = corpus.conversations.keys().collect();
    if ids.len() < group_size {
        return Err(Error::Capacity(format!(
            "corpus has {} conversations, need at least {group_size}",
            ids.len()
        )));
    }
    ids.shuffle(rng);

    let mut out = Corpus::new(corpus.frames_per_segment, corpus.dim);
    for group in ids.chunks(group_size) {
        if group.len() == 1 {
            // singleton groups pass through unchanged
            let id = group[0];
            out.insert_conversation(
                id,
                corpus.conversations[id].clone(),
                corpus.tags.get(id).cloned().unwrap_or_default(),
            )?;
            continue;
        }

        // prefix labels only when sources reuse the same label text
        let mut seen = std::collections::BTreeSet::new();
        let mut collision = false;
        for id in group {
            for seg in &corpus.conversations[*id] {
                if let Some(spk) = &seg.speaker {
                    if !seen.insert(spk.clone()) {
                        collision = true;
                    }
                }
            }
        }

        let new_id = group
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join("+");
        let mut segments = Vec::new();
        let mut offset = 0.0;
        let mut labels = std::collections::BTreeSet::new();
        for id in group {
            let source = &corpus.conversations[*id];
            let mut end = 0.0f64;
            for seg in source {
                let speaker = seg.speaker.as_ref().map(|spk| {
                    if collision {
                        format!("{id}:{spk}")
                    } else {
                        spk.clone()
                    }
                });
                if let Some(s) = &speaker {
                    labels.insert(s.clone());
                }
                segments.push(SegmentRecord {
                    conversation_id: new_id.clone(),
                    speaker,
                    onset: seg.onset + offset,
                    duration: seg.duration,
                    features: seg.features.clone(),
                });
                end = end.max(seg.onset + seg.duration);
            }
            offset += end;
        }
        let mut tags = std::collections::BTreeMap::new();
        tags.insert("speakers".to_string(), labels.len().to_string());
        out.insert_conversation(&new_id, segments, tags)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_speakers: 4,
            segments_per_speaker: 3,
            frames_per_segment: 5,
            dim: 4,
            separation: 6.0,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a.conversations.len(), b.conversations.len());
        for (id, segs) in &a.conversations {
            let other = &b.conversations[id];
            for (x, y) in segs.iter().zip(other) {
                assert_eq!(x.features.data(), y.features.data());
                assert_eq!(x.speaker, y.speaker);
                assert_eq!(x.onset, y.onset);
            }
        }
    }

    #[test]
    fn conversations_hold_two_speakers_in_two_second_slots() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        assert_eq!(corpus.conversations.len(), 2);
        assert_eq!(corpus.segment_count(), 12);
        let segs = &corpus.conversations["c000"];
        assert_eq!(segs[0].onset, 0.0);
        assert_eq!(segs[1].onset, 2.0);
        assert_eq!(segs[0].duration, 2.0);
        let speakers: std::collections::BTreeSet<_> =
            segs.iter().filter_map(|s| s.speaker.clone()).collect();
        assert_eq!(speakers.len(), 2);
        assert_eq!(corpus.tag("c000", "speakers"), Some("2"));
    }

    #[test]
    fn zero_separation_collapses_archetypes() {
        let mut spec = small_spec();
        spec.separation = 0.0;
        spec.temporal_coloring = false;
        let corpus = generate_corpus(&spec).unwrap();
        // with no separation the per-speaker means coincide at the origin;
        // check segment means are all noise-scale
        for seg in corpus.flat_segments() {
            let mean: f64 = seg.features.data().iter().map(|&v| v as f64).sum::<f64>()
                / seg.features.data().len() as f64;
            assert!(mean.abs() < 1.0);
        }
    }

    #[test]
    fn separation_places_speaker_means_apart() {
        let spec = SynthSpec {
            n_speakers: 3,
            dim: 8,
            separation: 10.0,
            temporal_coloring: false,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        // mean feature per speaker should sit near its archetype: pairwise
        // distances close to `separation`
        let mut per_speaker: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
        for seg in corpus.flat_segments() {
            let label = seg.speaker.clone().unwrap();
            let entry = per_speaker.entry(label.clone()).or_insert(vec![0.0; 8]);
            for t in 0..seg.features.frames() {
                for (e, &v) in entry.iter_mut().zip(seg.features.frame(t)) {
                    *e += v as f64;
                }
            }
            *counts.entry(label).or_insert(0) += seg.features.frames();
        }
        let means: Vec<Vec<f64>> = per_speaker
            .iter()
            .map(|(label, sum)| sum.iter().map(|v| v / counts[label] as f64).collect())
            .collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 10.0).abs() < 1.5, "pairwise mean distance {d}");
            }
        }
    }

    #[test]
    fn concatenation_merges_two_conversations_into_four_speakers() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let merged = concatenate_conversations(&corpus, 2, &mut rng).unwrap();
        assert_eq!(merged.conversations.len(), 1);
        let segs = merged.conversations.values().next().unwrap();
        let speakers: std::collections::BTreeSet<_> =
            segs.iter().filter_map(|s| s.speaker.clone()).collect();
        assert_eq!(speakers.len(), 4);
        assert_eq!(merged.segment_count(), corpus.segment_count());
    }

    #[test]
    fn group_size_one_is_identity() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = concatenate_conversations(&corpus, 1, &mut rng).unwrap();
        assert_eq!(
            out.conversations.keys().collect::<Vec<_>>(),
            corpus.conversations.keys().collect::<Vec<_>>()
        );
        for (id, segs) in &corpus.conversations {
            let other = &out.conversations[id];
            for (a, b) in segs.iter().zip(other) {
                assert_eq!(a.speaker, b.speaker);
                assert_eq!(a.onset, b.onset);
            }
        }
    }

    #[test]
    fn six_conversations_grouped_by_three() {
        let spec = SynthSpec {
            n_speakers: 12,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.conversations.len(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let merged = concatenate_conversations(&corpus, 3, &mut rng).unwrap();
        assert_eq!(merged.conversations.len(), 2);
        for (id, segs) in &merged.conversations {
            let speakers: std::collections::BTreeSet<_> =
                segs.iter().filter_map(|s| s.speaker.clone()).collect();
            assert_eq!(speakers.len(), 6, "conversation {id}");
            assert_eq!(merged.tag(id, "speakers"), Some("6"));
        }
    }

    #[test]
    fn colliding_labels_get_namespaced() {
        // two conversations that both use label "x"
        let mut corpus = Corpus::new(2, 2);
        for id in ["left", "right"] {
            let segs = vec![SegmentRecord {
                conversation_id: id.into(),
                speaker: Some("x".into()),
                onset: 0.0,
                duration: 1.0,
                features: FeatureMatrix::new(2, 2, vec![0.0; 4]).unwrap(),
            }];
            corpus
                .insert_conversation(id, segs, Default::default())
                .unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let merged = concatenate_conversations(&corpus, 2, &mut rng).unwrap();
        let segs = merged.conversations.values().next().unwrap();
        let speakers: std::collections::BTreeSet<_> =
            segs.iter().filter_map(|s| s.speaker.clone()).collect();
        assert_eq!(speakers.len(), 2);
        assert!(speakers.iter().all(|s| s.contains(':')));
    }

    #[test]
    fn too_few_conversations_is_capacity_error() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            concatenate_conversations(&corpus, 5, &mut rng),
            Err(Error::Capacity(_))
        ));
    }
}
