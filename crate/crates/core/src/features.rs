//! Feature ingestion: per-segment feature matrices, the FMAT binary codec,
//! sequence segmentation, and the JSON corpus manifest.
//!
//! A corpus is a set of conversations, each an ordered list of non-overlapping
//! segments with a fixed `frames_per_segment x dim` feature geometry.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every feature file.
pub const FMAT_MAGIC: &[u8; 4] = b"FMAT";
/// Current feature file version.
pub const FMAT_VERSION: u8 = 0x01;

/// Default frames per 2-second segment: 2000 ms of frames at a 10 ms hop
/// (25 ms window with 15 ms overlap).
pub const DEFAULT_FRAMES_PER_SEGMENT: usize = 200;
/// Default feature dimension.
pub const DEFAULT_DIM: usize = 60;

/// A `frames x dim` matrix of per-frame features for one segment,
/// row-major with frames in temporal order. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds a matrix, validating shape and finiteness.
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "feature matrix must have positive shape, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::Validation(format!(
                "feature matrix {frames}x{dim} expects {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(FeatureMatrix { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Reads a feature matrix from an FMAT file.
///
/// Layout: `"FMAT"` + version byte `0x01`, u32-LE frame count, u32-LE dim,
/// then `frames*dim` IEEE-754 f32 little-endian values, row-major.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmat(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode_fmat(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 13 {
        return Err(Error::Truncated(format!(
            "header needs 13 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != FMAT_MAGIC {
        return Err(Error::Format("bad magic, expected FMAT".into()));
    }
    if bytes[4] != FMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version 0x{:02x}",
            bytes[4]
        )));
    }
    let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
    let payload = &bytes[13..];
    if payload.len() != expected {
        return Err(Error::Truncated(format!(
            "declared {frames}x{dim} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(frames, dim, data)
}

/// Writes a feature matrix in the FMAT layout; readable by [`read_feature_file`].
pub fn write_feature_file(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(13 + m.data.len() * 4);
    buf.extend_from_slice(FMAT_MAGIC);
    buf.push(FMAT_VERSION);
    buf.extend_from_slice(&(m.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Encodes a matrix to FMAT bytes (used for embedded parameter blocks).
pub(crate) fn encode_fmat_bytes(frames: usize, dim: usize, values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(13 + values.len() * 4);
    buf.extend_from_slice(FMAT_MAGIC);
    buf.push(FMAT_VERSION);
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes one FMAT block from a reader (used for embedded parameter blocks).
pub(crate) fn read_fmat_block(r: &mut impl Read) -> Result<FeatureMatrix> {
    let mut header = [0u8; 13];
    r.read_exact(&mut header)
        .map_err(|e| Error::Truncated(format!("parameter block header: {e}")))?;
    if &header[0..4] != FMAT_MAGIC {
        return Err(Error::Format("bad magic in parameter block".into()));
    }
    if header[4] != FMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter block version 0x{:02x}",
            header[4]
        )));
    }
    let frames = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; frames * dim * 4];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Truncated(format!("parameter block payload: {e}")))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(frames, dim, data)
}

/// Splits a long sequence into `floor(frames / frames_per_segment)` consecutive
/// non-overlapping chunks; trailing remainder frames are dropped.
pub fn segment_sequence(
    full: &FeatureMatrix,
    frames_per_segment: usize,
) -> Result<Vec<FeatureMatrix>> {
    if frames_per_segment == 0 {
        return Err(Error::Argument("frames_per_segment must be >= 1".into()));
    }
    let count = full.frames / frames_per_segment;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * frames_per_segment * full.dim;
        let end = start + frames_per_segment * full.dim;
        out.push(FeatureMatrix::new(
            frames_per_segment,
            full.dim,
            full.data[start..end].to_vec(),
        )?);
    }
    Ok(out)
}

/// One labeled (or unlabeled) segment of a conversation.
#[derive(Debug, Clone)]
pub struct SegmentRecord {
    pub conversation_id: String,
    /// Speaker label; `None` for unlabeled evaluation data.
    pub speaker: Option<String>,
    /// Onset in seconds from the conversation start.
    pub onset: f64,
    /// Duration in seconds, > 0.
    pub duration: f64,
    pub features: FeatureMatrix,
}

/// A labeled segment corpus with a shared feature geometry.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub frames_per_segment: usize,
    pub dim: usize,
    /// conversation id -> segments ordered by onset, non-overlapping.
    pub conversations: BTreeMap<String, Vec<SegmentRecord>>,
    /// conversation id -> free-form metadata tags.
    pub tags: BTreeMap<String, BTreeMap<String, String>>,
}

impl Corpus {
    pub fn new(frames_per_segment: usize, dim: usize) -> Self {
        Corpus {
            frames_per_segment,
            dim,
            conversations: BTreeMap::new(),
            tags: BTreeMap::new(),
        }
    }

    /// Adds a conversation after validating geometry and segment ordering.
    pub fn insert_conversation(
        &mut self,
        id: &str,
        segments: Vec<SegmentRecord>,
        tags: BTreeMap<String, String>,
    ) -> Result<()> {
        validate_segments(id, &segments, self.frames_per_segment, self.dim)?;
        self.conversations.insert(id.to_string(), segments);
        if !tags.is_empty() {
            self.tags.insert(id.to_string(), tags);
        }
        Ok(())
    }

    pub fn tag(&self, conversation_id: &str, key: &str) -> Option<&str> {
        self.tags
            .get(conversation_id)?
            .get(key)
            .map(String::as_str)
    }

    /// Total segment count across all conversations.
    pub fn segment_count(&self) -> usize {
        self.conversations.values().map(Vec::len).sum()
    }

    /// Segments flattened in deterministic (conversation id, position) order.
    pub fn flat_segments(&self) -> Vec<&SegmentRecord> {
        self.conversations.values().flatten().collect()
    }

    /// True when every segment carries a speaker label.
    pub fn fully_labeled(&self) -> bool {
        self.conversations
            .values()
            .flatten()
            .all(|s| s.speaker.is_some())
    }
}

fn validate_segments(
    id: &str,
    segments: &[SegmentRecord],
    frames_per_segment: usize,
    dim: usize,
) -> Result<()> {
    let mut prev_end = f64::NEG_INFINITY;
    for (i, seg) in segments.iter().enumerate() {
        if seg.features.frames != frames_per_segment || seg.features.dim != dim {
            return Err(Error::Validation(format!(
                "conversation {id} segment {i}: geometry {}x{} does not match corpus {}x{}",
                seg.features.frames, seg.features.dim, frames_per_segment, dim
            )));
        }
        if seg.duration <= 0.0 || seg.onset < 0.0 {
            return Err(Error::Validation(format!(
                "conversation {id} segment {i}: onset {} / duration {} out of range",
                seg.onset, seg.duration
            )));
        }
        if seg.onset < prev_end - 1e-9 {
            return Err(Error::Validation(format!(
                "conversation {id} segment {i}: overlaps previous segment (onset {} < previous end {prev_end})",
                seg.onset
            )));
        }
        prev_end = seg.onset + seg.duration;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    frames_per_segment: usize,
    dim: usize,
    conversations: Vec<ManifestConversation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestConversation {
    id: String,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    segments: Vec<ManifestSegment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSegment {
    speaker: Option<String>,
    onset: f64,
    duration: f64,
    file: String,
}

/// Loads a corpus manifest. Feature file paths are resolved relative to the
/// manifest's directory. Segments are sorted by onset per conversation and
/// validated against the declared geometry.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut corpus = Corpus::new(doc.frames_per_segment, doc.dim);
    for conv in doc.conversations {
        let mut segments = Vec::with_capacity(conv.segments.len());
        for seg in conv.segments {
            let fpath = base.join(&seg.file);
            let features = read_feature_file(&fpath)?;
            segments.push(SegmentRecord {
                conversation_id: conv.id.clone(),
                speaker: seg.speaker,
                onset: seg.onset,
                duration: seg.duration,
                features,
            });
        }
        segments.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        corpus.insert_conversation(&conv.id, segments, conv.tags)?;
    }
    Ok(corpus)
}

/// Writes a corpus as `manifest.json` plus one FMAT file per segment under
/// `dir`. Returns the manifest path. Output is byte-identical across calls
/// with the same corpus.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut doc = ManifestDoc {
        frames_per_segment: corpus.frames_per_segment,
        dim: corpus.dim,
        conversations: Vec::new(),
    };
    for (id, segments) in &corpus.conversations {
        let mut out_segments = Vec::with_capacity(segments.len());
        for (i, seg) in segments.iter().enumerate() {
            let fname = format!("{id}_{i:04}.fmat");
            write_feature_file(&seg.features, dir.join(&fname))?;
            out_segments.push(ManifestSegment {
                speaker: seg.speaker.clone(),
                onset: seg.onset,
                duration: seg.duration,
                file: fname,
            });
        }
        doc.conversations.push(ManifestConversation {
            id: id.clone(),
            tags: corpus.tags.get(id).cloned().unwrap_or_default(),
            segments: out_segments,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&doc)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn fm(frames: usize, dim: usize, data: Vec<f32>) -> FeatureMatrix {
        FeatureMatrix::new(frames, dim, data).unwrap()
    }

    #[test]
    fn read_known_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmat");
        let m = fm(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_feature_file(&m, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.frames(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.frame(0), &[1.0, 2.0, 3.0]);
        assert_eq!(back.frame(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn smallest_file_is_header_plus_four_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.fmat");
        write_feature_file(&fm(1, 1, vec![0.0]), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 13 + 4);
    }

    #[test]
    fn roundtrip_seeded_200x60() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..200 * 60).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let m = fm(200, 60, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.fmat");
        write_feature_file(&m, &path).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), m);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fmat");
        fs::write(&path, b"NOPE\x01\x01\x00\x00\x00\x01\x00\x00\x00AAAA").unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.fmat");
        fs::write(&path, b"FMAT\x02\x01\x00\x00\x00\x01\x00\x00\x00AAAA").unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.fmat");
        // declares 2x3 but carries one float
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FMAT\x01");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn nan_payload_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.fmat");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FMAT\x01");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = fm(1, 1, vec![0.0]);
        let err = write_feature_file(&m, "/nonexistent-dir-xyz/out.fmat").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn segment_sequence_drops_remainder() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..500 * 60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = fm(500, 60, data);
        let segs = segment_sequence(&full, 200).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].frames(), 200);
        assert_eq!(segs[0].data(), &full.data()[..200 * 60]);
        assert_eq!(segs[1].data(), &full.data()[200 * 60..400 * 60]);
    }

    #[test]
    fn segment_sequence_below_one_segment_is_empty() {
        let full = fm(199, 3, vec![0.5; 199 * 3]);
        assert!(segment_sequence(&full, 200).unwrap().is_empty());
    }

    #[test]
    fn segment_sequence_zero_length_is_argument_error() {
        let full = fm(10, 2, vec![0.0; 20]);
        assert!(matches!(
            segment_sequence(&full, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn default_geometry_constants() {
        // 2000 ms of frames at a 10 ms hop
        assert_eq!(DEFAULT_FRAMES_PER_SEGMENT, 200);
        assert_eq!(DEFAULT_DIM, 60);
    }

    fn write_test_corpus(dir: &Path) -> std::path::PathBuf {
        let mut corpus = Corpus::new(4, 3);
        for conv in ["conv_a", "conv_b"] {
            let mut segs = Vec::new();
            for i in 0..3 {
                segs.push(SegmentRecord {
                    conversation_id: conv.to_string(),
                    speaker: Some(format!("s{i}")),
                    onset: i as f64 * 2.0,
                    duration: 2.0,
                    features: fm(4, 3, vec![i as f32; 12]),
                });
            }
            let mut tags = BTreeMap::new();
            if conv == "conv_a" {
                tags.insert("language".to_string(), "eng".to_string());
            }
            corpus.insert_conversation(conv, segs, tags).unwrap();
        }
        write_corpus(&corpus, dir).unwrap()
    }

    #[test]
    fn manifest_roundtrip_with_tags() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_test_corpus(dir.path());
        let corpus = parse_manifest(&manifest).unwrap();
        assert_eq!(corpus.conversations.len(), 2);
        assert_eq!(corpus.segment_count(), 6);
        assert_eq!(corpus.tag("conv_a", "language"), Some("eng"));
        assert_eq!(corpus.tag("conv_b", "language"), None);
    }

    #[test]
    fn manifest_geometry_mismatch_names_segment() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_test_corpus(dir.path());
        // overwrite one feature file with the wrong frame count
        write_feature_file(&fm(3, 3, vec![0.0; 9]), dir.path().join("conv_b_0001.fmat")).unwrap();
        let err = parse_manifest(&manifest).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("conv_b"), "message: {msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_overlap_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_test_corpus(dir.path());
        let text = fs::read_to_string(&manifest).unwrap();
        // shift one onset so segments 0 and 1 of conv_a overlap
        let text = text.replacen("\"onset\": 2.0", "\"onset\": 1.0", 1);
        fs::write(&manifest, text).unwrap();
        assert!(matches!(
            parse_manifest(&manifest),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn manifest_missing_feature_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_test_corpus(dir.path());
        fs::remove_file(dir.path().join("conv_a_0000.fmat")).unwrap();
        assert!(matches!(parse_manifest(&manifest), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn segment_count_is_floor_division(frames in 1usize..400, per in 1usize..50) {
            let full = fm(frames, 2, vec![1.0; frames * 2]);
            let segs = segment_sequence(&full, per).unwrap();
            prop_assert_eq!(segs.len(), frames / per);
        }

        #[test]
        fn segments_concatenate_to_prefix(frames in 1usize..200, per in 1usize..40) {
            let data: Vec<f32> = (0..frames * 3).map(|i| i as f32).collect();
            let full = fm(frames, 3, data);
            let segs = segment_sequence(&full, per).unwrap();
            let cat: Vec<f32> = segs.iter().flat_map(|s| s.data().to_vec()).collect();
            prop_assert_eq!(&cat[..], &full.data()[..(frames / per) * per * 3]);
        }

        #[test]
        fn fmat_roundtrip_is_bit_exact(
            frames in 1usize..12,
            dim in 1usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..frames * dim)
                .map(|_| rng.gen_range(-1e6f32..1e6f32))
                .collect();
            let m = fm(frames, dim, data);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.fmat");
            write_feature_file(&m, &path).unwrap();
            let back = read_feature_file(&path).unwrap();
            let same_bits = back
                .data()
                .iter()
                .zip(m.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }
}
