//! Diarization error rate under oracle speech activity: collar trimming,
//! overlap exclusion, optimal one-to-one speaker mapping, and the
//! miss / false-alarm / confusion decomposition. Includes the RTTM codec.
//!
//! Intervals are half-open `[onset, onset + duration)` in double-precision
//! seconds. The collar is applied around reference turn boundaries only and
//! removes time from both the numerator and the denominator.

mod hungarian;
mod rttm;

pub use rttm::{read_rttm, rttm_line, write_rttm};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intervals shorter than this are dropped by the interval algebra.
const EPS: f64 = 1e-9;

/// One speaker turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

impl Turn {
    pub fn new(onset: f64, duration: f64, speaker: impl Into<String>) -> Self {
        Turn {
            onset,
            duration,
            speaker: speaker.into(),
        }
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// The speaker turns of one file, sorted by onset.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub file_id: String,
    pub turns: Vec<Turn>,
}

impl Annotation {
    pub fn new(file_id: impl Into<String>, mut turns: Vec<Turn>) -> Result<Self> {
        if turns.iter().any(|t| t.duration <= 0.0) {
            return Err(Error::Validation("turn durations must be > 0".into()));
        }
        turns.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        Ok(Annotation {
            file_id: file_id.into(),
            turns,
        })
    }

    /// True when two or more turns are simultaneously active.
    pub fn has_overlap(&self) -> bool {
        let mut prev_end = f64::NEG_INFINITY;
        for t in &self.turns {
            if t.onset < prev_end - EPS {
                return true;
            }
            prev_end = prev_end.max(t.end());
        }
        false
    }

    pub fn speakers(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self.turns.iter().map(|t| t.speaker.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Disjoint sorted intervals of time retained for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringRegions {
    pub intervals: Vec<(f64, f64)>,
}

impl ScoringRegions {
    pub fn total(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| t >= a && t < b)
    }
}

/// Merges possibly overlapping intervals into disjoint sorted ones.
fn union(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.retain(|(a, b)| b - a > EPS);
    intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in intervals {
        match out.last_mut() {
            Some((_, end)) if a <= *end + EPS => *end = end.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Removes `holes` (disjoint sorted) from `base` (disjoint sorted).
fn subtract(base: &[(f64, f64)], holes: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a, b) in base {
        let mut cursor = a;
        for &(ha, hb) in holes {
            if hb <= cursor || ha >= b {
                continue;
            }
            if ha > cursor {
                out.push((cursor, ha.min(b)));
            }
            cursor = cursor.max(hb);
            if cursor >= b {
                break;
            }
        }
        if cursor < b {
            out.push((cursor, b));
        }
    }
    out.retain(|(a, b)| b - a > EPS);
    out
}

/// Sub-intervals where at least `min_active` of the given turns are active.
fn active_at_least(turns: &[Turn], min_active: usize) -> Vec<(f64, f64)> {
    let mut events: Vec<(f64, i32)> = Vec::with_capacity(turns.len() * 2);
    for t in turns {
        events.push((t.onset, 1));
        events.push((t.end(), -1));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    let mut count = 0i32;
    let mut start = 0.0;
    for (time, delta) in events {
        let was = count;
        count += delta;
        if was < min_active as i32 && count >= min_active as i32 {
            start = time;
        } else if was >= min_active as i32 && count < min_active as i32 {
            out.push((start, time));
        }
    }
    union(out)
}

/// Builds the scoring regions from a reference annotation: the union of
/// reference speech, minus a `collar` window around every reference turn
/// boundary, minus (when `skip_overlap`) the spans where two or more
/// reference speakers talk at once.
pub fn scoring_regions(reference: &Annotation, collar: f64, skip_overlap: bool) -> ScoringRegions {
    let speech = union(
        reference
            .turns
            .iter()
            .map(|t| (t.onset, t.end()))
            .collect(),
    );
    let mut holes = Vec::new();
    if collar > 0.0 {
        for t in &reference.turns {
            holes.push((t.onset - collar, t.onset + collar));
            holes.push((t.end() - collar, t.end() + collar));
        }
    }
    if skip_overlap {
        holes.extend(active_at_least(&reference.turns, 2));
    }
    let holes = union(holes);
    ScoringRegions {
        intervals: subtract(&speech, &holes),
    }
}

/// Best one-to-one mapping from hypothesis labels to reference labels,
/// maximizing the co-occurrence duration inside the scoring regions.
/// Hypothesis labels without a profitable match are absent from the map.
pub fn optimal_mapping(
    reference: &Annotation,
    hypothesis: &Annotation,
    regions: &ScoringRegions,
) -> BTreeMap<String, String> {
    let ref_labels = reference.speakers();
    let hyp_labels = hypothesis.speakers();
    if ref_labels.is_empty() || hyp_labels.is_empty() {
        return BTreeMap::new();
    }
    let matrix = cooccurrence_matrix(reference, hypothesis, regions, &ref_labels, &hyp_labels);

    // pad to square; maximize overlap = minimize negated cost
    let dim = ref_labels.len().max(hyp_labels.len());
    let mut cost = vec![vec![0.0f64; dim]; dim];
    for (r, row) in matrix.iter().enumerate() {
        for (h, &v) in row.iter().enumerate() {
            cost[r][h] = -v;
        }
    }
    let assignment = hungarian::solve(&cost);

    let mut map = BTreeMap::new();
    for (r, &h) in assignment.iter().enumerate() {
        if r < ref_labels.len() && h < hyp_labels.len() && matrix[r][h] > 0.0 {
            map.insert(hyp_labels[h].to_string(), ref_labels[r].to_string());
        }
    }
    map
}

fn cooccurrence_matrix(
    reference: &Annotation,
    hypothesis: &Annotation,
    regions: &ScoringRegions,
    ref_labels: &[&str],
    hyp_labels: &[&str],
) -> Vec<Vec<f64>> {
    let mut matrix = vec![vec![0.0f64; hyp_labels.len()]; ref_labels.len()];
    for rt in &reference.turns {
        let r = ref_labels.iter().position(|&l| l == rt.speaker).unwrap();
        for ht in &hypothesis.turns {
            let h = hyp_labels.iter().position(|&l| l == ht.speaker).unwrap();
            let lo = rt.onset.max(ht.onset);
            let hi = rt.end().min(ht.end());
            if hi - lo <= EPS {
                continue;
            }
            // clip the co-occurrence to the scoring regions
            for &(a, b) in &regions.intervals {
                let s = lo.max(a);
                let e = hi.min(b);
                if e - s > EPS {
                    matrix[r][h] += e - s;
                }
            }
        }
    }
    matrix
}

/// The miss / false-alarm / confusion decomposition of DER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub missed: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    /// Reference speech seconds inside the scoring regions.
    pub total: f64,
    /// `(missed + false_alarm + confusion) / total`.
    pub der: f64,
}

impl DerBreakdown {
    fn from_components(missed: f64, false_alarm: f64, confusion: f64, total: f64) -> Self {
        DerBreakdown {
            missed,
            false_alarm,
            confusion,
            total,
            der: (missed + false_alarm + confusion) / total,
        }
    }

    /// Time-weighted aggregate of per-file breakdowns.
    pub fn combine<'a>(parts: impl IntoIterator<Item = &'a DerBreakdown>) -> Result<DerBreakdown> {
        let (mut m, mut f, mut c, mut t) = (0.0, 0.0, 0.0, 0.0);
        for p in parts {
            m += p.missed;
            f += p.false_alarm;
            c += p.confusion;
            t += p.total;
        }
        if t <= 0.0 {
            return Err(Error::Evaluation("no scorable reference speech".into()));
        }
        Ok(DerBreakdown::from_components(m, f, c, t))
    }
}

/// Scores a hypothesis against a reference annotation.
///
/// Both annotations are clipped to the scoring regions; hypothesis labels are
/// mapped one-to-one onto reference labels by maximum overlap; the residual
/// decomposes into missed speech, false alarm, and speaker confusion.
pub fn compute_der(
    reference: &Annotation,
    hypothesis: &Annotation,
    collar: f64,
    skip_overlap: bool,
) -> Result<DerBreakdown> {
    if collar < 0.0 {
        return Err(Error::Argument("collar must be >= 0".into()));
    }
    let regions = scoring_regions(reference, collar, skip_overlap);
    let total_region = regions.total();
    if total_region <= 0.0 {
        return Err(Error::Evaluation(
            "scoring regions are empty; no reference speech to score".into(),
        ));
    }
    let mapping = optimal_mapping(reference, hypothesis, &regions);

    // elementary intervals: every region edge and turn edge
    let mut cuts: Vec<f64> = Vec::new();
    for &(a, b) in &regions.intervals {
        cuts.push(a);
        cuts.push(b);
    }
    for t in reference.turns.iter().chain(&hypothesis.turns) {
        cuts.push(t.onset);
        cuts.push(t.end());
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup_by(|a, b| (*a - *b).abs() <= EPS);

    let (mut missed, mut false_alarm, mut confusion, mut total) = (0.0, 0.0, 0.0, 0.0);
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let dt = t1 - t0;
        if dt <= EPS {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        if !regions.contains(mid) {
            continue;
        }
        let ref_active: Vec<&str> = reference
            .turns
            .iter()
            .filter(|t| t.onset <= mid && mid < t.end())
            .map(|t| t.speaker.as_str())
            .collect();
        let hyp_active: Vec<&str> = hypothesis
            .turns
            .iter()
            .filter(|t| t.onset <= mid && mid < t.end())
            .map(|t| t.speaker.as_str())
            .collect();
        let n_ref = ref_active.len() as f64;
        let n_hyp = hyp_active.len() as f64;
        let n_correct = hyp_active
            .iter()
            .filter(|h| {
                mapping
                    .get(**h)
                    .is_some_and(|r| ref_active.contains(&r.as_str()))
            })
            .count() as f64;

        total += dt * n_ref;
        missed += dt * (n_ref - n_hyp).max(0.0);
        false_alarm += dt * (n_hyp - n_ref).max(0.0);
        confusion += dt * (n_ref.min(n_hyp) - n_correct);
    }

    if total <= 0.0 {
        return Err(Error::Evaluation(
            "no reference speech inside the scoring regions".into(),
        ));
    }
    Ok(DerBreakdown::from_components(
        missed,
        false_alarm,
        confusion,
        total,
    ))
}
