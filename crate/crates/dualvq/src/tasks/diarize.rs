use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::wav::AudioSignal;

use super::TaskError;

pub const DEFAULT_WINDOW_S: f64 = 2.0;
pub const DEFAULT_OVERLAP_S: f64 = 0.25;

/// A labeled speech region of one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiarizationSegment {
    pub file_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

impl DiarizationSegment {
    fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Enrollment result: the multiset of global codes each speaker produced,
/// plus the codes claimed by more than one speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCodes {
    pub per_speaker: BTreeMap<String, BTreeMap<usize, u64>>,
    pub ambiguous: BTreeSet<usize>,
}

impl ReferenceCodes {
    pub fn n_speakers(&self) -> usize {
        self.per_speaker.len()
    }
}

/// Window start/end sample pairs: `window` long every `hop`, the tail
/// clipped to the file end.
fn window_spans(len: usize, rate: u32, window_s: f64, hop_s: f64) -> Vec<(usize, usize)> {
    let window = (window_s * rate as f64).round() as usize;
    let hop = (hop_s * rate as f64).round() as usize;
    let mut spans = Vec::new();
    let mut start = 0usize;
    while start < len {
        let end = (start + window).min(len);
        spans.push((start, end));
        start += hop.max(1);
    }
    spans
}

/// Slide a window over each enrollment utterance and collect the global
/// code per window into that speaker's multiset.
pub fn build_reference_codes(
    model: &Model,
    enrollment: &BTreeMap<String, Vec<AudioSignal>>,
    window_s: f64,
    overlap_s: f64,
) -> Result<ReferenceCodes, TaskError> {
    if enrollment.is_empty() {
        return Err(TaskError::BadInput("no enrolled speakers".into()));
    }
    let hop_s = window_s - overlap_s;
    let mut per_speaker = BTreeMap::new();
    for (speaker, utts) in enrollment {
        if utts.is_empty() {
            return Err(TaskError::EmptyEnrollment(speaker.clone()));
        }
        let mut multiset: BTreeMap<usize, u64> = BTreeMap::new();
        for audio in utts {
            for (s, e) in window_spans(audio.len(), audio.sample_rate, window_s, hop_s) {
                if e - s < model.config.dsf {
                    continue;
                }
                let win = AudioSignal::new(audio.samples[s..e].to_vec(), audio.sample_rate);
                let code = model
                    .global_code(&win)?
                    .ok_or_else(|| TaskError::BadInput("model has no global codebook".into()))?;
                *multiset.entry(code).or_insert(0) += 1;
            }
        }
        if multiset.is_empty() {
            return Err(TaskError::EmptyEnrollment(speaker.clone()));
        }
        per_speaker.insert(speaker.clone(), multiset);
    }
    let mut ambiguous = BTreeSet::new();
    let speakers: Vec<&String> = per_speaker.keys().collect();
    for (i, a) in speakers.iter().enumerate() {
        for b in &speakers[i + 1..] {
            for code in per_speaker[*a].keys() {
                if per_speaker[*b].contains_key(code) {
                    ambiguous.insert(*code);
                }
            }
        }
    }
    Ok(ReferenceCodes {
        per_speaker,
        ambiguous,
    })
}

/// Sliding-window two-speaker diarization.
///
/// Each window's global code is matched against the enrollment multisets;
/// a code known for exactly one speaker labels the window, anything else
/// (shared or unseen) is resolved by a seeded coin flip. Each window
/// labels its leading hop-sized region, adjacent same-label regions merge,
/// so the output tiles the file without overlaps.
pub fn diarize(
    model: &Model,
    file_id: &str,
    audio: &AudioSignal,
    refs: &ReferenceCodes,
    window_s: f64,
    overlap_s: f64,
    seed: u64,
) -> Result<Vec<DiarizationSegment>, TaskError> {
    if refs.n_speakers() != 2 {
        return Err(TaskError::SpeakerCount(refs.n_speakers()));
    }
    let rate = audio.sample_rate as f64;
    if (audio.len() as f64) < window_s * rate {
        return Err(TaskError::BadInput(format!(
            "audio shorter than one {window_s}s window"
        )));
    }
    let hop_s = window_s - overlap_s;
    if hop_s <= 0.0 {
        return Err(TaskError::BadInput("overlap must be below window".into()));
    }
    let speakers: Vec<&String> = refs.per_speaker.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hop = (hop_s * rate).round() as usize;
    let mut segments: Vec<DiarizationSegment> = Vec::new();
    for (s, e) in window_spans(audio.len(), audio.sample_rate, window_s, hop_s) {
        let win = AudioSignal::new(audio.samples[s..e].to_vec(), audio.sample_rate);
        let code = model
            .global_code(&win)?
            .ok_or_else(|| TaskError::BadInput("model has no global codebook".into()))?;
        let owners: Vec<&String> = speakers
            .iter()
            .copied()
            .filter(|spk| refs.per_speaker[*spk].contains_key(&code))
            .collect();
        let label = match owners.as_slice() {
            [one] => (*one).clone(),
            // shared or unseen code: the seeded random rule
            _ => speakers[rng.gen_range(0..2)].clone(),
        };
        let region_start = s as f64 / rate;
        let region_end = if s + hop >= audio.len() {
            audio.len() as f64 / rate
        } else {
            (s + hop) as f64 / rate
        };
        match segments.last_mut() {
            Some(last) if last.speaker == label => {
                last.duration = region_end - last.onset;
            }
            _ => segments.push(DiarizationSegment {
                file_id: file_id.to_string(),
                onset: region_start,
                duration: region_end - region_start,
                speaker: label,
            }),
        }
    }
    Ok(segments)
}

/// Time-weighted diarization error decomposition, in fractions of scored
/// (reference speech) time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub false_alarm: f64,
    pub miss: f64,
    pub speaker_error: f64,
    pub der: f64,
}

fn label_at(segments: &[DiarizationSegment], t: f64) -> Option<&str> {
    segments
        .iter()
        .find(|s| s.onset <= t && t < s.end())
        .map(|s| s.speaker.as_str())
}

/// Score hypothesis segments against a reference. The hypothesis-to-
/// reference speaker mapping is the injection minimizing speaker error
/// (two speakers means two candidate permutations).
pub fn der(hypothesis: &[DiarizationSegment], reference: &[DiarizationSegment]) -> DerReport {
    let mut bounds: Vec<f64> = Vec::new();
    for s in hypothesis.iter().chain(reference) {
        bounds.push(s.onset);
        bounds.push(s.end());
    }
    bounds.sort_by(f64::total_cmp);
    bounds.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let ref_speech: f64 = reference.iter().map(|s| s.duration).sum();
    if ref_speech <= 0.0 {
        return DerReport {
            false_alarm: 0.0,
            miss: 0.0,
            speaker_error: 0.0,
            der: 0.0,
        };
    }

    let mut fa = 0.0;
    let mut miss = 0.0;
    // overlap[ (hyp, ref) ] = co-occurring speech time
    let mut overlap: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut both = 0.0;
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dur = b - a;
        if dur <= 0.0 {
            continue;
        }
        let mid = 0.5 * (a + b);
        match (label_at(hypothesis, mid), label_at(reference, mid)) {
            (Some(h), Some(r)) => {
                both += dur;
                *overlap.entry((h.to_string(), r.to_string())).or_insert(0.0) += dur;
            }
            (Some(_), None) => fa += dur,
            (None, Some(_)) => miss += dur,
            (None, None) => {}
        }
    }

    // best injective hypothesis -> reference label mapping
    let hyp_labels: Vec<String> = overlap
        .keys()
        .map(|(h, _)| h.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ref_labels: Vec<String> = overlap
        .keys()
        .map(|(_, r)| r.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut best_match = 0.0f64;
    let mut assignment = vec![usize::MAX; hyp_labels.len()];
    fn search(
        i: usize,
        hyp_labels: &[String],
        ref_labels: &[String],
        overlap: &BTreeMap<(String, String), f64>,
        used: &mut Vec<bool>,
        assignment: &mut Vec<usize>,
        matched: f64,
        best: &mut f64,
    ) {
        if i == hyp_labels.len() {
            if matched > *best {
                *best = matched;
            }
            return;
        }
        // leave hyp label i unmapped
        search(
            i + 1,
            hyp_labels,
            ref_labels,
            overlap,
            used,
            assignment,
            matched,
            best,
        );
        for (j, r) in ref_labels.iter().enumerate() {
            if used[j] {
                continue;
            }
            let gain = overlap
                .get(&(hyp_labels[i].clone(), r.clone()))
                .copied()
                .unwrap_or(0.0);
            used[j] = true;
            assignment[i] = j;
            search(
                i + 1,
                hyp_labels,
                ref_labels,
                overlap,
                used,
                assignment,
                matched + gain,
                best,
            );
            used[j] = false;
            assignment[i] = usize::MAX;
        }
    }
    let mut used = vec![false; ref_labels.len()];
    search(
        0,
        &hyp_labels,
        &ref_labels,
        &overlap,
        &mut used,
        &mut assignment,
        0.0,
        &mut best_match,
    );
    let speaker_error = both - best_match;

    DerReport {
        false_alarm: fa / ref_speech,
        miss: miss / ref_speech,
        speaker_error: speaker_error / ref_speech,
        der: (fa + miss + speaker_error) / ref_speech,
    }
}

/// RTTM-style lines: `SPEAKER <file> 1 <onset> <dur> <NA> <NA> <label> <NA> <NA>`.
pub fn format_rttm(segments: &[DiarizationSegment]) -> String {
    let mut out = String::new();
    for s in segments {
        out.push_str(&format!(
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>\n",
            s.file_id, s.onset, s.duration, s.speaker
        ));
    }
    out
}

/// Parse RTTM SPEAKER lines back into segments. Lines with other record
/// types are skipped; malformed SPEAKER lines are rejected.
pub fn parse_rttm(text: &str) -> Result<Vec<DiarizationSegment>, TaskError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(TaskError::BadInput(format!(
                "rttm line {}: want at least 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| TaskError::BadInput(format!("rttm line {}: bad onset", lineno + 1)))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| TaskError::BadInput(format!("rttm line {}: bad duration", lineno + 1)))?;
        if !onset.is_finite() || !duration.is_finite() || onset < 0.0 || duration <= 0.0 {
            return Err(TaskError::BadInput(format!(
                "rttm line {}: non-positive segment",
                lineno + 1
            )));
        }
        out.push(DiarizationSegment {
            file_id: fields[1].to_string(),
            onset,
            duration,
            speaker: fields[7].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(onset: f64, duration: f64, speaker: &str) -> DiarizationSegment {
        DiarizationSegment {
            file_id: "f".into(),
            onset,
            duration,
            speaker: speaker.into(),
        }
    }

    #[test]
    fn der_identity_is_zero() {
        let r = vec![seg(0.0, 5.0, "A"), seg(5.0, 5.0, "B")];
        let report = der(&r, &r);
        assert_eq!(report.der, 0.0);
    }

    #[test]
    fn der_is_invariant_under_global_label_swap() {
        let r = vec![seg(0.0, 5.0, "A"), seg(5.0, 5.0, "B")];
        let h = vec![seg(0.0, 5.0, "B"), seg(5.0, 5.0, "A")];
        let report = der(&h, &r);
        assert_eq!(report.der, 0.0);
    }

    #[test]
    fn der_hand_computed_ten_percent() {
        // 10 s file, 1 s mislabeled, no false alarm or miss
        let r = vec![seg(0.0, 5.0, "A"), seg(5.0, 5.0, "B")];
        let h = vec![seg(0.0, 6.0, "A"), seg(6.0, 4.0, "B")];
        let report = der(&h, &r);
        assert!((report.speaker_error - 0.10).abs() < 1e-12);
        assert!((report.der - 0.10).abs() < 1e-12);
        assert_eq!(report.false_alarm, 0.0);
        assert_eq!(report.miss, 0.0);
    }

    #[test]
    fn der_decomposition_sums() {
        let r = vec![seg(0.0, 4.0, "A"), seg(6.0, 4.0, "B")];
        let h = vec![seg(0.0, 5.0, "A"), seg(5.0, 3.0, "A")];
        let report = der(&h, &r);
        assert!(
            (report.der - (report.false_alarm + report.miss + report.speaker_error)).abs() < 1e-12
        );
        assert!(report.false_alarm > 0.0); // hyp speech in the 4..6 gap
        assert!(report.miss > 0.0); // ref speech after 8.0 unlabeled
        assert!(report.speaker_error > 0.0); // B region labeled A
    }

    #[test]
    fn window_spans_tile_and_clip() {
        let spans = window_spans(16000 * 5, 16000, 2.0, 1.75);
        assert_eq!(spans[0], (0, 32000));
        assert_eq!(spans[1], (28000, 60000));
        let last = spans.last().unwrap();
        assert_eq!(last.1, 80000);
        for w in spans.windows(2) {
            assert!(w[1].0 > w[0].0 && w[1].0 < w[0].1, "windows overlap by hop");
        }
    }
}
