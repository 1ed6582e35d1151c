use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::AlignEntry;

use super::codes::CodeSequence;
use super::TaskError;

/// Reserved phone label for codes never observed during map building.
pub const UNK_PHONE: &str = "<unk>";

/// Majority-overlap phone label per frame. Frame `i` spans
/// `[i*frame_ms, (i+1)*frame_ms)`; ties break to the lexicographically
/// smallest phone.
pub fn frame_phone_labels(
    alignment: &[AlignEntry],
    n_frames: usize,
    frame_ms: f64,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let fs = i as f64 * frame_ms;
        let fe = fs + frame_ms;
        let mut best: Option<(&str, f64)> = None;
        for a in alignment {
            let ov = (a.offset_ms.min(fe) - a.onset_ms.max(fs)).max(0.0);
            if ov <= 0.0 {
                continue;
            }
            best = match best {
                None => Some((&a.phone, ov)),
                Some((bp, bo)) => {
                    if ov > bo || (ov == bo && a.phone.as_str() < bp) {
                        Some((&a.phone, ov))
                    } else {
                        Some((bp, bo))
                    }
                }
            };
        }
        out.push(best.map(|(p, _)| p.to_string()).unwrap_or_else(|| UNK_PHONE.into()));
    }
    out
}

/// Majority-vote code-to-phone map from training code sequences and their
/// exact alignments. Unobserved codes map to [`UNK_PHONE`]; per-code ties
/// break to the lexicographically smallest phone.
pub fn build_code_to_phone_map(
    train: &[(CodeSequence, Vec<AlignEntry>)],
    k: usize,
) -> Result<Vec<String>, TaskError> {
    if train.is_empty() {
        return Err(TaskError::BadInput("empty training set".into()));
    }
    let mut votes: Vec<BTreeMap<String, u64>> = vec![BTreeMap::new(); k];
    for (seq, alignment) in train {
        let labels = frame_phone_labels(alignment, seq.codes.len(), seq.frame_ms);
        for (&code, label) in seq.codes.iter().zip(&labels) {
            if code >= k {
                return Err(TaskError::BadInput(format!(
                    "code {code} out of range for codebook of {k}"
                )));
            }
            *votes[code].entry(label.clone()).or_insert(0) += 1;
        }
    }
    Ok(votes
        .into_iter()
        .map(|v| {
            v.into_iter()
                // BTreeMap iterates phones in lexicographic order, so a
                // strictly-greater comparison keeps the smallest on ties.
                .fold((UNK_PHONE.to_string(), 0u64), |(bp, bc), (p, c)| {
                    if c > bc {
                        (p, c)
                    } else {
                        (bp, bc)
                    }
                })
                .0
        })
        .collect())
}

/// Map codes to phones, collapse consecutive repeats, then drop unknowns.
pub fn recognize_phones(codes: &[usize], map: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for &c in codes {
        let phone = map.get(c).map(|s| s.as_str()).unwrap_or(UNK_PHONE);
        if out.last().map(|l| l.as_str()) != Some(phone) {
            out.push(phone.to_string());
        }
    }
    out.retain(|p| p != UNK_PHONE);
    out
}

/// Phone error decomposition from one minimum-edit alignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerReport {
    /// Percentages of the reference length.
    pub sub: f64,
    pub ins: f64,
    pub del: f64,
    pub total: f64,
    pub n_sub: u64,
    pub n_ins: u64,
    pub n_del: u64,
    pub n_ref: u64,
}

impl PerReport {
    pub fn zero() -> Self {
        Self {
            sub: 0.0,
            ins: 0.0,
            del: 0.0,
            total: 0.0,
            n_sub: 0,
            n_ins: 0,
            n_del: 0,
            n_ref: 0,
        }
    }

    pub fn from_counts(n_sub: u64, n_ins: u64, n_del: u64, n_ref: u64) -> Self {
        let pct = |c: u64| 100.0 * c as f64 / n_ref as f64;
        Self {
            sub: pct(n_sub),
            ins: pct(n_ins),
            del: pct(n_del),
            total: pct(n_sub + n_ins + n_del),
            n_sub,
            n_ins,
            n_del,
            n_ref,
        }
    }

    pub fn merge(reports: &[PerReport]) -> Self {
        let (mut s, mut i, mut d, mut r) = (0, 0, 0, 0);
        for rep in reports {
            s += rep.n_sub;
            i += rep.n_ins;
            d += rep.n_del;
            r += rep.n_ref;
        }
        if r == 0 {
            Self::zero()
        } else {
            Self::from_counts(s, i, d, r)
        }
    }
}

/// Levenshtein counts with unit costs; alignment ties prefer substitution
/// over insertion over deletion during backtrace.
pub fn per_counts(hypothesis: &[String], reference: &[String]) -> (u64, u64, u64) {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![vec![0u64; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i as u64;
    }
    for j in 0..=m {
        d[0][j] = j as u64;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = u64::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + sub_cost)
                .min(d[i][j - 1] + 1)
                .min(d[i - 1][j] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut subs, mut inss, mut dels) = (0u64, 0u64, 0u64);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = u64::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + sub_cost {
                subs += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            inss += 1;
            j -= 1;
            continue;
        }
        dels += 1;
        i -= 1;
    }
    (subs, inss, dels)
}

/// Phone error rate of one hypothesis/reference pair.
pub fn per(hypothesis: &[String], reference: &[String]) -> Result<PerReport, TaskError> {
    if reference.is_empty() {
        return Err(TaskError::EmptyReference);
    }
    let (s, i, d) = per_counts(hypothesis, reference);
    Ok(PerReport::from_counts(s, i, d, reference.len() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ss(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_strings_score_zero() {
        let r = per(&ss(&["a", "b", "c"]), &ss(&["a", "b", "c"])).unwrap();
        assert_eq!((r.n_sub, r.n_ins, r.n_del), (0, 0, 0));
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn one_substitution_is_a_third() {
        let r = per(&ss(&["a", "x", "c"]), &ss(&["a", "b", "c"])).unwrap();
        assert_eq!((r.n_sub, r.n_ins, r.n_del), (1, 0, 0));
        assert!((r.total - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let r = per(&[], &ss(&["a", "b"])).unwrap();
        assert_eq!((r.n_sub, r.n_ins, r.n_del), (0, 0, 2));
        assert_eq!(r.total, 100.0);
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(matches!(
            per(&ss(&["a"]), &[]),
            Err(TaskError::EmptyReference)
        ));
    }

    #[test]
    fn tie_prefers_substitution() {
        // "ab" -> "ba" can be S+S or I+D; the backtrace must report 2 subs
        let (s, i, d) = per_counts(&ss(&["b", "a"]), &ss(&["a", "b"]));
        assert_eq!((s, i, d), (2, 0, 0));
    }

    /// Independent oracle: minimum edit distance by exhaustive recursion.
    fn brute_force_distance(hyp: &[String], reference: &[String]) -> u64 {
        fn rec(h: &[String], r: &[String]) -> u64 {
            match (h.is_empty(), r.is_empty()) {
                (true, _) => r.len() as u64,
                (_, true) => h.len() as u64,
                _ => {
                    let sub = rec(&h[1..], &r[1..]) + u64::from(h[0] != r[0]);
                    let ins = rec(&h[1..], r) + 1;
                    let del = rec(h, &r[1..]) + 1;
                    sub.min(ins).min(del)
                }
            }
        }
        rec(hyp, reference)
    }

    #[test]
    fn matches_brute_force_on_short_strings() {
        let alphabet = ["a", "b", "c"];
        let mut strings: Vec<Vec<String>> = vec![vec![]];
        for len in 1..=3usize {
            let mut idx = vec![0usize; len];
            loop {
                strings.push(idx.iter().map(|&i| alphabet[i].to_string()).collect());
                let mut k = 0;
                loop {
                    idx[k] += 1;
                    if idx[k] < alphabet.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                    if k == len {
                        break;
                    }
                }
                if k == len {
                    break;
                }
            }
        }
        for h in &strings {
            for r in &strings {
                let (s, i, d) = per_counts(h, r);
                assert_eq!(
                    s + i + d,
                    brute_force_distance(h, r),
                    "hyp {h:?} vs ref {r:?}"
                );
            }
        }
    }

    #[test]
    fn recognize_collapses_and_drops_unknowns() {
        let map: Vec<String> = ss(&["a", "a", "b", UNK_PHONE]);
        assert_eq!(recognize_phones(&[0, 0, 1, 2, 2], &map), ss(&["a", "b"]));
        assert_eq!(recognize_phones(&[], &map), Vec::<String>::new());
        assert_eq!(recognize_phones(&[3, 3, 3], &map), Vec::<String>::new());
        // out-of-range codes behave like unknowns
        assert_eq!(recognize_phones(&[9], &map), Vec::<String>::new());
    }

    #[test]
    fn frame_labels_use_majority_overlap() {
        let alignment = vec![
            AlignEntry {
                phone: "aa".into(),
                onset_ms: 0.0,
                offset_ms: 10.0,
            },
            AlignEntry {
                phone: "bb".into(),
                onset_ms: 10.0,
                offset_ms: 20.0,
            },
        ];
        // 4 ms frames: frame 2 spans 8..12 -> 2ms aa, 2ms bb, tie -> aa
        let labels = frame_phone_labels(&alignment, 5, 4.0);
        assert_eq!(labels, ss(&["aa", "aa", "aa", "bb", "bb"]));
    }

    #[test]
    fn map_majority_and_tie_rules() {
        let alignment = vec![
            AlignEntry {
                phone: "a".into(),
                onset_ms: 0.0,
                offset_ms: 8.0,
            },
            AlignEntry {
                phone: "b".into(),
                onset_ms: 8.0,
                offset_ms: 16.0,
            },
        ];
        // frames of 4ms: labels a a b b; codes 0 0 0 1
        let seq = CodeSequence {
            utt_id: "u".into(),
            codes: vec![0, 0, 0, 1],
            frame_ms: 4.0,
        };
        let map = build_code_to_phone_map(&[(seq, alignment.clone())], 4).unwrap();
        assert_eq!(map[0], "a"); // majority 2:1
        assert_eq!(map[1], "b");
        assert_eq!(map[2], UNK_PHONE); // unobserved
        assert_eq!(map[3], UNK_PHONE);

        // 50/50 tie between a and b -> a
        let seq = CodeSequence {
            utt_id: "u".into(),
            codes: vec![0, 0, 0, 0],
            frame_ms: 4.0,
        };
        let map = build_code_to_phone_map(&[(seq, alignment)], 1).unwrap();
        assert_eq!(map[0], "a");
    }

    proptest! {
        #[test]
        fn collapse_never_lengthens(codes in proptest::collection::vec(0usize..6, 0..60)) {
            let map: Vec<String> = ss(&["a", "b", "c", "a", UNK_PHONE, "b"]);
            let out = recognize_phones(&codes, &map);
            prop_assert!(out.len() <= codes.len());
        }

        #[test]
        fn per_total_is_symmetric_in_distance(
            a in proptest::collection::vec(0usize..3, 0..8),
            b in proptest::collection::vec(0usize..3, 1..8),
        ) {
            let names = ["a", "b", "c"];
            let av: Vec<String> = a.iter().map(|&i| names[i].to_string()).collect();
            let bv: Vec<String> = b.iter().map(|&i| names[i].to_string()).collect();
            let (s1, i1, d1) = per_counts(&av, &bv);
            let (s2, i2, d2) = per_counts(&bv, &av);
            // the distance is symmetric even though the S/I/D split need
            // not be (tie preferences are direction-dependent)
            prop_assert_eq!(s1 + i1 + d1, s2 + i2 + d2);
        }
    }
}
