use std::collections::BTreeMap;

use crate::model::Model;
use crate::wav::AudioSignal;

use super::TaskError;

/// Normalized mutual information and purity between a code stream and a
/// label stream over the same frames.
///
/// `NMI = MI / sqrt(H_codes * H_labels)` with natural logs. Conventions:
/// both entropies zero means two constant streams (trivially dependent,
/// 1.0); exactly one zero means one stream is constant and carries no
/// information (0.0). Purity is count-weighted: the fraction of frames
/// whose code's majority label matches their own.
pub fn nmi_and_purity(codes: &[usize], labels: &[usize]) -> Result<(f64, f64), TaskError> {
    if codes.len() != labels.len() {
        return Err(TaskError::LengthMismatch(codes.len(), labels.len()));
    }
    if codes.is_empty() {
        return Err(TaskError::BadInput("empty streams".into()));
    }
    let n = codes.len() as f64;
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut code_counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut label_counts: BTreeMap<usize, u64> = BTreeMap::new();
    for (&c, &l) in codes.iter().zip(labels) {
        *joint.entry((c, l)).or_insert(0) += 1;
        *code_counts.entry(c).or_insert(0) += 1;
        *label_counts.entry(l).or_insert(0) += 1;
    }
    let entropy = |counts: &BTreeMap<usize, u64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_c = entropy(&code_counts);
    let h_l = entropy(&label_counts);
    let mut mi = 0.0;
    for (&(c, l), &cnt) in &joint {
        let p = cnt as f64 / n;
        let pc = code_counts[&c] as f64 / n;
        let pl = label_counts[&l] as f64 / n;
        mi += p * (p / (pc * pl)).ln();
    }
    let nmi = if h_c == 0.0 && h_l == 0.0 {
        1.0
    } else if h_c == 0.0 || h_l == 0.0 {
        0.0
    } else {
        (mi / (h_c * h_l).sqrt()).clamp(0.0, 1.0)
    };

    let mut per_code_max: BTreeMap<usize, u64> = BTreeMap::new();
    for (&(c, _), &cnt) in &joint {
        let e = per_code_max.entry(c).or_insert(0);
        *e = (*e).max(cnt);
    }
    let purity = per_code_max.values().sum::<u64>() as f64 / n;
    Ok((nmi, purity))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, TaskError> {
    if a.len() != b.len() {
        return Err(TaskError::LengthMismatch(a.len(), b.len()));
    }
    let na2: f64 = a.iter().map(|v| v * v).sum();
    let nb2: f64 = b.iter().map(|v| v * v).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(TaskError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt of the product keeps self-similarity and antipodality exact
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine between the global pre-quantization embeddings of two signals,
/// the stand-in for utterance-level speaker similarity.
pub fn speaker_similarity(
    model: &Model,
    natural: &AudioSignal,
    reconstructed: &AudioSignal,
) -> Result<f64, TaskError> {
    let a = model.global_embedding(natural)?;
    let b = model.global_embedding(reconstructed)?;
    cosine(&a, &b)
}
