use crate::model::Model;
use crate::wav::AudioSignal;

use super::TaskError;

/// Per-frame discrete local codes of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSequence {
    pub utt_id: String,
    pub codes: Vec<usize>,
    /// Duration of one frame: `dsf / sample_rate`, in milliseconds.
    pub frame_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedCodes {
    pub local: CodeSequence,
    /// Whole-utterance quantized speaker code (dual variants only).
    pub global: Option<usize>,
}

/// Run the frozen model over an utterance and return its local code
/// sequence plus the utterance-level global code.
pub fn extract_codes(
    model: &Model,
    utt_id: &str,
    audio: &AudioSignal,
) -> Result<ExtractedCodes, TaskError> {
    let codes = model.local_codes(audio)?;
    let global = model.global_code(audio)?;
    let frame_ms = model.config.dsf as f64 * 1000.0 / model.config.sample_rate as f64;
    Ok(ExtractedCodes {
        local: CodeSequence {
            utt_id: utt_id.to_string(),
            codes,
            frame_ms,
        },
        global,
    })
}

/// One text line per utterance: `<utt_id> c1 c2 ... cN`.
pub fn format_code_lines(seqs: &[CodeSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.utt_id);
        for c in &s.codes {
            out.push(' ');
            out.push_str(&c.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parse code lines back into `(utt_id, codes)` pairs.
pub fn parse_code_lines(text: &str) -> Result<Vec<(String, Vec<usize>)>, TaskError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let utt_id = it.next().expect("non-empty line").to_string();
        let mut codes = Vec::new();
        for tok in it {
            let c: usize = tok.parse().map_err(|_| {
                TaskError::BadInput(format!("line {}: bad code `{tok}`", lineno + 1))
            })?;
            codes.push(c);
        }
        out.push((utt_id, codes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, Variant};

    #[test]
    fn code_count_and_frame_duration() {
        let config = ModelConfig {
            variant: Variant::GlobalVq,
            dsf: 64,
            local_k: 8,
            global_k: 4,
            embed_d: 4,
            n_speakers: 2,
            hidden: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(config, 3).unwrap();
        let audio = AudioSignal::new(vec![0.1; 6400], 16000);
        let got = extract_codes(&model, "u0", &audio).unwrap();
        assert_eq!(got.local.codes.len(), 100);
        assert_eq!(got.local.frame_ms, 4.0);
        assert!(got.global.is_some());
        // determinism
        let again = extract_codes(&model, "u0", &audio).unwrap();
        assert_eq!(got, again);
    }

    #[test]
    fn code_lines_roundtrip() {
        let seqs = vec![
            CodeSequence {
                utt_id: "a".into(),
                codes: vec![1, 2, 3],
                frame_ms: 4.0,
            },
            CodeSequence {
                utt_id: "b".into(),
                codes: vec![],
                frame_ms: 4.0,
            },
        ];
        let text = format_code_lines(&seqs);
        let back = parse_code_lines(&text).unwrap();
        assert_eq!(back[0], ("a".to_string(), vec![1, 2, 3]));
        assert_eq!(back[1], ("b".to_string(), vec![]));
        assert!(parse_code_lines("u0 1 x 3\n").is_err());
    }
}
