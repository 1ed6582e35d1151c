//! Deterministic multi-speaker synthetic corpus with exact ground truth.
//!
//! Speakers are source-filter profiles (pitch, spectral tilt, formant
//! shift); phones are spectral-envelope templates rendered additively —
//! harmonics of the speaker's f0 for voiced phones, a dense random-phase
//! sinusoid grid for noise phones. Every utterance carries a sample-exact
//! phone alignment, and generation is a pure function of the corpus seed.
//!
//! The four test conditions cross seen/unseen speakers with seen/unseen
//! texts: C1 seen/seen, C2 seen/unseen, C3 unseen/seen, C4 unseen/unseen.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::wav::{self, AudioSignal};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("insufficient material: {0}")]
    Insufficient(String),
    #[error("empty phone sequence")]
    EmptyText,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] wav::WavError),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("bad alignment file: {0}")]
    Align(String),
}

// ── speakers ────────────────────────────────────────────────────────

/// Source-filter voice parameters. `f0` lives on a 10 Hz grid over
/// [80, 300] with a +5 Hz second ring, so any run of up to 23 consecutive
/// seeds is separated by >= 10 Hz and up to 46 by >= 5 Hz; beyond that
/// only the (f0, tilt, formant_shift) triple is guaranteed distinct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: u64,
    pub f0: f64,
    pub tilt: f64,
    pub formant_shift: f64,
}

pub fn make_speaker(seed: u64) -> SpeakerProfile {
    let slot = seed % 23;
    let ring = (seed / 23) % 2;
    let f0 = if ring == 0 {
        80.0 + 10.0 * slot as f64
    } else {
        85.0 + 10.0 * (slot % 22) as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let tilt = rng.gen_range(0.8..1.2);
    let formant_shift = rng.gen_range(0.97..1.03);
    SpeakerProfile {
        id: seed,
        f0,
        tilt,
        formant_shift,
    }
}

// ── phones ──────────────────────────────────────────────────────────

/// Spectral template: two envelope peaks (center Hz, width Hz), a voicing
/// flag, a level, and a nominal duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneTemplate {
    pub id: String,
    pub voiced: bool,
    pub peaks: [(f64, f64); 2],
    pub level: f64,
    pub duration_ms: f64,
}

impl PhoneTemplate {
    fn envelope(&self, freq: f64, shift: f64) -> f64 {
        self.peaks
            .iter()
            .map(|&(c, w)| {
                let d = (freq - c * shift) / w;
                (-0.5 * d * d).exp()
            })
            .sum()
    }
}

/// Desk-scale inventory: nine vowel-like voiced templates on classic
/// formant pairs plus three noise bands.
pub fn default_phone_inventory() -> Vec<PhoneTemplate> {
    let v = |id: &str, f1: f64, f2: f64, dur: f64| PhoneTemplate {
        id: id.into(),
        voiced: true,
        peaks: [(f1, 130.0), (f2, 180.0)],
        level: 0.75,
        duration_ms: dur,
    };
    let n = |id: &str, c1: f64, c2: f64, dur: f64| PhoneTemplate {
        id: id.into(),
        voiced: false,
        peaks: [(c1, 350.0), (c2, 500.0)],
        level: 0.42,
        duration_ms: dur,
    };
    // durations are multiples of 4 ms so phone onsets stay aligned to
    // the frame grid of the default downsampling factor; formant pairs
    // sit on a coarse grid for strong pairwise spectral separation
    vec![
        v("aa", 350.0, 1100.0, 140.0),
        v("ae", 350.0, 2000.0, 128.0),
        v("ah", 350.0, 2900.0, 112.0),
        v("eh", 550.0, 1100.0, 120.0),
        v("er", 550.0, 2000.0, 132.0),
        v("ih", 550.0, 2900.0, 100.0),
        v("iy", 750.0, 1100.0, 120.0),
        v("ow", 750.0, 2000.0, 140.0),
        v("uw", 750.0, 2900.0, 128.0),
        n("ff", 3300.0, 4100.0, 108.0),
        n("sh", 4300.0, 5100.0, 116.0),
        n("ss", 5600.0, 6600.0, 128.0),
    ]
}

// ── utterances ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignEntry {
    pub phone: String,
    pub onset_ms: f64,
    pub offset_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub audio: AudioSignal,
    pub speaker: u64,
    pub alignment: Vec<AlignEntry>,
}

/// Amplitude of the voiced low-band fundamental that carries speaker f0.
const FUNDAMENTAL_LEVEL: f64 = 0.08;

/// The phone carrier lives on harmonics of the frame rate (`rate / 64`,
/// 250 Hz at 16 kHz), starting above the speaker-pitch band.
fn pattern_grid_hz(rate: u32) -> f64 {
    rate as f64 / 64.0
}

fn render_phone(
    template: &PhoneTemplate,
    speaker: &SpeakerProfile,
    rate: u32,
    pattern_seed: u64,
    onset_sample: usize,
) -> Vec<f64> {
    let n = (template.duration_ms * rate as f64 / 1000.0).round() as usize;
    let nyquist = rate as f64 / 2.0;
    let mut out = vec![0.0; n];

    // Phone carrier: harmonics of the frame-rate grid, so the pattern
    // repeats exactly every frame and phone identity, not pitch phase, is
    // what a frame-rate code has to capture. Speaker pitch rides below it
    // as a plain fundamental on voiced phones.
    let grid = pattern_grid_hz(rate);
    let band_top = if template.voiced {
        (16.0f64 * 250.0).min(nyquist - 200.0).min(3800.0)
    } else {
        nyquist - 200.0
    };
    let h_lo = 2; // grid harmonic 1 would sit inside the pitch band
    let h_hi = (band_top / grid).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed);
    for h in h_lo..=h_hi {
        let freq = h as f64 * grid;
        let mut amp = template.envelope(freq, speaker.formant_shift)
            / (freq / 500.0).max(1.0).powf(speaker.tilt);
        // unvoiced patterns are frozen noise: random fixed phases and
        // amplitude jitter, identical across speakers of one phone
        let phase = if template.voiced {
            2.0 * PI * ((h as f64 * 0.618_033_988_749_895) % 1.0)
        } else {
            amp *= rng.gen_range(0.5..1.5);
            rng.gen_range(0.0..2.0 * PI)
        };
        if amp < 1e-6 {
            continue;
        }
        let w = 2.0 * PI * freq / rate as f64;
        for (t, o) in out.iter_mut().enumerate() {
            *o += amp * (w * t as f64 + phase).sin();
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let gain = template.level / peak;
        for o in &mut out {
            *o *= gain;
        }
    }

    if template.voiced {
        // pitch phase runs on the utterance clock, continuous across phones
        let w = 2.0 * PI * speaker.f0 / rate as f64;
        for (t, o) in out.iter_mut().enumerate() {
            *o += FUNDAMENTAL_LEVEL * (w * (onset_sample + t) as f64).sin();
        }
    }

    // short ramps avoid clicks at phone joins
    let ramp = ((rate as f64 * 0.004) as usize).min(n / 2);
    for t in 0..ramp {
        let g = t as f64 / ramp as f64;
        out[t] *= g;
        out[n - 1 - t] *= g;
    }
    out
}

/// Render one utterance: concatenated phone renderings source-filtered by
/// the speaker profile, with a sample-exact alignment that tiles the
/// signal.
pub fn make_utterance(
    speaker: &SpeakerProfile,
    phones: &[&PhoneTemplate],
    rate: u32,
) -> Result<Utterance, CorpusError> {
    if phones.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let mut samples = Vec::new();
    let mut alignment = Vec::new();
    for (pos, template) in phones.iter().enumerate() {
        let _ = pos;
        let pattern_seed = template
            .id
            .bytes()
            .fold(0xBEEFu64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
        let chunk = render_phone(template, speaker, rate, pattern_seed, samples.len());
        let onset = samples.len();
        samples.extend_from_slice(&chunk);
        alignment.push(AlignEntry {
            phone: template.id.clone(),
            onset_ms: onset as f64 * 1000.0 / rate as f64,
            offset_ms: samples.len() as f64 * 1000.0 / rate as f64,
        });
    }
    Ok(Utterance {
        audio: AudioSignal::new(samples, rate),
        speaker: speaker.id,
        alignment,
    })
}

// ── corpus plan and rendering ───────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    C1,
    C2,
    C3,
    C4,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::Train,
        Split::Val,
        Split::C1,
        Split::C2,
        Split::C3,
        Split::C4,
    ];

    pub const CONDITIONS: [Split; 4] = [Split::C1, Split::C2, Split::C3, Split::C4];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::C1 => "C1",
            Split::C2 => "C2",
            Split::C3 => "C3",
            Split::C4 => "C4",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_train_speakers: usize,
    pub n_heldout_speakers: usize,
    pub n_train_texts: usize,
    pub n_heldout_texts: usize,
    pub train_utts_per_speaker: usize,
    pub val_utts_per_speaker: usize,
    pub eval_speakers_per_condition: usize,
    pub eval_utts_per_speaker: usize,
    pub text_len: (usize, usize),
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_train_speakers: 20,
            n_heldout_speakers: 5,
            n_train_texts: 40,
            n_heldout_texts: 12,
            train_utts_per_speaker: 12,
            val_utts_per_speaker: 2,
            eval_speakers_per_condition: 5,
            eval_utts_per_speaker: 8,
            text_len: (6, 10),
            sample_rate: 16000,
            seed: 0,
        }
    }
}

/// One planned utterance: a (speaker, text) pairing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttSpec {
    pub utt_id: String,
    /// Index into [`CorpusPlan::speakers`].
    pub speaker_idx: usize,
    /// Global text id; see [`CorpusPlan::text`].
    pub text_id: usize,
}

/// Everything about a corpus except the rendered audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub params: CorpusParams,
    /// Train speakers first, then held-out speakers.
    pub speakers: Vec<SpeakerProfile>,
    pub phones: Vec<PhoneTemplate>,
    pub train_texts: Vec<Vec<usize>>,
    pub heldout_texts: Vec<Vec<usize>>,
    pub splits: BTreeMap<Split, Vec<UttSpec>>,
}

impl CorpusPlan {
    pub fn n_train_speakers(&self) -> usize {
        self.params.n_train_speakers
    }

    pub fn text(&self, text_id: usize) -> &[usize] {
        if text_id < self.train_texts.len() {
            &self.train_texts[text_id]
        } else {
            &self.heldout_texts[text_id - self.train_texts.len()]
        }
    }

    pub fn is_train_speaker(&self, speaker_idx: usize) -> bool {
        speaker_idx < self.params.n_train_speakers
    }

    pub fn render_utt(&self, spec: &UttSpec) -> Result<Utterance, CorpusError> {
        let speaker = &self.speakers[spec.speaker_idx];
        let phones: Vec<&PhoneTemplate> = self
            .text(spec.text_id)
            .iter()
            .map(|&p| &self.phones[p])
            .collect();
        make_utterance(speaker, &phones, self.params.sample_rate)
    }

    /// Phone-id sequence of an utterance's text.
    pub fn phone_names(&self, text_id: usize) -> Vec<String> {
        self.text(text_id)
            .iter()
            .map(|&p| self.phones[p].id.clone())
            .collect()
    }
}

fn gen_text(
    rng: &mut ChaCha8Rng,
    phones: &[PhoneTemplate],
    len_range: (usize, usize),
) -> Vec<usize> {
    let len = rng.gen_range(len_range.0..=len_range.1);
    let voiced: Vec<usize> = (0..phones.len()).filter(|&i| phones[i].voiced).collect();
    let mut text = Vec::with_capacity(len);
    for i in 0..len {
        loop {
            // bias toward voiced phones so pitch is observable everywhere
            let cand = if rng.gen_range(0..4) < 3 {
                voiced[rng.gen_range(0..voiced.len())]
            } else {
                rng.gen_range(0..phones.len())
            };
            if i == 0 || text[i - 1] != cand {
                text.push(cand);
                break;
            }
        }
    }
    text
}

/// Plan a corpus: speakers, texts, and the split/condition pairings.
/// No audio is rendered. Fails when the requested shape cannot be filled.
pub fn build_corpus(params: &CorpusParams) -> Result<CorpusPlan, CorpusError> {
    let p = params.clone();
    if p.n_train_speakers == 0 || p.n_heldout_speakers == 0 {
        return Err(CorpusError::Insufficient(
            "need at least one train and one held-out speaker".into(),
        ));
    }
    if p.eval_speakers_per_condition > p.n_train_speakers
        || p.eval_speakers_per_condition > p.n_heldout_speakers
    {
        return Err(CorpusError::Insufficient(format!(
            "conditions want {} speakers but only {} train / {} held-out exist",
            p.eval_speakers_per_condition, p.n_train_speakers, p.n_heldout_speakers
        )));
    }
    let texts_needed_per_speaker =
        p.train_utts_per_speaker + p.val_utts_per_speaker + p.eval_utts_per_speaker;
    if p.n_train_texts < texts_needed_per_speaker {
        return Err(CorpusError::Insufficient(format!(
            "{} train texts cannot cover {} per-speaker pairings",
            p.n_train_texts, texts_needed_per_speaker
        )));
    }
    if p.n_heldout_texts < p.eval_utts_per_speaker {
        return Err(CorpusError::Insufficient(format!(
            "{} held-out texts cannot cover {} eval utterances per speaker",
            p.n_heldout_texts, p.eval_utts_per_speaker
        )));
    }
    if p.text_len.0 == 0 || p.text_len.0 > p.text_len.1 {
        return Err(CorpusError::Insufficient("bad text length range".into()));
    }

    let phones = default_phone_inventory();
    let n_speakers = p.n_train_speakers + p.n_heldout_speakers;
    let speakers: Vec<SpeakerProfile> = (0..n_speakers as u64)
        .map(|i| make_speaker(p.seed.wrapping_mul(46).wrapping_add(i)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0xC0FF_EE00);
    let mut seen = std::collections::HashSet::new();
    let mut draw_texts = |n: usize| -> Result<Vec<Vec<usize>>, CorpusError> {
        let mut texts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut tries = 0;
            loop {
                let t = gen_text(&mut rng, &phones, p.text_len);
                if seen.insert(t.clone()) {
                    texts.push(t);
                    break;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(CorpusError::Insufficient(
                        "cannot draw enough distinct texts".into(),
                    ));
                }
            }
        }
        Ok(texts)
    };
    let train_texts = draw_texts(p.n_train_texts)?;
    let heldout_texts = draw_texts(p.n_heldout_texts)?;

    // Per train speaker, draw texts for its train and val utterances.
    let mut splits: BTreeMap<Split, Vec<UttSpec>> = BTreeMap::new();
    for s in Split::ALL {
        splits.insert(s, Vec::new());
    }
    let mut order: Vec<usize> = (0..p.n_train_texts).collect();
    let mut per_speaker_used: Vec<std::collections::HashSet<usize>> =
        vec![std::collections::HashSet::new(); p.n_train_speakers];
    for spk in 0..p.n_train_speakers {
        // seeded per-speaker shuffle of text ids
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut cursor = order.iter().copied();
        for _ in 0..p.train_utts_per_speaker {
            let t = cursor.next().expect("checked above");
            per_speaker_used[spk].insert(t);
            splits.get_mut(&Split::Train).unwrap().push(UttSpec {
                utt_id: format!("s{:03}_t{:03}", spk, t),
                speaker_idx: spk,
                text_id: t,
            });
        }
        for _ in 0..p.val_utts_per_speaker {
            let t = cursor.next().expect("checked above");
            per_speaker_used[spk].insert(t);
            splits.get_mut(&Split::Val).unwrap().push(UttSpec {
                utt_id: format!("s{:03}_t{:03}", spk, t),
                speaker_idx: spk,
                text_id: t,
            });
        }
    }

    // "Seen" texts are exactly those that appear in the train split.
    let mut seen_texts: Vec<usize> = splits[&Split::Train]
        .iter()
        .map(|u| u.text_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    seen_texts.sort_unstable();
    if seen_texts.len() < p.eval_utts_per_speaker {
        return Err(CorpusError::Insufficient(format!(
            "only {} distinct seen texts, conditions want {} per speaker",
            seen_texts.len(),
            p.eval_utts_per_speaker
        )));
    }

    // C1: seen speakers x seen texts, but pairings absent from train/val.
    for spk in 0..p.eval_speakers_per_condition {
        let free: Vec<usize> = seen_texts
            .iter()
            .copied()
            .filter(|t| !per_speaker_used[spk].contains(t))
            .collect();
        if free.len() < p.eval_utts_per_speaker {
            return Err(CorpusError::Insufficient(format!(
                "speaker {spk} has only {} unused seen texts for C1, wants {}",
                free.len(),
                p.eval_utts_per_speaker
            )));
        }
        for u in 0..p.eval_utts_per_speaker {
            let t = free[u];
            splits.get_mut(&Split::C1).unwrap().push(UttSpec {
                utt_id: format!("s{:03}_t{:03}", spk, t),
                speaker_idx: spk,
                text_id: t,
            });
        }
    }

    // C2: seen speakers, unseen texts; C3/C4 mirror with held-out speakers.
    let heldout_base = p.n_train_texts;
    for spk in 0..p.eval_speakers_per_condition {
        for u in 0..p.eval_utts_per_speaker {
            let t = heldout_base + (spk * p.eval_utts_per_speaker + u) % p.n_heldout_texts;
            splits.get_mut(&Split::C2).unwrap().push(UttSpec {
                utt_id: format!("s{:03}_t{:03}", spk, t),
                speaker_idx: spk,
                text_id: t,
            });
        }
    }
    for h in 0..p.eval_speakers_per_condition {
        let spk = p.n_train_speakers + h;
        for u in 0..p.eval_utts_per_speaker {
            let t = seen_texts[(h * p.eval_utts_per_speaker + u) % seen_texts.len()];
            splits.get_mut(&Split::C3).unwrap().push(UttSpec {
                utt_id: format!("s{:03}_t{:03}", spk, t),
                speaker_idx: spk,
                text_id: t,
            });
            let th = heldout_base + (h * p.eval_utts_per_speaker + u) % p.n_heldout_texts;
            splits.get_mut(&Split::C4).unwrap().push(UttSpec {
                utt_id: format!("s{:03}_t{:03}", spk, th),
                speaker_idx: spk,
                text_id: th,
            });
        }
    }

    Ok(CorpusPlan {
        params: p,
        speakers,
        phones,
        train_texts,
        heldout_texts,
        splits,
    })
}

// ── on-disk layout ──────────────────────────────────────────────────

/// Write `<split>/<speaker_id>/<utt_id>.wav` + `.align` + `manifest.json`.
pub fn write_corpus(plan: &CorpusPlan, root: impl AsRef<Path>) -> Result<(), CorpusError> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    for (split, specs) in &plan.splits {
        for spec in specs {
            let utt = plan.render_utt(spec)?;
            let dir = root
                .join(split.dir_name())
                .join(format!("{:03}", spec.speaker_idx));
            fs::create_dir_all(&dir)?;
            wav::write_wav(&utt.audio, dir.join(format!("{}.wav", spec.utt_id)))?;
            fs::write(
                dir.join(format!("{}.align", spec.utt_id)),
                format_align(&utt.alignment),
            )?;
        }
    }
    let manifest = serde_json::to_string_pretty(plan)
        .map_err(|e| CorpusError::Manifest(e.to_string()))?;
    fs::write(root.join("manifest.json"), manifest)?;
    Ok(())
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<CorpusPlan, CorpusError> {
    let text = fs::read_to_string(root.as_ref().join("manifest.json"))?;
    parse_manifest(&text)
}

/// Parse and sanity-check a manifest document.
pub fn parse_manifest(text: &str) -> Result<CorpusPlan, CorpusError> {
    let plan: CorpusPlan =
        serde_json::from_str(text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    let n_texts = plan.train_texts.len() + plan.heldout_texts.len();
    for (split, specs) in &plan.splits {
        for spec in specs {
            if spec.speaker_idx >= plan.speakers.len() {
                return Err(CorpusError::Manifest(format!(
                    "{split}: speaker index {} out of range",
                    spec.speaker_idx
                )));
            }
            if spec.text_id >= n_texts {
                return Err(CorpusError::Manifest(format!(
                    "{split}: text id {} out of range",
                    spec.text_id
                )));
            }
        }
    }
    for text in plan.train_texts.iter().chain(&plan.heldout_texts) {
        if text.iter().any(|&p| p >= plan.phones.len()) {
            return Err(CorpusError::Manifest("text references unknown phone".into()));
        }
    }
    if plan.params.sample_rate == 0 {
        return Err(CorpusError::Manifest("zero sample rate".into()));
    }
    Ok(plan)
}

pub fn format_align(alignment: &[AlignEntry]) -> String {
    let mut out = String::new();
    for e in alignment {
        out.push_str(&format!("{} {:.4} {:.4}\n", e.phone, e.onset_ms, e.offset_ms));
    }
    out
}

/// Parse an `.align` file: `phone onset_ms offset_ms` per line. Offsets
/// must be positive-length and non-overlapping in order.
pub fn parse_align(text: &str) -> Result<Vec<AlignEntry>, CorpusError> {
    let mut out = Vec::new();
    let mut prev_end = 0.0f64;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let phone = it
            .next()
            .ok_or_else(|| CorpusError::Align(format!("line {}: empty", lineno + 1)))?;
        let onset: f64 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CorpusError::Align(format!("line {}: bad onset", lineno + 1)))?;
        let offset: f64 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CorpusError::Align(format!("line {}: bad offset", lineno + 1)))?;
        if it.next().is_some() {
            return Err(CorpusError::Align(format!(
                "line {}: trailing fields",
                lineno + 1
            )));
        }
        if !onset.is_finite() || !offset.is_finite() || offset <= onset || onset < prev_end - 1e-9 {
            return Err(CorpusError::Align(format!(
                "line {}: non-monotone segment {onset}..{offset}",
                lineno + 1
            )));
        }
        prev_end = offset;
        out.push(AlignEntry {
            phone: phone.to_string(),
            onset_ms: onset,
            offset_ms: offset,
        });
    }
    Ok(out)
}

// ── oracle features ─────────────────────────────────────────────────

/// Cascaded one-pole low-passes; isolates the pitch band under the
/// frame-rate pattern grid before autocorrelation.
fn low_pass(samples: &[f64], rate: u32, cutoff_hz: f64, poles: usize) -> Vec<f64> {
    let a = (-2.0 * PI * cutoff_hz / rate as f64).exp();
    let mut out = samples.to_vec();
    for _ in 0..poles {
        let mut y = 0.0;
        for v in &mut out {
            y = a * y + (1.0 - a) * *v;
            *v = y;
        }
    }
    out
}

/// Autocorrelation pitch estimate with parabolic refinement, searching
/// `lo..hi` Hz.
///
/// The phone carrier is 64-sample periodic by construction, so a 64-lag
/// comb differencer cancels it exactly and leaves the speaker
/// fundamental. A speaker whose pitch itself is frame-periodic survives
/// the cancellation check and is measured on the raw signal instead,
/// where the whole waveform shares that period.
pub fn estimate_f0(samples: &[f64], rate: u32, lo: f64, hi: f64) -> Option<f64> {
    let raw_energy: f64 = samples.iter().map(|v| v * v).sum();
    let comb: Vec<f64> = if samples.len() > 64 {
        samples[64..]
            .iter()
            .zip(samples)
            .map(|(a, b)| a - b)
            .collect()
    } else {
        samples.to_vec()
    };
    let comb_energy: f64 = comb.iter().map(|v| v * v).sum();
    let filtered = if raw_energy > 0.0 && comb_energy > 1e-6 * raw_energy {
        low_pass(&comb, rate, 360.0, 2)
    } else {
        samples.to_vec()
    };
    let min_lag = (rate as f64 / hi).floor() as usize;
    let max_lag = (rate as f64 / lo).ceil() as usize;
    // drop the filter warm-up region
    let skip = max_lag.min(filtered.len() / 4);
    let samples = &filtered[skip..];
    let n = samples.len();
    if n < 2 * max_lag || min_lag < 2 {
        return None;
    }
    let energy: f64 = samples.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return None;
    }
    let mut corr = vec![0.0; max_lag + 2];
    let mut global_max = f64::NEG_INFINITY;
    for lag in min_lag..=max_lag + 1 {
        let mut c = 0.0;
        for t in 0..n - lag {
            c += samples[t] * samples[t + lag];
        }
        // normalize out the shrinking-overlap tilt
        let c = c / (n - lag) as f64;
        corr[lag.min(max_lag + 1)] = c;
        if lag <= max_lag && c > global_max {
            global_max = c;
        }
    }
    if !global_max.is_finite() || global_max <= 0.0 {
        return None;
    }
    // subharmonic lags peak as high as the fundamental; take the smallest
    // lag that reaches the plateau, then climb to its local maximum
    let mut best_lag = 0;
    for lag in min_lag..=max_lag {
        if corr[lag] >= 0.95 * global_max {
            best_lag = lag;
            break;
        }
    }
    if best_lag == 0 {
        return None;
    }
    while best_lag < max_lag && corr[best_lag + 1] > corr[best_lag] {
        best_lag += 1;
    }
    // parabolic interpolation around the peak
    let lag = best_lag as f64;
    let refined = if best_lag > min_lag && best_lag < max_lag {
        let (a, b, c) = (corr[best_lag - 1], corr[best_lag], corr[best_lag + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            lag + 0.5 * (a - c) / denom
        } else {
            lag
        }
    } else {
        lag
    };
    Some(rate as f64 / refined)
}

/// Goertzel magnitude of one frequency.
fn goertzel(samples: &[f64], rate: u32, freq: f64) -> f64 {
    let w = 2.0 * PI * freq / rate as f64;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &x in samples {
        let s0 = x + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    (s1 * s1 + s2 * s2 - coeff * s1 * s2).sqrt()
}

/// Spectral tilt oracle: slope of log-magnitude against log-frequency
/// over the phone-carrier grid harmonics (negated, so larger = steeper
/// rolloff = larger profile tilt).
pub fn estimate_tilt(samples: &[f64], rate: u32) -> f64 {
    let grid = pattern_grid_hz(rate);
    let top = (3800.0f64.min(rate as f64 / 2.0 - 200.0) / grid).floor() as usize;
    let hs: Vec<usize> = (2..=top).collect();
    if hs.len() < 3 {
        return 0.0;
    }
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .map(|&h| {
            let freq = h as f64 * grid;
            let mag = goertzel(samples, rate, freq).max(1e-12);
            ((freq / 500.0).max(1.0).ln(), mag.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    -slope
}

/// Oracle per-utterance features: f0 and tilt measured on the longest
/// voiced phone segment, using the exact alignment.
pub fn oracle_features(
    utt: &Utterance,
    phones: &[PhoneTemplate],
) -> Option<(f64, f64)> {
    let rate = utt.audio.sample_rate;
    let voiced: std::collections::HashSet<&str> = phones
        .iter()
        .filter(|p| p.voiced)
        .map(|p| p.id.as_str())
        .collect();
    let seg = utt
        .alignment
        .iter()
        .filter(|a| voiced.contains(a.phone.as_str()))
        .max_by(|a, b| {
            let da = a.offset_ms - a.onset_ms;
            let db = b.offset_ms - b.onset_ms;
            da.partial_cmp(&db).unwrap()
        })?;
    let mut s = (seg.onset_ms * rate as f64 / 1000.0).round() as usize;
    let mut e = (seg.offset_ms * rate as f64 / 1000.0).round() as usize;
    e = e.min(utt.audio.samples.len());
    // trim the onset/offset ramps so the comb cancellation stays clean
    let trim = (rate as f64 * 0.008) as usize;
    if e - s > 2 * trim + (rate as usize / 100) {
        s += trim;
        e -= trim;
    }
    let samples = &utt.audio.samples[s..e];
    let f0 = estimate_f0(samples, rate, 60.0, 340.0)?;
    let tilt = estimate_tilt(samples, rate);
    Some((f0, tilt))
}

/// Nearest profile by (f0, tilt); f0 dominates since its estimate is
/// sub-Hz accurate while tilt is a coarse tie-breaker.
pub fn nearest_profile(features: (f64, f64), profiles: &[SpeakerProfile]) -> usize {
    let (f0, tilt) = features;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in profiles.iter().enumerate() {
        let df = f0 - p.f0;
        let dt = (tilt - p.tilt) / 4.0;
        let d = df * df + dt * dt;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
