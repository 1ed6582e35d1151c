//! Command implementations behind the `dualvq` binary: corpus generation,
//! training, evaluation over the four conditions, the diarization and
//! phone-recognition tasks, and report rendering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{self, AlignEntry, CorpusPlan, Split, UttSpec};
use crate::model::{Model, Variant};
use crate::report::{
    self, ConditionReport, DiarizationConditionReport, DiarizationFileReport, EvalReport,
};
use crate::tasks::{
    self, build_reference_codes, der, diarize, extract_codes, format_code_lines, format_rttm,
    nmi_and_purity, parse_rttm, per, recognize_phones, speaker_similarity, CodeSequence,
    DiarizationSegment, PerReport,
};
use crate::training::{self, TrainData, TrainItem, TrainReport};
use crate::vq::codebook_stats;
use crate::wav::{self, AudioSignal};

pub const CHECKPOINT_FILE: &str = "checkpoint.dvq";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

pub struct LoadedUtt {
    pub spec: UttSpec,
    pub audio: AudioSignal,
    pub alignment: Vec<AlignEntry>,
}

/// Read one split's audio and alignments back from the corpus directory.
pub fn load_split(root: &Path, plan: &CorpusPlan, split: Split) -> Result<Vec<LoadedUtt>> {
    let mut out = Vec::new();
    for spec in &plan.splits[&split] {
        let dir = root
            .join(split.dir_name())
            .join(format!("{:03}", spec.speaker_idx));
        let audio = wav::read_wav(dir.join(format!("{}.wav", spec.utt_id)))
            .with_context(|| format!("reading {}/{}", split, spec.utt_id))?;
        let align_text = fs::read_to_string(dir.join(format!("{}.align", spec.utt_id)))?;
        let alignment = corpus::parse_align(&align_text)?;
        out.push(LoadedUtt {
            spec: spec.clone(),
            audio,
            alignment,
        });
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ── gen-corpus ──────────────────────────────────────────────────────

pub fn cmd_gen_corpus(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.corpus_dir();
    let plan = corpus::build_corpus(&config.corpus.params)?;
    corpus::write_corpus(&plan, &dir)?;
    let n: usize = plan.splits.values().map(|s| s.len()).sum();
    println!(
        "corpus: {} utterances over {} splits at {}",
        n,
        plan.splits.len(),
        dir.display()
    );
    Ok(dir)
}

// ── train ───────────────────────────────────────────────────────────

fn load_train_data(root: &Path, plan: &CorpusPlan) -> Result<TrainData> {
    let to_items = |utts: Vec<LoadedUtt>| -> Vec<TrainItem> {
        utts.into_iter()
            .map(|u| TrainItem {
                samples: u.audio.samples,
                speaker: u.spec.speaker_idx,
            })
            .collect()
    };
    Ok(TrainData {
        train: to_items(load_split(root, plan, Split::Train)?),
        val: to_items(load_split(root, plan, Split::Val)?),
        sample_rate: plan.params.sample_rate,
    })
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<PathBuf> {
    let corpus_dir = config.corpus_dir();
    let plan = corpus::read_manifest(&corpus_dir)
        .with_context(|| format!("loading corpus manifest from {}", corpus_dir.display()))?;
    let data = load_train_data(&corpus_dir, &plan)?;
    let out_dir = config.output_dir();
    fs::create_dir_all(&out_dir)?;

    let (ckpt, report) = if let Some(from) = &config.training.freeze_fine_tune_from {
        let init = Checkpoint::read(ExperimentConfig::rooted(from))
            .with_context(|| format!("loading fine-tune checkpoint {}", from.display()))?;
        let opts = config.training.to_train_options(init.config.variant)?;
        println!(
            "fine-tuning {} with speaker components frozen ({} steps)",
            init.config.variant, opts.steps
        );
        training::freeze_fine_tune(&init, &data, &opts)?
    } else {
        let model_cfg = config
            .model
            .to_model_config(plan.params.n_train_speakers, plan.params.sample_rate);
        let opts = config.training.to_train_options(model_cfg.variant)?;
        let model = match &config.training.warm_start {
            Some(base_path) if model_cfg.variant.has_global() => {
                let base = Checkpoint::read(ExperimentConfig::rooted(base_path))
                    .with_context(|| format!("loading base checkpoint {}", base_path.display()))?;
                println!("warm-starting {} from {}", model_cfg.variant, base_path.display());
                training::warm_start(&base, &model_cfg, config.model.seed)?.model()?
            }
            Some(_) => bail!("warm start is only meaningful for dual-encoder variants"),
            None => Model::new(model_cfg.clone(), config.model.seed)?,
        };
        println!("training {} for {} steps", model_cfg.variant, opts.steps);
        training::train(model, &data, &opts)?
    };

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    ckpt.write(&ckpt_path)?;
    write_json(&out_dir.join(TRAIN_REPORT_FILE), &report)?;
    if let Some((_, last_val)) = report.val.last() {
        println!(
            "best step {} of {}; final val total {:.6}",
            report.best_step,
            report.steps.len(),
            last_val.total
        );
    }
    Ok(ckpt_path)
}

// ── eval ────────────────────────────────────────────────────────────

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

struct CondAccum {
    mse_sum: f64,
    sim_sum: f64,
    sim_n: usize,
    local_codes: Vec<usize>,
    phone_labels: Vec<usize>,
    speaker_labels: Vec<usize>,
    global_pairs: Vec<(usize, usize)>,
    n: usize,
}

fn evaluate_condition(
    model: &Model,
    plan: &CorpusPlan,
    utts: &[LoadedUtt],
    phone_index: &BTreeMap<String, usize>,
) -> Result<(ConditionReport, Vec<u64>, Option<Vec<u64>>)> {
    let mut acc = CondAccum {
        mse_sum: 0.0,
        sim_sum: 0.0,
        sim_n: 0,
        local_codes: Vec::new(),
        phone_labels: Vec::new(),
        speaker_labels: Vec::new(),
        global_pairs: Vec::new(),
        n: 0,
    };
    let unk = phone_index.len();
    for utt in utts {
        let ex = extract_codes(model, &utt.spec.utt_id, &utt.audio)?;
        let base_speaker = if model.config.variant == Variant::Base
            && plan.is_train_speaker(utt.spec.speaker_idx)
        {
            Some(utt.spec.speaker_idx)
        } else {
            None
        };
        let recon = model.reconstruct(&utt.audio, base_speaker)?;
        acc.mse_sum += mse(&utt.audio.samples, &recon.samples);
        if model.config.variant.has_global() {
            acc.sim_sum += speaker_similarity(model, &utt.audio, &recon)?;
            acc.sim_n += 1;
        }
        let labels = tasks::frame_phone_labels(&utt.alignment, ex.local.codes.len(), ex.local.frame_ms);
        for (code, label) in ex.local.codes.iter().zip(&labels) {
            acc.local_codes.push(*code);
            acc.phone_labels.push(*phone_index.get(label).unwrap_or(&unk));
            acc.speaker_labels.push(utt.spec.speaker_idx);
        }
        if let Some(g) = ex.global {
            acc.global_pairs.push((g, utt.spec.speaker_idx));
        }
        acc.n += 1;
    }

    let local_stats = codebook_stats(&acc.local_codes, model.config.local_k)?;
    let (lp_nmi, lp_pur) = nmi_and_purity(&acc.local_codes, &acc.phone_labels)?;
    let (ls_nmi, ls_pur) = nmi_and_purity(&acc.local_codes, &acc.speaker_labels)?;

    let mut global_hist = None;
    let mut global_used = None;
    let mut global_perp = None;
    let mut gs_nmi = None;
    let mut gs_pur = None;
    if !acc.global_pairs.is_empty() {
        let codes: Vec<usize> = acc.global_pairs.iter().map(|p| p.0).collect();
        let speakers: Vec<usize> = acc.global_pairs.iter().map(|p| p.1).collect();
        let stats = codebook_stats(&codes, model.config.global_k)?;
        let (nmi, pur) = nmi_and_purity(&codes, &speakers)?;
        global_used = Some(stats.used as f64);
        global_perp = Some(stats.perplexity);
        gs_nmi = Some(nmi);
        gs_pur = Some(pur);
        global_hist = Some(stats.histogram);
    }

    let report = ConditionReport {
        n_utterances: acc.n,
        reconstruction_mse: acc.mse_sum / acc.n.max(1) as f64,
        speaker_similarity: (acc.sim_n > 0).then(|| acc.sim_sum / acc.sim_n as f64),
        local_codes_used: local_stats.used as f64,
        local_perplexity: local_stats.perplexity,
        global_codes_used: global_used,
        global_perplexity: global_perp,
        local_phone_nmi: lp_nmi,
        local_phone_purity: lp_pur,
        local_speaker_nmi: ls_nmi,
        local_speaker_purity: ls_pur,
        global_speaker_nmi: gs_nmi,
        global_speaker_purity: gs_pur,
    };
    Ok((report, local_stats.histogram, global_hist))
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct UsageReport {
    pub local: Vec<u64>,
    pub global: Option<Vec<u64>>,
}

pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    let corpus_dir = config.corpus_dir();
    let plan = corpus::read_manifest(&corpus_dir)?;
    let ckpt = Checkpoint::read(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let model = ckpt.model()?;
    let out_dir = config.output_dir();
    fs::create_dir_all(&out_dir)?;

    let phone_index: BTreeMap<String, usize> = plan
        .phones
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.clone(), i))
        .collect();

    let mut eval: EvalReport = EvalReport::new();
    let mut local_hist = vec![0u64; model.config.local_k];
    let mut global_hist = model
        .config
        .variant
        .has_global()
        .then(|| vec![0u64; model.config.global_k]);
    for split in Split::CONDITIONS {
        let utts = load_split(&corpus_dir, &plan, split)?;
        let (cond, lh, gh) = evaluate_condition(&model, &plan, &utts, &phone_index)?;
        for (a, b) in local_hist.iter_mut().zip(&lh) {
            *a += b;
        }
        if let (Some(acc), Some(gh)) = (global_hist.as_mut(), gh) {
            for (a, b) in acc.iter_mut().zip(&gh) {
                *a += b;
            }
        }
        eval.insert(split.dir_name().to_string(), cond);
    }
    let avg = ConditionReport::average(&eval.values().collect::<Vec<_>>());
    eval.insert("Avg".to_string(), avg);

    write_json(&out_dir.join("eval_report.json"), &eval)?;
    fs::write(out_dir.join("eval_report.csv"), report::eval_report_csv(&eval))?;
    write_json(
        &out_dir.join("usage.json"),
        &UsageReport {
            local: local_hist,
            global: global_hist,
        },
    )?;
    println!(
        "eval: wrote {} (avg reconstruction mse {:.6})",
        out_dir.join("eval_report.json").display(),
        eval["Avg"].reconstruction_mse
    );
    Ok(out_dir.join("eval_report.json"))
}

// ── diarize ─────────────────────────────────────────────────────────

fn concat_audio(utts: &[&LoadedUtt]) -> AudioSignal {
    let rate = utts[0].audio.sample_rate;
    let mut samples = Vec::new();
    for u in utts {
        samples.extend_from_slice(&u.audio.samples);
    }
    AudioSignal::new(samples, rate)
}

/// Build the two-speaker, three-turn files for one condition and score
/// them against their construction-time references.
fn diarize_condition(
    model: &Model,
    split: Split,
    utts: &[LoadedUtt],
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<DiarizationConditionReport> {
    let mut by_speaker: BTreeMap<usize, Vec<&LoadedUtt>> = BTreeMap::new();
    for u in utts {
        by_speaker.entry(u.spec.speaker_idx).or_default().push(u);
    }
    for v in by_speaker.values_mut() {
        v.sort_by(|a, b| a.spec.utt_id.cmp(&b.spec.utt_id));
    }
    let speakers: Vec<usize> = by_speaker.keys().copied().collect();
    if speakers.len() < 2 {
        bail!("{split}: diarization needs at least 2 speakers");
    }
    let enroll_n = config.eval.enrollment_utts.max(1);
    let window = config.eval.diarization_window_s;
    let overlap = config.eval.diarization_overlap_s;

    let mut files = Vec::new();
    for i in 0..config.eval.diarization_files_per_condition {
        let a = speakers[(2 * i) % speakers.len()];
        let b = speakers[(2 * i + 1) % speakers.len()];
        if a == b {
            continue;
        }
        let (a_name, b_name) = (format!("s{a:03}"), format!("s{b:03}"));
        let a_utts = &by_speaker[&a];
        let b_utts = &by_speaker[&b];
        if a_utts.len() <= enroll_n || b_utts.len() <= enroll_n {
            bail!("{split}: not enough utterances per speaker for enrollment plus turns");
        }
        let enrollment: BTreeMap<String, Vec<AudioSignal>> = [
            (
                a_name.clone(),
                a_utts[..enroll_n].iter().map(|u| u.audio.clone()).collect(),
            ),
            (
                b_name.clone(),
                b_utts[..enroll_n].iter().map(|u| u.audio.clone()).collect(),
            ),
        ]
        .into_iter()
        .collect();

        // A | B | A turns from the non-enrollment material
        let a_mat = &a_utts[enroll_n..];
        let b_mat = &b_utts[enroll_n..];
        let half = (a_mat.len() / 2).max(1);
        let b_take = half.min(b_mat.len());
        let turns: Vec<(String, Vec<&LoadedUtt>)> = vec![
            (a_name.clone(), a_mat[..half].to_vec()),
            (b_name.clone(), b_mat[..b_take].to_vec()),
            (a_name.clone(), a_mat[half..].to_vec()),
        ];
        let file_id = format!("{split}_f{i:02}_{a_name}_{b_name}");
        let mut reference = Vec::new();
        let mut all: Vec<&LoadedUtt> = Vec::new();
        let mut t = 0.0;
        for (speaker, turn) in &turns {
            if turn.is_empty() {
                continue;
            }
            let dur: f64 = turn
                .iter()
                .map(|u| u.audio.len() as f64 / u.audio.sample_rate as f64)
                .sum();
            reference.push(DiarizationSegment {
                file_id: file_id.clone(),
                onset: t,
                duration: dur,
                speaker: speaker.clone(),
            });
            t += dur;
            all.extend(turn.iter().copied());
        }
        let audio = concat_audio(&all);
        wav::write_wav(&audio, out_dir.join(format!("{file_id}.wav")))?;
        fs::write(
            out_dir.join(format!("{file_id}.ref.rttm")),
            format_rttm(&reference),
        )?;

        let refs = build_reference_codes(model, &enrollment, window, overlap)?;
        let hyp = diarize(
            model,
            &file_id,
            &audio,
            &refs,
            window,
            overlap,
            config.eval.seed.wrapping_add(i as u64),
        )?;
        fs::write(out_dir.join(format!("{file_id}.rttm")), format_rttm(&hyp))?;
        let scored: f64 = reference.iter().map(|s| s.duration).sum();
        files.push(DiarizationFileReport {
            file_id,
            report: der(&hyp, &reference),
            scored_time: scored,
        });
    }
    Ok(DiarizationConditionReport::from_files(files))
}

pub fn cmd_diarize(config: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    let corpus_dir = config.corpus_dir();
    let plan = corpus::read_manifest(&corpus_dir)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = ckpt.model()?;
    if !model.config.variant.has_global() {
        bail!("diarization needs a dual-encoder variant with a speaker codebook");
    }
    let out_dir = config.output_dir().join("diarization");
    fs::create_dir_all(&out_dir)?;

    let mut report: BTreeMap<String, DiarizationConditionReport> = BTreeMap::new();
    for split in Split::CONDITIONS {
        let utts = load_split(&corpus_dir, &plan, split)?;
        let cond = diarize_condition(&model, split, &utts, config, &out_dir)?;
        report.insert(split.dir_name().to_string(), cond);
    }
    let avg = DiarizationConditionReport {
        false_alarm: report.values().map(|r| r.false_alarm).sum::<f64>() / 4.0,
        miss: report.values().map(|r| r.miss).sum::<f64>() / 4.0,
        speaker_error: report.values().map(|r| r.speaker_error).sum::<f64>() / 4.0,
        der: report.values().map(|r| r.der).sum::<f64>() / 4.0,
        files: Vec::new(),
    };
    report.insert("Avg".to_string(), avg);
    let path = config.output_dir().join("diarization_report.json");
    write_json(&path, &report)?;
    fs::write(
        config.output_dir().join("diarization_report.csv"),
        report::der_report_csv(&report),
    )?;
    println!("diarize: avg DER {:.4}", report["Avg"].der);
    Ok(path)
}

// ── recognize ───────────────────────────────────────────────────────

pub fn cmd_recognize(config: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    let corpus_dir = config.corpus_dir();
    let plan = corpus::read_manifest(&corpus_dir)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = ckpt.model()?;
    let out_dir = config.output_dir().join("recognition");
    fs::create_dir_all(&out_dir)?;

    // majority code->phone map from the training half
    let train = load_split(&corpus_dir, &plan, Split::Train)?;
    let mut pairs = Vec::new();
    let mut train_seqs = Vec::new();
    for u in &train {
        let ex = extract_codes(&model, &u.spec.utt_id, &u.audio)?;
        train_seqs.push(ex.local.clone());
        pairs.push((ex.local, u.alignment.clone()));
    }
    let map = tasks::build_code_to_phone_map(&pairs, model.config.local_k)?;
    fs::write(
        out_dir.join("codes_train.txt"),
        format_code_lines(&train_seqs),
    )?;
    write_json(&out_dir.join("code_to_phone.json"), &map)?;

    let mut report: BTreeMap<String, PerReport> = BTreeMap::new();
    for split in Split::CONDITIONS {
        let utts = load_split(&corpus_dir, &plan, split)?;
        let mut seqs: Vec<CodeSequence> = Vec::new();
        let mut reports = Vec::new();
        for u in &utts {
            let ex = extract_codes(&model, &u.spec.utt_id, &u.audio)?;
            let hyp = recognize_phones(&ex.local.codes, &map);
            let reference = plan.phone_names(u.spec.text_id);
            reports.push(per(&hyp, &reference)?);
            seqs.push(ex.local);
        }
        fs::write(
            out_dir.join(format!("codes_{split}.txt")),
            format_code_lines(&seqs),
        )?;
        report.insert(split.dir_name().to_string(), PerReport::merge(&reports));
    }
    // percentage fields average arithmetically; counts accumulate
    let conds: Vec<PerReport> = report.values().copied().collect();
    let mut avg = PerReport::merge(&conds);
    avg.sub = conds.iter().map(|r| r.sub).sum::<f64>() / 4.0;
    avg.ins = conds.iter().map(|r| r.ins).sum::<f64>() / 4.0;
    avg.del = conds.iter().map(|r| r.del).sum::<f64>() / 4.0;
    avg.total = conds.iter().map(|r| r.total).sum::<f64>() / 4.0;
    report.insert("Avg".to_string(), avg);

    let path = config.output_dir().join("per_report.json");
    write_json(&path, &report)?;
    fs::write(
        config.output_dir().join("per_report.csv"),
        report::per_report_csv(&report),
    )?;
    println!("recognize: avg PER {:.2}%", report["Avg"].total);
    Ok(path)
}

// ── report ──────────────────────────────────────────────────────────

pub fn cmd_report(config: &ExperimentConfig) -> Result<()> {
    let out_dir = config.output_dir();
    let mut wrote = Vec::new();

    let train_path = out_dir.join(TRAIN_REPORT_FILE);
    if train_path.exists() {
        let report: TrainReport = serde_json::from_str(&fs::read_to_string(&train_path)?)?;
        let svg = report::loss_curve_svg(&report);
        fs::write(out_dir.join("loss_curve.svg"), svg)?;
        wrote.push("loss_curve.svg".to_string());
    }

    let usage_path = out_dir.join("usage.json");
    if usage_path.exists() {
        let usage: UsageReport = serde_json::from_str(&fs::read_to_string(&usage_path)?)?;
        fs::write(
            out_dir.join("code_usage_local.svg"),
            report::usage_histogram_svg("sub-phone codebook", &usage.local),
        )?;
        wrote.push("code_usage_local.svg".to_string());
        if let Some(global) = &usage.global {
            fs::write(
                out_dir.join("code_usage_global.svg"),
                report::usage_histogram_svg("speaker codebook", global),
            )?;
            wrote.push("code_usage_global.svg".to_string());
        }
    }

    let eval_path = out_dir.join("eval_report.json");
    if eval_path.exists() {
        let eval: EvalReport = serde_json::from_str(&fs::read_to_string(&eval_path)?)?;
        fs::write(out_dir.join("eval_report.csv"), report::eval_report_csv(&eval))?;
        wrote.push("eval_report.csv".to_string());
    }

    let dia_dir = out_dir.join("diarization");
    if dia_dir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dia_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
            if let Some(stem) = name.strip_suffix(".ref.rttm") {
                let hyp_path = dia_dir.join(format!("{stem}.rttm"));
                if !hyp_path.exists() {
                    continue;
                }
                let reference = parse_rttm(&fs::read_to_string(&path)?)?;
                let hyp = parse_rttm(&fs::read_to_string(&hyp_path)?)?;
                let svg = report::diarization_timeline_svg(stem, &hyp, &reference);
                fs::write(dia_dir.join(format!("{stem}.svg")), svg)?;
                wrote.push(format!("diarization/{stem}.svg"));
            }
        }
    }

    if wrote.is_empty() {
        println!("report: nothing to render in {}", out_dir.display());
    } else {
        println!("report: wrote {}", wrote.join(", "));
    }
    Ok(())
}
