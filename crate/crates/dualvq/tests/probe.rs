// temporary diagnostics, deleted before release
use dualvq::corpus::{self, CorpusParams, Split};
use dualvq::model::{Model, ModelConfig, Variant};
use dualvq::numerics::Graph;
use dualvq::training::{train, TrainData, TrainItem, TrainOptions};
use dualvq::vq;

#[test]
#[ignore]
fn probe_ze_geometry() {
    let params = CorpusParams {
        n_train_speakers: 6,
        n_heldout_speakers: 2,
        n_train_texts: 14,
        n_heldout_texts: 6,
        train_utts_per_speaker: 5,
        val_utts_per_speaker: 1,
        eval_speakers_per_condition: 2,
        eval_utts_per_speaker: 5,
        text_len: (4, 6),
        sample_rate: 16000,
        seed: 3,
    };
    let plan = corpus::build_corpus(&params).unwrap();
    let cfg = ModelConfig {
        variant: Variant::Base,
        n_speakers: 6,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone(), 0).unwrap();
    let utt = plan.render_utt(&plan.splits[&Split::Train][0]).unwrap();

    let stats = |model: &Model, label: &str| {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let frames = model.encode_local(&mut g, &b, &utt.audio.samples).unwrap();
        let v = g.value(frames);
        let n = v.rows();
        let d = v.cols();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += v.row(i)[j] / n as f64;
            }
        }
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..d {
                let x = v.row(i)[j] - mean[j];
                var += x * x;
            }
        }
        let spread = (var / (n * d) as f64).sqrt();
        let norm: f64 = (mean.iter().map(|m| m * m).sum::<f64>() / d as f64).sqrt();
        let cb = model.local_codebook();
        let cbnorm = (cb.entries().data().iter().map(|x| x * x).sum::<f64>()
            / cb.entries().numel() as f64)
            .sqrt();
        let idx = vq::nearest_indices(v, &cb).unwrap();
        let distinct: std::collections::BTreeSet<usize> = idx.iter().copied().collect();
        println!(
            "{label}: ze spread {spread:.4} mean-norm {norm:.4} cb rms {cbnorm:.4} distinct codes {}/{} frames",
            distinct.len(),
            idx.len()
        );
    };
    stats(&model, "init");

    let mut train_items = Vec::new();
    let mut val_items = Vec::new();
    for spec in &plan.splits[&Split::Train] {
        let u = plan.render_utt(spec).unwrap();
        train_items.push(TrainItem { samples: u.audio.samples, speaker: spec.speaker_idx });
    }
    for spec in &plan.splits[&Split::Val] {
        let u = plan.render_utt(spec).unwrap();
        val_items.push(TrainItem { samples: u.audio.samples, speaker: spec.speaker_idx });
    }
    let data = TrainData { train: train_items, val: val_items, sample_rate: 16000 };
    let mut opts = TrainOptions::default_for(Variant::Base);
    opts.steps = 300;
    opts.batch_size = 4;
    opts.val_every = 100;
    let (ckpt, report) = train(model, &data, &opts).unwrap();
    println!(
        "loss first {:.5} last {:.5} (l_r {:.5} -> {:.5}, l_c {:.5} -> {:.5})",
        report.steps.first().unwrap().total,
        report.steps.last().unwrap().total,
        report.steps.first().unwrap().l_r,
        report.steps.last().unwrap().l_r,
        report.steps.first().unwrap().l_c_l,
        report.steps.last().unwrap().l_c_l,
    );
    stats(&ckpt.model().unwrap(), "after 300 steps");
}

#[test]
#[ignore]
fn probe_f0_oracle_all_speakers() {
    let phones = corpus::default_phone_inventory();
    let mut worst = 0.0f64;
    for seed in 0..46u64 {
        let spk = corpus::make_speaker(seed);
        for p in phones.iter().filter(|p| p.voiced) {
            let utt = corpus::make_utterance(&spk, &[p, p], 16000).unwrap();
            let (f0, _) = corpus::oracle_features(&utt, &phones).unwrap();
            let err = (f0 - spk.f0).abs();
            if err > worst {
                worst = err;
            }
            assert!(err < 2.0, "seed {seed} phone {} err {err:.3}", p.id);
        }
    }
    println!("worst f0 error {worst:.4} Hz");
}
