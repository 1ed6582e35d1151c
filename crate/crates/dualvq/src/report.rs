//! Report structures and rendering: per-condition eval metrics, CSV
//! tables, and the SVG plots (loss curves, code-usage histograms,
//! diarization timelines). All output is deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tasks::{DerReport, DiarizationSegment, PerReport};
use crate::training::TrainReport;

/// Per-condition evaluation metrics. Option fields exist only for dual
/// variants (the base system has no global encoder).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub n_utterances: usize,
    pub reconstruction_mse: f64,
    pub speaker_similarity: Option<f64>,
    pub local_codes_used: f64,
    pub local_perplexity: f64,
    pub global_codes_used: Option<f64>,
    pub global_perplexity: Option<f64>,
    pub local_phone_nmi: f64,
    pub local_phone_purity: f64,
    pub local_speaker_nmi: f64,
    pub local_speaker_purity: f64,
    pub global_speaker_nmi: Option<f64>,
    pub global_speaker_purity: Option<f64>,
}

impl ConditionReport {
    fn metric_values(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("n_utterances", Some(self.n_utterances as f64)),
            ("reconstruction_mse", Some(self.reconstruction_mse)),
            ("speaker_similarity", self.speaker_similarity),
            ("local_codes_used", Some(self.local_codes_used)),
            ("local_perplexity", Some(self.local_perplexity)),
            ("global_codes_used", self.global_codes_used),
            ("global_perplexity", self.global_perplexity),
            ("local_phone_nmi", Some(self.local_phone_nmi)),
            ("local_phone_purity", Some(self.local_phone_purity)),
            ("local_speaker_nmi", Some(self.local_speaker_nmi)),
            ("local_speaker_purity", Some(self.local_speaker_purity)),
            ("global_speaker_nmi", self.global_speaker_nmi),
            ("global_speaker_purity", self.global_speaker_purity),
        ]
    }

    /// Field-wise arithmetic mean; an Option field averages only when
    /// present everywhere.
    pub fn average(reports: &[&ConditionReport]) -> ConditionReport {
        let n = reports.len() as f64;
        let mean = |get: &dyn Fn(&ConditionReport) -> f64| {
            reports.iter().map(|r| get(r)).sum::<f64>() / n
        };
        let mean_opt = |get: &dyn Fn(&ConditionReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| get(r)).collect();
            if vals.len() == reports.len() {
                Some(vals.iter().sum::<f64>() / n)
            } else {
                None
            }
        };
        ConditionReport {
            n_utterances: reports.iter().map(|r| r.n_utterances).sum(),
            reconstruction_mse: mean(&|r| r.reconstruction_mse),
            speaker_similarity: mean_opt(&|r| r.speaker_similarity),
            local_codes_used: mean(&|r| r.local_codes_used),
            local_perplexity: mean(&|r| r.local_perplexity),
            global_codes_used: mean_opt(&|r| r.global_codes_used),
            global_perplexity: mean_opt(&|r| r.global_perplexity),
            local_phone_nmi: mean(&|r| r.local_phone_nmi),
            local_phone_purity: mean(&|r| r.local_phone_purity),
            local_speaker_nmi: mean(&|r| r.local_speaker_nmi),
            local_speaker_purity: mean(&|r| r.local_speaker_purity),
            global_speaker_nmi: mean_opt(&|r| r.global_speaker_nmi),
            global_speaker_purity: mean_opt(&|r| r.global_speaker_purity),
        }
    }
}

/// The eval report: exactly the keys C1..C4 plus Avg.
pub type EvalReport = BTreeMap<String, ConditionReport>;

pub fn eval_report_csv(report: &EvalReport) -> String {
    let cols = ["C1", "C2", "C3", "C4", "Avg"];
    let mut out = String::from("metric");
    for c in cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    let metrics: Vec<&'static str> = report["C1"].metric_values().iter().map(|m| m.0).collect();
    for (mi, name) in metrics.iter().enumerate() {
        out.push_str(name);
        for c in cols {
            out.push(',');
            match report[c].metric_values()[mi].1 {
                Some(v) => out.push_str(&format!("{v:.6}")),
                None => out.push_str("n/a"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-condition DER decomposition plus per-file details.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiarizationConditionReport {
    pub false_alarm: f64,
    pub miss: f64,
    pub speaker_error: f64,
    pub der: f64,
    pub files: Vec<DiarizationFileReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiarizationFileReport {
    pub file_id: String,
    #[serde(flatten)]
    pub report: DerReport,
    pub scored_time: f64,
}

impl DiarizationConditionReport {
    /// Time-weighted aggregation of per-file reports.
    pub fn from_files(files: Vec<DiarizationFileReport>) -> Self {
        let total: f64 = files.iter().map(|f| f.scored_time).sum();
        let w = |get: &dyn Fn(&DerReport) -> f64| {
            if total > 0.0 {
                files.iter().map(|f| get(&f.report) * f.scored_time).sum::<f64>() / total
            } else {
                0.0
            }
        };
        Self {
            false_alarm: w(&|r| r.false_alarm),
            miss: w(&|r| r.miss),
            speaker_error: w(&|r| r.speaker_error),
            der: w(&|r| r.der),
            files,
        }
    }
}

pub fn per_report_csv(report: &BTreeMap<String, PerReport>) -> String {
    let mut out = String::from("condition,sub,ins,del,total,n_sub,n_ins,n_del,n_ref\n");
    for (cond, r) in report {
        out.push_str(&format!(
            "{cond},{:.3},{:.3},{:.3},{:.3},{},{},{},{}\n",
            r.sub, r.ins, r.del, r.total, r.n_sub, r.n_ins, r.n_del, r.n_ref
        ));
    }
    out
}

pub fn der_report_csv(report: &BTreeMap<String, DiarizationConditionReport>) -> String {
    let mut out = String::from("condition,false_alarm,miss,speaker_error,der\n");
    for (cond, r) in report {
        out.push_str(&format!(
            "{cond},{:.4},{:.4},{:.4},{:.4}\n",
            r.false_alarm, r.miss, r.speaker_error, r.der
        ));
    }
    out
}

// ── SVG rendering ───────────────────────────────────────────────────

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>\n"
        ));
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        self.body.push_str(&format!(
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{stroke}\" stroke-width=\"1\"/>\n"
        ));
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        if points.is_empty() {
            return;
        }
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        self.body.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"{fill}\"/>\n"
        ));
    }

    fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"{size:.1}\" font-family=\"monospace\">{content}</text>\n"
        ));
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Train/validation total-loss curves.
pub fn loss_curve_svg(report: &TrainReport) -> String {
    let (w, h, ml, mb) = (640.0, 360.0, 50.0, 30.0);
    let mut svg = Svg::new(w, h);
    if report.steps.is_empty() {
        svg.text(ml, h / 2.0, 12.0, "empty training curve");
        return svg.finish();
    }
    let max_step = report.steps.len() as f64;
    let totals: Vec<f64> = report.steps.iter().map(|b| b.total).collect();
    let mut max_y = totals.iter().cloned().fold(f64::MIN, f64::max);
    let mut min_y = totals.iter().cloned().fold(f64::MAX, f64::min);
    for (_, v) in &report.val {
        max_y = max_y.max(v.total);
        min_y = min_y.min(v.total);
    }
    if max_y <= min_y {
        max_y = min_y + 1.0;
    }
    let sx = |step: f64| ml + (step / max_step) * (w - ml - 10.0);
    let sy = |v: f64| (h - mb) - ((v - min_y) / (max_y - min_y)) * (h - mb - 10.0);

    svg.line(ml, h - mb, w - 10.0, h - mb, "#333");
    svg.line(ml, 10.0, ml, h - mb, "#333");
    svg.text(ml, 20.0, 11.0, &format!("total loss (min {min_y:.4}, max {max_y:.4})"));
    svg.text(w - 80.0, h - 8.0, 11.0, &format!("step {}", report.steps.len()));

    let pts: Vec<(f64, f64)> = totals
        .iter()
        .enumerate()
        .map(|(i, &v)| (sx((i + 1) as f64), sy(v)))
        .collect();
    svg.polyline(&pts, PALETTE[0]);
    for (step, b) in &report.val {
        svg.circle(sx(*step as f64), sy(b.total), 2.5, PALETTE[1]);
    }
    if report.best_step > 0 {
        let x = sx(report.best_step as f64);
        svg.line(x, 10.0, x, h - mb, "#2ca02c");
        svg.text(x + 3.0, 32.0, 10.0, &format!("best @{}", report.best_step));
    }
    svg.finish()
}

/// Bar chart of codeword usage counts.
pub fn usage_histogram_svg(title: &str, histogram: &[u64]) -> String {
    let (w, h, ml, mb) = (640.0, 240.0, 40.0, 30.0);
    let mut svg = Svg::new(w, h);
    let k = histogram.len().max(1) as f64;
    let max_c = histogram.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (w - ml - 10.0) / k;
    for (i, &c) in histogram.iter().enumerate() {
        let bh = (c as f64 / max_c) * (h - mb - 30.0);
        let color = if c == 0 { "#dddddd" } else { PALETTE[0] };
        svg.rect(ml + i as f64 * bw, h - mb - bh, (bw - 1.0).max(0.5), bh.max(0.5), color);
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    svg.text(
        ml,
        16.0,
        11.0,
        &format!("{title}: {used}/{} codewords used", histogram.len()),
    );
    svg.line(ml, h - mb, w - 10.0, h - mb, "#333");
    svg.finish()
}

/// Hypothesis vs reference speaker ribbons for one diarization file.
pub fn diarization_timeline_svg(
    file_id: &str,
    hypothesis: &[DiarizationSegment],
    reference: &[DiarizationSegment],
) -> String {
    let (w, h, ml) = (640.0, 150.0, 60.0);
    let mut svg = Svg::new(w, h);
    let end = hypothesis
        .iter()
        .chain(reference)
        .map(|s| s.onset + s.duration)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let sx = |t: f64| ml + (t / end) * (w - ml - 10.0);

    let mut colors: BTreeMap<&str, &str> = BTreeMap::new();
    for s in reference.iter().chain(hypothesis) {
        let n = colors.len();
        colors.entry(s.speaker.as_str()).or_insert(PALETTE[n % PALETTE.len()]);
    }

    svg.text(10.0, 18.0, 11.0, file_id);
    for (row, (label, segs)) in [("reference", reference), ("hypothesis", hypothesis)]
        .into_iter()
        .enumerate()
    {
        let y = 40.0 + row as f64 * 45.0;
        svg.text(10.0, y + 16.0, 10.0, label);
        for s in segs {
            svg.rect(
                sx(s.onset),
                y,
                sx(s.onset + s.duration) - sx(s.onset),
                24.0,
                colors[s.speaker.as_str()],
            );
        }
    }
    let mut x = 10.0;
    for (spk, color) in &colors {
        svg.rect(x, h - 22.0, 10.0, 10.0, color);
        svg.text(x + 14.0, h - 13.0, 10.0, spk);
        x += 90.0;
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LossBreakdown;

    fn cond(v: f64, with_global: bool) -> ConditionReport {
        ConditionReport {
            n_utterances: 2,
            reconstruction_mse: v,
            speaker_similarity: with_global.then_some(0.5 * v),
            local_codes_used: 10.0,
            local_perplexity: 5.0,
            global_codes_used: with_global.then_some(3.0),
            global_perplexity: with_global.then_some(2.0),
            local_phone_nmi: 0.4,
            local_phone_purity: 0.6,
            local_speaker_nmi: 0.2,
            local_speaker_purity: 0.3,
            global_speaker_nmi: with_global.then_some(0.9),
            global_speaker_purity: with_global.then_some(0.8),
        }
    }

    #[test]
    fn average_is_field_wise_mean() {
        let (a, b) = (cond(1.0, true), cond(3.0, true));
        let avg = ConditionReport::average(&[&a, &b]);
        assert_eq!(avg.reconstruction_mse, 2.0);
        assert_eq!(avg.speaker_similarity, Some(1.0));
        assert_eq!(avg.n_utterances, 4);
    }

    #[test]
    fn csv_has_all_conditions() {
        let mut report = EvalReport::new();
        for key in ["C1", "C2", "C3", "C4"] {
            report.insert(key.into(), cond(1.0, false));
        }
        let avg = ConditionReport::average(&report.values().collect::<Vec<_>>());
        report.insert("Avg".into(), avg);
        let csv = eval_report_csv(&report);
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "metric,C1,C2,C3,C4,Avg");
        assert!(csv.contains("speaker_similarity,n/a"));
    }

    #[test]
    fn svg_outputs_are_well_formed_and_deterministic() {
        let report = TrainReport {
            steps: vec![
                LossBreakdown {
                    l_r: 1.0,
                    l_vq_l: 0.1,
                    l_c_l: 0.1,
                    l_vq_g: 0.0,
                    l_c_g: 0.0,
                    l_spk: 0.0,
                    l_adv: 0.0,
                    alpha: 1.0,
                    beta: 0.25,
                    total: 1.125,
                };
                20
            ],
            val: vec![(10, LossBreakdown {
                l_r: 0.9,
                l_vq_l: 0.1,
                l_c_l: 0.1,
                l_vq_g: 0.0,
                l_c_g: 0.0,
                l_spk: 0.0,
                l_adv: 0.0,
                alpha: 1.0,
                beta: 0.25,
                total: 1.025,
            })],
            best_step: 10,
            skipped: vec![],
        };
        let a = loss_curve_svg(&report);
        let b = loss_curve_svg(&report);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));

        let h = usage_histogram_svg("local", &[5, 0, 2, 9]);
        assert!(h.contains("3/4 codewords used"));
    }
}
