//! Evaluation: per-label F1, accuracy, loss-prediction diagnostics and
//! learning-curve records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelSet, LABEL_NAMES};
use crate::model::Model;
use crate::train::task_loss;

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} truths")));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        // label absent and never predicted
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// One-vs-rest F1 for clear, rain, snow, bright, moderate, low.
pub fn f1_per_label(preds: &[LabelSet], truth: &[LabelSet]) -> Result<[f64; 6]> {
    check_aligned(preds.len(), truth.len())?;
    let mut counts = [(0usize, 0usize, 0usize); 6];
    for (p, t) in preds.iter().zip(truth) {
        for (offset, pi, ti) in [(0, p.weather.index(), t.weather.index()), (3, p.light.index(), t.light.index())] {
            if pi == ti {
                counts[offset + pi].0 += 1;
            } else {
                counts[offset + pi].1 += 1;
                counts[offset + ti].2 += 1;
            }
        }
    }
    Ok(counts.map(|(tp, fp, fn_)| f1(tp, fp, fn_)))
}

pub fn macro_f1(per_label: &[f64; 6]) -> f64 {
    per_label.iter().sum::<f64>() / 6.0
}

/// Mean F1 over the weather labels and over the light labels.
pub fn category_f1(per_label: &[f64; 6]) -> (f64, f64) {
    (per_label[..3].iter().sum::<f64>() / 3.0, per_label[3..].iter().sum::<f64>() / 3.0)
}

/// Fraction of exact matches for weather and for light.
pub fn accuracy_per_head(preds: &[LabelSet], truth: &[LabelSet]) -> Result<(f64, f64)> {
    check_aligned(preds.len(), truth.len())?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let n = preds.len() as f64;
    let w = preds.iter().zip(truth).filter(|(p, t)| p.weather == t.weather).count();
    let l = preds.iter().zip(truth).filter(|(p, t)| p.light == t.light).count();
    Ok((w as f64 / n, l as f64 / n))
}

/// Accuracy over the `k` highest and the `k` lowest scores. Samples are
/// ordered by descending score with ties by ascending id, so at `k = N/2`
/// the two sets partition the input.
pub fn topk_bottomk_accuracy(ids: &[u64], scores: &[f32], correct: &[bool], k: usize) -> Result<(f64, f64)> {
    check_aligned(scores.len(), correct.len())?;
    check_aligned(ids.len(), correct.len())?;
    if k == 0 || 2 * k > scores.len() {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1 <= k <= N/2 with N = {}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    let acc = |idx: &[usize]| idx.iter().filter(|&&i| correct[i]).count() as f64 / k as f64;
    Ok((acc(&order[..k]), acc(&order[order.len() - k..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then 0.
    pub degenerate: bool,
}

/// 1-based ranks, ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<Spearman> {
    check_aligned(pred.len(), truth.len())?;
    if pred.len() < 3 {
        return Err(Error::InvalidArgument(format!("spearman needs N >= 3, got {}", pred.len())));
    }
    Ok(match pearson(&average_ranks(pred), &average_ranks(truth)) {
        Some(rho) => Spearman { rho, degenerate: false },
        None => Spearman { rho: 0.0, degenerate: true },
    })
}

/// Held-out quality of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    /// Keyed in `LABEL_NAMES` order.
    pub f1: Vec<LabelScore>,
    pub macro_f1: f64,
    pub weather_f1: f64,
    pub light_f1: f64,
    pub weather_accuracy: f64,
    pub light_accuracy: f64,
    pub mean_task_loss: f64,
    pub spearman: Option<Spearman>,
    pub topk: Option<TopBottom>,
    /// Top/bottom accuracy with per-label correctness, for each label that
    /// occurs in the held-out truth.
    pub topk_per_label: Vec<LabelTopBottom>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopBottom {
    pub k: usize,
    pub acc_top: f64,
    pub acc_bottom: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTopBottom {
    pub label: String,
    pub n: usize,
    pub k: usize,
    pub acc_top: f64,
    pub acc_bottom: f64,
}

/// Scores `model` on `(id, image, truth)` triples. `k` is the top/bottom
/// set size; it is clipped to N/2.
pub fn evaluate(model: &Model, data: &[(u64, &[f32], LabelSet)], k: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let ids: Vec<u64> = data.iter().map(|d| d.0).collect();
    let images: Vec<&[f32]> = data.iter().map(|d| d.1).collect();
    let truth: Vec<LabelSet> = data.iter().map(|d| d.2).collect();
    let out = model.predict(&images, 64)?;
    let preds = out.argmax_labels();
    let per_label = f1_per_label(&preds, &truth)?;
    let (weather_f1, light_f1) = category_f1(&per_label);
    let (weather_accuracy, light_accuracy) = accuracy_per_head(&preds, &truth)?;
    let labels: Vec<Option<LabelSet>> = truth.iter().copied().map(Some).collect();
    let (mean_task_loss, losses) = task_loss(&out.weather_logits, &out.light_logits, &labels)?;

    let has_lp = model.config().loss_pred.is_some();
    let spearman = if has_lp && data.len() >= 3 {
        let predicted: Vec<f64> = out.predicted_loss.iter().map(|&p| p as f64).collect();
        Some(spearman(&predicted, &losses)?)
    } else {
        None
    };
    let k = k.min(data.len() / 2);
    let (mut topk, mut topk_per_label) = (None, Vec::new());
    if has_lp && k > 0 {
        let correct: Vec<bool> = preds.iter().zip(&truth).map(|(p, t)| p == t).collect();
        let (acc_top, acc_bottom) = topk_bottomk_accuracy(&ids, &out.predicted_loss, &correct, k)?;
        topk = Some(TopBottom { k, acc_top, acc_bottom });
        for (li, name) in LABEL_NAMES.iter().enumerate() {
            let member = |l: &LabelSet| if li < 3 { l.weather.index() == li } else { l.light.index() == li - 3 };
            let rows: Vec<usize> = (0..data.len()).filter(|&i| member(&truth[i])).collect();
            let lk = k.min(rows.len() / 2);
            if lk == 0 {
                continue;
            }
            let sub_ids: Vec<u64> = rows.iter().map(|&i| ids[i]).collect();
            let sub_scores: Vec<f32> = rows.iter().map(|&i| out.predicted_loss[i]).collect();
            let sub_correct: Vec<bool> = rows.iter().map(|&i| member(&preds[i])).collect();
            let (acc_top, acc_bottom) = topk_bottomk_accuracy(&sub_ids, &sub_scores, &sub_correct, lk)?;
            topk_per_label.push(LabelTopBottom {
                label: name.to_string(),
                n: rows.len(),
                k: lk,
                acc_top,
                acc_bottom,
            });
        }
    }
    Ok(Evaluation {
        n: data.len(),
        f1: LABEL_NAMES
            .iter()
            .zip(per_label)
            .map(|(l, f1)| LabelScore { label: l.to_string(), f1 })
            .collect(),
        macro_f1: macro_f1(&per_label),
        weather_f1,
        light_f1,
        weather_accuracy,
        light_accuracy,
        mean_task_loss,
        spearman,
        topk,
        topk_per_label,
    })
}

/// Per-cycle record of an active-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub strategy: String,
    pub seed: u64,
    /// Annotator-labeled samples used for training.
    pub budget: usize,
    /// Auto labels that were also used for training.
    pub auto_in_training: usize,
    pub evaluation: Evaluation,
    /// Absent label, never predicted: F1 counts as 1.
    pub degenerate_f1_convention: String,
    pub counts: crate::datapool::PoolCounts,
    pub selection: Option<SelectionSummary>,
}

/// What the acquisition step did after this cycle's training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub selected: Vec<u64>,
    pub threshold_low: Option<f32>,
    pub threshold_high: Option<f32>,
    pub auto_labeled: usize,
    /// Agreement of the new auto labels with ground truth, when known.
    pub auto_label_accuracy: Option<f64>,
    pub human_flagged: usize,
    pub deferred: usize,
}

pub const DEGENERATE_F1_NOTE: &str = "F1 := 1.0 for a label that is absent from truth and never predicted";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: usize,
    pub macro_f1: f64,
    pub strategy: String,
    pub seed: u64,
}

/// Learning curves as `budget,macro_f1,strategy,seed`.
pub fn curves_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["budget", "macro_f1", "strategy", "seed"])?;
    for p in points {
        w.write_record([p.budget.to_string(), format!("{:.6}", p.macro_f1), p.strategy.clone(), p.seed.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of ascii fields"))
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
