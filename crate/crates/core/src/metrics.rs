//! Thresholded forecast verification: contingency tables and
//! POD/CSI/HSS/FBI per lead step and threshold.

use crate::tensor::{Tensor, TensorError};

/// Default verification thresholds in mm/h.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.2, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Per-pixel classification with the inclusive event rule `value >= threshold`.
pub fn contingency(
    pred: &Tensor,
    truth: &Tensor,
    threshold: f64,
) -> Result<ContingencyTable, TensorError> {
    if pred.shape != truth.shape {
        return Err(TensorError::ShapeMismatch {
            context: "contingency inputs".into(),
            lhs: pred.shape.clone(),
            rhs: truth.shape.clone(),
        });
    }
    let mut t = ContingencyTable::default();
    for (&p, &y) in pred.data.iter().zip(&truth.data) {
        match (p >= threshold, y >= threshold) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    Ok(t)
}

/// Verification scores; `None` marks an undefined (zero-denominator) score,
/// which serializes as "NA" — never as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub lead_step: usize,
    pub threshold: f64,
    pub pod: Option<f64>,
    pub csi: Option<f64>,
    pub hss: Option<f64>,
    pub fbi: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Score a table. The HSS denominator follows the source formulation,
/// whose perfect score is 0.5; `hss_standard` switches to the textbook
/// variant with the factor of 2 (perfect score 1.0). A degenerate
/// all-correct-rejection table scores HSS = 0.
pub fn scores(t: &ContingencyTable, hss_standard: bool) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let (tp, fp, fn_, tn) = (t.tp as f64, t.fp as f64, t.fn_ as f64, t.tn as f64);
    let pod = ratio(tp, tp + fn_);
    let csi = ratio(tp, tp + fn_ + fp);
    let fbi = ratio(tp + fp, tp + fn_);
    let den = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    let hss = if den == 0.0 {
        Some(0.0)
    } else {
        let factor = if hss_standard { 2.0 } else { 1.0 };
        Some(factor * (tp * tn - fn_ * fp) / den)
    };
    (pod, csi, hss, fbi)
}

pub fn score_row(lead_step: usize, threshold: f64, t: &ContingencyTable, hss_standard: bool) -> ScoreRow {
    let (pod, csi, hss, fbi) = scores(t, hss_standard);
    ScoreRow { lead_step, threshold, pod, csi, hss, fbi }
}

/// Scores per (lead, threshold) pooled over sequences, plus horizon means.
#[derive(Debug, Clone)]
pub struct RunScores {
    pub rows: Vec<ScoreRow>,
    /// Per-threshold mean of the defined per-lead scores (lead_step = 0).
    pub means: Vec<ScoreRow>,
}

/// Pool contingency tables over all sequences per (lead, threshold) — a
/// micro-average — then score. Inputs are in physical units (mm/h).
pub fn evaluate_run(
    predictions: &[Vec<Tensor>],
    truths: &[Vec<Tensor>],
    thresholds: &[f64],
    hss_standard: bool,
) -> Result<RunScores, TensorError> {
    if predictions.len() != truths.len() {
        return Err(TensorError::InvalidArg(format!(
            "{} predicted sequences vs {} truth sequences",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(TensorError::InvalidArg("no sequences to evaluate".into()));
    }
    let horizon = predictions[0].len();
    for (p, t) in predictions.iter().zip(truths) {
        if p.len() != horizon || t.len() != horizon {
            return Err(TensorError::InvalidArg(format!(
                "horizon mismatch: expected {horizon}, got {} / {}",
                p.len(),
                t.len()
            )));
        }
    }

    let mut rows = Vec::with_capacity(horizon * thresholds.len());
    for lead in 0..horizon {
        for &th in thresholds {
            let mut pooled = ContingencyTable::default();
            for (p, t) in predictions.iter().zip(truths) {
                pooled.merge(&contingency(&p[lead], &t[lead], th)?);
            }
            rows.push(score_row(lead + 1, th, &pooled, hss_standard));
        }
    }

    let mut means = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let pick = |get: fn(&ScoreRow) -> Option<f64>| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.threshold == th)
                .filter_map(get)
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        means.push(ScoreRow {
            lead_step: 0,
            threshold: th,
            pod: pick(|r| r.pod),
            csi: pick(|r| r.csi),
            hss: pick(|r| r.hss),
            fbi: pick(|r| r.fbi),
        });
    }
    Ok(RunScores { rows, means })
}

fn fmt_score(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "NA".to_string(),
    }
}

pub fn metrics_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("lead_step,threshold,POD,CSI,HSS,FBI\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.lead_step,
            r.threshold,
            fmt_score(r.pod),
            fmt_score(r.csi),
            fmt_score(r.hss),
            fmt_score(r.fbi),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Deliberately naive re-classification used as the counting oracle.
    fn brute_force(pred: &[f64], truth: &[f64], th: f64) -> ContingencyTable {
        let mut t = ContingencyTable::default();
        for i in 0..pred.len() {
            let p_event = pred[i] >= th;
            let y_event = truth[i] >= th;
            if p_event && y_event {
                t.tp += 1;
            } else if p_event && !y_event {
                t.fp += 1;
            } else if !p_event && y_event {
                t.fn_ += 1;
            } else {
                t.tn += 1;
            }
        }
        t
    }

    #[test]
    fn contingency_matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..1000 {
            let n = 16 * 16;
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let th = rng.gen_range(0.1..9.0);
            let got = contingency(&grid(pred.clone()), &grid(truth.clone()), th).unwrap();
            assert_eq!(got, brute_force(&pred, &truth, th), "case {case}");
            assert_eq!(got.total(), n as u64);
        }
    }

    #[test]
    fn inclusive_tie_rule_and_perfect_grid() {
        let t = contingency(&grid(vec![2.0; 4]), &grid(vec![2.0; 4]), 2.0).unwrap();
        assert_eq!(t, ContingencyTable { tp: 4, fp: 0, fn_: 0, tn: 0 });
        assert!(contingency(&grid(vec![0.0]), &grid(vec![0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn hand_scored_table() {
        let t = ContingencyTable { tp: 2, fn_: 1, fp: 1, tn: 6 };
        let (pod, csi, hss, fbi) = scores(&t, false);
        assert!((pod.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((csi.unwrap() - 0.5).abs() < 1e-12);
        assert!((hss.unwrap() - 11.0 / 42.0).abs() < 1e-12);
        assert!((fbi.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_perfect_tables() {
        let empty = ContingencyTable { tp: 0, fn_: 0, fp: 0, tn: 9 };
        let (pod, csi, hss, fbi) = scores(&empty, false);
        assert_eq!(pod, None);
        assert_eq!(csi, None);
        assert_eq!(fbi, None);
        assert_eq!(hss, Some(0.0));

        let perfect = ContingencyTable { tp: 5, tn: 5, fn_: 0, fp: 0 };
        let (pod, csi, hss, fbi) = scores(&perfect, false);
        assert_eq!(pod, Some(1.0));
        assert_eq!(csi, Some(1.0));
        assert_eq!(fbi, Some(1.0));
        assert!((hss.unwrap() - 0.5).abs() < 1e-12, "as-printed HSS tops out at 0.5");
        let (_, _, hss_std, _) = scores(&perfect, true);
        assert!((hss_std.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_perfect_when_events_exist() {
        let x = grid(vec![0.0, 0.5, 3.0, 8.0]);
        let t = contingency(&x, &x, 1.0).unwrap();
        let (pod, csi, _, fbi) = scores(&t, false);
        assert_eq!(pod, Some(1.0));
        assert_eq!(csi, Some(1.0));
        assert_eq!(fbi, Some(1.0));
    }

    #[test]
    fn pod_monotone_in_threshold_for_nested_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..10.0)).collect();
        // A damped forecast keeps the event sets nested across thresholds.
        let pred: Vec<f64> = truth.iter().map(|v| v * 0.8).collect();
        let mut last = f64::INFINITY;
        for th in [0.2, 1.0, 2.0, 4.0, 8.0] {
            let t = contingency(&grid(pred.clone()), &grid(truth.clone()), th).unwrap();
            let (pod, _, _, _) = scores(&t, false);
            let pod = pod.unwrap();
            assert!(pod <= last + 1e-12, "POD rose from {last} to {pod} at {th}");
            last = pod;
        }
    }

    #[test]
    fn pooling_is_order_invariant_and_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let seqs: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
            .map(|_| {
                (
                    (0..64).map(|_| rng.gen_range(0.0..4.0)).collect(),
                    (0..64).map(|_| rng.gen_range(0.0..4.0)).collect(),
                )
            })
            .collect();
        let th = 1.0;
        let mut pooled = ContingencyTable::default();
        for (p, t) in &seqs {
            pooled.merge(&contingency(&grid(p.clone()), &grid(t.clone()), th).unwrap());
        }
        // Concatenated pixel stream gives the same table.
        let all_p: Vec<f64> = seqs.iter().flat_map(|(p, _)| p.clone()).collect();
        let all_t: Vec<f64> = seqs.iter().flat_map(|(_, t)| t.clone()).collect();
        let concat = contingency(&grid(all_p), &grid(all_t), th).unwrap();
        assert_eq!(pooled, concat);
    }

    #[test]
    fn evaluate_run_perfect_and_csv() {
        let truth = vec![vec![grid(vec![0.0, 3.0, 0.1, 9.0]), grid(vec![1.0, 0.0, 2.0, 0.0])]];
        let run = evaluate_run(&truth, &truth, &[0.2, 1.0], false).unwrap();
        assert_eq!(run.rows.len(), 4);
        for r in &run.rows {
            assert_eq!(r.pod, Some(1.0));
            assert_eq!(r.csi, Some(1.0));
        }
        assert_eq!(run.means.len(), 2);
        assert_eq!(run.means[0].pod, Some(1.0));

        let na_row = ScoreRow {
            lead_step: 1,
            threshold: 8.0,
            pod: None,
            csi: None,
            hss: Some(0.0),
            fbi: None,
        };
        let csv = metrics_csv(&[na_row]);
        assert!(csv.contains("1,8,NA,NA,0.0000,NA"));
        assert!(csv.starts_with("lead_step,threshold,POD,CSI,HSS,FBI"));

        assert!(evaluate_run(&truth, &[], &[0.2], false).is_err());
        let short = vec![vec![grid(vec![0.0; 4])]];
        assert!(evaluate_run(&truth, &short, &[0.2], false).is_err());
    }
}
