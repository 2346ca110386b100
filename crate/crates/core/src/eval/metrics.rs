//! Voxel-count based segmentation metrics.

use crate::error::{Error, Result};
use crate::tensor::LabelGrid;

/// Voxel confusion counts for the positive (nonzero-label) class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub metrics: SegMetrics,
}

/// Count the confusion matrix over in-mask voxels; any nonzero label is
/// "positive". The mask defaults to the whole volume.
pub fn confusion_counts(
    pred: &LabelGrid,
    truth: &LabelGrid,
    mask: Option<&LabelGrid>,
) -> Result<ConfusionCounts> {
    for (what, grid) in [("truth", truth)].into_iter().chain(mask.map(|m| ("mask", m))) {
        if grid.shape() != pred.shape() {
            return Err(Error::ShapeMismatch {
                op: "confusion_counts",
                detail: format!("pred {:?} vs {what} {:?}", pred.shape(), grid.shape()),
            });
        }
    }
    let mut c = ConfusionCounts::default();
    for v in 0..pred.numel() {
        if mask.map_or(false, |m| m.data()[v] == 0) {
            continue;
        }
        match (pred.data()[v] != 0, truth.data()[v] != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// DSC / recall / precision with explicit degenerate conventions:
/// an empty denominator scores 1 (nothing to miss, nothing falsely
/// claimed). In particular both-empty gives (1, 1, 1), and empty truth
/// with a nonempty prediction gives DSC 0, precision 0, recall 1.
pub fn segmentation_metrics(c: ConfusionCounts) -> SegMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    SegMetrics {
        dsc: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
        recall: ratio(c.true_pos, c.true_pos + c.false_neg),
        precision: ratio(c.true_pos, c.true_pos + c.false_pos),
    }
}

/// Convenience: counts + metrics in one call.
pub fn score_case(
    case_id: &str,
    pred: &LabelGrid,
    truth: &LabelGrid,
    mask: Option<&LabelGrid>,
) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        metrics: segmentation_metrics(confusion_counts(pred, truth, mask)?),
    })
}

/// Mean and population std (divide by n) per metric across cases.
pub fn summarize(cases: &[CaseMetrics]) -> (SegMetrics, SegMetrics) {
    assert!(!cases.is_empty(), "summarize over zero cases");
    let n = cases.len() as f64;
    let pick = |f: fn(&SegMetrics) -> f64| {
        let mean = cases.iter().map(|c| f(&c.metrics)).sum::<f64>() / n;
        let var = cases.iter().map(|c| (f(&c.metrics) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (dm, ds) = pick(|m| m.dsc);
    let (rm, rs) = pick(|m| m.recall);
    let (pm, ps) = pick(|m| m.precision);
    (
        SegMetrics { dsc: dm, recall: rm, precision: pm },
        SegMetrics { dsc: ds, recall: rs, precision: ps },
    )
}

/// Per-case CSV sorted by case id, then `mean` and `std` summary rows.
pub fn metrics_csv(cases: &[CaseMetrics]) -> String {
    let mut rows = cases.to_vec();
    rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut out = String::from("case_id,dsc,recall,precision\n");
    let fmt = |id: &str, m: &SegMetrics| {
        format!("{id},{:.6},{:.6},{:.6}\n", m.dsc, m.recall, m.precision)
    };
    for c in &rows {
        out.push_str(&fmt(&c.case_id, &c.metrics));
    }
    let (mean, std) = summarize(&rows);
    out.push_str(&fmt("mean", &mean));
    out.push_str(&fmt("std", &std));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(shape: [usize; 3], ones: &[usize]) -> LabelGrid {
        let mut data = vec![0u8; shape.iter().product()];
        for &v in ones {
            data[v] = 1;
        }
        LabelGrid::new(shape, data).unwrap()
    }

    #[test]
    fn counts_on_hand_cases() {
        let truth = grid([2, 2, 2], &[0, 3]);
        let perfect = confusion_counts(&truth, &truth, None).unwrap();
        assert_eq!(
            perfect,
            ConfusionCounts { true_pos: 2, false_pos: 0, false_neg: 0, true_neg: 6 }
        );
        // Disjoint masks of sizes 2 and 1.
        let pred = grid([2, 2, 2], &[5, 6]);
        let other = grid([2, 2, 2], &[1]);
        let c = confusion_counts(&pred, &other, None).unwrap();
        assert_eq!(c, ConfusionCounts { true_pos: 0, false_pos: 2, false_neg: 1, true_neg: 5 });
        // Truth 2 voxels, pred hits 1 of them.
        let c = confusion_counts(&grid([2, 2, 2], &[0]), &truth, None).unwrap();
        assert_eq!((c.true_pos, c.false_neg, c.false_pos), (1, 1, 0));
        assert_eq!(c.total(), 8);
    }

    #[test]
    fn mask_restricts_the_count() {
        let pred = grid([2, 2, 2], &[0, 1]);
        let truth = grid([2, 2, 2], &[0, 2]);
        let mask = grid([2, 2, 2], &[0, 1, 2]);
        let c = confusion_counts(&pred, &truth, Some(&mask)).unwrap();
        assert_eq!(c.total(), 3);
        assert_eq!(c, ConfusionCounts { true_pos: 1, false_pos: 1, false_neg: 1, true_neg: 0 });
    }

    #[test]
    fn metric_formulas_and_conventions() {
        let m = segmentation_metrics(ConfusionCounts {
            true_pos: 1,
            false_pos: 0,
            false_neg: 1,
            true_neg: 0,
        });
        assert_eq!((m.dsc, m.recall, m.precision), (2.0 / 3.0, 0.5, 1.0));
        // Both empty.
        let m = segmentation_metrics(ConfusionCounts { true_neg: 8, ..Default::default() });
        assert_eq!((m.dsc, m.recall, m.precision), (1.0, 1.0, 1.0));
        // Empty truth, nonempty pred.
        let m = segmentation_metrics(ConfusionCounts { false_pos: 3, ..Default::default() });
        assert_eq!((m.dsc, m.recall, m.precision), (0.0, 1.0, 0.0));
        // Nonempty truth, empty pred: vacuous precision.
        let m = segmentation_metrics(ConfusionCounts { false_neg: 3, ..Default::default() });
        assert_eq!((m.dsc, m.recall, m.precision), (0.0, 0.0, 1.0));
    }

    #[test]
    fn matches_per_voxel_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let pred = LabelGrid::new(
                [4, 4, 4],
                (0..64).map(|_| rng.gen_range(0..2u8)).collect(),
            )
            .unwrap();
            let truth = LabelGrid::new(
                [4, 4, 4],
                (0..64).map(|_| rng.gen_range(0..2u8)).collect(),
            )
            .unwrap();
            let c = confusion_counts(&pred, &truth, None).unwrap();
            // Independent oracle: sets of linear indices.
            let set = |g: &LabelGrid| -> Vec<usize> {
                g.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect()
            };
            let (p, t) = (set(&pred), set(&truth));
            let tp = p.iter().filter(|i| t.contains(i)).count() as u64;
            assert_eq!(c.true_pos, tp);
            assert_eq!(c.false_pos, p.len() as u64 - tp);
            assert_eq!(c.false_neg, t.len() as u64 - tp);
            let m = segmentation_metrics(c);
            let dsc = 2.0 * tp as f64 / (p.len() + t.len()) as f64;
            if p.len() + t.len() > 0 {
                assert_eq!(m.dsc, dsc);
            }
            // DSC symmetry.
            let flipped = segmentation_metrics(confusion_counts(&truth, &pred, None).unwrap());
            assert_eq!(m.dsc, flipped.dsc);
        }
    }

    #[test]
    fn csv_is_sorted_with_matching_summary() {
        let cases = vec![
            CaseMetrics {
                case_id: "b".into(),
                metrics: SegMetrics { dsc: 0.5, recall: 0.25, precision: 1.0 },
            },
            CaseMetrics {
                case_id: "a".into(),
                metrics: SegMetrics { dsc: 0.7, recall: 0.75, precision: 0.5 },
            },
        ];
        let csv = metrics_csv(&cases);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case_id,dsc,recall,precision");
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,"));
        assert_eq!(lines[3], "mean,0.600000,0.500000,0.750000");
        assert_eq!(lines[4], "std,0.100000,0.250000,0.250000");
    }
}
