//! Console table rendering for eval and ablation reports.

use unseg::metrics::MetricsReport;

/// Evaluation table: one row per aggregation variant, columns mirroring the
/// loss / mIoU / Dice / Jaccard layout of the training reports.
pub fn eval_table(split: &str, loss: f64, micro: &MetricsReport, per: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "aggregation    | {split} loss | miou  | dice  | jaccard\n"
    ));
    out.push_str("---------------+-----------+-------+-------+--------\n");
    for r in [micro, per] {
        out.push_str(&format!(
            "{:<14} | {loss:9.4} | {:5.3} | {:5.3} | {:6.3}\n",
            r.aggregation.to_string(),
            r.miou,
            r.dice,
            r.jaccard
        ));
    }
    out
}

/// One ablation result row.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub augmentation: String,
    pub loss: f64,
    pub miou: f64,
    pub dice: f64,
    pub jaccard: f64,
}

/// Ablation table sorted by Dice, descending. Column set: Augmentation,
/// Loss, mIoU, Dice, Jaccard.
pub fn ablation_table(title: &str, rows: &[AblationRow]) -> String {
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.dice.partial_cmp(&a.dice).unwrap_or(std::cmp::Ordering::Equal));

    let mut out = format!("{title}\n");
    out.push_str("augmentation         | loss   | miou  | dice  | jaccard\n");
    out.push_str("---------------------+--------+-------+-------+--------\n");
    for r in sorted {
        out.push_str(&format!(
            "{:<20} | {:6.4} | {:5.3} | {:5.3} | {:6.3}\n",
            r.augmentation, r.loss, r.miou, r.dice, r.jaccard
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_sort_by_dice_descending() {
        let rows = vec![
            AblationRow {
                augmentation: "blur".into(),
                loss: 0.03,
                miou: 0.5,
                dice: 0.70,
                jaccard: 0.54,
            },
            AblationRow {
                augmentation: "transpose".into(),
                loss: 0.02,
                miou: 0.6,
                dice: 0.85,
                jaccard: 0.74,
            },
            AblationRow {
                augmentation: "none".into(),
                loss: 0.025,
                miou: 0.55,
                dice: 0.80,
                jaccard: 0.67,
            },
        ];
        let table = ablation_table("validation", &rows);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[3].starts_with("transpose"));
        assert!(lines[4].starts_with("none"));
        assert!(lines[5].starts_with("blur"));
        assert!(lines[1].contains("augmentation"));
        assert!(lines[1].contains("loss"));
        assert!(lines[1].contains("miou"));
        assert!(lines[1].contains("dice"));
        assert!(lines[1].contains("jaccard"));
    }
}
