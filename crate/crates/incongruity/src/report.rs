//! JSON and plain-text renderings of metrics and run records.

use std::fmt::Write as _;

use incongruity_core::gradcheck::GradcheckEntry;
use incongruity_core::metrics::MetricsReport;
use incongruity_core::train::{EpochLog, RunRecord};
use serde_json::{json, Value};

pub fn metrics_json(m: &MetricsReport) -> Value {
    json!({
        "f1": m.f1,
        "precision": m.precision,
        "recall": m.recall,
        "accuracy": m.accuracy,
        "tp": m.tp,
        "fp": m.fp,
        "fn": m.fn_,
        "tn": m.tn,
    })
}

fn epoch_json(log: &EpochLog) -> Value {
    json!({
        "epoch": log.epoch,
        "train_loss": log.train_loss,
        "val": metrics_json(&log.val),
        "wall_seconds": log.wall_seconds,
        "grad_norms": log.grad_norms,
    })
}

/// `variant` and `layer_tap` are recorded alongside the run so records from
/// several runs can be told apart.
pub fn run_record_json(record: &RunRecord, variant: &str, layer_tap: usize) -> Value {
    json!({
        "variant": variant,
        "layer_tap": layer_tap,
        "best_epoch": record.best_epoch,
        "best_val": metrics_json(&record.best_val),
        "test": record.test.as_ref().map(metrics_json),
        "epochs": record.epochs.iter().map(epoch_json).collect::<Vec<_>>(),
    })
}

pub fn metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = format!(
        "{:width$}  {:>8}  {:>9}  {:>8}  {:>8}\n",
        "variant", "f1", "precision", "recall", "accuracy"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:width$}  {:>8.4}  {:>9.4}  {:>8.4}  {:>8.4}",
            m.f1, m.precision, m.recall, m.accuracy
        );
    }
    out
}

pub fn epoch_line(log: &EpochLog) -> String {
    format!(
        "epoch {:>2}  loss {:.4}  val f1 {:.4}  acc {:.4}  {:.1}s",
        log.epoch, log.train_loss, log.val.f1, log.val.accuracy, log.wall_seconds
    )
}

pub fn gradcheck_table(entries: &[GradcheckEntry], tol: f64) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(2);
    let mut out = format!("{:width$}  {:>10}  {:>7}  result\n", "op", "max error", "checked");
    for e in entries {
        let verdict = if e.passes(tol) { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{:width$}  {:>10.3e}  {:>7}  {verdict}", e.name, e.max_error, e.checked);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_json_uses_plain_fn_key() {
        let v = metrics_json(&MetricsReport::from_counts(3, 1, 2, 4));
        assert_eq!(v["fn"], 2);
        assert_eq!(v["tp"], 3);
        assert!(v.get("fn_").is_none());
    }

    #[test]
    fn table_aligns_columns() {
        let m = MetricsReport::from_counts(1, 0, 0, 1);
        let t = metrics_table(&[("full".into(), m), ("text-only".into(), m)]);
        let lens: Vec<usize> = t.lines().map(str::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]), "{t}");
    }
}
