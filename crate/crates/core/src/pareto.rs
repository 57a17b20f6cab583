//! Accuracy-versus-size frontier over finished runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::RunMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub accuracy: f64,
    pub params: u64,
    pub ops: u64,
    pub tag: String,
    pub pareto: bool,
}

/// `a` dominates `b` when it is no worse on both axes and strictly better on
/// one (higher accuracy, fewer parameters).
pub fn dominates(a: &ParetoRow, b: &ParetoRow) -> bool {
    a.accuracy >= b.accuracy && a.params <= b.params && (a.accuracy > b.accuracy || a.params < b.params)
}

/// Flags every row no other row dominates. Rows are sorted by parameter
/// count, then by descending accuracy, then by tag.
pub fn pareto_front(mut rows: Vec<ParetoRow>) -> Vec<ParetoRow> {
    rows.sort_by(|a, b| {
        a.params
            .cmp(&b.params)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(a.tag.cmp(&b.tag))
    });
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < rows.len() {
        // rows sharing a parameter count compete among themselves first
        let mut j = i;
        while j < rows.len() && rows[j].params == rows[i].params {
            j += 1;
        }
        let top = rows[i].accuracy;
        for r in &mut rows[i..j] {
            r.pareto = r.accuracy == top && top > best;
        }
        best = best.max(top);
        i = j;
    }
    rows
}

pub fn row_from_metrics(m: &RunMetrics) -> ParetoRow {
    ParetoRow {
        accuracy: m.test_accuracy.unwrap_or(m.valid_accuracy),
        params: m.params,
        ops: m.ops,
        tag: m.tag.clone(),
        pareto: false,
    }
}

/// Loads every metrics file matched by `pattern`.
pub fn collect(pattern: &str) -> Result<Vec<(PathBuf, RunMetrics)>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        let p = p.map_err(|e| {
            let path = e.path().to_path_buf();
            Error::io(path, e.into())
        })?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: RunMetrics = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: not a metrics file: {e}", p.display())))?;
        out.push((p, m));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no metrics files match `{pattern}`")));
    }
    Ok(out)
}

pub fn to_csv(rows: &[ParetoRow]) -> String {
    let mut s = String::from("accuracy,params,ops,tag,pareto\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.accuracy, r.params, r.ops, r.tag, r.pareto));
    }
    s
}

pub fn write_csv(rows: &[ParetoRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(tag: &str, accuracy: f64, params: u64) -> ParetoRow {
        ParetoRow {
            accuracy,
            params,
            ops: params * 100,
            tag: tag.into(),
            pareto: false,
        }
    }

    fn flagged(rows: Vec<ParetoRow>) -> Vec<String> {
        let mut v: Vec<String> = pareto_front(rows).into_iter().filter(|r| r.pareto).map(|r| r.tag).collect();
        v.sort();
        v
    }

    fn brute_force(rows: &[ParetoRow]) -> Vec<String> {
        let mut v: Vec<String> = rows
            .iter()
            .filter(|r| !rows.iter().any(|o| dominates(o, r)))
            .map(|r| r.tag.clone())
            .collect();
        v.sort();
        v
    }

    #[test]
    fn single_model_is_on_the_front() {
        assert_eq!(flagged(vec![row("a", 0.5, 10)]), ["a"]);
    }

    #[test]
    fn dominated_model_is_not_flagged() {
        assert_eq!(flagged(vec![row("big", 0.8, 100), row("small", 0.9, 50)]), ["small"]);
    }

    #[test]
    fn five_points_with_three_on_the_front() {
        let rows = vec![
            row("a", 0.95, 75),
            row("b", 0.93, 40),
            row("c", 0.90, 60),
            row("d", 0.85, 20),
            row("e", 0.80, 30),
        ];
        assert_eq!(brute_force(&rows), ["a", "b", "d"]);
        assert_eq!(flagged(rows), ["a", "b", "d"]);
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let csv = to_csv(&pareto_front(vec![row("a", 0.5, 10), row("b", 0.4, 20)]));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("accuracy,params,ops,tag,pareto"));
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(points in prop::collection::vec((0u8..6, 1u64..8), 1..12)) {
            let rows: Vec<ParetoRow> = points
                .iter()
                .enumerate()
                .map(|(i, &(a, p))| row(&format!("r{i:02}"), a as f64 / 5.0, p))
                .collect();
            prop_assert_eq!(flagged(rows.clone()), brute_force(&rows));
        }
    }
}
