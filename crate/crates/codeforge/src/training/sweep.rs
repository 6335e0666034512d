//! Hyperparameter sweep harness.
//!
//! The sweep executes one run per grid point, each with its own seed,
//! records a (train metric, eval metric) pair per row, and survives
//! individual run failures by recording the error in the row.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One grid point: the three columns the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub batch_size: usize,
    pub starter_lr: f64,
    pub reg_weight: f64,
}

/// The canonical 12-point grid: batch {64, 128} x lr {0.02, 0.002,
/// 0.0002} x regularization {0.1, 0.01}.
pub fn preset_grid() -> Vec<SweepPoint> {
    let mut grid = Vec::with_capacity(12);
    for &batch_size in &[64usize, 128] {
        for &starter_lr in &[0.02f64, 0.002, 0.0002] {
            for &reg_weight in &[0.1f64, 0.01] {
                grid.push(SweepPoint {
                    batch_size,
                    starter_lr,
                    reg_weight,
                });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub train_metric: Option<f64>,
    pub eval_metric: Option<f64>,
    pub error: Option<String>,
}

/// Runs `run` on every grid point, in order. A failing point becomes a
/// row with its error recorded; the sweep continues.
pub fn run_sweep(
    grid: &[SweepPoint],
    mut run: impl FnMut(&SweepPoint) -> Result<(f64, f64)>,
) -> Vec<SweepRow> {
    grid.iter()
        .map(|point| match run(point) {
            Ok((train_metric, eval_metric)) => SweepRow {
                point: *point,
                train_metric: Some(train_metric),
                eval_metric: Some(eval_metric),
                error: None,
            },
            Err(e) => SweepRow {
                point: *point,
                train_metric: None,
                eval_metric: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Orders rows best-first by eval metric; failed rows sink to the bottom.
/// Ties keep grid order.
pub fn rank_rows(rows: &mut [SweepRow]) {
    let mut indexed: Vec<(usize, SweepRow)> = rows.iter().cloned().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| {
        match (a.eval_metric, b.eval_metric) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then(ia.cmp(ib))
    });
    for (dst, (_, row)) in rows.iter_mut().zip(indexed) {
        *dst = row;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn grid_has_twelve_points() {
        let grid = preset_grid();
        assert_eq!(grid.len(), 12);
        let unique: std::collections::HashSet<String> =
            grid.iter().map(|p| format!("{p:?}")).collect();
        assert_eq!(unique.len(), 12);
    }

    #[test]
    fn failures_are_recorded_and_sweep_continues() {
        let grid = preset_grid();
        let rows = run_sweep(&grid, |p| {
            if p.batch_size == 64 && p.starter_lr == 0.002 {
                Err(Error::Config("boom".into()))
            } else {
                Ok((p.starter_lr, p.reg_weight))
            }
        });
        assert_eq!(rows.len(), 12);
        let failed = rows.iter().filter(|r| r.error.is_some()).count();
        assert_eq!(failed, 2);
        assert!(rows.iter().all(|r| r.error.is_some() || r.eval_metric.is_some()));
    }

    #[test]
    fn ranking_puts_best_eval_first_and_errors_last() {
        let grid = preset_grid();
        let mut rows = run_sweep(&grid, |p| {
            if p.reg_weight == 0.1 && p.starter_lr == 0.02 {
                Err(Error::Config("boom".into()))
            } else {
                Ok((0.0, p.starter_lr * p.reg_weight))
            }
        });
        rank_rows(&mut rows);
        let best = rows.first().unwrap();
        assert_eq!(best.eval_metric, Some(0.002 * 0.1f64));
        assert!(rows.iter().rev().take(2).all(|r| r.error.is_some()));
    }

    #[test]
    fn best_row_selection_is_argmax_eval() {
        let grid = preset_grid();
        let rows = run_sweep(&grid, |p| Ok((0.0, p.starter_lr + p.reg_weight)));
        let best = rows
            .iter()
            .max_by(|a, b| a.eval_metric.partial_cmp(&b.eval_metric).unwrap())
            .unwrap();
        assert_eq!(best.eval_metric, Some(0.02 + 0.1));
    }
}
