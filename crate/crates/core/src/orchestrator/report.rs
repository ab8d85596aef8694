//! CSV reports over a record store: operator distribution per batch
//! (Fig. 3), search progress (Appendix C6) and hidden-state dumps
//! (Appendix C5).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::compiler::{write_trace_csv, CompileError};
use crate::dsl::{Architecture, OpKind};
use crate::evaluator::{hidden_trace, ArchPerfRecord, Task, TrainConfig};

/// Per batch: each operator's occurrence count over all operator
/// occurrences of the batch's parseable records. Batches without any
/// operator are omitted.
pub fn ops_over_time(records: &[ArchPerfRecord]) -> Vec<(usize, [f64; 13])> {
    let mut counts: BTreeMap<usize, [usize; 13]> = BTreeMap::new();
    for rec in records {
        let Some(arch) = rec.architecture() else { continue };
        let row = counts.entry(rec.batch_index).or_insert([0; 13]);
        arch.root.walk(&mut |node, _| {
            if let Some(i) = OpKind::OPERATORS.iter().position(|&k| k == node.op) {
                row[i] += 1;
            }
        });
    }
    counts
        .into_iter()
        .filter_map(|(b, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| (b, row.map(|c| c as f64 / total as f64)))
        })
        .collect()
}

pub fn ops_over_time_csv(records: &[ArchPerfRecord]) -> String {
    let mut out = String::from("batch_index");
    for k in OpKind::OPERATORS {
        let _ = write!(out, ",{}", k.token());
    }
    out.push('\n');
    for (b, row) in ops_over_time(records) {
        let _ = write!(out, "{b}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// One row of the search curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub eval_index: usize,
    pub batch_index: usize,
    pub ok: bool,
    pub valid_metric: Option<f64>,
    /// Lowest ok metric among records up to and including this one.
    pub best_so_far: Option<f64>,
    /// Mean ok metric of this record's batch.
    pub batch_mean_metric: Option<f64>,
}

/// Rows in store (evaluation) order.
pub fn search_curve(records: &[ArchPerfRecord]) -> Vec<CurveRow> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let ok_metric = |r: &ArchPerfRecord| r.valid_metric.filter(|v| r.is_ok() && v.is_finite());
    for r in records {
        if let Some(v) = ok_metric(r) {
            let e = sums.entry(r.batch_index).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut best: Option<f64> = None;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if let Some(v) = ok_metric(r) {
                best = Some(best.map_or(v, |b| b.min(v)));
            }
            CurveRow {
                eval_index: i,
                batch_index: r.batch_index,
                ok: r.is_ok(),
                valid_metric: r.valid_metric,
                best_so_far: best,
                batch_mean_metric: sums.get(&r.batch_index).map(|(s, n)| s / *n as f64),
            }
        })
        .collect()
}

pub fn search_curve_csv(records: &[ArchPerfRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("eval_index,batch_index,source,status,valid_metric,best_so_far,batch_mean_metric\n");
    for (row, rec) in search_curve(records).iter().zip(records) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.eval_index,
            row.batch_index,
            serde_json::to_value(rec.source).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            serde_json::to_value(rec.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            opt(row.valid_metric),
            opt(row.best_so_far),
            opt(row.batch_mean_metric)
        );
    }
    out
}

/// Per-timestep hidden states of `arch` (untrained weights) over the first
/// validation sequence of `task`: header `t,h0..`, one row per timestep.
pub fn hidden_dump_csv(arch: &Architecture, task: &Task, cfg: &TrainConfig, seed: u64) -> Result<String, CompileError> {
    let hs = hidden_trace(arch, task, cfg, seed)?;
    let mut buf = Vec::new();
    write_trace_csv(&hs, &mut buf).expect("write to memory");
    Ok(String::from_utf8(buf).expect("utf-8 csv"))
}
