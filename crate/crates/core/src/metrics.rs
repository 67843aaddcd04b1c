//! Success, throughput and latency aggregates over a simulation trace, and
//! cross-strategy comparison tables.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimulationTrace;
use crate::ledger::{FailCause, Tick, TxId, TxStatus, TxType};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} never reached a terminal status")]
    IncompleteTrace(TxId),
    #[error("{0} has no submission record")]
    MissingSubmit(TxId),
    #[error("reports were produced from different workloads")]
    MismatchedWorkload,
    #[error("no reports to compare")]
    NothingToCompare,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One CSV row. Field order is the frozen column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub tx_type: String,
    pub success: u64,
    pub fail: u64,
    pub tps: f64,
    pub latency_s: f64,
    pub fail_overdraft: u64,
    pub fail_unavailable: u64,
    pub fail_stale: u64,
    pub fail_discarded: u64,
    pub fail_rejected: u64,
    pub fail_unknown_address: u64,
    pub success_ratio: f64,
    pub successful_tps: f64,
    pub successful_tps_pct: f64,
    pub submitted_tps: f64,
    pub success_latency_s: f64,
    pub generated: u64,
    pub in_block: u64,
}

impl MetricsRow {
    pub fn fail_by(&self, cause: FailCause) -> u64 {
        match cause {
            FailCause::Overdraft => self.fail_overdraft,
            FailCause::Unavailable => self.fail_unavailable,
            FailCause::Stale => self.fail_stale,
            FailCause::Discarded => self.fail_discarded,
            FailCause::Rejected => self.fail_rejected,
            FailCause::UnknownAddress => self.fail_unknown_address,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub strategy: String,
    /// Canonical JSON of the workload configuration, used to refuse
    /// comparisons across different workloads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn row(&self, tx_type: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.tx_type == tx_type)
    }

    pub fn overall(&self) -> &MetricsRow {
        self.row("ALL").expect("every report has an ALL row")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table of the headline columns.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<18} {:<15} {:>8} {:>8} {:>10} {:>10} {:>8} {:>8}\n",
            "strategy", "tx_type", "success", "fail", "tps", "latency_s", "ratio", "stale"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:<15} {:>8} {:>8} {:>10.2} {:>10.3} {:>8.3} {:>8}\n",
                r.strategy, r.tx_type, r.success, r.fail, r.tps, r.latency_s, r.success_ratio, r.fail_stale
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct TxSummary {
    tx_type: TxType,
    submit: Tick,
    end: Option<Tick>,
    status: TxStatus,
    cause: Option<FailCause>,
    in_block: bool,
}

fn summarize(trace: &SimulationTrace) -> Result<BTreeMap<TxId, TxSummary>, MetricsError> {
    let mut txs: BTreeMap<TxId, TxSummary> = BTreeMap::new();
    for r in &trace.records {
        match (r.from, r.tx_type) {
            (None, Some(t)) => {
                txs.insert(
                    r.tx_id,
                    TxSummary {
                        tx_type: t,
                        submit: r.tick,
                        end: None,
                        status: r.to,
                        cause: None,
                        in_block: false,
                    },
                );
            }
            _ => {
                let s = txs.get_mut(&r.tx_id).ok_or(MetricsError::MissingSubmit(r.tx_id))?;
                s.status = r.to;
                if r.to.is_terminal() {
                    s.end = Some(r.tick);
                    s.cause = r.cause;
                    s.in_block = r.from == Some(TxStatus::Ordering);
                }
            }
        }
    }
    if let Some((id, _)) = txs.iter().find(|(_, s)| s.end.is_none()) {
        return Err(MetricsError::IncompleteTrace(*id));
    }
    Ok(txs)
}

fn aggregate(strategy: &str, label: &str, txs: &[&TxSummary]) -> MetricsRow {
    let mut row = MetricsRow {
        strategy: strategy.to_string(),
        tx_type: label.to_string(),
        success: 0,
        fail: 0,
        tps: 0.0,
        latency_s: 0.0,
        fail_overdraft: 0,
        fail_unavailable: 0,
        fail_stale: 0,
        fail_discarded: 0,
        fail_rejected: 0,
        fail_unknown_address: 0,
        success_ratio: 0.0,
        successful_tps: 0.0,
        successful_tps_pct: 0.0,
        submitted_tps: 0.0,
        success_latency_s: 0.0,
        generated: txs.len() as u64,
        in_block: 0,
    };
    if txs.is_empty() {
        return row;
    }
    let mut latency_sum = 0u128;
    let mut success_latency_sum = 0u128;
    for s in txs {
        let lat = (s.end.unwrap() - s.submit) as u128;
        latency_sum += lat;
        if s.in_block {
            row.in_block += 1;
        }
        if s.status == TxStatus::Committed {
            row.success += 1;
            success_latency_sum += lat;
        } else {
            row.fail += 1;
            match s.cause.unwrap_or(FailCause::Rejected) {
                FailCause::Overdraft => row.fail_overdraft += 1,
                FailCause::Unavailable => row.fail_unavailable += 1,
                FailCause::Stale => row.fail_stale += 1,
                FailCause::Discarded => row.fail_discarded += 1,
                FailCause::Rejected => row.fail_rejected += 1,
                FailCause::UnknownAddress => row.fail_unknown_address += 1,
            }
        }
    }
    let first = txs.iter().map(|s| s.submit).min().unwrap();
    let last = txs.iter().map(|s| s.end.unwrap()).max().unwrap();
    let span_s = (last - first) as f64 / 1000.0;
    let n = txs.len() as f64;
    row.latency_s = latency_sum as f64 / n / 1000.0;
    if row.success > 0 {
        row.success_latency_s = success_latency_sum as f64 / row.success as f64 / 1000.0;
    }
    row.success_ratio = row.success as f64 / n;
    if row.in_block > 0 {
        row.successful_tps_pct = row.success as f64 / row.in_block as f64;
    }
    if span_s > 0.0 {
        row.tps = row.in_block as f64 / span_s;
        row.successful_tps = row.success as f64 / span_s;
        row.submitted_tps = n / span_s;
    }
    row
}

/// Per-type rows in catalog order followed by an `ALL` row.
pub fn compute_metrics(trace: &SimulationTrace, strategy: &str) -> Result<MetricsReport, MetricsError> {
    let txs = summarize(trace)?;
    let mut rows = Vec::new();
    for t in TxType::ALL {
        let of_type: Vec<&TxSummary> = txs.values().filter(|s| s.tx_type == t).collect();
        if !of_type.is_empty() {
            rows.push(aggregate(strategy, t.name(), &of_type));
        }
    }
    let all: Vec<&TxSummary> = txs.values().collect();
    rows.push(aggregate(strategy, "ALL", &all));
    Ok(MetricsReport {
        strategy: strategy.to_string(),
        workload: None,
        rows,
    })
}

/// In-block transactions and the successful share of them, bucketed by the
/// tick they left their block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: Tick,
    pub in_block: u64,
    pub success: u64,
}

impl Window {
    pub fn success_share(&self) -> f64 {
        if self.in_block == 0 {
            0.0
        } else {
            self.success as f64 / self.in_block as f64
        }
    }
}

pub fn success_windows(trace: &SimulationTrace, bucket: Tick) -> Vec<Window> {
    let mut buckets: BTreeMap<Tick, Window> = BTreeMap::new();
    for r in &trace.records {
        if r.to.is_terminal() && r.from == Some(TxStatus::Ordering) {
            let start = r.tick / bucket * bucket;
            let w = buckets.entry(start).or_insert(Window {
                start,
                in_block: 0,
                success: 0,
            });
            w.in_block += 1;
            if r.to == TxStatus::Committed {
                w.success += 1;
            }
        }
    }
    buckets.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub higher_is_better: bool,
    pub values: Vec<f64>,
    /// Competition ranking: ties share a rank and the next rank skips.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub strategies: Vec<String>,
    pub metrics: Vec<MetricComparison>,
}

const COMPARED: [(&str, bool); 7] = [
    ("success_ratio", true),
    ("success", true),
    ("fail", false),
    ("tps", true),
    ("successful_tps", true),
    ("successful_tps_pct", true),
    ("latency_s", false),
];

fn metric_value(row: &MetricsRow, metric: &str) -> f64 {
    match metric {
        "success_ratio" => row.success_ratio,
        "success" => row.success as f64,
        "fail" => row.fail as f64,
        "tps" => row.tps,
        "successful_tps" => row.successful_tps,
        "successful_tps_pct" => row.successful_tps_pct,
        "latency_s" => row.latency_s,
        other => unreachable!("unknown metric {other}"),
    }
}

pub fn rank(values: &[f64], higher_is_better: bool) -> Vec<usize> {
    values
        .iter()
        .map(|v| {
            1 + values
                .iter()
                .filter(|o| if higher_is_better { *o > v } else { *o < v })
                .count()
        })
        .collect()
}

/// Align the `ALL` rows of several reports and rank each metric.
pub fn compare_reports(reports: &[MetricsReport]) -> Result<ComparisonTable, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NothingToCompare)?;
    if reports.iter().any(|r| r.workload != first.workload) {
        return Err(MetricsError::MismatchedWorkload);
    }
    let metrics = COMPARED
        .iter()
        .map(|(name, higher)| {
            let values: Vec<f64> = reports.iter().map(|r| metric_value(r.overall(), name)).collect();
            MetricComparison {
                metric: name.to_string(),
                higher_is_better: *higher,
                ranks: rank(&values, *higher),
                values,
            }
        })
        .collect();
    Ok(ComparisonTable {
        strategies: reports.iter().map(|r| r.strategy.clone()).collect(),
        metrics,
    })
}

impl ComparisonTable {
    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["metric".to_string()];
        header.extend(self.strategies.iter().cloned());
        header.extend(self.strategies.iter().map(|s| format!("rank_{s}")));
        w.write_record(&header)?;
        for m in &self.metrics {
            let mut rec = vec![m.metric.clone()];
            rec.extend(m.values.iter().map(|v| v.to_string()));
            rec.extend(m.ranks.iter().map(|r| r.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<20}", "metric");
        for name in &self.strategies {
            s.push_str(&format!(" {name:>20}"));
        }
        s.push('\n');
        for m in &self.metrics {
            s.push_str(&format!("{:<20}", m.metric));
            for (v, r) in m.values.iter().zip(&m.ranks) {
                s.push_str(&format!(" {:>16.3} (#{r})", v));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TraceRecord;

    fn rec(id: u64, t: Option<TxType>, from: Option<TxStatus>, to: TxStatus, tick: Tick) -> TraceRecord {
        TraceRecord {
            tx_id: TxId(id),
            tx_type: t,
            from,
            to,
            tick,
            channel_id: None,
            cause: None,
        }
    }

    /// `n` reads, evenly submitted over [0, span) and committed through a block
    /// at `span`.
    fn committed_reads(n: u64, span: Tick) -> SimulationTrace {
        let mut records = Vec::new();
        for i in 0..n {
            let submit = i * span / n;
            records.push(rec(i + 1, Some(TxType::ReadBaseline), None, TxStatus::Pending, submit));
            records.push(rec(i + 1, None, Some(TxStatus::Pending), TxStatus::Ordering, submit));
            records.push(rec(i + 1, None, Some(TxStatus::Ordering), TxStatus::Committed, span));
        }
        SimulationTrace { records }
    }

    #[test]
    fn thousand_reads_in_two_and_a_half_seconds() {
        let report = compute_metrics(&committed_reads(1000, 2500), "DefaultFifo").unwrap();
        let row = report.row("ReadBaseline").unwrap();
        assert_eq!((row.success, row.fail), (1000, 0));
        assert!((row.tps - 400.0).abs() < 1e-9);
        assert_eq!(row.success_ratio, 1.0);
    }

    #[test]
    fn success_ratio_520_of_1000() {
        let mut records = Vec::new();
        for i in 0..1000u64 {
            records.push(rec(i + 1, Some(TxType::Type1), None, TxStatus::Pending, 0));
            let mut last = rec(i + 1, None, Some(TxStatus::Pending), TxStatus::Committed, 10);
            if i >= 520 {
                last.to = TxStatus::Failed;
                last.cause = Some(FailCause::Stale);
            }
            records.push(last);
        }
        let report = compute_metrics(&SimulationTrace { records }, "x").unwrap();
        let row = report.row("Type1").unwrap();
        assert_eq!(row.success_ratio, 0.52);
        assert_eq!(row.fail_stale, 480);
        assert_eq!(row.success + row.fail, row.generated);
    }

    #[test]
    fn empty_trace_is_all_zero() {
        let report = compute_metrics(&SimulationTrace::default(), "x").unwrap();
        assert_eq!(report.rows.len(), 1);
        let all = report.overall();
        assert_eq!((all.success, all.fail, all.generated), (0, 0, 0));
        assert_eq!(all.tps, 0.0);
    }

    #[test]
    fn incomplete_trace_rejected() {
        let t = SimulationTrace {
            records: vec![rec(1, Some(TxType::Type4), None, TxStatus::Pending, 0)],
        };
        assert!(matches!(
            compute_metrics(&t, "x"),
            Err(MetricsError::IncompleteTrace(TxId(1)))
        ));
    }

    #[test]
    fn identical_reports_tie() {
        let r = compute_metrics(&committed_reads(10, 100), "a").unwrap();
        let mut s = r.clone();
        s.strategy = "b".into();
        let table = compare_reports(&[r, s]).unwrap();
        assert!(table.metrics.iter().all(|m| m.ranks == vec![1, 1]));
    }

    #[test]
    fn ranking_matches_manual_sort() {
        assert_eq!(rank(&[0.5, 0.9, 0.7], true), vec![3, 1, 2]);
        assert_eq!(rank(&[3.0, 1.0, 2.0], false), vec![3, 1, 2]);
        assert_eq!(rank(&[1.0, 2.0, 2.0], true), vec![3, 1, 1]);
    }

    #[test]
    fn mismatched_workloads_refused() {
        let mut a = compute_metrics(&committed_reads(10, 100), "a").unwrap();
        let mut b = a.clone();
        a.workload = Some("{\"seed\":1}".into());
        b.workload = Some("{\"seed\":2}".into());
        assert!(matches!(
            compare_reports(&[a, b]),
            Err(MetricsError::MismatchedWorkload)
        ));
    }

    #[test]
    fn csv_column_order() {
        let r = compute_metrics(&committed_reads(4, 100), "a").unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let header = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert_eq!(
            header,
            "strategy,tx_type,success,fail,tps,latency_s,fail_overdraft,fail_unavailable,fail_stale,\
             fail_discarded,fail_rejected,fail_unknown_address,success_ratio,successful_tps,\
             successful_tps_pct,submitted_tps,success_latency_s,generated,in_block"
        );
    }

    #[test]
    fn windows_bucket_by_second() {
        let w = success_windows(&committed_reads(10, 2500), 1000);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].start, 2000);
        assert_eq!(w[0].success_share(), 1.0);
    }
}
