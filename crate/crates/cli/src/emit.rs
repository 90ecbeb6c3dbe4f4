//! CSV and JSON emission. Floats print with 9 significant digits; files are
//! UTF-8 with LF line endings, one header row plus one row per record.

use std::io::Write;
use std::path::Path;

use mibench_core::analysis::{RunRecord, SegmentSummary};

use crate::trainer::AbortEvent;

/// 9-significant-digit float formatting (%.9g-style): plain decimal in a
/// readable range, scientific notation outside it.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // trim trailing zeros but keep at least one digit
        let trimmed = s.trim_end_matches('0').trim_end_matches('.');
        if trimmed.is_empty() || trimmed == "-" {
            "0".into()
        } else {
            trimmed.to_string()
        }
    } else {
        format!("{x:.8e}")
    }
}

pub fn write_records_csv(path: &Path, records: &[RunRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str("iteration,mi_truth,loss,estimate,estimator,critic,seed,wall_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            fmt_sig(r.mi_truth),
            fmt_sig(r.loss),
            fmt_sig(r.estimate),
            r.estimator,
            r.critic,
            r.seed,
            fmt_sig(r.wall_ms),
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_summaries_csv(path: &Path, summaries: &[SegmentSummary]) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str("mi_level,bias,variance,mse,n_estimates,estimator,critic,seed\n");
    for s in summaries {
        let seed = match s.seed {
            Some(v) => v.to_string(),
            None => "pooled".into(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_sig(s.mi_level),
            fmt_sig(s.bias),
            fmt_sig(s.variance),
            fmt_sig(s.mse),
            s.n_estimates,
            s.estimator,
            s.critic,
            seed,
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_aborts_csv(path: &Path, aborts: &[AbortEvent]) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str("estimator,critic,task,seed,iteration,reason\n");
    for a in aborts {
        out.push_str(&format!(
            "{},{},{},{},{},\"{}\"\n",
            a.estimator,
            a.critic,
            a.task,
            a.seed,
            a.iteration,
            a.reason.replace('"', "'"),
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(2.0), "2");
        assert_eq!(fmt_sig(-1.5), "-1.5");
        assert_eq!(fmt_sig(0.125), "0.125");
        // 9 significant digits survive
        assert_eq!(fmt_sig(1.23456789), "1.23456789");
        assert_eq!(fmt_sig(123456789.0), "123456789");
        assert!(fmt_sig(1.23456789e12).contains('e'));
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(fmt_sig(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_sig(f64::NAN), "nan");
        // round-trips to the same 9-digit value
        let v = 0.8374741895;
        let parsed: f64 = fmt_sig(v).parse().unwrap();
        assert!((parsed - v).abs() < 1e-9);
    }

    #[test]
    fn record_csv_schema() {
        let dir = std::env::temp_dir().join(format!("emit_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("records.csv");
        let records = vec![RunRecord {
            iteration: 3,
            mi_truth: 2.0,
            loss: -0.5,
            estimate: 1.25,
            estimator: "cpc".into(),
            critic: "joint".into(),
            seed: 1,
            wall_ms: 12.5,
        }];
        write_records_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,mi_truth,loss,estimate,estimator,critic,seed,wall_ms"
        );
        assert_eq!(lines.next().unwrap(), "3,2,-0.5,1.25,cpc,joint,1,12.5");
        // empty record list → header only
        write_records_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn summary_csv_schema() {
        let dir = std::env::temp_dir().join(format!("emit_s_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("summaries.csv");
        let summaries = vec![SegmentSummary {
            mi_level: 10.0,
            bias: -5.8,
            variance: 0.01,
            mse: 33.65,
            n_estimates: 400,
            estimator: "cpc".into(),
            critic: "joint".into(),
            seed: None,
        }];
        write_summaries_csv(&path, &summaries).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "mi_level,bias,variance,mse,n_estimates,estimator,critic,seed"
        );
        assert_eq!(lines.next().unwrap(), "10,-5.8,0.01,33.65,400,cpc,joint,pooled");
        std::fs::remove_dir_all(&dir).ok();
    }
}
