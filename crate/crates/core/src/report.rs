//! Deterministic report serialization.
//!
//! Reports must be byte-identical across runs and thread counts, so
//! every float is printed with a fixed 17-significant-digit scientific
//! form (enough to round-trip any f64) instead of the shortest-digits
//! default, and key order is fixed by struct declaration order.

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::metrics::EvalReport;

/// `7.6666666666666661e-1` style: 17 significant digits, always with
/// an exponent. Valid JSON and exact under round-trip parsing.
pub fn format_f64_17sig(v: f64) -> String {
    debug_assert!(v.is_finite(), "reports only carry finite values");
    format!("{v:.16e}")
}

fn raw_number<E: serde::ser::Error>(v: f64) -> Result<Box<RawValue>, E> {
    RawValue::from_string(format_f64_17sig(v)).map_err(E::custom)
}

pub fn f64_17sig<S: Serializer>(v: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    raw_number::<S::Error>(*v)?.serialize(serializer)
}

pub fn opt_f64_17sig<S: Serializer>(v: &Option<f64>, serializer: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => f64_17sig(v, serializer),
        None => serializer.serialize_none(),
    }
}

pub fn vec_f64_17sig<S: Serializer>(v: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
    let mut seq = serializer.serialize_seq(Some(v.len()))?;
    for item in v {
        seq.serialize_element(&raw_number::<S::Error>(*item)?)?;
    }
    seq.end()
}

/// Pretty JSON document with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    text
}

/// Percentage with one decimal, the rounding used in summary tables.
fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Human-readable one-screen summary of an evaluation report.
pub fn human_summary(report: &EvalReport) -> String {
    format!(
        "Rank-1  {:>6}%\nRank-5  {:>6}%\nRank-10 {:>6}%\nRank-20 {:>6}%\nmAP     {:>6}%\nmINP    {:>6}%\nqueries {} evaluated, {} skipped\n",
        pct(report.cmc_at(1)),
        pct(report.cmc_at(5)),
        pct(report.cmc_at(10)),
        pct(report.cmc_at(20)),
        pct(report.map),
        pct(report.minp),
        report.n_evaluated,
        report.n_skipped,
    )
}

/// One-line CSV summary (plus header) of an evaluation report.
pub fn csv_summary(report: &EvalReport) -> String {
    format!(
        "rank1,rank5,rank10,rank20,map,minp,n_evaluated,n_skipped\n{},{},{},{},{},{},{},{}\n",
        format_f64_17sig(report.cmc_at(1)),
        format_f64_17sig(report.cmc_at(5)),
        format_f64_17sig(report.cmc_at(10)),
        format_f64_17sig(report.cmc_at(20)),
        format_f64_17sig(report.map),
        format_f64_17sig(report.minp),
        report.n_evaluated,
        report.n_skipped,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digit_floats_round_trip() {
        for v in [
            0.0,
            1.0,
            -1.0,
            0.3,
            2.0 / 3.0,
            3.5e-5,
            f64::MIN_POSITIVE,
            1.7976931348623157e308,
        ] {
            let text = format_f64_17sig(v);
            let back: f64 = text.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{text}");
            // and it is a legal JSON number
            let json: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert!(json.is_number());
        }
    }
}
