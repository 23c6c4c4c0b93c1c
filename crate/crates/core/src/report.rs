//! Canonical report serialization.
//!
//! JSON output is canonical: object keys sorted (the default map is
//! ordered), floats printed with six significant digits, no whitespace
//! variation. Writing the same report twice yields byte-identical files.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ProbeCurve, TransferReport};

/// Formats a float with six significant digits, trimming trailing zeros
/// (the `%.6g` convention).
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        // Canonical JSON has no NaN/Inf; encode as null upstream.
        return "null".into();
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        trim_zeros(&fixed)
    } else {
        let mantissa = format!("{:.5e}", x);
        // Rust renders "1.23400e5"; normalize to "1.234e5".
        match mantissa.split_once('e') {
            Some((m, e)) => format!("{}e{}", trim_zeros(m), e),
            None => mantissa,
        }
    };
    s
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0');
        t.trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Serializes a JSON value canonically for reports: sorted keys,
/// `fmt_sig6` floats.
pub fn to_canonical_json(v: &serde_json::Value) -> String {
    let mut out = String::new();
    write_value(v, &mut out, &fmt_sig6);
    out
}

/// Canonical serialization with exact (shortest round-trip) floats. Used
/// where values must survive a round trip bit-for-bit: file headers,
/// container manifests, and config hashing.
pub fn to_exact_json(v: &serde_json::Value) -> String {
    let mut out = String::new();
    write_value(v, &mut out, &|x: f64| x.to_string());
    out
}

fn write_value(v: &serde_json::Value, out: &mut String, float_fmt: &dyn Fn(f64) -> String) {
    match v {
        serde_json::Value::Null => out.push_str("null"),
        serde_json::Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&float_fmt(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        serde_json::Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out, float_fmt);
            }
            out.push(']');
        }
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("strings always serialize"));
                out.push(':');
                write_value(&map[k], out, float_fmt);
            }
            out.push('}');
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes a transfer report. JSON carries the full report; CSV carries the
/// matrix only (surrogate rows, victim columns, trailing `avg` column)
/// behind a comment line echoing the config hash and seed.
pub fn write_report(report: &TransferReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => to_canonical_json(&report.to_json()).into_bytes(),
        ReportFormat::Csv => report_csv(report).into_bytes(),
    };
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    f.write_all(&bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(())
}

fn report_csv(report: &TransferReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# config_hash={} seed={}\n",
        report.config_hash,
        report.seeds.first().copied().unwrap_or(0)
    ));
    out.push_str("surrogate");
    for v in &report.victims {
        out.push(',');
        out.push_str(v);
    }
    out.push_str(",avg\n");
    for (i, s) in report.surrogates.iter().enumerate() {
        out.push_str(s);
        for cell in &report.matrix[i] {
            out.push(',');
            out.push_str(&fmt_sig6(*cell));
        }
        out.push(',');
        out.push_str(&fmt_sig6(report.row_avg[i]));
        out.push('\n');
    }
    out
}

/// Writes probe curves as CSV with columns `probe,ratio,accuracy,stddev`.
pub fn write_probe_csv(
    curves: &[ProbeCurve],
    config_hash: &str,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash} seed={seed}\n"));
    out.push_str("probe,ratio,accuracy,stddev\n");
    for curve in curves {
        for p in &curve.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                curve.probe,
                fmt_sig6(p.ratio),
                fmt_sig6(p.accuracy),
                fmt_sig6(p.stddev)
            ));
        }
    }
    std::fs::write(path, out.as_bytes())?;
    Ok(())
}
