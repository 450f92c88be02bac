//! CSV and manifest emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::experiment::{Manifest, SweepResult, SweepRow};
use crate::error::{Error, Result};
use crate::fitting::FitReport;

pub const SWEEP_HEADER: &str =
    "r_e,behavior_raw,behavior_renorm,helpfulness,helpfulness_relative,thm1_bound,thm2_bound,verdict";
pub const FITS_HEADER: &str = "parameter,estimate,lower,upper,rss,r2,trace_len";
pub const VALIDATORS_HEADER: &str = "check,item,measured,reference,status";

pub const SWEEP_FILE: &str = "sweep.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FITS_FILE: &str = "fits.csv";
pub const VALIDATORS_FILE: &str = "validators.csv";

/// Renders `x` with 12 significant digits, like C's `%.12g`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..12).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (11 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn parse_num(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let nums = [
            r.r_e,
            r.behavior_raw,
            r.behavior_renorm,
            r.helpfulness,
            r.helpfulness_relative,
            r.thm1_bound,
            r.thm2_bound,
        ];
        for x in nums {
            out.push_str(&fmt_num(x));
            out.push(',');
        }
        out.push_str(&csv_field(&r.verdict));
        out.push('\n');
    }
    out
}

pub fn fits_csv(fits: &[FitReport]) -> String {
    let mut out = String::from(FITS_HEADER);
    out.push('\n');
    for fit in fits {
        for p in &fit.parameters {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&p.name),
                fmt_num(p.estimate),
                fmt_num(p.lower),
                fmt_num(p.upper),
                fmt_num(fit.rss),
                fmt_num(fit.r2),
                fit.trace_len
            ));
        }
    }
    out
}

pub fn validators_csv(result: &SweepResult) -> String {
    let mut out = String::from(VALIDATORS_HEADER);
    out.push('\n');
    for v in &result.validators {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&v.check),
            csv_field(&v.item),
            fmt_num(v.measured),
            fmt_num(v.reference),
            v.status
        ));
    }
    out
}

pub fn manifest_json(manifest: &Manifest) -> Result<String> {
    let mut s = serde_json::to_string_pretty(manifest)?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Writes `sweep.csv`, `manifest.json`, `fits.csv` and `validators.csv`
/// into `dir`, creating it if needed. Returns the written paths.
pub fn emit_csv_report(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        (SWEEP_FILE, sweep_csv(&result.rows)),
        (MANIFEST_FILE, manifest_json(&result.manifest)?),
        (FITS_FILE, fits_csv(&result.manifest.fits)),
        (VALIDATORS_FILE, validators_csv(result)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        write_file(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_HEADER => {}
        other => {
            return Err(Error::config(
                "sweep.csv",
                format!("unexpected header {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f = split_csv_line(line);
        let bad = || Error::config(format!("sweep.csv:{}", i + 2), "malformed row");
        if f.len() != 8 {
            return Err(bad());
        }
        let n = |k: usize| parse_num(&f[k]).ok_or_else(bad);
        rows.push(SweepRow {
            r_e: n(0)?,
            behavior_raw: n(1)?,
            behavior_renorm: n(2)?,
            helpfulness: n(3)?,
            helpfulness_relative: n(4)?,
            thm1_bound: n(5)?,
            thm2_bound: n(6)?,
            verdict: f[7].clone(),
        });
    }
    Ok(rows)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    parse_sweep_csv(&fs::read_to_string(path)?)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(-2.25), "-2.25");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(2.0 / 3.0), "0.666666666667");
        assert_eq!(fmt_num(123456.789), "123456.789");
        assert_eq!(fmt_num(1e-5), "1e-05");
        assert_eq!(fmt_num(1.5e20), "1.5e+20");
        assert_eq!(fmt_num(999999999999.9), "1e+12");
        assert_eq!(fmt_num(0.0001), "0.0001");
        assert_eq!(fmt_num(f64::NAN), "nan");
        assert_eq!(fmt_num(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn rendering_keeps_relative_precision() {
        for &x in &[std::f64::consts::PI, -1e-7 / 3.0, 7.123456789012345e8, 0.999999999999] {
            let y: f64 = fmt_num(x).parse().unwrap();
            assert!(((x - y) / x).abs() <= 5e-12, "{x} {y}");
        }
    }

    #[test]
    fn quoted_fields_split() {
        assert_eq!(split_csv_line("a,\"b,c\",\"d\"\"e\""), vec!["a", "b,c", "d\"e"]);
    }

    #[test]
    fn sweep_round_trip() {
        let rows = vec![SweepRow {
            r_e: 0.5,
            behavior_raw: -0.25,
            behavior_renorm: f64::NAN,
            helpfulness: 0.1,
            helpfulness_relative: 1.0 / 3.0,
            thm1_bound: 0.2,
            thm2_bound: f64::NAN,
            verdict: "thm1=pass;oracle=agree".into(),
        }];
        let text = sweep_csv(&rows);
        assert!(text.starts_with(SWEEP_HEADER));
        let back = parse_sweep_csv(&text).unwrap();
        assert_eq!(back[0].verdict, rows[0].verdict);
        assert!(back[0].behavior_renorm.is_nan());
        assert!((back[0].helpfulness_relative - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_sweep_csv("r_e,x\n").is_err());
    }
}
