//! CSV emission with fixed 9-significant-digit formatting.

use crate::CliError;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const OUT_DIR_ENV: &str = "DELAYCERT_OUT_DIR";

/// `%.9g`-style rendering: shortest of fixed/scientific, trailing zeros removed.
pub fn fmt_g(x: f64) -> String {
    const SIG: usize = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", SIG - 1, x);
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..SIG as i32).contains(&exp) {
        let decimals = (SIG as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn resolve_out(out: Option<&Path>) -> Option<PathBuf> {
    let out = out?;
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if out.is_relative() => Some(Path::new(&dir).join(out)),
        _ => Some(out.to_path_buf()),
    }
}

pub struct Table {
    writer: csv::Writer<Box<dyn Write>>,
}

impl Table {
    pub fn create(out: Option<&Path>, header: &[String]) -> Result<Self, CliError> {
        let sink: Box<dyn Write> = match resolve_out(out) {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                Box::new(std::io::BufWriter::new(std::fs::File::create(&p)?))
            }
            None => Box::new(std::io::stdout().lock()),
        };
        let mut writer = csv::Writer::from_writer(sink);
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::fmt_g;

    #[test]
    fn general_format() {
        assert_eq!(fmt_g(0.1), "0.1");
        assert_eq!(fmt_g(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g(123456789.0), "123456789");
        assert_eq!(fmt_g(1234567891.0), "1.23456789e+09");
        assert_eq!(fmt_g(-2.5e-7), "-2.5e-07");
        assert_eq!(fmt_g(0.0001), "0.0001");
        assert_eq!(fmt_g(9.9999999999), "10");
        assert_eq!(fmt_g(0.0), "0");
    }
}
