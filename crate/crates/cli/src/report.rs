//! Report emission: every output file starts with a comment header that
//! embeds the resolved configuration hash and seed, so identical headers
//! guarantee identical data sections. Numbers use the shortest round-trip
//! decimal representation; lines end with LF.

use std::path::Path;

use crate::config::ResolvedConfig;
use crate::error::Result;

/// Shortest round-trip decimal representation (Rust's default float
/// formatting); non-finite values print as `NaN`/`inf`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Formats an optional value, empty when absent.
pub fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// A CSV report with the standard comment header.
pub struct Report {
    buffer: String,
}

impl Report {
    pub fn new(command: &str, config: &ResolvedConfig, seed: u64) -> Self {
        let mut buffer = String::new();
        buffer.push_str(&format!("# ipdborrow {command}\n"));
        buffer.push_str(&format!("# config_hash = {}\n", config.hash()));
        buffer.push_str(&format!("# seed = {seed}\n"));
        for line in config.echo_lines() {
            buffer.push_str("# ");
            buffer.push_str(&line);
            buffer.push('\n');
        }
        Self { buffer }
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: impl IntoIterator<Item = S>) {
        let mut first = true;
        for field in fields {
            if !first {
                self.buffer.push(',');
            }
            self.buffer.push_str(field.as_ref());
            first = false;
        }
        self.buffer.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, &self.buffer)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_shortest() {
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1.0 / 3.0), "0.3333333333333333");
        assert_eq!(format_float(f64::NAN), "NaN");
        assert_eq!(format_float(2.0), "2");
    }

    #[test]
    fn report_header_embeds_hash_and_seed() {
        let config = ResolvedConfig::resolve(
            &[("k", "v".to_string())],
            Default::default(),
            vec![],
        );
        let mut report = Report::new("weights", &config, 7);
        report.row(["a", "b"]);
        assert!(report.buffer.starts_with("# ipdborrow weights\n# config_hash = "));
        assert!(report.buffer.contains("# seed = 7\n"));
        assert!(report.buffer.contains("# k = v\n"));
        assert!(report.buffer.ends_with("a,b\n"));
    }
}
