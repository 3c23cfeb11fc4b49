use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Key of the only non-reproducible field of `report.json`.
pub const TIMESTAMP_KEY: &str = "generated_at";

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path)?;
        Ok(Self { root: path.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        fs::write(self.root.join(name), contents)?;
        Ok(())
    }

    /// Writes a comma-separated table with a header row.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.write(name, &s)
    }

    /// Replaces `sections` in `report.json`. Sections written earlier under the
    /// same config hash are kept, anything else is discarded.
    pub fn update_report(&self, cfg: &ExperimentConfig, sections: Vec<(&str, Value)>) -> Result<(), CliError> {
        let path = self.root.join("report.json");
        let hash = cfg.hash();
        let mut map = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<Map<String, Value>>(&t).ok())
            .filter(|m| m.get("config_sha256").and_then(Value::as_str) == Some(hash.as_str()))
            .unwrap_or_default();
        map.insert("version".into(), Value::from(knudsen::VERSION));
        map.insert("config_sha256".into(), Value::from(hash));
        map.insert("seed".into(), Value::from(cfg.seed));
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        map.insert(TIMESTAMP_KEY.into(), Value::from(now));
        for (k, v) in sections {
            map.insert(k.into(), v);
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(map))?;
        text.push('\n');
        self.write("report.json", &text)
    }
}

pub fn json<T: Serialize>(v: &T) -> Result<Value, CliError> {
    Ok(serde_json::to_value(v)?)
}

/// Shortest round-trip decimal; non-finite values become empty cells.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

pub fn msd_script() -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set logscale xy");
    let _ = writeln!(s, "set xlabel 't'");
    let _ = writeln!(s, "set ylabel 'mean squared axial displacement'");
    let _ = writeln!(s, "plot 'msd.csv' every ::2 using 1:2:3 with yerrorbars title 'MSD'");
    s
}

pub fn profile_script(h: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set xlabel 'x'");
    let _ = writeln!(s, "set ylabel 'density'");
    let _ = writeln!(s, "set xrange [0:{h}]");
    let _ = writeln!(
        s,
        "plot 'profile.csv' skip 1 using (($1+$2)/2):4 with points title 'simulated', \\\n     '' skip 1 using (($1+$2)/2):5 with lines title 'linear'"
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 12345.678] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NAN), "");
    }
}
