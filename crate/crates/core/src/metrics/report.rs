use std::fmt::Write as _;

use super::MetricError;

/// Report keys, in output order.
pub const REPORT_KEYS: [&str; 7] = [
    "Dur RMSE",
    "Dur CORR",
    "F0 RMSE (Hz)",
    "F0 CORR",
    "MCD (dB)",
    "BAPD (dB)",
    "V/UV Error (%)",
];

/// Printed in place of a value that could not be computed.
pub const UNDEFINED: &str = "undefined";

/// Metrics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEval {
    pub name: String,
    pub frames: usize,
    /// Frames; `None` without duration data.
    pub dur_rmse: Option<f64>,
    pub dur_corr: Option<f64>,
    pub f0_rmse_hz: Option<f64>,
    pub f0_corr: Option<f64>,
    pub mcd_db: Option<f64>,
    pub bapd_db: Option<f64>,
    pub vuv_error_pct: Option<f64>,
}

impl UtteranceEval {
    /// Values in [`REPORT_KEYS`] order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.dur_rmse,
            self.dur_corr,
            self.f0_rmse_hz,
            self.f0_corr,
            self.mcd_db,
            self.bapd_db,
            self.vuv_error_pct,
        ]
    }
}

/// Corpus-level metrics (pooled over utterances) and the per-utterance rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Free-text header lines.
    pub notes: Vec<String>,
    pub dur_rmse: Option<f64>,
    pub dur_corr: Option<f64>,
    pub f0_rmse_hz: Option<f64>,
    pub f0_corr: Option<f64>,
    pub mcd_db: Option<f64>,
    pub bapd_db: Option<f64>,
    pub vuv_error_pct: Option<f64>,
    pub utterances: Vec<UtteranceEval>,
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

impl EvalReport {
    /// Values in [`REPORT_KEYS`] order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.dur_rmse,
            self.dur_corr,
            self.f0_rmse_hz,
            self.f0_corr,
            self.mcd_db,
            self.bapd_db,
            self.vuv_error_pct,
        ]
    }

    pub fn get(&self, key: &str) -> Option<Option<f64>> {
        REPORT_KEYS.iter().position(|k| *k == key).map(|i| self.values()[i])
    }

    /// `# note` lines, then one `key<TAB>value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            writeln!(out, "# {note}").unwrap();
        }
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            writeln!(out, "{k}\t{}", show(v)).unwrap();
        }
        out
    }

    /// Parses [`EvalReport::to_text`] output; per-utterance rows are not
    /// part of that file and come back empty.
    pub fn from_text(text: &str) -> Result<Self, MetricError> {
        let bad = |line: usize, m: String| MetricError::Report(format!("line {line}: {m}"));
        let mut notes = Vec::new();
        let mut values: [Option<Option<f64>>; 7] = [None; 7];
        for (i, line) in text.lines().enumerate() {
            if let Some(note) = line.strip_prefix('#') {
                notes.push(note.strip_prefix(' ').unwrap_or(note).to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once('\t').ok_or_else(|| bad(i + 1, "expected key<TAB>value".into()))?;
            let slot = REPORT_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| bad(i + 1, format!("unknown key '{key}'")))?;
            if values[slot].is_some() {
                return Err(bad(i + 1, format!("duplicate key '{key}'")));
            }
            values[slot] = Some(if value == UNDEFINED {
                None
            } else {
                Some(value.parse().map_err(|_| bad(i + 1, format!("bad value '{value}'")))?)
            });
        }
        if let Some(missing) = values.iter().position(Option::is_none) {
            return Err(MetricError::Report(format!("missing key '{}'", REPORT_KEYS[missing])));
        }
        let [dur_rmse, dur_corr, f0_rmse_hz, f0_corr, mcd_db, bapd_db, vuv_error_pct] = values.map(Option::unwrap);
        Ok(Self {
            notes,
            dur_rmse,
            dur_corr,
            f0_rmse_hz,
            f0_corr,
            mcd_db,
            bapd_db,
            vuv_error_pct,
            utterances: Vec::new(),
        })
    }

    /// Tab-separated per-utterance table with a header row.
    pub fn utterance_table(&self) -> String {
        let mut out = String::from("utterance\tframes");
        for k in REPORT_KEYS {
            write!(out, "\t{k}").unwrap();
        }
        out.push('\n');
        for u in &self.utterances {
            write!(out, "{}\t{}", u.name, u.frames).unwrap();
            for v in u.values() {
                write!(out, "\t{}", show(v)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
