//! Metric summarization and the CSV log formats.
//!
//! `rounds.csv` is the ground truth: the experiment summary is derived from
//! the rounded values stored there, so re-deriving it from the file always
//! reproduces `summary.csv` byte for byte.

use crate::fed::RoundRecord;
use crate::{Error, Result};

/// Stealthiness band: the attacked model's accuracy must stay within two
/// percentage points of the no-attack baseline.
pub const STEALTH_BAND: f64 = 0.02;

/// Mean attack success rate over the last five (or all, when fewer) rounds.
pub fn final_asr(asr_by_round: &[f64]) -> Result<f64> {
    if asr_by_round.is_empty() {
        return Err(Error::config("no round records"));
    }
    let tail = &asr_by_round[asr_by_round.len().saturating_sub(5)..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean attack success rate over all rounds.
pub fn avg_asr(asr_by_round: &[f64]) -> Result<f64> {
    if asr_by_round.is_empty() {
        return Err(Error::config("no round records"));
    }
    Ok(asr_by_round.iter().sum::<f64>() / asr_by_round.len() as f64)
}

/// Final experiment metrics, plus the stealthiness verdict when a no-attack
/// companion run is available.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub final_asr: f64,
    pub avg_asr: f64,
    pub final_ma: f64,
    pub baseline_ma: Option<f64>,
    pub config_digest: String,
}

impl ExperimentSummary {
    pub fn stealth_pass(&self) -> Option<bool> {
        // Tiny slack so a gap of exactly two points passes despite binary
        // rounding of the decimals.
        self.baseline_ma
            .map(|b| (self.final_ma - b).abs() <= STEALTH_BAND + 1e-12)
    }
}

/// One parsed `rounds.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub ma: f64,
    pub asr: f64,
    pub defense: String,
    pub excluded: Vec<usize>,
}

pub const ROUNDS_HEADER: &str = "round,ma,asr,defense,excluded_ids";
pub const SUMMARY_HEADER: &str = "final_asr,avg_asr,final_ma,baseline_ma,stealth_pass";

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Serializes round records with fixed six-decimal formatting.
pub fn rounds_to_csv(records: &[RoundRecord]) -> String {
    let mut s = String::from(ROUNDS_HEADER);
    s.push('\n');
    for r in records {
        let excluded: Vec<String> = r.excluded.iter().map(|id| id.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round,
            fmt6(r.ma),
            fmt6(r.asr),
            r.defense,
            excluded.join(";")
        ));
    }
    s
}

pub fn parse_rounds_csv(text: &str) -> Result<Vec<RoundRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROUNDS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad rounds header {other:?}, expected '{ROUNDS_HEADER}'"
            )))
        }
    }
    lines
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Format(format!("bad rounds row '{line}'")));
            }
            let parse_err = |what: &str| Error::Format(format!("bad {what} in '{line}'"));
            let excluded = if parts[4].is_empty() {
                Vec::new()
            } else {
                parts[4]
                    .split(';')
                    .map(|t| t.parse().map_err(|_| parse_err("excluded id")))
                    .collect::<Result<Vec<usize>>>()?
            };
            Ok(RoundRow {
                round: parts[0].parse().map_err(|_| parse_err("round"))?,
                ma: parts[1].parse().map_err(|_| parse_err("ma"))?,
                asr: parts[2].parse().map_err(|_| parse_err("asr"))?,
                defense: parts[3].to_string(),
                excluded,
            })
        })
        .collect()
}

/// Derives the summary from parsed round rows (the rounded CSV values), so
/// the summary is a pure function of the log file.
pub fn summary_from_rows(
    rows: &[RoundRow],
    baseline_rows: Option<&[RoundRow]>,
    config_digest: String,
) -> Result<ExperimentSummary> {
    if rows.is_empty() {
        return Err(Error::config("no round rows"));
    }
    let asr: Vec<f64> = rows.iter().map(|r| r.asr).collect();
    Ok(ExperimentSummary {
        final_asr: final_asr(&asr)?,
        avg_asr: avg_asr(&asr)?,
        final_ma: rows.last().unwrap().ma,
        baseline_ma: match baseline_rows {
            Some(b) if !b.is_empty() => Some(b.last().unwrap().ma),
            Some(_) => return Err(Error::config("baseline log is empty")),
            None => None,
        },
        config_digest,
    })
}

pub fn summary_to_csv(s: &ExperimentSummary) -> String {
    let baseline = s.baseline_ma.map(fmt6).unwrap_or_default();
    let stealth = match s.stealth_pass() {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "",
    };
    format!(
        "{SUMMARY_HEADER}\n{},{},{},{},{}\n",
        fmt6(s.final_asr),
        fmt6(s.avg_asr),
        fmt6(s.final_ma),
        baseline,
        stealth
    )
}

/// Aligned text block for the CLI.
pub fn render_summary(s: &ExperimentSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("final_asr    {}\n", fmt6(s.final_asr)));
    out.push_str(&format!("avg_asr      {}\n", fmt6(s.avg_asr)));
    out.push_str(&format!("final_ma     {}\n", fmt6(s.final_ma)));
    match s.baseline_ma {
        Some(b) => {
            out.push_str(&format!("baseline_ma  {}\n", fmt6(b)));
            let verdict = if s.stealth_pass() == Some(true) {
                "PASS"
            } else {
                "FAIL"
            };
            out.push_str(&format!("stealth      {verdict}\n"));
        }
        None => out.push_str("baseline_ma  -\n"),
    }
    out.push_str(&format!("config       {}\n", s.config_digest));
    out
}

/// FNV-1a over the canonical config text; a short fingerprint for the logs.
pub fn config_digest(canonical: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Trigger;

    fn record(round: usize, ma: f64, asr: f64, excluded: Vec<usize>) -> RoundRecord {
        RoundRecord {
            round,
            ma,
            asr,
            defense: "median",
            excluded,
            trigger: Trigger::new(vec![0], vec![1.0], 0).unwrap(),
            malicious_benign_cosine: None,
        }
    }

    #[test]
    fn final_asr_last_five_and_short_runs() {
        let asr = [0.1, 0.2, 0.9, 1.0, 0.8, 1.0, 0.8];
        assert!((final_asr(&asr).unwrap() - 0.9).abs() < 1e-12);
        let three = [0.3, 0.6, 0.9];
        assert!((final_asr(&three).unwrap() - 0.6).abs() < 1e-12);
        assert!(final_asr(&[]).is_err());
    }

    #[test]
    fn avg_asr_means_all_rounds() {
        assert_eq!(avg_asr(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(avg_asr(&[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn rounds_csv_round_trips_and_rederives_summary() {
        let records = vec![
            record(0, 0.812345678, 0.1, vec![3, 7]),
            record(1, 0.9, 0.25, vec![]),
            record(2, 0.95, 0.5, vec![1]),
        ];
        let csv = rounds_to_csv(&records);
        let rows = parse_rounds_csv(&csv).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].excluded, vec![3, 7]);
        assert_eq!(rows[0].ma, 0.812346); // six-decimal rounding is canonical
        let summary = summary_from_rows(&rows, None, "deadbeef".into()).unwrap();
        let csv1 = summary_to_csv(&summary);
        // Re-derive from the serialized rounds log: byte identical.
        let rows2 = parse_rounds_csv(&csv).unwrap();
        let summary2 = summary_from_rows(&rows2, None, "deadbeef".into()).unwrap();
        assert_eq!(csv1, summary_to_csv(&summary2));
    }

    #[test]
    fn spreadsheet_recomputation_of_a_stored_log() {
        let csv = "round,ma,asr,defense,excluded_ids\n\
                   0,0.500000,0.100000,median,\n\
                   1,0.600000,0.300000,median,2;4\n\
                   2,0.700000,0.500000,median,\n";
        let rows = parse_rounds_csv(csv).unwrap();
        let s = summary_from_rows(&rows, None, String::new()).unwrap();
        // Hand-recomputed: mean(0.1,0.3,0.5)=0.3 for both windows.
        assert!((s.final_asr - 0.3).abs() < 1e-12);
        assert!((s.avg_asr - 0.3).abs() < 1e-12);
        assert_eq!(s.final_ma, 0.7);
    }

    #[test]
    fn stealth_band_is_two_points() {
        let mk = |ma: f64, baseline: f64| ExperimentSummary {
            final_asr: 0.0,
            avg_asr: 0.0,
            final_ma: ma,
            baseline_ma: Some(baseline),
            config_digest: String::new(),
        };
        assert_eq!(mk(0.90, 0.92).stealth_pass(), Some(true));
        assert_eq!(mk(0.90, 0.921).stealth_pass(), Some(false));
        assert_eq!(mk(0.95, 0.93).stealth_pass(), Some(true));
    }

    #[test]
    fn summary_csv_handles_missing_baseline() {
        let s = ExperimentSummary {
            final_asr: 0.5,
            avg_asr: 0.25,
            final_ma: 0.875,
            baseline_ma: None,
            config_digest: "ab".into(),
        };
        let csv = summary_to_csv(&s);
        assert!(csv.ends_with("0.500000,0.250000,0.875000,,\n"));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(config_digest("a=1"), config_digest("a=1"));
        assert_ne!(config_digest("a=1"), config_digest("a=2"));
    }
}
