//! Per-round metrics records, serialized as line-delimited JSON.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("metrics file is empty")]
    Empty,
    #[error("metrics file has no summary record")]
    MissingSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubmissionStatus {
    Submitted,
    /// Submitted, then left; the update still counts.
    SubmittedThenDropped,
    /// Sealed but never reached the server.
    Lost,
    Dropped,
    Rejected,
    /// Reached the server but failed authentication.
    Tampered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyRoundStatus {
    pub party_id: u32,
    pub status: SubmissionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyScore {
    pub party_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub parties: Vec<PartyRoundStatus>,
    pub krum_scores: Vec<PartyScore>,
    pub selected: Vec<u32>,
    pub discarded: Vec<u32>,
    pub backdoor_success_rate: Option<f64>,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    LossThreshold,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds_executed: u32,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub final_backdoor_success_rate: Option<f64>,
    pub stop_reason: StopReason,
    pub krum_enabled: bool,
    pub krum_k: usize,
    /// Parties configured as adversaries, whatever the server assumes.
    pub attackers: Vec<u32>,
    pub rejected: Vec<u32>,
    /// Every active party decrypted the final broadcast to the server's model.
    pub broadcast_verified: bool,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum MetricsLine {
    Round(RoundRecord),
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rounds: Vec<RoundRecord>,
    pub summary: Option<Summary>,
}

impl MetricsLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rounds {
            serde_json::to_writer(&mut out, &MetricsLine::Round(r.clone()))?;
            out.write_all(b"\n")?;
        }
        if let Some(s) = &self.summary {
            serde_json::to_writer(&mut out, &MetricsLine::Summary(s.clone()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, MetricsError> {
        let mut log = MetricsLog::default();
        let mut any = false;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            any = true;
            let parsed: MetricsLine = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                MetricsLine::Round(r) => log.rounds.push(r),
                MetricsLine::Summary(s) => log.summary = Some(s),
            }
        }
        if !any {
            return Err(MetricsError::Empty);
        }
        Ok(log)
    }

    /// Copy with every wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut log = self.clone();
        for r in &mut log.rounds {
            r.wall_clock_ms = 0.0;
        }
        if let Some(s) = &mut log.summary {
            s.wall_clock_ms = 0.0;
        }
        log
    }

    /// Fraction of recorded rounds in which `party_id` was discarded,
    /// counted over rounds where it was scored.
    pub fn discard_rate(&self, party_id: u32) -> Option<f64> {
        let scored: Vec<&RoundRecord> = self
            .rounds
            .iter()
            .filter(|r| r.krum_scores.iter().any(|s| s.party_id == party_id))
            .collect();
        if scored.is_empty() {
            return None;
        }
        let hits = scored.iter().filter(|r| r.discarded.contains(&party_id)).count();
        Some(hits as f64 / scored.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: u32, discarded: Vec<u32>) -> RoundRecord {
        RoundRecord {
            round,
            global_loss: 0.3,
            global_accuracy: 0.9,
            parties: vec![PartyRoundStatus { party_id: 0, status: SubmissionStatus::Submitted }],
            krum_scores: vec![PartyScore { party_id: 0, score: 1.0 }, PartyScore { party_id: 1, score: 9.0 }],
            selected: vec![0],
            discarded,
            backdoor_success_rate: None,
            wall_clock_ms: 12.5,
        }
    }

    #[test]
    fn jsonl_round_trip_and_timing_strip() {
        let log = MetricsLog {
            rounds: vec![record(1, vec![1]), record(2, vec![])],
            summary: None,
        };
        let text = log.to_jsonl();
        assert!(text.lines().next().unwrap().starts_with("{\"type\":\"round\""));
        let back = MetricsLog::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.without_timing().rounds[0].wall_clock_ms, 0.0);
        assert_eq!(log.discard_rate(1), Some(0.5));
        assert_eq!(log.discard_rate(7), None);
    }

    #[test]
    fn empty_and_garbage_inputs() {
        assert!(matches!(MetricsLog::read_jsonl("".as_bytes()), Err(MetricsError::Empty)));
        assert!(matches!(MetricsLog::read_jsonl("{nope}\n".as_bytes()), Err(MetricsError::Parse { line: 1, .. })));
    }
}
