//! Append-only session log. One JSON object per line:
//! `{"crc32":"<8 hex>","header":{...}}` first, then
//! `{"crc32":"<8 hex>","entry":{...}}` per record. The checksum covers the
//! exact bytes of the embedded object.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::calibration::FittedWeight;
use super::plan::StudyKind;
use super::trial::TrialRecord;
use super::SessionError;

pub const LOG_FORMAT: &str = "colorvib-session";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub format: String,
    pub version: u32,
    pub participant: String,
    pub kind: StudyKind,
    pub seed: u64,
    pub image_sets: u32,
}

impl SessionHeader {
    pub fn new(participant: &str, kind: StudyKind, seed: u64, image_sets: u32) -> Self {
        Self {
            format: LOG_FORMAT.to_string(),
            version: LOG_VERSION,
            participant: participant.to_string(),
            kind,
            seed,
            image_sets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    CalibrationFit(FittedWeight),
    Trial(TrialRecord),
}

fn encode_line<T: Serialize>(key: &str, value: &T) -> Result<String, SessionError> {
    let body = serde_json::to_string(value).map_err(|e| SessionError::StorageFailure(e.to_string()))?;
    Ok(format!("{{\"crc32\":\"{:08x}\",\"{key}\":{body}}}\n", crc32fast::hash(body.as_bytes())))
}

fn decode_line<T: for<'de> Deserialize<'de>>(line: &str, key: &str) -> Result<T, String> {
    let prefix_len = "{\"crc32\":\"".len();
    let crc_hex = line.get(prefix_len..prefix_len + 8).ok_or("line too short")?;
    let rest = &line[prefix_len + 8..];
    let tag = format!("\",\"{key}\":");
    if !line.starts_with("{\"crc32\":\"") || !rest.starts_with(&tag) || !line.ends_with('}') {
        return Err(format!("not a {key} line"));
    }
    let body = &rest[tag.len()..rest.len() - 1];
    let expected = u32::from_str_radix(crc_hex, 16).map_err(|_| "bad checksum field".to_string())?;
    if crc32fast::hash(body.as_bytes()) != expected {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(body).map_err(|e| e.to_string())
}

/// Renders a complete log. Reading a log and rendering it again gives the
/// same bytes.
pub fn serialize_log(header: &SessionHeader, entries: &[LogEntry]) -> Result<String, SessionError> {
    let mut out = encode_line("header", header)?;
    for e in entries {
        out.push_str(&encode_line("entry", e)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLog {
    pub header: SessionHeader,
    pub entries: Vec<LogEntry>,
    pub warnings: Vec<String>,
    /// Byte length of the intact prefix.
    pub valid_len: usize,
}

/// Parses a log. An unterminated or unreadable final line is treated as an
/// interrupted write and dropped with a warning; damage anywhere else is an
/// error.
pub fn parse_log(text: &str) -> Result<LoadedLog, SessionError> {
    let mut lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut warnings = Vec::new();
    let mut valid_len = text.len();
    let last_bad = lines.last().is_some_and(|l| {
        !l.ends_with('\n') || decode_line::<LogEntry>(l.trim_end_matches('\n'), "entry").is_err()
    });
    if last_bad && lines.len() > 1 {
        let dropped = lines.pop().expect("non-empty");
        valid_len -= dropped.len();
        warnings.push(format!("dropped incomplete final record ({} bytes)", dropped.len()));
    }
    let mut iter = lines.into_iter().enumerate();
    let header: SessionHeader = match iter.next() {
        Some((_, l)) if l.ends_with('\n') => decode_line(l.trim_end_matches('\n'), "header")
            .map_err(|reason| SessionError::LogCorrupt { line: 1, reason })?,
        _ => {
            return Err(SessionError::LogCorrupt {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    if header.format != LOG_FORMAT || header.version != LOG_VERSION {
        return Err(SessionError::UnsupportedVersion {
            found: format!("{} v{}", header.format, header.version),
            expected: format!("{LOG_FORMAT} v{LOG_VERSION}"),
        });
    }
    let mut entries = Vec::new();
    for (i, l) in iter {
        let entry = decode_line(l.trim_end_matches('\n'), "entry")
            .map_err(|reason| SessionError::LogCorrupt { line: i + 1, reason })?;
        entries.push(entry);
    }
    for w in &warnings {
        log::warn!("session log: {w}");
    }
    Ok(LoadedLog {
        header,
        entries,
        warnings,
        valid_len,
    })
}

/// Open log file. Every append is flushed to disk before it returns.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
    trials: BTreeSet<u32>,
    fits: BTreeSet<u32>,
}

fn storage(e: std::io::Error) -> SessionError {
    SessionError::StorageFailure(e.to_string())
}

impl SessionLog {
    /// Creates a new log; fails if the file already exists.
    pub fn create(path: &Path, header: &SessionHeader) -> Result<Self, SessionError> {
        let mut file = OpenOptions::new().create_new(true).append(true).open(path).map_err(storage)?;
        file.write_all(encode_line("header", header)?.as_bytes()).map_err(storage)?;
        file.sync_all().map_err(storage)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            trials: BTreeSet::new(),
            fits: BTreeSet::new(),
        })
    }

    /// Opens an existing log, cutting off an interrupted final record.
    pub fn open(path: &Path) -> Result<(Self, LoadedLog), SessionError> {
        let mut text = String::new();
        File::open(path).and_then(|mut f| f.read_to_string(&mut text)).map_err(storage)?;
        let loaded = parse_log(&text)?;
        let file = OpenOptions::new().append(true).open(path).map_err(storage)?;
        if loaded.valid_len < text.len() {
            file.set_len(loaded.valid_len as u64).map_err(storage)?;
            file.sync_all().map_err(storage)?;
        }
        let mut log = Self {
            path: path.to_path_buf(),
            file,
            trials: BTreeSet::new(),
            fits: BTreeSet::new(),
        };
        for e in &loaded.entries {
            log.register(e)?;
        }
        Ok((log, loaded))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn register(&mut self, entry: &LogEntry) -> Result<(), SessionError> {
        let fresh = match entry {
            LogEntry::Trial(t) => self.trials.insert(t.trial),
            LogEntry::CalibrationFit(f) => self.fits.insert(f.r),
        };
        if fresh {
            Ok(())
        } else {
            Err(SessionError::DuplicateRecord(match entry {
                LogEntry::Trial(t) => format!("trial {}", t.trial),
                LogEntry::CalibrationFit(f) => format!("calibration fit at r={}", f.r),
            }))
        }
    }

    pub fn contains_trial(&self, index: u32) -> bool {
        self.trials.contains(&index)
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), SessionError> {
        let line = encode_line("entry", entry)?;
        let duplicate = match entry {
            LogEntry::Trial(t) => self.trials.contains(&t.trial),
            LogEntry::CalibrationFit(f) => self.fits.contains(&f.r),
        };
        if duplicate {
            return self.register(entry);
        }
        self.file.write_all(line.as_bytes()).map_err(storage)?;
        self.file.sync_data().map_err(storage)?;
        self.register(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psychometry::PerceptState;
    use crate::session::plan::ThresholdTrial;
    use crate::session::trial::{PhaseTimes, TrialOutcome};

    fn record(trial: u32) -> LogEntry {
        LogEntry::Trial(TrialRecord {
            trial,
            times: PhaseTimes {
                fixation_s: None,
                target_s: None,
                stimulus_s: f64::from(trial) + 0.1,
                response_s: f64::from(trial) + 0.7,
                questionnaire_s: None,
            },
            outcome: TrialOutcome::Threshold {
                spec: ThresholdTrial {
                    r: 15.0,
                    d_mm: 60,
                    l_mm: 71,
                    vibrating_index: Some(2),
                },
                w: 0.54,
                state: PerceptState::DifferentNotFlickering,
                location_chosen: Some(1),
            },
        })
    }

    fn header() -> SessionHeader {
        SessionHeader::new("p01", StudyKind::Threshold, 9, 6)
    }

    #[test]
    fn line_layout() {
        let line = encode_line("entry", &record(0)).unwrap();
        assert!(line.starts_with("{\"crc32\":\""));
        assert!(line.ends_with("}\n"));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["entry"]["type"], "trial");
        assert_eq!(v["entry"]["outcome"]["kind"], "threshold");
        let back: LogEntry = decode_line(line.trim_end(), "entry").unwrap();
        assert_eq!(back, record(0));
    }

    #[test]
    fn checksum_detects_edits() {
        let line = encode_line("entry", &record(0)).unwrap().replace("0.54", "0.56");
        assert!(decode_line::<LogEntry>(line.trim_end(), "entry").unwrap_err().contains("checksum"));
    }

    #[test]
    fn file_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut log = SessionLog::create(&path, &header()).unwrap();
        assert!(SessionLog::create(&path, &header()).is_err());
        for i in 0..3 {
            log.append(&record(i)).unwrap();
        }
        assert!(matches!(log.append(&record(1)), Err(SessionError::DuplicateRecord(_))));
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        let (_, loaded) = SessionLog::open(&path).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(serialize_log(&loaded.header, &loaded.entries).unwrap(), text);
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let full = serialize_log(&header(), &[record(0), record(1)]).unwrap();
        std::fs::write(&path, &full[..full.len() - 20]).unwrap();
        let (mut log, loaded) = SessionLog::open(&path).unwrap();
        assert_eq!(loaded.entries, vec![record(0)]);
        assert_eq!(loaded.warnings.len(), 1);
        log.append(&record(1)).unwrap();
        drop(log);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), full);
    }

    #[test]
    fn damage_before_the_tail_is_an_error() {
        let full = serialize_log(&header(), &[record(0), record(1)]).unwrap();
        let damaged = full.replacen("0.54", "0.58", 1);
        assert!(matches!(parse_log(&damaged), Err(SessionError::LogCorrupt { line: 2, .. })));
        assert!(parse_log("").is_err());
        let foreign = full.replace(LOG_FORMAT, "other");
        assert!(parse_log(&foreign).is_err());
    }
}
