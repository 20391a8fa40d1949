//! Append-only JSONL event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::state::Event;
use crate::ReviewError;

pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens (creating if needed) the log and returns every complete event in it.
    /// A torn final line, left by a write that was never acknowledged, is cut off.
    pub fn open(path: &Path) -> Result<(Self, Vec<Event>), ReviewError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut events = Vec::new();
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut lineno = 0usize;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            lineno += 1;
            if !line.ends_with('\n') {
                log::warn!("dropping incomplete trailing entry in {}", path.display());
                break;
            }
            if !line.trim().is_empty() {
                let event = serde_json::from_str(line.trim())
                    .map_err(|e| ReviewError::CorruptLog { line: lineno, reason: e.to_string() })?;
                events.push(event);
            }
            good_len += n as u64;
        }
        drop(reader);
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((EventLog { path: path.to_path_buf(), file }, events))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Returns once the entry is on disk.
    pub fn append(&mut self, event: &Event) -> Result<(), ReviewError> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}
