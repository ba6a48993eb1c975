//! Streaming event trace.
//!
//! Every protocol note becomes one line, `time kind node detail`, folded
//! into a running SHA-256. Two runs are behaviorally identical exactly when
//! their trace hashes match. Line retention is optional so long runs don't
//! hold the full text in memory.

use super::msg::{Note, SimTime};
use sha2::{Digest as _, Sha256};

#[derive(Debug)]
pub struct Trace {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    count: u64,
}

impl Trace {
    pub fn new(keep_lines: bool) -> Trace {
        Trace {
            hasher: Sha256::new(),
            lines: keep_lines.then(Vec::new),
            count: 0,
        }
    }

    pub fn record(&mut self, time: SimTime, note: &Note) {
        let line = format!(
            "{} {} {} {}",
            time,
            note.kind.as_str(),
            note.node,
            note.detail.short()
        );
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if let Some(lines) = &mut self.lines {
            lines.push(line);
        }
    }

    pub fn line_count(&self) -> u64 {
        self.count
    }

    /// Final trace hash (hex) and, if retained, the lines.
    pub fn finish(self) -> (String, u64, Option<Vec<String>>) {
        let out: [u8; 32] = self.hasher.finalize().into();
        let hex: String = out.iter().map(|b| format!("{b:02x}")).collect();
        (hex, self.count, self.lines)
    }
}
