// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{PmemError, Result, GRANULE_SIZE};

/// One recorded persistence-relevant event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Store { seq: u64, addr: u64, data: Vec<u8> },
    StoreNt { seq: u64, addr: u64, data: Vec<u8> },
    /// Covers exactly one 64-byte line.
    Flush { seq: u64, line: u64 },
    Fence { seq: u64 },
}

impl TraceEvent {
    pub fn seq(&self) -> u64 {
        match self {
            TraceEvent::Store { seq, .. }
            | TraceEvent::StoreNt { seq, .. }
            | TraceEvent::Flush { seq, .. }
            | TraceEvent::Fence { seq } => *seq,
        }
    }

    pub fn is_fence(&self) -> bool {
        matches!(self, TraceEvent::Fence { .. })
    }

    /// Granule split of a store payload; empty for flush and fence.
    pub fn granules(&self) -> Vec<(u64, &[u8])> {
        match self {
            TraceEvent::Store { addr, data, .. } | TraceEvent::StoreNt { addr, data, .. } => {
                granules(*addr, data).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Text form: `S <addr> <len> <hex>`, `N <addr> <len> <hex>`,
    /// `F <line_addr>`, `M`.
    pub fn to_line(&self) -> String {
        match self {
            TraceEvent::Store { addr, data, .. } => {
                format!("S {} {} {}", addr, data.len(), hex(data))
            }
            TraceEvent::StoreNt { addr, data, .. } => {
                format!("N {} {} {}", addr, data.len(), hex(data))
            }
            TraceEvent::Flush { line, .. } => format!("F {line}"),
            TraceEvent::Fence { .. } => "M".to_string(),
        }
    }
}

/// Splits `data` stored at `addr` into pieces that never straddle an
/// 8-byte-aligned boundary.
pub fn granules(addr: u64, data: &[u8]) -> impl Iterator<Item = (u64, &[u8])> {
    let mut pos = 0usize;
    std::iter::from_fn(move || {
        if pos >= data.len() {
            return None;
        }
        let a = addr + pos as u64;
        let room = (GRANULE_SIZE - (a % GRANULE_SIZE)) as usize;
        let n = room.min(data.len() - pos);
        let piece = &data[pos..pos + n];
        pos += n;
        Some((a, piece))
    })
}

fn hex(data: &[u8]) -> String {
    let mut s = String::with_capacity(data.len() * 2);
    for b in data {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn unhex(s: &str, line: usize) -> Result<Vec<u8>> {
    let bad = |reason: &str| PmemError::BadTrace {
        line,
        reason: reason.to_string(),
    };
    if s.len() % 2 != 0 {
        return Err(bad("odd hex length"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| bad("bad hex digit")))
        .collect()
}

/// Renders a trace in the one-event-per-line text format.
pub fn dump_trace(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&ev.to_line());
        out.push('\n');
    }
    out
}

/// Parses the text format back into events; sequence numbers are
/// reassigned from zero.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let bad = |reason: &str| PmemError::BadTrace {
            line: line_no,
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = raw.split_whitespace().collect();
        let seq = events.len() as u64;
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad number"));
        let ev = match parts.as_slice() {
            ["S", addr, len, data] | ["N", addr, len, data] => {
                let addr = num(addr)?;
                let data = unhex(data, line_no)?;
                if data.len() as u64 != num(len)? {
                    return Err(bad("length does not match payload"));
                }
                if parts[0] == "S" {
                    TraceEvent::Store { seq, addr, data }
                } else {
                    TraceEvent::StoreNt { seq, addr, data }
                }
            }
            ["F", line] => TraceEvent::Flush {
                seq,
                line: num(line)?,
            },
            ["M"] => TraceEvent::Fence { seq },
            _ => return Err(bad("unknown event")),
        };
        events.push(ev);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granule_split_at_page_boundary() {
        let data = [1u8, 2, 3, 4];
        let parts: Vec<_> = granules(4094, &data).collect();
        assert_eq!(parts, vec![(4094, &data[..2]), (4096, &data[2..])]);
    }

    #[test]
    fn aligned_store_is_whole_granules() {
        let data = [7u8; 24];
        let parts: Vec<_> = granules(64, &data).map(|(a, d)| (a, d.len())).collect();
        assert_eq!(parts, vec![(64, 8), (72, 8), (80, 8)]);
    }

    #[test]
    fn text_round_trip() {
        let events = vec![
            TraceEvent::Store { seq: 0, addr: 8, data: vec![0xab, 0xcd] },
            TraceEvent::StoreNt { seq: 1, addr: 64, data: vec![1; 3] },
            TraceEvent::Flush { seq: 2, line: 0 },
            TraceEvent::Fence { seq: 3 },
        ];
        let text = dump_trace(&events);
        assert_eq!(text.lines().next(), Some("S 8 2 abcd"));
        assert_eq!(parse_trace(&text).unwrap(), events);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_trace("S 1 2 abc").is_err());
        assert!(parse_trace("X").is_err());
        assert!(parse_trace("S 0 3 abcd").is_err());
    }
}
