//! Detector click streams and the `BTTG` binary time-tag format.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"BTTG"`                        |
//! | 4      | 2    | format version (`1`)                   |
//! | 6      | 2    | reserved, zero                         |
//! | 8      | 8    | timestamp resolution in picoseconds    |
//! | 16     | 9·n  | records: channel `u8` + timestamp `u64` |
//!
//! Channel byte 0 is detector group A, 1 is group B. Timestamps are in units of
//! the header resolution and must be non-decreasing within each channel.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BTTG";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 9;

/// Picoseconds per second.
pub const PS_PER_S: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

impl Channel {
    pub fn code(self) -> u8 {
        match self {
            Channel::A => 0,
            Channel::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Channel::A),
            1 => Some(Channel::B),
            _ => None,
        }
    }

    fn letter(self) -> char {
        match self {
            Channel::A => 'A',
            Channel::B => 'B',
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeTagRecord {
    pub channel: Channel,
    /// Picoseconds since acquisition start.
    pub timestamp: u64,
}

/// Sorted click times of one detector group.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTagStream {
    pub channel: Channel,
    timestamps: Vec<u64>,
    /// Effective acquisition time in seconds (after any gating).
    pub acquisition_time: f64,
}

impl TimeTagStream {
    pub fn new(channel: Channel, timestamps: Vec<u64>, acquisition_time: f64) -> Result<Self> {
        if let Some(index) = first_unsorted(&timestamps) {
            return Err(Error::Unsorted {
                channel: channel.letter(),
                index,
            });
        }
        Ok(Self {
            channel,
            timestamps,
            acquisition_time,
        })
    }

    pub fn from_unsorted(channel: Channel, mut timestamps: Vec<u64>, acquisition_time: f64) -> Self {
        timestamps.sort_unstable();
        Self {
            channel,
            timestamps,
            acquisition_time,
        }
    }

    pub fn empty(channel: Channel, acquisition_time: f64) -> Self {
        Self {
            channel,
            timestamps: Vec::new(),
            acquisition_time,
        }
    }

    #[inline]
    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn into_timestamps(self) -> Vec<u64> {
        self.timestamps
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Copy of the stream delayed by `offset_ps`.
    pub fn shifted(&self, offset_ps: u64) -> Self {
        Self {
            channel: self.channel,
            timestamps: self.timestamps.iter().map(|t| t + offset_ps).collect(),
            acquisition_time: self.acquisition_time,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = TimeTagRecord> + '_ {
        self.timestamps.iter().map(move |&timestamp| TimeTagRecord {
            channel: self.channel,
            timestamp,
        })
    }
}

pub(crate) fn first_unsorted(ts: &[u64]) -> Option<usize> {
    ts.windows(2).position(|w| w[1] < w[0]).map(|i| i + 1)
}

fn header_bytes(resolution_ps: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[8..16].copy_from_slice(&resolution_ps.to_le_bytes());
    h
}

/// Writes a header with 1 ps resolution followed by `records`.
pub fn write_records<W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = TimeTagRecord>,
) -> io::Result<()> {
    w.write_all(&header_bytes(1))?;
    let mut buf = [0u8; RECORD_LEN];
    for r in records {
        buf[0] = r.channel.code();
        buf[1..].copy_from_slice(&r.timestamp.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn write_stream<W: Write>(w: W, stream: &TimeTagStream) -> io::Result<()> {
    write_records(w, stream.records())
}

pub fn encode_stream(stream: &TimeTagStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    write_stream(&mut out, stream).expect("writing to a Vec cannot fail");
    out
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::Malformed {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Decodes a complete file image into records, timestamps scaled to picoseconds.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<TimeTagRecord>> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(malformed(0, "bad magic, expected \"BTTG\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(malformed(4, format!("unsupported format version {version}")));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(malformed(6, "reserved header bytes are not zero"));
    }
    let resolution = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if resolution == 0 {
        return Err(malformed(8, "zero timestamp resolution"));
    }

    let body = &bytes[HEADER_LEN..];
    let mut records = Vec::with_capacity(body.len() / RECORD_LEN);
    let mut last = [None::<u64>; 2];
    for (i, chunk) in body.chunks(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + i * RECORD_LEN;
        if chunk.len() < RECORD_LEN {
            return Err(malformed(offset, "truncated record"));
        }
        let channel = Channel::from_code(chunk[0])
            .ok_or_else(|| malformed(offset, format!("invalid channel byte {}", chunk[0])))?;
        let raw = u64::from_le_bytes(chunk[1..].try_into().unwrap());
        let timestamp = raw
            .checked_mul(resolution)
            .ok_or_else(|| malformed(offset, "timestamp overflows picoseconds"))?;
        let slot = &mut last[channel.code() as usize];
        if matches!(*slot, Some(prev) if timestamp < prev) {
            return Err(malformed(
                offset,
                format!("timestamp decreases within channel {channel}"),
            ));
        }
        *slot = Some(timestamp);
        records.push(TimeTagRecord { channel, timestamp });
    }
    Ok(records)
}

/// Splits decoded records into per-channel timestamp vectors `(A, B)`.
pub fn split_channels(records: &[TimeTagRecord]) -> (Vec<u64>, Vec<u64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in records {
        match r.channel {
            Channel::A => a.push(r.timestamp),
            Channel::B => b.push(r.timestamp),
        }
    }
    (a, b)
}

/// Reads one channel's stream from a file. Records of the other channel are ignored.
pub fn read_stream_file(
    path: impl AsRef<Path>,
    channel: Channel,
    acquisition_time: f64,
) -> Result<TimeTagStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode_records(&bytes)?;
    let (a, b) = split_channels(&records);
    let ts = match channel {
        Channel::A => a,
        Channel::B => b,
    };
    TimeTagStream::new(channel, ts, acquisition_time)
}
