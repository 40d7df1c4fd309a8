// SPDX-License-Identifier: MIT OR Apache-2.0

//! The OLAT container: magic, version, a UTF-8 `key=value` header and raw
//! little-endian sections addressed by absolute byte offsets.
//!
//! ```text
//! 0..4     b"OLAT"
//! 4..8     version, u32 LE
//! 8..16    header length n, u64 LE
//! 16..16+n header text, one `key=value` per line, then one
//!          `section:<name>=<offset>,<length>` line per section
//! ...      section payloads, in table order
//! ```
//!
//! Header values escape `\`, newline and carriage return with a backslash.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OLAT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// Header entries plus named byte sections, both kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    header: Vec<(String, String)>,
    sections: Vec<(String, Vec<u8>)>,
}

/// Location of one section inside a container file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a header key, replacing an existing value.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        assert!(
            !key.contains(['=', '\n', '\r']) && !key.starts_with("section:"),
            "invalid header key {key:?}"
        );
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.header.push((key.to_owned(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(PREAMBLE as u64, format!("missing header key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| {
            Error::format(
                PREAMBLE as u64,
                format!("header key {key:?} has unparsable value {raw:?}"),
            )
        })
    }

    pub fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::format(
                PREAMBLE as u64,
                format!("header key {key:?} is not a boolean: {other:?}"),
            )),
        }
    }

    pub fn header(&self) -> impl Iterator<Item = (&str, &str)> {
        self.header.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn add_section(&mut self, name: &str, bytes: Vec<u8>) {
        assert!(!name.contains(['=', '\n', '\r']), "invalid section name {name:?}");
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = bytes,
            None => self.sections.push((name.to_owned(), bytes)),
        }
    }

    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn require_section(&self, name: &str) -> Result<&[u8]> {
        self.section(name)
            .ok_or_else(|| Error::format(PREAMBLE as u64, format!("missing section {name:?}")))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    /// Section table as it will be laid out on disk.
    pub fn section_table(&self) -> Vec<SectionEntry> {
        let header_len = self.header_text().len();
        self.layout(header_len)
    }

    fn layout(&self, header_len: usize) -> Vec<SectionEntry> {
        let mut offset = (PREAMBLE + header_len) as u64;
        self.sections
            .iter()
            .map(|(name, bytes)| {
                let e = SectionEntry {
                    name: name.clone(),
                    offset,
                    length: bytes.len() as u64,
                };
                offset += e.length;
                e
            })
            .collect()
    }

    /// Header text including the section table. Offsets depend on the header's
    /// own length, so iterate to a fixed point (the length only grows).
    fn header_text(&self) -> String {
        let mut guess = 0usize;
        loop {
            let text = self.render_header(&self.layout(guess));
            if text.len() == guess {
                return text;
            }
            guess = text.len();
        }
    }

    fn render_header(&self, table: &[SectionEntry]) -> String {
        let mut text = String::new();
        for (k, v) in &self.header {
            text.push_str(k);
            text.push('=');
            text.push_str(&escape(v));
            text.push('\n');
        }
        for e in table {
            text.push_str(&format!("section:{}={},{}\n", e.name, e.offset, e.length));
        }
        text
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<()> {
        let header = self.header_text();
        sink.write_all(MAGIC)?;
        sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
        sink.write_all(&(header.len() as u64).to_le_bytes())?;
        sink.write_all(header.as_bytes())?;
        for (_, bytes) in &self.sections {
            sink.write_all(bytes)?;
        }
        sink.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"OLAT\""));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::format(bytes.len() as u64, "truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64).checked_add(header_len);
        let header_end = match header_end {
            Some(end) if end <= bytes.len() as u64 => end as usize,
            _ => {
                return Err(Error::format(
                    8,
                    format!("header length {header_len} runs past end of file ({} bytes)", bytes.len()),
                ))
            }
        };
        let text = std::str::from_utf8(&bytes[PREAMBLE..header_end]).map_err(|e| {
            Error::format((PREAMBLE + e.valid_up_to()) as u64, "header is not valid UTF-8")
        })?;

        let mut container = Container::new();
        let mut table = Vec::new();
        let mut line_offset = PREAMBLE;
        for line in text.split_inclusive('\n') {
            let at = line_offset as u64;
            line_offset += line.len();
            let line = line.trim_end_matches('\n');
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("header line without '=': {line:?}")))?;
            if let Some(name) = key.strip_prefix("section:") {
                let parsed = value
                    .split_once(',')
                    .and_then(|(o, l)| Some((o.parse::<u64>().ok()?, l.parse::<u64>().ok()?)));
                let (offset, length) = parsed.ok_or_else(|| {
                    Error::format(at, format!("malformed section entry for {name:?}: {value:?}"))
                })?;
                table.push(SectionEntry {
                    name: name.to_owned(),
                    offset,
                    length,
                });
            } else {
                let value = unescape(value)
                    .ok_or_else(|| Error::format(at, format!("bad escape in value of {key:?}")))?;
                container.header.push((key.to_owned(), value));
            }
        }

        let file_len = bytes.len() as u64;
        for e in &table {
            let end = e.offset.checked_add(e.length);
            if e.offset < header_end as u64 || end.is_none_or(|end| end > file_len) {
                return Err(Error::format(
                    e.offset,
                    format!(
                        "section {:?} ({} bytes at {}) lies outside the data region [{header_end}, {file_len})",
                        e.name, e.length, e.offset
                    ),
                ));
            }
        }
        let mut sorted: Vec<&SectionEntry> = table.iter().collect();
        sorted.sort_by_key(|e| e.offset);
        for pair in sorted.windows(2) {
            if pair[0].offset + pair[0].length > pair[1].offset {
                return Err(Error::format(
                    pair[1].offset,
                    format!("section {:?} overlaps section {:?}", pair[1].name, pair[0].name),
                ));
            }
        }
        for e in table {
            let start = e.offset as usize;
            let bytes = bytes[start..start + e.length as usize].to_vec();
            container.sections.push((e.name, bytes));
        }
        Ok(container)
    }
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for ch in v.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str) -> Option<String> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(ch) = chars.next() {
        if ch == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                'n' => out.push('\n'),
                'r' => out.push('\r'),
                _ => return None,
            }
        } else {
            out.push(ch);
        }
    }
    Some(out)
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32s(name: &str, bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(0, format!("section {name:?} length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_f64s(name: &str, bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::format(0, format!("section {name:?} length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
