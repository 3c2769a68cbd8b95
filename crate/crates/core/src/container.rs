//! Versioned binary container: a text header listing named arrays (name,
//! dtype, shape, byte offset) followed by a little-endian payload. The same
//! format backs parameter checkpoints, graph files and dataset trajectories.
//!
//! Layout:
//!
//! ```text
//! LAMCAST-CONTAINER 1\n
//! kind=<kind>\n
//! meta <key>=<value>\n            (zero or more)
//! entry <name> <f64|u64> <d0xd1x...> <byte-offset> <elem-count>\n
//! end\n
//! <payload bytes, little-endian>
//! ```

use crate::error::{LamError, Result};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "LAMCAST-CONTAINER";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U64(_) => "u64",
        }
    }
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// In-memory view of a container file.
#[derive(Debug, Default)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    entries: Vec<Entry>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| LamError::Corrupt(format!("missing meta key '{key}'")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| LamError::Corrupt(format!("meta key '{key}' not parseable")))
    }

    pub fn add_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.add(name, shape, ArrayData::F64(data))
    }

    pub fn add_u64(&mut self, name: &str, shape: Vec<usize>, data: Vec<u64>) -> Result<()> {
        self.add(name, shape, ArrayData::U64(data))
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(LamError::config(format!("bad entry name '{name}'")));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(LamError::config(format!("duplicate entry '{name}'")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(LamError::dim(format!(
                "entry '{name}': shape {:?} vs {} values",
                shape,
                data.len()
            )));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| LamError::Corrupt(format!("missing entry '{name}'")))
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self.entry(name)?;
        match &e.data {
            ArrayData::F64(v) => Ok((&e.shape, v)),
            _ => Err(LamError::Corrupt(format!("entry '{name}' is not f64"))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<(&[usize], &[u64])> {
        let e = self.entry(name)?;
        match &e.data {
            ArrayData::U64(v) => Ok((&e.shape, v)),
            _ => Err(LamError::Corrupt(format!("entry '{name}' is not u64"))),
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut header = String::new();
        header.push_str(&format!("{MAGIC} {VERSION}\n"));
        header.push_str(&format!("kind={}\n", self.kind));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let shape_s = if e.shape.is_empty() {
                "1".to_string()
            } else {
                e.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!(
                "entry {} {} {} {} {}\n",
                e.name,
                e.data.dtype(),
                shape_s,
                offset,
                e.data.len()
            ));
            offset += e.data.len() * 8;
        }
        header.push_str("end\n");

        let mut file = fs::File::create(path)?;
        file.write_all(header.as_bytes())?;
        let mut payload = Vec::with_capacity(offset);
        for e in &self.entries {
            match &e.data {
                ArrayData::F64(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U64(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::parse(&bytes).map_err(|e| match e {
            LamError::Corrupt(msg) => LamError::Corrupt(format!("{}: {msg}", path.display())),
            LamError::Version(msg) => LamError::Version(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| LamError::Corrupt(msg.to_string());
        // header is ASCII lines up to and including "end\n"
        let mut pos = 0usize;
        let mut lines: Vec<&str> = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| corrupt("non-utf8 header"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
            if lines.len() > 1_000_000 {
                return Err(corrupt("header too large"));
            }
        }
        let payload = &bytes[pos..];

        let first = lines.first().ok_or_else(|| corrupt("empty header"))?;
        let mut it = first.split(' ');
        if it.next() != Some(MAGIC) {
            return Err(corrupt("bad magic"));
        }
        let version: u32 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("bad version field"))?;
        if version != VERSION {
            return Err(LamError::Version(format!(
                "container version {version}, expected {VERSION}"
            )));
        }

        let mut out = Container::default();
        for line in &lines[1..] {
            if let Some(kind) = line.strip_prefix("kind=") {
                out.kind = kind.to_string();
            } else if let Some(m) = line.strip_prefix("meta ") {
                let (k, v) = m
                    .split_once('=')
                    .ok_or_else(|| corrupt("bad meta line"))?;
                out.meta.insert(k.to_string(), v.to_string());
            } else if let Some(e) = line.strip_prefix("entry ") {
                let parts: Vec<&str> = e.split(' ').collect();
                if parts.len() != 5 {
                    return Err(corrupt("bad entry line"));
                }
                let name = parts[0].to_string();
                let dtype = parts[1];
                let shape: Vec<usize> = parts[2]
                    .split('x')
                    .map(|d| d.parse().map_err(|_| corrupt("bad shape")))
                    .collect::<Result<_>>()?;
                let offset: usize = parts[3].parse().map_err(|_| corrupt("bad offset"))?;
                let count: usize = parts[4].parse().map_err(|_| corrupt("bad count"))?;
                let end = offset
                    .checked_add(count * 8)
                    .ok_or_else(|| corrupt("entry overflow"))?;
                if end > payload.len() {
                    return Err(corrupt(&format!(
                        "entry '{name}' extends past end of file"
                    )));
                }
                let raw = &payload[offset..end];
                let data = match dtype {
                    "f64" => ArrayData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    ),
                    "u64" => ArrayData::U64(
                        raw.chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    ),
                    other => return Err(corrupt(&format!("unknown dtype '{other}'"))),
                };
                let n: usize = shape.iter().product();
                if n != count {
                    return Err(corrupt(&format!("entry '{name}' shape/count mismatch")));
                }
                out.entries.push(Entry { name, shape, data });
            } else {
                return Err(corrupt(&format!("unrecognized header line '{line}'")));
            }
        }
        Ok(out)
    }
}
