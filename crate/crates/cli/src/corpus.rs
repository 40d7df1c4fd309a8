// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading input corpora and writing outputs atomically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use olakit::container::Container;
use olakit::mapfile::{map_from_container, StoredMap};
use olakit::ola::Order;
use olakit::preprocess::{make_stack, trace_stack, PreprocessConfig};
use olakit::trace::{trace_from_container, AttentionTrace};
use olakit::{Error, OlaStack};
use rayon::prelude::*;

/// A decoded input file.
pub enum Item {
    Trace(AttentionTrace),
    Map(StoredMap<f64>),
    /// Any other container kind, kept for commands that understand it.
    Other(Container),
}

/// `path` itself when it is a file, else the `.olat` files directly inside
/// it in name order.
pub fn input_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = std::fs::metadata(path)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", path.display()))?;
    if meta.is_file() {
        return Ok(vec![path.to_owned()]);
    }
    let mut files = Vec::new();
    let entries = std::fs::read_dir(path)
        .map_err(Error::Io)
        .with_context(|| format!("listing {}", path.display()))?;
    for entry in entries {
        let p = entry.map_err(Error::Io)?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "olat") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty("input directory holds no .olat files")).with_context(|| path.display().to_string());
    }
    Ok(files)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", path.display()))?;
    Container::from_bytes(&bytes).with_context(|| path.display().to_string())
}

pub fn decode(path: &Path) -> Result<Item> {
    let c = read_container(path)?;
    let item = match c.get("kind") {
        Some("map") => Item::Map(map_from_container(&c)?),
        Some("trace") | None => Item::Trace(trace_from_container(&c)?),
        Some(_) => Item::Other(c),
    };
    Ok(item)
}

/// Every input file decoded, in file order.
pub fn load(path: &Path) -> Result<Vec<(PathBuf, Item)>> {
    input_files(path)?
        .into_par_iter()
        .map(|p| {
            let item = decode(&p).with_context(|| p.display().to_string())?;
            Ok((p, item))
        })
        .collect()
}

/// Preprocessed stacks of the requested orders, one per (model, text),
/// sorted by model then text. Traces are decomposed on the fly; map files
/// must cover every requested order.
pub fn stacks(items: &[(PathBuf, Item)], orders: &[Order], preprocess: &PreprocessConfig) -> Result<Vec<OlaStack>> {
    preprocess.validate()?;
    let mut maps: BTreeMap<(String, String), Vec<&StoredMap<f64>>> = BTreeMap::new();
    let mut traces = Vec::new();
    for (p, item) in items {
        match item {
            Item::Trace(t) => traces.push((p, t)),
            Item::Map(m) => maps
                .entry((m.map.model_id.clone(), m.map.text_id.clone()))
                .or_default()
                .push(m),
            Item::Other(c) => {
                return Err(invalid(format!(
                    "{}: {:?} files cannot be stacked",
                    p.display(),
                    c.get("kind").unwrap_or("")
                )))
            }
        }
    }
    let mut out: Vec<OlaStack> = traces
        .par_iter()
        .map(|(p, t)| trace_stack(t, orders, preprocess).with_context(|| p.display().to_string()))
        .collect::<Result<_>>()?;
    let from_maps: Vec<OlaStack> = maps
        .into_par_iter()
        .map(|((model, text), found)| {
            let selected = orders
                .iter()
                .map(|o| {
                    found
                        .iter()
                        .find(|m| m.map.order == *o)
                        .ok_or_else(|| invalid(format!("no order {o} map for model {model:?}, text {text:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let cfg = PreprocessConfig {
                causal: preprocess.causal || selected.iter().any(|m| m.causal),
                ..*preprocess
            };
            let owned: Vec<olakit::OlaMap> = selected.iter().map(|m| m.map.clone()).collect();
            Ok(make_stack(&owned, &cfg)?)
        })
        .collect::<Result<_>>()?;
    out.extend(from_maps);
    out.sort_by(|a, b| (&a.model_id, &a.text_id).cmp(&(&b.model_id, &b.text_id)));
    if let Some(w) = out.windows(2).find(|w| (&w[0].model_id, &w[0].text_id) == (&w[1].model_id, &w[1].text_id)) {
        return Err(invalid(format!(
            "text {:?} of model {:?} appears twice",
            w[0].text_id, w[0].model_id
        )));
    }
    Ok(out)
}

/// A validation failure about the inputs (exit code 1).
pub fn invalid(message: impl Into<String>) -> anyhow::Error {
    Error::Validation {
        field: "input".into(),
        message: message.into(),
    }
    .into()
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)
        .map_err(Error::Io)
        .with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(Error::Io)
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(Error::Io)
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| Error::Io(e.error))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
