// SPDX-License-Identifier: MIT OR Apache-2.0

//! Order-level maps on disk.
//!
//! One OLAT container per (model, text, order), named
//! `<model>_<text>_<order>.olat`, with the matrix in a 64-bit `map` section.

use std::path::Path;

use crate::container::{f64_bytes, read_f64s, Container};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ola::OlaMap;
use crate::scalar::Scalar;

/// A map together with the trace facts needed to preprocess it later.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMap<T> {
    pub map: OlaMap<T>,
    pub causal: bool,
    pub num_layers: usize,
}

/// File name for a map: `<model>_<text>_<order>.olat`.
pub fn map_file_name<T>(map: &OlaMap<T>) -> String {
    format!("{}_{}_{}.olat", map.model_id, map.text_id, map.order)
}

pub fn map_container<T: Scalar>(stored: &StoredMap<T>) -> Container {
    let m = &stored.map;
    let mut c = Container::new();
    c.set("kind", "map");
    c.set("dtype", "f64");
    c.set("model_id", &m.model_id);
    c.set("text_id", &m.text_id);
    c.set("order", m.order);
    c.set("causal", stored.causal);
    c.set("num_layers", stored.num_layers);
    c.set("rows", m.matrix.rows());
    c.set("cols", m.matrix.cols());
    let values: Vec<f64> = m.matrix.as_slice().iter().map(|v| v.as_f64()).collect();
    c.add_section("map", f64_bytes(&values));
    c
}

pub fn map_from_container<T: Scalar>(c: &Container) -> Result<StoredMap<T>> {
    if c.get("kind") != Some("map") {
        return Err(Error::format(16, "not a map container"));
    }
    let rows: usize = c.parse("rows")?;
    let cols: usize = c.parse("cols")?;
    let values = read_f64s("map", c.require_section("map")?)?;
    if values.len() != rows * cols {
        return Err(Error::format(16, format!("map section holds {} values, expected {}", values.len(), rows * cols)));
    }
    Ok(StoredMap {
        map: OlaMap {
            order: c.require("order")?.parse()?,
            matrix: Matrix::from_vec(rows, cols, values.into_iter().map(T::of).collect())?,
            model_id: c.require("model_id")?.to_owned(),
            text_id: c.require("text_id")?.to_owned(),
        },
        causal: c.parse_bool("causal")?,
        num_layers: c.parse("num_layers")?,
    })
}

pub fn read_map_file<T: Scalar>(path: impl AsRef<Path>) -> Result<StoredMap<T>> {
    let bytes = std::fs::read(path)?;
    map_from_container(&Container::from_bytes(&bytes)?)
}
