//! JSON file of packed hash codes, as written by `encode` and read by `eval`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::PackedCodes;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodesFile {
    pub bits: usize,
    /// One id per code, in the order of `codes`.
    pub ids: Vec<String>,
    /// Little-endian hex of the packed words.
    pub codes: Vec<String>,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

impl CodesFile {
    /// Query codes first, then gallery codes.
    pub fn new(
        query_ids: &[String],
        query: &PackedCodes,
        gallery_ids: &[String],
        gallery: &PackedCodes,
    ) -> Result<Self> {
        if query.bits() != gallery.bits() {
            return Err(Error::Contract(
                "query and gallery code widths differ".into(),
            ));
        }
        if query.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
            return Err(Error::Contract("code count does not match id count".into()));
        }
        let mut ids = query_ids.to_vec();
        ids.extend_from_slice(gallery_ids);
        let codes = (0..query.len())
            .map(|i| query.to_hex(i))
            .chain((0..gallery.len()).map(|i| gallery.to_hex(i)))
            .collect();
        Ok(CodesFile {
            bits: query.bits(),
            ids,
            codes,
            query_ids: query_ids.to_vec(),
            gallery_ids: gallery_ids.to_vec(),
        })
    }

    /// Codes for `wanted`, in that order.
    pub fn packed(&self, wanted: &[String]) -> Result<PackedCodes> {
        if self.ids.len() != self.codes.len() {
            return Err(Error::Format(format!(
                "{} ids but {} codes",
                self.ids.len(),
                self.codes.len()
            )));
        }
        let at: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let hex = wanted
            .iter()
            .map(|id| {
                at.get(id.as_str())
                    .map(|&i| self.codes[i].clone())
                    .ok_or_else(|| Error::Format(format!("no code for id `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        PackedCodes::from_hex(&hex, self.bits)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
