//! On-disk parameter store: a directory holding `manifest.json` and one raw
//! little-endian float32 blob per tensor under `tensors/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::{ParamGroup, ParamKind};
use super::tensor::{Scalar, Tensor};
use super::{Model, NetworkConfig, Standardization};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ParamGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub fingerprint: String,
    pub encoder_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<NetworkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    pub tensors: Vec<TensorRecord>,
}

/// Named float32 tensors plus their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub manifest: Manifest,
    tensors: BTreeMap<String, Tensor<f32>>,
}

/// What a non-strict load matched and what it skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Model parameters with no archive tensor.
    pub missing: Vec<String>,
    /// Archive tensors the model does not use.
    pub unexpected: Vec<String>,
}

fn checksum(data: &[f32]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in data {
        h.update(&v.to_le_bytes());
    }
    h.finalize()
}

fn to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl WeightArchive {
    /// Snapshot of every tensor in the model, including running statistics.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let store = model.store();
        let mut tensors = BTreeMap::new();
        let mut records = Vec::with_capacity(store.len());
        for (_, e) in store.entries() {
            let t: Tensor<f32> = e.value.cast();
            records.push(TensorRecord {
                name: e.name.clone(),
                shape: t.shape().to_vec(),
                crc32: checksum(t.data()),
                file: format!("tensors/{}.bin", e.name),
                group: Some(e.group),
                kind: Some(e.kind),
            });
            tensors.insert(e.name.clone(), t);
        }
        let config = model.config();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "float32".into(),
            byte_order: "little-endian".into(),
            fingerprint: config.fingerprint(),
            encoder_fingerprint: config.encoder_fingerprint(),
            config: Some(config.clone()),
            standardization: model.standardization().cloned(),
            tensors: records,
        };
        Self { manifest, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|r| r.name.as_str())
    }

    /// Drops a tensor from both the payload and the manifest.
    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.manifest.tensors.retain(|r| r.name != name);
        self.tensors.remove(name)
    }

    /// Total scalar count over tensors of `kind` in `group`.
    pub fn count(&self, group: ParamGroup, kind: ParamKind) -> usize {
        self.manifest
            .tensors
            .iter()
            .filter(|r| r.group == Some(group) && r.kind == Some(kind))
            .map(|r| r.shape.iter().product::<usize>())
            .sum()
    }

    /// Writes into a sibling staging directory, then renames it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = staging_path(dir);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let tensor_dir = staging.join("tensors");
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        for rec in &self.manifest.tensors {
            let t = &self.tensors[&rec.name];
            let path = staging.join(&rec.file);
            fs::write(&path, to_bytes(t.data())).map_err(|e| Error::io(&path, e))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Serialization(e.to_string()))?;
        let mpath = staging.join(MANIFEST_FILE);
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Archive(format!("{}: {e}", mpath.display())))?;
        if manifest.dtype != "float32" || manifest.byte_order != "little-endian" {
            return Err(Error::Archive(format!(
                "unsupported encoding {} / {}",
                manifest.dtype, manifest.byte_order
            )));
        }
        let mut tensors = BTreeMap::new();
        for rec in &manifest.tensors {
            let path = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let expected: usize = rec.shape.iter().product();
            if bytes.len() != expected * 4 {
                return Err(Error::Archive(format!(
                    "tensor {} holds {} bytes, shape {:?} needs {}",
                    rec.name,
                    bytes.len(),
                    rec.shape,
                    expected * 4
                )));
            }
            let data: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if checksum(&data) != rec.crc32 {
                return Err(Error::Archive(format!("checksum mismatch for tensor {}", rec.name)));
            }
            if tensors.insert(rec.name.clone(), Tensor::from_vec(&rec.shape, data)).is_some() {
                return Err(Error::Archive(format!("duplicate tensor {}", rec.name)));
            }
        }
        Ok(Self { manifest, tensors })
    }

    /// Human-readable listing: one line per tensor plus totals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let m = &self.manifest;
        let _ = writeln!(out, "fingerprint          {}", m.fingerprint);
        let _ = writeln!(out, "encoder fingerprint  {}", m.encoder_fingerprint);
        if let Some(c) = &m.config {
            let _ = writeln!(
                out,
                "variant {}  blocks {:?}  growth {}  stem {}  decoder {:?}  frozen encoder {}",
                c.variant, c.encoder_blocks, c.growth_rate, c.stem_channels, c.decoder_widths, c.freeze_encoder
            );
        }
        if let Some(s) = &m.standardization {
            let _ = writeln!(out, "standardization mean {:?} std {:?}", s.mean, s.std);
        }
        let width = m.tensors.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(out, "{:<width$}  {:<20}  {:>10}  crc32", "name", "shape", "elements");
        for r in &m.tensors {
            let n: usize = r.shape.iter().product();
            let _ = writeln!(out, "{:<width$}  {:<20}  {:>10}  {:08x}", r.name, format!("{:?}", r.shape), n, r.crc32);
        }
        let mut totals: BTreeMap<String, usize> = BTreeMap::new();
        for r in &m.tensors {
            if r.kind == Some(ParamKind::Weight) || r.kind.is_none() {
                let key = r.group.map(|g| format!("{g:?}").to_lowercase()).unwrap_or_else(|| "unknown".into());
                *totals.entry(key).or_default() += r.shape.iter().product::<usize>();
            }
        }
        let total: usize = totals.values().sum();
        for (g, n) in &totals {
            let _ = writeln!(out, "parameters[{g}] = {n}");
        }
        let _ = writeln!(out, "parameters[total] = {total}  ({} tensors)", m.tensors.len());
        out
    }
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

impl<T: Scalar> Model<T> {
    /// Rebuilds a model from an archive that carries its configuration.
    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let config = archive
            .manifest
            .config
            .clone()
            .ok_or_else(|| Error::Archive("manifest carries no network configuration".into()))?;
        let mut model = Self::skeleton(config)?;
        model.load_weights(archive, true)?;
        Ok(model)
    }

    /// Copies archive tensors into matching parameters by name.
    ///
    /// Strict mode requires a matching fingerprint and a tensor for every
    /// parameter. Shape mismatches are always errors.
    pub fn load_weights(&mut self, archive: &WeightArchive, strict: bool) -> Result<LoadReport> {
        if strict && archive.manifest.fingerprint != self.config().fingerprint() {
            return Err(Error::Archive(format!(
                "fingerprint {} does not match the configured network ({})",
                archive.manifest.fingerprint,
                self.config().fingerprint()
            )));
        }
        let report = self.copy_tensors(archive, |_| true)?;
        if strict {
            if let Some(name) = report.missing.first() {
                return Err(Error::Archive(format!("archive is missing tensor {name}")));
            }
        }
        self.adopt_standardization(archive);
        Ok(report)
    }

    /// Loads only encoder tensors (pretrained weights), leaving the rest as
    /// initialized. The encoder layouts must agree.
    pub fn load_encoder_weights(&mut self, archive: &WeightArchive) -> Result<LoadReport> {
        if archive.manifest.encoder_fingerprint != self.config().encoder_fingerprint() {
            return Err(Error::Archive(format!(
                "encoder fingerprint {} does not match the configured encoder ({})",
                archive.manifest.encoder_fingerprint,
                self.config().encoder_fingerprint()
            )));
        }
        let report = self.copy_tensors(archive, |g| g == ParamGroup::Encoder)?;
        if let Some(name) = report.missing.first() {
            return Err(Error::Archive(format!("archive is missing encoder tensor {name}")));
        }
        self.adopt_standardization(archive);
        Ok(report)
    }

    fn adopt_standardization(&mut self, archive: &WeightArchive) {
        if let Some(s) = &archive.manifest.standardization {
            self.set_standardization(Some(s.clone()));
        }
    }

    fn copy_tensors(&mut self, archive: &WeightArchive, accept: impl Fn(ParamGroup) -> bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut used = std::collections::HashSet::new();
        let ids: Vec<_> = self
            .store()
            .entries()
            .filter(|(_, e)| accept(e.group))
            .map(|(id, e)| (id, e.name.clone()))
            .collect();
        for (id, name) in ids {
            let Some(src) = archive.tensor(&name) else {
                report.missing.push(name);
                continue;
            };
            let dst = self.store_mut().value_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Archive(format!(
                    "tensor {name} has shape {:?}, the network expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::from_f32(s);
            }
            used.insert(name);
            report.loaded += 1;
        }
        report.unexpected = archive
            .names()
            .filter(|n| !used.contains(*n))
            .filter(|n| match self.store().find(n) {
                Some(id) => accept(self.store().entry(id).group),
                None => true,
            })
            .map(str::to_string)
            .collect();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn checksum_covers_byte_layout() {
        assert_eq!(checksum(&[]), 0);
        assert_ne!(checksum(&[1.0]), checksum(&[-1.0]));
        assert_eq!(to_bytes(&[1.0]), vec![0, 0, 0x80, 0x3f]);
    }

    #[test]
    fn staging_is_a_sibling() {
        assert_eq!(staging_path(Path::new("/a/b/ckpt")), PathBuf::from("/a/b/ckpt.partial"));
    }

    #[test]
    fn summary_lists_every_tensor() {
        let model: Model<f32> = Model::new(NetworkConfig::tiny(Variant::M1), 3).unwrap();
        let archive = WeightArchive::from_model(&model);
        let text = archive.summary();
        assert!(text.contains("precoder.entry.conv.weight"));
        assert!(text.contains("parameters[total]"));
        assert_eq!(archive.names().count(), model.store().len());
    }
}
