//! Checkpoint directories: one NDT1 file per parameter plus `manifest.txt`.
//!
//! Manifest format, one record per line:
//!
//! ```text
//! config_hash <sha256 hex>
//! param <name> <group> <d0xd1x...> <file>
//! ```

use std::fs;
use std::path::Path;

use super::dit::AnimaModel;
use super::params::ParamGroup;
use crate::error::{Error, Result};
use crate::tensor::io;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub dims: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!("config_hash {}\n", self.config_hash);
        for e in &self.entries {
            let dims: Vec<String> = e.dims.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("param {} {} {} {}\n", e.name, e.group, dims.join("x"), e.file));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut hash = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Manifest(format!("line {}: malformed record {line:?}", n + 1));
            match fields.as_slice() {
                [] => continue,
                ["config_hash", h] => hash = Some(h.to_string()),
                ["param", name, group, dims, file] => {
                    let dims =
                        dims.split('x').map(|d| d.parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
                    let group = group.parse().map_err(|_| bad())?;
                    entries.push(ManifestEntry { name: name.to_string(), group, dims, file: file.to_string() });
                }
                _ => return Err(bad()),
            }
        }
        let config_hash = hash.ok_or_else(|| Error::Manifest("missing config_hash record".into()))?;
        Ok(Self { config_hash, entries })
    }
}

pub fn save(model: &AnimaModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(model.store.len());
    for (id, p) in model.store.iter() {
        let file = format!("{:04}_{}.ndt", id.index(), p.name);
        io::save(&p.value, dir.join(&file))?;
        entries.push(ManifestEntry { name: p.name.clone(), group: p.group, dims: p.value.dims().to_vec(), file });
    }
    let manifest = Manifest { config_hash: model.cfg.config_hash(), entries };
    fs::write(dir.join(MANIFEST), manifest.render())?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.as_ref().join(MANIFEST))?)
}

/// Overwrites every parameter of `model` from `dir`; the config hash, names,
/// groups and shapes must all match.
pub fn load_into(model: &mut AnimaModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.config_hash != model.cfg.config_hash() {
        return Err(Error::Manifest(format!(
            "checkpoint config hash {} does not match model {}",
            manifest.config_hash,
            model.cfg.config_hash()
        )));
    }
    if manifest.entries.len() != model.store.len() {
        return Err(Error::Manifest(format!(
            "checkpoint holds {} parameters, model has {}",
            manifest.entries.len(),
            model.store.len()
        )));
    }
    for e in &manifest.entries {
        let id = model.store.find(&e.name).ok_or_else(|| Error::Manifest(format!("unknown parameter {}", e.name)))?;
        let p = model.store.param(id);
        if p.group != e.group || p.value.dims() != e.dims.as_slice() {
            return Err(Error::Manifest(format!("parameter {} differs in group or shape", e.name)));
        }
        let t = io::load(dir.join(&e.file))?;
        if t.dims() != e.dims.as_slice() {
            return Err(Error::Manifest(format!("file {} holds {:?}, manifest says {:?}", e.file, t.dims(), e.dims)));
        }
        *model.store.get_mut(id) = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let m = Manifest {
            config_hash: "ab12".into(),
            entries: vec![ManifestEntry {
                name: "blocks.0.attn.wq.w".into(),
                group: ParamGroup::FullAttention,
                dims: vec![8, 8],
                file: "0001_blocks.0.attn.wq.w.ndt".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("param a b c").is_err());
        assert!(Manifest::parse("").is_err());
    }
}
