use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::diffkit::ParamStore;
use crate::error::{CheckpointError, Error, Result};
use crate::lerg_detector::{DetConfig, Detector};
use crate::scalar::Scalar;
use crate::seg_net::{SegConfig, SegNet};

pub const MAGIC: &str = "SGSEGCKPT";
pub const FORMAT_VERSION: &str = "1";
const END: &str = "[end]";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Segmenter,
    Detector,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Segmenter => "segmenter",
            ModelKind::Detector => "detector",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "segmenter" => Some(ModelKind::Segmenter),
            "detector" => Some(ModelKind::Detector),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters in 32-bit form plus the config and run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: KeyValues,
    /// Epoch, validation score, seed and similar run facts.
    pub meta: KeyValues,
    pub params: Vec<StoredParam>,
}

/// First 16 hex digits of SHA-256 over the `key = value` text.
pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn header_err(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Header(m.into())
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(
        kind: ModelKind,
        config: KeyValues,
        meta: KeyValues,
        store: &ParamStore<T>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            kind,
            config,
            meta,
            params,
        }
    }

    pub fn config_hash(&self) -> String {
        hash_text(&self.config.to_text())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}{FORMAT_VERSION}\nkind = {}\n", self.kind.name());
        for (k, v) in self.config.iter() {
            head.push_str(&format!("config.{k} = {v}\n"));
        }
        for (k, v) in self.meta.iter() {
            head.push_str(&format!("meta.{k} = {v}\n"));
        }
        for p in &self.params {
            let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("param {} f32 {}\n", p.name, shape.join(",")));
        }
        head.push_str(END);
        head.push('\n');
        let mut bytes = head.into_bytes();
        for p in &self.params {
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let first_nl = bytes.iter().position(|&b| b == b'\n').ok_or(CheckpointError::BadMagic)?;
        let first = std::str::from_utf8(&bytes[..first_nl]).map_err(|_| CheckpointError::BadMagic)?;
        let version = first.strip_prefix(MAGIC).ok_or(CheckpointError::BadMagic)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let marker = format!("\n{END}\n");
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| header_err("missing end-of-header marker"))?;
        let header = std::str::from_utf8(&bytes[first_nl + 1..end + 1])
            .map_err(|_| header_err("header is not UTF-8"))?;
        let payload = &bytes[end + marker.len()..];

        let mut kind = None;
        let mut config = KeyValues::new();
        let mut meta = KeyValues::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("param ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 || parts[1] != "f32" {
                    return Err(header_err(format!("bad parameter line `{line}`")));
                }
                let shape = if parts[2].is_empty() {
                    Vec::new()
                } else {
                    parts[2]
                        .split(',')
                        .map(|d| d.parse().map_err(|_| header_err(format!("bad shape in `{line}`"))))
                        .collect::<std::result::Result<_, _>>()?
                };
                specs.push((parts[0].to_string(), shape));
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| header_err(format!("bad header line `{line}`")))?;
            if k == "kind" {
                kind = Some(ModelKind::parse(v).ok_or_else(|| header_err(format!("unknown kind `{v}`")))?);
            } else if let Some(k) = k.strip_prefix("config.") {
                config.set(k, v);
            } else if let Some(k) = k.strip_prefix("meta.") {
                meta.set(k, v);
            } else {
                return Err(header_err(format!("unknown header key `{k}`")));
            }
        }
        let kind = kind.ok_or_else(|| header_err("missing kind"))?;
        let expected: usize = specs.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
        if payload.len() < expected {
            return Err(CheckpointError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(header_err(format!(
                "{} trailing bytes after the payload",
                payload.len() - expected
            )));
        }
        let mut off = 0;
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = payload[off..off + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                off += 4 * n;
                StoredParam { name, shape, data }
            })
            .collect();
        Ok(Self {
            kind,
            config,
            meta,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    fn expect_kind(&self, kind: ModelKind) -> std::result::Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                found: self.kind.name().into(),
                expected: kind.name().into(),
            });
        }
        Ok(())
    }

    /// Copies stored values into `store`; names and shapes must match
    /// one to one.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> std::result::Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: "<parameter count>".into(),
                found: self.params.len().to_string(),
                expected: store.len().to_string(),
            });
        }
        for (sp, p) in self.params.iter().zip(store.iter_mut()) {
            if sp.name != p.name || sp.shape != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    found: format!("{} {:?}", sp.name, sp.shape),
                    expected: format!("{} {:?}", p.name, p.value.shape()),
                });
            }
            for (d, &s) in p.value.data_mut().iter_mut().zip(&sp.data) {
                *d = T::lit(s as f64);
            }
        }
        Ok(())
    }
}

fn check_image_size(declared: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(e) if e != declared => Err(CheckpointError::ShapeMismatch {
            name: "image_size".into(),
            found: declared.to_string(),
            expected: e.to_string(),
        }
        .into()),
        _ => Ok(()),
    }
}

pub fn segmenter_checkpoint<T: Scalar>(net: &SegNet<T>, meta: KeyValues) -> Checkpoint {
    let mut config = KeyValues::new();
    net.config.to_kv(&mut config, "");
    Checkpoint::from_store(ModelKind::Segmenter, config, meta, &net.store)
}

pub fn detector_checkpoint<T: Scalar>(det: &Detector<T>, meta: KeyValues) -> Checkpoint {
    let mut config = KeyValues::new();
    det.config.to_kv(&mut config, "");
    Checkpoint::from_store(ModelKind::Detector, config, meta, &det.store)
}

impl Checkpoint {
    /// Rebuilds the segmenter; `image_size` guards against data of another
    /// resolution.
    pub fn segmenter<T: Scalar>(&self, image_size: Option<usize>) -> Result<SegNet<T>> {
        self.expect_kind(ModelKind::Segmenter)?;
        let config = SegConfig::from_kv(&self.config, "")
            .map_err(|e| header_err(format!("segmenter config: {e}")))?;
        check_image_size(config.image_size, image_size)?;
        let mut net = SegNet::new(config, 0)?;
        self.load_into(&mut net.store)?;
        Ok(net)
    }

    pub fn detector<T: Scalar>(&self, image_size: Option<usize>) -> Result<Detector<T>> {
        self.expect_kind(ModelKind::Detector)?;
        let config = DetConfig::from_kv(&self.config, "")
            .map_err(|e| header_err(format!("detector config: {e}")))?;
        check_image_size(config.image_size, image_size)?;
        let mut det = Detector::new(config, 0)?;
        self.load_into(&mut det.store)?;
        Ok(det)
    }
}
