//! Checkpoint files: a UTF-8 text manifest followed by one little-endian
//! `f32` blob.
//!
//! ```text
//! SASCKPT 1
//! meta backbone.d 32
//! ...
//! tensor backbone.patch_w 16x32 0 512
//! ...
//! blob 123456
//! <raw bytes>
//! ```
//!
//! `meta` lines carry a key and the rest of the line as value. `tensor`
//! lines carry name, shape (`x`-separated extents), byte offset into the
//! blob and element count. Tensors are laid out back to back in manifest
//! order, so writing a loaded checkpoint reproduces the original bytes.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "SASCKPT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        assert!(
            !key.is_empty() && !key.contains(char::is_whitespace),
            "meta key {key:?}"
        );
        let value = value.to_string();
        assert!(!value.contains('\n'), "meta value must be one line");
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Required meta value parsed as `V`.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing meta key {key}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad value {raw:?} for {key}")).into())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        assert!(!name.is_empty() && !name.contains(char::is_whitespace));
        self.tensors.push((name, t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix.`, in file order, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(&str, &Tensor<f32>)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest, t)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
            manifest.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                shape.join("x"),
                t.numel()
            ));
            offset += t.numel() * 4;
        }
        manifest.push_str(&format!("blob {offset}\n"));
        let mut bytes = manifest.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: String| Error::from(CheckpointError::Malformed(m));
        let mut pos = 0usize;
        let next_line =|pos: &mut usize| -> Result<&str> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| malformed("unterminated manifest".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| malformed("manifest is not UTF-8".into()))?;
            *pos += end + 1;
            Ok(line)
        };

        let header = next_line(&mut pos)?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| malformed(format!("bad header {header:?}")))?
            .parse::<u32>()
            .map_err(|_| malformed(format!("bad version in {header:?}")))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            }
            .into());
        }

        let mut ckpt = Checkpoint::new();
        let mut layout: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let blob_len = loop {
            let line = next_line(&mut pos)?;
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, shape, offset, count] = f[..] else {
                        return Err(malformed(format!("bad tensor line {line:?}")));
                    };
                    let shape = shape
                        .split('x')
                        .map(|e| e.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| malformed(format!("bad shape in {line:?}")))?;
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| malformed(format!("bad offset in {line:?}")))?;
                    let count: usize = count
                        .parse()
                        .map_err(|_| malformed(format!("bad count in {line:?}")))?;
                    layout.push((name.to_string(), shape, offset, count));
                }
                "blob" => {
                    break rest
                        .parse::<usize>()
                        .map_err(|_| malformed(format!("bad blob line {line:?}")))?;
                }
                _ => return Err(malformed(format!("unknown manifest line {line:?}"))),
            }
        };

        let blob = &bytes[pos..];
        if blob.len() != blob_len {
            return Err(CheckpointError::LengthMismatch {
                expected: blob_len,
                found: blob.len(),
            }
            .into());
        }
        let mut expected_offset = 0usize;
        for (name, shape, offset, count) in layout {
            if offset != expected_offset || shape.iter().product::<usize>() != count {
                return Err(malformed(format!("inconsistent layout for tensor {name}")));
            }
            let end = offset + count * 4;
            if end > blob_len {
                return Err(CheckpointError::LengthMismatch {
                    expected: end,
                    found: blob_len,
                }
                .into());
            }
            let data = blob[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| malformed(e.to_string()))?;
            ckpt.tensors.push((name, t));
            expected_offset = end;
        }
        if expected_offset != blob_len {
            return Err(CheckpointError::LengthMismatch {
                expected: expected_offset,
                found: blob_len,
            }
            .into());
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CheckpointError::Missing(path.to_path_buf()).into(),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}
