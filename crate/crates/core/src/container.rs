//! Self-describing model container.
//!
//! Layout: a UTF-8 header of `key value` lines terminated by a line reading
//! `end`, followed by the tensor payloads, little-endian, in the order the
//! header declares them.
//!
//! ```text
//! TABCF-CONTAINER 1
//! kind blackbox
//! meta schema_hash 3f2a…
//! meta net.clf.layers 12x128:relu,128x64:relu,64x32:relu,32x1:sigmoid
//! tensor clf.0.weight f32 12x128
//! …
//! end
//! <raw bytes>
//! ```
//!
//! Network weights are written as `f32`. Tables that live in original feature
//! units (quantile maps) are written as `f64` so decoded values keep their
//! precision.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, DenseNet, Mat};

pub const MAGIC: &str = "TABCF-CONTAINER";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        debug_assert!(!key.contains(char::is_whitespace));
        self.meta.insert(key, value.to_string().replace('\n', " "));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Config(format!("container of kind {:?} lacks meta {key:?}", self.kind)))
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            dtype,
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("container of kind {:?} lacks tensor {name:?}", self.kind)))
    }

    /// Stores a network under `prefix`, recording its layout in the header.
    pub fn push_net(&mut self, prefix: &str, net: &DenseNet) {
        self.set_meta(format!("net.{prefix}.layers"), net.layout());
        for (i, l) in net.layers.iter().enumerate() {
            self.push(
                format!("{prefix}.{i}.weight"),
                DType::F32,
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.as_slice().to_vec(),
            );
            self.push(format!("{prefix}.{i}.bias"), DType::F32, vec![l.bias.len()], l.bias.clone());
        }
    }

    pub fn net(&self, prefix: &str) -> Result<DenseNet> {
        let layout = self.require_meta(&format!("net.{prefix}.layers"))?;
        let mut layers = Vec::new();
        for (i, spec) in layout.split(',').enumerate() {
            let (dims, act) = spec
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad layer spec {spec:?}")))?;
            let (rows, cols) = dims
                .split_once('x')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Config(format!("bad layer dims {dims:?}")))?;
            let w = self.tensor(&format!("{prefix}.{i}.weight"))?;
            let b = self.tensor(&format!("{prefix}.{i}.bias"))?;
            layers.push(Dense {
                weight: Mat::from_vec(rows, cols, w.data.clone())?,
                bias: b.data.clone(),
                activation: Activation::parse(act)?,
            });
        }
        DenseNet::from_layers(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            let shape = t.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            head.push_str(&format!("tensor {} {} {}\n", t.name, t.dtype.name(), if shape.is_empty() { "0".into() } else { shape }));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Container {
            path: origin.to_path_buf(),
            detail,
        };
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))
        };

        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(format!("bad magic line {first:?}")))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }

        let mut c = Container::default();
        let mut decls: Vec<(String, DType, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "kind" => c.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    c.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    if parts.len() != 3 {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    }
                    let dtype = match parts[1] {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        d => return Err(bad(format!("unknown dtype {d}"))),
                    };
                    let shape = if parts[2] == "0" {
                        vec![0]
                    } else {
                        parts[2]
                            .split('x')
                            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {:?}", parts[2]))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    decls.push((parts[0].to_string(), dtype, shape));
                }
                other => return Err(bad(format!("unknown header tag {other:?}"))),
            }
        }

        let mut payload = &bytes[pos..];
        for (name, dtype, shape) in decls {
            let n: usize = shape.iter().product();
            let len = n * dtype.width();
            if payload.len() < len {
                return Err(bad(format!("payload truncated in tensor {name}")));
            }
            let (chunk, rest) = payload.split_at(len);
            payload = rest;
            let data = match dtype {
                DType::F32 => chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            c.tensors.push(Tensor { name, dtype, shape, data });
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Container {
            path: PathBuf::from(path),
            detail: e.to_string(),
        })?;
        Container::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Container {
                path: path.to_path_buf(),
                detail: format!("expected kind {kind:?}, found {:?}", self.kind),
            });
        }
        Ok(())
    }
}

/// Narrows every weight to `f32` precision in place, matching what a
/// save/load round trip would produce.
pub fn quantize_net(net: &mut DenseNet) {
    for p in net.param_slices_mut() {
        p.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
