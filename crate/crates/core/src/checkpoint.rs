//! `DRI1` binary container: magic, little-endian u64 header length, a
//! `key = value` text header, then concatenated little-endian f32 tensors.

use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::param::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DRI1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Weight,
    Buffer,
    /// Anything that is not model state, such as exported embeddings.
    Data,
}

impl EntryKind {
    fn name(self) -> &'static str {
        match self {
            EntryKind::Weight => "weight",
            EntryKind::Buffer => "buffer",
            EntryKind::Data => "data",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(EntryKind::Weight),
            "buffer" => Some(EntryKind::Buffer),
            "data" => Some(EntryKind::Data),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub config: Option<RunConfig>,
    /// Free-form `meta.*` header lines, such as the training mode.
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn from_store(store: &ParamStore<f32>, config: Option<&RunConfig>) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                kind: match p.kind {
                    ParamKind::Weight => EntryKind::Weight,
                    ParamKind::Buffer => EntryKind::Buffer,
                },
                trainable: p.trainable(),
                tensor: Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("same shape"),
            })
            .collect();
        Container {
            config: config.cloned(),
            meta: Vec::new(),
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies every store tensor from the container by name, with the saved
    /// trainable flags. Missing names and shape mismatches are reported
    /// together.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut problems = Vec::new();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in &ids {
            match self.entry(name) {
                None => problems.push(format!("{name}: missing from checkpoint")),
                Some(e) if e.tensor.shape() != store.tensor(*id).shape() => problems.push(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    e.tensor.shape(),
                    store.tensor(*id).shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Dimension(format!("checkpoint does not fit the model: {}", problems.join("; "))));
        }
        for (id, name) in ids {
            let e = self.entry(&name).expect("checked");
            store.tensor_mut(id).data_mut().copy_from_slice(e.tensor.data());
            store.set_trainable(id, e.trainable);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        if let Some(cfg) = &self.config {
            for line in cfg.to_text().lines() {
                header.push_str("config.");
                header.push_str(line);
                header.push('\n');
            }
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "tensor = {} shape={} dtype=f32 offset={offset} kind={} trainable={}\n",
                e.name,
                shape.join("x"),
                e.kind.name(),
                u8::from(e.trainable)
            ));
            offset += 4 * e.tensor.numel();
        }
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Parse(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing DRI1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[12 + hlen..];

        let mut config_text = String::new();
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        let mut expect = 0usize;
        for (n, line) in header.lines().enumerate() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("header line {}: expected key = value", n + 1)))?;
            if let Some(ck) = k.strip_prefix("config.") {
                config_text.push_str(&format!("{ck} = {v}\n"));
            } else if let Some(mk) = k.strip_prefix("meta.") {
                meta.push((mk.to_string(), v.to_string()));
            } else if k == "tensor" {
                let mut parts = v.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let (mut shape, mut offset, mut kind, mut trainable) = (None, None, None, None);
                for kv in parts {
                    let (a, b) = kv.split_once('=').ok_or_else(|| bad(format!("tensor {name}: bad field {kv:?}")))?;
                    match a {
                        "shape" => {
                            shape = Some(
                                b.split('x')
                                    .filter(|s| !s.is_empty())
                                    .map(|d| d.parse::<usize>())
                                    .collect::<Result<Vec<_>, _>>()
                                    .map_err(|_| bad(format!("tensor {name}: bad shape {b:?}")))?,
                            )
                        }
                        "dtype" if b != "f32" => return Err(bad(format!("tensor {name}: dtype {b} is not f32"))),
                        "dtype" => {}
                        "offset" => offset = b.parse::<usize>().ok(),
                        "kind" => kind = EntryKind::parse(b),
                        "trainable" => trainable = Some(b == "1"),
                        _ => return Err(bad(format!("tensor {name}: unknown field {a}"))),
                    }
                }
                let (Some(shape), Some(offset), Some(kind), Some(trainable)) = (shape, offset, kind, trainable) else {
                    return Err(bad(format!("tensor {name}: incomplete descriptor")));
                };
                if offset != expect {
                    return Err(bad(format!("tensor {name}: offset {offset}, expected {expect}")));
                }
                let numel: usize = shape.iter().product();
                let raw = payload
                    .get(offset..offset + 4 * numel)
                    .ok_or_else(|| bad(format!("tensor {name}: payload truncated")))?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                expect = offset + 4 * numel;
                entries.push(Entry {
                    name,
                    kind,
                    trainable,
                    tensor: Tensor::new(shape, data)?,
                });
            } else {
                return Err(bad(format!("header line {}: unknown key {k:?}", n + 1)));
            }
        }
        if expect != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - expect)));
        }
        let config = if config_text.is_empty() {
            None
        } else {
            Some(RunConfig::parse_str(&config_text)?)
        };
        Ok(Container { config, meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
