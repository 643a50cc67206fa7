//! Binary checkpoints: magic `SFSL`, version, config digest, then named
//! tensors in name order, all little-endian.
//!
//! Besides model parameters a checkpoint may hold the optimizer moments
//! (`adam.m.<name>`, `adam.v.<name>`, `adam.step`) and the model layout
//! (`meta.architecture`), all as ordinary tensors so the layout stays flat.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::backbone::{BackboneConfig, ConvConfig, TokenConfig, Variant};
use crate::error::{Error, Result};
use crate::glc::{AdamConfig, AdamState, PartitionGrid};
use crate::model::{CountingModel, HeadKind, ModelConfig};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"SFSL";
pub const VERSION: u32 = 1;
const ARCH: &str = "meta.architecture";
const ADAM_STEP: &str = "adam.step";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    /// Every stored tensor, in name order.
    pub tensors: BTreeMap<String, Tensor>,
}

fn encode_architecture(m: &CountingModel) -> Tensor {
    let c = &m.config;
    let b = &c.backbone;
    let (tr, tc) = m.inference_tiles.map_or((0, 0), |g| (g.rows, g.cols));
    let mut v = vec![
        match b.variant {
            Variant::Conv => 0.0,
            Variant::Token => 1.0,
        },
        match c.head {
            HeadKind::Sfsl => 0.0,
            HeadKind::Direct => 1.0,
        },
        b.input_size as f64,
        b.feature_dim as f64,
        b.conv.layers as f64,
        b.conv.kernel as f64,
        b.conv.downsample as f64,
        b.token.patch as f64,
        b.token.layers as f64,
        b.token.heads as f64,
        b.token.mlp_hidden as f64,
        tr as f64,
        tc as f64,
        c.mlp_hidden.len() as f64,
    ];
    v.extend(c.mlp_hidden.iter().map(|&h| h as f64));
    Tensor::vector(v)
}

fn decode_architecture(t: &Tensor) -> Result<(ModelConfig, Option<PartitionGrid>)> {
    let bad = || Error::Format {
        offset: 0,
        reason: format!("malformed `{ARCH}` tensor"),
    };
    let v = t.data();
    if v.len() < 14 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(bad());
    }
    let u = |i: usize| v[i] as usize;
    if v.len() != 14 + u(13) {
        return Err(bad());
    }
    let variant = match u(0) {
        0 => Variant::Conv,
        1 => Variant::Token,
        _ => return Err(bad()),
    };
    let head = match u(1) {
        0 => HeadKind::Sfsl,
        1 => HeadKind::Direct,
        _ => return Err(bad()),
    };
    let config = ModelConfig {
        backbone: BackboneConfig {
            variant,
            input_size: u(2),
            feature_dim: u(3),
            conv: ConvConfig {
                layers: u(4),
                kernel: u(5),
                downsample: u(6),
            },
            token: TokenConfig {
                patch: u(7),
                layers: u(8),
                heads: u(9),
                mlp_hidden: u(10),
            },
        },
        head,
        mlp_hidden: v[14..].iter().map(|&h| h as usize).collect(),
    };
    let tiles = match (u(11), u(12)) {
        (0, 0) => None,
        (r, c) => Some(PartitionGrid::new(r, c)?),
    };
    Ok((config, tiles))
}

impl Checkpoint {
    /// Parameters, layout, and optionally optimizer state of a model.
    pub fn from_model(model: &CountingModel, digest: &str, optimizer: Option<&AdamState>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, t) in model.params.iter() {
            if name.starts_with("meta.") || name.starts_with("adam.") {
                return Err(Error::invalid("checkpoint", format!("parameter name `{name}` is reserved")));
            }
            tensors.insert(name.to_string(), t.clone());
        }
        tensors.insert(ARCH.to_string(), encode_architecture(model));
        if let Some(s) = optimizer {
            tensors.insert(ADAM_STEP.to_string(), Tensor::scalar(s.step as f64));
            for (n, t) in &s.first {
                tensors.insert(format!("{ADAM_M}{n}"), t.clone());
            }
            for (n, t) in &s.second {
                tensors.insert(format!("{ADAM_V}{n}"), t.clone());
            }
        }
        Ok(Self {
            config_digest: digest.to_string(),
            tensors,
        })
    }

    /// Rebuilds the model, checking parameter names and shapes.
    pub fn model(&self) -> Result<CountingModel> {
        let arch = self.tensors.get(ARCH).ok_or_else(|| Error::MissingParam(ARCH.into()))?;
        let (config, tiles) = decode_architecture(arch)?;
        let mut params = ParamStore::new();
        for (n, t) in &self.tensors {
            if !n.starts_with("meta.") && !n.starts_with("adam.") {
                params.insert(n.clone(), t.clone())?;
            }
        }
        let mut model = CountingModel::from_params(config, params)?;
        model.inference_tiles = tiles;
        Ok(model)
    }

    /// Optimizer state, if one was saved. Hyperparameters come from `config`.
    pub fn optimizer(&self, config: AdamConfig) -> Result<Option<AdamState>> {
        let Some(step) = self.tensors.get(ADAM_STEP) else {
            return Ok(None);
        };
        let model = self.model()?;
        let mut state = AdamState::new(config, &model.params);
        state.step = step.item()? as u64;
        for (n, t) in &self.tensors {
            if let Some(p) = n.strip_prefix(ADAM_M) {
                state.first.insert(p.to_string(), t.clone());
            } else if let Some(p) = n.strip_prefix(ADAM_V) {
                state.second.insert(p.to_string(), t.clone());
            }
        }
        Ok(Some(state))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let digest = self.config_digest.as_bytes();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&u32::try_from(digest.len()).map_err(|_| Error::invalid("checkpoint", "digest too long"))?.to_le_bytes())?;
        out.write_all(digest)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::invalid("checkpoint", format!("name `{name}` too long")))?;
            let ndim = u8::try_from(t.ndim()).map_err(|_| Error::invalid("checkpoint", "too many dimensions"))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(nb)?;
            out.write_all(&[ndim])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::invalid("checkpoint", "dimension too large"))?;
                out.write_all(&d.to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader { inner: input, offset: 0 };
        if &r.bytes(4)?[..] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected SFSL".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let dlen = r.u32()? as usize;
        let at = r.offset;
        let config_digest = String::from_utf8(r.bytes(dlen)?).map_err(|_| Error::Format {
            offset: at,
            reason: "digest is not UTF-8".into(),
        })?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.array()?) as usize;
            let at = r.offset;
            let name = String::from_utf8(r.bytes(nlen)?).map_err(|_| Error::Format {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?;
            let ndim = r.array::<1>()?[0] as usize;
            let at = r.offset;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if ndim == 0 || numel == 0 {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("tensor `{name}` has empty shape {shape:?}"),
                });
            }
            let raw = r.bytes(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let prev = tensors.insert(name.clone(), Tensor::new(shape, data)?);
            if prev.is_some() {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("duplicate tensor `{name}`"),
                });
            }
        }
        Ok(Self { config_digest, tensors })
    }
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(Error::Format {
                offset: self.offset + got,
                reason: format!("truncated: expected {n} bytes at offset {}", self.offset),
            });
        }
        self.offset += n;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.write(BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::read(BufReader::new(File::open(path)?))
}
