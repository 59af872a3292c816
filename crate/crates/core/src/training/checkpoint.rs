//! Binary checkpoint format: magic, `u32` version, a length-prefixed UTF-8
//! block of `key=value` lines, a `u32` tensor count, then per tensor a
//! length-prefixed name, `u32` rank, `u32` dims and `f32` values. Every
//! integer and float is little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{GeluForm, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::objectives::{HeadsConfig, Objective};
use crate::vit::{Pooling, ViTConfig};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"CMRCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Scp,
    Ft,
    Sl,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Scp => "SCP",
            Stage::Ft => "FT",
            Stage::Sl => "SL",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SCP" => Ok(Stage::Scp),
            "FT" => Ok(Stage::Ft),
            "SL" => Ok(Stage::Sl),
            _ => Err(Error::Parse {
                what: "stage",
                detail: format!("{s:?} is not one of SCP|FT|SL"),
            }),
        }
    }
}

/// How a checkpoint was produced. `objective` is the pretraining objective
/// and is absent for purely supervised models.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dataset_fraction: f64,
    pub objective: Option<Objective>,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub vit: ViTConfig,
    pub heads: HeadsConfig,
    pub params: ParamStore,
    pub provenance: Provenance,
}

impl ModelCheckpoint {
    pub fn new(vit: ViTConfig, heads: HeadsConfig, params: ParamStore, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            vit,
            heads,
            params,
            provenance,
        }
    }

    pub fn has_head(&self) -> bool {
        self.params.contains("head.weight")
    }

    fn metadata(&self) -> String {
        let p = &self.provenance;
        let v = &self.vit;
        let h = &self.heads;
        let lines = [
            ("stage", p.stage.to_string()),
            ("seed", p.seed.to_string()),
            ("epochs", p.epochs.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("dataset_fraction", p.dataset_fraction.to_string()),
            (
                "objective",
                p.objective.map_or("none", Objective::as_str).to_string(),
            ),
            ("gelu_form", v.gelu.as_str().to_string()),
            ("vit.image_size", v.image_size.to_string()),
            ("vit.patch_size", v.patch_size.to_string()),
            ("vit.embed_dim", v.embed_dim.to_string()),
            ("vit.num_heads", v.num_heads.to_string()),
            ("vit.depth", v.depth.to_string()),
            ("vit.mlp_ratio", v.mlp_ratio.to_string()),
            ("vit.pooling", v.pooling.as_str().to_string()),
            ("vit.layer_norm_eps", v.layer_norm_eps.to_string()),
            ("vit.input_mean", v.input_mean.to_string()),
            ("vit.input_std", v.input_std.to_string()),
            ("heads.proj_dim", h.proj_dim.to_string()),
            ("heads.pred_hidden", h.pred_hidden.to_string()),
            ("heads.use_predictor", h.use_predictor.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse_metadata(text: &str) -> Result<(ViTConfig, HeadsConfig, Provenance)> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "checkpoint metadata",
            detail: format!("line {line:?} is not key=value"),
        })?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        kv.get(k).copied().ok_or_else(|| Error::Parse {
            what: "checkpoint metadata",
            detail: format!("missing key {k}"),
        })
    };
    fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            what: "checkpoint metadata",
            detail: format!("{k}={v:?}"),
        })
    }
    let vit = ViTConfig {
        image_size: num("vit.image_size", get("vit.image_size")?)?,
        patch_size: num("vit.patch_size", get("vit.patch_size")?)?,
        embed_dim: num("vit.embed_dim", get("vit.embed_dim")?)?,
        num_heads: num("vit.num_heads", get("vit.num_heads")?)?,
        depth: num("vit.depth", get("vit.depth")?)?,
        mlp_ratio: num("vit.mlp_ratio", get("vit.mlp_ratio")?)?,
        pooling: Pooling::parse(get("vit.pooling")?)?,
        gelu: GeluForm::parse(get("gelu_form")?)?,
        layer_norm_eps: num("vit.layer_norm_eps", get("vit.layer_norm_eps")?)?,
        input_mean: num("vit.input_mean", get("vit.input_mean")?)?,
        input_std: num("vit.input_std", get("vit.input_std")?)?,
    };
    vit.validate()?;
    let heads = HeadsConfig {
        proj_dim: num("heads.proj_dim", get("heads.proj_dim")?)?,
        pred_hidden: num("heads.pred_hidden", get("heads.pred_hidden")?)?,
        use_predictor: num("heads.use_predictor", get("heads.use_predictor")?)?,
    };
    let objective = match get("objective")? {
        "none" => None,
        other => Some(Objective::parse(other)?),
    };
    let provenance = Provenance {
        stage: get("stage")?.parse()?,
        seed: num("seed", get("seed")?)?,
        epochs: num("epochs", get("epochs")?)?,
        batch_size: num("batch_size", get("batch_size")?)?,
        dataset_fraction: num("dataset_fraction", get("dataset_fraction")?)?,
        objective,
    };
    Ok((vit, heads, provenance))
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn checkpoint_to_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 * ckpt.params.num_elements() + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&ckpt.format_version.to_le_bytes());
    let meta = ckpt.metadata();
    put_u32(&mut buf, meta.len())?;
    buf.extend_from_slice(meta.as_bytes());
    put_u32(&mut buf, ckpt.params.len())?;
    for (name, t) in ckpt.params.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Truncated(format!("checkpoint ends before byte {}", self.pos + n))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Parse {
            what,
            detail: e.to_string(),
        })
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(CHECKPOINT_MAGIC.len())
        .map_err(|_| Error::MagicMismatch("checkpoint"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::MagicMismatch("checkpoint"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (vit, heads, provenance) = parse_metadata(&r.string("checkpoint metadata")?)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
            Error::Parse {
                what: "checkpoint",
                detail: format!("tensor {name} is too large"),
            }
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?.with_requires_grad(true))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            what: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ModelCheckpoint {
        format_version: version,
        vit,
        heads,
        params,
        provenance,
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
