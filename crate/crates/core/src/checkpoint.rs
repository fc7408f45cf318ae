//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "KGFCKPT\0" | u32 version | u8 kind | u32 len + config echo (key=value lines)
//! u64 step | u64 seed | u32 tensor count
//! per tensor, sorted by name: u32 len + name | u32 rank | u64 dims.. | f32 values..
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fusion::{FusedModel, FusionConfig, FusionMode};
use crate::kgbert::TripleScorer;
use crate::params::ParamSet;
use crate::transformer::{AttentionMode, ModelConfig, TransformerModel};

pub const MAGIC: &[u8; 8] = b"KGFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Lm,
    Scorer,
    Fused,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Lm => 0,
            CheckpointKind::Scorer => 1,
            CheckpointKind::Fused => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => CheckpointKind::Lm,
            1 => CheckpointKind::Scorer,
            2 => CheckpointKind::Fused,
            _ => return Err(Error::Checkpoint(format!("unknown model kind {c}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Lm => "lm",
            CheckpointKind::Scorer => "scorer",
            CheckpointKind::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub fusion: Option<FusionConfig>,
    pub step: u64,
    pub seed: u64,
    pub params: ParamSet,
}

fn config_echo(model: &ModelConfig, fusion: Option<&FusionConfig>) -> String {
    let mut s = format!(
        "model.vocab_size={}\nmodel.d_model={}\nmodel.n_layers={}\nmodel.n_heads={}\nmodel.d_ff={}\nmodel.max_seq={}\nmodel.mode={}\nmodel.dropout={}\n",
        model.vocab_size,
        model.d_model,
        model.n_layers,
        model.n_heads,
        model.d_ff,
        model.max_seq,
        model.mode.as_str(),
        model.dropout
    );
    if let Some(f) = fusion {
        s.push_str(&format!(
            "fusion.mode={}\nfusion.layer={}\nfusion.radius={}\nfusion.cotrain_kg={}\n",
            f.mode, f.layer, f.radius, f.cotrain_kg
        ));
    }
    s
}

fn parse_echo(text: &str) -> Result<(ModelConfig, Option<FusionConfig>)> {
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config echo line `{line}`")))?;
        kv.insert(k, v);
    }
    fn field<T: std::str::FromStr>(kv: &std::collections::BTreeMap<&str, &str>, k: &str) -> Result<T> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("config echo lacks a valid `{k}`")))
    }
    let mode: String = field(&kv, "model.mode")?;
    let model = ModelConfig {
        vocab_size: field(&kv, "model.vocab_size")?,
        d_model: field(&kv, "model.d_model")?,
        n_layers: field(&kv, "model.n_layers")?,
        n_heads: field(&kv, "model.n_heads")?,
        d_ff: field(&kv, "model.d_ff")?,
        max_seq: field(&kv, "model.max_seq")?,
        mode: AttentionMode::parse(&mode)?,
        dropout: field(&kv, "model.dropout")?,
    };
    model.validate()?;
    let fusion = if kv.contains_key("fusion.mode") {
        let m: String = field(&kv, "fusion.mode")?;
        Some(FusionConfig {
            mode: FusionMode::parse(&m)?,
            layer: field(&kv, "fusion.layer")?,
            radius: field(&kv, "fusion.radius")?,
            cotrain_kg: field(&kv, "fusion.cotrain_kg")?,
        })
    } else {
        None
    };
    Ok((model, fusion))
}

impl Checkpoint {
    pub fn from_lm(m: &TransformerModel, step: u64, seed: u64) -> Self {
        Checkpoint {
            kind: CheckpointKind::Lm,
            model: m.config.clone(),
            fusion: None,
            step,
            seed,
            params: m.params.clone(),
        }
    }

    pub fn from_scorer(m: &TripleScorer, step: u64, seed: u64) -> Self {
        Checkpoint {
            kind: CheckpointKind::Scorer,
            model: m.model.config.clone(),
            fusion: None,
            step,
            seed,
            params: m.params().clone(),
        }
    }

    pub fn from_fused(m: &FusedModel, step: u64, seed: u64) -> Self {
        Checkpoint {
            kind: CheckpointKind::Fused,
            model: m.base_config.clone(),
            fusion: Some(m.fusion.clone()),
            step,
            seed,
            params: m.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        put_str(&mut out, &config_echo(&self.model, self.fusion.as_ref()));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let kind = CheckpointKind::from_code(r.take(1)?[0])?;
        let (model, fusion) = parse_echo(&r.string()?)?;
        if (kind == CheckpointKind::Fused) != fusion.is_some() {
            return Err(Error::Checkpoint("fusion config echo does not match the model kind".into()));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name = r.string()?;
            if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` out of order")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name.clone(), Tensor::new(&shape, data)?);
            prev = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Checkpoint {
            kind,
            model,
            fusion,
            step,
            seed,
            params,
        };
        ck.check_manifest()?;
        Ok(ck)
    }

    fn check_manifest(&self) -> Result<()> {
        match self.kind {
            CheckpointKind::Lm => self.to_lm().map(|_| ()),
            CheckpointKind::Scorer => self.to_scorer().map(|_| ()),
            CheckpointKind::Fused => self.to_fused().map(|_| ()),
        }
    }

    /// Write atomically: temporary sibling, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn expect_kind(&self, want: CheckpointKind) -> Result<()> {
        if self.kind != want {
            return Err(Error::Checkpoint(format!(
                "holds a {} model, expected {}",
                self.kind.as_str(),
                want.as_str()
            )));
        }
        Ok(())
    }

    pub fn to_lm(&self) -> Result<TransformerModel> {
        self.expect_kind(CheckpointKind::Lm)?;
        self.lm_with(&self.model)
    }

    /// Load the tensors into a causal LM of configuration `cfg`; the
    /// parameter manifest must match exactly.
    pub fn lm_with(&self, cfg: &ModelConfig) -> Result<TransformerModel> {
        if self.params.manifest() != cfg.manifest() {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint does not match the {} model manifest",
                self.kind.as_str(),
                cfg.mode.as_str()
            )));
        }
        TransformerModel::from_params(cfg.clone(), self.params.clone())
    }

    pub fn to_scorer(&self) -> Result<TripleScorer> {
        self.expect_kind(CheckpointKind::Scorer)?;
        TripleScorer::from_params(self.model.clone(), self.params.clone())
    }

    pub fn to_fused(&self) -> Result<FusedModel> {
        self.expect_kind(CheckpointKind::Fused)?;
        let fc = self
            .fusion
            .clone()
            .ok_or_else(|| Error::Checkpoint("fused checkpoint lacks a fusion config".into()))?;
        FusedModel::from_params(self.model.clone(), fc, self.params.clone())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

/// Write `bytes` to a temporary file next to `path`, then rename it over
/// `path`. A failure leaves no partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
