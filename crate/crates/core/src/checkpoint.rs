//! The `SELAFD1` container.
//!
//! ```text
//! SELAFD1
//! meta <key>=<value>
//! tensor <name> <dtype> <d0>x<d1>... <offset> <nbytes> <trainable 0|1>
//! end
//! <little-endian payload>
//! ```
//!
//! Offsets are relative to the first payload byte. Entries are written in
//! name order, so identical stores produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::peft::{FineTuneMode, LoraTarget, PeftConfig};
use crate::tensor::Tensor;
use crate::vit::VitConfig;

pub const MAGIC: &str = "SELAFD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=')
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC}");
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(Error::Input(format!("checkpoint meta key `{k}` is not serializable")));
            }
            let _ = writeln!(header, "meta {k}={v}");
        }
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            if !valid_token(name) {
                return Err(Error::Input(format!("tensor name `{name}` contains whitespace or `=`")));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let offset = payload.len();
            match dtype {
                Dtype::F64 => t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => t
                    .data()
                    .iter()
                    .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
            let _ = writeln!(
                header,
                "tensor {name} {} {} {offset} {} {}",
                dtype.name(),
                shape.join("x"),
                payload.len() - offset,
                u8::from(t.requires_grad())
            );
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
            *pos += end + 1;
            Ok(line.to_string())
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(bad(format!("missing `{MAGIC}` magic")));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad meta line `{line}`")))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 7 || f[0] != "tensor" {
                return Err(bad(format!("bad manifest line `{line}`")));
            }
            let dtype = Dtype::parse(f[2]).ok_or_else(|| bad(format!("unknown dtype `{}`", f[2])))?;
            let shape = f[3]
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape `{}`", f[3])))?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}`")));
            let (offset, nbytes) = (num(f[4])?, num(f[5])?);
            let trainable = match f[6] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad trainable flag `{other}`"))),
            };
            entries.push((f[1].to_string(), dtype, shape, offset, nbytes, trainable));
        }
        let payload = &bytes[pos..];
        let mut params = ParamStore::new();
        for (name, dtype, shape, offset, nbytes, trainable) in entries {
            let numel: usize = shape.iter().product();
            if nbytes != numel * dtype.width() {
                return Err(bad(format!("`{name}`: {nbytes} bytes for shape {shape:?}")));
            }
            let raw = payload
                .get(offset..offset + nbytes)
                .ok_or_else(|| bad(format!("`{name}` payload out of range")))?;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
            params.insert(name, t.with_requires_grad(trainable));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks meta `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint meta `{key}` has bad value `{raw}`")))
    }
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let v = &self.vit;
        Checkpoint::new(self.params.clone())
            .with_meta("vit.image_size", v.image_size)
            .with_meta("vit.patch_size", v.patch_size)
            .with_meta("vit.embed_dim", v.embed_dim)
            .with_meta("vit.depth", v.depth)
            .with_meta("vit.heads", v.heads)
            .with_meta("vit.mlp_ratio", v.mlp_ratio)
            .with_meta("vit.num_classes", v.num_classes)
            .with_meta("vit.channels", v.channels)
            .with_meta("vit.ln_eps", format!("{:e}", v.ln_eps))
            .with_meta("mode", self.mode)
            .with_meta("peft.rank", self.peft.rank)
            .with_meta("peft.bottleneck_ratio", self.peft.bottleneck_ratio)
            .with_meta("peft.scale", self.peft.scale)
            .with_meta("peft.targets", self.peft.targets_string())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let vit = VitConfig {
            image_size: ck.meta_value("vit.image_size")?,
            patch_size: ck.meta_value("vit.patch_size")?,
            embed_dim: ck.meta_value("vit.embed_dim")?,
            depth: ck.meta_value("vit.depth")?,
            heads: ck.meta_value("vit.heads")?,
            mlp_ratio: ck.meta_value("vit.mlp_ratio")?,
            num_classes: ck.meta_value("vit.num_classes")?,
            channels: ck.meta_value("vit.channels")?,
            ln_eps: ck.meta_value("vit.ln_eps")?,
        };
        let mode: FineTuneMode = ck.meta_value("mode")?;
        let targets: String = ck.meta_value("peft.targets")?;
        let peft = PeftConfig {
            rank: ck.meta_value("peft.rank")?,
            bottleneck_ratio: ck.meta_value("peft.bottleneck_ratio")?,
            scale: ck.meta_value("peft.scale")?,
            targets: targets
                .split(',')
                .map(str::parse::<LoraTarget>)
                .collect::<Result<Vec<_>>>()?,
        };
        let model = Model {
            vit,
            mode,
            peft,
            params: ck.params.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let vit = VitConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            channels: 1,
            ln_eps: 1e-6,
        };
        let peft = PeftConfig { rank: 2, ..Default::default() };
        let base = Model::init(vit, FineTuneMode::Full, peft.clone(), 4).unwrap();
        Model::wrap(&base, FineTuneMode::Selafd, peft, 3, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = m.to_checkpoint().to_bytes(Dtype::F64).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap()).unwrap();
        assert_eq!(back, m);
        let img = Tensor::randn(&[1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(back.logits(&img).unwrap().data(), m.logits(&img).unwrap().data());
        assert_eq!(back.to_checkpoint().to_bytes(Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn f32_storage_rounds_once() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[3], vec![0.1, -2.5, 1e-3]).unwrap());
        let ck = Checkpoint::new(s.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F32).unwrap(), Path::new("mem")).unwrap();
        let w = back.params.get("w").unwrap();
        assert_eq!(w, &s.get("w").unwrap().to_f32_precision());
        let again = Checkpoint::from_bytes(&back.to_bytes(Dtype::F32).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = model().to_checkpoint().to_bytes(Dtype::F64).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[1..], Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}
