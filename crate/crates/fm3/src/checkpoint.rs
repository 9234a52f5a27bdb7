//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"FM3C"`, u32 version, u64 snapshot length, TOML snapshot, u32 tensor
//! count, then per tensor u32 name length, name, u32 rank, u64 extents and
//! f64 values, then the SHA-256 of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use fm3_core::heads::{Head, LogisticHead, PrototypeHead, SoftmaxHead};
use fm3_core::numerics::Tensor;
use fm3_core::pipeline::{FeatureView, Model, ModelConfig, TaskHead};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FM3C";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub heads: Vec<TaskHead>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HeadKind {
    Logistic,
    Softmax,
    Prototype,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    task_id: usize,
    kind: HeadKind,
    view: FeatureView,
    chance_flag: bool,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrozenDigests {
    text: String,
    vision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    run: RunConfig,
    model: ModelConfig,
    frozen: FrozenDigests,
    #[serde(default)]
    heads: Vec<HeadMeta>,
}

fn frozen_digests(model: &Model) -> FrozenDigests {
    FrozenDigests {
        text: hex::encode(model.text.digest(&model.store)),
        vision: hex::encode(model.vision.digest(&model.store)),
    }
}

fn head_tensors(h: &TaskHead) -> (HeadMeta, Vec<(String, Tensor)>) {
    let name = |part: &str| format!("head.{}.{part}", h.task_id);
    let (kind, class, tensors) = match &h.head {
        Head::Logistic(l) => {
            (HeadKind::Logistic, None, vec![(name("weight"), l.weight.clone()), (name("bias"), Tensor::vector(vec![l.bias]))])
        }
        Head::Softmax(s) => {
            (HeadKind::Softmax, None, vec![(name("weight"), s.weight.clone()), (name("bias"), s.bias.clone())])
        }
        Head::Prototype(p) => (HeadKind::Prototype, None, vec![(name("prototypes"), p.prototypes.clone())]),
        Head::Constant { class, .. } => (HeadKind::Constant, Some(*class), Vec::new()),
    };
    let meta = HeadMeta {
        task_id: h.task_id,
        kind,
        view: h.view,
        chance_flag: h.chance_flag,
        num_classes: h.head.num_classes(),
        class,
    };
    (meta, tensors)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> =
            self.model.store.entries().iter().map(|e| (e.name.clone(), e.tensor.clone())).collect();
        let mut metas = Vec::new();
        for h in &self.heads {
            let (meta, t) = head_tensors(h);
            metas.push(meta);
            tensors.extend(t);
        }
        let snapshot = Snapshot {
            run: self.config.clone(),
            model: self.model.config.clone(),
            frozen: frozen_digests(&self.model),
            heads: metas,
        };
        let text = toml::to_string(&snapshot).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not an FM3 checkpoint".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("digest mismatch; the file is corrupt".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| bad(e.to_string()))?;
        let snapshot: Snapshot = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|e| bad(e.to_string()))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
                return Err(bad(format!("tensor {name} appears twice")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the tensor table".into()));
        }

        let mut model = Model::build(&snapshot.model)?;
        let names: Vec<String> = model.store.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let id = model.store.find(&name).expect("entry exists");
            let t = tensors.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(bad(format!("tensor {name} has shape {:?}", t.shape())));
            }
            model.store.set(id, t)?;
        }
        if frozen_digests(&model) != snapshot.frozen {
            return Err(bad("frozen encoder digest mismatch".into()));
        }
        let mut heads = Vec::new();
        for m in &snapshot.heads {
            let mut take = |part: &str| {
                let name = format!("head.{}.{part}", m.task_id);
                tensors.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))
            };
            let head = match m.kind {
                HeadKind::Logistic => {
                    let weight = take("weight")?;
                    let bias = take("bias")?;
                    if bias.len() != 1 {
                        return Err(bad("logistic bias must hold one value".into()));
                    }
                    Head::Logistic(LogisticHead { weight, bias: bias.data()[0] })
                }
                HeadKind::Softmax => {
                    let weight = take("weight")?;
                    Head::Softmax(SoftmaxHead { weight, bias: take("bias")? })
                }
                HeadKind::Prototype => Head::Prototype(PrototypeHead { prototypes: take("prototypes")? }),
                HeadKind::Constant => Head::Constant {
                    class: m.class.ok_or_else(|| bad("constant head without a class".into()))?,
                    num_classes: m.num_classes,
                },
            };
            if head.num_classes() != m.num_classes {
                return Err(bad(format!("head {} has {} classes", m.task_id, head.num_classes())));
            }
            heads.push(TaskHead { task_id: m.task_id, head, view: m.view, chance_flag: m.chance_flag });
        }
        if let Some(name) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {name}")));
        }
        snapshot.run.validate()?;
        Ok(Checkpoint { config: snapshot.run, model, heads })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn head(&self, task_id: usize) -> Option<&TaskHead> {
        self.heads.iter().find(|h| h.task_id == task_id)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fm3_core::pipeline::{run_head_stage, FeatureView};
    use fm3_core::synthdata::TaskKind;

    use crate::data::Suite;

    fn checkpoint() -> Checkpoint {
        let mut cfg = RunConfig::suite(8);
        cfg.tasks.retain(|t| matches!(t.kind, TaskKind::TextBinary | TaskKind::VisionMulticlass));
        let suite = Suite::build(&cfg).unwrap();
        let model = Model::build(&cfg.model_config()).unwrap();
        let mut heads = Vec::new();
        for t in &suite.tasks {
            let support: Vec<_> = t.train().into_iter().take(16).collect();
            heads.push(run_head_stage(&model, &t.spec, &support, FeatureView::Projected, 1e-3).unwrap());
        }
        heads.push(run_head_stage(&model, &suite.tasks[1].spec, &[], FeatureView::Projected, 1e-3).unwrap());
        heads[2].task_id = 7;
        Checkpoint { config: cfg, model, heads }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.heads, ck.heads);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.model.trainable_digest(), ck.model.trainable_digest());
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = checkpoint().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("digest")));
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        let n = versioned.len() - 32;
        let d = Sha256::digest(&versioned[..n]);
        versioned[n..].copy_from_slice(&d);
        assert!(matches!(Checkpoint::from_bytes(&versioned), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn tampered_encoder_weights_fail_the_frozen_check() {
        let mut ck = checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let text = std::str::from_utf8(&bytes[16..16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize])
            .unwrap()
            .to_string();
        let id = ck.model.text.param_ids()[0];
        let mut t = ck.model.store.get(id).clone();
        t.data_mut()[0] += 1.0;
        ck.model.store.set(id, t).unwrap();
        let mut tampered = ck.to_bytes().unwrap();
        // Splice the original snapshot back in so only the weights disagree with it.
        let len = u64::from_le_bytes(tampered[8..16].try_into().unwrap()) as usize;
        tampered.splice(16..16 + len, text.bytes());
        tampered[8..16].copy_from_slice(&(text.len() as u64).to_le_bytes());
        let n = tampered.len() - 32;
        let d = Sha256::digest(&tampered[..n]);
        tampered[n..].copy_from_slice(&d);
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Checkpoint(m)) if m.contains("frozen")));
    }
}
