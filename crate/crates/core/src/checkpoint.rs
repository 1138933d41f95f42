//! Binary tensor container with a trailing CRC32.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CAIMCKPT"  u32 version  u32 entry_count
//! per entry:  u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 extent × rank  payload
//! u32 crc32 of every preceding byte
//! ```
//!
//! The only dtype is `1` (f64). Network checkpoints name their entries
//! `backbone/...` and `caim/<position>/...`; optimizer state uses `optim/...`
//! and lives in a separate file.

use std::fs;
use std::path::Path;

use crate::caim::{CaimBlock, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::network::{BackboneSpec, Conditioning, ConvStage, FrozenBackbone, HfrNetwork, InsertionPlan};
use crate::tensor::Tensor;
use crate::trainer::{Adam, EpochLoss, TrainState};

pub const MAGIC: &[u8; 8] = b"CAIMCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Entries whose name starts with `prefix`, in file order.
    pub fn section(&self, prefix: &str) -> Vec<(&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 {
            return Err(bad("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch, file is corrupt"));
        }
        if &body[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("extent overflow"))?;
            let payload = r.take(numel.checked_mul(8).ok_or_else(|| bad("extent overflow"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.push(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                path: path.to_path_buf(),
                what: "checkpoint".into(),
            });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `backbone/*` entries only.
    pub fn from_backbone(backbone: &FrozenBackbone) -> Self {
        let mut ck = Checkpoint::new();
        push_backbone(&mut ck, backbone);
        ck
    }

    /// `backbone/*` followed by `caim/<position>/*`.
    pub fn from_network(net: &HfrNetwork) -> Self {
        let mut ck = Checkpoint::from_backbone(net.backbone());
        for (&pos, block) in net.plan().positions().iter().zip(&net.blocks) {
            for (name, t) in PARAM_NAMES.iter().zip(block.parameters()) {
                ck.entries.push((format!("caim/{pos}/{name}"), detached(t)));
            }
        }
        ck
    }

    /// Rebuilds the frozen backbone described by `spec`.
    pub fn to_backbone(&self, spec: &BackboneSpec) -> Result<FrozenBackbone> {
        let stages = (1..=spec.num_stages())
            .map(|i| {
                Ok(ConvStage {
                    weight: self.require(&format!("backbone/stage{i}/weight"))?.clone(),
                    bias: self.require(&format!("backbone/stage{i}/bias"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FrozenBackbone::from_parts(
            spec.clone(),
            stages,
            self.require("backbone/head/weight")?.clone(),
            self.require("backbone/head/bias")?.clone(),
        )
    }

    /// Insertion positions present under `caim/`.
    pub fn plan(&self) -> Result<InsertionPlan> {
        let mut positions: Vec<usize> = Vec::new();
        for name in self.names().filter_map(|n| n.strip_prefix("caim/")) {
            let pos = name
                .split('/')
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("malformed entry caim/{name}")))?;
            if !positions.contains(&pos) {
                positions.push(pos);
            }
        }
        InsertionPlan::new(positions)
    }

    /// Rebuilds a network; blocks come from `caim/*` entries.
    pub fn to_network(&self, spec: &BackboneSpec, conditioning: Conditioning) -> Result<HfrNetwork> {
        if let Some(name) = self
            .names()
            .find(|n| !n.starts_with("backbone/") && !n.starts_with("caim/"))
        {
            return Err(Error::Checkpoint(format!("unexpected entry {name} in a network checkpoint")));
        }
        let plan = self.plan()?;
        let backbone = self.to_backbone(spec)?;
        let mut net = HfrNetwork::with_conditioning(backbone, plan.clone(), 0, conditioning)?;
        let blocks = plan
            .positions()
            .iter()
            .map(|&pos| {
                let parts = PARAM_NAMES
                    .iter()
                    .map(|n| self.require(&format!("caim/{pos}/{n}")).cloned())
                    .collect::<Result<Vec<_>>>()?;
                CaimBlock::from_parts(spec.stage_output(pos).0, parts)
            })
            .collect::<Result<Vec<_>>>()?;
        net.set_blocks(blocks)?;
        Ok(net)
    }

    /// Optimizer moments, step counters and loss history.
    pub fn from_train_state(state: &TrainState) -> Self {
        let mut ck = Checkpoint::new();
        let scalar = |v: f64| Tensor::scalar(v);
        ck.entries.push(("optim/epochs_done".into(), scalar(state.epochs_done as f64)));
        ck.entries.push(("optim/step".into(), scalar(state.adam.steps() as f64)));
        ck.entries.push(("optim/learning_rate".into(), scalar(state.adam.learning_rate)));
        let (m, v) = state.adam.moments();
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            let t = |x: &Vec<f64>| Tensor::new([x.len()], x.clone()).expect("vector shape");
            ck.entries.push((format!("optim/m/{i}"), t(m)));
            ck.entries.push((format!("optim/v/{i}"), t(v)));
        }
        let losses: Vec<f64> = state.history.iter().map(|e| e.mean_loss).collect();
        ck.entries
            .push(("optim/history".into(), Tensor::new([losses.len()], losses).expect("vector shape")));
        ck
    }

    pub fn to_train_state(&self) -> Result<TrainState> {
        let scalar = |name: &str| -> Result<f64> {
            let t = self.require(name)?;
            t.data()
                .first()
                .copied()
                .filter(|_| t.numel() == 1)
                .ok_or_else(|| Error::Checkpoint(format!("{name} is not a scalar")))
        };
        let epochs_done = scalar("optim/epochs_done")? as usize;
        let step = scalar("optim/step")? as u64;
        let lr = scalar("optim/learning_rate")?;
        let mut first = Vec::new();
        let mut second = Vec::new();
        while let (Some(m), Some(v)) = (
            self.get(&format!("optim/m/{}", first.len())),
            self.get(&format!("optim/v/{}", second.len())),
        ) {
            first.push(m.data().to_vec());
            second.push(v.data().to_vec());
        }
        let history = self
            .require("optim/history")?
            .data()
            .iter()
            .enumerate()
            .map(|(i, &mean_loss)| EpochLoss { epoch: i + 1, mean_loss })
            .collect::<Vec<_>>();
        if history.len() != epochs_done {
            return Err(Error::Checkpoint(format!(
                "history holds {} epochs, state says {epochs_done}",
                history.len()
            )));
        }
        Ok(TrainState {
            epochs_done,
            adam: Adam::from_state(lr, step, first, second)?,
            history,
        })
    }
}

fn detached(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}

fn push_backbone(ck: &mut Checkpoint, backbone: &FrozenBackbone) {
    for (name, t) in backbone.named_parameters() {
        ck.entries.push((format!("backbone/{name}"), detached(t)));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated entry".into()))?;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::insert_caim;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            resolution: 8,
            stage_channels: vec![2, 3],
            embedding_dim: 4,
        }
    }

    fn network() -> HfrNetwork {
        let mut bb = FrozenBackbone::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        bb.freeze();
        insert_caim(bb, InsertionPlan::new([1, 2]).unwrap(), 5).unwrap()
    }

    #[test]
    fn network_round_trip_is_exact() {
        let net = network();
        let ck = Checkpoint::from_network(&net);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let rebuilt = back.to_network(&small_spec(), Conditioning::Conditional).unwrap();
        assert_eq!(Checkpoint::from_network(&rebuilt).to_bytes(), bytes);
        assert!(back
            .names()
            .all(|n| n.starts_with("backbone/") || n.starts_with("caim/")));
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_network(&network()).to_bytes();
        assert_eq!(&bytes[..8], b"CAIMCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corruption_detected() {
        let bytes = Checkpoint::from_network(&network()).to_bytes();
        for i in [0, 9, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn duplicate_and_missing_entries_rejected() {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor::scalar(1.0)).unwrap();
        assert!(ck.push("a", Tensor::scalar(2.0)).is_err());
        assert!(ck.to_backbone(&small_spec()).is_err());
    }

    #[test]
    fn train_state_round_trip() {
        let mut adam = Adam::new(1e-3);
        let mut p = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        p.set_grad(vec![0.1, -0.2, 0.3]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        let state = TrainState {
            epochs_done: 1,
            adam,
            history: vec![EpochLoss { epoch: 1, mean_loss: 0.25 }],
        };
        let ck = Checkpoint::from_bytes(&Checkpoint::from_train_state(&state).to_bytes()).unwrap();
        assert_eq!(ck.to_train_state().unwrap(), state);
    }
}
