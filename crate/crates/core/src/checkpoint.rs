//! Binary checkpoint container: a text manifest plus named little-endian
//! arrays, closed by a SHA-256 of everything before it.
//!
//! Layout: `SPDCKPT\0`, `u32` version, `u64` manifest length, manifest
//! (`key = value` lines), `u64` array count, then per array `u32` name
//! length, name, `u8` dtype, `u32` rank, `u64` dims, raw data; finally 32
//! digest bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use spd_autograd::{Adam, ParamSet, Real, Tensor};

use crate::agent::{ReplayBuffer, Transition};
use crate::pixelenv::{EnvSnapshot, Observation, PhysState};
use crate::{Result, SpdError};

const MAGIC: &[u8; 8] = b"SPDCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            Self::F32(_) => 0,
            Self::F64(_) => 1,
            Self::U8(_) => 2,
            Self::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    manifest: BTreeMap<String, String>,
    arrays: BTreeMap<String, Array>,
}

fn err(msg: impl Into<String>) -> SpdError {
    SpdError::Checkpoint(msg.into())
}

/// Element types that can be stored as parameter arrays.
pub trait Storable: Real {
    fn wrap(data: Vec<Self>) -> ArrayData;
    fn unwrap(data: &ArrayData) -> Option<&[Self]>;
}

impl Storable for f32 {
    fn wrap(data: Vec<Self>) -> ArrayData {
        ArrayData::F32(data)
    }
    fn unwrap(data: &ArrayData) -> Option<&[Self]> {
        match data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Storable for f64 {
    fn wrap(data: Vec<Self>) -> ArrayData {
        ArrayData::F64(data)
    }
    fn unwrap(data: &ArrayData) -> Option<&[Self]> {
        match data {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| err("length overflow"))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(!key.contains(['=', '\n']) && !value.contains('\n'), "manifest entries are single-line");
        self.manifest.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest.get(key).map(String::as_str).ok_or_else(|| err(format!("manifest is missing {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| err(format!("manifest value {v:?} for {key:?} is malformed")))
    }

    pub fn manifest(&self) -> &BTreeMap<String, String> {
        &self.manifest
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: ArrayData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array {name} shape mismatch");
        self.arrays.insert(name.to_string(), Array { shape: shape.to_vec(), data });
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| err(format!("checkpoint has no array {name:?}")))
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn put_tensor<T: Storable>(&mut self, name: &str, t: &Tensor<T>) {
        self.put(name, t.shape(), T::wrap(t.data().to_vec()));
    }

    pub fn tensor<T: Storable>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self.array(name)?;
        let data = T::unwrap(&a.data).ok_or_else(|| err(format!("array {name:?} has the wrong element type")))?;
        Tensor::new(&a.shape, data.to_vec()).map_err(|e| err(e.to_string()))
    }

    pub fn put_params<T: Storable>(&mut self, prefix: &str, set: &ParamSet<T>) {
        self.set(&format!("{prefix}.count"), set.len());
        for (i, (name, t)) in set.iter().enumerate() {
            self.put_tensor(&format!("{prefix}.{i}.{name}"), t);
        }
    }

    /// Overwrite `set` in place; names, count and shapes must all agree.
    pub fn load_params<T: Storable>(&self, prefix: &str, set: &mut ParamSet<T>) -> Result<()> {
        let count: usize = self.parse(&format!("{prefix}.count"))?;
        if count != set.len() {
            return Err(err(format!("{prefix}: {count} stored tensors, model has {}", set.len())));
        }
        for i in 0..set.len() {
            let key = format!("{prefix}.{i}.{}", set.name(i));
            let t: Tensor<T> = self.tensor(&key)?;
            if t.shape() != set.get(i).shape() {
                return Err(err(format!("{key}: stored shape {:?}, model {:?}", t.shape(), set.get(i).shape())));
            }
            *set.get_mut(i) = t;
        }
        Ok(())
    }

    pub fn put_adam<T: Storable>(&mut self, prefix: &str, opt: &Adam<T>) {
        self.set(&format!("{prefix}.steps"), opt.steps());
        let (m, v) = opt.moments();
        self.set(&format!("{prefix}.count"), m.len());
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            self.put_tensor(&format!("{prefix}.m.{i}"), m);
            self.put_tensor(&format!("{prefix}.v.{i}"), v);
        }
    }

    pub fn load_adam<T: Storable>(&self, prefix: &str, opt: &mut Adam<T>) -> Result<()> {
        let steps = self.parse(&format!("{prefix}.steps"))?;
        let count: usize = self.parse(&format!("{prefix}.count"))?;
        let m = (0..count).map(|i| self.tensor(&format!("{prefix}.m.{i}"))).collect::<Result<Vec<_>>>()?;
        let v = (0..count).map(|i| self.tensor(&format!("{prefix}.v.{i}"))).collect::<Result<Vec<_>>>()?;
        opt.restore(steps, m, v).map_err(|e| err(format!("{prefix}: {e}")))
    }

    /// Stores the ring buffer once per distinct frame (shared frames are
    /// recognised by pointer identity).
    pub fn put_replay(&mut self, prefix: &str, replay: &ReplayBuffer) {
        let items = replay.items();
        self.set(&format!("{prefix}.capacity"), replay.capacity());
        self.set(&format!("{prefix}.cursor"), replay.cursor());
        self.set(&format!("{prefix}.len"), items.len());
        let Some(first) = items.first() else {
            return;
        };
        let (stack, size) = (first.obs.frames().len(), first.obs.size());
        let adim = first.action.len();
        let mut ids: HashMap<*const u8, u64> = HashMap::new();
        let mut frames: Vec<u8> = Vec::new();
        let mut index = |f: &Arc<[u8]>| -> u64 {
            let next = ids.len() as u64;
            *ids.entry(f.as_ptr()).or_insert_with(|| {
                frames.extend_from_slice(f);
                next
            })
        };
        let mut obs_idx = Vec::with_capacity(items.len() * stack);
        let mut next_idx = Vec::with_capacity(items.len() * stack);
        for t in items {
            obs_idx.extend(t.obs.frames().iter().map(&mut index));
            next_idx.extend(t.next_obs.frames().iter().map(&mut index));
        }
        let frame_len = 3 * size * size;
        let n_frames = frames.len() / frame_len;
        self.set(&format!("{prefix}.image_size"), size);
        self.put(&format!("{prefix}.frames"), &[n_frames, frame_len], ArrayData::U8(frames));
        self.put(&format!("{prefix}.obs_frames"), &[items.len(), stack], ArrayData::U64(obs_idx));
        self.put(&format!("{prefix}.next_obs_frames"), &[items.len(), stack], ArrayData::U64(next_idx));
        let actions = items.iter().flat_map(|t| t.action.iter().copied()).collect();
        self.put(&format!("{prefix}.actions"), &[items.len(), adim], ArrayData::F32(actions));
        let rewards = items.iter().map(|t| t.reward).collect();
        self.put(&format!("{prefix}.rewards"), &[items.len()], ArrayData::F32(rewards));
        let done = items.iter().map(|t| t.done as u8).collect();
        self.put(&format!("{prefix}.done"), &[items.len()], ArrayData::U8(done));
    }

    pub fn replay(&self, prefix: &str) -> Result<ReplayBuffer> {
        let capacity: usize = self.parse(&format!("{prefix}.capacity"))?;
        let cursor: usize = self.parse(&format!("{prefix}.cursor"))?;
        let len: usize = self.parse(&format!("{prefix}.len"))?;
        if len == 0 {
            return ReplayBuffer::from_parts(capacity, Vec::new(), cursor);
        }
        let size: usize = self.parse(&format!("{prefix}.image_size"))?;
        let frames = self.array(&format!("{prefix}.frames"))?;
        let ArrayData::U8(bytes) = &frames.data else {
            return Err(err("replay frames must be u8"));
        };
        let shared: Vec<Arc<[u8]>> = bytes.chunks_exact(frames.shape[1]).map(Arc::from).collect();
        let indices = |name: &str| -> Result<(Vec<u64>, usize)> {
            let a = self.array(&format!("{prefix}.{name}"))?;
            match &a.data {
                ArrayData::U64(v) if a.shape.len() == 2 && a.shape[0] == len => Ok((v.clone(), a.shape[1])),
                _ => Err(err(format!("replay {name} is malformed"))),
            }
        };
        let (obs_idx, stack) = indices("obs_frames")?;
        let (next_idx, _) = indices("next_obs_frames")?;
        let observation = |idx: &[u64]| -> Result<Observation> {
            let f = idx
                .iter()
                .map(|&i| shared.get(i as usize).cloned().ok_or_else(|| err("replay frame index out of range")))
                .collect::<Result<Vec<_>>>()?;
            Observation::new(f, size)
        };
        let actions: Tensor<f32> = self.tensor(&format!("{prefix}.actions"))?;
        let rewards: Tensor<f32> = self.tensor(&format!("{prefix}.rewards"))?;
        let done = match &self.array(&format!("{prefix}.done"))?.data {
            ArrayData::U8(v) => v.clone(),
            _ => return Err(err("replay done flags must be u8")),
        };
        let adim = actions.shape()[1];
        let items = (0..len)
            .map(|i| {
                Ok(Transition {
                    obs: observation(&obs_idx[i * stack..(i + 1) * stack])?,
                    action: actions.data()[i * adim..(i + 1) * adim].to_vec(),
                    reward: rewards.data()[i],
                    next_obs: observation(&next_idx[i * stack..(i + 1) * stack])?,
                    done: done[i] != 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ReplayBuffer::from_parts(capacity, items, cursor)
    }

    pub fn put_env(&mut self, prefix: &str, snap: &EnvSnapshot) {
        let s = &snap.state;
        self.put(
            &format!("{prefix}.phys"),
            &[6],
            ArrayData::F64(vec![
                s.agent_pos[0],
                s.agent_pos[1],
                s.agent_vel[0],
                s.agent_vel[1],
                s.target_pos[0],
                s.target_pos[1],
            ]),
        );
        self.set(&format!("{prefix}.step_count"), s.step_count);
        self.set(&format!("{prefix}.episode"), snap.episode);
        self.set(&format!("{prefix}.started"), snap.started);
        self.set(&format!("{prefix}.done"), snap.done);
        let frame_len = snap.frames.first().map_or(0, Vec::len);
        self.put(&format!("{prefix}.frames"), &[snap.frames.len(), frame_len], ArrayData::U8(snap.frames.concat()));
    }

    pub fn env(&self, prefix: &str) -> Result<EnvSnapshot> {
        let phys: Tensor<f64> = self.tensor(&format!("{prefix}.phys"))?;
        let p = phys.data();
        if p.len() != 6 {
            return Err(err("environment state must have six values"));
        }
        let frames = self.array(&format!("{prefix}.frames"))?;
        let ArrayData::U8(bytes) = &frames.data else {
            return Err(err("environment frames must be u8"));
        };
        Ok(EnvSnapshot {
            state: PhysState {
                agent_pos: [p[0], p[1]],
                agent_vel: [p[2], p[3]],
                target_pos: [p[4], p[5]],
                step_count: self.parse(&format!("{prefix}.step_count"))?,
            },
            episode: self.parse(&format!("{prefix}.episode"))?,
            started: self.parse(&format!("{prefix}.started"))?,
            done: self.parse(&format!("{prefix}.done"))?,
            frames: if frames.shape[1] == 0 {
                Vec::new()
            } else {
                bytes.chunks_exact(frames.shape[1]).map(<[u8]>::to_vec).collect()
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest: String = self.manifest.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.data.tag());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checkpoint digest mismatch (file is corrupt or truncated)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let mlen = r.len()?;
        let text = std::str::from_utf8(r.take(mlen)?).map_err(|_| err("manifest is not UTF-8"))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| err(format!("malformed manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = r.len()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| err("array name is not UTF-8"))?.to_string();
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("array too large"))?;
            let width = match tag {
                0 => 4,
                1 | 3 => 8,
                2 => 1,
                _ => return Err(err(format!("unknown dtype tag {tag}"))),
            };
            let raw = r.take(n.checked_mul(width).ok_or_else(|| err("array too large"))?)?;
            let data = match tag {
                0 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U8(raw.to_vec()),
                _ => ArrayData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            arrays.insert(name, Array { shape, data });
        }
        if r.pos != body.len() {
            return Err(err("trailing bytes after the last array"));
        }
        Ok(Self { manifest, arrays })
    }

    /// Write via a temporary sibling and rename, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| SpdError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| SpdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SpdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
