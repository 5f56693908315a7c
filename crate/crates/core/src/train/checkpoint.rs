//! Binary checkpoints: parameters, optimizer moments, generator state, the
//! training config, and optionally a reconstructed grid, in one file with a
//! trailing checksum. Loading restores training bit-for-bit.
//!
//! Layout (all little-endian): magic `VXFU`, format version, scalar-type
//! tag, section count, then tagged length-prefixed sections (parameters,
//! optimizer, generator, JSON metadata, grid), and a final FNV-1a 64
//! checksum over everything before it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dtype, Real, Tensor};
use crate::grid::{GridSpec, SparseVoxelGrid, VoxelSet};
use crate::nn::{Adam, AdamConfig, ParameterStore};

use super::{StageReport, TrainConfig, TrainError, Trainer};

const MAGIC: &[u8; 4] = b"VXFU";
const VERSION: u32 = 1;

const SEC_PARAMS: u8 = 1;
const SEC_ADAM: u8 = 2;
const SEC_RNG: u8 = 3;
const SEC_META: u8 = 4;
const SEC_GRID: u8 = 5;

/// A full training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: TrainConfig,
    /// Which stage was running ("local", "fuse", "finetune", or anything
    /// the caller chooses).
    pub stage: String,
    /// Iterations of that stage completed so far.
    pub iteration: u64,
    pub params: ParameterStore<T>,
    pub opt: Adam<T>,
    pub rng: ChaCha8Rng,
    pub grid: Option<SparseVoxelGrid<T>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    stage: String,
    iteration: u64,
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot a trainer mid-stage.
    pub fn capture(
        trainer: &Trainer<T>,
        stage: &str,
        iteration: u64,
        grid: Option<&SparseVoxelGrid<T>>,
    ) -> Self {
        Self {
            config: trainer.cfg.clone(),
            stage: stage.into(),
            iteration,
            params: trainer.store.clone(),
            opt: trainer.opt.clone(),
            rng: trainer.rng.clone(),
            grid: grid.cloned(),
        }
    }

    /// Snapshot after a finished stage report.
    pub fn after(
        trainer: &Trainer<T>,
        report: &StageReport,
        grid: Option<&SparseVoxelGrid<T>>,
    ) -> Self {
        Self::capture(trainer, report.stage, report.iterations_run as u64, grid)
    }

    /// Turn the snapshot back into a live trainer (plus the grid, if one
    /// was saved).
    pub fn resume(self) -> Result<(Trainer<T>, Option<SparseVoxelGrid<T>>), TrainError> {
        let trainer = Trainer::from_parts(self.config, self.params, self.opt, self.rng)?;
        Ok((trainer, self.grid))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(T::DTYPE.tag());
        w.u32(5);

        w.section(SEC_PARAMS, |w| {
            w.u32(self.params.len() as u32);
            for (name, tensor) in self.params.iter() {
                w.str(name);
                w.tensor(tensor);
            }
        });
        w.section(SEC_ADAM, |w| {
            let cfg = self.opt.config();
            w.f64(cfg.lr);
            w.f64(cfg.beta1);
            w.f64(cfg.beta2);
            w.f64(cfg.eps);
            w.u64(self.opt.step_count());
            let moments: Vec<_> = self.opt.moments().collect();
            w.u32(moments.len() as u32);
            for (name, m, v) in moments {
                w.str(name);
                w.tensor(m);
                w.tensor(v);
            }
        });
        w.section(SEC_RNG, |w| {
            w.bytes(&self.rng.get_seed());
            w.bytes(&self.rng.get_word_pos().to_le_bytes());
            w.u64(self.rng.get_stream());
        });
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            stage: self.stage.clone(),
            iteration: self.iteration,
        })
        .map_err(|e| TrainError::Checkpoint(format!("config serialization: {e}")))?;
        w.section(SEC_META, |w| w.bytes(&meta));
        w.section(SEC_GRID, |w| match &self.grid {
            None => w.u8(0),
            Some(grid) => {
                w.u8(1);
                let spec = grid.spec();
                w.f64(spec.origin.x);
                w.f64(spec.origin.y);
                w.f64(spec.origin.z);
                w.f64(spec.voxel_size);
                w.u64(spec.channels as u64);
                w.u64(grid.len() as u64);
                for c in grid.set().coords() {
                    for &x in c {
                        w.bytes(&x.to_le_bytes());
                    }
                }
                for &f in grid.features().data() {
                    w.f64(f.to_f64());
                }
            }
        });

        let checksum = fnv1a(&w.buf);
        w.u64(checksum);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &w.buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let data = fs::read(path)?;
        if data.len() < 8 {
            return Err(TrainError::Checkpoint("file too short".into()));
        }
        let (body, tail) = data.split_at(data.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
        if fnv1a(body) != stored {
            return Err(TrainError::Checkpoint("checksum mismatch (file corrupt)".into()));
        }
        let mut r = Reader { data: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {version} not supported (want {VERSION})"
            )));
        }
        let tag = r.u8()?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown scalar tag {tag:#x}")))?;
        if dtype != T::DTYPE {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let sections = r.u32()?;

        let mut params: Option<ParameterStore<T>> = None;
        let mut opt: Option<Adam<T>> = None;
        let mut rng: Option<ChaCha8Rng> = None;
        let mut meta: Option<Meta> = None;
        let mut grid: Option<Option<SparseVoxelGrid<T>>> = None;
        for _ in 0..sections {
            let tag = r.u8()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let mut s = Reader { data: payload, pos: 0 };
            match tag {
                SEC_PARAMS => {
                    let count = s.u32()?;
                    let mut store = ParameterStore::new();
                    for _ in 0..count {
                        let name = s.str()?;
                        let tensor = s.tensor::<T>()?;
                        store.insert(name, tensor)?;
                    }
                    params = Some(store);
                }
                SEC_ADAM => {
                    let cfg = AdamConfig {
                        lr: s.f64()?,
                        beta1: s.f64()?,
                        beta2: s.f64()?,
                        eps: s.f64()?,
                    };
                    let step = s.u64()?;
                    let count = s.u32()?;
                    let mut moments = Vec::with_capacity(count as usize);
                    for _ in 0..count {
                        let name = s.str()?;
                        let m = s.tensor::<T>()?;
                        let v = s.tensor::<T>()?;
                        moments.push((name, m, v));
                    }
                    opt = Some(Adam::from_parts(cfg, step, moments));
                }
                SEC_RNG => {
                    let seed: [u8; 32] = s.take(32)?.try_into().expect("32 bytes");
                    let word_pos =
                        u128::from_le_bytes(s.take(16)?.try_into().expect("16 bytes"));
                    let stream = s.u64()?;
                    let mut r = ChaCha8Rng::from_seed(seed);
                    r.set_stream(stream);
                    r.set_word_pos(word_pos);
                    rng = Some(r);
                }
                SEC_META => {
                    meta = Some(serde_json::from_slice(payload).map_err(|e| {
                        TrainError::Checkpoint(format!("metadata parse: {e}"))
                    })?);
                    s.pos = payload.len();
                }
                SEC_GRID => {
                    grid = Some(if s.u8()? == 0 {
                        None
                    } else {
                        let origin = nalgebra::Vector3::new(s.f64()?, s.f64()?, s.f64()?);
                        let voxel_size = s.f64()?;
                        let channels = s.u64()? as usize;
                        let count = s.u64()? as usize;
                        let mut coords = Vec::with_capacity(count);
                        for _ in 0..count {
                            let mut c = [0i32; 3];
                            for x in &mut c {
                                *x = i32::from_le_bytes(
                                    s.take(4)?.try_into().expect("four bytes"),
                                );
                            }
                            coords.push(c);
                        }
                        let mut data = Vec::with_capacity(count * channels);
                        for _ in 0..count * channels {
                            data.push(T::from_f64(s.f64()?));
                        }
                        let spec = GridSpec::new(origin, voxel_size, channels)?;
                        let set = VoxelSet::from_coords(coords)?;
                        Some(SparseVoxelGrid::new(
                            spec,
                            set,
                            Tensor::from_vec(&[count, channels], data),
                        )?)
                    });
                }
                other => {
                    return Err(TrainError::Checkpoint(format!("unknown section tag {other}")));
                }
            }
            if s.pos != payload.len() {
                return Err(TrainError::Checkpoint(format!(
                    "section {tag} has {} unread bytes",
                    payload.len() - s.pos
                )));
            }
        }
        let meta = meta.ok_or_else(|| TrainError::Checkpoint("metadata missing".into()))?;
        Ok(Self {
            config: meta.config,
            stage: meta.stage,
            iteration: meta.iteration,
            params: params.ok_or_else(|| TrainError::Checkpoint("parameters missing".into()))?,
            opt: opt.ok_or_else(|| TrainError::Checkpoint("optimizer missing".into()))?,
            rng: rng.ok_or_else(|| TrainError::Checkpoint("generator missing".into()))?,
            grid: grid.ok_or_else(|| TrainError::Checkpoint("grid section missing".into()))?,
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor<T: Real>(&mut self, t: &Tensor<T>) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x.to_f64());
        }
    }
    /// Write a tagged section with its payload length filled in afterwards.
    fn section(&mut self, tag: u8, body: impl FnOnce(&mut Self)) {
        self.u8(tag);
        let at = self.buf.len();
        self.u64(0);
        body(self);
        let len = (self.buf.len() - at - 8) as u64;
        self.buf[at..at + 8].copy_from_slice(&len.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.data.len() {
            return Err(TrainError::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn str(&mut self) -> Result<String, TrainError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| TrainError::Checkpoint("name is not valid UTF-8".into()))
    }
    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>, TrainError> {
        let rank = self.u8()? as usize;
        if rank > 4 {
            return Err(TrainError::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 30 {
            return Err(TrainError::Checkpoint(format!("implausible tensor size {n}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::from_f64(self.f64()?));
        }
        Ok(Tensor::from_vec(&shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionSpec;
    use crate::local::LocalVolumeSpec;
    use crate::render::DecoderSpec;
    use crate::train::ModelSpec;
    use rand::RngCore;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelSpec {
                local: LocalVolumeSpec {
                    encoder_channels: vec![3],
                    encoder_kernels: vec![3],
                    encoder_strides: vec![2],
                    depth_channels: vec![3],
                    fuse_channels: vec![4, 4],
                    fuse_kernels: vec![1, 3],
                    max_depth: 2.0,
                    neighbor_views: 2,
                },
                fusion: FusionSpec {
                    channels: 4,
                    gate_channels: vec![4],
                    gate_kernels: vec![1, 3],
                },
                decoder: DecoderSpec { feature_channels: 4, pe_octaves: 2, hidden: vec![8] },
            },
            ..TrainConfig::desk()
        }
    }

    fn tiny_grid() -> SparseVoxelGrid<f64> {
        let spec =
            GridSpec::new(nalgebra::Vector3::new(-0.5, -0.5, -0.5), 0.25, 4).unwrap();
        let set = VoxelSet::from_coords(vec![[-1, 0, 2], [0, 0, 0], [3, 1, -2]]).unwrap();
        let data = (0..12).map(|i| (i as f64 - 5.5) * 0.25).collect();
        SparseVoxelGrid::new(spec, set, Tensor::from_vec(&[3, 4], data)).unwrap()
    }

    #[test]
    fn checkpoint_round_trips_every_field_bitwise() {
        let mut trainer = Trainer::<f64>::new(tiny_cfg()).unwrap();
        // Put the generator in a mid-stream position and give the optimizer
        // some moments so the round trip covers non-fresh state.
        for _ in 0..7 {
            trainer.rng.next_u64();
        }
        let name = trainer.store.names().next().unwrap().to_string();
        let shape = trainer.store.get(&name).unwrap().shape().to_vec();
        trainer.opt.begin_step();
        let grad = Tensor::full(&shape, 0.125);
        {
            let param = trainer.store.get_mut(&name).unwrap();
            let mut opt = trainer.opt.clone();
            opt.update(&name, param, &grad).unwrap();
            trainer.opt = opt;
        }

        let grid = tiny_grid();
        let ckpt = Checkpoint::capture(&trainer, "fuse", 42, Some(&grid));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.vxfu");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();

        assert_eq!(back.stage, "fuse");
        assert_eq!(back.iteration, 42);
        assert_eq!(back.config.seed, trainer.cfg.seed);
        for (name, tensor) in trainer.store.iter() {
            let got = back.params.get(name).unwrap();
            assert_eq!(got.shape(), tensor.shape());
            for (a, b) in got.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let want: Vec<_> = trainer.opt.moments().collect();
        let got: Vec<_> = back.opt.moments().collect();
        assert_eq!(want.len(), got.len());
        for ((wn, wm, wv), (gn, gm, gv)) in want.iter().zip(&got) {
            assert_eq!(wn, gn);
            assert_eq!(wm, gm);
            assert_eq!(wv, gv);
        }
        assert_eq!(back.opt.step_count(), trainer.opt.step_count());
        // The restored generator continues exactly where the original was.
        let mut orig = trainer.rng.clone();
        let mut rest = back.rng.clone();
        for _ in 0..16 {
            assert_eq!(orig.next_u64(), rest.next_u64());
        }
        let bgrid = back.grid.unwrap();
        assert_eq!(bgrid.set().coords(), grid.set().coords());
        assert_eq!(bgrid.spec().voxel_size, grid.spec().voxel_size);
        for (a, b) in bgrid.features().data().iter().zip(grid.features().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let trainer = Trainer::<f64>::new(tiny_cfg()).unwrap();
        let ckpt = Checkpoint::capture(&trainer, "local", 0, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.vxfu");
        ckpt.save(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::<f64>::load(&path),
            Err(TrainError::Checkpoint(msg)) if msg.contains("checksum")
        ));

        let good = {
            bytes[100] ^= 0x01;
            bytes
        };
        fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(Checkpoint::<f64>::load(&path).is_err());

        fs::write(&path, &good).unwrap();
        assert!(Checkpoint::<f64>::load(&path).is_ok());
    }

    #[test]
    fn precision_mismatch_is_rejected_with_a_clear_error() {
        let trainer = Trainer::<f64>::new(tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.vxfu");
        Checkpoint::capture(&trainer, "local", 0, None).save(&path).unwrap();
        match Checkpoint::<f32>::load(&path) {
            Err(TrainError::Checkpoint(msg)) => {
                assert!(msg.contains("f64") && msg.contains("f32"), "{msg}");
            }
            other => panic!("expected precision error, got {other:?}"),
        }
    }
}
