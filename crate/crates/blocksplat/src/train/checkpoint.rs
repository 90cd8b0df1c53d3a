//! Versioned binary checkpoints: header, decoder parameter arrays (student
//! then teacher), optimizer moments, and per-block sections. Reloading a
//! checkpoint continues the trajectory bitwise-identically.

use crate::autodiff::{AdamHyper, AdamState, Tensor};
use crate::config::{Mode, RunConfig};
use crate::decoder::{DecoderParams, HIDDEN_DIM, INPUT_DIM};
use crate::error::{Error, Result};
use crate::metrics::BlockMetricTracker;
use crate::scene::World;
use crate::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAGIC: &[u8; 8] = b"BSPLTCKP";
const VERSION: u32 = 1;
/// Caps protecting the decoder against absurd allocations from hostile input.
const MAX_DIMS: usize = 4;
const MAX_ELEMS: usize = 1 << 26;

fn mode_code(mode: Mode) -> u8 {
    match mode {
        Mode::SingleBlock => 0,
        Mode::ParallelShared => 1,
        Mode::Independent => 2,
        Mode::MomentumDistill => 3,
    }
}

fn mode_from_code(c: u8) -> Result<Mode> {
    Ok(match c {
        0 => Mode::SingleBlock,
        1 => Mode::ParallelShared,
        2 => Mode::Independent,
        3 => Mode::MomentumDistill,
        _ => return Err(Error::format(format!("checkpoint: unknown mode code {c}"))),
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::format("checkpoint: length overflow"))?;
        if end > self.buf.len() {
            return Err(Error::format("checkpoint: truncated"));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::format(format!("checkpoint: tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut elems: usize = 1;
        for _ in 0..ndim {
            let d = self.u64()? as usize;
            elems = elems
                .checked_mul(d)
                .filter(|&e| e <= MAX_ELEMS)
                .ok_or_else(|| Error::format("checkpoint: tensor too large"))?;
            shape.push(d);
        }
        // Bound-check before allocating.
        if self.pos + elems * 8 > self.buf.len() {
            return Err(Error::format("checkpoint: tensor data truncated"));
        }
        let mut data = Vec::with_capacity(elems);
        for _ in 0..elems {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!(
                "checkpoint: {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_adam(w: &mut Writer, a: &AdamState) {
    w.u64(a.step);
    w.u64(a.m.len() as u64);
    for t in &a.m {
        w.tensor(t);
    }
    for t in &a.v {
        w.tensor(t);
    }
}

#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

fn read_adam(r: &mut Reader) -> Result<AdamSnapshot> {
    let step = r.u64()?;
    let n = r.u64()? as usize;
    if n > 1 << 20 {
        return Err(Error::format("checkpoint: adam group too large"));
    }
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.tensor()?);
    }
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.tensor()?);
    }
    Ok(AdamSnapshot { step, m, v })
}

fn adam_from_snapshot(hyper: AdamHyper, snap: AdamSnapshot) -> AdamState {
    let mut st = AdamState::new(hyper, &snap.m);
    st.step = snap.step;
    st.m = snap.m;
    st.v = snap.v;
    st
}

#[derive(Debug, Clone)]
pub struct AnchorSnapshot {
    pub id: u64,
    pub position: [f64; 2],
    pub base_radius: f64,
    pub feature: Tensor,
    pub offsets: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockSnapshot {
    pub block_id: u32,
    pub weight: f64,
    pub tracker: BlockMetricTracker,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub anchors: Vec<AnchorSnapshot>,
    pub feat_adam: AdamSnapshot,
    pub offset_adam: AdamSnapshot,
}

/// Fully parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub k_g: u32,
    pub mode: Mode,
    pub iteration: u64,
    pub students: Vec<Vec<Tensor>>,
    pub teacher: Option<Vec<Tensor>>,
    pub student_adams: Vec<AdamSnapshot>,
    pub blocks: Vec<BlockSnapshot>,
}

pub(super) fn encode_checkpoint(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(trainer.cfg.anchors.k_g);
    w.u32(HIDDEN_DIM as u32);
    w.u32(INPUT_DIM as u32);
    w.u8(mode_code(trainer.cfg.train.mode));
    w.u32(trainer.block_states.len() as u32);
    w.u64(trainer.iteration);
    w.u32(trainer.students.len() as u32);
    for s in &trainer.students {
        for t in s.tensors() {
            w.tensor(t);
        }
    }
    match &trainer.teacher {
        Some(t) => {
            w.u8(1);
            for tensor in t.tensors() {
                w.tensor(tensor);
            }
        }
        None => w.u8(0),
    }
    for a in trainer.student_adams() {
        write_adam(&mut w, a);
    }
    for (state, &weight) in trainer.block_states.iter().zip(&trainer.weights) {
        w.u32(state.block.id);
        w.f64(weight);
        w.f64(state.tracker.psnr_ema);
        w.f64(state.tracker.ssim_ema);
        w.f64(state.tracker.beta);
        w.u8(state.tracker.initialized as u8);
        w.bytes(&state.view_rng.get_seed());
        w.u128(state.view_rng.get_word_pos());
        w.u64(state.block.anchors.len() as u64);
        for a in &state.block.anchors {
            w.u64(a.id);
            w.f64(a.position[0]);
            w.f64(a.position[1]);
            w.f64(a.base_radius);
            w.tensor(&a.feature);
            w.tensor(&a.offsets);
        }
        write_adam(&mut w, &state.feat_adam);
        write_adam(&mut w, &state.offset_adam);
    }
    w.buf
}

/// Parse checkpoint bytes; hostile input yields a format error, never a panic.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "checkpoint: version {version} unsupported"
        )));
    }
    let k_g = r.u32()?;
    if k_g == 0 || k_g > 64 {
        return Err(Error::format(format!("checkpoint: k_g {k_g} out of range")));
    }
    let hidden = r.u32()?;
    let input_dim = r.u32()?;
    if hidden != HIDDEN_DIM as u32 || input_dim != INPUT_DIM as u32 {
        return Err(Error::format("checkpoint: decoder dims mismatch"));
    }
    let mode = mode_from_code(r.u8()?)?;
    let n_blocks = r.u32()? as usize;
    if n_blocks == 0 || n_blocks > 4096 {
        return Err(Error::format(format!("checkpoint: block count {n_blocks}")));
    }
    let iteration = r.u64()?;
    let n_students = r.u32()? as usize;
    if n_students == 0 || n_students > n_blocks {
        return Err(Error::format(format!(
            "checkpoint: student count {n_students}"
        )));
    }
    let read_decoder =
        |r: &mut Reader| -> Result<Vec<Tensor>> { (0..4).map(|_| r.tensor()).collect() };
    let mut students = Vec::with_capacity(n_students);
    for _ in 0..n_students {
        students.push(read_decoder(&mut r)?);
    }
    let teacher = if r.u8()? == 1 {
        Some(read_decoder(&mut r)?)
    } else {
        None
    };
    let mut student_adams = Vec::with_capacity(n_students);
    for _ in 0..n_students {
        student_adams.push(read_adam(&mut r)?);
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let block_id = r.u32()?;
        let weight = r.f64()?;
        let psnr_ema = r.f64()?;
        let ssim_ema = r.f64()?;
        let beta = r.f64()?;
        let initialized = r.u8()? != 0;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_word_pos = r.u128()?;
        let n_anchors = r.u64()? as usize;
        if n_anchors > 1 << 20 {
            return Err(Error::format("checkpoint: anchor count too large"));
        }
        let mut anchors = Vec::with_capacity(n_anchors);
        for _ in 0..n_anchors {
            let id = r.u64()?;
            let position = [r.f64()?, r.f64()?];
            let base_radius = r.f64()?;
            let feature = r.tensor()?;
            let offsets = r.tensor()?;
            anchors.push(AnchorSnapshot {
                id,
                position,
                base_radius,
                feature,
                offsets,
            });
        }
        let feat_adam = read_adam(&mut r)?;
        let offset_adam = read_adam(&mut r)?;
        blocks.push(BlockSnapshot {
            block_id,
            weight,
            tracker: BlockMetricTracker {
                block_id,
                psnr_ema,
                ssim_ema,
                beta,
                initialized,
            },
            rng_seed,
            rng_word_pos,
            anchors,
            feat_adam,
            offset_adam,
        });
    }
    r.done()?;
    Ok(CheckpointData {
        k_g,
        mode,
        iteration,
        students,
        teacher,
        student_adams,
        blocks,
    })
}

/// Rebuild a trainer from a parsed checkpoint over a freshly built world.
pub(super) fn restore(cfg: RunConfig, world: World, data: CheckpointData) -> Result<Trainer> {
    if data.k_g != cfg.anchors.k_g {
        return Err(Error::validation(format!(
            "checkpoint k_g {} does not match config {}",
            data.k_g, cfg.anchors.k_g
        )));
    }
    if data.mode != cfg.train.mode {
        return Err(Error::validation("checkpoint mode does not match config"));
    }
    if data.blocks.len() != world.blocks.len() {
        return Err(Error::validation(format!(
            "checkpoint has {} blocks, world has {}",
            data.blocks.len(),
            world.blocks.len()
        )));
    }
    let mut trainer = Trainer::new(cfg.clone(), world)?;
    trainer.iteration = data.iteration;
    let dec_hyper = AdamHyper {
        lr: cfg.train.optim.lr_decoder,
        beta1: cfg.train.optim.beta1,
        beta2: cfg.train.optim.beta2,
        epsilon: cfg.train.optim.epsilon,
    };
    if data.students.len() != trainer.students.len() {
        return Err(Error::validation(
            "checkpoint student count does not match mode",
        ));
    }
    for (s, tensors) in trainer.students.iter_mut().zip(data.students) {
        s.set_tensors(tensors)?;
    }
    trainer.teacher = match (trainer.teacher.take(), data.teacher) {
        (Some(mut t), Some(tensors)) => {
            t.set_tensors(tensors)?;
            Some(t)
        }
        (None, None) => None,
        _ => {
            return Err(Error::validation(
                "checkpoint teacher presence does not match mode",
            ))
        }
    };
    let adams: Vec<AdamState> = data
        .student_adams
        .into_iter()
        .map(|s| adam_from_snapshot(dec_hyper, s))
        .collect();
    trainer.set_student_adams(adams)?;

    let feat_hyper = AdamHyper {
        lr: cfg.train.optim.lr_feature,
        ..dec_hyper
    };
    let off_hyper = AdamHyper {
        lr: cfg.train.optim.lr_offset,
        ..dec_hyper
    };
    let mut weights = Vec::with_capacity(data.blocks.len());
    for (state, snap) in trainer.block_states.iter_mut().zip(data.blocks) {
        if snap.block_id != state.block.id {
            return Err(Error::validation(format!(
                "checkpoint block id {} does not match world block {}",
                snap.block_id, state.block.id
            )));
        }
        if snap.anchors.len() != state.block.anchors.len() {
            return Err(Error::validation(format!(
                "checkpoint block {} anchor count {} vs world {}",
                snap.block_id,
                snap.anchors.len(),
                state.block.anchors.len()
            )));
        }
        for (a, s) in state.block.anchors.iter_mut().zip(snap.anchors) {
            if a.id != s.id {
                return Err(Error::validation(format!(
                    "checkpoint anchor id {} does not match world anchor {}",
                    s.id, a.id
                )));
            }
            if s.feature.shape() != a.feature.shape() || s.offsets.shape() != a.offsets.shape() {
                return Err(Error::validation(
                    "checkpoint anchor tensor shapes mismatch",
                ));
            }
            a.position = s.position;
            a.base_radius = s.base_radius;
            a.feature = s.feature;
            a.offsets = s.offsets;
        }
        state.feat_adam = adam_from_snapshot(feat_hyper, snap.feat_adam);
        state.offset_adam = adam_from_snapshot(off_hyper, snap.offset_adam);
        state.tracker = snap.tracker;
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_word_pos(snap.rng_word_pos);
        state.view_rng = rng;
        weights.push(snap.weight);
    }
    trainer.weights = weights;
    Ok(trainer)
}

const MERGED_MAGIC: &[u8; 8] = b"BSPLTMRG";

/// Serialize a merged model: decoder table plus deduplicated anchors.
pub fn encode_merged(model: &crate::train::MergedModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MERGED_MAGIC);
    w.u32(VERSION);
    w.u32(model.decoders[0].k_g);
    w.u32(model.decoders.len() as u32);
    for d in &model.decoders {
        for t in d.tensors() {
            w.tensor(t);
        }
    }
    w.u64(model.anchors.len() as u64);
    for ma in &model.anchors {
        w.u64(ma.anchor.id);
        w.u32(ma.block_id);
        w.u32(ma.decoder_idx as u32);
        w.f64(ma.anchor.position[0]);
        w.f64(ma.anchor.position[1]);
        w.f64(ma.anchor.base_radius);
        w.tensor(&ma.anchor.feature);
        w.tensor(&ma.anchor.offsets);
    }
    w.buf
}

/// Parse a merged model file; hostile input yields a format error.
pub fn decode_merged(bytes: &[u8]) -> Result<crate::train::MergedModel> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MERGED_MAGIC {
        return Err(Error::format("merged model: bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "merged model: version {version} unsupported"
        )));
    }
    let k_g = r.u32()?;
    if k_g == 0 || k_g > 64 {
        return Err(Error::format(format!(
            "merged model: k_g {k_g} out of range"
        )));
    }
    let n_dec = r.u32()? as usize;
    if n_dec == 0 || n_dec > 4096 {
        return Err(Error::format(format!(
            "merged model: decoder count {n_dec}"
        )));
    }
    let mut decoders = Vec::with_capacity(n_dec);
    for _ in 0..n_dec {
        let mut d = DecoderParams::zeros(k_g);
        let tensors: Vec<Tensor> = (0..4).map(|_| r.tensor()).collect::<Result<_>>()?;
        d.set_tensors(tensors)?;
        decoders.push(d);
    }
    let n_anchors = r.u64()? as usize;
    if n_anchors == 0 || n_anchors > 1 << 22 {
        return Err(Error::format(format!(
            "merged model: anchor count {n_anchors}"
        )));
    }
    let mut anchors = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        let id = r.u64()?;
        let block_id = r.u32()?;
        let decoder_idx = r.u32()? as usize;
        if decoder_idx >= n_dec {
            return Err(Error::format("merged model: decoder index out of range"));
        }
        let position = [r.f64()?, r.f64()?];
        let base_radius = r.f64()?;
        let feature = r.tensor()?;
        let offsets = r.tensor()?;
        if feature.shape() != [crate::scene::FEATURE_DIM] || offsets.shape() != [k_g as usize, 2] {
            return Err(Error::format("merged model: anchor tensor shapes"));
        }
        anchors.push(crate::train::MergedAnchor {
            anchor: crate::scene::Anchor {
                id,
                position,
                base_radius,
                feature,
                offsets,
            },
            block_id,
            decoder_idx,
        });
    }
    r.done()?;
    Ok(crate::train::MergedModel { decoders, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::build_world;

    fn cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scene.n_gt = 6;
        cfg.cameras.count = 12;
        cfg.cameras.resolution = [24, 24];
        cfg.cameras.zoom_min = 0.2;
        cfg.cameras.zoom_max = 0.35;
        cfg.partition.nx = 2;
        cfg.partition.ny = 1;
        cfg.anchors.spacing = 0.2;
        cfg.anchors.k_g = 2;
        cfg.train.workers = 2;
        cfg.train.period = 2;
        cfg.train.iterations = 8;
        cfg
    }

    #[test]
    fn roundtrip_preserves_state() {
        let c = cfg();
        let world = build_world(&c).unwrap();
        let mut tr = Trainer::new(c.clone(), world).unwrap();
        for _ in 0..3 {
            tr.step().unwrap();
        }
        let bytes = tr.checkpoint_bytes();
        let world2 = build_world(&c).unwrap();
        let restored = Trainer::from_checkpoint(c, world2, &bytes).unwrap();
        assert_eq!(restored.iteration, 3);
        assert_eq!(restored.checkpoint_bytes(), bytes);
    }

    #[test]
    fn resume_continues_identically() {
        let c = cfg();
        // Uninterrupted run.
        let mut full = Trainer::new(c.clone(), build_world(&c).unwrap()).unwrap();
        for _ in 0..8 {
            full.step().unwrap();
        }
        // Interrupted at 4, restored, finished.
        let mut head = Trainer::new(c.clone(), build_world(&c).unwrap()).unwrap();
        for _ in 0..4 {
            head.step().unwrap();
        }
        let snapshot = head.checkpoint_bytes();
        let mut tail =
            Trainer::from_checkpoint(c.clone(), build_world(&c).unwrap(), &snapshot).unwrap();
        for _ in 0..4 {
            tail.step().unwrap();
        }
        assert_eq!(tail.checkpoint_bytes(), full.checkpoint_bytes());
        // The resumed CSV matches the tail of the uninterrupted log.
        let full_rows: Vec<&str> = full.csv().lines().collect();
        let tail_rows: Vec<&str> = tail.csv().lines().collect();
        assert_eq!(
            &full_rows[full_rows.len() - (tail_rows.len() - 1)..],
            &tail_rows[1..]
        );
    }

    #[test]
    fn decode_rejects_corruption() {
        let c = cfg();
        let tr = Trainer::new(c.clone(), build_world(&c).unwrap()).unwrap();
        let bytes = tr.checkpoint_bytes();
        assert!(decode_checkpoint(&bytes).is_ok());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes[1..]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 99; // version
        assert!(decode_checkpoint(&bad).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
        assert!(decode_checkpoint(b"").is_err());
    }

    #[test]
    fn restore_rejects_config_mismatch() {
        let c = cfg();
        let tr = Trainer::new(c.clone(), build_world(&c).unwrap()).unwrap();
        let bytes = tr.checkpoint_bytes();
        let mut other = c.clone();
        other.anchors.k_g = 3;
        let res = Trainer::from_checkpoint(other.clone(), build_world(&other).unwrap(), &bytes);
        assert!(matches!(res, Err(Error::Validation(_))));
    }
}
