//! The neural half of the hybrid representation: a shared two-layer MLP that
//! decodes (anchor feature, viewing distance, viewing direction) into
//! per-slot Gaussian attributes, plus the momentum teacher machinery.

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::geom::{derive_rng, Camera};
use crate::scene::{Anchor, FEATURE_DIM};
use rand::Rng;

pub const HIDDEN_DIM: usize = 64;
/// feature (32) + distance (1) + direction (2).
pub const INPUT_DIM: usize = FEATURE_DIM + 3;
/// color (3) + opacity (1) + rotation (1) + scale (2) raw head outputs per slot.
pub const ATTRS_PER_SLOT: usize = 7;

/// Two-layer MLP weights; the student and teacher share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// [INPUT_DIM, HIDDEN_DIM]
    pub w1: Tensor,
    /// [1, HIDDEN_DIM]
    pub b1: Tensor,
    /// [HIDDEN_DIM, k_g * ATTRS_PER_SLOT]
    pub w2: Tensor,
    /// [1, k_g * ATTRS_PER_SLOT]
    pub b2: Tensor,
    pub k_g: u32,
}

impl DecoderParams {
    pub fn head_dim(k_g: u32) -> usize {
        k_g as usize * ATTRS_PER_SLOT
    }

    pub fn zeros(k_g: u32) -> Self {
        let h = Self::head_dim(k_g);
        DecoderParams {
            w1: Tensor::zeros(vec![INPUT_DIM, HIDDEN_DIM]),
            b1: Tensor::zeros(vec![1, HIDDEN_DIM]),
            w2: Tensor::zeros(vec![HIDDEN_DIM, h]),
            b2: Tensor::zeros(vec![1, h]),
            k_g,
        }
    }

    /// He-normal weights, zero biases, seeded.
    pub fn init_seeded(k_g: u32, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "decoder-init", 0);
        let h = Self::head_dim(k_g);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let dist = rand_distr::Normal::new(0.0, std).expect("normal");
            (0..n).map(|_| rng.sample(dist)).collect()
        };
        DecoderParams {
            w1: Tensor::new(
                vec![INPUT_DIM, HIDDEN_DIM],
                draw(INPUT_DIM * HIDDEN_DIM, (2.0 / INPUT_DIM as f64).sqrt()),
            )
            .expect("w1"),
            b1: Tensor::zeros(vec![1, HIDDEN_DIM]),
            w2: Tensor::new(
                vec![HIDDEN_DIM, h],
                draw(HIDDEN_DIM * h, (2.0 / HIDDEN_DIM as f64).sqrt()),
            )
            .expect("w2"),
            b2: Tensor::zeros(vec![1, h]),
            k_g,
        }
    }

    /// Parameter tensors in their declared (checkpoint) order.
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_vec(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    pub fn set_tensors(&mut self, t: Vec<Tensor>) -> Result<()> {
        if t.len() != 4 {
            return Err(Error::shape("decoder expects 4 parameter tensors"));
        }
        let mut it = t.into_iter();
        let (w1, b1, w2, b2) = (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        );
        for (have, want) in [
            (w1.shape(), self.w1.shape()),
            (b1.shape(), self.b1.shape()),
            (w2.shape(), self.w2.shape()),
            (b2.shape(), self.b2.shape()),
        ] {
            if have != want {
                return Err(Error::shape(format!("decoder tensor {have:?} vs {want:?}")));
            }
        }
        self.w1 = w1;
        self.b1 = b1;
        self.w2 = w2;
        self.b2 = b2;
        Ok(())
    }

    pub fn linf_distance(&self, other: &DecoderParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.linf_distance(b))
            .fold(0.0, f64::max)
    }
}

/// Student plus momentum-averaged teacher.
#[derive(Debug, Clone)]
pub struct DecoderPair {
    pub student: DecoderParams,
    pub teacher: DecoderParams,
    pub momentum: f64,
}

impl DecoderPair {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: DecoderParams, momentum: f64) -> Self {
        let teacher = student.clone();
        DecoderPair {
            student,
            teacher,
            momentum,
        }
    }
}

/// theta_t <- m * theta_t + (1 - m) * theta_s, elementwise; student untouched.
pub fn momentum_update(pair: &mut DecoderPair) -> Result<()> {
    let m = pair.momentum;
    if !(0.0..1.0).contains(&m) {
        return Err(Error::contract(format!("momentum {m} outside [0, 1)")));
    }
    for (t, s) in [
        (&mut pair.teacher.w1, &pair.student.w1),
        (&mut pair.teacher.b1, &pair.student.b1),
        (&mut pair.teacher.w2, &pair.student.w2),
        (&mut pair.teacher.b2, &pair.student.b2),
    ] {
        if t.shape() != s.shape() {
            return Err(Error::shape(format!(
                "teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let sd = s.data();
        for (tv, &sv) in t.data_mut().iter_mut().zip(sd) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// One decoder query: an anchor feature plus normalized viewing geometry.
#[derive(Debug, Clone)]
pub struct DecoderInput {
    pub feature: Tensor,
    /// Normalized distance in [0, 1].
    pub distance: f64,
    /// Unit direction camera -> anchor.
    pub direction: [f64; 2],
}

impl DecoderInput {
    pub fn validate(&self) -> Result<()> {
        if self.feature.shape() != [FEATURE_DIM] {
            return Err(Error::shape(format!(
                "decoder feature must be [{FEATURE_DIM}], got {:?}",
                self.feature.shape()
            )));
        }
        let n = (self.direction[0].powi(2) + self.direction[1].powi(2)).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "direction norm {n} must be 1 +- 1e-9"
            )));
        }
        if !(0.0..=1.0).contains(&self.distance) {
            return Err(Error::contract(format!(
                "distance {} outside [0, 1]",
                self.distance
            )));
        }
        Ok(())
    }
}

/// Activated attributes for one decoded slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotAttributes {
    pub color: [f64; 3],
    pub opacity: f64,
    pub rotation: f64,
    pub scale: [f64; 2],
}

/// Viewing geometry for one anchor as seen from a camera: normalized distance
/// and unit direction. Degenerate zero distance maps to direction (1, 0).
pub fn viewing_geometry(anchor_pos: [f64; 2], camera: &Camera, domain_diagonal: f64) -> [f64; 3] {
    let dx = anchor_pos[0] - camera.center[0];
    let dy = anchor_pos[1] - camera.center[1];
    let dist = (dx * dx + dy * dy).sqrt();
    let dir = if dist < 1e-12 {
        [1.0, 0.0]
    } else {
        [dx / dist, dy / dist]
    };
    [(dist / domain_diagonal).min(1.0), dir[0], dir[1]]
}

/// Rows of [feature | distance | direction] for a set of anchors.
pub fn decoder_inputs(anchors: &[&Anchor], camera: &Camera, domain_diagonal: f64) -> Tensor {
    let n = anchors.len();
    let mut data = Vec::with_capacity(n * INPUT_DIM);
    for a in anchors {
        data.extend_from_slice(a.feature.data());
        data.extend_from_slice(&viewing_geometry(a.position, camera, domain_diagonal));
    }
    Tensor::new(vec![n, INPUT_DIM], data).expect("decoder input matrix")
}

/// Decoder parameter slots registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderSlots {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

impl DecoderSlots {
    pub fn register(tape: &mut Tape, params: &DecoderParams) -> Self {
        DecoderSlots {
            w1: tape.param(params.w1.clone()),
            b1: tape.param(params.b1.clone()),
            w2: tape.param(params.w2.clone()),
            b2: tape.param(params.b2.clone()),
        }
    }

    pub fn constant(tape: &mut Tape, params: &DecoderParams) -> Self {
        DecoderSlots {
            w1: tape.constant(params.w1.clone()),
            b1: tape.constant(params.b1.clone()),
            w2: tape.constant(params.w2.clone()),
            b2: tape.constant(params.b2.clone()),
        }
    }
}

/// Activated attribute tensors over N * k_g slots.
#[derive(Debug, Clone, Copy)]
pub struct DecodedIds {
    pub color: ValueId,
    pub opacity: ValueId,
    pub rotation: ValueId,
    pub scale: ValueId,
}

/// Record the decode on a tape: layer1 -> relu -> layer2 -> per-head
/// activations. `input` is [N, INPUT_DIM]; outputs have N * k_g rows.
pub fn decode_on_tape(
    tape: &mut Tape,
    slots: &DecoderSlots,
    input: ValueId,
    k_g: u32,
    base_radius: f64,
) -> Result<DecodedIds> {
    let n = tape.value(input).rows();
    if n == 0 {
        return Err(Error::contract("decode of empty batch"));
    }
    // Bias rows are tiled via ones-matmul, keeping everything inside the
    // supported primitive set (gradient of the bias is the column sum).
    let ones = tape.constant(Tensor::full(vec![n, 1], 1.0));
    let xw1 = tape.matmul(input, slots.w1)?;
    let b1t = tape.matmul(ones, slots.b1)?;
    let pre1 = tape.add(xw1, b1t)?;
    let h = tape.relu(pre1)?;
    let hw2 = tape.matmul(h, slots.w2)?;
    let b2t = tape.matmul(ones, slots.b2)?;
    let raw = tape.add(hw2, b2t)?;
    let per_slot = tape.reshape(raw, vec![n * k_g as usize, ATTRS_PER_SLOT])?;
    let color_raw = tape.slice(per_slot, 1, 0, 3)?;
    let color = tape.sigmoid(color_raw)?;
    let op_raw = tape.slice(per_slot, 1, 3, 1)?;
    let opacity = tape.sigmoid(op_raw)?;
    let rotation = tape.slice(per_slot, 1, 4, 1)?;
    let scale_raw = tape.slice(per_slot, 1, 5, 2)?;
    let sp = tape.softplus(scale_raw)?;
    let scale = tape.scale(sp, base_radius)?;
    Ok(DecodedIds {
        color,
        opacity,
        rotation,
        scale,
    })
}

/// Activated attribute tensors over N * k_g slots (plain values).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBatch {
    pub color: Tensor,
    pub opacity: Tensor,
    pub rotation: Tensor,
    pub scale: Tensor,
}

impl DecodedBatch {
    /// All attributes flattened in (color, opacity, rotation, scale) order.
    pub fn flattened(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.color.len() + self.opacity.len() + self.rotation.len() + self.scale.len(),
        );
        out.extend_from_slice(self.color.data());
        out.extend_from_slice(self.opacity.data());
        out.extend_from_slice(self.rotation.data());
        out.extend_from_slice(self.scale.data());
        out
    }
}

/// Plain (untaped) decode; runs the same recorded ops on a scratch tape so
/// values agree bitwise with the differentiable path.
pub fn decode_batch(
    params: &DecoderParams,
    input: &Tensor,
    base_radius: f64,
) -> Result<DecodedBatch> {
    let mut tape = Tape::new();
    let slots = DecoderSlots::constant(&mut tape, params);
    let input_id = tape.constant(input.clone());
    let ids = decode_on_tape(&mut tape, &slots, input_id, params.k_g, base_radius)?;
    Ok(DecodedBatch {
        color: tape.value(ids.color).clone(),
        opacity: tape.value(ids.opacity).clone(),
        rotation: tape.value(ids.rotation).clone(),
        scale: tape.value(ids.scale).clone(),
    })
}

/// Decode one input into per-slot attributes.
pub fn decode_single(
    params: &DecoderParams,
    input: &DecoderInput,
    base_radius: f64,
) -> Result<Vec<SlotAttributes>> {
    input.validate()?;
    let mut row = input.feature.data().to_vec();
    row.push(input.distance);
    row.extend_from_slice(&input.direction);
    let mat = Tensor::new(vec![1, INPUT_DIM], row)?;
    let batch = decode_batch(params, &mat, base_radius)?;
    let k = params.k_g as usize;
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        out.push(SlotAttributes {
            color: [
                batch.color.data()[j * 3],
                batch.color.data()[j * 3 + 1],
                batch.color.data()[j * 3 + 2],
            ],
            opacity: batch.opacity.data()[j],
            rotation: batch.rotation.data()[j],
            scale: [batch.scale.data()[j * 2], batch.scale.data()[j * 2 + 1]],
        });
    }
    Ok(out)
}

/// Record the teacher-student consistency loss on the tape: mean squared
/// difference over all flattened activated attributes. The teacher side is a
/// constant, so no gradient can reach it.
pub fn consistency_loss_on_tape(
    tape: &mut Tape,
    student: &DecodedIds,
    teacher: &DecodedBatch,
) -> Result<ValueId> {
    if teacher.color.is_empty() {
        return Err(Error::contract("consistency loss over an empty batch"));
    }
    let sc = flatten_cat(tape, student)?;
    let t_flat = Tensor::new(vec![teacher.flattened().len()], teacher.flattened())?;
    let t_id = tape.constant(t_flat);
    let diff = tape.sub(sc, t_id)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

fn flatten_cat(tape: &mut Tape, ids: &DecodedIds) -> Result<ValueId> {
    let c_len = tape.value(ids.color).len();
    let o_len = tape.value(ids.opacity).len();
    let r_len = tape.value(ids.rotation).len();
    let s_len = tape.value(ids.scale).len();
    let c = tape.reshape(ids.color, vec![c_len])?;
    let o = tape.reshape(ids.opacity, vec![o_len])?;
    let r = tape.reshape(ids.rotation, vec![r_len])?;
    let s = tape.reshape(ids.scale, vec![s_len])?;
    tape.concat(&[c, o, r, s], 0)
}

/// Plain consistency value between two parameter sets on the same inputs.
pub fn consistency_loss_value(
    pair: &DecoderPair,
    inputs: &Tensor,
    base_radius: f64,
) -> Result<f64> {
    if inputs.rows() == 0 {
        return Err(Error::contract("consistency loss over an empty batch"));
    }
    let s = decode_batch(&pair.student, inputs, base_radius)?.flattened();
    let t = decode_batch(&pair.teacher, inputs, base_radius)?.flattened();
    let n = s.len() as f64;
    Ok(s.iter()
        .zip(&t)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Anchors whose position lies in the viewport inflated by
/// margin * half_extent per side. Returns indices in anchor order.
pub fn frustum_filter(anchors: &[Anchor], camera: &Camera, margin: f64) -> Vec<usize> {
    let m = margin * camera.half_extent;
    let vp = camera.viewport();
    let inflated = crate::geom::Rect::new(
        [vp.min[0] - m, vp.min[1] - m],
        [vp.max[0] + m, vp.max[1] + m],
    );
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| inflated.contains_closed(a.position))
        .map(|(i, _)| i)
        .collect()
}
