//! The training engine: block sampling schedule, barrier-synchronized
//! parallel forward/backward with a shared student decoder, deterministic
//! gradient accumulation, teacher momentum updates, metric tracking, block
//! weighting, and checkpointing.

mod checkpoint;
mod merge;

pub use checkpoint::{decode_checkpoint, decode_merged, encode_merged, CheckpointData};
pub use merge::{
    evaluate_images, evaluate_merged, merge, render_block, render_merged, seam_statistic,
    MergedAnchor, MergedModel,
};

use crate::autodiff::{backward, AdamHyper, AdamState, Tape, Tensor};
use crate::config::{GradCombine, Mode, RunConfig};
use crate::decoder::{
    consistency_loss_on_tape, decode_batch, decode_on_tape, frustum_filter, momentum_update,
    DecoderPair, DecoderParams, DecoderSlots,
};
use crate::error::{Error, Result};
use crate::geom::{derive_rng, Camera};
use crate::metrics::{l1_loss_on_tape, psnr, ssim_loss_on_tape, BlockMetricTracker, MetricReport};
use crate::render::{composite_on_tape, Image, RenderSettings, SortKey};
use crate::scene::{Block, World};
use crate::weighting::{block_weights, deviations};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Frustum margin as a fraction of the camera half extent; anchors this far
/// outside the viewport still contribute splats that leak into it.
pub const FRUSTUM_MARGIN: f64 = 0.25;

/// Column order of the metrics log.
pub const CSV_HEADER: &str =
    "iter,block,psnr,ssim,l1,psnr_ema,ssim_ema,weight,loss_total,loss_recon,loss_consistency";

/// One epoch's sampling plan: a seeded permutation of block ids chunked into
/// groups of at most k; each group trains for `period` consecutive
/// iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub groups: Vec<Vec<u32>>,
}

/// Deterministic schedule for (seed, epoch): shuffle block ids, then chunk.
pub fn build_schedule(n_blocks: u32, k: u32, seed: u64, epoch: u64) -> Schedule {
    let mut ids: Vec<u32> = (0..n_blocks).collect();
    let mut rng = derive_rng(seed, "schedule", epoch);
    // Fisher-Yates.
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let groups = ids.chunks(k as usize).map(|c| c.to_vec()).collect();
    Schedule { groups }
}

/// Per-block mutable training state.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub block: Block,
    pub feat_adam: AdamState,
    pub offset_adam: AdamState,
    pub tracker: BlockMetricTracker,
    pub view_rng: ChaCha8Rng,
    /// Assigned training view ids.
    pub views: Vec<u32>,
}

struct WorkItem<'a> {
    block_idx: usize,
    state: &'a BlockState,
    student: &'a DecoderParams,
    teacher: Option<&'a DecoderParams>,
    camera: &'a Camera,
    gt: &'a Image,
    weight: f64,
}

struct WorkResult {
    block_idx: usize,
    decoder_grads: Vec<Tensor>,
    /// (anchor index, feature grad, offset grad) for visible anchors.
    anchor_grads: Vec<(usize, Tensor, Tensor)>,
    report: MetricReport,
    loss_total: f64,
    loss_recon: f64,
    loss_consistency: f64,
}

/// The coordinator owning all mutable training state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub world: World,
    /// One shared student, or one per block in independent mode.
    pub students: Vec<DecoderParams>,
    student_adams: Vec<AdamState>,
    pub teacher: Option<DecoderParams>,
    pub block_states: Vec<BlockState>,
    pub weights: Vec<f64>,
    pub iteration: u64,
    csv: String,
}

impl Trainer {
    pub fn new(cfg: RunConfig, world: World) -> Result<Self> {
        cfg.validate()?;
        let n = world.blocks.len();
        if n != cfg.n_blocks() as usize {
            return Err(Error::contract(format!(
                "world has {n} blocks but config expects {}",
                cfg.n_blocks()
            )));
        }
        let k_g = cfg.anchors.k_g;
        let student0 = DecoderParams::init_seeded(k_g, cfg.train.seed);
        let n_students = if cfg.train.mode == Mode::Independent {
            n
        } else {
            1
        };
        let students = vec![student0.clone(); n_students];
        let dec_hyper = AdamHyper {
            lr: cfg.train.optim.lr_decoder,
            beta1: cfg.train.optim.beta1,
            beta2: cfg.train.optim.beta2,
            epsilon: cfg.train.optim.epsilon,
        };
        let student_adams = students
            .iter()
            .map(|s| AdamState::new(dec_hyper, &s.tensors_vec()))
            .collect();
        let teacher = if cfg.train.mode == Mode::MomentumDistill {
            Some(student0.clone())
        } else {
            None
        };

        let mut block_states = Vec::with_capacity(n);
        for (bi, block) in world.blocks.iter().enumerate() {
            let feats: Vec<Tensor> = block.anchors.iter().map(|a| a.feature.clone()).collect();
            let offs: Vec<Tensor> = block.anchors.iter().map(|a| a.offsets.clone()).collect();
            let feat_hyper = AdamHyper {
                lr: cfg.train.optim.lr_feature,
                ..dec_hyper
            };
            let off_hyper = AdamHyper {
                lr: cfg.train.optim.lr_offset,
                ..dec_hyper
            };
            block_states.push(BlockState {
                block: block.clone(),
                feat_adam: AdamState::new(feat_hyper, &feats),
                offset_adam: AdamState::new(off_hyper, &offs),
                tracker: BlockMetricTracker::new(block.id, cfg.train.beta_track),
                view_rng: derive_rng(cfg.train.seed, "views", block.id as u64),
                views: world.dataset.block_views[bi].clone(),
            });
        }
        let weights = vec![1.0; n];
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        Ok(Trainer {
            cfg,
            world,
            students,
            student_adams,
            teacher,
            block_states,
            weights,
            iteration: 0,
            csv,
        })
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        let n = self.block_states.len() as u64;
        let k = self.cfg.train.workers as u64;
        n.div_ceil(k) * self.cfg.train.period as u64
    }

    /// Active block ids for a given iteration.
    pub fn active_group(&self, iteration: u64) -> Vec<u32> {
        let per_epoch = self.iterations_per_epoch();
        let epoch = iteration / per_epoch;
        let phase = (iteration % per_epoch) / self.cfg.train.period as u64;
        let sched = build_schedule(
            self.block_states.len() as u32,
            self.cfg.train.workers,
            self.cfg.train.seed,
            epoch,
        );
        sched.groups[phase as usize].clone()
    }

    fn student_for(&self, block_idx: usize) -> &DecoderParams {
        if self.students.len() == 1 {
            &self.students[0]
        } else {
            &self.students[block_idx]
        }
    }

    /// One barrier-synchronized logical iteration.
    pub fn step(&mut self) -> Result<()> {
        let group = self.active_group(self.iteration);

        // View draws come from per-block seeded streams, in ascending block id
        // order, before any worker starts.
        let mut sorted_group = group.clone();
        sorted_group.sort_unstable();
        let mut draws: Vec<(usize, u32)> = Vec::with_capacity(sorted_group.len());
        for &bid in &sorted_group {
            let bi = bid as usize;
            let n_views = self.block_states[bi].views.len();
            let pick = self.block_states[bi].view_rng.random_range(0..n_views);
            draws.push((bi, self.block_states[bi].views[pick]));
        }

        // Weights used this iteration (recomputed at the previous barrier).
        let weights_used = self.weights.clone();

        let lambda_ssim = self.cfg.train.lambda_ssim;
        let lambda_cons = self.cfg.train.lambda_consistency;
        let diag = self.world.domain.diagonal();

        let mut results: Vec<WorkResult> = {
            let items: Vec<WorkItem> = draws
                .iter()
                .map(|&(bi, view_id)| WorkItem {
                    block_idx: bi,
                    state: &self.block_states[bi],
                    student: self.student_for(bi),
                    teacher: self.teacher.as_ref(),
                    camera: &self.world.dataset.cameras[view_id as usize],
                    gt: self.world.dataset.gt_for(view_id),
                    weight: weights_used[bi],
                })
                .collect();

            let threads = if self.cfg.train.threads == 0 {
                items.len()
            } else {
                (self.cfg.train.threads as usize).min(items.len())
            };
            if threads <= 1 || items.len() == 1 {
                items
                    .iter()
                    .map(|it| run_block_iteration(it, lambda_ssim, lambda_cons, diag))
                    .collect::<Result<_>>()?
            } else {
                // Round-robin the items over worker threads; join order is
                // fixed, and results are re-sorted by block id below, so
                // thread count cannot influence the outcome.
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..threads)
                        .map(|t| {
                            let chunk: Vec<&WorkItem> =
                                items.iter().skip(t).step_by(threads).collect();
                            scope.spawn(move || {
                                chunk
                                    .into_iter()
                                    .map(|it| {
                                        run_block_iteration(it, lambda_ssim, lambda_cons, diag)
                                    })
                                    .collect::<Result<Vec<_>>>()
                            })
                        })
                        .collect();
                    let mut all = Vec::new();
                    for h in handles {
                        all.extend(h.join().expect("worker thread panicked")?);
                    }
                    Ok::<_, Error>(all)
                })?
            }
        };
        results.sort_by_key(|r| r.block_idx);

        // Shared decoder: gradients reduce in ascending block id order, then
        // one optimizer step. Independent: each block steps its own decoder.
        if self.students.len() == 1 {
            let mut reduced = self.students[0]
                .tensors_vec()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>();
            for r in &results {
                for (acc, g) in reduced.iter_mut().zip(&r.decoder_grads) {
                    acc.add_assign(g)?;
                }
            }
            if self.cfg.train.grad_combine == GradCombine::Mean && !results.is_empty() {
                let inv = 1.0 / results.len() as f64;
                for t in reduced.iter_mut() {
                    for v in t.data_mut() {
                        *v *= inv;
                    }
                }
            }
            let mut tensors = self.students[0].tensors_vec();
            self.student_adams[0].step(&mut tensors, &reduced)?;
            self.students[0].set_tensors(tensors)?;
        } else {
            for r in &results {
                let mut tensors = self.students[r.block_idx].tensors_vec();
                self.student_adams[r.block_idx].step(&mut tensors, &r.decoder_grads)?;
                self.students[r.block_idx].set_tensors(tensors)?;
            }
        }

        // Anchor parameters step per block with their own Adam states;
        // invisible anchors receive exact-zero gradients.
        for r in &results {
            let state = &mut self.block_states[r.block_idx];
            let n_anchors = state.block.anchors.len();
            let mut feat_grads: Vec<Tensor> = state
                .block
                .anchors
                .iter()
                .map(|a| Tensor::zeros(a.feature.shape().to_vec()))
                .collect();
            let mut off_grads: Vec<Tensor> = state
                .block
                .anchors
                .iter()
                .map(|a| Tensor::zeros(a.offsets.shape().to_vec()))
                .collect();
            for (ai, fg, og) in &r.anchor_grads {
                debug_assert!(*ai < n_anchors);
                feat_grads[*ai] = fg.clone();
                off_grads[*ai] = og.clone();
            }
            let mut feats: Vec<Tensor> = state
                .block
                .anchors
                .iter()
                .map(|a| a.feature.clone())
                .collect();
            state.feat_adam.step(&mut feats, &feat_grads)?;
            for (a, f) in state.block.anchors.iter_mut().zip(feats) {
                a.feature = f;
            }
            let mut offs: Vec<Tensor> = state
                .block
                .anchors
                .iter()
                .map(|a| a.offsets.clone())
                .collect();
            state.offset_adam.step(&mut offs, &off_grads)?;
            for (a, o) in state.block.anchors.iter_mut().zip(offs) {
                a.offsets = o;
            }
        }

        // Teacher follows the student once per logical iteration.
        if let Some(teacher) = self.teacher.take() {
            let mut pair = DecoderPair {
                student: self.students[0].clone(),
                teacher,
                momentum: self.cfg.train.momentum,
            };
            momentum_update(&mut pair)?;
            self.teacher = Some(pair.teacher);
        }

        // Trackers for the blocks visited this iteration.
        for r in &results {
            self.block_states[r.block_idx].tracker.update(&r.report);
        }

        // Weight recomputation at the barrier; weights stay at 1 until every
        // block has been visited at least once.
        if self.cfg.weighting.enabled && self.block_states.iter().all(|s| s.tracker.initialized) {
            let trackers: Vec<BlockMetricTracker> =
                self.block_states.iter().map(|s| s.tracker).collect();
            self.weights = block_weights(&deviations(&trackers)?, &self.cfg.weighting);
        }

        for r in &results {
            let t = &self.block_states[r.block_idx].tracker;
            self.csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                self.iteration,
                self.block_states[r.block_idx].block.id,
                r.report.psnr,
                r.report.ssim,
                r.report.l1,
                t.psnr_ema,
                t.ssim_ema,
                weights_used[r.block_idx],
                r.loss_total,
                r.loss_recon,
                r.loss_consistency
            ));
        }

        self.iteration += 1;
        Ok(())
    }

    /// Train until the configured iteration budget, invoking `on_checkpoint`
    /// at the start, every `checkpoint_every` iterations, and at the end.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(u64, &[u8]) -> Result<()>) -> Result<()> {
        on_checkpoint(self.iteration, &self.checkpoint_bytes())?;
        while self.iteration < self.cfg.train.iterations {
            self.step()?;
            if self
                .iteration
                .is_multiple_of(self.cfg.output.checkpoint_every)
                && self.iteration < self.cfg.train.iterations
            {
                on_checkpoint(self.iteration, &self.checkpoint_bytes())?;
            }
        }
        if self.iteration > 0 {
            on_checkpoint(self.iteration, &self.checkpoint_bytes())?;
        }
        Ok(())
    }

    pub fn csv(&self) -> &str {
        &self.csv
    }

    /// Serialize all mutable state; reloading continues bitwise-identically.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode_checkpoint(self)
    }

    /// Restore a trainer from checkpoint bytes over a freshly built world.
    pub fn from_checkpoint(cfg: RunConfig, world: World, bytes: &[u8]) -> Result<Self> {
        let data = checkpoint::decode_checkpoint(bytes)?;
        checkpoint::restore(cfg, world, data)
    }

    /// Merge the trained blocks into a single renderable model.
    pub fn merged(&self) -> Result<MergedModel> {
        merge(&self.block_states, &self.world.domain, &self.students)
    }

    pub(crate) fn student_adams(&self) -> &[AdamState] {
        &self.student_adams
    }

    pub(crate) fn set_student_adams(&mut self, adams: Vec<AdamState>) -> Result<()> {
        if adams.len() != self.student_adams.len() {
            return Err(Error::validation("student optimizer group count mismatch"));
        }
        self.student_adams = adams;
        Ok(())
    }
}

/// Forward + backward for one block on one view. Pure function of its
/// inputs; safe to run on any thread.
fn run_block_iteration(
    item: &WorkItem,
    lambda_ssim: f64,
    lambda_cons: f64,
    domain_diagonal: f64,
) -> Result<WorkResult> {
    let anchors = &item.state.block.anchors;
    let visible = frustum_filter(anchors, item.camera, FRUSTUM_MARGIN);
    let block_id = item.state.block.id;
    if visible.is_empty() {
        // Nothing renders: black image, no gradients.
        let img = Image::black(item.camera.width, item.camera.height);
        let l1 = crate::metrics::l1_loss(&img, item.gt)?;
        let sl = crate::metrics::ssim_loss(&img, item.gt)?;
        let recon = l1 + lambda_ssim * sl;
        return Ok(WorkResult {
            block_idx: item.block_idx,
            decoder_grads: item
                .student
                .tensors_vec()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            anchor_grads: Vec::new(),
            report: MetricReport {
                psnr: psnr(&img, item.gt)?,
                ssim: 1.0 - sl,
                l1,
            },
            loss_total: item.weight * recon,
            loss_recon: recon,
            loss_consistency: 0.0,
        });
    }

    let k_g = item.student.k_g;
    let base_radius = anchors[visible[0]].base_radius;
    let vis_anchors: Vec<&crate::scene::Anchor> = visible.iter().map(|&i| &anchors[i]).collect();

    let mut tape = Tape::new();
    let slots = DecoderSlots::register(&mut tape, item.student);
    // Per-anchor parameter slots, in visible order after the decoder slots.
    let mut feat_rows = Vec::with_capacity(visible.len());
    let mut off_ids = Vec::with_capacity(visible.len());
    for a in &vis_anchors {
        let f = tape.param(a.feature.clone());
        let row = tape.reshape(f, vec![1, crate::scene::FEATURE_DIM])?;
        feat_rows.push(row);
        off_ids.push(tape.param(a.offsets.clone()));
    }
    let feats = tape.concat(&feat_rows, 0)?;
    let n = vis_anchors.len();
    let mut geom = Vec::with_capacity(n * 3);
    for a in &vis_anchors {
        geom.extend_from_slice(&crate::decoder::viewing_geometry(
            a.position,
            item.camera,
            domain_diagonal,
        ));
    }
    let geom_id = tape.constant(Tensor::new(vec![n, 3], geom)?);
    let input = tape.concat(&[feats, geom_id], 1)?;
    let decoded = decode_on_tape(&mut tape, &slots, input, k_g, base_radius)?;

    // Splat centers: anchor position + offset * base_radius.
    let offsets_cat = tape.concat(&off_ids, 0)?;
    let scaled_off = tape.scale(offsets_cat, base_radius)?;
    let mut pos_tiled = Vec::with_capacity(n * k_g as usize * 2);
    for a in &vis_anchors {
        for _ in 0..k_g {
            pos_tiled.extend_from_slice(&a.position);
        }
    }
    let pos_id = tape.constant(Tensor::new(vec![n * k_g as usize, 2], pos_tiled)?);
    let centers = tape.add(scaled_off, pos_id)?;

    let mut keys = Vec::with_capacity(n * k_g as usize);
    for a in &vis_anchors {
        for j in 0..k_g {
            keys.push(SortKey {
                block: block_id,
                anchor: a.id,
                slot: j,
            });
        }
    }
    let image = composite_on_tape(
        &mut tape,
        centers,
        decoded.rotation,
        decoded.scale,
        decoded.color,
        decoded.opacity,
        keys,
        *item.camera,
        RenderSettings::default(),
    )?;

    let l1 = l1_loss_on_tape(&mut tape, image, item.gt)?;
    let sl = ssim_loss_on_tape(&mut tape, image, item.gt)?;
    let sl_scaled = tape.scale(sl, lambda_ssim)?;
    let recon = tape.add(l1, sl_scaled)?;
    let weighted = tape.scale(recon, item.weight)?;
    let (total, cons_value) = if let Some(teacher) = item.teacher {
        let teacher_batch = decode_batch(teacher, tape.value(input), base_radius)?;
        let cons = consistency_loss_on_tape(&mut tape, &decoded, &teacher_batch)?;
        let cons_scaled = tape.scale(cons, lambda_cons)?;
        (tape.add(weighted, cons_scaled)?, tape.value(cons).item())
    } else {
        (weighted, 0.0)
    };

    let loss_total = tape.value(total).item();
    if !loss_total.is_finite() {
        return Err(Error::numerics(format!(
            "non-finite loss in block {block_id}"
        )));
    }

    let rendered = Image::from_tensor(tape.value(image))?;
    let report = MetricReport {
        psnr: psnr(&rendered, item.gt)?,
        ssim: 1.0 - tape.value(sl).item(),
        l1: tape.value(l1).item(),
    };
    let loss_recon = tape.value(recon).item();

    let grads = backward(&tape, total)?;
    let all = grads.wrt_params(&tape);
    // Slot order: 4 decoder tensors, then (feature, offsets) per visible anchor.
    let decoder_grads = all[0..4].to_vec();
    let mut anchor_grads = Vec::with_capacity(visible.len());
    for (vi, &ai) in visible.iter().enumerate() {
        let fg = all[4 + vi * 2].clone();
        let og = all[4 + vi * 2 + 1].clone();
        anchor_grads.push((ai, fg, og));
    }

    Ok(WorkResult {
        block_idx: item.block_idx,
        decoder_grads,
        anchor_grads,
        report,
        loss_total,
        loss_recon,
        loss_consistency: cons_value,
    })
}
