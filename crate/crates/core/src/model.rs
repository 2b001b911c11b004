//! One Siamese branch: convolutional frontend, K attentive filters refined by
//! a ConvLSTM, feature heads, and the combined descriptor.
//!
//! Attention is frame-local: every frame's 32x10x8 feature map gets its own
//! T-step refinement from a zero state, so the whole sequence can run as one
//! batch. Temporal information enters through the flow channels and the
//! cross-frame averaging in the descriptor.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{Phase, Tape, Tid};
use crate::error::{Error, Result};
use crate::params::{fan_in_init, ParamId, ParamSet};
use crate::preprocess::{SequenceSample, NET_H, NET_W};
use crate::rng::RngStream;
use crate::tensor::FeatureMap;

/// Channel widths of the three frontend stages (input first).
pub const FRONT_CHANNELS: [usize; 4] = [5, 16, 32, 32];
/// Per-stage (height, width) zero padding. Height pads 4 take 56 to 10; the
/// width sequence 4,4,3 takes 48 to 8 (uniform 4s would land on 9).
pub const FRONT_PADS: [(usize, usize); 3] = [(4, 4), (4, 4), (4, 3)];
pub const FRONT_KERNEL: usize = 5;
/// Frontend output geometry.
pub const FEAT_C: usize = 32;
pub const FEAT_H: usize = 10;
pub const FEAT_W: usize = 8;
pub const FEAT_DIM: usize = FEAT_C * FEAT_H * FEAT_W;
/// Attention hidden channels.
pub const ATTN_HIDDEN: usize = 32;
/// Descriptor width.
pub const DESC_DIM: usize = 128;
/// Norms at or below this are treated as zero when normalizing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of attentive filters K (0 disables the filtered path).
    pub filters: usize,
    /// Refinement steps T per filter.
    pub refine_steps: usize,
    /// Identity classes for the per-branch classifier.
    pub identities: usize,
    /// Dropout rate on the head inputs.
    pub dropout: f64,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.refine_steps == 0 {
            return Err(Error::invalid("model", "refine_steps must be >= 1"));
        }
        if self.identities < 2 {
            return Err(Error::invalid("model", "need at least 2 identities"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model", format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

struct GateIds {
    x_w: ParamId,
    x_b: ParamId,
    h_w: ParamId,
}

struct FilterIds {
    ax_w: ParamId,
    ax_b: ParamId,
    ah_w: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    /// Absent at refine_steps 1: the loop never reaches a state update, so
    /// gate parameters would be dead weight.
    gates: Option<GateIds>,
}

struct ModelIds {
    front: Vec<(ParamId, ParamId)>,
    filters: Vec<FilterIds>,
    general_w: ParamId,
    general_b: ParamId,
    /// Absent at zero filters: no filtered head runs.
    filtered: Option<(ParamId, ParamId)>,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ModelIds,
}

/// Parameter leaves registered on one tape.
pub struct TapeParams {
    front: Vec<(Tid, Tid)>,
    filters: Vec<FilterTids>,
    general_w: Tid,
    general_b: Tid,
    filtered: Option<(Tid, Tid)>,
    classifier_w: Tid,
    classifier_b: Tid,
}

#[derive(Clone, Copy)]
struct GateTids {
    x_w: Tid,
    x_b: Tid,
    h_w: Tid,
}

struct FilterTids {
    ax_w: Tid,
    ax_b: Tid,
    ah_w: Tid,
    out_w: Tid,
    out_b: Tid,
    gates: Option<GateTids>,
}

/// Intermediates of one filter's refinement loop.
pub struct RefineTrace {
    /// Softmax maps applied on rounds 2..=T (empty at T = 1).
    pub maps: Vec<Tid>,
    /// Final round's raw score [n,1,10,8].
    pub score: Tid,
}

/// Tape nodes of one branch forward pass.
pub struct BranchGraph {
    /// Frontend output [n,32,10,8].
    pub features: Tid,
    /// General head rows [n,128].
    pub general_rows: Tid,
    /// Filtered head rows, one [n,128] per filter.
    pub filtered_rows: Vec<Tid>,
    /// Combined descriptor [1,128].
    pub descriptor: Tid,
    /// Identity logits [1,identities].
    pub logits: Tid,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = RngStream::new(seed).fork("init");
        let mut ps = ParamSet::new();
        let k = FRONT_KERNEL;

        let mut front = Vec::new();
        for stage in 0..3 {
            let (ci, co) = (FRONT_CHANNELS[stage], FRONT_CHANNELS[stage + 1]);
            let w = ps.add(
                &format!("frontend.stage{}.w", stage + 1),
                &[co, ci, k, k],
                fan_in_init(ci * k * k, &mut rng),
            )?;
            let b = ps.add(&format!("frontend.stage{}.b", stage + 1), &[co], |_| 0.0)?;
            front.push((w, b));
        }

        let mut filters = Vec::new();
        for f in 0..config.filters {
            let p = |suffix: &str| format!("filter{}.{}", f + 1, suffix);
            let c = FEAT_C;
            let a = ATTN_HIDDEN;
            let fan_c = c * 9;
            let fan_a = a * 9;
            let ax_w = ps.add(&p("attend.x.w"), &[a, c, 3, 3], fan_in_init(fan_c, &mut rng))?;
            let ax_b = ps.add(&p("attend.x.b"), &[a], |_| 0.0)?;
            let ah_w = ps.add(&p("attend.h.w"), &[a, c, 3, 3], fan_in_init(fan_c, &mut rng))?;
            let out_w = ps.add(&p("attend.out.w"), &[1, a, 3, 3], fan_in_init(fan_a, &mut rng))?;
            let out_b = ps.add(&p("attend.out.b"), &[1], |_| 0.0)?;
            let gates = if config.refine_steps >= 2 {
                Some(GateIds {
                    x_w: ps.add(&p("gates.x.w"), &[3 * c, c, 3, 3], fan_in_init(fan_c, &mut rng))?,
                    x_b: ps.add(&p("gates.x.b"), &[3 * c], |_| 0.0)?,
                    h_w: ps.add(&p("gates.h.w"), &[3 * c, c, 3, 3], fan_in_init(fan_c, &mut rng))?,
                })
            } else {
                None
            };
            filters.push(FilterIds { ax_w, ax_b, ah_w, out_w, out_b, gates });
        }

        let general_w = ps.add("head.general.w", &[FEAT_DIM, DESC_DIM], fan_in_init(FEAT_DIM, &mut rng))?;
        let general_b = ps.add("head.general.b", &[DESC_DIM], |_| 0.0)?;
        let filtered = if config.filters >= 1 {
            let w = ps.add("head.filtered.w", &[FEAT_DIM, DESC_DIM], fan_in_init(FEAT_DIM, &mut rng))?;
            let b = ps.add("head.filtered.b", &[DESC_DIM], |_| 0.0)?;
            Some((w, b))
        } else {
            None
        };
        let classifier_w = ps.add(
            "classifier.w",
            &[DESC_DIM, config.identities],
            fan_in_init(DESC_DIM, &mut rng),
        )?;
        let classifier_b = ps.add("classifier.b", &[config.identities], |_| 0.0)?;

        Ok(Model {
            config,
            params: ps,
            ids: ModelIds {
                front,
                filters,
                general_w,
                general_b,
                filtered,
                classifier_w,
                classifier_b,
            },
        })
    }

    /// Registers every parameter on `tape` (one copy per tape).
    pub fn tape_params(&self, tape: &mut Tape) -> TapeParams {
        let ps = &self.params;
        TapeParams {
            front: self
                .ids
                .front
                .iter()
                .map(|(w, b)| (tape.param(ps, *w), tape.param(ps, *b)))
                .collect(),
            filters: self
                .ids
                .filters
                .iter()
                .map(|f| FilterTids {
                    ax_w: tape.param(ps, f.ax_w),
                    ax_b: tape.param(ps, f.ax_b),
                    ah_w: tape.param(ps, f.ah_w),
                    out_w: tape.param(ps, f.out_w),
                    out_b: tape.param(ps, f.out_b),
                    gates: f.gates.as_ref().map(|g| GateTids {
                        x_w: tape.param(ps, g.x_w),
                        x_b: tape.param(ps, g.x_b),
                        h_w: tape.param(ps, g.h_w),
                    }),
                })
                .collect(),
            general_w: tape.param(ps, self.ids.general_w),
            general_b: tape.param(ps, self.ids.general_b),
            filtered: self.ids.filtered.map(|(w, b)| (tape.param(ps, w), tape.param(ps, b))),
            classifier_w: tape.param(ps, self.ids.classifier_w),
            classifier_b: tape.param(ps, self.ids.classifier_b),
        }
    }

    /// Three stages of conv(5x5, stride 1) -> maxpool2 -> tanh, taking
    /// [n,5,56,48] to [n,32,10,8].
    pub fn conv_frontend(&self, tape: &mut Tape, tp: &TapeParams, x: Tid) -> Result<Tid> {
        let shape = tape.value(x).shape();
        if shape.1 != FRONT_CHANNELS[0] || shape.2 != NET_H || shape.3 != NET_W {
            return Err(Error::shape(
                "conv_frontend",
                format!("expected [n,{},{NET_H},{NET_W}], got {shape:?}", FRONT_CHANNELS[0]),
            ));
        }
        let mut cur = x;
        for (stage, (w, b)) in tp.front.iter().enumerate() {
            cur = tape.conv2d(cur, *w, Some(*b), FRONT_PADS[stage], 1)?;
            cur = tape.maxpool2(cur)?;
            cur = tape.tanh(cur);
        }
        debug_assert_eq!(
            tape.value(cur).shape(),
            (shape.0, FEAT_C, FEAT_H, FEAT_W)
        );
        Ok(cur)
    }

    /// score = Wout * tanh(Wx*X + Wh*H + b) + b_out; map = softmax over the
    /// 80 spatial cells, per batch item.
    pub fn attention_scores(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        filter: usize,
        x: Tid,
        h_prev: Tid,
    ) -> Result<(Tid, Tid)> {
        let f = &tp.filters[filter];
        let ax = tape.conv2d(x, f.ax_w, Some(f.ax_b), (1, 1), 1)?;
        let score = self.attention_scores_from_ax(tape, tp, filter, ax, h_prev)?;
        let map = tape.softmax_spatial(score)?;
        Ok((score, map))
    }

    fn attention_scores_from_ax(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        filter: usize,
        ax: Tid,
        h_prev: Tid,
    ) -> Result<Tid> {
        let f = &tp.filters[filter];
        let ah = tape.conv2d(h_prev, f.ah_w, None, (1, 1), 1)?;
        let sum = tape.add(ax, ah)?;
        let pre = tape.tanh(sum);
        tape.conv2d(pre, f.out_w, Some(f.out_b), (1, 1), 1)
    }

    /// X' = X elementwise-scaled by the single-channel map.
    pub fn apply_attention(&self, tape: &mut Tape, x: Tid, map: Tid) -> Result<Tid> {
        tape.mul_map(x, map)
    }

    /// One ConvLSTM update. Gate pre-activations for i, f, o are computed as
    /// one stacked 3c-channel convolution pair and sliced (channel blocks in
    /// i, f, o order), which is the same arithmetic as three separate conv
    /// pairs. Cell update uses X' directly: C' = i.X' + f.C, H' = o.tanh(C').
    pub fn convlstm_step(
        &self,
        tape: &mut Tape,
        xp: Tid,
        h: Tid,
        c: Tid,
        gate_x_w: Tid,
        gate_x_b: Tid,
        gate_h_w: Tid,
    ) -> Result<(Tid, Tid)> {
        let channels = tape.value(xp).c;
        let gx = tape.conv2d(xp, gate_x_w, Some(gate_x_b), (1, 1), 1)?;
        let gh = tape.conv2d(h, gate_h_w, None, (1, 1), 1)?;
        let pre = tape.add(gx, gh)?;
        let i_pre = tape.slice_channels(pre, 0, channels)?;
        let f_pre = tape.slice_channels(pre, channels, 2 * channels)?;
        let o_pre = tape.slice_channels(pre, 2 * channels, 3 * channels)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let o = tape.sigmoid(o_pre);
        let ix = tape.mul(i, xp)?;
        let fc = tape.mul(f, c)?;
        let c_new = tape.add(ix, fc)?;
        let ct = tape.tanh(c_new);
        let h_new = tape.mul(o, ct)?;
        Ok((h_new, c_new))
    }

    /// T rounds of attend -> weight -> ConvLSTM from a zero state; returns the
    /// final round's raw score map [n,1,10,8]. The state update after the
    /// last score is skipped since nothing reads it.
    pub fn refine_filter(&self, tape: &mut Tape, tp: &TapeParams, filter: usize, x: Tid) -> Result<Tid> {
        Ok(self.refine_filter_trace(tape, tp, filter, x)?.score)
    }

    /// `refine_filter` with the intermediate softmax maps kept for inspection.
    pub fn refine_filter_trace(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        filter: usize,
        x: Tid,
    ) -> Result<RefineTrace> {
        let f = &tp.filters[filter];
        let (n, c, hh, ww) = tape.value(x).shape();
        let steps = self.config.refine_steps;
        let ax = tape.conv2d(x, f.ax_w, Some(f.ax_b), (1, 1), 1)?;
        let mut h = tape.leaf(FeatureMap::zeros(n, c, hh, ww));
        let mut cell = tape.leaf(FeatureMap::zeros(n, c, hh, ww));
        let mut score = self.attention_scores_from_ax(tape, tp, filter, ax, h)?;
        let mut maps = Vec::with_capacity(steps.saturating_sub(1));
        for _ in 1..steps {
            let map = tape.softmax_spatial(score)?;
            maps.push(map);
            let xp = self.apply_attention(tape, x, map)?;
            let g = f.gates.expect("gate parameters exist whenever refine_steps >= 2");
            let (h_new, c_new) = self.convlstm_step(tape, xp, h, cell, g.x_w, g.x_b, g.h_w)?;
            h = h_new;
            cell = c_new;
            score = self.attention_scores_from_ax(tape, tp, filter, ax, h)?;
        }
        Ok(RefineTrace { maps, score })
    }

    /// gate = sigmoid(raw score); output = Xf scaled by gate per spatial cell.
    pub fn filter_block(&self, tape: &mut Tape, xf: Tid, raw_score: Tid) -> Result<Tid> {
        let gate = tape.sigmoid(raw_score);
        tape.mul_map(xf, gate)
    }

    fn head_rows(
        &self,
        tape: &mut Tape,
        input: Tid,
        w: Tid,
        b: Tid,
        phase: Phase,
        rng: &mut RngStream,
    ) -> Result<Tid> {
        let flat = tape.flatten(input);
        let dropped = tape.dropout(flat, self.config.dropout, phase, rng)?;
        tape.linear(dropped, w, b)
    }

    /// Frontend plus both heads: per-frame general rows and one filtered-row
    /// matrix per filter. Shared by training (whole sequence in one batch)
    /// and evaluation (frame at a time). Returns (features, general, filtered).
    pub fn build_rows(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        x: Tid,
        phase: Phase,
        rng: &mut RngStream,
    ) -> Result<(Tid, Tid, Vec<Tid>)> {
        let xf = self.conv_frontend(tape, tp, x)?;
        let general = self.head_rows(tape, xf, tp.general_w, tp.general_b, phase, rng)?;
        let mut filtered = Vec::with_capacity(self.config.filters);
        for k in 0..self.config.filters {
            let score = self.refine_filter(tape, tp, k, xf)?;
            let block = self.filter_block(tape, xf, score)?;
            let (fw, fb) = tp.filtered.expect("filtered head exists whenever filters >= 1");
            let rows = self.head_rows(tape, block, fw, fb, phase, rng)?;
            filtered.push(rows);
        }
        Ok((xf, general, filtered))
    }

    /// Stacks general with each filter's rows, averages, L2-normalizes, and
    /// sums into the final descriptor; with zero filters the descriptor is
    /// the normalized mean of the general rows alone.
    fn descriptor_from_rows(
        &self,
        tape: &mut Tape,
        general: Tid,
        filtered: &[Tid],
    ) -> Result<Tid> {
        if filtered.is_empty() {
            let m = tape.mean_rows(general);
            return Ok(tape.l2_normalize_rows(m, NORM_EPS));
        }
        let mut units = Vec::with_capacity(filtered.len());
        for &rows in filtered {
            let combined = tape.concat_rows(general, rows)?;
            let m = tape.mean_rows(combined);
            units.push(tape.l2_normalize_rows(m, NORM_EPS));
        }
        tape.add_n(&units)
    }

    /// Full branch pass over a frame batch [n,5,56,48].
    pub fn build_branch(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        frames: &FeatureMap,
        phase: Phase,
        rng: &mut RngStream,
    ) -> Result<BranchGraph> {
        if frames.n == 0 {
            return Err(Error::invalid("branch_descriptor", "empty frame batch"));
        }
        let x = tape.leaf(frames.clone());
        let (xf, general, filtered) = self.build_rows(tape, tp, x, phase, rng)?;
        let descriptor = self.descriptor_from_rows(tape, general, &filtered)?;
        let logits = tape.linear(descriptor, tp.classifier_w, tp.classifier_b)?;
        Ok(BranchGraph { features: xf, general_rows: general, filtered_rows: filtered, descriptor, logits })
    }

    /// Deterministic descriptor of a prepared sequence, frames processed one
    /// at a time so the result is identical for any frame order (rows are
    /// per-frame, and the averaging sums row values in sorted order).
    pub fn eval_descriptor(&self, seq: &SequenceSample) -> Result<Vec<f64>> {
        let parts = self.eval_descriptor_parts(seq)?;
        let mut desc = vec![0.0; DESC_DIM];
        for part in &parts {
            for (d, v) in desc.iter_mut().zip(part) {
                *d += v;
            }
        }
        Ok(desc)
    }

    /// The unit vectors the descriptor sums: one per filter, or the single
    /// normalized general vector when no filters are configured.
    pub fn eval_descriptor_parts(&self, seq: &SequenceSample) -> Result<Vec<Vec<f64>>> {
        if seq.is_empty() {
            return Err(Error::invalid("branch_descriptor", "empty sequence"));
        }
        let n = seq.len();
        let mut rng = RngStream::new(0);
        let mut g_rows = vec![0.0; n * DESC_DIM];
        let mut f_rows = vec![vec![0.0; n * DESC_DIM]; self.config.filters];
        for (t, frame) in seq.frames.iter().enumerate() {
            let mut tape = Tape::new();
            let tp = self.tape_params(&mut tape);
            let x = tape.leaf(frame.channels.clone());
            let (_, g, fs) = self.build_rows(&mut tape, &tp, x, Phase::Eval, &mut rng)?;
            g_rows[t * DESC_DIM..(t + 1) * DESC_DIM].copy_from_slice(&tape.value(g).data);
            for (k, f) in fs.iter().enumerate() {
                f_rows[k][t * DESC_DIM..(t + 1) * DESC_DIM].copy_from_slice(&tape.value(*f).data);
            }
        }
        Ok(combine_parts(&g_rows, &f_rows, n))
    }

    /// Human-readable manifest: configuration plus every parameter shape.
    pub fn manifest(&self) -> String {
        let mut s = String::from("stam-reid manifest v1\n");
        let _ = writeln!(s, "filters {}", self.config.filters);
        let _ = writeln!(s, "refine_steps {}", self.config.refine_steps);
        let _ = writeln!(s, "identities {}", self.config.identities);
        let _ = writeln!(s, "dropout {}", self.config.dropout);
        for (_, p) in self.params.iter() {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "param {} {}", p.name, dims.join("x"));
        }
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest())?;
        Ok(())
    }

    /// Errors unless `text` is exactly this model's manifest.
    pub fn check_manifest(&self, text: &str) -> Result<()> {
        let own = self.manifest();
        if own == text {
            return Ok(());
        }
        for (line_no, (a, b)) in own.lines().zip(text.lines()).enumerate() {
            if a != b {
                return Err(Error::Checkpoint(format!(
                    "manifest line {} mismatch: model has {a:?}, file has {b:?}",
                    line_no + 1
                )));
            }
        }
        Err(Error::Checkpoint("manifest length differs from model".into()))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.params.save_checkpoint(path)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.params.load_checkpoint(path)
    }
}

/// Host-side descriptor assembly from collected per-frame rows; exactly the
/// arithmetic of the on-tape path (sorted-order column sums, L2 normalize,
/// sum over filters).
fn combine_parts(g_rows: &[f64], f_rows: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    use crate::autograd::ops::{l2_normalize_rows_forward, mean_rows_forward};
    if f_rows.is_empty() {
        let m = mean_rows_forward(&FeatureMap::matrix(n, DESC_DIM, g_rows.to_vec()).unwrap());
        return vec![l2_normalize_rows_forward(&m, NORM_EPS).data];
    }
    let mut parts = Vec::with_capacity(f_rows.len());
    for rows in f_rows {
        let mut data = Vec::with_capacity(2 * n * DESC_DIM);
        data.extend_from_slice(g_rows);
        data.extend_from_slice(rows);
        let m = mean_rows_forward(&FeatureMap::matrix(2 * n, DESC_DIM, data).unwrap());
        parts.push(l2_normalize_rows_forward(&m, NORM_EPS).data);
    }
    parts
}

/// Stacks a prepared 56x48 sequence into the [n,5,56,48] batch the branch
/// consumes.
pub fn sequence_input(seq: &SequenceSample) -> Result<FeatureMap> {
    if seq.is_empty() {
        return Err(Error::invalid("sequence_input", "empty sequence"));
    }
    let n = seq.len();
    let mut out = FeatureMap::zeros(n, 5, NET_H, NET_W);
    let stride = 5 * NET_H * NET_W;
    for (t, f) in seq.frames.iter().enumerate() {
        let ch = &f.channels;
        if ch.c != 5 || ch.h != NET_H || ch.w != NET_W {
            return Err(Error::shape(
                "sequence_input",
                format!("frame {t} is {:?}, expected [1,5,{NET_H},{NET_W}]", ch.shape()),
            ));
        }
        out.data[t * stride..(t + 1) * stride].copy_from_slice(&ch.data);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, GradCheckConfig};

    fn small_config() -> ModelConfig {
        ModelConfig { filters: 2, refine_steps: 2, identities: 4, dropout: 0.0 }
    }

    fn random_frames(n: usize, seed: u64) -> FeatureMap {
        let mut rng = RngStream::new(seed);
        FeatureMap::uniform(n, 5, NET_H, NET_W, 1.0, &mut rng)
    }

    fn zero_params_matching(model: &mut Model, fragment: &str) {
        let ids: Vec<ParamId> = model
            .params
            .iter()
            .filter(|(_, p)| p.name.contains(fragment))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            model.params.values_mut(id).fill(0.0);
        }
    }

    #[test]
    fn frontend_shape_and_input_validation() {
        let model = Model::new(small_config(), 1).unwrap();
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let x = tape.leaf(random_frames(16, 2));
        let out = model.conv_frontend(&mut tape, &tp, x).unwrap();
        assert_eq!(tape.value(out).shape(), (16, 32, 10, 8));

        let bad = tape.leaf(FeatureMap::zeros(1, 5, 48, 56));
        assert!(model.conv_frontend(&mut tape, &tp, bad).is_err());
        let bad_c = tape.leaf(FeatureMap::zeros(1, 3, NET_H, NET_W));
        assert!(model.conv_frontend(&mut tape, &tp, bad_c).is_err());
    }

    #[test]
    fn zero_input_flows_to_zero_features() {
        let model = Model::new(small_config(), 3).unwrap();
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let x = tape.leaf(FeatureMap::zeros(2, 5, NET_H, NET_W));
        let out = model.conv_frontend(&mut tape, &tp, x).unwrap();
        assert!(tape.value(out).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_attention_weights_give_uniform_map() {
        let mut model = Model::new(small_config(), 4).unwrap();
        zero_params_matching(&mut model, "filter1.attend");
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let x = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut RngStream::new(5)));
        let h0 = tape.leaf(FeatureMap::zeros(1, 32, 10, 8));
        let (score, map) = model.attention_scores(&mut tape, &tp, 0, x, h0).unwrap();
        assert!(tape.value(score).data.iter().all(|v| *v == 0.0));
        for v in &tape.value(map).data {
            assert!((v - 1.0 / 80.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_map_is_a_distribution_for_random_parameters() {
        let mut model = Model::new(small_config(), 6).unwrap();
        let mut rng = RngStream::new(60);
        for draw in 0..100 {
            let ids: Vec<ParamId> = model
                .params
                .iter()
                .filter(|(_, p)| p.name.starts_with("filter1.attend"))
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                for v in model.params.values_mut(id) {
                    *v = rng.uniform_in(-1.0, 1.0);
                }
            }
            let mut tape = Tape::new();
            let tp = model.tape_params(&mut tape);
            let x = tape.leaf(FeatureMap::uniform(2, 32, 10, 8, 1.0, &mut rng));
            let h = tape.leaf(FeatureMap::uniform(2, 32, 10, 8, 0.5, &mut rng));
            let (_, map) = model.attention_scores(&mut tape, &tp, 0, x, h).unwrap();
            let m = tape.value(map);
            for item in 0..2 {
                let s: f64 = m.data[item * 80..(item + 1) * 80].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "draw {draw}: sum {s}");
            }
            assert!(m.data.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn uniform_and_one_hot_attention_application() {
        let model = Model::new(small_config(), 7).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut RngStream::new(8)));
        let uniform = tape.leaf(FeatureMap::zeros(1, 1, 10, 8).filled_like(1.0 / 80.0));
        let scaled = model.apply_attention(&mut tape, x, uniform).unwrap();
        for (a, b) in tape.value(scaled).data.iter().zip(&tape.value(x).data) {
            assert!((a - b / 80.0).abs() < 1e-15);
        }

        let mut hot = FeatureMap::zeros(1, 1, 10, 8);
        hot.data[23] = 1.0;
        let hot = tape.leaf(hot);
        let picked = model.apply_attention(&mut tape, x, hot).unwrap();
        let pv = tape.value(picked);
        for c in 0..32 {
            for cell in 0..80 {
                let v = pv.data[c * 80 + cell];
                if cell == 23 {
                    assert_eq!(v, tape.value(x).data[c * 80 + 23]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_weight_gates_are_half_open() {
        let mut model = Model::new(small_config(), 9).unwrap();
        zero_params_matching(&mut model, "filter1.gates");
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let mut rng = RngStream::new(10);
        let xp = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut rng));
        let h = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut rng));
        let c = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut rng));
        let g = tp.filters[0].gates.unwrap();
        let (h_new, c_new) = model.convlstm_step(&mut tape, xp, h, c, g.x_w, g.x_b, g.h_w).unwrap();
        let (xv, cv) = (tape.value(xp).clone(), tape.value(c).clone());
        for i in 0..xv.len() {
            let expect_c = 0.5 * xv.data[i] + 0.5 * cv.data[i];
            assert!((tape.value(c_new).data[i] - expect_c).abs() < 1e-12);
            let expect_h = 0.5 * expect_c.tanh();
            assert!((tape.value(h_new).data[i] - expect_h).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_and_cell_give_zero_hidden() {
        let model = Model::new(small_config(), 11).unwrap();
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let xp = tape.leaf(FeatureMap::zeros(1, 32, 10, 8));
        let h = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut RngStream::new(12)));
        let c = tape.leaf(FeatureMap::zeros(1, 32, 10, 8));
        let g = tp.filters[0].gates.unwrap();
        let (h_new, _) = model.convlstm_step(&mut tape, xp, h, c, g.x_w, g.x_b, g.h_w).unwrap();
        assert!(tape.value(h_new).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_convlstm_matches_closed_form() {
        // 1x1x1x1 maps: only the kernel center survives the padding, so every
        // gate reduces to sigma(wx*x + wh*h + b) with scalar taps.
        let model = Model::new(ModelConfig { filters: 1, ..small_config() }, 13).unwrap();
        let mut tape = Tape::new();
        let center = |w: f64| {
            let mut k = FeatureMap::zeros(3, 1, 3, 3);
            for g in 0..3 {
                k.data[g * 9 + 4] = w * (g as f64 + 1.0);
            }
            k
        };
        let gate_x_w = tape.leaf(center(0.3));
        let gate_h_w = tape.leaf(center(-0.2));
        let gate_x_b = tape.leaf(FeatureMap::from_vec(1, 3, 1, 1, vec![0.05, -0.1, 0.15]).unwrap());
        let (x, h0, c0) = (0.7, -0.4, 0.25);
        let xp = tape.leaf(FeatureMap::from_vec(1, 1, 1, 1, vec![x]).unwrap());
        let h = tape.leaf(FeatureMap::from_vec(1, 1, 1, 1, vec![h0]).unwrap());
        let c = tape.leaf(FeatureMap::from_vec(1, 1, 1, 1, vec![c0]).unwrap());
        let (h_new, c_new) = model
            .convlstm_step(&mut tape, xp, h, c, gate_x_w, gate_x_b, gate_h_w)
            .unwrap();

        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sigma(0.3 * x - 0.2 * h0 + 0.05);
        let f = sigma(0.6 * x - 0.4 * h0 - 0.1);
        let o = sigma(0.9 * x - 0.6 * h0 + 0.15);
        let c_expect = i * x + f * c0;
        let h_expect = o * c_expect.tanh();
        assert!((tape.value(c_new).item() - c_expect).abs() < 1e-12);
        assert!((tape.value(h_new).item() - h_expect).abs() < 1e-12);
    }

    #[test]
    fn single_step_refinement_is_one_attention_pass() {
        let model = Model::new(ModelConfig { refine_steps: 1, ..small_config() }, 14).unwrap();
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let x = tape.leaf(FeatureMap::uniform(3, 32, 10, 8, 1.0, &mut RngStream::new(15)));
        let refined = model.refine_filter(&mut tape, &tp, 0, x).unwrap();
        let h0 = tape.leaf(FeatureMap::zeros(3, 32, 10, 8));
        let (score, _) = model.attention_scores(&mut tape, &tp, 0, x, h0).unwrap();
        assert_eq!(tape.value(refined).data, tape.value(score).data);
    }

    #[test]
    fn refinement_output_shape_for_various_depths() {
        for steps in [1, 2, 5, 10] {
            let model = Model::new(ModelConfig { refine_steps: steps, ..small_config() }, 16).unwrap();
            let mut tape = Tape::new();
            let tp = model.tape_params(&mut tape);
            let x = tape.leaf(FeatureMap::uniform(2, 32, 10, 8, 1.0, &mut RngStream::new(17)));
            let refined = model.refine_filter(&mut tape, &tp, 1, x).unwrap();
            assert_eq!(tape.value(refined).shape(), (2, 1, 10, 8));
        }
    }

    #[test]
    fn zero_score_filter_halves_features() {
        let model = Model::new(small_config(), 18).unwrap();
        let mut tape = Tape::new();
        let xf = tape.leaf(FeatureMap::uniform(2, 32, 10, 8, 1.0, &mut RngStream::new(19)));
        let score = tape.leaf(FeatureMap::zeros(2, 1, 10, 8));
        let block = model.filter_block(&mut tape, xf, score).unwrap();
        for (b, x) in tape.value(block).data.iter().zip(&tape.value(xf).data) {
            assert!((b - x / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_score_passes_features_through() {
        let model = Model::new(small_config(), 20).unwrap();
        let mut tape = Tape::new();
        let xf = tape.leaf(FeatureMap::uniform(1, 32, 10, 8, 1.0, &mut RngStream::new(21)));
        let mut s = FeatureMap::zeros(1, 1, 10, 8);
        s.data[40] = 1000.0;
        let score = tape.leaf(s);
        let block = model.filter_block(&mut tape, xf, score).unwrap();
        for c in 0..32 {
            let got = tape.value(block).data[c * 80 + 40];
            let want = tape.value(xf).data[c * 80 + 40];
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn descriptor_shape_norm_and_gate_range() {
        let model = Model::new(ModelConfig { filters: 3, ..small_config() }, 22).unwrap();
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let frames = random_frames(4, 23);
        let mut rng = RngStream::new(24);
        let g = model
            .build_branch(&mut tape, &tp, &frames, Phase::Eval, &mut rng)
            .unwrap();
        let d = tape.value(g.descriptor);
        assert_eq!(d.shape(), (1, DESC_DIM, 1, 1));
        let norm: f64 = d.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 3.0 + 1e-12);
        assert!(d.data.iter().all(|v| v.is_finite()));
        assert_eq!(tape.value(g.logits).len(), 4);
        assert_eq!(g.filtered_rows.len(), 3);
        for &rows in &g.filtered_rows {
            assert_eq!(tape.value(rows).shape(), (4, DESC_DIM, 1, 1));
        }
    }

    #[test]
    fn single_frame_branch_works() {
        let model = Model::new(small_config(), 25).unwrap();
        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let frames = random_frames(1, 26);
        let mut rng = RngStream::new(27);
        let g = model
            .build_branch(&mut tape, &tp, &frames, Phase::Eval, &mut rng)
            .unwrap();
        assert_eq!(tape.value(g.general_rows).shape(), (1, DESC_DIM, 1, 1));
        assert!(tape.value(g.descriptor).data.iter().all(|v| v.is_finite()));

        let empty = FeatureMap { n: 0, c: 5, h: NET_H, w: NET_W, data: vec![] };
        assert!(model.build_branch(&mut tape, &tp, &empty, Phase::Eval, &mut rng).is_err());
    }

    fn sequence_of(frames: FeatureMap) -> SequenceSample {
        let n = frames.n;
        let stride = 5 * NET_H * NET_W;
        let frames = (0..n)
            .map(|t| crate::preprocess::PreparedFrame {
                channels: FeatureMap::from_vec(
                    1,
                    5,
                    NET_H,
                    NET_W,
                    frames.data[t * stride..(t + 1) * stride].to_vec(),
                )
                .unwrap(),
            })
            .collect();
        SequenceSample { frames, person_id: 0, camera_id: 1 }
    }

    #[test]
    fn eval_descriptor_is_frame_order_invariant_bitwise() {
        let model = Model::new(small_config(), 28).unwrap();
        let batch = random_frames(5, 29);
        let seq = sequence_of(batch);
        let base = model.eval_descriptor(&seq).unwrap();

        let mut shuffled = seq.clone();
        shuffled.frames.rotate_left(2);
        shuffled.frames.swap(0, 3);
        let permuted = model.eval_descriptor(&shuffled).unwrap();
        let a: Vec<u64> = base.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = permuted.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_descriptor_matches_batched_branch() {
        let model = Model::new(small_config(), 30).unwrap();
        let batch = random_frames(3, 31);
        let seq = sequence_of(batch.clone());
        let streamed = model.eval_descriptor(&seq).unwrap();

        let mut tape = Tape::new();
        let tp = model.tape_params(&mut tape);
        let mut rng = RngStream::new(0);
        let g = model
            .build_branch(&mut tape, &tp, &batch, Phase::Eval, &mut rng)
            .unwrap();
        let batched = &tape.value(g.descriptor).data;
        for (a, b) in streamed.iter().zip(batched) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_filter_model_normalizes_general_mean() {
        let model = Model::new(ModelConfig { filters: 0, ..small_config() }, 32).unwrap();
        let seq = sequence_of(random_frames(3, 33));
        let d = model.eval_descriptor(&seq).unwrap();
        let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let config = ModelConfig { filters: 1, refine_steps: 2, identities: 3, dropout: 0.0 };
        let mut model = Model::new(config.clone(), 34).unwrap();
        let frames = random_frames(2, 35);
        let label = 1;

        let run = |m: &Model| -> Result<(Tape, Tid)> {
            let mut tape = Tape::new();
            let tp = m.tape_params(&mut tape);
            let mut rng = RngStream::new(0);
            let g = m.build_branch(&mut tape, &tp, &frames, Phase::Eval, &mut rng)?;
            let sq = tape.square(g.descriptor);
            let dsum = tape.sum_all(sq);
            let ce = tape.softmax_cross_entropy(g.logits, label)?;
            let loss = tape.add(dsum, ce)?;
            Ok((tape, loss))
        };

        let (tape, loss) = run(&model).unwrap();
        let grads = tape.backward(&[(loss, FeatureMap::scalar(1.0))]).unwrap();
        tape.harvest_param_grads(&grads, &mut model.params);

        let mut forward = |ps: &ParamSet| -> Result<f64> {
            let mut probe = Model::new(config.clone(), 34)?;
            for (_, p) in ps.iter() {
                let id = probe.params.id_by_name(&p.name).unwrap();
                probe.params.values_mut(id).copy_from_slice(&p.values);
            }
            let (t, l) = run(&probe)?;
            Ok(t.value(l).item())
        };
        let cfg = GradCheckConfig { samples_per_param: 3, ..Default::default() };
        let report = grad_check(&mut model.params, &mut forward, &cfg).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn manifest_round_trip_and_mismatch() {
        let model = Model::new(small_config(), 36).unwrap();
        let text = model.manifest();
        model.check_manifest(&text).unwrap();

        let other = Model::new(ModelConfig { filters: 3, ..small_config() }, 36).unwrap();
        assert!(other.check_manifest(&text).is_err());

        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(model.check_manifest(&truncated).is_err());
    }

    #[test]
    fn sequence_input_stacks_frames() {
        let batch = random_frames(3, 37);
        let seq = sequence_of(batch.clone());
        let stacked = sequence_input(&seq).unwrap();
        assert_eq!(stacked.data, batch.data);
    }
}
