//! Raw RGB video to network-ready 5-channel sequences.
//!
//! Pipeline per sequence: RGB -> YUV (BT.601) -> per-channel standardization
//! (stats fitted on the training split) -> dense Lucas-Kanade flow between
//! consecutive standardized luma frames -> clamp and scale flow to [-1,1] ->
//! stack Y,U,V,flow-u,flow-v. Augmentation crops a 56x48 window out of the
//! stored 64x56 frames and optionally mirrors, with one draw per sequence so
//! every frame moves together.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::FeatureMap;

/// Network input height and width.
pub const NET_H: usize = 56;
pub const NET_W: usize = 48;
/// Stored frame size before crop augmentation.
pub const SRC_H: usize = 64;
pub const SRC_W: usize = 56;
/// Flow clamp in pixels; normalized flow is flow/FLOW_CLAMP.
pub const FLOW_CLAMP: f64 = 8.0;
/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
/// Side length of the Lucas-Kanade least-squares window.
pub const LK_WINDOW: usize = 5;
/// Structure-tensor determinants below this emit zero flow.
pub const LK_DET_EPS: f64 = 1e-9;

/// Decoded RGB frame with planar channels (R plane, G plane, B plane), each
/// row-major, values in [0,1].
#[derive(Debug, Clone)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl RawFrame {
    pub fn new(width: usize, height: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::shape(
                "raw_frame",
                format!("{}x{} frame needs {} values, got {}", width, height, 3 * width * height, rgb.len()),
            ));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("raw_frame", "rgb values outside [0,1]"));
        }
        Ok(RawFrame { width, height, rgb })
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.rgb[c * self.width * self.height..(c + 1) * self.width * self.height]
    }
}

/// Per-YUV-channel standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// One network-ready frame: channels Y,U,V (standardized), flow-u, flow-v
/// (normalized to [-1,1]).
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub channels: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub frames: Vec<PreparedFrame>,
    pub person_id: usize,
    pub camera_id: u8,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// BT.601: Y = 0.299R + 0.587G + 0.114B, U = 0.492(B-Y), V = 0.877(R-Y).
pub fn rgb_to_yuv(frame: &RawFrame) -> FeatureMap {
    let (w, h) = (frame.width, frame.height);
    let (r, g, b) = (frame.plane(0), frame.plane(1), frame.plane(2));
    let mut out = FeatureMap::zeros(1, 3, h, w);
    let hw = h * w;
    for i in 0..hw {
        let y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        out.data[i] = y;
        out.data[hw + i] = 0.492 * (b[i] - y);
        out.data[2 * hw + i] = 0.877 * (r[i] - y);
    }
    out
}

/// Fits per-channel mean and (population) standard deviation over every pixel
/// of every supplied YUV map. Standard deviations are floored at `STD_FLOOR`.
pub fn fit_channel_stats(frames: &[FeatureMap]) -> Result<ChannelStats> {
    if frames.is_empty() {
        return Err(Error::invalid("fit_channel_stats", "empty fitting set"));
    }
    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for f in frames {
        debug_assert_eq!(f.c, 3);
        let hw = f.h * f.w;
        count += hw;
        for c in 0..3 {
            mean[c] += f.data[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = [0.0f64; 3];
    for f in frames {
        let hw = f.h * f.w;
        for c in 0..3 {
            var[c] += f.data[c * hw..(c + 1) * hw]
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
    }
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        std[c] = (var[c] / count as f64).sqrt().max(STD_FLOOR);
    }
    Ok(ChannelStats { mean, std })
}

/// (x - mean) / std per channel.
pub fn standardize(yuv: &FeatureMap, stats: &ChannelStats) -> FeatureMap {
    let mut out = yuv.clone();
    let hw = out.h * out.w;
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut out.data[c * hw..(c + 1) * hw] {
            *v = (*v - m) / s;
        }
    }
    out
}

fn clamped_at(map: &FeatureMap, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, map.h as isize - 1) as usize;
    let xx = x.clamp(0, map.w as isize - 1) as usize;
    map.data[yy * map.w + xx]
}

/// Dense Lucas-Kanade flow from `prev` to `next` (both single-channel luma
/// maps). Per pixel, the translation (u,v) minimizing
/// sum_window (Ix*u + Iy*v + It)^2 is solved from the 2x2 normal equations;
/// windows whose structure tensor is near-singular produce (0,0).
pub fn lucas_kanade(
    prev: &FeatureMap,
    next: &FeatureMap,
    window: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    if !prev.same_shape(next) {
        return Err(Error::shape(
            "lucas_kanade",
            format!("{:?} vs {:?}", prev.shape(), next.shape()),
        ));
    }
    if window % 2 == 0 || window == 0 {
        return Err(Error::invalid("lucas_kanade", format!("window {window} must be odd")));
    }
    let (h, w) = (prev.h, prev.w);
    let r = (window / 2) as isize;

    // Spatial gradients of the earlier frame (central differences, edges
    // replicated), temporal difference next - prev.
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut it = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            ix[y * w + x] = (clamped_at(prev, yi, xi + 1) - clamped_at(prev, yi, xi - 1)) / 2.0;
            iy[y * w + x] = (clamped_at(prev, yi + 1, xi) - clamped_at(prev, yi - 1, xi)) / 2.0;
            it[y * w + x] = next.data[y * w + x] - prev.data[y * w + x];
        }
    }

    let mut u = FeatureMap::zeros(1, 1, h, w);
    let mut v = FeatureMap::zeros(1, 1, h, w);
    for y in 0..h {
        for x in 0..w {
            let (mut a, mut b, mut c, mut d, mut e) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let (gx, gy, gt) = (ix[yy * w + xx], iy[yy * w + xx], it[yy * w + xx]);
                    a += gx * gx;
                    b += gx * gy;
                    c += gy * gy;
                    d += gx * gt;
                    e += gy * gt;
                }
            }
            let det = a * c - b * b;
            if det.abs() < LK_DET_EPS {
                continue;
            }
            u.data[y * w + x] = (b * e - c * d) / det;
            v.data[y * w + x] = (b * d - a * e) / det;
        }
    }
    Ok((u, v))
}

/// Clamp to +-FLOW_CLAMP pixels, then scale into [-1,1].
pub fn normalize_flow(flow: &mut FeatureMap) {
    for v in &mut flow.data {
        *v = v.clamp(-FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP;
    }
}

/// Builds the 5-channel sequence: standardized YUV plus normalized flow, with
/// frame t's flow computed from standardized luma t-1 -> t and frame 0's flow
/// zero.
pub fn build_sequence(
    raw_frames: &[RawFrame],
    stats: &ChannelStats,
    person_id: usize,
    camera_id: u8,
) -> Result<SequenceSample> {
    if raw_frames.is_empty() {
        return Err(Error::invalid("build_sequence", "empty frame list"));
    }
    let (w, h) = (raw_frames[0].width, raw_frames[0].height);
    for f in raw_frames {
        if f.width != w || f.height != h {
            return Err(Error::shape(
                "build_sequence",
                format!("mixed frame sizes {}x{} and {}x{}", w, h, f.width, f.height),
            ));
        }
    }
    let standardized: Vec<FeatureMap> =
        raw_frames.iter().map(|f| standardize(&rgb_to_yuv(f), stats)).collect();
    let hw = h * w;
    let luma: Vec<FeatureMap> = standardized
        .iter()
        .map(|s| FeatureMap::from_vec(1, 1, h, w, s.data[..hw].to_vec()).unwrap())
        .collect();

    let mut frames = Vec::with_capacity(raw_frames.len());
    for t in 0..raw_frames.len() {
        let mut channels = FeatureMap::zeros(1, 5, h, w);
        channels.data[..3 * hw].copy_from_slice(&standardized[t].data);
        if t > 0 {
            let (mut u, mut v) = lucas_kanade(&luma[t - 1], &luma[t], LK_WINDOW)?;
            normalize_flow(&mut u);
            normalize_flow(&mut v);
            channels.data[3 * hw..4 * hw].copy_from_slice(&u.data);
            channels.data[4 * hw..5 * hw].copy_from_slice(&v.data);
        }
        frames.push(PreparedFrame { channels });
    }
    Ok(SequenceSample { frames, person_id, camera_id })
}

/// Applies one crop-plus-optional-mirror to every frame. Mirroring reverses
/// each row of every channel and negates the horizontal flow channel, since
/// left-right reflection reverses horizontal motion.
pub fn apply_crop_mirror(seq: &SequenceSample, dy: usize, dx: usize, mirror: bool) -> Result<SequenceSample> {
    let mut frames = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        let src = &f.channels;
        let (h, w) = (src.h, src.w);
        if dy + NET_H > h || dx + NET_W > w {
            return Err(Error::shape(
                "augment",
                format!("crop ({dy},{dx}) exceeds {h}x{w} frame"),
            ));
        }
        let mut out = FeatureMap::zeros(1, 5, NET_H, NET_W);
        for c in 0..5 {
            let sign = if mirror && c == 3 { -1.0 } else { 1.0 };
            for y in 0..NET_H {
                let src_row = (c * h + dy + y) * w + dx;
                let dst_row = (c * NET_H + y) * NET_W;
                for x in 0..NET_W {
                    let sx = if mirror { NET_W - 1 - x } else { x };
                    out.data[dst_row + x] = sign * src.data[src_row + sx];
                }
            }
        }
        frames.push(PreparedFrame { channels: out });
    }
    Ok(SequenceSample { frames, person_id: seq.person_id, camera_id: seq.camera_id })
}

/// Draws one crop offset and one mirror decision (order: dy, dx, mirror) and
/// applies them to the whole sequence.
pub fn augment(seq: &SequenceSample, rng: &mut RngStream) -> Result<SequenceSample> {
    let (h, w) = (seq.frames[0].channels.h, seq.frames[0].channels.w);
    if h < NET_H || w < NET_W {
        return Err(Error::shape("augment", format!("frames {h}x{w} smaller than {NET_H}x{NET_W}")));
    }
    let dy = rng.below((h - NET_H + 1) as u64) as usize;
    let dx = rng.below((w - NET_W + 1) as u64) as usize;
    let mirror = rng.bernoulli(0.5);
    apply_crop_mirror(seq, dy, dx, mirror)
}

/// Deterministic augmentation counterpart for evaluation: the centered crop,
/// no mirror.
pub fn center_crop(seq: &SequenceSample) -> Result<SequenceSample> {
    let (h, w) = (seq.frames[0].channels.h, seq.frames[0].channels.w);
    if h < NET_H || w < NET_W {
        return Err(Error::shape("center_crop", format!("frames {h}x{w} smaller than {NET_H}x{NET_W}")));
    }
    apply_crop_mirror(seq, (h - NET_H) / 2, (w - NET_W) / 2, false)
}

fn zero_leading_flow(frames: &mut [PreparedFrame]) {
    if let Some(first) = frames.first_mut() {
        let hw = first.channels.h * first.channels.w;
        first.channels.data[3 * hw..5 * hw].fill(0.0);
    }
}

/// A uniformly random run of `length` consecutive frames (the whole sequence
/// if it is shorter). The returned first frame's flow is zeroed so every
/// sample starts from the same no-history state.
pub fn sample_subsequence(seq: &SequenceSample, length: usize, rng: &mut RngStream) -> SequenceSample {
    let n = seq.frames.len();
    let mut frames = if length == 0 || n <= length {
        seq.frames.clone()
    } else {
        let start = rng.below((n - length + 1) as u64) as usize;
        seq.frames[start..start + length].to_vec()
    };
    zero_leading_flow(&mut frames);
    SequenceSample { frames, person_id: seq.person_id, camera_id: seq.camera_id }
}

/// First `length` consecutive frames (all frames if shorter), flow zeroed on
/// the leading frame. Deterministic counterpart of `sample_subsequence` for
/// evaluation.
pub fn leading_subsequence(seq: &SequenceSample, length: usize) -> SequenceSample {
    let n = seq.frames.len();
    let take = if length == 0 { n } else { n.min(length) };
    let mut frames = seq.frames[..take].to_vec();
    zero_leading_flow(&mut frames);
    SequenceSample { frames, person_id: seq.person_id, camera_id: seq.camera_id }
}

/// The last `length` frames (all of them when the sequence is shorter or
/// `length` is 0), with the flow of the new leading frame zeroed.
pub fn trailing_subsequence(seq: &SequenceSample, length: usize) -> SequenceSample {
    let n = seq.frames.len();
    let take = if length == 0 { n } else { n.min(length) };
    let mut frames = seq.frames[n - take..].to_vec();
    zero_leading_flow(&mut frames);
    SequenceSample { frames, person_id: seq.person_id, camera_id: seq.camera_id }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_frame(w: usize, h: usize, r: f64, g: f64, b: f64) -> RawFrame {
        let mut rgb = vec![r; w * h];
        rgb.extend(vec![g; w * h]);
        rgb.extend(vec![b; w * h]);
        RawFrame::new(w, h, rgb).unwrap()
    }

    /// Quadratic surface: smooth, curved enough that every 5x5 window has a
    /// well-conditioned structure tensor, and analytic so subpixel shifts are
    /// exact.
    fn quadratic_luma(h: usize, w: usize, shift_x: f64) -> FeatureMap {
        let (a, b, g) = (0.002, 0.003, 0.001);
        let (cx, cy) = (-11.0, -7.0);
        let mut m = FeatureMap::zeros(1, 1, h, w);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 - shift_x - cx, y as f64 - cy);
                m.data[y * w + x] = a * fx * fx + b * fy * fy + g * fx * fy;
            }
        }
        m
    }

    #[test]
    fn yuv_reference_colors() {
        let black = rgb_to_yuv(&constant_frame(2, 2, 0.0, 0.0, 0.0));
        assert!(black.data.iter().all(|v| *v == 0.0));

        let white = rgb_to_yuv(&constant_frame(2, 2, 1.0, 1.0, 1.0));
        assert!((white.data[0] - 1.0).abs() < 1e-12);
        assert!(white.data[4].abs() < 1e-12 && white.data[8].abs() < 1e-12);

        let red = rgb_to_yuv(&constant_frame(1, 1, 1.0, 0.0, 0.0));
        assert!((red.data[0] - 0.299).abs() < 1e-12);
        assert!((red.data[1] - 0.492 * (-0.299)).abs() < 1e-12);
        assert!((red.data[2] - 0.877 * 0.701).abs() < 1e-12);
    }

    #[test]
    fn raw_frame_validation() {
        assert!(RawFrame::new(2, 2, vec![0.5; 12]).is_ok());
        assert!(RawFrame::new(2, 2, vec![0.5; 11]).is_err());
        assert!(RawFrame::new(1, 1, vec![0.5, 0.5, 1.5]).is_err());
    }

    #[test]
    fn stats_mean_of_two_frames() {
        let a = rgb_to_yuv(&constant_frame(4, 4, 0.0, 0.0, 0.0));
        let mut b = a.clone();
        b.data[..16].fill(2.0); // luma plane only
        let stats = fit_channel_stats(&[a, b]).unwrap();
        assert!((stats.mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_floors_std_and_standardizes_to_zero() {
        let frames = vec![rgb_to_yuv(&constant_frame(4, 4, 0.3, 0.3, 0.3))];
        let stats = fit_channel_stats(&frames).unwrap();
        for c in 0..3 {
            assert_eq!(stats.std[c], STD_FLOOR);
        }
        // Mean accumulation rounds at the ulp scale; the floored std divides
        // that by 1e-6, so "zero" here means zero at the stats tolerance.
        let z = standardize(&frames[0], &stats);
        assert!(z.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn fitting_set_standardizes_to_zero_mean_unit_variance() {
        let mut rng = RngStream::new(21);
        let frames: Vec<FeatureMap> = (0..6)
            .map(|_| {
                let rgb: Vec<f64> = (0..3 * 8 * 7).map(|_| rng.uniform()).collect();
                rgb_to_yuv(&RawFrame::new(7, 8, rgb).unwrap())
            })
            .collect();
        let stats = fit_channel_stats(&frames).unwrap();
        let standardized: Vec<FeatureMap> = frames.iter().map(|f| standardize(f, &stats)).collect();
        let hw = 8 * 7;
        for c in 0..3 {
            let vals: Vec<f64> = standardized
                .iter()
                .flat_map(|f| f.data[c * hw..(c + 1) * hw].iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "channel {c} var {var}");
        }
    }

    #[test]
    fn standardize_round_trips() {
        let frame = {
            let mut rng = RngStream::new(22);
            let rgb: Vec<f64> = (0..3 * 25).map(|_| rng.uniform()).collect();
            rgb_to_yuv(&RawFrame::new(5, 5, rgb).unwrap())
        };
        let stats = ChannelStats { mean: [0.3, -0.1, 0.05], std: [0.7, 0.2, 0.4] };
        let z = standardize(&frame, &stats);
        let hw = 25;
        for c in 0..3 {
            for i in 0..hw {
                let back = z.data[c * hw + i] * stats.std[c] + stats.mean[c];
                assert!((back - frame.data[c * hw + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_fitting_set_rejected() {
        assert!(fit_channel_stats(&[]).is_err());
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = quadratic_luma(20, 24, 0.0);
        let (u, v) = lucas_kanade(&f, &f, LK_WINDOW).unwrap();
        assert!(u.data.iter().all(|x| *x == 0.0));
        assert!(v.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn constant_region_hits_determinant_guard() {
        let a = FeatureMap::filled_like(&FeatureMap::zeros(1, 1, 12, 12), 0.4);
        let mut b = a.clone();
        b.data[0] += 0.1; // single corner disturbance
        let (u, v) = lucas_kanade(&a, &b, LK_WINDOW).unwrap();
        // Center pixels are far from the disturbance: fully constant windows.
        assert_eq!(u.at(0, 0, 6, 6), 0.0);
        assert_eq!(v.at(0, 0, 6, 6), 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = FeatureMap::zeros(1, 1, 4, 4);
        let b = FeatureMap::zeros(1, 1, 4, 5);
        assert!(lucas_kanade(&a, &b, LK_WINDOW).is_err());
        assert!(lucas_kanade(&a, &a, 4).is_err());
    }

    #[test]
    fn one_pixel_translation_recovered() {
        let (h, w) = (24, 28);
        let prev = quadratic_luma(h, w, 0.0);
        let next = quadratic_luma(h, w, 1.0); // pattern moved right by 1
        let (u, v) = lucas_kanade(&prev, &next, LK_WINDOW).unwrap();
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                assert!((u.at(0, 0, y, x) - 1.0).abs() < 0.1, "u at {y},{x} = {}", u.at(0, 0, y, x));
                assert!(v.at(0, 0, y, x).abs() < 0.1, "v at {y},{x} = {}", v.at(0, 0, y, x));
            }
        }
    }

    #[test]
    fn doubling_shift_doubles_flow() {
        let (h, w) = (24, 28);
        let prev = quadratic_luma(h, w, 0.0);
        let one = quadratic_luma(h, w, 1.0);
        let two = quadratic_luma(h, w, 2.0);
        let (u1, _) = lucas_kanade(&prev, &one, LK_WINDOW).unwrap();
        let (u2, _) = lucas_kanade(&prev, &two, LK_WINDOW).unwrap();
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                let (a, b) = (u1.at(0, 0, y, x), u2.at(0, 0, y, x));
                assert!((b - 2.0 * a).abs() <= 0.15 * 2.0 * a.abs().max(1.0), "at {y},{x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn flow_normalization_rules() {
        let mut f = FeatureMap::from_vec(1, 1, 1, 5, vec![0.0, 8.0, 20.0, -4.0, -20.0]).unwrap();
        normalize_flow(&mut f);
        assert_eq!(f.data, vec![0.0, 1.0, 1.0, -0.5, -1.0]);
    }

    fn translating_frames(n: usize, h: usize, w: usize, step: f64) -> Vec<RawFrame> {
        use std::f64::consts::TAU;
        (0..n)
            .map(|t| {
                let mut rgb = Vec::with_capacity(3 * h * w);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let phase = TAU * (x as f64 - step * t as f64) / 28.0;
                            let vert = TAU * y as f64 / 20.0;
                            let v = 0.5
                                + 0.22 * phase.sin()
                                + 0.18 * vert.sin()
                                + 0.04 * (c as f64 - 1.0);
                            rgb.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                RawFrame::new(w, h, rgb).unwrap()
            })
            .collect()
    }

    fn default_stats(frames: &[RawFrame]) -> ChannelStats {
        fit_channel_stats(&frames.iter().map(rgb_to_yuv).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_frame_sequence_has_zero_flow() {
        let frames = translating_frames(1, SRC_H, SRC_W, 0.0);
        let stats = default_stats(&frames);
        let seq = build_sequence(&frames, &stats, 3, 1).unwrap();
        assert_eq!(seq.len(), 1);
        let hw = SRC_H * SRC_W;
        assert!(seq.frames[0].channels.data[3 * hw..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn static_sequence_has_zero_flow_on_second_frame() {
        let frames = translating_frames(2, SRC_H, SRC_W, 0.0);
        let stats = default_stats(&frames);
        let seq = build_sequence(&frames, &stats, 0, 2).unwrap();
        let hw = SRC_H * SRC_W;
        assert!(seq.frames[1].channels.data[3 * hw..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn translating_sequence_has_matching_flow_sign() {
        let frames = translating_frames(4, SRC_H, SRC_W, 2.0);
        let stats = default_stats(&frames);
        let seq = build_sequence(&frames, &stats, 0, 1).unwrap();
        let hw = SRC_H * SRC_W;
        for t in 1..4 {
            let u = &seq.frames[t].channels.data[3 * hw..4 * hw];
            let mut interior = Vec::new();
            for y in 4..SRC_H - 4 {
                for x in 4..SRC_W - 4 {
                    interior.push(u[y * SRC_W + x]);
                }
            }
            let mean = interior.iter().sum::<f64>() / interior.len() as f64;
            assert!(mean > 0.05, "frame {t} mean interior u = {mean}");
        }
        for f in &seq.frames {
            let flow = &f.channels.data[3 * hw..];
            assert!(flow.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    fn prepared_sequence(n: usize) -> SequenceSample {
        let frames = translating_frames(n, SRC_H, SRC_W, 1.0);
        let stats = default_stats(&frames);
        build_sequence(&frames, &stats, 7, 2).unwrap()
    }

    #[test]
    fn top_left_crop_is_identity_region() {
        let seq = prepared_sequence(2);
        let out = apply_crop_mirror(&seq, 0, 0, false).unwrap();
        assert_eq!(out.frames[0].channels.shape(), (1, 5, NET_H, NET_W));
        assert_eq!(out.person_id, 7);
        assert_eq!(out.camera_id, 2);
        for c in 0..5 {
            for y in 0..NET_H {
                for x in 0..NET_W {
                    assert_eq!(
                        out.frames[1].channels.at(0, c, y, x),
                        seq.frames[1].channels.at(0, c, y, x)
                    );
                }
            }
        }
    }

    #[test]
    fn mirror_twice_recovers_plain_crop() {
        let seq = prepared_sequence(2);
        let once = apply_crop_mirror(&seq, 3, 5, true).unwrap();
        let twice = apply_crop_mirror(&once, 0, 0, true).unwrap();
        let plain = apply_crop_mirror(&seq, 3, 5, false).unwrap();
        for (a, b) in twice.frames.iter().zip(&plain.frames) {
            assert_eq!(a.channels.data, b.channels.data);
        }
    }

    #[test]
    fn mirror_negates_horizontal_flow() {
        let seq = prepared_sequence(2);
        let plain = apply_crop_mirror(&seq, 0, 0, false).unwrap();
        let mirrored = apply_crop_mirror(&seq, 0, 0, true).unwrap();
        let f = 1;
        for y in 0..NET_H {
            for x in 0..NET_W {
                let direct = plain.frames[f].channels.at(0, 3, y, x);
                let reflected = mirrored.frames[f].channels.at(0, 3, y, NET_W - 1 - x);
                assert_eq!(reflected, -direct);
                // Vertical flow reflects without negation.
                let dv = plain.frames[f].channels.at(0, 4, y, x);
                let rv = mirrored.frames[f].channels.at(0, 4, y, NET_W - 1 - x);
                assert_eq!(rv, dv);
            }
        }
    }

    #[test]
    fn augment_applies_one_transform_to_all_frames() {
        let seq = prepared_sequence(3);
        let mut rng = RngStream::new(77);
        for _ in 0..1000 {
            let out = augment(&seq, &mut rng).unwrap();
            // Recover the parameters from frame 0 by exhaustive match, then
            // demand every other frame used the same ones.
            let mut found = None;
            'search: for dy in 0..=SRC_H - NET_H {
                for dx in 0..=SRC_W - NET_W {
                    for mirror in [false, true] {
                        let cand = apply_crop_mirror(&seq, dy, dx, mirror).unwrap();
                        if cand.frames[0].channels.data == out.frames[0].channels.data {
                            found = Some((dy, dx, mirror));
                            break 'search;
                        }
                    }
                }
            }
            let (dy, dx, mirror) = found.expect("augment output matches no single transform");
            let expect = apply_crop_mirror(&seq, dy, dx, mirror).unwrap();
            for (a, b) in out.frames.iter().zip(&expect.frames) {
                assert_eq!(a.channels.data, b.channels.data);
            }
        }
    }

    #[test]
    fn subsequence_is_consecutive_and_in_bounds() {
        let seq = prepared_sequence(40);
        let mut rng = RngStream::new(5);
        for _ in 0..200 {
            let sub = sample_subsequence(&seq, 16, &mut rng);
            assert_eq!(sub.len(), 16);
            // Identify the start by matching luma planes, then check order.
            let hw = SRC_H * SRC_W;
            let start = (0..40)
                .find(|s| seq.frames[*s].channels.data[..hw] == sub.frames[0].channels.data[..hw])
                .unwrap();
            assert!(start <= 24);
            for (i, f) in sub.frames.iter().enumerate() {
                assert_eq!(f.channels.data[..hw], seq.frames[start + i].channels.data[..hw]);
            }
            // Leading flow was reset.
            assert!(sub.frames[0].channels.data[3 * hw..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn short_sequences_return_everything() {
        let seq = prepared_sequence(10);
        let mut rng = RngStream::new(6);
        let sub = sample_subsequence(&seq, 16, &mut rng);
        assert_eq!(sub.len(), 10);
        let one = sample_subsequence(&seq, 1, &mut rng);
        assert_eq!(one.len(), 1);
        let lead = leading_subsequence(&seq, 4);
        assert_eq!(lead.len(), 4);
        let hw = SRC_H * SRC_W;
        assert_eq!(
            lead.frames[1].channels.data[..hw],
            seq.frames[1].channels.data[..hw]
        );
    }

    #[test]
    fn trailing_subsequence_takes_ending_frames() {
        let seq = prepared_sequence(10);
        let tail = trailing_subsequence(&seq, 4);
        assert_eq!(tail.len(), 4);
        let hw = SRC_H * SRC_W;
        for (i, f) in tail.frames.iter().enumerate() {
            assert_eq!(f.channels.data[..hw], seq.frames[6 + i].channels.data[..hw]);
        }
        assert!(tail.frames[0].channels.data[3 * hw..].iter().all(|v| *v == 0.0));
        // Flow of later frames is kept.
        assert_eq!(
            tail.frames[1].channels.data[3 * hw..],
            seq.frames[7].channels.data[3 * hw..]
        );
        assert_eq!(trailing_subsequence(&seq, 0).len(), 10);
        assert_eq!(trailing_subsequence(&seq, 99).len(), 10);
    }
}
