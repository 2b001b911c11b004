//! Evaluation protocol: repeated 50/50 identity splits, probe/gallery frame
//! selection, CMC ranking with deterministic tie handling, and the ablation
//! sweeps over filter count and evaluation sequence length.
//!
//! Camera 1 is the probe side, camera 2 the gallery. Distances are Euclidean
//! between final sequence descriptors. Ties rank by ascending gallery index,
//! which keeps ranking deterministic and lets an independent sort-based
//! oracle reproduce it exactly.

use serde::Serialize;

use crate::data::VideoDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::{
    build_sequence, center_crop, fit_channel_stats, leading_subsequence, rgb_to_yuv,
    trailing_subsequence, SequenceSample,
};
use crate::rng::RngStream;
use crate::tensor::l2_distance;
use crate::train::{train, TrainConfig, TrainIdentity, TrainSet};

/// Ranks reported in result tables.
pub const SUMMARY_RANKS: [usize; 4] = [1, 5, 10, 20];
/// Filter counts swept by the filter ablation.
pub const ABLATION_FILTERS: [usize; 5] = [0, 1, 2, 3, 4];
/// Evaluation lengths swept by the length ablation.
pub const ABLATION_LENGTHS: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];
/// The length ablation always trains at this sequence length.
pub const ABLATION_TRAIN_SEQ_LEN: usize = 16;

/// One train/test partition of the identity set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// Seed this split was drawn from; also seeds the repetition's training.
    pub seed: u64,
}

/// `repetitions` independent half/half splits. Repetition `r` draws its
/// permutation from `master_seed + r`, so the whole list is reproducible and
/// each split can be re-derived from its own recorded seed.
pub fn make_splits(ids: &[usize], repetitions: usize, master_seed: u64) -> Result<Vec<Split>> {
    if ids.is_empty() {
        return Err(Error::invalid("make_splits", "empty identity set"));
    }
    if repetitions == 0 {
        return Err(Error::invalid("make_splits", "repetitions must be >= 1"));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::invalid("make_splits", "duplicate identity ids"));
    }
    let mut splits = Vec::with_capacity(repetitions);
    for rep in 0..repetitions as u64 {
        let seed = master_seed.wrapping_add(rep);
        let mut rng = RngStream::new(seed).fork("split");
        let mut perm = sorted.clone();
        for i in (1..perm.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        let train_count = perm.len().div_ceil(2);
        let mut train_ids = perm[..train_count].to_vec();
        let mut test_ids = perm[train_count..].to_vec();
        train_ids.sort_unstable();
        test_ids.sort_unstable();
        splits.push(Split { train_ids, test_ids, seed });
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Probe,
    Gallery,
}

/// Evaluation frame selection: the probe keeps the first `min(max_len, n)`
/// frames, the gallery the last. No augmentation; the chosen window's leading
/// frame starts with zero flow.
pub fn select_test_frames(seq: &SequenceSample, role: Role, max_len: usize) -> Result<SequenceSample> {
    if max_len == 0 {
        return Err(Error::invalid("select_test_frames", "max_len must be >= 1"));
    }
    Ok(match role {
        Role::Probe => leading_subsequence(seq, max_len),
        Role::Gallery => trailing_subsequence(seq, max_len),
    })
}

/// Cumulative match characteristic over gallery ranks 1..=G.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub values: Vec<f64>,
}

impl CmcCurve {
    /// Fraction of probes matched within the top `rank` entries (clamped to
    /// the gallery size).
    pub fn at(&self, rank: usize) -> f64 {
        self.values[rank.clamp(1, self.values.len()) - 1]
    }
}

/// Count-based CMC: a probe's match ranks `1 + #{closer entries} + #{tied
/// entries at a lower gallery index}`.
pub fn cmc(dist: &[Vec<f64>], truth: &[usize]) -> Result<CmcCurve> {
    let probes = dist.len();
    if probes == 0 {
        return Err(Error::invalid("cmc", "no probe rows"));
    }
    let gallery = dist[0].len();
    if gallery == 0 {
        return Err(Error::invalid("cmc", "empty gallery"));
    }
    if truth.len() != probes {
        return Err(Error::invalid(
            "cmc",
            format!("{} truth entries for {} probes", truth.len(), probes),
        ));
    }
    let mut per_rank = vec![0usize; gallery];
    for (i, row) in dist.iter().enumerate() {
        if row.len() != gallery {
            return Err(Error::invalid(
                "cmc",
                format!("row {i} has {} entries, expected {gallery}", row.len()),
            ));
        }
        if row.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("cmc", format!("non-finite distance in row {i}")));
        }
        let t = truth[i];
        if t >= gallery {
            return Err(Error::invalid("cmc", format!("truth index {t} outside gallery of {gallery}")));
        }
        let dt = row[t];
        let mut rank = 1;
        for (j, &d) in row.iter().enumerate() {
            if d < dt || (d == dt && j < t) {
                rank += 1;
            }
        }
        per_rank[rank - 1] += 1;
    }
    let mut values = Vec::with_capacity(gallery);
    let mut seen = 0usize;
    for hits in per_rank {
        seen += hits;
        values.push(seen as f64 / probes as f64);
    }
    Ok(CmcCurve { values })
}

/// The four table ranks, averaged across repetitions when reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
}

impl RankSummary {
    pub fn from_curve(curve: &CmcCurve) -> RankSummary {
        RankSummary {
            rank1: curve.at(1),
            rank5: curve.at(5),
            rank10: curve.at(10),
            rank20: curve.at(20),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.rank1, self.rank5, self.rank10, self.rank20]
    }

    pub fn mean(items: &[RankSummary]) -> RankSummary {
        assert!(!items.is_empty(), "mean of no summaries");
        let n = items.len() as f64;
        let mut acc = [0.0f64; 4];
        for item in items {
            for (a, v) in acc.iter_mut().zip(item.values()) {
                *a += v;
            }
        }
        RankSummary {
            rank1: acc[0] / n,
            rank5: acc[1] / n,
            rank10: acc[2] / n,
            rank20: acc[3] / n,
        }
    }
}

/// A held-out identity with its two prepared (network-sized) sequences.
#[derive(Debug, Clone)]
pub struct TestIdentity {
    pub person_id: usize,
    pub cam1: SequenceSample,
    pub cam2: SequenceSample,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub summary: RankSummary,
    pub curve: CmcCurve,
}

/// Ranks camera-1 probes against the camera-2 gallery by descriptor distance.
/// Deterministic: no augmentation, dropout off.
pub fn evaluate(model: &Model, test: &[TestIdentity], max_len: usize) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate", "no test identities"));
    }
    for (_, p) in model.params.iter() {
        if let Some(v) = p.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "evaluate".into(),
                detail: format!("parameter {} holds {v}; model is unusable", p.name),
            });
        }
    }
    let mut probe_desc = Vec::with_capacity(test.len());
    let mut gallery_desc = Vec::with_capacity(test.len());
    for t in test {
        probe_desc.push(model.eval_descriptor(&select_test_frames(&t.cam1, Role::Probe, max_len)?)?);
        gallery_desc.push(model.eval_descriptor(&select_test_frames(&t.cam2, Role::Gallery, max_len)?)?);
    }
    let dist: Vec<Vec<f64>> = probe_desc
        .iter()
        .map(|p| gallery_desc.iter().map(|g| l2_distance(p, g)).collect())
        .collect();
    let truth: Vec<usize> = (0..test.len()).collect();
    let curve = cmc(&dist, &truth)?;
    Ok(EvalOutcome { summary: RankSummary::from_curve(&curve), curve })
}

/// Builds the training set and prepared test identities for one split.
/// Channel statistics are fit on training frames only; training sequences stay
/// at crop-source size for augmentation, test sequences are center-cropped.
pub fn prepare_split(ds: &VideoDataset, split: &Split) -> Result<(TrainSet, Vec<TestIdentity>)> {
    let person = |id: usize| {
        ds.person(id)
            .ok_or_else(|| Error::invalid("prepare_split", format!("identity {id} not in dataset")))
    };
    let mut yuv = Vec::new();
    for id in &split.train_ids {
        let p = person(*id)?;
        for f in p.cam1.iter().chain(&p.cam2) {
            yuv.push(rgb_to_yuv(f));
        }
    }
    let stats = fit_channel_stats(&yuv)?;
    drop(yuv);

    let mut identities = Vec::with_capacity(split.train_ids.len());
    for (label, id) in split.train_ids.iter().enumerate() {
        let p = person(*id)?;
        identities.push(TrainIdentity {
            person_id: *id,
            label,
            cam1: build_sequence(&p.cam1, &stats, *id, 1)?,
            cam2: build_sequence(&p.cam2, &stats, *id, 2)?,
        });
    }
    let set = TrainSet { identities };
    set.validate()?;

    let mut test = Vec::with_capacity(split.test_ids.len());
    for id in &split.test_ids {
        let p = person(*id)?;
        test.push(TestIdentity {
            person_id: *id,
            cam1: center_crop(&build_sequence(&p.cam1, &stats, *id, 1)?)?,
            cam2: center_crop(&build_sequence(&p.cam2, &stats, *id, 2)?)?,
        });
    }
    Ok((set, test))
}

/// Per-split result: the split's seed plus its rank values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitResult {
    pub seed: u64,
    #[serde(flatten)]
    pub ranks: RankSummary,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub per_split: Vec<SplitResult>,
    pub mean: RankSummary,
}

/// Full protocol: for each repetition, train on the split's first half and
/// evaluate on the second; report the arithmetic mean across repetitions.
pub fn run_protocol(
    ds: &VideoDataset,
    cfg: &TrainConfig,
    max_len: usize,
    repetitions: usize,
) -> Result<ProtocolResult> {
    let splits = make_splits(&ds.ids(), repetitions, cfg.seed)?;
    let mut per_split = Vec::with_capacity(splits.len());
    for split in &splits {
        let (train_set, test) = prepare_split(ds, split)?;
        let mut cfg_rep = cfg.clone();
        cfg_rep.seed = split.seed;
        let out = train(&train_set, &cfg_rep, None)?;
        let outcome = evaluate(&out.model, &test, max_len)?;
        per_split.push(SplitResult { seed: split.seed, ranks: outcome.summary });
    }
    let mean = RankSummary::mean(&per_split.iter().map(|s| s.ranks).collect::<Vec<_>>());
    Ok(ProtocolResult { per_split, mean })
}

/// One ablation table row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub setting: usize,
    pub mean: RankSummary,
    pub per_split: Vec<SplitResult>,
}

/// Filter-count sweep: retrains the whole protocol at each K in 0..=4.
pub fn ablate_filters(
    ds: &VideoDataset,
    cfg: &TrainConfig,
    max_len: usize,
    repetitions: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_FILTERS.len());
    for k in ABLATION_FILTERS {
        let mut cfg_k = cfg.clone();
        cfg_k.filters = k;
        let result = run_protocol(ds, &cfg_k, max_len, repetitions)?;
        rows.push(AblationRow { setting: k, mean: result.mean, per_split: result.per_split });
    }
    Ok(rows)
}

/// Evaluation-length sweep: trains once per repetition at the fixed training
/// length, then evaluates the same model at every length.
pub fn ablate_lengths(ds: &VideoDataset, cfg: &TrainConfig, repetitions: usize) -> Result<Vec<AblationRow>> {
    let mut cfg_train = cfg.clone();
    cfg_train.seq_len = ABLATION_TRAIN_SEQ_LEN;
    let splits = make_splits(&ds.ids(), repetitions, cfg_train.seed)?;
    let mut per_length: Vec<Vec<SplitResult>> = vec![Vec::new(); ABLATION_LENGTHS.len()];
    for split in &splits {
        let (train_set, test) = prepare_split(ds, split)?;
        let mut cfg_rep = cfg_train.clone();
        cfg_rep.seed = split.seed;
        let out = train(&train_set, &cfg_rep, None)?;
        for (slot, len) in per_length.iter_mut().zip(ABLATION_LENGTHS) {
            let outcome = evaluate(&out.model, &test, len)?;
            slot.push(SplitResult { seed: split.seed, ranks: outcome.summary });
        }
    }
    Ok(per_length
        .into_iter()
        .zip(ABLATION_LENGTHS)
        .map(|(per_split, len)| AblationRow {
            setting: len,
            mean: RankSummary::mean(&per_split.iter().map(|s| s.ranks).collect::<Vec<_>>()),
            per_split,
        })
        .collect())
}

/// CSV in full double precision: `Label, Rank-1, Rank-5, Rank-10, Rank-20`.
pub fn format_csv(label: &str, rows: &[(String, RankSummary)]) -> String {
    let mut s = format!("{label}, Rank-1, Rank-5, Rank-10, Rank-20\n");
    for (name, r) in rows {
        s.push_str(&format!("{name}, {}, {}, {}, {}\n", r.rank1, r.rank5, r.rank10, r.rank20));
    }
    s
}

/// Aligned text table with the same columns as the CSV.
pub fn format_table(label: &str, rows: &[(String, RankSummary)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).chain([label.len()]).max().unwrap_or(0);
    let mut s = format!("{label:<name_w$}   Rank-1   Rank-5  Rank-10  Rank-20\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "{name:<name_w$}   {:.4}   {:.4}   {:.4}   {:.4}\n",
            r.rank1, r.rank5, r.rank10, r.rank20
        ));
    }
    s
}
