//! Group detection metrics: Group IoU, per-class AP and mAP at IoU
//! thresholds, outlier mIoU and size-bucketed AP.
//!
//! Conventions: AP uses all-point interpolation; classes and size buckets
//! without ground truth are left out of the means (a mean over nothing is 0);
//! outlier IoU of two empty sets is 1.

mod report;

pub use report::{read_predictions, write_predictions, EvalReport, PredictionsFile, ThresholdReport};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gad::PredictionSet;
use crate::scene::{ActorId, SceneClip, Taxonomy};

pub const SIZE_BUCKETS: [&str; 5] = ["G1", "G2", "G3", "G4", "G5plus"];
pub const DEFAULT_THRESHOLDS: [f64; 2] = [1.0, 0.5];
pub const SIZE_AP_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub members: BTreeSet<ActorId>,
    pub activity: usize,
    pub confidence: f64,
}

/// Decoded output for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPredictions {
    pub clip_id: String,
    pub groups: Vec<GroupPrediction>,
    pub outliers: BTreeSet<ActorId>,
}

impl ClipPredictions {
    /// The ground truth replayed as predictions with confidence 1.
    pub fn from_ground_truth(clip: &SceneClip) -> Self {
        ClipPredictions {
            clip_id: clip.clip_id.clone(),
            groups: clip
                .groups
                .iter()
                .map(|g| GroupPrediction { members: g.member_ids.clone(), activity: g.activity, confidence: 1.0 })
                .collect(),
            outliers: clip.outlier_actor_ids.clone(),
        }
    }

    pub fn empty(clip_id: &str) -> Self {
        ClipPredictions { clip_id: clip_id.to_string(), groups: vec![], outliers: BTreeSet::new() }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Each actor goes to its argmax membership slot (lowest index on ties);
/// the last slot marks outliers. A token with members and a non-empty
/// argmax class emits a group whose confidence is that class's probability.
pub fn decode_predictions(pred: &PredictionSet, clip: &SceneClip, taxonomy: &Taxonomy) -> Result<ClipPredictions> {
    let k = pred.group_logits.rows();
    let classes = taxonomy.num_group_activities() + 1;
    if pred.group_logits.cols() != classes {
        return Err(Error::dim("decode group logits", &[k, classes], pred.group_logits.shape()));
    }
    let a = clip.actors.len();
    if pred.membership_logits.shape() != [a, k + 1] {
        return Err(Error::dim("decode membership logits", &[a, k + 1], pred.membership_logits.shape()));
    }
    let mut members = vec![BTreeSet::new(); k];
    let mut outliers = BTreeSet::new();
    for (i, actor) in clip.actors.iter().enumerate() {
        let slot = argmax(pred.membership_logits.row(i));
        if slot == k {
            outliers.insert(actor.actor_id);
        } else {
            members[slot].insert(actor.actor_id);
        }
    }
    let none = classes - 1;
    let mut groups = Vec::new();
    for (t, m) in members.into_iter().enumerate() {
        let row = pred.group_logits.row(t);
        let c = argmax(row);
        if m.is_empty() || c == none {
            continue;
        }
        let mx = row[c];
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        groups.push(GroupPrediction { members: m, activity: c, confidence: 1.0 / z });
    }
    Ok(ClipPredictions { clip_id: clip.clip_id.clone(), groups, outliers })
}

/// `|p ∩ g| / |p ∪ g|`, 0 when both are empty.
pub fn group_iou(pred: &BTreeSet<ActorId>, gt: &BTreeSet<ActorId>) -> f64 {
    let inter = pred.intersection(gt).count();
    let union = pred.len() + gt.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A scored detection in one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection<'a> {
    pub clip_id: &'a str,
    pub members: &'a BTreeSet<ActorId>,
    pub confidence: f64,
}

/// A ground-truth group in one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth<'a> {
    pub clip_id: &'a str,
    pub members: &'a BTreeSet<ActorId>,
}

/// All-point interpolated AP; `None` when there is no ground truth.
///
/// Detections are ranked by confidence (ties: clip id, then member set) and
/// each takes the unmatched ground truth of its clip with the highest IoU, if
/// that IoU reaches `threshold`.
pub fn average_precision(dets: &[Detection], truths: &[Truth], threshold: f64) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.clip_id.cmp(b.clip_id))
            .then_with(|| a.members.cmp(b.members))
    });
    let mut by_clip: BTreeMap<&str, Vec<(usize, &BTreeSet<ActorId>)>> = BTreeMap::new();
    for (i, t) in truths.iter().enumerate() {
        by_clip.entry(t.clip_id).or_default().push((i, t.members));
    }
    let mut taken = vec![false; truths.len()];
    let mut hits = Vec::with_capacity(order.len());
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for &(i, m) in by_clip.get(d.clip_id).map_or(&[][..], Vec::as_slice) {
            if taken[i] {
                continue;
            }
            let iou = group_iou(d.members, m);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        if let Some((i, _)) = best {
            taken[i] = true;
        }
        hits.push(best.is_some());
    }
    Some(all_point_ap(&hits, truths.len()))
}

fn all_point_ap(hits: &[bool], n_truth: usize) -> f64 {
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_truth as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for i in 0..hits.len() {
        if rec[i] > last_recall {
            ap += (rec[i] - last_recall) * prec[i];
            last_recall = rec[i];
        }
    }
    ap
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_alignment(preds: &[ClipPredictions], clips: &[SceneClip]) -> Result<()> {
    let p: BTreeSet<&str> = preds.iter().map(|c| c.clip_id.as_str()).collect();
    let g: BTreeSet<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
    if p.len() != preds.len() || g.len() != clips.len() {
        return Err(Error::Alignment("duplicate clip id".into()));
    }
    if p != g {
        let missing: Vec<&&str> = g.symmetric_difference(&p).collect();
        return Err(Error::Alignment(format!("clip ids differ between predictions and ground truth: {missing:?}")));
    }
    Ok(())
}

/// Per-class AP at `threshold` (`None` for classes without ground truth) and
/// their mean.
pub fn group_map(
    preds: &[ClipPredictions],
    clips: &[SceneClip],
    taxonomy: &Taxonomy,
    threshold: f64,
) -> Result<(Vec<Option<f64>>, f64)> {
    check_alignment(preds, clips)?;
    let per_class: Vec<Option<f64>> = (0..taxonomy.num_group_activities())
        .map(|c| {
            let dets: Vec<Detection> = preds
                .iter()
                .flat_map(|p| {
                    p.groups.iter().filter(|g| g.activity == c).map(|g| Detection {
                        clip_id: &p.clip_id,
                        members: &g.members,
                        confidence: g.confidence,
                    })
                })
                .collect();
            let truths: Vec<Truth> = clips
                .iter()
                .flat_map(|clip| {
                    clip.groups
                        .iter()
                        .filter(|g| g.activity == c)
                        .map(|g| Truth { clip_id: &clip.clip_id, members: &g.member_ids })
                })
                .collect();
            average_precision(&dets, &truths, threshold)
        })
        .collect();
    let m = mean_defined(per_class.iter().copied());
    Ok((per_class, m))
}

/// Mean over clips of the IoU of predicted and true outlier sets.
pub fn outlier_miou(preds: &[ClipPredictions], clips: &[SceneClip]) -> Result<f64> {
    check_alignment(preds, clips)?;
    if clips.is_empty() {
        return Ok(0.0);
    }
    let by_id: BTreeMap<&str, &ClipPredictions> = preds.iter().map(|p| (p.clip_id.as_str(), p)).collect();
    let total: f64 = clips
        .iter()
        .map(|c| {
            let p = &by_id[c.clip_id.as_str()].outliers;
            if p.is_empty() && c.outlier_actor_ids.is_empty() {
                1.0
            } else {
                group_iou(p, &c.outlier_actor_ids)
            }
        })
        .sum();
    Ok(total / clips.len() as f64)
}

pub fn size_bucket(n: usize) -> usize {
    n.clamp(1, 5) - 1
}

/// Class-agnostic AP per group-size bucket at IoU 0.5; both ground truth and
/// detections are bucketed by their own member count.
pub fn size_stratified_ap(preds: &[ClipPredictions], clips: &[SceneClip]) -> Result<(Vec<Option<f64>>, f64)> {
    check_alignment(preds, clips)?;
    let per_bucket: Vec<Option<f64>> = (0..SIZE_BUCKETS.len())
        .map(|b| {
            let dets: Vec<Detection> = preds
                .iter()
                .flat_map(|p| {
                    p.groups.iter().filter(|g| size_bucket(g.members.len()) == b).map(|g| Detection {
                        clip_id: &p.clip_id,
                        members: &g.members,
                        confidence: g.confidence,
                    })
                })
                .collect();
            let truths: Vec<Truth> = clips
                .iter()
                .flat_map(|clip| {
                    clip.groups
                        .iter()
                        .filter(|g| size_bucket(g.member_ids.len()) == b)
                        .map(|g| Truth { clip_id: &clip.clip_id, members: &g.member_ids })
                })
                .collect();
            average_precision(&dets, &truths, SIZE_AP_THRESHOLD)
        })
        .collect();
    let m = mean_defined(per_bucket.iter().copied());
    Ok((per_bucket, m))
}

/// Full report over aligned predictions and ground truth.
pub fn evaluate(preds: &[ClipPredictions], clips: &[SceneClip], taxonomy: &Taxonomy) -> Result<EvalReport> {
    let mut thresholds = Vec::new();
    for &t in &DEFAULT_THRESHOLDS {
        let (per_class, map) = group_map(preds, clips, taxonomy, t)?;
        thresholds.push(ThresholdReport {
            threshold: t,
            per_class: taxonomy.activities[..taxonomy.num_group_activities()].iter().cloned().zip(per_class).collect(),
            map,
        });
    }
    let (size, size_map) = size_stratified_ap(preds, clips)?;
    Ok(EvalReport {
        clips: clips.len(),
        thresholds,
        outlier_miou: outlier_miou(preds, clips)?,
        size_ap: SIZE_BUCKETS.iter().map(|s| s.to_string()).zip(size).collect(),
        size_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorParams};
    use crate::tensor::Tensor;

    fn set(ids: &[u32]) -> BTreeSet<ActorId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn iou_cases() {
        assert_eq!(group_iou(&set(&[1, 2]), &set(&[1, 2])), 1.0);
        assert_eq!(group_iou(&set(&[1]), &set(&[2])), 0.0);
        assert_eq!(group_iou(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(group_iou(&set(&[]), &set(&[])), 0.0);
    }

    #[test]
    fn ap_hit_miss_hit() {
        let (a, b, c) = (set(&[1, 2]), set(&[3, 4]), set(&[5, 6]));
        let truths = [Truth { clip_id: "x", members: &a }, Truth { clip_id: "x", members: &b }];
        let dets = [
            Detection { clip_id: "x", members: &a, confidence: 0.9 },
            Detection { clip_id: "x", members: &c, confidence: 0.8 },
            Detection { clip_id: "x", members: &b, confidence: 0.7 },
        ];
        let ap = average_precision(&dets, &truths, 0.5).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&dets[..1], &truths[..1], 1.0), Some(1.0));
        assert_eq!(average_precision(&dets, &[], 0.5), None);
        assert_eq!(average_precision(&[], &truths, 0.5), Some(0.0));
    }

    fn benchmark() -> (Vec<SceneClip>, Taxonomy) {
        let p = GeneratorParams::default();
        ((0..6).map(|s| generate_scene(s, &p).unwrap()).collect(), Taxonomy::default())
    }

    #[test]
    fn ground_truth_replay_is_perfect() {
        let (clips, tax) = benchmark();
        let preds: Vec<ClipPredictions> = clips.iter().map(ClipPredictions::from_ground_truth).collect();
        let r = evaluate(&preds, &clips, &tax).unwrap();
        assert_eq!(r.map_at(1.0), Some(1.0));
        assert_eq!(r.map_at(0.5), Some(1.0));
        assert_eq!(r.outlier_miou, 1.0);
        assert!(r.size_ap.values().flatten().all(|&v| v == 1.0));
        assert_eq!(r.size_map, 1.0);
    }

    #[test]
    fn empty_predictions() {
        let (clips, tax) = benchmark();
        let preds: Vec<ClipPredictions> = clips.iter().map(|c| ClipPredictions::empty(&c.clip_id)).collect();
        let r = evaluate(&preds, &clips, &tax).unwrap();
        assert_eq!(r.map_at(1.0), Some(0.0));
        assert!(r.thresholds.iter().flat_map(|t| t.per_class.values()).flatten().all(|&v| v == 0.0));
        let expected = clips.iter().filter(|c| c.outlier_actor_ids.is_empty()).count() as f64 / clips.len() as f64;
        assert_eq!(r.outlier_miou, expected);
    }

    #[test]
    fn outlier_miou_cases() {
        let (clips, _) = benchmark();
        let mut a = clips[0].clone();
        a.outlier_actor_ids = set(&[0, 1]);
        a.groups.clear();
        let mut b = clips[1].clone();
        b.outlier_actor_ids = set(&[3]);
        b.groups.clear();
        let pa = ClipPredictions { outliers: set(&[0]), ..ClipPredictions::empty(&a.clip_id) };
        let pb = ClipPredictions { outliers: set(&[3]), ..ClipPredictions::empty(&b.clip_id) };
        assert_eq!(outlier_miou(std::slice::from_ref(&pb), &[b.clone()]).unwrap(), 1.0);
        assert_eq!(outlier_miou(std::slice::from_ref(&pa), &[a.clone()]).unwrap(), 0.5);
        assert_eq!(outlier_miou(&[pb, pa.clone()], &[a.clone(), b]).unwrap(), 0.75);
        let wrong = ClipPredictions::empty("other");
        assert!(matches!(outlier_miou(&[wrong], &[a]), Err(Error::Alignment(_))));
    }

    #[test]
    fn decode_rules() {
        let (clips, tax) = benchmark();
        let clip = &clips[0];
        let a = clip.actors.len();
        let k = 4;
        let mut mem = Tensor::zeros(&[a, k + 1]);
        for i in 0..a {
            mem.data_mut()[i * (k + 1) + k] = 1.0;
        }
        let pred = PredictionSet {
            group_logits: Tensor::zeros(&[k, 7]),
            membership_logits: mem,
            action_logits: Tensor::zeros(&[a, 7]),
            act_logits: vec![0.0; 7],
        };
        let d = decode_predictions(&pred, clip, &tax).unwrap();
        assert!(d.groups.is_empty());
        assert_eq!(d.outliers.len(), a);

        // all actors to token 1; token 1 argmax is no-group -> nothing emitted
        let mut mem = Tensor::zeros(&[a, k + 1]);
        for i in 0..a {
            mem.data_mut()[i * (k + 1) + 1] = 1.0;
        }
        let mut gl = Tensor::zeros(&[k, 7]);
        gl.data_mut()[7 + 6] = 3.0;
        let mut pred = PredictionSet {
            group_logits: gl,
            membership_logits: mem,
            action_logits: Tensor::zeros(&[a, 7]),
            act_logits: vec![0.0; 7],
        };
        let d = decode_predictions(&pred, clip, &tax).unwrap();
        assert!(d.groups.is_empty() && d.outliers.is_empty());

        pred.group_logits.data_mut()[7 + 2] = 5.0;
        let d = decode_predictions(&pred, clip, &tax).unwrap();
        assert_eq!(d.groups.len(), 1);
        assert_eq!(d.groups[0].activity, 2);
        let row = pred.group_logits.row(1);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        assert!((d.groups[0].confidence - 5f64.exp() / z).abs() < 1e-12);
        assert_eq!(d, decode_predictions(&pred, clip, &tax).unwrap());
    }
}
