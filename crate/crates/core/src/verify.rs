//! Reference implementations and randomized suites used by the `oracle`
//! command and the acceptance tests.
//!
//! The metric oracle recomputes every report field with plain loops over
//! vectors and shares no code with [`crate::metrics`].

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{brute_force_assignment, hungarian};
use crate::metrics::{evaluate, ClipPredictions, GroupPrediction, DEFAULT_THRESHOLDS};
use crate::scene::{ActorTrack, BBox, GroupGt, SceneClip, Taxonomy};

fn iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn ids(s: &BTreeSet<u32>) -> Vec<u32> {
    s.iter().copied().collect()
}

struct Det {
    clip: usize,
    members: Vec<u32>,
    conf: f64,
}

struct Gt {
    clip: usize,
    members: Vec<u32>,
}

/// AP as the area under the precision envelope: for every recall level
/// reached, the best precision at that recall or beyond.
fn oracle_ap(mut dets: Vec<Det>, gts: &[Gt], clip_names: &[String], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    dets.sort_by(|a, b| {
        b.conf
            .partial_cmp(&a.conf)
            .unwrap()
            .then(clip_names[a.clip].cmp(&clip_names[b.clip]))
            .then(a.members.cmp(&b.members))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = 0.0;
    let mut curve = Vec::new();
    for (rank, d) in dets.iter().enumerate() {
        let mut pick = None;
        let mut best = -1.0;
        for (i, g) in gts.iter().enumerate() {
            if used[i] || g.clip != d.clip {
                continue;
            }
            let v = iou(&d.members, &g.members);
            if v >= thr && v > best {
                best = v;
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            used[i] = true;
            tp += 1.0;
        }
        curve.push((tp / gts.len() as f64, tp / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..curve.len() {
        let r = curve[i].0;
        if r > prev {
            let p = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    Some(ap)
}

fn mean_some(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// Every metric of one benchmark, flattened in a fixed order: per-class AP
/// and mAP for each default threshold, outlier mIoU, size-bucket APs and
/// their mean. Undefined entries are `None`.
pub fn oracle_metrics(preds: &[ClipPredictions], clips: &[SceneClip], taxonomy: &Taxonomy) -> Vec<Option<f64>> {
    let names: Vec<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
    let pred_of = |c: &SceneClip| preds.iter().find(|p| p.clip_id == c.clip_id).expect("aligned");
    let dets_where = |keep: &dyn Fn(&GroupPrediction) -> bool| -> Vec<Det> {
        let mut out = Vec::new();
        for (ci, c) in clips.iter().enumerate() {
            for g in &pred_of(c).groups {
                if keep(g) {
                    out.push(Det { clip: ci, members: ids(&g.members), conf: g.confidence });
                }
            }
        }
        out
    };
    let gts_where = |keep: &dyn Fn(&GroupGt) -> bool| -> Vec<Gt> {
        let mut out = Vec::new();
        for (ci, c) in clips.iter().enumerate() {
            for g in &c.groups {
                if keep(g) {
                    out.push(Gt { clip: ci, members: ids(&g.member_ids) });
                }
            }
        }
        out
    };
    let mut out = Vec::new();
    for &thr in &DEFAULT_THRESHOLDS {
        let aps: Vec<Option<f64>> = (0..taxonomy.num_group_activities())
            .map(|c| oracle_ap(dets_where(&|g| g.activity == c), &gts_where(&|g| g.activity == c), &names, thr))
            .collect();
        out.extend(aps.iter().copied());
        out.push(Some(mean_some(&aps)));
    }
    let mut total = 0.0;
    for c in clips {
        let p = ids(&pred_of(c).outliers);
        let t = ids(&c.outlier_actor_ids);
        total += if p.is_empty() && t.is_empty() { 1.0 } else { iou(&p, &t) };
    }
    out.push(Some(if clips.is_empty() { 0.0 } else { total / clips.len() as f64 }));
    let bucket = |n: usize| if n >= 5 { 5 } else { n };
    let sizes: Vec<Option<f64>> = (1..=5)
        .map(|b| {
            oracle_ap(
                dets_where(&|g| bucket(g.members.len()) == b),
                &gts_where(&|g| bucket(g.member_ids.len()) == b),
                &names,
                0.5,
            )
        })
        .collect();
    out.extend(sizes.iter().copied());
    out.push(Some(mean_some(&sizes)));
    out
}

/// The same fields read from the library report.
pub fn report_metrics(preds: &[ClipPredictions], clips: &[SceneClip], taxonomy: &Taxonomy) -> Result<Vec<Option<f64>>> {
    let r = evaluate(preds, clips, taxonomy)?;
    let mut out = Vec::new();
    for t in &r.thresholds {
        for name in &taxonomy.activities[..taxonomy.num_group_activities()] {
            out.push(t.per_class[name]);
        }
        out.push(Some(t.map));
    }
    out.push(Some(r.outlier_miou));
    for b in crate::metrics::SIZE_BUCKETS {
        out.push(r.size_ap[b]);
    }
    out.push(Some(r.size_map));
    Ok(out)
}

/// A random small benchmark: up to 6 clips of up to 4 groups, predictions
/// that perturb the truth, and confidences on a coarse grid so ties occur.
pub fn random_benchmark(seed: u64, taxonomy: &Taxonomy) -> (Vec<SceneClip>, Vec<ClipPredictions>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_clips = rng.gen_range(1..=6);
    let classes = taxonomy.num_group_activities();
    let mut clips = Vec::new();
    let mut preds = Vec::new();
    for ci in 0..n_clips {
        let clip_id = format!("b{seed}_{ci}");
        let mut next = 0u32;
        let mut groups = Vec::new();
        for _ in 0..rng.gen_range(0..=4) {
            let size = rng.gen_range(1..=6);
            groups.push(GroupGt {
                member_ids: (next..next + size).collect(),
                activity: rng.gen_range(0..classes.min(3)),
            });
            next += size;
        }
        let outliers: BTreeSet<u32> = (next..next + rng.gen_range(0..3)).collect();
        next += outliers.len() as u32;
        let actors = (0..next)
            .map(|id| ActorTrack { actor_id: id, boxes: vec![BBox::from([0.1, 0.1, 0.2, 0.2])], individual_action: 0 })
            .collect();

        let mut pg = Vec::new();
        for g in &groups {
            if rng.gen_bool(0.2) {
                continue;
            }
            let mut members: BTreeSet<u32> = g.member_ids.iter().copied().filter(|_| rng.gen_bool(0.85)).collect();
            if rng.gen_bool(0.3) && next > 0 {
                members.insert(rng.gen_range(0..next));
            }
            if members.is_empty() {
                members.insert(*g.member_ids.iter().next().unwrap());
            }
            let activity = if rng.gen_bool(0.8) { g.activity } else { rng.gen_range(0..classes.min(3)) };
            pg.push(GroupPrediction { members, activity, confidence: f64::from(rng.gen_range(1..=4u8)) / 4.0 });
        }
        for _ in 0..rng.gen_range(0..2) {
            if next == 0 {
                break;
            }
            let a = rng.gen_range(0..next);
            let b = rng.gen_range(0..next);
            pg.push(GroupPrediction {
                members: [a, b].into_iter().collect(),
                activity: rng.gen_range(0..classes.min(3)),
                confidence: f64::from(rng.gen_range(1..=4u8)) / 4.0,
            });
        }
        let pred_out: BTreeSet<u32> = (0..next).filter(|i| outliers.contains(i) != rng.gen_bool(0.15)).collect();
        preds.push(ClipPredictions { clip_id: clip_id.clone(), groups: pg, outliers: pred_out });
        clips.push(SceneClip { clip_id, frames: 1, actors, groups, outlier_actor_ids: outliers });
    }
    (clips, preds)
}

/// Largest absolute difference between library and oracle over `n`
/// benchmarks; a definedness mismatch counts as infinite.
pub fn metric_oracle_suite(seed: u64, n: usize) -> Result<f64> {
    let tax = Taxonomy::default();
    let mut worst = 0.0f64;
    for i in 0..n {
        let (clips, preds) = random_benchmark(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &tax);
        let a = report_metrics(&preds, &clips, &tax)?;
        let b = oracle_metrics(&preds, &clips, &tax);
        for (x, y) in a.iter().zip(&b) {
            let d = match (x, y) {
                (Some(x), Some(y)) => (x - y).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Outcome of the assignment comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentSuite {
    pub cases: usize,
    pub mismatches: usize,
}

/// Compares the solver with exhaustive search on `n` random cost matrices
/// with `K <= 7` tokens. Half use small integer costs so ties are common.
pub fn assignment_suite(seed: u64, n: usize) -> Result<AssignmentSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for i in 0..n {
        let k = rng.gen_range(1..=7);
        let g = rng.gen_range(0..=k);
        let integer = i % 2 == 0;
        let cost: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..g)
                    .map(|_| if integer { f64::from(rng.gen_range(0..4u8)) } else { rng.gen_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        let fast = hungarian(&cost)?;
        let slow = brute_force_assignment(&cost)?;
        if fast != slow || fast.total_cost(&cost) != slow.total_cost(&cost) {
            mismatches += 1;
        }
    }
    Ok(AssignmentSuite { cases: n, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_random_benchmarks() {
        assert!(metric_oracle_suite(7, 100).unwrap() < 1e-9);
    }

    #[test]
    fn benchmarks_are_valid_and_varied() {
        let tax = Taxonomy::default();
        let mut sizes = BTreeSet::new();
        for s in 0..50 {
            let (clips, preds) = random_benchmark(s, &tax);
            assert!(clips.len() <= 6 && clips.len() == preds.len());
            for c in &clips {
                c.validate(&tax, Some(4)).unwrap();
                sizes.extend(c.groups.iter().map(|g| g.member_ids.len()));
            }
        }
        assert!(sizes.contains(&1) && sizes.contains(&6));
    }

    #[test]
    fn oracle_ap_hand_case() {
        let names = vec!["a".to_string()];
        let gts = vec![Gt { clip: 0, members: vec![1, 2] }, Gt { clip: 0, members: vec![3, 4] }];
        let dets = vec![
            Det { clip: 0, members: vec![1, 2], conf: 0.9 },
            Det { clip: 0, members: vec![5, 6], conf: 0.8 },
            Det { clip: 0, members: vec![3, 4], conf: 0.7 },
        ];
        // recall 0.5 at precision 1, recall 1 at precision 2/3
        let ap = oracle_ap(dets, &gts, &names, 1.0).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn assignment_suite_has_no_mismatch() {
        let r = assignment_suite(3, 200).unwrap();
        assert_eq!(r.mismatches, 0);
    }
}
