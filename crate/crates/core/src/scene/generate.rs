use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActorTrack, BBox, GroupGt, SceneClip, Taxonomy};
use crate::error::{Error, Result};

/// Knobs of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub frames: usize,
    pub min_groups: usize,
    pub max_groups: usize,
    pub min_group_size: usize,
    pub max_group_size: usize,
    /// Number of outlier candidates; each becomes an outlier with `outlier_prob`.
    pub max_outliers: usize,
    pub outlier_prob: f64,
    /// Standard deviation of member offsets around their group centre.
    pub cluster_spread: f64,
    /// Per-frame displacement of a group or outlier.
    pub speed: f64,
    /// Group activities in one clip are drawn without replacement.
    pub distinct_activities: bool,
    /// Token budget `K`; no clip may hold more groups.
    pub max_groups_bound: usize,
    pub taxonomy: Taxonomy,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            frames: 5,
            min_groups: 1,
            max_groups: 3,
            min_group_size: 2,
            max_group_size: 4,
            max_outliers: 2,
            outlier_prob: 0.5,
            cluster_spread: 0.03,
            speed: 0.01,
            distinct_activities: true,
            max_groups_bound: 12,
            taxonomy: Taxonomy::default(),
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.taxonomy.validate()?;
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.min_groups > self.max_groups {
            return bad(format!("min_groups {} > max_groups {}", self.min_groups, self.max_groups));
        }
        if self.max_groups > self.max_groups_bound {
            return bad(format!("max_groups {} exceeds the token budget {}", self.max_groups, self.max_groups_bound));
        }
        if self.min_group_size == 0 || self.min_group_size > self.max_group_size {
            return bad(format!(
                "group size range {}..={} is empty or starts at zero",
                self.min_group_size, self.max_group_size
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return bad(format!("outlier_prob {} outside [0,1]", self.outlier_prob));
        }
        if !(self.cluster_spread >= 0.0 && self.speed >= 0.0) {
            return bad("spread and speed must be nonnegative".into());
        }
        if self.distinct_activities && self.max_groups > self.taxonomy.num_group_activities() {
            return bad(format!(
                "{} distinct activities requested from {}",
                self.max_groups,
                self.taxonomy.num_group_activities()
            ));
        }
        Ok(())
    }
}

struct Mover {
    center: (f64, f64),
    velocity: (f64, f64),
}

const BOX_W: (f64, f64) = (0.04, 0.07);
const BOX_H: (f64, f64) = (0.08, 0.14);

/// Draws one clip. Groups are spatial clusters sharing a velocity; outliers
/// move independently. The clip is a pure function of `(seed, params)`.
pub fn generate_scene(seed: u64, params: &GeneratorParams) -> Result<SceneClip> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tax = &params.taxonomy;
    let n_groups = rng.gen_range(params.min_groups..=params.max_groups);
    let activities: Vec<usize> = if params.distinct_activities {
        rand::seq::index::sample(&mut rng, tax.num_group_activities(), n_groups).into_vec()
    } else {
        (0..n_groups).map(|_| rng.gen_range(0..tax.num_group_activities())).collect()
    };

    let mut centers: Vec<(f64, f64)> = Vec::new();
    let mut movers: Vec<Mover> = Vec::new();
    for _ in 0..n_groups {
        let c = place(&mut rng, &centers, 0.2, (0.15, 0.85));
        centers.push(c);
        movers.push(Mover { center: c, velocity: heading(&mut rng, params.speed) });
    }

    let spread = Normal::new(0.0, params.cluster_spread.max(1e-12)).expect("spread");
    let jitter = Normal::new(0.0, (params.cluster_spread * 0.1).max(1e-12)).expect("jitter");
    struct Pending {
        group: Option<usize>,
        center: (f64, f64),
        velocity: (f64, f64),
    }
    let mut pending: Vec<Pending> = Vec::new();
    for (gi, m) in movers.iter().enumerate() {
        let size = rng.gen_range(params.min_group_size..=params.max_group_size);
        for _ in 0..size {
            let off = (spread.sample(&mut rng), spread.sample(&mut rng));
            pending.push(Pending {
                group: Some(gi),
                center: (m.center.0 + off.0, m.center.1 + off.1),
                velocity: m.velocity,
            });
        }
    }
    for _ in 0..params.max_outliers {
        if rng.gen_bool(params.outlier_prob) {
            let c = place(&mut rng, &centers, 0.15, (0.1, 0.9));
            let s = params.speed * rng.gen_range(0.5..1.5);
            let v = heading(&mut rng, s);
            pending.push(Pending { group: None, center: c, velocity: v });
        }
    }
    pending.shuffle(&mut rng);

    let mut actors = Vec::with_capacity(pending.len());
    let mut groups: Vec<GroupGt> =
        activities.iter().map(|&activity| GroupGt { member_ids: BTreeSet::new(), activity }).collect();
    let mut outliers = BTreeSet::new();
    for (id, p) in pending.iter().enumerate() {
        let id = id as u32;
        let (w, h) = (rng.gen_range(BOX_W.0..BOX_W.1), rng.gen_range(BOX_H.0..BOX_H.1));
        let boxes = (0..params.frames)
            .map(|t| {
                let t = t as f64;
                let cx = p.center.0 + p.velocity.0 * t + jitter.sample(&mut rng);
                let cy = p.center.1 + p.velocity.1 * t + jitter.sample(&mut rng);
                let x1 = (cx - w / 2.0).clamp(0.0, 1.0 - w);
                let y1 = (cy - h / 2.0).clamp(0.0, 1.0 - h);
                BBox { x1, y1, x2: (x1 + w).min(1.0), y2: (y1 + h).min(1.0) }
            })
            .collect();
        let action = match p.group {
            Some(gi) => {
                groups[gi].member_ids.insert(id);
                activities[gi]
            }
            None => {
                outliers.insert(id);
                tax.idle_action()
            }
        };
        actors.push(ActorTrack { actor_id: id, boxes, individual_action: action });
    }

    let clip = SceneClip {
        clip_id: format!("scene-{seed}"),
        frames: params.frames,
        actors,
        groups,
        outlier_actor_ids: outliers,
    };
    clip.validate(tax, Some(params.max_groups_bound))?;
    Ok(clip)
}

fn heading(rng: &mut ChaCha8Rng, speed: f64) -> (f64, f64) {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    (speed * theta.cos(), speed * theta.sin())
}

/// Uniform point in `range^2`, retried until it keeps `min_dist` from `taken`.
fn place(rng: &mut ChaCha8Rng, taken: &[(f64, f64)], min_dist: f64, range: (f64, f64)) -> (f64, f64) {
    let mut best = (0.5, 0.5);
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..64 {
        let c = (rng.gen_range(range.0..range.1), rng.gen_range(range.0..range.1));
        let gap =
            taken.iter().map(|t| ((c.0 - t.0).powi(2) + (c.1 - t.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        if gap >= min_dist {
            return c;
        }
        if gap > best_gap {
            best_gap = gap;
            best = c;
        }
    }
    best
}
