//! Synthetic group-activity clips and the frozen stand-in visual features.

mod features;
mod generate;
mod manifest;

pub use features::{featurize, FeatureBundle, Featurizer};
pub use generate::{generate_scene, GeneratorParams};
pub use manifest::{read_dataset, write_dataset, Dataset, MANIFEST_VERSION};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ActorId = u32;

/// Activity names; the last entry is always `Outlier`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub activities: Vec<String>,
}

pub const OUTLIER: &str = "Outlier";

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy::new(["Queueing", "Ordering", "Eating", "Studying", "Fighting", "Selfie"]).expect("valid")
    }
}

impl Taxonomy {
    /// Builds a taxonomy from group-activity names and appends `Outlier`.
    pub fn new<I, T>(group_activities: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut activities: Vec<String> = group_activities.into_iter().map(Into::into).collect();
        activities.push(OUTLIER.to_string());
        let t = Taxonomy { activities };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<&String> = self.activities.iter().collect();
        if unique.len() != self.activities.len() {
            return Err(Error::Validation("duplicate activity names".into()));
        }
        if self.activities.len() < 2 {
            return Err(Error::Validation("taxonomy needs at least one group activity".into()));
        }
        if self.activities.last().map(String::as_str) != Some(OUTLIER) {
            return Err(Error::Validation(format!("last activity must be {OUTLIER}")));
        }
        if self.activities[..self.activities.len() - 1].iter().any(|a| a == OUTLIER) {
            return Err(Error::Validation(format!("{OUTLIER} must appear only as the last id")));
        }
        Ok(())
    }

    /// Size of the multi-label space (group activities plus `Outlier`).
    pub fn num_classes(&self) -> usize {
        self.activities.len()
    }

    pub fn num_group_activities(&self) -> usize {
        self.activities.len() - 1
    }

    pub fn outlier_id(&self) -> usize {
        self.activities.len() - 1
    }

    /// One individual action per group activity plus an idle action.
    pub fn num_actions(&self) -> usize {
        self.activities.len()
    }

    pub fn idle_action(&self) -> usize {
        self.activities.len() - 1
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.activities.get(id).map(String::as_str)
    }
}

/// Axis-aligned box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) && self.x1 < self.x2 && self.y1 < self.y2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub actor_id: ActorId,
    pub boxes: Vec<BBox>,
    pub individual_action: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupGt {
    pub member_ids: BTreeSet<ActorId>,
    pub activity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneClip {
    pub clip_id: String,
    pub frames: usize,
    pub actors: Vec<ActorTrack>,
    pub groups: Vec<GroupGt>,
    pub outlier_actor_ids: BTreeSet<ActorId>,
}

impl SceneClip {
    /// Checks every clip invariant; `max_groups` is the token budget `K` when known.
    pub fn validate(&self, taxonomy: &Taxonomy, max_groups: Option<usize>) -> Result<()> {
        let ctx = |msg: String| Error::Validation(format!("clip {}: {msg}", self.clip_id));
        if self.frames == 0 {
            return Err(ctx("zero frames".into()));
        }
        let mut ids = BTreeSet::new();
        for a in &self.actors {
            if !ids.insert(a.actor_id) {
                return Err(ctx(format!("duplicate actor id {}", a.actor_id)));
            }
            if a.boxes.len() != self.frames {
                return Err(ctx(format!("actor {} has {} boxes, expected {}", a.actor_id, a.boxes.len(), self.frames)));
            }
            if let Some(b) = a.boxes.iter().find(|b| !b.is_valid()) {
                return Err(ctx(format!("actor {} has invalid box {b:?}", a.actor_id)));
            }
            if a.individual_action >= taxonomy.num_actions() {
                return Err(ctx(format!("actor {} has unknown action {}", a.actor_id, a.individual_action)));
            }
        }
        if let Some(k) = max_groups {
            if self.groups.len() > k {
                return Err(ctx(format!("{} groups exceed the budget of {k}", self.groups.len())));
            }
        }
        let mut seen: BTreeMap<ActorId, usize> = BTreeMap::new();
        for (gi, g) in self.groups.iter().enumerate() {
            if g.member_ids.is_empty() {
                return Err(ctx(format!("group {gi} is empty")));
            }
            if g.activity >= taxonomy.num_group_activities() {
                return Err(ctx(format!("group {gi} has activity {} (not a group activity)", g.activity)));
            }
            for &m in &g.member_ids {
                if !ids.contains(&m) {
                    return Err(ctx(format!("group {gi} lists unknown actor {m}")));
                }
                if let Some(prev) = seen.insert(m, gi) {
                    return Err(ctx(format!("actor {m} belongs to groups {prev} and {gi}")));
                }
            }
        }
        for &o in &self.outlier_actor_ids {
            if !ids.contains(&o) {
                return Err(ctx(format!("unknown outlier actor {o}")));
            }
            if seen.contains_key(&o) {
                return Err(ctx(format!("actor {o} is both grouped and an outlier")));
            }
        }
        for &id in &ids {
            if !seen.contains_key(&id) && !self.outlier_actor_ids.contains(&id) {
                return Err(ctx(format!("actor {id} is neither grouped nor an outlier")));
            }
        }
        Ok(())
    }

    pub fn actor_ids(&self) -> Vec<ActorId> {
        self.actors.iter().map(|a| a.actor_id).collect()
    }

    /// Row index of an actor in `actors`.
    pub fn actor_index(&self, id: ActorId) -> Option<usize> {
        self.actors.iter().position(|a| a.actor_id == id)
    }

    /// Group index of each actor row, `None` for outliers.
    pub fn group_of_actors(&self) -> Vec<Option<usize>> {
        self.actors.iter().map(|a| self.groups.iter().position(|g| g.member_ids.contains(&a.actor_id))).collect()
    }

    /// Multi-hot scene label over the taxonomy: each present group activity,
    /// plus `Outlier` when any outlier exists.
    pub fn multi_hot(&self, taxonomy: &Taxonomy) -> Vec<f64> {
        let mut y = vec![0.0; taxonomy.num_classes()];
        for g in &self.groups {
            y[g.activity] = 1.0;
        }
        if !self.outlier_actor_ids.is_empty() {
            y[taxonomy.outlier_id()] = 1.0;
        }
        y
    }

    /// Pairs of actor rows whose mean box centres lie within `cutoff`.
    ///
    /// An optional proximity hook; nothing in the model consumes it.
    pub fn distance_mask(&self, cutoff: f64) -> Vec<Vec<bool>> {
        let centers: Vec<(f64, f64)> = self
            .actors
            .iter()
            .map(|a| {
                let n = a.boxes.len().max(1) as f64;
                let (sx, sy) = a.boxes.iter().map(BBox::center).fold((0.0, 0.0), |s, c| (s.0 + c.0, s.1 + c.1));
                (sx / n, sy / n)
            })
            .collect();
        centers
            .iter()
            .map(|a| centers.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= cutoff).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx() -> BBox {
        BBox { x1: 0.1, y1: 0.1, x2: 0.2, y2: 0.3 }
    }

    fn clip() -> SceneClip {
        let actor = |id, act| ActorTrack { actor_id: id, boxes: vec![bx(); 2], individual_action: act };
        SceneClip {
            clip_id: "c".into(),
            frames: 2,
            actors: vec![actor(0, 3), actor(1, 3), actor(2, 6)],
            groups: vec![GroupGt { member_ids: [0, 1].into_iter().collect(), activity: 3 }],
            outlier_actor_ids: [2].into_iter().collect(),
        }
    }

    #[test]
    fn default_taxonomy_layout() {
        let t = Taxonomy::default();
        assert_eq!(t.num_classes(), 7);
        assert_eq!(t.outlier_id(), 6);
        assert_eq!(t.name(6), Some(OUTLIER));
        assert!(Taxonomy { activities: vec!["Outlier".into(), "A".into()] }.validate().is_err());
    }

    #[test]
    fn valid_clip_and_label() {
        let c = clip();
        let t = Taxonomy::default();
        c.validate(&t, Some(2)).unwrap();
        assert_eq!(c.multi_hot(&t), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.group_of_actors(), vec![Some(0), Some(0), None]);
    }

    #[test]
    fn invariant_violations_are_reported() {
        let t = Taxonomy::default();
        let mut c = clip();
        c.outlier_actor_ids.insert(1);
        assert!(c.validate(&t, None).unwrap_err().to_string().contains("both grouped"));

        let mut c = clip();
        c.outlier_actor_ids.clear();
        assert!(c.validate(&t, None).unwrap_err().to_string().contains("neither"));

        let mut c = clip();
        c.groups.push(GroupGt { member_ids: [1, 2].into_iter().collect(), activity: 0 });
        c.outlier_actor_ids.clear();
        assert!(c.validate(&t, None).unwrap_err().to_string().contains("belongs to groups"));

        let mut c = clip();
        c.groups[0].activity = 6;
        assert!(c.validate(&t, None).is_err());

        assert!(clip().validate(&t, Some(0)).is_err());

        let mut c = clip();
        c.actors[0].boxes[1].x2 = 0.05;
        assert!(c.validate(&t, None).is_err());
    }
}
