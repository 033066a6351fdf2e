use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClipPredictions, GroupPrediction, SIZE_BUCKETS};
use crate::error::{Error, Result};
use crate::scene::ActorId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdReport {
    pub threshold: f64,
    /// Class name to AP; `null` for classes without ground truth.
    pub per_class: BTreeMap<String, Option<f64>>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub clips: usize,
    pub thresholds: Vec<ThresholdReport>,
    pub outlier_miou: f64,
    /// `G1`..`G5plus` to AP; `null` for empty buckets.
    pub size_ap: BTreeMap<String, Option<f64>>,
    pub size_map: f64,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| t.threshold == threshold).map(|t| t.map)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let all = self
            .thresholds
            .iter()
            .flat_map(|t| t.per_class.values().flatten().copied().chain([t.map]))
            .chain(self.size_ap.values().flatten().copied())
            .chain([self.outlier_miou, self.size_map]);
        for v in all {
            if !unit(v) {
                return Err(Error::Validation(format!("metric value {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["clips".to_string()];
        cols.extend(self.thresholds.iter().map(|t| format!("group_map@{}", t.threshold)));
        cols.push("outlier_miou".into());
        cols.extend(SIZE_BUCKETS.iter().map(|b| format!("{b}_ap")));
        cols.push("size_map".into());
        cols.join(",")
    }

    /// Flat row matching [`EvalReport::csv_header`]; undefined buckets are empty.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.clips.to_string()];
        cols.extend(self.thresholds.iter().map(|t| t.map.to_string()));
        cols.push(self.outlier_miou.to_string());
        cols.extend(
            SIZE_BUCKETS
                .iter()
                .map(|b| self.size_ap.get(*b).copied().flatten().map_or(String::new(), |v| v.to_string())),
        );
        cols.push(self.size_map.to_string());
        cols.join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipEntry {
    groups: Vec<GroupPrediction>,
    outliers: BTreeSet<ActorId>,
}

/// `{clip_id: {groups: [{members, activity, confidence}], outliers: [ids]}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionsFile(BTreeMap<String, ClipEntry>);

impl PredictionsFile {
    pub fn new(preds: &[ClipPredictions]) -> Result<Self> {
        let mut m = BTreeMap::new();
        for p in preds {
            let entry = ClipEntry { groups: p.groups.clone(), outliers: p.outliers.clone() };
            if m.insert(p.clip_id.clone(), entry).is_some() {
                return Err(Error::Validation(format!("duplicate clip id {}", p.clip_id)));
            }
        }
        Ok(PredictionsFile(m))
    }

    pub fn into_predictions(self) -> Vec<ClipPredictions> {
        self.0
            .into_iter()
            .map(|(clip_id, e)| ClipPredictions { clip_id, groups: e.groups, outliers: e.outliers })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for (id, e) in &self.0 {
            for g in &e.groups {
                if g.members.is_empty() || !g.confidence.is_finite() {
                    return Err(Error::Validation(format!("clip {id}: empty or unscored predicted group")));
                }
            }
        }
        Ok(())
    }
}

pub fn write_predictions(preds: &[ClipPredictions], path: &Path) -> Result<()> {
    let f = PredictionsFile::new(preds)?;
    let mut s = serde_json::to_string_pretty(&f)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<ClipPredictions>> {
    let f: PredictionsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    f.validate()?;
    Ok(f.into_predictions())
}
