use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneClip, Taxonomy};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// On-disk dataset manifest: one JSON document `{version, taxonomy, clips}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub version: u32,
    pub taxonomy: Taxonomy,
    pub clips: Vec<SceneClip>,
}

impl Dataset {
    pub fn new(taxonomy: Taxonomy, clips: Vec<SceneClip>) -> Self {
        Dataset { version: MANIFEST_VERSION, taxonomy, clips }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        self.taxonomy.validate()?;
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.clips {
            if !ids.insert(c.clip_id.as_str()) {
                return Err(Error::Validation(format!("duplicate clip id {}", c.clip_id)));
            }
            c.validate(&self.taxonomy, None)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    fs::write(path, dataset.to_json()?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorParams};

    #[test]
    fn round_trip_ten_clips() {
        let p = GeneratorParams::default();
        let clips = (0..10).map(|s| generate_scene(s, &p).unwrap()).collect();
        let d = Dataset::new(Taxonomy::default(), clips);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        write_dataset(&d, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), d);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let d = Dataset::new(Taxonomy::default(), vec![]);
        assert_eq!(Dataset::from_json(&d.to_json().unwrap()).unwrap(), d);
    }

    #[test]
    fn overlapping_groups_rejected_on_load() {
        let p = GeneratorParams { min_groups: 2, max_groups: 2, ..Default::default() };
        let mut clip = generate_scene(4, &p).unwrap();
        let stolen = *clip.groups[1].member_ids.iter().next().unwrap();
        clip.groups[0].member_ids.insert(stolen);
        let text = Dataset::new(Taxonomy::default(), vec![clip]).to_json().unwrap();
        let err = Dataset::from_json(&text).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = Dataset::from_json("{\n  \"version\": 1,\n  \"taxonomy\": oops\n}").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }
}
