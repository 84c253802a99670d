use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Scene, SplitIndices, FRAME_DT};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DEDDATA\0";

/// A self-describing collection of scenes, optionally carrying a split.
///
/// Stored as an 8-byte magic tag followed by the bincode encoding of the
/// struct, so save/load round-trips every float bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    /// Where the scenes came from: `ngsim`, `synth:lane_change`, ...
    pub source: String,
    pub dt: f64,
    pub hist_len: usize,
    pub fut_len: usize,
    pub scenes: Vec<Scene>,
    pub split: Option<SplitIndices>,
}

impl Dataset {
    pub fn new(source: impl Into<String>, hist_len: usize, fut_len: usize, scenes: Vec<Scene>) -> Self {
        Self {
            version: DATASET_VERSION,
            source: source.into(),
            dt: FRAME_DT,
            hist_len,
            fut_len,
            scenes,
            split: None,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.scenes.iter().map(Scene::num_agents).sum()
    }

    /// The scenes of the stored split.
    pub fn split_scenes(&self) -> Result<DatasetSplit> {
        let idx = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Data(format!("dataset {:?} has not been split", self.source)))?;
        DatasetSplit::from_indices(&self.scenes, idx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "dataset version {} is not supported (expected {DATASET_VERSION})",
                self.version
            )));
        }
        for scene in &self.scenes {
            scene.validate(self.hist_len, self.fut_len)?;
        }
        if let Some(s) = &self.split {
            let n = self.scenes.len();
            if s.train.iter().chain(&s.val).chain(&s.test).any(|&i| i >= n) {
                return Err(Error::Data("split refers to a missing scene".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        bincode::serialize_into(&mut out, self).expect("in-memory serialization");
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let body = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| format_err("not a dataset file".into()))?;
        let ds: Dataset = bincode::deserialize(body).map_err(|e| format_err(e.to_string()))?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scenarios, ScenarioKind};

    fn sample() -> Dataset {
        let scenes = synth_scenarios(ScenarioKind::LaneChange, 12, 4).unwrap();
        let mut ds = Dataset::new("synth:lane_change", 15, 25, scenes);
        ds.split = Some(SplitIndices::new(12, 1).unwrap());
        ds
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ds = sample();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = sample();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn rejects_foreign_bytes() {
        let err = Dataset::from_bytes(b"hello world", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bytes = sample().to_bytes();
        bytes.truncate(40);
        assert!(matches!(
            Dataset::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn split_scenes_follow_indices() {
        let ds = sample();
        let split = ds.split_scenes().unwrap();
        let idx = ds.split.as_ref().unwrap();
        assert_eq!(split.train.len(), idx.train.len());
        assert_eq!(split.test[0], ds.scenes[idx.test[0]]);
    }
}
