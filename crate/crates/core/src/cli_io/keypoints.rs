//! Keypoint JSON: `{"frames":[{"frame_index":0,"joints":{"neck":[x,y,c]}}]}`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_select::KeypointFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointsFile {
    pub frames: Vec<KeypointFrame>,
}

impl KeypointsFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        let mut seen = BTreeSet::new();
        for f in &file.frames {
            if !seen.insert(f.frame_index) {
                return Err(Error::Format(format!("duplicate frame_index {}", f.frame_index)));
            }
            f.validate()?;
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
