use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const CAR: u16 = 10;
pub const ROAD: u16 = 40;
pub const BUILDING: u16 = 50;
pub const MOVING_CAR: u16 = 252;

/// Which semantic ids count as moving, and which ids the augmentation uses as
/// its source (static car) and target (moving car) classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub moving: BTreeSet<u16>,
    pub car: u16,
    pub moving_car: u16,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self::semantic_kitti()
    }
}

impl LabelMap {
    pub fn semantic_kitti() -> Self {
        LabelMap {
            moving: (252..=259).collect(),
            car: CAR,
            moving_car: MOVING_CAR,
        }
    }

    pub fn is_moving(&self, id: u16) -> bool {
        self.moving.contains(&id)
    }

    /// Parses `key=value` lines: `moving=252-259,300`, `car=10`,
    /// `moving_car=252`. Keys not present keep their SemanticKITTI default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::semantic_kitti();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let id = |s: &str| s.trim().parse::<u16>().map_err(|e| err(e.to_string()));
            match key.trim() {
                "moving" => {
                    map.moving.clear();
                    for part in value.split(',').filter(|s| !s.trim().is_empty()) {
                        match part.split_once('-') {
                            Some((lo, hi)) => map.moving.extend(id(lo)?..=id(hi)?),
                            None => {
                                map.moving.insert(id(part)?);
                            }
                        }
                    }
                }
                "car" => map.car = id(value)?,
                "moving_car" => map.moving_car = id(value)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(map)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Maps SemanticKITTI moving ids to their static counterparts so semantic
/// inputs carry object class but not motion state.
pub fn static_equivalent(id: u16) -> u16 {
    match id {
        252 => 10,
        253 => 31,
        254 => 30,
        255 => 32,
        256 => 16,
        257 => 13,
        258 => 18,
        259 => 20,
        other => other,
    }
}
