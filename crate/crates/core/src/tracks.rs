//! Per-object bounding-box tracks and the `tracks.json` file format.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box covering the half-open pixel region `[x0,x1) x [y0,y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl From<[i64; 4]> for BBox {
    fn from(v: [i64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    pub fn translated(&self, dx: i64, dy: i64) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0) * h.max(0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Check `0 <= x0 < x1 <= width` and `0 <= y0 < y1 <= height`.
    pub fn check(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        if self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(format!("empty or inverted box {:?}", <[i64; 4]>::from(*self)));
        }
        if self.x0 < 0 || self.y0 < 0 || self.x1 > width as i64 || self.y1 > height as i64 {
            return Err(format!(
                "box {:?} outside {width}x{height} frame",
                <[i64; 4]>::from(*self)
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedObject {
    pub id: i64,
    /// One entry per frame; `None` where the object was not detected.
    pub boxes: Vec<Option<BBox>>,
}

/// Locations of every object in every frame of a video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxTrackSet {
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<TrackedObject>,
}

impl BoxTrackSet {
    pub fn new(num_frames: usize, width: usize, height: usize, objects: Vec<TrackedObject>) -> Result<Self> {
        let t = Self {
            num_frames,
            width,
            height,
            objects,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn empty(num_frames: usize, width: usize, height: usize) -> Self {
        Self {
            num_frames,
            width,
            height,
            objects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for obj in &self.objects {
            if !ids.insert(obj.id) {
                return Err(Error::Validation(format!("duplicate object id {}", obj.id)));
            }
            if obj.boxes.len() != self.num_frames {
                return Err(Error::Validation(format!(
                    "object {} has {} boxes but num_frames is {}",
                    obj.id,
                    obj.boxes.len(),
                    self.num_frames
                )));
            }
            for (frame, b) in obj.boxes.iter().enumerate() {
                if let Some(b) = b {
                    b.check(self.width, self.height).map_err(|msg| {
                        Error::Validation(format!("object {} frame {frame}: {msg}", obj.id))
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Boxes present in frame `t`, paired with their object id.
    pub fn frame_boxes(&self, t: usize) -> Vec<(i64, BBox)> {
        self.objects
            .iter()
            .filter_map(|o| o.boxes.get(t).copied().flatten().map(|b| (o.id, b)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: BoxTrackSet = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }
}

pub fn load_tracks(path: &Path) -> Result<BoxTrackSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BoxTrackSet::from_json(&text)
}

pub fn save_tracks(t: &BoxTrackSet, path: &Path) -> Result<()> {
    t.validate()?;
    fs::write(path, t.to_json()?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object() -> BoxTrackSet {
        BoxTrackSet::new(
            2,
            8,
            8,
            vec![TrackedObject {
                id: 0,
                boxes: vec![Some(BBox::new(0, 0, 4, 4)), Some(BBox::new(2, 0, 6, 4))],
            }],
        )
        .unwrap()
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.json");
        let t = one_object();
        save_tracks(&t, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let back = load_tracks(&path).unwrap();
        assert_eq!(back, t);
        save_tracks(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn schema_uses_arrays_and_null() {
        let text = r#"{"num_frames":2,"width":8,"height":8,
            "objects":[{"id":3,"boxes":[[0,0,4,4],null]}]}"#;
        let t = BoxTrackSet::from_json(text).unwrap();
        assert_eq!(t.objects[0].boxes[1], None);
        let json: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(json["objects"][0]["boxes"][0], serde_json::json!([0, 0, 4, 4]));
        assert!(json["objects"][0]["boxes"][1].is_null());
    }

    #[test]
    fn empty_object_list_is_valid() {
        let t = BoxTrackSet::from_json(r#"{"num_frames":4,"width":8,"height":8,"objects":[]}"#);
        assert!(t.unwrap().objects.is_empty());
    }

    #[test]
    fn inverted_box_names_object_and_frame() {
        let text = r#"{"num_frames":2,"width":8,"height":8,
            "objects":[{"id":7,"boxes":[[0,0,4,4],[5,0,5,4]]}]}"#;
        let err = BoxTrackSet::from_json(text).unwrap_err().to_string();
        assert!(err.contains("object 7"), "{err}");
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn length_and_id_checks() {
        let mut t = one_object();
        t.objects[0].boxes.pop();
        assert!(t.validate().is_err());
        let mut t = one_object();
        t.objects.push(t.objects[0].clone());
        assert!(t.validate().is_err());
    }

    #[test]
    fn iou_arithmetic() {
        let a = BBox::new(0, 0, 8, 8);
        assert_eq!(a.iou(&a), 1.0);
        // shifted by half the width: overlap 4x8=32, union 96
        assert!((a.iou(&a.translated(4, 0)) - 32.0 / 96.0).abs() < 1e-12);
        assert_eq!(a.iou(&a.translated(8, 0)), 0.0);
    }
}
