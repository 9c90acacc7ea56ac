//! Facial component boxes and landmark points.
//!
//! Landmarks are ingested from JSON files next to the images; no detector is
//! bundled. A file holds one square box per component plus an optional point
//! list used by the landmark-distance metric:
//!
//! ```json
//! {
//!   "left_eye":  [cx, cy, size],
//!   "right_eye": [cx, cy, size],
//!   "nose":      [cx, cy, size],
//!   "mouth":     [cx, cy, size],
//!   "points":    [[x, y], ...]
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Facial components, in the fixed order used when pasting features back.
pub const COMPONENTS: [Component; 4] = [
    Component::LeftEye,
    Component::RightEye,
    Component::Nose,
    Component::Mouth,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::LeftEye => "left_eye",
            Component::RightEye => "right_eye",
            Component::Nose => "nose",
            Component::Mouth => "mouth",
        }
    }
}

/// Axis-aligned square box around one facial component, in pixel units of
/// the full-resolution image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentBox {
    pub center_x: f64,
    pub center_y: f64,
    /// Side length in pixels; a multiple of the deepest feature scale.
    pub size: usize,
}

impl ComponentBox {
    /// Top-left corner of the box.
    pub fn origin(&self) -> (f64, f64) {
        (
            self.center_x - self.size as f64 / 2.0,
            self.center_y - self.size as f64 / 2.0,
        )
    }
}

/// The four component boxes for one face, plus optional metric points.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    boxes: [ComponentBox; 4],
    pub points: Option<Vec<[f64; 2]>>,
}

/// Deepest feature scale the restorer uses; box sizes are rounded up to a
/// multiple of this so every scale sees an integer crop size.
pub const DEEPEST_SCALE: usize = 4;

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

impl LandmarkSet {
    /// Validates and normalizes raw boxes for an `height`x`width` image:
    /// sizes are rounded up to a multiple of [`DEEPEST_SCALE`] and centers
    /// clamped so each box lies fully inside the image.
    pub fn new(
        height: usize,
        width: usize,
        raw: [(Component, ComponentBox); 4],
        points: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let mut by_component: BTreeMap<Component, ComponentBox> = BTreeMap::new();
        for (c, b) in raw {
            if b.size == 0 {
                return Err(Error::Domain(format!("{} box has size 0", c.name())));
            }
            let size = round_up(b.size, DEEPEST_SCALE);
            if size > width || size > height {
                return Err(Error::Size(format!(
                    "{} box of size {} does not fit a {}x{} image",
                    c.name(),
                    size,
                    height,
                    width
                )));
            }
            let half = size as f64 / 2.0;
            let cx = b.center_x.max(half).min(width as f64 - half);
            let cy = b.center_y.max(half).min(height as f64 - half);
            by_component.insert(
                c,
                ComponentBox {
                    center_x: cx,
                    center_y: cy,
                    size,
                },
            );
        }
        if by_component.len() != 4 {
            return Err(Error::Data("landmark set must cover all 4 components".into()));
        }
        let boxes = [
            by_component[&Component::LeftEye],
            by_component[&Component::RightEye],
            by_component[&Component::Nose],
            by_component[&Component::Mouth],
        ];
        Ok(Self { boxes, points })
    }

    pub fn get(&self, c: Component) -> ComponentBox {
        match c {
            Component::LeftEye => self.boxes[0],
            Component::RightEye => self.boxes[1],
            Component::Nose => self.boxes[2],
            Component::Mouth => self.boxes[3],
        }
    }

    pub fn set(&mut self, c: Component, b: ComponentBox) {
        match c {
            Component::LeftEye => self.boxes[0] = b,
            Component::RightEye => self.boxes[1] = b,
            Component::Nose => self.boxes[2] = b,
            Component::Mouth => self.boxes[3] = b,
        }
    }

    /// A canonical layout (eyes / nose / mouth at typical face positions)
    /// for an `height`x`width` face crop, used by fixtures and tests.
    pub fn canonical(height: usize, width: usize) -> Result<Self> {
        let s = round_up((width / 4).max(DEEPEST_SCALE), DEEPEST_SCALE);
        let b = |fx: f64, fy: f64| ComponentBox {
            center_x: fx * width as f64,
            center_y: fy * height as f64,
            size: s,
        };
        Self::new(
            height,
            width,
            [
                (Component::LeftEye, b(0.30, 0.35)),
                (Component::RightEye, b(0.70, 0.35)),
                (Component::Nose, b(0.50, 0.55)),
                (Component::Mouth, b(0.50, 0.78)),
            ],
            None,
        )
    }

    pub fn load(path: &Path, height: usize, width: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: LandmarkFile = serde_json::from_str(&text)?;
        file.into_set(height, width)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = LandmarkFile::from_set(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkFile {
    left_eye: [f64; 3],
    right_eye: [f64; 3],
    nose: [f64; 3],
    mouth: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<Vec<[f64; 2]>>,
}

impl LandmarkFile {
    fn into_set(self, height: usize, width: usize) -> Result<LandmarkSet> {
        let parse = |c: Component, v: [f64; 3]| -> Result<(Component, ComponentBox)> {
            if !v.iter().all(|x| x.is_finite()) || v[2] <= 0.0 {
                return Err(Error::Data(format!("invalid {} box {:?}", c.name(), v)));
            }
            Ok((
                c,
                ComponentBox {
                    center_x: v[0],
                    center_y: v[1],
                    size: v[2].round() as usize,
                },
            ))
        };
        LandmarkSet::new(
            height,
            width,
            [
                parse(Component::LeftEye, self.left_eye)?,
                parse(Component::RightEye, self.right_eye)?,
                parse(Component::Nose, self.nose)?,
                parse(Component::Mouth, self.mouth)?,
            ],
            self.points,
        )
    }

    fn from_set(set: &LandmarkSet) -> Self {
        let b = |c: Component| {
            let v = set.get(c);
            [v.center_x, v.center_y, v.size as f64]
        };
        LandmarkFile {
            left_eye: b(Component::LeftEye),
            right_eye: b(Component::RightEye),
            nose: b(Component::Nose),
            mouth: b(Component::Mouth),
            points: set.points.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_round_up_and_centers_clamp() {
        let set = LandmarkSet::new(
            32,
            32,
            [
                (
                    Component::LeftEye,
                    ComponentBox { center_x: 1.0, center_y: 1.0, size: 6 },
                ),
                (
                    Component::RightEye,
                    ComponentBox { center_x: 31.0, center_y: 2.0, size: 8 },
                ),
                (
                    Component::Nose,
                    ComponentBox { center_x: 16.0, center_y: 18.0, size: 8 },
                ),
                (
                    Component::Mouth,
                    ComponentBox { center_x: 16.0, center_y: 26.0, size: 8 },
                ),
            ],
            None,
        )
        .unwrap();
        let le = set.get(Component::LeftEye);
        assert_eq!(le.size, 8); // 6 rounded up to a multiple of 4
        assert_eq!(le.origin(), (0.0, 0.0)); // clamped inside
        let re = set.get(Component::RightEye);
        assert_eq!(re.center_x, 28.0);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        let mut set = LandmarkSet::canonical(64, 64).unwrap();
        set.points = Some(vec![[3.0, 4.0], [10.0, 12.0]]);
        set.save(&path).unwrap();
        let back = LandmarkSet::load(&path, 64, 64).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn oversized_box_is_an_error() {
        let b = ComponentBox { center_x: 4.0, center_y: 4.0, size: 64 };
        let r = LandmarkSet::new(
            8,
            8,
            [
                (Component::LeftEye, b),
                (Component::RightEye, b),
                (Component::Nose, b),
                (Component::Mouth, b),
            ],
            None,
        );
        assert!(r.is_err());
    }
}
