//! Flat-shaded glyph renderer for the four cardinal cameras.
//!
//! Each camera stands outside one grid edge looking across the scene. A
//! cell projects to a horizontal slot `u` (left to right in the image) and a
//! depth (0 = the row nearest the camera). Glyphs shrink and rise toward the
//! horizon with depth and are lifted by the object's height.

use serde::{Deserialize, Serialize};

use super::scene::{GridScene, SceneObject, ShapeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewId {
    North,
    East,
    South,
    West,
}

impl ViewId {
    pub const ALL: [ViewId; 4] = [Self::North, Self::East, Self::South, Self::West];

    pub fn word(self) -> &'static str {
        match self {
            Self::North => "north",
            Self::East => "east",
            Self::South => "south",
            Self::West => "west",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Compass bearing of the camera position, degrees.
    pub fn azimuth_deg(self) -> f64 {
        match self {
            Self::North => 0.0,
            Self::East => 90.0,
            Self::South => 180.0,
            Self::West => 270.0,
        }
    }

    /// `(u, depth, u_extent, depth_extent)` of grid cell `(x, y)`.
    pub fn project(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        match self {
            // Looking south: west is on the right.
            Self::North => (width - 1 - x, y, width, height),
            // Looking north: east is on the right.
            Self::South => (x, height - 1 - y, width, height),
            // Looking west: north is on the right.
            Self::East => (height - 1 - y, width - 1 - x, height, width),
            // Looking east: south is on the right.
            Self::West => (y, x, height, width),
        }
    }
}

pub const CHANNELS: usize = 3;
const BACKGROUND_SKY: f32 = 0.05;
const BACKGROUND_GROUND: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewImage {
    pub view: ViewId,
    pub azimuth_deg: f64,
    pub side: usize,
    /// Channel-major `3 x side x side` intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl ViewImage {
    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.pixels[(c * self.side + row) * self.side + col]
    }
}

/// Glyph placement in pixel space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glyph {
    pub center_x: f64,
    pub center_y: f64,
    pub half: f64,
    pub depth: usize,
}

pub fn glyph_for(obj: &SceneObject, scene: &GridScene, view: ViewId, side: usize) -> Glyph {
    let (u, depth, u_ext, d_ext) = view.project(obj.x, obj.y, scene.width, scene.height);
    let s = side as f64;
    let cell = s / u_ext as f64;
    let rel_depth = depth as f64 / (d_ext.max(2) - 1) as f64;
    let scale = 1.0 - 0.5 * rel_depth;
    let half = 0.45 * cell * scale;
    let ground_y = s * (0.35 + 0.5 * (1.0 - rel_depth));
    Glyph {
        center_x: (u as f64 + 0.5) * cell,
        center_y: ground_y - half - obj.z as f64 * 0.5 * cell * scale,
        half,
        depth,
    }
}

fn covers(shape: ShapeClass, g: &Glyph, px: f64, py: f64) -> bool {
    let dx = px - g.center_x;
    let dy = py - g.center_y;
    let h = g.half;
    match shape {
        ShapeClass::Cube => dx.abs() <= h && dy.abs() <= h,
        ShapeClass::Sphere => dx * dx + dy * dy <= h * h,
        ShapeClass::Cone => dy.abs() <= h && dx.abs() <= 0.5 * (dy + h),
        ShapeClass::Cylinder => dx.abs() <= 0.6 * h && dy.abs() <= h,
    }
}

/// Renders one view and returns the per-pixel owning object index (after
/// occlusion), row-major `side x side`.
pub fn render_with_owners(
    scene: &GridScene,
    view: ViewId,
    side: usize,
) -> (ViewImage, Vec<Option<usize>>) {
    let mut pixels = vec![0.0f32; CHANNELS * side * side];
    let horizon = (side as f64 * 0.35) as usize;
    for c in 0..CHANNELS {
        for r in 0..side {
            let v = if r < horizon {
                BACKGROUND_SKY
            } else {
                BACKGROUND_GROUND
            };
            pixels[(c * side + r) * side..(c * side + r + 1) * side].fill(v);
        }
    }
    let mut owners = vec![None; side * side];
    // Painter's order: far to near, ties by object index.
    let mut order: Vec<(usize, Glyph)> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| (i, glyph_for(o, scene, view, side)))
        .collect();
    order.sort_by(|a, b| b.1.depth.cmp(&a.1.depth).then(a.0.cmp(&b.0)));
    for (idx, g) in order {
        let obj = &scene.objects[idx];
        let rgb = obj.color.rgb();
        let shade = (0.75 + 0.25 * (1.0 - g.depth as f64 / scene.height.max(scene.width) as f64)) as f32;
        let r0 = (g.center_y - g.half).floor().max(0.0) as usize;
        let r1 = ((g.center_y + g.half).ceil() as usize).min(side);
        let c0 = (g.center_x - g.half).floor().max(0.0) as usize;
        let c1 = ((g.center_x + g.half).ceil() as usize).min(side);
        for r in r0..r1 {
            for c in c0..c1 {
                if covers(obj.shape, &g, c as f64 + 0.5, r as f64 + 0.5) {
                    owners[r * side + c] = Some(idx);
                    for (ch, &val) in rgb.iter().enumerate() {
                        pixels[(ch * side + r) * side + c] = val * shade;
                    }
                }
            }
        }
    }
    let image = ViewImage {
        view,
        azimuth_deg: view.azimuth_deg(),
        side,
        pixels,
    };
    (image, owners)
}

pub fn render_views(scene: &GridScene, views: &[ViewId], side: usize) -> Vec<ViewImage> {
    views
        .iter()
        .map(|&v| render_with_owners(scene, v, side).0)
        .collect()
}
