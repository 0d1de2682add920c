//! Geometry teacher: per-patch target features that encode the world-frame
//! position and identity of the object dominating each image patch.
//!
//! Layout of one patch feature (width `6 * octaves + 16`, 64 by default):
//!
//! ```text
//! [ sin(w_j x), cos(w_j x) ]_j  [ sin(w_j y), cos(w_j y) ]_j  [ sin(w_j z), cos(w_j z) ]_j  onehot(shape * 4 + color)
//! ```
//!
//! with `w_j = base_frequency * 2^j`, `j = 0..octaves`, and `(x, y, z)` the
//! object's grid cell and height. The raw vector (all zero for an empty
//! patch) is mapped to `GEOMETRY_SCALE * raw + b`, where `b` is the constant
//! vector of norm `BASELINE_NORM`; so an empty patch yields exactly `b`.

use serde::{Deserialize, Serialize};
use think3d_autograd::Tensor;

use crate::error::{Error, Result};
use crate::task::render::{render_with_owners, ViewId, ViewImage};
use crate::task::scene::{GridScene, SceneObject};

pub const GEOMETRY_SCALE: f64 = 0.5;
pub const BASELINE_NORM: f64 = 0.5;
pub const IDENTITY_WIDTH: usize = 16;
/// Lower bound on the distance between the features of two objects with the
/// same identity at distinct cells of an 8x8 grid with heights 0..4 under
/// the default spec (the exhaustive minimum is about 1.84).
pub const INJECTIVITY_FLOOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub patch_size: usize,
    pub octaves: usize,
    /// Lowest frequency, radians per grid cell.
    pub base_frequency: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            patch_size: 8,
            octaves: 8,
            base_frequency: 0.25,
        }
    }
}

impl TeacherSpec {
    pub fn dim(&self) -> usize {
        6 * self.octaves + IDENTITY_WIDTH
    }

    pub fn baseline_value(&self) -> f64 {
        BASELINE_NORM / (self.dim() as f64).sqrt()
    }

    /// Feature for an empty patch.
    pub fn baseline(&self) -> Vec<f64> {
        vec![self.baseline_value(); self.dim()]
    }

    /// Feature of a patch dominated by `obj`.
    pub fn encode_object(&self, obj: &SceneObject) -> Vec<f64> {
        let b = self.baseline_value();
        let mut out = Vec::with_capacity(self.dim());
        for coord in [obj.x as f64, obj.y as f64, obj.z as f64] {
            for j in 0..self.octaves {
                let w = self.base_frequency * (1u64 << j) as f64;
                out.push(GEOMETRY_SCALE * (w * coord).sin() + b);
                out.push(GEOMETRY_SCALE * (w * coord).cos() + b);
            }
        }
        let hot = obj.shape.index() * 4 + obj.color.index();
        for i in 0..IDENTITY_WIDTH {
            out.push(if i == hot { GEOMETRY_SCALE + b } else { b });
        }
        out
    }
}

/// `n_views x patches x dim` features, stored as `f32` like the pixels so
/// they round-trip through the dataset file losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherFeatures {
    pub n_views: usize,
    pub patches: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TeacherFeatures {
    pub fn patch(&self, view: usize, patch: usize) -> &[f32] {
        let off = (view * self.patches + patch) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// `(n_views * patches) x dim` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.n_views * self.patches,
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Index of the object covering the most pixels of each patch (ties to the
/// lower object index), row-major over the patch grid.
pub fn dominant_objects(owners: &[Option<usize>], side: usize, patch: usize, n_objects: usize) -> Vec<Option<usize>> {
    let per_row = side / patch;
    let mut out = Vec::with_capacity(per_row * per_row);
    let mut counts = vec![0usize; n_objects];
    for pr in 0..per_row {
        for pc in 0..per_row {
            counts.iter_mut().for_each(|c| *c = 0);
            for r in pr * patch..(pr + 1) * patch {
                for c in pc * patch..(pc + 1) * patch {
                    if let Some(o) = owners[r * side + c] {
                        counts[o] += 1;
                    }
                }
            }
            let mut best: Option<usize> = None;
            for (i, &c) in counts.iter().enumerate() {
                if c > 0 && best.map_or(true, |b| c > counts[b]) {
                    best = Some(i);
                }
            }
            out.push(best);
        }
    }
    out
}

/// Computes teacher features for `views`, which must be renders of `scene`.
/// `requested` restricts and orders the output; `None` means all of `views`.
pub fn teacher_features(
    scene: &GridScene,
    views: &[ViewImage],
    requested: Option<&[ViewId]>,
    spec: &TeacherSpec,
) -> Result<TeacherFeatures> {
    let order: Vec<&ViewImage> = match requested {
        None => views.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                views
                    .iter()
                    .find(|v| v.view == *id)
                    .ok_or_else(|| Error::ViewSceneMismatch(id.word().into()))
            })
            .collect::<Result<_>>()?,
    };
    let side = order.first().map_or(0, |v| v.side);
    if side == 0 || side % spec.patch_size != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image side {side} not divisible by patch size {}",
            spec.patch_size
        )));
    }
    let patches = (side / spec.patch_size).pow(2);
    let dim = spec.dim();
    let mut data = Vec::with_capacity(order.len() * patches * dim);
    for view in &order {
        let (rendered, owners) = render_with_owners(scene, view.view, view.side);
        if rendered.pixels != view.pixels {
            return Err(Error::ViewSceneMismatch(view.view.word().into()));
        }
        for dom in dominant_objects(&owners, side, spec.patch_size, scene.objects.len()) {
            let f = match dom {
                Some(i) => spec.encode_object(&scene.objects[i]),
                None => spec.baseline(),
            };
            data.extend(f.into_iter().map(|v| v as f32));
        }
    }
    Ok(TeacherFeatures {
        n_views: order.len(),
        patches,
        dim,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::render::render_views;
    use crate::task::scene::{generate_scene, ColorClass, SceneConfig, ShapeClass};

    fn scene() -> GridScene {
        generate_scene(11, &SceneConfig::default()).unwrap()
    }

    #[test]
    fn shapes_and_norm_bounds() {
        let s = scene();
        let views = render_views(&s, &ViewId::ALL, 32);
        let spec = TeacherSpec::default();
        let f = teacher_features(&s, &views, None, &spec).unwrap();
        assert_eq!((f.n_views, f.patches, f.dim), (4, 16, 64));
        for v in 0..4 {
            for p in 0..16 {
                let n = f.patch(v, p).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                assert!(n > 0.0 && n <= 10.0, "norm {n}");
            }
        }
    }

    #[test]
    fn empty_patch_is_baseline() {
        let s = scene();
        let views = render_views(&s, &[ViewId::North], 32);
        let spec = TeacherSpec::default();
        let f = teacher_features(&s, &views, None, &spec).unwrap();
        // The top-left patch lies above the horizon band where no glyph of a
        // ground-level object reaches at this grid size.
        let (_, owners) = render_with_owners(&s, ViewId::North, 32);
        let dom = dominant_objects(&owners, 32, 8, s.objects.len());
        let empty = dom.iter().position(Option::is_none).expect("some empty patch");
        let base: Vec<f32> = spec.baseline().iter().map(|&v| v as f32).collect();
        assert_eq!(f.patch(0, empty), base.as_slice());
    }

    #[test]
    fn missing_view_is_mismatch() {
        let s = scene();
        let views = render_views(&s, &[ViewId::North, ViewId::East], 32);
        let err = teacher_features(&s, &views, Some(&[ViewId::South]), &TeacherSpec::default());
        assert!(matches!(err, Err(Error::ViewSceneMismatch(_))));
        let mut other = s.clone();
        other.objects[0].z = (other.objects[0].z + 1) % 4;
        let err = teacher_features(&other, &views, None, &TeacherSpec::default());
        assert!(matches!(err, Err(Error::ViewSceneMismatch(_))));
    }

    #[test]
    fn identity_slot() {
        let spec = TeacherSpec::default();
        let obj = SceneObject {
            shape: ShapeClass::Cone,
            color: ColorClass::Blue,
            x: 1,
            y: 2,
            z: 3,
        };
        let f = spec.encode_object(&obj);
        let hot = 48 + ShapeClass::Cone.index() * 4 + ColorClass::Blue.index();
        assert!((f[hot] - (GEOMETRY_SCALE + spec.baseline_value())).abs() < 1e-15);
    }
}
