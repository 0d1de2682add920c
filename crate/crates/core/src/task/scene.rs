use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Cube,
    Sphere,
    Cone,
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorClass {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Cube, Self::Sphere, Self::Cone, Self::Cylinder];

    pub fn word(self) -> &'static str {
        match self {
            Self::Cube => "cube",
            Self::Sphere => "sphere",
            Self::Cone => "cone",
            Self::Cylinder => "cylinder",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl ColorClass {
    pub const ALL: [ColorClass; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [0.95, 0.15, 0.1],
            Self::Green => [0.1, 0.85, 0.2],
            Self::Blue => [0.15, 0.25, 0.95],
            Self::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

/// One object on the grid. `x` grows eastward, `y` grows southward (row 0
/// is the north edge), `z` is a small integer height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeClass,
    pub color: ColorClass,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl SceneObject {
    pub fn name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridScene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
}

pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Heights are drawn from `0..=max_z`.
    pub max_z: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            min_objects: 2,
            max_objects: 4,
            max_z: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.width * self.height;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InfeasibleConfig("empty grid".into()));
        }
        if self.max_objects > cells {
            return Err(Error::InfeasibleConfig(format!(
                "{} objects cannot fit on {} cells",
                self.max_objects, cells
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InfeasibleConfig("min_objects > max_objects".into()));
        }
        if self.min_objects < MIN_OBJECTS || self.max_objects > MAX_OBJECTS {
            return Err(Error::InfeasibleConfig(format!(
                "object count must lie in {MIN_OBJECTS}..={MAX_OBJECTS}"
            )));
        }
        Ok(())
    }
}

impl GridScene {
    pub fn find(&self, shape: ShapeClass, color: ColorClass) -> Option<usize> {
        self.objects
            .iter()
            .position(|o| o.shape == shape && o.color == color)
    }

    /// Checks the scene invariants: distinct cells, distinct
    /// (shape, color) identities, object count bounds.
    pub fn is_valid(&self) -> bool {
        let n = self.objects.len();
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&n) {
            return false;
        }
        for i in 0..n {
            let a = &self.objects[i];
            if a.x >= self.width || a.y >= self.height {
                return false;
            }
            for b in &self.objects[i + 1..] {
                if (a.x, a.y) == (b.x, b.y) || (a.shape, a.color) == (b.shape, b.color) {
                    return false;
                }
            }
        }
        true
    }
}

/// Samples a scene; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<GridScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let mut cells: Vec<(usize, usize)> = (0..config.height)
        .flat_map(|y| (0..config.width).map(move |x| (x, y)))
        .collect();
    cells.shuffle(&mut rng);
    let mut identities: Vec<(ShapeClass, ColorClass)> = ShapeClass::ALL
        .iter()
        .flat_map(|&s| ColorClass::ALL.iter().map(move |&c| (s, c)))
        .collect();
    identities.shuffle(&mut rng);
    let objects = (0..n)
        .map(|i| {
            let (x, y) = cells[i];
            let (shape, color) = identities[i];
            SceneObject {
                shape,
                color,
                x,
                y,
                z: rng.gen_range(0..=config.max_z),
            }
        })
        .collect();
    Ok(GridScene {
        width: config.width,
        height: config.height,
        objects,
    })
}
