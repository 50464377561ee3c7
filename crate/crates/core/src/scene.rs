//! Synthetic grid-world scenes and their per-cell feature maps.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("unknown {} `{s}`", stringify!($name).to_lowercase())),
                }
            }
        }
    };
}

attribute_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
attribute_enum!(Color { Red => "red", Green => "green", Blue => "blue", Gray => "gray", Yellow => "yellow" });
attribute_enum!(Size { Small => "small", Large => "large" });
attribute_enum!(Property { Color => "color", Shape => "shape", Size => "size" });
attribute_enum!(Relation { LeftOf => "left_of", RightOf => "right_of", Above => "above", Below => "below" });

impl Relation {
    /// Whether an object at `cell` stands in this relation to one at `anchor`.
    pub fn holds(self, cell: (usize, usize), anchor: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => cell.1 < anchor.1,
            Relation::RightOf => cell.1 > anchor.1,
            Relation::Above => cell.0 < anchor.0,
            Relation::Below => cell.0 > anchor.0,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

impl Shape {
    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl SceneObject {
    pub fn cell(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub grid_size: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    /// Checks bounds, cell uniqueness and non-emptiness.
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::Config("scene has no objects".into()));
        }
        let mut seen = vec![false; self.grid_size * self.grid_size];
        for o in &self.objects {
            if o.row >= self.grid_size || o.col >= self.grid_size {
                return Err(Error::Config(format!(
                    "object at ({}, {}) outside a {}x{} grid",
                    o.row, o.col, self.grid_size, self.grid_size
                )));
            }
            let cell = o.row * self.grid_size + o.col;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Config(format!("two objects at ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }

    pub fn cell_index(&self, o: &SceneObject) -> usize {
        o.row * self.grid_size + o.col
    }

    pub fn object_at(&self, cell: usize) -> Option<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.row * self.grid_size + o.col == cell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid_size: 5,
            min_objects: 3,
            max_objects: 8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_size * self.grid_size;
        if self.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "need 1 <= min_objects <= max_objects, got {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > cells {
            return Err(Error::Config(format!(
                "max_objects {} exceeds the {cells} grid cells",
                self.max_objects
            )));
        }
        Ok(())
    }
}

/// Samples a scene: object count uniform in `[min, max]`, cells without
/// replacement, attributes uniform. Objects are listed in row-major cell order.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = config.grid_size;
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let mut cells = index::sample(&mut rng, g * g, n).into_vec();
    cells.sort_unstable();
    let objects = cells
        .into_iter()
        .map(|cell| SceneObject {
            row: cell / g,
            col: cell % g,
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            size: Size::ALL[rng.gen_range(0..Size::ALL.len())],
        })
        .collect();
    Ok(SceneGraph {
        grid_size: g,
        objects,
    })
}

const SHAPE_OFFSET: usize = 0;
const COLOR_OFFSET: usize = SHAPE_OFFSET + 3;
const SIZE_OFFSET: usize = COLOR_OFFSET + 5;
const ROW_CHANNEL: usize = SIZE_OFFSET + 2;
const COL_CHANNEL: usize = ROW_CHANNEL + 1;

/// Channels per cell: one-hot shape, color and size, then row and column
/// scaled to `[0, 1]`.
pub const FEATURE_DIM: usize = COL_CHANNEL + 1;

/// `G × G × FEATURE_DIM` row-major feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid_size: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * FEATURE_DIM..(index + 1) * FEATURE_DIM]
    }
}

pub fn scene_features(scene: &SceneGraph) -> FeatureMap {
    let g = scene.grid_size;
    let mut data = vec![0.0; g * g * FEATURE_DIM];
    let scale = if g > 1 { (g - 1) as f64 } else { 1.0 };
    for cell in 0..g * g {
        let base = cell * FEATURE_DIM;
        data[base + ROW_CHANNEL] = (cell / g) as f64 / scale;
        data[base + COL_CHANNEL] = (cell % g) as f64 / scale;
    }
    for o in &scene.objects {
        let base = (o.row * g + o.col) * FEATURE_DIM;
        data[base + SHAPE_OFFSET + o.shape.index()] = 1.0;
        data[base + COLOR_OFFSET + o.color.index()] = 1.0;
        data[base + SIZE_OFFSET + o.size.index()] = 1.0;
    }
    FeatureMap { grid_size: g, data }
}

/// Inverse of [`scene_features`] on occupied cells.
pub fn decode_features(map: &FeatureMap) -> Result<SceneGraph> {
    let g = map.grid_size;
    let mut objects = Vec::new();
    for cell in 0..g * g {
        let f = map.cell(cell);
        let hot = |offset: usize, n: usize| -> Result<Option<usize>> {
            let ones: Vec<usize> = (0..n).filter(|i| f[offset + i] == 1.0).collect();
            match ones.as_slice() {
                [] => Ok(None),
                [i] => Ok(Some(*i)),
                _ => Err(Error::Invariant(format!("cell {cell}: block is not one-hot"))),
            }
        };
        let blocks = (
            hot(SHAPE_OFFSET, Shape::ALL.len())?,
            hot(COLOR_OFFSET, Color::ALL.len())?,
            hot(SIZE_OFFSET, Size::ALL.len())?,
        );
        match blocks {
            (None, None, None) => {}
            (Some(s), Some(c), Some(z)) => objects.push(SceneObject {
                row: cell / g,
                col: cell % g,
                shape: Shape::ALL[s],
                color: Color::ALL[c],
                size: Size::ALL[z],
            }),
            _ => {
                return Err(Error::Invariant(format!(
                    "cell {cell}: partially filled attribute blocks"
                )))
            }
        }
    }
    Ok(SceneGraph {
        grid_size: g,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_occupies_every_cell() {
        let cfg = SceneConfig {
            grid_size: 2,
            min_objects: 4,
            max_objects: 4,
        };
        for seed in 0..10 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(s.objects.len(), 4);
            s.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn too_many_objects_is_a_config_error() {
        let cfg = SceneConfig {
            grid_size: 2,
            min_objects: 1,
            max_objects: 5,
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_object_count_matches_uniform_expectation() {
        // E[uniform{3..8}] = 5.5
        let cfg = SceneConfig::default();
        let total: usize = (0..1000)
            .map(|s| generate_scene(&cfg, s).unwrap().objects.len())
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 5.5).abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn empty_cells_keep_position_channels() {
        let scene = SceneGraph {
            grid_size: 5,
            objects: vec![SceneObject {
                row: 0,
                col: 0,
                shape: Shape::Circle,
                color: Color::Red,
                size: Size::Small,
            }],
        };
        let f = scene_features(&scene);
        let first = f.cell(0);
        assert_eq!(first[SHAPE_OFFSET + Shape::Circle.index()], 1.0);
        assert_eq!(first[COLOR_OFFSET + Color::Red.index()], 1.0);
        assert_eq!(first[SIZE_OFFSET + Size::Small.index()], 1.0);
        assert_eq!(first.iter().take(ROW_CHANNEL).sum::<f64>(), 3.0);
        assert_eq!((first[ROW_CHANNEL], first[COL_CHANNEL]), (0.0, 0.0));

        let last = f.cell(24);
        assert!(last[..ROW_CHANNEL].iter().all(|v| *v == 0.0));
        assert_eq!((last[ROW_CHANNEL], last[COL_CHANNEL]), (1.0, 1.0));
        let mid = f.cell(7);
        assert_eq!((mid[ROW_CHANNEL], mid[COL_CHANNEL]), (0.25, 0.5));
    }

    #[test]
    fn features_round_trip() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(decode_features(&scene_features(&s)).unwrap(), s);
        }
    }

    #[test]
    fn relations() {
        assert!(Relation::LeftOf.holds((3, 0), (0, 2)));
        assert!(!Relation::LeftOf.holds((0, 2), (0, 2)));
        assert!(Relation::Below.holds((4, 0), (1, 4)));
        assert!(Relation::Above.holds((0, 4), (1, 0)));
        assert!(Relation::RightOf.holds((0, 4), (1, 0)));
    }
}
