use crate::error::{PmnError, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub categories: usize,
    pub attributes: usize,
    pub max_entities: usize,
    /// Side of the position grid; cells are numbered row-major from the top left.
    pub grid: usize,
    pub feature_dim: usize,
    /// Seed of the fixed category/attribute/position embeddings.
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            categories: 6,
            attributes: 3,
            max_entities: 12,
            grid: 4,
            feature_dim: 64,
            world_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn attribute_sets(&self) -> usize {
        1 << self.attributes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(PmnError::Config {
                path: "world".into(),
                msg,
            })
        };
        if self.categories < 2 || self.attributes < 2 {
            return bad("need at least 2 categories and 2 attributes".into());
        }
        if self.attributes > 8 {
            return bad("at most 8 attributes".into());
        }
        if self.grid < 2 {
            return bad("grid must be at least 2".into());
        }
        if self.max_entities == 0 || self.max_entities > self.cells() {
            return bad(format!("max_entities must be in 1..={}", self.cells()));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub category: usize,
    /// Bit `a` set when attribute `a` is present.
    pub attributes: u32,
    pub cell: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub entities: Vec<Entity>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity_at(&self, cell: usize) -> Option<usize> {
        self.entities.iter().position(|e| e.cell == cell)
    }
}

/// Deterministic in `seed`: entity count uniform in `1..=max_entities`, each
/// entity in its own grid cell, position jittered inside the cell.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=cfg.max_entities);
    let mut cells: Vec<usize> = (0..cfg.cells()).collect();
    cells.shuffle(&mut rng);
    let g = cfg.grid as f64;
    let entities = cells[..n]
        .iter()
        .map(|&cell| {
            let (row, col) = (cell / cfg.grid, cell % cfg.grid);
            let category = rng.gen_range(0..cfg.categories);
            let mut attributes = 0u32;
            for a in 0..cfg.attributes {
                if rng.gen_bool(0.5) {
                    attributes |= 1 << a;
                }
            }
            Entity {
                category,
                attributes,
                cell,
                x: (col as f64 + rng.gen_range(0.1..0.9)) / g,
                y: (row as f64 + rng.gen_range(0.1..0.9)) / g,
            }
        })
        .collect();
    Scene { seed, entities }
}

/// Spatial relations between a target and a reference entity, on grid cells
/// (row 0 at the top).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Near,
    Far,
    SameRow,
    SameColumn,
}

pub const RELATIONS: [Relation; 8] = [
    Relation::LeftOf,
    Relation::RightOf,
    Relation::Above,
    Relation::Below,
    Relation::Near,
    Relation::Far,
    Relation::SameRow,
    Relation::SameColumn,
];

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Near => "near",
            Relation::Far => "far",
            Relation::SameRow => "same-row",
            Relation::SameColumn => "same-column",
        }
    }

    /// Whether `target` stands in this relation to `reference`.
    pub fn holds(self, target: (f64, f64), reference: (f64, f64), grid: usize) -> bool {
        let cell = |(x, y): (f64, f64)| {
            let g = grid as f64;
            let col = ((x * g).floor() as i64).clamp(0, grid as i64 - 1);
            let row = ((y * g).floor() as i64).clamp(0, grid as i64 - 1);
            (row, col)
        };
        let (tr, tc) = cell(target);
        let (rr, rc) = cell(reference);
        let cheb = (tr - rr).abs().max((tc - rc).abs());
        match self {
            Relation::LeftOf => tc < rc,
            Relation::RightOf => tc > rc,
            Relation::Above => tr < rr,
            Relation::Below => tr > rr,
            Relation::Near => cheb <= 1,
            Relation::Far => cheb >= 2,
            Relation::SameRow => tr == rr,
            Relation::SameColumn => tc == rc,
        }
    }
}

/// Entities (other than `reference`) standing in relation `rel` to it.
pub fn related(scene: &Scene, rel: Relation, reference: usize, grid: usize) -> Vec<usize> {
    let r = &scene.entities[reference];
    scene
        .entities
        .iter()
        .enumerate()
        .filter(|(j, e)| *j != reference && rel.holds((e.x, e.y), (r.x, r.y), grid))
        .map(|(j, _)| j)
        .collect()
}

/// Fixed random embeddings shared by every scene of a world.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    category: Vec<Vec<f64>>,
    attribute: Vec<Vec<f64>>,
    /// Rows: one per cell, then x, then y.
    position: Vec<Vec<f64>>,
}

/// Rendered entity features and positions of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `[N, d]`
    pub x: Tensor,
    /// `[N, 2]`
    pub boxes: Tensor,
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let d = cfg.feature_dim;
        let mut table = |rows: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| {
                    (0..d)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        };
        let category = table(cfg.categories, 1.0);
        let attribute = table(cfg.attributes, 1.0);
        let position = table(cfg.cells() + 2, 1.0);
        Ok(World {
            cfg: cfg.clone(),
            category,
            attribute,
            position,
        })
    }

    /// `X_i = E_cat + Σ E_att + P·[cell one-hot; x; y] + σ·noise`, with noise
    /// drawn from a stream keyed by the scene seed.
    pub fn render(&self, scene: &Scene, sigma: f64) -> Rendered {
        let d = self.cfg.feature_dim;
        let n = scene.len();
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(1);
        let mut x = Vec::with_capacity(n * d);
        let mut boxes = Vec::with_capacity(2 * n);
        let cells = self.cfg.cells();
        for e in &scene.entities {
            for k in 0..d {
                let mut v = self.category[e.category][k] + self.position[e.cell][k];
                for a in 0..self.cfg.attributes {
                    if e.attributes & (1 << a) != 0 {
                        v += self.attribute[a][k];
                    }
                }
                v += e.x * self.position[cells][k] + e.y * self.position[cells + 1][k];
                x.push(v);
            }
            boxes.push(e.x);
            boxes.push(e.y);
        }
        if sigma > 0.0 {
            for v in &mut x {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Rendered {
            x: Tensor::new(vec![n, d], x).expect("render shape"),
            boxes: Tensor::new(vec![n, 2], boxes).expect("render shape"),
        }
    }
}
