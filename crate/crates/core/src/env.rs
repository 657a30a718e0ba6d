//! Block-pushing grid world.
//!
//! Objects sit on distinct cells and carry distinct weight ranks. Pushing an
//! object moves it one cell; if that cell holds a lighter object, the lighter
//! one is displaced one cell further. Anything else (heavier or equal
//! blocker, a second object behind the pushed one, leaving the grid) leaves
//! the world unchanged.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CELL_PX: usize = 10;
pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 7;

/// Palette for the unobserved setting; one entry per possible object.
pub const PALETTE: [[f32; 3]; MAX_OBJECTS] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
];

/// Hue of every object in the observed setting, scaled by weight.
pub const OBSERVED_HUE: [f32; 3] = [1.0, 0.6, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::input(format!("direction index {i} out of range")))
    }

    /// `(dcol, drow)`; rows grow downward.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Observed,
    Unobserved,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(Mode::Observed),
            "unobserved" => Ok(Mode::Unobserved),
            _ => Err(Error::input(format!("unknown mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Observed => "observed",
            Mode::Unobserved => "unobserved",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhysObject {
    pub id: usize,
    /// `(col, row)`.
    pub pos: (i32, i32),
    /// Rank; heavier objects push lighter ones.
    pub weight: u32,
    pub color_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvAction {
    pub target: usize,
    pub dir: Direction,
}

impl EnvAction {
    pub fn new(target: usize, dir: Direction) -> Self {
        EnvAction { target, dir }
    }

    /// Index into the `objects * 4` one-hot action space.
    pub fn index(self) -> usize {
        self.target * 4 + self.dir.index()
    }

    pub fn from_index(i: usize) -> Self {
        EnvAction {
            target: i / 4,
            dir: Direction::ALL[i % 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<PhysObject>,
    pub palette_seed: u64,
}

/// Result of resolving a push before it is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Blocked,
    Free,
    Push(usize),
}

impl GridWorld {
    /// World whose object `i` has weight `i + 1`, with colors assigned for `mode`.
    pub fn new(width: usize, height: usize, positions: &[(i32, i32)], mode: Mode, palette_seed: u64) -> Result<Self> {
        let weights: Vec<u32> = (1..=positions.len() as u32).collect();
        Self::with_weights(width, height, positions, &weights, mode, palette_seed)
    }

    pub fn with_weights(
        width: usize,
        height: usize,
        positions: &[(i32, i32)],
        weights: &[u32],
        mode: Mode,
        palette_seed: u64,
    ) -> Result<Self> {
        if positions.len() != weights.len() {
            return Err(Error::input("one weight per object required"));
        }
        if positions.len() > MAX_OBJECTS {
            return Err(Error::config(format!("at most {MAX_OBJECTS} objects are supported")));
        }
        let colors = color_ids(positions.len(), mode, palette_seed);
        let objects = positions
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(id, (&pos, &weight))| PhysObject {
                id,
                pos,
                weight,
                color_id: colors[id],
            })
            .collect();
        let w = GridWorld {
            width,
            height,
            objects,
            palette_seed,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if !self.in_bounds(o.pos) {
                return Err(Error::input(format!("object {i} at {:?} is off the grid", o.pos)));
            }
            if self.objects[..i].iter().any(|p| p.pos == o.pos) {
                return Err(Error::input(format!("two objects share cell {:?}", o.pos)));
            }
            if self.objects[..i].iter().any(|p| p.weight == o.weight) {
                return Err(Error::input("object weights must be distinct"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn in_bounds(&self, (c, r): (i32, i32)) -> bool {
        c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height
    }

    pub fn occupant(&self, pos: (i32, i32)) -> Option<usize> {
        self.objects.iter().position(|o| o.pos == pos)
    }

    fn resolve(&self, action: EnvAction) -> Result<Outcome> {
        let pusher = self.objects.get(action.target).ok_or_else(|| {
            Error::input(format!(
                "action target {} out of range for {} objects",
                action.target,
                self.objects.len()
            ))
        })?;
        let (dc, dr) = action.dir.delta();
        let dest = (pusher.pos.0 + dc, pusher.pos.1 + dr);
        if !self.in_bounds(dest) {
            return Ok(Outcome::Blocked);
        }
        let Some(j) = self.occupant(dest) else {
            return Ok(Outcome::Free);
        };
        if self.objects[j].weight >= pusher.weight {
            return Ok(Outcome::Blocked);
        }
        let beyond = (dest.0 + dc, dest.1 + dr);
        if !self.in_bounds(beyond) || self.occupant(beyond).is_some() {
            return Ok(Outcome::Blocked);
        }
        Ok(Outcome::Push(j))
    }

    pub fn step(&self, action: EnvAction) -> Result<GridWorld> {
        let outcome = self.resolve(action)?;
        let (dc, dr) = action.dir.delta();
        let mut next = self.clone();
        let mut shift = |i: usize| {
            let p = &mut next.objects[i].pos;
            *p = (p.0 + dc, p.1 + dr);
        };
        match outcome {
            Outcome::Blocked => {}
            Outcome::Free => shift(action.target),
            Outcome::Push(j) => {
                shift(action.target);
                shift(j);
            }
        }
        Ok(next)
    }

    /// `(pusher, pushed)` pairs realized by `action`; empty unless a push happens.
    pub fn ground_truth_interactions(&self, action: EnvAction) -> Result<Vec<(usize, usize)>> {
        Ok(match self.resolve(action)? {
            Outcome::Push(j) => vec![(action.target, j)],
            _ => vec![],
        })
    }

    pub fn render(&self, mode: Mode) -> Image {
        let mut img = Image::blank(self.height * CELL_PX, self.width * CELL_PX);
        let max_w = self.objects.iter().map(|o| o.weight).max().unwrap_or(1) as f32;
        for o in &self.objects {
            let color = match mode {
                Mode::Observed => {
                    let s = o.weight as f32 / max_w;
                    [OBSERVED_HUE[0] * s, OBSERVED_HUE[1] * s, OBSERVED_HUE[2] * s]
                }
                Mode::Unobserved => PALETTE[o.color_id % PALETTE.len()],
            };
            let (c, r) = (o.pos.0 as usize, o.pos.1 as usize);
            for y in r * CELL_PX..(r + 1) * CELL_PX {
                for x in c * CELL_PX..(c + 1) * CELL_PX {
                    img.set(y, x, color);
                }
            }
        }
        img
    }
}

fn color_ids(n: usize, mode: Mode, palette_seed: u64) -> Vec<usize> {
    match mode {
        Mode::Observed => (0..n).collect(),
        Mode::Unobserved => {
            let mut perm: Vec<usize> = (0..PALETTE.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(palette_seed));
            perm.truncate(n);
            perm
        }
    }
}

/// Height x width x 3 image with channels innermost, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn blank(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, Self::CHANNELS]
    }

    /// Values rounded to `0..=255`.
    pub fn quantize(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_quantized(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Format("image byte count does not match its shape".into()));
        }
        Ok(Image {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub objects: usize,
    pub mode: Mode,
    /// Transitions per episode.
    pub episode_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            width: 5,
            height: 5,
            objects: 5,
            mode: Mode::Observed,
            episode_len: 10,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&self.objects) {
            return Err(Error::config(format!(
                "object count must lie in {MIN_OBJECTS}..={MAX_OBJECTS}, got {}",
                self.objects
            )));
        }
        if self.width * self.height < self.objects {
            return Err(Error::config(format!(
                "a {}x{} grid cannot hold {} objects",
                self.width, self.height, self.objects
            )));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode length must be positive"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height * CELL_PX, self.width * CELL_PX, 3]
    }

    pub fn action_count(&self) -> usize {
        self.objects * 4
    }

    /// Uniformly random collision-free placement.
    pub fn random_world(&self, rng: &mut impl Rng) -> Result<GridWorld> {
        self.validate()?;
        let mut cells: Vec<(i32, i32)> = (0..self.height as i32)
            .flat_map(|r| (0..self.width as i32).map(move |c| (c, r)))
            .collect();
        cells.shuffle(rng);
        cells.truncate(self.objects);
        GridWorld::new(self.width, self.height, &cells, self.mode, rng.gen())
    }
}

/// One trajectory; frame `t` is the observation before action `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub frames: Vec<Image>,
    pub actions: Vec<EnvAction>,
    pub interactions: Vec<Vec<(usize, usize)>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Episode plus the underlying world states, for callers that need ground truth.
pub fn sample_episode_with_worlds(config: &EnvConfig, seed: u64) -> Result<(Episode, Vec<GridWorld>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = config.random_world(&mut rng)?;
    let mut worlds = vec![world.clone()];
    let mut frames = vec![world.render(config.mode)];
    let mut actions = Vec::with_capacity(config.episode_len);
    let mut interactions = Vec::with_capacity(config.episode_len);
    for _ in 0..config.episode_len {
        let a = EnvAction::from_index(rng.gen_range(0..config.action_count()));
        interactions.push(world.ground_truth_interactions(a)?);
        world = world.step(a)?;
        frames.push(world.render(config.mode));
        actions.push(a);
        worlds.push(world.clone());
    }
    Ok((
        Episode {
            seed,
            frames,
            actions,
            interactions,
        },
        worlds,
    ))
}

pub fn sample_episode(config: &EnvConfig, seed: u64) -> Result<Episode> {
    sample_episode_with_worlds(config, seed).map(|(e, _)| e)
}
