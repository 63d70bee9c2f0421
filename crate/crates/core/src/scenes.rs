//! Procedural RGB / depth / normal scenes built from sloped planes.
//!
//! Each surface is a plane `depth = a*x + b*y + c` over normalized pixel
//! centers `x, y in (0, 1)`, clipped to a rectangle or disc. The nearest
//! surface wins per pixel, and the background plane covers the frame.
//! Color is the surface albedo lit by three colored directional lights
//! (one per channel) and mixed toward a fog color with distance, so the
//! image carries both orientation and depth cues.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Rng, Tensor};

/// Number of albedo colors; prompt tokens encode (color, shape) pairs.
pub const PALETTE_SIZE: usize = 8;

/// Literal "depth map" prompt used by the task-prompt ablation.
pub const DEPTH_MAP_PROMPT: [usize; 2] = [30, 31];

const PALETTE: [[f64; 3]; PALETTE_SIZE] = [
    [0.95, 0.40, 0.40],
    [0.40, 0.90, 0.45],
    [0.45, 0.50, 0.95],
    [0.95, 0.90, 0.40],
    [0.40, 0.90, 0.90],
    [0.90, 0.45, 0.90],
    [0.95, 0.95, 0.95],
    [0.95, 0.65, 0.35],
];

const BACKGROUND_ALBEDO: [f64; 3] = [0.6, 0.6, 0.6];
const FOG_COLOR: [f64; 3] = [0.55, 0.6, 0.7];
const FOG_PER_UNIT: f64 = 0.08;
const AMBIENT: f64 = 0.3;

/// Unit light direction per color channel.
fn lights() -> [[f64; 3]; 3] {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    [unit([0.7, 0.0, 1.0]), unit([-0.35, 0.6, 1.0]), unit([-0.35, -0.6, 1.0])]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Plane {
    pub fn flat(depth: f64) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: depth,
        }
    }

    pub fn depth(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }

    pub fn normal(&self) -> [f64; 3] {
        let n = (self.a * self.a + self.b * self.b + 1.0).sqrt();
        [-self.a / n, -self.b / n, 1.0 / n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }

    fn index(&self) -> usize {
        match self {
            Shape::Rect { .. } => 0,
            Shape::Disc { .. } => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub plane: Plane,
    /// Palette index in `0..PALETTE_SIZE`.
    pub color: usize,
}

impl SceneObject {
    /// Descriptor token in `1..=2*PALETTE_SIZE`.
    pub fn token(&self) -> usize {
        1 + self.color * 2 + self.shape.index()
    }
}

/// Complete description of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub background: Plane,
    pub objects: Vec<SceneObject>,
}

/// Ranges for randomly drawn scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl SceneParams {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            min_objects: 3,
            max_objects: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// `[3, H, W]` in `[-1, 1]`.
    pub rgb: Tensor,
    /// `[H, W]`, strictly positive.
    pub depth: Tensor,
    /// `[3, H, W]` unit vectors.
    pub normal: Tensor,
    pub mask: Vec<bool>,
    pub prompt: Vec<usize>,
}

/// A plane with depth `c0 + a*(x - 0.5) + b*(y - 0.5)` and slopes in `[-s, s]`.
fn random_plane(rng: &mut Rng, lo: f64, hi: f64, slope: f64) -> Plane {
    let a = rng.uniform_in(-slope, slope);
    let b = rng.uniform_in(-slope, slope);
    let c0 = rng.uniform_in(lo, hi);
    Plane {
        a,
        b,
        c: c0 - 0.5 * (a + b),
    }
}

/// Draws a random scene layout from `seed`.
pub fn random_spec(seed: u64, params: &SceneParams) -> Result<SceneSpec> {
    if params.size == 0 || params.min_objects > params.max_objects {
        return Err(invalid("scene size must be positive and min_objects <= max_objects"));
    }
    let mut rng = Rng::new(seed);
    let background = random_plane(&mut rng, 6.5, 9.0, 1.5);
    let span = (params.max_objects - params.min_objects + 1) as u64;
    let count = params.min_objects + rng.below(span) as usize;
    let objects = (0..count)
        .map(|_| {
            let shape = if rng.below(2) == 0 {
                let (w, h) = (rng.uniform_in(0.15, 0.5), rng.uniform_in(0.15, 0.5));
                let (x0, y0) = (rng.uniform_in(0.0, 1.0 - w), rng.uniform_in(0.0, 1.0 - h));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                }
            } else {
                Shape::Disc {
                    cx: rng.uniform_in(0.1, 0.9),
                    cy: rng.uniform_in(0.1, 0.9),
                    r: rng.uniform_in(0.08, 0.3),
                }
            };
            let plane = random_plane(&mut rng, 2.5, 5.5, 1.5);
            let color = rng.below(PALETTE_SIZE as u64) as usize;
            SceneObject { shape, plane, color }
        })
        .collect();
    Ok(SceneSpec {
        size: params.size,
        background,
        objects,
    })
}

/// Rasterizes `spec`.
pub fn render(spec: &SceneSpec, seed: u64, text_len: usize) -> SceneSample {
    let n = spec.size;
    let plane = n * n;
    let lights = lights();
    let mut rgb = Tensor::zeros(&[3, n, n]);
    let mut depth = Tensor::zeros(&[n, n]);
    let mut normal = Tensor::zeros(&[3, n, n]);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = ((col as f64 + 0.5) / n as f64, (row as f64 + 0.5) / n as f64);
            let mut best = (spec.background.depth(x, y), spec.background, BACKGROUND_ALBEDO);
            for o in &spec.objects {
                if o.shape.contains(x, y) {
                    let d = o.plane.depth(x, y);
                    if d < best.0 {
                        best = (d, o.plane, PALETTE[o.color]);
                    }
                }
            }
            let (d, p, albedo) = best;
            let nrm = p.normal();
            let fog = (FOG_PER_UNIT * d).clamp(0.0, 1.0);
            let idx = row * n + col;
            depth.data_mut()[idx] = d as f32;
            for ch in 0..3 {
                let l = lights[ch];
                let lambert = (nrm[0] * l[0] + nrm[1] * l[1] + nrm[2] * l[2]).max(0.0);
                let lit = albedo[ch] * (AMBIENT + (1.0 - AMBIENT) * lambert);
                let v = (1.0 - fog) * lit + fog * FOG_COLOR[ch];
                rgb.data_mut()[ch * plane + idx] = (2.0 * v - 1.0) as f32;
                normal.data_mut()[ch * plane + idx] = nrm[ch] as f32;
            }
        }
    }
    let mut prompt: Vec<usize> = spec.objects.iter().map(SceneObject::token).collect();
    prompt.truncate(text_len);
    SceneSample {
        seed,
        rgb,
        depth,
        normal,
        mask: vec![true; plane],
        prompt,
    }
}

/// Random scene for `seed`.
pub fn generate_scene(seed: u64, params: &SceneParams, text_len: usize) -> Result<SceneSample> {
    Ok(render(&random_spec(seed, params)?, seed, text_len))
}

/// Dataset role; each owns a disjoint seed range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pretrain,
    TaskTrain,
    TaskTest,
}

impl Role {
    /// First seed of the role's range.
    pub fn base(self) -> u64 {
        match self {
            Role::Pretrain => 0,
            Role::TaskTrain => 100_000,
            Role::TaskTest => 200_000,
        }
    }

    /// Range length; the test range is open-ended.
    pub fn span(self) -> Option<u64> {
        match self {
            Role::Pretrain | Role::TaskTrain => Some(100_000),
            Role::TaskTest => None,
        }
    }

    pub fn contains(self, seed: u64) -> bool {
        seed >= self.base() && self.span().is_none_or(|s| seed < self.base() + s)
    }

    /// Uniformly drawn seed inside the role's range (test draws from its
    /// first 100 000 seeds).
    pub fn draw(self, rng: &mut Rng) -> u64 {
        self.base() + rng.below(self.span().unwrap_or(100_000))
    }
}

impl std::str::FromStr for Role {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Role::Pretrain),
            "task_train" | "task-train" => Ok(Role::TaskTrain),
            "task_test" | "task-test" => Ok(Role::TaskTest),
            _ => Err(invalid(format!("unknown role {s:?}"))),
        }
    }
}

/// Seeds of the first `count` samples of `role`.
pub fn split_seeds(role: Role, count: usize) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(invalid("split count must be positive"));
    }
    if let Some(span) = role.span() {
        if count as u64 > span {
            return Err(invalid(format!("{role:?} holds only {span} seeds")));
        }
    }
    Ok((0..count as u64).map(|i| role.base() + i).collect())
}

/// The first `count` samples of `role`, in seed order.
pub fn make_split(
    role: Role,
    count: usize,
    params: &SceneParams,
    text_len: usize,
) -> Result<impl Iterator<Item = Result<SceneSample>> + '_> {
    let seeds = split_seeds(role, count)?;
    Ok(seeds.into_iter().map(move |s| generate_scene(s, params, text_len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_full_frame() {
        let spec = SceneSpec {
            size: 8,
            background: Plane::flat(5.0),
            objects: vec![],
        };
        let s = render(&spec, 0, 8);
        assert!(s.depth.data().iter().all(|&d| d == 5.0));
        for p in 0..64 {
            assert_eq!(
                [s.normal.data()[p], s.normal.data()[64 + p], s.normal.data()[128 + p]],
                [0.0, 0.0, 1.0]
            );
        }
    }

    #[test]
    fn sloped_background_normal() {
        let spec = SceneSpec {
            size: 4,
            background: Plane { a: 0.1, b: 0.0, c: 5.0 },
            objects: vec![],
        };
        let s = render(&spec, 0, 8);
        let k = (1.01f64).sqrt();
        for p in 0..16 {
            assert!((s.normal.data()[p] as f64 + 0.1 / k).abs() < 1e-7);
            assert!(s.normal.data()[16 + p].abs() < 1e-7);
            assert!((s.normal.data()[32 + p] as f64 - 1.0 / k).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic() {
        let p = SceneParams::new(16);
        assert_eq!(generate_scene(7, &p, 8).unwrap(), generate_scene(7, &p, 8).unwrap());
    }

    #[test]
    fn nearest_wins() {
        let rect = |c| SceneObject {
            shape: Shape::Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
            },
            plane: Plane::flat(c),
            color: 0,
        };
        let spec = SceneSpec {
            size: 2,
            background: Plane::flat(8.0),
            objects: vec![rect(4.0), rect(3.0), rect(5.0)],
        };
        assert!(render(&spec, 0, 8).depth.data().iter().all(|&d| d == 3.0));
    }

    #[test]
    fn splits_disjoint() {
        let test = split_seeds(Role::TaskTest, 64).unwrap();
        assert_eq!(test.len(), 64);
        assert!(test
            .iter()
            .all(|&s| !Role::TaskTrain.contains(s) && Role::TaskTest.contains(s)));
        assert!(split_seeds(Role::Pretrain, 0).is_err());
        let p = SceneParams::new(8);
        let a: Vec<_> = make_split(Role::TaskTrain, 3, &p, 8)
            .unwrap()
            .map(|s| s.unwrap())
            .collect();
        let b: Vec<_> = make_split(Role::TaskTrain, 3, &p, 8)
            .unwrap()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(a, b);
        assert_eq!(a[0].seed, 100_000);
    }

    #[test]
    fn rgb_in_range_and_prompt_fits() {
        let p = SceneParams::new(16);
        for seed in 0..20 {
            let s = generate_scene(seed, &p, 8).unwrap();
            assert!(s.rgb.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert!(s.depth.data().iter().all(|&d| d > 0.0));
            assert!((3..=7).contains(&s.prompt.len()));
            assert!(s.prompt.iter().all(|&t| (1..=2 * PALETTE_SIZE).contains(&t)));
        }
    }
}
