//! Procedural road scenes.
//!
//! Every scene has sky above a horizon, a horizontal road band below it and
//! grass under the road. Vehicles are rectangles standing on the road and
//! signs are small squares in the sky region, so all scenes share one
//! coarse spatial layout while their details vary.

use super::rng::Rng;
use crate::error::{Error, Result};
use crate::jdot::LabelGrid;

pub const BACKGROUND: usize = 0;
pub const ROAD: usize = 1;
pub const VEHICLE: usize = 2;
pub const SIGN: usize = 3;

const SKY: [f64; 3] = [0.45, 0.65, 0.90];
const GRASS: [f64; 3] = [0.25, 0.55, 0.20];
const SIGN_COLOR: [f64; 3] = [0.95, 0.85, 0.10];
const VEHICLE_COLORS: [[f64; 3]; 3] = [[0.80, 0.10, 0.10], [0.10, 0.15, 0.60], [0.50, 0.10, 0.60]];
const SIGN_PROBABILITY: f64 = 0.35;
const PIXEL_JITTER: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    /// Image side length; a multiple of 4, at least 8.
    pub side: usize,
    /// 2 draws background and road only, 3 adds vehicles, 4 adds signs.
    /// Ids above 3 are valid but never drawn.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            side: 32,
            num_classes: 4,
            shapes_min: 2,
            shapes_max: 5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || self.side % 4 != 0 {
            return Err(Error::invalid(format!("side {} must be a multiple of 4 and at least 8", self.side)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::invalid(format!("num_classes {} must be in 2..=255", self.num_classes)));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::invalid("shapes_min exceeds shapes_max"));
        }
        Ok(())
    }
}

/// RGB image, `height × width × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Each value rounded to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| quantize(*v) as f64 / 255.0).collect(),
        }
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelGrid,
}

struct Canvas {
    side: usize,
    rgb: Vec<[f64; 3]>,
    class: Vec<usize>,
}

impl Canvas {
    fn fill_rect(&mut self, rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, color: [f64; 3], class: usize) {
        for y in rows {
            for x in cols.clone() {
                self.rgb[y * self.side + x] = color;
                self.class[y * self.side + x] = class;
            }
        }
    }
}

fn jitter(rng: &mut Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let mut c = base;
    for v in &mut c {
        *v += rng.uniform_range(-amount, amount);
    }
    c
}

/// Scene `index` of the collection described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let s = spec.side;
    let mut rng = Rng::for_index(spec.seed, index);

    let horizon = rng.int_inclusive(3 * s / 8, s / 2);
    let road_bottom = s - 1 - rng.int_inclusive(0, s / 8);
    let sky = jitter(&mut rng, SKY, 0.05);
    let grass = jitter(&mut rng, GRASS, 0.05);
    let gray = rng.uniform_range(0.35, 0.5);
    let road = [gray, gray, gray * 1.05];

    let mut canvas = Canvas {
        side: s,
        rgb: vec![[0.0; 3]; s * s],
        class: vec![BACKGROUND; s * s],
    };
    for y in 0..horizon {
        let lift = 0.1 * (1.0 - y as f64 / horizon as f64);
        canvas.fill_rect(y..=y, 0..=s - 1, [sky[0] + lift, sky[1] + lift, sky[2]], BACKGROUND);
    }
    canvas.fill_rect(horizon..=road_bottom, 0..=s - 1, road, ROAD);
    if road_bottom + 1 < s {
        canvas.fill_rect(road_bottom + 1..=s - 1, 0..=s - 1, grass, BACKGROUND);
    }

    let shapes = rng.int_inclusive(spec.shapes_min, spec.shapes_max);
    for _ in 0..shapes {
        let is_sign = rng.uniform() < SIGN_PROBABILITY;
        if is_sign && spec.num_classes > SIGN {
            let lo = (s / 16).max(2);
            let size = rng.int_inclusive(lo, (s / 8).max(lo));
            if horizon < size + 2 {
                continue;
            }
            let x0 = rng.int_inclusive(0, s - size);
            let y0 = rng.int_inclusive(1, horizon - size - 1);
            let color = jitter(&mut rng, SIGN_COLOR, 0.05);
            canvas.fill_rect(y0..=y0 + size - 1, x0..=x0 + size - 1, color, SIGN);
        } else if !is_sign && spec.num_classes > VEHICLE {
            let w = rng.int_inclusive(s / 8, s / 4);
            let lo = (s / 10).max(1);
            let h = rng.int_inclusive(lo, (s / 6).max(lo));
            let x0 = rng.int_inclusive(0, s - w);
            let bottom = rng.int_inclusive(horizon + h - 1, road_bottom);
            let base = VEHICLE_COLORS[rng.below(VEHICLE_COLORS.len())];
            let color = jitter(&mut rng, base, 0.05);
            canvas.fill_rect(bottom + 1 - h..=bottom, x0..=x0 + w - 1, color, VEHICLE);
        }
    }

    let mut data = Vec::with_capacity(s * s * 3);
    for px in &canvas.rgb {
        for &v in px {
            data.push((v + rng.uniform_range(-PIXEL_JITTER, PIXEL_JITTER)).clamp(0.0, 1.0));
        }
    }
    Ok(Scene {
        image: Image::new(s, s, data)?,
        labels: LabelGrid::from_classes(s, s, spec.num_classes, canvas.class)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let spec = SceneSpec { seed: 11, ..Default::default() };
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&spec, 4).unwrap());
    }

    #[test]
    fn no_shapes_means_background_and_road() {
        let spec = SceneSpec { shapes_min: 0, shapes_max: 0, ..Default::default() };
        for i in 0..20 {
            let scene = generate_scene(&spec, i).unwrap();
            assert!(scene.labels.labels().iter().all(|&c| c == BACKGROUND || c == ROAD));
        }
    }

    #[test]
    fn every_class_appears_in_a_corpus() {
        let spec = SceneSpec { seed: 5, ..Default::default() };
        let mut counts = [0usize; 4];
        for i in 0..100 {
            for &c in generate_scene(&spec, i).unwrap().labels.labels() {
                counts[c] += 1;
            }
        }
        assert!(counts.iter().all(|&n| n > 0), "{counts:?}");
    }

    #[test]
    fn small_sides_and_class_counts_work() {
        for classes in 2..=5 {
            let spec = SceneSpec { side: 8, num_classes: classes, ..Default::default() };
            for i in 0..50 {
                let scene = generate_scene(&spec, i).unwrap();
                assert!(scene.labels.labels().iter().all(|&c| c < classes.min(4)));
            }
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(SceneSpec { side: 6, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { side: 30, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { shapes_min: 3, shapes_max: 2, ..Default::default() }.validate().is_err());
    }
}
