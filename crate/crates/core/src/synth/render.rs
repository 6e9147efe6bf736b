use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::spec::{classify_area, scale_bounds, DefectKind, ScaleClass, ScenarioSpec, SeamOrientation};
use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub kind: DefectKind,
    pub scale: ScaleClass,
    pub bbox: BoundingBox,
    /// Pixel count of the defect's support.
    pub area: usize,
    /// Intensity delta applied over the support.
    pub contrast: f64,
}

/// One radiograph: `[1, 1, H, W]` image in `[0, 1]` quantized to 1/255
/// steps, its binary mask, and per-defect metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub defects: Vec<DefectRecord>,
}

fn pick<T: Copy, R: Rng>(rng: &mut R, weights: &[(T, f64)]) -> T {
    let mut u: f64 = rng.random_range(0.0..1.0);
    for &(item, w) in weights {
        if u < w {
            return item;
        }
        u -= w;
    }
    weights.iter().rev().find(|(_, w)| *w > 0.0).map(|&(t, _)| t).unwrap_or(weights[0].0)
}

/// Seam geometry in (across, along) coordinates.
struct Seam {
    across_len: usize,
    along_len: usize,
    center: f64,
    half_width: f64,
    wave_amp: f64,
    wave_period: f64,
    wave_phase: f64,
    orientation: SeamOrientation,
}

impl Seam {
    fn center_at(&self, along: f64) -> f64 {
        self.center + self.wave_amp * (2.0 * PI * along / self.wave_period + self.wave_phase).sin()
    }

    /// 1 inside the seam, a cosine ramp of 2 pixels at each edge, 0 outside.
    fn profile(&self, across: f64, along: f64) -> f64 {
        let t = (across - self.center_at(along)).abs();
        let ramp = 2.0;
        if t <= self.half_width - ramp {
            1.0
        } else if t >= self.half_width + ramp {
            0.0
        } else {
            0.5 * (1.0 + (PI * (t - (self.half_width - ramp)) / (2.0 * ramp)).cos())
        }
    }

    fn to_pixel(&self, across: isize, along: isize) -> Option<(usize, usize)> {
        if across < 0 || along < 0 || across as usize >= self.across_len || along as usize >= self.along_len {
            return None;
        }
        Some(match self.orientation {
            SeamOrientation::Horizontal => (across as usize, along as usize),
            SeamOrientation::Vertical => (along as usize, across as usize),
        })
    }
}

struct Support {
    w: usize,
    cells: Vec<bool>,
    count: usize,
}

impl Support {
    fn new(h: usize, w: usize) -> Self {
        Support { w, cells: vec![false; h * w], count: 0 }
    }

    fn mark(&mut self, seam: &Seam, across: isize, along: isize) {
        if let Some((r, c)) = seam.to_pixel(across, along) {
            let i = r * self.w + c;
            if !self.cells[i] {
                self.cells[i] = true;
                self.count += 1;
            }
        }
    }

    fn bbox(&self) -> Option<BoundingBox> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for (i, _) in self.cells.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = (i / self.w, i % self.w);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        (self.count > 0).then(|| BoundingBox { x: c0, y: r0, width: c1 - c0 + 1, height: r1 - r0 + 1 })
    }
}

/// Marks every cell whose center lies inside a rotated ellipse.
fn ellipse(s: &mut Support, seam: &Seam, ca: f64, cl: f64, semi_across: f64, semi_along: f64, theta: f64) {
    let reach = semi_across.max(semi_along).ceil() as isize + 1;
    let (sin, cos) = theta.sin_cos();
    for da in -reach..=reach {
        for dl in -reach..=reach {
            let a = (ca.floor() as isize + da) as f64 + 0.5 - ca;
            let l = (cl.floor() as isize + dl) as f64 + 0.5 - cl;
            let u = cos * a - sin * l;
            let v = sin * a + cos * l;
            if (u / semi_across).powi(2) + (v / semi_along).powi(2) <= 1.0 {
                s.mark(seam, ca.floor() as isize + da, cl.floor() as isize + dl);
            }
        }
    }
}

fn render_defect<R: Rng>(rng: &mut R, kind: DefectKind, target: f64, seam: &Seam, h: usize, w: usize) -> Support {
    let mut s = Support::new(h, w);
    let along = rng.random_range(0.0..seam.along_len as f64);
    let offset = rng.random_range(-1.0..1.0) * seam.half_width;
    let across = seam.center_at(along) + offset;
    match kind {
        DefectKind::Pore => {
            let r: f64 = rng.random_range(0.75..1.33);
            let a = (target / (PI * r)).sqrt();
            ellipse(&mut s, seam, across, along, a, a * r, 0.0);
        }
        DefectKind::Slag => {
            let aspect: f64 = rng.random_range(3.0..6.0);
            let semi_along = (target * aspect / PI).sqrt();
            let theta = rng.random_range(-0.3..0.3);
            ellipse(&mut s, seam, across, along, semi_along / aspect, semi_along, theta);
        }
        DefectKind::Crack => {
            let width = rng.random_range(1..=2i64) as isize;
            let transverse = rng.random_bool(0.3);
            let mut theta: f64 = if transverse { PI / 2.0 } else { 0.0 } + rng.random_range(-0.6..0.6);
            let (mut a, mut l) = (across, along);
            let max_steps = (4.0 * target) as usize + 8;
            for _ in 0..max_steps {
                for da in 0..width {
                    for dl in 0..width {
                        s.mark(seam, a.floor() as isize + da, l.floor() as isize + dl);
                    }
                }
                if s.count as f64 >= target {
                    break;
                }
                let z: f64 = StandardNormal.sample(rng);
                theta += 0.25 * z;
                a += theta.sin();
                l += theta.cos();
            }
        }
        DefectKind::LackOfFusion => {
            let thickness: usize = rng.random_range(2..=4);
            let length = (target / thickness as f64).ceil() as usize;
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = rng.random_range(0..seam.along_len.saturating_sub(length).max(1));
            for l in start..start + length {
                let edge = seam.center_at(l as f64) + side * seam.half_width;
                let a0 = (edge - thickness as f64 / 2.0).round() as isize;
                for t in 0..thickness as isize {
                    s.mark(seam, a0 + t, l as isize);
                }
            }
        }
    }
    s
}

/// Renders sample `index` of `spec`. The result depends only on
/// `(spec, index)`: every index draws from its own stream of the seeded
/// generator.
pub fn generate_sample(spec: &ScenarioSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let (across_len, along_len) = match spec.seam.orientation {
        SeamOrientation::Horizontal => (h, w),
        SeamOrientation::Vertical => (w, h),
    };
    let seam = Seam {
        across_len,
        along_len,
        center: across_len as f64 * rng.random_range(0.4..0.6),
        half_width: across_len as f64 * rng.random_range(spec.seam.width[0]..=spec.seam.width[1]) / 2.0,
        wave_amp: rng.random_range(0.0..1.5),
        wave_period: along_len as f64 * rng.random_range(0.5..1.5),
        wave_phase: rng.random_range(0.0..2.0 * PI),
        orientation: spec.seam.orientation,
    };

    let mut image = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (a, l) = match spec.seam.orientation {
                SeamOrientation::Horizontal => (r, c),
                SeamOrientation::Vertical => (c, r),
            };
            image[r * w + c] = spec.seam.background + spec.seam.intensity * seam.profile(a as f64 + 0.5, l as f64 + 0.5);
        }
    }

    let count = rng.random_range(spec.defect_count[0]..=spec.defect_count[1]);
    let mut mask = vec![0.0; h * w];
    let mut defects = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = pick(&mut rng, &spec.defects.weights());
        let class = pick(&mut rng, &spec.scales.weights());
        let (lo, hi) = scale_bounds(class, h, w);
        if lo >= hi {
            return Err(Error::InvalidArgument(format!("scenario '{}': {class:?} defects cannot fit a {h}x{w} image", spec.name)));
        }
        let lo = if class == ScaleClass::Small { lo.max(3.0).min(hi) } else { lo };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let target = rng.random_range(lo..hi);
            let s = render_defect(&mut rng, kind, target, &seam, h, w);
            let area = s.count as f64;
            if s.count > 0 && area <= hi && classify_area(area, h, w) == class {
                placed = Some(s);
                break;
            }
        }
        let s = placed.ok_or_else(|| {
            Error::InvalidArgument(format!("scenario '{}': could not place a {class:?} {kind:?} in a {h}x{w} image", spec.name))
        })?;
        let mut contrast = rng.random_range(spec.contrast[0]..=spec.contrast[1]);
        if kind == DefectKind::LackOfFusion {
            contrast *= 0.6;
        }
        for (i, _) in s.cells.iter().enumerate().filter(|(_, &b)| b) {
            image[i] += contrast;
            mask[i] = 1.0;
        }
        defects.push(DefectRecord { kind, scale: class, bbox: s.bbox().expect("non-empty support"), area: s.count, contrast });
    }

    for v in image.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = quantize(*v + spec.noise * z);
    }
    Ok(Sample { image: Tensor::new([1, 1, h, w], image)?, mask: Tensor::new([1, 1, h, w], mask)?, defects })
}

/// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
pub fn quantize(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
