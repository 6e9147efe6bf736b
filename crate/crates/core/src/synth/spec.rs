use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeamOrientation {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Pore,
    Crack,
    Slag,
    LackOfFusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeamProfile {
    pub orientation: SeamOrientation,
    /// Seam width range as a fraction of the image extent across the seam.
    pub width: [f64; 2],
    /// Brightness added at the seam center.
    pub intensity: f64,
    /// Background gray level.
    pub background: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectMix {
    pub pore: f64,
    pub crack: f64,
    pub slag: f64,
    pub lack_of_fusion: f64,
}

impl DefectMix {
    pub(crate) fn weights(&self) -> [(DefectKind, f64); 4] {
        [
            (DefectKind::Pore, self.pore),
            (DefectKind::Crack, self.crack),
            (DefectKind::Slag, self.slag),
            (DefectKind::LackOfFusion, self.lack_of_fusion),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl ScaleMix {
    pub(crate) fn weights(&self) -> [(ScaleClass, f64); 3] {
        [(ScaleClass::Small, self.small), (ScaleClass::Medium, self.medium), (ScaleClass::Large, self.large)]
    }
}

/// A distribution of synthetic weld radiographs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub seam: SeamProfile,
    pub defects: DefectMix,
    /// Inclusive range of defects per image.
    pub defect_count: [usize; 2],
    pub scales: ScaleMix,
    /// Range of the defect-to-background intensity delta.
    pub contrast: [f64; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

pub const PRESETS: [&str; 5] = ["scenario-a", "scenario-b", "scenario-c", "wide-640", "wide-1600"];

/// Area bounds `[lo, hi)` of a scale class, in pixels.
///
/// The COCO thresholds `32^2` and `96^2` apply to 640-pixel images and shrink
/// with the square of the shorter image side below that.
pub fn scale_bounds(class: ScaleClass, height: usize, width: usize) -> (f64, f64) {
    let side = height.min(width).min(640) as f64;
    let f = (side / 640.0).powi(2);
    let (t1, t2) = (32.0 * 32.0 * f, 96.0 * 96.0 * f);
    match class {
        ScaleClass::Small => (2.0, t1),
        ScaleClass::Medium => (t1, t2),
        ScaleClass::Large => (t2, (3.0 * t2).min((height * width) as f64 / 4.0)),
    }
}

pub fn classify_area(area: f64, height: usize, width: usize) -> ScaleClass {
    let (_, t1) = scale_bounds(ScaleClass::Small, height, width);
    let (_, t2) = scale_bounds(ScaleClass::Medium, height, width);
    if area < t1 {
        ScaleClass::Small
    } else if area <= t2 {
        ScaleClass::Medium
    } else {
        ScaleClass::Large
    }
}

fn check_probabilities(what: &str, w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} probabilities must be non-negative and sum to 1, got {w:?}")));
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scenario '{}': {m}", self.name)));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        check_probabilities("defect", &self.defects.weights().map(|(_, p)| p))?;
        check_probabilities("scale", &self.scales.weights().map(|(_, p)| p))?;
        let [lo, hi] = self.contrast;
        if !(lo <= hi && lo.abs() <= 1.0 && hi.abs() <= 1.0) {
            return bad(format!("contrast range {:?} must be ordered and within [-1, 1]", self.contrast));
        }
        if self.defect_count[0] > self.defect_count[1] {
            return bad(format!("defect count range {:?} is reversed", self.defect_count));
        }
        let [w0, w1] = self.seam.width;
        if !(0.0 < w0 && w0 <= w1 && w1 < 1.0) {
            return bad(format!("seam width range {:?} must lie in (0, 1)", self.seam.width));
        }
        let levels = [self.seam.background, self.seam.background + self.seam.intensity];
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("background and seam levels must lie in [0, 1]".into());
        }
        for (class, p) in self.scales.weights() {
            let (lo, _) = scale_bounds(class, self.height, self.width);
            if p > 0.0 && lo * self.defect_count[1] as f64 > (self.height * self.width) as f64 {
                return bad(format!("{} {class:?} defects cannot fit a {}x{} image", self.defect_count[1], self.height, self.width));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }

    /// Built-in scenarios: `scenario-a` clean and high contrast (pretraining),
    /// `scenario-b` mixed scales (adaptation), `scenario-c` low contrast with
    /// a shifted seam (zero-shot), plus wide variants of `scenario-b` for the
    /// width-crop path.
    pub fn preset(name: &str) -> Result<ScenarioSpec> {
        let a = ScenarioSpec {
            name: "scenario-a".into(),
            height: 64,
            width: 64,
            seam: SeamProfile { orientation: SeamOrientation::Horizontal, width: [0.35, 0.5], intensity: 0.25, background: 0.3 },
            defects: DefectMix { pore: 0.4, crack: 0.2, slag: 0.25, lack_of_fusion: 0.15 },
            defect_count: [1, 3],
            scales: ScaleMix { small: 0.3, medium: 0.5, large: 0.2 },
            contrast: [0.25, 0.4],
            noise: 0.02,
            seed: 1001,
        };
        let b = ScenarioSpec {
            name: "scenario-b".into(),
            seam: SeamProfile { width: [0.3, 0.55], intensity: 0.3, background: 0.25, ..a.seam.clone() },
            defects: DefectMix { pore: 0.3, crack: 0.3, slag: 0.25, lack_of_fusion: 0.15 },
            defect_count: [1, 4],
            scales: ScaleMix { small: 0.4, medium: 0.4, large: 0.2 },
            contrast: [0.15, 0.35],
            noise: 0.035,
            seed: 2002,
            ..a.clone()
        };
        let spec = match name {
            "scenario-a" => a,
            "scenario-b" => b,
            "scenario-c" => ScenarioSpec {
                name: "scenario-c".into(),
                seam: SeamProfile { width: [0.4, 0.6], intensity: 0.2, background: 0.35, ..b.seam.clone() },
                defects: DefectMix { pore: 0.35, crack: 0.25, slag: 0.2, lack_of_fusion: 0.2 },
                defect_count: [1, 3],
                contrast: [0.1, 0.22],
                noise: 0.045,
                seed: 3003,
                ..b
            },
            "wide-640" => ScenarioSpec { name: "wide-640".into(), width: 640, defect_count: [2, 10], seed: 4004, ..b },
            "wide-1600" => ScenarioSpec { name: "wide-1600".into(), width: 1600, defect_count: [4, 20], seed: 5005, ..b },
            _ => return Err(Error::InvalidArgument(format!("unknown preset '{name}', valid presets: {}", PRESETS.join(", ")))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in PRESETS {
            assert_eq!(ScenarioSpec::preset(p).unwrap().name, p);
        }
        let err = ScenarioSpec::preset("scenario-z").unwrap_err().to_string();
        assert!(PRESETS.iter().all(|p| err.contains(p)));
    }

    #[test]
    fn coco_thresholds_scale_with_image_side() {
        assert_eq!(scale_bounds(ScaleClass::Medium, 640, 640), (1024.0, 9216.0));
        let (lo, hi) = scale_bounds(ScaleClass::Medium, 64, 1600);
        assert!((lo - 10.24).abs() < 1e-12 && (hi - 92.16).abs() < 1e-12);
        assert_eq!(classify_area(10.0, 64, 64), ScaleClass::Small);
        assert_eq!(classify_area(50.0, 64, 64), ScaleClass::Medium);
        assert_eq!(classify_area(93.0, 64, 64), ScaleClass::Large);
    }

    #[test]
    fn validation_catches_bad_specs() {
        let a = ScenarioSpec::preset("scenario-a").unwrap();
        let cases = [
            ScenarioSpec { defects: DefectMix { pore: 0.5, ..a.defects.clone() }, ..a.clone() },
            ScenarioSpec { contrast: [0.5, 0.2], ..a.clone() },
            ScenarioSpec { contrast: [0.5, 1.2], ..a.clone() },
            ScenarioSpec { defect_count: [3, 1], ..a.clone() },
            ScenarioSpec { noise: -0.1, ..a.clone() },
            ScenarioSpec { seam: SeamProfile { background: 0.9, ..a.seam.clone() }, ..a },
        ];
        for c in cases {
            assert!(c.validate().is_err());
        }
    }
}
