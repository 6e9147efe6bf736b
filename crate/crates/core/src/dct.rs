//! 2D DCT bases, per-channel-group coefficient extraction and frequency
//! selection plans.
//!
//! Coefficients are unnormalized sums `sum_h sum_w x[h, w] * B[h, w]`, so the
//! `(0, 0)` coefficient is `H * W` times the spatial mean.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// Where the half-sample offset sits in the cosine argument.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfShift {
    /// `cos(pi (h + 1/2) u / H)`: DCT-II; `(0, 0)` is the constant basis.
    #[default]
    Spatial,
    /// `cos(pi h (u + 1/2) / H)`: shift on the frequency index.
    Frequency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    pub height: usize,
    pub width: usize,
    pub u: usize,
    pub v: usize,
    values: Vec<f64>,
}

impl DctBasis {
    /// Row-major `height x width` weights.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn cos_factor(pos: usize, freq: usize, len: usize, shift: HalfShift) -> f64 {
    let (p, f) = (pos as f64, freq as f64);
    match shift {
        HalfShift::Spatial => (PI * (p + 0.5) * f / len as f64).cos(),
        HalfShift::Frequency => (PI * p * (f + 0.5) / len as f64).cos(),
    }
}

pub fn dct_basis(height: usize, width: usize, u: usize, v: usize, shift: HalfShift) -> Result<DctBasis> {
    if u >= height || v >= width {
        return Err(Error::IndexOutOfRange { op: "dct_basis", index: vec![u, v], bound: vec![height, width] });
    }
    let col: Vec<f64> = (0..width).map(|w| cos_factor(w, v, width, shift)).collect();
    let mut values = Vec::with_capacity(height * width);
    for h in 0..height {
        let r = cos_factor(h, u, height, shift);
        values.extend(col.iter().map(|c| r * c));
    }
    Ok(DctBasis { height, width, u, v, values })
}

fn single_item(op: &'static str, x: &Tensor) -> Result<()> {
    if x.n() != 1 {
        return Err(Error::ShapeMismatch { op, expected: vec![1, x.c(), x.h(), x.w()], got: x.shape().to_vec() });
    }
    Ok(())
}

/// Coefficient of every channel of `part` (`[1, C', H, W]`) against basis `(u, v)`.
pub fn dct2_coefficient(part: &Tensor, u: usize, v: usize, shift: HalfShift) -> Result<Vec<f64>> {
    single_item("dct2_coefficient", part)?;
    let basis = dct_basis(part.h(), part.w(), u, v, shift)?;
    Ok((0..part.c()).map(|c| part.plane(0, c).iter().zip(basis.values()).map(|(a, b)| a * b).sum()).collect())
}

/// Ordered frequency indices on a `grid x grid` patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyIndexPlan {
    pub grid: usize,
    pub entries: Vec<(usize, usize)>,
}

impl FrequencyIndexPlan {
    pub fn new(grid: usize, entries: Vec<(usize, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("frequency plan needs at least one entry".into()));
        }
        if let Some(&(u, v)) = entries.iter().find(|(u, v)| *u >= grid || *v >= grid) {
            return Err(Error::IndexOutOfRange { op: "frequency_plan", index: vec![u, v], bound: vec![grid, grid] });
        }
        Ok(FrequencyIndexPlan { grid, entries })
    }

    /// Number of channel groups `n`.
    pub fn groups(&self) -> usize {
        self.entries.len()
    }

    /// Channels per group for a `channels`-wide input.
    pub fn group_width(&self, channels: usize) -> Result<usize> {
        let n = self.groups();
        if !channels.is_multiple_of(n) {
            return Err(Error::Indivisible { op: "mscdct", what: "channel count", value: channels, divisor: n });
        }
        Ok(channels / n)
    }

    /// Bases for every entry on a `size x size` patch, row-major.
    pub fn bases(&self, size: usize, shift: HalfShift) -> Result<Vec<Vec<f64>>> {
        if size != self.grid {
            return Err(Error::InvalidArgument(format!(
                "frequency plan built for a {0}x{0} grid cannot be applied to {1}x{1} patches",
                self.grid, size
            )));
        }
        self.entries.iter().map(|&(u, v)| dct_basis(size, size, u, v, shift).map(DctBasis::into_values)).collect()
    }
}

/// Splits `x` (`[1, C, H, W]`) into `n` channel groups and reduces group `i`
/// with the plan's `i`-th frequency; results are concatenated in group order.
pub fn mscdct(x: &Tensor, plan: &FrequencyIndexPlan, shift: HalfShift) -> Result<Vec<f64>> {
    single_item("mscdct", x)?;
    let width = plan.group_width(x.c())?;
    let mut out = Vec::with_capacity(x.c());
    for (i, &(u, v)) in plan.entries.iter().enumerate() {
        let basis = dct_basis(x.h(), x.w(), u, v, shift)?;
        for c in i * width..(i + 1) * width {
            out.push(x.plane(0, c).iter().zip(basis.values()).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// Which end of the low-to-high frequency ranking to take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencySelection {
    Top(usize),
    Bottom(usize),
}

impl FrequencySelection {
    pub fn count(self) -> usize {
        match self {
            FrequencySelection::Top(k) | FrequencySelection::Bottom(k) => k,
        }
    }
}

impl fmt::Display for FrequencySelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FrequencySelection::Top(1) => write!(f, "top1"),
            FrequencySelection::Bottom(1) => write!(f, "bot1"),
            FrequencySelection::Top(k) => write!(f, "topK:{k}"),
            FrequencySelection::Bottom(k) => write!(f, "botK:{k}"),
        }
    }
}

impl FromStr for FrequencySelection {
    type Err = Error;

    /// Accepts `top1`, `bot1`, `topK:<k>` and `botK:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("invalid DCT mode '{s}', expected top1|bot1|topK:<k>|botK:<k>"));
        let parse_k = |k: &str| k.parse::<usize>().ok().filter(|&k| k > 0).ok_or_else(bad);
        match s {
            "top1" => Ok(FrequencySelection::Top(1)),
            "bot1" => Ok(FrequencySelection::Bottom(1)),
            _ => {
                if let Some(k) = s.strip_prefix("topK:") {
                    Ok(FrequencySelection::Top(parse_k(k)?))
                } else if let Some(k) = s.strip_prefix("botK:") {
                    Ok(FrequencySelection::Bottom(parse_k(k)?))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl Serialize for FrequencySelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FrequencySelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All `(u, v)` on a `grid x grid` patch, ascending `u + v`, ties by `u`.
pub fn zigzag_order(grid: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..grid).flat_map(|u| (0..grid).map(move |v| (u, v))).collect();
    all.sort_by_key(|&(u, v)| (u + v, u));
    all
}

/// `Top(k)` takes the first `k` indices of the zig-zag ranking, `Bottom(k)`
/// the last `k` (kept in ranking order).
pub fn frequency_plan(selection: FrequencySelection, grid: usize) -> Result<FrequencyIndexPlan> {
    let k = selection.count();
    if k == 0 || k > grid * grid {
        return Err(Error::InvalidArgument(format!("cannot select {k} frequencies from a {grid}x{grid} grid")));
    }
    let order = zigzag_order(grid);
    let entries = match selection {
        FrequencySelection::Top(_) => order[..k].to_vec(),
        FrequencySelection::Bottom(_) => order[order.len() - k..].to_vec(),
    };
    FrequencyIndexPlan::new(grid, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook double loop, independent of the basis cache above.
    fn naive_coefficient(plane: &[f64], h: usize, w: usize, u: usize, v: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let b = (PI * (i as f64 + 0.5) * u as f64 / h as f64).cos() * (PI * (j as f64 + 0.5) * v as f64 / w as f64).cos();
                acc += plane[i * w + j] * b;
            }
        }
        acc
    }

    #[test]
    fn lowest_basis_is_all_ones() {
        let b = dct_basis(4, 4, 0, 0, HalfShift::Spatial).unwrap();
        assert!(b.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_by_one_closed_form() {
        let b = dct_basis(2, 1, 1, 0, HalfShift::Spatial).unwrap();
        assert!((b.at(0, 0) - (PI / 4.0).cos()).abs() < 1e-15);
        assert!((b.at(1, 0) - (3.0 * PI / 4.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn non_constant_basis_sums_to_zero() {
        let b = dct_basis(8, 8, 3, 5, HalfShift::Spatial).unwrap();
        assert!(b.values().iter().sum::<f64>().abs() < 1e-9);
        for u in 0..8 {
            for v in 0..8 {
                if (u, v) != (0, 0) {
                    let s: f64 = dct_basis(8, 8, u, v, HalfShift::Spatial).unwrap().values().iter().sum();
                    assert!(s.abs() < 1e-9, "({u},{v}) sums to {s}");
                }
            }
        }
    }

    #[test]
    fn out_of_range_index_rejected() {
        assert!(dct_basis(4, 4, 4, 0, HalfShift::Spatial).is_err());
        assert!(dct_basis(4, 4, 0, 4, HalfShift::Frequency).is_err());
    }

    #[test]
    fn frequency_shift_variant_is_not_sum_pooling() {
        let b = dct_basis(4, 4, 0, 0, HalfShift::Frequency).unwrap();
        assert_eq!(b.at(0, 0), 1.0);
        assert!((b.at(1, 0) - (PI / 8.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn coefficient_of_constant_part() {
        let part = Tensor::full([1, 3, 4, 4], 2.5);
        assert_eq!(dct2_coefficient(&part, 0, 0, HalfShift::Spatial).unwrap(), vec![40.0; 3]);
        for c in dct2_coefficient(&part, 2, 0, HalfShift::Spatial).unwrap() {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn coefficient_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let part = Tensor::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let got = dct2_coefficient(&part, 1, 2, HalfShift::Spatial).unwrap()[0];
        assert!((got - naive_coefficient(part.plane(0, 0), 4, 4, 1, 2)).abs() <= 1e-12);
    }

    #[test]
    fn mscdct_concatenates_groups_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let plan = FrequencyIndexPlan::new(4, vec![(0, 1), (2, 3)]).unwrap();
        let out = mscdct(&x, &plan, HalfShift::Spatial).unwrap();
        let first = Tensor::new([1, 2, 4, 4], x.data()[..32].to_vec()).unwrap();
        let second = Tensor::new([1, 2, 4, 4], x.data()[32..].to_vec()).unwrap();
        let mut expect = dct2_coefficient(&first, 0, 1, HalfShift::Spatial).unwrap();
        expect.extend(dct2_coefficient(&second, 2, 3, HalfShift::Spatial).unwrap());
        assert_eq!(out, expect);
    }

    #[test]
    fn mscdct_single_group_constant_image() {
        let x = Tensor::full([1, 2, 8, 8], 0.25);
        let plan = frequency_plan(FrequencySelection::Top(1), 8).unwrap();
        assert_eq!(mscdct(&x, &plan, HalfShift::Spatial).unwrap(), vec![16.0, 16.0]);
    }

    #[test]
    fn mscdct_rejects_indivisible_channels() {
        let x = Tensor::zeros([1, 6, 4, 4]);
        let plan = frequency_plan(FrequencySelection::Top(4), 4).unwrap();
        assert!(matches!(mscdct(&x, &plan, HalfShift::Spatial), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn mscdct_matches_assembled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform([1, 8, 8, 8], -1.0, 1.0, &mut rng);
        let plan = FrequencyIndexPlan::new(8, vec![(0, 0), (1, 3), (7, 2), (5, 5)]).unwrap();
        let got = mscdct(&x, &plan, HalfShift::Spatial).unwrap();
        for (c, g) in got.iter().enumerate() {
            let (u, v) = plan.entries[c / 2];
            assert!((g - naive_coefficient(x.plane(0, c), 8, 8, u, v)).abs() <= 1e-12);
        }
    }

    #[test]
    fn plans_follow_zigzag_ranking() {
        assert_eq!(frequency_plan(FrequencySelection::Top(1), 8).unwrap().entries, vec![(0, 0)]);
        assert_eq!(frequency_plan(FrequencySelection::Bottom(1), 8).unwrap().entries, vec![(7, 7)]);
        assert_eq!(frequency_plan(FrequencySelection::Top(4), 8).unwrap().entries, vec![(0, 0), (0, 1), (1, 0), (0, 2)]);
        assert!(frequency_plan(FrequencySelection::Top(65), 8).is_err());
        assert!(frequency_plan(FrequencySelection::Top(0), 8).is_err());
    }

    #[test]
    fn selection_strings_round_trip() {
        for s in ["top1", "bot1", "topK:4", "botK:3"] {
            assert_eq!(s.parse::<FrequencySelection>().unwrap().to_string(), s);
        }
        assert_eq!("topK:1".parse::<FrequencySelection>().unwrap(), FrequencySelection::Top(1));
        assert!("top2".parse::<FrequencySelection>().is_err());
        assert!("topK:0".parse::<FrequencySelection>().is_err());
    }

    #[test]
    fn distinct_bases_are_orthogonal() {
        let n = 6;
        let bases: Vec<DctBasis> =
            (0..n).flat_map(|u| (0..n).map(move |v| (u, v))).map(|(u, v)| dct_basis(n, n, u, v, HalfShift::Spatial).unwrap()).collect();
        for (i, a) in bases.iter().enumerate() {
            for b in &bases[i + 1..] {
                let ip: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
                assert!(ip.abs() <= 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn coefficient_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, u in 0usize..5, v in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
            let y = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
            let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let lhs = dct2_coefficient(&mix, u, v, HalfShift::Spatial).unwrap();
            let cx = dct2_coefficient(&x, u, v, HalfShift::Spatial).unwrap();
            let cy = dct2_coefficient(&y, u, v, HalfShift::Spatial).unwrap();
            for i in 0..2 {
                prop_assert!((lhs[i] - (a * cx[i] + b * cy[i])).abs() <= 1e-10);
            }
        }

        #[test]
        fn lowest_coefficient_is_scaled_mean(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform([1, 1, h, w], -2.0, 2.0, &mut rng);
            let mean = x.sum() / (h * w) as f64;
            let c = dct2_coefficient(&x, 0, 0, HalfShift::Spatial).unwrap()[0];
            prop_assert!((c - (h * w) as f64 * mean).abs() <= 1e-10);
        }

        #[test]
        fn mscdct_output_length_equals_channels(groups in 1usize..5, width in 1usize..4) {
            let plan = frequency_plan(FrequencySelection::Top(groups), 4).unwrap();
            let x = Tensor::full([1, groups * width, 4, 4], 1.0);
            prop_assert_eq!(mscdct(&x, &plan, HalfShift::Spatial).unwrap().len(), groups * width);
        }
    }
}
