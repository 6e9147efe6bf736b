use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const DEFAULT_CROP_WIDTH: usize = 640;

/// Placement of one tile along the image width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpan {
    pub offset: usize,
    /// The source image was narrower than the tile and was zero-padded on the right.
    pub padded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub span: TileSpan,
    pub image: Tensor,
}

/// `ceil(W / W_c)` tiles of width `W_c`; the last one is right-aligned so it
/// overlaps its neighbour instead of running past the edge. An image
/// narrower than `W_c` yields a single right-padded tile.
pub fn tile_spans(width: usize, crop: usize) -> Result<Vec<TileSpan>> {
    if crop == 0 {
        return Err(Error::InvalidArgument("crop width must be at least 1".into()));
    }
    if width <= crop {
        return Ok(vec![TileSpan { offset: 0, padded: width < crop }]);
    }
    let n = width.div_ceil(crop);
    Ok((0..n).map(|i| TileSpan { offset: (i * crop).min(width - crop), padded: false }).collect())
}

/// Cuts `[N, C, H, W]` into width-`crop` tiles; heights are preserved.
pub fn width_crop(image: &Tensor, crop: usize) -> Result<Vec<Tile>> {
    let [n, c, h, w] = image.shape();
    tile_spans(w, crop)?
        .into_iter()
        .map(|span| {
            let t = Tensor::from_fn([n, c, h, crop], |ni, ci, hi, wi| {
                let src = span.offset + wi;
                if src < w {
                    image.at(ni, ci, hi, src)
                } else {
                    0.0
                }
            });
            Ok(Tile { span, image: t })
        })
        .collect()
}

/// Reassembles per-tile maps into a width-`width` map. Where tiles
/// overlap the elementwise maximum wins; padding columns are dropped.
pub fn stitch_max(tiles: &[(TileSpan, Tensor)], width: usize) -> Result<Tensor> {
    let first = tiles.first().ok_or_else(|| Error::InvalidArgument("nothing to stitch".into()))?;
    let [n, c, h, _] = first.1.shape();
    let mut out = Tensor::full([n, c, h, width], f64::NEG_INFINITY);
    for (span, t) in tiles {
        let [tn, tc, th, tw] = t.shape();
        if (tn, tc, th) != (n, c, h) {
            return Err(Error::ShapeMismatch { op: "stitch_max", expected: vec![n, c, h, tw], got: t.shape().to_vec() });
        }
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..tw {
                        let x = span.offset + wi;
                        if x < width {
                            let v = t.at(ni, ci, hi, wi).max(out.at(ni, ci, hi, x));
                            out.set(ni, ci, hi, x, v);
                        }
                    }
                }
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::InvalidArgument("tiles do not cover the full width".into()));
    }
    Ok(out)
}
