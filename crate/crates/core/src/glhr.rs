//! Global-local high-resolution splitting.
//!
//! An image of size `(h, w)` is resized to `(p_h · tile, p_w · tile)` with
//! `p_h = ⌈h / tile⌉`, `p_w = ⌈w / tile⌉`, then cut into `p_h · p_w` local
//! tiles. A global view (the whole image resized to `tile × tile`) is placed
//! in front of the locals.
//!
//! When `p_h · p_w` would exceed the patch budget, the grid is replaced by
//! the pair `(a, b)` with `a · b ≤ max_patches` whose aspect ratio is closest
//! to the image's in log space; ties go to the larger `a · b`, then the larger
//! `a`. Resizing is bilinear straight to the grid size, with no padding.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crate::image::{ImageDims, RasterImage};
use crate::error::{Error, Result};

pub const DEFAULT_TILE: usize = 336;
pub const DEFAULT_MAX_PATCHES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub p_h: usize,
    pub p_w: usize,
}

impl GridShape {
    pub fn patches(self) -> usize {
        self.p_h * self.p_w
    }
}

/// A pixel box in the resized image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub source: ImageDims,
    pub tile: usize,
    pub resize_to: ImageDims,
    pub grid: GridShape,
    /// Local tiles in row-major order.
    pub tiles: Vec<TileBox>,
    pub include_global: bool,
}

impl SplitPlan {
    pub fn view_count(&self) -> usize {
        self.tiles.len() + usize::from(self.include_global)
    }
}

/// Tile grid for an image, capped at `max_patches` tiles.
pub fn compute_grid(dims: ImageDims, tile: usize, max_patches: usize) -> GridShape {
    assert!(tile >= 1 && max_patches >= 1, "tile and max_patches must be positive");
    let p_h = dims.h_px.div_ceil(tile);
    let p_w = dims.w_px.div_ceil(tile);
    if p_h * p_w <= max_patches {
        return GridShape { p_h, p_w };
    }
    capped_grid(dims, max_patches)
}

/// `|log(a/b) - log(h/w)|` as the exact ratio `max(aw, bh) / min(aw, bh)`.
fn distortion(a: usize, b: usize, dims: ImageDims) -> (u128, u128) {
    let lhs = a as u128 * dims.w_px as u128;
    let rhs = b as u128 * dims.h_px as u128;
    (lhs.max(rhs), lhs.min(rhs))
}

fn capped_grid(dims: ImageDims, max_patches: usize) -> GridShape {
    let mut best: Option<(GridShape, (u128, u128))> = None;
    for a in 1..=max_patches {
        for b in 1..=max_patches / a {
            let cand = GridShape { p_h: a, p_w: b };
            let d = distortion(a, b, dims);
            let better = match &best {
                None => true,
                Some((cur, cd)) => match (d.0 * cd.1).cmp(&(cd.0 * d.1)) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => (cand.patches(), cand.p_h) > (cur.patches(), cur.p_h),
                },
            };
            if better {
                best = Some((cand, d));
            }
        }
    }
    best.expect("max_patches >= 1 yields a candidate").0
}

/// Split plan with a grid chosen by [`compute_grid`].
pub fn plan_split(dims: ImageDims, tile: usize, max_patches: usize, include_global: bool) -> SplitPlan {
    plan_with_grid(dims, tile, compute_grid(dims, tile, max_patches), include_global)
}

/// Split plan for an explicit grid.
pub fn plan_with_grid(dims: ImageDims, tile: usize, grid: GridShape, include_global: bool) -> SplitPlan {
    assert!(grid.p_h >= 1 && grid.p_w >= 1, "grid must be non-empty");
    let resize_to = ImageDims { h_px: grid.p_h * tile, w_px: grid.p_w * tile };
    let tiles = (0..grid.p_h)
        .flat_map(|r| (0..grid.p_w).map(move |c| TileBox { y: r * tile, x: c * tile, h: tile, w: tile }))
        .collect();
    SplitPlan { source: dims, tile, resize_to, grid, tiles, include_global }
}

/// Cuts `img` into views: the global view first (if requested), then the
/// local tiles of the resized image in row-major order.
pub fn apply_split(img: &RasterImage, plan: &SplitPlan) -> Result<Vec<RasterImage>> {
    if img.dims() != plan.source {
        return Err(Error::contract(format!(
            "image is {}x{} but plan was made for {}x{}",
            img.dims().h_px,
            img.dims().w_px,
            plan.source.h_px,
            plan.source.w_px
        )));
    }
    let mut views = Vec::with_capacity(plan.view_count());
    if plan.include_global {
        views.push(img.resize_bilinear(ImageDims { h_px: plan.tile, w_px: plan.tile }));
    }
    let resized = img.resize_bilinear(plan.resize_to);
    for b in &plan.tiles {
        views.push(resized.crop(b.y, b.x, b.h, b.w)?);
    }
    Ok(views)
}

/// Reassembles local tiles (row-major) into the resized image.
pub fn reassemble(locals: &[RasterImage], plan: &SplitPlan) -> Result<RasterImage> {
    if locals.len() != plan.tiles.len() {
        return Err(Error::contract(format!("expected {} tiles, got {}", plan.tiles.len(), locals.len())));
    }
    let mut out = RasterImage::filled(plan.resize_to, [0.0; 3]);
    for (tile, b) in locals.iter().zip(&plan.tiles) {
        for y in 0..b.h {
            for x in 0..b.w {
                out.set_pixel(b.y + y, b.x + x, tile.pixel(y, x));
            }
        }
    }
    Ok(out)
}

/// Named splitting strategies used in budget reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Whole image resized to one tile, no global/local pairing.
    Resize,
    /// Fixed 2×2 split plus global view.
    Uniform4,
    /// Dynamic split capped at 4 tiles, plus global view.
    Ds4,
    /// Dynamic split capped at 12 tiles, plus global view.
    Ds12,
}

impl SplitStrategy {
    pub fn plan(self, dims: ImageDims, tile: usize) -> SplitPlan {
        match self {
            SplitStrategy::Resize => plan_with_grid(dims, tile, GridShape { p_h: 1, p_w: 1 }, false),
            SplitStrategy::Uniform4 => plan_with_grid(dims, tile, GridShape { p_h: 2, p_w: 2 }, true),
            SplitStrategy::Ds4 => plan_split(dims, tile, 4, true),
            SplitStrategy::Ds12 => plan_split(dims, tile, 12, true),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitStrategy::Resize => "resize",
            SplitStrategy::Uniform4 => "uniform4",
            SplitStrategy::Ds4 => "ds4",
            SplitStrategy::Ds12 => "ds12",
        }
    }
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resize" => Ok(SplitStrategy::Resize),
            "uniform4" => Ok(SplitStrategy::Uniform4),
            "ds4" => Ok(SplitStrategy::Ds4),
            "ds12" => Ok(SplitStrategy::Ds12),
            other => Err(format!("unknown strategy `{other}` (expected resize, uniform4, ds4 or ds12)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(h: usize, w: usize) -> ImageDims {
        ImageDims::new(h, w).unwrap()
    }

    /// Brute-force cap oracle using floating-point logs and an explicit sort.
    fn oracle_grid(h: usize, w: usize, max: usize) -> GridShape {
        let target = (h as f64 / w as f64).ln();
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for a in 1..=max {
            for b in 1..=max {
                if a * b <= max {
                    cands.push((((a as f64 / b as f64).ln() - target).abs(), a, b));
                }
            }
        }
        cands.sort_by(|x, y| {
            x.0.partial_cmp(&y.0)
                .unwrap()
                .then((y.1 * y.2).cmp(&(x.1 * x.2)))
                .then(y.1.cmp(&x.1))
        });
        GridShape { p_h: cands[0].1, p_w: cands[0].2 }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(compute_grid(dims(336, 336), 336, 12), GridShape { p_h: 1, p_w: 1 });
        assert_eq!(compute_grid(dims(672, 672), 336, 12), GridShape { p_h: 2, p_w: 2 });
        assert_eq!(compute_grid(dims(1008, 1344), 336, 12), GridShape { p_h: 3, p_w: 4 });
        assert_eq!(plan_split(dims(1008, 1344), 336, 12, true).view_count(), 13);
        assert_eq!(plan_split(dims(672, 672), 336, 12, true).view_count(), 5);
    }

    #[test]
    fn tall_image_cap_matches_brute_force() {
        let g = compute_grid(dims(5000, 400), 336, 12);
        assert_eq!(g, oracle_grid(5000, 400, 12));
        assert_eq!(g, GridShape { p_h: 12, p_w: 1 });
    }

    #[test]
    fn cap_ties_prefer_more_patches() {
        // Square but over budget: (1,1), (2,2), (3,3) tie on distortion; (3,3) wins.
        assert_eq!(compute_grid(dims(2000, 2000), 336, 12), GridShape { p_h: 3, p_w: 3 });
        assert_eq!(compute_grid(dims(2000, 1000), 336, 12), GridShape { p_h: 4, p_w: 2 });
    }

    #[test]
    fn slightly_oversized_image_rounds_up() {
        // ⌈700/336⌉ = 3 in both directions; 9 tiles are within budget.
        let p = plan_split(dims(700, 700), 336, 12, true);
        assert_eq!(p.grid, GridShape { p_h: 3, p_w: 3 });
        assert_eq!(p.resize_to, dims(1008, 1008));
    }

    #[test]
    fn uniform_split_boxes() {
        let p = plan_split(dims(672, 672), 336, 12, true);
        let corners: Vec<(usize, usize)> = p.tiles.iter().map(|b| (b.y, b.x)).collect();
        assert_eq!(corners, vec![(0, 0), (0, 336), (336, 0), (336, 336)]);
        assert!(p.tiles.iter().all(|b| b.h == 336 && b.w == 336));
    }

    #[test]
    fn single_tile_views_match() {
        let img = RasterImage::filled(dims(336, 336), [0.3, 0.6, 0.9]);
        let views = apply_split(&img, &plan_split(img.dims(), 336, 12, true)).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0], views[1]);
    }

    #[test]
    fn constant_image_gives_constant_views() {
        let img = RasterImage::filled(dims(500, 900), [0.1, 0.2, 0.3]);
        let plan = plan_split(img.dims(), 336, 12, true);
        for v in apply_split(&img, &plan).unwrap() {
            assert!(v.pixels().chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
        }
    }

    #[test]
    fn quadrant_colors_land_in_matching_tiles() {
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let mut img = RasterImage::filled(dims(672, 672), [0.0; 3]);
        for y in 0..672 {
            for x in 0..672 {
                img.set_pixel(y, x, colors[(y / 336) * 2 + x / 336]);
            }
        }
        let views = apply_split(&img, &plan_split(img.dims(), 336, 12, true)).unwrap();
        assert_eq!(views.len(), 5);
        for (v, c) in views[1..].iter().zip(colors) {
            assert_eq!(v.mean_color(), c);
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let img = RasterImage::filled(dims(100, 100), [0.0; 3]);
        let plan = plan_split(dims(200, 100), 336, 12, true);
        assert!(matches!(apply_split(&img, &plan), Err(Error::Contract(_))));
    }

    #[test]
    fn strategy_view_counts() {
        let d = dims(672, 672);
        assert_eq!(SplitStrategy::Resize.plan(d, 336).view_count(), 1);
        assert_eq!(SplitStrategy::Uniform4.plan(d, 336).view_count(), 5);
        assert_eq!(SplitStrategy::Ds4.plan(dims(1344, 1344), 336).view_count(), 5);
        assert!("ds13".parse::<SplitStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn uncapped_grid_is_ceiling(h in 1usize..4000, w in 1usize..4000) {
            let (ch, cw) = (h.div_ceil(336), w.div_ceil(336));
            let g = compute_grid(dims(h, w), 336, 12);
            if ch * cw <= 12 {
                prop_assert_eq!(g, GridShape { p_h: ch, p_w: cw });
            } else {
                prop_assert_eq!(g, oracle_grid(h, w, 12));
            }
            prop_assert!((1..=12).contains(&g.patches()));
            let views = plan_split(dims(h, w), 336, 12, true).view_count();
            prop_assert!((2..=13).contains(&views));
        }

        #[test]
        fn plan_tiles_cover_resized_image(h in 1usize..3000, w in 1usize..3000) {
            let p = plan_split(dims(h, w), 336, 12, true);
            prop_assert_eq!(p.resize_to.h_px, p.grid.p_h * 336);
            prop_assert_eq!(p.resize_to.w_px, p.grid.p_w * 336);
            let area: usize = p.tiles.iter().map(|b| b.h * b.w).sum();
            prop_assert_eq!(area, p.resize_to.h_px * p.resize_to.w_px);
            for (i, a) in p.tiles.iter().enumerate() {
                for b in &p.tiles[i + 1..] {
                    let disjoint = a.y + a.h <= b.y || b.y + b.h <= a.y || a.x + a.w <= b.x || b.x + b.w <= a.x;
                    prop_assert!(disjoint);
                }
            }
            prop_assert_eq!(p.clone(), plan_split(dims(h, w), 336, 12, true));
        }

        #[test]
        fn growing_an_image_never_shrinks_the_uncapped_grid(
            h in 1usize..3000, w in 1usize..3000, dh in 0usize..500, dw in 0usize..500
        ) {
            let big = compute_grid(dims(h + dh, w + dw), 336, usize::MAX / 4);
            let small = compute_grid(dims(h, w), 336, usize::MAX / 4);
            prop_assert!(big.patches() >= small.patches());
        }

        #[test]
        fn tiles_reassemble_bit_exactly(h in 20usize..90, w in 20usize..90, seed in 0u64..1000) {
            let mut img = RasterImage::filled(dims(h, w), [0.0; 3]);
            for y in 0..h {
                for x in 0..w {
                    let v = ((y * 31 + x * 17 + seed as usize) % 97) as f64 / 96.0;
                    img.set_pixel(y, x, [v, 1.0 - v, v * 0.5]);
                }
            }
            let plan = plan_split(img.dims(), 32, 12, true);
            let views = apply_split(&img, &plan).unwrap();
            prop_assert_eq!(views.len(), plan.grid.patches() + 1);
            let whole = reassemble(&views[1..], &plan).unwrap();
            prop_assert_eq!(whole, img.resize_bilinear(plan.resize_to));
        }
    }
}
