//! Token and position-id accounting for an image or a frame sequence.
//!
//! Pure arithmetic over the split planner, the merger and the position
//! assigner. No model parameters are involved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpid::{assign_positions, count_positions, PositionMode, Segment, SequenceLayout};
use crate::glhr::{plan_split, SplitStrategy, DEFAULT_TILE};
use crate::image::ImageDims;
use crate::merger::merged_token_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BudgetInput {
    Image { h_px: usize, w_px: usize },
    /// Each frame is one view, resized to the tile.
    Frames { count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetArgs {
    pub input: BudgetInput,
    pub strategy: SplitStrategy,
    pub tile_px: usize,
    pub patch_px: usize,
    /// Overrides the tile cap of the dynamic strategies.
    pub max_patches: Option<usize>,
    pub window: usize,
    pub text_tokens: usize,
}

impl BudgetArgs {
    pub fn image(h_px: usize, w_px: usize, strategy: SplitStrategy, window: usize) -> Self {
        Self::new(BudgetInput::Image { h_px, w_px }, strategy, window)
    }

    pub fn frames(count: usize, window: usize) -> Self {
        Self::new(BudgetInput::Frames { count }, SplitStrategy::Resize, window)
    }

    fn new(input: BudgetInput, strategy: SplitStrategy, window: usize) -> Self {
        Self { input, strategy, tile_px: DEFAULT_TILE, patch_px: 14, max_patches: None, window, text_tokens: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub input: BudgetInput,
    /// `per_frame` for frame inputs.
    pub strategy: String,
    pub tile_px: usize,
    pub window: usize,
    pub grid: Option<[usize; 2]>,
    pub views: usize,
    pub tokens_per_view: usize,
    pub merged_tokens_per_view: usize,
    pub raw_tokens: usize,
    pub merged_tokens: usize,
    pub text_tokens: usize,
    pub naive_position_ids: usize,
    pub shared_position_ids: usize,
}

pub fn budget(args: &BudgetArgs) -> Result<BudgetReport> {
    if args.patch_px == 0 || args.tile_px == 0 || args.tile_px % args.patch_px != 0 {
        return Err(Error::config("tile", "tile must be a positive multiple of the patch size"));
    }
    if args.window == 0 {
        return Err(Error::config("window", "must be at least 1"));
    }
    if args.max_patches == Some(0) {
        return Err(Error::config("max_patches", "must be at least 1"));
    }
    let g = args.tile_px / args.patch_px;
    let (views, grid, strategy) = match args.input {
        BudgetInput::Image { h_px, w_px } => {
            let dims = ImageDims::new(h_px, w_px)?;
            let plan = match (args.strategy, args.max_patches) {
                (SplitStrategy::Ds4 | SplitStrategy::Ds12, Some(cap)) => plan_split(dims, args.tile_px, cap, true),
                (s, _) => s.plan(dims, args.tile_px),
            };
            (plan.view_count(), Some([plan.grid.p_h, plan.grid.p_w]), args.strategy.to_string())
        }
        BudgetInput::Frames { count } => {
            if count == 0 {
                return Err(Error::config("frames", "must be at least 1"));
            }
            (count, None, "per_frame".to_string())
        }
    };
    let per_view = merged_token_count(g, args.window);
    let mut segments = Vec::with_capacity(views + 1);
    segments.push(Segment::Text(args.text_tokens));
    segments.extend(std::iter::repeat(Segment::VisualFrame(per_view)).take(views));
    let layout = SequenceLayout::new(segments);
    let naive = count_positions(&assign_positions(layout.clone(), PositionMode::Naive), PositionMode::Naive);
    let shared = count_positions(&assign_positions(layout, PositionMode::SharedFpid), PositionMode::SharedFpid);
    Ok(BudgetReport {
        input: args.input,
        strategy,
        tile_px: args.tile_px,
        window: args.window,
        grid,
        views,
        tokens_per_view: g * g,
        merged_tokens_per_view: per_view,
        raw_tokens: views * g * g,
        merged_tokens: views * per_view,
        text_tokens: args.text_tokens,
        naive_position_ids: naive,
        shared_position_ids: shared,
    })
}
