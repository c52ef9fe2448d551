//! Mean-pool an encoder token grid at several window sizes.

use mmvl::glhr::DEFAULT_TILE;
use mmvl::image::{ImageDims, RasterImage};
use mmvl::merger::{merge, merged_token_count, MergeSpec};
use mmvl::model::{Model, ModelConfig};

fn main() -> mmvl::Result<()> {
    let model = Model::new(ModelConfig::default(), 0)?;
    let mut view = RasterImage::filled(ImageDims::square(DEFAULT_TILE)?, [0.2, 0.2, 0.2]);
    for y in 100..200 {
        for x in 50..300 {
            view.set_pixel(y, x, [0.9, 0.1, 0.1]);
        }
    }
    let grid = model.encoder.encode_view(&model.params, &view)?;
    println!("encoder grid: {}x{} tokens of width {}", grid.g_h(), grid.g_w(), grid.dim());
    for w in [1, 2, 3, 4, 6, 8] {
        let merged = merge(&grid, MergeSpec::mean(w));
        println!(
            "window {w}: {}x{} = {} tokens (formula {})",
            merged.g_h(),
            merged.g_w(),
            merged.len(),
            merged_token_count(grid.g_h(), w)
        );
    }
    Ok(())
}
