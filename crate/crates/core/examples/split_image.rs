//! Global-local split of an image into encoder views.
//!
//!     cargo run --example split_image -- [input.ppm] [out_dir]
//!
//! Without an input, a 700×1500 gradient is synthesized. Views are written
//! as `view_00.ppm` (global) and `view_01.ppm`… (tiles, row-major).

use std::path::PathBuf;

use mmvl::glhr::{apply_split, plan_split, reassemble, DEFAULT_MAX_PATCHES, DEFAULT_TILE};
use mmvl::image::{ImageDims, RasterImage};

fn gradient(h: usize, w: usize) -> RasterImage {
    let mut img = RasterImage::filled(ImageDims::new(h, w).unwrap(), [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(y, x, [y as f64 / h as f64, x as f64 / w as f64, 0.5]);
        }
    }
    img
}

fn main() -> mmvl::Result<()> {
    let mut args = std::env::args().skip(1);
    let img = match args.next() {
        Some(p) => RasterImage::read_ppm(p)?,
        None => gradient(700, 1500),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "split_out".into()));

    let plan = plan_split(img.dims(), DEFAULT_TILE, DEFAULT_MAX_PATCHES, true);
    println!(
        "{}x{} -> grid {}x{}, resized to {}x{}, {} views",
        img.dims().h_px,
        img.dims().w_px,
        plan.grid.p_h,
        plan.grid.p_w,
        plan.resize_to.h_px,
        plan.resize_to.w_px,
        plan.view_count()
    );
    let views = apply_split(&img, &plan)?;

    // Tiles cover the resized image exactly.
    let back = reassemble(&views[1..], &plan)?;
    assert_eq!(back, img.resize_bilinear(plan.resize_to));

    std::fs::create_dir_all(&out).map_err(|e| mmvl::Error::Io { path: out.clone(), source: e })?;
    for (i, v) in views.iter().enumerate() {
        v.write_ppm(out.join(format!("view_{i:02}.ppm")))?;
    }
    println!("wrote {} views to {}", views.len(), out.display());
    Ok(())
}
