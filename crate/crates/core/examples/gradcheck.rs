//! Finite-difference check of every parameter group on a small model.

use mmvl::config::TrainConfig;
use mmvl::driver::run_gradcheck;

fn main() -> mmvl::Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.model.encoder.tile_px = 112;
    cfg.model.decoder.d_m = 32;
    cfg.model.decoder.n_layers = 2;
    let run = run_gradcheck(&cfg, None)?;
    for (name, report) in [("mixed", &run.mixed), ("text only", &run.text_only)] {
        println!("{name} (loss {:.4}):", report.loss);
        for g in &report.groups {
            println!(
                "  {:<11} {:>2} coords  max rel err {:.2e}  max |grad| {:.2e}  {}",
                g.group,
                g.coordinates,
                g.max_rel_error,
                g.max_abs_analytic,
                if g.passed { "ok" } else { "FAIL" }
            );
        }
    }
    println!("projector alone: max rel err {:.2e}", run.projector_alone.max_rel_error);
    println!("passed: {}", run.passed);
    Ok(())
}
