//! Token and position budgets for each splitting strategy.

use mmvl::budget::{budget, BudgetArgs};
use mmvl::glhr::SplitStrategy;

fn main() -> mmvl::Result<()> {
    println!("{:<10} {:>10} {:>6} {:>8} {:>8} {:>7} {:>7}", "strategy", "input", "views", "raw", "merged", "naive", "shared");
    for (h, w) in [(336, 336), (672, 672), (800, 2400)] {
        for s in [SplitStrategy::Resize, SplitStrategy::Uniform4, SplitStrategy::Ds4, SplitStrategy::Ds12] {
            let r = budget(&BudgetArgs::image(h, w, s, 2))?;
            println!(
                "{:<10} {:>10} {:>6} {:>8} {:>8} {:>7} {:>7}",
                r.strategy,
                format!("{h}x{w}"),
                r.views,
                r.raw_tokens,
                r.merged_tokens,
                r.naive_position_ids,
                r.shared_position_ids
            );
        }
    }
    let r = budget(&BudgetArgs::frames(30, 2))?;
    println!("{}", serde_json::to_string_pretty(&r).expect("serializes"));
    Ok(())
}
