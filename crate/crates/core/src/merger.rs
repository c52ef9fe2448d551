//! Visual merger: mean pooling of encoder token grids over `w × w` windows.

use serde::{Deserialize, Serialize};

use crate::autograd::{mean_pool_forward, Graph, Var};
use crate::encoder::TokenGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOp {
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub window: usize,
    #[serde(default)]
    pub op: MergeOp,
}

impl MergeSpec {
    pub fn mean(window: usize) -> Self {
        assert!(window >= 1, "merge window must be at least 1");
        Self { window, op: MergeOp::Mean }
    }
}

/// Pools `grid` into a `⌈g_h/w⌉ × ⌈g_w/w⌉` grid. Windows that run past the
/// edge are averaged over the cells they actually cover.
pub fn merge(grid: &TokenGrid, spec: MergeSpec) -> TokenGrid {
    let w = spec.window;
    let features = mean_pool_forward(grid.features(), grid.g_h(), grid.g_w(), w);
    TokenGrid::new(grid.g_h().div_ceil(w), grid.g_w().div_ceil(w), features)
}

/// Differentiable merge of a `g_h × g_w` grid held in graph node `x`.
pub fn merge_var(graph: &mut Graph, x: Var, g_h: usize, g_w: usize, spec: MergeSpec) -> Var {
    if spec.window == 1 {
        return x;
    }
    graph.mean_pool(x, g_h, g_w, spec.window)
}

/// Tokens left from a `g × g` grid after merging with window `w`.
pub fn merged_token_count(g: usize, w: usize) -> usize {
    assert!(g >= 1 && w >= 1, "grid side and window must be positive");
    let side = g.div_ceil(w);
    side * side
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(g_h: usize, g_w: usize, d: usize, seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenGrid::new(g_h, g_w, Tensor::uniform(g_h * g_w, d, 1.0, &mut rng))
    }

    #[test]
    fn window_one_is_bitwise_identity() {
        let g = random_grid(24, 24, 8, 1);
        assert_eq!(merge(&g, MergeSpec::mean(1)), g);
    }

    #[test]
    fn window_three_gives_eight_by_eight() {
        let m = merge(&random_grid(24, 24, 4, 2), MergeSpec::mean(3));
        assert_eq!((m.g_h(), m.g_w(), m.len()), (8, 8, 64));
    }

    #[test]
    fn constant_grid_stays_constant() {
        let g = TokenGrid::new(24, 24, Tensor::filled(576, 3, 0.375));
        for w in 1..=9 {
            let m = merge(&g, MergeSpec::mean(w));
            assert!(m.features().data().iter().all(|&v| v == 0.375), "w={w}");
        }
    }

    #[test]
    fn clipped_edge_windows_average_actual_cells() {
        // 5×5 grid, one channel holding the cell index.
        let g = TokenGrid::new(5, 5, Tensor::from_vec(25, 1, (0..25).map(f64::from).collect()));
        let m = merge(&g, MergeSpec::mean(2));
        assert_eq!((m.g_h(), m.g_w()), (3, 3));
        // Hand-computed window means.
        let expect = [
            (0.0 + 1.0 + 5.0 + 6.0) / 4.0,
            (2.0 + 3.0 + 7.0 + 8.0) / 4.0,
            (4.0 + 9.0) / 2.0,
            (10.0 + 11.0 + 15.0 + 16.0) / 4.0,
            (12.0 + 13.0 + 17.0 + 18.0) / 4.0,
            (14.0 + 19.0) / 2.0,
            (20.0 + 21.0) / 2.0,
            (22.0 + 23.0) / 2.0,
            24.0,
        ];
        assert_eq!(m.features().data(), &expect);
    }

    #[test]
    fn merged_counts() {
        assert_eq!(merged_token_count(24, 2), 144);
        assert_eq!(merged_token_count(24, 1), 576);
        assert_eq!(merged_token_count(24, 8), 9);
        assert_eq!(30 * merged_token_count(24, 2), 4320);
        let table: Vec<usize> = [1, 3, 4, 6, 8].iter().map(|&w| merged_token_count(24, w)).collect();
        assert_eq!(table, vec![576, 64, 36, 16, 9]);
    }

    proptest! {
        #[test]
        fn merge_commutes_with_channel_maps(w in 1usize..7, seed in 0u64..500) {
            let g = random_grid(12, 12, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let a = Tensor::uniform(4, 3, 2.0, &mut rng);
            let lhs = merge(&TokenGrid::new(12, 12, g.features().matmul(&a)), MergeSpec::mean(w));
            let rhs = merge(&g, MergeSpec::mean(w)).features().matmul(&a);
            prop_assert!(lhs.features().max_abs_diff(&rhs) <= 1e-12);
        }

        #[test]
        fn divisible_windows_preserve_global_mean(w in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 24]), seed in 0u64..500) {
            let g = random_grid(24, 24, 3, seed);
            let m = merge(&g, MergeSpec::mean(w));
            prop_assert_eq!(g.len() / m.len(), w * w);
            for c in 0..3 {
                let before: f64 = (0..g.len()).map(|r| g.features().get(r, c)).sum::<f64>() / g.len() as f64;
                let after: f64 = (0..m.len()).map(|r| m.features().get(r, c)).sum::<f64>() / m.len() as f64;
                prop_assert!((before - after).abs() <= 1e-12);
            }
        }
    }
}
