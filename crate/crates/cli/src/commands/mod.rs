//! One module per subcommand. Each takes parsed flags, loads and resolves
//! the config, writes its artifacts under the run directory, and returns a
//! [`crate::error::Result`] whose error variant fixes the exit code.

pub mod ablate;
pub mod probe_eval;
pub mod report;
pub mod train;
pub mod variance_lab;

use poise_core::rng;

/// Deterministic permutation of `0..len` drawn from the split stream.
/// Shared by probe-eval and ablate so a given seed always produces the same
/// train/test membership.
pub(crate) fn split_order(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rng::stream(seed, rng::tag::SPLIT, 0, 0);
    order.shuffle(&mut rng);
    order
}
