#![allow(dead_code)]

use dpnash::{CommGraph, Game, ProsumerParams, SeekEngine};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random game with `I` in 3..=8, `c` in [0.01, 0.05] $/kWh², `d` in
/// [10, 30] kWh and `a` in [10, 200].
pub fn random_game(seed: u64) -> Game {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8);
    let prosumers = (0..n)
        .map(|_| {
            ProsumerParams::new(rng.random_range(0.01..0.05), rng.random_range(10.0..30.0)).unwrap()
        })
        .collect();
    Game::new(prosumers, rng.random_range(10.0..200.0)).unwrap()
}

pub fn game_strategy() -> impl Strategy<Value = Game> {
    (3usize..=8, 10.0f64..200.0).prop_flat_map(|(n, a)| {
        prop::collection::vec((0.01f64..0.05, 10.0f64..30.0), n).prop_map(move |ps| {
            let prosumers = ps
                .into_iter()
                .map(|(c, d)| ProsumerParams::new(c, d).unwrap())
                .collect();
            Game::new(prosumers, a).unwrap()
        })
    })
}

pub fn full_graph(n: usize) -> CommGraph {
    CommGraph::fully_connected(n, 0.1).unwrap()
}

/// Victim rows at iterations `start..start+len`.
pub fn victim_window(
    engine: &mut SeekEngine<'_>,
    victim: usize,
    start: usize,
    len: usize,
) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(len);
    while engine.iteration() < start + len {
        if engine.iteration() >= start {
            rows.push(engine.row(victim).to_vec());
        }
        engine.step().unwrap();
    }
    rows
}
