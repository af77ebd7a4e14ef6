//! Serves the built-in encoders over the scorer protocol on stdin/stdout.
//!
//! Usage: `rolekit-scorer [SEMANTIC_SEED [STRUCTURE_SEED]]`

use std::io::{self, BufWriter};

use rolekit::encoders::BuiltinScorer;
use rolekit::scorer::serve;

fn main() {
    let seeds: Vec<u64> = match std::env::args().skip(1).map(|a| a.parse()).collect() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("rolekit-scorer: seeds must be integers: {e}");
            std::process::exit(2);
        }
    };
    let scorer = BuiltinScorer::new(seeds.first().copied().unwrap_or(0), seeds.get(1).copied().unwrap_or(0));
    let stdin = io::stdin().lock();
    if let Err(e) = serve(&scorer, stdin, BufWriter::new(io::stdout().lock())) {
        eprintln!("rolekit-scorer: {e}");
        std::process::exit(1);
    }
}
