//! Regenerates `tests/data/logistic_10k.csv`: 10 000 rows of five standard
//! normal features (rounded to six decimals) and a Bernoulli response drawn
//! from the logistic model at `THETA0`.
//!
//! ```text
//! cargo run -p dpss --example make_logistic_csv -- crates/core/tests/data/logistic_10k.csv
//! ```

use std::io::Write;

use dpss::SeededRng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const THETA0: [f64; 5] = [0.5, -0.5, 0.3, -0.3, 0.2];
const ROWS: usize = 10_000;
const SEED: u64 = 20261015;

fn main() -> std::io::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "logistic_10k.csv".into());
    let mut rng = SeededRng::new(SEED);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for _ in 0..ROWS {
        let x: Vec<f64> = (0..THETA0.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * 1e6).round() / 1e6
            })
            .collect();
        let eta: f64 = x.iter().zip(THETA0).map(|(a, b)| a * b).sum();
        let y = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        let fields: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{},{y}", fields.join(","))?;
    }
    out.flush()
}
