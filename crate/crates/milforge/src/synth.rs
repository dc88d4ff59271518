//! Synthetic witness-instance benchmark used by the training smoke tests.
//!
//! Negative bags are pure Gaussian noise. Positive bags hide a small
//! fraction of witness instances whose first coordinates are shifted, so
//! a working MIL head must localize them to classify the bag.

use crate::features::FeatureBag;
use crate::matrix::Matrix;
use crate::rng::{normal, substream};
use crate::tiling::Magnification;
use rand::Rng;

pub const WITNESS_DIM: usize = 8;
pub const WITNESS_SHIFT: f64 = 1.0;
pub const WITNESS_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SynthBag {
    pub bag: FeatureBag,
    /// Instance indices carrying the shifted signal (empty for negatives).
    pub witnesses: Vec<usize>,
}

pub fn generate_benchmark(seed: u64, n_bags: usize, d: usize) -> Vec<SynthBag> {
    let mut rng = substream(seed, "synth", 0);
    (0..n_bags)
        .map(|i| {
            let label = i % 2;
            let k = rng.gen_range(50..=200);
            let mut data = Vec::with_capacity(k * d);
            for _ in 0..k * d {
                data.push(normal(&mut rng));
            }
            let mut embeddings = Matrix::from_vec(k, d, data);
            let mut witnesses = Vec::new();
            if label == 1 {
                let n_wit = ((k as f64 * WITNESS_FRACTION).round() as usize).max(1);
                while witnesses.len() < n_wit {
                    let idx = rng.gen_range(0..k);
                    if !witnesses.contains(&idx) {
                        witnesses.push(idx);
                    }
                }
                witnesses.sort_unstable();
                for &w in &witnesses {
                    for c in 0..WITNESS_DIM.min(d) {
                        *embeddings.at_mut(w, c) += WITNESS_SHIFT;
                    }
                }
            }
            SynthBag {
                bag: FeatureBag {
                    slide_id: format!("synth{i:04}"),
                    mag: Magnification::X40,
                    embeddings,
                    label: Some(label),
                },
                witnesses,
            }
        })
        .collect()
}
