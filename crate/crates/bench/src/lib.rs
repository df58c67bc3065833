//! Benchmark fixtures shared by the criterion targets.

use advbench_core::digits::{self, SynthConfig};
use advbench_core::model::{build, Model};
use advbench_core::{Arch, Dataset, ModelSpec};

pub const IMAGE_SIZE: usize = 14;

pub fn fixture_model() -> Model {
    build(&ModelSpec::new(Arch::CnnA, [IMAGE_SIZE, IMAGE_SIZE, 1], 10), 1).expect("valid spec")
}

pub fn fixture_batch(n: usize) -> Dataset {
    digits::generate(
        n,
        &SynthConfig {
            size: IMAGE_SIZE,
            ..SynthConfig::default()
        },
    )
}
