//! Shared fixtures for the criterion benchmarks.

use ssmprune_core::calib::CalibSet;
use ssmprune_core::toy::{build_toy_model, preset_dims, sample_corpus};
use ssmprune_core::{ModelDims, ModelParams};

/// The standard benchmark subject: the `toy` preset and a sampled corpus.
pub fn bench_fixture() -> (ModelParams, ModelDims, CalibSet) {
    let dims = preset_dims("toy").expect("toy preset exists");
    let model = build_toy_model(&dims, 20240 + 1).expect("toy preset fits in memory");
    let corpus = sample_corpus(&model, &dims, 7, 4, 24).expect("sampling succeeds");
    (model, dims, corpus)
}
