//! Fixtures shared by the benchmarks.

use relbal_core::data::generate_synthetic;
use relbal_core::head::init_params;
use relbal_core::{Dataset, HeadConfig, HeadParameters, SyntheticSpec};

/// Default-sized head and a small synthetic batch source.
pub fn fixture(per_class: usize) -> (HeadParameters, Dataset) {
    let ds = generate_synthetic(&SyntheticSpec {
        per_class,
        ..SyntheticSpec::default()
    })
    .expect("valid spec");
    let params = init_params(HeadConfig::default(), 7).expect("valid config");
    (params, ds)
}

pub fn batch_inputs(ds: &Dataset, size: usize) -> (Vec<&[f64]>, Vec<usize>) {
    ds.samples()
        .iter()
        .take(size)
        .map(|s| (s.embedding.as_slice(), s.label))
        .unzip()
}
