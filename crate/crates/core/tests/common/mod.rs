//! A small synthetic dataset shared by the integration tests.
// Each test binary uses a different subset of the fixture.
#![allow(dead_code)]

use slid_core::config::RunConfig;
use slid_core::corpus::{closed_set_spec, generate_synth, Corpus};
use slid_core::dataset::{prepare_dataset, Dataset};

pub struct Fixture {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub ds: Dataset,
    _dir: tempfile::TempDir,
}

pub fn fixture(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.reseed(seed);
    cfg.train.max_epochs = 1;
    let corpus = generate_synth(&closed_set_spec(seed, 8, 12.0, 0.01), &cfg.features, dir.path()).unwrap();
    let ds = prepare_dataset(&corpus, &cfg.prepare_options()).unwrap();
    Fixture {
        cfg,
        corpus,
        ds,
        _dir: dir,
    }
}
