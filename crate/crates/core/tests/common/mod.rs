#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use dua_core::detcore::DetectorConfig;
use dua_core::runner::ExperimentConfig;
use dua_core::synthdomain::SceneConfig;

/// A configuration small enough to run every stage in a few seconds.
pub fn tiny_config(run_dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        run_dir: run_dir.to_path_buf(),
        seeds: vec![0],
        checkpoint_every: 3,
        ..Default::default()
    };
    c.data.scene = SceneConfig {
        height: 32,
        width: 32,
        min_size: 8.0,
        max_size: 14.0,
        max_objects: 2,
        ..Default::default()
    };
    c.data.source_train = 6;
    c.data.target_train = 6;
    c.data.source_test = 4;
    c.data.target_test = 4;
    c.detector = DetectorConfig {
        height: 32,
        width: 32,
        channels: [4, 6, 8],
        hidden: 8,
        anchor_size: 12.0,
        ..Default::default()
    };
    c.teacher.input_size = 12;
    c.teacher.channels = [4, 4, 4];
    c.teacher.epochs = 2;
    c.teacher.batch_size = 4;
    c.troln.height = 32;
    c.troln.width = 32;
    c.troln.channels = [4, 6, 8];
    c.troln.hidden = 8;
    c.troln.disc_hidden = 4;
    c.troln_train.iterations = 4;
    c.train.iterations = 6;
    c.train.source_per_step = 1;
    c.train.target_per_step = 1;
    c.train.lr = 0.01;
    c.train.disc_hidden = 4;
    c
}
