//! Shared fixtures for the benchmarks.

use std::path::Path;

use wisteria_core::experiments::{prepare_data, ExperimentConfig, PreparedData};
use wisteria_core::model::init_params;
use wisteria_core::ontology::laplacian;
use wisteria_core::{Laplacian, LossConfig, ModelParams, ViewSet};

/// Training rows of the reference configuration (seed 0) with fresh
/// parameters.
pub struct Fixture {
    pub data: PreparedData,
    pub inputs: Vec<Vec<f64>>,
    pub views: ViewSet,
    pub lap: Laplacian,
    pub params: ModelParams,
    pub loss: LossConfig,
}

impl Fixture {
    pub fn reference() -> Self {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
        let cfg = ExperimentConfig::load(&path).expect("reference config");
        let seed = cfg.seeds[0];
        let data = prepare_data(&cfg, seed, &cfg.operators, 0.0).expect("data");
        let inputs = data.split.train.iter().map(|&i| data.dataset.records[i].x.clone()).collect();
        let views = data.views.select_records(&data.split.train);
        let lap = laplacian(&data.graph);
        let params = init_params(
            &cfg.model_for(seed),
            cfg.gen.feature_dim,
            data.graph.num_nodes(),
            views.num_views(),
        )
        .expect("params");
        Fixture {
            data,
            inputs,
            views,
            lap,
            params,
            loss: cfg.loss_for(seed),
        }
    }

    pub fn input_refs(&self) -> Vec<&[f64]> {
        self.inputs.iter().map(Vec::as_slice).collect()
    }
}
