//! Synthetic datasets built through the same library calls the CLI uses.

use auroral::config::RunConfig;
use auroral::geomodel::{gen_drivers, sample_traces, DriverSeries, Observation};
use auroral::ingest::{build_features, clean_targets, FeatureTable};
use auroral::train::{build_sparse_samples, SparseSample};

pub struct World {
    pub drivers: DriverSeries,
    pub obs: Vec<Observation>,
}

pub fn config(text: &str) -> RunConfig {
    RunConfig::parse(text).unwrap_or_else(|e| panic!("bad test config: {e}\n{text}"))
}

pub fn world(cfg: &RunConfig, days: f64) -> World {
    let mut params = cfg.world.clone();
    params.seed = cfg.seed;
    let drivers = gen_drivers(&params, (days * 86_400.0) as i64).unwrap();
    let obs = sample_traces(&params, &drivers, cfg.obs_cadence).unwrap();
    World { drivers, obs }
}

/// Cleaned, featurized table with normalization fitted over all rows.
pub fn point_table(cfg: &RunConfig, w: &World) -> FeatureTable {
    let (obs, _) = clean_targets(w.obs.clone(), cfg.clean_mode()).unwrap();
    let (mut table, _) = build_features(&w.drivers, &obs, &cfg.schema().unwrap()).unwrap();
    table.fit_normalization();
    table
}

pub fn sparse_samples(cfg: &RunConfig, w: &World) -> (Vec<SparseSample>, auroral::ingest::FeatureSchema) {
    let (obs, _) = clean_targets(w.obs.clone(), cfg.clean_mode()).unwrap();
    let schema = cfg.schema().unwrap().without_spatial().unwrap();
    let (samples, _) = build_sparse_samples(&w.drivers, &obs, &schema, cfg.grid().unwrap(), cfg.sparse_step).unwrap();
    (samples, schema)
}
