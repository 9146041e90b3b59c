//! Oracle-driven dataset collection.

use super::{DataError, Dataset, DatasetManifest, Episode, EpisodeMeta, FrameRecord, CLASS_NAMES, FORMAT_VERSION};
use crate::oracle::{oracle_control_with, OracleParams};
use crate::route::random_route;
use crate::sim::map::{TownMap, TownParams};
use crate::sim::render::render_both;
use crate::sim::weather::WeatherParams;
use crate::sim::{create_world_on_map, SimError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectConfig {
    pub map_seed: u64,
    /// Weather names, rotated across episodes.
    pub weathers: Vec<String>,
    pub episodes: usize,
    pub frames_per_episode: usize,
    pub vehicles_range: (usize, usize),
    pub pedestrians_range: (usize, usize),
    /// Fraction of episodes that carry seg + intention annotations.
    pub annotation_fraction: f64,
    pub seed: u64,
    /// Collection asserts that all four commands appear in the dataset.
    pub require_all_commands: bool,
    pub config_hash: String,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            map_seed: 1,
            weathers: WeatherParams::train_set().iter().map(|w| w.name.clone()).collect(),
            episodes: 200,
            frames_per_episode: 200,
            vehicles_range: (2, 8),
            pedestrians_range: (4, 12),
            annotation_fraction: 1.0,
            seed: 7,
            require_all_commands: true,
            config_hash: String::new(),
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x
}

/// Run oracle episodes and build the dataset in memory. Deterministic for
/// a given config regardless of parallelism.
pub fn collect_dataset(cfg: &CollectConfig) -> Result<Dataset, DataError> {
    let dt = 0.1;
    let map = Arc::new(TownMap::generate(cfg.map_seed, TownParams::default()));

    // Per-episode annotation flags: a seeded shuffle, exactly
    // ceil(fraction * episodes) annotated.
    let n_annot = ((cfg.annotation_fraction * cfg.episodes as f64).ceil() as usize).min(cfg.episodes);
    let mut order: Vec<usize> = (0..cfg.episodes).collect();
    let mut arng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xa0_0a));
    order.shuffle(&mut arng);
    let mut annotated = vec![false; cfg.episodes];
    for &e in order.iter().take(n_annot) {
        annotated[e] = true;
    }

    let results: Vec<Result<Episode, DataError>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| collect_episode(cfg, Arc::clone(&map), e, annotated[e], dt))
        .collect();

    let mut episodes = Vec::with_capacity(cfg.episodes);
    for r in results {
        match r {
            Ok(ep) => episodes.push(ep),
            // Oracle off-route is logged and the episode discarded.
            Err(DataError::Sim(SimError::OffRoute { lateral, .. })) => {
                eprintln!("collect: discarding off-route episode (lateral {lateral:.2} m)");
            }
            Err(e) => return Err(e),
        }
    }
    // Reassign contiguous ids after any discards.
    for (i, ep) in episodes.iter_mut().enumerate() {
        ep.meta.id = i;
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        fps: 1.0 / dt,
        config_hash: cfg.config_hash.clone(),
        image_codec: "png8-exact".into(),
        class_map: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        whitebox: false,
        episodes: episodes.iter().map(|e| e.meta.clone()).collect(),
    };
    let ds = Dataset { manifest, episodes };

    if cfg.require_all_commands {
        let seen = ds.commands_present();
        if seen.iter().any(|s| !s) {
            return Err(DataError::Invalid(format!(
                "collected dataset must contain all four commands, saw {seen:?}; \
                 increase episodes or disable require_all_commands"
            )));
        }
    }
    Ok(ds)
}

fn collect_episode(
    cfg: &CollectConfig,
    map: Arc<TownMap>,
    index: usize,
    annotated: bool,
    dt: f64,
) -> Result<Episode, DataError> {
    let ep_seed = mix_seed(cfg.seed, index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
    let weather_name = &cfg.weathers[index % cfg.weathers.len()];
    let weather = WeatherParams::by_name(weather_name)
        .ok_or_else(|| DataError::Invalid(format!("unknown weather '{weather_name}'")))?;
    let n_vehicles = rng.gen_range(cfg.vehicles_range.0..=cfg.vehicles_range.1);
    let n_pedestrians = rng.gen_range(cfg.pedestrians_range.0..=cfg.pedestrians_range.1);

    // Route long enough that the episode never outruns it.
    let min_len = (cfg.frames_per_episode as f64 * dt * 6.0 * 0.9 + 40.0).max(150.0);
    let route = random_route(&map, &mut rng, min_len, min_len + 300.0, true)
        .ok_or_else(|| DataError::Invalid("no route satisfying the length bound".into()))?;

    let mut world = create_world_on_map(map, weather, n_vehicles, n_pedestrians, ep_seed)?;
    world.set_ego_pose(route.poly.eval(0.0), route.poly.heading_at(0.0), 0.0);

    let oparams = OracleParams::default();
    let mut frames = Vec::with_capacity(cfg.frames_per_episode);
    for _ in 0..cfg.frames_per_episode {
        let command = world.high_level_command(&route)?;
        let intents = world.compute_stop_intentions(&route);
        let (img, seg, speed) = render_both(&world);
        let control = oracle_control_with(&world, &route, &oparams)?;
        frames.push(FrameRecord::new(
            &img,
            speed,
            command,
            control,
            annotated.then_some(&seg),
            annotated.then_some(intents.as_array()),
        )?);
        world.step(control, dt)?;
    }

    Ok(Episode {
        meta: EpisodeMeta {
            id: index,
            map_seed: cfg.map_seed,
            weather_name: weather_name.clone(),
            n_vehicles,
            n_pedestrians,
            frame_count: frames.len(),
            annotated,
        },
        frames,
    })
}
