//! Synthetic ground-truth generator.
//!
//! Produces random runway-style scenes (a straight road corridor flanked by
//! grass) with up to a few targets, and renders radar frames exhibiting the
//! effects the models must learn: quartic range decay of received power,
//! class-dependent return strength and angular spread, speckle noise,
//! occasional displaced ghost returns, occlusion attenuation, and Poisson
//! clutter hugging the road/grass boundary.
//!
//! All numeric parameters live in [`OracleConfig`] and are declared
//! configuration, not measurements. Generation is a pure function of
//! `(config, seed, frame index)`: frames may be produced in parallel and the
//! output is bit-identical to serial generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use drs_tensor::checkpoint::fnv1a64;

use crate::dataset::{Dataset, DatasetManifest, FrameRecord};
use crate::rng::substream;
use crate::scene::{
    encode_object_list, rasterize_terrain, render_points, Corridor, ObjectClass, PolarGridSpec,
    RadarFrame, SceneError, SceneObject, SceneRaster, N_FEATURES, OBJECT_CAPACITY,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Scene(#[from] SceneError),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Per-class return behavior: base power at 1 m, angular footprint, and how
/// many returns the target sheds per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub p0_db: f64,
    pub angular_spread_cells: f64,
    pub returns_min: u32,
    pub returns_max: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub grid: PolarGridSpec,
    pub seed: u64,
    pub ccr: ClassProfile,
    pub car: ClassProfile,
    pub pellets_bag: ClassProfile,
    pub metal_frame: ClassProfile,
    /// Probability weights for scenes containing 0, 1, 2, or 3 objects.
    pub object_count_weights: [f64; 4],
    pub half_width_min_m: f64,
    pub half_width_max_m: f64,
    pub heading_bias_max_rad: f64,
    pub placement_range_min_m: f64,
    pub placement_range_max_m: f64,
    pub car_speed_max: f64,
    /// Expected clutter points per frame (Poisson rate).
    pub clutter_rate: f64,
    pub clutter_power_mean_db: f64,
    pub clutter_power_std_db: f64,
    /// Clutter lands on grass cells within this many cells of the boundary.
    pub clutter_band_cells: usize,
    pub speckle_std_db: f64,
    pub ghost_prob: f64,
    pub ghost_attenuation_db: f64,
    pub ghost_range_factor_min: f64,
    pub ghost_range_factor_max: f64,
    pub occlusion_attenuation_db: f64,
    pub occlusion_half_angle_cells: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid: PolarGridSpec::default(),
            seed: 0,
            ccr: ClassProfile {
                p0_db: -10.0,
                angular_spread_cells: 0.0,
                returns_min: 1,
                returns_max: 1,
            },
            car: ClassProfile {
                p0_db: -18.0,
                angular_spread_cells: 2.0,
                returns_min: 3,
                returns_max: 6,
            },
            pellets_bag: ClassProfile {
                p0_db: -35.0,
                angular_spread_cells: 1.5,
                returns_min: 1,
                returns_max: 3,
            },
            metal_frame: ClassProfile {
                p0_db: -22.0,
                angular_spread_cells: 1.0,
                returns_min: 2,
                returns_max: 5,
            },
            object_count_weights: [0.2, 0.35, 0.3, 0.15],
            half_width_min_m: 3.0,
            half_width_max_m: 6.0,
            heading_bias_max_rad: 0.05,
            placement_range_min_m: 5.0,
            placement_range_max_m: 70.0,
            car_speed_max: 15.0,
            clutter_rate: 12.0,
            clutter_power_mean_db: -72.0,
            clutter_power_std_db: 6.0,
            clutter_band_cells: 2,
            speckle_std_db: 2.0,
            ghost_prob: 0.15,
            ghost_attenuation_db: 8.0,
            ghost_range_factor_min: 1.15,
            ghost_range_factor_max: 1.6,
            occlusion_attenuation_db: 15.0,
            occlusion_half_angle_cells: 2.0,
        }
    }
}

impl OracleConfig {
    /// Copy with every stochastic effect disabled (speckle, ghosts, clutter);
    /// target returns then follow the range equation exactly.
    pub fn noise_free(mut self) -> Self {
        self.speckle_std_db = 0.0;
        self.ghost_prob = 0.0;
        self.clutter_rate = 0.0;
        self
    }

    pub fn class_profile(&self, class: ObjectClass) -> &ClassProfile {
        match class {
            ObjectClass::Car => &self.car,
            ObjectClass::Ccr => &self.ccr,
            ObjectClass::PelletsBag => &self.pellets_bag,
            ObjectClass::MetalFrame => &self.metal_frame,
            ObjectClass::Unused => unreachable!("unused rows have no returns"),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        self.grid
            .validate()
            .map_err(|e| OracleError::InvalidConfig(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.ghost_prob) {
            return Err(OracleError::InvalidConfig(format!(
                "ghost_prob {} outside [0, 1]",
                self.ghost_prob
            )));
        }
        if self.clutter_rate < 0.0 {
            return Err(OracleError::InvalidConfig(format!(
                "clutter_rate {} must be >= 0",
                self.clutter_rate
            )));
        }
        if self.speckle_std_db < 0.0 || self.clutter_power_std_db < 0.0 {
            return Err(OracleError::InvalidConfig(
                "noise standard deviations must be >= 0".to_string(),
            ));
        }
        let wsum: f64 = self.object_count_weights.iter().sum();
        if !(wsum > 0.0) || self.object_count_weights.iter().any(|&w| w < 0.0) {
            return Err(OracleError::InvalidConfig(
                "object_count_weights must be non-negative with a positive sum".to_string(),
            ));
        }
        if !(self.half_width_max_m >= self.half_width_min_m && self.half_width_min_m > 0.0) {
            return Err(OracleError::InvalidConfig(
                "half-width bounds must satisfy 0 < min <= max".to_string(),
            ));
        }
        if !(self.placement_range_max_m > self.placement_range_min_m
            && self.placement_range_min_m > 0.0)
        {
            return Err(OracleError::InvalidConfig(
                "placement range bounds must satisfy 0 < min < max".to_string(),
            ));
        }
        for (name, p) in [
            ("ccr", &self.ccr),
            ("car", &self.car),
            ("pellets_bag", &self.pellets_bag),
            ("metal_frame", &self.metal_frame),
        ] {
            if p.returns_min < 1 || p.returns_max < p.returns_min {
                return Err(OracleError::InvalidConfig(format!(
                    "{name} return counts must satisfy 1 <= min <= max"
                )));
            }
            if p.angular_spread_cells < 0.0 {
                return Err(OracleError::InvalidConfig(format!(
                    "{name} angular spread must be >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Stable hash of the full configuration (stored in dataset manifests).
    pub fn config_hash(&self) -> u64 {
        fnv1a64(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

fn draw_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Samples a corridor scene and on-road objects. Deterministic given the rng
/// state.
pub fn sample_scene(
    config: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SceneRaster, Vec<SceneObject>), OracleError> {
    let half_width = rng.random_range(config.half_width_min_m..=config.half_width_max_m);
    let heading = if config.heading_bias_max_rad > 0.0 {
        rng.random_range(-config.heading_bias_max_rad..=config.heading_bias_max_rad)
    } else {
        0.0
    };
    let corridor = Corridor {
        heading_rad: heading,
        half_width_m: half_width,
    };
    let raster = rasterize_terrain(&corridor, &config.grid)?;

    let wsum: f64 = config.object_count_weights.iter().sum();
    let mut pick = rng.random_range(0.0..wsum);
    let mut count = 0;
    for (n, &w) in config.object_count_weights.iter().enumerate() {
        if pick < w {
            count = n;
            break;
        }
        pick -= w;
        count = n;
    }

    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = ObjectClass::TARGETS[rng.random_range(0..ObjectClass::TARGETS.len())];
        // Rejection-sample a position whose containing cell is road.
        let mut placed = None;
        for _ in 0..200 {
            let d = rng.random_range(config.placement_range_min_m..=config.placement_range_max_m);
            let u = rng.random_range(-0.8 * half_width..=0.8 * half_width);
            let x = d * heading.cos() - u * heading.sin();
            let y = d * heading.sin() + u * heading.cos();
            let r = x.hypot(y);
            if r < config.placement_range_min_m || r > config.placement_range_max_m {
                continue;
            }
            let theta = y.atan2(x);
            if let Some((i, j)) = config.grid.cell_of(r, theta) {
                if raster.is_road(i, j) {
                    placed = Some((x, y));
                    break;
                }
            }
        }
        let Some((x, y)) = placed else { continue };
        let (obj_heading, speed) = if class == ObjectClass::Car {
            (
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.random_range(0.0..=config.car_speed_max),
            )
        } else {
            (0.0, 0.0)
        };
        objects.push(SceneObject {
            x: x as f32,
            y: y as f32,
            heading: obj_heading as f32,
            speed: speed as f32,
            class,
        });
    }
    Ok((raster, objects))
}

/// Grass cells within `band` cells (Chebyshev distance) of any road cell,
/// in row-major order.
pub fn boundary_band_cells(raster: &SceneRaster, band: usize) -> Vec<(usize, usize)> {
    let spec = &raster.spec;
    let mut cells = Vec::new();
    let b = band as isize;
    for i in 0..spec.n_range {
        for j in 0..spec.n_azimuth {
            if raster.is_road(i, j) {
                continue;
            }
            let mut near_road = false;
            'scan: for di in -b..=b {
                for dj in -b..=b {
                    let ni = i as isize + di;
                    let nj = j as isize + dj;
                    if ni < 0 || nj < 0 || ni >= spec.n_range as isize || nj >= spec.n_azimuth as isize
                    {
                        continue;
                    }
                    if raster.is_road(ni as usize, nj as usize) {
                        near_road = true;
                        break 'scan;
                    }
                }
            }
            if near_road {
                cells.push((i, j));
            }
        }
    }
    cells
}

/// Renders the radar frame for a scene: per-target returns following
/// `P0 - 40 log10 r` with speckle and angular spread, ghost returns,
/// occlusion attenuation, and boundary clutter.
pub fn simulate_radar(
    raster: &SceneRaster,
    objects: &[SceneObject],
    config: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> RadarFrame {
    let spec = &raster.spec;
    let daz = spec.azimuth_step();
    let mut points: Vec<(f64, f64, f64)> = Vec::new();

    // Occlusion: each nearer on-road target within the angular window knocks
    // a flat attenuation off everything behind it.
    let occl_window = config.occlusion_half_angle_cells * daz;
    let attenuation: Vec<f64> = objects
        .iter()
        .map(|obj| {
            let blockers = objects
                .iter()
                .filter(|other| {
                    other.range() < obj.range()
                        && (other.azimuth() - obj.azimuth()).abs() <= occl_window
                })
                .count();
            blockers as f64 * config.occlusion_attenuation_db
        })
        .collect();

    for (obj, atten) in objects.iter().zip(&attenuation) {
        let profile = config.class_profile(obj.class);
        let r = obj.range();
        let theta = obj.azimuth();
        let base = profile.p0_db - 40.0 * r.log10() - atten;
        let n_returns = if profile.returns_max > profile.returns_min {
            rng.random_range(profile.returns_min..=profile.returns_max)
        } else {
            profile.returns_min
        };
        for k in 0..n_returns {
            // The first return sits exactly on the target; the rest spread
            // over its angular footprint at the same range.
            let jitter = if k == 0 {
                0.0
            } else {
                draw_standard_normal(rng) * profile.angular_spread_cells * daz
            };
            let speckle = draw_standard_normal(rng) * config.speckle_std_db;
            points.push((r, theta + jitter, base + speckle));
        }
        if config.ghost_prob > 0.0 && rng.random_range(0.0..1.0) < config.ghost_prob {
            let factor =
                rng.random_range(config.ghost_range_factor_min..=config.ghost_range_factor_max);
            let ghost_r = r * factor;
            let ghost_theta = theta + draw_standard_normal(rng) * daz;
            let speckle = draw_standard_normal(rng) * config.speckle_std_db;
            points.push((
                ghost_r,
                ghost_theta,
                profile.p0_db - 40.0 * ghost_r.log10() - atten - config.ghost_attenuation_db
                    + speckle,
            ));
        }
    }

    if config.clutter_rate > 0.0 {
        let band = boundary_band_cells(raster, config.clutter_band_cells);
        if !band.is_empty() {
            let poisson = Poisson::new(config.clutter_rate).expect("validated rate");
            let n = poisson.sample(rng) as usize;
            for _ in 0..n {
                let (i, j) = band[rng.random_range(0..band.len())];
                let (r, theta) = spec.cell_center(i, j);
                let power = config.clutter_power_mean_db
                    + draw_standard_normal(rng) * config.clutter_power_std_db;
                points.push((r, theta, power));
            }
        }
    }

    render_points(&points, spec)
}

/// Generates a dataset of i.i.d. frames. Each frame draws from its own
/// `(seed, index)` substream, so generation order cannot affect content.
pub fn generate_dataset(
    n_frames: usize,
    config: &OracleConfig,
    seed: u64,
) -> Result<Dataset, OracleError> {
    if n_frames < 1 {
        return Err(OracleError::InvalidConfig(
            "frame count must be >= 1".to_string(),
        ));
    }
    config.validate()?;
    let mut frames = Vec::with_capacity(n_frames);
    for idx in 0..n_frames {
        frames.push(generate_frame(config, seed, idx as u64)?);
    }
    let manifest = DatasetManifest {
        frame_count: n_frames,
        grid: config.grid.clone(),
        object_capacity: OBJECT_CAPACITY,
        n_features: N_FEATURES,
        config_hash: config.config_hash(),
        seed,
    };
    Dataset::new(manifest, frames).map_err(|e| OracleError::InvalidConfig(e.to_string()))
}

/// One frame from its dedicated substream.
pub fn generate_frame(
    config: &OracleConfig,
    seed: u64,
    index: u64,
) -> Result<FrameRecord, OracleError> {
    let mut rng = substream(seed, "oracle-frame", index);
    let (raster, objects) = sample_scene(config, &mut rng)?;
    let frame = simulate_radar(&raster, &objects, config, &mut rng);
    let objects = encode_object_list(&objects, OBJECT_CAPACITY)?;
    Ok(FrameRecord {
        raster,
        objects,
        frame,
    })
}

// ── Key-value config file ───────────────────────────────────────────────

/// Applies one `key = value` override onto a config.
pub fn apply_config_key(
    config: &mut OracleConfig,
    key: &str,
    value: &str,
) -> Result<(), OracleError> {
    fn f(value: &str, key: &str) -> Result<f64, OracleError> {
        value
            .parse::<f64>()
            .map_err(|_| OracleError::InvalidConfig(format!("key `{key}`: bad number `{value}`")))
    }
    fn u(value: &str, key: &str) -> Result<u64, OracleError> {
        value
            .parse::<u64>()
            .map_err(|_| OracleError::InvalidConfig(format!("key `{key}`: bad integer `{value}`")))
    }
    match key {
        "seed" => config.seed = u(value, key)?,
        "n_range" => config.grid.n_range = u(value, key)? as usize,
        "n_azimuth" => config.grid.n_azimuth = u(value, key)? as usize,
        "range_min" => config.grid.range_min = f(value, key)?,
        "range_max" => config.grid.range_max = f(value, key)?,
        "az_min" => config.grid.az_min = f(value, key)?,
        "az_max" => config.grid.az_max = f(value, key)?,
        "floor_db" => config.grid.floor_db = f(value, key)?,
        "ceil_db" => config.grid.ceil_db = f(value, key)?,
        "p0_ccr_db" => config.ccr.p0_db = f(value, key)?,
        "p0_car_db" => config.car.p0_db = f(value, key)?,
        "p0_pellets_bag_db" => config.pellets_bag.p0_db = f(value, key)?,
        "p0_metal_frame_db" => config.metal_frame.p0_db = f(value, key)?,
        "spread_cells_ccr" => config.ccr.angular_spread_cells = f(value, key)?,
        "spread_cells_car" => config.car.angular_spread_cells = f(value, key)?,
        "spread_cells_pellets_bag" => config.pellets_bag.angular_spread_cells = f(value, key)?,
        "spread_cells_metal_frame" => config.metal_frame.angular_spread_cells = f(value, key)?,
        "returns_min_ccr" => config.ccr.returns_min = u(value, key)? as u32,
        "returns_max_ccr" => config.ccr.returns_max = u(value, key)? as u32,
        "returns_min_car" => config.car.returns_min = u(value, key)? as u32,
        "returns_max_car" => config.car.returns_max = u(value, key)? as u32,
        "returns_min_pellets_bag" => config.pellets_bag.returns_min = u(value, key)? as u32,
        "returns_max_pellets_bag" => config.pellets_bag.returns_max = u(value, key)? as u32,
        "returns_min_metal_frame" => config.metal_frame.returns_min = u(value, key)? as u32,
        "returns_max_metal_frame" => config.metal_frame.returns_max = u(value, key)? as u32,
        "object_count_weights" => {
            let parts: Vec<&str> = value.split(',').map(|s| s.trim()).collect();
            if parts.len() != 4 {
                return Err(OracleError::InvalidConfig(format!(
                    "object_count_weights needs 4 comma-separated values, got {}",
                    parts.len()
                )));
            }
            for (i, p) in parts.iter().enumerate() {
                config.object_count_weights[i] = f(p, key)?;
            }
        }
        "half_width_min_m" => config.half_width_min_m = f(value, key)?,
        "half_width_max_m" => config.half_width_max_m = f(value, key)?,
        "heading_bias_max_rad" => config.heading_bias_max_rad = f(value, key)?,
        "placement_range_min_m" => config.placement_range_min_m = f(value, key)?,
        "placement_range_max_m" => config.placement_range_max_m = f(value, key)?,
        "car_speed_max" => config.car_speed_max = f(value, key)?,
        "clutter_rate" => config.clutter_rate = f(value, key)?,
        "clutter_power_mean_db" => config.clutter_power_mean_db = f(value, key)?,
        "clutter_power_std_db" => config.clutter_power_std_db = f(value, key)?,
        "clutter_band_cells" => config.clutter_band_cells = u(value, key)? as usize,
        "speckle_std_db" => config.speckle_std_db = f(value, key)?,
        "ghost_prob" => config.ghost_prob = f(value, key)?,
        "ghost_attenuation_db" => config.ghost_attenuation_db = f(value, key)?,
        "ghost_range_factor_min" => config.ghost_range_factor_min = f(value, key)?,
        "ghost_range_factor_max" => config.ghost_range_factor_max = f(value, key)?,
        "occlusion_attenuation_db" => config.occlusion_attenuation_db = f(value, key)?,
        "occlusion_half_angle_cells" => config.occlusion_half_angle_cells = f(value, key)?,
        other => return Err(OracleError::UnknownKey(other.to_string())),
    }
    Ok(())
}

/// Parses a line-oriented `key = value` config file ('#' starts a comment).
pub fn parse_config_text(text: &str) -> Result<OracleConfig, OracleError> {
    let mut config = OracleConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(OracleError::Parse {
                line: lineno + 1,
                detail: format!("expected `key = value`, got `{line}`"),
            });
        };
        apply_config_key(&mut config, key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}
