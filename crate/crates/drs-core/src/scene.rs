//! Scene and observation types on the radar's polar grid.
//!
//! The radar frame is a range x azimuth grid of received power in dB. Scenes
//! carry two conditioning inputs: a terrain raster on the same polar grid
//! (road vs. grass) and a fixed-capacity object list with pose, speed, and a
//! one-hot class per row.
//!
//! Conventions: the sensor sits at the origin looking along +x (boresight);
//! azimuth grows counter-clockwise toward +y, so a cell center at range `r`
//! and azimuth `theta` lies at `(r cos theta, r sin theta)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use drs_tensor::Tensor;

/// Fixed object-list capacity (rows).
pub const OBJECT_CAPACITY: usize = 8;
/// Features per object row: x, y, heading, speed, 5-way one-hot class.
pub const N_FEATURES: usize = 9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),

    #[error("object list capacity {capacity} exceeded by {given} objects")]
    CapacityExceeded { capacity: usize, given: usize },

    #[error("corridor half width must be positive, got {0}")]
    InvalidCorridor(f64),

    #[error("invalid object row {row}: {detail}")]
    InvalidRow { row: usize, detail: String },
}

/// Geometry of the polar measurement grid, shared by rasters and frames.
///
/// Cell (i, j) covers `[range_min + i dr, +dr) x [az_min + j daz, +daz)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarGridSpec {
    pub n_range: usize,
    pub n_azimuth: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub az_min: f64,
    pub az_max: f64,
    pub floor_db: f64,
    pub ceil_db: f64,
}

impl Default for PolarGridSpec {
    fn default() -> Self {
        Self {
            n_range: 64,
            n_azimuth: 64,
            range_min: 0.5,
            range_max: 75.0,
            az_min: -std::f64::consts::FRAC_PI_4,
            az_max: std::f64::consts::FRAC_PI_4,
            floor_db: -90.0,
            ceil_db: 0.0,
        }
    }
}

impl PolarGridSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_range < 2 || self.n_azimuth < 2 {
            return Err(SceneError::InvalidSpec(format!(
                "need at least 2 bins per axis, got {}x{}",
                self.n_range, self.n_azimuth
            )));
        }
        if !(self.range_max > self.range_min && self.range_min >= 0.0) {
            return Err(SceneError::InvalidSpec(format!(
                "range bounds [{}, {}] invalid",
                self.range_min, self.range_max
            )));
        }
        if self.az_max <= self.az_min {
            return Err(SceneError::InvalidSpec(format!(
                "azimuth bounds [{}, {}] invalid",
                self.az_min, self.az_max
            )));
        }
        if self.ceil_db <= self.floor_db {
            return Err(SceneError::InvalidSpec(format!(
                "power bounds [{}, {}] invalid",
                self.floor_db, self.ceil_db
            )));
        }
        Ok(())
    }

    pub fn range_step(&self) -> f64 {
        (self.range_max - self.range_min) / self.n_range as f64
    }

    pub fn azimuth_step(&self) -> f64 {
        (self.az_max - self.az_min) / self.n_azimuth as f64
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.range_min + (i as f64 + 0.5) * self.range_step(),
            self.az_min + (j as f64 + 0.5) * self.azimuth_step(),
        )
    }

    /// Grid cell containing `(r, theta)`, or `None` if outside the grid.
    pub fn cell_of(&self, r: f64, theta: f64) -> Option<(usize, usize)> {
        if r < self.range_min || theta < self.az_min {
            return None;
        }
        let i = ((r - self.range_min) / self.range_step()).floor() as usize;
        let j = ((theta - self.az_min) / self.azimuth_step()).floor() as usize;
        if i >= self.n_range || j >= self.n_azimuth {
            return None;
        }
        Some((i, j))
    }

    pub fn n_cells(&self) -> usize {
        self.n_range * self.n_azimuth
    }

    /// Maps dB into [0, 1] over `[floor_db, ceil_db]`.
    pub fn normalize_db(&self, p: f64) -> f64 {
        (p - self.floor_db) / (self.ceil_db - self.floor_db)
    }

    pub fn denormalize_db(&self, v: f64) -> f64 {
        (self.floor_db + v * (self.ceil_db - self.floor_db)).clamp(self.floor_db, self.ceil_db)
    }
}

/// A straight road corridor through the sensor origin.
#[derive(Clone, Copy, Debug)]
pub struct Corridor {
    pub heading_rad: f64,
    pub half_width_m: f64,
}

impl Corridor {
    /// Signed lateral offset of a Cartesian point from the centerline.
    pub fn lateral_offset(&self, x: f64, y: f64) -> f64 {
        y * self.heading_rad.cos() - x * self.heading_rad.sin()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.lateral_offset(x, y).abs() <= self.half_width_m
    }
}

/// Terrain layer on the polar grid: 1 = roadway, 0 = grass.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRaster {
    pub spec: PolarGridSpec,
    pub layers: Tensor<f32>,
}

impl SceneRaster {
    pub fn is_road(&self, i: usize, j: usize) -> bool {
        self.layers.at3(i, j, 0) > 0.5
    }
}

/// Marks each polar cell as road or grass depending on whether its center
/// falls inside the corridor.
pub fn rasterize_terrain(
    corridor: &Corridor,
    spec: &PolarGridSpec,
) -> Result<SceneRaster, SceneError> {
    if !(corridor.half_width_m > 0.0) {
        return Err(SceneError::InvalidCorridor(corridor.half_width_m));
    }
    spec.validate()?;
    let mut layers = Tensor::zeros(vec![spec.n_range, spec.n_azimuth, 1]);
    for i in 0..spec.n_range {
        for j in 0..spec.n_azimuth {
            let (r, theta) = spec.cell_center(i, j);
            let (x, y) = (r * theta.cos(), r * theta.sin());
            if corridor.contains(x, y) {
                layers.set3(i, j, 0, 1.0);
            }
        }
    }
    Ok(SceneRaster {
        spec: spec.clone(),
        layers,
    })
}

/// Object classes; `Unused` marks empty object-list rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Ccr,
    PelletsBag,
    MetalFrame,
    Unused,
}

impl ObjectClass {
    /// One-hot slot in the feature row (car, ccr, bag, frame, unused).
    pub fn one_hot_index(self) -> usize {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Ccr => 1,
            ObjectClass::PelletsBag => 2,
            ObjectClass::MetalFrame => 3,
            ObjectClass::Unused => 4,
        }
    }

    pub fn from_one_hot_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ObjectClass::Car),
            1 => Some(ObjectClass::Ccr),
            2 => Some(ObjectClass::PelletsBag),
            3 => Some(ObjectClass::MetalFrame),
            4 => Some(ObjectClass::Unused),
            _ => None,
        }
    }

    pub const TARGETS: [ObjectClass; 4] = [
        ObjectClass::Car,
        ObjectClass::Ccr,
        ObjectClass::PelletsBag,
        ObjectClass::MetalFrame,
    ];
}

/// One scene object in the radar frame (meters, radians, m/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub x: f32,
    pub y: f32,
    pub heading: f32,
    pub speed: f32,
    pub class: ObjectClass,
}

impl SceneObject {
    pub fn range(&self) -> f64 {
        ((self.x as f64).powi(2) + (self.y as f64).powi(2)).sqrt()
    }

    pub fn azimuth(&self) -> f64 {
        (self.y as f64).atan2(self.x as f64)
    }
}

/// Fixed-capacity object table as an `[n_objects, 1, n_features]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectList {
    pub features: Tensor<f32>,
}

impl ObjectList {
    pub fn capacity(&self) -> usize {
        self.features.dims()[0]
    }
}

/// Encodes objects row by row; remaining rows carry only the unused flag.
pub fn encode_object_list(
    objects: &[SceneObject],
    capacity: usize,
) -> Result<ObjectList, SceneError> {
    if objects.len() > capacity {
        return Err(SceneError::CapacityExceeded {
            capacity,
            given: objects.len(),
        });
    }
    let mut features = Tensor::zeros(vec![capacity, 1, N_FEATURES]);
    for (row, obj) in objects.iter().enumerate() {
        let base = row * N_FEATURES;
        let data = features.data_mut();
        data[base] = obj.x;
        data[base + 1] = obj.y;
        data[base + 2] = obj.heading;
        data[base + 3] = obj.speed;
        data[base + 4 + obj.class.one_hot_index()] = 1.0;
    }
    for row in objects.len()..capacity {
        let base = row * N_FEATURES;
        features.data_mut()[base + 4 + ObjectClass::Unused.one_hot_index()] = 1.0;
    }
    Ok(ObjectList { features })
}

/// Recovers the used rows of an encoded object list.
pub fn decode_object_list(list: &ObjectList) -> Result<Vec<SceneObject>, SceneError> {
    let capacity = list.capacity();
    let data = list.features.data();
    let mut out = Vec::new();
    for row in 0..capacity {
        let base = row * N_FEATURES;
        let one_hot = &data[base + 4..base + 9];
        let hot: Vec<usize> = one_hot
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        if hot.len() != 1 || one_hot[hot[0]] != 1.0 {
            return Err(SceneError::InvalidRow {
                row,
                detail: format!("one-hot block is {one_hot:?}"),
            });
        }
        let class = ObjectClass::from_one_hot_index(hot[0]).unwrap();
        if class == ObjectClass::Unused {
            if data[base..base + 4].iter().any(|&v| v != 0.0) {
                return Err(SceneError::InvalidRow {
                    row,
                    detail: "unused row has non-zero feature entries".to_string(),
                });
            }
            continue;
        }
        out.push(SceneObject {
            x: data[base],
            y: data[base + 1],
            heading: data[base + 2],
            speed: data[base + 3],
            class,
        });
    }
    Ok(out)
}

/// Received-power grid in dB; cells with no return hold exactly `floor_db`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarFrame {
    pub spec: PolarGridSpec,
    pub power: Tensor<f32>,
}

impl RadarFrame {
    pub fn uniform_floor(spec: &PolarGridSpec) -> Self {
        Self {
            spec: spec.clone(),
            power: Tensor::filled(
                vec![spec.n_range, spec.n_azimuth, 1],
                spec.floor_db as f32,
            ),
        }
    }
}

/// Renders point returns to the grid. Points sharing a cell combine by max;
/// out-of-grid points are dropped; the result is clamped to
/// `[floor_db, ceil_db]`.
pub fn render_points(points: &[(f64, f64, f64)], spec: &PolarGridSpec) -> RadarFrame {
    let mut frame = RadarFrame::uniform_floor(spec);
    for &(r, theta, power_db) in points {
        if let Some((i, j)) = spec.cell_of(r, theta) {
            let p = power_db.clamp(spec.floor_db, spec.ceil_db) as f32;
            let cur = frame.power.at3(i, j, 0);
            if p > cur {
                frame.power.set3(i, j, 0, p);
            }
        }
    }
    frame
}

/// Affine map of a frame into [0, 1]: `(p - floor) / (ceil - floor)`.
pub fn normalize_frame(frame: &RadarFrame) -> Tensor<f32> {
    let spec = &frame.spec;
    let scale = 1.0 / (spec.ceil_db - spec.floor_db) as f32;
    let floor = spec.floor_db as f32;
    Tensor::new(
        frame.power.dims().to_vec(),
        frame.power.data().iter().map(|&p| (p - floor) * scale).collect(),
    )
    .expect("dims preserved")
}

/// Inverse of [`normalize_frame`], clamped back into the dB bounds.
pub fn denormalize_frame(values: &Tensor<f32>, spec: &PolarGridSpec) -> RadarFrame {
    let span = (spec.ceil_db - spec.floor_db) as f32;
    let floor = spec.floor_db as f32;
    let ceil = spec.ceil_db as f32;
    RadarFrame {
        spec: spec.clone(),
        power: Tensor::new(
            values.dims().to_vec(),
            values
                .data()
                .iter()
                .map(|&v| (floor + v * span).clamp(floor, ceil))
                .collect(),
        )
        .expect("dims preserved"),
    }
}
