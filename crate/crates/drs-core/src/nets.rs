//! Model architectures.
//!
//! All five variants share one scene encoder: a strided conv stack over the
//! terrain raster and a 1x1-conv head over the object list, flattened,
//! concatenated, and pushed through two ReLU dense layers to the conditional
//! feature vector `x`.
//!
//! - `normal` / `gmm` decode `x` through a deconvolution trunk into per-cell
//!   distribution parameters (2 layers for the Normal; 3n layers for an
//!   n-component mixture).
//! - the VAE family adds a recognition net `Q(z | x, Y)` used during
//!   training and a decoder that turns `(x, z)` into a normalized power
//!   grid; at deployment `z` is drawn from the unit Gaussian.
//! - adversarial variants carry a discriminator over the power grid alone.
//!
//! Forward passes are pure: given a checkpoint, any number of frames can be
//! evaluated concurrently on shared read-only parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use drs_tensor::checkpoint::Checkpoint;
use drs_tensor::{Scalar, Tape, Tensor, TensorError, TensorId};

use crate::rng::substream;
use crate::scene::{
    denormalize_frame, normalize_frame, ObjectList, PolarGridSpec, RadarFrame, SceneRaster,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("architecture error: {0}")]
    Arch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// The five model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "gmm")]
    Gmm,
    #[serde(rename = "vae")]
    Vae,
    #[serde(rename = "vae-adv")]
    VaeAdv,
    #[serde(rename = "vae-mixed")]
    VaeMixed,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Normal => "normal",
            ModelVariant::Gmm => "gmm",
            ModelVariant::Vae => "vae",
            ModelVariant::VaeAdv => "vae-adv",
            ModelVariant::VaeMixed => "vae-mixed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "normal" => Some(ModelVariant::Normal),
            "gmm" => Some(ModelVariant::Gmm),
            "vae" => Some(ModelVariant::Vae),
            "vae-adv" => Some(ModelVariant::VaeAdv),
            "vae-mixed" => Some(ModelVariant::VaeMixed),
            _ => None,
        }
    }

    pub fn is_vae_family(self) -> bool {
        matches!(
            self,
            ModelVariant::Vae | ModelVariant::VaeAdv | ModelVariant::VaeMixed
        )
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, ModelVariant::VaeAdv | ModelVariant::VaeMixed)
    }
}

/// Every architecture hyperparameter, fixed up front and stored in
/// checkpoints so loaded models rebuild bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub grid: PolarGridSpec,
    pub object_capacity: usize,
    pub object_features: usize,
    /// Per-feature multipliers applied to object rows before the 1x1 head.
    pub feature_scale: Vec<f32>,
    pub d_x: usize,
    pub d_z: usize,
    pub gmm_components: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub raster_channels: [usize; 3],
    pub object_channels: [usize; 2],
    pub enc_hidden: usize,
    pub rec_hidden: usize,
    pub dec_hidden: usize,
    pub dec_base_channels: usize,
    pub dec_channels: [usize; 2],
}

impl ArchConfig {
    /// Production-scale defaults for a grid (64x64 by default).
    pub fn for_grid(grid: PolarGridSpec) -> Self {
        let range_span = grid.range_max.max(1.0) as f32;
        Self {
            grid,
            object_capacity: crate::scene::OBJECT_CAPACITY,
            object_features: crate::scene::N_FEATURES,
            feature_scale: vec![
                1.0 / range_span,
                1.0 / range_span,
                1.0 / std::f32::consts::PI,
                1.0 / 15.0,
                1.0,
                1.0,
                1.0,
                1.0,
                1.0,
            ],
            d_x: 128,
            d_z: 16,
            gmm_components: 3,
            conv_kernel: 4,
            conv_stride: 2,
            conv_padding: 1,
            raster_channels: [8, 16, 32],
            object_channels: [16, 16],
            enc_hidden: 256,
            rec_hidden: 128,
            dec_hidden: 256,
            dec_base_channels: 32,
            dec_channels: [16, 8],
        }
    }

    /// Desk-scale architecture on an 8x8 grid for gradient-check tests.
    pub fn tiny(grid: PolarGridSpec) -> Self {
        let mut arch = Self::for_grid(grid);
        arch.d_x = 8;
        arch.d_z = 2;
        arch.raster_channels = [2, 3, 4];
        arch.object_channels = [2, 2];
        arch.enc_hidden = 8;
        arch.rec_hidden = 8;
        arch.dec_hidden = 8;
        arch.dec_base_channels = 4;
        arch.dec_channels = [3, 2];
        arch
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.grid
            .validate()
            .map_err(|e| NetError::Arch(e.to_string()))?;
        if self.grid.n_range % 8 != 0 || self.grid.n_azimuth % 8 != 0 {
            return Err(NetError::Arch(format!(
                "grid extents must be divisible by 8 (three stride-2 stages), got {}x{}",
                self.grid.n_range, self.grid.n_azimuth
            )));
        }
        if self.feature_scale.len() != self.object_features {
            return Err(NetError::Arch(format!(
                "feature_scale has {} entries for {} features",
                self.feature_scale.len(),
                self.object_features
            )));
        }
        if self.gmm_components < 1 || self.gmm_components > 16 {
            return Err(NetError::Arch(format!(
                "gmm_components {} outside [1, 16]",
                self.gmm_components
            )));
        }
        if self.d_x == 0 || self.d_z == 0 {
            return Err(NetError::Arch("d_x and d_z must be positive".to_string()));
        }
        Ok(())
    }

    /// Spatial extents after the three stride-2 stages.
    pub fn base_hw(&self) -> (usize, usize) {
        (self.grid.n_range / 8, self.grid.n_azimuth / 8)
    }

    fn raster_flat(&self) -> usize {
        let (h, w) = self.base_hw();
        h * w * self.raster_channels[2]
    }

    fn object_flat(&self) -> usize {
        self.object_capacity * self.object_channels[1]
    }

    fn dec_flat(&self) -> usize {
        let (h, w) = self.base_hw();
        h * w * self.dec_base_channels
    }

    fn direct_out_channels(&self, variant: ModelVariant) -> usize {
        match variant {
            ModelVariant::Normal => 2,
            ModelVariant::Gmm => 3 * self.gmm_components,
            _ => 1,
        }
    }
}

// ── Parameter storage ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter set. Order is fixed at construction and defines
/// the checkpoint record order.
#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn add(&mut self, name: String, tensor: Tensor<S>) -> ParamId {
        self.entries.push((name, tensor.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor<S> {
        &self.entries[index].1
    }

    pub fn entry_mut(&mut self, index: usize) -> (&str, &mut Tensor<S>) {
        let (name, tensor) = &mut self.entries[index];
        (name.as_str(), tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvP {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseP {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderP {
    pub raster: [ConvP; 3],
    pub object: [ConvP; 2],
    pub fc1: DenseP,
    pub fc2: DenseP,
}

#[derive(Clone, Debug)]
pub struct RecognitionP {
    pub conv: [ConvP; 3],
    pub fc1: DenseP,
    pub fc2: DenseP,
}

/// Dense-dense-deconv trunk producing a grid; used by the VAE decoder and
/// by both direct heads.
#[derive(Clone, Debug)]
pub struct GridHeadP {
    pub fc1: DenseP,
    pub fc2: DenseP,
    pub deconv: [ConvP; 3],
}

#[derive(Clone, Debug)]
pub struct DiscriminatorP {
    pub conv: [ConvP; 3],
    pub fc: DenseP,
}

#[derive(Clone, Debug)]
pub enum HeadP {
    Direct(GridHeadP),
    Vae {
        recognition: RecognitionP,
        decoder: GridHeadP,
    },
}

pub struct RadarModel<S: Scalar> {
    pub variant: ModelVariant,
    pub arch: ArchConfig,
    pub store: ParamStore<S>,
    pub encoder: EncoderP,
    pub head: HeadP,
    pub discriminator: Option<DiscriminatorP>,
    /// Index of the first discriminator parameter; everything before it
    /// belongs to the generator side.
    disc_start: usize,
}

fn draw_normal<S: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> S {
    let v: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    S::from_f64(v * std)
}

struct Builder<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<'a, S: Scalar> Builder<'a, S> {
    /// Zero-mean Gaussian weights with std sqrt(gain / fan_in), zero biases.
    fn conv(
        &mut self,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        feeds_relu: bool,
        transpose: bool,
        stride: usize,
    ) -> ConvP {
        let fan_in = if transpose {
            (k * k * cin) as f64 / (stride * stride) as f64
        } else {
            (k * k * cin) as f64
        };
        let std = ((if feeds_relu { 2.0 } else { 1.0 }) / fan_in).sqrt();
        let dims = if transpose {
            vec![k, k, cout, cin]
        } else {
            vec![k, k, cin, cout]
        };
        let numel: usize = dims.iter().product();
        let data: Vec<S> = (0..numel).map(|_| draw_normal(&mut self.rng, std)).collect();
        let w = self.store.add(
            format!("{name}.w"),
            Tensor::new(dims, data).expect("conv dims"),
        );
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        ConvP { w, b }
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, feeds_relu: bool) -> DenseP {
        let std = ((if feeds_relu { 2.0 } else { 1.0 }) / n_in as f64).sqrt();
        let data: Vec<S> = (0..n_in * n_out)
            .map(|_| draw_normal(&mut self.rng, std))
            .collect();
        let w = self.store.add(
            format!("{name}.w"),
            Tensor::new(vec![n_out, n_in], data).expect("dense dims"),
        );
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(vec![n_out]));
        DenseP { w, b }
    }
}

impl<S: Scalar> RadarModel<S> {
    /// Builds a freshly initialized model. Generator and discriminator
    /// parameters draw from independent seed streams, so variants with and
    /// without a discriminator share identical generator initializations.
    pub fn init(variant: ModelVariant, arch: ArchConfig, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let k = arch.conv_kernel;
        let s = arch.conv_stride;
        let rc = arch.raster_channels;
        let oc = arch.object_channels;

        let mut b = Builder {
            store: &mut store,
            rng: substream(seed, "init-gen", 0),
        };
        let encoder = EncoderP {
            raster: [
                b.conv("encoder.raster0", k, 1, rc[0], true, false, s),
                b.conv("encoder.raster1", k, rc[0], rc[1], true, false, s),
                b.conv("encoder.raster2", k, rc[1], rc[2], true, false, s),
            ],
            object: [
                b.conv("encoder.object0", 1, arch.object_features, oc[0], true, false, 1),
                b.conv("encoder.object1", 1, oc[0], oc[1], true, false, 1),
            ],
            fc1: b.dense(
                "encoder.fc1",
                arch.raster_flat() + arch.object_flat(),
                arch.enc_hidden,
                true,
            ),
            fc2: b.dense("encoder.fc2", arch.enc_hidden, arch.d_x, true),
        };

        let grid_head = |b: &mut Builder<S>, prefix: &str, in_dim: usize, out_c: usize| GridHeadP {
            fc1: b.dense(&format!("{prefix}.fc1"), in_dim, arch.dec_hidden, true),
            fc2: b.dense(&format!("{prefix}.fc2"), arch.dec_hidden, arch.dec_flat(), true),
            deconv: [
                b.conv(
                    &format!("{prefix}.deconv0"),
                    k,
                    arch.dec_base_channels,
                    arch.dec_channels[0],
                    true,
                    true,
                    s,
                ),
                b.conv(
                    &format!("{prefix}.deconv1"),
                    k,
                    arch.dec_channels[0],
                    arch.dec_channels[1],
                    true,
                    true,
                    s,
                ),
                b.conv(
                    &format!("{prefix}.deconv2"),
                    k,
                    arch.dec_channels[1],
                    out_c,
                    false,
                    true,
                    s,
                ),
            ],
        };

        let head = if variant.is_vae_family() {
            let decoder = grid_head(&mut b, "decoder", arch.d_x + arch.d_z, 1);
            let recognition = RecognitionP {
                conv: [
                    b.conv("recognition.conv0", k, 1, rc[0], true, false, s),
                    b.conv("recognition.conv1", k, rc[0], rc[1], true, false, s),
                    b.conv("recognition.conv2", k, rc[1], rc[2], true, false, s),
                ],
                fc1: b.dense(
                    "recognition.fc1",
                    arch.raster_flat() + arch.d_x,
                    arch.rec_hidden,
                    true,
                ),
                fc2: b.dense("recognition.fc2", arch.rec_hidden, 2 * arch.d_z, false),
            };
            HeadP::Vae {
                recognition,
                decoder,
            }
        } else {
            HeadP::Direct(grid_head(
                &mut b,
                "head",
                arch.d_x,
                arch.direct_out_channels(variant),
            ))
        };

        let disc_start = store.len();
        let discriminator = if variant.has_discriminator() {
            let mut d = Builder {
                store: &mut store,
                rng: substream(seed, "init-disc", 0),
            };
            let (bh, bw) = arch.base_hw();
            Some(DiscriminatorP {
                conv: [
                    d.conv("discriminator.conv0", k, 1, rc[0], true, false, s),
                    d.conv("discriminator.conv1", k, rc[0], rc[1], true, false, s),
                    d.conv("discriminator.conv2", k, rc[1], rc[2], true, false, s),
                ],
                fc: d.dense("discriminator.fc", bh * bw * rc[2], 1, false),
            })
        } else {
            None
        };

        Ok(Self {
            variant,
            arch,
            store,
            encoder,
            head,
            discriminator,
            disc_start,
        })
    }

    pub fn is_disc_param(&self, index: usize) -> bool {
        index >= self.disc_start
    }

    pub fn generator_param_range(&self) -> std::ops::Range<usize> {
        0..self.disc_start
    }

    pub fn disc_param_range(&self) -> std::ops::Range<usize> {
        self.disc_start..self.store.len()
    }
}

// ── Tape binding ────────────────────────────────────────────────────────

/// Which parameter block trains in the pass being built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// All parameters constant (inference/evaluation).
    Frozen,
    /// Generator-side parameters receive gradients; discriminator frozen.
    TrainGenerator,
    /// Discriminator parameters receive gradients; generator frozen.
    TrainDiscriminator,
}

/// Tape handles for every parameter, aligned with the store order.
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

impl<S: Scalar> RadarModel<S> {
    pub fn bind(&self, tape: &mut Tape<S>, mode: BindMode) -> Result<Bound, NetError> {
        let mut ids = Vec::with_capacity(self.store.len());
        for (index, (name, tensor)) in self.store.entries.iter().enumerate() {
            let trainable = match mode {
                BindMode::Frozen => false,
                BindMode::TrainGenerator => !self.is_disc_param(index),
                BindMode::TrainDiscriminator => self.is_disc_param(index),
            };
            let id = tape.insert_leaf(tensor.dims().to_vec(), tensor.data().to_vec(), trainable)?;
            tape.set_label(id, name.clone());
            ids.push(id);
        }
        Ok(Bound { ids })
    }
}

// ── Forward passes ──────────────────────────────────────────────────────

pub struct VaeLatentIds {
    pub mu: TensorId,
    pub logvar: TensorId,
}

pub struct NormalGridIds {
    pub mean: TensorId,
    pub logvar: TensorId,
}

pub struct GmmGridIds {
    pub weights: TensorId,
    pub means: TensorId,
    pub logvars: TensorId,
}

fn cast_data<S: Scalar>(data: &[f32]) -> Vec<S> {
    data.iter().map(|&v| S::from_f64(v as f64)).collect()
}

impl<S: Scalar> RadarModel<S> {
    pub fn insert_raster(
        &self,
        tape: &mut Tape<S>,
        raster: &SceneRaster,
    ) -> Result<TensorId, NetError> {
        if raster.spec != self.arch.grid {
            return Err(NetError::Arch(format!(
                "raster grid {}x{} does not match model grid {}x{}",
                raster.spec.n_range,
                raster.spec.n_azimuth,
                self.arch.grid.n_range,
                self.arch.grid.n_azimuth
            )));
        }
        Ok(tape.constant(raster.layers.dims().to_vec(), cast_data(raster.layers.data()))?)
    }

    /// Inserts the object list with per-feature scaling applied.
    pub fn insert_objects(
        &self,
        tape: &mut Tape<S>,
        objects: &ObjectList,
    ) -> Result<TensorId, NetError> {
        let dims = objects.features.dims().to_vec();
        if dims != [self.arch.object_capacity, 1, self.arch.object_features] {
            return Err(NetError::Arch(format!(
                "object list dims {:?} do not match [{}, 1, {}]",
                dims, self.arch.object_capacity, self.arch.object_features
            )));
        }
        let nf = self.arch.object_features;
        let data: Vec<S> = objects
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| S::from_f64((v * self.arch.feature_scale[i % nf]) as f64))
            .collect();
        Ok(tape.constant(dims, data)?)
    }

    /// Inserts a frame normalized to [0, 1].
    pub fn insert_frame(
        &self,
        tape: &mut Tape<S>,
        frame: &RadarFrame,
    ) -> Result<TensorId, NetError> {
        if frame.spec != self.arch.grid {
            return Err(NetError::Arch(
                "frame grid does not match model grid".to_string(),
            ));
        }
        let norm = normalize_frame(frame);
        Ok(tape.constant(norm.dims().to_vec(), cast_data(norm.data()))?)
    }

    fn conv_relu_stack(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        convs: &[ConvP; 3],
        input: TensorId,
    ) -> Result<TensorId, NetError> {
        let mut cur = input;
        for conv in convs {
            let c = tape.conv2d(
                cur,
                bound.id(conv.w),
                bound.id(conv.b),
                self.arch.conv_stride,
                self.arch.conv_padding,
            )?;
            cur = tape.relu(c)?;
        }
        Ok(cur)
    }

    /// Object head alone: two 1x1 convolutions with ReLU, keeping the
    /// `[capacity, 1, channels]` layout (row-local by construction).
    pub fn object_head(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        objects: TensorId,
    ) -> Result<TensorId, NetError> {
        let mut cur = objects;
        for conv in &self.encoder.object {
            let c = tape.conv2d(cur, bound.id(conv.w), bound.id(conv.b), 1, 0)?;
            cur = tape.relu(c)?;
        }
        Ok(cur)
    }

    /// Scene encoder producing the conditional feature vector `x`.
    pub fn encode_scene(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        raster: TensorId,
        objects: TensorId,
    ) -> Result<TensorId, NetError> {
        let r = self.conv_relu_stack(tape, bound, &self.encoder.raster, raster)?;
        let r_flat = tape.reshape(r, vec![self.arch.raster_flat()])?;
        let o = self.object_head(tape, bound, objects)?;
        let o_flat = tape.reshape(o, vec![self.arch.object_flat()])?;
        let joined = tape.concat(&[r_flat, o_flat])?;
        let h1 = tape.dense(joined, bound.id(self.encoder.fc1.w), bound.id(self.encoder.fc1.b))?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.dense(h1, bound.id(self.encoder.fc2.w), bound.id(self.encoder.fc2.b))?;
        let x = tape.relu(h2)?;
        tape.set_label(x, "x");
        Ok(x)
    }

    fn grid_trunk(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        head: &GridHeadP,
        input: TensorId,
        sigmoid_out: bool,
    ) -> Result<TensorId, NetError> {
        let h1 = tape.dense(input, bound.id(head.fc1.w), bound.id(head.fc1.b))?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.dense(h1, bound.id(head.fc2.w), bound.id(head.fc2.b))?;
        let h2 = tape.relu(h2)?;
        let (bh, bw) = self.arch.base_hw();
        let mut cur = tape.reshape(h2, vec![bh, bw, self.arch.dec_base_channels])?;
        for (i, deconv) in head.deconv.iter().enumerate() {
            cur = tape.conv_transpose2d(
                cur,
                bound.id(deconv.w),
                bound.id(deconv.b),
                self.arch.conv_stride,
                self.arch.conv_padding,
            )?;
            if i + 1 < head.deconv.len() {
                cur = tape.relu(cur)?;
            }
        }
        if sigmoid_out {
            cur = tape.sigmoid(cur)?;
        }
        Ok(cur)
    }

    fn direct_head(&self) -> Result<&GridHeadP, NetError> {
        match &self.head {
            HeadP::Direct(h) => Ok(h),
            HeadP::Vae { .. } => Err(NetError::Arch(
                "direct forward requested on a VAE-family model".to_string(),
            )),
        }
    }

    fn vae_head(&self) -> Result<(&RecognitionP, &GridHeadP), NetError> {
        match &self.head {
            HeadP::Vae {
                recognition,
                decoder,
            } => Ok((recognition, decoder)),
            HeadP::Direct(_) => Err(NetError::Arch(
                "VAE forward requested on a direct model".to_string(),
            )),
        }
    }

    /// Per-cell Gaussian parameters (mean layer, log-variance layer).
    pub fn normal_forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: TensorId,
    ) -> Result<NormalGridIds, NetError> {
        let head = self.direct_head()?;
        let grid = self.grid_trunk(tape, bound, head, x, false)?;
        Ok(NormalGridIds {
            mean: tape.slice_last(grid, 0, 1)?,
            logvar: tape.slice_last(grid, 1, 2)?,
        })
    }

    /// Per-cell mixture parameters: squared-and-normalized weights and
    /// `logvar = relu(raw) + 0.01`.
    pub fn gmm_forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: TensorId,
    ) -> Result<GmmGridIds, NetError> {
        let head = self.direct_head()?;
        let n = self.arch.gmm_components;
        let grid = self.grid_trunk(tape, bound, head, x, false)?;
        let raw_w = tape.slice_last(grid, 0, n)?;
        let means = tape.slice_last(grid, n, 2 * n)?;
        let raw_lv = tape.slice_last(grid, 2 * n, 3 * n)?;
        let weights = tape.square_normalize(raw_w)?;
        let lv_relu = tape.relu(raw_lv)?;
        let logvars = tape.add_scalar(lv_relu, S::from_f64(0.01))?;
        Ok(GmmGridIds {
            weights,
            means,
            logvars,
        })
    }

    /// Recognition model `Q(z | x, Y)`: a conv stack over the normalized
    /// frame, concatenated with `x`, through dense layers to (mu, logvar).
    pub fn recognition(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: TensorId,
        y_norm: TensorId,
    ) -> Result<VaeLatentIds, NetError> {
        let (rec, _) = self.vae_head()?;
        let c = self.conv_relu_stack(tape, bound, &rec.conv, y_norm)?;
        let c_flat = tape.reshape(c, vec![self.arch.raster_flat()])?;
        let joined = tape.concat(&[c_flat, x])?;
        let h = tape.dense(joined, bound.id(rec.fc1.w), bound.id(rec.fc1.b))?;
        let h = tape.relu(h)?;
        let out = tape.dense(h, bound.id(rec.fc2.w), bound.id(rec.fc2.b))?;
        let d_z = self.arch.d_z;
        Ok(VaeLatentIds {
            mu: tape.slice_last(out, 0, d_z)?,
            logvar: tape.slice_last(out, d_z, 2 * d_z)?,
        })
    }

    /// VAE decoder: `(x, z)` to a normalized `[n_range, n_azimuth, 1]` grid
    /// through a sigmoid output.
    pub fn decode(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: TensorId,
        z: TensorId,
    ) -> Result<TensorId, NetError> {
        let (_, dec) = self.vae_head()?;
        let joined = tape.concat(&[x, z])?;
        let out = self.grid_trunk(tape, bound, dec, joined, true)?;
        tape.set_label(out, "y_hat");
        Ok(out)
    }

    /// Discriminator probability that the grid is real, strictly in (0, 1).
    pub fn discriminator_prob(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        y_norm: TensorId,
    ) -> Result<TensorId, NetError> {
        let disc = self.discriminator.as_ref().ok_or_else(|| {
            NetError::Arch(format!("variant `{}` has no discriminator", self.variant.name()))
        })?;
        let c = self.conv_relu_stack(tape, bound, &disc.conv, y_norm)?;
        let (bh, bw) = self.arch.base_hw();
        let flat = tape.reshape(c, vec![bh * bw * self.arch.raster_channels[2]])?;
        let logit = tape.dense(flat, bound.id(disc.fc.w), bound.id(disc.fc.b))?;
        Ok(tape.sigmoid(logit)?)
    }
}

/// Reparameterized draw `z = mu + exp(logvar / 2) * eta` with `eta` held as
/// a constant, so gradients flow into `(mu, logvar)` only.
pub fn reparameterize<S: Scalar>(
    tape: &mut Tape<S>,
    latent: &VaeLatentIds,
    eta: &[S],
) -> Result<TensorId, NetError> {
    let d = tape.dims(latent.mu).to_vec();
    let eta_id = tape.constant(d, eta.to_vec())?;
    let half_lv = tape.scale(latent.logvar, S::from_f64(0.5))?;
    let sigma = tape.exp(half_lv)?;
    let noise = tape.mul(sigma, eta_id)?;
    Ok(tape.add(latent.mu, noise)?)
}

/// Gaussian NLL summed over cells:
/// `sum(0.5 log(2 pi) + 0.5 logvar + (y - mu)^2 exp(-logvar) / 2)`.
pub fn normal_nll<S: Scalar>(
    tape: &mut Tape<S>,
    grids: &NormalGridIds,
    y: TensorId,
) -> Result<TensorId, NetError> {
    let d = tape.sub(y, grids.mean)?;
    let d2 = tape.square(d)?;
    let neg_lv = tape.scale(grids.logvar, S::from_f64(-1.0))?;
    let inv_var = tape.exp(neg_lv)?;
    let quad = tape.mul(d2, inv_var)?;
    let quad_half = tape.scale(quad, S::from_f64(0.5))?;
    let lv_half = tape.scale(grids.logvar, S::from_f64(0.5))?;
    let per_cell = tape.add(quad_half, lv_half)?;
    let total = tape.sum(per_cell)?;
    let cells = tape.value(y).len() as f64;
    let constant = 0.5 * (2.0 * std::f64::consts::PI).ln() * cells;
    Ok(tape.add_scalar(total, S::from_f64(constant))?)
}

/// Mixture NLL summed over cells (log-sum-exp stabilized).
pub fn gmm_nll<S: Scalar>(
    tape: &mut Tape<S>,
    grids: &GmmGridIds,
    y: TensorId,
) -> Result<TensorId, NetError> {
    Ok(tape.gaussian_mixture_nll(y, grids.weights, grids.means, grids.logvars)?)
}

// ── Sampling ────────────────────────────────────────────────────────────

impl<S: Scalar> RadarModel<S> {
    /// Draws one frame from the model for a scene. VAE-family models sample
    /// `z` from the unit Gaussian; direct models sample per-cell from their
    /// predicted distributions. The result is denormalized and clamped.
    pub fn sample_frame(
        &self,
        raster: &SceneRaster,
        objects: &ObjectList,
        rng: &mut ChaCha8Rng,
    ) -> Result<RadarFrame, NetError> {
        let mut tape = Tape::<S>::new();
        let bound = self.bind(&mut tape, BindMode::Frozen)?;
        let r = self.insert_raster(&mut tape, raster)?;
        let o = self.insert_objects(&mut tape, objects)?;
        let x = self.encode_scene(&mut tape, &bound, r, o)?;
        let spec = &self.arch.grid;
        let dims = vec![spec.n_range, spec.n_azimuth, 1];
        let values: Vec<f32> = match self.variant {
            ModelVariant::Normal => {
                let grids = self.normal_forward(&mut tape, &bound, x)?;
                let mean = tape.value(grids.mean);
                let logvar = tape.value(grids.logvar);
                mean.iter()
                    .zip(logvar)
                    .map(|(&m, &lv)| {
                        let eta: f64 =
                            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                        (m.into_f64() + (0.5 * lv.into_f64()).exp() * eta) as f32
                    })
                    .collect()
            }
            ModelVariant::Gmm => {
                let grids = self.gmm_forward(&mut tape, &bound, x)?;
                let n = self.arch.gmm_components;
                let w = tape.value(grids.weights);
                let mu = tape.value(grids.means);
                let lv = tape.value(grids.logvars);
                (0..spec.n_cells())
                    .map(|c| {
                        let mut pick: f64 = rng.random_range(0.0..1.0);
                        let mut comp = n - 1;
                        for i in 0..n {
                            let wi = w[c * n + i].into_f64();
                            if pick < wi {
                                comp = i;
                                break;
                            }
                            pick -= wi;
                        }
                        let eta: f64 =
                            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                        (mu[c * n + comp].into_f64()
                            + (0.5 * lv[c * n + comp].into_f64()).exp() * eta)
                            as f32
                    })
                    .collect()
            }
            _ => {
                let eta: Vec<S> = (0..self.arch.d_z)
                    .map(|_| {
                        S::from_f64(<StandardNormal as Distribution<f64>>::sample(
                            &StandardNormal,
                            rng,
                        ))
                    })
                    .collect();
                let z = tape.constant(vec![self.arch.d_z], eta)?;
                let out = self.decode(&mut tape, &bound, x, z)?;
                tape.value(out).iter().map(|v| v.into_f64() as f32).collect()
            }
        };
        let tensor = Tensor::new(dims, values).expect("sample dims");
        Ok(denormalize_frame(&tensor, spec))
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// Metadata block stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub variant: ModelVariant,
    pub arch: ArchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainMeta>,
}

/// Training provenance recorded alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub alpha: f64,
    pub sigma_sq: f64,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub dataset_hash: u64,
    pub dataset_frames: usize,
}

pub const CHECKPOINT_KIND: &str = "drs-radar-model";

impl RadarModel<f32> {
    pub fn to_checkpoint(&self, train: Option<TrainMeta>) -> Result<Checkpoint, NetError> {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.to_string(),
            variant: self.variant,
            arch: self.arch.clone(),
            train,
        };
        Ok(Checkpoint {
            metadata: serde_json::to_string(&meta)
                .map_err(|e| NetError::Checkpoint(e.to_string()))?,
            params: self
                .store
                .iter()
                .map(|(name, t)| {
                    (
                        name.to_string(),
                        Tensor::new(t.dims().to_vec(), t.data().to_vec()).expect("param dims"),
                    )
                })
                .collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Option<TrainMeta>), NetError> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| NetError::Checkpoint(format!("metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(NetError::Checkpoint(format!(
                "unexpected checkpoint kind `{}`",
                meta.kind
            )));
        }
        let mut model = Self::init(meta.variant, meta.arch, 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(NetError::Checkpoint(format!(
                "checkpoint has {} parameters, architecture expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for (index, (name, tensor)) in ckpt.params.iter().enumerate() {
            let (expected_name, slot) = model.store.entry_mut(index);
            if expected_name != name {
                return Err(NetError::Checkpoint(format!(
                    "parameter {index} is `{name}`, expected `{expected_name}`"
                )));
            }
            if slot.dims() != tensor.dims() {
                return Err(NetError::Checkpoint(format!(
                    "parameter `{name}` dims {:?} do not match architecture dims {:?}",
                    tensor.dims(),
                    slot.dims()
                )));
            }
            slot.data_mut().copy_from_slice(tensor.data());
        }
        Ok((model, meta.train))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{sample_scene, OracleConfig};
    use crate::scene::{encode_object_list, ObjectClass, SceneObject, OBJECT_CAPACITY};
    use approx::assert_relative_eq;

    fn tiny_grid() -> PolarGridSpec {
        PolarGridSpec {
            n_range: 8,
            n_azimuth: 8,
            ..PolarGridSpec::default()
        }
    }

    fn scene() -> (SceneRaster, ObjectList) {
        let config = OracleConfig::default();
        let (raster, objects) = sample_scene(&config, &mut substream(3, "scene", 0)).unwrap();
        (
            raster,
            encode_object_list(&objects, OBJECT_CAPACITY).unwrap(),
        )
    }

    #[test]
    fn encoder_is_deterministic() {
        let arch = ArchConfig::for_grid(PolarGridSpec::default());
        let model = RadarModel::<f32>::init(ModelVariant::Vae, arch, 9).unwrap();
        let (raster, objects) = scene();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
            let r = model.insert_raster(&mut tape, &raster).unwrap();
            let o = model.insert_objects(&mut tape, &objects).unwrap();
            let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
            tape.value(x).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn object_head_rows_permute_with_the_input() {
        let arch = ArchConfig::for_grid(PolarGridSpec::default());
        let model = RadarModel::<f32>::init(ModelVariant::Normal, arch.clone(), 5).unwrap();
        let objects: Vec<SceneObject> = (0..OBJECT_CAPACITY)
            .map(|i| SceneObject {
                x: 10.0 + i as f32,
                y: i as f32 - 3.0,
                heading: 0.1 * i as f32,
                speed: i as f32,
                class: ObjectClass::TARGETS[i % 4],
            })
            .collect();
        let head_rows = |objs: &[SceneObject]| {
            let list = encode_object_list(objs, OBJECT_CAPACITY).unwrap();
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
            let o = model.insert_objects(&mut tape, &list).unwrap();
            let feats = model.object_head(&mut tape, &bound, o).unwrap();
            let c = arch.object_channels[1];
            tape.value(feats)
                .chunks(c)
                .map(|r| r.to_vec())
                .collect::<Vec<_>>()
        };
        let base = head_rows(&objects);
        let mut permuted = objects.clone();
        permuted.swap(0, 5);
        permuted.swap(2, 7);
        let shuffled = head_rows(&permuted);
        assert_eq!(base[0], shuffled[5]);
        assert_eq!(base[5], shuffled[0]);
        assert_eq!(base[2], shuffled[7]);
        assert_eq!(base[1], shuffled[1]);
    }

    #[test]
    fn identical_object_lists_give_identical_x() {
        let arch = ArchConfig::for_grid(PolarGridSpec::default());
        let model = RadarModel::<f32>::init(ModelVariant::Vae, arch, 5).unwrap();
        let (raster, _) = scene();
        let objs = vec![SceneObject {
            x: 15.0,
            y: 1.0,
            heading: 0.3,
            speed: 2.0,
            class: ObjectClass::Car,
        }];
        // Two encodes built through different code paths but with identical
        // used rows and unused-row flags.
        let a = encode_object_list(&objs, OBJECT_CAPACITY).unwrap();
        let b = encode_object_list(&objs.clone(), OBJECT_CAPACITY).unwrap();
        let x_of = |list: &ObjectList| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
            let r = model.insert_raster(&mut tape, &raster).unwrap();
            let o = model.insert_objects(&mut tape, list).unwrap();
            let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
            tape.value(x).to_vec()
        };
        assert_eq!(x_of(&a), x_of(&b));
    }

    #[test]
    fn normal_nll_at_mean_with_unit_variance() {
        // Per-cell NLL must equal 0.5 ln(2 pi) ~= 0.91894 when y = mu and
        // sigma^2 = 1.
        let mut tape = Tape::<f64>::new();
        let cells = 6;
        let y = tape.constant(vec![2, 3, 1], vec![0.4; cells]).unwrap();
        let grids = NormalGridIds {
            mean: tape.constant(vec![2, 3, 1], vec![0.4; cells]).unwrap(),
            logvar: tape.constant(vec![2, 3, 1], vec![0.0; cells]).unwrap(),
        };
        let nll = normal_nll(&mut tape, &grids, y).unwrap();
        assert_relative_eq!(
            tape.scalar_value(nll),
            0.918938533 * cells as f64,
            max_relative = 1e-8
        );
    }

    #[test]
    fn normal_variance_is_always_positive() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::Normal, arch, 3).unwrap();
        let (raster, objects) = tiny_scene();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
        let r = model.insert_raster(&mut tape, &raster).unwrap();
        let o = model.insert_objects(&mut tape, &objects).unwrap();
        let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
        let grids = model.normal_forward(&mut tape, &bound, x).unwrap();
        for &lv in tape.value(grids.logvar) {
            assert!((lv as f64).exp() > 0.0);
        }
    }

    fn tiny_scene() -> (SceneRaster, ObjectList) {
        let mut config = OracleConfig::default();
        config.grid = tiny_grid();
        let (raster, objects) = sample_scene(&config, &mut substream(8, "tiny", 0)).unwrap();
        (
            raster,
            encode_object_list(&objects, OBJECT_CAPACITY).unwrap(),
        )
    }

    #[test]
    fn gmm_weights_sum_to_one_and_logvar_has_offset() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::Gmm, arch.clone(), 4).unwrap();
        let (raster, objects) = tiny_scene();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
        let r = model.insert_raster(&mut tape, &raster).unwrap();
        let o = model.insert_objects(&mut tape, &objects).unwrap();
        let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
        let grids = model.gmm_forward(&mut tape, &bound, x).unwrap();
        let n = arch.gmm_components;
        let w = tape.value(grids.weights);
        for cell in w.chunks(n) {
            let s: f32 = cell.iter().sum();
            assert!((s - 1.0).abs() <= 1e-5, "weight sum {s}");
            assert!(cell.iter().all(|&v| v >= 0.0));
        }
        assert!(tape.value(grids.logvars).iter().all(|&lv| lv >= 0.01));
    }

    #[test]
    fn gmm_single_component_reduces_to_normal_nll() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(vec![2, 1, 1], vec![0.3, 0.8]).unwrap();
        let mu_vals = vec![0.25, 0.9];
        let lv_vals = vec![0.3, 0.7];
        let grids = GmmGridIds {
            weights: tape.constant(vec![2, 1, 1], vec![1.0, 1.0]).unwrap(),
            means: tape.constant(vec![2, 1, 1], mu_vals.clone()).unwrap(),
            logvars: tape.constant(vec![2, 1, 1], lv_vals.clone()).unwrap(),
        };
        let g = gmm_nll(&mut tape, &grids, y).unwrap();
        let y2 = tape.constant(vec![2, 1, 1], vec![0.3, 0.8]).unwrap();
        let ngrids = NormalGridIds {
            mean: tape.constant(vec![2, 1, 1], mu_vals).unwrap(),
            logvar: tape.constant(vec![2, 1, 1], lv_vals).unwrap(),
        };
        let nn = normal_nll(&mut tape, &ngrids, y2).unwrap();
        assert_relative_eq!(
            tape.scalar_value(g),
            tape.scalar_value(nn),
            max_relative = 1e-10
        );
    }

    #[test]
    fn nll_increases_when_mean_moves_away_from_y() {
        let mut tape = Tape::<f64>::new();
        let make = |tape: &mut Tape<f64>, mu: f64| {
            let y = tape.constant(vec![1, 1, 1], vec![0.5]).unwrap();
            let grids = NormalGridIds {
                mean: tape.constant(vec![1, 1, 1], vec![mu]).unwrap(),
                logvar: tape.constant(vec![1, 1, 1], vec![-1.0]).unwrap(),
            };
            let nll = normal_nll(tape, &grids, y).unwrap();
            tape.scalar_value(nll)
        };
        assert!(make(&mut tape, 0.5) <= make(&mut tape, 0.7));
        let make_gmm = |tape: &mut Tape<f64>, mu: f64| {
            let y = tape.constant(vec![1, 1, 1], vec![0.5]).unwrap();
            let grids = GmmGridIds {
                weights: tape.constant(vec![1, 1, 2], vec![0.5, 0.5]).unwrap(),
                means: tape.constant(vec![1, 1, 2], vec![mu, mu + 0.1]).unwrap(),
                logvars: tape.constant(vec![1, 1, 2], vec![0.11, 0.21]).unwrap(),
            };
            let nll = gmm_nll(tape, &grids, y).unwrap();
            tape.scalar_value(nll)
        };
        assert!(make_gmm(&mut tape, 0.45) <= make_gmm(&mut tape, 0.9));
    }

    #[test]
    fn decoder_output_is_64x64x1_for_default_config() {
        let arch = ArchConfig::for_grid(PolarGridSpec::default());
        let model = RadarModel::<f32>::init(ModelVariant::Vae, arch.clone(), 1).unwrap();
        let (raster, objects) = scene();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
        let r = model.insert_raster(&mut tape, &raster).unwrap();
        let o = model.insert_objects(&mut tape, &objects).unwrap();
        let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
        let z = tape.constant(vec![arch.d_z], vec![0.0; arch.d_z]).unwrap();
        let out = model.decode(&mut tape, &bound, x, z).unwrap();
        assert_eq!(tape.dims(out), &[64, 64, 1]);
        assert!(tape.value(out).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn different_latents_give_different_outputs() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::Vae, arch.clone(), 2).unwrap();
        let (raster, objects) = tiny_scene();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
        let r = model.insert_raster(&mut tape, &raster).unwrap();
        let o = model.insert_objects(&mut tape, &objects).unwrap();
        let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
        let z1 = tape.constant(vec![arch.d_z], vec![1.5, -0.5]).unwrap();
        let z2 = tape.constant(vec![arch.d_z], vec![-1.5, 2.0]).unwrap();
        let y1 = model.decode(&mut tape, &bound, x, z1).unwrap();
        let y2 = model.decode(&mut tape, &bound, x, z2).unwrap();
        let diff: f32 = tape
            .value(y1)
            .iter()
            .zip(tape.value(y2))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "distinct z should perturb the decoded grid");
    }

    #[test]
    fn recognition_outputs_are_finite_with_latent_shape() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::Vae, arch.clone(), 6).unwrap();
        let (raster, objects) = tiny_scene();
        let frame = RadarFrame::uniform_floor(&arch.grid);
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
        let r = model.insert_raster(&mut tape, &raster).unwrap();
        let o = model.insert_objects(&mut tape, &objects).unwrap();
        let x = model.encode_scene(&mut tape, &bound, r, o).unwrap();
        let y = model.insert_frame(&mut tape, &frame).unwrap();
        let latent = model.recognition(&mut tape, &bound, x, y).unwrap();
        assert_eq!(tape.dims(latent.mu), &[arch.d_z]);
        assert_eq!(tape.dims(latent.logvar), &[arch.d_z]);
        assert!(tape.value(latent.mu).iter().all(|v| v.is_finite()));
        assert!(tape.value(latent.logvar).iter().all(|v| v.is_finite()));
        // Frozen noise makes the reparameterized draw deterministic.
        let eta = vec![0.3_f32, -0.7];
        let za = reparameterize(&mut tape, &latent, &eta).unwrap();
        let zb = reparameterize(&mut tape, &latent, &eta).unwrap();
        assert_eq!(tape.value(za), tape.value(zb));
    }

    #[test]
    fn discriminator_stays_strictly_inside_unit_interval() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::VaeMixed, arch.clone(), 6).unwrap();
        for idx in 0..10 {
            let mut rng = substream(21, "disc", idx);
            let vals: Vec<f32> = (0..arch.grid.n_cells())
                .map(|_| rng.random_range(-5.0..5.0))
                .collect();
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, BindMode::Frozen).unwrap();
            let y = tape
                .constant(vec![arch.grid.n_range, arch.grid.n_azimuth, 1], vals)
                .unwrap();
            let p = model.discriminator_prob(&mut tape, &bound, y).unwrap();
            let v = tape.scalar_value(p);
            assert!(v > 0.0 && v < 1.0, "discriminator output {v}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_pass_bitwise() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::VaeMixed, arch.clone(), 12).unwrap();
        let (raster, objects) = tiny_scene();
        let forward = |m: &RadarModel<f32>| {
            let mut rng = substream(33, "sample", 0);
            m.sample_frame(&raster, &objects, &mut rng)
                .unwrap()
                .power
                .data()
                .to_vec()
        };
        let before = forward(&model);
        let ckpt = model.to_checkpoint(None).unwrap();
        let (loaded, _) = RadarModel::from_checkpoint(&ckpt).unwrap();
        let after = forward(&loaded);
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_rejects_mismatched_dims() {
        let arch = ArchConfig::tiny(tiny_grid());
        let model = RadarModel::<f32>::init(ModelVariant::Normal, arch, 12).unwrap();
        let mut ckpt = model.to_checkpoint(None).unwrap();
        ckpt.params[0].1 = Tensor::zeros(vec![1, 1, 1, 1]);
        assert!(RadarModel::from_checkpoint(&ckpt).is_err());
    }
}
