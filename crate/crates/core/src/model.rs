//! Toy dual encoder: a tanh MLP image tower and a class-embedding table with
//! a linear projection as the text tower. Both towers emit unit rows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Default contrastive temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Pixels per image.
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 256,
            hidden_dims: vec![128],
            embed_dim: 32,
            num_classes: 8,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each image layer, input to output.
    pub fn image_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Shapes of every parameter tensor in storage order: for each image layer
    /// a weight `fan_in × fan_out` and a bias `fan_out`, then the class table
    /// `num_classes × embed_dim` and the text projection `embed_dim × embed_dim`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (fan_in, fan_out) in self.image_layers() {
            shapes.push(vec![fan_in, fan_out]);
            shapes.push(vec![fan_out]);
        }
        shapes.push(vec![self.num_classes, self.embed_dim]);
        shapes.push(vec![self.embed_dim, self.embed_dim]);
        shapes
    }
}

/// Whether bound parameters take part in differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

/// Parameters of a [`DualEncoder`] placed on a tape, in storage order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    image_count: usize,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn image_vars(&self) -> &[Var] {
        &self.vars[..self.image_count]
    }

    pub fn text_vars(&self) -> &[Var] {
        &self.vars[self.image_count..]
    }
}

/// Image tower parameters (θ), text tower parameters (φ) and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    temperature: f64,
    params: Vec<Tensor>,
}

impl DualEncoder {
    /// Fresh weights, uniform in `±1/√fan_in`, from `cfg.seed`.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / crate::math::sqrt(fan_in as f64);
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)
        };
        for (fan_in, fan_out) in cfg.image_layers() {
            params.push(uniform(vec![fan_in, fan_out], fan_in)?);
            params.push(uniform(vec![fan_out], fan_in)?);
        }
        // table rows are independent embeddings, fan-in 1
        params.push(uniform(vec![cfg.num_classes, cfg.embed_dim], 1)?);
        params.push(uniform(vec![cfg.embed_dim, cfg.embed_dim], cfg.embed_dim)?);
        Ok(Self {
            config: cfg,
            temperature: DEFAULT_TEMPERATURE,
            params,
        })
    }

    /// Reassembles a model from stored parts, validating every shape.
    pub fn from_parts(
        config: EncoderConfig,
        temperature: f64,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidTemperature(temperature));
        }
        let shapes = config.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::ShapeMismatch {
                op: "from_parts",
                detail: format!("parameters do not match config {config:?}"),
            });
        }
        Ok(Self {
            config,
            temperature,
            params,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Number of leading parameter tensors that belong to the image tower.
    pub fn image_param_count(&self) -> usize {
        2 * self.config.image_layers().len()
    }

    pub fn bind(&self, tape: &mut Tape, image: Binding, text: Binding) -> BoundParams {
        let image_count = self.image_param_count();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let binding = if i < image_count { image } else { text };
                match binding {
                    Binding::Trainable => tape.leaf(p.clone()),
                    Binding::Frozen => tape.constant(p.clone()),
                }
            })
            .collect();
        BoundParams { vars, image_count }
    }

    /// Image embeddings on a tape; differentiable in both θ and the pixels.
    pub fn image_on(&self, tape: &mut Tape, params: &BoundParams, images: Var) -> Result<Var> {
        let x = tape.value(images);
        let (_, cols) = x.expect_matrix("encode_images")?;
        if cols != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_images",
                detail: format!(
                    "images have {cols} columns, encoder expects {}",
                    self.config.input_dim
                ),
            });
        }
        let layers = params.image_vars().chunks_exact(2).collect::<Vec<_>>();
        let mut h = images;
        for (i, layer) in layers.iter().enumerate() {
            h = tape.matmul(h, layer[0])?;
            h = tape.add_row(h, layer[1])?;
            if i + 1 < layers.len() {
                h = tape.tanh(h)?;
            }
        }
        tape.l2_normalize_rows(h)
    }

    /// Class text embeddings on a tape; differentiable in φ.
    pub fn classes_on(&self, tape: &mut Tape, params: &BoundParams) -> Result<Var> {
        let text = params.text_vars();
        let projected = tape.matmul(text[0], text[1])?;
        tape.l2_normalize_rows(projected)
    }

    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, Binding::Frozen, Binding::Frozen);
        let x = tape.constant(images.clone());
        let z = self.image_on(&mut tape, &params, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode_classes(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, Binding::Frozen, Binding::Frozen);
        let t = self.classes_on(&mut tape, &params)?;
        Ok(tape.value(t).clone())
    }

    /// FNV-1a over the configuration, temperature and every weight's bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        let c = &self.config;
        for v in [c.input_dim, c.embed_dim, c.num_classes, c.hidden_dims.len()]
            .into_iter()
            .chain(c.hidden_dims.iter().copied())
        {
            h.write(&(v as u64).to_le_bytes());
        }
        h.write(&c.seed.to_le_bytes());
        h.write(&self.temperature.to_bits().to_le_bytes());
        for p in &self.params {
            for v in p.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.0
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Frozen copy of a pretrained model together with its class embeddings.
///
/// There is no mutable access; the snapshot stays bit-identical for its
/// whole lifetime.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot {
    model: DualEncoder,
    text: Tensor,
}

impl TeacherSnapshot {
    pub fn new(model: &DualEncoder) -> Result<Self> {
        let model = model.clone();
        let text = model.encode_classes()?;
        Ok(Self { model, text })
    }

    pub fn model(&self) -> &DualEncoder {
        &self.model
    }

    /// Cached class embeddings `t̂`.
    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        self.model.encode_images(images)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv(self.model.fingerprint());
        for v in self.text.data() {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.0
    }
}

/// Freezes `model` as a teacher.
pub fn snapshot_teacher(model: &DualEncoder) -> Result<TeacherSnapshot> {
    TeacherSnapshot::new(model)
}

/// Anything that maps an image batch on a tape to unit embeddings.
pub trait ImageEncoder {
    fn embed_on(&self, tape: &mut Tape, images: Var) -> Result<Var>;
    fn temperature(&self) -> f64;
}

impl ImageEncoder for DualEncoder {
    fn embed_on(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let params = self.bind(tape, Binding::Frozen, Binding::Frozen);
        self.image_on(tape, &params, images)
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl ImageEncoder for TeacherSnapshot {
    fn embed_on(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        self.model.embed_on(tape, images)
    }

    fn temperature(&self) -> f64 {
        self.model.temperature
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![5],
            embed_dim: 4,
            num_classes: 3,
            seed,
        }
    }

    fn batch() -> Tensor {
        Tensor::from_rows(&[
            [0.1, 0.9, 0.3, 0.0, 0.5, 0.7],
            [0.8, 0.2, 0.6, 1.0, 0.4, 0.3],
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        ])
        .unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = DualEncoder::new(cfg(1)).unwrap();
        assert_eq!(a, DualEncoder::new(cfg(1)).unwrap());
        assert_ne!(a.params(), DualEncoder::new(cfg(2)).unwrap().params());
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(0);
        c.embed_dim = 1;
        assert!(matches!(DualEncoder::new(c), Err(Error::InvalidConfig(_))));
        let mut c = cfg(0);
        c.hidden_dims = vec![0];
        assert!(matches!(DualEncoder::new(c), Err(Error::InvalidConfig(_))));
        let mut c = cfg(0);
        c.input_dim = 0;
        assert!(matches!(DualEncoder::new(c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn no_hidden_layers_is_linear() {
        let mut c = cfg(3);
        c.hidden_dims.clear();
        let m = DualEncoder::new(c).unwrap();
        assert_eq!(m.image_param_count(), 2);
        assert_eq!(m.encode_images(&batch()).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn outputs_are_unit_rows() {
        let m = DualEncoder::new(cfg(4)).unwrap();
        for t in [
            m.encode_images(&batch()).unwrap(),
            m.encode_classes().unwrap(),
        ] {
            for n in t.row_norms() {
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_permutation_is_equivariant() {
        let m = DualEncoder::new(cfg(5)).unwrap();
        let x = batch();
        let z = m.encode_images(&x).unwrap();
        let zp = m
            .encode_images(&x.select_rows(&[2, 0, 1]).unwrap())
            .unwrap();
        assert_eq!(zp, z.select_rows(&[2, 0, 1]).unwrap());
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = DualEncoder::new(cfg(5)).unwrap();
        let x = Tensor::from_rows(&[[0.0; 5]]).unwrap();
        assert!(matches!(
            m.encode_images(&x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut m = DualEncoder::new(cfg(6)).unwrap();
        let teacher = snapshot_teacher(&m).unwrap();
        assert_eq!(teacher, snapshot_teacher(&m).unwrap());
        assert_eq!(teacher.text(), &teacher.model().encode_classes().unwrap());
        assert_eq!(
            teacher.encode_images(&batch()).unwrap(),
            m.encode_images(&batch()).unwrap()
        );

        let before = teacher.fingerprint();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += 0.25;
            }
        }
        assert_eq!(teacher.fingerprint(), before);
        assert_ne!(teacher.model(), &m);
    }

    #[test]
    fn image_only_loss_leaves_text_gradient_zero() {
        let m = DualEncoder::new(cfg(7)).unwrap();
        let mut tape = Tape::new();
        let params = m.bind(&mut tape, Binding::Trainable, Binding::Trainable);
        let x = tape.constant(batch());
        let z = m.image_on(&mut tape, &params, x).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &v in params.text_vars() {
            assert!(grads.get(v).unwrap().data().iter().all(|&g| g == 0.0));
        }
    }
}
