//! Attack targets: the [`DiffModel`] capability pair and a small zoo of
//! differentiable shadow-removal maps built on the autodiff tape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{vjp_check, AutodiffError, BlurKernel, GradCheckReport, Tape, Tensor, Var};
use crate::image::{Image, ImageError};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{model} expects {expected}-channel input, got {got}")]
    Channels { model: String, expected: usize, got: usize },
    #[error("cotangent has {got} entries, image has {expected}")]
    Cotangent { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} (loss {loss}); try a smaller learning rate than {lr}")]
    Diverged { epoch: usize, loss: f64, lr: f64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training pair {index} has mismatched shapes")]
    PairShape { index: usize },
    #[error("parameter {name} is missing or has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter {0} contains a non-finite value")]
    NonFiniteParam(String),
}

/// A differentiable image-to-image map, seen only through forward evaluation
/// and vector-Jacobian products with respect to its input.
pub trait DiffModel: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, image: &Image) -> Result<Image, ModelError>;

    /// `J(image)^T * cotangent`, shaped like the image.
    fn input_grad(&self, image: &Image, cotangent: &[f64]) -> Result<Vec<f64>, ModelError>;
}

/// Model expressed as a recorded graph over tape primitives. Every
/// `GraphModel` is a [`DiffModel`].
pub trait GraphModel: Send + Sync {
    fn name(&self) -> &str;

    fn params(&self) -> &ModelParams;

    fn params_mut(&mut self) -> &mut ModelParams;

    /// Records the forward pass on `tape`. `params` holds one handle per entry
    /// of [`GraphModel::params`], in map order.
    fn record(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var, ModelError>;
}

fn image_tensor(image: &Image) -> Tensor {
    Tensor::new(image.shape().to_vec(), image.data().to_vec()).expect("image shape is valid")
}

fn record_with_params<M: GraphModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    input: Var,
    params_require_grad: bool,
) -> Result<(Var, Vec<Var>), ModelError> {
    let pvars: Vec<Var> = model
        .params()
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), params_require_grad))
        .collect();
    let out = model.record(tape, input, &pvars)?;
    Ok((out, pvars))
}

impl<M: GraphModel> DiffModel for M {
    fn name(&self) -> &str {
        GraphModel::name(self)
    }

    fn forward(&self, image: &Image) -> Result<Image, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(image_tensor(image));
        let (y, _) = record_with_params(self, &mut tape, x, false)?;
        let [h, w, c] = image.shape();
        Ok(Image::from_clamped(h, w, c, tape.value(y).data().to_vec())?)
    }

    fn input_grad(&self, image: &Image, cotangent: &[f64]) -> Result<Vec<f64>, ModelError> {
        if cotangent.len() != image.len() {
            return Err(ModelError::Cotangent {
                expected: image.len(),
                got: cotangent.len(),
            });
        }
        let mut tape = Tape::new();
        let x = tape.leaf(image_tensor(image), true);
        let (y, _) = record_with_params(self, &mut tape, x, false)?;
        let c = tape.constant(Tensor::new(tape.shape(y).to_vec(), cotangent.to_vec())?);
        let prod = tape.mul(y, c)?;
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        Ok(tape
            .grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; image.len()]))
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        match self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(ModelError::NonFiniteParam(name.clone())),
            None => Ok(()),
        }
    }

    /// Serializes to the flat little-endian parameter format:
    ///
    /// ```text
    /// magic "SSPM" | version u32 | count u32 |
    ///   count x { name_len u32 | name utf-8 | rank u32 | dims u64 x rank | f64 x prod(dims) }
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParamsError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "header")?;
        if magic != PARAMS_MAGIC {
            return Err(ParamsError::BadMagic);
        }
        let version = r.u32("header")?;
        if version != PARAMS_VERSION {
            return Err(ParamsError::Version(version));
        }
        let count = r.u32("header")?;
        let mut params = ModelParams::new();
        for index in 0..count {
            let at = format!("tensor #{index}");
            let name_len = r.u32(&at)? as usize;
            let name = String::from_utf8(r.take(name_len, &at)?.to_vec()).map_err(|_| ParamsError::Name(index))?;
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or(ParamsError::Name(index))?, &name)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|_| ParamsError::Shape(name.clone()))?;
            params.insert(name, tensor);
        }
        Ok(params)
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"SSPM";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a parameter file")]
    BadMagic,
    #[error("unsupported parameter file version {0}")]
    Version(u32),
    #[error("truncated parameter file at byte {offset} while reading {at}")]
    Truncated { offset: usize, at: String },
    #[error("tensor #{0} has an invalid name or size")]
    Name(u32),
    #[error("tensor {0} has an invalid shape")]
    Shape(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, at: &str) -> Result<&'a [u8], ParamsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ParamsError::Truncated {
                offset: self.bytes.len(),
                at: at.to_string(),
            }),
        }
    }

    fn u32(&mut self, at: &str) -> Result<u32, ParamsError> {
        Ok(u32::from_le_bytes(self.take(4, at)?.try_into().unwrap()))
    }

    fn u64(&mut self, at: &str) -> Result<u64, ParamsError> {
        Ok(u64::from_le_bytes(self.take(8, at)?.try_into().unwrap()))
    }
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ParamsError> {
    let path = path.as_ref();
    fs::write(path, params.to_bytes()).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams, ParamsError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelParams::from_bytes(&bytes)
}

/// `f(I) = I`.
#[derive(Debug, Clone, Default)]
pub struct Identity {
    params: ModelParams,
}

pub fn model_identity() -> Identity {
    Identity::default()
}

impl GraphModel for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn record(&self, _tape: &mut Tape, input: Var, _params: &[Var]) -> Result<Var, ModelError> {
        Ok(input)
    }
}

/// Analytic illumination correction. Each pixel is multiplied by
///
/// ```text
/// g = clamp(mean(L) / (blur(L) + 1e-3), 1, max_gain)
/// ```
///
/// where `L` is the channel-mean luminance and `blur` a normalized box blur,
/// so locally dark (shadowed) areas are brightened toward the global level
/// and nothing is ever darkened.
#[derive(Debug, Clone)]
pub struct GainMap {
    blur_radius: usize,
    max_gain: f64,
    params: ModelParams,
}

pub const GAIN_DENOM_FLOOR: f64 = 1e-3;

pub fn model_gainmap(blur_radius: usize, max_gain: f64) -> GainMap {
    assert!(blur_radius >= 1, "gain map blur radius must be at least 1");
    assert!(max_gain > 1.0, "gain map max_gain must exceed 1");
    GainMap {
        blur_radius,
        max_gain,
        params: ModelParams::new(),
    }
}

impl GainMap {
    pub const DEFAULT_BLUR_RADIUS: usize = 1;
    pub const DEFAULT_MAX_GAIN: f64 = 5.0;

    pub fn blur_radius(&self) -> usize {
        self.blur_radius
    }

    pub fn max_gain(&self) -> f64 {
        self.max_gain
    }
}

impl Default for GainMap {
    fn default() -> Self {
        model_gainmap(Self::DEFAULT_BLUR_RADIUS, Self::DEFAULT_MAX_GAIN)
    }
}

impl GraphModel for GainMap {
    fn name(&self) -> &str {
        "gainmap"
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape, input: Var, _params: &[Var]) -> Result<Var, ModelError> {
        let shape = tape.shape(input).to_vec();
        let lum = tape.channel_mean(input)?;
        let global = tape.mean(lum);
        let lum_shape = tape.shape(lum).to_vec();
        let global = tape.broadcast(global, &lum_shape)?;
        let local = tape.blur(lum, &BlurKernel::boxed(self.blur_radius))?;
        let local = tape.add_scalar(local, GAIN_DENOM_FLOOR);
        let gain = tape.div(global, local)?;
        let gain = tape.clamp(gain, 1.0, self.max_gain);
        let gain = tape.expand_channels(gain, shape[2])?;
        let out = tape.mul(input, gain)?;
        Ok(tape.clamp01(out))
    }
}

/// Three 3x3 convolutions (3 -> 8 -> 8 -> 3) with ReLU between, a residual
/// connection from the input, and a final clamp to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TinyCnn {
    params: ModelParams,
}

const TINY_LAYERS: [(&str, usize, usize); 3] = [("conv1", 3, 8), ("conv2", 8, 8), ("conv3", 8, 3)];

pub fn model_tinycnn(seed: u64) -> TinyCnn {
    let mut rng = Stream::keyed(&[seed, 0x7469_6e79]);
    let mut params = ModelParams::new();
    for (name, cin, cout) in TINY_LAYERS {
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.uniform(-0.1, 0.1)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.uniform(-0.1, 0.1)).collect();
        params.insert(format!("{name}.weight"), Tensor::new(vec![cout, cin, 3, 3], w).unwrap());
        params.insert(format!("{name}.bias"), Tensor::new(vec![cout], b).unwrap());
    }
    TinyCnn { params }
}

impl TinyCnn {
    /// Wraps loaded parameters after checking every expected tensor is present
    /// with the right shape.
    pub fn from_params(params: ModelParams) -> Result<Self, ModelError> {
        for (name, cin, cout) in TINY_LAYERS {
            for (suffix, shape) in [("weight", vec![cout, cin, 3, 3]), ("bias", vec![cout])] {
                let key = format!("{name}.{suffix}");
                let got = params.get(&key).map(|t| t.shape().to_vec()).unwrap_or_default();
                if got != shape {
                    return Err(ModelError::ParamShape {
                        name: key,
                        expected: shape,
                        got,
                    });
                }
            }
        }
        params.check_finite()?;
        Ok(Self { params })
    }
}

impl GraphModel for TinyCnn {
    fn name(&self) -> &str {
        "tinycnn"
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var, ModelError> {
        let c = tape.shape(input)[2];
        if c != 3 {
            return Err(ModelError::Channels {
                model: "tinycnn".into(),
                expected: 3,
                got: c,
            });
        }
        // map order: conv1.bias, conv1.weight, conv2.bias, ...
        let layer = |i: usize| (params[2 * i + 1], params[2 * i]);
        let (w, b) = layer(0);
        let h = tape.conv2d(input, w, Some(b))?;
        let h = tape.relu(h);
        let (w, b) = layer(1);
        let h = tape.conv2d(h, w, Some(b))?;
        let h = tape.relu(h);
        let (w, b) = layer(2);
        let r = tape.conv2d(h, w, Some(b))?;
        let out = tape.add(input, r)?;
        Ok(tape.clamp01(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Full-batch MSE before each epoch, followed by the final MSE
    /// (`epochs + 1` entries).
    pub losses: Vec<f64>,
}

/// Mean squared error over every pixel of every pair, with its gradient
/// with respect to each parameter (map order).
fn loss_and_grads<M: GraphModel>(model: &M, pairs: &[(Image, Image)]) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let total: usize = pairs.iter().map(|(x, _)| x.len()).sum();
    let inv = 1.0 / total as f64;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    for (input, target) in pairs {
        let mut tape = Tape::new();
        let x = tape.constant(image_tensor(input));
        let (y, pvars) = record_with_params(model, &mut tape, x, true)?;
        let t = tape.constant(image_tensor(target));
        let d = tape.sub(y, t)?;
        let sq = tape.sq_norm(d);
        let l = tape.scale(sq, inv);
        tape.backward(l)?;
        loss += tape.value(l).item();
        for (acc, v) in grads.iter_mut().zip(&pvars) {
            if let Some(g) = tape.grad(*v) {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }
    Ok((loss, grads))
}

/// Full-batch gradient descent on mean squared error between the model output
/// for each shadow image and its shadow-free target.
pub fn train_toy<M: GraphModel>(
    model: &mut M,
    dataset: &[(Image, Image)],
    config: TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if let Some(index) = dataset.iter().position(|(a, b)| !a.same_shape(b)) {
        return Err(ModelError::PairShape { index });
    }
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grads) = loss_and_grads(model, dataset)?;
        if !loss.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                loss,
                lr: config.lr,
            });
        }
        on_epoch(epoch, loss);
        losses.push(loss);
        for ((_, t), g) in model.params_mut().iter_mut().zip(&grads) {
            t.data_mut().iter_mut().zip(g).for_each(|(p, &d)| *p -= config.lr * d);
        }
    }
    let (final_loss, _) = loss_and_grads(model, dataset)?;
    if !final_loss.is_finite() {
        return Err(ModelError::Diverged {
            epoch: config.epochs,
            loss: final_loss,
            lr: config.lr,
        });
    }
    losses.push(final_loss);
    model.params().check_finite()?;
    Ok(TrainReport {
        params: model.params().clone(),
        losses,
    })
}

/// Checks a model's input gradient `J^T c` against central differences of
/// its outputs contracted with `c`, a fixed random cotangent drawn from
/// `seed`. Kink-straddling coordinates are skipped as in [`vjp_check`].
pub fn model_grad_check<M: GraphModel + ?Sized>(
    model: &M,
    image: &Image,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, ModelError> {
    let mut rng = Stream::keyed(&[seed, 0x0063_6f74]);
    let cot = Tensor::new(
        image.shape().to_vec(),
        (0..image.len()).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )?;
    let report = vjp_check(
        |tape, x| match record_with_params(model, tape, x, false) {
            Ok((y, _)) => Ok(y),
            Err(ModelError::Autodiff(e)) => Err(e),
            Err(other) => panic!("model recording failed: {other}"),
        },
        &image_tensor(image),
        &cot,
        h,
        tol,
    )?;
    Ok(report)
}
