//! The shared instance classifier, its composition with bag pooling, and the
//! Bernoulli negative log-likelihood of a bag label.

use std::fmt;

use rand::Rng;

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::numerics::{layer_backward, layer_forward, LayerCache, LayerSpec, Mode, Prng, Purpose, StreamKey, Tensor};
use crate::pooling::{pool, pool_grad, PoolingConfig, ScoreVector};

pub const PARAMS_VERSION: u32 = 1;

/// Ordered layer chain plus the `[channels, height, width]` patch shape it accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceClassifierConfig {
    pub layers: Vec<LayerSpec>,
    pub input_shape: [usize; 3],
}

impl InstanceClassifierConfig {
    /// Three conv/relu/maxpool blocks (5x5 to 16, 3x3 to 32, 3x3 to 32), then
    /// a 128-unit hidden layer with dropout 0.5 and a single sigmoid output.
    /// For 96x96 RGB patches the flattened trunk is 32x10x10.
    pub fn default_for_patch(patch_size: usize) -> Result<Self> {
        let mut layers = vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 16,
                kernel: 5,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Conv2d {
                in_channels: 16,
                out_channels: 32,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Conv2d {
                in_channels: 32,
                out_channels: 32,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
        ];
        let mut shape = vec![3, patch_size, patch_size];
        for (i, l) in layers.iter().enumerate() {
            shape = l.output_shape(&shape).ok_or_else(|| {
                Error::config(format!(
                    "{patch_size}px patches are too small for the default architecture (layer {i}: {l})"
                ))
            })?;
        }
        let flat: usize = shape.iter().product();
        layers.extend([
            LayerSpec::Affine {
                inputs: flat,
                outputs: 128,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Affine {
                inputs: 128,
                outputs: 1,
            },
            LayerSpec::Sigmoid,
        ]);
        let config = InstanceClassifierConfig {
            layers,
            input_shape: [3, patch_size, patch_size],
        };
        config.validate()?;
        Ok(config)
    }

    /// Shape-checks the chain and requires a final sigmoid over one unit.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            shape = l
                .output_shape(&shape)
                .ok_or_else(|| Error::config(format!("layer {i} ({l}) cannot accept input shape {shape:?}")))?;
        }
        if self.layers.last() != Some(&LayerSpec::Sigmoid) || shape.iter().product::<usize>() != 1 {
            return Err(Error::config("the classifier must end in a sigmoid over a single unit"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_shapes())
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// `layers = a;b;c` and `input_shape = CxHxW` entries.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let layers: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        let [c, h, w] = self.input_shape;
        vec![("layers", layers.join(";")), ("input_shape", format!("{c}x{h}x{w}"))]
    }

    pub fn from_kv(layers: &str, input_shape: &str) -> Result<Self> {
        let layers = layers.split(';').map(str::parse).collect::<Result<Vec<LayerSpec>>>()?;
        let dims: Vec<usize> = input_shape
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::config(format!("bad input_shape {input_shape:?}")))
            })
            .collect::<Result<_>>()?;
        let input_shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::config(format!("input_shape must be CxHxW, got {input_shape:?}")))?;
        let config = InstanceClassifierConfig { layers, input_shape };
        config.validate()?;
        Ok(config)
    }
}

/// Learnable tensors, grouped per layer (weight then bias; empty for
/// parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Vec<Tensor>>,
    pub version: u32,
}

impl ModelParams {
    pub fn zeros(config: &InstanceClassifierConfig) -> Self {
        ModelParams {
            layers: config
                .layers
                .iter()
                .map(|l| l.param_shapes().iter().map(|s| Tensor::zeros(s)).collect())
                .collect(),
            version: PARAMS_VERSION,
        }
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(config: &InstanceClassifierConfig, key: StreamKey) -> Self {
        let mut params = ModelParams::zeros(config);
        let key = key.purpose(Purpose::Init);
        for (i, (spec, tensors)) in config.layers.iter().zip(params.layers.iter_mut()).enumerate() {
            if let (Some((fan_in, fan_out)), Some(w)) = (spec.fans(), tensors.first_mut()) {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = key.child(i as u64).rng();
                w.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-limit..limit));
            }
        }
        params
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flatten()
    }

    /// `(name, tensor)` pairs such as `layer3.weight`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, ts) in self.layers.iter().enumerate() {
            for (j, t) in ts.iter().enumerate() {
                let kind = if j == 0 { "weight" } else { "bias" };
                out.push((format!("layer{i}.{kind}"), t));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Bag probability with the per-instance scores it was pooled from.
#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub theta: f64,
    pub instance_scores: ScoreVector,
    /// `(row, col)` grid cell of each scored patch, in bag order.
    pub coords: Vec<(usize, usize)>,
}

/// Classifier configuration, parameters and pooling operator together.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub classifier: InstanceClassifierConfig,
    pub params: ModelParams,
    pub pooling: PoolingConfig,
}

impl fmt::Display for MilModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} layers, {} parameters, pooling {}",
            self.classifier.layers.len(),
            self.params.len(),
            self.pooling.kind
        )
    }
}

/// Clamps `theta` to `[epsilon, 1 - epsilon]` and returns
/// `-(y ln theta + (1 - y) ln(1 - theta))`.
pub fn nll_loss(theta: f64, y: u8, epsilon: f64) -> Result<f64> {
    let t = theta.clamp(epsilon, 1.0 - epsilon);
    match y {
        1 => Ok(-t.ln()),
        0 => Ok(-(-t).ln_1p()),
        _ => Err(Error::domain(format!("bag label must be 0 or 1, got {y}"))),
    }
}

/// `d loss / d theta` at the clamped theta, passed straight through the clamp.
pub fn nll_grad(theta: f64, y: u8, epsilon: f64) -> Result<f64> {
    let t = theta.clamp(epsilon, 1.0 - epsilon);
    match y {
        1 => Ok(-1.0 / t),
        0 => Ok(1.0 / (1.0 - t)),
        _ => Err(Error::domain(format!("bag label must be 0 or 1, got {y}"))),
    }
}

/// Cache memory per bag above which the gradient pass recomputes each
/// instance's forward pass instead of holding all K caches at once.
const CACHE_BUDGET_BYTES: usize = 256 << 20;

impl MilModel {
    pub fn new(classifier: InstanceClassifierConfig, params: ModelParams, pooling: PoolingConfig) -> Result<Self> {
        classifier.validate()?;
        pooling.validate()?;
        let want: Vec<Vec<Vec<usize>>> = classifier.layers.iter().map(|l| l.param_shapes()).collect();
        let have: Vec<Vec<Vec<usize>>> = params
            .layers
            .iter()
            .map(|ts| ts.iter().map(|t| t.shape().to_vec()).collect())
            .collect();
        if want != have {
            return Err(Error::config(
                "parameter shapes do not match the classifier configuration",
            ));
        }
        if !params.is_finite() {
            return Err(Error::config("parameters contain non-finite values"));
        }
        Ok(MilModel {
            classifier,
            params,
            pooling,
        })
    }

    /// Fresh model with randomly initialized weights.
    pub fn initialized(classifier: InstanceClassifierConfig, pooling: PoolingConfig, key: StreamKey) -> Result<Self> {
        let params = ModelParams::init(&classifier, key);
        MilModel::new(classifier, params, pooling)
    }

    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        if patch.shape() != self.classifier.input_shape {
            return Err(Error::Shape {
                layer: 0,
                expected: self.classifier.input_shape.to_vec(),
                actual: patch.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn forward(&self, patch: &Tensor, mode: Mode, rng: &mut Prng, keep: bool) -> Result<(f64, Vec<LayerCache>)> {
        self.check_patch(patch)?;
        let mut x = patch.clone();
        let mut caches = Vec::with_capacity(if keep { self.classifier.layers.len() } else { 0 });
        for (i, (spec, params)) in self.classifier.layers.iter().zip(&self.params.layers).enumerate() {
            let (y, cache) = layer_forward(spec, params, &x, mode, rng).map_err(|e| match e {
                Error::Shape { expected, actual, .. } => Error::Shape {
                    layer: i,
                    expected,
                    actual,
                },
                other => other,
            })?;
            if keep {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x.data()[0], caches))
    }

    fn backward(&self, caches: &[LayerCache], dz: f64, grads: &mut ModelParams) -> Result<()> {
        let mut g = Tensor::full(&[1], dz);
        for i in (0..self.classifier.layers.len()).rev() {
            let (dx, dp) = layer_backward(&self.classifier.layers[i], &self.params.layers[i], &caches[i], &g)?;
            for (acc, d) in grads.layers[i].iter_mut().zip(&dp) {
                acc.add_scaled(1.0, d);
            }
            g = dx;
        }
        Ok(())
    }

    /// Score `z` in `[0, 1]` of one patch tensor. Dropout draws from `rng` in train mode.
    pub fn instance_score(&self, patch: &Tensor, mode: Mode, rng: &mut Prng) -> Result<f64> {
        Ok(self.forward(patch, mode, rng, false)?.0)
    }

    /// Distance of this patch's forward pass from the nearest relu or maxpool
    /// kink; finite-difference checks are only meaningful when it is not tiny.
    pub fn kink_margin(&self, patch: &Tensor, mode: Mode, rng: &mut Prng) -> Result<f64> {
        let (_, caches) = self.forward(patch, mode, rng, true)?;
        Ok(caches.iter().map(LayerCache::kink_margin).fold(f64::INFINITY, f64::min))
    }

    /// Pools instance scores of pre-converted patch tensors. Patch `k` draws
    /// dropout from `key.child(k)`.
    pub fn bag_probability_tensors(
        &self,
        patches: &[Tensor],
        mode: Mode,
        key: StreamKey,
    ) -> Result<(f64, ScoreVector)> {
        if patches.is_empty() {
            return Err(Error::domain("bag has no patches"));
        }
        let scores = patches
            .iter()
            .enumerate()
            .map(|(k, p)| self.instance_score(p, mode, &mut key.child(k as u64).rng()))
            .collect::<Result<Vec<f64>>>()?;
        let scores = ScoreVector::new(scores)?;
        Ok((pool(&self.pooling, &scores)?, scores))
    }

    pub fn bag_probability(&self, bag: &Bag, mode: Mode, key: StreamKey) -> Result<BagPrediction> {
        let tensors: Vec<Tensor> = bag.patches.iter().map(|p| p.to_tensor()).collect();
        let (theta, instance_scores) = self.bag_probability_tensors(&tensors, mode, key)?;
        Ok(BagPrediction {
            theta,
            instance_scores,
            coords: bag.patches.iter().map(|p| (p.row, p.col)).collect(),
        })
    }

    /// Bag loss and its gradient with respect to every parameter, accumulated
    /// over the K shared forward passes (train mode).
    pub fn bag_gradient_tensors(&self, patches: &[Tensor], y: u8, key: StreamKey) -> Result<(f64, ModelParams)> {
        if patches.is_empty() {
            return Err(Error::domain("bag has no patches"));
        }
        nll_loss(0.5, y, self.pooling.epsilon)?;
        let keep = patches.len() * self.cache_bytes() <= CACHE_BUDGET_BYTES;
        let mut scores = Vec::with_capacity(patches.len());
        let mut caches = Vec::new();
        for (k, p) in patches.iter().enumerate() {
            let (z, c) = self.forward(p, Mode::Train, &mut key.child(k as u64).rng(), keep)?;
            scores.push(z);
            if keep {
                caches.push(c);
            }
        }
        let scores = ScoreVector::new(scores)?;
        let theta = pool(&self.pooling, &scores)?;
        let loss = nll_loss(theta, y, self.pooling.epsilon)?;
        let dtheta = nll_grad(theta, y, self.pooling.epsilon)?;
        let dz = pool_grad(&self.pooling, &scores, dtheta)?;

        let mut grads = ModelParams::zeros(&self.classifier);
        for (k, p) in patches.iter().enumerate() {
            if keep {
                self.backward(&caches[k], dz[k], &mut grads)?;
            } else {
                // same stream, so the recomputed pass reproduces the dropout mask
                let (_, c) = self.forward(p, Mode::Train, &mut key.child(k as u64).rng(), true)?;
                self.backward(&c, dz[k], &mut grads)?;
            }
        }
        Ok((loss, grads))
    }

    pub fn bag_gradient(&self, bag: &Bag, key: StreamKey) -> Result<(f64, ModelParams)> {
        let tensors: Vec<Tensor> = bag.patches.iter().map(|p| p.to_tensor()).collect();
        self.bag_gradient_tensors(&tensors, bag.label, key)
    }

    /// Rough size of one instance's forward caches.
    fn cache_bytes(&self) -> usize {
        let mut shape = self.classifier.input_shape.to_vec();
        let mut total = 0;
        for l in &self.classifier.layers {
            total += match *l {
                LayerSpec::Conv2d { kernel, .. } => {
                    let out = l.output_shape(&shape).unwrap_or_default();
                    shape[0] * kernel * kernel * out.iter().skip(1).product::<usize>()
                }
                _ => shape.iter().product(),
            };
            shape = l.output_shape(&shape).unwrap_or_default();
        }
        total * std::mem::size_of::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Patch, Provenance, RgbBuffer};
    use crate::numerics::{finite_difference_gradient, max_relative_error};
    use crate::pooling::PoolKind;

    fn tiny_config() -> InstanceClassifierConfig {
        InstanceClassifierConfig {
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Affine { inputs: 8, outputs: 4 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::Affine { inputs: 4, outputs: 1 },
                LayerSpec::Sigmoid,
            ],
            input_shape: [3, 6, 6],
        }
    }

    fn bag_of(patches: Vec<RgbBuffer>, label: u8) -> Bag {
        Bag {
            id: 0,
            label,
            patches: patches
                .into_iter()
                .enumerate()
                .map(|(col, pixels)| Patch { pixels, row: 0, col })
                .collect(),
            provenance: Provenance {
                source: "mem".into(),
                patient_id: "p".into(),
                offset: (0, 0),
            },
        }
    }

    fn noise_patch(size: usize, seed: u64) -> RgbBuffer {
        let mut rng = StreamKey::new(seed).rng();
        RgbBuffer::new(size, size, (0..size * size * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn default_architecture_shapes() {
        let c = InstanceClassifierConfig::default_for_patch(96).unwrap();
        assert_eq!(
            c.layers[9],
            LayerSpec::Affine {
                inputs: 3200,
                outputs: 128
            }
        );
        let c = InstanceClassifierConfig::default_for_patch(24).unwrap();
        assert_eq!(
            c.layers[9],
            LayerSpec::Affine {
                inputs: 32,
                outputs: 128
            }
        );
        assert!(InstanceClassifierConfig::default_for_patch(16).is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let c = InstanceClassifierConfig::default_for_patch(96).unwrap();
        let kv = c.to_kv();
        assert_eq!(InstanceClassifierConfig::from_kv(&kv[0].1, &kv[1].1).unwrap(), c);
    }

    #[test]
    fn rejects_classifier_without_sigmoid_head() {
        let mut c = tiny_config();
        c.layers.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.input_shape = [3, 9, 6];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_model_scores_half() {
        let c = tiny_config();
        let m = MilModel::new(c.clone(), ModelParams::zeros(&c), PoolingConfig::new(PoolKind::NoisyOr)).unwrap();
        let p = noise_patch(6, 1).to_tensor();
        assert_eq!(
            m.instance_score(&p, Mode::Eval, &mut StreamKey::new(0).rng()).unwrap(),
            0.5
        );
        let bag = bag_of(vec![noise_patch(6, 1), noise_patch(6, 2)], 1);
        let pred = m.bag_probability(&bag, Mode::Eval, StreamKey::new(0)).unwrap();
        assert!((pred.theta - 0.75).abs() < 1e-15);

        let max = MilModel {
            pooling: PoolingConfig::new(PoolKind::Max),
            ..m
        };
        assert_eq!(
            max.bag_probability(&bag, Mode::Eval, StreamKey::new(0)).unwrap().theta,
            0.5
        );
    }

    #[test]
    fn eval_is_deterministic_and_shape_checked() {
        let m = MilModel::initialized(tiny_config(), PoolingConfig::default(), StreamKey::new(4)).unwrap();
        let p = noise_patch(6, 9).to_tensor();
        let a = m.instance_score(&p, Mode::Eval, &mut StreamKey::new(1).rng()).unwrap();
        let b = m.instance_score(&p, Mode::Eval, &mut StreamKey::new(2).rng()).unwrap();
        assert_eq!(a, b);
        let wrong = noise_patch(5, 9).to_tensor();
        assert!(matches!(
            m.instance_score(&wrong, Mode::Eval, &mut StreamKey::new(1).rng()),
            Err(Error::Shape { .. })
        ));
    }

    /// Hand-unrolled forward pass of a conv(2x2) -> relu -> affine -> sigmoid
    /// network on a 4x4 patch, written without the layer machinery.
    #[test]
    fn forward_matches_unrolled_reference() {
        let config = InstanceClassifierConfig {
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Affine { inputs: 18, outputs: 1 },
                LayerSpec::Sigmoid,
            ],
            input_shape: [3, 4, 4],
        };
        let m = MilModel::initialized(config, PoolingConfig::default(), StreamKey::new(8)).unwrap();
        let patch = noise_patch(4, 5);
        let w = m.params.layers[0][0].data();
        let b = m.params.layers[0][1].data();
        let v = m.params.layers[2][0].data();
        let c = m.params.layers[2][1].data()[0];
        let px = |ch: usize, y: usize, x: usize| f64::from(patch.pixel(x, y)[ch]) / 255.0;
        let mut acc = c;
        for o in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let mut s = b[o];
                    for ch in 0..3 {
                        for i in 0..2 {
                            for j in 0..2 {
                                s += w[((o * 3 + ch) * 2 + i) * 2 + j] * px(ch, y + i, x + j);
                            }
                        }
                    }
                    acc += v[(o * 3 + y) * 3 + x] * s.max(0.0);
                }
            }
        }
        let want = 1.0 / (1.0 + (-acc).exp());
        let got = m
            .instance_score(&patch.to_tensor(), Mode::Eval, &mut StreamKey::new(0).rng())
            .unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn nll_values() {
        assert!((nll_loss(0.5, 1, 1e-7).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((nll_loss(0.75, 0, 1e-7).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);
        let l = nll_loss(1.0 - 1e-7, 1, 1e-7).unwrap();
        assert!((l - 1e-7).abs() < 1e-12);
        assert!(nll_loss(1.0, 0, 1e-7).unwrap().is_finite());
        assert!(matches!(nll_loss(0.5, 2, 1e-7), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_positive_unless_clamped_match() {
        for y in [0u8, 1] {
            for t in [0.0, 0.1, 0.5, 0.9, 1.0] {
                let l = nll_loss(t, y, 1e-7).unwrap();
                assert!(l > 0.0);
            }
        }
    }

    #[test]
    fn affine_bag_gradient_matches_finite_differences() {
        // one affine + sigmoid over 2-pixel patches, K = 2
        let config = InstanceClassifierConfig {
            layers: vec![LayerSpec::Affine { inputs: 6, outputs: 1 }, LayerSpec::Sigmoid],
            input_shape: [3, 1, 2],
        };
        for kind in PoolKind::ALL {
            let m = MilModel::initialized(config.clone(), PoolingConfig::new(kind), StreamKey::new(3)).unwrap();
            let patches = vec![noise_patch2(1), noise_patch2(2)];
            for y in [0, 1] {
                let (_, grads) = m.bag_gradient_tensors(&patches, y, StreamKey::new(0)).unwrap();
                let numeric = finite_difference_gradient(
                    |flat| {
                        let mut mm = m.clone();
                        mm.params.set_flat(flat.data());
                        let (theta, _) = mm
                            .bag_probability_tensors(&patches, Mode::Train, StreamKey::new(0))
                            .unwrap();
                        nll_loss(theta, y, mm.pooling.epsilon).unwrap()
                    },
                    &Tensor::from_vec(m.params.to_flat()),
                    1e-5,
                )
                .unwrap();
                assert!(
                    max_relative_error(&grads.to_flat(), numeric.data()) < 1e-4,
                    "{kind} y={y}"
                );
            }
        }
    }

    fn noise_patch2(seed: u64) -> Tensor {
        let mut rng = StreamKey::new(seed).rng();
        Tensor::new(vec![3, 1, 2], (0..6).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn saturated_noisy_or_gradient_is_finite() {
        let config = InstanceClassifierConfig {
            layers: vec![LayerSpec::Affine { inputs: 6, outputs: 1 }, LayerSpec::Sigmoid],
            input_shape: [3, 1, 2],
        };
        let mut params = ModelParams::zeros(&config);
        params.layers[0][1].data_mut()[0] = 60.0;
        let m = MilModel::new(config, params, PoolingConfig::default()).unwrap();
        let (loss, grads) = m
            .bag_gradient_tensors(&[noise_patch2(1), noise_patch2(2)], 1, StreamKey::new(0))
            .unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(grads.is_finite());
    }

    #[test]
    fn duplicate_patch_under_max_keeps_loss() {
        let m = MilModel::initialized(tiny_config(), PoolingConfig::new(PoolKind::Max), StreamKey::new(2)).unwrap();
        let p = noise_patch(6, 3).to_tensor();
        // eval-mode scores so dropout masks do not differ between the copies
        let (t1, _) = m
            .bag_probability_tensors(std::slice::from_ref(&p), Mode::Eval, StreamKey::new(0))
            .unwrap();
        let (t2, s2) = m
            .bag_probability_tensors(&[p.clone(), p], Mode::Eval, StreamKey::new(0))
            .unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s2.as_slice()[0], s2.as_slice()[1]);
        assert_eq!(nll_loss(t1, 1, 1e-7).unwrap(), nll_loss(t2, 1, 1e-7).unwrap());
    }

    #[test]
    fn permuted_bag_same_theta() {
        for kind in PoolKind::ALL {
            let m = MilModel::initialized(tiny_config(), PoolingConfig::new(kind), StreamKey::new(6)).unwrap();
            let patches: Vec<RgbBuffer> = (0..5).map(|s| noise_patch(6, s)).collect();
            let a = m
                .bag_probability(&bag_of(patches.clone(), 1), Mode::Eval, StreamKey::new(0))
                .unwrap();
            let mut rev = patches;
            rev.reverse();
            let b = m
                .bag_probability(&bag_of(rev, 1), Mode::Eval, StreamKey::new(0))
                .unwrap();
            assert!((a.theta - b.theta).abs() <= 1e-9);
            let again = pool(&m.pooling, &a.instance_scores).unwrap();
            assert!((again - a.theta).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_bag_is_domain_error() {
        let m = MilModel::initialized(tiny_config(), PoolingConfig::default(), StreamKey::new(0)).unwrap();
        assert!(matches!(
            m.bag_probability_tensors(&[], Mode::Eval, StreamKey::new(0)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            m.bag_gradient_tensors(&[], 1, StreamKey::new(0)),
            Err(Error::Domain(_))
        ));
    }
}
