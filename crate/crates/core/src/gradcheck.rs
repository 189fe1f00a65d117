//! Finite-difference verification of every analytic gradient: the pooling
//! operators, each layer kind, and the end-to-end bag loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{nll_loss, InstanceClassifierConfig, MilModel, ModelParams};
use crate::numerics::{
    finite_difference_gradient, layer_backward, layer_forward, max_relative_error, LayerSpec, Mode, Prng, Purpose,
    StreamKey, Tensor,
};
use crate::pooling::{pool, pool_grad, PoolKind, PoolingConfig, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    NoisyOr,
    Isr,
    Lse,
    Conv2d,
    MaxPool2x2,
    Affine,
    Relu,
    Sigmoid,
    Dropout,
    Bag,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::NoisyOr,
        Component::Isr,
        Component::Lse,
        Component::Conv2d,
        Component::MaxPool2x2,
        Component::Affine,
        Component::Relu,
        Component::Sigmoid,
        Component::Dropout,
        Component::Bag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::NoisyOr => "nor",
            Component::Isr => "isr",
            Component::Lse => "lse",
            Component::Conv2d => "conv2d",
            Component::MaxPool2x2 => "maxpool2x2",
            Component::Affine => "affine",
            Component::Relu => "relu",
            Component::Sigmoid => "sigmoid",
            Component::Dropout => "dropout",
            Component::Bag => "bag",
        }
    }

    /// Expands a comma-separated list; `pooling` and `layers` name groups, `all` everything.
    pub fn parse_list(s: &str) -> Result<Vec<Component>> {
        let mut out: Vec<Component> = Vec::new();
        for item in s.split(',').map(str::trim) {
            let group: Vec<Component> = match item {
                "all" => Component::ALL.to_vec(),
                "pooling" => Component::ALL[..3].to_vec(),
                "layers" => Component::ALL[3..9].to_vec(),
                other => vec![other.parse()?],
            };
            for c in group {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
            Error::config(format!(
                "unknown gradcheck component {s:?} (expected one of {}, pooling, layers, all)",
                names.join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub components: Vec<Component>,
    pub points: usize,
    pub seed: u64,
    /// Sharpness used for the LSE operator and LSE bag points.
    pub r: f64,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            components: Component::ALL.to_vec(),
            points: 100,
            seed: 0,
            r: crate::pooling::DEFAULT_LSE_R,
            tolerance: 1e-4,
            step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: Component,
    pub points: usize,
    /// Candidates thrown away for lying too close to a kink or a clamp.
    pub rejected: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Distance from a relu/maxpool kink below which a point is redrawn.
const MARGIN: f64 = 1e-3;
/// Same for the distance of a bag probability from its clamp bounds.
const CLAMP_MARGIN: f64 = 1e-6;
const MAX_ATTEMPTS_PER_POINT: usize = 50;

fn normal_tensor(shape: &[usize], scale: f64, rng: &mut Prng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("consistent extents")
}

fn pooling_for(component: Component, r: f64) -> PoolingConfig {
    match component {
        Component::NoisyOr => PoolingConfig::new(PoolKind::NoisyOr),
        Component::Isr => PoolingConfig::new(PoolKind::Isr),
        _ => PoolingConfig::lse(r),
    }
}

fn near_clamp(theta: f64, epsilon: f64) -> bool {
    theta < epsilon + CLAMP_MARGIN || theta > 1.0 - epsilon - CLAMP_MARGIN
}

/// One pooling point: `Some(error)` or `None` if rejected.
fn pooling_point(config: &PoolingConfig, step: f64, rng: &mut Prng) -> Result<Option<f64>> {
    let k = rng.random_range(1..=16);
    let z: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.9)).collect();
    let scores = ScoreVector::new(z.clone())?;
    if near_clamp(pool(config, &scores)?, config.epsilon) {
        return Ok(None);
    }
    let analytic = pool_grad(config, &scores, 1.0)?;
    let numeric = finite_difference_gradient(
        |t| pool(config, &ScoreVector::new(t.data().to_vec()).expect("in range")).unwrap_or(f64::NAN),
        &Tensor::from_vec(z),
        step,
    )?;
    Ok(Some(max_relative_error(&analytic, numeric.data())))
}

fn random_layer(component: Component, rng: &mut Prng) -> (LayerSpec, Vec<usize>) {
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    match component {
        Component::Conv2d => {
            let (c, o, k) = (r(1, 3), r(1, 3), r(1, 3));
            let spec = LayerSpec::Conv2d {
                in_channels: c,
                out_channels: o,
                kernel: k,
            };
            (spec, vec![c, k + r(0, 4), k + r(0, 4)])
        }
        Component::MaxPool2x2 => (LayerSpec::MaxPool2x2, vec![r(1, 3), r(2, 7), r(2, 7)]),
        Component::Affine => {
            let (i, o) = (r(1, 8), r(1, 5));
            (LayerSpec::Affine { inputs: i, outputs: o }, vec![i])
        }
        Component::Relu => (LayerSpec::Relu, vec![r(1, 3), r(1, 5), r(1, 5)]),
        Component::Sigmoid => (LayerSpec::Sigmoid, vec![r(1, 20)]),
        Component::Dropout => (LayerSpec::Dropout { rate: 0.5 }, vec![r(1, 20)]),
        _ => unreachable!("not a layer component"),
    }
}

/// One layer point on `sum(u * layer(x))` over the input and all parameters.
fn layer_point(component: Component, step: f64, key: StreamKey) -> Result<Option<f64>> {
    let mut rng = key.rng();
    let (spec, shape) = random_layer(component, &mut rng);
    let x = normal_tensor(&shape, 1.0, &mut rng);
    let params: Vec<Tensor> = spec
        .param_shapes()
        .iter()
        .map(|s| normal_tensor(s, 0.5, &mut rng))
        .collect();
    let mask_key = key.child(1);
    let (y, cache) = layer_forward(&spec, &params, &x, Mode::Train, &mut mask_key.rng())?;
    if cache.kink_margin() < MARGIN {
        return Ok(None);
    }
    let u = normal_tensor(y.shape(), 1.0, &mut rng);
    let (dx, dparams) = layer_backward(&spec, &params, &cache, &u)?;

    let mut analytic = dx.data().to_vec();
    let mut flat = x.data().to_vec();
    for (p, d) in params.iter().zip(&dparams) {
        flat.extend_from_slice(p.data());
        analytic.extend_from_slice(d.data());
    }
    let numeric = finite_difference_gradient(
        |t| {
            let mut offset = x.len();
            let xi = Tensor::new(shape.clone(), t.data()[..offset].to_vec()).expect("same shape");
            let ps: Vec<Tensor> = params
                .iter()
                .map(|p| {
                    let q = Tensor::new(p.shape().to_vec(), t.data()[offset..offset + p.len()].to_vec());
                    offset += p.len();
                    q.expect("same shape")
                })
                .collect();
            let (out, _) = layer_forward(&spec, &ps, &xi, Mode::Train, &mut mask_key.rng()).expect("valid layer");
            out.dot(&u)
        },
        &Tensor::from_vec(flat),
        step,
    )?;
    Ok(Some(max_relative_error(&analytic, numeric.data())))
}

fn bag_classifier() -> InstanceClassifierConfig {
    InstanceClassifierConfig {
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Affine { inputs: 18, outputs: 4 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Affine { inputs: 4, outputs: 1 },
            LayerSpec::Sigmoid,
        ],
        input_shape: [3, 8, 8],
    }
}

/// One end-to-end point: gradient of the bag loss with respect to every
/// parameter of a small convolutional scorer, through the pooling operator.
fn bag_point(pooling: PoolingConfig, step: f64, key: StreamKey) -> Result<Option<f64>> {
    let mut rng = key.rng();
    let classifier = bag_classifier();
    let mut params = ModelParams::init(&classifier, key.child(1));
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            *t = normal_tensor(t.shape(), 0.1, &mut rng);
        }
    }
    let model = MilModel::new(classifier, params, pooling)?;
    let k = rng.random_range(1..=4);
    let patches: Vec<Tensor> = (0..k).map(|_| normal_tensor(&[3, 8, 8], 1.0, &mut rng)).collect();
    let y: u8 = rng.random_range(0..=1);
    let dropout = key.child(2);

    for (i, p) in patches.iter().enumerate() {
        if model.kink_margin(p, Mode::Train, &mut dropout.child(i as u64).rng())? < MARGIN {
            return Ok(None);
        }
    }
    let (theta, _) = model.bag_probability_tensors(&patches, Mode::Train, dropout)?;
    if near_clamp(theta, pooling.epsilon) {
        return Ok(None);
    }
    let (_, grads) = model.bag_gradient_tensors(&patches, y, dropout)?;
    let numeric = finite_difference_gradient(
        |t| {
            let mut m = model.clone();
            m.params.set_flat(t.data());
            let (theta, _) = m
                .bag_probability_tensors(&patches, Mode::Train, dropout)
                .expect("valid bag");
            nll_loss(theta, y, pooling.epsilon).expect("binary label")
        },
        &Tensor::from_vec(model.params.to_flat()),
        step,
    )?;
    Ok(Some(max_relative_error(&grads.to_flat(), numeric.data())))
}

fn check_component(component: Component, config: &GradcheckConfig) -> Result<ComponentReport> {
    let base = StreamKey::new(config.seed)
        .purpose(Purpose::GradCheck)
        .child(Component::ALL.iter().position(|&c| c == component).expect("listed") as u64);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut attempt = 0u64;
    let limit = (config.points * MAX_ATTEMPTS_PER_POINT) as u64;
    while accepted < config.points {
        if attempt >= limit {
            return Err(Error::Oracle(format!(
                "{component}: only {accepted} of {} points were away from kinks and clamps",
                config.points
            )));
        }
        let key = base.child(attempt);
        let result = match component {
            Component::NoisyOr | Component::Isr | Component::Lse => {
                pooling_point(&pooling_for(component, config.r), config.step, &mut key.rng())?
            }
            Component::Bag => {
                let kinds = [Component::NoisyOr, Component::Isr, Component::Lse];
                let pooling = pooling_for(kinds[accepted % 3], config.r);
                bag_point(pooling, config.step, key)?
            }
            _ => layer_point(component, config.step, key)?,
        };
        attempt += 1;
        if let Some(err) = result {
            worst = worst.max(err);
            accepted += 1;
        }
    }
    Ok(ComponentReport {
        component,
        points: accepted,
        rejected: attempt as usize - accepted,
        max_relative_error: worst,
        passed: worst <= config.tolerance,
    })
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    if config.points == 0
        || config.step.is_nan()
        || config.step <= 0.0
        || config.tolerance.is_nan()
        || config.tolerance <= 0.0
    {
        return Err(Error::config(
            "gradcheck needs points >= 1 and positive step and tolerance",
        ));
    }
    PoolingConfig::lse(config.r).validate()?;
    config.components.iter().map(|&c| check_component(c, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_component_lists() {
        assert_eq!(Component::parse_list("lse").unwrap(), vec![Component::Lse]);
        assert_eq!(Component::parse_list("pooling,nor").unwrap().len(), 3);
        assert_eq!(Component::parse_list("all").unwrap().len(), 10);
        assert_eq!(Component::parse_list("layers,bag").unwrap().len(), 7);
        assert!(Component::parse_list("softmax").is_err());
    }

    #[test]
    fn quick_suite_passes() {
        let config = GradcheckConfig {
            points: 5,
            ..GradcheckConfig::default()
        };
        for r in run_gradcheck(&config).unwrap() {
            assert!(r.passed, "{r:?}");
            assert_eq!(r.points, 5);
        }
    }

    #[test]
    fn seed_changes_points_deterministically() {
        let mk = |seed| GradcheckConfig {
            components: vec![Component::Conv2d],
            points: 3,
            seed,
            ..GradcheckConfig::default()
        };
        let a = run_gradcheck(&mk(1)).unwrap();
        assert_eq!(a, run_gradcheck(&mk(1)).unwrap());
        assert_ne!(
            a[0].max_relative_error,
            run_gradcheck(&mk(2)).unwrap()[0].max_relative_error
        );
    }
}
