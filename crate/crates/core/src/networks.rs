//! Discriminator/classifier and generator architectures.
//!
//! Both networks are declared as a flat list of [`Layer`]s and executed by a
//! single interpreter, so the declared spec and the parameter names can never
//! drift apart.

use bssgan_tensor::{BatchStats, Mode, Parameters, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

pub const NOISE_DIM: usize = 100;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DROPOUT_RATE: f64 = 0.25;
pub const BN_MOMENTUM: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "alpha")]
pub enum Activation {
    None,
    LeakyRelu(f64),
    Relu,
    Tanh,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layer")]
pub enum Layer {
    Conv { filters: usize, stride: usize, activation: Activation },
    Deconv { filters: usize, stride: usize, activation: Activation },
    BatchNorm { momentum: f64 },
    Dropout { rate: f64 },
    Flatten,
    Reshape { height: usize, width: usize, channels: usize },
    Dense { units: usize, activation: Activation },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Discriminator,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    /// Per-sample input shape (no batch axis).
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub output_dim: usize,
}

impl NetworkSpec {
    /// Table-style discriminator: three 3x3 convs (32 s2, 64 s2, 64 s1) with
    /// leaky ReLU, dropout after the first two, batch norm after the second,
    /// then flatten and a softmax dense layer of width `classes`.
    pub fn discriminator(image_size: usize, classes: usize) -> Result<Self> {
        if image_size == 0 || image_size % 4 != 0 {
            return config_err(format!("image size {image_size} must be a positive multiple of 4"));
        }
        if classes < 2 {
            return config_err(format!("discriminator needs at least 2 outputs, got {classes}"));
        }
        let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
        Ok(NetworkSpec {
            kind: NetworkKind::Discriminator,
            input_shape: vec![image_size, image_size, 3],
            layers: vec![
                Layer::Conv { filters: 32, stride: 2, activation: leaky },
                Layer::Dropout { rate: DROPOUT_RATE },
                Layer::Conv { filters: 64, stride: 2, activation: leaky },
                Layer::BatchNorm { momentum: BN_MOMENTUM },
                Layer::Dropout { rate: DROPOUT_RATE },
                Layer::Conv { filters: 64, stride: 1, activation: leaky },
                Layer::Flatten,
                Layer::Dense { units: classes, activation: Activation::Softmax },
            ],
            output_dim: classes,
        })
    }

    /// Generator: dense to a `(S/4, S/4, 128)` grid, two stride-2 deconvs
    /// (64 then 3 channels) each followed by ReLU and batch norm, then a
    /// stride-1 deconv with tanh.
    pub fn generator(noise_dim: usize, out_size: usize) -> Result<Self> {
        if out_size == 0 || out_size % 4 != 0 {
            return config_err(format!("generator output size {out_size} must be a positive multiple of 4"));
        }
        if noise_dim == 0 {
            return config_err("noise dimension must be positive");
        }
        let base = out_size / 4;
        Ok(NetworkSpec {
            kind: NetworkKind::Generator,
            input_shape: vec![noise_dim],
            layers: vec![
                Layer::Dense { units: base * base * 128, activation: Activation::Relu },
                Layer::Reshape { height: base, width: base, channels: 128 },
                Layer::Deconv { filters: 64, stride: 2, activation: Activation::Relu },
                Layer::BatchNorm { momentum: BN_MOMENTUM },
                Layer::Deconv { filters: 3, stride: 2, activation: Activation::Relu },
                Layer::BatchNorm { momentum: BN_MOMENTUM },
                Layer::Deconv { filters: 3, stride: 1, activation: Activation::Tanh },
            ],
            output_dim: 3,
        })
    }

    /// Hex SHA-256 of the serialized layer list; identifies an architecture.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Per-sample output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match *layer {
                Layer::Conv { filters, stride, .. } => {
                    vec![shape[0].div_ceil(stride), shape[1].div_ceil(stride), filters]
                }
                Layer::Deconv { filters, stride, .. } => vec![shape[0] * stride, shape[1] * stride, filters],
                Layer::BatchNorm { .. } | Layer::Dropout { .. } => shape,
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Reshape { height, width, channels } => {
                    if shape.iter().product::<usize>() != height * width * channels {
                        return config_err(format!("cannot reshape {shape:?} to {height}x{width}x{channels}"));
                    }
                    vec![height, width, channels]
                }
                Layer::Dense { units, .. } => vec![units],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Parameter names in the order they are created.
    fn named_layers(&self) -> Vec<Option<String>> {
        let (mut conv, mut deconv, mut bn, mut dense) = (0, 0, 0, 0);
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { .. } => {
                    conv += 1;
                    Some(format!("conv{conv}"))
                }
                Layer::Deconv { .. } => {
                    deconv += 1;
                    Some(format!("deconv{deconv}"))
                }
                Layer::BatchNorm { .. } => {
                    bn += 1;
                    Some(format!("bn{bn}"))
                }
                Layer::Dense { .. } => {
                    dense += 1;
                    Some(format!("dense{dense}"))
                }
                _ => None,
            })
            .collect()
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))` for a weight shape.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [i, o] => (*i, *o),
        [kh, kw, i, o] => (kh * kw * i, kh * kw * o),
        _ => panic!("no fan rule for shape {shape:?}"),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let bound = xavier_bound(shape);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Xavier-uniform weights, zero biases, unit BN scale, zero BN shift,
/// running mean 0 and running variance 1.
pub fn init_xavier<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Parameters> {
    let shapes = spec.layer_shapes()?;
    let names = spec.named_layers();
    let mut params = Parameters::new();
    let mut prev = spec.input_shape.clone();
    for ((layer, name), shape) in spec.layers.iter().zip(names).zip(shapes) {
        match (layer, name) {
            (Layer::Conv { filters, .. }, Some(n)) => {
                params.insert_trainable(format!("{n}.kernel"), xavier(&[3, 3, prev[2], *filters], rng));
                params.insert_trainable(format!("{n}.bias"), Tensor::zeros(&[*filters]));
            }
            (Layer::Deconv { filters, .. }, Some(n)) => {
                params.insert_trainable(format!("{n}.kernel"), xavier(&[3, 3, *filters, prev[2]], rng));
                params.insert_trainable(format!("{n}.bias"), Tensor::zeros(&[*filters]));
            }
            (Layer::Dense { units, .. }, Some(n)) => {
                params.insert_trainable(format!("{n}.weight"), xavier(&[prev.iter().product(), *units], rng));
                params.insert_trainable(format!("{n}.bias"), Tensor::zeros(&[*units]));
            }
            (Layer::BatchNorm { .. }, Some(n)) => {
                let c = *prev.last().expect("non-empty shape");
                params.insert_trainable(format!("{n}.gamma"), Tensor::ones(&[c]));
                params.insert_trainable(format!("{n}.beta"), Tensor::zeros(&[c]));
                params.insert_buffer(format!("{n}.running_mean"), Tensor::zeros(&[c]));
                params.insert_buffer(format!("{n}.running_var"), Tensor::ones(&[c]));
            }
            _ => {}
        }
        prev = shape;
    }
    Ok(params)
}

/// How a forward pass treats the network.
pub struct Pass<'r, R: Rng + ?Sized> {
    pub mode: Mode,
    /// Register weights as gradient-receiving parameters.
    pub trainable: bool,
    /// Stream for dropout masks; required in train mode.
    pub rng: Option<&'r mut R>,
}

impl<R: Rng + ?Sized> Pass<'_, R> {
    pub fn infer() -> Self {
        Pass { mode: Mode::Infer, trainable: false, rng: None }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Final activation output (probabilities for the discriminator, images
    /// for the generator).
    pub output: Var,
    /// Pre-activation of the last layer.
    pub logits: Var,
    /// ReLU of the flattened last conv activation (discriminator only).
    pub features: Option<Var>,
    /// Batch statistics seen by each train-mode batch norm, keyed by layer.
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// A network spec with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Parameters,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let params = init_xavier(&spec, rng)?;
        Ok(Network { spec, params })
    }

    /// Classifier/discriminator with `classes` outputs (`K` for a plain
    /// classifier, `K + 1` for the semi-supervised discriminator).
    pub fn discriminator<R: Rng + ?Sized>(image_size: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Self::new(NetworkSpec::discriminator(image_size, classes)?, rng)
    }

    pub fn generator<R: Rng + ?Sized>(noise_dim: usize, out_size: usize, rng: &mut R) -> Result<Self> {
        Self::new(NetworkSpec::generator(noise_dim, out_size)?, rng)
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<f32>, x: Var, pass: &mut Pass<'_, R>) -> Result<ForwardOutput> {
        let expected = &self.spec.input_shape;
        if &tape.shape(x)[1..] != expected.as_slice() {
            return config_err(format!("input shape {:?} does not match network input {expected:?}", tape.shape(x)));
        }
        let names = self.spec.named_layers();
        let mut h = x;
        let mut logits = x;
        let mut features = None;
        let mut bn_stats = Vec::new();
        for (layer, name) in self.spec.layers.iter().zip(names) {
            let name = name.unwrap_or_default();
            match *layer {
                Layer::Conv { stride, activation, .. } => {
                    let k = self.params.bind(tape, &format!("{name}.kernel"), pass.trainable)?;
                    let b = self.params.bind(tape, &format!("{name}.bias"), pass.trainable)?;
                    logits = tape.conv2d(h, k, b, stride)?;
                    h = activate(tape, logits, activation);
                }
                Layer::Deconv { stride, activation, .. } => {
                    let k = self.params.bind(tape, &format!("{name}.kernel"), pass.trainable)?;
                    let b = self.params.bind(tape, &format!("{name}.bias"), pass.trainable)?;
                    logits = tape.conv_transpose2d(h, k, b, stride)?;
                    h = activate(tape, logits, activation);
                }
                Layer::Dense { activation, .. } => {
                    let w = self.params.bind(tape, &format!("{name}.weight"), pass.trainable)?;
                    let b = self.params.bind(tape, &format!("{name}.bias"), pass.trainable)?;
                    logits = tape.dense(h, w, b)?;
                    h = activate(tape, logits, activation);
                }
                Layer::BatchNorm { .. } => {
                    let g = self.params.bind(tape, &format!("{name}.gamma"), pass.trainable)?;
                    let b = self.params.bind(tape, &format!("{name}.beta"), pass.trainable)?;
                    let rm = self.params.require(&format!("{name}.running_mean"))?;
                    let rv = self.params.require(&format!("{name}.running_var"))?;
                    let (out, stats) = tape.batch_norm(h, g, b, pass.mode, Some((rm.data(), rv.data())))?;
                    if let Some(stats) = stats {
                        bn_stats.push((name, stats));
                    }
                    h = out;
                }
                Layer::Dropout { rate } => {
                    h = match (pass.mode, pass.rng.as_deref_mut()) {
                        (Mode::Infer, _) => h,
                        (Mode::Train, Some(rng)) => tape.dropout(h, rate, Mode::Train, rng)?,
                        (Mode::Train, None) => return config_err("train-mode dropout needs an rng stream"),
                    };
                }
                Layer::Flatten => {
                    h = tape.flatten(h)?;
                    features = Some(tape.relu(h));
                }
                Layer::Reshape { height, width, channels } => {
                    let n = tape.shape(h)[0];
                    h = tape.reshape(h, &[n, height, width, channels])?;
                }
            }
        }
        Ok(ForwardOutput { output: h, logits, features, bn_stats })
    }

    /// Fold train-mode batch statistics into the running estimates:
    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            let momentum = self
                .spec
                .layers
                .iter()
                .zip(self.spec.named_layers())
                .find_map(|(l, n)| match (l, n) {
                    (Layer::BatchNorm { momentum }, Some(n)) if &n == name => Some(*momentum),
                    _ => None,
                })
                .unwrap_or(BN_MOMENTUM);
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{name}.{suffix}");
                let Some(running) = self.params.get_mut(&key) else {
                    return config_err(format!("missing buffer {key}"));
                };
                for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                    *r = (momentum * *r as f64 + (1.0 - momentum) * b) as f32;
                }
            }
        }
        Ok(())
    }

    /// Inference-mode output for a batch of inputs, processed in chunks.
    pub fn infer(&self, inputs: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        let n = inputs.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(inputs.slice_rows(start, len)?);
            let out = self.forward::<rand::rngs::ThreadRng>(&mut tape, x, &mut Pass::infer())?;
            parts.push(tape.value(out.output).clone());
            start += len;
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Ok(Tensor::concat_rows(&refs)?)
    }

    /// Inference-mode discriminator features `ReLU(flatten(last conv))`.
    pub fn features(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(inputs.clone());
        let out = self.forward::<rand::rngs::ThreadRng>(&mut tape, x, &mut Pass::infer())?;
        let Some(f) = out.features else {
            return config_err("network has no flatten layer to take features from");
        };
        Ok(tape.value(f).clone())
    }
}

fn activate(tape: &mut Tape<f32>, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::None => x,
        Activation::LeakyRelu(alpha) => tape.leaky_relu(x, alpha),
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Softmax => tape.softmax(x),
    }
}

/// Predicted class per row: argmax over the first `k` probabilities (the
/// synthetic column of a `K + 1` discriminator is ignored).
pub fn predict_classes(probs: &Tensor<f32>, k: usize) -> Vec<usize> {
    let width = probs.last_dim();
    probs
        .data()
        .chunks_exact(width)
        .map(|row| {
            row[..k]
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn discriminator_output_width() {
        assert_eq!(NetworkSpec::discriminator(32, 3).unwrap().output_dim, 3);
        assert_eq!(NetworkSpec::discriminator(32, 2).unwrap().output_dim, 2);
        assert!(NetworkSpec::discriminator(30, 2).is_err());
    }

    #[test]
    fn discriminator_shapes_at_full_size() {
        let shapes = NetworkSpec::discriminator(128, 3).unwrap().layer_shapes().unwrap();
        let expected: Vec<Vec<usize>> = vec![
            vec![64, 64, 32],
            vec![64, 64, 32],
            vec![32, 32, 64],
            vec![32, 32, 64],
            vec![32, 32, 64],
            vec![32, 32, 64],
            vec![65536],
            vec![3],
        ];
        assert_eq!(shapes, expected);
    }

    #[test]
    fn generator_shapes_at_full_size() {
        let spec = NetworkSpec::generator(100, 128).unwrap();
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[0], vec![131072]);
        assert_eq!(shapes[1], vec![32, 32, 128]);
        assert_eq!(shapes[2], vec![64, 64, 64]);
        assert_eq!(shapes[4], vec![128, 128, 3]);
        assert_eq!(shapes[6], vec![128, 128, 3]);
        assert!(NetworkSpec::generator(100, 30).is_err());
    }

    #[test]
    fn xavier_bound_for_first_conv() {
        let bound = xavier_bound(&[3, 3, 3, 32]);
        assert!((bound - (6.0f64 / (27.0 + 288.0)).sqrt()).abs() < 1e-15);
        let net = Network::discriminator(32, 2, &mut rng(0)).unwrap();
        let k = net.params.get("conv1.kernel").unwrap();
        assert!(k.data().iter().all(|&v| (v as f64).abs() <= bound));
    }

    #[test]
    fn biases_zero_and_bn_identity() {
        let net = Network::generator(NOISE_DIM, 16, &mut rng(1)).unwrap();
        for (name, entry) in net.params.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("running_mean") {
                assert!(entry.tensor.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") || name.ends_with("running_var") {
                assert!(entry.tensor.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn seeds_change_parameters() {
        let a = Network::discriminator(16, 2, &mut rng(1)).unwrap();
        let b = Network::discriminator(16, 2, &mut rng(2)).unwrap();
        let c = Network::discriminator(16, 2, &mut rng(1)).unwrap();
        assert_ne!(a.params.flat_values(), b.params.flat_values());
        assert_eq!(a.params, c.params);
    }

    #[test]
    fn parameter_names_are_exact() {
        let net = Network::discriminator(16, 3, &mut rng(0)).unwrap();
        let names: Vec<&str> = net.params.names().collect();
        assert_eq!(
            names,
            vec![
                "conv1.kernel",
                "conv1.bias",
                "conv2.kernel",
                "conv2.bias",
                "bn1.gamma",
                "bn1.beta",
                "bn1.running_mean",
                "bn1.running_var",
                "conv3.kernel",
                "conv3.bias",
                "dense1.weight",
                "dense1.bias"
            ]
        );
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = NetworkSpec::discriminator(32, 2).unwrap().fingerprint();
        let b = NetworkSpec::discriminator(32, 3).unwrap().fingerprint();
        assert_ne!(a, b);
        assert_eq!(a, NetworkSpec::discriminator(32, 2).unwrap().fingerprint());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut net = Network::generator(NOISE_DIM, 8, &mut rng(0)).unwrap();
        let c = net.params.get("bn1.running_mean").unwrap().len();
        let m1 = vec![1.0; c];
        let m2 = vec![3.0; c];
        let stats = |m: &Vec<f64>| vec![("bn1".to_string(), BatchStats { mean: m.clone(), var: vec![1.0; c] })];
        net.update_running_stats(&stats(&m1)).unwrap();
        net.update_running_stats(&stats(&m2)).unwrap();
        let expected = 0.8 * (0.8 * 0.0 + 0.2 * 1.0) + 0.2 * 3.0;
        let got = net.params.get("bn1.running_mean").unwrap().data()[0] as f64;
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn predict_ignores_synthetic_column() {
        let probs = Tensor::new(&[2, 3], vec![0.1, 0.2, 0.7, 0.5, 0.3, 0.2]).unwrap();
        assert_eq!(predict_classes(&probs, 2), vec![1, 0]);
    }
}
