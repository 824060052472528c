use super::{NetworkError, Parameters};
use crate::rng::RngStream;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// U-Net shape. Level `l` of the encoder has `base_channels · 2^l` channels
/// and the bottleneck `base_channels · 2^depth`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            depth: 3,
            base_channels: 16,
            kernel_size: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.depth == 0 || self.depth > 12 {
            return bad("depth must be in 1..=12");
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        if self.base_channels.checked_shl(self.depth as u32).is_none() {
            return bad("channel count overflows");
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Closed-form number of scalars in the network.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let conv = |cin: usize, cout: usize| cout * cin * k2 + cout;
        let mut total = 0;
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            let c = self.channels(l);
            total += conv(cin, c) + conv(c, c);
            total += conv(self.channels(l + 1) + c, c) + conv(c, c);
        }
        let cb = self.channels(self.depth);
        total += conv(self.channels(self.depth - 1), cb) + conv(cb, cb);
        total + self.out_channels * self.channels(0) + self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ConvLayer {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

/// Encoder–decoder with skip connections: per level two 3×3 conv + ReLU
/// then 2×2 max pooling; a two-conv bottleneck; per level nearest
/// upsampling, concatenation with the skip and two conv + ReLU; a final
/// 1×1 conv with identity activation.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    layers: Vec<ConvLayer>,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let k = config.kernel_size;
        let mut layers = Vec::new();
        let mut push = |name: String, in_ch, out_ch, kernel| {
            layers.push(ConvLayer {
                name,
                in_ch,
                out_ch,
                kernel,
            })
        };
        for l in 0..config.depth {
            let cin = if l == 0 { config.in_channels } else { config.channels(l - 1) };
            let c = config.channels(l);
            push(format!("enc{l}.conv1"), cin, c, k);
            push(format!("enc{l}.conv2"), c, c, k);
        }
        let cb = config.channels(config.depth);
        push("bottleneck.conv1".into(), config.channels(config.depth - 1), cb, k);
        push("bottleneck.conv2".into(), cb, cb, k);
        for l in (0..config.depth).rev() {
            let c = config.channels(l);
            push(format!("dec{l}.conv1"), config.channels(l + 1) + c, c, k);
            push(format!("dec{l}.conv2"), c, c, k);
        }
        push("head".into(), config.channels(0), config.out_channels, 1);
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Names and shapes of all parameter tensors, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), vec![l.out_ch, l.in_ch, l.kernel, l.kernel]),
                    (format!("{}.bias", l.name), vec![l.out_ch]),
                ]
            })
            .collect()
    }

    /// He (fan-in) normal weights, zero biases.
    pub fn init_params(&self, rng: &mut RngStream) -> Parameters<f32> {
        let named = self
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    Tensor::from_fn(&shape, |_| (std * rng.standard_normal()) as f32)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Parameters::new(named).expect("layer names are unique")
    }

    /// Checks that `params` has this network's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &Parameters<T>) -> Result<(), NetworkError> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(NetworkError::ParamCount {
                expected: shapes.len(),
                found: params.len(),
            });
        }
        for ((name, shape), p) in shapes.iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(NetworkError::ParamShape {
                    name: p.name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Records the forward pass. `params` are the variables returned by
    /// [`Parameters::register`].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var, NetworkError> {
        if params.len() != 2 * self.layers.len() {
            return Err(NetworkError::ParamCount {
                expected: 2 * self.layers.len(),
                found: params.len(),
            });
        }
        let [_, c, h, w] = g.value(input).dims4("unet")?;
        if c != self.config.in_channels {
            return Err(NetworkError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "unet",
                dim: "input channels",
                expected: self.config.in_channels,
                found: c,
            }));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(NetworkError::Indivisible {
                height: h,
                width: w,
                multiple: m,
            });
        }

        let mut layer = 0;
        let pad = self.config.kernel_size / 2;
        let mut conv_relu = |g: &mut Graph<T>, x: Var| -> Result<Var, NetworkError> {
            let y = g.conv2d(x, params[2 * layer], params[2 * layer + 1], 1, pad)?;
            layer += 1;
            Ok(g.relu(y))
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv_relu(g, x)?;
            x = conv_relu(g, x)?;
            skips.push(x);
            x = g.maxpool2(x)?;
        }
        x = conv_relu(g, x)?;
        x = conv_relu(g, x)?;
        while let Some(skip) = skips.pop() {
            let up = g.upsample_nearest2(x)?;
            x = g.concat_channels(up, skip)?;
            x = conv_relu(g, x)?;
            x = conv_relu(g, x)?;
        }
        let head = self.layers.len() - 1;
        Ok(g.conv2d(x, params[2 * head], params[2 * head + 1], 1, 0)?)
    }
}

/// Builds the architecture and draws initial parameters.
pub fn build_unet(config: UNetConfig, rng: &mut RngStream) -> Result<(UNet, Parameters<f32>), NetworkError> {
    let net = UNet::new(config)?;
    let params = net.init_params(rng);
    Ok((net, params))
}

/// Architecture plus frozen parameters, ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    unet: UNet,
    params: Parameters<f32>,
}

impl Network {
    pub fn new(unet: UNet, params: Parameters<f32>) -> Result<Self, NetworkError> {
        unet.check_params(&params)?;
        Ok(Self { unet, params })
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn config(&self) -> &UNetConfig {
        self.unet.config()
    }

    pub fn params(&self) -> &Parameters<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<f32> {
        &mut self.params
    }

    /// Gradient-free forward pass on an `(N, C, H, W)` batch.
    pub fn forward_tensor(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, NetworkError> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.unet.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}
