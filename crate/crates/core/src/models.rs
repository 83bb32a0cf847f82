//! The four network assemblies and their prediction entry points.

use crate::datasets::{assemble_apn_input, PADDING_ROWS, SMC_PILLARS};
use crate::error::{Error, Result};
use crate::forward::{ChannelSpec, PillarSequence, NUM_CLASSES};
use crate::nn::{argmax_1based, Activation, Checkpoint, LayerSpec, Loss, Network, Tensor, TrainMeta};
use crate::scalar::{lit, Scalar};
use crate::shape::FlowShape;

pub const APN_TAG: &str = "APN";
pub const APNC_TAG: &str = "APN-C";
pub const ITN_TAG: &str = "ITN";
pub const SMC_TAG: &str = "SMC10";

pub const HIDDEN_UNITS: usize = 500;
pub const DEFAULT_BRIDGE_THRESHOLD: f64 = 0.5;

/// Conv(40,5x5) tanh pool Conv(100,3x3) tanh pool flatten.
pub fn conv_trunk() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2dValid {
            kernels: 40,
            kh: 5,
            kw: 5,
        },
        LayerSpec::Activation(Activation::Tanh),
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2dValid {
            kernels: 100,
            kh: 3,
            kw: 3,
        },
        LayerSpec::Activation(Activation::Tanh),
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
    ]
}

fn classifier_head(outputs: usize, groups: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { units: HIDDEN_UNITS },
        LayerSpec::Activation(Activation::Tanh),
        LayerSpec::Dense { units: outputs },
        LayerSpec::Softmax { groups },
    ]
}

pub fn apn_specs() -> Vec<LayerSpec> {
    let mut s = conv_trunk();
    s.extend(classifier_head(NUM_CLASSES, 1));
    s
}

pub fn apnc_specs() -> Vec<LayerSpec> {
    let mut s = vec![LayerSpec::ConcatTowers(vec![conv_trunk(), conv_trunk()])];
    s.extend(classifier_head(NUM_CLASSES, 1));
    s
}

pub fn itn_specs(pixels: usize) -> Vec<LayerSpec> {
    let sig = || LayerSpec::Activation(Activation::Sigmoid);
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: HIDDEN_UNITS },
        sig(),
        LayerSpec::Dense { units: HIDDEN_UNITS },
        sig(),
        LayerSpec::Dense { units: HIDDEN_UNITS },
        sig(),
        LayerSpec::Dense { units: pixels },
        sig(),
    ]
}

pub fn smc_specs(pillars: usize) -> Vec<LayerSpec> {
    let mut s = conv_trunk();
    s.extend(classifier_head(NUM_CLASSES * pillars, pillars));
    s
}

fn shape_to_tensor<T: Scalar>(shapes: &[&FlowShape], sample_shape: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(sample_shape.iter().product());
    for s in shapes {
        data.extend(s.pixels().iter().map(|&p| if p != 0 { T::one() } else { T::zero() }));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(sample_shape);
    Tensor::new(shape, data)
}

fn check_input_dims(shape: &FlowShape, channel: (usize, usize)) -> Result<()> {
    if shape.dims() != channel {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} shape", channel.0, channel.1),
            actual: format!("{}x{}", shape.height(), shape.width()),
        });
    }
    Ok(())
}

fn check_tag<T: Scalar>(net: &Network<T>, tag: &str, specs: &[LayerSpec]) -> Result<()> {
    if net.tag() != tag {
        return Err(Error::Architecture {
            expected: tag.to_string(),
            found: net.tag().to_string(),
        });
    }
    if net.layer_specs() != specs {
        return Err(Error::Architecture {
            expected: format!("{tag} layer stack"),
            found: "a different layer stack".to_string(),
        });
    }
    Ok(())
}

fn channel_of(input_shape: &[usize], juxtaposed: bool) -> (usize, usize) {
    let (h, w) = (input_shape[input_shape.len() - 2], input_shape[input_shape.len() - 1]);
    if juxtaposed {
        ((h - PADDING_ROWS) / 2, w)
    } else {
        (h, w)
    }
}

/// Predicts the pillar that deforms a current shape into a next shape.
pub trait PillarClassifier<T> {
    /// `(index, posterior)`; index is the 1-based argmax, lowest on ties.
    fn predict_pillar(&self, current: &FlowShape, target: &FlowShape) -> Result<(usize, Vec<T>)>;
}

macro_rules! model_common {
    ($name:ident, $tag:expr) => {
        impl<T: Scalar> $name<T> {
            pub fn network(&self) -> &Network<T> {
                &self.net
            }

            pub fn network_mut(&mut self) -> &mut Network<T> {
                &mut self.net
            }

            pub fn into_network(self) -> Network<T> {
                self.net
            }

            pub fn checkpoint(&self, meta: TrainMeta) -> Checkpoint<T> {
                Checkpoint::new(self.net.clone(), meta)
            }

            pub const TAG: &'static str = $tag;
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApnModel<T> {
    net: Network<T>,
    channel: (usize, usize),
}

model_common!(ApnModel, APN_TAG);

impl<T: Scalar> ApnModel<T> {
    fn input_shape(channel: &ChannelSpec) -> Vec<usize> {
        vec![1, 2 * channel.height + PADDING_ROWS, channel.width]
    }

    pub fn new(channel: &ChannelSpec, seed: u64) -> Result<Self> {
        let net = Network::new(APN_TAG, &Self::input_shape(channel), &apn_specs(), Loss::Nll, seed)?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
        })
    }

    pub fn zeroed(channel: &ChannelSpec) -> Result<Self> {
        let net = Network::zeroed(APN_TAG, &Self::input_shape(channel), &apn_specs(), Loss::Nll)?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
        })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        check_tag(&net, APN_TAG, &apn_specs())?;
        let channel = channel_of(net.input_shape(), true);
        Ok(Self { net, channel })
    }
}

impl<T: Scalar> PillarClassifier<T> for ApnModel<T> {
    fn predict_pillar(&self, current: &FlowShape, target: &FlowShape) -> Result<(usize, Vec<T>)> {
        check_input_dims(current, self.channel)?;
        check_input_dims(target, self.channel)?;
        let joined = assemble_apn_input(current, target)?;
        let x = shape_to_tensor(&[&joined], self.net.input_shape())?;
        let post = self.net.forward(&x)?.into_data();
        Ok((argmax_1based(&post), post))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApnCModel<T> {
    net: Network<T>,
    channel: (usize, usize),
}

model_common!(ApnCModel, APNC_TAG);

impl<T: Scalar> ApnCModel<T> {
    fn input_shape(channel: &ChannelSpec) -> Vec<usize> {
        vec![2, channel.height, channel.width]
    }

    pub fn new(channel: &ChannelSpec, seed: u64) -> Result<Self> {
        let net = Network::new(APNC_TAG, &Self::input_shape(channel), &apnc_specs(), Loss::Nll, seed)?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
        })
    }

    pub fn zeroed(channel: &ChannelSpec) -> Result<Self> {
        let net = Network::zeroed(APNC_TAG, &Self::input_shape(channel), &apnc_specs(), Loss::Nll)?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
        })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        check_tag(&net, APNC_TAG, &apnc_specs())?;
        let channel = channel_of(net.input_shape(), false);
        Ok(Self { net, channel })
    }

    /// Exchanges the parameters of the two towers.
    pub fn swap_towers(&mut self) {
        let mut params = self.net.params_mut();
        // each tower owns two conv layers with a weight and a bias each
        let (first, second) = params.split_at_mut(4);
        for (a, b) in first.iter_mut().zip(second.iter_mut()) {
            std::mem::swap(&mut **a, &mut **b);
        }
    }
}

impl<T: Scalar> PillarClassifier<T> for ApnCModel<T> {
    fn predict_pillar(&self, current: &FlowShape, target: &FlowShape) -> Result<(usize, Vec<T>)> {
        check_input_dims(current, self.channel)?;
        check_input_dims(target, self.channel)?;
        let x = shape_to_tensor(&[current, target], self.net.input_shape())?;
        let post = self.net.forward(&x)?.into_data();
        Ok((argmax_1based(&post), post))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItnModel<T> {
    net: Network<T>,
    channel: (usize, usize),
    threshold: T,
}

model_common!(ItnModel, ITN_TAG);

impl<T: Scalar> ItnModel<T> {
    pub fn new(channel: &ChannelSpec, seed: u64) -> Result<Self> {
        let net = Network::new(
            ITN_TAG,
            &[channel.height, channel.width],
            &itn_specs(channel.pixel_count()),
            Loss::Mse,
            seed,
        )?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
            threshold: lit(DEFAULT_BRIDGE_THRESHOLD),
        })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        let channel = channel_of(net.input_shape(), false);
        check_tag(&net, ITN_TAG, &itn_specs(channel.0 * channel.1))?;
        Ok(Self {
            net,
            channel,
            threshold: lit(DEFAULT_BRIDGE_THRESHOLD),
        })
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: T) -> Self {
        self.threshold = threshold;
        self
    }

    /// Raw sigmoid outputs for `target`, row-major.
    pub fn bridge_probabilities(&self, target: &FlowShape) -> Result<Vec<T>> {
        check_input_dims(target, self.channel)?;
        let x = shape_to_tensor(&[target], self.net.input_shape())?;
        Ok(self.net.forward(&x)?.into_data())
    }

    /// Bridging-shape estimate: outputs strictly above the threshold are fluid.
    pub fn predict_bridge(&self, target: &FlowShape) -> Result<FlowShape> {
        let p = self.bridge_probabilities(target)?;
        let pixels = p.iter().map(|v| (*v > self.threshold) as u8).collect();
        FlowShape::from_pixels(self.channel.0, self.channel.1, pixels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmcModel<T> {
    net: Network<T>,
    channel: (usize, usize),
    pillars: usize,
}

model_common!(SmcModel, SMC_TAG);

impl<T: Scalar> SmcModel<T> {
    pub fn new(channel: &ChannelSpec, seed: u64) -> Result<Self> {
        let net = Network::new(
            SMC_TAG,
            &[1, channel.height, channel.width],
            &smc_specs(SMC_PILLARS),
            Loss::SummedNll(SMC_PILLARS),
            seed,
        )?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
            pillars: SMC_PILLARS,
        })
    }

    pub fn zeroed(channel: &ChannelSpec) -> Result<Self> {
        let net = Network::zeroed(
            SMC_TAG,
            &[1, channel.height, channel.width],
            &smc_specs(SMC_PILLARS),
            Loss::SummedNll(SMC_PILLARS),
        )?;
        Ok(Self {
            net,
            channel: (channel.height, channel.width),
            pillars: SMC_PILLARS,
        })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        check_tag(&net, SMC_TAG, &smc_specs(SMC_PILLARS))?;
        let channel = channel_of(net.input_shape(), false);
        Ok(Self {
            net,
            channel,
            pillars: SMC_PILLARS,
        })
    }

    /// Per-head posteriors, heads in pillar order.
    pub fn head_posteriors(&self, target: &FlowShape) -> Result<Vec<Vec<T>>> {
        check_input_dims(target, self.channel)?;
        let x = shape_to_tensor(&[target], self.net.input_shape())?;
        let out = self.net.forward(&x)?.into_data();
        Ok(out.chunks_exact(NUM_CLASSES).map(|c| c.to_vec()).collect())
    }

    /// Always `pillars` long: the argmax of each head.
    pub fn predict_sequence(&self, target: &FlowShape) -> Result<PillarSequence> {
        let heads = self.head_posteriors(target)?;
        debug_assert_eq!(heads.len(), self.pillars);
        Ok(PillarSequence::from(
            heads.iter().map(|h| argmax_1based(h)).collect::<Vec<_>>(),
        ))
    }
}
