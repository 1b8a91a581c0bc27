//! Parameterized building blocks: convolutions, feature attention, the
//! merge-and-run unit and the two residual block flavours.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// One forward pass: a graph, the parameters bound onto it, and options that
/// alter or record the attention gates.
pub struct Session<'g, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    params: Vec<Var>,
    unit_gates: bool,
    gates: Vec<Var>,
}

impl<'g, T: Scalar> Session<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, store: &ParamStore<T>, requires_grad: bool) -> Self {
        let params = store.bind(graph, requires_grad);
        Self {
            graph,
            params,
            unit_gates: false,
            gates: Vec::new(),
        }
    }

    /// Uses existing graph nodes as the parameters, indexed like the store.
    pub fn with_params(graph: &'g mut Graph<T>, params: Vec<Var>) -> Self {
        Self {
            graph,
            params,
            unit_gates: false,
            gates: Vec::new(),
        }
    }

    /// Replace every attention gate by 1 when rescaling features. The learned
    /// gates are still computed and recorded.
    pub fn with_unit_gates(mut self, on: bool) -> Self {
        self.unit_gates = on;
        self
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    /// Bound parameter leaves, indexed like the store.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Gate tensors (`N×C×1×1`) produced so far, in evaluation order.
    pub fn gates(&self) -> &[Var] {
        &self.gates
    }
}

/// Learnable weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || dilation == 0 || in_ch == 0 || out_ch == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: bad conv geometry in={in_ch} out={out_ch} k={kernel} d={dilation}"
            )));
        }
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            dilation,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.graph.conv2d(x, w, Some(b), self.dilation)
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// Channel gating: global average pool, 1×1 reduction to `c / reduction`,
/// soft-shrink, 1×1 expansion back to `c`, sigmoid, then per-channel rescale
/// of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAttention {
    pub down: ConvParams,
    pub up: ConvParams,
    pub lambda: f64,
    pub reduction: usize,
}

impl FeatureAttention {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        lambda: f64,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible by attention reduction {reduction}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "soft-shrink threshold {lambda}"
            )));
        }
        let squeezed = channels / reduction;
        Ok(Self {
            down: ConvParams::register(store, &format!("{name}.down"), channels, squeezed, 1, 1)?,
            up: ConvParams::register(store, &format!("{name}.up"), squeezed, channels, 1, 1)?,
            lambda,
            reduction,
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.down.out_ch
    }

    /// Returns `(rescaled features, gate)`.
    pub fn forward_with_gate<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        features: Var,
    ) -> Result<(Var, Var)> {
        let (_, c, _, _) = s.graph.value(features).dims4()?;
        if c != self.down.in_ch {
            return Err(Error::ChannelMismatch {
                expected: self.down.in_ch,
                actual: c,
            });
        }
        let pooled = s.graph.global_avg_pool(features)?;
        let reduced = self.down.forward(s, pooled)?;
        let shrunk = s.graph.soft_shrink(reduced, T::from_f64(self.lambda))?;
        let expanded = self.up.forward(s, shrunk)?;
        let gate = s.graph.sigmoid(expanded);
        s.gates.push(gate);
        let applied = if s.unit_gates {
            let shape = s.graph.shape(gate).to_vec();
            s.graph.constant(Tensor::ones(&shape))
        } else {
            gate
        };
        let out = s.graph.mul_broadcast(features, applied)?;
        Ok((out, gate))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, features: Var) -> Result<Var> {
        self.forward_with_gate(s, features).map(|(out, _)| out)
    }
}

/// Two parallel branches of two dilated 3×3 convolutions each, concatenated
/// and fused back to `c` channels by a 3×3 convolution. ReLU follows every
/// convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeAndRun {
    pub branch_a: [ConvParams; 2],
    pub branch_b: [ConvParams; 2],
    pub merge: ConvParams,
}

impl MergeAndRun {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        dilations: [usize; 4],
    ) -> Result<Self> {
        let c = channels;
        let conv = |store: &mut ParamStore<T>, n: &str, d| {
            ConvParams::register(store, &format!("{name}.{n}"), c, c, 3, d)
        };
        let a1 = conv(store, "a1", dilations[0])?;
        let a2 = conv(store, "a2", dilations[1])?;
        let b1 = conv(store, "b1", dilations[2])?;
        let b2 = conv(store, "b2", dilations[3])?;
        let merge = ConvParams::register(store, &format!("{name}.merge"), 2 * c, c, 3, 1)?;
        Ok(Self {
            branch_a: [a1, a2],
            branch_b: [b1, b2],
            merge,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let run = |s: &mut Session<'_, T>, branch: &[ConvParams; 2]| -> Result<Var> {
            let h = branch[0].forward(s, x)?;
            let h = s.graph.relu(h);
            let h = branch[1].forward(s, h)?;
            Ok(s.graph.relu(h))
        };
        let a = run(s, &self.branch_a)?;
        let b = run(s, &self.branch_b)?;
        let joined = s.graph.concat_channels(a, b)?;
        let fused = self.merge.forward(s, joined)?;
        Ok(s.graph.relu(fused))
    }
}

/// `x + conv(relu(conv(x)))`; the identity skip is dropped when
/// `local_skip` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ResidualBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ConvParams::register(store, &format!("{name}.conv1"), channels, channels, 3, 1)?,
            conv2: ConvParams::register(store, &format!("{name}.conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        local_skip: bool,
    ) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = s.graph.relu(h);
        let body = self.conv2.forward(s, h)?;
        if local_skip {
            s.graph.add(x, body)
        } else {
            Ok(body)
        }
    }
}

/// `x + conv1x1(relu(conv(relu(conv(x)))))`; the final 1×1 layer only mixes
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedResidualBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

impl EnhancedResidualBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ConvParams::register(store, &format!("{name}.conv1"), channels, channels, 3, 1)?,
            conv2: ConvParams::register(store, &format!("{name}.conv2"), channels, channels, 3, 1)?,
            conv3: ConvParams::register(store, &format!("{name}.conv3"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        local_skip: bool,
    ) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = s.graph.relu(h);
        let body = self.conv3.forward(s, h)?;
        if local_skip {
            s.graph.add(x, body)
        } else {
            Ok(body)
        }
    }
}
