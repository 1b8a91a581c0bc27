//! The full denoiser: head convolution, a chain of enhancement attention
//! modules (EAMs), tail convolution, and a global input-to-output skip.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    ConvParams, EnhancedResidualBlock, FeatureAttention, MergeAndRun, ResidualBlock, Session,
};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Which skip connections and attention units are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Long skip: first features added to the output of the EAM chain.
    pub lsc: bool,
    /// Short skips: each EAM's input added to its output.
    pub ssc: bool,
    /// Local connections: identity skips inside the residual blocks.
    pub lc: bool,
    /// Feature attention at the end of each EAM.
    pub fa: bool,
}

impl Ablation {
    pub const ALL: Ablation = Ablation {
        lsc: true,
        ssc: true,
        lc: true,
        fa: true,
    };
    pub const NONE: Ablation = Ablation {
        lsc: false,
        ssc: false,
        lc: false,
        fa: false,
    };

    /// The nine flag combinations of the skip-connection / attention study,
    /// in column order.
    pub const TABLE: [Ablation; 9] = [
        Ablation::NONE,
        Ablation::flags(true, false, false, false),
        Ablation::flags(false, true, false, false),
        Ablation::flags(true, true, false, false),
        Ablation::flags(false, false, false, true),
        Ablation::flags(false, false, true, true),
        Ablation::flags(false, true, true, true),
        Ablation::flags(true, true, false, true),
        Ablation::ALL,
    ];

    pub const fn flags(lsc: bool, ssc: bool, lc: bool, fa: bool) -> Self {
        Ablation { lsc, ssc, lc, fa }
    }

    pub fn to_bits(self) -> u8 {
        self.lsc as u8 | (self.ssc as u8) << 1 | (self.lc as u8) << 2 | (self.fa as u8) << 3
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 16).then_some(Ablation {
            lsc: bits & 1 != 0,
            ssc: bits & 2 != 0,
            lc: bits & 4 != 0,
            fa: bits & 8 != 0,
        })
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::ALL
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.lsc, "lsc"),
            (self.ssc, "ssc"),
            (self.lc, "lc"),
            (self.fa, "fa"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else if names.len() == 4 {
            f.write_str("all")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

/// Parses `none`, `all`, or `+`-joined flag names such as `lsc+ssc+fa`.
impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(Ablation::NONE),
            "all" => return Ok(Ablation::ALL),
            _ => {}
        }
        let mut a = Ablation::NONE;
        for part in s.split('+') {
            let slot = match part.trim() {
                "lsc" => &mut a.lsc,
                "ssc" => &mut a.ssc,
                "lc" => &mut a.lc,
                "fa" => &mut a.fa,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown ablation flag `{other}`"
                    )));
                }
            };
            if *slot {
                return Err(Error::InvalidArgument(format!(
                    "repeated ablation flag in `{s}`"
                )));
            }
            *slot = true;
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// 1 (grayscale) or 3 (color).
    pub in_channels: usize,
    pub num_eams: usize,
    pub channels: usize,
    pub reduction: usize,
    /// Dilations of the merge-and-run convolutions: branch A first, then
    /// branch B, two per branch.
    pub dilations: [usize; 4],
    /// Soft-shrink threshold inside the attention bottleneck.
    pub lambda: f64,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_eams: 4,
            channels: 64,
            reduction: 16,
            dilations: [1, 2, 3, 4],
            lambda: 0.5,
            ablation: Ablation::ALL,
        }
    }
}

impl NetworkConfig {
    /// Reduced network used for smoke tests and gradient checks.
    pub fn small(num_eams: usize, channels: usize) -> Self {
        Self {
            num_eams,
            channels,
            reduction: if channels >= 16 { 16 } else { channels.min(4) },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !matches!(self.in_channels, 1 | 3) {
            return bad(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            ));
        }
        if self.num_eams == 0 {
            return bad("num_eams must be at least 1".into());
        }
        if self.channels == 0
            || self.reduction == 0
            || !self.channels.is_multiple_of(self.reduction)
        {
            return bad(format!(
                "channels ({}) must be a positive multiple of reduction ({})",
                self.channels, self.reduction
            ));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        Ok(())
    }
}

/// Enhancement attention module: merge-and-run, residual block, enhanced
/// residual block, then feature attention (absent when disabled).
#[derive(Debug, Clone, PartialEq)]
pub struct Eam {
    pub merge_run: MergeAndRun,
    pub residual: ResidualBlock,
    pub enhanced: EnhancedResidualBlock,
    pub attention: Option<FeatureAttention>,
}

impl Eam {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &NetworkConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            merge_run: MergeAndRun::register(store, &format!("{name}.mr"), c, cfg.dilations)?,
            residual: ResidualBlock::register(store, &format!("{name}.rb"), c)?,
            enhanced: EnhancedResidualBlock::register(store, &format!("{name}.erb"), c)?,
            attention: if cfg.ablation.fa {
                Some(FeatureAttention::register(
                    store,
                    &format!("{name}.fa"),
                    c,
                    cfg.reduction,
                    cfg.lambda,
                )?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        ablation: Ablation,
    ) -> Result<Var> {
        let h = self.merge_run.forward(s, x)?;
        let h = self.residual.forward(s, h, ablation.lc)?;
        let h = self.enhanced.forward(s, h, ablation.lc)?;
        let h = match &self.attention {
            Some(fa) => fa.forward(s, h)?,
            None => h,
        };
        if ablation.ssc {
            s.graph.add(x, h)
        } else {
            Ok(h)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidNet<T> {
    config: NetworkConfig,
    store: ParamStore<T>,
    pub head: ConvParams,
    pub eams: Vec<Eam>,
    pub tail: ConvParams,
}

/// Nodes of interest from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Var,
    /// Parameter leaves, indexed like [`RidNet::params`].
    pub params: Vec<Var>,
    /// Attention gates in EAM order.
    pub gates: Vec<Var>,
}

impl<T: Scalar> RidNet<T> {
    /// Builds the network with every parameter zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.channels;
        let head = ConvParams::register(&mut store, "head", config.in_channels, c, 3, 1)?;
        let eams = (0..config.num_eams)
            .map(|m| Eam::register(&mut store, &format!("eam{m}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let tail = ConvParams::register(&mut store, "tail", c, config.in_channels, 3, 1)?;
        Ok(Self {
            config,
            store,
            head,
            eams,
            tail,
        })
    }

    /// Builds the network with fan-in scaled uniform weights and zero biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        net.store.init_fan_in_uniform(seed);
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> RidNet<U> {
        RidNet {
            config: self.config.clone(),
            store: self.store.cast(),
            head: self.head.clone(),
            eams: self.eams.clone(),
            tail: self.tail.clone(),
        }
    }

    /// Runs the network on an `N×C×H×W` node inside an existing session.
    pub fn forward_in(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = s.graph.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.in_channels,
                actual: c,
            });
        }
        let ablation = self.config.ablation;
        let f0 = self.head.forward(s, x)?;
        let mut f = f0;
        for eam in &self.eams {
            f = eam.forward(s, f, ablation)?;
        }
        let fg = if ablation.lsc { s.graph.add(f0, f)? } else { f };
        let residual = self.tail.forward(s, fg)?;
        s.graph.add(x, residual)
    }

    /// Binds the parameters onto `graph` and runs the network on `x`.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        x: Var,
        requires_grad: bool,
    ) -> Result<ForwardOutput> {
        self.forward_with(graph, x, requires_grad, false)
    }

    /// Like [`forward`](Self::forward); `unit_gates` forces every attention
    /// gate to 1 when rescaling.
    pub fn forward_with(
        &self,
        graph: &mut Graph<T>,
        x: Var,
        requires_grad: bool,
        unit_gates: bool,
    ) -> Result<ForwardOutput> {
        let mut s = Session::new(graph, &self.store, requires_grad).with_unit_gates(unit_gates);
        let output = self.forward_in(&mut s, x)?;
        Ok(ForwardOutput {
            output,
            params: s.params().to_vec(),
            gates: s.gates().to_vec(),
        })
    }

    /// Inference on a batch tensor without recording gradients.
    pub fn denoise(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, false)?;
        Ok(g.value(out.output).clone())
    }
}
