use canopy_tensor::init::{kaiming_uniform, uniform};
use canopy_tensor::{Graph, NormMode, ParamId, ParamStore, Real, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

/// Squeeze-and-excitation weights: `C -> hidden -> C` with biases.
#[derive(Debug, Clone, Copy)]
pub struct SeWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// (3x3 conv -> BN -> ReLU) x 2, optionally followed by SE.
#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    a: ConvBn,
    b: ConvBn,
    se: Option<SeWeights>,
}

/// Convolution with bias; 3x3 after nearest 2x upsampling, or the 1x1 head.
#[derive(Debug, Clone, Copy)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
    padding: usize,
}

#[derive(Debug, Clone)]
enum Layout {
    /// `enc[i]` per level; `dec[i]`/`up[i]` for levels `0..levels-1`.
    Plain {
        enc: Vec<DoubleConv>,
        up: Vec<Conv>,
        dec: Vec<DoubleConv>,
    },
    /// `nodes[i][j]` is X^{i,j}; `up[i][j]` feeds X^{i,j} from X^{i+1,j-1}
    /// (`up[i][0]` unused).
    Nested {
        nodes: Vec<Vec<DoubleConv>>,
        up: Vec<Vec<Option<Conv>>>,
    },
}

/// A UNet-family network: parameters, BN running statistics and the fixed
/// output scaling `height = target_mean + target_std * head`.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
    /// Output de-normalization, set from training targets before training.
    pub target_mean: f64,
    pub target_std: f64,
    layout: Layout,
    head: Conv,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    running: &'a mut Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let kernel = self
            .store
            .add(format!("{name}.conv"), kaiming_uniform(&[cout, cin, 3, 3], cin * 9, &mut self.rng));
        let gamma = self.store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()));
        let beta = self.store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        self.running.push(RunningStats::new(cout));
        ConvBn {
            kernel,
            gamma,
            beta,
            bn: self.running.len() - 1,
        }
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize, se_reduction: Option<usize>) -> DoubleConv {
        let a = self.conv_bn(&format!("{name}.0"), cin, cout);
        let b = self.conv_bn(&format!("{name}.1"), cout, cout);
        let se = se_reduction.map(|r| {
            let hidden = (cout / r).max(1);
            let b1 = (1.0 / cout as f64).sqrt();
            let b2 = (1.0 / hidden as f64).sqrt();
            SeWeights {
                w1: self.store.add(format!("{name}.se.fc1.weight"), uniform(&[hidden, cout], b1, &mut self.rng)),
                b1: self.store.add(format!("{name}.se.fc1.bias"), uniform(&[hidden], b1, &mut self.rng)),
                w2: self.store.add(format!("{name}.se.fc2.weight"), uniform(&[cout, hidden], b2, &mut self.rng)),
                b2: self.store.add(format!("{name}.se.fc2.bias"), uniform(&[cout], b2, &mut self.rng)),
            }
        });
        DoubleConv { a, b, se }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let bound = (1.0 / (cin * k * k) as f64).sqrt();
        Conv {
            kernel: self.store.add(format!("{name}.weight"), uniform(&[cout, cin, k, k], bound, &mut self.rng)),
            bias: self.store.add(format!("{name}.bias"), uniform(&[cout], bound, &mut self.rng)),
            padding: k / 2,
        }
    }
}

/// Deterministic construction and initialization from `seed`.
pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut running = Vec::new();
    let mut b = Builder {
        store: &mut params,
        running: &mut running,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = config.levels;
    let ch = |i: usize| config.channels(i);
    let se = (config.kind == ModelKind::Se).then_some(config.se_reduction);

    let enc: Vec<DoubleConv> = (0..d)
        .map(|i| {
            let cin = if i == 0 { config.in_channels } else { ch(i - 1) };
            b.double_conv(&format!("x{i}_0"), cin, ch(i), se)
        })
        .collect();
    let layout = match config.kind {
        ModelKind::Vanilla | ModelKind::Se => {
            let mut up = Vec::new();
            let mut dec = Vec::new();
            for i in 0..d - 1 {
                up.push(b.conv(&format!("up{i}"), ch(i + 1), ch(i), 3));
                dec.push(b.double_conv(&format!("dec{i}"), 2 * ch(i), ch(i), se));
            }
            Layout::Plain { enc, up, dec }
        }
        ModelKind::Nested => {
            let mut nodes: Vec<Vec<DoubleConv>> = enc.into_iter().map(|n| vec![n]).collect();
            let mut up: Vec<Vec<Option<Conv>>> = (0..d).map(|_| vec![None]).collect();
            for j in 1..d {
                for i in 0..d - j {
                    up[i].push(Some(b.conv(&format!("up{i}_{j}"), ch(i + 1), ch(i), 3)));
                    let node = b.double_conv(&format!("x{i}_{j}"), (j + 1) * ch(i), ch(i), None);
                    nodes[i].push(node);
                }
            }
            Layout::Nested { nodes, up }
        }
    };
    let head = b.conv("head", ch(0), config.out_channels, 1);
    Ok(Model {
        config,
        params,
        running,
        target_mean: 0.0,
        target_std: 1.0,
        layout,
        head,
    })
}

/// `x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`, gated per channel.
pub fn se_block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: &SeWeights) -> Result<Var> {
    let squeezed = g.global_avg_pool(x)?;
    let (w1, b1) = (g.param(store, w.w1), g.param(store, w.b1));
    let hidden = g.linear(squeezed, w1, Some(b1))?;
    let hidden = g.relu(hidden);
    let (w2, b2) = (g.param(store, w.w2), g.param(store, w.b2));
    let excite = g.linear(hidden, w2, Some(b2))?;
    let gate = g.sigmoid(excite);
    Ok(g.scale_channels(x, gate)?)
}

/// Forward-pass context: parameters plus optional BN running statistics.
struct Pass<'a, T> {
    store: &'a ParamStore<T>,
    running: Option<&'a mut [RunningStats<T>]>,
    mode: NormMode,
}

impl<T: Real> Pass<'_, T> {
    fn conv_bn_relu(&mut self, g: &mut Graph<T>, x: Var, c: &ConvBn) -> Result<Var> {
        let k = g.param(self.store, c.kernel);
        let y = g.conv2d(x, k, None, 1, 1)?;
        let (gamma, beta) = (g.param(self.store, c.gamma), g.param(self.store, c.beta));
        let stats = match self.running.as_deref_mut() {
            Some(r) => Some(&mut r[c.bn]),
            None => None,
        };
        if stats.is_none() && self.mode == NormMode::Eval {
            return Err(Error::Usage("evaluation mode needs BN running statistics".into()));
        }
        let y = g.batch_norm2d(y, gamma, beta, stats, self.mode)?;
        Ok(g.relu(y))
    }

    fn double_conv(&mut self, g: &mut Graph<T>, x: Var, dc: &DoubleConv) -> Result<Var> {
        let y = self.conv_bn_relu(g, x, &dc.a)?;
        let y = self.conv_bn_relu(g, y, &dc.b)?;
        match &dc.se {
            Some(w) => se_block(g, self.store, y, w),
            None => Ok(y),
        }
    }

    fn conv(&mut self, g: &mut Graph<T>, x: Var, c: &Conv) -> Result<Var> {
        let (k, b) = (g.param(self.store, c.kernel), g.param(self.store, c.bias));
        Ok(g.conv2d(x, k, Some(b), 1, c.padding)?)
    }

    fn up(&mut self, g: &mut Graph<T>, x: Var, c: &Conv) -> Result<Var> {
        let x = g.upsample2x(x)?;
        self.conv(g, x, c)
    }
}

impl<T: Real> Model<T> {
    /// Records the network on `g`. `store` supplies parameter values (the
    /// model's own, or a perturbed copy during gradient checks); BN running
    /// statistics are updated in train mode when provided and required in
    /// eval mode.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        running: Option<&mut [RunningStats<T>]>,
        input: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        let m = self.config.size_multiple();
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::Config(format!(
                "input {shape:?} does not fit a {}-channel model with {} levels (extent must be divisible by {m})",
                self.config.in_channels, self.config.levels
            )));
        }
        let mut pass = Pass { store, running, mode };
        let last = match &self.layout {
            Layout::Plain { enc, up, dec } => {
                let mut skips = Vec::with_capacity(enc.len());
                let mut x = input;
                for (i, block) in enc.iter().enumerate() {
                    if i > 0 {
                        x = g.max_pool2d(x, 2)?;
                    }
                    x = pass.double_conv(g, x, block)?;
                    skips.push(x);
                }
                for i in (0..dec.len()).rev() {
                    let u = pass.up(g, x, &up[i])?;
                    let cat = g.concat_channels(skips[i], u)?;
                    x = pass.double_conv(g, cat, &dec[i])?;
                }
                x
            }
            Layout::Nested { nodes, up } => {
                let d = nodes.len();
                let mut out: Vec<Vec<Var>> = vec![Vec::new(); d];
                let mut x = input;
                for i in 0..d {
                    if i > 0 {
                        x = g.max_pool2d(x, 2)?;
                    }
                    x = pass.double_conv(g, x, &nodes[i][0])?;
                    out[i].push(x);
                }
                for j in 1..d {
                    for i in 0..d - j {
                        let below = out[i + 1][j - 1];
                        let u = pass.up(g, below, up[i][j].as_ref().expect("up conv"))?;
                        let mut cat = out[i][0];
                        for k in 1..j {
                            cat = g.concat_channels(cat, out[i][k])?;
                        }
                        cat = g.concat_channels(cat, u)?;
                        let y = pass.double_conv(g, cat, &nodes[i][j])?;
                        out[i].push(y);
                    }
                }
                out[0][d - 1]
            }
        };
        let head = pass.conv(g, last, &self.head)?;
        Ok(g.affine(head, T::of(self.target_std), T::of(self.target_mean)))
    }

    /// Eval-mode prediction, `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut running = self.running.clone();
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let y = self.forward_with(&mut g, &self.params, Some(&mut running), x, NormMode::Eval)?;
        Ok(g.value(y).clone())
    }

    pub fn n_params(&self) -> usize {
        self.params.numel()
    }

    /// Number of double-convolution blocks.
    pub fn double_conv_count(&self) -> usize {
        match &self.layout {
            Layout::Plain { enc, dec, .. } => enc.len() + dec.len(),
            Layout::Nested { nodes, .. } => nodes.iter().map(Vec::len).sum(),
        }
    }

    /// Widths of every SE bottleneck, in construction order.
    pub fn se_bottlenecks(&self) -> Vec<usize> {
        let blocks: Vec<&DoubleConv> = match &self.layout {
            Layout::Plain { enc, dec, .. } => enc.iter().chain(dec).collect(),
            Layout::Nested { nodes, .. } => nodes.iter().flatten().collect(),
        };
        blocks
            .iter()
            .filter_map(|b| b.se.map(|w| self.params.value(w.w1).shape()[0]))
            .collect()
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
                    var: r.var.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
                })
                .collect(),
            target_mean: self.target_mean,
            target_std: self.target_std,
            layout: self.layout.clone(),
            head: self.head,
        }
    }
}
