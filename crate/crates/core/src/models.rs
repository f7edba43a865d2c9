//! Network construction: parameter stores, layer stacks, the recognizer with
//! its angular-margin head, and the attention-map race discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape, Targets, Var};
use crate::checkpoint::{AnyTensor, Checkpoint};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors owned by one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on the tape, returning vars indexed by id.
    pub fn record(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.iter()
            .map(|(id, _, t)| tape.param(id, t.clone()))
            .collect()
    }

    /// Appends every parameter to a checkpoint under `prefix`.
    pub fn export(&self, prefix: &str, into: &mut Checkpoint) {
        for (_, name, t) in self.iter() {
            into.tensors
                .push((format!("{prefix}{name}"), AnyTensor::from_tensor(t)));
        }
    }

    /// Overwrites every parameter from a checkpoint, matching by name and shape.
    pub fn import(&mut self, prefix: &str, from: &Checkpoint) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let key = format!("{prefix}{name}");
            let stored = from
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, network expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.to();
        }
        Ok(())
    }
}

/// One layer of a [`Sequential`] stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
    },
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    GlobalAvgPool,
    Flatten,
    L2Normalize,
    /// `relu(x + body(x))`.
    Residual(Vec<Layer>),
}

/// A differentiable function with trainable parameters.
pub trait Network<T: Scalar> {
    /// Expected `[channels, height, width]` of one input image.
    fn input_shape(&self) -> [usize; 3];
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Records the forward pass of a batch `[n, c, h, w]` on `tape`.
    fn forward_on(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var>;

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "forward",
                format!("network expects [n, {}, {}, {}], got {shape:?}", want[0], want[1], want[2]),
            ));
        }
        Ok(())
    }
}

/// Result of [`forward`]: the output value plus the tape needed to run backwards.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub input: Var,
    pub params: Vec<Var>,
    pub output: Var,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }
}

/// Runs `network` on a batch, recording a fresh tape.
pub fn forward<T: Scalar, N: Network<T> + ?Sized>(
    network: &N,
    input: Tensor<T>,
) -> Result<ForwardPass<T>> {
    network.check_input(input.shape())?;
    let mut tape = Tape::new();
    let params = network.params().record(&mut tape);
    let input = tape.input(input);
    let output = network.forward_on(&mut tape, &params, input)?;
    Ok(ForwardPass {
        tape,
        input,
        params,
        output,
    })
}

/// Differentiates a scalar recorded on a forward pass's tape.
pub fn backward<T: Scalar>(
    pass: &ForwardPass<T>,
    objective: Var,
    wrt_input: bool,
) -> Result<crate::autodiff::GradientBundle<T>> {
    let targets = Targets {
        params: true,
        input: wrt_input,
    };
    pass.tape.backward(objective, targets)
}

/// A plain stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub params: ParamStore<T>,
    pub layers: Vec<Layer>,
    pub input_shape: [usize; 3],
}

impl<T: Scalar> Sequential<T> {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            params: ParamStore::new(),
            layers: Vec::new(),
            input_shape,
        }
    }
}

fn apply_layers<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[Var],
    layers: &[Layer],
    mut x: Var,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
            } => tape.conv2d(x, params[weight.0], Some(params[bias.0]), *stride, *padding)?,
            Layer::Linear { weight, bias } => {
                tape.linear(x, params[weight.0], Some(params[bias.0]))?
            }
            Layer::BatchNorm { gamma, beta } => {
                tape.batch_norm(x, params[gamma.0], params[beta.0], T::of(1e-5))?
            }
            Layer::Relu => tape.relu(x),
            Layer::MaxPool(k) => tape.max_pool2d(x, *k)?,
            Layer::AvgPool(k) => tape.avg_pool2d(x, *k)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::L2Normalize => tape.l2_normalize(x)?,
            Layer::Residual(body) => {
                let y = apply_layers(tape, params, body, x)?;
                let sum = tape.add(x, y)?;
                tape.relu(sum)
            }
        };
    }
    Ok(x)
}

impl<T: Scalar> Network<T> for Sequential<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_on(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        apply_layers(tape, params, &self.layers, input)
    }
}

/// Seeded scaled-uniform initializer: weights ~ U(-b, b) with
/// `b = gain * sqrt(6 / fan_in)`, biases zero.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
    }

    fn conv<T: Scalar>(
        &mut self,
        net: &mut Sequential<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
    ) -> Layer {
        let fan_in = (cin * 9) as f64;
        let w = self.uniform(vec![cout, cin, 3, 3], gain * (6.0 / fan_in).sqrt());
        let weight = net.params.add(format!("{name}.weight"), w);
        let bias = net
            .params
            .add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Layer::Conv {
            weight,
            bias,
            stride,
            padding: 1,
        }
    }

    fn linear<T: Scalar>(
        &mut self,
        net: &mut Sequential<T>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Layer {
        let w = self.uniform(vec![dout, din], gain * (6.0 / din as f64).sqrt());
        let weight = net.params.add(format!("{name}.weight"), w);
        let bias = net
            .params
            .add(format!("{name}.bias"), Tensor::zeros(vec![dout]));
        Layer::Linear { weight, bias }
    }
}

/// Desk-scale recognizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each stride-2 residual stage.
    pub stage_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    /// Logit scale `s`.
    pub scale: f64,
    /// Additive angular margin `m`, radians.
    pub margin: f64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            stage_widths: vec![8, 16, 32],
            embedding_dim: 64,
            num_classes: 80,
            scale: 64.0,
            margin: 0.35,
        }
    }
}

fn downsampled(side: usize, stages: usize) -> usize {
    (0..stages).fold(side, |s, _| (s - 1) / 2 + 1)
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return bad(format!("margin must lie in [0, pi/2), got {}", self.margin));
        }
        if self.embedding_dim < 2 {
            return bad("embedding dimension must be at least 2".into());
        }
        if self.num_classes < 2 {
            return bad("recognizer needs at least 2 classes".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad("stage widths must be a non-empty list of positive counts".into());
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Recognition network: image -> unit embedding, plus a cosine class head.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer<T> {
    pub config: RecognizerConfig,
    body: Sequential<T>,
    head: ParamId,
}

/// Builds the recognizer with seeded initialization.
pub fn build_recognizer<T: Scalar>(cfg: &RecognizerConfig, seed: u64) -> Result<Recognizer<T>> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut net = Sequential::new([cfg.input_channels, cfg.input_height, cfg.input_width]);
    let mut cin = cfg.input_channels;
    for (i, &w) in cfg.stage_widths.iter().enumerate() {
        let down = init.conv(&mut net, &format!("stage{i}.down"), cin, w, 2, 1.0);
        net.layers.push(down);
        net.layers.push(Layer::Relu);
        let a = init.conv(&mut net, &format!("stage{i}.res.conv1"), w, w, 1, 1.0);
        let b = init.conv(&mut net, &format!("stage{i}.res.conv2"), w, w, 1, 0.1);
        net.layers.push(Layer::Residual(vec![a, Layer::Relu, b]));
        cin = w;
    }
    let n = cfg.stage_widths.len();
    let flat = cin * downsampled(cfg.input_height, n) * downsampled(cfg.input_width, n);
    net.layers.push(Layer::Flatten);
    let fc = init.linear(&mut net, "embedding", flat, cfg.embedding_dim, 0.5);
    net.layers.push(fc);
    net.layers.push(Layer::L2Normalize);
    let head_init = init.uniform(
        vec![cfg.num_classes, cfg.embedding_dim],
        1.0,
    );
    let head = net.params.add("head.weight", head_init);
    Ok(Recognizer {
        config: cfg.clone(),
        body: net,
        head,
    })
}

impl<T: Scalar> Network<T> for Recognizer<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.body.input_shape
    }

    fn params(&self) -> &ParamStore<T> {
        &self.body.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.body.params
    }

    /// Produces unit-norm embeddings `[n, embedding_dim]`.
    fn forward_on(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        self.body.forward_on(tape, params, input)
    }
}

impl<T: Scalar> Recognizer<T> {
    pub fn head(&self) -> ParamId {
        self.head
    }

    /// Cosines between embeddings and the normalized class weights, `[n, classes]`.
    pub fn cosines(&self, tape: &mut Tape<T>, params: &[Var], embeddings: Var) -> Result<Var> {
        let w = tape.l2_normalize(params[self.head.0])?;
        tape.matmul_nt(embeddings, w)
    }

    /// Margin-head logits. With labels the true class gets the additive
    /// margin; without labels these are plain scaled cosines.
    pub fn logits(
        &self,
        tape: &mut Tape<T>,
        cosines: Var,
        labels: Option<&[usize]>,
        negative_offset: f64,
    ) -> Result<Var> {
        let margin = if labels.is_some() {
            self.config.margin
        } else {
            0.0
        };
        tape.margin_logits(
            cosines,
            labels,
            T::of(self.config.scale),
            T::of(margin),
            T::of(negative_offset),
        )
    }

    /// Class probabilities `P_i` for a batch (margin applied when labelled).
    pub fn probabilities(&self, images: Tensor<T>, labels: Option<&[usize]>) -> Result<Tensor<T>> {
        let mut pass = forward(self, images)?;
        let cos = self.cosines(&mut pass.tape, &pass.params, pass.output)?;
        let logits = self.logits(&mut pass.tape, cos, labels, 0.0)?;
        let p = pass.tape.softmax(logits)?;
        Ok(pass.tape.value(p).clone())
    }

    /// Embeds a single `[c, h, w]` image.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.embedding_dim;
        let batch = image.clone().reshape({
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            s
        })?;
        let pass = forward(self, batch)?;
        pass.output().clone().reshape(vec![d])
    }

    /// Embeds a batch `[n, c, h, w]` into `[n, embedding_dim]`.
    pub fn embed_batch(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        Ok(forward(self, images)?.output().clone())
    }
}

/// Desk-scale discriminator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    pub hidden: usize,
    pub num_races: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            input_channels: 1,
            stage_widths: vec![8, 16, 16],
            hidden: 32,
            num_races: 4,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_races < 2 {
            return Err(Error::Config("discriminator needs at least 2 races".into()));
        }
        if self.input_channels != 1 {
            return Err(Error::Config(format!(
                "attention maps have exactly one channel, config asks for {}",
                self.input_channels
            )));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) || self.hidden == 0 {
            return Err(Error::Config(
                "discriminator widths must be positive and non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Race classifier over single-channel attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    body: Sequential<T>,
}

pub fn build_discriminator<T: Scalar>(
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<Discriminator<T>> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut net = Sequential::new([1, cfg.input_height, cfg.input_width]);
    let mut cin = 1;
    for (i, &w) in cfg.stage_widths.iter().enumerate() {
        let conv = init.conv(&mut net, &format!("stage{i}.conv"), cin, w, 2, 1.0);
        net.layers.push(conv);
        net.layers.push(Layer::Relu);
        cin = w;
    }
    let n = cfg.stage_widths.len();
    let flat = cin * downsampled(cfg.input_height, n) * downsampled(cfg.input_width, n);
    net.layers.push(Layer::Flatten);
    let fc = init.linear(&mut net, "fc", flat, cfg.hidden, 1.0);
    net.layers.push(fc);
    net.layers.push(Layer::Relu);
    let out = init.linear(&mut net, "classifier", cfg.hidden, cfg.num_races, 0.5);
    net.layers.push(out);
    Ok(Discriminator {
        config: cfg.clone(),
        body: net,
    })
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.body.input_shape
    }

    fn params(&self) -> &ParamStore<T> {
        &self.body.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.body.params
    }

    /// Produces race logits `[n, num_races]`.
    fn forward_on(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        self.body.forward_on(tape, params, input)
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn logits(&self, maps: Tensor<T>) -> Result<Tensor<T>> {
        Ok(forward(self, maps)?.output().clone())
    }
}
