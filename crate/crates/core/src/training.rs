//! The alternating training loop: attention maps from the recognizer feed
//! erasure and the race discriminator, whose losses set the penalty
//! coefficient of the recognizer's identity loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape, Targets};
use crate::checkpoint::Checkpoint;
use crate::data::{GroupedDataset, Split};
use crate::erasure::{apply_masks, random_centers, top_n_centers, MaskConfig};
use crate::error::{Error, Result};
use crate::gam::{compute_gam_batch, GamMap};
use crate::losses::{
    confidence_balance_loss, identity_loss_on, BatchConfidence, LossConfig, PenaltyK,
};
use crate::metrics::{confidence_curve, ConfidenceCurve};
use crate::models::{
    build_discriminator, build_recognizer, forward, Discriminator, DiscriminatorConfig, Network,
    ParamStore, Recognizer, RecognizerConfig,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch indices (0-based) at which the learning rate is divided by 10.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub discriminator_lr: f64,
    pub seed: u64,
    pub use_gam_ct: bool,
    pub use_gam_sfre: bool,
    pub use_conf_loss: bool,
    pub use_random_erase_baseline: bool,
    /// Multiplier applied to `L_conf + L_adv` before it enters the identity loss.
    pub penalty_scale: f64,
    pub mask: MaskConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            steps_per_epoch: 40,
            batch_size: 32,
            lr: 0.1,
            milestones: vec![11, 14],
            momentum: 0.9,
            weight_decay: 5e-4,
            discriminator_lr: 0.05,
            seed: 0,
            use_gam_ct: true,
            use_gam_sfre: true,
            use_conf_loss: true,
            use_random_erase_baseline: false,
            penalty_scale: 1.0,
            mask: MaskConfig::for_image(64, 64),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// All method components off: plain angular-margin training.
    pub fn baseline(mut self) -> Self {
        self.use_gam_ct = false;
        self.use_gam_sfre = false;
        self.use_conf_loss = false;
        self.use_random_erase_baseline = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be at least 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("discriminator_lr", self.discriminator_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("penalty_scale", self.penalty_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.use_gam_sfre && self.use_random_erase_baseline {
            return bad("use_gam_sfre and use_random_erase_baseline are exclusive".into());
        }
        self.loss.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        (0..drops).fold(self.lr, |lr, _| lr / 10.0)
    }

    fn needs_gam(&self) -> bool {
        self.use_gam_ct || self.use_gam_sfre
    }
}

/// The four arms compared in the desk study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Plain angular-margin training.
    Baseline,
    /// GAM-CT with the confidence loss and GAM-SFRE.
    Gabn,
    /// GAM-SFRE alone.
    Sfre,
    /// Random erasure with the SFRE mask budget.
    RandomErase,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Gabn, Method::Sfre, Method::RandomErase];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Gabn => "gabn",
            Method::Sfre => "sfre",
            Method::RandomErase => "random",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown method {name:?}")))
    }

    /// `cfg` with this arm's toggles set.
    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        let base = cfg.clone().baseline();
        match self {
            Method::Baseline => base,
            Method::Gabn => TrainConfig {
                use_gam_ct: true,
                use_gam_sfre: true,
                use_conf_loss: true,
                ..base
            },
            Method::Sfre => TrainConfig {
                use_gam_sfre: true,
                ..base
            },
            Method::RandomErase => TrainConfig {
                use_random_erase_baseline: true,
                ..base
            },
        }
    }
}

/// One momentum SGD update: `v = momentum * v + grad + weight_decay * param`,
/// `param -= lr * v`.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_update",
            format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        ));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum SGD over every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update; parameters without a gradient get a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<ParamId, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let zero;
            let g = match grads.get(&id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            sgd_update(p, g, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

/// Epoch-wise shuffled minibatches over the training split.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            order: Vec::new(),
            cursor: 0,
            pool,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// A training minibatch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[n, c, h, w]`.
    pub images: Tensor<T>,
    /// Recognizer class of each image.
    pub labels: Vec<usize>,
    /// Group (race) of each image.
    pub races: Vec<usize>,
}

impl Batch<f32> {
    pub fn from_dataset(ds: &GroupedDataset, indices: &[usize], classes: &BTreeMap<usize, usize>) -> Self {
        Self {
            images: ds.batch(indices),
            labels: indices.iter().map(|&i| classes[&ds.identities[i]]).collect(),
            races: indices.iter().map(|&i| ds.group_of(i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub l_id: f64,
    pub l_conf: f64,
    pub l_adv: f64,
    pub l_cls: f64,
    pub l_final: f64,
    pub k: f64,
    /// `(group, P_max)` for every sample of the batch.
    pub confidences: Vec<(usize, f64)>,
    pub mean_p_max: BTreeMap<usize, f64>,
    pub wall_time: Duration,
}

/// Both networks with their optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub recognizer: Recognizer<T>,
    pub discriminator: Discriminator<T>,
    pub recognizer_opt: Sgd<T>,
    pub discriminator_opt: Sgd<T>,
    /// Drives mask sizes and random mask centres.
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        rec_cfg: &RecognizerConfig,
        disc_cfg: &DiscriminatorConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        Ok(Self {
            recognizer: build_recognizer(rec_cfg, cfg.seed)?,
            discriminator: build_discriminator(disc_cfg, cfg.seed.wrapping_add(0x9e37_79b9))?,
            recognizer_opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            discriminator_opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng,
        })
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

fn finite_grads<T: Scalar>(name: &str, grads: &BTreeMap<ParamId, Tensor<T>>) -> Result<()> {
    if grads.values().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} gradients")))
    }
}

fn stack_maps<T: Scalar>(maps: &[GamMap<T>]) -> Result<Tensor<T>> {
    let normalized: Vec<GamMap<T>> = maps.iter().map(GamMap::normalized).collect();
    let refs: Vec<&Tensor<T>> = normalized.iter().map(GamMap::tensor).collect();
    Tensor::stack(&refs)
}

fn image_of<T: Scalar>(batch: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    batch.select_first(i)
}

/// One iteration of the alternating scheme. On error nothing in `state` changes.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    let start = Instant::now();
    let n = batch.labels.len();
    if n == 0 || batch.images.shape().first() != Some(&n) || batch.races.len() != n {
        return Err(Error::invalid("train_step", "batch is empty or inconsistent"));
    }
    let rec = &state.recognizer;
    let mut rng = state.rng.clone();

    // (1)-(4): probabilities on the originals and, when needed, attention maps.
    let (p_max, maps) = if cfg.needs_gam() {
        let g = compute_gam_batch(rec, batch.images.clone(), Some(&batch.labels))?;
        (g.p_max, Some(g.maps))
    } else if cfg.use_conf_loss || cfg.use_random_erase_baseline {
        let p = rec.probabilities(batch.images.clone(), Some(&batch.labels))?;
        let classes = rec.config.num_classes;
        let p_max = p
            .data()
            .chunks(classes)
            .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        (p_max, None)
    } else {
        (Vec::new(), None)
    };
    let p_max: Vec<f64> = p_max.iter().map(|p| p.as_f64()).collect();
    let l_conf = if cfg.use_conf_loss {
        confidence_balance_loss(&BatchConfidence::new(p_max.clone(), cfg.loss.t_confidence))?
    } else {
        0.0
    };

    // (5): erasure.
    let (h, w) = (batch.images.shape()[2], batch.images.shape()[3]);
    let train_images = if cfg.use_gam_sfre || cfg.use_random_erase_baseline {
        let mut erased = Vec::with_capacity(n);
        for i in 0..n {
            let img = image_of(&batch.images, i)?;
            let k = cfg.mask.n_mask.min(h * w);
            let centers = match (&maps, cfg.use_gam_sfre) {
                (Some(maps), true) => top_n_centers(&maps[i], k)?,
                _ => random_centers(h, w, k, &mut rng),
            };
            erased.push(apply_masks(&img, &centers, &cfg.mask, &mut rng)?.0);
        }
        let refs: Vec<&Tensor<T>> = erased.iter().collect();
        Tensor::stack(&refs)?
    } else {
        batch.images.clone()
    };

    // (6)-(7): discriminator step on the original maps, then the adversarial loss.
    let mut discriminator = None;
    let (l_cls, l_adv) = if cfg.use_gam_ct {
        let maps = stack_maps(maps.as_deref().expect("maps computed for GAM-CT"))?;
        let mut disc = state.discriminator.clone();
        let mut opt = state.discriminator_opt.clone();
        let pass = forward(&disc, maps.clone())?;
        let mut tape = pass.tape;
        let loss = tape.cross_entropy(pass.output, &batch.races)?;
        let l_cls = finite("L_cls", tape.value(loss).item()?.as_f64())?;
        let grads = tape.backward(loss, Targets::PARAMS)?.params;
        finite_grads("discriminator", &grads)?;
        opt.step(disc.params_mut(), &grads, cfg.discriminator_lr * lr / cfg.lr.max(f64::MIN_POSITIVE))?;
        let pass = forward(&disc, maps)?;
        let mut tape = pass.tape;
        let adv = tape.uniform_cross_entropy(pass.output)?;
        let l_adv = finite("L_adv", tape.value(adv).item()?.as_f64())?;
        discriminator = Some((disc, opt));
        (l_cls, l_adv)
    } else {
        (0.0, 0.0)
    };

    // (8): detached penalty coefficient.
    let k = PenaltyK(cfg.penalty_scale * (l_conf + l_adv));

    // (9): identity loss on the (possibly erased) images.
    let pass = forward(rec, train_images)?;
    let mut tape = pass.tape;
    let cos = rec.cosines(&mut tape, &pass.params, pass.output)?;
    let loss = identity_loss_on(&mut tape, cos, &batch.labels, k, &cfg.loss)?;
    let l_final = finite("L_Final", tape.value(loss).item()?.as_f64())?;
    let grads = tape.backward(loss, Targets::PARAMS)?.params;
    finite_grads("recognizer", &grads)?;
    let l_id = if k.0 == 0.0 {
        l_final
    } else {
        let mut t = Tape::new();
        let c = t.constant(tape.value(cos).clone());
        let l = identity_loss_on(&mut t, c, &batch.labels, PenaltyK(0.0), &cfg.loss)?;
        finite("L_ID", t.value(l).item()?.as_f64())?
    };
    let p_max = if p_max.is_empty() {
        // Probabilities of the identity forward pass, which saw the originals with K = 0.
        let mut t = Tape::new();
        let c = t.constant(tape.value(cos).clone());
        let logits = rec.logits(&mut t, c, Some(&batch.labels), 0.0)?;
        let p = t.softmax(logits)?;
        let m = rec.config.num_classes;
        t.value(p)
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    } else {
        p_max
    };

    let mut rec_opt = state.recognizer_opt.clone();
    let mut rec_params = state.recognizer.params().clone();
    rec_opt.step(&mut rec_params, &grads, lr)?;

    // Commit.
    *state.recognizer.params_mut() = rec_params;
    state.recognizer_opt = rec_opt;
    if let Some((disc, opt)) = discriminator {
        state.discriminator = disc;
        state.discriminator_opt = opt;
    }
    state.rng = rng;

    let confidences: Vec<(usize, f64)> = batch.races.iter().copied().zip(p_max).collect();
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(g, p) in &confidences {
        let e = sums.entry(g).or_default();
        e.0 += p;
        e.1 += 1;
    }
    Ok(StepReport {
        l_id,
        l_conf,
        l_adv,
        l_cls,
        l_final,
        k: k.0,
        confidences,
        mean_p_max: sums.into_iter().map(|(g, (s, c))| (g, s / c as f64)).collect(),
        wall_time: start.elapsed(),
    })
}

/// Per-epoch means of the step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Steps completed so far.
    pub step: usize,
    pub l_id: f64,
    pub l_conf: f64,
    pub l_adv: f64,
    pub l_cls: f64,
    pub l_final: f64,
    pub lr: f64,
    pub mean_p_max: BTreeMap<usize, f64>,
}

pub fn metrics_csv(rows: &[EpochRow], group_names: &[String]) -> String {
    let mut out = String::from("epoch,step,L_ID,L_conf,L_adv,L_cls,L_Final,lr");
    for g in group_names {
        let _ = write!(out, ",mean_p_max_{g}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.l_id, r.l_conf, r.l_adv, r.l_cls, r.l_final, r.lr
        );
        for g in 0..group_names.len() {
            let _ = write!(out, ",{}", r.mean_p_max.get(&g).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub rows: Vec<EpochRow>,
    pub curve: ConfidenceCurve,
    pub checkpoints: Vec<PathBuf>,
}

/// Network settings implied by a dataset.
pub fn network_configs(
    ds: &GroupedDataset,
    rec: &RecognizerConfig,
    disc: &DiscriminatorConfig,
    cfg: &TrainConfig,
) -> (RecognizerConfig, DiscriminatorConfig) {
    let rec = RecognizerConfig {
        input_height: ds.side,
        input_width: ds.side,
        input_channels: 3,
        num_classes: ds.train_classes().len(),
        scale: cfg.loss.scale,
        margin: cfg.loss.margin,
        ..rec.clone()
    };
    let disc = DiscriminatorConfig {
        input_height: ds.side,
        input_width: ds.side,
        num_races: ds.num_groups(),
        ..disc.clone()
    };
    (rec, disc)
}

/// Checkpoint metadata recording how to rebuild both networks.
pub fn checkpoint_metadata(
    rec: &RecognizerConfig,
    disc: &DiscriminatorConfig,
    group_names: &[String],
    epoch: usize,
) -> String {
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    format!(
        "epoch = {epoch}\nside = {}\nstage_widths = {}\nembedding_dim = {}\nnum_classes = {}\ns = {}\nm = {}\ndisc_widths = {}\ndisc_hidden = {}\ngroups = {}\n",
        rec.input_height,
        list(&rec.stage_widths),
        rec.embedding_dim,
        rec.num_classes,
        rec.scale,
        rec.margin,
        list(&disc.stage_widths),
        disc.hidden,
        group_names.join(","),
    )
}

/// Networks restored from a training checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub recognizer: Recognizer<f32>,
    pub discriminator: Discriminator<f32>,
    pub group_names: Vec<String>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    let meta: BTreeMap<&str, &str> = ck
        .metadata
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |k: &str| {
        meta.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {k} is not a number")))
    };
    let list = |k: &str| -> Result<Vec<usize>> {
        get(k)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("metadata {k} is not a list")))
            })
            .collect()
    };
    let side = num("side")? as usize;
    let group_names: Vec<String> = get("groups")?.split(',').map(String::from).collect();
    let rec_cfg = RecognizerConfig {
        input_channels: 3,
        input_height: side,
        input_width: side,
        stage_widths: list("stage_widths")?,
        embedding_dim: num("embedding_dim")? as usize,
        num_classes: num("num_classes")? as usize,
        scale: num("s")?,
        margin: num("m")?,
    };
    let disc_cfg = DiscriminatorConfig {
        input_height: side,
        input_width: side,
        input_channels: 1,
        stage_widths: list("disc_widths")?,
        hidden: num("disc_hidden")? as usize,
        num_races: group_names.len(),
    };
    let mut recognizer = build_recognizer(&rec_cfg, 0)?;
    recognizer.params_mut().import("recognizer.", &ck)?;
    let mut discriminator = build_discriminator(&disc_cfg, 0)?;
    discriminator.params_mut().import("discriminator.", &ck)?;
    Ok(LoadedModel {
        recognizer,
        discriminator,
        group_names,
    })
}

/// Runs `cfg.epochs` epochs over the training split. When `out_dir` is set,
/// writes `checkpoint_epoch<e>.gabn` per epoch, `metrics.csv` and
/// `confidence.csv`.
pub fn train(
    cfg: &TrainConfig,
    ds: &GroupedDataset,
    rec_cfg: &RecognizerConfig,
    disc_cfg: &DiscriminatorConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.num_groups() < 2 {
        return Err(Error::Dataset(format!(
            "training needs at least 2 groups, dataset has {}",
            ds.num_groups()
        )));
    }
    for g in 0..ds.num_groups() {
        let ids = (0..ds.identity_groups.len())
            .filter(|&i| ds.identity_groups[i] == g && ds.identity_splits[i] == Split::Train)
            .count();
        if ids < 2 {
            return Err(Error::Dataset(format!(
                "group {} has {ids} training identities, at least 2 are required",
                ds.group_names[g]
            )));
        }
    }
    cfg.mask.validate(ds.side, ds.side)?;
    let (rec_cfg, disc_cfg) = network_configs(ds, rec_cfg, disc_cfg, cfg);
    let classes = ds.train_classes();
    let mut state = TrainState::new(&rec_cfg, &disc_cfg, cfg)?;
    let mut sampler = BatchSampler::new(ds.indices(Split::Train), cfg.seed);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut observations = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut sums = [0.0; 5];
        let mut obs = Vec::new();
        for _ in 0..cfg.steps_per_epoch {
            let idx = sampler.next_batch(cfg.batch_size);
            let batch = Batch::from_dataset(ds, &idx, &classes);
            let r = train_step(&mut state, &batch, cfg, lr)?;
            step += 1;
            for (s, v) in sums.iter_mut().zip([r.l_id, r.l_conf, r.l_adv, r.l_cls, r.l_final]) {
                *s += v;
            }
            obs.extend(r.confidences);
            log::debug!(
                "epoch {epoch} step {step}: L_ID {:.4} L_Final {:.4} K {:.3}",
                r.l_id,
                r.l_final,
                r.k
            );
        }
        let b = cfg.steps_per_epoch as f64;
        let curve = confidence_curve(std::slice::from_ref(&obs));
        let row = EpochRow {
            epoch,
            step,
            l_id: sums[0] / b,
            l_conf: sums[1] / b,
            l_adv: sums[2] / b,
            l_cls: sums[3] / b,
            l_final: sums[4] / b,
            lr,
            mean_p_max: curve
                .groups
                .iter()
                .copied()
                .zip(curve.means[0].iter().copied())
                .collect(),
        };
        log::info!(
            "epoch {epoch}: L_ID {:.4} L_conf {:.3} L_adv {:.3} L_cls {:.3} lr {lr}",
            row.l_id,
            row.l_conf,
            row.l_adv,
            row.l_cls
        );
        rows.push(row);
        observations.push(obs);
        if let Some(dir) = out_dir {
            let mut ck = Checkpoint {
                metadata: checkpoint_metadata(&rec_cfg, &disc_cfg, &ds.group_names, epoch),
                tensors: Vec::new(),
            };
            state.recognizer.params().export("recognizer.", &mut ck);
            state.discriminator.params().export("discriminator.", &mut ck);
            let path = dir.join(format!("checkpoint_epoch{epoch}.gabn"));
            ck.save(&path)?;
            checkpoints.push(path);
        }
    }
    let curve = confidence_curve(&observations);
    if let Some(dir) = out_dir {
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("metrics.csv", metrics_csv(&rows, &ds.group_names))?;
        write(
            "confidence.csv",
            curve.to_csv(|g| ds.group_names[g].clone()),
        )?;
    }
    Ok(TrainOutcome {
        state,
        rows,
        curve,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent() {
        let mut p = Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let mut v = Tensor::zeros(vec![2]);
        sgd_update(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
        let mut q = Tensor::new(vec![1], vec![3.0f64]).unwrap();
        let mut v = Tensor::zeros(vec![1]);
        sgd_update(&mut q, &Tensor::zeros(vec![1]), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(q.data(), &[3.0]);
        assert!(sgd_update(&mut q, &g, &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut v = Tensor::zeros(vec![1]);
        let g1 = 0.5;
        let g2 = -0.2;
        sgd_update(&mut p, &Tensor::new(vec![1], vec![g1]).unwrap(), &mut v, lr, mu, wd).unwrap();
        sgd_update(&mut p, &Tensor::new(vec![1], vec![g2]).unwrap(), &mut v, lr, mu, wd).unwrap();
        let v1 = g1 + wd * 1.0;
        let p1 = 1.0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((p.data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn schedule_divides_by_ten() {
        let cfg = TrainConfig {
            lr: 0.1,
            milestones: vec![9, 15, 20],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(8), 0.1);
        assert_eq!(cfg.lr_at(9), cfg.lr_at(8) / 10.0);
        assert_eq!(cfg.lr_at(15), cfg.lr_at(14) / 10.0);
        assert_eq!(cfg.lr_at(25), 0.1 / 10.0 / 10.0 / 10.0);
        let bad = TrainConfig {
            milestones: vec![3, 3],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampler_covers_pool_each_pass() {
        let mut s = BatchSampler::new((0..10).collect(), 3);
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut t = BatchSampler::new((0..10).collect(), 3);
        t.next_batch(10);
        assert_eq!(s.next_batch(4), t.next_batch(4));
    }
}
