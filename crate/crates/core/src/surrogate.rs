//! Coarsest-level surrogate of the forward map: a dense feed-forward network
//! from white noise to `(y, Q)`, its Adam training loop, and test doubles.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::darcy::ForwardModel;
use crate::error::{check_len, Error, Result};
use crate::grf::{sample_white_noise, WhiteNoise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// `apply(z + d) − apply(z)` without cancellation.
    fn increment(self, z: f64, d: f64) -> f64 {
        match self {
            Activation::Relu => match (z > 0.0, z + d > 0.0) {
                (true, true) => d,
                (false, false) => 0.0,
                _ => (z + d).max(0.0) - z.max(0.0),
            },
            Activation::Tanh => {
                let v = d.sinh() / ((z + d).cosh() * z.cosh());
                if v.is_finite() {
                    v
                } else {
                    (z + d).tanh() - z.tanh()
                }
            }
            Activation::Identity => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

/// Network topology. The output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: Vec<HiddenLayer>,
}

impl SurrogateSpec {
    /// Two hidden layers of 80 rectifier units predicting `m` observations plus `Q`.
    pub fn default_for(input_dim: usize, num_observations: usize) -> Self {
        Self {
            input_dim,
            output_dim: num_observations + 1,
            hidden_layers: vec![
                HiddenLayer {
                    width: 80,
                    activation: Activation::Relu,
                },
                HiddenLayer {
                    width: 80,
                    activation: Activation::Relu,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if self.hidden_layers.iter().any(|l| l.width == 0) {
            return Err(Error::InvalidArgument("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(self.hidden_layers.iter().map(|l| l.width));
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }

    fn activation(&self, layer: usize) -> Activation {
        self.hidden_layers
            .get(layer)
            .map_or(Activation::Identity, |l| l.activation)
    }
}

/// Weights `(out × in)` and biases of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: SurrogateSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Parameter-shaped gradient of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Network {
    /// Uniform initialisation on `±sqrt(6 / fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &SurrogateSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (out, inp) in spec.layer_dims() {
            let bound = (6.0 / inp as f64).sqrt();
            weights.push(Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound)));
            biases.push(Array1::zeros(out));
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
        })
    }

    pub fn zeros(spec: &SurrogateSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        Ok(Self {
            spec: spec.clone(),
            weights: dims.iter().map(|&(o, i)| Array2::zeros((o, i))).collect(),
            biases: dims.iter().map(|&(o, _)| Array1::zeros(o)).collect(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat parameter view, weights then biases per layer.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        check_len(self.num_parameters(), values.len())?;
        let mut it = values.iter();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for (p, v) in w.iter_mut().chain(b.iter_mut()).zip(&mut it) {
                *p = *v;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        check_len(self.spec.input_dim, x.ncols())
    }

    /// Batch forward pass, one sample per row.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.spec.activation(l);
            let mut z = a.dot(&w.t());
            z += b;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.spec.input_dim, x.len())?;
        let mut a = Array1::from(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.spec.activation(l);
            let mut z = w.dot(&a);
            z += b;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Mean squared error over all entries of the batch and its gradient.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        self.check_input(&x)?;
        check_len(x.nrows(), targets.nrows())?;
        check_len(self.spec.output_dim, targets.ncols())?;
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers);
        activations.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let act = self.spec.activation(l);
            let mut z = activations[l].dot(&w.t());
            z += b;
            activations.push(z.mapv(|v| act.apply(v)));
            pre.push(z);
        }
        let out = &activations[layers];
        let diff = out - &targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;

        let mut delta = diff * (2.0 / count);
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            let act = self.spec.activation(l);
            delta.zip_mut_with(&pre[l], |d, &z| *d *= act.derivative(z));
            gw[l] = delta.t().dot(&activations[l]);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.weights[l]);
            }
        }
        Ok((
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
        ))
    }

    pub fn loss(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let out = self.forward(x)?;
        check_len(out.len(), targets.len())?;
        let diff = out - targets;
        Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

/// Per-column affine map of targets to zero mean and unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Columns with (near) zero spread keep unit scale.
    pub fn from_targets(targets: ArrayView2<f64>) -> Result<Self> {
        if targets.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot normalise an empty target set".into()));
        }
        let mean = targets.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let scale = targets
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len(self.mean.len(), targets.ncols())?;
        let mut out = targets.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn denormalize_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = *v * s + m;
        }
    }

    pub fn denormalize(&self, values: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len(self.mean.len(), values.ncols())?;
        let mut out = values.to_owned();
        for mut row in out.rows_mut() {
            self.denormalize_row(row.as_slice_mut().expect("standard layout"));
        }
        Ok(out)
    }
}

/// Network inputs (whitened noise `W^{-1/2} ζ`) and raw `(y, Q)` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl TrainingSet {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        check_len(inputs.nrows(), targets.nrows())?;
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `n_train + n_valid` prior samples on `level` and evaluates the
/// forward model. Failed solves are redrawn; the count is returned.
pub fn generate_training_data(
    model: &ForwardModel,
    level: usize,
    n_train: usize,
    n_valid: usize,
    seed: u64,
) -> Result<(TrainingSet, TrainingSet, usize)> {
    if n_train == 0 || n_valid == 0 {
        return Err(Error::InvalidArgument(
            "training and validation sets need at least one sample".into(),
        ));
    }
    let hierarchy = model.sampler().hierarchy();
    let grid = hierarchy.level(level)?;
    let input_dim = grid.num_cells();
    let output_dim = model.probes().len() + 1;
    let total = n_train + n_valid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::zeros((total, input_dim));
    let mut targets = Array2::zeros((total, output_dim));
    let mut skipped = 0;
    let mut row = 0;
    while row < total {
        let zeta = sample_white_noise(hierarchy, level, &mut rng)?;
        match model.simulate(&zeta) {
            Ok((y, q)) => {
                let x = grid.apply_mass_inv_sqrt(&zeta.coefficients)?;
                inputs.row_mut(row).assign(&Array1::from(x));
                let mut t = targets.row_mut(row);
                for (j, v) in y.iter().chain([&q]).enumerate() {
                    t[j] = *v;
                }
                row += 1;
            }
            Err(_) => {
                skipped += 1;
                if skipped > 10 * total {
                    return Err(Error::InvalidArgument(
                        "forward model fails on almost every prior draw".into(),
                    ));
                }
            }
        }
    }
    let train = TrainingSet::new(
        inputs.slice(s![..n_train, ..]).to_owned(),
        targets.slice(s![..n_train, ..]).to_owned(),
    )?;
    let valid = TrainingSet::new(
        inputs.slice(s![n_train.., ..]).to_owned(),
        targets.slice(s![n_train.., ..]).to_owned(),
    )?;
    Ok((train, valid, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    /// Rate at the first main epoch; decays exponentially to
    /// `learning_rate * final_rate_ratio` at the last one.
    pub learning_rate: f64,
    pub final_rate_ratio: f64,
    /// Fine-tune rate as a fraction of the final main-phase rate.
    pub finetune_rate_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_main: 800,
            epochs_finetune: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            final_rate_ratio: 0.05,
            finetune_rate_ratio: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.learning_rate,
            self.final_rate_ratio,
            self.finetune_rate_ratio,
            self.epsilon,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "learning rates and epsilon must be positive".into(),
            ));
        }
        if self.finetune_rate_ratio >= 1.0 {
            return Err(Error::InvalidArgument(
                "fine-tune rate must be below the final main-phase rate".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam moments must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let final_rate = self.learning_rate * self.final_rate_ratio;
        if epoch < self.epochs_main {
            let t = if self.epochs_main > 1 {
                epoch as f64 / (self.epochs_main - 1) as f64
            } else {
                1.0
            };
            self.learning_rate * self.final_rate_ratio.powf(t)
        } else {
            final_rate * self.finetune_rate_ratio
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_mse: f64,
    pub valid_mse: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], rate: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Result of [`train`]: the best-validation network and the loss history.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub network: Network,
    pub normalization: Normalization,
    pub history: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    pub best_valid_mse: f64,
    /// Validation MSE of predicting the training mean, in normalised units.
    pub constant_valid_mse: f64,
}

/// Trains on normalised targets with mini-batch Adam.
pub fn train(
    spec: &SurrogateSpec,
    train_set: &TrainingSet,
    valid_set: &TrainingSet,
    config: &TrainConfig,
) -> Result<TrainingOutcome> {
    spec.validate()?;
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    check_len(spec.input_dim, train_set.inputs.ncols())?;
    check_len(spec.input_dim, valid_set.inputs.ncols())?;
    check_len(spec.output_dim, train_set.targets.ncols())?;
    check_len(spec.output_dim, valid_set.targets.ncols())?;

    let normalization = Normalization::from_targets(train_set.targets.view())?;
    let train_t = normalization.normalize(train_set.targets.view())?;
    let valid_t = normalization.normalize(valid_set.targets.view())?;
    let constant_valid_mse = valid_t.iter().map(|v| v * v).sum::<f64>() / valid_t.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = Network::init(spec, &mut rng)?;
    let mut best = network.clone();
    let mut best_valid_mse = network.loss(valid_set.inputs.view(), valid_t.view())?;
    let mut best_epoch = None;
    let mut params = network.parameters();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let total_epochs = config.epochs_main + config.epochs_finetune;

    for epoch in 0..total_epochs {
        let rate = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = train_set.inputs.select(Axis(0), batch);
            let t = train_t.select(Axis(0), batch);
            let (loss, grad) = network.loss_and_gradient(x.view(), t.view())?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            sum += loss * batch.len() as f64;
            adam.update(&mut params, &grad.flatten(), rate, config);
            network.set_parameters(&params)?;
        }
        let train_mse = sum / train_set.len() as f64;
        let valid_mse = network.loss(valid_set.inputs.view(), valid_t.view())?;
        if !valid_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        if valid_mse < best_valid_mse {
            best_valid_mse = valid_mse;
            best = network.clone();
            best_epoch = Some(epoch);
        }
        history.push(EpochLoss {
            epoch,
            learning_rate: rate,
            train_mse,
            valid_mse,
        });
    }
    Ok(TrainingOutcome {
        network: best,
        normalization,
        history,
        best_epoch,
        best_valid_mse,
        constant_valid_mse,
    })
}

/// Anything that predicts `(ŷ, Q̂)` for coarsest-level white noise.
pub trait Surrogate: Send + Sync {
    fn predict(&self, zeta: &WhiteNoise) -> Result<(Vec<f64>, f64)>;
}

/// Delegates to the PDE model, so `F̂ = F`.
#[derive(Debug, Clone)]
pub struct ExactSurrogate {
    model: ForwardModel,
}

impl ExactSurrogate {
    pub fn new(model: ForwardModel) -> Self {
        Self { model }
    }
}

impl Surrogate for ExactSurrogate {
    fn predict(&self, zeta: &WhiteNoise) -> Result<(Vec<f64>, f64)> {
        self.model.simulate(zeta)
    }
}

/// Wraps another surrogate and adds a fixed offset to every observation.
pub struct BiasedSurrogate<S> {
    inner: S,
    offset: f64,
}

impl<S: Surrogate> BiasedSurrogate<S> {
    pub fn new(inner: S, offset: f64) -> Self {
        Self { inner, offset }
    }
}

impl<S: Surrogate> Surrogate for BiasedSurrogate<S> {
    fn predict(&self, zeta: &WhiteNoise) -> Result<(Vec<f64>, f64)> {
        let (mut y, q) = self.inner.predict(zeta)?;
        for v in &mut y {
            *v += self.offset;
        }
        Ok((y, q))
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained network with its input whitening and target normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedSurrogate {
    pub format_version: u32,
    pub network: Network,
    pub normalization: Normalization,
    /// Per-input factor applied before the network (`W^{-1/2}`).
    pub input_scale: Vec<f64>,
    pub level_index: usize,
    pub training_seed: u64,
    pub final_train_mse: f64,
    pub final_valid_mse: f64,
}

impl TrainedSurrogate {
    pub fn from_outcome(
        outcome: TrainingOutcome,
        input_scale: Vec<f64>,
        level_index: usize,
        training_seed: u64,
    ) -> Result<Self> {
        check_len(outcome.network.spec.input_dim, input_scale.len())?;
        let final_train_mse = outcome.best_epoch.map_or(f64::NAN, |e| outcome.history[e].train_mse);
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            network: outcome.network,
            normalization: outcome.normalization,
            input_scale,
            level_index,
            training_seed,
            final_train_mse,
            final_valid_mse: outcome.best_valid_mse,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                self.format_version
            )));
        }
        let spec = &self.network.spec;
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        let dims = spec.layer_dims();
        let shapes_ok = self.network.weights.len() == dims.len()
            && self.network.biases.len() == dims.len()
            && dims
                .iter()
                .zip(self.network.weights.iter().zip(&self.network.biases))
                .all(|(&(o, i), (w, b))| w.dim() == (o, i) && b.len() == o);
        if !shapes_ok {
            return Err(Error::Format("weight shapes do not match the network spec".into()));
        }
        if self.input_scale.len() != spec.input_dim
            || self.normalization.mean.len() != spec.output_dim
            || self.normalization.scale.len() != spec.output_dim
        {
            return Err(Error::Format("scaling vectors do not match the network spec".into()));
        }
        let finite = self
            .network
            .parameters()
            .iter()
            .chain(&self.input_scale)
            .chain(&self.normalization.mean)
            .chain(&self.normalization.scale)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl Surrogate for TrainedSurrogate {
    fn predict(&self, zeta: &WhiteNoise) -> Result<(Vec<f64>, f64)> {
        if zeta.level_index != self.level_index {
            return Err(Error::LevelMismatch {
                coarse: self.level_index,
                fine: zeta.level_index,
            });
        }
        check_len(self.input_scale.len(), zeta.coefficients.len())?;
        let x: Vec<f64> = zeta
            .coefficients
            .iter()
            .zip(&self.input_scale)
            .map(|(z, s)| z * s)
            .collect();
        let mut out = self.network.forward_one(&x)?;
        self.normalization.denormalize_row(&mut out);
        let q = out.pop().expect("output has the QoI column");
        Ok((out, q))
    }
}

/// Largest relative difference between backpropagated gradients and central
/// differences (step `1e-6`) over up to `max_params` parameters of a random
/// network on a random batch. Relative errors use `max(|a|, |n|, 1e-7)` as
/// denominator so parameters with vanishing gradients compare absolutely.
pub fn gradient_check(spec: &SurrogateSpec, max_params: usize, seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-6;
    const FLOOR: f64 = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = Network::init(spec, &mut rng)?;
    let batch = 8;
    let x = Array2::from_shape_fn((batch, spec.input_dim), |_| rng.random_range(-1.0..1.0));
    let t = Array2::from_shape_fn((batch, spec.output_dim), |_| rng.random_range(-1.0..1.0));
    gradient_check_at(&network, x.view(), t.view(), max_params, STEP, FLOOR, &mut rng)
}

/// Location of a flat parameter index.
struct ParamSlot {
    layer: usize,
    unit: usize,
    /// Input column for weights, `None` for biases.
    input: Option<usize>,
}

fn locate(network: &Network, mut index: usize) -> ParamSlot {
    for (layer, (w, b)) in network.weights.iter().zip(&network.biases).enumerate() {
        if index < w.len() {
            return ParamSlot {
                layer,
                unit: index / w.ncols(),
                input: Some(index % w.ncols()),
            };
        }
        index -= w.len();
        if index < b.len() {
            return ParamSlot {
                layer,
                unit: index,
                input: None,
            };
        }
        index -= b.len();
    }
    unreachable!("index within num_parameters")
}

/// `L(θ + h e_i) − L(θ)`, propagated through the layers as a difference so
/// that the result is accurate relative to itself rather than to `L`.
fn loss_increment(
    network: &Network,
    activations: &[Array2<f64>],
    pre: &[Array2<f64>],
    targets: ArrayView2<f64>,
    slot: &ParamSlot,
    h: f64,
) -> f64 {
    let layers = network.weights.len();
    let batch = targets.nrows();
    let mut dz = Array2::zeros(pre[slot.layer].raw_dim());
    for r in 0..batch {
        dz[[r, slot.unit]] = match slot.input {
            Some(k) => h * activations[slot.layer][[r, k]],
            None => h,
        };
    }
    let mut da = dz;
    for l in slot.layer..layers {
        let act = network.spec.activation(l);
        da.zip_mut_with(&pre[l], |d, &z| *d = act.increment(z, *d));
        if l + 1 < layers {
            da = da.dot(&network.weights[l + 1].t());
        }
    }
    let out = &activations[layers];
    let count = out.len() as f64;
    let mut sum = 0.0;
    for ((d, o), t) in da.iter().zip(out.iter()).zip(targets.iter()) {
        sum += d * (2.0 * (o - t) + d);
    }
    sum / count
}

pub fn gradient_check_at<R: Rng + ?Sized>(
    network: &Network,
    x: ArrayView2<f64>,
    t: ArrayView2<f64>,
    max_params: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> Result<f64> {
    let (_, grad) = network.loss_and_gradient(x, t)?;
    let analytic = grad.flatten();
    let layers = network.weights.len();
    let mut activations = vec![x.to_owned()];
    let mut pre = Vec::with_capacity(layers);
    for (l, (w, b)) in network.weights.iter().zip(&network.biases).enumerate() {
        let act = network.spec.activation(l);
        let mut z = activations[l].dot(&w.t());
        z += b;
        activations.push(z.mapv(|v| act.apply(v)));
        pre.push(z);
    }
    let mut indices: Vec<usize> = (0..analytic.len()).collect();
    indices.shuffle(rng);
    indices.truncate(max_params.max(1));
    let mut worst: f64 = 0.0;
    for &i in &indices {
        let slot = locate(network, i);
        let plus = loss_increment(network, &activations, &pre, t, &slot, step);
        let minus = loss_increment(network, &activations, &pre, t, &slot, -step);
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
