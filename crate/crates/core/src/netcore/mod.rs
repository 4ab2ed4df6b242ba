//! A small fully connected rectifier network with a softmax output, trained
//! by plain reverse-mode differentiation and momentum SGD.
//!
//! Dilution sits after every hidden rectifier: in training mode each hidden
//! layer draws a [`CoefficientBatch`] per forward pass, either one
//! coefficient per example and unit (row-major, `B * width` values) or one
//! per unit broadcast over the batch, as set by [`MaskSharing`]. The output
//! layer is never diluted, and evaluation mode applies the identity without
//! touching any stream.

mod optim;
mod snapshot;
mod tensor;

pub use optim::{sgd_momentum_step, LrSchedule, OptimizerState};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC};
pub use tensor::{matmul, Layout, Tensor};

pub use crate::dilution::MaskSharing;
use crate::dilution::{sample_coefficients, CoefficientBatch, DilutionConfig};
use crate::error::{Error, Result};
use crate::stochastics::RngStream;

/// Layer widths of the replication network: 784 inputs, hidden layers of
/// 128, 256 and 512 rectifiers, 10 softmax outputs.
pub const DEFAULT_WIDTHS: [usize; 5] = [784, 128, 256, 512, 10];

/// Architecture plus one dilution config per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub dilution: Vec<DilutionConfig>,
    pub sharing: MaskSharing,
}

impl MlpSpec {
    /// Same dilution config after every hidden layer.
    pub fn uniform(widths: &[usize], dilution: DilutionConfig) -> Self {
        MlpSpec {
            widths: widths.to_vec(),
            dilution: vec![dilution; widths.len().saturating_sub(2)],
            sharing: MaskSharing::default(),
        }
    }

    pub fn with_sharing(mut self, sharing: MaskSharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn mnist(dilution: DilutionConfig) -> Self {
        Self::uniform(&DEFAULT_WIDTHS, dilution)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Shape("a network needs at least two widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Shape(format!("zero width in {:?}", self.widths)));
        }
        if self.dilution.len() != self.widths.len() - 2 {
            return Err(Error::Shape(format!(
                "{} dilution configs for {} hidden layers",
                self.dilution.len(),
                self.widths.len() - 2
            )));
        }
        Ok(())
    }
}

/// One affine layer: `weights` is `(out, in)`, `bias` is `(out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    layers: Vec<Dense>,
    dilution: Vec<DilutionConfig>,
    sharing: MaskSharing,
    /// Bumped on every parameter mutation; forward caches remember it.
    version: u64,
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.dilution == other.dilution
            && self.sharing == other.sharing
    }
}

impl MlpModel {
    /// Assembles a model from explicit layers, checking that consecutive
    /// shapes chain. Masks are drawn per example until
    /// [`set_sharing`](Self::set_sharing) says otherwise.
    pub fn from_layers(layers: Vec<Dense>, dilution: Vec<DilutionConfig>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weights.shape().len() != 2 || layer.bias.shape() != [layer.fan_out()] {
                return Err(Error::Shape(format!(
                    "layer {}: weights {:?} with bias {:?}",
                    l + 1,
                    layer.weights.shape(),
                    layer.bias.shape()
                )));
            }
            if l > 0 && layers[l - 1].fan_out() != layer.fan_in() {
                return Err(Error::Shape(format!(
                    "layer {} expects {} inputs but layer {} has {} outputs",
                    l + 1,
                    layer.fan_in(),
                    l,
                    layers[l - 1].fan_out()
                )));
            }
        }
        if dilution.len() != layers.len() - 1 {
            return Err(Error::Shape(format!(
                "{} dilution configs for {} hidden layers",
                dilution.len(),
                layers.len() - 1
            )));
        }
        Ok(MlpModel {
            layers,
            dilution,
            sharing: MaskSharing::default(),
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the parameters. Invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn dilution(&self) -> &[DilutionConfig] {
        &self.dilution
    }

    pub fn set_dilution(&mut self, dilution: Vec<DilutionConfig>) -> Result<()> {
        if dilution.len() != self.hidden_count() {
            return Err(Error::Shape(format!(
                "{} dilution configs for {} hidden layers",
                dilution.len(),
                self.hidden_count()
            )));
        }
        self.dilution = dilution;
        Ok(())
    }

    pub fn sharing(&self) -> MaskSharing {
        self.sharing
    }

    pub fn set_sharing(&mut self, sharing: MaskSharing) {
        self.sharing = sharing;
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Dense::fan_out));
        w
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }
}

/// He-style initialisation: weights `N(0, 2 / fan_in)`, biases zero.
/// Weights are drawn layer by layer in row-major order.
pub fn init_variance_scaling(spec: &MlpSpec, stream: &mut RngStream) -> Result<MlpModel> {
    spec.validate()?;
    let layers = spec
        .widths
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| scale * stream.standard_normal())
                .collect();
            Ok(Dense {
                weights: Tensor::from_vec(&[fan_out, fan_in], weights)?,
                bias: Tensor::zeros(&[fan_out]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = MlpModel::from_layers(layers, spec.dilution.clone())?;
    model.sharing = spec.sharing;
    Ok(model)
}

/// How hidden-layer dilution behaves during a forward pass.
pub enum ForwardMode<'a> {
    /// Draw fresh coefficients for every hidden layer, in layer order.
    Train(&'a mut RngStream),
    /// Identity transform; the pass is stream-free.
    Eval,
    /// Reuse previously drawn coefficients, one batch per hidden layer.
    Replay(&'a [CoefficientBatch]),
}

/// Captured hidden-layer outputs: post-dilution in training and replay
/// passes, plain rectifier outputs in evaluation passes.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub outputs: Vec<Tensor>,
}

/// Intermediate values needed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    differentiable: bool,
    model_version: u64,
    inputs: Vec<Tensor>,
    activations: Vec<Tensor>,
    coefficients: Vec<Option<CoefficientBatch>>,
    logits: Tensor,
}

impl ForwardCache {
    /// Coefficients drawn for each hidden layer (`None` where the transform
    /// was the identity).
    pub fn coefficients(&self) -> &[Option<CoefficientBatch>] {
        &self.coefficients
    }

    /// Coefficients as concrete batches, identity where none were drawn;
    /// suitable for [`ForwardMode::Replay`].
    pub fn coefficient_batches(&self) -> Vec<CoefficientBatch> {
        self.coefficients
            .iter()
            .zip(&self.activations)
            .map(|(c, a)| {
                c.clone()
                    .unwrap_or_else(|| CoefficientBatch::identity(a.cols()))
            })
            .collect()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Runs the network on a `(B, inputs)` batch and returns `(B, outputs)`
/// logits plus the cache for [`backward`].
pub fn forward(
    model: &MlpModel,
    batch: &Tensor,
    mode: ForwardMode<'_>,
    mut probe: Option<&mut Probe>,
) -> Result<(Tensor, ForwardCache)> {
    if batch.shape().len() != 2 || batch.cols() != model.input_width() {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match input width {}",
            batch.shape(),
            model.input_width()
        )));
    }
    if let ForwardMode::Replay(batches) = &mode {
        if batches.len() != model.hidden_count() {
            return Err(Error::Shape(format!(
                "{} replay coefficient batches for {} hidden layers",
                batches.len(),
                model.hidden_count()
            )));
        }
    }
    if let Some(p) = probe.as_deref_mut() {
        p.outputs.clear();
    }

    let differentiable = !matches!(mode, ForwardMode::Eval);
    let (mut stream, replay) = match mode {
        ForwardMode::Train(s) => (Some(s), None),
        ForwardMode::Replay(b) => (None, Some(b)),
        ForwardMode::Eval => (None, None),
    };

    let last = model.layers.len() - 1;
    let mut inputs = Vec::new();
    let mut activations = Vec::new();
    let mut coefficients = Vec::new();
    let mut x = batch.clone();

    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = matmul(&x, Layout::AsIs, &layer.weights, Layout::Transposed)?;
        let bias = layer.bias.data();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        if !z.is_finite() {
            return Err(Error::Numeric { layer: l + 1 });
        }
        if differentiable {
            inputs.push(x);
        }
        if l == last {
            x = z;
            break;
        }

        let mut a = z;
        for v in a.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let width = a.cols();
        let rows = a.rows();
        let coeff = match (&mut stream, replay) {
            (Some(s), _) => {
                let cfg = &model.dilution[l];
                if cfg.is_identity() {
                    None
                } else {
                    let n = match model.sharing {
                        MaskSharing::PerExample => rows * width,
                        MaskSharing::PerBatch => width,
                    };
                    Some(sample_coefficients(cfg, n, s)?)
                }
            }
            (None, Some(batches)) => {
                let b = &batches[l];
                if b.len() != width && b.len() != rows * width {
                    return Err(Error::Shape(format!(
                        "replay batch for layer {} has {} coefficients, need {width} or {}",
                        l + 1,
                        b.len(),
                        rows * width
                    )));
                }
                Some(b.clone())
            }
            (None, None) => None,
        };
        let y = match &coeff {
            Some(c) => {
                let mut y = a.clone();
                for r in 0..rows {
                    let cs = coefficient_row(c.coefficients(), r, width);
                    for (v, c) in y.row_mut(r).iter_mut().zip(cs) {
                        *v *= c;
                    }
                }
                y
            }
            None => a.clone(),
        };
        if let Some(p) = probe.as_deref_mut() {
            p.outputs.push(y.clone());
        }
        if differentiable {
            activations.push(a);
            coefficients.push(coeff);
        }
        x = y;
    }

    let cache = ForwardCache {
        differentiable,
        model_version: model.version,
        inputs,
        activations,
        coefficients,
        logits: x.clone(),
    };
    Ok((x, cache))
}

/// Coefficients for batch row `r`: the whole vector when it is shared,
/// else that row's slice.
fn coefficient_row(cs: &[f64], r: usize, width: usize) -> &[f64] {
    if cs.len() == width {
        cs
    } else {
        &cs[r * width..(r + 1) * width]
    }
}

/// Mean cross-entropy (nats) and error rate of `(B, classes)` logits.
///
/// Predictions take the first index of the maximum logit.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, f64)> {
    check_labels(logits, labels)?;
    let mut cost = 0.0;
    let mut wrong = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let (argmax, max) =
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
        let sum_exp: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
        cost += max + libm::log(sum_exp) - row[label as usize];
        if argmax != label as usize {
            wrong += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((cost / n, wrong as f64 / n))
}

fn check_labels(logits: &Tensor, labels: &[u8]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::Data(format!(
            "label {bad} outside [0, {}]",
            classes - 1
        )));
    }
    Ok(())
}

/// Gradient of the mean cross-entropy with respect to the logits.
fn softmax_cross_entropy_grad(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    check_labels(logits, labels)?;
    let inv_n = 1.0 / labels.len() as f64;
    let mut grad = logits.clone();
    for (r, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v *= inv_n / sum;
        }
        row[label as usize] -= inv_n;
    }
    Ok(grad)
}

/// Parameter gradients, laid out like [`MlpModel::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Exact gradients of the mean cross-entropy for the pass recorded in
/// `cache`, holding its dilution coefficients fixed.
pub fn backward(model: &MlpModel, cache: &ForwardCache, labels: &[u8]) -> Result<Gradients> {
    if !cache.differentiable {
        return Err(Error::Usage(
            "backward needs a cache from a training or replay forward pass".into(),
        ));
    }
    if cache.model_version != model.version || cache.inputs.len() != model.layers.len() {
        return Err(Error::Usage(
            "forward cache is stale: the model changed since the forward pass".into(),
        ));
    }

    let count = model.layers.len();
    let mut weights = Vec::with_capacity(count);
    let mut biases = Vec::with_capacity(count);
    let mut delta = softmax_cross_entropy_grad(&cache.logits, labels)?;

    for l in (0..count).rev() {
        let layer = &model.layers[l];
        weights.push(matmul(
            &delta,
            Layout::Transposed,
            &cache.inputs[l],
            Layout::AsIs,
        )?);
        let mut db = vec![0.0; layer.fan_out()];
        for r in 0..delta.rows() {
            for (acc, v) in db.iter_mut().zip(delta.row(r)) {
                *acc += v;
            }
        }
        biases.push(Tensor::from_vec(&[layer.fan_out()], db)?);

        if l == 0 {
            break;
        }
        let mut upstream = matmul(&delta, Layout::AsIs, &layer.weights, Layout::AsIs)?;
        let h = l - 1;
        let act = &cache.activations[h];
        let coeff = cache.coefficients[h].as_ref().map(|c| c.coefficients());
        let width = act.cols();
        for r in 0..upstream.rows() {
            let a_row = act.row(r);
            let c_row = coeff.map(|cs| coefficient_row(cs, r, width));
            let g_row = upstream.row_mut(r);
            for j in 0..g_row.len() {
                let c = c_row.map_or(1.0, |cs| cs[j]);
                // rectifier derivative is taken as 0 at exactly 0
                g_row[j] = if a_row[j] > 0.0 { g_row[j] * c } else { 0.0 };
            }
        }
        delta = upstream;
    }
    weights.reverse();
    biases.reverse();
    Ok(Gradients { weights, biases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dilution::DilutionMode;

    fn toy_spec(mode: DilutionMode) -> MlpSpec {
        MlpSpec::uniform(
            &[4, 3, 3, 3, 2],
            DilutionConfig::new(mode, 0.3, 0.5).unwrap(),
        )
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = RngStream::new(seed, 9);
        Tensor::from_vec(
            &[rows, cols],
            (0..rows * cols).map(|_| s.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_statistics() {
        let mut s = RngStream::new(1, 0);
        let model = init_variance_scaling(&MlpSpec::mnist(DilutionConfig::none()), &mut s).unwrap();
        assert_eq!(model.widths(), DEFAULT_WIDTHS.to_vec());
        for layer in model.layers() {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
            let w = layer.weights.data();
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let want = 2.0 / layer.fan_in() as f64;
            assert!((var / want - 1.0).abs() < 0.2, "var {var} want {want}");
        }
        let mut again = RngStream::new(1, 0);
        let twin =
            init_variance_scaling(&MlpSpec::mnist(DilutionConfig::none()), &mut again).unwrap();
        assert_eq!(model, twin);
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let spec = MlpSpec::uniform(&[784, 16, 10], DilutionConfig::none());
        let mut s = RngStream::new(0, 0);
        let mut model = init_variance_scaling(&spec, &mut s).unwrap();
        for layer in model.layers_mut() {
            layer.weights.data_mut().fill(0.0);
        }
        let batch = random_batch(5, 784, 3);
        let (logits, _) = forward(&model, &batch, ForwardMode::Eval, None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (cost, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 4]).unwrap();
        assert!((cost - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_forward() {
        // 2 inputs -> 1 hidden unit -> 2 outputs
        let hidden = Dense {
            weights: Tensor::from_vec(&[1, 2], vec![1.0, -2.0]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        };
        let out = Dense {
            weights: Tensor::from_vec(&[2, 1], vec![3.0, -1.0]).unwrap(),
            bias: Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap(),
        };
        let model = MlpModel::from_layers(vec![hidden, out], vec![DilutionConfig::none()]).unwrap();
        let batch = Tensor::from_vec(&[2, 2], vec![2.0, 0.25, 0.0, 1.0]).unwrap();
        let (logits, _) = forward(&model, &batch, ForwardMode::Eval, None).unwrap();
        // row 0: h = relu(2 - 0.5 + 0.5) = 2 -> (6, -1)
        // row 1: h = relu(0 - 2 + 0.5) = 0 -> (0, 1)
        assert_eq!(logits.data(), &[6.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[10, 10]);
        let labels: Vec<u8> = (0..10).collect();
        let (cost, err) = softmax_cross_entropy(&uniform, &labels).unwrap();
        assert!((cost - 10f64.ln()).abs() < 1e-12);
        // first-index tie break predicts class 0 everywhere
        assert!((err - 0.9).abs() < 1e-12);

        let mut confident = Tensor::zeros(&[2, 10]);
        confident.row_mut(0)[3] = 1e3;
        confident.row_mut(1)[7] = 1e3;
        let (cost, err) = softmax_cross_entropy(&confident, &[3, 7]).unwrap();
        assert!(cost < 1e-12 && err == 0.0);

        // direct evaluation: -log softmax
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let direct = |row: [f64; 3], y: usize| {
            -(row[y].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
        };
        let want = (direct([1.0, 2.0, 0.5], 0) + direct([-1.0, 0.0, 3.0], 2)) / 2.0;
        let (cost, err) = softmax_cross_entropy(&logits, &[0, 2]).unwrap();
        assert!((cost - want).abs() < 1e-14);
        assert_eq!(err, 0.5);

        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn identity_modes_train_like_eval() {
        let mut s = RngStream::new(2, 0);
        let model = init_variance_scaling(&toy_spec(DilutionMode::None), &mut s).unwrap();
        let batch = random_batch(6, 4, 1);
        let mut d = RngStream::new(3, 0);
        let (train, _) = forward(&model, &batch, ForwardMode::Train(&mut d), None).unwrap();
        let (eval, _) = forward(&model, &batch, ForwardMode::Eval, None).unwrap();
        assert_eq!(train, eval);
        assert_eq!(d.position(), 0);
    }

    #[test]
    fn eval_is_stream_free_and_not_differentiable() {
        let mut s = RngStream::new(2, 0);
        let model = init_variance_scaling(&toy_spec(DilutionMode::Qsd), &mut s).unwrap();
        let batch = random_batch(3, 4, 1);
        let (_, cache) = forward(&model, &batch, ForwardMode::Eval, None).unwrap();
        assert!(matches!(
            backward(&model, &cache, &[0, 1, 0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut s = RngStream::new(2, 0);
        let mut model = init_variance_scaling(&toy_spec(DilutionMode::Standard), &mut s).unwrap();
        let batch = random_batch(3, 4, 1);
        let (_, cache) = forward(&model, &batch, ForwardMode::Train(&mut s), None).unwrap();
        model.layers_mut()[0].bias.data_mut()[0] = 0.1;
        assert!(matches!(
            backward(&model, &cache, &[0, 1, 0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn shape_errors() {
        let mut s = RngStream::new(2, 0);
        let model = init_variance_scaling(&toy_spec(DilutionMode::None), &mut s).unwrap();
        let wrong = random_batch(3, 5, 1);
        assert!(matches!(
            forward(&model, &wrong, ForwardMode::Eval, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut s = RngStream::new(2, 0);
        let mut model = init_variance_scaling(&toy_spec(DilutionMode::None), &mut s).unwrap();
        model.layers_mut()[1].weights.data_mut()[0] = f64::INFINITY;
        let batch = random_batch(2, 4, 1);
        match forward(&model, &batch, ForwardMode::Eval, None) {
            Err(Error::Numeric { layer }) => assert!(layer >= 2),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn masked_unit_blocks_gradient() {
        let mut s = RngStream::new(4, 0);
        let model = init_variance_scaling(&toy_spec(DilutionMode::Standard), &mut s).unwrap();
        let batch = random_batch(5, 4, 2);
        // unit 1 of the first hidden layer is masked out
        let masked =
            CoefficientBatch::from_parts(vec![0.7; 3], vec![true, false, true], vec![1.0 / 0.7; 3])
                .unwrap();
        let replay = vec![
            masked,
            CoefficientBatch::identity(3),
            CoefficientBatch::identity(3),
        ];
        let (_, cache) = forward(&model, &batch, ForwardMode::Replay(&replay), None).unwrap();
        let grads = backward(&model, &cache, &[0, 1, 1, 0, 1]).unwrap();
        assert!(grads.weights[0].row(1).iter().all(|&g| g == 0.0));
        assert_eq!(grads.biases[0].data()[1], 0.0);
        // and that unit contributes nothing to the next layer's weight gradient
        for r in 0..3 {
            assert_eq!(grads.weights[1].row(r)[1], 0.0);
        }
    }

    #[test]
    fn none_and_zero_rate_standard_share_gradients() {
        let batch = random_batch(4, 4, 5);
        let labels = [0, 1, 1, 0];
        let grads = |cfg: DilutionConfig| {
            let mut init = RngStream::new(11, 0);
            let spec = MlpSpec::uniform(&[4, 3, 3, 3, 2], cfg);
            let model = init_variance_scaling(&spec, &mut init).unwrap();
            let mut d = RngStream::new(12, 0);
            let (_, cache) = forward(&model, &batch, ForwardMode::Train(&mut d), None).unwrap();
            backward(&model, &cache, &labels).unwrap()
        };
        assert_eq!(
            grads(DilutionConfig::none()),
            grads(DilutionConfig::standard(0.0).unwrap())
        );
    }

    #[test]
    fn probe_captures_post_dilution_outputs() {
        for sharing in [MaskSharing::PerExample, MaskSharing::PerBatch] {
            let mut s = RngStream::new(4, 0);
            let spec = toy_spec(DilutionMode::Qsd).with_sharing(sharing);
            let model = init_variance_scaling(&spec, &mut s).unwrap();
            let batch = random_batch(5, 4, 2);
            let mut probe = Probe::default();
            let (_, cache) =
                forward(&model, &batch, ForwardMode::Train(&mut s), Some(&mut probe)).unwrap();
            assert_eq!(probe.outputs.len(), 3);
            for (h, out) in probe.outputs.iter().enumerate() {
                let act = &cache.activations[h];
                let c = cache.coefficients[h].as_ref().unwrap().coefficients();
                let per_row = sharing == MaskSharing::PerExample;
                assert_eq!(c.len(), if per_row { 5 * 3 } else { 3 });
                for r in 0..out.rows() {
                    for j in 0..out.cols() {
                        let cij = if per_row { c[r * 3 + j] } else { c[j] };
                        assert_eq!(out.row(r)[j], act.row(r)[j] * cij);
                    }
                }
            }
        }
    }

    #[test]
    fn per_example_masks_differ_between_rows() {
        let mut s = RngStream::new(5, 0);
        let model = init_variance_scaling(&toy_spec(DilutionMode::Standard), &mut s).unwrap();
        let batch = random_batch(64, 4, 3);
        let (_, cache) = forward(&model, &batch, ForwardMode::Train(&mut s), None).unwrap();
        let masks = cache.coefficients[0].as_ref().unwrap().masks();
        let rows: std::collections::BTreeSet<&[bool]> = masks.chunks(3).collect();
        assert!(rows.len() > 1);
    }
}
