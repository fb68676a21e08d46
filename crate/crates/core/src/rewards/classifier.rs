use super::train::{fit_loop, image_matrix, FitConfig, Mlp};
use super::{check_images, RewardError};
use crate::evalkit::{auroc, EvalError};
use crate::numcore::{Graph, GraphError, ParamStore, Precision, RngStream, Tensor, Var};
use crate::phantom::{Image, PhantomSample, K_LABELS};

pub const CLASSIFIER_PREFIX: &str = "cls";

/// Width of the penultimate layer, also used as the feature space for the
/// Fréchet distance.
pub const FEATURE_DIM: usize = 16;

/// Held-out discrimination per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub per_class: [f64; K_LABELS],
    pub macro_auroc: f64,
    pub n: usize,
}

impl ClassifierReport {
    pub fn passes_gate(&self) -> bool {
        self.macro_auroc >= 0.95
    }
}

/// Frozen multi-label perceptron classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    store: ParamStore,
    net: Mlp,
}

impl ClassifierModel {
    pub const HIDDEN: usize = 128;

    fn widths(image_dim: usize) -> Vec<usize> {
        vec![image_dim, Self::HIDDEN, FEATURE_DIM, K_LABELS]
    }

    pub fn init(image_dim: usize, precision: Precision, stream: &mut RngStream) -> Result<Self, RewardError> {
        let net = Mlp::new(CLASSIFIER_PREFIX, &Self::widths(image_dim));
        let mut store = ParamStore::new(precision);
        net.init(&mut store, stream)?;
        Ok(Self { store, net })
    }

    pub fn from_store(store: ParamStore, image_dim: usize) -> Result<Self, RewardError> {
        let net = Mlp::new(CLASSIFIER_PREFIX, &Self::widths(image_dim));
        net.check(&store)?;
        Ok(Self { store, net })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn image_dim(&self) -> usize {
        self.net.widths[0]
    }

    /// `(features [B, 16], logits [B, K])`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var), GraphError> {
        self.net.forward_with_features(g, x)
    }

    /// Mean per-class logistic loss.
    pub fn loss(&self, g: &mut Graph<'_>, images: &Tensor, labels: &[[u8; K_LABELS]]) -> Result<Var, GraphError> {
        logistic_loss(&self.net, g, images.clone(), labels.iter())
    }

    fn run(&self, images: &[&Image]) -> Result<(Vec<f64>, Vec<f64>), RewardError> {
        check_images(images, self.image_dim())?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(image_matrix(images))?;
        let (f, z) = self.forward(&mut g, x)?;
        Ok((g.value(f).data().to_vec(), g.value(z).data().to_vec()))
    }

    /// Sigmoid probabilities, one `K`-vector per image.
    pub fn probabilities(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, RewardError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (_, z) = self.run(images)?;
        Ok(z.chunks(K_LABELS).map(|r| r.iter().map(|&v| sigmoid(v)).collect()).collect())
    }

    /// Penultimate-layer activations, one 16-vector per image.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, RewardError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (f, _) = self.run(images)?;
        Ok(f.chunks(FEATURE_DIM).map(<[f64]>::to_vec).collect())
    }

    /// Per-class and macro AUROC on labelled samples.
    pub fn evaluate(&self, samples: &[PhantomSample]) -> Result<ClassifierReport, EvalError> {
        if samples.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut probs = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            probs.extend(self.probabilities(&imgs)?);
        }
        let mut per_class = [0.0; K_LABELS];
        for (k, slot) in per_class.iter_mut().enumerate() {
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.labels[k]).collect();
            *slot = auroc(&scores, &labels)?;
        }
        Ok(ClassifierReport {
            macro_auroc: per_class.iter().sum::<f64>() / K_LABELS as f64,
            per_class,
            n: samples.len(),
        })
    }
}

/// Logistic function with the result pulled strictly inside `(0, 1)`.
fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn logistic_loss<'a>(
    net: &Mlp,
    g: &mut Graph<'_>,
    images: Tensor,
    labels: impl Iterator<Item = &'a [u8; K_LABELS]>,
) -> Result<Var, GraphError> {
    let x = g.constant(images)?;
    let (_, z) = net.forward_with_features(g, x)?;
    let t: Vec<f64> = labels.flat_map(|l| l.iter().map(|&b| f64::from(b))).collect();
    g.bce_with_logits(z, &t)
}

pub fn fit_classifier(train: &[PhantomSample], stream: &mut RngStream, cfg: &FitConfig) -> Result<ClassifierModel, RewardError> {
    let first = train.first().ok_or(RewardError::EmptyTrainingSet)?;
    let dim = first.image.pixels().len();
    let imgs: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    check_images(&imgs, dim)?;
    let mut model = ClassifierModel::init(dim, Precision::F32, &mut stream.derive("init"))?;
    let net = model.net.clone();
    let mut order_stream = stream.derive("order");
    fit_loop(&mut model.store, train.len(), cfg, &mut order_stream, |g, idx| {
        let batch: Vec<&Image> = idx.iter().map(|&i| imgs[i]).collect();
        logistic_loss(&net, g, image_matrix(&batch), idx.iter().map(|&i| &train[i].labels))
    })?;
    Ok(model)
}
