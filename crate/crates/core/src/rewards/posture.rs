use super::train::{fit_loop, image_matrix, FitConfig, Mlp};
use super::{check_images, RewardError};
use crate::numcore::{Graph, GraphError, ParamStore, Precision, RngStream, Tensor, Var};
use crate::phantom::{Image, PhantomSample, PostureParams, MAX_ROTATION, MAX_TRANSLATION};

pub const POSTURE_PREFIX: &str = "posture";

/// Per-component scaling that maps the sampled posture ranges to roughly
/// unit targets: `(s − 1)/0.15`, `t/0.1`, `Θ/0.15`.
const TARGET_SCALE: [f64; 5] = [0.15, 0.15, MAX_TRANSLATION, MAX_TRANSLATION, MAX_ROTATION];
const TARGET_SHIFT: [f64; 5] = [1.0, 1.0, 0.0, 0.0, 0.0];

/// Held-out mean absolute errors. `scale` pools both axes, `shift` both
/// translation components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostureReport {
    pub scale: f64,
    pub shift: f64,
    pub rotation: f64,
    pub n: usize,
}

impl PostureReport {
    pub fn passes_gate(&self) -> bool {
        self.shift < 0.02 && self.rotation < 0.02 && self.scale < 0.03
    }
}

/// Frozen perceptron regressor from a flattened image to `ψ̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct PostureModel {
    store: ParamStore,
    net: Mlp,
}

fn clamp_psi(raw: [f64; 5]) -> PostureParams {
    PostureParams {
        s_x: raw[0].clamp(0.5, 1.5),
        s_y: raw[1].clamp(0.5, 1.5),
        t_x: raw[2].clamp(-0.5, 0.5),
        t_y: raw[3].clamp(-0.5, 0.5),
        theta: raw[4].clamp(-std::f64::consts::PI, std::f64::consts::PI),
    }
}

impl PostureModel {
    pub const HIDDEN: [usize; 2] = [256, 64];

    fn widths(image_dim: usize) -> Vec<usize> {
        vec![image_dim, Self::HIDDEN[0], Self::HIDDEN[1], 5]
    }

    /// Untrained model with freshly initialized weights.
    pub fn init(image_dim: usize, precision: Precision, stream: &mut RngStream) -> Result<Self, RewardError> {
        let net = Mlp::new(POSTURE_PREFIX, &Self::widths(image_dim));
        let mut store = ParamStore::new(precision);
        net.init(&mut store, stream)?;
        Ok(Self { store, net })
    }

    /// Rebuilds a model from stored weights (for example a checkpoint).
    pub fn from_store(store: ParamStore, image_dim: usize) -> Result<Self, RewardError> {
        let net = Mlp::new(POSTURE_PREFIX, &Self::widths(image_dim));
        net.check(&store)?;
        Ok(Self { store, net })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn image_dim(&self) -> usize {
        self.net.widths[0]
    }

    /// Normalized regression output `[B, 5]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, GraphError> {
        self.net.forward(g, x)
    }

    /// Mean squared error against normalized targets.
    pub fn loss(&self, g: &mut Graph<'_>, images: &Tensor, targets: &[&PostureParams]) -> Result<Var, GraphError> {
        squared_error(&self.net, g, images.clone(), targets)
    }

    /// Clamped `ψ̂` for every image.
    pub fn estimate_batch(&self, images: &[&Image]) -> Result<Vec<PostureParams>, RewardError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        check_images(images, self.image_dim())?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(image_matrix(images))?;
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y)
            .data()
            .chunks(5)
            .map(|r| {
                let mut raw = [0.0; 5];
                for k in 0..5 {
                    raw[k] = TARGET_SHIFT[k] + TARGET_SCALE[k] * r[k];
                }
                clamp_psi(raw)
            })
            .collect())
    }

    /// Mean absolute errors on labelled samples.
    pub fn evaluate(&self, samples: &[PhantomSample]) -> Result<PostureReport, RewardError> {
        if samples.is_empty() {
            return Err(RewardError::EmptyTrainingSet);
        }
        let mut acc = [0.0; 3];
        for chunk in samples.chunks(256) {
            let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let est = self.estimate_batch(&imgs)?;
            for (e, s) in est.iter().zip(chunk) {
                let p = &s.psi_true;
                acc[0] += (e.s_x - p.s_x).abs() + (e.s_y - p.s_y).abs();
                acc[1] += (e.t_x - p.t_x).abs() + (e.t_y - p.t_y).abs();
                acc[2] += (e.theta - p.theta).abs();
            }
        }
        let n = samples.len() as f64;
        Ok(PostureReport {
            scale: acc[0] / (2.0 * n),
            shift: acc[1] / (2.0 * n),
            rotation: acc[2] / n,
            n: samples.len(),
        })
    }
}

fn normalize(p: &PostureParams) -> [f64; 5] {
    let a = p.to_array();
    let mut out = [0.0; 5];
    for k in 0..5 {
        out[k] = (a[k] - TARGET_SHIFT[k]) / TARGET_SCALE[k];
    }
    out
}

fn squared_error(net: &Mlp, g: &mut Graph<'_>, images: Tensor, targets: &[&PostureParams]) -> Result<Var, GraphError> {
    let x = g.constant(images)?;
    let y = net.forward(g, x)?;
    let t: Vec<f64> = targets.iter().flat_map(|p| normalize(p)).collect();
    let t = g.constant(Tensor::new(vec![targets.len(), 5], t)?)?;
    let d = g.sub(y, t)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Trains the regressor with squared error against the true posture.
pub fn fit_posture(train: &[PhantomSample], stream: &mut RngStream, cfg: &FitConfig) -> Result<PostureModel, RewardError> {
    let first = train.first().ok_or(RewardError::EmptyTrainingSet)?;
    let dim = first.image.pixels().len();
    let imgs: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    check_images(&imgs, dim)?;
    let mut model = PostureModel::init(dim, Precision::F32, &mut stream.derive("init"))?;
    let net = model.net.clone();
    let mut order_stream = stream.derive("order");
    fit_loop(&mut model.store, train.len(), cfg, &mut order_stream, |g, idx| {
        let batch: Vec<&Image> = idx.iter().map(|&i| imgs[i]).collect();
        let targets: Vec<&PostureParams> = idx.iter().map(|&i| &train[i].psi_true).collect();
        squared_error(&net, g, image_matrix(&batch), &targets)
    })?;
    Ok(model)
}

/// Clamped `ψ̂` for one image.
pub fn estimate_posture(model: &PostureModel, image: &Image) -> Result<PostureParams, RewardError> {
    Ok(model.estimate_batch(&[image])?.remove(0))
}
