use super::train::{fit_loop, image_matrix, FitConfig, Mlp};
use super::{check_images, RewardError};
use crate::numcore::nn::{init_normal, linear};
use crate::numcore::{Graph, GraphError, ParamStore, Precision, RngStream, Tensor, Var};
use crate::phantom::{Image, PhantomSample};
use crate::textcond::{tokenize, TokenSeq, N_POSITIONS, PAD, VOCAB};

pub const DUAL_PREFIX: &str = "dual";
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const TOKEN_WIDTH: usize = 32;
const TOKEN_HIDDEN: usize = 64;
const IMAGE_HIDDEN: usize = 128;

/// Candidate-set retrieval quality on held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    /// Report→image top-1 accuracy among `candidates` images.
    pub top1: f64,
    pub candidates: usize,
    /// Fraction of images scoring higher with their own report than with a
    /// report of different findings.
    pub own_beats_mismatch: f64,
    pub n: usize,
}

impl RetrievalReport {
    pub fn passes_gate(&self) -> bool {
        self.top1 >= 0.8
    }
}

/// Image and report encoders into a shared unit sphere.
///
/// The report side embeds every token together with its position inside its
/// sentence, passes each through a small perceptron and only then averages,
/// so "no effusion" and "effusion seen" land in different places.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    store: ParamStore,
    image_net: Mlp,
    token_net: Mlp,
    embed_dim: usize,
    pub temperature: f64,
}

fn name(part: &str) -> String {
    format!("{DUAL_PREFIX}.{part}")
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DualEncoder {
    fn nets(image_dim: usize, embed_dim: usize) -> (Mlp, Mlp) {
        (
            Mlp::new(&name("img"), &[image_dim, IMAGE_HIDDEN, embed_dim]),
            Mlp::new(&name("tok"), &[TOKEN_WIDTH, TOKEN_HIDDEN, TOKEN_WIDTH]),
        )
    }

    pub fn init(image_dim: usize, embed_dim: usize, precision: Precision, stream: &mut RngStream) -> Result<Self, RewardError> {
        let (image_net, token_net) = Self::nets(image_dim, embed_dim);
        let mut store = ParamStore::new(precision);
        image_net.init(&mut store, stream)?;
        init_normal(&mut store, &name("embed"), VOCAB.len(), TOKEN_WIDTH, 1.0, stream)?;
        init_normal(&mut store, &name("pos"), N_POSITIONS, TOKEN_WIDTH, 1.0, stream)?;
        token_net.init(&mut store, stream)?;
        crate::numcore::nn::init_linear(&mut store, &name("proj"), TOKEN_WIDTH, embed_dim, 1.0, stream)?;
        Ok(Self {
            store,
            image_net,
            token_net,
            embed_dim,
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    pub fn from_store(store: ParamStore, image_dim: usize, embed_dim: usize, temperature: f64) -> Result<Self, RewardError> {
        let (image_net, token_net) = Self::nets(image_dim, embed_dim);
        image_net.check(&store)?;
        token_net.check(&store)?;
        for part in ["embed", "pos", "proj.w", "proj.b"] {
            store.value(&name(part))?;
        }
        Ok(Self {
            store,
            image_net,
            token_net,
            embed_dim,
            temperature,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn image_dim(&self) -> usize {
        self.image_net.widths[0]
    }

    /// Unit image embeddings `[B, d_e]`.
    pub fn image_forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, GraphError> {
        let z = self.image_net.forward(g, x)?;
        g.l2_normalize_last(z)
    }

    /// Unit report embeddings `[B, d_e]`.
    pub fn text_forward(&self, g: &mut Graph<'_>, seqs: &[&TokenSeq]) -> Result<Var, GraphError> {
        text_forward(&self.token_net, g, seqs)
    }

    /// Symmetric in-batch contrastive loss for aligned `(image, report)`
    /// pairs.
    pub fn loss(&self, g: &mut Graph<'_>, images: &Tensor, seqs: &[&TokenSeq]) -> Result<Var, GraphError> {
        contrastive(&self.image_net, &self.token_net, self.temperature, g, images.clone(), seqs)
    }

    pub fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, RewardError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        check_images(images, self.image_dim())?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(image_matrix(images))?;
        let v = self.image_forward(&mut g, x)?;
        Ok(g.value(v).data().chunks(self.embed_dim).map(<[f64]>::to_vec).collect())
    }

    pub fn embed_reports(&self, reports: &[&str]) -> Result<Vec<Vec<f64>>, RewardError> {
        if reports.is_empty() {
            return Ok(Vec::new());
        }
        let seqs: Vec<TokenSeq> = reports.iter().map(|r| tokenize(r)).collect();
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        let mut g = Graph::inference(&self.store);
        let t = self.text_forward(&mut g, &refs)?;
        Ok(g.value(t).data().chunks(self.embed_dim).map(<[f64]>::to_vec).collect())
    }

    /// Report→image retrieval on held-out pairs. Each query competes
    /// against `candidates − 1` images whose findings differ from its own.
    pub fn evaluate(&self, samples: &[PhantomSample], candidates: usize, stream: &mut RngStream) -> Result<RetrievalReport, RewardError> {
        if samples.len() < 2 || candidates < 2 {
            return Err(RewardError::BatchTooSmall(samples.len().min(candidates)));
        }
        let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let reps: Vec<&str> = samples.iter().map(|s| s.report.as_str()).collect();
        let mut iv = Vec::with_capacity(imgs.len());
        let mut tv = Vec::with_capacity(reps.len());
        for (ic, rc) in imgs.chunks(256).zip(reps.chunks(256)) {
            iv.extend(self.embed_images(ic)?);
            tv.extend(self.embed_reports(rc)?);
        }
        let (mut hits, mut wins, mut queries) = (0usize, 0usize, 0usize);
        for i in 0..samples.len() {
            let others: Vec<usize> = (0..samples.len())
                .filter(|&j| !samples[j].attrs.same_findings(&samples[i].attrs))
                .collect();
            if others.len() < candidates - 1 {
                continue;
            }
            queries += 1;
            let own = cosine(&iv[i], &tv[i]);
            let mut pool = others.clone();
            stream.shuffle(&mut pool);
            if pool[..candidates - 1].iter().all(|&j| cosine(&iv[j], &tv[i]) < own) {
                hits += 1;
            }
            let j = others[stream.below(others.len())];
            if cosine(&iv[i], &tv[j]) < own {
                wins += 1;
            }
        }
        if queries == 0 {
            return Err(RewardError::BatchTooSmall(0));
        }
        Ok(RetrievalReport {
            top1: hits as f64 / queries as f64,
            candidates,
            own_beats_mismatch: wins as f64 / queries as f64,
            n: queries,
        })
    }
}

fn text_forward(token_net: &Mlp, g: &mut Graph<'_>, seqs: &[&TokenSeq]) -> Result<Var, GraphError> {
    let b = seqs.len();
    let m = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(b * m);
    let mut pos = Vec::with_capacity(b * m);
    let mut weights = vec![0.0; b * m];
    for (bi, s) in seqs.iter().enumerate() {
        let p = s.sentence_positions();
        let mut real: Vec<usize> = (0..s.len()).filter(|&j| s.ids()[j] != PAD).collect();
        // An all-PAD sequence still pools its first row.
        if real.is_empty() {
            real.push(0);
        }
        for j in 0..m {
            ids.push(if j < s.len() { s.ids()[j] } else { PAD });
            pos.push(if j < s.len() { p[j] } else { 0 });
        }
        for &j in &real {
            weights[bi * m + j] = 1.0 / real.len() as f64;
        }
    }
    let embed = g.param(&name("embed"))?;
    let tok = g.gather(embed, &ids, vec![b, m, TOKEN_WIDTH])?;
    let table = g.param(&name("pos"))?;
    let off = g.gather(table, &pos, vec![b, m, TOKEN_WIDTH])?;
    let h = g.add(tok, off)?;
    let h = token_net.forward(g, h)?;
    let w = g.constant(Tensor::new(vec![b, 1, m], weights)?)?;
    let pooled = g.batch_matmul(w, h, false)?;
    let pooled = g.reshape(pooled, vec![b, TOKEN_WIDTH])?;
    let z = linear(g, pooled, &name("proj"))?;
    g.l2_normalize_last(z)
}

fn contrastive(
    image_net: &Mlp,
    token_net: &Mlp,
    temperature: f64,
    g: &mut Graph<'_>,
    images: Tensor,
    seqs: &[&TokenSeq],
) -> Result<Var, GraphError> {
    let b = seqs.len();
    let x = g.constant(images)?;
    let z = image_net.forward(g, x)?;
    let v = g.l2_normalize_last(z)?;
    let t = text_forward(token_net, g, seqs)?;
    let logits = g.matmul_nt(v, t)?;
    let logits = g.scale(logits, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    let l_img = g.cross_entropy_rows(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let l_txt = g.cross_entropy_rows(lt, &targets)?;
    let sum = g.add(l_img, l_txt)?;
    g.scale(sum, 0.5)
}

pub fn fit_dual_encoder(train: &[PhantomSample], stream: &mut RngStream, cfg: &FitConfig) -> Result<DualEncoder, RewardError> {
    fit_dual_encoder_with(train, stream, cfg, DEFAULT_EMBED_DIM, DEFAULT_TEMPERATURE)
}

/// [`fit_dual_encoder`] with an explicit embedding width and temperature.
pub fn fit_dual_encoder_with(
    train: &[PhantomSample],
    stream: &mut RngStream,
    cfg: &FitConfig,
    embed_dim: usize,
    temperature: f64,
) -> Result<DualEncoder, RewardError> {
    let first = train.first().ok_or(RewardError::EmptyTrainingSet)?;
    if cfg.batch < 2 || train.len() < 2 {
        return Err(RewardError::BatchTooSmall(cfg.batch.min(train.len())));
    }
    let dim = first.image.pixels().len();
    let imgs: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    check_images(&imgs, dim)?;
    let seqs: Vec<TokenSeq> = train.iter().map(|s| tokenize(&s.report)).collect();
    let mut model = DualEncoder::init(dim, embed_dim, Precision::F32, &mut stream.derive("init"))?;
    model.temperature = temperature;
    let (image_net, token_net, tau) = (model.image_net.clone(), model.token_net.clone(), model.temperature);
    let mut order_stream = stream.derive("order");
    fit_loop(&mut model.store, train.len(), cfg, &mut order_stream, |g, idx| {
        let batch: Vec<&Image> = idx.iter().map(|&i| imgs[i]).collect();
        let s: Vec<&TokenSeq> = idx.iter().map(|&i| &seqs[i]).collect();
        contrastive(&image_net, &token_net, tau, g, image_matrix(&batch), &s)
    })?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm() {
        let mut s = RngStream::new(3, "dual-test");
        let m = DualEncoder::init(16, 8, Precision::F32, &mut s).unwrap();
        let img = Image::new(4, 4, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        for v in m.embed_images(&[&img]).unwrap().iter().chain(&m.embed_reports(&["no effusion .", "", "cardiomegaly ."]).unwrap()) {
            assert!((cosine(v, v) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn negation_changes_the_report_embedding() {
        let mut s = RngStream::new(3, "dual-test");
        let m = DualEncoder::init(16, 8, Precision::F32, &mut s).unwrap();
        let e = m.embed_reports(&["no effusion .", "effusion seen ."]).unwrap();
        assert!(cosine(&e[0], &e[1]) < 1.0 - 1e-6);
    }

    #[test]
    fn fitting_needs_pairs() {
        let mut s = RngStream::new(3, "dual-test");
        let cfg = FitConfig { batch: 1, ..FitConfig::default() };
        assert!(matches!(fit_dual_encoder(&[], &mut s, &cfg), Err(RewardError::EmptyTrainingSet)));
        let one = crate::phantom::generate_sample_sized(&mut s, 4);
        assert_eq!(fit_dual_encoder(&[one.clone(), one], &mut s, &cfg).unwrap_err(), RewardError::BatchTooSmall(1));
    }
}
