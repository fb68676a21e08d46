//! Report tokenizer, frozen report encoder, learnable condition rows, and
//! their concatenation into the generator condition.

use thiserror::Error;

use crate::numcore::{Graph, GraphError, ParamError, ParamStore, RngStream, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const M_MAX: usize = 74;
pub const DEFAULT_D_TAU: usize = 32;
pub const DEFAULT_N_ACE: usize = 3;
pub const ACE_INIT_STD: f64 = 0.02;
/// Number of distinct within-sentence positions; later positions share the last row.
pub const N_POSITIONS: usize = 16;

pub const VOCAB: [&str; 25] = [
    "<pad>",
    "<unk>",
    "no",
    "effusion",
    "opacity",
    "left",
    "right",
    "small",
    "large",
    "cardiomegaly",
    "device",
    "lungs",
    "clear",
    "in",
    "lung",
    "the",
    "present",
    "heart",
    ".",
    "enlarged",
    "is",
    "seen",
    "support",
    "a",
    "round",
];

/// Name prefix shared by the report encoder tables.
pub const ENCODER_PREFIX: &str = "text";
pub const ENCODER_EMBED: &str = "text.embed";
pub const ENCODER_POS: &str = "text.pos";
pub const ACE_PARAM: &str = "ace";

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("token id {id} outside vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("condition width mismatch: ace rows are {ace} wide, report rows {report}")]
    Width { ace: usize, report: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self, TextError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= VOCAB.len()) {
            return Err(TextError::IdOutOfRange { id, size: VOCAB.len() });
        }
        if ids.is_empty() {
            return Ok(Self { ids: vec![PAD] });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of every token inside its sentence; a "." closes a sentence.
    pub fn sentence_positions(&self) -> Vec<usize> {
        let mut pos = 0;
        self.ids
            .iter()
            .map(|&id| {
                let p = pos.min(N_POSITIONS - 1);
                pos = if VOCAB[id] == "." { 0 } else { pos + 1 };
                p
            })
            .collect()
    }
}

fn lookup(word: &str) -> usize {
    VOCAB.iter().skip(2).position(|v| *v == word).map_or(UNK, |i| i + 2)
}

/// Lowercases, splits on whitespace and punctuation (punctuation marks are
/// tokens of their own), maps words through the vocabulary and truncates
/// to [`M_MAX`]. Empty text yields a single PAD.
pub fn tokenize(text: &str) -> TokenSeq {
    let lower = text.to_lowercase();
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<usize>| {
        if !word.is_empty() {
            ids.push(lookup(word));
            word.clear();
        }
    };
    for ch in lower.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut ids);
        } else if ch.is_ascii_punctuation() {
            flush(&mut word, &mut ids);
            ids.push(lookup(ch.encode_utf8(&mut [0; 4])));
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut ids);
    ids.truncate(M_MAX);
    if ids.is_empty() {
        ids.push(PAD);
    }
    TokenSeq { ids }
}

/// Registers the report encoder tables: a token embedding and a
/// within-sentence positional offset, both `d_tau` wide.
pub fn init_encoder(store: &mut ParamStore, d_tau: usize, stream: &mut RngStream) -> Result<(), ParamError> {
    crate::numcore::nn::init_normal(store, ENCODER_EMBED, VOCAB.len(), d_tau, 1.0, stream)?;
    crate::numcore::nn::init_normal(store, ENCODER_POS, N_POSITIONS, d_tau, 0.3, stream)
}

/// Encodes a batch of token sequences inside a graph, right-padding each to
/// the longest. Returns the `[B, M, d]` embedding and a keep flag per row.
pub fn encode_batch(g: &mut Graph<'_>, seqs: &[&TokenSeq]) -> Result<(Var, Vec<bool>), TextError> {
    let m = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(seqs.len() * m);
    let mut pos = Vec::with_capacity(seqs.len() * m);
    let mut keep = Vec::with_capacity(seqs.len() * m);
    for s in seqs {
        let p = s.sentence_positions();
        for j in 0..m {
            let real = j < s.len();
            ids.push(if real { s.ids[j] } else { PAD });
            pos.push(if real { p[j] } else { 0 });
            keep.push(real && s.ids[j] != PAD);
        }
    }
    // An all-PAD sequence still needs one visible row.
    for (b, s) in seqs.iter().enumerate() {
        if !keep[b * m..b * m + s.len()].iter().any(|&k| k) {
            keep[b * m] = true;
        }
    }
    let embed = g.param(ENCODER_EMBED)?;
    let d = g.shape(embed)[1];
    let tok = g.gather(embed, &ids, vec![seqs.len(), m, d])?;
    let table = g.param(ENCODER_POS)?;
    let off = g.gather(table, &pos, vec![seqs.len(), m, d])?;
    Ok((g.add(tok, off)?, keep))
}

/// Frozen report embedding `c_p`, shape `[M, d_tau]`.
pub fn encode_report(tokens: &TokenSeq, encoder: &ParamStore) -> Result<Tensor, TextError> {
    if let Some(&id) = tokens.ids.iter().find(|&&id| id >= VOCAB.len()) {
        return Err(TextError::IdOutOfRange { id, size: VOCAB.len() });
    }
    let mut g = Graph::inference(encoder);
    let (v, _) = encode_batch(&mut g, &[tokens])?;
    let d = g.shape(v)[2];
    Ok(g.value(v).reshape(vec![tokens.len(), d]).expect("same element count"))
}

/// Learnable condition rows `c_s`. `N = 0` is allowed and means no rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AceEmbedding {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl AceEmbedding {
    pub fn from_tensor(t: &Tensor) -> Self {
        let sh = t.shape();
        Self {
            rows: sh[0],
            width: sh[1],
            data: t.data().to_vec(),
        }
    }

    pub fn empty(width: usize) -> Self {
        Self {
            rows: 0,
            width,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        (self.rows > 0).then(|| Tensor::new(vec![self.rows, self.width], self.data.clone()).expect("consistent"))
    }

    /// Reads the rows currently held in `store`, or none if absent.
    pub fn from_store(store: &ParamStore, width: usize) -> Self {
        store.value(ACE_PARAM).map_or_else(|_| Self::empty(width), Self::from_tensor)
    }
}

/// `N × d_tau` rows drawn i.i.d. N(0, 0.02²).
pub fn init_ace(n: usize, d_tau: usize, stream: &mut RngStream) -> AceEmbedding {
    AceEmbedding {
        rows: n,
        width: d_tau,
        data: (0..n * d_tau).map(|_| ACE_INIT_STD * stream.normal()).collect(),
    }
}

/// Registers `ace` in `store` as a trainable parameter (no-op for `N = 0`).
pub fn register_ace(store: &mut ParamStore, ace: &AceEmbedding) -> Result<(), ParamError> {
    match ace.to_tensor() {
        Some(t) => store.insert(ACE_PARAM, t, false),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowRole {
    Ace,
    Report,
    Padding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub matrix: Tensor,
    pub roles: Vec<RowRole>,
}

impl Condition {
    pub fn rows(&self) -> usize {
        self.roles.len()
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Row-concatenation `[c_s; c_p]` with a role per row.
pub fn build_condition(ace: &AceEmbedding, report: &Tensor) -> Result<Condition, TextError> {
    let sh = report.shape();
    if sh.len() != 2 || sh[1] != ace.width {
        return Err(TextError::Width {
            ace: ace.width,
            report: *sh.last().unwrap_or(&0),
        });
    }
    let mut data = ace.data.clone();
    data.extend_from_slice(report.data());
    let mut roles = vec![RowRole::Ace; ace.rows];
    roles.extend(std::iter::repeat_n(RowRole::Report, sh[0]));
    Ok(Condition {
        matrix: Tensor::new(vec![ace.rows + sh[0], ace.width], data).expect("consistent"),
        roles,
    })
}
