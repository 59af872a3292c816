//! Losses and heads: cosine similarity, NT-Xent, the SimSiam projector /
//! predictor pair with its stop-gradient loss, per-label BCE and the linear
//! classification head.

use rand::Rng;

use crate::autodiff::{BoundParams, GeluForm, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelVector, PredictionVector, NUM_LABELS, PREDICTION_CLAMP};
use crate::layers::{batch_norm, init_batch_norm, init_linear, init_projection, linear, projection};
use crate::vit::Embedding;

pub const PROJECTOR_PREFIX: &str = "projector";
pub const PREDICTOR_PREFIX: &str = "predictor";
pub const HEAD_PREFIX: &str = "head";

/// Self-supervised objective used for pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    #[default]
    SimSiam,
    NtXent,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::SimSiam => "simsiam",
            Objective::NtXent => "nt_xent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simsiam" => Ok(Objective::SimSiam),
            "nt_xent" | "nt-xent" => Ok(Objective::NtXent),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }

    /// Smallest usable batch: NT-Xent needs at least one negative.
    pub fn min_batch_size(self) -> usize {
        match self {
            Objective::SimSiam => 1,
            Objective::NtXent => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadsConfig {
    pub proj_dim: usize,
    pub pred_hidden: usize,
    /// Without a predictor, `p = z`; kept for collapse experiments.
    pub use_predictor: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            proj_dim: 64,
            pred_hidden: 16,
            use_predictor: true,
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(Error::InvalidArgument(
                "head dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Projector `embed -> proj -> proj` and predictor `proj -> hidden -> proj`,
/// each two linear layers with batch norm and GELU in between. Batch
/// statistics come from the rows passed in, so both views of a batch are
/// normalised together.
#[derive(Clone, Debug)]
pub struct SimSiamHeads {
    config: HeadsConfig,
    embed_dim: usize,
    gelu: GeluForm,
    eps: f64,
}

impl SimSiamHeads {
    pub fn new(config: HeadsConfig, embed_dim: usize, gelu: GeluForm, eps: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            embed_dim,
            gelu,
            eps,
        })
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.config
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        // batch norm cancels any bias on the first layer, so it has none
        init_projection(store, "projector.fc1", self.embed_dim, c.proj_dim, rng)?;
        init_batch_norm(store, "projector.bn", c.proj_dim)?;
        init_linear(store, "projector.fc2", c.proj_dim, c.proj_dim, rng)?;
        if c.use_predictor {
            init_projection(store, "predictor.fc1", c.proj_dim, c.pred_hidden, rng)?;
            init_batch_norm(store, "predictor.bn", c.pred_hidden)?;
            init_linear(store, "predictor.fc2", c.pred_hidden, c.proj_dim, rng)?;
        }
        Ok(())
    }

    fn mlp(&self, g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let h = projection(g, p, &format!("{prefix}.fc1"), x)?;
        let h = batch_norm(g, p, &format!("{prefix}.bn"), h, self.eps)?;
        let h = g.gelu(h, self.gelu)?;
        linear(g, p, &format!("{prefix}.fc2"), h)
    }

    pub fn project(&self, g: &mut Graph, p: &BoundParams, e: Var) -> Result<Var> {
        self.mlp(g, p, PROJECTOR_PREFIX, e)
    }

    pub fn predict(&self, g: &mut Graph, p: &BoundParams, z: Var) -> Result<Var> {
        if self.config.use_predictor {
            self.mlp(g, p, PREDICTOR_PREFIX, z)
        } else {
            Ok(z)
        }
    }
}

/// `a·b / (|a| |b|)`; zero-norm input is an error.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::shape("cosine_sim", a.shape(), b.shape()));
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Checks that `pairs` is a fixed-point-free involution over `0..n`.
pub fn validate_pairing(pairs: &[usize]) -> Result<()> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs at least one pair, got {n} embeddings"
        )));
    }
    for (i, &j) in pairs.iter().enumerate() {
        if j >= n || j == i || pairs[j] != i {
            return Err(Error::InvalidArgument(format!(
                "pair index is not a perfect matching at {i} -> {j}"
            )));
        }
    }
    Ok(())
}

/// Pairing for a batch laid out as `[view1 rows; view2 rows]`: `i <-> i + K`.
pub fn halves_pairing(k: usize) -> Vec<usize> {
    (0..2 * k).map(|i| if i < k { i + k } else { i - k }).collect()
}

/// NT-Xent over `2K` embeddings: the mean over anchors of
/// `-log(exp(s(i,i+)/t) / sum_{j != i} exp(s(i,j)/t))` with cosine `s`.
pub fn nt_xent(g: &mut Graph, embeddings: Var, pairs: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    validate_pairing(pairs)?;
    let n = pairs.len();
    if g.shape(embeddings).first() != Some(&n) || g.shape(embeddings).len() != 2 {
        return Err(Error::shape("nt_xent", g.shape(embeddings), &[n]));
    }
    let zn = g.normalize_rows(embeddings)?;
    let znt = g.transpose(zn)?;
    let sim = g.matmul(zn, znt)?;
    nt_xent_from_similarities(g, sim, pairs, temperature)
}

/// The NT-Xent reduction applied to a precomputed `[2K × 2K]` similarity
/// matrix; the diagonal is ignored.
pub fn nt_xent_from_similarities(g: &mut Graph, sim: Var, pairs: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    validate_pairing(pairs)?;
    let n = pairs.len();
    if g.shape(sim) != [n, n] {
        return Err(Error::shape("nt_xent", g.shape(sim), &[n, n]));
    }
    let logits = g.scale(sim, 1.0 / temperature)?;
    let self_mask: Vec<bool> = (0..n * n).map(|i| i / n == i % n).collect();
    g.cross_entropy(logits, pairs, Some(&self_mask))
}

/// [`nt_xent`] evaluated on a plain `[2K × d]` tensor.
pub fn nt_xent_value(embeddings: &Tensor, pairs: &[usize], temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(embeddings)?;
    let loss = nt_xent(&mut g, e, pairs, temperature)?;
    g.scalar(loss)
}

/// `-mean_rows cos(p, z)`; `z` is detached when `stop_gradient` is set.
pub fn negative_cosine(g: &mut Graph, p: Var, z: Var, stop_gradient: bool) -> Result<Var> {
    let z = if stop_gradient { g.detach(z)? } else { z };
    let pn = g.normalize_rows(p)?;
    let zn = g.normalize_rows(z)?;
    let prod = g.mul(pn, zn)?;
    let total = g.sum(prod)?;
    let rows = g.shape(p)[0];
    g.scale(total, -1.0 / rows as f64)
}

/// Symmetrised SimSiam loss `D(p1, sg(z2))/2 + D(p2, sg(z1))/2`.
pub fn simsiam_loss(
    g: &mut Graph,
    p1: Var,
    p2: Var,
    z1: Var,
    z2: Var,
    stop_gradient: bool,
) -> Result<Var> {
    for v in [p2, z1, z2] {
        if g.shape(v) != g.shape(p1) {
            return Err(Error::shape("simsiam_loss", g.shape(p1), g.shape(v)));
        }
    }
    let a = negative_cosine(g, p1, z2, stop_gradient)?;
    let b = negative_cosine(g, p2, z1, stop_gradient)?;
    let sum = g.add(a, b)?;
    g.scale(sum, 0.5)
}

/// Mean per-label BCE on sigmoid outputs `probs` against one-hot rows.
pub fn bce_loss(g: &mut Graph, probs: Var, targets: &[LabelVector]) -> Result<Var> {
    let flat: Vec<f64> = targets.iter().flat_map(|y| *y.values()).collect();
    g.bce(probs, &flat, PREDICTION_CLAMP)
}

/// Single-sample BCE averaged over the five labels.
pub fn bce_loss_value(y: &LabelVector, y_hat: &PredictionVector) -> f64 {
    y.values()
        .iter()
        .zip(y_hat.values())
        .map(|(&y, &p)| {
            let p = p.clamp(PREDICTION_CLAMP, 1.0 - PREDICTION_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / NUM_LABELS as f64
}

pub fn init_classification_head<R: Rng + ?Sized>(
    store: &mut ParamStore,
    embed_dim: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, HEAD_PREFIX, embed_dim, NUM_LABELS, rng)
}

/// Graph form of the head: sigmoid(e · W + b), `[B × 5]`.
pub fn head_forward(g: &mut Graph, p: &BoundParams, embeddings: Var) -> Result<Var> {
    let logits = linear(g, p, HEAD_PREFIX, embeddings)?;
    g.sigmoid(logits)
}

/// `sigmoid(W e + b)` with `W` stored as `[embed_dim × 5]`.
pub fn classification_head(e: &Embedding, w: &Tensor, b: &Tensor) -> Result<PredictionVector> {
    if w.shape() != [e.dim(), NUM_LABELS] || b.numel() != NUM_LABELS {
        return Err(Error::shape("classification_head", w.shape(), &[e.dim(), NUM_LABELS]));
    }
    let mut out = [0.0; NUM_LABELS];
    for (k, o) in out.iter_mut().enumerate() {
        let logit: f64 = e
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * w.data()[i * NUM_LABELS + k])
            .sum::<f64>()
            + b.data()[k];
        *o = 1.0 / (1.0 + (-logit).exp());
    }
    PredictionVector::new(out)
}
