//! A small Vision Transformer mapping one grayscale image to an embedding.
//!
//! Pipeline: non-overlapping patches, a linear patch embedding, learned
//! positional embeddings (plus an optional class token), `depth` pre-norm
//! blocks of multi-head self-attention and a GELU MLP, a final layer norm,
//! and pooling over tokens.

use rand::Rng;

use crate::autodiff::{BoundParams, GeluForm, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    init_layer_norm, init_linear, init_projection, layer_norm, linear, projection, truncated_normal, INIT_STD,
};

pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Mean,
    ClsToken,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::ClsToken => "cls_token",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "cls" | "cls_token" => Ok(Pooling::ClsToken),
            other => Err(Error::InvalidArgument(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    pub gelu: GeluForm,
    pub layer_norm_eps: f64,
    /// Pixels enter the encoder as `(v - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            patch_size: 12,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 4.0,
            pooling: Pooling::Mean,
            gelu: GeluForm::Exact,
            layer_norm_eps: 1e-5,
            input_mean: 0.4,
            input_std: 0.2,
        }
    }
}

impl ViTConfig {
    /// The 80×80 / patch-10 variant used for natively external-resolution models.
    pub fn external() -> Self {
        Self {
            image_size: 80,
            patch_size: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if !self.input_mean.is_finite() || !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return bad("input_mean must be finite and input_std positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + usize::from(self.pooling == Pooling::ClsToken)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Splits an `H×W` image into row-major flattened `p×p` patches, ordered
/// row-major over the patch grid.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::shape("patchify", other, &[patch, patch])),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::PatchGrid {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let start = (pr * patch + r) * w + pc * patch;
                out.extend_from_slice(&src[start..start + patch]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch], out)
}

/// Multi-head scaled dot-product attention on plain tensors (`[N × d]`
/// each); `heads = 1` is the single-head case.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q)?, g.constant(k)?, g.constant(v)?);
    let tokens = q.dims2()?.0;
    let out = g.attention(qv, kv, vv, 1, tokens, heads)?;
    Ok(g.tensor(out))
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    config: ViTConfig,
}

impl VisionTransformer {
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    fn name(part: &str) -> String {
        format!("{ENCODER_PREFIX}.{part}")
    }

    /// Registers freshly initialised encoder parameters under `encoder.*`.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let d = c.embed_dim;
        let pp = c.patch_size * c.patch_size;
        init_linear(store, &Self::name("patch_embed"), pp, d, rng)?;
        if c.pooling == Pooling::ClsToken {
            store.insert(
                Self::name("cls_token"),
                truncated_normal(rng, &[1, d], INIT_STD).with_requires_grad(true),
            )?;
        }
        store.insert(
            Self::name("pos_embed"),
            truncated_normal(rng, &[c.tokens(), d], INIT_STD).with_requires_grad(true),
        )?;
        for i in 0..c.depth {
            let blk = Self::name(&format!("blocks.{i}"));
            init_layer_norm(store, &format!("{blk}.ln1"), d)?;
            // softmax ignores a per-query shift, so a key bias would be inert
            init_linear(store, &format!("{blk}.attn.q"), d, d, rng)?;
            init_projection(store, &format!("{blk}.attn.k"), d, d, rng)?;
            init_linear(store, &format!("{blk}.attn.v"), d, d, rng)?;
            init_linear(store, &format!("{blk}.attn.proj"), d, d, rng)?;
            init_layer_norm(store, &format!("{blk}.ln2"), d)?;
            init_linear(store, &format!("{blk}.mlp.fc1"), d, c.mlp_hidden(), rng)?;
            init_linear(store, &format!("{blk}.mlp.fc2"), c.mlp_hidden(), d, rng)?;
        }
        init_layer_norm(store, &Self::name("norm"), d)
    }

    /// Stacks the patches of every image into one `[B*N × p²]` constant.
    fn embed_input(&self, g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        let c = &self.config;
        if images.is_empty() {
            return Err(Error::InvalidArgument("encoder batch is empty".into()));
        }
        let pp = c.patch_size * c.patch_size;
        let mut data = Vec::with_capacity(images.len() * c.num_patches() * pp);
        for img in images {
            if img.shape() != [c.image_size, c.image_size] {
                return Err(Error::shape(
                    "encode",
                    img.shape(),
                    &[c.image_size, c.image_size],
                ));
            }
            data.extend(patchify(img, c.patch_size)?.data().iter().map(|v| (v - c.input_mean) / c.input_std));
        }
        g.constant_raw(vec![images.len() * c.num_patches(), pp], data)
    }

    /// Encodes a batch of images into a `[B × embed_dim]` node.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, images: &[&Tensor]) -> Result<Var> {
        let c = &self.config;
        let batch = images.len();
        let patches = self.embed_input(g, images)?;
        let mut x = linear(g, p, &Self::name("patch_embed"), patches)?;
        if c.pooling == Pooling::ClsToken {
            let cls = p.get(&Self::name("cls_token"))?;
            x = g.prepend_token(x, cls, c.num_patches())?;
        }
        let tokens = c.tokens();
        x = g.add_broadcast(x, p.get(&Self::name("pos_embed"))?)?;

        for i in 0..c.depth {
            let blk = Self::name(&format!("blocks.{i}"));
            let h = layer_norm(g, p, &format!("{blk}.ln1"), x, c.layer_norm_eps)?;
            let q = linear(g, p, &format!("{blk}.attn.q"), h)?;
            let k = projection(g, p, &format!("{blk}.attn.k"), h)?;
            let v = linear(g, p, &format!("{blk}.attn.v"), h)?;
            let a = g.attention(q, k, v, batch, tokens, c.num_heads)?;
            let a = linear(g, p, &format!("{blk}.attn.proj"), a)?;
            x = g.add(x, a)?;

            let h = layer_norm(g, p, &format!("{blk}.ln2"), x, c.layer_norm_eps)?;
            let h = linear(g, p, &format!("{blk}.mlp.fc1"), h)?;
            let h = g.gelu(h, c.gelu)?;
            let h = linear(g, p, &format!("{blk}.mlp.fc2"), h)?;
            x = g.add(x, h)?;
        }
        x = layer_norm(g, p, &Self::name("norm"), x, c.layer_norm_eps)?;

        match c.pooling {
            Pooling::Mean => g.segment_mean(x, tokens),
            Pooling::ClsToken => {
                let rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
                g.gather_rows(x, &rows)
            }
        }
    }
}

/// Forward-only encoding of one image.
pub fn encode(image: &Tensor, params: &ParamStore, config: &ViTConfig) -> Result<Embedding> {
    Ok(encode_batch(&[image], params, config)?.remove(0))
}

/// Forward-only encoding of a batch; every row is independent of the others.
pub fn encode_batch(
    images: &[&Tensor],
    params: &ParamStore,
    config: &ViTConfig,
) -> Result<Vec<Embedding>> {
    let vit = VisionTransformer::new(config.clone())?;
    let mut frozen = params.clone();
    frozen.set_trainable(|_| false);
    let mut g = Graph::new();
    let bound = frozen.bind(&mut g)?;
    let out = vit.forward(&mut g, &bound, images)?;
    g.value(out)
        .chunks(config.embed_dim)
        .map(|row| Embedding::new(row.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ViTConfig {
        ViTConfig {
            image_size: 24,
            patch_size: 12,
            embed_dim: 8,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 2.0,
            ..ViTConfig::default()
        }
    }

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![size, size], data).unwrap()
    }

    fn params_for(config: &ViTConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VisionTransformer::new(config.clone())
            .unwrap()
            .init_params(&mut store, &mut rng)
            .unwrap();
        store
    }

    #[test]
    fn patchify_shapes() {
        let p = patchify(&Tensor::zeros(&[84, 84]), 12).unwrap();
        assert_eq!(p.shape(), &[49, 144]);

        let img = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), img.data());

        let err = patchify(&Tensor::zeros(&[80, 80]), 12).unwrap_err();
        assert!(matches!(
            err,
            Error::PatchGrid {
                height: 80,
                width: 80,
                patch: 12
            }
        ));
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let img = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn single_token_attention_returns_values() {
        let q = Tensor::matrix(&[[0.3, -0.1, 2.0, 1.0]]);
        let k = Tensor::matrix(&[[1.5, 0.2, -0.7, 0.0]]);
        let v = Tensor::matrix(&[[4.0, 5.0, 6.0, 7.0]]);
        assert_eq!(attention(&q, &k, &v, 1).unwrap().data(), v.data());
        assert_eq!(attention(&q, &k, &v, 2).unwrap().data(), v.data());
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::matrix(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 9.0]]);
        let v = Tensor::matrix(&[[1.0, 10.0], [2.0, 20.0], [6.0, 30.0]]);
        let out = attention(&q, &k, &v, 1).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = || {
            let d: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![3, 4], d).unwrap()
        };
        let (q, k, v) = (rand_t(), rand_t(), rand_t());
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .map(|&i| t.data()[i * 4..(i + 1) * 4].to_vec())
                .collect();
            Tensor::matrix(&rows)
        };
        let out = attention(&q, &k, &v, 2).unwrap();
        let out_p = attention(&permute(&q), &permute(&k), &permute(&v), 2).unwrap();
        let expected = permute(&out);
        for (a, b) in out_p.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_deterministic_with_embed_dim_output() {
        for config in [ViTConfig::default(), toy_config(), ViTConfig::external()] {
            let params = params_for(&config, 5);
            let img = random_image(config.image_size, 9);
            let a = encode(&img, &params, &config).unwrap();
            let b = encode(&img, &params, &config).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.dim(), config.embed_dim);
        }
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let config = toy_config();
        let params = params_for(&config, 1);
        assert!(encode(&Tensor::zeros(&[20, 20]), &params, &config).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let config = toy_config();
        let params = params_for(&config, 2);
        let (a, b) = (random_image(24, 1), random_image(24, 2));
        let batch = encode_batch(&[&a, &b], &params, &config).unwrap();
        let single = encode(&b, &params, &config).unwrap();
        for (x, y) in batch[1].values().iter().zip(single.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_permutation_invariance_without_positions() {
        let config = ViTConfig {
            image_size: 24,
            patch_size: 8,
            ..toy_config()
        };
        let mut params = params_for(&config, 3);
        params
            .get_mut("encoder.pos_embed")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let img = random_image(24, 4);
        // swap patch (0,0) with patch (2,1)
        let mut swapped = img.clone();
        for r in 0..8 {
            for c in 0..8 {
                let (a, b) = (r * 24 + c, (16 + r) * 24 + 8 + c);
                let tmp = swapped.data()[a];
                swapped.data_mut()[a] = swapped.data()[b];
                swapped.data_mut()[b] = tmp;
            }
        }
        let e1 = encode(&img, &params, &config).unwrap();
        let e2 = encode(&swapped, &params, &config).unwrap();
        for (x, y) in e1.values().iter().zip(e2.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_pooling_builds_and_encodes() {
        let config = ViTConfig {
            pooling: Pooling::ClsToken,
            ..toy_config()
        };
        let params = params_for(&config, 4);
        assert_eq!(params.get("encoder.pos_embed").unwrap().shape(), &[5, 8]);
        let e = encode(&random_image(24, 3), &params, &config).unwrap();
        assert_eq!(e.dim(), 8);
    }

    #[test]
    fn config_validation() {
        let bad = ViTConfig {
            image_size: 80,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            embed_dim: 30,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ViTConfig::default().num_patches(), 49);
        assert_eq!(ViTConfig::external().num_patches(), 64);
    }

    /// Backpropagates `mean(e ⊙ w)` for fixed random weights `w`.
    fn backward_into(config: &ViTConfig, store: &mut ParamStore, images: &[Tensor], seed: u64) {
        let vit = VisionTransformer::new(config.clone()).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let refs: Vec<&Tensor> = images.iter().collect();
        let e = vit.forward(&mut g, &p, &refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        let n = images.len() * config.embed_dim;
        let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv = g.constant_raw(vec![images.len(), config.embed_dim], w).unwrap();
        let weighted = g.mul(e, wv).unwrap();
        let loss = g.mean(weighted).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&p, &grads).unwrap();
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        for pooling in [Pooling::Mean, Pooling::ClsToken] {
            let config = ViTConfig { pooling, ..toy_config() };
            for seed in 0..5 {
                let mut store = params_for(&config, seed);
                let images: Vec<Tensor> = (0..3).map(|i| random_image(24, seed * 10 + i)).collect();
                backward_into(&config, &mut store, &images, seed);
                for (name, t) in store.iter() {
                    let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient buffer"));
                    assert!(g.iter().any(|v| v.abs() > 0.0), "{pooling:?} seed {seed}: {name} has zero gradient");
                }
            }
        }
    }
}
