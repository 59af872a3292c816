#![allow(dead_code)]

pub mod oracles;
pub mod stop_gradient;

use cmr_ssl::autodiff::{grad_check_params, BoundParams, GeluForm, Graph, ParamStore, Tensor, Var};
use cmr_ssl::labels::{LabelVector, SequenceLabel};
use cmr_ssl::objectives::{bce_loss, halves_pairing, nt_xent, simsiam_loss, HeadsConfig, SimSiamHeads};
use cmr_ssl::rng::rng_for;
use cmr_ssl::training::{ScpConfig, SupervisedConfig};
use cmr_ssl::vit::{Pooling, ViTConfig, VisionTransformer};
use cmr_ssl::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-4;
/// Step for the deep encoder compositions, where roundoff dominates the
/// stencil's fourth-order truncation error.
pub const ENCODER_GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t).unwrap();
    }
    s
}

/// Mean of the output against fixed random weights, so every element
/// contributes to a scalar.
fn weighted_mean(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = random(&mut rng_for(seed, &[0xC0]), &shape, 1.0);
    let wv = g.constant(&w)?;
    let prod = g.mul(out, wv)?;
    g.mean(prod)
}

struct Suite {
    seed: u64,
    results: Vec<(String, f64)>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, params: ParamStore, f: F)
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
    {
        self.check_at(name, params, GRAD_EPS, f)
    }

    fn check_at<F>(&mut self, name: &str, params: ParamStore, eps: f64, f: F)
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
    {
        let report = grad_check_params(f, &params, eps).unwrap_or_else(|e| panic!("{name}: {e}"));
        let worst = report.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        self.results.push((name.to_string(), worst));
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        rng_for(self.seed, &[stream])
    }
}

pub fn tiny_vit(pooling: Pooling, gelu: GeluForm) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        mlp_ratio: 2.0,
        pooling,
        gelu,
        ..ViTConfig::default()
    }
}

/// A pretraining config small enough for a test to run in well under a second.
pub fn tiny_scp(seed: u64) -> ScpConfig {
    ScpConfig {
        seed,
        epochs: 2,
        batch_size: 8,
        micro_batch: 8,
        vit: tiny_vit(Pooling::Mean, GeluForm::Tanh),
        heads: HeadsConfig {
            proj_dim: 6,
            pred_hidden: 4,
            use_predictor: true,
        },
        ..ScpConfig::default()
    }
}

pub fn tiny_supervised(seed: u64) -> SupervisedConfig {
    SupervisedConfig {
        seed,
        epochs: 2,
        batch_size: 8,
        ..SupervisedConfig::default()
    }
}

pub fn images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let data = (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new(vec![size, size], data).unwrap()
        })
        .collect()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients for every primitive, loss, encoder layer and head at `seed`.
pub fn gradcheck_suite(seed: u64) -> Vec<(String, f64)> {
    let mut s = Suite {
        seed,
        results: Vec::new(),
    };
    let mut r = s.rng(1);
    let a = random(&mut r, &[3, 4], 1.0);
    let b = random(&mut r, &[4, 2], 1.0);
    let c = random(&mut r, &[3, 4], 1.0);
    let row = random(&mut r, &[1, 4], 1.0);

    s.check("matmul", store(vec![("a", a.clone()), ("b", b.clone())]), |g, p| {
        let y = g.matmul(p.get("a")?, p.get("b")?)?;
        weighted_mean(g, y, seed)
    });
    s.check("transpose", store(vec![("a", a.clone())]), |g, p| {
        let y = g.transpose(p.get("a")?)?;
        weighted_mean(g, y, seed)
    });
    s.check("add_sub_mul", store(vec![("a", a.clone()), ("c", c.clone())]), |g, p| {
        let (x, y) = (p.get("a")?, p.get("c")?);
        let sum = g.add(x, y)?;
        let diff = g.sub(x, y)?;
        let prod = g.mul(sum, diff)?;
        let scaled = g.scale(prod, 0.7)?;
        weighted_mean(g, scaled, seed)
    });
    s.check("add_broadcast", store(vec![("a", a.clone()), ("row", row.clone())]), |g, p| {
        let y = g.add_broadcast(p.get("a")?, p.get("row")?)?;
        weighted_mean(g, y, seed)
    });
    s.check("sum_mean", store(vec![("a", a.clone())]), |g, p| {
        let x = p.get("a")?;
        let sq = g.mul(x, x)?;
        let m = g.mean(sq)?;
        let t = g.sum(x)?;
        let prod = g.mul(m, t)?;
        g.sum(prod)
    });
    for axis in [0, 1] {
        s.check(&format!("softmax_axis{axis}"), store(vec![("a", a.clone())]), move |g, p| {
            let y = g.softmax(p.get("a")?, axis)?;
            weighted_mean(g, y, seed)
        });
    }
    let gamma = random(&mut r, &[4], 1.0);
    let beta = random(&mut r, &[4], 1.0);
    s.check(
        "layer_norm",
        store(vec![("a", a.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())]),
        |g, p| {
            let y = g.layer_norm(p.get("a")?, p.get("gamma")?, p.get("beta")?, 1e-5)?;
            weighted_mean(g, y, seed)
        },
    );
    s.check(
        "batch_norm",
        store(vec![("a", a.clone()), ("gamma", gamma), ("beta", beta)]),
        |g, p| {
            let y = g.batch_norm(p.get("a")?, p.get("gamma")?, p.get("beta")?, 1e-5)?;
            weighted_mean(g, y, seed)
        },
    );
    for form in [GeluForm::Exact, GeluForm::Tanh] {
        s.check(&format!("gelu_{}", form.as_str()), store(vec![("a", a.clone())]), move |g, p| {
            let y = g.gelu(p.get("a")?, form)?;
            weighted_mean(g, y, seed)
        });
    }
    s.check("sigmoid", store(vec![("a", a.clone())]), |g, p| {
        let y = g.sigmoid(p.get("a")?)?;
        weighted_mean(g, y, seed)
    });
    s.check("normalize_rows", store(vec![("a", a.clone())]), |g, p| {
        let y = g.normalize_rows(p.get("a")?)?;
        weighted_mean(g, y, seed)
    });
    let (batch, tokens, d) = (2, 3, 4);
    let q = random(&mut r, &[batch * tokens, d], 1.0);
    let k = random(&mut r, &[batch * tokens, d], 1.0);
    let v = random(&mut r, &[batch * tokens, d], 1.0);
    for heads in [1, 2] {
        s.check(
            &format!("attention_{heads}h"),
            store(vec![("q", q.clone()), ("k", k.clone()), ("v", v.clone())]),
            move |g, p| {
                let y = g.attention(p.get("q")?, p.get("k")?, p.get("v")?, batch, tokens, heads)?;
                weighted_mean(g, y, seed)
            },
        );
    }
    s.check("segment_mean", store(vec![("q", q.clone())]), |g, p| {
        let y = g.segment_mean(p.get("q")?, tokens)?;
        weighted_mean(g, y, seed)
    });
    s.check("prepend_token", store(vec![("q", q.clone()), ("row", row)]), |g, p| {
        let y = g.prepend_token(p.get("q")?, p.get("row")?, tokens)?;
        weighted_mean(g, y, seed)
    });
    s.check("gather_slice_rows", store(vec![("q", q.clone())]), |g, p| {
        let x = p.get("q")?;
        let picked = g.gather_rows(x, &[4, 0, 4])?;
        let sliced = g.slice_rows(x, 1, 3)?;
        let both = g.add(picked, sliced)?;
        weighted_mean(g, both, seed)
    });
    let targets: Vec<usize> = (0..batch * tokens).map(|i| (i * 3 + seed as usize) % d).collect();
    // one excluded logit per row, never the target
    let mask: Vec<bool> = (0..batch * tokens * d).map(|i| i % d == (targets[i / d] + 1) % d).collect();
    s.check("cross_entropy", store(vec![("q", q.clone())]), move |g, p| {
        g.cross_entropy(p.get("q")?, &targets, Some(&mask))
    });

    // losses
    let logits = random(&mut r, &[3, 5], 1.5);
    let labels: Vec<LabelVector> = (0..3)
        .map(|i| LabelVector::one_hot(SequenceLabel::ALL[(i + seed as usize) % 5]))
        .collect();
    s.check("bce_loss", store(vec![("logits", logits)]), move |g, p| {
        let probs = g.sigmoid(p.get("logits")?)?;
        bce_loss(g, probs, &labels)
    });
    let emb = random(&mut r, &[6, 5], 1.0);
    for t in [0.1, 0.5, 1.0] {
        s.check(&format!("nt_xent_t{t}"), store(vec![("e", emb.clone())]), move |g, p| {
            nt_xent(g, p.get("e")?, &halves_pairing(3), t)
        });
    }
    let preds = random(&mut r, &[4, 5], 1.0);
    let targets = random(&mut r, &[4, 5], 1.0);
    // with the stop, targets enter as constants so both gradients see the
    // same function of the predictions
    s.check("simsiam_stopped", store(vec![("p", preds.clone())]), |g, p| {
        let pr = p.get("p")?;
        let z = g.constant(&targets)?;
        let (p1, p2) = (g.slice_rows(pr, 0, 2)?, g.slice_rows(pr, 2, 2)?);
        let (z1, z2) = (g.slice_rows(z, 0, 2)?, g.slice_rows(z, 2, 2)?);
        simsiam_loss(g, p1, p2, z1, z2, true)
    });
    s.check("simsiam_unstopped", store(vec![("p", preds), ("z", targets.clone())]), |g, p| {
        let (pr, z) = (p.get("p")?, p.get("z")?);
        let (p1, p2) = (g.slice_rows(pr, 0, 2)?, g.slice_rows(pr, 2, 2)?);
        let (z1, z2) = (g.slice_rows(z, 0, 2)?, g.slice_rows(z, 2, 2)?);
        simsiam_loss(g, p1, p2, z1, z2, false)
    });

    // encoder layers end to end, plus projector and predictor heads
    for (pooling, gelu) in [(Pooling::Mean, GeluForm::Exact), (Pooling::ClsToken, GeluForm::Tanh)] {
        let config = tiny_vit(pooling, gelu);
        let vit = VisionTransformer::new(config.clone()).unwrap();
        let heads = SimSiamHeads::new(
            HeadsConfig {
                proj_dim: 6,
                pred_hidden: 4,
                use_predictor: true,
            },
            config.embed_dim,
            gelu,
            config.layer_norm_eps,
        )
        .unwrap();
        let mut params = ParamStore::new();
        let mut init = s.rng(2);
        vit.init_params(&mut params, &mut init).unwrap();
        heads.init_params(&mut params, &mut init).unwrap();
        // larger weights than the default init so every path carries signal
        for (_, t) in params.iter_mut() {
            let noise: Vec<f64> = (0..t.numel()).map(|_| init.random_range(-0.3..0.3)).collect();
            for (w, n) in t.data_mut().iter_mut().zip(noise) {
                *w += n;
            }
        }
        let imgs = images(&mut s.rng(3), 6, config.image_size);
        let name = format!("encoder_{}_{}", pooling.as_str(), gelu.as_str());
        s.check_at(&name, params, ENCODER_GRAD_EPS, move |g, p| {
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let e = vit.forward(g, p, &refs)?;
            let z = heads.project(g, p, e)?;
            let pr = heads.predict(g, p, z)?;
            let both = g.add(z, pr)?;
            weighted_mean(g, both, seed)
        });
    }
    s.results
}
