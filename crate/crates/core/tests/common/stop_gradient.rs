use std::collections::BTreeMap;

use cmr_ssl::autodiff::{GeluForm, Graph, ParamStore, Tensor};
use cmr_ssl::objectives::{simsiam_loss, HeadsConfig, SimSiamHeads};
use cmr_ssl::rng::rng_for;
use cmr_ssl::vit::{Pooling, VisionTransformer};
use rand::Rng;

use super::{images, tiny_vit};

const PAIRS: usize = 4;

pub struct Toy {
    vit: VisionTransformer,
    heads: SimSiamHeads,
    params: ParamStore,
    views: Vec<Tensor>,
}

pub fn toy(seed: u64) -> Toy {
    let config = tiny_vit(Pooling::Mean, GeluForm::Exact);
    let vit = VisionTransformer::new(config.clone()).unwrap();
    let heads_config = HeadsConfig {
        proj_dim: 6,
        pred_hidden: 4,
        use_predictor: true,
    };
    let heads = SimSiamHeads::new(heads_config, config.embed_dim, config.gelu, config.layer_norm_eps).unwrap();
    let mut params = ParamStore::new();
    let mut rng = rng_for(seed, &[1]);
    vit.init_params(&mut params, &mut rng).unwrap();
    heads.init_params(&mut params, &mut rng).unwrap();
    let views = images(&mut rng_for(seed, &[2]), 2 * PAIRS, config.image_size);
    Toy { vit, heads, params, views }
}

/// Gradient of the SimSiam loss for every parameter; parameters the
/// backward pass never reached map to zeros.
pub fn gradients(toy: &Toy, stop_gradient: bool) -> BTreeMap<String, Vec<f64>> {
    let mut g = Graph::new();
    let p = toy.params.bind(&mut g).unwrap();
    let refs: Vec<&Tensor> = toy.views.iter().collect();
    let e = toy.vit.forward(&mut g, &p, &refs).unwrap();
    let z = toy.heads.project(&mut g, &p, e).unwrap();
    let q = toy.heads.predict(&mut g, &p, z).unwrap();
    let (z1, z2) = (g.slice_rows(z, 0, PAIRS).unwrap(), g.slice_rows(z, PAIRS, PAIRS).unwrap());
    let (p1, p2) = (g.slice_rows(q, 0, PAIRS).unwrap(), g.slice_rows(q, PAIRS, PAIRS).unwrap());
    let loss = simsiam_loss(&mut g, p1, p2, z1, z2, stop_gradient).unwrap();
    let grads = g.backward(loss).unwrap();
    toy.params
        .iter()
        .map(|(name, t)| {
            let v = p.get(name).unwrap();
            (name.to_string(), grads.get_or_zeros(v, t.numel()))
        })
        .collect()
}

/// Makes the predictor output a constant, leaving the z-branch as the
/// only route from the loss back to the projector and encoder.
fn freeze_predictor_output(toy: &mut Toy, seed: u64) {
    let mut rng = rng_for(seed, &[3]);
    toy.params.get_mut("predictor.fc2.weight").unwrap().data_mut().fill(0.0);
    for b in toy.params.get_mut("predictor.fc2.bias").unwrap().data_mut() {
        *b = rng.random_range(0.5..1.5);
    }
}

fn upstream(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("projector.")
}

fn largest(grads: &BTreeMap<String, Vec<f64>>, keep: impl Fn(&str) -> bool) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| keep(n))
        .flat_map(|(_, g)| g.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

/// Returns the largest upstream gradient through the stopped z-branch and
/// through the same branch with the stop removed.
pub fn z_branch_gradients(seed: u64) -> (f64, f64) {
    let mut t = toy(seed);
    freeze_predictor_output(&mut t, seed);
    (largest(&gradients(&t, true), upstream), largest(&gradients(&t, false), upstream))
}

/// Largest change in any encoder gradient when the stop is removed.
pub fn encoder_gradient_change(seed: u64) -> f64 {
    let t = toy(seed);
    let (with, without) = (gradients(&t, true), gradients(&t, false));
    with.iter()
        .filter(|(n, _)| n.starts_with("encoder."))
        .flat_map(|(n, a)| a.iter().zip(&without[n]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}
