use cmr_ssl::autodiff::Tensor;
use cmr_ssl::metrics::{roc_auc, roc_auc_bruteforce};
use cmr_ssl::objectives::nt_xent_value;
use cmr_ssl::rng::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// NT-Xent by direct enumeration: every anchor, every other embedding.
pub fn nt_xent_bruteforce(rows: &[Vec<f64>], pairs: &[usize], temperature: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let positive = (cosine(&rows[i], &rows[pairs[i]]) / temperature).exp();
        let mut denominator = 0.0;
        for j in 0..n {
            if j != i {
                denominator += (cosine(&rows[i], &rows[j]) / temperature).exp();
            }
        }
        total += -(positive / denominator).ln();
    }
    total / n as f64
}

/// A uniformly shuffled perfect matching of `0..2k`.
pub fn random_matching(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..2 * k).collect();
    order.shuffle(rng);
    let mut pairs = vec![0; 2 * k];
    for c in order.chunks(2) {
        pairs[c[0]] = c[1];
        pairs[c[1]] = c[0];
    }
    pairs
}

/// Largest `|nt_xent - oracle|` over `batches` random batches with `K <= 8`.
pub fn nt_xent_oracle_gap(seed: u64, batches: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for b in 0..batches {
        let mut rng = rng_for(seed, &[0x0A, b as u64]);
        let k = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let temperature = rng.random_range(0.05..2.0);
        let rows: Vec<Vec<f64>> = (0..2 * k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let pairs = random_matching(&mut rng, k);
        let flat = rows.iter().flatten().copied().collect();
        let t = Tensor::new(vec![2 * k, d], flat).unwrap();
        let fast = nt_xent_value(&t, &pairs, temperature).unwrap();
        worst = worst.max((fast - nt_xent_bruteforce(&rows, &pairs, temperature)).abs());
    }
    worst
}

/// Largest `|roc_auc - roc_auc_bruteforce|` over random instances with
/// `n <= 50`, drawn on a coarse grid so that ties are frequent.
pub fn roc_auc_oracle_gap(seed: u64, instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < instances {
        attempt += 1;
        let mut rng = rng_for(seed, &[0x0B, attempt]);
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (Ok(fast), Ok(slow)) = (roc_auc(&scores, &labels), roc_auc_bruteforce(&scores, &labels)) else {
            continue;
        };
        worst = worst.max((fast - slow).abs());
        done += 1;
    }
    worst
}
