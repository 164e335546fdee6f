//! Reverse-mode gradients against central finite differences, twenty random
//! instances per quantity. Each check panics on the first mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfinv_core::autograd::{check_gradients, Graph, Var};
use sdfinv_core::encoders::Module;
use sdfinv_core::fusion::{film_modulate, FiLMLayer};
use sdfinv_core::generator::{points_tensor, Discriminator, Generator, GeneratorConfig};
use sdfinv_core::losses::{
    ada_residual_loss, adversarial_loss, code_loss, discriminator_loss, geometry_loss, l1, l2, r1_penalty, reconstruction_loss,
    GeometryPrediction, LossWeights, Proxies,
};
use sdfinv_core::rendering::Vec3;
use sdfinv_core::Tensor;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-3;
const H: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn rand_point(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    loop {
        let p: Vec3 = std::array::from_fn(|_| rng.random_range(-r..r));
        if p.iter().map(|c| c * c).sum::<f64>() < r * r {
            return p;
        }
    }
}

fn rand_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let p = rand_point(rng, 1.0);
    let n = p.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
    p.map(|c| c / n)
}

fn tiny_generator(seed: u64) -> Generator {
    Generator::new(GeneratorConfig {
        latent_dim: 4,
        g0_layers: 2,
        g1_layers: 1,
        width: 8,
        feature_channels: 4,
        g1_hidden: 4,
        lo_res: 4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn assert_check(name: &str, seed: u64, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let r = check_gradients(inputs, f, H, FLOOR);
    assert!(r.n_checked > 0);
    assert!(r.max_relative_error <= TOL, "{name} instance {seed}: relative error {} at {:?}", r.max_relative_error, r.worst);
}

pub fn surface_normals_match_sdf_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = tiny_generator(seed);
        let w = gen.sample_latent(1, seed).unwrap().remove(0);
        let pts: Vec<Vec3> = (0..6).map(|_| rand_point(&mut rng, 0.9)).collect();
        let mut g = Graph::new();
        let codes = g.constant(w.codes.clone());
        let (_, normals, norms) = gen.sdf_and_normals(&mut g, codes, &pts);
        let normals = g.value(normals).clone();
        let h = 1e-5;
        for (i, p) in pts.iter().enumerate() {
            for k in 0..3 {
                let (mut a, mut b) = (*p, *p);
                a[k] += h;
                b[k] -= h;
                let s = gen.sdf_values(&w, &[a, b]).unwrap();
                let fd = (s[0] - s[1]) / (2.0 * h);
                let analytic = normals.data()[3 * i + k] * norms[i];
                let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR);
                assert!(err <= TOL, "instance {seed} point {i} axis {k}: {analytic} vs {fd}");
            }
        }
    }
}

pub fn l2_and_l1_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = [rng.random_range(1..5), rng.random_range(1..6)];
        let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let inputs = [a, b];
        assert_check("l2", seed, &inputs, |g, v| l2(g, v[0], v[1]));
        assert_check("l1", seed, &inputs, |g, v| l1(g, v[0], v[1]));
    }
}

pub fn geometry_loss_gradient_through_generator() {
    let weights = LossWeights::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let gen = tiny_generator(seed);
        let w = gen.sample_latent(1, seed).unwrap().remove(0);
        let on: Vec<Vec3> = (0..4).map(|_| rand_point(&mut rng, 0.8)).collect();
        let free: Vec<Vec3> = (0..6).map(|_| rand_point(&mut rng, 1.0)).collect();
        let normals: Vec<Vec3> = (0..on.len()).map(|_| rand_unit(&mut rng)).collect();
        let valid: Vec<bool> = (0..on.len()).map(|_| rng.random_bool(0.75)).collect();
        let sdf_free: Vec<f64> = (0..free.len()).map(|_| rng.random_range(-0.3..0.6)).collect();
        assert_check("geometry", seed, &[w.codes.clone()], |g, v| {
            let (sdf_on, normals_on, _) = gen.sdf_and_normals(g, v[0], &on);
            let x = g.constant(points_tensor(&free));
            let f = gen.trunk(g, v[0], x);
            let sdf_f = gen.sdf_from_features(g, f, &free);
            let pred = GeometryPrediction { sdf_on, normals_on, sdf_free: sdf_f };
            let (lo, lf) = geometry_loss(g, pred, &normals, &valid, &sdf_free, &weights).unwrap();
            g.add(lo, lf)
        });
    }
}

pub fn code_loss_gradient() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = [rng.random_range(1..6), rng.random_range(2..8)];
        let w_hat = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        assert_check("code", seed, &[w_hat], |g, v| code_loss(g, v[0], &w).unwrap());
    }
}

pub fn reconstruction_loss_gradient_including_proxies() {
    let weights = LossWeights::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let proxies = Proxies::new(seed);
        let pred = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let target = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        assert_check("perceptual", seed, &[pred.clone()], |g, v| {
            let t = g.constant(target.clone());
            proxies.perceptual.distance(g, v[0], t)
        });
        assert_check("similarity", seed, &[pred.clone()], |g, v| {
            let t = g.constant(target.clone());
            proxies.similarity.cosine(g, v[0], t)
        });
        assert_check("reconstruction", seed, &[pred], |g, v| reconstruction_loss(g, v[0], &target, &weights, &proxies).unwrap().total);
    }
}

pub fn adversarial_and_critic_gradients_wrt_images() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let disc = Discriminator::new(8, 6, seed).unwrap();
        let fakes = [rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0), rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0)];
        let real = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        assert_check("adversarial", seed, &fakes, |g, v| {
            let logits: Vec<Var> = v.iter().map(|x| disc.logit(g, *x).unwrap()).collect();
            adversarial_loss(g, &logits).unwrap()
        });
        let mut all = fakes.to_vec();
        all.push(real);
        assert_check("discriminator", seed, &all, |g, v| {
            let fake: Vec<Var> = v[..2].iter().map(|x| disc.logit(g, *x).unwrap()).collect();
            let real = [disc.logit(g, v[2]).unwrap()];
            discriminator_loss(g, &real, &fake).unwrap()
        });
    }
}

pub fn adversarial_losses_wrt_logits() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(550 + seed);
        let logits: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[1, 1], -3.0, 3.0)).collect();
        assert_check("adversarial logits", seed, &logits, |g, v| adversarial_loss(g, v).unwrap());
        assert_check("discriminator logits", seed, &logits, |g, v| discriminator_loss(g, &v[..2], &v[2..]).unwrap());
        let sq: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[1], 0.0, 2.0)).collect();
        assert_check("r1 reduction", seed, &sq, |g, v| r1_penalty(g, v));
    }
}

fn r1_value(disc: &Discriminator, images: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let sq: Vec<Var> = images
        .iter()
        .map(|im| {
            let x = g.constant(im.clone());
            disc.logit_and_grad_sq(&mut g, x).unwrap().1
        })
        .collect();
    let r = r1_penalty(&mut g, &sq);
    g.value(r).item()
}

pub fn r1_penalty_gradient_wrt_critic_parameters() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut disc = Discriminator::new(8, 5, seed).unwrap();
        let images = [rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0), rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0)];
        let mut g = Graph::new();
        let sq: Vec<Var> = images
            .iter()
            .map(|im| {
                let x = g.constant(im.clone());
                disc.logit_and_grad_sq(&mut g, x).unwrap().1
            })
            .collect();
        let r = r1_penalty(&mut g, &sq);
        let grads = g.backward(r);
        let analytic = g.param_grads(&grads, disc.params());
        for p in 0..disc.params().len() {
            let a = analytic[p].clone().unwrap_or_else(|| Tensor::zeros(disc.params().value(p).shape()));
            for i in 0..a.len() {
                let orig = disc.params().value(p).data()[i];
                disc.params_mut().value_mut(p).data_mut()[i] = orig + H;
                let up = r1_value(&disc, &images);
                disc.params_mut().value_mut(p).data_mut()[i] = orig - H;
                let down = r1_value(&disc, &images);
                disc.params_mut().value_mut(p).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * H);
                let an = a.data()[i];
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(FLOOR);
                assert!(err <= TOL, "instance {seed} param {p} elem {i}: {an} vs {fd}");
            }
        }
    }
}

pub fn ada_residual_gradient() {
    let weights = LossWeights::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let hi = rand_tensor(&mut rng, &[3, 8, 8], 0.0, 1.0);
        let lo = rand_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0);
        let delta = rand_tensor(&mut rng, &[3, 8, 8], -0.5, 0.5);
        assert_check("ada", seed, &[delta], |g, v| ada_residual_loss(g, v[0], &hi, &lo, &weights).unwrap());
    }
}

pub fn film_gradient_wrt_target_and_condition() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut layer = FiLMLayer::new("film", 3, 4, 5, seed);
        // move the layer off its identity initialization so both paths carry gradient
        let ps = layer.params_mut();
        for p in 0..ps.len() {
            for v in ps.value_mut(p).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let target = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let cond = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let weights = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        assert_check("film", seed, &[target, cond], |g, v| {
            let y = film_modulate(g, v[0], v[1], &layer).unwrap();
            let wv = g.constant(weights.clone());
            let p = g.mul(y, wv);
            g.sum(p)
        });
    }
}

/// Every check with a short label.
pub const CHECKS: &[(&str, fn())] = &[
    ("surface_normals_match_sdf_differences", surface_normals_match_sdf_differences),
    ("l2_and_l1_gradients", l2_and_l1_gradients),
    ("geometry_loss_gradient_through_generator", geometry_loss_gradient_through_generator),
    ("code_loss_gradient", code_loss_gradient),
    ("reconstruction_loss_gradient_including_proxies", reconstruction_loss_gradient_including_proxies),
    ("adversarial_and_critic_gradients_wrt_images", adversarial_and_critic_gradients_wrt_images),
    ("adversarial_losses_wrt_logits", adversarial_losses_wrt_logits),
    ("r1_penalty_gradient_wrt_critic_parameters", r1_penalty_gradient_wrt_critic_parameters),
    ("ada_residual_gradient", ada_residual_gradient),
    ("film_gradient_wrt_target_and_condition", film_gradient_wrt_target_and_condition),
];
