#![allow(dead_code)]

use kws_core::tensor::{Graph, Tensor, Var};
use kws_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn uniform_f32(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Normwise relative error `max|a − n| / max(max|a|, max|n|, 1e-6)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(1e-6, f64::max);
    diff / scale
}

/// Scalar `Σ r ⊙ f(inputs)` built on a fresh graph.
fn probe<F>(f: &F, inputs: &[Tensor<f64>], weights: &[f64], grad: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
            t.set_requires_grad(grad);
            g.leaf(&t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    assert_eq!(
        shape.iter().product::<usize>(),
        weights.len(),
        "probe weights must match output"
    );
    let r = g.constant(shape, weights.to_vec())?;
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

pub struct Check {
    /// Worst normwise relative error over all inputs.
    pub err: f64,
    /// Smallest |ReLU input| seen at the evaluation point.
    pub kink: f64,
}

/// Analytic gradients of every input against central differences.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], seed: u64) -> Result<Check>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).len()
    };
    let mut r = rng(seed);
    let weights: Vec<f64> = (0..out_len).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (mut g, vars, loss) = probe(&f, inputs, &weights, true)?;
    let kink = g.nearest_relu_kink().unwrap_or(f64::INFINITY);
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        for k in 0..t.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut moved: Vec<Tensor<f64>> = inputs.to_vec();
                moved[i].data_mut()[k] += delta;
                let (g, _, loss) = probe(&f, &moved, &weights, false)?;
                Ok(g.value(loss)[0])
            };
            numeric.push((eval(H)? - eval(-H)?) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(Check { err: worst, kink })
}

/// `n` one-second clips, label `i % 12`, each a class-specific tone with a
/// random phase, level and hiss.
pub fn toy_examples(n: usize, seed: u64) -> Vec<kws_core::dataset::Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 12;
            let freq = 250.0 + 230.0 * label as f64;
            let phase = r.gen_range(0.0..std::f64::consts::TAU);
            let amp = r.gen_range(0.1..0.5);
            let samples = (0..16_000)
                .map(|t| {
                    let s = amp * (std::f64::consts::TAU * freq * t as f64 / 16_000.0 + phase).sin();
                    (s + r.gen_range(-0.02..0.02)) as f32
                })
                .collect();
            let clip = kws_core::frontend::AudioClip::one_second(samples).unwrap();
            kws_core::dataset::Example::from_clip(clip, label)
        })
        .collect()
}

pub fn noise_bank(seed: u64) -> Vec<kws_core::frontend::AudioClip> {
    let mut r = rng(seed);
    (0..2)
        .map(|_| {
            let s = (0..24_000).map(|_| r.gen_range(-0.3f32..0.3)).collect();
            kws_core::frontend::AudioClip::new(s, 16_000).unwrap()
        })
        .collect()
}
