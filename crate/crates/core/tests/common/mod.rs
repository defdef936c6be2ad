//! Test-only helpers: a central finite-difference oracle that evaluates the
//! forward pass alone and never consults the tape's backward rules.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsg::tensor::{Graph, NodeId, Tensor};
use tsg::Result;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `f` on fresh leaves, projects its output onto a fixed random
/// direction to get a scalar, and compares the tape gradient of every input
/// with central differences. Returns the worst relative error over inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let projection = |g: &mut Graph<f64>, y: NodeId| -> NodeId {
        let shape = g.shape(y).to_vec();
        let mut r = rng(seed ^ 0x9e37_79b9);
        let dir = random_tensor(&mut r, &shape, -1.0, 1.0);
        let d = g.constant(dir).unwrap();
        let p = g.mul(y, d).unwrap();
        g.sum(p).unwrap()
    };
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.constant(v.clone()).unwrap()).collect();
        let y = f(&mut g, &ids).unwrap();
        let root = projection(&mut g, y);
        g.value(root).item()
    };

    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.input(v.clone()).unwrap()).collect();
    let y = f(&mut g, &ids).unwrap();
    let root = projection(&mut g, y);
    let grads = g.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(ids[k])
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += FD_STEP;
            let up = eval(&vals);
            vals[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&vals);
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

type InputGen = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Apply = fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

/// One differentiable operation under test.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: InputGen,
    pub apply: Apply,
}

fn u(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(r, shape, -1.5, 1.5)
}

/// Every differentiable operation the model uses, with random-input generators.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", inputs: |r| vec![u(r, &[3, 4]), u(r, &[4, 2])], apply: |g, x| g.matmul(x[0], x[1]) },
        OpCase { name: "transpose", inputs: |r| vec![u(r, &[3, 5])], apply: |g, x| g.transpose(x[0]) },
        OpCase { name: "add", inputs: |r| vec![u(r, &[2, 3]), u(r, &[2, 3])], apply: |g, x| g.add(x[0], x[1]) },
        OpCase { name: "sub", inputs: |r| vec![u(r, &[2, 3]), u(r, &[2, 3])], apply: |g, x| g.sub(x[0], x[1]) },
        OpCase { name: "mul", inputs: |r| vec![u(r, &[2, 3]), u(r, &[2, 3])], apply: |g, x| g.mul(x[0], x[1]) },
        OpCase { name: "affine", inputs: |r| vec![u(r, &[4])], apply: |g, x| g.affine(x[0], -1.5, 0.3) },
        OpCase { name: "add_bias", inputs: |r| vec![u(r, &[3, 4]), u(r, &[4])], apply: |g, x| g.add_bias(x[0], x[1]) },
        OpCase {
            name: "add_channel_bias",
            inputs: |r| vec![u(r, &[3, 2, 2]), u(r, &[3])],
            apply: |g, x| g.add_channel_bias(x[0], x[1]),
        },
        OpCase {
            name: "channel_affine",
            inputs: |r| vec![u(r, &[3, 4]), u(r, &[3]), u(r, &[3])],
            apply: |g, x| g.channel_affine(x[0], x[1], x[2]),
        },
        OpCase { name: "concat", inputs: |r| vec![u(r, &[2, 3]), u(r, &[2, 2])], apply: |g, x| g.concat(&[x[0], x[1]], 1) },
        OpCase { name: "slice", inputs: |r| vec![u(r, &[3, 5])], apply: |g, x| g.slice(x[0], 1, 1, 3) },
        OpCase { name: "reshape", inputs: |r| vec![u(r, &[2, 6])], apply: |g, x| g.reshape(x[0], &[3, 4]) },
        OpCase {
            name: "leaky_relu",
            inputs: |r| vec![random_away_from_zero(r, &[3, 4])],
            apply: |g, x| g.leaky_relu(x[0], 0.2),
        },
        OpCase { name: "sigmoid", inputs: |r| vec![u(r, &[5])], apply: |g, x| g.sigmoid(x[0]) },
        OpCase { name: "tanh", inputs: |r| vec![u(r, &[5])], apply: |g, x| g.tanh(x[0]) },
        OpCase { name: "exp", inputs: |r| vec![u(r, &[5])], apply: |g, x| g.exp(x[0]) },
        OpCase { name: "log", inputs: |r| vec![random_tensor(r, &[5], 0.1, 3.0)], apply: |g, x| g.log(x[0]) },
        OpCase { name: "softplus", inputs: |r| vec![random_tensor(r, &[5], -4.0, 4.0)], apply: |g, x| g.softplus(x[0]) },
        OpCase { name: "sum", inputs: |r| vec![u(r, &[3, 4])], apply: |g, x| g.sum(x[0]) },
        OpCase { name: "mean", inputs: |r| vec![u(r, &[3, 4])], apply: |g, x| g.mean(x[0]) },
        OpCase { name: "mean_axis", inputs: |r| vec![u(r, &[2, 3, 4])], apply: |g, x| g.mean_axis(x[0], 1) },
        OpCase { name: "var_axis", inputs: |r| vec![u(r, &[2, 3, 4])], apply: |g, x| g.var_axis(x[0], 2) },
        OpCase { name: "softmax", inputs: |r| vec![u(r, &[3, 4])], apply: |g, x| g.softmax(x[0], 1) },
        OpCase {
            name: "softmax_masked",
            inputs: |r| vec![u(r, &[4, 3])],
            apply: |g, x| g.softmax_masked(x[0], 0, Some(&[true, false, true, true])),
        },
        OpCase {
            name: "conv2d",
            inputs: |r| vec![u(r, &[2, 6, 6]), u(r, &[3, 2, 4, 4])],
            apply: |g, x| g.conv2d(x[0], x[1], 2, 1),
        },
        OpCase {
            name: "conv2d_stride1",
            inputs: |r| vec![u(r, &[2, 4, 5]), u(r, &[2, 2, 3, 3])],
            apply: |g, x| g.conv2d(x[0], x[1], 1, 1),
        },
        OpCase { name: "conv1x1", inputs: |r| vec![u(r, &[3, 2, 3]), u(r, &[4, 3])], apply: |g, x| g.conv1x1(x[0], x[1]) },
        OpCase { name: "upsample_nearest", inputs: |r| vec![u(r, &[2, 2, 3])], apply: |g, x| g.upsample_nearest(x[0], 2) },
        OpCase { name: "space_to_depth", inputs: |r| vec![u(r, &[2, 4, 4])], apply: |g, x| g.space_to_depth(x[0], 2) },
        OpCase { name: "depth_to_space", inputs: |r| vec![u(r, &[8, 2, 2])], apply: |g, x| g.depth_to_space(x[0], 2) },
        OpCase { name: "embedding", inputs: |r| vec![u(r, &[5, 3])], apply: |g, x| g.embedding(x[0], &[1, 4, 1, 0]) },
        OpCase { name: "instance_norm", inputs: |r| vec![u(r, &[3, 5])], apply: |g, x| g.instance_norm(x[0], 1e-5) },
        OpCase { name: "pearson", inputs: |r| vec![u(r, &[6]), u(r, &[6])], apply: |g, x| g.pearson(x[0], x[1], 1e-8) },
        OpCase {
            name: "fully_connected",
            inputs: |r| vec![u(r, &[2, 3]), u(r, &[3, 4]), u(r, &[4])],
            apply: |g, x| tsg::tensor::fully_connected(g, x[0], x[1], x[2]),
        },
        OpCase {
            name: "downsample_block",
            inputs: |r| vec![u(r, &[2, 4, 4]), u(r, &[3, 2, 4, 4]), u(r, &[3])],
            apply: |g, x| {
                let y = g.conv2d(x[0], x[1], 2, 1)?;
                let y = g.add_channel_bias(y, x[2])?;
                g.leaky_relu(y, 0.2)
            },
        },
    ]
}

/// Worst relative error of one op over `instances` random draws.
pub fn worst_op_error(case: &OpCase, instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut r = rng(1000 + seed);
            let inputs = (case.inputs)(&mut r);
            check_gradients(&inputs, seed, case.apply)
        })
        .fold(0.0, f64::max)
}

/// Relative error between the tape gradient and central differences of a
/// fixed random projection of the final-stage image with respect to
/// `entries` randomly chosen weights of the first stage-one style layer,
/// on the tiny preset in `f64`.
pub fn end_to_end_probe_error(seed: u64, entries: usize) -> f64 {
    use tsg::model::{Model, ModelConfig};
    use tsg::tensor::ParamStore;
    use tsg::text::Vocabulary;

    let vocab = Vocabulary::from_tokens(["warm", "cold", "calm", "stripes"]).unwrap();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(ModelConfig::tiny(), vocab, &mut store, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    let image = random_tensor(&mut r, &[3, 8, 8], 0.0, 1.0);
    let tokens = model.tokenize("warm calm stripes");
    let (z, noise) = model.sample_noise::<f64>(&mut r);
    let dir = random_tensor(&mut r, &[3, 8, 8], -1.0, 1.0);
    let enc = model.encode_image(&image).unwrap();
    let weight = store.id("sg0.fc0.weight").expect("first style layer");

    let probe = |store: &ParamStore<f64>| -> (Graph<f64>, NodeId) {
        let mut g = Graph::new();
        let gen = model.generate(&mut g, store, &enc.v, &tokens, z.clone(), noise.clone()).unwrap();
        let img = gen.stages.last().unwrap().image;
        let d = g.constant(dir.clone()).unwrap();
        let p = g.mul(img, d).unwrap();
        let root = g.sum(p).unwrap();
        (g, root)
    };

    let (mut g, root) = probe(&store);
    let w_node = g.param(&store, weight);
    let grads = g.backward(root).unwrap();
    let analytic_all = grads.wrt(w_node).unwrap().to_f64_vec();

    let n = store.value(weight).len();
    let picks: Vec<usize> = (0..entries).map(|_| r.random_range(0..n)).collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| analytic_all[i]).collect();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&i| {
            let mut s = store.clone();
            s.value_mut(weight).data_mut()[i] += FD_STEP;
            let (g, root) = probe(&s);
            let up = g.value(root).item();
            s.value_mut(weight).data_mut()[i] -= 2.0 * FD_STEP;
            let (g, root) = probe(&s);
            let down = g.value(root).item();
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    rel_error(&analytic, &numeric)
}
