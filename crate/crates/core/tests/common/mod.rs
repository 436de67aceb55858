//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volage::attention::{attention_param_count, SharedAttentionParams};
use volage::checkpoint::{encode_checkpoint, CheckpointDoc};
use volage::data::{synth_generate, Dataset, SynthSpec};
use volage::model::AttentionParams;
use volage::training::{evaluate, stratified_split, train, History, TrainConfig};
use volage::{AttentionMode, BrainAgeModel, ModelConfig, Tensor};

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Two conv layers with channels [2,3], 8³ input, shared attention with k=3.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![2, 3],
        dense_widths: vec![4, 1],
        attention_mode: AttentionMode::Shared,
        attention_kernel: 3,
        input_shape: [8, 8, 8],
        flatten_features: None,
        ..ModelConfig::default()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn weighted(model: &BrainAgeModel<f64>, x: &Tensor<f64>, w: &[f64]) -> f64 {
    let p = model.predict(x).unwrap();
    p.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_param: f64,
    pub worst_input: f64,
}

/// Compares every parameter and input gradient of `L = Σ_n w_n·pred_n`
/// against central differences with step `eps`.
pub fn model_grad_check(config: &ModelConfig, seed: u64, eps: f64) -> GradCheck {
    let mut model = BrainAgeModel::<f32>::build(config, seed).unwrap().cast::<f64>();
    // nonzero biases so no unit sits exactly on a relu kink
    for (i, t) in model.parameters_mut().into_iter().enumerate() {
        if t.rank() == 1 {
            let r = rand_tensor(t.shape(), 100 + i as u64);
            t.data_mut().iter_mut().zip(r.data()).for_each(|(v, r)| *v = 0.1 * r);
        }
    }
    let [d, h, w] = config.input_shape;
    let mut x = rand_tensor(&[2, 1, d, h, w], seed + 1);
    let weights = [0.7, -1.3];

    let fwd = model.forward(&x, false, 0).unwrap();
    let back = model.backward(&fwd.caches, &Tensor::new(&[2], weights.to_vec()).unwrap()).unwrap();
    let analytic: Vec<Vec<f64>> = back.grads.tensors().iter().map(|t| t.data().to_vec()).collect();

    let mut out = GradCheck {
        checked: 0,
        worst_param: 0.0,
        worst_input: 0.0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = model.parameters()[p].data()[i];
            model.parameters_mut()[p].data_mut()[i] = orig + eps;
            let up = weighted(&model, &x, &weights);
            model.parameters_mut()[p].data_mut()[i] = orig - eps;
            let down = weighted(&model, &x, &weights);
            model.parameters_mut()[p].data_mut()[i] = orig;
            out.worst_param = out.worst_param.max(rel_err(a, (up - down) / (2.0 * eps)));
            out.checked += 1;
        }
    }
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = weighted(&model, &x, &weights);
        x.data_mut()[i] = orig - eps;
        let down = weighted(&model, &x, &weights);
        x.data_mut()[i] = orig;
        out.worst_input = out.worst_input.max(rel_err(back.input.data()[i], (up - down) / (2.0 * eps)));
        out.checked += 1;
    }
    out
}

pub struct TyingCheck {
    pub outputs_identical: bool,
    pub rel_err: f64,
    pub sites: usize,
}

/// Shared-parameter gradient against the sum of the per-site gradients of an
/// untied copy built from the same initial values.
pub fn tying_check(config: &ModelConfig, seed: u64) -> TyingCheck {
    let shared = BrainAgeModel::<f32>::build(config, seed).unwrap().cast::<f64>();
    let untied = shared.with_attention_mode(AttentionMode::PerLayer).unwrap();
    let [d, h, w] = config.input_shape;
    let x = rand_tensor(&[3, 1, d, h, w], seed + 7);
    let up = Tensor::new(&[3], vec![1.0, -0.5, 2.0]).unwrap();

    let fs = shared.forward(&x, false, 0).unwrap();
    let fu = untied.forward(&x, false, 0).unwrap();
    let bs = shared.backward(&fs.caches, &up).unwrap();
    let bu = untied.backward(&fu.caches, &up).unwrap();

    let k = config.attention_kernel;
    let mut sum = SharedAttentionParams::<f64>::zeros(k).unwrap();
    for site in &bu.grads.attention {
        sum.kernel.add_assign(&site.kernel).unwrap();
        sum.bias.add_assign(&site.bias).unwrap();
    }
    let tied = &bs.grads.attention[0];
    let a: Vec<f64> = tied.kernel.data().iter().chain(tied.bias.data()).copied().collect();
    let b: Vec<f64> = sum.kernel.data().iter().chain(sum.bias.data()).copied().collect();
    assert_eq!(a.len(), attention_param_count(k));
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let rel = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
    TyingCheck {
        outputs_identical: fs.predictions == fu.predictions,
        rel_err: rel,
        sites: bu.grads.attention.len(),
    }
}

/// Blob occupies `[BLOB_LO, BLOB_LO + 6)` on every axis of a 32³ volume.
pub const BLOB_LO: usize = 9;
pub const BLOB_EXTENT: usize = 6;

/// Three single-channel stages whose conv is an identity tap, attention
/// saturated open, and a linear head reading the deepest cell that covers
/// the blob; for a uniform blob the prediction equals its mean intensity.
pub fn rigged_blob_model() -> (BrainAgeModel<f64>, Tensor<f64>) {
    let cfg = ModelConfig {
        conv_channels: vec![1, 1, 1],
        dense_widths: vec![1],
        input_shape: [32, 32, 32],
        dropout_conv: 0.0,
        dropout_dense: 0.0,
        flatten_features: None,
        ..ModelConfig::default()
    };
    let mut model = BrainAgeModel::<f32>::build(&cfg, 0).unwrap().cast::<f64>();
    for conv in &mut model.convs {
        conv.weight = Tensor::zeros(conv.weight.shape());
        // tap (1,1,1) with padding 1 reads the voxel at the output index
        let last = conv.weight.len() - 1;
        conv.weight.data_mut()[last] = 1.0;
        conv.bias = Tensor::zeros(&[1]);
    }
    let AttentionParams::Shared(theta) = &mut model.attention else {
        unreachable!("default mode is shared")
    };
    theta.kernel = Tensor::zeros(theta.kernel.shape());
    theta.bias = Tensor::full(&[1], 30.0);
    let head = &mut model.dense[0];
    let g = 4;
    let cell = BLOB_LO / 8;
    head.weight = Tensor::from_fn(&[g * g * g, 1], |i| if i == (cell * g + cell) * g + cell { 1.0 } else { 0.0 });
    head.bias = Tensor::zeros(&[1]);

    let inside = |i: usize| (BLOB_LO..BLOB_LO + BLOB_EXTENT).contains(&i);
    let vol = Tensor::from_fn(&[1, 1, 32, 32, 32], |i| {
        let (z, y, x) = (i / 1024, (i / 32) % 32, i % 32);
        if inside(z) && inside(y) && inside(x) {
            1.0
        } else {
            0.1
        }
    });
    (model, vol)
}

pub fn argmax3(t: &Tensor<f32>) -> [usize; 3] {
    let [_, h, w]: [usize; 3] = t.shape().try_into().unwrap();
    let (mut best, mut at) = (f32::NEG_INFINITY, 0);
    for (i, &v) in t.data().iter().enumerate() {
        if v > best {
            best = v;
            at = i;
        }
    }
    [at / (h * w), (at / w) % h, at % w]
}

pub fn in_blob(p: [usize; 3]) -> bool {
    p.iter().all(|&c| (BLOB_LO..BLOB_LO + BLOB_EXTENT).contains(&c))
}

/// Output of the desk-scale end-to-end run on synthetic phantoms.
pub struct SynthRun {
    pub test_mae: f64,
    pub baseline_mae: f64,
    pub checkpoint: Vec<u8>,
    pub history_csv: String,
    pub history: History,
}

pub fn synth_run_config() -> (SynthSpec, ModelConfig, TrainConfig) {
    let spec = SynthSpec {
        n_subjects: 200,
        age_range: (60.0, 86.0),
        shape: [32, 32, 32],
        noise_sigma: 0.05,
        seed: 0,
    };
    let model = ModelConfig {
        conv_channels: vec![4, 8, 16, 32],
        dense_widths: vec![64, 16, 1],
        input_shape: [32, 32, 32],
        flatten_features: None,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    (spec, model, train)
}

pub fn synth_run() -> SynthRun {
    let (spec, model_cfg, train_cfg) = synth_run_config();
    let data = Dataset::new("synth", synth_generate(&spec).unwrap()).unwrap().normalized().unwrap();
    let split = stratified_split(&data.ages(), 0.2, 3.0, train_cfg.seed).unwrap();
    let train_set = data.subset("synth-train", &split.train).unwrap();
    let test_set = data.subset("synth-test", &split.test).unwrap();

    let mean = train_set.ages().iter().sum::<f64>() / train_set.len() as f64;
    let baseline_mae = test_set.ages().iter().map(|a| (a - mean).abs()).sum::<f64>() / test_set.len() as f64;

    let mut model = BrainAgeModel::build(&model_cfg, train_cfg.seed).unwrap();
    let history = train(&mut model, &train_set, Some(&test_set), &train_cfg).unwrap();
    let test_mae = evaluate(&model, &test_set).unwrap().mae;
    let doc = CheckpointDoc {
        model: model_cfg,
        normalize_inputs: true,
        trained_on: "synth".into(),
    };
    SynthRun {
        test_mae,
        baseline_mae,
        checkpoint: encode_checkpoint(&model, &doc).unwrap(),
        history_csv: history.to_csv(),
        history,
    }
}

/// Byte-swaps every numeric field of a little-endian single-file NIfTI-1
/// image and its voxel data, giving the big-endian encoding of the same image.
pub fn swap_nifti_endianness(bytes: &[u8]) -> Vec<u8> {
    // (offset, element width, count)
    const FIELDS: &[(usize, usize, usize)] = &[
        (0, 4, 1),
        (32, 4, 1),
        (36, 2, 1),
        (40, 2, 8),
        (56, 4, 3),
        (68, 2, 4),
        (76, 4, 11),
        (120, 2, 1),
        (124, 4, 4),
        (140, 4, 2),
        (252, 2, 2),
        (256, 4, 18),
    ];
    let mut out = bytes.to_vec();
    let swap = |buf: &mut [u8], at: usize, width: usize| buf[at..at + width].reverse();
    for &(off, width, count) in FIELDS {
        for k in 0..count {
            swap(&mut out, off + k * width, width);
        }
    }
    let bitpix = i16::from_le_bytes([bytes[72], bytes[73]]) as usize / 8;
    let offset = f32::from_le_bytes(bytes[108..112].try_into().unwrap()) as usize;
    if bitpix > 1 {
        let mut at = offset;
        while at + bitpix <= out.len() {
            swap(&mut out, at, bitpix);
            at += bitpix;
        }
    }
    out
}
