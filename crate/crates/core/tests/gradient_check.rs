use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrrn_core::loss::{total_loss, LossWeights};
use rrrn_core::nn::{ModelConfig, RrrnModel};
use rrrn_core::{BackboneConfig, Plane, RegionStack, REGIONS};

fn random_stack(size: usize, rng: &mut ChaCha8Rng) -> RegionStack {
    let mut plane = || Plane::from_fn(size, size, |_, _| rng.gen_range(-1.5..1.5));
    let vertical = (0..REGIONS).map(|_| plane()).collect();
    let horizontal = (0..REGIONS).map(|_| plane()).collect();
    RegionStack { vertical, horizontal }
}

fn batch_loss(model: &RrrnModel, batch: &[(RegionStack, usize)], w: &LossWeights) -> f64 {
    batch
        .iter()
        .map(|(s, y)| total_loss(&model.sample_loss(s, *y, w).unwrap().components, w))
        .sum::<f64>()
        / batch.len() as f64
}

fn check_model(config: ModelConfig, seed: u64, h: f64) -> (usize, usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.backbone.input_size;
    let mut model = RrrnModel::with_rng(config, false, &mut rng).unwrap();
    for t in model.tensors_mut() {
        if t.shape.len() == 1 {
            for v in &mut t.data {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    // Favor the full-face region so the attention hinge is active.
    model.attention.w1.bias.data[0] = 1.0;
    let weights = LossWeights::default();
    let batch: Vec<(RegionStack, usize)> = (0..3).map(|i| (random_stack(size, &mut rng), i)).collect();

    let mut grad = model.zeros_like();
    let mut components = [0.0; 3];
    for (s, y) in &batch {
        let l = model
            .accumulate_gradients(s, *y, &weights, 1.0 / batch.len() as f64, &mut grad)
            .unwrap();
        components[0] += l.components.cls;
        components[1] += l.components.rb;
        components[2] += l.components.cor;
    }
    assert!(components.iter().all(|&c| c > 0.0), "components {components:?}");

    let analytic: Vec<(String, Vec<f64>)> = grad
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data.clone()))
        .collect();
    let mut checked = 0;
    let mut nonzero = 0;
    let mut bad = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= 6 {
            (0..g.len()).collect()
        } else {
            (0..6).map(|_| rng.gen_range(0..g.len())).collect()
        };
        for j in picks {
            let orig = model.tensors_mut()[ti].data[j];
            model.tensors_mut()[ti].data[j] = orig + h;
            let plus = batch_loss(&model, &batch, &weights);
            model.tensors_mut()[ti].data[j] = orig - h;
            let minus = batch_loss(&model, &batch, &weights);
            model.tensors_mut()[ti].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            checked += 1;
            if a.abs() > 1e-6 {
                nonzero += 1;
            }
            if rel >= 1e-3 {
                bad.push(format!("{name}[{j}] analytic {a:.3e} numeric {numeric:.3e} rel {rel:.2e}"));
            }
        }
    }
    (checked, nonzero, bad)
}

#[test]
fn toy_network_gradients_match_central_differences() {
    let config = ModelConfig {
        backbone: BackboneConfig::toy(8),
        attention_reduction: 2,
    };
    let (checked, nonzero, bad) = check_model(config, 11, 1e-4);
    assert!(bad.len() as f64 <= 0.01 * checked as f64, "{bad:#?}");
    assert!(nonzero * 2 > checked, "only {nonzero} of {checked} gradients are nonzero");
}

#[test]
fn residual_network_gradients_match_central_differences() {
    let config = ModelConfig {
        backbone: BackboneConfig {
            stream_channels: 8,
            ..BackboneConfig::resnet18(16)
        },
        attention_reduction: 3,
    };
    // The deeper stack without normalization has enough curvature that a
    // 1e-4 step picks up second-order error; a finer step isolates the
    // backward pass itself.
    let (checked, nonzero, bad) = check_model(config, 12, 1e-6);
    assert!(bad.len() as f64 <= 0.01 * checked as f64, "{bad:#?}");
    assert!(nonzero * 2 > checked, "only {nonzero} of {checked} gradients are nonzero");
}
