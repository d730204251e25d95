//! Slice-completeness and MACs accounting over an exhaustive small space.

use rand::Rng;
use supernet_core::arch::{ArchSpace, HeadSpec, StageSpec, StemSpec};
use supernet_core::reference::{self, MacCounter};
use supernet_core::rng::stream;
use supernet_core::supernet::{count_macs, ForwardMode, Supernet};
use supernet_core::tensor::{Minibatch, Tensor};
use supernet_core::optim::{Optimizer, WeightDecayScope};

/// 32 configs: stage 0 has elastic depth and width, stage 1 elastic width
/// and kernel.
fn small_space() -> ArchSpace {
    ArchSpace {
        input_channels: 1,
        num_classes: 4,
        stem: StemSpec {
            out_channels: 3,
            kernel: 3,
            stride: 1,
        },
        stages: vec![
            StageSpec {
                max_depth: 2,
                depth_choices: vec![1, 2],
                max_width: 6,
                width_fraction_choices: vec![0.5, 1.0],
                kernel_choices: vec![3],
                stride: 2,
            },
            StageSpec {
                max_depth: 1,
                depth_choices: vec![1],
                max_width: 8,
                width_fraction_choices: vec![0.5, 1.0],
                kernel_choices: vec![3, 5],
                stride: 1,
            },
        ],
        head: HeadSpec { dropout: 0.0 },
        resolution_choices: vec![8],
    }
}

fn random_batch(seed: u64, n: usize, res: usize, classes: usize) -> Minibatch {
    let mut rng = stream(seed, "batch");
    let values: Vec<f32> = (0..n * res * res).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..classes as u32)).collect();
    Minibatch::new(Tensor::new(vec![n, 1, res, res], values).unwrap(), labels, classes).unwrap()
}

#[test]
fn exhaustive_masking_and_gradient_completeness() {
    let net = Supernet::new(small_space(), 31).unwrap();
    let all = net.space.enumerate_all(64).unwrap();
    assert_eq!(all.len(), 32);
    let batch = random_batch(7, 3, 8, 4);

    for config in &all {
        let view = net.select_subnet(config).unwrap();
        let masks = net.view_param_mask(&view);

        // Zeroing parameters outside the view leaves the logits unchanged.
        let pass = net
            .forward_subnet(&view, &batch, ForwardMode::Collect, None)
            .unwrap();
        let logits_before = pass.tape.values(pass.logits).to_vec();
        let mut zeroed = net.clone();
        for (pi, mask) in masks.iter().enumerate() {
            for (i, &inside) in mask.iter().enumerate() {
                if !inside {
                    zeroed.weights.params[pi].tensor.values[i] = 0.0;
                }
            }
        }
        let pass = zeroed
            .forward_subnet(&view, &batch, ForwardMode::Collect, None)
            .unwrap();
        let logits_after = pass.tape.values(pass.logits).to_vec();
        for (a, b) in logits_before.iter().zip(&logits_after) {
            assert!((a - b).abs() <= 1e-6, "config {}", view.digest);
        }
        assert_eq!(logits_before, logits_after, "config {}", view.digest);

        // Gradients from this subnet's loss are exactly zero off-view.
        let mut pass = net
            .forward_subnet(&view, &batch, ForwardMode::Train, None)
            .unwrap();
        let loss = pass
            .tape
            .loss_ce_smoothed(pass.logits, &batch.labels, 0.1)
            .unwrap();
        pass.tape.backward(loss).unwrap();
        let mut buffers = net.zeroed_grad_buffers();
        net.scatter_grads(&pass, 1.0, &mut buffers);
        for (pi, mask) in masks.iter().enumerate() {
            for (i, &inside) in mask.iter().enumerate() {
                if !inside {
                    assert_eq!(
                        buffers[pi][i], 0.0,
                        "config {} param {} index {i}",
                        view.digest, net.weights.params[pi].name
                    );
                }
            }
        }
    }
}

#[test]
fn exhaustive_macs_equal_instrumented_counter() {
    let space = small_space();
    let all = space.enumerate_all(64).unwrap();
    for config in &all {
        let view = supernet_core::supernet::SubnetView::resolve(&space, config).unwrap();
        let mut counter = MacCounter::default();
        let mut h = config.resolution;
        let mut w = config.resolution;
        for slice in &view.layers {
            if !slice.active {
                continue;
            }
            let pad = (slice.kernel - 1) / 2;
            let input = vec![0.5f64; slice.in_ch * h * w];
            let kernel = vec![0.5f64; slice.out_ch * slice.in_ch * slice.kernel * slice.kernel];
            let (_, oh, ow) = reference::conv2d(
                &input,
                &kernel,
                1,
                slice.in_ch,
                h,
                w,
                slice.out_ch,
                slice.kernel,
                slice.stride,
                pad,
                &mut counter,
            );
            h = oh;
            w = ow;
        }
        reference::matmul(
            &vec![0.5f64; view.feat_in],
            &vec![0.5f64; view.feat_in * space.num_classes],
            1,
            view.feat_in,
            space.num_classes,
            &mut counter,
        );
        assert_eq!(
            count_macs(&space, config).unwrap(),
            counter.macs,
            "config {}",
            config.digest()
        );
    }
}

#[test]
fn update_through_view_aliases_overlapping_views_only() {
    let mut net = Supernet::new(small_space(), 33).unwrap();
    let batch = random_batch(9, 4, 8, 4);
    let small_cfg = net.space.a_min();
    let view = net.select_subnet(&small_cfg).unwrap();
    let full_view = net.select_subnet(&net.space.a_full()).unwrap();

    let before = net.weights.clone();
    let full_logits_before = {
        let pass = net
            .forward_subnet(&full_view, &batch, ForwardMode::Collect, None)
            .unwrap();
        pass.tape.values(pass.logits).to_vec()
    };

    // One SGD step through the small view only, without weight decay.
    let mut pass = net
        .forward_subnet(&view, &batch, ForwardMode::Train, None)
        .unwrap();
    let loss = pass
        .tape
        .loss_ce_smoothed(pass.logits, &batch.labels, 0.1)
        .unwrap();
    pass.tape.backward(loss).unwrap();
    let mut buffers = net.zeroed_grad_buffers();
    net.scatter_grads(&pass, 1.0, &mut buffers);
    let mut opt = Optimizer::new(&net, 0.0, 0.0, WeightDecayScope::All);
    opt.step(&mut net, &buffers, 0.05).unwrap();

    // Disjoint parameters are bit-identical; the overlapping full view sees
    // the update.
    let masks = net.view_param_mask(&view);
    let mut any_changed = false;
    for (pi, mask) in masks.iter().enumerate() {
        for (i, &inside) in mask.iter().enumerate() {
            let (a, b) = (
                before.params[pi].tensor.values[i],
                net.weights.params[pi].tensor.values[i],
            );
            if inside {
                any_changed |= a.to_bits() != b.to_bits();
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
    assert!(any_changed);
    let full_logits_after = {
        let pass = net
            .forward_subnet(&full_view, &batch, ForwardMode::Collect, None)
            .unwrap();
        pass.tape.values(pass.logits).to_vec()
    };
    assert_ne!(full_logits_before, full_logits_after);
}

#[test]
fn extraction_fidelity_on_calibrated_configs() {
    use supernet_core::data::{load_dataset, DatasetSpec, SyntheticDatasetSpec};
    use supernet_core::eval::bn_calibrate;

    let d = load_dataset(&DatasetSpec::Synthetic(SyntheticDatasetSpec {
        num_classes: 4,
        resolution: 8,
        channels: 1,
        train_samples: 32,
        test_samples: 8,
        noise_sigma: 0.5,
        seed: 3,
    }))
    .unwrap();
    let mut net = Supernet::new(small_space(), 40).unwrap();
    let mut rng = stream(41, "cfgs");
    let mut configs = vec![net.space.a_min(), net.space.a_full()];
    configs.extend(net.space.sample_uniform(3, &mut rng));
    for config in &configs {
        bn_calibrate(&mut net, config, &d.train, 8, 3, 4).unwrap();
        let standalone = net.extract_standalone(config).unwrap();
        let view = net.select_subnet(config).unwrap();
        for bseed in 0..5u64 {
            let batch = random_batch(100 + bseed, 2, 8, 4);
            let a = net.eval_logits(&view, &batch).unwrap();
            let b = standalone.eval_logits(&batch).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
