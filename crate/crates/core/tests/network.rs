use tdd_core::net::{forward, init_params, multi_scale_loss, patch_tensor, NetworkConfig, ParamVars};
use tdd_core::{BinaryMask, HsiCube, TddNet};
use tdd_tensor::gradcheck::max_relative_error;
use tdd_tensor::{Graph, ParamSet, Tensor};

fn tiny(in_bands: usize) -> NetworkConfig {
    NetworkConfig {
        encoder_channels: vec![4, 4, 4, 4, 4, 4],
        heads: 2,
        lam_window: (3, 3),
        ..NetworkConfig::new(in_bands)
    }
}

fn patch(size: usize, bands: usize) -> HsiCube {
    HsiCube::from_fn(size, size, bands, |r, c, b| {
        (((r * 7 + c * 3 + b * 5) % 11) as f32 / 10.0 + 0.05 * b as f32).fract()
    })
    .unwrap()
}

fn label(size: usize) -> BinaryMask {
    let mut y = BinaryMask::zeros(size, size);
    y.set(1, 1, true);
    y.set(1, 2, true);
    y
}

/// Freshly initialised biases are zero, so on a 4x4 patch the 1x1 deep
/// blocks sit exactly on the ReLU kink. Offsetting the biases moves the
/// check to a point where the loss is differentiable.
fn off_kink(mut p: ParamSet<f64>) -> ParamSet<f64> {
    for i in 0..p.len() {
        if p.name(i).ends_with(".b") {
            for (j, v) in p.tensor_mut(i).data_mut().iter_mut().enumerate() {
                *v += 0.05 + 0.02 * (j % 5) as f64;
            }
        }
    }
    p
}

#[test]
fn end_to_end_loss_gradient_matches_finite_differences() {
    let cfg = tiny(6);
    let params = off_kink(init_params(&cfg, 9).unwrap().cast::<f64>());
    let names: Vec<&str> = (0..params.len()).map(|i| params.name(i)).collect();
    let inputs: Vec<Tensor<f64>> = (0..params.len()).map(|i| params.tensor(i).clone()).collect();
    let x = patch(4, 6);
    let y = label(4);
    let err = max_relative_error(
        &inputs,
        |g: &mut Graph<f64>, vars| {
            let p = ParamVars::from_vars(names.clone(), vars.to_vec());
            let xv = g.input(patch_tensor(&x));
            let f = forward(g, &cfg, &p, xv).map_err(|e| tdd_tensor::TensorError::Format(e.to_string()))?;
            multi_scale_loss(g, &f.side, &y, &cfg.loss_weights)
                .map_err(|e| tdd_tensor::TensorError::Format(e.to_string()))
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn default_network_on_a_162_band_patch() {
    let net = TddNet::new(NetworkConfig::new(162), 0).unwrap();
    let s = net.predict(&patch(10, 162)).unwrap();
    assert_eq!(s.len(), 100);
    assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn side_outputs_match_decoder_sizes_across_configs() {
    for (size, factors) in [(6, vec![1, 2, 2, 4, 4, 4]), (9, vec![1, 1, 3, 3, 3, 3]), (4, vec![1, 2, 4, 4, 4, 4])] {
        let cfg = NetworkConfig {
            spatial_factors: factors,
            ..tiny(3)
        };
        let params = init_params(&cfg, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let p = ParamVars::register(&mut g, &params);
        let x = g.input(patch_tensor(&patch(size, 3)));
        let f = forward(&mut g, &cfg, &p, x).unwrap();
        for (i, &s) in f.side.iter().enumerate() {
            assert_eq!(g.shape(s)[0], 1);
            assert_eq!(g.shape(s)[1..], g.shape(f.decoder[i].out)[1..]);
            assert!(g.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(g.shape(f.score_map()), &[1, size, size]);
    }
}
