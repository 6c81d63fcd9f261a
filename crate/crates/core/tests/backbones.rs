mod common;

use common::*;
use mulcpred::backbones::*;
use mulcpred::tensor::Tensor;
use mulcpred::Error;

fn pointwise(out_channels: usize) -> Vec<ConvLayerConfig> {
    vec![ConvLayerConfig {
        out_channels,
        kernel: [1, 1, 1],
        stride: [1, 1, 1],
    }]
}

#[test]
fn zero_conv_on_zero_input_is_zero() {
    let enc = SpatioTemporalEncoder::<f64>::zeros(3, &BackboneConfig::default_spatiotemporal(16).layers_or_panic());
    let x = Tensor::zeros(vec![8, 32, 32, 3]);
    let f = encode_spatiotemporal(&x, &enc, "appearance").unwrap();
    assert_eq!(f.channels(), 16);
    assert_eq!(f.dims(), &[6, 6, 6]);
    assert!(f.values().iter().all(|&v| v == 0.0));
}

trait Layers {
    fn layers_or_panic(&self) -> Vec<ConvLayerConfig>;
}

impl Layers for BackboneConfig {
    fn layers_or_panic(&self) -> Vec<ConvLayerConfig> {
        match self {
            BackboneConfig::Spatiotemporal { layers, .. } => layers.clone(),
            BackboneConfig::Sequential { .. } => panic!("not a conv config"),
        }
    }
}

/// A single 1x1x1 layer is a per-cell linear map of the input channels; the
/// encoder applies `tanh` to its last layer.
#[test]
fn pointwise_kernel_is_a_per_cell_linear_map() {
    let mut enc = SpatioTemporalEncoder::<f64>::zeros(2, &pointwise(3));
    let w = [[1.0, 0.0], [0.0, 1.0], [0.5, -2.0]];
    let b = [0.0, 0.1, -0.2];
    for (oc, row) in w.iter().enumerate() {
        enc.layers[0].weight[oc * 2..oc * 2 + 2].copy_from_slice(row);
    }
    enc.layers[0].bias.copy_from_slice(&b);
    let mut g = rng(5);
    let x = Tensor::new(vec![2, 2, 2, 2], uniform(&mut g, 16, -1.0, 1.0)).unwrap();
    let f = encode_spatiotemporal(&x, &enc, "clip").unwrap();
    assert_eq!(f.dims(), &[2, 2, 2]);
    for cell in 0..8 {
        let input = &x.data()[cell * 2..cell * 2 + 2];
        for oc in 0..3 {
            let linear = w[oc][0] * input[0] + w[oc][1] * input[1] + b[oc];
            assert!((f.at(cell)[oc] - linear.tanh()).abs() < 1e-15);
        }
    }
    let raw = enc.layers[0].forward(&x).unwrap();
    for cell in 0..8 {
        let input = &x.data()[cell * 2..cell * 2 + 2];
        assert_eq!(raw.data()[cell * 3], input[0]);
        assert_eq!(raw.data()[cell * 3 + 1], input[1] + 0.1);
    }
}

#[test]
fn conv_matches_direct_convolution() {
    let mut g = rng(6);
    let cfg = ConvLayerConfig {
        out_channels: 2,
        kernel: [2, 2, 1],
        stride: [1, 2, 1],
    };
    let conv = Conv3d::<f64>::random(3, &cfg, &mut g);
    let x = Tensor::new(vec![3, 4, 2, 3], uniform(&mut g, 72, -1.0, 1.0)).unwrap();
    let y = conv.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 2, 2, 2]);
    for t in 0..2 {
        for h in 0..2 {
            for w in 0..2 {
                for o in 0..2 {
                    let mut acc = conv.bias[o];
                    for kt in 0..2 {
                        for kh in 0..2 {
                            for c in 0..3 {
                                let wi = ((o * 2 + kt) * 2 + kh) * 3 + c;
                                acc += conv.weight[wi] * x.at(&[t + kt, h * 2 + kh, w, c]);
                            }
                        }
                    }
                    assert!((y.at(&[t, h, w, o]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn encoders_are_deterministic() {
    let layers = BackboneConfig::default_spatiotemporal(16).layers_or_panic();
    let a = SpatioTemporalEncoder::<f32>::random(3, &layers, &mut rng(1));
    let b = SpatioTemporalEncoder::<f32>::random(3, &layers, &mut rng(1));
    assert_eq!(a, b);
    let mut g = rng(2);
    let x = Tensor::new(vec![8, 32, 32, 3], uniform(&mut g, 8 * 32 * 32 * 3, 0.0, 1.0))
        .unwrap()
        .cast::<f32>();
    let fa = encode_spatiotemporal(&x, &a, "appearance").unwrap();
    let fb = encode_spatiotemporal(&x, &b, "appearance").unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(fa.values()), bits(fb.values()));
}

#[test]
fn undersized_input_names_the_dimension() {
    let layers = BackboneConfig::default_spatiotemporal(16).layers_or_panic();
    let enc = SpatioTemporalEncoder::<f64>::zeros(3, &layers);
    assert_eq!(enc.min_input(), [3, 12, 12]);
    for (shape, name) in [
        ([2, 32, 32, 3], "time"),
        ([8, 11, 32, 3], "height"),
        ([8, 32, 4, 3], "width"),
    ] {
        let err = encode_spatiotemporal(&Tensor::zeros(shape.to_vec()), &enc, "appearance").unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains(name), "{err}");
    }
    let err = encode_spatiotemporal(&Tensor::zeros(vec![8, 32, 32, 1]), &enc, "appearance").unwrap_err();
    assert!(err.to_string().contains("channel"));
}

#[test]
fn single_step_final_state_equals_step_state() {
    let enc = SequenceEncoder::<f64>::random(4, 5, &mut rng(3));
    let x = Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let (states, last) = encode_sequence(&x, &enc, "trajectory").unwrap();
    assert_eq!(states.dims(), &[1]);
    assert_eq!(states.values(), &last[..]);
}

#[test]
fn zero_cell_gives_zero_states() {
    let enc = SequenceEncoder::<f64> {
        input_dim: 1,
        hidden: 3,
        w_in: vec![0.0; 3],
        w_rec: vec![0.0; 9],
        bias: vec![0.0; 3],
    };
    let x = Tensor::new(vec![5, 1], vec![1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
    let (states, last) = encode_sequence(&x, &enc, "ego").unwrap();
    assert!(states.values().iter().chain(&last).all(|&v| v == 0.0));
}

#[test]
fn two_step_cell_matches_manual_unroll() {
    let (a, u, b) = (0.7, -0.4, 0.2);
    let enc = SequenceEncoder::<f64> {
        input_dim: 1,
        hidden: 1,
        w_in: vec![a],
        w_rec: vec![u],
        bias: vec![b],
    };
    let (x1, x2) = (0.5, -1.5);
    let h1 = (a * x1 + b).tanh();
    let h2 = (a * x2 + u * h1 + b).tanh();
    let (states, last) = encode_sequence(&Tensor::new(vec![2, 1], vec![x1, x2]).unwrap(), &enc, "ego").unwrap();
    assert_eq!(states.values(), &[h1, h2]);
    assert_eq!(last, vec![h2]);
}

#[test]
fn sequence_input_errors() {
    let enc = SequenceEncoder::<f64>::zeros(4, 2);
    let empty = encode_sequence(&Tensor::zeros(vec![0, 4]), &enc, "trajectory").unwrap_err();
    assert!(matches!(empty, Error::InvalidInput(_)));
    assert!(encode_sequence(&Tensor::zeros(vec![3, 2]), &enc, "trajectory").is_err());
    assert!(encode_sequence(&Tensor::zeros(vec![3, 4, 1]), &enc, "trajectory").is_err());
}

#[test]
fn backbone_outputs_have_configured_width() {
    let seq = Backbone::<f64>::from_config(&BackboneConfig::Sequential { input_dim: 4 }, 7, Some(&mut rng(4)));
    let (f, _) = seq.encode(&Tensor::zeros(vec![8, 4]), "trajectory").unwrap();
    assert_eq!((f.dims(), f.channels()), (&[8][..], 7));
    let conv = Backbone::<f64>::from_config(&BackboneConfig::default_spatiotemporal(16), 16, Some(&mut rng(4)));
    let (f, _) = conv.encode(&Tensor::zeros(vec![16, 32, 32, 3]), "appearance").unwrap();
    assert_eq!((f.dims(), f.channels()), (&[14, 6, 6][..], 16));
    assert!(f.values().iter().all(|v| v.is_finite()));
}
