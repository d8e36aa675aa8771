use super::*;
use crate::convert::{convert, insertion_points, ConvertOptions, SnnNode, ThresholdSpec};
use crate::toy;

fn input(shape: &[usize]) -> SnnNode {
    SnnNode::new(
        "x",
        SnnKind::Input {
            shape: shape.to_vec(),
            scale: None,
        },
        &[],
    )
}

fn single_neuron(theta: f64, n: u32, mode: Mode) -> SnnGraph {
    SnnGraph::new(
        vec![
            input(&[1]),
            SnnNode::new(
                "spk",
                SnnKind::DiffNeuron {
                    thetas: vec![theta],
                    n,
                    rectify: false,
                },
                &["x"],
            ),
            SnnNode::new("out", SnnKind::Output { scale: None }, &["spk"]),
        ],
        mode,
    )
    .unwrap()
}

fn opts(timesteps: usize) -> SimOptions {
    SimOptions {
        timesteps,
        ..Default::default()
    }
}

#[test]
fn input_encoding() {
    let x = Tensor::scalar(0.6);
    let d: Vec<f64> = encode_input(&x, 3, Mode::Differential).iter().map(|t| t.data()[0]).collect();
    assert_eq!(d, [0.6, 0.0, 0.0]);
    let r: Vec<f64> = encode_input(&x, 3, Mode::Rate).iter().map(|t| t.data()[0]).collect();
    assert_eq!(r, [0.6, 0.6, 0.6]);
    assert!(encode_input(&Tensor::scalar(0.0), 5, Mode::Differential).iter().all(Tensor::is_zero));
}

#[test]
fn single_neuron_trace() {
    let snn = single_neuron(1.0, 2, Mode::Differential);
    let tr = run(&snn, &[Tensor::from_vec(vec![0.6])], opts(5)).unwrap();
    let xs: Vec<f64> = tr.outputs[0].x.iter().map(|t| t.data()[0]).collect();
    assert_eq!(xs, [0.5, 0.0, 0.0, 0.0, 0.5]);
    assert_eq!(tr.outputs[0].r[4].data()[0], 0.6);
    assert_eq!(tr.total_spikes(), 2);
    assert_eq!(tr.spikes["spk"], [1, 1, 1, 1, 2]);
}

#[test]
fn identity_network_passes_input_through() {
    let snn = SnnGraph::new(
        vec![input(&[3]), SnnNode::new("out", SnnKind::Output { scale: None }, &["x"])],
        Mode::Differential,
    )
    .unwrap();
    let x = Tensor::from_vec(vec![0.25, -1.5, 3.0]);
    let tr = run(&snn, std::slice::from_ref(&x), opts(7)).unwrap();
    for t in 1..=7 {
        assert_eq!(tr.real_outputs(t)[0], x);
    }
    assert_eq!(tr.total_acs(), 0);
}

#[test]
fn kernel_acs_count_only_nonzero_inputs() {
    // 0.5 with θ = 1 is exact after one spike, so the kernel sees one event
    let snn = SnnGraph::new(
        vec![
            input(&[2]),
            SnnNode::new(
                "spk",
                SnnKind::DiffNeuron {
                    thetas: vec![1.0],
                    n: 2,
                    rectify: false,
                },
                &["x"],
            ),
            SnnNode::new(
                "fc",
                SnnKind::LinearKernel {
                    weight: Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap(),
                },
                &["spk"],
            ),
            SnnNode::new("out", SnnKind::Output { scale: None }, &["fc"]),
        ],
        Mode::Differential,
    )
    .unwrap();
    let tr = run(&snn, &[Tensor::from_vec(vec![0.5, 0.0])], opts(6)).unwrap();
    assert_eq!(tr.acs["fc"], [3, 3, 3, 3, 3, 3]);
    assert_eq!(tr.real_outputs(6)[0].data(), &[0.5, 1.0, 0.0]);
}

#[test]
fn decoding_identity_and_monotone_counts() {
    let g = toy::random_mlp(&[6, 5, 3], 2).unwrap();
    let th = insertion_points(&g).into_iter().map(|p| (p.key, ThresholdSpec::manual(1.5))).collect();
    let snn = convert(&g, &th, ConvertOptions::default()).unwrap();
    let x = toy::gaussian_dataset(&g.input_shapes(), 1, 0.0, 1.0, 3).unwrap().remove(0);
    let tr = run(&snn, &x, opts(20)).unwrap();
    let o = &tr.outputs[0];
    for t in 2..=20 {
        let want = o.r[t - 2].zip_map(&o.x[t - 1], |r, x| r + x / t as f64).unwrap();
        assert_eq!(o.r[t - 1], want);
    }
    for v in tr.spikes.values().chain(tr.acs.values()) {
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn rate_mode_chain_tracks_membrane() {
    // rate-coded IF layer: r_out − r_in = −(v[t] − v[0]) / t
    let mut neuron = NeuronLayerState::single(&[1], ThresholdLadder::new(1.0, 1).unwrap(), FiringRule::Argmin).unwrap();
    let inputs = [0.3, 0.9, -0.2, 0.7, 0.4, 0.4, 1.2, 0.0];
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (k, &x) in inputs.iter().enumerate() {
        let y = neuron.step_rate(&Tensor::from_vec(vec![x])).unwrap().data()[0];
        sum_in += x;
        sum_out += y;
        let t = (k + 1) as f64;
        let lhs = sum_out / t - sum_in / t;
        assert!((lhs + neuron.v.data()[0] / t).abs() < 1e-9);
    }
}

#[test]
fn overflow_names_the_node() {
    let snn = single_neuron(1e-9, 1, Mode::Differential);
    match run(&snn, &[Tensor::from_vec(vec![1.0])], opts(4)) {
        Err(Error::Overflow { node, t }) => {
            assert_eq!(node, "spk");
            assert_eq!(t, 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn input_scale_divides_the_input() {
    let mut nodes = vec![
        SnnNode::new(
            "x",
            SnnKind::Input {
                shape: vec![1],
                scale: Some(Tensor::from_vec(vec![4.0])),
            },
            &[],
        ),
        SnnNode::new("out", SnnKind::Output { scale: Some(Tensor::from_vec(vec![4.0])) }, &["x"]),
    ];
    let snn = SnnGraph::new(nodes.clone(), Mode::Rate).unwrap();
    let tr = run(&snn, &[Tensor::from_vec(vec![2.0])], opts(2)).unwrap();
    assert_eq!(tr.outputs[0].x[0].data(), &[0.5]);
    assert_eq!(tr.real_outputs(2)[0].data(), &[2.0]);
    nodes.pop();
    assert!(SnnGraph::new(nodes, Mode::Rate).is_err());
}

#[test]
fn batch_paths_agree() {
    let g = toy::tiny_cnn(3).unwrap();
    let th = insertion_points(&g)
        .into_iter()
        .map(|p| (p.key, ThresholdSpec::manual(1.0)))
        .collect();
    let snn = convert(&g, &th, ConvertOptions::default()).unwrap();
    let data = toy::gaussian_dataset(&g.input_shapes(), 6, 0.0, 1.0, 1).unwrap();
    let seq = run_batch(&snn, &data, opts(8), Execution::Sequential).unwrap();
    let par = run_batch(&snn, &data, opts(8), Execution::Parallel).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq[0].to_csv(), par[0].to_csv());
}

#[test]
fn energy_examples() {
    let snn = single_neuron(1.0, 1, Mode::Differential);
    let tr = run(&snn, &[Tensor::from_vec(vec![0.0])], opts(4)).unwrap();
    let r = energy_report(&tr, 10).unwrap();
    assert_eq!(r.ratio, 0.0);
    assert_eq!(r.spikes, 0.0);
    assert!(matches!(energy_report(&tr, 0), Err(Error::InvalidParam(_))));

    let mut tr = tr;
    tr.acs.insert("fc".into(), vec![0, 0, 0, 10]);
    let r = energy_report(&tr, 10).unwrap();
    assert!((r.ratio - 0.9 / 4.6).abs() < 1e-15);
    assert_eq!(r.layers[0].acs, 10.0);
}

#[test]
fn compare_examples() {
    let snn = SnnGraph::new(
        vec![input(&[3]), SnnNode::new("out", SnnKind::Output { scale: None }, &["x"])],
        Mode::Differential,
    )
    .unwrap();
    let x = Tensor::from_vec(vec![1.0, 3.0, -2.0]);
    let tr = run(&snn, std::slice::from_ref(&x), opts(2)).unwrap();
    let m = compare(&tr, std::slice::from_ref(&x), 2).unwrap();
    assert_eq!((m.linf, m.l2, m.linf_rel, m.l2_rel), (0.0, 0.0, 0.0, 0.0));
    assert!(m.argmax_agree);
    let m = compare(&tr, &[x.map(|v| v - 0.5)], 1).unwrap();
    assert_eq!(m.linf, 0.5);
    assert!((m.l2 - 0.75f64.sqrt()).abs() < 1e-15);
    assert!(compare(&tr, &[Tensor::from_vec(vec![1.0])], 1).is_err());
    assert!(compare(&tr, &[x], 3).is_err());
}

#[test]
fn argmax_prefers_first_maximum() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
    assert_eq!(argmax(&[]), None);
}
