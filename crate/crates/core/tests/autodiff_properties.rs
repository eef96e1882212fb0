use std::sync::Arc;

use proptest::prelude::*;
use tvo::autodiff::{finite_difference_gradient, relative_error, Inputs, NodeId, ParamLayout, ParamVector, RealArray, Tape};

/// `depth` tanh layers of width `width` on a fixed input batch, summed.
fn tanh_network(depth: usize, width: usize, rows: usize, values: &[f64]) -> (Tape, ParamVector, Inputs) {
    let mut specs = Vec::new();
    for l in 0..depth {
        specs.push((format!("theta/w{l}"), vec![width, width]));
        specs.push((format!("theta/b{l}"), vec![width]));
    }
    let layout = Arc::new(ParamLayout::new(specs).unwrap());
    let params = ParamVector::from_values(layout.clone(), values[..layout.dim()].to_vec()).unwrap();
    let x: Vec<f64> = (0..rows * width).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), RealArray::matrix(rows, width, x).unwrap());

    let mut tape = Tape::new();
    let mut h = tape.input("x");
    for l in 0..depth {
        let w = tape.param(&format!("theta/w{l}"));
        let b = tape.param(&format!("theta/b{l}"));
        let a = tape.affine(h, w, b, rows);
        h = tape.tanh(a);
    }
    tape.sum(h);
    (tape, params, inputs)
}

fn tape_vs_fd(tape: &mut Tape, params: &ParamVector, inputs: &Inputs) -> f64 {
    tape.forward(params, inputs).unwrap();
    let backward = tape.backward().unwrap();
    let mut probe = tape.clone();
    let fd = finite_difference_gradient(|v| probe.forward(&params.with_values(v.to_vec())?, inputs), params.values(), 1e-5)
        .unwrap();
    relative_error(&backward, &fd)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn composite_networks_match_finite_differences(
        depth in 1usize..=5,
        width in 1usize..=4,
        rows in 1usize..=3,
        values in prop::collection::vec(-1.5f64..1.5, 100),
    ) {
        let (mut tape, params, inputs) = tanh_network(depth, width, rows, &values);
        prop_assert!(params.dim() <= 100);
        prop_assert!(tape_vs_fd(&mut tape, &params, &inputs) <= 1e-5);
    }

    #[test]
    fn unary_primitives_match_finite_differences(op in 0usize..8, values in prop::collection::vec(-2.0f64..2.0, 4)) {
        let layout = Arc::new(ParamLayout::new([("theta/a", vec![4])]).unwrap());
        let params = ParamVector::from_values(layout, values).unwrap();
        let mut tape = Tape::new();
        let a = tape.param("theta/a");
        let y = match op {
            0 => tape.exp(a),
            1 => { let e = tape.exp(a); tape.log(e) }
            2 => tape.sigmoid(a),
            3 => tape.tanh(a),
            4 => tape.log_sigmoid(a),
            5 => tape.softplus(a),
            6 => tape.log_sum_exp(a),
            _ => tape.mul(a, a),
        };
        tape.sum(y);
        prop_assert!(tape_vs_fd(&mut tape, &params, &Inputs::new()) <= 1e-5);
    }

    #[test]
    fn backward_is_linear_in_the_output(values in prop::collection::vec(-1.0f64..1.0, 100)) {
        let (_, params, inputs) = tanh_network(2, 3, 2, &values);
        let build = |which: u8| {
            let mut t = Tape::new();
            let a = t.param("theta/w0");
            let b = t.param("theta/b1");
            let f = t.tanh(a);
            let fs = t.sum(f);
            let g = t.softplus(b);
            let gs = t.sum(g);
            // backward() differentiates the last recorded node
            let _: NodeId = match which {
                0 => t.scale(fs, 1.0),
                1 => t.scale(gs, 1.0),
                _ => t.add(fs, gs),
            };
            t
        };
        let grad = |which: u8| {
            let mut t = build(which);
            t.forward(&params, &inputs).unwrap();
            t.backward().unwrap()
        };
        let (f, g, fg) = (grad(0), grad(1), grad(2));
        for d in 0..fg.len() {
            prop_assert!((fg[d] - f[d] - g[d]).abs() <= 1e-14);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(values in prop::collection::vec(-1.0f64..1.0, 100)) {
        let (mut a, params, inputs) = tanh_network(3, 3, 2, &values);
        let mut b = a.clone();
        let fa = a.forward(&params, &inputs).unwrap();
        let fb = b.forward(&params, &inputs).unwrap();
        prop_assert_eq!(fa.to_bits(), fb.to_bits());
        let ga: Vec<u64> = a.backward().unwrap().iter().map(|v| v.to_bits()).collect();
        let gb: Vec<u64> = b.backward().unwrap().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(ga, gb);
    }
}
