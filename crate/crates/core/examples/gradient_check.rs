//! Reverse-mode gradients of a small MLP against central differences.
//!
//! cargo run --example gradient_check

use pmg::diffengine::{Activation, ComputationTape, DenseArray, Mlp};

fn loss(net: &Mlp, x: &DenseArray) -> f64 {
    net.forward(x, false).unwrap().output.sum_squares()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = Mlp::random(&[4, 16, 16, 3], &[Activation::Tanh, Activation::SmoothRelu, Activation::Identity], 3)?;
    let x = DenseArray::vector(vec![0.3, -1.2, 0.8, 0.05]);

    let mut tape = ComputationTape::new();
    let input = tape.leaf(x.clone());
    let params = net.register(&mut tape);
    let out = net.apply_on_tape(&mut tape, &params, input)?;
    let l = tape.sum_squares(out.output);
    tape.set_output(l);
    let grads = tape.backward(&DenseArray::scalar(1.0))?;
    let analytic = grads.get_or_zeros(input, &x);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        let mut down = x.clone();
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let fd = (loss(&net, &up) - loss(&net, &down)) / (2.0 * h);
        let a = analytic.data()[i];
        println!("dL/dx[{i}]  tape {a:+.9}  fd {fd:+.9}");
        worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
