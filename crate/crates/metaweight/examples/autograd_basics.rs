//! Tape recording, first-order gradients, and a gradient-of-gradient.

use metaweight::autograd::nnops::{kl_divergence, Reduce};
use metaweight::autograd::{Tape, Tensor};
use metaweight::Result;

fn main() -> Result<()> {
    // f(x, y) = sum(tanh(x y) + x), with x and y 2x2
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2, 2], vec![0.5, -1.0, 2.0, 0.1])?);
    let y = tape.leaf(&Tensor::from_vec(vec![2, 2], vec![1.0, 0.3, -0.7, 0.9])?);
    let f = tape.sum_all(&tape.add(&tape.tanh(&tape.matmul(&x, &y)?)?, &x)?)?;
    let grads = tape.backward(&f, &[&x, &y], false)?;
    println!("f = {:.6}", f.item());
    println!("df/dx = {:?}", grads[0].data());
    println!("df/dy = {:?}", grads[1].data());

    // d²/dz² of softplus(z): differentiate the gradient itself
    let tape = Tape::new();
    let z = tape.leaf(&Tensor::scalar(0.3));
    let g = tape.backward(&tape.softplus(&z)?, &[&z], true)?;
    let h = tape.backward(&g[0], &[&z], false)?;
    let s = 1.0 / (1.0 + (-0.3f64).exp());
    println!("softplus''(0.3) = {:.6} (closed form {:.6})", h[0].item(), s * (1.0 - s));

    // KL between two softmax distributions, straight from logits
    let tape = Tape::new();
    let p = tape.leaf(&Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, -1.0])?);
    let q = tape.leaf(&Tensor::from_vec(vec![1, 3], vec![0.2, 0.1, 0.0])?);
    let kl = kl_divergence(&tape, &p, &q, Reduce::Sum)?;
    println!("KL(p || q) = {:.6}", kl.item());
    Ok(())
}
