//! Compare tape gradients with central differences for a small composite
//! function and for one attention block.
//!
//! cargo run --release --example gradient_check

use timeformer::attention::{MoSABlock, MoSAConfig};
use timeformer::rng::seeded;
use timeformer::tensor::gradcheck::{max_relative_error, numeric_gradient};
use timeformer::tensor::{ParamStore, Tape, Tensor};

fn main() -> timeformer::Result<()> {
    let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1])?;
    let w = Tensor::new(&[3, 2], vec![0.5, -0.3, 1.1, 0.2, -0.7, 0.9])?;

    // f(x) = sum(softmax(gelu(x W)))·row index weights
    let f = |tape: &mut Tape, x| -> timeformer::Result<_> {
        let wv = tape.constant(w.clone());
        let h = tape.matmul(x, wv)?;
        let h = tape.gelu(h);
        let s = tape.softmax_lastdim(h)?;
        let e = tape.exp(s);
        Ok(tape.sum(e))
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("leaf tracks a gradient").to_vec();
    let numeric = numeric_gradient(&x, 1e-5, |p| {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let l = f(&mut t, v).expect("same shapes");
        t.data(l)[0]
    });
    println!("composite: max relative error {:.3e}", max_relative_error(&analytic, &numeric));

    let mut store = ParamStore::new();
    let block = MoSABlock::new(&mut store, &mut seeded(1), "blk", MoSAConfig::mosa(4, 2, 0.1))?;
    let input = Tensor::new(&[1, 5, 4], (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect())?;
    let loss_of = |store: &ParamStore, x: &Tensor| {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = block.forward(&mut t, store, v, true, None).expect("valid input");
        let sq = t.mul(y, y).expect("same shape");
        let l = t.sum(sq);
        t.data(l)[0]
    };
    let mut tape = Tape::new();
    let v = tape.leaf(input.clone().with_grad());
    let y = block.forward(&mut tape, &store, v, true, None)?;
    let sq = tape.mul(y, y)?;
    let l = tape.sum(sq);
    tape.backward(l)?;
    let numeric = numeric_gradient(&input, 1e-5, |p| loss_of(&store, p));
    let err = max_relative_error(tape.grad(v).expect("leaf"), &numeric);
    println!("attention block input: max relative error {err:.3e}");
    Ok(())
}
