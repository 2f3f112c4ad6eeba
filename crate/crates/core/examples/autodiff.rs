//! Reverse-mode gradients of a small network loss, checked against central
//! differences.

use heat_kernel::autodiff::{gradcheck, Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> heat_kernel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = Mlp::new(MlpSpec::new(vec![2, 8, 1], Activation::Tanh), &mut store, "net", &mut rng)?;
    let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 0.7, 0.2, -1.0, 0.5])?;

    // Squared output norm as a function of the inputs and every weight.
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    let check = gradcheck(
        |tape: &mut Tape, v| {
            let y = net.forward(tape, &v[1..], v[0])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        &inputs,
        1e-6,
    )?;
    println!("parameters: {}", store.numel());
    println!("d loss / d x =\n{:?}", check.analytic[0].row_vecs());
    println!("worst relative error vs central differences: {:.2e}", check.max_rel_error);
    Ok(())
}
