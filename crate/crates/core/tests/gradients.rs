mod common;

use common::{finite_difference_grad, relative_error, split_like};
use refback::model::{init_params, loss_and_grads, ModelConfig, Parameters};
use refback::task::{generate_sequence, TaskConfig};

/// Random small model with weights large enough for non-uniform attention.
pub fn random_small_model(seed: u64) -> Parameters {
    let mut p = init_params(&ModelConfig::new(8, 12, 48), seed).unwrap();
    for m in p.tensors_mut() {
        m.data.iter_mut().for_each(|x| *x *= 25.0);
    }
    p
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let task = TaskConfig::default();
    for k in 0..20u64 {
        let params = random_small_model(100 + k);
        let tokens = generate_sequence(&task, 500 + k).unwrap().tokens;
        let batch = vec![tokens];
        let (_, grads) = loss_and_grads(&params, &batch).unwrap();
        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|m| m.data.iter().map(|&x| x as f64))
            .collect();
        let numeric = finite_difference_grad(&params, &batch, 1e-3);
        for ((name, a), (_, n)) in split_like(&params, &analytic)
            .into_iter()
            .zip(split_like(&params, &numeric))
        {
            let err = relative_error(a, n);
            assert!(err < 1e-4, "model {k} tensor {name}: relative error {err:.3e}");
        }
    }
}
