use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;

/// Compares reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph with every tensor of `params` registered as
/// a parameter leaf (in order) and returns the scalar output node. Up to
/// `samples` coordinates are drawn from the tensors listed in `wrt`. Returns
/// the maximum of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    wrt: &[usize],
    eps: f64,
    samples: usize,
    seed: u64,
    build: F,
) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    if let Some(&bad) = wrt.iter().find(|&&i| i >= params.len()) {
        return Err(Error::InvalidArgument(format!("no parameter {bad}")));
    }

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "gradient check needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let analytic = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &ids)?;
        let grads = g.backward(out)?;
        wrt.iter()
            .map(|&i| {
                grads
                    .get(ids[i])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params[i].shape()))
            })
            .collect::<Vec<_>>()
    };

    let total: usize = wrt.iter().map(|&i| params[i].len()).sum();
    let mut coords: Vec<(usize, usize)> = wrt
        .iter()
        .enumerate()
        .flat_map(|(w, &i)| (0..params[i].len()).map(move |c| (w, c)))
        .collect();
    if samples < total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 0..samples {
            let j = rng.random_range(n..coords.len());
            coords.swap(n, j);
        }
        coords.truncate(samples);
    }

    let mut perturbed = params.to_vec();
    let mut worst = 0.0f64;
    for (w, c) in coords {
        let i = wrt[w];
        let orig = params[i].data()[c];
        perturbed[i].data_mut()[c] = orig + eps;
        let plus = eval(&perturbed)?;
        perturbed[i].data_mut()[c] = orig - eps;
        let minus = eval(&perturbed)?;
        perturbed[i].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[w].data()[c] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[1, 3], vec![0.2, -1.0, 0.5]).unwrap();
        let w = Tensor::new(&[3, 1], vec![1.5, 2.0, -0.25]).unwrap();
        let err = grad_check(&[x, w], &[0, 1], 1e-4, 100, 0, |g, ids| {
            g.matmul(ids[0], ids[1])
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_vector_output() {
        let x = Tensor::new(&[1, 2], vec![0.2, -1.0]).unwrap();
        assert!(
            grad_check(std::slice::from_ref(&x), &[0], 1e-1, 4, 0, |_, ids| Ok(
                ids[0]
            ))
            .is_err()
        );
        assert!(grad_check(&[x], &[0], 1e-4, 4, 0, |_, ids| Ok(ids[0])).is_err());
    }
}
