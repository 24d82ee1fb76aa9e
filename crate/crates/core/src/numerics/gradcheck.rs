use super::{Graph, NodeId, Tensor};

/// Compares analytic gradients against central finite differences.
///
/// `build` must assemble a deterministic scalar loss from the given leaves
/// (eval mode only; no RNG). Every leaf element is perturbed by ±1e-6 and
/// the result is the worst relative disagreement
/// `|g_a - g_f| / max(1, |g_a|, |g_f|)` over all leaf elements.
///
/// Panics if `build` produces a non-scalar loss.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("grad_check loss must be scalar");
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| {
            g.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape()))
        })
        .collect();

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).scalar_value()
    };

    let h = 1e-6;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for pi in 0..work.len() {
        for e in 0..work[pi].numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work);
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work);
            work[pi].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let ga = analytic[pi].data()[e];
            let err = (ga - fd).abs() / 1.0f64.max(ga.abs()).max(fd.abs());
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Random tensor with |values| >= margin, for kinked ops.
    fn random_tensor_away_from_zero(
        shape: &[usize],
        margin: f64,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(margin..1.0);
                    if rng.gen::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_layer_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(20);
        let x = random_tensor(&[2, 3], &mut r);
        let w = random_tensor(&[4, 3], &mut r);
        let b = random_tensor(&[4], &mut r);
        let err = grad_check(&[x, w, b], |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
            g.cross_entropy(y, &[1, 3]).unwrap()
        });
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn prelu_gradients_away_from_kink() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor_away_from_zero(&[1, 2, 6], 0.1, &mut r);
        let s = random_tensor(&[2], &mut r);
        let err = grad_check(&[x, s], |g, ids| {
            let y = g.prelu(ids[0], ids[1]).unwrap();
            let sm = g.softmax_time(y).unwrap();
            let at = g.attend_time(y, sm).unwrap();
            g.cross_entropy(at, &[0]).unwrap()
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn conv_pool_norm_chain_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let x = random_tensor(&[1, 2, 12], &mut r);
        let w = random_tensor(&[4, 2, 3], &mut r);
        let b = random_tensor(&[4], &mut r);
        let gamma = random_tensor_away_from_zero(&[4], 0.3, &mut r);
        let beta = random_tensor(&[4], &mut r);
        let err = grad_check(&[x, w, b, gamma, beta], |g, ids| {
            let c = g.conv1d(ids[0], ids[1], ids[2], 1).unwrap();
            let p = g.max_pool2(c).unwrap();
            let n = g.instance_norm(p, ids[3], ids[4], 1e-5).unwrap();
            let sm = g.softmax_time(n).unwrap();
            let at = g.attend_time(n, sm).unwrap();
            g.cross_entropy(at, &[2]).unwrap()
        });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn vector_norm_and_channel_slice_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor(&[2, 4, 5], &mut r);
        let gamma = random_tensor_away_from_zero(&[3], 0.3, &mut r);
        let beta = random_tensor(&[3], &mut r);
        let err = grad_check(&[x, gamma, beta], |g, ids| {
            let h = g.channel_slice(ids[0], 0, 2).unwrap();
            let a = g.channel_slice(ids[0], 2, 4).unwrap();
            let sm = g.softmax_time(a).unwrap();
            let at = g.attend_time(h, sm).unwrap();
            // extend to 3 features via a fixed linear map
            let w = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.5, 1.0, 0.25, -1.0]).unwrap());
            let bz = g.leaf(Tensor::zeros(&[3]));
            let y = g.linear(at, w, bz).unwrap();
            let n = g.instance_norm(y, ids[1], ids[2], 1e-5).unwrap();
            g.cross_entropy(n, &[0, 2]).unwrap()
        });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn dropout_eval_passes_gradients_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(24);
        let x = random_tensor(&[1, 2, 8], &mut r);
        let err = grad_check(&[x], |g, ids| {
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            let d = g.dropout(ids[0], 0.2, Mode::Eval, &mut dummy).unwrap();
            let sm = g.softmax_time(d).unwrap();
            let at = g.attend_time(d, sm).unwrap();
            g.cross_entropy(at, &[1]).unwrap()
        });
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn scale_and_add_scalars_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(25);
        let x = random_tensor(&[2, 3], &mut r);
        let err = grad_check(&[x], |g, ids| {
            let l1 = g.cross_entropy(ids[0], &[0, 1]).unwrap();
            let l2 = g.cross_entropy(ids[0], &[2, 2]).unwrap();
            let s1 = g.scale(l1, 0.25);
            let s2 = g.scale(l2, 0.75);
            g.add_scalars(&[s1, s2]).unwrap()
        });
        assert!(err < 1e-6, "max relative error {err}");
    }
}
