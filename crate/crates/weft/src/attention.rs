//! Scaled dot-product attention and the two garment-mixing variants.
//!
//! `asa` adds a second attention readout over garment keys to the usual
//! self-attention result; `csa` instead concatenates garment keys and values
//! into the sequence before a single attention pass. The two disagree in
//! general: every `csa` output row is a convex combination of stacked value
//! rows, while `asa` sums two convex combinations and can leave that hull.

use crate::error::{Result, WeftError};
use crate::tensor::Tensor;

fn check_pair(name: &str, k: &Tensor, v: &Tensor, d: usize) -> Result<()> {
    if k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(WeftError::InvalidTensor(format!("{name} K/V must be rank 2")));
    }
    if k.shape()[1] != d {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{name} key dim {d}"),
            got: format!("{}", k.shape()[1]),
        });
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{name} K rows {}", k.shape()[0]),
            got: format!("V rows {}", v.shape()[0]),
        });
    }
    Ok(())
}

/// Softmax(Q Kᵀ / sqrt(d)) V over row-major `[seq, dim]` matrices.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape().len() != 2 {
        return Err(WeftError::InvalidTensor("Q must be rank 2".into()));
    }
    let (sq, d) = (q.shape()[0], q.shape()[1]);
    check_pair("attention", k, v, d)?;
    let (sk, dv) = (k.shape()[0], v.shape()[1]);
    if sk == 0 {
        return Err(WeftError::InvalidTensor("attention needs at least one key".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; sq * dv];
    let mut logits = vec![0.0; sk];
    for i in 0..sq {
        let qi = &q.data()[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, l) in logits.iter_mut().enumerate() {
            let kj = &k.data()[j * d..(j + 1) * d];
            let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
            *l = dot * scale;
            max = max.max(*l);
        }
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for (j, &w) in logits.iter().enumerate() {
            let p = w / z;
            let vj = &v.data()[j * dv..(j + 1) * dv];
            for (o, &vv) in out[i * dv..(i + 1) * dv].iter_mut().zip(vj) {
                *o += p * vv;
            }
        }
    }
    Ok(Tensor::from_vec(&[sq, dv], out))
}

/// Additive variant: plain self-attention plus `scale` times a second
/// attention readout of the same queries against garment keys and values.
pub fn asa_scaled(
    q: &Tensor,
    k_u: &Tensor,
    v_u: &Tensor,
    k_g: &Tensor,
    v_g: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let own = attention(q, k_u, v_u)?;
    let garment = attention(q, k_g, v_g)?;
    if own.shape() != garment.shape() {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{:?}", own.shape()),
            got: format!("{:?}", garment.shape()),
        });
    }
    let data = own
        .data()
        .iter()
        .zip(garment.data())
        .map(|(&a, &b)| a + scale * b)
        .collect();
    Ok(Tensor::from_vec(own.shape(), data))
}

/// Additive garment attention with the default branch scale of 1.
pub fn asa(q: &Tensor, k_u: &Tensor, v_u: &Tensor, k_g: &Tensor, v_g: &Tensor) -> Result<Tensor> {
    asa_scaled(q, k_u, v_u, k_g, v_g, 1.0)
}

/// Concatenation variant: one attention pass over `[K_u; K_g]` and
/// `[V_u; V_g]`. An empty garment sequence reduces to plain attention.
pub fn csa(q: &Tensor, k_u: &Tensor, v_u: &Tensor, k_g: &Tensor, v_g: &Tensor) -> Result<Tensor> {
    if q.shape().len() != 2 {
        return Err(WeftError::InvalidTensor("Q must be rank 2".into()));
    }
    let d = q.shape()[1];
    check_pair("csa own", k_u, v_u, d)?;
    check_pair("csa garment", k_g, v_g, d)?;
    if v_u.shape()[1] != v_g.shape()[1] && k_g.shape()[0] != 0 {
        return Err(WeftError::ShapeMismatch {
            expected: format!("value dim {}", v_u.shape()[1]),
            got: format!("{}", v_g.shape()[1]),
        });
    }
    let k = stack_rows(k_u, k_g);
    let v = stack_rows(v_u, v_g);
    attention(q, &k, &v)
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let cols = a.shape()[1];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.shape()[0] + b.shape()[0], cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (sq, d) = (q.shape()[0], q.shape()[1]);
        let (sk, dv) = (k.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; sq * dv];
        for i in 0..sq {
            let mut weights = vec![0.0; sk];
            for (j, w) in weights.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.data()[i * d + c] * k.data()[j * d + c];
                }
                *w = (dot / (d as f64).sqrt()).exp();
            }
            let z: f64 = weights.iter().sum();
            for j in 0..sk {
                for c in 0..dv {
                    out[i * dv + c] += weights[j] / z * v.data()[j * dv + c];
                }
            }
        }
        Tensor::from_vec(&[sq, dv], out)
    }

    #[test]
    fn attention_matches_unnormalized_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(&[5, 4], &mut rng);
        let k = Tensor::randn(&[7, 4], &mut rng);
        let v = Tensor::randn(&[7, 3], &mut rng);
        let got = attention(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&attention_oracle(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn asa_with_zero_garment_values_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[6, 4], &mut rng);
        let k_u = Tensor::randn(&[6, 4], &mut rng);
        let v_u = Tensor::randn(&[6, 4], &mut rng);
        let k_g = Tensor::randn(&[9, 4], &mut rng);
        let v_g = Tensor::zeros(&[9, 4]);
        let a = asa(&q, &k_u, &v_u, &k_g, &v_g).unwrap();
        let plain = attention(&q, &k_u, &v_u).unwrap();
        assert_eq!(a.max_abs_diff(&plain), 0.0);
    }

    #[test]
    fn asa_and_csa_disagree_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(&[4, 4], &mut rng);
        let k_u = Tensor::randn(&[4, 4], &mut rng);
        let v_u = Tensor::randn(&[4, 4], &mut rng);
        let k_g = Tensor::randn(&[4, 4], &mut rng);
        let v_g = Tensor::randn(&[4, 4], &mut rng);
        let a = asa(&q, &k_u, &v_u, &k_g, &v_g).unwrap();
        let c = csa(&q, &k_u, &v_u, &k_g, &v_g).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-4);
    }

    #[test]
    fn csa_with_empty_garment_sequence_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::randn(&[3, 4], &mut rng);
        let k_u = Tensor::randn(&[5, 4], &mut rng);
        let v_u = Tensor::randn(&[5, 2], &mut rng);
        let k_g = Tensor::from_vec(&[0, 4], vec![]);
        let v_g = Tensor::from_vec(&[0, 2], vec![]);
        let c = csa(&q, &k_u, &v_u, &k_g, &v_g).unwrap();
        let plain = attention(&q, &k_u, &v_u).unwrap();
        assert!(c.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn csa_outputs_stay_in_value_hull_and_asa_can_leave_it() {
        // Shared setup: all keys identical and aligned with the query, all
        // values equal to one. Convexity caps each csa coordinate at 1, while
        // the additive variant doubles to 2.
        let q = Tensor::full(&[1, 2], 3.0);
        let k = Tensor::full(&[2, 2], 3.0);
        let v = Tensor::full(&[2, 2], 1.0);
        let c = csa(&q, &k, &v, &k, &v).unwrap();
        for &x in c.data() {
            assert!(x <= 1.0 + 1e-12);
        }
        let a = asa(&q, &k, &v, &k, &v).unwrap();
        for &x in a.data() {
            assert!((x - 2.0).abs() < 1e-12, "expected 2, got {x}");
        }
    }

    #[test]
    fn branch_scale_weights_the_garment_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::randn(&[2, 3], &mut rng);
        let k_u = Tensor::randn(&[4, 3], &mut rng);
        let v_u = Tensor::randn(&[4, 3], &mut rng);
        let k_g = Tensor::randn(&[4, 3], &mut rng);
        let v_g = Tensor::randn(&[4, 3], &mut rng);
        let half = asa_scaled(&q, &k_u, &v_u, &k_g, &v_g, 0.5).unwrap();
        let own = attention(&q, &k_u, &v_u).unwrap();
        let garment = attention(&q, &k_g, &v_g).unwrap();
        for i in 0..half.len() {
            let want = own.data()[i] + 0.5 * garment.data()[i];
            assert!((half.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[4, 2]);
        let v = Tensor::zeros(&[4, 3]);
        assert!(attention(&q, &k, &v).is_err());
        let k3 = Tensor::zeros(&[3, 3]);
        assert!(attention(&q, &k3, &v).is_err());
        assert!(attention(&q, &Tensor::from_vec(&[0, 3], vec![]), &Tensor::from_vec(&[0, 3], vec![])).is_err());
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_so_ones_map_to_ones(
            seed in 0u64..500,
            sq in 1usize..5,
            sk in 1usize..6,
            d in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::randn(&[sq, d], &mut rng);
            let k = Tensor::randn(&[sk, d], &mut rng);
            let v = Tensor::full(&[sk, 3], 1.0);
            let out = attention(&q, &k, &v).unwrap();
            for &x in out.data() {
                prop_assert!((x - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn csa_respects_the_convex_hull_bound(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::randn(&[3, 4], &mut rng);
            let k_u = Tensor::randn(&[4, 4], &mut rng);
            let v_u = Tensor::randn(&[4, 2], &mut rng);
            let k_g = Tensor::randn(&[5, 4], &mut rng);
            let v_g = Tensor::randn(&[5, 2], &mut rng);
            let out = csa(&q, &k_u, &v_u, &k_g, &v_g).unwrap();
            for col in 0..2 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for row in 0..4 {
                    lo = lo.min(v_u.data()[row * 2 + col]);
                    hi = hi.max(v_u.data()[row * 2 + col]);
                }
                for row in 0..5 {
                    lo = lo.min(v_g.data()[row * 2 + col]);
                    hi = hi.max(v_g.data()[row * 2 + col]);
                }
                for row in 0..3 {
                    let x = out.data()[row * 2 + col];
                    prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
                }
            }
        }
    }
}
