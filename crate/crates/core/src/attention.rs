//! Scaled dot-product attention in f64.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::latents::{AlignedFeatures, ProjectedLatents};

fn check_finite(name: &str, a: &ArrayView2<f64>) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Row-stochastic attention weights `softmax(q kᵀ / √d)`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (tq, d) = q.dim();
    let (tk, dk) = k.dim();
    if d == 0 || tq == 0 || tk == 0 {
        return Err(Error::Dimension(format!("empty operand: q {:?}, k {:?}", q.dim(), k.dim())));
    }
    if d != dk {
        return Err(Error::Dimension(format!("query width {d} != key width {dk}")));
    }
    check_finite("attention query", &q)?;
    check_finite("attention key", &k)?;
    Ok(softmax_weights(q, k))
}

fn softmax_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t());
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) * scale).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
    logits
}

/// `softmax(q kᵀ / √d) v` for one head.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::Dimension(format!(
            "key tokens {} != value tokens {}",
            k.nrows(),
            v.nrows()
        )));
    }
    check_finite("attention value", &v)?;
    let w = attention_weights(q, k)?;
    Ok(w.dot(&v))
}

/// Attends every head of `query`'s queries over `kv`'s keys and values and
/// concatenates the head outputs in head order. No output projection.
pub fn multihead_align(query: &ProjectedLatents, kv: &ProjectedLatents) -> Result<AlignedFeatures> {
    if query.heads() != kv.heads() {
        return Err(Error::Dimension(format!(
            "head count {} != {}",
            query.heads(),
            kv.heads()
        )));
    }
    if query.head_dim() != kv.head_dim() {
        return Err(Error::Dimension(format!(
            "head width {} != {}",
            query.head_dim(),
            kv.head_dim()
        )));
    }
    let heads = query.heads();
    let dh = query.head_dim();
    let mut x = Array2::<f64>::zeros((query.query_tokens(), heads * dh));
    for h in 0..heads {
        let q = query.q().index_axis(Axis(0), h).mapv(f64::from);
        let k = kv.k().index_axis(Axis(0), h).mapv(f64::from);
        let v = kv.v().index_axis(Axis(0), h).mapv(f64::from);
        let out = softmax_weights(q.view(), k.view()).dot(&v);
        x.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
    }
    Ok(AlignedFeatures {
        x,
        site: query.site().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_token_is_identity() {
        let a = array![[3.0]];
        let out = scaled_dot_attention(a.view(), a.view(), a.view()).unwrap();
        assert_eq!(out, array![[3.0]]);
    }

    #[test]
    fn identical_keys_average_values() {
        let k = array![[1.0, 0.0], [1.0, 0.0]];
        let v = array![[2.0, 0.0], [0.0, 2.0]];
        let q = array![[0.3, -1.2], [5.0, 2.0], [0.0, 0.0]];
        let out = scaled_dot_attention(q.view(), k.view(), v.view()).unwrap();
        for row in out.rows() {
            assert!((row[0] - 1.0).abs() < 1e-12 && (row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_key_example() {
        // weights: softmax([1/√2, 0]) = [0.66976, 0.33024]
        let q = array![[1.0, 0.0]];
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let out = scaled_dot_attention(q.view(), k.view(), k.view()).unwrap();
        assert!((out[[0, 0]] - 0.6698).abs() < 1e-3);
        assert!((out[[0, 1]] - 0.3302).abs() < 1e-3);
    }

    #[test]
    fn large_logits_stay_finite() {
        let q = array![[1e4, -1e4]];
        let k = array![[1e4, 0.0], [-1e4, 0.0]];
        let w = attention_weights(q.view(), k.view()).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let q = array![[1.0, 0.0]];
        let k3 = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            scaled_dot_attention(q.view(), k3.view(), k3.view()),
            Err(Error::Dimension(_))
        ));
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let v1 = array![[1.0]];
        assert!(matches!(
            scaled_dot_attention(q.view(), k.view(), v1.view()),
            Err(Error::Dimension(_))
        ));
        let nan = array![[f64::NAN, 0.0]];
        assert!(matches!(
            scaled_dot_attention(nan.view(), k.view(), k.view()),
            Err(Error::NonFinite(_))
        ));
        let inf = array![[1.0, 0.0], [f64::INFINITY, 0.0]];
        assert!(matches!(
            scaled_dot_attention(q.view(), k.view(), inf.view()),
            Err(Error::NonFinite(_))
        ));
    }
}
