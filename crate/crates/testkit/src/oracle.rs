//! Naive double-loop reference implementations on plain `Vec`s.

use diffsim_core::ProjectedLatents;

type Mat = Vec<Vec<f64>>;

fn head(t: &ndarray::Array3<f32>, h: usize) -> Mat {
    let (_, n, d) = t.dim();
    (0..n)
        .map(|i| (0..d).map(|j| t[[h, i, j]] as f64).collect())
        .collect()
}

/// softmax(q kᵀ/√d) v, one output row at a time.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    let mut out = Vec::with_capacity(q.len());
    for qi in q {
        let mut logits = Vec::with_capacity(k.len());
        for kj in k {
            let mut dot = 0.0;
            for c in 0..qi.len() {
                dot += qi[c] * kj[c];
            }
            logits.push(dot / d.sqrt());
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row = vec![0.0; v[0].len()];
        for (j, e) in exps.iter().enumerate() {
            for c in 0..row.len() {
                row[c] += e / z * v[j][c];
            }
        }
        out.push(row);
    }
    out
}

/// Per-head attention of `query`'s queries over `kv`, heads concatenated.
pub fn align(query: &ProjectedLatents, kv: &ProjectedLatents) -> Mat {
    let heads = query.heads();
    let n = query.query_tokens();
    let mut out = vec![Vec::new(); n];
    for h in 0..heads {
        let o = attention(&head(query.q(), h), &head(kv.k(), h), &head(kv.v(), h));
        for i in 0..n {
            out[i].extend_from_slice(&o[i]);
        }
    }
    out
}

pub fn mean_row_cosine(x: &Mat, y: &Mat) -> f64 {
    let mut total = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
        total += dot / (na * nb);
    }
    total / x.len() as f64
}

pub fn aas(a: &ProjectedLatents, b: &ProjectedLatents) -> f64 {
    mean_row_cosine(&align(a, a), &align(a, b))
}

pub fn similarity(a: &ProjectedLatents, b: &ProjectedLatents) -> f64 {
    (aas(a, b) + aas(b, a)) / 2.0
}

/// Cross variant with queries from `z_*` and keys/values from `ip_*`.
pub fn cross_similarity(
    z_a: &ProjectedLatents,
    ip_a: &ProjectedLatents,
    z_b: &ProjectedLatents,
    ip_b: &ProjectedLatents,
) -> f64 {
    let ab = mean_row_cosine(&align(z_a, ip_a), &align(z_a, ip_b));
    let ba = mean_row_cosine(&align(z_b, ip_b), &align(z_b, ip_a));
    (ab + ba) / 2.0
}
