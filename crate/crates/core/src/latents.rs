use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::site::AttentionSite;

/// Per-head query, key and value projections of one image at one attention
/// site. Shapes are `[heads, tokens, d_head]`; keys and values share their
/// token count, which may differ from the query token count (cross
/// attention).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedLatents {
    q: Array3<f32>,
    k: Array3<f32>,
    v: Array3<f32>,
    site: AttentionSite,
    source_id: String,
}

impl ProjectedLatents {
    pub fn new(
        q: Array3<f32>,
        k: Array3<f32>,
        v: Array3<f32>,
        site: AttentionSite,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let (hq, tq, dq) = q.dim();
        let (hk, tk, dk) = k.dim();
        let (hv, tv, dv) = v.dim();
        if hq == 0 || tq == 0 || dq == 0 || tk == 0 {
            return Err(Error::Dimension(format!(
                "empty projection: q {:?}, k {:?}",
                q.dim(),
                k.dim()
            )));
        }
        if hq != hk || hq != hv {
            return Err(Error::Dimension(format!("head counts differ: q {hq}, k {hk}, v {hv}")));
        }
        if dq != dk || dq != dv {
            return Err(Error::Dimension(format!("head widths differ: q {dq}, k {dk}, v {dv}")));
        }
        if tk != tv {
            return Err(Error::Dimension(format!("key tokens {tk} != value tokens {tv}")));
        }
        for (name, a) in [("q", &q), ("k", &k), ("v", &v)] {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("projected latents `{name}`")));
            }
        }
        Ok(ProjectedLatents {
            q,
            k,
            v,
            site,
            source_id: source_id.into(),
        })
    }

    pub fn q(&self) -> &Array3<f32> {
        &self.q
    }

    pub fn k(&self) -> &Array3<f32> {
        &self.k
    }

    pub fn v(&self) -> &Array3<f32> {
        &self.v
    }

    pub fn site(&self) -> &AttentionSite {
        &self.site
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn heads(&self) -> usize {
        self.q.dim().0
    }

    pub fn query_tokens(&self) -> usize {
        self.q.dim().1
    }

    pub fn kv_tokens(&self) -> usize {
        self.k.dim().1
    }

    pub fn head_dim(&self) -> usize {
        self.q.dim().2
    }

    pub fn into_parts(self) -> (Array3<f32>, Array3<f32>, Array3<f32>, AttentionSite, String) {
        (self.q, self.k, self.v, self.site, self.source_id)
    }

    /// Queries from `self`, keys and values from `other`.
    pub(crate) fn with_kv_of(&self, other: &ProjectedLatents) -> Result<ProjectedLatents> {
        ProjectedLatents::new(
            self.q.clone(),
            other.k.clone(),
            other.v.clone(),
            self.site.clone(),
            self.source_id.clone(),
        )
    }
}

/// Image-derived conditioning tokens, `[n_tokens, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IPTokenSet {
    pub tokens: Array2<f32>,
    pub source_id: String,
}

impl IPTokenSet {
    pub fn new(tokens: Array2<f32>, source_id: impl Into<String>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::Dimension(format!("empty token set {:?}", tokens.dim())));
        }
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image tokens".into()));
        }
        Ok(IPTokenSet {
            tokens,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Attention output of one set of queries, heads concatenated along the
/// feature axis: `[tokens_q, heads * d_head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures {
    pub x: Array2<f64>,
    pub site: AttentionSite,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::site::{AttentionKind, Block};

    fn site() -> AttentionSite {
        AttentionSite::new("toy-self", AttentionKind::SelfAttn, Block::Layer(0), 0)
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let a = Array3::<f32>::ones((2, 3, 4));
        let heads = Array3::<f32>::ones((1, 3, 4));
        let width = Array3::<f32>::ones((2, 3, 5));
        let toks = Array3::<f32>::ones((2, 2, 4));
        assert!(ProjectedLatents::new(a.clone(), a.clone(), a.clone(), site(), "x").is_ok());
        assert!(ProjectedLatents::new(a.clone(), heads, a.clone(), site(), "x").is_err());
        assert!(ProjectedLatents::new(a.clone(), a.clone(), width, site(), "x").is_err());
        assert!(ProjectedLatents::new(a.clone(), a.clone(), toks.clone(), site(), "x").is_err());
        // different kv token count from q is fine as long as k and v agree
        assert!(ProjectedLatents::new(a, toks.clone(), toks, site(), "x").is_ok());
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut a = Array3::<f32>::ones((1, 2, 2));
        let ok = a.clone();
        a[[0, 1, 1]] = f32::NAN;
        assert!(matches!(
            ProjectedLatents::new(ok.clone(), ok.clone(), a, site(), "x"),
            Err(Error::NonFinite(_))
        ));
        let empty = Array3::<f32>::zeros((1, 0, 2));
        assert!(ProjectedLatents::new(empty.clone(), ok.clone(), ok, site(), "x").is_err());
    }
}
