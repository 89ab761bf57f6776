//! Token and region embeddings, plus the region refining layer.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{multi_head, AttentionMask, Session};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

/// Most regions one image may carry.
pub const MAX_REGIONS: usize = 100;

/// `[x1/W, y1/H, x2/W, y2/H, area/(W·H)]` for a pixel box `(x1, y1, x2, y2)`.
pub fn position_vector(bbox: [f64; 4], width: f64, height: f64) -> Result<[f64; 5]> {
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::Input(format!("degenerate image size {width}x{height}")));
    }
    let [x1, y1, x2, y2] = bbox;
    if !(0.0 <= x1 && x1 <= x2 && x2 <= width && 0.0 <= y1 && y1 <= y2 && y2 <= height) {
        return Err(Error::Input(format!(
            "box {bbox:?} outside {width}x{height} image"
        )));
    }
    let area = (x2 - x1) * (y2 - y1) / (width * height);
    Ok([x1 / width, y1 / height, x2 / width, y2 / height, area])
}

/// Detected regions of one image: `N` feature rows and their boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    features: Tensor,
    positions: Vec<[f64; 5]>,
}

impl RegionSet {
    pub fn new(features: Tensor, positions: Vec<[f64; 5]>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Input("region features must be a matrix".into()));
        }
        let n = features.rows();
        if n != positions.len() {
            return Err(Error::Input(format!(
                "{n} feature rows but {} positions",
                positions.len()
            )));
        }
        if n > MAX_REGIONS {
            return Err(Error::Input(format!("{n} regions exceeds {MAX_REGIONS}")));
        }
        for (i, p) in positions.iter().enumerate() {
            let [x1, y1, x2, y2, a] = *p;
            let inside = p.iter().all(|v| (0.0..=1.0).contains(v));
            if !inside || x1 > x2 || y1 > y2 || (a - (x2 - x1) * (y2 - y1)).abs() > 1e-9 {
                return Err(Error::Input(format!("region {i} has invalid position {p:?}")));
            }
        }
        if !features.is_finite() {
            return Err(Error::Input("non-finite region feature".into()));
        }
        Ok(RegionSet { features, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn positions(&self) -> &[[f64; 5]] {
        &self.positions
    }

    /// `[N × (d_feat + 5)]` rows of features followed by positions.
    pub fn joined(&self) -> Tensor {
        let d = self.feat_dim();
        let n = self.len();
        let mut data = Vec::with_capacity(n * (d + 5));
        for i in 0..n {
            data.extend_from_slice(self.features.row(i));
            data.extend_from_slice(&self.positions[i]);
        }
        Tensor::new(vec![n, d + 5], data).expect("joined shape")
    }

    /// Regions reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        RegionSet {
            features: self.features.select_rows(order),
            positions: order.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

/// Token plus position embeddings for `ids` placed at `positions`.
pub fn embed_tokens_at<'t>(s: &Session<'t, '_>, ids: &[u32], positions: &[usize]) -> Result<Var<'t>> {
    if ids.is_empty() || ids.len() != positions.len() {
        return Err(Error::Input(format!(
            "{} tokens with {} positions",
            ids.len(),
            positions.len()
        )));
    }
    let table = s.config().max_positions;
    if let Some(&p) = positions.iter().find(|&&p| p >= table) {
        return Err(Error::Input(format!("position {p} outside table of {table}")));
    }
    let l = s.layout();
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = s.p(l.token_emb).embedding(&ids)?;
    let pos = s.p(l.pos_emb).embedding(positions)?;
    tok.add(pos)
}

/// `[M×h]` embedding of a caption at positions `0..M`.
pub fn embed_tokens<'t>(s: &Session<'t, '_>, seq: &TokenSequence) -> Result<Var<'t>> {
    let positions: Vec<usize> = (0..seq.len()).collect();
    embed_tokens_at(s, seq.ids(), &positions)
}

/// Linear projection of concatenated features and positions to width `h`.
pub fn encode_regions<'t>(s: &Session<'t, '_>, r: &RegionSet) -> Result<Var<'t>> {
    if r.feat_dim() != s.config().feat_dim {
        return Err(Error::Input(format!(
            "region features have dimension {}, model expects {}",
            r.feat_dim(),
            s.config().feat_dim
        )));
    }
    let l = s.layout();
    s.tape
        .constant(r.joined())
        .linear(s.p(l.region_w), Some(s.p(l.region_b)))
}

/// Attention-on-attention refinement: a sigmoid gate times an information
/// vector, both computed from the queries and the attended values, added
/// back residually and layer-normalized.
pub fn aoa_refine<'t>(s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
    let n = x.shape()[0];
    let a = s.layout().aoa;
    let q = x.linear(s.p(a.wq), None)?;
    let k = x.linear(s.p(a.wk), None)?;
    let v = x.linear(s.p(a.wv), None)?;
    let att = multi_head(q, k, v, s.config().heads, &AttentionMask::full(n, n))?;
    let gate = q
        .linear(s.p(a.w1), None)?
        .add(att.linear(s.p(a.w2), Some(s.p(a.b1)))?)?
        .sigmoid();
    let info = q
        .linear(s.p(a.w3), None)?
        .add(att.linear(s.p(a.w4), Some(s.p(a.b2)))?)?;
    s.norm(x.add(gate.mul(info)?)?, a.norm)
}

/// Projected and refined region rows; callers that also need the
/// pre-refinement projection (feature generation targets) use both.
pub fn region_tokens<'t>(s: &Session<'t, '_>, r: &RegionSet) -> Result<(Var<'t>, Var<'t>)> {
    let projected = encode_regions(s, r)?;
    let refined = aoa_refine(s, projected)?;
    Ok((projected, refined))
}
