//! Multimodal fusion of structural and functional graph embeddings.
//!
//! Three methods share this module:
//!
//! * [`FusionMethod::Concat`]: concatenated embeddings feed one linear head.
//! * [`FusionMethod::CrossAtt`]: per-modality self-attention encoders and
//!   cross-modal attention layers; pooled outputs feed one linear head.
//! * [`FusionMethod::Connex`]: the cross-attention outputs are grouped by
//!   their query/key source and aggregated by MLP-Mixer layers into views
//!   `H1`, `H2` (and `H3` with the unified branch), which a last mixer
//!   merges into `Hc`. Every view has its own classification head.
//!
//! With `unified` set, a third input `R^u` is built from both embeddings
//! and takes part in every method. Concatenation order is always
//! structural, functional, unified.

pub mod blocks;

use connex_autodiff::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_shapes, glorot, ParamView};
use crate::error::{CoreError, Result};
use crate::rng::StageRng;
use blocks::{
    cross_attention, cross_shapes, encoder_shapes, mixer_layer, mixer_shapes, pool_tokens,
    self_attention_encoder, tokenize, tokenizer_shapes, unified_representation, unified_shapes,
    validity_tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Concat,
    CrossAtt,
    Connex,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] = [Self::Concat, Self::CrossAtt, Self::Connex];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Concat => "concat",
            Self::CrossAtt => "cross_att",
            Self::Connex => "connex",
        }
    }
}

/// Input views, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Structural,
    Functional,
    Unified,
}

impl View {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Structural => "s",
            Self::Functional => "f",
            Self::Unified => "u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionArch {
    pub method: FusionMethod,
    pub unified: bool,
    /// Subjects per batch; fixed because the mixers mix across subjects.
    pub batch_size: usize,
    /// Width of the incoming embeddings.
    pub channels: usize,
    /// Tokens each embedding is split into.
    pub tokens: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Dropout on pooled cross-attention outputs during training.
    pub dropout: f64,
}

impl Default for FusionArch {
    fn default() -> Self {
        Self {
            method: FusionMethod::Connex,
            unified: true,
            batch_size: 8,
            channels: 32,
            tokens: 8,
            model_dim: 16,
            heads: 4,
            dropout: 0.1,
        }
    }
}

impl FusionArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.batch_size == 0 || self.channels == 0 || self.tokens == 0 || self.model_dim == 0 || self.heads == 0 {
            return bad("fusion sizes must be positive".into());
        }
        if self.channels % self.tokens != 0 {
            return bad(format!(
                "channel width {} not divisible by {} tokens",
                self.channels, self.tokens
            ));
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!(
                "model width {} not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("fusion dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn views(&self) -> Vec<View> {
        let mut v = vec![View::Structural, View::Functional];
        if self.unified {
            v.push(View::Unified);
        }
        v
    }

    /// Ordered (query/key source, value source) pairs of the cross layers.
    pub fn cross_pairs(&self) -> Vec<(View, View)> {
        let views = self.views();
        let mut out = Vec::new();
        for &a in &views {
            for &b in &views {
                if a != b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn num_cross_layers(&self) -> usize {
        match self.method {
            FusionMethod::Concat => 0,
            _ => self.cross_pairs().len(),
        }
    }

    /// Mixer widths of the per-source views (`H1`, `H2`, `H3`).
    fn view_width(&self) -> usize {
        (self.views().len() - 1) * self.model_dim
    }

    /// Width of `Hc`.
    pub fn fused_width(&self) -> usize {
        self.views().len() * self.view_width()
    }

    pub fn num_heads(&self) -> usize {
        match self.method {
            FusionMethod::Connex => self.views().len() + 1,
            _ => 1,
        }
    }

    fn head_names(&self) -> Vec<String> {
        match self.method {
            FusionMethod::Connex => {
                let mut v: Vec<String> = (1..=self.views().len()).map(|i| format!("h{i}")).collect();
                v.push("hc".into());
                v
            }
            _ => vec!["out".into()],
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (s, c, d) = (self.batch_size, self.channels, self.model_dim);
        let mut out = Vec::new();
        if self.unified {
            out.extend(unified_shapes(s, c));
        }
        match self.method {
            FusionMethod::Concat => {
                out.push(("head.out.w".into(), vec![self.views().len() * c, 2]));
                out.push(("head.out.b".into(), vec![2]));
            }
            FusionMethod::CrossAtt | FusionMethod::Connex => {
                for v in self.views() {
                    out.extend(tokenizer_shapes(&format!("tok.{}", v.tag()), c, self.tokens, d));
                    out.extend(encoder_shapes(&format!("enc.{}", v.tag()), d));
                }
                for (a, b) in self.cross_pairs() {
                    out.extend(cross_shapes(&format!("cross.{}{}", a.tag(), b.tag()), d));
                }
                if self.method == FusionMethod::CrossAtt {
                    out.push(("head.out.w".into(), vec![self.num_cross_layers() * d, 2]));
                    out.push(("head.out.b".into(), vec![2]));
                } else {
                    let names = self.head_names();
                    for name in &names[..names.len() - 1] {
                        out.extend(mixer_shapes(&format!("mix.{name}"), s, self.view_width()));
                        out.push((format!("head.{name}.w"), vec![self.view_width(), 2]));
                        out.push((format!("head.{name}.b"), vec![2]));
                    }
                    out.extend(mixer_shapes("mix.hc", s, self.fused_width()));
                    out.push(("head.hc.w".into(), vec![self.fused_width(), 2]));
                    out.push(("head.hc.b".into(), vec![2]));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub arch: FusionArch,
    pub params: ParamStore,
}

impl FusionModel {
    /// Glorot-uniform matrices, unit layer-norm gains, zero biases.
    pub fn init(arch: FusionArch, rng: &mut StageRng) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 2 {
                    glorot(&shape, rng)
                } else if name.ends_with(".g") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: FusionArch, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        check_shapes(&arch.param_shapes(), &params)?;
        Ok(Self { arch, params })
    }
}

/// One fixed-size batch of paired embeddings; rows past the real subjects
/// are zero padding with `valid == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBatch {
    pub rs: Tensor,
    pub rf: Tensor,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl FusionBatch {
    /// Gathers `rows` of the embedding tables and pads to `size`.
    pub fn gather(rs: &Tensor, rf: &Tensor, labels: &[u8], rows: &[usize], size: usize) -> Result<Self> {
        if rows.is_empty() || rows.len() > size {
            return Err(CoreError::Parameter(format!(
                "{} subjects for a fusion batch of {size}",
                rows.len()
            )));
        }
        let c = rs.last_dim();
        if rf.last_dim() != c {
            return Err(CoreError::Parameter(format!(
                "embedding widths differ: {c} vs {}",
                rf.last_dim()
            )));
        }
        let take = |t: &Tensor| {
            let mut v = vec![0.0; size * c];
            for (r, &i) in rows.iter().enumerate() {
                v[r * c..(r + 1) * c].copy_from_slice(t.row(i));
            }
            Tensor::new(vec![size, c], v)
        };
        let mut lab = vec![0u8; size];
        let mut valid = vec![false; size];
        for (r, &i) in rows.iter().enumerate() {
            lab[r] = labels[i];
            valid[r] = true;
        }
        Ok(Self {
            rs: take(rs)?,
            rf: take(rf)?,
            labels: lab,
            valid,
        })
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Nodes produced by [`fusion_forward`].
#[derive(Debug, Clone)]
pub struct FusionOutputs {
    /// Classification logits, `[S, 2]` each. For ConneX the order is
    /// `H1, H2, (H3,) Hc`; the last entry is always the final prediction.
    pub logits: Vec<NodeId>,
    /// The aggregated views (`H1, H2, (H3,) Hc`) for ConneX, empty otherwise.
    pub views: Vec<NodeId>,
    /// Pooled output of every cross-attention layer, in `cross_pairs` order.
    pub cross: Vec<NodeId>,
    /// Every attention weight tensor, `[S, T, T]`.
    pub attention: Vec<NodeId>,
}

impl FusionOutputs {
    pub fn final_logits(&self) -> NodeId {
        *self.logits.last().expect("at least one head")
    }
}

/// Builds the fusion network over the input embedding nodes (`[S, C]`).
pub fn fusion_forward(
    g: &mut Graph,
    p: ParamView<'_>,
    arch: &FusionArch,
    rs: NodeId,
    rf: NodeId,
    valid: &[bool],
    rng: Option<&mut StageRng>,
) -> FusionOutputs {
    let (s, c, t, d) = (arch.batch_size, arch.channels, arch.tokens, arch.model_dim);
    let mut inputs = vec![rs, rf];
    if arch.unified {
        inputs.push(unified_representation(g, p, rs, rf, valid, c));
    }
    let head = |g: &mut Graph, name: &str, x: NodeId| {
        let w = p.node(g, &format!("head.{name}.w"));
        let b = p.node(g, &format!("head.{name}.b"));
        let z = g.matmul(x, w);
        g.add_row_bias(z, b)
    };

    if arch.method == FusionMethod::Concat {
        let cat = g.concat(&inputs, 1);
        let logits = head(g, "out", cat);
        return FusionOutputs {
            logits: vec![logits],
            views: vec![],
            cross: vec![],
            attention: vec![],
        };
    }

    let views = arch.views();
    let mut attention = Vec::new();
    let mut encoded = Vec::with_capacity(views.len());
    for (v, &x) in views.iter().zip(&inputs) {
        let tok = tokenize(g, p, &format!("tok.{}", v.tag()), x, s, c, t);
        let (enc, att) = self_attention_encoder(g, p, &format!("enc.{}", v.tag()), tok, s, t, d, arch.heads);
        attention.extend(att);
        encoded.push(enc);
    }
    let index = |v: View| views.iter().position(|&w| w == v).expect("view present");

    let mut rng = rng;
    let mut cross = Vec::new();
    for (a, b) in arch.cross_pairs() {
        let prefix = format!("cross.{}{}", a.tag(), b.tag());
        let (y, att) = cross_attention(g, p, &prefix, encoded[index(a)], encoded[index(b)], s, t, d);
        attention.push(att);
        let mut pooled = pool_tokens(g, y, s, t, d);
        if let Some(r) = rng.as_deref_mut() {
            if arch.dropout > 0.0 {
                pooled = g.dropout(pooled, arch.dropout, r.gen(), true);
            }
        }
        cross.push(pooled);
    }

    if arch.method == FusionMethod::CrossAtt {
        let cat = g.concat(&cross, 1);
        let logits = head(g, "out", cat);
        return FusionOutputs {
            logits: vec![logits],
            views: vec![],
            cross,
            attention,
        };
    }

    let per_source = views.len() - 1;
    let names = arch.head_names();
    let mut hs = Vec::with_capacity(views.len() + 1);
    let mut logits = Vec::with_capacity(views.len() + 1);
    for (k, group) in cross.chunks(per_source).enumerate() {
        let cat = if group.len() == 1 { group[0] } else { g.concat(group, 1) };
        let name = &names[k];
        let h = mixer_layer(g, p, &format!("mix.{name}"), cat, &validity_tensor(valid, arch.view_width()));
        logits.push(head(g, name, h));
        hs.push(h);
    }
    let cat = g.concat(&hs, 1);
    let hc = mixer_layer(g, p, "mix.hc", cat, &validity_tensor(valid, arch.fused_width()));
    logits.push(head(g, "hc", hc));
    hs.push(hc);
    FusionOutputs {
        logits,
        views: hs,
        cross,
        attention,
    }
}
