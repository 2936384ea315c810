//! Building blocks of the fusion network. Every block takes a
//! [`ParamView`] and a name prefix, so the same code serves training,
//! evaluation and gradient checks.

use connex_autodiff::{Graph, NodeId, Tensor};

use crate::backbone::ParamView;

pub const LN_EPS: f64 = 1e-5;

/// Names and shapes of one mixer layer's parameters for `s` subjects and
/// `width` channels.
pub fn mixer_shapes(prefix: &str, s: usize, width: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.x1"), vec![2 * s, s]),
        (format!("{prefix}.x2"), vec![s, 2 * s]),
        (format!("{prefix}.x3"), vec![2 * width, width]),
        (format!("{prefix}.x4"), vec![width, 2 * width]),
        (format!("{prefix}.ln1.g"), vec![width]),
        (format!("{prefix}.ln1.b"), vec![width]),
        (format!("{prefix}.ln2.g"), vec![width]),
        (format!("{prefix}.ln2.b"), vec![width]),
    ]
}

/// Row-validity mask broadcast to `[s, width]`.
pub fn validity_tensor(valid: &[bool], width: usize) -> Tensor {
    let values = valid
        .iter()
        .flat_map(|&v| std::iter::repeat(if v { 1.0 } else { 0.0 }).take(width))
        .collect();
    Tensor::new(vec![valid.len(), width], values).expect("validity shape")
}

fn layer_norm(g: &mut Graph, p: ParamView<'_>, prefix: &str, x: NodeId) -> NodeId {
    let gain = p.node(g, &format!("{prefix}.g"));
    let bias = p.node(g, &format!("{prefix}.b"));
    g.layer_norm(x, Some((gain, bias)), LN_EPS)
}

fn linear(g: &mut Graph, p: ParamView<'_>, prefix: &str, x: NodeId) -> NodeId {
    let w = p.node(g, &format!("{prefix}.w"));
    let b = p.node(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row_bias(y, b)
}

/// One MLP-Mixer layer over a `[S, width]` block whose rows are subjects.
///
/// Token mixing runs an MLP across the subject axis
/// (`A = Z + X2 gelu(X1 LN(Z))`), channel mixing runs one across the
/// feature axis (`B = A + gelu(LN(A) X3^T) X4^T`). Rows flagged invalid are
/// zeroed on entry and their normalized values are zeroed too, so padding
/// never leaks into real subjects.
pub fn mixer_layer(g: &mut Graph, p: ParamView<'_>, prefix: &str, z: NodeId, valid: &Tensor) -> NodeId {
    let mask = g.constant(valid.clone());
    let z0 = g.mul(z, mask);

    let u = layer_norm(g, p, &format!("{prefix}.ln1"), z0);
    let u = g.mul(u, mask);
    let x1 = p.node(g, &format!("{prefix}.x1"));
    let x2 = p.node(g, &format!("{prefix}.x2"));
    let h = g.matmul(x1, u);
    let h = g.gelu(h);
    let t = g.matmul(x2, h);
    let a = g.add(z0, t);

    let v = layer_norm(g, p, &format!("{prefix}.ln2"), a);
    let x3 = p.node(g, &format!("{prefix}.x3"));
    let x4 = p.node(g, &format!("{prefix}.x4"));
    let x3t = g.transpose(x3);
    let x4t = g.transpose(x4);
    let h = g.matmul(v, x3t);
    let h = g.gelu(h);
    let c = g.matmul(h, x4t);
    g.add(a, c)
}

pub fn unified_shapes(s: usize, c: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = mixer_shapes("unified.mix", s, 2 * c);
    out.push(("unified.fc.w".into(), vec![2 * c, c]));
    out.push(("unified.fc.b".into(), vec![c]));
    out
}

/// `R^u`: concatenate both modality embeddings, mix, project back to `C`.
pub fn unified_representation(
    g: &mut Graph,
    p: ParamView<'_>,
    rs: NodeId,
    rf: NodeId,
    valid: &[bool],
    c: usize,
) -> NodeId {
    let cat = g.concat(&[rs, rf], 1);
    let mixed = mixer_layer(g, p, "unified.mix", cat, &validity_tensor(valid, 2 * c));
    linear(g, p, "unified.fc", mixed)
}

pub fn tokenizer_shapes(prefix: &str, c: usize, tokens: usize, d: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w"), vec![c / tokens, d]),
        (format!("{prefix}.b"), vec![d]),
    ]
}

/// Splits each subject's `C`-vector into `tokens` chunks and projects every
/// chunk to width `d`: `[S, C] -> [S * tokens, d]`.
pub fn tokenize(
    g: &mut Graph,
    p: ParamView<'_>,
    prefix: &str,
    r: NodeId,
    s: usize,
    c: usize,
    tokens: usize,
) -> NodeId {
    let x = g.reshape(r, &[s * tokens, c / tokens]);
    linear(g, p, prefix, x)
}

pub fn encoder_shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = ["wq", "wk", "wv"]
        .iter()
        .map(|w| (format!("{prefix}.{w}"), vec![d, d]))
        .collect();
    out.push((format!("{prefix}.out.w"), vec![d, d]));
    out.push((format!("{prefix}.out.b"), vec![d]));
    out.push((format!("{prefix}.ln1.g"), vec![d]));
    out.push((format!("{prefix}.ln1.b"), vec![d]));
    out.push((format!("{prefix}.fc.w"), vec![d, d]));
    out.push((format!("{prefix}.fc.b"), vec![d]));
    out.push((format!("{prefix}.ln2.g"), vec![d]));
    out.push((format!("{prefix}.ln2.b"), vec![d]));
    out
}

/// Scaled dot-product attention per subject. `q`, `k`, `v` are
/// `[S * T, w]`; returns the `[S * T, w]` output and the `[S, T, T]`
/// attention weights.
fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, s: usize, t: usize, w: usize) -> (NodeId, NodeId) {
    let q3 = g.reshape(q, &[s, t, w]);
    let k3 = g.reshape(k, &[s, t, w]);
    let v3 = g.reshape(v, &[s, t, w]);
    let scores = g.batch_matmul(q3, k3, true);
    let scores = g.scale(scores, 1.0 / (w as f64).sqrt());
    let att = g.softmax(scores);
    let out = g.batch_matmul(att, v3, false);
    (g.reshape(out, &[s * t, w]), att)
}

/// Multi-head self-attention followed by a feed-forward layer, each with a
/// residual connection and layer normalization. Tokens attend only within
/// their own subject. Returns the output and one attention node per head.
#[allow(clippy::too_many_arguments)]
pub fn self_attention_encoder(
    g: &mut Graph,
    p: ParamView<'_>,
    prefix: &str,
    x: NodeId,
    s: usize,
    t: usize,
    d: usize,
    heads: usize,
) -> (NodeId, Vec<NodeId>) {
    let dh = d / heads;
    let wq = p.node(g, &format!("{prefix}.wq"));
    let wk = p.node(g, &format!("{prefix}.wk"));
    let wv = p.node(g, &format!("{prefix}.wv"));
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let mut outs = Vec::with_capacity(heads);
    let mut atts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh);
        let kh = g.slice(k, 1, h * dh, dh);
        let vh = g.slice(v, 1, h * dh, dh);
        let (o, a) = attention(g, qh, kh, vh, s, t, dh);
        outs.push(o);
        atts.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1) };
    let mha = linear(g, p, &format!("{prefix}.out"), cat);
    let r1 = g.add(x, mha);
    let x1 = layer_norm(g, p, &format!("{prefix}.ln1"), r1);
    let f = linear(g, p, &format!("{prefix}.fc"), x1);
    let f = g.gelu(f);
    let r2 = g.add(x1, f);
    (layer_norm(g, p, &format!("{prefix}.ln2"), r2), atts)
}

pub fn cross_shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.wq"), vec![d, d]),
        (format!("{prefix}.wk"), vec![d, d]),
        (format!("{prefix}.wv"), vec![d, d]),
        (format!("{prefix}.out.w"), vec![d, d]),
        (format!("{prefix}.out.b"), vec![d]),
        (format!("{prefix}.ln.g"), vec![d]),
        (format!("{prefix}.ln.b"), vec![d]),
    ]
}

/// Single-head attention with queries and keys from `qk` and values from
/// `vs`, plus a residual from `qk` and layer normalization. Returns the
/// output and the attention weights.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    g: &mut Graph,
    p: ParamView<'_>,
    prefix: &str,
    qk: NodeId,
    vs: NodeId,
    s: usize,
    t: usize,
    d: usize,
) -> (NodeId, NodeId) {
    let wq = p.node(g, &format!("{prefix}.wq"));
    let wk = p.node(g, &format!("{prefix}.wk"));
    let wv = p.node(g, &format!("{prefix}.wv"));
    let q = g.matmul(qk, wq);
    let k = g.matmul(qk, wk);
    let v = g.matmul(vs, wv);
    let (o, att) = attention(g, q, k, v, s, t, d);
    let o = linear(g, p, &format!("{prefix}.out"), o);
    let r = g.add(qk, o);
    (layer_norm(g, p, &format!("{prefix}.ln"), r), att)
}

/// Mean over each subject's tokens: `[S * T, d] -> [S, d]`.
pub fn pool_tokens(g: &mut Graph, x: NodeId, s: usize, t: usize, d: usize) -> NodeId {
    let x3 = g.reshape(x, &[s, t, d]);
    g.mean(x3, 1)
}
