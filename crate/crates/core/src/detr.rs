//! Desk-scale detection transformer: patch-embedding backbone, dense
//! multi-head attention encoder/decoder with learned queries, class and box
//! heads, and capture of per-query cross-attention maps.

use rand::Rng;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, Norm, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Non-overlapping square patches, each linearly embedded.
#[derive(Clone, Copy, Debug)]
pub struct Backbone {
    pub patch: usize,
    pub embed: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, patch: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Backbone {
            patch,
            embed: Linear::he(store, "backbone.patch_embed", 3 * patch * patch, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed.fan_out
    }
}

/// Cuts a `[3, H, W]` image into location-major patch rows
/// `[(H/patch)·(W/patch), 3·patch²]`, channel-major within a patch.
pub fn patchify(image: &Tensor, patch: usize) -> Result<(Tensor, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![3],
        });
    }
    let (h, w) = (s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = 3 * patch * patch;
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * row);
    for gi in 0..gh {
        for gj in 0..gw {
            for c in 0..3 {
                for dy in 0..patch {
                    let base = (c * h + gi * patch + dy) * w + gj * patch;
                    out.extend_from_slice(&px[base..base + patch]);
                }
            }
        }
    }
    Ok((Tensor::new([gh * gw, row], out)?, gh, gw))
}

/// Backbone features for one image: location-major `[H·W, Cb]` plus grid size.
pub fn backbone_forward(tape: &mut Tape, p: &Bound, backbone: &Backbone, image: &Tensor) -> Result<(Var, usize, usize)> {
    let (patches, gh, gw) = patchify(image, backbone.patch)?;
    let x = tape.constant(patches);
    Ok((backbone.embed.forward(tape, p, x)?, gh, gw))
}

/// Fixed 2-D sinusoidal encoding `[H·W, C]`: the first half of the channels
/// encode the row, the second half the column.
pub fn sine_positions(height: usize, width: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let quarter = half / 2;
    let two_pi = std::f64::consts::TAU;
    let mut data = vec![0.0; height * width * channels];
    for i in 0..height {
        for j in 0..width {
            let row = &mut data[(i * width + j) * channels..][..channels];
            let ys = (i as f64 + 1.0) / height as f64 * two_pi;
            let xs = (j as f64 + 1.0) / width as f64 * two_pi;
            for k in 0..quarter {
                let freq = 10000f64.powf(2.0 * k as f64 / half as f64);
                row[2 * k] = (ys / freq).sin();
                row[2 * k + 1] = (ys / freq).cos();
                row[half + 2 * k] = (xs / freq).sin();
                row[half + 2 * k + 1] = (xs / freq).cos();
            }
        }
    }
    Tensor::new([height * width, channels], data).expect("position shape")
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (n, c) = (tape.shape(x)[0], tape.shape(x)[1]);
        let x = tape.reshape(x, &[n, self.heads, c / self.heads])?;
        tape.permute(x, &[1, 0, 2])
    }

    /// Returns the attended values `[Nq, C]` and the post-softmax weights
    /// `[heads, Nq, Nk]`.
    fn forward(&self, tape: &mut Tape, p: &Bound, query: Var, key: Var, value: Var) -> Result<(Var, Var)> {
        let nq = tape.shape(query)[0];
        let c = tape.shape(query)[1];
        let d = c / self.heads;
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[nq, c])?;
        Ok((self.out.forward(tape, p, ctx)?, weights))
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

/// Transformer sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectorDims {
    pub channels: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    /// Object classes, excluding "no object".
    pub classes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub dims: DetectorDims,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    pub query_embed: ParamId,
    pub class_head: Linear,
    box_head: [Linear; 3],
}

impl DetectorParams {
    pub fn new(store: &mut ParamStore, dims: DetectorDims, rng: &mut impl Rng) -> Result<Self> {
        let c = dims.channels;
        if dims.heads == 0 || c % dims.heads != 0 || c % 4 != 0 {
            return Err(Error::config(format!(
                "channels ({c}) must be divisible by 4 and by the head count ({})",
                dims.heads
            )));
        }
        let encoder = (0..dims.encoder_layers)
            .map(|l| {
                let n = format!("encoder.{l}");
                EncoderLayer {
                    attn: Attention::new(store, &format!("{n}.attn"), c, dims.heads, rng),
                    norm1: Norm::new(store, &format!("{n}.norm1"), c),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), c, dims.ffn_dim, rng),
                    norm2: Norm::new(store, &format!("{n}.norm2"), c),
                }
            })
            .collect();
        let decoder = (0..dims.decoder_layers)
            .map(|l| {
                let n = format!("decoder.{l}");
                DecoderLayer {
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), c, dims.heads, rng),
                    norm1: Norm::new(store, &format!("{n}.norm1"), c),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), c, dims.heads, rng),
                    norm2: Norm::new(store, &format!("{n}.norm2"), c),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), c, dims.ffn_dim, rng),
                    norm3: Norm::new(store, &format!("{n}.norm3"), c),
                }
            })
            .collect();
        let decoder_norm = Norm::new(store, "decoder.norm", c);
        let q: Vec<f64> = (0..dims.queries * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let query_embed = store.add("query_embed", Tensor::new([dims.queries, c], q)?);
        let class_head = Linear::new(store, "class_head", c, dims.classes + 1, rng);
        let box_head = [
            Linear::new(store, "box_head.0", c, c, rng),
            Linear::new(store, "box_head.1", c, c, rng),
            Linear::new(store, "box_head.2", c, 4, rng),
        ];
        Ok(DetectorParams {
            dims,
            encoder,
            decoder,
            decoder_norm,
            query_embed,
            class_head,
            box_head,
        })
    }
}

/// Tape handles for one detector pass.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// `[Q, K+1]`, last column is "no object".
    pub logits: Var,
    /// `[Q, 4]` sigmoid boxes `(cx, cy, w, h)`.
    pub boxes: Var,
    /// Per decoder layer, `[heads, Q, H·W]` cross-attention weights.
    pub cross_attention: Vec<Var>,
    /// `(logits, boxes)` from the shared heads after each earlier decoder
    /// layer, for auxiliary losses.
    pub aux: Vec<(Var, Var)>,
    pub height: usize,
    pub width: usize,
}

/// Final norm, class head and box MLP on decoder states `[Q, C]`.
fn prediction_heads(tape: &mut Tape, p: &Bound, params: &DetectorParams, tgt: Var) -> Result<(Var, Var)> {
    let hs = params.decoder_norm.forward(tape, p, tgt)?;
    let logits = params.class_head.forward(tape, p, hs)?;
    let mut b = hs;
    for (i, lin) in params.box_head.iter().enumerate() {
        b = lin.forward(tape, p, b)?;
        if i < 2 {
            b = tape.relu(b);
        }
    }
    Ok((logits, tape.sigmoid(b)))
}

/// Encoder + decoder + heads over location-major embeddings `[H·W, C]`.
pub fn detector_forward(tape: &mut Tape, p: &Bound, params: &DetectorParams, embeddings: Var, height: usize, width: usize) -> Result<DetectorOutput> {
    let c = params.dims.channels;
    if tape.shape(embeddings) != [height * width, c] {
        return Err(Error::Shape {
            op: "detector input",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![height * width, c],
        });
    }
    let pos = tape.constant(sine_positions(height, width, c));
    // position enters the value path once; q and k get it again per layer
    let mut x = tape.add(embeddings, pos)?;
    for layer in &params.encoder {
        let qk = tape.add(x, pos)?;
        let (a, _) = layer.attn.forward(tape, p, qk, qk, x)?;
        let r = tape.add(x, a)?;
        x = layer.norm1.forward(tape, p, r)?;
        let f = layer.ffn.forward(tape, p, x)?;
        let r = tape.add(x, f)?;
        x = layer.norm2.forward(tape, p, r)?;
    }
    let memory = x;
    let memory_keys = tape.add(memory, pos)?;

    let query_pos = p[params.query_embed];
    let mut tgt = tape.constant(Tensor::zeros([params.dims.queries, c]));
    let mut cross_attention = Vec::with_capacity(params.decoder.len());
    let mut layer_outputs = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let qk = tape.add(tgt, query_pos)?;
        let (a, _) = layer.self_attn.forward(tape, p, qk, qk, tgt)?;
        let r = tape.add(tgt, a)?;
        tgt = layer.norm1.forward(tape, p, r)?;
        let q = tape.add(tgt, query_pos)?;
        let (a, w) = layer.cross_attn.forward(tape, p, q, memory_keys, memory)?;
        cross_attention.push(w);
        let r = tape.add(tgt, a)?;
        tgt = layer.norm2.forward(tape, p, r)?;
        let f = layer.ffn.forward(tape, p, tgt)?;
        let r = tape.add(tgt, f)?;
        tgt = layer.norm3.forward(tape, p, r)?;
        layer_outputs.push(tgt);
    }
    let mut aux = Vec::with_capacity(layer_outputs.len().saturating_sub(1));
    for &t in layer_outputs.iter().rev().skip(1).rev() {
        aux.push(prediction_heads(tape, p, params, t)?);
    }
    let (logits, boxes) = prediction_heads(tape, p, params, tgt)?;
    Ok(DetectorOutput {
        logits,
        boxes,
        cross_attention,
        aux,
        height,
        width,
    })
}

/// One detection proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_logits: Vec<f64>,
    pub bbox: BBox,
}

impl Detection {
    pub fn probabilities(&self) -> Vec<f64> {
        let mx = self.class_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.class_logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Best real class and its probability (the "no object" slot is skipped).
    pub fn top_class(&self) -> (usize, f64) {
        let probs = self.probabilities();
        let k = probs.len() - 1;
        let mut best = 0;
        for c in 1..k {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        (best, probs[best])
    }
}

/// Per-detection attention field `[H, W]` summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl AttentionMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

impl DetectorOutput {
    pub fn detections(&self, tape: &Tape) -> Vec<Detection> {
        detections_from(tape, self.logits, self.boxes)
    }

    /// Mean over decoder layers and heads of the cross-attention weights.
    pub fn attention_maps(&self, tape: &Tape) -> Vec<AttentionMap> {
        let hw = self.height * self.width;
        let Some(&first) = self.cross_attention.first() else {
            return Vec::new();
        };
        let shape = tape.shape(first);
        let (heads, q) = (shape[0], shape[1]);
        let mut acc = vec![0.0; q * hw];
        for &w in &self.cross_attention {
            let v = tape.value(w).data();
            for h in 0..heads {
                for (a, x) in acc.iter_mut().zip(&v[h * q * hw..(h + 1) * q * hw]) {
                    *a += x;
                }
            }
        }
        let denom = (heads * self.cross_attention.len()) as f64;
        acc.chunks(hw)
            .map(|row| AttentionMap {
                values: row.iter().map(|x| x / denom).collect(),
                height: self.height,
                width: self.width,
            })
            .collect()
    }
}

/// Host-side detections from `[Q, K+1]` logits and `[Q, 4]` boxes.
pub fn detections_from(tape: &Tape, logits: Var, boxes: Var) -> Vec<Detection> {
    let logits = tape.value(logits);
    let boxes = tape.value(boxes).data();
    let k1 = logits.shape()[1];
    logits
        .data()
        .chunks(k1)
        .zip(boxes.chunks(4))
        .map(|(l, b)| Detection {
            class_logits: l.to_vec(),
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> DetectorDims {
        DetectorDims {
            channels: 8,
            heads: 2,
            ffn_dim: 12,
            queries: 4,
            classes: 3,
            encoder_layers: 2,
            decoder_layers: 2,
        }
    }

    #[test]
    fn patch_grid_arithmetic() {
        let img = Tensor::zeros([3, 64, 64]);
        let (p, gh, gw) = patchify(&img, 8).unwrap();
        assert_eq!((gh, gw), (8, 8));
        assert_eq!(p.shape(), &[64, 192]);
        assert!(matches!(patchify(&Tensor::zeros([3, 60, 64]), 8), Err(Error::Config(_))));
    }

    #[test]
    fn patch_layout_is_channel_major() {
        let data: Vec<f64> = (0..3 * 4 * 4).map(|v| v as f64).collect();
        let img = Tensor::new([3, 4, 4], data).unwrap();
        let (p, _, _) = patchify(&img, 2).unwrap();
        // patch (0, 1): channel 0 rows 0..2, columns 2..4
        assert_eq!(&p.data()[12..16], &[2., 3., 6., 7.]);
        assert_eq!(&p.data()[16..18], &[18., 19.]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, 8, 16, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let (f, gh, gw) = backbone_forward(&mut tape, &b, &bb, &Tensor::zeros([3, 64, 64])).unwrap();
        assert_eq!((gh, gw), (8, 8));
        assert_eq!(tape.shape(f), &[64, 16]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_outputs_are_finite_and_maps_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let det = DetectorParams::new(&mut store, dims(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new([6, 8], (0..48).map(|v| (v as f64 * 0.3).cos()).collect()).unwrap());
        let out = detector_forward(&mut tape, &b, &det, x, 2, 3).unwrap();
        let dets = out.detections(&tape);
        assert_eq!(dets.len(), 4);
        for d in &dets {
            assert!(d.class_logits.iter().all(|v| v.is_finite()));
            for v in d.bbox.to_array() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
        let maps = out.attention_maps(&tape);
        assert_eq!(maps.len(), 4);
        for m in &maps {
            assert!(m.values.iter().all(|&v| v >= 0.0));
            assert!((m.total() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let det = DetectorParams::new(&mut store, dims(), &mut rng).unwrap();
        let x = Tensor::new([6, 8], (0..48).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = detector_forward(&mut tape, &b, &det, xv, 2, 3).unwrap();
            (out.detections(&tape), out.attention_maps(&tape))
        };
        let (d0, a0) = run(&store);
        let perm = [2usize, 0, 3, 1];
        let q = store.get(det.query_embed).clone();
        let mut permuted = q.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted.data_mut()[new * 8..(new + 1) * 8].copy_from_slice(&q.data()[old * 8..(old + 1) * 8]);
        }
        *store.get_mut(det.query_embed) = permuted;
        let (d1, a1) = run(&store);
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in d1[new].class_logits.iter().zip(&d0[old].class_logits) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!(d1[new].bbox.l1(&d0[old].bbox) < 1e-12);
            for (x, y) in a1[new].values.iter().zip(&a0[old].values) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bad = DetectorDims { heads: 3, ..dims() };
        assert!(DetectorParams::new(&mut store, bad, &mut rng).is_err());
    }

    #[test]
    fn positions_are_distinct_per_cell() {
        let p = sine_positions(4, 4, 16);
        let rows: Vec<&[f64]> = p.data().chunks(16).collect();
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                let d: f64 = rows[a].iter().zip(rows[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-6);
            }
        }
    }
}
