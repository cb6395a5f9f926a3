//! The toy-scale hierarchical network: convolutional backbone with a
//! multi-scale mixer, optional text early fusion, two-stage object decoding,
//! a querying transformer that parses selected object queries into part
//! queries, and box/class/mask heads at both levels.

pub mod checkpoint;
pub mod embeddings;
pub mod layers;
pub mod params;

use ndarray::{s, Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Value;
use crate::geometry::{BinaryMask, BoundingBox};

use embeddings::TextEmbeddingMatrix;
use layers::{DecoderLayer, FeedForward, LayerNorm, Linear, Mlp3, MultiHeadAttention};
use params::{Forward, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image size {0}x{1} not divisible by 32")]
    BadImageSize(usize, usize),
    #[error("top-k {k} exceeds object query count {n}")]
    TopKTooLarge { k: usize, n: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("text embedding width {got} does not match configured D={expected}")]
    TextDimMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Channel width C shared by feature maps and queries.
    pub channels: usize,
    /// Object query count N.
    pub object_queries: usize,
    /// Universal parsing query count L.
    pub parsing_queries: usize,
    /// Cascaded attention blocks M in the querying transformer.
    pub qformer_blocks: usize,
    /// Object queries forwarded to the querying transformer (K_top).
    pub top_k: usize,
    /// Text embedding width D.
    pub text_dim: usize,
    /// Decoder layers per level.
    pub decoder_depth: usize,
    /// Attention heads.
    pub heads: usize,
    /// Enable bidirectional text-feature fusion before the mixer.
    pub early_fusion: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale defaults: 300 object queries, 10 parsing queries, 6
    /// querying-transformer blocks, top-50 routing.
    pub fn full() -> Self {
        Self {
            channels: 256,
            object_queries: 300,
            parsing_queries: 10,
            qformer_blocks: 6,
            top_k: 50,
            text_dim: 512,
            decoder_depth: 9,
            heads: 8,
            early_fusion: true,
            seed: 0,
        }
    }

    /// Desk-scale defaults used by the synthetic corpus runs.
    pub fn toy() -> Self {
        Self {
            channels: 64,
            object_queries: 20,
            parsing_queries: 5,
            qformer_blocks: 2,
            top_k: 8,
            text_dim: 64,
            decoder_depth: 3,
            heads: 4,
            early_fusion: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.channels == 0 || self.text_dim == 0 {
            return bad("zero width".into());
        }
        if self.parsing_queries == 0 || self.qformer_blocks == 0 {
            return bad("parsing queries and blocks must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.object_queries {
            return bad(format!(
                "need N >= K_top >= 1, got N={} K_top={}",
                self.object_queries, self.top_k
            ));
        }
        if self.channels % self.heads != 0 {
            return bad(format!(
                "channels {} must divide heads {}",
                self.channels, self.heads
            ));
        }
        if self.channels % 2 != 0 {
            return bad("channels must be even".into());
        }
        if self.decoder_depth == 0 {
            return bad("decoder depth must be >= 1".into());
        }
        Ok(())
    }
}

/// Category vocabularies per hierarchy level.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub object: TextEmbeddingMatrix,
    pub part: TextEmbeddingMatrix,
    /// For each part category, the index of its parent object category.
    pub part_parent: Vec<usize>,
}

impl Vocabulary {
    /// All rows, object categories first; the fusion module sees both levels.
    pub fn combined_rows(&self) -> Array2<f32> {
        let k = self.object.len() + self.part.len();
        let d = self.object.dim();
        let mut out = Array2::zeros((k, d));
        out.slice_mut(s![..self.object.len(), ..])
            .assign(&self.object.rows);
        out.slice_mut(s![self.object.len().., ..])
            .assign(&self.part.rows);
        out
    }
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn init(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.conv_kernel(format!("{name}.w"), co, ci, k, rng),
            b: store.zeros(format!("{name}.b"), &[co]),
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, f: &mut Forward, x: Value) -> Value {
        let w = f.p(self.w);
        let b = f.p(self.b);
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

struct Backbone {
    stem: ConvLayer,
    s2a: ConvLayer,
    s2b: ConvLayer,
    s3a: ConvLayer,
    s3b: ConvLayer,
    s4: ConvLayer,
    s5: ConvLayer,
}

struct Fusion {
    text_in: Linear,
    text_attends: MultiHeadAttention,
    feat_attends: MultiHeadAttention,
}

struct Mixer {
    lateral: [ConvLayer; 4],
    pixel_out: ConvLayer,
}

struct QFormerBlock {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

impl QFormerBlock {
    fn init(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::init(store, &format!("{name}.self_attn"), dim, heads, rng),
            cross_attn: MultiHeadAttention::init(store, &format!("{name}.cross_attn"), dim, heads, rng),
            ffn: FeedForward::init(store, &format!("{name}.ffn"), dim, dim * 2, rng),
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), dim),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), dim),
            norm3: LayerNorm::init(store, &format!("{name}.norm3"), dim),
        }
    }

    /// One block over `x: [L, C]` against a single object query `[1, C]`.
    fn forward(&self, f: &mut Forward, x: Value, object_query: Value) -> Value {
        let n1 = self.norm1.forward(f, x);
        let sa = self.self_attn.forward(f, n1, n1, n1);
        let x = f.tape.add(x, sa);
        let n2 = self.norm2.forward(f, x);
        let ca = self.cross_attn.forward(f, n2, object_query, object_query);
        let x = f.tape.add(x, ca);
        let n3 = self.norm3.forward(f, x);
        let ff = self.ffn.forward(f, n3);
        f.tape.add(x, ff)
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    fusion: Fusion,
    mixer: Mixer,
    enc_score: Linear,
    enc_delta: Linear,
    query_proj: Linear,
    slot_embed: ParamId,
    scale_embed: ParamId,
    obj_decoder: Vec<DecoderLayer>,
    obj_norm: LayerNorm,
    parse_queries: ParamId,
    qformer: Vec<QFormerBlock>,
    qformer_norm: LayerNorm,
    part_decoder: Vec<DecoderLayer>,
    part_norm: LayerNorm,
    w_proj: ParamId,
    box_head_obj: Mlp3,
    box_head_part: Mlp3,
    mask_head_obj: Mlp3,
    mask_head_part: Mlp3,
}

/// Everything produced by the image encoder that later stages consume.
pub struct EncodedImage {
    /// Fused feature maps at strides 4, 8, 16, 32, each `[C, H/2^s, W/2^s]`.
    pub features: [Value; 4],
    /// Flattened mixer features at strides 8, 16, 32: `[S, C]`.
    pub memory: Value,
    /// Positional term for memory rows: `[S, C]`.
    pub mem_pos: Value,
    /// Pixel embedding map `[C, H/4, W/4]`.
    pub pixel_embedding: Value,
    /// Per-location anchor boxes in logit space, `[S, 4]` constant.
    pub anchor_logits: Value,
    /// Stride-4 grid size.
    pub hw4: (usize, usize),
    /// Input image size.
    pub image_size: (usize, usize),
}

/// Object-level decoding products, still on the tape.
pub struct ObjectDecoding {
    /// Final object queries `[N, C]`.
    pub queries: Value,
    /// Raw similarity logits `[N, K_obj]`.
    pub scores: Value,
    /// Normalized cxcywh boxes `[N, 4]`.
    pub boxes: Value,
    /// Mask logits `[N, H4*W4]`.
    pub mask_logits: Value,
}

/// Part-level decoding products.
pub struct PartDecoding {
    pub queries: Value,
    pub scores: Value,
    pub boxes: Value,
    pub mask_logits: Value,
    /// Generating object slot per part row (length K_top * L).
    pub slot_of_row: Vec<usize>,
}

/// Full forward outputs for one image.
pub struct ModelOutputs {
    pub object: ObjectDecoding,
    pub part: PartDecoding,
    pub hw4: (usize, usize),
    pub image_size: (usize, usize),
    /// Slots selected for parsing, in score order.
    pub selected_slots: Vec<usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let r = &mut rng;

        let backbone = Backbone {
            stem: ConvLayer::init(&mut store, "backbone.stem", 3, c / 2, 3, 2, r),
            s2a: ConvLayer::init(&mut store, "backbone.s2a", c / 2, c, 3, 2, r),
            s2b: ConvLayer::init(&mut store, "backbone.s2b", c, c, 3, 1, r),
            s3a: ConvLayer::init(&mut store, "backbone.s3a", c, c, 3, 2, r),
            s3b: ConvLayer::init(&mut store, "backbone.s3b", c, c, 3, 1, r),
            s4: ConvLayer::init(&mut store, "backbone.s4", c, c, 3, 2, r),
            s5: ConvLayer::init(&mut store, "backbone.s5", c, c, 3, 2, r),
        };
        let fusion = Fusion {
            text_in: Linear::init(&mut store, "fusion.text_in", cfg.text_dim, c, r),
            text_attends: MultiHeadAttention::init_zero_out(&mut store, "fusion.text_attends", c, 1, r),
            feat_attends: MultiHeadAttention::init_zero_out(&mut store, "fusion.feat_attends", c, 1, r),
        };
        let mixer = Mixer {
            lateral: [
                ConvLayer::init(&mut store, "mixer.lat2", c, c, 1, 1, r),
                ConvLayer::init(&mut store, "mixer.lat3", c, c, 1, 1, r),
                ConvLayer::init(&mut store, "mixer.lat4", c, c, 1, 1, r),
                ConvLayer::init(&mut store, "mixer.lat5", c, c, 1, 1, r),
            ],
            pixel_out: ConvLayer::init(&mut store, "mixer.pixel_out", c, c, 1, 1, r),
        };
        let enc_score = Linear::init(&mut store, "enc.score", c, 1, r);
        let enc_delta = Linear::init_zero(&mut store, "enc.delta", c, 4);
        let query_proj = Linear::init(&mut store, "enc.query_proj", c, c, r);
        let slot_embed = store.normal("obj.slot_embed", &[cfg.object_queries, c], 0.02, r);
        let scale_embed = store.normal("enc.scale_embed", &[3, c], 0.02, r);
        let obj_decoder = (0..cfg.decoder_depth)
            .map(|i| DecoderLayer::init(&mut store, &format!("obj.layer{i}"), c, cfg.heads, r))
            .collect();
        let obj_norm = LayerNorm::init(&mut store, "obj.final_norm", c);
        let parse_queries = store.normal("qformer.parse_queries", &[cfg.parsing_queries, c], 0.02, r);
        let qformer = (0..cfg.qformer_blocks)
            .map(|i| QFormerBlock::init(&mut store, &format!("qformer.block{i}"), c, cfg.heads, r))
            .collect();
        let qformer_norm = LayerNorm::init(&mut store, "qformer.final_norm", c);
        let part_decoder = (0..cfg.decoder_depth)
            .map(|i| DecoderLayer::init(&mut store, &format!("part.layer{i}"), c, cfg.heads, r))
            .collect();
        let part_norm = LayerNorm::init(&mut store, "part.final_norm", c);
        let w_proj = store.xavier("heads.w_proj", c, cfg.text_dim, r);
        let box_head_obj = Mlp3::init_zero_final(&mut store, "heads.box_obj", c, c, 4, r);
        let box_head_part = Mlp3::init_zero_final(&mut store, "heads.box_part", c, c, 4, r);
        let mask_head_obj = Mlp3::init(&mut store, "heads.mask_obj", c, c, c, r);
        let mask_head_part = Mlp3::init(&mut store, "heads.mask_part", c, c, c, r);

        Ok(Self {
            cfg,
            store,
            backbone,
            fusion,
            mixer,
            enc_score,
            enc_delta,
            query_proj,
            slot_embed,
            scale_embed,
            obj_decoder,
            obj_norm,
            parse_queries,
            qformer,
            qformer_norm,
            part_decoder,
            part_norm,
            w_proj,
            box_head_obj,
            box_head_part,
            mask_head_obj,
            mask_head_part,
        })
    }

    pub fn forward_pass(&self) -> Forward<'_> {
        Forward::new(&self.store)
    }

    /// Backbone stages, optional early fusion, mixer, pixel embedding map,
    /// and flattened memory with positional terms.
    pub fn encode_image(
        &self,
        f: &mut Forward,
        image: &Array3<f32>,
        vocab: &Vocabulary,
    ) -> Result<EncodedImage, ModelError> {
        let (_, h, w) = image.dim();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::BadImageSize(h, w));
        }
        if vocab.object.dim() != self.cfg.text_dim {
            return Err(ModelError::TextDimMismatch {
                got: vocab.object.dim(),
                expected: self.cfg.text_dim,
            });
        }
        let x = f.tape.constant(image.clone().into_dyn());
        let x = self.backbone.stem.forward(f, x);
        let x = f.tape.relu(x);
        let x = self.backbone.s2a.forward(f, x);
        let x = f.tape.relu(x);
        let x = self.backbone.s2b.forward(f, x);
        let f2 = f.tape.relu(x);
        let x = self.backbone.s3a.forward(f, f2);
        let x = f.tape.relu(x);
        let x = self.backbone.s3b.forward(f, x);
        let f3 = f.tape.relu(x);
        let x = self.backbone.s4.forward(f, f3);
        let f4 = f.tape.relu(x);
        let x = self.backbone.s5.forward(f, f4);
        let f5 = f.tape.relu(x);

        let mut features = [f2, f3, f4, f5];
        if self.cfg.early_fusion {
            let combined = vocab.combined_rows();
            features = self.early_fuse(f, &features, &combined);
        }

        // top-down mixing to the pixel embedding map
        let l2 = self.mixer.lateral[0].forward(f, features[0]);
        let l3 = self.mixer.lateral[1].forward(f, features[1]);
        let l4 = self.mixer.lateral[2].forward(f, features[2]);
        let l5 = self.mixer.lateral[3].forward(f, features[3]);
        let p5 = l5;
        let up5 = f.tape.upsample2x(p5);
        let p4 = f.tape.add(l4, up5);
        let up4 = f.tape.upsample2x(p4);
        let p3 = f.tape.add(l3, up4);
        let up3 = f.tape.upsample2x(p3);
        let p2 = f.tape.add(l2, up3);
        let pixel_embedding = self.mixer.pixel_out.forward(f, p2);

        // memory = flattened mixer features at strides 8, 16, 32
        let c = self.cfg.channels;
        let mut mem_parts = Vec::new();
        let mut pos_rows = Vec::new();
        let mut anchor_rows = Vec::new();
        let mut scale_idx = Vec::new();
        for (level, &p) in [p3, p4, p5].iter().enumerate() {
            let shape = f.tape.value(p).shape().to_vec();
            let (hh, ww) = (shape[1], shape[2]);
            let flat = f.tape.reshape(p, &[c, hh * ww]);
            mem_parts.push(f.tape.transpose2(flat));
            let stride = 8usize << level;
            pos_rows.push(sinusoidal_pe(hh, ww, c));
            anchor_rows.push(anchor_grid(hh, ww, stride, h, w));
            scale_idx.extend(std::iter::repeat(level).take(hh * ww));
        }
        let memory = f.tape.concat2(0, &mem_parts);
        let pe = concat_rows_owned(&pos_rows);
        let pe_const = f.tape.constant2(pe);
        let scale_embed = f.p(self.scale_embed);
        let scale_term = f.tape.gather_rows(scale_embed, &scale_idx);
        let mem_pos = f.tape.add(pe_const, scale_term);
        let anchors = concat_rows_owned(&anchor_rows);
        let anchor_logits = f.tape.constant2(anchors.mapv(inverse_sigmoid));

        let (h4, w4) = (h / 4, w / 4);
        Ok(EncodedImage {
            features,
            memory,
            mem_pos,
            pixel_embedding,
            anchor_logits,
            hw4: (h4, w4),
            image_size: (h, w),
        })
    }

    /// Residual bidirectional cross-attention between flattened features and
    /// text rows. Output shapes equal input shapes; with the fusion output
    /// projections zero-initialized this is the identity.
    pub fn early_fuse(
        &self,
        f: &mut Forward,
        features: &[Value; 4],
        text_rows: &Array2<f32>,
    ) -> [Value; 4] {
        if text_rows.nrows() == 0 {
            return *features;
        }
        let c = self.cfg.channels;
        let mut flats = Vec::with_capacity(4);
        let mut dims = Vec::with_capacity(4);
        for &feat in features {
            let shape = f.tape.value(feat).shape().to_vec();
            dims.push((shape[1], shape[2]));
            let flat = f.tape.reshape(feat, &[c, shape[1] * shape[2]]);
            flats.push(f.tape.transpose2(flat));
        }
        let x = f.tape.concat2(0, &flats);
        let t_raw = f.tape.constant2(text_rows.clone());
        let t = self.fusion.text_in.forward(f, t_raw);
        // text gathers image context, then features attend to the updated text
        let t_delta = self.fusion.text_attends.forward(f, t, x, x);
        let t = f.tape.add(t, t_delta);
        let x_delta = self.fusion.feat_attends.forward(f, x, t, t);
        let x = f.tape.add(x, x_delta);

        let mut out = Vec::with_capacity(4);
        let mut offset = 0;
        for &(hh, ww) in &dims {
            let rows = f.tape.narrow2(x, 0, offset, hh * ww);
            let back = f.tape.transpose2(rows);
            out.push(f.tape.reshape(back, &[c, hh, ww]));
            offset += hh * ww;
        }
        [out[0], out[1], out[2], out[3]]
    }

    /// Two-stage object decoding: encoder locations are scored, the top-N
    /// initialize queries and reference boxes, then the object decoder and
    /// the three heads run.
    pub fn decode_objects(&self, f: &mut Forward, enc: &EncodedImage, vocab: &Vocabulary) -> ObjectDecoding {
        let n = self.cfg.object_queries;
        let scored_in = f.tape.add(enc.memory, enc.mem_pos);
        let loc_scores = self.enc_score.forward(f, scored_in);
        let loc_delta = self.enc_delta.forward(f, scored_in);
        let proposal_logits = f.tape.add(loc_delta, enc.anchor_logits);

        // top-N locations by score, ties toward the lower index
        let score_arr = f.tape.value(loc_scores);
        let mut order: Vec<usize> = (0..score_arr.shape()[0]).collect();
        order.sort_by(|&a, &b| {
            score_arr[[b, 0]]
                .partial_cmp(&score_arr[[a, 0]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let selected: Vec<usize> = order.into_iter().take(n).collect();

        let ref_logits = f.tape.gather_rows(proposal_logits, &selected);
        let content = f.tape.gather_rows(enc.memory, &selected);
        let queries0 = self.query_proj.forward(f, content);
        let q_pos = f.p(self.slot_embed);

        let mut q = queries0;
        for layer in &self.obj_decoder {
            q = layer.forward(f, q, Some(q_pos), enc.memory, Some(enc.mem_pos));
        }
        let queries = self.obj_norm.forward(f, q);

        let scores = self.similarity_scores(f, queries, &vocab.object);
        let box_delta = self.box_head_obj.forward(f, queries);
        let box_logits = f.tape.add(box_delta, ref_logits);
        let boxes = f.tape.sigmoid(box_logits);
        let mask_logits = self.predict_masks_with(f, &self.mask_head_obj, queries, enc);
        ObjectDecoding {
            queries,
            scores,
            boxes,
            mask_logits,
        }
    }

    /// One refinement pass of the object decoder over externally built
    /// queries; used when ground-truth objects are injected at inference.
    pub fn refine_object_queries(
        &self,
        f: &mut Forward,
        enc: &EncodedImage,
        raw_queries: Value,
    ) -> Value {
        let g = f.tape.value(raw_queries).shape()[0];
        let q0 = self.query_proj.forward(f, raw_queries);
        let slot_idx: Vec<usize> = (0..g).map(|i| i % self.cfg.object_queries).collect();
        let slot_embed = f.p(self.slot_embed);
        let q_pos = f.tape.gather_rows(slot_embed, &slot_idx);
        let mut q = q0;
        for layer in &self.obj_decoder {
            q = layer.forward(f, q, Some(q_pos), enc.memory, Some(enc.mem_pos));
        }
        self.obj_norm.forward(f, q)
    }

    /// Eq-4-style similarity classification: `(q W_proj) T^T`, raw logits.
    pub fn similarity_scores(&self, f: &mut Forward, queries: Value, text: &TextEmbeddingMatrix) -> Value {
        assert_eq!(text.dim(), self.cfg.text_dim, "text embedding width");
        let w = f.p(self.w_proj);
        let projected = f.tape.matmul(queries, w);
        let t = f.tape.constant2(text.rows.clone());
        let tt = f.tape.transpose2(t);
        f.tape.matmul(projected, tt)
    }

    /// Per-pixel dot product of the mask head embedding with the pixel
    /// embedding map: `[rows, H4*W4]` logits.
    fn predict_masks_with(&self, f: &mut Forward, head: &Mlp3, queries: Value, enc: &EncodedImage) -> Value {
        let emb = head.forward(f, queries);
        let c = self.cfg.channels;
        let (h4, w4) = enc.hw4;
        let flat = f.tape.reshape(enc.pixel_embedding, &[c, h4 * w4]);
        f.tape.matmul(emb, flat)
    }

    /// Object-level mask head exposed for direct use.
    pub fn predict_object_masks(&self, f: &mut Forward, queries: Value, enc: &EncodedImage) -> Value {
        self.predict_masks_with(f, &self.mask_head_obj, queries, enc)
    }

    /// Runs the querying transformer: for every selected object query
    /// independently, the L parsing queries pass M blocks of self-attention,
    /// cross-attention with that one object query, and a feed-forward, then
    /// the per-object blocks are concatenated in selection order.
    pub fn qformer_parse(&self, f: &mut Forward, selected_queries: Value) -> Value {
        let k = f.tape.value(selected_queries).shape()[0];
        let parse = f.p(self.parse_queries);
        let mut blocks = Vec::with_capacity(k);
        for i in 0..k {
            let obj = f.tape.narrow2(selected_queries, 0, i, 1);
            let mut x = parse;
            for block in &self.qformer {
                x = block.forward(f, x, obj);
            }
            blocks.push(self.qformer_norm.forward(f, x));
        }
        f.tape.concat2(0, &blocks)
    }

    /// Part decoding for a set of parsed queries whose generating objects
    /// sit at `slots`, with per-row reference boxes in logit space.
    pub fn decode_parts(
        &self,
        f: &mut Forward,
        enc: &EncodedImage,
        part_queries: Value,
        ref_logits: Value,
        slot_of_row: Vec<usize>,
        vocab: &Vocabulary,
    ) -> PartDecoding {
        let mut q = part_queries;
        for layer in &self.part_decoder {
            q = layer.forward(f, q, None, enc.memory, Some(enc.mem_pos));
        }
        let queries = self.part_norm.forward(f, q);
        let scores = self.similarity_scores(f, queries, &vocab.part);
        let box_delta = self.box_head_part.forward(f, queries);
        let box_logits = f.tape.add(box_delta, ref_logits);
        let boxes = f.tape.sigmoid(box_logits);
        let mask_logits = self.predict_masks_with(f, &self.mask_head_part, queries, enc);
        PartDecoding {
            queries,
            scores,
            boxes,
            mask_logits,
            slot_of_row,
        }
    }

    /// Complete forward pass for one image.
    pub fn forward(
        &self,
        f: &mut Forward,
        image: &Array3<f32>,
        vocab: &Vocabulary,
    ) -> Result<ModelOutputs, ModelError> {
        let enc = self.encode_image(f, image, vocab)?;
        let object = self.decode_objects(f, &enc, vocab);

        let selected = select_topk_rows(&as_array2(f.tape.value(object.scores)), self.cfg.top_k)
            .expect("top_k validated against N");
        let q_sel = f.tape.gather_rows(object.queries, &selected);
        let part_queries = self.qformer_parse(f, q_sel);

        // parent predicted boxes, detached, as part reference boxes
        let l = self.cfg.parsing_queries;
        let obj_boxes = as_array2(f.tape.value(object.boxes));
        let mut ref_rows = Array2::<f32>::zeros((selected.len() * l, 4));
        let mut slot_of_row = Vec::with_capacity(selected.len() * l);
        for (i, &slot) in selected.iter().enumerate() {
            for j in 0..l {
                for c in 0..4 {
                    ref_rows[(i * l + j, c)] = inverse_sigmoid(obj_boxes[(slot, c)]);
                }
                slot_of_row.push(slot);
            }
        }
        let ref_logits = f.tape.constant2(ref_rows);
        let part = self.decode_parts(f, &enc, part_queries, ref_logits, slot_of_row, vocab);

        Ok(ModelOutputs {
            object,
            part,
            hw4: enc.hw4,
            image_size: enc.image_size,
            selected_slots: selected,
        })
    }
}

/// Rows with the highest max-over-categories score; ties break toward the
/// lower row index. Returns the selected row indices in score order.
pub fn select_topk_rows(scores: &Array2<f32>, k: usize) -> Result<Vec<usize>, ModelError> {
    let n = scores.nrows();
    if k > n {
        return Err(ModelError::TopKTooLarge { k, n });
    }
    let mut keyed: Vec<(usize, f32)> = scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (i, row.iter().copied().fold(f32::NEG_INFINITY, f32::max)))
        .collect();
    keyed.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(keyed.into_iter().take(k).map(|(i, _)| i).collect())
}

/// One extracted detection in image pixel coordinates.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Index into the level's vocabulary.
    pub category_index: usize,
    pub score: f32,
    pub box_xyxy: BoundingBox,
    pub mask: Option<BinaryMask>,
    /// Generating object slot (object rows: their own slot).
    pub slot: usize,
}

/// Plain-data predictions for one image, split by hierarchy level.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub objects: Vec<Detection>,
    pub parts: Vec<Detection>,
}

pub struct ExtractOptions {
    pub min_score: f32,
    pub max_per_level: usize,
    pub with_masks: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            min_score: 0.01,
            max_per_level: 100,
            with_masks: true,
        }
    }
}

/// Reads model outputs off the tape into pixel-space detections: one
/// candidate per (row, category) cell with a sigmoid confidence, kept above
/// `min_score` and capped per level by confidence.
pub fn extract_predictions(
    f: &Forward,
    outputs: &ModelOutputs,
    opts: &ExtractOptions,
) -> PredictionSet {
    let (h, w) = outputs.image_size;
    let object = extract_level(
        f,
        outputs.object.scores,
        outputs.object.boxes,
        outputs.object.mask_logits,
        None,
        outputs.hw4,
        (h, w),
        opts,
    );
    let part = extract_level(
        f,
        outputs.part.scores,
        outputs.part.boxes,
        outputs.part.mask_logits,
        Some(&outputs.part.slot_of_row),
        outputs.hw4,
        (h, w),
        opts,
    );
    PredictionSet {
        objects: object,
        parts: part,
    }
}

#[allow(clippy::too_many_arguments)]
fn extract_level(
    f: &Forward,
    scores: Value,
    boxes: Value,
    mask_logits: Value,
    slots: Option<&[usize]>,
    hw4: (usize, usize),
    image_size: (usize, usize),
    opts: &ExtractOptions,
) -> Vec<Detection> {
    let scores = as_array2(f.tape.value(scores));
    let boxes = as_array2(f.tape.value(boxes));
    let logits = as_array2(f.tape.value(mask_logits));
    let (h, w) = image_size;
    let (h4, w4) = hw4;

    let mut detections = Vec::new();
    for row in 0..scores.nrows() {
        for cat in 0..scores.ncols() {
            let score = sigmoid_f32(scores[(row, cat)]);
            if score < opts.min_score {
                continue;
            }
            detections.push((row, cat, score));
        }
    }
    detections.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    detections.truncate(opts.max_per_level);

    detections
        .into_iter()
        .map(|(row, cat, score)| {
            let (cx, cy, bw, bh) = (
                boxes[(row, 0)] as f64,
                boxes[(row, 1)] as f64,
                boxes[(row, 2)] as f64,
                boxes[(row, 3)] as f64,
            );
            let box_xyxy = BoundingBox::from_corners(
                (cx - bw / 2.0) * w as f64,
                (cy - bh / 2.0) * h as f64,
                (cx + bw / 2.0) * w as f64,
                (cy + bh / 2.0) * h as f64,
            )
            .clamp_to(w as f64, h as f64);
            let mask = opts.with_masks.then(|| {
                BinaryMask::from_fn(h, w, |y, x| {
                    let (yy, xx) = ((y / 4).min(h4 - 1), (x / 4).min(w4 - 1));
                    logits[(row, yy * w4 + xx)] > 0.0
                })
            });
            Detection {
                category_index: cat,
                score,
                box_xyxy,
                mask,
                slot: slots.map_or(row, |s| s[row]),
            }
        })
        .collect()
}

pub(crate) fn as_array2(a: &ArrayD<f32>) -> Array2<f32> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d value")
        .to_owned()
}

fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(x: f32) -> f32 {
    let x = x.clamp(1e-4, 1.0 - 1e-4);
    (x / (1.0 - x)).ln()
}

/// Standard 2-d sinusoidal positional encoding over a grid, `[h*w, c]`.
fn sinusoidal_pe(h: usize, w: usize, c: usize) -> Array2<f32> {
    let half = c / 2;
    let mut pe = Array2::<f32>::zeros((h * w, c));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            let cy = (y as f32 + 0.5) / h as f32 * std::f32::consts::TAU;
            let cx = (x as f32 + 0.5) / w as f32 * std::f32::consts::TAU;
            for k in 0..half / 2 {
                let omega = 1.0 / 10000f32.powf(2.0 * k as f32 / half as f32);
                pe[(row, 2 * k)] = (cx * omega).sin();
                pe[(row, 2 * k + 1)] = (cx * omega).cos();
                pe[(row, half + 2 * k)] = (cy * omega).sin();
                pe[(row, half + 2 * k + 1)] = (cy * omega).cos();
            }
        }
    }
    pe
}

/// Anchor boxes per grid location, normalized cxcywh.
fn anchor_grid(h: usize, w: usize, stride: usize, img_h: usize, img_w: usize) -> Array2<f32> {
    let mut anchors = Array2::<f32>::zeros((h * w, 4));
    let base_w = ((4 * stride) as f32 / img_w as f32).clamp(0.05, 0.85);
    let base_h = ((4 * stride) as f32 / img_h as f32).clamp(0.05, 0.85);
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            anchors[(row, 0)] = (x as f32 + 0.5) / w as f32;
            anchors[(row, 1)] = (y as f32 + 0.5) / h as f32;
            anchors[(row, 2)] = base_w;
            anchors[(row, 3)] = base_h;
        }
    }
    anchors
}

fn concat_rows_owned(parts: &[Array2<f32>]) -> Array2<f32> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("row concat")
}

/// Image tensor from interleaved RGB bytes, scaled to [0, 1].
pub fn image_to_tensor(rgb: &[u8], h: usize, w: usize) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(c, y, x)] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    out
}

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embeddings::embed_categories;

#[cfg(test)]
mod tests;
