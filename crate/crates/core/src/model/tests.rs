use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use super::embeddings::embed_categories;
use super::*;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        channels: 16,
        object_queries: 6,
        parsing_queries: 3,
        qformer_blocks: 2,
        top_k: 4,
        text_dim: 16,
        decoder_depth: 2,
        heads: 2,
        early_fusion: true,
        seed: 11,
    }
}

fn tiny_vocab(d: usize) -> Vocabulary {
    let object = embed_categories(
        &["thing-a".into(), "thing-b".into()],
        d,
        5,
        None,
    )
    .unwrap();
    let part = embed_categories(
        &["thing-a:top".into(), "thing-a:base".into(), "thing-b:lid".into()],
        d,
        5,
        None,
    )
    .unwrap();
    Vocabulary {
        object,
        part,
        part_parent: vec![0, 0, 1],
    }
}

fn rand_image(h: usize, w: usize, seed: u64) -> Array3<f32> {
    let mut state = seed;
    Array3::from_shape_fn((3, h, w), |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as f32 / u32::MAX as f32).fract()
    })
}

#[test]
fn encode_shapes_at_64() {
    let model = Model::new(tiny_cfg()).unwrap();
    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let enc = model
        .encode_image(&mut f, &rand_image(64, 64, 3), &vocab)
        .unwrap();
    let sizes: Vec<Vec<usize>> = enc
        .features
        .iter()
        .map(|&v| f.tape.value(v).shape().to_vec())
        .collect();
    assert_eq!(sizes[0], vec![16, 16, 16]);
    assert_eq!(sizes[1], vec![16, 8, 8]);
    assert_eq!(sizes[2], vec![16, 4, 4]);
    assert_eq!(sizes[3], vec![16, 2, 2]);
    assert_eq!(f.tape.value(enc.pixel_embedding).shape(), &[16, 16, 16]);
    // memory = strides 8, 16, 32 flattened: 64 + 16 + 4 rows
    assert_eq!(f.tape.value(enc.memory).shape(), &[84, 16]);

    let err = model.encode_image(&mut f, &rand_image(60, 64, 3), &vocab);
    assert!(matches!(err, Err(ModelError::BadImageSize(60, 64))));
}

#[test]
fn forward_is_deterministic() {
    let model = Model::new(tiny_cfg()).unwrap();
    let vocab = tiny_vocab(16);
    let image = rand_image(32, 32, 9);
    let run = || {
        let mut f = model.forward_pass();
        let out = model.forward(&mut f, &image, &vocab).unwrap();
        (
            as_array2(f.tape.value(out.object.scores)),
            as_array2(f.tape.value(out.object.boxes)),
            as_array2(f.tape.value(out.part.scores)),
        )
    };
    let (s1, b1, p1) = run();
    let (s2, b2, p2) = run();
    assert_eq!(s1, s2);
    assert_eq!(b1, b2);
    assert_eq!(p1, p2);
}

#[test]
fn zeroed_final_layer_makes_pixel_embedding_constant() {
    let mut model = Model::new(tiny_cfg()).unwrap();
    let w_id = model.store.id_by_name("mixer.pixel_out.w").unwrap();
    let b_id = model.store.id_by_name("mixer.pixel_out.b").unwrap();
    let shape = model.store.get(w_id).shape().to_vec();
    model.store.set(w_id, ArrayD::zeros(IxDyn(&shape)));
    let bias: Vec<f32> = (0..16).map(|i| 0.1 * i as f32 - 0.5).collect();
    model
        .store
        .set(b_id, ArrayD::from_shape_vec(IxDyn(&[16]), bias.clone()).unwrap());

    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let zero_image = Array3::<f32>::zeros((3, 32, 32));
    let enc = model.encode_image(&mut f, &zero_image, &vocab).unwrap();
    let mp = f.tape.value(enc.pixel_embedding);
    for c in 0..16 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(mp[[c, y, x]], bias[c]);
            }
        }
    }
}

#[test]
fn early_fuse_is_identity_at_init_and_with_no_categories() {
    let model = Model::new(tiny_cfg()).unwrap();
    let mut f = model.forward_pass();
    let feats = [
        f.tape.constant(rand_image(8, 8, 1).into_dyn()),
        f.tape.constant(rand_image(4, 4, 2).into_dyn()),
        f.tape.constant(rand_image(2, 2, 3).into_dyn()),
        f.tape.constant(rand_image(2, 2, 4).into_dyn()),
    ];
    // 3-channel maps stand in for C-channel ones; reshape logic is identical
    let model3 = {
        let mut cfg = tiny_cfg();
        cfg.channels = 3;
        cfg.heads = 1;
        cfg.top_k = 1;
        cfg.object_queries = 1;
        // channels must be even for the backbone; bypass via direct struct use
        cfg
    };
    let _ = model3;
    // fusion projections are zero-initialized, so output == input exactly
    let c16 = [
        random_feature(&mut f, 16, 4, 4, 21),
        random_feature(&mut f, 16, 2, 2, 22),
        random_feature(&mut f, 16, 1, 1, 23),
        random_feature(&mut f, 16, 1, 1, 24),
    ];
    let vocab = tiny_vocab(16);
    let fused = model.early_fuse(&mut f, &c16, &vocab.combined_rows());
    for (&a, &b) in c16.iter().zip(&fused) {
        assert_eq!(f.tape.value(a), f.tape.value(b));
    }
    // zero category rows: identity by construction
    let empty = Array2::<f32>::zeros((0, 16));
    let fused2 = model.early_fuse(&mut f, &c16, &empty);
    for (&a, &b) in c16.iter().zip(&fused2) {
        assert_eq!(f.tape.value(a), f.tape.value(b));
    }
    drop(feats);
}

fn random_feature(f: &mut Forward, c: usize, h: usize, w: usize, seed: u64) -> Value {
    let mut state = seed;
    let arr = Array3::from_shape_fn((c, h, w), |_| {
        state = state.wrapping_mul(2862933555777941757).wrapping_add(13);
        ((state >> 34) as f32 / (1u64 << 30) as f32) - 0.5
    });
    f.tape.constant(arr.into_dyn())
}

#[test]
fn early_fuse_matches_hand_attention_oracle() {
    // randomize the zero-initialized output projections so fusion is active
    let mut model = Model::new(tiny_cfg()).unwrap();
    let c = 16usize;
    for name in ["fusion.text_attends.wo_zero.w", "fusion.feat_attends.wo_zero.w"] {
        let id = model.store.id_by_name(name).unwrap();
        let mut state = 77u64;
        let arr = ArrayD::from_shape_fn(IxDyn(&[c, c]), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(3);
            ((state >> 34) as f32 / (1u64 << 30) as f32) - 0.5
        });
        model.store.set(id, arr);
    }

    let mut f = model.forward_pass();
    // 2x2 grid on the first scale, 1x1 elsewhere; 2 categories
    let feats = [
        random_feature(&mut f, c, 2, 2, 41),
        random_feature(&mut f, c, 1, 1, 42),
        random_feature(&mut f, c, 1, 1, 43),
        random_feature(&mut f, c, 1, 1, 44),
    ];
    let mut state = 99u64;
    let text = Array2::from_shape_fn((2, c), |_| {
        state = state.wrapping_mul(2862933555777941757).wrapping_add(5);
        ((state >> 34) as f32 / (1u64 << 30) as f32) - 0.5
    });
    let fused = model.early_fuse(&mut f, &feats, &text);

    // hand-rolled single-head attention oracle
    let get = |name: &str| -> Array2<f32> {
        let id = model.store.id_by_name(name).unwrap();
        as_array2(model.store.get(id))
    };
    let getv = |name: &str| -> Vec<f32> {
        let id = model.store.id_by_name(name).unwrap();
        model.store.get(id).iter().copied().collect()
    };
    let linear = |x: &Array2<f32>, w: &Array2<f32>, b: &[f32]| -> Array2<f32> {
        let mut y = x.dot(w);
        for mut row in y.rows_mut() {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    };
    let attends = |prefix: &str, q_in: &Array2<f32>, kv_in: &Array2<f32>| -> Array2<f32> {
        let q = linear(q_in, &get(&format!("{prefix}.wq.w")), &getv(&format!("{prefix}.wq.b")));
        let k = linear(kv_in, &get(&format!("{prefix}.wk.w")), &getv(&format!("{prefix}.wk.b")));
        let v = linear(kv_in, &get(&format!("{prefix}.wv.w")), &getv(&format!("{prefix}.wv.b")));
        let scale = 1.0 / (c as f32).sqrt();
        let mut att = q.dot(&k.t());
        att.mapv_inplace(|x| x * scale);
        for mut row in att.rows_mut() {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                denom += *x;
            }
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        let merged = att.dot(&v);
        linear(
            &merged,
            &get(&format!("{prefix}.wo_zero.w")),
            &getv(&format!("{prefix}.wo_zero.b")),
        )
    };

    // flatten features in scale order, rows = pixels
    let mut x_rows = Vec::new();
    for &feat in &feats {
        let v = f.tape.value(feat);
        let shape = v.shape().to_vec();
        for y in 0..shape[1] {
            for xx in 0..shape[2] {
                let mut row = Vec::with_capacity(c);
                for ch in 0..c {
                    row.push(v[[ch, y, xx]]);
                }
                x_rows.push(row);
            }
        }
    }
    let x = Array2::from_shape_vec(
        (x_rows.len(), c),
        x_rows.into_iter().flatten().collect(),
    )
    .unwrap();

    let t_in = linear(&text, &get("fusion.text_in.w"), &getv("fusion.text_in.b"));
    let t_fused = &t_in + &attends("fusion.text_attends", &t_in, &x);
    let x_fused = &x + &attends("fusion.feat_attends", &x, &t_fused);

    // compare the first scale (rows 0..4)
    let out0 = f.tape.value(fused[0]);
    for y in 0..2 {
        for xx in 0..2 {
            for ch in 0..c {
                let got = out0[[ch, y, xx]];
                let want = x_fused[(y * 2 + xx, ch)];
                assert!(
                    (got - want).abs() < 1e-4,
                    "pixel ({y},{xx}) ch {ch}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn decode_single_object_query() {
    let mut cfg = tiny_cfg();
    cfg.object_queries = 1;
    cfg.top_k = 1;
    let model = Model::new(cfg).unwrap();
    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let out = model.forward(&mut f, &rand_image(32, 32, 5), &vocab).unwrap();
    assert_eq!(f.tape.value(out.object.scores).shape()[0], 1);
    assert_eq!(f.tape.value(out.object.boxes).shape(), &[1, 4]);
}

#[test]
fn identity_mask_head_projects_pixel_embedding_channel() {
    let mut model = Model::new(tiny_cfg()).unwrap();
    let c = 16usize;
    let eye = ArrayD::from_shape_fn(IxDyn(&[c, c]), |ix| (ix[0] == ix[1]) as u32 as f32);
    for layer in ["l1", "l2", "l3"] {
        // Mlp3::init names weights heads.mask_obj.<layer>.w
        let wid = model
            .store
            .id_by_name(&format!("heads.mask_obj.{layer}.w"))
            .unwrap();
        model.store.set(wid, eye.clone());
    }
    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let enc = model
        .encode_image(&mut f, &rand_image(32, 32, 6), &vocab)
        .unwrap();
    let k = 3usize;
    let mut unit = Array2::<f32>::zeros((1, c));
    unit[(0, k)] = 1.0;
    let q = f.tape.constant2(unit);
    let logits = model.predict_object_masks(&mut f, q, &enc);
    let out = f.tape.value(logits);
    let mp = f.tape.value(enc.pixel_embedding);
    let (h4, w4) = enc.hw4;
    for y in 0..h4 {
        for x in 0..w4 {
            let got = out[[0, y * w4 + x]];
            let want = mp[[k, y, x]];
            assert!((got - want).abs() < 1e-5);
        }
    }
}

#[test]
fn zero_mask_head_gives_zero_logits() {
    let mut model = Model::new(tiny_cfg()).unwrap();
    for layer in ["l1", "l2", "l3"] {
        let wid = model
            .store
            .id_by_name(&format!("heads.mask_obj.{layer}.w"))
            .unwrap();
        let shape = model.store.get(wid).shape().to_vec();
        model.store.set(wid, ArrayD::zeros(IxDyn(&shape)));
    }
    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let enc = model
        .encode_image(&mut f, &rand_image(32, 32, 6), &vocab)
        .unwrap();
    let q = f.tape.constant2(Array2::from_elem((2, 16), 0.37));
    let logits = model.predict_object_masks(&mut f, q, &enc);
    assert!(f.tape.value(logits).iter().all(|&v| v == 0.0));
}

#[test]
fn qformer_shape_contract() {
    // paper-scale routing: top-50 with 10 parsing queries -> 500 part queries
    let mut cfg = tiny_cfg();
    cfg.object_queries = 50;
    cfg.top_k = 50;
    cfg.parsing_queries = 10;
    cfg.qformer_blocks = 6;
    cfg.channels = 32;
    cfg.text_dim = 32;
    cfg.heads = 4;
    let model = Model::new(cfg).unwrap();
    let mut f = model.forward_pass();
    let q_sel = random_feature_2d(&mut f, 50, 32, 1);
    let parts = model.qformer_parse(&mut f, q_sel);
    assert_eq!(f.tape.value(parts).shape(), &[500, 32]);

    // tiny config: 3 blocks of 2
    let mut cfg = tiny_cfg();
    cfg.parsing_queries = 2;
    let model = Model::new(cfg).unwrap();
    let mut f = model.forward_pass();
    let q_sel = random_feature_2d(&mut f, 3, 16, 2);
    let parts = model.qformer_parse(&mut f, q_sel);
    assert_eq!(f.tape.value(parts).shape(), &[6, 16]);
}

fn random_feature_2d(f: &mut Forward, rows: usize, cols: usize, seed: u64) -> Value {
    let mut state = seed;
    let arr = Array2::from_shape_fn((rows, cols), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(17);
        ((state >> 34) as f32 / (1u64 << 30) as f32) - 0.5
    });
    f.tape.constant2(arr)
}

#[test]
fn qformer_is_permutation_equivariant() {
    let model = Model::new(tiny_cfg()).unwrap();
    let l = model.cfg.parsing_queries;
    let mut f = model.forward_pass();
    let q = random_feature_2d(&mut f, 4, 16, 31);
    let out = model.qformer_parse(&mut f, q);
    let base = as_array2(f.tape.value(out));

    let perm = [2usize, 0, 3, 1];
    let permuted_in = f.tape.gather_rows(q, &perm);
    let out_p = model.qformer_parse(&mut f, permuted_in);
    let permuted = as_array2(f.tape.value(out_p));
    for (new_block, &old_block) in perm.iter().enumerate() {
        for j in 0..l {
            for ch in 0..16 {
                assert_eq!(
                    permuted[(new_block * l + j, ch)],
                    base[(old_block * l + j, ch)],
                    "block {new_block} row {j}"
                );
            }
        }
    }
}

#[test]
fn select_topk_matches_sort_oracle() {
    let mut state = 1234u64;
    let scores = Array2::from_shape_fn((9, 4), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(19);
        ((state >> 34) as f32 / (1u64 << 30) as f32) - 0.5
    });
    let got = select_topk_rows(&scores, 5).unwrap();
    // full-sort oracle
    let mut keyed: Vec<(usize, f32)> = scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (i, r.iter().copied().fold(f32::NEG_INFINITY, f32::max)))
        .collect();
    keyed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let want: Vec<usize> = keyed.iter().take(5).map(|&(i, _)| i).collect();
    assert_eq!(got, want);

    // k = N is a score-ordered permutation of all rows
    let all = select_topk_rows(&scores, 9).unwrap();
    let mut sorted = all.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..9).collect::<Vec<_>>());

    // unique max, k = 1
    let mut one = Array2::<f32>::zeros((4, 2));
    one[(2, 1)] = 3.0;
    assert_eq!(select_topk_rows(&one, 1).unwrap(), vec![2]);

    assert!(select_topk_rows(&one, 5).is_err());
}

#[test]
fn similarity_scores_cases() {
    let mut model = Model::new(tiny_cfg()).unwrap();
    let c = 16usize;
    let eye = ArrayD::from_shape_fn(IxDyn(&[c, c]), |ix| (ix[0] == ix[1]) as u32 as f32);
    model.store.set(model.w_proj, eye);
    let vocab = tiny_vocab(16);

    let mut f = model.forward_pass();
    let q = f
        .tape
        .constant2(vocab.object.rows.slice(s![1..2, ..]).to_owned());
    let scores = model.similarity_scores(&mut f, q, &vocab.object);
    let s = f.tape.value(scores);
    // q = T row 1, W identity: S[0, 1] = ||T_1||^2 = 1 (unit rows), and is the max
    assert!((s[[0, 1]] - 1.0).abs() < 1e-5);
    assert!(s[[0, 1]] > s[[0, 0]]);

    // T = 0 -> S = 0
    let zero_t = TextEmbeddingMatrix {
        names: vec!["z".into()],
        rows: Array2::zeros((1, c)),
    };
    let scores0 = model.similarity_scores(&mut f, q, &zero_t);
    assert!(f.tape.value(scores0).iter().all(|&v| v == 0.0));

    // random case vs triple-loop oracle
    let q2 = random_feature_2d(&mut f, 3, c, 8);
    let q2v = as_array2(f.tape.value(q2));
    let mut state = 4321u64;
    let wp = Array2::from_shape_fn((c, c), |_| {
        state = state.wrapping_mul(2862933555777941757).wrapping_add(23);
        ((state >> 34) as f32 / (1u64 << 30) as f32) - 0.5
    });
    model
        .store
        .set(model.w_proj, wp.clone().into_dyn());
    let mut f2 = model.forward_pass();
    let q2b = f2.tape.constant2(q2v.clone());
    let scores2 = model.similarity_scores(&mut f2, q2b, &vocab.part);
    let got = f2.tape.value(scores2);
    for i in 0..3 {
        for j in 0..vocab.part.len() {
            let mut acc = 0f64;
            for d in 0..c {
                let mut proj = 0f64;
                for ch in 0..c {
                    proj += q2v[(i, ch)] as f64 * wp[(ch, d)] as f64;
                }
                acc += proj * vocab.part.rows[(j, d)] as f64;
            }
            assert!(
                (got[[i, j]] as f64 - acc).abs() < 1e-4,
                "({i},{j}): {} vs {acc}",
                got[[i, j]]
            );
        }
    }
}

#[test]
fn part_rows_equal_topk_times_l_and_slots_link_back() {
    let model = Model::new(tiny_cfg()).unwrap();
    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let out = model.forward(&mut f, &rand_image(32, 32, 77), &vocab).unwrap();
    let expected_rows = model.cfg.top_k * model.cfg.parsing_queries;
    assert_eq!(f.tape.value(out.part.scores).shape()[0], expected_rows);
    assert_eq!(out.part.slot_of_row.len(), expected_rows);
    for (row, &slot) in out.part.slot_of_row.iter().enumerate() {
        assert_eq!(slot, out.selected_slots[row / model.cfg.parsing_queries]);
    }
}

#[test]
fn gradients_reach_parse_queries() {
    let model = Model::new(tiny_cfg()).unwrap();
    let vocab = tiny_vocab(16);
    let mut f = model.forward_pass();
    let out = model.forward(&mut f, &rand_image(32, 32, 13), &vocab).unwrap();
    let sq = f.tape.mul(out.part.scores, out.part.scores);
    let loss = f.tape.sum_all(sq);
    let grads = f.tape.backward(loss);
    let by_param = f.tape.param_grads(&grads);
    let g = by_param
        .get(&model.parse_queries.0)
        .expect("parse queries reached by gradient");
    assert!(g.iter().any(|&v| v != 0.0));
    // outputs stay finite
    assert!(f.tape.value(out.part.scores).iter().all(|v| v.is_finite()));
    assert!(f.tape.value(out.object.scores).iter().all(|v| v.is_finite()));
}

#[test]
fn embed_categories_override_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.json");
    let mut map = HashMap::new();
    map.insert("alpha".to_string(), vec![1.0f32, 0.0, 0.0, 0.0]);
    std::fs::write(&path, serde_json::to_string(&map).unwrap()).unwrap();
    let loaded = embeddings::load_overrides(&path).unwrap();
    let t = embed_categories(&["alpha".into()], 4, 0, Some(&loaded)).unwrap();
    assert_eq!(t.rows[(0, 0)], 1.0);
}
