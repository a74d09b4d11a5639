use crate::data::{Batch, ItemId};
use crate::numerics::{Graph, Tensor, Var, LAYER_NORM_EPS};

use super::{Mode, ModelConfig, ModelError, ModelParams, ParamVars};

/// Embedded batch after truncation to the most recent `max_len` items.
#[derive(Clone, Debug)]
pub struct Embedded {
    /// `[B, width, d]`, zero on padding rows.
    pub x: Var,
    pub lengths: Vec<usize>,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// Graph handles for every stage of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedded: Embedded,
    /// Instant interests, `[B, width, d]`.
    pub interests: Var,
    /// Session representations, `[B, d]`.
    pub session_repr: Var,
    /// Trend attention weights over the instant interests, `[B, 1, width]`.
    pub trend_weights: Var,
    /// Catalog distributions, `[B, N]`.
    pub scores: Var,
}

/// Unpadded intermediate states for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub embedded: Tensor,
    pub interests: Tensor,
    pub session_repr: Tensor,
    pub scores: Tensor,
}

/// Row `t` is `item_embed[i_t] + pos_embed[t]`, counting positions from the
/// oldest retained item.
pub fn embed_session(
    graph: &mut Graph<'_>,
    vars: &ParamVars,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<Embedded, ModelError> {
    let size = batch.size();
    let width = batch.width.min(config.max_len);
    let mut items = Vec::with_capacity(size * width);
    let mut positions = Vec::with_capacity(size * width);
    let mut lengths = Vec::with_capacity(size);
    for b in 0..size {
        let session = batch.session(b);
        if session.is_empty() {
            return Err(ModelError::EmptySession { index: b });
        }
        let kept = &session[session.len().saturating_sub(config.max_len)..];
        for t in 0..width {
            match kept.get(t) {
                Some(&id) => {
                    check_item(id, config.num_items)?;
                    items.push(Some(id as usize));
                    positions.push(Some(t));
                }
                None => {
                    items.push(None);
                    positions.push(None);
                }
            }
        }
        lengths.push(kept.len());
    }
    let d = config.embed_dim;
    let item_rows = graph.gather_rows(vars.item_embed, &items)?;
    let pos_rows = graph.gather_rows(vars.pos_embed, &positions)?;
    let flat = graph.add(item_rows, pos_rows)?;
    let x = graph.reshape(flat, &[size, width, d])?;
    Ok(Embedded { x, lengths, width })
}

fn check_item(id: ItemId, num_items: usize) -> Result<(), ModelError> {
    if (id as usize) < num_items {
        Ok(())
    } else {
        Err(ModelError::ItemOutOfRange { id, num_items })
    }
}

/// Scaled dot-product attention over batched `[B, r, d]` queries and
/// `[B, t, d]` keys and values. `mask` has one entry per `(b, query, key)`.
pub fn attention(
    graph: &mut Graph<'_>,
    query: Var,
    keys: Var,
    values: Var,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput, ModelError> {
    let d = *graph.shape(keys).last().unwrap_or(&1);
    let keys_t = graph.transpose(keys)?;
    let logits = graph.matmul(query, keys_t)?;
    let logits = graph.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = graph.softmax(logits, mask)?;
    let output = graph.matmul(weights, values)?;
    Ok(AttentionOutput { output, weights })
}

/// `mask[b, t, j]` admits key `j` for query `t` iff `j <= t` and `j` is a
/// real item. Padding queries see the whole session, which keeps their
/// rows well defined.
fn causal_mask(lengths: &[usize], width: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(lengths.len() * width * width);
    for &len in lengths {
        for t in 0..width {
            mask.extend((0..width).map(|j| j < len && (j <= t || t >= len)));
        }
    }
    mask
}

fn length_mask(lengths: &[usize], width: usize) -> Vec<bool> {
    lengths.iter().flat_map(|&len| (0..width).map(move |j| j < len)).collect()
}

/// Instant interests: causal attention with a learned query projection,
/// then a feed-forward block with dropout, residual and layer norm.
pub fn interest_tracking(
    graph: &mut Graph<'_>,
    vars: &ParamVars,
    config: &ModelConfig,
    embedded: &Embedded,
    mode: &mut Mode<'_>,
) -> Result<Var, ModelError> {
    let x = embedded.x;
    let projected = graph.matmul(x, vars.query_weight)?;
    let projected = graph.add(projected, vars.query_bias)?;
    let query = graph.relu(projected)?;
    let mask = causal_mask(&embedded.lengths, embedded.width);
    let attended = attention(graph, query, x, x, Some(&mask))?.output;

    let hidden = graph.matmul(attended, vars.ffn_w1)?;
    let hidden = graph.add(hidden, vars.ffn_b1)?;
    let hidden = graph.relu(hidden)?;
    let ffn = graph.matmul(hidden, vars.ffn_w2)?;
    let ffn = graph.add(ffn, vars.ffn_b2)?;
    let ffn = graph.dropout(ffn, config.dropout_rate, mode.rng())?;
    let residual = graph.add(attended, ffn)?;
    Ok(graph.layer_norm(residual, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)?)
}

/// Attends from the most recent instant interest over all of them. The
/// output is `[B, d]`.
pub fn interest_enhancing(graph: &mut Graph<'_>, interests: Var, lengths: &[usize]) -> Result<AttentionOutput, ModelError> {
    let shape = graph.shape(interests).to_vec();
    let (size, width, d) = (shape[0], shape[1], shape[2]);
    let flat = graph.reshape(interests, &[size * width, d])?;
    let last: Vec<Option<usize>> = lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| Some(b * width + len - 1))
        .collect();
    let query = graph.gather_rows(flat, &last)?;
    let query = graph.reshape(query, &[size, 1, d])?;
    let mask = length_mask(lengths, width);
    let out = attention(graph, query, interests, interests, Some(&mask))?;
    let output = graph.reshape(out.output, &[size, d])?;
    Ok(AttentionOutput {
        output,
        weights: out.weights,
    })
}

/// Softmax over the catalog of temperature-scaled cosine similarities
/// between each session representation and each item embedding.
pub fn score(graph: &mut Graph<'_>, vars: &ParamVars, config: &ModelConfig, session_repr: Var) -> Result<Var, ModelError> {
    let repr = graph.l2_normalize(session_repr)?;
    let items = graph.l2_normalize(vars.item_embed)?;
    let items_t = graph.transpose(items)?;
    let cosine = graph.matmul(repr, items_t)?;
    let logits = graph.scale(cosine, 1.0 / config.score_temperature)?;
    Ok(graph.softmax(logits, None)?)
}

pub fn forward(
    graph: &mut Graph<'_>,
    vars: &ParamVars,
    config: &ModelConfig,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<ForwardOutput, ModelError> {
    if batch.size() == 0 {
        return Err(ModelError::InvalidConfig("empty batch".into()));
    }
    let embedded = embed_session(graph, vars, config, batch)?;
    let interests = interest_tracking(graph, vars, config, &embedded, mode)?;
    let trend = interest_enhancing(graph, interests, &embedded.lengths)?;
    let scores = score(graph, vars, config, trend.output)?;
    Ok(ForwardOutput {
        embedded,
        interests,
        session_repr: trend.output,
        trend_weights: trend.weights,
        scores,
    })
}

/// Evaluation-mode catalog distributions, `[B, N]`.
pub fn predict_scores(params: &ModelParams, config: &ModelConfig, batch: &Batch) -> Result<Tensor, ModelError> {
    let mut graph = Graph::new();
    let vars = params.register(&mut graph, false);
    let out = forward(&mut graph, &vars, config, batch, &mut Mode::Eval)?;
    Ok(graph.value(out.scores).clone())
}

/// Evaluation-mode traces with padding stripped.
pub fn predict(params: &ModelParams, config: &ModelConfig, batch: &Batch) -> Result<Vec<ForwardTrace>, ModelError> {
    let mut graph = Graph::new();
    let vars = params.register(&mut graph, false);
    let out = forward(&mut graph, &vars, config, batch, &mut Mode::Eval)?;
    let d = config.embed_dim;
    let width = out.embedded.width;
    let rows = |var: Var, b: usize, len: usize| -> Result<Tensor, ModelError> {
        let data = graph.value(var).data()[b * width * d..(b * width + len) * d].to_vec();
        Ok(Tensor::new(vec![len, d], data)?)
    };
    let mut traces = Vec::with_capacity(batch.size());
    for (b, &len) in out.embedded.lengths.iter().enumerate() {
        traces.push(ForwardTrace {
            embedded: rows(out.embedded.x, b, len)?,
            interests: rows(out.interests, b, len)?,
            session_repr: Tensor::vector(graph.value(out.session_repr).row(b).to_vec())?,
            scores: Tensor::vector(graph.value(out.scores).row(b).to_vec())?,
        });
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Session;

    fn toy_config(n: usize, d: usize, max_len: usize) -> ModelConfig {
        ModelConfig {
            num_items: n,
            embed_dim: d,
            ffn_dim: d,
            max_len,
            dropout_rate: 0.2,
            score_temperature: 1.0,
        }
    }

    fn batch_of(sessions: &[Vec<ItemId>]) -> Batch {
        let sessions: Vec<Session> = sessions.iter().map(|s| Session::new(s.clone(), 0)).collect();
        Batch::from_sessions(&sessions)
    }

    fn random_params(config: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(config, &mut rng);
        for t in [&mut p.query_bias, &mut p.ffn_b1, &mut p.ffn_b2, &mut p.ln_bias] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        p
    }

    fn interests_of(params: &ModelParams, config: &ModelConfig, session: &[ItemId]) -> Tensor {
        predict(params, config, &batch_of(&[session.to_vec()]))
            .unwrap()
            .remove(0)
            .interests
    }

    #[test]
    fn single_item_embedding_is_item_plus_first_position() {
        let cfg = toy_config(6, 4, 5);
        let p = random_params(&cfg, 1);
        let trace = predict(&p, &cfg, &batch_of(&[vec![3]])).unwrap().remove(0);
        let expected: Vec<f64> = p
            .item_embed
            .row(3)
            .iter()
            .zip(p.pos_embed.row(0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(trace.embedded.data(), expected.as_slice());
        assert_eq!(trace.session_repr.data(), trace.interests.row(0));
    }

    #[test]
    fn long_sessions_keep_the_most_recent_items() {
        let cfg = toy_config(10, 4, 3);
        let p = random_params(&cfg, 2);
        let long = predict(&p, &cfg, &batch_of(&[vec![1, 2, 3, 4, 5, 6]])).unwrap().remove(0);
        let tail = predict(&p, &cfg, &batch_of(&[vec![4, 5, 6]])).unwrap().remove(0);
        assert_eq!(long, tail);
        assert_eq!(long.embedded.shape(), &[3, 4]);
    }

    #[test]
    fn rejects_out_of_range_items() {
        let cfg = toy_config(5, 3, 4);
        let p = random_params(&cfg, 3);
        assert!(matches!(
            predict(&p, &cfg, &batch_of(&[vec![1, 5]])),
            Err(ModelError::ItemOutOfRange { id: 5, num_items: 5 })
        ));
    }

    #[test]
    fn zero_embeddings_embed_to_zero() {
        let cfg = toy_config(5, 3, 4);
        let mut g = Graph::new();
        let p = ModelParams::zeros(&cfg);
        let vars = p.register(&mut g, false);
        let e = embed_session(&mut g, &vars, &cfg, &batch_of(&[vec![1, 2, 4]])).unwrap();
        assert!(g.value(e.x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_hand_example() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let kv = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = attention(&mut g, q, kv, kv, None).unwrap();
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        let got = g.value(out.output).data();
        assert!((got[0] - w0).abs() < 1e-15 && (got[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((w0 - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 1, 3], vec![5.0, -2.0, 0.1]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 3], vec![0.3, 0.3, 0.3]).unwrap());
        let v = g.constant(Tensor::new(vec![1, 1, 3], vec![7.0, 8.0, 9.0]).unwrap());
        let out = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(out.output).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn perturbing_a_later_item_leaves_earlier_interests_unchanged() {
        let cfg = toy_config(12, 6, 8);
        let p = random_params(&cfg, 4);
        let base = interests_of(&p, &cfg, &[1, 5, 7, 2, 9]);
        let changed = interests_of(&p, &cfg, &[1, 5, 7, 11, 0]);
        assert_eq!(base.data()[..3 * 6], changed.data()[..3 * 6]);
        assert_ne!(base.row(3), changed.row(3));
    }

    fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let cols = w.cols();
        (0..cols)
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.row(i)[j]).sum::<f64>())
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn attend(q: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
        let scale = 1.0 / (q.len() as f64).sqrt();
        let logits: Vec<f64> = rows.iter().map(|r| dot(q, r) * scale).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        (0..q.len())
            .map(|k| rows.iter().zip(&e).map(|(r, w)| r[k] * w / z).sum())
            .collect()
    }

    fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * gain[i] + bias[i])
            .collect()
    }

    #[test]
    fn two_slice_loop_matches_masked_batch() {
        let cfg = toy_config(7, 4, 5);
        let mut p = random_params(&cfg, 5);
        for (i, v) in p.query_weight.data_mut().iter_mut().enumerate() {
            *v = if i % 5 == 0 { 1.0 } else { 0.0 };
        }
        let session = [2u32, 6];
        let x: Vec<Vec<f64>> = session
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                p.item_embed
                    .row(id as usize)
                    .iter()
                    .zip(p.pos_embed.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let mut expected = Vec::new();
        for t in 0..2 {
            let q: Vec<f64> = affine(&x[t], &p.query_weight, &p.query_bias)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let attended = attend(&q, &x[..=t]);
            let hidden: Vec<f64> = affine(&attended, &p.ffn_w1, &p.ffn_b1)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let ffn = affine(&hidden, &p.ffn_w2, &p.ffn_b2);
            let residual: Vec<f64> = attended.iter().zip(&ffn).map(|(a, b)| a + b).collect();
            expected.extend(layer_norm(&residual, p.ln_gain.data(), p.ln_bias.data()));
        }
        let got = interests_of(&p, &cfg, &session);
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn trend_output_is_a_convex_combination() {
        let cfg = toy_config(9, 5, 6);
        let p = random_params(&cfg, 6);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let out = forward(&mut g, &vars, &cfg, &batch_of(&[vec![3, 1, 8]]), &mut Mode::Eval).unwrap();
        let w = g.value(out.trend_weights).data().to_vec();
        assert!(w.iter().all(|v| *v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = g.value(out.interests);
        let o = g.value(out.session_repr).data();
        for (k, &out_k) in o.iter().enumerate() {
            let mix: f64 = (0..3).map(|j| w[j] * l.row(j)[k]).sum();
            assert!((mix - out_k).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_interests_pass_through() {
        let mut g = Graph::new();
        let row = [0.5, -1.0, 2.0];
        let l = g.constant(Tensor::new(vec![1, 3, 3], row.repeat(3)).unwrap());
        let out = interest_enhancing(&mut g, l, &[3]).unwrap();
        for (a, b) in g.value(out.output).data().iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_item_embeddings_score_uniformly() {
        let cfg = toy_config(8, 3, 4);
        let mut p = random_params(&cfg, 7);
        p.item_embed = Tensor::new(vec![8, 3], [0.2, -0.4, 0.9].repeat(8)).unwrap();
        let scores = predict_scores(&p, &cfg, &batch_of(&[vec![1, 2]])).unwrap();
        assert!(scores.data().iter().all(|v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn aligned_item_closed_form() {
        let n = 6;
        let cfg = toy_config(n, 3, 4);
        let p = ModelParams::zeros(&cfg);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let mut emb = vec![0.0; n * 3];
        emb[2 * 3] = 2.5;
        for i in (0..n).filter(|&i| i != 2) {
            emb[i * 3 + 1 + i % 2] = 1.0 + i as f64;
        }
        let items = g.constant(Tensor::new(vec![n, 3], emb).unwrap());
        let vars = ParamVars {
            item_embed: items,
            ..vars
        };
        let o = g.constant(Tensor::new(vec![1, 3], vec![0.7, 0.0, 0.0]).unwrap());
        let s = score(&mut g, &vars, &cfg, o).unwrap();
        let e = 1f64.exp();
        assert!((g.value(s).data()[2] - e / (e + (n - 1) as f64)).abs() < 1e-15);
    }

    #[test]
    fn scores_are_invariant_to_rescaling_the_representation() {
        let cfg = toy_config(10, 4, 4);
        let p = random_params(&cfg, 8);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let o = g.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.1]).unwrap());
        let o_big = g.scale(o, 17.0).unwrap();
        let a = score(&mut g, &vars, &cfg, o).unwrap();
        let b = score(&mut g, &vars, &cfg, o_big).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-15);
    }

    #[test]
    fn padded_batch_matches_single_sessions_bitwise() {
        let cfg = toy_config(15, 5, 7);
        let p = random_params(&cfg, 9);
        let sessions = vec![vec![1, 4], vec![3, 3, 9, 0, 14], vec![7], vec![2, 2, 2, 2, 2, 2, 2, 2, 5]];
        let batched = predict(&p, &cfg, &batch_of(&sessions)).unwrap();
        for (s, trace) in sessions.iter().zip(&batched) {
            let single = predict(&p, &cfg, &batch_of(std::slice::from_ref(s))).unwrap().remove(0);
            assert_eq!(&single, trace);
            assert!((trace.scores.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relabeling_items_permutes_scores() {
        let cfg = toy_config(9, 4, 5);
        let p = random_params(&cfg, 10);
        let perm: Vec<usize> = vec![4, 0, 7, 1, 8, 2, 6, 3, 5];
        let mut q = p.clone();
        for (old, &new) in perm.iter().enumerate() {
            q.item_embed.data_mut()[new * 4..new * 4 + 4].copy_from_slice(p.item_embed.row(old));
        }
        let session = vec![2u32, 5, 1];
        let relabeled: Vec<u32> = session.iter().map(|&i| perm[i as usize] as u32).collect();
        let a = predict_scores(&p, &cfg, &batch_of(&[session])).unwrap();
        let b = predict_scores(&q, &cfg, &batch_of(&[relabeled])).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            assert!((a.data()[old] - b.data()[new]).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let cfg = toy_config(9, 4, 5);
        let p = random_params(&cfg, 11);
        let batch = batch_of(&[vec![1, 2, 3]]);
        let run = |mode: &mut Mode<'_>| {
            let mut g = Graph::new();
            let vars = p.register(&mut g, false);
            let out = forward(&mut g, &vars, &cfg, &batch, mode).unwrap();
            g.value(out.scores).clone()
        };
        let eval = run(&mut Mode::Eval);
        assert_eq!(eval, predict_scores(&p, &cfg, &batch).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(eval, run(&mut Mode::Train(&mut rng)));
    }
}
