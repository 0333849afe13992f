//! Transformer building blocks shared by the motion encoder and the track
//! decoder: linear layers, masked multi-head attention, and pre-norm residual
//! sublayers, all addressed by parameter name prefixes.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::params::{init_layer_norm, init_linear};
use crate::tensor::{EmptyRow, ParamStore, ParamVars, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---- parameter initialization ----

/// `{prefix}.{q,k,v,o}.{w,b}` — the four projections of one attention block.
pub fn init_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), dim, dim);
    }
}

/// `{prefix}.{in,out}.{w,b}` — a two-layer ReLU feed-forward block.
pub fn init_feed_forward(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
) {
    init_linear(store, rng, &format!("{prefix}.in"), dim, hidden);
    init_linear(store, rng, &format!("{prefix}.out"), hidden, dim);
}

pub fn init_prenorm_attention(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) {
    init_layer_norm(store, &format!("{prefix}.ln"), dim);
    init_attention(store, rng, &format!("{prefix}.att"), dim);
}

pub fn init_prenorm_feed_forward(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
) {
    init_layer_norm(store, &format!("{prefix}.ln"), dim);
    init_feed_forward(store, rng, &format!("{prefix}.ff"), dim, hidden);
}

// ---- forward passes ----

pub fn linear(tape: &Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    tape.add_bias(h, p.get(&format!("{prefix}.b"))?)
}

pub fn feed_forward(tape: &Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.in"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.out"), h)
}

fn layer_norm_named(tape: &Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(
        x,
        p.get(&format!("{prefix}.g"))?,
        p.get(&format!("{prefix}.o"))?,
        LAYER_NORM_EPS,
    )
}

/// Scaled dot-product attention with `heads` heads. `query` is [B, Sq, D],
/// `context` is [B, Sk, D]. `key_mask`, when present, broadcasts right-aligned
/// onto the [B, H, Sq, Sk] score tensor (pass [B, 1, 1, Sk] to gate keys);
/// masked keys get weight exactly zero and queries with no usable key produce
/// a zero context row.
pub fn multi_head_attention(
    tape: &Tape,
    p: &ParamVars,
    prefix: &str,
    query: Var,
    context: Var,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<Var> {
    Ok(multi_head_attention_scored(tape, p, prefix, query, context, key_mask, heads)?.0)
}

/// [`multi_head_attention`] that also hands back the pre-softmax score tensor
/// [B, H, Sq, Sk], for tests that probe what the scores may depend on.
pub fn multi_head_attention_scored(
    tape: &Tape,
    p: &ParamVars,
    prefix: &str,
    query: Var,
    context: Var,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = tape.shape_of(query);
    let cs = tape.shape_of(context);
    if qs.len() != 3 || cs.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "attention wants [B, S, D] operands, got {qs:?} x {cs:?}"
        )));
    }
    let (b, sq, d) = (qs[0], qs[1], qs[2]);
    let sk = cs[1];
    if cs[0] != b || cs[2] != d {
        return Err(Error::ShapeMismatch(format!(
            "query {qs:?} and context {cs:?} disagree"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;

    let q = linear(tape, p, &format!("{prefix}.q"), query)?;
    let k = linear(tape, p, &format!("{prefix}.k"), context)?;
    let v = linear(tape, p, &format!("{prefix}.v"), context)?;
    let q = tape.permute(tape.reshape(q, &[b, sq, heads, dh])?, &[0, 2, 1, 3])?;
    let kt = tape.permute(tape.reshape(k, &[b, sk, heads, dh])?, &[0, 2, 3, 1])?;
    let v = tape.permute(tape.reshape(v, &[b, sk, heads, dh])?, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, kt)?; // [B, H, Sq, Sk]
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = match key_mask {
        Some(m) => tape.masked_softmax(scores, m, EmptyRow::Zero)?,
        None => tape.softmax(scores)?,
    };
    let ctx = tape.matmul(weights, v)?; // [B, H, Sq, Dh]
    let ctx = tape.reshape(tape.permute(ctx, &[0, 2, 1, 3])?, &[b, sq, d])?;
    Ok((linear(tape, p, &format!("{prefix}.o"), ctx)?, scores))
}

/// `x + Att(LN(x))` with parameters under `{prefix}.ln` / `{prefix}.att`.
pub fn prenorm_self_attention(
    tape: &Tape,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<Var> {
    Ok(prenorm_self_attention_scored(tape, p, prefix, x, key_mask, heads)?.0)
}

/// [`prenorm_self_attention`] exposing the pre-softmax attention scores.
pub fn prenorm_self_attention_scored(
    tape: &Tape,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<(Var, Var)> {
    let ln = layer_norm_named(tape, p, &format!("{prefix}.ln"), x)?;
    let (att, scores) =
        multi_head_attention_scored(tape, p, &format!("{prefix}.att"), ln, ln, key_mask, heads)?;
    Ok((tape.add(x, att)?, scores))
}

/// `x + Att(q = LN(x), kv = memory)`; the memory is consumed as-is.
pub fn prenorm_cross_attention(
    tape: &Tape,
    p: &ParamVars,
    prefix: &str,
    x: Var,
    memory: Var,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<Var> {
    let ln = layer_norm_named(tape, p, &format!("{prefix}.ln"), x)?;
    let att = multi_head_attention(tape, p, &format!("{prefix}.att"), ln, memory, key_mask, heads)?;
    tape.add(x, att)
}

/// `x + FF(LN(x))` with parameters under `{prefix}.ln` / `{prefix}.ff`.
pub fn prenorm_feed_forward(tape: &Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let ln = layer_norm_named(tape, p, &format!("{prefix}.ln"), x)?;
    let ff = feed_forward(tape, p, &format!("{prefix}.ff"), ln)?;
    tape.add(x, ff)
}

// ---- canonical row ordering ----

/// Byte key identifying a row by content: the big-endian bit patterns of all
/// its parts, concatenated.
pub fn row_key(parts: &[&[f64]]) -> Vec<u8> {
    let len: usize = parts.iter().map(|p| p.len() * 8).sum();
    let mut key = Vec::with_capacity(len);
    for part in parts {
        for v in *part {
            key.extend_from_slice(&v.to_bits().to_be_bytes());
        }
    }
    key
}

/// Content-determined ordering of rows: `order[k]` is the original index of
/// the row placed at canonical position `k`, and `inverse` maps original
/// index to canonical position. Computing in canonical order and then
/// gathering back through `inverse` makes row-set operations independent of
/// the caller's row order, bitwise.
pub fn canonical_order(keys: &[Vec<u8>]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    let mut inverse = vec![0usize; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    (order, inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck_params, random_tensor};
    use rand::SeedableRng;

    fn test_params(dim: usize, hidden: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let mut store = ParamStore::new();
        init_prenorm_attention(&mut store, &mut rng, "blk", dim);
        init_prenorm_feed_forward(&mut store, &mut rng, "blk2", dim, hidden);
        store
    }

    #[test]
    fn attention_block_passes_gradcheck() {
        let store = test_params(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_tensor(&[1, 3, 4], &mut rng);
        let report = gradcheck_params(
            |tape, p, v| {
                let h = prenorm_self_attention(tape, p, "blk", v[0], None, 2)?;
                prenorm_feed_forward(tape, p, "blk2", h)
            },
            &store,
            &[x],
            7,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "rel err {} worst {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn masked_keys_cannot_influence_valid_queries() {
        let store = test_params(4, 6);
        let mask = Tensor::new(vec![1, 1, 1, 5], vec![1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[1, 5, 4], &mut rng);
        let run = |x: &Tensor| -> Vec<f64> {
            let tape = Tape::new();
            let p = store.lift(&tape);
            let v = tape.leaf(x.clone());
            let out = prenorm_self_attention(&tape, &p, "blk", v, Some(&mask), 2).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&x);
        let mut poked = x.clone();
        for j in 0..4 {
            poked.data_mut()[3 * 4 + j] = 99.0 + j as f64; // row 3 is masked
            poked.data_mut()[4 * 4 + j] = -55.0;           // row 4 is masked
        }
        let changed = run(&poked);
        for s in 0..3 {
            for j in 0..4 {
                assert_eq!(base[s * 4 + j], changed[s * 4 + j], "row {s} coord {j}");
            }
        }
    }

    #[test]
    fn attention_rows_with_no_keys_reduce_to_bias_plus_residual() {
        let store = test_params(4, 6);
        let mask = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let p = store.lift(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[1, 2, 4], &mut rng);
        let v = tape.leaf(x.clone());
        let att = multi_head_attention(&tape, &p, "blk.att", v, v, Some(&mask), 2).unwrap();
        let got = tape.value(att);
        let bias = store.get("blk.att.o.b").unwrap();
        for s in 0..2 {
            for j in 0..4 {
                assert_eq!(got.data()[s * 4 + j], bias.data()[j]);
            }
        }
    }

    #[test]
    fn canonical_order_is_content_determined() {
        let rows = [
            vec![0.5, -1.0],
            vec![2.0, 0.25],
            vec![0.5, -1.0],
            vec![-3.0, 8.0],
        ];
        let keys: Vec<Vec<u8>> = rows.iter().map(|r| row_key(&[r])).collect();
        let (order, inverse) = canonical_order(&keys);
        for (pos, &i) in order.iter().enumerate() {
            assert_eq!(inverse[i], pos);
        }
        // permuting the rows yields the same canonical sequence of contents
        let perm = [3usize, 0, 2, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let pkeys: Vec<Vec<u8>> = permuted.iter().map(|r| row_key(&[r])).collect();
        let (porder, _) = canonical_order(&pkeys);
        let canon: Vec<&Vec<f64>> = order.iter().map(|&i| &rows[i]).collect();
        let pcanon: Vec<&Vec<f64>> = porder.iter().map(|&i| &permuted[i]).collect();
        assert_eq!(canon, pcanon);
    }
}
