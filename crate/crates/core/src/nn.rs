//! Parameter storage, initialisation, transformer building blocks and the
//! AdamW optimiser shared by every model stage.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::domain::RngHandle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter arrays. Names are dot-separated paths such as
/// `vae.enc.layer0.attn.wq`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names under `prefix.` (or equal to `prefix`).
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.tensors
            .keys()
            .filter(move |k| k.as_str() == prefix || k.starts_with(&format!("{prefix}.")))
    }

    /// Moves every tensor of `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Subset of tensors whose names start with `prefix.`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .names_with_prefix(prefix)
                .map(|k| (k.clone(), self.tensors[k].clone()))
                .collect(),
        }
    }

    /// Binds `name` on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?))
    }

    /// Order-sensitive FNV-1a hash over names and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for x in t.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Deterministic parameter initialiser.
pub struct Initializer<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore, rng: RngHandle) -> Self {
        Self {
            store,
            rng: rng.rng(),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) {
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.store.insert(name, Tensor::from_vec(rows, cols, data));
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.store.insert(name, Tensor::full(rows, cols, value));
    }

    /// Xavier-uniform `fan_in × fan_out` weight, plus optional zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&format!("{prefix}.w"), fan_in, fan_out, bound);
        if bias {
            self.constant(&format!("{prefix}.b"), 1, fan_out, 0.0);
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.constant(&format!("{prefix}.g"), 1, width, 1.0);
        self.constant(&format!("{prefix}.b"), 1, width, 0.0);
    }

    /// Projections of one multi-head attention sub-block.
    pub fn attention(&mut self, prefix: &str, width: usize) {
        for m in ["wq", "wk", "wv"] {
            let bound = (6.0 / (2 * width) as f64).sqrt();
            self.uniform(&format!("{prefix}.{m}"), width, width, bound);
        }
        self.linear(&format!("{prefix}.out"), width, width, true);
    }

    /// Attention + norm + feed-forward + norm.
    pub fn encoder_layer(&mut self, prefix: &str, width: usize, ff_width: usize) {
        self.attention(&format!("{prefix}.attn"), width);
        self.layer_norm(&format!("{prefix}.ln1"), width);
        self.feed_forward(prefix, width, ff_width);
    }

    /// Self-attention, cross-attention and feed-forward sub-blocks.
    pub fn decoder_layer(&mut self, prefix: &str, width: usize, ff_width: usize) {
        self.attention(&format!("{prefix}.self_attn"), width);
        self.layer_norm(&format!("{prefix}.ln_self"), width);
        self.encoder_layer(prefix, width, ff_width);
    }

    fn feed_forward(&mut self, prefix: &str, width: usize, ff_width: usize) {
        self.linear(&format!("{prefix}.ff1"), width, ff_width, true);
        self.linear(&format!("{prefix}.ff2"), ff_width, width, true);
        self.layer_norm(&format!("{prefix}.ln2"), width);
    }
}

/// `x·W + b` (bias optional, detected from the store).
pub fn linear(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = params.bind(tape, &format!("{prefix}.w"))?;
    let (_, in_cols) = tape.shape(x);
    let (w_rows, w_cols) = tape.shape(w);
    if in_cols != w_rows {
        return Err(Error::shape(
            "linear",
            format!("{w_rows} input columns for {prefix}"),
            format!("{in_cols}x? (got {in_cols}), weight {w_rows}x{w_cols}"),
        ));
    }
    let y = tape.matmul(x, w);
    let bias_name = format!("{prefix}.b");
    if params.contains(&bias_name) {
        let b = params.bind(tape, &bias_name)?;
        Ok(tape.add_row(y, b))
    } else {
        Ok(y)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = params.bind(tape, &format!("{prefix}.g"))?;
    let b = params.bind(tape, &format!("{prefix}.b"))?;
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let scaled = tape.mul_row(n, g);
    Ok(tape.add_row(scaled, b))
}

/// `(X·W_Q, X·W_K, X·W_V)` with no bias.
pub fn qkv_project(
    tokens: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    for w in [w_q, w_k, w_v] {
        if w.rows() != tokens.cols() {
            return Err(Error::shape(
                "qkv_project",
                format!("{} projection rows", tokens.cols()),
                w.rows(),
            ));
        }
    }
    Ok((tokens.matmul(w_q), tokens.matmul(w_k), tokens.matmul(w_v)))
}

/// `softmax(Q·Kᵀ/√d)·V`, with `d` the key width.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.cols() == 0 {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q {}x{d}, k ?x{d}, v {}x?", q.rows(), k.rows(), d = q.cols()),
            format!("k {:?}, v {:?}", k.shape(), v.shape()),
        ));
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let weights = q.matmul_t(k).scale(scale).softmax_rows();
    Ok(weights.matmul(v))
}

/// Tape version of [`scaled_dot_attention`].
pub fn attention_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let d = tape.shape(k).1;
    let logits = tape.matmul_t(q, k);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(logits);
    tape.matmul(weights, v)
}

/// Multi-head attention: per-head slices of the projected queries, keys and
/// values, concatenated and passed through an output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    heads: usize,
) -> Result<Var> {
    let width = tape.shape(queries).1;
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape(
            "multi_head_attention",
            format!("width divisible by {heads} heads"),
            width,
        ));
    }
    if tape.shape(keys_values).1 != width {
        return Err(Error::shape(
            "multi_head_attention",
            format!("key/value width {width}"),
            tape.shape(keys_values).1,
        ));
    }
    let wq = params.bind(tape, &format!("{prefix}.wq"))?;
    let wk = params.bind(tape, &format!("{prefix}.wk"))?;
    let wv = params.bind(tape, &format!("{prefix}.wv"))?;
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(keys_values, wk);
    let v = tape.matmul(keys_values, wv);
    let head_width = width / heads;
    let outputs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * head_width, head_width);
            let kh = tape.slice_cols(k, h * head_width, head_width);
            let vh = tape.slice_cols(v, h * head_width, head_width);
            attention_on_tape(tape, qh, kh, vh)
        })
        .collect();
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)
    };
    linear(tape, params, &format!("{prefix}.out"), joined)
}

/// `LN(x + MHA(x, kv))`.
pub fn attention_block(
    tape: &mut Tape,
    params: &ParamStore,
    attn_prefix: &str,
    norm_prefix: &str,
    x: Var,
    kv: Var,
    heads: usize,
) -> Result<Var> {
    let a = multi_head_attention(tape, params, attn_prefix, x, kv, heads)?;
    let r = tape.add(x, a);
    layer_norm(tape, params, norm_prefix, r)
}

/// `LN(x + W₂·ReLU(W₁·x))`.
pub fn feed_forward_block(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, params, &format!("{prefix}.ff1"), x)?;
    let h = tape.relu(h);
    let h = linear(tape, params, &format!("{prefix}.ff2"), h)?;
    let r = tape.add(x, h);
    layer_norm(tape, params, &format!("{prefix}.ln2"), r)
}

/// One post-norm transformer layer. `kv = None` gives self-attention.
pub fn encoder_layer(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    kv: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let kv = kv.unwrap_or(x);
    let x = attention_block(
        tape,
        params,
        &format!("{prefix}.attn"),
        &format!("{prefix}.ln1"),
        x,
        kv,
        heads,
    )?;
    feed_forward_block(tape, params, prefix, x)
}

/// Self-attention over `x`, cross-attention into `memory`, feed-forward.
pub fn decoder_layer(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    memory: Var,
    heads: usize,
) -> Result<Var> {
    let x = attention_block(
        tape,
        params,
        &format!("{prefix}.self_attn"),
        &format!("{prefix}.ln_self"),
        x,
        x,
        heads,
    )?;
    encoder_layer(tape, params, prefix, x, Some(memory), heads)
}

/// Sinusoidal encodings of `positions`, `positions.len() × width`.
pub fn sinusoidal(positions: &[f64], width: usize) -> Tensor {
    let mut out = Tensor::zeros(positions.len(), width);
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            out.set(r, 2 * i, (p * freq).sin());
            out.set(r, 2 * i + 1, (p * freq).cos());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: ParamStore::new(),
            second_moment: ParamStore::new(),
        }
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if !self.first_moment.contains(name) {
                self.first_moment
                    .insert(name.clone(), Tensor::zeros(g.rows(), g.cols()));
                self.second_moment
                    .insert(name.clone(), Tensor::zeros(g.rows(), g.cols()));
            }
            let m = self.first_moment.get_mut(name).expect("moment present");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            }
            let m = m.data().to_vec();
            let v = self.second_moment.get_mut(name).expect("moment present");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(&m).zip(v.data()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pi);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Adds `other` into `acc` tensor-by-tensor.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Tensor>, other: &BTreeMap<String, Tensor>) {
    for (name, g) in other {
        match acc.get_mut(name) {
            Some(a) => a.add_assign(g),
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qkv_identity_and_zero_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = Tensor::identity(2);
        let (q, _, _) = qkv_project(&x, &id, &id, &id).unwrap();
        assert_eq!(q, x);
        let zero = Tensor::zeros(2, 2);
        let (q, k, v) = qkv_project(&zero, &id, &id, &id).unwrap();
        assert!(q.max_abs() == 0.0 && k.max_abs() == 0.0 && v.max_abs() == 0.0);
    }

    #[test]
    fn qkv_hand_case() {
        let x = Tensor::identity(2);
        let wk = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let (_, k, _) = qkv_project(&x, &x, &wk, &x).unwrap();
        assert_eq!(k, Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]));
    }

    #[test]
    fn qkv_rejects_bad_shapes() {
        let x = Tensor::zeros(2, 3);
        let w = Tensor::zeros(2, 2);
        assert!(matches!(
            qkv_project(&x, &w, &w, &w),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0], vec![5.0, 2.0]]);
        let k = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let v = Tensor::from_rows(&[vec![7.0, -3.0]]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out, Tensor::from_rows(&[vec![7.0, -3.0], vec![7.0, -3.0]]));
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0]]);
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 3.0]]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&Tensor::from_rows(&[vec![3.0, 2.0]])) < 1e-12);
    }

    #[test]
    fn attention_hand_softmax_case() {
        // oracle: weights = softmax(1/sqrt(2), 0)
        let a = (1.0 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        assert!((w0 - 0.6698).abs() < 1e-4);
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let id = Tensor::identity(2);
        let out = scaled_dot_attention(&q, &id, &id).unwrap();
        assert!((out.get(0, 0) - w0).abs() < 1e-12);
        assert!((out.get(0, 1) - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::row_vector(vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::row_vector(vec![0.5, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            lr: 0.1,
            ..AdamWConfig::default()
        });
        opt.update(&mut params, &grads);
        let p = params.get("p").unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::row_vector(vec![3.0]));
        grads.insert("b".to_string(), Tensor::row_vector(vec![4.0]));
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }
}
