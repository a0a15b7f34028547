use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use super::{Arch, ModelConfig, NeuralError};
use crate::pipeline::FEATURES;

const LN_EPS: f64 = 1e-5;

/// Named parameter tensors, iterated in name order.
pub type Params = BTreeMap<String, Mat>;

/// A model: configuration plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Parameters loaded onto a tape for one pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Dropout state for a forward pass; `None` means inference.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

struct Init<'a> {
    params: Params,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn glorot(&mut self, name: String, rows: usize, cols: usize) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-limit..=limit)).collect();
        self.params.insert(name, Mat::from_vec(rows, cols, data));
    }

    fn constant(&mut self, name: String, cols: usize, v: f64) {
        self.params.insert(name, Mat::filled(1, cols, v));
    }
}

fn rnn_prefix(arch: Arch) -> &'static str {
    match arch {
        Arch::Gru => "gru",
        Arch::Lstm => "lstm",
        Arch::Transformer => "tf",
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases, unit norm gains.
    pub fn new(config: ModelConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { params: Params::new(), rng: &mut rng };
        let m = config.m_fwd;
        match config.arch {
            Arch::Gru | Arch::Lstm => {
                let h = config.rnn.nodes_per_layer;
                let gates = if config.arch == Arch::Gru { 3 } else { 4 };
                let p = rnn_prefix(config.arch);
                for l in 0..config.rnn.layers {
                    let input = if l == 0 { FEATURES } else { h };
                    init.glorot(format!("{p}{l}.w"), input, gates * h);
                    init.glorot(format!("{p}{l}.u"), h, gates * h);
                    init.constant(format!("{p}{l}.b"), gates * h, 0.0);
                    if config.arch == Arch::Gru {
                        init.constant(format!("{p}{l}.bh"), gates * h, 0.0);
                    } else {
                        let b = init.params.get_mut(&format!("{p}{l}.b")).expect("just inserted");
                        b.data[h..2 * h].fill(1.0);
                    }
                }
                init.glorot("head.w".into(), h, m);
                init.constant("head.b".into(), m, 0.0);
            }
            Arch::Transformer => {
                let t = &config.transformer;
                let d = t.heads * t.head_size;
                init.glorot("tf.in.w".into(), FEATURES, d);
                init.constant("tf.in.b".into(), d, 0.0);
                for b in 0..t.blocks {
                    for ln in ["ln1", "ln2"] {
                        init.constant(format!("tf.{b}.{ln}.g"), d, 1.0);
                        init.constant(format!("tf.{b}.{ln}.b"), d, 0.0);
                    }
                    for w in ["q", "k", "v", "o"] {
                        init.glorot(format!("tf.{b}.attn.w{w}"), d, d);
                        init.constant(format!("tf.{b}.attn.b{w}"), d, 0.0);
                    }
                    init.glorot(format!("tf.{b}.ff.w1"), d, t.ff_dim);
                    init.constant(format!("tf.{b}.ff.b1"), t.ff_dim, 0.0);
                    init.glorot(format!("tf.{b}.ff.w2"), t.ff_dim, d);
                    init.constant(format!("tf.{b}.ff.b2"), d, 0.0);
                }
                init.constant("tf.ln.g".into(), d, 1.0);
                init.constant("tf.ln.b".into(), d, 0.0);
                init.glorot("tf.mlp.w".into(), d, t.mlp_units);
                init.constant("tf.mlp.b".into(), t.mlp_units, 0.0);
                init.glorot("head.w".into(), t.mlp_units, m);
                init.constant("head.b".into(), m, 0.0);
            }
        }
        Ok(Self { config, params: init.params })
    }

    /// Same shapes as [`Model::new`], every value zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self, NeuralError> {
        let mut model = Self::new(config)?;
        for p in model.params.values_mut() {
            p.data.fill(0.0);
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    /// Forward pass on a batch of windows; returns a `batch x m_fwd` output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        xs: &[Vec<[f64; FEATURES]>],
        dropout: Option<&mut DropoutCtx>,
    ) -> Result<Var, NeuralError> {
        let n = self.config.n_back;
        if xs.is_empty() {
            return Err(NeuralError::ShapeMismatch("empty batch".into()));
        }
        if let Some(bad) = xs.iter().find(|x| x.len() != n) {
            return Err(NeuralError::ShapeMismatch(format!("window has {} rows, model expects {n}", bad.len())));
        }
        let readout = match self.config.arch {
            Arch::Gru | Arch::Lstm => self.rnn_forward(tape, bound, xs, dropout),
            Arch::Transformer => {
                let enc = self.encode(tape, bound, xs, dropout);
                let pooled = tape.group_mean_rows(enc, n);
                let h = tape.matmul(pooled, bound.var("tf.mlp.w"));
                let h = tape.add_row(h, bound.var("tf.mlp.b"));
                tape.relu(h)
            }
        };
        let out = tape.matmul(readout, bound.var("head.w"));
        let out = tape.add_row(out, bound.var("head.b"));
        Ok(tape.tanh(out))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, p: f64, ctx: &mut Option<&mut DropoutCtx>) -> Var {
        let Some(ctx) = ctx.as_deref_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..rows * cols).map(|_| if ctx.rng.random_bool(1.0 - p) { keep } else { 0.0 }).collect();
        let mv = tape.leaf(Mat::from_vec(rows, cols, mask));
        tape.mul(x, mv)
    }

    fn rnn_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        xs: &[Vec<[f64; FEATURES]>],
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Var {
        let cfg = &self.config.rnn;
        let h = cfg.nodes_per_layer;
        let b = xs.len();
        let p = rnn_prefix(self.config.arch);
        let mut seq: Vec<Var> = (0..self.config.n_back)
            .map(|t| tape.leaf(Mat::from_vec(b, FEATURES, xs.iter().flat_map(|x| x[t]).collect())))
            .collect();
        for l in 0..cfg.layers {
            if l > 0 {
                seq = seq.into_iter().map(|v| self.dropout(tape, v, cfg.dropout, &mut dropout)).collect();
            }
            let w = bound.var(&format!("{p}{l}.w"));
            let u = bound.var(&format!("{p}{l}.u"));
            let bias = bound.var(&format!("{p}{l}.b"));
            let mut state = tape.leaf(Mat::zeros(b, h));
            let mut cell = tape.leaf(Mat::zeros(b, h));
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                let xw = tape.matmul(x, w);
                let xw = tape.add_row(xw, bias);
                let hu = tape.matmul(state, u);
                match self.config.arch {
                    Arch::Gru => {
                        let hu = tape.add_row(hu, bound.var(&format!("{p}{l}.bh")));
                        let gate = |tape: &mut Tape, k: usize| {
                            let a = tape.slice_cols(xw, k * h, h);
                            let c = tape.slice_cols(hu, k * h, h);
                            let s = tape.add(a, c);
                            tape.sigmoid(s)
                        };
                        let z = gate(tape, 0);
                        let r = gate(tape, 1);
                        let xh = tape.slice_cols(xw, 2 * h, h);
                        let hh = tape.slice_cols(hu, 2 * h, h);
                        let rh = tape.mul(r, hh);
                        let pre = tape.add(xh, rh);
                        let cand = tape.tanh(pre);
                        let diff = tape.sub(state, cand);
                        let zd = tape.mul(z, diff);
                        state = tape.add(cand, zd);
                    }
                    _ => {
                        let gates = tape.add(xw, hu);
                        let i = tape.slice_cols(gates, 0, h);
                        let i = tape.sigmoid(i);
                        let f = tape.slice_cols(gates, h, h);
                        let f = tape.sigmoid(f);
                        let g = tape.slice_cols(gates, 2 * h, h);
                        let g = tape.tanh(g);
                        let o = tape.slice_cols(gates, 3 * h, h);
                        let o = tape.sigmoid(o);
                        let fc = tape.mul(f, cell);
                        let ig = tape.mul(i, g);
                        cell = tape.add(fc, ig);
                        let tc = tape.tanh(cell);
                        state = tape.mul(o, tc);
                    }
                }
                out.push(state);
            }
            seq = out;
        }
        *seq.last().expect("n_back >= 1")
    }

    fn layer_norm(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.mul_row(n, bound.var(&format!("{prefix}.g")));
        tape.add_row(g, bound.var(&format!("{prefix}.b")))
    }

    fn affine(&self, tape: &mut Tape, bound: &Bound, x: Var, w: &str, b: &str) -> Var {
        let y = tape.matmul(x, bound.var(w));
        tape.add_row(y, bound.var(b))
    }

    /// Encoder output, one row per window position (`batch * n_back` rows).
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        xs: &[Vec<[f64; FEATURES]>],
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Var {
        let t = &self.config.transformer;
        let n = self.config.n_back;
        let d = t.heads * t.head_size;
        let rows = xs.len() * n;
        let input = tape.leaf(Mat::from_vec(rows, FEATURES, xs.iter().flatten().flatten().copied().collect()));
        let mut hid = self.affine(tape, bound, input, "tf.in.w", "tf.in.b");
        if t.positional_encoding {
            let pe = positional_encoding(n, d);
            let tiled = Mat::from_vec(rows, d, (0..xs.len()).flat_map(|_| pe.data.iter().copied()).collect());
            let pv = tape.leaf(tiled);
            hid = tape.add(hid, pv);
        }
        let scale = 1.0 / (t.head_size as f64).sqrt();
        for blk in 0..t.blocks {
            let a = self.layer_norm(tape, bound, hid, &format!("tf.{blk}.ln1"));
            let proj = |tape: &mut Tape, w: &str| {
                self.affine(tape, bound, a, &format!("tf.{blk}.attn.w{w}"), &format!("tf.{blk}.attn.b{w}"))
            };
            let (q, k, v) = (proj(tape, "q"), proj(tape, "k"), proj(tape, "v"));
            let heads: Vec<Var> = (0..t.heads)
                .map(|hd| {
                    let qh = tape.slice_cols(q, hd * t.head_size, t.head_size);
                    let kh = tape.slice_cols(k, hd * t.head_size, t.head_size);
                    let vh = tape.slice_cols(v, hd * t.head_size, t.head_size);
                    let s = tape.group_matmul_nt(qh, kh, n);
                    let s = tape.scale(s, scale);
                    let p = tape.softmax_rows(s);
                    tape.group_matmul(p, vh, n)
                })
                .collect();
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = self.affine(tape, bound, cat, &format!("tf.{blk}.attn.wo"), &format!("tf.{blk}.attn.bo"));
            let o = self.dropout(tape, o, t.dropout, &mut dropout);
            hid = tape.add(hid, o);

            let f = self.layer_norm(tape, bound, hid, &format!("tf.{blk}.ln2"));
            let f = self.affine(tape, bound, f, &format!("tf.{blk}.ff.w1"), &format!("tf.{blk}.ff.b1"));
            let f = tape.relu(f);
            let f = self.affine(tape, bound, f, &format!("tf.{blk}.ff.w2"), &format!("tf.{blk}.ff.b2"));
            let f = self.dropout(tape, f, t.dropout, &mut dropout);
            hid = tape.add(hid, f);
        }
        self.layer_norm(tape, bound, hid, "tf.ln")
    }

    /// Inference on any number of windows, in chunks of `batch`.
    pub fn predict(&self, xs: &[Vec<[f64; FEATURES]>], batch: usize) -> Result<Vec<Vec<f64>>, NeuralError> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let y = self.forward(&mut tape, &bound, chunk, None)?;
            let v = tape.value(y);
            out.extend((0..v.rows).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }
}

/// Sinusoidal position encoding, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
